//! Fixed, stochastic and mixed expert-masking schedules.
//!
//! * fixed: layer `l` keeps its first `counts[l]` expert slots for the whole
//!   run; the trailing slots are never trained nor used.
//! * stochastic: every layer has `r` slots and drops each one per step with
//!   probability `probs[l]`, scaling survivors by `1 / (1 - probs[l])`.
//! * mixed: a fixed allocation with uniform stochastic dropout on the
//!   surviving slots.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{param_err, Result};
use crate::experts::MaskSample;
use crate::rng::{self, Site};

/// Layer count of the named presets.
pub const PRESET_LAYERS: usize = 12;
/// Total expert budget of the named presets (12 layers × 8 experts).
pub const PRESET_BUDGET: usize = 96;
/// Inclusive range of the random fixed allocation.
pub const RANDOM_RANGE: (usize, usize) = (1, 14);

const FIXED_INCREMENTAL: [usize; 12] = [2, 2, 2, 6, 6, 6, 10, 10, 10, 14, 14, 14];
const FIXED_DECREMENTAL: [usize; 12] = [14, 14, 14, 10, 10, 10, 6, 6, 6, 2, 2, 2];
const FIXED_HOURGLASS: [usize; 12] = [14, 14, 14, 2, 2, 2, 2, 2, 2, 14, 14, 14];
const FIXED_PROTRUDING: [usize; 12] = [2, 2, 2, 14, 14, 14, 14, 14, 14, 2, 2, 2];

const DROP_INCREMENTAL: [f64; 12] = [0.8, 0.8, 0.7, 0.7, 0.6, 0.6, 0.5, 0.4, 0.3, 0.2, 0.1, 0.0];
const DROP_DECREMENTAL: [f64; 12] = [0.0, 0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.6, 0.7, 0.7, 0.8, 0.8];
const DROP_HOURGLASS: [f64; 12] = [0.0, 0.1, 0.3, 0.5, 0.6, 0.8, 0.8, 0.6, 0.5, 0.3, 0.1, 0.0];
const DROP_PROTRUDING: [f64; 12] = [0.8, 0.6, 0.5, 0.3, 0.1, 0.0, 0.0, 0.1, 0.3, 0.5, 0.6, 0.8];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Strategy {
    Fixed,
    Stochastic,
    Mixed,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Pattern {
    Incremental,
    Decremental,
    Hourglass,
    Protruding,
    Random,
    Uniform,
}

impl Pattern {
    pub const ALL: [Pattern; 6] = [
        Pattern::Incremental,
        Pattern::Decremental,
        Pattern::Hourglass,
        Pattern::Protruding,
        Pattern::Random,
        Pattern::Uniform,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Pattern::Incremental => "incremental",
            Pattern::Decremental => "decremental",
            Pattern::Hourglass => "hourglass",
            Pattern::Protruding => "protruding",
            Pattern::Random => "random",
            Pattern::Uniform => "uniform",
        }
    }
}

impl fmt::Display for Pattern {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Pattern {
    type Err = crate::Error;

    fn from_str(s: &str) -> Result<Self> {
        Pattern::ALL
            .into_iter()
            .find(|p| p.name() == s)
            .ok_or_else(|| param_err(format!("unknown masking pattern `{s}`")))
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Strategy::Fixed => "fixed",
            Strategy::Stochastic => "stochastic",
            Strategy::Mixed => "mixed",
        })
    }
}

impl FromStr for Strategy {
    type Err = crate::Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fixed" => Ok(Strategy::Fixed),
            "stochastic" => Ok(Strategy::Stochastic),
            "mixed" => Ok(Strategy::Mixed),
            _ => Err(param_err(format!("unknown masking strategy `{s}`"))),
        }
    }
}

/// Per-layer expert counts of a fixed allocation.
///
/// Named presets need 12 layers and a budget of 96. `uniform` spreads any
/// budget evenly; `random` rejection-samples counts in `[1, 14]` until they
/// sum to the budget.
pub fn fixed_pattern(pattern: Pattern, layers: usize, budget: usize, seed: u64) -> Result<Vec<usize>> {
    let preset = |counts: [usize; 12]| -> Result<Vec<usize>> {
        if layers != PRESET_LAYERS || budget != PRESET_BUDGET {
            return Err(param_err(format!(
                "fixed `{pattern}` pattern is defined for {PRESET_LAYERS} layers and budget {PRESET_BUDGET}, got {layers} and {budget}"
            )));
        }
        Ok(counts.to_vec())
    };
    match pattern {
        Pattern::Incremental => preset(FIXED_INCREMENTAL),
        Pattern::Decremental => preset(FIXED_DECREMENTAL),
        Pattern::Hourglass => preset(FIXED_HOURGLASS),
        Pattern::Protruding => preset(FIXED_PROTRUDING),
        Pattern::Uniform => {
            if layers == 0 || !budget.is_multiple_of(layers) || budget == 0 {
                return Err(param_err(format!("budget {budget} does not split evenly over {layers} layers")));
            }
            Ok(vec![budget / layers; layers])
        }
        Pattern::Random => random_allocation(layers, budget, seed),
    }
}

fn random_allocation(layers: usize, budget: usize, seed: u64) -> Result<Vec<usize>> {
    let (lo, hi) = RANDOM_RANGE;
    if layers == 0 || budget < lo * layers || budget > hi * layers {
        return Err(param_err(format!(
            "budget {budget} is infeasible for {layers} layers with counts in [{lo}, {hi}]"
        )));
    }
    const MAX_ATTEMPTS: u32 = 1_000_000;
    let mut r = rng::stream(seed, Site::Pattern { attempt: 0 });
    for _ in 0..MAX_ATTEMPTS {
        let counts: Vec<usize> = (0..layers).map(|_| r.random_range(lo..=hi)).collect();
        if counts.iter().sum::<usize>() == budget {
            return Ok(counts);
        }
    }
    Err(param_err(format!(
        "no random allocation summing to {budget} found in {MAX_ATTEMPTS} draws"
    )))
}

/// Per-layer drop probabilities of a stochastic schedule.
///
/// `uniform` repeats `p`; the named presets need 12 layers.
pub fn stochastic_schedule(pattern: Pattern, layers: usize, p: f64) -> Result<Vec<f64>> {
    let preset = |probs: [f64; 12]| -> Result<Vec<f64>> {
        if layers != PRESET_LAYERS {
            return Err(param_err(format!(
                "stochastic `{pattern}` pattern is defined for {PRESET_LAYERS} layers, got {layers}"
            )));
        }
        Ok(probs.to_vec())
    };
    match pattern {
        Pattern::Incremental => preset(DROP_INCREMENTAL),
        Pattern::Decremental => preset(DROP_DECREMENTAL),
        Pattern::Hourglass => preset(DROP_HOURGLASS),
        Pattern::Protruding => preset(DROP_PROTRUDING),
        Pattern::Uniform => {
            check_probability(p)?;
            Ok(vec![p; layers])
        }
        Pattern::Random => Err(param_err("no random pattern exists for stochastic masking")),
    }
}

fn check_probability(p: f64) -> Result<()> {
    if (0.0..1.0).contains(&p) {
        Ok(())
    } else {
        Err(param_err(format!("drop probability must lie in [0, 1), got {p}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MaskMode {
    Train,
    Inference,
}

/// A resolved masking strategy for a concrete model depth.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaskSchedule {
    pub strategy: Strategy,
    pub pattern: Pattern,
    /// Experts allocated per layer.
    pub counts: Vec<usize>,
    /// Drop probability per layer (all zero for fixed masking).
    pub probs: Vec<f64>,
    /// Seed of the random fixed allocation.
    pub seed: u64,
}

impl MaskSchedule {
    /// `r` experts per layer, dropped with the pattern's probabilities.
    pub fn stochastic(pattern: Pattern, layers: usize, r: usize, p: f64) -> Result<Self> {
        Self::from_parts(
            Strategy::Stochastic,
            pattern,
            vec![r; layers],
            stochastic_schedule(pattern, layers, p)?,
            0,
        )
    }

    /// Permanent allocation with a total of `budget` experts.
    pub fn fixed(pattern: Pattern, layers: usize, budget: usize, seed: u64) -> Result<Self> {
        let counts = fixed_pattern(pattern, layers, budget, seed)?;
        Self::from_parts(Strategy::Fixed, pattern, counts, vec![0.0; layers], seed)
    }

    /// Permanent allocation plus uniform dropout `p` on the surviving slots.
    pub fn mixed(pattern: Pattern, layers: usize, budget: usize, p: f64, seed: u64) -> Result<Self> {
        check_probability(p)?;
        let counts = fixed_pattern(pattern, layers, budget, seed)?;
        Self::from_parts(Strategy::Mixed, pattern, counts, vec![p; layers], seed)
    }

    /// No masking at all: `r` always-on experts per layer.
    pub fn disabled(layers: usize, r: usize) -> Self {
        MaskSchedule {
            strategy: Strategy::Stochastic,
            pattern: Pattern::Uniform,
            counts: vec![r; layers],
            probs: vec![0.0; layers],
            seed: 0,
        }
    }

    /// Builds a schedule from explicit per-layer values and validates it.
    pub fn from_parts(
        strategy: Strategy,
        pattern: Pattern,
        counts: Vec<usize>,
        probs: Vec<f64>,
        seed: u64,
    ) -> Result<Self> {
        if counts.is_empty() || counts.len() != probs.len() {
            return Err(param_err(format!(
                "schedule needs one count and one probability per layer, got {} and {}",
                counts.len(),
                probs.len()
            )));
        }
        if counts.contains(&0) {
            return Err(param_err("every layer needs at least one expert"));
        }
        for &p in &probs {
            check_probability(p)?;
        }
        match strategy {
            Strategy::Fixed if probs.iter().any(|&p| p != 0.0) => {
                return Err(param_err("fixed masking has no dropout"));
            }
            Strategy::Stochastic if counts.iter().any(|&c| c != counts[0]) => {
                return Err(param_err("stochastic masking needs the same expert count in every layer"));
            }
            Strategy::Mixed if probs.iter().any(|&p| p != probs[0]) => {
                return Err(param_err("mixed masking uses one probability for all layers"));
            }
            _ => {}
        }
        Ok(MaskSchedule {
            strategy,
            pattern,
            counts,
            probs,
            seed,
        })
    }

    pub fn layers(&self) -> usize {
        self.counts.len()
    }

    /// Expert slots each layer's bank is built with.
    pub fn slots(&self) -> usize {
        self.counts.iter().copied().max().unwrap_or(0)
    }

    /// Slot activity per layer: the first `counts[l]` slots are live.
    pub fn layout(&self) -> Vec<Vec<bool>> {
        let slots = self.slots();
        self.counts.iter().map(|&c| (0..slots).map(|i| i < c).collect()).collect()
    }

    /// Experts (fixed) or expert slots (stochastic, mixed) over all layers.
    pub fn budget(&self) -> usize {
        self.counts.iter().sum()
    }

    /// Expected number of experts switched on in a training step, per layer.
    pub fn expected_active(&self) -> Vec<f64> {
        self.counts
            .iter()
            .zip(&self.probs)
            .map(|(&c, &p)| c as f64 * (1.0 - p))
            .collect()
    }

    /// One mask for `layer`.
    ///
    /// Training draws one uniform per live slot from `rng`; a slot survives
    /// when the draw is at least `p`, so it is kept with probability `1 - p`.
    /// Inference keeps every live slot at scale 1.
    pub fn sample_mask<R: Rng + ?Sized>(&self, layer: usize, mode: MaskMode, rng: &mut R) -> Result<MaskSample> {
        if layer >= self.layers() {
            return Err(param_err(format!("layer {layer} outside a {}-layer schedule", self.layers())));
        }
        let p = self.probs[layer];
        check_probability(p)?;
        let count = self.counts[layer];
        let slots = self.slots();
        if mode == MaskMode::Inference || self.strategy == Strategy::Fixed || p == 0.0 {
            return Ok(MaskSample {
                layer_id: layer,
                bits: (0..slots).map(|i| i < count).collect(),
                scale: 1.0,
            });
        }
        let bits = (0..slots).map(|i| i < count && rng::uniform(rng) >= p).collect();
        Ok(MaskSample {
            layer_id: layer,
            bits,
            scale: 1.0 / (1.0 - p),
        })
    }

    /// Masks for every layer of training step `step`, each from its own stream.
    pub fn step_masks(&self, step: u64, seed: u64, mode: MaskMode) -> Result<Vec<MaskSample>> {
        (0..self.layers())
            .map(|l| {
                let mut r = rng::stream(
                    seed,
                    Site::Dropout {
                        step,
                        layer: l as u32,
                    },
                );
                self.sample_mask(l, mode, &mut r)
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::Error;

    #[test]
    fn fixed_presets() {
        assert_eq!(
            fixed_pattern(Pattern::Incremental, 12, 96, 0).unwrap(),
            vec![2, 2, 2, 6, 6, 6, 10, 10, 10, 14, 14, 14]
        );
        assert_eq!(
            fixed_pattern(Pattern::Decremental, 12, 96, 0).unwrap(),
            vec![14, 14, 14, 10, 10, 10, 6, 6, 6, 2, 2, 2]
        );
        for p in Pattern::ALL {
            let counts = fixed_pattern(p, 12, 96, 5).unwrap();
            assert_eq!(counts.len(), 12);
            assert_eq!(counts.iter().sum::<usize>(), 96, "{p}");
        }
    }

    #[test]
    fn random_allocation_respects_bounds_and_seed() {
        for seed in 0..20 {
            let c = fixed_pattern(Pattern::Random, 12, 96, seed).unwrap();
            assert!(c.iter().all(|&v| (1..=14).contains(&v)));
            assert_eq!(c.iter().sum::<usize>(), 96);
            assert_eq!(c, fixed_pattern(Pattern::Random, 12, 96, seed).unwrap());
        }
        assert!(matches!(fixed_pattern(Pattern::Random, 12, 200, 0), Err(Error::Parameter(_))));
    }

    #[test]
    fn presets_need_their_geometry() {
        assert!(fixed_pattern(Pattern::Hourglass, 4, 32, 0).is_err());
        assert!(stochastic_schedule(Pattern::Hourglass, 4, 0.5).is_err());
        assert_eq!(fixed_pattern(Pattern::Uniform, 4, 32, 0).unwrap(), vec![8; 4]);
        assert!("diagonal".parse::<Pattern>().is_err());
    }

    #[test]
    fn stochastic_presets() {
        assert_eq!(
            stochastic_schedule(Pattern::Incremental, 12, 0.0).unwrap(),
            vec![0.8, 0.8, 0.7, 0.7, 0.6, 0.6, 0.5, 0.4, 0.3, 0.2, 0.1, 0.0]
        );
        assert_eq!(
            stochastic_schedule(Pattern::Hourglass, 12, 0.0).unwrap(),
            vec![0.0, 0.1, 0.3, 0.5, 0.6, 0.8, 0.8, 0.6, 0.5, 0.3, 0.1, 0.0]
        );
        assert_eq!(stochastic_schedule(Pattern::Uniform, 12, 0.5).unwrap(), vec![0.5; 12]);
        assert!(stochastic_schedule(Pattern::Random, 12, 0.5).is_err());
    }

    #[test]
    fn zero_probability_keeps_everything() {
        let s = MaskSchedule::stochastic(Pattern::Uniform, 2, 8, 0.0).unwrap();
        let mut r = rng::stream(0, Site::Plain);
        let m = s.sample_mask(0, MaskMode::Train, &mut r).unwrap();
        assert_eq!(m.bits, vec![true; 8]);
        assert_eq!(m.scale, 1.0);
    }

    #[test]
    fn keep_frequency_at_half() {
        let s = MaskSchedule::stochastic(Pattern::Uniform, 1, 8, 0.5).unwrap();
        let mut r = rng::stream(4, Site::Plain);
        let n = 20_000;
        let mut kept = [0usize; 8];
        for _ in 0..n {
            let m = s.sample_mask(0, MaskMode::Train, &mut r).unwrap();
            assert_eq!(m.scale, 2.0);
            for (k, &b) in kept.iter_mut().zip(&m.bits) {
                *k += usize::from(b);
            }
        }
        for k in kept {
            let f = k as f64 / n as f64;
            assert!((0.49..=0.51).contains(&f), "keep frequency {f}");
        }
    }

    #[test]
    fn fixed_masks_are_permanent() {
        let s = MaskSchedule::fixed(Pattern::Incremental, 12, 96, 0).unwrap();
        assert_eq!(s.slots(), 14);
        for step in 0..5 {
            let masks = s.step_masks(step, 3, MaskMode::Train).unwrap();
            let mut expect = vec![false; 14];
            expect[..2].fill(true);
            assert_eq!(masks[0].bits, expect);
            assert_eq!(masks[0].scale, 1.0);
        }
        let inf = s.step_masks(0, 3, MaskMode::Inference).unwrap();
        assert_eq!(inf[0].popcount(), 2);
    }

    #[test]
    fn inference_is_complete_and_unscaled() {
        let s = MaskSchedule::stochastic(Pattern::Incremental, 12, 8, 0.0).unwrap();
        for m in s.step_masks(7, 1, MaskMode::Inference).unwrap() {
            assert_eq!(m.bits, vec![true; 8]);
            assert_eq!(m.scale, 1.0);
        }
    }

    #[test]
    fn mixed_drops_only_live_slots() {
        let s = MaskSchedule::mixed(Pattern::Incremental, 12, 96, 0.5, 0).unwrap();
        for step in 0..50 {
            let masks = s.step_masks(step, 2, MaskMode::Train).unwrap();
            assert!(masks[0].bits[2..].iter().all(|&b| !b));
            assert_eq!(masks[0].scale, 2.0);
        }
    }

    #[test]
    fn same_seed_same_sequence() {
        let s = MaskSchedule::stochastic(Pattern::Uniform, 3, 8, 0.5).unwrap();
        let a: Vec<_> = (0..10).map(|t| s.step_masks(t, 9, MaskMode::Train).unwrap()).collect();
        let b: Vec<_> = (0..10).map(|t| s.step_masks(t, 9, MaskMode::Train).unwrap()).collect();
        assert_eq!(a, b);
    }

    #[test]
    fn invalid_probabilities() {
        assert!(MaskSchedule::stochastic(Pattern::Uniform, 2, 8, 1.0).is_err());
        assert!(MaskSchedule::from_parts(Strategy::Stochastic, Pattern::Uniform, vec![8], vec![1.2], 0).is_err());
        let s = MaskSchedule::stochastic(Pattern::Uniform, 2, 8, 0.5).unwrap();
        let mut r = rng::stream(0, Site::Plain);
        assert!(s.sample_mask(2, MaskMode::Train, &mut r).is_err());
    }

    #[test]
    fn expected_survivors() {
        let s = MaskSchedule::stochastic(Pattern::Incremental, 12, 8, 0.0).unwrap();
        let e = s.expected_active();
        assert!((e[0] - 1.6).abs() < 1e-12);
        assert_eq!(e[11], 8.0);
    }
}
