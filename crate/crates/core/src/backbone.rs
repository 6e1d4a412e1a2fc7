//! A small frozen pre-norm transformer encoder with expert banks on its
//! fused Q-K-V projections.
//!
//! Input batches hold `tokens` consecutive rows per sample, each of width
//! `token_dim`. Every block computes
//!
//! ```text
//! u   = LN1(h)
//! qkv = u·W0 + u·ΔW + b_qkv
//! h   = h + attention(qkv)·W_out + b_out
//! h   = h + GELU(LN2(h)·W_1 + b_1)·W_2 + b_2
//! ```
//!
//! followed by a final layer norm, mean pooling over tokens and a trainable
//! linear head. Only the head and the expert factors are trainable.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{param_err, shape_err, Result};
use crate::experts::{merge, AdapterFlags, BankLeaves, BankSpec, ExpertBank, MaskSample};
use crate::masking::{MaskMode, MaskSchedule};
use crate::numerics::{gaussian_at, Matrix, Tape, Var};
use crate::rng::{self, Site};
use crate::{Error, Scalar};

const LN_EPS: f64 = 1e-5;
const HEAD_STD: f64 = 0.02;
const POS_STD: f64 = 0.1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BackboneConfig {
    pub blocks: usize,
    pub dim: usize,
    pub heads: usize,
    pub patch_tokens: usize,
    /// Width of one input token.
    pub token_dim: usize,
    /// Hidden width of the MLP as a multiple of `dim`.
    pub mlp_ratio: usize,
    pub n_classes: usize,
    pub seed: u64,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        BackboneConfig {
            blocks: 12,
            dim: 64,
            heads: 4,
            patch_tokens: 16,
            token_dim: 16,
            mlp_ratio: 2,
            n_classes: 10,
            seed: 0,
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("blocks", self.blocks),
            ("dim", self.dim),
            ("heads", self.heads),
            ("patch_tokens", self.patch_tokens),
            ("token_dim", self.token_dim),
            ("mlp_ratio", self.mlp_ratio),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(param_err(format!("backbone.{name} must be positive")));
        }
        if !self.dim.is_multiple_of(self.heads) {
            return Err(param_err(format!(
                "backbone.dim {} is not divisible by {} heads",
                self.dim, self.heads
            )));
        }
        if self.n_classes < 2 {
            return Err(param_err("backbone.n_classes must be at least 2"));
        }
        Ok(())
    }

    pub fn mlp_dim(&self) -> usize {
        self.dim * self.mlp_ratio
    }
}

/// How expert banks are placed on the projections.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdapterSpec {
    /// Expert slots per block.
    pub r: usize,
    pub sub_rank: usize,
    pub coeff_init: f64,
    pub init_std: f64,
    pub flags: AdapterFlags,
}

impl Default for AdapterSpec {
    fn default() -> Self {
        AdapterSpec {
            r: 8,
            sub_rank: 1,
            coeff_init: 1.0,
            init_std: 0.02,
            flags: AdapterFlags::default(),
        }
    }
}

/// Frozen weights of one transformer block.
#[derive(Debug, Clone, PartialEq)]
pub struct Block<T: Scalar> {
    pub ln1_g: Matrix<T>,
    pub ln1_b: Matrix<T>,
    pub w_qkv: Matrix<T>,
    pub b_qkv: Matrix<T>,
    pub w_out: Matrix<T>,
    pub b_out: Matrix<T>,
    pub ln2_g: Matrix<T>,
    pub ln2_b: Matrix<T>,
    pub w_fc1: Matrix<T>,
    pub b_fc1: Matrix<T>,
    pub w_fc2: Matrix<T>,
    pub b_fc2: Matrix<T>,
}

const BLOCK_TENSORS: [&str; 12] = [
    "ln1_g", "ln1_b", "w_qkv", "b_qkv", "w_out", "b_out", "ln2_g", "ln2_b", "w_fc1", "b_fc1", "w_fc2", "b_fc2",
];

impl<T: Scalar> Block<T> {
    fn tensors(&self) -> [&Matrix<T>; 12] {
        [
            &self.ln1_g,
            &self.ln1_b,
            &self.w_qkv,
            &self.b_qkv,
            &self.w_out,
            &self.b_out,
            &self.ln2_g,
            &self.ln2_b,
            &self.w_fc1,
            &self.b_fc1,
            &self.w_fc2,
            &self.b_fc2,
        ]
    }
}

/// Selects how a bank's `ΔW` is put on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DeltaRoute {
    /// Masked, coefficient-weighted expert assembly.
    Experts,
    /// Plain `B·A` product; only valid for unit weights and full masks.
    DenseReference,
}

/// One forward pass's stochastic context.
#[derive(Debug, Clone, Copy)]
pub struct Pass<'s> {
    pub mode: MaskMode,
    pub step: u64,
    pub seed: u64,
    pub schedule: Option<&'s MaskSchedule>,
}

impl<'s> Pass<'s> {
    pub fn inference() -> Self {
        Pass {
            mode: MaskMode::Inference,
            step: 0,
            seed: 0,
            schedule: None,
        }
    }

    pub fn train(schedule: &'s MaskSchedule, step: u64, seed: u64) -> Self {
        Pass {
            mode: MaskMode::Train,
            step,
            seed,
            schedule: Some(schedule),
        }
    }
}

/// Tape handles of a forward pass.
#[derive(Debug, Clone)]
pub struct ForwardPass {
    pub logits: Var,
    pub head_w: Var,
    pub head_b: Var,
    pub banks: Vec<BankLeaves>,
    pub masks: Vec<MaskSample>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BackboneModel<T: Scalar> {
    config: BackboneConfig,
    embed: Matrix<T>,
    pos: Matrix<T>,
    blocks: Vec<Block<T>>,
    lnf_g: Matrix<T>,
    lnf_b: Matrix<T>,
    head_w: Matrix<T>,
    head_b: Matrix<T>,
    adapters: Option<Vec<ExpertBank<T>>>,
    merged: bool,
}

impl<T: Scalar> BackboneModel<T> {
    /// Gaussian frozen weights (`std = 1/√fan_in`), unit norms, zero biases
    /// and a small Gaussian head, all from `config.seed`.
    pub fn build(config: &BackboneConfig) -> Result<Self> {
        config.validate()?;
        let (d, m) = (config.dim, config.mlp_dim());
        let seed = config.seed;
        let draw = |rows: usize, cols: usize, std: f64, layer: usize, tensor: u32| {
            gaussian_at::<T>(
                rows,
                cols,
                std,
                seed,
                Site::Backbone {
                    layer: layer as u32,
                    tensor,
                },
            )
        };
        let fan = |n: usize| 1.0 / (n as f64).sqrt();
        let ones = |n| Matrix::filled(1, n, T::one());
        let zeros = |n| Matrix::zeros(1, n);
        let stem = config.blocks;
        let embed = draw(config.token_dim, d, fan(config.token_dim), stem, 0)?;
        let pos = draw(config.patch_tokens, d, POS_STD, stem, 1)?;
        let mut blocks = Vec::with_capacity(config.blocks);
        for l in 0..config.blocks {
            blocks.push(Block {
                ln1_g: ones(d),
                ln1_b: zeros(d),
                w_qkv: draw(d, 3 * d, fan(d), l, 0)?,
                b_qkv: zeros(3 * d),
                w_out: draw(d, d, fan(d), l, 1)?,
                b_out: zeros(d),
                ln2_g: ones(d),
                ln2_b: zeros(d),
                w_fc1: draw(d, m, fan(d), l, 2)?,
                b_fc1: zeros(m),
                w_fc2: draw(m, d, fan(m), l, 3)?,
                b_fc2: zeros(d),
            });
        }
        let head_w = gaussian_at(d, config.n_classes, HEAD_STD, seed, Site::Head)?;
        Ok(BackboneModel {
            config: config.clone(),
            embed,
            pos,
            blocks,
            lnf_g: ones(d),
            lnf_b: zeros(d),
            head_w,
            head_b: zeros(config.n_classes),
            adapters: None,
            merged: false,
        })
    }

    pub fn config(&self) -> &BackboneConfig {
        &self.config
    }

    pub fn blocks(&self) -> &[Block<T>] {
        &self.blocks
    }

    pub fn adapters(&self) -> Option<&[ExpertBank<T>]> {
        self.adapters.as_deref()
    }

    pub fn adapters_mut(&mut self) -> Option<&mut [ExpertBank<T>]> {
        self.adapters.as_deref_mut()
    }

    pub fn is_merged(&self) -> bool {
        self.merged
    }

    pub fn head(&self) -> (&Matrix<T>, &Matrix<T>) {
        (&self.head_w, &self.head_b)
    }

    pub fn head_mut(&mut self) -> (&mut Matrix<T>, &mut Matrix<T>) {
        (&mut self.head_w, &mut self.head_b)
    }

    /// Trainable tensors in tape order: head weight, head bias, then each
    /// bank's `bt`, `a` and, when trainable, `λ`.
    pub fn trainable_mut(&mut self) -> Vec<&mut Matrix<T>> {
        let mut out = vec![&mut self.head_w, &mut self.head_b];
        for bank in self.adapters.iter_mut().flatten() {
            let with_lambda = bank.flags().lambda_trainable();
            let (bt, a, lambda) = bank.factors_mut();
            out.push(bt);
            out.push(a);
            if with_lambda {
                out.push(lambda);
            }
        }
        out
    }

    /// One bank per block with `spec.r` always-live slots.
    pub fn inject_adapters(&mut self, spec: &AdapterSpec, seed: u64) -> Result<()> {
        let counts = vec![spec.r; self.config.blocks];
        self.inject_with_counts(spec, &counts, seed)
    }

    /// One bank per block sized for `schedule`: `schedule.slots()` slots of
    /// which the first `counts[l]` are live in block `l`.
    pub fn inject_for_schedule(&mut self, spec: &AdapterSpec, schedule: &MaskSchedule, seed: u64) -> Result<()> {
        if schedule.layers() != self.config.blocks {
            return Err(param_err(format!(
                "schedule covers {} layers, model has {} blocks",
                schedule.layers(),
                self.config.blocks
            )));
        }
        self.inject_with_counts(spec, &schedule.counts, seed)
    }

    fn inject_with_counts(&mut self, spec: &AdapterSpec, counts: &[usize], seed: u64) -> Result<()> {
        if self.adapters.is_some() {
            return Err(Error::State("adapters are already injected".into()));
        }
        if self.merged {
            return Err(Error::State("cannot inject adapters into a merged model".into()));
        }
        let slots = counts.iter().copied().max().unwrap_or(0);
        if !spec.flags.decomposition && counts.iter().any(|&c| c != slots) {
            return Err(param_err(
                "uneven per-layer expert counts need cellular decomposition",
            ));
        }
        let d = self.config.dim;
        let mut banks = Vec::with_capacity(counts.len());
        for (l, &count) in counts.iter().enumerate() {
            let bank_spec = BankSpec {
                d_in: d,
                d_out: 3 * d,
                experts: slots,
                sub_rank: spec.sub_rank,
                coeff_init: spec.coeff_init,
                init_std: spec.init_std,
                flags: spec.flags,
            };
            let bank = ExpertBank::new(l, &bank_spec, seed)?;
            let bank = if spec.flags.decomposition {
                let active = (0..slots).map(|i| i < count).collect();
                bank.with_active(active)?
            } else {
                bank
            };
            banks.push(bank);
        }
        self.adapters = Some(banks);
        Ok(())
    }

    /// Folds every bank into its projection and drops the adapters.
    pub fn merged(&self) -> Result<Self> {
        let mut out = self.clone();
        if let Some(banks) = out.adapters.take() {
            for (block, bank) in out.blocks.iter_mut().zip(&banks) {
                block.w_qkv = merge(&block.w_qkv, bank)?;
            }
            out.merged = true;
        }
        Ok(out)
    }

    /// Head entries plus every bank's trainable entries.
    pub fn trainable_parameter_count(&self) -> usize {
        let head = self.head_w.len() + self.head_b.len();
        head + self
            .adapters
            .iter()
            .flatten()
            .map(|b| b.trainable_parameter_count())
            .sum::<usize>()
    }

    /// SHA-256 over every frozen tensor's little-endian 64-bit entries.
    pub fn frozen_fingerprint(&self) -> String {
        let mut h = Sha256::new();
        for (_, m) in self.frozen_tensors() {
            h.update((m.rows() as u64).to_le_bytes());
            h.update((m.cols() as u64).to_le_bytes());
            for &v in m.data() {
                h.update(v.as_f64().to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }

    fn frozen_tensors(&self) -> Vec<(String, &Matrix<T>)> {
        let mut out = vec![("embed".to_string(), &self.embed), ("pos".to_string(), &self.pos)];
        for (l, block) in self.blocks.iter().enumerate() {
            for (name, m) in BLOCK_TENSORS.iter().zip(block.tensors()) {
                out.push((format!("block{l}.{name}"), m));
            }
        }
        out.push(("lnf_g".into(), &self.lnf_g));
        out.push(("lnf_b".into(), &self.lnf_b));
        out
    }

    /// Every tensor by name; the flag marks adapter tensors.
    pub fn named_tensors(&self) -> Vec<(String, Matrix<T>, bool)> {
        let mut out: Vec<(String, Matrix<T>, bool)> = self
            .frozen_tensors()
            .into_iter()
            .map(|(n, m)| (n, m.clone(), false))
            .collect();
        out.push(("head_w".into(), self.head_w.clone(), false));
        out.push(("head_b".into(), self.head_b.clone(), false));
        for (l, bank) in self.adapters.iter().flatten().enumerate() {
            let active = bank
                .active()
                .iter()
                .map(|&a| if a { T::one() } else { T::zero() })
                .collect();
            out.push((format!("block{l}.adapter.bt"), bank.bt().clone(), true));
            out.push((format!("block{l}.adapter.a"), bank.a().clone(), true));
            out.push((format!("block{l}.adapter.lambda"), bank.lambda().clone(), true));
            out.push((format!("block{l}.adapter.active"), Matrix::row_vector(active), true));
        }
        out
    }

    /// Rebuilds a model from `named_tensors` output. `adapter` carries the
    /// bank metadata when adapter tensors are present.
    pub fn from_named(
        config: &BackboneConfig,
        adapter: Option<(usize, AdapterFlags)>,
        merged: bool,
        mut tensors: BTreeMap<String, Matrix<T>>,
    ) -> Result<Self> {
        config.validate()?;
        let mut take = |name: String, shape: (usize, usize)| -> Result<Matrix<T>> {
            let m = tensors
                .remove(&name)
                .ok_or_else(|| Error::Format(format!("missing tensor `{name}`")))?;
            if shape != (0, 0) && m.shape() != shape {
                return Err(Error::Format(format!(
                    "tensor `{name}` has shape {:?}, expected {shape:?}",
                    m.shape()
                )));
            }
            Ok(m)
        };
        let (d, mm, c) = (config.dim, config.mlp_dim(), config.n_classes);
        let embed = take("embed".into(), (config.token_dim, d))?;
        let pos = take("pos".into(), (config.patch_tokens, d))?;
        let mut blocks = Vec::with_capacity(config.blocks);
        for l in 0..config.blocks {
            let shapes = [
                (1, d),
                (1, d),
                (d, 3 * d),
                (1, 3 * d),
                (d, d),
                (1, d),
                (1, d),
                (1, d),
                (d, mm),
                (1, mm),
                (mm, d),
                (1, d),
            ];
            let mut ms = Vec::with_capacity(12);
            for (name, shape) in BLOCK_TENSORS.iter().zip(shapes) {
                ms.push(take(format!("block{l}.{name}"), shape)?);
            }
            let mut it = ms.into_iter();
            let mut next = || it.next().expect("twelve block tensors");
            blocks.push(Block {
                ln1_g: next(),
                ln1_b: next(),
                w_qkv: next(),
                b_qkv: next(),
                w_out: next(),
                b_out: next(),
                ln2_g: next(),
                ln2_b: next(),
                w_fc1: next(),
                b_fc1: next(),
                w_fc2: next(),
                b_fc2: next(),
            });
        }
        let lnf_g = take("lnf_g".into(), (1, d))?;
        let lnf_b = take("lnf_b".into(), (1, d))?;
        let head_w = take("head_w".into(), (d, c))?;
        let head_b = take("head_b".into(), (1, c))?;
        let adapters = match adapter {
            None => None,
            Some((sub_rank, flags)) => {
                let mut banks = Vec::with_capacity(config.blocks);
                for l in 0..config.blocks {
                    let bt = take(format!("block{l}.adapter.bt"), (0, 0))?;
                    let a = take(format!("block{l}.adapter.a"), (0, 0))?;
                    let lambda = take(format!("block{l}.adapter.lambda"), (0, 0))?;
                    let active = take(format!("block{l}.adapter.active"), (0, 0))?;
                    let active = active.data().iter().map(|&v| v != T::zero()).collect();
                    let bank = ExpertBank::from_parts(l, sub_rank, bt, a, lambda, active, flags)
                        .map_err(|e| Error::Format(format!("block {l} adapter: {e}")))?;
                    if bank.d_in() != d || bank.d_out() != 3 * d {
                        return Err(Error::Format(format!(
                            "block {l} adapter is {}x{}, expected {d}x{}",
                            bank.d_in(),
                            bank.d_out(),
                            3 * d
                        )));
                    }
                    banks.push(bank);
                }
                Some(banks)
            }
        };
        if let Some(name) = tensors.keys().next() {
            return Err(Error::Format(format!("unexpected tensor `{name}`")));
        }
        Ok(BackboneModel {
            config: config.clone(),
            embed,
            pos,
            blocks,
            lnf_g,
            lnf_b,
            head_w,
            head_b,
            adapters,
            merged,
        })
    }

    /// Per-block masks for `pass`.
    ///
    /// Inference and disabled masking use every live slot unscaled. Without
    /// decomposition the whole rank-r update is one expert and is dropped
    /// as a unit.
    pub fn masks(&self, pass: &Pass<'_>) -> Result<Vec<MaskSample>> {
        let Some(banks) = &self.adapters else {
            return Ok(Vec::new());
        };
        let mut out = Vec::with_capacity(banks.len());
        for (l, bank) in banks.iter().enumerate() {
            if pass.mode == MaskMode::Inference || !bank.flags().masking {
                out.push(bank.inference_mask());
                continue;
            }
            let schedule = pass
                .schedule
                .ok_or_else(|| Error::Contract("training pass without a mask schedule".into()))?;
            if schedule.layers() != banks.len() {
                return Err(shape_err(
                    "masks",
                    format!("schedule has {} layers for {} banks", schedule.layers(), banks.len()),
                ));
            }
            let mut r = rng::stream(
                pass.seed,
                Site::Dropout {
                    step: pass.step,
                    layer: l as u32,
                },
            );
            let mask = if bank.flags().decomposition {
                let m = schedule.sample_mask(l, MaskMode::Train, &mut r)?;
                if m.bits.len() != bank.n_experts() || m.bits.iter().zip(bank.active()).any(|(&b, &a)| b && !a) {
                    return Err(shape_err(
                        "masks",
                        format!("schedule mask for layer {l} does not fit the bank's slots"),
                    ));
                }
                m
            } else {
                let p = schedule.probs[l];
                let keep = rng::uniform(&mut r) >= p;
                MaskSample {
                    layer_id: l,
                    bits: vec![keep],
                    scale: if p > 0.0 { 1.0 / (1.0 - p) } else { 1.0 },
                }
            };
            out.push(mask);
        }
        Ok(out)
    }

    fn delta_dropout_mask(&self, l: usize, q: f64, pass: &Pass<'_>) -> Matrix<T> {
        let d = self.config.dim;
        let mut r = rng::stream(
            pass.seed,
            Site::DeltaDropout {
                step: pass.step,
                layer: l as u32,
            },
        );
        let keep = T::of(1.0 / (1.0 - q));
        Matrix::from_fn(d, 3 * d, |_, _| if rng::uniform(&mut r) >= q { keep } else { T::zero() })
    }

    /// Records the full forward pass on `tape` and returns the logits node.
    pub fn forward_tape<'a>(
        &'a self,
        tape: &mut Tape<'a, T>,
        batch: &'a Matrix<T>,
        pass: &Pass<'_>,
        route: DeltaRoute,
    ) -> Result<ForwardPass> {
        let leaves: Vec<BankLeaves> = self.adapters.iter().flatten().map(|b| b.attach(tape)).collect();
        let head_w = tape.param(&self.head_w);
        let head_b = tape.param(&self.head_b);
        self.record(tape, batch, pass, route, leaves, head_w, head_b)
    }

    /// As `forward_tape`, with the trainable tensors supplied as `leaves`
    /// in `trainable_mut` order instead of attached from the model.
    pub fn forward_with_leaves<'a>(
        &'a self,
        tape: &mut Tape<'a, T>,
        batch: &'a Matrix<T>,
        pass: &Pass<'_>,
        leaves: &[Var],
    ) -> Result<ForwardPass> {
        let mut it = leaves.iter().copied();
        let mut next = || it.next().ok_or_else(|| Error::Contract("too few trainable leaves".into()));
        let head_w = next()?;
        let head_b = next()?;
        let mut banks = Vec::new();
        for bank in self.adapters.iter().flatten() {
            let bt = next()?;
            let a = next()?;
            let lambda = if bank.flags().lambda_trainable() { Some(next()?) } else { None };
            banks.push(BankLeaves { bt, a, lambda });
        }
        let expected = 2 + banks.iter().map(|b| 2 + b.lambda.is_some() as usize).sum::<usize>();
        if leaves.len() != expected {
            return Err(Error::Contract(format!("{} trainable leaves for {expected} tensors", leaves.len())));
        }
        self.record(tape, batch, pass, DeltaRoute::Experts, banks, head_w, head_b)
    }

    #[allow(clippy::too_many_arguments)]
    fn record<'a>(
        &'a self,
        tape: &mut Tape<'a, T>,
        batch: &'a Matrix<T>,
        pass: &Pass<'_>,
        route: DeltaRoute,
        leaves: Vec<BankLeaves>,
        head_w: Var,
        head_b: Var,
    ) -> Result<ForwardPass> {
        let cfg = &self.config;
        let tokens = cfg.patch_tokens;
        if batch.cols() != cfg.token_dim || batch.rows() == 0 || !batch.rows().is_multiple_of(tokens) {
            return Err(shape_err(
                "forward_logits",
                format!(
                    "batch {:?} for {tokens} tokens of width {}",
                    batch.shape(),
                    cfg.token_dim
                ),
            ));
        }
        let n = batch.rows() / tokens;
        let masks = self.masks(pass)?;
        let eps = T::of(LN_EPS);

        let x = tape.constant(batch);
        let embed = tape.constant(&self.embed);
        let emb = tape.matmul(x, embed)?;
        let mut pos_tiled = Matrix::zeros(n * tokens, cfg.dim);
        for s in 0..n {
            for t in 0..tokens {
                pos_tiled.row_mut(s * tokens + t).copy_from_slice(self.pos.row(t));
            }
        }
        let pos = tape.constant_owned(pos_tiled);
        let mut h = tape.add(emb, pos)?;

        for (l, block) in self.blocks.iter().enumerate() {
            let g1 = tape.constant(&block.ln1_g);
            let b1 = tape.constant(&block.ln1_b);
            let u = tape.layer_norm(h, g1, b1, eps)?;
            let w0 = tape.constant(&block.w_qkv);
            let mut qkv = tape.matmul(u, w0)?;
            if let Some(banks) = &self.adapters {
                let bank = &banks[l];
                let delta = match route {
                    DeltaRoute::Experts => bank.delta_on_tape(tape, &leaves[l], &masks[l])?,
                    DeltaRoute::DenseReference => dense_delta(tape, bank, &leaves[l], &masks[l])?,
                };
                let q = bank.flags().delta_dropout;
                let delta = if q > 0.0 && pass.mode == MaskMode::Train {
                    if q >= 1.0 {
                        return Err(param_err(format!("delta dropout must lie in [0, 1), got {q}")));
                    }
                    let keep = tape.constant_owned(self.delta_dropout_mask(l, q, pass));
                    tape.hadamard(delta, keep)?
                } else {
                    delta
                };
                let update = tape.matmul(u, delta)?;
                qkv = tape.add(qkv, update)?;
            }
            let bq = tape.constant(&block.b_qkv);
            let qkv = tape.add_row_bias(qkv, bq)?;
            let att = tape.attention(qkv, tokens, cfg.heads)?;
            let wo = tape.constant(&block.w_out);
            let bo = tape.constant(&block.b_out);
            let o = tape.matmul(att, wo)?;
            let o = tape.add_row_bias(o, bo)?;
            h = tape.add(h, o)?;

            let g2 = tape.constant(&block.ln2_g);
            let b2 = tape.constant(&block.ln2_b);
            let v = tape.layer_norm(h, g2, b2, eps)?;
            let w1 = tape.constant(&block.w_fc1);
            let c1 = tape.constant(&block.b_fc1);
            let f = tape.matmul(v, w1)?;
            let f = tape.add_row_bias(f, c1)?;
            let f = tape.gelu(f)?;
            let w2 = tape.constant(&block.w_fc2);
            let c2 = tape.constant(&block.b_fc2);
            let f = tape.matmul(f, w2)?;
            let f = tape.add_row_bias(f, c2)?;
            h = tape.add(h, f)?;
        }

        let gf = tape.constant(&self.lnf_g);
        let bf = tape.constant(&self.lnf_b);
        let z = tape.layer_norm(h, gf, bf, eps)?;
        let pooled = tape.segment_mean(z, tokens)?;
        let logits = tape.matmul(pooled, head_w)?;
        let logits = tape.add_row_bias(logits, head_b)?;
        Ok(ForwardPass {
            logits,
            head_w,
            head_b,
            banks: leaves,
            masks,
        })
    }

    /// Logits for `batch` (`samples · tokens` rows).
    pub fn forward_logits(&self, batch: &Matrix<T>, pass: &Pass<'_>) -> Result<Matrix<T>> {
        let mut tape = Tape::new();
        let fp = self.forward_tape(&mut tape, batch, pass, DeltaRoute::Experts)?;
        Ok(tape.value(fp.logits).clone())
    }
}

fn dense_delta<T: Scalar>(
    tape: &mut Tape<'_, T>,
    bank: &ExpertBank<T>,
    leaves: &BankLeaves,
    mask: &MaskSample,
) -> Result<Var> {
    let unit = mask.scale == 1.0
        && mask.bits.iter().all(|&b| b)
        && leaves.lambda.is_none()
        && bank.lambda().data().iter().all(|&l| l == T::one());
    if !unit {
        return Err(Error::Contract(
            "the dense reference route needs unit coefficients and a full mask".into(),
        ));
    }
    let b = tape.transpose(leaves.bt)?;
    tape.matmul(b, leaves.a)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::masking::Pattern;
    use crate::numerics::gaussian_init;

    type Model = BackboneModel<f64>;

    fn small() -> BackboneConfig {
        BackboneConfig {
            blocks: 2,
            dim: 16,
            heads: 2,
            patch_tokens: 4,
            token_dim: 8,
            mlp_ratio: 2,
            n_classes: 3,
            seed: 5,
        }
    }

    fn batch(cfg: &BackboneConfig, n: usize, seed: u64) -> Matrix<f64> {
        gaussian_init(n * cfg.patch_tokens, cfg.token_dim, 1.0, seed).unwrap()
    }

    #[test]
    fn build_is_deterministic() {
        let a = Model::build(&small()).unwrap();
        let b = Model::build(&small()).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.frozen_fingerprint(), b.frozen_fingerprint());
    }

    #[test]
    fn invalid_dims_are_rejected() {
        let mut c = small();
        c.heads = 3;
        assert!(matches!(Model::build(&c), Err(Error::Parameter(_))));
        c = small();
        c.blocks = 0;
        assert!(Model::build(&c).is_err());
    }

    #[test]
    fn default_slots_are_fused_width() {
        let mut m = Model::build(&BackboneConfig::default()).unwrap();
        m.inject_adapters(&AdapterSpec::default(), 1).unwrap();
        let banks = m.adapters().unwrap();
        assert_eq!(banks.len(), 12);
        assert!(banks.iter().all(|b| (b.d_in(), b.d_out()) == (64, 192)));
        assert_eq!(banks.iter().map(|b| b.n_experts()).sum::<usize>(), 96);
        assert_eq!(m.trainable_parameter_count(), 12 * 8 * (64 + 192 + 1) + 64 * 10 + 10);
    }

    #[test]
    fn double_injection_is_state_error() {
        let mut m = Model::build(&small()).unwrap();
        m.inject_adapters(&AdapterSpec::default(), 1).unwrap();
        assert!(matches!(m.inject_adapters(&AdapterSpec::default(), 1), Err(Error::State(_))));
    }

    #[test]
    fn injection_leaves_outputs_unchanged() {
        let cfg = small();
        let x = batch(&cfg, 3, 9);
        let mut m = Model::build(&cfg).unwrap();
        let before = m.forward_logits(&x, &Pass::inference()).unwrap();
        m.inject_adapters(&AdapterSpec::default(), 1).unwrap();
        let after = m.forward_logits(&x, &Pass::inference()).unwrap();
        assert_eq!(before, after);
    }

    #[test]
    fn vanilla_mode_has_one_rank_r_expert() {
        let mut m = Model::build(&small()).unwrap();
        let spec = AdapterSpec {
            flags: AdapterFlags::vanilla_lora(),
            ..AdapterSpec::default()
        };
        m.inject_adapters(&spec, 1).unwrap();
        for b in m.adapters().unwrap() {
            assert_eq!((b.n_experts(), b.sub_rank()), (1, 8));
        }
    }

    #[test]
    fn train_at_zero_probability_matches_inference() {
        let cfg = small();
        let x = batch(&cfg, 2, 1);
        let mut m = Model::build(&cfg).unwrap();
        m.inject_adapters(&AdapterSpec::default(), 1).unwrap();
        for bank in m.adapters_mut().unwrap() {
            let (rows, cols) = bank.bt().shape();
            *bank.bt_mut() = gaussian_init(rows, cols, 0.3, 4).unwrap();
        }
        let sched = MaskSchedule::stochastic(Pattern::Uniform, 2, 8, 0.0).unwrap();
        let train = m.forward_logits(&x, &Pass::train(&sched, 3, 2)).unwrap();
        let inf = m.forward_logits(&x, &Pass::inference()).unwrap();
        assert_eq!(train, inf);
        assert_eq!(inf, m.forward_logits(&x, &Pass::inference()).unwrap());
        let p = inf.softmax_rows();
        for i in 0..p.rows() {
            assert!((p.row(i).iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn batch_shape_is_checked() {
        let m = Model::build(&small()).unwrap();
        let x = gaussian_init::<f64>(5, 8, 1.0, 0).unwrap();
        assert!(matches!(m.forward_logits(&x, &Pass::inference()), Err(Error::Shape { .. })));
    }

    #[test]
    fn training_pass_needs_a_schedule() {
        let cfg = small();
        let mut m = Model::build(&cfg).unwrap();
        m.inject_adapters(&AdapterSpec::default(), 1).unwrap();
        let pass = Pass {
            mode: MaskMode::Train,
            step: 0,
            seed: 0,
            schedule: None,
        };
        assert!(matches!(m.forward_logits(&batch(&cfg, 1, 0), &pass), Err(Error::Contract(_))));
    }

    #[test]
    fn fixed_schedule_sets_live_slots() {
        let mut cfg = small();
        cfg.blocks = 12;
        let mut m = Model::build(&cfg).unwrap();
        let sched = MaskSchedule::fixed(Pattern::Hourglass, 12, 96, 0).unwrap();
        m.inject_for_schedule(&AdapterSpec::default(), &sched, 0).unwrap();
        let banks = m.adapters().unwrap();
        assert_eq!(banks[0].n_experts(), 14);
        assert_eq!(banks[0].active_count(), 14);
        assert_eq!(banks[4].active_count(), 2);
        assert_eq!(banks.iter().map(|b| b.active_count()).sum::<usize>(), 96);
    }

    #[test]
    fn named_tensors_round_trip() {
        let mut m = Model::build(&small()).unwrap();
        m.inject_adapters(&AdapterSpec::default(), 1).unwrap();
        let map = m.named_tensors().into_iter().map(|(n, t, _)| (n, t)).collect();
        let back = Model::from_named(&small(), Some((1, AdapterFlags::default())), false, map).unwrap();
        assert_eq!(back, m);
    }

    #[test]
    fn merged_model_drops_adapters() {
        let cfg = small();
        let mut m = Model::build(&cfg).unwrap();
        m.inject_adapters(&AdapterSpec::default(), 1).unwrap();
        let merged = m.merged().unwrap();
        assert!(merged.adapters().is_none());
        assert!(merged.is_merged());
        assert_eq!(merged.blocks()[0].w_qkv, m.blocks()[0].w_qkv);
    }
}
