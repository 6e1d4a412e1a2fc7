//! Rank-1 LoRA experts.
//!
//! A LoRA update `ΔW = B·A` (`B: d_in × r`, `A: r × d_out`) is split into its
//! `r` rank-1 cells `b_i a_iᵀ`, each carrying a coefficient `λ_i`. A binary
//! mask and a survivor scale select which cells enter the update:
//!
//! ```text
//! ΔW = Σ_i bits_i · scale · λ_i · b_i a_iᵀ
//! ```
//!
//! The bank stores the factors packed: row `i` of `bt` is `b_i` and row `i`
//! of `a` is `a_i`. With `sub_rank > 1` each expert owns `sub_rank`
//! consecutive rows of both.

use serde::{Deserialize, Serialize};

use crate::error::{param_err, shape_err, Result};
use crate::numerics::{gaussian_at, weighted_outer_sum, Matrix, Tape, Var};
use crate::rng::Site;
use crate::Scalar;

/// Component switches: cellular decomposition, expert masking and adaptive
/// coefficients, plus the knobs around them.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdapterFlags {
    pub decomposition: bool,
    pub masking: bool,
    pub adaptive: bool,
    /// Keep `λ` at its initial value even when `adaptive` is on.
    pub freeze_lambda: bool,
    /// Element-wise dropout on `ΔW` entries (the "LoRA + dropout" baseline).
    pub delta_dropout: f64,
}

impl Default for AdapterFlags {
    fn default() -> Self {
        AdapterFlags {
            decomposition: true,
            masking: true,
            adaptive: true,
            freeze_lambda: false,
            delta_dropout: 0.0,
        }
    }
}

impl AdapterFlags {
    /// All three components off: a plain rank-r LoRA pair.
    pub fn vanilla_lora() -> Self {
        AdapterFlags {
            decomposition: false,
            masking: false,
            adaptive: false,
            ..Self::default()
        }
    }

    pub fn lambda_trainable(&self) -> bool {
        self.adaptive && !self.freeze_lambda
    }
}

/// One expert: `sub_rank` paired rows of `b` (`d_in` wide) and `a` (`d_out` wide).
#[derive(Debug, Clone, PartialEq)]
pub struct Expert<T: Scalar> {
    pub b: Matrix<T>,
    pub a: Matrix<T>,
    pub lambda: T,
}

impl<T: Scalar> Expert<T> {
    /// Dense `bᵀ·a` (`d_in × d_out`) without `λ`.
    pub fn product(&self) -> Matrix<T> {
        self.b.matmul_tn(&self.a).expect("expert factors share sub-rank")
    }
}

/// Which experts enter `ΔW` in one forward pass and by how much survivors are scaled.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskSample {
    pub layer_id: usize,
    pub bits: Vec<bool>,
    pub scale: f64,
}

impl MaskSample {
    pub fn full(layer_id: usize, n: usize) -> Self {
        MaskSample {
            layer_id,
            bits: vec![true; n],
            scale: 1.0,
        }
    }

    pub fn popcount(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    fn coefficients<T: Scalar>(&self) -> Vec<T> {
        let scale = T::of(self.scale);
        self.bits
            .iter()
            .map(|&b| if b { scale } else { T::zero() })
            .collect()
    }
}

/// Shape and initialization of one bank.
#[derive(Debug, Clone, PartialEq)]
pub struct BankSpec {
    pub d_in: usize,
    pub d_out: usize,
    /// Expert slots. Ignored when decomposition is off.
    pub experts: usize,
    pub sub_rank: usize,
    pub coeff_init: f64,
    pub init_std: f64,
    pub flags: AdapterFlags,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExpertBank<T: Scalar> {
    layer_id: usize,
    d_in: usize,
    d_out: usize,
    sub_rank: usize,
    bt: Matrix<T>,
    a: Matrix<T>,
    lambda: Matrix<T>,
    /// Slots that exist for training and inference; `false` slots are
    /// permanently masked.
    active: Vec<bool>,
    flags: AdapterFlags,
}

/// Tape handles for one bank's parameters.
#[derive(Debug, Clone, Copy)]
pub struct BankLeaves {
    pub bt: Var,
    pub a: Var,
    pub lambda: Option<Var>,
}

impl<T: Scalar> ExpertBank<T> {
    /// Zero `b`, Gaussian `a` drawn per expert from its own stream, `λ`
    /// at `coeff_init` (or 1 when adaptive coefficients are off).
    ///
    /// With decomposition off the bank is a single expert of rank
    /// `experts · sub_rank`.
    pub fn new(layer_id: usize, spec: &BankSpec, seed: u64) -> Result<Self> {
        if spec.d_in == 0 || spec.d_out == 0 {
            return Err(param_err(format!("bank dims must be positive, got {}x{}", spec.d_in, spec.d_out)));
        }
        if spec.experts == 0 || spec.sub_rank == 0 {
            return Err(param_err("bank needs at least one expert of rank >= 1"));
        }
        if !(spec.coeff_init > 0.0) || !spec.coeff_init.is_finite() {
            return Err(param_err(format!("coefficient init must be positive, got {}", spec.coeff_init)));
        }
        let (experts, sub_rank) = if spec.flags.decomposition {
            (spec.experts, spec.sub_rank)
        } else {
            (1, spec.experts * spec.sub_rank)
        };
        let rows = experts * sub_rank;
        let mut a = Matrix::zeros(rows, spec.d_out);
        for e in 0..experts {
            let site = Site::ExpertInit {
                layer: layer_id as u32,
                expert: e as u32,
            };
            let block: Matrix<T> = gaussian_at(sub_rank, spec.d_out, spec.init_std, seed, site)?;
            for t in 0..sub_rank {
                a.row_mut(e * sub_rank + t).copy_from_slice(block.row(t));
            }
        }
        let lambda0 = if spec.flags.adaptive { spec.coeff_init } else { 1.0 };
        Ok(ExpertBank {
            layer_id,
            d_in: spec.d_in,
            d_out: spec.d_out,
            sub_rank,
            bt: Matrix::zeros(rows, spec.d_in),
            a,
            lambda: Matrix::filled(1, experts, T::of(lambda0)),
            active: vec![true; experts],
            flags: spec.flags,
        })
    }

    /// Assembles a bank from explicit experts (all active).
    pub fn from_experts(layer_id: usize, experts: Vec<Expert<T>>, flags: AdapterFlags) -> Result<Self> {
        let first = experts.first().ok_or_else(|| param_err("bank needs at least one expert"))?;
        let (sub_rank, d_in) = first.b.shape();
        let d_out = first.a.cols();
        let mut bt = Matrix::zeros(experts.len() * sub_rank, d_in);
        let mut a = Matrix::zeros(experts.len() * sub_rank, d_out);
        let mut lambda = Vec::with_capacity(experts.len());
        for (e, ex) in experts.iter().enumerate() {
            if ex.b.shape() != (sub_rank, d_in) || ex.a.shape() != (sub_rank, d_out) {
                return Err(shape_err("ExpertBank::from_experts", format!("expert {e} differs in shape")));
            }
            for t in 0..sub_rank {
                bt.row_mut(e * sub_rank + t).copy_from_slice(ex.b.row(t));
                a.row_mut(e * sub_rank + t).copy_from_slice(ex.a.row(t));
            }
            lambda.push(ex.lambda);
        }
        let n = experts.len();
        Ok(ExpertBank {
            layer_id,
            d_in,
            d_out,
            sub_rank,
            bt,
            a,
            lambda: Matrix::new(1, n, lambda)?,
            active: vec![true; n],
            flags,
        })
    }

    /// Rebuilds a bank from packed checkpoint tensors.
    pub fn from_parts(
        layer_id: usize,
        sub_rank: usize,
        bt: Matrix<T>,
        a: Matrix<T>,
        lambda: Matrix<T>,
        active: Vec<bool>,
        flags: AdapterFlags,
    ) -> Result<Self> {
        let n = active.len();
        if sub_rank == 0
            || bt.rows() != n * sub_rank
            || a.rows() != n * sub_rank
            || lambda.shape() != (1, n)
        {
            return Err(shape_err(
                "ExpertBank::from_parts",
                format!(
                    "bt {:?}, a {:?}, lambda {:?} for {n} experts of sub-rank {sub_rank}",
                    bt.shape(),
                    a.shape(),
                    lambda.shape()
                ),
            ));
        }
        Ok(ExpertBank {
            layer_id,
            d_in: bt.cols(),
            d_out: a.cols(),
            sub_rank,
            bt,
            a,
            lambda,
            active,
            flags,
        })
    }

    /// Permanently masks every slot whose flag is `false`.
    pub fn with_active(mut self, active: Vec<bool>) -> Result<Self> {
        if active.len() != self.n_experts() {
            return Err(shape_err(
                "ExpertBank::with_active",
                format!("{} flags for {} experts", active.len(), self.n_experts()),
            ));
        }
        self.active = active;
        Ok(self)
    }

    pub fn layer_id(&self) -> usize {
        self.layer_id
    }

    pub fn d_in(&self) -> usize {
        self.d_in
    }

    pub fn d_out(&self) -> usize {
        self.d_out
    }

    pub fn sub_rank(&self) -> usize {
        self.sub_rank
    }

    pub fn n_experts(&self) -> usize {
        self.lambda.cols()
    }

    pub fn flags(&self) -> &AdapterFlags {
        &self.flags
    }

    pub fn active(&self) -> &[bool] {
        &self.active
    }

    pub fn active_count(&self) -> usize {
        self.active.iter().filter(|&&a| a).count()
    }

    /// Packed `b` rows (`n·sub_rank × d_in`), i.e. `Bᵀ`.
    pub fn bt(&self) -> &Matrix<T> {
        &self.bt
    }

    pub fn a(&self) -> &Matrix<T> {
        &self.a
    }

    pub fn lambda(&self) -> &Matrix<T> {
        &self.lambda
    }

    pub fn bt_mut(&mut self) -> &mut Matrix<T> {
        &mut self.bt
    }

    pub fn a_mut(&mut self) -> &mut Matrix<T> {
        &mut self.a
    }

    /// `bt`, `a` and `λ` borrowed together.
    pub fn factors_mut(&mut self) -> (&mut Matrix<T>, &mut Matrix<T>, &mut Matrix<T>) {
        (&mut self.bt, &mut self.a, &mut self.lambda)
    }

    pub fn lambda_mut(&mut self) -> &mut Matrix<T> {
        &mut self.lambda
    }

    /// The LoRA `B` factor, `d_in × n·sub_rank`.
    pub fn b_matrix(&self) -> Matrix<T> {
        self.bt.transpose()
    }

    pub fn expert(&self, i: usize) -> Expert<T> {
        let rows = i * self.sub_rank..(i + 1) * self.sub_rank;
        Expert {
            b: self.bt.slice_rows(rows.start, rows.end),
            a: self.a.slice_rows(rows.start, rows.end),
            lambda: self.lambda.get(0, i),
        }
    }

    pub fn experts(&self) -> impl Iterator<Item = Expert<T>> + '_ {
        (0..self.n_experts()).map(|i| self.expert(i))
    }

    pub fn set_expert(&mut self, i: usize, expert: &Expert<T>) -> Result<()> {
        if expert.b.shape() != (self.sub_rank, self.d_in) || expert.a.shape() != (self.sub_rank, self.d_out) {
            return Err(shape_err("ExpertBank::set_expert", "expert shape differs from bank"));
        }
        for t in 0..self.sub_rank {
            let r = i * self.sub_rank + t;
            self.bt.row_mut(r).copy_from_slice(expert.b.row(t));
            self.a.row_mut(r).copy_from_slice(expert.a.row(t));
        }
        self.lambda.set(0, i, expert.lambda);
        Ok(())
    }

    /// All active experts, unscaled: the mask used at inference.
    pub fn inference_mask(&self) -> MaskSample {
        MaskSample {
            layer_id: self.layer_id,
            bits: self.active.clone(),
            scale: 1.0,
        }
    }

    /// Trainable entries: active experts' factors plus their `λ` when trainable.
    pub fn trainable_parameter_count(&self) -> usize {
        let per_expert = self.sub_rank * (self.d_in + self.d_out) + usize::from(self.flags.lambda_trainable());
        self.active_count() * per_expert
    }

    fn check_mask(&self, mask: &MaskSample) -> Result<()> {
        if mask.layer_id != self.layer_id || mask.bits.len() != self.n_experts() {
            return Err(shape_err(
                "mask",
                format!(
                    "mask for layer {} with {} bits, bank layer {} has {} experts",
                    mask.layer_id,
                    mask.bits.len(),
                    self.layer_id,
                    self.n_experts()
                ),
            ));
        }
        Ok(())
    }

    /// Puts the bank's factors on `tape`. `λ` becomes a leaf only when trainable.
    pub fn attach<'a>(&'a self, tape: &mut Tape<'a, T>) -> BankLeaves {
        BankLeaves {
            bt: tape.param(&self.bt),
            a: tape.param(&self.a),
            lambda: self.flags.lambda_trainable().then(|| tape.param(&self.lambda)),
        }
    }

    /// `ΔW` for `mask` as a tape node.
    pub fn delta_on_tape(&self, tape: &mut Tape<'_, T>, leaves: &BankLeaves, mask: &MaskSample) -> Result<Var> {
        self.check_mask(mask)?;
        let coef = self.frozen_weights(mask, leaves.lambda.is_none());
        tape.assemble_delta(leaves.bt, leaves.a, leaves.lambda, &coef, self.sub_rank)
    }

    /// Per-expert weights with `λ` folded in when it is not a tape leaf.
    fn frozen_weights(&self, mask: &MaskSample, fold_lambda: bool) -> Vec<T> {
        let coef: Vec<T> = mask.coefficients();
        if fold_lambda {
            coef.iter().zip(self.lambda.data()).map(|(&c, &l)| c * l).collect()
        } else {
            coef
        }
    }
}

/// Rank-1 bank with every component on.
pub fn decompose<T: Scalar>(
    d_in: usize,
    d_out: usize,
    r: usize,
    coeff_init: f64,
    init_std: f64,
    seed: u64,
) -> Result<ExpertBank<T>> {
    let spec = BankSpec {
        d_in,
        d_out,
        experts: r,
        sub_rank: 1,
        coeff_init,
        init_std,
        flags: AdapterFlags::default(),
    };
    ExpertBank::new(0, &spec, seed)
}

/// `n_experts` experts of rank `sub_rank` sharing a total rank `budget`.
#[allow(clippy::too_many_arguments)]
pub fn submatrix_variant<T: Scalar>(
    d_in: usize,
    d_out: usize,
    sub_rank: usize,
    n_experts: usize,
    budget: usize,
    coeff_init: f64,
    init_std: f64,
    seed: u64,
) -> Result<ExpertBank<T>> {
    if sub_rank * n_experts != budget {
        return Err(param_err(format!(
            "{n_experts} experts of rank {sub_rank} do not fill a budget of {budget}"
        )));
    }
    let spec = BankSpec {
        d_in,
        d_out,
        experts: n_experts,
        sub_rank,
        coeff_init,
        init_std,
        flags: AdapterFlags::default(),
    };
    ExpertBank::new(0, &spec, seed)
}

/// `Σ_i bits_i · scale · λ_i · b_i a_iᵀ`.
pub fn assemble_delta<T: Scalar>(bank: &ExpertBank<T>, mask: &MaskSample) -> Result<Matrix<T>> {
    bank.check_mask(mask)?;
    let weights = bank.frozen_weights(mask, true);
    weighted_outer_sum(&bank.bt, &bank.a, &weights, bank.sub_rank).finite("assemble_delta")
}

/// `h = x·W0 + x·ΔW`.
pub fn forward<T: Scalar>(x: &Matrix<T>, w0: &Matrix<T>, bank: &ExpertBank<T>, mask: &MaskSample) -> Result<Matrix<T>> {
    if w0.shape() != (bank.d_in, bank.d_out) {
        return Err(shape_err(
            "forward",
            format!("W0 {:?} for a {}x{} bank", w0.shape(), bank.d_in, bank.d_out),
        ));
    }
    let delta = assemble_delta(bank, mask)?;
    x.matmul(w0)?.add(&x.matmul(&delta)?)
}

/// `W0 + Σ λ_i b_i a_iᵀ` over active experts, no survivor scaling.
pub fn merge<T: Scalar>(w0: &Matrix<T>, bank: &ExpertBank<T>) -> Result<Matrix<T>> {
    w0.add(&assemble_delta(bank, &bank.inference_mask())?)
}

/// Upper bound on `rank(ΔW)`: the number of experts switched on times their rank.
pub fn delta_rank_bound<T: Scalar>(bank: &ExpertBank<T>, mask: &MaskSample) -> usize {
    mask.bits
        .iter()
        .zip(&bank.active)
        .filter(|(&b, &a)| b && a)
        .count()
        * bank.sub_rank
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::Error;
    use crate::numerics::gaussian_init;

    type M = Matrix<f64>;

    fn randomized(bank: &mut ExpertBank<f64>, seed: u64) {
        let (rows, d_in) = bank.bt().shape();
        *bank.bt_mut() = gaussian_init(rows, d_in, 1.0, seed).unwrap();
    }

    #[test]
    fn fresh_bank_has_zero_delta() {
        let bank = decompose::<f64>(8, 12, 4, 1.0, 0.02, 3).unwrap();
        let delta = assemble_delta(&bank, &MaskSample::full(0, 4)).unwrap();
        assert_eq!(delta, M::zeros(8, 12));
        assert!(bank.experts().all(|e| e.lambda == 1.0));
    }

    #[test]
    fn experts_start_distinct() {
        let bank = decompose::<f64>(8, 12, 4, 1.0, 0.02, 3).unwrap();
        for i in 0..4 {
            for j in i + 1..4 {
                assert_ne!(bank.expert(i).a, bank.expert(j).a);
            }
        }
    }

    #[test]
    fn coefficient_grid_is_accepted() {
        for c in [0.125, 0.25, 0.5, 1.0, 2.0, 4.0] {
            let bank = decompose::<f64>(4, 4, 2, c, 0.02, 0).unwrap();
            assert!(bank.experts().all(|e| e.lambda == c));
        }
    }

    #[test]
    fn adaptive_off_pins_lambda_to_one() {
        let spec = BankSpec {
            d_in: 4,
            d_out: 4,
            experts: 3,
            sub_rank: 1,
            coeff_init: 4.0,
            init_std: 0.02,
            flags: AdapterFlags {
                adaptive: false,
                ..AdapterFlags::default()
            },
        };
        let bank = ExpertBank::<f64>::new(0, &spec, 0).unwrap();
        assert!(bank.experts().all(|e| e.lambda == 1.0));
        assert!(!bank.flags().lambda_trainable());
    }

    #[test]
    fn bad_bank_parameters() {
        assert!(matches!(decompose::<f64>(4, 4, 0, 1.0, 0.02, 0), Err(Error::Parameter(_))));
        assert!(matches!(decompose::<f64>(0, 4, 2, 1.0, 0.02, 0), Err(Error::Parameter(_))));
    }

    #[test]
    fn empty_mask_gives_zero() {
        let mut bank = decompose::<f64>(6, 5, 3, 1.0, 0.5, 1).unwrap();
        randomized(&mut bank, 2);
        let mask = MaskSample {
            layer_id: 0,
            bits: vec![false; 3],
            scale: 2.0,
        };
        assert_eq!(assemble_delta(&bank, &mask).unwrap(), M::zeros(6, 5));
        assert_eq!(delta_rank_bound(&bank, &mask), 0);
    }

    #[test]
    fn single_scaled_expert_is_exact_outer_product() {
        let mut bank = decompose::<f64>(6, 5, 3, 0.5, 0.5, 1).unwrap();
        randomized(&mut bank, 2);
        let mask = MaskSample {
            layer_id: 0,
            bits: vec![false, true, false],
            scale: 2.0,
        };
        let e = bank.expert(1);
        let outer = M::from_fn(6, 5, |i, j| e.b.get(0, i) * e.a.get(0, j));
        assert_eq!(assemble_delta(&bank, &mask).unwrap(), outer);
    }

    #[test]
    fn mask_shape_errors() {
        let bank = decompose::<f64>(4, 4, 3, 1.0, 0.02, 0).unwrap();
        assert!(matches!(
            assemble_delta(&bank, &MaskSample::full(0, 2)),
            Err(Error::Shape { .. })
        ));
        assert!(matches!(
            assemble_delta(&bank, &MaskSample::full(1, 3)),
            Err(Error::Shape { .. })
        ));
    }

    #[test]
    fn forward_with_fresh_bank_is_base_product() {
        let bank = decompose::<f64>(8, 12, 4, 1.0, 0.02, 3).unwrap();
        let x: M = gaussian_init(5, 8, 1.0, 1).unwrap();
        let w0: M = gaussian_init(8, 12, 1.0, 2).unwrap();
        let h = forward(&x, &w0, &bank, &MaskSample::full(0, 4)).unwrap();
        assert_eq!(h, x.matmul(&w0).unwrap());
        let zero = forward(&M::zeros(5, 8), &w0, &bank, &MaskSample::full(0, 4)).unwrap();
        assert_eq!(zero, M::zeros(5, 12));
        assert!(forward(&x, &M::zeros(8, 11), &bank, &MaskSample::full(0, 4)).is_err());
    }

    #[test]
    fn forward_matches_dense_lora() {
        let mut bank = decompose::<f64>(8, 12, 4, 1.0, 0.3, 3).unwrap();
        randomized(&mut bank, 9);
        let x: M = gaussian_init(5, 8, 1.0, 1).unwrap();
        let w0: M = gaussian_init(8, 12, 1.0, 2).unwrap();
        let dense = w0.add(&bank.b_matrix().matmul(bank.a()).unwrap()).unwrap();
        let h = forward(&x, &w0, &bank, &MaskSample::full(0, 4)).unwrap();
        assert!(h.max_abs_diff(&x.matmul(&dense).unwrap()) < 1e-10);
    }

    #[test]
    fn merge_of_fresh_bank_is_identity() {
        let bank = decompose::<f64>(8, 12, 4, 1.0, 0.02, 3).unwrap();
        let w0: M = gaussian_init(8, 12, 1.0, 2).unwrap();
        assert_eq!(merge(&w0, &bank).unwrap(), w0);
    }

    #[test]
    fn merge_matches_inference_forward() {
        let mut bank = decompose::<f64>(8, 12, 4, 1.7, 0.3, 3).unwrap();
        randomized(&mut bank, 9);
        let x: M = gaussian_init(5, 8, 1.0, 1).unwrap();
        let w0: M = gaussian_init(8, 12, 1.0, 2).unwrap();
        let merged = merge(&w0, &bank).unwrap();
        let h = forward(&x, &w0, &bank, &bank.inference_mask()).unwrap();
        assert!(x.matmul(&merged).unwrap().max_abs_diff(&h) < 1e-10);
    }

    #[test]
    fn permanently_masked_experts_never_contribute() {
        let mut bank = decompose::<f64>(6, 5, 3, 1.0, 0.5, 1).unwrap();
        randomized(&mut bank, 2);
        let bank = bank.with_active(vec![true, false, true]).unwrap();
        let mask = bank.inference_mask();
        assert_eq!(mask.bits, vec![true, false, true]);
        let mut only = bank.clone();
        only.set_expert(1, &Expert { b: M::zeros(1, 6), a: M::zeros(1, 5), lambda: 1.0 }).unwrap();
        assert_eq!(assemble_delta(&bank, &mask).unwrap(), assemble_delta(&only, &MaskSample::full(0, 3)).unwrap());
        assert_eq!(bank.trainable_parameter_count(), 2 * (6 + 5 + 1));
    }

    #[test]
    fn submatrix_layouts() {
        let lora = submatrix_variant::<f64>(16, 32, 8, 1, 8, 1.0, 0.02, 0).unwrap();
        assert_eq!((lora.n_experts(), lora.sub_rank()), (1, 8));
        let two = submatrix_variant::<f64>(16, 32, 4, 2, 8, 1.0, 0.02, 0).unwrap();
        let eight = submatrix_variant::<f64>(16, 32, 1, 8, 8, 1.0, 0.02, 0).unwrap();
        // n_experts · sub_rank · (d_in + d_out) + n_experts·[adaptive]
        assert_eq!(two.trainable_parameter_count(), 2 * 4 * 48 + 2);
        assert_eq!(eight.trainable_parameter_count(), 8 * 48 + 8);
        assert_eq!(two.trainable_parameter_count() - 2, eight.trainable_parameter_count() - 8);
        assert!(matches!(
            submatrix_variant::<f64>(16, 32, 3, 3, 8, 1.0, 0.02, 0),
            Err(Error::Parameter(_))
        ));
    }

    #[test]
    fn decomposition_off_is_single_rank_r_pair() {
        let spec = BankSpec {
            d_in: 8,
            d_out: 24,
            experts: 8,
            sub_rank: 1,
            coeff_init: 1.0,
            init_std: 0.02,
            flags: AdapterFlags::vanilla_lora(),
        };
        let bank = ExpertBank::<f64>::new(0, &spec, 0).unwrap();
        assert_eq!((bank.n_experts(), bank.sub_rank()), (1, 8));
        assert_eq!(bank.a().shape(), (8, 24));
    }

    #[test]
    fn expert_round_trip() {
        let mut bank = decompose::<f64>(6, 5, 3, 1.0, 0.5, 1).unwrap();
        randomized(&mut bank, 2);
        let rebuilt = ExpertBank::from_experts(0, bank.experts().collect(), *bank.flags()).unwrap();
        assert_eq!(rebuilt, bank);
    }
}
