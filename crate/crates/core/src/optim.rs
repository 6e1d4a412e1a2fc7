//! AdamW with decoupled weight decay and a cosine learning-rate schedule.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{param_err, shape_err, Result};
use crate::numerics::Matrix;
use crate::Scalar;

/// `lr · (1 + cos(π·step/total)) / 2`, decaying from `lr` at step 0 to 0 at `total`.
pub fn cosine_lr(lr: f64, step: usize, total: usize) -> f64 {
    if total == 0 {
        return lr;
    }
    let t = step.min(total) as f64 / total as f64;
    lr * (1.0 + (PI * t).cos()) / 2.0
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-4,
        }
    }
}

/// Which entries of a parameter the optimizer may touch.
#[derive(Debug, Clone, PartialEq)]
pub enum Touch {
    All,
    /// Row `i` is updated only when `rows[i]`.
    Rows(Vec<bool>),
    /// Entry `k` (row-major) is updated only when `entries[k]`.
    Entries(Vec<bool>),
}

impl Touch {
    fn allows(&self, row: usize, index: usize) -> bool {
        match self {
            Touch::All => true,
            Touch::Rows(r) => r[row],
            Touch::Entries(e) => e[index],
        }
    }
}

/// One parameter group entry: its touch pattern and whether it decays.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamSlot {
    pub touch: Touch,
    pub decay: bool,
}

#[derive(Debug, Clone)]
struct Moments<T: Scalar> {
    m: Matrix<T>,
    v: Matrix<T>,
}

/// AdamW state for an ordered list of parameters.
///
/// Each update first shrinks a decaying parameter by `1 - lr·wd`, then
/// applies the bias-corrected Adam step, as in `torch.optim.AdamW`.
#[derive(Debug, Clone)]
pub struct AdamW<T: Scalar> {
    config: AdamWConfig,
    slots: Vec<ParamSlot>,
    moments: Vec<Moments<T>>,
    t: u64,
}

impl<T: Scalar> AdamW<T> {
    pub fn new(config: AdamWConfig, shapes: &[(usize, usize)], slots: Vec<ParamSlot>) -> Result<Self> {
        if shapes.len() != slots.len() {
            return Err(param_err("one slot per parameter is required"));
        }
        let ok = (0.0..1.0).contains(&config.beta1)
            && (0.0..1.0).contains(&config.beta2)
            && config.eps > 0.0
            && config.weight_decay >= 0.0;
        if !ok {
            return Err(param_err(format!("invalid AdamW settings {config:?}")));
        }
        for (&(rows, cols), slot) in shapes.iter().zip(&slots) {
            let fits = match &slot.touch {
                Touch::All => true,
                Touch::Rows(r) => r.len() == rows,
                Touch::Entries(e) => e.len() == rows * cols,
            };
            if !fits {
                return Err(shape_err("AdamW::new", format!("touch pattern does not fit {rows}x{cols}")));
            }
        }
        let moments = shapes
            .iter()
            .map(|&(r, c)| Moments {
                m: Matrix::zeros(r, c),
                v: Matrix::zeros(r, c),
            })
            .collect();
        Ok(AdamW {
            config,
            slots,
            moments,
            t: 0,
        })
    }

    /// Steps taken so far.
    pub fn steps(&self) -> u64 {
        self.t
    }

    /// One update of every parameter with learning rate `lr`.
    pub fn step(&mut self, params: &mut [&mut Matrix<T>], grads: &[Matrix<T>], lr: f64) -> Result<()> {
        if params.len() != self.moments.len() || grads.len() != self.moments.len() {
            return Err(shape_err(
                "AdamW::step",
                format!(
                    "{} params and {} grads for {} slots",
                    params.len(),
                    grads.len(),
                    self.moments.len()
                ),
            ));
        }
        for ((p, g), st) in params.iter().zip(grads).zip(&self.moments) {
            if p.shape() != g.shape() || p.shape() != st.m.shape() {
                return Err(shape_err(
                    "AdamW::step",
                    format!("param {:?}, grad {:?}, state {:?}", p.shape(), g.shape(), st.m.shape()),
                ));
            }
        }
        self.t += 1;
        let c = &self.config;
        let (b1, b2) = (T::of(c.beta1), T::of(c.beta2));
        let bc1 = T::one() - b1.powi(self.t as i32);
        let bc2 = T::one() - b2.powi(self.t as i32);
        let lr_t = T::of(lr);
        let shrink = T::one() - T::of(lr * c.weight_decay);
        let eps = T::of(c.eps);
        for ((p, g), (st, slot)) in params
            .iter_mut()
            .zip(grads)
            .zip(self.moments.iter_mut().zip(&self.slots))
        {
            let cols = p.cols();
            let (pd, gd) = (p.data_mut(), g.data());
            let (md, vd) = (st.m.data_mut(), st.v.data_mut());
            for k in 0..pd.len() {
                if !slot.touch.allows(k / cols.max(1), k) {
                    continue;
                }
                if slot.decay {
                    pd[k] *= shrink;
                }
                md[k] = b1 * md[k] + (T::one() - b1) * gd[k];
                vd[k] = b2 * vd[k] + (T::one() - b2) * gd[k] * gd[k];
                let m_hat = md[k] / bc1;
                let v_hat = vd[k] / bc2;
                pd[k] -= lr_t * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}
