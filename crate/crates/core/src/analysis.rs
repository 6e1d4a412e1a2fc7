//! Cosine similarity between experts' flattened update matrices.
//!
//! The Frobenius inner product of two expert updates factorizes,
//! `⟨Bᵢᵀ Aᵢ, Bⱼᵀ Aⱼ⟩ = Σ_{t,u} (bᵢₜ·bⱼᵤ)(aᵢₜ·aⱼᵤ)`, so no `d_in × d_out`
//! matrix is ever formed. For rank-1 experts the cosine is the product of
//! the two vector cosines. `λ` is left out.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::backbone::BackboneModel;
use crate::error::{shape_err, Result};
use crate::experts::ExpertBank;
use crate::numerics::Matrix;
use crate::{Error, Scalar};

/// Symmetric `n × n` cosine matrix; `None` marks pairs involving a zero expert.
#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityMatrix {
    n: usize,
    values: Vec<Option<f64>>,
}

impl SimilarityMatrix {
    pub fn n(&self) -> usize {
        self.n
    }

    pub fn get(&self, i: usize, j: usize) -> Option<f64> {
        self.values[i * self.n + j]
    }

    fn off_diagonal(&self) -> impl Iterator<Item = f64> + '_ {
        (0..self.n)
            .flat_map(move |i| (0..self.n).map(move |j| (i, j)))
            .filter(|(i, j)| i != j)
            .filter_map(|(i, j)| self.get(i, j))
    }

    /// Mean of the defined off-diagonal entries.
    pub fn mean_signed(&self) -> Option<f64> {
        mean(self.off_diagonal())
    }

    /// Mean of the defined off-diagonal entries' absolute values.
    pub fn mean_abs(&self) -> Option<f64> {
        mean(self.off_diagonal().map(f64::abs))
    }
}

fn mean(it: impl Iterator<Item = f64>) -> Option<f64> {
    let (s, n) = it.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    (n > 0).then(|| s / n as f64)
}

fn dot<T: Scalar>(x: &[T], y: &[T]) -> f64 {
    x.iter().zip(y).map(|(&a, &b)| a.as_f64() * b.as_f64()).sum()
}

/// Cosines between `n` experts stored as `sub_rank` paired rows of `bt` and `a`.
fn factored_similarity<T: Scalar>(bt: &Matrix<T>, a: &Matrix<T>, sub_rank: usize) -> SimilarityMatrix {
    let n = bt.rows() / sub_rank;
    let inner = |i: usize, j: usize| -> f64 {
        let mut s = 0.0;
        for t in 0..sub_rank {
            for u in 0..sub_rank {
                let (ri, rj) = (i * sub_rank + t, j * sub_rank + u);
                s += dot(bt.row(ri), bt.row(rj)) * dot(a.row(ri), a.row(rj));
            }
        }
        s
    };
    let norms: Vec<f64> = (0..n).map(|i| inner(i, i).max(0.0).sqrt()).collect();
    let mut values = vec![None; n * n];
    for i in 0..n {
        if norms[i] == 0.0 {
            continue;
        }
        values[i * n + i] = Some(1.0);
        for j in i + 1..n {
            if norms[j] == 0.0 {
                continue;
            }
            let c = (inner(i, j) / (norms[i] * norms[j])).clamp(-1.0, 1.0);
            values[i * n + j] = Some(c);
            values[j * n + i] = Some(c);
        }
    }
    SimilarityMatrix { n, values }
}

/// Expert-by-expert cosine matrix of a bank.
pub fn expert_similarity<T: Scalar>(bank: &ExpertBank<T>) -> SimilarityMatrix {
    factored_similarity(bank.bt(), bank.a(), bank.sub_rank())
}

/// Splits a LoRA pair (`B: d_in × r`, `A: r × d_out`) into its `r` rank-1
/// cells and compares them.
pub fn lora_similarity<T: Scalar>(b: &Matrix<T>, a: &Matrix<T>) -> Result<SimilarityMatrix> {
    if b.cols() != a.rows() || b.cols() == 0 {
        return Err(shape_err(
            "lora_similarity",
            format!("B {:?} and A {:?} disagree on rank", b.shape(), a.shape()),
        ));
    }
    Ok(factored_similarity(&b.transpose(), a, 1))
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityReport {
    pub per_block: Vec<SimilarityMatrix>,
}

impl SimilarityReport {
    pub fn block_mean_signed(&self, block: usize) -> Option<f64> {
        self.per_block[block].mean_signed()
    }

    pub fn block_mean_abs(&self, block: usize) -> Option<f64> {
        self.per_block[block].mean_abs()
    }

    /// Average of the defined per-block signed means.
    pub fn model_mean_signed(&self) -> Option<f64> {
        mean(self.per_block.iter().filter_map(|m| m.mean_signed()))
    }

    /// Average of the defined per-block absolute means.
    pub fn model_mean_abs(&self) -> Option<f64> {
        mean(self.per_block.iter().filter_map(|m| m.mean_abs()))
    }

    /// `block,mean_signed,mean_abs` rows plus a final `model` row.
    pub fn summary_csv(&self) -> String {
        let mut s = String::from("block,mean_signed,mean_abs\n");
        for (l, m) in self.per_block.iter().enumerate() {
            let _ = writeln!(s, "{l},{},{}", fmt(m.mean_signed()), fmt(m.mean_abs()));
        }
        let _ = writeln!(s, "model,{},{}", fmt(self.model_mean_signed()), fmt(self.model_mean_abs()));
        s
    }

    /// `i,j,cosine` rows of one block.
    pub fn block_csv(&self, block: usize) -> String {
        let m = &self.per_block[block];
        let mut s = String::from("i,j,cosine\n");
        for i in 0..m.n() {
            for j in 0..m.n() {
                let _ = writeln!(s, "{i},{j},{}", fmt(m.get(i, j)));
            }
        }
        s
    }

    /// Writes `block_{l}.csv`, `block_{l}.svg` and `summary.csv` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        for l in 0..self.per_block.len() {
            fs::write(dir.join(format!("block_{l}.csv")), self.block_csv(l))?;
            fs::write(dir.join(format!("block_{l}.svg")), heatmap_svg(&self.per_block[l], l))?;
        }
        fs::write(dir.join("summary.csv"), self.summary_csv())?;
        Ok(())
    }
}

fn fmt(v: Option<f64>) -> String {
    match v {
        Some(x) => format!("{x:.12}"),
        None => "NaN".into(),
    }
}

/// Per-block similarity of every adapter in `model`.
///
/// Rank-r LoRA banks (decomposition off) are split into rank-1 cells.
pub fn model_similarity<T: Scalar>(model: &BackboneModel<T>) -> Result<SimilarityReport> {
    let banks = model
        .adapters()
        .ok_or_else(|| Error::Format("no adapters present".into()))?;
    if banks.len() != model.config().blocks {
        return Err(Error::Format(format!(
            "{} adapter banks for {} blocks",
            banks.len(),
            model.config().blocks
        )));
    }
    let per_block = banks
        .iter()
        .map(|bank| {
            if bank.flags().decomposition {
                Ok(expert_similarity(bank))
            } else {
                lora_similarity(&bank.bt().transpose(), bank.a())
            }
        })
        .collect::<Result<_>>()?;
    Ok(SimilarityReport { per_block })
}

/// Confusion-matrix style SVG: blue for −1, white for 0, red for +1, grey for undefined.
pub fn heatmap_svg(m: &SimilarityMatrix, block: usize) -> String {
    const CELL: usize = 24;
    const PAD: usize = 30;
    let side = PAD + m.n() * CELL + 4;
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{side}" height="{side}" viewBox="0 0 {side} {side}">"#
    );
    let _ = writeln!(s, r#"<text x="{PAD}" y="18" font-family="sans-serif" font-size="12">block {block}</text>"#);
    for i in 0..m.n() {
        for j in 0..m.n() {
            let fill = match m.get(i, j) {
                None => "#bdbdbd".to_string(),
                Some(v) => {
                    let v = v.clamp(-1.0, 1.0);
                    let fade = |t: f64| (255.0 * (1.0 - t)).round() as u8;
                    if v >= 0.0 {
                        format!("#ff{:02x}{:02x}", fade(v), fade(v))
                    } else {
                        format!("#{:02x}{:02x}ff", fade(-v), fade(-v))
                    }
                }
            };
            let _ = writeln!(
                s,
                r#"<rect x="{}" y="{}" width="{CELL}" height="{CELL}" fill="{fill}"><title>{i},{j}: {}</title></rect>"#,
                PAD + j * CELL,
                PAD + i * CELL,
                fmt(m.get(i, j))
            );
        }
    }
    s.push_str("</svg>\n");
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::experts::{AdapterFlags, Expert};
    use crate::numerics::gaussian_init;

    fn bank(experts: Vec<(Vec<f64>, Vec<f64>)>) -> ExpertBank<f64> {
        let experts = experts
            .into_iter()
            .map(|(b, a)| Expert {
                b: Matrix::row_vector(b),
                a: Matrix::row_vector(a),
                lambda: 1.0,
            })
            .collect();
        ExpertBank::from_experts(0, experts, AdapterFlags::default()).unwrap()
    }

    #[test]
    fn self_and_antiparallel() {
        let s = expert_similarity(&bank(vec![(vec![1.0, 2.0], vec![3.0, 1.0]), (vec![-1.0, -2.0], vec![3.0, 1.0])]));
        assert_eq!(s.get(0, 0), Some(1.0));
        assert!((s.get(0, 1).unwrap() + 1.0).abs() < 1e-15);
    }

    #[test]
    fn zero_experts_are_undefined() {
        let s = expert_similarity(&bank(vec![(vec![0.0, 0.0], vec![1.0, 0.0]), (vec![1.0, 0.0], vec![1.0, 1.0])]));
        assert_eq!(s.get(0, 1), None);
        assert_eq!(s.get(0, 0), None);
        assert_eq!(s.get(1, 1), Some(1.0));
        assert_eq!(s.mean_signed(), None);
    }

    #[test]
    fn orthogonal_b_gives_zero() {
        let b: Matrix<f64> = Matrix::from_rows(&[&[1.0, 0.0], &[0.0, 1.0], &[0.0, 0.0]]);
        let a = gaussian_init(2, 4, 1.0, 3).unwrap();
        let s = lora_similarity(&b, &a).unwrap();
        assert_eq!(s.get(0, 1), Some(0.0));
    }

    #[test]
    fn rank_one_lora_is_unit() {
        let b = gaussian_init::<f64>(5, 1, 1.0, 1).unwrap();
        let a = gaussian_init::<f64>(1, 3, 1.0, 2).unwrap();
        let s = lora_similarity(&b, &a).unwrap();
        assert_eq!((s.n(), s.get(0, 0)), (1, Some(1.0)));
        assert!(lora_similarity(&b, &gaussian_init::<f64>(2, 3, 1.0, 2).unwrap()).is_err());
    }

    #[test]
    fn copies_have_unit_mean() {
        let e = (vec![0.3, -1.0, 2.0], vec![1.0, 0.5]);
        let s = expert_similarity(&bank(vec![e.clone(), e.clone(), e]));
        assert!((s.mean_signed().unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn csv_layout() {
        let r = SimilarityReport {
            per_block: vec![expert_similarity(&bank(vec![(vec![1.0], vec![1.0]), (vec![0.0], vec![1.0])]))],
        };
        assert_eq!(r.block_csv(0), "i,j,cosine\n0,0,1.000000000000\n0,1,NaN\n1,0,NaN\n1,1,NaN\n");
        assert_eq!(r.summary_csv(), "block,mean_signed,mean_abs\n0,NaN,NaN\nmodel,NaN,NaN\n");
        assert!(heatmap_svg(&r.per_block[0], 0).starts_with("<svg"));
    }
}
