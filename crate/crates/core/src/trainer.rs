//! Training loop, evaluation, experiment runner and hyperparameter sweeps.
//!
//! Batches come from a per-epoch permutation drawn from the `data` seed,
//! masks from the `dropout` seed, and the learning rate for global step `t` of `T` is
//! `lr · (1 + cos(π t / T)) / 2`. Evaluation takes the arg-max logit with
//! ties going to the lowest class index.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;

use crate::backbone::{BackboneModel, DeltaRoute, Pass};
use crate::config::{RunConfig, TaskSource, TrainConfig};
use crate::data::{make_synthetic_task, Dataset, Split};
use crate::error::{param_err, Result};
use crate::masking::{MaskSchedule, Pattern, Strategy};
use crate::numerics::{Matrix, Tape};
use crate::optim::{cosine_lr, AdamW, AdamWConfig, ParamSlot, Touch};
use crate::rng::{self, Site};
use crate::{Error, Scalar};

/// One row of the metrics history.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochMetrics {
    pub epoch: usize,
    /// Global steps completed.
    pub step: usize,
    pub train_loss: f64,
    pub val_acc: f64,
    /// Learning rate of the epoch's last step.
    pub lr: f64,
}

pub const METRICS_HEADER: &str = "epoch,step,train_loss,val_acc,lr";

/// Metrics history as CSV text.
pub fn metrics_csv(history: &[EpochMetrics]) -> String {
    let mut s = String::from(METRICS_HEADER);
    s.push('\n');
    for m in history {
        let _ = writeln!(s, "{},{},{:.10},{:.6},{:.6e}", m.epoch, m.step, m.train_loss, m.val_acc, m.lr);
    }
    s
}

/// Index of the largest entry, first one on ties.
pub fn argmax<T: Scalar>(row: &[T]) -> usize {
    let mut best = 0;
    for (j, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = j;
        }
    }
    best
}

/// Predicted classes of `split` in inference mode.
pub fn predict<T: Scalar>(model: &BackboneModel<T>, split: &Split<T>, batch_size: usize) -> Result<Vec<usize>> {
    if split.is_empty() {
        return Err(param_err("cannot evaluate an empty split"));
    }
    let idx: Vec<usize> = (0..split.len()).collect();
    let mut out = Vec::with_capacity(split.len());
    for chunk in idx.chunks(batch_size.max(1)) {
        let (x, _) = split.batch(chunk);
        let logits = model.forward_logits(&x, &Pass::inference())?;
        out.extend((0..logits.rows()).map(|i| argmax(logits.row(i))));
    }
    Ok(out)
}

/// Top-1 accuracy in `[0, 1]`.
pub fn evaluate<T: Scalar>(model: &BackboneModel<T>, split: &Split<T>, batch_size: usize) -> Result<f64> {
    let pred = predict(model, split, batch_size)?;
    let hits = pred.iter().zip(&split.labels).filter(|(p, y)| p == y).count();
    Ok(hits as f64 / split.len() as f64)
}

/// Optimizer slots matching `BackboneModel::trainable_mut`.
fn param_slots<T: Scalar>(model: &BackboneModel<T>, cfg: &TrainConfig) -> Vec<ParamSlot> {
    let head = ParamSlot {
        touch: Touch::All,
        decay: cfg.decay_head,
    };
    let mut slots = vec![head.clone(), head];
    for bank in model.adapters().into_iter().flatten() {
        let rows: Vec<bool> = bank
            .active()
            .iter()
            .flat_map(|&a| std::iter::repeat_n(a, bank.sub_rank()))
            .collect();
        let factor = ParamSlot {
            touch: Touch::Rows(rows),
            decay: true,
        };
        slots.push(factor.clone());
        slots.push(factor);
        if bank.flags().lambda_trainable() {
            slots.push(ParamSlot {
                touch: Touch::Entries(bank.active().to_vec()),
                decay: true,
            });
        }
    }
    slots
}

/// Loss and trainable-leaf gradients (tape order) for one batch.
pub fn loss_and_grads<T: Scalar>(
    model: &BackboneModel<T>,
    x: &Matrix<T>,
    labels: &[usize],
    pass: &Pass<'_>,
) -> Result<(T, Vec<Matrix<T>>)> {
    let mut tape = Tape::new();
    let fp = model.forward_tape(&mut tape, x, pass, DeltaRoute::Experts)?;
    let loss = tape.cross_entropy(fp.logits, labels)?;
    let value = tape.scalar(loss)?;
    let mut g = tape.backward(loss)?;
    let mut order = vec![fp.head_w, fp.head_b];
    for b in &fp.banks {
        order.push(b.bt);
        order.push(b.a);
        order.extend(b.lambda);
    }
    let grads = order
        .into_iter()
        .map(|v| g.take(v).ok_or_else(|| Error::Contract("missing gradient for a trainable leaf".into())))
        .collect::<Result<_>>()?;
    Ok((value, grads))
}

fn diverged(e: Error, step: usize) -> Error {
    match e {
        Error::NonFinite(_) => Error::Diverged { step },
        other => other,
    }
}

/// Trains the head and adapters of `model` in place.
///
/// On a non-finite loss, gradient, update or validation pass the model is
/// reset to the last parameters whose forward pass was finite and
/// `Error::Diverged` is returned.
pub fn train<T: Scalar>(
    model: &mut BackboneModel<T>,
    data: &Dataset<T>,
    schedule: &MaskSchedule,
    cfg: &TrainConfig,
) -> Result<Vec<EpochMetrics>> {
    let mut history = Vec::new();
    train_with(model, data, schedule, cfg, &mut history)?;
    Ok(history)
}

/// As `train`, appending each epoch's metrics to `history` as it completes.
pub fn train_with<T: Scalar>(
    model: &mut BackboneModel<T>,
    data: &Dataset<T>,
    schedule: &MaskSchedule,
    cfg: &TrainConfig,
    history: &mut Vec<EpochMetrics>,
) -> Result<()> {
    if cfg.batch_size == 0 {
        return Err(param_err("batch size must be positive"));
    }
    let n = data.train.len();
    if n == 0 {
        return Err(param_err("cannot train on an empty split"));
    }
    let steps_per_epoch = n.div_ceil(cfg.batch_size);
    let total = cfg.epochs * steps_per_epoch;
    let shapes: Vec<(usize, usize)> = model.trainable_mut().iter().map(|m| m.shape()).collect();
    let opt_cfg = AdamWConfig {
        beta1: cfg.beta1,
        beta2: cfg.beta2,
        eps: cfg.eps,
        weight_decay: cfg.weight_decay,
    };
    let mut opt = AdamW::new(opt_cfg, &shapes, param_slots(model, cfg))?;
    let mut step = 0usize;
    let mut last_good: Vec<Matrix<T>> = model.trainable_mut().into_iter().map(|m| m.clone()).collect();
    let restore = |model: &mut BackboneModel<T>, good: &[Matrix<T>]| {
        for (p, g) in model.trainable_mut().into_iter().zip(good) {
            p.clone_from(g);
        }
    };
    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..n).collect();
        let mut r = rng::stream(cfg.seeds.data, Site::Shuffle { epoch: epoch as u32 });
        order.shuffle(&mut r);
        let mut loss_sum = 0.0;
        let mut lr_t = cfg.lr;
        for chunk in order.chunks(cfg.batch_size) {
            let (x, y) = data.train.batch(chunk);
            let pass = Pass::train(schedule, step as u64, cfg.seeds.dropout);
            let (loss, grads) = match loss_and_grads(model, &x, &y, &pass) {
                Ok((loss, grads)) if loss.is_finite() => (loss, grads),
                Ok(_) => {
                    restore(model, &last_good);
                    return Err(Error::Diverged { step });
                }
                Err(e) => {
                    restore(model, &last_good);
                    return Err(diverged(e, step));
                }
            };
            for (g, p) in last_good.iter_mut().zip(model.trainable_mut()) {
                g.clone_from(p);
            }
            lr_t = cosine_lr(cfg.lr, step, total);
            let mut params = model.trainable_mut();
            opt.step(&mut params, &grads, lr_t)?;
            if params.iter().any(|p| !p.is_finite()) {
                restore(model, &last_good);
                return Err(Error::Diverged { step });
            }
            loss_sum += loss.as_f64();
            step += 1;
        }
        let val_acc = match evaluate(model, &data.val, cfg.batch_size) {
            Ok(a) => a,
            Err(e) => {
                restore(model, &last_good);
                return Err(diverged(e, step));
            }
        };
        history.push(EpochMetrics {
            epoch: epoch + 1,
            step,
            train_loss: loss_sum / steps_per_epoch as f64,
            val_acc,
            lr: lr_t,
        });
    }
    Ok(())
}

/// Loads or generates the dataset described by `task`.
pub fn load_task<T: Scalar>(task: &TaskSource, n_classes: usize) -> Result<Dataset<T>> {
    match task {
        TaskSource::Synthetic(spec) => make_synthetic_task(spec),
        TaskSource::Files(files) => {
            let train = Split::read(&files.train)?;
            let val = Split::read(&files.val)?;
            let test = files.test.as_deref().map(Split::read).transpose()?;
            let all = std::iter::once(&train).chain([&val]).chain(test.as_ref());
            for s in all {
                if s.tokens != train.tokens || s.token_dim() != train.token_dim() {
                    return Err(Error::Format("dataset splits disagree on the token grid".into()));
                }
                if let Some(&y) = s.labels.iter().find(|&&y| y >= n_classes) {
                    return Err(Error::Format(format!("label {y} with {n_classes} classes")));
                }
            }
            Ok(Dataset {
                train,
                val,
                test,
                n_classes,
            })
        }
    }
}

/// Model with adapters injected for the configured schedule, plus data.
pub fn prepare<T: Scalar>(cfg: &RunConfig) -> Result<(BackboneModel<T>, Dataset<T>, MaskSchedule)> {
    cfg.validate()?;
    let schedule = cfg.schedule()?;
    let data = load_task::<T>(&cfg.task, cfg.backbone.n_classes)?;
    if data.tokens() != cfg.backbone.patch_tokens || data.token_dim() != cfg.backbone.token_dim {
        return Err(Error::Format(format!(
            "dataset grid {}x{} does not match backbone {}x{}",
            data.tokens(),
            data.token_dim(),
            cfg.backbone.patch_tokens,
            cfg.backbone.token_dim
        )));
    }
    let mut model = BackboneModel::build(&cfg.backbone)?;
    model.inject_for_schedule(&cfg.adapter, &schedule, cfg.train.seeds.init)?;
    Ok((model, data, schedule))
}

#[derive(Debug, Clone)]
pub struct RunOutcome<T: Scalar> {
    pub model: BackboneModel<T>,
    pub schedule: MaskSchedule,
    pub history: Vec<EpochMetrics>,
    pub val_acc: f64,
    pub test_acc: Option<f64>,
}

/// Builds, trains and evaluates one configuration.
pub fn run_experiment<T: Scalar>(cfg: &RunConfig) -> Result<RunOutcome<T>> {
    let (mut model, data, schedule) = prepare::<T>(cfg)?;
    let history = train(&mut model, &data, &schedule, &cfg.train)?;
    let bs = cfg.train.batch_size;
    let val_acc = evaluate(&model, &data.val, bs)?;
    let test_acc = data.test.as_ref().map(|t| evaluate(&model, t, bs)).transpose()?;
    Ok(RunOutcome {
        model,
        schedule,
        history,
        val_acc,
        test_acc,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SweepAxis {
    P,
    CoeffInit,
    Strategy,
    SubRank,
    Budget,
}

impl FromStr for SweepAxis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "p" => Ok(SweepAxis::P),
            "coeff_init" => Ok(SweepAxis::CoeffInit),
            "strategy" => Ok(SweepAxis::Strategy),
            "sub_rank" => Ok(SweepAxis::SubRank),
            "budget" => Ok(SweepAxis::Budget),
            _ => Err(param_err(format!(
                "unknown sweep axis `{s}` (expected p, coeff_init, strategy, sub_rank or budget)"
            ))),
        }
    }
}

impl SweepAxis {
    /// Default value grid of the axis.
    pub fn grid(self) -> Vec<String> {
        let v: &[&str] = match self {
            SweepAxis::P => &["0", "0.1", "0.3", "0.5", "0.7", "0.9"],
            SweepAxis::CoeffInit => &["0.125", "0.25", "0.5", "1", "2", "4"],
            SweepAxis::Strategy => &[
                "fixed:incremental",
                "fixed:decremental",
                "fixed:hourglass",
                "fixed:protruding",
                "fixed:random",
                "fixed:uniform",
                "stochastic:incremental",
                "stochastic:decremental",
                "stochastic:hourglass",
                "stochastic:protruding",
                "stochastic:uniform",
            ],
            SweepAxis::SubRank => &["4", "2", "1"],
            SweepAxis::Budget => &["2", "4", "8"],
        };
        v.iter().map(|s| s.to_string()).collect()
    }
}

fn parse_num<V: FromStr>(axis: &str, value: &str) -> Result<V> {
    value
        .trim()
        .parse()
        .map_err(|_| param_err(format!("bad {axis} value `{value}`")))
}

/// `base` with the swept field set to `value`.
///
/// `sub_rank` keeps the total rank `r · sub_rank` and re-splits it into
/// experts of the given rank; `budget` sets the rank-1 expert count per
/// block; `strategy` takes `strategy[:pattern]`.
pub fn apply_axis(base: &RunConfig, axis: SweepAxis, value: &str) -> Result<RunConfig> {
    let mut c = base.clone();
    match axis {
        SweepAxis::P => c.masking.p = parse_num("p", value)?,
        SweepAxis::CoeffInit => c.adapter.coeff_init = parse_num("coeff_init", value)?,
        SweepAxis::Strategy => {
            let (s, p) = value.split_once(':').unwrap_or((value, ""));
            c.masking.strategy = Strategy::from_str(s.trim())?;
            if !p.is_empty() {
                c.masking.pattern = Pattern::from_str(p.trim())?;
            }
        }
        SweepAxis::SubRank => {
            let s: usize = parse_num("sub_rank", value)?;
            let total = base.adapter.r * base.adapter.sub_rank;
            if s == 0 || !total.is_multiple_of(s) {
                return Err(param_err(format!("sub-rank {s} does not split a total rank of {total}")));
            }
            c.adapter.sub_rank = s;
            c.adapter.r = total / s;
            c.masking.budget = None;
        }
        SweepAxis::Budget => {
            let r: usize = parse_num("budget", value)?;
            c.adapter.r = r;
            c.adapter.sub_rank = 1;
            c.masking.budget = None;
        }
    }
    c.validate()?;
    Ok(c)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub value: String,
    pub seed: u64,
    pub val_acc: f64,
    pub test_acc: f64,
}

pub const SWEEP_RUNS_HEADER: &str = "value,seed,val_acc,test_acc";
pub const SWEEP_SUMMARY_HEADER: &str = "value,mean_test_acc";

fn read_runs(path: &Path) -> Result<Vec<SweepRow>> {
    if !path.exists() {
        return Ok(Vec::new());
    }
    let text = fs::read_to_string(path)?;
    let mut lines = text.lines();
    if lines.next() != Some(SWEEP_RUNS_HEADER) {
        return Err(Error::Format(format!("{} is not a sweep runs file", path.display())));
    }
    let mut rows = Vec::new();
    for line in lines.filter(|l| !l.trim().is_empty()) {
        let f: Vec<&str> = line.split(',').collect();
        let bad = || Error::Format(format!("bad sweep row `{line}`"));
        if f.len() != 4 {
            return Err(bad());
        }
        rows.push(SweepRow {
            value: f[0].to_string(),
            seed: f[1].parse().map_err(|_| bad())?,
            val_acc: f[2].parse().map_err(|_| bad())?,
            test_acc: f[3].parse().map_err(|_| bad())?,
        });
    }
    Ok(rows)
}

fn format_row(r: &SweepRow) -> String {
    format!("{},{},{:.6},{:.6}", r.value, r.seed, r.val_acc, r.test_acc)
}

/// Summary CSV text: mean test accuracy per value, in `values` order.
pub fn sweep_summary(values: &[String], rows: &[SweepRow]) -> String {
    let mut acc: BTreeMap<&str, (f64, usize)> = BTreeMap::new();
    for r in rows {
        let e = acc.entry(r.value.as_str()).or_insert((0.0, 0));
        e.0 += r.test_acc;
        e.1 += 1;
    }
    let mut s = format!("{SWEEP_SUMMARY_HEADER}\n");
    for v in values {
        if let Some(&(sum, n)) = acc.get(v.as_str()) {
            let _ = writeln!(s, "{v},{:.6}", sum / n as f64);
        }
    }
    s
}

/// Runs every `(value, seed)` pair not already recorded in `runs_csv`,
/// appending each result as it finishes, then rewrites `summary_csv`.
///
/// `seed` overrides all three training seeds. Runs without a test split
/// report validation accuracy in the test column.
pub fn sweep(
    base: &RunConfig,
    axis: SweepAxis,
    values: &[String],
    seeds: &[u64],
    runs_csv: &Path,
    summary_csv: &Path,
) -> Result<Vec<SweepRow>> {
    if values.is_empty() || seeds.is_empty() {
        return Err(param_err("a sweep needs at least one value and one seed"));
    }
    let configs: Vec<RunConfig> = values.iter().map(|v| apply_axis(base, axis, v)).collect::<Result<_>>()?;
    let mut rows = read_runs(runs_csv)?;
    if let Some(dir) = runs_csv.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    if rows.is_empty() {
        fs::write(runs_csv, format!("{SWEEP_RUNS_HEADER}\n"))?;
    }
    for (value, cfg) in values.iter().zip(&configs) {
        for &seed in seeds {
            if rows.iter().any(|r| &r.value == value && r.seed == seed) {
                continue;
            }
            let mut c = cfg.clone();
            c.set_seed(seed);
            let out = run_experiment::<f64>(&c)?;
            let row = SweepRow {
                value: value.clone(),
                seed,
                val_acc: out.val_acc,
                test_acc: out.test_acc.unwrap_or(out.val_acc),
            };
            let mut f = fs::OpenOptions::new().append(true).open(runs_csv)?;
            writeln!(f, "{}", format_row(&row))?;
            rows.push(row);
        }
    }
    fs::write(summary_csv, sweep_summary(values, &rows))?;
    Ok(rows)
}
