//! Staged ADAM training of detector models on labelled stamps.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::detector::DetectorModel;
use crate::error::{Error, Result};
use crate::lenssim::{stamp_seed, ImageStamp};
use crate::par::Parallelism;
use crate::params::ParamStore;
use crate::tensor::{Scalar, Tensor};

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;
pub const DEFAULT_LEARNING_RATE: f64 = 1e-4;
/// Above this learning rate validation only warns.
pub const LEARNING_RATE_WARN: f64 = 1e-3;

/// How stamp pixels are mapped before entering the network.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InputScaling {
    None,
    /// Each band min-max mapped to `[0, 1]`.
    #[default]
    PerBand,
    /// One min-max over all bands of the stamp.
    Global,
}

fn min_max_into(values: &mut [f32]) {
    let (lo, hi) = values.iter().fold((f32::INFINITY, f32::NEG_INFINITY), |(l, h), &v| (l.min(v), h.max(v)));
    let span = hi - lo;
    for v in values.iter_mut() {
        *v = if span > 0.0 { (*v - lo) / span } else { 0.0 };
    }
}

/// Maps a `[bands, H, W]` tensor according to `scaling`. Constant bands (or a
/// constant stamp under global scaling) become zeros.
pub fn rescale_pixels(pixels: &Tensor<f32>, scaling: InputScaling) -> Tensor<f32> {
    let mut out = pixels.clone();
    match scaling {
        InputScaling::None => {}
        InputScaling::Global => min_max_into(out.data_mut()),
        InputScaling::PerBand => {
            let per = pixels.len() / pixels.shape()[0];
            for band in out.data_mut().chunks_mut(per) {
                min_max_into(band);
            }
        }
    }
    out
}

/// Per-band min-max rescaling of a stamp.
pub fn rescale(stamp: &ImageStamp) -> ImageStamp {
    ImageStamp { pixels: rescale_pixels(&stamp.pixels, InputScaling::PerBand), ..stamp.clone() }
}

/// The network input for a stamp under the model's scaling, in precision `F`.
pub fn model_input<F: Scalar>(pixels: &Tensor<f32>, scaling: InputScaling) -> Tensor<F> {
    rescale_pixels(pixels, scaling).cast()
}

/// Rotates every band of a `[bands, S, S]` tensor by `quarter_turns * 90`
/// degrees; one turn maps `out[r][c] = in[c][S-1-r]`.
pub fn rotate(pixels: &Tensor<f32>, quarter_turns: usize) -> Result<Tensor<f32>> {
    let s = pixels.shape();
    if s.len() != 3 || s[1] != s[2] {
        return Err(Error::Contract(format!("rotation needs a square [bands, S, S] stamp, got {s:?}")));
    }
    let (b, n) = (s[0], s[1]);
    let mut cur = pixels.clone();
    for _ in 0..quarter_turns % 4 {
        let src = cur.data();
        let mut out = vec![0.0f32; src.len()];
        for k in 0..b {
            let base = k * n * n;
            for r in 0..n {
                for c in 0..n {
                    out[base + r * n + c] = src[base + c * n + (n - 1 - r)];
                }
            }
        }
        cur = Tensor::new(s.to_vec(), out)?;
    }
    Ok(cur)
}

/// The four quarter-turn rotations of a stamp, starting with the original.
pub fn augment(stamp: &ImageStamp) -> Result<Vec<ImageStamp>> {
    (0..4)
        .map(|n| Ok(ImageStamp { id: format!("{}_r{n}", stamp.id), pixels: rotate(&stamp.pixels, n)?, ..stamp.clone() }))
        .collect()
}

/// One constant-learning-rate stage.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Stage {
    pub learning_rate: f64,
    pub epochs: usize,
}

impl std::str::FromStr for Stage {
    type Err = Error;

    /// Parses `LR:EPOCHS`, e.g. `1e-4:30`.
    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::Config(format!("stage `{s}` is not LR:EPOCHS"));
        let (lr, ep) = s.split_once(':').ok_or_else(bad)?;
        Ok(Stage { learning_rate: lr.trim().parse().map_err(|_| bad())?, epochs: ep.trim().parse().map_err(|_| bad())? })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub stages: Vec<Stage>,
    pub batch_size: usize,
    pub seed: u64,
    /// Held-out fraction of the dataset used for the per-epoch validation.
    pub val_fraction: f64,
    /// Train on all four quarter-turn rotations of every stamp.
    pub augment_rotations: bool,
    pub parallelism: Parallelism,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            stages: vec![Stage { learning_rate: DEFAULT_LEARNING_RATE, epochs: 30 }],
            batch_size: 32,
            seed: 0,
            val_fraction: 0.1,
            augment_rotations: true,
            parallelism: Parallelism::default(),
        }
    }
}

impl TrainConfig {
    /// Rejects empty or non-positive stages and bad fractions; warns on
    /// learning rates above [`LEARNING_RATE_WARN`].
    pub fn validate(&self) -> Result<()> {
        self.validate_stages()?;
        if self.stages.is_empty() {
            return Err(Error::Config("at least one training stage is required".into()));
        }
        Ok(())
    }

    fn validate_stages(&self) -> Result<()> {
        for (k, st) in self.stages.iter().enumerate() {
            if st.epochs == 0 {
                return Err(Error::Config(format!("stage {} has zero epochs", k + 1)));
            }
            if !(st.learning_rate > 0.0 && st.learning_rate.is_finite()) {
                return Err(Error::Config(format!("stage {} learning rate must be positive", k + 1)));
            }
            if st.learning_rate > LEARNING_RATE_WARN {
                log::warn!(
                    "stage {} learning rate {} exceeds {LEARNING_RATE_WARN}; performance usually degrades",
                    k + 1,
                    st.learning_rate
                );
            }
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if !(self.val_fraction > 0.0 && self.val_fraction < 1.0) {
            return Err(Error::Config(format!("val_fraction {} must lie in (0, 1)", self.val_fraction)));
        }
        Ok(())
    }

    pub fn total_epochs(&self) -> usize {
        self.stages.iter().map(|s| s.epochs).sum()
    }
}

/// ADAM moment accumulators, one pair per parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<F: Scalar = f32> {
    pub m: Vec<Tensor<F>>,
    pub v: Vec<Tensor<F>>,
    pub step: u64,
}

impl<F: Scalar> AdamState<F> {
    pub fn new(params: &ParamStore<F>) -> Self {
        let zeros: Vec<Tensor<F>> = params.iter().map(|(_, t)| Tensor::zeros(t.shape())).collect();
        Self { m: zeros.clone(), v: zeros, step: 0 }
    }
}

/// One bias-corrected ADAM update with the default decay rates.
pub fn adam_step<F: Scalar>(
    params: &mut ParamStore<F>,
    grads: &[Tensor<F>],
    state: &mut AdamState<F>,
    learning_rate: f64,
) -> Result<()> {
    if grads.len() != params.len() || state.m.len() != params.len() {
        return Err(Error::Contract(format!(
            "{} gradients and {} moment slots for {} parameters",
            grads.len(),
            state.m.len(),
            params.len()
        )));
    }
    if !(learning_rate > 0.0) {
        return Err(Error::Contract(format!("learning rate {learning_rate} must be positive")));
    }
    for ((p, g), m) in params.iter().zip(grads).zip(&state.m) {
        if p.1.shape() != g.shape() || g.shape() != m.shape() {
            return Err(Error::Contract(format!("gradient shape {:?} for parameter {} {:?}", g.shape(), p.0, p.1.shape())));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (F::of(ADAM_BETA1), F::of(ADAM_BETA2));
    let c1 = F::of(1.0 - ADAM_BETA1.powi(t));
    let c2 = F::of(1.0 - ADAM_BETA2.powi(t));
    let (lr, eps) = (F::of(learning_rate), F::of(ADAM_EPS));
    let one = F::one();
    for (((p, g), m), v) in params.tensors_mut().zip(grads).zip(&mut state.m).zip(&mut state.v) {
        let (p, g, m, v) = (p.data_mut(), g.data(), m.data_mut(), v.data_mut());
        for i in 0..p.len() {
            m[i] = b1 * m[i] + (one - b1) * g[i];
            v[i] = b2 * v[i] + (one - b2) * g[i] * g[i];
            p[i] = p[i] - lr * (m[i] / c1) / ((v[i] / c2).sqrt() + eps);
        }
    }
    Ok(())
}

/// One row of the training history.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    /// 1-based, counted across stages.
    pub epoch: usize,
    /// 1-based.
    pub stage: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_accuracy: f64,
}

pub fn write_history_csv(path: impl AsRef<Path>, history: &[EpochRecord]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::Format(e.to_string()))?;
    for row in history {
        w.serialize(row).map_err(|e| Error::Format(e.to_string()))?;
    }
    w.flush()?;
    Ok(())
}

/// Deterministic train/validation partition of `n` samples: the first
/// `round(n * val_fraction)` of a seeded shuffle form the validation split.
pub fn split_indices(n: usize, val_fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(stamp_seed(seed, u64::MAX)));
    let n_val = ((n as f64 * val_fraction).round() as usize).clamp(1, n.saturating_sub(1).max(1));
    let train = idx.split_off(n_val);
    (train, idx)
}

/// Where and how to resume a run.
#[derive(Clone, Debug, Default)]
pub struct TrainOptions<'a> {
    /// Writes `history.csv` and `stage{K}_epoch{N}.ckpt` here when set.
    pub out_dir: Option<&'a Path>,
    /// Index of the first stage to run; earlier stages count as completed
    /// for the epoch numbering and the shuffle stream.
    pub start_stage: usize,
}

/// Result of a training run.
#[derive(Clone, Debug)]
pub struct TrainOutcome<F: Scalar = f32> {
    pub model: DetectorModel<F>,
    pub history: Vec<EpochRecord>,
}

fn check_compat<F: Scalar>(model: &DetectorModel<F>, data: &[ImageStamp]) -> Result<()> {
    let cfg = model.config();
    let want = [cfg.input_bands, cfg.input_size, cfg.input_size];
    if let Some(bad) = data.iter().find(|s| s.pixels.shape() != want) {
        return Err(Error::Config(format!(
            "stamp {} has shape {:?}; the model expects {want:?}",
            bad.id,
            bad.pixels.shape()
        )));
    }
    Ok(())
}

/// Mean BCE and accuracy at threshold 0.5 over `indices`.
fn evaluate_split<F: Scalar>(model: &DetectorModel<F>, inputs: &[Tensor<F>], labels: &[u8], indices: &[usize], par: Parallelism) -> Result<(f64, f64)> {
    let probs: Vec<F> = par
        .map_slice(indices, |&i| model.predict_one(&inputs[i]))
        .into_iter()
        .collect::<Result<_>>()?;
    let eps = crate::tensor::BCE_EPS;
    let mut loss = 0.0;
    let mut correct = 0usize;
    for (&i, p) in indices.iter().zip(&probs) {
        let p = p.as_f64().clamp(eps, 1.0 - eps);
        let y = labels[i] as f64;
        loss -= y * p.ln() + (1.0 - y) * (1.0 - p).ln();
        correct += usize::from(u8::from(p >= 0.5) == labels[i]);
    }
    let n = indices.len().max(1) as f64;
    Ok((loss / n, correct as f64 / n))
}

/// Trains `model` through `cfg.stages[opts.start_stage..]`.
///
/// Each stage starts a fresh ADAM state. Every epoch shuffles the training
/// split (optionally expanded to all four rotations) with a stream derived
/// from the seed and the global epoch number, so resuming from the
/// checkpoint of stage `K` reproduces an uninterrupted run exactly.
pub fn train<F: Scalar>(
    mut model: DetectorModel<F>,
    data: &[ImageStamp],
    cfg: &TrainConfig,
    opts: &TrainOptions<'_>,
) -> Result<TrainOutcome<F>> {
    cfg.validate()?;
    if opts.start_stage > cfg.stages.len() {
        return Err(Error::Config(format!("start stage {} beyond {} stages", opts.start_stage, cfg.stages.len())));
    }
    if data.len() < 2 {
        return Err(Error::Config("training needs at least two stamps".into()));
    }
    check_compat(&model, data)?;
    let (train_idx, val_idx) = split_indices(data.len(), cfg.val_fraction, cfg.seed);
    let labels: Vec<u8> = data.iter().map(|s| s.label).collect();
    let positives = train_idx.iter().filter(|&&i| labels[i] == 1).count();
    if positives == 0 || positives == train_idx.len() {
        return Err(Error::Config("the training split must contain both classes".into()));
    }
    let par = cfg.parallelism;
    let scaling = model.config().input_scaling;
    let inputs: Vec<Tensor<F>> = par.map_slice(data, |s| model_input(&s.pixels, scaling));
    // Rotated copies are built once; entry (i, n) is stamp i turned n times.
    let rotations: Vec<[Option<Tensor<F>>; 3]> = if cfg.augment_rotations {
        par.map_slice(data, |s| -> Result<[Option<Tensor<F>>; 3]> {
            let mut out: [Option<Tensor<F>>; 3] = [None, None, None];
            for (n, slot) in out.iter_mut().enumerate() {
                *slot = Some(model_input(&rotate(&s.pixels, n + 1)?, scaling));
            }
            Ok(out)
        })
        .into_iter()
        .collect::<Result<_>>()?
    } else {
        Vec::new()
    };
    let input_of = |i: usize, turns: usize| -> &Tensor<F> {
        if turns == 0 {
            &inputs[i]
        } else {
            rotations[i][turns - 1].as_ref().expect("rotation prepared")
        }
    };
    let turns = if cfg.augment_rotations { 4 } else { 1 };
    let entries: Vec<(usize, usize)> = train_idx.iter().flat_map(|&i| (0..turns).map(move |n| (i, n))).collect();

    if let Some(dir) = opts.out_dir {
        fs::create_dir_all(dir)?;
    }
    let mut history = Vec::new();
    let mut epoch: usize = cfg.stages[..opts.start_stage].iter().map(|s| s.epochs).sum();
    for (k, stage) in cfg.stages.iter().enumerate().skip(opts.start_stage) {
        let mut adam = AdamState::new(model.params());
        for _ in 0..stage.epochs {
            epoch += 1;
            let mut order = entries.clone();
            order.shuffle(&mut ChaCha8Rng::seed_from_u64(stamp_seed(cfg.seed, epoch as u64)));
            let mut loss_sum = 0.0;
            for batch in order.chunks(cfg.batch_size) {
                let results: Vec<(F, Vec<Tensor<F>>)> = par
                    .map_slice(batch, |&(i, n)| model.loss_and_grads(input_of(i, n), F::of(labels[i] as f64)))
                    .into_iter()
                    .collect::<Result<_>>()?;
                let mut sum: Vec<Tensor<F>> = Vec::new();
                for (loss, grads) in results {
                    if !loss.is_finite() {
                        return Err(Error::NonFinite(format!("loss {loss} at epoch {epoch} (stage {})", k + 1)));
                    }
                    loss_sum += loss.as_f64();
                    if sum.is_empty() {
                        sum = grads;
                    } else {
                        for (acc, g) in sum.iter_mut().zip(&grads) {
                            acc.add_assign(g);
                        }
                    }
                }
                let scale = F::of(1.0 / batch.len() as f64);
                for g in &mut sum {
                    for v in g.data_mut() {
                        *v = *v * scale;
                    }
                }
                if sum.iter().any(|g| !g.is_finite()) {
                    return Err(Error::NonFinite(format!("gradient at epoch {epoch} (stage {})", k + 1)));
                }
                adam_step(model.params_mut(), &sum, &mut adam, stage.learning_rate)?;
            }
            let (val_loss, val_accuracy) = evaluate_split(&model, &inputs, &labels, &val_idx, par)?;
            let record = EpochRecord {
                epoch,
                stage: k + 1,
                lr: stage.learning_rate,
                train_loss: loss_sum / order.len() as f64,
                val_loss,
                val_accuracy,
            };
            log::info!(
                "epoch {} stage {} train_loss {:.5} val_loss {:.5} val_acc {:.4}",
                record.epoch,
                record.stage,
                record.train_loss,
                record.val_loss,
                record.val_accuracy
            );
            history.push(record);
        }
        if let Some(dir) = opts.out_dir {
            model.to_checkpoint(epoch as u64).save(dir.join(format!("stage{}_epoch{epoch}.ckpt", k + 1)))?;
            write_history_csv(dir.join("history.csv"), &history)?;
        }
    }
    Ok(TrainOutcome { model, history })
}

/// Continues training a checkpointed model on new data with fresh optimiser
/// state. An empty stage list returns the model unchanged.
pub fn fine_tune<F: Scalar>(
    model: DetectorModel<F>,
    data: &[ImageStamp],
    cfg: &TrainConfig,
    opts: &TrainOptions<'_>,
) -> Result<TrainOutcome<F>> {
    check_compat(&model, data)?;
    cfg.validate_stages()?;
    if cfg.stages.is_empty() {
        return Ok(TrainOutcome { model, history: Vec::new() });
    }
    train(model, data, cfg, opts)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rescale_examples() {
        let t = Tensor::new(vec![2, 1, 3], vec![0.0, 5.0, 10.0, 3.0, 3.0, 3.0]).unwrap();
        let r = rescale_pixels(&t, InputScaling::PerBand);
        assert_eq!(r.data(), &[0.0, 0.5, 1.0, 0.0, 0.0, 0.0]);
        assert_eq!(rescale_pixels(&r, InputScaling::PerBand), r);
        let g = rescale_pixels(&t, InputScaling::Global);
        assert_eq!(g.data(), &[0.0, 0.5, 1.0, 0.3, 0.3, 0.3]);
    }

    #[test]
    fn rotation_index_map() {
        let t = Tensor::from_fn(&[2, 3, 3], |i| i as f32);
        let r1 = rotate(&t, 1).unwrap();
        for b in 0..2 {
            for r in 0..3 {
                for c in 0..3 {
                    assert_eq!(r1.at(&[b, r, c]), t.at(&[b, c, 2 - r]));
                }
            }
        }
        assert_eq!(rotate(&r1, 3).unwrap(), t);
        assert_eq!(rotate(&t, 0).unwrap(), t);
        assert!(matches!(rotate(&Tensor::zeros(&[1, 2, 3]), 1), Err(Error::Contract(_))));
    }

    #[test]
    fn stage_parsing_and_validation() {
        let s: Stage = "1e-4:30".parse().unwrap();
        assert_eq!(s, Stage { learning_rate: 1e-4, epochs: 30 });
        assert!("0.1".parse::<Stage>().is_err());
        let mut cfg = TrainConfig { stages: vec![Stage { learning_rate: 1e-4, epochs: 0 }], ..Default::default() };
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
        cfg.stages = vec![Stage { learning_rate: 0.0, epochs: 1 }];
        assert!(cfg.validate().is_err());
        cfg.stages = vec![Stage { learning_rate: 5e-3, epochs: 1 }];
        assert!(cfg.validate().is_ok(), "large learning rates only warn");
        cfg.stages.clear();
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn split_is_deterministic_and_disjoint() {
        let (a, b) = split_indices(100, 0.1, 5);
        assert_eq!((a.len(), b.len()), (90, 10));
        assert_eq!(split_indices(100, 0.1, 5), (a.clone(), b.clone()));
        let mut all: Vec<usize> = a.into_iter().chain(b).collect();
        all.sort_unstable();
        assert_eq!(all, (0..100).collect::<Vec<_>>());
    }

    #[test]
    fn zero_gradient_leaves_parameters() {
        let mut p = ParamStore::<f64>::new();
        p.add("w", Tensor::full(&[3], 0.5));
        let before = p.clone();
        let mut st = AdamState::new(&p);
        adam_step(&mut p, &[Tensor::zeros(&[3])], &mut st, 1e-3).unwrap();
        assert_eq!(p, before);
        assert_eq!(st.step, 1);
        assert!(adam_step(&mut p, &[Tensor::zeros(&[2])], &mut st, 1e-3).is_err());
    }
}
