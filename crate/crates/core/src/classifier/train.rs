//! Training harness: stratified split, cross-entropy with Adam, dropout
//! after the first hidden layer, early stopping on validation loss.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{classify, forward, MlpParams, MovementClass, ScaledFeatures, Scaler, ScalerError, LAYER_DIMS};
use crate::features::MotionFeatures;

const DROPOUT: f64 = 0.5;
const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const EPSILON: f64 = 1e-8;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("dataset has no rows labelled {0}")]
    MissingClass(&'static str),
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Scaler(#[from] ScalerError),
    #[error("dataset csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("dataset row {line}: {message}")]
    BadRow { line: u64, message: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LabeledRow {
    pub features: MotionFeatures,
    pub label: MovementClass,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct LabeledDataset {
    rows: Vec<LabeledRow>,
}

#[derive(Serialize, Deserialize)]
struct CsvRow {
    frame_diff: f64,
    flow_mag: f64,
    label: String,
}

impl LabeledDataset {
    pub fn new(rows: Vec<LabeledRow>) -> Self {
        Self { rows }
    }

    pub fn rows(&self) -> &[LabeledRow] {
        &self.rows
    }

    pub fn push(&mut self, row: LabeledRow) {
        self.rows.push(row);
    }

    /// Reads `frame_diff,flow_mag,label` CSV with a header row.
    pub fn read_csv(path: &Path) -> Result<Self, TrainError> {
        let mut reader = csv::Reader::from_path(path)?;
        let mut rows = Vec::new();
        for (i, rec) in reader.deserialize::<CsvRow>().enumerate() {
            let line = i as u64 + 2;
            let rec = rec?;
            let label = rec
                .label
                .parse()
                .map_err(|message| TrainError::BadRow { line, message })?;
            if !(rec.frame_diff.is_finite() && rec.flow_mag.is_finite()) {
                return Err(TrainError::BadRow {
                    line,
                    message: "non-finite feature".into(),
                });
            }
            rows.push(LabeledRow {
                features: MotionFeatures {
                    frame_diff: rec.frame_diff,
                    flow_mag: rec.flow_mag,
                },
                label,
            });
        }
        Ok(Self { rows })
    }

    pub fn write_csv(&self, path: &Path) -> Result<(), TrainError> {
        let mut writer = csv::Writer::from_path(path)?;
        for row in &self.rows {
            writer.serialize(CsvRow {
                frame_diff: row.features.frame_diff,
                flow_mag: row.features.flow_mag,
                label: row.label.as_str().to_string(),
            })?;
        }
        writer.flush().map_err(csv::Error::from)?;
        Ok(())
    }

    fn check_classes(&self) -> Result<(), TrainError> {
        for class in MovementClass::ALL {
            if !self.rows.iter().any(|r| r.label == class) {
                return Err(TrainError::MissingClass(class.as_str()));
            }
        }
        Ok(())
    }

    /// Per-class shuffled 60/20/20 split.
    fn stratified_split(&self, rng: &mut impl Rng) -> [Vec<LabeledRow>; 3] {
        let mut splits: [Vec<LabeledRow>; 3] = Default::default();
        for class in MovementClass::ALL {
            let mut members: Vec<LabeledRow> =
                self.rows.iter().filter(|r| r.label == class).copied().collect();
            members.shuffle(rng);
            let n = members.len();
            let n_train = (n as f64 * 0.6).round() as usize;
            let n_val = (n as f64 * 0.2).round() as usize;
            let n_val = n_val.min(n - n_train);
            splits[0].extend_from_slice(&members[..n_train]);
            splits[1].extend_from_slice(&members[n_train..n_train + n_val]);
            splits[2].extend_from_slice(&members[n_train + n_val..]);
        }
        splits
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub patience: usize,
    pub max_epochs: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.001,
            weight_decay: 1e-5,
            batch_size: 64,
            patience: 5,
            max_epochs: 500,
            seed: 0,
        }
    }
}

impl TrainConfig {
    fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::InvalidConfig(m.into()));
        if !(self.learning_rate > 0.0) {
            return bad("learning_rate must be positive");
        }
        if !(self.weight_decay >= 0.0) {
            return bad("weight_decay must be non-negative");
        }
        if self.batch_size == 0 || self.patience == 0 || self.max_epochs == 0 {
            return bad("batch_size, patience and max_epochs must be positive");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    /// Mean cross-entropy over the training split, dropout off.
    pub train_loss: f64,
    pub val_loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    /// Training-split loss of the initial parameters.
    pub initial_train_loss: f64,
    pub epochs: Vec<EpochStats>,
    pub best_epoch: usize,
    pub stopped_early: bool,
    pub test_accuracy: f64,
    pub split_sizes: [usize; 3],
}

impl TrainReport {
    pub fn epochs_run(&self) -> usize {
        self.epochs.len()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainedModel {
    pub params: MlpParams,
    pub scaler: Scaler,
    pub report: TrainReport,
}

/// Result of the optimisation loop alone.
#[derive(Debug, Clone)]
pub struct FitOutcome {
    pub best: MlpParams,
    pub initial_train_loss: f64,
    pub epochs: Vec<EpochStats>,
    pub best_epoch: usize,
    pub stopped_early: bool,
}

pub fn train(data: &LabeledDataset, cfg: &TrainConfig) -> Result<TrainedModel, TrainError> {
    cfg.validate()?;
    data.check_classes()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let [train_rows, val_rows, test_rows] = data.stratified_split(&mut rng);

    let raw: Vec<[f64; 2]> = train_rows.iter().map(|r| r.features.as_array()).collect();
    let mut scaler = Scaler::fit(&raw)?;
    scaler.mean = scaler.mean.map(|v| v as f32 as f64);
    scaler.std = scaler.std.map(|v| v as f32 as f64);

    let scale = |rows: &[LabeledRow]| -> Vec<Sample> {
        rows.iter()
            .map(|r| (scaler.transform(&r.features), r.label.index()))
            .collect()
    };
    let train_set = scale(&train_rows);
    let val_set = scale(&val_rows);

    let outcome = fit_with_validation(&train_set, cfg, &mut rng, |_, params| {
        mean_loss(params, &val_set)
    });
    let mut params = outcome.best;
    params.round_to_f32();

    let test_accuracy = evaluate_accuracy(&params, &scaler, &test_rows);
    Ok(TrainedModel {
        params,
        scaler,
        report: TrainReport {
            initial_train_loss: outcome.initial_train_loss,
            epochs: outcome.epochs,
            best_epoch: outcome.best_epoch,
            stopped_early: outcome.stopped_early,
            test_accuracy,
            split_sizes: [train_rows.len(), val_rows.len(), test_rows.len()],
        },
    })
}

/// Fraction of rows whose predicted class equals the label.
pub fn evaluate_accuracy(params: &MlpParams, scaler: &Scaler, rows: &[LabeledRow]) -> f64 {
    if rows.is_empty() {
        return 0.0;
    }
    let correct = rows
        .iter()
        .filter(|r| classify(params, scaler, &r.features).class == r.label)
        .count();
    correct as f64 / rows.len() as f64
}

/// Scaled input and class index.
pub type Sample = (ScaledFeatures, usize);

fn mean_loss(params: &MlpParams, samples: &[Sample]) -> f64 {
    if samples.is_empty() {
        return 0.0;
    }
    let total: f64 = samples
        .iter()
        .map(|(x, y)| -forward(params, x)[*y].max(f64::MIN_POSITIVE).ln())
        .sum();
    total / samples.len() as f64
}

/// Runs Adam over `train_set` until `validate` stops improving for
/// `cfg.patience` consecutive epochs or `cfg.max_epochs` is reached.
///
/// `validate(epoch, params)` is called once per epoch (1-based) and returns
/// the validation loss; the parameters of the lowest value are returned.
pub fn fit_with_validation<F>(
    train_set: &[Sample],
    cfg: &TrainConfig,
    rng: &mut ChaCha8Rng,
    mut validate: F,
) -> FitOutcome
where
    F: FnMut(usize, &MlpParams) -> f64,
{
    let mut params = MlpParams::he_uniform(rng);
    let mut adam = Adam::new(&params);
    let initial_train_loss = mean_loss(&params, train_set);

    let mut best = params.clone();
    let mut best_loss = f64::INFINITY;
    let mut best_epoch = 0;
    let mut stale = 0;
    let mut epochs = Vec::new();
    let mut stopped_early = false;
    let mut order: Vec<usize> = (0..train_set.len()).collect();

    for epoch in 1..=cfg.max_epochs {
        order.shuffle(rng);
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<Sample> = chunk.iter().map(|&i| train_set[i]).collect();
            let masks = DropoutMasks::sample(batch.len(), rng);
            let (_, mut grad) = backprop(&params, &batch, Some(&masks));
            // L2 penalty folded into the gradient.
            for (g, w) in grad.values_mut().zip(params.values()) {
                *g += cfg.weight_decay * w;
            }
            adam.step(&mut params, &grad, cfg.learning_rate);
        }

        let val_loss = validate(epoch, &params);
        epochs.push(EpochStats {
            epoch,
            train_loss: mean_loss(&params, train_set),
            val_loss,
        });
        if val_loss < best_loss {
            best_loss = val_loss;
            best = params.clone();
            best_epoch = epoch;
            stale = 0;
        } else {
            stale += 1;
            if stale >= cfg.patience {
                stopped_early = true;
                break;
            }
        }
    }
    FitOutcome {
        best,
        initial_train_loss,
        epochs,
        best_epoch,
        stopped_early,
    }
}

/// Mean cross-entropy over `batch` and its gradient, dropout disabled.
pub fn loss_and_gradient(params: &MlpParams, batch: &[Sample]) -> (f64, MlpParams) {
    backprop(params, batch, None)
}

/// Inverted-dropout keep masks for hidden layer 1, one row per sample.
struct DropoutMasks(Vec<[f64; LAYER_DIMS[1]]>);

impl DropoutMasks {
    fn sample(n: usize, rng: &mut impl Rng) -> Self {
        let keep_scale = 1.0 / (1.0 - DROPOUT);
        Self(
            (0..n)
                .map(|_| std::array::from_fn(|_| if rng.random_bool(1.0 - DROPOUT) { keep_scale } else { 0.0 }))
                .collect(),
        )
    }
}

fn backprop(params: &MlpParams, batch: &[Sample], masks: Option<&DropoutMasks>) -> (f64, MlpParams) {
    let [l1, l2, l3] = &params.layers;
    let mut grad = MlpParams::zeros();
    let mut loss = 0.0;
    let n = batch.len().max(1) as f64;

    for (s, (x, y)) in batch.iter().enumerate() {
        let x = x.0;
        // Forward, keeping pre-activations.
        let z1: Vec<f64> = (0..l1.rows)
            .map(|r| l1.bias[r] + l1.weights[r * 2] * x[0] + l1.weights[r * 2 + 1] * x[1])
            .collect();
        let mut a1: Vec<f64> = z1.iter().map(|z| z.max(0.0)).collect();
        if let Some(m) = masks {
            for (a, k) in a1.iter_mut().zip(m.0[s].iter()) {
                *a *= k;
            }
        }
        let z2: Vec<f64> = (0..l2.rows)
            .map(|r| {
                l2.bias[r]
                    + l2.weights[r * l2.cols..(r + 1) * l2.cols]
                        .iter()
                        .zip(&a1)
                        .map(|(w, a)| w * a)
                        .sum::<f64>()
            })
            .collect();
        let a2: Vec<f64> = z2.iter().map(|z| z.max(0.0)).collect();
        let logits: [f64; 3] = std::array::from_fn(|r| {
            l3.bias[r]
                + l3.weights[r * l3.cols..(r + 1) * l3.cols]
                    .iter()
                    .zip(&a2)
                    .map(|(w, a)| w * a)
                    .sum::<f64>()
        });
        let probs = super::softmax(&logits);
        loss -= probs[*y].max(f64::MIN_POSITIVE).ln();

        // Backward; d(CE)/d(logit) = p − onehot.
        let d3: [f64; 3] = std::array::from_fn(|r| (probs[r] - if r == *y { 1.0 } else { 0.0 }) / n);
        let g3 = &mut grad.layers[2];
        for r in 0..3 {
            g3.bias[r] += d3[r];
            for c in 0..l3.cols {
                g3.weights[r * l3.cols + c] += d3[r] * a2[c];
            }
        }
        let d2: Vec<f64> = (0..l2.rows)
            .map(|c| {
                if z2[c] > 0.0 {
                    (0..3).map(|r| l3.weights[r * l3.cols + c] * d3[r]).sum()
                } else {
                    0.0
                }
            })
            .collect();
        let g2 = &mut grad.layers[1];
        for r in 0..l2.rows {
            g2.bias[r] += d2[r];
            for c in 0..l2.cols {
                g2.weights[r * l2.cols + c] += d2[r] * a1[c];
            }
        }
        let d1: Vec<f64> = (0..l1.rows)
            .map(|c| {
                if z1[c] <= 0.0 {
                    return 0.0;
                }
                let keep = masks.map_or(1.0, |m| m.0[s][c]);
                keep * (0..l2.rows).map(|r| l2.weights[r * l2.cols + c] * d2[r]).sum::<f64>()
            })
            .collect();
        let g1 = &mut grad.layers[0];
        for r in 0..l1.rows {
            g1.bias[r] += d1[r];
            g1.weights[r * 2] += d1[r] * x[0];
            g1.weights[r * 2 + 1] += d1[r] * x[1];
        }
    }
    (loss / n, grad)
}

struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    fn new(params: &MlpParams) -> Self {
        let n = params.parameter_count();
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    fn step(&mut self, params: &mut MlpParams, grad: &MlpParams, lr: f64) {
        self.t += 1;
        let bc1 = 1.0 - BETA1.powi(self.t);
        let bc2 = 1.0 - BETA2.powi(self.t);
        for (((w, g), m), v) in params
            .values_mut()
            .zip(grad.values())
            .zip(self.m.iter_mut())
            .zip(self.v.iter_mut())
        {
            *m = BETA1 * *m + (1.0 - BETA1) * g;
            *v = BETA2 * *v + (1.0 - BETA2) * g * g;
            let m_hat = *m / bc1;
            let v_hat = *v / bc2;
            *w -= lr * m_hat / (v_hat.sqrt() + EPSILON);
        }
    }
}
