//! Motion classifier: z-score scaler followed by a 2→32→16→3 ReLU network
//! with softmax output over low/medium/high movement.

mod model_io;
mod train;

pub use model_io::{load_model, read_model, save_model, write_model, ModelError, MODEL_MAGIC};
pub use train::{
    evaluate_accuracy, fit_with_validation, loss_and_gradient, train, EpochStats, LabeledDataset,
    FitOutcome, LabeledRow, Sample, TrainConfig, TrainError, TrainReport, TrainedModel,
};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::features::MotionFeatures;

/// Layer widths from input to output.
pub const LAYER_DIMS: [usize; 4] = [2, 32, 16, 3];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MovementClass {
    Low,
    Medium,
    High,
}

impl MovementClass {
    pub const ALL: [MovementClass; 3] = [MovementClass::Low, MovementClass::Medium, MovementClass::High];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    pub fn as_str(self) -> &'static str {
        match self {
            MovementClass::Low => "low",
            MovementClass::Medium => "medium",
            MovementClass::High => "high",
        }
    }

    /// Medium and high movement share the high branch.
    pub fn branch(self) -> Branch {
        match self {
            MovementClass::Low => Branch::Low,
            MovementClass::Medium | MovementClass::High => Branch::High,
        }
    }

    /// Argmax over per-class scores (probabilities or logits). Ties go to
    /// the higher-movement class.
    pub fn from_scores(scores: &[f64; 3]) -> Self {
        let mut best = 0;
        for i in 1..3 {
            if scores[i] >= scores[best] {
                best = i;
            }
        }
        Self::ALL[best]
    }
}

impl std::str::FromStr for MovementClass {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "low" => Ok(MovementClass::Low),
            "medium" => Ok(MovementClass::Medium),
            "high" => Ok(MovementClass::High),
            other => Err(format!("unknown movement class {other:?}")),
        }
    }
}

/// Which logic path a batch takes downstream.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Branch {
    Low,
    High,
}

impl Branch {
    pub fn as_str(self) -> &'static str {
        match self {
            Branch::Low => "low",
            Branch::High => "high",
        }
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum ScalerError {
    #[error("need at least 2 rows to fit a scaler, got {0}")]
    TooFewRows(usize),
    #[error("feature {feature} has zero variance")]
    DegenerateVariance { feature: &'static str },
}

/// Features after z-score normalization.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScaledFeatures(pub [f64; 2]);

/// Per-feature mean and population standard deviation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Scaler {
    pub mean: [f64; 2],
    pub std: [f64; 2],
}

impl Scaler {
    pub fn identity() -> Self {
        Self {
            mean: [0.0; 2],
            std: [1.0; 2],
        }
    }

    pub fn fit(rows: &[[f64; 2]]) -> Result<Self, ScalerError> {
        if rows.len() < 2 {
            return Err(ScalerError::TooFewRows(rows.len()));
        }
        let n = rows.len() as f64;
        let mut mean = [0.0; 2];
        let mut std = [0.0; 2];
        for k in 0..2 {
            mean[k] = rows.iter().map(|r| r[k]).sum::<f64>() / n;
            let var = rows.iter().map(|r| (r[k] - mean[k]).powi(2)).sum::<f64>() / n;
            std[k] = var.sqrt();
        }
        for (k, name) in ["frame_diff", "flow_mag"].into_iter().enumerate() {
            if !(std[k] > 0.0) {
                return Err(ScalerError::DegenerateVariance { feature: name });
            }
        }
        Ok(Self { mean, std })
    }

    pub fn transform(&self, f: &MotionFeatures) -> ScaledFeatures {
        self.transform_raw(f.as_array())
    }

    pub fn transform_raw(&self, x: [f64; 2]) -> ScaledFeatures {
        ScaledFeatures([
            (x[0] - self.mean[0]) / self.std[0],
            (x[1] - self.mean[1]) / self.std[1],
        ])
    }
}

/// One dense layer, weights row-major `rows x cols` (output x input).
#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub rows: usize,
    pub cols: usize,
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Layer {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            weights: vec![0.0; rows * cols],
            bias: vec![0.0; rows],
        }
    }

    fn apply(&self, input: &[f64], out: &mut Vec<f64>) {
        out.clear();
        for r in 0..self.rows {
            let row = &self.weights[r * self.cols..(r + 1) * self.cols];
            let z: f64 = row.iter().zip(input).map(|(w, x)| w * x).sum();
            out.push(z + self.bias[r]);
        }
    }
}

/// Network parameters; shapes are fixed by [`LAYER_DIMS`].
#[derive(Debug, Clone, PartialEq)]
pub struct MlpParams {
    pub layers: [Layer; 3],
}

impl MlpParams {
    pub fn zeros() -> Self {
        Self {
            layers: [
                Layer::zeros(LAYER_DIMS[1], LAYER_DIMS[0]),
                Layer::zeros(LAYER_DIMS[2], LAYER_DIMS[1]),
                Layer::zeros(LAYER_DIMS[3], LAYER_DIMS[2]),
            ],
        }
    }

    /// Uniform He-style init: `U(-√(6/fan_in), √(6/fan_in))`, zero biases.
    pub fn he_uniform(rng: &mut impl rand::Rng) -> Self {
        let mut params = Self::zeros();
        for layer in params.layers.iter_mut() {
            let bound = (6.0 / layer.cols as f64).sqrt();
            for w in layer.weights.iter_mut() {
                *w = rng.random_range(-bound..bound);
            }
        }
        params
    }

    pub fn is_finite(&self) -> bool {
        self.values().all(f64::is_finite)
    }

    /// Every weight and bias, layer by layer (weights before biases).
    pub fn values(&self) -> impl Iterator<Item = f64> + '_ {
        self.layers
            .iter()
            .flat_map(|l| l.weights.iter().chain(l.bias.iter()).copied())
    }

    pub fn values_mut(&mut self) -> impl Iterator<Item = &mut f64> + '_ {
        self.layers
            .iter_mut()
            .flat_map(|l| l.weights.iter_mut().chain(l.bias.iter_mut()))
    }

    pub fn parameter_count(&self) -> usize {
        self.layers.iter().map(|l| l.weights.len() + l.bias.len()).sum()
    }

    /// Rounds every value to the nearest `f32`, the precision models are stored at.
    pub fn round_to_f32(&mut self) {
        for v in self.values_mut() {
            *v = *v as f32 as f64;
        }
    }

    /// Pre-softmax scores.
    pub fn logits(&self, x: &ScaledFeatures) -> [f64; 3] {
        let mut h1 = Vec::with_capacity(LAYER_DIMS[1]);
        let mut h2 = Vec::with_capacity(LAYER_DIMS[2]);
        let mut out = Vec::with_capacity(LAYER_DIMS[3]);
        self.layers[0].apply(&x.0, &mut h1);
        relu_in_place(&mut h1);
        self.layers[1].apply(&h1, &mut h2);
        relu_in_place(&mut h2);
        self.layers[2].apply(&h2, &mut out);
        [out[0], out[1], out[2]]
    }
}

fn relu_in_place(v: &mut [f64]) {
    for x in v.iter_mut() {
        *x = x.max(0.0);
    }
}

/// Numerically stable softmax.
pub fn softmax(logits: &[f64; 3]) -> [f64; 3] {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps = logits.map(|z| (z - max).exp());
    let sum: f64 = exps.iter().sum();
    exps.map(|e| e / sum)
}

/// Class probabilities (dropout is never applied here).
pub fn forward(params: &MlpParams, x: &ScaledFeatures) -> [f64; 3] {
    softmax(&params.logits(x))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Classification {
    pub class: MovementClass,
    pub branch: Branch,
    pub probabilities: [f64; 3],
}

pub fn classify(params: &MlpParams, scaler: &Scaler, features: &MotionFeatures) -> Classification {
    let probabilities = forward(params, &scaler.transform(features));
    let class = MovementClass::from_scores(&probabilities);
    Classification {
        class,
        branch: class.branch(),
        probabilities,
    }
}

/// A loaded model bundle, shareable across workers.
#[derive(Debug, Clone, PartialEq)]
pub struct MotionModel {
    pub params: MlpParams,
    pub scaler: Scaler,
}

impl MotionModel {
    pub fn classify(&self, features: &MotionFeatures) -> Classification {
        classify(&self.params, &self.scaler, features)
    }

    /// Hand-wired model: low when `flow_mag < threshold`, high otherwise.
    ///
    /// Useful for scripted sessions where the branch must be predictable
    /// from the frames alone.
    pub fn flow_threshold(threshold: f64) -> Self {
        let mut params = MlpParams::zeros();
        params.layers[0].weights[1] = 1.0; // h1[0] = relu(flow_mag)
        params.layers[1].weights[0] = 1.0; // h2[0] = h1[0]
        params.layers[2].bias[0] = threshold; // low logit
        params.layers[2].weights[2 * LAYER_DIMS[2]] = 1.0; // high logit = flow_mag
        Self {
            params,
            scaler: Scaler::identity(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;

    #[test]
    fn scaler_fit_examples() {
        let s = Scaler::fit(&[[0.0, 0.0], [2.0, 2.0]]).unwrap();
        assert_eq!(s.mean, [1.0, 1.0]);
        assert_eq!(s.std, [1.0, 1.0]);
        let s = Scaler::fit(&[[1.0, 10.0], [3.0, 30.0], [5.0, 50.0]]).unwrap();
        assert_eq!(s.mean, [3.0, 30.0]);
        assert_eq!(
            Scaler::fit(&[[4.0, 1.0], [4.0, 2.0]]),
            Err(ScalerError::DegenerateVariance { feature: "frame_diff" })
        );
        assert_eq!(Scaler::fit(&[[4.0, 1.0]]), Err(ScalerError::TooFewRows(1)));
    }

    #[test]
    fn scaler_transform_examples() {
        let s = Scaler {
            mean: [1.0, 1.0],
            std: [2.0, 2.0],
        };
        assert_eq!(s.transform_raw([5.0, -3.0]), ScaledFeatures([2.0, -2.0]));
        assert_eq!(s.transform_raw(s.mean), ScaledFeatures([0.0, 0.0]));
        assert_eq!(s.transform_raw([3.0, 3.0]), ScaledFeatures([1.0, 1.0]));
    }

    #[test]
    fn zero_params_give_uniform() {
        let p = forward(&MlpParams::zeros(), &ScaledFeatures([3.0, -7.0]));
        for v in p {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn bias_only_logits() {
        let mut params = MlpParams::zeros();
        params.layers[2].bias = vec![std::f64::consts::LN_2, 0.0, 0.0];
        let p = forward(&params, &ScaledFeatures([1.0, 1.0]));
        assert!((p[0] - 0.5).abs() < 1e-12);
        assert!((p[1] - 0.25).abs() < 1e-12);
        assert!((p[2] - 0.25).abs() < 1e-12);
    }

    #[test]
    fn argmax_and_branch() {
        let cases = [
            ([0.8, 0.1, 0.1], MovementClass::Low, Branch::Low),
            ([0.1, 0.8, 0.1], MovementClass::Medium, Branch::High),
            ([0.4, 0.4, 0.2], MovementClass::Medium, Branch::High),
            ([0.3, 0.35, 0.35], MovementClass::High, Branch::High),
        ];
        for (p, class, branch) in cases {
            let c = MovementClass::from_scores(&p);
            assert_eq!(c, class, "{p:?}");
            assert_eq!(c.branch(), branch);
        }
    }

    #[test]
    fn flow_threshold_model_routes_by_flow() {
        let m = MotionModel::flow_threshold(1.0);
        let still = m.classify(&MotionFeatures { frame_diff: 0.8, flow_mag: 0.05 });
        assert_eq!(still.branch, Branch::Low);
        let moving = m.classify(&MotionFeatures { frame_diff: 20.0, flow_mag: 3.0 });
        assert_eq!(moving.class, MovementClass::High);
    }

    proptest! {
        #[test]
        fn probabilities_are_a_distribution(seed in any::<u64>(), x0 in -6.0f64..6.0, x1 in -6.0f64..6.0) {
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let params = MlpParams::he_uniform(&mut rng);
            let p = forward(&params, &ScaledFeatures([x0, x1]));
            prop_assert!((p.iter().sum::<f64>() - 1.0).abs() <= 1e-9);
            prop_assert!(p.iter().all(|&v| v > 0.0 && v <= 1.0));
        }

        #[test]
        fn argmax_survives_monotone_maps(l in prop::array::uniform3(-20.0f64..20.0), a in 0.1f64..5.0, b in -10.0f64..10.0) {
            let base = MovementClass::from_scores(&l);
            prop_assert_eq!(base, MovementClass::from_scores(&l.map(|z| a * z + b)));
            prop_assert_eq!(base, MovementClass::from_scores(&l.map(|z| z.exp())));
            prop_assert_eq!(base, MovementClass::from_scores(&softmax(&l)));
        }
    }
}
