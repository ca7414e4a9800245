//! The two motion features fed to the classifier: mean absolute frame
//! difference and mean dense-flow magnitude.

mod flow;

pub use flow::{compute_flow, FlowError, FlowField, FlowParams};

use serde::{Deserialize, Serialize};

use crate::frame::{FrameBatch, FrameError, GrayFrame};

/// Raw classifier input `[frame_diff, flow_mag]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MotionFeatures {
    /// Mean absolute intensity change, in [0, 255].
    pub frame_diff: f64,
    /// Mean flow vector length, pixels per frame.
    pub flow_mag: f64,
}

impl MotionFeatures {
    pub fn as_array(&self) -> [f64; 2] {
        [self.frame_diff, self.flow_mag]
    }
}

/// `(1/WH) Σ |b(x,y) − a(x,y)|`.
pub fn frame_difference(a: &GrayFrame, b: &GrayFrame) -> Result<f64, FrameError> {
    a.same_size(b)?;
    let total: u64 = a
        .pixels()
        .iter()
        .zip(b.pixels())
        .map(|(&p, &q)| p.abs_diff(q) as u64)
        .sum();
    Ok(total as f64 / a.pixels().len() as f64)
}

/// `(1/WH) Σ sqrt(u² + v²)`.
pub fn mean_flow_magnitude(flow: &FlowField) -> f64 {
    let n = flow.u().len();
    if n == 0 {
        return 0.0;
    }
    let total: f64 = flow
        .u()
        .iter()
        .zip(flow.v())
        .map(|(&u, &v)| (u as f64).hypot(v as f64))
        .sum();
    total / n as f64
}

pub fn extract_features(batch: &FrameBatch, params: &FlowParams) -> Result<MotionFeatures, FlowError> {
    let (a, b) = (batch.first(), batch.second());
    a.check_feature_size()?;
    let frame_diff = frame_difference(a, b)?;
    let flow = compute_flow(a, b, params)?;
    Ok(MotionFeatures {
        frame_diff,
        flow_mag: mean_flow_magnitude(&flow),
    })
}
