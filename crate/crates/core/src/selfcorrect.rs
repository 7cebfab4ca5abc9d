//! Self-correction strategies, the alpha schedule, and the training losses.
//!
//! The target distribution for a weakly supervised example is, per strategy:
//! the ancillary prediction unchanged, the softmax of the alpha-weighted
//! logit average (linear self-correction), or the output of the trainable
//! conv head. Targets are constants with respect to the primary parameters;
//! no gradient ever flows back through them.

use serde::{Deserialize, Serialize};

use crate::dist::{make_factorial, LabelDistribution, OneHotMask, PixelLogits};
use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::models::{eval_selfcorr, selfcorr_head_forward};
use crate::params::ParamSet;

/// How the weak-set target distribution is produced.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    NoSelfCorrection,
    LinearSelfCorrection,
    ConvSelfCorrection,
}

impl std::str::FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(Strategy::NoSelfCorrection),
            "linear" => Ok(Strategy::LinearSelfCorrection),
            "conv" => Ok(Strategy::ConvSelfCorrection),
            other => Err(Error::invalid("Strategy", format!("unknown strategy {other:?}"))),
        }
    }
}

/// Geometric decay of the ancillary-trust weight over training.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AlphaSchedule {
    pub alpha_start: f64,
    pub alpha_end: f64,
    pub total_steps: usize,
}

impl Default for AlphaSchedule {
    fn default() -> Self {
        AlphaSchedule {
            alpha_start: 30.0,
            alpha_end: 0.5,
            total_steps: 1,
        }
    }
}

impl AlphaSchedule {
    pub fn new(alpha_start: f64, alpha_end: f64, total_steps: usize) -> Result<Self> {
        let s = AlphaSchedule { alpha_start, alpha_end, total_steps };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.alpha_start >= self.alpha_end && self.alpha_end > 0.0) {
            return Err(Error::invalid(
                "AlphaSchedule",
                format!("need start >= end > 0, got {} -> {}", self.alpha_start, self.alpha_end),
            ));
        }
        Ok(())
    }

    /// alpha_start * (alpha_end/alpha_start)^(step/total_steps), with steps
    /// outside [0, total_steps] clamped to the endpoints.
    pub fn alpha_at(&self, step: usize) -> f64 {
        if self.total_steps == 0 || step >= self.total_steps {
            return self.alpha_end;
        }
        let t = step as f64 / self.total_steps as f64;
        self.alpha_start * (self.alpha_end / self.alpha_start).powf(t)
    }
}

/// The constant target distribution for one weak example.
///
/// `lambda` is required by the conv strategy only. The result is a plain
/// value; callers feed it to [`loss_weak`] as a non-differentiable input.
pub fn target_distribution(
    strategy: Strategy,
    l: &PixelLogits,
    l_anc: &PixelLogits,
    lambda: Option<&ParamSet>,
    alpha: f64,
) -> Result<LabelDistribution> {
    match strategy {
        Strategy::NoSelfCorrection => Ok(make_factorial(l_anc)),
        Strategy::LinearSelfCorrection => {
            let fused = crate::dist::fuse_linear(l, l_anc, alpha)?;
            Ok(make_factorial(&fused))
        }
        Strategy::ConvSelfCorrection => {
            let lambda = lambda.ok_or(Error::MissingSelfCorrHead)?;
            let out = eval_selfcorr(lambda, l, l_anc)?;
            Ok(make_factorial(&out))
        }
    }
}

/// Clamp the target to background outside every box: pixels whose background
/// channel of `boxmask` is 1 become a background one-hot. Off by default;
/// exposed for ablation only.
pub fn clamp_outside_boxes(q: &mut LabelDistribution, boxmask: &crate::boxes::BoxMaskTensor) {
    let dims = q.probs.dims().to_vec();
    let (ch, plane) = (dims[0], dims[1] * dims[2]);
    let bg = boxmask.mask.data().to_vec();
    let data = q.probs.data_mut();
    for p in 0..plane {
        if bg[p] == 1.0 {
            data[p] = 1.0;
            for c in 1..ch {
                data[c * plane + p] = 0.0;
            }
        }
    }
}

fn pixels_of(g: &Graph, l: NodeId) -> f64 {
    let d = g.value(l).dims();
    (d[1] * d[2]) as f64
}

/// Negative log-likelihood of the one-hot mask under the logits, averaged per
/// pixel. Gradient flows to whatever produced the logits.
pub fn loss_fully_supervised(g: &mut Graph, l: NodeId, y: &OneHotMask) -> Result<NodeId> {
    let m = pixels_of(g, l);
    let q = g.leaf(y.labels.clone(), false);
    let ce = g.soft_cross_entropy(q, l, 0)?;
    Ok(g.scale(ce, 1.0 / m))
}

/// Soft cross-entropy against a constant target distribution, averaged per
/// pixel. The target enters the graph as a constant leaf, so the
/// stop-gradient contract is structural.
pub fn loss_weak(g: &mut Graph, l: NodeId, q: &LabelDistribution) -> Result<NodeId> {
    let m = pixels_of(g, l);
    let qn = g.leaf(q.probs.clone(), false);
    let ce = g.soft_cross_entropy(qn, l, 0)?;
    Ok(g.scale(ce, 1.0 / m))
}

/// Third objective term: negative log-likelihood of the ground truth under
/// the head output. Callers pass detached logits into the head so the
/// gradient reaches the head parameters only.
pub fn loss_qconv(g: &mut Graph, head_out: NodeId, y: &OneHotMask) -> Result<NodeId> {
    loss_fully_supervised(g, head_out, y)
}

/// Convenience: build the head on detached inputs and return its qconv loss.
pub fn qconv_loss_on_detached(
    g: &mut Graph,
    lambda_nodes: &crate::models::ParamNodes,
    l_const: NodeId,
    l_anc_const: NodeId,
    y: &OneHotMask,
) -> Result<NodeId> {
    let out = selfcorr_head_forward(g, lambda_nodes, l_const, l_anc_const)?;
    loss_qconv(g, out, y)
}

/// Mean per-pixel NLL of ground truth under the head output, as a plain
/// number (used for held-out protocol evaluation).
pub fn qconv_nll(lambda: &ParamSet, l: &PixelLogits, l_anc: &PixelLogits, y: &OneHotMask) -> Result<f64> {
    let out = eval_selfcorr(lambda, l, l_anc)?;
    let m = y.labels.dims()[1] * y.labels.dims()[2];
    Ok(-crate::dist::log_prob(&out, y)? / m as f64)
}
