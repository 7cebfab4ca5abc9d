//! Central finite-difference verification of every differentiable op and of
//! the composed training losses.
//!
//! Each check builds a scalar loss from seeded random inputs, computes
//! analytic gradients with one backward pass, then compares against
//! (f(x+h) - f(x-h)) / 2h on sampled coordinates at 64-bit precision. The
//! acceptance bar is relative error below 1e-4 with denominator
//! max(1, |finite difference|), at least 100 coordinates per op.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::boxes::boxes_to_mask;
use crate::data::{generate_scene, SceneConfig};
use crate::dist::{make_factorial, OneHotMask, PixelLogits};
use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::models::{
    ancillary_forward, bind_params, init_ancillary, init_primary, init_selfcorr, primary_forward, ArchConfig,
};
use crate::params::ParamSet;
use crate::selfcorrect::{loss_fully_supervised, loss_weak, qconv_loss_on_detached, target_distribution, Strategy};
use crate::tensor::Tensor;

pub const FD_STEP: f64 = 1e-5;
pub const TOLERANCE: f64 = 1e-4;
pub const MIN_COORDS: usize = 100;

#[derive(Debug, Clone)]
pub struct CheckResult {
    pub name: String,
    pub coords_checked: usize,
    pub max_rel_err: f64,
}

impl CheckResult {
    pub fn passed(&self) -> bool {
        self.max_rel_err < TOLERANCE && self.coords_checked >= MIN_COORDS
    }
}

/// Relative error with the max(1, |fd|) denominator.
fn rel_err(analytic: f64, fd: f64) -> f64 {
    (analytic - fd).abs() / fd.abs().max(1.0)
}

/// Compare analytic gradients against central differences on `n_coords`
/// coordinates sampled across all inputs.
fn check_gradients(
    name: &str,
    inputs: &[Tensor],
    build: &dyn Fn(&mut Graph, &[NodeId]) -> Result<NodeId>,
    rng: &mut ChaCha8Rng,
    n_coords: usize,
) -> Result<CheckResult> {
    let forward = |tensors: &[Tensor]| -> Result<f64> {
        let mut g = Graph::new();
        let ids: Vec<NodeId> = tensors.iter().map(|t| g.leaf(t.clone(), false)).collect();
        let loss = build(&mut g, &ids)?;
        Ok(g.value(loss).item())
    };

    let mut g = Graph::new();
    let ids: Vec<NodeId> = inputs.iter().map(|t| g.leaf(t.clone(), true)).collect();
    let loss = build(&mut g, &ids)?;
    g.backward(loss)?;
    let grads: Vec<Tensor> = ids
        .iter()
        .map(|&id| g.grad(id).cloned().unwrap_or_else(|| Tensor::zeros(g.value(id).dims())))
        .collect();

    let mut max_err: f64 = 0.0;
    let mut work: Vec<Tensor> = inputs.to_vec();
    for _ in 0..n_coords {
        let which = rng.gen_range(0..inputs.len());
        let coord = rng.gen_range(0..inputs[which].numel());
        let orig = work[which].data()[coord];
        work[which].data_mut()[coord] = orig + FD_STEP;
        let plus = forward(&work)?;
        work[which].data_mut()[coord] = orig - FD_STEP;
        let minus = forward(&work)?;
        work[which].data_mut()[coord] = orig;
        let fd = (plus - minus) / (2.0 * FD_STEP);
        max_err = max_err.max(rel_err(grads[which].data()[coord], fd));
    }
    Ok(CheckResult {
        name: name.to_string(),
        coords_checked: n_coords,
        max_rel_err: max_err,
    })
}

fn rand_tensor(rng: &mut ChaCha8Rng, dims: &[usize], lo: f64, hi: f64) -> Tensor {
    let data = (0..dims.iter().product::<usize>())
        .map(|_| rng.gen_range(lo..hi))
        .collect();
    Tensor::new(dims.to_vec(), data).unwrap()
}

/// Random tensor kept away from the relu kink.
fn rand_tensor_off_zero(rng: &mut ChaCha8Rng, dims: &[usize]) -> Tensor {
    let mut t = rand_tensor(rng, dims, -1.0, 1.0);
    for v in t.data_mut() {
        if v.abs() < 0.05 {
            *v += if *v >= 0.0 { 0.05 } else { -0.05 };
        }
    }
    t
}

/// Random weights mixed into a loss so gradients are non-uniform.
fn weighted_sum(g: &mut Graph, x: NodeId, weights: &Tensor) -> Result<NodeId> {
    let w = g.leaf(weights.clone(), false);
    let prod = g.mul(x, w)?;
    Ok(g.sum(prod))
}

fn tiny_arch() -> ArchConfig {
    ArchConfig {
        num_classes: 2,
        height: 16,
        width: 16,
        encoder_widths: vec![4, 6, 8],
        decoder_width: 8,
        tap_coarse: 3,
        tap_fine: 1,
        head_hidden: 12,
    }
}

fn scene_sample(seed: u64) -> crate::data::Sample {
    let cfg = SceneConfig {
        height: 16,
        width: 16,
        num_classes: 2,
        shapes_min: 1,
        shapes_max: 2,
        num_images: 1,
        ..SceneConfig::default()
    };
    generate_scene(&cfg, seed).expect("scene")
}

/// Gradient checks over a model's parameter set: all params become one
/// flattened input list so coordinates are sampled across the whole model.
fn check_params(
    name: &str,
    params: &ParamSet,
    build: &dyn Fn(&mut Graph, &[NodeId]) -> Result<NodeId>,
    rng: &mut ChaCha8Rng,
    n_coords: usize,
) -> Result<CheckResult> {
    let tensors: Vec<Tensor> = params.iter().map(|(_, t)| t.clone()).collect();
    check_gradients(name, &tensors, build, rng, n_coords)
}

/// Every registered check, in execution order.
pub fn check_names() -> Vec<&'static str> {
    vec![
        "conv2d",
        "conv2d_strided",
        "relu",
        "sigmoid",
        "softmax",
        "elementwise_mul",
        "elementwise_mul_broadcast",
        "add",
        "scale",
        "resize_nearest_up",
        "resize_nearest_down",
        "concat_channels",
        "sum",
        "mean",
        "soft_cross_entropy",
        "fused_logits_softmax",
        "loss_eq1_ancillary",
        "loss_eq2_supervised_term",
        "loss_eq2_weak_term",
        "loss_eq5_weak_term",
        "loss_eq6_all_terms",
    ]
}

/// Run one registered check by name.
pub fn run_check(name: &str, seed: u64) -> Result<CheckResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9dc5);
    let n = MIN_COORDS;
    match name {
        "conv2d" => {
            let x = rand_tensor(&mut rng, &[2, 6, 7], -1.0, 1.0);
            let k = rand_tensor(&mut rng, &[3, 2, 3, 3], -0.7, 0.7);
            let b = rand_tensor(&mut rng, &[3], -0.5, 0.5);
            let w = rand_tensor(&mut rng, &[3, 6, 7], -1.0, 1.0);
            check_gradients(
                name,
                &[x, k, b],
                &move |g, ids| {
                    let y = g.conv2d(ids[0], ids[1], ids[2], 1, 1)?;
                    weighted_sum(g, y, &w)
                },
                &mut rng,
                n,
            )
        }
        "conv2d_strided" => {
            let x = rand_tensor(&mut rng, &[3, 8, 8], -1.0, 1.0);
            let k = rand_tensor(&mut rng, &[4, 3, 4, 4], -0.5, 0.5);
            let b = rand_tensor(&mut rng, &[4], -0.5, 0.5);
            let w = rand_tensor(&mut rng, &[4, 4, 4], -1.0, 1.0);
            check_gradients(
                name,
                &[x, k, b],
                &move |g, ids| {
                    let y = g.conv2d(ids[0], ids[1], ids[2], 2, 1)?;
                    weighted_sum(g, y, &w)
                },
                &mut rng,
                n,
            )
        }
        "relu" => {
            let x = rand_tensor_off_zero(&mut rng, &[4, 5, 6]);
            let w = rand_tensor(&mut rng, &[4, 5, 6], -1.0, 1.0);
            check_gradients(
                name,
                &[x],
                &move |g, ids| {
                    let y = g.relu(ids[0]);
                    weighted_sum(g, y, &w)
                },
                &mut rng,
                n,
            )
        }
        "sigmoid" => {
            let x = rand_tensor(&mut rng, &[4, 5, 6], -3.0, 3.0);
            let w = rand_tensor(&mut rng, &[4, 5, 6], -1.0, 1.0);
            check_gradients(
                name,
                &[x],
                &move |g, ids| {
                    let y = g.sigmoid(ids[0]);
                    weighted_sum(g, y, &w)
                },
                &mut rng,
                n,
            )
        }
        "softmax" => {
            let x = rand_tensor(&mut rng, &[5, 4, 4], -2.0, 2.0);
            let w = rand_tensor(&mut rng, &[5, 4, 4], -1.0, 1.0);
            check_gradients(
                name,
                &[x],
                &move |g, ids| {
                    let y = g.softmax(ids[0], 0)?;
                    weighted_sum(g, y, &w)
                },
                &mut rng,
                n,
            )
        }
        "elementwise_mul" => {
            let a = rand_tensor(&mut rng, &[3, 5, 4], -1.0, 1.0);
            let b = rand_tensor(&mut rng, &[3, 5, 4], -1.0, 1.0);
            check_gradients(
                name,
                &[a, b],
                &|g, ids| {
                    let y = g.mul(ids[0], ids[1])?;
                    Ok(g.sum(y))
                },
                &mut rng,
                n,
            )
        }
        "elementwise_mul_broadcast" => {
            let a = rand_tensor(&mut rng, &[4, 3, 5], -1.0, 1.0);
            let b = rand_tensor(&mut rng, &[1, 3, 5], -1.0, 1.0);
            check_gradients(
                name,
                &[a, b],
                &|g, ids| {
                    let y = g.mul(ids[0], ids[1])?;
                    Ok(g.sum(y))
                },
                &mut rng,
                n,
            )
        }
        "add" => {
            let a = rand_tensor(&mut rng, &[6, 7], -1.0, 1.0);
            let b = rand_tensor(&mut rng, &[6, 7], -1.0, 1.0);
            let w = rand_tensor(&mut rng, &[6, 7], -1.0, 1.0);
            check_gradients(
                name,
                &[a, b],
                &move |g, ids| {
                    let y = g.add(ids[0], ids[1])?;
                    weighted_sum(g, y, &w)
                },
                &mut rng,
                n,
            )
        }
        "scale" => {
            let a = rand_tensor(&mut rng, &[9, 11], -1.0, 1.0);
            let w = rand_tensor(&mut rng, &[9, 11], -1.0, 1.0);
            check_gradients(
                name,
                &[a],
                &move |g, ids| {
                    let y = g.scale(ids[0], -2.75);
                    weighted_sum(g, y, &w)
                },
                &mut rng,
                n,
            )
        }
        "resize_nearest_up" => {
            let x = rand_tensor(&mut rng, &[2, 3, 4], -1.0, 1.0);
            let w = rand_tensor(&mut rng, &[2, 9, 8], -1.0, 1.0);
            check_gradients(
                name,
                &[x],
                &move |g, ids| {
                    let y = g.resize_nearest(ids[0], 9, 8)?;
                    weighted_sum(g, y, &w)
                },
                &mut rng,
                n,
            )
        }
        "resize_nearest_down" => {
            let x = rand_tensor(&mut rng, &[2, 8, 8], -1.0, 1.0);
            let w = rand_tensor(&mut rng, &[2, 3, 5], -1.0, 1.0);
            check_gradients(
                name,
                &[x],
                &move |g, ids| {
                    let y = g.resize_nearest(ids[0], 3, 5)?;
                    weighted_sum(g, y, &w)
                },
                &mut rng,
                n,
            )
        }
        "concat_channels" => {
            let a = rand_tensor(&mut rng, &[2, 4, 5], -1.0, 1.0);
            let b = rand_tensor(&mut rng, &[3, 4, 5], -1.0, 1.0);
            let w = rand_tensor(&mut rng, &[5, 4, 5], -1.0, 1.0);
            check_gradients(
                name,
                &[a, b],
                &move |g, ids| {
                    let y = g.concat_channels(ids[0], ids[1])?;
                    weighted_sum(g, y, &w)
                },
                &mut rng,
                n,
            )
        }
        "sum" => {
            let a = rand_tensor(&mut rng, &[13, 9], -1.0, 1.0);
            check_gradients(name, &[a], &|g, ids| Ok(g.sum(ids[0])), &mut rng, n)
        }
        "mean" => {
            let a = rand_tensor(&mut rng, &[13, 9], -1.0, 1.0);
            check_gradients(name, &[a], &|g, ids| Ok(g.mean(ids[0])), &mut rng, n)
        }
        "soft_cross_entropy" => {
            let q = make_factorial(&PixelLogits::new(rand_tensor(&mut rng, &[4, 5, 5], -2.0, 2.0)).unwrap());
            let l = rand_tensor(&mut rng, &[4, 5, 5], -2.0, 2.0);
            check_gradients(
                name,
                &[l],
                &move |g, ids| {
                    let qn = g.leaf(q.probs.clone(), false);
                    g.soft_cross_entropy(qn, ids[0], 0)
                },
                &mut rng,
                n,
            )
        }
        "fused_logits_softmax" => {
            // The linear fusion applied in-graph: softmax((l + a*l_anc)/(a+1)).
            let alpha = 2.5;
            let l = rand_tensor(&mut rng, &[3, 4, 4], -2.0, 2.0);
            let anc = rand_tensor(&mut rng, &[3, 4, 4], -2.0, 2.0);
            let w = rand_tensor(&mut rng, &[3, 4, 4], -1.0, 1.0);
            check_gradients(
                name,
                &[l, anc],
                &move |g, ids| {
                    let scaled = g.scale(ids[1], alpha);
                    let sum = g.add(ids[0], scaled)?;
                    let fused = g.scale(sum, 1.0 / (alpha + 1.0));
                    let q = g.softmax(fused, 0)?;
                    weighted_sum(g, q, &w)
                },
                &mut rng,
                n,
            )
        }
        "loss_eq1_ancillary" => {
            let arch = tiny_arch();
            let sample = scene_sample(11);
            let theta = init_ancillary(&arch, seed ^ 1)?;
            let y = OneHotMask::from_class_map(sample.mask.as_ref().unwrap(), arch.num_classes)?;
            let bm = boxes_to_mask(&sample.boxes, arch.num_classes, arch.height, arch.width)?;
            let names: Vec<String> = theta.names().cloned().collect();
            let image = sample.image.clone();
            check_params(
                name,
                &theta,
                &move |g, ids| {
                    let nodes = crate::models::bind_param_ids(&names, ids);
                    let img = g.leaf(image.clone(), false);
                    let bmn = g.leaf(bm.mask.clone(), false);
                    let logits = ancillary_forward(g, &nodes, &tiny_arch(), img, bmn)?;
                    loss_fully_supervised(g, logits, &y)
                },
                &mut rng,
                n,
            )
        }
        "loss_eq2_supervised_term" => {
            let arch = tiny_arch();
            let sample = scene_sample(12);
            let phi = init_primary(&arch, seed ^ 2)?;
            let y = OneHotMask::from_class_map(sample.mask.as_ref().unwrap(), arch.num_classes)?;
            let names: Vec<String> = phi.names().cloned().collect();
            let image = sample.image.clone();
            check_params(
                name,
                &phi,
                &move |g, ids| {
                    let nodes = crate::models::bind_param_ids(&names, ids);
                    let img = g.leaf(image.clone(), false);
                    let logits = primary_forward(g, &nodes, &tiny_arch(), img)?;
                    loss_fully_supervised(g, logits, &y)
                },
                &mut rng,
                n,
            )
        }
        "loss_eq2_weak_term" => {
            let arch = tiny_arch();
            let sample = scene_sample(13);
            let phi = init_primary(&arch, seed ^ 3)?;
            let q = make_factorial(
                &PixelLogits::new(rand_tensor(&mut rng, &[arch.channels(), 16, 16], -2.0, 2.0)).unwrap(),
            );
            let names: Vec<String> = phi.names().cloned().collect();
            let image = sample.image.clone();
            check_params(
                name,
                &phi,
                &move |g, ids| {
                    let nodes = crate::models::bind_param_ids(&names, ids);
                    let img = g.leaf(image.clone(), false);
                    let logits = primary_forward(g, &nodes, &tiny_arch(), img)?;
                    loss_weak(g, logits, &q)
                },
                &mut rng,
                n,
            )
        }
        "loss_eq5_weak_term" => {
            // Weak term with a target produced by linear fusion of the
            // current primary logits (frozen) and ancillary logits.
            let arch = tiny_arch();
            let sample = scene_sample(14);
            let phi = init_primary(&arch, seed ^ 4)?;
            let anc = PixelLogits::new(rand_tensor(&mut rng, &[arch.channels(), 16, 16], -2.0, 2.0)).unwrap();
            let l0 = crate::models::eval_primary(&arch, &phi, &sample.image)?;
            let q = target_distribution(Strategy::LinearSelfCorrection, &l0, &anc, None, 2.0)?;
            let names: Vec<String> = phi.names().cloned().collect();
            let image = sample.image.clone();
            check_params(
                name,
                &phi,
                &move |g, ids| {
                    let nodes = crate::models::bind_param_ids(&names, ids);
                    let img = g.leaf(image.clone(), false);
                    let logits = primary_forward(g, &nodes, &tiny_arch(), img)?;
                    loss_weak(g, logits, &q)
                },
                &mut rng,
                n,
            )
        }
        "loss_eq6_all_terms" => {
            // Supervised + weak + head terms on one F and one W example;
            // gradients checked across both phi and lambda jointly.
            let arch = tiny_arch();
            let f_sample = scene_sample(15);
            let w_sample = scene_sample(16);
            let phi = init_primary(&arch, seed ^ 5)?;
            let lambda = init_selfcorr(&arch, seed ^ 6)?;
            let theta = init_ancillary(&arch, seed ^ 7)?;
            let y = OneHotMask::from_class_map(f_sample.mask.as_ref().unwrap(), arch.num_classes)?;
            let bm_f = boxes_to_mask(&f_sample.boxes, arch.num_classes, arch.height, arch.width)?;
            let bm_w = boxes_to_mask(&w_sample.boxes, arch.num_classes, arch.height, arch.width)?;
            let anc_f = crate::models::eval_ancillary(&arch, &theta, &f_sample.image, &bm_f)?;
            let anc_w = crate::models::eval_ancillary(&arch, &theta, &w_sample.image, &bm_w)?;
            let l0 = crate::models::eval_primary(&arch, &phi, &w_sample.image)?;
            let q = target_distribution(Strategy::ConvSelfCorrection, &l0, &anc_w, Some(&lambda), 1.0)?;
            // The head consumes the primary logits of the current iterate as
            // constants; freeze them here so finite differences measure the
            // same objective the trainer optimizes.
            let lf0 = crate::models::eval_primary(&arch, &phi, &f_sample.image)?;

            let phi_names: Vec<String> = phi.names().cloned().collect();
            let lam_names: Vec<String> = lambda.names().cloned().collect();
            let mut tensors: Vec<Tensor> = phi.iter().map(|(_, t)| t.clone()).collect();
            tensors.extend(lambda.iter().map(|(_, t)| t.clone()));
            let n_phi = phi_names.len();
            let (f_img, w_img) = (f_sample.image.clone(), w_sample.image.clone());
            check_gradients(
                name,
                &tensors,
                &move |g, ids| {
                    let phi_nodes = crate::models::bind_param_ids(&phi_names, &ids[..n_phi]);
                    let lam_nodes = crate::models::bind_param_ids(&lam_names, &ids[n_phi..]);
                    // F example: supervised term plus head term on detached logits.
                    let img_f = g.leaf(f_img.clone(), false);
                    let lf = primary_forward(g, &phi_nodes, &tiny_arch(), img_f)?;
                    let sup = loss_fully_supervised(g, lf, &y)?;
                    let lf_const = g.leaf(lf0.scores.clone(), false);
                    let anc_const = g.leaf(anc_f.scores.clone(), false);
                    let ql = qconv_loss_on_detached(g, &lam_nodes, lf_const, anc_const, &y)?;
                    // W example: weak term against the frozen conv target.
                    let img_w = g.leaf(w_img.clone(), false);
                    let lw = primary_forward(g, &phi_nodes, &tiny_arch(), img_w)?;
                    let weak = loss_weak(g, lw, &q)?;
                    let a = g.add(sup, ql)?;
                    g.add(a, weak)
                },
                &mut rng,
                n,
            )
        }
        other => Err(Error::invalid("grad-check", format!("unknown check {other:?}"))),
    }
}

/// Run every registered check.
pub fn run_all(seed: u64) -> Result<Vec<CheckResult>> {
    check_names().into_iter().map(|name| run_check(name, seed)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_registered_check_passes() {
        for r in run_all(0).unwrap() {
            assert!(
                r.passed(),
                "{}: max rel err {} over {} coords",
                r.name,
                r.max_rel_err,
                r.coords_checked
            );
        }
    }

    #[test]
    fn unknown_check_is_an_error() {
        assert!(run_check("nope", 0).is_err());
    }
}
