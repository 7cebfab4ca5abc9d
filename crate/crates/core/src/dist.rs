//! Factorial categorical distributions over per-pixel labels.
//!
//! A label map is modeled as independent per-pixel categoricals over C+1
//! classes, carried as logits wherever possible and materialized as
//! probabilities only at interfaces. The fused target distribution used for
//! weakly supervised training minimizes
//!
//! ```text
//! KL(q || p) + alpha * KL(q || p_anc)
//! ```
//!
//! whose unique minimizer is the alpha-weighted geometric mean of the two
//! distributions — exactly the softmax of `(l + alpha * l_anc) / (alpha + 1)`
//! in logit space.

use crate::error::{Error, Result};
use crate::ops;
use crate::tensor::Tensor;

/// Pre-softmax per-pixel scores of dims (C+1) x H x W.
#[derive(Debug, Clone, PartialEq)]
pub struct PixelLogits {
    pub scores: Tensor,
}

impl PixelLogits {
    pub fn new(scores: Tensor) -> Result<Self> {
        if scores.rank() != 3 {
            return Err(Error::shape("PixelLogits", "rank", 3, scores.rank()));
        }
        if !scores.all_finite() {
            return Err(Error::invalid("PixelLogits", "non-finite entry"));
        }
        Ok(PixelLogits { scores })
    }

    pub fn num_classes(&self) -> usize {
        self.scores.dims()[0] - 1
    }

    /// Pixel count M = H * W.
    pub fn num_pixels(&self) -> usize {
        self.scores.dims()[1] * self.scores.dims()[2]
    }

    /// Per-pixel argmax as an H x W class-index map.
    pub fn argmax_map(&self) -> Tensor {
        let dims = self.scores.dims();
        let (ch, plane) = (dims[0], dims[1] * dims[2]);
        let mut out = vec![0.0; plane];
        let data = self.scores.data();
        for p in 0..plane {
            let mut best = 0usize;
            let mut best_v = data[p];
            for c in 1..ch {
                let v = data[c * plane + p];
                if v > best_v {
                    best_v = v;
                    best = c;
                }
            }
            out[p] = best as f64;
        }
        Tensor::new(vec![dims[1], dims[2]], out).unwrap()
    }
}

/// Per-pixel categorical probabilities of dims (C+1) x H x W; each pixel's
/// channel vector sums to 1. The joint over a whole mask is the product of
/// per-pixel factors.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelDistribution {
    pub probs: Tensor,
}

impl LabelDistribution {
    pub fn new(probs: Tensor) -> Result<Self> {
        if probs.rank() != 3 {
            return Err(Error::shape("LabelDistribution", "rank", 3, probs.rank()));
        }
        Ok(LabelDistribution { probs })
    }

    /// Check the per-pixel simplex invariants to `tol`.
    pub fn validate(&self, tol: f64) -> Result<()> {
        let dims = self.probs.dims();
        let (ch, plane) = (dims[0], dims[1] * dims[2]);
        let data = self.probs.data();
        for p in 0..plane {
            let mut sum = 0.0;
            for c in 0..ch {
                let v = data[c * plane + p];
                if !(-tol..=1.0 + tol).contains(&v) {
                    return Err(Error::invalid("LabelDistribution", format!("entry {v} outside [0,1]")));
                }
                sum += v;
            }
            if (sum - 1.0).abs() > tol {
                return Err(Error::invalid(
                    "LabelDistribution",
                    format!("pixel {p} channel sum {sum} != 1"),
                ));
            }
        }
        Ok(())
    }
}

/// One-hot labels of dims (C+1) x H x W, exactly one 1 per pixel.
#[derive(Debug, Clone, PartialEq)]
pub struct OneHotMask {
    pub labels: Tensor,
}

impl OneHotMask {
    /// Expand an H x W class-index map into one-hot channels.
    pub fn from_class_map(map: &Tensor, num_classes: usize) -> Result<Self> {
        if map.rank() != 2 {
            return Err(Error::shape("OneHotMask", "rank", 2, map.rank()));
        }
        let (h, w) = (map.dims()[0], map.dims()[1]);
        let plane = h * w;
        let mut labels = Tensor::zeros(&[num_classes + 1, h, w]);
        let data = labels.data_mut();
        for p in 0..plane {
            let cls = map.data()[p];
            if cls < 0.0 || cls.fract() != 0.0 || cls as usize > num_classes {
                return Err(Error::invalid(
                    "OneHotMask",
                    format!("class index {cls} outside 0..={num_classes}"),
                ));
            }
            data[(cls as usize) * plane + p] = 1.0;
        }
        Ok(OneHotMask { labels })
    }

    /// View the one-hot labels as a degenerate distribution.
    pub fn as_distribution(&self) -> LabelDistribution {
        LabelDistribution { probs: self.labels.clone() }
    }

    pub fn class_map(&self) -> Tensor {
        PixelLogits { scores: self.labels.clone() }.argmax_map()
    }
}

/// Per-pixel softmax of the logits.
pub fn make_factorial(l: &PixelLogits) -> LabelDistribution {
    LabelDistribution {
        probs: ops::softmax(&l.scores, 0).expect("rank checked by PixelLogits"),
    }
}

/// Sum over pixels and channels of q*log(q/p), with 0*log0 = 0. A zero in `p`
/// where `q` is positive yields +infinity (softmax outputs never hit exact
/// zero on the training path, so this guards test inputs only).
pub fn kl_divergence(q: &LabelDistribution, p: &LabelDistribution) -> Result<f64> {
    if q.probs.dims() != p.probs.dims() {
        return Err(Error::shape(
            "kl_divergence",
            "dims",
            format!("{:?}", q.probs.dims()),
            format!("{:?}", p.probs.dims()),
        ));
    }
    let mut total = 0.0;
    for (&qa, &pa) in q.probs.data().iter().zip(p.probs.data()) {
        if qa > 0.0 {
            if pa == 0.0 {
                return Ok(f64::INFINITY);
            }
            total += qa * (qa / pa).ln();
        }
    }
    Ok(total)
}

/// Per-pixel logits of the fused target: (l + alpha * l_anc) / (alpha + 1).
/// Softmax of the result minimizes KL(q||p) + alpha*KL(q||p_anc).
pub fn fuse_linear(l: &PixelLogits, l_anc: &PixelLogits, alpha: f64) -> Result<PixelLogits> {
    if !(alpha >= 0.0) {
        return Err(Error::invalid("fuse_linear", format!("alpha must be >= 0, got {alpha}")));
    }
    if l.scores.dims() != l_anc.scores.dims() {
        return Err(Error::shape(
            "fuse_linear",
            "dims",
            format!("{:?}", l.scores.dims()),
            format!("{:?}", l_anc.scores.dims()),
        ));
    }
    let inv = 1.0 / (alpha + 1.0);
    let data = l
        .scores
        .data()
        .iter()
        .zip(l_anc.scores.data())
        .map(|(&a, &b)| (a + alpha * b) * inv)
        .collect();
    Ok(PixelLogits {
        scores: Tensor::new(l.scores.dims().to_vec(), data)?,
    })
}

/// The objective minimized by linear fusion: KL(q||p) + alpha*KL(q||p_anc).
pub fn fusion_objective(
    q: &LabelDistribution,
    p: &LabelDistribution,
    p_anc: &LabelDistribution,
    alpha: f64,
) -> Result<f64> {
    Ok(kl_divergence(q, p)? + alpha * kl_divergence(q, p_anc)?)
}

/// -sum(q * log softmax(l)) over pixels and channels. The gradient of the
/// graph-op counterpart flows into `l` only; `q` is always a constant target.
pub fn soft_cross_entropy(q: &LabelDistribution, l: &PixelLogits) -> Result<f64> {
    ops::soft_cross_entropy(&q.probs, &l.scores, 0)
}

/// Log-probability of a one-hot mask under the factorial distribution of `l`:
/// sum over pixels of log softmax(l) at the labeled class.
pub fn log_prob(l: &PixelLogits, y: &OneHotMask) -> Result<f64> {
    Ok(-ops::soft_cross_entropy(&y.labels, &l.scores, 0)?)
}

/// Shannon entropy of the factorial distribution, summed over pixels.
pub fn entropy(q: &LabelDistribution) -> f64 {
    q.probs
        .data()
        .iter()
        .map(|&v| if v > 0.0 { -v * v.ln() } else { 0.0 })
        .sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn logits1(vals: &[f64]) -> PixelLogits {
        PixelLogits::new(Tensor::new(vec![vals.len(), 1, 1], vals.to_vec()).unwrap()).unwrap()
    }

    fn dist1(vals: &[f64]) -> LabelDistribution {
        LabelDistribution::new(Tensor::new(vec![vals.len(), 1, 1], vals.to_vec()).unwrap()).unwrap()
    }

    /// All points of the 2-simplex over 3 channels at the given resolution.
    fn simplex_grid(steps: usize) -> Vec<[f64; 3]> {
        let mut pts = Vec::new();
        for i in 0..=steps {
            for j in 0..=(steps - i) {
                let k = steps - i - j;
                pts.push([
                    i as f64 / steps as f64,
                    j as f64 / steps as f64,
                    k as f64 / steps as f64,
                ]);
            }
        }
        pts
    }

    #[test]
    fn make_factorial_examples() {
        let d = make_factorial(&logits1(&[0.0, 0.0]));
        assert_eq!(d.probs.data(), &[0.5, 0.5]);
        let d = make_factorial(&logits1(&[0.0, 1.0]));
        assert!((d.probs.data()[0] - 0.26894).abs() < 1e-5);
        assert!((d.probs.data()[1] - 0.73106).abs() < 1e-5);
        // Shift invariance.
        let a = make_factorial(&logits1(&[0.3, -1.2, 2.0]));
        let b = make_factorial(&logits1(&[0.3 + 5.0, -1.2 + 5.0, 2.0 + 5.0]));
        for (x, y) in a.probs.data().iter().zip(b.probs.data()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn kl_identities() {
        let p = dist1(&[0.3, 0.7]);
        assert_eq!(kl_divergence(&p, &p).unwrap(), 0.0);
        let q = dist1(&[1.0, 0.0]);
        let u = dist1(&[0.5, 0.5]);
        assert!((kl_divergence(&q, &u).unwrap() - std::f64::consts::LN_2).abs() < 1e-12);
        // Zero in p where q > 0.
        assert_eq!(kl_divergence(&u, &q).unwrap(), f64::INFINITY);
    }

    #[test]
    fn kl_factorizes_over_pixels() {
        let q2 = LabelDistribution::new(Tensor::new(vec![2, 1, 2], vec![0.9, 0.2, 0.1, 0.8]).unwrap()).unwrap();
        let p2 = LabelDistribution::new(Tensor::new(vec![2, 1, 2], vec![0.5, 0.6, 0.5, 0.4]).unwrap()).unwrap();
        let total = kl_divergence(&q2, &p2).unwrap();
        let a = kl_divergence(&dist1(&[0.9, 0.1]), &dist1(&[0.5, 0.5])).unwrap();
        let b = kl_divergence(&dist1(&[0.2, 0.8]), &dist1(&[0.6, 0.4])).unwrap();
        assert!((total - (a + b)).abs() < 1e-12);
    }

    #[test]
    fn fuse_alpha_zero_returns_primary_exactly() {
        let l = logits1(&[0.7, -0.2, 1.5]);
        let anc = logits1(&[2.0, 0.0, -1.0]);
        let fused = fuse_linear(&l, &anc, 0.0).unwrap();
        assert_eq!(fused.scores.data(), l.scores.data());
    }

    #[test]
    fn fuse_alpha_huge_matches_ancillary_distribution() {
        let l = logits1(&[0.0, 1.0]);
        let anc = logits1(&[1.0, 0.0]);
        let fused = fuse_linear(&l, &anc, 1e9).unwrap();
        let qf = make_factorial(&fused);
        let qa = make_factorial(&anc);
        let tv: f64 = qf
            .probs
            .data()
            .iter()
            .zip(qa.probs.data())
            .map(|(a, b)| (a - b).abs())
            .sum::<f64>()
            / 2.0;
        assert!(tv < 1e-4, "total variation {tv}");
    }

    #[test]
    fn fuse_alpha_one_symmetric_case_is_uniform_and_grid_optimal() {
        let l = logits1(&[0.0, 1.0]);
        let anc = logits1(&[1.0, 0.0]);
        let fused = fuse_linear(&l, &anc, 1.0).unwrap();
        assert_eq!(fused.scores.data(), &[0.5, 0.5]);
        let q = make_factorial(&fused);
        assert_eq!(q.probs.data(), &[0.5, 0.5]);

        // Grid search over the 1-simplex at 1e-3 confirms the minimizer.
        let p = make_factorial(&l);
        let panc = make_factorial(&anc);
        let best = fusion_objective(&q, &p, &panc, 1.0).unwrap();
        for i in 0..=1000 {
            let a = i as f64 / 1000.0;
            let cand = dist1(&[a, 1.0 - a]);
            let val = fusion_objective(&cand, &p, &panc, 1.0).unwrap();
            assert!(best <= val + 1e-9, "grid point {a} beats fused target");
        }
    }

    #[test]
    fn fuse_rejects_negative_alpha() {
        let l = logits1(&[0.0, 1.0]);
        assert!(fuse_linear(&l, &l, -0.5).is_err());
    }

    #[test]
    fn fusion_optimality_on_random_instances() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let grid = simplex_grid(100);
        for _ in 0..20 {
            let l = logits1(&[rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0)]);
            let anc = logits1(&[rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0)]);
            let p = make_factorial(&l);
            let panc = make_factorial(&anc);
            for &alpha in &[0.1, 1.0, 10.0] {
                let q = make_factorial(&fuse_linear(&l, &anc, alpha).unwrap());
                let best = fusion_objective(&q, &p, &panc, alpha).unwrap();
                for pt in &grid {
                    let cand = dist1(pt);
                    let val = fusion_objective(&cand, &p, &panc, alpha).unwrap();
                    assert!(best <= val + 1e-9);
                }
            }
        }
    }

    #[test]
    fn fusion_interpolates_between_models() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..50 {
            let l = logits1(&[rng.gen_range(-3.0..3.0), rng.gen_range(-3.0..3.0), rng.gen_range(-3.0..3.0)]);
            let anc = logits1(&[rng.gen_range(-3.0..3.0), rng.gen_range(-3.0..3.0), rng.gen_range(-3.0..3.0)]);
            let p = make_factorial(&l);
            let panc = make_factorial(&anc);
            let (a1, a2) = (0.4, 2.5);
            let q1 = make_factorial(&fuse_linear(&l, &anc, a1).unwrap());
            let q2 = make_factorial(&fuse_linear(&l, &anc, a2).unwrap());
            // Larger alpha drifts toward the ancillary, away from the primary.
            assert!(kl_divergence(&q1, &p).unwrap() <= kl_divergence(&q2, &p).unwrap() + 1e-12);
            assert!(kl_divergence(&q1, &panc).unwrap() + 1e-12 >= kl_divergence(&q2, &panc).unwrap());
        }
    }

    #[test]
    fn fusion_shift_invariance() {
        let l = logits1(&[0.3, -0.4, 1.1]);
        let anc = logits1(&[-0.9, 0.2, 0.5]);
        let base = make_factorial(&fuse_linear(&l, &anc, 2.0).unwrap());
        let l2 = logits1(&[0.3 + 7.0, -0.4 + 7.0, 1.1 + 7.0]);
        let anc2 = logits1(&[-0.9 - 3.0, 0.2 - 3.0, 0.5 - 3.0]);
        let shifted = make_factorial(&fuse_linear(&l2, &anc2, 2.0).unwrap());
        for (a, b) in base.probs.data().iter().zip(shifted.probs.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn soft_ce_reduces_to_hard_ce_for_onehot() {
        let map = Tensor::new(vec![1, 2], vec![1.0, 0.0]).unwrap();
        let y = OneHotMask::from_class_map(&map, 1).unwrap();
        let l = PixelLogits::new(Tensor::new(vec![2, 1, 2], vec![0.2, 1.4, -0.3, 0.8]).unwrap()).unwrap();
        let ce = soft_cross_entropy(&y.as_distribution(), &l).unwrap();
        assert!((ce + log_prob(&l, &y).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn soft_ce_uniform_example() {
        let q = dist1(&[0.5, 0.5]);
        let l = logits1(&[0.0, 0.0]);
        assert!((soft_cross_entropy(&q, &l).unwrap() - std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn soft_ce_minimized_when_softmax_matches_target() {
        // Gradient-descent oracle on a single pixel: descend on l and check
        // the fixed point has softmax(l) = q.
        let q = dist1(&[0.2, 0.5, 0.3]);
        let mut l = vec![0.0f64; 3];
        for _ in 0..5000 {
            let lt = logits1(&l);
            let p = make_factorial(&lt);
            for c in 0..3 {
                l[c] -= 0.5 * (p.probs.data()[c] - q.probs.data()[c]);
            }
        }
        let p = make_factorial(&logits1(&l));
        for (a, b) in p.probs.data().iter().zip(q.probs.data()) {
            assert!((a - b).abs() < 1e-6);
        }
        // Gibbs: CE >= entropy, equality at the fixed point.
        let ce = soft_cross_entropy(&q, &logits1(&l)).unwrap();
        assert!(ce >= entropy(&q) - 1e-8);
        assert!((ce - entropy(&q)).abs() < 1e-6);
    }

    #[test]
    fn gibbs_inequality_on_random_instances() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        for _ in 0..100 {
            let l = logits1(&[rng.gen_range(-3.0..3.0), rng.gen_range(-3.0..3.0), rng.gen_range(-3.0..3.0)]);
            let q = make_factorial(&logits1(&[
                rng.gen_range(-3.0..3.0),
                rng.gen_range(-3.0..3.0),
                rng.gen_range(-3.0..3.0),
            ]));
            let ce = soft_cross_entropy(&q, &l).unwrap();
            assert!(ce >= entropy(&q) - 1e-8);
        }
    }

    #[test]
    fn log_prob_examples() {
        // Strongly peaked on the true class: log-prob near 0.
        let map = Tensor::new(vec![1, 1], vec![1.0]).unwrap();
        let y = OneHotMask::from_class_map(&map, 1).unwrap();
        let l = logits1(&[0.0, 20.0]);
        assert!(log_prob(&l, &y).unwrap().abs() < 1e-6);

        // Uniform logits over 2 channels, M pixels: -M ln 2.
        let map = Tensor::new(vec![2, 3], vec![0.0; 6]).unwrap();
        let y = OneHotMask::from_class_map(&map, 1).unwrap();
        let l = PixelLogits::new(Tensor::zeros(&[2, 2, 3])).unwrap();
        assert!((log_prob(&l, &y).unwrap() + 6.0 * std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn onehot_has_exactly_one_per_pixel() {
        let map = Tensor::new(vec![2, 2], vec![0.0, 2.0, 1.0, 2.0]).unwrap();
        let y = OneHotMask::from_class_map(&map, 2).unwrap();
        let plane = 4;
        for p in 0..plane {
            let s: f64 = (0..3).map(|c| y.labels.data()[c * plane + p]).sum();
            assert_eq!(s, 1.0);
        }
        assert_eq!(y.class_map().data(), map.data());
        assert!(OneHotMask::from_class_map(&Tensor::new(vec![1, 1], vec![3.0]).unwrap(), 2).is_err());
    }
}
