//! Segmentation evaluation: dataset-level mean intersection-over-union.
//!
//! Counts are accumulated over the whole dataset (sum the intersections and
//! unions per class, then divide); classes that never occur in either
//! prediction or ground truth are excluded from the mean.

use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::boxes::boxes_to_mask;
use crate::data::Sample;
use crate::error::{Error, Result};
use crate::models::{eval_ancillary, eval_primary, ArchConfig, ModelKind};
use crate::params::ParamSet;
use crate::tensor::{write_tensor, Dtype, Tensor};

/// Per-class intersection and union counts over a set of images.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IouReport {
    pub intersections: Vec<u64>,
    pub unions: Vec<u64>,
    pub num_images: usize,
}

impl IouReport {
    pub fn empty(num_classes: usize) -> Self {
        IouReport {
            intersections: vec![0; num_classes],
            unions: vec![0; num_classes],
            num_images: 0,
        }
    }

    pub fn num_classes(&self) -> usize {
        self.intersections.len()
    }

    /// IOU of one class; None when the class has zero union.
    pub fn iou(&self, class: usize) -> Option<f64> {
        if self.unions[class] == 0 {
            None
        } else {
            Some(self.intersections[class] as f64 / self.unions[class] as f64)
        }
    }

    /// Unweighted mean over classes with nonzero union.
    pub fn miou(&self) -> f64 {
        let mut sum = 0.0;
        let mut n = 0usize;
        for c in 0..self.num_classes() {
            if let Some(v) = self.iou(c) {
                sum += v;
                n += 1;
            }
        }
        if n == 0 {
            0.0
        } else {
            sum / n as f64
        }
    }

    /// Combine counts from two disjoint image sets.
    pub fn merge(&self, other: &IouReport) -> IouReport {
        debug_assert_eq!(self.num_classes(), other.num_classes());
        IouReport {
            intersections: self
                .intersections
                .iter()
                .zip(&other.intersections)
                .map(|(a, b)| a + b)
                .collect(),
            unions: self.unions.iter().zip(&other.unions).map(|(a, b)| a + b).collect(),
            num_images: self.num_images + other.num_images,
        }
    }
}

fn accumulate_pair(report: &mut IouReport, pred: &Tensor, gt: &Tensor) -> Result<()> {
    if pred.dims() != gt.dims() {
        return Err(Error::shape(
            "miou",
            "map dims",
            format!("{:?}", gt.dims()),
            format!("{:?}", pred.dims()),
        ));
    }
    let k = report.num_classes();
    for (&p, &g) in pred.data().iter().zip(gt.data()) {
        let (p, g) = (p as usize, g as usize);
        if p >= k || g >= k {
            return Err(Error::invalid("miou", format!("class index out of range: pred {p}, gt {g}")));
        }
        if p == g {
            report.intersections[p] += 1;
            report.unions[p] += 1;
        } else {
            report.unions[p] += 1;
            report.unions[g] += 1;
        }
    }
    report.num_images += 1;
    Ok(())
}

/// Dataset-level mIOU of predicted class maps against ground truth.
/// `num_classes` counts all classes including background.
pub fn miou(preds: &[Tensor], gts: &[Tensor], num_classes: usize) -> Result<IouReport> {
    if preds.len() != gts.len() {
        return Err(Error::shape("miou", "image count", gts.len(), preds.len()));
    }
    let mut report = IouReport::empty(num_classes);
    for (p, g) in preds.iter().zip(gts) {
        accumulate_pair(&mut report, p, g)?;
    }
    Ok(report)
}

/// Evaluation options. The outside-box clamp forces predictions outside all
/// boxes to background and is applied only when explicitly requested.
#[derive(Debug, Clone, Default)]
pub struct EvalFlags {
    pub clamp_outside_boxes: bool,
    pub dump_masks: Option<std::path::PathBuf>,
}

fn predict_map(
    kind: ModelKind,
    cfg: &ArchConfig,
    ps: &ParamSet,
    sample: &Sample,
    clamp: bool,
) -> Result<Tensor> {
    let logits = match kind {
        ModelKind::Primary => eval_primary(cfg, ps, &sample.image)?,
        ModelKind::Ancillary => {
            let bm = boxes_to_mask(&sample.boxes, cfg.num_classes, cfg.height, cfg.width)?;
            eval_ancillary(cfg, ps, &sample.image, &bm)?
        }
        ModelKind::SelfCorr => {
            return Err(Error::invalid("evaluate", "self-correction head is not a segmentation model"))
        }
    };
    let mut map = logits.argmax_map();
    if clamp {
        let bm = boxes_to_mask(&sample.boxes, cfg.num_classes, cfg.height, cfg.width)?;
        // Channel 0 marks pixels covered by no box.
        for (v, &bg) in map.data_mut().iter_mut().zip(bm.mask.data()) {
            if bg == 1.0 {
                *v = 0.0;
            }
        }
    }
    Ok(map)
}

/// Evaluate a model over samples with ground truth masks. Ancillary
/// evaluation feeds the ground-truth boxes alongside each image.
pub fn evaluate(
    kind: ModelKind,
    cfg: &ArchConfig,
    ps: &ParamSet,
    samples: &[Sample],
    flags: &EvalFlags,
) -> Result<IouReport> {
    for s in samples {
        if s.mask.is_none() {
            return Err(Error::BadSample {
                id: s.id.clone(),
                what: "evaluation requires a ground-truth mask".into(),
            });
        }
    }
    let preds: Vec<(String, Tensor)> = samples
        .par_iter()
        .map(|s| predict_map(kind, cfg, ps, s, flags.clamp_outside_boxes).map(|m| (s.id.clone(), m)))
        .collect::<Result<Vec<_>>>()?;
    if let Some(dir) = &flags.dump_masks {
        std::fs::create_dir_all(dir)?;
        for (id, map) in &preds {
            write_tensor(&dir.join(format!("{id}.pred.stns")), map, Dtype::U8)?;
        }
    }
    let mut report = IouReport::empty(cfg.num_classes + 1);
    for ((_, p), s) in preds.iter().zip(samples) {
        accumulate_pair(&mut report, p, s.mask.as_ref().unwrap())?;
    }
    Ok(report)
}

/// Write predictions for qualitative inspection without scoring.
pub fn dump_predictions(kind: ModelKind, cfg: &ArchConfig, ps: &ParamSet, samples: &[Sample], dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    for s in samples {
        let map = predict_map(kind, cfg, ps, s, false)?;
        write_tensor(&dir.join(format!("{}.pred.stns", s.id)), &map, Dtype::U8)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn map(dims: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(dims.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn identical_maps_score_one() {
        let a = map(&[2, 2], &[0.0, 1.0, 1.0, 0.0]);
        let r = miou(&[a.clone()], &[a], 2).unwrap();
        assert_eq!(r.miou(), 1.0);
        assert_eq!(r.iou(0), Some(1.0));
        assert_eq!(r.iou(1), Some(1.0));
    }

    #[test]
    fn hand_counted_example_is_seven_twelfths() {
        let pred = map(&[2, 2], &[1.0, 1.0, 0.0, 0.0]);
        let gt = map(&[2, 2], &[1.0, 0.0, 0.0, 0.0]);
        let r = miou(&[pred], &[gt], 2).unwrap();
        assert_eq!(r.iou(1), Some(0.5));
        assert_eq!(r.iou(0), Some(2.0 / 3.0));
        assert!((r.miou() - 7.0 / 12.0).abs() < 1e-15);
    }

    #[test]
    fn disjoint_predictions_score_zero() {
        let pred = map(&[2, 2], &[1.0; 4]);
        let gt = map(&[2, 2], &[0.0; 4]);
        let r = miou(&[pred], &[gt], 2).unwrap();
        assert_eq!(r.miou(), 0.0);
    }

    #[test]
    fn zero_union_classes_are_excluded() {
        let pred = map(&[1, 2], &[0.0, 0.0]);
        let gt = map(&[1, 2], &[0.0, 0.0]);
        let r = miou(&[pred], &[gt], 3).unwrap();
        assert_eq!(r.iou(1), None);
        assert_eq!(r.iou(2), None);
        assert_eq!(r.miou(), 1.0);
    }

    #[test]
    fn permutation_invariance_and_merge_property() {
        let preds: Vec<Tensor> = (0..6)
            .map(|i| map(&[2, 2], &[(i % 2) as f64, 1.0, 0.0, ((i + 1) % 3 % 2) as f64]))
            .collect();
        let gts: Vec<Tensor> = (0..6)
            .map(|i| map(&[2, 2], &[((i + 1) % 2) as f64, 1.0, (i % 2) as f64, 0.0]))
            .collect();
        let full = miou(&preds, &gts, 2).unwrap();

        // Shuffled order scores the same.
        let order = [3usize, 0, 5, 1, 4, 2];
        let sp: Vec<Tensor> = order.iter().map(|&i| preds[i].clone()).collect();
        let sg: Vec<Tensor> = order.iter().map(|&i| gts[i].clone()).collect();
        assert_eq!(miou(&sp, &sg, 2).unwrap(), full);

        // Accumulation: merged partition counts equal the full counts.
        let a = miou(&preds[..2], &gts[..2], 2).unwrap();
        let b = miou(&preds[2..], &gts[2..], 2).unwrap();
        assert_eq!(a.merge(&b), full);
        assert_eq!(a.merge(&b).miou(), full.miou());
    }

    #[test]
    fn dim_mismatch_is_rejected() {
        let pred = map(&[2, 2], &[0.0; 4]);
        let gt = map(&[1, 4], &[0.0; 4]);
        assert!(miou(&[pred], &[gt], 2).is_err());
    }

    #[test]
    fn evaluate_self_consistency_and_order_invariance() {
        use crate::data::{generate_dataset, SceneConfig};
        let scene = SceneConfig {
            height: 16,
            width: 16,
            num_classes: 2,
            num_images: 4,
            ..SceneConfig::default()
        };
        let arch = ArchConfig {
            num_classes: 2,
            height: 16,
            width: 16,
            encoder_widths: vec![4, 6, 8, 10],
            decoder_width: 8,
            tap_coarse: 4,
            tap_fine: 2,
            head_hidden: 16,
        };
        let phi = crate::models::init_primary(&arch, 3).unwrap();
        let mut samples = generate_dataset(&scene, 5).unwrap();

        // Use the model's own argmax as ground truth: mIOU must be exactly 1.
        for s in &mut samples {
            let logits = eval_primary(&arch, &phi, &s.image).unwrap();
            s.mask = Some(logits.argmax_map());
        }
        let r = evaluate(ModelKind::Primary, &arch, &phi, &samples, &EvalFlags::default()).unwrap();
        assert_eq!(r.miou(), 1.0);

        let mut shuffled = samples.clone();
        shuffled.reverse();
        let r2 = evaluate(ModelKind::Primary, &arch, &phi, &shuffled, &EvalFlags::default()).unwrap();
        assert_eq!(r, r2);

        // Missing masks are rejected.
        let mut missing = samples.clone();
        missing[0].mask = None;
        assert!(evaluate(ModelKind::Primary, &arch, &phi, &missing, &EvalFlags::default()).is_err());
    }
}
