//! The three networks: primary segmentation model, box-conditioned ancillary
//! model with attention-gated box encoder, and the convolutional
//! self-correction head.
//!
//! The backbone is a desk-scale encoder-decoder: four stride-2 stages (4x4
//! kernels so the output extent is exact), a decoder that upsamples the
//! coarse tap, concatenates the fine tap and applies two 3x3 convs, and a
//! final nearest resize back to input resolution. The ancillary model gates
//! the two decoder taps with sigmoid attention maps computed from the box
//! mask by one 3x3 conv per scale.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::boxes::BoxMaskTensor;
use crate::dist::PixelLogits;
use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::params::ParamSet;
use crate::tensor::Tensor;

/// Kernel extent of the stride-2 encoder convs; even so that halving the
/// spatial extent is exact with pad 1.
const DOWNSAMPLE_K: usize = 4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArchConfig {
    /// Foreground class count C; logits carry C+1 channels.
    pub num_classes: usize,
    pub height: usize,
    pub width: usize,
    /// Output width of each stride-2 encoder stage.
    pub encoder_widths: Vec<usize>,
    pub decoder_width: usize,
    /// 1-based encoder stage exposed to the decoder at coarse resolution.
    pub tap_coarse: usize,
    /// Encoder stage exposed at fine resolution; must be earlier (higher
    /// resolution) than the coarse tap. Stage 0 means the raw image serves
    /// as the fine tap, so the decoder runs at full resolution.
    pub tap_fine: usize,
    /// Hidden width of the conv self-correction head.
    pub head_hidden: usize,
}

impl Default for ArchConfig {
    fn default() -> Self {
        ArchConfig {
            num_classes: 4,
            height: 64,
            width: 64,
            encoder_widths: vec![16, 32, 64, 96],
            decoder_width: 64,
            tap_coarse: 4,
            tap_fine: 2,
            head_hidden: 128,
        }
    }
}

impl ArchConfig {
    pub fn validate(&self) -> Result<()> {
        let stages = self.encoder_widths.len();
        if stages == 0 {
            return Err(Error::invalid("ArchConfig", "no encoder stages"));
        }
        let factor = 1usize << stages;
        if self.height % factor != 0 || self.width % factor != 0 {
            return Err(Error::invalid(
                "ArchConfig",
                format!(
                    "input {}x{} not divisible by downsampling factor {factor}",
                    self.height, self.width
                ),
            ));
        }
        if !(self.tap_fine < self.tap_coarse && self.tap_coarse <= stages) {
            return Err(Error::invalid(
                "ArchConfig",
                format!("taps fine={} coarse={} invalid for {stages} stages", self.tap_fine, self.tap_coarse),
            ));
        }
        if self.num_classes < 1 {
            return Err(Error::invalid("ArchConfig", "need at least one foreground class"));
        }
        Ok(())
    }

    pub fn channels(&self) -> usize {
        self.num_classes + 1
    }

    /// Spatial extent (h, w) of the given 1-based encoder stage (stage 0 is
    /// the input itself).
    pub fn stage_dims(&self, stage: usize) -> (usize, usize) {
        (self.height >> stage, self.width >> stage)
    }

    /// Channel count of the feature map at a tap (stage 0 taps the image).
    pub fn stage_channels(&self, stage: usize) -> usize {
        if stage == 0 {
            3
        } else {
            self.encoder_widths[stage - 1]
        }
    }
}

/// Which network a parameter set belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Primary,
    Ancillary,
    SelfCorr,
}

fn he_uniform(rng: &mut ChaCha8Rng, dims: &[usize]) -> Tensor {
    let fan_in: usize = dims[1..].iter().product();
    let limit = (6.0 / fan_in as f64).sqrt();
    let data = (0..dims.iter().product::<usize>())
        .map(|_| rng.gen_range(-limit..limit))
        .collect();
    Tensor::new(dims.to_vec(), data).unwrap()
}

fn push_conv(ps: &mut ParamSet, rng: &mut ChaCha8Rng, name: &str, c_out: usize, c_in: usize, k: usize, bias: f64) {
    ps.insert(format!("{name}.weight"), he_uniform(rng, &[c_out, c_in, k, k]));
    ps.insert(format!("{name}.bias"), Tensor::full(&[c_out], bias));
}

fn init_backbone(ps: &mut ParamSet, rng: &mut ChaCha8Rng, cfg: &ArchConfig) {
    let mut c_in = 3;
    for (i, &w) in cfg.encoder_widths.iter().enumerate() {
        push_conv(ps, rng, &format!("enc{}", i + 1), w, c_in, DOWNSAMPLE_K, 0.0);
        c_in = w;
    }
    let cat = cfg.stage_channels(cfg.tap_coarse) + cfg.stage_channels(cfg.tap_fine);
    push_conv(ps, rng, "dec1", cfg.decoder_width, cat, 3, 0.0);
    push_conv(ps, rng, "dec2", cfg.channels(), cfg.decoder_width, 3, 0.0);
}

/// Fresh primary-model parameters, fully determined by (config, seed).
pub fn init_primary(cfg: &ArchConfig, seed: u64) -> Result<ParamSet> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut ps = ParamSet::new();
    init_backbone(&mut ps, &mut rng, cfg);
    Ok(ps)
}

/// Fresh ancillary-model parameters: the backbone plus one attention conv per
/// tap scale. Attention biases start at +2 so the initial gate is mostly
/// pass-through (sigmoid(2) ~ 0.88).
pub fn init_ancillary(cfg: &ArchConfig, seed: u64) -> Result<ParamSet> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut ps = ParamSet::new();
    init_backbone(&mut ps, &mut rng, cfg);
    let ch = cfg.channels();
    push_conv(&mut ps, &mut rng, "attn_coarse", cfg.stage_channels(cfg.tap_coarse), ch, 3, 2.0);
    push_conv(&mut ps, &mut rng, "attn_fine", cfg.stage_channels(cfg.tap_fine), ch, 3, 2.0);
    Ok(ps)
}

/// Fresh self-correction head parameters (two 3x3 convs).
pub fn init_selfcorr(cfg: &ArchConfig, seed: u64) -> Result<ParamSet> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut ps = ParamSet::new();
    let ch = cfg.channels();
    push_conv(&mut ps, &mut rng, "sc1", cfg.head_hidden, 2 * ch, 3, 0.0);
    push_conv(&mut ps, &mut rng, "sc2", ch, cfg.head_hidden, 3, 0.0);
    Ok(ps)
}

/// Graph leaves for every parameter of a set, keyed by name.
pub struct ParamNodes {
    map: BTreeMap<String, NodeId>,
}

impl ParamNodes {
    pub fn node(&self, name: &str) -> NodeId {
        self.map[name]
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &NodeId)> {
        self.map.iter()
    }
}

/// Insert every parameter as a graph leaf.
pub fn bind_params(g: &mut Graph, ps: &ParamSet, requires_grad: bool) -> ParamNodes {
    let mut map = BTreeMap::new();
    for (name, t) in ps.iter() {
        map.insert(name.clone(), g.leaf(t.clone(), requires_grad));
    }
    ParamNodes { map }
}

/// Wrap already-inserted leaves as a parameter map (gradient checking feeds
/// leaves in bulk and then names them).
pub fn bind_param_ids(names: &[String], ids: &[NodeId]) -> ParamNodes {
    debug_assert_eq!(names.len(), ids.len());
    let map = names.iter().cloned().zip(ids.iter().copied()).collect();
    ParamNodes { map }
}

fn check_image(cfg: &ArchConfig, image: &Tensor) -> Result<()> {
    let want = [3, cfg.height, cfg.width];
    if image.dims() != want {
        return Err(Error::shape(
            "model_forward",
            "image dims",
            format!("{want:?}"),
            format!("{:?}", image.dims()),
        ));
    }
    Ok(())
}

fn conv_block(g: &mut Graph, p: &ParamNodes, name: &str, x: NodeId, stride: usize, pad: usize) -> Result<NodeId> {
    g.conv2d(x, p.node(&format!("{name}.weight")), p.node(&format!("{name}.bias")), stride, pad)
}

fn encoder_stages(g: &mut Graph, p: &ParamNodes, cfg: &ArchConfig, image: NodeId) -> Result<Vec<NodeId>> {
    let mut feat = image;
    let mut stages = Vec::with_capacity(cfg.encoder_widths.len());
    for i in 0..cfg.encoder_widths.len() {
        let c = conv_block(g, p, &format!("enc{}", i + 1), feat, 2, 1)?;
        feat = g.relu(c);
        stages.push(feat);
    }
    Ok(stages)
}

fn decode(g: &mut Graph, p: &ParamNodes, cfg: &ArchConfig, coarse: NodeId, fine: NodeId) -> Result<NodeId> {
    let (fh, fw) = cfg.stage_dims(cfg.tap_fine);
    let up = g.resize_nearest(coarse, fh, fw)?;
    let cat = g.concat_channels(up, fine)?;
    let d1 = conv_block(g, p, "dec1", cat, 1, 1)?;
    let d1 = g.relu(d1);
    let logits_small = conv_block(g, p, "dec2", d1, 1, 1)?;
    g.resize_nearest(logits_small, cfg.height, cfg.width)
}

fn tap_feature(stages: &[NodeId], image: NodeId, stage: usize) -> NodeId {
    if stage == 0 {
        image
    } else {
        stages[stage - 1]
    }
}

/// Image-only segmentation forward; logits at full input resolution.
pub fn primary_forward(g: &mut Graph, p: &ParamNodes, cfg: &ArchConfig, image: NodeId) -> Result<NodeId> {
    check_image(cfg, g.value(image))?;
    let stages = encoder_stages(g, p, cfg, image)?;
    let coarse = tap_feature(&stages, image, cfg.tap_coarse);
    let fine = tap_feature(&stages, image, cfg.tap_fine);
    decode(g, p, cfg, coarse, fine)
}

/// Gate one tap: feature * sigmoid(conv3x3(resize(boxmask))).
fn attention_gate(
    g: &mut Graph,
    p: &ParamNodes,
    name: &str,
    feat: NodeId,
    boxmask: NodeId,
    dims: (usize, usize),
) -> Result<NodeId> {
    let m = g.resize_nearest(boxmask, dims.0, dims.1)?;
    let a = conv_block(g, p, name, m, 1, 1)?;
    let a = g.sigmoid(a);
    g.mul(feat, a)
}

/// Box-conditioned forward: encoder taps are fused with box-attention maps
/// before the decoder consumes them.
pub fn ancillary_forward(
    g: &mut Graph,
    p: &ParamNodes,
    cfg: &ArchConfig,
    image: NodeId,
    boxmask: NodeId,
) -> Result<NodeId> {
    check_image(cfg, g.value(image))?;
    let want = [cfg.channels(), cfg.height, cfg.width];
    if g.value(boxmask).dims() != want {
        return Err(Error::shape(
            "ancillary_forward",
            "boxmask dims",
            format!("{want:?}"),
            format!("{:?}", g.value(boxmask).dims()),
        ));
    }
    let stages = encoder_stages(g, p, cfg, image)?;
    let coarse = attention_gate(
        g,
        p,
        "attn_coarse",
        tap_feature(&stages, image, cfg.tap_coarse),
        boxmask,
        cfg.stage_dims(cfg.tap_coarse),
    )?;
    let fine = attention_gate(
        g,
        p,
        "attn_fine",
        tap_feature(&stages, image, cfg.tap_fine),
        boxmask,
        cfg.stage_dims(cfg.tap_fine),
    )?;
    decode(g, p, cfg, coarse, fine)
}

/// Self-correction head: concat the two logit blocks, 3x3 conv to the hidden
/// width, relu, 3x3 conv back to C+1 channels. Padding preserves H x W.
pub fn selfcorr_head_forward(
    g: &mut Graph,
    p: &ParamNodes,
    l: NodeId,
    l_anc: NodeId,
) -> Result<NodeId> {
    if g.value(l).dims() != g.value(l_anc).dims() {
        return Err(Error::shape(
            "selfcorr_head_forward",
            "logit dims",
            format!("{:?}", g.value(l).dims()),
            format!("{:?}", g.value(l_anc).dims()),
        ));
    }
    let cat = g.concat_channels(l, l_anc)?;
    let h = conv_block(g, p, "sc1", cat, 1, 1)?;
    let h = g.relu(h);
    conv_block(g, p, "sc2", h, 1, 1)
}

/// No-grad primary forward on a plain tensor.
pub fn eval_primary(cfg: &ArchConfig, ps: &ParamSet, image: &Tensor) -> Result<PixelLogits> {
    let mut g = Graph::new();
    let p = bind_params(&mut g, ps, false);
    let img = g.leaf(image.clone(), false);
    let out = primary_forward(&mut g, &p, cfg, img)?;
    PixelLogits::new(g.value(out).clone())
}

/// No-grad ancillary forward on plain tensors.
pub fn eval_ancillary(cfg: &ArchConfig, ps: &ParamSet, image: &Tensor, boxmask: &BoxMaskTensor) -> Result<PixelLogits> {
    let mut g = Graph::new();
    let p = bind_params(&mut g, ps, false);
    let img = g.leaf(image.clone(), false);
    let bm = g.leaf(boxmask.mask.clone(), false);
    let out = ancillary_forward(&mut g, &p, cfg, img, bm)?;
    PixelLogits::new(g.value(out).clone())
}

/// No-grad head forward on plain logit tensors.
pub fn eval_selfcorr(ps: &ParamSet, l: &PixelLogits, l_anc: &PixelLogits) -> Result<PixelLogits> {
    let mut g = Graph::new();
    let p = bind_params(&mut g, ps, false);
    let ln = g.leaf(l.scores.clone(), false);
    let an = g.leaf(l_anc.scores.clone(), false);
    let out = selfcorr_head_forward(&mut g, &p, ln, an)?;
    PixelLogits::new(g.value(out).clone())
}

/// A head parameter set that reproduces linear fusion at alpha = 1: layer 1
/// passes every input channel through relu as a (+x, -x) pair, layer 2
/// averages the primary and ancillary blocks via (relu(x) - relu(-x)) = x.
pub fn averaging_head(cfg: &ArchConfig) -> Result<ParamSet> {
    let ch = cfg.channels();
    if cfg.head_hidden < 4 * ch {
        return Err(Error::invalid(
            "averaging_head",
            format!("head hidden {} cannot host {} passthrough pairs", cfg.head_hidden, 4 * ch),
        ));
    }
    let mut ps = ParamSet::new();
    let mut w1 = Tensor::zeros(&[cfg.head_hidden, 2 * ch, 3, 3]);
    {
        let d = w1.data_mut();
        for j in 0..2 * ch {
            // center tap of the 3x3 kernel
            d[((2 * j) * 2 * ch + j) * 9 + 4] = 1.0;
            d[((2 * j + 1) * 2 * ch + j) * 9 + 4] = -1.0;
        }
    }
    ps.insert("sc1.weight", w1);
    ps.insert("sc1.bias", Tensor::zeros(&[cfg.head_hidden]));
    let mut w2 = Tensor::zeros(&[ch, cfg.head_hidden, 3, 3]);
    {
        let d = w2.data_mut();
        for c in 0..ch {
            for &j in &[c, c + ch] {
                d[(c * cfg.head_hidden + 2 * j) * 9 + 4] = 0.5;
                d[(c * cfg.head_hidden + 2 * j + 1) * 9 + 4] = -0.5;
            }
        }
    }
    ps.insert("sc2.weight", w2);
    ps.insert("sc2.bias", Tensor::zeros(&[ch]));
    Ok(ps)
}

#[derive(Serialize, Deserialize)]
struct ModelManifest {
    model: ModelKind,
    arch: ArchConfig,
}

/// Write a model checkpoint: arch manifest plus the parameter containers.
pub fn save_model(dir: &Path, kind: ModelKind, cfg: &ArchConfig, ps: &ParamSet) -> Result<()> {
    fs::create_dir_all(dir)?;
    let manifest = ModelManifest { model: kind, arch: cfg.clone() };
    fs::write(dir.join("arch.json"), serde_json::to_string_pretty(&manifest)? + "\n")?;
    ps.save(dir)
}

pub fn load_model(dir: &Path) -> Result<(ModelKind, ArchConfig, ParamSet)> {
    let text = fs::read_to_string(dir.join("arch.json")).map_err(|e| Error::Checkpoint {
        path: dir.display().to_string(),
        what: format!("cannot read arch.json: {e}"),
    })?;
    let manifest: ModelManifest = serde_json::from_str(&text)?;
    manifest.arch.validate()?;
    let ps = ParamSet::load(dir)?;
    Ok((manifest.model, manifest.arch, ps))
}

/// Load a checkpoint and require it to be of the given kind.
pub fn load_model_as(dir: &Path, want: ModelKind) -> Result<(ArchConfig, ParamSet)> {
    let (kind, cfg, ps) = load_model(dir)?;
    if kind != want {
        return Err(Error::Checkpoint {
            path: dir.display().to_string(),
            what: format!("expected {want:?} checkpoint, found {kind:?}"),
        });
    }
    Ok((cfg, ps))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::boxes::{boxes_to_mask, BoxAnnotation};
    use crate::dist::{fuse_linear, make_factorial};

    fn tiny_cfg() -> ArchConfig {
        ArchConfig {
            num_classes: 2,
            height: 16,
            width: 16,
            encoder_widths: vec![4, 6, 8, 10],
            decoder_width: 8,
            tap_coarse: 4,
            tap_fine: 2,
            head_hidden: 16,
        }
    }

    fn ramp_image(cfg: &ArchConfig) -> Tensor {
        let n = 3 * cfg.height * cfg.width;
        Tensor::new(
            vec![3, cfg.height, cfg.width],
            (0..n).map(|i| (i % 97) as f64 / 97.0).collect(),
        )
        .unwrap()
    }

    #[test]
    fn forward_shape_contracts_and_determinism() {
        let cfg = tiny_cfg();
        let phi = init_primary(&cfg, 1).unwrap();
        let img = ramp_image(&cfg);
        let a = eval_primary(&cfg, &phi, &img).unwrap();
        assert_eq!(a.scores.dims(), &[3, 16, 16]);
        let b = eval_primary(&cfg, &phi, &img).unwrap();
        assert_eq!(a.scores.data(), b.scores.data());
        assert!(a.scores.all_finite());
    }

    #[test]
    fn ancillary_shape_and_box_sensitivity() {
        let cfg = tiny_cfg();
        let theta = init_ancillary(&cfg, 2).unwrap();
        let img = ramp_image(&cfg);
        let empty = boxes_to_mask(&[], cfg.num_classes, cfg.height, cfg.width).unwrap();
        let boxed = boxes_to_mask(
            &[BoxAnnotation::new(1, 2, 2, 12, 12)],
            cfg.num_classes,
            cfg.height,
            cfg.width,
        )
        .unwrap();
        let la = eval_ancillary(&cfg, &theta, &img, &empty).unwrap();
        assert_eq!(la.scores.dims(), &[3, 16, 16]);
        let lb = eval_ancillary(&cfg, &theta, &img, &boxed).unwrap();
        assert!(la.scores.data() != lb.scores.data(), "boxmask change must reach the logits");
        assert!(la.scores.all_finite() && lb.scores.all_finite());
    }

    #[test]
    fn head_shape_and_hidden_width_default() {
        assert_eq!(ArchConfig::default().head_hidden, 128);
        let cfg = tiny_cfg();
        let lam = init_selfcorr(&cfg, 3).unwrap();
        assert_eq!(lam.get("sc1.weight").unwrap().dims(), &[16, 6, 3, 3]);
        let l = PixelLogits::new(Tensor::full(&[3, 16, 16], 0.1)).unwrap();
        let la = PixelLogits::new(Tensor::full(&[3, 16, 16], -0.2)).unwrap();
        let out = eval_selfcorr(&lam, &l, &la).unwrap();
        assert_eq!(out.scores.dims(), &[3, 16, 16]);
    }

    #[test]
    fn averaging_head_matches_linear_fusion_at_alpha_one() {
        let cfg = tiny_cfg();
        let lam = averaging_head(&cfg).unwrap();
        let mk = |salt: u64| {
            let data = (0..3 * 256)
                .map(|i| ((((i as u64 + salt) * 2654435761) % 1000) as f64 / 250.0) - 2.0)
                .collect();
            PixelLogits::new(Tensor::new(vec![3, 16, 16], data).unwrap()).unwrap()
        };
        let l = mk(0);
        let la = mk(77);
        let head = eval_selfcorr(&lam, &l, &la).unwrap();
        let fused = fuse_linear(&l, &la, 1.0).unwrap();
        let ph = make_factorial(&head);
        let pf = make_factorial(&fused);
        for (a, b) in ph.probs.data().iter().zip(pf.probs.data()) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn param_dims_depend_on_config_not_seed() {
        let cfg = tiny_cfg();
        let a = init_ancillary(&cfg, 1).unwrap();
        let b = init_ancillary(&cfg, 999).unwrap();
        let names_a: Vec<_> = a.names().cloned().collect();
        let names_b: Vec<_> = b.names().cloned().collect();
        assert_eq!(names_a, names_b);
        for (name, t) in a.iter() {
            assert_eq!(t.dims(), b.get(name).unwrap().dims(), "{name}");
        }
        assert_eq!(a.num_values(), b.num_values());
    }

    #[test]
    fn checkpoint_round_trip_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny_cfg();
        let theta = init_ancillary(&cfg, 11).unwrap();
        save_model(dir.path(), ModelKind::Ancillary, &cfg, &theta).unwrap();
        let (kind, cfg2, back) = load_model(dir.path()).unwrap();
        assert_eq!(kind, ModelKind::Ancillary);
        assert_eq!(cfg2, cfg);
        for (name, t) in theta.iter() {
            let u = back.get(name).unwrap();
            for (a, b) in t.data().iter().zip(u.data()) {
                assert_eq!(a.to_bits(), b.to_bits());
            }
        }
        assert!(load_model_as(dir.path(), ModelKind::Primary).is_err());
    }

    #[test]
    fn config_validation_rejects_bad_shapes() {
        let mut cfg = tiny_cfg();
        cfg.height = 20; // not divisible by 16
        assert!(cfg.validate().is_err());
        let mut cfg = tiny_cfg();
        cfg.tap_fine = 4;
        assert!(cfg.validate().is_err());
        let cfg = tiny_cfg();
        let phi = init_primary(&cfg, 1).unwrap();
        let bad = Tensor::zeros(&[3, 8, 8]);
        assert!(eval_primary(&cfg, &phi, &bad).is_err());
    }
}
