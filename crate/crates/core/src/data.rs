//! Synthetic segmentation scenes, dataset splits, label-noise injection, and
//! the on-disk dataset format.
//!
//! Scenes are colored shapes on a textured background. Shape classes carry
//! distinct but jittered colors with overlapping distributions, so the task
//! is learnable without being solvable by a color lookup. Masks are exact
//! per-pixel classes of the topmost shape; boxes are tight bounds of each
//! shape's visible pixels.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::boxes::BoxAnnotation;
use crate::error::{Error, Result};
use crate::seeding;
use crate::tensor::{read_tensor, write_tensor, Dtype, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackgroundMode {
    /// Single jittered base color plus pixel noise.
    Flat,
    /// Horizontal brightness gradient plus pixel noise.
    Gradient,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SceneConfig {
    pub height: usize,
    pub width: usize,
    /// Shape classes (1=disk, 2=rectangle, 3=triangle, 4=ring).
    pub num_classes: usize,
    pub shapes_min: usize,
    pub shapes_max: usize,
    /// Per-pixel uniform texture noise amplitude.
    pub noise_amplitude: f64,
    /// Per-shape uniform color jitter amplitude.
    pub color_jitter: f64,
    pub allow_overlap: bool,
    pub background: BackgroundMode,
    /// How many scenes `gen-data` renders.
    pub num_images: usize,
}

impl Default for SceneConfig {
    fn default() -> Self {
        SceneConfig {
            height: 64,
            width: 64,
            num_classes: 4,
            shapes_min: 1,
            shapes_max: 3,
            noise_amplitude: 0.08,
            color_jitter: 0.18,
            allow_overlap: true,
            background: BackgroundMode::Gradient,
            num_images: 1000,
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 || self.num_classes > 4 {
            return Err(Error::invalid("SceneConfig", "num_classes must be in 2..=4"));
        }
        if self.height < 8 || self.width < 8 {
            return Err(Error::invalid("SceneConfig", "canvas must be at least 8x8"));
        }
        if self.shapes_min > self.shapes_max {
            return Err(Error::invalid("SceneConfig", "shapes_min > shapes_max"));
        }
        Ok(())
    }
}

/// One image with optional ground truth. Weak-set samples carry boxes only.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub id: String,
    /// 3 x H x W, values in [0,1] (f32-representable).
    pub image: Tensor,
    /// H x W class indices in 0..=C; absent on the weak split.
    pub mask: Option<Tensor>,
    pub boxes: Vec<BoxAnnotation>,
}

/// Fully and weakly supervised halves of a dataset.
#[derive(Debug, Clone)]
pub struct DatasetSplit {
    pub fully: Vec<Sample>,
    pub weak: Vec<Sample>,
    pub seed: u64,
}

const BASE_COLORS: [[f64; 3]; 4] = [
    [0.72, 0.38, 0.36], // disk
    [0.38, 0.66, 0.42], // rectangle
    [0.42, 0.46, 0.72], // triangle
    [0.68, 0.64, 0.38], // ring
];
const BACKGROUND_COLOR: [f64; 3] = [0.50, 0.52, 0.55];

struct Shape {
    class_id: usize,
    kind: usize,
    cx: f64,
    cy: f64,
    a: f64,
    b: f64,
    inner: f64,
    color: [f64; 3],
}

impl Shape {
    fn covers(&self, x: f64, y: f64) -> bool {
        let (dx, dy) = (x - self.cx, y - self.cy);
        match self.kind {
            1 => dx * dx + dy * dy <= self.a * self.a,
            2 => dx.abs() <= self.a && dy.abs() <= self.b,
            3 => {
                // Upward isoceles triangle: apex (cx, cy-b), base y = cy+b.
                if dy < -self.b || dy > self.b {
                    return false;
                }
                let half_width_at = self.a * (dy + self.b) / (2.0 * self.b);
                dx.abs() <= half_width_at
            }
            4 => {
                let d2 = dx * dx + dy * dy;
                d2 <= self.a * self.a && d2 >= self.inner * self.inner
            }
            _ => unreachable!("shape kind"),
        }
    }

    /// Conservative bounding box used for overlap rejection.
    fn extent(&self) -> (f64, f64, f64, f64) {
        (
            self.cx - self.a.max(self.b),
            self.cy - self.a.max(self.b),
            self.cx + self.a.max(self.b),
            self.cy + self.a.max(self.b),
        )
    }
}

fn overlaps(a: &Shape, b: &Shape) -> bool {
    let (ax0, ay0, ax1, ay1) = a.extent();
    let (bx0, by0, bx1, by1) = b.extent();
    ax0 < bx1 && bx0 < ax1 && ay0 < by1 && by0 < ay1
}

/// Render one scene. Deterministic per (config, seed): the mask is the exact
/// class of the topmost shape per pixel and every box is the tight bound of
/// one shape's visible pixels.
pub fn generate_scene(cfg: &SceneConfig, seed: u64) -> Result<Sample> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (h, w) = (cfg.height, cfg.width);
    let min_dim = h.min(w) as f64;

    let count = rng.gen_range(cfg.shapes_min..=cfg.shapes_max);
    let mut shapes: Vec<Shape> = Vec::with_capacity(count);
    for _ in 0..count {
        for _attempt in 0..20 {
            let kind = rng.gen_range(1..=cfg.num_classes);
            let a = rng.gen_range(0.10..0.24) * min_dim;
            let b = if kind == 2 || kind == 3 {
                rng.gen_range(0.10..0.24) * min_dim
            } else {
                a
            };
            let margin = a.max(b) + 1.0;
            if 2.0 * margin >= w as f64 || 2.0 * margin >= h as f64 {
                continue;
            }
            let cx = rng.gen_range(margin..(w as f64 - margin));
            let cy = rng.gen_range(margin..(h as f64 - margin));
            let inner = if kind == 4 { a * rng.gen_range(0.45..0.65) } else { 0.0 };
            let mut color = BASE_COLORS[kind - 1];
            for c in &mut color {
                *c = (*c + rng.gen_range(-cfg.color_jitter..cfg.color_jitter)).clamp(0.05, 0.95);
            }
            let shape = Shape { class_id: kind, kind, cx, cy, a, b, inner, color };
            if !cfg.allow_overlap && shapes.iter().any(|s| overlaps(s, &shape)) {
                continue;
            }
            shapes.push(shape);
            break;
        }
    }

    // Topmost owner per pixel; shapes render back-to-front in creation order.
    let mut owner = vec![usize::MAX; h * w];
    for (i, s) in shapes.iter().enumerate() {
        let (x0, y0, x1, y1) = s.extent();
        let (px0, py0) = (x0.floor().max(0.0) as usize, y0.floor().max(0.0) as usize);
        let (px1, py1) = ((x1.ceil() as usize).min(w), (y1.ceil() as usize).min(h));
        for y in py0..py1 {
            for x in px0..px1 {
                if s.covers(x as f64 + 0.5, y as f64 + 0.5) {
                    owner[y * w + x] = i;
                }
            }
        }
    }

    let mut mask = vec![0.0f64; h * w];
    let mut bounds: Vec<(usize, usize, usize, usize)> = vec![(usize::MAX, usize::MAX, 0, 0); shapes.len()];
    for y in 0..h {
        for x in 0..w {
            let o = owner[y * w + x];
            if o != usize::MAX {
                mask[y * w + x] = shapes[o].class_id as f64;
                let b = &mut bounds[o];
                b.0 = b.0.min(x);
                b.1 = b.1.min(y);
                b.2 = b.2.max(x + 1);
                b.3 = b.3.max(y + 1);
            }
        }
    }
    let mut boxes = Vec::new();
    for (i, s) in shapes.iter().enumerate() {
        let (x0, y0, x1, y1) = bounds[i];
        if x0 != usize::MAX {
            boxes.push(BoxAnnotation::new(s.class_id, x0, y0, x1, y1));
        }
    }

    // Paint: shape or background color, gradient shading, pixel noise.
    let amp = cfg.noise_amplitude;
    let mut image = vec![0.0f64; 3 * h * w];
    let bg_shift: f64 = rng.gen_range(-0.06..0.06);
    for y in 0..h {
        for x in 0..w {
            let o = owner[y * w + x];
            let base = if o != usize::MAX { shapes[o].color } else { BACKGROUND_COLOR };
            let grad = match cfg.background {
                BackgroundMode::Flat => bg_shift,
                BackgroundMode::Gradient => bg_shift + 0.10 * (x as f64 / w as f64 - 0.5),
            };
            for c in 0..3 {
                let noise = rng.gen_range(-amp..amp);
                let v = (base[c] + grad + noise).clamp(0.0, 1.0);
                // Quantize to f32 so the f32 container round-trips bit-exactly.
                image[(c * h + y) * w + x] = v as f32 as f64;
            }
        }
    }

    Ok(Sample {
        id: format!("seed{seed:016x}"),
        image: Tensor::new(vec![3, h, w], image)?,
        mask: Some(Tensor::new(vec![h, w], mask)?),
        boxes,
    })
}

/// Render `cfg.num_images` scenes with ids `img_NNNNNN`, one derived seed per
/// image.
pub fn generate_dataset(cfg: &SceneConfig, base_seed: u64) -> Result<Vec<Sample>> {
    use rayon::prelude::*;
    let mut samples: Vec<Sample> = (0..cfg.num_images)
        .into_par_iter()
        .map(|i| generate_scene(cfg, seeding::derive2(base_seed, seeding::salt::SCENE, i as u64)))
        .collect::<Result<Vec<_>>>()?;
    for (i, s) in samples.iter_mut().enumerate() {
        s.id = format!("img_{i:06}");
    }
    Ok(samples)
}

/// Seeded shuffle; the first `f_size` keep their masks, the rest become the
/// weak set with masks removed.
pub fn split_dataset(samples: &[Sample], f_size: usize, seed: u64) -> Result<DatasetSplit> {
    if f_size > samples.len() {
        return Err(Error::invalid(
            "split_dataset",
            format!("F size {f_size} exceeds dataset size {}", samples.len()),
        ));
    }
    let mut order: Vec<usize> = (0..samples.len()).collect();
    order.shuffle(&mut seeding::rng(seed, seeding::salt::SPLIT));
    let mut fully = Vec::with_capacity(f_size);
    let mut weak = Vec::with_capacity(samples.len() - f_size);
    for (rank, &i) in order.iter().enumerate() {
        if rank < f_size {
            fully.push(samples[i].clone());
        } else {
            let mut s = samples[i].clone();
            s.mask = None;
            weak.push(s);
        }
    }
    Ok(DatasetSplit { fully, weak, seed })
}

/// Seeded disjoint halves of the fully supervised set; sizes differ by at
/// most one, with the first half taking the extra sample.
pub fn split_half(fully: &[Sample], seed: u64) -> Result<(Vec<Sample>, Vec<Sample>)> {
    if fully.len() < 2 {
        return Err(Error::invalid("split_half", "need at least 2 samples"));
    }
    let mut order: Vec<usize> = (0..fully.len()).collect();
    order.shuffle(&mut seeding::rng(seed, seeding::salt::HALF));
    let cut = fully.len().div_ceil(2);
    let a = order[..cut].iter().map(|&i| fully[i].clone()).collect();
    let b = order[cut..].iter().map(|&i| fully[i].clone()).collect();
    Ok((a, b))
}

/// Connected components (4-neighbour) of each foreground class, in row-major
/// discovery order.
fn components(mask: &Tensor) -> Vec<(usize, Vec<usize>)> {
    let (h, w) = (mask.dims()[0], mask.dims()[1]);
    let data = mask.data();
    let mut seen = vec![false; h * w];
    let mut out = Vec::new();
    for start in 0..h * w {
        let cls = data[start] as usize;
        if cls == 0 || seen[start] {
            continue;
        }
        let mut pixels = Vec::new();
        let mut stack = vec![start];
        seen[start] = true;
        while let Some(p) = stack.pop() {
            pixels.push(p);
            let (y, x) = (p / w, p % w);
            let push = |q: usize, seen: &mut Vec<bool>, stack: &mut Vec<usize>| {
                if !seen[q] && data[q] as usize == cls {
                    seen[q] = true;
                    stack.push(q);
                }
            };
            if x > 0 {
                push(p - 1, &mut seen, &mut stack);
            }
            if x + 1 < w {
                push(p + 1, &mut seen, &mut stack);
            }
            if y > 0 {
                push(p - w, &mut seen, &mut stack);
            }
            if y + 1 < h {
                push(p + w, &mut seen, &mut stack);
            }
        }
        pixels.sort_unstable();
        out.push((cls, pixels));
    }
    out
}

/// Per object, with probability `rate`, dilate or erode its region by 1-3
/// pixels, simulating over- and under-segmentation. Deterministic per seed.
pub fn inject_label_noise(mask: &Tensor, rate: f64, seed: u64) -> Result<Tensor> {
    if !(0.0..=1.0).contains(&rate) {
        return Err(Error::invalid("inject_label_noise", format!("rate {rate} outside [0,1]")));
    }
    let (h, w) = (mask.dims()[0], mask.dims()[1]);
    let mut rng = seeding::rng(seed, seeding::salt::NOISE);
    let mut out = mask.clone();
    for (cls, pixels) in components(mask) {
        let hit = rng.gen_bool(rate);
        let grow = rng.gen_bool(0.5);
        let radius = rng.gen_range(1..=3usize);
        if !hit {
            continue;
        }
        let mut set: std::collections::BTreeSet<usize> = pixels.iter().copied().collect();
        for _ in 0..radius {
            if grow {
                let mut added = Vec::new();
                for &p in &set {
                    let (y, x) = (p / w, p % w);
                    if x > 0 && !set.contains(&(p - 1)) {
                        added.push(p - 1);
                    }
                    if x + 1 < w && !set.contains(&(p + 1)) {
                        added.push(p + 1);
                    }
                    if y > 0 && !set.contains(&(p - w)) {
                        added.push(p - w);
                    }
                    if y + 1 < h && !set.contains(&(p + w)) {
                        added.push(p + w);
                    }
                }
                for p in added {
                    set.insert(p);
                    out.data_mut()[p] = cls as f64;
                }
            } else {
                let boundary: Vec<usize> = set
                    .iter()
                    .copied()
                    .filter(|&p| {
                        let (y, x) = (p / w, p % w);
                        x == 0
                            || x + 1 == w
                            || y == 0
                            || y + 1 == h
                            || !set.contains(&(p - 1))
                            || !set.contains(&(p + 1))
                            || !set.contains(&(p - w))
                            || !set.contains(&(p + w))
                    })
                    .collect();
                for p in boundary {
                    set.remove(&p);
                    if out.data()[p] == cls as f64 {
                        out.data_mut()[p] = 0.0;
                    }
                }
            }
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitTag {
    Fully,
    Weak,
}

#[derive(Serialize, Deserialize)]
struct SampleRecord {
    id: String,
    split: Option<SplitTag>,
    boxes: Vec<[usize; 5]>,
    image_file: String,
    mask_file: Option<String>,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    height: usize,
    width: usize,
    num_classes: usize,
    seed: u64,
    samples: Vec<SampleRecord>,
}

/// An on-disk dataset loaded into memory, with optional split tags.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub height: usize,
    pub width: usize,
    pub num_classes: usize,
    pub seed: u64,
    pub samples: Vec<Sample>,
    pub split_tags: Vec<Option<SplitTag>>,
}

impl Dataset {
    pub fn from_samples(samples: Vec<Sample>, height: usize, width: usize, num_classes: usize, seed: u64) -> Self {
        let tags = vec![None; samples.len()];
        Dataset { height, width, num_classes, seed, samples, split_tags: tags }
    }

    /// Materialize the F/W split recorded in the manifest tags. Weak samples
    /// have their masks stripped regardless of what is on disk.
    pub fn to_split(&self) -> Result<DatasetSplit> {
        let mut fully = Vec::new();
        let mut weak = Vec::new();
        for (s, tag) in self.samples.iter().zip(&self.split_tags) {
            match tag {
                Some(SplitTag::Fully) => fully.push(s.clone()),
                Some(SplitTag::Weak) => {
                    let mut s = s.clone();
                    s.mask = None;
                    weak.push(s);
                }
                None => {
                    return Err(Error::invalid(
                        "Dataset::to_split",
                        format!("sample {} has no split tag; run the split step first", s.id),
                    ))
                }
            }
        }
        Ok(DatasetSplit { fully, weak, seed: self.seed })
    }
}

fn boxes_to_arrays(boxes: &[BoxAnnotation]) -> Vec<[usize; 5]> {
    boxes.iter().map(|b| [b.class_id, b.x0, b.y0, b.x1, b.y1]).collect()
}

fn arrays_to_boxes(arrays: &[[usize; 5]]) -> Vec<BoxAnnotation> {
    arrays.iter().map(|a| BoxAnnotation::new(a[0], a[1], a[2], a[3], a[4])).collect()
}

/// Write a dataset directory: manifest.json plus f32 image containers and u8
/// mask containers under tensors/.
pub fn save_dataset(dir: &Path, ds: &Dataset) -> Result<()> {
    fs::create_dir_all(dir.join("tensors"))?;
    let mut records = Vec::with_capacity(ds.samples.len());
    for (s, tag) in ds.samples.iter().zip(&ds.split_tags) {
        let image_file = format!("tensors/{}.image.stns", s.id);
        write_tensor(&dir.join(&image_file), &s.image, Dtype::F32)?;
        let mask_file = match &s.mask {
            Some(m) => {
                let f = format!("tensors/{}.mask.stns", s.id);
                write_tensor(&dir.join(&f), m, Dtype::U8)?;
                Some(f)
            }
            None => None,
        };
        records.push(SampleRecord {
            id: s.id.clone(),
            split: *tag,
            boxes: boxes_to_arrays(&s.boxes),
            image_file,
            mask_file,
        });
    }
    let manifest = Manifest {
        height: ds.height,
        width: ds.width,
        num_classes: ds.num_classes,
        seed: ds.seed,
        samples: records,
    };
    fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(&manifest)? + "\n")?;
    Ok(())
}

pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let text = fs::read_to_string(dir.join("manifest.json")).map_err(|e| Error::Container {
        path: dir.display().to_string(),
        what: format!("cannot read manifest.json: {e}"),
    })?;
    let manifest: Manifest = serde_json::from_str(&text)?;
    let mut samples = Vec::with_capacity(manifest.samples.len());
    let mut tags = Vec::with_capacity(manifest.samples.len());
    for r in manifest.samples {
        let image = read_tensor(&dir.join(&r.image_file))?;
        let mask = match &r.mask_file {
            Some(f) => Some(read_tensor(&dir.join(f))?),
            None => None,
        };
        samples.push(Sample {
            id: r.id,
            image,
            mask,
            boxes: arrays_to_boxes(&r.boxes),
        });
        tags.push(r.split);
    }
    Ok(Dataset {
        height: manifest.height,
        width: manifest.width,
        num_classes: manifest.num_classes,
        seed: manifest.seed,
        samples,
        split_tags: tags,
    })
}

/// Assign split tags in an existing dataset directory (rewrites the
/// manifest only; tensor files are untouched).
pub fn assign_split(dir: &Path, f_size: usize, seed: u64) -> Result<(usize, usize)> {
    let ds = load_dataset(dir)?;
    if f_size > ds.samples.len() {
        return Err(Error::invalid(
            "assign_split",
            format!("F size {f_size} exceeds dataset size {}", ds.samples.len()),
        ));
    }
    let mut order: Vec<usize> = (0..ds.samples.len()).collect();
    order.shuffle(&mut seeding::rng(seed, seeding::salt::SPLIT));
    let mut tags = vec![Some(SplitTag::Weak); ds.samples.len()];
    for &i in order.iter().take(f_size) {
        tags[i] = Some(SplitTag::Fully);
    }
    let mut ds = ds;
    ds.split_tags = tags;
    ds.seed = seed;
    save_dataset(dir, &ds)?;
    Ok((f_size, ds.samples.len() - f_size))
}

/// Group samples by id for lookups in tests and tools.
pub fn by_id(samples: &[Sample]) -> BTreeMap<&str, &Sample> {
    samples.iter().map(|s| (s.id.as_str(), s)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::boxes::boxes_to_mask;

    fn small_cfg() -> SceneConfig {
        SceneConfig {
            height: 32,
            width: 32,
            num_classes: 4,
            shapes_min: 1,
            shapes_max: 3,
            num_images: 6,
            ..SceneConfig::default()
        }
    }

    #[test]
    fn scene_is_deterministic_per_seed() {
        let cfg = small_cfg();
        let a = generate_scene(&cfg, 42).unwrap();
        let b = generate_scene(&cfg, 42).unwrap();
        assert_eq!(a, b);
        let c = generate_scene(&cfg, 43).unwrap();
        assert!(a.image != c.image);
    }

    #[test]
    fn boxes_are_tight_around_visible_pixels() {
        let cfg = small_cfg();
        for seed in 0..30 {
            let s = generate_scene(&cfg, seed).unwrap();
            let mask = s.mask.as_ref().unwrap();
            for b in &s.boxes {
                // The mask restricted to the box must touch all four edges.
                let mut touches = [false; 4];
                for y in b.y0..b.y1 {
                    for x in b.x0..b.x1 {
                        if mask.data()[y * cfg.width + x] == b.class_id as f64 {
                            touches[0] |= x == b.x0;
                            touches[1] |= x + 1 == b.x1;
                            touches[2] |= y == b.y0;
                            touches[3] |= y + 1 == b.y1;
                        }
                    }
                }
                assert!(touches.iter().all(|&t| t), "loose box {b:?} at seed {seed}");
            }
        }
    }

    #[test]
    fn every_mask_pixel_is_inside_a_box_of_its_class() {
        let cfg = small_cfg();
        for seed in 100..120 {
            let s = generate_scene(&cfg, seed).unwrap();
            let mask = s.mask.as_ref().unwrap();
            let bm = boxes_to_mask(&s.boxes, cfg.num_classes, cfg.height, cfg.width).unwrap();
            let plane = cfg.height * cfg.width;
            for p in 0..plane {
                let cls = mask.data()[p] as usize;
                if cls > 0 {
                    assert_eq!(bm.mask.data()[cls * plane + p], 1.0, "pixel {p} class {cls} outside boxes");
                }
            }
        }
    }

    #[test]
    fn zero_shape_config_gives_empty_scene() {
        let cfg = SceneConfig { shapes_min: 0, shapes_max: 0, ..small_cfg() };
        let s = generate_scene(&cfg, 5).unwrap();
        assert!(s.boxes.is_empty());
        assert!(s.mask.unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn image_values_are_f32_representable_unit_range() {
        let s = generate_scene(&small_cfg(), 9).unwrap();
        for &v in s.image.data() {
            assert!((0.0..=1.0).contains(&v));
            assert_eq!(v, v as f32 as f64);
        }
    }

    #[test]
    fn split_dataset_boundaries_and_counts() {
        let cfg = small_cfg();
        let samples = generate_dataset(&cfg, 7).unwrap();
        let total = samples.len();

        let all_f = split_dataset(&samples, total, 1).unwrap();
        assert!(all_f.weak.is_empty());
        let all_w = split_dataset(&samples, 0, 1).unwrap();
        assert!(all_w.fully.is_empty());
        assert!(all_w.weak.iter().all(|s| s.mask.is_none()));

        let split = split_dataset(&samples, 2, 1).unwrap();
        assert_eq!(split.fully.len() + split.weak.len(), total);
        assert!(split.fully.iter().all(|s| s.mask.is_some()));
        assert!(split_dataset(&samples, total + 1, 1).is_err());

        // Disjoint ids covering the input.
        let mut ids: Vec<&str> = split.fully.iter().chain(&split.weak).map(|s| s.id.as_str()).collect();
        ids.sort_unstable();
        ids.dedup();
        assert_eq!(ids.len(), total);
    }

    #[test]
    fn split_half_sizes() {
        let cfg = SceneConfig { num_images: 11, ..small_cfg() };
        let samples = generate_dataset(&cfg, 3).unwrap();
        let (a, b) = split_half(&samples, 1).unwrap();
        assert_eq!((a.len(), b.len()), (6, 5));
        let (a, b) = split_half(&samples[..10], 1).unwrap();
        assert_eq!((a.len(), b.len()), (5, 5));
        let mut ids: Vec<&str> = a.iter().chain(&b).map(|s| s.id.as_str()).collect();
        ids.sort_unstable();
        ids.dedup();
        assert_eq!(ids.len(), 10);
        assert!(split_half(&samples[..1], 1).is_err());
    }

    #[test]
    fn label_noise_identity_at_rate_zero_and_change_at_rate_one() {
        let cfg = small_cfg();
        for seed in 0..10 {
            let s = generate_scene(&cfg, 200 + seed).unwrap();
            let mask = s.mask.unwrap();
            if components(&mask).is_empty() {
                continue;
            }
            let unchanged = inject_label_noise(&mask, 0.0, 1).unwrap();
            assert_eq!(unchanged.data(), mask.data());

            let noisy = inject_label_noise(&mask, 1.0, 1).unwrap();
            let again = inject_label_noise(&mask, 1.0, 1).unwrap();
            assert_eq!(noisy.data(), again.data());
            assert!(noisy.data() != mask.data(), "rate-1 noise left seed {seed} unchanged");
        }
    }

    #[test]
    fn dataset_round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = small_cfg();
        let samples = generate_dataset(&cfg, 21).unwrap();
        let ds = Dataset::from_samples(samples, cfg.height, cfg.width, cfg.num_classes, 21);
        save_dataset(dir.path(), &ds).unwrap();
        let back = load_dataset(dir.path()).unwrap();
        assert_eq!(back.samples.len(), ds.samples.len());
        for (a, b) in ds.samples.iter().zip(&back.samples) {
            assert_eq!(a.id, b.id);
            assert_eq!(a.boxes, b.boxes);
            for (x, y) in a.image.data().iter().zip(b.image.data()) {
                assert_eq!(x.to_bits(), y.to_bits());
            }
            assert_eq!(a.mask.as_ref().unwrap().data(), b.mask.as_ref().unwrap().data());
        }
    }

    #[test]
    fn assign_split_tags_and_materialize() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = small_cfg();
        let samples = generate_dataset(&cfg, 33).unwrap();
        let n = samples.len();
        let ds = Dataset::from_samples(samples, cfg.height, cfg.width, cfg.num_classes, 33);
        save_dataset(dir.path(), &ds).unwrap();
        assert!(load_dataset(dir.path()).unwrap().to_split().is_err());

        let (f, w) = assign_split(dir.path(), 2, 5).unwrap();
        assert_eq!((f, w), (2, n - 2));
        let split = load_dataset(dir.path()).unwrap().to_split().unwrap();
        assert_eq!(split.fully.len(), 2);
        assert!(split.fully.iter().all(|s| s.mask.is_some()));
        assert!(split.weak.iter().all(|s| s.mask.is_none()));

        // Re-splitting with the same seed is reproducible.
        let (f2, _) = assign_split(dir.path(), 2, 5).unwrap();
        assert_eq!(f2, 2);
        let split2 = load_dataset(dir.path()).unwrap().to_split().unwrap();
        let ids1: Vec<_> = split.fully.iter().map(|s| &s.id).collect();
        let ids2: Vec<_> = split2.fully.iter().map(|s| &s.id).collect();
        assert_eq!(ids1, ids2);
    }
}
