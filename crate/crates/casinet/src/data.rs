//! Deterministic generator of a multi-scale shapes segmentation task.
//!
//! Each image scatters 3-6 filled shapes (circle, rectangle, triangle; the
//! shape kind is the class) whose diameters are drawn log-uniformly across a
//! wide range, so one scene mixes objects more than an order of magnitude
//! apart in size. Class base colors are heavily jittered per shape and the
//! whole image carries Gaussian pixel noise, leaving shape geometry as the
//! reliable class cue. Later shapes occlude earlier ones. Generation is a
//! pure function of (spec, sample index).

use std::collections::BTreeMap;
use std::path::Path;

use crate::config::parse;
use crate::error::{Error, Result};
use crate::labels::Labels;
use crate::pnm;
use crate::rng::Rng;
use crate::tensor::{Shape, Tensor};

#[derive(Debug, Clone, PartialEq)]
pub struct SceneSpec {
    /// Images are square, image_size x image_size.
    pub image_size: usize,
    /// Background class 0 plus shape classes.
    pub num_classes: usize,
    pub shapes_min: usize,
    pub shapes_max: usize,
    /// Shape diameter range as a fraction of the image side.
    pub size_min: f64,
    pub size_max: f64,
    pub noise_stddev: f64,
    pub seed: u64,
}

impl Default for SceneSpec {
    fn default() -> Self {
        SceneSpec {
            image_size: 64,
            num_classes: 4,
            shapes_min: 3,
            shapes_max: 6,
            size_min: 0.05,
            size_max: 0.6,
            noise_stddev: 0.05,
            seed: 0,
        }
    }
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        if self.image_size < 8 {
            return Err(Error::Config("image_size must be at least 8".into()));
        }
        if self.num_classes < 2 {
            return Err(Error::Config("num_classes must be at least 2".into()));
        }
        if self.shapes_min == 0 || self.shapes_min > self.shapes_max {
            return Err(Error::Config("invalid shapes_per_image range".into()));
        }
        if !(self.size_min > 0.0 && self.size_min <= self.size_max && self.size_max <= 1.0) {
            return Err(Error::Config("size range must satisfy 0 < min <= max <= 1".into()));
        }
        if !(self.noise_stddev >= 0.0) {
            return Err(Error::Config("noise_stddev must be non-negative".into()));
        }
        Ok(())
    }

    pub fn to_kv(&self) -> Vec<(String, String)> {
        vec![
            ("image_size".into(), self.image_size.to_string()),
            ("num_classes".into(), self.num_classes.to_string()),
            ("shapes_min".into(), self.shapes_min.to_string()),
            ("shapes_max".into(), self.shapes_max.to_string()),
            ("size_min".into(), format!("{}", self.size_min)),
            ("size_max".into(), format!("{}", self.size_max)),
            ("noise_stddev".into(), format!("{}", self.noise_stddev)),
            ("seed".into(), self.seed.to_string()),
        ]
    }

    pub fn apply_kv(&mut self, key: &str, value: &str) -> Result<bool> {
        match key {
            "image_size" => self.image_size = parse(key, value)?,
            "num_classes" => self.num_classes = parse(key, value)?,
            "shapes_min" => self.shapes_min = parse(key, value)?,
            "shapes_max" => self.shapes_max = parse(key, value)?,
            "size_min" => self.size_min = parse(key, value)?,
            "size_max" => self.size_max = parse(key, value)?,
            "noise_stddev" => self.noise_stddev = parse(key, value)?,
            "seed" => self.seed = parse(key, value)?,
            _ => return Ok(false),
        }
        Ok(true)
    }
}

/// One image with its label map.
#[derive(Debug, Clone)]
pub struct SegSample {
    pub image: Tensor,
    pub labels: Labels,
}

enum ShapeKind {
    Circle,
    Rectangle,
    Triangle,
}

/// Base color per shape class: a gray anchor with a small class tint. The
/// per-shape jitter applied on top is several times larger than the tint,
/// so color is only a weak prior and shape geometry carries the class.
fn class_base_color(class: usize) -> [f64; 3] {
    let tints = [[1.0, -0.5, -0.5], [-0.5, 1.0, -0.5], [-0.5, -0.5, 1.0]];
    let t = tints[(class - 1) % 3];
    let strength = 0.05;
    [0.55 + strength * t[0], 0.55 + strength * t[1], 0.55 + strength * t[2]]
}

/// Generate sample `index` of the stream. Pure per (spec, index).
pub fn generate_sample(spec: &SceneSpec, index: usize) -> SegSample {
    let size = spec.image_size;
    let mut rng = Rng::derive(spec.seed, &format!("sample.{index}"));

    // Background with a slight per-image tint.
    let bg: Vec<f64> = (0..3).map(|_| 0.46 + rng.uniform(-0.05, 0.05)).collect();
    let mut img = vec![0.0f64; 3 * size * size];
    for c in 0..3 {
        img[c * size * size..(c + 1) * size * size].fill(bg[c]);
    }
    let mut labels = Labels::zeros(1, size, size);

    let count = rng.uniform_int(spec.shapes_min, spec.shapes_max);
    for _ in 0..count {
        let kind_idx = rng.uniform_int(0, 2);
        let kind = match kind_idx {
            0 => ShapeKind::Circle,
            1 => ShapeKind::Rectangle,
            _ => ShapeKind::Triangle,
        };
        let class = 1 + kind_idx % (spec.num_classes - 1);
        let cx = rng.uniform(0.12, 0.88) * size as f64;
        let cy = rng.uniform(0.12, 0.88) * size as f64;
        let diameter =
            (rng.uniform(spec.size_min.ln(), spec.size_max.ln())).exp() * size as f64;
        let r = diameter / 2.0;
        let aspect_x = rng.uniform(0.6, 1.0);
        let aspect_y = rng.uniform(0.6, 1.0);
        let flip = rng.next_f64() < 0.5;
        let base = class_base_color(class);
        let shade = rng.uniform(-0.25, 0.25);
        let color: Vec<f64> = base
            .iter()
            .map(|b| (b + shade + rng.uniform(-0.22, 0.22)).clamp(0.02, 0.98))
            .collect();

        // Rasterize over the bounding box with pixel-center tests.
        let lo_i = ((cy - r).floor().max(0.0)) as usize;
        let hi_i = ((cy + r).ceil().min(size as f64 - 1.0)) as usize;
        let lo_j = ((cx - r).floor().max(0.0)) as usize;
        let hi_j = ((cx + r).ceil().min(size as f64 - 1.0)) as usize;
        for i in lo_i..=hi_i {
            for j in lo_j..=hi_j {
                let px = j as f64 + 0.5;
                let py = i as f64 + 0.5;
                let inside = match kind {
                    ShapeKind::Circle => {
                        let dx = px - cx;
                        let dy = py - cy;
                        dx * dx + dy * dy <= r * r
                    }
                    ShapeKind::Rectangle => {
                        (px - cx).abs() <= r * aspect_x && (py - cy).abs() <= r * aspect_y
                    }
                    ShapeKind::Triangle => {
                        // Isoceles triangle; apex up or down.
                        let (ax, ay) = (cx, if flip { cy + r } else { cy - r });
                        let (bx, by) = (cx - 0.9 * r, if flip { cy - 0.75 * r } else { cy + 0.75 * r });
                        let (ex, ey) = (cx + 0.9 * r, if flip { cy - 0.75 * r } else { cy + 0.75 * r });
                        let sign = |x1: f64, y1: f64, x2: f64, y2: f64| {
                            (px - x2) * (y1 - y2) - (x1 - x2) * (py - y2)
                        };
                        let d1 = sign(ax, ay, bx, by);
                        let d2 = sign(bx, by, ex, ey);
                        let d3 = sign(ex, ey, ax, ay);
                        let has_neg = d1 < 0.0 || d2 < 0.0 || d3 < 0.0;
                        let has_pos = d1 > 0.0 || d2 > 0.0 || d3 > 0.0;
                        !(has_neg && has_pos)
                    }
                };
                if inside {
                    for c in 0..3 {
                        img[c * size * size + i * size + j] = color[c];
                    }
                    labels.set(0, i, j, class as u8);
                }
            }
        }
    }

    if spec.noise_stddev > 0.0 {
        for v in img.iter_mut() {
            *v += spec.noise_stddev * rng.normal();
        }
    }
    for v in img.iter_mut() {
        *v = v.clamp(0.0, 1.0);
    }

    let image = Tensor::from_vec(Shape::new(1, 3, size, size).expect("valid"), img)
        .expect("clamped values are finite");
    SegSample { image, labels }
}

pub fn generate(spec: &SceneSpec, count: usize) -> Result<Vec<SegSample>> {
    spec.validate()?;
    if count == 0 {
        return Err(Error::Config("dataset count must be at least 1".into()));
    }
    Ok((0..count).map(|i| generate_sample(spec, i)).collect())
}

/// Pixel counts per class over a set of samples.
pub fn class_frequencies(samples: &[SegSample], num_classes: usize) -> Vec<u64> {
    let mut counts = vec![0u64; num_classes];
    for s in samples {
        for &l in s.labels.data() {
            if (l as usize) < num_classes {
                counts[l as usize] += 1;
            }
        }
    }
    counts
}

/// Generate train and validation splits (disjoint by index: the first
/// `train_count` samples train, the next `val_count` validate). If some
/// class never occurs in the training split, retry with an incremented seed,
/// at most 10 times.
pub fn generate_split(
    spec: &SceneSpec,
    train_count: usize,
    val_count: usize,
) -> Result<(Vec<SegSample>, Vec<SegSample>, SceneSpec)> {
    let mut attempt = spec.clone();
    for _ in 0..10 {
        let all = generate(&attempt, train_count + val_count)?;
        let train: Vec<SegSample> = all[..train_count].to_vec();
        let freq = class_frequencies(&train, attempt.num_classes);
        if freq.iter().all(|&c| c > 0) {
            let val = all[train_count..].to_vec();
            return Ok((train, val, attempt));
        }
        attempt.seed = attempt.seed.wrapping_add(1);
    }
    Err(Error::DataGen(format!(
        "some class absent from the training split after 10 seed retries (last seed {})",
        attempt.seed
    )))
}

/// Horizontal mirror of a (1, C, H, W) image.
pub fn flip_image_horizontal(image: &Tensor) -> Tensor {
    let s = image.shape();
    let mut out = Tensor::zeros(s);
    for n in 0..s.n {
        for c in 0..s.c {
            for i in 0..s.h {
                for j in 0..s.w {
                    let v = image.get(n, c, i, s.w - 1 - j);
                    out.set(n, c, i, j, v);
                }
            }
        }
    }
    out
}

// ── dataset directory layout ───────────────────────────────────────────

fn img_name(i: usize) -> String {
    format!("img_{i:05}.ppm")
}

fn lab_name(i: usize) -> String {
    format!("lab_{i:05}.pgm")
}

/// Write `img_%05d.ppm`, `lab_%05d.pgm` and a `spec.txt` with the fully
/// resolved generation parameters plus the sample count.
pub fn save_dataset<P: AsRef<Path>>(dir: P, samples: &[SegSample], spec: &SceneSpec) -> Result<()> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir)?;
    for (i, s) in samples.iter().enumerate() {
        pnm::save_image(dir.join(img_name(i)), &s.image)?;
        pnm::save_labels(dir.join(lab_name(i)), &s.labels)?;
    }
    let mut kv: Vec<(String, String)> = spec.to_kv();
    kv.push(("count".into(), samples.len().to_string()));
    let text: String = kv.iter().map(|(k, v)| format!("{k}={v}\n")).collect();
    std::fs::write(dir.join("spec.txt"), text)?;
    Ok(())
}

/// Read a dataset directory back. Returns the samples and the stored spec
/// key=value pairs.
pub fn load_dataset<P: AsRef<Path>>(dir: P) -> Result<(Vec<SegSample>, BTreeMap<String, String>)> {
    let dir = dir.as_ref();
    let text = std::fs::read_to_string(dir.join("spec.txt"))
        .map_err(|_| Error::Config(format!("{} is not a dataset directory (no spec.txt)", dir.display())))?;
    let mut kv = BTreeMap::new();
    for line in text.lines() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("bad spec.txt line: {line}")))?;
        kv.insert(k.trim().to_string(), v.trim().to_string());
    }
    let count: usize = kv
        .get("count")
        .ok_or_else(|| Error::Config("spec.txt missing count".into()))?
        .parse()
        .map_err(|_| Error::Config("bad count in spec.txt".into()))?;
    let mut samples = Vec::with_capacity(count);
    for i in 0..count {
        let image = pnm::load_image(dir.join(img_name(i)))?;
        let labels = pnm::load_labels(dir.join(lab_name(i)))?;
        samples.push(SegSample { image, labels });
    }
    Ok((samples, kv))
}
