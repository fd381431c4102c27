//! Seeded synthetic multi-person scenes.
//!
//! Each person is a grayscale stick figure (head disc, thick torso, four
//! limbs) inside a box. Placements are drawn by rejection until every
//! person's largest box IoU with another person lies in the configured
//! range. Later persons are painted over earlier ones, so overlap hides
//! pixels while all keypoints stay labeled.

use std::fmt::Write as _;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::kv::KvFile;
use crate::types::{box_iou, BBox, KeypointSet, PersonAnnotation, Scene, SkeletonSpec};

const MAX_TRIES: usize = 1000;

#[derive(Debug, Clone, PartialEq)]
pub struct GenConfig {
    pub image_side: usize,
    pub min_persons: usize,
    pub max_persons: usize,
    /// Only the built-in `synthetic` skeleton can be rendered.
    pub skeleton: SkeletonSpec,
    /// Person box height range in pixels.
    pub min_scale: f64,
    pub max_scale: f64,
    /// Range every person's maxIoU must fall in (lone persons are exempt).
    pub min_max_iou: f64,
    pub max_max_iou: f64,
    /// Keypoint jitter as a fraction of the box height.
    pub jitter: f64,
    pub line_width: f64,
    /// Half-width of the uniform pixel noise.
    pub noise: f64,
    pub num_scenes: usize,
    pub seed: u64,
}

impl Default for GenConfig {
    fn default() -> Self {
        Self {
            image_side: 64,
            min_persons: 1,
            max_persons: 3,
            skeleton: SkeletonSpec::synthetic(),
            min_scale: 24.0,
            max_scale: 40.0,
            min_max_iou: 0.3,
            max_max_iou: 0.8,
            jitter: 0.05,
            line_width: 2.0,
            noise: 0.05,
            num_scenes: 2000,
            seed: 0,
        }
    }
}

impl GenConfig {
    pub fn validate(&self) -> Result<()> {
        if self.skeleton.name != "synthetic" {
            return Err(invalid(format!("cannot render skeleton `{}`", self.skeleton.name)));
        }
        if self.min_persons == 0 || self.min_persons > self.max_persons {
            return Err(invalid("person count range must satisfy 1 <= min <= max"));
        }
        let iou_ok = 0.0 <= self.min_max_iou && self.min_max_iou <= self.max_max_iou && self.max_max_iou <= 1.0;
        if !iou_ok {
            return Err(invalid("maxIoU range must lie in [0, 1] with min <= max"));
        }
        if !(self.min_scale > 0.0 && self.min_scale <= self.max_scale && self.max_scale <= self.image_side as f64) {
            return Err(invalid("scale range must be positive and fit the image"));
        }
        if !(self.jitter >= 0.0 && self.line_width > 0.0 && self.noise >= 0.0) {
            return Err(invalid("jitter, line width and noise must be non-negative"));
        }
        Ok(())
    }

    pub fn from_kv(text: &str) -> Result<Self> {
        let mut c = Self::default();
        let mut kv = KvFile::parse(text)?;
        let mut skeleton = c.skeleton.name.clone();
        kv.set("image_side", &mut c.image_side)?;
        kv.set("min_persons", &mut c.min_persons)?;
        kv.set("max_persons", &mut c.max_persons)?;
        kv.set("skeleton", &mut skeleton)?;
        kv.set("min_scale", &mut c.min_scale)?;
        kv.set("max_scale", &mut c.max_scale)?;
        kv.set("min_max_iou", &mut c.min_max_iou)?;
        kv.set("max_max_iou", &mut c.max_max_iou)?;
        kv.set("jitter", &mut c.jitter)?;
        kv.set("line_width", &mut c.line_width)?;
        kv.set("noise", &mut c.noise)?;
        kv.set("num_scenes", &mut c.num_scenes)?;
        kv.set("seed", &mut c.seed)?;
        kv.finish()?;
        c.skeleton = match skeleton.as_str() {
            "synthetic" => SkeletonSpec::synthetic(),
            other => return Err(invalid(format!("cannot render skeleton `{other}`"))),
        };
        c.validate()?;
        Ok(c)
    }

    pub fn to_kv(&self) -> String {
        let mut s = String::new();
        writeln!(s, "image_side = {}", self.image_side).ok();
        writeln!(s, "min_persons = {}", self.min_persons).ok();
        writeln!(s, "max_persons = {}", self.max_persons).ok();
        writeln!(s, "skeleton = {}", self.skeleton.name).ok();
        writeln!(s, "min_scale = {:?}", self.min_scale).ok();
        writeln!(s, "max_scale = {:?}", self.max_scale).ok();
        writeln!(s, "min_max_iou = {:?}", self.min_max_iou).ok();
        writeln!(s, "max_max_iou = {:?}", self.max_max_iou).ok();
        writeln!(s, "jitter = {:?}", self.jitter).ok();
        writeln!(s, "line_width = {:?}", self.line_width).ok();
        writeln!(s, "noise = {:?}", self.noise).ok();
        writeln!(s, "num_scenes = {}", self.num_scenes).ok();
        writeln!(s, "seed = {}", self.seed).ok();
        s
    }

    /// Seed of scene `i` of this dataset.
    pub fn scene_seed(&self, i: usize) -> u64 {
        (self.seed << 32) | i as u64
    }
}

/// Person geometry before rendering: box, five keypoints and the two
/// internal joints (neck, hip) the limbs hang from.
struct Figure {
    bbox: BBox<f64>,
    keypoints: [[f64; 2]; 5],
    neck: [f64; 2],
    hip: [f64; 2],
    head_radius: f64,
    intensity: f64,
}

fn sample_figure(c: &GenConfig, rng: &mut ChaCha8Rng, h: f64, x0: f64, y0: f64) -> Figure {
    let w = 0.7 * h;
    let j = c.jitter;
    let mut jit = |fx: f64, fy: f64| {
        let x = (fx + rng.gen_range(-j..=j)).clamp(0.0, 1.0);
        let y = (fy + rng.gen_range(-j..=j)).clamp(0.0, 1.0);
        [x0 + x * w, y0 + y * h]
    };
    let head = jit(0.5, 0.12);
    let lh = jit(0.08, 0.45);
    let rh = jit(0.92, 0.45);
    let lf = jit(0.25, 0.95);
    let rf = jit(0.75, 0.95);
    Figure {
        bbox: BBox {
            x_min: x0,
            y_min: y0,
            x_max: x0 + w,
            y_max: y0 + h,
        },
        keypoints: [head, lh, rh, lf, rf],
        neck: [x0 + 0.5 * w, y0 + 0.25 * h],
        hip: [x0 + 0.5 * w, y0 + 0.62 * h],
        head_radius: 0.09 * h,
        intensity: rng.gen_range(0.5..1.0),
    }
}

/// Per-person largest box IoU against every other person; 0 when alone.
pub fn occlusion_stats(scene: &Scene) -> Vec<f64> {
    max_ious(&scene.persons.iter().map(|p| p.bbox).collect::<Vec<_>>())
}

pub fn max_ious(boxes: &[BBox<f64>]) -> Vec<f64> {
    (0..boxes.len())
        .map(|i| {
            (0..boxes.len())
                .filter(|&j| j != i)
                .map(|j| box_iou(&boxes[i], &boxes[j]))
                .fold(0.0, f64::max)
        })
        .collect()
}

fn place(c: &GenConfig, rng: &mut ChaCha8Rng, n: usize) -> Vec<Figure> {
    let side = c.image_side as f64;
    let lo = c.min_max_iou;
    // Largest per-axis offset (as a fraction of the partner's size) that can
    // still reach IoU `lo` for equal boxes.
    let reach = (1.0 - lo) / (1.0 + lo);
    let mut figures: Vec<Figure> = Vec::with_capacity(n);
    for k in 0..n {
        let h = rng.gen_range(c.min_scale..=c.max_scale);
        let w = 0.7 * h;
        let (x0, y0) = if k == 0 || lo == 0.0 {
            (rng.gen_range(0.0..=side - w), rng.gen_range(0.0..=side - h))
        } else {
            let a = &figures[rng.gen_range(0..k)].bbox;
            let fx = rng.gen_range(-reach..=reach);
            let fy = rng.gen_range(-reach..=reach);
            let cx = 0.5 * (a.x_min + a.x_max) + fx * a.width();
            let cy = 0.5 * (a.y_min + a.y_max) + fy * a.height();
            ((cx - 0.5 * w).clamp(0.0, side - w), (cy - 0.5 * h).clamp(0.0, side - h))
        };
        figures.push(sample_figure(c, rng, h, x0, y0));
    }
    figures
}

fn segment_distance(p: [f64; 2], a: [f64; 2], b: [f64; 2]) -> f64 {
    let (dx, dy) = (b[0] - a[0], b[1] - a[1]);
    let len2 = dx * dx + dy * dy;
    let t = if len2 > 0.0 {
        (((p[0] - a[0]) * dx + (p[1] - a[1]) * dy) / len2).clamp(0.0, 1.0)
    } else {
        0.0
    };
    let (qx, qy) = (a[0] + t * dx - p[0], a[1] + t * dy - p[1]);
    (qx * qx + qy * qy).sqrt()
}

fn render(c: &GenConfig, figures: &[Figure], rng: &mut ChaCha8Rng) -> Vec<f64> {
    let side = c.image_side;
    let mut img = vec![0.0; side * side];
    let lw = c.line_width;
    for f in figures {
        let [head, lh, rh, lf, rf] = f.keypoints;
        // (from, to, half width)
        let strokes = [
            (head, f.neck, 0.5 * lw),
            (f.neck, f.hip, 1.25 * lw),
            (f.neck, lh, 0.5 * lw),
            (f.neck, rh, 0.5 * lw),
            (f.hip, lf, 0.5 * lw),
            (f.hip, rf, 0.5 * lw),
        ];
        let pad = f.head_radius + lw + 1.0;
        let x_lo = (f.bbox.x_min - pad).floor().max(0.0) as usize;
        let y_lo = (f.bbox.y_min - pad).floor().max(0.0) as usize;
        let x_hi = ((f.bbox.x_max + pad).ceil() as usize).min(side);
        let y_hi = ((f.bbox.y_max + pad).ceil() as usize).min(side);
        for y in y_lo..y_hi {
            for x in x_lo..x_hi {
                let p = [x as f64 + 0.5, y as f64 + 0.5];
                let mut cover: f64 = 0.0;
                for &(a, b, half) in &strokes {
                    cover = cover.max(half + 0.5 - segment_distance(p, a, b));
                }
                let dh = ((p[0] - head[0]).powi(2) + (p[1] - head[1]).powi(2)).sqrt();
                cover = cover.max(f.head_radius + 0.5 - dh).clamp(0.0, 1.0);
                if cover > 0.0 {
                    let px = &mut img[y * side + x];
                    *px = *px * (1.0 - cover) + f.intensity * cover;
                }
            }
        }
    }
    if c.noise > 0.0 {
        for px in &mut img {
            *px += rng.gen_range(-c.noise..=c.noise);
        }
    }
    img
}

/// One scene, fully determined by `config` and `seed`.
pub fn sample_scene(config: &GenConfig, seed: u64) -> Result<Scene> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = rng.gen_range(config.min_persons..=config.max_persons);
    let (lo, hi) = (config.min_max_iou, config.max_max_iou);
    for _ in 0..MAX_TRIES {
        let figures = place(config, &mut rng, n);
        let boxes: Vec<BBox<f64>> = figures.iter().map(|f| f.bbox).collect();
        if n > 1 && !max_ious(&boxes).iter().all(|&m| lo <= m && m <= hi) {
            continue;
        }
        let image = render(config, &figures, &mut rng);
        let side = config.image_side as f64;
        let persons = figures
            .iter()
            .map(|f| PersonAnnotation::new(KeypointSet::all_visible(f.keypoints.to_vec()), f.bbox, Some(side)))
            .collect::<Result<Vec<_>>>()?;
        return Ok(Scene {
            seed,
            persons,
            image,
            side: config.image_side,
        });
    }
    Err(Error::RejectionBudget {
        tries: MAX_TRIES,
        lo,
        hi,
    })
}

/// Scenes `0..config.num_scenes`.
pub fn generate(config: &GenConfig) -> Result<Vec<Scene>> {
    (0..config.num_scenes)
        .map(|i| sample_scene(config, config.scene_seed(i)))
        .collect()
}

#[derive(Debug, Serialize, Deserialize)]
struct PersonRecord {
    bbox: [f64; 4],
    keypoints: Vec<[f64; 3]>,
}

#[derive(Debug, Serialize, Deserialize)]
struct SceneRecord {
    seed: u64,
    persons: Vec<PersonRecord>,
}

fn to_record(s: &Scene) -> SceneRecord {
    SceneRecord {
        seed: s.seed,
        persons: s
            .persons
            .iter()
            .map(|p| PersonRecord {
                bbox: p.bbox.to_array(),
                keypoints: p
                    .keypoints
                    .coords()
                    .iter()
                    .zip(p.keypoints.visible())
                    .map(|(&[x, y], &v)| [x, y, if v { 2.0 } else { 0.0 }])
                    .collect(),
            })
            .collect(),
    }
}

/// Path of the config file written next to a dataset.
pub fn sidecar_path(data: &Path) -> PathBuf {
    let mut p = data.as_os_str().to_owned();
    p.push(".config");
    PathBuf::from(p)
}

/// Writes one JSON object per scene plus the sidecar config.
pub fn write_dataset(path: &Path, config: &GenConfig, scenes: &[Scene]) -> Result<()> {
    let mut out = BufWriter::new(std::fs::File::create(path)?);
    for s in scenes {
        serde_json::to_writer(&mut out, &to_record(s))?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    std::fs::write(sidecar_path(path), config.to_kv())?;
    Ok(())
}

/// Reads a dataset, re-rendering every image from its seed and checking
/// that the stored annotations agree with the regenerated ones.
pub fn read_dataset(path: &Path) -> Result<(GenConfig, Vec<Scene>)> {
    let config = GenConfig::from_kv(&std::fs::read_to_string(sidecar_path(path))?)?;
    let mut scenes = Vec::new();
    for (n, line) in BufReader::new(std::fs::File::open(path)?).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: SceneRecord = serde_json::from_str(&line)?;
        let scene = sample_scene(&config, rec.seed)?;
        let regenerated = to_record(&scene);
        let same = regenerated.persons.len() == rec.persons.len()
            && regenerated
                .persons
                .iter()
                .zip(&rec.persons)
                .all(|(a, b)| a.bbox == b.bbox && a.keypoints == b.keypoints);
        if !same {
            return Err(Error::Parse(format!(
                "line {}: annotations differ from those regenerated from seed {}",
                n + 1,
                rec.seed
            )));
        }
        scenes.push(scene);
    }
    Ok((config, scenes))
}
