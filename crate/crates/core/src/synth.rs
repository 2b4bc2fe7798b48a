//! Seeded synthetic lane scenes: cubic ground-truth lanes, a rasterised
//! input image and a scene file format with a binary raster sidecar.

use std::io::{BufRead, BufReader, Read, Write};
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::bezier::{evaluate, uniform_ts, ControlPolygon};
use crate::camera::{CameraModel, DEFAULT_Z_MIN};
use crate::diff::Tensor;
use crate::error::{invalid, Error, Result};
use crate::lanes::{Lane, LaneSet, Mode};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CameraRig {
    pub height: f64,
    pub pitch: f64,
    pub focal: f64,
}

impl Default for CameraRig {
    fn default() -> Self {
        Self {
            height: 1.5,
            pitch: 0.1,
            focal: 40.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub mode: Mode,
    pub image_w: usize,
    pub image_h: usize,
    /// Categories including background (class 0); lanes use 1..num_classes.
    pub num_classes: usize,
    pub min_lanes: usize,
    pub max_lanes: usize,
    /// Largest sideways bend of the inner control points (pixels in 2D,
    /// metres in 3D).
    pub curvature: f64,
    /// Standard deviation of the additive raster noise.
    pub noise: f64,
    /// Dense points stored per ground-truth lane.
    pub n_dis: usize,
    pub camera: CameraRig,
    pub max_retries: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            mode: Mode::TwoD,
            image_w: 64,
            image_h: 64,
            num_classes: 3,
            min_lanes: 1,
            max_lanes: 4,
            curvature: 6.0,
            noise: 0.05,
            n_dis: 200,
            camera: CameraRig::default(),
            max_retries: 200,
        }
    }
}

impl SynthConfig {
    pub fn for_mode(mode: Mode) -> Self {
        match mode {
            Mode::TwoD => Self::default(),
            Mode::ThreeD => Self {
                mode,
                curvature: 1.5,
                ..Self::default()
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.image_w < 8 || self.image_h < 8 {
            return Err(invalid("image must be at least 8×8"));
        }
        if self.num_classes < 2 {
            return Err(invalid("need at least one lane category besides background"));
        }
        if self.min_lanes > self.max_lanes || self.max_lanes == 0 || self.max_lanes > 6 {
            return Err(invalid("lane count range must satisfy 0 <= min <= max <= 6, max >= 1"));
        }
        if !(self.curvature >= 0.0) || !(self.noise >= 0.0) {
            return Err(invalid("curvature and noise must be non-negative"));
        }
        if self.n_dis < 2 {
            return Err(invalid("need at least two dense points per lane"));
        }
        Ok(())
    }

    /// Raster channels: one per lane category.
    pub fn channels(&self) -> usize {
        self.num_classes - 1
    }

    pub fn camera_model(&self) -> Result<CameraModel> {
        CameraModel::forward_looking(
            self.camera.height,
            self.camera.pitch,
            self.camera.focal,
            self.image_w,
            self.image_h,
        )
    }
}

/// Ego-frame region that 3D lanes are drawn from: `(low, high)` for x, y, z.
pub const SCENE_BOUNDS_3D: [(f64, f64); 3] = [(-10.0, 10.0), (0.0, 50.0), (-2.0, 2.0)];

#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    pub lanes: LaneSet,
    /// `H×W×C`; values are exactly representable as `f32`.
    pub raster: Tensor,
    pub rng_seed: u64,
}

impl Scene {
    pub fn scene_id(&self) -> &str {
        &self.lanes.scene_id
    }

    pub fn mode(&self) -> Mode {
        self.lanes.mode
    }

    pub fn camera(&self) -> Option<&CameraModel> {
        self.lanes.camera.as_ref()
    }
}

fn spaced_positions(rng: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64, gap: f64, retries: usize) -> Option<Vec<f64>> {
    for _ in 0..retries {
        let mut xs: Vec<f64> = (0..n).map(|_| rng.random_range(lo..hi)).collect();
        xs.sort_by(f64::total_cmp);
        if xs.windows(2).all(|w| w[1] - w[0] >= gap) {
            return Some(xs);
        }
    }
    None
}

fn lane_2d(rng: &mut ChaCha8Rng, cfg: &SynthConfig, x_bottom: f64, shift: f64) -> Vec<Vec<f64>> {
    let (w, h) = (cfg.image_w as f64, cfg.image_h as f64);
    let p0 = [x_bottom, h - 1.0 - rng.random_range(0.0..3.0)];
    let top_x = (x_bottom + shift + rng.random_range(-2.0..2.0)).clamp(1.0, w - 2.0);
    let p3 = [top_x, rng.random_range(1.0..h / 3.0)];
    let (dx, dy) = (p3[0] - p0[0], p3[1] - p0[1]);
    let len = (dx * dx + dy * dy).sqrt();
    let normal = [-dy / len, dx / len];
    let bend = cfg.curvature;
    let b1 = rng.random_range(-bend..=bend);
    let b2 = rng.random_range(-bend..=bend);
    let inner = |f: f64, b: f64| vec![p0[0] + f * dx + b * normal[0], p0[1] + f * dy + b * normal[1]];
    vec![p0.to_vec(), inner(1.0 / 3.0, b1), inner(2.0 / 3.0, b2), p3.to_vec()]
}

fn lane_3d(rng: &mut ChaCha8Rng, cfg: &SynthConfig, x_near: f64, shift: f64, slope: f64) -> Vec<Vec<f64>> {
    let y0 = rng.random_range(5.0..8.0);
    let y3 = rng.random_range(30.0..45.0);
    let x3 = x_near + shift + rng.random_range(-0.3..0.3);
    let z = |y: f64| slope * (y - y0);
    let bend = cfg.curvature;
    let b1 = rng.random_range(-bend..=bend);
    let b2 = rng.random_range(-bend..=bend);
    let at = |f: f64, b: f64| {
        let y = y0 + f * (y3 - y0);
        vec![x_near + f * (x3 - x_near) + b, y, z(y)]
    };
    vec![at(0.0, 0.0), at(1.0 / 3.0, b1), at(2.0 / 3.0, b2), at(1.0, 0.0)]
}

/// Pixel polyline of a lane's dense points (projected in 3D).
fn image_polyline(points: &[Vec<f64>], cam: Option<&CameraModel>) -> Vec<[f64; 2]> {
    points
        .iter()
        .map(|p| match cam {
            Some(c) => c.project_clamped(p, DEFAULT_Z_MIN),
            None => [p[0], p[1]],
        })
        .collect()
}

fn fraction_inside(poly: &[[f64; 2]], w: usize, h: usize) -> f64 {
    let inside = poly
        .iter()
        .filter(|p| p[0] >= 0.0 && p[1] >= 0.0 && p[0] <= (w - 1) as f64 && p[1] <= (h - 1) as f64)
        .count();
    inside as f64 / poly.len() as f64
}

fn visible(points: &[Vec<f64>], cam: Option<&CameraModel>, cfg: &SynthConfig) -> bool {
    if let Some(c) = cam {
        if points.iter().any(|p| c.to_camera(p)[2] <= DEFAULT_Z_MIN) {
            return false;
        }
    }
    let poly = image_polyline(points, cam);
    let need = if cam.is_some() { 0.9 } else { 0.0 };
    let inside = fraction_inside(&poly, cfg.image_w, cfg.image_h);
    inside >= need && inside * poly.len() as f64 >= 2.0
}

/// A scene drawn deterministically from `seed`.
pub fn generate_scene(seed: u64, cfg: &SynthConfig) -> Result<Scene> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cam = match cfg.mode {
        Mode::TwoD => None,
        Mode::ThreeD => Some(cfg.camera_model()?),
    };
    let ts = uniform_ts(cfg.n_dis);
    for _ in 0..cfg.max_retries {
        let n = rng.random_range(cfg.min_lanes..=cfg.max_lanes);
        let (lo, hi, gap) = match cfg.mode {
            Mode::TwoD => (4.0, cfg.image_w as f64 - 4.0, cfg.image_w as f64 / 6.0),
            Mode::ThreeD => (-4.5, 4.5, 2.5),
        };
        let Some(xs) = spaced_positions(&mut rng, n, lo, hi, gap, cfg.max_retries) else {
            continue;
        };
        let shift = match cfg.mode {
            Mode::TwoD => rng.random_range(-10.0..10.0),
            Mode::ThreeD => rng.random_range(-2.5..2.5),
        };
        let slope = rng.random_range(-0.02..0.02);
        let mut lanes = Vec::with_capacity(n);
        let mut ok = true;
        for x in xs {
            let cps = match cfg.mode {
                Mode::TwoD => lane_2d(&mut rng, cfg, x, shift),
                Mode::ThreeD => lane_3d(&mut rng, cfg, x, shift, slope),
            };
            let cp = ControlPolygon::new(&cps)?;
            let dense = evaluate(&cp, &ts)?;
            let points: Vec<Vec<f64>> = dense.points().map(<[f64]>::to_vec).collect();
            if !visible(&points, cam.as_ref(), cfg) {
                ok = false;
                break;
            }
            lanes.push(Lane {
                category: rng.random_range(1..cfg.num_classes),
                score: None,
                control_points: cp,
                points: Some(points),
            });
        }
        if !ok {
            continue;
        }
        let set = LaneSet::new(format!("scene_{seed}"), cfg.mode, cam.clone(), lanes)?;
        let raster = rasterize(&set, cfg, &mut rng)?;
        return Ok(Scene {
            lanes: set,
            raster,
            rng_seed: seed,
        });
    }
    Err(Error::Degenerate(format!(
        "no visible lane layout after {} attempts",
        cfg.max_retries
    )))
}

/// `count` scenes whose seeds are drawn from `seed`.
pub fn generate_corpus(seed: u64, count: usize, cfg: &SynthConfig) -> Result<Vec<Scene>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let seeds: Vec<u64> = (0..count).map(|_| rng.random()).collect();
    seeds.par_iter().map(|s| generate_scene(*s, cfg)).collect()
}

fn point_segment_distance(p: [f64; 2], a: [f64; 2], b: [f64; 2]) -> f64 {
    let (dx, dy) = (b[0] - a[0], b[1] - a[1]);
    let len2 = dx * dx + dy * dy;
    let t = if len2 > 0.0 {
        (((p[0] - a[0]) * dx + (p[1] - a[1]) * dy) / len2).clamp(0.0, 1.0)
    } else {
        0.0
    };
    let (x, y) = (a[0] + t * dx - p[0], a[1] + t * dy - p[1]);
    (x * x + y * y).sqrt()
}

/// Stroke intensity at distance `d` from the centre line: full within half
/// a pixel, fading to zero one pixel further out.
fn stroke(d: f64) -> f64 {
    (1.5 - d).clamp(0.0, 1.0)
}

/// Draws every lane into its category channel and adds Gaussian noise.
/// Texel `(row i, column j)` sits at image position `(j, i)`.
pub fn rasterize(set: &LaneSet, cfg: &SynthConfig, rng: &mut impl Rng) -> Result<Tensor> {
    let (w, h, c) = (cfg.image_w, cfg.image_h, cfg.channels());
    let mut data = vec![0.0f64; h * w * c];
    for lane in &set.lanes {
        if lane.category == 0 || lane.category > c {
            return Err(invalid(format!("lane category {} outside 1..={c}", lane.category)));
        }
        let ch = lane.category - 1;
        let dense = match &lane.points {
            Some(p) => p.clone(),
            None => evaluate(&lane.control_points, &uniform_ts(cfg.n_dis))?
                .points()
                .map(<[f64]>::to_vec)
                .collect(),
        };
        let poly = image_polyline(&dense, set.camera.as_ref());
        for seg in poly.windows(2) {
            let (a, b) = (seg[0], seg[1]);
            let x0 = (a[0].min(b[0]) - 2.0).floor().max(0.0) as usize;
            let x1 = (a[0].max(b[0]) + 2.0).ceil().min((w - 1) as f64);
            let y0 = (a[1].min(b[1]) - 2.0).floor().max(0.0) as usize;
            let y1 = (a[1].max(b[1]) + 2.0).ceil().min((h - 1) as f64);
            if x1 < 0.0 || y1 < 0.0 {
                continue;
            }
            for i in y0..=y1 as usize {
                for j in x0..=x1 as usize {
                    let v = stroke(point_segment_distance([j as f64, i as f64], a, b));
                    let cell = &mut data[(i * w + j) * c + ch];
                    *cell = cell.max(v);
                }
            }
        }
    }
    if cfg.noise > 0.0 {
        let normal = Normal::new(0.0, cfg.noise).map_err(|e| invalid(e.to_string()))?;
        for v in &mut data {
            *v += normal.sample(rng);
        }
    }
    let data = data.into_iter().map(|v| v as f32 as f64).collect();
    Tensor::new(vec![h, w, c], data)
}

fn raster_path(json_path: &Path, name: &str) -> PathBuf {
    json_path.parent().unwrap_or(Path::new(".")).join(name)
}

/// Writes `<dir>/<scene_id>.json` and its raster sidecar `<scene_id>.f32`.
pub fn save_scene(scene: &Scene, dir: &Path) -> Result<PathBuf> {
    let json_path = dir.join(format!("{}.json", scene.scene_id()));
    let raster_name = format!("{}.f32", scene.scene_id());
    let mut doc = scene.lanes.to_json();
    doc["raster"] = json!(raster_name);
    doc["rng_seed"] = json!(scene.rng_seed);
    std::fs::write(&json_path, serde_json::to_string_pretty(&doc)?)?;

    let mut f = std::io::BufWriter::new(std::fs::File::create(raster_path(&json_path, &raster_name))?);
    let header = json!({"shape": scene.raster.shape(), "dtype": "f32le"});
    writeln!(f, "{header}")?;
    for v in scene.raster.data() {
        f.write_all(&(*v as f32).to_le_bytes())?;
    }
    f.flush()?;
    Ok(json_path)
}

fn format_err(path: &Path, pointer: &str, detail: impl Into<String>) -> Error {
    Error::Format {
        path: path.display().to_string(),
        pointer: pointer.to_string(),
        detail: detail.into(),
    }
}

fn read_raster(path: &Path) -> Result<Tensor> {
    let mut r = BufReader::new(std::fs::File::open(path)?);
    let mut line = String::new();
    r.read_line(&mut line)?;
    let header: Value = serde_json::from_str(line.trim_end()).map_err(|e| format_err(path, "", e.to_string()))?;
    if header["dtype"] != "f32le" {
        return Err(format_err(path, "/dtype", "expected \"f32le\""));
    }
    let shape: Vec<usize> = serde_json::from_value(header["shape"].clone()).map_err(|e| format_err(path, "/shape", e.to_string()))?;
    if shape.len() != 3 {
        return Err(format_err(path, "/shape", "expected [H, W, C]"));
    }
    let n: usize = shape.iter().product();
    let mut bytes = Vec::with_capacity(n * 4);
    r.read_to_end(&mut bytes)?;
    if bytes.len() != n * 4 {
        return Err(format_err(path, "", format!("expected {} raster bytes, found {}", n * 4, bytes.len())));
    }
    let data = bytes
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64)
        .collect();
    Tensor::new(shape, data)
}

pub fn load_scene(json_path: &Path) -> Result<Scene> {
    let text = std::fs::read_to_string(json_path)?;
    let doc: Value = serde_json::from_str(&text).map_err(|e| format_err(json_path, "", e.to_string()))?;
    let lanes = LaneSet::from_json(&doc, &json_path.display().to_string())?;
    let raster_name = doc["raster"]
        .as_str()
        .ok_or_else(|| format_err(json_path, "/raster", "expected the raster file name"))?;
    let rng_seed = doc["rng_seed"]
        .as_u64()
        .ok_or_else(|| format_err(json_path, "/rng_seed", "expected an unsigned integer"))?;
    let raster = read_raster(&raster_path(json_path, raster_name))?;
    Ok(Scene {
        lanes,
        raster,
        rng_seed,
    })
}

/// Every scene file (`*.json` with a raster sidecar) in `dir`, sorted by name.
pub fn load_corpus(dir: &Path) -> Result<Vec<Scene>> {
    let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "json"))
        .collect();
    paths.sort();
    let mut scenes = Vec::with_capacity(paths.len());
    for p in paths {
        let doc: Value = serde_json::from_str(&std::fs::read_to_string(&p)?).map_err(|e| format_err(&p, "", e.to_string()))?;
        if doc.get("raster").is_some() {
            scenes.push(load_scene(&p)?);
        }
    }
    if scenes.is_empty() {
        return Err(invalid(format!("no scene files in {}", dir.display())));
    }
    Ok(scenes)
}
