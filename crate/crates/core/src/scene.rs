//! Synthetic driving scenes: boxes, LiDAR sweeps and six-view camera features.
//!
//! Everything here is a pure function of `(seed, config)`.
//!
//! Camera views are feature maps rather than images: a ray is cast through
//! every column of every view and the nearest box it hits stamps a
//! class-coded pattern into the rows that the box spans under a pinhole
//! model. Channel layout of a view map:
//!
//! | channel | content |
//! |---|---|
//! | 0 | objectness |
//! | 1..=4 | class one-hot |
//! | 5 | inverse-range cue `ref_range / r` with multiplicative noise |
//! | 6 | apparent height `h / r` |
//! | 7 | heading cue `(1 + cos 2·yaw) / 2` |
//!
//! Channels beyond 7 carry background noise only.

use std::f64::consts::{FRAC_PI_2, PI};

use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{bev_iou, normalize_yaw, Box3D};
use crate::rng::{rng_from, split_indexed, split_seed, Rng};
use crate::tensor::Tensor;

pub const N_VIEWS: usize = 6;
/// Channels of a view map that carry object content.
pub const VIEW_CONTENT_CHANNELS: usize = 8;
pub const MAX_CLASSES: usize = 4;

/// Nominal `(w, l, h)` per class and the LiDAR intensity of its surface.
pub const CLASS_TABLE: [([f64; 3], f64); MAX_CLASSES] = [
    ([1.9, 4.5, 1.6], 0.6), // car
    ([2.5, 6.5, 3.0], 0.4), // truck
    ([0.7, 0.8, 1.8], 0.8), // pedestrian
    ([0.8, 1.8, 1.5], 0.7), // cyclist
];

pub const CLASS_NAMES: [&str; MAX_CLASSES] = ["car", "truck", "pedestrian", "cyclist"];

/// LiDAR returns: `(x, y, z, intensity)` in `f32`, plus the index of the box
/// each point lies in (if any).
#[derive(Clone, Debug, Default, PartialEq)]
pub struct PointCloud {
    pub points: Vec<[f32; 4]>,
    pub box_tags: Vec<Option<u32>>,
}

impl PointCloud {
    pub fn new(points: Vec<[f32; 4]>) -> Self {
        let n = points.len();
        PointCloud {
            points,
            box_tags: vec![None; n],
        }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Keeps the points for which `keep(index)` holds, preserving order.
    pub fn retain_indices(&self, mut keep: impl FnMut(usize) -> bool) -> PointCloud {
        let mut out = PointCloud::default();
        for i in 0..self.len() {
            if keep(i) {
                out.points.push(self.points[i]);
                out.box_tags.push(self.box_tags[i]);
            }
        }
        out
    }

    /// Recomputes box tags with a closed containment test.
    pub fn retag(&mut self, boxes: &[Box3D]) {
        self.box_tags = self.points.iter().map(|p| tag_point(p, boxes)).collect();
    }
}

fn tag_point(p: &[f32; 4], boxes: &[Box3D]) -> Option<u32> {
    let q = [p[0] as f64, p[1] as f64, p[2] as f64];
    boxes.iter().position(|b| b.contains(q, 0.0)).map(|i| i as u32)
}

/// Camera ring geometry: six pinhole views with 60° horizontal field of view.
/// View `k` looks along azimuth `k·60°`; view 0 is the front camera.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ViewGeometry {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub camera_height_m: f64,
    /// Range at which the inverse-range cue equals 1.
    pub reference_range_m: f64,
}

impl Default for ViewGeometry {
    fn default() -> Self {
        ViewGeometry {
            channels: VIEW_CONTENT_CHANNELS,
            height: 8,
            width: 32,
            camera_height_m: 1.5,
            reference_range_m: 3.0,
        }
    }
}

pub const FRONT_VIEW: usize = 0;

impl ViewGeometry {
    pub fn validate(&self) -> Result<()> {
        if self.channels < VIEW_CONTENT_CHANNELS || self.height < 1 || self.width < 1 {
            return Err(Error::Config(format!(
                "view geometry needs >= {VIEW_CONTENT_CHANNELS} channels and positive extents, got {}x{}x{}",
                self.channels, self.height, self.width
            )));
        }
        if !(self.camera_height_m > 0.0 && self.reference_range_m > 0.0) {
            return Err(Error::Config(
                "camera height and reference range must be positive".into(),
            ));
        }
        Ok(())
    }

    pub fn sector_width() -> f64 {
        PI / 3.0
    }

    pub fn view_center(view: usize) -> f64 {
        normalize_yaw(view as f64 * Self::sector_width())
    }

    /// View whose sector `[center - 30°, center + 30°)` contains `azimuth`.
    pub fn view_of_azimuth(azimuth: f64) -> usize {
        let shifted = (azimuth + Self::sector_width() / 2.0).rem_euclid(2.0 * PI);
        ((shifted / Self::sector_width()).floor() as usize) % N_VIEWS
    }

    /// Horizontal focal length in pixels.
    pub fn focal(&self) -> f64 {
        (self.width as f64 / 2.0) / (Self::sector_width() / 2.0).tan()
    }

    /// Continuous image column of a ray at `relative` azimuth from the view axis.
    pub fn column_coord(&self, relative: f64) -> f64 {
        self.width as f64 / 2.0 - self.focal() * relative.tan()
    }

    /// Column index hit by a world azimuth inside `view`'s sector.
    pub fn column_of(&self, view: usize, azimuth: f64) -> usize {
        let rel = normalize_yaw(azimuth - Self::view_center(view));
        let u = self.column_coord(rel).floor();
        u.clamp(0.0, self.width as f64 - 1.0) as usize
    }

    /// World azimuth of the ray through the center of `column`.
    pub fn column_azimuth(&self, view: usize, column: usize) -> f64 {
        let offset = self.width as f64 / 2.0 - (column as f64 + 0.5);
        normalize_yaw(Self::view_center(view) + (offset / self.focal()).atan())
    }

    /// Image row of a point at height `z` and ground range `r`.
    pub fn row_coord(&self, z: f64, r: f64) -> f64 {
        self.height as f64 / 2.0 + self.focal() * (self.camera_height_m - z) / r
    }

    pub fn view_shape(&self) -> [usize; 3] {
        [self.channels, self.height, self.width]
    }
}

/// Parameters of the synthetic world.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SceneConfig {
    /// Side of the square window around the ego vehicle, meters.
    pub extent_m: f64,
    pub class_count: usize,
    pub min_objects: usize,
    pub max_objects: usize,
    pub n_points: usize,
    pub noise_sigma_m: f64,
    pub max_speed: f64,
    pub dt: f64,
    pub steps: usize,
    /// Objects keep at least this range from the ego vehicle.
    pub min_range_m: f64,
    /// Objects stay within `extent_m / 2 - edge_margin_m` of the ego vehicle.
    pub edge_margin_m: f64,
    pub background_noise: f64,
    pub depth_cue_noise: f64,
    pub view: ViewGeometry,
}

impl Default for SceneConfig {
    fn default() -> Self {
        SceneConfig {
            extent_m: 24.0,
            class_count: 2,
            min_objects: 3,
            max_objects: 6,
            n_points: 2000,
            noise_sigma_m: 0.02,
            max_speed: 1.5,
            dt: 0.5,
            steps: 3,
            min_range_m: 3.0,
            edge_margin_m: 2.5,
            background_noise: 0.05,
            depth_cue_noise: 0.08,
            view: ViewGeometry::default(),
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.extent_m > 0.0) {
            return Err(Error::Config("scene extent must be positive".into()));
        }
        if self.class_count == 0 || self.class_count > MAX_CLASSES {
            return Err(Error::Config(format!(
                "class_count must be in 1..={MAX_CLASSES}, got {}",
                self.class_count
            )));
        }
        if self.min_objects > self.max_objects {
            return Err(Error::Config("min_objects exceeds max_objects".into()));
        }
        if self.steps == 0 {
            return Err(Error::Config("steps must be at least 1".into()));
        }
        if !(self.dt > 0.0) || self.noise_sigma_m < 0.0 || self.max_speed < 0.0 {
            return Err(Error::Config(
                "dt must be positive; noise and speed non-negative".into(),
            ));
        }
        if self.placement_radius() <= self.min_range_m {
            return Err(Error::Config(format!(
                "no room to place objects: placement radius {} <= min range {}",
                self.placement_radius(),
                self.min_range_m
            )));
        }
        self.view.validate()
    }

    pub fn placement_radius(&self) -> f64 {
        self.extent_m / 2.0 - self.edge_margin_m
    }
}

/// One timestep.
#[derive(Clone, Debug, PartialEq)]
pub struct Frame {
    pub t: usize,
    pub cloud: PointCloud,
    /// Six `C×H×W` view maps.
    pub views: Vec<Tensor>,
    pub gt_boxes: Vec<Box3D>,
}

/// `T` frames in time order. `ego_motion[t]` is the ego displacement
/// `(dx, dy, dyaw)` from frame `t` to `t + 1`.
#[derive(Clone, Debug, PartialEq)]
pub struct Sequence {
    pub frames: Vec<Frame>,
    pub ego_motion: Vec<[f64; 3]>,
}

impl Sequence {
    pub fn current(&self) -> &Frame {
        self.frames.last().expect("sequence has at least one frame")
    }

    pub fn steps(&self) -> usize {
        self.frames.len()
    }
}

/// How the world evolves between frames.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MotionModel {
    pub dt: f64,
    /// Ego velocity in its own frame; the world shifts by the opposite.
    pub ego_velocity: [f64; 2],
}

impl MotionModel {
    pub fn static_ego(dt: f64) -> Self {
        MotionModel {
            dt,
            ego_velocity: [0.0, 0.0],
        }
    }
}

fn gap_free(a: &Box3D, b: &Box3D, margin: f64) -> Result<bool> {
    let grow = |x: &Box3D| {
        let mut g = x.clone();
        g.size[0] += 2.0 * margin;
        g.size[1] += 2.0 * margin;
        g
    };
    Ok(bev_iou(&grow(a), &grow(b))? == 0.0)
}

/// Places `n_objects` non-overlapping boxes around the ego vehicle.
///
/// Headings are lane-aligned (`0` or `π/2`) with ±0.15 rad jitter; objects
/// move along their lane in either direction.
pub fn generate_scene(seed: u64, n_objects: usize, extent_m: f64, class_count: usize) -> Result<Vec<Box3D>> {
    let cfg = SceneConfig {
        extent_m,
        class_count,
        ..SceneConfig::default()
    };
    generate_scene_with(seed, n_objects, &cfg)
}

pub fn generate_scene_with(seed: u64, n_objects: usize, cfg: &SceneConfig) -> Result<Vec<Box3D>> {
    if !(cfg.extent_m > 0.0) {
        return Err(Error::Argument("scene extent must be positive".into()));
    }
    if cfg.class_count == 0 || cfg.class_count > MAX_CLASSES {
        return Err(Error::Argument(format!("class_count must be in 1..={MAX_CLASSES}")));
    }
    let mut rng = rng_from(seed);
    let radius = cfg.placement_radius();
    let mut boxes: Vec<Box3D> = Vec::with_capacity(n_objects);
    const ATTEMPTS: usize = 2000;
    for _ in 0..n_objects {
        let mut placed = false;
        for _ in 0..ATTEMPTS {
            let class_id = rng.random_range(0..cfg.class_count);
            let (nominal, _) = CLASS_TABLE[class_id];
            let size = nominal.map(|s| s * rng.random_range(0.95..1.05));
            let r = rng.random_range(cfg.min_range_m..radius);
            let az = rng.random_range(-PI..PI);
            let lane = if rng.random_bool(0.5) { 0.0 } else { FRAC_PI_2 };
            let yaw = normalize_yaw(lane + rng.random_range(-0.15..0.15));
            let speed = rng.random_range(0.0..=cfg.max_speed) * if rng.random_bool(0.5) { 1.0 } else { -1.0 };
            let candidate = Box3D {
                center: [r * az.cos(), r * az.sin(), size[2] / 2.0],
                size,
                yaw,
                class_id,
                velocity: [speed * yaw.cos(), speed * yaw.sin()],
            };
            let mut ok = true;
            for b in &boxes {
                if !gap_free(b, &candidate, 0.3)? {
                    ok = false;
                    break;
                }
            }
            if ok {
                boxes.push(candidate);
                placed = true;
                break;
            }
        }
        if !placed {
            return Err(Error::Capacity(format!(
                "could not place object {} of {n_objects} within {ATTEMPTS} attempts",
                boxes.len() + 1
            )));
        }
    }
    Ok(boxes)
}

/// Samples exactly `n_points` returns: 30% on a ground disc, the rest on the
/// visible faces (sides and top) of the boxes, split evenly. Gaussian jitter
/// of `noise_sigma_m` is applied to every coordinate.
pub fn sample_lidar(boxes: &[Box3D], n_points: usize, noise_sigma_m: f64, seed: u64) -> PointCloud {
    sample_lidar_in(boxes, n_points, noise_sigma_m, seed, 12.0)
}

pub fn sample_lidar_in(
    boxes: &[Box3D],
    n_points: usize,
    noise_sigma_m: f64,
    seed: u64,
    ground_radius: f64,
) -> PointCloud {
    let mut rng = rng_from(seed);
    let jitter = Normal::new(0.0, noise_sigma_m.max(0.0)).expect("valid sigma");
    let noise = |rng: &mut Rng| {
        if noise_sigma_m > 0.0 {
            jitter.sample(rng)
        } else {
            0.0
        }
    };
    let n_ground = if boxes.is_empty() {
        n_points
    } else {
        (n_points as f64 * 0.3).round() as usize
    };
    let n_object = n_points - n_ground;
    let mut points = Vec::with_capacity(n_points);

    for _ in 0..n_ground {
        let r = ground_radius * rng.random::<f64>().sqrt();
        let a = rng.random_range(-PI..PI);
        let p = [
            r * a.cos() + noise(&mut rng),
            r * a.sin() + noise(&mut rng),
            noise(&mut rng),
            (0.1 + 0.05 * rng.random::<f64>()).clamp(0.0, 1.0),
        ];
        points.push(p.map(|v| v as f32));
    }

    for i in 0..n_object {
        let b = &boxes[i % boxes.len()];
        let (w, l, h) = (b.width(), b.length(), b.height());
        // faces: +x, -x (area l... no: w*h), +y, -y (l*h), top (w*l)
        let areas = [w * h, w * h, l * h, l * h, w * l];
        let total: f64 = areas.iter().sum();
        let mut pick = rng.random::<f64>() * total;
        let mut face = 4;
        for (f, a) in areas.iter().enumerate() {
            if pick < *a {
                face = f;
                break;
            }
            pick -= a;
        }
        let (u, v) = (rng.random::<f64>() - 0.5, rng.random::<f64>() - 0.5);
        let (lx, ly, lz) = match face {
            0 => (l / 2.0, u * w, v * h),
            1 => (-l / 2.0, u * w, v * h),
            2 => (u * l, w / 2.0, v * h),
            3 => (u * l, -w / 2.0, v * h),
            _ => (u * l, v * w, h / 2.0),
        };
        let (s, c) = b.yaw.sin_cos();
        let x = b.center[0] + c * lx - s * ly + noise(&mut rng);
        let y = b.center[1] + s * lx + c * ly + noise(&mut rng);
        let z = b.center[2] + lz + noise(&mut rng);
        let base = CLASS_TABLE[b.class_id.min(MAX_CLASSES - 1)].1;
        let intensity = (base + 0.05 * (rng.random::<f64>() - 0.5)).clamp(0.0, 1.0);
        points.push([x as f32, y as f32, z as f32, intensity as f32]);
    }

    let mut cloud = PointCloud::new(points);
    cloud.retag(boxes);
    cloud
}

/// Distance along a ray from the origin at `azimuth` to the first hit on the
/// box footprint, if any.
fn ray_hit(azimuth: f64, b: &Box3D) -> Option<f64> {
    let (dy, dx) = azimuth.sin_cos();
    let (s, c) = b.yaw.sin_cos();
    // ray in box frame
    let ox = -(c * b.center[0] + s * b.center[1]);
    let oy = -(-s * b.center[0] + c * b.center[1]);
    let rx = c * dx + s * dy;
    let ry = -s * dx + c * dy;
    let (hl, hw) = (b.length() / 2.0, b.width() / 2.0);
    let mut t0 = 0.0f64;
    let mut t1 = f64::INFINITY;
    for (o, r, half) in [(ox, rx, hl), (oy, ry, hw)] {
        if r.abs() < 1e-12 {
            if o.abs() > half {
                return None;
            }
        } else {
            let (a, bb) = ((-half - o) / r, (half - o) / r);
            let (lo, hi) = if a < bb { (a, bb) } else { (bb, a) };
            t0 = t0.max(lo);
            t1 = t1.min(hi);
            if t0 > t1 {
                return None;
            }
        }
    }
    Some(t0)
}

/// One column of a view covered by a box: rows `rows.0..rows.1` show box
/// `box_index` at ground range `range`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ColumnImprint {
    pub box_index: usize,
    pub column: usize,
    pub rows: (usize, usize),
    pub range: f64,
}

/// Visible imprints per view: each column shows the nearest box its ray hits.
pub fn imprints(boxes: &[Box3D], geometry: &ViewGeometry) -> Vec<Vec<ColumnImprint>> {
    let h = geometry.height;
    (0..N_VIEWS)
        .map(|view| {
            (0..geometry.width)
                .filter_map(|col| {
                    let az = geometry.column_azimuth(view, col);
                    let (range, idx) = boxes
                        .iter()
                        .enumerate()
                        .filter_map(|(i, b)| ray_hit(az, b).map(|r| (r, i)))
                        .filter(|(r, _)| *r > 0.0)
                        .min_by(|a, b| a.0.total_cmp(&b.0))?;
                    let b = &boxes[idx];
                    let top = geometry.row_coord(b.height(), range).floor().clamp(0.0, h as f64);
                    let bottom = geometry.row_coord(0.0, range).ceil().clamp(0.0, h as f64);
                    let rows = (top as usize, (bottom as usize).max(top as usize));
                    (rows.1 > rows.0).then_some(ColumnImprint {
                        box_index: idx,
                        column: col,
                        rows,
                        range,
                    })
                })
                .collect()
        })
        .collect()
}

/// Noise levels of the synthetic camera features.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ViewNoise {
    /// Standard deviation of the background.
    pub background: f64,
    /// Relative standard deviation of the per-object inverse-range cue.
    pub depth_cue: f64,
}

impl ViewNoise {
    pub const NONE: ViewNoise = ViewNoise {
        background: 0.0,
        depth_cue: 0.0,
    };
}

/// Rasterizes the six view feature maps for a set of boxes.
pub fn render_views(boxes: &[Box3D], geometry: &ViewGeometry, noise: ViewNoise, seed: u64) -> Vec<Tensor> {
    let [c, h, w] = geometry.view_shape();
    let mut rng = rng_from(seed);
    let bg = Normal::new(0.0, noise.background.max(0.0)).expect("valid sigma");
    let depth_jitter: Vec<f64> = boxes
        .iter()
        .map(|_| {
            let n: f64 = rng.sample(rand_distr::StandardNormal);
            (1.0 + noise.depth_cue * n).max(0.2)
        })
        .collect();
    let per_view = imprints(boxes, geometry);
    let mut views = Vec::with_capacity(N_VIEWS);
    for marks in per_view {
        let mut data = vec![0.0; c * h * w];
        if noise.background > 0.0 {
            for v in data.iter_mut() {
                *v = bg.sample(&mut rng);
            }
        }
        for m in marks {
            let b = &boxes[m.box_index];
            for row in m.rows.0..m.rows.1 {
                let at = |ch: usize| ch * h * w + row * w + m.column;
                data[at(0)] = 1.0;
                data[at(1 + b.class_id)] = 1.0;
                data[at(5)] = geometry.reference_range_m / m.range * depth_jitter[m.box_index];
                data[at(6)] = b.height() / m.range;
                data[at(7)] = 0.5 + 0.5 * (2.0 * b.yaw).cos();
            }
        }
        views.push(Tensor::from_parts(vec![c, h, w], data));
    }
    views
}

/// Advances a box set by one step of `model`.
pub fn advance(boxes: &[Box3D], model: &MotionModel) -> Vec<Box3D> {
    boxes
        .iter()
        .map(|b| {
            let mut n = b.clone();
            n.center[0] += (b.velocity[0] - model.ego_velocity[0]) * model.dt;
            n.center[1] += (b.velocity[1] - model.ego_velocity[1]) * model.dt;
            n
        })
        .collect()
}

/// Per-frame seed labels, shared by [`simulate_sequence`] and dataset loading.
pub fn frame_seeds(seed: u64, t: usize) -> (u64, u64) {
    (split_indexed(seed, "lidar", t), split_indexed(seed, "views", t))
}

/// Builds one frame from its boxes.
pub fn make_frame(t: usize, boxes: Vec<Box3D>, seed: u64, cfg: &SceneConfig) -> Frame {
    let (lidar_seed, view_seed) = frame_seeds(seed, t);
    let cloud = sample_lidar_in(&boxes, cfg.n_points, cfg.noise_sigma_m, lidar_seed, cfg.extent_m / 2.0);
    let noise = ViewNoise {
        background: cfg.background_noise,
        depth_cue: cfg.depth_cue_noise,
    };
    let views = render_views(&boxes, &cfg.view, noise, view_seed);
    Frame {
        t,
        cloud,
        views,
        gt_boxes: boxes,
    }
}

/// Generates a `T`-step sequence; the object count is drawn from
/// `[min_objects, max_objects]` unless given.
pub fn simulate_sequence(
    seed: u64,
    steps: usize,
    n_objects: Option<usize>,
    motion: &MotionModel,
    cfg: &SceneConfig,
) -> Result<Sequence> {
    if steps == 0 {
        return Err(Error::Argument("a sequence needs at least one step".into()));
    }
    let n = match n_objects {
        Some(n) => n,
        None => {
            let mut rng = rng_from(split_seed(seed, "count"));
            rng.random_range(cfg.min_objects..=cfg.max_objects)
        }
    };
    let mut boxes = generate_scene_with(split_seed(seed, "scene"), n, cfg)?;
    let mut frames = Vec::with_capacity(steps);
    let mut ego_motion = Vec::with_capacity(steps.saturating_sub(1));
    for t in 0..steps {
        if t > 0 {
            boxes = advance(&boxes, motion);
            ego_motion.push([
                motion.ego_velocity[0] * motion.dt,
                motion.ego_velocity[1] * motion.dt,
                0.0,
            ]);
        }
        frames.push(make_frame(t, boxes.clone(), seed, cfg));
    }
    Ok(Sequence { frames, ego_motion })
}

/// Shuffled index permutation, used by corruption protocols.
pub(crate) fn shuffled(n: usize, rng: &mut Rng) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(rng);
    idx
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_scene() {
        assert!(generate_scene(1, 0, 40.0, 3).unwrap().is_empty());
    }

    #[test]
    fn scene_is_deterministic_and_separated() {
        let a = generate_scene(7, 5, 40.0, 3).unwrap();
        let b = generate_scene(7, 5, 40.0, 3).unwrap();
        assert_eq!(a, b);
        for i in 0..a.len() {
            for j in i + 1..a.len() {
                assert!(bev_iou(&a[i], &a[j]).unwrap() < 0.01);
            }
        }
    }

    #[test]
    fn overpacked_scene_is_capacity_error() {
        assert!(matches!(generate_scene(3, 200, 24.0, 2), Err(Error::Capacity(_))));
    }

    #[test]
    fn lidar_counts_and_determinism() {
        let boxes = generate_scene(2, 4, 24.0, 2).unwrap();
        assert!(sample_lidar(&boxes, 0, 0.02, 1).is_empty());
        let a = sample_lidar(&boxes, 500, 0.02, 9);
        assert_eq!(a.len(), 500);
        assert_eq!(a, sample_lidar(&boxes, 500, 0.02, 9));
    }

    #[test]
    fn noiseless_surface_points_lie_on_boundary() {
        let boxes = generate_scene(4, 3, 24.0, 2).unwrap();
        let cloud = sample_lidar(&boxes, 600, 0.0, 5);
        let n_ground = 180;
        for (i, p) in cloud.points.iter().enumerate().skip(n_ground) {
            let b = &boxes[(i - n_ground) % boxes.len()];
            let (lx, ly) = b.to_local(p[0] as f64, p[1] as f64);
            let dz = p[2] as f64 - b.center[2];
            let gaps = [
                (lx.abs() - b.length() / 2.0).abs(),
                (ly.abs() - b.width() / 2.0).abs(),
                (dz - b.height() / 2.0).abs(),
            ];
            let inside = lx.abs() <= b.length() / 2.0 + 1e-5
                && ly.abs() <= b.width() / 2.0 + 1e-5
                && dz.abs() <= b.height() / 2.0 + 1e-5;
            assert!(inside, "point {i} left its box");
            assert!(gaps.iter().any(|g| *g < 1e-5), "point {i} not on a face: {gaps:?}");
        }
    }

    #[test]
    fn sectors_partition_the_circle() {
        for i in 0..3600 {
            let az = -PI + i as f64 * (2.0 * PI / 3600.0);
            let v = ViewGeometry::view_of_azimuth(az);
            let rel = normalize_yaw(az - ViewGeometry::view_center(v));
            assert!((-PI / 6.0 - 1e-12..PI / 6.0).contains(&rel), "az {az} rel {rel}");
        }
    }

    #[test]
    fn empty_scene_views_are_background_only() {
        let g = ViewGeometry::default();
        let views = render_views(&[], &g, ViewNoise::NONE, 3);
        assert_eq!(views.len(), N_VIEWS);
        assert!(views.iter().all(|v| v.data().iter().all(|&x| x == 0.0)));
    }

    #[test]
    fn box_in_one_sector_marks_only_that_view() {
        let g = ViewGeometry::default();
        let az = ViewGeometry::view_center(2) + 0.1;
        let b = Box3D {
            center: [7.0 * az.cos(), 7.0 * az.sin(), 0.8],
            size: [1.9, 4.5, 1.6],
            yaw: 0.0,
            class_id: 1,
            velocity: [0.0, 0.0],
        };
        let views = render_views(&[b], &g, ViewNoise::NONE, 3);
        let objectness = |v: &Tensor| v.data()[..g.height * g.width].iter().sum::<f64>();
        for (k, v) in views.iter().enumerate() {
            assert_eq!(objectness(v) > 0.0, k == 2, "view {k}");
        }
    }

    #[test]
    fn imprint_center_column_matches_pinhole() {
        let g = ViewGeometry::default();
        for (view, offset) in [(0, 0.2), (3, -0.35), (5, 0.05)] {
            let az = ViewGeometry::view_center(view) + offset;
            let b = Box3D {
                center: [8.0 * az.cos(), 8.0 * az.sin(), 0.8],
                size: [0.7, 0.8, 1.8],
                yaw: 0.0,
                class_id: 2,
                velocity: [0.0, 0.0],
            };
            // oracle: u = W/2 - f·tan(φ) with f = (W/2)/tan(30°)
            let f = (g.width as f64 / 2.0) / (PI / 6.0).tan();
            let expect = (g.width as f64 / 2.0 - f * offset.tan()).floor() as usize;
            let views = render_views(&[b], &g, ViewNoise::NONE, 1);
            let cols: Vec<usize> = (0..g.width)
                .filter(|&c| (0..g.height).any(|r| views[view].data()[r * g.width + c] > 0.0))
                .collect();
            assert!(!cols.is_empty());
            let mid = (cols[0] + cols[cols.len() - 1]) / 2;
            assert!(mid.abs_diff(expect) <= 1, "view {view}: {cols:?} vs {expect}");
            assert!(cols.contains(&expect));
        }
    }

    #[test]
    fn single_step_sequence_matches_direct_generation() {
        let cfg = SceneConfig::default();
        let seq = simulate_sequence(11, 1, Some(3), &MotionModel::static_ego(0.5), &cfg).unwrap();
        let boxes = generate_scene_with(split_seed(11, "scene"), 3, &cfg).unwrap();
        assert_eq!(seq.frames.len(), 1);
        assert_eq!(seq.frames[0], make_frame(0, boxes, 11, &cfg));
    }

    #[test]
    fn constant_velocity_kinematics() {
        let b = Box3D {
            center: [4.0, 1.0, 0.8],
            size: [1.9, 4.5, 1.6],
            yaw: 0.0,
            class_id: 0,
            velocity: [1.0, 0.0],
        };
        let m = MotionModel::static_ego(0.5);
        let s1 = advance(std::slice::from_ref(&b), &m);
        let s2 = advance(&s1, &m);
        assert_eq!(s1[0].center[..2], [4.5, 1.0]);
        assert_eq!(s2[0].center[..2], [5.0, 1.0]);
    }

    #[test]
    fn zero_velocity_frames_are_static() {
        let mut cfg = SceneConfig::default();
        cfg.max_speed = 0.0;
        let seq = simulate_sequence(5, 3, Some(4), &MotionModel::static_ego(0.5), &cfg).unwrap();
        assert!(seq.frames.iter().all(|f| f.gt_boxes == seq.frames[0].gt_boxes));
    }
}
