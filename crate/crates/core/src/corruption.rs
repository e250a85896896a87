//! Sensor malfunction protocols applied to frames.
//!
//! LiDAR corruptions: angular field-of-view clipping and point drops inside
//! object boxes. Camera corruptions: losing the front view, keeping only the
//! front view, and masking object imprints in the view feature maps.

use std::collections::HashSet;
use std::f64::consts::{FRAC_PI_2, FRAC_PI_3, PI};
use std::path::Path;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::Box3D;
use crate::rng::{rng_from, split_indexed, split_seed};
use crate::scene::{imprints, shuffled, Frame, PointCloud, Sequence, ViewGeometry, FRONT_VIEW, N_VIEWS};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Modality {
    Lidar,
    Camera,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CameraFailure {
    MissingFront,
    PreserveFrontOnly,
}

impl std::str::FromStr for CameraFailure {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "missing_front" => Ok(CameraFailure::MissingFront),
            "preserve_front_only" => Ok(CameraFailure::PreserveFrontOnly),
            other => Err(Error::Argument(format!("unknown camera failure mode `{other}`"))),
        }
    }
}

/// What a scenario does to the sensors.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum CorruptionKind {
    None,
    LimitedFov { theta_min: f64, theta_max: f64 },
    ObjectDrop { rate: f64 },
    CameraMissingFront,
    CameraPreserveFrontOnly,
    ObjectOcclusion { rate: f64 },
}

impl CorruptionKind {
    pub fn tag(&self) -> &'static str {
        match self {
            CorruptionKind::None => "none",
            CorruptionKind::LimitedFov { .. } => "limited_fov",
            CorruptionKind::ObjectDrop { .. } => "object_drop",
            CorruptionKind::CameraMissingFront => "camera_missing_front",
            CorruptionKind::CameraPreserveFrontOnly => "camera_preserve_front_only",
            CorruptionKind::ObjectOcclusion { .. } => "object_occlusion",
        }
    }

    /// The sensor this corruption degrades, if any.
    pub fn modality(&self) -> Option<Modality> {
        match self {
            CorruptionKind::None => None,
            CorruptionKind::LimitedFov { .. } | CorruptionKind::ObjectDrop { .. } => Some(Modality::Lidar),
            _ => Some(Modality::Camera),
        }
    }
}

/// One seeded malfunction scenario.
#[derive(Clone, Debug, PartialEq)]
pub struct CorruptionSpec {
    pub kind: CorruptionKind,
    pub seed: u64,
    /// Drop/occlude each point or cell independently instead of an exact count.
    pub bernoulli: bool,
}

impl CorruptionSpec {
    pub fn new(kind: CorruptionKind, seed: u64) -> Result<Self> {
        let spec = CorruptionSpec {
            kind,
            seed,
            bernoulli: false,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn clean() -> Self {
        CorruptionSpec {
            kind: CorruptionKind::None,
            seed: 0,
            bernoulli: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self.kind {
            CorruptionKind::LimitedFov { theta_min, theta_max } => {
                if !(-PI..=PI).contains(&theta_min) || !(-PI..=PI).contains(&theta_max) {
                    return Err(Error::Argument("fov angles must lie in [-pi, pi]".into()));
                }
                if theta_min > theta_max {
                    return Err(Error::Argument(format!(
                        "fov theta_min {theta_min} exceeds theta_max {theta_max}"
                    )));
                }
            }
            CorruptionKind::ObjectDrop { rate } | CorruptionKind::ObjectOcclusion { rate }
                if !(0.0..=1.0).contains(&rate) =>
            {
                return Err(Error::Argument(format!("rate {rate} outside [0, 1]")));
            }
            _ => {}
        }
        Ok(())
    }

    /// Fraction of the sensor's signal the scenario removes, in `[0, 1]`.
    pub fn severity(&self) -> f64 {
        match self.kind {
            CorruptionKind::None => 0.0,
            CorruptionKind::LimitedFov { theta_min, theta_max } => {
                1.0 - ((theta_max - theta_min) / (2.0 * PI)).clamp(0.0, 1.0)
            }
            CorruptionKind::ObjectDrop { rate } | CorruptionKind::ObjectOcclusion { rate } => rate,
            CorruptionKind::CameraMissingFront => 1.0 / N_VIEWS as f64,
            CorruptionKind::CameraPreserveFrontOnly => (N_VIEWS - 1) as f64 / N_VIEWS as f64,
        }
    }

    /// Corrupts one frame. `t` separates the random streams of frames.
    pub fn apply_frame(&self, frame: &Frame, geometry: &ViewGeometry) -> Result<Frame> {
        let seed = split_indexed(self.seed, "frame", frame.t);
        let mut out = frame.clone();
        match self.kind {
            CorruptionKind::None => {}
            CorruptionKind::LimitedFov { theta_min, theta_max } => {
                out.cloud = limit_fov(&frame.cloud, theta_min, theta_max)?;
            }
            CorruptionKind::ObjectDrop { rate } => {
                out.cloud = drop_points(&frame.cloud, &frame.gt_boxes, rate, seed, self.bernoulli)?;
            }
            CorruptionKind::CameraMissingFront => {
                out.views = camera_failure(&frame.views, CameraFailure::MissingFront);
            }
            CorruptionKind::CameraPreserveFrontOnly => {
                out.views = camera_failure(&frame.views, CameraFailure::PreserveFrontOnly);
            }
            CorruptionKind::ObjectOcclusion { rate } => {
                out.views = occlude(&frame.views, &frame.gt_boxes, geometry, rate, seed, self.bernoulli)?;
            }
        }
        Ok(out)
    }

    /// Corrupts every frame of a sequence; a failing sensor stays failed.
    pub fn apply(&self, seq: &Sequence, geometry: &ViewGeometry) -> Result<Sequence> {
        Ok(Sequence {
            frames: seq
                .frames
                .iter()
                .map(|f| self.apply_frame(f, geometry))
                .collect::<Result<_>>()?,
            ego_motion: seq.ego_motion.clone(),
        })
    }
}

/// Keeps the points whose azimuth `atan2(y, x)` lies in `[theta_min, theta_max]`.
/// A zero-width interval keeps nothing.
pub fn limit_fov(cloud: &PointCloud, theta_min: f64, theta_max: f64) -> Result<PointCloud> {
    if theta_min > theta_max {
        return Err(Error::Argument(format!(
            "fov theta_min {theta_min} exceeds theta_max {theta_max}"
        )));
    }
    if theta_min == theta_max {
        return Ok(PointCloud::default());
    }
    Ok(cloud.retain_indices(|i| {
        let p = cloud.points[i];
        let az = (p[1] as f64).atan2(p[0] as f64);
        (theta_min..=theta_max).contains(&az)
    }))
}

/// Removes exactly `⌊rate·n_b⌋` of the `n_b` points inside each box `b`.
pub fn drop_object_points(cloud: &PointCloud, boxes: &[Box3D], rate: f64, seed: u64) -> Result<PointCloud> {
    drop_points(cloud, boxes, rate, seed, false)
}

/// Per-box interior point indices; a point belongs to the first box containing it.
fn interior_points(cloud: &PointCloud, boxes: &[Box3D]) -> Vec<Vec<usize>> {
    let mut per_box = vec![Vec::new(); boxes.len()];
    for (i, p) in cloud.points.iter().enumerate() {
        let q = [p[0] as f64, p[1] as f64, p[2] as f64];
        if let Some(b) = boxes.iter().position(|b| b.contains(q, 0.0)) {
            per_box[b].push(i);
        }
    }
    per_box
}

fn drop_points(cloud: &PointCloud, boxes: &[Box3D], rate: f64, seed: u64, bernoulli: bool) -> Result<PointCloud> {
    if !(0.0..=1.0).contains(&rate) {
        return Err(Error::Argument(format!("drop rate {rate} outside [0, 1]")));
    }
    let mut dropped = HashSet::new();
    for (b, members) in interior_points(cloud, boxes).into_iter().enumerate() {
        let mut rng = rng_from(split_indexed(seed, "drop", b));
        if bernoulli {
            dropped.extend(members.into_iter().filter(|_| rng.random_bool(rate)));
        } else {
            let k = (rate * members.len() as f64).floor() as usize;
            let order = shuffled(members.len(), &mut rng);
            dropped.extend(order[..k].iter().map(|&o| members[o]));
        }
    }
    Ok(cloud.retain_indices(|i| !dropped.contains(&i)))
}

/// Zeroes the front view or every view but the front one.
pub fn camera_failure(views: &[Tensor], mode: CameraFailure) -> Vec<Tensor> {
    views
        .iter()
        .enumerate()
        .map(|(k, v)| {
            let blank = match mode {
                CameraFailure::MissingFront => k == FRONT_VIEW,
                CameraFailure::PreserveFrontOnly => k != FRONT_VIEW,
            };
            if blank {
                Tensor::zeros(v.shape())
            } else {
                v.clone()
            }
        })
        .collect()
}

/// Zeroes exactly `⌊rate·n⌋` of the `n` imprint cells (all channels) of
/// every box in every view.
pub fn occlude_objects(
    views: &[Tensor],
    boxes: &[Box3D],
    geometry: &ViewGeometry,
    rate: f64,
    seed: u64,
) -> Result<Vec<Tensor>> {
    occlude(views, boxes, geometry, rate, seed, false)
}

/// `(row, col)` imprint cells of each box in each view.
pub fn footprints(boxes: &[Box3D], geometry: &ViewGeometry) -> Vec<Vec<Vec<(usize, usize)>>> {
    imprints(boxes, geometry)
        .into_iter()
        .map(|marks| {
            let mut per_box = vec![Vec::new(); boxes.len()];
            for m in marks {
                for row in m.rows.0..m.rows.1 {
                    per_box[m.box_index].push((row, m.column));
                }
            }
            per_box
        })
        .collect()
}

fn occlude(
    views: &[Tensor],
    boxes: &[Box3D],
    geometry: &ViewGeometry,
    rate: f64,
    seed: u64,
    bernoulli: bool,
) -> Result<Vec<Tensor>> {
    if !(0.0..=1.0).contains(&rate) {
        return Err(Error::Argument(format!("occlusion rate {rate} outside [0, 1]")));
    }
    let [c, h, w] = geometry.view_shape();
    let mut out = views.to_vec();
    for (k, per_box) in footprints(boxes, geometry).into_iter().enumerate() {
        let data = out[k].data_mut();
        for (b, cells) in per_box.into_iter().enumerate() {
            let mut rng = rng_from(split_seed(seed, &format!("occlude/{k}/{b}")));
            let chosen: Vec<(usize, usize)> = if bernoulli {
                cells.into_iter().filter(|_| rng.random_bool(rate)).collect()
            } else {
                let n = (rate * cells.len() as f64).floor() as usize;
                shuffled(cells.len(), &mut rng)[..n].iter().map(|&i| cells[i]).collect()
            };
            for (row, col) in chosen {
                for ch in 0..c {
                    data[(ch * h + row) * w + col] = 0.0;
                }
            }
        }
    }
    Ok(out)
}

/// A named scenario.
#[derive(Clone, Debug, PartialEq)]
pub struct Scenario {
    pub name: String,
    pub spec: CorruptionSpec,
}

/// Ordered scenarios with unique names.
#[derive(Clone, Debug, PartialEq)]
pub struct ScenarioTable {
    pub scenarios: Vec<Scenario>,
}

/// On-disk form of one table entry.
#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ScenarioEntry {
    name: String,
    kind: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    theta_min: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    theta_max: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    rate: Option<f64>,
    #[serde(default)]
    seed: u64,
    #[serde(default)]
    bernoulli: bool,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ScenarioFile {
    scenario: Vec<ScenarioEntry>,
}

impl ScenarioTable {
    pub fn new(scenarios: Vec<Scenario>) -> Result<Self> {
        let mut seen = HashSet::new();
        for s in &scenarios {
            if !seen.insert(s.name.as_str()) {
                return Err(Error::Config(format!("duplicate scenario name `{}`", s.name)));
            }
            s.spec
                .validate()
                .map_err(|e| Error::Config(format!("scenario `{}`: {e}", s.name)))?;
        }
        Ok(ScenarioTable { scenarios })
    }

    pub fn len(&self) -> usize {
        self.scenarios.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scenarios.is_empty()
    }

    pub fn get(&self, name: &str) -> Option<&Scenario> {
        self.scenarios.iter().find(|s| s.name == name)
    }

    pub fn to_toml(&self) -> String {
        let file = ScenarioFile {
            scenario: self
                .scenarios
                .iter()
                .map(|s| {
                    let (theta_min, theta_max, rate) = match s.spec.kind {
                        CorruptionKind::LimitedFov { theta_min, theta_max } => (Some(theta_min), Some(theta_max), None),
                        CorruptionKind::ObjectDrop { rate } | CorruptionKind::ObjectOcclusion { rate } => {
                            (None, None, Some(rate))
                        }
                        _ => (None, None, None),
                    };
                    ScenarioEntry {
                        name: s.name.clone(),
                        kind: s.spec.kind.tag().to_string(),
                        theta_min,
                        theta_max,
                        rate,
                        seed: s.spec.seed,
                        bernoulli: s.spec.bernoulli,
                    }
                })
                .collect(),
        };
        toml::to_string(&file).expect("scenario table serializes")
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let file: ScenarioFile = toml::from_str(text).map_err(|e| Error::Config(format!("scenario table: {e}")))?;
        let scenarios = file
            .scenario
            .into_iter()
            .map(|e| {
                let need = |v: Option<f64>, field: &str| {
                    v.ok_or_else(|| Error::Config(format!("scenario `{}` needs `{field}`", e.name)))
                };
                let kind = match e.kind.as_str() {
                    "none" => CorruptionKind::None,
                    "limited_fov" => CorruptionKind::LimitedFov {
                        theta_min: need(e.theta_min, "theta_min")?,
                        theta_max: need(e.theta_max, "theta_max")?,
                    },
                    "object_drop" => CorruptionKind::ObjectDrop {
                        rate: need(e.rate, "rate")?,
                    },
                    "camera_missing_front" => CorruptionKind::CameraMissingFront,
                    "camera_preserve_front_only" => CorruptionKind::CameraPreserveFrontOnly,
                    "object_occlusion" => CorruptionKind::ObjectOcclusion {
                        rate: need(e.rate, "rate")?,
                    },
                    other => {
                        return Err(Error::Config(format!(
                            "scenario `{}` has unknown kind `{other}`",
                            e.name
                        )))
                    }
                };
                Ok(Scenario {
                    name: e.name,
                    spec: CorruptionSpec {
                        kind,
                        seed: e.seed,
                        bernoulli: e.bernoulli,
                    },
                })
            })
            .collect::<Result<_>>()?;
        ScenarioTable::new(scenarios)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_toml()).map_err(|e| Error::io(path, e))
    }
}

/// The benchmark's eight scenarios: clean, three LiDAR field-of-view limits,
/// object point drop, two front-camera failures and object occlusion.
pub fn standard_scenarios() -> ScenarioTable {
    let fov = |a: f64, b: f64| CorruptionKind::LimitedFov {
        theta_min: a,
        theta_max: b,
    };
    let entries = [
        ("clean", CorruptionKind::None),
        ("fov_pi_2", fov(-FRAC_PI_2, FRAC_PI_2)),
        ("fov_pi_3", fov(-FRAC_PI_3, FRAC_PI_3)),
        ("fov_0", fov(-0.0, 0.0)),
        ("drop_50", CorruptionKind::ObjectDrop { rate: 0.5 }),
        ("missing_front", CorruptionKind::CameraMissingFront),
        ("preserve_front", CorruptionKind::CameraPreserveFrontOnly),
        ("occlusion_50", CorruptionKind::ObjectOcclusion { rate: 0.5 }),
    ];
    ScenarioTable::new(
        entries
            .into_iter()
            .enumerate()
            .map(|(i, (name, kind))| Scenario {
                name: name.to_string(),
                spec: CorruptionSpec {
                    kind,
                    seed: 1000 + i as u64,
                    bernoulli: false,
                },
            })
            .collect(),
    )
    .expect("standard table is valid")
}
