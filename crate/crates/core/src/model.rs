//! The assembled detector: both BEV encoders, the temporal camera
//! modulation, reliability scoring, fusion and the detection head, with the
//! switches the ablations need.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::bev::{column_inputs, splat_tokens, voxelize, ColumnInputs, DepthBins, GridConfig, LiftGeometry};
use crate::corruption::{CorruptionSpec, Modality};
use crate::error::{Error, Result};
use crate::fusion::{Fusion, FusionConfig, FusionMode};
use crate::head::{build_targets, Detection, Head, HeadConfig, HeadOutput, HeadTargets};
use crate::nn::{ParamStore, Params};
use crate::reliability::{Reliability, ReliabilityConfig};
use crate::rng::{rng_for, Rng};
use crate::scene::{Sequence, ViewGeometry, N_VIEWS};
use crate::stfa::{Stfa, StfaConfig};
use crate::tensor::Tensor;

/// Initial bias of the 1×1 encoders; keeps encoded grids away from zero.
const ENCODER_BIAS: f64 = 0.1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub classes: usize,
    /// Channels of the encoded BEV grids.
    pub channels: usize,
    pub grid: GridConfig,
    pub view: ViewGeometry,
    pub depth_bins: DepthBins,
    pub stfa: StfaConfig,
    pub reliability: ReliabilityConfig,
    pub fusion: FusionConfig,
    pub head: HeadConfig,
    pub stfa_on: bool,
    pub reliability_on: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            classes: 2,
            channels: 16,
            grid: GridConfig::square(24.0, 16),
            view: ViewGeometry::default(),
            depth_bins: DepthBins::default(),
            stfa: StfaConfig::default(),
            reliability: ReliabilityConfig::default(),
            fusion: FusionConfig::default(),
            head: HeadConfig::default(),
            stfa_on: true,
            reliability_on: true,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.classes == 0 || self.classes > crate::scene::MAX_CLASSES {
            return Err(Error::Config(format!(
                "classes must be in 1..={}",
                crate::scene::MAX_CLASSES
            )));
        }
        if self.channels == 0 {
            return Err(Error::Config("channels must be positive".into()));
        }
        self.grid.validate()?;
        self.view.validate()?;
        self.stfa.validate()?;
        self.reliability.validate()?;
        self.fusion.validate()?;
        self.head.validate()
    }

    /// Length of one flattened view.
    pub fn view_len(&self) -> usize {
        self.view.channels * self.view.height * self.view.width
    }
}

/// Per-modality reliability targets `1 − severity`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ReliabilityTargets {
    pub lidar: f64,
    pub camera: f64,
}

impl ReliabilityTargets {
    pub fn of(spec: &CorruptionSpec) -> Self {
        let r = 1.0 - spec.severity();
        match spec.kind.modality() {
            Some(Modality::Lidar) => ReliabilityTargets { lidar: r, camera: 1.0 },
            Some(Modality::Camera) => ReliabilityTargets { lidar: 1.0, camera: r },
            None => ReliabilityTargets {
                lidar: 1.0,
                camera: 1.0,
            },
        }
    }
}

/// Constant network inputs derived from one (possibly corrupted) sequence.
#[derive(Clone, Debug)]
pub struct Sample {
    /// Voxel features of the current frame, `[H·W × voxel channels]`.
    pub voxels: Tensor,
    /// Camera columns of the current frame.
    pub columns: ColumnInputs,
    /// Per step, the six views flattened to `[6 × view_len]`.
    pub view_steps: Vec<Tensor>,
    pub targets: HeadTargets,
    pub reliability: ReliabilityTargets,
}

/// Which encoded grids reach fusion.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Streams {
    Both,
    /// Camera grid replaced by zeros.
    LidarOnly,
    /// LiDAR grid replaced by zeros.
    CameraOnly,
}

/// Encoded grids of one sample.
pub struct Encoded<'t> {
    pub lidar: Var<'t>,
    pub camera: Var<'t>,
    /// Spatially aggregated view features per step; empty without STFA.
    pub spatial: Vec<Var<'t>>,
}

/// Embeddings `[1 × embed_dim]` and confidences `[1 × 1]`.
pub struct Scores<'t> {
    pub z_lidar: Var<'t>,
    pub z_camera: Var<'t>,
    pub c_lidar: Var<'t>,
    pub c_camera: Var<'t>,
}

/// Inference result for one sample.
#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    pub detections: Vec<Detection>,
    pub c_lidar: f64,
    pub c_camera: f64,
}

pub struct Model {
    pub config: ModelConfig,
    lift: LiftGeometry,
    stfa: Stfa,
    reliability: Reliability,
    fusion: Fusion,
    head: Head,
}

impl Model {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let lift = LiftGeometry::new(&config.view, &config.depth_bins, &config.grid)?;
        let stfa = Stfa::new(config.stfa.clone(), config.view_len())?;
        let reliability = Reliability::new(config.reliability.clone(), config.channels)?;
        let fusion = Fusion::new(config.fusion.clone(), config.channels, &config.grid)?;
        let head = Head::new(config.head.clone(), config.channels, config.classes, &config.grid)?;
        Ok(Model {
            config,
            lift,
            stfa,
            reliability,
            fusion,
            head,
        })
    }

    pub fn fusion_mode(&self) -> FusionMode {
        self.config.fusion.mode
    }

    pub fn head(&self) -> &Head {
        &self.head
    }

    pub fn reliability(&self) -> &Reliability {
        &self.reliability
    }

    pub fn fusion(&self) -> &Fusion {
        &self.fusion
    }

    /// Fresh parameters; every module draws from its own labelled stream.
    pub fn init(&self, seed: u64) -> ParamStore {
        let c = self.config.channels;
        let mut store = ParamStore::new();
        let mut rng = rng_for(seed, "init/encoders");
        self.init_encoders(&mut store, &mut rng);
        if self.config.stfa_on {
            self.stfa.init(&mut store, &mut rng_for(seed, "init/stfa"));
            store.init_const("stfa.proj.w", &[self.config.stfa.pooled_dim(), c], 0.0);
            store.init_const("stfa.proj.b", &[c], 0.0);
        }
        if self.config.reliability_on {
            self.reliability
                .init(&mut store, &mut rng_for(seed, "init/reliability"));
        }
        if self.fusion_mode().uses_attention() {
            self.fusion.init(&mut store, &mut rng_for(seed, "init/fusion"));
        }
        self.head.init(&mut store, &mut rng_for(seed, "init/head"));
        store
    }

    fn init_encoders(&self, store: &mut ParamStore, rng: &mut Rng) {
        let c = self.config.channels;
        let cv = self.config.view.channels;
        store.init_weight("enc.lidar.w", self.config.grid.voxel_channels(), c, rng);
        store.init_const("enc.lidar.b", &[c], ENCODER_BIAS);
        store.init_weight(
            "cam.depth.w",
            cv * self.config.view.height,
            self.config.depth_bins.count,
            rng,
        );
        store.init_const("cam.depth.b", &[self.config.depth_bins.count], 0.0);
        store.init_weight("enc.camera.w", cv, c, rng);
        store.init_const("enc.camera.b", &[c], ENCODER_BIAS);
    }

    /// Builds the constant inputs of `seq` after applying `spec`.
    pub fn prepare(&self, seq: &Sequence, spec: &CorruptionSpec) -> Result<Sample> {
        let seq = spec.apply(seq, &self.config.view)?;
        let current = seq.current();
        let voxels = voxelize(&current.cloud, &self.config.grid)?.to_tokens();
        let columns = column_inputs(&current.views, &self.config.view)?;
        let steps = self.config.stfa.steps;
        let first = seq.frames.len().saturating_sub(steps);
        let view_steps = seq.frames[first..]
            .iter()
            .map(|f| flatten_views(&f.views, self.config.view_len()))
            .collect::<Result<_>>()?;
        Ok(Sample {
            voxels,
            columns,
            view_steps,
            targets: build_targets(&current.gt_boxes, self.config.classes, &self.config.grid),
            reliability: ReliabilityTargets::of(spec),
        })
    }

    pub fn encode_lidar<'t>(&self, p: &Params<'t, '_>, sample: &Sample) -> Result<Var<'t>> {
        p.tape()
            .leaf(sample.voxels.clone())
            .matmul(p.get("enc.lidar.w")?)?
            .add_row(p.get("enc.lidar.b")?)?
            .gelu()
    }

    /// Lift-splat of the current frame, encoded to `C` channels and, with
    /// STFA on, modulated channel-wise by `1 + proj(pooled)`.
    pub fn encode_camera<'t>(&self, p: &Params<'t, '_>, sample: &Sample) -> Result<(Var<'t>, Vec<Var<'t>>)> {
        let tape = p.tape();
        let depth = tape
            .leaf(sample.columns.flat.clone())
            .matmul(p.get("cam.depth.w")?)?
            .add_row(p.get("cam.depth.b")?)?
            .softmax_rows()?;
        let raw = splat_tokens(depth, &sample.columns.payload, &self.lift)?;
        let camera = raw
            .matmul(p.get("enc.camera.w")?)?
            .add_row(p.get("enc.camera.b")?)?
            .gelu()?;
        if !self.config.stfa_on {
            return Ok((camera, Vec::new()));
        }
        let out = self.stfa.forward(p, &sample.view_steps)?;
        let gain = out
            .pooled
            .matmul(p.get("stfa.proj.w")?)?
            .add_row(p.get("stfa.proj.b")?)?
            .reshape(&[self.config.channels])?;
        Ok((camera.add(camera.mul_row(gain)?)?, out.spatial))
    }

    pub fn encode<'t>(&self, p: &Params<'t, '_>, sample: &Sample, streams: Streams) -> Result<Encoded<'t>> {
        let tape = p.tape();
        let zeros = || tape.leaf(Tensor::zeros(&[self.config.grid.tokens(), self.config.channels]));
        let lidar = match streams {
            Streams::CameraOnly => zeros(),
            _ => self.encode_lidar(p, sample)?,
        };
        let (camera, spatial) = match streams {
            Streams::LidarOnly => (zeros(), Vec::new()),
            _ => self.encode_camera(p, sample)?,
        };
        Ok(Encoded { lidar, camera, spatial })
    }

    /// Embeddings and confidences of both grids. Needs reliability on.
    pub fn score<'t>(&self, p: &Params<'t, '_>, enc: &Encoded<'t>) -> Result<Scores<'t>> {
        if !self.config.reliability_on {
            return Err(Error::Config("reliability module is disabled".into()));
        }
        let z_lidar = self.reliability.embed(p, enc.lidar, Modality::Lidar)?;
        let z_camera = self.reliability.embed(p, enc.camera, Modality::Camera)?;
        Ok(Scores {
            c_lidar: self.reliability.confidence(p, z_lidar, Modality::Lidar)?,
            c_camera: self.reliability.confidence(p, z_camera, Modality::Camera)?,
            z_lidar,
            z_camera,
        })
    }

    /// Fusion followed by the head. Confidences are scalars.
    pub fn detect_head<'t>(
        &self,
        p: &Params<'t, '_>,
        enc: &Encoded<'t>,
        c_lidar: Var<'t>,
        c_camera: Var<'t>,
    ) -> Result<HeadOutput<'t>> {
        let fused = self.fusion.forward(p, enc.lidar, enc.camera, c_lidar, c_camera)?;
        self.head.forward(p, fused)
    }

    pub fn detection_loss<'t>(&self, out: &HeadOutput<'t>, targets: &HeadTargets) -> Result<Var<'t>> {
        self.head.loss(out, targets)
    }

    /// Full inference on one sample.
    pub fn predict(&self, store: &ParamStore, sample: &Sample) -> Result<Prediction> {
        let tape = Tape::new();
        let p = Params::new(&tape, store);
        let enc = self.encode(&p, sample, Streams::Both)?;
        let (c_lidar, c_camera) = if self.config.reliability_on {
            let s = self.score(&p, &enc)?;
            (s.c_lidar, s.c_camera)
        } else {
            (tape.leaf(Tensor::scalar(1.0)), tape.leaf(Tensor::scalar(1.0)))
        };
        let out = self.detect_head(&p, &enc, c_lidar, c_camera)?;
        let detections = self.head.detect(&out.heat.tensor(), &out.reg.tensor());
        Ok(Prediction {
            detections,
            c_lidar: c_lidar.item(),
            c_camera: c_camera.item(),
        })
    }

    /// Confidences only, for the reliability diagnostics.
    pub fn confidences(&self, store: &ParamStore, sample: &Sample) -> Result<(f64, f64)> {
        let tape = Tape::new();
        let p = Params::new(&tape, store);
        let enc = self.encode(&p, sample, Streams::Both)?;
        let s = self.score(&p, &enc)?;
        Ok((s.c_lidar.item(), s.c_camera.item()))
    }
}

/// Six `C×H×W` views as rows of `[6 × C·H·W]`.
pub fn flatten_views(views: &[Tensor], view_len: usize) -> Result<Tensor> {
    if views.len() != N_VIEWS || views.iter().any(|v| v.len() != view_len) {
        return Err(Error::Argument(format!(
            "expected {N_VIEWS} views of {view_len} values"
        )));
    }
    Ok(Tensor::from_parts(
        vec![N_VIEWS, view_len],
        views.iter().flat_map(|v| v.data().iter().copied()).collect(),
    ))
}
