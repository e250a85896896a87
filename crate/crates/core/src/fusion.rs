//! Confidence-weighted mutual cross-attention between the LiDAR and camera
//! BEV grids, plus the fixed-weight baselines it is compared against.
//!
//! Every BEV cell is a token. In the LiDAR→camera direction camera tokens
//! query LiDAR keys and values; the camera→LiDAR direction is the mirror
//! image. Each direction is projected back to `C` channels and scaled by the
//! confidence of the modality that supplies its values. Queries and keys also
//! see a fixed Fourier encoding of the cell position, so attention can stay
//! local when one grid is blank.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::attention::attend;
use crate::autodiff::Var;
use crate::bev::GridConfig;
use crate::error::{Error, Result};
use crate::nn::{ParamStore, Params};
use crate::rng::Rng;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionMode {
    /// Elementwise sum of the two grids.
    Add,
    /// Camera queries attend to LiDAR, confidence fixed to 1.
    CrossImage,
    /// LiDAR queries attend to camera, confidence fixed to 1.
    CrossLidar,
    /// Both directions, confidences fixed to 1.
    Mca,
    /// Both directions, each scaled by its confidence.
    CwMca,
}

impl FusionMode {
    pub const ALL: [FusionMode; 5] = [
        FusionMode::Add,
        FusionMode::CrossImage,
        FusionMode::CrossLidar,
        FusionMode::Mca,
        FusionMode::CwMca,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            FusionMode::Add => "add",
            FusionMode::CrossImage => "cross_image",
            FusionMode::CrossLidar => "cross_lidar",
            FusionMode::Mca => "mca",
            FusionMode::CwMca => "cw_mca",
        }
    }

    pub fn uses_attention(&self) -> bool {
        !matches!(self, FusionMode::Add)
    }
}

impl std::str::FromStr for FusionMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        FusionMode::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::Argument(format!("unknown fusion mode `{s}`")))
    }
}

/// Which way information flows.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Direction {
    /// Camera queries, LiDAR keys/values.
    LidarToCamera,
    /// LiDAR queries, camera keys/values.
    CameraToLidar,
}

impl Direction {
    fn prefix(&self) -> &'static str {
        match self {
            Direction::LidarToCamera => "fuse.l2c",
            Direction::CameraToLidar => "fuse.c2l",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FusionConfig {
    pub mode: FusionMode,
    pub d_k: usize,
    /// Frequencies (cycles per window side) of the positional encoding; empty disables it.
    pub pos_frequencies: Vec<f64>,
    /// Initial gain on the positional part of queries and keys.
    pub pos_init_gain: f64,
}

impl Default for FusionConfig {
    fn default() -> Self {
        FusionConfig {
            mode: FusionMode::CwMca,
            d_k: 32,
            pos_frequencies: vec![1.0, 2.0, 4.0, 8.0],
            pos_init_gain: 4.0,
        }
    }
}

impl FusionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_k == 0 {
            return Err(Error::Config("d_k must be positive".into()));
        }
        Ok(())
    }

    pub fn pos_dim(&self) -> usize {
        4 * self.pos_frequencies.len()
    }
}

/// `[H·W × 4F]` sin/cos encoding of each cell center.
pub fn positional_encoding(grid: &GridConfig, frequencies: &[f64]) -> Tensor {
    let side = grid.cells();
    let mut data = Vec::with_capacity(side * side * 4 * frequencies.len());
    for row in 0..side {
        for col in 0..side {
            let [x, y] = grid.cell_center(row, col);
            for &f in frequencies {
                for coord in [x, y] {
                    let a = 2.0 * PI * f * coord / grid.extent_m;
                    data.push(a.sin());
                    data.push(a.cos());
                }
            }
        }
    }
    Tensor::from_parts(vec![side * side, 4 * frequencies.len()], data)
}

pub struct Fusion {
    pub config: FusionConfig,
    pub channels: usize,
    /// Positional encoding, absent when no frequencies are configured.
    pub position: Option<Tensor>,
    pub tokens: usize,
}

impl Fusion {
    pub fn new(config: FusionConfig, channels: usize, grid: &GridConfig) -> Result<Self> {
        config.validate()?;
        let position = (!config.pos_frequencies.is_empty()).then(|| positional_encoding(grid, &config.pos_frequencies));
        Ok(Fusion {
            config,
            channels,
            position,
            tokens: grid.tokens(),
        })
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut Rng) {
        let (c, dk) = (self.channels, self.config.d_k);
        for dir in [Direction::LidarToCamera, Direction::CameraToLidar] {
            let p = dir.prefix();
            for m in ["q", "k", "v"] {
                store.init_weight(&format!("{p}.w{m}"), c, dk, rng);
            }
            store.init_weight(&format!("{p}.wo"), dk, c, rng);
            if self.position.is_some() {
                let pd = self.config.pos_dim();
                // positions start out matched to themselves
                let mut eye = Tensor::zeros(&[pd, dk]);
                for i in 0..pd.min(dk) {
                    eye.data_mut()[i * dk + i] = self.config.pos_init_gain;
                }
                store.insert(format!("{p}.wq_pos"), eye.clone());
                store.insert(format!("{p}.wk_pos"), eye);
            }
        }
    }

    /// `confidence · softmax(Q Kᵀ/√d_k) V · W_o` with queries from `query`
    /// and keys/values from `source`, both token-major `[H·W × C]`.
    pub fn cross_attend<'t>(
        &self,
        p: &Params<'t, '_>,
        query: Var<'t>,
        source: Var<'t>,
        confidence: Var<'t>,
        direction: Direction,
    ) -> Result<Var<'t>> {
        let (qs, ss) = (query.shape(), source.shape());
        if qs != ss || qs.len() != 2 || qs[1] != self.channels {
            return Err(Error::Config(format!(
                "cross attention needs matching [tokens x {}] grids, got {qs:?} and {ss:?}",
                self.channels
            )));
        }
        if confidence.value().len() != 1 {
            return Err(Error::Argument("confidence must be a scalar".into()));
        }
        let pre = direction.prefix();
        let mut q = query.matmul(p.get(&format!("{pre}.wq"))?)?;
        let mut k = source.matmul(p.get(&format!("{pre}.wk"))?)?;
        if let Some(pos) = &self.position {
            if pos.shape()[0] != qs[0] {
                return Err(Error::Config(format!(
                    "positional table has {} tokens, grid has {}",
                    pos.shape()[0],
                    qs[0]
                )));
            }
            let pos = p.tape().leaf(pos.clone());
            q = q.add(pos.matmul(p.get(&format!("{pre}.wq_pos"))?)?)?;
            k = k.add(pos.matmul(p.get(&format!("{pre}.wk_pos"))?)?)?;
        }
        let v = source.matmul(p.get(&format!("{pre}.wv"))?)?;
        let (out, _) = attend(q, k, v, None)?;
        out.matmul(p.get(&format!("{pre}.wo"))?)?.scale_by(confidence)
    }

    /// Fused grid for the configured mode. `c_lidar` and `c_camera` are
    /// scalars; modes with fixed weights ignore them.
    pub fn forward<'t>(
        &self,
        p: &Params<'t, '_>,
        lidar: Var<'t>,
        camera: Var<'t>,
        c_lidar: Var<'t>,
        c_camera: Var<'t>,
    ) -> Result<Var<'t>> {
        let one = || p.tape().leaf(Tensor::scalar(1.0));
        match self.config.mode {
            FusionMode::Add => add_grids(lidar, camera),
            FusionMode::CrossImage => self.cross_attend(p, camera, lidar, one(), Direction::LidarToCamera),
            FusionMode::CrossLidar => self.cross_attend(p, lidar, camera, one(), Direction::CameraToLidar),
            FusionMode::Mca => {
                let l2c = self.cross_attend(p, camera, lidar, one(), Direction::LidarToCamera)?;
                let c2l = self.cross_attend(p, lidar, camera, one(), Direction::CameraToLidar)?;
                fuse(l2c, c2l)
            }
            FusionMode::CwMca => {
                let l2c = self.cross_attend(p, camera, lidar, c_lidar, Direction::LidarToCamera)?;
                let c2l = self.cross_attend(p, lidar, camera, c_camera, Direction::CameraToLidar)?;
                fuse(l2c, c2l)
            }
        }
    }
}

/// `F_fused = F_{L→C} + F_{C→L}`.
pub fn fuse<'t>(l2c: Var<'t>, c2l: Var<'t>) -> Result<Var<'t>> {
    l2c.add(c2l)
}

fn add_grids<'t>(a: Var<'t>, b: Var<'t>) -> Result<Var<'t>> {
    a.add(b)
}
