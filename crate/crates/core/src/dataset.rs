//! Seeded train/test splits of synthetic sequences and their on-disk layout.
//!
//! A saved dataset is a directory with `manifest.toml` and one folder per
//! sequence holding `frame_{t}.boxes`, `frame_{t}.rfpc`, `frame_{t}.rfvw`
//! and `motion.txt`.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io;
use crate::rng::split_indexed;
use crate::scene::{simulate_sequence, Frame, MotionModel, SceneConfig, Sequence};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetConfig {
    pub train_scenes: usize,
    pub test_scenes: usize,
    pub scene: SceneConfig,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            train_scenes: 64,
            test_scenes: 32,
            scene: SceneConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub train: Vec<Sequence>,
    pub test: Vec<Sequence>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    seed: u64,
    config: DatasetConfig,
    train: Vec<String>,
    test: Vec<String>,
}

/// Sequence `index` of `split` ("train" or "test").
pub fn generate_sequence(seed: u64, split: &str, index: usize, cfg: &SceneConfig) -> Result<Sequence> {
    simulate_sequence(
        split_indexed(seed, split, index),
        cfg.steps,
        None,
        &MotionModel::static_ego(cfg.dt),
        cfg,
    )
}

pub fn generate(seed: u64, cfg: &DatasetConfig) -> Result<Dataset> {
    let split = |name: &str, n: usize| {
        (0..n)
            .map(|i| generate_sequence(seed, name, i, &cfg.scene))
            .collect::<Result<Vec<_>>>()
    };
    Ok(Dataset {
        train: split("train", cfg.train_scenes)?,
        test: split("test", cfg.test_scenes)?,
    })
}

fn scene_dir(split: &str, i: usize) -> String {
    format!("{split}/scene_{i:04}")
}

fn save_sequence(seq: &Sequence, dir: &Path) -> Result<()> {
    for f in &seq.frames {
        io::write_bytes(
            &dir.join(format!("frame_{}.boxes", f.t)),
            io::format_boxes(&f.gt_boxes).as_bytes(),
        )?;
        io::write_bytes(
            &dir.join(format!("frame_{}.rfpc", f.t)),
            &io::encode_point_cloud(&f.cloud)?,
        )?;
        io::write_bytes(&dir.join(format!("frame_{}.rfvw", f.t)), &io::encode_views(&f.views)?)?;
    }
    let motion: String = seq
        .ego_motion
        .iter()
        .map(|m| format!("{} {} {}\n", m[0], m[1], m[2]))
        .collect();
    io::write_bytes(&dir.join("motion.txt"), motion.as_bytes())
}

fn load_sequence(dir: &Path) -> Result<Sequence> {
    let motion_path = dir.join("motion.txt");
    let mut ego_motion = Vec::new();
    for (i, line) in io::read_text(&motion_path)?.lines().enumerate() {
        let v: Vec<f64> = line
            .split_whitespace()
            .map(|t| t.parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| Error::Format(format!("{}: line {}: bad number", motion_path.display(), i + 1)))?;
        let m: [f64; 3] = v
            .try_into()
            .map_err(|_| Error::Format(format!("{}: line {}: expected 3 numbers", motion_path.display(), i + 1)))?;
        ego_motion.push(m);
    }
    // one motion line per transition between frames
    let mut frames = Vec::with_capacity(ego_motion.len() + 1);
    for t in 0..=ego_motion.len() {
        let gt_boxes = io::parse_boxes(&io::read_text(&dir.join(format!("frame_{t}.boxes")))?)?;
        let mut cloud = io::decode_point_cloud(&io::read_bytes(&dir.join(format!("frame_{t}.rfpc")))?)?;
        cloud.retag(&gt_boxes);
        let views = io::decode_views(&io::read_bytes(&dir.join(format!("frame_{t}.rfvw")))?)?;
        frames.push(Frame {
            t,
            cloud,
            views,
            gt_boxes,
        });
    }
    Ok(Sequence { frames, ego_motion })
}

/// Writes the dataset under `dir`; returns the manifest path.
pub fn save(data: &Dataset, seed: u64, cfg: &DatasetConfig, dir: &Path) -> Result<PathBuf> {
    let names = |split: &str, n: usize| (0..n).map(|i| scene_dir(split, i)).collect::<Vec<_>>();
    let manifest = Manifest {
        seed,
        config: cfg.clone(),
        train: names("train", data.train.len()),
        test: names("test", data.test.len()),
    };
    for (seq, name) in data
        .train
        .iter()
        .zip(&manifest.train)
        .chain(data.test.iter().zip(&manifest.test))
    {
        save_sequence(seq, &dir.join(name))?;
    }
    let text = toml::to_string(&manifest).map_err(|e| Error::Format(format!("manifest: {e}")))?;
    let path = dir.join("manifest.toml");
    io::write_bytes(&path, text.as_bytes())?;
    Ok(path)
}

/// Reads a dataset written by [`save`], with the seed and config it was made from.
pub fn load(dir: &Path) -> Result<(Dataset, u64, DatasetConfig)> {
    let path = dir.join("manifest.toml");
    let manifest: Manifest =
        toml::from_str(&io::read_text(&path)?).map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    let split = |names: &[String]| {
        names
            .iter()
            .map(|n| load_sequence(&dir.join(n)))
            .collect::<Result<Vec<_>>>()
    };
    Ok((
        Dataset {
            train: split(&manifest.train)?,
            test: split(&manifest.test)?,
        },
        manifest.seed,
        manifest.config,
    ))
}
