//! The operations behind the command-line tool. Everything is written
//! below one output directory:
//!
//! ```text
//! out/
//!   config.toml                resolved configuration of the last command
//!   data/                      dataset (see `dataset`)
//!   checkpoints/stage{n}.rfck  parameters after each stage
//!   curves_stage{n}.csv        per-epoch losses
//!   eval.csv, eval.txt         clean test-set evaluation
//!   detections/scene_{i}.txt   clean test-set detections
//!   robustness.csv/.txt        scenario sweep
//!   ablation_{kind}.csv/.txt   ablation sweep
//! ```

use std::path::{Path, PathBuf};

use crate::config::ExperimentConfig;
use crate::corruption::{CorruptionSpec, Scenario, ScenarioTable};
use crate::dataset::{self, Dataset};
use crate::error::{Error, Result};
use crate::io;
use crate::model::Model;
use crate::nn::ParamStore;
use crate::scene::{Sequence, CLASS_NAMES};
use crate::selftest::{self, SelftestReport};
use crate::sweep::{
    ablation_sweep, component_variants, fusion_variants, par_map, robustness_csv, robustness_sweep, robustness_table,
    scene_spec, stfa_variants, worker_count, AblationTable, ScenarioResult, Variant,
};
use crate::train::{curves_csv, train, Stage};

pub fn data_dir(out: &Path) -> PathBuf {
    out.join("data")
}

pub fn checkpoint_path(out: &Path, stage: Stage) -> PathBuf {
    out.join("checkpoints").join(format!("stage{}.rfck", stage.number()))
}

fn write_text(path: &Path, text: &str) -> Result<PathBuf> {
    io::write_bytes(path, text.as_bytes())?;
    Ok(path.to_path_buf())
}

fn record_config(cfg: &ExperimentConfig, out: &Path) -> Result<PathBuf> {
    write_text(&out.join("config.toml"), &cfg.to_toml())
}

/// Generates and saves the dataset; returns the manifest path.
pub fn synth(cfg: &ExperimentConfig, out: &Path) -> Result<PathBuf> {
    cfg.validate()?;
    record_config(cfg, out)?;
    let data = dataset::generate(cfg.seed, &cfg.dataset)?;
    dataset::save(&data, cfg.seed, &cfg.dataset, &data_dir(out))
}

fn load_data(out: &Path) -> Result<Dataset> {
    let dir = data_dir(out);
    if !dir.join("manifest.toml").exists() {
        return Err(Error::Config(format!(
            "no dataset at {}; run synth first",
            dir.display()
        )));
    }
    Ok(dataset::load(&dir)?.0)
}

/// Runs `stages` (ascending) on the saved dataset. A run that starts after
/// stage 1 resumes from the previous stage's checkpoint. Returns the
/// checkpoints written.
pub fn train_stages(cfg: &ExperimentConfig, out: &Path, stages: &[Stage]) -> Result<Vec<PathBuf>> {
    cfg.validate()?;
    if stages.is_empty() || stages.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::Argument("stages must be a non-empty ascending list".into()));
    }
    let data = load_data(out)?;
    record_config(cfg, out)?;
    let model = Model::new(cfg.model.clone())?;
    let mut store = match Stage::from_number(stages[0].number() - 1) {
        Ok(prev) => io::load_checkpoint(&checkpoint_path(out, prev))?,
        Err(_) => model.init(cfg.seed),
    };
    let tc = cfg.train_config();
    let mut written = Vec::new();
    let rows = train(&model, &mut store, &data.train, &tc, stages, |stage, st| {
        let path = checkpoint_path(out, stage);
        io::save_checkpoint(st, &path)?;
        written.push(path);
        Ok(())
    })?;
    for &stage in stages {
        let mine: Vec<_> = rows.iter().filter(|r| r.stage == stage).cloned().collect();
        write_text(
            &out.join(format!("curves_stage{}.csv", stage.number())),
            &curves_csv(&mine, &tc.weights),
        )?;
    }
    Ok(written)
}

/// Latest checkpoint present under `out`.
pub fn latest_checkpoint(out: &Path) -> Result<PathBuf> {
    Stage::ALL
        .iter()
        .rev()
        .map(|&s| checkpoint_path(out, s))
        .find(|p| p.exists())
        .ok_or_else(|| Error::Config(format!("no checkpoint under {}; run train first", out.display())))
}

fn load_model(cfg: &ExperimentConfig, checkpoint: &Path) -> Result<(Model, ParamStore)> {
    let model = Model::new(cfg.model.clone())?;
    let store = io::load_checkpoint(checkpoint)?;
    let expected = model.init(0);
    for name in expected.names() {
        let want = expected.get(name)?.shape();
        match store.get(name) {
            Ok(t) if t.shape() == want => {}
            _ => {
                return Err(Error::Config(format!(
                    "checkpoint {} does not match the model configuration at `{name}`",
                    checkpoint.display()
                )))
            }
        }
    }
    Ok((model, store))
}

fn write_sweep(results: &[ScenarioResult], classes: usize, out: &Path, stem: &str) -> Result<Vec<PathBuf>> {
    Ok(vec![
        write_text(
            &out.join(format!("{stem}.csv")),
            &robustness_csv(results, &CLASS_NAMES[..classes]),
        )?,
        write_text(&out.join(format!("{stem}.txt")), &robustness_table(results))?,
    ])
}

fn clean_table() -> Result<ScenarioTable> {
    ScenarioTable::new(vec![Scenario {
        name: "clean".into(),
        spec: CorruptionSpec::clean(),
    }])
}

/// Clean test-set evaluation plus per-scene detection files.
pub fn eval(cfg: &ExperimentConfig, out: &Path, checkpoint: &Path) -> Result<Vec<PathBuf>> {
    cfg.validate()?;
    let data = load_data(out)?;
    let (model, store) = load_model(cfg, checkpoint)?;
    let results = robustness_sweep(
        &model,
        &store,
        &data.test,
        &clean_table()?,
        cfg.eval.iou,
        worker_count(),
    )?;
    let mut written = write_sweep(&results, model.config.classes, out, "eval")?;
    let clean = CorruptionSpec::clean();
    let dets = par_map(data.test.len(), worker_count(), |i| {
        let sample = model.prepare(&data.test[i], &scene_spec(&clean, i))?;
        Ok(io::format_detections(&model.predict(&store, &sample)?.detections))
    })?;
    for (i, text) in dets.iter().enumerate() {
        written.push(write_text(
            &out.join("detections").join(format!("scene_{i:04}.txt")),
            text,
        )?);
    }
    Ok(written)
}

/// Evaluates every scenario of `table`, in order.
pub fn sweep(cfg: &ExperimentConfig, out: &Path, checkpoint: &Path, table: &ScenarioTable) -> Result<Vec<PathBuf>> {
    cfg.validate()?;
    let data = load_data(out)?;
    let (model, store) = load_model(cfg, checkpoint)?;
    let results = robustness_sweep(&model, &store, &data.test, table, cfg.eval.iou, worker_count())?;
    write_sweep(&results, model.config.classes, out, "robustness")
}

/// Which ablation study to run.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AblationKind {
    Component,
    Stfa,
    Fusion,
}

impl AblationKind {
    pub fn variants(self) -> Vec<Variant> {
        match self {
            AblationKind::Component => component_variants(),
            AblationKind::Stfa => stfa_variants(),
            AblationKind::Fusion => fusion_variants(),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            AblationKind::Component => "component",
            AblationKind::Stfa => "stfa",
            AblationKind::Fusion => "fusion",
        }
    }
}

impl std::str::FromStr for AblationKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "component" => Ok(AblationKind::Component),
            "stfa" => Ok(AblationKind::Stfa),
            "fusion" => Ok(AblationKind::Fusion),
            other => Err(Error::Argument(format!(
                "unknown ablation `{other}` (expected component, stfa or fusion)"
            ))),
        }
    }
}

/// Fresh dataset, initialization and three-stage training for one seed.
/// Returns the trained parameters and the test split.
pub fn train_for_seed(
    cfg: &ExperimentConfig,
    model: &Model,
    seed: u64,
    after_stage: impl FnMut(Stage, &ParamStore) -> Result<()>,
) -> Result<(ParamStore, Vec<Sequence>)> {
    let data = dataset::generate(seed, &cfg.dataset)?;
    let mut store = model.init(seed);
    let mut tc = cfg.train_config();
    tc.seed = seed;
    train(model, &mut store, &data.train, &tc, &Stage::ALL, after_stage)?;
    Ok((store, data.test))
}

/// Trains every variant of `kind` on every `eval.ablation_seeds` seed and
/// tabulates median mAP per scenario.
pub fn ablation(
    cfg: &ExperimentConfig,
    out: &Path,
    kind: AblationKind,
    table: &ScenarioTable,
) -> Result<(AblationTable, Vec<PathBuf>)> {
    cfg.validate()?;
    if cfg.eval.ablation_seeds.is_empty() {
        return Err(Error::Config("eval.ablation_seeds is empty".into()));
    }
    record_config(cfg, out)?;
    let result = ablation_sweep(
        &cfg.model,
        &kind.variants(),
        &cfg.eval.ablation_seeds,
        table,
        cfg.eval.iou,
        worker_count(),
        |model, seed| train_for_seed(cfg, model, seed, |_, _| Ok(())),
    )?;
    let stem = format!("ablation_{}", kind.name());
    let written = vec![
        write_text(&out.join(format!("{stem}.csv")), &result.to_csv())?,
        write_text(&out.join(format!("{stem}.txt")), &result.to_text())?,
    ];
    Ok((result, written))
}

pub fn run_selftest() -> Result<SelftestReport> {
    selftest::run()
}
