//! Three-stage training.
//!
//! 1. Pretraining of the encoders, STFA and reliability module on the
//!    contrastive, confidence and temporal objectives (unweighted sum).
//! 2. Stream training: each batch takes one step on the LiDAR stream with
//!    the camera grid zeroed, then one on the camera stream with the LiDAR
//!    grid zeroed. Confidences are held at 1 and the reliability module is
//!    frozen. The camera step also carries the weighted temporal term.
//! 3. End-to-end fine-tuning on the weighted total loss.
//!
//! Stages 1 and 3 replace each training sequence, with probability
//! `corruption_rate`, by a randomly corrupted copy whose severity supervises
//! the confidence heads.

use std::f64::consts::PI;
use std::fmt::Write as _;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::corruption::{CorruptionKind, CorruptionSpec, Modality};
use crate::error::{Error, Result};
use crate::losses::{confidence_loss, temporal_loss, total_loss, LossBreakdown, LossWeights};
use crate::model::{Model, Sample, Streams};
use crate::nn::{ParamStore, Params};
use crate::optim::{Optimizer, OptimizerConfig};
use crate::reliability::contrastive_loss;
use crate::rng::{rng_for, split_indexed, Rng};
use crate::scene::{shuffled, Sequence};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Stage {
    Pretrain = 1,
    Streams = 2,
    Finetune = 3,
}

impl Stage {
    pub const ALL: [Stage; 3] = [Stage::Pretrain, Stage::Streams, Stage::Finetune];

    pub fn number(self) -> u8 {
        self as u8
    }

    pub fn from_number(n: u8) -> Result<Stage> {
        Stage::ALL
            .into_iter()
            .find(|s| s.number() == n)
            .ok_or_else(|| Error::Argument(format!("stage must be 1, 2 or 3, got {n}")))
    }

    /// Whether parameter `name` is updated in this stage.
    pub fn trains(self, name: &str) -> bool {
        match self {
            Stage::Pretrain => ["enc.", "cam.", "stfa.", "rel."].iter().any(|p| name.starts_with(p)),
            Stage::Streams => !name.starts_with("rel."),
            Stage::Finetune => true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StageConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: OptimizerConfig,
}

impl StageConfig {
    fn with_epochs(epochs: usize) -> Self {
        StageConfig {
            epochs,
            ..StageConfig::default()
        }
    }
}

impl Default for StageConfig {
    fn default() -> Self {
        StageConfig {
            epochs: 20,
            batch_size: 16,
            optimizer: OptimizerConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    /// Set from the experiment root seed, never read from a file.
    #[serde(skip)]
    pub seed: u64,
    pub weights: LossWeights,
    /// Probability that a training sequence is corrupted in stages 1 and 3.
    pub corruption_rate: f64,
    pub stage1: StageConfig,
    pub stage2: StageConfig,
    pub stage3: StageConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            seed: 0,
            weights: LossWeights::default(),
            corruption_rate: 0.5,
            stage1: StageConfig::with_epochs(20),
            stage2: StageConfig::with_epochs(30),
            stage3: StageConfig::with_epochs(20),
        }
    }
}

impl TrainConfig {
    pub fn stage(&self, s: Stage) -> &StageConfig {
        match s {
            Stage::Pretrain => &self.stage1,
            Stage::Streams => &self.stage2,
            Stage::Finetune => &self.stage3,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.corruption_rate) {
            return Err(Error::Config("corruption_rate must lie in [0, 1]".into()));
        }
        for s in Stage::ALL {
            let c = self.stage(s);
            if c.batch_size == 0 {
                return Err(Error::Config(format!(
                    "stage {} batch size must be positive",
                    s.number()
                )));
            }
            c.optimizer.validate()?;
        }
        if self.weights.as_array().iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(Error::Config("loss weights must be finite and nonnegative".into()));
        }
        Ok(())
    }
}

/// Mean losses of one epoch.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CurveRow {
    pub stage: Stage,
    pub epoch: usize,
    pub loss: LossBreakdown,
}

/// CSV of training curves with the loss weights in a leading comment line.
pub fn curves_csv(rows: &[CurveRow], w: &LossWeights) -> String {
    let mut out = format!(
        "# weights detection={} contrastive={} temporal={} confidence={}\n",
        w.detection, w.contrastive, w.temporal, w.confidence
    );
    out.push_str("stage,epoch,detection,contrastive,temporal,confidence,total\n");
    for r in rows {
        let l = &r.loss;
        writeln!(
            out,
            "{},{},{},{},{},{},{}",
            r.stage.number(),
            r.epoch,
            l.detection,
            l.contrastive,
            l.temporal,
            l.confidence,
            l.total
        )
        .expect("writing to a String");
    }
    out
}

/// A random malfunction for training: total or partial LiDAR field-of-view
/// loss, object point drop, either camera failure, or object occlusion.
pub fn random_corruption(rng: &mut Rng) -> CorruptionSpec {
    let seed = rng.random();
    let kind = match rng.random_range(0..6) {
        0 => CorruptionKind::LimitedFov {
            theta_min: -0.0,
            theta_max: 0.0,
        },
        1 => {
            let half = rng.random_range(0.0..PI);
            CorruptionKind::LimitedFov {
                theta_min: -half,
                theta_max: half,
            }
        }
        2 => CorruptionKind::ObjectDrop {
            rate: rng.random_range(0.3..=1.0),
        },
        3 => CorruptionKind::CameraMissingFront,
        4 => CorruptionKind::CameraPreserveFrontOnly,
        _ => CorruptionKind::ObjectOcclusion {
            rate: rng.random_range(0.3..=1.0),
        },
    };
    CorruptionSpec {
        kind,
        seed,
        bernoulli: false,
    }
}

fn mean_of<'t>(terms: &[Var<'t>]) -> Result<Option<Var<'t>>> {
    let Some((first, rest)) = terms.split_first() else {
        return Ok(None);
    };
    let mut acc = *first;
    for t in rest {
        acc = acc.add(*t)?;
    }
    Ok(Some(acc.scale(1.0 / terms.len() as f64)?))
}

/// Per-batch loss terms; absent terms count as zero.
#[derive(Default)]
struct Terms<'t> {
    detection: Option<Var<'t>>,
    contrastive: Option<Var<'t>>,
    temporal: Option<Var<'t>>,
    confidence: Option<Var<'t>>,
}

impl<'t> Terms<'t> {
    fn combine(&self, tape: &'t Tape, w: &LossWeights) -> Result<(Var<'t>, LossBreakdown)> {
        let parts = [
            (self.detection, w.detection),
            (self.contrastive, w.contrastive),
            (self.temporal, w.temporal),
            (self.confidence, w.confidence),
        ];
        let mut total: Option<Var<'t>> = None;
        for (term, weight) in parts {
            if let Some(v) = term {
                let t = v.scale(weight)?;
                total = Some(match total {
                    Some(acc) => acc.add(t)?,
                    None => t,
                });
            }
        }
        let value = |v: Option<Var<'t>>| v.map_or(0.0, |v| v.item());
        let breakdown = total_loss(
            value(self.detection),
            value(self.contrastive),
            value(self.temporal),
            value(self.confidence),
            w,
        )?;
        let total = total.unwrap_or_else(|| tape.leaf(crate::tensor::Tensor::scalar(0.0)));
        if (total.item() - breakdown.total).abs() > 1e-9 * (1.0 + breakdown.total.abs()) {
            return Err(Error::Argument("loss breakdown does not add up".into()));
        }
        Ok((total, breakdown))
    }
}

const UNWEIGHTED: LossWeights = LossWeights {
    detection: 1.0,
    contrastive: 1.0,
    temporal: 1.0,
    confidence: 1.0,
};

/// Trains `store` in place on `data`.
pub struct Trainer<'a> {
    pub model: &'a Model,
    pub config: &'a TrainConfig,
    data: &'a [Sequence],
    clean: Vec<Sample>,
}

impl<'a> Trainer<'a> {
    pub fn new(model: &'a Model, config: &'a TrainConfig, data: &'a [Sequence]) -> Result<Self> {
        config.validate()?;
        let clean = data
            .iter()
            .map(|s| model.prepare(s, &CorruptionSpec::clean()))
            .collect::<Result<_>>()?;
        Ok(Trainer {
            model,
            config,
            data,
            clean,
        })
    }

    /// Corruption drawn for `scene` in a given stage and epoch, if any.
    fn draw(&self, stage: Stage, epoch: usize, scene: usize) -> Option<CorruptionSpec> {
        let label = format!("corrupt/{}/{epoch}", stage.number());
        let mut rng = crate::rng::rng_from(split_indexed(self.config.seed, &label, scene));
        rng.random_bool(self.config.corruption_rate)
            .then(|| random_corruption(&mut rng))
    }

    fn sample(&self, scene: usize, spec: Option<&CorruptionSpec>) -> Result<std::borrow::Cow<'_, Sample>> {
        Ok(match spec {
            Some(spec) => std::borrow::Cow::Owned(self.model.prepare(&self.data[scene], spec)?),
            None => std::borrow::Cow::Borrowed(&self.clean[scene]),
        })
    }

    fn pretrain_terms<'t>(&self, p: &Params<'t, '_>, batch: &[usize], epoch: usize) -> Result<Terms<'t>> {
        let model = self.model;
        let rel = model.reliability();
        let (mut zl, mut zc, mut extra, mut conf, mut targets, mut temp) =
            (vec![], vec![], vec![], vec![], vec![], vec![]);
        for &i in batch {
            let enc = model.encode(p, &self.clean[i], Streams::Both)?;
            temp.extend(temporal_loss(&enc.spatial)?);
            if !model.config.reliability_on {
                continue;
            }
            let s = model.score(p, &enc)?;
            zl.push(s.z_lidar);
            zc.push(s.z_camera);
            conf.extend([s.c_lidar, s.c_camera]);
            targets.extend([1.0, 1.0]);
            let Some(spec) = self.draw(Stage::Pretrain, epoch, i) else {
                continue;
            };
            let sample = self.sample(i, Some(&spec))?;
            match spec.kind.modality() {
                Some(Modality::Lidar) => {
                    let grid = model.encode_lidar(p, &sample)?;
                    let z = rel.embed(p, grid, Modality::Lidar)?;
                    conf.push(rel.confidence(p, z, Modality::Lidar)?);
                    targets.push(sample.reliability.lidar);
                }
                Some(Modality::Camera) => {
                    let (grid, _) = model.encode_camera(p, &sample)?;
                    let z = rel.embed(p, grid, Modality::Camera)?;
                    conf.push(rel.confidence(p, z, Modality::Camera)?);
                    targets.push(sample.reliability.camera);
                    extra.push(z);
                }
                None => {}
            }
        }
        let mut terms = Terms {
            temporal: mean_of(&temp)?,
            ..Terms::default()
        };
        if !zl.is_empty() {
            terms.contrastive = Some(self.contrastive(p.tape(), &zl, &zc, &extra)?);
            terms.confidence = Some(confidence_loss(&conf, &targets)?);
        }
        Ok(terms)
    }

    fn contrastive<'t>(&self, tape: &'t Tape, zl: &[Var<'t>], zc: &[Var<'t>], extra: &[Var<'t>]) -> Result<Var<'t>> {
        let rc = &self.model.config.reliability;
        let extra = if extra.is_empty() {
            None
        } else {
            Some(tape.stack_rows(extra)?)
        };
        contrastive_loss(
            tape.stack_rows(zl)?,
            tape.stack_rows(zc)?,
            extra,
            rc.temperature,
            rc.symmetric,
        )
    }

    fn stream_terms<'t>(&self, p: &Params<'t, '_>, batch: &[usize], streams: Streams) -> Result<Terms<'t>> {
        let tape = p.tape();
        let one = || tape.leaf(crate::tensor::Tensor::scalar(1.0));
        let (mut det, mut temp) = (Vec::with_capacity(batch.len()), Vec::new());
        for &i in batch {
            let sample = &self.clean[i];
            let enc = self.model.encode(p, sample, streams)?;
            temp.extend(temporal_loss(&enc.spatial)?);
            let out = self.model.detect_head(p, &enc, one(), one())?;
            det.push(self.model.detection_loss(&out, &sample.targets)?);
        }
        Ok(Terms {
            detection: mean_of(&det)?,
            temporal: mean_of(&temp)?,
            ..Terms::default()
        })
    }

    fn finetune_terms<'t>(&self, p: &Params<'t, '_>, batch: &[usize], epoch: usize) -> Result<Terms<'t>> {
        let model = self.model;
        let tape = p.tape();
        let (mut det, mut temp, mut conf, mut targets) = (vec![], vec![], vec![], vec![]);
        let (mut zl, mut zc, mut extra) = (vec![], vec![], vec![]);
        for &i in batch {
            let spec = self.draw(Stage::Finetune, epoch, i);
            let sample = self.sample(i, spec.as_ref())?;
            let enc = model.encode(p, &sample, Streams::Both)?;
            temp.extend(temporal_loss(&enc.spatial)?);
            let (c_lidar, c_camera) = if model.config.reliability_on {
                let s = model.score(p, &enc)?;
                conf.extend([s.c_lidar, s.c_camera]);
                targets.extend([sample.reliability.lidar, sample.reliability.camera]);
                match spec.as_ref().and_then(|s| s.kind.modality()) {
                    None => {
                        zl.push(s.z_lidar);
                        zc.push(s.z_camera);
                    }
                    Some(Modality::Camera) => extra.push(s.z_camera),
                    Some(Modality::Lidar) => {}
                }
                (s.c_lidar, s.c_camera)
            } else {
                let one = tape.leaf(crate::tensor::Tensor::scalar(1.0));
                (one, one)
            };
            let out = model.detect_head(p, &enc, c_lidar, c_camera)?;
            det.push(model.detection_loss(&out, &sample.targets)?);
        }
        Ok(Terms {
            detection: mean_of(&det)?,
            temporal: mean_of(&temp)?,
            contrastive: if zl.is_empty() {
                None
            } else {
                Some(self.contrastive(tape, &zl, &zc, &extra)?)
            },
            confidence: if conf.is_empty() {
                None
            } else {
                Some(confidence_loss(&conf, &targets)?)
            },
        })
    }

    /// Weighted stage-3 loss of `batch` (indices into the training data).
    pub fn batch_loss<'t>(
        &self,
        p: &Params<'t, '_>,
        batch: &[usize],
        epoch: usize,
    ) -> Result<(Var<'t>, LossBreakdown)> {
        self.finetune_terms(p, batch, epoch)?
            .combine(p.tape(), &self.config.weights)
    }

    /// One optimizer step on the loss built by `build`.
    fn step(
        &self,
        stage: Stage,
        epoch: usize,
        store: &mut ParamStore,
        opt: &mut Optimizer,
        weights: &LossWeights,
        build: impl for<'t> Fn(&Params<'t, '_>) -> Result<Terms<'t>>,
    ) -> Result<LossBreakdown> {
        let diverged = |reason: String| Error::Diverged {
            stage: stage.number(),
            epoch,
            reason,
        };
        let grads = {
            let tape = Tape::new();
            let p = Params::new(&tape, store);
            let terms = build(&p).map_err(|e| match e {
                Error::NonFinite { op } => diverged(format!("non-finite value in {op}")),
                other => other,
            })?;
            let (loss, breakdown) = terms.combine(&tape, weights)?;
            if !breakdown.total.is_finite() {
                return Err(diverged("loss is not finite".into()));
            }
            let g = tape.backward(loss)?;
            let mut grads = p.gradients(&g);
            grads.retain(|name, _| stage.trains(name));
            (grads, breakdown)
        };
        let (grads, breakdown) = grads;
        if !grads.is_empty() {
            opt.step(store, &grads).map_err(|e| diverged(e.to_string()))?;
        }
        Ok(breakdown)
    }

    /// Runs `stage` for its configured epochs and returns one curve row per epoch.
    pub fn run_stage(&self, stage: Stage, store: &mut ParamStore) -> Result<Vec<CurveRow>> {
        let cfg = self.config.stage(stage);
        let mut opt = Optimizer::new(cfg.optimizer.clone())?;
        let mut rows = Vec::with_capacity(cfg.epochs);
        let skip = stage == Stage::Pretrain && !self.model.config.reliability_on;
        let steps_per_batch = if stage == Stage::Streams { 2 } else { 1 };
        let batches = self.data.len().div_ceil(cfg.batch_size.max(1));
        opt.plan((cfg.epochs * batches * steps_per_batch) as u64);
        for epoch in 0..cfg.epochs {
            let mut rng = rng_for(self.config.seed, &format!("shuffle/{}/{epoch}", stage.number()));
            let order = shuffled(self.data.len(), &mut rng);
            let mut sum = LossBreakdown::default();
            let mut count = 0usize;
            if !skip {
                for batch in order.chunks(cfg.batch_size) {
                    let parts: Vec<LossBreakdown> = match stage {
                        Stage::Pretrain => vec![self.step(stage, epoch, store, &mut opt, &UNWEIGHTED, |p| {
                            self.pretrain_terms(p, batch, epoch)
                        })?],
                        Stage::Streams => {
                            let mut v = Vec::with_capacity(2);
                            for streams in [Streams::LidarOnly, Streams::CameraOnly] {
                                v.push(self.step(stage, epoch, store, &mut opt, &self.config.weights, |p| {
                                    self.stream_terms(p, batch, streams)
                                })?);
                            }
                            v
                        }
                        Stage::Finetune => {
                            vec![self.step(stage, epoch, store, &mut opt, &self.config.weights, |p| {
                                self.finetune_terms(p, batch, epoch)
                            })?]
                        }
                    };
                    for b in parts {
                        sum.detection += b.detection;
                        sum.contrastive += b.contrastive;
                        sum.temporal += b.temporal;
                        sum.confidence += b.confidence;
                        sum.total += b.total;
                        count += 1;
                    }
                }
            }
            let n = count.max(1) as f64;
            rows.push(CurveRow {
                stage,
                epoch,
                loss: LossBreakdown {
                    detection: sum.detection / n,
                    contrastive: sum.contrastive / n,
                    temporal: sum.temporal / n,
                    confidence: sum.confidence / n,
                    total: sum.total / n,
                },
            });
        }
        Ok(rows)
    }
}

/// Runs `stages` in order, calling `after_stage` with the parameters at the
/// end of each.
pub fn train(
    model: &Model,
    store: &mut ParamStore,
    data: &[Sequence],
    config: &TrainConfig,
    stages: &[Stage],
    mut after_stage: impl FnMut(Stage, &ParamStore) -> Result<()>,
) -> Result<Vec<CurveRow>> {
    let trainer = Trainer::new(model, config, data)?;
    let mut rows = Vec::new();
    for &s in stages {
        rows.extend(trainer.run_stage(s, store)?);
        after_stage(s, store)?;
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bev::GridConfig;
    use crate::fusion::FusionConfig;
    use crate::head::HeadConfig;
    use crate::model::ModelConfig;
    use crate::reliability::ReliabilityConfig;
    use crate::rng::rng_from;
    use crate::scene::{simulate_sequence, MotionModel, SceneConfig, ViewGeometry};
    use crate::stfa::StfaConfig;

    fn tiny() -> (Model, Vec<Sequence>) {
        let view = ViewGeometry {
            height: 4,
            width: 8,
            ..ViewGeometry::default()
        };
        let scene = SceneConfig {
            steps: 2,
            n_points: 300,
            view: view.clone(),
            ..SceneConfig::default()
        };
        let cfg = ModelConfig {
            channels: 4,
            grid: GridConfig::square(24.0, 8),
            view,
            stfa: StfaConfig {
                d: 8,
                steps: 2,
                ..StfaConfig::default()
            },
            reliability: ReliabilityConfig {
                embed_dim: 8,
                hidden: 8,
                ..ReliabilityConfig::default()
            },
            fusion: FusionConfig {
                d_k: 4,
                pos_frequencies: vec![1.0],
                ..FusionConfig::default()
            },
            head: HeadConfig {
                hidden: 4,
                ..HeadConfig::default()
            },
            ..ModelConfig::default()
        };
        let data = (0..4)
            .map(|i| simulate_sequence(i, 2, None, &MotionModel::static_ego(0.5), &scene).unwrap())
            .collect();
        (Model::new(cfg).unwrap(), data)
    }

    fn quick(epochs: usize) -> TrainConfig {
        let stage = StageConfig {
            epochs,
            batch_size: 2,
            optimizer: OptimizerConfig {
                learning_rate: 1e-3,
                ..OptimizerConfig::default()
            },
        };
        TrainConfig {
            stage1: stage.clone(),
            stage2: stage.clone(),
            stage3: stage,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn zero_epochs_leave_parameters_untouched() {
        let (model, data) = tiny();
        let init = model.init(1);
        let mut store = init.clone();
        let rows = train(&model, &mut store, &data, &quick(0), &Stage::ALL, |_, _| Ok(())).unwrap();
        assert!(rows.is_empty());
        assert_eq!(
            crate::io::encode_checkpoint(&store).unwrap(),
            crate::io::encode_checkpoint(&init).unwrap()
        );
    }

    #[test]
    fn stage_gating_freezes_parameters() {
        let (model, data) = tiny();
        let init = model.init(2);
        let mut store = init.clone();
        train(&model, &mut store, &data, &quick(1), &[Stage::Pretrain], |_, _| Ok(())).unwrap();
        for (name, t) in store.iter() {
            let moved = t != init.get(name).unwrap();
            if name.starts_with("head.") || name.starts_with("fuse.") {
                assert!(!moved, "{name} changed in stage 1");
            }
        }
        assert!(store.get("rel.lidar.conf.w").unwrap() != init.get("rel.lidar.conf.w").unwrap());
        let before = store.clone();
        train(&model, &mut store, &data, &quick(1), &[Stage::Streams], |_, _| Ok(())).unwrap();
        assert_eq!(
            store.get("rel.lidar.conf.w").unwrap(),
            before.get("rel.lidar.conf.w").unwrap()
        );
        assert!(store.get("head.heat.w").unwrap() != before.get("head.heat.w").unwrap());
    }

    #[test]
    fn curves_have_one_row_per_epoch_and_weights_header() {
        let (model, data) = tiny();
        let mut store = model.init(3);
        let cfg = quick(2);
        let rows = train(&model, &mut store, &data, &cfg, &[Stage::Finetune], |_, _| Ok(())).unwrap();
        assert_eq!(rows.len(), 2);
        for r in &rows {
            assert!((r.loss.weighted(&cfg.weights) - r.loss.total).abs() < 1e-9);
        }
        let csv = curves_csv(&rows, &cfg.weights);
        assert!(csv.starts_with("# weights detection=1 contrastive=0.1 temporal=0.2 confidence=0.05\n"));
        assert_eq!(csv.lines().count(), 4);
    }

    #[test]
    fn training_is_deterministic() {
        let (model, data) = tiny();
        let run = || {
            let mut store = model.init(4);
            train(&model, &mut store, &data, &quick(1), &Stage::ALL, |_, _| Ok(())).unwrap();
            crate::io::encode_checkpoint(&store).unwrap()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn random_corruptions_are_valid() {
        let mut rng = rng_from(9);
        for _ in 0..200 {
            let spec = random_corruption(&mut rng);
            spec.validate().unwrap();
            assert!((0.0..=1.0).contains(&spec.severity()));
        }
    }

    #[test]
    fn stage_numbers() {
        assert_eq!(Stage::from_number(2).unwrap(), Stage::Streams);
        assert!(Stage::from_number(4).is_err());
    }
}
