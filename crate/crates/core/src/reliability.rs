//! Cross-modal contrastive embeddings and per-modality confidence scores.
//!
//! Each modality's BEV grid is average-pooled, mapped by an MLP into a unit
//! 128-d embedding, and scored by a logistic head. Clean LiDAR/camera pairs
//! of the same scene are positives; other scenes and corrupted copies are
//! negatives.

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::autodiff::Var;
use crate::corruption::{CorruptionSpec, Modality};
use crate::error::{Error, Result};
use crate::nn::{Mlp, ParamStore, Params};
use crate::rng::{rng_from, Rng};
use crate::tensor::Tensor;

/// Norm below which a pooled grid is considered empty.
pub const DEGENERATE_EPS: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ReliabilityConfig {
    pub embed_dim: usize,
    pub hidden: usize,
    pub temperature: f64,
    /// Add the camera-anchored direction to the contrastive loss.
    pub symmetric: bool,
}

impl Default for ReliabilityConfig {
    fn default() -> Self {
        ReliabilityConfig {
            embed_dim: 128,
            hidden: 256,
            temperature: 0.07,
            symmetric: false,
        }
    }
}

impl ReliabilityConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0) {
            return Err(Error::Config("temperature must be positive".into()));
        }
        if self.embed_dim == 0 || self.hidden == 0 {
            return Err(Error::Config("embedding sizes must be positive".into()));
        }
        Ok(())
    }
}

fn prefix(m: Modality) -> &'static str {
    match m {
        Modality::Lidar => "rel.lidar",
        Modality::Camera => "rel.camera",
    }
}

pub struct Reliability {
    pub config: ReliabilityConfig,
    /// Channels of the incoming BEV grids.
    pub channels: usize,
}

impl Reliability {
    pub fn new(config: ReliabilityConfig, channels: usize) -> Result<Self> {
        config.validate()?;
        Ok(Reliability { config, channels })
    }

    fn mlp(&self, m: Modality) -> Mlp {
        Mlp::new(
            format!("{}.embed", prefix(m)),
            &[self.channels, self.config.hidden, self.config.embed_dim],
        )
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut Rng) {
        for m in [Modality::Lidar, Modality::Camera] {
            self.mlp(m).init(store, rng);
            store.init_weight(&format!("{}.conf.w", prefix(m)), self.config.embed_dim, 1, rng);
            store.init_const(&format!("{}.conf.b", prefix(m)), &[1], 0.0);
        }
    }

    /// Unit embedding `[1 × embed_dim]` of a token-major `[H·W × C]` grid.
    pub fn embed<'t>(&self, p: &Params<'t, '_>, tokens: Var<'t>, m: Modality) -> Result<Var<'t>> {
        let c = tokens.shape()[1];
        if c != self.channels {
            return Err(Error::Dimension {
                op: "embed_modality",
                lhs: tokens.shape(),
                rhs: vec![0, self.channels],
            });
        }
        let pooled = tokens.mean_rows()?.reshape(&[1, c])?;
        let norm = pooled.value().data().iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm <= DEGENERATE_EPS {
            return Err(Error::Degenerate(format!("{} grid pools to a zero vector", prefix(m))));
        }
        self.mlp(m).forward(p, pooled)?.l2_normalize_rows(DEGENERATE_EPS)
    }

    /// `σ(z·W + b)` for each row of `z`, shape `[K × 1]`.
    pub fn confidence<'t>(&self, p: &Params<'t, '_>, z: Var<'t>, m: Modality) -> Result<Var<'t>> {
        z.matmul(p.get(&format!("{}.conf.w", prefix(m)))?)?
            .add_row(p.get(&format!("{}.conf.b", prefix(m)))?)?
            .sigmoid()
    }
}

/// Temperature-scaled InfoNCE with LiDAR anchors. Row `i` of each batch is
/// the same scene; `extra_camera` rows join every denominator as negatives.
pub fn contrastive_loss<'t>(
    z_lidar: Var<'t>,
    z_camera: Var<'t>,
    extra_camera: Option<Var<'t>>,
    temperature: f64,
    symmetric: bool,
) -> Result<Var<'t>> {
    let (ls, cs) = (z_lidar.shape(), z_camera.shape());
    if ls.len() != 2 || ls != cs {
        return Err(Error::Dimension {
            op: "contrastive_loss",
            lhs: ls,
            rhs: cs,
        });
    }
    let k = ls[0];
    if k == 0 {
        return Err(Error::Argument("contrastive loss needs at least one pair".into()));
    }
    if !(temperature > 0.0) {
        return Err(Error::Argument("temperature must be positive".into()));
    }
    let tape = z_lidar.tape();
    let candidates = match extra_camera {
        Some(extra) => tape.stack_rows(&[z_camera, extra])?,
        None => z_camera,
    };
    let loss = anchored_nce(z_lidar, candidates, k, temperature)?;
    if symmetric {
        let back = anchored_nce(z_camera, z_lidar, k, temperature)?;
        loss.add(back)?.scale(0.5)
    } else {
        Ok(loss)
    }
}

fn anchored_nce<'t>(anchors: Var<'t>, candidates: Var<'t>, k: usize, temperature: f64) -> Result<Var<'t>> {
    let n = candidates.shape()[0];
    let logp = anchors
        .matmul(candidates.transpose()?)?
        .scale(1.0 / temperature)?
        .log_softmax_rows()?;
    let diag = logp.gather((0..k).map(|i| Some(i * n + i)).collect(), &[k])?;
    diag.mean()?.scale(-1.0)
}

/// A negative pair for the contrastive objective.
#[derive(Clone, Debug, PartialEq)]
pub enum NegativePair {
    /// LiDAR of one scene against the camera of another.
    CrossScene { lidar: usize, camera: usize },
    /// Clean and corrupted copies of the same scene.
    Corrupted { scene: usize, spec: CorruptionSpec },
}

#[derive(Clone, Debug, PartialEq)]
pub struct PairPlan {
    /// `(scene, scene)` clean pairs.
    pub positives: Vec<(usize, usize)>,
    pub negatives: Vec<NegativePair>,
}

impl PairPlan {
    pub fn corrupted(&self) -> impl Iterator<Item = (usize, &CorruptionSpec)> {
        self.negatives.iter().filter_map(|n| match n {
            NegativePair::Corrupted { scene, spec } => Some((*scene, spec)),
            _ => None,
        })
    }
}

/// Draws corrupted negatives: each scene independently with probability
/// `rate`, with a spec picked uniformly from `pool`.
#[derive(Clone, Debug, PartialEq)]
pub struct CorruptionSampler {
    pub rate: f64,
    pub pool: Vec<CorruptionSpec>,
}

impl CorruptionSampler {
    pub fn disabled() -> Self {
        CorruptionSampler {
            rate: 0.0,
            pool: Vec::new(),
        }
    }
}

/// Plans positives and negatives for a batch of `k` scenes.
pub fn make_pairs(k: usize, sampler: &CorruptionSampler, seed: u64) -> PairPlan {
    let positives = (0..k).map(|i| (i, i)).collect();
    let mut negatives: Vec<NegativePair> = (0..k)
        .flat_map(|i| {
            (0..k)
                .filter(move |&j| j != i)
                .map(move |j| NegativePair::CrossScene { lidar: i, camera: j })
        })
        .collect();
    if !sampler.pool.is_empty() && sampler.rate > 0.0 {
        let mut rng = rng_from(seed);
        for scene in 0..k {
            if rng.random_bool(sampler.rate.clamp(0.0, 1.0)) {
                let mut spec = sampler.pool[rng.random_range(0..sampler.pool.len())].clone();
                spec.seed = rng.random();
                negatives.push(NegativePair::Corrupted { scene, spec });
            }
        }
    }
    PairPlan { positives, negatives }
}

/// Direct evaluation of the one-directional loss on plain unit vectors.
pub fn contrastive_loss_value(z_lidar: &Tensor, z_camera: &Tensor, temperature: f64) -> Result<f64> {
    let tape = crate::autodiff::Tape::new();
    Ok(contrastive_loss(
        tape.leaf(z_lidar.clone()),
        tape.leaf(z_camera.clone()),
        None,
        temperature,
        false,
    )?
    .item())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tape;
    use crate::corruption::CorruptionKind;
    use crate::gradcheck::grad_check;

    fn unit_rows(k: usize, d: usize, seed: usize) -> Tensor {
        let mut data: Vec<f64> = (0..k * d)
            .map(|i| (((i * 37 + seed * 11) % 23) as f64 - 11.0) / 7.0)
            .collect();
        for r in 0..k {
            let n = data[r * d..(r + 1) * d].iter().map(|v| v * v).sum::<f64>().sqrt();
            data[r * d..(r + 1) * d].iter_mut().for_each(|v| *v /= n);
        }
        Tensor::new(&[k, d], data).unwrap()
    }

    #[test]
    fn single_pair_has_zero_loss() {
        let z = unit_rows(1, 5, 1);
        assert_eq!(contrastive_loss_value(&z, &unit_rows(1, 5, 2), 0.07).unwrap(), 0.0);
    }

    #[test]
    fn uniform_similarities_give_ln_k() {
        let z = Tensor::new(&[4, 2], vec![1.0, 0.0, 1.0, 0.0, 1.0, 0.0, 1.0, 0.0]).unwrap();
        let l = contrastive_loss_value(&z, &z, 0.07).unwrap();
        assert!((l - 4f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn matches_direct_formula() {
        let (zl, zc) = (unit_rows(3, 4, 1), unit_rows(3, 4, 2));
        let tau = 0.07;
        let sim = |i: usize, j: usize| (0..4).map(|c| zl.get2(i, c) * zc.get2(j, c)).sum::<f64>();
        let mut expect = 0.0;
        for i in 0..3 {
            let denom: f64 = (0..3).map(|j| (sim(i, j) / tau).exp()).sum();
            expect += -((sim(i, i) / tau).exp() / denom).ln();
        }
        expect /= 3.0;
        let got = contrastive_loss_value(&zl, &zc, tau).unwrap();
        assert!((got - expect).abs() < 1e-10 * expect.abs().max(1.0));
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let point = [unit_rows(4, 3, 1), unit_rows(4, 3, 5), unit_rows(2, 3, 9)];
        let report = grad_check(
            |_, v| {
                let zl = v[0].l2_normalize_rows(1e-12)?;
                let zc = v[1].l2_normalize_rows(1e-12)?;
                let extra = v[2].l2_normalize_rows(1e-12)?;
                contrastive_loss(zl, zc, Some(extra), 0.5, true)
            },
            &point,
            1e-5,
        )
        .unwrap();
        assert!(report.passes(1e-4), "{report:?}");
    }

    fn rel() -> (Reliability, ParamStore) {
        let r = Reliability::new(ReliabilityConfig::default(), 6).unwrap();
        let mut store = ParamStore::new();
        r.init(&mut store, &mut rng_from(4));
        (r, store)
    }

    #[test]
    fn embeddings_are_unit_and_128_wide() {
        let (r, store) = rel();
        let tape = Tape::new();
        let p = Params::new(&tape, &store);
        let grid = Tensor::new(&[4, 6], (0..24).map(|i| (i as f64).sin()).collect()).unwrap();
        let z = r.embed(&p, tape.leaf(grid.clone()), Modality::Lidar).unwrap().tensor();
        assert_eq!(z.shape(), &[1, 128]);
        assert!((z.data().iter().map(|v| v * v).sum::<f64>() - 1.0).abs() < 1e-9);
        let again = r.embed(&p, tape.leaf(grid), Modality::Lidar).unwrap().tensor();
        assert_eq!(z, again);
        let zero = r.embed(&p, tape.leaf(Tensor::zeros(&[4, 6])), Modality::Camera);
        assert!(matches!(zero, Err(Error::Degenerate(_))));
    }

    #[test]
    fn confidence_closed_forms_and_batching() {
        let (r, mut store) = rel();
        let tape = Tape::new();
        let z = unit_rows(3, 128, 2);
        {
            let p = Params::new(&tape, &store);
            let batch = r
                .confidence(&p, tape.leaf(z.clone()), Modality::Lidar)
                .unwrap()
                .tensor();
            for i in 0..3 {
                let one = Tensor::matrix(1, 128, z.row(i).to_vec()).unwrap();
                let single = r.confidence(&p, tape.leaf(one), Modality::Lidar).unwrap().item();
                assert_eq!(batch.data()[i], single);
                assert!(single > 0.0 && single < 1.0);
            }
        }
        store.insert("rel.camera.conf.w", Tensor::zeros(&[128, 1]));
        let p = Params::new(&tape, &store);
        let half = r.confidence(&p, tape.leaf(z.clone()), Modality::Camera).unwrap();
        assert!(half.tensor().data().iter().all(|&c| c == 0.5));
        drop(p);
        store.insert("rel.camera.conf.b", Tensor::vector(vec![3f64.ln()]).unwrap());
        let p = Params::new(&tape, &store);
        let c = r.confidence(&p, tape.leaf(z), Modality::Camera).unwrap();
        assert!(c.tensor().data().iter().all(|&c| (c - 0.75).abs() < 1e-15));
    }

    #[test]
    fn pair_planning() {
        let plain = make_pairs(4, &CorruptionSampler::disabled(), 1);
        assert_eq!(plain.positives.len(), 4);
        assert_eq!(plain.negatives.len(), 12);
        assert_eq!(plain.corrupted().count(), 0);
        let sampler = CorruptionSampler {
            rate: 1.0,
            pool: vec![CorruptionSpec::new(CorruptionKind::ObjectDrop { rate: 0.5 }, 0).unwrap()],
        };
        let a = make_pairs(4, &sampler, 7);
        assert_eq!(a.corrupted().count(), 4);
        assert_eq!(a, make_pairs(4, &sampler, 7));
    }
}
