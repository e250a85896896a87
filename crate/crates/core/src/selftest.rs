//! Gradient and closed-form self-checks, grouped by module.
//!
//! Each primitive is checked through a weighted sum of its output against
//! central differences. Linear and bilinear ops have no truncation error,
//! so they use a larger step and a tighter tolerance.

use std::fmt::Write as _;

use crate::attention::attend;
use crate::autodiff::{sigmoid_scalar, Tape, Var};
use crate::bev::GridConfig;
use crate::corruption::CorruptionSpec;
use crate::error::Result;
use crate::fusion::FusionConfig;
use crate::gradcheck::{grad_check, grad_check_store, grad_check_store_where};
use crate::head::HeadConfig;
use crate::losses::{confidence_loss, temporal_loss, total_loss, LossWeights};
use crate::model::{Model, ModelConfig, Streams};
use crate::reliability::{contrastive_loss, contrastive_loss_value, ReliabilityConfig};
use crate::rng::{rng_from, Rng};
use crate::scene::{simulate_sequence, MotionModel, SceneConfig, Sequence, ViewGeometry};
use crate::stfa::StfaConfig;
use crate::tensor::Tensor;
use crate::train::{TrainConfig, Trainer};

pub const LINEAR_TOLERANCE: f64 = 1e-8;
pub const TOLERANCE: f64 = 1e-4;
const STEP: f64 = 1e-5;
const LINEAR_STEP: f64 = 1e-3;

/// One named check and its worst relative error.
#[derive(Clone, Debug, PartialEq)]
pub struct Check {
    pub module: &'static str,
    pub name: String,
    pub max_rel_error: f64,
    pub tolerance: f64,
}

impl Check {
    pub fn passed(&self) -> bool {
        self.max_rel_error < self.tolerance
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct SelftestReport {
    pub checks: Vec<Check>,
}

impl SelftestReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(Check::passed)
    }

    pub fn failures(&self) -> impl Iterator<Item = &Check> {
        self.checks.iter().filter(|c| !c.passed())
    }

    /// Worst error per module, in first-seen order.
    pub fn module_max(&self) -> Vec<(&'static str, f64)> {
        let mut out: Vec<(&'static str, f64)> = Vec::new();
        for c in &self.checks {
            match out.iter_mut().find(|(m, _)| *m == c.module) {
                Some((_, e)) => *e = e.max(c.max_rel_error),
                None => out.push((c.module, c.max_rel_error)),
            }
        }
        out
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for c in &self.checks {
            let status = if c.passed() { "ok  " } else { "FAIL" };
            writeln!(
                out,
                "{status} {:<12} {:<28} err {:.3e} (tol {:.0e})",
                c.module, c.name, c.max_rel_error, c.tolerance
            )
            .expect("writing to a String");
        }
        out.push_str("max relative error per module:\n");
        for (m, e) in self.module_max() {
            writeln!(out, "  {m:<12} {e:.3e}").expect("writing to a String");
        }
        let failed = self.failures().count();
        writeln!(out, "{} checks, {failed} failed", self.checks.len()).expect("writing to a String");
        out
    }
}

/// Gradient check of `f` at `point`, recorded under `module`/`name`.
pub fn check_fn<F>(module: &'static str, name: &str, tolerance: f64, step: f64, f: F, point: &[Tensor]) -> Result<Check>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
{
    let report = grad_check(f, point, step)?;
    Ok(Check {
        module,
        name: name.to_string(),
        max_rel_error: report.max_rel_error,
        tolerance,
    })
}

fn uniform(rng: &mut Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    use rand::Rng as _;
    let n = shape.iter().product();
    Tensor::from_parts(shape.to_vec(), (0..n).map(|_| rng.random_range(lo..hi)).collect())
}

/// Values with magnitude in `[0.5, 1.5]` and random sign.
fn signed(rng: &mut Rng, shape: &[usize]) -> Tensor {
    use rand::Rng as _;
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let v = rng.random_range(0.5..1.5);
            if rng.random_bool(0.5) {
                v
            } else {
                -v
            }
        })
        .collect();
    Tensor::from_parts(shape.to_vec(), data)
}

/// `Σ w ⊙ x` with a fixed positive weight per element, so no gradient
/// cancels by symmetry.
fn weighted_sum<'t>(x: Var<'t>) -> Result<Var<'t>> {
    let shape = x.shape();
    let n: usize = shape.iter().product();
    let w = Tensor::from_parts(shape, (0..n).map(|i| 0.5 + ((i * 7) % 11) as f64 / 10.0).collect());
    x.mul(x.tape().leaf(w))?.sum()
}

type Unary = for<'t> fn(Var<'t>) -> Result<Var<'t>>;

/// Every tape primitive.
pub fn primitive_checks() -> Result<Vec<Check>> {
    const M: &str = "autodiff";
    let mut rng = rng_from(0x5e1f);
    let mut out = Vec::new();
    let a = uniform(&mut rng, &[3, 4], 0.5, 1.5);
    let b = uniform(&mut rng, &[4, 2], 0.5, 1.5);
    let c = uniform(&mut rng, &[3, 4], 0.5, 1.5);
    let row = uniform(&mut rng, &[4], 0.5, 1.5);
    let s = Tensor::scalar(0.7);

    let linear: [(&str, Unary); 8] = [
        ("transpose", |x| x.transpose()),
        ("scale", |x| x.scale(-1.7)),
        ("add_scalar", |x| x.add_scalar(0.3)),
        ("reshape", |x| x.reshape(&[2, 6])),
        ("sum_rows", |x| x.sum_rows()),
        ("mean_rows", |x| x.mean_rows()),
        ("sum_cols", |x| x.sum_cols()),
        ("mean", |x| x.mean()),
    ];
    for (name, op) in linear {
        out.push(check_fn(
            M,
            name,
            LINEAR_TOLERANCE,
            LINEAR_STEP,
            |_, v| weighted_sum(op(v[0])?),
            std::slice::from_ref(&a),
        )?);
    }
    out.push(check_fn(
        M,
        "matmul",
        LINEAR_TOLERANCE,
        LINEAR_STEP,
        |_, v| weighted_sum(v[0].matmul(v[1])?),
        &[a.clone(), b.clone()],
    )?);
    out.push(check_fn(
        M,
        "add",
        LINEAR_TOLERANCE,
        LINEAR_STEP,
        |_, v| weighted_sum(v[0].add(v[1])?),
        &[a.clone(), c.clone()],
    )?);
    out.push(check_fn(
        M,
        "sub",
        LINEAR_TOLERANCE,
        LINEAR_STEP,
        |_, v| weighted_sum(v[0].sub(v[1])?),
        &[a.clone(), c.clone()],
    )?);
    out.push(check_fn(
        M,
        "mul",
        LINEAR_TOLERANCE,
        LINEAR_STEP,
        |_, v| weighted_sum(v[0].mul(v[1])?),
        &[a.clone(), c.clone()],
    )?);
    out.push(check_fn(
        M,
        "add_row",
        LINEAR_TOLERANCE,
        LINEAR_STEP,
        |_, v| weighted_sum(v[0].add_row(v[1])?),
        &[a.clone(), row.clone()],
    )?);
    out.push(check_fn(
        M,
        "mul_row",
        LINEAR_TOLERANCE,
        LINEAR_STEP,
        |_, v| weighted_sum(v[0].mul_row(v[1])?),
        &[a.clone(), row.clone()],
    )?);
    out.push(check_fn(
        M,
        "scale_by",
        LINEAR_TOLERANCE,
        LINEAR_STEP,
        |_, v| weighted_sum(v[0].scale_by(v[1])?),
        &[a.clone(), s.clone()],
    )?);
    out.push(check_fn(
        M,
        "concat",
        LINEAR_TOLERANCE,
        LINEAR_STEP,
        |t, v| weighted_sum(t.concat(&[v[0], v[1]])?),
        &[a.clone(), row.clone()],
    )?);
    out.push(check_fn(
        M,
        "stack_rows",
        LINEAR_TOLERANCE,
        LINEAR_STEP,
        |t, v| weighted_sum(t.stack_rows(&[v[0], v[1]])?),
        &[a.clone(), c.clone()],
    )?);
    out.push(check_fn(
        M,
        "gather",
        LINEAR_TOLERANCE,
        LINEAR_STEP,
        |_, v| weighted_sum(v[0].gather(vec![Some(0), None, Some(5), Some(5), Some(11), Some(2)], &[2, 3])?),
        std::slice::from_ref(&a),
    )?);
    out.push(check_fn(
        M,
        "scatter_add",
        LINEAR_TOLERANCE,
        LINEAR_STEP,
        |_, v| weighted_sum(v[0].scatter_add((0..12).map(|i| (i * 5) % 7).collect(), &[7])?),
        std::slice::from_ref(&a),
    )?);

    let x = signed(&mut rng, &[3, 4]);
    let smooth: [(&str, Unary); 7] = [
        ("softmax_rows", |x| x.softmax_rows()),
        ("log_softmax_rows", |x| x.log_softmax_rows()),
        ("gelu", |x| x.gelu()),
        ("sigmoid", |x| x.sigmoid()),
        ("exp", |x| x.exp()),
        ("abs", |x| x.abs()),
        ("square", |x| x.square()),
    ];
    for (name, op) in smooth {
        out.push(check_fn(
            M,
            name,
            TOLERANCE,
            STEP,
            |_, v| weighted_sum(op(v[0])?),
            std::slice::from_ref(&x),
        )?);
    }
    out.push(check_fn(
        M,
        "ln",
        TOLERANCE,
        STEP,
        |_, v| weighted_sum(v[0].ln()?),
        std::slice::from_ref(&a),
    )?);
    out.push(check_fn(
        M,
        "l2_normalize_rows",
        TOLERANCE,
        STEP,
        |_, v| weighted_sum(v[0].l2_normalize_rows(1e-12)?),
        std::slice::from_ref(&x),
    )?);
    out.push(check_fn(
        M,
        "layer_norm",
        TOLERANCE,
        STEP,
        |_, v| weighted_sum(v[0].layer_norm(v[1], v[2], 1e-5)?),
        &[x.clone(), row.clone(), signed(&mut rng, &[4])],
    )?);
    let targets: Vec<f64> = (0..12).map(|i| [0.0, 1.0, 0.3][i % 3]).collect();
    let t2 = targets.clone();
    out.push(check_fn(
        M,
        "sigmoid_focal",
        TOLERANCE,
        STEP,
        move |_, v| v[0].sigmoid_focal(targets.clone(), 0.25, 2.0)?.sum(),
        std::slice::from_ref(&x),
    )?);
    out.push(check_fn(
        M,
        "bce",
        TOLERANCE,
        STEP,
        move |_, v| v[0].bce(t2.clone())?.sum(),
        &[uniform(&mut rng, &[3, 4], 0.2, 0.8)],
    )?);
    Ok(out)
}

/// Settings of the tiny end-to-end pipeline: 8×8 grid, STFA width 8, two steps.
pub fn tiny_configs() -> (ModelConfig, SceneConfig) {
    let view = ViewGeometry {
        height: 4,
        width: 8,
        ..ViewGeometry::default()
    };
    let scene = SceneConfig {
        extent_m: 24.0,
        steps: 2,
        n_points: 300,
        view: view.clone(),
        ..SceneConfig::default()
    };
    let model = ModelConfig {
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
    (model, scene)
}

fn tiny_sequences(scene: &SceneConfig, n: usize) -> Result<Vec<Sequence>> {
    (0..n)
        .map(|i| {
            simulate_sequence(
                0x7e57 + i as u64,
                scene.steps,
                None,
                &MotionModel::static_ego(scene.dt),
                scene,
            )
        })
        .collect()
}

/// Initial parameters with the zero-initialized STFA projection replaced,
/// so gradients reach the STFA internals through the camera grid.
fn checkable_store(model: &Model, seed: u64) -> crate::nn::ParamStore {
    let mut store = model.init(seed);
    let rows = model.config.stfa.pooled_dim();
    store.init_weight("stfa.proj.w", rows, model.config.channels, &mut rng_from(seed));
    store
}

fn store_check<F>(module: &'static str, name: &str, store: &crate::nn::ParamStore, prefix: &str, f: F) -> Result<Check>
where
    F: for<'t, 's> Fn(&crate::nn::Params<'t, 's>) -> Result<Var<'t>>,
{
    store_check_step(module, name, store, prefix, STEP, f)
}

fn store_check_step<F>(
    module: &'static str,
    name: &str,
    store: &crate::nn::ParamStore,
    prefix: &str,
    step: f64,
    f: F,
) -> Result<Check>
where
    F: for<'t, 's> Fn(&crate::nn::Params<'t, 's>) -> Result<Var<'t>>,
{
    let report = grad_check_store_where(store, |n| n.starts_with(prefix), f, step)?;
    Ok(Check {
        module,
        name: name.to_string(),
        max_rel_error: report.max_rel_error,
        tolerance: TOLERANCE,
    })
}

/// Composite checks of each module inside the tiny pipeline.
pub fn module_checks() -> Result<Vec<Check>> {
    let mut out = Vec::new();
    let mut rng = rng_from(0xa77e);
    out.push(check_fn(
        "attention",
        "attend",
        TOLERANCE,
        STEP,
        |_, v| weighted_sum(attend(v[0], v[1], v[2], None)?.0),
        &[
            signed(&mut rng, &[3, 4]),
            signed(&mut rng, &[5, 4]),
            signed(&mut rng, &[5, 2]),
        ],
    )?);

    let (cfg, scene) = tiny_configs();
    let model = Model::new(cfg)?;
    let store = checkable_store(&model, 3);
    let seqs = tiny_sequences(&scene, 2)?;
    let samples = seqs
        .iter()
        .map(|s| model.prepare(s, &CorruptionSpec::clean()))
        .collect::<Result<Vec<_>>>()?;
    let sample = &samples[0];

    out.push(store_check("bev", "lidar encoder", &store, "enc.lidar.", |p| {
        weighted_sum(model.encode_lidar(p, sample)?)
    })?);
    out.push(store_check("bev", "lift-splat camera encoder", &store, "cam.", |p| {
        weighted_sum(model.encode_camera(p, sample)?.0)
    })?);
    // Checked apart from the temporal loss, with a wider step: gradients of
    // the attention projections are small next to the camera grid's value,
    // so a 1e-5 step is dominated by rounding.
    out.push(store_check_step(
        "stfa",
        "camera modulation",
        &store,
        "stfa.",
        1e-4,
        |p| weighted_sum(model.encode_camera(p, sample)?.0),
    )?);
    out.push(store_check("stfa", "temporal loss", &store, "stfa.", |p| {
        let (_, spatial) = model.encode_camera(p, sample)?;
        Ok(temporal_loss(&spatial)?.expect("two steps"))
    })?);
    out.push(store_check(
        "reliability",
        "contrastive + confidence",
        &store,
        "rel.",
        |p| {
            let rc = &model.config.reliability;
            let mut zl = Vec::new();
            let mut zc = Vec::new();
            let mut conf = Vec::new();
            for s in &samples {
                let enc = model.encode(p, s, Streams::Both)?;
                let sc = model.score(p, &enc)?;
                zl.push(sc.z_lidar);
                zc.push(sc.z_camera);
                conf.extend([sc.c_lidar, sc.c_camera]);
            }
            let tape = p.tape();
            let con = contrastive_loss(
                tape.stack_rows(&zl)?,
                tape.stack_rows(&zc)?,
                None,
                rc.temperature,
                rc.symmetric,
            )?;
            con.add(confidence_loss(&conf, &[0.9, 0.2, 0.6, 0.4])?)
        },
    )?);
    let conf_point = [Tensor::scalar(0.7), Tensor::scalar(0.4)];
    let fusion_inputs = {
        let tape = Tape::new();
        let p = crate::nn::Params::new(&tape, &store);
        let enc = model.encode(&p, sample, Streams::Both)?;
        (enc.lidar.tensor(), enc.camera.tensor())
    };
    out.push(check_fn(
        "fusion",
        "cw_mca wrt grids and confidences",
        TOLERANCE,
        STEP,
        |t, v| {
            let p = crate::nn::Params::new(t, &store);
            weighted_sum(model.fusion().forward(&p, v[0], v[1], v[2], v[3])?)
        },
        &[
            fusion_inputs.0.clone(),
            fusion_inputs.1.clone(),
            conf_point[0].clone(),
            conf_point[1].clone(),
        ],
    )?);
    out.push(store_check("fusion", "cw_mca parameters", &store, "fuse.", |p| {
        let enc = model.encode(p, sample, Streams::Both)?;
        let tape = p.tape();
        let fused = model.fusion().forward(
            p,
            enc.lidar,
            enc.camera,
            tape.leaf(conf_point[0].clone()),
            tape.leaf(conf_point[1].clone()),
        )?;
        weighted_sum(fused)
    })?);
    out.push(store_check("head", "detection loss", &store, "head.", |p| {
        let enc = model.encode(p, sample, Streams::Both)?;
        let one = || p.tape().leaf(Tensor::scalar(1.0));
        let head = model.detect_head(p, &enc, one(), one())?;
        model.detection_loss(&head, &sample.targets)
    })?);
    out.push(pipeline_check()?);
    Ok(out)
}

/// Weighted total loss of a batch of two through the whole tiny pipeline,
/// against every parameter.
pub fn pipeline_check() -> Result<Check> {
    let (cfg, scene) = tiny_configs();
    let model = Model::new(cfg)?;
    let store = checkable_store(&model, 5);
    let seqs = tiny_sequences(&scene, 2)?;
    let tc = TrainConfig {
        corruption_rate: 0.0,
        ..TrainConfig::default()
    };
    let trainer = Trainer::new(&model, &tc, &seqs)?;
    let report = grad_check_store(&store, |p| Ok(trainer.batch_loss(p, &[0, 1], 0)?.0), STEP)?;
    Ok(Check {
        module: "pipeline",
        name: "weighted total loss".into(),
        max_rel_error: report.max_rel_error,
        tolerance: TOLERANCE,
    })
}

fn corner(name: &str, got: f64, expected: f64) -> Check {
    Check {
        module: "corners",
        name: name.into(),
        max_rel_error: (got - expected).abs(),
        tolerance: 1e-9,
    }
}

/// Closed-form values of the losses and activations.
pub fn corner_checks() -> Result<Vec<Check>> {
    let one = Tensor::new(&[1, 3], vec![0.6, 0.0, 0.8])?;
    let k = 4;
    let same = Tensor::new(&[k, 2], [1.0, 0.0].repeat(k))?;
    let mut out = vec![
        corner("contrastive K=1", contrastive_loss_value(&one, &one, 0.07)?, 0.0),
        corner(
            "contrastive uniform",
            contrastive_loss_value(&same, &same, 0.5)?,
            (k as f64).ln(),
        ),
        corner("sigmoid(0)", sigmoid_scalar(0.0), 0.5),
        corner(
            "total loss of ones",
            total_loss(1.0, 1.0, 1.0, 1.0, &LossWeights::default())?.total,
            1.35,
        ),
    ];
    let mut rng = rng_from(0x50f7);
    let rows = signed(&mut rng, &[1000, 7]).map(|v| v * 10.0);
    let tape = Tape::new();
    let sm = tape.leaf(rows).softmax_rows()?.tensor();
    let worst = sm
        .data()
        .chunks(7)
        .map(|r| (r.iter().sum::<f64>() - 1.0).abs())
        .fold(0.0, f64::max);
    out.push(corner("softmax row sums", 1.0 + worst, 1.0));
    Ok(out)
}

/// Everything above.
pub fn run() -> Result<SelftestReport> {
    let mut checks = primitive_checks()?;
    checks.extend(module_checks()?);
    checks.extend(corner_checks()?);
    Ok(SelftestReport { checks })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn primitives_pass() {
        let checks = primitive_checks().unwrap();
        for c in &checks {
            assert!(c.passed(), "{c:?}");
        }
    }

    #[test]
    fn modules_and_pipeline_pass() {
        for c in module_checks().unwrap() {
            assert!(c.passed(), "{c:?}");
        }
    }

    #[test]
    fn corners_pass() {
        for c in corner_checks().unwrap() {
            assert!(c.passed(), "{c:?}");
        }
    }

    #[test]
    fn wrong_gradient_is_reported_by_name() {
        let check = check_fn(
            "autodiff",
            "detached_square",
            TOLERANCE,
            STEP,
            |t, v| v[0].mul(t.leaf(v[0].tensor()))?.sum(),
            &[Tensor::vector(vec![1.0, 2.0]).unwrap()],
        )
        .unwrap();
        let report = SelftestReport { checks: vec![check] };
        assert!(!report.passed());
        let text = report.to_text();
        assert!(text.contains("FAIL autodiff     detached_square"), "{text}");
        assert!(text.contains("1 failed"));
    }

    #[test]
    fn module_max_keeps_worst() {
        let mk = |m, e| Check {
            module: m,
            name: "x".into(),
            max_rel_error: e,
            tolerance: 1.0,
        };
        let r = SelftestReport {
            checks: vec![mk("a", 0.1), mk("b", 0.2), mk("a", 0.3)],
        };
        assert_eq!(r.module_max(), vec![("a", 0.3), ("b", 0.2)]);
    }
}
