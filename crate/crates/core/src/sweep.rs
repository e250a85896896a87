//! Evaluation under corruption scenarios and the ablation sweep, with
//! CSV and plain-text reports.
//!
//! Evaluation fans out over scenes on up to `threads` workers; results are
//! gathered in scene order so reports do not depend on the thread count.

use std::fmt::Write as _;

use crate::corruption::{CorruptionSpec, ScenarioTable};
use crate::error::{Error, Result};
use crate::fusion::FusionMode;
use crate::geometry::Box3D;
use crate::head::Detection;
use crate::metrics::{evaluate, EvalReport};
use crate::model::{Model, ModelConfig};
use crate::nn::ParamStore;
use crate::rng::split_indexed;
use crate::scene::Sequence;
use crate::stfa::StfaVariant;

/// Worker cap from `RELIFUSION_THREADS`, defaulting to the available cores.
pub fn worker_count() -> usize {
    std::env::var("RELIFUSION_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
}

/// `f(i)` for `i in 0..n` on up to `threads` workers, in index order.
pub fn par_map<T: Send>(n: usize, threads: usize, f: impl Fn(usize) -> Result<T> + Sync) -> Result<Vec<T>> {
    let threads = threads.clamp(1, n.max(1));
    if threads == 1 {
        return (0..n).map(f).collect();
    }
    let f = &f;
    let chunks: Vec<Result<Vec<T>>> = std::thread::scope(|s| {
        let handles: Vec<_> = (0..threads)
            .map(|w| s.spawn(move || (w..n).step_by(threads).map(f).collect::<Result<Vec<T>>>()))
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("evaluation worker panicked"))
            .collect()
    });
    let mut per_worker: Vec<std::vec::IntoIter<T>> = Vec::with_capacity(threads);
    for c in chunks {
        per_worker.push(c?.into_iter());
    }
    Ok((0..n)
        .map(|i| per_worker[i % threads].next().expect("worker produced every item"))
        .collect())
}

/// The spec applied to scene `i`: same kind, scene-specific random stream.
pub fn scene_spec(spec: &CorruptionSpec, scene: usize) -> CorruptionSpec {
    CorruptionSpec {
        seed: split_indexed(spec.seed, "scene", scene),
        ..spec.clone()
    }
}

/// Evaluation of one scenario.
#[derive(Clone, Debug, PartialEq)]
pub struct ScenarioResult {
    pub name: String,
    pub report: EvalReport,
    /// Mean confidences over scenes; NaN with reliability off.
    pub c_lidar: f64,
    pub c_camera: f64,
}

pub fn evaluate_scenario(
    model: &Model,
    store: &ParamStore,
    scenes: &[Sequence],
    name: &str,
    spec: &CorruptionSpec,
    iou: f64,
    threads: usize,
) -> Result<ScenarioResult> {
    let outputs: Vec<(Vec<Detection>, Vec<Box3D>, f64, f64)> = par_map(scenes.len(), threads, |i| {
        let sample = model.prepare(&scenes[i], &scene_spec(spec, i))?;
        let pred = model.predict(store, &sample)?;
        Ok((
            pred.detections,
            scenes[i].current().gt_boxes.clone(),
            pred.c_lidar,
            pred.c_camera,
        ))
    })?;
    let n = outputs.len().max(1) as f64;
    let (c_lidar, c_camera) = if model.config.reliability_on {
        (
            outputs.iter().map(|o| o.2).sum::<f64>() / n,
            outputs.iter().map(|o| o.3).sum::<f64>() / n,
        )
    } else {
        (f64::NAN, f64::NAN)
    };
    let pairs: Vec<(Vec<Detection>, Vec<Box3D>)> = outputs.into_iter().map(|o| (o.0, o.1)).collect();
    Ok(ScenarioResult {
        name: name.to_string(),
        report: evaluate(&pairs, model.config.classes, iou),
        c_lidar,
        c_camera,
    })
}

/// Every scenario of `table`, in table order.
pub fn robustness_sweep(
    model: &Model,
    store: &ParamStore,
    scenes: &[Sequence],
    table: &ScenarioTable,
    iou: f64,
    threads: usize,
) -> Result<Vec<ScenarioResult>> {
    table
        .scenarios
        .iter()
        .map(|s| evaluate_scenario(model, store, scenes, &s.name, &s.spec, iou, threads))
        .collect()
}

fn num(v: f64) -> String {
    if v.is_nan() {
        "nan".into()
    } else {
        format!("{v:.6}")
    }
}

/// One row per scenario and class: `scenario,class,AP,mAP,mATE`.
pub fn robustness_csv(results: &[ScenarioResult], class_names: &[&str]) -> String {
    let mut out = String::from("scenario,class,AP,mAP,mATE\n");
    for r in results {
        for (k, ap) in r.report.class_ap.iter().enumerate() {
            let class = class_names.get(k).copied().unwrap_or("?");
            writeln!(
                out,
                "{},{},{},{},{}",
                r.name,
                class,
                num(ap.unwrap_or(f64::NAN)),
                num(r.report.map),
                num(r.report.mate)
            )
            .expect("writing to a String");
        }
    }
    out
}

/// Aligned text table: scenario, mAP, mATE and mean confidences.
pub fn robustness_table(results: &[ScenarioResult]) -> String {
    let width = results.iter().map(|r| r.name.len()).max().unwrap_or(0).max(8);
    let mut out = format!(
        "{:<width$}  {:>8}  {:>8}  {:>8}  {:>8}\n",
        "scenario", "mAP", "mATE", "c_lidar", "c_camera"
    );
    for r in results {
        writeln!(
            out,
            "{:<width$}  {:>8}  {:>8}  {:>8}  {:>8}",
            r.name,
            fmt_short(r.report.map),
            fmt_short(r.report.mate),
            fmt_short(r.c_lidar),
            fmt_short(r.c_camera)
        )
        .expect("writing to a String");
    }
    out
}

fn fmt_short(v: f64) -> String {
    if v.is_nan() {
        "-".into()
    } else {
        format!("{v:.4}")
    }
}

/// A named model configuration of the ablation study.
#[derive(Clone, Debug, PartialEq)]
pub struct Variant {
    pub name: String,
    pub stfa_on: bool,
    pub stfa_variant: StfaVariant,
    pub fusion: FusionMode,
    pub reliability_on: bool,
}

impl Variant {
    pub fn apply(&self, base: &ModelConfig) -> ModelConfig {
        let mut cfg = base.clone();
        cfg.stfa_on = self.stfa_on;
        cfg.stfa.variant = self.stfa_variant;
        cfg.fusion.mode = self.fusion;
        cfg.reliability_on = self.reliability_on;
        cfg
    }

    fn new(name: &str, stfa_on: bool, fusion: FusionMode, reliability_on: bool) -> Self {
        Variant {
            name: name.into(),
            stfa_on,
            stfa_variant: StfaVariant::SpatioTemporal,
            fusion,
            reliability_on,
        }
    }
}

/// Cumulative component ablation: base, +STFA, +CW-MCA, +reliability.
pub fn component_variants() -> Vec<Variant> {
    vec![
        Variant::new("base", false, FusionMode::Add, false),
        Variant::new("+stfa", true, FusionMode::Add, false),
        Variant::new("+cw_mca", true, FusionMode::CwMca, false),
        Variant::new("+reliability", true, FusionMode::CwMca, true),
    ]
}

/// Temporal-module ablation on the full model.
pub fn stfa_variants() -> Vec<Variant> {
    let full = |name: &str, on: bool, v: StfaVariant| Variant {
        stfa_variant: v,
        ..Variant::new(name, on, FusionMode::CwMca, true)
    };
    vec![
        full("no_stfa", false, StfaVariant::SpatioTemporal),
        full("spatial", true, StfaVariant::Spatial),
        full("temporal", true, StfaVariant::Temporal),
        full("spatio_temporal", true, StfaVariant::SpatioTemporal),
    ]
}

/// Fusion-mode ablation on the full model.
pub fn fusion_variants() -> Vec<Variant> {
    FusionMode::ALL
        .into_iter()
        .map(|m| Variant::new(m.name(), true, m, true))
        .collect()
}

/// Ablation outcome: `map[variant][seed][scenario]`.
#[derive(Clone, Debug, PartialEq)]
pub struct AblationTable {
    pub variants: Vec<String>,
    pub scenarios: Vec<String>,
    pub seeds: Vec<u64>,
    pub map: Vec<Vec<Vec<f64>>>,
}

pub fn median(values: &[f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    if v.len() % 2 == 1 {
        v[m]
    } else {
        (v[m - 1] + v[m]) / 2.0
    }
}

impl AblationTable {
    /// Median over seeds of variant `v` on scenario `s`.
    pub fn median(&self, v: usize, s: usize) -> f64 {
        let vals: Vec<f64> = self.map[v].iter().map(|per_seed| per_seed[s]).collect();
        median(&vals)
    }

    pub fn scenario_index(&self, name: &str) -> Result<usize> {
        self.scenarios
            .iter()
            .position(|s| s == name)
            .ok_or_else(|| Error::Argument(format!("no scenario `{name}` in the ablation table")))
    }

    pub fn variant_index(&self, name: &str) -> Result<usize> {
        self.variants
            .iter()
            .position(|s| s == name)
            .ok_or_else(|| Error::Argument(format!("no variant `{name}` in the ablation table")))
    }

    /// `variant,scenario,median_mAP,` then one column per seed.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("variant,scenario,median_mAP");
        for s in &self.seeds {
            write!(out, ",seed_{s}").expect("writing to a String");
        }
        out.push('\n');
        for (v, name) in self.variants.iter().enumerate() {
            for (s, scen) in self.scenarios.iter().enumerate() {
                write!(out, "{name},{scen},{}", num(self.median(v, s))).expect("writing to a String");
                for per_seed in &self.map[v] {
                    write!(out, ",{}", num(per_seed[s])).expect("writing to a String");
                }
                out.push('\n');
            }
        }
        out
    }

    /// Variants as rows, scenarios as columns, median mAP in cells.
    pub fn to_text(&self) -> String {
        let vw = self.variants.iter().map(String::len).max().unwrap_or(0).max(7);
        let cw = self.scenarios.iter().map(String::len).max().unwrap_or(0).max(8);
        let mut out = format!("{:<vw$}", "variant");
        for s in &self.scenarios {
            write!(out, "  {s:>cw$}").expect("writing to a String");
        }
        out.push('\n');
        for (v, name) in self.variants.iter().enumerate() {
            write!(out, "{name:<vw$}").expect("writing to a String");
            for s in 0..self.scenarios.len() {
                write!(out, "  {:>cw$}", fmt_short(self.median(v, s))).expect("writing to a String");
            }
            out.push('\n');
        }
        out
    }
}

/// Trains and evaluates every variant on every seed. `run` trains one
/// model for `(config, seed)` and returns its parameters and test scenes.
pub fn ablation_sweep(
    base: &ModelConfig,
    variants: &[Variant],
    seeds: &[u64],
    table: &ScenarioTable,
    iou: f64,
    threads: usize,
    mut run: impl FnMut(&Model, u64) -> Result<(ParamStore, Vec<Sequence>)>,
) -> Result<AblationTable> {
    let mut map = Vec::with_capacity(variants.len());
    for v in variants {
        let model = Model::new(v.apply(base))?;
        let mut per_seed = Vec::with_capacity(seeds.len());
        for &seed in seeds {
            let (store, test) = run(&model, seed)?;
            let results = robustness_sweep(&model, &store, &test, table, iou, threads)?;
            per_seed.push(results.iter().map(|r| r.report.map).collect());
        }
        map.push(per_seed);
    }
    Ok(AblationTable {
        variants: variants.iter().map(|v| v.name.clone()).collect(),
        scenarios: table.scenarios.iter().map(|s| s.name.clone()).collect(),
        seeds: seeds.to_vec(),
        map,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn par_map_keeps_order() {
        let v = par_map(10, 3, |i| Ok(i * i)).unwrap();
        assert_eq!(v, (0..10).map(|i| i * i).collect::<Vec<_>>());
        assert_eq!(par_map(0, 4, Ok).unwrap(), Vec::<usize>::new());
        assert!(par_map(5, 2, |i| if i == 3 {
            Err(Error::Argument("x".into()))
        } else {
            Ok(i)
        })
        .is_err());
    }

    #[test]
    fn medians() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), 2.5);
        assert!(median(&[]).is_nan());
    }

    #[test]
    fn variant_lists() {
        let names: Vec<String> = component_variants().into_iter().map(|v| v.name).collect();
        assert_eq!(names, ["base", "+stfa", "+cw_mca", "+reliability"]);
        assert_eq!(fusion_variants().len(), 5);
        assert_eq!(stfa_variants().len(), 4);
    }

    #[test]
    fn ablation_csv_layout() {
        let t = AblationTable {
            variants: vec!["a".into()],
            scenarios: vec!["clean".into(), "fov".into()],
            seeds: vec![1, 2],
            map: vec![vec![vec![0.5, 0.25], vec![0.7, 0.35]]],
        };
        assert_eq!(
            t.to_csv(),
            "variant,scenario,median_mAP,seed_1,seed_2\na,clean,0.600000,0.500000,0.700000\na,fov,0.300000,0.250000,0.350000\n"
        );
    }
}
