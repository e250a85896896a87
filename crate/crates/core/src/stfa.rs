//! Spatio-temporal aggregation of the six camera views.
//!
//! Per step, each view map is flattened and projected to a `d`-vector, the
//! six vectors attend to each other, a learned per-step code is added, and
//! then every view slot attends over time independently. The per-slot
//! results are summed over query steps, refined with a residual GELU MLP and
//! layer norm, and pooled into one scene-level vector.

use serde::{Deserialize, Serialize};

use crate::attention::{attend, block_mask};
use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::nn::{Mlp, ParamStore, Params};
use crate::rng::Rng;
use crate::scene::N_VIEWS;
use crate::tensor::Tensor;

pub const LN_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TemporalPool {
    /// Mean of the six slot vectors (`d` values).
    Mean,
    /// The six slot vectors side by side (`6·d` values).
    Concat,
}

/// Which attention stages run.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StfaVariant {
    SpatioTemporal,
    Spatial,
    Temporal,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StfaConfig {
    pub d: usize,
    pub steps: usize,
    /// Drop the `t' = t` key in temporal attention (needs `steps >= 2`).
    pub exclude_self: bool,
    pub temporal_pool: TemporalPool,
    pub variant: StfaVariant,
}

impl Default for StfaConfig {
    fn default() -> Self {
        StfaConfig {
            d: 32,
            steps: 3,
            exclude_self: false,
            temporal_pool: TemporalPool::Mean,
            variant: StfaVariant::SpatioTemporal,
        }
    }
}

impl StfaConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d < 2 || self.steps == 0 {
            return Err(Error::Config("stfa needs d >= 2 and at least one step".into()));
        }
        if self.exclude_self && self.steps < 2 {
            return Err(Error::Config("exclude_self needs at least two steps".into()));
        }
        Ok(())
    }

    pub fn pooled_dim(&self) -> usize {
        match self.temporal_pool {
            TemporalPool::Mean => self.d,
            TemporalPool::Concat => N_VIEWS * self.d,
        }
    }
}

/// Parameter names under the `stfa.` prefix.
pub struct Stfa {
    pub config: StfaConfig,
    /// Flattened view length `C·H_v·W_v`.
    pub input_len: usize,
}

impl Stfa {
    pub fn new(config: StfaConfig, input_len: usize) -> Result<Self> {
        config.validate()?;
        Ok(Stfa { config, input_len })
    }

    fn refine_mlp(&self) -> Mlp {
        let d = self.config.d;
        Mlp::new("stfa.refine", &[d, 4 * d, d])
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut Rng) {
        let d = self.config.d;
        store.init_weight("stfa.embed.w", self.input_len, d, rng);
        store.init_const("stfa.embed.b", &[d], 0.0);
        store.init_normal("stfa.view_embed", &[N_VIEWS, d], 0.02, rng);
        for stage in ["spatial", "temporal"] {
            for m in ["q", "k", "v"] {
                store.init_weight(&format!("stfa.{stage}.w{m}"), d, d, rng);
            }
        }
        store.init_normal("stfa.step_code", &[self.config.steps, d], 0.02, rng);
        self.refine_mlp().init(store, rng);
        store.init_const("stfa.ln.gain", &[d], 1.0);
        store.init_const("stfa.ln.bias", &[d], 0.0);
    }

    /// `E = X·W + b + view_embed` for one step; `flat` is `[6 × C·H_v·W_v]`.
    pub fn embed_views<'t>(&self, p: &Params<'t, '_>, flat: &Tensor) -> Result<Var<'t>> {
        if flat.shape() != [N_VIEWS, self.input_len] {
            return Err(Error::Dimension {
                op: "embed_views",
                lhs: flat.shape().to_vec(),
                rhs: vec![N_VIEWS, self.input_len],
            });
        }
        let x = p.tape().leaf(flat.clone());
        x.matmul(p.get("stfa.embed.w")?)?
            .add_row(p.get("stfa.embed.b")?)?
            .add(p.get("stfa.view_embed")?)
    }

    /// Self-attention across the six views of each step. `embedded` stacks
    /// the steps as rows `step·6 + view`.
    pub fn spatial_attention<'t>(&self, p: &Params<'t, '_>, embedded: Var<'t>) -> Result<Var<'t>> {
        let steps = embedded.shape()[0] / N_VIEWS;
        let mask = (steps > 1).then(|| block_mask(steps, N_VIEWS, false, false));
        let q = embedded.matmul(p.get("stfa.spatial.wq")?)?;
        let k = embedded.matmul(p.get("stfa.spatial.wk")?)?;
        let v = embedded.matmul(p.get("stfa.spatial.wv")?)?;
        Ok(attend(q, k, v, mask.as_ref())?.0)
    }

    /// Adds the code of step `t` (0-based) to every view slot of `s`.
    pub fn add_temporal_encoding<'t>(&self, p: &Params<'t, '_>, s: Var<'t>, t: usize) -> Result<Var<'t>> {
        let d = self.config.d;
        if t >= self.config.steps {
            return Err(Error::Index {
                what: "temporal step",
                index: t,
                len: self.config.steps,
            });
        }
        let code = p
            .get("stfa.step_code")?
            .gather((t * d..(t + 1) * d).map(Some).collect(), &[d])?;
        s.add_row(code)
    }

    /// Attention over steps within each view slot, summed over query steps.
    /// `encoded` stacks the steps as rows `step·6 + view`; returns `[6×d]`.
    pub fn temporal_attention<'t>(&self, p: &Params<'t, '_>, encoded: Var<'t>) -> Result<Var<'t>> {
        let steps = encoded.shape()[0] / N_VIEWS;
        if self.config.exclude_self && steps < 2 {
            return Err(Error::Argument("exclude_self needs at least two steps".into()));
        }
        let mask = block_mask(steps, N_VIEWS, true, self.config.exclude_self);
        let q = encoded.matmul(p.get("stfa.temporal.wq")?)?;
        let k = encoded.matmul(p.get("stfa.temporal.wk")?)?;
        let v = encoded.matmul(p.get("stfa.temporal.wv")?)?;
        let (out, _) = attend(q, k, v, Some(&mask))?;
        sum_over_steps(out, steps)
    }

    /// `LayerNorm(x + MLP(x))` row-wise.
    pub fn refine<'t>(&self, p: &Params<'t, '_>, x: Var<'t>) -> Result<Var<'t>> {
        let h = self.refine_mlp().forward(p, x)?;
        x.add(h)?
            .layer_norm(p.get("stfa.ln.gain")?, p.get("stfa.ln.bias")?, LN_EPS)
    }

    /// Full module on `steps` flattened view stacks (oldest first).
    pub fn forward<'t>(&self, p: &Params<'t, '_>, flat_steps: &[Tensor]) -> Result<StfaOutput<'t>> {
        let steps = flat_steps.len();
        if steps == 0 || steps > self.config.steps {
            return Err(Error::Argument(format!(
                "stfa expects 1..={} steps, got {steps}",
                self.config.steps
            )));
        }
        let tape = p.tape();
        let embedded: Vec<Var<'t>> = flat_steps
            .iter()
            .map(|f| self.embed_views(p, f))
            .collect::<Result<_>>()?;
        let stacked = tape.stack_rows(&embedded)?;
        let spatial = match self.config.variant {
            StfaVariant::Temporal => stacked,
            _ => self.spatial_attention(p, stacked)?,
        };
        let per_step = split_steps(spatial, steps)?;
        let aggregated = match self.config.variant {
            StfaVariant::Spatial => *per_step.last().expect("non-empty"),
            _ => {
                let encoded: Vec<Var<'t>> = per_step
                    .iter()
                    .enumerate()
                    .map(|(t, s)| self.add_temporal_encoding(p, *s, t))
                    .collect::<Result<_>>()?;
                self.temporal_attention(p, tape.stack_rows(&encoded)?)?
            }
        };
        let refined = self.refine(p, aggregated)?;
        let pooled = match self.config.temporal_pool {
            TemporalPool::Mean => refined.mean_rows()?.reshape(&[1, self.config.d])?,
            TemporalPool::Concat => refined.reshape(&[1, N_VIEWS * self.config.d])?,
        };
        Ok(StfaOutput {
            refined,
            pooled,
            spatial: per_step,
        })
    }
}

/// Result of [`Stfa::forward`].
pub struct StfaOutput<'t> {
    /// Refined per-slot features `[6×d]`.
    pub refined: Var<'t>,
    /// Scene-level vector `[1 × pooled_dim]`.
    pub pooled: Var<'t>,
    /// Spatially aggregated `[6×d]` per step, kept for the temporal loss.
    pub spatial: Vec<Var<'t>>,
}

fn split_steps<'t>(stacked: Var<'t>, steps: usize) -> Result<Vec<Var<'t>>> {
    let d = stacked.shape()[1];
    (0..steps)
        .map(|t| {
            let start = t * N_VIEWS * d;
            stacked.gather((start..start + N_VIEWS * d).map(Some).collect(), &[N_VIEWS, d])
        })
        .collect()
}

fn sum_over_steps<'t>(x: Var<'t>, steps: usize) -> Result<Var<'t>> {
    let d = x.shape()[1];
    let idx = (0..steps * N_VIEWS * d).map(|i| i % (N_VIEWS * d)).collect();
    x.scatter_add(idx, &[N_VIEWS, d])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tape;
    use crate::gradcheck::grad_check_store;
    use crate::rng::rng_from;

    fn setup(steps: usize, d: usize, len: usize) -> (Stfa, ParamStore) {
        let cfg = StfaConfig {
            d,
            steps,
            ..StfaConfig::default()
        };
        let stfa = Stfa::new(cfg, len).unwrap();
        let mut store = ParamStore::new();
        stfa.init(&mut store, &mut rng_from(3));
        (stfa, store)
    }

    fn flat(seed: usize, len: usize) -> Tensor {
        Tensor::new(
            &[N_VIEWS, len],
            (0..N_VIEWS * len)
                .map(|i| (((i * 13 + seed * 7) % 19) as f64 - 9.0) / 9.0)
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn zero_projection_gives_bias_plus_view_code() {
        let (stfa, mut store) = setup(2, 4, 5);
        store.insert("stfa.embed.w", Tensor::zeros(&[5, 4]));
        store.insert("stfa.embed.b", Tensor::vector(vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let tape = Tape::new();
        let p = Params::new(&tape, &store);
        let e = stfa.embed_views(&p, &flat(1, 5)).unwrap().tensor();
        let ve = store.get("stfa.view_embed").unwrap();
        for k in 0..N_VIEWS {
            for c in 0..4 {
                assert_eq!(e.get2(k, c), (c + 1) as f64 + ve.get2(k, c));
            }
        }
    }

    #[test]
    fn identical_views_attend_uniformly() {
        let (stfa, store) = setup(1, 4, 5);
        let tape = Tape::new();
        let p = Params::new(&tape, &store);
        let row = tape.leaf(Tensor::matrix(1, 4, vec![0.3, -0.2, 0.5, 1.0]).unwrap());
        let e = tape.stack_rows(&[row; N_VIEWS]).unwrap();
        let s = stfa.spatial_attention(&p, e).unwrap().tensor();
        for k in 1..N_VIEWS {
            assert_eq!(s.row(k), s.row(0));
        }
    }

    #[test]
    fn single_step_temporal_is_value_projection() {
        let (stfa, store) = setup(1, 4, 5);
        let tape = Tape::new();
        let p = Params::new(&tape, &store);
        let s = tape.leaf(flat(2, 4));
        let out = stfa.temporal_attention(&p, s).unwrap().tensor();
        let expect = crate::tensor::matmul(&flat(2, 4), store.get("stfa.temporal.wv").unwrap()).unwrap();
        assert!(out.max_abs_diff(&expect) < 1e-12);
    }

    #[test]
    fn step_code_out_of_range() {
        let (stfa, store) = setup(2, 4, 5);
        let tape = Tape::new();
        let p = Params::new(&tape, &store);
        let s = tape.leaf(Tensor::zeros(&[N_VIEWS, 4]));
        assert!(matches!(stfa.add_temporal_encoding(&p, s, 2), Err(Error::Index { .. })));
    }

    #[test]
    fn refine_with_zero_mlp_is_layer_norm() {
        let (stfa, mut store) = setup(1, 4, 5);
        for name in ["stfa.refine.w0", "stfa.refine.w1"] {
            let shape = store.get(name).unwrap().shape().to_vec();
            store.insert(name, Tensor::zeros(&shape));
        }
        let tape = Tape::new();
        let p = Params::new(&tape, &store);
        let x = tape.leaf(Tensor::filled(&[N_VIEWS, 4], 2.5));
        let out = stfa.refine(&p, x).unwrap().tensor();
        assert!(out.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn exclude_self_rejects_single_step() {
        let cfg = StfaConfig {
            steps: 1,
            exclude_self: true,
            ..StfaConfig::default()
        };
        assert!(Stfa::new(cfg, 5).is_err());
    }

    #[test]
    fn whole_module_gradients() {
        let (stfa, store) = setup(2, 4, 5);
        let inputs = [flat(1, 5), flat(2, 5)];
        let w = Tensor::new(&[1, 4], vec![0.3, -1.1, 0.7, 0.2]).unwrap();
        let report = grad_check_store(
            &store,
            |p| {
                let out = stfa.forward(p, &inputs)?;
                out.pooled.mul(p.tape().leaf(w.clone()))?.sum()
            },
            1e-5,
        )
        .unwrap();
        assert!(report.passes(1e-4), "{report:?}");
    }
}
