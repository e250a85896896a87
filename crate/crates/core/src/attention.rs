//! Single-head scaled dot-product attention on the tape.

use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Additive bias that removes a key from a softmax row.
pub const MASKED: f64 = -1e30;

/// `softmax(Q·Kᵀ/√d_k + mask)·V`, returning the output and the weight matrix.
///
/// `q` is `[n×d_k]`, `k` is `[m×d_k]`, `v` is `[m×d_v]`; `mask` is an optional
/// constant `[n×m]` bias (0 to keep, [`MASKED`] to drop).
pub fn attend<'t>(q: Var<'t>, k: Var<'t>, v: Var<'t>, mask: Option<&Tensor>) -> Result<(Var<'t>, Var<'t>)> {
    let (qs, ks) = (q.shape(), k.shape());
    if qs.len() != 2 || ks.len() != 2 || qs[1] != ks[1] {
        return Err(Error::Dimension {
            op: "attend",
            lhs: qs,
            rhs: ks,
        });
    }
    let scale = 1.0 / (qs[1] as f64).sqrt();
    let mut scores = q.matmul(k.transpose()?)?.scale(scale)?;
    if let Some(m) = mask {
        if m.shape() != [qs[0], ks[0]] {
            return Err(Error::Dimension {
                op: "attend mask",
                lhs: m.shape().to_vec(),
                rhs: vec![qs[0], ks[0]],
            });
        }
        scores = scores.add(q.tape().leaf(m.clone()))?;
    }
    let weights = scores.softmax_rows()?;
    Ok((weights.matmul(v)?, weights))
}

/// Mask for `groups` independent blocks laid out as `row = step·slots + slot`
/// where attention stays within a slot (`across_steps`) or within a step.
pub fn block_mask(steps: usize, slots: usize, across_steps: bool, exclude_self: bool) -> Tensor {
    let n = steps * slots;
    let mut data = vec![MASKED; n * n];
    for a in 0..n {
        for b in 0..n {
            let (sa, ka) = (a / slots, a % slots);
            let (sb, kb) = (b / slots, b % slots);
            let linked = if across_steps { ka == kb } else { sa == sb };
            if linked && !(exclude_self && a == b) {
                data[a * n + b] = 0.0;
            }
        }
    }
    Tensor::new(&[n, n], data).expect("mask shape")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tape;

    /// Loop oracle for one query row set.
    pub(crate) fn oracle(q: &Tensor, k: &Tensor, v: &Tensor) -> Vec<f64> {
        let (n, d) = (q.shape()[0], q.shape()[1]);
        let (m, dv) = (k.shape()[0], v.shape()[1]);
        let mut out = vec![0.0; n * dv];
        for i in 0..n {
            let s: Vec<f64> = (0..m)
                .map(|j| (0..d).map(|c| q.get2(i, c) * k.get2(j, c)).sum::<f64>() / (d as f64).sqrt())
                .collect();
            let mx = s.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = s.iter().map(|x| (x - mx).exp()).collect();
            let z: f64 = e.iter().sum();
            for j in 0..m {
                for c in 0..dv {
                    out[i * dv + c] += e[j] / z * v.get2(j, c);
                }
            }
        }
        out
    }

    #[test]
    fn matches_loop_oracle() {
        let mk = |r, c, s: usize| {
            Tensor::new(
                &[r, c],
                (0..r * c).map(|i| (((i * 31 + s) % 17) as f64 - 8.0) / 5.0).collect(),
            )
            .unwrap()
        };
        let (q, k, v) = (mk(3, 4, 1), mk(5, 4, 2), mk(5, 2, 3));
        let tape = Tape::new();
        let (out, w) = attend(tape.leaf(q.clone()), tape.leaf(k.clone()), tape.leaf(v.clone()), None).unwrap();
        let expect = oracle(&q, &k, &v);
        for (a, b) in out.tensor().data().iter().zip(&expect) {
            assert!((a - b).abs() < 1e-12);
        }
        for r in 0..3 {
            assert!((w.tensor().row(r).iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn block_mask_layout() {
        let m = block_mask(2, 3, true, false);
        assert_eq!(m.get2(0, 3), 0.0);
        assert_eq!(m.get2(0, 1), MASKED);
        let m = block_mask(2, 3, false, false);
        assert_eq!(m.get2(0, 1), 0.0);
        assert_eq!(m.get2(0, 3), MASKED);
        assert_eq!(block_mask(2, 1, true, true).get2(0, 0), MASKED);
    }
}
