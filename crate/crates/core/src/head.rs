//! Center-heatmap detection head on the fused BEV grid.
//!
//! Two 3×3 convolutions feed a per-class center heatmap and a dense
//! regression map. A box is encoded at the cell containing its center as
//! `(Δx, Δy, log w, log l, log h, sin yaw, cos yaw, vx, vy)`, with the
//! offsets measured in cell units from the cell center.

use serde::{Deserialize, Serialize};

use crate::autodiff::{sigmoid_scalar, Var};
use crate::bev::GridConfig;
use crate::error::{Error, Result};
use crate::geometry::{bev_iou, Box3D};
use crate::nn::{ParamStore, Params};
use crate::rng::Rng;
use crate::tensor::Tensor;

/// Regression channels per cell.
pub const REG_DIM: usize = 9;
/// Largest log-size the decoder will exponentiate.
const MAX_LOG_SIZE: f64 = 4.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HeadConfig {
    pub hidden: usize,
    pub score_threshold: f64,
    pub nms_iou: f64,
    pub focal_alpha: f64,
    pub focal_gamma: f64,
    /// Initial foreground probability of the heatmap.
    pub prior: f64,
}

impl Default for HeadConfig {
    fn default() -> Self {
        HeadConfig {
            hidden: 16,
            score_threshold: 0.3,
            nms_iou: 0.5,
            focal_alpha: 0.25,
            focal_gamma: 2.0,
            prior: 0.1,
        }
    }
}

impl HeadConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hidden == 0 {
            return Err(Error::Config("head hidden width must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.score_threshold) || !(0.0..=1.0).contains(&self.nms_iou) {
            return Err(Error::Config("score threshold and nms iou must lie in [0, 1]".into()));
        }
        if !(self.prior > 0.0 && self.prior < 1.0) {
            return Err(Error::Config("heatmap prior must lie in (0, 1)".into()));
        }
        Ok(())
    }
}

/// A scored box.
#[derive(Clone, Debug, PartialEq)]
pub struct Detection {
    pub bbox: Box3D,
    pub class_id: usize,
    pub score: f64,
}

/// Cell index and regression target of a box, if its center is on the grid.
pub fn encode_box(b: &Box3D, grid: &GridConfig) -> Option<(usize, [f64; REG_DIM])> {
    let (row, col) = grid.cell_of(b.center[0], b.center[1])?;
    let [cx, cy] = grid.cell_center(row, col);
    let s = grid.cell_xy_m;
    Some((
        row * grid.cells() + col,
        [
            (b.center[0] - cx) / s,
            (b.center[1] - cy) / s,
            b.width().ln(),
            b.length().ln(),
            b.height().ln(),
            b.yaw.sin(),
            b.yaw.cos(),
            b.velocity[0],
            b.velocity[1],
        ],
    ))
}

/// Inverse of [`encode_box`]; boxes stand on the ground plane.
pub fn decode_box(cell: usize, reg: &[f64], class_id: usize, grid: &GridConfig) -> Box3D {
    let side = grid.cells();
    let [cx, cy] = grid.cell_center(cell / side, cell % side);
    let s = grid.cell_xy_m;
    let size = [reg[2], reg[3], reg[4]].map(|v| v.min(MAX_LOG_SIZE).exp());
    Box3D {
        center: [cx + reg[0] * s, cy + reg[1] * s, size[2] / 2.0],
        size,
        yaw: crate::geometry::normalize_yaw(reg[5].atan2(reg[6])),
        class_id,
        velocity: [reg[7], reg[8]],
    }
}

/// Dense targets for one frame.
#[derive(Clone, Debug, PartialEq)]
pub struct HeadTargets {
    /// `[H·W × classes]`, 1 at object centers.
    pub heat: Vec<f64>,
    /// `(cell, target)` per encoded box; the first box wins a shared cell.
    pub positives: Vec<(usize, [f64; REG_DIM])>,
}

pub fn build_targets(boxes: &[Box3D], classes: usize, grid: &GridConfig) -> HeadTargets {
    let mut heat = vec![0.0; grid.tokens() * classes];
    let mut positives: Vec<(usize, [f64; REG_DIM])> = Vec::new();
    for b in boxes {
        if b.class_id >= classes {
            continue;
        }
        if let Some((cell, reg)) = encode_box(b, grid) {
            if positives.iter().any(|(c, _)| *c == cell) {
                continue;
            }
            heat[cell * classes + b.class_id] = 1.0;
            positives.push((cell, reg));
        }
    }
    HeadTargets { heat, positives }
}

/// Head outputs: heatmap logits `[H·W × classes]` and regression `[H·W × 9]`.
pub struct HeadOutput<'t> {
    pub heat: Var<'t>,
    pub reg: Var<'t>,
}

pub struct Head {
    pub config: HeadConfig,
    pub channels: usize,
    pub classes: usize,
    pub grid: GridConfig,
    cols_in: Vec<Option<usize>>,
    cols_hidden: Vec<Option<usize>>,
}

/// Flat gather indices that turn `[H·W × c]` into 3×3 patches `[H·W × 9c]`
/// (zero padding at the border).
pub fn im2col_indices(side: usize, c: usize) -> Vec<Option<usize>> {
    let mut idx = Vec::with_capacity(side * side * 9 * c);
    for row in 0..side as isize {
        for col in 0..side as isize {
            for dr in -1..=1isize {
                for dc in -1..=1isize {
                    let (r, q) = (row + dr, col + dc);
                    let inside = r >= 0 && q >= 0 && r < side as isize && q < side as isize;
                    for ch in 0..c {
                        idx.push(inside.then(|| (r as usize * side + q as usize) * c + ch));
                    }
                }
            }
        }
    }
    idx
}

impl Head {
    pub fn new(config: HeadConfig, channels: usize, classes: usize, grid: &GridConfig) -> Result<Self> {
        config.validate()?;
        let side = grid.cells();
        Ok(Head {
            cols_in: im2col_indices(side, channels),
            cols_hidden: im2col_indices(side, config.hidden),
            config,
            channels,
            classes,
            grid: grid.clone(),
        })
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut Rng) {
        let h = self.config.hidden;
        store.init_weight("head.conv0.w", 9 * self.channels, h, rng);
        store.init_const("head.conv0.b", &[h], 0.0);
        store.init_weight("head.conv1.w", 9 * h, h, rng);
        store.init_const("head.conv1.b", &[h], 0.0);
        store.init_weight("head.heat.w", h, self.classes, rng);
        let bias = -((1.0 - self.config.prior) / self.config.prior).ln();
        store.init_const("head.heat.b", &[self.classes], bias);
        store.init_weight("head.reg.w", h, REG_DIM, rng);
        store.init_const("head.reg.b", &[REG_DIM], 0.0);
    }

    fn conv<'t>(&self, p: &Params<'t, '_>, x: Var<'t>, name: &str, cols: &[Option<usize>]) -> Result<Var<'t>> {
        let n = x.shape()[0];
        let w = p.get(&format!("head.{name}.w"))?;
        let k = w.shape()[0];
        x.gather(cols.to_vec(), &[n, k])?
            .matmul(w)?
            .add_row(p.get(&format!("head.{name}.b"))?)?
            .gelu()
    }

    pub fn forward<'t>(&self, p: &Params<'t, '_>, fused: Var<'t>) -> Result<HeadOutput<'t>> {
        let s = fused.shape();
        if s != [self.grid.tokens(), self.channels] {
            return Err(Error::Dimension {
                op: "head",
                lhs: s,
                rhs: vec![self.grid.tokens(), self.channels],
            });
        }
        let h = self.conv(p, fused, "conv0", &self.cols_in)?;
        let h = self.conv(p, h, "conv1", &self.cols_hidden)?;
        let heat = h.matmul(p.get("head.heat.w")?)?.add_row(p.get("head.heat.b")?)?;
        let reg = h.matmul(p.get("head.reg.w")?)?.add_row(p.get("head.reg.b")?)?;
        Ok(HeadOutput { heat, reg })
    }

    /// Focal loss on the heatmap plus L1 on the regression at object
    /// centers, both divided by the number of centers (at least 1).
    pub fn loss<'t>(&self, out: &HeadOutput<'t>, targets: &HeadTargets) -> Result<Var<'t>> {
        detection_loss(out, targets, self.config.focal_alpha, self.config.focal_gamma)
    }

    /// Peaks above the score threshold, decoded and suppressed.
    pub fn detect(&self, heat: &Tensor, reg: &Tensor) -> Vec<Detection> {
        detect(heat, reg, &self.grid, self.config.score_threshold, self.config.nms_iou)
    }
}

pub fn detection_loss<'t>(out: &HeadOutput<'t>, targets: &HeadTargets, alpha: f64, gamma: f64) -> Result<Var<'t>> {
    let norm = 1.0 / targets.positives.len().max(1) as f64;
    let focal = out.heat.sigmoid_focal(targets.heat.clone(), alpha, gamma)?.sum()?;
    let mut loss = focal.scale(norm)?;
    if !targets.positives.is_empty() {
        let npos = targets.positives.len();
        let idx = targets
            .positives
            .iter()
            .flat_map(|(cell, _)| (0..REG_DIM).map(move |k| Some(cell * REG_DIM + k)))
            .collect();
        let want: Vec<f64> = targets.positives.iter().flat_map(|(_, t)| t.iter().copied()).collect();
        let picked = out.reg.gather(idx, &[npos, REG_DIM])?;
        let l1 = picked
            .sub(out.reg.tape().leaf(Tensor::new(&[npos, REG_DIM], want)?))?
            .abs()?
            .sum()?;
        loss = loss.add(l1.scale(norm)?)?;
    }
    Ok(loss)
}

/// Greedy non-maximum suppression by descending score (ties by index);
/// a box is dropped if its BEV IoU with a kept box reaches `iou`.
pub fn nms(mut candidates: Vec<Detection>, iou: f64) -> Vec<Detection> {
    let mut order: Vec<usize> = (0..candidates.len()).collect();
    order.sort_by(|&a, &b| candidates[b].score.total_cmp(&candidates[a].score).then(a.cmp(&b)));
    let mut kept: Vec<usize> = Vec::new();
    for i in order {
        let overlaps = kept
            .iter()
            .any(|&k| bev_iou(&candidates[i].bbox, &candidates[k].bbox).map_or(true, |v| v >= iou));
        if !overlaps {
            kept.push(i);
        }
    }
    let mut out = Vec::with_capacity(kept.len());
    let mut slots: Vec<Option<Detection>> = candidates.drain(..).map(Some).collect();
    for k in kept {
        out.push(slots[k].take().expect("each index kept once"));
    }
    out
}

/// Decodes local heatmap maxima with score above `threshold`, then applies NMS.
pub fn detect(heat: &Tensor, reg: &Tensor, grid: &GridConfig, threshold: f64, iou: f64) -> Vec<Detection> {
    let side = grid.cells();
    let n = side * side;
    let classes = heat.len() / n;
    let score = |cell: usize, k: usize| sigmoid_scalar(heat.data()[cell * classes + k]);
    let mut candidates = Vec::new();
    for k in 0..classes {
        for row in 0..side {
            for col in 0..side {
                let cell = row * side + col;
                let s = score(cell, k);
                if s <= threshold {
                    continue;
                }
                let mut peak = true;
                for dr in -1..=1isize {
                    for dc in -1..=1isize {
                        let (r, c) = (row as isize + dr, col as isize + dc);
                        if (dr, dc) == (0, 0) || r < 0 || c < 0 || r >= side as isize || c >= side as isize {
                            continue;
                        }
                        if score(r as usize * side + c as usize, k) > s {
                            peak = false;
                        }
                    }
                }
                if peak {
                    let r = &reg.data()[cell * REG_DIM..(cell + 1) * REG_DIM];
                    candidates.push(Detection {
                        bbox: decode_box(cell, r, k, grid),
                        class_id: k,
                        score: s,
                    });
                }
            }
        }
    }
    nms(candidates, iou)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tape;
    use crate::rng::rng_from;

    fn car(x: f64, y: f64, yaw: f64) -> Box3D {
        Box3D {
            center: [x, y, 0.8],
            size: [1.9, 4.5, 1.6],
            yaw,
            class_id: 0,
            velocity: [1.0, -0.5],
        }
    }

    #[test]
    fn codec_round_trip() {
        let g = GridConfig::default();
        let b = car(3.3, -2.1, 0.7);
        let (cell, reg) = encode_box(&b, &g).unwrap();
        let d = decode_box(cell, &reg, 0, &g);
        for i in 0..3 {
            assert!((d.center[i] - b.center[i]).abs() < 1e-12);
            assert!((d.size[i] - b.size[i]).abs() < 1e-12);
        }
        assert!((d.yaw - b.yaw).abs() < 1e-12);
        assert_eq!(d.velocity, b.velocity);
    }

    #[test]
    fn zero_logits_at_half_threshold_detect_nothing() {
        let g = GridConfig::square(12.0, 4);
        let heat = Tensor::zeros(&[16, 2]);
        let reg = Tensor::zeros(&[16, REG_DIM]);
        assert!(detect(&heat, &reg, &g, 0.5, 0.5).is_empty());
    }

    #[test]
    fn single_peak_decodes_exactly() {
        let g = GridConfig::square(12.0, 4);
        let b = car(1.2, -3.9, -0.4);
        let (cell, r) = encode_box(&b, &g).unwrap();
        let mut heat = Tensor::filled(&[16, 1], -10.0);
        heat.data_mut()[cell] = 3.0;
        let mut reg = Tensor::zeros(&[16, REG_DIM]);
        reg.data_mut()[cell * REG_DIM..(cell + 1) * REG_DIM].copy_from_slice(&r);
        let dets = detect(&heat, &reg, &g, 0.3, 0.5);
        assert_eq!(dets.len(), 1);
        assert_eq!(dets[0].bbox, decode_box(cell, &r, 0, &g));
        assert!((dets[0].score - sigmoid_scalar(3.0)).abs() < 1e-15);
    }

    #[test]
    fn nms_keeps_higher_of_overlapping_pair() {
        let a = Detection {
            bbox: car(0.0, 0.0, 0.0),
            class_id: 0,
            score: 0.6,
        };
        let b = Detection {
            bbox: car(0.3, 0.0, 0.0),
            class_id: 0,
            score: 0.9,
        };
        let c = Detection {
            bbox: car(10.0, 0.0, 0.0),
            class_id: 0,
            score: 0.4,
        };
        let out = nms(vec![a, b.clone(), c.clone()], 0.5);
        assert_eq!(out, vec![b, c]);
    }

    #[test]
    fn perfect_prediction_has_tiny_loss() {
        let g = GridConfig::square(12.0, 4);
        let boxes = [car(1.2, -3.9, -0.4)];
        let t = build_targets(&boxes, 2, &g);
        let tape = Tape::new();
        let heat: Vec<f64> = t.heat.iter().map(|&h| if h > 0.5 { 40.0 } else { -40.0 }).collect();
        let mut reg = vec![0.0; 16 * REG_DIM];
        for (cell, r) in &t.positives {
            reg[cell * REG_DIM..(cell + 1) * REG_DIM].copy_from_slice(r);
        }
        let out = HeadOutput {
            heat: tape.leaf(Tensor::new(&[16, 2], heat).unwrap()),
            reg: tape.leaf(Tensor::new(&[16, REG_DIM], reg).unwrap()),
        };
        assert!(detection_loss(&out, &t, 0.25, 2.0).unwrap().item() < 1e-6);
    }

    #[test]
    fn single_cell_hand_case() {
        // one cell, one class, positive with logit 0 and regression off by 0.5 in each channel
        let g = GridConfig::square(2.0, 1);
        let b = Box3D {
            center: [0.0, 0.0, 0.5],
            size: [1.0, 1.0, 1.0],
            yaw: 0.0,
            class_id: 0,
            velocity: [0.0, 0.0],
        };
        let t = build_targets(&[b], 1, &g);
        let tape = Tape::new();
        let target = t.positives[0].1;
        let out = HeadOutput {
            heat: tape.leaf(Tensor::zeros(&[1, 1])),
            reg: tape.leaf(Tensor::new(&[1, REG_DIM], target.iter().map(|v| v + 0.5).collect()).unwrap()),
        };
        // focal at p = 0.5: 0.25 · 0.25 · ln 2; L1: 9 · 0.5
        let expect = 0.25 * 0.25 * 2f64.ln() + 4.5;
        assert!((detection_loss(&out, &t, 0.25, 2.0).unwrap().item() - expect).abs() < 1e-12);
    }

    #[test]
    fn no_objects_and_cold_heatmap_is_near_zero() {
        let g = GridConfig::square(12.0, 4);
        let t = build_targets(&[], 2, &g);
        let tape = Tape::new();
        let out = HeadOutput {
            heat: tape.leaf(Tensor::filled(&[16, 2], -20.0)),
            reg: tape.leaf(Tensor::zeros(&[16, REG_DIM])),
        };
        assert!(detection_loss(&out, &t, 0.25, 2.0).unwrap().item() < 1e-12);
    }

    #[test]
    fn conv_layers_see_neighbors() {
        let g = GridConfig::square(12.0, 4);
        let head = Head::new(
            HeadConfig {
                hidden: 3,
                ..HeadConfig::default()
            },
            2,
            1,
            &g,
        )
        .unwrap();
        let mut store = ParamStore::new();
        head.init(&mut store, &mut rng_from(1));
        let tape = Tape::new();
        let p = Params::new(&tape, &store);
        let mut x = Tensor::zeros(&[16, 2]);
        x.data_mut()[5 * 2] = 1.0;
        let out = head.forward(&p, tape.leaf(x)).unwrap();
        assert_eq!(out.heat.shape(), vec![16, 1]);
        assert_eq!(out.reg.shape(), vec![16, REG_DIM]);
        let idx = im2col_indices(2, 1);
        assert_eq!(idx.len(), 4 * 9);
        assert_eq!(
            &idx[..9],
            &[None, None, None, None, Some(0), Some(1), None, Some(2), Some(3)]
        );
    }
}
