//! The shared bird's-eye-view grid and the two encoders that fill it:
//! point-cloud voxelization and a column-wise lift-splat for camera views.
//!
//! Grids are stored channel-major as `C×H×W`. Rows run along +y and columns
//! along +x; cell `(0, 0)` has its corner at `origin`. The learned parts of
//! the model work on the token-major view `[H·W × C]`, with token index
//! `row·W + col`.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::scene::{PointCloud, ViewGeometry, N_VIEWS};
use crate::tensor::Tensor;

/// Metric layout of the BEV window.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GridConfig {
    /// Side of the square window centered on the ego vehicle.
    pub extent_m: f64,
    pub cell_xy_m: f64,
    pub z_min_m: f64,
    pub z_max_m: f64,
    pub cell_z_m: f64,
}

impl Default for GridConfig {
    fn default() -> Self {
        GridConfig {
            extent_m: 24.0,
            cell_xy_m: 0.75,
            z_min_m: -0.5,
            z_max_m: 3.5,
            cell_z_m: 1.0,
        }
    }
}

fn whole_count(span: f64, step: f64, what: &str) -> Result<usize> {
    let n = (span / step).round();
    if n < 1.0 || (n * step - span).abs() > 1e-6 * span.abs().max(1.0) {
        return Err(Error::Config(format!(
            "{what}: span {span} is not a whole number of {step} m cells"
        )));
    }
    Ok(n as usize)
}

impl GridConfig {
    /// A window of `cells × cells` over `extent_m`.
    pub fn square(extent_m: f64, cells: usize) -> Self {
        GridConfig {
            extent_m,
            cell_xy_m: extent_m / cells as f64,
            ..GridConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.cell_xy_m > 0.0 && self.cell_z_m > 0.0) {
            return Err(Error::Config("grid cell sizes must be positive".into()));
        }
        if !(self.extent_m > 0.0) || !(self.z_max_m > self.z_min_m) {
            return Err(Error::Config("grid extent and z range must be non-empty".into()));
        }
        whole_count(self.extent_m, self.cell_xy_m, "grid xy")?;
        whole_count(self.z_max_m - self.z_min_m, self.cell_z_m, "grid z")?;
        Ok(())
    }

    /// Cells per side (`H = W`).
    pub fn cells(&self) -> usize {
        (self.extent_m / self.cell_xy_m).round() as usize
    }

    pub fn tokens(&self) -> usize {
        self.cells() * self.cells()
    }

    pub fn z_bins(&self) -> usize {
        ((self.z_max_m - self.z_min_m) / self.cell_z_m).round() as usize
    }

    pub fn z_edges(&self) -> Vec<f64> {
        (0..=self.z_bins())
            .map(|i| self.z_min_m + i as f64 * self.cell_z_m)
            .collect()
    }

    pub fn origin(&self) -> [f64; 2] {
        [-self.extent_m / 2.0, -self.extent_m / 2.0]
    }

    /// `(row, col)` of the cell containing `(x, y)`, if inside the window.
    pub fn cell_of(&self, x: f64, y: f64) -> Option<(usize, usize)> {
        let [ox, oy] = self.origin();
        let n = self.cells() as f64;
        let j = ((x - ox) / self.cell_xy_m).floor();
        let i = ((y - oy) / self.cell_xy_m).floor();
        if (0.0..n).contains(&i) && (0.0..n).contains(&j) {
            Some((i as usize, j as usize))
        } else {
            None
        }
    }

    pub fn cell_center(&self, row: usize, col: usize) -> [f64; 2] {
        let [ox, oy] = self.origin();
        [
            ox + (col as f64 + 0.5) * self.cell_xy_m,
            oy + (row as f64 + 0.5) * self.cell_xy_m,
        ]
    }

    /// Channels produced by [`voxelize`]: one per z-bin plus mean intensity.
    pub fn voxel_channels(&self) -> usize {
        self.z_bins() + 1
    }
}

/// A `C×H×W` feature grid with its metric frame.
#[derive(Clone, Debug, PartialEq)]
pub struct BevGrid {
    pub features: Tensor,
    pub config: GridConfig,
}

impl BevGrid {
    pub fn zeros(channels: usize, config: &GridConfig) -> Self {
        let n = config.cells();
        BevGrid {
            features: Tensor::zeros(&[channels, n, n]),
            config: config.clone(),
        }
    }

    pub fn channels(&self) -> usize {
        self.features.shape()[0]
    }

    /// Rebuilds a grid from a token-major `[H·W × C]` tensor.
    pub fn from_tokens(tokens: &Tensor, config: &GridConfig) -> Result<Self> {
        let (n, c) = tokens.dims2("from_tokens")?;
        let side = config.cells();
        if n != side * side {
            return Err(Error::Config(format!("{n} tokens do not fit a {side}x{side} grid")));
        }
        let mut data = vec![0.0; n * c];
        for t in 0..n {
            for ch in 0..c {
                data[ch * n + t] = tokens.data()[t * c + ch];
            }
        }
        Ok(BevGrid {
            features: Tensor::new(&[c, side, side], data)?,
            config: config.clone(),
        })
    }

    /// Token-major `[H·W × C]` copy of the features.
    pub fn to_tokens(&self) -> Tensor {
        let c = self.channels();
        let n = self.config.tokens();
        let mut data = vec![0.0; n * c];
        for ch in 0..c {
            for t in 0..n {
                data[t * c + ch] = self.features.data()[ch * n + t];
            }
        }
        Tensor::from_parts(vec![n, c], data)
    }

    /// Writes one CSV per channel (`{stem}_c{k}.csv`, rows top to bottom in
    /// increasing y).
    pub fn write_csv(&self, dir: &Path, stem: &str) -> Result<Vec<std::path::PathBuf>> {
        let side = self.config.cells();
        let mut written = Vec::with_capacity(self.channels());
        for ch in 0..self.channels() {
            let mut text = String::new();
            for row in 0..side {
                let cells: Vec<String> = (0..side)
                    .map(|col| format!("{}", self.features.data()[(ch * side + row) * side + col]))
                    .collect();
                let _ = writeln!(text, "{}", cells.join(","));
            }
            let path = dir.join(format!("{stem}_c{ch}.csv"));
            std::fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
            written.push(path);
        }
        Ok(written)
    }
}

/// Per-cell `log1p` point counts for each z-bin, then mean intensity.
/// Points outside the xy window are dropped; heights outside the z range
/// count toward the nearest end bin.
pub fn voxelize(cloud: &PointCloud, config: &GridConfig) -> Result<BevGrid> {
    config.validate()?;
    let side = config.cells();
    let n = side * side;
    let nz = config.z_bins();
    let mut counts = vec![0u32; nz * n];
    let mut intensity = vec![0.0f64; n];
    let mut per_cell = vec![0u32; n];
    for p in &cloud.points {
        let Some((i, j)) = config.cell_of(p[0] as f64, p[1] as f64) else {
            continue;
        };
        let cell = i * side + j;
        let zb = ((p[2] as f64 - config.z_min_m) / config.cell_z_m).floor();
        let zb = zb.clamp(0.0, nz as f64 - 1.0) as usize;
        counts[zb * n + cell] += 1;
        intensity[cell] += p[3] as f64;
        per_cell[cell] += 1;
    }
    let mut data = Vec::with_capacity((nz + 1) * n);
    data.extend(counts.iter().map(|&c| (c as f64).ln_1p()));
    data.extend(
        intensity
            .iter()
            .zip(&per_cell)
            .map(|(&s, &k)| if k > 0 { s / k as f64 } else { 0.0 }),
    );
    Ok(BevGrid {
        features: Tensor::from_parts(vec![nz + 1, side, side], data),
        config: config.clone(),
    })
}

/// Ranges sampled along each camera ray.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DepthBins {
    pub near_m: f64,
    pub far_m: f64,
    pub count: usize,
}

impl Default for DepthBins {
    fn default() -> Self {
        DepthBins {
            near_m: 1.5,
            far_m: 11.5,
            count: 8,
        }
    }
}

impl DepthBins {
    /// Range of the center of bin `b`.
    pub fn range(&self, b: usize) -> f64 {
        self.near_m + (b as f64 + 0.5) * (self.far_m - self.near_m) / self.count as f64
    }
}

/// Precomputed `(view, column, depth bin) → cell` table for splatting.
#[derive(Clone, Debug, PartialEq)]
pub struct LiftGeometry {
    pub view: ViewGeometry,
    pub bins: DepthBins,
    pub grid: GridConfig,
    /// Indexed by `(view·W_v + column)·bins + b`.
    pub cells: Vec<usize>,
}

impl LiftGeometry {
    pub fn new(view: &ViewGeometry, bins: &DepthBins, grid: &GridConfig) -> Result<Self> {
        grid.validate()?;
        view.validate()?;
        if bins.count == 0 || !(bins.far_m > bins.near_m && bins.near_m > 0.0) {
            return Err(Error::Config("depth bins need count >= 1 and 0 < near < far".into()));
        }
        let side = grid.cells();
        let mut cells = Vec::with_capacity(N_VIEWS * view.width * bins.count);
        for v in 0..N_VIEWS {
            for col in 0..view.width {
                let az = view.column_azimuth(v, col);
                for b in 0..bins.count {
                    let r = bins.range(b);
                    let (x, y) = (r * az.cos(), r * az.sin());
                    let (i, j) = grid.cell_of(x, y).ok_or_else(|| {
                        Error::Config(format!(
                            "depth bin at {r:.2} m on view {v} column {col} falls outside the BEV window"
                        ))
                    })?;
                    cells.push(i * side + j);
                }
            }
        }
        Ok(LiftGeometry {
            view: view.clone(),
            bins: bins.clone(),
            grid: grid.clone(),
            cells,
        })
    }

    pub fn columns(&self) -> usize {
        N_VIEWS * self.view.width
    }

    pub fn cell(&self, column: usize, bin: usize) -> usize {
        self.cells[column * self.bins.count + bin]
    }
}

/// Constant per-column inputs of the lift: the flattened `C_v·H_v` column
/// (input of the depth network) and its row-mean feature (the lifted payload).
#[derive(Clone, Debug, PartialEq)]
pub struct ColumnInputs {
    /// `[6·W_v × C_v·H_v]`.
    pub flat: Tensor,
    /// `[6·W_v × C_v]`.
    pub payload: Tensor,
}

pub fn column_inputs(views: &[Tensor], geometry: &ViewGeometry) -> Result<ColumnInputs> {
    let shape = geometry.view_shape();
    if views.len() != N_VIEWS {
        return Err(Error::Argument(format!(
            "expected {N_VIEWS} views, got {}",
            views.len()
        )));
    }
    for v in views {
        if v.shape() != shape {
            return Err(Error::Dimension {
                op: "column_inputs",
                lhs: v.shape().to_vec(),
                rhs: shape.to_vec(),
            });
        }
    }
    let [c, h, w] = shape;
    let cols = N_VIEWS * w;
    let mut flat = Vec::with_capacity(cols * c * h);
    let mut payload = Vec::with_capacity(cols * c);
    for view in views {
        let d = view.data();
        for col in 0..w {
            for ch in 0..c {
                let mut s = 0.0;
                for row in 0..h {
                    let x = d[(ch * h + row) * w + col];
                    flat.push(x);
                    s += x;
                }
                payload.push(s / h as f64);
            }
        }
    }
    Ok(ColumnInputs {
        flat: Tensor::from_parts(vec![cols, c * h], flat),
        payload: Tensor::from_parts(vec![cols, c], payload),
    })
}

/// Differentiable splat: `depth` is `[cols × bins]` (rows sum to one),
/// result is token-major `[H·W × C_v]`.
pub fn splat_tokens<'t>(depth: Var<'t>, payload: &Tensor, geometry: &LiftGeometry) -> Result<Var<'t>> {
    let (cols, c) = payload.dims2("splat")?;
    let bins = geometry.bins.count;
    if depth.shape() != [cols, bins] || cols != geometry.columns() {
        return Err(Error::Dimension {
            op: "splat",
            lhs: depth.shape(),
            rhs: vec![geometry.columns(), bins],
        });
    }
    let tape = depth.tape();
    // lifted[(col, b), ch] = depth[col, b] · payload[col, ch]
    let mut spread = Vec::with_capacity(cols * bins * c);
    let mut feats = Vec::with_capacity(cols * bins * c);
    let mut target = Vec::with_capacity(cols * bins * c);
    for col in 0..cols {
        for b in 0..bins {
            let cell = geometry.cell(col, b);
            for ch in 0..c {
                spread.push(Some(col * bins + b));
                feats.push(payload.data()[col * c + ch]);
                target.push(cell * c + ch);
            }
        }
    }
    let weights = depth.gather(spread, &[cols * bins, c])?;
    let lifted = weights.mul(tape.leaf(Tensor::from_parts(vec![cols * bins, c], feats)))?;
    lifted.scatter_add(target, &[geometry.grid.tokens(), c])
}

/// Plain-tensor lift-splat with an explicit depth distribution.
pub fn lift_splat(views: &[Tensor], depth: &Tensor, geometry: &LiftGeometry) -> Result<BevGrid> {
    let inputs = column_inputs(views, &geometry.view)?;
    let tape = crate::autodiff::Tape::new();
    let tokens = splat_tokens(tape.leaf(depth.clone()), &inputs.payload, geometry)?;
    BevGrid::from_tokens(&tokens.tensor(), &geometry.grid)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tape;
    use crate::gradcheck::grad_check;

    fn one_point(x: f32, y: f32) -> PointCloud {
        PointCloud::new(vec![[x, y, 0.3, 0.5]])
    }

    #[test]
    fn empty_cloud_gives_zero_grid() {
        let g = voxelize(&PointCloud::default(), &GridConfig::default()).unwrap();
        assert!(g.features.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn center_point_hits_center_cell() {
        let cfg = GridConfig::default();
        let g = voxelize(&one_point(0.0, 0.0), &cfg).unwrap();
        let side = cfg.cells();
        let n = side * side;
        let nonzero: Vec<usize> = (0..n)
            .filter(|&t| (0..g.channels()).any(|c| g.features.data()[c * n + t] != 0.0))
            .collect();
        assert_eq!(nonzero, vec![(side / 2) * side + side / 2]);
    }

    #[test]
    fn out_of_window_points_dropped() {
        let g = voxelize(&one_point(100.0, 0.0), &GridConfig::default()).unwrap();
        assert!(g.features.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn fine_voxels_validate() {
        let cfg = GridConfig {
            extent_m: 24.0,
            cell_xy_m: 0.075,
            z_min_m: -1.0,
            z_max_m: 3.0,
            cell_z_m: 0.2,
        };
        cfg.validate().unwrap();
        assert_eq!(cfg.cells(), 320);
        assert!(GridConfig {
            cell_xy_m: 0.0,
            ..GridConfig::default()
        }
        .validate()
        .is_err());
    }

    #[test]
    fn token_layout_round_trips() {
        let cfg = GridConfig::square(4.0, 2);
        let t = Tensor::matrix(4, 3, (0..12).map(|v| v as f64).collect()).unwrap();
        let g = BevGrid::from_tokens(&t, &cfg).unwrap();
        assert_eq!(g.to_tokens(), t);
    }

    fn lift_fixture() -> (LiftGeometry, Vec<Tensor>) {
        let view = ViewGeometry::default();
        let geom = LiftGeometry::new(&view, &DepthBins::default(), &GridConfig::default()).unwrap();
        let views = vec![Tensor::zeros(&view.view_shape()); N_VIEWS];
        (geom, views)
    }

    #[test]
    fn zero_views_give_zero_grid() {
        let (geom, views) = lift_fixture();
        let depth = Tensor::filled(&[geom.columns(), 8], 1.0 / 8.0);
        let g = lift_splat(&views, &depth, &geom).unwrap();
        assert!(g.features.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn uniform_depth_conserves_column_mass() {
        let (geom, mut views) = lift_fixture();
        let [_, h, w] = geom.view.view_shape();
        let col = 5;
        for row in 0..h {
            views[1].data_mut()[row * w + col] = 2.0;
        }
        let depth = Tensor::filled(&[geom.columns(), 8], 1.0 / 8.0);
        let g = lift_splat(&views, &depth, &geom).unwrap();
        assert!((g.features.sum() - 2.0).abs() < 1e-9);
        // every bin's cell got an equal share
        let c = g.channels();
        let tokens = g.to_tokens();
        for b in 0..8 {
            let cell = geom.cell(w + col, b);
            assert!(tokens.data()[cell * c] >= 0.25 - 1e-12);
        }
    }

    #[test]
    fn one_hot_depth_lands_at_bin_range() {
        let (geom, mut views) = lift_fixture();
        let [_, h, w] = geom.view.view_shape();
        let (view, col, bin) = (0, 10, 3);
        for row in 0..h {
            views[view].data_mut()[row * w + col] = 1.0;
        }
        let mut depth = Tensor::zeros(&[geom.columns(), 8]);
        for k in 0..geom.columns() {
            depth.data_mut()[k * 8 + bin] = 1.0;
        }
        let g = lift_splat(&views, &depth, &geom).unwrap();
        // ray-marching oracle
        let az = geom.view.column_azimuth(view, col);
        let r = geom.bins.range(bin);
        let (i, j) = geom.grid.cell_of(r * az.cos(), r * az.sin()).unwrap();
        let side = geom.grid.cells();
        let tokens = g.to_tokens();
        let c = g.channels();
        for t in 0..side * side {
            let expect = if t == i * side + j { 1.0 } else { 0.0 };
            assert!((tokens.data()[t * c] - expect).abs() < 1e-12, "cell {t}");
        }
    }

    #[test]
    fn bins_beyond_window_rejected() {
        let bins = DepthBins {
            near_m: 1.0,
            far_m: 30.0,
            count: 8,
        };
        assert!(matches!(
            LiftGeometry::new(&ViewGeometry::default(), &bins, &GridConfig::default()),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn splat_is_differentiable_through_depth() {
        let view = ViewGeometry {
            width: 4,
            height: 2,
            ..ViewGeometry::default()
        };
        let bins = DepthBins {
            near_m: 1.0,
            far_m: 5.0,
            count: 3,
        };
        let geom = LiftGeometry::new(&view, &bins, &GridConfig::square(12.0, 4)).unwrap();
        let cols = geom.columns();
        let payload = Tensor::new(
            &[cols, view.channels],
            (0..cols * view.channels)
                .map(|k| ((k * 7 % 11) as f64) / 11.0)
                .collect(),
        )
        .unwrap();
        let logits = Tensor::new(
            &[cols, 3],
            (0..cols * 3).map(|k| ((k * 5 % 7) as f64) / 7.0 - 0.4).collect(),
        )
        .unwrap();
        let weights = Tensor::new(
            &[geom.grid.tokens(), view.channels],
            (0..geom.grid.tokens() * view.channels)
                .map(|k| ((k * 3 % 13) as f64) / 13.0)
                .collect(),
        )
        .unwrap();
        let report = grad_check(
            |tape: &Tape, v| {
                let depth = v[0].softmax_rows()?;
                let bev = splat_tokens(depth, &payload, &geom)?;
                bev.mul(tape.leaf(weights.clone()))?.square()?.sum()
            },
            &[logits],
            1e-5,
        )
        .unwrap();
        assert!(report.passes(1e-6), "{report:?}");
    }
}
