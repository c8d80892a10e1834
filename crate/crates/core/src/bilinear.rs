//! Bilinear combination of two feature maps, region-wise sum pooling of the
//! resulting outer products, and assembly of the per-part descriptors.
//!
//! Feature maps are channels-first `[C×H×W]`. For two maps with `M` and `N`
//! channels, the bilinear map has `M·N` channels where channel `m·N + n` at
//! location `l` holds `fa[m, l] · fb[n, l]`, i.e. the row-major
//! vectorization of the outer product `fa(l)ᵀ·fb(l)`.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{contract_err, dim_err, Result};
use crate::tensor::{Graph, Tensor, Var};

/// Half-open rectangle of feature-map locations.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Region {
    pub rows: (usize, usize),
    pub cols: (usize, usize),
}

impl Region {
    pub fn area(&self) -> usize {
        (self.rows.1 - self.rows.0) * (self.cols.1 - self.cols.0)
    }

    pub fn contains(&self, r: usize, c: usize) -> bool {
        (self.rows.0..self.rows.1).contains(&r) && (self.cols.0..self.cols.1).contains(&c)
    }
}

/// Partition of an `h×w` map into a grid of `cell_h×cell_w` cells. Trailing
/// row and column bands absorb the remainder and may be smaller.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RegionGrid {
    pub feature_h: usize,
    pub feature_w: usize,
    pub cell_h: usize,
    pub cell_w: usize,
    regions: Vec<Region>,
}

fn bands(extent: usize, cell: usize) -> Vec<(usize, usize)> {
    (0..extent.div_ceil(cell))
        .map(|i| (i * cell, ((i + 1) * cell).min(extent)))
        .collect()
}

impl RegionGrid {
    pub fn new(h: usize, w: usize, cell_h: usize, cell_w: usize) -> Result<Self> {
        if h == 0 || w == 0 {
            return Err(dim_err!("region grid over empty map {}×{}", h, w));
        }
        if cell_h == 0 || cell_w == 0 || cell_h > h || cell_w > w {
            return Err(dim_err!(
                "cell {}×{} must be positive and fit the {}×{} map",
                cell_h,
                cell_w,
                h,
                w
            ));
        }
        let row_bands = bands(h, cell_h);
        let col_bands = bands(w, cell_w);
        let regions = row_bands
            .iter()
            .flat_map(|&rows| col_bands.iter().map(move |&cols| Region { rows, cols }))
            .collect();
        Ok(RegionGrid {
            feature_h: h,
            feature_w: w,
            cell_h,
            cell_w,
            regions,
        })
    }

    /// Single region covering the whole map (global bilinear pooling).
    pub fn full(h: usize, w: usize) -> Result<Self> {
        RegionGrid::new(h, w, h, w)
    }

    /// Grid with roughly `rows×cols` regions; the cell size is the ceiling of
    /// extent / count, so fewer regions may result when counts do not divide.
    pub fn from_counts(h: usize, w: usize, rows: usize, cols: usize) -> Result<Self> {
        if rows == 0 || cols == 0 || rows > h || cols > w {
            return Err(dim_err!(
                "cannot split a {}×{} map into {}×{} regions",
                h,
                w,
                rows,
                cols
            ));
        }
        RegionGrid::new(h, w, h.div_ceil(rows), w.div_ceil(cols))
    }

    pub fn regions(&self) -> &[Region] {
        &self.regions
    }

    pub fn len(&self) -> usize {
        self.regions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.regions.is_empty()
    }

    pub fn grid_dims(&self) -> (usize, usize) {
        (
            self.feature_h.div_ceil(self.cell_h),
            self.feature_w.div_ceil(self.cell_w),
        )
    }

    /// Region index of every location, row-major.
    pub fn location_labels(&self) -> Vec<usize> {
        let mut labels = vec![0; self.feature_h * self.feature_w];
        for (ri, r) in self.regions.iter().enumerate() {
            for y in r.rows.0..r.rows.1 {
                for x in r.cols.0..r.cols.1 {
                    labels[y * self.feature_w + x] = ri;
                }
            }
        }
        labels
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Part {
    Top,
    Middle,
    Bottom,
}

impl Part {
    pub const ALL: [Part; 3] = [Part::Top, Part::Middle, Part::Bottom];

    pub fn index(self) -> usize {
        self as usize
    }
}

impl fmt::Display for Part {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Part::Top => "top",
            Part::Middle => "middle",
            Part::Bottom => "bottom",
        })
    }
}

/// Region-pooled bilinear features of one image part: an `R×(M·N)` matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct BilinearDescriptor {
    pub part: Part,
    pub matrix: Tensor,
}

fn check_pair(fa: &Tensor, fb: &Tensor) -> Result<(usize, usize, usize)> {
    if fa.rank() != 3 || fb.rank() != 3 || fa.shape()[1..] != fb.shape()[1..] {
        return Err(dim_err!(
            "bilinear_outer needs [M×H×W] and [N×H×W] with equal H×W, got {:?} and {:?}",
            fa.shape(),
            fb.shape()
        ));
    }
    Ok((fa.shape()[0], fb.shape()[0], fa.shape()[1] * fa.shape()[2]))
}

/// Per-location outer product, `[M×H×W] × [N×H×W] → [(M·N)×H×W]`.
pub fn bilinear_outer(fa: &Tensor, fb: &Tensor) -> Result<Tensor> {
    let (m, n, hw) = check_pair(fa, fb)?;
    let (a, b) = (fa.data(), fb.data());
    let mut out = vec![0.0; m * n * hw];
    for i in 0..m {
        let ar = &a[i * hw..(i + 1) * hw];
        for j in 0..n {
            let br = &b[j * hw..(j + 1) * hw];
            let dst = &mut out[(i * n + j) * hw..(i * n + j + 1) * hw];
            for ((d, x), y) in dst.iter_mut().zip(ar).zip(br) {
                *d = x * y;
            }
        }
    }
    Tensor::new(&[m * n, fa.shape()[1], fa.shape()[2]], out)
}

fn check_grid(bmap: &Tensor, grid: &RegionGrid) -> Result<usize> {
    if bmap.rank() != 3 || bmap.shape()[1] != grid.feature_h || bmap.shape()[2] != grid.feature_w {
        return Err(dim_err!(
            "region grid over {}×{} does not match map {:?}",
            grid.feature_h,
            grid.feature_w,
            bmap.shape()
        ));
    }
    Ok(bmap.shape()[0])
}

/// Sum pooling inside each region: `[K×H×W] → [R×K]`. Locations inside a
/// region are accumulated in row-major order.
pub fn region_pool(bmap: &Tensor, grid: &RegionGrid) -> Result<Tensor> {
    let k = check_grid(bmap, grid)?;
    let (h, w) = (grid.feature_h, grid.feature_w);
    let d = bmap.data();
    let mut out = vec![0.0; grid.len() * k];
    for (ri, r) in grid.regions().iter().enumerate() {
        for ch in 0..k {
            let plane = &d[ch * h * w..(ch + 1) * h * w];
            let mut s = 0.0;
            for y in r.rows.0..r.rows.1 {
                for v in &plane[y * w + r.cols.0..y * w + r.cols.1] {
                    s += v;
                }
            }
            out[ri * k + ch] = s;
        }
    }
    Tensor::new(&[grid.len(), k], out)
}

/// Concatenates three part descriptors in top, middle, bottom order.
pub fn assemble_descriptor(parts: &[BilinearDescriptor]) -> Result<Tensor> {
    if parts.len() != 3 {
        return Err(contract_err!("expected 3 part descriptors, got {}", parts.len()));
    }
    let mut sorted: Vec<&BilinearDescriptor> = parts.iter().collect();
    sorted.sort_by_key(|p| p.part);
    if sorted.iter().map(|p| p.part).collect::<Vec<_>>() != Part::ALL {
        return Err(contract_err!(
            "part descriptors must be one each of top, middle, bottom"
        ));
    }
    let shape = sorted[0].matrix.shape();
    if shape.len() != 2 || sorted.iter().any(|p| p.matrix.shape() != shape) {
        return Err(contract_err!(
            "part descriptors must share one R×MN shape, got {:?}",
            sorted.iter().map(|p| p.matrix.shape().to_vec()).collect::<Vec<_>>()
        ));
    }
    let mut data = Vec::with_capacity(3 * sorted[0].matrix.len());
    for p in sorted {
        data.extend_from_slice(p.matrix.data());
    }
    let n = data.len();
    Tensor::new(&[n], data)
}

const SQRT_EPS: f64 = 1e-8;
const L2_EPS: f64 = 1e-12;

impl Graph {
    pub fn bilinear_outer(&mut self, fa: Var, fb: Var) -> Result<Var> {
        let (ta, tb) = (self.value(fa).clone(), self.value(fb).clone());
        let out = bilinear_outer(&ta, &tb)?;
        let (m, n, hw) = check_pair(&ta, &tb)?;
        self.push(
            "bilinear_outer",
            &[fa, fb],
            out.shape(),
            out.to_vec(),
            Box::new(move |g, need| {
                let gd = g.data();
                let (a, b) = (ta.data(), tb.data());
                let ga = if need[0] {
                    let mut v = vec![0.0; m * hw];
                    for i in 0..m {
                        let dst = &mut v[i * hw..(i + 1) * hw];
                        for j in 0..n {
                            let gr = &gd[(i * n + j) * hw..(i * n + j + 1) * hw];
                            let br = &b[j * hw..(j + 1) * hw];
                            for ((d, gv), bv) in dst.iter_mut().zip(gr).zip(br) {
                                *d += gv * bv;
                            }
                        }
                    }
                    Some(Tensor::new(ta.shape(), v)?)
                } else {
                    None
                };
                let gb = if need[1] {
                    let mut v = vec![0.0; n * hw];
                    for i in 0..m {
                        let ar = &a[i * hw..(i + 1) * hw];
                        for j in 0..n {
                            let gr = &gd[(i * n + j) * hw..(i * n + j + 1) * hw];
                            let dst = &mut v[j * hw..(j + 1) * hw];
                            for ((d, gv), av) in dst.iter_mut().zip(gr).zip(ar) {
                                *d += gv * av;
                            }
                        }
                    }
                    Some(Tensor::new(tb.shape(), v)?)
                } else {
                    None
                };
                Ok(vec![ga, gb])
            }),
        )
    }

    pub fn region_pool(&mut self, bmap: Var, grid: &RegionGrid) -> Result<Var> {
        let out = region_pool(self.value(bmap), grid)?;
        let in_shape = self.shape(bmap).to_vec();
        let labels = grid.location_labels();
        let k = in_shape[0];
        self.push(
            "region_pool",
            &[bmap],
            out.shape(),
            out.to_vec(),
            Box::new(move |g, _| {
                let hw = labels.len();
                let gd = g.data();
                let mut v = vec![0.0; k * hw];
                for ch in 0..k {
                    for (l, &r) in labels.iter().enumerate() {
                        v[ch * hw + l] = gd[r * k + ch];
                    }
                }
                Ok(vec![Some(Tensor::new(&in_shape, v)?)])
            }),
        )
    }

    /// Flattened concatenation of the top, middle and bottom region matrices.
    pub fn assemble_descriptor(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.len() != 3 {
            return Err(contract_err!("expected 3 part descriptors, got {}", parts.len()));
        }
        let shape = self.shape(parts[0]).to_vec();
        if shape.len() != 2 || parts.iter().any(|&p| self.shape(p) != shape.as_slice()) {
            return Err(contract_err!(
                "part descriptors must share one R×MN shape, got {:?}",
                parts.iter().map(|&p| self.shape(p).to_vec()).collect::<Vec<_>>()
            ));
        }
        self.concat(parts)
    }

    /// Per-row signed square root followed by L2 normalization, on an `[R×K]`
    /// matrix. Small epsilons keep the map differentiable at zero.
    pub fn signed_sqrt_l2(&mut self, x: Var) -> Result<Var> {
        let tx = self.value(x).clone();
        if tx.rank() != 2 {
            return Err(dim_err!("signed_sqrt_l2 expects [R×K], got {:?}", tx.shape()));
        }
        let k = tx.shape()[1];
        let root_eps = SQRT_EPS.sqrt();
        let z: Vec<f64> = tx
            .data()
            .iter()
            .map(|&v| v.signum() * ((v.abs() + SQRT_EPS).sqrt() - root_eps))
            .collect();
        let norms: Vec<f64> = z
            .chunks(k)
            .map(|row| (row.iter().map(|v| v * v).sum::<f64>() + L2_EPS).sqrt())
            .collect();
        let out: Vec<f64> = z.iter().enumerate().map(|(i, v)| v / norms[i / k]).collect();
        let shape = tx.shape().to_vec();
        let y = out.clone();
        self.push(
            "signed_sqrt_l2",
            &[x],
            &shape.clone(),
            out,
            Box::new(move |g, _| {
                let gd = g.data();
                let mut v = vec![0.0; gd.len()];
                for (r, norm) in norms.iter().enumerate() {
                    let row = r * k..(r + 1) * k;
                    let gy: f64 = gd[row.clone()].iter().zip(&y[row.clone()]).map(|(a, b)| a * b).sum();
                    for i in row {
                        let gz = (gd[i] - y[i] * gy) / norm;
                        v[i] = gz * 0.5 / (tx.data()[i].abs() + SQRT_EPS).sqrt();
                    }
                }
                Ok(vec![Some(Tensor::new(&shape, v)?)])
            }),
        )
    }
}
