//! Real-valued functions sampled on uniform tensor grids over a box in `ℝ^N`
//! times a time interval, extended by zero outside the box and time slab.
//!
//! Values are stored row-major over the axes `[x_1, …, x_N, t]`, so the
//! time index varies fastest. Cell-centred grids place nodes at cell
//! midpoints and weight every node by the cell volume; vertex grids place
//! nodes on both endpoints and use trapezoid weights.
//!
//! Binary container layout:
//!
//! ```text
//! b"KOLMOGF1" | u64 LE header length | JSON header | f64 LE values
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::quadrature::pairwise_sum;

const MAGIC: &[u8; 8] = b"KOLMOGF1";
const MAX_AXES: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Centering {
    Cell,
    Vertex,
}

/// A grid function over `box × (t_0, T)`.
#[derive(Debug, Clone, PartialEq)]
pub struct GridField {
    lo: Vec<f64>,
    hi: Vec<f64>,
    t_range: (f64, f64),
    shape: Vec<usize>,
    centering: Centering,
    values: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    axes: Vec<String>,
    lo: Vec<f64>,
    hi: Vec<f64>,
    spacings: Vec<f64>,
    extents: Vec<usize>,
    centering: Centering,
    dtype: String,
}

impl GridField {
    /// `shape` lists the spatial extents followed by the time extent.
    pub fn new(
        lo: Vec<f64>,
        hi: Vec<f64>,
        t_range: (f64, f64),
        shape: Vec<usize>,
        centering: Centering,
        values: Vec<f64>,
    ) -> Result<Self> {
        let n = lo.len();
        if hi.len() != n || shape.len() != n + 1 {
            return Err(Error::ShapeMismatch(format!(
                "box has {} / {} bounds but shape has {} axes (expected {})",
                lo.len(),
                hi.len(),
                shape.len(),
                n + 1
            )));
        }
        if n == 0 || n + 1 > MAX_AXES {
            return Err(Error::ShapeMismatch(format!(
                "spatial dimension {n} outside 1..={}",
                MAX_AXES - 1
            )));
        }
        let min_extent = match centering {
            Centering::Cell => 1,
            Centering::Vertex => 2,
        };
        if shape.iter().any(|&e| e < min_extent) {
            return Err(Error::ShapeMismatch(format!(
                "extents {shape:?} too small for {centering:?} centering"
            )));
        }
        let bounds = lo.iter().zip(&hi).chain(std::iter::once((&t_range.0, &t_range.1)));
        for (a, b) in bounds {
            if !a.is_finite() || !b.is_finite() {
                return Err(Error::NonFinite("grid bounds".into()));
            }
            if !(b > a) {
                return Err(Error::ShapeMismatch(format!("empty interval [{a}, {b}]")));
            }
        }
        let len: usize = shape.iter().product();
        if values.len() != len {
            return Err(Error::ShapeMismatch(format!(
                "{} values for shape {shape:?} ({len} nodes)",
                values.len()
            )));
        }
        Ok(GridField {
            lo,
            hi,
            t_range,
            shape,
            centering,
            values,
        })
    }

    pub fn zeros(
        lo: Vec<f64>,
        hi: Vec<f64>,
        t_range: (f64, f64),
        shape: Vec<usize>,
        centering: Centering,
    ) -> Result<Self> {
        let len = shape.iter().product();
        Self::new(lo, hi, t_range, shape, centering, vec![0.0; len])
    }

    /// Samples `f(x, t)` at every node.
    pub fn from_fn<F>(
        lo: Vec<f64>,
        hi: Vec<f64>,
        t_range: (f64, f64),
        shape: Vec<usize>,
        centering: Centering,
        f: F,
    ) -> Result<Self>
    where
        F: Fn(&[f64], f64) -> f64 + Sync,
    {
        let mut field = Self::zeros(lo, hi, t_range, shape, centering)?;
        let values: Vec<f64> = (0..field.len())
            .into_par_iter()
            .map(|k| {
                let (x, t) = field.node(k);
                f(&x, t)
            })
            .collect();
        field.values = values;
        Ok(field)
    }

    /// Same grid, new values.
    pub fn with_values(&self, values: Vec<f64>) -> Result<Self> {
        Self::new(
            self.lo.clone(),
            self.hi.clone(),
            self.t_range,
            self.shape.clone(),
            self.centering,
            values,
        )
    }

    pub fn map(&self, f: impl Fn(f64) -> f64 + Sync) -> Self {
        let mut out = self.clone();
        out.values.par_iter_mut().for_each(|v| *v = f(*v));
        out
    }

    pub fn dim(&self) -> usize {
        self.lo.len()
    }

    pub fn lo(&self) -> &[f64] {
        &self.lo
    }

    pub fn hi(&self) -> &[f64] {
        &self.hi
    }

    pub fn t_range(&self) -> (f64, f64) {
        self.t_range
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn centering(&self) -> Centering {
        self.centering
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    fn axis_bounds(&self, axis: usize) -> (f64, f64) {
        if axis < self.dim() {
            (self.lo[axis], self.hi[axis])
        } else {
            self.t_range
        }
    }

    /// Node spacing along `axis` (the time axis is `dim()`).
    pub fn spacing(&self, axis: usize) -> f64 {
        let (a, b) = self.axis_bounds(axis);
        let n = self.shape[axis];
        match self.centering {
            Centering::Cell => (b - a) / n as f64,
            Centering::Vertex => (b - a) / (n - 1) as f64,
        }
    }

    pub fn spacings(&self) -> Vec<f64> {
        (0..=self.dim()).map(|a| self.spacing(a)).collect()
    }

    pub fn coord(&self, axis: usize, i: usize) -> f64 {
        let (a, _) = self.axis_bounds(axis);
        let h = self.spacing(axis);
        match self.centering {
            Centering::Cell => a + (i as f64 + 0.5) * h,
            Centering::Vertex => a + i as f64 * h,
        }
    }

    pub fn axis_coords(&self, axis: usize) -> Vec<f64> {
        (0..self.shape[axis]).map(|i| self.coord(axis, i)).collect()
    }

    pub fn strides(&self) -> Vec<usize> {
        let mut s = vec![1; self.shape.len()];
        for a in (0..self.shape.len() - 1).rev() {
            s[a] = s[a + 1] * self.shape[a + 1];
        }
        s
    }

    pub fn multi_index(&self, mut k: usize) -> Vec<usize> {
        let mut idx = vec![0; self.shape.len()];
        for a in (0..self.shape.len()).rev() {
            idx[a] = k % self.shape[a];
            k /= self.shape[a];
        }
        idx
    }

    pub fn flat_index(&self, idx: &[usize]) -> usize {
        idx.iter().zip(&self.shape).fold(0, |acc, (&i, &n)| acc * n + i)
    }

    /// Spatial coordinates and time of node `k`.
    pub fn node(&self, k: usize) -> (Vec<f64>, f64) {
        let idx = self.multi_index(k);
        let x = (0..self.dim()).map(|a| self.coord(a, idx[a])).collect();
        (x, self.coord(self.dim(), idx[self.dim()]))
    }

    fn axis_weight(&self, axis: usize, i: usize) -> f64 {
        let h = self.spacing(axis);
        match self.centering {
            Centering::Cell => h,
            Centering::Vertex if i == 0 || i + 1 == self.shape[axis] => 0.5 * h,
            Centering::Vertex => h,
        }
    }

    /// Quadrature weight of node `k` in the space-time grid measure.
    pub fn weight(&self, k: usize) -> f64 {
        match self.centering {
            Centering::Cell => self.cell_volume(),
            Centering::Vertex => self
                .multi_index(k)
                .iter()
                .enumerate()
                .map(|(a, &i)| self.axis_weight(a, i))
                .product(),
        }
    }

    /// Space-time volume of one grid cell.
    pub fn cell_volume(&self) -> f64 {
        self.spacings().iter().product()
    }

    /// Space-time measure of the whole grid.
    pub fn total_measure(&self) -> f64 {
        (0..=self.dim())
            .map(|a| {
                let (lo, hi) = self.axis_bounds(a);
                hi - lo
            })
            .product()
    }

    fn weights(&self) -> Vec<f64> {
        match self.centering {
            Centering::Cell => vec![self.cell_volume(); self.len()],
            Centering::Vertex => (0..self.len()).map(|k| self.weight(k)).collect(),
        }
    }

    fn weighted_sum(&self, f: impl Fn(f64) -> f64 + Sync) -> f64 {
        let w = self.weights();
        let terms: Vec<f64> = self
            .values
            .par_iter()
            .zip(w.par_iter())
            .map(|(&v, &w)| w * f(v))
            .collect();
        pairwise_sum(&terms)
    }

    /// `(Σ |u|^p · w)^{1/p}` over the grid measure.
    pub fn lp_norm(&self, p: f64) -> Result<f64> {
        if !(p >= 1.0) {
            return Err(Error::InvalidExponent(p));
        }
        if p.is_infinite() {
            return Ok(self.sup_norm());
        }
        Ok(self.weighted_sum(|v| v.abs().powf(p)).powf(1.0 / p))
    }

    /// `∫ u` over the grid measure.
    pub fn integral(&self) -> f64 {
        self.weighted_sum(|v| v)
    }

    /// `max |u|`.
    pub fn sup_norm(&self) -> f64 {
        self.values.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    /// Discrete `sup u`.
    pub fn sup(&self) -> f64 {
        self.values.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    /// `|A_k|`: measure of the nodes with `u > k`.
    pub fn level_measure(&self, k: f64) -> f64 {
        self.weighted_sum(|v| if v > k { 1.0 } else { 0.0 })
    }

    /// `‖(u - m)_+‖_2` over the grid measure.
    pub fn undercut_energy(&self, m: f64) -> f64 {
        self.weighted_sum(|v| {
            let d = (v - m).max(0.0);
            d * d
        })
        .sqrt()
    }

    /// Nodewise `(u - k)_+`.
    pub fn undercut(&self, k: f64) -> GridField {
        self.map(|v| (v - k).max(0.0))
    }

    /// Multilinear interpolant, constant on the half-cell fringe of a
    /// cell-centred grid and zero outside the box and time slab.
    pub fn sample(&self, x: &[f64], t: f64) -> f64 {
        let d = self.shape.len();
        let mut base = [0usize; MAX_AXES];
        let mut frac = [0.0f64; MAX_AXES];
        for a in 0..d {
            let (coord, (lo, hi)) = if a < d - 1 {
                (x[a], (self.lo[a], self.hi[a]))
            } else {
                (t, self.t_range)
            };
            if !(coord >= lo && coord <= hi) {
                return 0.0;
            }
            let n = self.shape[a];
            let h = self.spacing(a);
            let mut s = (coord - lo) / h;
            if self.centering == Centering::Cell {
                s -= 0.5;
            }
            let s = s.clamp(0.0, (n - 1) as f64);
            if n == 1 {
                base[a] = 0;
                frac[a] = 0.0;
            } else {
                let i = (s.floor() as usize).min(n - 2);
                base[a] = i;
                frac[a] = s - i as f64;
            }
        }
        let mut strides = [1usize; MAX_AXES];
        for a in (0..d - 1).rev() {
            strides[a] = strides[a + 1] * self.shape[a + 1];
        }
        let mut acc = 0.0;
        'corner: for mask in 0..(1usize << d) {
            let mut w = 1.0;
            let mut k = 0;
            for a in 0..d {
                let up = mask >> a & 1 == 1;
                let wa = if up { frac[a] } else { 1.0 - frac[a] };
                if wa == 0.0 {
                    continue 'corner;
                }
                w *= wa;
                k += (base[a] + usize::from(up)) * strides[a];
            }
            acc += w * self.values[k];
        }
        acc
    }

    /// Spatial multilinear interpolant of the time slice `it`, zero outside the box.
    pub fn sample_slice(&self, x: &[f64], it: usize) -> f64 {
        let d = self.dim();
        let nt = self.shape[d];
        let mut base = [0usize; MAX_AXES];
        let mut frac = [0.0f64; MAX_AXES];
        for a in 0..d {
            if !(x[a] >= self.lo[a] && x[a] <= self.hi[a]) {
                return 0.0;
            }
            let n = self.shape[a];
            let h = self.spacing(a);
            let mut s = (x[a] - self.lo[a]) / h;
            if self.centering == Centering::Cell {
                s -= 0.5;
            }
            let s = s.clamp(0.0, (n - 1) as f64);
            if n == 1 {
                base[a] = 0;
                frac[a] = 0.0;
            } else {
                let i = (s.floor() as usize).min(n - 2);
                base[a] = i;
                frac[a] = s - i as f64;
            }
        }
        let mut strides = [nt; MAX_AXES];
        for a in (0..d.saturating_sub(1)).rev() {
            strides[a] = strides[a + 1] * self.shape[a + 1];
        }
        let mut acc = 0.0;
        'corner: for mask in 0..(1usize << d) {
            let mut w = 1.0;
            let mut k = it;
            for a in 0..d {
                let up = mask >> a & 1 == 1;
                let wa = if up { frac[a] } else { 1.0 - frac[a] };
                if wa == 0.0 {
                    continue 'corner;
                }
                w *= wa;
                k += (base[a] + usize::from(up)) * strides[a];
            }
            acc += w * self.values[k];
        }
        acc
    }

    /// Mean of the piecewise-constant time slice `it` of a cell-centred field
    /// (zero outside the box)
    /// over the axis-aligned cell of one grid spacing centred at `x`.
    /// Summing it over any grid of the same spacing conserves the integral.
    pub fn cell_average_slice(&self, x: &[f64], it: usize) -> f64 {
        let d = self.dim();
        let nt = self.shape[d];
        let mut lower = [0isize; MAX_AXES];
        let mut frac = [0.0f64; MAX_AXES];
        for a in 0..d {
            let s = (x[a] - self.lo[a]) / self.spacing(a) - 0.5;
            if !(s > -1.0 && s < self.shape[a] as f64) {
                return 0.0;
            }
            let i = s.floor();
            lower[a] = i as isize;
            frac[a] = s - i;
        }
        let mut strides = [nt; MAX_AXES];
        for a in (0..d.saturating_sub(1)).rev() {
            strides[a] = strides[a + 1] * self.shape[a + 1];
        }
        let mut acc = 0.0;
        'corner: for mask in 0..(1usize << d) {
            let mut w = 1.0;
            let mut k = it;
            for a in 0..d {
                let up = mask >> a & 1 == 1;
                let wa = if up { frac[a] } else { 1.0 - frac[a] };
                let cell = lower[a] + isize::from(up);
                if wa == 0.0 || cell < 0 || cell >= self.shape[a] as isize {
                    continue 'corner;
                }
                w *= wa;
                k += cell as usize * strides[a];
            }
            acc += w * self.values[k];
        }
        acc
    }

    /// Whether two fields share the same grid (values aside).
    pub fn same_grid(&self, other: &GridField) -> bool {
        self.lo == other.lo
            && self.hi == other.hi
            && self.t_range == other.t_range
            && self.shape == other.shape
            && self.centering == other.centering
    }

    fn header(&self) -> Header {
        let n = self.dim();
        let mut axes: Vec<String> = (1..=n).map(|i| format!("x{i}")).collect();
        axes.push("t".into());
        let mut lo = self.lo.clone();
        lo.push(self.t_range.0);
        let mut hi = self.hi.clone();
        hi.push(self.t_range.1);
        Header {
            axes,
            lo,
            hi,
            spacings: self.spacings(),
            extents: self.shape.clone(),
            centering: self.centering,
            dtype: "f64le".into(),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let header = serde_json::to_vec(&self.header()).expect("header serializes");
        let mut out = Vec::with_capacity(16 + header.len() + 8 * self.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for v in &self.values {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 16 || &bytes[..8] != MAGIC {
            return Err(Error::Format("missing KOLMOGF1 magic".into()));
        }
        let hlen = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let body = bytes
            .get(16..16 + hlen)
            .ok_or_else(|| Error::Format("truncated header".into()))?;
        let h: Header = serde_json::from_slice(body)?;
        if h.dtype != "f64le" {
            return Err(Error::Format(format!("unsupported dtype {}", h.dtype)));
        }
        let d = h.extents.len();
        if d < 2 || h.lo.len() != d || h.hi.len() != d || h.axes.len() != d {
            return Err(Error::Format("inconsistent header axes".into()));
        }
        let data = &bytes[16 + hlen..];
        let count: usize = h.extents.iter().product();
        if data.len() != 8 * count {
            return Err(Error::Format(format!(
                "expected {} value bytes, found {}",
                8 * count,
                data.len()
            )));
        }
        let values = data
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let field = GridField::new(
            h.lo[..d - 1].to_vec(),
            h.hi[..d - 1].to_vec(),
            (h.lo[d - 1], h.hi[d - 1]),
            h.extents.clone(),
            h.centering,
            values,
        )?;
        for (a, s) in h.spacings.iter().enumerate() {
            if (field.spacing(a) - s).abs() > 1e-12 * s.abs().max(1.0) {
                return Err(Error::Format(format!(
                    "header spacing {s} disagrees with extents on axis {a}"
                )));
            }
        }
        Ok(field)
    }

    pub fn write_binary(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        w.write_all(&self.to_bytes())?;
        w.flush()?;
        Ok(())
    }

    pub fn read_binary(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        BufReader::new(File::open(path)?).read_to_end(&mut bytes)?;
        Self::from_bytes(&bytes)
    }

    /// One row per node: `x1, …, xN, t, value`.
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        let n = self.dim();
        let mut head: Vec<String> = (1..=n).map(|i| format!("x{i}")).collect();
        head.push("t".into());
        head.push("value".into());
        writeln!(w, "{}", head.join(","))?;
        for k in 0..self.len() {
            let (x, t) = self.node(k);
            for xi in &x {
                write!(w, "{xi},")?;
            }
            writeln!(w, "{t},{}", self.values[k])?;
        }
        Ok(())
    }
}

/// Anything that can be evaluated at space-time points, extended by zero
/// outside its time support.
pub trait Source: Sync {
    fn value(&self, x: &[f64], t: f64) -> f64;

    /// Interval outside of which the source vanishes.
    fn time_support(&self) -> (f64, f64);

    /// Times at which the source may be non-smooth.
    fn time_breakpoints(&self) -> Vec<f64> {
        Vec::new()
    }

    fn as_grid(&self) -> Option<&GridField> {
        None
    }
}

impl Source for GridField {
    fn value(&self, x: &[f64], t: f64) -> f64 {
        self.sample(x, t)
    }

    fn time_support(&self) -> (f64, f64) {
        self.t_range
    }

    fn time_breakpoints(&self) -> Vec<f64> {
        let a = self.dim();
        let mut b: Vec<f64> = self.axis_coords(a);
        b.insert(0, self.t_range.0);
        b.push(self.t_range.1);
        b.dedup();
        b
    }

    fn as_grid(&self) -> Option<&GridField> {
        Some(self)
    }
}

/// A closure source supported on `(t0, t1)`.
pub struct FnSource<F> {
    pub f: F,
    pub support: (f64, f64),
}

impl<F: Fn(&[f64], f64) -> f64 + Sync> FnSource<F> {
    pub fn new(f: F, support: (f64, f64)) -> Self {
        FnSource { f, support }
    }
}

impl<F: Fn(&[f64], f64) -> f64 + Sync> Source for FnSource<F> {
    fn value(&self, x: &[f64], t: f64) -> f64 {
        if t < self.support.0 || t > self.support.1 {
            0.0
        } else {
            (self.f)(x, t)
        }
    }

    fn time_support(&self) -> (f64, f64) {
        self.support
    }
}
