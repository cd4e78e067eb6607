//! Radial grids: composite Gauss quadrature, discrete norms, rescaling, and
//! radial differential operators shared by every other module.
//!
//! A grid is a partition of `[r_min, r_max]` into cells carrying four
//! Gauss-Legendre nodes each, so all nodes are strictly positive even when
//! the partition starts at zero. Integrals over `[0, infinity)` are handled
//! by power-law extrapolation of the tail beyond `r_max`.

use std::sync::Arc;

use crate::error::{Result, WmError};
use crate::util::{fd_weights, fmt_g17, fnv1a, Pchip, GAUSS4_W, GAUSS4_X};

pub const NODES_PER_CELL: usize = 4;
pub const STENCIL: usize = 7;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GridKind {
    Uniform,
    Geometric,
    Hybrid,
}

impl GridKind {
    pub fn name(self) -> &'static str {
        match self {
            GridKind::Uniform => "uniform",
            GridKind::Geometric => "geometric",
            GridKind::Hybrid => "hybrid",
        }
    }
}

/// Measure selector for [`RadialGrid::quad`]: `dr`, `r dr`, or `dr / r`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Weight {
    Dr,
    RDr,
    DrOverR,
}

/// Scaling family selector for [`RadialGrid::rescale`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Rescale {
    /// `f(r / lambda)`; leaves the H norm invariant.
    H,
    /// `f(r / lambda) / lambda`; leaves the `L^2(r dr)` norm invariant.
    L2,
}

/// Radial differential operators available through [`RadialGrid::diff`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DiffOp {
    /// d/dr
    D1,
    /// d^2/dr^2 + (1/r) d/dr (radial Laplacian in 2 dimensions)
    Lap2,
    /// d^2/dr^2 + (3/r) d/dr (radial Laplacian in 4 dimensions)
    Lap4,
    /// r d/dr
    Lam,
    /// 1 + r d/dr
    Lam0,
}

/// Quadrature value with a tail-extrapolation record.
#[derive(Clone, Copy, Debug)]
pub struct QuadResult {
    /// Integral over `[0, infinity)`: grid part plus extrapolated tail.
    pub value: f64,
    /// Tail contribution beyond `r_max` (an error bound when `warning`).
    pub tail: f64,
    /// Set when the integrand does not decay like a power beyond `r_max`
    /// and the tail could not be extrapolated.
    pub warning: bool,
}

/// Discretization of `(0, r_max]` with Gauss nodes, quadrature weights for
/// integration against `dr`, and 7-point differentiation stencils.
#[derive(Clone, Debug)]
pub struct RadialGrid {
    pub kind: GridKind,
    pub r_min: f64,
    pub r_switch: f64,
    pub r_max: f64,
    pub cells_inner: usize,
    pub cells_outer: usize,
    edges: Vec<f64>,
    nodes: Vec<f64>,
    w_dr: Vec<f64>,
    stencil_start: Vec<u32>,
    d1w: Vec<[f64; STENCIL]>,
    d2w: Vec<[f64; STENCIL]>,
}

impl RadialGrid {
    /// Uniform cells on `[r_min, r_max]`; `r_min = 0` is allowed because all
    /// quadrature nodes are interior to their cells.
    pub fn uniform(r_min: f64, r_max: f64, cells: usize) -> Result<Self> {
        if !(r_min >= 0.0 && r_min < r_max) || !r_max.is_finite() {
            return Err(WmError::Config(format!(
                "uniform grid needs 0 <= r_min < r_max, got [{r_min}, {r_max}]"
            )));
        }
        check_cells(cells)?;
        let h = (r_max - r_min) / cells as f64;
        let edges: Vec<f64> = (0..=cells).map(|i| r_min + h * i as f64).collect();
        Ok(Self::from_edges(GridKind::Uniform, r_min, r_min, r_max, 0, cells, edges))
    }

    /// Geometric cells on `[r_min, r_max]`, constant edge ratio.
    pub fn geometric(r_min: f64, r_max: f64, cells: usize) -> Result<Self> {
        if !(r_min > 0.0 && r_min < r_max) || !r_max.is_finite() {
            return Err(WmError::Config(format!(
                "geometric grid needs 0 < r_min < r_max, got [{r_min}, {r_max}]"
            )));
        }
        check_cells(cells)?;
        let ratio = (r_max / r_min).powf(1.0 / cells as f64);
        let mut edges: Vec<f64> = (0..=cells).map(|i| r_min * ratio.powi(i as i32)).collect();
        edges[cells] = r_max;
        Ok(Self::from_edges(GridKind::Geometric, r_min, r_min, r_max, cells, 0, edges))
    }

    /// Geometric cells on `[r_min, r_switch]` followed by uniform cells on
    /// `[r_switch, r_max]`. The default analysis layout: resolves scales
    /// separated by several orders of magnitude near the origin while keeping
    /// uniform resolution where bubbles interact.
    pub fn hybrid(
        r_min: f64,
        r_switch: f64,
        r_max: f64,
        cells_inner: usize,
        cells_outer: usize,
    ) -> Result<Self> {
        if !(r_min > 0.0 && r_min < r_switch && r_switch < r_max) || !r_max.is_finite() {
            return Err(WmError::Config(format!(
                "hybrid grid needs 0 < r_min < r_switch < r_max, got {r_min}, {r_switch}, {r_max}"
            )));
        }
        check_cells(cells_inner)?;
        check_cells(cells_outer)?;
        let ratio = (r_switch / r_min).powf(1.0 / cells_inner as f64);
        let mut edges: Vec<f64> =
            (0..=cells_inner).map(|i| r_min * ratio.powi(i as i32)).collect();
        edges[cells_inner] = r_switch;
        let h = (r_max - r_switch) / cells_outer as f64;
        edges.extend((1..=cells_outer).map(|i| r_switch + h * i as f64));
        let n = edges.len() - 1;
        edges[n] = r_max;
        Ok(Self::from_edges(GridKind::Hybrid, r_min, r_switch, r_max, cells_inner, cells_outer, edges))
    }

    fn from_edges(
        kind: GridKind,
        r_min: f64,
        r_switch: f64,
        r_max: f64,
        cells_inner: usize,
        cells_outer: usize,
        edges: Vec<f64>,
    ) -> Self {
        let cells = edges.len() - 1;
        let n = cells * NODES_PER_CELL;
        let mut nodes = Vec::with_capacity(n);
        let mut w_dr = Vec::with_capacity(n);
        for c in 0..cells {
            let mid = 0.5 * (edges[c] + edges[c + 1]);
            let half = 0.5 * (edges[c + 1] - edges[c]);
            for j in 0..NODES_PER_CELL {
                nodes.push(mid + half * GAUSS4_X[j]);
                w_dr.push(half * GAUSS4_W[j]);
            }
        }
        let mut stencil_start = Vec::with_capacity(n);
        let mut d1w = Vec::with_capacity(n);
        let mut d2w = Vec::with_capacity(n);
        for i in 0..n {
            let s = i.saturating_sub(STENCIL / 2).min(n - STENCIL);
            let c = fd_weights(nodes[i], &nodes[s..s + STENCIL], 2);
            let mut a = [0.0; STENCIL];
            let mut b = [0.0; STENCIL];
            for j in 0..STENCIL {
                a[j] = c[1][j];
                b[j] = c[2][j];
            }
            stencil_start.push(s as u32);
            d1w.push(a);
            d2w.push(b);
        }
        RadialGrid {
            kind,
            r_min,
            r_switch,
            r_max,
            cells_inner,
            cells_outer,
            edges,
            nodes,
            w_dr,
            stencil_start,
            d1w,
            d2w,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn cells(&self) -> usize {
        self.edges.len() - 1
    }

    pub fn nodes(&self) -> &[f64] {
        &self.nodes
    }

    pub fn edges(&self) -> &[f64] {
        &self.edges
    }

    /// Constant ratio of consecutive cell edges on a geometric grid.
    pub fn edge_ratio(&self) -> Option<f64> {
        match self.kind {
            GridKind::Geometric => Some((self.r_max / self.r_min).powf(1.0 / self.cells() as f64)),
            _ => None,
        }
    }

    /// Sample a function of r at every node.
    pub fn sample<F: Fn(f64) -> f64>(&self, f: F) -> Vec<f64> {
        self.nodes.iter().map(|&r| f(r)).collect()
    }

    /// Quadrature weights against the given measure.
    pub fn weights(&self, w: Weight) -> Vec<f64> {
        match w {
            Weight::Dr => self.w_dr.clone(),
            Weight::RDr => self.w_dr.iter().zip(&self.nodes).map(|(w, r)| w * r).collect(),
            Weight::DrOverR => self.w_dr.iter().zip(&self.nodes).map(|(w, r)| w / r).collect(),
        }
    }

    /// Integral of the sampled integrand over the grid (no tail term).
    pub fn quad(&self, f: &[f64], w: Weight) -> f64 {
        assert_eq!(f.len(), self.len());
        match w {
            Weight::Dr => f.iter().zip(&self.w_dr).map(|(v, w)| v * w).sum(),
            Weight::RDr => {
                let mut s = 0.0;
                for i in 0..f.len() {
                    s += f[i] * self.w_dr[i] * self.nodes[i];
                }
                s
            }
            Weight::DrOverR => {
                let mut s = 0.0;
                for i in 0..f.len() {
                    s += f[i] * self.w_dr[i] / self.nodes[i];
                }
                s
            }
        }
    }

    /// Integral over `[0, infinity)`: the grid part plus a tail obtained by
    /// fitting a power law to the integrand over the last two half-octaves.
    /// If the integrand is not power-like there and not negligible, the
    /// result carries a warning and `tail` is a crude bound instead.
    pub fn quad_tail(&self, f: &[f64], w: Weight) -> QuadResult {
        assert_eq!(f.len(), self.len());
        let raw = self.quad(f, w);
        let factor = |i: usize| match w {
            Weight::Dr => 1.0,
            Weight::RDr => self.nodes[i],
            Weight::DrOverR => 1.0 / self.nodes[i],
        };

        // Cell-aligned blocks [e1, e2] and [e2, r_max] with e2 ~ r_max/sqrt(2),
        // e1 ~ r_max/2; block integrals determine the decay power.
        let e1_target = self.r_max / 2.0;
        let e2_target = self.r_max / std::f64::consts::SQRT_2;
        let c1 = match self.edges.iter().position(|&e| e >= e1_target) {
            Some(c) if c < self.cells() => c,
            _ => return QuadResult { value: raw, tail: 0.0, warning: true },
        };
        let c2 = match self.edges.iter().position(|&e| e >= e2_target) {
            Some(c) if c < self.cells() => c,
            _ => return QuadResult { value: raw, tail: 0.0, warning: true },
        };
        if c2 <= c1 + 1 || self.cells() <= c2 + 1 {
            return QuadResult { value: raw, tail: 0.0, warning: true };
        }
        let mut s1 = 0.0;
        for i in c1 * NODES_PER_CELL..c2 * NODES_PER_CELL {
            s1 += f[i] * self.w_dr[i] * factor(i);
        }
        let mut s2 = 0.0;
        let mut scale_abs: f64 = 0.0;
        for i in c2 * NODES_PER_CELL..self.len() {
            s2 += f[i] * self.w_dr[i] * factor(i);
            scale_abs = scale_abs.max((f[i] * factor(i)).abs());
        }
        let negligible = scale_abs * self.r_max <= 1e-13 * raw.abs() + 1e-290;
        if negligible {
            return QuadResult { value: raw, tail: 0.0, warning: false };
        }

        // For integrand C r^-p: S(a,b) = C (a^(1-p) - b^(1-p)) / (p-1).
        // Ratios are normalized by the block edges to avoid under/overflow.
        let (e1, e2, r3) = (self.edges[c1], self.edges[c2], self.r_max);
        let block_ratio = |p: f64| -> f64 {
            let q = 1.0 - p;
            let a = (e2 / e1).powf(q);
            let b = (r3 / e1).powf(q);
            (a - b) / (1.0 - a)
        };
        let q_obs = s2 / s1;
        let (p_lo, p_hi) = (1.1, 400.0);
        if !(q_obs > 1e-8 && q_obs < block_ratio(p_lo) && q_obs > block_ratio(p_hi)) {
            return QuadResult { value: raw, tail: s2.abs(), warning: true };
        }
        let p = crate::util::bisect(|p| block_ratio(p) - q_obs, p_lo, p_hi, 1e-12, 200);
        let c = (r3 / e2).powf(1.0 - p);
        let tail = s2 * c / (1.0 - c);
        QuadResult { value: raw + tail, tail, warning: false }
    }

    /// Pairing `<f|g> = integral of f g r dr` (angular factor dropped).
    pub fn pairing(&self, f: &[f64], g: &[f64]) -> f64 {
        assert_eq!(f.len(), self.len());
        assert_eq!(g.len(), self.len());
        let mut s = 0.0;
        for i in 0..f.len() {
            s += f[i] * g[i] * self.w_dr[i] * self.nodes[i];
        }
        s
    }

    /// `L^2(r dr)` norm of a sampled field.
    pub fn l2r_norm(&self, f: &[f64]) -> f64 {
        self.pairing(f, f).max(0.0).sqrt()
    }

    /// H seminorm `(integral of (f')^2 + k^2 f^2 / r^2 against r dr)^(1/2)`.
    /// Finite only for fields vanishing at both ends; the caller is
    /// responsible for the boundary classes.
    pub fn h_norm(&self, f: &[f64], k: u32) -> f64 {
        let df = self.diff(f, DiffOp::D1);
        let k2 = (k as f64) * (k as f64);
        let mut s = 0.0;
        for i in 0..f.len() {
            let r = self.nodes[i];
            s += (df[i] * df[i] + k2 * f[i] * f[i] / (r * r)) * self.w_dr[i] * r;
        }
        s.max(0.0).sqrt()
    }

    /// Apply a radial differential operator using 7-point stencils
    /// (one-sided near the ends); interior truncation error is O(h^5) for
    /// the first and O(h^4) for the second derivative.
    pub fn diff(&self, f: &[f64], op: DiffOp) -> Vec<f64> {
        assert_eq!(f.len(), self.len());
        let n = f.len();
        let mut out = vec![0.0; n];
        match op {
            DiffOp::D1 => {
                for i in 0..n {
                    out[i] = self.apply_stencil(&self.d1w[i], self.stencil_start[i], f);
                }
            }
            DiffOp::Lap2 | DiffOp::Lap4 => {
                let a = if matches!(op, DiffOp::Lap2) { 1.0 } else { 3.0 };
                for i in 0..n {
                    let d1 = self.apply_stencil(&self.d1w[i], self.stencil_start[i], f);
                    let d2 = self.apply_stencil(&self.d2w[i], self.stencil_start[i], f);
                    out[i] = d2 + a * d1 / self.nodes[i];
                }
            }
            DiffOp::Lam => {
                for i in 0..n {
                    out[i] = self.nodes[i]
                        * self.apply_stencil(&self.d1w[i], self.stencil_start[i], f);
                }
            }
            DiffOp::Lam0 => {
                for i in 0..n {
                    out[i] = f[i]
                        + self.nodes[i]
                            * self.apply_stencil(&self.d1w[i], self.stencil_start[i], f);
                }
            }
        }
        out
    }

    #[inline]
    fn apply_stencil(&self, w: &[f64; STENCIL], start: u32, f: &[f64]) -> f64 {
        let s = start as usize;
        let mut v = 0.0;
        for j in 0..STENCIL {
            v += w[j] * f[s + j];
        }
        v
    }

    /// First-derivative stencil for node `i`: the starting node index of
    /// its 7-point window and the weights. Lets quadratic forms in the
    /// derivative be assembled as banded matrices (bandwidth 6).
    pub fn d1_row(&self, i: usize) -> (usize, &[f64; STENCIL]) {
        (self.stencil_start[i] as usize, &self.d1w[i])
    }

    /// Polynomial interpolation of sampled data at one point using the 7
    /// nodes nearest `x` (exact for degree 6). Valid anywhere inside the
    /// grid extent, including the sliver between the outermost nodes and
    /// the edges; clamps outside the extent.
    pub fn interp(&self, f: &[f64], x: f64) -> f64 {
        assert_eq!(f.len(), self.len());
        let n = self.len();
        let x = x.clamp(self.edges[0], self.edges[self.cells()]);
        let i = self.nodes.partition_point(|&r| r < x);
        let s = i.saturating_sub(STENCIL / 2).min(n - STENCIL);
        let c = fd_weights(x, &self.nodes[s..s + STENCIL], 0);
        (0..STENCIL).map(|j| c[0][j] * f[s + j]).sum()
    }

    /// Resample `f(. / lambda)` (H-type) or `f(. / lambda) / lambda`
    /// (L^2-type) onto this grid with monotone cubic interpolation. Beyond
    /// the sampled range the field is continued by the power laws of a
    /// k-equivariant class field: `m pi + c r^k` on the left and
    /// `n pi + c r^-k` on the right, with the integer limits read off the
    /// boundary samples.
    pub fn rescale(&self, f: &[f64], k: u32, lambda: f64, kind: Rescale) -> Result<Vec<f64>> {
        assert_eq!(f.len(), self.len());
        if !(lambda > 0.0) || !lambda.is_finite() {
            return Err(WmError::Config(format!("rescale needs lambda > 0, got {lambda}")));
        }
        if self.r_min > 0.0 && lambda < 10.0 * self.r_min {
            return Err(WmError::Resolution(format!(
                "lambda = {lambda} presses features below the resolved radius {}",
                self.r_min
            )));
        }
        let n = self.len();
        let pi = std::f64::consts::PI;
        let lm = pi * (f[0] / pi).round();
        let rm = pi * (f[n - 1] / pi).round();
        let (r_lo, r_hi) = (self.nodes[0], self.nodes[n - 1]);
        let p = Pchip::new_accurate(&self.nodes, f);
        let kf = k as f64;
        let amp = if matches!(kind, Rescale::L2) { 1.0 / lambda } else { 1.0 };
        let mut out = Vec::with_capacity(n);
        for &r in &self.nodes {
            let x = r / lambda;
            let v = if x < r_lo {
                lm + (f[0] - lm) * (x / r_lo).powf(kf)
            } else if x > r_hi {
                rm + (f[n - 1] - rm) * (r_hi / x).powf(kf)
            } else {
                p.eval(x)
            };
            out.push(amp * v);
        }
        Ok(out)
    }

    /// Resample a field given on another grid onto this grid (monotone cubic
    /// in the overlap, class power laws outside it).
    pub fn transfer(&self, from: &RadialGrid, f: &[f64], k: u32) -> Vec<f64> {
        assert_eq!(f.len(), from.len());
        let n = from.len();
        let pi = std::f64::consts::PI;
        let lm = pi * (f[0] / pi).round();
        let rm = pi * (f[n - 1] / pi).round();
        let (r_lo, r_hi) = (from.nodes[0], from.nodes[n - 1]);
        let p = Pchip::new_accurate(&from.nodes, f);
        let kf = k as f64;
        self.nodes
            .iter()
            .map(|&x| {
                if x < r_lo {
                    lm + (f[0] - lm) * (x / r_lo).powf(kf)
                } else if x > r_hi {
                    rm + (f[n - 1] - rm) * (r_hi / x).powf(kf)
                } else {
                    p.eval(x)
                }
            })
            .collect()
    }

    /// Plain-text table `node weight`, one line per node, with a header
    /// naming the kind and parameters.
    pub fn to_text(&self) -> String {
        let mut s = format!(
            "# grid kind={} r_min={} r_switch={} r_max={} cells_inner={} cells_outer={}\n",
            self.kind.name(),
            fmt_g17(self.r_min),
            fmt_g17(self.r_switch),
            fmt_g17(self.r_max),
            self.cells_inner,
            self.cells_outer
        );
        for i in 0..self.len() {
            s.push_str(&fmt_g17(self.nodes[i]));
            s.push(' ');
            s.push_str(&fmt_g17(self.w_dr[i]));
            s.push('\n');
        }
        s
    }

    /// FNV-1a checksum of the serialized table; stable across runs.
    pub fn checksum(&self) -> u64 {
        fnv1a(self.to_text().as_bytes())
    }
}

fn check_cells(cells: usize) -> Result<()> {
    if cells * NODES_PER_CELL < STENCIL {
        return Err(WmError::Config(format!(
            "grid needs at least {} nodes for the differentiation stencils, got {} cells",
            STENCIL, cells
        )));
    }
    Ok(())
}

/// Construct a grid from the kind plus bounds; `counts` is
/// `(cells_inner, cells_outer)` for hybrid grids and `(cells, _)` otherwise.
pub fn make_grid(
    kind: GridKind,
    r_min: f64,
    r_switch: f64,
    r_max: f64,
    counts: (usize, usize),
) -> Result<RadialGrid> {
    let check_count = |c: usize| -> Result<()> {
        if c < 16 {
            Err(WmError::Config(format!("need at least 16 cells per segment, got {c}")))
        } else {
            Ok(())
        }
    };
    match kind {
        GridKind::Uniform => {
            check_count(counts.0)?;
            RadialGrid::uniform(r_min, r_max, counts.0)
        }
        GridKind::Geometric => {
            check_count(counts.0)?;
            RadialGrid::geometric(r_min, r_max, counts.0)
        }
        GridKind::Hybrid => {
            check_count(counts.0)?;
            check_count(counts.1)?;
            RadialGrid::hybrid(r_min, r_switch, r_max, counts.0, counts.1)
        }
    }
}

/// A state `(psi, psi_t)` sampled on a grid, with boundary classes
/// `psi(0) = m pi`, `psi(infinity) = n pi` read off the samples.
#[derive(Clone, Debug)]
pub struct FieldPair {
    pub grid: Arc<RadialGrid>,
    pub k: u32,
    pub psi: Vec<f64>,
    pub psit: Vec<f64>,
    pub left_class: i32,
    pub right_class: i32,
}

impl FieldPair {
    pub fn new(grid: Arc<RadialGrid>, k: u32, psi: Vec<f64>, psit: Vec<f64>) -> Result<Self> {
        if psi.len() != grid.len() || psit.len() != grid.len() {
            return Err(WmError::Config(format!(
                "field length {} / {} does not match grid length {}",
                psi.len(),
                psit.len(),
                grid.len()
            )));
        }
        if psi.iter().chain(psit.iter()).any(|v| !v.is_finite()) {
            return Err(WmError::Domain("field contains non-finite samples".into()));
        }
        let pi = std::f64::consts::PI;
        let n = psi.len();
        let lc = (psi[0] / pi).round();
        let lc2 = (psi[1] / pi).round();
        let rc = (psi[n - 1] / pi).round();
        let rc2 = (psi[n - 2] / pi).round();
        if lc != lc2 || rc != rc2 {
            return Err(WmError::Domain(
                "boundary class ambiguous: adjacent boundary samples round differently".into(),
            ));
        }
        Ok(FieldPair {
            grid,
            k,
            psi,
            psit,
            left_class: lc as i32,
            right_class: rc as i32,
        })
    }

    pub fn from_fn<F, G>(grid: Arc<RadialGrid>, k: u32, f: F, g: G) -> Result<Self>
    where
        F: Fn(f64) -> f64,
        G: Fn(f64) -> f64,
    {
        let psi = grid.sample(&f);
        let psit = grid.sample(&g);
        FieldPair::new(grid, k, psi, psit)
    }

    /// H norm of psi; defined only in the zero class at both ends.
    pub fn h_norm(&self) -> Result<f64> {
        if self.left_class != 0 || self.right_class != 0 {
            return Err(WmError::Domain(format!(
                "H norm undefined for boundary classes ({}, {})",
                self.left_class, self.right_class
            )));
        }
        Ok(self.grid.h_norm(&self.psi, self.k))
    }

    /// `L^2(r dr)` norm of psi_t.
    pub fn kinetic_l2(&self) -> f64 {
        self.grid.l2r_norm(&self.psit)
    }

    /// H x L^2 norm of the pair.
    pub fn pair_norm(&self) -> Result<f64> {
        let h = self.h_norm()?;
        let l = self.kinetic_l2();
        Ok((h * h + l * l).sqrt())
    }
}
