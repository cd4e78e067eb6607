//! Energy functionals and the two-bubble proximity: localized energy, the
//! G functional with its exact antiderivative, the Bogomolnyi splitting of
//! the static energy, energy-bisection scales, and the proximity fit
//! minimizing over the two bubble scales and the sign.

use std::f64::consts::PI;

use crate::error::{Result, WmError};
use crate::grid::{DiffOp, FieldPair, QuadResult, RadialGrid, Weight};
use crate::statics::BubbleFamily;
use crate::util::{fmt_g17, GAUSS4_W, GAUSS4_X};

/// Sign handling for [`bubble_distance`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FitMode {
    /// Minimize over both signs.
    Both,
    /// Fix iota = +1.
    Plus,
    /// Fix iota = -1.
    Minus,
}

/// Result of the two-bubble proximity minimization.
#[derive(Clone, Debug)]
pub struct BubbleFit {
    pub iota: i32,
    pub lambda: f64,
    pub mu: f64,
    /// Minimized objective: |(psi - iota (Q_lambda - Q_mu), psi_t)|^2 in
    /// H x L^2 plus (lambda/mu)^k.
    pub value: f64,
    /// Residual field psi - iota (Q_lambda - Q_mu) at the optimum.
    pub g: Vec<f64>,
    pub converged: bool,
    pub evaluations: u64,
}

impl BubbleFit {
    /// Flat one-line record.
    pub fn record(&self) -> String {
        format!(
            "iota={:+} lambda={} mu={} value={} converged={} evaluations={}",
            self.iota,
            fmt_g17(self.lambda),
            fmt_g17(self.mu),
            fmt_g17(self.value),
            self.converged,
            self.evaluations
        )
    }
}

/// Integral of `e(r) r dr` over `[a, b]` for sampled `e`, with partial
/// boundary cells handled by degree-6 interpolation onto 4-point Gauss
/// panels. `a`, `b` are clamped to the grid extent.
fn integral_r_dr(grid: &RadialGrid, e: &[f64], a: f64, b: f64) -> f64 {
    let edges = grid.edges();
    let nc = grid.cells();
    let a = a.max(edges[0]);
    let b = b.min(edges[nc]);
    if b <= a {
        return 0.0;
    }
    let ca = edges.partition_point(|&x| x <= a).saturating_sub(1).min(nc - 1);
    let cb = edges.partition_point(|&x| x < b).saturating_sub(1).min(nc - 1);
    let panel = |alpha: f64, beta: f64| -> f64 {
        let mid = 0.5 * (alpha + beta);
        let half = 0.5 * (beta - alpha);
        let mut s = 0.0;
        for j in 0..4 {
            let r = mid + half * GAUSS4_X[j];
            s += half * GAUSS4_W[j] * grid.interp(e, r) * r;
        }
        s
    };
    if ca == cb {
        return panel(a, b);
    }
    let nodes = grid.nodes();
    let w = grid.weights(Weight::RDr);
    let mut s = panel(a, edges[ca + 1]) + panel(edges[cb], b);
    for i in (ca + 1) * crate::grid::NODES_PER_CELL..cb * crate::grid::NODES_PER_CELL {
        s += e[i] * w[i];
    }
    let _ = nodes;
    s
}

fn energy_density(fp: &FieldPair, kinetic: bool) -> Vec<f64> {
    let g = &fp.grid;
    let dpsi = g.diff(&fp.psi, DiffOp::D1);
    let k2 = (fp.k as f64).powi(2);
    g.nodes()
        .iter()
        .enumerate()
        .map(|(i, &r)| {
            let s = fp.psi[i].sin();
            let kin = if kinetic { fp.psit[i] * fp.psit[i] } else { 0.0 };
            kin + dpsi[i] * dpsi[i] + k2 * s * s / (r * r)
        })
        .collect()
}

/// Localized energy `2 pi (1/2) integral over [a,b] of
/// (psi_t^2 + psi_r^2 + k^2 sin^2 psi / r^2) r dr`; `b` may be infinite,
/// in which case the tail beyond the grid is extrapolated.
pub fn energy(fp: &FieldPair, a: f64, b: f64) -> Result<QuadResult> {
    if !(a >= 0.0) || !(b > a) {
        return Err(WmError::Domain(format!("energy needs 0 <= a < b, got [{a}, {b}]")));
    }
    let e = energy_density(fp, true);
    let g = &fp.grid;
    if b.is_infinite() {
        let full = g.quad_tail(&e, Weight::RDr);
        let head = if a > 0.0 { integral_r_dr(g, &e, 0.0, a) } else { 0.0 };
        Ok(QuadResult {
            value: PI * (full.value - head),
            tail: PI * full.tail,
            warning: full.warning,
        })
    } else {
        Ok(QuadResult { value: PI * integral_r_dr(g, &e, a, b), tail: 0.0, warning: false })
    }
}

/// Exact antiderivative of |sin|: `F(x) = integral of |sin rho| on [0, x]`,
/// odd and increasing, `F(n pi) = 2n`.
fn abs_sin_integral(x: f64) -> f64 {
    let n = (x / PI).floor();
    2.0 * n + 1.0 - (x - PI * n).cos()
}

/// `G(psi(R)) = 2 pi k integral of |sin rho| from psi(0) to psi(R)`;
/// a lower bound for the static energy on [0, R]. `r_up` may be infinite.
pub fn gfun(fp: &FieldPair, r_up: f64) -> f64 {
    let lo = fp.left_class as f64 * PI;
    let hi = if r_up.is_infinite() {
        fp.right_class as f64 * PI
    } else {
        fp.grid.interp(&fp.psi, r_up)
    };
    2.0 * PI * fp.k as f64 * (abs_sin_integral(hi) - abs_sin_integral(lo))
}

/// Bogomolnyi defect `pi integral of (psi_r - k sin psi / r)^2 r dr >= 0`;
/// zero exactly on the bubble family. Together with the boundary term
/// `2 pi k integral of sin rho from psi(0) to psi(infinity)` it
/// reconstructs the static energy.
pub fn bogomolnyi_defect(fp: &FieldPair) -> f64 {
    let g = &fp.grid;
    let dpsi = g.diff(&fp.psi, DiffOp::D1);
    let kf = fp.k as f64;
    let d: Vec<f64> = g
        .nodes()
        .iter()
        .enumerate()
        .map(|(i, &r)| {
            let v = dpsi[i] - kf * fp.psi[i].sin() / r;
            v * v
        })
        .collect();
    PI * g.quad_tail(&d, Weight::RDr).value
}

/// Scales splitting the static energy in half: `lambda` with
/// `E_0^lambda = E(Q)/2` and `mu` with `E_mu^infinity = E(Q)/2`.
/// Defined when the static energy is at least `E(Q) = 4 pi k`.
pub fn bisection_scales(fp: &FieldPair) -> Result<(f64, f64)> {
    let g = &fp.grid;
    let e = energy_density(fp, false);
    let total = PI * g.quad_tail(&e, Weight::RDr).value;
    let eq = 4.0 * PI * fp.k as f64;
    if total < eq * (1.0 - 1e-6) {
        return Err(WmError::Domain(format!(
            "bisection scales undefined: static energy {total:.6} below E(Q) = {eq:.6}"
        )));
    }
    let cum = |r: f64| PI * integral_r_dr(g, &e, 0.0, r);
    let grid_total = PI * integral_r_dr(g, &e, 0.0, g.r_max);
    let solve = |target: f64| -> Result<f64> {
        if target > grid_total {
            return Err(WmError::Domain(
                "bisection scale lies beyond the grid extent".into(),
            ));
        }
        let lo = g.nodes()[0].ln();
        let hi = g.r_max.ln();
        let x = crate::util::bisect(|x| cum(x.exp()) - target, lo, hi, 1e-12, 200);
        Ok(x.exp())
    };
    let lambda = solve(eq / 2.0)?;
    let mu = solve(total - eq / 2.0)?;
    Ok((lambda, mu))
}

struct Objective<'a> {
    grid: &'a RadialGrid,
    fam: BubbleFamily,
    psi: &'a [f64],
    dpsi: Vec<f64>,
    kin2: f64,
    lo: f64,
    hi: f64,
    evals: std::cell::Cell<u64>,
}

impl<'a> Objective<'a> {
    fn new(fp: &'a FieldPair) -> Self {
        let g = &fp.grid;
        Objective {
            grid: g,
            fam: BubbleFamily { k: fp.k },
            psi: &fp.psi,
            dpsi: g.diff(&fp.psi, DiffOp::D1),
            kin2: {
                let n = g.l2r_norm(&fp.psit);
                n * n
            },
            lo: (10.0 * g.nodes()[0]).ln(),
            hi: (g.r_max / 10.0).ln(),
            evals: std::cell::Cell::new(0),
        }
    }

    /// Objective at (iota, ln lambda, ln mu); infinite outside the box of
    /// scales the grid can represent.
    fn eval(&self, iota: f64, x: [f64; 2]) -> f64 {
        if x[0] < self.lo || x[0] > self.hi || x[1] < self.lo || x[1] > self.hi {
            return f64::INFINITY;
        }
        self.evals.set(self.evals.get() + 1);
        let (lambda, mu) = (x[0].exp(), x[1].exp());
        let k2 = (self.fam.k as f64).powi(2);
        let mut acc = 0.0;
        let nodes = self.grid.nodes();
        let w = self.grid.weights(Weight::RDr);
        for i in 0..nodes.len() {
            let r = nodes[i];
            let tq = self.fam.q(r / lambda) - self.fam.q(r / mu);
            let dt = self.fam.dq(r / lambda) / lambda - self.fam.dq(r / mu) / mu;
            let gv = self.psi[i] - iota * tq;
            let gd = self.dpsi[i] - iota * dt;
            acc += (gd * gd + k2 * gv * gv / (r * r)) * w[i];
        }
        acc + self.kin2 + (lambda / mu).powi(self.fam.k as i32)
    }
}

/// Nelder-Mead on the plane; returns (x, f, converged).
fn nelder_mead<F: Fn([f64; 2]) -> f64>(
    f: F,
    x0: [f64; 2],
    step: f64,
    max_eval: usize,
) -> ([f64; 2], f64, bool) {
    let mut pts = [x0, [x0[0] + step, x0[1]], [x0[0], x0[1] + step]];
    let mut vals = [f(pts[0]), f(pts[1]), f(pts[2])];
    let mut evals = 3usize;
    let mut converged = false;
    while evals < max_eval {
        let mut idx = [0usize, 1, 2];
        idx.sort_by(|&a, &b| vals[a].partial_cmp(&vals[b]).unwrap());
        let (b, m, w) = (idx[0], idx[1], idx[2]);
        let diam = |a: [f64; 2], c: [f64; 2]| ((a[0] - c[0]).powi(2) + (a[1] - c[1]).powi(2)).sqrt();
        let d = diam(pts[b], pts[w]).max(diam(pts[b], pts[m]));
        if vals[w] - vals[b] < 1e-10 && d < 1e-6 {
            converged = true;
            break;
        }
        let cen = [0.5 * (pts[b][0] + pts[m][0]), 0.5 * (pts[b][1] + pts[m][1])];
        let refl = [2.0 * cen[0] - pts[w][0], 2.0 * cen[1] - pts[w][1]];
        let fr = f(refl);
        evals += 1;
        if fr < vals[b] {
            let exp = [cen[0] + 2.0 * (refl[0] - cen[0]), cen[1] + 2.0 * (refl[1] - cen[1])];
            let fe = f(exp);
            evals += 1;
            if fe < fr {
                pts[w] = exp;
                vals[w] = fe;
            } else {
                pts[w] = refl;
                vals[w] = fr;
            }
        } else if fr < vals[m] {
            pts[w] = refl;
            vals[w] = fr;
        } else {
            let con = if fr < vals[w] {
                [cen[0] + 0.5 * (refl[0] - cen[0]), cen[1] + 0.5 * (refl[1] - cen[1])]
            } else {
                [cen[0] + 0.5 * (pts[w][0] - cen[0]), cen[1] + 0.5 * (pts[w][1] - cen[1])]
            };
            let fc = f(con);
            evals += 1;
            if fc < vals[w].min(fr) {
                pts[w] = con;
                vals[w] = fc;
            } else {
                for i in [m, w] {
                    pts[i] = [
                        pts[b][0] + 0.5 * (pts[i][0] - pts[b][0]),
                        pts[b][1] + 0.5 * (pts[i][1] - pts[b][1]),
                    ];
                    vals[i] = f(pts[i]);
                    evals += 1;
                }
            }
        }
    }
    let mut bi = 0;
    for i in 1..3 {
        if vals[i] < vals[bi] {
            bi = i;
        }
    }
    (pts[bi], vals[bi], converged)
}

/// Coarse scan of the objective over a log-scale window (`lambda <= mu`
/// only); returns the best (ln lambda, ln mu).
fn coarse_scan(obj: &Objective, iota: f64, n: usize) -> ([f64; 2], f64) {
    let mut best = ([0.0, 0.0], f64::INFINITY);
    for i in 0..n {
        let x0 = obj.lo + (obj.hi - obj.lo) * i as f64 / (n - 1) as f64;
        for j in i..n {
            let x1 = obj.lo + (obj.hi - obj.lo) * j as f64 / (n - 1) as f64;
            let v = obj.eval(iota, [x0, x1]);
            if v < best.1 {
                best = ([x0, x1], v);
            }
        }
    }
    best
}

/// Two-bubble proximity: multistart simplex minimization of
/// `|(psi - iota (Q_lambda - Q_mu), psi_t)|^2_(H x L^2) + (lambda/mu)^k`
/// over the scales, per sign. Fields with very large norm short-circuit to
/// the energy-bisection seed (the fit cannot fall below order one there).
pub fn bubble_distance(fp: &FieldPair, mode: FitMode) -> Result<BubbleFit> {
    if fp.left_class != 0 || fp.right_class != 0 {
        return Err(WmError::Domain(format!(
            "proximity defined in the zero class; got ({}, {})",
            fp.left_class, fp.right_class
        )));
    }
    let obj = Objective::new(fp);
    let signs: &[f64] = match mode {
        FitMode::Both => &[1.0, -1.0],
        FitMode::Plus => &[1.0],
        FitMode::Minus => &[-1.0],
    };
    let bis = bisection_scales(fp).ok();

    if fp.pair_norm()? > 100.0 {
        let (l, m) = bis.unwrap_or((fp.grid.r_max / 100.0, fp.grid.r_max / 10.0));
        let mut best: Option<BubbleFit> = None;
        for &iota in signs {
            let v = obj.eval(iota, [l.ln(), m.ln()]);
            if best.as_ref().map_or(true, |b| v < b.value) {
                best = Some(make_fit(fp, iota, l, m, v, false, obj.evals.get()));
            }
        }
        return Ok(best.unwrap());
    }

    let mut best: Option<BubbleFit> = None;
    for &iota in signs {
        let (scan_x, _) = coarse_scan(&obj, iota, 28);
        let mut starts = vec![
            scan_x,
            [scan_x[0] + 0.25, scan_x[1] - 0.25],
            [scan_x[0] - 0.25, scan_x[1] + 0.25],
        ];
        if let Some((l, m)) = bis {
            starts.push([l.ln(), m.ln()]);
            starts.push([(0.7 * l).ln(), (1.4 * m).ln()]);
        }
        let mut sign_best: Option<([f64; 2], f64, bool)> = None;
        for s in starts {
            let (x, v, conv) = nelder_mead(|x| obj.eval(iota, x), s, 0.15, 400);
            if sign_best.as_ref().map_or(true, |b| v < b.1) {
                sign_best = Some((x, v, conv));
            }
        }
        let (x, v, conv) = sign_best.unwrap();
        if best.as_ref().map_or(true, |b| v < b.value) {
            best = Some(make_fit(fp, iota, x[0].exp(), x[1].exp(), v, conv, obj.evals.get()));
        }
    }
    let mut fit = best.unwrap();
    fit.evaluations = obj.evals.get();
    Ok(fit)
}

fn make_fit(
    fp: &FieldPair,
    iota: f64,
    lambda: f64,
    mu: f64,
    value: f64,
    converged: bool,
    evaluations: u64,
) -> BubbleFit {
    let fam = BubbleFamily { k: fp.k };
    let g: Vec<f64> = fp
        .grid
        .nodes()
        .iter()
        .enumerate()
        .map(|(i, &r)| fp.psi[i] - iota * (fam.q(r / lambda) - fam.q(r / mu)))
        .collect();
    BubbleFit { iota: iota as i32, lambda, mu, value, g, converged, evaluations }
}

/// Brute-force oracle for the proximity: scan an `n x n` log-grid in
/// (lambda, mu), then refine the window around the argmin `refine` times.
/// Returns (lambda, mu, value).
pub fn grid_scan_distance(fp: &FieldPair, iota: f64, n: usize, refine: usize) -> (f64, f64, f64) {
    let obj = Objective::new(fp);
    let (mut lo0, mut hi0) = (obj.lo, obj.hi);
    let (mut lo1, mut hi1) = (obj.lo, obj.hi);
    let mut best = ([0.0, 0.0], f64::INFINITY);
    for pass in 0..=refine {
        best = ([0.0, 0.0], f64::INFINITY);
        for i in 0..n {
            let x0 = lo0 + (hi0 - lo0) * i as f64 / (n - 1) as f64;
            for j in 0..n {
                let x1 = lo1 + (hi1 - lo1) * j as f64 / (n - 1) as f64;
                if pass == 0 && x0 > x1 {
                    continue;
                }
                let v = obj.eval(iota, [x0, x1]);
                if v < best.1 {
                    best = ([x0, x1], v);
                }
            }
        }
        let h0 = 2.0 * (hi0 - lo0) / (n - 1) as f64;
        let h1 = 2.0 * (hi1 - lo1) / (n - 1) as f64;
        lo0 = best.0[0] - h0;
        hi0 = best.0[0] + h0;
        lo1 = best.0[1] - h1;
        hi1 = best.0[1] + h1;
    }
    (best.0[0].exp(), best.0[1].exp(), best.1)
}
