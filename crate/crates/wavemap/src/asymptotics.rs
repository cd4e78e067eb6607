//! Interaction integrals of the bubble family against closed forms, and the
//! reduced two-scale system that reproduces the concentration rates.
//!
//! The interaction side evaluates the pairings that drive the modulation
//! equations (the `16 k sigma^k` attraction integral, the `8 k^2 lambda^{k-1}`
//! force pairing, and the logarithmic cross term) by quadrature on the hybrid
//! grid and compares them with their leading-order closed forms.
//!
//! The reduced system evolves `(zeta, b)` with the outer scale frozen:
//!
//! ```text
//!   zeta' = b / kappa,      b' = 8 k^2 zeta^{k-1} / mu0^k,
//! ```
//!
//! which is Hamiltonian with mass `kappa` and potential `-8 k zeta^k / mu0^k`.
//! Trajectories of interest ride the zero-energy separatrix for several
//! decades in `zeta`; a generic adaptive Runge-Kutta scheme drifts off that
//! branch (its secular energy error grows relative to the collapsing scale
//! `zeta^k`), so the integrator below is a 6th-order symplectic composition
//! of implicit midpoint steps in the reparametrized time `dt = g(zeta) dtau`,
//! `g = zeta^{1 - k/2}`. The conserved modified Hamiltonian keeps the branch
//! clean at any depth, and the time reparametrization makes fixed `dtau`
//! steps track the power-law stretching of `t`. Step size is chosen by global
//! halving until two refinements agree.

use std::sync::{Arc, OnceLock};

use crate::error::{Result, WmError};
use crate::grid::{RadialGrid, Weight};
use crate::statics::BubbleFamily;
use crate::util::{fmt_g17, line_fit};

/// Header of the interaction summary table.
pub const INTERACTION_CSV_HEADER: &str = "k,quantity,computed,predicted,rel_dev";
/// Header of the reduced-system time series.
pub const ODE_CSV_HEADER: &str = "t,zeta,b,mu,xi";
/// The reduced system is only meaningful while the scales stay separated;
/// integration halts when `zeta` reaches this value.
pub const ZETA_EXIT: f64 = 0.5;

/// `zeta` below this is treated as a collapse of the inner scale; the
/// trajectory has left the model's domain and integration halts.
const ZETA_FLOOR: f64 = 1e-10;
/// Relative agreement required between two step-size refinements.
const CTRL_TOL: f64 = 1e-10;

fn report_grid() -> &'static Arc<RadialGrid> {
    static GRID: OnceLock<Arc<RadialGrid>> = OnceLock::new();
    GRID.get_or_init(|| {
        Arc::new(RadialGrid::hybrid(1e-6, 1.0, 60.0, 300, 1200).expect("static grid layout"))
    })
}

/// Quadrature with tail extrapolation; refuses values whose tail estimate is
/// not power-like and not negligible.
fn checked_quad(grid: &RadialGrid, f: &[f64], w: Weight, label: &str) -> Result<f64> {
    let q = grid.quad_tail(f, w);
    if q.warning && q.tail.abs() > 1e-12 * q.value.abs().max(1e-300) {
        return Err(WmError::Accuracy(format!(
            "quadrature tail for {label} is not power-like: bound {:e} against value {:e}",
            q.tail, q.value
        )));
    }
    Ok(q.value)
}

/// One comparison row: a computed integral against its closed-form target.
#[derive(Clone, Debug)]
pub struct ReportRow {
    pub quantity: String,
    pub computed: f64,
    pub predicted: f64,
    /// `(computed - predicted) / predicted`; for the cross term, where the
    /// prediction is only an order of magnitude, this column carries the
    /// ratio `computed / predicted` instead.
    pub rel_dev: f64,
}

/// Interaction integrals at one scale ratio `sigma = lambda / mu`, each next
/// to its closed-form value.
#[derive(Clone, Debug)]
pub struct InteractionReport {
    pub k: u32,
    pub sigma: f64,
    /// `||LamQ||^2_{L^2(r dr)}` against `2 pi / sin(pi/k)`.
    pub kappa: f64,
    pub kappa_closed: f64,
    /// `int (LamQ)^3 r^{k-1} dr` and `int (LamQ)^3 r^{-k-1} dr`, both `2k^2`.
    pub moment_plus: f64,
    pub moment_minus: f64,
    pub moment_closed: f64,
    /// `(4/k^2) int LamQ(r/sigma) (LamQ)^3 dr/r` against `16 k sigma^k`.
    pub lead_integral: f64,
    pub lead_integral_closed: f64,
    /// Pairing of `LamQ_lambda / lambda` with the nonlinear interaction
    /// remainder, against `8 k^2 sigma^{k-1}` (outer scale 1).
    pub lead_pairing: f64,
    pub lead_pairing_closed: f64,
    /// `int LamQ(r/sigma) LamQ dr/r`, bounded by a multiple of
    /// `sigma^k |log sigma|`.
    pub cross_term: f64,
    pub cross_scale: f64,
}

impl InteractionReport {
    /// Rows in a fixed order for the summary table.
    pub fn rows(&self) -> Vec<ReportRow> {
        let rel = |c: f64, p: f64| (c - p) / p;
        let s = self.sigma;
        vec![
            ReportRow {
                quantity: "kappa".into(),
                computed: self.kappa,
                predicted: self.kappa_closed,
                rel_dev: rel(self.kappa, self.kappa_closed),
            },
            ReportRow {
                quantity: "cubic_moment_plus".into(),
                computed: self.moment_plus,
                predicted: self.moment_closed,
                rel_dev: rel(self.moment_plus, self.moment_closed),
            },
            ReportRow {
                quantity: "cubic_moment_minus".into(),
                computed: self.moment_minus,
                predicted: self.moment_closed,
                rel_dev: rel(self.moment_minus, self.moment_closed),
            },
            ReportRow {
                quantity: format!("lead_integral(sigma={s})"),
                computed: self.lead_integral,
                predicted: self.lead_integral_closed,
                rel_dev: rel(self.lead_integral, self.lead_integral_closed),
            },
            ReportRow {
                quantity: format!("lead_pairing(sigma={s})"),
                computed: self.lead_pairing,
                predicted: self.lead_pairing_closed,
                rel_dev: rel(self.lead_pairing, self.lead_pairing_closed),
            },
            ReportRow {
                quantity: format!("cross_term(sigma={s})"),
                computed: self.cross_term,
                predicted: self.cross_scale,
                rel_dev: self.cross_term / self.cross_scale,
            },
        ]
    }

    /// Summary table for this report alone.
    pub fn csv(&self) -> String {
        let mut out = String::from(INTERACTION_CSV_HEADER);
        out.push('\n');
        for row in self.rows() {
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                self.k,
                row.quantity,
                fmt_g17(row.computed),
                fmt_g17(row.predicted),
                fmt_g17(row.rel_dev)
            ));
        }
        out
    }
}

/// Evaluates the interaction integrals at scale ratio `sigma` (inner scale
/// `sigma`, outer scale 1) by quadrature on the hybrid analysis grid.
pub fn interaction_report(k: u32, sigma: f64) -> Result<InteractionReport> {
    if !sigma.is_finite() {
        return Err(WmError::Config(format!("scale ratio must be finite, got {sigma}")));
    }
    if !(1e-4..=0.2).contains(&sigma) {
        return Err(WmError::Domain(format!(
            "scale ratio sigma={sigma} is outside the resolved window [1e-4, 0.2]"
        )));
    }
    if k > 12 {
        return Err(WmError::Config(format!(
            "equivariance degree {k} exceeds the supported range (quadrature underflow)"
        )));
    }
    let fam = BubbleFamily::new(k)?;
    let grid = report_grid();
    let kf = k as f64;
    let nodes = grid.nodes();
    let n = nodes.len();

    let mut f_kappa = vec![0.0; n];
    let mut f_plus = vec![0.0; n];
    let mut f_minus = vec![0.0; n];
    let mut f_lead = vec![0.0; n];
    let mut f_pair = vec![0.0; n];
    let mut f_cross = vec![0.0; n];
    for (i, &r) in nodes.iter().enumerate() {
        let lq = fam.lam_q(r);
        let lqs = fam.lam_q(r / sigma);
        f_kappa[i] = lq * lq;
        f_plus[i] = lq * lq * lq * r.powi(k as i32 - 1);
        f_minus[i] = lq * lq * lq * r.powi(-(k as i32) - 1);
        f_lead[i] = lqs * lq * lq * lq;
        // Nonlinearity increment f(Q_l - Q_m) - f(Q_l) + f(Q_m) with
        // f = (k^2/2) sin(2 psi) collapses to
        // sin(2 Q_m) (LamQ_l)^2 - sin(2 Q_l) (LamQ_m)^2.
        let sin2_inner = 2.0 * fam.sin_q(r / sigma) * fam.cos_q(r / sigma);
        let sin2_outer = 2.0 * fam.sin_q(r) * fam.cos_q(r);
        f_pair[i] = (lqs / sigma) * (sin2_outer * lqs * lqs - sin2_inner * lq * lq);
        f_cross[i] = lqs * lq;
    }

    let kappa = checked_quad(grid, &f_kappa, Weight::RDr, "kappa")?;
    let moment_plus = checked_quad(grid, &f_plus, Weight::Dr, "cubic_moment_plus")?;
    let moment_minus = checked_quad(grid, &f_minus, Weight::Dr, "cubic_moment_minus")?;
    let lead_integral =
        4.0 / (kf * kf) * checked_quad(grid, &f_lead, Weight::DrOverR, "lead_integral")?;
    let lead_pairing = checked_quad(grid, &f_pair, Weight::DrOverR, "lead_pairing")?;
    let cross_term = checked_quad(grid, &f_cross, Weight::DrOverR, "cross_term")?;

    Ok(InteractionReport {
        k,
        sigma,
        kappa,
        kappa_closed: fam.kappa(),
        moment_plus,
        moment_minus,
        moment_closed: 2.0 * kf * kf,
        lead_integral,
        lead_integral_closed: 16.0 * kf * sigma.powi(k as i32),
        lead_pairing,
        lead_pairing_closed: 8.0 * kf * kf * sigma.powi(k as i32 - 1),
        cross_term,
        cross_scale: sigma.powi(k as i32) * sigma.ln().abs(),
    })
}

/// Summary table over a ladder of reports; scale-independent rows are kept
/// only for the first report of each `k`.
pub fn interaction_summary_csv(reports: &[InteractionReport]) -> String {
    let mut out = String::from(INTERACTION_CSV_HEADER);
    out.push('\n');
    let mut seen: Vec<u32> = Vec::new();
    for rep in reports {
        let first = !seen.contains(&rep.k);
        if first {
            seen.push(rep.k);
        }
        for row in rep.rows() {
            if !first && !row.quantity.contains("sigma=") {
                continue;
            }
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                rep.k,
                row.quantity,
                fmt_g17(row.computed),
                fmt_g17(row.predicted),
                fmt_g17(row.rel_dev)
            ));
        }
    }
    out
}

/// `kappa_1 = sqrt(k kappa / 2^{k-1})`, the coefficient tying the momentum
/// scale to `zeta^{k/2}` in the ejection functional `xi`.
pub fn kappa1(k: u32) -> Result<f64> {
    let fam = BubbleFamily::new(k)?;
    Ok((k as f64 * fam.kappa() / 2f64.powi(k as i32 - 1)).sqrt())
}

/// State of the reduced two-scale system. `mu` is the frozen outer scale;
/// `xi = b + kappa_1 zeta^{k/2}` is recomputed at every stored step.
#[derive(Clone, Copy, Debug)]
pub struct OdeState {
    pub zeta: f64,
    pub b: f64,
    pub mu: f64,
    pub xi: f64,
}

impl OdeState {
    pub fn new(k: u32, zeta: f64, b: f64, mu: f64) -> Result<Self> {
        if !(zeta.is_finite() && b.is_finite() && mu.is_finite()) {
            return Err(WmError::Config(format!(
                "reduced-system state must be finite, got zeta={zeta}, b={b}, mu={mu}"
            )));
        }
        if zeta <= 0.0 {
            return Err(WmError::Domain(format!("inner scale must be positive, got zeta={zeta}")));
        }
        if mu <= 0.0 {
            return Err(WmError::Config(format!("outer scale must be positive, got mu={mu}")));
        }
        let xi = b + kappa1(k)? * zeta.powf(k as f64 / 2.0);
        Ok(OdeState { zeta, b, mu, xi })
    }
}

/// Which way to run the reduced system from the initial state.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TimeDirection {
    Forward,
    Backward,
}

/// Why integration stopped.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OdeHalt {
    /// `|t|` reached the requested horizon.
    Horizon,
    /// `zeta` reached `ZETA_EXIT`: the scales are no longer separated.
    RegimeExit,
    /// `zeta` fell to the floor: the inner scale collapsed in finite time.
    Collapse,
}

/// Time series of the reduced system.
#[derive(Clone, Debug)]
pub struct OdeSeries {
    pub k: u32,
    pub direction: TimeDirection,
    pub times: Vec<f64>,
    pub states: Vec<OdeState>,
    pub halt: OdeHalt,
}

impl OdeSeries {
    pub fn zetas(&self) -> Vec<f64> {
        self.states.iter().map(|s| s.zeta).collect()
    }

    pub fn xis(&self) -> Vec<f64> {
        self.states.iter().map(|s| s.xi).collect()
    }

    pub fn csv(&self) -> String {
        let mut out = String::from(ODE_CSV_HEADER);
        out.push('\n');
        for (t, s) in self.times.iter().zip(&self.states) {
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                fmt_g17(*t),
                fmt_g17(s.zeta),
                fmt_g17(s.b),
                fmt_g17(s.mu),
                fmt_g17(s.xi)
            ));
        }
        out
    }
}

struct OdeParams {
    k: i32,
    kappa: f64,
    mu_pow: f64,
    h0: f64,
    g_exp: f64,
}

impl OdeParams {
    /// Time reparametrization factor `g(zeta) = zeta^{1 - k/2}`.
    fn g(&self, zeta: f64) -> f64 {
        zeta.powf(self.g_exp)
    }

    /// Conserved energy of the untransformed system.
    fn energy(&self, zeta: f64, b: f64) -> f64 {
        b * b / (2.0 * self.kappa) - 8.0 * self.k as f64 * zeta.powi(self.k) / self.mu_pow
    }

    /// Right side in fictive time for the transformed Hamiltonian
    /// `g(zeta) (H - H0)`; on the level set `H = H0` this is the original
    /// flow with `dt = g dtau`.
    fn rhs(&self, zeta: f64, b: f64) -> (f64, f64) {
        let g = self.g(zeta);
        let force = 8.0 * (self.k * self.k) as f64 * zeta.powi(self.k - 1) / self.mu_pow;
        let dg = self.g_exp * zeta.powf(self.g_exp - 1.0);
        let dzeta = g * b / self.kappa;
        let db = g * force - dg * (self.energy(zeta, b) - self.h0);
        (dzeta, db)
    }
}

/// One implicit-midpoint step of size `h` in fictive time. Returns the new
/// `(zeta, b)` and the physical-time increment, or `None` if the step left
/// the domain or the fixed point failed to settle.
fn midpoint_step(p: &OdeParams, zeta: f64, b: f64, h: f64) -> Option<(f64, f64, f64)> {
    let (f0, g0) = p.rhs(zeta, b);
    let mut zn = zeta + h * f0;
    let mut bn = b + h * g0;
    let sz = zeta.abs().max(ZETA_FLOOR);
    let sb = b.abs().max(1e-3 * sz).max(1e-300);
    for _ in 0..200 {
        let zm = 0.5 * (zeta + zn);
        let bm = 0.5 * (b + bn);
        if !(zm > 0.0 && zm.is_finite() && bm.is_finite()) {
            return None;
        }
        let (fz, fb) = p.rhs(zm, bm);
        let z_next = zeta + h * fz;
        let b_next = b + h * fb;
        let delta = ((z_next - zn) / sz).abs().max(((b_next - bn) / sb).abs());
        zn = z_next;
        bn = b_next;
        if delta <= 1e-15 {
            let zm = 0.5 * (zeta + zn);
            if !(zm > 0.0 && zn.is_finite() && bn.is_finite()) {
                return None;
            }
            return Some((zn, bn, h * p.g(zm)));
        }
    }
    None
}

/// Yoshida 6th-order composition weights (solution A).
const W1: f64 = -1.17767998417887100695;
const W2: f64 = 0.23557321335935813368;
const W3: f64 = 0.78451361047755726382;

/// One composed step of size `h`: seven midpoint substeps.
fn yoshida_step(p: &OdeParams, zeta: f64, b: f64, h: f64) -> Option<(f64, f64, f64)> {
    let w0 = 1.0 - 2.0 * (W1 + W2 + W3);
    let mut z = zeta;
    let mut bb = b;
    let mut dt = 0.0;
    for w in [W3, W2, W1, w0, W1, W2, W3] {
        let (zn, bn, dti) = midpoint_step(p, z, bb, w * h)?;
        z = zn;
        bb = bn;
        dt += dti;
    }
    Some((z, bb, dt))
}

struct FixedRun {
    times: Vec<f64>,
    zetas: Vec<f64>,
    bs: Vec<f64>,
    halt: OdeHalt,
}

enum RunFail {
    Stiff { t: f64, zeta: f64, b: f64 },
}

/// Integrates with fixed fictive step `dtau` (sign carries the direction)
/// until the horizon in `|t|`, regime exit, or collapse. Boundary crossings
/// are landed by bisecting the final step.
fn integrate_fixed(
    p: &OdeParams,
    start: (f64, f64),
    horizon: f64,
    dtau: f64,
) -> std::result::Result<FixedRun, RunFail> {
    let mut times = vec![0.0];
    let mut zetas = vec![start.0];
    let mut bs = vec![start.1];
    let mut t = 0.0_f64;
    let (mut zeta, mut b) = start;

    // Lands the boundary `target(state) = 0` crossed during the last step by
    // shrinking the step factor; the composed map is deterministic in `h`.
    let land = |p: &OdeParams,
                zeta: f64,
                b: f64,
                t: f64,
                h: f64,
                crossed: &dyn Fn(f64, f64, f64) -> bool|
     -> Option<(f64, f64, f64)> {
        let (mut lo, mut hi) = (0.0_f64, 1.0_f64);
        for _ in 0..80 {
            let mid = 0.5 * (lo + hi);
            match yoshida_step(p, zeta, b, mid * h) {
                Some((zn, bn, dt)) => {
                    if crossed(zn, bn, t + dt) {
                        hi = mid;
                    } else {
                        lo = mid;
                    }
                }
                None => hi = mid,
            }
        }
        yoshida_step(p, zeta, b, hi * h)
    };

    let mut steps = 0usize;
    loop {
        steps += 1;
        if steps > 4_000_000 {
            return Err(RunFail::Stiff { t, zeta, b });
        }
        let mut h = dtau;
        let mut attempt = yoshida_step(p, zeta, b, h);
        // A failed step near the collapse floor is resolved by local halving;
        // persistent failure away from the floor is genuine stiffness.
        let mut halvings = 0;
        while attempt.is_none() {
            halvings += 1;
            if halvings > 60 {
                return Err(RunFail::Stiff { t, zeta, b });
            }
            h *= 0.5;
            attempt = yoshida_step(p, zeta, b, h);
        }
        let (zn, bn, dt) = attempt.expect("step accepted");

        if zn <= ZETA_FLOOR {
            if let Some((zl, bl, dtl)) =
                land(p, zeta, b, t, h, &|z, _, _| z <= ZETA_FLOOR * 1.0000001)
            {
                t += dtl;
                times.push(t);
                zetas.push(zl);
                bs.push(bl);
            }
            return Ok(FixedRun { times, zetas, bs, halt: OdeHalt::Collapse });
        }
        if zn >= ZETA_EXIT {
            let (zl, bl, dtl) = land(p, zeta, b, t, h, &|z, _, _| z >= ZETA_EXIT)
                .ok_or(RunFail::Stiff { t, zeta, b })?;
            t += dtl;
            times.push(t);
            zetas.push(zl);
            bs.push(bl);
            return Ok(FixedRun { times, zetas, bs, halt: OdeHalt::RegimeExit });
        }
        if (t + dt).abs() >= horizon {
            let (zl, bl, dtl) = land(p, zeta, b, t, h, &|_, _, tt| tt.abs() >= horizon)
                .ok_or(RunFail::Stiff { t, zeta, b })?;
            t += dtl;
            times.push(t);
            zetas.push(zl);
            bs.push(bl);
            return Ok(FixedRun { times, zetas, bs, halt: OdeHalt::Horizon });
        }

        zeta = zn;
        b = bn;
        t += dt;
        times.push(t);
        zetas.push(zeta);
        bs.push(b);
    }
}

/// Integrates the reduced system from `start` until `|t|` reaches `horizon`,
/// the inner scale reaches `ZETA_EXIT`, or it collapses. The step size is
/// halved globally until two refinements agree to `CTRL_TOL`.
pub fn ode_integrate(
    k: u32,
    start: OdeState,
    horizon: f64,
    direction: TimeDirection,
) -> Result<OdeSeries> {
    let fam = BubbleFamily::new(k)?;
    if k > 12 {
        return Err(WmError::Config(format!(
            "equivariance degree {k} exceeds the supported range"
        )));
    }
    let st = OdeState::new(k, start.zeta, start.b, start.mu)?;
    if !(horizon.is_finite() && horizon > 0.0) {
        return Err(WmError::Domain(format!("horizon must be positive and finite, got {horizon}")));
    }
    if !(st.zeta < 0.2) {
        return Err(WmError::Domain(format!(
            "initial scale zeta={} is outside the modulation window (0, 0.2)",
            st.zeta
        )));
    }
    let k1 = kappa1(k)?;
    let bcap = 10.0 * k1 * st.zeta.powf(k as f64 / 2.0);
    if st.b.abs() > bcap {
        return Err(WmError::Domain(format!(
            "initial momentum b={} exceeds the admissible window |b| <= {}",
            st.b,
            fmt_g17(bcap)
        )));
    }

    let p = OdeParams {
        k: k as i32,
        kappa: fam.kappa(),
        mu_pow: st.mu.powi(k as i32),
        h0: 0.0,
        g_exp: 1.0 - k as f64 / 2.0,
    };
    let p = OdeParams { h0: p.energy(st.zeta, st.b), ..p };
    let sign = match direction {
        TimeDirection::Forward => 1.0,
        TimeDirection::Backward => -1.0,
    };

    let mut dtau = 0.02_f64;
    let mut prev: Option<FixedRun> = None;
    for _ in 0..=14 {
        let run = match integrate_fixed(&p, (st.zeta, st.b), horizon, sign * dtau) {
            Ok(r) => r,
            Err(RunFail::Stiff { t, zeta, b }) => {
                if dtau > 1e-6 {
                    dtau *= 0.5;
                    prev = None;
                    continue;
                }
                return Err(WmError::Numerical(format!(
                    "reduced system stalled at t={}: zeta={}, b={}; step size underflow",
                    fmt_g17(t),
                    fmt_g17(zeta),
                    fmt_g17(b)
                )));
            }
        };
        if let Some(coarse) = prev {
            if coarse.halt == run.halt {
                // Deep concentration runs are ill conditioned pointwise: a
                // machine-level energy perturbation grows like (zeta0/zeta)^k,
                // and no step size reduces it. Agreement is therefore required
                // only up to that conditioning floor at each compare point.
                let mut excess = 0.0_f64;
                for (ci, fi) in [
                    (coarse.times.len() / 2, ((coarse.times.len() / 2) * 2).min(run.times.len() - 1)),
                    (coarse.times.len() - 1, run.times.len() - 1),
                ] {
                    let amp = (st.zeta / run.zetas[fi]).powi(k as i32).max(1.0);
                    let floor = 40.0 * f64::EPSILON * (fi.max(1) as f64).sqrt() * amp;
                    let allowed = CTRL_TOL.max(floor);
                    let dz = (coarse.zetas[ci] - run.zetas[fi]).abs()
                        / run.zetas[fi].abs().max(ZETA_FLOOR);
                    let bscale = run.bs[fi]
                        .abs()
                        .max(kappa1(k)? * run.zetas[fi].powf(k as f64 / 2.0));
                    let db = (coarse.bs[ci] - run.bs[fi]).abs() / bscale.max(1e-300);
                    let dt = (coarse.times[ci] - run.times[fi]).abs()
                        / run.times[fi].abs().max(1.0);
                    excess = excess.max(dz / allowed).max(db / allowed).max(dt / allowed);
                }
                if excess <= 1.0 {
                    let mut states = Vec::with_capacity(run.times.len());
                    for (&z, &b) in run.zetas.iter().zip(&run.bs) {
                        states.push(OdeState {
                            zeta: z,
                            b,
                            mu: st.mu,
                            xi: b + k1 * z.powf(k as f64 / 2.0),
                        });
                    }
                    return Ok(OdeSeries {
                        k,
                        direction,
                        times: run.times,
                        states,
                        halt: run.halt,
                    });
                }
            }
        }
        prev = Some(run);
        dtau *= 0.5;
    }
    Err(WmError::Numerical(
        "reduced system did not converge under step refinement; the trajectory is stiff".into(),
    ))
}

/// Model for extracting a concentration rate from a time series.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RateModel {
    /// `zeta ~ prefactor * |t - t_offset|^rate`; fit of `ln zeta` against
    /// `ln |t - t_offset|`, with the singular time fitted on the near side
    /// of the window. A power law is translation covariant, so the series'
    /// arbitrary clock origin must not bias the exponent.
    PowerLaw,
    /// `zeta ~ prefactor * exp(rate t)`; fit of `ln zeta` against `t`.
    Exponential,
}

/// Least-squares rate over the final decade of the series.
#[derive(Clone, Copy, Debug)]
pub struct RateFit {
    pub model: RateModel,
    /// Exponent (power law) or exponential rate.
    pub rate: f64,
    pub prefactor: f64,
    /// Fitted singular time of the power law; zero for the exponential model.
    pub t_offset: f64,
    /// Root-mean-square residual of `ln zeta` over the fit window.
    pub residual: f64,
    /// Index range `[start, end)` of the window.
    pub window: (usize, usize),
    /// Dynamic range of the whole series, in decades of `zeta`.
    pub decades: f64,
}

/// Fits the concentration rate on the final decade of `zeta`. The series
/// must span at least two decades so that the window is free of the initial
/// transient.
pub fn rate_fit(times: &[f64], zetas: &[f64], model: RateModel) -> Result<RateFit> {
    if times.len() != zetas.len() {
        return Err(WmError::Config(format!(
            "series lengths differ: {} times against {} values",
            times.len(),
            zetas.len()
        )));
    }
    if times.iter().any(|t| !t.is_finite()) || zetas.iter().any(|z| !(z.is_finite() && *z > 0.0)) {
        return Err(WmError::Config("rate fit needs finite times and positive scales".into()));
    }
    let n = zetas.len();
    let (mut zmin, mut zmax) = (f64::INFINITY, 0.0_f64);
    for &z in zetas {
        zmin = zmin.min(z);
        zmax = zmax.max(z);
    }
    let decades = (zmax / zmin).log10();
    if decades < 2.0 {
        return Err(WmError::Domain(format!(
            "series spans {decades:.2} decades in zeta; rate fitting needs at least 2"
        )));
    }

    // Final decade: the longest suffix whose zeta range stays within one
    // decade of the last value.
    let zl = zetas[n - 1];
    let (mut lo, mut hi) = (zl, zl);
    let mut start = n - 1;
    while start > 0 {
        let z = zetas[start - 1];
        let nlo = lo.min(z);
        let nhi = hi.max(z);
        if nhi / nlo > 10.0 {
            break;
        }
        lo = nlo;
        hi = nhi;
        start -= 1;
    }
    let window = &zetas[start..];
    let wtimes = &times[start..];
    if window.len() < 8 {
        return Err(WmError::Domain(format!(
            "final decade holds only {} samples; rate fitting needs at least 8",
            window.len()
        )));
    }

    let y: Vec<f64> = window.iter().map(|z| z.ln()).collect();
    let fitted = match model {
        RateModel::PowerLaw => fit_power_window(wtimes, &y)?,
        RateModel::Exponential => {
            let xspan = wtimes.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
                - wtimes.iter().cloned().fold(f64::INFINITY, f64::min);
            if xspan.abs() <= 1e-9 {
                return Err(WmError::Domain(
                    "fit window is degenerate in the time coordinate".into(),
                ));
            }
            let (intercept, slope) = line_fit(wtimes, &y);
            (intercept, slope, 0.0, rms_residual(wtimes, &y, intercept, slope))
        }
    };
    let (intercept, slope, t_offset, residual) = fitted;
    Ok(RateFit {
        model,
        rate: slope,
        prefactor: intercept.exp(),
        t_offset,
        residual,
        window: (start, n),
        decades,
    })
}

fn rms_residual(x: &[f64], y: &[f64], intercept: f64, slope: f64) -> f64 {
    let mut ss = 0.0;
    for (xi, yi) in x.iter().zip(y) {
        let r = yi - intercept - slope * xi;
        ss += r * r;
    }
    (ss / x.len() as f64).sqrt()
}

/// Least-squares `y = intercept + slope ln|t - t*|` over the window, with the
/// singular time `t*` itself fitted. The window times must be strictly
/// monotone; `t*` is searched on the near side (before the window start in
/// the direction of travel), so `|t - t*|` grows toward the asymptotic end.
/// Returns `(intercept, slope, t*, rms residual)`.
fn fit_power_window(wtimes: &[f64], y: &[f64]) -> Result<(f64, f64, f64, f64)> {
    let m = wtimes.len();
    let w0 = wtimes[0];
    let dir = if wtimes[m - 1] > w0 { 1.0 } else { -1.0 };
    let mut prev = f64::NEG_INFINITY;
    let mut reach = 0.0_f64;
    for &t in wtimes {
        let u = dir * (t - w0);
        if u <= prev {
            return Err(WmError::Domain(
                "power-law fit needs strictly monotone window times".into(),
            ));
        }
        prev = u;
        reach = u;
    }
    if reach <= 0.0 {
        return Err(WmError::Domain(
            "fit window is degenerate in the time coordinate".into(),
        ));
    }
    // Distances from the window start, oriented toward the asymptotic end.
    let d: Vec<f64> = wtimes.iter().map(|t| dir * (t - w0)).collect();
    // Shift s > 0 places the singular time at distance s before the window.
    let scale = reach + w0.abs();
    let (ls_min, ls_max) = ((1e-9 * scale).ln(), (1e7 * scale).ln());
    let eval = |ls: f64| -> (f64, f64, f64) {
        let s = ls.exp();
        let x: Vec<f64> = d.iter().map(|di| (di + s).ln()).collect();
        let (intercept, slope) = line_fit(&x, y);
        (rms_residual(&x, y, intercept, slope), intercept, slope)
    };
    // Coarse geometric scan, then golden-section refinement in the best cell.
    let coarse = 240;
    let mut best = (f64::INFINITY, ls_min);
    for i in 0..=coarse {
        let ls = ls_min + (ls_max - ls_min) * i as f64 / coarse as f64;
        let (rss, _, _) = eval(ls);
        if rss < best.0 {
            best = (rss, ls);
        }
    }
    let cell = (ls_max - ls_min) / coarse as f64;
    let (mut a, mut b) = (best.1 - cell, best.1 + cell);
    let phi = 0.5 * (5.0_f64.sqrt() - 1.0);
    let (mut c, mut dpt) = (b - phi * (b - a), a + phi * (b - a));
    let (mut fc, mut fd) = (eval(c).0, eval(dpt).0);
    for _ in 0..120 {
        if fc <= fd {
            b = dpt;
            dpt = c;
            fd = fc;
            c = b - phi * (b - a);
            fc = eval(c).0;
        } else {
            a = c;
            c = dpt;
            fc = fd;
            dpt = a + phi * (b - a);
            fd = eval(dpt).0;
        }
    }
    let ls = 0.5 * (a + b);
    let (residual, intercept, slope) = eval(ls);
    let t_offset = w0 - dir * ls.exp();
    Ok((intercept, slope, t_offset, residual))
}
