//! Time evolution of the equivariant wave map equation in the reduced
//! variable u = psi/r, for which the linear part is the radial wave
//! equation in four space dimensions: u is smooth through the origin,
//! u(0) = 0 is exact for k >= 2, and the method-of-lines discretization
//! (5-point stencils, classical RK4) is 4th order in space and time.

use std::f64::consts::PI;
use std::sync::Arc;

use crate::error::{Result, WmError};
use crate::functionals::{bubble_distance, FitMode};
use crate::grid::{FieldPair, RadialGrid};
use crate::statics::BubbleFamily;
use crate::util::fd_weights;

/// Nonlinearity factor `N4(rho) = k^2 (2 rho - sin 2 rho) / (2 rho^3)`,
/// smooth, bounded and even, with `N4(0) = 2 k^2 / 3`; a Taylor form takes
/// over below |rho| = 0.05 where the direct quotient loses digits.
pub fn n4(k: u32, rho: f64) -> f64 {
    let k2 = (k as f64) * (k as f64);
    let rho = rho.abs(); // even function; keeps the two signs bit-identical
    if rho < 0.05 {
        let r2 = rho * rho;
        k2 * (2.0 / 3.0 + r2 * (-2.0 / 15.0 + r2 * (4.0 / 315.0 - r2 * (2.0 / 2835.0))))
    } else {
        k2 * (2.0 * rho - (2.0 * rho).sin()) / (2.0 * rho * rho * rho)
    }
}

/// Initial data recipes.
pub enum InitSpec<'a> {
    /// `iota (Q_lambda - Q_mu)` with optional scale velocities: the time
    /// derivative of the ansatz with moving scales gives
    /// `psi_t = iota (-(lambda_dot/lambda) (LamQ)_lambda + (mu_dot/mu) (LamQ)_mu)`.
    TwoBubble { iota: i32, lambda: f64, mu: f64, lambda_dot: f64, mu_dot: f64 },
    /// `(Q_lambda, 0)`; boundary classes (0, 1), energy 4 pi k.
    SingleBubble { lambda: f64 },
    /// Arbitrary profiles; `support` is the radius beyond which the data is
    /// tail-like (static to working precision), used for the causality budget.
    Custom { psi: &'a dyn Fn(f64) -> f64, psit: &'a dyn Fn(f64) -> f64, support: f64 },
}

/// Why an evolution stopped.
#[derive(Clone, Debug, PartialEq)]
pub enum HaltReason {
    Completed,
    /// sup|u| crossed the overflow guard; reported as under-resolved
    /// concentration, never as a verified singularity.
    BlowUpSuspected { time: f64, sup_u: f64 },
    /// Relative energy drift crossed the consistency guard.
    DriftExceeded { time: f64, drift: f64 },
    /// The causality budget ran out before the requested horizon.
    HorizonTruncated { requested: f64, reached: f64 },
}

impl std::fmt::Display for HaltReason {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            HaltReason::Completed => write!(f, "completed"),
            HaltReason::BlowUpSuspected { time, sup_u } => write!(
                f,
                "halted at t={time:.6}: under-resolved concentration (sup|u| = {sup_u:.3e})"
            ),
            HaltReason::DriftExceeded { time, drift } => write!(
                f,
                "halted at t={time:.6}: under-resolved concentration (energy drift {drift:.3e})"
            ),
            HaltReason::HorizonTruncated { requested, reached } => write!(
                f,
                "horizon truncated at t={reached:.6} (requested {requested:.6}): causality margin exhausted"
            ),
        }
    }
}

/// One diagnostics row.
#[derive(Clone, Debug)]
pub struct DiagRow {
    pub t: f64,
    pub energy: f64,
    pub kinetic: f64,
    pub class_ok: bool,
    pub d: Option<f64>,
}

/// Evolution output: snapshot times and fields, per-step diagnostics, halt
/// reason. Times are strictly increasing by construction.
pub struct Trajectory {
    pub times: Vec<f64>,
    pub snapshots: Vec<FieldPair>,
    pub diagnostics: Vec<DiagRow>,
    pub halt: HaltReason,
}

impl Trajectory {
    /// Diagnostics table, comma separated with a fixed header row.
    pub fn diagnostics_csv(&self) -> String {
        let mut s = String::from("t,energy,kinetic,class_ok,d\n");
        for row in &self.diagnostics {
            s.push_str(&format!(
                "{},{},{},{},{}\n",
                crate::util::fmt_g17(row.t),
                crate::util::fmt_g17(row.energy),
                crate::util::fmt_g17(row.kinetic),
                row.class_ok,
                row.d.map(crate::util::fmt_g17).unwrap_or_default()
            ));
        }
        s
    }
}

/// Method-of-lines state on a uniform grid `r_j = j dr`, `j = 0..n`,
/// including the origin. `u[0] = 0` is pinned (regularity, k >= 2); the two
/// nodes beyond `r_max` hold the initial tail model, frozen in time, which
/// reduces to an exact zero boundary for compactly supported data.
#[derive(Clone)]
pub struct SimState {
    pub k: u32,
    pub dr: f64,
    /// Time step ratio dt/dr actually in use (<= the configured cap; also
    /// capped by the stiffness of the 1/r^2 term at the first node).
    pub cfl: f64,
    pub time: f64,
    pub u: Vec<f64>,
    pub ut: Vec<f64>,
    ghosts: [f64; 2],
    support: f64,
    right_class: i64,
    out_grid: Arc<RadialGrid>,
}

impl std::fmt::Debug for SimState {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("SimState")
            .field("k", &self.k)
            .field("dr", &self.dr)
            .field("cfl", &self.cfl)
            .field("time", &self.time)
            .field("nodes", &self.u.len())
            .field("r_max", &self.r_max())
            .field("support", &self.support)
            .finish()
    }
}

const SUP_U_GUARD: f64 = 1e6;
const DRIFT_GUARD: f64 = 1e-2;
const CAUSALITY_MARGIN: f64 = 2.0;

/// Build initial data. `horizon` is the planned evolution span |t|; the
/// causality budget requires `r_max >= support + horizon + 2`.
pub fn init_state(
    k: u32,
    spec: &InitSpec,
    dr: f64,
    r_max: f64,
    horizon: f64,
    cfl: f64,
) -> Result<SimState> {
    if k < 2 {
        return Err(WmError::Config(format!("equivariance degree must be >= 2, got {k}")));
    }
    if !(dr > 0.0) || !(r_max > 10.0 * dr) {
        return Err(WmError::Config(format!("bad grid: dr={dr}, r_max={r_max}")));
    }
    if !(cfl > 0.0 && cfl <= 0.5) {
        return Err(WmError::Config(format!("cfl ratio must lie in (0, 0.5], got {cfl}")));
    }
    if !(horizon >= 0.0) {
        return Err(WmError::Config(format!("horizon must be nonnegative, got {horizon}")));
    }
    let fam = BubbleFamily::new(k)?;
    let check_scale = |l: f64, name: &str| -> Result<()> {
        if l < 10.0 * dr {
            return Err(WmError::Config(format!(
                "scale {name} = {l} unresolved: need at least 10 nodes per scale (dr = {dr})"
            )));
        }
        Ok(())
    };
    let support = match spec {
        InitSpec::TwoBubble { lambda, mu, .. } => {
            if !(lambda > &0.0 && mu > &0.0 && lambda < mu) {
                return Err(WmError::Config(format!(
                    "two-bubble needs 0 < lambda < mu, got ({lambda}, {mu})"
                )));
            }
            check_scale(*lambda, "lambda")?;
            10.0 * mu
        }
        InitSpec::SingleBubble { lambda } => {
            check_scale(*lambda, "lambda")?;
            10.0 * lambda
        }
        InitSpec::Custom { support, .. } => *support,
    };
    let needed = support + horizon + CAUSALITY_MARGIN;
    if r_max < needed {
        return Err(WmError::Config(format!(
            "causality margin violated: horizon {horizon} with data support {support} \
             requires r_max >= {needed}, got {r_max}"
        )));
    }
    let n = (r_max / dr).round() as usize + 1;
    let r_max = (n - 1) as f64 * dr;
    let psi_fn: Box<dyn Fn(f64) -> f64> = match spec {
        InitSpec::TwoBubble { iota, lambda, mu, .. } => {
            let (i, l, m) = (*iota as f64, *lambda, *mu);
            Box::new(move |r| i * (fam.q(r / l) - fam.q(r / m)))
        }
        InitSpec::SingleBubble { lambda } => {
            let l = *lambda;
            Box::new(move |r| fam.q(r / l))
        }
        InitSpec::Custom { psi, .. } => Box::new(move |r| psi(r)),
    };
    let psit_fn: Box<dyn Fn(f64) -> f64> = match spec {
        InitSpec::TwoBubble { iota, lambda, mu, lambda_dot, mu_dot } => {
            let (i, l, m, ld, md) = (*iota as f64, *lambda, *mu, *lambda_dot, *mu_dot);
            Box::new(move |r| i * (-(ld / l) * fam.lam_q(r / l) + (md / m) * fam.lam_q(r / m)))
        }
        InitSpec::SingleBubble { .. } => Box::new(|_| 0.0),
        InitSpec::Custom { psit, .. } => Box::new(move |r| psit(r)),
    };
    let mut u = vec![0.0; n];
    let mut ut = vec![0.0; n];
    for j in 1..n {
        let r = j as f64 * dr;
        u[j] = psi_fn(r) / r;
        ut[j] = psit_fn(r) / r;
    }
    SimState::assemble(k, dr, cfl, u, ut, support, r_max)
}

impl SimState {
    fn assemble(
        k: u32,
        dr: f64,
        cfl_cap: f64,
        u: Vec<f64>,
        ut: Vec<f64>,
        support: f64,
        r_max: f64,
    ) -> Result<Self> {
        let n = u.len();
        if n < 16 {
            return Err(WmError::Config(format!("grid too small: {n} nodes")));
        }
        for (name, v) in [("u", &u), ("u_t", &ut)] {
            if v.iter().any(|x| !x.is_finite()) {
                return Err(WmError::Numerical(format!("non-finite {name} in initial data")));
            }
        }
        // frozen tail model: psi ~ c pi + A r^{-k} matched at the last node
        let psi_edge = r_max * u[n - 1];
        let c = (psi_edge / PI).round();
        let a = (psi_edge - c * PI) * r_max.powi(k as i32);
        let mut ghosts = [0.0; 2];
        for (i, g) in ghosts.iter_mut().enumerate() {
            let rg = r_max + (i + 1) as f64 * dr;
            *g = (c * PI + a * rg.powi(-(k as i32))) / rg;
        }
        // stability: the centered 5-point u_rr symbol peaks at 16/3 dr^-2 and
        // the (k^2-1)/r^2 potential at the first node adds (k^2-1) dr^-2;
        // RK4 on the imaginary axis is stable up to 2 sqrt 2, kept with margin
        let cfl = cfl_cap.min(2.5 / (16.0 / 3.0 - 1.0 + (k * k) as f64).sqrt());
        let cells = (n - 1).div_ceil(4).max(8);
        let out_grid = Arc::new(RadialGrid::uniform(0.0, r_max, cells)?);
        Ok(SimState {
            k,
            dr,
            cfl,
            time: 0.0,
            u,
            ut,
            ghosts,
            support,
            right_class: c as i64,
            out_grid,
        })
    }

    /// Rebuild a state from a field pair sampled onto a uniform grid
    /// (`u_of_psi`). `support` falls back to the outermost radius carrying
    /// kinetic data when not given.
    pub fn from_field(
        fp: &FieldPair,
        dr: f64,
        r_max: f64,
        support: Option<f64>,
        cfl: f64,
    ) -> Result<Self> {
        if !(cfl > 0.0 && cfl <= 0.5) {
            return Err(WmError::Config(format!("cfl ratio must lie in (0, 0.5], got {cfl}")));
        }
        if r_max > fp.grid.r_max * (1.0 + 1e-12) {
            return Err(WmError::Config(format!(
                "requested r_max {r_max} exceeds source field extent {}",
                fp.grid.r_max
            )));
        }
        let n = (r_max / dr).round() as usize + 1;
        let r_max = (n - 1) as f64 * dr;
        let mut u = vec![0.0; n];
        let mut ut = vec![0.0; n];
        for j in 1..n {
            let r = j as f64 * dr;
            u[j] = fp.grid.interp(&fp.psi, r) / r;
            ut[j] = fp.grid.interp(&fp.psit, r) / r;
        }
        let support = support.unwrap_or_else(|| {
            let peak = ut.iter().fold(0.0f64, |m, &x| m.max(x.abs()));
            let mut s = dr;
            for j in (1..n).rev() {
                if ut[j].abs() > 1e-12 * (peak + 1e-300) {
                    s = j as f64 * dr;
                    break;
                }
            }
            s
        });
        SimState::assemble(fp.k, dr, cfl, u, ut, support, r_max)
    }

    pub fn r_max(&self) -> f64 {
        (self.u.len() - 1) as f64 * self.dr
    }

    pub fn dt(&self) -> f64 {
        self.cfl * self.dr
    }

    /// Time span still covered by the causality budget.
    pub fn horizon_budget(&self) -> f64 {
        (self.r_max() - self.support - CAUSALITY_MARGIN - self.time.abs()).max(0.0)
    }

    /// State with the velocity negated (time reflection).
    pub fn reversed(&self) -> SimState {
        let mut s = self.clone();
        for v in &mut s.ut {
            *v = -*v;
        }
        s
    }

    /// Acceleration u_tt: 4th-order stencils, odd ghost extension through
    /// the origin, frozen tail ghosts outside.
    fn accel(&self, u: &[f64]) -> Vec<f64> {
        let n = u.len();
        let dr = self.dr;
        let k2m1 = (self.k * self.k) as f64 - 1.0;
        let inv12dr2 = 1.0 / (12.0 * dr * dr);
        let inv12dr = 1.0 / (12.0 * dr);
        let mut a = vec![0.0; n];
        // regular solutions have u = r^(k-1) (series in r^2), so u extends
        // through r = 0 with parity (-1)^(k-1); u(0) = 0 stays pinned
        let parity = if self.k % 2 == 0 { -1.0 } else { 1.0 };
        let at = |j: isize| -> f64 {
            if j <= 0 {
                if j == 0 { 0.0 } else { parity * u[(-j) as usize] }
            } else if (j as usize) < n {
                u[j as usize]
            } else {
                self.ghosts[j as usize - n]
            }
        };
        for j in 1..n {
            let ji = j as isize;
            let (um2, um1, u0, up1, up2) = (at(ji - 2), at(ji - 1), u[j], at(ji + 1), at(ji + 2));
            let u_rr = (-um2 + 16.0 * um1 - 30.0 * u0 + 16.0 * up1 - up2) * inv12dr2;
            let u_r = (um2 - 8.0 * um1 + 8.0 * up1 - up2) * inv12dr;
            let r = j as f64 * dr;
            let rho = r * u0;
            a[j] = u_rr + 3.0 * u_r / r - k2m1 * u0 / (r * r) + n4(self.k, rho) * u0 * u0 * u0;
        }
        a
    }

    fn step_by(&mut self, dt: f64) {
        let n = self.u.len();
        let a1 = self.accel(&self.u);
        let mut u2 = vec![0.0; n];
        for j in 0..n {
            u2[j] = self.u[j] + 0.5 * dt * self.ut[j];
        }
        let a2 = self.accel(&u2);
        let mut u3 = vec![0.0; n];
        for j in 0..n {
            u3[j] = self.u[j] + 0.5 * dt * self.ut[j] + 0.25 * dt * dt * a1[j];
        }
        let a3 = self.accel(&u3);
        let mut u4 = vec![0.0; n];
        for j in 0..n {
            u4[j] = self.u[j] + dt * self.ut[j] + 0.5 * dt * dt * a2[j];
        }
        let a4 = self.accel(&u4);
        for j in 1..n {
            self.u[j] += dt * self.ut[j] + dt * dt / 6.0 * (a1[j] + a2[j] + a3[j]);
            self.ut[j] += dt / 6.0 * (a1[j] + 2.0 * a2[j] + 2.0 * a3[j] + a4[j]);
        }
        self.time += dt;
    }

    /// One time step of size `dt()`.
    pub fn step(&self) -> SimState {
        let mut s = self.clone();
        s.step_by(s.dt());
        s
    }

    /// Total energy `pi integral (psi_t^2 + psi_r^2 + k^2 sin^2 psi / r^2) r dr`
    /// over the grid (trapezoid; the static tail beyond r_max is constant in
    /// time, so drift diagnostics are unaffected by its omission).
    pub fn energy(&self) -> f64 {
        let n = self.u.len();
        let dr = self.dr;
        let k2 = (self.k * self.k) as f64;
        let mut total = 0.0;
        for j in 1..n {
            let r = j as f64 * dr;
            let ji = j as isize;
            let parity = if self.k % 2 == 0 { -1.0 } else { 1.0 };
            let at = |i: isize| -> f64 {
                if i <= 0 {
                    if i == 0 { 0.0 } else { parity * self.u[(-i) as usize] }
                } else if (i as usize) < n {
                    self.u[i as usize]
                } else {
                    self.ghosts[i as usize - n]
                }
            };
            let u_r = (at(ji - 2) - 8.0 * at(ji - 1) + 8.0 * at(ji + 1) - at(ji + 2))
                / (12.0 * dr);
            let psi = r * self.u[j];
            let psi_r = self.u[j] + r * u_r;
            let psi_t = r * self.ut[j];
            let s = psi.sin();
            let density = (psi_t * psi_t + psi_r * psi_r + k2 * s * s / (r * r)) * r;
            let w = if j == n - 1 { 0.5 } else { 1.0 };
            total += w * density;
        }
        PI * total * dr
    }

    /// `|psi_t|^2 in L^2(r dr)` on the grid (trapezoid).
    pub fn kinetic(&self) -> f64 {
        let n = self.u.len();
        let mut total = 0.0;
        for j in 1..n {
            let r = j as f64 * self.dr;
            let w = if j == n - 1 { 0.5 } else { 1.0 };
            total += w * (r * self.ut[j]).powi(2) * r;
        }
        total * self.dr
    }

    fn interp_u(&self, v: &[f64], x: f64) -> f64 {
        let n = v.len();
        let j = (x / self.dr).floor() as usize;
        let j0 = j.saturating_sub(3).min(n - 7);
        let xs: Vec<f64> = (j0..j0 + 7).map(|i| i as f64 * self.dr).collect();
        let w = fd_weights(x, &xs, 0);
        (0..7).map(|i| w[0][i] * v[j0 + i]).sum()
    }

    /// Snapshot as a field pair (`psi = r u`) on a quadrature grid.
    pub fn field(&self) -> Result<FieldPair> {
        self.field_on(&self.out_grid)
    }

    /// Snapshot interpolated onto a caller-supplied grid (its extent must
    /// not exceed the simulation domain).
    pub fn field_on(&self, grid: &Arc<RadialGrid>) -> Result<FieldPair> {
        if grid.r_max > self.r_max() * (1.0 + 1e-12) {
            return Err(WmError::Config(format!(
                "output grid extends to {} beyond the simulation domain {}",
                grid.r_max,
                self.r_max()
            )));
        }
        let mut psi = Vec::with_capacity(grid.len());
        let mut psit = Vec::with_capacity(grid.len());
        for &r in grid.nodes() {
            psi.push(r * self.interp_u(&self.u, r));
            psit.push(r * self.interp_u(&self.ut, r));
        }
        FieldPair::new(grid.clone(), self.k, psi, psit)
    }

    /// Evolve for a span `t_end`, snapshotting every `snap_every` time
    /// units (both must be positive). With `fit_d`, each snapshot row also
    /// carries the two-bubble proximity of the snapshot. Halts early on
    /// suspected blow-up (conservative guards; reported as under-resolved
    /// concentration) and truncates at the causality budget with a warning
    /// halt reason.
    pub fn evolve(&self, t_end: f64, snap_every: f64, fit_d: bool) -> Result<Trajectory> {
        if !(t_end > 0.0) || !(snap_every > 0.0) {
            return Err(WmError::Config(format!(
                "evolution span and snapshot interval must be positive, got {t_end}, {snap_every}"
            )));
        }
        let budget = self.horizon_budget();
        let (span, truncated) = if t_end > budget + 1e-12 { (budget, true) } else { (t_end, false) };
        if span <= 0.0 {
            return Err(WmError::Config(
                "causality budget exhausted before evolution start".into(),
            ));
        }
        let snap_every = snap_every.min(span);
        let per_snap = (snap_every / self.dt()).ceil().max(1.0);
        let dt = snap_every / per_snap;
        let n_snaps = (span / snap_every - 1e-9).ceil().max(1.0) as usize;
        let per_snap = per_snap as usize;

        let mut state = self.clone();
        let e0 = state.energy();
        let mut traj = Trajectory {
            times: Vec::new(),
            snapshots: Vec::new(),
            diagnostics: Vec::new(),
            halt: HaltReason::Completed,
        };
        let push_snapshot = |state: &SimState, traj: &mut Trajectory, with_d: bool| {
            if let Ok(fp) = state.field() {
                let d = if with_d {
                    bubble_distance(&fp, FitMode::Both).ok().map(|f| f.value)
                } else {
                    None
                };
                traj.times.push(state.time);
                traj.snapshots.push(fp);
                if let Some(row) = traj.diagnostics.last_mut() {
                    row.d = d;
                }
            }
        };
        let diag_row = |state: &SimState| DiagRow {
            t: state.time,
            energy: state.energy(),
            kinetic: state.kinetic(),
            class_ok: {
                let psi_edge = state.r_max() * state.u[state.u.len() - 1];
                (psi_edge / PI).round() as i64 == state.right_class
            },
            d: None,
        };
        traj.diagnostics.push(diag_row(&state));
        push_snapshot(&state, &mut traj, fit_d);

        'outer: for _ in 0..n_snaps {
            for _ in 0..per_snap {
                state.step_by(dt);
                let sup_u = state.u.iter().fold(0.0f64, |m, &x| m.max(x.abs()));
                let row = diag_row(&state);
                let drift = (row.energy - e0).abs() / e0.abs().max(1e-300);
                traj.diagnostics.push(row);
                if !sup_u.is_finite() || sup_u > SUP_U_GUARD {
                    traj.halt = HaltReason::BlowUpSuspected { time: state.time, sup_u };
                    push_snapshot(&state, &mut traj, fit_d);
                    break 'outer;
                }
                if drift > DRIFT_GUARD {
                    traj.halt = HaltReason::DriftExceeded { time: state.time, drift };
                    push_snapshot(&state, &mut traj, fit_d);
                    break 'outer;
                }
            }
            push_snapshot(&state, &mut traj, fit_d);
        }
        if truncated && traj.halt == HaltReason::Completed {
            traj.halt = HaltReason::HorizonTruncated { requested: t_end, reached: state.time };
        }
        Ok(traj)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bump_state(k: u32, amp: f64, dr: f64) -> SimState {
        let psi = move |r: f64| amp * r * r * (-r * r).exp();
        let psit = |_: f64| 0.0;
        init_state(
            k,
            &InitSpec::Custom { psi: &psi, psit: &psit, support: 8.0 },
            dr,
            12.0,
            2.0,
            0.5,
        )
        .unwrap()
    }

    #[test]
    fn n4_limit_and_switch() {
        for k in 2u32..=6 {
            let want = 2.0 * (k * k) as f64 / 3.0;
            assert!((n4(k, 0.0) - want).abs() <= 2.0 * f64::EPSILON * want);
            for rho in [0.045f64, 0.055, -0.049, 0.2, 1.5] {
                let k2 = (k * k) as f64;
                let direct = k2 * (2.0 * rho - (2.0 * rho).sin()) / (2.0 * rho.powi(3));
                let rel = (n4(k, rho) - direct).abs() / direct.abs();
                assert!(rel < 1e-11, "k={k} rho={rho}: rel={rel}");
                assert_eq!(n4(k, rho), n4(k, -rho));
            }
        }
    }

    #[test]
    fn static_bubble_is_a_discrete_near_equilibrium() {
        // the acceleration of (Q, 0) is pure spatial truncation error; it
        // must be small and shrink at 4th order
        let sup_residual = |dr: f64| {
            let s =
                init_state(2, &InitSpec::SingleBubble { lambda: 1.0 }, dr, 16.0, 2.0, 0.5).unwrap();
            let a = s.accel(&s.u);
            a.iter().fold(0.0f64, |m, &x| m.max(x.abs()))
        };
        let coarse = sup_residual(1.0 / 64.0);
        let fine = sup_residual(1.0 / 128.0);
        // the first interior node loses one order to the 3 u_r / r factor,
        // so the sup converges at 3rd order (ratio 8), localized at r = dr
        assert!(coarse < 1e-4, "sup residual {coarse}");
        assert!(coarse / fine > 7.0, "order breakdown: {coarse} -> {fine}");
    }

    #[test]
    fn zero_data_stays_zero() {
        let psi = |_: f64| 0.0;
        let psit = |_: f64| 0.0;
        let s = init_state(
            2,
            &InitSpec::Custom { psi: &psi, psit: &psit, support: 1.0 },
            0.05,
            8.0,
            2.0,
            0.5,
        )
        .unwrap();
        let traj = s.evolve(2.0, 0.5, false).unwrap();
        assert_eq!(traj.halt, HaltReason::Completed);
        for fp in &traj.snapshots {
            assert!(fp.psi.iter().all(|&x| x == 0.0));
            assert!(fp.psit.iter().all(|&x| x == 0.0));
        }
    }

    #[test]
    fn static_bubble_preserved_in_h_norm() {
        let s = init_state(2, &InitSpec::SingleBubble { lambda: 1.0 }, 1.0 / 64.0, 16.0, 2.0, 0.5)
            .unwrap();
        let traj = s.evolve(2.0, 0.25, false).unwrap();
        assert_eq!(traj.halt, HaltReason::Completed);
        let grid = traj.snapshots[0].grid.clone();
        let fam = BubbleFamily::new(2).unwrap();
        let q = grid.sample(|r| fam.q(r));
        let mut worst = 0.0f64;
        for fp in &traj.snapshots {
            let diff: Vec<f64> = (0..grid.len()).map(|i| fp.psi[i] - q[i]).collect();
            let h = grid.h_norm(&diff, 2);
            let l2 = grid.l2r_norm(&fp.psit);
            worst = worst.max((h * h + l2 * l2).sqrt());
        }
        assert!(worst <= 1e-4, "sup_t |psi(t) - Q|_(H x L2) = {worst}");
    }

    #[test]
    fn energy_drift_small_for_smooth_data() {
        let s = bump_state(2, 0.5, 1.0 / 64.0);
        let traj = s.evolve(2.0, 0.5, false).unwrap();
        let e0 = traj.diagnostics[0].energy;
        let worst = traj
            .diagnostics
            .iter()
            .map(|r| (r.energy - e0).abs() / e0)
            .fold(0.0f64, f64::max);
        assert!(worst <= 1e-6, "relative drift {worst}");
    }

    #[test]
    fn kinetic_never_exceeds_twice_energy_over_pi() {
        let s = bump_state(3, 0.8, 1.0 / 48.0);
        let traj = s.evolve(2.0, 0.25, false).unwrap();
        for row in &traj.diagnostics {
            assert!(row.kinetic <= 2.0 * row.energy / PI * (1.0 + 1e-12));
        }
    }

    #[test]
    fn round_trip_u_psi() {
        let g = Arc::new(RadialGrid::uniform(0.0, 16.0, 800).unwrap());
        let fam = BubbleFamily::new(2).unwrap();
        let fp = FieldPair::from_fn(
            g.clone(),
            2,
            move |r| fam.q(r / 1.0) - fam.q(r / 3.0),
            |r| 0.3 * r * (-r).exp(),
        )
        .unwrap();
        let dr = 0.01;
        let s = SimState::from_field(&fp, dr, 16.0, Some(10.0), 0.5).unwrap();
        let back = s.field_on(&g).unwrap();
        let mut worst = 0.0f64;
        let mut at = 0.0f64;
        for (i, &r) in g.nodes().iter().enumerate() {
            if r >= 10.0 * dr {
                let e = (back.psi[i] - fp.psi[i]).abs().max((back.psit[i] - fp.psit[i]).abs());
                if e > worst {
                    worst = e;
                    at = r;
                }
            }
        }
        assert!(worst <= 1e-12, "round-trip deviation {worst} at r = {at}");
    }

    #[test]
    fn norm_identity_2d_4d() {
        // |(u_0, u_1)|^2 on the 4d side equals pair_norm^2 on the 2d side
        let g = Arc::new(RadialGrid::uniform(0.0, 12.0, 600).unwrap());
        let fp = FieldPair::from_fn(
            g.clone(),
            2,
            |r| 0.7 * r * r * (-r * r).exp(),
            |r| 0.4 * r * (-r * r).exp(),
        )
        .unwrap();
        let k2m1 = 3.0;
        let u: Vec<f64> = g.nodes().iter().enumerate().map(|(i, &r)| fp.psi[i] / r).collect();
        let ut: Vec<f64> = g.nodes().iter().enumerate().map(|(i, &r)| fp.psit[i] / r).collect();
        let du = g.diff(&u, crate::grid::DiffOp::D1);
        let nodes = g.nodes();
        let mut elliptic: Vec<f64> = Vec::with_capacity(g.len());
        let mut kin: Vec<f64> = Vec::with_capacity(g.len());
        for i in 0..g.len() {
            let r = nodes[i];
            elliptic.push((du[i] * du[i] + k2m1 * u[i] * u[i] / (r * r)) * r * r);
            kin.push(ut[i] * ut[i] * r * r);
        }
        let side4 = g.quad(&elliptic, crate::grid::Weight::RDr)
            + g.quad(&kin, crate::grid::Weight::RDr);
        let side2 = fp.pair_norm().unwrap().powi(2);
        assert!(
            (side4 - side2).abs() <= 1e-6 * side2,
            "4d {side4} vs 2d {side2}"
        );
    }

    #[test]
    fn self_convergence_order_at_least_two() {
        let g = Arc::new(RadialGrid::uniform(0.0, 12.0, 480).unwrap());
        let run = |dr: f64| -> (Vec<f64>, Vec<f64>) {
            let s = bump_state(2, 1.2, dr);
            let traj = s.evolve(1.0, 1.0, false).unwrap();
            let fp = traj.snapshots.last().unwrap().field_on_grid(&g);
            fp
        };
        let (p1, v1) = run(1.0 / 24.0);
        let (p2, v2) = run(1.0 / 48.0);
        let (p3, v3) = run(1.0 / 96.0);
        let err = |a: &(Vec<f64>, Vec<f64>), b: &(Vec<f64>, Vec<f64>)| -> f64 {
            let d: Vec<f64> = (0..a.0.len()).map(|i| a.0[i] - b.0[i]).collect();
            let dt: Vec<f64> = (0..a.1.len()).map(|i| a.1[i] - b.1[i]).collect();
            let h = g.h_norm(&d, 2);
            let l = g.l2r_norm(&dt);
            (h * h + l * l).sqrt()
        };
        let e1 = err(&(p1, v1), &(p2.clone(), v2.clone()));
        let e2 = err(&(p2, v2), &(p3, v3));
        let order = (e1 / e2).log2();
        assert!(order >= 2.0, "observed order {order} (e1={e1}, e2={e2})");
    }

    #[test]
    fn boundary_classes_conserved() {
        let s = init_state(
            2,
            &InitSpec::TwoBubble { iota: 1, lambda: 0.2, mu: 1.0, lambda_dot: 0.0, mu_dot: 0.0 },
            1.0 / 50.0,
            14.0,
            1.0,
            0.5,
        )
        .unwrap();
        let traj = s.evolve(1.0, 0.25, false).unwrap();
        for fp in &traj.snapshots {
            assert_eq!((fp.left_class, fp.right_class), (0, 0));
        }
        for row in &traj.diagnostics {
            assert!(row.class_ok);
        }
        let sq = init_state(2, &InitSpec::SingleBubble { lambda: 1.0 }, 1.0 / 32.0, 16.0, 1.0, 0.5)
            .unwrap();
        let tq = sq.evolve(1.0, 0.5, false).unwrap();
        for fp in &tq.snapshots {
            assert_eq!((fp.left_class, fp.right_class), (0, 1));
        }
    }

    #[test]
    fn time_reversal_returns_initial_data() {
        let dr = 1.0 / 48.0;
        let s = bump_state(2, 1.2, dr);
        let fwd = s.evolve(1.0, 1.0, false).unwrap();
        let g = fwd.snapshots[0].grid.clone();
        // one-way error proxy: same run at half resolution
        let s_half = bump_state(2, 1.2, dr / 2.0);
        let fwd_half = s_half.evolve(1.0, 1.0, false).unwrap();
        let fine = fwd_half.snapshots.last().unwrap().field_on_grid(&g);
        let coarse = fwd.snapshots.last().unwrap();
        let one_way = {
            let d: Vec<f64> = (0..g.len()).map(|i| coarse.psi[i] - fine.0[i]).collect();
            let dt: Vec<f64> = (0..g.len()).map(|i| coarse.psit[i] - fine.1[i]).collect();
            let h = g.h_norm(&d, 2);
            let l = g.l2r_norm(&dt);
            (h * h + l * l).sqrt()
        };
        // reverse: negate velocity, evolve the same span, compare to
        // (psi_0, -psi_1)
        let end_state = {
            let mut st = s.clone();
            let steps = (1.0 / st.dt()).ceil();
            let dt = 1.0 / steps;
            for _ in 0..steps as usize {
                st.step_by(dt);
            }
            st
        };
        let back = {
            let mut st = end_state.reversed();
            let steps = (1.0 / st.dt()).ceil();
            let dt = 1.0 / steps;
            for _ in 0..steps as usize {
                st.step_by(dt);
            }
            st
        };
        let final_fp = back.field_on(&g).unwrap();
        let init_fp = s.field_on(&g).unwrap();
        let d: Vec<f64> = (0..g.len()).map(|i| final_fp.psi[i] - init_fp.psi[i]).collect();
        let dt: Vec<f64> = (0..g.len()).map(|i| final_fp.psit[i] + init_fp.psit[i]).collect();
        let h = g.h_norm(&d, 2);
        let l = g.l2r_norm(&dt);
        let sym_err = (h * h + l * l).sqrt();
        assert!(
            sym_err <= 10.0 * one_way,
            "symmetry error {sym_err} vs one-way {one_way}"
        );
    }

    #[test]
    fn config_errors_name_the_fix() {
        let err = init_state(2, &InitSpec::SingleBubble { lambda: 0.05 }, 0.02, 16.0, 2.0, 0.5)
            .unwrap_err();
        assert!(matches!(err, WmError::Config(_)));
        assert!(err.to_string().contains("unresolved"));

        let err2 = init_state(2, &InitSpec::SingleBubble { lambda: 1.0 }, 0.02, 10.0, 4.0, 0.5)
            .unwrap_err();
        let msg = err2.to_string();
        assert!(msg.contains("r_max >= 16"), "{msg}");

        let psi = |r: f64| 2e6 * r * (-r * r).exp();
        let psit = |_: f64| 0.0;
        let s = init_state(
            2,
            &InitSpec::Custom { psi: &psi, psit: &psit, support: 6.0 },
            0.02,
            10.0,
            1.0,
            0.5,
        )
        .unwrap();
        let traj = s.evolve(1.0, 0.25, false).unwrap();
        assert!(matches!(traj.halt, HaltReason::BlowUpSuspected { .. }));
        assert!(traj.halt.to_string().contains("under-resolved concentration"));
    }

    #[test]
    fn horizon_truncation_is_flagged() {
        let s = init_state(2, &InitSpec::SingleBubble { lambda: 1.0 }, 1.0 / 32.0, 16.0, 2.0, 0.5)
            .unwrap();
        let traj = s.evolve(100.0, 1.0, false).unwrap();
        assert!(matches!(traj.halt, HaltReason::HorizonTruncated { .. }));
        assert!(*traj.times.last().unwrap() <= 16.0 - 10.0 - 2.0 + 1e-9);
    }

    impl FieldPair {
        /// Test helper: resample onto another grid by polynomial interpolation.
        fn field_on_grid(&self, g: &Arc<RadialGrid>) -> (Vec<f64>, Vec<f64>) {
            let psi = g.nodes().iter().map(|&r| self.grid.interp(&self.psi, r)).collect();
            let psit = g.nodes().iter().map(|&r| self.grid.interp(&self.psit, r)).collect();
            (psi, psit)
        }
    }

    #[test]
    fn rescaled_initial_data_rescales_solution() {
        // scaling symmetry: psi_lambda(t, r) = psi(t/lambda, r/lambda) solves
        // the equation; checked discretely at matched resolutions
        let dr = 1.0 / 48.0;
        let s1 = bump_state(2, 1.0, dr);
        let t1 = s1.evolve(1.0, 1.0, false).unwrap();
        let psi2 = move |r: f64| 1.0 * (r / 2.0) * (r / 2.0) * (-(r / 2.0) * (r / 2.0)).exp();
        let psit2 = |_: f64| 0.0;
        let s2 = init_state(
            2,
            &InitSpec::Custom { psi: &psi2, psit: &psit2, support: 16.0 },
            2.0 * dr,
            24.0,
            4.0,
            0.5,
        )
        .unwrap();
        let t2 = s2.evolve(2.0, 2.0, false).unwrap();
        let g = t1.snapshots[0].grid.clone();
        let end1 = t1.snapshots.last().unwrap();
        let end2 = t2.snapshots.last().unwrap();
        let mut worst = 0.0f64;
        for (i, &r) in g.nodes().iter().enumerate() {
            let val2 = end2.grid.interp(&end2.psi, 2.0 * r);
            worst = worst.max((end1.psi[i] - val2).abs());
        }
        assert!(worst < 5e-6, "scaling symmetry deviation {worst}");
    }
}
