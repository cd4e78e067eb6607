//! Virial diagnostics: the cutoff pairing `<psi_t | chi_R r d_r psi>`, the
//! boundary functional `Omega_R` collecting everything the cutoff sees, and
//! the discrete residual of the identity
//! `d/dt <psi_t | chi_R r d_r psi> = -|psi_t|^2 + Omega_R`
//! along stored trajectories.

use crate::error::{Result, WmError};
use crate::evolve::Trajectory;
use crate::functionals::energy;
use crate::grid::{DiffOp, FieldPair, Weight};
use crate::util::{fd_weights, smoothstep, smoothstep_d1};

/// Cutoff in `x = r / R`: one on `[0, 1]`, quintic smoothstep down on
/// `[1, 3]`, zero beyond. The slope bound `|chi'| <= 15/16` holds because
/// the transition is stretched over width two.
pub fn chi_virial(x: f64) -> f64 {
    1.0 - smoothstep((x - 1.0) / 2.0)
}

/// Derivative of `chi_virial` with respect to `x`.
pub fn chi_virial_d1(x: f64) -> f64 {
    -smoothstep_d1((x - 1.0) / 2.0) / 2.0
}

/// One evaluated cutoff diagnostic row.
#[derive(Clone, Copy, Debug)]
pub struct VirialRecord {
    pub t: f64,
    /// Cutoff radius R.
    pub r_cut: f64,
    /// `<psi_t | chi_R r d_r psi>`.
    pub pairing: f64,
    /// Both addends of `Omega_R` summed.
    pub omega: f64,
    /// `|psi_t|^2` in `L^2(r dr)` (squared).
    pub kinetic: f64,
    /// Energy content of `r >= R`, tail-extrapolated.
    pub exterior_energy: f64,
}

/// Pairing, boundary functional, and residual series along a trajectory.
#[derive(Clone, Debug)]
pub struct VirialSeries {
    pub records: Vec<VirialRecord>,
    /// `D_t[pairing] + |psi_t|^2 - Omega_R` per snapshot.
    pub residuals: Vec<f64>,
    pub max_residual: f64,
}

pub const VIRIAL_CSV_HEADER: &str = "t,pairing,omega,kinetic,residual";

impl VirialSeries {
    pub fn csv(&self) -> String {
        let mut out = String::from(VIRIAL_CSV_HEADER);
        out.push('\n');
        for (rec, res) in self.records.iter().zip(&self.residuals) {
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                rec.t, rec.pairing, rec.omega, rec.kinetic, res
            ));
        }
        out
    }
}

/// The cutoff must be resolvable where it varies and supported inside the
/// grid: `R >= 10 x (node spacing near R)` and `3R <= r_max`.
fn check_radius(fp: &FieldPair, r_cut: f64) -> Result<()> {
    let grid = fp.grid.as_ref();
    if !(r_cut > 0.0) || 3.0 * r_cut > grid.r_max {
        return Err(WmError::Config(format!(
            "cutoff radius {r_cut} must be positive with 3R <= r_max = {}",
            grid.r_max
        )));
    }
    let nodes = grid.nodes();
    let i = nodes.partition_point(|&r| r < r_cut).min(nodes.len() - 2);
    let spacing = nodes[i + 1] - nodes[i];
    if r_cut < 10.0 * spacing {
        return Err(WmError::Config(format!(
            "cutoff radius {r_cut} is under-resolved: node spacing near R is {spacing:.3e}, need R >= {:.3e}",
            10.0 * spacing
        )));
    }
    Ok(())
}

/// `<psi_t | chi_R r d_r psi>` in `L^2(r dr)`.
pub fn virial_pairing(fp: &FieldPair, r_cut: f64) -> Result<f64> {
    check_radius(fp, r_cut)?;
    let grid = fp.grid.as_ref();
    let dpsi = grid.diff(&fp.psi, DiffOp::D1);
    let nodes = grid.nodes();
    let f: Vec<f64> = (0..grid.len())
        .map(|i| fp.psit[i] * chi_virial(nodes[i] / r_cut) * nodes[i] * dpsi[i])
        .collect();
    Ok(grid.quad(&f, Weight::RDr))
}

/// The two addends of `Omega_R`: the exterior kinetic part
/// `int psi_t^2 (1 - chi_R) r dr` (nonnegative) and the flux part
/// `-(1/2) int (psi_t^2 + psi_r^2 - k^2 sin^2 psi / r^2) (r/R) chi'(r/R) r dr`.
pub fn omega_parts(fp: &FieldPair, r_cut: f64) -> Result<(f64, f64)> {
    check_radius(fp, r_cut)?;
    let grid = fp.grid.as_ref();
    let dpsi = grid.diff(&fp.psi, DiffOp::D1);
    let nodes = grid.nodes();
    let kk = (fp.k * fp.k) as f64;
    let mut kin_part = vec![0.0; grid.len()];
    let mut flux_part = vec![0.0; grid.len()];
    for i in 0..grid.len() {
        let r = nodes[i];
        let x = r / r_cut;
        kin_part[i] = fp.psit[i] * fp.psit[i] * (1.0 - chi_virial(x));
        let s = fp.psi[i].sin();
        let dens = fp.psit[i] * fp.psit[i] + dpsi[i] * dpsi[i] - kk * s * s / (r * r);
        flux_part[i] = -0.5 * dens * x * chi_virial_d1(x);
    }
    Ok((grid.quad(&kin_part, Weight::RDr), grid.quad(&flux_part, Weight::RDr)))
}

/// `Omega_R`, the sum of both addends.
pub fn omega_r(fp: &FieldPair, r_cut: f64) -> Result<f64> {
    let (kin, flux) = omega_parts(fp, r_cut)?;
    Ok(kin + flux)
}

/// Evaluate all cutoff diagnostics of one state.
pub fn virial_record(fp: &FieldPair, t: f64, r_cut: f64) -> Result<VirialRecord> {
    let pairing = virial_pairing(fp, r_cut)?;
    let omega = omega_r(fp, r_cut)?;
    let kin = fp.kinetic_l2();
    let exterior = energy(fp, r_cut, f64::INFINITY)?.value;
    Ok(VirialRecord {
        t,
        r_cut,
        pairing,
        omega,
        kinetic: kin * kin,
        exterior_energy: exterior,
    })
}

/// Residual of `d/dt pairing = -|psi_t|^2 + Omega_R` on the uniformly
/// spaced prefix of a trajectory's snapshots, with the time derivative
/// taken by five-point (fourth-order) finite differences.
pub fn virial_residual(traj: &Trajectory, r_cut: f64) -> Result<VirialSeries> {
    let times = &traj.times;
    let mut m = times.len();
    if m >= 3 {
        let h = times[1] - times[0];
        for i in 2..m {
            if ((times[i] - times[i - 1]) - h).abs() > 1e-9 * h.abs().max(1e-300) {
                m = i;
                break;
            }
        }
    }
    if m < 5 {
        return Err(WmError::Domain(format!(
            "virial residual needs at least 5 uniformly spaced snapshots, found {m}"
        )));
    }
    let mut records = Vec::with_capacity(m);
    for i in 0..m {
        records.push(virial_record(&traj.snapshots[i], times[i], r_cut)?);
    }
    let mut residuals = Vec::with_capacity(m);
    let mut max_residual: f64 = 0.0;
    for i in 0..m {
        let s = i.saturating_sub(2).min(m - 5);
        let ts = &times[s..s + 5];
        let wts = fd_weights(times[i], ts, 1);
        let dpdt: f64 = (0..5).map(|j| wts[1][j] * records[s + j].pairing).sum();
        let r = dpdt + records[i].kinetic - records[i].omega;
        residuals.push(r);
        max_residual = max_residual.max(r.abs());
    }
    Ok(VirialSeries { records, residuals, max_residual })
}
