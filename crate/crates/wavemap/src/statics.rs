//! Closed-form static profiles and fixed auxiliary objects: the bubble
//! family Q = 2 arctan(r^k) with its Lambda-derivatives, the compactly
//! supported cutoff Z used for modulation orthogonality, the virial weight
//! profile q with its certified pointwise bounds, the transport operators
//! A(lambda) and A0(lambda) built from q, and the linearized operator
//! around the bubble with its first-order factorization.

use std::f64::consts::PI;

use crate::error::{Result, WmError};
use crate::grid::{DiffOp, RadialGrid};
use crate::util::{fmt_g17, smoothstep, smoothstep_d1, smoothstep_d2, smoothstep_d3};

/// Derivative order selector for [`BubbleFamily::eval`]: `(r d/dr)^n Q`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BubbleOrder {
    Q,
    LamQ,
    Lam2Q,
    Lam3Q,
}

/// The k-equivariant harmonic-map profile `Q(r) = 2 arctan(r^k)` and its
/// scaling derivatives, all evaluated in closed form.
#[derive(Clone, Copy, Debug)]
pub struct BubbleFamily {
    pub k: u32,
}

impl BubbleFamily {
    pub fn new(k: u32) -> Result<Self> {
        if k < 2 {
            return Err(WmError::Config(format!(
                "equivariance degree must be at least 2, got {k}"
            )));
        }
        Ok(BubbleFamily { k })
    }

    #[inline]
    fn s(&self, r: f64) -> f64 {
        r.powi(self.k as i32)
    }

    /// Q(r) = 2 arctan(r^k); Q(0) = 0, Q(r) -> pi.
    #[inline]
    pub fn q(&self, r: f64) -> f64 {
        2.0 * self.s(r).atan()
    }

    /// Lambda Q = r Q' = k sin Q = 2 k r^k / (1 + r^2k).
    #[inline]
    pub fn lam_q(&self, r: f64) -> f64 {
        let s = self.s(r);
        2.0 * self.k as f64 * s / (1.0 + s * s)
    }

    /// Lambda^2 Q = (k^2/2) sin 2Q = 2 k^2 r^k (1 - r^2k) / (1 + r^2k)^2.
    #[inline]
    pub fn lam2_q(&self, r: f64) -> f64 {
        let s = self.s(r);
        let d = 1.0 + s * s;
        2.0 * (self.k as f64).powi(2) * s * (1.0 - s * s) / (d * d)
    }

    /// Lambda^3 Q = k^2 cos(2Q) Lambda Q
    ///            = 2 k^3 r^k (1 - 6 r^2k + r^4k) / (1 + r^2k)^3.
    #[inline]
    pub fn lam3_q(&self, r: f64) -> f64 {
        let s = self.s(r);
        let s2 = s * s;
        let d = 1.0 + s2;
        2.0 * (self.k as f64).powi(3) * s * (1.0 - 6.0 * s2 + s2 * s2) / (d * d * d)
    }

    /// Q'(r) = Lambda Q / r = 2 k r^(k-1) / (1 + r^2k); finite at 0 for k >= 2.
    #[inline]
    pub fn dq(&self, r: f64) -> f64 {
        let s = self.s(r);
        2.0 * self.k as f64 * r.powi(self.k as i32 - 1) / (1.0 + s * s)
    }

    /// Q''(r) = 2 k r^(k-2) ((k-1) - (k+1) r^2k) / (1 + r^2k)^2.
    #[inline]
    pub fn d2q(&self, r: f64) -> f64 {
        let kf = self.k as f64;
        let s = self.s(r);
        let d = 1.0 + s * s;
        2.0 * kf * r.powi(self.k as i32 - 2) * ((kf - 1.0) - (kf + 1.0) * s * s) / (d * d)
    }

    /// sin Q = 2 r^k / (1 + r^2k), exact rational form.
    #[inline]
    pub fn sin_q(&self, r: f64) -> f64 {
        let s = self.s(r);
        2.0 * s / (1.0 + s * s)
    }

    /// cos Q = (1 - r^2k) / (1 + r^2k), exact rational form.
    #[inline]
    pub fn cos_q(&self, r: f64) -> f64 {
        let s2 = self.s(r).powi(2);
        (1.0 - s2) / (1.0 + s2)
    }

    /// Evaluate `(r d/dr)^n Q` at radius `r / lambda`-scale: the H-type
    /// rescaling of the chosen profile. All orders vanish at r = 0.
    pub fn eval(&self, order: BubbleOrder, lambda: f64, r: f64) -> f64 {
        let s = r / lambda;
        match order {
            BubbleOrder::Q => self.q(s),
            BubbleOrder::LamQ => self.lam_q(s),
            BubbleOrder::Lam2Q => self.lam2_q(s),
            BubbleOrder::Lam3Q => self.lam3_q(s),
        }
    }

    /// `kappa = |Lambda Q|^2 in L^2(r dr) = 2 pi / sin(pi / k)`.
    pub fn kappa(&self) -> f64 {
        2.0 * PI / (PI / self.k as f64).sin()
    }

    /// Energy of the static bubble, `4 pi k`.
    pub fn energy(&self) -> f64 {
        4.0 * PI * self.k as f64
    }
}

/// Cutoff profile `Z = chi_B Lambda Q`: equal to `Lambda Q` on `[0, B]`,
/// smoothly cut to zero on `[B, 2B]`. Carries `beta = <Z | Lambda Q>`.
#[derive(Clone, Debug)]
pub struct CutoffZ {
    pub family: BubbleFamily,
    pub b: f64,
    pub beta: f64,
}

impl CutoffZ {
    pub fn new(family: BubbleFamily, b: f64) -> Result<Self> {
        if !(b >= 1.0) || !b.is_finite() {
            return Err(WmError::Config(format!("cutoff radius must be >= 1, got {b}")));
        }
        let mut z = CutoffZ { family, b, beta: 0.0 };
        // beta on a dedicated grid: the integrand is supported in [0, 2B]
        let cells = ((2.0 * b - 1.0) / 0.02).ceil() as usize;
        let g = RadialGrid::hybrid(1e-6, 1.0, 2.0 * b, 240, cells.max(64))?;
        let f = g.sample(|r| z.z(r) * family.lam_q(r));
        z.beta = g.quad(&f, crate::grid::Weight::RDr);
        Ok(z)
    }

    /// The bump chi: 1 on [0, B], quintic-smoothstep down to 0 on [B, 2B].
    #[inline]
    pub fn chi(&self, r: f64) -> f64 {
        1.0 - smoothstep((r - self.b) / self.b)
    }

    #[inline]
    fn dchi(&self, r: f64) -> f64 {
        -smoothstep_d1((r - self.b) / self.b) / self.b
    }

    /// Z(r) = chi(r) Lambda Q(r).
    #[inline]
    pub fn z(&self, r: f64) -> f64 {
        if r >= 2.0 * self.b {
            0.0
        } else {
            self.chi(r) * self.family.lam_q(r)
        }
    }

    /// Z'(r) = chi' Lambda Q + chi Lambda^2 Q / r.
    #[inline]
    pub fn dz(&self, r: f64) -> f64 {
        if r >= 2.0 * self.b {
            0.0
        } else {
            self.dchi(r) * self.family.lam_q(r) + self.chi(r) * self.family.lam2_q(r) / r
        }
    }

    /// Lambda_0 Z = Z + r Z'.
    #[inline]
    pub fn lam0_z(&self, r: f64) -> f64 {
        self.z(r) + r * self.dz(r)
    }

    /// Samples of the L^2-type rescaling `Z_ulambda = Z(./lambda) / lambda`.
    pub fn z_scaled_l2(&self, grid: &RadialGrid, lambda: f64) -> Vec<f64> {
        grid.sample(|r| self.z(r / lambda) / lambda)
    }

    /// Samples of `[Lambda_0 Z]_ulambda`.
    pub fn lam0_z_scaled_l2(&self, grid: &RadialGrid, lambda: f64) -> Vec<f64> {
        grid.sample(|r| self.lam0_z(r / lambda) / lambda)
    }
}

/// Achieved pointwise constants of a constructed virial profile.
#[derive(Clone, Copy, Debug)]
pub struct VirialConstants {
    /// max(|q'| / r, |q''|)
    pub p3: f64,
    /// max(0, -min q'', -min q'/r); must be <= c
    pub p4: f64,
    /// max r^2 |Laplacian^2 q|; must be <= c
    pub p5: f64,
    /// max |r (q'/r)'|; must be <= c
    pub p6: f64,
}

impl VirialConstants {
    fn worst(&self) -> f64 {
        self.p4.max(self.p5).max(self.p6)
    }
}

/// Virial weight `q` with `q = r^2/2` on `[0, R]`, constant beyond
/// `R_tilde = R e^L`, and a quintic-smoothstep plateau in log r between.
/// The log-radial transition makes the scale-invariant bounds P4-P6 scale
/// like 1/L, so any target c down to the length cap is achievable.
#[derive(Clone, Debug)]
pub struct VirialProfile {
    pub c: f64,
    pub r_inner: f64,
    pub r_tilde: f64,
    pub log_width: f64,
    pub achieved: VirialConstants,
    q_total: f64,
    q_cum_x: Vec<f64>,
    q_cum: Vec<f64>,
}

const L_MAX: f64 = 300.0;

impl VirialProfile {
    pub fn new(c: f64, r_inner: f64) -> Result<Self> {
        if !(c > 0.0 && c < 1.0) {
            return Err(WmError::Config(format!("virial smallness must lie in (0,1), got {c}")));
        }
        if !(r_inner >= 1.0) || !r_inner.is_finite() {
            return Err(WmError::Config(format!(
                "virial plateau radius must be >= 1, got {r_inner}"
            )));
        }
        // grow the log-width until every scale-invariant bound clears 0.8 c
        let mut l = (3.0 / c).min(L_MAX);
        let mut ach = Self::constants_for(l);
        while ach.worst() > 0.8 * c && l < L_MAX {
            l = (2.0 * l).min(L_MAX);
            ach = Self::constants_for(l);
        }
        if ach.worst() > c {
            let best = Self::constants_for(L_MAX).worst();
            return Err(WmError::Config(format!(
                "virial target c = {c} unachievable within the length cap; best achievable c = {best:.3e}"
            )));
        }
        let mut vp = VirialProfile {
            c,
            r_inner,
            r_tilde: r_inner * l.exp(),
            log_width: l,
            achieved: ach,
            q_total: 0.0,
            q_cum_x: Vec::new(),
            q_cum: Vec::new(),
        };
        vp.build_cumulative();
        Ok(vp)
    }

    /// Scale-invariant maxima over the transition for log-width `l`,
    /// computed by a dense sweep of the smoothstep derivatives.
    fn constants_for(l: f64) -> VirialConstants {
        let n = 4001;
        let mut max_qpp: f64 = 1.0; // the plateau value on [0, R]
        let mut min_qpp: f64 = 0.0;
        let mut p5: f64 = 0.0;
        let mut p6: f64 = 0.0;
        for i in 0..=n {
            let x = i as f64 / n as f64;
            let p = 1.0 - smoothstep(x);
            let qpp = p - smoothstep_d1(x) / l;
            max_qpp = max_qpp.max(qpp.abs());
            min_qpp = min_qpp.min(qpp);
            p5 = p5.max((2.0 * smoothstep_d2(x) / (l * l) + smoothstep_d3(x) / (l * l * l)).abs());
            p6 = p6.max(smoothstep_d1(x) / l);
        }
        VirialConstants { p3: max_qpp, p4: (-min_qpp).max(0.0), p5, p6 }
    }

    #[inline]
    fn x_of(&self, r: f64) -> f64 {
        (r / self.r_inner).ln() / self.log_width
    }

    /// q'(r) / r: 1 on the plateau, decaying smoothstep profile beyond.
    #[inline]
    pub fn p(&self, r: f64) -> f64 {
        if r <= self.r_inner {
            1.0
        } else if r >= self.r_tilde {
            0.0
        } else {
            1.0 - smoothstep(self.x_of(r))
        }
    }

    #[inline]
    pub fn dq(&self, r: f64) -> f64 {
        r * self.p(r)
    }

    #[inline]
    pub fn d2q(&self, r: f64) -> f64 {
        if r <= self.r_inner {
            1.0
        } else if r >= self.r_tilde {
            0.0
        } else {
            let x = self.x_of(r);
            1.0 - smoothstep(x) - smoothstep_d1(x) / self.log_width
        }
    }

    /// r (q'/r)' = r p'(r).
    #[inline]
    pub fn rp_prime(&self, r: f64) -> f64 {
        if r <= self.r_inner || r >= self.r_tilde {
            0.0
        } else {
            -smoothstep_d1(self.x_of(r)) / self.log_width
        }
    }

    /// Bi-Laplacian (2-d radial) of q.
    #[inline]
    pub fn bilap(&self, r: f64) -> f64 {
        if r <= self.r_inner || r >= self.r_tilde {
            0.0
        } else {
            let x = self.x_of(r);
            let l = self.log_width;
            -(2.0 * smoothstep_d2(x) / (l * l) + smoothstep_d3(x) / (l * l * l)) / (r * r)
        }
    }

    fn build_cumulative(&mut self) {
        // q(r) = R^2/2 + integral of s p(s) ds over [R, r]; in x = ln(s/R)/L
        // the integrand is L R^2 e^(2 L x) p(x), accumulated per interval
        // with 4-point Gauss. L is capped so e^(2L) stays representable.
        let n = 2000usize;
        let l = self.log_width;
        let r2 = self.r_inner * self.r_inner;
        let mut xs = Vec::with_capacity(n + 1);
        let mut cum = Vec::with_capacity(n + 1);
        let mut acc = 0.0;
        xs.push(0.0);
        cum.push(0.0);
        for i in 0..n {
            let x0 = i as f64 / n as f64;
            let x1 = (i + 1) as f64 / n as f64;
            let mid = 0.5 * (x0 + x1);
            let half = 0.5 * (x1 - x0);
            let mut s = 0.0;
            for j in 0..4 {
                let x = mid + half * crate::util::GAUSS4_X[j];
                s += half
                    * crate::util::GAUSS4_W[j]
                    * (l * r2 * (2.0 * l * x).exp() * (1.0 - smoothstep(x)));
            }
            acc += s;
            xs.push(x1);
            cum.push(acc);
        }
        self.q_total = 0.5 * r2 + acc;
        self.q_cum_x = xs;
        self.q_cum = cum;
    }

    /// q(r): exact parabola on the plateau, accumulated transition beyond.
    pub fn q(&self, r: f64) -> f64 {
        if r <= self.r_inner {
            0.5 * r * r
        } else if r >= self.r_tilde {
            self.q_total
        } else {
            let x = self.x_of(r);
            let n = self.q_cum_x.len() - 1;
            let j = ((x * n as f64) as usize).min(n - 1);
            // one Gauss panel from the table point to x
            let (x0, base) = (self.q_cum_x[j], self.q_cum[j]);
            let mid = 0.5 * (x0 + x);
            let half = 0.5 * (x - x0);
            let l = self.log_width;
            let r2 = self.r_inner * self.r_inner;
            let mut s = 0.0;
            for jj in 0..4 {
                let xx = mid + half * crate::util::GAUSS4_X[jj];
                s += half
                    * crate::util::GAUSS4_W[jj]
                    * (l * r2 * (2.0 * l * xx).exp() * (1.0 - smoothstep(xx)));
            }
            0.5 * r2 + base + s
        }
    }

    /// Re-verify the pointwise bounds P1-P6 by an independent sweep of `n`
    /// log-spaced radii (q'' cross-checked against a finite difference of
    /// q'). Returns the achieved constants.
    pub fn verify(&self, n: usize) -> Result<VirialConstants> {
        let lo = (self.r_inner / 4.0).ln();
        let hi = (self.r_tilde * 1.1).ln();
        let mut k = VirialConstants { p3: 0.0, p4: 0.0, p5: 0.0, p6: 0.0 };
        for i in 0..=n {
            let r = (lo + (hi - lo) * i as f64 / n as f64).exp();
            let (dq, d2q) = (self.dq(r), self.d2q(r));
            // P1 / P2 spot checks
            if r <= self.r_inner && (self.q(r) - 0.5 * r * r).abs() > 1e-12 * r * r {
                return Err(WmError::Numerical("virial plateau violates q = r^2/2".into()));
            }
            if r >= self.r_tilde && dq != 0.0 {
                return Err(WmError::Numerical("virial profile not constant beyond R~".into()));
            }
            let h = r * 1e-6;
            let fd2 = (self.dq(r + h) - self.dq(r - h)) / (2.0 * h);
            if (fd2 - d2q).abs() > 1e-4 * (1.0 + d2q.abs()) {
                return Err(WmError::Numerical(format!(
                    "virial q'' inconsistent with finite difference at r = {r}"
                )));
            }
            k.p3 = k.p3.max((dq / r).abs()).max(d2q.abs());
            k.p4 = k.p4.max(-d2q).max(-dq / r);
            k.p5 = k.p5.max(r * r * self.bilap(r).abs());
            k.p6 = k.p6.max(self.rp_prime(r).abs());
        }
        Ok(k)
    }

    /// `[A(lambda) g](r) = q'(r/lambda) g'(r)`.
    pub fn apply_a(&self, grid: &RadialGrid, g: &[f64], lambda: f64) -> Result<Vec<f64>> {
        self.check_resolved(grid, lambda)?;
        let dg = grid.diff(g, DiffOp::D1);
        Ok(grid
            .nodes()
            .iter()
            .zip(&dg)
            .map(|(&r, &d)| self.dq(r / lambda) * d)
            .collect())
    }

    /// `[A0(lambda) g](r) = (q''(r/lambda)/(2 lambda) + q'(r/lambda)/(2r)) g
    ///  + q'(r/lambda) g'(r)`; antisymmetric in the `r dr` pairing.
    pub fn apply_a0(&self, grid: &RadialGrid, g: &[f64], lambda: f64) -> Result<Vec<f64>> {
        self.check_resolved(grid, lambda)?;
        let dg = grid.diff(g, DiffOp::D1);
        Ok(grid
            .nodes()
            .iter()
            .enumerate()
            .map(|(i, &r)| {
                let s = r / lambda;
                (0.5 * self.d2q(s) / lambda + 0.5 * self.dq(s) / r) * g[i] + self.dq(s) * dg[i]
            })
            .collect())
    }

    fn check_resolved(&self, grid: &RadialGrid, lambda: f64) -> Result<()> {
        if !(lambda > 0.0) {
            return Err(WmError::Config(format!("operator scale must be positive, got {lambda}")));
        }
        let cut = self.r_tilde * lambda;
        let below = grid.nodes().iter().take_while(|&&r| r < cut).count();
        if below < 32 {
            return Err(WmError::Resolution(format!(
                "grid has only {below} nodes below R~ lambda = {cut:.3e}"
            )));
        }
        Ok(())
    }

    /// Three-column table `r q' q''` with the achieved constants in the
    /// header; radii log-spaced across plateau, transition, and tail.
    pub fn to_text(&self, rows: usize) -> String {
        let mut s = format!(
            "# virial-profile c={} R={} R_tilde={} P3={} P4={} P5={} P6={}\n",
            fmt_g17(self.c),
            fmt_g17(self.r_inner),
            fmt_g17(self.r_tilde),
            fmt_g17(self.achieved.p3),
            fmt_g17(self.achieved.p4),
            fmt_g17(self.achieved.p5),
            fmt_g17(self.achieved.p6)
        );
        let lo = (self.r_inner / 10.0).ln();
        let hi = (self.r_tilde * 1.5).ln();
        for i in 0..rows {
            let r = (lo + (hi - lo) * i as f64 / (rows - 1) as f64).exp();
            s.push_str(&format!("{} {} {}\n", fmt_g17(r), fmt_g17(self.dq(r)), fmt_g17(self.d2q(r))));
        }
        s
    }
}

/// Linearized operator around the `lambda`-scale bubble:
/// `L g = -g'' - g'/r + k^2 cos(2 Q_lambda) g / r^2`.
pub fn linearized(
    grid: &RadialGrid,
    family: &BubbleFamily,
    lambda: f64,
    g: &[f64],
) -> Vec<f64> {
    let lap = grid.diff(g, DiffOp::Lap2);
    let k2 = (family.k as f64).powi(2);
    grid.nodes()
        .iter()
        .enumerate()
        .map(|(i, &r)| {
            let cq = family.cos_q(r / lambda);
            let cos2q = 2.0 * cq * cq - 1.0;
            -lap[i] + k2 * cos2q * g[i] / (r * r)
        })
        .collect()
}

/// First-order factor `A g = -g' + k cos(Q_lambda) g / r`; `A(Lambda Q) = 0`
/// and `<L g | g> = |A g|^2` in `L^2(r dr)`.
pub fn factor_a(grid: &RadialGrid, family: &BubbleFamily, lambda: f64, g: &[f64]) -> Vec<f64> {
    let dg = grid.diff(g, DiffOp::D1);
    grid.nodes()
        .iter()
        .enumerate()
        .map(|(i, &r)| -dg[i] + family.k as f64 * family.cos_q(r / lambda) * g[i] / r)
        .collect()
}
