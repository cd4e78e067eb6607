//! Property battery: randomized invariants of the quadrature, the bubble
//! family closed forms, the distance functional, the evolution engine, the
//! virial pieces, and the reduced system. Deterministic ladder checks that
//! need a fixed geometry (norm blow-up, time symmetry) sit at the bottom as
//! plain tests.

use std::sync::Arc;

use proptest::prelude::*;

use wavemap::{
    bogomolnyi_defect, bubble_distance, energy, gfun, init_state, n4, ode_integrate, omega_parts,
    BubbleFamily, FieldPair, FitMode, InitSpec, OdeState, RadialGrid, Rescale, TimeDirection,
    VirialProfile, Weight,
};
use wavemap::virial::chi_virial_d1;
use wavemap::{chi_virial, DiffOp};

fn arc_grid(g: RadialGrid) -> Arc<RadialGrid> {
    Arc::new(g)
}

/// Hybrid grid matching the analysis default.
fn analysis_grid() -> Arc<RadialGrid> {
    arc_grid(RadialGrid::hybrid(1e-6, 1.0, 60.0, 300, 1200).unwrap())
}

/// Log-space bump exp(-(ln r - ln c)^2 / w^2); smooth, vanishes at both
/// grid ends for every scale used below.
fn log_bump(r: f64, c: f64, w: f64) -> f64 {
    if r <= 0.0 {
        return 0.0;
    }
    let x = (r.ln() - c.ln()) / w;
    (-x * x).exp()
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 64, ..ProptestConfig::default() })]

    /// Composite Gauss quadrature integrates cubics exactly on uniform
    /// segments, both against dr and against r dr.
    #[test]
    fn quadrature_exact_on_cubics(
        a in -10.0..10.0f64,
        b in -10.0..10.0f64,
        c in -10.0..10.0f64,
        d in -10.0..10.0f64,
        cells in 8usize..200,
        span in 0.5..40.0f64,
    ) {
        let g = RadialGrid::uniform(0.0, span, cells).unwrap();
        let f = g.sample(|r| a + r * (b + r * (c + r * d)));
        let exact_dr = span * (a + span * (b / 2.0 + span * (c / 3.0 + span * d / 4.0)));
        let exact_rdr =
            span * span * (a / 2.0 + span * (b / 3.0 + span * (c / 4.0 + span * d / 5.0)));
        let scale = 1.0 + exact_dr.abs() + exact_rdr.abs();
        prop_assert!((g.quad(&f, Weight::Dr) - exact_dr).abs() <= 1e-11 * scale);
        prop_assert!((g.quad(&f, Weight::RDr) - exact_rdr).abs() <= 1e-11 * scale);
    }

    /// The scaling operator that fixes the H norm actually fixes it, over
    /// six decades of scale factor.
    #[test]
    fn h_norm_scale_invariant(
        k in 2u32..=6,
        center in 0.5..2.0f64,
        width in 0.3..1.0f64,
        amp in 0.1..2.0f64,
        loglam in -3.0..3.0f64,
    ) {
        let g = arc_grid(RadialGrid::geometric(1e-7, 1e5, 2400).unwrap());
        let f = g.sample(|r| amp * log_bump(r, center, width));
        let lambda = 10f64.powf(loglam);
        let fl = g.rescale(&f, k, lambda, Rescale::H).unwrap();
        let n0 = g.h_norm(&f, k);
        let n1 = g.h_norm(&fl, k);
        prop_assert!((n1 - n0).abs() <= 1e-5 * n0, "{n0} vs {n1} at lambda {lambda}");
    }

    /// Discrete operator identity: (1 + r d/dr) f = f + r f' node by node.
    #[test]
    fn lam0_is_identity_plus_lam(
        center in 0.2..3.0f64,
        width in 0.3..1.0f64,
        amp in -2.0..2.0f64,
    ) {
        let g = analysis_grid();
        let f = g.sample(|r| amp * log_bump(r, center, width));
        let l0 = g.diff(&f, DiffOp::Lam0);
        let l = g.diff(&f, DiffOp::Lam);
        for i in 0..f.len() {
            let want = f[i] + l[i];
            prop_assert!((l0[i] - want).abs() <= 1e-13 * (1.0 + want.abs()));
        }
    }

    /// Closed forms of the bubble family agree with each other: the profile
    /// solves r Q' = k sin Q, the scaling derivatives are consistent with
    /// the radial derivatives, and the boundary values are pinned.
    #[test]
    fn bubble_closed_forms_consistent(k in 2u32..=8, logr in -4.0..4.0f64) {
        let fam = BubbleFamily::new(k).unwrap();
        let r = 10f64.powf(logr);
        let scale = 1.0 + fam.lam_q(r).abs();
        // r Q' = k sin Q = Lambda Q
        prop_assert!((r * fam.dq(r) - k as f64 * fam.sin_q(r)).abs() <= 1e-12 * scale);
        prop_assert!((r * fam.dq(r) - fam.lam_q(r)).abs() <= 1e-12 * scale);
        // (r d/dr)^2 Q = Lambda Q + r^2 Q'', hence (1 + r d/dr) Lambda Q
        // = 2 Lambda Q + r^2 Q''
        let lhs = fam.lam_q(r) + fam.lam2_q(r);
        let rhs = 2.0 * fam.lam_q(r) + r * r * fam.d2q(r);
        prop_assert!((lhs - rhs).abs() <= 1e-12 * (1.0 + lhs.abs()));
        prop_assert_eq!(fam.q(0.0), 0.0);
        prop_assert!(std::f64::consts::PI - fam.q(1e9) <= 1e-15);
    }

    /// The pointwise nonlinearity factor: value 2k^2/3 at zero, even in its
    /// argument, continuous across the internal series/ratio switch, and
    /// bounded by its value at zero.
    #[test]
    fn nonlinearity_factor_shape(k in 2u32..=6, rho in -50.0..50.0f64) {
        let k2 = (k * k) as f64;
        prop_assert!((n4(k, 0.0) - 2.0 * k2 / 3.0).abs() <= 1e-15 * k2);
        prop_assert_eq!(n4(k, rho), n4(k, -rho));
        let v = n4(k, rho);
        prop_assert!(v >= 0.0 && v <= 2.0 * k2 / 3.0 + 1e-12 * k2);
        // continuity at the switch radius 0.05
        let eps = 1e-9;
        prop_assert!((n4(k, 0.05 - eps) - n4(k, 0.05 + eps)).abs() <= 1e-9 * k2);
    }

    /// Virial cutoff: plateau 1 below the cut, 0 beyond three times the
    /// cut, values in [0, 1], derivative bounded by 1 and consistent with a
    /// finite difference of the plateau function.
    #[test]
    fn virial_cutoff_shape(x in 0.0..5.0f64) {
        let v = chi_virial(x);
        prop_assert!((0.0..=1.0).contains(&v));
        if x <= 1.0 {
            prop_assert_eq!(v, 1.0);
        }
        if x >= 3.0 {
            prop_assert_eq!(v, 0.0);
        }
        let d = chi_virial_d1(x);
        prop_assert!(d.abs() <= 1.0);
        let h = 1e-6;
        let fd = (chi_virial(x + h) - chi_virial(x - h)) / (2.0 * h);
        prop_assert!((fd - d).abs() <= 1e-5);
    }
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 12, ..ProptestConfig::default() })]

    /// The kinetic addend of the localized virial functional is a weighted
    /// integral of a square, hence nonnegative for any state.
    #[test]
    fn virial_kinetic_addend_nonnegative(
        c1 in 0.3..3.0f64,
        c2 in 0.3..3.0f64,
        a1 in -2.0..2.0f64,
        a2 in -2.0..2.0f64,
        r_cut in 0.5..10.0f64,
    ) {
        let g = analysis_grid();
        let fp = FieldPair::from_fn(
            g,
            2,
            |r| a1 * log_bump(r, c1, 0.5),
            |r| a2 * log_bump(r, c2, 0.4),
        )
        .unwrap();
        let (kin, _flux) = omega_parts(&fp, r_cut).unwrap();
        prop_assert!(kin >= 0.0, "kinetic addend {kin}");
    }

    /// Exterior energy is nonincreasing in the truncation radius.
    #[test]
    fn exterior_energy_monotone(
        lambda in 0.3..3.0f64,
        amp in -0.3..0.3f64,
        r1 in 0.5..10.0f64,
        step in 1.1..4.0f64,
    ) {
        let g = analysis_grid();
        let fam = BubbleFamily::new(2).unwrap();
        let fp = FieldPair::from_fn(
            g,
            2,
            |r| fam.q(r / lambda) + amp * log_bump(r, 1.5, 0.5),
            |r| amp * log_bump(r, 1.0, 0.5),
        )
        .unwrap();
        let r2 = r1 * step;
        let e1 = energy(&fp, r1, f64::INFINITY).unwrap().value;
        let e2 = energy(&fp, r2, f64::INFINITY).unwrap().value;
        prop_assert!(e2 <= e1 + 1e-9 * (1.0 + e1.abs()), "E({r1}..) = {e1} < E({r2}..) = {e2}");
    }

    /// Degree-weighted lower bound for the static energy: the energy of any
    /// finite-energy pair dominates the boundary term, with equality only
    /// on the bubble family; the pointwise defect is nonnegative.
    #[test]
    fn energy_dominates_degree_bound(
        k in 2u32..=4,
        lambda in 0.3..3.0f64,
        amp in -0.2..0.2f64,
        vamp in -0.5..0.5f64,
    ) {
        let g = analysis_grid();
        let fam = BubbleFamily::new(k).unwrap();
        let fp = FieldPair::from_fn(
            g,
            k,
            |r| fam.q(r / lambda) + amp * log_bump(r, 2.0, 0.6),
            |r| vamp * log_bump(r, 1.0, 0.5),
        )
        .unwrap();
        let e = energy(&fp, 0.0, f64::INFINITY).unwrap().value;
        let gb = gfun(&fp, f64::INFINITY);
        prop_assert!(e + 1e-6 * e.abs() >= gb, "energy {e} below degree bound {gb}");
        prop_assert!(bogomolnyi_defect(&fp) >= 0.0);
    }

    /// The two-bubble distance is invariant under a joint rescaling of the
    /// input pair (the objective only sees scale ratios).
    #[test]
    fn distance_scale_covariant(
        sigma in 0.005..0.04f64,
        s in 0.5..2.0f64,
    ) {
        let g = analysis_grid();
        let fam = BubbleFamily::new(2).unwrap();
        let base = FieldPair::from_fn(
            Arc::clone(&g),
            2,
            |r| fam.q(r / sigma) - fam.q(r),
            |_| 0.0,
        )
        .unwrap();
        let scaled = FieldPair::from_fn(
            g,
            2,
            |r| fam.q(r / (s * sigma)) - fam.q(r / s),
            |_| 0.0,
        )
        .unwrap();
        let d0 = bubble_distance(&base, FitMode::Plus).unwrap().value;
        let d1 = bubble_distance(&scaled, FitMode::Plus).unwrap().value;
        prop_assert!((d0 - d1).abs() <= 1e-3 * d0 + 1e-12, "d {d0} vs rescaled {d1}");
    }

    /// Sign exclusion: data near the two-bubble configuration of one sign
    /// is far from the configuration of the opposite sign.
    #[test]
    fn opposite_sign_exclusion(
        sigma in 1e-3..0.02f64,
        mu in 0.7..1.4f64,
    ) {
        let g = analysis_grid();
        let fam = BubbleFamily::new(2).unwrap();
        let fp = FieldPair::from_fn(
            g,
            2,
            |r| fam.q(r / (sigma * mu)) - fam.q(r / mu),
            |_| 0.0,
        )
        .unwrap();
        let near = bubble_distance(&fp, FitMode::Plus).unwrap().value;
        let far = bubble_distance(&fp, FitMode::Minus).unwrap().value;
        prop_assert!(near <= 0.01, "same-sign distance {near}");
        prop_assert!(far >= 0.5, "opposite-sign distance {far}");
    }

    /// Along any admissible start the combination xi = b + kappa_1
    /// zeta^{k/2} increases strictly in time.
    #[test]
    fn reduced_system_xi_monotone(
        k in 2u32..=5,
        logz in -3.5..-2.5f64,
        ratio in -0.9..3.0f64,
        mu in 1.0..2.0f64,
    ) {
        let zeta = 10f64.powf(logz);
        let b = ratio * wavemap::kappa1(k).unwrap() * zeta.powf(k as f64 / 2.0);
        let start = OdeState::new(k, zeta, b, mu).unwrap();
        let series = ode_integrate(k, start, 50.0, TimeDirection::Forward).unwrap();
        let xis = series.xis();
        prop_assert!(xis.len() >= 2, "trajectory too short");
        for w in xis.windows(2) {
            prop_assert!(w[1] > w[0], "xi not strictly increasing: {} -> {}", w[0], w[1]);
        }
    }
}

/// Pair norm diverges while the two-bubble distance shrinks as the scale
/// ratio drops: the configuration leaves every bounded set of the energy
/// space even though it approaches the family in the modulation metric.
#[test]
fn norm_blows_up_while_distance_vanishes() {
    let g = analysis_grid();
    let fam = BubbleFamily::new(2).unwrap();
    let mut norms = Vec::new();
    let mut dists = Vec::new();
    for sigma in [1e-2, 1e-3, 1e-4] {
        let fp = FieldPair::from_fn(
            Arc::clone(&g),
            2,
            |r| fam.q(r / sigma) - fam.q(r),
            |_| 0.0,
        )
        .unwrap();
        norms.push(fp.pair_norm().unwrap());
        dists.push(bubble_distance(&fp, FitMode::Plus).unwrap().value);
    }
    assert!(norms[2] > norms[1] && norms[1] > norms[0], "pair norms {norms:?}");
    assert!(dists[2] < dists[1] && dists[1] < dists[0], "distances {dists:?}");
}

/// The virial profile passes its own pointwise checks at double the sweep
/// resolution, and the reported constants are resolution-stable.
#[test]
fn virial_profile_constants_resolution_stable() {
    let p = VirialProfile::new(0.01, 1.0).unwrap();
    let c1 = p.verify(2000).unwrap();
    let c2 = p.verify(4000).unwrap();
    for (a, b) in [(c1.p3, c2.p3), (c1.p4, c2.p4), (c1.p5, c2.p5), (c1.p6, c2.p6)] {
        assert!((a - b).abs() <= 0.05 * (1.0 + a.abs()), "constants moved: {a} vs {b}");
    }
}

/// Evolution diagnostics: boundary classes are conserved and the velocity
/// term never exceeds its energy allowance, on a generic excited state and
/// on a two-bubble state.
#[test]
fn evolution_respects_class_and_velocity_bound() {
    let psi = |r: f64| 0.6 * r * r * (-(r - 1.2) * (r - 1.2)).exp();
    let psit = |r: f64| 0.4 * r * r * (-r * r).exp();
    let bump = InitSpec::Custom { psi: &psi, psit: &psit, support: 7.0 };
    let pair = InitSpec::TwoBubble { iota: 1, lambda: 0.3, mu: 1.0, lambda_dot: 0.0, mu_dot: 0.0 };
    let single = InitSpec::SingleBubble { lambda: 0.8 };
    for (k, spec) in [(2u32, bump), (2, pair), (3, single)] {
        let state = init_state(k, &spec, 1.0 / 48.0, 14.0, 1.0, 0.4).unwrap();
        let traj = state.evolve(1.0, 0.25, false).unwrap();
        for row in &traj.diagnostics {
            assert!(row.class_ok, "boundary class changed at t = {}", row.t);
            assert!(
                row.kinetic <= 2.0 * row.energy / std::f64::consts::PI,
                "velocity bound violated at t = {}: {} vs energy {}",
                row.t,
                row.kinetic,
                row.energy
            );
        }
    }
}

/// Time reversibility: evolving forward, negating the velocity, and
/// evolving the same span again returns the initial profile with negated
/// velocity, up to ten times the one-way discretization error.
#[test]
fn evolution_time_symmetric() {
    let psi0 = |r: f64| 0.5 * r * r * (-(r - 1.0) * (r - 1.0)).exp();
    let psit0 = |r: f64| 0.3 * r * r * (-r * r).exp();
    let spec = InitSpec::Custom { psi: &psi0, psit: &psit0, support: 7.0 };
    let t = 0.5;
    let out = arc_grid(RadialGrid::uniform(0.0, 8.0, 320).unwrap());
    let sup =
        |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0f64, f64::max);

    // march a state by an exact number of fixed-size steps
    let march = |dr: f64, steps: usize| {
        let mut s = init_state(2, &spec, dr, 11.0, 2.0 * t + 0.1, 0.4).unwrap();
        assert!((s.dt() * (steps as f64) - t).abs() < 1e-12, "step count must land on t");
        for _ in 0..steps {
            s = s.step();
        }
        s
    };

    // one-way error from a resolution halving (dt = cfl dr, so doubling the
    // step count at half the spacing lands on the same time)
    let coarse = march(1.0 / 32.0, 40).field_on(&out).unwrap();
    let fine = march(1.0 / 64.0, 80).field_on(&out).unwrap();
    let one_way = sup(&coarse.psi, &fine.psi).max(sup(&coarse.psit, &fine.psit)).max(1e-12);

    // round trip at the coarse resolution
    let mut s = march(1.0 / 32.0, 40).reversed();
    for _ in 0..40 {
        s = s.step();
    }
    let got = s.field_on(&out).unwrap();
    let want_psi = out.sample(psi0);
    let want_psit: Vec<f64> = out.sample(psit0).iter().map(|v| -v).collect();

    let defect = sup(&got.psi, &want_psi).max(sup(&got.psit, &want_psit));
    assert!(
        defect <= 10.0 * one_way,
        "round-trip defect {defect} exceeds 10x one-way error {one_way}"
    );
}
