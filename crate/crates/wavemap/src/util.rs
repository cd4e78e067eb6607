//! Small numerical building blocks: finite-difference weights on arbitrary
//! nodes, Gauss-Legendre constants, monotone cubic interpolation, line fits,
//! smoothstep profiles, and output formatting.

/// 4-point Gauss-Legendre nodes on [-1, 1].
pub const GAUSS4_X: [f64; 4] = [
    -0.861_136_311_594_052_6,
    -0.339_981_043_584_856_3,
    0.339_981_043_584_856_3,
    0.861_136_311_594_052_6,
];

/// 4-point Gauss-Legendre weights on [-1, 1].
pub const GAUSS4_W: [f64; 4] = [
    0.347_854_845_137_453_86,
    0.652_145_154_862_546_1,
    0.652_145_154_862_546_1,
    0.347_854_845_137_453_86,
];

/// Finite-difference weights on arbitrary nodes (Fornberg's recursion).
///
/// Returns `c[d][i]`: the weight of the sample at `x[i]` in the order-`d`
/// derivative at `x0`, for every `d <= m`. Exact for polynomials of degree
/// `x.len() - 1`.
pub fn fd_weights(x0: f64, x: &[f64], m: usize) -> Vec<Vec<f64>> {
    let n = x.len();
    assert!(n > m, "need more nodes than the derivative order");
    let mut c = vec![vec![0.0; n]; m + 1];
    let mut c1 = 1.0;
    let mut c4 = x[0] - x0;
    c[0][0] = 1.0;
    for i in 1..n {
        let mn = i.min(m);
        let mut c2 = 1.0;
        let c5 = c4;
        c4 = x[i] - x0;
        for j in 0..i {
            let c3 = x[i] - x[j];
            c2 *= c3;
            if j == i - 1 {
                for d in (1..=mn).rev() {
                    c[d][i] = c1 * (d as f64 * c[d - 1][i - 1] - c5 * c[d][i - 1]) / c2;
                }
                c[0][i] = -c1 * c5 * c[0][i - 1] / c2;
            }
            for d in (1..=mn).rev() {
                c[d][j] = (c4 * c[d][j] - d as f64 * c[d - 1][j]) / c3;
            }
            c[0][j] = c4 * c[0][j] / c3;
        }
        c1 = c2;
    }
    c
}

/// Monotone cubic interpolant (Fritsch-Carlson slopes, Hermite evaluation).
/// Does not overshoot monotone data; C^1 everywhere.
pub struct Pchip {
    x: Vec<f64>,
    y: Vec<f64>,
    m: Vec<f64>,
}

impl Pchip {
    pub fn new(x: &[f64], y: &[f64]) -> Self {
        assert_eq!(x.len(), y.len());
        assert!(x.len() >= 3);
        let n = x.len();
        let h: Vec<f64> = (0..n - 1).map(|i| x[i + 1] - x[i]).collect();
        let d: Vec<f64> = (0..n - 1).map(|i| (y[i + 1] - y[i]) / h[i]).collect();
        let mut m = vec![0.0; n];
        for i in 1..n - 1 {
            if d[i - 1] * d[i] <= 0.0 {
                m[i] = 0.0;
            } else {
                let w1 = 2.0 * h[i] + h[i - 1];
                let w2 = h[i] + 2.0 * h[i - 1];
                m[i] = (w1 + w2) / (w1 / d[i - 1] + w2 / d[i]);
            }
        }
        m[0] = edge_slope(h[0], h[1], d[0], d[1]);
        m[n - 1] = edge_slope(h[n - 2], h[n - 3], d[n - 2], d[n - 3]);
        Pchip { x: x.to_vec(), y: y.to_vec(), m }
    }

    /// Like [`Pchip::new`] but with 4th-order slope estimates (5-node
    /// Fornberg stencils) passed through a monotonicity filter: slopes are
    /// zeroed at secant sign changes and clamped to three times the smaller
    /// neighbouring secant. Keeps monotone data monotone while staying
    /// 4th-order accurate on smooth stretches.
    pub fn new_accurate(x: &[f64], y: &[f64]) -> Self {
        assert_eq!(x.len(), y.len());
        let n = x.len();
        if n < 5 {
            return Pchip::new(x, y);
        }
        let d: Vec<f64> = (0..n - 1).map(|i| (y[i + 1] - y[i]) / (x[i + 1] - x[i])).collect();
        let mut m = vec![0.0; n];
        for i in 0..n {
            let s = i.saturating_sub(2).min(n - 5);
            let c = fd_weights(x[i], &x[s..s + 5], 1);
            m[i] = (0..5).map(|j| c[1][j] * y[s + j]).sum();
            let dl = d[if i == 0 { 0 } else { i - 1 }];
            let dr = d[if i == n - 1 { n - 2 } else { i }];
            if dl * dr <= 0.0 && i > 0 && i < n - 1 {
                m[i] = 0.0;
            } else {
                let s = if (dl + dr) >= 0.0 { 1.0 } else { -1.0 };
                let cap = 3.0 * dl.abs().min(dr.abs());
                m[i] = s * (s * m[i]).clamp(0.0, cap);
            }
        }
        Pchip { x: x.to_vec(), y: y.to_vec(), m }
    }

    /// Evaluate at `t`; clamps to the boundary cubics outside the data range.
    pub fn eval(&self, t: f64) -> f64 {
        let n = self.x.len();
        if t <= self.x[0] {
            return self.y[0] + self.m[0] * (t - self.x[0]);
        }
        if t >= self.x[n - 1] {
            return self.y[n - 1] + self.m[n - 1] * (t - self.x[n - 1]);
        }
        let mut lo = 0usize;
        let mut hi = n - 1;
        while hi - lo > 1 {
            let mid = (lo + hi) / 2;
            if self.x[mid] <= t {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        let h = self.x[lo + 1] - self.x[lo];
        let s = (t - self.x[lo]) / h;
        let (s2, s3) = (s * s, s * s * s);
        let h00 = 2.0 * s3 - 3.0 * s2 + 1.0;
        let h10 = s3 - 2.0 * s2 + s;
        let h01 = -2.0 * s3 + 3.0 * s2;
        let h11 = s3 - s2;
        h00 * self.y[lo] + h10 * h * self.m[lo] + h01 * self.y[lo + 1] + h11 * h * self.m[lo + 1]
    }
}

fn edge_slope(h0: f64, h1: f64, d0: f64, d1: f64) -> f64 {
    // Shape-preserving three-point estimate for the boundary slope.
    let s = ((2.0 * h0 + h1) * d0 - h0 * d1) / (h0 + h1);
    if s * d0 <= 0.0 {
        0.0
    } else if d0 * d1 < 0.0 && s.abs() > 3.0 * d0.abs() {
        3.0 * d0
    } else {
        s
    }
}

/// Least-squares straight line `y = a + b x`; returns `(a, b)`.
pub fn line_fit(x: &[f64], y: &[f64]) -> (f64, f64) {
    assert_eq!(x.len(), y.len());
    let n = x.len() as f64;
    let sx: f64 = x.iter().sum();
    let sy: f64 = y.iter().sum();
    let sxx: f64 = x.iter().map(|v| v * v).sum();
    let sxy: f64 = x.iter().zip(y).map(|(u, v)| u * v).sum();
    let det = n * sxx - sx * sx;
    let b = (n * sxy - sx * sy) / det;
    let a = (sy - b * sx) / n;
    (a, b)
}

/// Quintic smoothstep: 0 at t<=0, 1 at t>=1, C^2 across both ends.
pub fn smoothstep(t: f64) -> f64 {
    if t <= 0.0 {
        0.0
    } else if t >= 1.0 {
        1.0
    } else {
        t * t * t * (10.0 + t * (-15.0 + 6.0 * t))
    }
}

/// First derivative of [`smoothstep`].
pub fn smoothstep_d1(t: f64) -> f64 {
    if t <= 0.0 || t >= 1.0 {
        0.0
    } else {
        30.0 * t * t * (1.0 - t) * (1.0 - t)
    }
}

/// Second derivative of [`smoothstep`].
pub fn smoothstep_d2(t: f64) -> f64 {
    if t <= 0.0 || t >= 1.0 {
        0.0
    } else {
        60.0 * t * (1.0 - t) * (1.0 - 2.0 * t)
    }
}

/// Third derivative of [`smoothstep`].
pub fn smoothstep_d3(t: f64) -> f64 {
    if t <= 0.0 || t >= 1.0 {
        0.0
    } else {
        60.0 * (1.0 - 6.0 * t + 6.0 * t * t)
    }
}

/// FNV-1a hash of a byte stream; used for grid checksums in manifests.
pub fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Format with 17 significant digits (round-trip exact for f64).
pub fn fmt_g17(x: f64) -> String {
    format!("{x:.16e}")
}

/// Bisection for a root of `f` on [a, b]; `f(a)` and `f(b)` must bracket.
pub fn bisect<F: Fn(f64) -> f64>(f: F, mut a: f64, mut b: f64, tol: f64, max_iter: usize) -> f64 {
    let mut fa = f(a);
    for _ in 0..max_iter {
        let mid = 0.5 * (a + b);
        if b - a < tol {
            return mid;
        }
        let fm = f(mid);
        if fa * fm <= 0.0 {
            b = mid;
        } else {
            a = mid;
            fa = fm;
        }
    }
    0.5 * (a + b)
}

/// Symmetric tridiagonal matrix: diagonal `d` and subdiagonal `e`.
#[derive(Clone, Debug)]
pub struct TriSym {
    pub d: Vec<f64>,
    pub e: Vec<f64>,
}

impl TriSym {
    pub fn zeros(n: usize) -> Self {
        TriSym { d: vec![0.0; n], e: vec![0.0; n.saturating_sub(1)] }
    }

    /// Add `v` at `(i, j)` (and symmetrically); `|i - j|` must be <= 1.
    pub fn add(&mut self, i: usize, j: usize, v: f64) {
        if i == j {
            self.d[i] += v;
        } else {
            let lo = i.min(j);
            assert!(i.abs_diff(j) == 1, "entry ({i}, {j}) outside the tridiagonal band");
            self.e[lo] += v;
        }
    }

    pub fn mul(&self, x: &[f64]) -> Vec<f64> {
        let n = self.d.len();
        let mut y = vec![0.0; n];
        for i in 0..n {
            let mut s = self.d[i] * x[i];
            if i > 0 {
                s += self.e[i - 1] * x[i - 1];
            }
            if i + 1 < n {
                s += self.e[i] * x[i + 1];
            }
            y[i] = s;
        }
        y
    }
}

/// `L D L^T` factorization of the shifted pencil `T - tau S`, without
/// pivoting; vanishing pivots are replaced by a signed tiny value so the
/// factorization always completes. `neg` counts negative pivots, which by
/// Sylvester's law equals the number of generalized eigenvalues of
/// `(T, S)` below `tau` when `S` is positive definite.
pub struct TriFactor {
    dd: Vec<f64>,
    l: Vec<f64>,
    pub neg: usize,
}

pub fn tri_factor(t: &TriSym, s: &TriSym, tau: f64) -> TriFactor {
    let n = t.d.len();
    let scale = t
        .d
        .iter()
        .zip(&s.d)
        .map(|(a, b)| (a - tau * b).abs())
        .fold(f64::MIN_POSITIVE, f64::max);
    let floor = 1e-300_f64.max(scale * 1e-290);
    let mut dd = vec![0.0; n];
    let mut l = vec![0.0; n.saturating_sub(1)];
    let mut neg = 0;
    for i in 0..n {
        let mut piv = t.d[i] - tau * s.d[i];
        if i > 0 {
            piv -= l[i - 1] * l[i - 1] * dd[i - 1];
        }
        if piv < 0.0 {
            neg += 1;
        }
        if piv.abs() < floor {
            piv = if piv < 0.0 { -floor } else { floor };
        }
        dd[i] = piv;
        if i + 1 < n {
            l[i] = (t.e[i] - tau * s.e[i]) / piv;
        }
    }
    TriFactor { dd, l, neg }
}

impl TriFactor {
    /// Solve `(T - tau S) x = rhs` from the stored factors.
    pub fn solve(&self, rhs: &[f64]) -> Vec<f64> {
        let n = self.dd.len();
        let mut x = rhs.to_vec();
        for i in 1..n {
            x[i] -= self.l[i - 1] * x[i - 1];
        }
        for i in 0..n {
            x[i] /= self.dd[i];
        }
        for i in (0..n - 1).rev() {
            x[i] -= self.l[i] * x[i + 1];
        }
        x
    }
}

/// Smallest generalized eigenvalue of the symmetric tridiagonal pencil
/// `T x = rho S x` (`S` positive definite) by inertia bisection on
/// `[lo, hi]`; the bracket must contain it.
pub fn pencil_smallest(t: &TriSym, s: &TriSym, mut lo: f64, mut hi: f64) -> f64 {
    debug_assert!(tri_factor(t, s, lo).neg == 0, "lower bracket above an eigenvalue");
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        if tri_factor(t, s, mid).neg >= 1 {
            hi = mid;
        } else {
            lo = mid;
        }
        if hi - lo <= 1e-14 * (1.0 + lo.abs().max(hi.abs())) {
            break;
        }
    }
    0.5 * (lo + hi)
}
