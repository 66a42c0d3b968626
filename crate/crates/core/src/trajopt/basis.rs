//! Monomial-basis helpers for piecewise polynomials defined by endpoint
//! derivatives.
//!
//! A polynomial of degree `2r - 1` on `[0, T]` is fixed by its derivatives
//! of order `0..r` at both ends. Working in normalized time `s = t / T`
//! keeps the endpoint map independent of `T`; durations enter only through
//! diagonal scalings.

use std::sync::OnceLock;

use nalgebra::DMatrix;

/// Falling factorial `i! / (i - k)!`, zero when `k > i`.
pub fn falling(i: usize, k: usize) -> f64 {
    if k > i {
        return 0.0;
    }
    ((i - k + 1)..=i).map(|v| v as f64).product()
}

/// Value of the `order`-th derivative of `sum c_i t^i` at `t` (Horner).
pub fn eval_derivative(coeffs: &[f64], order: usize, t: f64) -> f64 {
    let n = coeffs.len();
    if order >= n {
        return 0.0;
    }
    let mut acc = 0.0;
    for i in (order..n).rev() {
        acc = acc * t + coeffs[i] * falling(i, order);
    }
    acc
}

/// Endpoint map and cost matrix for polynomials with `r` derivative orders
/// per end. The penalized derivative is of order `r - 1`.
pub struct Basis {
    pub r: usize,
    /// Inverse of the normalized endpoint map: coefficients from endpoint derivatives.
    pub endpoint_inv: DMatrix<f64>,
    /// `Q[i][j] = integral_0^1 of (d^q s^i)(d^q s^j) ds` with `q = r - 1`.
    pub cost: DMatrix<f64>,
}

impl Basis {
    fn new(r: usize) -> Basis {
        let n = 2 * r;
        let mut a = DMatrix::zeros(n, n);
        for k in 0..r {
            a[(k, k)] = falling(k, k);
            for i in k..n {
                a[(r + k, i)] = falling(i, k);
            }
        }
        let endpoint_inv = a.try_inverse().expect("endpoint map is invertible");
        let q = r - 1;
        let mut cost = DMatrix::zeros(n, n);
        for i in q..n {
            for j in q..n {
                cost[(i, j)] = falling(i, q) * falling(j, q) / (i + j + 1 - 2 * q) as f64;
            }
        }
        Basis { r, endpoint_inv, cost }
    }

    pub fn n_coeffs(&self) -> usize {
        2 * self.r
    }

    /// Maps physical endpoint derivatives `[d_0..d_r at 0, d_0..d_r at T]` to
    /// the normalized coefficient vector.
    pub fn normalized_map(&self, duration: f64) -> DMatrix<f64> {
        let n = self.n_coeffs();
        let mut scaled = self.endpoint_inv.clone();
        for col in 0..n {
            let k = col % self.r;
            let s = duration.powi(k as i32);
            for row in 0..n {
                scaled[(row, col)] *= s;
            }
        }
        scaled
    }

    fn cost_scale(&self, duration: f64) -> f64 {
        duration.powi(3 - 2 * self.r as i32)
    }

    /// Quadratic form of the cost `integral_0^T (x^(r-1))^2 dt` in the
    /// physical endpoint derivatives.
    pub fn segment_hessian(&self, duration: f64) -> DMatrix<f64> {
        let m = self.normalized_map(duration);
        (m.transpose() * &self.cost * m) * self.cost_scale(duration)
    }

    /// Physical local-time coefficients from physical endpoint derivatives.
    pub fn coefficients(&self, duration: f64, endpoint: &[f64]) -> Vec<f64> {
        let d = nalgebra::DVector::from_column_slice(endpoint);
        let b = self.normalized_map(duration) * d;
        b.iter().enumerate().map(|(i, v)| v / duration.powi(i as i32)).collect()
    }

    /// Cost of a segment given physical local-time coefficients.
    pub fn coefficient_cost(&self, duration: f64, coeffs: &[f64]) -> f64 {
        let n = self.n_coeffs();
        let b =
            nalgebra::DVector::from_iterator(n, coeffs.iter().enumerate().map(|(i, c)| c * duration.powi(i as i32)));
        (b.transpose() * &self.cost * &b)[(0, 0)] * self.cost_scale(duration)
    }
}

/// Degree-9 basis, minimum snap.
pub fn snap_basis() -> &'static Basis {
    static B: OnceLock<Basis> = OnceLock::new();
    B.get_or_init(|| Basis::new(5))
}

/// Degree-5 basis, minimum angular acceleration.
pub fn yaw_basis() -> &'static Basis {
    static B: OnceLock<Basis> = OnceLock::new();
    B.get_or_init(|| Basis::new(3))
}
