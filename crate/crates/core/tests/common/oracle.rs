//! Independent oracles for the trajectory optimizer.

use nalgebra::{DMatrix, DVector};
use tnr_core::trajopt::{falling, PolyTrajectory};

/// Dense equality-constrained QP over raw coefficients, solved through its
/// KKT system. Shares nothing with the knot-derivative formulation.
pub fn kkt_axis(points: &[f64], start: [f64; 4], end_vel: f64, stop: bool, durations: &[f64]) -> Vec<[f64; 10]> {
    let m = durations.len();
    let n = 10 * m;
    let mut q = DMatrix::zeros(n, n);
    for (s, &t) in durations.iter().enumerate() {
        for i in 4..10 {
            for j in 4..10 {
                let p = (i + j - 7) as i32;
                q[(10 * s + i, 10 * s + j)] = falling(i, 4) * falling(j, 4) * t.powi(p) / p as f64;
            }
        }
    }
    let mut rows: Vec<(Vec<(usize, f64)>, f64)> = Vec::new();
    let at = |s: usize, k: usize, t: f64| -> Vec<(usize, f64)> {
        (k..10)
            .map(|i| (10 * s + i, falling(i, k) * t.powi((i - k) as i32)))
            .collect()
    };
    // start: position, v, a, j from state, snap zero
    for k in 0..4 {
        rows.push((at(0, k, 0.0), start[k]));
    }
    rows.push((at(0, 4, 0.0), 0.0));
    for s in 0..m {
        rows.push((at(s, 0, durations[s]), points[s + 1]));
        if s + 1 < m {
            rows.push((at(s + 1, 0, 0.0), points[s + 1]));
            for k in 1..=4 {
                let mut r = at(s, k, durations[s]);
                r.extend(at(s + 1, k, 0.0).into_iter().map(|(c, v)| (c, -v)));
                rows.push((r, 0.0));
            }
        }
    }
    let tl = durations[m - 1];
    rows.push((at(m - 1, 1, tl), end_vel));
    if stop {
        for k in 2..=4 {
            rows.push((at(m - 1, k, tl), 0.0));
        }
    }
    let c = rows.len();
    let mut kkt = DMatrix::zeros(n + c, n + c);
    let mut rhs = DVector::zeros(n + c);
    kkt.view_mut((0, 0), (n, n)).copy_from(&(q * 2.0));
    for (r, (coeffs, b)) in rows.iter().enumerate() {
        for &(col, v) in coeffs {
            kkt[(n + r, col)] += v;
            kkt[(col, n + r)] += v;
        }
        rhs[n + r] = *b;
    }
    let sol = kkt.full_piv_lu().solve(&rhs).expect("kkt system solvable");
    (0..m).map(|s| std::array::from_fn(|i| sol[10 * s + i])).collect()
}

/// Composite Simpson estimate of the integrated squared snap.
pub fn simpson_snap(traj: &PolyTrajectory, h: f64) -> f64 {
    let mut total = 0.0;
    for seg in traj.segments() {
        let n = ((seg.duration / h).ceil() as usize).max(2);
        let n = n + n % 2;
        let step = seg.duration / n as f64;
        let f = |t: f64| seg.position_derivative(4, t).norm_squared();
        let mut acc = f(0.0) + f(seg.duration);
        for k in 1..n {
            acc += f(k as f64 * step) * if k % 2 == 1 { 4.0 } else { 2.0 };
        }
        total += acc * step / 3.0;
    }
    total
}
