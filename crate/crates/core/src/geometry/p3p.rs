//! Lambda Twist P3P (Persson and Nordberg, ECCV 2018) in double precision.

use nalgebra::{Matrix3, SymmetricEigen, Vector3};

use super::camera::nearest_rotation;

/// Returns up to four `(R, t)` with `λᵢ·yᵢ = R·xᵢ + t` for the three world
/// points `x` and bearing vectors `y` (need not be unit length).
pub fn solve(x: &[Vector3<f64>; 3], y: &[Vector3<f64>; 3]) -> Vec<(Matrix3<f64>, Vector3<f64>)> {
    let y = [y[0].normalize(), y[1].normalize(), y[2].normalize()];
    let d12 = x[0] - x[1];
    let d13 = x[0] - x[2];
    let d23 = x[1] - x[2];
    let a12 = d12.norm_squared();
    let a13 = d13.norm_squared();
    let a23 = d23.norm_squared();

    let c12 = y[0].dot(&y[1]);
    let c23 = y[1].dot(&y[2]);
    let c31 = y[2].dot(&y[0]);
    let blob = c12 * c23 * c31 - 1.0;
    let s12 = 1.0 - c12 * c12;
    let s23 = 1.0 - c23 * c23;
    let s31 = 1.0 - c31 * c31;
    let b12 = -2.0 * c12;
    let b13 = -2.0 * c31;
    let b23 = -2.0 * c23;

    let p3 = a13 * (a23 * s31 - a13 * s23);
    let p2 = 2.0 * blob * a23 * a13 + a13 * (2.0 * a12 + a13) * s23 + a23 * (a23 - a12) * s31;
    let p1 = a23 * (a13 - a23) * s12 - a12 * a12 * s23 - 2.0 * a12 * (blob * a23 + a13 * s23);
    let p0 = a12 * (a12 * s23 - a23 * s12);
    if p3.abs() < 1e-14 * (p2.abs() + p1.abs() + p0.abs()) || p3 == 0.0 {
        return Vec::new();
    }
    let g = cubic_root(p2 / p3, p1 / p3, p0 / p3);

    #[rustfmt::skip]
    let d0 = Matrix3::new(
        a23 * (1.0 - g), -(a23 * c12), a23 * c31 * g,
        -(a23 * c12), a23 - a12 + a13 * g, -c23 * (a13 * g - a12),
        a23 * c31 * g, -c23 * (a13 * g - a12), g * (a13 - a23) - a12,
    );
    let eig = SymmetricEigen::new(d0);
    let mut idx = [0usize, 1, 2];
    idx.sort_by(|&i, &j| eig.eigenvalues[j].abs().total_cmp(&eig.eigenvalues[i].abs()));
    let (e1, e2) = (eig.eigenvalues[idx[0]], eig.eigenvalues[idx[1]]);
    if e1 == 0.0 {
        return Vec::new();
    }
    let v1 = eig.eigenvectors.column(idx[0]).into_owned();
    let v2 = eig.eigenvectors.column(idx[1]).into_owned();
    let ratio = (-e2 / e1).max(0.0).sqrt();

    let mut lambdas = Vec::with_capacity(4);
    for s in [ratio, -ratio] {
        let w2 = 1.0 / (s * v2[0] - v1[0]);
        let w0 = w2 * (v1[1] - s * v2[1]);
        let w1 = w2 * (v1[2] - s * v2[2]);
        let a = 1.0 / ((a13 - a12) * w1 * w1 - a12 * b13 * w1 - a12);
        let b = a * (a13 * b12 * w1 - a12 * b13 * w0 - 2.0 * w0 * w1 * (a12 - a13));
        let c = a * ((a13 - a12) * w0 * w0 + a13 * b12 * w0 + a13);
        let Some((tau1, tau2)) = quadratic_roots(b, c) else { continue };
        for tau in [tau1, tau2] {
            if !(tau > 0.0) {
                continue;
            }
            let d = a23 / (tau * (b23 + tau) + 1.0);
            if d > 0.0 {
                let l2 = d.sqrt();
                let l3 = tau * l2;
                let l1 = w0 * l2 + w1 * l3;
                if l1 >= 0.0 {
                    lambdas.push(Vector3::new(l1, l2, l3));
                }
            }
        }
    }

    let xm = Matrix3::from_columns(&[d12, d13, d12.cross(&d13)]);
    let Some(xm_inv) = xm.try_inverse() else { return Vec::new() };
    lambdas
        .into_iter()
        .filter_map(|l| {
            let l = refine_depths(l, [a12, a13, a23], [b12, b13, b23]);
            let r1 = y[0] * l[0];
            let r2 = y[1] * l[1];
            let r3 = y[2] * l[2];
            let (e1, e2) = (r1 - r2, r1 - r3);
            let ym = Matrix3::from_columns(&[e1, e2, e1.cross(&e2)]);
            let rot = nearest_rotation(&(ym * xm_inv));
            let t = ((r1 - rot * x[0]) + (r2 - rot * x[1]) + (r3 - rot * x[2])) / 3.0;
            (rot.iter().all(|v| v.is_finite()) && t.iter().all(|v| v.is_finite())).then_some((rot, t))
        })
        .collect()
}

/// Real roots of `τ² + bτ + c`, computed without cancellation.
fn quadratic_roots(b: f64, c: f64) -> Option<(f64, f64)> {
    let disc = b * b - 4.0 * c;
    if !(disc >= 0.0) {
        return None;
    }
    let y = disc.sqrt();
    Some(if b < 0.0 {
        (0.5 * (-b + y), 0.5 * (-b - y))
    } else {
        (2.0 * c / (-b + y), 2.0 * c / (-b - y))
    })
}

/// One real root of `r³ + b·r² + c·r + d`, chosen where the slope is steep,
/// polished by Newton iterations.
fn cubic_root(b: f64, c: f64, d: f64) -> f64 {
    let h = |r: f64| ((r + b) * r + c) * r + d;
    let dh = |r: f64| (3.0 * r + 2.0 * b) * r + c;
    let mut r0 = if b * b >= 3.0 * c {
        let v = (b * b - 3.0 * c).sqrt();
        let t1 = (-b - v) / 3.0;
        let k = h(t1);
        if k > 0.0 {
            t1 - (-k / (3.0 * t1 + b)).sqrt()
        } else {
            let t2 = (-b + v) / 3.0;
            t2 + (-h(t2) / (3.0 * t2 + b)).sqrt()
        }
    } else {
        let r = -b / 3.0;
        if dh(r).abs() < 1e-4 {
            r + 1.0
        } else {
            r
        }
    };
    for i in 0..50 {
        let f = h(r0);
        if i >= 7 && f.abs() < 1e-15 {
            break;
        }
        let step = f / dh(r0);
        if !step.is_finite() {
            break;
        }
        r0 -= step;
    }
    r0
}

/// Gauss–Newton on the three law-of-cosines residuals.
fn refine_depths(l: Vector3<f64>, a: [f64; 3], b: [f64; 3]) -> Vector3<f64> {
    let [a12, a13, a23] = a;
    let [b12, b13, b23] = b;
    let residual = |l: &Vector3<f64>| {
        Vector3::new(
            l[0] * l[0] + l[1] * l[1] + b12 * l[0] * l[1] - a12,
            l[0] * l[0] + l[2] * l[2] + b13 * l[0] * l[2] - a13,
            l[1] * l[1] + l[2] * l[2] + b23 * l[1] * l[2] - a23,
        )
    };
    let mut l = l;
    let mut r = residual(&l);
    for _ in 0..5 {
        if r.abs().sum() < 1e-14 * (a12 + a13 + a23) {
            break;
        }
        #[rustfmt::skip]
        let j = Matrix3::new(
            2.0 * l[0] + b12 * l[1], 2.0 * l[1] + b12 * l[0], 0.0,
            2.0 * l[0] + b13 * l[2], 0.0, 2.0 * l[2] + b13 * l[0],
            0.0, 2.0 * l[1] + b23 * l[2], 2.0 * l[2] + b23 * l[1],
        );
        let Some(step) = j.lu().solve(&r) else { break };
        let next = l - step;
        let rn = residual(&next);
        if rn.abs().sum() >= r.abs().sum() {
            break;
        }
        l = next;
        r = rn;
    }
    l
}
