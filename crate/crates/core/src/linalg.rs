//! Dense helpers for the fixed small systems in this crate (3x3 joint-space
//! solves, the 7x7 impact system, 2x2 decoupling). Generic over [`Scalar`] so
//! the same elimination runs under forward jets and the reverse tape; pivot
//! selection compares primal values only, which keeps the factorization
//! differentiable almost everywhere.

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Gaussian elimination with partial pivoting, solving `a x = b` in place.
/// On return `b` holds the solution; `a` is destroyed.
pub fn solve_in_place<S: Scalar, const N: usize>(a: &mut [[S; N]; N], b: &mut [S; N]) -> Result<()> {
    let mut scale = 0.0f64;
    for row in a.iter() {
        for e in row.iter() {
            scale = scale.max(e.value().abs());
        }
    }
    let tol = 1e-13 * scale.max(f64::MIN_POSITIVE);

    for col in 0..N {
        let mut pivot = col;
        let mut best = a[col][col].value().abs();
        for row in col + 1..N {
            let mag = a[row][col].value().abs();
            if mag > best {
                best = mag;
                pivot = row;
            }
        }
        if !best.is_finite() || best <= tol {
            return Err(Error::Singular {
                ctx: "solve_in_place",
                detail: format!("pivot {:.3e} at column {} (scale {:.3e})", best, col, scale),
            });
        }
        if pivot != col {
            a.swap(pivot, col);
            b.swap(pivot, col);
        }
        let inv = a[col][col].recip();
        for row in col + 1..N {
            let f = a[row][col] * inv;
            if f.value() == 0.0 {
                continue;
            }
            for k in col + 1..N {
                a[row][k] = a[row][k] - f * a[col][k];
            }
            b[row] = b[row] - f * b[col];
        }
    }

    for col in (0..N).rev() {
        let mut s = b[col];
        for k in col + 1..N {
            s = s - a[col][k] * b[k];
        }
        b[col] = s / a[col][col];
    }
    Ok(())
}

pub fn mat_vec<S: Scalar, const N: usize>(a: &[[S; N]; N], x: &[S; N]) -> [S; N] {
    let mut out = [S::zero(); N];
    for i in 0..N {
        let mut s = S::zero();
        for j in 0..N {
            s = s + a[i][j] * x[j];
        }
        out[i] = s;
    }
    out
}

pub fn quadratic_form<S: Scalar, const N: usize>(a: &[[S; N]; N], x: &[S; N]) -> S {
    let ax = mat_vec(a, x);
    let mut s = S::zero();
    for i in 0..N {
        s = s + x[i] * ax[i];
    }
    s
}

/// Explicit 3x3 inverse via the adjugate. Returns `None` when the determinant
/// underflows relative to the matrix scale.
pub fn inv3(a: &[[f64; 3]; 3]) -> Option<[[f64; 3]; 3]> {
    let c00 = a[1][1] * a[2][2] - a[1][2] * a[2][1];
    let c01 = a[1][2] * a[2][0] - a[1][0] * a[2][2];
    let c02 = a[1][0] * a[2][1] - a[1][1] * a[2][0];
    let det = a[0][0] * c00 + a[0][1] * c01 + a[0][2] * c02;
    let scale: f64 = a
        .iter()
        .flatten()
        .fold(0.0f64, |m, &x| m.max(x.abs()))
        .powi(3);
    if !det.is_finite() || det.abs() <= 1e-300 || det.abs() < 1e-16 * scale.max(f64::MIN_POSITIVE) {
        return None;
    }
    let inv_det = 1.0 / det;
    Some([
        [
            c00 * inv_det,
            (a[0][2] * a[2][1] - a[0][1] * a[2][2]) * inv_det,
            (a[0][1] * a[1][2] - a[0][2] * a[1][1]) * inv_det,
        ],
        [
            c01 * inv_det,
            (a[0][0] * a[2][2] - a[0][2] * a[2][0]) * inv_det,
            (a[0][2] * a[1][0] - a[0][0] * a[1][2]) * inv_det,
        ],
        [
            c02 * inv_det,
            (a[0][1] * a[2][0] - a[0][0] * a[2][1]) * inv_det,
            (a[0][0] * a[1][1] - a[0][1] * a[1][0]) * inv_det,
        ],
    ])
}

/// Infinity-norm condition estimate for a 3x3 matrix; `f64::INFINITY` when
/// the matrix is numerically singular.
pub fn cond3(a: &[[f64; 3]; 3]) -> f64 {
    let norm = |m: &[[f64; 3]; 3]| {
        m.iter()
            .map(|r| r.iter().map(|x| x.abs()).sum::<f64>())
            .fold(0.0f64, f64::max)
    };
    match inv3(a) {
        Some(inv) => norm(a) * norm(&inv),
        None => f64::INFINITY,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::jet::Jet;

    #[test]
    fn solves_a_known_3x3_system() {
        let a = [[4.0, 1.0, 0.0], [1.0, 3.0, 1.0], [0.0, 1.0, 2.0]];
        let x_true = [1.0, -2.0, 3.0];
        let mut b = mat_vec(&a, &x_true);
        let mut a_work = a;
        solve_in_place(&mut a_work, &mut b).unwrap();
        for i in 0..3 {
            assert!((b[i] - x_true[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn rejects_singular_systems() {
        let mut a = [[1.0, 2.0], [2.0, 4.0]];
        let mut b = [1.0, 2.0];
        assert!(solve_in_place(&mut a, &mut b).is_err());
    }

    #[test]
    fn solution_derivative_matches_finite_differences() {
        // x(t) solves A(t) x = b with A(t) = [[2+t, 1], [1, 3]].
        let solve = |t: f64| {
            let mut a = [[2.0 + t, 1.0], [1.0, 3.0]];
            let mut b = [1.0, 2.0];
            solve_in_place(&mut a, &mut b).unwrap();
            b
        };
        let h = 1e-6;
        let (xp, xm) = (solve(h), solve(-h));
        let fd = [(xp[0] - xm[0]) / (2.0 * h), (xp[1] - xm[1]) / (2.0 * h)];

        let t = Jet::<f64, 1>::variable(0.0, 0);
        let one = Jet::<f64, 1>::constant(1.0);
        let mut a = [[Jet::from_f64(2.0) + t, one], [one, Jet::from_f64(3.0)]];
        let mut b = [Jet::from_f64(1.0), Jet::from_f64(2.0)];
        use crate::scalar::Scalar;
        solve_in_place(&mut a, &mut b).unwrap();
        for i in 0..2 {
            assert!((b[i].du[0] - fd[i]).abs() < 1e-8, "{} vs {}", b[i].du[0], fd[i]);
        }
    }

    #[test]
    fn inv3_and_cond3_agree_with_identity() {
        let eye = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];
        let inv = inv3(&eye).unwrap();
        assert_eq!(inv, eye);
        assert!((cond3(&eye) - 1.0).abs() < 1e-15);
        let sing = [[1.0, 2.0, 3.0], [2.0, 4.0, 6.0], [0.0, 1.0, 1.0]];
        assert!(cond3(&sing).is_infinite());
    }
}
