//! Dense symmetric eigendecomposition (Householder tridiagonalization
//! followed by implicit-shift QL) and the symmetric matrix square root built
//! on it. Self-contained so the toolkit needs no LAPACK linkage; everything
//! is single-threaded and deterministic.

use autodiff::conv::matmul_view;
use ndarray::Array2;

/// Eigendecomposition of a real symmetric matrix: `values[j]` pairs with the
/// j-th column of `vectors`, so `A = V diag(values) V^T`.
pub struct SymEig {
    pub values: Vec<f64>,
    pub vectors: Array2<f64>,
}

fn hypot(a: f64, b: f64) -> f64 {
    let (a, b) = (a.abs(), b.abs());
    if a > b {
        let r = b / a;
        a * (1.0 + r * r).sqrt()
    } else if b != 0.0 {
        let r = a / b;
        b * (1.0 + r * r).sqrt()
    } else {
        0.0
    }
}

/// Householder reduction to tridiagonal form with transform accumulation.
/// On return `a` holds the accumulated orthogonal matrix, `d` the diagonal,
/// `e` the subdiagonal (e[0] unused).
fn tred2(a: &mut Array2<f64>, d: &mut [f64], e: &mut [f64]) {
    let n = d.len();
    for i in (1..n).rev() {
        let l = i - 1;
        let mut h = 0.0;
        if l > 0 {
            let mut scale = 0.0;
            for k in 0..=l {
                scale += a[[i, k]].abs();
            }
            if scale == 0.0 {
                e[i] = a[[i, l]];
            } else {
                for k in 0..=l {
                    a[[i, k]] /= scale;
                    h += a[[i, k]] * a[[i, k]];
                }
                let f = a[[i, l]];
                let g = if f >= 0.0 { -h.sqrt() } else { h.sqrt() };
                e[i] = scale * g;
                h -= f * g;
                a[[i, l]] = f - g;
                let mut f_acc = 0.0;
                for j in 0..=l {
                    a[[j, i]] = a[[i, j]] / h;
                    let mut g_acc = 0.0;
                    for k in 0..=j {
                        g_acc += a[[j, k]] * a[[i, k]];
                    }
                    for k in (j + 1)..=l {
                        g_acc += a[[k, j]] * a[[i, k]];
                    }
                    e[j] = g_acc / h;
                    f_acc += e[j] * a[[i, j]];
                }
                let hh = f_acc / (h + h);
                for j in 0..=l {
                    let f = a[[i, j]];
                    let g = e[j] - hh * f;
                    e[j] = g;
                    for k in 0..=j {
                        a[[j, k]] -= f * e[k] + g * a[[i, k]];
                    }
                }
            }
        } else {
            e[i] = a[[i, l]];
        }
        d[i] = h;
    }
    d[0] = 0.0;
    e[0] = 0.0;
    for i in 0..n {
        if d[i] != 0.0 {
            for j in 0..i {
                let mut g = 0.0;
                for k in 0..i {
                    g += a[[i, k]] * a[[k, j]];
                }
                for k in 0..i {
                    a[[k, j]] -= g * a[[k, i]];
                }
            }
        }
        d[i] = a[[i, i]];
        a[[i, i]] = 1.0;
        for j in 0..i {
            a[[j, i]] = 0.0;
            a[[i, j]] = 0.0;
        }
    }
}

/// Implicit-shift QL on a tridiagonal matrix, rotating the accumulated
/// transform `z` along so its columns end up as eigenvectors.
fn tql2(d: &mut [f64], e: &mut [f64], z: &mut Array2<f64>) -> Result<(), String> {
    let n = d.len();
    if n == 0 {
        return Ok(());
    }
    for i in 1..n {
        e[i - 1] = e[i];
    }
    e[n - 1] = 0.0;
    for l in 0..n {
        let mut iter = 0;
        loop {
            let mut m = l;
            while m + 1 < n {
                let dd = d[m].abs() + d[m + 1].abs();
                if e[m].abs() <= f64::EPSILON * dd {
                    break;
                }
                m += 1;
            }
            if m == l {
                break;
            }
            iter += 1;
            if iter > 50 {
                return Err(format!("eigensolver failed to converge at index {l}"));
            }
            let mut g = (d[l + 1] - d[l]) / (2.0 * e[l]);
            let mut r = hypot(g, 1.0);
            let sign_r = if g >= 0.0 { r.abs() } else { -r.abs() };
            g = d[m] - d[l] + e[l] / (g + sign_r);
            let mut s = 1.0;
            let mut c = 1.0;
            let mut p = 0.0;
            let mut i = m as isize - 1;
            let mut underflow = false;
            while i >= l as isize {
                let iu = i as usize;
                let mut f = s * e[iu];
                let b = c * e[iu];
                r = hypot(f, g);
                e[iu + 1] = r;
                if r == 0.0 {
                    d[iu + 1] -= p;
                    e[m] = 0.0;
                    underflow = true;
                    break;
                }
                s = f / r;
                c = g / r;
                g = d[iu + 1] - p;
                r = (d[iu] - g) * s + 2.0 * c * b;
                p = s * r;
                d[iu + 1] = g + p;
                g = c * r - b;
                for k in 0..n {
                    f = z[[k, iu + 1]];
                    z[[k, iu + 1]] = s * z[[k, iu]] + c * f;
                    z[[k, iu]] = c * z[[k, iu]] - s * f;
                }
                i -= 1;
            }
            if underflow && i >= l as isize {
                continue;
            }
            d[l] -= p;
            e[l] = g;
            e[m] = 0.0;
        }
    }
    Ok(())
}

/// Full eigendecomposition of a symmetric matrix. The input is symmetrized
/// as (A + A^T)/2 first, so tiny asymmetries from accumulated rounding are
/// tolerated. Eigenvalues are returned in ascending order.
pub fn sym_eig(a: &Array2<f64>) -> Result<SymEig, String> {
    let n = a.nrows();
    if a.ncols() != n {
        return Err("sym_eig requires a square matrix".into());
    }
    if a.iter().any(|v| !v.is_finite()) {
        return Err("sym_eig input contains non-finite values".into());
    }
    let mut work = Array2::<f64>::zeros((n, n));
    for i in 0..n {
        for j in 0..n {
            work[[i, j]] = 0.5 * (a[[i, j]] + a[[j, i]]);
        }
    }
    let mut d = vec![0.0; n];
    let mut e = vec![0.0; n];
    tred2(&mut work, &mut d, &mut e);
    tql2(&mut d, &mut e, &mut work)?;

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| d[i].partial_cmp(&d[j]).unwrap());
    let values: Vec<f64> = order.iter().map(|&i| d[i]).collect();
    let mut vectors = Array2::<f64>::zeros((n, n));
    for (dst, &src) in order.iter().enumerate() {
        for k in 0..n {
            vectors[[k, dst]] = work[[k, src]];
        }
    }
    Ok(SymEig { values, vectors })
}

/// Symmetric square root: `V diag(sqrt(max(lambda, 0))) V^T`. Negative
/// eigenvalues (numerical noise in covariance estimates) clamp to zero.
pub fn sym_sqrt(a: &Array2<f64>) -> Result<Array2<f64>, String> {
    let eig = sym_eig(a)?;
    let n = eig.values.len();
    let mut scaled = eig.vectors.clone();
    for (j, &lam) in eig.values.iter().enumerate() {
        let s = lam.max(0.0).sqrt();
        for i in 0..n {
            scaled[[i, j]] *= s;
        }
    }
    Ok(matmul_view(scaled.view(), eig.vectors.t()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array2;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn random_symmetric(n: usize, seed: u64) -> Array2<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut a = Array2::<f64>::zeros((n, n));
        for i in 0..n {
            for j in 0..=i {
                let v = rng.random::<f64>() * 2.0 - 1.0;
                a[[i, j]] = v;
                a[[j, i]] = v;
            }
        }
        a
    }

    fn max_abs(a: &Array2<f64>) -> f64 {
        a.iter().map(|v| v.abs()).fold(0.0, f64::max)
    }

    #[test]
    fn two_by_two_known_eigenvalues() {
        // [[2,1],[1,2]] has eigenvalues 1 and 3
        let a = ndarray::array![[2.0, 1.0], [1.0, 2.0]].into_dimensionality().unwrap();
        let eig = sym_eig(&a).unwrap();
        assert!((eig.values[0] - 1.0).abs() < 1e-12);
        assert!((eig.values[1] - 3.0).abs() < 1e-12);
    }

    #[test]
    fn diagonal_matrix_is_its_own_spectrum() {
        let a = Array2::from_diag(&ndarray::arr1(&[3.0, -1.0, 0.5, 7.0]));
        let eig = sym_eig(&a).unwrap();
        assert_eq!(eig.values.len(), 4);
        let expect = [-1.0, 0.5, 3.0, 7.0];
        for (got, want) in eig.values.iter().zip(expect) {
            assert!((got - want).abs() < 1e-12);
        }
    }

    #[test]
    fn reconstruction_and_orthogonality() {
        for &n in &[5usize, 23, 60] {
            let a = random_symmetric(n, 100 + n as u64);
            let eig = sym_eig(&a).unwrap();
            let v = &eig.vectors;

            let vtv = matmul_view(v.t(), v.view());
            let eye = Array2::<f64>::eye(n);
            assert!(max_abs(&(&vtv - &eye)) < 1e-10, "n={n}: eigenvectors not orthonormal");

            let mut vl = v.clone();
            for (j, &lam) in eig.values.iter().enumerate() {
                for i in 0..n {
                    vl[[i, j]] *= lam;
                }
            }
            let recon = matmul_view(vl.view(), v.t());
            assert!(max_abs(&(&recon - &a)) < 1e-9, "n={n}: reconstruction failed");
        }
    }

    #[test]
    fn sqrt_squares_back_for_psd_input() {
        // build an SPD matrix as B B^T, then check sqrt(A)^2 = A
        let b = random_symmetric(12, 7);
        let a = matmul_view(b.view(), b.t());
        let r = sym_sqrt(&a).unwrap();
        let r2 = matmul_view(r.view(), r.view());
        assert!(max_abs(&(&r2 - &a)) < 1e-9);
    }

    #[test]
    fn sqrt_clamps_negative_eigenvalues() {
        let a = Array2::from_diag(&ndarray::arr1(&[4.0, -1e-12]));
        let r = sym_sqrt(&a).unwrap();
        assert!((r[[0, 0]] - 2.0).abs() < 1e-12);
        assert!(r[[1, 1]].abs() < 1e-12);
    }

    #[test]
    fn rejects_non_finite_input() {
        let mut a = Array2::<f64>::eye(3);
        a[[1, 1]] = f64::NAN;
        assert!(sym_eig(&a).is_err());
    }
}
