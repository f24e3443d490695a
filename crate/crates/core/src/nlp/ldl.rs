//! Dense symmetric indefinite factorization `P A P^T = L D L^T` with
//! Bunch-Kaufman pivoting. `D` has 1x1 and 2x2 blocks, which gives the
//! inertia of `A` directly. The matrix is symmetrically equilibrated first,
//! which leaves the inertia unchanged and keeps the zero pivot test meaningful
//! when the diagonal spans many orders of magnitude.

use nalgebra::DMatrix;

const ALPHA: f64 = 0.640_388_203_202_208; // (1 + sqrt(17)) / 8

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Inertia {
    pub positive: usize,
    pub negative: usize,
    pub zero: usize,
}

#[derive(Debug, Clone)]
pub struct LdlFactor {
    n: usize,
    /// Column-major; strictly lower part holds `L`, block diagonal holds `D`.
    a: Vec<f64>,
    /// `perm[i]`: original row placed at position `i`.
    perm: Vec<usize>,
    /// Block size starting at each position (0 for the second row of a 2x2).
    block: Vec<u8>,
    scale: Vec<f64>,
    pub inertia: Inertia,
}

impl LdlFactor {
    /// Factors the symmetric matrix whose lower triangle is given.
    pub fn new(matrix: &DMatrix<f64>) -> LdlFactor {
        let n = matrix.nrows();
        assert_eq!(n, matrix.ncols());
        let mut rowmax = vec![0.0f64; n];
        for j in 0..n {
            for i in j..n {
                let v = matrix[(i, j)].abs();
                rowmax[i] = rowmax[i].max(v);
                rowmax[j] = rowmax[j].max(v);
            }
        }
        let scale: Vec<f64> = rowmax.iter().map(|&m| if m > 0.0 { 1.0 / m.sqrt() } else { 1.0 }).collect();
        let mut a = vec![0.0; n * n];
        let mut anorm = 0.0f64;
        for j in 0..n {
            for i in j..n {
                let v = scale[i] * matrix[(i, j)] * scale[j];
                a[i + j * n] = v;
                anorm = anorm.max(v.abs());
            }
        }
        let zero_tol = 1e-14 * anorm.max(1e-300);
        let mut perm: Vec<usize> = (0..n).collect();
        let mut block = vec![0u8; n];
        let mut inertia = Inertia::default();

        let idx = |i: usize, j: usize| if i >= j { i + j * n } else { j + i * n };

        let mut k = 0;
        while k < n {
            let absakk = a[k + k * n].abs();
            let (mut imax, mut colmax) = (k, 0.0f64);
            for i in k + 1..n {
                let v = a[i + k * n].abs();
                if v > colmax {
                    colmax = v;
                    imax = i;
                }
            }
            let (kp, size) = if absakk.max(colmax) <= zero_tol {
                (k, 1)
            } else if absakk >= ALPHA * colmax {
                (k, 1)
            } else {
                let mut rowmax = 0.0f64;
                for j in k..n {
                    if j != imax {
                        rowmax = rowmax.max(a[idx(imax, j)].abs());
                    }
                }
                if absakk * rowmax >= ALPHA * colmax * colmax {
                    (k, 1)
                } else if a[imax + imax * n].abs() >= ALPHA * rowmax {
                    (imax, 1)
                } else {
                    (imax, 2)
                }
            };
            let kk = k + size - 1;
            if kp != kk {
                swap_symmetric(&mut a, n, k, kk, kp);
                perm.swap(kk, kp);
            }

            if size == 1 {
                let d = a[k + k * n];
                block[k] = 1;
                if d.abs() <= zero_tol {
                    inertia.zero += 1;
                    for i in k + 1..n {
                        a[i + k * n] = 0.0;
                    }
                    a[k + k * n] = 0.0;
                } else {
                    if d > 0.0 {
                        inertia.positive += 1;
                    } else {
                        inertia.negative += 1;
                    }
                    let inv = 1.0 / d;
                    for j in k + 1..n {
                        let ajk = a[j + k * n];
                        if ajk != 0.0 {
                            let f = ajk * inv;
                            for i in j..n {
                                a[i + j * n] -= a[i + k * n] * f;
                            }
                        }
                    }
                    for i in k + 1..n {
                        a[i + k * n] *= inv;
                    }
                }
                k += 1;
            } else {
                let d11 = a[k + k * n];
                let d21 = a[k + 1 + k * n];
                let d22 = a[k + 1 + (k + 1) * n];
                let det = d11 * d22 - d21 * d21;
                block[k] = 2;
                block[k + 1] = 0;
                let tr = d11 + d22;
                if det < 0.0 {
                    inertia.positive += 1;
                    inertia.negative += 1;
                } else if det > 0.0 {
                    if tr > 0.0 {
                        inertia.positive += 2;
                    } else {
                        inertia.negative += 2;
                    }
                } else {
                    inertia.zero += 1;
                    if tr > 0.0 {
                        inertia.positive += 1;
                    } else {
                        inertia.negative += 1;
                    }
                }
                let (i11, i21, i22) = (d22 / det, -d21 / det, d11 / det);
                // W = [a_ik, a_i,k+1] * D^{-1}, computed before the update.
                let mut w1 = vec![0.0; n];
                let mut w2 = vec![0.0; n];
                for i in k + 2..n {
                    let (p, q) = (a[i + k * n], a[i + (k + 1) * n]);
                    w1[i] = p * i11 + q * i21;
                    w2[i] = p * i21 + q * i22;
                }
                for j in k + 2..n {
                    let (p, q) = (a[j + k * n], a[j + (k + 1) * n]);
                    if p != 0.0 || q != 0.0 {
                        for i in j..n {
                            a[i + j * n] -= w1[i] * p + w2[i] * q;
                        }
                    }
                }
                for i in k + 2..n {
                    a[i + k * n] = w1[i];
                    a[i + (k + 1) * n] = w2[i];
                }
                k += 2;
            }
        }
        LdlFactor { n, a, perm, block, scale, inertia }
    }

    pub fn solve(&self, rhs: &[f64]) -> Vec<f64> {
        let n = self.n;
        let a = &self.a;
        let mut y: Vec<f64> = self.perm.iter().map(|&p| rhs[p] * self.scale[p]).collect();
        // L y = b
        let mut k = 0;
        while k < n {
            let s = self.block[k] as usize;
            for c in k..k + s {
                let yc = y[c];
                if yc != 0.0 {
                    for i in k + s..n {
                        y[i] -= a[i + c * n] * yc;
                    }
                }
            }
            k += s;
        }
        // D z = y
        let mut k = 0;
        while k < n {
            if self.block[k] == 1 {
                let d = a[k + k * n];
                y[k] = if d == 0.0 { 0.0 } else { y[k] / d };
                k += 1;
            } else {
                let (d11, d21, d22) = (a[k + k * n], a[k + 1 + k * n], a[k + 1 + (k + 1) * n]);
                let det = d11 * d22 - d21 * d21;
                let (p, q) = (y[k], y[k + 1]);
                y[k] = (d22 * p - d21 * q) / det;
                y[k + 1] = (d11 * q - d21 * p) / det;
                k += 2;
            }
        }
        // L^T x = z, walking blocks backwards
        let starts: Vec<usize> = (0..n).filter(|&k| self.block[k] != 0).collect();
        for &k in starts.iter().rev() {
            let s = self.block[k] as usize;
            for c in k..k + s {
                let mut acc = y[c];
                for i in k + s..n {
                    acc -= a[i + c * n] * y[i];
                }
                y[c] = acc;
            }
        }
        let mut x = vec![0.0; n];
        for (i, &p) in self.perm.iter().enumerate() {
            x[p] = y[i] * self.scale[p];
        }
        x
    }
}

/// Symmetric interchange of rows/columns `p < q` (both `>= k`) in lower
/// storage, including the already computed columns of `L`.
fn swap_symmetric(a: &mut [f64], n: usize, k: usize, p: usize, q: usize) {
    debug_assert!(k <= p && p < q);
    for j in 0..p {
        a.swap(p + j * n, q + j * n);
    }
    for i in p + 1..q {
        a.swap(i + p * n, q + i * n);
    }
    for i in q + 1..n {
        a.swap(i + p * n, i + q * n);
    }
    a.swap(p + p * n, q + q * n);
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_symmetric(n: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
        let m = DMatrix::from_fn(n, n, |_, _| rng.gen_range(-1.0..1.0));
        &m + m.transpose()
    }

    #[test]
    fn solves_random_indefinite_systems() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for n in [1, 2, 3, 5, 10, 40] {
            let a = random_symmetric(n, &mut rng);
            let b: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let f = LdlFactor::new(&a);
            let x = f.solve(&b);
            let r = &a * nalgebra::DVector::from_vec(x) - nalgebra::DVector::from_vec(b);
            assert!(r.amax() < 1e-9, "n={n} residual {}", r.amax());
        }
    }

    #[test]
    fn inertia_matches_eigenvalues() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for n in [2, 4, 9, 25] {
            let a = random_symmetric(n, &mut rng);
            let eig = a.clone().symmetric_eigenvalues();
            let pos = eig.iter().filter(|&&e| e > 0.0).count();
            let f = LdlFactor::new(&a);
            assert_eq!(f.inertia.positive, pos);
            assert_eq!(f.inertia.negative, n - pos);
            assert_eq!(f.inertia.zero, 0);
        }
    }

    #[test]
    fn saddle_point_and_singular_cases() {
        let kkt = DMatrix::from_row_slice(3, 3, &[2.0, 0.0, 1.0, 0.0, 2.0, 1.0, 1.0, 1.0, 0.0]);
        let f = LdlFactor::new(&kkt);
        assert_eq!(f.inertia, Inertia { positive: 2, negative: 1, zero: 0 });
        let zero_diag = DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 1.0, 0.0]);
        let f = LdlFactor::new(&zero_diag);
        assert_eq!(f.inertia, Inertia { positive: 1, negative: 1, zero: 0 });
        let x = f.solve(&[3.0, 4.0]);
        assert!((x[0] - 4.0).abs() < 1e-14 && (x[1] - 3.0).abs() < 1e-14);
        let singular = DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 1.0, 1.0]);
        assert_eq!(LdlFactor::new(&singular).inertia.zero, 1);
    }
}
