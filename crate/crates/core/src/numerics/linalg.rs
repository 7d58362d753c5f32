use crate::error::{Error, Result};
use crate::numerics::rng::Rng;
use crate::numerics::tensor::{as_matrix, Tensor};

const JACOBI_MAX_SWEEPS: usize = 100;
const SYMMETRY_TOL: f64 = 1e-12;
const NEGATIVE_EIGEN_TOL: f64 = -1e-9;
const EIGEN_FLOOR: f64 = 1e-20;

/// Eigendecomposition `C = B·diag(λ)·Bᵀ` with eigenvalues in descending order.
#[derive(Clone, Debug)]
pub struct SymEigen {
    pub values: Vec<f64>,
    /// Column `j` is the eigenvector for `values[j]`.
    pub vectors: Tensor,
}

impl SymEigen {
    pub fn dim(&self) -> usize {
        self.values.len()
    }

    /// `B·diag(λ)·Bᵀ`.
    pub fn reconstruct(&self) -> Tensor {
        let d = self.dim();
        let b = self.vectors.data();
        let mut out = vec![0.0; d * d];
        for i in 0..d {
            for j in 0..d {
                let mut s = 0.0;
                for (k, &l) in self.values.iter().enumerate() {
                    s += b[i * d + k] * l * b[j * d + k];
                }
                out[i * d + j] = s;
            }
        }
        Tensor::new(vec![d, d], out).expect("square")
    }

    pub fn condition_number(&self) -> f64 {
        let max = self.values.first().copied().unwrap_or(1.0);
        let min = self.values.last().copied().unwrap_or(1.0).max(EIGEN_FLOOR);
        max / min
    }
}

/// Symmetric eigendecomposition by cyclic Jacobi rotations.
pub fn eig_sym(c: &Tensor) -> Result<SymEigen> {
    let (n, n2) = as_matrix(c)?;
    if n != n2 || c.shape().len() != 2 {
        return Err(Error::Dimension(format!(
            "eig_sym needs a square matrix, got {:?}",
            c.shape()
        )));
    }
    let src = c.data();
    let scale = src.iter().fold(1.0f64, |m, v| m.max(v.abs()));
    for i in 0..n {
        for j in (i + 1)..n {
            let gap = (src[i * n + j] - src[j * n + i]).abs();
            if gap > SYMMETRY_TOL * scale {
                return Err(Error::Contract(format!(
                    "eig_sym input is not symmetric: |c[{i},{j}] - c[{j},{i}]| = {gap:e}"
                )));
            }
        }
    }
    if !c.is_finite() {
        return Err(Error::NonFinite("eig_sym input".into()));
    }

    let mut a = src.to_vec();
    let mut v = Tensor::eye(n).into_data();
    let fro = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let mut converged = false;
    for _ in 0..JACOBI_MAX_SWEEPS {
        let mut off = 0.0;
        for i in 0..n {
            for j in (i + 1)..n {
                off += a[i * n + j] * a[i * n + j];
            }
        }
        if off == 0.0 || off.sqrt() <= 1e-15 * fro {
            converged = true;
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = a[p * n + q];
                if apq == 0.0 {
                    continue;
                }
                let theta = (a[q * n + q] - a[p * n + p]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let cs = 1.0 / (t * t + 1.0).sqrt();
                let sn = t * cs;
                for k in 0..n {
                    let akp = a[k * n + p];
                    let akq = a[k * n + q];
                    a[k * n + p] = cs * akp - sn * akq;
                    a[k * n + q] = sn * akp + cs * akq;
                }
                for k in 0..n {
                    let apk = a[p * n + k];
                    let aqk = a[q * n + k];
                    a[p * n + k] = cs * apk - sn * aqk;
                    a[q * n + k] = sn * apk + cs * aqk;
                }
                a[p * n + q] = 0.0;
                a[q * n + p] = 0.0;
                for k in 0..n {
                    let vkp = v[k * n + p];
                    let vkq = v[k * n + q];
                    v[k * n + p] = cs * vkp - sn * vkq;
                    v[k * n + q] = sn * vkp + cs * vkq;
                }
            }
        }
    }
    if !converged {
        return Err(Error::Numeric(format!(
            "Jacobi eigensolver did not converge in {JACOBI_MAX_SWEEPS} sweeps"
        )));
    }

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| a[j * n + j].total_cmp(&a[i * n + i]).then(i.cmp(&j)));
    let values = order.iter().map(|&i| a[i * n + i]).collect();
    let mut vectors = vec![0.0; n * n];
    for (dst, &src_col) in order.iter().enumerate() {
        for k in 0..n {
            vectors[k * n + dst] = v[k * n + src_col];
        }
    }
    Ok(SymEigen {
        values,
        vectors: Tensor::new(vec![n, n], vectors)?,
    })
}

/// Precomputed `B·diag(√λ)` factor for repeated Gaussian draws.
#[derive(Clone, Debug)]
pub struct MvnFactor {
    sqrt_values: Vec<f64>,
    inv_sqrt_values: Vec<f64>,
    vectors: Tensor,
    /// Number of eigenvalues raised to the floor.
    pub clamped: usize,
}

impl MvnFactor {
    pub fn new(eig: &SymEigen) -> Result<Self> {
        let mut clamped = 0;
        let mut sqrt_values = Vec::with_capacity(eig.dim());
        for &l in &eig.values {
            if l < NEGATIVE_EIGEN_TOL {
                return Err(Error::Numeric(format!("covariance has negative eigenvalue {l:e}")));
            }
            let l = if l < EIGEN_FLOOR {
                clamped += 1;
                EIGEN_FLOOR
            } else {
                l
            };
            sqrt_values.push(l.sqrt());
        }
        let inv_sqrt_values = sqrt_values.iter().map(|s| 1.0 / s).collect();
        Ok(Self {
            sqrt_values,
            inv_sqrt_values,
            vectors: eig.vectors.clone(),
            clamped,
        })
    }

    pub fn dim(&self) -> usize {
        self.sqrt_values.len()
    }

    /// `B·diag(√λ)·z` for a standard normal `z` drawn from `rng`.
    pub fn draw_step(&self, rng: &mut Rng) -> Vec<f64> {
        let d = self.dim();
        let z: Vec<f64> = (0..d).map(|_| rng.normal()).collect();
        let scaled: Vec<f64> = z.iter().zip(&self.sqrt_values).map(|(z, s)| z * s).collect();
        let b = self.vectors.data();
        (0..d)
            .map(|i| {
                let mut s = 0.0;
                for (k, sk) in scaled.iter().enumerate() {
                    s += b[i * d + k] * sk;
                }
                s
            })
            .collect()
    }

    /// `C^{-1/2}·y = B·diag(1/√λ)·Bᵀ·y`.
    pub fn whiten(&self, y: &[f64]) -> Vec<f64> {
        let d = self.dim();
        let b = self.vectors.data();
        let mut proj = vec![0.0; d];
        for (k, p) in proj.iter_mut().enumerate() {
            let mut s = 0.0;
            for (i, yi) in y.iter().enumerate() {
                s += b[i * d + k] * yi;
            }
            *p = s * self.inv_sqrt_values[k];
        }
        (0..d)
            .map(|i| {
                let mut s = 0.0;
                for (k, pk) in proj.iter().enumerate() {
                    s += b[i * d + k] * pk;
                }
                s
            })
            .collect()
    }
}

/// Draws `μ + σ·B·diag(√λ)·z`.
pub fn sample_mvn(rng: &mut Rng, mean: &Tensor, sigma: f64, eig: &SymEigen) -> Result<Tensor> {
    if mean.len() != eig.dim() {
        return Err(Error::Dimension(format!(
            "mean has {} entries, covariance is {}x{}",
            mean.len(),
            eig.dim(),
            eig.dim()
        )));
    }
    if !(sigma >= 0.0) || !sigma.is_finite() {
        return Err(Error::Contract(format!("sigma must be finite and >= 0, got {sigma}")));
    }
    let factor = MvnFactor::new(eig)?;
    if sigma == 0.0 {
        return Ok(mean.clone());
    }
    let step = factor.draw_step(rng);
    let data = mean.data().iter().zip(&step).map(|(m, y)| m + sigma * y).collect();
    Tensor::new(mean.shape().to_vec(), data)?.check_finite("sample_mvn")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::rng::stream;

    fn random_spd(rng: &mut Rng, d: usize) -> Tensor {
        let a = Tensor::new(vec![d, d], rng.normals(d * d)).unwrap();
        let at = a.transpose().unwrap();
        let mut c = crate::numerics::tensor::matmul(&a, &at).unwrap();
        for i in 0..d {
            let v = c.get2(i, i) + 0.1;
            c.set2(i, i, v);
        }
        c
    }

    fn ortho_error(b: &Tensor) -> f64 {
        let btb = crate::numerics::tensor::matmul(&b.transpose().unwrap(), b).unwrap();
        btb.sub(&Tensor::eye(b.rows())).unwrap().norm()
    }

    #[test]
    fn identity_has_unit_eigenvalues() {
        let e = eig_sym(&Tensor::eye(5)).unwrap();
        assert!(e.values.iter().all(|&l| l == 1.0));
        assert!(ortho_error(&e.vectors) < 1e-12);
    }

    #[test]
    fn diagonal_sorted_descending() {
        let c = Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 3.0]]).unwrap();
        let e = eig_sym(&c).unwrap();
        assert_eq!(e.values, vec![3.0, 1.0]);
    }

    #[test]
    fn analytic_two_by_two() {
        let c = Tensor::from_rows(&[vec![2.0, 1.0], vec![1.0, 2.0]]).unwrap();
        let e = eig_sym(&c).unwrap();
        assert!((e.values[0] - 3.0).abs() < 1e-14);
        assert!((e.values[1] - 1.0).abs() < 1e-14);
        let h = std::f64::consts::FRAC_1_SQRT_2;
        let v0 = [e.vectors.get2(0, 0), e.vectors.get2(1, 0)];
        let v1 = [e.vectors.get2(0, 1), e.vectors.get2(1, 1)];
        assert!(((v0[0] * h + v0[1] * h).abs() - 1.0).abs() < 1e-12);
        assert!(((v1[0] * h - v1[1] * h).abs() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn asymmetric_rejected() {
        let c = Tensor::from_rows(&[vec![2.0, 1.0], vec![1.1, 2.0]]).unwrap();
        assert!(matches!(eig_sym(&c), Err(Error::Contract(_))));
    }

    #[test]
    fn random_spd_reconstruction() {
        let mut rng = Rng::new(11, stream::TEST);
        for &d in &[1usize, 2, 3, 8, 17, 32, 64] {
            let c = random_spd(&mut rng, d);
            let e = eig_sym(&c).unwrap();
            let rec = e.reconstruct().sub(&c).unwrap().norm();
            assert!(rec < 1e-9 * c.norm(), "d={d} rec={rec}");
            assert!(ortho_error(&e.vectors) < 1e-9);
            assert!(e.values.windows(2).all(|w| w[0] >= w[1]));
        }
    }

    #[test]
    fn sigma_zero_returns_mean() {
        let e = eig_sym(&Tensor::eye(3)).unwrap();
        let m = Tensor::vector(vec![1.0, 2.0, 3.0]);
        let mut rng = Rng::new(1, 0);
        assert_eq!(sample_mvn(&mut rng, &m, 0.0, &e).unwrap(), m);
    }

    #[test]
    fn fixed_seed_is_deterministic() {
        let e = eig_sym(&Tensor::from_rows(&[vec![2.0, 0.5], vec![0.5, 1.0]]).unwrap()).unwrap();
        let m = Tensor::vector(vec![0.0, 1.0]);
        let a = sample_mvn(&mut Rng::new(5, 1), &m, 0.7, &e).unwrap();
        let b = sample_mvn(&mut Rng::new(5, 1), &m, 0.7, &e).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn unit_covariance_sample_mean() {
        let d = 3;
        let n = 100_000;
        let sigma = 0.5;
        let e = eig_sym(&Tensor::eye(d)).unwrap();
        let m = Tensor::vector(vec![1.0, -2.0, 0.5]);
        let mut rng = Rng::new(99, stream::TEST);
        let mut acc = vec![0.0; d];
        for _ in 0..n {
            let x = sample_mvn(&mut rng, &m, sigma, &e).unwrap();
            for (a, v) in acc.iter_mut().zip(x.data()) {
                *a += v;
            }
        }
        for (a, mu) in acc.iter().zip(m.data()) {
            let bound = 4.0 * sigma / (n as f64).sqrt();
            assert!((a / n as f64 - mu).abs() < bound);
        }
    }

    #[test]
    fn negative_eigenvalue_rejected() {
        let e = SymEigen {
            values: vec![1.0, -1e-3],
            vectors: Tensor::eye(2),
        };
        assert!(matches!(MvnFactor::new(&e), Err(Error::Numeric(_))));
        let tiny = SymEigen {
            values: vec![1.0, -1e-12],
            vectors: Tensor::eye(2),
        };
        assert_eq!(MvnFactor::new(&tiny).unwrap().clamped, 1);
    }

    #[test]
    fn whiten_inverts_factor() {
        let mut rng = Rng::new(3, stream::TEST);
        let c = random_spd(&mut rng, 6);
        let f = MvnFactor::new(&eig_sym(&c).unwrap()).unwrap();
        let y = rng.normals(6);
        // C^{-1/2} applied twice then multiplied by C returns y.
        let w = f.whiten(&f.whiten(&y));
        let back = crate::numerics::tensor::matmul(&c, &Tensor::new(vec![6, 1], w).unwrap()).unwrap();
        for (a, b) in back.data().iter().zip(&y) {
            assert!((a - b).abs() < 1e-8);
        }
    }
}
