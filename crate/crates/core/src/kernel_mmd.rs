//! Gaussian deep kernel, MMD² estimators, the H₁ variance estimate, and the
//! regularized test-power objective with its reverse-mode gradient.
//!
//! Kernel inputs are flattened signature fields: anything that is
//! `AsRef<[f64]>`, typically [`PfsField`]. The kernel compares whole fields
//! with the Frobenius distance, so two fields are one point each.

use serde::{Deserialize, Serialize};

use crate::embeddings::PatchEmbeddingField;
use crate::error::{invalid, shape, Result};
use crate::par;
use crate::pfs::{self, PfsField, PfsGradients, PfsParams};

/// Default regularizer added to the variance before the square root.
pub const DEFAULT_LAMBDA: f64 = 1e-8;

#[inline]
pub fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

#[inline]
fn kernel_from_sq(sq: f64, gamma: f64) -> f64 {
    (-sq / (2.0 * gamma * gamma)).exp()
}

fn check_gamma(gamma: f64) -> Result<()> {
    if gamma > 0.0 && gamma.is_finite() {
        Ok(())
    } else {
        Err(invalid(format!("bandwidth must be positive, got {gamma}")))
    }
}

/// `exp(-‖a - b‖² / 2γ²)` on flattened fields.
pub fn gaussian_kernel(a: &[f64], b: &[f64], gamma: f64) -> Result<f64> {
    check_gamma(gamma)?;
    if a.len() != b.len() {
        return Err(shape(format!("kernel inputs of length {} and {}", a.len(), b.len())));
    }
    Ok(kernel_from_sq(squared_distance(a, b), gamma))
}

/// Kernel without bandwidth or length checks, for hot loops whose inputs
/// were validated upstream.
#[inline]
pub(crate) fn gaussian_kernel_unchecked(a: &[f64], b: &[f64], gamma: f64) -> f64 {
    kernel_from_sq(squared_distance(a, b), gamma)
}

/// Deep kernel between two signature fields of equal shape.
pub fn deep_kernel(zx: &PfsField, zy: &PfsField, gamma: f64) -> Result<f64> {
    if zx.patches() != zy.patches() || zx.dim() != zy.dim() {
        return Err(shape(format!(
            "fields {}x{} and {}x{}",
            zx.patches(),
            zx.dim(),
            zy.patches(),
            zy.dim()
        )));
    }
    gaussian_kernel(zx.as_slice(), zy.as_slice(), gamma)
}

fn common_len<S: AsRef<[f64]>>(sets: &[&[S]]) -> Result<usize> {
    let mut len = None;
    for set in sets {
        for s in *set {
            let l = s.as_ref().len();
            match len {
                None => len = Some(l),
                Some(prev) if prev != l => return Err(shape(format!("fields of length {prev} and {l}"))),
                _ => {}
            }
        }
    }
    Ok(len.unwrap_or(0))
}

/// Kernel matrices over two equal-size batches plus the H matrix
/// `H_ij = Kxx_ij + Kyy_ij - Kxy_ij - Kxy_ji`. All matrices are N×N row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct KernelMatrixBundle {
    pub n: usize,
    pub gamma: f64,
    pub kxx: Vec<f64>,
    pub kyy: Vec<f64>,
    pub kxy: Vec<f64>,
    pub h: Vec<f64>,
    pub(crate) dxx: Vec<f64>,
    pub(crate) dyy: Vec<f64>,
    pub(crate) dxy: Vec<f64>,
}

fn distance_matrix<A: AsRef<[f64]> + Sync, B: AsRef<[f64]> + Sync>(rows: &[A], cols: &[B]) -> Vec<f64> {
    let m = cols.len();
    let mut out = vec![0.0; rows.len() * m];
    par::fill_rows(&mut out, m, |i, row| {
        let a = rows[i].as_ref();
        for (j, slot) in row.iter_mut().enumerate() {
            *slot = squared_distance(a, cols[j].as_ref());
        }
    });
    out
}

impl KernelMatrixBundle {
    pub fn compute<S: AsRef<[f64]> + Sync>(sx: &[S], sy: &[S], gamma: f64) -> Result<Self> {
        check_gamma(gamma)?;
        if sx.len() != sy.len() {
            return Err(shape(format!("batch sizes {} and {}", sx.len(), sy.len())));
        }
        common_len(&[sx, sy])?;
        let n = sx.len();
        let dxx = distance_matrix(sx, sx);
        let dyy = distance_matrix(sy, sy);
        let dxy = distance_matrix(sx, sy);
        let k = |d: &Vec<f64>| d.iter().map(|&v| kernel_from_sq(v, gamma)).collect::<Vec<_>>();
        let (kxx, kyy, kxy) = (k(&dxx), k(&dyy), k(&dxy));
        let mut h = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..n {
                h[i * n + j] = kxx[i * n + j] + kyy[i * n + j] - kxy[i * n + j] - kxy[j * n + i];
            }
        }
        Ok(Self {
            n,
            gamma,
            kxx,
            kyy,
            kxy,
            h,
            dxx,
            dyy,
            dxy,
        })
    }

    /// Unbiased estimate `Σ_{i≠j} H_ij / (N(N-1))`.
    pub fn mmd2_unbiased(&self) -> Result<f64> {
        let n = self.n;
        if n < 2 {
            return Err(invalid(format!("unbiased MMD needs N >= 2, got {n}")));
        }
        let mut total = 0.0;
        for i in 0..n {
            for j in 0..n {
                if i != j {
                    total += self.h[i * n + j];
                }
            }
        }
        Ok(total / (n * (n - 1)) as f64)
    }

    /// Biased estimate `Σ_ij H_ij / N²`.
    pub fn mmd2_biased(&self) -> f64 {
        let n = self.n as f64;
        (self.h.iter().sum::<f64>() / (n * n)).max(0.0)
    }

    pub fn variance_h1(&self) -> Result<f64> {
        variance_h1(&self.h)
    }
}

/// Unbiased MMD² between two equal-size batches, dropping `i = j` terms.
pub fn mmd2_unbiased<S: AsRef<[f64]> + Sync>(sx: &[S], sy: &[S], gamma: f64) -> Result<f64> {
    if sx.len() < 2 || sy.len() < 2 {
        return Err(invalid("unbiased MMD needs at least two samples per set"));
    }
    KernelMatrixBundle::compute(sx, sy, gamma)?.mmd2_unbiased()
}

/// Unbiased MMD² for sets of possibly different size `m, n ≥ 2`, dropping
/// only the within-set diagonals.
pub fn mmd2_unbiased_unpaired<A, B>(sx: &[A], sy: &[B], gamma: f64) -> Result<f64>
where
    A: AsRef<[f64]> + Sync,
    B: AsRef<[f64]> + Sync,
{
    check_gamma(gamma)?;
    let (m, n) = (sx.len(), sy.len());
    if m < 2 || n < 2 {
        return Err(invalid("unbiased MMD needs at least two samples per set"));
    }
    let off_diag = |d: &[f64], size: usize| -> f64 {
        let mut s = 0.0;
        for i in 0..size {
            for j in 0..size {
                if i != j {
                    s += kernel_from_sq(d[i * size + j], gamma);
                }
            }
        }
        s / (size * (size - 1)) as f64
    };
    let dxx = distance_matrix(sx, sx);
    let dyy = distance_matrix(sy, sy);
    let dxy = distance_matrix(sx, sy);
    if sx[0].as_ref().len() != sy[0].as_ref().len() {
        return Err(shape("fields of different length"));
    }
    let cross: f64 = dxy.iter().map(|&d| kernel_from_sq(d, gamma)).sum::<f64>() / (m * n) as f64;
    Ok(off_diag(&dxx, m) + off_diag(&dyy, n) - 2.0 * cross)
}

/// Sequential, matrix-free form of [`mmd2_unbiased_unpaired`] for callers that
/// already parallelize over many small problems. Inputs are not validated.
pub(crate) fn mmd2_unbiased_lean<A: AsRef<[f64]>, B: AsRef<[f64]>>(sx: &[A], sy: &[B], gamma: f64) -> f64 {
    fn within<S: AsRef<[f64]>>(s: &[S], gamma: f64) -> f64 {
        let n = s.len();
        let mut acc = 0.0;
        for i in 0..n {
            let mut row = 0.0;
            for j in (i + 1)..n {
                row += kernel_from_sq(squared_distance(s[i].as_ref(), s[j].as_ref()), gamma);
            }
            acc += row;
        }
        2.0 * acc / (n * (n - 1)) as f64
    }
    let mut xy = 0.0;
    for x in sx {
        let mut row = 0.0;
        for y in sy {
            row += kernel_from_sq(squared_distance(x.as_ref(), y.as_ref()), gamma);
        }
        xy += row;
    }
    within(sx, gamma) + within(sy, gamma) - 2.0 * xy / (sx.len() * sy.len()) as f64
}

/// V-statistic MMD² between the empirical distributions of two nonempty sets.
pub fn mmd2_biased<A, B>(sx: &[A], sy: &[B], gamma: f64) -> Result<f64>
where
    A: AsRef<[f64]> + Sync,
    B: AsRef<[f64]> + Sync,
{
    check_gamma(gamma)?;
    if sx.is_empty() || sy.is_empty() {
        return Err(invalid("biased MMD needs nonempty sets"));
    }
    if sx[0].as_ref().len() != sy[0].as_ref().len() {
        return Err(shape("fields of different length"));
    }
    common_len(&[sx])?;
    common_len(&[sy])?;
    let mean_k = |d: Vec<f64>| d.iter().map(|&v| kernel_from_sq(v, gamma)).sum::<f64>() / d.len() as f64;
    let xx = mean_k(distance_matrix(sx, sx));
    let yy = mean_k(distance_matrix(sy, sy));
    let xy = mean_k(distance_matrix(sx, sy));
    Ok((xx + yy - 2.0 * xy).max(0.0))
}

fn square_side(h: &[f64]) -> Result<usize> {
    let n = (h.len() as f64).sqrt().round() as usize;
    if n * n != h.len() || n == 0 {
        return Err(shape(format!("H with {} entries is not a nonempty square", h.len())));
    }
    Ok(n)
}

fn variance_raw(h: &[f64]) -> Result<(f64, Vec<f64>, f64)> {
    let n = square_side(h)?;
    let rows: Vec<f64> = h.chunks_exact(n).map(|r| r.iter().sum()).collect();
    let total: f64 = rows.iter().sum();
    let nf = n as f64;
    let sq: f64 = rows.iter().map(|r| r * r).sum();
    let v = 4.0 / (nf * nf * nf) * sq - 4.0 / (nf * nf * nf * nf) * total * total;
    Ok((v, rows, total))
}

/// `σ̂²_H1 = 4/N³ Σ_i (Σ_j H_ij)² - 4/N⁴ (Σ_ij H_ij)²`, clamped at zero.
/// `h` is a row-major N×N matrix.
pub fn variance_h1(h: &[f64]) -> Result<f64> {
    Ok(variance_raw(h)?.0.max(0.0))
}

/// Value of the test-power objective and its parts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObjectiveValue {
    pub j: f64,
    pub mmd2: f64,
    pub variance: f64,
    pub gamma: f64,
}

fn check_lambda(lambda: f64) -> Result<()> {
    if lambda > 0.0 && lambda.is_finite() {
        Ok(())
    } else {
        Err(invalid(format!("lambda must be positive, got {lambda}")))
    }
}

/// `J = MMD²_u / sqrt(σ̂²_H1 + λ)` on signature fields.
pub fn test_power_objective_signatures<S: AsRef<[f64]> + Sync>(
    zx: &[S],
    zy: &[S],
    gamma: f64,
    lambda: f64,
) -> Result<(ObjectiveValue, KernelMatrixBundle)> {
    check_lambda(lambda)?;
    let bundle = KernelMatrixBundle::compute(zx, zy, gamma)?;
    let mmd2 = bundle.mmd2_unbiased()?;
    let variance = bundle.variance_h1()?;
    let j = mmd2 / (variance + lambda).sqrt();
    Ok((
        ObjectiveValue {
            j,
            mmd2,
            variance,
            gamma,
        },
        bundle,
    ))
}

/// Objective on raw embedding batches, projected in eval mode under `params`.
pub fn test_power_objective(
    sx: &[PatchEmbeddingField],
    sy: &[PatchEmbeddingField],
    params: &PfsParams,
    lambda: f64,
) -> Result<(ObjectiveValue, KernelMatrixBundle)> {
    let zx = pfs::project_all(sx, params)?;
    let zy = pfs::project_all(sy, params)?;
    test_power_objective_signatures(&zx, &zy, params.gamma(), lambda)
}

/// Gradient of J with respect to every signature entry and to log γ.
#[derive(Debug, Clone, PartialEq)]
pub struct SignatureGradients {
    pub value: ObjectiveValue,
    pub d_zx: Vec<Vec<f64>>,
    pub d_zy: Vec<Vec<f64>>,
    pub d_log_gamma: f64,
}

pub fn objective_signature_gradients<S: AsRef<[f64]> + Sync>(
    zx: &[S],
    zy: &[S],
    gamma: f64,
    lambda: f64,
) -> Result<SignatureGradients> {
    check_lambda(lambda)?;
    let b = KernelMatrixBundle::compute(zx, zy, gamma)?;
    let n = b.n;
    let mmd2 = b.mmd2_unbiased()?;
    let (v_raw, rows, total) = variance_raw(&b.h)?;
    let variance = v_raw.max(0.0);
    let s = (variance + lambda).sqrt();
    let j = mmd2 / s;

    // dJ/dH_ij
    let nf = n as f64;
    let a_mmd = 1.0 / s / (nf * (nf - 1.0));
    let a_var = if v_raw > 0.0 { -mmd2 / (2.0 * s * s * s) } else { 0.0 };
    let c_row = 8.0 / (nf * nf * nf);
    let c_tot = 8.0 / (nf * nf * nf * nf) * total;
    let mut g = vec![0.0; n * n];
    for i in 0..n {
        let dv = a_var * (c_row * rows[i] - c_tot);
        for jx in 0..n {
            let dm = if i == jx { 0.0 } else { a_mmd };
            g[i * n + jx] = dm + dv;
        }
    }

    let inv_g2 = 1.0 / (gamma * gamma);
    // Each row task returns (d_zx[i], d_zy[i], its share of d log γ).
    let per_row = par::map_indexed(n, |i| {
        let xi = zx[i].as_ref();
        let yi = zy[i].as_ref();
        let len = xi.len();
        let mut dx = vec![0.0; len];
        let mut dy = vec![0.0; len];
        let mut dlg = 0.0;
        for jx in 0..n {
            let gs = g[i * n + jx] + g[jx * n + i];
            let xj = zx[jx].as_ref();
            let yj = zy[jx].as_ref();
            // Kxx_ij, Kyy_ij through both arguments
            let wxx = gs * b.kxx[i * n + jx];
            let wyy = gs * b.kyy[i * n + jx];
            // Kxy_ij = k(x_i, y_j) as seen from x_i; Kxy_ji = k(x_j, y_i) as seen from y_i
            let wxy_x = -(g[i * n + jx] + g[jx * n + i]) * b.kxy[i * n + jx];
            let wxy_y = -(g[jx * n + i] + g[i * n + jx]) * b.kxy[jx * n + i];
            for c in 0..len {
                dx[c] -= inv_g2 * (wxx * (xi[c] - xj[c]) + wxy_x * (xi[c] - yj[c]));
                dy[c] -= inv_g2 * (wyy * (yi[c] - yj[c]) + wxy_y * (yi[c] - xj[c]));
            }
            let gij = g[i * n + jx];
            dlg += gij * b.kxx[i * n + jx] * b.dxx[i * n + jx] + gij * b.kyy[i * n + jx] * b.dyy[i * n + jx]
                - gs * b.kxy[i * n + jx] * b.dxy[i * n + jx];
        }
        (dx, dy, dlg * inv_g2)
    });
    let mut d_zx = Vec::with_capacity(n);
    let mut d_zy = Vec::with_capacity(n);
    let mut d_log_gamma = 0.0;
    for (dx, dy, dlg) in per_row {
        d_zx.push(dx);
        d_zy.push(dy);
        d_log_gamma += dlg;
    }
    Ok(SignatureGradients {
        value: ObjectiveValue {
            j,
            mmd2,
            variance,
            gamma,
        },
        d_zx,
        d_zy,
        d_log_gamma,
    })
}

/// Analytic gradient of J with respect to every projection weight and log γ,
/// evaluated with the projection in eval mode.
pub fn objective_gradients(
    sx: &[PatchEmbeddingField],
    sy: &[PatchEmbeddingField],
    params: &PfsParams,
    lambda: f64,
) -> Result<(ObjectiveValue, PfsGradients)> {
    pfs::objective_and_gradients(sx, sy, params, lambda, None)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pts(v: &[f64]) -> Vec<Vec<f64>> {
        v.iter().map(|&x| vec![x]).collect()
    }

    #[test]
    fn kernel_values() {
        assert_eq!(gaussian_kernel(&[0.3, -1.0], &[0.3, -1.0], 0.7).unwrap(), 1.0);
        let k = gaussian_kernel(&[0.0], &[1.0], 1.0).unwrap();
        assert!((k - (-0.5f64).exp()).abs() < 1e-15);
        let k = gaussian_kernel(&[0.0, 0.0], &[3.0, 4.0], 5.0).unwrap();
        assert!((k - (-0.5f64).exp()).abs() < 1e-15);
        assert!(gaussian_kernel(&[0.0], &[1.0], 0.0).is_err());
        assert!(gaussian_kernel(&[0.0], &[1.0, 2.0], 1.0).is_err());
    }

    #[test]
    fn deep_kernel_shape_check() {
        let a = PfsField::new(2, 1, vec![0.0, 0.0]).unwrap();
        let b = PfsField::new(1, 2, vec![0.0, 0.0]).unwrap();
        assert!(deep_kernel(&a, &b, 1.0).is_err());
        assert_eq!(deep_kernel(&a, &a, 1.0).unwrap(), 1.0);
    }

    #[test]
    fn unbiased_paired_identity_is_zero() {
        let s = pts(&[0.1, -0.4, 0.9, 0.2]);
        assert_eq!(mmd2_unbiased(&s, &s, 0.8).unwrap(), 0.0);
    }

    #[test]
    fn unbiased_hand_example() {
        let v = mmd2_unbiased(&pts(&[0.0, 0.0]), &pts(&[2.0, 2.0]), 1.0).unwrap();
        let expected = 2.0 - 2.0 * (-2.0f64).exp();
        assert!((v - expected).abs() < 1e-15);
        assert!((v - 1.729329).abs() < 1e-6);
    }

    #[test]
    fn unbiased_errors() {
        assert!(mmd2_unbiased(&pts(&[0.0]), &pts(&[1.0]), 1.0).is_err());
        assert!(mmd2_unbiased(&pts(&[0.0, 1.0]), &pts(&[1.0, 2.0, 3.0]), 1.0).is_err());
    }

    #[test]
    fn biased_two_point() {
        let r: f64 = 1.3;
        let g: f64 = 0.6;
        let v = mmd2_biased(&[vec![0.0, 0.0]], &[vec![r, 0.0]], g).unwrap();
        let expected = 2.0 * (1.0 - (-r * r / (2.0 * g * g)).exp());
        assert!((v - expected).abs() < 1e-15);
        let s = pts(&[0.5, 0.1]);
        assert_eq!(mmd2_biased(&s, &s, 1.0).unwrap(), 0.0);
        assert!(mmd2_biased::<Vec<f64>, Vec<f64>>(&[], &s, 1.0).is_err());
    }

    #[test]
    fn variance_examples() {
        assert_eq!(variance_h1(&[0.7; 9]).unwrap(), 0.0);
        assert_eq!(variance_h1(&[0.0, 1.0, 1.0, 0.0]).unwrap(), 0.0);
        let v = variance_h1(&[0.0, 1.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 0.0]).unwrap();
        assert_eq!(v, 8.0 / 81.0);
        assert!(variance_h1(&[1.0, 2.0, 3.0]).is_err());
    }

    #[test]
    fn objective_examples() {
        let s = pts(&[0.1, 0.5, -0.3]);
        let (o, _) = test_power_objective_signatures(&s, &s, 1.0, 1e-8).unwrap();
        assert_eq!(o.j, 0.0);

        let (o, _) = test_power_objective_signatures(&pts(&[0.0, 0.0]), &pts(&[2.0, 2.0]), 1.0, 1.0).unwrap();
        assert!((o.j - (2.0 - 2.0 * (-2.0f64).exp())).abs() < 1e-15);

        // constant H: variance zero, J = MMD² / sqrt(λ)
        let (o, _) = test_power_objective_signatures(&pts(&[0.0, 0.0]), &pts(&[2.0, 2.0]), 1.0, 1e-8).unwrap();
        assert_eq!(o.variance, 0.0);
        assert!((o.j - o.mmd2 * 1e4).abs() < 1e-9 * o.j);
        assert!(test_power_objective_signatures(&s, &s, 1.0, 0.0).is_err());
    }

    #[test]
    fn log_gamma_gradient_two_point() {
        // J = (2 - 2k)/sqrt(λ) with k = exp(-2/γ²); dJ/dlogγ = -2 k (4/γ²) / sqrt(λ)
        for &gamma in &[0.7, 1.0, 1.9] {
            let lambda: f64 = 0.5;
            let g = objective_signature_gradients(&pts(&[0.0, 0.0]), &pts(&[2.0, 2.0]), gamma, lambda).unwrap();
            let k = (-2.0 / (gamma * gamma)).exp();
            let expected = -2.0 * k * 4.0 / (gamma * gamma) / lambda.sqrt();
            assert!(
                (g.d_log_gamma - expected).abs() < 1e-12 * expected.abs().max(1.0),
                "γ={gamma}: {} vs {expected}",
                g.d_log_gamma
            );
        }
    }

    #[test]
    fn paired_identity_gradient_is_zero() {
        let s = vec![vec![0.1, 0.2], vec![-0.3, 0.5], vec![0.7, -0.1]];
        let g = objective_signature_gradients(&s, &s, 0.9, 1e-3).unwrap();
        assert_eq!(g.value.j, 0.0);
        assert!(g.d_zx.iter().flatten().all(|v| *v == 0.0));
        assert!(g.d_zy.iter().flatten().all(|v| *v == 0.0));
        assert_eq!(g.d_log_gamma, 0.0);
    }

    #[test]
    fn signature_gradient_matches_finite_differences() {
        let zx = vec![vec![0.1, -0.2], vec![0.4, 0.3], vec![-0.5, 0.05], vec![0.2, 0.6]];
        let zy = vec![vec![0.3, 0.1], vec![-0.6, 0.4], vec![0.9, -0.3], vec![0.0, -0.7]];
        let (gamma, lambda) = (0.8, 1e-3);
        let g = objective_signature_gradients(&zx, &zy, gamma, lambda).unwrap();
        let j = |zx: &[Vec<f64>], zy: &[Vec<f64>], gamma: f64| {
            test_power_objective_signatures(zx, zy, gamma, lambda).unwrap().0.j
        };
        let h = 1e-6;
        for i in 0..4 {
            for c in 0..2 {
                let mut p = zx.clone();
                let mut m = zx.clone();
                p[i][c] += h;
                m[i][c] -= h;
                let fd = (j(&p, &zy, gamma) - j(&m, &zy, gamma)) / (2.0 * h);
                assert!((fd - g.d_zx[i][c]).abs() < 1e-6 * fd.abs().max(1.0), "x {i},{c}");
                let mut p = zy.clone();
                let mut m = zy.clone();
                p[i][c] += h;
                m[i][c] -= h;
                let fd = (j(&zx, &p, gamma) - j(&zx, &m, gamma)) / (2.0 * h);
                assert!((fd - g.d_zy[i][c]).abs() < 1e-6 * fd.abs().max(1.0), "y {i},{c}");
            }
        }
        let lg = gamma.ln();
        let fd = (j(&zx, &zy, (lg + h).exp()) - j(&zx, &zy, (lg - h).exp())) / (2.0 * h);
        assert!((fd - g.d_log_gamma).abs() < 1e-6 * fd.abs().max(1.0));
    }
}
