//! Sparse-defect generator for synthetic real / generated patch fields.
//!
//! Real patches are i.i.d. `N(0, σ_e² I_D)`. A generated patch adds
//! `a_i s_i μ` with `a_i ~ Bernoulli(ρ)` and a Rademacher sign `s_i`, so its
//! mean stays zero while its second moment rises by `ρ‖μ‖²`.
//!
//! Record `r` draws its base noise from stream `(seed, NOISE, r)` and its
//! defect gates and signs from `(seed, DEFECT, r)`. Real and generated
//! sampling with the same seed therefore share base noise, and records can be
//! produced in any order or in parallel.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::embeddings::{EmbeddingDataset, Label, PatchEmbeddingField};
use crate::error::{invalid, Result};
use crate::par;
use crate::rng::{self, tag};

/// Power-law dilution `μ(K) = c K^{-η} ν` of the defect with patch refinement.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Dilution {
    pub scale: f64,
    pub exponent: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticConfig {
    pub dim: usize,
    pub patches: usize,
    pub sigma_e: f64,
    pub rho: f64,
    /// Defect vector. Under dilution only its direction is used.
    pub mu_defect: Vec<f64>,
    pub dilution: Option<Dilution>,
    /// Lag-one correlation of defect signs along the patch sequence; 0 gives
    /// independent signs.
    pub sign_mixing: f64,
    pub seed: u64,
}

impl SyntheticConfig {
    /// Defect of norm `mu_norm` along the first axis, independent patches.
    pub fn axis_defect(dim: usize, patches: usize, sigma_e: f64, rho: f64, mu_norm: f64, seed: u64) -> Self {
        let mut mu = vec![0.0; dim];
        if dim > 0 {
            mu[0] = mu_norm;
        }
        Self {
            dim,
            patches,
            sigma_e,
            rho,
            mu_defect: mu,
            dilution: None,
            sign_mixing: 0.0,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.patches == 0 {
            return Err(invalid("synthetic dim and patch count must be positive"));
        }
        if !(self.sigma_e > 0.0 && self.sigma_e.is_finite()) {
            return Err(invalid(format!("sigma_e must be > 0, got {}", self.sigma_e)));
        }
        if !(0.0..=1.0).contains(&self.rho) {
            return Err(invalid(format!("rho must lie in [0, 1], got {}", self.rho)));
        }
        if self.mu_defect.len() != self.dim {
            return Err(invalid(format!(
                "mu_defect has {} components, expected {}",
                self.mu_defect.len(),
                self.dim
            )));
        }
        if self.mu_defect.iter().any(|v| !v.is_finite()) {
            return Err(invalid("mu_defect must be finite"));
        }
        if let Some(d) = self.dilution {
            if !(d.scale > 0.0) || !(d.exponent >= 0.0) {
                return Err(invalid(format!(
                    "dilution needs c > 0 and eta >= 0, got c={} eta={}",
                    d.scale, d.exponent
                )));
            }
            if norm(&self.mu_defect) == 0.0 {
                return Err(invalid("dilution needs a nonzero mu_defect direction"));
            }
        }
        if !(0.0..1.0).contains(&self.sign_mixing) {
            return Err(invalid(format!(
                "sign_mixing must lie in [0, 1), got {}",
                self.sign_mixing
            )));
        }
        Ok(())
    }

    /// The defect vector actually applied at this config's patch count.
    pub fn effective_defect(&self) -> Result<Vec<f64>> {
        match self.dilution {
            None => Ok(self.mu_defect.clone()),
            Some(d) => {
                let n = norm(&self.mu_defect);
                let nu: Vec<f64> = self.mu_defect.iter().map(|v| v / n).collect();
                diluted_defect(self.patches, d.scale, d.exponent, &nu)
            }
        }
    }
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// `c K^{-η} ν` for a unit direction `ν`.
pub fn diluted_defect(patches: usize, scale: f64, exponent: f64, nu: &[f64]) -> Result<Vec<f64>> {
    if patches == 0 {
        return Err(invalid("patch count must be at least 1"));
    }
    let n = norm(nu);
    if (n - 1.0).abs() > 1e-9 {
        return Err(invalid(format!("direction must have unit norm, got {n}")));
    }
    let g = scale * (patches as f64).powf(-exponent);
    Ok(nu.iter().map(|v| g * v).collect())
}

fn base_noise(cfg: &SyntheticConfig, record: u64) -> Vec<f64> {
    let mut rng = rng::stream(cfg.seed, &[tag::NOISE, record]);
    (0..cfg.patches * cfg.dim)
        .map(|_| cfg.sigma_e * rng::normal(&mut rng))
        .collect()
}

/// Per-patch defect coefficients `a_i s_i ∈ {-1, 0, 1}` for one record.
fn defect_coefficients(cfg: &SyntheticConfig, record: u64) -> Vec<f64> {
    let mut rng = rng::stream(cfg.seed, &[tag::DEFECT, record]);
    let keep = 0.5 * (1.0 + cfg.sign_mixing);
    let mut prev = 0.0;
    (0..cfg.patches)
        .map(|i| {
            let active = rng.random::<f64>() < cfg.rho;
            let sign = if i == 0 || cfg.sign_mixing == 0.0 {
                rng::rademacher(&mut rng)
            } else if rng.random::<f64>() < keep {
                prev
            } else {
                -prev
            };
            prev = sign;
            if active {
                sign
            } else {
                0.0
            }
        })
        .collect()
}

/// Real field for record index `record`.
pub fn real_field(cfg: &SyntheticConfig, record: u64) -> PatchEmbeddingField {
    PatchEmbeddingField::from_parts_unchecked(cfg.patches, cfg.dim, base_noise(cfg, record))
}

/// Generated field for record index `record`, given the effective defect.
pub fn fake_field(cfg: &SyntheticConfig, defect: &[f64], record: u64) -> PatchEmbeddingField {
    let mut data = base_noise(cfg, record);
    let coeff = defect_coefficients(cfg, record);
    for (patch, &c) in data.chunks_exact_mut(cfg.dim).zip(&coeff) {
        if c != 0.0 {
            for (v, m) in patch.iter_mut().zip(defect) {
                *v += c * m;
            }
        }
    }
    PatchEmbeddingField::from_parts_unchecked(cfg.patches, cfg.dim, data)
}

/// Real fields for records `start..start+n`.
pub fn sample_real_range(cfg: &SyntheticConfig, start: u64, n: usize) -> Result<Vec<PatchEmbeddingField>> {
    cfg.validate()?;
    Ok(par::map_indexed(n, |i| real_field(cfg, start + i as u64)))
}

/// Generated fields for records `start..start+n`.
pub fn sample_fake_range(cfg: &SyntheticConfig, start: u64, n: usize) -> Result<Vec<PatchEmbeddingField>> {
    cfg.validate()?;
    let defect = cfg.effective_defect()?;
    Ok(par::map_indexed(n, |i| fake_field(cfg, &defect, start + i as u64)))
}

pub fn sample_real_fields(cfg: &SyntheticConfig, n: usize) -> Result<Vec<PatchEmbeddingField>> {
    sample_real_range(cfg, 0, n)
}

pub fn sample_fake_fields(cfg: &SyntheticConfig, n: usize) -> Result<Vec<PatchEmbeddingField>> {
    sample_fake_range(cfg, 0, n)
}

/// Labelled dataset wrappers. Real and generated sets drawn for the same
/// experiment should use different seeds so they do not share base noise.
pub fn real_dataset(cfg: &SyntheticConfig, n: usize, id_prefix: &str) -> Result<EmbeddingDataset> {
    let fields = sample_real_fields(cfg, n)?;
    EmbeddingDataset::uniform(cfg.patches, cfg.dim, fields, Label::Real, id_prefix)
}

pub fn fake_dataset(cfg: &SyntheticConfig, n: usize, id_prefix: &str) -> Result<EmbeddingDataset> {
    let fields = sample_fake_fields(cfg, n)?;
    EmbeddingDataset::uniform(cfg.patches, cfg.dim, fields, Label::Generated, id_prefix)
}

impl SyntheticConfig {
    /// Same config under a derived seed, for drawing independent splits.
    pub fn with_stream(&self, keys: &[u64]) -> Self {
        Self {
            seed: rng::derive_seed(self.seed, keys),
            ..self.clone()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(dim: usize, patches: usize, sigma: f64, rho: f64, mu: Vec<f64>) -> SyntheticConfig {
        SyntheticConfig {
            dim,
            patches,
            sigma_e: sigma,
            rho,
            mu_defect: mu,
            dilution: None,
            sign_mixing: 0.0,
            seed: 11,
        }
    }

    #[test]
    fn validation() {
        assert!(cfg(2, 1, 1.0, 1.5, vec![0.0; 2]).validate().is_err());
        assert!(cfg(2, 1, 0.0, 0.5, vec![0.0; 2]).validate().is_err());
        assert!(cfg(2, 1, 1.0, 0.5, vec![0.0; 3]).validate().is_err());
        let mut c = cfg(2, 1, 1.0, 0.5, vec![1.0, 0.0]);
        c.dilution = Some(Dilution {
            scale: 0.0,
            exponent: 0.5,
        });
        assert!(c.validate().is_err());
        c.dilution = Some(Dilution {
            scale: 1.0,
            exponent: -0.1,
        });
        assert!(c.validate().is_err());
        c.dilution = None;
        c.sign_mixing = 1.0;
        assert!(c.validate().is_err());
    }

    #[test]
    fn vanishing_noise() {
        let c = cfg(3, 4, 1e-12, 0.0, vec![0.0; 3]);
        for f in sample_real_fields(&c, 5).unwrap() {
            assert!(f.as_slice().iter().all(|v| v.abs() < 1e-9));
        }
    }

    #[test]
    fn real_sample_mean_clt() {
        let c = cfg(4, 1, 1.0, 0.0, vec![0.0; 4]);
        let fields = sample_real_fields(&c, 10_000).unwrap();
        let bound = 4.0 * 1.0 / (10_000f64).sqrt();
        for j in 0..4 {
            let m = fields.iter().map(|f| f.patch(0)[j]).sum::<f64>() / 10_000.0;
            assert!(m.abs() < bound, "component {j}: mean {m}");
        }
    }

    #[test]
    fn deterministic() {
        let c = cfg(3, 4, 1.0, 0.4, vec![1.0, 2.0, 0.0]);
        assert_eq!(sample_fake_fields(&c, 7).unwrap(), sample_fake_fields(&c, 7).unwrap());
        // range sampling agrees with whole-set sampling
        let all = sample_fake_fields(&c, 7).unwrap();
        assert_eq!(sample_fake_range(&c, 3, 4).unwrap(), all[3..].to_vec());
    }

    #[test]
    fn zero_rho_matches_real() {
        let c = cfg(3, 5, 0.7, 0.0, vec![5.0, 0.0, 0.0]);
        assert_eq!(sample_real_fields(&c, 6).unwrap(), sample_fake_fields(&c, 6).unwrap());
    }

    #[test]
    fn full_defects_are_signed_mu() {
        let c = cfg(2, 100, 1e-12, 1.0, vec![3.0, 0.0]);
        let fields = sample_fake_fields(&c, 100).unwrap();
        let mut plus = 0usize;
        for f in &fields {
            for p in f.iter_patches() {
                assert!((p[0].abs() - 3.0).abs() < 1e-9 && p[1].abs() < 1e-9);
                if p[0] > 0.0 {
                    plus += 1;
                }
            }
        }
        let frac = plus as f64 / 10_000.0;
        assert!((frac - 0.5).abs() < 4.0 * (0.25f64 / 10_000.0).sqrt(), "{frac}");
    }

    #[test]
    fn fake_mean_is_zero() {
        let c = cfg(2, 10, 1.0, 0.5, vec![2.0, 0.0]);
        let fields = sample_fake_fields(&c, 10_000).unwrap();
        let n = 100_000.0;
        // per-component variance is σ² + ρ μ_j²
        for (j, mu) in [2.0f64, 0.0].iter().enumerate() {
            let m = fields
                .iter()
                .flat_map(|f| f.iter_patches().map(move |p| p[j]))
                .sum::<f64>()
                / n;
            let sd = (1.0 + 0.5 * mu * mu).sqrt() / n.sqrt();
            assert!(m.abs() < 4.0 * sd, "component {j}: {m}");
        }
    }

    #[test]
    fn second_moment_lift() {
        let c = cfg(3, 8, 1.0, 0.3, vec![2.0, 1.0, 0.0]);
        let n = 5_000;
        let real = sample_real_fields(&c.with_stream(&[1]), n).unwrap();
        let fake = sample_fake_fields(&c.with_stream(&[2]), n).unwrap();
        let energy = |fs: &[PatchEmbeddingField]| -> Vec<f64> {
            fs.iter()
                .flat_map(|f| f.iter_patches().map(|p| p.iter().map(|v| v * v).sum::<f64>()))
                .collect()
        };
        let (er, ef) = (energy(&real), energy(&fake));
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
        let var = |v: &[f64]| {
            let m = mean(v);
            v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (v.len() - 1) as f64
        };
        let lift = mean(&ef) - mean(&er);
        let se = (var(&ef) / ef.len() as f64 + var(&er) / er.len() as f64).sqrt();
        let predicted = 0.3 * 5.0;
        assert!((lift - predicted).abs() < 5.0 * se, "lift {lift} se {se}");
    }

    #[test]
    fn dilution_values() {
        let nu = [1.0, 0.0];
        assert_eq!(diluted_defect(1, 2.5, 0.7, &nu).unwrap(), vec![2.5, 0.0]);
        assert_eq!(diluted_defect(64, 2.5, 0.0, &nu).unwrap(), vec![2.5, 0.0]);
        assert_eq!(diluted_defect(4, 2.0, 0.5, &nu).unwrap(), vec![1.0, 0.0]);
        assert!(diluted_defect(4, 2.0, 0.5, &[1.0, 1.0]).is_err());
    }

    #[test]
    fn sign_mixing_correlates_neighbours() {
        let mut c = cfg(1, 64, 1e-12, 1.0, vec![1.0]);
        c.sign_mixing = 0.8;
        let fields = sample_fake_fields(&c, 200).unwrap();
        let mut acc = 0.0;
        let mut cnt = 0.0;
        for f in &fields {
            for i in 1..64 {
                acc += f.patch(i)[0] * f.patch(i - 1)[0];
                cnt += 1.0;
            }
        }
        let corr = acc / cnt;
        assert!((corr - 0.8).abs() < 0.05, "{corr}");
    }
}
