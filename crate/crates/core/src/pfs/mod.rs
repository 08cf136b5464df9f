//! Patch forensic signatures: a one-hidden-layer projection applied to every
//! patch embedding independently, `z = tanh(W₂ᵀ act(W₁ᵀ e + b₁) + b₂)`.
//!
//! The hidden activation is smooth (GELU by default) so the projection is
//! twice differentiable everywhere; [`hessian_quadratic_form`] exposes its
//! second directional derivative.

mod checkpoint;
mod train;

use rand::Rng;
use serde::{Deserialize, Serialize};

pub use checkpoint::{
    decode_checkpoint, encode_checkpoint, read_checkpoint, write_checkpoint, PFSP_MAGIC, PFSP_VERSION,
};
pub use train::{train, train_from, TrainConfig, TrainHistory, TrainStep};

use crate::embeddings::PatchEmbeddingField;
use crate::error::{invalid, shape, Error, Result};
use crate::kernel_mmd::{self, ObjectiveValue};
use crate::par;
use crate::rng::{self, tag};

/// Smooth hidden nonlinearity.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    /// `0.5 x (1 + tanh(√(2/π)(x + 0.044715 x³)))`
    #[default]
    Gelu,
    Tanh,
}

const GELU_C: f64 = 0.797_884_560_802_865_4;
const GELU_K: f64 = 0.044_715;

impl Activation {
    /// Value and first two derivatives.
    #[inline]
    pub fn eval(self, x: f64) -> (f64, f64, f64) {
        match self {
            Activation::Gelu => {
                let s = GELU_C * (x + GELU_K * x * x * x);
                let s1 = GELU_C * (1.0 + 3.0 * GELU_K * x * x);
                let s2 = 6.0 * GELU_C * GELU_K * x;
                let t = s.tanh();
                let sech2 = 1.0 - t * t;
                let t1 = sech2 * s1;
                let t2 = -2.0 * t * t1 * s1 + sech2 * s2;
                (0.5 * x * (1.0 + t), 0.5 * (1.0 + t) + 0.5 * x * t1, t1 + 0.5 * x * t2)
            }
            Activation::Tanh => {
                let t = x.tanh();
                let sech2 = 1.0 - t * t;
                (t, sech2, -2.0 * t * sech2)
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Projection weights θ and the kernel log-bandwidth.
#[derive(Debug, Clone, PartialEq)]
pub struct PfsParams {
    pub(crate) input_dim: usize,
    pub(crate) hidden: usize,
    pub(crate) output_dim: usize,
    pub dropout_rate: f64,
    pub log_gamma: f64,
    pub activation: Activation,
    /// D×H, row-major.
    pub w1: Vec<f64>,
    pub b1: Vec<f64>,
    /// H×d, row-major.
    pub w2: Vec<f64>,
    pub b2: Vec<f64>,
}

impl PfsParams {
    pub fn zeros(input_dim: usize, hidden: usize, output_dim: usize) -> Result<Self> {
        if input_dim == 0 || hidden == 0 || output_dim == 0 {
            return Err(invalid("projection dimensions must be positive"));
        }
        Ok(Self {
            input_dim,
            hidden,
            output_dim,
            dropout_rate: 0.0,
            log_gamma: 0.0,
            activation: Activation::Gelu,
            w1: vec![0.0; input_dim * hidden],
            b1: vec![0.0; hidden],
            w2: vec![0.0; hidden * output_dim],
            b2: vec![0.0; output_dim],
        })
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn hidden(&self) -> usize {
        self.hidden
    }

    pub fn output_dim(&self) -> usize {
        self.output_dim
    }

    pub fn gamma(&self) -> f64 {
        self.log_gamma.exp()
    }

    pub fn with_dropout(mut self, rate: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&rate) {
            return Err(invalid(format!("dropout rate {rate} must lie in [0, 1)")));
        }
        self.dropout_rate = rate;
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        let (d, h, o) = (self.input_dim, self.hidden, self.output_dim);
        if d == 0 || h == 0 || o == 0 {
            return Err(invalid("projection dimensions must be positive"));
        }
        if self.w1.len() != d * h || self.b1.len() != h || self.w2.len() != h * o || self.b2.len() != o {
            return Err(shape("parameter tensor sizes disagree with dimensions"));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(invalid(format!(
                "dropout rate {} must lie in [0, 1)",
                self.dropout_rate
            )));
        }
        let finite = self
            .w1
            .iter()
            .chain(&self.b1)
            .chain(&self.w2)
            .chain(&self.b2)
            .all(|v| v.is_finite());
        if !finite || !self.log_gamma.is_finite() {
            return Err(Error::NonFinite("projection parameters"));
        }
        Ok(())
    }

    fn tensors_mut(&mut self) -> [&mut [f64]; 4] {
        [&mut self.w1, &mut self.b1, &mut self.w2, &mut self.b2]
    }
}

/// Fan-in scaled uniform weights, zero biases, γ = 1.
pub fn init_params(input_dim: usize, hidden: usize, output_dim: usize, seed: u64) -> Result<PfsParams> {
    let mut p = PfsParams::zeros(input_dim, hidden, output_dim)?;
    let mut rng = rng::stream(seed, &[tag::INIT]);
    let a1 = 1.0 / (input_dim as f64).sqrt();
    p.w1.iter_mut().for_each(|w| *w = rng.random_range(-a1..a1));
    let a2 = 1.0 / (hidden as f64).sqrt();
    p.w2.iter_mut().for_each(|w| *w = rng.random_range(-a2..a2));
    p.log_gamma = 1.0f64.ln();
    Ok(p)
}

/// K signature vectors of dimension d, each component in [-1, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct PfsField {
    patches: usize,
    dim: usize,
    data: Vec<f64>,
}

impl PfsField {
    pub fn new(patches: usize, dim: usize, data: Vec<f64>) -> Result<Self> {
        if patches == 0 || dim == 0 || data.len() != patches * dim {
            return Err(shape(format!(
                "{patches}x{dim} signature field with {} values",
                data.len()
            )));
        }
        if data.iter().any(|v| !(-1.0..=1.0).contains(v)) {
            return Err(invalid("signature components must lie in [-1, 1]"));
        }
        Ok(Self { patches, dim, data })
    }

    pub fn patches(&self) -> usize {
        self.patches
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn patch(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }
}

impl AsRef<[f64]> for PfsField {
    fn as_ref(&self) -> &[f64] {
        &self.data
    }
}

/// Per-field activations kept for the backward pass.
struct ForwardCache {
    pre: Vec<f64>,
    /// Hidden outputs after dropout scaling.
    hidden: Vec<f64>,
    mask: Option<Vec<f64>>,
    z: Vec<f64>,
}

fn check_field(field: &PatchEmbeddingField, params: &PfsParams) -> Result<()> {
    if field.dim() != params.input_dim {
        return Err(shape(format!(
            "embedding dimension {} but projection expects {}",
            field.dim(),
            params.input_dim
        )));
    }
    Ok(())
}

fn dropout_mask<R: Rng + ?Sized>(len: usize, rate: f64, rng: &mut R) -> Vec<f64> {
    let keep = 1.0 / (1.0 - rate);
    (0..len)
        .map(|_| if rng.random::<f64>() < rate { 0.0 } else { keep })
        .collect()
}

fn forward_cached(field: &PatchEmbeddingField, params: &PfsParams, mask: Option<Vec<f64>>) -> ForwardCache {
    let (d_in, h_dim, d_out) = (params.input_dim, params.hidden, params.output_dim);
    let k = field.patches();
    let mut pre = vec![0.0; k * h_dim];
    let mut hidden = vec![0.0; k * h_dim];
    let mut z = vec![0.0; k * d_out];
    for (p, e) in field.iter_patches().enumerate() {
        let a = &mut pre[p * h_dim..(p + 1) * h_dim];
        a.copy_from_slice(&params.b1);
        for (j, &ej) in e.iter().enumerate().take(d_in) {
            if ej != 0.0 {
                let row = &params.w1[j * h_dim..(j + 1) * h_dim];
                for (ah, w) in a.iter_mut().zip(row) {
                    *ah += ej * w;
                }
            }
        }
        let hrow = &mut hidden[p * h_dim..(p + 1) * h_dim];
        for h in 0..h_dim {
            let mut v = params.activation.eval(a[h]).0;
            if let Some(m) = &mask {
                v *= m[p * h_dim + h];
            }
            hrow[h] = v;
        }
        let out = &mut z[p * d_out..(p + 1) * d_out];
        out.copy_from_slice(&params.b2);
        for (h, &hv) in hrow.iter().enumerate() {
            if hv != 0.0 {
                let row = &params.w2[h * d_out..(h + 1) * d_out];
                for (o, w) in out.iter_mut().zip(row) {
                    *o += hv * w;
                }
            }
        }
        out.iter_mut().for_each(|o| *o = o.tanh());
    }
    ForwardCache { pre, hidden, mask, z }
}

/// Projects every patch of `field`. Train mode applies inverted dropout with
/// masks drawn from `rng`; eval mode is deterministic and ignores `rng`.
pub fn pfs_forward<R: Rng + ?Sized>(
    field: &PatchEmbeddingField,
    params: &PfsParams,
    mode: Mode,
    rng: &mut R,
) -> Result<PfsField> {
    check_field(field, params)?;
    let mask = (mode == Mode::Train && params.dropout_rate > 0.0)
        .then(|| dropout_mask(field.patches() * params.hidden, params.dropout_rate, rng));
    let cache = forward_cached(field, params, mask);
    Ok(PfsField {
        patches: field.patches(),
        dim: params.output_dim,
        data: cache.z,
    })
}

/// Eval-mode projection.
pub fn project(field: &PatchEmbeddingField, params: &PfsParams) -> Result<PfsField> {
    check_field(field, params)?;
    let cache = forward_cached(field, params, None);
    Ok(PfsField {
        patches: field.patches(),
        dim: params.output_dim,
        data: cache.z,
    })
}

/// Eval-mode projection of a batch, in order.
pub fn project_all(fields: &[PatchEmbeddingField], params: &PfsParams) -> Result<Vec<PfsField>> {
    par::map_slice(fields, |f| project(f, params)).into_iter().collect()
}

/// Gradient with the same layout as [`PfsParams`].
#[derive(Debug, Clone, PartialEq)]
pub struct PfsGradients {
    pub w1: Vec<f64>,
    pub b1: Vec<f64>,
    pub w2: Vec<f64>,
    pub b2: Vec<f64>,
    pub log_gamma: f64,
}

impl PfsGradients {
    pub fn zeros_like(p: &PfsParams) -> Self {
        Self {
            w1: vec![0.0; p.w1.len()],
            b1: vec![0.0; p.b1.len()],
            w2: vec![0.0; p.w2.len()],
            b2: vec![0.0; p.b2.len()],
            log_gamma: 0.0,
        }
    }

    fn add_assign(&mut self, other: &Self) {
        let pairs = [
            (&mut self.w1, &other.w1),
            (&mut self.b1, &other.b1),
            (&mut self.w2, &other.w2),
            (&mut self.b2, &other.b2),
        ];
        for (a, b) in pairs {
            a.iter_mut().zip(b).for_each(|(x, y)| *x += y);
        }
        self.log_gamma += other.log_gamma;
    }

    pub fn negated(&self) -> Self {
        let neg = |v: &[f64]| v.iter().map(|x| -x).collect::<Vec<_>>();
        Self {
            w1: neg(&self.w1),
            b1: neg(&self.b1),
            w2: neg(&self.w2),
            b2: neg(&self.b2),
            log_gamma: -self.log_gamma,
        }
    }

    pub fn max_abs(&self) -> f64 {
        self.w1
            .iter()
            .chain(&self.b1)
            .chain(&self.w2)
            .chain(&self.b2)
            .chain(std::iter::once(&self.log_gamma))
            .fold(0.0f64, |m, v| m.max(v.abs()))
    }
}

/// Accumulates parameter gradients of one field given dL/dz.
fn backward_field(
    field: &PatchEmbeddingField,
    params: &PfsParams,
    cache: &ForwardCache,
    d_z: &[f64],
    grads: &mut PfsGradients,
) {
    let (h_dim, d_out) = (params.hidden, params.output_dim);
    let mut du = vec![0.0; d_out];
    let mut da = vec![0.0; h_dim];
    for (p, e) in field.iter_patches().enumerate() {
        let z = &cache.z[p * d_out..(p + 1) * d_out];
        for l in 0..d_out {
            du[l] = d_z[p * d_out + l] * (1.0 - z[l] * z[l]);
            grads.b2[l] += du[l];
        }
        let hrow = &cache.hidden[p * h_dim..(p + 1) * h_dim];
        for h in 0..h_dim {
            let wrow = &params.w2[h * d_out..(h + 1) * d_out];
            let grow = &mut grads.w2[h * d_out..(h + 1) * d_out];
            let mut dh = 0.0;
            for l in 0..d_out {
                grow[l] += hrow[h] * du[l];
                dh += wrow[l] * du[l];
            }
            if let Some(m) = &cache.mask {
                dh *= m[p * h_dim + h];
            }
            da[h] = dh * params.activation.eval(cache.pre[p * h_dim + h]).1;
            grads.b1[h] += da[h];
        }
        for (j, &ej) in e.iter().enumerate() {
            if ej != 0.0 {
                let grow = &mut grads.w1[j * h_dim..(j + 1) * h_dim];
                for (g, a) in grow.iter_mut().zip(&da) {
                    *g += ej * a;
                }
            }
        }
    }
}

/// Keys for per-record dropout streams during one optimizer step.
#[derive(Debug, Clone, Copy)]
pub(crate) struct DropoutKey {
    pub seed: u64,
    pub epoch: u64,
    pub step: u64,
}

impl DropoutKey {
    fn mask(&self, side: u64, slot: usize, len: usize, rate: f64) -> Vec<f64> {
        let mut rng = rng::stream(self.seed, &[tag::DROPOUT, self.epoch, self.step, side, slot as u64]);
        dropout_mask(len, rate, &mut rng)
    }
}

/// J and its gradient for raw embedding batches, optionally with dropout.
pub(crate) fn objective_and_gradients(
    sx: &[PatchEmbeddingField],
    sy: &[PatchEmbeddingField],
    params: &PfsParams,
    lambda: f64,
    dropout: Option<DropoutKey>,
) -> Result<(ObjectiveValue, PfsGradients)> {
    objective_and_gradients_refs(
        &sx.iter().collect::<Vec<_>>(),
        &sy.iter().collect::<Vec<_>>(),
        params,
        lambda,
        dropout,
    )
}

pub(crate) fn objective_and_gradients_refs(
    sx: &[&PatchEmbeddingField],
    sy: &[&PatchEmbeddingField],
    params: &PfsParams,
    lambda: f64,
    dropout: Option<DropoutKey>,
) -> Result<(ObjectiveValue, PfsGradients)> {
    params.validate()?;
    if sx.len() != sy.len() {
        return Err(shape(format!("batch sizes {} and {}", sx.len(), sy.len())));
    }
    for f in sx.iter().chain(sy) {
        check_field(f, params)?;
    }
    let run = |side: u64, set: &[&PatchEmbeddingField]| {
        par::map_indexed(set.len(), |i| {
            let f = set[i];
            let mask = dropout
                .filter(|_| params.dropout_rate > 0.0)
                .map(|key| key.mask(side, i, f.patches() * params.hidden, params.dropout_rate));
            forward_cached(f, params, mask)
        })
    };
    let cx = run(0, sx);
    let cy = run(1, sy);
    let zx: Vec<&[f64]> = cx.iter().map(|c| c.z.as_slice()).collect();
    let zy: Vec<&[f64]> = cy.iter().map(|c| c.z.as_slice()).collect();
    let sig = kernel_mmd::objective_signature_gradients(&zx, &zy, params.gamma(), lambda)?;

    let n = sx.len();
    let per_record = par::map_indexed(2 * n, |r| {
        let mut g = PfsGradients::zeros_like(params);
        if r < n {
            backward_field(sx[r], params, &cx[r], &sig.d_zx[r], &mut g);
        } else {
            let i = r - n;
            backward_field(sy[i], params, &cy[i], &sig.d_zy[i], &mut g);
        }
        g
    });
    let mut grads = PfsGradients::zeros_like(params);
    for g in &per_record {
        grads.add_assign(g);
    }
    grads.log_gamma = sig.d_log_gamma;
    Ok((sig.value, grads))
}

/// `vᵀ ∇²φ_ℓ(e) v` for every output ℓ, in eval mode.
pub fn hessian_quadratic_form(params: &PfsParams, e: &[f64], v: &[f64]) -> Result<Vec<f64>> {
    if e.len() != params.input_dim || v.len() != params.input_dim {
        return Err(shape("point and direction must match the input dimension"));
    }
    let (h_dim, d_out) = (params.hidden, params.output_dim);
    let mut u = params.b2.clone();
    let mut first = vec![0.0; d_out];
    let mut second = vec![0.0; d_out];
    for h in 0..h_dim {
        let mut a = params.b1[h];
        let mut w = 0.0;
        for j in 0..params.input_dim {
            a += e[j] * params.w1[j * h_dim + h];
            w += v[j] * params.w1[j * h_dim + h];
        }
        let (act, d1, d2) = params.activation.eval(a);
        for l in 0..d_out {
            let w2 = params.w2[h * d_out + l];
            u[l] += w2 * act;
            first[l] += w2 * d1 * w;
            second[l] += w2 * d2 * w * w;
        }
    }
    Ok((0..d_out)
        .map(|l| {
            let z = u[l].tanh();
            let s = 1.0 - z * z;
            s * second[l] - 2.0 * z * s * first[l] * first[l]
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn field(rows: &[&[f64]]) -> PatchEmbeddingField {
        PatchEmbeddingField::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    #[test]
    fn init_conventions() {
        let p = init_params(5, 8, 2, 3).unwrap();
        assert_eq!(p.gamma(), 1.0);
        assert!(p.b1.iter().chain(&p.b2).all(|b| *b == 0.0));
        let bound = 1.0 / 5f64.sqrt();
        assert!(p.w1.iter().all(|w| w.abs() <= bound));
        assert_eq!(p, init_params(5, 8, 2, 3).unwrap());
        assert_ne!(p, init_params(5, 8, 2, 4).unwrap());
    }

    #[test]
    fn zero_weights_give_zero_signatures() {
        let p = PfsParams::zeros(3, 4, 2).unwrap();
        let z = project(&field(&[&[1.0, -2.0, 0.5], &[0.3, 0.3, 0.3]]), &p).unwrap();
        assert!(z.as_slice().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn scalar_hand_evaluation() {
        let mut p = PfsParams::zeros(1, 1, 1).unwrap();
        p.w1[0] = 1.0;
        p.w2[0] = 1.0;
        let x: f64 = 0.5;
        let gelu = 0.5 * x * (1.0 + (GELU_C * (x + GELU_K * x.powi(3))).tanh());
        let z = project(&field(&[&[x]]), &p).unwrap();
        assert!((z.as_slice()[0] - gelu.tanh()).abs() < 1e-15);

        p.activation = Activation::Tanh;
        let z = project(&field(&[&[x]]), &p).unwrap();
        assert!((z.as_slice()[0] - x.tanh().tanh()).abs() < 1e-15);
    }

    #[test]
    fn eval_mode_ignores_rng() {
        let p = init_params(3, 6, 1, 1).unwrap().with_dropout(0.3).unwrap();
        let f = field(&[&[0.2, 0.1, -0.4], &[1.0, 0.0, 2.0]]);
        let a = pfs_forward(&f, &p, Mode::Eval, &mut rng::stream(1, &[])).unwrap();
        let b = pfs_forward(&f, &p, Mode::Eval, &mut rng::stream(99, &[])).unwrap();
        assert_eq!(a, b);
        let t = pfs_forward(&f, &p, Mode::Train, &mut rng::stream(1, &[])).unwrap();
        assert_ne!(a, t);
    }

    #[test]
    fn dimension_mismatch() {
        let p = init_params(3, 4, 1, 0).unwrap();
        assert!(project(&field(&[&[1.0, 2.0]]), &p).is_err());
    }

    #[test]
    fn activation_derivatives_match_finite_differences() {
        for act in [Activation::Gelu, Activation::Tanh] {
            for &x in &[-2.5, -0.7, 0.0, 0.3, 1.9] {
                let h = 1e-5;
                let (_, d1, d2) = act.eval(x);
                let fd1 = (act.eval(x + h).0 - act.eval(x - h).0) / (2.0 * h);
                let fd2 = (act.eval(x + h).1 - act.eval(x - h).1) / (2.0 * h);
                assert!((d1 - fd1).abs() < 1e-8, "{act:?} {x}");
                assert!((d2 - fd2).abs() < 1e-8, "{act:?} {x}");
            }
        }
    }

    #[test]
    fn gelu_hessian_nonzero_at_origin() {
        let (_, _, d2) = Activation::Gelu.eval(0.0);
        assert!(d2 > 0.5);
    }
}
