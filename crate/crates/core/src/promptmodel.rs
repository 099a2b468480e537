//! Frozen token-mixing surrogate backbone with deep prompts.
//!
//! The image is cut into `n` patches of `p x p` pixels and embedded into `d`
//! channels. Every layer prepends its own `l x d` prompt block to the tokens,
//! mixes along the token axis, then along the channel axis:
//!
//! ```text
//! H₀      = patchify(x) · E
//! Hᵢ₊₁    = σ(Tᵢ · [Pᵢ ; Hᵢ] · Cᵢ)
//! output  = unflatten(vec(H_L) · W_head)
//! ```
//!
//! There are no biases. Gradients are computed by hand in reverse mode.

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mri::Image;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelDims {
    /// Square image side, a power of two.
    pub image_size: usize,
    pub patch_size: usize,
    pub embed_dim: usize,
    pub layers: usize,
    pub prompt_len: usize,
}

impl ModelDims {
    pub const DESK: ModelDims = ModelDims {
        image_size: 16,
        patch_size: 4,
        embed_dim: 32,
        layers: 4,
        prompt_len: 8,
    };

    pub fn validate(&self) -> Result<()> {
        let ModelDims {
            image_size,
            patch_size,
            embed_dim,
            layers,
            prompt_len,
        } = *self;
        if image_size < 4 || !image_size.is_power_of_two() {
            return Err(Error::invalid(format!(
                "image size must be a power of two >= 4, got {image_size}"
            )));
        }
        if patch_size == 0 || image_size % patch_size != 0 {
            return Err(Error::invalid(format!(
                "patch size {patch_size} does not tile image size {image_size}"
            )));
        }
        if embed_dim == 0 || layers == 0 || prompt_len == 0 {
            return Err(Error::invalid(
                "embed_dim, layers and prompt_len must be positive",
            ));
        }
        Ok(())
    }

    /// Number of patch tokens `n`.
    pub fn tokens(&self) -> usize {
        let side = self.image_size / self.patch_size;
        side * side
    }

    pub fn patch_pixels(&self) -> usize {
        self.patch_size * self.patch_size
    }

    pub fn pixels(&self) -> usize {
        self.image_size * self.image_size
    }

    /// `L·l·d`.
    pub fn prompt_scalars(&self) -> usize {
        self.layers * self.prompt_len * self.embed_dim
    }

    pub fn backbone_scalars(&self) -> usize {
        let (n, d, l) = (self.tokens(), self.embed_dim, self.prompt_len);
        self.patch_pixels() * d + self.layers * (n * (l + n) + d * d) + n * d * self.pixels()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Tanh,
    /// Linear network, used by algebraic tests.
    Identity,
}

impl Activation {
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Tanh => x.tanh(),
            Activation::Identity => x,
        }
    }

    /// Derivative expressed through the activation output.
    fn derivative_from_output(self, y: f64) -> f64 {
        match self {
            Activation::Tanh => 1.0 - y * y,
            Activation::Identity => 1.0,
        }
    }

    pub(crate) fn code(self) -> u8 {
        match self {
            Activation::Tanh => 0,
            Activation::Identity => 1,
        }
    }

    pub(crate) fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(Activation::Tanh),
            1 => Some(Activation::Identity),
            _ => None,
        }
    }
}

/// Source samples per parallel gradient job during pretraining.
const PRETRAIN_CHUNK: usize = 8;

/// Standard deviation of patch embedding rows times `p`, small enough to keep
/// `tanh` near its linear regime.
const INIT_EMBED_SCALE: f64 = 0.25;
/// Relative size of the random part of the initial mixing matrices.
const INIT_MIX_NOISE: f64 = 0.02;

/// Per-layer prompt blocks, each `l x d`.
#[derive(Debug, Clone, PartialEq)]
pub struct PromptSet {
    pub layers: Vec<DMatrix<f64>>,
}

/// Gradient of the loss with respect to a [`PromptSet`].
pub type GradientSet = PromptSet;

impl PromptSet {
    pub fn zeros(dims: &ModelDims) -> Self {
        Self {
            layers: (0..dims.layers)
                .map(|_| DMatrix::zeros(dims.prompt_len, dims.embed_dim))
                .collect(),
        }
    }

    pub fn random(dims: &ModelDims, std: f64, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, std).expect("finite std");
        Self {
            layers: (0..dims.layers)
                .map(|_| {
                    DMatrix::from_fn(dims.prompt_len, dims.embed_dim, |_, _| {
                        normal.sample(&mut rng)
                    })
                })
                .collect(),
        }
    }

    pub fn scalar_count(&self) -> usize {
        self.layers.iter().map(|m| m.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.layers.iter().all(|m| m.iter().all(|v| v.is_finite()))
    }

    pub fn same_shape(&self, other: &PromptSet) -> bool {
        self.layers.len() == other.layers.len()
            && self
                .layers
                .iter()
                .zip(&other.layers)
                .all(|(a, b)| a.shape() == b.shape())
    }

    pub fn matches(&self, dims: &ModelDims) -> bool {
        self.layers.len() == dims.layers
            && self
                .layers
                .iter()
                .all(|m| m.shape() == (dims.prompt_len, dims.embed_dim))
    }

    /// Row-major scalars, layer after layer.
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.scalar_count());
        for m in &self.layers {
            push_row_major(&mut out, m);
        }
        out
    }

    pub fn linear_combination(&self, a: f64, other: &PromptSet, b: f64) -> PromptSet {
        PromptSet {
            layers: self
                .layers
                .iter()
                .zip(&other.layers)
                .map(|(x, y)| x * a + y * b)
                .collect(),
        }
    }
}

pub(crate) fn push_row_major(out: &mut Vec<f64>, m: &DMatrix<f64>) {
    for r in 0..m.nrows() {
        for c in 0..m.ncols() {
            out.push(m[(r, c)]);
        }
    }
}

/// Frozen backbone parameters θ.
#[derive(Debug, Clone, PartialEq)]
pub struct Backbone {
    pub dims: ModelDims,
    pub activation: Activation,
    /// `p² x d`.
    pub patch_embed: DMatrix<f64>,
    /// Per layer `n x (l + n)`; the first `l` columns read the prompts.
    pub token_mix: Vec<DMatrix<f64>>,
    /// Per layer `d x d`.
    pub channel_mix: Vec<DMatrix<f64>>,
    /// `n·d x H·W`, rows indexed by `token·d + channel`.
    pub head: DMatrix<f64>,
}

/// Gradient with respect to every backbone parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct BackboneGrad {
    pub patch_embed: DMatrix<f64>,
    pub token_mix: Vec<DMatrix<f64>>,
    pub channel_mix: Vec<DMatrix<f64>>,
    pub head: DMatrix<f64>,
}

impl Backbone {
    /// Seeded initialization close to an image-preserving map: random patch
    /// embedding at small scale, near-identity mixing, and a head that
    /// decodes tokens through the embedding's pseudo-inverse.
    pub fn init(dims: ModelDims, activation: Activation, seed: u64) -> Result<Self> {
        dims.validate()?;
        let (n, d, l, pp) = (
            dims.tokens(),
            dims.embed_dim,
            dims.prompt_len,
            dims.patch_pixels(),
        );
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let gauss = |std: f64| {
            let normal = Normal::new(0.0, std).expect("finite std");
            move |rng: &mut ChaCha8Rng| normal.sample(rng)
        };

        let g = gauss(INIT_EMBED_SCALE / (pp as f64).sqrt());
        let patch_embed = DMatrix::from_fn(pp, d, |_, _| g(&mut rng));

        let mut token_mix = Vec::with_capacity(dims.layers);
        let mut channel_mix = Vec::with_capacity(dims.layers);
        let g_prompt = gauss(1.0 / (l as f64).sqrt());
        let g_token = gauss(INIT_MIX_NOISE / (n as f64).sqrt());
        let g_channel = gauss(INIT_MIX_NOISE / (d as f64).sqrt());
        for _ in 0..dims.layers {
            let t = DMatrix::from_fn(n, l + n, |r, c| {
                if c < l {
                    g_prompt(&mut rng)
                } else {
                    let diag = if c - l == r { 1.0 } else { 0.0 };
                    diag + g_token(&mut rng)
                }
            });
            token_mix.push(t);
            let ch = DMatrix::from_fn(d, d, |r, c| {
                let diag = if r == c { 1.0 } else { 0.0 };
                diag + g_channel(&mut rng)
            });
            channel_mix.push(ch);
        }

        let decode = patch_embed
            .clone()
            .pseudo_inverse(1e-12)
            .map_err(|e| Error::numerical(format!("patch embedding pseudo-inverse: {e}")))?;
        let mut head = DMatrix::zeros(n * d, dims.pixels());
        for t in 0..n {
            for i in 0..d {
                for j in 0..pp {
                    head[(t * d + i, patch_pixel_index(&dims, t, j))] = decode[(i, j)];
                }
            }
        }

        Ok(Self {
            dims,
            activation,
            patch_embed,
            token_mix,
            channel_mix,
            head,
        })
    }

    /// Linear network that reproduces its input exactly; needs `d = p²`.
    pub fn identity(dims: ModelDims) -> Result<Self> {
        dims.validate()?;
        if dims.embed_dim != dims.patch_pixels() {
            return Err(Error::invalid(
                "identity backbone needs embed_dim equal to patch_size²",
            ));
        }
        let (n, d, l) = (dims.tokens(), dims.embed_dim, dims.prompt_len);
        let token = DMatrix::from_fn(n, l + n, |r, c| if c == l + r { 1.0 } else { 0.0 });
        let mut head = DMatrix::zeros(n * d, dims.pixels());
        for t in 0..n {
            for i in 0..d {
                head[(t * d + i, patch_pixel_index(&dims, t, i))] = 1.0;
            }
        }
        Ok(Self {
            dims,
            activation: Activation::Identity,
            patch_embed: DMatrix::identity(d, d),
            token_mix: vec![token; dims.layers],
            channel_mix: vec![DMatrix::identity(d, d); dims.layers],
            head,
        })
    }

    pub fn scalar_count(&self) -> usize {
        self.patch_embed.len()
            + self.token_mix.iter().map(|m| m.len()).sum::<usize>()
            + self.channel_mix.iter().map(|m| m.len()).sum::<usize>()
            + self.head.len()
    }

    pub fn is_finite(&self) -> bool {
        self.parameters().all(|m| m.iter().all(|v| v.is_finite()))
    }

    /// Parameter matrices in serialization order.
    pub fn parameters(&self) -> impl Iterator<Item = &DMatrix<f64>> {
        std::iter::once(&self.patch_embed)
            .chain(self.token_mix.iter())
            .chain(self.channel_mix.iter())
            .chain(std::iter::once(&self.head))
    }

    pub fn parameters_mut(&mut self) -> impl Iterator<Item = &mut DMatrix<f64>> {
        std::iter::once(&mut self.patch_embed)
            .chain(self.token_mix.iter_mut())
            .chain(self.channel_mix.iter_mut())
            .chain(std::iter::once(&mut self.head))
    }

    pub fn zero_grad(&self) -> BackboneGrad {
        BackboneGrad {
            patch_embed: DMatrix::zeros(self.patch_embed.nrows(), self.patch_embed.ncols()),
            token_mix: self
                .token_mix
                .iter()
                .map(|m| DMatrix::zeros(m.nrows(), m.ncols()))
                .collect(),
            channel_mix: self
                .channel_mix
                .iter()
                .map(|m| DMatrix::zeros(m.nrows(), m.ncols()))
                .collect(),
            head: DMatrix::zeros(self.head.nrows(), self.head.ncols()),
        }
    }

    /// `θ ← θ − lr·grad`.
    pub fn apply_gradient(&mut self, grad: &BackboneGrad, lr: f64) {
        for (p, g) in self.parameters_mut().zip(grad.matrices()) {
            *p -= g * lr;
        }
    }

    /// Elementwise `Σ wᵢ θᵢ`, used to average full-model updates.
    pub fn weighted_sum(parts: &[(&Backbone, f64)]) -> Result<Backbone> {
        let (first, _) = parts
            .first()
            .ok_or_else(|| Error::invalid("nothing to average"))?;
        let mut out = (*first).clone();
        for m in out.parameters_mut() {
            m.fill(0.0);
        }
        for (b, w) in parts {
            if b.dims != first.dims {
                return Err(Error::invalid("backbone shapes differ"));
            }
            for (acc, p) in out.parameters_mut().zip(b.parameters()) {
                *acc += p * *w;
            }
        }
        Ok(out)
    }
}

impl BackboneGrad {
    pub fn matrices(&self) -> impl Iterator<Item = &DMatrix<f64>> {
        std::iter::once(&self.patch_embed)
            .chain(self.token_mix.iter())
            .chain(self.channel_mix.iter())
            .chain(std::iter::once(&self.head))
    }

    fn matrices_mut(&mut self) -> impl Iterator<Item = &mut DMatrix<f64>> {
        std::iter::once(&mut self.patch_embed)
            .chain(self.token_mix.iter_mut())
            .chain(self.channel_mix.iter_mut())
            .chain(std::iter::once(&mut self.head))
    }

    pub fn scale(&mut self, s: f64) {
        for m in self.matrices_mut() {
            *m *= s;
        }
    }

    pub fn add_scaled(&mut self, other: &BackboneGrad, s: f64) {
        for (a, b) in self.matrices_mut().zip(other.matrices()) {
            *a += b * s;
        }
    }
}

/// Pixel index (row-major) of pixel `i` within patch `t`.
fn patch_pixel_index(dims: &ModelDims, t: usize, i: usize) -> usize {
    let p = dims.patch_size;
    let side = dims.image_size / p;
    let (pr, pc) = (t / side, t % side);
    let (ir, ic) = (i / p, i % p);
    (pr * p + ir) * dims.image_size + pc * p + ic
}

fn patchify(x: &Image, dims: &ModelDims) -> DMatrix<f64> {
    let pixels = x.pixels();
    DMatrix::from_fn(dims.tokens(), dims.patch_pixels(), |t, i| {
        pixels[patch_pixel_index(dims, t, i)]
    })
}

fn check_inputs(x: &Image, prompts: &PromptSet, backbone: &Backbone) -> Result<()> {
    let dims = &backbone.dims;
    if x.shape() != (dims.image_size, dims.image_size) {
        return Err(Error::invalid(format!(
            "input is {:?} but the backbone expects {}x{}",
            x.shape(),
            dims.image_size,
            dims.image_size
        )));
    }
    if !prompts.matches(dims) {
        return Err(Error::invalid(format!(
            "prompt set does not match {} layers of {}x{}",
            dims.layers, dims.prompt_len, dims.embed_dim
        )));
    }
    Ok(())
}

/// Intermediate activations of one forward pass.
struct Trace {
    patches: DMatrix<f64>,
    /// `[Pᵢ ; Hᵢ]` per layer.
    stacked: Vec<DMatrix<f64>>,
    /// `Tᵢ · [Pᵢ ; Hᵢ]` per layer.
    mixed: Vec<DMatrix<f64>>,
    /// `H₁ … H_L`.
    outputs: Vec<DMatrix<f64>>,
    prediction: Vec<f64>,
}

fn stack(prompt: &DMatrix<f64>, tokens: &DMatrix<f64>) -> DMatrix<f64> {
    let (l, n, d) = (prompt.nrows(), tokens.nrows(), tokens.ncols());
    let mut s = DMatrix::zeros(l + n, d);
    s.rows_mut(0, l).copy_from(prompt);
    s.rows_mut(l, n).copy_from(tokens);
    s
}

fn row_major_vector(m: &DMatrix<f64>) -> DVector<f64> {
    DVector::from_fn(m.len(), |k, _| m[(k / m.ncols(), k % m.ncols())])
}

fn run_forward(x: &Image, prompts: &PromptSet, backbone: &Backbone) -> Trace {
    let dims = &backbone.dims;
    let patches = patchify(x, dims);
    let mut h = &patches * &backbone.patch_embed;
    let mut stacked = Vec::with_capacity(dims.layers);
    let mut mixed = Vec::with_capacity(dims.layers);
    let mut outputs = Vec::with_capacity(dims.layers);
    for i in 0..dims.layers {
        let s = stack(&prompts.layers[i], &h);
        let m = &backbone.token_mix[i] * &s;
        let a = &m * &backbone.channel_mix[i];
        h = a.map(|v| backbone.activation.apply(v));
        stacked.push(s);
        mixed.push(m);
        outputs.push(h.clone());
    }
    let flat = row_major_vector(&h);
    let prediction = backbone.head.tr_mul(&flat).as_slice().to_vec();
    Trace {
        patches,
        stacked,
        mixed,
        outputs,
        prediction,
    }
}

/// `f(x; P, θ)`.
pub fn forward(x: &Image, prompts: &PromptSet, backbone: &Backbone) -> Result<Image> {
    check_inputs(x, prompts, backbone)?;
    let trace = run_forward(x, prompts, backbone);
    let s = backbone.dims.image_size;
    Image::new(s, s, trace.prediction)
        .map_err(|_| Error::numerical("forward pass produced non-finite pixels"))
}

/// Mean absolute error over pixels.
pub fn loss_l1(pred: &Image, target: &Image) -> Result<f64> {
    if pred.shape() != target.shape() {
        return Err(Error::invalid(format!(
            "shape mismatch: {:?} vs {:?}",
            pred.shape(),
            target.shape()
        )));
    }
    let n = pred.pixels().len() as f64;
    Ok(pred
        .pixels()
        .iter()
        .zip(target.pixels())
        .map(|(a, b)| (a - b).abs())
        .sum::<f64>()
        / n)
}

/// Output of a backward pass over a batch.
#[derive(Debug, Clone)]
pub struct BatchGradients {
    pub loss: f64,
    pub prompts: GradientSet,
    /// Present only when backbone gradients were requested.
    pub backbone: Option<BackboneGrad>,
}

fn l1_subgradient(r: f64) -> f64 {
    if r > 0.0 {
        1.0
    } else if r < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Mean L1 loss over `batch` and its exact gradients.
///
/// The L1 subgradient at a zero residual is taken as 0.
pub fn backward(
    batch: &[(Image, Image)],
    prompts: &PromptSet,
    backbone: &Backbone,
    with_backbone: bool,
) -> Result<BatchGradients> {
    if batch.is_empty() {
        return Err(Error::invalid("gradient requested on an empty batch"));
    }
    let dims = &backbone.dims;
    let (l, n, d) = (dims.prompt_len, dims.tokens(), dims.embed_dim);
    let pixels = dims.pixels() as f64;
    let scale = 1.0 / (pixels * batch.len() as f64);

    let mut grads = PromptSet::zeros(dims);
    let mut bgrad = with_backbone.then(|| backbone.zero_grad());
    let mut loss = 0.0;

    for (x, y) in batch {
        check_inputs(x, prompts, backbone)?;
        if y.shape() != x.shape() {
            return Err(Error::invalid("target shape differs from input shape"));
        }
        let trace = run_forward(x, prompts, backbone);

        let mut residual_sum = 0.0;
        let g_out = DVector::from_fn(trace.prediction.len(), |k, _| {
            let r = trace.prediction[k] - y.pixels()[k];
            residual_sum += r.abs();
            l1_subgradient(r) * scale
        });
        loss += residual_sum / pixels;

        let last = trace.outputs.last().expect("at least one layer");
        if let Some(bg) = bgrad.as_mut() {
            bg.head.ger(1.0, &row_major_vector(last), &g_out, 1.0);
        }
        let g_flat = &backbone.head * &g_out;
        let mut g_h = DMatrix::from_fn(n, d, |t, j| g_flat[t * d + j]);

        for i in (0..dims.layers).rev() {
            let out = &trace.outputs[i];
            let g_a = g_h.zip_map(out, |g, y| {
                g * backbone.activation.derivative_from_output(y)
            });
            let g_m = &g_a * backbone.channel_mix[i].transpose();
            let g_s = backbone.token_mix[i].tr_mul(&g_m);
            if let Some(bg) = bgrad.as_mut() {
                bg.channel_mix[i] += trace.mixed[i].tr_mul(&g_a);
                bg.token_mix[i] += &g_m * trace.stacked[i].transpose();
            }
            grads.layers[i] += g_s.rows(0, l);
            g_h = g_s.rows(l, n).into_owned();
        }
        if let Some(bg) = bgrad.as_mut() {
            bg.patch_embed += trace.patches.tr_mul(&g_h);
        }
    }

    let loss = loss / batch.len() as f64;
    if !loss.is_finite() {
        return Err(Error::numerical("loss is not finite"));
    }
    Ok(BatchGradients {
        loss,
        prompts: grads,
        backbone: bgrad,
    })
}

/// Gradient of the mean L1 loss with respect to the prompts only.
pub fn grad_prompts(
    batch: &[(Image, Image)],
    prompts: &PromptSet,
    backbone: &Backbone,
) -> Result<GradientSet> {
    Ok(backward(batch, prompts, backbone, false)?.prompts)
}

/// Mean L1 loss of the model over `data`.
pub fn mean_loss(data: &[(Image, Image)], prompts: &PromptSet, backbone: &Backbone) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::invalid("loss requested on an empty dataset"));
    }
    let mut total = 0.0;
    for (x, y) in data {
        total += loss_l1(&forward(x, prompts, backbone)?, y)?;
    }
    Ok(total / data.len() as f64)
}

/// Full-batch gradient descent on every backbone parameter with zero
/// prompts, starting from `Backbone::init(dims, activation, seed)`.
///
/// The step size decays linearly from `lr` towards zero over `epochs`; a
/// constant step keeps L1 subgradient descent oscillating around the optimum.
pub fn pretrain_backbone(
    dims: ModelDims,
    activation: Activation,
    source_data: &[(Image, Image)],
    epochs: usize,
    lr: f64,
    seed: u64,
) -> Result<Backbone> {
    if source_data.is_empty() {
        return Err(Error::invalid("pretraining needs source data"));
    }
    let mut backbone = Backbone::init(dims, activation, seed)?;
    let prompts = PromptSet::zeros(&dims);
    let total = source_data.len() as f64;
    for epoch in 0..epochs {
        // fixed chunks summed in order: identical for any thread count
        let parts = source_data
            .par_chunks(PRETRAIN_CHUNK)
            .map(|chunk| backward(chunk, &prompts, &backbone, true))
            .collect::<Result<Vec<_>>>()
            .map_err(|e| match e {
                Error::NumericalFailure(m) => {
                    Error::numerical(format!("pretraining epoch {epoch}: {m}"))
                }
                other => other,
            })?;
        let mut g = backbone.zero_grad();
        for (chunk, part) in source_data.chunks(PRETRAIN_CHUNK).zip(&parts) {
            g.add_scaled(
                part.backbone.as_ref().expect("requested"),
                chunk.len() as f64 / total,
            );
        }
        let step = lr * (1.0 - epoch as f64 / epochs as f64);
        backbone.apply_gradient(&g, step);
        if !backbone.is_finite() {
            return Err(Error::numerical(format!(
                "pretraining diverged at epoch {epoch}"
            )));
        }
    }
    Ok(backbone)
}
