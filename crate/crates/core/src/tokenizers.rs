//! Continuous (VAE-style) and vector-quantized tokenizers. Both cut an image
//! into non-overlapping patches and run a per-patch MLP encoder and decoder,
//! giving a row-major `h x w` grid of latent tokens.

use std::path::Path;

use mixar_autodiff::io::NamedArray;
use mixar_autodiff::{Adam, Graph, ParamId, ParamStore, Real, Tensor, Var};
use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::checkpoint;
use crate::error::{config, contract, MixarError, Result};
use crate::nn::Linear;
use crate::optim::{clip_grad_norm, lr_at};
use crate::rng::{self, Rng};
use crate::toy_data::{ImageBatch, CHANNELS};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TokenizerConfig {
    pub image_size: usize,
    pub patch: usize,
    pub d_c: usize,
    pub d_d: usize,
    pub codebook_size: usize,
    pub hidden: usize,
    pub epochs: usize,
    pub batch_patches: usize,
    pub lr: f64,
    pub beta_kl: f64,
    pub beta_commit: f64,
    /// Reparameterized posterior sampling during VAE training; encoding
    /// always returns the posterior mean.
    pub sample_posterior: bool,
    pub seed: u64,
}

impl Default for TokenizerConfig {
    fn default() -> Self {
        Self {
            image_size: 16,
            patch: 4,
            d_c: 8,
            d_d: 8,
            codebook_size: 64,
            hidden: 128,
            epochs: 40,
            batch_patches: 256,
            lr: 2e-3,
            beta_kl: 1e-4,
            beta_commit: 0.25,
            sample_posterior: true,
            seed: 0,
        }
    }
}

impl TokenizerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.patch == 0 || !self.image_size.is_multiple_of(self.patch) {
            return Err(config(format!(
                "patch size {} must divide image size {}",
                self.patch, self.image_size
            )));
        }
        if self.d_c == 0 || self.d_d == 0 || self.hidden == 0 || self.batch_patches == 0 {
            return Err(config("tokenizer widths and batch size must be positive"));
        }
        if self.codebook_size == 0 {
            return Err(contract("codebook must have at least one codeword"));
        }
        if self.beta_kl < 0.0 || self.beta_commit < 0.0 {
            return Err(config("loss weights must be non-negative"));
        }
        Ok(())
    }

    pub fn grid(&self) -> (usize, usize) {
        let g = self.image_size / self.patch;
        (g, g)
    }

    pub fn n_tokens(&self) -> usize {
        let (h, w) = self.grid();
        h * w
    }

    pub fn patch_dim(&self) -> usize {
        CHANNELS * self.patch * self.patch
    }
}

/// Latent tokens of one or more images, stacked: rows `b*N .. (b+1)*N` hold
/// image `b` in row-major grid order.
#[derive(Debug, Clone, PartialEq)]
pub struct ContinuousSequence {
    pub grid: (usize, usize),
    pub tokens: Tensor<f32>,
}

impl ContinuousSequence {
    pub fn n(&self) -> usize {
        self.grid.0 * self.grid.1
    }

    pub fn batch_len(&self) -> usize {
        self.tokens.rows() / self.n().max(1)
    }

    pub fn width(&self) -> usize {
        self.tokens.cols()
    }

    pub fn item(&self, b: usize) -> Tensor<f32> {
        let n = self.n();
        self.tokens.select_rows(&(b * n..(b + 1) * n).collect::<Vec<_>>())
    }
}

/// Codebook indices of one or more images, stacked like [`ContinuousSequence`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DiscreteSequence {
    pub grid: (usize, usize),
    pub indices: Vec<usize>,
}

impl DiscreteSequence {
    pub fn n(&self) -> usize {
        self.grid.0 * self.grid.1
    }

    pub fn batch_len(&self) -> usize {
        self.indices.len() / self.n().max(1)
    }

    pub fn item(&self, b: usize) -> &[usize] {
        let n = self.n();
        &self.indices[b * n..(b + 1) * n]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Codebook {
    pub codewords: Tensor<f32>,
}

impl Codebook {
    pub fn len(&self) -> usize {
        self.codewords.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.codewords.rows() == 0
    }

    pub fn dim(&self) -> usize {
        self.codewords.cols()
    }

    pub fn lookup(&self, indices: &[usize]) -> Result<Tensor<f32>> {
        if let Some(&bad) = indices.iter().find(|&&i| i >= self.len()) {
            return Err(contract(format!("codebook index {bad} out of range {}", self.len())));
        }
        Ok(self.codewords.select_rows(indices))
    }

    pub fn min_pairwise_distance(&self) -> f64 {
        let mut best = f64::INFINITY;
        for a in 0..self.len() {
            for b in a + 1..self.len() {
                best = best.min(sq_dist(self.codewords.row(a), self.codewords.row(b)).sqrt());
            }
        }
        best
    }
}

fn sq_dist<T: Real>(a: &[T], b: &[T]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(&x, &y)| {
            let d = (x - y).as_f64();
            d * d
        })
        .sum()
}

/// Nearest codeword per row under squared Euclidean distance; ties go to the
/// lowest index.
pub fn quantize<T: Real>(latents: &Tensor<T>, codewords: &Tensor<T>) -> Result<Vec<usize>> {
    if codewords.rows() == 0 {
        return Err(contract("cannot quantize against an empty codebook"));
    }
    if latents.cols() != codewords.cols() {
        return Err(contract(format!(
            "latent width {} does not match codeword width {}",
            latents.cols(),
            codewords.cols()
        )));
    }
    Ok((0..latents.rows())
        .map(|r| {
            let x = latents.row(r);
            let mut best = 0;
            let mut best_d = f64::INFINITY;
            for k in 0..codewords.rows() {
                let d = sq_dist(x, codewords.row(k));
                if d < best_d {
                    best_d = d;
                    best = k;
                }
            }
            best
        })
        .collect())
}

/// `(B*N) x (C*p*p)` patch matrix; patch vectors are laid out `c, dy, dx`.
pub fn patchify(batch: &ImageBatch, patch: usize) -> Result<Tensor<f32>> {
    let s = batch.size;
    if patch == 0 || !s.is_multiple_of(patch) {
        return Err(contract(format!("patch {patch} does not divide image size {s}")));
    }
    let g = s / patch;
    let pd = CHANNELS * patch * patch;
    let mut out = Tensor::zeros(batch.len() * g * g, pd);
    for b in 0..batch.len() {
        let img = batch.image(b);
        for gy in 0..g {
            for gx in 0..g {
                let row = out.row_mut(b * g * g + gy * g + gx);
                for c in 0..CHANNELS {
                    for dy in 0..patch {
                        for dx in 0..patch {
                            let y = gy * patch + dy;
                            let x = gx * patch + dx;
                            row[(c * patch + dy) * patch + dx] = img[(c * s + y) * s + x];
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Inverse of [`patchify`]; pixels are clamped to `[0, 1]`.
pub fn unpatchify(patches: &Tensor<f32>, size: usize, patch: usize, labels: Vec<usize>) -> Result<ImageBatch> {
    let g = size / patch;
    let n = g * g;
    if patches.cols() != CHANNELS * patch * patch || !patches.rows().is_multiple_of(n) {
        return Err(contract(format!(
            "patch matrix {:?} does not fit {size}x{size} images with patch {patch}",
            patches.shape()
        )));
    }
    let count = patches.rows() / n;
    let mut batch = ImageBatch::empty(size);
    let mut img = vec![0f32; CHANNELS * size * size];
    for b in 0..count {
        for gy in 0..g {
            for gx in 0..g {
                let row = patches.row(b * n + gy * g + gx);
                for c in 0..CHANNELS {
                    for dy in 0..patch {
                        for dx in 0..patch {
                            let v = row[(c * patch + dy) * patch + dx];
                            let v = if v.is_finite() { v.clamp(0.0, 1.0) } else { 0.0 };
                            img[(c * size + gy * patch + dy) * size + gx * patch + dx] = v;
                        }
                    }
                }
            }
        }
        batch.push(&img, labels.get(b).copied().unwrap_or(0));
    }
    Ok(batch)
}

/// Stack of linear layers with GELU between them.
#[derive(Debug, Clone)]
struct PatchMlp {
    layers: Vec<Linear>,
}

impl PatchMlp {
    fn new<T: Real>(store: &mut ParamStore<T>, name: &str, dims: &[usize], rng: &mut Rng) -> Self {
        let layers = dims
            .windows(2)
            .enumerate()
            .map(|(i, w)| Linear::new(store, &format!("{name}.{i}"), w[0], w[1], rng))
            .collect();
        Self { layers }
    }

    fn forward<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, mut x: Var) -> Var {
        let last = self.layers.len() - 1;
        for (i, l) in self.layers.iter().enumerate() {
            x = l.forward(g, store, x);
            if i < last {
                x = g.gelu(x);
            }
        }
        x
    }
}

fn check_finite(loss: f64, what: &str, epoch: usize) -> Result<()> {
    if !loss.is_finite() {
        return Err(MixarError::Numerical(format!(
            "{what} loss became non-finite at epoch {epoch}"
        )));
    }
    Ok(())
}

fn shuffled(n: usize, rng: &mut Rng) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(rng);
    idx
}

fn noise<T: Real>(rows: usize, cols: usize, rng: &mut Rng) -> Tensor<T> {
    Tensor::from_fn(rows, cols, |_, _| T::lit(rng::normal(rng)))
}

/// VAE stand-in producing continuous tokens of width `d_c`.
#[derive(Debug, Clone)]
pub struct ContinuousTokenizer<T: Real = f32> {
    pub cfg: TokenizerConfig,
    pub store: ParamStore<T>,
    trunk: PatchMlp,
    mu: Linear,
    logvar: Linear,
    decoder: PatchMlp,
    /// Multiplier applied to posterior means so encoded tokens have roughly
    /// unit variance; set from the training set after training.
    pub latent_scale: f64,
    pub loss_history: Vec<f64>,
}

pub struct VaeLoss {
    pub total: Var,
    pub recon: Var,
    pub kl: Var,
}

impl<T: Real> ContinuousTokenizer<T> {
    pub fn new(cfg: TokenizerConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = rng::stream(cfg.seed, "tokenizer/continuous/init");
        let mut store = ParamStore::new();
        let (pd, h) = (cfg.patch_dim(), cfg.hidden);
        let trunk = PatchMlp::new(&mut store, "enc", &[pd, h, h], &mut rng);
        let mu = Linear::new(&mut store, "enc.mu", h, cfg.d_c, &mut rng);
        let logvar = Linear::new(&mut store, "enc.logvar", h, cfg.d_c, &mut rng);
        let decoder = PatchMlp::new(&mut store, "dec", &[cfg.d_c, h, h, pd], &mut rng);
        Ok(Self {
            cfg,
            store,
            trunk,
            mu,
            logvar,
            decoder,
            latent_scale: 1.0,
            loss_history: Vec::new(),
        })
    }

    /// Builds `recon + beta_kl * KL` for a patch batch; `eps` switches on
    /// reparameterized sampling.
    pub fn loss_graph(&self, g: &mut Graph<T>, patches: &Tensor<T>, eps: Option<Tensor<T>>, beta_kl: f64) -> VaeLoss {
        let x = g.constant(patches.clone());
        let h = self.trunk.forward(g, &self.store, x);
        let h = g.gelu(h);
        let mu = self.mu.forward(g, &self.store, h);
        let lv = self.logvar.forward(g, &self.store, h);
        let z = match eps {
            Some(e) => {
                let half = g.scale(lv, 0.5);
                let std = g.exp(half);
                let e = g.constant(e);
                let n = g.mul(std, e);
                g.add(mu, n)
            }
            None => mu,
        };
        let out = self.decoder.forward(g, &self.store, z);
        let recon = g.mse(out, patches.clone());
        // KL(q || N(0, I)) summed over latent dims, averaged over tokens
        let mu2 = g.square(mu);
        let elv = g.exp(lv);
        let a = g.add(mu2, elv);
        let a = g.sub(a, lv);
        let a = g.add_scalar(a, -1.0);
        let kl = g.mean_all(a);
        let kl = g.scale(kl, 0.5 * self.cfg.d_c as f64);
        let weighted = g.scale(kl, beta_kl);
        let total = g.add(recon, weighted);
        VaeLoss { total, recon, kl }
    }

    fn posterior_mean(&self, patches: &Tensor<T>) -> Tensor<T> {
        let mut g = Graph::new();
        let x = g.constant(patches.clone());
        let h = self.trunk.forward(&mut g, &self.store, x);
        let h = g.gelu(h);
        let mu = self.mu.forward(&mut g, &self.store, h);
        g.value(mu).clone()
    }

    fn check_images(&self, images: &ImageBatch) -> Result<()> {
        if images.size != self.cfg.image_size {
            return Err(contract(format!(
                "image size {} does not match tokenizer size {}",
                images.size, self.cfg.image_size
            )));
        }
        Ok(())
    }

    /// Posterior-mean tokens times `latent_scale`.
    pub fn encode(&self, images: &ImageBatch) -> Result<ContinuousSequence> {
        self.check_images(images)?;
        let patches: Tensor<T> = patchify(images, self.cfg.patch)?.cast();
        let mut mu = self.posterior_mean(&patches);
        mu.scale_in_place(T::lit(self.latent_scale));
        Ok(ContinuousSequence {
            grid: self.cfg.grid(),
            tokens: mu.cast(),
        })
    }

    pub fn decode(&self, seq: &ContinuousSequence) -> Result<ImageBatch> {
        if seq.grid != self.cfg.grid() || seq.width() != self.cfg.d_c {
            return Err(contract(format!(
                "sequence grid {:?} width {} does not match tokenizer grid {:?} width {}",
                seq.grid,
                seq.width(),
                self.cfg.grid(),
                self.cfg.d_c
            )));
        }
        let mut z: Tensor<T> = seq.tokens.cast();
        z.scale_in_place(T::lit(1.0 / self.latent_scale));
        let mut g = Graph::new();
        let zv = g.constant(z);
        let out = self.decoder.forward(&mut g, &self.store, zv);
        let labels = vec![0; seq.batch_len()];
        unpatchify(&g.value(out).cast(), self.cfg.image_size, self.cfg.patch, labels)
    }

    /// Minimizes reconstruction + `beta_kl` KL; records the mean loss per epoch.
    pub fn train(&mut self, images: &ImageBatch) -> Result<()> {
        self.check_images(images)?;
        if images.is_empty() {
            return Err(config("tokenizer training needs a nonempty dataset"));
        }
        let patches: Tensor<T> = patchify(images, self.cfg.patch)?.cast();
        let mut rng = rng::stream(self.cfg.seed, "tokenizer/continuous/train");
        let mut opt = Adam::new(&self.store);
        let bs = self.cfg.batch_patches.min(patches.rows());
        let steps_per_epoch = patches.rows().div_ceil(bs);
        let total = steps_per_epoch * self.cfg.epochs;
        let mut step = 0;
        for epoch in 0..self.cfg.epochs {
            let order = shuffled(patches.rows(), &mut rng);
            let mut sum = 0.0;
            for chunk in order.chunks(bs) {
                let x = patches.select_rows(chunk);
                let eps = self
                    .cfg
                    .sample_posterior
                    .then(|| noise(x.rows(), self.cfg.d_c, &mut rng));
                let mut g = Graph::new();
                let l = self.loss_graph(&mut g, &x, eps, self.cfg.beta_kl);
                let loss = g.scalar(l.total).as_f64();
                check_finite(loss, "continuous tokenizer", epoch)?;
                let mut grads = g.backward(l.total).into_params();
                clip_grad_norm(&mut grads, 1.0);
                opt.step(&mut self.store, &grads, lr_at(step, total, self.cfg.lr, 0.05));
                step += 1;
                sum += loss;
            }
            self.loss_history.push(sum / steps_per_epoch as f64);
        }
        let mu = self.posterior_mean(&patches);
        let n = mu.len() as f64;
        let mean = mu.data().iter().map(|x| x.as_f64()).sum::<f64>() / n;
        let var = mu.data().iter().map(|x| (x.as_f64() - mean).powi(2)).sum::<f64>() / n;
        self.latent_scale = if var > 1e-12 { 1.0 / var.sqrt() } else { 1.0 };
        Ok(())
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        let manifest = json!({
            "kind": "continuous_tokenizer",
            "config": self.cfg,
            "latent_scale": self.latent_scale,
            "loss_history": self.loss_history,
            "seed": self.cfg.seed,
        });
        checkpoint::save(dir, &manifest, &checkpoint::store_arrays("", &self.store))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let (manifest, arrays) = checkpoint::load(dir)?;
        let cfg: TokenizerConfig = serde_json::from_value(checkpoint::get_field(&manifest, "config")?.clone())?;
        let mut tok = Self::new(cfg)?;
        checkpoint::fill_store("", &mut tok.store, &arrays)?;
        tok.latent_scale = checkpoint::get_field(&manifest, "latent_scale")?
            .as_f64()
            .ok_or_else(|| contract("latent_scale is not a number"))?;
        tok.loss_history = serde_json::from_value(manifest["loss_history"].clone()).unwrap_or_default();
        Ok(tok)
    }
}

/// VQ-VAE stand-in producing codebook indices.
#[derive(Debug, Clone)]
pub struct VqTokenizer<T: Real = f32> {
    pub cfg: TokenizerConfig,
    pub store: ParamStore<T>,
    encoder: PatchMlp,
    decoder: PatchMlp,
    codebook: ParamId,
    pub loss_history: Vec<f64>,
}

pub struct VqLoss {
    pub total: Var,
    pub recon: Var,
    pub indices: Vec<usize>,
    pub latents: Tensor<f64>,
}

impl<T: Real> VqTokenizer<T> {
    pub fn new(cfg: TokenizerConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = rng::stream(cfg.seed, "tokenizer/vq/init");
        let mut store = ParamStore::new();
        let (pd, h) = (cfg.patch_dim(), cfg.hidden);
        let encoder = PatchMlp::new(&mut store, "enc", &[pd, h, h, cfg.d_d], &mut rng);
        let decoder = PatchMlp::new(&mut store, "dec", &[cfg.d_d, h, h, pd], &mut rng);
        let cb = crate::nn::normal_tensor(cfg.codebook_size, cfg.d_d, 1.0, &mut rng);
        let codebook = store.add("codebook", cb);
        Ok(Self {
            cfg,
            store,
            encoder,
            decoder,
            codebook,
            loss_history: Vec::new(),
        })
    }

    pub fn codebook(&self) -> Codebook {
        Codebook {
            codewords: self.store.get(self.codebook).cast(),
        }
    }

    pub fn codebook_id(&self) -> ParamId {
        self.codebook
    }

    pub fn encoder_graph(&self, g: &mut Graph<T>, x: Var) -> Var {
        self.encoder.forward(g, &self.store, x)
    }

    pub fn decoder_graph(&self, g: &mut Graph<T>, z: Var) -> Var {
        self.decoder.forward(g, &self.store, z)
    }

    /// Reconstruction through the straight-through quantizer plus codebook
    /// and commitment terms.
    pub fn loss_graph(&self, g: &mut Graph<T>, patches: &Tensor<T>) -> VqLoss {
        let x = g.constant(patches.clone());
        let ze = self.encoder_graph(g, x);
        let ze_val = g.value(ze).clone();
        let cb = self.store.get(self.codebook);
        let indices = quantize(&ze_val, cb).expect("codebook is never empty");
        let book = g.param(&self.store, self.codebook);
        let zq = g.gather_rows(book, &indices);
        let zq_val = g.value(zq).clone();
        let st = g.straight_through(ze, zq_val.clone());
        let out = self.decoder_graph(g, st);
        let recon = g.mse(out, patches.clone());
        let codebook_term = g.mse(zq, ze_val.clone());
        let commit = g.mse(ze, zq_val);
        let commit = g.scale(commit, self.cfg.beta_commit);
        let total = g.add(recon, codebook_term);
        let total = g.add(total, commit);
        VqLoss {
            total,
            recon,
            indices,
            latents: ze_val.cast(),
        }
    }

    fn check_images(&self, images: &ImageBatch) -> Result<()> {
        if images.size != self.cfg.image_size {
            return Err(contract(format!(
                "image size {} does not match tokenizer size {}",
                images.size, self.cfg.image_size
            )));
        }
        Ok(())
    }

    fn encode_patches(&self, patches: &Tensor<T>) -> Tensor<T> {
        let mut g = Graph::new();
        let x = g.constant(patches.clone());
        let ze = self.encoder_graph(&mut g, x);
        g.value(ze).clone()
    }

    /// Pre-quantization encoder outputs, one row per token.
    pub fn encode_latents(&self, images: &ImageBatch) -> Result<Tensor<f32>> {
        self.check_images(images)?;
        let patches: Tensor<T> = patchify(images, self.cfg.patch)?.cast();
        Ok(self.encode_patches(&patches).cast())
    }

    pub fn tokenize(&self, images: &ImageBatch) -> Result<DiscreteSequence> {
        self.check_images(images)?;
        let patches: Tensor<T> = patchify(images, self.cfg.patch)?.cast();
        let ze = self.encode_patches(&patches);
        Ok(DiscreteSequence {
            grid: self.cfg.grid(),
            indices: quantize(&ze, self.store.get(self.codebook))?,
        })
    }

    pub fn decode(&self, seq: &DiscreteSequence) -> Result<ImageBatch> {
        if seq.grid != self.cfg.grid() {
            return Err(contract(format!("grid {:?} does not match tokenizer", seq.grid)));
        }
        let zq: Tensor<T> = self.codebook().lookup(&seq.indices)?.cast();
        let mut g = Graph::new();
        let z = g.constant(zq);
        let out = self.decoder_graph(&mut g, z);
        unpatchify(&g.value(out).cast(), self.cfg.image_size, self.cfg.patch, vec![0; seq.batch_len()])
    }

    /// Fraction of codewords selected at least once on `images`.
    pub fn codebook_usage(&self, images: &ImageBatch) -> Result<f64> {
        let seq = self.tokenize(images)?;
        let mut used = vec![false; self.cfg.codebook_size];
        for &i in &seq.indices {
            used[i] = true;
        }
        Ok(used.iter().filter(|&&u| u).count() as f64 / used.len() as f64)
    }

    fn reseed_codewords(&mut self, ids: &[usize], latents: &Tensor<T>, rng: &mut Rng) {
        let book = self.store.get_mut(self.codebook);
        for &k in ids {
            let src = rng.random_range(0..latents.rows());
            let row: Vec<T> = latents
                .row(src)
                .iter()
                .map(|&v| v + T::lit(0.01 * rng::normal(rng)))
                .collect();
            book.row_mut(k).copy_from_slice(&row);
        }
    }

    /// Trains encoder, decoder and codebook. Codewords start at random
    /// encoder outputs; any codeword unused for a whole epoch is moved to a
    /// random encoder output of that epoch.
    pub fn train(&mut self, images: &ImageBatch) -> Result<()> {
        self.check_images(images)?;
        if images.is_empty() {
            return Err(config("tokenizer training needs a nonempty dataset"));
        }
        let patches: Tensor<T> = patchify(images, self.cfg.patch)?.cast();
        let mut rng = rng::stream(self.cfg.seed, "tokenizer/vq/train");
        let all: Vec<usize> = (0..self.cfg.codebook_size).collect();
        let ze = self.encode_patches(&patches);
        self.reseed_codewords(&all, &ze, &mut rng);

        let mut opt = Adam::new(&self.store);
        let bs = self.cfg.batch_patches.min(patches.rows());
        let steps_per_epoch = patches.rows().div_ceil(bs);
        let total = steps_per_epoch * self.cfg.epochs;
        let mut step = 0;
        for epoch in 0..self.cfg.epochs {
            let order = shuffled(patches.rows(), &mut rng);
            let mut used = vec![false; self.cfg.codebook_size];
            let mut sum = 0.0;
            for chunk in order.chunks(bs) {
                let x = patches.select_rows(chunk);
                let mut g = Graph::new();
                let l = self.loss_graph(&mut g, &x);
                let loss = g.scalar(l.total).as_f64();
                check_finite(loss, "vq tokenizer", epoch)?;
                for &i in &l.indices {
                    used[i] = true;
                }
                let mut grads = g.backward(l.total).into_params();
                clip_grad_norm(&mut grads, 1.0);
                opt.step(&mut self.store, &grads, lr_at(step, total, self.cfg.lr, 0.05));
                step += 1;
                sum += loss;
            }
            self.loss_history.push(sum / steps_per_epoch as f64);
            let dead: Vec<usize> = (0..used.len()).filter(|&k| !used[k]).collect();
            if !dead.is_empty() && epoch + 1 < self.cfg.epochs {
                let ze = self.encode_patches(&patches);
                self.reseed_codewords(&dead, &ze, &mut rng);
            }
        }
        Ok(())
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        let manifest = json!({
            "kind": "vq_tokenizer",
            "config": self.cfg,
            "loss_history": self.loss_history,
            "seed": self.cfg.seed,
        });
        checkpoint::save(dir, &manifest, &checkpoint::store_arrays("", &self.store))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let (manifest, arrays) = checkpoint::load(dir)?;
        let cfg: TokenizerConfig = serde_json::from_value(checkpoint::get_field(&manifest, "config")?.clone())?;
        let mut tok = Self::new(cfg)?;
        checkpoint::fill_store("", &mut tok.store, &arrays)?;
        tok.loss_history = serde_json::from_value(manifest["loss_history"].clone()).unwrap_or_default();
        Ok(tok)
    }
}

/// Both trained tokenizers.
#[derive(Debug, Clone)]
pub struct Tokenizers {
    pub continuous: ContinuousTokenizer<f32>,
    pub vq: VqTokenizer<f32>,
}

impl Tokenizers {
    pub fn exists(dir: &Path) -> bool {
        checkpoint::exists(&dir.join("continuous")) && checkpoint::exists(&dir.join("vq"))
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        self.continuous.save(&dir.join("continuous"))?;
        self.vq.save(&dir.join("vq"))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        Ok(Self {
            continuous: ContinuousTokenizer::load(&dir.join("continuous"))?,
            vq: VqTokenizer::load(&dir.join("vq"))?,
        })
    }
}

pub fn train_tokenizers(images: &ImageBatch, cfg: &TokenizerConfig) -> Result<Tokenizers> {
    let mut continuous = ContinuousTokenizer::new(cfg.clone())?;
    continuous.train(images)?;
    let mut vq = VqTokenizer::new(cfg.clone())?;
    vq.train(images)?;
    Ok(Tokenizers { continuous, vq })
}

/// Codebook rows as a named array, for manifests that embed the codebook.
pub fn codebook_array(cb: &Codebook) -> NamedArray {
    NamedArray::from_tensor("codebook", &cb.codewords)
}
