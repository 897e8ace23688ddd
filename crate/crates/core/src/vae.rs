//! Shallow VAE over concept vectors.
//!
//! Encoder: `M → hidden → 2K` (first K outputs are μ, last K are log σ²).
//! Decoder: `K → hidden → M`. Loss per sample is the squared reconstruction
//! error plus the KL divergence to N(0, I), summed over the batch. The latent
//! representation of a concept vector is its posterior mean μ.
//!
//! Model file layout (little-endian):
//!
//! ```text
//! "CVAE" u32 version=1
//! u64 M, u64 hidden, u64 K, u8 activation (0 = relu, 1 = tanh)
//! 8 × (u64 rows, u64 cols, f32 payload): enc1 W/b, enc2 W/b, dec1 W/b, dec2 W/b
//! [32] pool fingerprint, [32] config hash, u64 seed
//! f64 learning_rate, u64 max_epochs, u64 batch_size, u64 train seed
//! ```

use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use rayon::prelude::*;

use crate::artifact::{read_file, write_file, ByteReader, ByteWriter, Lineage};
use crate::embedding_store::write_atomic;
use crate::error::{Error, Result};
use crate::numerics::{derive_seed, gaussian_vec, seeded_gaussian, AdamState, GaussianStream, Matrix};

pub const CVAE_MAGIC: &[u8; 4] = b"CVAE";
pub const CVAE_VERSION: u32 = 1;

/// Samples per gradient chunk; chunks are summed in index order so results
/// do not depend on the thread count.
const CHUNK: usize = 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Tanh,
}

impl Activation {
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Relu => x.max(0.0),
            Activation::Tanh => x.tanh(),
        }
    }

    /// Derivative from the pre-activation and activation values.
    fn derivative(self, pre: f64, post: f64) -> f64 {
        match self {
            Activation::Relu => {
                if pre > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => 1.0 - post * post,
        }
    }

    fn code(self) -> u8 {
        match self {
            Activation::Relu => 0,
            Activation::Tanh => 1,
        }
    }

    fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(Activation::Relu),
            1 => Some(Activation::Tanh),
            _ => None,
        }
    }
}

impl FromStr for Activation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "relu" => Ok(Activation::Relu),
            "tanh" => Ok(Activation::Tanh),
            other => Err(Error::Config(format!("unknown activation {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct VaeTrainConfig {
    pub learning_rate: f64,
    pub max_epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub latent_dim: usize,
    pub hidden_dim: usize,
    pub activation: Activation,
}

impl Default for VaeTrainConfig {
    fn default() -> Self {
        VaeTrainConfig {
            learning_rate: 5e-5,
            max_epochs: 450,
            batch_size: 256,
            seed: 42,
            latent_dim: 128,
            hidden_dim: 512,
            activation: Activation::Relu,
        }
    }
}

impl VaeTrainConfig {
    pub fn validate(&self) -> Result<()> {
        if (self.learning_rate.is_nan() || self.learning_rate <= 0.0) || self.batch_size == 0 || self.latent_dim == 0 || self.hidden_dim == 0 {
            return Err(Error::Config(
                "vae learning_rate, batch_size, latent_dim and hidden_dim must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// Affine layer `y = W x + b` with `W` stored out × in.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub weight: Matrix,
    pub bias: Matrix,
}

impl Dense {
    pub fn zeros(input: usize, output: usize) -> Self {
        Dense {
            weight: Matrix::zeros(output, input),
            bias: Matrix::zeros(1, output),
        }
    }

    /// Gaussian weights with variance 1/fan_in, zero bias.
    fn init(input: usize, output: usize, seed: u64) -> Result<Self> {
        let scale = 1.0 / (input as f32).sqrt();
        Ok(Dense {
            weight: seeded_gaussian(output, input, seed).map(|v| v * scale)?,
            bias: Matrix::zeros(1, output),
        })
    }

    pub fn input_dim(&self) -> usize {
        self.weight.cols()
    }

    pub fn output_dim(&self) -> usize {
        self.weight.rows()
    }
}

/// `f64` copy of a layer for the inner loops.
#[derive(Debug, Clone)]
struct Affine {
    w: Vec<f64>,
    b: Vec<f64>,
    input: usize,
    output: usize,
}

impl Affine {
    fn from_dense(d: &Dense) -> Self {
        Affine {
            w: d.weight.to_f64(),
            b: d.bias.to_f64(),
            input: d.input_dim(),
            output: d.output_dim(),
        }
    }

    fn forward(&self, x: &[f64]) -> Vec<f64> {
        (0..self.output)
            .map(|o| {
                let row = &self.w[o * self.input..(o + 1) * self.input];
                self.b[o] + row.iter().zip(x).map(|(w, x)| w * x).sum::<f64>()
            })
            .collect()
    }

    /// Accumulates parameter gradients and returns ∂/∂x.
    fn backward(&self, x: &[f64], dy: &[f64], grad: Option<&mut AffineGrad>) -> Vec<f64> {
        let mut dx = vec![0.0; self.input];
        for (o, &g) in dy.iter().enumerate() {
            if g == 0.0 {
                continue;
            }
            let row = &self.w[o * self.input..(o + 1) * self.input];
            for (d, w) in dx.iter_mut().zip(row) {
                *d += g * w;
            }
        }
        if let Some(acc) = grad {
            for (o, &g) in dy.iter().enumerate() {
                if g == 0.0 {
                    continue;
                }
                acc.b[o] += g;
                let row = &mut acc.w[o * self.input..(o + 1) * self.input];
                for (r, xv) in row.iter_mut().zip(x) {
                    *r += g * xv;
                }
            }
        }
        dx
    }
}

#[derive(Debug, Clone)]
struct AffineGrad {
    w: Vec<f64>,
    b: Vec<f64>,
}

impl AffineGrad {
    fn zeros(a: &Affine) -> Self {
        AffineGrad {
            w: vec![0.0; a.w.len()],
            b: vec![0.0; a.b.len()],
        }
    }

    fn add(&mut self, other: &AffineGrad) {
        self.w.iter_mut().zip(&other.w).for_each(|(a, b)| *a += b);
        self.b.iter_mut().zip(&other.b).for_each(|(a, b)| *a += b);
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct VaeModel {
    /// enc1, enc2, dec1, dec2.
    pub layers: [Dense; 4],
    pub activation: Activation,
    pub lineage: Lineage,
    pub train_config: VaeTrainConfig,
}

/// Gradients of the batch loss, one entry per layer, matching [`VaeModel::layers`].
#[derive(Debug, Clone, PartialEq)]
pub struct VaeGradients {
    pub layers: [(Matrix, Matrix); 4],
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ElboTerms {
    pub total: f64,
    pub recon: f64,
    pub kl: f64,
}

impl ElboTerms {
    fn add(&mut self, o: &ElboTerms) {
        self.total += o.total;
        self.recon += o.recon;
        self.kl += o.kl;
    }

    const ZERO: ElboTerms = ElboTerms {
        total: 0.0,
        recon: 0.0,
        kl: 0.0,
    };
}

impl VaeModel {
    /// Fresh model for `input_dim` concepts, initialized from `cfg.seed`.
    pub fn new(input_dim: usize, cfg: &VaeTrainConfig, lineage: Lineage) -> Result<Self> {
        cfg.validate()?;
        let (h, k) = (cfg.hidden_dim, cfg.latent_dim);
        let seed = |i| derive_seed(cfg.seed, &[0x7661_6500, i]);
        Ok(VaeModel {
            layers: [
                Dense::init(input_dim, h, seed(0))?,
                Dense::init(h, 2 * k, seed(1))?,
                Dense::init(k, h, seed(2))?,
                Dense::init(h, input_dim, seed(3))?,
            ],
            activation: cfg.activation,
            lineage,
            train_config: cfg.clone(),
        })
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].input_dim()
    }

    pub fn hidden_dim(&self) -> usize {
        self.layers[0].output_dim()
    }

    pub fn latent_dim(&self) -> usize {
        self.layers[2].input_dim()
    }

    fn validate_shapes(&self) -> Result<()> {
        let (m, h, k) = (self.input_dim(), self.hidden_dim(), self.latent_dim());
        let expect = [(m, h), (h, 2 * k), (k, h), (h, m)];
        for (i, (layer, (inp, out))) in self.layers.iter().zip(expect).enumerate() {
            if layer.input_dim() != inp || layer.output_dim() != out || layer.bias.shape() != (1, out) {
                return Err(Error::Dimension(format!("vae layer {i} does not chain")));
            }
        }
        Ok(())
    }

    /// Frozen `f64` copy of the network for repeated evaluation.
    pub fn frozen(&self) -> FrozenVae {
        FrozenVae {
            layers: [
                Affine::from_dense(&self.layers[0]),
                Affine::from_dense(&self.layers[1]),
                Affine::from_dense(&self.layers[2]),
                Affine::from_dense(&self.layers[3]),
            ],
            activation: self.activation,
            latent: self.latent_dim(),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = ByteWriter::default();
        w.magic(CVAE_MAGIC, CVAE_VERSION);
        w.u64(self.input_dim() as u64);
        w.u64(self.hidden_dim() as u64);
        w.u64(self.latent_dim() as u64);
        w.u8(self.activation.code());
        for layer in &self.layers {
            w.matrix(&layer.weight);
            w.matrix(&layer.bias);
        }
        w.lineage(&self.lineage);
        let c = &self.train_config;
        w.f64(c.learning_rate);
        w.u64(c.max_epochs as u64);
        w.u64(c.batch_size as u64);
        w.u64(c.seed);
        w.finish()
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let mut r = ByteReader::new(bytes, path);
        r.magic(CVAE_MAGIC, CVAE_VERSION)?;
        let _m = r.usize()?;
        let hidden = r.usize()?;
        let latent = r.usize()?;
        let code = r.u8()?;
        let activation = Activation::from_code(code)
            .ok_or_else(|| Error::format(path, 32, format!("unknown activation code {code}")))?;
        let read_layer = |r: &mut ByteReader| -> Result<Dense> {
            Ok(Dense {
                weight: r.matrix()?,
                bias: r.matrix()?,
            })
        };
        let layers = [
            read_layer(&mut r)?,
            read_layer(&mut r)?,
            read_layer(&mut r)?,
            read_layer(&mut r)?,
        ];
        let lineage = r.lineage()?;
        let learning_rate = r.f64()?;
        let max_epochs = r.usize()?;
        let batch_size = r.usize()?;
        let seed = r.u64()?;
        r.finish()?;
        let model = VaeModel {
            layers,
            activation,
            lineage,
            train_config: VaeTrainConfig {
                learning_rate,
                max_epochs,
                batch_size,
                seed,
                latent_dim: latent,
                hidden_dim: hidden,
                activation,
            },
        };
        model.validate_shapes()?;
        Ok(model)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        write_file(path.as_ref(), &self.to_bytes())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        Self::from_bytes(&read_file(path)?, path)
    }
}

/// Intermediate values of one encoder pass.
struct EncoderTrace {
    pre1: Vec<f64>,
    h1: Vec<f64>,
    mu: Vec<f64>,
    logvar: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct FrozenVae {
    layers: [Affine; 4],
    activation: Activation,
    latent: usize,
}

impl FrozenVae {
    pub fn input_dim(&self) -> usize {
        self.layers[0].input
    }

    pub fn latent_dim(&self) -> usize {
        self.latent
    }

    fn check_input(&self, q: &[f64]) -> Result<()> {
        if q.len() != self.input_dim() {
            return Err(Error::Dimension(format!(
                "concept vector has {} entries, model expects {}",
                q.len(),
                self.input_dim()
            )));
        }
        Ok(())
    }

    fn encode_trace(&self, q: &[f64]) -> EncoderTrace {
        let pre1 = self.layers[0].forward(q);
        let h1: Vec<f64> = pre1.iter().map(|&v| self.activation.apply(v)).collect();
        let mut out = self.layers[1].forward(&h1);
        let logvar = out.split_off(self.latent);
        EncoderTrace {
            pre1,
            h1,
            mu: out,
            logvar,
        }
    }

    pub fn encode(&self, q: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        self.check_input(q)?;
        let t = self.encode_trace(q);
        if t.mu.iter().chain(&t.logvar).any(|v| !v.is_finite()) {
            return Err(Error::Numerical("non-finite encoder output".into()));
        }
        Ok((t.mu, t.logvar))
    }

    pub fn decode(&self, z: &[f64]) -> Vec<f64> {
        let pre = self.layers[2].forward(z);
        let h: Vec<f64> = pre.iter().map(|&v| self.activation.apply(v)).collect();
        self.layers[3].forward(&h)
    }

    /// `J_μ(q)ᵀ · cotangent`: pulls a latent-space vector back to concept space.
    pub fn mean_vjp(&self, q: &[f64], cotangent: &[f64]) -> Result<Vec<f64>> {
        self.check_input(q)?;
        if cotangent.len() != self.latent {
            return Err(Error::Dimension("cotangent length differs from latent size".into()));
        }
        let t = self.encode_trace(q);
        let mut d_out = cotangent.to_vec();
        d_out.extend(std::iter::repeat_n(0.0, self.latent));
        let d_h1 = self.layers[1].backward(&t.h1, &d_out, None);
        let d_pre1: Vec<f64> = d_h1
            .iter()
            .zip(t.pre1.iter().zip(&t.h1))
            .map(|(g, (&pre, &post))| g * self.activation.derivative(pre, post))
            .collect();
        Ok(self.layers[0].backward(q, &d_pre1, None))
    }

    /// Loss of one sample with noise `eps`; accumulates gradients when asked.
    fn sample_loss(&self, q: &[f64], eps: &[f64], grads: Option<&mut [AffineGrad; 4]>) -> ElboTerms {
        let act = self.activation;
        let t = self.encode_trace(q);
        let sigma: Vec<f64> = t.logvar.iter().map(|lv| (0.5 * lv).exp()).collect();
        let z: Vec<f64> = (0..self.latent).map(|d| t.mu[d] + sigma[d] * eps[d]).collect();
        let pre3 = self.layers[2].forward(&z);
        let h3: Vec<f64> = pre3.iter().map(|&v| act.apply(v)).collect();
        let recon_out = self.layers[3].forward(&h3);

        let recon: f64 = recon_out.iter().zip(q).map(|(r, x)| (r - x) * (r - x)).sum();
        let kl: f64 = t
            .mu
            .iter()
            .zip(&t.logvar)
            .map(|(m, lv)| kl_term(*m, *lv))
            .sum();
        let terms = ElboTerms {
            total: recon + kl,
            recon,
            kl,
        };
        let Some(g) = grads else {
            return terms;
        };

        let d_out: Vec<f64> = recon_out.iter().zip(q).map(|(r, x)| 2.0 * (r - x)).collect();
        let d_h3 = self.layers[3].backward(&h3, &d_out, Some(&mut g[3]));
        let d_pre3: Vec<f64> = d_h3
            .iter()
            .zip(pre3.iter().zip(&h3))
            .map(|(g, (&pre, &post))| g * act.derivative(pre, post))
            .collect();
        let d_z = self.layers[2].backward(&z, &d_pre3, Some(&mut g[2]));
        let mut d_enc = Vec::with_capacity(2 * self.latent);
        d_enc.extend(d_z.iter().zip(&t.mu).map(|(g, mu)| g + mu));
        for d in 0..self.latent {
            let lv = t.logvar[d];
            d_enc.push(d_z[d] * 0.5 * sigma[d] * eps[d] + 0.5 * lv.exp_m1());
        }
        let d_h1 = self.layers[1].backward(&t.h1, &d_enc, Some(&mut g[1]));
        let d_pre1: Vec<f64> = d_h1
            .iter()
            .zip(t.pre1.iter().zip(&t.h1))
            .map(|(g, (&pre, &post))| g * act.derivative(pre, post))
            .collect();
        self.layers[0].backward(q, &d_pre1, Some(&mut g[0]));
        terms
    }

    fn zero_grads(&self) -> [AffineGrad; 4] {
        [
            AffineGrad::zeros(&self.layers[0]),
            AffineGrad::zeros(&self.layers[1]),
            AffineGrad::zeros(&self.layers[2]),
            AffineGrad::zeros(&self.layers[3]),
        ]
    }

    /// Batch loss over `rows` of `q`, with `noise_seed(i)` seeding row `i`'s draw.
    fn batch(
        &self,
        q: &Matrix,
        rows: &[usize],
        noise_seed: impl Fn(usize) -> u64 + Sync,
        want_grad: bool,
    ) -> (ElboTerms, Option<[AffineGrad; 4]>) {
        let chunks: Vec<(ElboTerms, Option<[AffineGrad; 4]>)> = rows
            .par_chunks(CHUNK)
            .map(|chunk| {
                let mut terms = ElboTerms::ZERO;
                let mut grads = want_grad.then(|| self.zero_grads());
                for &i in chunk {
                    let eps = gaussian_vec(self.latent, noise_seed(i));
                    let t = self.sample_loss(&q.row_f64(i), &eps, grads.as_mut());
                    terms.add(&t);
                }
                (terms, grads)
            })
            .collect();
        let mut terms = ElboTerms::ZERO;
        let mut grads: Option<[AffineGrad; 4]> = None;
        for (t, g) in chunks {
            terms.add(&t);
            match (&mut grads, g) {
                (Some(acc), Some(g)) => {
                    for (a, b) in acc.iter_mut().zip(&g) {
                        a.add(b);
                    }
                }
                (None, Some(g)) => grads = Some(g),
                _ => {}
            }
        }
        (terms, grads)
    }
}

/// ½(μ² + σ² − 1 − log σ²) for one latent dimension.
fn kl_term(mu: f64, logvar: f64) -> f64 {
    (0.5 * (mu * mu + logvar.exp_m1() - logvar)).max(0.0)
}

/// Σ_d −½(1 + logvar − μ² − e^logvar).
pub fn kl_divergence(mu: &[f64], logvar: &[f64]) -> f64 {
    mu.iter().zip(logvar).map(|(m, lv)| kl_term(*m, *lv)).sum()
}

pub fn encode(model: &VaeModel, q: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
    model.frozen().encode(q)
}

/// `z = μ + exp(logvar / 2) ⊙ ε` with ε drawn from `seed`.
pub fn reparameterize(mu: &[f64], logvar: &[f64], seed: u64) -> Result<Vec<f64>> {
    if mu.len() != logvar.len() {
        return Err(Error::Dimension("mu and logvar lengths differ".into()));
    }
    let eps = gaussian_vec(mu.len(), seed);
    Ok(mu
        .iter()
        .zip(logvar)
        .zip(&eps)
        .map(|((m, lv), e)| m + (0.5 * lv).exp() * e)
        .collect())
}

/// Noise seed of row `i` in a batch evaluated with `seed`.
pub fn sample_seed(seed: u64, row: usize) -> u64 {
    derive_seed(seed, &[row as u64])
}

fn check_batch(model: &VaeModel, batch: &Matrix) -> Result<()> {
    if batch.rows() == 0 {
        return Err(Error::Input("empty batch".into()));
    }
    if batch.cols() != model.input_dim() {
        return Err(Error::Dimension(format!(
            "batch has {} columns, model expects {}",
            batch.cols(),
            model.input_dim()
        )));
    }
    Ok(())
}

fn check_terms(t: &ElboTerms) -> Result<()> {
    if !t.total.is_finite() {
        return Err(Error::Numerical(format!(
            "non-finite ELBO (recon {}, kl {})",
            t.recon, t.kl
        )));
    }
    Ok(())
}

/// Summed reconstruction + KL over the batch; row `i` uses noise seed
/// [`sample_seed`]`(seed, i)`.
pub fn elbo_loss(model: &VaeModel, batch: &Matrix, seed: u64) -> Result<ElboTerms> {
    check_batch(model, batch)?;
    let rows: Vec<usize> = (0..batch.rows()).collect();
    let (terms, _) = model.frozen().batch(batch, &rows, |i| sample_seed(seed, i), false);
    check_terms(&terms)?;
    Ok(terms)
}

fn to_gradients(model: &VaeModel, g: [AffineGrad; 4]) -> Result<VaeGradients> {
    let mut out = Vec::with_capacity(4);
    for (layer, grad) in model.layers.iter().zip(g) {
        if grad.w.iter().chain(&grad.b).any(|v| !v.is_finite()) {
            return Err(Error::Numerical("non-finite VAE gradient".into()));
        }
        let (r, c) = layer.weight.shape();
        out.push((Matrix::from_f64(r, c, &grad.w)?, Matrix::from_f64(1, r, &grad.b)?));
    }
    let layers: [(Matrix, Matrix); 4] = out.try_into().expect("four layers");
    Ok(VaeGradients { layers })
}

/// Loss and analytic gradients with the same noise as [`elbo_loss`].
pub fn elbo_gradients(model: &VaeModel, batch: &Matrix, seed: u64) -> Result<(ElboTerms, VaeGradients)> {
    check_batch(model, batch)?;
    let rows: Vec<usize> = (0..batch.rows()).collect();
    let (terms, grads) = model.frozen().batch(batch, &rows, |i| sample_seed(seed, i), true);
    check_terms(&terms)?;
    Ok((terms, to_gradients(model, grads.expect("gradient requested"))?))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VaeEpochRecord {
    pub epoch: usize,
    pub recon: f64,
    pub kl: f64,
    pub total: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct VaeTrainingLog {
    pub epochs: Vec<VaeEpochRecord>,
}

impl VaeTrainingLog {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("epoch,recon,kl,total\n");
        for e in &self.epochs {
            let _ = writeln!(s, "{},{:.9},{:.9},{:.9}", e.epoch, e.recon, e.kl, e.total);
        }
        s
    }

    pub fn save_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        write_atomic(path.as_ref(), self.to_csv().as_bytes())
    }
}

/// Shuffled mini-batch Adam on the summed ELBO for `cfg.max_epochs` epochs.
///
/// Row `i` in epoch `e` draws its noise from `derive_seed(seed, [e, i])`, so
/// each sample gets one draw per epoch.
pub fn train_vae(q_all: &Matrix, cfg: &VaeTrainConfig, lineage: Lineage) -> Result<(VaeModel, VaeTrainingLog)> {
    cfg.validate()?;
    if q_all.rows() == 0 || q_all.cols() == 0 {
        return Err(Error::Input("VAE training data is empty".into()));
    }
    let mut model = VaeModel::new(q_all.cols(), cfg, lineage)?;
    let mut adams: Vec<AdamState> = model
        .layers
        .iter()
        .flat_map(|l| {
            [
                AdamState::for_params(&l.weight, cfg.learning_rate),
                AdamState::for_params(&l.bias, cfg.learning_rate),
            ]
        })
        .collect();
    let mut order: Vec<usize> = (0..q_all.rows()).collect();
    let mut shuffler = GaussianStream::new(derive_seed(cfg.seed, &[0x5348_5546]));
    let mut log = VaeTrainingLog::default();

    for epoch in 1..=cfg.max_epochs {
        shuffler.shuffle(&mut order);
        let mut epoch_terms = ElboTerms::ZERO;
        for rows in order.chunks(cfg.batch_size) {
            let frozen = model.frozen();
            let (terms, grads) = frozen.batch(q_all, rows, |i| derive_seed(cfg.seed, &[epoch as u64, i as u64]), true);
            if !terms.total.is_finite() {
                return Err(Error::Numerical(format!(
                    "epoch {epoch}: non-finite ELBO (recon {}, kl {})",
                    terms.recon, terms.kl
                )));
            }
            epoch_terms.add(&terms);
            let grads = to_gradients(&model, grads.expect("gradient requested"))?;
            for (i, (layer, (gw, gb))) in model.layers.iter_mut().zip(&grads.layers).enumerate() {
                adams[2 * i].update(&mut layer.weight, gw)?;
                adams[2 * i + 1].update(&mut layer.bias, gb)?;
            }
        }
        log::debug!(
            "vae epoch {epoch}: recon {:.6} kl {:.6} total {:.6}",
            epoch_terms.recon,
            epoch_terms.kl,
            epoch_terms.total
        );
        log.epochs.push(VaeEpochRecord {
            epoch,
            recon: epoch_terms.recon,
            kl: epoch_terms.kl,
            total: epoch_terms.total,
        });
    }
    if let Some(last) = log.epochs.last() {
        log::info!("vae final epoch {}: total {:.6}", last.epoch, last.total);
    }
    Ok((model, log))
}

/// Posterior means, one row per concept vector.
pub fn latent_representation(model: &VaeModel, q: &Matrix) -> Result<Matrix> {
    if q.cols() != model.input_dim() {
        return Err(Error::Dimension(format!(
            "concept matrix has {} columns, model expects {}",
            q.cols(),
            model.input_dim()
        )));
    }
    let frozen = model.frozen();
    let rows: Vec<Vec<f64>> = (0..q.rows())
        .into_par_iter()
        .map(|i| frozen.encode(&q.row_f64(i)).map(|(mu, _)| mu))
        .collect::<Result<_>>()?;
    Matrix::from_f64(q.rows(), model.latent_dim(), &rows.concat())
}
