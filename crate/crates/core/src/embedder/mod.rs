//! Residual convolutional embedding network over log-mel input, and the
//! projection head used by the contrastive objective.
//!
//! Layout: a 3×3 stem convolution, `stages` of residual blocks (the first
//! block of every stage after the first downsamples by 2), global mean
//! pooling, a linear map to the embedding size and L2 normalisation. Each
//! convolution is followed by a per-channel affine (scale, shift) instead of
//! batch normalisation.

mod checkpoint;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::diffmath::{Gradients, Graph, Sgd, Tensor, TensorError, Var};
use crate::dsp::LogMelSpectrogram;

pub use checkpoint::{
    config_digest, load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, CheckpointError,
    CHECKPOINT_MAGIC, CHECKPOINT_VERSION,
};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum EmbedderError {
    #[error("invalid embedder config: {0}")]
    InvalidConfig(String),
    #[error("input shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("parameters are frozen")]
    Frozen,
    #[error("no parameter named {0}")]
    UnknownParam(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EmbedderConfig {
    pub n_mels: usize,
    pub embedding_dim: usize,
    pub channels: Vec<usize>,
    pub blocks: Vec<usize>,
    pub projection_dim: usize,
    /// Stride of the stem convolution.
    pub stem_stride: usize,
}

impl Default for EmbedderConfig {
    fn default() -> Self {
        Self {
            n_mels: 128,
            embedding_dim: 64,
            channels: vec![8, 16],
            blocks: vec![2, 2],
            projection_dim: 32,
            stem_stride: 2,
        }
    }
}

impl EmbedderConfig {
    pub fn validate(&self) -> Result<(), EmbedderError> {
        let bad = |m: &str| Err(EmbedderError::InvalidConfig(m.to_string()));
        if self.embedding_dim == 0 || self.projection_dim == 0 || self.n_mels == 0 {
            return bad("embedding_dim, projection_dim and n_mels must be positive");
        }
        if self.channels.is_empty() || self.channels.len() != self.blocks.len() {
            return bad("channels and blocks must be non-empty and of equal length");
        }
        if self.channels.iter().chain(&self.blocks).any(|&v| v == 0) || self.stem_stride == 0 {
            return bad("channel widths, block counts and stem stride must be positive");
        }
        Ok(())
    }
}

/// Named network parameters plus the freeze flag.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbedderParams {
    config: EmbedderConfig,
    names: Vec<String>,
    tensors: Vec<Tensor>,
    frozen: bool,
}

/// Unit-norm embedding.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingVector(pub Vec<f64>);

impl EmbeddingVector {
    pub fn values(&self) -> &[f64] {
        &self.0
    }
}

struct Init {
    rng: ChaCha8Rng,
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl Init {
    fn normal(&mut self, name: String, shape: &[usize], std: f64) {
        let dist = Normal::new(0.0, std).expect("positive std");
        let n = shape.iter().product();
        let data = (0..n).map(|_| dist.sample(&mut self.rng)).collect();
        self.push(name, Tensor::from_parts(shape.to_vec(), data));
    }

    fn push(&mut self, name: String, t: Tensor) {
        self.names.push(name);
        self.tensors.push(t);
    }

    fn conv(&mut self, name: &str, out_ch: usize, in_ch: usize, k: usize) {
        let fan_in = (in_ch * k * k) as f64;
        self.normal(format!("{name}.weight"), &[out_ch, in_ch, k, k], (2.0 / fan_in).sqrt());
    }

    fn affine(&mut self, name: &str, ch: usize, scale: f64) {
        self.push(format!("{name}.scale"), Tensor::full(&[ch, 1, 1], scale));
        self.push(format!("{name}.shift"), Tensor::zeros(&[ch, 1, 1]));
    }

    fn linear(&mut self, name: &str, fan_in: usize, fan_out: usize) {
        self.normal(format!("{name}.weight"), &[fan_in, fan_out], (1.0 / fan_in as f64).sqrt());
        // nonzero so a constant input still maps to a unit vector
        self.normal(format!("{name}.bias"), &[fan_out], 0.01);
    }
}

fn block_name(stage: usize, block: usize) -> String {
    format!("stage{stage}.block{block}")
}

impl EmbedderParams {
    /// He-initialised parameters, seeded.
    pub fn init(config: &EmbedderConfig, seed: u64) -> Result<Self, EmbedderError> {
        config.validate()?;
        let mut init = Init {
            rng: ChaCha8Rng::seed_from_u64(seed),
            names: Vec::new(),
            tensors: Vec::new(),
        };
        init.conv("stem", config.channels[0], 1, 3);
        init.affine("stem.affine", config.channels[0], 1.0);
        let mut in_ch = config.channels[0];
        for (s, (&ch, &nb)) in config.channels.iter().zip(&config.blocks).enumerate() {
            for b in 0..nb {
                let name = block_name(s, b);
                let stride = if s > 0 && b == 0 { 2 } else { 1 };
                init.conv(&format!("{name}.conv1"), ch, in_ch, 3);
                init.affine(&format!("{name}.affine1"), ch, 1.0);
                init.conv(&format!("{name}.conv2"), ch, ch, 3);
                // residual branches start small so the identity path dominates
                init.affine(&format!("{name}.affine2"), ch, 0.1);
                if stride != 1 || in_ch != ch {
                    init.conv(&format!("{name}.shortcut"), ch, in_ch, 1);
                }
                in_ch = ch;
            }
        }
        init.linear("head", in_ch, config.embedding_dim);
        init.linear("proj1", config.embedding_dim, config.embedding_dim);
        init.linear("proj2", config.embedding_dim, config.projection_dim);
        Ok(Self {
            config: config.clone(),
            names: init.names,
            tensors: init.tensors,
            frozen: false,
        })
    }

    pub(crate) fn from_named(
        config: EmbedderConfig,
        named: Vec<(String, Tensor)>,
        frozen: bool,
    ) -> Result<Self, EmbedderError> {
        let reference = Self::init(&config, 0)?;
        if reference.names.len() != named.len() {
            return Err(EmbedderError::ShapeMismatch(format!(
                "expected {} tensors, got {}",
                reference.names.len(),
                named.len()
            )));
        }
        for ((rn, rt), (n, t)) in reference.names.iter().zip(&reference.tensors).zip(&named) {
            if rn != n || rt.shape() != t.shape() {
                return Err(EmbedderError::ShapeMismatch(format!(
                    "tensor {n} {:?} does not match {rn} {:?}",
                    t.shape(),
                    rt.shape()
                )));
            }
        }
        let (names, tensors) = named.into_iter().unzip();
        Ok(Self {
            config,
            names,
            tensors,
            frozen,
        })
    }

    pub fn config(&self) -> &EmbedderConfig {
        &self.config
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    pub fn freeze(&mut self) {
        self.frozen = true;
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.names.iter().position(|n| n == name).map(|i| &self.tensors[i])
    }

    /// Replace a tensor by name; refused once frozen.
    pub fn set(&mut self, name: &str, t: Tensor) -> Result<(), EmbedderError> {
        if self.frozen {
            return Err(EmbedderError::Frozen);
        }
        let i = self
            .names
            .iter()
            .position(|n| n == name)
            .ok_or_else(|| EmbedderError::UnknownParam(name.to_string()))?;
        if self.tensors[i].shape() != t.shape() {
            return Err(EmbedderError::ShapeMismatch(format!("{name}: {:?} vs {:?}", self.tensors[i].shape(), t.shape())));
        }
        self.tensors[i] = t;
        Ok(())
    }

    /// Place every tensor on `g`, as trainable leaves unless frozen.
    pub fn bind(&self, g: &mut Graph) -> BoundParams {
        let vars = self
            .tensors
            .iter()
            .map(|t| if self.frozen { g.input(t.clone()) } else { g.param(t.clone()) })
            .collect();
        BoundParams {
            names: self.names.clone(),
            vars,
        }
    }

    /// One optimiser step using the gradients of `bound` on a graph.
    pub fn apply_gradients(&mut self, bound: &BoundParams, grads: &Gradients, opt: &mut Sgd) -> Result<(), EmbedderError> {
        if self.frozen {
            return Err(EmbedderError::Frozen);
        }
        let g: Vec<Tensor> = bound.vars.iter().map(|&v| grads.wrt(v)).collect();
        self.step(&g, opt)
    }

    /// One optimiser step from gradients given in parameter order.
    pub fn step(&mut self, grads: &[Tensor], opt: &mut Sgd) -> Result<(), EmbedderError> {
        if self.frozen {
            return Err(EmbedderError::Frozen);
        }
        let mut refs: Vec<&mut Tensor> = self.tensors.iter_mut().collect();
        opt.step(&mut refs, grads)?;
        Ok(())
    }

    pub fn bitwise_eq(&self, other: &Self) -> bool {
        self.names == other.names
            && self.tensors.len() == other.tensors.len()
            && self.tensors.iter().zip(&other.tensors).all(|(a, b)| a.bitwise_eq(b))
    }
}

/// Graph variables for one binding of [`EmbedderParams`].
#[derive(Debug, Clone)]
pub struct BoundParams {
    names: Vec<String>,
    vars: Vec<Var>,
}

impl BoundParams {
    pub fn var(&self, name: &str) -> Var {
        let i = self
            .names
            .iter()
            .position(|n| n == name)
            .unwrap_or_else(|| panic!("parameter {name} not bound"));
        self.vars[i]
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }

    fn opt(&self, name: &str) -> Option<Var> {
        self.names.iter().position(|n| n == name).map(|i| self.vars[i])
    }
}

/// Standardise a spectrogram to zero mean and unit variance.
fn standardise(values: &[f64]) -> Vec<f64> {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    let std = if var > 1e-12 { var.sqrt() } else { 1.0 };
    values.iter().map(|v| (v - mean) / std).collect()
}

/// Stack spectrograms into a `[B, 1, frames, mels]` input tensor.
pub fn batch_input(config: &EmbedderConfig, specs: &[&LogMelSpectrogram]) -> Result<Tensor, EmbedderError> {
    let first = specs
        .first()
        .ok_or_else(|| EmbedderError::ShapeMismatch("empty batch".into()))?;
    let frames = first.n_frames;
    let mut data = Vec::with_capacity(specs.len() * frames * config.n_mels);
    for s in specs {
        if s.n_mels != config.n_mels || s.n_frames != frames {
            return Err(EmbedderError::ShapeMismatch(format!(
                "spectrogram {} is {}x{}, batch expects {frames}x{}",
                s.clip_id, s.n_frames, s.n_mels, config.n_mels
            )));
        }
        data.extend(standardise(&s.values));
    }
    Ok(Tensor::new(&[specs.len(), 1, frames, config.n_mels], data)?)
}

/// Row-wise L2 normalisation; an all-zero row stays zero instead of NaN.
fn normalize_rows(g: &mut Graph, x: Var) -> Result<Var, TensorError> {
    let shape = g.value(x).shape().to_vec();
    let norms = g.norm_axis(x, 1)?;
    let norms = g.offset(norms, f64::MIN_POSITIVE)?;
    let norms = g.reshape(norms, &[shape[0], 1])?;
    let norms = g.broadcast(norms, &shape)?;
    g.div(x, norms)
}

fn affine(g: &mut Graph, p: &BoundParams, name: &str, x: Var) -> Result<Var, TensorError> {
    let shape = g.value(x).shape().to_vec();
    let scale = g.broadcast(p.var(&format!("{name}.scale")), &shape)?;
    let shift = g.broadcast(p.var(&format!("{name}.shift")), &shape)?;
    let y = g.mul(x, scale)?;
    g.add(y, shift)
}

fn linear(g: &mut Graph, p: &BoundParams, name: &str, x: Var) -> Result<Var, TensorError> {
    let y = g.matmul(x, p.var(&format!("{name}.weight")))?;
    let shape = g.value(y).shape().to_vec();
    let b = g.broadcast(p.var(&format!("{name}.bias")), &shape)?;
    g.add(y, b)
}

/// Unit-norm embeddings `[B, d]` for a batch input built by [`batch_input`].
pub fn embed_graph(g: &mut Graph, config: &EmbedderConfig, p: &BoundParams, input: Var) -> Result<Var, EmbedderError> {
    let x = g.conv2d(input, p.var("stem.weight"), config.stem_stride, 1)?;
    let x = affine(g, p, "stem.affine", x)?;
    let mut x = g.relu(x)?;
    for (s, &nb) in config.blocks.iter().enumerate() {
        for b in 0..nb {
            let name = block_name(s, b);
            let stride = if s > 0 && b == 0 { 2 } else { 1 };
            let h = g.conv2d(x, p.var(&format!("{name}.conv1.weight")), stride, 1)?;
            let h = affine(g, p, &format!("{name}.affine1"), h)?;
            let h = g.relu(h)?;
            let h = g.conv2d(h, p.var(&format!("{name}.conv2.weight")), 1, 1)?;
            let h = affine(g, p, &format!("{name}.affine2"), h)?;
            let skip = match p.opt(&format!("{name}.shortcut.weight")) {
                Some(w) => g.conv2d(x, w, stride, 0)?,
                None => x,
            };
            let sum = g.add(h, skip)?;
            x = g.relu(sum)?;
        }
    }
    let pooled = g.mean_pool(x)?;
    let e = linear(g, p, "head", pooled)?;
    Ok(normalize_rows(g, e)?)
}

/// Projection head: linear → ReLU → linear → L2 normalisation, row-wise.
pub fn project_graph(g: &mut Graph, p: &BoundParams, emb: Var) -> Result<Var, EmbedderError> {
    let h = linear(g, p, "proj1", emb)?;
    let h = g.relu(h)?;
    let z = linear(g, p, "proj2", h)?;
    Ok(normalize_rows(g, z)?)
}

/// Embed a batch without recording gradients.
pub fn embed_batch(params: &EmbedderParams, specs: &[&LogMelSpectrogram]) -> Result<Tensor, EmbedderError> {
    let mut frozen = params.clone();
    frozen.frozen = true;
    let mut g = Graph::new();
    let bound = frozen.bind(&mut g);
    let input = g.input(batch_input(params.config(), specs)?);
    let e = embed_graph(&mut g, params.config(), &bound, input)?;
    Ok(g.value(e).clone())
}

/// Embed many spectrograms in chunks of `chunk`, in parallel, preserving order.
pub fn embed_all(params: &EmbedderParams, specs: &[&LogMelSpectrogram], chunk: usize) -> Result<Tensor, EmbedderError> {
    let d = params.config().embedding_dim;
    let parts = specs
        .par_chunks(chunk.max(1))
        .map(|part| embed_batch(params, part))
        .collect::<Result<Vec<_>, _>>()?;
    let data = parts.into_iter().flat_map(Tensor::into_data).collect();
    Ok(Tensor::new(&[specs.len(), d], data)?)
}

pub fn embed(spec: &LogMelSpectrogram, params: &EmbedderParams) -> Result<EmbeddingVector, EmbedderError> {
    Ok(EmbeddingVector(embed_batch(params, &[spec])?.into_data()))
}

pub fn project(e: &EmbeddingVector, params: &EmbedderParams) -> Result<Vec<f64>, EmbedderError> {
    let d = params.config().embedding_dim;
    if e.0.len() != d {
        return Err(EmbedderError::ShapeMismatch(format!("embedding of length {} vs {d}", e.0.len())));
    }
    let mut frozen = params.clone();
    frozen.frozen = true;
    let mut g = Graph::new();
    let bound = frozen.bind(&mut g);
    let x = g.input(Tensor::new(&[1, d], e.0.clone())?);
    let z = project_graph(&mut g, &bound, x)?;
    Ok(g.value(z).data().to_vec())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffmath::{finite_difference_gradient, max_relative_error};
    use rand::Rng;

    fn toy_config() -> EmbedderConfig {
        EmbedderConfig {
            n_mels: 6,
            embedding_dim: 4,
            channels: vec![2, 3],
            blocks: vec![1, 1],
            projection_dim: 3,
            stem_stride: 1,
        }
    }

    fn spec(seed: u64, frames: usize, mels: usize) -> LogMelSpectrogram {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        LogMelSpectrogram {
            clip_id: format!("s{seed}"),
            n_frames: frames,
            n_mels: mels,
            values: (0..frames * mels).map(|_| rng.random_range(-20.0..5.0)).collect(),
        }
    }

    #[test]
    fn embeddings_are_unit_norm_and_deterministic() {
        let params = EmbedderParams::init(&EmbedderConfig { n_mels: 16, ..EmbedderConfig::default() }, 3).unwrap();
        let s = spec(1, 20, 16);
        let a = embed(&s, &params).unwrap();
        let b = embed(&s.clone(), &params).unwrap();
        let norm: f64 = a.0.iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!((norm - 1.0).abs() < 1e-9);
        assert!(a.0.iter().zip(&b.0).all(|(x, y)| x.to_bits() == y.to_bits()));
        let z = project(&a, &params).unwrap();
        assert_eq!(z.len(), 32);
        assert!((z.iter().map(|v| v * v).sum::<f64>().sqrt() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn mel_mismatch_is_rejected() {
        let params = EmbedderParams::init(&toy_config(), 0).unwrap();
        assert!(matches!(embed(&spec(0, 8, 7), &params), Err(EmbedderError::ShapeMismatch(_))));
    }

    #[test]
    fn config_validation() {
        let mut c = toy_config();
        c.blocks = vec![1];
        assert!(c.validate().is_err());
        let mut c = toy_config();
        c.embedding_dim = 0;
        assert!(c.validate().is_err());
    }

    #[test]
    fn projection_with_identity_layers() {
        let config = EmbedderConfig {
            embedding_dim: 3,
            projection_dim: 3,
            ..toy_config()
        };
        let mut params = EmbedderParams::init(&config, 0).unwrap();
        let eye = Tensor::matrix(3, 3, vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0]).unwrap();
        params.set("proj1.weight", eye.clone()).unwrap();
        params.set("proj2.weight", eye).unwrap();
        params.set("proj1.bias", Tensor::zeros(&[3])).unwrap();
        params.set("proj2.bias", Tensor::zeros(&[3])).unwrap();
        let e = EmbeddingVector(vec![0.6, -0.48, 0.64]);
        let z = project(&e, &params).unwrap();
        // relu([0.6, -0.48, 0.64]) = [0.6, 0, 0.64], norm 0.877496...
        let n = (0.6f64 * 0.6 + 0.64 * 0.64).sqrt();
        let expected = [0.6 / n, 0.0, 0.64 / n];
        for (a, b) in z.iter().zip(expected) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn frozen_params_refuse_updates() {
        let mut params = EmbedderParams::init(&toy_config(), 0).unwrap();
        params.freeze();
        assert_eq!(params.set("head.bias", Tensor::zeros(&[4])), Err(EmbedderError::Frozen));
        let mut g = Graph::new();
        let bound = params.bind(&mut g);
        let input = g.input(batch_input(params.config(), &[&spec(2, 5, 6)]).unwrap());
        let e = embed_graph(&mut g, params.config(), &bound, input).unwrap();
        let s = g.sum(e).unwrap();
        let grads = g.backward(s).unwrap();
        let mut opt = Sgd::new(0.1, 0.9);
        let before = params.clone();
        assert_eq!(params.apply_gradients(&bound, &grads, &mut opt), Err(EmbedderError::Frozen));
        assert!(params.bitwise_eq(&before));
    }

    /// Scalar probe `Σ_i c_i·e_i` over a two-sample batch.
    fn probe(params: &EmbedderParams, specs: &[&LogMelSpectrogram], coeffs: &Tensor, with_projection: bool) -> (f64, Vec<Tensor>) {
        let mut g = Graph::new();
        let bound = params.bind(&mut g);
        let input = g.input(batch_input(params.config(), specs).unwrap());
        let mut out = embed_graph(&mut g, params.config(), &bound, input).unwrap();
        if with_projection {
            out = project_graph(&mut g, &bound, out).unwrap();
        }
        let c = g.input(coeffs.clone());
        let prod = g.mul(out, c).unwrap();
        let s = g.sum(prod).unwrap();
        let grads = g.backward(s).unwrap();
        (g.value(s).data()[0], bound.vars().iter().map(|&v| grads.wrt(v)).collect())
    }

    fn gradient_check(with_projection: bool) {
        let params = EmbedderParams::init(&toy_config(), 7).unwrap();
        let (s1, s2) = (spec(10, 7, 6), spec(11, 7, 6));
        let width = if with_projection { 3 } else { 4 };
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let coeffs = Tensor::matrix(2, width, (0..2 * width).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
        let (_, analytic) = probe(&params, &[&s1, &s2], &coeffs, with_projection);
        let numeric = finite_difference_gradient(
            |ts: &[Tensor]| {
                let named = params.names().iter().cloned().zip(ts.iter().cloned()).collect();
                let p = EmbedderParams::from_named(params.config().clone(), named, false).unwrap();
                Ok::<_, std::convert::Infallible>(probe(&p, &[&s1, &s2], &coeffs, with_projection).0)
            },
            params.tensors(),
            1e-5,
        )
        .unwrap();
        let err = max_relative_error(&analytic, &numeric, 1e-6);
        assert!(err < 1e-4, "relative error {err}");
    }

    #[test]
    fn embedding_gradient_matches_finite_differences() {
        gradient_check(false);
    }

    #[test]
    fn projection_gradient_matches_finite_differences() {
        gradient_check(true);
    }

    #[test]
    fn fuzzed_inputs_give_finite_embeddings() {
        let params = EmbedderParams::init(&toy_config(), 1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        for k in 0..30 {
            let scale = 10f64.powi(rng.random_range(-6..6));
            let values = (0..5 * 6).map(|_| rng.random_range(-1.0..1.0) * scale).collect();
            let s = LogMelSpectrogram {
                clip_id: format!("f{k}"),
                n_frames: 5,
                n_mels: 6,
                values,
            };
            assert!(embed(&s, &params).unwrap().0.iter().all(|v| v.is_finite()));
        }
        let flat = LogMelSpectrogram {
            clip_id: "flat".into(),
            n_frames: 5,
            n_mels: 6,
            values: vec![-23.0; 30],
        };
        let e = embed(&flat, &params).unwrap();
        assert!((e.0.iter().map(|v| v * v).sum::<f64>().sqrt() - 1.0).abs() < 1e-9);
    }
}
