//! One-hidden-layer ReLU networks used for both the classifier `G = C∘F` and the
//! domain discriminator.
//!
//! The hidden activation is the feature map `F`; the output affine map followed
//! by softmax is the head `C`. Gradients are derived by hand for the mean
//! (optionally weighted) soft-target cross-entropy over a batch.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{ensure_len, CegError, Result};
use crate::math::{cross_entropy, softmax, ProbVec};
use crate::rng::RngStream;
use crate::scalar::Scalar;

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MlpDims {
    pub input: usize,
    pub hidden: usize,
    pub output: usize,
}

/// Parameters of `x ↦ W2·relu(W1·x + b1) + b2`. Matrices are row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpParams<S> {
    pub dims: MlpDims,
    pub w1: Vec<S>,
    pub b1: Vec<S>,
    pub w2: Vec<S>,
    pub b2: Vec<S>,
}

/// Gradients with the same layout as [`MlpParams`].
#[derive(Debug, Clone, PartialEq)]
pub struct GradientSet<S> {
    pub dims: MlpDims,
    pub w1: Vec<S>,
    pub b1: Vec<S>,
    pub w2: Vec<S>,
    pub b2: Vec<S>,
}

/// One training example: input, (soft) target distribution and loss weight.
#[derive(Debug, Clone, Copy)]
pub struct Example<'a, S> {
    pub input: &'a [S],
    pub target: &'a [S],
    pub weight: S,
}

impl<'a, S: Scalar> Example<'a, S> {
    pub fn new(input: &'a [S], target: &'a [S]) -> Self {
        Self {
            input,
            target,
            weight: S::one(),
        }
    }
}

/// Intermediate values of one forward pass, kept for backprop.
struct Activations<S> {
    pre: Vec<S>,
    hidden: Vec<S>,
    probs: ProbVec<S>,
}

impl<S: Scalar> GradientSet<S> {
    pub fn zeros(dims: MlpDims) -> Self {
        Self {
            dims,
            w1: vec![S::zero(); dims.hidden * dims.input],
            b1: vec![S::zero(); dims.hidden],
            w2: vec![S::zero(); dims.output * dims.hidden],
            b2: vec![S::zero(); dims.output],
        }
    }

    pub fn tensors(&self) -> [&[S]; 4] {
        [&self.w1, &self.b1, &self.w2, &self.b2]
    }

    fn tensors_mut(&mut self) -> [&mut Vec<S>; 4] {
        [&mut self.w1, &mut self.b1, &mut self.w2, &mut self.b2]
    }

    /// `self += scale · other`.
    pub fn add_scaled(&mut self, other: &Self, scale: S) -> Result<()> {
        if self.dims != other.dims {
            return Err(CegError::Consistency("gradient shapes differ".into()));
        }
        for (dst, src) in self.tensors_mut().into_iter().zip(other.tensors()) {
            for (d, s) in dst.iter_mut().zip(src) {
                *d += scale * *s;
            }
        }
        Ok(())
    }

    pub fn scale(&mut self, factor: S) {
        for t in self.tensors_mut() {
            t.iter_mut().for_each(|v| *v *= factor);
        }
    }

    pub fn norm(&self) -> S {
        self.tensors()
            .iter()
            .flat_map(|t| t.iter())
            .map(|v| *v * *v)
            .sum::<S>()
            .sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.iter().all(|v| v.is_finite()))
    }
}

impl<S: Scalar> MlpParams<S> {
    pub fn zeros(dims: MlpDims) -> Self {
        let g = GradientSet::<S>::zeros(dims);
        Self {
            dims,
            w1: g.w1,
            b1: g.b1,
            w2: g.w2,
            b2: g.b2,
        }
    }

    /// Glorot-uniform weights, zero biases.
    pub fn init<R: Rng + ?Sized>(dims: MlpDims, rng: &mut R) -> Result<Self> {
        if dims.input == 0 || dims.hidden == 0 || dims.output == 0 {
            return Err(CegError::Config(format!("degenerate network dims {dims:?}")));
        }
        let mut params = Self::zeros(dims);
        let a1 = (6.0 / (dims.input + dims.hidden) as f64).sqrt();
        for w in &mut params.w1 {
            *w = S::lit(rng.random_range(-a1..=a1));
        }
        let a2 = (6.0 / (dims.hidden + dims.output) as f64).sqrt();
        for w in &mut params.w2 {
            *w = S::lit(rng.random_range(-a2..=a2));
        }
        Ok(params)
    }

    pub fn tensors(&self) -> [&[S]; 4] {
        [&self.w1, &self.b1, &self.w2, &self.b2]
    }

    pub fn tensors_mut(&mut self) -> [&mut Vec<S>; 4] {
        [&mut self.w1, &mut self.b1, &mut self.w2, &mut self.b2]
    }

    fn check_input(&self, x: &[S]) -> Result<()> {
        ensure_len("network input", self.dims.input, x.len())?;
        if x.iter().any(|v| !v.is_finite()) {
            return Err(CegError::NumericInput("network input".into()));
        }
        Ok(())
    }

    fn pre_activation(&self, x: &[S]) -> Vec<S> {
        let d = self.dims.input;
        self.w1
            .chunks_exact(d)
            .zip(&self.b1)
            .map(|(row, b)| crate::math::dot(row, x) + *b)
            .collect()
    }

    fn head(&self, hidden: &[S]) -> Vec<S> {
        self.w2
            .chunks_exact(self.dims.hidden)
            .zip(&self.b2)
            .map(|(row, b)| crate::math::dot(row, hidden) + *b)
            .collect()
    }

    /// The feature map `F(x) = relu(W1·x + b1)`.
    pub fn features(&self, x: &[S]) -> Result<Vec<S>> {
        self.check_input(x)?;
        Ok(self
            .pre_activation(x)
            .into_iter()
            .map(|z| z.max(S::zero()))
            .collect())
    }

    pub fn logits(&self, x: &[S]) -> Result<Vec<S>> {
        let h = self.features(x)?;
        Ok(self.head(&h))
    }

    pub fn predict(&self, x: &[S]) -> Result<ProbVec<S>> {
        softmax(&self.logits(x)?)
    }

    fn forward(&self, x: &[S]) -> Result<Activations<S>> {
        self.check_input(x)?;
        let pre = self.pre_activation(x);
        let hidden: Vec<S> = pre.iter().map(|z| z.max(S::zero())).collect();
        let probs = softmax(&self.head(&hidden))?;
        Ok(Activations { pre, hidden, probs })
    }

    /// Mean cross-entropy over `batch` (no gradients).
    pub fn loss(&self, batch: &[Example<'_, S>]) -> Result<S> {
        if batch.is_empty() {
            return Err(CegError::EmptyBatch);
        }
        let mut total = S::zero();
        for ex in batch {
            ensure_len("target", self.dims.output, ex.target.len())?;
            if ex.weight != S::zero() {
                total += ex.weight * cross_entropy(&self.predict(ex.input)?, ex.target)?;
            }
        }
        Ok(total / S::from_count(batch.len()))
    }

    /// Mean weighted cross-entropy `(1/n) Σ w_i · ℓ(G(x_i), t_i)` and its gradient.
    ///
    /// The denominator is the batch size regardless of weights, so zero-weight
    /// examples still count.
    pub fn loss_and_gradients(&self, batch: &[Example<'_, S>]) -> Result<(S, GradientSet<S>)> {
        if batch.is_empty() {
            return Err(CegError::EmptyBatch);
        }
        let MlpDims {
            input: d,
            hidden: m,
            output: o,
        } = self.dims;
        let mut grads = GradientSet::zeros(self.dims);
        let mut total = S::zero();
        let mut dz2 = vec![S::zero(); o];
        let mut dz1 = vec![S::zero(); m];
        for ex in batch {
            ensure_len("target", o, ex.target.len())?;
            if ex.weight == S::zero() {
                // shape checks only; contributes nothing
                self.check_input(ex.input)?;
                continue;
            }
            let act = self.forward(ex.input)?;
            total += ex.weight * cross_entropy(&act.probs, ex.target)?;

            // d/dz of -Σ t ln softmax(z) is p·Σt - t
            let mass: S = ex.target.iter().copied().sum();
            for ((g, p), t) in dz2.iter_mut().zip(act.probs.iter()).zip(ex.target) {
                *g = ex.weight * (*p * mass - *t);
            }
            for (j, g) in dz2.iter().enumerate() {
                grads.b2[j] += *g;
                let row = &mut grads.w2[j * m..(j + 1) * m];
                for (w, h) in row.iter_mut().zip(&act.hidden) {
                    *w += *g * *h;
                }
            }
            for (i, slot) in dz1.iter_mut().enumerate() {
                *slot = if act.pre[i] > S::zero() {
                    (0..o).map(|j| self.w2[j * m + i] * dz2[j]).sum()
                } else {
                    S::zero()
                };
            }
            for (i, g) in dz1.iter().enumerate() {
                if *g == S::zero() {
                    continue;
                }
                grads.b1[i] += *g;
                let row = &mut grads.w1[i * d..(i + 1) * d];
                for (w, x) in row.iter_mut().zip(ex.input) {
                    *w += *g * *x;
                }
            }
        }
        let n = S::from_count(batch.len());
        grads.scale(S::one() / n);
        Ok((total / n, grads))
    }

    /// `θ ← θ − lr·g`, with the feature layer and head on separate rates.
    pub fn sgd_step(&mut self, grads: &GradientSet<S>, lr_feature: S, lr_head: S) -> Result<()> {
        if grads.dims != self.dims {
            return Err(CegError::Consistency("gradient shape differs from model".into()));
        }
        if !(lr_feature > S::zero()) || !(lr_head > S::zero()) {
            return Err(CegError::Parameter("learning rates must be positive".into()));
        }
        if !grads.is_finite() {
            return Err(CegError::NumericInput("non-finite gradient".into()));
        }
        let rates = [lr_feature, lr_feature, lr_head, lr_head];
        for ((param, grad), lr) in self.tensors_mut().into_iter().zip(grads.tensors()).zip(rates) {
            for (p, g) in param.iter_mut().zip(grad) {
                *p -= lr * *g;
            }
        }
        Ok(())
    }

    pub fn save_checkpoint(&self, path: &Path, seed: Option<u64>) -> Result<()> {
        let ckpt = Checkpoint {
            version: CHECKPOINT_VERSION,
            seed,
            params: self.clone(),
        };
        fs::write(path, serde_json::to_string(&ckpt)?)?;
        Ok(())
    }

    pub fn load_checkpoint(path: &Path) -> Result<(Self, Option<u64>)> {
        let ckpt: Checkpoint<S> = serde_json::from_str(&fs::read_to_string(path)?)?;
        if ckpt.version != CHECKPOINT_VERSION {
            return Err(CegError::Config(format!(
                "unsupported checkpoint version {}",
                ckpt.version
            )));
        }
        let p = ckpt.params;
        let MlpDims { input, hidden, output } = p.dims;
        ensure_len("checkpoint w1", hidden * input, p.w1.len())?;
        ensure_len("checkpoint b1", hidden, p.b1.len())?;
        ensure_len("checkpoint w2", output * hidden, p.w2.len())?;
        ensure_len("checkpoint b2", output, p.b2.len())?;
        Ok((p, ckpt.seed))
    }
}

/// On-disk model layout: `{version, seed, dims, w1, b1, w2, b2}`.
///
/// Floats are written in shortest round-trip decimal form, so save/load is bit-exact.
#[derive(Debug, Serialize, Deserialize)]
struct Checkpoint<S> {
    version: u32,
    seed: Option<u64>,
    #[serde(flatten)]
    params: MlpParams<S>,
}

/// Domain discriminator `H`: an independent MLP with one output per source domain.
#[derive(Debug, Clone, PartialEq)]
pub struct DomainDiscriminator<S> {
    params: MlpParams<S>,
}

/// Loss trace of one discriminator training call.
#[derive(Debug, Clone, PartialEq)]
pub struct DiscriminatorTrace<S> {
    pub loss_before: S,
    pub loss_after: S,
    pub step_losses: Vec<S>,
}

impl<S: Scalar> DomainDiscriminator<S> {
    pub fn new<R: Rng + ?Sized>(input: usize, hidden: usize, num_domains: usize, rng: &mut R) -> Result<Self> {
        let params = MlpParams::init(
            MlpDims {
                input,
                hidden,
                output: num_domains,
            },
            rng,
        )?;
        Ok(Self { params })
    }

    pub fn from_params(params: MlpParams<S>) -> Self {
        Self { params }
    }

    pub fn params(&self) -> &MlpParams<S> {
        &self.params
    }

    pub fn num_domains(&self) -> usize {
        self.params.dims.output
    }

    pub fn predict(&self, x: &[S]) -> Result<ProbVec<S>> {
        self.params.predict(x)
    }

    /// Mean domain cross-entropy over `pool`.
    pub fn pool_loss(&self, pool: &[(&[S], usize)]) -> Result<S> {
        if pool.is_empty() {
            return Err(CegError::EmptyPool);
        }
        let targets = self.one_hots(pool)?;
        let batch: Vec<Example<'_, S>> = pool
            .iter()
            .zip(&targets)
            .map(|((x, _), t)| Example::new(x, t.as_slice()))
            .collect();
        self.params.loss(&batch)
    }

    fn one_hots(&self, pool: &[(&[S], usize)]) -> Result<Vec<ProbVec<S>>> {
        pool.iter()
            .map(|(_, k)| ProbVec::one_hot(self.num_domains(), *k))
            .collect()
    }

    /// Minibatch SGD on the domain-discriminability loss over the unlabeled pool.
    pub fn train(
        &mut self,
        pool: &[(&[S], usize)],
        epochs: usize,
        batch_size: usize,
        lr: S,
        rng: &mut RngStream,
    ) -> Result<DiscriminatorTrace<S>> {
        if pool.is_empty() {
            return Err(CegError::EmptyPool);
        }
        if batch_size == 0 {
            return Err(CegError::Config("batch size must be positive".into()));
        }
        let loss_before = self.pool_loss(pool)?;
        let mut step_losses = Vec::new();
        if self.num_domains() > 1 {
            let targets = self.one_hots(pool)?;
            let mut order: Vec<usize> = (0..pool.len()).collect();
            for _ in 0..epochs {
                order.shuffle(rng);
                for chunk in order.chunks(batch_size) {
                    let batch: Vec<Example<'_, S>> = chunk
                        .iter()
                        .map(|&i| Example::new(pool[i].0, targets[i].as_slice()))
                        .collect();
                    let (loss, grads) = self.params.loss_and_gradients(&batch)?;
                    self.params.sgd_step(&grads, lr, lr)?;
                    step_losses.push(loss);
                }
            }
        }
        let loss_after = self.pool_loss(pool)?;
        Ok(DiscriminatorTrace {
            loss_before,
            loss_after,
            step_losses,
        })
    }
}
