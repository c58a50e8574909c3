//! Transformer building blocks: linear maps, layer norm, dropout,
//! sinusoidal positional encoding, feed-forward, and the attention and
//! encoder/decoder stacks in the submodules.
//!
//! Blocks are pure functions of (input, parameters, phase); parameters are
//! plain tensors registered on the active tape by name during the forward
//! pass, so a fresh tape per step sees every parameter exactly once.

pub mod attention;
pub mod transformer;

pub use attention::{scaled_dot_attention, MultiHeadAttention};
pub use transformer::{Decoder, DecoderLayer, Encoder, EncoderLayer, FeedForward};

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Element, Tape, Tensor};

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Architectural dimensions shared by every transformer in the model zoo.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelDims {
    pub d_model: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub n_layers: usize,
    pub dropout: f64,
}

impl Default for ModelDims {
    fn default() -> Self {
        Self {
            d_model: 512,
            n_heads: 8,
            d_ff: 2048,
            n_layers: 6,
            dropout: 0.1,
        }
    }
}

impl ModelDims {
    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.n_heads == 0 || self.d_ff == 0 || self.n_layers == 0 {
            return Err(Error::Config("model dims must all be >= 1".into()));
        }
        if self.d_model % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "n_heads {} must divide d_model {}",
                self.n_heads, self.d_model
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!(
                "dropout {} must lie in [0, 1)",
                self.dropout
            )));
        }
        Ok(())
    }

    pub fn d_k(&self) -> usize {
        self.d_model / self.n_heads
    }
}

/// Forward-pass mode. Dropout draws from the RNG only in `Train`.
pub enum Phase<'a> {
    Train { rng: &'a mut ChaCha8Rng },
    Eval,
}

/// A named trainable tensor.
#[derive(Clone, Debug)]
pub struct Param<E> {
    pub name: String,
    pub value: Tensor<E>,
}

impl<E: Element> Param<E> {
    pub fn new(name: impl Into<String>, value: Tensor<E>) -> Self {
        Self {
            name: name.into(),
            value,
        }
    }

    /// Binds this parameter onto the tape as a watched leaf.
    pub fn on(&self, tape: &mut Tape<E>) -> Tensor<E> {
        tape.watch(&self.name, &self.value)
    }
}

/// Uniform init in ±sqrt(6 / (fan_in + fan_out)).
pub fn xavier_uniform<E: Element>(
    rng: &mut ChaCha8Rng,
    rows: usize,
    cols: usize,
    fan_in: usize,
    fan_out: usize,
) -> Tensor<E> {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let data = (0..rows * cols)
        .map(|_| E::from_f64(rng.gen_range(-limit..limit)))
        .collect();
    Tensor::from_vec(rows, cols, data).unwrap()
}

/// Affine map `x · W + b` with `W: in×out`, `b: 1×out`.
#[derive(Clone, Debug)]
pub struct Linear<E> {
    pub w: Param<E>,
    pub b: Param<E>,
}

impl<E: Element> Linear<E> {
    pub fn new(prefix: &str, d_in: usize, d_out: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            w: Param::new(
                format!("{prefix}.w"),
                xavier_uniform(rng, d_in, d_out, d_in, d_out),
            ),
            b: Param::new(format!("{prefix}.b"), Tensor::zeros(1, d_out)),
        }
    }

    pub fn d_in(&self) -> usize {
        self.w.value.rows()
    }

    pub fn d_out(&self) -> usize {
        self.w.value.cols()
    }

    pub fn forward(&self, tape: &mut Tape<E>, x: &Tensor<E>) -> Result<Tensor<E>> {
        let w = self.w.on(tape);
        let b = self.b.on(tape);
        let h = tape.matmul(x, &w)?;
        tape.add_bias(&h, &b)
    }

    pub fn visit(&self, f: &mut dyn FnMut(&Param<E>)) {
        f(&self.w);
        f(&self.b);
    }

    pub fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<E>)) {
        f(&mut self.w);
        f(&mut self.b);
    }
}

/// Per-token layer normalization with learned affine rescale.
#[derive(Clone, Debug)]
pub struct LayerNorm<E> {
    pub gamma: Param<E>,
    pub beta: Param<E>,
}

impl<E: Element> LayerNorm<E> {
    pub fn new(prefix: &str, d: usize) -> Self {
        Self {
            gamma: Param::new(format!("{prefix}.gamma"), Tensor::full(1, d, E::one())),
            beta: Param::new(format!("{prefix}.beta"), Tensor::zeros(1, d)),
        }
    }

    pub fn forward(&self, tape: &mut Tape<E>, x: &Tensor<E>) -> Result<Tensor<E>> {
        let gamma = self.gamma.on(tape);
        let beta = self.beta.on(tape);
        tape.layer_norm(x, &gamma, &beta, E::from_f64(LAYER_NORM_EPS))
    }

    pub fn visit(&self, f: &mut dyn FnMut(&Param<E>)) {
        f(&self.gamma);
        f(&self.beta);
    }

    pub fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<E>)) {
        f(&mut self.gamma);
        f(&mut self.beta);
    }
}

/// Inverted dropout: in training, keeps each element with probability
/// `1 - p` and rescales by `1/(1 - p)`; identity in eval.
pub fn dropout<E: Element>(
    tape: &mut Tape<E>,
    x: &Tensor<E>,
    p: f64,
    phase: &mut Phase<'_>,
) -> Result<Tensor<E>> {
    match phase {
        Phase::Eval => Ok(x.clone()),
        Phase::Train { rng } => {
            if p == 0.0 {
                return Ok(x.clone());
            }
            let keep = 1.0 / (1.0 - p);
            let mask: Vec<E> = (0..x.numel())
                .map(|_| {
                    if rng.gen_range(0.0..1.0) < p {
                        E::zero()
                    } else {
                        E::from_f64(keep)
                    }
                })
                .collect();
            let mask = Tensor::from_vec(x.rows(), x.cols(), mask)?;
            tape.mul(x, &mask)
        }
    }
}

/// Sinusoidal positional encoding table:
/// `PE(pos, 2i) = sin(pos / 10000^(2i/d))`, `PE(pos, 2i+1) = cos(...)`.
pub fn positional_encoding<E: Element>(len: usize, d_model: usize) -> Tensor<E> {
    let mut data = Vec::with_capacity(len * d_model);
    for pos in 0..len {
        for col in 0..d_model {
            let i = col / 2;
            let angle = pos as f64 / 10000f64.powf(2.0 * i as f64 / d_model as f64);
            let v = if col % 2 == 0 { angle.sin() } else { angle.cos() };
            data.push(E::from_f64(v));
        }
    }
    Tensor::from_vec(len, d_model, data).unwrap()
}
