//! Finite-difference gradient verification.
//!
//! Every differentiable operation, every transformer block, and the full
//! model forward are checked against central finite differences in f64:
//! the analytic gradient of a scalar loss must match
//! `(f(x+eps) - f(x-eps)) / 2eps` elementwise at relative error below
//! [`REL_TOL`]. The finite-difference side only ever evaluates forward
//! passes, so it is independent of the backward implementation it checks.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::{Sample, SampleMeta};
use crate::error::{Error, Result};
use crate::modality::{Modality, ModalityDims};
use crate::model::{state_dict, ModelKind, ModelSpec};
use crate::nn::{
    scaled_dot_attention, Decoder, Encoder, EncoderLayer, FeedForward, LayerNorm, ModelDims,
    MultiHeadAttention, Phase,
};
use crate::tensor::{Tape, Tensor};

pub const FD_EPS: f64 = 1e-5;
pub const REL_TOL: f64 = 1e-4;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CheckModule {
    All,
    Numerics,
    Blocks,
    Models,
}

impl std::str::FromStr for CheckModule {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "all" => Ok(CheckModule::All),
            "numerics" => Ok(CheckModule::Numerics),
            "blocks" => Ok(CheckModule::Blocks),
            "models" => Ok(CheckModule::Models),
            other => Err(Error::Config(format!(
                "unknown gradcheck module '{other}' (expected all, numerics, blocks, or models)"
            ))),
        }
    }
}

#[derive(Clone, Debug)]
pub struct CheckReport {
    pub name: String,
    pub max_rel_err: f64,
    pub passed: bool,
}

type Store = BTreeMap<String, Tensor<f64>>;
type LossFn<'a> = Box<dyn Fn(&mut Tape<f64>, &Store) -> Result<Tensor<f64>> + 'a>;

fn rel_err(ad: f64, fd: f64) -> f64 {
    (ad - fd).abs() / ad.abs().max(fd.abs()).max(1e-3)
}

/// Checks one scenario: analytic gradients of `loss` with respect to every
/// leaf in `store` against central finite differences.
fn check_scenario(name: &str, store: &Store, loss: LossFn<'_>) -> Result<CheckReport> {
    let mut tape = Tape::new();
    let loss_t = loss(&mut tape, store)?;
    let grads = tape.backward(&loss_t)?;

    let eval = |store: &Store| -> Result<f64> {
        let mut tape = Tape::new();
        Ok(loss(&mut tape, store)?.item())
    };

    let mut max_rel = 0.0f64;
    for (leaf, base) in store {
        let grad = grads
            .get(leaf)
            .ok_or_else(|| Error::Contract(format!("no gradient recorded for leaf '{leaf}'")))?;
        for i in 0..base.numel() {
            let mut plus = store.clone();
            let mut minus = store.clone();
            let mut dp = base.data().to_vec();
            let mut dm = base.data().to_vec();
            dp[i] += FD_EPS;
            dm[i] -= FD_EPS;
            plus.insert(
                leaf.clone(),
                Tensor::from_vec(base.rows(), base.cols(), dp)?,
            );
            minus.insert(
                leaf.clone(),
                Tensor::from_vec(base.rows(), base.cols(), dm)?,
            );
            let fd = (eval(&plus)? - eval(&minus)?) / (2.0 * FD_EPS);
            max_rel = max_rel.max(rel_err(grad.data()[i], fd));
        }
    }
    Ok(CheckReport {
        name: name.to_string(),
        max_rel_err: max_rel,
        passed: max_rel < REL_TOL,
    })
}

fn rand_tensor(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor<f64> {
    Tensor::from_vec(
        rows,
        cols,
        (0..rows * cols).map(|_| rng.gen_range(-1.0..1.0)).collect(),
    )
    .unwrap()
}

/// Values bounded away from zero, for kinked or log-domain ops.
fn rand_tensor_away_from_zero(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor<f64> {
    Tensor::from_vec(
        rows,
        cols,
        (0..rows * cols)
            .map(|_| {
                let mag = rng.gen_range(0.2..1.0);
                if rng.gen_range(0.0..1.0) < 0.5 {
                    -mag
                } else {
                    mag
                }
            })
            .collect(),
    )
    .unwrap()
}

fn weighted_sum(tape: &mut Tape<f64>, out: &Tensor<f64>, weights: &Tensor<f64>) -> Result<Tensor<f64>> {
    let weighted = tape.mul(out, weights)?;
    tape.sum(&weighted)
}

fn numerics_checks() -> Result<Vec<CheckReport>> {
    let mut rng = ChaCha8Rng::seed_from_u64(0xC0FFEE);
    let mut reports = Vec::new();

    {
        let mut store = Store::new();
        store.insert("a".into(), rand_tensor(&mut rng, 3, 4));
        store.insert("b".into(), rand_tensor(&mut rng, 4, 2));
        let r = rand_tensor(&mut rng, 3, 2);
        reports.push(check_scenario(
            "numerics::matmul",
            &store,
            Box::new(move |tape, s| {
                let a = tape.watch("a", &s["a"]);
                let b = tape.watch("b", &s["b"]);
                let out = tape.matmul(&a, &b)?;
                weighted_sum(tape, &out, &r)
            }),
        )?);
    }

    {
        let mut store = Store::new();
        store.insert("a".into(), rand_tensor(&mut rng, 3, 4));
        let r = rand_tensor(&mut rng, 4, 3);
        reports.push(check_scenario(
            "numerics::transpose",
            &store,
            Box::new(move |tape, s| {
                let a = tape.watch("a", &s["a"]);
                let out = tape.transpose(&a)?;
                weighted_sum(tape, &out, &r)
            }),
        )?);
    }

    {
        let mut store = Store::new();
        store.insert("a".into(), rand_tensor(&mut rng, 3, 4));
        store.insert("b".into(), rand_tensor(&mut rng, 3, 4));
        let r = rand_tensor(&mut rng, 3, 4);
        reports.push(check_scenario(
            "numerics::add",
            &store,
            Box::new(move |tape, s| {
                let a = tape.watch("a", &s["a"]);
                let b = tape.watch("b", &s["b"]);
                let out = tape.add(&a, &b)?;
                weighted_sum(tape, &out, &r)
            }),
        )?);
    }

    {
        let mut store = Store::new();
        store.insert("a".into(), rand_tensor(&mut rng, 3, 4));
        store.insert("bias".into(), rand_tensor(&mut rng, 1, 4));
        let r = rand_tensor(&mut rng, 3, 4);
        reports.push(check_scenario(
            "numerics::add_bias",
            &store,
            Box::new(move |tape, s| {
                let a = tape.watch("a", &s["a"]);
                let b = tape.watch("bias", &s["bias"]);
                let out = tape.add_bias(&a, &b)?;
                weighted_sum(tape, &out, &r)
            }),
        )?);
    }

    {
        let mut store = Store::new();
        store.insert("a".into(), rand_tensor(&mut rng, 3, 4));
        store.insert("b".into(), rand_tensor(&mut rng, 3, 4));
        let r = rand_tensor(&mut rng, 3, 4);
        reports.push(check_scenario(
            "numerics::mul",
            &store,
            Box::new(move |tape, s| {
                let a = tape.watch("a", &s["a"]);
                let b = tape.watch("b", &s["b"]);
                let out = tape.mul(&a, &b)?;
                weighted_sum(tape, &out, &r)
            }),
        )?);
    }

    {
        let mut store = Store::new();
        store.insert("a".into(), rand_tensor(&mut rng, 3, 4));
        let r = rand_tensor(&mut rng, 3, 4);
        reports.push(check_scenario(
            "numerics::scale",
            &store,
            Box::new(move |tape, s| {
                let a = tape.watch("a", &s["a"]);
                let out = tape.scale(&a, -1.7)?;
                weighted_sum(tape, &out, &r)
            }),
        )?);
    }

    {
        let mut store = Store::new();
        store.insert("a".into(), rand_tensor_away_from_zero(&mut rng, 3, 4));
        let r = rand_tensor(&mut rng, 3, 4);
        reports.push(check_scenario(
            "numerics::relu",
            &store,
            Box::new(move |tape, s| {
                let a = tape.watch("a", &s["a"]);
                let out = tape.relu(&a)?;
                weighted_sum(tape, &out, &r)
            }),
        )?);
    }

    {
        let mut store = Store::new();
        let positive = Tensor::from_vec(
            2,
            3,
            (0..6).map(|_| rng.gen_range(0.5..2.0)).collect(),
        )?;
        store.insert("a".into(), positive);
        let r = rand_tensor(&mut rng, 2, 3);
        reports.push(check_scenario(
            "numerics::log",
            &store,
            Box::new(move |tape, s| {
                let a = tape.watch("a", &s["a"]);
                let out = tape.log(&a)?;
                weighted_sum(tape, &out, &r)
            }),
        )?);
    }

    {
        let mut store = Store::new();
        store.insert("a".into(), rand_tensor(&mut rng, 3, 5));
        let r = rand_tensor(&mut rng, 3, 5);
        reports.push(check_scenario(
            "numerics::softmax_rows",
            &store,
            Box::new(move |tape, s| {
                let a = tape.watch("a", &s["a"]);
                let out = tape.softmax_rows(&a)?;
                weighted_sum(tape, &out, &r)
            }),
        )?);
    }

    {
        let mut store = Store::new();
        store.insert("x".into(), rand_tensor(&mut rng, 3, 6));
        store.insert("gamma".into(), rand_tensor(&mut rng, 1, 6));
        store.insert("beta".into(), rand_tensor(&mut rng, 1, 6));
        let r = rand_tensor(&mut rng, 3, 6);
        reports.push(check_scenario(
            "numerics::layer_norm",
            &store,
            Box::new(move |tape, s| {
                let x = tape.watch("x", &s["x"]);
                let gamma = tape.watch("gamma", &s["gamma"]);
                let beta = tape.watch("beta", &s["beta"]);
                let out = tape.layer_norm(&x, &gamma, &beta, 1e-5)?;
                weighted_sum(tape, &out, &r)
            }),
        )?);
    }

    {
        let mut store = Store::new();
        store.insert("a".into(), rand_tensor(&mut rng, 4, 3));
        let r = rand_tensor(&mut rng, 1, 3);
        reports.push(check_scenario(
            "numerics::mean_rows",
            &store,
            Box::new(move |tape, s| {
                let a = tape.watch("a", &s["a"]);
                let out = tape.mean_rows(&a)?;
                weighted_sum(tape, &out, &r)
            }),
        )?);
    }

    {
        let mut store = Store::new();
        store.insert("a".into(), rand_tensor(&mut rng, 3, 2));
        store.insert("b".into(), rand_tensor(&mut rng, 3, 4));
        let r = rand_tensor(&mut rng, 3, 6);
        reports.push(check_scenario(
            "numerics::concat_cols",
            &store,
            Box::new(move |tape, s| {
                let a = tape.watch("a", &s["a"]);
                let b = tape.watch("b", &s["b"]);
                let out = tape.concat_cols(&[&a, &b])?;
                weighted_sum(tape, &out, &r)
            }),
        )?);
    }

    {
        let mut store = Store::new();
        store.insert("a".into(), rand_tensor(&mut rng, 3, 6));
        let r = rand_tensor(&mut rng, 3, 2);
        reports.push(check_scenario(
            "numerics::slice_cols",
            &store,
            Box::new(move |tape, s| {
                let a = tape.watch("a", &s["a"]);
                let out = tape.slice_cols(&a, 2, 2)?;
                weighted_sum(tape, &out, &r)
            }),
        )?);
    }

    {
        let mut store = Store::new();
        store.insert("a".into(), rand_tensor(&mut rng, 3, 4));
        reports.push(check_scenario(
            "numerics::sum",
            &store,
            Box::new(move |tape, s| {
                let a = tape.watch("a", &s["a"]);
                tape.sum(&a)
            }),
        )?);
    }

    {
        let mut store = Store::new();
        store.insert("logits".into(), rand_tensor(&mut rng, 1, 5));
        reports.push(check_scenario(
            "numerics::cross_entropy",
            &store,
            Box::new(move |tape, s| {
                let z = tape.watch("logits", &s["logits"]);
                tape.cross_entropy_logits(&z, 3)
            }),
        )?);
    }

    Ok(reports)
}

fn tiny_dims() -> ModelDims {
    ModelDims {
        d_model: 8,
        n_heads: 2,
        d_ff: 16,
        n_layers: 1,
        dropout: 0.0,
    }
}

/// Leaves = the block's own parameters plus named inputs; the loss clones
/// the block, overrides its parameters from the store, and runs forward.
fn block_store<V: Visit>(block: &V, inputs: &[(&str, Tensor<f64>)]) -> Store {
    let mut store = Store::new();
    block.visit_into(&mut store);
    for (name, t) in inputs {
        store.insert((*name).into(), t.clone());
    }
    store
}

trait Visit: Clone {
    fn visit_into(&self, store: &mut Store);
    fn load_from(&mut self, store: &Store);
}

macro_rules! impl_visit {
    ($ty:ident) => {
        impl Visit for $ty<f64> {
            fn visit_into(&self, store: &mut Store) {
                self.visit(&mut |p| {
                    store.insert(p.name.clone(), p.value.clone());
                });
            }
            fn load_from(&mut self, store: &Store) {
                self.visit_mut(&mut |p| p.value = store[&p.name].clone());
            }
        }
    };
}

impl_visit!(MultiHeadAttention);
impl_visit!(FeedForward);
impl_visit!(LayerNorm);
impl_visit!(EncoderLayer);
impl_visit!(Encoder);
impl_visit!(Decoder);

fn blocks_checks() -> Result<Vec<CheckReport>> {
    let mut rng = ChaCha8Rng::seed_from_u64(0xB10C);
    let dims = tiny_dims();
    let mut reports = Vec::new();

    {
        let mut store = Store::new();
        store.insert("q".into(), rand_tensor(&mut rng, 3, 4));
        store.insert("k".into(), rand_tensor(&mut rng, 5, 4));
        store.insert("v".into(), rand_tensor(&mut rng, 5, 3));
        let r = rand_tensor(&mut rng, 3, 3);
        reports.push(check_scenario(
            "blocks::scaled_dot_attention",
            &store,
            Box::new(move |tape, s| {
                let q = tape.watch("q", &s["q"]);
                let k = tape.watch("k", &s["k"]);
                let v = tape.watch("v", &s["v"]);
                let out = scaled_dot_attention(tape, &q, &k, &v)?;
                weighted_sum(tape, &out, &r)
            }),
        )?);
    }

    {
        let mha = MultiHeadAttention::<f64>::new("mha", &dims, &mut rng);
        let x_q = rand_tensor(&mut rng, 3, 8);
        let x_kv = rand_tensor(&mut rng, 4, 8);
        let r = rand_tensor(&mut rng, 3, 8);
        let store = block_store(&mha, &[("x_q", x_q), ("x_kv", x_kv)]);
        reports.push(check_scenario(
            "blocks::multi_head_attention",
            &store,
            Box::new(move |tape, s| {
                let mut block = mha.clone();
                block.load_from(s);
                let x_q = tape.watch("x_q", &s["x_q"]);
                let x_kv = tape.watch("x_kv", &s["x_kv"]);
                let out = block.forward(tape, &x_q, &x_kv)?;
                weighted_sum(tape, &out, &r)
            }),
        )?);
    }

    {
        let ffn = FeedForward::<f64>::new("ffn", &dims, &mut rng);
        let x = rand_tensor(&mut rng, 3, 8);
        let r = rand_tensor(&mut rng, 3, 8);
        let store = block_store(&ffn, &[("x", x)]);
        reports.push(check_scenario(
            "blocks::feed_forward",
            &store,
            Box::new(move |tape, s| {
                let mut block = ffn.clone();
                block.load_from(s);
                let x = tape.watch("x", &s["x"]);
                let out = block.forward(tape, &x)?;
                weighted_sum(tape, &out, &r)
            }),
        )?);
    }

    {
        let ln = LayerNorm::<f64>::new("ln", 8);
        let x = rand_tensor(&mut rng, 3, 8);
        let r = rand_tensor(&mut rng, 3, 8);
        let store = block_store(&ln, &[("x", x)]);
        reports.push(check_scenario(
            "blocks::layer_norm_block",
            &store,
            Box::new(move |tape, s| {
                let mut block = ln.clone();
                block.load_from(s);
                let x = tape.watch("x", &s["x"]);
                let out = block.forward(tape, &x)?;
                weighted_sum(tape, &out, &r)
            }),
        )?);
    }

    {
        let enc = Encoder::<f64>::new("enc", &dims, &mut rng);
        let x = rand_tensor(&mut rng, 4, 8);
        let r = rand_tensor(&mut rng, 4, 8);
        let store = block_store(&enc, &[("x", x)]);
        reports.push(check_scenario(
            "blocks::encoder_forward",
            &store,
            Box::new(move |tape, s| {
                let mut block = enc.clone();
                block.load_from(s);
                let x = tape.watch("x", &s["x"]);
                let out = block.forward(tape, &x, &mut Phase::Eval)?;
                weighted_sum(tape, &out, &r)
            }),
        )?);
    }

    {
        let dec = Decoder::<f64>::new("dec", &dims, &mut rng);
        let tgt = rand_tensor(&mut rng, 3, 8);
        let memory = rand_tensor(&mut rng, 5, 8);
        let r = rand_tensor(&mut rng, 3, 8);
        let store = block_store(&dec, &[("tgt", tgt), ("memory", memory)]);
        reports.push(check_scenario(
            "blocks::decoder_forward",
            &store,
            Box::new(move |tape, s| {
                let mut block = dec.clone();
                block.load_from(s);
                let tgt = tape.watch("tgt", &s["tgt"]);
                let memory = tape.watch("memory", &s["memory"]);
                let out = block.forward(tape, &tgt, &memory, &mut Phase::Eval)?;
                weighted_sum(tape, &out, &r)
            }),
        )?);
    }

    Ok(reports)
}

fn random_sample(rng: &mut ChaCha8Rng, tokens: usize, dims: ModalityDims) -> Sample {
    let mut feats = BTreeMap::new();
    for m in Modality::ALL {
        let dim = dims.get(m);
        let data: Vec<f32> = (0..tokens * dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
        feats.insert(m, Tensor::from_vec(tokens, dim, data).unwrap());
    }
    Sample {
        feats,
        prior_label: 1,
        target_label: 2,
        meta: SampleMeta {
            conversation: "gradcheck".into(),
            anchor_s: 0,
        },
    }
}

/// End-to-end check: the full model loss at d=8, h=2, 1 layer, l_out=3,
/// differentiated with respect to every parameter.
fn models_checks() -> Result<Vec<CheckReport>> {
    let mod_dims = ModalityDims { t: 6, a: 4, v: 8 };
    let spec = ModelSpec {
        kind: ModelKind::parse("3m:T>V|A>V")?,
        dims: tiny_dims(),
        mod_dims,
        n_classes: 4,
        use_prior: true,
        l_out: 3,
    };
    let model = spec.build::<f64>(0xE2E)?;
    let mut rng = ChaCha8Rng::seed_from_u64(0x5A11);
    let sample = random_sample(&mut rng, 6, mod_dims);

    let store: Store = state_dict(model.as_ref()).into_iter().collect();
    let report = check_scenario(
        "models::forward_3m",
        &store,
        Box::new(move |tape, s| {
            // Rebuild the model with overridden parameters, then run the
            // training loss path in eval mode (dropout is zero here).
            let mut m = spec.build::<f64>(0xE2E)?;
            crate::model::load_state_dict(m.as_mut(), s)?;
            let out = m.forward(tape, &sample, &mut Phase::Eval)?;
            out.loss(tape, sample.target_label)
        }),
    )?;
    Ok(vec![report])
}

/// Runs the requested verification suite.
pub fn run_checks(module: CheckModule) -> Result<Vec<CheckReport>> {
    let mut reports = Vec::new();
    if matches!(module, CheckModule::All | CheckModule::Numerics) {
        reports.extend(numerics_checks()?);
    }
    if matches!(module, CheckModule::All | CheckModule::Blocks) {
        reports.extend(blocks_checks()?);
    }
    if matches!(module, CheckModule::All | CheckModule::Models) {
        reports.extend(models_checks()?);
    }
    Ok(reports)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn numerics_ops_pass_finite_difference() {
        for report in numerics_checks().unwrap() {
            assert!(
                report.passed,
                "{} failed: max rel err {}",
                report.name, report.max_rel_err
            );
        }
    }

    #[test]
    fn blocks_pass_finite_difference() {
        for report in blocks_checks().unwrap() {
            assert!(
                report.passed,
                "{} failed: max rel err {}",
                report.name, report.max_rel_err
            );
        }
    }
}
