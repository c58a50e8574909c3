//! Encoder and decoder stacks.
//!
//! Post-norm residual arrangement: each sublayer output is dropped out,
//! added to its input, then layer-normalized. Decoder self-attention is
//! unmasked — decoders here transform fixed-length query sequences, not an
//! autoregressive stream.

use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::nn::{dropout, LayerNorm, Linear, ModelDims, MultiHeadAttention, Param, Phase};
use crate::tensor::{Element, Tape, Tensor};

/// Position-wise feed-forward: `relu(x·W1 + b1)·W2 + b2`.
#[derive(Clone, Debug)]
pub struct FeedForward<E> {
    pub lin1: Linear<E>,
    pub lin2: Linear<E>,
}

impl<E: Element> FeedForward<E> {
    pub fn new(prefix: &str, dims: &ModelDims, rng: &mut ChaCha8Rng) -> Self {
        Self {
            lin1: Linear::new(&format!("{prefix}.lin1"), dims.d_model, dims.d_ff, rng),
            lin2: Linear::new(&format!("{prefix}.lin2"), dims.d_ff, dims.d_model, rng),
        }
    }

    pub fn forward(&self, tape: &mut Tape<E>, x: &Tensor<E>) -> Result<Tensor<E>> {
        let h = self.lin1.forward(tape, x)?;
        let h = tape.relu(&h)?;
        self.lin2.forward(tape, &h)
    }

    pub fn visit(&self, f: &mut dyn FnMut(&Param<E>)) {
        self.lin1.visit(f);
        self.lin2.visit(f);
    }

    pub fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<E>)) {
        self.lin1.visit_mut(f);
        self.lin2.visit_mut(f);
    }
}

#[derive(Clone, Debug)]
pub struct EncoderLayer<E> {
    pub self_attn: MultiHeadAttention<E>,
    pub ffn: FeedForward<E>,
    pub norm1: LayerNorm<E>,
    pub norm2: LayerNorm<E>,
    dropout_p: f64,
}

impl<E: Element> EncoderLayer<E> {
    pub fn new(prefix: &str, dims: &ModelDims, rng: &mut ChaCha8Rng) -> Self {
        Self {
            self_attn: MultiHeadAttention::new(&format!("{prefix}.self_attn"), dims, rng),
            ffn: FeedForward::new(&format!("{prefix}.ffn"), dims, rng),
            norm1: LayerNorm::new(&format!("{prefix}.norm1"), dims.d_model),
            norm2: LayerNorm::new(&format!("{prefix}.norm2"), dims.d_model),
            dropout_p: dims.dropout,
        }
    }

    pub fn forward(
        &self,
        tape: &mut Tape<E>,
        x: &Tensor<E>,
        phase: &mut Phase<'_>,
    ) -> Result<Tensor<E>> {
        let a = self.self_attn.forward(tape, x, x)?;
        let a = dropout(tape, &a, self.dropout_p, phase)?;
        let x = tape.add(x, &a)?;
        let x = self.norm1.forward(tape, &x)?;

        let f = self.ffn.forward(tape, &x)?;
        let f = dropout(tape, &f, self.dropout_p, phase)?;
        let x2 = tape.add(&x, &f)?;
        self.norm2.forward(tape, &x2)
    }

    pub fn visit(&self, f: &mut dyn FnMut(&Param<E>)) {
        self.self_attn.visit(f);
        self.ffn.visit(f);
        self.norm1.visit(f);
        self.norm2.visit(f);
    }

    pub fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<E>)) {
        self.self_attn.visit_mut(f);
        self.ffn.visit_mut(f);
        self.norm1.visit_mut(f);
        self.norm2.visit_mut(f);
    }
}

/// Decoder layer: unmasked self-attention, cross-attention to the encoder
/// memory, then the feed-forward sublayer.
#[derive(Clone, Debug)]
pub struct DecoderLayer<E> {
    pub self_attn: MultiHeadAttention<E>,
    pub cross_attn: MultiHeadAttention<E>,
    pub ffn: FeedForward<E>,
    pub norm1: LayerNorm<E>,
    pub norm2: LayerNorm<E>,
    pub norm3: LayerNorm<E>,
    dropout_p: f64,
}

impl<E: Element> DecoderLayer<E> {
    pub fn new(prefix: &str, dims: &ModelDims, rng: &mut ChaCha8Rng) -> Self {
        Self {
            self_attn: MultiHeadAttention::new(&format!("{prefix}.self_attn"), dims, rng),
            cross_attn: MultiHeadAttention::new(&format!("{prefix}.cross_attn"), dims, rng),
            ffn: FeedForward::new(&format!("{prefix}.ffn"), dims, rng),
            norm1: LayerNorm::new(&format!("{prefix}.norm1"), dims.d_model),
            norm2: LayerNorm::new(&format!("{prefix}.norm2"), dims.d_model),
            norm3: LayerNorm::new(&format!("{prefix}.norm3"), dims.d_model),
            dropout_p: dims.dropout,
        }
    }

    pub fn forward(
        &self,
        tape: &mut Tape<E>,
        x: &Tensor<E>,
        memory: &Tensor<E>,
        phase: &mut Phase<'_>,
    ) -> Result<Tensor<E>> {
        let a = self.self_attn.forward(tape, x, x)?;
        let a = dropout(tape, &a, self.dropout_p, phase)?;
        let x = tape.add(x, &a)?;
        let x = self.norm1.forward(tape, &x)?;

        let c = self.cross_attn.forward(tape, &x, memory)?;
        let c = dropout(tape, &c, self.dropout_p, phase)?;
        let x = tape.add(&x, &c)?;
        let x = self.norm2.forward(tape, &x)?;

        let f = self.ffn.forward(tape, &x)?;
        let f = dropout(tape, &f, self.dropout_p, phase)?;
        let x2 = tape.add(&x, &f)?;
        self.norm3.forward(tape, &x2)
    }

    pub fn visit(&self, f: &mut dyn FnMut(&Param<E>)) {
        self.self_attn.visit(f);
        self.cross_attn.visit(f);
        self.ffn.visit(f);
        self.norm1.visit(f);
        self.norm2.visit(f);
        self.norm3.visit(f);
    }

    pub fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<E>)) {
        self.self_attn.visit_mut(f);
        self.cross_attn.visit_mut(f);
        self.ffn.visit_mut(f);
        self.norm1.visit_mut(f);
        self.norm2.visit_mut(f);
        self.norm3.visit_mut(f);
    }
}

#[derive(Clone, Debug)]
pub struct Encoder<E> {
    pub layers: Vec<EncoderLayer<E>>,
}

impl<E: Element> Encoder<E> {
    pub fn new(prefix: &str, dims: &ModelDims, rng: &mut ChaCha8Rng) -> Self {
        Self {
            layers: (0..dims.n_layers)
                .map(|i| EncoderLayer::new(&format!("{prefix}.{i}"), dims, rng))
                .collect(),
        }
    }

    pub fn forward(
        &self,
        tape: &mut Tape<E>,
        seq: &Tensor<E>,
        phase: &mut Phase<'_>,
    ) -> Result<Tensor<E>> {
        let mut x = seq.clone();
        for layer in &self.layers {
            x = layer.forward(tape, &x, phase)?;
        }
        Ok(x)
    }

    pub fn visit(&self, f: &mut dyn FnMut(&Param<E>)) {
        for l in &self.layers {
            l.visit(f);
        }
    }

    pub fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<E>)) {
        for l in &mut self.layers {
            l.visit_mut(f);
        }
    }
}

#[derive(Clone, Debug)]
pub struct Decoder<E> {
    pub layers: Vec<DecoderLayer<E>>,
}

impl<E: Element> Decoder<E> {
    pub fn new(prefix: &str, dims: &ModelDims, rng: &mut ChaCha8Rng) -> Self {
        Self {
            layers: (0..dims.n_layers)
                .map(|i| DecoderLayer::new(&format!("{prefix}.{i}"), dims, rng))
                .collect(),
        }
    }

    pub fn forward(
        &self,
        tape: &mut Tape<E>,
        tgt: &Tensor<E>,
        memory: &Tensor<E>,
        phase: &mut Phase<'_>,
    ) -> Result<Tensor<E>> {
        let mut x = tgt.clone();
        for layer in &self.layers {
            x = layer.forward(tape, &x, memory, phase)?;
        }
        Ok(x)
    }

    pub fn visit(&self, f: &mut dyn FnMut(&Param<E>)) {
        for l in &self.layers {
            l.visit(f);
        }
    }

    pub fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<E>)) {
        for l in &mut self.layers {
            l.visit_mut(f);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::LAYER_NORM_EPS;
    use rand::{Rng, SeedableRng};
    use std::collections::HashMap;

    fn tiny_dims() -> ModelDims {
        ModelDims {
            d_model: 8,
            n_heads: 2,
            d_ff: 16,
            n_layers: 1,
            dropout: 0.1,
        }
    }

    fn rand_tensor(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor<f64> {
        Tensor::from_vec(
            rows,
            cols,
            (0..rows * cols).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        )
        .unwrap()
    }

    fn collect_params(layer: &EncoderLayer<f64>) -> HashMap<String, Tensor<f64>> {
        let mut map = HashMap::new();
        layer.visit(&mut |p| {
            map.insert(p.name.clone(), p.value.clone());
        });
        map
    }

    // ── Independent scripted reference, plain f64 loops ──────────────

    fn ref_linear(x: &[Vec<f64>], w: &Tensor<f64>, b: &Tensor<f64>) -> Vec<Vec<f64>> {
        x.iter()
            .map(|row| {
                (0..w.cols())
                    .map(|j| {
                        let mut s = b.get(0, j);
                        for (i, xi) in row.iter().enumerate() {
                            s += xi * w.get(i, j);
                        }
                        s
                    })
                    .collect()
            })
            .collect()
    }

    fn ref_softmax(row: &[f64]) -> Vec<f64> {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = row.iter().map(|v| (v - max).exp()).collect();
        let sum: f64 = exps.iter().sum();
        exps.iter().map(|e| e / sum).collect()
    }

    fn ref_mha(
        params: &HashMap<String, Tensor<f64>>,
        prefix: &str,
        n_heads: usize,
        x_q: &[Vec<f64>],
        x_kv: &[Vec<f64>],
    ) -> Vec<Vec<f64>> {
        let get = |suffix: &str| &params[&format!("{prefix}.{suffix}")];
        let q = ref_linear(x_q, get("wq.w"), get("wq.b"));
        let k = ref_linear(x_kv, get("wk.w"), get("wk.b"));
        let v = ref_linear(x_kv, get("wv.w"), get("wv.b"));
        let d_model = q[0].len();
        let d_k = d_model / n_heads;
        let mut concat = vec![vec![0.0; d_model]; q.len()];
        for h in 0..n_heads {
            let lo = h * d_k;
            for i in 0..q.len() {
                let logits: Vec<f64> = k
                    .iter()
                    .map(|krow| {
                        let dot: f64 =
                            (lo..lo + d_k).map(|c| q[i][c] * krow[c]).sum();
                        dot / (d_k as f64).sqrt()
                    })
                    .collect();
                let weights = ref_softmax(&logits);
                for c in 0..d_k {
                    concat[i][lo + c] = weights
                        .iter()
                        .zip(&v)
                        .map(|(w, vrow)| w * vrow[lo + c])
                        .sum();
                }
            }
        }
        ref_linear(&concat, get("wo.w"), get("wo.b"))
    }

    fn ref_layer_norm(
        params: &HashMap<String, Tensor<f64>>,
        prefix: &str,
        x: &[Vec<f64>],
    ) -> Vec<Vec<f64>> {
        let gamma = &params[&format!("{prefix}.gamma")];
        let beta = &params[&format!("{prefix}.beta")];
        x.iter()
            .map(|row| {
                let n = row.len() as f64;
                let mean: f64 = row.iter().sum::<f64>() / n;
                let var: f64 = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
                let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
                row.iter()
                    .enumerate()
                    .map(|(c, v)| (v - mean) * inv * gamma.get(0, c) + beta.get(0, c))
                    .collect()
            })
            .collect()
    }

    fn ref_encoder_layer(
        params: &HashMap<String, Tensor<f64>>,
        prefix: &str,
        n_heads: usize,
        x: &[Vec<f64>],
    ) -> Vec<Vec<f64>> {
        let attn = ref_mha(params, &format!("{prefix}.self_attn"), n_heads, x, x);
        let res1: Vec<Vec<f64>> = x
            .iter()
            .zip(&attn)
            .map(|(a, b)| a.iter().zip(b).map(|(x, y)| x + y).collect())
            .collect();
        let x1 = ref_layer_norm(params, &format!("{prefix}.norm1"), &res1);
        let h = ref_linear(
            &x1,
            &params[&format!("{prefix}.ffn.lin1.w")],
            &params[&format!("{prefix}.ffn.lin1.b")],
        );
        let h: Vec<Vec<f64>> = h
            .iter()
            .map(|row| row.iter().map(|v| v.max(0.0)).collect())
            .collect();
        let f = ref_linear(
            &h,
            &params[&format!("{prefix}.ffn.lin2.w")],
            &params[&format!("{prefix}.ffn.lin2.b")],
        );
        let res2: Vec<Vec<f64>> = x1
            .iter()
            .zip(&f)
            .map(|(a, b)| a.iter().zip(b).map(|(x, y)| x + y).collect())
            .collect();
        ref_layer_norm(params, &format!("{prefix}.norm2"), &res2)
    }

    #[test]
    fn encoder_eval_is_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let enc = Encoder::<f64>::new("enc", &tiny_dims(), &mut rng);
        let x = rand_tensor(&mut rng, 5, 8);
        let mut t1 = Tape::new();
        let y1 = enc.forward(&mut t1, &x, &mut Phase::Eval).unwrap();
        let mut t2 = Tape::new();
        let y2 = enc.forward(&mut t2, &x, &mut Phase::Eval).unwrap();
        assert_eq!(y1.data(), y2.data());
    }

    #[test]
    fn encoder_layer_matches_scripted_forward() {
        let dims = tiny_dims();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let layer = EncoderLayer::<f64>::new("layer", &dims, &mut rng);
        let x = rand_tensor(&mut rng, 4, 8);
        let mut tape = Tape::new();
        let out = layer.forward(&mut tape, &x, &mut Phase::Eval).unwrap();

        let params = collect_params(&layer);
        let x_rows: Vec<Vec<f64>> = (0..x.rows()).map(|r| x.row(r).to_vec()).collect();
        let expected = ref_encoder_layer(&params, "layer", dims.n_heads, &x_rows);
        for r in 0..4 {
            for c in 0..8 {
                assert!(
                    (out.get(r, c) - expected[r][c]).abs() < 1e-6,
                    "({r},{c}): {} vs {}",
                    out.get(r, c),
                    expected[r][c]
                );
            }
        }
    }

    fn collect_decoder_params(layer: &DecoderLayer<f64>) -> HashMap<String, Tensor<f64>> {
        let mut map = HashMap::new();
        layer.visit(&mut |p| {
            map.insert(p.name.clone(), p.value.clone());
        });
        map
    }

    #[test]
    fn decoder_layer_matches_scripted_forward() {
        let dims = tiny_dims();
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let layer = DecoderLayer::<f64>::new("layer", &dims, &mut rng);
        let tgt = rand_tensor(&mut rng, 3, 8);
        let memory = rand_tensor(&mut rng, 6, 8);
        let mut tape = Tape::new();
        let out = layer
            .forward(&mut tape, &tgt, &memory, &mut Phase::Eval)
            .unwrap();

        let params = collect_decoder_params(&layer);
        let rows = |t: &Tensor<f64>| -> Vec<Vec<f64>> {
            (0..t.rows()).map(|r| t.row(r).to_vec()).collect()
        };
        let residual = |a: &[Vec<f64>], b: &[Vec<f64>]| -> Vec<Vec<f64>> {
            a.iter()
                .zip(b)
                .map(|(x, y)| x.iter().zip(y).map(|(p, q)| p + q).collect())
                .collect()
        };

        let x = rows(&tgt);
        let attn = ref_mha(&params, "layer.self_attn", dims.n_heads, &x, &x);
        let x = ref_layer_norm(&params, "layer.norm1", &residual(&x, &attn));
        let cross = ref_mha(&params, "layer.cross_attn", dims.n_heads, &x, &rows(&memory));
        let x = ref_layer_norm(&params, "layer.norm2", &residual(&x, &cross));
        let h = ref_linear(
            &x,
            &params["layer.ffn.lin1.w"],
            &params["layer.ffn.lin1.b"],
        );
        let h: Vec<Vec<f64>> = h
            .iter()
            .map(|row| row.iter().map(|v| v.max(0.0)).collect())
            .collect();
        let f = ref_linear(
            &h,
            &params["layer.ffn.lin2.w"],
            &params["layer.ffn.lin2.b"],
        );
        let expected = ref_layer_norm(&params, "layer.norm3", &residual(&x, &f));
        for r in 0..3 {
            for c in 0..8 {
                assert!(
                    (out.get(r, c) - expected[r][c]).abs() < 1e-6,
                    "({r},{c}): {} vs {}",
                    out.get(r, c),
                    expected[r][c]
                );
            }
        }
    }

    #[test]
    fn decoder_output_keeps_target_shape() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let dims = tiny_dims();
        let dec = Decoder::<f64>::new("dec", &dims, &mut rng);
        let tgt = rand_tensor(&mut rng, 3, 8);
        let memory = rand_tensor(&mut rng, 7, 8);
        let mut tape = Tape::new();
        let out = dec.forward(&mut tape, &tgt, &memory, &mut Phase::Eval).unwrap();
        assert_eq!(out.shape(), tgt.shape());
    }

    #[test]
    fn paper_dims_per_layer_parameter_count() {
        // Enumeration oracle at 512/8/2048:
        // MHA = 4·(512·512 + 512) = 1,050,624
        // FFN = 512·2048 + 2048 + 2048·512 + 512 = 2,099,712
        // 2 layer norms = 2·(512 + 512) = 2,048
        let dims = ModelDims::default();
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let layer = EncoderLayer::<f32>::new("l", &dims, &mut rng);
        let mut mha = 0usize;
        let mut ffn = 0usize;
        let mut norms = 0usize;
        layer.visit(&mut |p| {
            let n = p.value.numel();
            if p.name.contains("self_attn") {
                mha += n;
            } else if p.name.contains("ffn") {
                ffn += n;
            } else {
                norms += n;
            }
        });
        assert_eq!(mha, 1_050_624);
        assert_eq!(ffn, 2_099_712);
        assert_eq!(norms, 2_048);
        assert_eq!(mha + ffn + norms, 3_152_384);
    }
}
