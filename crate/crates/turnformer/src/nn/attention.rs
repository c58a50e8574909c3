//! Scaled dot-product and multi-head attention.

use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::nn::{Linear, ModelDims, Param};
use crate::tensor::{Element, Tape, Tensor};

/// `softmax_rows(Q · Kᵀ / sqrt(d_k)) · V`.
///
/// Every output coordinate is a convex combination of the corresponding
/// column of `V`, so it lies within that column's range.
pub fn scaled_dot_attention<E: Element>(
    tape: &mut Tape<E>,
    q: &Tensor<E>,
    k: &Tensor<E>,
    v: &Tensor<E>,
) -> Result<Tensor<E>> {
    if q.cols() != k.cols() {
        return Err(Error::Dim {
            op: "scaled_dot_attention(q,k)",
            lhs: q.shape().to_vec(),
            rhs: k.shape().to_vec(),
        });
    }
    if k.rows() != v.rows() {
        return Err(Error::Dim {
            op: "scaled_dot_attention(k,v)",
            lhs: k.shape().to_vec(),
            rhs: v.shape().to_vec(),
        });
    }
    let kt = tape.transpose(k)?;
    let scores = tape.matmul(q, &kt)?;
    let scaled = tape.scale(&scores, E::from_f64(1.0 / (q.cols() as f64).sqrt()))?;
    let attn = tape.softmax_rows(&scaled)?;
    tape.matmul(&attn, v)
}

/// Multi-head attention: project queries and keys/values to `d_model`,
/// split into `n_heads` slices of width `d_k`, attend per head, concatenate,
/// and apply the output map.
#[derive(Clone, Debug)]
pub struct MultiHeadAttention<E> {
    pub wq: Linear<E>,
    pub wk: Linear<E>,
    pub wv: Linear<E>,
    pub wo: Linear<E>,
    pub n_heads: usize,
}

impl<E: Element> MultiHeadAttention<E> {
    pub fn new(prefix: &str, dims: &ModelDims, rng: &mut ChaCha8Rng) -> Self {
        let d = dims.d_model;
        Self {
            wq: Linear::new(&format!("{prefix}.wq"), d, d, rng),
            wk: Linear::new(&format!("{prefix}.wk"), d, d, rng),
            wv: Linear::new(&format!("{prefix}.wv"), d, d, rng),
            wo: Linear::new(&format!("{prefix}.wo"), d, d, rng),
            n_heads: dims.n_heads,
        }
    }

    pub fn forward(
        &self,
        tape: &mut Tape<E>,
        x_q: &Tensor<E>,
        x_kv: &Tensor<E>,
    ) -> Result<Tensor<E>> {
        let d_model = self.wq.d_in();
        if x_q.cols() != d_model || x_kv.cols() != d_model {
            return Err(Error::Dim {
                op: "multi_head_attention",
                lhs: x_q.shape().to_vec(),
                rhs: x_kv.shape().to_vec(),
            });
        }
        let q = self.wq.forward(tape, x_q)?;
        let k = self.wk.forward(tape, x_kv)?;
        let v = self.wv.forward(tape, x_kv)?;
        let d_k = d_model / self.n_heads;
        let mut heads = Vec::with_capacity(self.n_heads);
        for h in 0..self.n_heads {
            let qh = tape.slice_cols(&q, h * d_k, d_k)?;
            let kh = tape.slice_cols(&k, h * d_k, d_k)?;
            let vh = tape.slice_cols(&v, h * d_k, d_k)?;
            heads.push(scaled_dot_attention(tape, &qh, &kh, &vh)?);
        }
        let head_refs: Vec<&Tensor<E>> = heads.iter().collect();
        let concat = tape.concat_cols(&head_refs)?;
        self.wo.forward(tape, &concat)
    }

    pub fn visit(&self, f: &mut dyn FnMut(&Param<E>)) {
        self.wq.visit(f);
        self.wk.visit(f);
        self.wv.visit(f);
        self.wo.visit(f);
    }

    pub fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<E>)) {
        self.wq.visit_mut(f);
        self.wk.visit_mut(f);
        self.wv.visit_mut(f);
        self.wo.visit_mut(f);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    fn rand_tensor(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor<f64> {
        Tensor::from_vec(
            rows,
            cols,
            (0..rows * cols).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        )
        .unwrap()
    }

    /// Straight transcription of the attention formula with explicit loops,
    /// independent of the tape kernels.
    fn attention_oracle(q: &Tensor<f64>, k: &Tensor<f64>, v: &Tensor<f64>) -> Vec<f64> {
        let scale = 1.0 / (q.cols() as f64).sqrt();
        let mut out = vec![0.0; q.rows() * v.cols()];
        for i in 0..q.rows() {
            let mut logits = vec![0.0; k.rows()];
            for (j, logit) in logits.iter_mut().enumerate() {
                let mut dot = 0.0;
                for c in 0..q.cols() {
                    dot += q.get(i, c) * k.get(j, c);
                }
                *logit = dot * scale;
            }
            let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
            let denom: f64 = exps.iter().sum();
            for c in 0..v.cols() {
                let mut acc = 0.0;
                for (j, e) in exps.iter().enumerate() {
                    acc += e / denom * v.get(j, c);
                }
                out[i * v.cols() + c] = acc;
            }
        }
        out
    }

    #[test]
    fn single_key_returns_value_row_exactly() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let q = rand_tensor(&mut rng, 4, 3);
        let k = rand_tensor(&mut rng, 1, 3);
        let v = rand_tensor(&mut rng, 1, 5);
        let mut tape = Tape::new();
        let out = scaled_dot_attention(&mut tape, &q, &k, &v).unwrap();
        assert_eq!(out.shape(), [4, 5]);
        for r in 0..4 {
            assert_eq!(out.row(r), v.row(0), "row {r}");
        }
    }

    #[test]
    fn two_identical_keys_average_values() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let q = rand_tensor(&mut rng, 2, 3);
        let key_row: Vec<f64> = (0..3).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let k = Tensor::from_rows(&[key_row.clone(), key_row]).unwrap();
        let v = rand_tensor(&mut rng, 2, 4);
        let mut tape = Tape::new();
        let out = scaled_dot_attention(&mut tape, &q, &k, &v).unwrap();
        for r in 0..2 {
            for c in 0..4 {
                let avg = 0.5 * (v.get(0, c) + v.get(1, c));
                assert!((out.get(r, c) - avg).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn matches_formula_transcription() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let q = rand_tensor(&mut rng, 3, 4);
            let k = rand_tensor(&mut rng, 3, 4);
            let v = rand_tensor(&mut rng, 3, 4);
            let mut tape = Tape::new();
            let out = scaled_dot_attention(&mut tape, &q, &k, &v).unwrap();
            let expected = attention_oracle(&q, &k, &v);
            for (a, b) in out.data().iter().zip(&expected) {
                assert!((a - b).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn output_within_value_column_range() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let q = rand_tensor(&mut rng, 5, 4);
        let k = rand_tensor(&mut rng, 6, 4);
        let v = rand_tensor(&mut rng, 6, 3);
        let mut tape = Tape::new();
        let out = scaled_dot_attention(&mut tape, &q, &k, &v).unwrap();
        for c in 0..3 {
            let col: Vec<f64> = (0..6).map(|r| v.get(r, c)).collect();
            let (lo, hi) = (
                col.iter().cloned().fold(f64::INFINITY, f64::min),
                col.iter().cloned().fold(f64::NEG_INFINITY, f64::max),
            );
            for r in 0..5 {
                let val = out.get(r, c);
                assert!(val >= lo - 1e-9 && val <= hi + 1e-9);
            }
        }
    }

    #[test]
    fn kv_row_pair_permutation_equivariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let q = rand_tensor(&mut rng, 3, 4);
        let k = rand_tensor(&mut rng, 5, 4);
        let v = rand_tensor(&mut rng, 5, 2);
        let perm = [3usize, 0, 4, 1, 2];
        let kp = Tensor::from_rows(&perm.iter().map(|&i| k.row(i).to_vec()).collect::<Vec<_>>())
            .unwrap();
        let vp = Tensor::from_rows(&perm.iter().map(|&i| v.row(i).to_vec()).collect::<Vec<_>>())
            .unwrap();
        let mut tape = Tape::new();
        let a = scaled_dot_attention(&mut tape, &q, &k, &v).unwrap();
        let b = scaled_dot_attention(&mut tape, &q, &kp, &vp).unwrap();
        for (x, y) in a.data().iter().zip(b.data()) {
            assert!((x - y).abs() < 1e-6);
        }
    }

    #[test]
    fn mismatched_dk_is_dimension_error() {
        let mut tape = Tape::new();
        let q = Tensor::<f64>::zeros(2, 3);
        let k = Tensor::<f64>::zeros(2, 4);
        let v = Tensor::<f64>::zeros(2, 4);
        assert!(matches!(
            scaled_dot_attention(&mut tape, &q, &k, &v),
            Err(Error::Dim { .. })
        ));
    }

    #[test]
    fn single_head_composes_projections_and_attention() {
        let dims = ModelDims {
            d_model: 6,
            n_heads: 1,
            d_ff: 8,
            n_layers: 1,
            dropout: 0.0,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mha = MultiHeadAttention::<f64>::new("mha", &dims, &mut rng);
        let x_q = rand_tensor(&mut rng, 4, 6);
        let x_kv = rand_tensor(&mut rng, 3, 6);

        let mut tape = Tape::new();
        let out = mha.forward(&mut tape, &x_q, &x_kv).unwrap();

        // Composing the projections and the attention op independently must
        // give the same result for a single head.
        let mut tape2 = Tape::new();
        let q = mha.wq.forward(&mut tape2, &x_q).unwrap();
        let k = mha.wk.forward(&mut tape2, &x_kv).unwrap();
        let v = mha.wv.forward(&mut tape2, &x_kv).unwrap();
        let attn = scaled_dot_attention(&mut tape2, &q, &k, &v).unwrap();
        let expected = mha.wo.forward(&mut tape2, &attn).unwrap();
        for (a, b) in out.data().iter().zip(expected.data()) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn zero_output_map_gives_zeros() {
        let dims = ModelDims {
            d_model: 4,
            n_heads: 2,
            d_ff: 8,
            n_layers: 1,
            dropout: 0.0,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut mha = MultiHeadAttention::<f64>::new("mha", &dims, &mut rng);
        mha.wo.w.value = Tensor::zeros(4, 4);
        mha.wo.b.value = Tensor::zeros(1, 4);
        let x = rand_tensor(&mut rng, 3, 4);
        let mut tape = Tape::new();
        let out = mha.forward(&mut tape, &x, &x).unwrap();
        assert!(out.data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn cross_attention_shape_contract() {
        let dims = ModelDims {
            d_model: 8,
            n_heads: 2,
            d_ff: 8,
            n_layers: 1,
            dropout: 0.0,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mha = MultiHeadAttention::<f64>::new("mha", &dims, &mut rng);
        let x_q = rand_tensor(&mut rng, 5, 8);
        let x_kv = rand_tensor(&mut rng, 9, 8);
        let mut tape = Tape::new();
        let out = mha.forward(&mut tape, &x_q, &x_kv).unwrap();
        assert_eq!(out.shape(), [5, 8]);
    }

    #[test]
    fn identical_value_rows_collapse_output_rows() {
        // Attention over identical value rows is that row, so every output
        // row of the cross-attention (before any residual) coincides.
        let dims = ModelDims {
            d_model: 6,
            n_heads: 3,
            d_ff: 8,
            n_layers: 1,
            dropout: 0.0,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mha = MultiHeadAttention::<f64>::new("mha", &dims, &mut rng);
        let x_q = rand_tensor(&mut rng, 4, 6);
        let row: Vec<f64> = (0..6).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let x_kv = Tensor::from_rows(&vec![row; 5]).unwrap();
        let mut tape = Tape::new();
        let out = mha.forward(&mut tape, &x_q, &x_kv).unwrap();
        for r in 1..4 {
            for c in 0..6 {
                assert!((out.get(r, c) - out.get(0, c)).abs() < 1e-6);
            }
        }
    }
}
