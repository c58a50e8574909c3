//! Baseline models: early-fusion transformer (EFT), late-fusion transformer
//! (LFT), and the MLP reference.
//!
//! EFT concatenates the modality features per time step and runs one vanilla
//! encoder–decoder transformer classifier. LFT runs one vanilla transformer
//! classifier per modality and averages the per-modality probability vectors
//! (soft voting). With a single modality the two collapse to the same graph.
//! The MLP averages each modality over time, concatenates the means, and
//! applies two rectified-linear hidden layers of width 128.

use std::collections::BTreeMap;

use rand_chacha::ChaCha8Rng;

use crate::data::Sample;
use crate::error::{Error, Result};
use crate::modality::Modality;
use crate::model::{classify_logits, Model, ModelKind, ModelOutput, ModelSpec, TokenEmbed};
use crate::nn::{Decoder, Encoder, Linear, Param, Phase};
use crate::tensor::{Element, Tape, Tensor};

pub const MLP_HIDDEN: usize = 128;

/// One vanilla encoder–decoder transformer classifier: embed, encode the
/// past, decode a learned query sequence, pool, project to classes.
#[derive(Clone, Debug)]
pub(crate) struct VanillaClassifier<E> {
    pub embed: TokenEmbed<E>,
    encoder: Encoder<E>,
    queries: Param<E>,
    decoder: Decoder<E>,
    head: Linear<E>,
}

impl<E: Element> VanillaClassifier<E> {
    fn new(prefix: &str, raw_dim: usize, spec: &ModelSpec, rng: &mut ChaCha8Rng) -> Self {
        let dims = &spec.dims;
        Self {
            embed: TokenEmbed::new(
                &format!("{prefix}.embed"),
                raw_dim,
                dims.d_model,
                spec.use_prior,
                spec.n_classes,
                rng,
            ),
            encoder: Encoder::new(&format!("{prefix}.enc"), dims, rng),
            queries: Param::new(
                format!("{prefix}.queries"),
                crate::nn::xavier_uniform(rng, spec.l_out, dims.d_model, dims.d_model, dims.d_model),
            ),
            decoder: Decoder::new(&format!("{prefix}.dec"), dims, rng),
            head: Linear::new(&format!("{prefix}.head"), dims.d_model, spec.n_classes, rng),
        }
    }

    fn logits(
        &self,
        tape: &mut Tape<E>,
        tokens: &Tensor<f32>,
        prior_label: usize,
        phase: &mut Phase<'_>,
    ) -> Result<Tensor<E>> {
        let x = self.embed.forward(tape, tokens, prior_label)?;
        let memory = self.encoder.forward(tape, &x, phase)?;
        let q = self.queries.on(tape);
        let decoded = self.decoder.forward(tape, &q, &memory, phase)?;
        classify_logits(tape, &decoded, &self.head)
    }

    fn visit(&self, f: &mut dyn FnMut(&Param<E>)) {
        self.embed.visit(f);
        self.encoder.visit(f);
        f(&self.queries);
        self.decoder.visit(f);
        self.head.visit(f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<E>)) {
        self.embed.visit_mut(f);
        self.encoder.visit_mut(f);
        f(&mut self.queries);
        self.decoder.visit_mut(f);
        self.head.visit_mut(f);
    }
}

/// Early-fusion transformer: per time step the modality features are
/// concatenated (width = sum of raw dims) before one shared transformer.
pub struct Eft<E> {
    kind: ModelKind,
    modalities: Vec<Modality>,
    n_classes: usize,
    vanilla: VanillaClassifier<E>,
}

impl<E: Element> Eft<E> {
    pub fn new(spec: &ModelSpec, modalities: Vec<Modality>, rng: &mut ChaCha8Rng) -> Self {
        let raw: usize = modalities.iter().map(|m| spec.mod_dims.get(*m)).sum();
        Self {
            kind: ModelKind::Eft {
                modalities: modalities.clone(),
            },
            modalities,
            n_classes: spec.n_classes,
            vanilla: VanillaClassifier::new("eft", raw, spec, rng),
        }
    }

    pub fn input_width(&self) -> usize {
        self.vanilla.embed.linear.d_in()
    }
}

impl<E: Element> Model<E> for Eft<E> {
    fn kind(&self) -> &ModelKind {
        &self.kind
    }

    fn n_classes(&self) -> usize {
        self.n_classes
    }

    fn forward(
        &self,
        tape: &mut Tape<E>,
        sample: &Sample,
        phase: &mut Phase<'_>,
    ) -> Result<ModelOutput<E>> {
        let blocks: Vec<&Tensor<f32>> = self
            .modalities
            .iter()
            .map(|m| sample.tokens(*m))
            .collect::<Result<_>>()?;
        let tokens = Tensor::concat_cols(&blocks)?;
        Ok(ModelOutput::Logits(self.vanilla.logits(
            tape,
            &tokens,
            sample.prior_label,
            phase,
        )?))
    }

    fn visit_params(&self, f: &mut dyn FnMut(&Param<E>)) {
        self.vanilla.visit(f);
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Param<E>)) {
        self.vanilla.visit_mut(f);
    }
}

/// Late-fusion transformer: one vanilla transformer classifier per modality;
/// the final probabilities are the arithmetic mean of the per-modality
/// probability vectors.
pub struct Lft<E> {
    kind: ModelKind,
    n_classes: usize,
    per_modality: BTreeMap<Modality, VanillaClassifier<E>>,
}

impl<E: Element> Lft<E> {
    pub fn new(spec: &ModelSpec, modalities: Vec<Modality>, rng: &mut ChaCha8Rng) -> Self {
        let mut per_modality = BTreeMap::new();
        for &m in &modalities {
            per_modality.insert(
                m,
                VanillaClassifier::new(&format!("lft.{m}"), spec.mod_dims.get(m), spec, rng),
            );
        }
        Self {
            kind: ModelKind::Lft { modalities },
            n_classes: spec.n_classes,
            per_modality,
        }
    }
}

impl<E: Element> Model<E> for Lft<E> {
    fn kind(&self) -> &ModelKind {
        &self.kind
    }

    fn n_classes(&self) -> usize {
        self.n_classes
    }

    fn forward(
        &self,
        tape: &mut Tape<E>,
        sample: &Sample,
        phase: &mut Phase<'_>,
    ) -> Result<ModelOutput<E>> {
        let mut probs = Vec::with_capacity(self.per_modality.len());
        for (m, vanilla) in &self.per_modality {
            let logits = vanilla.logits(tape, sample.tokens(*m)?, sample.prior_label, phase)?;
            probs.push(tape.softmax_rows(&logits)?);
        }
        let mut acc = probs[0].clone();
        for p in &probs[1..] {
            acc = tape.add(&acc, p)?;
        }
        let mean = tape.scale(&acc, E::from_f64(1.0 / probs.len() as f64))?;
        Ok(ModelOutput::Probs(mean))
    }

    fn visit_params(&self, f: &mut dyn FnMut(&Param<E>)) {
        for v in self.per_modality.values() {
            v.visit(f);
        }
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Param<E>)) {
        for v in self.per_modality.values_mut() {
            v.visit_mut(f);
        }
    }
}

/// MLP reference: per modality mean over time (with the prior one-hot
/// appended when enabled), means concatenated, then two hidden layers.
pub struct Mlp<E> {
    kind: ModelKind,
    modalities: Vec<Modality>,
    n_classes: usize,
    use_prior: bool,
    lin1: Linear<E>,
    lin2: Linear<E>,
    head: Linear<E>,
}

impl<E: Element> Mlp<E> {
    pub fn new(spec: &ModelSpec, modalities: Vec<Modality>, rng: &mut ChaCha8Rng) -> Self {
        let prior_extra = if spec.use_prior { spec.n_classes } else { 0 };
        let d_in: usize = modalities
            .iter()
            .map(|m| spec.mod_dims.get(*m) + prior_extra)
            .sum();
        Self {
            kind: ModelKind::Mlp {
                modalities: modalities.clone(),
            },
            modalities,
            n_classes: spec.n_classes,
            use_prior: spec.use_prior,
            lin1: Linear::new("mlp.lin1", d_in, MLP_HIDDEN, rng),
            lin2: Linear::new("mlp.lin2", MLP_HIDDEN, MLP_HIDDEN, rng),
            head: Linear::new("mlp.head", MLP_HIDDEN, spec.n_classes, rng),
        }
    }
}

impl<E: Element> Model<E> for Mlp<E> {
    fn kind(&self) -> &ModelKind {
        &self.kind
    }

    fn n_classes(&self) -> usize {
        self.n_classes
    }

    fn forward(
        &self,
        tape: &mut Tape<E>,
        sample: &Sample,
        _phase: &mut Phase<'_>,
    ) -> Result<ModelOutput<E>> {
        if self.use_prior && sample.prior_label >= self.n_classes {
            return Err(Error::Contract(format!(
                "prior label {} out of range [0, {})",
                sample.prior_label, self.n_classes
            )));
        }
        let mut parts: Vec<Tensor<E>> = Vec::with_capacity(self.modalities.len());
        for m in &self.modalities {
            let mean: Tensor<E> = sample.tokens(*m)?.mean_rows()?.cast();
            let part = if self.use_prior {
                let mut onehot = vec![E::zero(); self.n_classes];
                onehot[sample.prior_label] = E::one();
                Tensor::concat_cols(&[&mean, &Tensor::from_rows(&[onehot])?])?
            } else {
                mean
            };
            parts.push(part);
        }
        let refs: Vec<&Tensor<E>> = parts.iter().collect();
        let x = Tensor::concat_cols(&refs)?;
        let h = self.lin1.forward(tape, &x)?;
        let h = tape.relu(&h)?;
        let h = self.lin2.forward(tape, &h)?;
        let h = tape.relu(&h)?;
        Ok(ModelOutput::Logits(self.head.forward(tape, &h)?))
    }

    fn visit_params(&self, f: &mut dyn FnMut(&Param<E>)) {
        self.lin1.visit(f);
        self.lin2.visit(f);
        self.head.visit(f);
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Param<E>)) {
        self.lin1.visit_mut(f);
        self.lin2.visit_mut(f);
        self.head.visit_mut(f);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::SampleMeta;
    use crate::modality::ModalityDims;
    use crate::nn::ModelDims;
    use rand::{Rng, SeedableRng};

    fn tiny_spec(kind: ModelKind, use_prior: bool) -> ModelSpec {
        ModelSpec {
            kind,
            dims: ModelDims {
                d_model: 8,
                n_heads: 2,
                d_ff: 16,
                n_layers: 1,
                dropout: 0.0,
            },
            mod_dims: ModalityDims { t: 6, a: 4, v: 8 },
            n_classes: 4,
            use_prior,
            l_out: 3,
        }
    }

    fn sample_with(rng: &mut ChaCha8Rng, tokens: usize, dims: ModalityDims) -> Sample {
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
                conversation: "t".into(),
                anchor_s: 0,
            },
        }
    }

    #[test]
    fn eft_input_width_sums_raw_dims() {
        // Full-size feature widths: 300 + 64 + 2048 = 2412.
        let mut spec = tiny_spec(ModelKind::parse("eft").unwrap(), false);
        spec.mod_dims = ModalityDims::default();
        let mut rng = ChaCha8Rng::seed_from_u64(40);
        let eft = Eft::<f32>::new(&spec, Modality::ALL.to_vec(), &mut rng);
        assert_eq!(eft.input_width(), 2412);

        spec.use_prior = true;
        let mut rng = ChaCha8Rng::seed_from_u64(40);
        let eft_prior = Eft::<f32>::new(&spec, Modality::ALL.to_vec(), &mut rng);
        assert_eq!(eft_prior.input_width(), 2416);
    }

    #[test]
    fn single_modality_eft_and_lft_coincide() {
        let spec = tiny_spec(ModelKind::parse("eft:A").unwrap(), false);
        let seed = 123;
        let mut rng_e = ChaCha8Rng::seed_from_u64(seed);
        let eft = Eft::<f64>::new(&spec, vec![Modality::A], &mut rng_e);
        let mut rng_l = ChaCha8Rng::seed_from_u64(seed);
        let lft = Lft::<f64>::new(&spec, vec![Modality::A], &mut rng_l);

        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let sample = sample_with(&mut rng, 6, spec.mod_dims);

        let mut t1 = Tape::new();
        let pe = eft
            .forward(&mut t1, &sample, &mut Phase::Eval)
            .unwrap()
            .probabilities(&mut t1)
            .unwrap();
        let mut t2 = Tape::new();
        let pl = lft
            .forward(&mut t2, &sample, &mut Phase::Eval)
            .unwrap()
            .probabilities(&mut t2)
            .unwrap();
        assert_eq!(pe.data(), pl.data());
    }

    #[test]
    fn lft_probabilities_average_per_modality_vectors() {
        let spec = tiny_spec(ModelKind::parse("lft").unwrap(), false);
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        let lft = Lft::<f64>::new(&spec, Modality::ALL.to_vec(), &mut rng);
        let sample = sample_with(&mut rng, 5, spec.mod_dims);

        let mut tape = Tape::new();
        let fused = lft
            .forward(&mut tape, &sample, &mut Phase::Eval)
            .unwrap()
            .probabilities(&mut tape)
            .unwrap();

        let mut manual = vec![0.0; 4];
        for (m, vanilla) in &lft.per_modality {
            let mut t = Tape::new();
            let logits = vanilla
                .logits(&mut t, sample.tokens(*m).unwrap(), 0, &mut Phase::Eval)
                .unwrap();
            let p = t.softmax_rows(&logits).unwrap();
            for (acc, v) in manual.iter_mut().zip(p.data()) {
                *acc += v / 3.0;
            }
        }
        for (a, b) in fused.data().iter().zip(&manual) {
            assert!((a - b).abs() < 1e-12);
        }
        assert!((fused.data().iter().sum::<f64>() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn mlp_is_invariant_to_past_length_on_constant_features() {
        let spec = tiny_spec(ModelKind::parse("mlp").unwrap(), true);
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let mlp = Mlp::<f64>::new(&spec, Modality::ALL.to_vec(), &mut rng);

        let constant_sample = |tokens: usize| {
            let mut feats = BTreeMap::new();
            for m in Modality::ALL {
                let dim = spec.mod_dims.get(m);
                feats.insert(m, Tensor::<f32>::full(tokens, dim, 0.37));
            }
            Sample {
                feats,
                prior_label: 2,
                target_label: 0,
                meta: SampleMeta {
                    conversation: "c".into(),
                    anchor_s: 0,
                },
            }
        };

        let mut t1 = Tape::new();
        let short = mlp
            .forward(&mut t1, &constant_sample(4), &mut Phase::Eval)
            .unwrap()
            .probabilities(&mut t1)
            .unwrap();
        let mut t2 = Tape::new();
        let long = mlp
            .forward(&mut t2, &constant_sample(40), &mut Phase::Eval)
            .unwrap()
            .probabilities(&mut t2)
            .unwrap();
        // The f32 running means of 4 vs 40 equal rows differ by rounding
        // ulps only; the distribution itself is length-independent.
        for (a, b) in short.data().iter().zip(long.data()) {
            assert!((a - b).abs() < 1e-6);
        }
    }
}
