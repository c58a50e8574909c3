//! The two-stage, multi-stream, multimodal turn-taking model.
//!
//! Stage 1 runs one encoder–decoder transformer per modality: the encoder
//! consumes the embedded past sequence and a learned query sequence of fixed
//! length `l_out` cross-attends to the encoder memory, giving every modality
//! a past-length-independent representation. Stage 2 pairs those outputs
//! into streams where one modality supplies the queries and another the
//! keys/values; stream outputs are fused (element-wise soft average or
//! concatenation + projection) and classified by a pooled linear head.
//!
//! Ablation switches: drop either stage, replace the stage-2 decoder with a
//! stack of cross-attention+FFN layers, or swap the fusion mode.

use std::collections::BTreeMap;

use rand_chacha::ChaCha8Rng;

use crate::data::Sample;
use crate::error::{Error, Result};
use crate::modality::{Modality, ModalityDims};
use crate::model::{FusionMode, Model, ModelKind, ModelOutput, ThreeMConfig, TokenEmbed};
use crate::nn::{
    dropout, Decoder, Encoder, FeedForward, LayerNorm, Linear, ModelDims, MultiHeadAttention,
    Param, Phase,
};
use crate::tensor::{Element, Tape, Tensor};

/// One per-modality stage-1 transformer.
#[derive(Clone, Debug)]
pub(crate) struct UnimodalStack<E> {
    pub encoder: Encoder<E>,
    pub queries: Param<E>,
    pub decoder: Decoder<E>,
}

impl<E: Element> UnimodalStack<E> {
    fn new(prefix: &str, dims: &ModelDims, l_out: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            encoder: Encoder::new(&format!("{prefix}.enc"), dims, rng),
            queries: Param::new(
                format!("{prefix}.queries"),
                crate::nn::xavier_uniform(rng, l_out, dims.d_model, dims.d_model, dims.d_model),
            ),
            decoder: Decoder::new(&format!("{prefix}.dec"), dims, rng),
        }
    }

    fn forward(
        &self,
        tape: &mut Tape<E>,
        embedded: &Tensor<E>,
        phase: &mut Phase<'_>,
    ) -> Result<Tensor<E>> {
        let memory = self.encoder.forward(tape, embedded, phase)?;
        let queries = self.queries.on(tape);
        self.decoder.forward(tape, &queries, &memory, phase)
    }

    fn visit(&self, f: &mut dyn FnMut(&Param<E>)) {
        self.encoder.visit(f);
        f(&self.queries);
        self.decoder.visit(f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<E>)) {
        self.encoder.visit_mut(f);
        f(&mut self.queries);
        self.decoder.visit_mut(f);
    }
}

/// Stage-2 layer for the decoder-less variant: cross-attention to the fixed
/// key/value sequence followed by the FFN, no self-attention.
#[derive(Clone, Debug)]
pub(crate) struct CrossOnlyLayer<E> {
    cross_attn: MultiHeadAttention<E>,
    ffn: FeedForward<E>,
    norm1: LayerNorm<E>,
    norm2: LayerNorm<E>,
    dropout_p: f64,
}

impl<E: Element> CrossOnlyLayer<E> {
    fn new(prefix: &str, dims: &ModelDims, rng: &mut ChaCha8Rng) -> Self {
        Self {
            cross_attn: MultiHeadAttention::new(&format!("{prefix}.cross_attn"), dims, rng),
            ffn: FeedForward::new(&format!("{prefix}.ffn"), dims, rng),
            norm1: LayerNorm::new(&format!("{prefix}.norm1"), dims.d_model),
            norm2: LayerNorm::new(&format!("{prefix}.norm2"), dims.d_model),
            dropout_p: dims.dropout,
        }
    }

    fn forward(
        &self,
        tape: &mut Tape<E>,
        x: &Tensor<E>,
        kv: &Tensor<E>,
        phase: &mut Phase<'_>,
    ) -> Result<Tensor<E>> {
        let c = self.cross_attn.forward(tape, x, kv)?;
        let c = dropout(tape, &c, self.dropout_p, phase)?;
        let x = tape.add(x, &c)?;
        let x = self.norm1.forward(tape, &x)?;

        let f = self.ffn.forward(tape, &x)?;
        let f = dropout(tape, &f, self.dropout_p, phase)?;
        let x2 = tape.add(&x, &f)?;
        self.norm2.forward(tape, &x2)
    }

    fn visit(&self, f: &mut dyn FnMut(&Param<E>)) {
        self.cross_attn.visit(f);
        self.ffn.visit(f);
        self.norm1.visit(f);
        self.norm2.visit(f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<E>)) {
        self.cross_attn.visit_mut(f);
        self.ffn.visit_mut(f);
        self.norm1.visit_mut(f);
        self.norm2.visit_mut(f);
    }
}

/// One stage-2 stream unit.
#[derive(Clone, Debug)]
pub(crate) enum HybridStream<E> {
    /// Encoder stack over the key/value sequence, decoder stack over the
    /// query sequence cross-attending to the encoded memory.
    EncDec {
        encoder: Encoder<E>,
        decoder: Decoder<E>,
    },
    /// Cross-attention+FFN stack with keys/values taken from the raw
    /// key/value sequence.
    CrossOnly { layers: Vec<CrossOnlyLayer<E>> },
}

impl<E: Element> HybridStream<E> {
    fn new(prefix: &str, dims: &ModelDims, with_decoder: bool, rng: &mut ChaCha8Rng) -> Self {
        if with_decoder {
            HybridStream::EncDec {
                encoder: Encoder::new(&format!("{prefix}.enc"), dims, rng),
                decoder: Decoder::new(&format!("{prefix}.dec"), dims, rng),
            }
        } else {
            HybridStream::CrossOnly {
                layers: (0..dims.n_layers)
                    .map(|i| CrossOnlyLayer::new(&format!("{prefix}.cross.{i}"), dims, rng))
                    .collect(),
            }
        }
    }

    pub(crate) fn forward(
        &self,
        tape: &mut Tape<E>,
        z_q: &Tensor<E>,
        z_kv: &Tensor<E>,
        phase: &mut Phase<'_>,
    ) -> Result<Tensor<E>> {
        if z_q.cols() != z_kv.cols() {
            return Err(Error::Dim {
                op: "hybrid_stream",
                lhs: z_q.shape().to_vec(),
                rhs: z_kv.shape().to_vec(),
            });
        }
        match self {
            HybridStream::EncDec { encoder, decoder } => {
                let memory = encoder.forward(tape, z_kv, phase)?;
                decoder.forward(tape, z_q, &memory, phase)
            }
            HybridStream::CrossOnly { layers } => {
                let mut x = z_q.clone();
                for layer in layers {
                    x = layer.forward(tape, &x, z_kv, phase)?;
                }
                Ok(x)
            }
        }
    }

    fn visit(&self, f: &mut dyn FnMut(&Param<E>)) {
        match self {
            HybridStream::EncDec { encoder, decoder } => {
                encoder.visit(f);
                decoder.visit(f);
            }
            HybridStream::CrossOnly { layers } => {
                for l in layers {
                    l.visit(f);
                }
            }
        }
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<E>)) {
        match self {
            HybridStream::EncDec { encoder, decoder } => {
                encoder.visit_mut(f);
                decoder.visit_mut(f);
            }
            HybridStream::CrossOnly { layers } => {
                for l in layers {
                    l.visit_mut(f);
                }
            }
        }
    }
}

/// Fuses same-shape stream outputs: element-wise mean for `SoftAverage`,
/// concatenation along the feature axis plus a linear map back to `d_model`
/// for `Concat`. A single stream passes through unchanged.
pub fn fuse<E: Element>(
    tape: &mut Tape<E>,
    streams: &[Tensor<E>],
    mode: FusionMode,
    proj: Option<&Linear<E>>,
) -> Result<Tensor<E>> {
    let first = streams
        .first()
        .ok_or_else(|| Error::Contract("fuse of zero streams".into()))?;
    for s in &streams[1..] {
        if s.shape() != first.shape() {
            return Err(Error::Dim {
                op: "fuse",
                lhs: first.shape().to_vec(),
                rhs: s.shape().to_vec(),
            });
        }
    }
    if streams.len() == 1 {
        return Ok(first.clone());
    }
    match mode {
        FusionMode::SoftAverage => {
            let mut acc = streams[0].clone();
            for s in &streams[1..] {
                acc = tape.add(&acc, s)?;
            }
            tape.scale(&acc, E::from_f64(1.0 / streams.len() as f64))
        }
        FusionMode::Concat => {
            let refs: Vec<&Tensor<E>> = streams.iter().collect();
            let cat = tape.concat_cols(&refs)?;
            let proj = proj.ok_or_else(|| {
                Error::Contract("concat fusion requires a projection layer".into())
            })?;
            proj.forward(tape, &cat)
        }
    }
}

/// Projection head: mean-pool over the sequence positions, then a linear map
/// to `n_classes` logits.
pub fn classify_logits<E: Element>(
    tape: &mut Tape<E>,
    fused: &Tensor<E>,
    head: &Linear<E>,
) -> Result<Tensor<E>> {
    let pooled = tape.mean_rows(fused)?;
    head.forward(tape, &pooled)
}

/// Projection head with softmax, yielding class probabilities.
pub fn classify<E: Element>(
    tape: &mut Tape<E>,
    fused: &Tensor<E>,
    head: &Linear<E>,
) -> Result<Tensor<E>> {
    let logits = classify_logits(tape, fused, head)?;
    tape.softmax_rows(&logits)
}

/// Mean-pools `L` rows into `l_out` equal contiguous chunks via a constant
/// pooling matrix, so gradients flow through a plain matmul.
fn resample_rows<E: Element>(
    tape: &mut Tape<E>,
    x: &Tensor<E>,
    l_out: usize,
) -> Result<Tensor<E>> {
    let l = x.rows();
    if l < l_out {
        return Err(Error::Contract(format!(
            "cannot resample {l} rows down to {l_out} chunks"
        )));
    }
    let mut pool = vec![E::zero(); l_out * l];
    for i in 0..l_out {
        let lo = i * l / l_out;
        let hi = (i + 1) * l / l_out;
        let w = E::from_f64(1.0 / (hi - lo) as f64);
        for c in lo..hi {
            pool[i * l + c] = w;
        }
    }
    let pool = Tensor::from_vec(l_out, l, pool)?;
    tape.matmul(&pool, x)
}

pub struct ThreeM<E> {
    kind: ModelKind,
    cfg: ThreeMConfig,
    embeds: BTreeMap<Modality, TokenEmbed<E>>,
    stage1: BTreeMap<Modality, UnimodalStack<E>>,
    streams: Vec<HybridStream<E>>,
    fusion_proj: Option<Linear<E>>,
    head: Linear<E>,
}

impl<E: Element> ThreeM<E> {
    pub fn new(cfg: ThreeMConfig, mod_dims: ModalityDims, rng: &mut ChaCha8Rng) -> Result<Self> {
        cfg.validate()?;
        let kind = ModelKind::ThreeM {
            streams: cfg.streams.clone(),
            fusion: cfg.fusion,
            include_stage1: cfg.include_stage1,
            include_stage2: cfg.include_stage2,
            stage2_decoder: cfg.stage2_decoder,
        };
        let mods = cfg.modalities();

        let mut embeds = BTreeMap::new();
        let mut stage1 = BTreeMap::new();
        for &m in &mods {
            embeds.insert(
                m,
                TokenEmbed::new(
                    &format!("embed.{m}"),
                    mod_dims.get(m),
                    cfg.dims.d_model,
                    cfg.use_prior,
                    cfg.n_classes,
                    rng,
                ),
            );
            if cfg.include_stage1 {
                stage1.insert(
                    m,
                    UnimodalStack::new(&format!("stage1.{m}"), &cfg.dims, cfg.l_out, rng),
                );
            }
        }

        let mut streams = Vec::new();
        let mut fusion_proj = None;
        if cfg.include_stage2 {
            for (i, _) in cfg.streams.iter().enumerate() {
                streams.push(HybridStream::new(
                    &format!("stream{i}"),
                    &cfg.dims,
                    cfg.stage2_decoder,
                    rng,
                ));
            }
            if cfg.fusion == FusionMode::Concat && cfg.streams.len() > 1 {
                fusion_proj = Some(Linear::new(
                    "fusion.proj",
                    cfg.streams.len() * cfg.dims.d_model,
                    cfg.dims.d_model,
                    rng,
                ));
            }
        }

        let head = Linear::new("head", cfg.dims.d_model, cfg.n_classes, rng);

        Ok(Self {
            kind,
            cfg,
            embeds,
            stage1,
            streams,
            fusion_proj,
            head,
        })
    }

    pub fn config(&self) -> &ThreeMConfig {
        &self.cfg
    }

    fn embed_all(
        &self,
        tape: &mut Tape<E>,
        sample: &Sample,
    ) -> Result<BTreeMap<Modality, Tensor<E>>> {
        let mut out = BTreeMap::new();
        for (m, embed) in &self.embeds {
            let tokens = sample.feats.get(m).ok_or_else(|| {
                Error::Config(format!("sample lacks modality {m} required by the streams"))
            })?;
            out.insert(*m, embed.forward(tape, tokens, sample.prior_label)?);
        }
        Ok(out)
    }

    /// Stage-1 outputs Z_M, one `l_out × d_model` sequence per modality.
    pub fn stage_one_forward(
        &self,
        tape: &mut Tape<E>,
        sample: &Sample,
        phase: &mut Phase<'_>,
    ) -> Result<BTreeMap<Modality, Tensor<E>>> {
        if !self.cfg.include_stage1 {
            return Err(Error::Config(
                "stage_one_forward on a config without stage 1".into(),
            ));
        }
        let embedded = self.embed_all(tape, sample)?;
        let mut out = BTreeMap::new();
        for (m, e) in &embedded {
            out.insert(*m, self.stage1[m].forward(tape, e, phase)?);
        }
        Ok(out)
    }

    /// Per-modality `l_out × d_model` representations entering stage 2:
    /// stage-1 outputs, or chunk-pooled embeddings when stage 1 is off.
    fn representations(
        &self,
        tape: &mut Tape<E>,
        sample: &Sample,
        phase: &mut Phase<'_>,
    ) -> Result<BTreeMap<Modality, Tensor<E>>> {
        let embedded = self.embed_all(tape, sample)?;
        let mut out = BTreeMap::new();
        for (m, e) in &embedded {
            let rep = if self.cfg.include_stage1 {
                self.stage1[m].forward(tape, e, phase)?
            } else {
                resample_rows(tape, e, self.cfg.l_out)?
            };
            out.insert(*m, rep);
        }
        Ok(out)
    }
}

impl<E: Element> Model<E> for ThreeM<E> {
    fn kind(&self) -> &ModelKind {
        &self.kind
    }

    fn n_classes(&self) -> usize {
        self.cfg.n_classes
    }

    fn forward(
        &self,
        tape: &mut Tape<E>,
        sample: &Sample,
        phase: &mut Phase<'_>,
    ) -> Result<ModelOutput<E>> {
        let reps = self.representations(tape, sample, phase)?;
        let fused = if self.cfg.include_stage2 {
            let mut outs = Vec::with_capacity(self.cfg.streams.len());
            for (spec, unit) in self.cfg.streams.iter().zip(&self.streams) {
                outs.push(unit.forward(tape, &reps[&spec.query], &reps[&spec.kv], phase)?);
            }
            fuse(tape, &outs, self.cfg.fusion, self.fusion_proj.as_ref())?
        } else {
            let outs: Vec<Tensor<E>> = reps.values().cloned().collect();
            fuse(tape, &outs, FusionMode::SoftAverage, None)?
        };
        Ok(ModelOutput::Logits(classify_logits(
            tape, &fused, &self.head,
        )?))
    }

    fn visit_params(&self, f: &mut dyn FnMut(&Param<E>)) {
        for embed in self.embeds.values() {
            embed.visit(f);
        }
        for stack in self.stage1.values() {
            stack.visit(f);
        }
        for s in &self.streams {
            s.visit(f);
        }
        if let Some(p) = &self.fusion_proj {
            p.visit(f);
        }
        self.head.visit(f);
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Param<E>)) {
        for embed in self.embeds.values_mut() {
            embed.visit_mut(f);
        }
        for stack in self.stage1.values_mut() {
            stack.visit_mut(f);
        }
        for s in &mut self.streams {
            s.visit_mut(f);
        }
        if let Some(p) = &mut self.fusion_proj {
            p.visit_mut(f);
        }
        self.head.visit_mut(f);
    }
}
