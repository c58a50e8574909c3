//! The model zoo: the two-stage multi-stream architecture with every
//! ablation variant, plus the MLP / early-fusion / late-fusion baselines.
//!
//! Models are built from a [`ModelSpec`] (preset + dimensions) and expose a
//! uniform [`Model`] trait: forward a [`Sample`] on a tape, producing either
//! logits or probabilities, with named parameters reachable through the
//! visitor methods.

pub mod baselines;
pub mod three_m;

pub use baselines::{Eft, Lft, Mlp};
pub use three_m::{classify, classify_logits, fuse, ThreeM};

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::Sample;
use crate::error::{Error, Result};
use crate::modality::{modality_set_name, parse_modality_set, Modality, ModalityDims};
use crate::nn::{positional_encoding, Linear, ModelDims, Param, Phase};
use crate::tensor::{Element, Tape, Tensor};

/// A stage-2 unit: `query>kv` means the query modality attends into the
/// key/value modality.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct StreamSpec {
    pub query: Modality,
    pub kv: Modality,
}

impl StreamSpec {
    pub fn validate(&self) -> Result<()> {
        if self.query == self.kv {
            return Err(Error::Config(format!(
                "stream {self} must use distinct query and key/value modalities"
            )));
        }
        Ok(())
    }
}

impl fmt::Display for StreamSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}>{}", self.query, self.kv)
    }
}

impl FromStr for StreamSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let (q, kv) = s.split_once('>').ok_or_else(|| {
            Error::Config(format!("stream '{s}' must look like 'T>V'"))
        })?;
        let spec = StreamSpec {
            query: q.parse()?,
            kv: kv.parse()?,
        };
        spec.validate()?;
        Ok(spec)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionMode {
    SoftAverage,
    Concat,
}

/// Full architectural description of one 3M variant.
#[derive(Clone, Debug)]
pub struct ThreeMConfig {
    pub dims: ModelDims,
    pub streams: Vec<StreamSpec>,
    pub fusion: FusionMode,
    pub include_stage1: bool,
    pub include_stage2: bool,
    pub stage2_decoder: bool,
    pub n_classes: usize,
    pub use_prior: bool,
    pub l_out: usize,
}

impl ThreeMConfig {
    pub fn validate(&self) -> Result<()> {
        self.dims.validate()?;
        if !self.include_stage1 && !self.include_stage2 {
            return Err(Error::Config(
                "at least one of the two stages must be included".into(),
            ));
        }
        if self.streams.is_empty() || self.streams.len() > 2 {
            return Err(Error::Config(format!(
                "expected 1 or 2 streams, got {}",
                self.streams.len()
            )));
        }
        for s in &self.streams {
            s.validate()?;
        }
        if self.n_classes < 2 {
            return Err(Error::Config("n_classes must be >= 2".into()));
        }
        if self.l_out == 0 {
            return Err(Error::Config("l_out must be >= 1".into()));
        }
        Ok(())
    }

    /// Sorted union of the modalities the streams touch.
    pub fn modalities(&self) -> Vec<Modality> {
        let mut set: Vec<Modality> = Vec::new();
        for s in &self.streams {
            for m in [s.query, s.kv] {
                if !set.contains(&m) {
                    set.push(m);
                }
            }
        }
        set.sort();
        set
    }
}

/// Which architecture a preset names, independent of dimensions.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum ModelKind {
    ThreeM {
        streams: Vec<StreamSpec>,
        fusion: FusionMode,
        include_stage1: bool,
        include_stage2: bool,
        stage2_decoder: bool,
    },
    Eft { modalities: Vec<Modality> },
    Lft { modalities: Vec<Modality> },
    Mlp { modalities: Vec<Modality> },
}

pub const DEFAULT_STREAMS: [(Modality, Modality); 2] = [
    (Modality::T, Modality::V),
    (Modality::A, Modality::V),
];

fn default_streams() -> Vec<StreamSpec> {
    DEFAULT_STREAMS
        .iter()
        .map(|&(query, kv)| StreamSpec { query, kv })
        .collect()
}

impl ModelKind {
    /// Parses a preset such as `3m:T>V|A>V`, `3m:no-stage2`,
    /// `3m:V>T|A>T:no-decoder`, `eft:T+V`, `lft`, or `mlp`.
    pub fn parse(preset: &str) -> Result<Self> {
        let mut parts = preset.split(':');
        let head = parts.next().unwrap_or("").to_ascii_lowercase();
        match head.as_str() {
            "3m" => {
                let mut streams = default_streams();
                let mut fusion = FusionMode::SoftAverage;
                let mut include_stage1 = true;
                let mut include_stage2 = true;
                let mut stage2_decoder = true;
                for part in parts {
                    match part {
                        "concat" => fusion = FusionMode::Concat,
                        "no-decoder" => stage2_decoder = false,
                        "no-stage1" => include_stage1 = false,
                        "no-stage2" => include_stage2 = false,
                        s if s.contains('>') => {
                            streams = s
                                .split('|')
                                .map(str::parse)
                                .collect::<Result<Vec<StreamSpec>>>()?;
                        }
                        other => {
                            return Err(Error::Config(format!(
                                "unknown 3m preset flag '{other}' in '{preset}'\n{}",
                                preset_help()
                            )))
                        }
                    }
                }
                Ok(ModelKind::ThreeM {
                    streams,
                    fusion,
                    include_stage1,
                    include_stage2,
                    stage2_decoder,
                })
            }
            "eft" | "lft" | "mlp" => {
                let modalities = match parts.next() {
                    Some(set) => parse_modality_set(set)?,
                    None => Modality::ALL.to_vec(),
                };
                if parts.next().is_some() {
                    return Err(Error::Config(format!(
                        "trailing preset segments in '{preset}'\n{}",
                        preset_help()
                    )));
                }
                Ok(match head.as_str() {
                    "eft" => ModelKind::Eft { modalities },
                    "lft" => ModelKind::Lft { modalities },
                    _ => ModelKind::Mlp { modalities },
                })
            }
            other => Err(Error::Config(format!(
                "unknown model preset '{other}'\n{}",
                preset_help()
            ))),
        }
    }

    /// Canonical preset string. For the baselines the modality set is
    /// reported separately, so the name stays bare.
    pub fn name(&self) -> String {
        match self {
            ModelKind::ThreeM {
                streams,
                fusion,
                include_stage1,
                include_stage2,
                stage2_decoder,
            } => {
                let mut name = format!(
                    "3m:{}",
                    streams
                        .iter()
                        .map(|s| s.to_string())
                        .collect::<Vec<_>>()
                        .join("|")
                );
                if *fusion == FusionMode::Concat {
                    name.push_str(":concat");
                }
                if !*stage2_decoder {
                    name.push_str(":no-decoder");
                }
                if !*include_stage1 {
                    name.push_str(":no-stage1");
                }
                if !*include_stage2 {
                    name.push_str(":no-stage2");
                }
                name
            }
            ModelKind::Eft { .. } => "eft".into(),
            ModelKind::Lft { .. } => "lft".into(),
            ModelKind::Mlp { .. } => "mlp".into(),
        }
    }

    pub fn modalities(&self) -> Vec<Modality> {
        match self {
            ModelKind::ThreeM { streams, .. } => {
                let mut set: Vec<Modality> = Vec::new();
                for s in streams {
                    for m in [s.query, s.kv] {
                        if !set.contains(&m) {
                            set.push(m);
                        }
                    }
                }
                set.sort();
                set
            }
            ModelKind::Eft { modalities }
            | ModelKind::Lft { modalities }
            | ModelKind::Mlp { modalities } => modalities.clone(),
        }
    }

    /// Baseline presets can take their modality set from the grid axis;
    /// 3m presets carry their own.
    pub fn with_modalities(&self, modalities: &[Modality]) -> Result<Self> {
        match self {
            ModelKind::ThreeM { .. } => {
                if self.modalities() == modalities {
                    Ok(self.clone())
                } else {
                    Err(Error::Config(format!(
                        "preset '{}' is wired for modalities {} and cannot run on {}",
                        self.name(),
                        modality_set_name(&self.modalities()),
                        modality_set_name(modalities)
                    )))
                }
            }
            ModelKind::Eft { .. } => Ok(ModelKind::Eft {
                modalities: modalities.to_vec(),
            }),
            ModelKind::Lft { .. } => Ok(ModelKind::Lft {
                modalities: modalities.to_vec(),
            }),
            ModelKind::Mlp { .. } => Ok(ModelKind::Mlp {
                modalities: modalities.to_vec(),
            }),
        }
    }
}

impl Serialize for ModelKind {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        let mut name = self.name();
        if !matches!(self, ModelKind::ThreeM { .. }) {
            name = format!("{}:{}", name, modality_set_name(&self.modalities()));
        }
        s.serialize_str(&name)
    }
}

impl<'de> Deserialize<'de> for ModelKind {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        ModelKind::parse(&s).map_err(serde::de::Error::custom)
    }
}

/// The 15 ablation-variant presets, in the table's row order.
pub fn table1_presets() -> Vec<String> {
    vec![
        "3m:T>V|A>V".into(),
        "3m:V>T|A>T".into(),
        "3m:V>A|T>A".into(),
        "3m:T>V|A>V:concat".into(),
        "3m:V>T".into(),
        "3m:V>A".into(),
        "3m:T>V".into(),
        "3m:T>A".into(),
        "3m:A>V".into(),
        "3m:A>T".into(),
        "3m:T>V|A>V:no-decoder".into(),
        "3m:V>T|A>T:no-decoder".into(),
        "3m:V>A|T>A:no-decoder".into(),
        "3m:T>V|A>V:no-stage1".into(),
        "3m:T>V|A>V:no-stage2".into(),
    ]
}

pub fn preset_help() -> String {
    let mut lines = vec!["valid presets:".to_string()];
    for p in table1_presets() {
        lines.push(format!("  {p}"));
    }
    lines.push("  3m:<streams>[:concat][:no-decoder][:no-stage1][:no-stage2]".into());
    lines.push("  eft[:<modalities>]   e.g. eft:T+V".into());
    lines.push("  lft[:<modalities>]".into());
    lines.push("  mlp[:<modalities>]".into());
    lines.join("\n")
}

/// What a model emits: pre-softmax logits, or (for probability-level fusion)
/// an already-normalized distribution.
pub enum ModelOutput<E> {
    Logits(Tensor<E>),
    Probs(Tensor<E>),
}

impl<E: Element> ModelOutput<E> {
    /// Class probabilities (1×C), on the tape.
    pub fn probabilities(&self, tape: &mut Tape<E>) -> Result<Tensor<E>> {
        match self {
            ModelOutput::Logits(z) => tape.softmax_rows(z),
            ModelOutput::Probs(p) => Ok(p.clone()),
        }
    }

    /// Cross-entropy against a class index. Logit outputs use the fused
    /// log-sum-exp form; probability outputs take `-ln p[target]` directly.
    pub fn loss(&self, tape: &mut Tape<E>, target: usize) -> Result<Tensor<E>> {
        match self {
            ModelOutput::Logits(z) => tape.cross_entropy_logits(z, target),
            ModelOutput::Probs(p) => {
                if target >= p.cols() {
                    return Err(Error::Contract(format!(
                        "target class {} out of range [0, {})",
                        target,
                        p.cols()
                    )));
                }
                let picked = tape.slice_cols(p, target, 1)?;
                let logp = tape.log(&picked)?;
                tape.scale(&logp, E::from_f64(-1.0))
            }
        }
    }
}

/// Uniform interface over the model zoo.
pub trait Model<E: Element>: Send {
    fn kind(&self) -> &ModelKind;
    fn n_classes(&self) -> usize;
    fn forward(
        &self,
        tape: &mut Tape<E>,
        sample: &Sample,
        phase: &mut Phase<'_>,
    ) -> Result<ModelOutput<E>>;
    fn visit_params(&self, f: &mut dyn FnMut(&Param<E>));
    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Param<E>));
}

pub fn state_dict<E: Element>(model: &dyn Model<E>) -> Vec<(String, Tensor<E>)> {
    let mut out = Vec::new();
    model.visit_params(&mut |p| out.push((p.name.clone(), p.value.clone())));
    out
}

pub fn load_state_dict<E: Element>(
    model: &mut dyn Model<E>,
    dict: &BTreeMap<String, Tensor<E>>,
) -> Result<()> {
    let mut missing = Vec::new();
    model.visit_params_mut(&mut |p| match dict.get(&p.name) {
        Some(v) if v.shape() == p.value.shape() => p.value = v.clone(),
        Some(v) => missing.push(format!(
            "'{}': shape {:?} vs expected {:?}",
            p.name,
            v.shape(),
            p.value.shape()
        )),
        None => missing.push(format!("'{}' absent", p.name)),
    });
    if missing.is_empty() {
        Ok(())
    } else {
        Err(Error::Contract(format!(
            "state dict mismatch: {}",
            missing.join("; ")
        )))
    }
}

pub fn param_count<E: Element>(model: &dyn Model<E>) -> usize {
    let mut n = 0;
    model.visit_params(&mut |p| n += p.value.numel());
    n
}

/// Everything needed to construct a model deterministically.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ModelSpec {
    pub kind: ModelKind,
    pub dims: ModelDims,
    pub mod_dims: ModalityDims,
    pub n_classes: usize,
    pub use_prior: bool,
    pub l_out: usize,
}

impl ModelSpec {
    pub fn three_m_config(&self) -> Option<ThreeMConfig> {
        match &self.kind {
            ModelKind::ThreeM {
                streams,
                fusion,
                include_stage1,
                include_stage2,
                stage2_decoder,
            } => Some(ThreeMConfig {
                dims: self.dims,
                streams: streams.clone(),
                fusion: *fusion,
                include_stage1: *include_stage1,
                include_stage2: *include_stage2,
                stage2_decoder: *stage2_decoder,
                n_classes: self.n_classes,
                use_prior: self.use_prior,
                l_out: self.l_out,
            }),
            _ => None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.mod_dims.validate()?;
        if let Some(cfg) = self.three_m_config() {
            cfg.validate()
        } else {
            self.dims.validate()?;
            if self.kind.modalities().is_empty() {
                return Err(Error::Config("baseline needs at least one modality".into()));
            }
            if self.n_classes < 2 {
                return Err(Error::Config("n_classes must be >= 2".into()));
            }
            Ok(())
        }
    }

    /// Digest of the canonical spec serialization, stored in checkpoints.
    pub fn digest(&self) -> [u8; 32] {
        let json = serde_json::to_string(self).expect("spec serializes");
        let mut out = [0u8; 32];
        out.copy_from_slice(&Sha256::digest(json.as_bytes()));
        out
    }

    pub fn build<E: Element>(&self, seed: u64) -> Result<Box<dyn Model<E>>> {
        self.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Ok(match &self.kind {
            ModelKind::ThreeM { .. } => Box::new(ThreeM::new(
                self.three_m_config().unwrap(),
                self.mod_dims,
                &mut rng,
            )?),
            ModelKind::Eft { modalities } => {
                Box::new(Eft::new(self, modalities.clone(), &mut rng))
            }
            ModelKind::Lft { modalities } => {
                Box::new(Lft::new(self, modalities.clone(), &mut rng))
            }
            ModelKind::Mlp { modalities } => {
                Box::new(Mlp::new(self, modalities.clone(), &mut rng))
            }
        })
    }
}

/// Linear token embedding with optional prior-speaker injection: a one-hot
/// of the current speaker is appended to every raw token before the linear
/// map, then the positional encoding is added.
#[derive(Clone, Debug)]
pub(crate) struct TokenEmbed<E> {
    pub linear: Linear<E>,
    pub use_prior: bool,
    pub n_classes: usize,
}

impl<E: Element> TokenEmbed<E> {
    pub fn new(
        prefix: &str,
        raw_dim: usize,
        d_model: usize,
        use_prior: bool,
        n_classes: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let d_in = raw_dim + if use_prior { n_classes } else { 0 };
        Self {
            linear: Linear::new(prefix, d_in, d_model, rng),
            use_prior,
            n_classes,
        }
    }

    pub fn forward(
        &self,
        tape: &mut Tape<E>,
        tokens: &Tensor<f32>,
        prior_label: usize,
    ) -> Result<Tensor<E>> {
        let input = self.augment(tokens, prior_label)?;
        let x = self.linear.forward(tape, &input)?;
        let pe = positional_encoding::<E>(x.rows(), x.cols());
        tape.add(&x, &pe)
    }

    /// Token block cast to the compute precision, with the one-hot prior
    /// appended when enabled.
    pub fn augment(&self, tokens: &Tensor<f32>, prior_label: usize) -> Result<Tensor<E>> {
        let cast: Tensor<E> = tokens.cast();
        if !self.use_prior {
            return Ok(cast);
        }
        if prior_label >= self.n_classes {
            return Err(Error::Contract(format!(
                "prior label {} out of range [0, {})",
                prior_label, self.n_classes
            )));
        }
        let mut onehot_row = vec![E::zero(); self.n_classes];
        onehot_row[prior_label] = E::one();
        let onehot = Tensor::from_rows(&vec![onehot_row; tokens.rows()])?;
        Tensor::concat_cols(&[&cast, &onehot])
    }

    pub fn visit(&self, f: &mut dyn FnMut(&Param<E>)) {
        self.linear.visit(f);
    }

    pub fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<E>)) {
        self.linear.visit_mut(f);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn preset_round_trips() {
        for name in table1_presets() {
            let kind = ModelKind::parse(&name).unwrap();
            assert_eq!(kind.name(), name, "canonical name for {name}");
        }
    }

    #[test]
    fn shorthand_presets_accepted() {
        let k = ModelKind::parse("3m:no-stage2").unwrap();
        assert_eq!(k.name(), "3m:T>V|A>V:no-stage2");
        let k = ModelKind::parse("3m").unwrap();
        assert_eq!(k.name(), "3m:T>V|A>V");
        let k = ModelKind::parse("eft:T+V").unwrap();
        assert_eq!(k.modalities(), vec![Modality::T, Modality::V]);
    }

    #[test]
    fn unknown_preset_lists_valid_ones() {
        let err = ModelKind::parse("transformer-xl").unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("valid presets"), "{msg}");
        assert!(msg.contains("3m:T>V|A>V"), "{msg}");
    }

    #[test]
    fn stream_requires_distinct_modalities() {
        assert!("T>T".parse::<StreamSpec>().is_err());
        assert!("T>V".parse::<StreamSpec>().is_ok());
    }

    #[test]
    fn config_requires_a_stage() {
        let mut cfg = ThreeMConfig {
            dims: ModelDims::default(),
            streams: default_streams(),
            fusion: FusionMode::SoftAverage,
            include_stage1: false,
            include_stage2: false,
            stage2_decoder: true,
            n_classes: 4,
            use_prior: false,
            l_out: 12,
        };
        assert!(cfg.validate().is_err());
        cfg.include_stage1 = true;
        assert!(cfg.validate().is_ok());
    }

    #[test]
    fn modality_union_is_sorted() {
        let kind = ModelKind::parse("3m:V>A|T>A").unwrap();
        assert_eq!(
            kind.modalities(),
            vec![Modality::T, Modality::A, Modality::V]
        );
    }
}
