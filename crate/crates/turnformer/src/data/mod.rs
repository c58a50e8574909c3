//! Conversation feature streams and their windowing into training samples.
//!
//! A conversation holds per-modality feature matrices at a fixed number of
//! windows per second plus a per-window speaker label (0 = no one, 1 = host,
//! 2.. = participants). Windowing slides an anchor over whole seconds and
//! emits (past features, prior label, future target label) samples.

pub mod io;
pub mod synth;

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::modality::Modality;
use crate::tensor::Tensor;

/// One conversation: synchronized per-modality windows and speaker labels.
#[derive(Clone, Debug)]
pub struct ConversationStreams {
    pub id: String,
    pub feats: BTreeMap<Modality, Tensor<f32>>,
    pub labels: Vec<usize>,
    pub windows_per_second: usize,
}

impl ConversationStreams {
    pub fn num_windows(&self) -> usize {
        self.labels.len()
    }

    /// Whole seconds covered; trailing partial seconds are ignored.
    pub fn duration_s(&self) -> usize {
        self.num_windows() / self.windows_per_second
    }

    pub fn validate(&self) -> Result<()> {
        if self.windows_per_second == 0 {
            return Err(Error::Config("windows_per_second must be >= 1".into()));
        }
        if self.feats.is_empty() {
            return Err(Error::Config(format!("conversation '{}' has no modalities", self.id)));
        }
        for (m, t) in &self.feats {
            if t.rows() != self.num_windows() {
                return Err(Error::Config(format!(
                    "conversation '{}': modality {} has {} windows but labels cover {}",
                    self.id,
                    m,
                    t.rows(),
                    self.num_windows()
                )));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct SampleMeta {
    pub conversation: String,
    pub anchor_s: usize,
}

/// One training/eval instance: per-modality past-token blocks, the speaker
/// at prediction time, and the target speaker `future_s` seconds ahead.
#[derive(Clone, Debug)]
pub struct Sample {
    pub feats: BTreeMap<Modality, Tensor<f32>>,
    pub prior_label: usize,
    pub target_label: usize,
    pub meta: SampleMeta,
}

impl Sample {
    pub fn tokens(&self, m: Modality) -> Result<&Tensor<f32>> {
        self.feats
            .get(&m)
            .ok_or_else(|| Error::Config(format!("sample lacks modality {m}")))
    }
}

/// Majority label in a window slice, ties broken toward the lowest label.
fn majority_label(labels: &[usize]) -> usize {
    let mut counts: BTreeMap<usize, usize> = BTreeMap::new();
    for &l in labels {
        *counts.entry(l).or_insert(0) += 1;
    }
    counts
        .into_iter()
        .max_by_key(|&(label, count)| (count, std::cmp::Reverse(label)))
        .map(|(label, _)| label)
        .unwrap_or(0)
}

/// Slides an anchor second `t` over the conversation and emits one sample per
/// valid anchor: the past block covers windows `[(t-past)·w, t·w)`, the prior
/// is the speaker at the anchor (the label of the last observed window), and
/// the target is the majority label within the second ending at `t + future`.
///
/// A conversation too short for any anchor yields an empty list.
pub fn window_dataset(
    conv: &ConversationStreams,
    past_s: usize,
    future_s: usize,
) -> Result<Vec<Sample>> {
    if past_s == 0 || future_s == 0 {
        return Err(Error::Contract(
            "past_s and future_s must be >= 1".into(),
        ));
    }
    conv.validate()?;
    let w = conv.windows_per_second;
    let duration = conv.duration_s();
    let mut samples = Vec::new();
    if past_s + future_s > duration {
        return Ok(samples);
    }
    for t in past_s..=duration - future_s {
        let lo = (t - past_s) * w;
        let hi = t * w;
        let mut feats = BTreeMap::new();
        for (m, mat) in &conv.feats {
            feats.insert(*m, mat.slice_rows(lo, hi)?);
        }
        let target_lo = (t + future_s - 1) * w;
        let target_hi = (t + future_s) * w;
        samples.push(Sample {
            feats,
            prior_label: conv.labels[t * w - 1],
            target_label: majority_label(&conv.labels[target_lo..target_hi]),
            meta: SampleMeta {
                conversation: conv.id.clone(),
                anchor_s: t,
            },
        });
    }
    Ok(samples)
}

pub fn window_all(
    convs: &[ConversationStreams],
    past_s: usize,
    future_s: usize,
) -> Result<Vec<Sample>> {
    let mut out = Vec::new();
    for conv in convs {
        out.extend(window_dataset(conv, past_s, future_s)?);
    }
    Ok(out)
}

#[derive(Debug)]
pub struct SplitConvs {
    pub train: Vec<ConversationStreams>,
    pub val: Vec<ConversationStreams>,
    pub test: Vec<ConversationStreams>,
}

/// Splits at conversation granularity so no conversation leaks across
/// splits. Sizes follow the largest-remainder rounding of the fractions;
/// every split with a nonzero fraction receives at least one conversation.
pub fn split_dataset(
    convs: Vec<ConversationStreams>,
    fractions: [f64; 3],
    seed: u64,
) -> Result<SplitConvs> {
    let total: f64 = fractions.iter().sum();
    if (total - 1.0).abs() > 1e-9 {
        return Err(Error::Config(format!(
            "split fractions must sum to 1, got {total}"
        )));
    }
    if fractions.iter().any(|f| *f < 0.0) {
        return Err(Error::Config("split fractions must be non-negative".into()));
    }
    let nonzero = fractions.iter().filter(|f| **f > 0.0).count();
    if convs.len() < nonzero {
        return Err(Error::Config(format!(
            "{} conversations cannot cover {} nonzero splits",
            convs.len(),
            nonzero
        )));
    }

    let n = convs.len();
    let mut sizes = [0usize; 3];
    let mut remainders: Vec<(usize, f64)> = Vec::new();
    let mut assigned = 0;
    for (i, f) in fractions.iter().enumerate() {
        let exact = f * n as f64;
        sizes[i] = exact.floor() as usize;
        assigned += sizes[i];
        remainders.push((i, exact - exact.floor()));
    }
    // Hand out the leftover conversations by largest remainder.
    remainders.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
    for k in 0..n - assigned {
        sizes[remainders[k % 3].0] += 1;
    }
    // Every nonzero-fraction split must be non-empty.
    for i in 0..3 {
        if fractions[i] > 0.0 && sizes[i] == 0 {
            let donor = (0..3)
                .max_by_key(|&j| sizes[j])
                .expect("three candidate splits");
            sizes[donor] -= 1;
            sizes[i] += 1;
        }
    }

    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    order.shuffle(&mut rng);

    let mut pools: Vec<Option<ConversationStreams>> = convs.into_iter().map(Some).collect();
    let mut take = |ids: &[usize]| -> Vec<ConversationStreams> {
        ids.iter().map(|&i| pools[i].take().unwrap()).collect()
    };
    let train = take(&order[..sizes[0]]);
    let val = take(&order[sizes[0]..sizes[0] + sizes[1]]);
    let test = take(&order[sizes[0] + sizes[1]..]);
    Ok(SplitConvs { train, val, test })
}
