//! Synthetic conversation generator with a Bayes-optimal accuracy oracle.
//!
//! Speakers follow a first-order Markov chain (stay with `p_stay`, otherwise
//! uniform over the other states including "no one"). Every window carries
//! the current speaker's signature vector plus Gaussian noise. Optionally, a
//! planted cue pattern announcing the upcoming speaker is added to one
//! modality exactly `lead_seconds` before each turn change, so turn changes
//! are predictable only by reading the cue modality.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::data::{window_dataset, ConversationStreams};
use crate::error::{Error, Result};
use crate::modality::{Modality, ModalityDims};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct CueSpec {
    pub modality: Modality,
    pub lead_seconds: usize,
    pub amplitude: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    /// Speakers excluding the "no one" state; labels run 0..=n_speakers.
    pub n_speakers: usize,
    pub p_stay: f64,
    pub n_conversations: usize,
    pub duration_s: usize,
    pub windows_per_second: usize,
    pub dims: ModalityDims,
    pub signature_scale: f64,
    pub noise_scale: f64,
    pub cue: Option<CueSpec>,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_speakers: 3,
            p_stay: 0.85,
            n_conversations: 8,
            duration_s: 60,
            windows_per_second: 4,
            dims: ModalityDims::default(),
            signature_scale: 1.0,
            noise_scale: 0.25,
            cue: None,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn n_classes(&self) -> usize {
        self.n_speakers + 1
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_speakers == 0 {
            return Err(Error::Config("n_speakers must be >= 1".into()));
        }
        if !(self.p_stay > 0.0 && self.p_stay <= 1.0) {
            return Err(Error::Config(format!(
                "p_stay {} must lie in (0, 1]",
                self.p_stay
            )));
        }
        if self.noise_scale < 0.0 {
            return Err(Error::Config(format!(
                "noise_scale {} must be >= 0",
                self.noise_scale
            )));
        }
        if self.signature_scale <= 0.0 {
            return Err(Error::Config(
                "signature_scale must be > 0 so signatures stay distinct".into(),
            ));
        }
        if self.n_conversations == 0 || self.duration_s == 0 || self.windows_per_second == 0 {
            return Err(Error::Config(
                "n_conversations, duration_s, windows_per_second must be >= 1".into(),
            ));
        }
        if let Some(cue) = &self.cue {
            if cue.lead_seconds >= self.duration_s {
                return Err(Error::Config(format!(
                    "cue lead {}s must be shorter than the conversation ({}s)",
                    cue.lead_seconds, self.duration_s
                )));
            }
        }
        self.dims.validate()
    }
}

/// Per-class signature vectors for each modality, derived from the seed.
/// The generator and the Bayes oracle both read this table.
pub fn signature_table(cfg: &SynthConfig) -> BTreeMap<Modality, Vec<Vec<f32>>> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_mul(0x9E37_79B9_7F4A_7C15));
    let mut table = BTreeMap::new();
    for m in Modality::ALL {
        let dim = cfg.dims.get(m);
        let sigs: Vec<Vec<f32>> = (0..cfg.n_classes())
            .map(|_| {
                (0..dim)
                    .map(|_| {
                        let z: f64 = rng.sample(StandardNormal);
                        (z * cfg.signature_scale) as f32
                    })
                    .collect()
            })
            .collect();
        table.insert(m, sigs);
    }
    table
}

/// Per-class cue patterns for the cue modality, derived from the seed.
pub fn cue_table(cfg: &SynthConfig) -> Option<Vec<Vec<f32>>> {
    let cue = cfg.cue.as_ref()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_mul(0xD134_2543_DE82_EF95));
    let dim = cfg.dims.get(cue.modality);
    Some(
        (0..cfg.n_classes())
            .map(|_| {
                (0..dim)
                    .map(|_| {
                        let z: f64 = rng.sample(StandardNormal);
                        z as f32
                    })
                    .collect()
            })
            .collect(),
    )
}

/// Second-level speaker sequence for one conversation.
fn markov_states(cfg: &SynthConfig, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let n = cfg.n_classes();
    let mut states = Vec::with_capacity(cfg.duration_s);
    let mut current = rng.gen_range(0..n);
    states.push(current);
    for _ in 1..cfg.duration_s {
        if rng.gen_range(0.0..1.0) >= cfg.p_stay {
            let pick = rng.gen_range(0..n - 1);
            current = if pick >= current { pick + 1 } else { pick };
        }
        states.push(current);
    }
    states
}

pub fn synth_generate(cfg: &SynthConfig) -> Result<Vec<ConversationStreams>> {
    cfg.validate()?;
    let signatures = signature_table(cfg);
    let cues = cue_table(cfg);
    let w = cfg.windows_per_second;
    let num_windows = cfg.duration_s * w;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);

    let mut convs = Vec::with_capacity(cfg.n_conversations);
    for ci in 0..cfg.n_conversations {
        let states = markov_states(cfg, &mut rng);
        let mut labels = Vec::with_capacity(num_windows);
        for &s in &states {
            labels.extend(std::iter::repeat(s).take(w));
        }

        let mut feats = BTreeMap::new();
        for m in Modality::ALL {
            let dim = cfg.dims.get(m);
            let sigs = &signatures[&m];
            let mut data = Vec::with_capacity(num_windows * dim);
            for &label in &labels {
                let sig = &sigs[label];
                for s in sig.iter().take(dim) {
                    let z: f64 = rng.sample(StandardNormal);
                    data.push(s + (z * cfg.noise_scale) as f32);
                }
            }
            feats.insert(m, Tensor::from_vec(num_windows, dim, data)?);
        }

        if let (Some(cue), Some(patterns)) = (&cfg.cue, &cues) {
            let dim = cfg.dims.get(cue.modality);
            let mat = feats.get_mut(&cue.modality).unwrap();
            let mut data = mat.data().to_vec();
            for s in 1..cfg.duration_s {
                if states[s] != states[s - 1] && s >= cue.lead_seconds {
                    let cue_sec = s - cue.lead_seconds;
                    let pattern = &patterns[states[s]];
                    for win in cue_sec * w..(cue_sec + 1) * w {
                        for d in 0..dim {
                            data[win * dim + d] += (cue.amplitude as f32) * pattern[d];
                        }
                    }
                }
            }
            *mat = Tensor::from_vec(num_windows, dim, data)?;
        }

        convs.push(ConversationStreams {
            id: format!("synth_{ci:03}"),
            feats,
            labels,
            windows_per_second: w,
        });
    }
    Ok(convs)
}

/// Symmetric transition matrix of the speaker chain.
fn transition_matrix(cfg: &SynthConfig) -> Vec<Vec<f64>> {
    let n = cfg.n_classes();
    let off = (1.0 - cfg.p_stay) / (n - 1) as f64;
    (0..n)
        .map(|i| {
            (0..n)
                .map(|j| if i == j { cfg.p_stay } else { off })
                .collect()
        })
        .collect()
}

fn mat_power(m: &[Vec<f64>], p: usize) -> Vec<Vec<f64>> {
    let n = m.len();
    let mut acc: Vec<Vec<f64>> = (0..n)
        .map(|i| (0..n).map(|j| if i == j { 1.0 } else { 0.0 }).collect())
        .collect();
    for _ in 0..p {
        let mut next = vec![vec![0.0; n]; n];
        for (i, next_row) in next.iter_mut().enumerate() {
            for k in 0..n {
                let a = acc[i][k];
                for (j, cell) in next_row.iter_mut().enumerate() {
                    *cell += a * m[k][j];
                }
            }
        }
        acc = next;
    }
    acc
}

/// Accuracy upper bound of the ideal predictor that knows the generator.
///
/// - With the cue visible inside the past window (`future_s <= lead` and
///   `lead <= past_s`), accuracy is the measured reliability of the ideal
///   cue decoder on freshly simulated data.
/// - Without a visible cue but with the prior known, the best rule is the
///   argmax of the `future_s`-step transition row.
/// - Without either, only the stationary (uniform) marginal remains.
pub fn bayes_oracle(cfg: &SynthConfig, past_s: usize, future_s: usize, use_prior: bool) -> f64 {
    let n = cfg.n_classes() as f64;
    let visible = cfg
        .cue
        .as_ref()
        .map(|c| future_s <= c.lead_seconds && c.lead_seconds <= past_s)
        .unwrap_or(false);
    if visible {
        return cue_reliability(cfg, past_s, future_s);
    }
    if use_prior {
        let tf = mat_power(&transition_matrix(cfg), future_s);
        return tf[0].iter().cloned().fold(0.0, f64::max);
    }
    1.0 / n
}

/// Monte-Carlo reliability of the ideal structural decoder: estimate the
/// current speaker from non-cue modalities, decode the boundary cues inside
/// the past window, and walk the announced changes up to the target second.
fn cue_reliability(cfg: &SynthConfig, past_s: usize, future_s: usize) -> f64 {
    let cue = cfg.cue.as_ref().expect("cue required for reliability");
    let mut mc_cfg = cfg.clone();
    mc_cfg.n_conversations = 48;
    mc_cfg.duration_s = past_s + future_s + cue.lead_seconds + 8;
    mc_cfg.seed = cfg.seed ^ 0xB0A1_5EED;
    let convs = synth_generate(&mc_cfg).expect("valid derived config");
    let signatures = signature_table(&mc_cfg);
    let patterns = cue_table(&mc_cfg).expect("cue table");
    let w = mc_cfg.windows_per_second;
    let n_classes = mc_cfg.n_classes();

    let second_mean = |mat: &Tensor<f32>, local_sec: usize| -> Vec<f64> {
        let dim = mat.cols();
        let mut mean = vec![0.0f64; dim];
        for win in local_sec * w..(local_sec + 1) * w {
            for (acc, v) in mean.iter_mut().zip(mat.row(win)) {
                *acc += *v as f64;
            }
        }
        for v in mean.iter_mut() {
            *v /= w as f64;
        }
        mean
    };

    let mut correct = 0usize;
    let mut total = 0usize;
    for conv in &convs {
        for sample in window_dataset(conv, past_s, future_s).expect("windowing") {
            // State estimate per past second from the non-cue modalities.
            let state_of = |local_sec: usize| -> usize {
                let mut best = (f64::INFINITY, 0usize);
                for c in 0..n_classes {
                    let mut dist = 0.0;
                    for m in Modality::ALL {
                        if m == cue.modality {
                            continue;
                        }
                        let mean = second_mean(sample.tokens(m).unwrap(), local_sec);
                        for (v, s) in mean.iter().zip(&signatures[&m][c]) {
                            let d = v - *s as f64;
                            dist += d * d;
                        }
                    }
                    if dist < best.0 {
                        best = (dist, c);
                    }
                }
                best.1
            };

            let mut predicted = state_of(past_s - 1);
            // Boundaries into seconds t .. t+future-1; their cues sit at
            // local seconds past - lead + j.
            for j in 0..future_s {
                let local_cue_sec = past_s + j - cue.lead_seconds;
                let cue_mean = second_mean(sample.tokens(cue.modality).unwrap(), local_cue_sec);
                let base_state = state_of(local_cue_sec);
                let residual: Vec<f64> = cue_mean
                    .iter()
                    .zip(&signatures[&cue.modality][base_state])
                    .map(|(v, s)| v - *s as f64)
                    .collect();
                let none_score: f64 = residual.iter().map(|r| r * r).sum();
                let mut best = (none_score, None);
                for (c, pattern) in patterns.iter().enumerate() {
                    let score: f64 = residual
                        .iter()
                        .zip(pattern)
                        .map(|(r, p)| {
                            let d = r - cue.amplitude * *p as f64;
                            d * d
                        })
                        .sum();
                    if score < best.0 {
                        best = (score, Some(c));
                    }
                }
                if let Some(c) = best.1 {
                    predicted = c;
                }
            }

            correct += usize::from(predicted == sample.target_label);
            total += 1;
        }
    }
    correct as f64 / total.max(1) as f64
}
