//! On-disk dataset format.
//!
//! Directory layout:
//!
//! ```text
//! <root>/manifest.json          format version, windows/second, dims,
//!                               n_classes, conversation list with durations
//! <root>/<conv_id>/text.f32     row-major little-endian f32, windows × dim
//! <root>/<conv_id>/audio.f32
//! <root>/<conv_id>/video.f32
//! <root>/<conv_id>/labels.csv   header "window_index,speaker"
//! ```
//!
//! Round-trips are bit-exact. Exported conversation feature tables map onto this
//! layout directly: one subdirectory per conversation, the per-modality
//! feature matrices written as raw f32 rows (12 windows per second), and the
//! per-window speaker labels as the CSV.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::ConversationStreams;
use crate::error::{Error, Result};
use crate::modality::{Modality, ModalityDims};
use crate::tensor::Tensor;

pub const FORMAT_VERSION: u32 = 1;

/// A fully loaded dataset plus the metadata models need to size themselves.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub convs: Vec<ConversationStreams>,
    pub dims: ModalityDims,
    pub n_classes: usize,
    pub windows_per_second: usize,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    format_version: u32,
    windows_per_second: usize,
    dims: ModalityDims,
    n_classes: usize,
    conversations: Vec<ManifestConv>,
}

#[derive(Serialize, Deserialize)]
struct ManifestConv {
    id: String,
    num_windows: usize,
}

pub fn save_dataset(ds: &Dataset, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        windows_per_second: ds.windows_per_second,
        dims: ds.dims,
        n_classes: ds.n_classes,
        conversations: ds
            .convs
            .iter()
            .map(|c| ManifestConv {
                id: c.id.clone(),
                num_windows: c.num_windows(),
            })
            .collect(),
    };
    fs::write(
        dir.join("manifest.json"),
        serde_json::to_string_pretty(&manifest)?,
    )?;

    for conv in &ds.convs {
        conv.validate()?;
        let conv_dir = dir.join(&conv.id);
        fs::create_dir_all(&conv_dir)?;
        for m in Modality::ALL {
            let mat = conv.feats.get(&m).ok_or_else(|| {
                Error::Config(format!("conversation '{}' lacks modality {m}", conv.id))
            })?;
            let mut w = BufWriter::new(fs::File::create(conv_dir.join(m.file_name()))?);
            for v in mat.data() {
                w.write_all(&v.to_le_bytes())?;
            }
            w.flush()?;
        }
        let mut csv = csv::Writer::from_path(conv_dir.join("labels.csv"))?;
        csv.write_record(["window_index", "speaker"])?;
        for (i, label) in conv.labels.iter().enumerate() {
            csv.write_record([i.to_string(), label.to_string()])?;
        }
        csv.flush()?;
    }
    Ok(())
}

pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let manifest_path = dir.join("manifest.json");
    let manifest: Manifest = serde_json::from_str(
        &fs::read_to_string(&manifest_path).map_err(|e| Error::Format {
            path: manifest_path.display().to_string(),
            detail: format!("cannot read manifest: {e}"),
        })?,
    )?;
    if manifest.format_version != FORMAT_VERSION {
        return Err(Error::Format {
            path: manifest_path.display().to_string(),
            detail: format!(
                "unsupported format version {}, expected {}",
                manifest.format_version, FORMAT_VERSION
            ),
        });
    }

    let mut convs = Vec::with_capacity(manifest.conversations.len());
    for mc in &manifest.conversations {
        let conv_dir = dir.join(&mc.id);
        let mut feats = BTreeMap::new();
        for m in Modality::ALL {
            let dim = manifest.dims.get(m);
            let path = conv_dir.join(m.file_name());
            let bytes = fs::read(&path).map_err(|e| Error::Format {
                path: path.display().to_string(),
                detail: format!("cannot read feature file: {e}"),
            })?;
            let expected = mc.num_windows * dim * 4;
            if bytes.len() != expected {
                return Err(Error::Format {
                    path: path.display().to_string(),
                    detail: format!(
                        "expected {} bytes ({} windows x {} dims x 4), found {}",
                        expected,
                        mc.num_windows,
                        dim,
                        bytes.len()
                    ),
                });
            }
            let data: Vec<f32> = bytes
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            feats.insert(m, Tensor::from_vec(mc.num_windows, dim, data)?);
        }

        let labels_path = conv_dir.join("labels.csv");
        let mut reader = csv::Reader::from_path(&labels_path).map_err(|e| Error::Format {
            path: labels_path.display().to_string(),
            detail: format!("cannot read labels: {e}"),
        })?;
        let mut labels = vec![usize::MAX; mc.num_windows];
        for record in reader.records() {
            let record = record.map_err(|e| Error::Format {
                path: labels_path.display().to_string(),
                detail: e.to_string(),
            })?;
            let idx: usize = record
                .get(0)
                .and_then(|v| v.parse().ok())
                .ok_or_else(|| Error::Format {
                    path: labels_path.display().to_string(),
                    detail: format!("bad window_index in row {record:?}"),
                })?;
            let speaker: usize = record
                .get(1)
                .and_then(|v| v.parse().ok())
                .ok_or_else(|| Error::Format {
                    path: labels_path.display().to_string(),
                    detail: format!("bad speaker in row {record:?}"),
                })?;
            if idx >= mc.num_windows {
                return Err(Error::Format {
                    path: labels_path.display().to_string(),
                    detail: format!(
                        "window_index {idx} out of range for {} windows",
                        mc.num_windows
                    ),
                });
            }
            if speaker >= manifest.n_classes {
                return Err(Error::Format {
                    path: labels_path.display().to_string(),
                    detail: format!(
                        "speaker {speaker} out of range for {} classes",
                        manifest.n_classes
                    ),
                });
            }
            labels[idx] = speaker;
        }
        if let Some(missing) = labels.iter().position(|l| *l == usize::MAX) {
            return Err(Error::Format {
                path: labels_path.display().to_string(),
                detail: format!("missing label for window {missing}"),
            });
        }

        let conv = ConversationStreams {
            id: mc.id.clone(),
            feats,
            labels,
            windows_per_second: manifest.windows_per_second,
        };
        conv.validate()?;
        convs.push(conv);
    }

    Ok(Dataset {
        convs,
        dims: manifest.dims,
        n_classes: manifest.n_classes,
        windows_per_second: manifest.windows_per_second,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synth::{synth_generate, SynthConfig};

    fn tiny_dataset() -> Dataset {
        let cfg = SynthConfig {
            n_conversations: 3,
            duration_s: 10,
            dims: ModalityDims { t: 5, a: 3, v: 7 },
            ..SynthConfig::default()
        };
        Dataset {
            convs: synth_generate(&cfg).unwrap(),
            dims: cfg.dims,
            n_classes: cfg.n_classes(),
            windows_per_second: cfg.windows_per_second,
        }
    }

    #[test]
    fn round_trip_is_bit_identical() {
        let ds = tiny_dataset();
        let dir = tempfile::tempdir().unwrap();
        save_dataset(&ds, dir.path()).unwrap();
        let loaded = load_dataset(dir.path()).unwrap();
        assert_eq!(loaded.n_classes, ds.n_classes);
        assert_eq!(loaded.windows_per_second, ds.windows_per_second);
        assert_eq!(loaded.convs.len(), ds.convs.len());
        for (a, b) in ds.convs.iter().zip(&loaded.convs) {
            assert_eq!(a.id, b.id);
            assert_eq!(a.labels, b.labels);
            for m in Modality::ALL {
                let (x, y) = (&a.feats[&m], &b.feats[&m]);
                assert_eq!(x.shape(), y.shape());
                assert!(x
                    .data()
                    .iter()
                    .zip(y.data())
                    .all(|(p, q)| p.to_bits() == q.to_bits()));
            }
        }
    }

    #[test]
    fn truncated_feature_file_is_format_error() {
        let ds = tiny_dataset();
        let dir = tempfile::tempdir().unwrap();
        save_dataset(&ds, dir.path()).unwrap();
        let victim = dir.path().join(&ds.convs[0].id).join("audio.f32");
        let bytes = fs::read(&victim).unwrap();
        fs::write(&victim, &bytes[..bytes.len() - 4]).unwrap();
        match load_dataset(dir.path()) {
            Err(Error::Format { path, detail }) => {
                assert!(path.ends_with("audio.f32"));
                assert!(detail.contains("expected"), "{detail}");
            }
            other => panic!("expected format error, got {other:?}"),
        }
    }

    #[test]
    fn full_size_manifest_loads() {
        // Full-size dims (2048/64/300) at 12 windows/second and 4 classes
        // go through the same code path without special-casing.
        let cfg = SynthConfig {
            n_conversations: 1,
            duration_s: 3,
            windows_per_second: 12,
            dims: ModalityDims::default(),
            ..SynthConfig::default()
        };
        let ds = Dataset {
            convs: synth_generate(&cfg).unwrap(),
            dims: cfg.dims,
            n_classes: cfg.n_classes(),
            windows_per_second: cfg.windows_per_second,
        };
        let dir = tempfile::tempdir().unwrap();
        save_dataset(&ds, dir.path()).unwrap();
        let loaded = load_dataset(dir.path()).unwrap();
        assert_eq!(loaded.dims, ModalityDims::default());
        assert_eq!(loaded.windows_per_second, 12);
        assert_eq!(loaded.convs[0].feats[&Modality::V].cols(), 2048);
    }
}
