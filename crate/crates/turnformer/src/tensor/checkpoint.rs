//! Binary parameter checkpoints.
//!
//! One file per model: a header with the format version and a digest of the
//! model config, then for each named parameter the name length, name, shape,
//! and row-major 64-bit little-endian values.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

pub const FORMAT_VERSION: u32 = 1;

pub fn save<E: Element>(
    path: &Path,
    config_digest: &[u8; 32],
    params: &[(String, Tensor<E>)],
) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(&FORMAT_VERSION.to_le_bytes())?;
    w.write_all(config_digest)?;
    for (name, value) in params {
        let bytes = name.as_bytes();
        w.write_all(&(bytes.len() as u32).to_le_bytes())?;
        w.write_all(bytes)?;
        w.write_all(&2u32.to_le_bytes())?;
        w.write_all(&(value.rows() as u64).to_le_bytes())?;
        w.write_all(&(value.cols() as u64).to_le_bytes())?;
        for v in value.data() {
            w.write_all(&v.as_f64().to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn load<E: Element>(
    path: &Path,
    expected_digest: Option<&[u8; 32]>,
) -> Result<BTreeMap<String, Tensor<E>>> {
    let fmt_err = |detail: String| Error::Format {
        path: path.display().to_string(),
        detail,
    };
    let mut r = BufReader::new(File::open(path)?);

    let mut u32buf = [0u8; 4];
    r.read_exact(&mut u32buf)
        .map_err(|_| fmt_err("truncated header".into()))?;
    let version = u32::from_le_bytes(u32buf);
    if version != FORMAT_VERSION {
        return Err(fmt_err(format!(
            "unsupported checkpoint version {version}, expected {FORMAT_VERSION}"
        )));
    }
    let mut digest = [0u8; 32];
    r.read_exact(&mut digest)
        .map_err(|_| fmt_err("truncated config digest".into()))?;
    if let Some(expected) = expected_digest {
        if &digest != expected {
            return Err(fmt_err(
                "model config digest does not match the checkpoint".into(),
            ));
        }
    }

    let mut params = BTreeMap::new();
    loop {
        match r.read_exact(&mut u32buf) {
            Ok(()) => {}
            Err(e) if e.kind() == std::io::ErrorKind::UnexpectedEof => break,
            Err(e) => return Err(e.into()),
        }
        let name_len = u32::from_le_bytes(u32buf) as usize;
        let mut name_buf = vec![0u8; name_len];
        r.read_exact(&mut name_buf)
            .map_err(|_| fmt_err("truncated parameter name".into()))?;
        let name = String::from_utf8(name_buf)
            .map_err(|_| fmt_err("parameter name is not UTF-8".into()))?;
        r.read_exact(&mut u32buf)
            .map_err(|_| fmt_err(format!("truncated shape for '{name}'")))?;
        let ndim = u32::from_le_bytes(u32buf);
        if ndim != 2 {
            return Err(fmt_err(format!(
                "parameter '{name}' has {ndim} dims, expected 2"
            )));
        }
        let mut u64buf = [0u8; 8];
        r.read_exact(&mut u64buf)
            .map_err(|_| fmt_err(format!("truncated shape for '{name}'")))?;
        let rows = u64::from_le_bytes(u64buf) as usize;
        r.read_exact(&mut u64buf)
            .map_err(|_| fmt_err(format!("truncated shape for '{name}'")))?;
        let cols = u64::from_le_bytes(u64buf) as usize;
        let mut data = Vec::with_capacity(rows * cols);
        for _ in 0..rows * cols {
            r.read_exact(&mut u64buf).map_err(|_| {
                fmt_err(format!(
                    "truncated values for '{name}': expected {} bytes",
                    rows * cols * 8
                ))
            })?;
            data.push(E::from_f64(f64::from_le_bytes(u64buf)));
        }
        params.insert(name, Tensor::from_vec(rows, cols, data)?);
    }
    Ok(params)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_preserves_names_shapes_values() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let params = vec![
            (
                "layer.w".to_string(),
                Tensor::from_rows(&[vec![1.0f64, -2.5], vec![0.0, 3.25]]).unwrap(),
            ),
            ("layer.b".to_string(), Tensor::from_rows(&[vec![0.5f64]]).unwrap()),
        ];
        let digest = [7u8; 32];
        save(&path, &digest, &params).unwrap();
        let loaded = load::<f64>(&path, Some(&digest)).unwrap();
        assert_eq!(loaded.len(), 2);
        assert_eq!(loaded["layer.w"].shape(), [2, 2]);
        assert_eq!(loaded["layer.w"].data(), params[0].1.data());
        assert_eq!(loaded["layer.b"].data(), params[1].1.data());
    }

    #[test]
    fn digest_mismatch_is_format_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        save::<f64>(&path, &[1u8; 32], &[]).unwrap();
        assert!(matches!(
            load::<f64>(&path, Some(&[2u8; 32])),
            Err(Error::Format { .. })
        ));
    }

    #[test]
    fn truncated_file_is_format_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let params = vec![(
            "w".to_string(),
            Tensor::from_rows(&[vec![1.0f64, 2.0, 3.0]]).unwrap(),
        )];
        save(&path, &[0u8; 32], &params).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 5]).unwrap();
        assert!(matches!(
            load::<f64>(&path, None),
            Err(Error::Format { .. })
        ));
    }
}
