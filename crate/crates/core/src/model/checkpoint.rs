//! Binary checkpoint format, all integers little-endian:
//!
//! ```text
//! magic   8 bytes  "RWKVXCKP"
//! version u32
//! width   u8       bytes per value (4 or 8)
//! meta    u32 length + UTF-8 text (config lines, `layout = ...`, `expanded = ...`)
//! records until EOF:
//!   name  u16 length + UTF-8
//!   ndim  u8, then ndim × u64 dims
//!   values  width × Π dims bytes
//! ```

use std::collections::HashSet;
use std::fs;
use std::path::Path;

use crate::error::{CheckpointError, Error, Result};
use crate::model::{LayerLayout, Model, ModelConfig};
use crate::scalar::Scalar;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"RWKVXCKP";
pub const CHECKPOINT_VERSION: u32 = 1;

pub fn save_checkpoint<T: Scalar>(model: &Model<T>, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, to_bytes(model)).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })
}

pub fn load_checkpoint<T: Scalar>(path: impl AsRef<Path>) -> Result<Model<T>> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })?;
    from_bytes(&bytes)
}

fn metadata<T: Scalar>(model: &Model<T>) -> String {
    let expanded: Vec<String> = model
        .layers()
        .iter()
        .enumerate()
        .filter(|(_, l)| l.expanded)
        .map(|(i, _)| i.to_string())
        .collect();
    format!(
        "{}layout = {}\nexpanded = {}\n",
        model.config().to_text(),
        model.layout(),
        expanded.join(",")
    )
}

pub(crate) fn to_bytes<T: Scalar>(model: &Model<T>) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.push(T::WIDTH);
    let meta = metadata(model);
    out.extend_from_slice(&(meta.len() as u32).to_le_bytes());
    out.extend_from_slice(meta.as_bytes());
    for (name, m) in model.parameters() {
        out.extend_from_slice(&(name.len() as u16).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(2);
        out.extend_from_slice(&(m.rows() as u64).to_le_bytes());
        out.extend_from_slice(&(m.cols() as u64).to_le_bytes());
        for &v in m.data() {
            v.write_le(&mut out);
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &'static str) -> Result<&'a [u8], CheckpointError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or(CheckpointError::Truncated(what))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self, what: &'static str) -> Result<u8, CheckpointError> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &'static str) -> Result<u16, CheckpointError> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    fn u32(&mut self, what: &'static str) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &'static str) -> Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    fn at_end(&self) -> bool {
        self.pos == self.bytes.len()
    }
}

fn parse_metadata(text: &str) -> Result<(ModelConfig, LayerLayout, Vec<usize>), CheckpointError> {
    let meta_err = |m: String| CheckpointError::Metadata(m);
    let mut config_lines = String::new();
    let mut layout = None;
    let mut expanded = Vec::new();
    for line in text.lines() {
        match line.split_once('=').map(|(k, v)| (k.trim(), v.trim())) {
            Some(("layout", v)) => layout = Some(v.parse::<LayerLayout>().map_err(|e| meta_err(e.to_string()))?),
            Some(("expanded", v)) => {
                expanded = v
                    .split(',')
                    .filter(|s| !s.is_empty())
                    .map(|s| s.parse().map_err(|_| meta_err(format!("bad layer index `{s}`"))))
                    .collect::<Result<_, _>>()?
            }
            _ => {
                config_lines.push_str(line);
                config_lines.push('\n');
            }
        }
    }
    let config = ModelConfig::parse(&config_lines).map_err(|e| meta_err(e.to_string()))?;
    let layout = layout.ok_or_else(|| meta_err("missing layout".into()))?;
    if layout.len() != config.n_layers {
        return Err(meta_err(format!(
            "layout has {} layers, config says {}",
            layout.len(),
            config.n_layers
        )));
    }
    Ok((config, layout, expanded))
}

pub(crate) fn from_bytes<T: Scalar>(bytes: &[u8]) -> Result<Model<T>> {
    let mut r = Reader { bytes, pos: 0 };
    let magic = r.take(8, "magic").map_err(|_| CheckpointError::BadMagic)?;
    if magic != CHECKPOINT_MAGIC {
        return Err(CheckpointError::BadMagic.into());
    }
    let version = r.u32("version")?;
    if version != CHECKPOINT_VERSION {
        return Err(CheckpointError::VersionMismatch {
            found: version,
            expected: CHECKPOINT_VERSION,
        }
        .into());
    }
    let width = r.u8("value width")?;
    if width != 4 && width != 8 {
        return Err(CheckpointError::BadValueWidth(width).into());
    }
    let meta_len = r.u32("metadata length")? as usize;
    let meta = std::str::from_utf8(r.take(meta_len, "metadata")?)
        .map_err(|_| CheckpointError::Metadata("metadata is not UTF-8".into()))?;
    let (config, layout, expanded) = parse_metadata(meta)?;

    let mut model = Model::<T>::zeroed(config, &layout, &expanded)?;
    let mut seen = HashSet::new();
    {
        let mut params = model.parameters_mut();
        while !r.at_end() {
            let name_len = r.u16("record name length")? as usize;
            let name = std::str::from_utf8(r.take(name_len, "record name")?)
                .map_err(|_| CheckpointError::Metadata("record name is not UTF-8".into()))?
                .to_string();
            let ndim = r.u8("record rank")? as usize;
            let dims = (0..ndim)
                .map(|_| r.u64("record shape").map(|d| d as usize))
                .collect::<Result<Vec<_>, _>>()?;
            let slot = params
                .iter_mut()
                .find(|(n, _)| *n == name)
                .ok_or_else(|| CheckpointError::UnexpectedParameter(name.clone()))?;
            let expected = vec![slot.1.rows(), slot.1.cols()];
            if dims != expected {
                return Err(CheckpointError::ShapeMismatch {
                    name,
                    expected,
                    found: dims,
                }
                .into());
            }
            if !seen.insert(name.clone()) {
                return Err(CheckpointError::UnexpectedParameter(name).into());
            }
            let count = expected[0] * expected[1];
            let raw = r.take(count * width as usize, "record values")?;
            for (dst, chunk) in slot.1.data_mut().iter_mut().zip(raw.chunks_exact(width as usize)) {
                *dst = T::read_le(chunk, width);
            }
        }
    }
    if let Some((name, _)) = model.parameters().into_iter().find(|(n, _)| !seen.contains(n)) {
        return Err(CheckpointError::MissingParameter(name).into());
    }
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sparse_attn::AttnConfig;

    fn model() -> Model<f64> {
        let cfg = ModelConfig {
            n_layers: 4,
            d_model: 8,
            d_k: 4,
            d_v: 4,
            vocab_size: 16,
            attn_ratio: 0.25,
            attn: AttnConfig {
                chunk_size: 2,
                top_k: 1,
                d_k: 4,
                d_v: 4,
                cache_budget: Some(4),
                obs_window: 2,
            },
            seed: 9,
        };
        Model::new(cfg).unwrap().expand_blocks(&[1]).unwrap()
    }

    #[test]
    fn round_trip_preserves_everything() {
        let m = model();
        let back: Model<f64> = from_bytes(&to_bytes(&m)).unwrap();
        assert_eq!(back, m);
    }

    #[test]
    fn single_precision_round_trip() {
        let m: Model<f32> = Model::new(model().config().clone()).unwrap();
        let back: Model<f32> = from_bytes(&to_bytes(&m)).unwrap();
        assert_eq!(back, m);
    }

    #[test]
    fn distinct_corruption_errors() {
        let bytes = to_bytes(&model());

        let mut v = bytes.clone();
        v[8] ^= 0x7f;
        assert!(matches!(
            from_bytes::<f64>(&v),
            Err(Error::Checkpoint(CheckpointError::VersionMismatch { .. }))
        ));

        let mut v = bytes.clone();
        v[0] = b'X';
        assert!(matches!(
            from_bytes::<f64>(&v),
            Err(Error::Checkpoint(CheckpointError::BadMagic))
        ));

        let v = &bytes[..bytes.len() - 3];
        assert!(matches!(
            from_bytes::<f64>(v),
            Err(Error::Checkpoint(CheckpointError::Truncated(_)))
        ));

        let mut v = bytes.clone();
        v[12] = 3;
        assert!(matches!(
            from_bytes::<f64>(&v),
            Err(Error::Checkpoint(CheckpointError::BadValueWidth(3)))
        ));
    }
}
