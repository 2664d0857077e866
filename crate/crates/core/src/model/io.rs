//! Binary model files.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "DCNN"              4 bytes magic
//! version             u8 (currently 1)
//! header_len          u32
//! header              header_len bytes of UTF-8 `key=value` lines
//! weights             per parameter tensor, in layer order:
//!                       count u32, then count f32 values
//! crc32               u32 over the weights region
//! ```

use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::path::Path;

use super::{LayerKind, ModelError, NetworkModel, SplitRecord};

pub const MAGIC: &[u8; 4] = b"DCNN";
pub const FORMAT_VERSION: u8 = 1;

fn header_text(model: &NetworkModel<f32>) -> Result<String, ModelError> {
    let meta = model.metadata();
    let layers: Vec<&str> = model.shape_table()?.iter().map(|(k, _)| k.name()).collect();
    let mut lines = vec![
        format!("layers={}", layers.join(",")),
        format!("kernel_size={}", meta.kernel_size),
        format!("dropout_rate={}", meta.dropout_rate),
        format!("seed={}", meta.seed),
    ];
    match meta.split {
        Some(s) => {
            lines.push(format!(
                "split={}",
                if s.sequential { "sequential" } else { "shuffled" }
            ));
            lines.push(format!("train_count={}", s.train_count));
            lines.push(format!("val_count={}", s.val_count));
        }
        None => lines.push("split=none".into()),
    }
    Ok(lines.join("\n") + "\n")
}

pub fn write_model(model: &NetworkModel<f32>, mut out: impl Write) -> Result<(), ModelError> {
    let header = header_text(model)?;
    let header_len = u32::try_from(header.len()).map_err(|_| ModelError::InvalidConfig("header too large".into()))?;
    out.write_all(MAGIC)?;
    out.write_all(&[FORMAT_VERSION])?;
    out.write_all(&header_len.to_le_bytes())?;
    out.write_all(header.as_bytes())?;

    let mut weights = Vec::new();
    for p in model.parameters() {
        let count = u32::try_from(p.len()).map_err(|_| ModelError::InvalidConfig("tensor too large".into()))?;
        weights.extend_from_slice(&count.to_le_bytes());
        for v in p.data() {
            weights.extend_from_slice(&v.to_le_bytes());
        }
    }
    out.write_all(&weights)?;
    out.write_all(&crc32fast::hash(&weights).to_le_bytes())?;
    out.flush()?;
    Ok(())
}

pub fn save_model(model: &NetworkModel<f32>, path: impl AsRef<Path>) -> Result<(), ModelError> {
    write_model(model, BufWriter::new(File::create(path)?))
}

pub fn load_model(path: impl AsRef<Path>) -> Result<NetworkModel<f32>, ModelError> {
    read_model(File::open(path)?)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn err(&self, reason: impl Into<String>) -> ModelError {
        ModelError::Format {
            offset: self.pos as u64,
            reason: reason.into(),
        }
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8], ModelError> {
        if self.bytes.len() - self.pos < n {
            return Err(self.err(format!(
                "truncated {what}: need {n} bytes, {} remain",
                self.bytes.len() - self.pos
            )));
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u32(&mut self, what: &str) -> Result<u32, ModelError> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

struct Header {
    layers: Vec<LayerKind>,
    kernel_size: usize,
    dropout_rate: f64,
    seed: u64,
    split: Option<SplitRecord>,
}

fn parse_header(text: &str) -> Result<Header, String> {
    let mut fields = std::collections::HashMap::new();
    for line in text.lines().filter(|l| !l.is_empty()) {
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| format!("header line without '=': {line:?}"))?;
        fields.insert(k, v);
    }
    let get = |key: &str| fields.get(key).copied().ok_or_else(|| format!("header missing {key}"));
    let num = |key: &str| -> Result<u64, String> {
        get(key)?
            .parse()
            .map_err(|_| format!("header {key} is not an unsigned integer"))
    };
    let layers = get("layers")?
        .split(',')
        .map(|name| LayerKind::parse(name).ok_or_else(|| format!("unknown layer {name:?}")))
        .collect::<Result<Vec<_>, _>>()?;
    let dropout_rate: f64 = get("dropout_rate")?
        .parse()
        .map_err(|_| "header dropout_rate is not a number".to_string())?;
    let split = match get("split")? {
        "none" => None,
        mode @ ("shuffled" | "sequential") => Some(SplitRecord {
            train_count: num("train_count")? as usize,
            val_count: num("val_count")? as usize,
            sequential: mode == "sequential",
        }),
        other => return Err(format!("unknown split mode {other:?}")),
    };
    Ok(Header {
        layers,
        kernel_size: num("kernel_size")? as usize,
        dropout_rate,
        seed: num("seed")?,
        split,
    })
}

/// Reads a model written by [`write_model`]. Any structural problem yields
/// [`ModelError::Format`] with the byte offset where it was detected; a
/// damaged weight region yields [`ModelError::Checksum`].
pub fn read_model(mut input: impl Read) -> Result<NetworkModel<f32>, ModelError> {
    let mut bytes = Vec::new();
    input.read_to_end(&mut bytes)?;
    let mut cur = Cursor { bytes: &bytes, pos: 0 };

    if cur.take(4, "magic")? != MAGIC {
        return Err(ModelError::Format {
            offset: 0,
            reason: "bad magic bytes, not a DCNN model file".into(),
        });
    }
    let version = cur.take(1, "version")?[0];
    if version != FORMAT_VERSION {
        return Err(ModelError::Format {
            offset: 4,
            reason: format!("unsupported format version {version}"),
        });
    }
    let header_len = cur.u32("header length")? as usize;
    let header_start = cur.pos;
    let header_bytes = cur.take(header_len, "header")?;
    let header = std::str::from_utf8(header_bytes)
        .map_err(|_| "header is not UTF-8".to_string())
        .and_then(parse_header)
        .map_err(|reason| ModelError::Format {
            offset: header_start as u64,
            reason,
        })?;

    let mut model = NetworkModel::<f32>::build(header.seed, header.kernel_size, header.dropout_rate).map_err(|e| {
        ModelError::Format {
            offset: header_start as u64,
            reason: format!("header describes an unbuildable model: {e}"),
        }
    })?;
    let expected_layers: Vec<LayerKind> = model.shape_table()?.iter().map(|(k, _)| *k).collect();
    if header.layers != expected_layers {
        return Err(ModelError::Format {
            offset: header_start as u64,
            reason: "layer list does not match the supported architecture".into(),
        });
    }
    if let Some(split) = header.split {
        model.set_split(split);
    }

    let weights_start = cur.pos;
    let (params, _) = model.parameters_with_state_mut();
    for (index, param) in params.into_iter().enumerate() {
        let count = cur.u32("tensor element count")? as usize;
        if count != param.len() {
            return Err(cur.err(format!(
                "tensor {index} has {count} elements, architecture needs {}",
                param.len()
            )));
        }
        let blob = cur.take(count * 4, "weight blob")?;
        for (dst, chunk) in param.data_mut().iter_mut().zip(blob.chunks_exact(4)) {
            *dst = f32::from_le_bytes([chunk[0], chunk[1], chunk[2], chunk[3]]);
        }
    }
    let weights_end = cur.pos;
    let stored = cur.u32("checksum")?;
    if cur.pos != bytes.len() {
        return Err(cur.err(format!("{} unexpected trailing bytes", bytes.len() - cur.pos)));
    }
    let computed = crc32fast::hash(&bytes[weights_start..weights_end]);
    if stored != computed {
        return Err(ModelError::Checksum { stored, computed });
    }
    if model.parameters().iter().any(|p| !p.all_finite()) {
        return Err(ModelError::Format {
            offset: weights_start as u64,
            reason: "non-finite weight".into(),
        });
    }
    Ok(model)
}
