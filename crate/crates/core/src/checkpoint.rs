//! Checkpoint files: a plain-text header followed by a little-endian `f64`
//! payload holding every parameter array in header order.
//!
//! ```text
//! protosolo-checkpoint
//! format_version = 1
//! [model]
//! classes = 4
//! ...
//! [training]
//! seed = 0
//! ...
//! [arrays]
//! backbone.0.weight = 16,3,2,2
//! ...
//! payload_bytes = 123456
//! END
//! <payload>
//! ```

use std::path::Path;

use crate::config::{model_from_lines, model_lines, parse_lines};
use crate::error::{Error, Result};
use crate::losses::LossBreakdown;
use crate::model::{Model, Params};
use crate::tensor::Tensor;

pub const MAGIC: &str = "protosolo-checkpoint";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainingMeta {
    pub seed: u64,
    pub epochs_completed: usize,
    pub final_losses: LossBreakdown,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: Model,
    pub meta: TrainingMeta,
}

fn bad(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

impl Checkpoint {
    pub fn new(model: Model, meta: TrainingMeta) -> Self {
        Checkpoint { model, meta }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut head = format!("{MAGIC}\nformat_version = {FORMAT_VERSION}\n[model]\n");
        for (k, v) in model_lines(&self.model.config) {
            head.push_str(&format!("{k} = {v}\n"));
        }
        let l = &self.meta.final_losses;
        head.push_str("[training]\n");
        head.push_str(&format!("seed = {}\n", self.meta.seed));
        head.push_str(&format!("epochs_completed = {}\n", self.meta.epochs_completed));
        for (name, v) in l.terms() {
            head.push_str(&format!("{name} = {v:?}\n"));
        }
        head.push_str("[arrays]\n");
        let named = self.model.params.named();
        let mut payload = Vec::new();
        for (name, t) in &named {
            let dims: Vec<String> = t.shape().iter().map(|d| d.to_string()).collect();
            head.push_str(&format!("{name} = {}\n", dims.join(",")));
            for v in t.data() {
                payload.extend_from_slice(&v.to_le_bytes());
            }
        }
        head.push_str(&format!("payload_bytes = {}\nEND\n", payload.len()));
        let mut out = head.into_bytes();
        out.extend_from_slice(&payload);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let end = find_header_end(bytes)?;
        let head = std::str::from_utf8(&bytes[..end]).map_err(|_| bad("header is not valid UTF-8"))?;
        let payload = &bytes[end..];

        let mut lines = head.lines();
        if lines.next() != Some(MAGIC) {
            return Err(bad("wrong magic: not a protosolo checkpoint"));
        }
        let version_line = lines.next().ok_or_else(|| bad("missing format_version"))?;
        let version: u32 = version_line
            .strip_prefix("format_version = ")
            .and_then(|v| v.trim().parse().ok())
            .ok_or_else(|| bad(format!("malformed version line '{version_line}'")))?;
        if version != FORMAT_VERSION {
            return Err(bad(format!("unsupported format version {version} (expected {FORMAT_VERSION})")));
        }

        let mut section = "";
        let mut blocks: [Vec<&str>; 3] = Default::default();
        let mut payload_bytes = None;
        for line in lines {
            match line {
                "[model]" | "[training]" | "[arrays]" => section = line,
                "END" => break,
                _ if line.starts_with("payload_bytes = ") => {
                    payload_bytes = line["payload_bytes = ".len()..].parse::<usize>().ok();
                }
                _ => match section {
                    "[model]" => blocks[0].push(line),
                    "[training]" => blocks[1].push(line),
                    "[arrays]" => blocks[2].push(line),
                    _ => return Err(bad(format!("unexpected header line '{line}'"))),
                },
            }
        }
        let payload_bytes = payload_bytes.ok_or_else(|| bad("missing payload_bytes"))?;
        if payload.len() != payload_bytes {
            return Err(bad(format!(
                "payload is {} bytes but the header declares {payload_bytes} (file truncated or padded)",
                payload.len()
            )));
        }

        let config = model_from_lines(&parse_lines(&blocks[0].join("\n"))?)?;
        let meta = parse_meta(&parse_lines(&blocks[1].join("\n"))?)?;

        let mut arrays = Vec::new();
        let mut offset = 0;
        for (name, dims) in parse_lines(&blocks[2].join("\n"))? {
            let shape: Vec<usize> = dims
                .split(',')
                .map(|d| d.trim().parse())
                .collect::<std::result::Result<_, _>>()
                .map_err(|_| bad(format!("malformed shape '{dims}' for array {name}")))?;
            let n: usize = shape.iter().product();
            let stop = offset + n * 8;
            if stop > payload.len() {
                return Err(bad(format!("array {name} runs past the end of the payload")));
            }
            let data = payload[offset..stop]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                .collect();
            offset = stop;
            arrays.push((name, Tensor::new(shape, data)?));
        }
        if offset != payload.len() {
            return Err(bad("payload has trailing bytes not covered by any array"));
        }
        let params = Params::from_named(&config, arrays).map_err(|e| bad(e.to_string()))?;
        Ok(Checkpoint {
            model: Model { config, params },
            meta,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

fn find_header_end(bytes: &[u8]) -> Result<usize> {
    if !bytes.starts_with(MAGIC.as_bytes()) {
        return Err(bad("wrong magic: not a protosolo checkpoint"));
    }
    const MARK: &[u8] = b"\nEND\n";
    bytes
        .windows(MARK.len())
        .position(|w| w == MARK)
        .map(|p| p + MARK.len())
        .ok_or_else(|| bad("header terminator not found (file truncated?)"))
}

fn parse_meta(lines: &[(String, String)]) -> Result<TrainingMeta> {
    let get = |key: &str| -> Result<&str> {
        lines
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
            .ok_or_else(|| bad(format!("training block is missing '{key}'")))
    };
    let num = |key: &str| -> Result<f64> {
        get(key)?.parse().map_err(|_| bad(format!("malformed value for '{key}'")))
    };
    Ok(TrainingMeta {
        seed: get("seed")?.parse().map_err(|_| bad("malformed seed"))?,
        epochs_completed: get("epochs_completed")?
            .parse()
            .map_err(|_| bad("malformed epochs_completed"))?,
        final_losses: LossBreakdown {
            crs: num("L_crs")?,
            clst: num("L_clst")?,
            sep: num("L_sep")?,
            w: num("L_w")?,
            total: num("L_total")?,
        },
    })
}

/// Load a checkpoint and insist its model block matches `expected`, naming
/// the first differing field.
pub fn check_compatible(model: &crate::model::ModelConfig, expected: &crate::model::ModelConfig) -> Result<()> {
    for ((k, a), (_, b)) in model_lines(model).into_iter().zip(model_lines(expected)) {
        if a != b {
            return Err(bad(format!("field '{k}' is {a} in the checkpoint but {b} in the configuration")));
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;

    fn small() -> Checkpoint {
        let cfg = ModelConfig {
            num_classes: 3,
            prototypes_per_class: 2,
            feature_channels: 4,
            feature_height: 2,
            feature_width: 2,
            image_size: 32,
            backbone_channels: vec![4, 4, 4, 4],
            ..ModelConfig::default()
        };
        let meta = TrainingMeta {
            seed: 7,
            epochs_completed: 12,
            final_losses: LossBreakdown { crs: 0.1, clst: 1.0 / 3.0, sep: -2.5, w: 0.0, total: f64::NAN },
        };
        Checkpoint::new(Model::new(cfg, 7).unwrap(), meta)
    }

    #[test]
    fn round_trip_is_lossless_and_byte_identical() {
        let ck = small();
        let bytes = ck.to_bytes();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back.model, ck.model);
        assert_eq!(back.meta.seed, 7);
        assert!(back.meta.final_losses.total.is_nan());
        assert_eq!(back.meta.final_losses.clst, 1.0 / 3.0);
        assert_eq!(back.to_bytes(), bytes);
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let ck = small();
        ck.save(&path).unwrap();
        assert_eq!(Checkpoint::load(&path).unwrap().model, ck.model);
        assert!(Checkpoint::load(&dir.path().join("missing.ckpt")).is_err());
    }

    #[test]
    fn truncation_and_padding_are_rejected() {
        let bytes = small().to_bytes();
        for cut in [1, 8, bytes.len() / 2, bytes.len() - 1] {
            assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - cut]).is_err(), "cut {cut}");
        }
        let mut padded = bytes.clone();
        padded.push(0);
        assert!(Checkpoint::from_bytes(&padded).is_err());
    }

    #[test]
    fn wrong_magic_and_version_are_rejected() {
        let bytes = small().to_bytes();
        let mut wrong = bytes.clone();
        wrong[0] = b'X';
        assert!(Checkpoint::from_bytes(&wrong).unwrap_err().to_string().contains("magic"));
        let head_end = find_header_end(&bytes).unwrap();
        let head = std::str::from_utf8(&bytes[..head_end]).unwrap();
        let mut v9 = head.replacen("format_version = 1", "format_version = 9", 1).into_bytes();
        v9.extend_from_slice(&bytes[head_end..]);
        assert!(Checkpoint::from_bytes(&v9).unwrap_err().to_string().contains("version 9"));
    }

    #[test]
    fn shape_mismatch_names_the_array() {
        let bytes = small().to_bytes();
        let head_end = find_header_end(&bytes).unwrap();
        let head = std::str::from_utf8(&bytes[..head_end]).unwrap();
        // declare a different prototype count while keeping the payload intact
        let edited = head.replacen("prototypes = 2\n", "prototypes = 3\n", 1);
        let mut b = edited.into_bytes();
        b.extend_from_slice(&bytes[head_end..]);
        let msg = Checkpoint::from_bytes(&b).unwrap_err().to_string();
        assert!(msg.contains("prototypes") || msg.contains("fc"), "{msg}");
    }

    #[test]
    fn compatibility_check_names_the_field() {
        let a = small().model.config;
        let b = ModelConfig { prototypes_per_class: 5, ..a.clone() };
        let msg = check_compatible(&a, &b).unwrap_err().to_string();
        assert!(msg.contains("'prototypes'"), "{msg}");
        check_compatible(&a, &a).unwrap();
    }
}
