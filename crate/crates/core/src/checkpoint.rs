//! Binary checkpoints: named little-endian f64 tensors.
//!
//! Layout: `SIGCKPT1`, a u64 record count, then per record a u64 name
//! length, the UTF-8 name, a u64 rank, `rank` u64 dims and the data.

use std::fs;
use std::path::Path;

use crate::confounders::ConfounderDictionary;
use crate::error::{Result, SigError};
use crate::graph::NodeFeatureMode;
use crate::model::{ModelConfig, SigModel};
use crate::params::ParameterSet;
use crate::tensor::Tensor;

const MAGIC: &[u8; 8] = b"SIGCKPT1";
const DICT: &str = "confounder_dictionary";
const DICT_SIZES: &str = "confounder_sizes";
const MAX_EXACT: u64 = 1 << 53;

/// A model plus what is needed to rebuild its inputs.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub model: SigModel,
    pub node_features: NodeFeatureMode,
}

fn corrupt(msg: impl Into<String>) -> SigError {
    SigError::Checkpoint(msg.into())
}

fn config_records(c: &Checkpoint) -> Result<Vec<(String, f64)>> {
    let m = &c.model;
    let cfg = &m.config;
    let mut out = vec![
        ("hidden", cfg.hidden as f64),
        ("recent_n", cfg.recent_n as f64),
        ("time_dim", cfg.time_dim as f64),
        ("token_expansion", cfg.token_expansion),
        ("channel_expansion", cfg.channel_expansion),
        ("hops", cfg.hops as f64),
        ("k_select", cfg.k_select as f64),
        ("k_confounders", cfg.k_confounders as f64),
        ("edge_dim", m.edge_dim as f64),
        ("node_dim", m.node_dim as f64),
    ];
    if let Some(w) = cfg.window {
        out.push(("window", w));
    }
    match c.node_features {
        NodeFeatureMode::OneHot { cap } => out.push(("one_hot_cap", cap as f64)),
        NodeFeatureMode::Landmarks { count, seed } => {
            if seed >= MAX_EXACT {
                return Err(corrupt(format!(
                    "landmark seed {seed} is too large to store"
                )));
            }
            out.push(("landmark_count", count as f64));
            out.push(("landmark_seed", seed as f64));
        }
        NodeFeatureMode::LeadingOneHot { distinct } => {
            out.push(("leading_one_hot", distinct as f64))
        }
    }
    Ok(out
        .into_iter()
        .map(|(k, v)| (format!("config/{k}"), v))
        .collect())
}

fn put_record(buf: &mut Vec<u8>, name: &str, t: &Tensor) {
    buf.extend_from_slice(&(name.len() as u64).to_le_bytes());
    buf.extend_from_slice(name.as_bytes());
    buf.extend_from_slice(&(t.rank() as u64).to_le_bytes());
    for &d in t.shape() {
        buf.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for &x in t.data() {
        buf.extend_from_slice(&x.to_le_bytes());
    }
}

pub fn to_bytes(c: &Checkpoint) -> Result<Vec<u8>> {
    let mut records: Vec<(String, Tensor)> = c
        .model
        .params
        .iter()
        .map(|(n, t)| (n.to_string(), t.clone()))
        .collect();
    if let Some(d) = &c.model.dictionary {
        records.push((DICT.into(), d.centroids.clone()));
        records.push((
            DICT_SIZES.into(),
            Tensor::vector(d.sizes.iter().map(|&s| s as f64).collect()),
        ));
    }
    for (k, v) in config_records(c)? {
        records.push((k, Tensor::scalar(v)));
    }
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&(records.len() as u64).to_le_bytes());
    for (n, t) in &records {
        put_record(&mut buf, n, t);
    }
    Ok(buf)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| corrupt(format!("truncated at byte {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(
            self.take(8)?.try_into().expect("8 bytes"),
        ))
    }

    fn len(&mut self) -> Result<usize> {
        let v = self.u64()?;
        // every counted item takes at least one byte
        if v > self.buf.len() as u64 {
            return Err(corrupt(format!("implausible length {v}")));
        }
        Ok(v as usize)
    }
}

fn parse_records(buf: &[u8]) -> Result<Vec<(String, Tensor)>> {
    if buf.len() < 8 || &buf[..8] != MAGIC {
        return Err(corrupt("bad magic or version"));
    }
    let mut r = Reader { buf, pos: 8 };
    let count = r.len()?;
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let n = r.len()?;
        let name = String::from_utf8(r.take(n)?.to_vec())
            .map_err(|_| corrupt("record name is not UTF-8"))?;
        let rank = r.len()?;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.len()?);
        }
        let numel = shape
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .ok_or_else(|| corrupt("shape overflow"))?;
        let bytes = r.take(
            numel
                .checked_mul(8)
                .ok_or_else(|| corrupt("shape overflow"))?,
        )?;
        let data = bytes
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes")))
            .collect();
        let t = Tensor::new(shape, data).map_err(|e| corrupt(format!("record `{name}`: {e}")))?;
        out.push((name, t));
    }
    if r.pos != buf.len() {
        return Err(corrupt("trailing bytes"));
    }
    Ok(out)
}

fn as_count(name: &str, v: f64) -> Result<usize> {
    if v >= 0.0 && v.fract() == 0.0 && v < MAX_EXACT as f64 {
        Ok(v as usize)
    } else {
        Err(corrupt(format!("`{name}` = {v} is not a count")))
    }
}

pub fn from_bytes(buf: &[u8]) -> Result<Checkpoint> {
    let mut params = ParameterSet::new();
    let mut config = std::collections::HashMap::new();
    let (mut centroids, mut sizes) = (None, None);
    for (name, t) in parse_records(buf)? {
        if let Some(key) = name.strip_prefix("config/") {
            if t.numel() != 1 {
                return Err(corrupt(format!("config record `{key}` is not a scalar")));
            }
            config.insert(key.to_string(), t.item());
        } else if name == DICT {
            centroids = Some(t);
        } else if name == DICT_SIZES {
            sizes = Some(t);
        } else {
            params
                .insert(&name, t)
                .map_err(|e| corrupt(e.to_string()))?;
        }
    }
    let get = |k: &str| {
        config
            .get(k)
            .copied()
            .ok_or_else(|| corrupt(format!("missing config/{k}")))
    };
    let count = |k: &str| get(k).and_then(|v| as_count(k, v));
    let cfg = ModelConfig {
        hidden: count("hidden")?,
        recent_n: count("recent_n")?,
        time_dim: count("time_dim")?,
        token_expansion: get("token_expansion")?,
        channel_expansion: get("channel_expansion")?,
        hops: count("hops")?,
        window: config.get("window").copied(),
        k_select: count("k_select")?,
        k_confounders: count("k_confounders")?,
    };
    let node_features = if config.contains_key("landmark_count") {
        NodeFeatureMode::Landmarks {
            count: count("landmark_count")?,
            seed: count("landmark_seed")? as u64,
        }
    } else if config.contains_key("leading_one_hot") {
        NodeFeatureMode::LeadingOneHot {
            distinct: count("leading_one_hot")?,
        }
    } else {
        NodeFeatureMode::OneHot {
            cap: count("one_hot_cap")?,
        }
    };
    let dictionary = match (centroids, sizes) {
        (Some(c), Some(s)) => {
            let sizes = s
                .data()
                .iter()
                .map(|&v| as_count(DICT_SIZES, v))
                .collect::<Result<Vec<_>>>()?;
            if c.rank() != 2 || sizes.len() != c.shape()[0] {
                return Err(corrupt("dictionary shape mismatch"));
            }
            Some(ConfounderDictionary {
                centroids: c,
                sizes,
            })
        }
        (None, None) => None,
        _ => return Err(corrupt("dictionary without sizes or vice versa")),
    };
    let model = SigModel::from_parts(
        cfg,
        count("edge_dim")?,
        count("node_dim")?,
        params,
        dictionary,
    )?;
    Ok(Checkpoint {
        model,
        node_features,
    })
}

pub fn checkpoint_save(c: &Checkpoint, path: &Path) -> Result<()> {
    fs::write(path, to_bytes(c)?)?;
    Ok(())
}

pub fn checkpoint_load(path: &Path) -> Result<Checkpoint> {
    from_bytes(&fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample(dict: bool) -> Checkpoint {
        let cfg = ModelConfig {
            hidden: 3,
            recent_n: 4,
            time_dim: 2,
            channel_expansion: 2.0,
            window: Some(7.5),
            k_select: 2,
            k_confounders: 2,
            ..ModelConfig::default()
        };
        let mut model = SigModel::new(cfg, 2, 5, 9).unwrap();
        if dict {
            let w = model.link_width();
            model.dictionary = Some(ConfounderDictionary {
                centroids: Tensor::matrix(2, w, (0..2 * w).map(|i| i as f64 * 0.25).collect())
                    .unwrap(),
                sizes: vec![3, 4],
            });
        }
        Checkpoint {
            model,
            node_features: NodeFeatureMode::Landmarks { count: 5, seed: 11 },
        }
    }

    #[test]
    fn save_load_save_is_byte_identical() {
        for dict in [false, true] {
            let a = to_bytes(&sample(dict)).unwrap();
            let c = from_bytes(&a).unwrap();
            assert_eq!(c.model.config, sample(dict).model.config);
            assert_eq!(
                c.node_features,
                NodeFeatureMode::Landmarks { count: 5, seed: 11 }
            );
            assert_eq!(c.model.dictionary.is_some(), dict);
            assert_eq!(to_bytes(&c).unwrap(), a);
        }
    }

    #[test]
    fn truncation_and_bad_magic_are_errors() {
        let a = to_bytes(&sample(true)).unwrap();
        for cut in [0, 5, 8, 16, a.len() / 2, a.len() - 1] {
            assert!(
                matches!(from_bytes(&a[..cut]), Err(SigError::Checkpoint(_))),
                "cut {cut}"
            );
        }
        let mut b = a.clone();
        b[7] = b'2';
        assert!(matches!(from_bytes(&b), Err(SigError::Checkpoint(_))));
        let mut c = a.clone();
        c.push(0);
        assert!(from_bytes(&c).is_err());
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("model.ckpt");
        checkpoint_save(&sample(true), &p).unwrap();
        let c = checkpoint_load(&p).unwrap();
        assert_eq!(to_bytes(&c).unwrap(), fs::read(&p).unwrap());
        assert!(checkpoint_load(&dir.path().join("missing")).is_err());
    }
}
