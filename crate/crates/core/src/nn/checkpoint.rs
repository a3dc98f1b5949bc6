//! Binary checkpoint format:
//!
//! ```text
//! "LSN1" | u32 version | u64 header length | UTF-8 header | f32 blocks
//! ```
//!
//! Integers and floats are little-endian. The header is `key=value` lines
//! for the network configuration and training metadata, followed by one
//! `block <name> <d0,d1,...>` line per parameter block in payload order.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use super::{Network, NetworkConfig};
use crate::error::{Error, Result};
use crate::rng::RngState;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"LSN1";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Eq, Default)]
pub struct TrainingMeta {
    /// Completed epochs.
    pub epoch: u64,
    pub seed: u64,
    pub input_width: usize,
    pub input_height: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelCheckpoint {
    pub network: Network<f32>,
    pub meta: TrainingMeta,
}

fn header(ckpt: &ModelCheckpoint) -> String {
    let cfg = ckpt.network.config();
    let list = |v: &[usize]| v.iter().map(ToString::to_string).collect::<Vec<_>>().join(",");
    let mut h = String::new();
    let _ = writeln!(h, "in_channels={}", cfg.in_channels);
    let _ = writeln!(h, "stage_channels={}", list(&cfg.stage_channels));
    let _ = writeln!(h, "bottleneck_channels={}", cfg.bottleneck_channels);
    let _ = writeln!(h, "dropout_prob={:?}", cfg.dropout_prob);
    let _ = writeln!(h, "skip_connections={}", cfg.skip_connections);
    let _ = writeln!(h, "bn_epsilon={:?}", cfg.bn_epsilon);
    let _ = writeln!(h, "bn_momentum={:?}", cfg.bn_momentum);
    let _ = writeln!(h, "epoch={}", ckpt.meta.epoch);
    let _ = writeln!(h, "seed={}", ckpt.meta.seed);
    let _ = writeln!(h, "input_width={}", ckpt.meta.input_width);
    let _ = writeln!(h, "input_height={}", ckpt.meta.input_height);
    for p in ckpt.network.all_params() {
        let _ = writeln!(h, "block {} {}", p.name, list(&p.shape));
    }
    h
}

pub fn encode_checkpoint(ckpt: &ModelCheckpoint) -> Vec<u8> {
    let header = header(ckpt);
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(header.as_bytes());
    for p in ckpt.network.all_params() {
        for v in p.values {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn save_checkpoint(ckpt: &ModelCheckpoint, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_checkpoint(ckpt)).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<ModelCheckpoint> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes)
}

fn bad(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

struct Fields<'a> {
    lines: Vec<(&'a str, &'a str)>,
    next: usize,
}

impl<'a> Fields<'a> {
    fn take(&mut self, key: &str) -> Result<&'a str> {
        match self.lines.get(self.next) {
            Some(&(k, v)) if k == key => {
                self.next += 1;
                Ok(v)
            }
            Some(&(k, _)) => Err(bad(format!("expected header key {key:?}, found {k:?}"))),
            None => Err(bad(format!("header is missing {key:?}"))),
        }
    }

    fn parse<T: std::str::FromStr>(&mut self, key: &str) -> Result<T> {
        let v = self.take(key)?;
        v.parse().map_err(|_| bad(format!("invalid value {v:?} for {key}")))
    }
}

fn parse_list(v: &str) -> Result<Vec<usize>> {
    v.split(',')
        .map(|s| s.parse().map_err(|_| bad(format!("invalid dimension list {v:?}"))))
        .collect()
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<ModelCheckpoint> {
    if bytes.len() < 16 {
        return Err(bad("file too short"));
    }
    if &bytes[..4] != CHECKPOINT_MAGIC {
        return Err(bad("bad magic"));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
    if version != CHECKPOINT_VERSION {
        return Err(bad(format!(
            "unsupported version {version} (expected {CHECKPOINT_VERSION})"
        )));
    }
    let header_len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes"));
    let header_end = 16usize
        .checked_add(usize::try_from(header_len).map_err(|_| bad("header length overflow"))?)
        .filter(|&end| end <= bytes.len())
        .ok_or_else(|| bad("truncated header"))?;
    let header =
        std::str::from_utf8(&bytes[16..header_end]).map_err(|_| bad("header is not UTF-8"))?;

    let mut kv = Vec::new();
    let mut blocks = Vec::new();
    for line in header.lines() {
        if let Some(rest) = line.strip_prefix("block ") {
            let (name, dims) = rest
                .split_once(' ')
                .ok_or_else(|| bad(format!("malformed block line {line:?}")))?;
            blocks.push((name, parse_list(dims)?));
        } else if !blocks.is_empty() {
            return Err(bad(format!("unexpected line after blocks: {line:?}")));
        } else {
            kv.push(
                line.split_once('=')
                    .ok_or_else(|| bad(format!("malformed header line {line:?}")))?,
            );
        }
    }
    let mut f = Fields { lines: kv, next: 0 };
    let config = NetworkConfig {
        in_channels: f.parse("in_channels")?,
        stage_channels: parse_list(f.take("stage_channels")?)?,
        bottleneck_channels: f.parse("bottleneck_channels")?,
        dropout_prob: f.parse("dropout_prob")?,
        skip_connections: f.parse("skip_connections")?,
        bn_epsilon: f.parse("bn_epsilon")?,
        bn_momentum: f.parse("bn_momentum")?,
    };
    let meta = TrainingMeta {
        epoch: f.parse("epoch")?,
        seed: f.parse("seed")?,
        input_width: f.parse("input_width")?,
        input_height: f.parse("input_height")?,
    };
    if f.next != f.lines.len() {
        return Err(bad(format!("unknown header key {:?}", f.lines[f.next].0)));
    }

    let mut network = Network::<f32>::new(config, &mut RngState::new(0))
        .map_err(|e| bad(format!("invalid configuration: {e}")))?;
    {
        let expected = network.all_params();
        if expected.len() != blocks.len() {
            return Err(bad(format!(
                "configuration implies {} blocks, header lists {}",
                expected.len(),
                blocks.len()
            )));
        }
        for (want, (name, shape)) in expected.iter().zip(&blocks) {
            if want.name != *name || want.shape != *shape {
                return Err(bad(format!(
                    "block {name} {shape:?} inconsistent with configuration (expected {} {:?})",
                    want.name, want.shape
                )));
            }
        }
    }
    let payload = &bytes[header_end..];
    let total: usize = blocks.iter().map(|(_, s)| s.iter().product::<usize>()).sum();
    if payload.len() != total * 4 {
        return Err(bad(format!(
            "payload holds {} bytes, blocks need {}",
            payload.len(),
            total * 4
        )));
    }
    let mut values = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")));
    for dst in network.all_params_mut() {
        for v in dst.iter_mut() {
            *v = values.next().expect("length checked");
        }
    }
    Ok(ModelCheckpoint { network, meta })
}
