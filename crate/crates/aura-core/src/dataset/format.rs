//! On-disk encodings: tensor blobs, checkpoints, and key=value text.
//!
//! Every format is little-endian, versioned, and byte-deterministic so that
//! read(write(x)) == x holds bitwise and identical runs produce identical
//! files. Tensor blobs open with a fixed 16-byte header (magic, version,
//! dtype, rank) followed by one u64 per dimension and the raw payload.
//! Checkpoints wrap a UTF-8 config block and a name-sorted tensor table in
//! the same blob encoding.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use crate::encoders::{EncoderBundle, EncoderKind, EncoderParams, RnnConfig, TransformerConfig};
use crate::signal::ChannelStats;
use crate::tensor::Tensor;
use crate::{Error, Result, Scalar};

pub const BLOB_MAGIC: [u8; 4] = *b"AURA";
pub const CHECKPOINT_MAGIC: [u8; 4] = *b"AURC";
pub const FORMAT_VERSION: u32 = 1;

/// Maximum rank a blob header may declare. Guards against reading absurd
/// dimension counts out of a corrupted file.
const MAX_RANK: u32 = 8;

/// Scalar types that can live in a blob payload. The dtype code is part of
/// the wire format and must never be renumbered.
pub trait BlobScalar: Scalar {
    const DTYPE_CODE: u32;
    const WIDTH: usize;
    fn put_le(self, out: &mut Vec<u8>);
    fn get_le(bytes: &[u8]) -> Self;
}

impl BlobScalar for f32 {
    const DTYPE_CODE: u32 = 0;
    const WIDTH: usize = 4;

    fn put_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    fn get_le(bytes: &[u8]) -> Self {
        f32::from_le_bytes(bytes[..4].try_into().unwrap())
    }
}

impl BlobScalar for f64 {
    const DTYPE_CODE: u32 = 1;
    const WIDTH: usize = 8;

    fn put_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    fn get_le(bytes: &[u8]) -> Self {
        f64::from_le_bytes(bytes[..8].try_into().unwrap())
    }
}

pub fn encode_blob<S: BlobScalar>(t: &Tensor<S>) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + 8 * t.rank() + S::WIDTH * t.len());
    out.extend_from_slice(&BLOB_MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&S::DTYPE_CODE.to_le_bytes());
    out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
    for &d in t.shape() {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for &v in t.data() {
        v.put_le(&mut out);
    }
    out
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a str,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::format(
                self.path,
                format!(
                    "truncated: needed {n} bytes for {what}, had {}",
                    self.bytes.len() - self.pos
                ),
            ));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    fn done(&self) -> Result<()> {
        if self.pos != self.bytes.len() {
            return Err(Error::format(
                self.path,
                format!(
                    "{} trailing bytes after payload",
                    self.bytes.len() - self.pos
                ),
            ));
        }
        Ok(())
    }
}

fn decode_blob_at<S: BlobScalar>(cur: &mut Cursor) -> Result<Tensor<S>> {
    let magic = cur.take(4, "magic")?;
    if magic != BLOB_MAGIC {
        return Err(Error::format(cur.path, format!("bad magic {magic:?}")));
    }
    let version = cur.u32("version")?;
    if version != FORMAT_VERSION {
        return Err(Error::format(
            cur.path,
            format!("unsupported version {version}, expected {FORMAT_VERSION}"),
        ));
    }
    let dtype = cur.u32("dtype")?;
    if dtype != S::DTYPE_CODE {
        return Err(Error::format(
            cur.path,
            format!("dtype code {dtype}, expected {}", S::DTYPE_CODE),
        ));
    }
    let rank = cur.u32("rank")?;
    if rank == 0 || rank > MAX_RANK {
        return Err(Error::format(
            cur.path,
            format!("rank {rank} out of range 1..={MAX_RANK}"),
        ));
    }
    let mut shape = Vec::with_capacity(rank as usize);
    let mut n = 1usize;
    for i in 0..rank {
        let d = cur.u64(&format!("dim {i}"))?;
        let d = usize::try_from(d)
            .map_err(|_| Error::format(cur.path, format!("dimension {d} exceeds platform size")))?;
        n = n
            .checked_mul(d)
            .ok_or_else(|| Error::format(cur.path, "element count overflows".to_string()))?;
        shape.push(d);
    }
    let payload = cur.take(n * S::WIDTH, "payload")?;
    let data: Vec<S> = payload.chunks_exact(S::WIDTH).map(S::get_le).collect();
    Tensor::new(shape, data)
        .map_err(|e| Error::format(cur.path, format!("inconsistent tensor: {e}")))
}

pub fn decode_blob<S: BlobScalar>(bytes: &[u8], origin: &str) -> Result<Tensor<S>> {
    let mut cur = Cursor {
        bytes,
        pos: 0,
        path: origin,
    };
    let t = decode_blob_at(&mut cur)?;
    cur.done()?;
    Ok(t)
}

pub fn write_blob<S: BlobScalar>(path: &Path, t: &Tensor<S>) -> Result<()> {
    fs::write(path, encode_blob(t)).map_err(|e| Error::io(path.display().to_string(), e))
}

pub fn read_blob<S: BlobScalar>(path: &Path) -> Result<Tensor<S>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    decode_blob(&bytes, &path.display().to_string())
}

/// A checkpoint is a config (key=value strings) plus named tensors. Keys and
/// tensor names are stored sorted, so encoding is canonical.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint<S> {
    pub config: BTreeMap<String, String>,
    pub tensors: BTreeMap<String, Tensor<S>>,
}

fn render_config(config: &BTreeMap<String, String>) -> Result<String> {
    let mut out = String::new();
    for (k, v) in config {
        if k.is_empty() || k.contains(['=', '\n']) || v.contains('\n') {
            return Err(Error::Argument(format!(
                "config key/value not encodable: {k:?}={v:?}"
            )));
        }
        out.push_str(k);
        out.push('=');
        out.push_str(v);
        out.push('\n');
    }
    Ok(out)
}

fn parse_config(text: &str, origin: &str) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    for (i, line) in text.lines().enumerate() {
        let (k, v) = line.split_once('=').ok_or_else(|| {
            Error::format(origin, format!("config line {} lacks '=': {line:?}", i + 1))
        })?;
        if out.insert(k.to_string(), v.to_string()).is_some() {
            return Err(Error::format(origin, format!("duplicate config key {k:?}")));
        }
    }
    Ok(out)
}

pub fn encode_checkpoint<S: BlobScalar>(c: &Checkpoint<S>) -> Result<Vec<u8>> {
    let config = render_config(&c.config)?;
    let mut out = Vec::new();
    out.extend_from_slice(&CHECKPOINT_MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(config.len() as u64).to_le_bytes());
    out.extend_from_slice(config.as_bytes());
    out.extend_from_slice(&(c.tensors.len() as u32).to_le_bytes());
    for (name, t) in &c.tensors {
        if name.is_empty() {
            return Err(Error::Argument("tensor name must be nonempty".into()));
        }
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        let blob = encode_blob(t);
        out.extend_from_slice(&(blob.len() as u64).to_le_bytes());
        out.extend_from_slice(&blob);
    }
    Ok(out)
}

pub fn decode_checkpoint<S: BlobScalar>(bytes: &[u8], origin: &str) -> Result<Checkpoint<S>> {
    let mut cur = Cursor {
        bytes,
        pos: 0,
        path: origin,
    };
    let magic = cur.take(4, "magic")?;
    if magic != CHECKPOINT_MAGIC {
        return Err(Error::format(origin, format!("bad magic {magic:?}")));
    }
    let version = cur.u32("version")?;
    if version != FORMAT_VERSION {
        return Err(Error::format(
            origin,
            format!("unsupported version {version}, expected {FORMAT_VERSION}"),
        ));
    }
    let config_len = cur.u64("config length")? as usize;
    let config_bytes = cur.take(config_len, "config block")?;
    let config_text = std::str::from_utf8(config_bytes)
        .map_err(|_| Error::format(origin, "config block is not UTF-8".to_string()))?;
    let config = parse_config(config_text, origin)?;
    let n = cur.u32("tensor count")?;
    let mut tensors = BTreeMap::new();
    for _ in 0..n {
        let name_len = cur.u32("name length")? as usize;
        let name_bytes = cur.take(name_len, "tensor name")?;
        let name = std::str::from_utf8(name_bytes)
            .map_err(|_| Error::format(origin, "tensor name is not UTF-8".to_string()))?
            .to_string();
        let blob_len = cur.u64("blob length")? as usize;
        let blob = cur.take(blob_len, "tensor blob")?;
        let t = decode_blob(blob, origin)?;
        if tensors.insert(name.clone(), t).is_some() {
            return Err(Error::format(origin, format!("duplicate tensor {name:?}")));
        }
    }
    cur.done()?;
    Ok(Checkpoint { config, tensors })
}

pub fn write_checkpoint<S: BlobScalar>(path: &Path, c: &Checkpoint<S>) -> Result<()> {
    fs::write(path, encode_checkpoint(c)?).map_err(|e| Error::io(path.display().to_string(), e))
}

pub fn read_checkpoint<S: BlobScalar>(path: &Path) -> Result<Checkpoint<S>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    decode_checkpoint(&bytes, &path.display().to_string())
}

fn config_get<'a>(
    config: &'a BTreeMap<String, String>,
    key: &str,
    origin: &str,
) -> Result<&'a str> {
    config
        .get(key)
        .map(String::as_str)
        .ok_or_else(|| Error::format(origin, format!("missing config key {key:?}")))
}

fn config_parse<T: std::str::FromStr>(
    config: &BTreeMap<String, String>,
    key: &str,
    origin: &str,
) -> Result<T> {
    let raw = config_get(config, key, origin)?;
    raw.parse().map_err(|_| {
        Error::format(
            origin,
            format!("config key {key:?} has unparseable value {raw:?}"),
        )
    })
}

/// Serializes an encoder bundle. The architecture goes into the config block,
/// parameters and channel statistics into the tensor table.
pub fn bundle_to_checkpoint<S: BlobScalar>(bundle: &EncoderBundle<S>) -> Checkpoint<S> {
    let mut config = BTreeMap::new();
    let p = &bundle.params;
    config.insert("encoder".into(), p.kind.name().into());
    config.insert("input_channels".into(), p.input_channels.to_string());
    config.insert("input_len".into(), p.input_len.to_string());
    match &p.kind {
        EncoderKind::Transformer(c) => {
            config.insert("patch_len".into(), c.patch_len.to_string());
            config.insert("model_dim".into(), c.model_dim.to_string());
            config.insert("heads".into(), c.heads.to_string());
            config.insert("layers".into(), c.layers.to_string());
            config.insert("mlp_dim".into(), c.mlp_dim.to_string());
            config.insert("dropout".into(), c.dropout.to_string());
            config.insert("out_dim".into(), c.out_dim.to_string());
        }
        EncoderKind::Rnn(c) => {
            let chans: Vec<String> = c.conv_channels.iter().map(|v| v.to_string()).collect();
            config.insert("conv_channels".into(), chans.join(","));
            config.insert("kernel".into(), c.kernel.to_string());
            config.insert("stride".into(), c.stride.to_string());
            config.insert("groups".into(), c.groups.to_string());
            config.insert("hidden".into(), c.hidden.to_string());
            config.insert("out_dim".into(), c.out_dim.to_string());
        }
    }
    let mut tensors = p.tensors.clone();
    let c = bundle.stats.channels();
    tensors.insert(
        "stats.mean".into(),
        Tensor::new(vec![c], bundle.stats.mean.clone()).unwrap(),
    );
    tensors.insert(
        "stats.std".into(),
        Tensor::new(vec![c], bundle.stats.std.clone()).unwrap(),
    );
    Checkpoint { config, tensors }
}

/// Rebuilds an encoder bundle, validating the parameter table against a
/// fresh initialization of the declared architecture so that missing,
/// surplus, or misshapen tensors are rejected up front.
pub fn bundle_from_checkpoint<S: BlobScalar>(
    ckpt: &Checkpoint<S>,
    origin: &str,
) -> Result<EncoderBundle<S>> {
    let config = &ckpt.config;
    let input_channels: usize = config_parse(config, "input_channels", origin)?;
    let input_len: usize = config_parse(config, "input_len", origin)?;
    let kind = match config_get(config, "encoder", origin)? {
        "transformer" => EncoderKind::Transformer(TransformerConfig {
            patch_len: config_parse(config, "patch_len", origin)?,
            model_dim: config_parse(config, "model_dim", origin)?,
            heads: config_parse(config, "heads", origin)?,
            layers: config_parse(config, "layers", origin)?,
            mlp_dim: config_parse(config, "mlp_dim", origin)?,
            dropout: config_parse(config, "dropout", origin)?,
            out_dim: config_parse(config, "out_dim", origin)?,
        }),
        "rnn" => {
            let raw = config_get(config, "conv_channels", origin)?;
            let conv_channels: Vec<usize> = raw
                .split(',')
                .map(|s| {
                    s.parse().map_err(|_| {
                        Error::format(origin, format!("bad conv_channels entry {s:?}"))
                    })
                })
                .collect::<Result<_>>()?;
            EncoderKind::Rnn(RnnConfig {
                conv_channels,
                kernel: config_parse(config, "kernel", origin)?,
                stride: config_parse(config, "stride", origin)?,
                groups: config_parse(config, "groups", origin)?,
                hidden: config_parse(config, "hidden", origin)?,
                out_dim: config_parse(config, "out_dim", origin)?,
            })
        }
        other => {
            return Err(Error::format(
                origin,
                format!("unknown encoder kind {other:?}"),
            ))
        }
    };

    let reference: EncoderParams<S> =
        EncoderParams::init(kind.clone(), input_channels, input_len, 0)
            .map_err(|e| Error::format(origin, format!("invalid architecture: {e}")))?;
    let mut tensors = BTreeMap::new();
    for (name, want) in &reference.tensors {
        let got = ckpt
            .tensors
            .get(name)
            .ok_or_else(|| Error::format(origin, format!("missing tensor {name:?}")))?;
        if got.shape() != want.shape() {
            return Err(Error::format(
                origin,
                format!(
                    "tensor {name:?} has shape {:?}, expected {:?}",
                    got.shape(),
                    want.shape()
                ),
            ));
        }
        tensors.insert(name.clone(), got.clone());
    }
    for name in ckpt.tensors.keys() {
        if !reference.tensors.contains_key(name) && !name.starts_with("stats.") {
            return Err(Error::format(origin, format!("unexpected tensor {name:?}")));
        }
    }

    let mean = ckpt
        .tensors
        .get("stats.mean")
        .ok_or_else(|| Error::format(origin, "missing tensor \"stats.mean\"".to_string()))?;
    let std = ckpt
        .tensors
        .get("stats.std")
        .ok_or_else(|| Error::format(origin, "missing tensor \"stats.std\"".to_string()))?;
    if mean.shape() != [input_channels] || std.shape() != [input_channels] {
        return Err(Error::format(
            origin,
            "channel statistics have the wrong shape".to_string(),
        ));
    }
    let stats = ChannelStats {
        mean: mean.data().to_vec(),
        std: std.data().to_vec(),
    };

    let params = EncoderParams {
        kind,
        input_channels,
        input_len,
        tensors,
    };
    EncoderBundle::new(params, stats).map_err(|e| Error::format(origin, e.to_string()))
}

pub fn save_bundle<S: BlobScalar>(path: &Path, bundle: &EncoderBundle<S>) -> Result<()> {
    write_checkpoint(path, &bundle_to_checkpoint(bundle))
}

pub fn load_bundle<S: BlobScalar>(path: &Path) -> Result<EncoderBundle<S>> {
    let ckpt = read_checkpoint(path)?;
    bundle_from_checkpoint(&ckpt, &path.display().to_string())
}

/// Writes sorted key=value lines, one per entry.
pub fn write_kv(path: &Path, entries: &BTreeMap<String, String>) -> Result<()> {
    fs::write(path, render_config(entries)?).map_err(|e| Error::io(path.display().to_string(), e))
}

pub fn read_kv(path: &Path) -> Result<BTreeMap<String, String>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    parse_config(&text, &path.display().to_string())
}
