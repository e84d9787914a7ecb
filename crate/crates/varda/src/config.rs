//! Plain-text `key = value` configuration, the binary checkpoint format, and
//! the per-run manifest.
//!
//! Checkpoint layout (all integers little-endian):
//!
//! ```text
//! magic    "VCKP"                      4 bytes
//! version  u32                         currently 1
//! m_len    u32                         manifest byte length
//! manifest key=value lines, UTF-8      network shape, iter, adam_t, run_id
//! count    u32                         record count
//! record   name_len: u16, name: UTF-8, role: u8, tensor: vten bytes
//! ```
//!
//! Role 0 records are optimizer moments (`adam.m.<param>` / `adam.v.<param>`);
//! roles 1..=5 are network parameters. Checkpoints and config files are
//! untrusted input: every length is validated against the remaining bytes
//! before allocation, and unknown keys, duplicate names, or trailing bytes
//! are errors, not warnings.

use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::nets::{NetConfig, NetError, ParameterSet, Role};
use crate::optim::AdamState;
use crate::tensor::vten;
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"VCKP";
pub const CHECKPOINT_VERSION: u32 = 1;
/// Caps for untrusted checkpoint headers, far above anything we write.
const MAX_MANIFEST_BYTES: usize = 1 << 20;
const MAX_RECORDS: usize = 10_000;
const MAX_NAME_BYTES: usize = 256;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("line {line}: {msg}")]
    Line { line: usize, msg: String },
    #[error("line {line}: duplicate key {key:?}")]
    DuplicateKey { line: usize, key: String },
    #[error("line {line}: unknown key {key:?}")]
    UnknownKey { line: usize, key: String },
    #[error("line {line}: bad value for {key:?}: {msg}")]
    BadValue { line: usize, key: String, msg: String },
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("not a checkpoint: bad magic")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    BadVersion(u32),
    #[error("checkpoint truncated: need {need} more bytes at offset {offset}")]
    Truncated { offset: usize, need: usize },
    #[error("checkpoint field {field}: {msg}")]
    Field { field: String, msg: String },
    #[error("checkpoint declares absurd {what} ({got})")]
    Absurd { what: &'static str, got: usize },
    #[error("duplicate record {0:?}")]
    DuplicateRecord(String),
    #[error("unknown role code {code} on record {name:?}")]
    UnknownRole { name: String, code: u8 },
    #[error("{extra} trailing bytes after the last record")]
    TrailingBytes { extra: usize },
    #[error("checkpoint disagrees with the request: {field} is {checkpoint} in the checkpoint, {requested} requested")]
    Conflict { field: String, checkpoint: String, requested: String },
    #[error("optimizer moment {name:?} has no matching parameter or wrong size")]
    OrphanMoment { name: String },
    #[error("manifest: {0}")]
    Manifest(#[from] ConfigError),
    #[error("record tensor: {0}")]
    Tensor(#[from] vten::FormatError),
    #[error(transparent)]
    TensorCore(#[from] crate::tensor::TensorError),
    #[error(transparent)]
    Net(#[from] NetError),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// One parsed `key = value` line (line number kept for error reporting).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct KvEntry {
    pub line: usize,
    pub key: String,
    pub value: String,
}

/// Parses `key = value` text: `#` comments and blank lines are skipped, keys
/// are `[a-z0-9_]+`, duplicates are rejected. Values keep interior spaces.
pub fn parse_kv(text: &str) -> Result<Vec<KvEntry>, ConfigError> {
    let mut entries: Vec<KvEntry> = Vec::new();
    for (idx, raw) in text.lines().enumerate() {
        let line = idx + 1;
        let trimmed = raw.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let Some((key, value)) = trimmed.split_once('=') else {
            return Err(ConfigError::Line { line, msg: format!("expected `key = value`, got {trimmed:?}") });
        };
        let key = key.trim();
        let value = value.trim();
        if key.is_empty() || !key.bytes().all(|b| b.is_ascii_lowercase() || b.is_ascii_digit() || b == b'_') {
            return Err(ConfigError::Line { line, msg: format!("invalid key {key:?}") });
        }
        if value.is_empty() {
            return Err(ConfigError::Line { line, msg: format!("empty value for {key:?}") });
        }
        if entries.iter().any(|e| e.key == key) {
            return Err(ConfigError::DuplicateKey { line, key: key.to_string() });
        }
        entries.push(KvEntry { line, key: key.to_string(), value: value.to_string() });
    }
    Ok(entries)
}

pub fn parse_value<T: std::str::FromStr>(entry: &KvEntry) -> Result<T, ConfigError>
where
    T::Err: std::fmt::Display,
{
    entry.value.parse().map_err(|e: T::Err| ConfigError::BadValue {
        line: entry.line,
        key: entry.key.clone(),
        msg: e.to_string(),
    })
}

pub fn parse_bool(entry: &KvEntry) -> Result<bool, ConfigError> {
    match entry.value.as_str() {
        "1" | "true" => Ok(true),
        "0" | "false" => Ok(false),
        other => Err(ConfigError::BadValue {
            line: entry.line,
            key: entry.key.clone(),
            msg: format!("expected a boolean (0/1/true/false), got {other:?}"),
        }),
    }
}

/// Everything a checkpoint stores besides tensors.
#[derive(Debug, Clone, PartialEq)]
pub struct CheckpointMeta {
    pub net: NetConfig,
    /// Iterations completed when the checkpoint was written.
    pub iter: u64,
    /// Adam timestep. On encode this is taken from the optimizer state
    /// when one is stored; the field matters on decode.
    pub adam_t: u64,
    pub run_id: String,
}

fn manifest_text(meta: &CheckpointMeta, adam_t: u64) -> String {
    let n = &meta.net;
    // An unset run id serializes as "-"; the kv grammar has no empty values.
    let run_id = if meta.run_id.is_empty() { "-" } else { &meta.run_id };
    format!(
        "image_hw = {}\nin_channels = {}\nnum_classes = {}\nlatent_dim = {}\n\
         decoder_convs = {}\nlabel_conditioned = {}\nenc_width = {}\nseg_width = {}\n\
         dec_width = {}\niter = {}\nadam_t = {}\nrun_id = {}\n",
        n.image_hw,
        n.in_channels,
        n.num_classes,
        n.latent_dim,
        n.decoder_convs,
        u8::from(n.label_conditioned),
        n.enc_width,
        n.seg_width,
        n.dec_width,
        meta.iter,
        adam_t,
        run_id,
    )
}

fn parse_manifest_meta(text: &str) -> Result<CheckpointMeta, CheckpointError> {
    let entries = parse_kv(text)?;
    let get = |key: &str| -> Result<&KvEntry, CheckpointError> {
        entries
            .iter()
            .find(|e| e.key == key)
            .ok_or_else(|| CheckpointError::Field { field: key.to_string(), msg: "missing".into() })
    };
    let num = |key: &str| -> Result<usize, CheckpointError> {
        let e = get(key)?;
        parse_value::<usize>(e).map_err(CheckpointError::Manifest)
    };
    let net = NetConfig {
        image_hw: num("image_hw")?,
        in_channels: num("in_channels")?,
        num_classes: num("num_classes")?,
        latent_dim: num("latent_dim")?,
        decoder_convs: num("decoder_convs")?,
        label_conditioned: parse_bool(get("label_conditioned")?).map_err(CheckpointError::Manifest)?,
        enc_width: num("enc_width")?,
        seg_width: num("seg_width")?,
        dec_width: num("dec_width")?,
    };
    Ok(CheckpointMeta {
        net,
        iter: num("iter")? as u64,
        adam_t: num("adam_t")? as u64,
        run_id: match get("run_id")?.value.as_str() {
            "-" => String::new(),
            v => v.to_string(),
        },
    })
}

fn push_record(out: &mut Vec<u8>, name: &str, role: u8, tensor: &Tensor) {
    debug_assert!(name.len() <= MAX_NAME_BYTES);
    out.extend_from_slice(&(name.len() as u16).to_le_bytes());
    out.extend_from_slice(name.as_bytes());
    out.push(role);
    out.extend_from_slice(&vten::encode(tensor));
}

/// Serializes parameters (and optionally optimizer moments) with `meta`.
pub fn encode_checkpoint(
    meta: &CheckpointMeta,
    params: &ParameterSet,
    adam: Option<&AdamState>,
) -> Vec<u8> {
    let adam_t = adam.map_or(meta.adam_t, |a| a.step_count());
    let manifest = manifest_text(meta, adam_t);
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(manifest.len() as u32).to_le_bytes());
    out.extend_from_slice(manifest.as_bytes());

    let adam_parts = adam.map(|a| a.to_parts());
    let n_records = params.len() + adam_parts.as_ref().map_or(0, |(_, p)| 2 * p.len());
    out.extend_from_slice(&(n_records as u32).to_le_bytes());
    for (name, role, tensor) in params.iter() {
        push_record(&mut out, name, role.code(), tensor);
    }
    if let Some((_, parts)) = &adam_parts {
        for (name, m, v) in parts {
            let shape = params.get(name).expect("moments track params").shape().to_vec();
            let mt = Tensor::from_vec(&shape, m.clone()).expect("moment matches shape");
            let vt = Tensor::from_vec(&shape, v.clone()).expect("moment matches shape");
            push_record(&mut out, &format!("adam.m.{name}"), 0, &mt);
            push_record(&mut out, &format!("adam.v.{name}"), 0, &vt);
        }
    }
    out
}

struct Cursor<'a> {
    bytes: &'a [u8],
    offset: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        let rest = self.bytes.len() - self.offset;
        if rest < n {
            return Err(CheckpointError::Truncated { offset: self.offset, need: n - rest });
        }
        let slice = &self.bytes[self.offset..self.offset + n];
        self.offset += n;
        Ok(slice)
    }

    fn u16(&mut self) -> Result<u16, CheckpointError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("len checked")))
    }

    fn u32(&mut self) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("len checked")))
    }
}

/// Decoded checkpoint: metadata, parameters, and (when stored) Adam moments.
#[derive(Debug)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub params: ParameterSet,
    pub adam: Option<AdamState>,
}

/// Parses untrusted checkpoint bytes. Every header length is bounded and
/// checked against the remaining input before any allocation.
pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint, CheckpointError> {
    let mut cur = Cursor { bytes, offset: 0 };
    if cur.take(4)? != CHECKPOINT_MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let version = cur.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(CheckpointError::BadVersion(version));
    }
    let m_len = cur.u32()? as usize;
    if m_len > MAX_MANIFEST_BYTES {
        return Err(CheckpointError::Absurd { what: "manifest length", got: m_len });
    }
    let manifest = std::str::from_utf8(cur.take(m_len)?)
        .map_err(|e| CheckpointError::Field { field: "manifest".into(), msg: e.to_string() })?;
    let meta = parse_manifest_meta(manifest)?;

    let count = cur.u32()? as usize;
    if count > MAX_RECORDS {
        return Err(CheckpointError::Absurd { what: "record count", got: count });
    }
    let mut params = ParameterSet::new();
    let mut moments: Vec<(String, Tensor)> = Vec::new();
    for _ in 0..count {
        let name_len = cur.u16()? as usize;
        if name_len > MAX_NAME_BYTES {
            return Err(CheckpointError::Absurd { what: "record name length", got: name_len });
        }
        let name = std::str::from_utf8(cur.take(name_len)?)
            .map_err(|e| CheckpointError::Field { field: "record name".into(), msg: e.to_string() })?
            .to_string();
        let role_code = cur.take(1)?[0];
        let (tensor, used) = vten::decode_prefix(&cur.bytes[cur.offset..])?;
        cur.offset += used;
        if role_code == 0 {
            if moments.iter().any(|(n, _)| *n == name) {
                return Err(CheckpointError::DuplicateRecord(name));
            }
            moments.push((name, tensor));
        } else {
            let role = Role::from_code(role_code)
                .ok_or_else(|| CheckpointError::UnknownRole { name: name.clone(), code: role_code })?;
            let param = Tensor::param(tensor.shape(), tensor.to_vec())?;
            params.insert(&name, role, param).map_err(|_| CheckpointError::DuplicateRecord(name))?;
        }
    }
    if cur.offset != bytes.len() {
        return Err(CheckpointError::TrailingBytes { extra: bytes.len() - cur.offset });
    }

    let adam = if moments.is_empty() {
        None
    } else {
        let mut parts: Vec<(String, Vec<crate::Real>, Vec<crate::Real>)> = Vec::new();
        for (name, _, tensor) in params.iter() {
            let find = |prefix: &str| -> Result<Vec<crate::Real>, CheckpointError> {
                let key = format!("{prefix}{name}");
                let t = moments
                    .iter()
                    .find(|(n, _)| *n == key)
                    .map(|(_, t)| t)
                    .ok_or_else(|| CheckpointError::OrphanMoment { name: key.clone() })?;
                if t.numel() != tensor.numel() {
                    return Err(CheckpointError::OrphanMoment { name: key });
                }
                Ok(t.to_vec())
            };
            parts.push((name.to_string(), find("adam.m.")?, find("adam.v.")?));
        }
        if moments.len() != 2 * params.len() {
            // A moment record that matched no parameter.
            let extra = moments
                .iter()
                .find(|(n, _)| {
                    let suffix = n.strip_prefix("adam.m.").or_else(|| n.strip_prefix("adam.v."));
                    suffix.map_or(true, |s| params.get(s).is_err())
                })
                .map(|(n, _)| n.clone())
                .unwrap_or_default();
            return Err(CheckpointError::OrphanMoment { name: extra });
        }
        Some(AdamState::from_parts(meta.adam_t, parts))
    };
    Ok(Checkpoint { meta, params, adam })
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CheckpointError + '_ {
    move |source| CheckpointError::Io { path: path.display().to_string(), source }
}

/// Atomic write: the bytes land under a temporary name and are renamed into
/// place, so a crash never leaves a half-written checkpoint at `path`.
pub fn write_checkpoint(
    path: &Path,
    meta: &CheckpointMeta,
    params: &ParameterSet,
    adam: Option<&AdamState>,
) -> Result<(), CheckpointError> {
    let bytes = encode_checkpoint(meta, params, adam);
    let tmp = path.with_extension("vckp.tmp");
    fs::write(&tmp, &bytes).map_err(io_err(&tmp))?;
    fs::rename(&tmp, path).map_err(io_err(path))?;
    Ok(())
}

pub fn read_checkpoint(path: &Path) -> Result<Checkpoint, CheckpointError> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    decode_checkpoint(&bytes)
}

/// Errors if a checkpoint's network shape differs from the requested one.
pub fn require_same_net(checkpoint: &NetConfig, requested: &NetConfig) -> Result<(), CheckpointError> {
    let fields = [
        ("image_hw", checkpoint.image_hw, requested.image_hw),
        ("in_channels", checkpoint.in_channels, requested.in_channels),
        ("num_classes", checkpoint.num_classes, requested.num_classes),
        ("latent_dim", checkpoint.latent_dim, requested.latent_dim),
        ("decoder_convs", checkpoint.decoder_convs, requested.decoder_convs),
        ("enc_width", checkpoint.enc_width, requested.enc_width),
        ("seg_width", checkpoint.seg_width, requested.seg_width),
        ("dec_width", checkpoint.dec_width, requested.dec_width),
    ];
    for (field, a, b) in fields {
        if a != b {
            return Err(CheckpointError::Conflict {
                field: field.into(),
                checkpoint: a.to_string(),
                requested: b.to_string(),
            });
        }
    }
    if checkpoint.label_conditioned != requested.label_conditioned {
        return Err(CheckpointError::Conflict {
            field: "label_conditioned".into(),
            checkpoint: checkpoint.label_conditioned.to_string(),
            requested: requested.label_conditioned.to_string(),
        });
    }
    Ok(())
}

/// SHA-256 over a dataset directory: the manifest bytes, then every
/// referenced tensor file in manifest order. Identifies the exact inputs a
/// run saw.
pub fn dataset_content_sha(dir: &Path) -> Result<String, crate::data::DataError> {
    let manifest_path = dir.join("manifest.txt");
    let text = fs::read_to_string(&manifest_path).map_err(|source| crate::data::DataError::Io {
        path: manifest_path.display().to_string(),
        source,
    })?;
    let records = crate::data::parse_manifest(&text)?;
    let mut hasher = Sha256::new();
    hasher.update(text.as_bytes());
    for rec in records {
        let mut paths = vec![dir.join(format!("{}_img.vten", rec.id))];
        if rec.has_label {
            paths.push(dir.join(format!("{}_lbl.vten", rec.id)));
        }
        for path in paths {
            let bytes = fs::read(&path).map_err(|source| crate::data::DataError::Io {
                path: path.display().to_string(),
                source,
            })?;
            hasher.update(&bytes);
        }
    }
    Ok(hex(&hasher.finalize()))
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Deterministic run id: 12 hex chars of SHA-256 over the resolved
/// configuration and the dataset hash. Reruns of the same inputs share an id.
pub fn run_id(resolved_config: &str, dataset_sha: &str) -> String {
    let mut hasher = Sha256::new();
    hasher.update(resolved_config.as_bytes());
    hasher.update(dataset_sha.as_bytes());
    hex(&hasher.finalize())[..12].to_string()
}

/// Run provenance, written once at run start.
#[derive(Debug, Clone)]
pub struct RunManifest {
    pub id: String,
    pub command: String,
    pub dataset_sha: String,
    /// Fully-resolved configuration, one `key = value` line each.
    pub resolved_config: String,
    pub started_unix: u64,
}

impl RunManifest {
    pub fn to_text(&self) -> String {
        format!(
            "# run manifest\nid = {}\ncommand = {}\ndataset_sha = {}\nversion = {}\nstarted_unix = {}\n\n# resolved configuration\n{}",
            self.id,
            self.command,
            self.dataset_sha,
            env!("CARGO_PKG_VERSION"),
            self.started_unix,
            self.resolved_config,
        )
    }
}

/// Atomic manifest write (temp file + rename), same guarantee as
/// [`write_checkpoint`].
pub fn write_run_manifest(path: &Path, manifest: &RunManifest) -> Result<(), ConfigError> {
    let tmp = path.with_extension("txt.tmp");
    let io = |p: &Path| {
        let p = p.display().to_string();
        move |source| ConfigError::Io { path: p, source }
    };
    fs::write(&tmp, manifest.to_text()).map_err(io(&tmp))?;
    fs::rename(&tmp, path).map_err(io(path))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nets::init_params;

    #[test]
    fn kv_parses_comments_blanks_and_values_with_spaces() {
        let text = "# header\n\nseed = 42\nname = two words\n  lr = 1e-4  \n";
        let entries = parse_kv(text).unwrap();
        assert_eq!(entries.len(), 3);
        assert_eq!(entries[0], KvEntry { line: 3, key: "seed".into(), value: "42".into() });
        assert_eq!(entries[1].value, "two words");
        assert_eq!(entries[2], KvEntry { line: 5, key: "lr".into(), value: "1e-4".into() });
    }

    #[test]
    fn kv_rejects_malformed_lines() {
        assert!(matches!(parse_kv("novalue\n"), Err(ConfigError::Line { line: 1, .. })));
        assert!(matches!(parse_kv("seed =\n"), Err(ConfigError::Line { line: 1, .. })));
        assert!(matches!(parse_kv("BAD = 1\n"), Err(ConfigError::Line { line: 1, .. })));
        assert!(matches!(
            parse_kv("a = 1\na = 2\n"),
            Err(ConfigError::DuplicateKey { line: 2, .. })
        ));
        assert!(matches!(parse_kv("= 1\n"), Err(ConfigError::Line { line: 1, .. })));
    }

    fn small_meta() -> CheckpointMeta {
        let net = NetConfig {
            image_hw: 8,
            latent_dim: 8,
            decoder_convs: 0,
            enc_width: 3,
            seg_width: 3,
            dec_width: 3,
            ..NetConfig::default()
        };
        CheckpointMeta { net, iter: 17, adam_t: 17, run_id: "abc123def456".into() }
    }

    #[test]
    fn checkpoint_roundtrip_with_moments_is_exact() {
        let meta = small_meta();
        let params = init_params(&meta.net, 3).unwrap();
        let mut adam = AdamState::new(&params);
        // Give the moments nonzero content.
        for (name, _, t) in params.iter() {
            t.accumulate_grad(&vec![0.25; t.numel()]);
            let _ = name;
        }
        let names: Vec<&str> = params.iter().map(|(n, _, _)| n).collect();
        crate::optim::adam_step(&params, &names, &mut adam, 1e-3).unwrap();
        let meta = CheckpointMeta { adam_t: adam.step_count(), ..meta };

        let bytes = encode_checkpoint(&meta, &params, Some(&adam));
        let back = decode_checkpoint(&bytes).unwrap();
        assert_eq!(back.meta, meta);
        assert_eq!(back.params.len(), params.len());
        for (name, role, t) in params.iter() {
            let rt = back.params.get(name).unwrap();
            assert_eq!(rt.shape(), t.shape());
            assert_eq!(rt.to_vec(), t.to_vec());
            let (_, brole, _) = back.params.iter().find(|(n, _, _)| *n == name).unwrap();
            assert_eq!(brole, role);
        }
        let (t0, parts0) = adam.to_parts();
        let (t1, parts1) = back.adam.unwrap().to_parts();
        assert_eq!(t0, t1);
        assert_eq!(parts0, parts1);
    }

    #[test]
    fn checkpoint_without_moments_roundtrips() {
        let meta = small_meta();
        let params = init_params(&meta.net, 3).unwrap();
        let bytes = encode_checkpoint(&meta, &params, None);
        let back = decode_checkpoint(&bytes).unwrap();
        assert!(back.adam.is_none());
        assert_eq!(back.meta.iter, 17);
    }

    #[test]
    fn checkpoint_rejects_malformed_bytes() {
        let meta = small_meta();
        let params = init_params(&meta.net, 3).unwrap();
        let good = encode_checkpoint(&meta, &params, None);

        assert!(matches!(decode_checkpoint(b"XX"), Err(CheckpointError::Truncated { .. })));
        assert!(matches!(decode_checkpoint(b"XXXXxxxxxxxx"), Err(CheckpointError::BadMagic)));
        let mut wrong_version = good.clone();
        wrong_version[4] = 9;
        assert!(matches!(decode_checkpoint(&wrong_version), Err(CheckpointError::BadVersion(9))));
        // Cutting into the final tensor record surfaces the tensor format's
        // own truncation error.
        let truncated = &good[..good.len() - 3];
        assert!(matches!(
            decode_checkpoint(truncated),
            Err(CheckpointError::Tensor(vten::FormatError::Truncated { .. }))
        ));
        let mut trailing = good.clone();
        trailing.push(0);
        assert!(matches!(decode_checkpoint(&trailing), Err(CheckpointError::TrailingBytes { extra: 1 })));
        // Record count inflated beyond the data.
        let mut bad_count = good.clone();
        let count_off = 4 + 4 + 4 + {
            let m_len = u32::from_le_bytes(good[8..12].try_into().unwrap()) as usize;
            m_len
        };
        bad_count[count_off] = bad_count[count_off].wrapping_add(1);
        assert!(matches!(decode_checkpoint(&bad_count), Err(CheckpointError::Truncated { .. })));
    }

    #[test]
    fn checkpoint_rejects_orphan_moments() {
        let meta = small_meta();
        let params = init_params(&meta.net, 3).unwrap();
        let adam = AdamState::new(&params);
        let bytes = encode_checkpoint(&meta, &params, Some(&adam));
        // Corrupt one moment record's name so it points at no parameter;
        // the name bytes sit in the serialized stream, so patch them there.
        let needle = b"adam.m.enc_s.conv1.w";
        let pos = bytes.windows(needle.len()).position(|w| w == needle).unwrap();
        let mut bad = bytes.clone();
        bad[pos + needle.len() - 1] = b'z';
        let err = decode_checkpoint(&bad).unwrap_err();
        assert!(matches!(err, CheckpointError::OrphanMoment { .. }), "got {err:?}");
    }

    #[test]
    fn net_conflicts_are_reported_by_field() {
        let a = small_meta().net;
        let mut b = a.clone();
        b.latent_dim = 32;
        let err = require_same_net(&a, &b).unwrap_err();
        assert!(matches!(err, CheckpointError::Conflict { field, .. } if field == "latent_dim"));
        assert!(require_same_net(&a, &a.clone()).is_ok());
    }

    #[test]
    fn run_id_is_deterministic_and_short() {
        let a = run_id("seed = 1\n", "deadbeef");
        let b = run_id("seed = 1\n", "deadbeef");
        let c = run_id("seed = 2\n", "deadbeef");
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert_eq!(a.len(), 12);
        assert!(a.bytes().all(|ch| ch.is_ascii_hexdigit()));
    }

    #[test]
    fn dataset_sha_tracks_content() {
        use crate::data::{generate, save_dataset, SynthSpec};
        let spec = SynthSpec { n_source: 2, n_target_train: 2, n_target_test: 2, ..SynthSpec::default() };
        let ds = generate(&spec).unwrap();
        let dir = tempfile::tempdir().unwrap();
        save_dataset(dir.path(), &ds).unwrap();
        let h1 = dataset_content_sha(dir.path()).unwrap();
        let h2 = dataset_content_sha(dir.path()).unwrap();
        assert_eq!(h1, h2);
        // Flip one byte of one image: the hash must move.
        let victim = dir.path().join("src_000_img.vten");
        let mut bytes = fs::read(&victim).unwrap();
        let last = bytes.len() - 1;
        bytes[last] ^= 0x40;
        fs::write(&victim, bytes).unwrap();
        let h3 = dataset_content_sha(dir.path()).unwrap();
        assert_ne!(h1, h3);
    }
}
