//! Bit-exact persistence for feature stores, dictionaries, and checkpoints.
//!
//! All floats are stored as little-endian IEEE-754 32-bit values; in-memory
//! compute stays 64-bit. Formats:
//!
//! * Feature store directory: `manifest.tsv` (columns `bag_id`, `label`, `n`,
//!   `context_id`, `split`, preceded by a `# provenance=` comment line) plus
//!   one `<bag_id>.bagf32` file per bag — magic `BAGF`, `u32 n`, `u32 d`,
//!   then `n*d` floats, row-major.
//! * Dictionary `.cdf32`: magic `CDIC`, `u32 K`, `u32 d`, `K` floats of
//!   prior, `K*d` floats of strata, then a length-prefixed UTF-8 metadata
//!   string. The metadata carries a checksum over the preceding bytes.
//! * Checkpoint `.ckpt`: magic `CKPT`, length-prefixed UTF-8 metadata,
//!   length-prefixed named tensors, and a trailing 64-bit checksum.

use std::collections::BTreeMap;
use std::fs;
use std::io::Read;
use std::path::Path;

use crate::agg::AggregatorKind;
use crate::data::{Bag, BuildMode, ConfounderDictionary, Dataset, ModelParams, Split};
use crate::error::{Error, Result};
use crate::intervention::Combinator;
use crate::matrix::Matrix;

const BAG_MAGIC: &[u8; 4] = b"BAGF";
const DICT_MAGIC: &[u8; 4] = b"CDIC";
const CKPT_MAGIC: &[u8; 4] = b"CKPT";

/// FNV-1a 64-bit hash; used for source hashes and file checksums.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut hash = 0xcbf29ce484222325u64;
    for &b in bytes {
        hash ^= b as u64;
        hash = hash.wrapping_mul(0x100000001b3);
    }
    hash
}

fn format_err(path: &Path, reason: impl Into<String>) -> Error {
    Error::Format {
        path: path.display().to_string(),
        reason: reason.into(),
    }
}

// ---------------------------------------------------------------------------
// little-endian primitives
// ---------------------------------------------------------------------------

fn push_u32(buf: &mut Vec<u8>, v: u32) {
    buf.extend_from_slice(&v.to_le_bytes());
}

fn push_f32s(buf: &mut Vec<u8>, values: &[f64]) {
    for &v in values {
        buf.extend_from_slice(&(v as f32).to_le_bytes());
    }
}

fn push_string(buf: &mut Vec<u8>, s: &str) {
    push_u32(buf, s.len() as u32);
    buf.extend_from_slice(s.as_bytes());
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Cursor<'a> {
    fn new(bytes: &'a [u8], path: &'a Path) -> Self {
        Self { bytes, pos: 0, path }
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(format_err(self.path, format!("truncated while reading {what}")));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let s = self.take(4, what)?;
        Ok(u32::from_le_bytes([s[0], s[1], s[2], s[3]]))
    }

    fn f32s(&mut self, count: usize, what: &str) -> Result<Vec<f64>> {
        let s = self.take(count * 4, what)?;
        let mut out = Vec::with_capacity(count);
        for chunk in s.chunks_exact(4) {
            let v = f32::from_le_bytes([chunk[0], chunk[1], chunk[2], chunk[3]]) as f64;
            if !v.is_finite() {
                return Err(format_err(self.path, format!("non-finite value in {what}")));
            }
            out.push(v);
        }
        Ok(out)
    }

    fn string(&mut self, what: &str) -> Result<String> {
        let len = self.u32(what)? as usize;
        let s = self.take(len, what)?;
        String::from_utf8(s.to_vec())
            .map_err(|_| format_err(self.path, format!("{what} is not valid UTF-8")))
    }

    fn expect_magic(&mut self, magic: &[u8; 4]) -> Result<()> {
        let got = self.take(4, "magic")?;
        if got != magic {
            return Err(format_err(
                self.path,
                format!("bad magic {:?}, expected {:?}", got, magic),
            ));
        }
        Ok(())
    }

    fn expect_eof(&mut self) -> Result<()> {
        if self.pos != self.bytes.len() {
            return Err(format_err(
                self.path,
                format!("{} unexpected trailing bytes", self.bytes.len() - self.pos),
            ));
        }
        Ok(())
    }
}

fn parse_kv(text: &str) -> BTreeMap<&str, &str> {
    text.lines()
        .filter_map(|line| line.split_once('='))
        .collect()
}

// ---------------------------------------------------------------------------
// feature store
// ---------------------------------------------------------------------------

fn check_bag_id(id: &str) -> Result<()> {
    let ok = !id.is_empty()
        && id
            .chars()
            .all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '-' || c == '.');
    if ok {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!(
            "bag id '{id}' is not filesystem-safe"
        )))
    }
}

fn escape(s: &str) -> String {
    s.replace('\\', "\\\\").replace('\n', "\\n").replace('\t', "\\t")
}

fn unescape(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    let mut chars = s.chars();
    while let Some(c) = chars.next() {
        if c == '\\' {
            match chars.next() {
                Some('n') => out.push('\n'),
                Some('t') => out.push('\t'),
                Some('\\') => out.push('\\'),
                Some(other) => out.push(other),
                None => {}
            }
        } else {
            out.push(c);
        }
    }
    out
}

/// Writes a dataset as a manifest plus per-bag binary files. Output bytes are
/// a pure function of the dataset.
pub fn write_feature_store(dataset: &Dataset, dir: &Path) -> Result<()> {
    dataset.validate()?;
    fs::create_dir_all(dir)?;

    let mut manifest = String::new();
    manifest.push_str(&format!("# provenance={}\n", escape(&dataset.provenance)));
    manifest.push_str("bag_id\tlabel\tn\tcontext_id\tsplit\n");
    for bag in &dataset.bags {
        check_bag_id(&bag.bag_id)?;
        manifest.push_str(&format!(
            "{}\t{}\t{}\t{}\t{}\n",
            bag.bag_id,
            bag.label,
            bag.num_instances(),
            bag.context_id,
            bag.split.as_str()
        ));

        let mut buf = Vec::with_capacity(12 + bag.instances.len() * 4);
        buf.extend_from_slice(BAG_MAGIC);
        push_u32(&mut buf, bag.num_instances() as u32);
        push_u32(&mut buf, bag.instances.cols() as u32);
        push_f32s(&mut buf, bag.instances.as_slice());
        fs::write(dir.join(format!("{}.bagf32", bag.bag_id)), buf)?;
    }
    fs::write(dir.join("manifest.tsv"), manifest)?;
    Ok(())
}

/// Reads a feature store directory back into a dataset, widening the stored
/// 32-bit features to compute precision.
pub fn read_feature_store(dir: &Path) -> Result<Dataset> {
    let manifest_path = dir.join("manifest.tsv");
    let text = fs::read_to_string(&manifest_path)?;

    let mut provenance = String::new();
    let mut bags = Vec::new();
    let mut feature_dim: Option<usize> = None;
    let mut max_label = 0usize;
    let mut header_seen = false;

    for line in text.lines() {
        if let Some(rest) = line.strip_prefix("# provenance=") {
            provenance = unescape(rest);
            continue;
        }
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        if !header_seen {
            if line != "bag_id\tlabel\tn\tcontext_id\tsplit" {
                return Err(format_err(&manifest_path, "unexpected manifest header"));
            }
            header_seen = true;
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 5 {
            return Err(format_err(
                &manifest_path,
                format!("expected 5 columns, got {}", fields.len()),
            ));
        }
        let bag_id = fields[0].to_string();
        let label: usize = fields[1]
            .parse()
            .map_err(|_| format_err(&manifest_path, format!("bad label for '{bag_id}'")))?;
        let n: usize = fields[2]
            .parse()
            .map_err(|_| format_err(&manifest_path, format!("bad n for '{bag_id}'")))?;
        let context_id: u32 = fields[3]
            .parse()
            .map_err(|_| format_err(&manifest_path, format!("bad context for '{bag_id}'")))?;
        let split = Split::parse(fields[4])?;

        let bag_path = dir.join(format!("{bag_id}.bagf32"));
        let mut bytes = Vec::new();
        fs::File::open(&bag_path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| format_err(&bag_path, format!("bag '{bag_id}': {e}")))?;
        let mut cur = Cursor::new(&bytes, &bag_path);
        cur.expect_magic(BAG_MAGIC)
            .map_err(|_| format_err(&bag_path, format!("bag '{bag_id}': bad magic")))?;
        let file_n = cur.u32("n")? as usize;
        let file_d = cur.u32("d")? as usize;
        if file_n != n {
            return Err(format_err(
                &bag_path,
                format!("bag '{bag_id}': manifest says n={n}, file says {file_n}"),
            ));
        }
        if file_n == 0 || file_d == 0 {
            return Err(format_err(&bag_path, format!("bag '{bag_id}': empty shape")));
        }
        match feature_dim {
            None => feature_dim = Some(file_d),
            Some(d) if d != file_d => {
                return Err(format_err(
                    &bag_path,
                    format!("bag '{bag_id}': feature dimension {file_d}, dataset uses {d}"),
                ));
            }
            _ => {}
        }
        let data = cur
            .f32s(file_n * file_d, "features")
            .map_err(|e| match e {
                Error::Format { path, reason } => Error::Format {
                    path,
                    reason: format!("bag '{bag_id}': {reason}"),
                },
                other => other,
            })?;
        cur.expect_eof()
            .map_err(|_| format_err(&bag_path, format!("bag '{bag_id}': trailing bytes")))?;

        max_label = max_label.max(label);
        bags.push(Bag {
            bag_id,
            instances: Matrix::from_vec(file_n, file_d, data)?,
            label,
            context_id,
            split,
        });
    }

    let feature_dim =
        feature_dim.ok_or_else(|| format_err(&manifest_path, "manifest lists no bags"))?;
    Dataset::new(bags, feature_dim, (max_label + 1).max(2), provenance)
}

/// Like [`read_feature_store`] but with every context id zeroed; this is the
/// form trainers consume.
pub fn read_feature_store_blind(dir: &Path) -> Result<Dataset> {
    let mut ds = read_feature_store(dir)?;
    ds.blind();
    Ok(ds)
}

// ---------------------------------------------------------------------------
// confounder dictionary
// ---------------------------------------------------------------------------

pub fn save_dictionary(dict: &ConfounderDictionary, path: &Path) -> Result<()> {
    dict.validate()?;
    let mut buf = Vec::new();
    buf.extend_from_slice(DICT_MAGIC);
    push_u32(&mut buf, dict.k() as u32);
    push_u32(&mut buf, dict.dim() as u32);
    push_f32s(&mut buf, &dict.prior);
    push_f32s(&mut buf, dict.strata.as_slice());

    let mut meta = format!(
        "mode={}\nfrozen={}\nsource_hash={}\n",
        dict.build_mode.as_str(),
        if dict.frozen { 1 } else { 0 },
        dict.source_hash
    );
    if let BuildMode::ClassSpecific { num_classes } = dict.build_mode {
        meta.push_str(&format!("classes={num_classes}\n"));
    }
    meta.push_str(&format!("check={:016x}\n", fnv1a64(&buf)));
    push_string(&mut buf, &meta);

    fs::write(path, buf)?;
    Ok(())
}

pub fn load_dictionary(path: &Path) -> Result<ConfounderDictionary> {
    let bytes = fs::read(path)?;
    let mut cur = Cursor::new(&bytes, path);
    cur.expect_magic(DICT_MAGIC)?;
    let k = cur.u32("K")? as usize;
    let d = cur.u32("d")? as usize;
    if k == 0 {
        return Err(format_err(path, "dictionary has K=0"));
    }
    if d == 0 {
        return Err(format_err(path, "dictionary has d=0"));
    }
    let prior = cur.f32s(k, "prior")?;
    let strata = cur.f32s(k * d, "strata")?;
    let payload_end = cur.pos;
    let meta = cur.string("metadata")?;
    cur.expect_eof()?;

    let kv = parse_kv(&meta);
    if let Some(stored) = kv.get("check") {
        let actual = format!("{:016x}", fnv1a64(&bytes[..payload_end]));
        if *stored != actual {
            return Err(format_err(
                path,
                format!("checksum mismatch: stored {stored}, computed {actual}"),
            ));
        }
    } else {
        return Err(format_err(path, "metadata missing checksum"));
    }
    let mode = match kv.get("mode").copied() {
        Some("attention") => BuildMode::Attention,
        Some("mean") => BuildMode::Mean,
        Some("max") => BuildMode::Max,
        Some("instance") => BuildMode::Instance,
        Some("class_specific") => {
            let classes: usize = kv
                .get("classes")
                .and_then(|v| v.parse().ok())
                .ok_or_else(|| format_err(path, "class_specific metadata missing classes"))?;
            BuildMode::ClassSpecific { num_classes: classes }
        }
        other => {
            return Err(format_err(path, format!("unknown build mode {other:?}")));
        }
    };
    let frozen = kv.get("frozen").copied() != Some("0");
    let source_hash = kv.get("source_hash").unwrap_or(&"").to_string();

    ConfounderDictionary::new(Matrix::from_vec(k, d, strata)?, prior, mode, frozen, source_hash)
}

// ---------------------------------------------------------------------------
// checkpoints
// ---------------------------------------------------------------------------

pub fn save_params(params: &ModelParams, path: &Path) -> Result<()> {
    params.validate()?;
    let mut meta = format!(
        "agg={}\nd={}\nclasses={}\n",
        params.agg.as_str(),
        params.feature_dim,
        params.num_classes
    );
    if let AggregatorKind::Attention { hidden } = params.agg {
        meta.push_str(&format!("hidden={hidden}\n"));
    }
    if let Some(comb) = params.combinator {
        meta.push_str(&format!("combinator={}\n", comb.as_str()));
    }

    let tensors: Vec<(&str, &Matrix)> = [
        ("attn_hidden", params.attn_hidden.as_ref()),
        ("attn_score", params.attn_score.as_ref()),
        ("clf_weight", Some(&params.clf_weight)),
        ("clf_bias", Some(&params.clf_bias)),
        ("proj_bag", params.proj_bag.as_ref()),
        ("proj_dict", params.proj_dict.as_ref()),
    ]
    .into_iter()
    .filter_map(|(name, m)| m.map(|m| (name, m)))
    .collect();

    let mut buf = Vec::new();
    buf.extend_from_slice(CKPT_MAGIC);
    push_string(&mut buf, &meta);
    push_u32(&mut buf, tensors.len() as u32);
    for (name, m) in tensors {
        push_string(&mut buf, name);
        push_u32(&mut buf, m.rows() as u32);
        push_u32(&mut buf, m.cols() as u32);
        push_f32s(&mut buf, m.as_slice());
    }
    let check = fnv1a64(&buf);
    buf.extend_from_slice(&check.to_le_bytes());
    fs::write(path, buf)?;
    Ok(())
}

pub fn load_params(path: &Path) -> Result<ModelParams> {
    let bytes = fs::read(path)?;
    if bytes.len() < 12 {
        return Err(format_err(path, "file too short"));
    }
    let (body, tail) = bytes.split_at(bytes.len() - 8);
    let stored = u64::from_le_bytes(tail.try_into().unwrap());
    let actual = fnv1a64(body);
    if stored != actual {
        return Err(format_err(
            path,
            format!("checksum mismatch: stored {stored:016x}, computed {actual:016x}"),
        ));
    }

    let mut cur = Cursor::new(body, path);
    cur.expect_magic(CKPT_MAGIC)?;
    let meta = cur.string("metadata")?;
    let count = cur.u32("tensor count")? as usize;
    let mut tensors: BTreeMap<String, Matrix> = BTreeMap::new();
    for _ in 0..count {
        let name = cur.string("tensor name")?;
        let rows = cur.u32("rows")? as usize;
        let cols = cur.u32("cols")? as usize;
        if rows == 0 || cols == 0 {
            return Err(format_err(path, format!("tensor '{name}' has empty shape")));
        }
        let data = cur.f32s(rows * cols, &name)?;
        tensors.insert(name, Matrix::from_vec(rows, cols, data)?);
    }
    cur.expect_eof()?;

    let kv = parse_kv(&meta);
    let feature_dim: usize = kv
        .get("d")
        .and_then(|v| v.parse().ok())
        .ok_or_else(|| format_err(path, "metadata missing d"))?;
    let num_classes: usize = kv
        .get("classes")
        .and_then(|v| v.parse().ok())
        .ok_or_else(|| format_err(path, "metadata missing classes"))?;
    let agg = match kv.get("agg").copied() {
        Some("mean") => AggregatorKind::Mean,
        Some("max") => AggregatorKind::Max,
        Some("attention") => {
            let hidden: usize = kv
                .get("hidden")
                .and_then(|v| v.parse().ok())
                .ok_or_else(|| format_err(path, "attention metadata missing hidden"))?;
            AggregatorKind::Attention { hidden }
        }
        other => return Err(format_err(path, format!("unknown aggregator {other:?}"))),
    };
    let combinator = match kv.get("combinator").copied() {
        None => None,
        Some(s) => Some(Combinator::parse(s)?),
    };

    let params = ModelParams {
        agg,
        attn_hidden: tensors.remove("attn_hidden"),
        attn_score: tensors.remove("attn_score"),
        clf_weight: tensors
            .remove("clf_weight")
            .ok_or_else(|| format_err(path, "missing clf_weight tensor"))?,
        clf_bias: tensors
            .remove("clf_bias")
            .ok_or_else(|| format_err(path, "missing clf_bias tensor"))?,
        proj_bag: tensors.remove("proj_bag"),
        proj_dict: tensors.remove("proj_dict"),
        combinator,
        feature_dim,
        num_classes,
    };
    if let Some(extra) = tensors.keys().next() {
        return Err(format_err(path, format!("unknown tensor '{extra}'")));
    }
    params.validate()?;
    Ok(params)
}
