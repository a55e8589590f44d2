//! On-disk formats: the `DGMR` tensor archive, hidden-state dumps built on
//! it, and CSV loss curves.
//!
//! Archive layout (all integers little-endian):
//!
//! ```text
//! "DGMR" | version u32 = 1 | count u32
//! count x ( name_len u16 | name utf8 | rank u8 | dims u64 x rank | f32 x prod(dims) )
//! crc32 u32 over every preceding byte
//! ```

use crate::error::{CoreError, Result};
use crate::splice::{HiddenMeta, HiddenStateDataset};
use dgmr_tensor::{ParamStore, Tensor};
use std::collections::HashSet;
use std::fmt;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

pub const MAGIC: &[u8; 4] = b"DGMR";
pub const VERSION: u32 = 1;
pub const META_ENTRY: &str = "__meta__";
const VECTORS_ENTRY: &str = "vectors";
const COND_ENTRY: &str = "conditioning";

pub type Entries = Vec<(String, Tensor)>;

pub fn encode_archive(entries: &[(String, Tensor)]) -> Result<Vec<u8>> {
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(entries.len() as u32).to_le_bytes());
    for (name, t) in entries {
        if !seen.insert(name.as_str()) {
            return Err(CoreError::Format(format!("duplicate entry name {name:?}")));
        }
        let nb = name.as_bytes();
        if nb.len() > u16::MAX as usize {
            return Err(CoreError::Format(format!("entry name too long: {} bytes", nb.len())));
        }
        if t.rank() > u8::MAX as usize {
            return Err(CoreError::Format(format!("rank {} too large", t.rank())));
        }
        out.extend_from_slice(&(nb.len() as u16).to_le_bytes());
        out.extend_from_slice(nb);
        out.push(t.rank() as u8);
        for &d in t.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        out.reserve(4 * t.numel());
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    Ok(out)
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(CoreError::Format(format!("truncated archive while reading {what}")));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }
}

pub fn decode_archive(bytes: &[u8]) -> Result<Entries> {
    if bytes.len() < 16 {
        return Err(CoreError::Format(format!("truncated archive: {} bytes", bytes.len())));
    }
    if &bytes[..4] != MAGIC {
        return Err(CoreError::Format("bad magic".into()));
    }
    let (body, tail) = bytes.split_at(bytes.len() - 4);
    let stored = u32::from_le_bytes(tail.try_into().unwrap());
    let computed = crc32fast::hash(body);
    if stored != computed {
        return Err(CoreError::Crc { stored, computed });
    }
    let mut c = Cursor { buf: body, pos: 4 };
    let version = c.u32("version")?;
    if version != VERSION {
        return Err(CoreError::Format(format!("unknown archive version {version}")));
    }
    let count = c.u32("entry count")? as usize;
    let mut seen = HashSet::new();
    let mut entries = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let n = c.u16("name length")? as usize;
        let name = std::str::from_utf8(c.take(n, "name")?)
            .map_err(|_| CoreError::Format("entry name is not utf-8".into()))?
            .to_string();
        if !seen.insert(name.clone()) {
            return Err(CoreError::Format(format!("duplicate entry name {name:?}")));
        }
        let rank = c.take(1, "rank")?[0] as usize;
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            dims.push(c.u64("dims")? as usize);
        }
        let numel = dims
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .ok_or_else(|| CoreError::Format(format!("entry {name:?}: dims overflow")))?;
        let raw = c.take(
            numel
                .checked_mul(4)
                .ok_or_else(|| CoreError::Format("payload size overflow".into()))?,
            "payload",
        )?;
        let data: Vec<f32> = raw
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
            .collect();
        let t = Tensor::new(dims, data).map_err(|e| CoreError::Format(format!("entry {name:?}: {e}")))?;
        entries.push((name, t));
    }
    if c.pos != body.len() {
        return Err(CoreError::Format(format!(
            "{} trailing bytes after last entry",
            body.len() - c.pos
        )));
    }
    Ok(entries)
}

/// Writes via a temporary sibling and renames, so readers never see a
/// partial file.
pub fn save_archive(entries: &[(String, Tensor)], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode_archive(entries)?;
    write_atomic(path, &bytes)
}

pub fn load_archive(path: impl AsRef<Path>) -> Result<Entries> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| CoreError::io(path, e))?;
    decode_archive(&bytes)
}

pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    fs::write(&tmp, bytes).map_err(|e| CoreError::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| CoreError::io(path, e))
}

pub fn find<'a>(entries: &'a [(String, Tensor)], name: &str) -> Option<&'a Tensor> {
    entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
}

/// JSON text stored as one f32 per byte.
pub fn text_entry(name: &str, text: &str) -> (String, Tensor) {
    let bytes: Vec<f32> = text.bytes().map(|b| b as f32).collect();
    let t = if bytes.is_empty() {
        Tensor::zeros(vec![1])
    } else {
        Tensor::from_vec(bytes)
    };
    (name.to_string(), t)
}

pub fn entry_text(t: &Tensor) -> Result<String> {
    let bytes: Vec<u8> = t
        .data()
        .iter()
        .map(|&v| {
            if v.fract() == 0.0 && (0.0..=255.0).contains(&v) {
                Ok(v as u8)
            } else {
                Err(CoreError::Format(format!("text entry holds non-byte value {v}")))
            }
        })
        .collect::<Result<_>>()?;
    let s = String::from_utf8(bytes).map_err(|_| CoreError::Format("text entry is not utf-8".into()))?;
    Ok(s.trim_end_matches('\0').to_string())
}

pub fn store_entries(store: &ParamStore) -> Entries {
    store.iter().map(|p| (p.name.clone(), p.tensor.clone())).collect()
}

/// Overwrites every parameter of `store` from `entries`; extra entries are
/// ignored, missing ones are an error.
pub fn restore_store(store: &mut ParamStore, entries: &[(String, Tensor)]) -> Result<()> {
    let names: Vec<String> = store.names().map(String::from).collect();
    for name in names {
        let t = find(entries, &name)
            .ok_or_else(|| CoreError::Format(format!("checkpoint missing parameter {name:?}")))?;
        store.set(&name, t.clone())?;
    }
    Ok(())
}

pub fn hidden_entries(ds: &HiddenStateDataset) -> Result<Entries> {
    let meta = serde_json::to_string(&ds.meta).map_err(|e| CoreError::Format(e.to_string()))?;
    let mut entries = vec![text_entry(META_ENTRY, &meta), (VECTORS_ENTRY.to_string(), ds.vectors.clone())];
    if let Some(c) = &ds.conditioning {
        entries.push((COND_ENTRY.to_string(), c.clone()));
    }
    Ok(entries)
}

pub fn dump_hidden(ds: &HiddenStateDataset, path: impl AsRef<Path>) -> Result<()> {
    ds.check()?;
    save_archive(&hidden_entries(ds)?, path)
}

pub fn load_hidden(path: impl AsRef<Path>) -> Result<HiddenStateDataset> {
    hidden_from_entries(&load_archive(path)?)
}

pub fn hidden_from_entries(entries: &[(String, Tensor)]) -> Result<HiddenStateDataset> {
    let meta = find(entries, META_ENTRY).ok_or_else(|| CoreError::Format("archive has no __meta__ entry".into()))?;
    let meta: HiddenMeta =
        serde_json::from_str(&entry_text(meta)?).map_err(|e| CoreError::Format(format!("__meta__: {e}")))?;
    let vectors = find(entries, VECTORS_ENTRY)
        .ok_or_else(|| CoreError::Format("archive has no vectors entry".into()))?
        .clone();
    let conditioning = find(entries, COND_ENTRY).cloned();
    let ds = HiddenStateDataset {
        vectors,
        conditioning,
        meta,
    };
    ds.check()?;
    Ok(ds)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Val,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Term {
    Total,
    Reconstruction,
    KlZ,
    KlY,
    KlW,
    Ce,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
        })
    }
}

impl fmt::Display for Term {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Term::Total => "total",
            Term::Reconstruction => "reconstruction",
            Term::KlZ => "kl_z",
            Term::KlY => "kl_y",
            Term::KlW => "kl_w",
            Term::Ce => "ce",
        })
    }
}

impl std::str::FromStr for Split {
    type Err = CoreError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            _ => Err(CoreError::Format(format!("unknown split {s:?}"))),
        }
    }
}

impl std::str::FromStr for Term {
    type Err = CoreError;
    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "total" => Term::Total,
            "reconstruction" => Term::Reconstruction,
            "kl_z" => Term::KlZ,
            "kl_y" => Term::KlY,
            "kl_w" => Term::KlW,
            "ce" => Term::Ce,
            _ => return Err(CoreError::Format(format!("unknown term {s:?}"))),
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CurveRow {
    pub epoch: usize,
    pub split: Split,
    pub loss: f64,
    pub term: Term,
}

pub const CURVE_HEADER: &str = "epoch,split,loss,term";

/// Loss curves, optionally mirrored to a CSV file that is appended and
/// flushed on every row.
#[derive(Debug, Default)]
pub struct CurveLog {
    path: Option<PathBuf>,
    rows: Vec<CurveRow>,
}

impl CurveLog {
    pub fn in_memory() -> Self {
        Self::default()
    }

    /// Truncates `path` and writes the header.
    pub fn create(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref().to_path_buf();
        fs::write(&path, format!("{CURVE_HEADER}\n")).map_err(|e| CoreError::io(&path, e))?;
        Ok(Self {
            path: Some(path),
            rows: Vec::new(),
        })
    }

    pub fn rows(&self) -> &[CurveRow] {
        &self.rows
    }

    pub fn append(&mut self, epoch: usize, split: Split, term: Term, loss: f64) -> Result<()> {
        let expected = self
            .rows
            .iter()
            .rev()
            .find(|r| r.split == split && r.term == term)
            .map_or(0, |r| r.epoch + 1);
        if epoch != expected {
            return Err(CoreError::EpochOrder { expected, got: epoch });
        }
        let row = CurveRow {
            epoch,
            split,
            loss,
            term,
        };
        if let Some(path) = &self.path {
            let mut f = fs::OpenOptions::new()
                .append(true)
                .open(path)
                .map_err(|e| CoreError::io(path, e))?;
            writeln!(f, "{epoch},{split},{loss:?},{term}").map_err(|e| CoreError::io(path, e))?;
            f.flush().map_err(|e| CoreError::io(path, e))?;
        }
        self.rows.push(row);
        Ok(())
    }

    /// Values of one series ordered by epoch.
    pub fn series(&self, split: Split, term: Term) -> Vec<f64> {
        self.rows
            .iter()
            .filter(|r| r.split == split && r.term == term)
            .map(|r| r.loss)
            .collect()
    }

    pub fn to_csv(&self) -> String {
        let mut s = format!("{CURVE_HEADER}\n");
        for r in &self.rows {
            s.push_str(&format!("{},{},{:?},{}\n", r.epoch, r.split, r.loss, r.term));
        }
        s
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        match lines.next() {
            Some(h) if h.trim_end() == CURVE_HEADER => {}
            other => return Err(CoreError::Format(format!("bad curve header {other:?}"))),
        }
        let mut log = Self::in_memory();
        for (i, line) in lines.enumerate() {
            let line = line.trim_end();
            if line.is_empty() {
                continue;
            }
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 4 {
                return Err(CoreError::Format(format!("curve line {}: {} fields", i + 2, f.len())));
            }
            let epoch = f[0]
                .parse()
                .map_err(|_| CoreError::Format(format!("curve line {}: bad epoch", i + 2)))?;
            let loss = f[2]
                .parse()
                .map_err(|_| CoreError::Format(format!("curve line {}: bad loss", i + 2)))?;
            log.append(epoch, f[1].parse()?, f[3].parse()?, loss)?;
        }
        Ok(log)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| CoreError::io(path, e))?;
        Self::parse(&text)
    }
}
