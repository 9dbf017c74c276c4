//! Single-file checkpoint archive.
//!
//! Layout (all header lines are UTF-8 terminated by `\n`):
//!
//! ```text
//! varfuse-checkpoint 1
//! config <n>            followed by n bytes of key=value config text and "\n"
//! meta <key> <value>    zero or more, e.g. "meta step 4200"
//! array <name> <rank> <d0> ... <dk-1>
//!                       followed by prod(d) little-endian f64 values and "\n"
//! end
//! ```
//!
//! Parameter arrays are named `param.<dotted path>` (BN running statistics
//! included); optimizer state uses `optim.<key>`. Loading matches by name, so
//! archives stay readable when unrelated parameters are added.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::nn::Module;
use crate::optim::OptimizerState;

const MAGIC: &str = "varfuse-checkpoint 1";

#[derive(Clone, Debug, PartialEq)]
pub struct Array {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    pub config: String,
    pub meta: BTreeMap<String, String>,
    pub arrays: BTreeMap<String, Array>,
}

/// Which parameters an import touched.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct LoadReport {
    pub loaded: Vec<String>,
    pub missing: Vec<String>,
}

impl Checkpoint {
    pub fn from_model(model: &dyn Module, config: &str) -> Self {
        let mut arrays = BTreeMap::new();
        model.visit_params("", &mut |name, p| {
            arrays.insert(format!("param.{name}"), Array { shape: p.shape.clone(), data: p.value.clone() });
        });
        Self { config: config.to_string(), meta: BTreeMap::new(), arrays }
    }

    pub fn set_meta(&mut self, key: &str, value: impl ToString) {
        self.meta.insert(key.to_string(), value.to_string());
    }

    pub fn meta_u64(&self, key: &str) -> Result<u64> {
        self.meta
            .get(key)
            .ok_or_else(|| Error::Checkpoint(format!("missing meta entry {key}")))?
            .parse()
            .map_err(|e| Error::Checkpoint(format!("meta entry {key}: {e}")))
    }

    pub fn set_optimizer_state(&mut self, state: &OptimizerState) {
        for (k, v) in state {
            self.arrays.insert(format!("optim.{k}"), Array { shape: vec![v.len()], data: v.clone() });
        }
    }

    pub fn optimizer_state(&self) -> OptimizerState {
        self.arrays
            .iter()
            .filter_map(|(k, a)| k.strip_prefix("optim.").map(|s| (s.to_string(), a.data.clone())))
            .collect()
    }

    /// Copies matching parameter arrays into `model`. With `strict`, any model
    /// parameter without an array is an error; shape mismatches always are.
    pub fn apply_to(&self, model: &mut dyn Module, strict: bool) -> Result<LoadReport> {
        let mut report = LoadReport::default();
        let mut err = None;
        model.visit_params_mut("", &mut |name, p| {
            match self.arrays.get(&format!("param.{name}")) {
                Some(a) if a.shape == p.shape => {
                    p.value.copy_from_slice(&a.data);
                    report.loaded.push(name.to_string());
                }
                Some(a) => {
                    err.get_or_insert(Error::Checkpoint(format!("{name}: shape {:?} in archive, {:?} in model", a.shape, p.shape)));
                }
                None => report.missing.push(name.to_string()),
            }
        });
        if let Some(e) = err {
            return Err(e);
        }
        if strict && !report.missing.is_empty() {
            return Err(Error::Checkpoint(format!("archive lacks parameters: {}", report.missing.join(", "))));
        }
        Ok(report)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::new();
        writeln!(buf, "{MAGIC}").expect("write to vec");
        writeln!(buf, "config {}", self.config.len()).expect("write to vec");
        buf.extend_from_slice(self.config.as_bytes());
        buf.push(b'\n');
        for (k, v) in &self.meta {
            if k.contains(char::is_whitespace) || v.contains('\n') {
                return Err(Error::Checkpoint(format!("meta entry {k:?} is not a single token line")));
            }
            writeln!(buf, "meta {k} {v}").expect("write to vec");
        }
        for (name, a) in &self.arrays {
            if a.shape.iter().product::<usize>() != a.data.len() {
                return Err(Error::Checkpoint(format!("{name}: shape {:?} holds {} values", a.shape, a.data.len())));
            }
            let dims: Vec<String> = a.shape.iter().map(|d| d.to_string()).collect();
            writeln!(buf, "array {name} {} {}", a.shape.len(), dims.join(" ")).expect("write to vec");
            for v in &a.data {
                buf.extend_from_slice(&v.to_le_bytes());
            }
            buf.push(b'\n');
        }
        writeln!(buf, "end").expect("write to vec");
        // write-then-rename so an interrupted save never leaves a torn file
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, &buf).map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&bytes).map_err(|e| match e {
            Error::Checkpoint(msg) => Error::Checkpoint(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn parse(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.line()? != MAGIC {
            return Err(Error::Checkpoint("not a varfuse checkpoint".into()));
        }
        let mut ck = Checkpoint::default();
        loop {
            let line = r.line()?;
            let mut parts = line.split(' ');
            match parts.next() {
                Some("config") => {
                    let n = parse_usize(parts.next())?;
                    ck.config = String::from_utf8(r.take(n)?.to_vec()).map_err(|_| Error::Checkpoint("config is not UTF-8".into()))?;
                    r.newline()?;
                }
                Some("meta") => {
                    let key = parts.next().ok_or_else(|| Error::Checkpoint("meta line without key".into()))?;
                    let value = line.splitn(3, ' ').nth(2).unwrap_or("");
                    ck.meta.insert(key.to_string(), value.to_string());
                }
                Some("array") => {
                    let name = parts.next().ok_or_else(|| Error::Checkpoint("array line without name".into()))?.to_string();
                    let rank = parse_usize(parts.next())?;
                    let shape = (0..rank).map(|_| parse_usize(parts.next())).collect::<Result<Vec<_>>>()?;
                    let count: usize = shape.iter().product();
                    let raw = r.take(count.checked_mul(8).ok_or_else(|| Error::Checkpoint("array too large".into()))?)?;
                    let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
                    r.newline()?;
                    ck.arrays.insert(name, Array { shape, data });
                }
                Some("end") => return Ok(ck),
                _ => return Err(Error::Checkpoint(format!("unexpected header line {line:?}"))),
            }
        }
    }
}

fn parse_usize(s: Option<&str>) -> Result<usize> {
    s.and_then(|v| v.parse().ok()).ok_or_else(|| Error::Checkpoint("malformed size field".into()))
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn line(&mut self) -> Result<&'a str> {
        let rest = &self.bytes[self.pos..];
        let end = rest.iter().position(|&b| b == b'\n').ok_or_else(|| Error::Checkpoint("truncated archive".into()))?;
        self.pos += end + 1;
        std::str::from_utf8(&rest[..end]).map_err(|_| Error::Checkpoint("header is not UTF-8".into()))
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Checkpoint("truncated archive".into()));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn newline(&mut self) -> Result<()> {
        match self.take(1)? {
            b"\n" => Ok(()),
            _ => Err(Error::Checkpoint("missing record terminator".into())),
        }
    }
}
