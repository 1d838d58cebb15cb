//! Binary parameter container.
//!
//! Layout: the 8 bytes `CNRF0001`, a newline, `key=value` header lines, an
//! empty line, then little-endian `f32` arrays in the order of the
//! `tensor.<name>=<d0>x<d1>…` header entries.

use std::fs;
use std::path::Path;

use crate::autodiff::{ParamSet, Tensor};
use crate::discriminators::{AuxClassifier, ClassifierConfig};
use crate::encoding::EncodingConfig;
use crate::error::{ensure, Error, Result};
use crate::field::{ConditionalField, FieldConfig, LatentPair};
use crate::nn::seeded;

pub const MAGIC: &[u8; 8] = b"CNRF0001";
pub const SCHEMA: &str = "1";
const TENSOR_PREFIX: &str = "tensor.";

#[derive(Clone, Debug, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<f32>,
}

/// Header entries and tensors, both kept in file order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    header: Vec<(String, String)>,
    tensors: Vec<NamedTensor>,
}

fn shape_text(shape: &[usize]) -> String {
    shape.iter().map(|d| d.to_string()).collect::<Vec<_>>().join("x")
}

impl Checkpoint {
    pub fn new() -> Self {
        let mut c = Self::default();
        c.set("schema", SCHEMA);
        c
    }

    /// Sets a header value, keeping the position of an existing key.
    pub fn set(&mut self, key: &str, value: impl ToString) {
        let value = value.to_string();
        debug_assert!(!key.contains('=') && !key.contains('\n') && !value.contains('\n'));
        match self.header.iter_mut().find(|(k, _)| k == key) {
            Some(entry) => entry.1 = value,
            None => self.header.push((key.to_string(), value)),
        }
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.header.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    pub fn require(&self, key: &str) -> Result<&str> {
        self.get(key)
            .ok_or_else(|| Error::Format(format!("checkpoint: missing header key {key:?}")))
    }

    pub fn parse<V: std::str::FromStr>(&self, key: &str) -> Result<V> {
        let raw = self.require(key)?;
        raw.parse()
            .map_err(|_| Error::Format(format!("checkpoint: bad value {raw:?} for {key:?}")))
    }

    pub fn header(&self) -> &[(String, String)] {
        &self.header
    }

    pub fn tensors(&self) -> &[NamedTensor] {
        &self.tensors
    }

    pub fn tensor(&self, name: &str) -> Option<&NamedTensor> {
        self.tensors.iter().find(|t| t.name == name)
    }

    pub fn push_tensor(&mut self, name: &str, shape: Vec<usize>, values: Vec<f32>) -> Result<()> {
        ensure!(
            shape.iter().product::<usize>() == values.len(),
            "checkpoint: tensor {name} has {} values for shape {shape:?}",
            values.len()
        );
        ensure!(self.tensor(name).is_none(), "checkpoint: duplicate tensor {name}");
        self.header.push((format!("{TENSOR_PREFIX}{name}"), shape_text(&shape)));
        self.tensors.push(NamedTensor {
            name: name.to_string(),
            shape,
            values,
        });
        Ok(())
    }

    pub fn push_params(&mut self, params: &ParamSet<f32>) -> Result<()> {
        for (name, t) in params.iter() {
            self.push_tensor(name, t.shape().to_vec(), t.values().to_vec())?;
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.push(b'\n');
        for (k, v) in &self.header {
            out.extend_from_slice(k.as_bytes());
            out.push(b'=');
            out.extend_from_slice(v.as_bytes());
            out.push(b'\n');
        }
        out.push(b'\n');
        for t in &self.tensors {
            for v in &t.values {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: String| Error::Format(format!("checkpoint: {m}"));
        if bytes.len() < 9 || &bytes[..8] != MAGIC || bytes[8] != b'\n' {
            return Err(bad("wrong magic (expected CNRF0001)".into()));
        }
        let mut pos = 9;
        let mut header = Vec::new();
        let mut tensors = Vec::new();
        loop {
            let end = bytes[pos..]
                .iter()
                .position(|&b| b == b'\n')
                .ok_or_else(|| bad("header not terminated".into()))?;
            let line = std::str::from_utf8(&bytes[pos..pos + end])
                .map_err(|_| bad("header is not UTF-8".into()))?;
            pos += end + 1;
            if line.is_empty() {
                break;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| bad(format!("header line {line:?} lacks '='")))?;
            if let Some(name) = k.strip_prefix(TENSOR_PREFIX) {
                let shape = if v.is_empty() {
                    Vec::new()
                } else {
                    v.split('x')
                        .map(|d| d.parse::<usize>())
                        .collect::<std::result::Result<Vec<_>, _>>()
                        .map_err(|_| bad(format!("bad shape {v:?} for tensor {name}")))?
                };
                tensors.push((name.to_string(), shape));
            }
            header.push((k.to_string(), v.to_string()));
        }
        let need: usize = tensors.iter().map(|(_, s)| s.iter().product::<usize>() * 4).sum();
        let have = bytes.len() - pos;
        if have != need {
            return Err(bad(format!(
                "payload has {have} bytes, header declares {need} (truncated or corrupt)"
            )));
        }
        let mut out = Vec::with_capacity(tensors.len());
        for (name, shape) in tensors {
            let n: usize = shape.iter().product();
            let values = bytes[pos..pos + 4 * n]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            pos += 4 * n;
            out.push(NamedTensor { name, shape, values });
        }
        Ok(Self {
            header,
            tensors: out,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    /// Tensors whose names match `names`, in that order, as a parameter set.
    fn param_set(&self, names: &[String]) -> Result<ParamSet<f32>> {
        let mut p = ParamSet::new();
        for name in names {
            let t = self
                .tensor(name)
                .ok_or_else(|| Error::Format(format!("checkpoint: missing tensor {name}")))?;
            p.add(name.clone(), Tensor::new(t.shape.clone(), t.values.clone())?);
        }
        Ok(p)
    }
}

fn flag(v: bool) -> &'static str {
    if v {
        "1"
    } else {
        "0"
    }
}

fn parse_flag(c: &Checkpoint, key: &str) -> Result<bool> {
    match c.require(key)? {
        "1" => Ok(true),
        "0" => Ok(false),
        v => Err(Error::Format(format!("checkpoint: bad flag {v:?} for {key:?}"))),
    }
}

pub fn field_checkpoint(field: &ConditionalField<f32>) -> Result<Checkpoint> {
    let c = field.config();
    let mut ck = Checkpoint::new();
    ck.set("kind", "field");
    ck.set("classes", c.classes);
    ck.set("styles", c.styles);
    ck.set("shape_dim", c.shape_dim);
    ck.set("appearance_dim", c.appearance_dim);
    ck.set("width", c.width);
    ck.set("depth", c.depth);
    ck.set("color_width", c.color_width);
    ck.set("position_freqs", c.encoding.position_freqs);
    ck.set("direction_freqs", c.encoding.direction_freqs);
    ck.set("label_input", flag(c.label_input));
    ck.set("label_arrays", flag(c.label_arrays));
    ck.push_params(field.params())?;
    ck.push_tensor("anchor.z_s", vec![c.shape_dim], field.anchor.z_s.clone())?;
    ck.push_tensor("anchor.z_a", vec![c.appearance_dim], field.anchor.z_a.clone())?;
    Ok(ck)
}

pub fn field_from_checkpoint(ck: &Checkpoint) -> Result<ConditionalField<f32>> {
    let kind = ck.require("kind")?;
    if kind != "field" {
        return Err(Error::Format(format!("checkpoint holds a {kind}, not a field")));
    }
    let config = FieldConfig {
        classes: ck.parse("classes")?,
        styles: ck.parse("styles")?,
        shape_dim: ck.parse("shape_dim")?,
        appearance_dim: ck.parse("appearance_dim")?,
        width: ck.parse("width")?,
        depth: ck.parse("depth")?,
        color_width: ck.parse("color_width")?,
        encoding: EncodingConfig {
            position_freqs: ck.parse("position_freqs")?,
            direction_freqs: ck.parse("direction_freqs")?,
        },
        label_input: parse_flag(ck, "label_input")?,
        label_arrays: parse_flag(ck, "label_arrays")?,
    };
    let mut field = ConditionalField::new(config, &mut seeded(0))?;
    let names = field.params().names().to_vec();
    field.load_params(ck.param_set(&names)?)?;
    let z = |n: &str, d: usize| -> Result<Vec<f32>> {
        let t = ck
            .tensor(n)
            .ok_or_else(|| Error::Format(format!("checkpoint: missing tensor {n}")))?;
        ensure!(t.values.len() == d, "checkpoint: {n} has wrong length");
        Ok(t.values.clone())
    };
    field.anchor = LatentPair {
        z_s: z("anchor.z_s", config.shape_dim)?,
        z_a: z("anchor.z_a", config.appearance_dim)?,
    };
    Ok(field)
}

pub fn classifier_checkpoint(clf: &AuxClassifier<f32>) -> Result<Checkpoint> {
    let c = clf.config();
    let mut ck = Checkpoint::new();
    ck.set("kind", "classifier");
    ck.set("classes", c.classes);
    ck.set("styles", c.styles);
    ck.set("resolution", c.resolution);
    ck.set(
        "widths",
        c.widths.iter().map(|w| w.to_string()).collect::<Vec<_>>().join(","),
    );
    ck.set("trained", flag(clf.trained));
    ck.push_params(clf.params())?;
    Ok(ck)
}

pub fn classifier_from_checkpoint(ck: &Checkpoint) -> Result<AuxClassifier<f32>> {
    let kind = ck.require("kind")?;
    if kind != "classifier" {
        return Err(Error::Format(format!("checkpoint holds a {kind}, not a classifier")));
    }
    let widths = ck
        .require("widths")?
        .split(',')
        .map(|w| w.parse::<usize>())
        .collect::<std::result::Result<Vec<_>, _>>()
        .map_err(|_| Error::Format("checkpoint: bad widths".into()))?;
    let config = ClassifierConfig {
        classes: ck.parse("classes")?,
        styles: ck.parse("styles")?,
        resolution: ck.parse("resolution")?,
        widths,
    };
    let mut clf = AuxClassifier::new(config, &mut seeded(0))?;
    let names = clf.params().names().to_vec();
    clf.load_params(ck.param_set(&names)?)?;
    clf.trained = parse_flag(ck, "trained")?;
    Ok(clf)
}
