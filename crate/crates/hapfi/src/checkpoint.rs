//! Checkpoint files: a text header of `key=value` lines terminated by `end`,
//! followed by little-endian `f32` payloads in header order.
//!
//! ```text
//! hapfi-checkpoint 1
//! train.planner.width=64
//! ...
//! vocab.objects=None Apple Bread ...
//! tensor.count=2
//! tensor.0=rgb.patch_embed.weight 192,64 0 12288
//! tensor.1=adam.m/rgb.patch_embed.weight 192,64 49152 12288
//! end
//! <payload>
//! ```
//!
//! Offsets and lengths are in elements; the payload starts right after the
//! `end` line. Values are stored as `f32`, so loading rounds every weight to
//! single precision.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use hapfi_core::encoders::TokenVocab;
use hapfi_core::heads::Vocabularies;
use hapfi_core::model::PlannerModel;
use hapfi_core::optim::AdamState;
use hapfi_core::trainer::{TrainConfig, Trainer};
use hapfi_core::Tensor;
use serde_json::{Map, Value};

use crate::error::{HapfiError, Result};

const MAGIC: &str = "hapfi-checkpoint 1";
const ADAM_M: &str = "adam.m/";
const ADAM_V: &str = "adam.v/";

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub epochs_done: usize,
    pub vocabs: Vocabularies,
    pub tokens: TokenVocab,
    pub params: Vec<(String, Tensor)>,
    /// Optimizer step count and moments, absent for bare model exports.
    pub adam: Option<AdamSnapshot>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamSnapshot {
    pub step: u64,
    pub first_moment: Vec<Tensor>,
    pub second_moment: Vec<Tensor>,
}

impl Checkpoint {
    pub fn from_trainer(t: &Trainer) -> Self {
        let mut c = Self::from_model(&t.model, &t.config);
        c.epochs_done = t.epochs_done;
        c.adam = Some(AdamSnapshot {
            step: t.optimizer.step,
            first_moment: t.optimizer.first_moment.clone(),
            second_moment: t.optimizer.second_moment.clone(),
        });
        c
    }

    pub fn from_model(model: &PlannerModel, config: &TrainConfig) -> Self {
        Self {
            config: TrainConfig {
                planner: model.config.clone(),
                ..config.clone()
            },
            epochs_done: 0,
            vocabs: model.vocabs.clone(),
            tokens: model.tokens.clone(),
            params: model.params.iter().map(|(_, n, t)| (n.to_string(), t.clone())).collect(),
            adam: None,
        }
    }

    pub fn into_model(self) -> Result<PlannerModel> {
        Ok(PlannerModel::from_params(self.config.planner, self.vocabs, self.tokens, self.params)?)
    }

    /// Rebuilds the trainer, optimizer state included. A checkpoint without
    /// optimizer state resumes with fresh moments.
    pub fn into_trainer(self) -> Result<Trainer> {
        let config = self.config.clone();
        let epochs_done = self.epochs_done;
        let adam = self.adam.clone();
        let model = self.into_model()?;
        let mut trainer = Trainer::new(model, config)?;
        trainer.epochs_done = epochs_done;
        if let Some(a) = adam {
            let fresh = AdamState::for_store(trainer.config.adam(), &trainer.model.params);
            let shapes_match = |ms: &[Tensor]| {
                ms.len() == fresh.first_moment.len()
                    && ms.iter().zip(&fresh.first_moment).all(|(a, b)| a.shape() == b.shape())
            };
            if !shapes_match(&a.first_moment) || !shapes_match(&a.second_moment) {
                return Err(HapfiError::Data("optimizer moments do not match the parameters".into()));
            }
            trainer.optimizer = AdamState {
                config: fresh.config,
                step: a.step,
                first_moment: a.first_moment,
                second_moment: a.second_moment,
            };
        }
        Ok(trainer)
    }

    /// Number of scalar parameters.
    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|(_, t)| t.len()).sum()
    }
}

fn flatten(prefix: &str, v: &Value, out: &mut Vec<(String, String)>) {
    match v {
        Value::Object(m) => {
            for (k, v) in m {
                flatten(&format!("{prefix}.{k}"), v, out);
            }
        }
        leaf => out.push((prefix.to_string(), leaf.to_string())),
    }
}

fn unflatten(entries: &[(String, Value)]) -> Value {
    let mut root = Map::new();
    for (key, value) in entries {
        let mut node = &mut root;
        let parts: Vec<&str> = key.split('.').collect();
        for p in &parts[..parts.len() - 1] {
            node = node
                .entry(p.to_string())
                .or_insert_with(|| Value::Object(Map::new()))
                .as_object_mut()
                .expect("dotted keys never collide with leaves");
        }
        node.insert(parts[parts.len() - 1].to_string(), value.clone());
    }
    Value::Object(root)
}

fn join_words(path: &Path, words: &[String]) -> Result<String> {
    if let Some(bad) = words.iter().find(|w| w.is_empty() || w.chars().any(char::is_whitespace)) {
        return Err(HapfiError::Data(format!(
            "{}: vocabulary entry {bad:?} cannot be stored",
            path.display()
        )));
    }
    Ok(words.join(" "))
}

pub fn save(path: &Path, c: &Checkpoint) -> Result<()> {
    let mut header = vec![MAGIC.to_string()];
    let config = serde_json::to_value(&c.config).map_err(|e| HapfiError::Data(e.to_string()))?;
    let mut kv = Vec::new();
    flatten("train", &config, &mut kv);
    kv.push(("train.epochs_done".into(), c.epochs_done.to_string()));
    kv.push(("vocab.objects".into(), join_words(path, c.vocabs.objects())?));
    kv.push(("vocab.receptacles".into(), join_words(path, c.vocabs.receptacles())?));
    kv.push(("vocab.tokens".into(), join_words(path, c.tokens.tokens())?));

    let mut tensors: Vec<(String, &Tensor)> = c.params.iter().map(|(n, t)| (n.clone(), t)).collect();
    if let Some(a) = &c.adam {
        kv.push(("adam.step".into(), a.step.to_string()));
        for ((n, _), (m, v)) in c.params.iter().zip(a.first_moment.iter().zip(&a.second_moment)) {
            tensors.push((format!("{ADAM_M}{n}"), m));
            tensors.push((format!("{ADAM_V}{n}"), v));
        }
    }
    kv.push(("tensor.count".into(), tensors.len().to_string()));
    let mut offset = 0usize;
    for (i, (name, t)) in tensors.iter().enumerate() {
        let shape: Vec<String> = t.shape().iter().map(usize::to_string).collect();
        kv.push((format!("tensor.{i}"), format!("{name} {} {offset} {}", shape.join(","), t.len())));
        offset += t.len();
    }
    for (k, v) in kv {
        header.push(format!("{k}={v}"));
    }
    header.push("end".into());

    let mut bytes = header.join("\n").into_bytes();
    bytes.push(b'\n');
    bytes.reserve(offset * 4);
    for (_, t) in &tensors {
        for &x in t.data() {
            bytes.extend_from_slice(&(x as f32).to_le_bytes());
        }
    }
    let tmp = path.with_extension("partial");
    let mut f = fs::File::create(&tmp).map_err(|e| HapfiError::io(&tmp, e))?;
    f.write_all(&bytes).map_err(|e| HapfiError::io(&tmp, e))?;
    f.sync_all().map_err(|e| HapfiError::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| HapfiError::io(path, e))
}

struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
    len: usize,
}

/// Parsed header without the payload, for `inspect-checkpoint`.
pub struct Header {
    pub entries: BTreeMap<String, String>,
    tensors: Vec<TensorEntry>,
    payload_start: usize,
}

impl Header {
    pub fn tensors(&self) -> impl Iterator<Item = (&str, &[usize], usize, usize)> {
        self.tensors.iter().map(|t| (t.name.as_str(), t.shape.as_slice(), t.offset, t.len))
    }
}

pub fn read_header(path: &Path, bytes: &[u8]) -> Result<Header> {
    let parse_err = |line: usize, message: String| HapfiError::Parse {
        path: path.to_path_buf(),
        line,
        message,
    };
    let mut entries = BTreeMap::new();
    let mut pos = 0usize;
    let mut line_no = 0usize;
    let payload_start = loop {
        let rest = &bytes[pos..];
        let Some(nl) = rest.iter().position(|&b| b == b'\n') else {
            return Err(parse_err(line_no + 1, "header is not terminated by `end`".into()));
        };
        line_no += 1;
        let line = std::str::from_utf8(&rest[..nl]).map_err(|_| parse_err(line_no, "header is not UTF-8".into()))?;
        pos += nl + 1;
        if line_no == 1 {
            if line != MAGIC {
                return Err(parse_err(1, format!("expected `{MAGIC}`")));
            }
            continue;
        }
        if line == "end" {
            break pos;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| parse_err(line_no, format!("expected key=value, found {line:?}")))?;
        if entries.insert(k.to_string(), v.to_string()).is_some() {
            return Err(parse_err(line_no, format!("duplicate key {k}")));
        }
    };

    let count: usize = entries
        .get("tensor.count")
        .ok_or_else(|| HapfiError::Data(format!("{}: missing tensor.count", path.display())))?
        .parse()
        .map_err(|_| HapfiError::Data(format!("{}: bad tensor.count", path.display())))?;
    let mut tensors = Vec::with_capacity(count);
    let mut expected_offset = 0usize;
    for i in 0..count {
        let bad = |m: &str| HapfiError::Data(format!("{}: tensor.{i}: {m}", path.display()));
        let v = entries.get(&format!("tensor.{i}")).ok_or_else(|| bad("missing"))?;
        let fields: Vec<&str> = v.split(' ').collect();
        let [name, shape, offset, len] = fields[..] else {
            return Err(bad("expected `name shape offset len`"));
        };
        let shape: Vec<usize> = if shape.is_empty() {
            Vec::new()
        } else {
            shape
                .split(',')
                .map(str::parse)
                .collect::<std::result::Result<_, _>>()
                .map_err(|_| bad("bad shape"))?
        };
        let offset: usize = offset.parse().map_err(|_| bad("bad offset"))?;
        let len: usize = len.parse().map_err(|_| bad("bad length"))?;
        if shape.iter().product::<usize>() != len || offset != expected_offset {
            return Err(bad("shape, offset and length disagree"));
        }
        expected_offset += len;
        tensors.push(TensorEntry {
            name: name.to_string(),
            shape,
            offset,
            len,
        });
    }
    if bytes.len() - payload_start != expected_offset * 4 {
        return Err(HapfiError::Data(format!(
            "{}: payload holds {} bytes, header describes {}",
            path.display(),
            bytes.len() - payload_start,
            expected_offset * 4
        )));
    }
    Ok(Header {
        entries,
        tensors,
        payload_start,
    })
}

pub fn load(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| HapfiError::io(path, e))?;
    let header = read_header(path, &bytes)?;
    let data_err = |m: String| HapfiError::Data(format!("{}: {m}", path.display()));
    let get = |k: &str| header.entries.get(k).ok_or_else(|| data_err(format!("missing {k}")));

    let mut config_kv = Vec::new();
    for (k, v) in &header.entries {
        if k.starts_with("train.") && k != "train.epochs_done" {
            let value: Value = serde_json::from_str(v).map_err(|e| data_err(format!("{k}: {e}")))?;
            config_kv.push((k["train.".len()..].to_string(), value));
        }
    }
    let config: TrainConfig =
        serde_json::from_value(unflatten(&config_kv)).map_err(|e| data_err(format!("train config: {e}")))?;
    let epochs_done: usize = get("train.epochs_done")?
        .parse()
        .map_err(|_| data_err("bad train.epochs_done".into()))?;
    let words = |k: &str| -> Result<Vec<String>> { Ok(get(k)?.split(' ').map(str::to_string).collect()) };
    let vocabs = Vocabularies::from_full_lists(words("vocab.objects")?, words("vocab.receptacles")?)?;
    let tokens = TokenVocab::from_tokens(words("vocab.tokens")?)?;

    let payload = &bytes[header.payload_start..];
    let mut params = Vec::new();
    let mut first = BTreeMap::new();
    let mut second = BTreeMap::new();
    for t in &header.tensors {
        let raw = &payload[t.offset * 4..(t.offset + t.len) * 4];
        let data: Vec<f64> = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect();
        let tensor = Tensor::new(t.shape.clone(), data)?;
        if let Some(n) = t.name.strip_prefix(ADAM_M) {
            first.insert(n.to_string(), tensor);
        } else if let Some(n) = t.name.strip_prefix(ADAM_V) {
            second.insert(n.to_string(), tensor);
        } else {
            params.push((t.name.clone(), tensor));
        }
    }
    let adam = match header.entries.get("adam.step") {
        None => None,
        Some(step) => {
            let step: u64 = step.parse().map_err(|_| data_err("bad adam.step".into()))?;
            let mut m = Vec::with_capacity(params.len());
            let mut v = Vec::with_capacity(params.len());
            for (n, _) in &params {
                m.push(first.remove(n).ok_or_else(|| data_err(format!("missing {ADAM_M}{n}")))?);
                v.push(second.remove(n).ok_or_else(|| data_err(format!("missing {ADAM_V}{n}")))?);
            }
            Some(AdamSnapshot {
                step,
                first_moment: m,
                second_moment: v,
            })
        }
    };
    Ok(Checkpoint {
        config,
        epochs_done,
        vocabs,
        tokens,
        params,
        adam,
    })
}
