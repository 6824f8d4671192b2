//! Line-oriented `key = value` experiment configuration.
//!
//! Blank lines and text after `#` are ignored. Keys are namespaced
//! (`stage1.K = 20`); unknown or repeated keys are errors.

use std::path::Path;
use std::str::FromStr;

use crate::encoder::{EncoderConfig, Head};
use crate::error::{Error, Result};
use crate::tasks::{DataConfig, TrainConfig};

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub encoder: EncoderConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
}

impl RunConfig {
    pub fn new(head: Head) -> Self {
        Self {
            encoder: EncoderConfig::new(head),
            train: TrainConfig::default(),
            data: DataConfig::default(),
        }
    }

    pub fn head(&self) -> Head {
        self.encoder.head
    }

    /// Parses `text`. The head is `head` when given, else the file's `head`
    /// key, else flow; defaults for that head are filled in before the
    /// remaining keys are applied.
    pub fn parse(text: &str, head: Option<Head>) -> Result<Self> {
        let entries = entries(text)?;
        let file_head = entries
            .iter()
            .find(|e| e.key == "head")
            .map(|e| parse_value::<Head>(e))
            .transpose()?;
        let mut config = Self::new(head.or(file_head).unwrap_or(Head::Flow));
        if let Some(e) = entries.iter().find(|e| e.key == "stages") {
            config.set_stage_count(parse_value(e)?)?;
        }
        for e in entries.iter().filter(|e| e.key != "head" && e.key != "stages") {
            config.set(&e.key, &e.value).map_err(|err| at_line(e.line, err))?;
        }
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: impl AsRef<Path>, head: Option<Head>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)?;
        Self::parse(&text, head).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        if self.train.batch == 0 {
            return Err(Error::Config("train.batch must be positive".into()));
        }
        if !(self.train.lr.is_finite() && self.train.lr >= 0.0) {
            return Err(Error::Config("train.lr must be finite and non-negative".into()));
        }
        if !(self.train.weight_decay.is_finite() && self.train.weight_decay >= 0.0) {
            return Err(Error::Config("train.weight_decay must be finite and non-negative".into()));
        }
        if self.data.count == 0 || self.data.size == 0 {
            return Err(Error::Config("data.count and data.size must be positive".into()));
        }
        self.encoder.check_image(self.data.size, self.data.size)
    }

    /// Grows or shrinks the stage list; new stages copy the last one.
    pub fn set_stage_count(&mut self, n: usize) -> Result<()> {
        if n == 0 {
            return Err(Error::Config("stages must be positive".into()));
        }
        let last = self.encoder.stages[self.encoder.stages.len() - 1];
        self.encoder.stages.resize(n, last);
        Ok(())
    }

    /// Applies one key. `head` and `stages` are structural and only
    /// accepted through [`RunConfig::parse`].
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn num<T: FromStr>(key: &str, value: &str) -> Result<T> {
            value
                .parse()
                .map_err(|_| Error::Config(format!("{key}: cannot parse {value:?}")))
        }
        match key {
            "similarity" => self.encoder.similarity = value.parse()?,
            "fusion.radius" => self.encoder.fusion_radius = num(key, value)?,
            "fusion.blocks" => self.encoder.fusion_blocks = num(key, value)?,
            "fusion.K" => self.encoder.fusion_prototypes = num(key, value)?,
            "fusion.N" => self.encoder.fusion_iterations = num(key, value)?,
            "output.subgrid" => self.encoder.output_subgrid = num(key, value)?,
            "train.steps" => self.train.steps = num(key, value)?,
            "train.batch" => self.train.batch = num(key, value)?,
            "train.lr" => self.train.lr = num(key, value)?,
            "train.weight_decay" => self.train.weight_decay = num(key, value)?,
            "train.seed" => self.train.seed = num(key, value)?,
            "data.count" => self.data.count = num(key, value)?,
            "data.size" => self.data.size = num(key, value)?,
            "data.max_shift" => self.data.max_shift = num(key, value)?,
            _ => {
                let (stage, field) = key
                    .strip_prefix("stage")
                    .and_then(|rest| rest.split_once('.'))
                    .and_then(|(i, f)| Some((i.parse::<usize>().ok()?, f)))
                    .ok_or_else(|| Error::Config(format!("unknown key {key:?}")))?;
                let count = self.encoder.stages.len();
                if stage == 0 || stage > count {
                    return Err(Error::Config(format!("{key}: stage index outside 1..={count}")));
                }
                let s = &mut self.encoder.stages[stage - 1];
                match field {
                    "patch" => s.patch = num(key, value)?,
                    "blocks" => s.blocks = num(key, value)?,
                    "dim" => s.dim = num(key, value)?,
                    "K" => s.prototypes = num(key, value)?,
                    "N" => s.iterations = num(key, value)?,
                    "heads" => s.heads = num(key, value)?,
                    _ => return Err(Error::Config(format!("unknown key {key:?}"))),
                }
            }
        }
        Ok(())
    }
}

struct Entry {
    line: usize,
    key: String,
    value: String,
}

fn entries(text: &str) -> Result<Vec<Entry>> {
    let mut out: Vec<Entry> = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let content = raw.split('#').next().unwrap_or("").trim();
        if content.is_empty() {
            continue;
        }
        let (key, value) = content
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("line {line}: expected `key = value`")))?;
        let (key, value) = (key.trim(), value.trim());
        if key.is_empty() || value.is_empty() {
            return Err(Error::Config(format!("line {line}: empty key or value")));
        }
        if let Some(prev) = out.iter().find(|e| e.key == key) {
            return Err(Error::Config(format!("line {line}: {key:?} already set on line {}", prev.line)));
        }
        out.push(Entry {
            line,
            key: key.to_string(),
            value: value.to_string(),
        });
    }
    Ok(out)
}

fn parse_value<T>(e: &Entry) -> Result<T>
where
    T: FromStr,
    T::Err: std::fmt::Display,
{
    e.value
        .parse()
        .map_err(|err| Error::Config(format!("line {}: {}: {err}", e.line, e.key)))
}

fn at_line(line: usize, err: Error) -> Error {
    Error::Config(format!("line {line}: {err}"))
}
