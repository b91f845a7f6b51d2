//! Model configuration and the flat `key = value` text format it is stored in.

use std::fmt::Write as _;

use indexmap::IndexMap;

use crate::audio::DEFAULT_PRE_EMPHASIS;
use crate::error::{Error, Result};
use crate::fms::FmsKind;
use crate::tensor::Real;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Frontend {
    /// Ordinary learnable convolution; inputs are pre-emphasized.
    PlainConv,
    /// Learnable bandpass filterbank; inputs are layer-normalized.
    SincConv,
}

impl Frontend {
    pub fn name(self) -> &'static str {
        match self {
            Frontend::PlainConv => "plain_conv",
            Frontend::SincConv => "sinc_conv",
        }
    }

    fn parse(s: &str) -> Result<Self> {
        match s {
            "plain_conv" => Ok(Frontend::PlainConv),
            "sinc_conv" => Ok(Frontend::SincConv),
            _ => Err(Error::Config(format!(
                "unknown frontend {s:?}, expected plain_conv or sinc_conv"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub frontend: Frontend,
    pub frontend_filter_len: usize,
    pub frontend_filters: usize,
    /// `(repeat count, filters)` per residual block group.
    pub block_group_specs: Vec<(usize, usize)>,
    pub pool_width: usize,
    /// `None` disables feature map scaling.
    pub fms_kind: Option<FmsKind>,
    pub gru_hidden: usize,
    pub embedding_dim: usize,
    /// Size of the training-only classification layer; 0 builds none.
    pub n_speakers: usize,
    pub input_len: usize,
    pub sample_rate: u32,
    /// Coefficient used when the front end is a plain convolution.
    pub pre_emphasis: Real,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            frontend: Frontend::SincConv,
            frontend_filter_len: 251,
            frontend_filters: 128,
            block_group_specs: vec![(2, 128), (4, 256)],
            pool_width: 3,
            fms_kind: Some(FmsKind::MulAdd),
            gru_hidden: 1024,
            embedding_dim: 1024,
            n_speakers: 0,
            input_len: 59049,
            sample_rate: 16000,
            pre_emphasis: DEFAULT_PRE_EMPHASIS,
        }
    }
}

/// Keys in canonical order.
pub const MODEL_KEYS: [&str; 12] = [
    "frontend",
    "frontend_filter_len",
    "frontend_filters",
    "block_group_specs",
    "pool_width",
    "fms_kind",
    "gru_hidden",
    "embedding_dim",
    "n_speakers",
    "input_len",
    "sample_rate",
    "pre_emphasis",
];

impl ModelConfig {
    /// Small configuration that trains in about a minute on one core.
    pub fn toy() -> Self {
        ModelConfig {
            frontend_filters: 16,
            block_group_specs: vec![(2, 16), (4, 32)],
            gru_hidden: 64,
            embedding_dim: 64,
            n_speakers: 8,
            input_len: 6561,
            ..ModelConfig::default()
        }
    }

    pub fn block_count(&self) -> usize {
        self.block_group_specs.iter().map(|g| g.0).sum()
    }

    /// Time steps after the front end and after each block, for the
    /// configured input length.
    pub fn time_steps(&self) -> Vec<usize> {
        let mut t = self.input_len / self.pool_width.max(1);
        let mut out = vec![t];
        for _ in 0..self.block_count() {
            t /= self.pool_width.max(1);
            out.push(t);
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, why: &str| Err(Error::Config(format!("{field}: {why}")));
        if self.frontend_filter_len.is_multiple_of(2) {
            return bad("frontend_filter_len", "must be odd");
        }
        if self.frontend_filters == 0 {
            return bad("frontend_filters", "must be positive");
        }
        if self.block_group_specs.is_empty() {
            return bad("block_group_specs", "needs at least one group");
        }
        if self
            .block_group_specs
            .iter()
            .any(|&(n, f)| n == 0 || f == 0)
        {
            return bad(
                "block_group_specs",
                "repeat counts and filters must be positive",
            );
        }
        if self.pool_width == 0 {
            return bad("pool_width", "must be positive");
        }
        if self.gru_hidden == 0 {
            return bad("gru_hidden", "must be positive");
        }
        if self.embedding_dim == 0 {
            return bad("embedding_dim", "must be positive");
        }
        if self.n_speakers == 1 {
            return bad(
                "n_speakers",
                "a classifier needs at least 2 speakers (or 0 for none)",
            );
        }
        if self.sample_rate == 0 {
            return bad("sample_rate", "must be positive");
        }
        if !(0.0..1.0).contains(&self.pre_emphasis) {
            return bad("pre_emphasis", "must lie in [0, 1)");
        }
        if self.time_steps().last() == Some(&0) {
            return bad(
                "input_len",
                &format!(
                    "{} samples pool to nothing through {} pooling stages of width {}",
                    self.input_len,
                    self.block_count() + 1,
                    self.pool_width
                ),
            );
        }
        Ok(())
    }

    fn value_of(&self, key: &str) -> String {
        match key {
            "frontend" => self.frontend.name().to_string(),
            "frontend_filter_len" => self.frontend_filter_len.to_string(),
            "frontend_filters" => self.frontend_filters.to_string(),
            "block_group_specs" => self
                .block_group_specs
                .iter()
                .map(|(n, f)| format!("{n}x{f}"))
                .collect::<Vec<_>>()
                .join(","),
            "pool_width" => self.pool_width.to_string(),
            "fms_kind" => self.fms_kind.map_or("none", FmsKind::name).to_string(),
            "gru_hidden" => self.gru_hidden.to_string(),
            "embedding_dim" => self.embedding_dim.to_string(),
            "n_speakers" => self.n_speakers.to_string(),
            "input_len" => self.input_len.to_string(),
            "sample_rate" => self.sample_rate.to_string(),
            "pre_emphasis" => format!("{:?}", self.pre_emphasis),
            _ => unreachable!("unknown config key {key}"),
        }
    }

    /// Canonical text: every key in fixed order, one per line.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for key in MODEL_KEYS {
            let _ = writeln!(s, "{key} = {}", self.value_of(key));
        }
        s
    }

    /// Name of the first field whose value differs, if any.
    pub fn first_difference(&self, other: &ModelConfig) -> Option<&'static str> {
        MODEL_KEYS
            .into_iter()
            .find(|k| self.value_of(k) != other.value_of(k))
    }

    /// Parse a config file containing only model keys. Missing keys keep
    /// their defaults.
    pub fn parse(text: &str, origin: &str) -> Result<Self> {
        let mut kv = KeyValues::parse(text, origin)?;
        let cfg = ModelConfig::take_from(&mut kv, ModelConfig::default())?;
        kv.reject_leftovers()?;
        Ok(cfg)
    }

    /// Consume the model keys from `kv`, starting from `base`.
    pub fn take_from(kv: &mut KeyValues, base: ModelConfig) -> Result<Self> {
        let mut c = base;
        for key in MODEL_KEYS {
            let Some(entry) = kv.take(key) else { continue };
            let v = entry.value.as_str();
            let parsed: Result<()> = (|| {
                match key {
                    "frontend" => c.frontend = Frontend::parse(v)?,
                    "frontend_filter_len" => c.frontend_filter_len = number(v)?,
                    "frontend_filters" => c.frontend_filters = number(v)?,
                    "block_group_specs" => c.block_group_specs = parse_groups(v)?,
                    "pool_width" => c.pool_width = number(v)?,
                    "fms_kind" => c.fms_kind = FmsKind::parse_optional(v)?,
                    "gru_hidden" => c.gru_hidden = number(v)?,
                    "embedding_dim" => c.embedding_dim = number(v)?,
                    "n_speakers" => c.n_speakers = number(v)?,
                    "input_len" => c.input_len = number(v)?,
                    "sample_rate" => c.sample_rate = number(v)?,
                    "pre_emphasis" => c.pre_emphasis = number(v)?,
                    _ => unreachable!(),
                }
                Ok(())
            })();
            parsed.map_err(|e| kv.error(entry.line, &format!("{key}: {}", strip(e))))?;
        }
        c.validate()?;
        Ok(c)
    }
}

fn strip(e: Error) -> String {
    match e {
        Error::Config(m) => m,
        other => other.to_string(),
    }
}

pub fn number<T: std::str::FromStr>(v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| Error::Config(format!("invalid number {v:?}")))
}

fn parse_groups(v: &str) -> Result<Vec<(usize, usize)>> {
    v.split(',')
        .map(|part| {
            let (n, f) = part.trim().split_once('x').ok_or_else(|| {
                Error::Config(format!("expected <repeat>x<filters>, got {part:?}"))
            })?;
            Ok((number(n.trim())?, number(f.trim())?))
        })
        .collect()
}

#[derive(Clone, Debug)]
pub struct Entry {
    pub line: usize,
    pub value: String,
}

/// Parsed `key = value` lines. `#` starts a comment; blank lines are ignored.
#[derive(Clone, Debug)]
pub struct KeyValues {
    origin: String,
    entries: IndexMap<String, Entry>,
}

impl KeyValues {
    pub fn parse(text: &str, origin: &str) -> Result<Self> {
        let mut entries = IndexMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let err = |message: String| Error::Parse {
                path: origin.to_string(),
                line: i + 1,
                message,
            };
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| err(format!("expected key = value, got {line:?}")))?;
            let (k, v) = (k.trim(), v.trim());
            if k.is_empty() || v.is_empty() {
                return Err(err(format!("empty key or value in {line:?}")));
            }
            let entry = Entry {
                line: i + 1,
                value: v.to_string(),
            };
            if entries.insert(k.to_string(), entry).is_some() {
                return Err(err(format!("duplicate key {k:?}")));
            }
        }
        Ok(KeyValues {
            origin: origin.to_string(),
            entries,
        })
    }

    pub fn take(&mut self, key: &str) -> Option<Entry> {
        self.entries.shift_remove(key)
    }

    /// Take and parse `key`, reporting failures at its line.
    pub fn take_parsed<T: std::str::FromStr>(&mut self, key: &str) -> Result<Option<T>> {
        match self.take(key) {
            None => Ok(None),
            Some(e) => number(&e.value)
                .map(Some)
                .map_err(|err| self.error(e.line, &format!("{key}: {}", strip(err)))),
        }
    }

    pub fn error(&self, line: usize, message: &str) -> Error {
        Error::Parse {
            path: self.origin.clone(),
            line,
            message: message.to_string(),
        }
    }

    pub fn reject_leftovers(&self) -> Result<()> {
        match self.entries.first() {
            Some((k, e)) => Err(self.error(e.line, &format!("unknown key {k:?}"))),
            None => Ok(()),
        }
    }
}
