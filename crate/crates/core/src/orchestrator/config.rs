//! Run configuration: typed TOML sections per stage plus dotted
//! `key=value` overrides.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use toml::{Table, Value};

use crate::data::{ClassTask, CorpusConfig, PairTag, PairedAvConfig, Profile};
use crate::error::{Error, Result};
use crate::finetune::{FinetuneConfig, TaskKind};
use crate::midtrain::MidtrainConfig;
use crate::pretrain::{ModelConfig, Objective, PretrainConfig};

/// Pre-training method of a results row; `none` is the random-init encoder.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum Method {
    None,
    Pretrained(Objective),
}

impl Method {
    pub const NAMES: &'static str = "none, MAE, CLR, MAE+CLR";

    pub fn objective(self) -> Option<Objective> {
        match self {
            Self::None => None,
            Self::Pretrained(o) => Some(o),
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::None => f.write_str("none"),
            Self::Pretrained(o) => f.write_str(o.name()),
        }
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s == "none" {
            return Ok(Self::None);
        }
        s.parse().map(Self::Pretrained).map_err(|_| Error::InvalidEnum {
            field: "method",
            value: s.into(),
            valid: Self::NAMES.into(),
        })
    }
}

impl TryFrom<String> for Method {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<Method> for String {
    fn from(m: Method) -> Self {
        m.to_string()
    }
}

/// Mid-training setting of a results row.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum MidtrainAxis {
    Off,
    Pair(PairTag),
}

impl MidtrainAxis {
    pub const NAMES: &'static str = "off, en-de, en-it, en-nl";
}

impl fmt::Display for MidtrainAxis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Off => f.write_str("off"),
            Self::Pair(p) => f.write_str(p.name()),
        }
    }
}

impl FromStr for MidtrainAxis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s == "off" {
            return Ok(Self::Off);
        }
        s.parse().map(Self::Pair).map_err(|_| Error::InvalidEnum {
            field: "midtrain",
            value: s.into(),
            valid: Self::NAMES.into(),
        })
    }
}

impl TryFrom<String> for MidtrainAxis {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<MidtrainAxis> for String {
    fn from(m: MidtrainAxis) -> Self {
        m.to_string()
    }
}

/// Synthetic corpora used by every stage.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DataConfig {
    /// Profile of single-stage pre-training runs.
    pub profile: Profile,
    /// Language pair of single-stage mid-training runs.
    pub pair: PairTag,
    /// Task of single-stage fine-tuning runs.
    pub task: TaskKind,
    pub class_task: ClassTask,
    pub n_classes: usize,
    pub paired_examples: usize,
    /// Audio frames per paired example.
    pub paired_frames: usize,
    pub translation_examples: usize,
    pub asr_examples: usize,
    pub class_examples: usize,
    pub corpus: CorpusConfig,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            profile: Profile::NonSpeech,
            pair: PairTag::EnDe,
            task: TaskKind::Ctc,
            class_task: ClassTask::Keyword,
            n_classes: 4,
            paired_examples: 256,
            paired_frames: 48,
            translation_examples: 400,
            asr_examples: 300,
            class_examples: 200,
            corpus: CorpusConfig::default(),
        }
    }
}

impl DataConfig {
    pub fn paired(&self, profile: Profile) -> PairedAvConfig {
        PairedAvConfig {
            n_frames: self.paired_frames,
            speech: self.corpus.speech.clone(),
            ..PairedAvConfig::desk(profile)
        }
    }
}

/// Axes of the experiment grid.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridAxes {
    pub methods: Vec<Method>,
    pub profiles: Vec<Profile>,
    pub midtrain: Vec<MidtrainAxis>,
    pub tasks: Vec<TaskKind>,
}

impl Default for GridAxes {
    fn default() -> Self {
        Self {
            methods: vec![Method::None, Method::Pretrained(Objective::MaeClr)],
            profiles: vec![Profile::NonSpeech],
            midtrain: vec![MidtrainAxis::Off, MidtrainAxis::Pair(PairTag::EnDe)],
            tasks: vec![TaskKind::Ctc],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub seed: u64,
    pub model: ModelConfig,
    pub data: DataConfig,
    pub pretrain: PretrainConfig,
    pub midtrain: MidtrainConfig,
    pub finetune: FinetuneConfig,
    pub grid: GridAxes,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            model: ModelConfig::desk(),
            data: DataConfig::default(),
            pretrain: PretrainConfig {
                steps: 300,
                ..PretrainConfig::default()
            },
            midtrain: MidtrainConfig {
                steps: 1500,
                ..MidtrainConfig::default()
            },
            finetune: FinetuneConfig {
                steps: 4000,
                ..FinetuneConfig::default()
            },
            grid: GridAxes::default(),
        }
    }
}

/// Keys that set every stage's step count at once.
pub const STEPS_KEY: &str = "steps";
const STEP_KEYS: [&str; 3] = ["pretrain.steps", "midtrain.steps", "finetune.steps"];

fn one_line(msg: impl fmt::Display) -> String {
    msg.to_string()
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .collect::<Vec<_>>()
        .join("; ")
}

fn merge(dst: &mut Table, src: Table, prefix: &str) -> Result<()> {
    for (k, v) in src {
        let key = if prefix.is_empty() {
            k.clone()
        } else {
            format!("{prefix}.{k}")
        };
        match (dst.get_mut(&k), v) {
            (Some(Value::Table(d)), Value::Table(s)) => merge(d, s, &key)?,
            (Some(slot), v) => *slot = coerce(slot, v, &key)?,
            (None, _) => return Err(Error::Config(format!("unknown key `{key}`"))),
        }
    }
    Ok(())
}

fn coerce(old: &Value, new: Value, key: &str) -> Result<Value> {
    match (old, new) {
        (Value::Float(_), Value::Integer(i)) => Ok(Value::Float(i as f64)),
        (Value::Table(_), v) if !v.is_table() => Err(Error::Config(format!("`{key}` is a section, not a value"))),
        (_, v) => Ok(v),
    }
}

/// Parses an override value as a TOML literal, falling back to a bare
/// string (so `objective=MAE+CLR` needs no quotes).
fn parse_literal(raw: &str, old: &Value) -> Value {
    let parsed = format!("v = {raw}")
        .parse::<Table>()
        .ok()
        .and_then(|mut t| t.remove("v"));
    match parsed {
        Some(v) if !old.is_str() || v.is_str() => v,
        _ => Value::String(raw.into()),
    }
}

fn set_path(root: &mut Table, key: &str, raw: &str) -> Result<()> {
    let parts: Vec<&str> = key.split('.').collect();
    let mut table = root;
    for (i, part) in parts.iter().enumerate() {
        if i + 1 == parts.len() {
            let old = table
                .get(*part)
                .ok_or_else(|| Error::Config(format!("unknown key `{key}`")))?;
            let v = coerce(old, parse_literal(raw, old), key)?;
            table.insert(part.to_string(), v);
            return Ok(());
        }
        table = match table.get_mut(*part) {
            Some(Value::Table(t)) => t,
            _ => return Err(Error::Config(format!("unknown key `{key}`"))),
        };
    }
    Err(Error::Config("empty override key".into()))
}

impl RunConfig {
    /// Defaults, then the TOML document `file` (any subset of keys), then
    /// each `key=value` override in order.
    pub fn load(file: Option<&str>, overrides: &[String]) -> Result<Self> {
        let mut table = match Value::try_from(Self::default()).map_err(|e| Error::Config(one_line(e)))? {
            Value::Table(t) => t,
            _ => return Err(Error::Config("configuration must serialize to a table".into())),
        };
        if let Some(text) = file {
            let doc: Table = text.parse().map_err(|e| Error::Config(one_line(e)))?;
            merge(&mut table, doc, "")?;
        }
        for o in overrides {
            let (key, raw) = o
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override `{o}` is not key=value")))?;
            let key = key.trim();
            if key == STEPS_KEY {
                for k in STEP_KEYS {
                    set_path(&mut table, k, raw.trim())?;
                }
            } else {
                set_path(&mut table, key, raw.trim())?;
            }
        }
        let cfg: Self = Value::Table(table).try_into().map_err(|e| Error::Config(one_line(e)))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(one_line(e)))
    }

    pub fn validate(&self) -> Result<()> {
        let g = &self.grid;
        if g.methods.is_empty() || g.midtrain.is_empty() || g.tasks.is_empty() {
            return Err(Error::Config("grid axes must be non-empty".into()));
        }
        if g.profiles.is_empty() && g.methods.iter().any(|m| *m != Method::None) {
            return Err(Error::Config("pre-trained methods need at least one profile".into()));
        }
        if self.data.corpus.speech.n_mels != self.model.audio.n_mels {
            return Err(Error::Config(format!(
                "corpus has {} mel bins but the audio encoder expects {}",
                self.data.corpus.speech.n_mels, self.model.audio.n_mels
            )));
        }
        self.data.corpus.validate()?;
        Ok(())
    }

    /// Mid-training settings with the encoder shape taken from the model.
    pub fn midtrain_config(&self) -> MidtrainConfig {
        MidtrainConfig {
            audio: self.model.audio.clone(),
            ..self.midtrain.clone()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_toml() {
        let c = RunConfig::default();
        let text = c.to_toml().unwrap();
        assert_eq!(RunConfig::load(Some(&text), &[]).unwrap(), c);
    }

    #[test]
    fn partial_file_and_overrides_apply_in_order() {
        let file = "seed = 4\n[pretrain]\nsteps = 7\nlr = 1\n";
        let c = RunConfig::load(
            Some(file),
            &[
                "pretrain.steps=9".into(),
                "pretrain.loss.objective=MAE".into(),
                "data.pair=en-nl".into(),
            ],
        )
        .unwrap();
        assert_eq!(c.seed, 4);
        assert_eq!(c.pretrain.steps, 9);
        assert_eq!(c.pretrain.lr, 1.0);
        assert_eq!(c.pretrain.loss.objective, Objective::Mae);
        assert_eq!(c.data.pair, PairTag::EnNl);
        assert_eq!(c.midtrain.steps, RunConfig::default().midtrain.steps);
    }

    #[test]
    fn global_steps_sets_every_stage() {
        let c = RunConfig::load(None, &["steps=0".into()]).unwrap();
        assert_eq!((c.pretrain.steps, c.midtrain.steps, c.finetune.steps), (0, 0, 0));
    }

    #[test]
    fn grid_axes_accept_lists() {
        let c = RunConfig::load(
            None,
            &[
                r#"grid.methods=["none", "MAE", "CLR"]"#.into(),
                r#"grid.midtrain=["off", "en-it"]"#.into(),
            ],
        )
        .unwrap();
        assert_eq!(c.grid.methods.len(), 3);
        assert_eq!(c.grid.midtrain[1], MidtrainAxis::Pair(PairTag::EnIt));
    }

    #[test]
    fn invalid_enum_names_valid_values() {
        let err = RunConfig::load(None, &["pretrain.loss.objective=BYOL".into()])
            .unwrap_err()
            .to_string();
        assert!(err.contains("MAE+CLR"), "{err}");
        assert!(!err.contains('\n'));
        let err = RunConfig::load(None, &[r#"grid.methods=["none", "SimCLR"]"#.into()])
            .unwrap_err()
            .to_string();
        assert!(err.contains("none, MAE, CLR, MAE+CLR"), "{err}");
        let err = RunConfig::load(None, &["data.profile=studio".into()])
            .unwrap_err()
            .to_string();
        assert!(err.contains("non-speech"), "{err}");
    }

    #[test]
    fn unknown_keys_are_rejected() {
        for o in ["pretrain.stepz=3", "nope=1", "pretrain.steps.x=1"] {
            assert!(
                matches!(RunConfig::load(None, &[o.into()]), Err(Error::Config(_))),
                "{o}"
            );
        }
        assert!(RunConfig::load(Some("[pretrain]\nstepz = 1\n"), &[]).is_err());
        assert!(RunConfig::load(None, &["no-equals".into()]).is_err());
    }

    #[test]
    fn empty_axes_are_rejected() {
        assert!(RunConfig::load(None, &["grid.tasks=[]".into()]).is_err());
    }
}
