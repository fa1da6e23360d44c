//! The experiment grid: every (method, profile, mid-training) row is
//! pre-trained, optionally mid-trained and fine-tuned on each task.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::checkpoint::{Checkpoint, CheckpointStore};
use super::config::{Method, MidtrainAxis, RunConfig};
use crate::data::{
    gen_paired_av, gen_toy_asr, gen_toy_classification, gen_toy_translation, PairTag, PairedAvDataset, Profile,
    ToyAsrCorpus, ToyClassCorpus, ToyParallelCorpus,
};
use crate::error::{Error, Result};
use crate::finetune::{finetune_run, FinetuneConfig, FinetuneOutcome, FinetuneTask, Metric, TaskKind};
use crate::midtrain::{midtrain_run, MidtrainConfig, MidtrainOutcome};
use crate::pretrain::{pretrain_dataset, LossOptions, Objective, PretrainConfig, PretrainOutcome};
use crate::seed;

/// Stage runner of one configuration. Corpora are generated on first use
/// and every stage seed derives from the run seed and a stage key, so a
/// stage run alone reproduces the same stage inside the grid.
pub struct Pipeline<'a> {
    cfg: &'a RunConfig,
    paired: BTreeMap<Profile, PairedAvDataset>,
    translation: BTreeMap<PairTag, ToyParallelCorpus>,
    asr: Option<ToyAsrCorpus>,
    class: Option<ToyClassCorpus>,
}

impl<'a> Pipeline<'a> {
    pub fn new(cfg: &'a RunConfig) -> Self {
        Self {
            cfg,
            paired: BTreeMap::new(),
            translation: BTreeMap::new(),
            asr: None,
            class: None,
        }
    }

    pub fn paired(&mut self, profile: Profile) -> Result<&PairedAvDataset> {
        if !self.paired.contains_key(&profile) {
            let d = &self.cfg.data;
            let s = seed::derive(self.cfg.seed, &format!("data/paired/{}", profile.name()));
            self.paired
                .insert(profile, gen_paired_av(s, d.paired_examples, &d.paired(profile))?);
        }
        Ok(&self.paired[&profile])
    }

    pub fn translation(&mut self, pair: PairTag) -> Result<&ToyParallelCorpus> {
        if !self.translation.contains_key(&pair) {
            let d = &self.cfg.data;
            let s = seed::derive(self.cfg.seed, &format!("data/translation/{}", pair.name()));
            self.translation
                .insert(pair, gen_toy_translation(s, pair, d.translation_examples, &d.corpus)?);
        }
        Ok(&self.translation[&pair])
    }

    pub fn asr(&mut self) -> Result<&ToyAsrCorpus> {
        if self.asr.is_none() {
            let d = &self.cfg.data;
            self.asr = Some(gen_toy_asr(
                seed::derive(self.cfg.seed, "data/asr"),
                d.asr_examples,
                &d.corpus,
            )?);
        }
        Ok(self.asr.as_ref().expect("generated above"))
    }

    pub fn class(&mut self) -> Result<&ToyClassCorpus> {
        if self.class.is_none() {
            let d = &self.cfg.data;
            let s = seed::derive(self.cfg.seed, "data/class");
            self.class = Some(gen_toy_classification(
                s,
                d.class_task,
                d.n_classes,
                d.class_examples,
                &d.corpus,
            )?);
        }
        Ok(self.class.as_ref().expect("generated above"))
    }

    /// Stage-`none` root shared by every row.
    pub fn root(&self) -> Result<Checkpoint> {
        Checkpoint::init(&self.cfg.model, seed::derive(self.cfg.seed, "init"))
    }

    /// Pre-trains `init` with `objective` on the paired corpus of `profile`.
    pub fn pretrain(
        &mut self,
        init: &Checkpoint,
        objective: Objective,
        profile: Profile,
        log: Option<&mut dyn Write>,
    ) -> Result<PretrainOutcome> {
        let cfg = self.cfg;
        let pc = PretrainConfig {
            seed: seed::derive(cfg.seed, &format!("pretrain/{objective}/{}", profile.name())),
            loss: LossOptions {
                objective,
                ..cfg.pretrain.loss.clone()
            },
            ..cfg.pretrain.clone()
        };
        pretrain_dataset(self.paired(profile)?, init, &pc, log)
    }

    /// Mid-trains `upstream` on the `pair` corpus. The seed is keyed by the
    /// upstream objective and profile.
    pub fn midtrain(
        &mut self,
        upstream: &Checkpoint,
        pair: PairTag,
        log: Option<&mut dyn Write>,
    ) -> Result<MidtrainOutcome> {
        let cfg = self.cfg;
        let m = &upstream.meta;
        let key = format!(
            "midtrain/{}/{}/{}",
            m.objective.map_or(Method::None, Method::Pretrained),
            m.profile.map_or("-", Profile::name),
            pair.name()
        );
        let mc = MidtrainConfig {
            seed: seed::derive(cfg.seed, &key),
            ..cfg.midtrain_config()
        };
        midtrain_run(upstream, self.translation(pair)?, &mc, log)
    }

    /// Fine-tunes `ckpt` on `kind`. The seed depends on the task only, so
    /// every encoder gets the same head initialization and batches.
    pub fn finetune(
        &mut self,
        ckpt: &Checkpoint,
        kind: TaskKind,
        log: Option<&mut dyn Write>,
    ) -> Result<FinetuneOutcome> {
        let fc = FinetuneConfig {
            seed: seed::derive(self.cfg.seed, &format!("finetune/{}", kind.name())),
            ..self.cfg.finetune.clone()
        };
        let task = self.task(kind)?;
        finetune_run(ckpt, task, &fc, log)
    }

    /// The corpus of `kind`.
    pub fn task(&mut self, kind: TaskKind) -> Result<FinetuneTask<'_>> {
        Ok(match kind {
            TaskKind::Ctc => FinetuneTask::Asr(self.asr()?),
            TaskKind::Framewise => FinetuneTask::Phoneme(self.asr()?),
            TaskKind::Classification => FinetuneTask::Classify(self.class()?),
        })
    }
}

/// One task result of a row.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Cell {
    pub task: TaskKind,
    pub metric: Metric,
    pub value: Option<f64>,
    /// Failure message of any stage feeding this cell.
    pub error: Option<String>,
    /// Digest of the fine-tuned checkpoint.
    pub checkpoint: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridRow {
    pub method: Method,
    /// `None` for the random-init row.
    pub profile: Option<Profile>,
    pub midtrain: MidtrainAxis,
    pub cells: Vec<Cell>,
}

impl GridRow {
    pub fn cell(&self, task: TaskKind) -> Option<&Cell> {
        self.cells.iter().find(|c| c.task == task)
    }

    fn profile_name(&self) -> &'static str {
        self.profile.map_or("-", Profile::name)
    }
}

/// Average relative improvement of a comparison, grouped by one axis.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Improvement {
    pub title: String,
    pub task: TaskKind,
    /// `(group, mean relative improvement, pairs averaged)`.
    pub groups: Vec<(String, f64, usize)>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResultsTable {
    pub tasks: Vec<TaskKind>,
    pub rows: Vec<GridRow>,
}

fn relative(metric: Metric, base: f64, new: f64) -> Option<f64> {
    if base == 0.0 {
        return None;
    }
    Some(if metric.lower_is_better() {
        (base - new) / base
    } else {
        (new - base) / base
    })
}

fn mean_groups(pairs: BTreeMap<String, Vec<f64>>) -> Vec<(String, f64, usize)> {
    pairs
        .into_iter()
        .map(|(k, v)| (k, v.iter().sum::<f64>() / v.len() as f64, v.len()))
        .collect()
}

impl ResultsTable {
    pub fn row(&self, method: Method, profile: Option<Profile>, midtrain: MidtrainAxis) -> Option<&GridRow> {
        self.rows
            .iter()
            .find(|r| r.method == method && r.profile == profile && r.midtrain == midtrain)
    }

    pub fn failed_cells(&self) -> usize {
        self.rows
            .iter()
            .flat_map(|r| &r.cells)
            .filter(|c| c.error.is_some())
            .count()
    }

    /// Relative improvements from mid-training (grouped by profile and by
    /// method) and from pre-training over the random-init row.
    pub fn summaries(&self) -> Vec<Improvement> {
        let mut out = Vec::new();
        for &task in &self.tasks {
            let value = |r: &GridRow| r.cell(task).and_then(|c| c.value);
            let metric = task.metric();
            let mut by_profile: BTreeMap<String, Vec<f64>> = BTreeMap::new();
            let mut by_method: BTreeMap<String, Vec<f64>> = BTreeMap::new();
            let mut by_pretrain: BTreeMap<String, Vec<f64>> = BTreeMap::new();
            for r in &self.rows {
                let Some(v) = value(r) else { continue };
                if r.midtrain != MidtrainAxis::Off {
                    if let Some(base) = self.row(r.method, r.profile, MidtrainAxis::Off).and_then(value) {
                        if let Some(x) = relative(metric, base, v) {
                            by_profile.entry(r.profile_name().into()).or_default().push(x);
                            by_method.entry(r.method.to_string()).or_default().push(x);
                        }
                    }
                }
                if r.method != Method::None {
                    if let Some(base) = self.row(Method::None, None, r.midtrain).and_then(value) {
                        if let Some(x) = relative(metric, base, v) {
                            let key = format!("{} {}", r.method, r.profile_name());
                            by_pretrain.entry(key).or_default().push(x);
                        }
                    }
                }
            }
            for (title, groups) in [
                ("mid-training, by pre-training profile", by_profile),
                ("mid-training, by pre-training method", by_method),
                ("pre-training over random init", by_pretrain),
            ] {
                if !groups.is_empty() {
                    out.push(Improvement {
                        title: title.into(),
                        task,
                        groups: mean_groups(groups),
                    });
                }
            }
        }
        out
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("method,profile,midtrain,task,metric,value,status,checkpoint\n");
        for r in &self.rows {
            for c in &r.cells {
                let value = c.value.map(|v| v.to_string()).unwrap_or_default();
                let status = match &c.error {
                    Some(e) => format!("\"failed: {}\"", e.replace('"', "'")),
                    None => "ok".into(),
                };
                let _ = writeln!(
                    s,
                    "{},{},{},{},{},{},{},{}",
                    r.method,
                    r.profile_name(),
                    r.midtrain,
                    c.task,
                    c.metric,
                    value,
                    status,
                    c.checkpoint.as_deref().unwrap_or("")
                );
            }
        }
        s
    }

    /// Aligned text table (one row per method/profile/mid-training setting,
    /// one column per task) followed by the improvement summaries.
    pub fn to_text(&self) -> String {
        let mut header = vec!["method".to_string(), "PT".into(), "MT".into()];
        header.extend(self.tasks.iter().map(|t| format!("{} {}", t, t.metric())));
        let mut lines = vec![header];
        for r in &self.rows {
            let mut line = vec![r.method.to_string(), r.profile_name().into(), r.midtrain.to_string()];
            for &t in &self.tasks {
                line.push(match r.cell(t) {
                    Some(Cell { value: Some(v), .. }) => format!("{v:.4}"),
                    Some(Cell { error: Some(_), .. }) => "failed".into(),
                    _ => "-".into(),
                });
            }
            lines.push(line);
        }
        let widths: Vec<usize> = (0..lines[0].len())
            .map(|i| lines.iter().map(|l| l[i].chars().count()).max().unwrap_or(0))
            .collect();
        let mut s = String::new();
        for l in &lines {
            let cells: Vec<String> = l.iter().zip(&widths).map(|(c, w)| format!("{c:<w$}")).collect();
            let _ = writeln!(s, "{}", cells.join("  ").trim_end());
        }
        for imp in self.summaries() {
            let _ = writeln!(
                s,
                "\nAverage relative {} improvement with {}",
                imp.task.metric(),
                imp.title
            );
            for (group, mean, n) in &imp.groups {
                let _ = writeln!(s, "  {group:<24} {:+.1}% (n={n})", mean * 100.0);
            }
        }
        s
    }

    /// Writes `results.csv`, `results.txt` and `results.json` into `dir`.
    pub fn write(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("results.csv"), self.to_csv())?;
        std::fs::write(dir.join("results.txt"), self.to_text())?;
        std::fs::write(dir.join("results.json"), serde_json::to_vec_pretty(self)?)?;
        Ok(())
    }
}

fn keep(store: Option<&CheckpointStore>, c: &Checkpoint) -> Result<()> {
    if let Some(s) = store {
        s.put(c)?;
    }
    Ok(())
}

/// Runs every cell of `cfg.grid`.
///
/// The random-init root, each pre-trained encoder (per method and profile)
/// and each mid-trained encoder are computed once and shared by the rows
/// that use them. Stage seeds derive from the run seed and the stage key,
/// so all rows fine-tune with identical head initializations and batches.
/// A failing stage marks the affected cells failed and the grid continues.
/// With a `store`, every checkpoint is saved there by digest.
pub fn run_grid(
    cfg: &RunConfig,
    store: Option<&CheckpointStore>,
    mut log: Option<&mut dyn Write>,
) -> Result<ResultsTable> {
    cfg.validate()?;
    let g = &cfg.grid;
    let mut pipe = Pipeline::new(cfg);
    let root = pipe.root()?;
    keep(store, &root)?;
    let mut note = |msg: String| {
        if let Some(w) = log.as_deref_mut() {
            let _ = writeln!(w, "{msg}");
        }
    };

    let mut rows = Vec::new();
    for &method in &g.methods {
        let profiles: Vec<Option<Profile>> = match method {
            Method::None => vec![None],
            Method::Pretrained(_) => g.profiles.iter().copied().map(Some).collect(),
        };
        for profile in profiles {
            let pname = profile.map_or("-", Profile::name);
            let encoder: Result<Checkpoint> = match (method.objective(), profile) {
                (Some(objective), Some(p)) => {
                    note(format!("pretrain {method} on {pname}"));
                    pipe.pretrain(&root, objective, p, None).map(|o| o.checkpoint)
                }
                _ => Ok(root.clone()),
            };
            if let Ok(c) = &encoder {
                keep(store, c)?;
            }
            for &mt in &g.midtrain {
                let upstream: Result<Checkpoint> = match (&encoder, mt) {
                    (Err(e), _) => Err(Error::Validation(format!("pretrain failed: {e}"))),
                    (Ok(c), MidtrainAxis::Off) => Ok(c.clone()),
                    (Ok(c), MidtrainAxis::Pair(pair)) => {
                        note(format!("midtrain {method}/{pname} on {pair}"));
                        pipe.midtrain(c, pair, None).map(|o| o.checkpoint)
                    }
                };
                if let Ok(c) = &upstream {
                    keep(store, c)?;
                }
                let mut cells = Vec::new();
                for &task in &g.tasks {
                    let outcome = match &upstream {
                        Ok(c) => pipe.finetune(c, task, None),
                        Err(e) => Err(Error::Validation(e.to_string())),
                    };
                    let cell = match outcome {
                        Ok(o) => {
                            keep(store, &o.checkpoint)?;
                            Cell {
                                task,
                                metric: o.result.metric,
                                value: Some(o.result.value),
                                error: None,
                                checkpoint: Some(o.checkpoint.digest()?),
                            }
                        }
                        Err(e) => Cell {
                            task,
                            metric: task.metric(),
                            value: None,
                            error: Some(e.to_string()),
                            checkpoint: None,
                        },
                    };
                    note(format!(
                        "{method} {pname} {mt} {task}: {}",
                        cell.value.map_or_else(|| "failed".to_string(), |v| format!("{v:.4}"))
                    ));
                    cells.push(cell);
                }
                rows.push(GridRow {
                    method,
                    profile,
                    midtrain: mt,
                    cells,
                });
            }
        }
    }
    Ok(ResultsTable {
        tasks: g.tasks.clone(),
        rows,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn zero_steps() -> RunConfig {
        let mut c = RunConfig::load(None, &["steps=0".into()]).unwrap();
        c.data.paired_examples = 4;
        c.data.translation_examples = 10;
        c.data.asr_examples = 10;
        c.data.class_examples = 10;
        c
    }

    #[test]
    fn single_cell_with_no_training_equals_random_init() {
        let mut c = zero_steps();
        c.grid.methods = vec![Method::Pretrained(Objective::Mae)];
        c.grid.profiles = vec![Profile::Clean];
        c.grid.midtrain = vec![MidtrainAxis::Off];
        let t = run_grid(&c, None, None).unwrap();
        assert_eq!(t.rows.len(), 1);
        let mut pipe = Pipeline::new(&c);
        let root = pipe.root().unwrap();
        let want = pipe.finetune(&root, TaskKind::Ctc, None).unwrap().result.value;
        assert_eq!(t.rows[0].cells[0].value, Some(want));
    }

    #[test]
    fn rows_cover_axes_and_lineage_resolves() {
        let dir = tempfile::tempdir().unwrap();
        let store = CheckpointStore::new(dir.path());
        let mut c = zero_steps();
        c.grid.methods = vec![Method::Pretrained(Objective::Mae), Method::Pretrained(Objective::Clr)];
        c.grid.profiles = vec![Profile::Clean, Profile::NonSpeech];
        let t = run_grid(&c, Some(&store), None).unwrap();
        assert_eq!(t.rows.len(), 8);
        assert_eq!(t.failed_cells(), 0);
        for r in &t.rows {
            let digest = r.cells[0].checkpoint.as_ref().unwrap();
            let ck = store.get(digest).unwrap();
            let chain = store.verify_lineage(&ck).unwrap();
            let want = if r.midtrain == MidtrainAxis::Off { 2 } else { 3 };
            assert_eq!(chain.len(), want);
        }
        let again = run_grid(&c, None, None).unwrap();
        assert_eq!(again.to_csv(), t.to_csv());
        assert_eq!(again.to_text(), t.to_text());
    }

    #[test]
    fn failing_stage_is_recorded_and_grid_continues() {
        let mut c = zero_steps();
        c.grid.methods = vec![Method::None, Method::Pretrained(Objective::Clr)];
        c.grid.midtrain = vec![MidtrainAxis::Off];
        c.data.paired_examples = 1;
        c.pretrain.steps = 1;
        let t = run_grid(&c, None, None).unwrap();
        assert_eq!(t.rows.len(), 2);
        assert!(t.rows[0].cells[0].value.is_some());
        assert!(t.rows[1].cells[0].error.is_some());
        assert!(t.to_text().contains("failed"));
        assert!(t.to_csv().contains("failed: "));
    }

    #[test]
    fn summaries_compare_against_baselines() {
        let cell = |v: f64| Cell {
            task: TaskKind::Ctc,
            metric: Metric::Wer,
            value: Some(v),
            error: None,
            checkpoint: None,
        };
        let row = |method, profile, midtrain, v| GridRow {
            method,
            profile,
            midtrain,
            cells: vec![cell(v)],
        };
        let m = Method::Pretrained(Objective::MaeClr);
        let de = MidtrainAxis::Pair(PairTag::EnDe);
        let t = ResultsTable {
            tasks: vec![TaskKind::Ctc],
            rows: vec![
                row(Method::None, None, MidtrainAxis::Off, 0.4),
                row(m, Some(Profile::NonSpeech), MidtrainAxis::Off, 0.2),
                row(m, Some(Profile::NonSpeech), de, 0.1),
            ],
        };
        let s = t.summaries();
        assert_eq!(s[0].groups, vec![("non-speech".to_string(), 0.5, 1)]);
        assert_eq!(s[1].groups, vec![("MAE+CLR".to_string(), 0.5, 1)]);
        assert_eq!(s[2].groups, vec![("MAE+CLR non-speech".to_string(), 0.5, 1)]);
        let text = t.to_text();
        assert!(text.contains("+50.0%"));
        assert!(text.lines().next().unwrap().starts_with("method"));
    }
}
