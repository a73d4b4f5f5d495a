//! Batch experiment runner: corpus generation, training suites per label
//! condition, the corruption-rate sweep and report tables.
//!
//! Every suite directory holds the resolved `config.toml`, the transformed
//! `train_manifest.csv`, an audit file for label transforms, one
//! `run-<seed>/` directory per seed (`checkpoint.bin`, `loss.csv`,
//! `config.toml`, `metrics.csv`) and `summary.csv`.

mod report;

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::dataset::{
    self, load_manifest, synth_corpus, CorpusSpec, LoadedSplit, Manifest, SplitRole, TagVocabulary,
};
use crate::dsp::FeatureExtractor;
use crate::error::{Error, Result};
use crate::eval::{aggregate_runs, paired_t_test, Aggregate, EvalReport, TTestResult};
use crate::noise::{corrupt_labels, shuffle_labels, sweep_plan};
use crate::rng::{stream_rng, Stream};
use crate::tagger::{TaggerConfig, TaggerModel};
use crate::trainer::{train_run, EvalSet, RunResult, TrainConfig};

pub use dataset::CorpusPaths;
pub use report::{cmd_report, read_suite, ReportRow, ReportTable, SuiteRecord};

/// Which labels a suite trains on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum Condition {
    Curated,
    Noisy,
    /// Noisy clips subsampled to `n`; `None` matches the curated split size.
    NoisySubsampled(Option<usize>),
    /// Curated clips with their label sets randomly permuted.
    Shuffled,
    /// Curated clips with `r` percent given one wrong tag.
    Corrupted(u32),
}

impl Condition {
    /// Row label used in report tables.
    pub fn label(&self) -> String {
        match self {
            Condition::Curated => "Curated".into(),
            Condition::Noisy => "Noisy".into(),
            Condition::NoisySubsampled(None) => "Noisy (subsampled)".into(),
            Condition::NoisySubsampled(Some(n)) => format!("Noisy (subsampled to {n})"),
            Condition::Shuffled => "Curated (shuffled labels)".into(),
            Condition::Corrupted(r) => format!("Curated ({r}% corrupted)"),
        }
    }
}

impl fmt::Display for Condition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Condition::Curated => f.write_str("curated"),
            Condition::Noisy => f.write_str("noisy"),
            Condition::NoisySubsampled(None) => f.write_str("noisy_subsampled"),
            Condition::NoisySubsampled(Some(n)) => write!(f, "noisy_subsampled:{n}"),
            Condition::Shuffled => f.write_str("shuffled"),
            Condition::Corrupted(r) => write!(f, "corrupted:{r}"),
        }
    }
}

impl FromStr for Condition {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let (name, arg) = match s.split_once(':') {
            Some((n, a)) => (n, Some(a)),
            None => (s, None),
        };
        let bad = || Error::Config(format!("unknown condition {s:?}"));
        match (name, arg) {
            ("curated", None) => Ok(Condition::Curated),
            ("noisy", None) => Ok(Condition::Noisy),
            ("shuffled", None) => Ok(Condition::Shuffled),
            ("noisy_subsampled", None) => Ok(Condition::NoisySubsampled(None)),
            ("noisy_subsampled", Some(n)) => {
                let n: usize = n.parse().map_err(|_| bad())?;
                if n == 0 {
                    return Err(Error::Config("subsample size must be positive".into()));
                }
                Ok(Condition::NoisySubsampled(Some(n)))
            }
            ("corrupted", Some(r)) => {
                let r: u32 = r.parse().map_err(|_| bad())?;
                if r > 100 {
                    return Err(Error::Config(format!("corruption rate {r} outside [0, 100]")));
                }
                Ok(Condition::Corrupted(r))
            }
            _ => Err(bad()),
        }
    }
}

impl TryFrom<String> for Condition {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<Condition> for String {
    fn from(c: Condition) -> String {
        c.to_string()
    }
}

/// Locations of the vocabulary and the three split manifests. Audio paths
/// inside a manifest resolve against the manifest's directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusLayout {
    pub vocabulary: PathBuf,
    pub curated_train: PathBuf,
    pub noisy_train: PathBuf,
    pub test: PathBuf,
}

impl CorpusLayout {
    /// The file names [`cmd_synth`] writes.
    pub fn in_dir(dir: impl AsRef<Path>) -> Self {
        let dir = dir.as_ref();
        Self {
            vocabulary: dir.join("vocabulary.txt"),
            curated_train: dir.join("curated_train.csv"),
            noisy_train: dir.join("noisy_train.csv"),
            test: dir.join("test.csv"),
        }
    }
}

/// One training suite (or sweep) in full.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub condition: Condition,
    pub output_dir: PathBuf,
    /// Seed of the label transforms, subsampling and holdout draw.
    pub label_seed: u64,
    /// Fraction of curated training clips held out for validation.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub holdout: Option<f64>,
    /// Corruption rates of a sweep, in percent.
    pub sweep_rates: Vec<u32>,
    pub corpus: CorpusLayout,
    pub tagger: TaggerConfig,
    pub train: TrainConfig,
}

/// Validation fraction used when a holdout is requested without a value.
pub const DEFAULT_HOLDOUT: f64 = 0.15;

impl ExperimentConfig {
    /// Narrow tagger, 24 epochs, batch 16, 5 seeds.
    pub fn desk(condition: Condition, corpus_dir: impl AsRef<Path>, output_dir: impl Into<PathBuf>) -> Self {
        Self {
            condition,
            output_dir: output_dir.into(),
            label_seed: 0,
            holdout: None,
            sweep_rates: sweep_plan(0, 100, 5).expect("valid sweep"),
            corpus: CorpusLayout::in_dir(corpus_dir),
            tagger: TaggerConfig::desk(),
            train: TrainConfig::desk(),
        }
    }

    /// Full tagger width and the 100-epoch schedule.
    pub fn paper(condition: Condition, corpus_dir: impl AsRef<Path>, output_dir: impl Into<PathBuf>) -> Self {
        Self {
            tagger: TaggerConfig::default(),
            train: TrainConfig::paper(),
            ..Self::desk(condition, corpus_dir, output_dir)
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.tagger.validate()?;
        self.train.validate()?;
        if let Some(h) = self.holdout {
            if !(h > 0.0 && h < 1.0) {
                return Err(Error::Config(format!("holdout fraction {h} outside (0, 1)")));
            }
        }
        if self.sweep_rates.iter().any(|&r| r > 100) {
            return Err(Error::Config("sweep rates must lie in [0, 100]".into()));
        }
        Ok(())
    }

    pub fn to_text(&self) -> String {
        toml::to_string(self).expect("experiment config serialises")
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_text(&text)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        write_file(path, self.to_text())
    }
}

fn write_file(path: impl AsRef<Path>, contents: impl AsRef<[u8]>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, contents).map_err(|e| Error::io(path, e))
}

fn create_dir(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

/// Generates the synthetic corpus into `out_dir`, plus `corpus.toml`
/// recording the spec and seed.
pub fn cmd_synth(spec: &CorpusSpec, seed: u64, out_dir: impl AsRef<Path>) -> Result<CorpusPaths> {
    let out_dir = out_dir.as_ref();
    create_dir(out_dir)?;
    let corpus = synth_corpus(spec, seed)?;
    let paths = corpus.write(out_dir)?;
    #[derive(Serialize)]
    struct Provenance<'a> {
        seed: u64,
        spec: &'a CorpusSpec,
    }
    let text = toml::to_string(&Provenance { seed, spec }).map_err(|e| Error::Config(e.to_string()))?;
    write_file(out_dir.join("corpus.toml"), text)?;
    Ok(paths)
}

fn manifest_dir(path: &Path) -> &Path {
    path.parent().unwrap_or(Path::new("."))
}

/// Loaded vocabulary, manifests and audio shared by the suites of one
/// corpus. Splits are decoded on first use.
pub struct ExperimentData {
    layout: CorpusLayout,
    pub vocabulary: TagVocabulary,
    curated: Option<LoadedSplit>,
    noisy: Option<LoadedSplit>,
    test: Option<(LoadedSplit, EvalSet)>,
}

impl ExperimentData {
    pub fn open(layout: &CorpusLayout) -> Result<Self> {
        Ok(Self {
            vocabulary: TagVocabulary::from_file(&layout.vocabulary)?,
            layout: layout.clone(),
            curated: None,
            noisy: None,
            test: None,
        })
    }

    fn load_split(&self, path: &Path, role: SplitRole) -> Result<LoadedSplit> {
        let manifest = load_manifest(path, &self.vocabulary, role)?;
        LoadedSplit::load(manifest, manifest_dir(path), &self.vocabulary)
    }

    pub fn curated(&mut self) -> Result<&LoadedSplit> {
        if self.curated.is_none() {
            self.curated = Some(self.load_split(&self.layout.curated_train, SplitRole::Train)?);
        }
        Ok(self.curated.as_ref().expect("loaded"))
    }

    pub fn noisy(&mut self) -> Result<&LoadedSplit> {
        if self.noisy.is_none() {
            self.noisy = Some(self.load_split(&self.layout.noisy_train, SplitRole::Train)?);
        }
        Ok(self.noisy.as_ref().expect("loaded"))
    }

    pub fn test(&mut self) -> Result<&(LoadedSplit, EvalSet)> {
        if self.test.is_none() {
            let split = self.load_split(&self.layout.test, SplitRole::Test)?;
            let set = EvalSet::from_split(&split, &FeatureExtractor::new())?;
            self.test = Some((split, set));
        }
        Ok(self.test.as_ref().expect("loaded"))
    }
}

/// How a condition altered the training labels.
#[derive(Debug, Clone, PartialEq)]
pub enum Audit {
    None,
    Corruption(crate::noise::CorruptionPlan),
    /// `(original, assigned)` label sets per clip.
    Shuffle(Manifest, Manifest),
}

/// The training split a condition trains on, with its audit record and the
/// optional validation split.
pub struct PreparedTrain {
    pub train: LoadedSplit,
    pub audit: Audit,
    pub validation: Option<LoadedSplit>,
}

/// Applies `cfg.condition` to the training data. The test split is never
/// touched.
pub fn prepare_training(data: &mut ExperimentData, cfg: &ExperimentConfig) -> Result<PreparedTrain> {
    let vocab = data.vocabulary.clone();
    let curated = data.curated()?.clone();
    let (curated, validation) = match cfg.holdout {
        Some(fraction) => {
            let n_val = ((curated.len() as f64) * fraction).round() as usize;
            let mut rng = stream_rng(cfg.label_seed, Stream::Holdout, 0);
            let (val, rest) = dataset::split_off(&curated.manifest, n_val, &mut rng)?;
            (curated.select(&rest, &vocab)?, Some(curated.select(&val, &vocab)?))
        }
        None => (curated, None),
    };
    let labels_rng = || stream_rng(cfg.label_seed, Stream::Labels, 0);
    let (train, audit) = match cfg.condition {
        Condition::Curated => (curated, Audit::None),
        Condition::Noisy => (data.noisy()?.clone(), Audit::None),
        Condition::NoisySubsampled(n) => {
            let n = n.unwrap_or(curated.len());
            let noisy = data.noisy()?;
            let mut rng = stream_rng(cfg.label_seed, Stream::Subsample, 0);
            let picked = dataset::subsample(&noisy.manifest, n, &mut rng)?;
            (noisy.select(&picked, &vocab)?, Audit::None)
        }
        Condition::Shuffled => {
            let shuffled = shuffle_labels(&curated.manifest, &mut labels_rng())?;
            let audit = Audit::Shuffle(curated.manifest.clone(), shuffled.clone());
            (curated.relabel(shuffled, &vocab)?, audit)
        }
        Condition::Corrupted(r) => {
            let (corrupted, plan) = corrupt_labels(&curated.manifest, f64::from(r), &mut labels_rng())?;
            (curated.relabel(corrupted, &vocab)?, Audit::Corruption(plan))
        }
    };
    Ok(PreparedTrain {
        train,
        audit,
        validation,
    })
}

fn write_shuffle_audit(path: &Path, original: &Manifest, assigned: &Manifest, vocab: &TagVocabulary) -> Result<()> {
    let names = |tags: &std::collections::BTreeSet<usize>| {
        tags.iter().map(|&t| vocab.name(t)).collect::<Vec<_>>().join(";")
    };
    let mut w = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_path(path)?;
    w.write_record(["id", "original", "assigned"])?;
    for (a, b) in original.records().iter().zip(assigned.records()) {
        w.write_record([a.id.as_str(), &names(&a.tags), &names(&b.tags)])?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Test-set figures of one finished run.
#[derive(Debug, Clone, PartialEq)]
pub struct RunSummary {
    pub seed: u64,
    pub report: EvalReport,
    pub final_loss: f64,
}

#[derive(Debug, Clone)]
pub struct SuiteSummary {
    pub condition: Condition,
    pub output_dir: PathBuf,
    pub runs: Vec<RunSummary>,
    pub failures: Vec<(u64, String)>,
}

impl SuiteSummary {
    pub fn is_complete(&self) -> bool {
        self.failures.is_empty()
    }

    pub fn aggregate(&self) -> Result<Aggregate> {
        aggregate_runs(&self.runs.iter().map(|r| r.report.clone()).collect::<Vec<_>>())
    }

    pub fn maps(&self) -> Vec<f64> {
        self.runs.iter().map(|r| r.report.map).collect()
    }

    pub fn maucs(&self) -> Vec<f64> {
        self.runs.iter().map(|r| r.report.mauc).collect()
    }
}

fn write_run(dir: &Path, run: &RunResult, cfg: &ExperimentConfig, vocab: &TagVocabulary) -> Result<()> {
    create_dir(dir)?;
    run.model.save(dir.join("checkpoint.bin"))?;
    let mut loss = String::from("epoch,loss\n");
    for (e, l) in run.loss_trace.iter().enumerate() {
        loss.push_str(&format!("{e},{l}\n"));
    }
    write_file(dir.join("loss.csv"), loss)?;
    let run_cfg = ExperimentConfig {
        train: TrainConfig {
            seeds: vec![run.seed],
            ..cfg.train.clone()
        },
        ..cfg.clone()
    };
    run_cfg.save(dir.join("config.toml"))?;
    if let Some(report) = &run.report {
        report.write_csv(dir.join("metrics.csv"), vocab)?;
    }
    Ok(())
}

/// Runs one suite (all seeds of `cfg.train`) on `cfg.condition` and writes
/// its directory. Failed runs are recorded, not fatal.
pub fn run_condition(data: &mut ExperimentData, cfg: &ExperimentConfig) -> Result<SuiteSummary> {
    cfg.validate()?;
    let out = cfg.output_dir.clone();
    create_dir(&out)?;
    let vocab = data.vocabulary.clone();
    let prepared = prepare_training(data, cfg)?;
    cfg.save(out.join("config.toml"))?;
    prepared.train.manifest.write_csv(out.join("train_manifest.csv"), &vocab)?;
    match &prepared.audit {
        Audit::None => {}
        Audit::Corruption(plan) => plan.write_csv(out.join("corruption.csv"), &vocab)?,
        Audit::Shuffle(original, assigned) => {
            write_shuffle_audit(&out.join("shuffle_audit.csv"), original, assigned, &vocab)?
        }
    }
    let validation = match &prepared.validation {
        Some(v) => {
            v.manifest.write_csv(out.join("validation_manifest.csv"), &vocab)?;
            Some(EvalSet::from_split(v, &FeatureExtractor::new())?)
        }
        None => None,
    };
    let test_set = &data.test()?.1;

    let mut summary = SuiteSummary {
        condition: cfg.condition,
        output_dir: out.clone(),
        runs: Vec::new(),
        failures: Vec::new(),
    };
    for &seed in &cfg.train.seeds {
        let run_dir = out.join(format!("run-{seed}"));
        if run_dir.exists() {
            std::fs::remove_dir_all(&run_dir).map_err(|e| Error::io(&run_dir, e))?;
        }
        let outcome = TaggerModel::build(cfg.tagger.clone(), seed)
            .and_then(|m| train_run(&prepared.train, m, &cfg.train, seed, Some((test_set, &vocab))))
            .and_then(|run| {
                write_run(&run_dir, &run, cfg, &vocab)?;
                if let Some(v) = &validation {
                    // a small holdout may miss classes; that never fails the run
                    match v.evaluate(&run.model, &vocab) {
                        Ok(report) => report.write_csv(run_dir.join("validation_metrics.csv"), &vocab)?,
                        Err(e) => write_file(run_dir.join("validation_error.txt"), format!("{e}\n"))?,
                    }
                }
                Ok(run)
            });
        match outcome {
            Ok(run) => summary.runs.push(RunSummary {
                seed,
                report: run.report.expect("test set given"),
                final_loss: *run.loss_trace.last().expect("at least one epoch"),
            }),
            Err(e) => {
                create_dir(&run_dir)?;
                write_file(run_dir.join("error.txt"), format!("{e}\n"))?;
                summary.failures.push((seed, e.to_string()));
            }
        }
    }
    write_summary(&summary)?;
    Ok(summary)
}

fn write_summary(s: &SuiteSummary) -> Result<()> {
    let mut text = String::from("seed,map,mauc,final_loss,status\n");
    for r in &s.runs {
        text.push_str(&format!("{},{},{},{},ok\n", r.seed, r.report.map, r.report.mauc, r.final_loss));
    }
    for (seed, _) in &s.failures {
        text.push_str(&format!("{seed},,,,failed\n"));
    }
    write_file(s.output_dir.join("summary.csv"), text)
}

/// Loads the corpus named by `cfg` and runs one suite.
pub fn cmd_train(cfg: &ExperimentConfig) -> Result<SuiteSummary> {
    cfg.validate()?;
    let mut data = ExperimentData::open(&cfg.corpus)?;
    run_condition(&mut data, cfg)
}

/// One row of the sweep table.
#[derive(Debug, Clone)]
pub struct SweepRow {
    pub r: u32,
    pub aggregate: Option<Aggregate>,
    pub map_test: Option<TTestResult>,
    pub mauc_test: Option<TTestResult>,
    pub complete: bool,
}

#[derive(Debug, Clone)]
pub struct SweepSummary {
    pub rows: Vec<SweepRow>,
    pub suites: Vec<SuiteSummary>,
}

impl SweepSummary {
    pub fn is_complete(&self) -> bool {
        self.rows.iter().all(|r| r.complete)
    }

    pub fn suite(&self, r: u32) -> Option<&SuiteSummary> {
        self.suites.iter().find(|s| s.condition == Condition::Corrupted(r))
    }
}

/// Paired test of `a` against `base`, matching runs by seed.
fn paired_by_seed(base: &SuiteSummary, other: &SuiteSummary, metric: fn(&EvalReport) -> f64) -> Option<TTestResult> {
    let (a, b): (Vec<f64>, Vec<f64>) = other
        .runs
        .iter()
        .filter_map(|o| {
            base.runs
                .iter()
                .find(|r| r.seed == o.seed)
                .map(|r| (metric(&o.report), metric(&r.report)))
        })
        .unzip();
    paired_t_test(&a, &b).ok()
}

/// One suite per rate in `cfg.sweep_rates` under `output_dir/r-XXX`, then
/// `sweep.csv` and `sweep.txt` with t-tests of every rate against r = 0.
pub fn cmd_sweep(cfg: &ExperimentConfig) -> Result<SweepSummary> {
    cfg.validate()?;
    if !cfg.sweep_rates.contains(&0) {
        return Err(Error::Config("a sweep needs r = 0 as its reference".into()));
    }
    let mut data = ExperimentData::open(&cfg.corpus)?;
    create_dir(&cfg.output_dir)?;
    cfg.save(cfg.output_dir.join("config.toml"))?;
    let mut suites = Vec::with_capacity(cfg.sweep_rates.len());
    for &r in &cfg.sweep_rates {
        let sub = ExperimentConfig {
            condition: Condition::Corrupted(r),
            output_dir: cfg.output_dir.join(format!("r-{r:03}")),
            ..cfg.clone()
        };
        suites.push(run_condition(&mut data, &sub)?);
    }
    let base = suites
        .iter()
        .find(|s| s.condition == Condition::Corrupted(0))
        .expect("r = 0 present")
        .clone();
    let rows = cfg
        .sweep_rates
        .iter()
        .zip(&suites)
        .map(|(&r, s)| SweepRow {
            r,
            aggregate: s.aggregate().ok(),
            map_test: paired_by_seed(&base, s, |e| e.map),
            mauc_test: paired_by_seed(&base, s, |e| e.mauc),
            complete: s.is_complete(),
        })
        .collect::<Vec<_>>();
    report::write_sweep(&cfg.output_dir, &rows)?;
    Ok(SweepSummary { rows, suites })
}
