//! Experiment configuration, orchestration and manifests.
//!
//! A config is a TOML file with `[topology]`, `[objective]`, `[partition]`,
//! `[algorithm]` and `[run]` sections. Every key has a default; the resolved
//! snapshot written into `record.json` lists all of them.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::analysis::{cdfl_bound, dfl_bound, lr_feasible, BoundParams, CdflBound};
use crate::compression::{
    averaging_shift, run_cdfl, write_trace, CdflConfig, CompressionOp, Gamma,
};
use crate::engine::{
    default_init, run_csgd, run_dfl, run_dsgd, LrLaw, RunConfig, Schedule, TrajectoryMetrics,
};
use crate::error::{Error, Result};
use crate::objective::{
    partition, Batch, Dataset, GlobalObjective, LogisticProblem, LossKind, PartitionMode,
    PartitionSpec, QuadraticProblem,
};
use crate::topology::{MixingMatrix, TopologySpec};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TopologySection {
    /// `ring`, `quasi_ring`, `complete`, `identity`, `group_ring:<g>x<s>` or
    /// `adjacency:<path>`.
    pub kind: String,
    pub nodes: usize,
}

impl Default for TopologySection {
    fn default() -> Self {
        Self {
            kind: "ring".into(),
            nodes: 10,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ObjectiveSection {
    pub kind: LossKind,
    pub dim: usize,
    pub samples_per_node: usize,
    /// Quadratic only.
    pub cond: f64,
    /// Quadratic only.
    pub heterogeneity: f64,
    /// Quadratic only.
    pub noise: f64,
    /// Synthetic logistic only.
    pub separation: f64,
    pub reg: f64,
    pub seed: u64,
    /// Logistic samples from CSV instead of the synthetic generator.
    pub data: Option<PathBuf>,
}

impl Default for ObjectiveSection {
    fn default() -> Self {
        Self {
            kind: LossKind::Logistic,
            dim: 10,
            samples_per_node: 100,
            cond: 10.0,
            heterogeneity: 1.0,
            noise: 0.5,
            separation: 1.0,
            reg: 1e-2,
            seed: 7,
            data: None,
        }
    }
}

/// How logistic samples are spread over nodes. Ignored for quadratics, which
/// are generated per node.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PartitionSection {
    pub mode: PartitionMode,
    pub shards_per_node: usize,
    pub seed: u64,
}

impl Default for PartitionSection {
    fn default() -> Self {
        Self {
            mode: PartitionMode::LabelSorted,
            shards_per_node: 1,
            seed: 1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Algorithm {
    Dfl,
    Dsgd,
    Csgd,
    Cdfl,
}

impl fmt::Display for Algorithm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Algorithm::Dfl => "dfl",
            Algorithm::Dsgd => "dsgd",
            Algorithm::Csgd => "csgd",
            Algorithm::Cdfl => "cdfl",
        })
    }
}

/// `"full"` or a sample count.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum BatchSetting {
    Size(usize),
    Word(String),
}

impl BatchSetting {
    pub fn resolve(&self) -> Result<Batch> {
        match self {
            BatchSetting::Size(0) => {
                Err(Error::config("algorithm.batch", "must be >= 1 or \"full\""))
            }
            BatchSetting::Size(n) => Ok(Batch::Size(*n)),
            BatchSetting::Word(w) if w == "full" => Ok(Batch::Full),
            BatchSetting::Word(w) => Err(Error::config(
                "algorithm.batch",
                format!("expected a positive integer or \"full\", got `{w}`"),
            )),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AlgorithmSection {
    pub name: Algorithm,
    pub tau1: usize,
    /// For `csgd`, ignored (one gossip step per round).
    pub tau2: usize,
    pub steps: usize,
    /// `constant:<eta>` or `prop2:<a>`.
    pub lr_law: String,
    pub batch: BatchSetting,
    /// `cdfl` only: `none`, `topk:k`, `randk:k`, `gossip:p`, `qsgd:s`.
    pub compression: String,
    /// `cdfl` only: `auto` or a number in (0, 1].
    pub gamma: String,
    /// `cdfl` only: write every message to `trace_seed<k>.csv`.
    pub trace: bool,
}

impl Default for AlgorithmSection {
    fn default() -> Self {
        Self {
            name: Algorithm::Dfl,
            tau1: 4,
            tau2: 4,
            steps: 1000,
            lr_law: "constant:0.05".into(),
            batch: BatchSetting::Word("full".into()),
            compression: "none".into(),
            gamma: "auto".into(),
            trace: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunSection {
    pub seeds: Vec<u64>,
    pub output: PathBuf,
    /// Shown in comparison tables; derived from the algorithm when empty.
    pub label: String,
}

impl Default for RunSection {
    fn default() -> Self {
        Self {
            seeds: vec![1, 2, 3, 4, 5],
            output: PathBuf::from("runs/default"),
            label: String::new(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub topology: TopologySection,
    pub objective: ObjectiveSection,
    pub partition: PartitionSection,
    pub algorithm: AlgorithmSection,
    pub run: RunSection,
}

/// Everything needed to execute a config, checked and built.
#[derive(Debug, Clone)]
pub struct Resolved {
    pub objective: GlobalObjective,
    pub mixing: MixingMatrix,
    pub schedule: Schedule,
    pub lr: LrLaw,
    pub batch: Batch,
    pub op: CompressionOp,
    pub gamma: Gamma,
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let mut cfg: Self = toml::from_str(text).map_err(|e| {
            let msg = e.message().to_string();
            let key = unknown_key(&msg).unwrap_or_else(|| "config".into());
            Error::config(key, msg)
        })?;
        cfg.materialize();
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config is always representable as TOML")
    }

    /// Fills defaults that depend on other keys.
    pub fn materialize(&mut self) {
        if self.run.label.is_empty() {
            self.run.label = self.default_label();
        }
    }

    fn default_label(&self) -> String {
        let a = &self.algorithm;
        let mut s = format!("{} {} tau1={}", a.name, self.topology.kind, a.tau1);
        if a.name != Algorithm::Csgd && a.name != Algorithm::Dsgd {
            s.push_str(&format!(" tau2={}", a.tau2));
        }
        if a.name == Algorithm::Cdfl {
            s.push_str(&format!(" {}", a.compression));
        }
        s
    }

    pub fn topology_spec(&self) -> Result<TopologySpec> {
        TopologySpec::parse(&self.topology.kind, Some(self.topology.nodes))
            .map_err(|e| rekey(e, "topology.kind"))
    }

    pub fn build_objective(&self) -> Result<GlobalObjective> {
        let o = &self.objective;
        let n = self.topology.nodes;
        if o.dim == 0 {
            return Err(Error::config("objective.dim", "must be >= 1"));
        }
        if o.samples_per_node == 0 {
            return Err(Error::config("objective.samples_per_node", "must be >= 1"));
        }
        if !(o.reg >= 0.0) {
            return Err(Error::config(
                "objective.reg",
                format!("must be >= 0, got {}", o.reg),
            ));
        }
        match o.kind {
            LossKind::Quadratic => {
                if o.data.is_some() {
                    return Err(Error::config(
                        "objective.data",
                        "CSV data is only supported for logistic",
                    ));
                }
                QuadraticProblem {
                    nodes: n,
                    dim: o.dim,
                    samples_per_node: o.samples_per_node,
                    cond: o.cond,
                    heterogeneity: o.heterogeneity,
                    noise: o.noise,
                    reg: o.reg,
                    seed: o.seed,
                }
                .build()
                .map_err(|e| rekey(e, "objective"))
            }
            LossKind::Logistic => {
                let data = match &o.data {
                    Some(path) => {
                        let d = Dataset::from_csv(path)?;
                        if d.dim() != o.dim {
                            return Err(Error::config(
                                "objective.dim",
                                format!(
                                    "{} has {} feature columns, config says {}",
                                    path.display(),
                                    d.dim(),
                                    o.dim
                                ),
                            ));
                        }
                        d
                    }
                    None => LogisticProblem {
                        samples: n * o.samples_per_node,
                        dim: o.dim,
                        separation: o.separation,
                        seed: o.seed,
                    }
                    .dataset()?,
                };
                let spec = PartitionSpec {
                    mode: self.partition.mode,
                    shards_per_node: self.partition.shards_per_node,
                    seed: self.partition.seed,
                };
                let parts =
                    partition(&data.targets, &spec, n).map_err(|e| rekey(e, "partition"))?;
                GlobalObjective::from_partition(LossKind::Logistic, &data, &parts, o.reg)
            }
        }
    }

    /// Checks every key and builds the objective and mixing matrix.
    pub fn resolve(&self) -> Result<Resolved> {
        if self.run.seeds.is_empty() {
            return Err(Error::config("run.seeds", "at least one seed is required"));
        }
        if self.topology.nodes == 0 {
            return Err(Error::config("topology.nodes", "must be >= 1"));
        }
        let a = &self.algorithm;
        let lr: LrLaw = a.lr_law.parse().map_err(|e| rekey(e, "algorithm.lr_law"))?;
        let batch = a.batch.resolve()?;
        let op: CompressionOp = a
            .compression
            .parse()
            .map_err(|e| rekey(e, "algorithm.compression"))?;
        let gamma: Gamma = a.gamma.parse().map_err(|e| rekey(e, "algorithm.gamma"))?;
        if a.name != Algorithm::Cdfl && op != CompressionOp::Identity {
            return Err(Error::config(
                "algorithm.compression",
                format!("compression is only used by cdfl, not {}", a.name),
            ));
        }
        let schedule = match a.name {
            Algorithm::Dsgd => Schedule::new(1, 1, a.steps),
            Algorithm::Csgd => Schedule::new(a.tau1, 1, a.steps),
            _ => Schedule::new(a.tau1, a.tau2, a.steps),
        }
        .map_err(|e| rekey(e, "algorithm"))?;
        let mixing = self
            .topology_spec()?
            .build()
            .map_err(|e| rekey(e, "topology"))?;
        let objective = self.build_objective()?;
        if objective.num_nodes() != mixing.n() {
            return Err(Error::config(
                "topology.nodes",
                format!(
                    "topology has {} nodes, objective has {}",
                    mixing.n(),
                    objective.num_nodes()
                ),
            ));
        }
        let mu = objective.strong_convexity();
        if a.name == Algorithm::Cdfl {
            if !(mu > 0.0) {
                return Err(Error::config(
                    "objective.reg",
                    "cdfl needs mu > 0; raise the ridge term",
                ));
            }
            if !a.steps.is_multiple_of(schedule.tau()) {
                return Err(Error::config(
                    "algorithm.steps",
                    format!(
                        "cdfl needs steps to be a multiple of tau1 + tau2 = {}",
                        schedule.tau()
                    ),
                ));
            }
            op.validate(objective.dim())
                .map_err(|e| rekey(e, "algorithm.compression"))?;
        }
        if matches!(lr, LrLaw::Prop2 { .. }) && !(mu > 0.0) {
            return Err(Error::config("algorithm.lr_law", "prop2 needs mu > 0"));
        }
        Ok(Resolved {
            objective,
            mixing,
            schedule,
            lr,
            batch,
            op,
            gamma,
        })
    }
}

fn unknown_key(msg: &str) -> Option<String> {
    let rest = msg.strip_prefix("unknown field `")?;
    Some(rest.split('`').next()?.to_string())
}

/// Attaches a config key to errors that came from parsing a value.
fn rekey(e: Error, key: &str) -> Error {
    match e {
        Error::Config { reason, .. } => Error::config(key, reason),
        Error::InvalidTopology(r)
        | Error::InvalidSchedule(r)
        | Error::InvalidOperator(r)
        | Error::InvalidPartition(r)
        | Error::Parse(r) => Error::config(key, r),
        other => other,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SeedStatus {
    Ok,
    Diverged,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedRecord {
    pub seed: u64,
    pub status: SeedStatus,
    pub diverged_at: Option<usize>,
    /// Relative to the record directory.
    pub metrics: PathBuf,
    pub trace: Option<PathBuf>,
    pub final_loss: f64,
    pub summary_grad_norm_sq: f64,
    pub total_bytes: u64,
    /// `cdfl` only: global loss at the weighted average model.
    pub w_avg_loss: Option<f64>,
    /// `cdfl` only: consensus step size actually used.
    pub gamma: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub median_final_loss: f64,
    pub median_summary_grad_norm_sq: f64,
    /// Summed over seeds.
    pub total_bytes: u64,
    pub diverged_seeds: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub config: ExperimentConfig,
    pub f_star: f64,
    pub seeds: Vec<SeedRecord>,
    pub summary: Summary,
}

pub const RECORD_FILE: &str = "record.json";

impl RunRecord {
    pub fn dir(&self) -> &Path {
        &self.config.run.output
    }

    pub fn label(&self) -> &str {
        &self.config.run.label
    }

    pub fn all_diverged(&self) -> bool {
        self.seeds.iter().all(|s| s.status == SeedStatus::Diverged)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(RECORD_FILE);
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Parse(format!("{}: {e}", path.display())))
    }

    pub fn metrics(&self) -> Result<Vec<TrajectoryMetrics>> {
        self.seeds
            .iter()
            .map(|s| TrajectoryMetrics::read_csv(&self.dir().join(&s.metrics)))
            .collect()
    }

    /// Recomputes the summary from the metrics files on disk.
    pub fn recompute_summary(&self) -> Result<Summary> {
        let metrics = self.metrics()?;
        Ok(summarize(&metrics, &self.seeds))
    }
}

fn summarize(metrics: &[TrajectoryMetrics], seeds: &[SeedRecord]) -> Summary {
    let finals: Vec<f64> = metrics.iter().map(|m| m.final_loss()).collect();
    let grads: Vec<f64> = metrics.iter().map(|m| m.summary_grad_norm_sq()).collect();
    Summary {
        median_final_loss: median(&finals),
        median_summary_grad_norm_sq: median(&grads),
        total_bytes: metrics.iter().map(|m| m.total_bytes()).sum(),
        diverged_seeds: seeds
            .iter()
            .filter(|s| s.status == SeedStatus::Diverged)
            .count(),
    }
}

/// Median with the mean of the two middle values for even lengths. NaN
/// sorts last.
pub fn median(values: &[f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.total_cmp(b));
    let m = v.len() / 2;
    if v.len() % 2 == 1 {
        v[m]
    } else {
        0.5 * (v[m - 1] + v[m])
    }
}

/// Writes via a temporary file and a rename.
fn write_atomic(path: &Path, contents: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, contents).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

struct SeedOutcome {
    metrics: TrajectoryMetrics,
    diverged_at: Option<usize>,
    w_avg_loss: Option<f64>,
    gamma: Option<f64>,
    trace: Option<Vec<crate::compression::Message>>,
}

fn run_seed(cfg: &ExperimentConfig, r: &Resolved, seed: u64) -> Result<SeedOutcome> {
    let run = RunConfig::new(r.lr, r.batch, seed);
    let a = &cfg.algorithm;
    let result = match a.name {
        Algorithm::Dfl => run_dfl(&r.objective, &r.mixing, &r.schedule, &run)
            .map(|o| (o.metrics, None, None, None)),
        Algorithm::Dsgd => {
            run_dsgd(&r.objective, &r.mixing, a.steps, &run).map(|o| (o.metrics, None, None, None))
        }
        Algorithm::Csgd => run_csgd(&r.objective, &r.mixing, a.tau1, a.steps, &run)
            .map(|o| (o.metrics, None, None, None)),
        Algorithm::Cdfl => {
            let cc = CdflConfig {
                schedule: r.schedule,
                op: r.op,
                gamma: r.gamma,
                trace: a.trace,
            };
            run_cdfl(&r.objective, &r.mixing, &cc, &run).and_then(|o| {
                let loss = r.objective.loss(&o.w_avg)?;
                let trace = a.trace.then_some(o.messages);
                Ok((o.metrics, Some(loss), Some(o.gamma), trace))
            })
        }
    };
    match result {
        Ok((metrics, w_avg_loss, gamma, trace)) => Ok(SeedOutcome {
            metrics,
            diverged_at: None,
            w_avg_loss,
            gamma,
            trace,
        }),
        Err(Error::Diverged { step, metrics }) => Ok(SeedOutcome {
            metrics: *metrics,
            diverged_at: Some(step),
            w_avg_loss: None,
            gamma: None,
            trace: None,
        }),
        Err(e) => Err(e),
    }
}

/// Runs every seed (in parallel threads), writes `metrics_seed<k>.csv`,
/// optional traces and `record.json` under `run.output`.
pub fn run_experiment(config: &ExperimentConfig) -> Result<RunRecord> {
    let mut cfg = config.clone();
    cfg.materialize();
    let resolved = cfg.resolve()?;
    let (_, f_star) = resolved.objective.minimum()?;
    let dir = cfg.run.output.clone();
    std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;

    let outcomes: Vec<Result<SeedOutcome>> = std::thread::scope(|s| {
        let handles: Vec<_> = cfg
            .run
            .seeds
            .iter()
            .map(|&seed| {
                let (cfg, r) = (&cfg, &resolved);
                s.spawn(move || run_seed(cfg, r, seed))
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("seed worker panicked"))
            .collect()
    });

    let mut seeds = Vec::new();
    for (&seed, outcome) in cfg.run.seeds.iter().zip(outcomes) {
        let o = outcome?;
        let metrics_name = PathBuf::from(format!("metrics_seed{seed}.csv"));
        write_atomic(&dir.join(&metrics_name), o.metrics.to_csv().as_bytes())?;
        let trace = match &o.trace {
            Some(messages) => {
                let name = PathBuf::from(format!("trace_seed{seed}.csv"));
                write_trace(messages, &dir.join(&name))?;
                Some(name)
            }
            None => None,
        };
        seeds.push(SeedRecord {
            seed,
            status: if o.diverged_at.is_some() {
                SeedStatus::Diverged
            } else {
                SeedStatus::Ok
            },
            diverged_at: o.diverged_at,
            metrics: metrics_name,
            trace,
            final_loss: o.metrics.final_loss(),
            summary_grad_norm_sq: o.metrics.summary_grad_norm_sq(),
            total_bytes: o.metrics.total_bytes(),
            w_avg_loss: o.w_avg_loss,
            gamma: o.gamma,
        });
    }
    let mut record = RunRecord {
        config: cfg,
        f_star,
        seeds,
        summary: Summary {
            median_final_loss: f64::NAN,
            median_summary_grad_norm_sq: f64::NAN,
            total_bytes: 0,
            diverged_seeds: 0,
        },
    };
    // Summaries come from the files just written so they agree exactly.
    record.summary = record.recompute_summary()?;
    let json = serde_json::to_string_pretty(&record).map_err(|e| Error::Parse(e.to_string()))?;
    write_atomic(&dir.join(RECORD_FILE), json.as_bytes())?;
    Ok(record)
}

/// Alignment point for [`compare`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Align {
    Step(usize),
    Bytes(u64),
}

impl FromStr for Align {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let (kind, v) = s.split_once(':').ok_or_else(|| {
            Error::config(
                "at",
                format!("expected `step:<n>` or `bytes:<n>`, got `{s}`"),
            )
        })?;
        let n: u64 = v
            .trim()
            .parse()
            .map_err(|e| Error::config("at", format!("bad value `{v}`: {e}")))?;
        match kind.trim() {
            "step" => Ok(Align::Step(n as usize)),
            "bytes" => Ok(Align::Bytes(n)),
            other => Err(Error::config("at", format!("unknown alignment `{other}`"))),
        }
    }
}

/// Which column [`compare`] ranks by.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CompareMetric {
    Loss,
    /// `loss − F*`.
    Suboptimality,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CompareRow {
    pub label: String,
    /// Median over seeds; NaN when no seed has a row within the budget.
    pub value: f64,
}

/// Ranks records by the median metric at an equal step count or byte
/// budget, best first. Records must share objective and partition; the
/// topology may differ so that networks can be ranked against each other.
pub fn compare(records: &[RunRecord], metric: CompareMetric, at: Align) -> Result<Vec<CompareRow>> {
    let Some(first) = records.first() else {
        return Ok(Vec::new());
    };
    for r in &records[1..] {
        if r.config.objective != first.config.objective
            || r.config.partition != first.config.partition
            || r.config.topology.nodes != first.config.topology.nodes
        {
            return Err(Error::Comparison(format!(
                "`{}` and `{}` use different objectives",
                first.label(),
                r.label()
            )));
        }
    }
    let mut rows = Vec::with_capacity(records.len());
    for r in records {
        let values: Vec<f64> = r
            .metrics()?
            .iter()
            .map(|m| {
                let loss = match at {
                    Align::Step(s) => m.loss_at_step(s),
                    Align::Bytes(b) => m.loss_at_bytes(b),
                }
                .unwrap_or(f64::NAN);
                match metric {
                    CompareMetric::Loss => loss,
                    CompareMetric::Suboptimality => loss - r.f_star,
                }
            })
            .collect();
        rows.push(CompareRow {
            label: r.label().to_string(),
            value: median(&values),
        });
    }
    rows.sort_by(|a, b| a.value.total_cmp(&b.value));
    Ok(rows)
}

pub const PRESETS: [&str; 4] = ["fig6_ring", "fig7_tau1", "fig8_zeta", "fig9_compression"];

fn non_iid_logistic(base: &ExperimentConfig) -> ExperimentConfig {
    let mut c = ExperimentConfig {
        run: base.run.clone(),
        ..Default::default()
    };
    c.topology = TopologySection {
        kind: "ring".into(),
        nodes: 10,
    };
    c.objective = ObjectiveSection {
        kind: LossKind::Logistic,
        dim: 10,
        samples_per_node: 100,
        separation: 1.0,
        reg: 0.05,
        seed: 7,
        ..Default::default()
    };
    c.partition = PartitionSection {
        mode: PartitionMode::LabelSorted,
        shards_per_node: 1,
        seed: 1,
    };
    c.algorithm.batch = BatchSetting::Word("full".into());
    c.algorithm.lr_law = "constant:0.5".into();
    c
}

fn variant(
    base: &ExperimentConfig,
    name: &str,
    label: &str,
    edit: impl FnOnce(&mut ExperimentConfig),
) -> ExperimentConfig {
    let mut c = base.clone();
    edit(&mut c);
    c.run.label = label.into();
    let slug: String = label
        .chars()
        .map(|ch| if ch.is_ascii_alphanumeric() { ch } else { '_' })
        .collect();
    c.run.output = base.run.output.join(name).join(slug);
    c
}

/// Expands a preset into its member configs. Seeds and the output root come
/// from `base`; everything else is fixed by the preset.
pub fn preset(name: &str, base: &ExperimentConfig) -> Result<Vec<ExperimentConfig>> {
    let mut out = Vec::new();
    match name {
        "fig6_ring" => {
            let b = non_iid_logistic(base);
            for tau2 in [1, 2, 4, 8, 15] {
                out.push(variant(&b, name, &format!("tau2={tau2}"), |c| {
                    c.algorithm.tau1 = 4;
                    c.algorithm.tau2 = tau2;
                    c.algorithm.steps = 2280;
                }));
            }
        }
        "fig7_tau1" => {
            let b = non_iid_logistic(base);
            for tau1 in [1, 4, 10] {
                out.push(variant(&b, name, &format!("tau1={tau1}"), |c| {
                    c.algorithm.tau1 = tau1;
                    c.algorithm.tau2 = 4;
                    c.algorithm.steps = 5600;
                }));
            }
            out.push(variant(&b, name, "sync", |c| {
                c.topology.kind = "complete".into();
                c.algorithm.tau1 = 1;
                c.algorithm.tau2 = 4;
                c.algorithm.steps = 5600;
            }));
        }
        "fig8_zeta" => {
            let b = non_iid_logistic(base);
            for (label, kind) in [
                ("complete", "complete"),
                ("group_ring", "group_ring:5x2"),
                ("ring", "ring"),
            ] {
                out.push(variant(&b, name, label, |c| {
                    c.topology.kind = kind.into();
                    c.algorithm.tau1 = 2;
                    c.algorithm.tau2 = 4;
                    c.algorithm.steps = 2400;
                }));
            }
        }
        "fig9_compression" => {
            let mut b = ExperimentConfig {
                run: base.run.clone(),
                ..Default::default()
            };
            b.objective = ObjectiveSection {
                kind: LossKind::Logistic,
                dim: 32,
                samples_per_node: 100,
                separation: 1.0,
                reg: 0.05,
                seed: 7,
                ..Default::default()
            };
            b.partition.mode = PartitionMode::Iid;
            b.algorithm.tau1 = 2;
            b.algorithm.tau2 = 2;
            b.algorithm.steps = 400;
            b.algorithm.lr_law = "constant:0.05".into();
            out.push(variant(&b, name, "dfl", |c| {
                c.algorithm.name = Algorithm::Dfl
            }));
            for (label, op) in [
                ("cdfl topk:21", "topk:21"),
                ("cdfl gossip:0.67", "gossip:0.67"),
            ] {
                out.push(variant(&b, name, label, |c| {
                    c.algorithm.name = Algorithm::Cdfl;
                    c.algorithm.compression = op.into();
                    c.algorithm.gamma = "1".into();
                }));
            }
        }
        other => {
            return Err(Error::config(
                "preset",
                format!(
                    "unknown preset `{other}`; expected one of {}",
                    PRESETS.join(", ")
                ),
            ))
        }
    }
    Ok(out)
}

/// Bound constants measured from a config: smoothness, strong convexity and
/// spectral values are exact, variances are estimated at the seeds' starting
/// points, the optimum and their midpoints.
pub fn bound_params(cfg: &ExperimentConfig) -> Result<BoundParams> {
    let r = cfg.resolve()?;
    let obj = &r.objective;
    let spectral = r.mixing.spectral()?;
    let (w_star, f_star) = obj.minimum()?;
    let mut probes = vec![w_star.clone()];
    for &s in &cfg.run.seeds {
        let w0 = default_init(s, obj.dim());
        probes.push((&w0 + &w_star) * 0.5);
        probes.push(w0);
    }
    let var = obj.variance_estimates(&probes, r.batch)?;
    let w1 = default_init(cfg.run.seeds[0], obj.dim());
    let l = obj.smoothness();
    let mu = obj.strong_convexity();
    let eta = r.lr.rate(0, mu);
    let a = if mu > 0.0 {
        averaging_shift(&r.lr, l / mu)
    } else {
        f64::NAN
    };
    let (tau1, tau2) = match cfg.algorithm.name {
        Algorithm::Dsgd => (1.0, 1.0),
        Algorithm::Csgd => (cfg.algorithm.tau1 as f64, 1.0),
        _ => (r.schedule.tau1 as f64, r.schedule.tau2 as f64),
    };
    Ok(BoundParams {
        l,
        mu,
        sigma_sq: var.sigma_sq_global,
        sigma_bar_sq: var.sigma_bar_sq,
        g_sq: var.g_sq,
        zeta: spectral.zeta,
        beta: spectral.beta,
        delta: r.op.delta(obj.dim()),
        eta,
        tau1,
        tau2,
        n: obj.num_nodes() as f64,
        t: cfg.algorithm.steps as f64,
        f_gap: obj.loss(&w1)? - f_star,
        a,
        theta: None,
    })
}

pub const BOUND_HEADER: &str = "param_point,bound,term_sync,term_drift,feasible";
pub const CDFL_HEADER: &str = "rounds,s_k,initial,noise,noise_drift,d1,d2,d3,compression,total";

/// The DFL bound table: the configured point, then `τ₂` and `τ₁` sweeps
/// around it.
pub fn dfl_bound_table(p: &BoundParams) -> String {
    let mut out = String::from(BOUND_HEADER);
    out.push('\n');
    let mut row = |label: String, q: &BoundParams| {
        let b = dfl_bound(q);
        let feasible = lr_feasible(q).unwrap_or(false);
        out.push_str(&format!(
            "{label},{:e},{:e},{:e},{feasible}\n",
            b.total, b.sync_sgd, b.local_drift
        ));
    };
    row("configured".into(), p);
    for tau2 in [1.0, 2.0, 4.0, 8.0, 15.0] {
        row(format!("tau2={tau2}"), &BoundParams { tau2, ..*p });
    }
    for tau1 in [1.0, 2.0, 4.0, 10.0] {
        row(format!("tau1={tau1}"), &BoundParams { tau1, ..*p });
    }
    out
}

/// The C-DFL table at `K = T / τ` rounds, or an error such as
/// [`Error::InsufficientCommunication`].
pub fn cdfl_bound_table(p: &BoundParams, u0_dist_sq: f64) -> Result<String> {
    let rounds = (p.t / p.tau()).floor() as usize;
    let b: CdflBound = cdfl_bound(p, rounds, u0_dist_sq)?;
    Ok(format!(
        "{CDFL_HEADER}\n{rounds},{:e},{:e},{:e},{:e},{:e},{:e},{:e},{:e},{:e}\n",
        b.s_k, b.initial, b.noise, b.noise_drift, b.d1, b.d2, b.d3, b.compression, b.total
    ))
}

/// `‖u₀ − u*‖²` for the first seed's starting point.
pub fn initial_distance_sq(cfg: &ExperimentConfig) -> Result<f64> {
    let obj = cfg.build_objective()?;
    let (w_star, _) = obj.minimum()?;
    let seed = *cfg
        .run
        .seeds
        .first()
        .ok_or_else(|| Error::config("run.seeds", "at least one seed is required"))?;
    let w0: DVector<f64> = default_init(seed, obj.dim());
    Ok((w0 - w_star).norm_squared())
}
