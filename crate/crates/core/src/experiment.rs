//! Experiment runner: (mode x seed) fan-out, per-run artifacts, summaries and
//! LSQ-relative comparison tables.
//!
//! Layout of a run directory:
//!
//! ```text
//! <out>/summary.json
//! <out>/data/{all,train,eval}.csv
//! <out>/<mode>_seed<k>/{metrics.jsonl,checkpoint.bin,sharpness.json}
//! ```

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io::{BufWriter, Write};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::checkpoint::{self, Checkpoint};
use crate::config::{DatasetSpec, ExperimentConfig};
use crate::data::{self, Dataset};
use crate::error::{invalid, Error, Result};
use crate::model::{Arch, Model};
use crate::parallel::{self, Execution};
use crate::sharpness::{default_eta, measure_sharpness, SharpnessParams, SharpnessReport};
use crate::train::{fit, RunStatus, TrainConfig, TrainMode};

pub const SUMMARY_FILE: &str = "summary.json";
pub const METRICS_FILE: &str = "metrics.jsonl";
pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
pub const SHARPNESS_FILE: &str = "sharpness.json";
pub const COMPARE_HEADER: &str = "task,mode,bits_w,bits_a,metric,value,delta_vs_lsq";

/// Final state of one (mode, seed) cell.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellOutcome {
    pub run_id: String,
    pub mode: TrainMode,
    pub seed: u64,
    pub status: RunStatus,
    pub steps: usize,
    /// Last finite evaluation; for diverged runs this predates the divergence.
    pub eval_acc: Option<f64>,
    pub eval_loss: Option<f64>,
    pub sharpness: Vec<SharpnessReport>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

/// Mean, sample standard deviation and median over the finite values.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Stat {
    pub n: usize,
    pub mean: Option<f64>,
    pub std: Option<f64>,
    pub median: Option<f64>,
}

impl Stat {
    pub fn of(values: impl IntoIterator<Item = f64>) -> Self {
        let mut v: Vec<f64> = values.into_iter().filter(|x| x.is_finite()).collect();
        let n = v.len();
        if n == 0 {
            return Stat {
                n,
                mean: None,
                std: None,
                median: None,
            };
        }
        let mean = v.iter().sum::<f64>() / n as f64;
        let std = if n > 1 {
            (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
        } else {
            0.0
        };
        v.sort_by(f64::total_cmp);
        let median = if n % 2 == 1 {
            v[n / 2]
        } else {
            0.5 * (v[n / 2 - 1] + v[n / 2])
        };
        Stat {
            n,
            mean: Some(mean),
            std: Some(std),
            median: Some(median),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SharpnessStat {
    pub rho: f64,
    #[serde(flatten)]
    pub stat: Stat,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModeSummary {
    pub mode: TrainMode,
    pub bits_w: u32,
    pub bits_a: u32,
    pub rho: f64,
    pub runs: usize,
    pub ok: usize,
    pub diverged: usize,
    pub crashed: usize,
    pub eval_acc: Stat,
    pub eval_loss: Stat,
    pub sharpness: Vec<SharpnessStat>,
    pub cells: Vec<CellOutcome>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub task: String,
    pub modes: Vec<ModeSummary>,
}

impl Summary {
    pub fn mode(&self, mode: TrainMode) -> Option<&ModeSummary> {
        self.modes.iter().find(|m| m.mode == mode)
    }
}

pub fn build_dataset(spec: &DatasetSpec) -> Result<Dataset> {
    let ds = match spec {
        DatasetSpec::TwoMoons { n, noise, seed } => data::gen_two_moons(*n, *noise, *seed)?.with_split(*seed),
        DatasetSpec::Blobs {
            n,
            centers,
            spread,
            seed,
        } => data::gen_blobs(*n, centers, *spread, *seed)?.with_split(*seed),
        DatasetSpec::Csv { path, seed } => data::load_csv(path)?.with_split(*seed),
    };
    Ok(ds)
}

/// The configured architecture, or an MLP `[d, 64, 64, classes]`; checked
/// against the dataset's shape.
pub fn resolve_arch(cfg: &ExperimentConfig, ds: &Dataset) -> Result<Arch> {
    let arch = cfg.model.clone().unwrap_or(Arch::Mlp {
        dims: vec![ds.dim, 64, 64, ds.classes],
    });
    let (input, classes) = match &arch {
        Arch::Mlp { dims } => (dims[0], *dims.last().unwrap()),
        Arch::Transformer(t) => (t.seq_len, t.classes),
    };
    if input != ds.dim || classes < ds.classes {
        return Err(Error::Config(format!(
            "model expects {input} features / {classes} classes, dataset {} has {} / {}",
            ds.name, ds.dim, ds.classes
        )));
    }
    Ok(arch)
}

struct Cell {
    mode: TrainMode,
    seed: u64,
    run_id: String,
}

fn plan_cells(cfg: &ExperimentConfig) -> Vec<Cell> {
    let mut seen: BTreeMap<String, usize> = BTreeMap::new();
    let mut cells = Vec::new();
    for &mode in &cfg.modes {
        for &seed in &cfg.seeds {
            let base = format!("{mode}_seed{seed}");
            let count = seen.entry(base.clone()).or_insert(0);
            let run_id = if *count == 0 { base } else { format!("{base}_r{count}") };
            *count += 1;
            cells.push(Cell { mode, seed, run_id });
        }
    }
    cells
}

fn run_cell(cfg: &ExperimentConfig, ds: &Dataset, arch: &Arch, cell: &Cell, dir: &Path) -> Result<CellOutcome> {
    std::fs::create_dir_all(dir)?;
    let mut model = Model::build(arch, cfg.quant_settings(), cell.mode, cell.seed)?;
    let tc = TrainConfig {
        run_id: cell.run_id.clone(),
        mode: cell.mode,
        rho: cfg.rho(),
        epochs: cfg.epochs,
        batch_size: cfg.batch_size,
        optimizer: cfg.optimizer.kind,
        lr_w: cfg.optimizer.lr,
        lr_s: cfg.lr_s_for(cell.mode),
        momentum: cfg.optimizer.momentum,
        seed: cell.seed,
    };
    let mut log = BufWriter::new(std::fs::File::create(dir.join(METRICS_FILE))?);
    let outcome = fit(&tc, &mut model, ds, |r| {
        serde_json::to_writer(&mut log, r)?;
        log.write_all(b"\n")?;
        Ok(())
    })?;
    log.flush()?;

    let eval = outcome.final_eval();
    let mut sharpness = Vec::new();
    if cfg.sharpness.enabled && outcome.status == RunStatus::Ok {
        let subset = ds.train_subset(cfg.sharpness.subset);
        for &rho in &cfg.sharpness.rhos {
            let params = SharpnessParams {
                rho,
                eta: cfg.sharpness.eta.unwrap_or(default_eta(rho)),
                steps: cfg.sharpness.steps,
                seed: cell.seed,
            };
            sharpness.push(measure_sharpness(&model, &subset, params, &cell.run_id)?);
        }
    }
    std::fs::write(dir.join(SHARPNESS_FILE), serde_json::to_vec_pretty(&sharpness)?)?;
    let result = CellOutcome {
        run_id: cell.run_id.clone(),
        mode: cell.mode,
        seed: cell.seed,
        status: outcome.status,
        steps: outcome.steps,
        eval_acc: eval.and_then(|r| r.eval_acc),
        eval_loss: eval.and_then(|r| r.eval_loss),
        sharpness,
        error: None,
    };
    checkpoint::save(
        &Checkpoint {
            run_id: cell.run_id.clone(),
            mode: cell.mode,
            seed: cell.seed,
            step: outcome.steps,
            model,
        },
        dir.join(CHECKPOINT_FILE),
    )?;
    Ok(result)
}

fn crashed(cell: &Cell, msg: String) -> CellOutcome {
    CellOutcome {
        run_id: cell.run_id.clone(),
        mode: cell.mode,
        seed: cell.seed,
        status: RunStatus::Crashed,
        steps: 0,
        eval_acc: None,
        eval_loss: None,
        sharpness: Vec::new(),
        error: Some(msg),
    }
}

fn panic_message(p: Box<dyn std::any::Any + Send>) -> String {
    p.downcast_ref::<&str>()
        .map(|s| s.to_string())
        .or_else(|| p.downcast_ref::<String>().cloned())
        .unwrap_or_else(|| "panic".into())
}

fn summarize(cfg: &ExperimentConfig, ds: &Dataset, cells: Vec<CellOutcome>) -> Summary {
    let modes = cfg
        .modes
        .iter()
        .fold(Vec::new(), |mut acc, m| {
            if !acc.contains(m) {
                acc.push(*m);
            }
            acc
        })
        .into_iter()
        .map(|mode| {
            let mine: Vec<CellOutcome> = cells.iter().filter(|c| c.mode == mode).cloned().collect();
            let count = |s| mine.iter().filter(|c| c.status == s).count();
            let sharpness = cfg
                .sharpness
                .rhos
                .iter()
                .map(|&rho| SharpnessStat {
                    rho,
                    stat: Stat::of(
                        mine.iter()
                            .flat_map(|c| c.sharpness.iter().filter(|r| r.rho == rho).map(|r| r.score)),
                    ),
                })
                .collect();
            let (bits_w, bits_a) = if mode.quantized() {
                (cfg.bits_w, cfg.bits_a)
            } else {
                (32, 32)
            };
            ModeSummary {
                mode,
                bits_w,
                bits_a,
                rho: cfg.rho(),
                runs: mine.len(),
                ok: count(RunStatus::Ok),
                diverged: count(RunStatus::Diverged),
                crashed: count(RunStatus::Crashed),
                eval_acc: Stat::of(mine.iter().filter_map(|c| c.eval_acc)),
                eval_loss: Stat::of(mine.iter().filter_map(|c| c.eval_loss)),
                sharpness,
                cells: mine,
            }
        })
        .collect();
    let task = if cfg.name == "task" {
        ds.name.clone()
    } else {
        cfg.name.clone()
    };
    Summary { task, modes }
}

/// Trains every (mode, seed) cell of `cfg` under `out` and writes the summary.
/// Cells that panic or fail for reasons other than I/O are recorded as
/// crashed; I/O failures abort the run.
pub fn run(cfg: &ExperimentConfig, out: &Path, exec: Execution) -> Result<Summary> {
    let ds = build_dataset(&cfg.dataset)?;
    let arch = resolve_arch(cfg, &ds)?;
    let data_dir = out.join("data");
    std::fs::create_dir_all(&data_dir)?;
    data::write_csv(&ds, None, data_dir.join("all.csv"))?;
    data::write_csv(&ds, Some(&ds.train), data_dir.join("train.csv"))?;
    data::write_csv(&ds, Some(&ds.eval), data_dir.join("eval.csv"))?;

    let cells = plan_cells(cfg);
    let exec = if cfg.sequential { Execution::Sequential } else { exec };
    let results = parallel::map(exec, &cells, |cell| {
        let dir = out.join(&cell.run_id);
        match catch_unwind(AssertUnwindSafe(|| run_cell(cfg, &ds, &arch, cell, &dir))) {
            Ok(Ok(c)) => Ok(c),
            Ok(Err(Error::Io(e))) => Err(Error::Io(e)),
            Ok(Err(e)) => Ok(crashed(cell, e.to_string())),
            Err(p) => Ok(crashed(cell, panic_message(p))),
        }
    });
    let results = results.into_iter().collect::<Result<Vec<_>>>()?;
    let summary = summarize(cfg, &ds, results);
    std::fs::write(out.join(SUMMARY_FILE), serde_json::to_vec_pretty(&summary)?)?;
    Ok(summary)
}

/// Options for [`sharpness_of_checkpoint`].
#[derive(Clone, Debug, PartialEq)]
pub struct SharpnessJob {
    pub rhos: Vec<f64>,
    pub eta: Option<f64>,
    pub steps: usize,
    pub subset: usize,
    pub seed: u64,
}

impl Default for SharpnessJob {
    fn default() -> Self {
        Self {
            rhos: crate::sharpness::DEFAULT_RHOS.to_vec(),
            eta: None,
            steps: crate::sharpness::DEFAULT_STEPS,
            subset: crate::sharpness::DEFAULT_SUBSET,
            seed: 0,
        }
    }
}

/// One report per radius for the checkpoint at `ckpt` on the first
/// `job.subset` rows of the CSV at `data`.
pub fn sharpness_of_checkpoint(ckpt: &Path, data: &Path, job: &SharpnessJob) -> Result<Vec<SharpnessReport>> {
    let ck = checkpoint::load(ckpt)?;
    let ds = data::load_csv(data)?;
    if ds.dim != ck.model.input_dim() {
        return Err(Error::Data(format!(
            "data has {} features, checkpoint expects {}",
            ds.dim,
            ck.model.input_dim()
        )));
    }
    if ds.classes > ck.model.classes() {
        return Err(Error::Data(format!(
            "data has {} classes, checkpoint predicts {}",
            ds.classes,
            ck.model.classes()
        )));
    }
    let batch = ds.train_subset(job.subset);
    job.rhos
        .iter()
        .map(|&rho| {
            let params = SharpnessParams {
                rho,
                eta: job.eta.unwrap_or(default_eta(rho)),
                steps: job.steps,
                seed: job.seed,
            };
            measure_sharpness(&ck.model, &batch, params, &ck.run_id)
        })
        .collect()
}

// ── comparison ──────────────────────────────────────────────────────────

#[derive(Clone, Debug, PartialEq)]
pub struct CompareRow {
    pub task: String,
    pub mode: TrainMode,
    pub bits_w: u32,
    pub bits_a: u32,
    pub metric: String,
    pub value: f64,
    pub delta_vs_lsq: f64,
}

fn opt(x: Option<f64>) -> f64 {
    x.unwrap_or(f64::NAN)
}

fn metrics_of(m: &ModeSummary) -> Vec<(String, f64)> {
    let mut out = vec![
        ("eval_acc".to_string(), opt(m.eval_acc.mean)),
        ("eval_loss".to_string(), opt(m.eval_loss.mean)),
    ];
    for s in &m.sharpness {
        out.push((format!("sharpness_median@{}", s.rho), opt(s.stat.median)));
        out.push((format!("sharpness_mean@{}", s.rho), opt(s.stat.mean)));
    }
    out.push(("diverged".to_string(), m.diverged as f64));
    out.push(("crashed".to_string(), m.crashed as f64));
    out
}

/// Per-task, per-mode metrics with deltas against the task's LSQ entry of the
/// same bit-widths (or its first LSQ entry when none matches).
pub fn compare(summaries: &[Summary]) -> Result<Vec<CompareRow>> {
    let mut tasks: Vec<(&str, Vec<&ModeSummary>)> = Vec::new();
    for s in summaries {
        match tasks.iter_mut().find(|(t, _)| *t == s.task) {
            Some((_, v)) => v.extend(&s.modes),
            None => tasks.push((&s.task, s.modes.iter().collect())),
        }
    }
    let mut rows = Vec::new();
    for (task, entries) in tasks {
        let lsq: Vec<&ModeSummary> = entries.iter().copied().filter(|m| m.mode == TrainMode::LSQ).collect();
        if lsq.is_empty() {
            return Err(invalid(format!("task {task:?} has no LSQ baseline")));
        }
        for m in entries {
            let base = lsq
                .iter()
                .find(|b| (b.bits_w, b.bits_a) == (m.bits_w, m.bits_a))
                .unwrap_or(&lsq[0]);
            let base_metrics: BTreeMap<String, f64> = metrics_of(base).into_iter().collect();
            for (metric, value) in metrics_of(m) {
                let delta = value - base_metrics.get(&metric).copied().unwrap_or(f64::NAN);
                rows.push(CompareRow {
                    task: task.to_string(),
                    mode: m.mode,
                    bits_w: m.bits_w,
                    bits_a: m.bits_a,
                    metric,
                    value,
                    delta_vs_lsq: delta,
                });
            }
        }
    }
    Ok(rows)
}

pub fn load_summary(dir: &Path) -> Result<Summary> {
    let bytes = std::fs::read(dir.join(SUMMARY_FILE))?;
    Ok(serde_json::from_slice(&bytes)?)
}

pub fn compare_dirs(dirs: &[PathBuf]) -> Result<Vec<CompareRow>> {
    let summaries = dirs.iter().map(|d| load_summary(d)).collect::<Result<Vec<_>>>()?;
    compare(&summaries)
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

/// Values use Rust's shortest round-trip formatting, so parsing them back
/// yields the exact f64.
pub fn rows_to_csv(rows: &[CompareRow]) -> String {
    let mut out = String::from(COMPARE_HEADER);
    out.push('\n');
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{}",
            csv_field(&r.task),
            r.mode,
            r.bits_w,
            r.bits_a,
            csv_field(&r.metric),
            r.value,
            r.delta_vs_lsq
        );
    }
    out
}

pub fn rows_to_table(rows: &[CompareRow]) -> String {
    let header = ["task", "mode", "W/A", "metric", "value", "delta_vs_lsq"];
    let cells: Vec<[String; 6]> = rows
        .iter()
        .map(|r| {
            [
                r.task.clone(),
                r.mode.to_string(),
                format!("{}/{}", r.bits_w, r.bits_a),
                r.metric.clone(),
                format!("{:.6}", r.value),
                format!("{:+.6}", r.delta_vs_lsq),
            ]
        })
        .collect();
    let mut width = header.map(str::len);
    for row in &cells {
        for (w, c) in width.iter_mut().zip(row) {
            *w = (*w).max(c.len());
        }
    }
    let mut out = String::new();
    let line = |out: &mut String, row: &[&str]| {
        for (i, (c, w)) in row.iter().zip(&width).enumerate() {
            if i > 0 {
                out.push_str("  ");
            }
            if i >= 4 {
                let _ = write!(out, "{c:>w$}");
            } else {
                let _ = write!(out, "{c:<w$}");
            }
        }
        out.truncate(out.trim_end().len());
        out.push('\n');
    };
    line(&mut out, &header);
    let rule: Vec<String> = width.iter().map(|w| "-".repeat(*w)).collect();
    line(&mut out, &rule.iter().map(String::as_str).collect::<Vec<_>>());
    for row in &cells {
        line(&mut out, &row.iter().map(String::as_str).collect::<Vec<_>>());
    }
    out
}

/// Wide layout for bar charts: one row per (task, metric), one delta column
/// per `<mode>_W<bits_w>A<bits_a>` series.
pub fn rows_to_plot_csv(rows: &[CompareRow]) -> String {
    let mut series: Vec<String> = Vec::new();
    let mut keys: Vec<(String, String)> = Vec::new();
    let mut cells: BTreeMap<(String, String, String), f64> = BTreeMap::new();
    for r in rows {
        let s = format!("{}_W{}A{}", r.mode, r.bits_w, r.bits_a);
        if !series.contains(&s) {
            series.push(s.clone());
        }
        let k = (r.task.clone(), r.metric.clone());
        if !keys.contains(&k) {
            keys.push(k.clone());
        }
        cells.insert((k.0, k.1, s), r.delta_vs_lsq);
    }
    let mut out = String::from("task,metric");
    for s in &series {
        out.push(',');
        out.push_str(s);
    }
    out.push('\n');
    for (task, metric) in keys {
        let _ = write!(out, "{},{}", csv_field(&task), csv_field(&metric));
        for s in &series {
            match cells.get(&(task.clone(), metric.clone(), s.clone())) {
                Some(v) => {
                    let _ = write!(out, ",{v}");
                }
                None => out.push(','),
            }
        }
        out.push('\n');
    }
    out
}

/// Writes `compare.csv`, `compare.txt` and `compare_plot.csv` into `out`.
pub fn write_compare(rows: &[CompareRow], out: &Path) -> Result<()> {
    std::fs::create_dir_all(out)?;
    std::fs::write(out.join("compare.csv"), rows_to_csv(rows))?;
    std::fs::write(out.join("compare.txt"), rows_to_table(rows))?;
    std::fs::write(out.join("compare_plot.csv"), rows_to_plot_csv(rows))?;
    Ok(())
}
