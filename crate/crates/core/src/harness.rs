//! Training loop, evaluation and ablation sweeps, plus the run-directory
//! layout the command-line tool writes.

use std::fmt::Write as _;
use std::fs::{self, File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde_json::Value;

use crate::adapters::AdapterKind;
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::model::{Checkpoint, LossParts, OvxdModel};
use crate::optim::Sgd;
use crate::rng::Rng;
use crate::tape::Tape;
use crate::toybench::{evaluate, gen_benchmark, EvalSplit, Metrics, Scene, ToyBenchmark};

pub const CSV_HEADER: &str = "iter,loss,acc_base,acc_novel,acc_all";
pub const CONFIG_ECHO: &str = "config.json";
pub const NAN_DUMP: &str = "nan_dump.ckpt";

#[derive(Clone, Debug, PartialEq)]
pub struct MetricsRow {
    pub iter: usize,
    pub loss: f64,
    pub acc_base: f64,
    pub acc_novel: f64,
    pub acc_all: f64,
}

impl MetricsRow {
    pub fn csv(&self) -> String {
        format!(
            "{},{:.9},{:.6},{:.6},{:.6}",
            self.iter, self.loss, self.acc_base, self.acc_novel, self.acc_all
        )
    }
}

/// Owns a model and its optimizer while stepping through a benchmark's
/// training scenes.
pub struct Trainer<'a> {
    pub model: OvxdModel,
    pub optimizer: Sgd,
    pub iteration: usize,
    bench: &'a ToyBenchmark,
    rng: Rng,
}

impl<'a> Trainer<'a> {
    pub fn new(cfg: &RunConfig, bench: &'a ToyBenchmark) -> Result<Self> {
        let model = OvxdModel::new(cfg)?;
        model.check_compatible(bench)?;
        let t = &cfg.train;
        Ok(Self {
            model,
            optimizer: Sgd::new(t.lr, t.momentum, t.weight_decay)?,
            iteration: 0,
            bench,
            rng: Rng::derive(cfg.seed, "batches"),
        })
    }

    pub fn cfg(&self) -> &RunConfig {
        &self.model.cfg
    }

    fn batch(&mut self) -> Vec<&'a Scene> {
        let n = self.bench.train.len();
        (0..self.cfg().train.batch_scenes)
            .map(|_| &self.bench.train[self.rng.below(n)])
            .collect()
    }

    /// One optimizer step on a freshly sampled batch. A non-finite loss or
    /// gradient leaves the weights untouched and returns a numeric error.
    pub fn step(&mut self) -> Result<LossParts> {
        let scenes = self.batch();
        let mut tape = Tape::new();
        // A row collapsing to zero or non-finite norm mid-training is a
        // divergence, not a caller error.
        let (loss, parts) = match self.model.training_loss(&mut tape, &scenes, self.bench) {
            Err(Error::Degenerate(m)) => {
                return Err(Error::Numeric(format!("{m} at iteration {}", self.iteration + 1)))
            }
            r => r?,
        };
        if !parts.total.is_finite() {
            return Err(Error::Numeric(format!(
                "loss {} at iteration {}",
                parts.total,
                self.iteration + 1
            )));
        }
        tape.backward_into(loss, &mut self.model.store)?;
        let bad = self
            .model
            .store
            .iter()
            .find(|(_, _, t)| t.grad().is_some_and(|g| g.iter().any(|v| !v.is_finite())))
            .map(|(_, name, _)| name.to_string());
        if let Some(name) = bad {
            self.model.store.zero_grads();
            return Err(Error::Numeric(format!(
                "non-finite gradient for {name} at iteration {}",
                self.iteration + 1
            )));
        }
        self.optimizer.step(&mut self.model.store);
        self.model.clamp_alphas();
        self.iteration += 1;
        Ok(parts)
    }

    /// Training loss on the first `batch_scenes` training scenes, without
    /// touching the weights.
    pub fn probe_loss(&self) -> Result<LossParts> {
        let k = self.cfg().train.batch_scenes;
        let scenes: Vec<&Scene> = self.bench.train.iter().take(k).collect();
        let mut tape = Tape::new();
        let (_, parts) = self.model.training_loss(&mut tape, &scenes, self.bench)?;
        Ok(parts)
    }

    pub fn metrics(&self) -> Result<Metrics> {
        evaluate(&self.model, self.bench, EvalSplit::All)
    }

    pub fn row(&self) -> Result<MetricsRow> {
        let loss = self.probe_loss()?.total;
        let m = self.metrics()?;
        Ok(MetricsRow {
            iter: self.iteration,
            loss,
            acc_base: m.acc_base,
            acc_novel: m.acc_novel,
            acc_all: m.acc_all,
        })
    }

    /// Runs the configured number of iterations, reporting a row before the
    /// first step, every `eval_interval` steps and after the last step.
    pub fn run(&mut self, mut on_row: impl FnMut(&MetricsRow) -> Result<()>) -> Result<Vec<MetricsRow>> {
        let (iters, every) = (self.cfg().train.iterations, self.cfg().train.eval_interval);
        let mut rows = vec![self.row()?];
        on_row(&rows[0])?;
        while self.iteration < iters {
            self.step()?;
            if self.iteration.is_multiple_of(every) || self.iteration == iters {
                let r = self.row()?;
                on_row(&r)?;
                rows.push(r);
            }
        }
        Ok(rows)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            model: self.model.clone(),
            optimizer: self.optimizer.clone(),
            iteration: self.iteration,
        }
    }
}

/// Where a run writes its outputs.
pub fn run_dir(cfg: &RunConfig, root: &Path) -> PathBuf {
    root.join(&cfg.output.dir)
}

#[derive(Clone, Debug)]
pub struct TrainReport {
    pub dir: PathBuf,
    pub rows: Vec<MetricsRow>,
    pub final_metrics: Metrics,
}

/// Generates the benchmark, trains, and writes the config echo, the
/// benchmark, the metrics CSV and the final checkpoint under
/// `root/<output.dir>`. On a numeric failure the current state is dumped to
/// `nan_dump.ckpt` before the error is returned.
pub fn run_training(cfg: &RunConfig, root: &Path) -> Result<TrainReport> {
    cfg.validate()?;
    let dir = run_dir(cfg, root);
    fs::create_dir_all(&dir)?;
    fs::write(dir.join(CONFIG_ECHO), cfg.to_json())?;
    let bench = gen_benchmark(&cfg.bench, cfg.seed)?;
    bench.save(&dir.join(&cfg.output.benchmark))?;

    let mut csv = File::create(dir.join(&cfg.output.metrics))?;
    writeln!(csv, "{CSV_HEADER}")?;
    let mut trainer = Trainer::new(cfg, &bench)?;
    let outcome = trainer.run(|r| {
        writeln!(csv, "{}", r.csv())?;
        Ok(())
    });
    let rows = match outcome {
        Ok(rows) => rows,
        Err(e @ Error::Numeric(_)) => {
            trainer.checkpoint().save(&dir.join(NAN_DUMP))?;
            return Err(e);
        }
        Err(e) => return Err(e),
    };
    csv.flush()?;
    trainer.checkpoint().save(&dir.join(&cfg.output.checkpoint))?;
    Ok(TrainReport {
        dir,
        rows,
        final_metrics: trainer.metrics()?,
    })
}

/// Evaluates a checkpoint on a stored benchmark and appends the result to
/// `csv` (created with a header if absent). The loss column holds the mean
/// evaluation cross-entropy.
pub fn run_eval(ckpt: &Path, bench: &Path, csv: Option<&Path>) -> Result<(Metrics, MetricsRow)> {
    let ck = Checkpoint::load(ckpt)?;
    let bench = ToyBenchmark::load(bench)?;
    ck.model.check_compatible(&bench)?;
    let m = evaluate(&ck.model, &bench, EvalSplit::All)?;
    let row = MetricsRow {
        iter: ck.iteration,
        loss: m.mean_loss,
        acc_base: m.acc_base,
        acc_novel: m.acc_novel,
        acc_all: m.acc_all,
    };
    if let Some(path) = csv {
        let fresh = !path.exists();
        let mut f = OpenOptions::new().create(true).append(true).open(path)?;
        if fresh {
            writeln!(f, "{CSV_HEADER}")?;
        }
        writeln!(f, "{}", row.csv())?;
    }
    Ok((m, row))
}

/// The eight adapter subsets in ablation-table order.
pub fn adapter_subsets() -> Vec<Vec<AdapterKind>> {
    use AdapterKind::{Xaa, Xia, Xsa};
    vec![
        vec![],
        vec![Xaa],
        vec![Xsa],
        vec![Xia],
        vec![Xaa, Xsa],
        vec![Xaa, Xia],
        vec![Xsa, Xia],
        vec![Xaa, Xsa, Xia],
    ]
}

pub const RATIO_GRID: [usize; 4] = [1, 2, 4, 8];
pub const SCALE_GRID: [f64; 4] = [0.25, 0.5, 0.75, 1.0];

fn subset_label(kinds: &[AdapterKind]) -> String {
    if kinds.is_empty() {
        "none".into()
    } else {
        kinds.iter().map(|k| k.name()).collect::<Vec<_>>().join("+")
    }
}

fn parse_subset(s: &str) -> Result<Vec<AdapterKind>> {
    if s == "none" {
        return Ok(Vec::new());
    }
    s.split('+').map(str::parse).collect()
}

/// One ablation cell: a label and the config it trains.
#[derive(Clone, Debug)]
pub struct Cell {
    pub label: String,
    pub cfg: RunConfig,
}

/// Expands `knob` or `knob=v1,v2,...` into cells. Knobs: `adapters`,
/// `adapter.ratio_xsa`, `adapter.ratio_xaa`, `adapter.ratio_xia`,
/// `adapter.ratio_text` (XSA and XAA together), `adapter.scale_s`,
/// `train.unfrozen_tail`.
pub fn parse_sweep(base: &RunConfig, sweep: &str) -> Result<(String, Vec<Cell>)> {
    let (knob, values) = match sweep.split_once('=') {
        Some((k, v)) => (k.trim(), Some(v.split(',').map(str::trim).collect::<Vec<_>>())),
        None => (sweep.trim(), None),
    };
    let num = |v: &str| -> Result<Value> {
        serde_json::from_str(v).map_err(|_| Error::config(format!("{knob}: bad value {v:?}")))
    };
    let set = |cfg: &RunConfig, keys: &[&str], v: &Value| -> Result<RunConfig> {
        keys.iter().try_fold(cfg.clone(), |c, k| c.with_override(k, v.clone()))
    };
    let numeric = |keys: &[&str], default: Vec<String>| -> Result<Vec<Cell>> {
        values
            .clone()
            .map_or(default, |vs| vs.iter().map(|s| s.to_string()).collect())
            .iter()
            .map(|v| {
                Ok(Cell {
                    label: v.clone(),
                    cfg: set(base, keys, &num(v)?)?,
                })
            })
            .collect()
    };
    let ratios = || RATIO_GRID.iter().map(|r| r.to_string()).collect();
    let cells = match knob {
        "adapters" => {
            let subsets = match &values {
                Some(vs) => vs.iter().map(|v| parse_subset(v)).collect::<Result<Vec<_>>>()?,
                None => adapter_subsets(),
            };
            subsets
                .into_iter()
                .map(|kinds| {
                    let v = serde_json::to_value(&kinds)?;
                    Ok(Cell {
                        label: subset_label(&kinds),
                        cfg: set(base, &["adapter.enabled"], &v)?,
                    })
                })
                .collect::<Result<Vec<_>>>()?
        }
        "adapter.ratio_xsa" | "adapter.ratio_xaa" | "adapter.ratio_xia" => numeric(&[knob], ratios())?,
        "adapter.ratio_text" => numeric(&["adapter.ratio_xsa", "adapter.ratio_xaa"], ratios())?,
        "adapter.scale_s" => numeric(&[knob], SCALE_GRID.iter().map(|s| format!("{s:?}")).collect())?,
        "train.unfrozen_tail" => numeric(&[knob], (0..=base.model.encoder.layers).map(|l| l.to_string()).collect())?,
        other => return Err(Error::config(format!("unknown sweep knob {other:?}"))),
    };
    for c in &cells {
        c.cfg.validate()?;
    }
    Ok((knob.to_string(), cells))
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub label: String,
    pub metrics: Metrics,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationTable {
    pub knob: String,
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    pub fn to_csv(&self) -> String {
        let mut s = format!("{},acc_base,acc_novel,acc_all\n", self.knob);
        for r in &self.rows {
            let m = &r.metrics;
            writeln!(s, "{},{:.6},{:.6},{:.6}", r.label, m.acc_base, m.acc_novel, m.acc_all).expect("write to string");
        }
        s
    }
}

/// Trains one model per cell, in parallel, on a benchmark shared by all
/// cells, and tabulates final metrics in cell order.
pub fn run_ablation(base: &RunConfig, sweep: &str) -> Result<AblationTable> {
    base.validate()?;
    let (knob, cells) = parse_sweep(base, sweep)?;
    let bench = gen_benchmark(&base.bench, base.seed)?;
    let rows = cells
        .par_iter()
        .map(|c| {
            let mut t = Trainer::new(&c.cfg, &bench)?;
            while t.iteration < c.cfg.train.iterations {
                t.step()?;
            }
            Ok(AblationRow {
                label: c.label.clone(),
                metrics: t.metrics()?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(AblationTable { knob, rows })
}
