use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use super::{train_loop, MetricsRow, RunPaths, TrainConfig, TrainError};
use crate::dataset::{AnnotatedDataset, Vocabulary};
use crate::eval::{emit_curves, CurvePoint};
use crate::model::{ModelConfig, ParamStore};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepAxis {
    LambdaR,
    FrozenBlocks,
}

impl SweepAxis {
    pub fn name(self) -> &'static str {
        match self {
            SweepAxis::LambdaR => "lambda_r",
            SweepAxis::FrozenBlocks => "frozen_blocks",
        }
    }
}

/// Outcome of one value of a sweep.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRun {
    pub value: f64,
    pub seed: u64,
    pub note: Option<String>,
    /// Best validation success, or `None` when the run failed.
    pub val_success: Option<f64>,
    pub final_l_action: Option<f64>,
    pub final_l_reasoning: Option<f64>,
    pub steps_run: usize,
    pub error: Option<String>,
    #[serde(skip)]
    pub metrics: Vec<MetricsRow>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub axis: SweepAxis,
    pub runs: Vec<SweepRun>,
}

impl SweepReport {
    pub fn points(&self) -> Vec<CurvePoint> {
        self.runs
            .iter()
            .map(|r| CurvePoint {
                value: r.value,
                val_success: r.val_success,
                final_l_action: r.final_l_action,
                final_l_reasoning: r.final_l_reasoning,
                note: r.note.clone().or_else(|| r.error.clone()),
            })
            .collect()
    }
}

/// Seed of the run for `value`, independent of the value's position in the list.
fn run_seed(base: u64, value: f64) -> u64 {
    let mut z = base ^ value.to_bits().wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn configure(axis: SweepAxis, value: f64, base: &TrainConfig, layers: usize) -> Result<(TrainConfig, Option<String>), TrainError> {
    let mut c = base.clone();
    c.seed = run_seed(base.seed, value);
    let mut note = None;
    match axis {
        SweepAxis::LambdaR => c.lambda_r = value,
        SweepAxis::FrozenBlocks => {
            if value < 0.0 || value.fract() != 0.0 {
                return Err(TrainError::Config(format!("frozen block count {value} is not a non-negative integer")));
            }
            let k = value as usize;
            if k > layers {
                return Err(TrainError::Config(format!("cannot freeze {k} of {layers} blocks")));
            }
            if k == layers {
                note = Some("head-only: every transformer block frozen".into());
            }
            c.frozen_blocks = k;
        }
    }
    c.validate()?;
    Ok((c, note))
}

/// Trains one independent run per distinct value, `jobs` at a time. Failed runs
/// are recorded and the sweep continues. With `out_dir`, each run writes under
/// `runs/<axis>_<value>/` and the curve goes to `reports/sweep_<axis>.{svg,json}`.
#[allow(clippy::too_many_arguments)]
pub fn sweep(
    axis: SweepAxis,
    values: &[f64],
    base: &TrainConfig,
    init: &ParamStore,
    model: &ModelConfig,
    train: &AnnotatedDataset,
    val: &AnnotatedDataset,
    vocab: &Vocabulary,
    out_dir: Option<&Path>,
    jobs: usize,
) -> Result<SweepReport, TrainError> {
    if values.is_empty() {
        return Err(TrainError::Config("sweep needs at least one value".into()));
    }
    let mut distinct: Vec<f64> = Vec::with_capacity(values.len());
    for &v in values {
        if distinct.iter().any(|d| d.to_bits() == v.to_bits()) {
            log::warn!("duplicate {} value {v} dropped from the sweep", axis.name());
        } else {
            distinct.push(v);
        }
    }
    let next = AtomicUsize::new(0);
    let results: Mutex<Vec<Option<SweepRun>>> = Mutex::new(vec![None; distinct.len()]);
    let worker = || loop {
        let i = next.fetch_add(1, Ordering::SeqCst);
        let Some(&value) = distinct.get(i) else { break };
        let run = run_one(axis, value, base, init, model, train, val, vocab, out_dir);
        results.lock().expect("no worker panicked")[i] = Some(run);
    };
    std::thread::scope(|s| {
        for _ in 0..jobs.clamp(1, distinct.len()) {
            s.spawn(worker);
        }
    });
    let runs: Vec<SweepRun> = results
        .into_inner()
        .expect("no worker panicked")
        .into_iter()
        .map(|r| r.expect("every value ran"))
        .collect();
    let report = SweepReport { axis, runs };
    if let Some(dir) = out_dir {
        let reports = dir.join("reports");
        std::fs::create_dir_all(&reports)?;
        let stem = reports.join(format!("sweep_{}", axis.name()));
        let points = report.points();
        if points.iter().filter(|p| p.val_success.is_some()).count() >= 2 {
            emit_curves(&points, axis.name(), &stem)?;
        } else {
            log::warn!("fewer than two successful runs; no curve drawn");
            std::fs::write(stem.with_extension("json"), serde_json::to_string_pretty(&points)?)?;
        }
    }
    Ok(report)
}

#[allow(clippy::too_many_arguments)]
fn run_one(
    axis: SweepAxis,
    value: f64,
    base: &TrainConfig,
    init: &ParamStore,
    model: &ModelConfig,
    train: &AnnotatedDataset,
    val: &AnnotatedDataset,
    vocab: &Vocabulary,
    out_dir: Option<&Path>,
) -> SweepRun {
    let failed = |seed, note, e: TrainError| SweepRun {
        value,
        seed,
        note,
        val_success: None,
        final_l_action: None,
        final_l_reasoning: None,
        steps_run: 0,
        error: Some(e.to_string()),
        metrics: Vec::new(),
    };
    let (config, note) = match configure(axis, value, base, model.layers) {
        Ok(c) => c,
        Err(e) => return failed(run_seed(base.seed, value), None, e),
    };
    let paths = out_dir.map(|d| RunPaths::under(&d.join("runs").join(format!("{}_{value}", axis.name()))));
    match train_loop(init, model, train, val, vocab, &config, paths.as_ref()) {
        Ok(o) => SweepRun {
            value,
            seed: config.seed,
            note,
            val_success: Some(o.best_val_success),
            final_l_action: Some(o.probe_final.l_action),
            final_l_reasoning: Some(o.probe_final.l_reasoning),
            steps_run: o.steps_run,
            error: None,
            metrics: o.metrics,
        },
        Err(e) => {
            log::warn!("{} = {value} failed: {e}", axis.name());
            failed(config.seed, note, e)
        }
    }
}
