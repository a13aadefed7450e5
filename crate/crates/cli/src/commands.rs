use std::path::Path;

use serde_json::json;
use vla_core::dataset::{augment, generate_demos, AnnotatedDataset, DatasetError, DemoDataset, Vocabulary};
use vla_core::eval::{
    compare_alignment, emit_heatmap, eval_suite, write_episode_log, ExpertPolicy, ModelPolicy, Policy, RandomPolicy,
    SuccessTable,
};
use vla_core::model::{load_checkpoint, save_checkpoint, Checkpoint, ParamStore};
use vla_core::sim::render;
use vla_core::teacher::{OracleTeacher, RemoteTeacher};
use vla_core::train::{sweep as run_sweep, train_loop, RunPaths, SweepAxis};

use crate::config::{PolicyKind, RunConfig, TeacherMode};
use crate::error::CliError;

const DEMOS: &str = "demos";
const ANNOTATED: &str = "annotated";
const VOCAB_FILE: &str = "vocab.json";

fn reports_dir(config: &RunConfig) -> Result<std::path::PathBuf, CliError> {
    let dir = config.out.join("reports");
    std::fs::create_dir_all(&dir)?;
    Ok(dir)
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    std::fs::write(path, serde_json::to_string_pretty(value)? + "\n")?;
    Ok(())
}

// ── data ─────────────────────────────────────────────────────────────────

pub fn gen_data(config: &RunConfig) -> Result<(), CliError> {
    let tasks = config.tasks()?;
    if config.data.episodes_per_task == 0 {
        return Err(CliError::Config("--episodes must be at least 1".into()));
    }
    config.persist()?;
    let vocab = Vocabulary::standard();
    let demos = generate_demos(
        &tasks,
        config.data.variant_mode,
        config.data.episodes_per_task,
        config.data.seed,
        &vocab,
    )?;
    demos.save(&config.out, DEMOS)?;
    vocab.save(&config.out.join(VOCAB_FILE))?;
    log::info!(
        "{} steps from {} episodes written to {}",
        demos.len(),
        demos.manifest.episodes,
        config.out.display()
    );
    Ok(())
}

pub fn annotate(mut config: RunConfig) -> Result<(), CliError> {
    let dir = config
        .data
        .demos_dir
        .clone()
        .ok_or_else(|| CliError::Config("annotate needs --in <dir with demos>".into()))?;
    if config.teacher.mode == TeacherMode::Remote {
        config.teacher.remote = config.teacher.remote.clone().with_env();
        config.teacher.remote.validate()?;
    }
    config.persist()?;
    let vocab = Vocabulary::standard();
    let demos = DemoDataset::load(&dir, DEMOS, &vocab)?;
    let result = match config.teacher.mode {
        TeacherMode::Oracle => augment(&demos, &OracleTeacher, &vocab),
        TeacherMode::Remote => {
            let teacher = RemoteTeacher { config: config.teacher.remote.clone(), vocab: vocab.clone() };
            augment(&demos, &teacher, &vocab)
        }
    };
    let annotated = match result {
        Ok(a) => a,
        Err(DatasetError::PartialOutput { failed, total, first_error }) => {
            let path = config.out.join("failures.json");
            write_json(&path, &json!({"total": total, "failed": failed, "first_error": first_error}))?;
            return Err(CliError::Partial(format!(
                "{} of {total} steps failed to annotate; see {}",
                failed.len(),
                path.display()
            )));
        }
        Err(e) => return Err(e.into()),
    };
    annotated.save(&config.out, ANNOTATED)?;
    vocab.save(&config.out.join(VOCAB_FILE))?;
    log::info!("annotated {} of {} steps", annotated.len(), demos.len());
    Ok(())
}

fn load_splits(config: &RunConfig, vocab: &Vocabulary) -> Result<(AnnotatedDataset, AnnotatedDataset), CliError> {
    let dir = config
        .data
        .annotated_dir
        .as_ref()
        .ok_or_else(|| CliError::Config("training needs --data <dir with annotated dataset>".into()))?;
    let f = config.data.val_fraction;
    if !(f > 0.0 && f < 1.0) {
        return Err(CliError::Config(format!("val_fraction must lie in (0, 1), got {f}")));
    }
    let data = AnnotatedDataset::load(dir, ANNOTATED, vocab)?;
    Ok(data.split_by_episode(f))
}

// ── training ─────────────────────────────────────────────────────────────

pub fn train(config: &RunConfig) -> Result<(), CliError> {
    config.train.validate()?;
    config.persist()?;
    let vocab = Vocabulary::standard();
    let (train_set, val_set) = load_splits(config, &vocab)?;
    let model = config.model_config(&vocab);
    model.validate()?;
    let init = ParamStore::init(&model, config.model.init_seed)?;
    let paths = RunPaths::under(&config.out);
    let init_ckpt = Checkpoint {
        config: model.clone(),
        vocab_hash: vocab.hash(),
        metadata: json!({"step": 0, "init_seed": config.model.init_seed}),
        params: init.clone(),
    };
    save_checkpoint(&config.out.join("checkpoints").join("init.ckpt"), &init_ckpt)?;
    log::info!(
        "training on {} steps ({} validation), {} trainable of {} parameters",
        train_set.len(),
        val_set.len(),
        init.num_trainable(),
        init.num_params()
    );
    let outcome = train_loop(&init, &model, &train_set, &val_set, &vocab, &config.train, Some(&paths))?;
    let reports = reports_dir(config)?;
    write_json(
        &reports.join("train_summary.json"),
        &json!({
            "best_val_success": outcome.best_val_success,
            "best_step": outcome.best_step,
            "steps_run": outcome.steps_run,
            "stopped_early": outcome.stopped_early,
            "probe_initial": outcome.probe_initial,
            "probe_final": outcome.probe_final,
        }),
    )?;
    log::info!(
        "done after {} steps; best validation success {:.3} at step {}",
        outcome.steps_run,
        outcome.best_val_success,
        outcome.best_step
    );
    if config.evaluate_after_train {
        let mut policy = ModelPolicy::new(&outcome.best_params, &model, &vocab);
        run_eval(config, &mut policy)?;
    }
    Ok(())
}

pub fn sweep(config: &RunConfig, axis: SweepAxis) -> Result<(), CliError> {
    config.train.validate()?;
    config.persist()?;
    let vocab = Vocabulary::standard();
    let (train_set, val_set) = load_splits(config, &vocab)?;
    let model = config.model_config(&vocab);
    let values = if config.sweep.values.is_empty() {
        match axis {
            SweepAxis::LambdaR => vec![0.0, 0.1, 0.3, 1.0, 3.0],
            SweepAxis::FrozenBlocks => (0..=config.model.layers).map(|k| k as f64).collect(),
        }
    } else {
        config.sweep.values.clone()
    };
    // Freezing is applied per run; the shared initialisation must be valid for any K.
    let init = ParamStore::init(&vla_core::model::ModelConfig { frozen_blocks: 0, ..model.clone() }, config.model.init_seed)?;
    let report = run_sweep(
        axis,
        &values,
        &config.train,
        &init,
        &model,
        &train_set,
        &val_set,
        &vocab,
        Some(&config.out),
        config.sweep.jobs,
    )?;
    let reports = reports_dir(config)?;
    write_json(&reports.join(format!("sweep_{}_runs.json", axis.name())), &report)?;
    let mut csv = String::from("value,seed,val_success,final_L_action,final_L_reasoning,steps_run,note\n");
    let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    for r in &report.runs {
        let note = r.note.clone().or_else(|| r.error.clone()).unwrap_or_default().replace(',', ";");
        csv.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            r.value,
            r.seed,
            opt(r.val_success),
            opt(r.final_l_action),
            opt(r.final_l_reasoning),
            r.steps_run,
            note
        ));
    }
    std::fs::write(config.out.join("metrics.csv"), csv)?;
    for r in &report.runs {
        match (&r.error, r.val_success) {
            (Some(e), _) => log::warn!("{} = {}: failed ({e})", axis.name(), r.value),
            (None, Some(v)) => log::info!("{} = {}: best validation success {v:.3}", axis.name(), r.value),
            _ => {}
        }
    }
    Ok(())
}

// ── evaluation ───────────────────────────────────────────────────────────

fn run_eval<P: Policy + ?Sized>(config: &RunConfig, policy: &mut P) -> Result<Vec<SuccessTable>, CliError> {
    let tasks = config.tasks()?;
    let (tables, records) = eval_suite(policy, &tasks, &config.eval)?;
    let reports = reports_dir(config)?;
    for t in &tables {
        let csv = t.to_csv();
        std::fs::write(reports.join(format!("success_{}.csv", t.mode.name())), &csv)?;
        print!("{csv}");
    }
    write_episode_log(&reports.join("episodes.jsonl"), &records)?;
    Ok(tables)
}

pub fn eval(config: &RunConfig) -> Result<(), CliError> {
    config.eval.validate()?;
    config.tasks()?;
    config.persist()?;
    let vocab = Vocabulary::standard();
    match config.eval_policy {
        PolicyKind::Expert => run_eval(config, &mut ExpertPolicy)?,
        PolicyKind::Random => run_eval(config, &mut RandomPolicy::new(config.eval.seed_base))?,
        PolicyKind::Checkpoint => {
            let path = config
                .eval_checkpoint
                .as_ref()
                .ok_or_else(|| CliError::Config("eval needs --checkpoint or --policy".into()))?;
            let ckpt = load_checkpoint(path, Some(&vocab.hash()))?;
            let mut policy = ModelPolicy::from_checkpoint(&ckpt, &vocab)?;
            run_eval(config, &mut policy)?
        }
    };
    Ok(())
}

pub fn viz_attn(config: &RunConfig) -> Result<(), CliError> {
    config.eval.validate()?;
    let tasks = config.tasks()?;
    let need = |p: &Option<std::path::PathBuf>, flag: &str| {
        p.clone().ok_or_else(|| CliError::Config(format!("viz-attn needs {flag} <checkpoint>")))
    };
    let (before_path, after_path) = (need(&config.viz.before, "--before")?, need(&config.viz.after, "--after")?);
    config.persist()?;
    let vocab = Vocabulary::standard();
    let before = load_checkpoint(&before_path, Some(&vocab.hash()))?;
    let after = load_checkpoint(&after_path, Some(&vocab.hash()))?;
    let (report, b, a) = compare_alignment(&before, &after, &vocab, &tasks, &config.eval)?;
    write_json(&reports_dir(config)?.join("alignment.json"), &report)?;

    let grid_w = before.config.image_size / before.config.patch_size;
    let specs: Vec<_> = config.eval.modes.iter().flat_map(|&m| config.eval.specs(&tasks, m)).collect();
    let heatmaps = config.out.join("heatmaps");
    let per_task = config.viz.heatmaps_per_task.min(config.eval.episodes_per_task);
    for (i, spec) in specs.iter().enumerate() {
        if i % config.eval.episodes_per_task >= per_task {
            continue;
        }
        let image = render(&spec.initial_scene()?, &spec.variant);
        let mode = spec.variant.mode.name();
        for (label, ep, ckpt) in [("before", &b[i], &before_path), ("after", &a[i], &after_path)] {
            let meta = json!({
                "task": ep.task,
                "episode": ep.episode,
                "seed": ep.seed,
                "mode": mode,
                "scene_hash": ep.scene_hash,
                "checkpoint": ckpt,
                "alignment": ep.alignment.score,
            });
            let stem = heatmaps.join(format!("{mode}_{}_{}_{label}", ep.task, ep.episode));
            emit_heatmap(&image, &ep.attention, grid_w, meta, &stem)?;
        }
    }
    println!(
        "alignment before {:.4} after {:.4} delta {:+.4} over {} paired episodes",
        report.mean_before,
        report.mean_after,
        report.mean_delta,
        report.episodes.len()
    );
    Ok(())
}
