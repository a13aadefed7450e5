//! Acceptance run: one PASS/FAIL line per criterion. Numeric arguments select
//! a subset (`cargo test --test acceptance -- 1 4`).

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::process::Command;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_xoshiro::Xoshiro256PlusPlus;
use statrs::distribution::{ChiSquared, ContinuousCDF};
use tempfile::TempDir;
use vla_core::autodiff::{primitive_suite, Tensor};
use vla_core::dataset::{augment, generate_demos, sample_indices, AnnotatedDataset, AnnotatedStep, Vocabulary};
use vla_core::eval::{
    alignment_score, compare_alignment, emit_heatmap, eval_suite, read_heatmap_sidecar, relevant_cells,
    EvalConfig, ExpertPolicy, ModelPolicy, RandomPolicy, SuccessTable,
};
use vla_core::model::{Checkpoint, ModelConfig, ParamGroup, ParamStore};
use vla_core::sim::{reset, Cell, Task, VariantMode, VariantSpec};
use vla_core::teacher::{
    oracle_annotate, parse_and_validate, parse_rationale_ids, rationale_to_text, serialize_rationale, OracleTeacher,
    TeacherError,
};
use vla_core::train::{
    evaluate_losses, joint_loss_gradient_check, sweep, train_loop, Batch, Reduction, SweepAxis, TrainConfig,
};

type Verdict = Result<String, String>;

fn check(ok: bool, detail: String) -> Verdict {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

// ── fixtures ─────────────────────────────────────────────────────────────

fn annotated(episodes_per_task: usize, seed: u64) -> AnnotatedDataset {
    let vocab = Vocabulary::standard();
    let demos = generate_demos(&Task::canonical(), VariantMode::VisualMatching, episodes_per_task, seed, &vocab).unwrap();
    augment(&demos, &OracleTeacher, &vocab).unwrap()
}

fn small_model(vocab: &Vocabulary, layers: usize) -> ModelConfig {
    ModelConfig { layers, heads: 2, dim: 16, mlp_ratio: 2, frozen_blocks: 0, ..ModelConfig::for_vocab(vocab) }
}

fn small_train() -> TrainConfig {
    TrainConfig {
        batch_size: 4,
        max_steps: 20,
        eval_interval: 10,
        log_interval: 1,
        lr: 1e-3,
        frozen_blocks: 0,
        val_max_steps: 8,
        val_episodes_per_task: Some(1),
        ..TrainConfig::default()
    }
}

// ── criteria ─────────────────────────────────────────────────────────────

fn gradient_oracle() -> Verdict {
    let start = Instant::now();
    let vocab = Vocabulary::standard();
    let data = annotated(1, 11);
    let steps: Vec<&AnnotatedStep> = data.steps.iter().step_by(7).take(3).collect();
    let (mut worst_prim, mut worst_e2e) = (0.0_f64, 0.0_f64);
    for seed in 0..20 {
        for (name, err) in primitive_suite(seed, 1e-4) {
            if !(err <= 1e-6) {
                return Err(format!("primitive {name} seed {seed}: relative error {err:.3e}"));
            }
            worst_prim = worst_prim.max(err);
        }
        let e = joint_loss_gradient_check(&steps, &vocab, seed, 1e-4, 3).map_err(|e| e.to_string())?;
        worst_e2e = worst_e2e.max(e);
    }
    let secs = start.elapsed().as_secs_f64();
    check(
        worst_e2e <= 1e-4 && secs < 120.0,
        format!("worst primitive {worst_prim:.2e} (≤1e-6), worst end-to-end {worst_e2e:.2e} (≤1e-4), {secs:.1}s (<120s)"),
    )
}

fn loss_identities() -> Verdict {
    let vocab = Vocabulary::standard();
    let data = annotated(3, 21);
    let (train, val) = data.split_by_episode(0.34);
    let model = small_model(&vocab, 2);
    let init = ParamStore::init(&model, 1).unwrap();
    let joint = TrainConfig { lambda_r: 0.3, ..small_train() };
    let out = train_loop(&init, &model, &train, &val, &vocab, &joint, None).map_err(|e| e.to_string())?;
    let mut worst = 0.0_f64;
    for r in &out.metrics {
        let lr = r.l_reasoning.ok_or("logged row without L_reasoning")?;
        worst = worst.max((r.l_total - (r.l_action + 0.3 * lr)).abs());
    }

    let zeros = ParamStore::zeros(&model).unwrap();
    let steps: Vec<&AnnotatedStep> = train.steps.iter().take(5).collect();
    let batch = Batch::from_steps(&steps, &model).unwrap();
    let l = evaluate_losses(&zeros, &model, &batch, 0.3, Reduction::Mean).unwrap();
    let ln_v = (vocab.len() as f64).ln();
    let uniform = (l.l_action - ln_v).abs().max((l.l_reasoning - ln_v).abs());

    let zero = TrainConfig { lambda_r: 0.0, ..small_train() };
    let base = TrainConfig { action_only: true, ..small_train() };
    let a = train_loop(&init, &model, &train, &val, &vocab, &zero, None).map_err(|e| e.to_string())?;
    let b = train_loop(&init, &model, &train, &val, &vocab, &base, None).map_err(|e| e.to_string())?;
    let bits = |p: &ParamStore| p.flat().iter().map(|x| x.to_bits()).collect::<Vec<_>>();
    let identical = bits(&a.final_params) == bits(&b.final_params) && a.metrics == b.metrics;
    check(
        worst <= 1e-9 && uniform <= 1e-9 && identical,
        format!(
            "decomposition gap {worst:.1e} over {} rows, uniform NLL gap {uniform:.1e}, λ=0 vs action-only bit-identical: {identical}",
            out.metrics.len()
        ),
    )
}

fn freeze_invariants() -> Verdict {
    let vocab = Vocabulary::standard();
    let data = annotated(2, 31);
    let (train, val) = data.split_by_episode(0.5);
    let layers = 4;
    let model = small_model(&vocab, layers);
    let init = ParamStore::init(&model, 2).unwrap();
    let mut notes = Vec::new();
    for k in 0..=layers {
        let config = TrainConfig { frozen_blocks: k, max_steps: 100, eval_interval: 100, ..small_train() };
        let out = train_loop(&init, &model, &train, &val, &vocab, &config, None).map_err(|e| format!("K={k}: {e}"))?;
        let mut changed = 0;
        for (after, before) in out.final_params.entries().iter().zip(init.entries()) {
            let should_freeze = matches!(after.group, ParamGroup::Block(i) if i < k);
            if should_freeze == after.trainable {
                return Err(format!("K={k}: {} has trainable={}", after.name, after.trainable));
            }
            let same = after.tensor.data().iter().zip(before.tensor.data()).all(|(x, y)| x.to_bits() == y.to_bits());
            if !after.trainable && !same {
                return Err(format!("K={k}: frozen {} moved", after.name));
            }
            if after.trainable && !same {
                changed += 1;
            }
        }
        if k < layers && changed == 0 {
            return Err(format!("K={k}: no trainable tensor changed"));
        }
        notes.push(format!("K={k}:{changed} moved"));
    }
    let bad = TrainConfig { frozen_blocks: layers + 1, ..small_train() };
    let rejected = train_loop(&init, &model, &train, &val, &vocab, &bad, None).is_err();
    check(rejected, format!("{} after 100 steps; K={} rejected: {rejected}", notes.join(", "), layers + 1))
}

fn malformed_corpus() -> Vec<(&'static str, fn(&TeacherError) -> bool)> {
    vec![
        ("", |e| matches!(e, TeacherError::Format(_))),
        (
            "Observation: spoon at (2, 3)\nSituation Analysis: put spoon on towel\nSpatial Reasoning:\n",
            |e| matches!(e, TeacherError::Format(_)),
        ),
        (
            "Observation: spoon at (2, 3)\nObservation: towel at (5, 5)\nSituation Analysis: put spoon on towel\nSpatial Reasoning:\nTask Planning: grasp spoon\n",
            |e| matches!(e, TeacherError::Format(_)),
        ),
        (
            "Observation: spoon near (2, 3)\nSituation Analysis: put spoon on towel\nSpatial Reasoning:\nTask Planning: grasp spoon\n",
            |e| matches!(e, TeacherError::Format(_)),
        ),
        (
            "Observation: banana at (2, 3)\nSituation Analysis: put spoon on towel\nSpatial Reasoning:\nTask Planning: grasp spoon\n",
            |e| matches!(e, TeacherError::Hallucination(_)),
        ),
        (
            "Observation: carrot at (2, 3)\nSituation Analysis: put spoon on towel\nSpatial Reasoning:\nTask Planning: grasp spoon\n",
            |e| matches!(e, TeacherError::Hallucination(_)),
        ),
        (
            "Observation: spoon at (4, 4)\nSituation Analysis: put spoon on towel\nSpatial Reasoning:\nTask Planning: grasp spoon\n",
            |e| matches!(e, TeacherError::Consistency(_)),
        ),
        (
            "Observation: spoon at (2, 3)\nSituation Analysis: put spoon on towel\nSpatial Reasoning: spoon right_of towel\nTask Planning: grasp spoon\n",
            |e| matches!(e, TeacherError::Consistency(_)),
        ),
        (
            "Observation: spoon at (2, 3)\nSituation Analysis: please put spoon on towel\nSpatial Reasoning:\nTask Planning: grasp spoon\n",
            |e| matches!(e, TeacherError::Vocab(_)),
        ),
        (
            "Observation: spoon at (2, 3)\nSituation Analysis: put spoon on towel\nSpatial Reasoning: spoon beside towel\nTask Planning: grasp spoon\n",
            |e| matches!(e, TeacherError::Format(_)),
        ),
    ]
}

fn teacher_soundness() -> Verdict {
    let vocab = Vocabulary::standard();
    let mut n = 0;
    for seed in 0..125u64 {
        for task in Task::canonical() {
            let variant = VariantSpec::sample(VariantMode::VariantAggregation, seed);
            let scene = reset(&task, &variant, seed).map_err(|e| e.to_string())?;
            let r = oracle_annotate(&scene, &task).map_err(|e| format!("seed {seed}: {e}"))?;
            let ids = serialize_rationale(&r, &vocab).map_err(|e| e.to_string())?;
            let back = parse_rationale_ids(&ids, &vocab).map_err(|e| e.to_string())?;
            let text = parse_and_validate(&rationale_to_text(&r), &scene, &vocab).map_err(|e| e.to_string())?;
            if back != r || text != r {
                return Err(format!("seed {seed} task {}: round trip changed the rationale", task.name()));
            }
            n += 1;
        }
    }
    let mut scene = vla_core::sim::Scene::empty(8, 8, Cell::new(0, 7));
    for (id, (kind, cell)) in [
        (vla_core::sim::ObjectKind::Spoon, Cell::new(2, 3)),
        (vla_core::sim::ObjectKind::Towel, Cell::new(5, 5)),
    ]
    .into_iter()
    .enumerate()
    {
        scene.objects.push(vla_core::sim::SceneObject { id, kind, cell });
    }
    let corpus = malformed_corpus();
    let mut rejected = 0;
    for (i, (raw, expected)) in corpus.iter().enumerate() {
        match parse_and_validate(raw, &scene, &vocab) {
            Err(e) if expected(&e) => rejected += 1,
            Err(e) => return Err(format!("malformed response {i}: wrong error {e:?}")),
            Ok(_) => return Err(format!("malformed response {i} was accepted")),
        }
    }
    check(
        n >= 500 && rejected == corpus.len(),
        format!("{n}/{n} oracle rationales valid and round-trip; {rejected}/{} malformed responses rejected with the expected error", corpus.len()),
    )
}

fn dataset_integrity() -> Verdict {
    let vocab = Vocabulary::standard();
    let demos = generate_demos(&Task::canonical(), VariantMode::VisualMatching, 45, 41, &vocab).unwrap();
    let full = augment(&demos, &OracleTeacher, &vocab).map_err(|e| e.to_string())?;
    if full.len() < 2000 {
        return Err(format!("only {} steps generated", full.len()));
    }
    let dir = TempDir::new().unwrap();
    full.save(dir.path(), "d").map_err(|e| e.to_string())?;
    let loaded = AnnotatedDataset::load(dir.path(), "d", &vocab).map_err(|e| e.to_string())?;
    let round_trip = loaded == full;
    let stripped = full.strip() == demos;

    let mut rng = Xoshiro256PlusPlus::seed_from_u64(7);
    let n = full.len();
    let mut counts = vec![0u64; n];
    for _ in 0..10_000 {
        for i in sample_indices(n, 16, &mut rng).map_err(|e| e.to_string())? {
            counts[i] += 1;
        }
    }
    let expected = 160_000.0 / n as f64;
    let chi2: f64 = counts.iter().map(|&c| (c as f64 - expected).powi(2) / expected).sum();
    let p = 1.0 - ChiSquared::new((n - 1) as f64).unwrap().cdf(chi2);
    check(
        round_trip && stripped && p > 0.01,
        format!("{n} steps; save/load equal: {round_trip}; strip(D′) = D: {stripped}; χ² = {chi2:.1} on {} dof, p = {p:.3}", n - 1),
    )
}

fn desk_scale_training() -> Verdict {
    let start = Instant::now();
    let vocab = Vocabulary::standard();
    let tasks = Task::canonical();
    let data = annotated(125, 0);
    let (train, val) = data.split_by_episode(0.1);
    let model = ModelConfig::for_vocab(&vocab);
    let init = ParamStore::init(&model, 0).unwrap();
    let config = TrainConfig::default();
    let out = train_loop(&init, &model, &train, &val, &vocab, &config, None).map_err(|e| e.to_string())?;
    let train_secs = start.elapsed().as_secs_f64();
    let params = if out.best_step > 0 { &out.best_params } else { &out.final_params };
    let mut policy = ModelPolicy::new(params, &model, &vocab);
    let (tables, _) = eval_suite(&mut policy, &tasks, &EvalConfig::default()).map_err(|e| e.to_string())?;
    let secs = start.elapsed().as_secs_f64();
    let (a0, a1) = (out.probe_initial.l_action, out.probe_final.l_action);
    let (r0, r1) = (out.probe_initial.l_reasoning, out.probe_final.l_reasoning);
    let drop_a = 1.0 - a1 / a0;
    let drop_r = 1.0 - r1 / r0;
    let success = tables[0].average_success;
    check(
        drop_a >= 0.5 && drop_r >= 0.5 && success >= 0.8 && secs < 1800.0,
        format!(
            "L_action {a0:.3}→{a1:.3} (−{:.0}%), L_reasoning {r0:.3}→{r1:.3} (−{:.0}%), {} steps{}, \
             held-out success {:.1}% / grasp {:.1}% (target ≥80%), {train_secs:.0}s training, {secs:.0}s total (<1800s)",
            100.0 * drop_a,
            100.0 * drop_r,
            out.steps_run,
            if out.stopped_early { " (plateau stop)" } else { "" },
            100.0 * success,
            100.0 * tables[0].average_grasp,
        ),
    )
}

fn tables_consistent(tables: &[SuccessTable]) -> bool {
    tables
        .iter()
        .all(|t| t.average_success <= t.average_grasp && t.rows.iter().all(|r| r.success_rate <= r.grasp_rate))
}

fn eval_harness() -> Verdict {
    let vocab = Vocabulary::standard();
    let tasks = Task::canonical();
    let both = EvalConfig { modes: vec![VariantMode::VisualMatching, VariantMode::VariantAggregation], ..EvalConfig::default() };
    let (expert, _) = eval_suite(&mut ExpertPolicy, &tasks, &both).map_err(|e| e.to_string())?;
    let (random, _) = eval_suite(&mut RandomPolicy::new(0), &tasks, &both).map_err(|e| e.to_string())?;
    let expert_ok = expert.iter().all(|t| t.average_success == 1.0);
    let random_max = random.iter().map(|t| t.average_success).fold(0.0, f64::max);

    let model = small_model(&vocab, 2);
    let ckpt = |seed| Checkpoint {
        config: model.clone(),
        vocab_hash: vocab.hash(),
        metadata: serde_json::Value::Null,
        params: ParamStore::init(&model, seed).unwrap(),
    };
    let (before, after) = (ckpt(1), ckpt(2));
    let mut policy = ModelPolicy::new(&before.params, &model, &vocab);
    let (learned, _) = eval_suite(&mut policy, &tasks, &EvalConfig { episodes_per_task: 10, ..EvalConfig::default() })
        .map_err(|e| e.to_string())?;
    let consistent = tables_consistent(&expert) && tables_consistent(&random) && tables_consistent(&learned);

    let config = EvalConfig::default();
    let (report, _, _) = compare_alignment(&before, &after, &vocab, &tasks, &config).map_err(|e| e.to_string())?;
    let specs = config.specs(&tasks, VariantMode::VisualMatching);
    let matched = report
        .episodes
        .iter()
        .zip(&specs)
        .filter(|(e, s)| s.initial_scene().map(|sc| sc.hash_hex() == e.scene_hash).unwrap_or(false))
        .count();
    check(
        expert_ok && random_max < 0.1 && consistent && matched == specs.len() && report.episodes.len() == specs.len(),
        format!(
            "expert {:.0}% in both modes, random ≤{:.1}%, success ≤ grasp in every table: {consistent}, scene hashes matched {matched}/{}",
            100.0 * expert.iter().map(|t| t.average_success).fold(1.0, f64::min),
            100.0 * random_max,
            specs.len()
        ),
    )
}

fn attention_metric() -> Verdict {
    let mut rng = Xoshiro256PlusPlus::seed_from_u64(8);
    let mut worst = 0.0_f64;
    for _ in 0..100 {
        let (layers, heads, queries) = (rng.gen_range(1..5), rng.gen_range(1..5), rng.gen_range(1..4));
        let maps: Vec<Vec<Tensor>> = (0..layers)
            .map(|_| {
                (0..heads)
                    .map(|_| {
                        let mut data = Vec::with_capacity(queries * 64);
                        for _ in 0..queries {
                            let row: Vec<f64> = (0..64).map(|_| rng.gen::<f64>().powi(3)).collect();
                            let s: f64 = row.iter().sum();
                            data.extend(row.iter().map(|x| x / s));
                        }
                        Tensor::new(vec![queries, 64], data).unwrap()
                    })
                    .collect()
            })
            .collect();
        let cells: Vec<Cell> = (0..rng.gen_range(1..6)).map(|_| Cell::new(rng.gen_range(0..8), rng.gen_range(0..8))).collect();
        let got = alignment_score(&maps, &cells, 8).map_err(|e| e.to_string())?.score;
        let mut set: Vec<usize> = cells.iter().map(|c| c.y * 8 + c.x).collect();
        set.sort_unstable();
        set.dedup();
        let (mut total, mut count) = (0.0, 0.0);
        for layer in &maps {
            for m in layer {
                for q in 0..m.rows() {
                    let mut mass = 0.0;
                    for p in 0..64 {
                        if set.contains(&p) {
                            mass += m.at(q, p);
                        }
                    }
                    total += mass;
                    count += 1.0;
                }
            }
        }
        worst = worst.max((got - total / count).abs());
    }

    let task = Task::canonical().remove(1);
    let scene = reset(&task, &VariantSpec::visual_matching(3), 3).map_err(|e| e.to_string())?;
    let relevant = relevant_cells(&scene, &task).map_err(|e| e.to_string())?;
    let uniform: Vec<Vec<Tensor>> = (0..4).map(|_| (0..4).map(|_| Tensor::new(vec![1, 64], vec![1.0 / 64.0; 64]).unwrap()).collect()).collect();
    let u = alignment_score(&uniform, &relevant, 8).map_err(|e| e.to_string())?.score;
    let uniform_exact = u == relevant.len() as f64 / 64.0;

    let dir = TempDir::new().unwrap();
    let image = vla_core::sim::render(&scene, &VariantSpec::visual_matching(3));
    let attention: Vec<f64> = (0..64).map(|_| rng.gen::<f64>() / 7.0).collect();
    let meta = serde_json::json!({"task": task.name(), "seed": 3});
    let (_, json) = emit_heatmap(&image, &attention, 8, meta.clone(), &dir.path().join("h")).map_err(|e| e.to_string())?;
    let side = read_heatmap_sidecar(&json).map_err(|e| e.to_string())?;
    let exact = side.attention == attention && side.metadata == meta && side.grid_w == 8 && side.grid_h == 8;
    check(
        worst <= 1e-9 && uniform_exact && exact,
        format!(
            "max |score − brute force| {worst:.1e} over 100 tensors; uniform gives {u} = {}/64: {uniform_exact}; sidecar exact: {exact}",
            relevant.len()
        ),
    )
}

fn well_formed_curves(stem: &Path, n: usize) -> Result<(), String> {
    let svg = std::fs::read_to_string(stem.with_extension("svg")).map_err(|e| e.to_string())?;
    if !(svg.trim_start().starts_with("<svg") && svg.trim_end().ends_with("</svg>")) {
        return Err(format!("{} is not an svg document", stem.display()));
    }
    if svg.matches("class=\"marker\"").count() != n || !svg.contains("<polyline") {
        return Err(format!("{} lacks {n} markers or the curve", stem.display()));
    }
    let points: Vec<serde_json::Value> =
        serde_json::from_str(&std::fs::read_to_string(stem.with_extension("json")).map_err(|e| e.to_string())?)
            .map_err(|e| e.to_string())?;
    if points.len() != n || points.iter().any(|p| !p["value"].is_number() || !p["val_success"].is_number()) {
        return Err(format!("{} does not hold {n} complete points", stem.display()));
    }
    Ok(())
}

fn ablation_harness() -> Verdict {
    let vocab = Vocabulary::standard();
    let data = annotated(3, 51);
    let (train, val) = data.split_by_episode(0.34);
    let model = small_model(&vocab, 4);
    let init = ParamStore::init(&model, 3).unwrap();
    let base = TrainConfig { max_steps: 30, eval_interval: 15, log_interval: 5, val_episodes_per_task: Some(2), val_max_steps: 16, ..small_train() };
    let axes = [
        (SweepAxis::LambdaR, vec![0.0, 0.1, 0.3, 1.0, 3.0]),
        (SweepAxis::FrozenBlocks, vec![0.0, 1.0, 2.0, 3.0, 4.0]),
    ];
    let mut lines = Vec::new();
    for (axis, values) in axes {
        let (d1, d2) = (TempDir::new().unwrap(), TempDir::new().unwrap());
        let r1 = sweep(axis, &values, &base, &init, &model, &train, &val, &vocab, Some(d1.path()), 2).map_err(|e| e.to_string())?;
        let r2 = sweep(axis, &values, &base, &init, &model, &train, &val, &vocab, Some(d2.path()), 1).map_err(|e| e.to_string())?;
        if let Some(r) = r1.runs.iter().find(|r| r.error.is_some()) {
            return Err(format!("{} = {} failed: {:?}", axis.name(), r.value, r.error));
        }
        let stem = |d: &Path| d.join("reports").join(format!("sweep_{}", axis.name()));
        well_formed_curves(&stem(d1.path()), values.len())?;
        let same_files = ["svg", "json"].iter().all(|ext| {
            std::fs::read(stem(d1.path()).with_extension(ext)).ok() == std::fs::read(stem(d2.path()).with_extension(ext)).ok()
        });
        if r1 != r2 || !same_files {
            return Err(format!("{} sweep differs between identical runs", axis.name()));
        }
        let shape: Vec<String> = r1.runs.iter().map(|r| format!("{}→{:.2}", r.value, r.val_success.unwrap_or(f64::NAN))).collect();
        lines.push(format!("{}: {}", axis.name(), shape.join(" ")));
    }
    Ok(format!("both sweeps complete, well-formed and deterministic; reported shapes: {}", lines.join("; ")))
}

/// Path of the `vla` binary in this test's target directory, built first if needed.
fn vla_binary() -> Result<std::path::PathBuf, String> {
    let exe = std::env::current_exe().map_err(|e| e.to_string())?;
    let profile_dir = exe.parent().and_then(Path::parent).ok_or("test binary has no target directory")?;
    let release = profile_dir.file_name().is_some_and(|n| n == "release");
    let cargo = std::env::var("CARGO").unwrap_or_else(|_| "cargo".into());
    let mut build = Command::new(cargo);
    build.args(["build", "--quiet", "-p", "vla-cli", "--bin", "vla"]);
    if release {
        build.arg("--release");
    }
    if let Some(target) = profile_dir.parent() {
        build.env("CARGO_TARGET_DIR", target);
    }
    let status = build.status().map_err(|e| format!("cannot run cargo: {e}"))?;
    if !status.success() {
        return Err("building the vla binary failed".into());
    }
    let bin = profile_dir.join(format!("vla{}", std::env::consts::EXE_SUFFIX));
    if bin.is_file() {
        Ok(bin)
    } else {
        Err(format!("{} not found", bin.display()))
    }
}

fn cli_determinism() -> Verdict {
    let vla = vla_binary()?;
    let dir = TempDir::new().unwrap();
    let d = dir.path();
    std::fs::write(
        d.join("tiny.json"),
        r#"{"model": {"layers": 2, "heads": 2, "dim": 16, "mlp_ratio": 2},
            "train": {"max_steps": 8, "batch_size": 4, "eval_interval": 4, "log_interval": 2,
                      "val_episodes_per_task": 1, "val_max_steps": 8, "frozen_blocks": 1},
            "data": {"val_fraction": 0.5},
            "eval": {"episodes_per_task": 3, "max_steps": 16}}"#,
    )
    .unwrap();
    let run = |args: &[&str]| -> Result<(), String> {
        let o = Command::new(&vla)
            .args(args)
            .current_dir(d)
            .env("RUST_LOG", "warn")
            .output()
            .map_err(|e| e.to_string())?;
        if o.status.success() {
            Ok(())
        } else {
            Err(format!("{args:?}: {}", String::from_utf8_lossy(&o.stderr)))
        }
    };
    let commands: [(&str, &[&str], &[&str]); 6] = [
        ("gen", &["gen-data", "--episodes", "2", "--seed", "9"], &["demos.manifest.json", "demos.records.jsonl"]),
        ("data", &["annotate", "--in", "gen"], &["annotated.manifest.json", "annotated.records.jsonl"]),
        ("train", &["train", "--config", "tiny.json", "--data", "data"], &["metrics.csv"]),
        ("sweep", &["sweep-lambda", "--config", "tiny.json", "--data", "data", "--values", "0,0.3"], &["metrics.csv", "runs/lambda_r_0/metrics.csv", "runs/lambda_r_0.3/metrics.csv"]),
        ("freeze", &["sweep-freeze", "--config", "tiny.json", "--data", "data", "--values", "0,2"], &["metrics.csv", "runs/frozen_blocks_2/metrics.csv"]),
        ("eval", &["eval", "--config", "tiny.json", "--policy", "random", "--seed", "4"], &["reports/success_visual_matching.csv", "reports/episodes.jsonl"]),
    ];
    let mut compared = 0;
    for (out, args, files) in commands {
        let mut first: Vec<&str> = args.to_vec();
        first.extend(["--out", out]);
        run(&first)?;
        let again = format!("{out}_again");
        let persisted = format!("{out}/config.json");
        run(&[args[0], "--config", &persisted, "--out", &again])?;
        for f in files {
            let (a, b) = (std::fs::read(d.join(out).join(f)), std::fs::read(d.join(&again).join(f)));
            match (a, b) {
                (Ok(a), Ok(b)) if a == b => compared += 1,
                (Ok(_), Ok(_)) => return Err(format!("{out}/{f} differs after re-running from the persisted config")),
                (a, b) => return Err(format!("{out}/{f}: {:?} / {:?}", a.err(), b.err())),
            }
        }
    }
    Ok(format!("6 commands re-run from their persisted config; {compared} output tables byte-identical"))
}

// ── driver ───────────────────────────────────────────────────────────────

fn main() {
    let criteria: [(&str, fn() -> Verdict); 10] = [
        ("gradient oracle", gradient_oracle),
        ("loss identities", loss_identities),
        ("freeze invariants", freeze_invariants),
        ("oracle teacher soundness", teacher_soundness),
        ("dataset integrity", dataset_integrity),
        ("desk-scale training target", desk_scale_training),
        ("evaluation harness", eval_harness),
        ("attention metric", attention_metric),
        ("ablation harness", ablation_harness),
        ("determinism", cli_determinism),
    ];
    let selected: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let mut failed = 0;
    for (i, (name, f)) in criteria.iter().enumerate() {
        let n = i + 1;
        if !selected.is_empty() && !selected.contains(&n) {
            continue;
        }
        let start = Instant::now();
        let verdict = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        let secs = start.elapsed().as_secs_f64();
        match verdict {
            Ok(detail) => println!("PASS {n:>2} {name} [{secs:.1}s]: {detail}"),
            Err(detail) => {
                failed += 1;
                println!("FAIL {n:>2} {name} [{secs:.1}s]: {detail}");
            }
        }
    }
    if failed > 0 {
        println!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
}
