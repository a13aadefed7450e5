use proptest::prelude::*;
use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};

use super::*;
use crate::autodiff::{softmax_in_place, LAYER_NORM_EPS};
use crate::sim::{render, reset, Action, Grip, Task, VariantSpec};

fn vocab() -> Vocabulary {
    Vocabulary::standard()
}

fn small_config() -> ModelConfig {
    ModelConfig {
        layers: 2,
        heads: 2,
        dim: 16,
        max_seq_len: 112,
        ..ModelConfig::for_vocab(&vocab())
    }
}

fn scene_image(seed: u64) -> (Tensor, Vec<TokenId>) {
    let task = Task::canonical().remove(seed as usize % 4);
    let variant = VariantSpec::visual_matching(seed);
    let scene = reset(&task, &variant, seed).unwrap();
    (render(&scene, &variant), vocab().encode_words(&task.instruction).unwrap())
}

fn rationale(len: usize, seed: u64) -> Vec<TokenId> {
    let mut rng = StdRng::seed_from_u64(seed);
    (0..len).map(|_| rng.gen_range(9..58)).collect()
}

#[test]
fn default_config_is_valid() {
    let c = ModelConfig::for_vocab(&vocab());
    c.validate().unwrap();
    assert_eq!((c.layers, c.heads, c.dim, c.frozen_blocks), (4, 4, 64, 2));
    assert!(!c.freeze_embeddings);
    assert!(ModelConfig { heads: 5, ..c.clone() }.validate().is_err());
    assert!(ModelConfig { frozen_blocks: 5, ..c }.validate().is_err());
}

#[test]
fn canonical_order_is_stable() {
    let c = small_config();
    let a = ParamStore::init(&c, 1).unwrap();
    let b = ParamStore::init(&c, 1).unwrap();
    assert_eq!(a, b);
    let names: Vec<&str> = a.entries().iter().map(|e| e.name.as_str()).collect();
    assert_eq!(names[0], "patch_proj.weight");
    assert_eq!(names[4], "blocks.0.ln1.gain");
    assert_eq!(*names.last().unwrap(), "head.bias");
    assert_ne!(a.flat(), ParamStore::init(&c, 2).unwrap().flat());
    assert!(a.get("blocks.1.ln2.gain").unwrap().data().iter().all(|&g| g == 1.0));
    assert!(a.get("blocks.1.ln2.bias").unwrap().data().iter().all(|&g| g == 0.0));
}

#[test]
fn freeze_flags() {
    let c = ModelConfig::for_vocab(&vocab());
    let mut p = ParamStore::init(&c, 0).unwrap();
    p.apply_freeze(4, 0, false).unwrap();
    assert!(p.entries().iter().all(|e| e.trainable));

    p.apply_freeze(4, 4, true).unwrap();
    let trainable: Vec<&str> = p.entries().iter().filter(|e| e.trainable).map(|e| e.name.as_str()).collect();
    assert_eq!(trainable, ["final_norm.gain", "final_norm.bias", "head.weight", "head.bias"]);

    p.apply_freeze(4, 2, false).unwrap();
    for e in p.entries() {
        let expect = !matches!(e.group, ParamGroup::Block(0) | ParamGroup::Block(1));
        assert_eq!(e.trainable, expect, "{}", e.name);
    }
    assert!(matches!(p.apply_freeze(4, 5, false), Err(ModelError::Config(_))));
}

#[test]
fn zero_network_gives_uniform_logits() {
    let c = small_config();
    let p = ParamStore::zeros(&c).unwrap();
    let (img, instr) = scene_image(0);
    let r = rationale(6, 0);
    let out = forward(&p, &c, &[ModelInput { image: &img, instruction: &instr, rationale: Some(&r) }], true, false).unwrap();
    for logits in [out.rationale_logits().unwrap(), out.action_logits().unwrap()] {
        assert!(logits.data().iter().all(|&v| v == 0.0));
    }
    assert_eq!(out.rationale_logits().unwrap().shape(), &[7, c.vocab_size]);
}

#[test]
fn attention_rows_sum_to_one_and_forward_is_deterministic() {
    let c = small_config();
    let p = ParamStore::init(&c, 3).unwrap();
    let (i0, s0) = scene_image(1);
    let (i1, s1) = scene_image(2);
    let (r0, r1) = (rationale(5, 1), rationale(9, 2));
    let inputs = [
        ModelInput { image: &i0, instruction: &s0, rationale: Some(&r0) },
        ModelInput { image: &i1, instruction: &s1, rationale: Some(&r1) },
    ];
    let a = forward(&p, &c, &inputs, true, false).unwrap();
    let b = forward(&p, &c, &inputs, true, false).unwrap();
    for bi in 0..2 {
        for l in 0..c.layers {
            for h in 0..c.heads {
                let m = a.attention_map(bi, l, h);
                for q in 0..m.rows() {
                    assert!((m.row(q).iter().sum::<f64>() - 1.0).abs() <= 1e-6);
                }
                assert_eq!(m, b.attention_map(bi, l, h));
            }
        }
    }
    let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
    assert_eq!(bits(a.action_logits().unwrap()), bits(b.action_logits().unwrap()));
    assert_eq!(bits(a.rationale_logits().unwrap()), bits(b.rationale_logits().unwrap()));
}

#[test]
fn rationale_is_causal_and_hidden_from_the_action() {
    let c = small_config();
    let p = ParamStore::init(&c, 4).unwrap();
    let (img, instr) = scene_image(3);
    let base = rationale(10, 3);
    let run = |r: &[TokenId]| {
        let out = forward(&p, &c, &[ModelInput { image: &img, instruction: &instr, rationale: Some(r) }], true, false).unwrap();
        (out.rationale_logits().unwrap().clone(), out.action_logits().unwrap().clone())
    };
    let (rl, al) = run(&base);
    for t in 0..base.len() {
        let mut changed = base.clone();
        changed[t] = if changed[t] == 20 { 21 } else { 20 };
        let (rl2, al2) = run(&changed);
        // Token t sits on rationale row t+1, so rows 0..=t must not move.
        for row in 0..=t {
            assert_eq!(rl.row(row), rl2.row(row), "row {row} moved after editing token {t}");
        }
        assert_ne!(rl.row(t + 1), rl2.row(t + 1));
        assert_eq!(al, al2);
    }
}

#[test]
fn overlong_sequence_is_a_length_error() {
    let c = small_config();
    let p = ParamStore::init(&c, 0).unwrap();
    let (img, instr) = scene_image(0);
    let r = rationale(60, 0);
    let res = forward(&p, &c, &[ModelInput { image: &img, instruction: &instr, rationale: Some(&r) }], true, false);
    assert!(matches!(res, Err(ModelError::Length { .. })));
}

#[test]
fn predict_action_follows_rigged_head_and_breaks_ties_low() {
    let c = small_config();
    let v = vocab();
    let (img, instr) = scene_image(0);
    let mut p = ParamStore::zeros(&c).unwrap();
    assert_eq!(predict_action(&p, &c, &img, &instr).unwrap(), v.action_block().start);

    let close = v.action_id(Action::new(0, 0, Grip::Close).unwrap());
    p.get_mut("head.bias").unwrap().data_mut()[close as usize] = 5.0;
    // A larger non-action logit must be ignored.
    p.get_mut("head.bias").unwrap().data_mut()[v.special(vocab::EOS) as usize] = 50.0;
    assert_eq!(predict_action(&p, &c, &img, &instr).unwrap(), close);

    let other = v.action_id(Action::new(1, -1, Grip::Open).unwrap());
    p.get_mut("head.bias").unwrap().data_mut()[other as usize] = 5.0;
    assert_eq!(predict_action(&p, &c, &img, &instr).unwrap(), close.min(other));
}

#[test]
fn predicted_action_always_in_block() {
    let c = ModelConfig { layers: 1, heads: 1, dim: 8, frozen_blocks: 0, ..small_config() };
    let block = vocab().action_block();
    let (img, instr) = scene_image(5);
    for seed in 0..1000 {
        let p = ParamStore::init(&c, seed).unwrap();
        let a = predict_action(&p, &c, &img, &instr).unwrap();
        assert!(block.contains(&a));
    }
}

#[test]
fn generation_stops_at_eos_and_respects_budget() {
    let c = small_config();
    let v = vocab();
    let (img, instr) = scene_image(0);
    let mut p = ParamStore::init(&c, 5).unwrap();
    let a = generate_rationale(&p, &c, &img, &instr, 12).unwrap();
    assert_eq!(a, generate_rationale(&p, &c, &img, &instr, 12).unwrap());
    assert!(a.len() <= 12);
    assert!(generate_rationale(&p, &c, &img, &instr, 0).unwrap().is_empty());

    p.get_mut("head.bias").unwrap().data_mut()[v.special(vocab::EOS) as usize] = 100.0;
    assert_eq!(generate_rationale(&p, &c, &img, &instr, 12).unwrap(), vec![v.special(vocab::EOS)]);
}

#[test]
fn extracted_attention_is_renormalized() {
    let c = small_config();
    let p = ParamStore::init(&c, 6).unwrap();
    let (img, instr) = scene_image(4);
    let r = rationale(4, 4);
    let out = forward(&p, &c, &[ModelInput { image: &img, instruction: &instr, rationale: Some(&r) }], true, false).unwrap();
    for span in [QuerySpan::Action, QuerySpan::Rationale] {
        let maps = extract_attention(&out, 0, span).unwrap();
        assert_eq!(maps.len(), c.layers);
        for per_head in &maps {
            for m in per_head {
                assert_eq!(m.cols(), 64);
                for q in 0..m.rows() {
                    assert!((m.row(q).iter().sum::<f64>() - 1.0).abs() <= 1e-9);
                }
            }
        }
    }
    assert_eq!(extract_attention(&out, 0, QuerySpan::Rationale).unwrap()[0][0].rows(), 5);
    let no_rationale = forward(&p, &c, &[ModelInput { image: &img, instruction: &instr, rationale: None }], true, false).unwrap();
    assert!(matches!(extract_attention(&no_rationale, 0, QuerySpan::Rationale), Err(ModelError::Span(_))));
    assert_eq!(renormalize(&[0.25; 64]).unwrap(), vec![1.0 / 64.0; 64]);
}

/// Recomputes layer-0 action attention over patch keys from the raw parameters.
#[test]
fn extraction_matches_restricted_softmax_oracle() {
    let c = small_config();
    let p = ParamStore::init(&c, 7).unwrap();
    let (img, instr) = scene_image(6);
    let out = forward(&p, &c, &[ModelInput { image: &img, instruction: &instr, rationale: None }], true, false).unwrap();
    let got = extract_attention(&out, 0, QuerySpan::Action).unwrap();

    let d = c.dim;
    let pix = patchify(&img, c.patch_size).unwrap();
    let pe = p.get("position_embedding").unwrap();
    let mut x: Vec<Vec<f64>> = Vec::new();
    let (wp, bp) = (p.get("patch_proj.weight").unwrap(), p.get("patch_proj.bias").unwrap());
    for k in 0..64 {
        let f = &pix[k * 48..(k + 1) * 48];
        x.push((0..d).map(|j| bp.data()[j] + (0..48).map(|i| f[i] * wp.at(i, j)).sum::<f64>() + pe.at(k, j)).collect());
    }
    let te = p.get("token_embedding").unwrap();
    let act_pos = 64 + instr.len() + 1;
    let act: Vec<f64> = (0..d).map(|j| te.at(c.specials.act as usize, j) + pe.at(act_pos, j)).collect();
    let ln = |v: &[f64]| {
        let m = v.iter().sum::<f64>() / d as f64;
        let var = v.iter().map(|a| (a - m) * (a - m)).sum::<f64>() / d as f64;
        let g = p.get("blocks.0.ln1.gain").unwrap().data();
        let b = p.get("blocks.0.ln1.bias").unwrap().data();
        (0..d).map(|j| (v[j] - m) / (var + LAYER_NORM_EPS).sqrt() * g[j] + b[j]).collect::<Vec<f64>>()
    };
    let w = p.get("blocks.0.attn.qkv.weight").unwrap();
    let bias = p.get("blocks.0.attn.qkv.bias").unwrap().data();
    let proj = |h: &[f64], col: usize| bias[col] + (0..d).map(|i| h[i] * w.at(i, col)).sum::<f64>();
    let dh = c.head_dim();
    let hq = ln(&act);
    for head in 0..c.heads {
        let q: Vec<f64> = (0..dh).map(|j| proj(&hq, head * dh + j)).collect();
        let mut scores: Vec<f64> = x
            .iter()
            .map(|xk| {
                let hk = ln(xk);
                (0..dh).map(|j| q[j] * proj(&hk, d + head * dh + j)).sum::<f64>() / (dh as f64).sqrt()
            })
            .collect();
        softmax_in_place(&mut scores);
        let diff = scores.iter().zip(got[0][head].row(0)).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(diff <= 1e-9, "head {head}: {diff}");
    }
}

#[test]
fn checkpoint_round_trip_and_rejections() {
    let c = small_config();
    let p = ParamStore::init(&c, 8).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.ckpt");
    let ck = Checkpoint {
        config: c.clone(),
        vocab_hash: vocab().hash(),
        metadata: serde_json::json!({"step": 3}),
        params: p.clone(),
    };
    save_checkpoint(&path, &ck).unwrap();
    let back = load_checkpoint(&path, Some(&vocab().hash())).unwrap();
    assert_eq!(back.config, c);
    assert_eq!(back.metadata["step"], 3);
    for (a, b) in back.params.flat().iter().zip(p.flat()) {
        assert_eq!(*a, b as f32 as f64);
    }
    assert!(matches!(load_checkpoint(&path, Some("other")), Err(ModelError::Checkpoint(_))));

    let mut bytes = std::fs::read(&path).unwrap();
    bytes.truncate(bytes.len() - 4);
    std::fs::write(&path, &bytes).unwrap();
    assert!(matches!(load_checkpoint(&path, None), Err(ModelError::Checkpoint(_))));
    bytes[0] = b'X';
    std::fs::write(&path, &bytes).unwrap();
    assert!(matches!(load_checkpoint(&path, None), Err(ModelError::Checkpoint(_))));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]
    #[test]
    fn renormalized_rows_sum_to_one(row in proptest::collection::vec(1e-6f64..1.0, 64)) {
        let r = renormalize(&row).unwrap();
        prop_assert!((r.iter().sum::<f64>() - 1.0).abs() <= 1e-9);
    }
}
