use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};

use super::{AttentionSpec, Tape, Tensor, Var};

/// Central finite-difference gradient of `f` at `x`, one coordinate at a time.
pub fn central_difference<F>(x: &[f64], h: f64, mut f: F) -> Vec<f64>
where
    F: FnMut(&[f64]) -> f64,
{
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = probe[i];
            probe[i] = orig + h;
            let up = f(&probe);
            probe[i] = orig - h;
            let down = f(&probe);
            probe[i] = orig;
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// `‖a − b‖₂ / max(‖a‖₂, ‖b‖₂)`, zero when both vectors vanish.
pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let scale = norm(a).max(norm(b));
    if scale == 0.0 {
        0.0
    } else {
        diff / scale
    }
}

fn random(rng: &mut StdRng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).expect("shape matches")
}

/// Largest relative error between analytic and central-difference gradients of
/// `⟨w, build(inputs)⟩`, over every input tensor, for fixed random weights `w`.
pub fn gradient_check<F>(inputs: &[Tensor], h: f64, seed: u64, build: F) -> f64
where
    F: Fn(&mut Tape, &[Var]) -> Var,
{
    let eval = |values: &[Tensor]| {
        let mut tape = Tape::new();
        let vars: Vec<Var> = values.iter().map(|t| tape.param(t.clone())).collect();
        let out = build(&mut tape, &vars);
        let mut rng = StdRng::seed_from_u64(seed ^ 0x9e37);
        let w = tape.constant(random(&mut rng, tape.value(out).shape()));
        let prod = tape.mul(out, w).expect("same shape");
        let loss = tape.sum(prod);
        (tape, vars, loss)
    };
    let (mut tape, vars, loss) = eval(inputs);
    tape.backward(loss).expect("scalar loss");
    let mut worst: f64 = 0.0;
    for (i, v) in vars.iter().enumerate() {
        let analytic = tape.grad(*v).expect("param grad").data().to_vec();
        let numeric = central_difference(inputs[i].data(), h, |x| {
            let mut perturbed = inputs.to_vec();
            perturbed[i] = Tensor::new(inputs[i].shape().to_vec(), x.to_vec()).expect("shape matches");
            let (tape, _, loss) = eval(&perturbed);
            tape.value(loss).item()
        });
        worst = worst.max(relative_error(&analytic, &numeric));
    }
    worst
}

/// Gradient check of every tape primitive on inputs drawn from `seed`.
pub fn primitive_suite(seed: u64, h: f64) -> Vec<(&'static str, f64)> {
    let mut rng = StdRng::seed_from_u64(seed);
    let m = random(&mut rng, &[3, 4]);
    let m2 = random(&mut rng, &[3, 4]);
    let k = random(&mut rng, &[4, 2]);
    let row = random(&mut rng, &[4]);
    let gain = random(&mut rng, &[4]);
    let q = random(&mut rng, &[6, 4]);
    let kk = random(&mut rng, &[6, 4]);
    let vv = random(&mut rng, &[6, 4]);
    let check = |inputs: &[Tensor], build: &dyn Fn(&mut Tape, &[Var]) -> Var| gradient_check(inputs, h, seed, build);
    // Two sequences of three rows, two heads, causal mask, last key of sequence 1 hidden.
    let spec = AttentionSpec {
        batch: 2,
        seq: 3,
        heads: 2,
        mask: (0..9).map(|n| n % 3 <= n / 3).collect(),
        key_valid: Some(vec![true, true, true, true, true, false]),
    };
    vec![
        ("matmul", check(&[m.clone(), k], &|t, v| t.matmul(v[0], v[1]).unwrap())),
        ("add", check(&[m.clone(), m2.clone()], &|t, v| t.add(v[0], v[1]).unwrap())),
        ("add_bias", check(&[m.clone(), row.clone()], &|t, v| t.add(v[0], v[1]).unwrap())),
        ("mul", check(&[m.clone(), m2.clone()], &|t, v| t.mul(v[0], v[1]).unwrap())),
        ("mul_bias", check(&[m.clone(), row.clone()], &|t, v| t.mul(v[0], v[1]).unwrap())),
        ("scale", check(std::slice::from_ref(&m), &|t, v| t.scale(v[0], -2.5))),
        ("transpose", check(std::slice::from_ref(&m), &|t, v| t.transpose(v[0]).unwrap())),
        ("reshape", check(std::slice::from_ref(&m), &|t, v| t.reshape(v[0], &[2, 6]).unwrap())),
        ("softmax", check(std::slice::from_ref(&m), &|t, v| t.softmax_rows(v[0]))),
        (
            "layer_norm",
            check(&[m.clone(), gain, row.clone()], &|t, v| t.layer_norm(v[0], v[1], v[2]).unwrap()),
        ),
        ("gelu", check(std::slice::from_ref(&m), &|t, v| t.gelu(v[0]))),
        ("gather", check(std::slice::from_ref(&m), &|t, v| t.gather(v[0], &[2, 0, 2]).unwrap())),
        ("slice_rows", check(std::slice::from_ref(&m), &|t, v| t.slice_rows(v[0], 1, 2).unwrap())),
        ("slice_cols", check(std::slice::from_ref(&m), &|t, v| t.slice_cols(v[0], 1, 2).unwrap())),
        ("concat_rows", check(&[m.clone(), m2.clone()], &|t, v| t.concat_rows(&[v[0], v[1]]).unwrap())),
        ("concat_cols", check(&[m.clone(), m2.clone()], &|t, v| t.concat_cols(&[v[1], v[0]]).unwrap())),
        ("mean", check(std::slice::from_ref(&m), &|t, v| t.mean(v[0]))),
        ("sum", check(std::slice::from_ref(&m), &|t, v| t.sum(v[0]))),
        (
            "nll",
            check(std::slice::from_ref(&m), &|t, v| t.nll_loss(v[0], &[1, 3, 0], &[true, false, true]).unwrap()),
        ),
        (
            "attention",
            check(&[q, kk, vv], &|t, v| t.attention(v[0], v[1], v[2], spec.clone()).unwrap()),
        ),
    ]
}
