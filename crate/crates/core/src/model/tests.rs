use super::*;
use crate::corpus::Condition;
use crate::tensor::{check_gradient, DEFAULT_FD_STEP};
use rand::Rng;

fn tiny_spec() -> ModelSpec {
    ModelSpec::new(16, 8, 2, 2, 16, vocab::COND_SIZE).unwrap()
}

fn seq(tokens: Vec<u32>, cond: usize) -> TokenSequence {
    TokenSequence { tokens, condition: Condition::from_index(cond) }
}

fn random_batch(rng: &mut ChaCha8Rng, vsz: u32, n: usize, len: usize) -> Vec<TokenSequence> {
    (0..n)
        .map(|b| seq((0..len).map(|_| rng.gen_range(0..vsz)).collect(), b * 7 % Condition::COUNT))
        .collect()
}

fn flat_params(w: &ModelWeights) -> Vec<f64> {
    w.tensors().iter().flat_map(|t| t.data.iter().copied()).collect()
}

fn with_params(w: &ModelWeights, flat: &[f64]) -> ModelWeights {
    let mut out = w.clone();
    let mut off = 0;
    for t in out.tensors_mut() {
        let n = t.data.len();
        t.data.copy_from_slice(&flat[off..off + n]);
        off += n;
    }
    out
}

#[test]
fn student_forward_shape() {
    let spec = ModelSpec::student_default();
    let w = ModelWeights::init(&spec, 1).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let batch = random_batch(&mut rng, 72, 2, 16);
    let out = forward(&w, &batch, &[false, false]).unwrap();
    assert_eq!(out.len(), 2);
    for m in &out {
        assert_eq!((m.rows, m.cols), (16, 72));
        assert!(m.data.iter().all(|v| v.is_finite()));
    }
}

#[test]
fn prefix_logits_ignore_future_tokens() {
    let spec = ModelSpec::student_default();
    let w = ModelWeights::init(&spec, 2).unwrap();
    let a = seq((0..16).map(|i| (i * 5 % 72) as u32).collect(), 11);
    let mut b = a.clone();
    for t in b.tokens[10..].iter_mut() {
        *t = (*t + 13) % 72;
    }
    let out = forward(&w, &[a, b], &[false, false]).unwrap();
    for i in 0..10 {
        for (x, y) in out[0].row(i).iter().zip(out[1].row(i)) {
            assert!((x - y).abs() <= 1e-12);
        }
    }
    let later_differs = out[0].row(12).iter().zip(out[1].row(12)).any(|(x, y)| (x - y).abs() > 1e-9);
    assert!(later_differs);
}

#[test]
fn dropped_condition_changes_logits() {
    let w = ModelWeights::init(&ModelSpec::student_default(), 4).unwrap();
    let s = seq(vec![48, 50, 3, 51, 7], 5);
    let out = forward(&w, &[s.clone(), s], &[false, true]).unwrap();
    assert!(out[0].data.iter().zip(&out[1].data).any(|(a, b)| (a - b).abs() > 1e-9));
}

#[test]
fn init_is_deterministic_and_seed_sensitive() {
    let spec = ModelSpec::student_default();
    let a = ModelWeights::init(&spec, 9).unwrap();
    let b = ModelWeights::init(&spec, 9).unwrap();
    let c = ModelWeights::init(&spec, 10).unwrap();
    assert_eq!(a.to_bytes(), b.to_bytes());
    assert_ne!(a.to_bytes(), c.to_bytes());
    assert!(flat_params(&a).iter().all(|&v| v == v as f32 as f64));
}

#[test]
fn forward_is_deterministic() {
    let w = ModelWeights::init(&ModelSpec::student_default(), 5).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let batch = random_batch(&mut rng, 72, 3, 20);
    let flags = [false, true, false];
    let a = forward(&w, &batch, &flags).unwrap();
    let b = forward(&w, &batch, &flags).unwrap();
    assert_eq!(a, b);
}

#[test]
fn heads_must_divide_width() {
    let err = ModelSpec::new(72, 65, 2, 4, 64, 16).unwrap_err();
    assert!(matches!(err, Error::InvalidArgument(_)));
    assert!(ModelSpec::new(72, 64, 0, 4, 64, 16).is_err());
}

#[test]
fn rejects_bad_inputs() {
    let w = ModelWeights::init(&tiny_spec(), 0).unwrap();
    assert!(forward(&w, &[seq(vec![16], 0)], &[false]).is_err());
    assert!(forward(&w, &[seq(vec![1; 17], 0)], &[false]).is_err());
    assert!(forward(&w, &[seq(vec![1], 0)], &[]).is_err());
}

#[test]
fn tag_validation() {
    let mut tags = ModelSpec::student_default().component_tags;
    tags.remove("cond.mlp");
    assert!(ModelSpec::with_tags(72, 64, 2, 4, 128, 16, tags.clone()).is_err());
    tags.insert("cond.mlp".into(), Component::CondEncoder);
    tags.insert("extra.group".into(), Component::OutputHead);
    assert!(ModelSpec::with_tags(72, 64, 2, 4, 128, 16, tags).is_err());
}

#[test]
fn component_counts_partition_total() {
    for spec in [ModelSpec::student_default(), ModelSpec::teacher_default(), tiny_spec()] {
        let counts = param_count_by_component(&spec);
        let total: usize = counts.values().sum();
        assert_eq!(total, spec.param_count());
        let w = ModelWeights::init(&spec, 0).unwrap();
        assert_eq!(total, w.tensors().iter().map(Tensor::numel).sum::<usize>());
        let (d, v) = (spec.d_model, spec.vocab_size);
        assert_eq!(counts[&Component::OutputHead], d * v + v);
    }
}

#[test]
fn zero_logit_gradient_gives_zero_parameter_gradient() {
    let w = ModelWeights::init(&tiny_spec(), 1).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let batch = random_batch(&mut rng, 16, 2, 6);
    let zeros: Vec<Matrix> = batch.iter().map(|s| Matrix::zeros(s.tokens.len(), 16)).collect();
    let g = backward(&w, &batch, &[false, true], &zeros).unwrap();
    assert!(g.flatten().iter().all(|&v| v == 0.0));
}

#[test]
fn backward_is_linear_in_logit_gradient() {
    let w = ModelWeights::init(&tiny_spec(), 2).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let batch = random_batch(&mut rng, 16, 2, 7);
    let flags = [false, true];
    let rand_grads = |rng: &mut ChaCha8Rng| -> Vec<Matrix> {
        batch
            .iter()
            .map(|s| {
                let n = s.tokens.len() * 16;
                Matrix::from_vec(s.tokens.len(), 16, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
            })
            .collect()
    };
    let ga = rand_grads(&mut rng);
    let gb = rand_grads(&mut rng);
    let combo: Vec<Matrix> = ga
        .iter()
        .zip(&gb)
        .map(|(a, b)| {
            let data = a.data.iter().zip(&b.data).map(|(x, y)| 2.0 * x - 0.5 * y).collect();
            Matrix::from_vec(a.rows, a.cols, data).unwrap()
        })
        .collect();
    let pa = backward(&w, &batch, &flags, &ga).unwrap().flatten();
    let pb = backward(&w, &batch, &flags, &gb).unwrap().flatten();
    let pc = backward(&w, &batch, &flags, &combo).unwrap().flatten();
    for ((a, b), c) in pa.iter().zip(&pb).zip(&pc) {
        assert!((2.0 * a - 0.5 * b - c).abs() <= 1e-10 * (1.0 + c.abs()));
    }
}

fn finite_difference_check(loss_weights: Option<Vec<Matrix>>) {
    let spec = tiny_spec();
    let mut w = ModelWeights::init(&spec, 7).unwrap();
    // Perturb biases and gains away from their init so every path is exercised.
    let mut rng = ChaCha8Rng::seed_from_u64(70);
    for t in w.tensors_mut() {
        if t.shape.len() == 1 {
            t.data.iter_mut().for_each(|v| *v += rng.gen_range(-0.3..0.3));
        }
    }
    let batch = vec![seq(vec![3, 9, 1, 15, 0, 7], 13), seq(vec![2, 2, 11, 5], 40)];
    let flags = [false, true];
    let grads_in: Vec<Matrix> = loss_weights.unwrap_or_else(|| {
        batch
            .iter()
            .map(|s| Matrix::from_vec(s.tokens.len(), 16, vec![1.0; s.tokens.len() * 16]).unwrap())
            .collect()
    });
    let analytic = backward(&w, &batch, &flags, &grads_in).unwrap().flatten();
    let loss = |flat: &[f64]| -> f64 {
        let wp = with_params(&w, flat);
        forward(&wp, &batch, &flags)
            .unwrap()
            .iter()
            .zip(&grads_in)
            .map(|(l, g)| l.data.iter().zip(&g.data).map(|(a, b)| a * b).sum::<f64>())
            .sum()
    };
    let x = flat_params(&w);
    let report = check_gradient(loss, &x, &analytic, DEFAULT_FD_STEP).unwrap();
    assert!(
        report.max_rel_error < 1e-5,
        "max rel error {} at {} (analytic {}, numeric {})",
        report.max_rel_error,
        report.worst_index,
        report.analytic,
        report.numeric
    );
}

#[test]
fn gradient_of_logit_sum_matches_finite_differences() {
    finite_difference_check(None);
}

#[test]
fn gradient_of_weighted_logits_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(71);
    let weights = [6usize, 4]
        .iter()
        .map(|&n| Matrix::from_vec(n, 16, (0..n * 16).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap())
        .collect();
    finite_difference_check(Some(weights));
}

#[test]
fn gradients_do_not_depend_on_thread_count() {
    let w = ModelWeights::init(&tiny_spec(), 3).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let batch = random_batch(&mut rng, 16, 5, 8);
    let flags = [false, true, false, false, true];
    let gr: Vec<Matrix> = batch.iter().map(|s| Matrix::from_vec(s.tokens.len(), 16, vec![0.1; s.tokens.len() * 16]).unwrap()).collect();
    let run = |threads| {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .unwrap()
            .install(|| backward(&w, &batch, &flags, &gr).unwrap())
    };
    assert_eq!(run(1), run(3));
}

#[test]
fn group_names() {
    assert_eq!(group_of("dec.layers.3.attn.wq"), "dec.layers");
    assert_eq!(group_of("head.proj.bias"), "head.proj");
    assert_eq!(group_of("solo"), "solo");
}

proptest::proptest! {
    #![proptest_config(proptest::prelude::ProptestConfig::with_cases(24))]
    #[test]
    fn causality_for_any_depth_and_heads(
        layers in 1usize..4,
        heads_pow in 0u32..3,
        head_dim in 1usize..5,
        seed: u64,
        len in 2usize..12,
        cut_frac in 0.0f64..1.0,
    ) {
        let heads = 1usize << heads_pow;
        let spec = ModelSpec::new(16, heads * head_dim, layers, heads, 16, vocab::COND_SIZE).unwrap();
        let w = ModelWeights::init(&spec, seed).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
        let a = random_batch(&mut rng, 16, 1, len).remove(0);
        let cut = 1 + ((len - 1) as f64 * cut_frac) as usize;
        let mut b = a.clone();
        for t in b.tokens[cut..].iter_mut() {
            *t = (*t + 1 + rng.gen_range(0..15)) % 16;
        }
        let out = forward(&w, &[a, b], &[false, false]).unwrap();
        for i in 0..cut {
            for (x, y) in out[0].row(i).iter().zip(out[1].row(i)) {
                proptest::prop_assert!((x - y).abs() <= 1e-12);
            }
        }
    }
}
