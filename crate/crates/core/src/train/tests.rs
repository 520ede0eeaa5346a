use super::*;
use crate::corpus::{generate_corpus, Corpus, Split};
use crate::divergence::{bracket_loss, Bracket};

fn small_spec(d: usize, layers: usize) -> ModelSpec {
    ModelSpec::new(vocab::SIZE, d, layers, 2, 64, vocab::COND_SIZE).unwrap()
}

fn small_corpus() -> CorpusSplits {
    generate_corpus(3, 40, 24, [0.8, 0.1, 0.1]).unwrap()
}

fn small_cfg(seed: u64) -> TrainConfig {
    let mut cfg = TrainConfig::student_default(seed);
    cfg.epochs = 2;
    cfg.batch_size = 8;
    cfg
}

/// One batch used as both training and validation data.
fn single_batch(n: usize, len: usize) -> CorpusSplits {
    let mut items = generate_corpus(11, 2 * n, len, [0.8, 0.1, 0.1]).unwrap().train.items;
    items.truncate(n);
    let corpus = |split| Corpus { items: items.clone(), seed: 11, split };
    CorpusSplits {
        train: corpus(Split::Train),
        validation: corpus(Split::Validation),
        test: corpus(Split::Test),
    }
}

#[test]
fn overfits_a_single_batch() {
    let corpus = single_batch(4, 32);
    let mut cfg = TrainConfig::teacher_default(5);
    cfg.epochs = 200;
    cfg.batch_size = 4;
    cfg.learning_rate = 0.5;
    cfg.cond_dropout = 0.0;
    let (w, curve) = train_teacher(&small_spec(32, 1), &corpus, &cfg).unwrap();
    assert_eq!(curve.train.len(), 200);
    let final_ce = mean_cross_entropy(&w, &corpus.train.items).unwrap();
    assert!(final_ce < 0.1, "final CE {final_ce}, first {}", curve.train[0]);
}

#[test]
fn teacher_training_is_deterministic() {
    let corpus = small_corpus();
    let spec = small_spec(16, 1);
    let cfg = small_cfg(4);
    let (wa, a) = train_teacher(&spec, &corpus, &cfg).unwrap();
    let (wb, b) = train_teacher(&spec, &corpus, &cfg).unwrap();
    assert_eq!(a, b);
    assert_eq!(wa.to_bytes(), wb.to_bytes());
    assert_eq!(a.train.len(), cfg.total_steps(corpus.train.items.len()));
    assert_eq!(a.val.len(), cfg.epochs);
}

#[test]
fn zero_learning_rate_keeps_loss_constant() {
    let corpus = single_batch(6, 20);
    let mut cfg = small_cfg(1);
    cfg.learning_rate = 0.0;
    cfg.cond_dropout = 0.0;
    cfg.epochs = 5;
    let (_, curve) = train_teacher(&small_spec(16, 1), &corpus, &cfg).unwrap();
    for v in &curve.train {
        assert!((v - curve.train[0]).abs() <= 1e-12);
    }
}

#[test]
fn kd_loss_vanishes_when_student_equals_teacher() {
    let corpus = small_corpus();
    let spec = small_spec(16, 1);
    let cfg = small_cfg(9);
    let teacher = ModelWeights::init(&spec, cfg.seed).unwrap();
    for v in LossVariant::ALL {
        let mut c = cfg.clone();
        c.distill = c.distill.with_variant(v);
        let (_, curve) = distill(&teacher, &spec, &corpus, &c).unwrap();
        assert!(curve.train[0].abs() <= 1e-9, "{v}: {}", curve.train[0]);
    }
}

#[test]
fn zero_threshold_uses_only_the_reverse_bracket() {
    let corpus = small_corpus();
    let teacher = ModelWeights::init(&small_spec(16, 1), 100).unwrap();
    let mut cfg = small_cfg(2);
    cfg.distill = DistillConfig::builder(1).tau_step(0).build().unwrap();
    let total = cfg.total_steps(corpus.train.items.len()) as u64;
    let dcfg = cfg.distill.with_total_steps(total).unwrap();
    let mut seen = 0;
    distill_observed(&teacher, &small_spec(8, 1), &corpus, &cfg, &mut |rec| {
        let mut expected = 0.0;
        for (input, &drop) in rec.inputs.iter().zip(rec.dropped) {
            let (t, _) = forward_seq(&teacher, &input.tokens, cond_ids(input, drop));
            let (s, _) = forward_seq(rec.weights_before, &input.tokens, cond_ids(input, drop));
            let v = vocab::SIZE;
            let n = input.tokens.len();
            let mut per_seq = 0.0;
            for i in 0..n {
                let r = i * v..(i + 1) * v;
                per_seq += bracket_loss(&t[r.clone()], &s[r], &dcfg, rec.step as u64, Bracket::Reverse)
                    .unwrap()
                    .loss;
            }
            expected += per_seq / n as f64;
        }
        expected /= rec.inputs.len() as f64;
        assert!((rec.loss - expected).abs() <= 1e-12 * (1.0 + expected.abs()), "step {}", rec.step);
        seen += 1;
    })
    .unwrap();
    assert_eq!(seen as u64, total);
}

#[test]
fn stage_switches_exactly_once() {
    let corpus = small_corpus();
    let teacher = ModelWeights::init(&small_spec(16, 1), 100).unwrap();
    let cfg = small_cfg(2);
    let total = cfg.total_steps(corpus.train.items.len()) as u64;
    let dcfg = cfg.distill.with_total_steps(total).unwrap();
    assert!(dcfg.stage().tau_step > 0 && dcfg.stage().tau_step < total);
    let mut alphas = Vec::new();
    distill_observed(&teacher, &small_spec(8, 1), &corpus, &cfg, &mut |rec| {
        alphas.push(dcfg.stage().alpha(rec.step as u64));
    })
    .unwrap();
    let transitions = alphas.windows(2).filter(|w| w[0] != w[1]).count();
    assert_eq!(transitions, 1);
}

#[test]
fn distillation_leaves_teacher_untouched_and_is_reproducible() {
    let corpus = small_corpus();
    let teacher = ModelWeights::init(&small_spec(16, 1), 100).unwrap();
    let before = teacher.to_bytes();
    let cfg = small_cfg(6);
    let (wa, a) = distill(&teacher, &small_spec(8, 1), &corpus, &cfg).unwrap();
    let (wb, b) = distill(&teacher, &small_spec(8, 1), &corpus, &cfg).unwrap();
    assert_eq!(teacher.to_bytes(), before);
    assert_eq!(a, b);
    assert_eq!(wa.to_bytes(), wb.to_bytes());
    assert_eq!(a.variant, "stage-mixed-skewed");
}

#[test]
fn ce_weight_one_matches_cross_entropy_training() {
    let corpus = small_corpus();
    let teacher = ModelWeights::init(&small_spec(16, 1), 100).unwrap();
    let spec = small_spec(8, 1);
    let mut cfg = small_cfg(6);
    cfg.ce_weight = 1.0;
    let (wd, _) = distill(&teacher, &spec, &corpus, &cfg).unwrap();
    let (wc, _) = train_teacher(&spec, &corpus, &cfg).unwrap();
    assert_eq!(wd.to_bytes(), wc.to_bytes());
}

#[test]
fn vocab_mismatch_is_rejected() {
    let corpus = small_corpus();
    let teacher = ModelWeights::init(&small_spec(16, 1), 1).unwrap();
    let other = ModelSpec::new(80, 8, 1, 2, 64, vocab::COND_SIZE).unwrap();
    let err = distill(&teacher, &other, &corpus, &small_cfg(1)).unwrap_err();
    assert!(matches!(err, Error::InvalidArgument(_)));
}

#[test]
fn non_finite_teacher_reports_training_failure() {
    let corpus = small_corpus();
    let mut teacher = ModelWeights::init(&small_spec(16, 1), 1).unwrap();
    let last = teacher.tensors_mut().len() - 1;
    teacher.tensors_mut()[last].data[0] = f64::NAN;
    let err = distill(&teacher, &small_spec(8, 1), &corpus, &small_cfg(1)).unwrap_err();
    assert!(matches!(err, Error::TrainingFailure { step: 0, .. }), "{err}");
}

#[test]
fn compare_losses_contract() {
    let corpus = small_corpus();
    let teacher = ModelWeights::init(&small_spec(16, 1), 100).unwrap();
    let spec = small_spec(8, 1);
    let cfg = small_cfg(3);
    let same = compare_losses(
        &teacher,
        &spec,
        &corpus,
        &cfg,
        &[LossVariant::BiKl, LossVariant::BiKl],
    )
    .unwrap();
    assert_eq!(same[0], same[1]);
    let all = compare_losses(&teacher, &spec, &corpus, &cfg, &LossVariant::ALL).unwrap();
    assert_eq!(all.len(), 6);
    assert!(all.iter().all(|c| c.train.len() == all[0].train.len() && c.val.len() == cfg.epochs));
    assert!(stage_mixed_at_most_forward(&all).is_some());
    assert!(compare_losses(&teacher, &spec, &corpus, &cfg, &[LossVariant::BiKl]).is_err());
}

#[test]
fn csv_export() {
    let curve = LossCurve { train: vec![1.5, 1.25], val: vec![0.5], variant: "bikl".into() };
    let mut out = Vec::new();
    curve.write_train_csv(&mut out).unwrap();
    assert_eq!(String::from_utf8(out).unwrap(), "step,loss,variant\n0,1.5,bikl\n1,1.25,bikl\n");
    let mut out = Vec::new();
    curve.write_val_csv(&mut out).unwrap();
    assert_eq!(String::from_utf8(out).unwrap(), "epoch,val_loss,variant\n1,0.5,bikl\n");
}

#[test]
fn ema_smoothing() {
    let e = ema(&[1.0, 0.0, 0.0], 3);
    assert_eq!(e, vec![1.0, 0.5, 0.25]);
    assert!(ema(&[], 50).is_empty());
}

#[test]
fn config_validation_names_the_field() {
    let mut cfg = TrainConfig::student_default(0);
    cfg.ce_weight = 1.5;
    assert!(cfg.validate().unwrap_err().to_string().contains("ce_weight"));
    let mut cfg = TrainConfig::student_default(0);
    cfg.batch_size = 0;
    assert!(cfg.validate().unwrap_err().to_string().contains("batch_size"));
}
