use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;

use quest_core::data::{synth_generate, Augment, SynthConfig};
use quest_core::distill::{
    kl_distill_loss, kl_distill_loss_backward, loss_and_grads, predictor_backward, predictor_forward, teacher_outputs,
    total_loss, DistillConfig, DistillHeads, DistillMode, Level, PredictorParams, TeacherOutputs,
};
use quest_core::harness::{run_training, RunSpec, TeacherCache, TrainConfig};
use quest_core::models::{build_model, ArchSpec, Mode, Model};
use quest_core::params::Sgd;
use quest_core::vocab::{distances, quantize_feature_map, Vocabulary};
use quest_core::Tensor;

fn arch(stages: &str, classes: usize) -> ArchSpec {
    ArchSpec::new(3, ArchSpec::parse_stages(stages).unwrap(), classes).unwrap()
}

fn level(k: usize) -> Level {
    Level {
        teacher_tap: "last_conv".into(),
        student_tap: "last_conv".into(),
        k,
        tau: 0.2,
    }
}

fn random_vocab(seed: u64, k: usize, dim: usize) -> Vocabulary {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let c = (0..k * dim).map(|_| rng.random_range(0.0f32..1.0)).collect();
    Vocabulary::new(c, k, dim, "last_conv", 0.0).unwrap()
}

#[test]
fn teacher_and_vocabulary_never_receive_gradients() {
    let (ta, sa) = (arch("6x1,8x1", 3), arch("4x1,5x1", 3));
    let mut teacher = build_model::<f64>(&ta, 1).unwrap();
    teacher.freeze();
    let student = build_model::<f64>(&sa, 2).unwrap();
    let vocab = random_vocab(3, 5, 8);
    let before = quest_core::vocab::encode_vocabulary(&vocab);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let batch = Tensor::<f64>::from_fn(&[2, 3, 8, 8], |_| rng.random_range(-1.0..1.0)).unwrap();
    for mode in [DistillMode::Quest, DistillMode::Kd, DistillMode::FeatureRegression] {
        let config = DistillConfig {
            mode,
            levels: vec![level(5)],
            ..Default::default()
        };
        let heads = DistillHeads::<f64>::init(&config, &ta, &sa, 5).unwrap();
        let t_out = teacher_outputs(&teacher, &batch, &config).unwrap();
        let vocabs = if mode == DistillMode::Quest { vec![vocab.clone()] } else { vec![] };
        let (_, grads) = loss_and_grads(&student, &heads, &config, &vocabs, &batch, &[0, 2], &t_out, true).unwrap();
        let grads = grads.unwrap();
        let student_names: Vec<&str> = student.params.names().collect();
        assert!(grads.student.names().all(|n| student_names.contains(&n)), "{mode:?}");
        let head_names: Vec<&str> = heads.params.names().collect();
        assert!(grads.heads.names().all(|n| head_names.contains(&n)), "{mode:?}");
        assert!(grads.heads.names().all(|n| n.starts_with("level")));
    }
    assert_eq!(quest_core::vocab::encode_vocabulary(&vocab), before);
}

#[test]
fn teacher_checksum_survives_distillation_runs() {
    let cfg = SynthConfig::new(2, 3, 48, 12, 8);
    let (train, test) = synth_generate(&cfg).unwrap();
    let ta = arch("6x1,8x1", 3);
    let teacher = build_model::<f32>(&ta, 1).unwrap();
    let sum = teacher.checksum();
    let vocab = random_vocab(5, 4, 8);
    let tc = TrainConfig {
        epochs: 2,
        batch_size: 16,
        lr_schedule: vec![(0, 0.01)],
        ..Default::default()
    };
    let mut cache = TeacherCache::new(teacher, &["last_conv"]).unwrap();
    for mode in [DistillMode::Quest, DistillMode::Kd, DistillMode::FeatureRegression] {
        let dc = DistillConfig {
            mode,
            levels: vec![level(4)],
            ..Default::default()
        };
        let vocabs = if mode == DistillMode::Quest { vec![vocab.clone()] } else { vec![] };
        let spec = RunSpec {
            train: &tc,
            distill: &dc,
            vocabs: &vocabs,
            training_seed: 1,
            heads_seed: 2,
            record_wall_time: false,
        };
        let student = build_model(&arch("4x1,5x1", 3), 3).unwrap();
        let run = run_training(student, &spec, &train, &test, Some(&mut cache), |_| Ok(())).unwrap();
        assert_eq!(run.metrics.len(), 2);
        if mode == DistillMode::Quest {
            assert!(run.metrics[0].train_loss.distill > 0.0);
            assert!(run.metrics[0].avg_max_teacher_assignment_prob.is_some());
        }
    }
    assert_eq!(cache.teacher().checksum(), sum);
    assert_eq!(cache.teacher().mode, Mode::Eval);
}

#[test]
fn beta_zero_is_plain_cross_entropy() {
    let (ta, sa) = (arch("6x1,8x1", 3), arch("4x1,5x1", 3));
    let teacher = build_model::<f64>(&ta, 1).unwrap();
    let student = build_model::<f64>(&sa, 2).unwrap();
    let vocab = random_vocab(3, 5, 8);
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let batch = Tensor::<f64>::from_fn(&[3, 3, 8, 8], |_| rng.random_range(-1.0..1.0)).unwrap();
    let labels = [0, 1, 2];
    let plain = DistillConfig::default();
    let heads = DistillHeads::<f64>::init(&plain, &ta, &sa, 1).unwrap();
    let (ce, _) = total_loss(&batch, &labels, &teacher, &student, &plain, &[], &heads).unwrap();
    let quest = DistillConfig {
        mode: DistillMode::Quest,
        beta: 0.0,
        levels: vec![level(5)],
        ..Default::default()
    };
    let qheads = DistillHeads::<f64>::init(&quest, &ta, &sa, 1).unwrap();
    let (q, parts) = total_loss(&batch, &labels, &teacher, &student, &quest, &[vocab], &qheads).unwrap();
    assert_eq!(q, ce);
    assert!(parts.distill > 0.0);
}

#[test]
fn two_identical_levels_double_the_distillation_term() {
    let (ta, sa) = (arch("6x1,8x1", 3), arch("4x1,5x1", 3));
    let teacher = build_model::<f64>(&ta, 1).unwrap();
    let student = build_model::<f64>(&sa, 2).unwrap();
    let vocab = random_vocab(3, 5, 8);
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let batch = Tensor::<f64>::from_fn(&[2, 3, 8, 8], |_| rng.random_range(-1.0..1.0)).unwrap();
    let one = DistillConfig {
        mode: DistillMode::Quest,
        levels: vec![level(5)],
        ..Default::default()
    };
    let two = DistillConfig {
        levels: vec![level(5), level(5)],
        ..one.clone()
    };
    let h1 = DistillHeads::<f64>::init(&one, &ta, &sa, 1).unwrap();
    let mut h2 = DistillHeads::<f64>::init(&two, &ta, &sa, 1).unwrap();
    for suffix in ["predictor.weight", "predictor.gamma"] {
        let src = h1.params.get(&format!("level0.{suffix}")).unwrap().clone();
        *h2.params.get_mut(&format!("level1.{suffix}")).unwrap() = src;
    }
    let (_, a) = total_loss(&batch, &[0, 1], &teacher, &student, &one, &[vocab.clone()], &h1).unwrap();
    let (_, b) = total_loss(&batch, &[0, 1], &teacher, &student, &two, &[vocab.clone(), vocab], &h2).unwrap();
    assert!((b.distill - 2.0 * a.distill).abs() < 1e-12 * a.distill.max(1.0));
}

#[test]
fn quest_without_vocabulary_is_a_configuration_error() {
    let (ta, sa) = (arch("6x1,8x1", 3), arch("4x1,5x1", 3));
    let teacher = build_model::<f64>(&ta, 1).unwrap();
    let student = build_model::<f64>(&sa, 2).unwrap();
    let config = DistillConfig {
        mode: DistillMode::Quest,
        levels: vec![level(5)],
        ..Default::default()
    };
    let heads = DistillHeads::<f64>::init(&config, &ta, &sa, 1).unwrap();
    let batch = Tensor::<f64>::zeros(&[1, 3, 8, 8]).unwrap();
    let err = total_loss(&batch, &[0], &teacher, &student, &config, &[], &heads).unwrap_err();
    assert!(matches!(err, quest_core::Error::Config(_)), "{err}");
}

/// With a near-zero temperature the teacher map is one-hot at the nearest
/// word; fitting the predictor (and free student features) to it should make
/// the student's argmax agree with that word almost everywhere.
#[test]
fn converged_predictor_discretizes_like_the_vocabulary() {
    let (n, ct, cs, k, h, w) = (4, 6, 10, 8, 5, 5);
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let vocab = random_vocab(22, k, ct);
    let f_t = Tensor::<f64>::from_fn(&[n, ct, h, w], |_| rng.random_range(0.0..1.0)).unwrap();
    let p_t = quantize_feature_map(&f_t, &vocab, 1e-9).unwrap();
    let mut f_s = Tensor::<f64>::from_fn(&[n, cs, h, w], |_| rng.random_range(-1.0..1.0)).unwrap();
    let mut params = PredictorParams::<f64>::init(cs, k, 23).unwrap();
    let mut opt = Sgd::<f64>::new(0.9, 0.0);
    let mut state = quest_core::params::ParamSet::new();
    state.insert("f", f_s.clone()).unwrap();
    state.insert("w", params.weight.clone()).unwrap();
    state.insert("gamma", Tensor::new(vec![1], vec![params.gamma]).unwrap()).unwrap();
    let mut last = f64::INFINITY;
    for _ in 0..1500 {
        let (p_s, cache) = predictor_forward(&f_s, &params).unwrap();
        last = kl_distill_loss(&p_t, &p_s).unwrap();
        let g = predictor_backward(&p_s, &cache, &kl_distill_loss_backward(&p_t, &p_s).unwrap()).unwrap();
        let mut grads = quest_core::params::ParamSet::new();
        grads.insert("f", g.features).unwrap();
        grads.insert("w", g.weight).unwrap();
        grads.insert("gamma", Tensor::new(vec![1], vec![g.gamma]).unwrap()).unwrap();
        opt.step(&mut state, &grads, 0.05).unwrap();
        f_s = state.get("f").unwrap().clone();
        params = PredictorParams::new(state.get("w").unwrap().clone(), state.get("gamma").unwrap().data()[0].max(0.0))
            .unwrap();
    }
    let (p_s, _) = predictor_forward(&f_s, &params).unwrap();
    let mut agree = 0;
    for s in 0..n {
        for y in 0..h {
            for x in 0..w {
                let f: Vec<f64> = (0..ct).map(|c| f_t.data()[((s * ct + c) * h + y) * w + x]).collect();
                let d = distances(&f, &vocab).unwrap();
                let nearest = (0..k).fold(0, |b, j| if d[j] < d[b] { j } else { b });
                let p = p_s.at(s, y, x);
                let best = (0..k).fold(0, |b, j| if p[j] > p[b] { j } else { b });
                agree += usize::from(best == nearest);
            }
        }
    }
    let frac = agree as f64 / (n * h * w) as f64;
    assert!(frac >= 0.99, "alignment {frac}, final loss {last}");
}

#[test]
fn supervised_loss_falls_on_a_separable_batch() {
    // Two classes that differ only in mean brightness.
    let a = arch("4x1,6x1", 2);
    let mut model = build_model::<f32>(&a, 5).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let labels: Vec<usize> = (0..16).map(|i| i % 2).collect();
    let mut data = Vec::new();
    for &l in &labels {
        let base = if l == 0 { -0.5f32 } else { 0.5 };
        data.extend((0..3 * 8 * 8).map(|_| base + rng.random_range(-0.1f32..0.1)));
    }
    let batch = Tensor::new(vec![16, 3, 8, 8], data).unwrap();
    let config = DistillConfig::default();
    let heads = DistillHeads::<f32> {
        params: Default::default(),
    };
    let none = TeacherOutputs {
        logits: Tensor::zeros(&[1, 1]).unwrap(),
        features: vec![],
    };
    let mut opt = Sgd::new(0.9, 0.0);
    let mut prev = f64::INFINITY;
    for step in 0..50 {
        let (b, g) = loss_and_grads(&model, &heads, &config, &[], &batch, &labels, &none, true).unwrap();
        assert!(b.total < prev, "loss rose at step {step}: {} -> {}", prev, b.total);
        prev = b.total;
        model.step(&mut opt, &g.unwrap().student, 0.01).unwrap();
    }
}

#[test]
fn inference_does_not_depend_on_batch_composition() {
    let a = arch("8x2,16x1", 4);
    let model: Model<f32> = build_model(&a, 8).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let batch = Tensor::<f32>::from_fn(&[5, 3, 8, 8], |_| rng.random_range(0.0f32..1.0)).unwrap();
    let full = model.infer(&batch, &["stage1.block2", "last_conv"]).unwrap();
    for i in 0..5 {
        let single = batch.gather(&[i]).unwrap();
        let one = model.infer(&single, &["stage1.block2", "last_conv"]).unwrap();
        assert_eq!(one.logits.data(), full.logits.sample(i));
        for tap in ["stage1.block2", "last_conv"] {
            assert_eq!(one.feature(tap).unwrap().data(), full.feature(tap).unwrap().sample(i));
        }
    }
}

#[test]
fn augmentation_flag_is_respected_by_the_teacher_cache() {
    let cfg = SynthConfig::new(4, 3, 20, 4, 8);
    let (train, _) = synth_generate(&cfg).unwrap();
    let teacher = build_model::<f32>(&arch("6x1,8x1", 3), 1).unwrap();
    let mut cache = TeacherCache::new(teacher.clone(), &["last_conv"]).unwrap();
    let idx = [3, 7, 3];
    let flips = [false, true, true];
    let cached = cache.outputs(&train, &idx, &flips).unwrap();
    let direct = teacher.infer(&train.batch(&idx, &flips).unwrap(), &["last_conv"]).unwrap();
    assert_eq!(cached.logits, direct.logits);
    assert_eq!(cached.feature("last_conv").unwrap(), direct.feature("last_conv").unwrap());
    let again = cache.outputs(&train, &idx, &flips).unwrap();
    assert_eq!(again.logits, cached.logits);
    let _ = Augment::Flip;
}
