use turbo_core::data::{gen_align_sample, gen_long_video, LongDataset, ShapesDataset, Split, TextEmbedder, DURATION_S, SEGMENT_S};
use turbo_core::error::TurboError;
use turbo_core::model::{LongPreset, ParamStore, Task, TurboConfig, TurboNet};
use turbo_core::rng::{derive_seed, rng_from};
use turbo_core::train::*;
use turbo_core::Tensor;

fn store(w: &[f32], g: &[f32]) -> ParamStore<f32> {
    let mut s = ParamStore::new();
    let id = s.add("w", Tensor::new(vec![1, w.len()], w.to_vec()).unwrap());
    s.grad_mut(id).data_mut().copy_from_slice(g);
    s
}

fn weights(s: &ParamStore<f32>) -> Vec<f32> {
    s.iter().next().unwrap().1.data().to_vec()
}

#[test]
fn adamw_first_step_moves_each_weight_by_lr_against_its_gradient() {
    let mut s = store(&[0.5, -0.5, 2.0], &[0.3, -0.02, 1e-3]);
    let mut st = OptimState::new(&s);
    let opt = AdamW { weight_decay: 0.0, clip_norm: None, ..AdamW::default() };
    adamw_step(&mut s, &mut st, &opt, 0.01).unwrap();
    // m_hat = g and v_hat = g^2 after one step, so the update is g / (|g| + eps)
    let want = [0.5 - 0.01 * 0.3 / (0.3 + 1e-8), -0.5 + 0.01 * 0.02 / (0.02 + 1e-8), 2.0 - 0.01 * 1e-3 / (1e-3 + 1e-8)];
    for (w, e) in weights(&s).iter().zip(want) {
        assert!((*w as f64 - e).abs() < 1e-6, "{w} vs {e}");
    }
}

#[test]
fn adamw_without_gradient_or_decay_is_a_no_op() {
    let mut s = store(&[0.5, -0.5], &[0.0, 0.0]);
    let mut st = OptimState::new(&s);
    adamw_step(&mut s, &mut st, &AdamW { weight_decay: 0.0, ..AdamW::default() }, 0.1).unwrap();
    assert_eq!(weights(&s), vec![0.5, -0.5]);
}

#[test]
fn adamw_decay_alone_shrinks_by_one_minus_lr_wd() {
    let mut s = store(&[0.5, -0.25], &[0.0, 0.0]);
    let mut st = OptimState::new(&s);
    adamw_step(&mut s, &mut st, &AdamW::default(), 0.1).unwrap();
    let f = 1.0 - 0.1 * 0.05;
    assert_eq!(weights(&s), vec![(0.5f64 * f) as f32, (-0.25f64 * f) as f32]);
}

#[test]
fn adamw_clips_and_rejects_non_finite_gradients() {
    let mut s = store(&[0.0, 0.0], &[3.0, 4.0]);
    let mut st = OptimState::new(&s);
    let stats = adamw_step(&mut s, &mut st, &AdamW::default(), 0.1).unwrap();
    assert_eq!(stats.grad_norm, 5.0);
    assert!(stats.clipped);
    let mut s = store(&[0.0, 0.0], &[f32::NAN, 1.0]);
    let mut st = OptimState::new(&s);
    match adamw_step(&mut s, &mut st, &AdamW::default(), 0.1) {
        Err(TurboError::NonFinite(m)) => assert!(m.contains('w'), "{m}"),
        other => panic!("{other:?}"),
    }
}

#[test]
fn schedule_warms_up_then_follows_the_cosine() {
    let s = Schedule { base_lr: 1e-3, min_lr: 1e-5, warmup_epochs: 2.0, total_epochs: 10, steps_per_epoch: 10 };
    assert_eq!(s.lr_at(0), 0.0);
    assert!((s.lr_at(10) - 5e-4).abs() < 1e-15);
    assert_eq!(s.lr_at(20), 1e-3);
    assert!((s.lr_at(60) - (1e-5 + 0.5 * (1e-3 - 1e-5))).abs() < 1e-15);
    assert_eq!(s.lr_at(100), 1e-5);
    assert_eq!(s.lr_at(1000), 1e-5);
    let lrs: Vec<f64> = (20..=100).map(|t| s.lr_at(t)).collect();
    assert!(lrs.windows(2).all(|w| w[1] <= w[0]));
}

fn toy_net(task: Task, seed: u64) -> TurboNet<f32> {
    TurboNet::new(TurboConfig::toy(task), seed).unwrap()
}

#[test]
fn inference_distributions_are_normalized_at_any_mask() {
    let net = toy_net(Task::Classify, 1);
    let ds = ShapesDataset::generate(&net.config.geometry, Split::Test, 4, 0).unwrap();
    let patches = ds.batch(&[0, 1, 2, 3]).unwrap();
    for m in [0.0, 0.5, 0.75, 0.95] {
        for p in infer_classify(&net, &patches, m, &[1, 2, 3, 4]).unwrap() {
            assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }
    assert!(infer_classify(&net, &patches, 1.0, &[1, 2, 3, 4]).is_err());
    let a = evaluate_classify(&net, &ds, 0.5, 9, 3).unwrap();
    assert_eq!(a, evaluate_classify(&net, &ds, 0.5, 9, 2).unwrap());
}

#[test]
fn multicrop_averages_to_a_distribution() {
    let net = TurboNet::<f32>::new(TurboConfig::toy_long(LongPreset::F16), 2).unwrap();
    let v = gen_long_video(3, 5).unwrap();
    let p = infer_long_multicrop(&net, &v, 10, 0.0, 1).unwrap();
    assert_eq!(p.len(), 8);
    assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-9);
    assert_eq!(p, infer_long_multicrop(&net, &v, 10, 0.0, 1).unwrap());
    assert!(infer_long_multicrop(&net, &v, 0, 0.0, 1).is_err());
}

#[test]
fn constant_model_multicrop_equals_single_crop() {
    let mut net = TurboNet::<f32>::new(TurboConfig::toy_long(LongPreset::F16), 3).unwrap();
    let w = net.params.by_name("head.weight").unwrap().shape().to_vec();
    net.params.set("head.weight", Tensor::zeros(&w)).unwrap();
    let b = net.params.by_name("head.bias").unwrap().shape().to_vec();
    net.params.set("head.bias", Tensor::from_f64(&b, &[0.1, 0.4, -0.2, 0.0, 0.3, 0.0, -1.0, 0.2]).unwrap()).unwrap();
    let v = gen_long_video(1, 2).unwrap();
    let one = infer_long_multicrop(&net, &v, 1, 0.0, 4).unwrap();
    let ten = infer_long_multicrop(&net, &v, 10, 0.0, 4).unwrap();
    for (a, b) in one.iter().zip(&ten) {
        assert!((a - b).abs() < 1e-9);
    }
}

#[test]
fn averaging_crops_reduces_prediction_variance() {
    let net = TurboNet::<f32>::new(TurboConfig::toy_long(LongPreset::F16), 4).unwrap();
    let (mut single, mut multi) = (Vec::new(), Vec::new());
    for i in 0..50u64 {
        let v = gen_long_video((i % 8) as usize, 100 + i).unwrap();
        let max = |p: Vec<f64>| p.into_iter().fold(0.0, f64::max);
        let var = |xs: &[f64]| {
            let m = xs.iter().sum::<f64>() / xs.len() as f64;
            xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / xs.len() as f64
        };
        let s: Vec<f64> = (0..4).map(|k| max(infer_long_multicrop(&net, &v, 1, 0.0, derive_seed(&[i, k])).unwrap())).collect();
        let m: Vec<f64> = (0..4).map(|k| max(infer_long_multicrop(&net, &v, 10, 0.0, derive_seed(&[i, k])).unwrap())).collect();
        single.push(var(&s));
        multi.push(var(&m));
    }
    assert!(multi.iter().sum::<f64>() < single.iter().sum::<f64>());
}

#[test]
fn per_second_features_cover_every_second() {
    let mut cfg = TurboConfig::toy(Task::Contrast);
    cfg.geometry = cfg.geometry.with_frames(4).unwrap();
    let net = TurboNet::<f32>::new(cfg, 5).unwrap();
    let v = gen_long_video(0, 1).unwrap();
    let f = per_second_features(&net, &v).unwrap();
    assert_eq!(f.len(), 60);
    assert_eq!(f, per_second_features(&net, &v).unwrap());
    assert_eq!(f[0].len(), net.config.proj_dim);
}

fn unit(dim: usize, k: usize) -> Vec<f32> {
    let mut v = vec![0.0; dim];
    v[k] = 1.0;
    v
}

#[test]
fn planted_oracle_features_align_perfectly() {
    for seed in 0..20 {
        let s = gen_align_sample(seed).unwrap();
        let dim = 64 + s.sentences.len();
        // background seconds point to their own axes; segment seconds carry their sentence
        let sentences: Vec<Vec<f32>> = (0..s.sentences.len()).map(|i| unit(dim, i)).collect();
        let features: Vec<Vec<f32>> = (0..s.video.duration_s)
            .map(|sec| match s.truth.iter().position(|t| t.is_some_and(|(a, b)| a <= sec && sec < b)) {
                Some(i) => sentences[i].clone(),
                None => unit(dim, s.sentences.len() + sec),
            })
            .collect();
        assert_eq!(align_recall_at_1(&features, &sentences, &s.truth).unwrap(), 1.0);
    }
}

#[test]
fn random_features_score_the_segment_coverage() {
    let mut total = 0.0;
    let mut coverage = 0.0;
    for seed in 0..100u64 {
        let s = gen_align_sample(seed).unwrap();
        let mut rng = rng_from(derive_seed(&[seed, 77]));
        let feats: Vec<Vec<f32>> = (0..60).map(|_| turbo_core::gradcheck::randn(&[16], 1.0, &mut rng).cast().into_data()).collect();
        let sents: Vec<Vec<f32>> = (0..s.sentences.len()).map(|_| turbo_core::gradcheck::randn(&[16], 1.0, &mut rng).cast().into_data()).collect();
        total += align_recall_at_1(&feats, &sents, &s.truth).unwrap();
        coverage += s.truth.iter().flatten().map(|(a, b)| (b - a) as f64 / 60.0).sum::<f64>() / 4.0;
    }
    let (r, c) = (total / 100.0, coverage / 100.0);
    assert!((r - c).abs() <= 0.05, "R@1 {r} vs coverage {c}");
    assert!((c - SEGMENT_S as f64 / DURATION_S as f64).abs() < 1e-12);
}

#[test]
fn unalignable_sentences_are_not_scored() {
    let feats = vec![unit(4, 0), unit(4, 1), unit(4, 2)];
    let sents = vec![unit(4, 1), unit(4, 3)];
    let r = align_recall_at_1(&feats, &sents, &[Some((1, 2)), None]).unwrap();
    assert_eq!(r, 1.0);
    assert!(align_recall_at_1(&feats, &sents[1..], &[None]).is_err());
}

fn tiny(task: Task) -> TurboConfig {
    let mut c = TurboConfig::toy(task);
    c.enc_depth = 1;
    c.dec_depth = 1;
    c
}

#[test]
fn identical_runs_log_identical_lines() {
    let cfg = tiny(Task::Classify);
    let data = ShapesDataset::generate(&cfg.geometry, Split::Train, 24, 1).unwrap();
    let params = TrainParams { batch_size: 8, epochs: 2, seed: 3, ..TrainParams::default() };
    let a = train_classify(cfg.clone(), params.clone(), &data).unwrap();
    let b = train_classify(cfg, params, &data).unwrap();
    let strip = |t: &Trainer| t.log.lines().iter().map(|l| without_wall_time(l).unwrap()).collect::<Vec<_>>();
    assert_eq!(a.log.lines().len(), 6);
    assert_eq!(strip(&a), strip(&b));
    for ((_, x), (_, y)) in a.net.params.iter().zip(b.net.params.iter()) {
        assert_eq!(x, y);
    }
}

#[test]
fn metric_lines_carry_the_documented_fields() {
    let cfg = tiny(Task::Classify);
    let data = ShapesDataset::generate(&cfg.geometry, Split::Train, 8, 1).unwrap();
    let t = train_classify(cfg, TrainParams { batch_size: 8, epochs: 1, ..TrainParams::default() }, &data).unwrap();
    let v: serde_json::Value = serde_json::from_str(&t.log.lines()[0]).unwrap();
    for k in ["step", "epoch", "task", "loss_total", "loss_ce", "loss_nce", "loss_pmae", "lr", "flops_gf", "wall_ms", "m", "r"] {
        assert!(v.get(k).is_some(), "missing {k}");
    }
    let lambda = 1.0 / 16f64.ln();
    let (total, ce, pmae) = (v["loss_total"].as_f64().unwrap(), v["loss_ce"].as_f64().unwrap(), v["loss_pmae"].as_f64().unwrap());
    assert!((total - (lambda * ce + pmae)).abs() < 1e-5);
}

#[test]
fn full_token_training_has_no_reconstruction_part() {
    let mut cfg = tiny(Task::Classify);
    cfg.mask_ratio = 0.0;
    cfg.recon_ratio = 0.0;
    let data = ShapesDataset::generate(&cfg.geometry, Split::Train, 8, 1).unwrap();
    let t = train_classify(cfg, TrainParams { batch_size: 8, epochs: 1, ..TrainParams::default() }, &data).unwrap();
    let v: serde_json::Value = serde_json::from_str(&t.log.lines()[0]).unwrap();
    assert_eq!(v["loss_pmae"].as_f64(), Some(0.0));
}

#[test]
fn contrastive_loss_starts_near_log_batch_and_text_stays_frozen() {
    let cfg = tiny(Task::Contrast);
    let data = ShapesDataset::generate(&cfg.geometry, Split::Train, 32, 1).unwrap();
    let params = TrainParams { batch_size: 16, epochs: 1, seed: 2, ..TrainParams::default() };
    let before = TextEmbedder::new(2, cfg.text_dim);
    let t = train_contrast(cfg, params, &data).unwrap();
    let first: serde_json::Value = serde_json::from_str(&t.log.lines()[0]).unwrap();
    let nce = first["loss_nce"].as_f64().unwrap();
    assert!((nce - 16f64.ln()).abs() < 0.2, "initial NCE {nce}");
    let after = t.embedder.as_ref().unwrap();
    assert_eq!(before.embed(&[0, 3, 5]).unwrap(), after.embed(&[0, 3, 5]).unwrap());
    assert!(t.net.params.iter().all(|(n, _)| !n.starts_with("text_embed")));
    let tiny_batch = TrainParams { batch_size: 1, ..TrainParams::default() };
    assert!(Trainer::new(tiny(Task::Contrast), tiny_batch).is_err());
}

#[test]
fn long_training_is_deterministic() {
    let mut cfg = TurboConfig::toy_long(LongPreset::F16);
    cfg.enc_depth = 1;
    cfg.dec_depth = 1;
    let data = LongDataset::generate(Split::Train, 8, 0).unwrap();
    let params = TrainParams { batch_size: 4, epochs: 1, seed: 5, ..TrainParams::default() };
    let a = train_long(cfg.clone(), params.clone(), &data).unwrap();
    let b = train_long(cfg, params, &data).unwrap();
    let strip = |t: &Trainer| t.log.lines().iter().map(|l| without_wall_time(l).unwrap()).collect::<Vec<_>>();
    assert_eq!(strip(&a), strip(&b));
}

#[test]
fn equal_budget_presets_see_the_same_number_of_tokens() {
    let counts: Vec<(usize, f64)> = LongPreset::ALL
        .iter()
        .map(|&p| {
            let c = TurboConfig::toy_long(p);
            let n = c.n_tokens();
            let (nv, _, _) = turbo_core::partition::partition_sizes(n, c.mask_ratio, c.recon_ratio).unwrap();
            (nv, turbo_core::cost::flops_estimate(&c, c.mask_ratio, c.recon_ratio).unwrap().total_gflops())
        })
        .collect();
    let (lo, hi) = counts.iter().fold((f64::MAX, 0f64), |(l, h), &(_, f)| (l.min(f), h.max(f)));
    assert!(counts.iter().all(|&(nv, _)| nv.abs_diff(counts[0].0) <= 1), "{counts:?}");
    assert!(hi / lo <= 1.15, "{counts:?}");
}
