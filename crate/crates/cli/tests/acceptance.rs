//! End-to-end acceptance run. Prints one `criterion N: PASS|FAIL` line per
//! criterion and exits non-zero if any fails. `TURBO_ACCEPT=3,9` runs a subset.

use std::fs;
use std::path::Path;
use std::time::Instant;

use turbo_core::cost::{flops_estimate, TRADE_OFF_PAIRS};
use turbo_core::data::{gen_align_sample, LongDataset, ShapesDataset, Split, DURATION_S};
use turbo_core::gradcheck::{full_suite, randn, MIN_COORDS};
use turbo_core::io::Checkpoint;
use turbo_core::model::{LongPreset, Task, TurboConfig};
use turbo_core::objectives::{info_nce, lambda_ce, lambda_nce, LogBase};
use turbo_core::partition::{make_partition, partition_sizes};
use turbo_core::rng::rng_from;
use turbo_core::train::{
    align_recall_at_1, evaluate_classify, evaluate_long, retrieval_top1, without_wall_time, TrainData, TrainParams, Trainer,
};
use turbo_core::{Graph, Tensor};

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn within(actual: f64, expected: f64, frac: f64) -> bool {
    (actual - expected).abs() <= frac * expected
}

fn c1_reference_flops() -> Outcome {
    let t = Instant::now();
    let full = flops_estimate(&TurboConfig::reference(), 0.0, 0.0).unwrap().total_gflops();
    let cal = TurboConfig::reference_calibration();
    let published = [99.3, 57.6, 45.9, 35.2, 18.3];
    let mut pass = within(full, 180.6, 0.03);
    let mut rows = vec![format!("m=0 {full:.1}")];
    for (&(m, r), &want) in TRADE_OFF_PAIRS[1..].iter().zip(&published) {
        let got = flops_estimate(&cal, m, r).unwrap().total_gflops();
        pass &= within(got, want, 0.10);
        rows.push(format!("({m},{r}) {got:.1}/{want}"));
    }
    let secs = t.elapsed().as_secs_f64();
    pass &= secs < 1.0;
    outcome(pass, format!("{} in {secs:.3}s", rows.join(", ")))
}

fn c2_pmae_saving() -> Outcome {
    let cal = TurboConfig::reference_calibration();
    let g = |m, r| flops_estimate(&cal, m, r).unwrap().total_gflops();
    let (a, b, c, d) = (g(0.75, 0.25), g(0.75, 0.75), g(0.9, 0.1), g(0.9, 0.9));
    let (r1, r2) = (a / b, c / d);
    let pass = a < b && c < d && (r1 - 0.80).abs() <= 0.10 && (r2 - 0.52).abs() <= 0.10;
    outcome(pass, format!("ratios {r1:.3} (target 0.80) and {r2:.3} (target 0.52)"))
}

fn c3_gradients() -> Outcome {
    let t = Instant::now();
    let reports = full_suite(0, None).unwrap();
    let secs = t.elapsed().as_secs_f64();
    let bad: Vec<&str> = reports
        .iter()
        .filter(|r| !r.passed || r.coords < MIN_COORDS)
        .map(|r| r.name.as_str())
        .collect();
    let worst = reports.iter().map(|r| r.max_rel_err).fold(0.0, f64::max);
    let has_step = reports.iter().any(|r| r.name.starts_with("train_step"));
    let pass = bad.is_empty() && has_step && secs < 120.0;
    outcome(pass, format!("{} checks, max rel err {worst:.2e}, failing {bad:?}, {secs:.1}s", reports.len()))
}

fn c4_partitions() -> Outcome {
    let t = Instant::now();
    let mut rng = rng_from(41);
    let mut bad = 0;
    use rand::Rng as _;
    for i in 0..10_000u64 {
        let n = rng.random_range(1..2000usize);
        let m = rng.random_range(0.0..0.99);
        let r = rng.random_range(0.0..=m);
        let p = make_partition(n, m, r, i).unwrap();
        let (ni, nr, ng) = partition_sizes(n, m, r).unwrap();
        let mut seen = vec![0u8; n];
        for &k in p.visible.iter().chain(&p.recon).chain(&p.ignored) {
            seen[k] += 1;
        }
        let sizes_ok = p.visible.len() == ni && p.recon.len() == nr && p.ignored.len() == ng;
        let equal_ok = make_partition(n, m, m, i).unwrap().ignored.is_empty();
        if !sizes_ok || !seen.iter().all(|&c| c == 1) || !equal_ok || make_partition(n, m, m + 0.005, i).is_ok() {
            bad += 1;
        }
    }
    let secs = t.elapsed().as_secs_f64();
    outcome(bad == 0 && secs < 10.0, format!("10000 partitions, {bad} violations, {secs:.2}s"))
}

fn shapes(task: Task, seed: u64) -> (ShapesDataset, ShapesDataset) {
    let geom = TurboConfig::toy(task).geometry;
    (
        ShapesDataset::generate(&geom, Split::Train, 2000, seed).unwrap(),
        ShapesDataset::generate(&geom, Split::Test, 400, seed).unwrap(),
    )
}

fn toy(task: Task, m: f64, r: f64) -> TurboConfig {
    TurboConfig { mask_ratio: m, recon_ratio: r, ..TurboConfig::toy(task) }
}

fn fit(cfg: TurboConfig, params: TrainParams, data: TrainData<'_>) -> Trainer {
    let mut t = Trainer::new(cfg, params).unwrap();
    t.fit(data, |_| Ok(())).unwrap();
    t
}

/// Median seconds of `reps` steps on one fixed batch, after one warm-up step.
fn step_seconds(cfg: TurboConfig, data: &ShapesDataset, reps: usize) -> f64 {
    let mut t = Trainer::new(cfg, TrainParams::default()).unwrap();
    let idx: Vec<usize> = (0..t.params.batch_size).collect();
    let (patches, targets) = t.make_batch(TrainData::Shapes(data), &idx).unwrap();
    t.train_step(&patches, &targets, 1e-4).unwrap();
    let mut times: Vec<f64> = (0..reps)
        .map(|_| {
            let s = Instant::now();
            t.train_step(&patches, &targets, 1e-4).unwrap();
            s.elapsed().as_secs_f64()
        })
        .collect();
    times.sort_by(f64::total_cmp);
    times[reps / 2]
}

fn c5_turbo_training() -> Outcome {
    let t = Instant::now();
    let (train, test) = shapes(Task::Classify, 0);
    let params = TrainParams { epochs: 30, seed: 0, ..TrainParams::default() };
    let base = fit(toy(Task::Classify, 0.0, 0.0), params.clone(), TrainData::Shapes(&train));
    let acc0 = evaluate_classify(&base.net, &test, 0.0, 0, 50).unwrap();
    let half = fit(toy(Task::Classify, 0.5, 0.5), params, TrainData::Shapes(&train));
    let acc5 = evaluate_classify(&half.net, &test, 0.0, 0, 50).unwrap();
    let s0 = step_seconds(toy(Task::Classify, 0.0, 0.0), &train, 9);
    let s9 = step_seconds(toy(Task::Classify, 0.9, 0.1), &train, 9);
    let cfg = toy(Task::Classify, 0.0, 0.0);
    let flops_ratio =
        flops_estimate(&cfg, 0.0, 0.0).unwrap().total_gflops() / flops_estimate(&cfg, 0.9, 0.1).unwrap().total_gflops();
    let secs = t.elapsed().as_secs_f64();
    let (a, b, c) = (acc0 >= 0.90, (acc5 - acc0).abs() <= 0.05, s9 <= 0.5 * s0 && flops_ratio >= 4.0);
    outcome(
        a && b && c && secs <= 900.0,
        format!(
            "(a) m=0 acc {acc0:.3}; (b) (0.5,0.5) acc {acc5:.3}; (c) step {s9:.4}s vs {s0:.4}s = {:.2}x, flops ratio {flops_ratio:.2}; {secs:.0}s",
            s9 / s0
        ),
    )
}

fn c6_mask_generalization() -> Outcome {
    let (train, test) = shapes(Task::Classify, 1);
    let t = Instant::now();
    let params = TrainParams { epochs: 30, seed: 1, ..TrainParams::default() };
    let tr = fit(toy(Task::Classify, 0.75, 0.25), params, TrainData::Shapes(&train));
    let train_secs = t.elapsed().as_secs_f64();
    let e = Instant::now();
    let accs: Vec<f64> = [0.0, 0.5, 0.75].iter().map(|&m| evaluate_classify(&tr.net, &test, m, 1, 50).unwrap()).collect();
    let eval_secs = e.elapsed().as_secs_f64();
    let pass = accs[0] >= accs[2] - 0.01 && eval_secs <= 120.0;
    outcome(
        pass,
        format!(
            "acc at m'=0 {:.3}, 0.5 {:.3}, 0.75 {:.3}; evals {eval_secs:.1}s (training {train_secs:.0}s)",
            accs[0], accs[1], accs[2]
        ),
    )
}

fn c7_contrastive() -> Outcome {
    let t = Instant::now();
    let (train, test) = shapes(Task::Contrast, 2);
    let params = TrainParams { epochs: 120, seed: 2, temperature: 0.1, ..TrainParams::default() };
    let tr = fit(toy(Task::Contrast, 0.75, 0.25), params, TrainData::Shapes(&train));
    let top1 = retrieval_top1(&tr.net, tr.embedder.as_ref().unwrap(), &test, 16, 0.0, 2).unwrap();

    // planted oracle: segment seconds carry their sentence's vector plus noise
    let mut rng = rng_from(7);
    let (mut planted, mut random, mut coverage) = (0.0, 0.0, 0.0);
    let samples = 50;
    for seed in 0..samples as u64 {
        let s = gen_align_sample(seed).unwrap();
        let dim = 32;
        let sents: Vec<Vec<f32>> = (0..s.sentences.len()).map(|_| randn(&[dim], 1.0, &mut rng).cast().into_data()).collect();
        let feats: Vec<Vec<f32>> = (0..DURATION_S)
            .map(|sec| {
                let noise: Vec<f32> = randn(&[dim], 0.1, &mut rng).cast().into_data();
                match s.truth.iter().position(|t| t.is_some_and(|(a, b)| a <= sec && sec < b)) {
                    Some(i) => sents[i].iter().zip(&noise).map(|(a, b)| a + b).collect(),
                    None => noise,
                }
            })
            .collect();
        planted += align_recall_at_1(&feats, &sents, &s.truth).unwrap();
        let rand_feats: Vec<Vec<f32>> = (0..DURATION_S).map(|_| randn(&[dim], 1.0, &mut rng).cast().into_data()).collect();
        random += align_recall_at_1(&rand_feats, &sents, &s.truth).unwrap();
        let alignable: Vec<_> = s.truth.iter().flatten().collect();
        coverage += alignable.iter().map(|(a, b)| (b - a) as f64 / DURATION_S as f64).sum::<f64>() / alignable.len() as f64;
    }
    let n = samples as f64;
    let (planted, random, coverage) = (planted / n, random / n, coverage / n);
    let secs = t.elapsed().as_secs_f64();
    let pass = top1 >= 0.25 && planted >= 0.9 && (random - coverage).abs() <= 0.05 && secs <= 900.0;
    outcome(
        pass,
        format!(
            "retrieval top-1 {top1:.3} at B=16; planted R@1 {planted:.3}; random R@1 {random:.3} vs coverage {coverage:.3}; {secs:.0}s"
        ),
    )
}

fn c8_long_video() -> Outcome {
    let t = Instant::now();
    let sizes: Vec<(usize, f64)> = LongPreset::ALL
        .iter()
        .map(|&p| {
            let c = TurboConfig::toy_long(p);
            let (nv, _, _) = partition_sizes(c.n_tokens(), c.mask_ratio, c.recon_ratio).unwrap();
            (nv, flops_estimate(&c, c.mask_ratio, c.recon_ratio).unwrap().total_gflops())
        })
        .collect();
    let tokens_ok = sizes.iter().all(|&(nv, _)| nv.abs_diff(sizes[0].0) <= 1);
    let (lo, hi) = sizes.iter().fold((f64::MAX, 0f64), |(l, h), &(_, f)| (l.min(f), h.max(f)));
    let flops_ok = hi / lo <= 1.15;
    let mut means = Vec::new();
    let mut runs = Vec::new();
    for preset in [LongPreset::F16, LongPreset::F32] {
        let mut accs = Vec::new();
        for seed in 0..3u64 {
            let train = LongDataset::generate(Split::Train, 640, seed).unwrap();
            let test = LongDataset::generate(Split::Test, 80, seed).unwrap();
            let params = TrainParams { epochs: 80, seed, ..TrainParams::default() };
            let tr = fit(TurboConfig::toy_long(preset), params, TrainData::Long(&train));
            accs.push(evaluate_long(&tr.net, &test, 10, 0.0, seed).unwrap());
        }
        means.push(accs.iter().sum::<f64>() / 3.0);
        runs.push(format!("{} {:?}", preset.name(), accs.iter().map(|a| format!("{a:.3}")).collect::<Vec<_>>()));
    }
    let secs = t.elapsed().as_secs_f64();
    let pass = tokens_ok && flops_ok && means[1] >= means[0] - 0.01 && secs <= 1800.0;
    outcome(
        pass,
        format!(
            "visible {:?}, flops spread {:.3}; {}; mean F16 {:.3} F32 {:.3}; {secs:.0}s",
            sizes.iter().map(|s| s.0).collect::<Vec<_>>(),
            hi / lo,
            runs.join(", "),
            means[0],
            means[1]
        ),
    )
}

fn nce(zv: &Tensor<f64>, zt: &Tensor<f64>) -> f64 {
    let mut g = Graph::<f64>::new();
    let (v, t) = (g.constant(zv.clone()), g.constant(zt.clone()));
    let l = info_nce(&mut g, v, t, 1.0).unwrap();
    g.value(l).item()
}

fn permute_rows(t: &Tensor<f64>, perm: &[usize]) -> Tensor<f64> {
    let p = t.shape()[1];
    let data = perm.iter().flat_map(|&i| t.data()[i * p..(i + 1) * p].to_vec()).collect();
    Tensor::new(t.shape().to_vec(), data).unwrap()
}

fn c9_loss_weights() -> Outcome {
    let ce = (lambda_ce(101, LogBase::E).unwrap() - 1.0 / 101f64.ln()).abs();
    let nc = (lambda_nce(32, LogBase::E).unwrap() - 1.0 / 32f64.ln()).abs();
    let zero_exact = [16usize, 32].iter().all(|&b| {
        let z = Tensor::zeros(&[b, 8]);
        nce(&z, &z) == (b as f64).ln()
    });
    let mut rng = rng_from(9);
    let zv = randn(&[16, 8], 1.0, &mut rng);
    let zt = randn(&[16, 8], 1.0, &mut rng);
    let base = nce(&zv, &zt);
    let sym = (base - nce(&zt, &zv)).abs();
    let perm: Vec<usize> = (0..16).map(|i| (i * 5 + 3) % 16).collect();
    let per = (base - nce(&permute_rows(&zv, &perm), &permute_rows(&zt, &perm))).abs();
    let pass = ce <= 1e-12 && nc <= 1e-12 && zero_exact && sym <= 1e-6 && per <= 1e-6;
    outcome(
        pass,
        format!("lambda errors {ce:.1e}/{nc:.1e}; ln B exact {zero_exact}; symmetry {sym:.1e}; permutation {per:.1e}"),
    )
}

fn train_once(dir: &Path) -> (Vec<String>, String, String) {
    let cfg = dir.join("run.cfg");
    fs::write(
        &cfg,
        format!(
            "task = classify\npreset = toy\nepochs = 2\nbatch_size = 16\ntrain_size = 64\ntest_size = 32\nseed = 11\ncheckpoint_every = 1\nout_dir = {}\n",
            dir.join("out").display()
        ),
    )
    .unwrap();
    let out = turbo_cli::cmd_train(&cfg, None, true, None, &mut Vec::new()).unwrap();
    let lines = fs::read_to_string(&out.metrics).unwrap().lines().map(|l| without_wall_time(l).unwrap()).collect();
    let digest = |p: &Path| Checkpoint::load(p).unwrap().digest().unwrap();
    (lines, digest(&out.checkpoint), digest(&dir.join("out").join("epoch_0001.ckpt")))
}

fn c10_determinism() -> Outcome {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let ra = train_once(a.path());
    let rb = train_once(b.path());
    let same = ra == rb;
    let final_path = a.path().join("out").join("final.ckpt");
    let bytes = fs::read(&final_path).unwrap();
    let ck = Checkpoint::from_bytes(&bytes).unwrap();
    let round = ck.to_bytes().unwrap() == bytes;
    let again = Checkpoint::from_bytes(&ck.to_bytes().unwrap()).unwrap();
    let bit_exact = ck.tensors.iter().zip(&again.tensors).all(|(x, y)| {
        x.data().iter().zip(y.data()).all(|(p, q)| p.to_bits() == q.to_bits())
    });
    outcome(
        same && round && bit_exact,
        format!("{} log lines identical {same}; checkpoint digests {}; round trip bit-exact {}", ra.0.len(), &ra.1[..12], round && bit_exact),
    )
}

type Criterion = (usize, fn() -> Outcome);

fn main() {
    let all: [Criterion; 10] = [
        (1, c1_reference_flops),
        (2, c2_pmae_saving),
        (3, c3_gradients),
        (4, c4_partitions),
        (5, c5_turbo_training),
        (6, c6_mask_generalization),
        (7, c7_contrastive),
        (8, c8_long_video),
        (9, c9_loss_weights),
        (10, c10_determinism),
    ];
    let only: Option<Vec<usize>> =
        std::env::var("TURBO_ACCEPT").ok().map(|s| s.split(',').filter_map(|x| x.trim().parse().ok()).collect());
    let mut failed = 0;
    for (n, run) in all {
        if only.as_ref().is_some_and(|o| !o.contains(&n)) {
            continue;
        }
        let o = run();
        println!("criterion {n}: {} {}", if o.pass { "PASS" } else { "FAIL" }, o.detail);
        failed += usize::from(!o.pass);
    }
    if failed > 0 {
        eprintln!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
}
