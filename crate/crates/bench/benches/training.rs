use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use turbo_core::data::{ShapesDataset, Split};
use turbo_core::train::{TrainData, TrainParams, Trainer};
use turbo_core::{Task, TurboConfig};

fn train_step(c: &mut Criterion) {
    let mut group = c.benchmark_group("toy_train_step_b32");
    group.sample_size(10);
    for &(m, r) in &[(0.0, 0.0), (0.5, 0.5), (0.75, 0.25), (0.9, 0.1)] {
        let mut cfg = TurboConfig::toy(Task::Classify);
        cfg.mask_ratio = m;
        cfg.recon_ratio = r;
        let data = ShapesDataset::generate(&cfg.geometry, Split::Train, 32, 0).unwrap();
        let mut trainer = Trainer::new(cfg, TrainParams::default()).unwrap();
        let idx: Vec<usize> = (0..32).collect();
        let (patches, targets) = trainer.make_batch(TrainData::Shapes(&data), &idx).unwrap();
        group.bench_with_input(BenchmarkId::from_parameter(format!("m{m}_r{r}")), &(m, r), |b, _| {
            b.iter(|| black_box(trainer.train_step(&patches, &targets, 1e-4).unwrap().total))
        });
    }
    group.finish();
}

criterion_group!(benches, train_step);
criterion_main!(benches);
