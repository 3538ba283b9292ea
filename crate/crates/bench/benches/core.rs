use criterion::{criterion_group, criterion_main, Criterion};

use wvlp_core::autograd::Matrix;
use wvlp_core::demo::{demo_training_data, tiny_model_config};
use wvlp_core::evalkit::rank_candidates;
use wvlp_core::model::ModelConfig;
use wvlp_core::objectives::{itc_loss_value, normalize_rows, ContrastiveBatch, EmbeddingQueue, TargetMode};
use wvlp_core::trainer::{TrainConfig, Trainer};

fn wave(rows: usize, cols: usize, phase: f64) -> Matrix {
    normalize_rows(&Matrix::from_shape_fn((rows, cols), |(i, j)| ((i * cols + j) as f64 * 0.37 + phase).sin()))
}

fn losses(c: &mut Criterion) {
    let image = wave(32, 64, 0.0);
    let text = wave(32, 64, 1.0);
    let cats: Vec<String> = (0..32).map(|i| format!("c{i}")).collect();
    let mut iq = EmbeddingQueue::new(256, 64, true);
    let mut tq = EmbeddingQueue::new(256, 64, true);
    let qcats: Vec<String> = (0..256).map(|i| format!("c{}", i % 40)).collect();
    iq.enqueue(&wave(256, 64, 2.0), &qcats).unwrap();
    tq.enqueue(&wave(256, 64, 3.0), &qcats).unwrap();
    let batch = ContrastiveBatch {
        image: &image,
        text: &text,
        categories: &cats,
        image_queue: &iq,
        text_queue: &tq,
        tau: 0.07,
        mode: TargetMode::Uniform,
    };
    c.bench_function("itc_value_b32_m256", |b| b.iter(|| itc_loss_value(&batch)));
}

fn ranking(c: &mut Criterion) {
    let q = wave(200, 64, 0.5);
    let g = wave(1000, 64, 1.5);
    let ids: Vec<String> = (0..1000).map(|i| format!("g{i:04}")).collect();
    c.bench_function("rank_200x1000", |b| b.iter(|| rank_candidates(&q, &g, &ids).unwrap()));
}

fn train_step(c: &mut Criterion) {
    for (name, model) in [("train_step_tiny", tiny_model_config()), ("train_step_default", ModelConfig::default())] {
        let data = demo_training_data(8, 4, 2, 0, &model).unwrap();
        let config = TrainConfig { steps: 1_000_000, batch_size: 8, queue_size: 64, ..TrainConfig::default() };
        let mut trainer = Trainer::new(config, model, data).unwrap();
        let mut group = c.benchmark_group("train");
        group.sample_size(10);
        group.bench_function(name, |b| b.iter(|| trainer.step().unwrap()));
        group.finish();
    }
}

criterion_group!(benches, losses, ranking, train_step);
criterion_main!(benches);
