use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use siu_core::{GenerationRequest, LanguageModel, ToyBackend, ToyLm, ToyLmConfig, Tokenizer};

fn model(d_model: usize, seq_len: usize) -> ToyLm {
    ToyLm::init(ToyLmConfig { d_model, seq_len, ..ToyLmConfig::default() }).unwrap()
}

fn train_step(c: &mut Criterion) {
    let mut g = c.benchmark_group("loss_and_grad");
    g.sample_size(10);
    for d in [32, 64] {
        let m = model(d, 128);
        let ids: Vec<u32> = (0..128).map(|i| (i * 7 % 250) as u32).collect();
        let mask: Vec<bool> = (0..128).map(|i| i % 3 != 0).collect();
        let rows = [(&ids[..], &mask[..]), (&ids[..], &mask[..])];
        g.bench_with_input(BenchmarkId::new("batch2x128", d), &rows, |b, rows| b.iter(|| m.loss_and_grad(rows)));
    }
    g.finish();
}

fn decode(c: &mut Criterion) {
    let backend = ToyBackend::new(model(64, 256), Tokenizer::byte_level()).unwrap();
    let req = GenerationRequest::greedy("Below is an instruction. Answer it.", 128);
    c.bench_function("toy_decode_128", |b| b.iter(|| backend.generate(&req).unwrap()));
}

criterion_group!(benches, train_step, decode);
criterion_main!(benches);
