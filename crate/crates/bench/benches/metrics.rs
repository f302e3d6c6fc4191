use criterion::{criterion_group, criterion_main, Criterion};
use mcle_bench::train_split;
use mcle_core::data::tokenize;
use mcle_core::metrics::{bleu4, cider_d, rouge_l, Tokens};

fn corpus() -> (Vec<Tokens>, Vec<Vec<Tokens>>) {
    let split = train_split(1000);
    let cands = split
        .samples
        .iter()
        .enumerate()
        .map(|(i, s)| tokenize(&s.explanations[i % s.explanations.len()]))
        .collect();
    let refs = split
        .samples
        .iter()
        .map(|s| s.explanations.iter().map(|e| tokenize(e)).collect())
        .collect();
    (cands, refs)
}

fn scores(c: &mut Criterion) {
    let (cands, refs) = corpus();
    c.bench_function("bleu4_1000", |b| b.iter(|| bleu4(&cands, &refs).unwrap()));
    c.bench_function("rouge_l_1000", |b| b.iter(|| rouge_l(&cands, &refs).unwrap()));
    c.bench_function("cider_d_1000", |b| b.iter(|| cider_d(&cands, &refs).unwrap()));
}

criterion_group!(benches, scores);
criterion_main!(benches);
