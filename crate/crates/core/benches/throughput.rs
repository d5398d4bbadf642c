use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion, Throughput};
use mlrn_core::data::{generate_dataset, GeneratorConfig, SampleRecord};
use mlrn_core::harness::{batch_gradients, evaluate};
use mlrn_core::model::{init_params, InputEncoder, ModelConfig};
use mlrn_core::par;

const BATCH: usize = 32;
const CHUNK: usize = 4;

fn pools() -> Vec<(&'static str, rayon::ThreadPool)> {
    let threads = std::thread::available_parallelism().map_or(1, |n| n.get());
    let build = |n| {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .unwrap()
    };
    let mut out = vec![("sequential", build(1))];
    if par::is_parallel() {
        out.push(("parallel", build(threads)));
    }
    out
}

fn throughput(c: &mut Criterion) {
    let data = generate_dataset(
        &GeneratorConfig {
            seed: 1,
            ..Default::default()
        },
        BATCH,
    )
    .unwrap();
    let batch: Vec<&SampleRecord> = data.iter().collect();
    let model = ModelConfig::micro(2);
    let params = init_params(&model, 1).unwrap();
    let encoder = InputEncoder::<f32>::new(&model).unwrap();

    let mut group = c.benchmark_group("batch_gradients");
    group.sample_size(10);
    group.throughput(Throughput::Elements(BATCH as u64));
    for (name, pool) in pools() {
        group.bench_function(BenchmarkId::new(name, BATCH), |b| {
            b.iter(|| {
                pool.install(|| {
                    batch_gradients(&params, &model, &encoder, &batch, CHUNK, 0.0, None).unwrap()
                })
            })
        });
    }
    group.finish();

    let mut group = c.benchmark_group("evaluate");
    group.sample_size(10);
    group.throughput(Throughput::Elements(BATCH as u64));
    for (name, pool) in pools() {
        group.bench_function(BenchmarkId::new(name, BATCH), |b| {
            b.iter(|| pool.install(|| evaluate(&params, &model, &data, CHUNK).unwrap()))
        });
    }
    group.finish();
}

criterion_group!(benches, throughput);
criterion_main!(benches);
