//! Sequential (`jobs = 1`) against parallel (`jobs = 0`, all cores) on the two
//! hot loops of a campaign. Build with `--no-default-features` to bench the
//! rayon-free fallback.

use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use faultscope::appfi::{run_app_campaign, AppFaultSpec, StatSizing};
use faultscope::isa::fault::enumerate_register_faults;
use faultscope::isa::{lower, IsaBatch};
use faultscope::nn::{arch, Split};
use faultscope::{par, Dataset};

fn isa_sweep(c: &mut Criterion) {
    let model = arch::mnist_micro(1);
    let program = lower(&model).unwrap();
    let faults = enumerate_register_faults(&program);
    let inputs = arch::random_inputs(&model, 8, 2);
    let batch = IsaBatch::new(program, (0..8).map(|i| inputs.sample(i).to_vec()).collect());

    let mut g = c.benchmark_group("isa_register_sweep");
    g.sample_size(10);
    for (name, jobs) in [("sequential", 1), ("parallel", 0)] {
        g.bench_with_input(BenchmarkId::new(name, faults.len()), &jobs, |b, &jobs| {
            b.iter(|| par::map(&faults, jobs, |f| black_box(batch.run(f, 10, true))))
        });
    }
    g.finish();
}

fn app_neurons(c: &mut Criterion) {
    let model = arch::lenet_small(1);
    let images = arch::random_inputs(&model, 64, 3);
    let eval = Dataset::new(images, (0..64).map(|i| i % 10).collect(), Split::Test).unwrap();
    let spec = AppFaultSpec::neurons(0.1, 0.1, 30, 32, 4);

    let mut g = c.benchmark_group("app_neuron_campaign");
    g.sample_size(10);
    for (name, jobs) in [("sequential", 1), ("parallel", 0)] {
        g.bench_function(name, |b| b.iter(|| run_app_campaign(&model, &eval, &spec, &StatSizing::default(), jobs).unwrap()));
    }
    g.finish();
}

criterion_group!(benches, isa_sweep, app_neurons);
criterion_main!(benches);
