//! Sequential vs parallel client execution for one training round.
//!
//! `cargo bench -p dcco` compares both inside one binary; building with
//! `--no-default-features` turns the parallel arm into the sequential path.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use dcco::data::dirichlet_partition;
use dcco::encoder::init_params;
use dcco::exec::Exec;
use dcco::harness::ExperimentConfig;
use dcco::optim::OptimizerState;
use dcco::protocol::{Federation, Method, ServerState};

fn rounds(c: &mut Criterion) {
    let config = ExperimentConfig::preset("toy-trend").unwrap();
    let (train, _) = config.data.load().unwrap();
    let clients = dirichlet_partition(&train, &config.partition).unwrap().clients;
    let cores = std::thread::available_parallelism().map_or(1, |n| n.get());
    let execs = [("sequential", Exec::sequential()), ("parallel", Exec::with_workers(cores.max(2)))];

    let mut group = c.benchmark_group("round");
    group.sample_size(20);
    for method in [Method::Dcco, Method::FedavgCco, Method::FedavgContrastive] {
        for (label, exec) in &execs {
            let round = dcco::protocol::RoundConfig {
                seed: 0,
                ..config.round.clone()
            };
            let fed = Federation {
                encoder: &config.encoder,
                config: &round,
                clients: &clients,
                exec,
            };
            let mut server = ServerState::new(init_params(&config.encoder, 0).unwrap(), OptimizerState::new(config.server.clone()));
            group.bench_function(BenchmarkId::new(method.name(), label), |b| {
                b.iter(|| fed.run_round(method, &mut server, 1e-3).unwrap())
            });
        }
    }
    group.finish();
}

criterion_group!(benches, rounds);
criterion_main!(benches);
