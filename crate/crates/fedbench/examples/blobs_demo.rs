//! End-to-end smoke drive: partition synthetic blobs, run FedAvg in-process
//! and over loopback TCP, and print the per-round accuracy from both modes.

use std::net::TcpListener;
use std::thread;

use fedbench::algo::{AlgorithmConfig, BatchSize};
use fedbench::data::synthetic_blobs;
use fedbench::model::{Batch, ModelSpec, OptimizerKind};
use fedbench::netlink::{run_collaborator, serve_aggregator, NetOptions};
use fedbench::orchestrator::{derive_plan, run_federation, FederationConfig, OptimizerConfig};
use fedbench::partition::{PartitionKind, PartitionSpec};

fn main() {
    let train = synthetic_blobs(4, 120, 8, 0.45, 7).unwrap();
    let test = synthetic_blobs(4, 40, 8, 0.45, 8).unwrap();
    let cfg = FederationConfig {
        num_clients: 3,
        rounds: 5,
        algo: AlgorithmConfig::fedavg(2, BatchSize::Fixed(32)),
        model: ModelSpec::softmax_regression(8, 4),
        optimizer: OptimizerConfig { kind: OptimizerKind::Sgd, lr: 0.5 },
        partition: PartitionSpec::new(PartitionKind::DirichletLabelsSkew, 3, 17),
        master_seed: 42,
        eval_every: 1,
        workers: 2,
        reset_optimizer_per_round: false,
        quantize_broadcast: true,
    };

    let local = run_federation(&cfg, &train, &test).unwrap();
    println!("in-process rounds:");
    for m in &local.metrics {
        println!(
            "  round {:>2}  top-1 {:.3}  mean loss {:.4}  up {}B down {}B",
            m.round, m.global_top1, m.mean_local_loss, m.bytes_up, m.bytes_down
        );
    }

    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = listener.local_addr().unwrap().to_string();
    let assignments = derive_plan(&cfg, &train).unwrap().unwrap().assignments;
    let options = NetOptions::default();
    let wire = thread::scope(|scope| {
        let server = scope.spawn(|| serve_aggregator(&cfg, &train, &test, listener, &options));
        for (id, indices) in assignments.iter().enumerate() {
            let addr = addr.clone();
            let shard = Batch::new(
                train.features.gather_rows(indices),
                indices.iter().map(|&i| train.labels[i]).collect(),
            )
            .unwrap();
            let cfg = &cfg;
            let options = &options;
            scope.spawn(move || {
                run_collaborator(&addr, id, &shard, indices, cfg, options).unwrap();
            });
        }
        server.join().unwrap().unwrap()
    });
    println!("wire rounds:");
    for m in &wire.metrics {
        println!("  round {:>2}  top-1 {:.3}", m.round, m.global_top1);
    }

    let same = wire
        .final_params
        .values
        .iter()
        .zip(&local.final_params.values)
        .all(|(a, b)| a == b);
    println!(
        "final model across modes: {}",
        if same { "bit-identical" } else { "DIVERGED" }
    );
    assert!(same);
    assert!(local.metrics.last().unwrap().global_top1 > 0.8);
}
