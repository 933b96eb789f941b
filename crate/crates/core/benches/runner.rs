use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use quicmqtt::bench::conn_overhead::quic_run;
use quicmqtt::bench::runner::{run_batch, run_batch_sequential};
use quicmqtt::bench::Mode;
use quicmqtt::netsim::Profile;
use std::hint::black_box;

fn batch(c: &mut Criterion) {
    let mut g = c.benchmark_group("conn_overhead_batch");
    g.sample_size(10);
    for n in [8u64, 32] {
        let seeds: Vec<u64> = (0..n).collect();
        g.bench_with_input(BenchmarkId::new("parallel", n), &seeds, |b, s| {
            b.iter(|| {
                run_batch(s.clone(), |seed| {
                    black_box(quic_run(Profile::WIRELESS, Mode::Quic0Rtt, seed))
                })
            })
        });
        g.bench_with_input(BenchmarkId::new("sequential", n), &seeds, |b, s| {
            b.iter(|| {
                run_batch_sequential(s.clone(), |seed| {
                    black_box(quic_run(Profile::WIRELESS, Mode::Quic0Rtt, seed))
                })
            })
        });
    }
    g.finish();
}

criterion_group!(benches, batch);
criterion_main!(benches);
