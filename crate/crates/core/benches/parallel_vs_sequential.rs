use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion, Throughput};
use teleop_core::depthcodec::{encode_batch, synth_scene, SceneParams};
use teleop_core::netsim::{rtt_monte_carlo, ChannelProfile, LinkParams};
use teleop_core::par::Execution;
use teleop_core::sweep::{force_sweep, WallPushConfig};

const MODES: [(&str, Execution); 2] = [("sequential", Execution::Sequential), ("parallel", Execution::Parallel)];

fn codec_batch(c: &mut Criterion) {
    let frames: Vec<_> = (0..16)
        .map(|seed| {
            synth_scene(&SceneParams {
                seed,
                noise_sigma: 1.0,
                ..SceneParams::default()
            })
        })
        .collect();
    let mut g = c.benchmark_group("codec_batch_16x848x480");
    g.throughput(Throughput::Elements(frames.len() as u64));
    for (name, exec) in MODES {
        g.bench_with_input(BenchmarkId::from_parameter(name), &exec, |b, &exec| {
            b.iter(|| encode_batch(black_box(&frames), exec).unwrap())
        });
    }
    g.finish();
}

fn channel_monte_carlo(c: &mut Criterion) {
    let params = LinkParams::from_profile(&ChannelProfile::preset("wifi").unwrap()).unwrap();
    let mut g = c.benchmark_group("rtt_monte_carlo_32x200");
    for (name, exec) in MODES {
        g.bench_with_input(BenchmarkId::from_parameter(name), &exec, |b, &exec| {
            b.iter(|| rtt_monte_carlo(black_box(&params), 32, 200, 20_000, 7, exec).unwrap())
        });
    }
    g.finish();
}

fn wall_force_sweep(c: &mut Criterion) {
    let cfg = WallPushConfig {
        duration_s: 0.25,
        ..WallPushConfig::default()
    };
    let depths: Vec<f64> = (0..8).map(|i| 0.02 + 0.12 * i as f64).collect();
    let mut g = c.benchmark_group("force_sweep_8_depths");
    g.sample_size(10);
    for (name, exec) in MODES {
        g.bench_with_input(BenchmarkId::from_parameter(name), &exec, |b, &exec| {
            b.iter(|| force_sweep(&cfg, black_box(&depths), exec).unwrap())
        });
    }
    g.finish();
}

criterion_group!(benches, codec_batch, channel_monte_carlo, wall_force_sweep);
criterion_main!(benches);
