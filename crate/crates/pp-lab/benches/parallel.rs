//! Compares the data-parallel backend (rayon, default) against the
//! sequential fallback on the two workloads that dominate training:
//! corpus statistics tallying and forward-pass likelihood sweeps.
//!
//! Build with `--no-default-features` to measure the sequential backend
//! under the same `map_chunks` entry point.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use pp_lab::core::Trajectory;
use pp_lab::envs::{tcm::TcmEnv, Environment};
use pp_lab::pomdp::{log_likelihood, parse_pomdp, write_pomdp, TabularPomdp};
use pp_lab::profiles::collect_stats;
use pp_lab::{parallel, pipeline};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn sample_data(episodes: usize, len: usize) -> Vec<Trajectory> {
    let mut env = TcmEnv::new();
    let mut out = Vec::with_capacity(episodes);
    for i in 0..episodes {
        let mut rng = pipeline::derive_rng(17, "bench", i as u64);
        env.reset(&mut rng);
        let steps = (0..len)
            .map(|_| {
                let a = rng.gen_range(0..4) as u16;
                let (o, _) = env.step(a, &mut rng);
                (a, o)
            })
            .collect();
        out.push(Trajectory {
            env_id: "tcm".into(),
            seed: i as u64,
            steps,
        });
    }
    out
}

fn random_pomdp(n_states: usize, n_actions: usize, n_obs: usize) -> TabularPomdp {
    // Round-trip through the text format to build one from public API.
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut row = |n: usize| -> Vec<f64> {
        let mut v: Vec<f64> = (0..n).map(|_| rng.gen_range(0.01..1.0)).collect();
        let s: f64 = v.iter().sum();
        for x in &mut v {
            *x /= s;
        }
        v
    };
    let mut text = format!("pomdp 1 {n_states} {n_actions} {n_obs}\n");
    let dump = |xs: Vec<f64>| {
        xs.iter()
            .map(|x| format!("{x:.17e}"))
            .collect::<Vec<_>>()
            .join(" ")
    };
    text.push_str(&dump(row(n_states)));
    text.push('\n');
    let mut trans = Vec::new();
    for _ in 0..n_states * n_actions {
        trans.extend(row(n_states));
    }
    text.push_str(&dump(trans));
    text.push('\n');
    let mut emit = Vec::new();
    for _ in 0..n_states * n_actions * n_states {
        emit.extend(row(n_obs));
    }
    text.push_str(&dump(emit));
    text.push('\n');
    parse_pomdp(&text).unwrap()
}

fn bench_tally(c: &mut Criterion) {
    let env = TcmEnv::new();
    let tests = env.tests().to_vec();
    let mut group = c.benchmark_group("corpus_stats");
    for &episodes in &[2_000usize, 10_000] {
        let data = sample_data(episodes, 10);
        group.bench_with_input(
            BenchmarkId::new("collect_stats", episodes),
            &data,
            |b, data| b.iter(|| collect_stats(data, &tests, 10)),
        );
    }
    group.finish();
}

fn bench_likelihood_sweep(c: &mut Criterion) {
    let model = random_pomdp(10, 4, 9);
    let data = sample_data(5_000, 10);
    let mut group = c.benchmark_group("likelihood_sweep");
    group.bench_function("backend_map_chunks", |b| {
        b.iter(|| {
            let ll: f64 = parallel::map_chunks(&data, 256, |chunk| {
                chunk
                    .iter()
                    .map(|t| log_likelihood(&model, &t.steps))
                    .sum::<f64>()
            })
            .into_iter()
            .sum();
            ll
        })
    });
    group.bench_function("sequential_reference", |b| {
        b.iter(|| {
            let ll: f64 = parallel::map_chunks_seq(&data, 256, |chunk| {
                chunk
                    .iter()
                    .map(|t| log_likelihood(&model, &t.steps))
                    .sum::<f64>()
            })
            .into_iter()
            .sum();
            ll
        })
    });
    group.finish();
    // Keep the serializer exercised so the bench binary catches drift.
    let mut s = String::new();
    write_pomdp(&mut s, &model);
    assert!(s.starts_with("pomdp 1"));
}

criterion_group!(benches, bench_tally, bench_likelihood_sweep);
criterion_main!(benches);
