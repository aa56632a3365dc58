//! Sampler throughput sweeps.

use crate::error::{config_err, Result};
use crate::sampler::{mix_seed, Sampler, SamplerConfig};

use super::config::{BenchConfig, ExperimentConfig};
use super::metrics::BenchRecord;

fn median(xs: &mut [f64]) -> f64 {
    xs.sort_by(f64::total_cmp);
    let n = xs.len();
    if n % 2 == 1 {
        xs[n / 2]
    } else {
        0.5 * (xs[n / 2 - 1] + xs[n / 2])
    }
}

/// Geometries `(n_workers, m_per_worker, groups)` a sweep visits, in row order.
pub fn bench_points(cfg: &ExperimentConfig) -> Vec<(usize, usize, usize)> {
    let bc = cfg.bench.clone().unwrap_or_default();
    let or = |v: &Vec<usize>, d: usize| if v.is_empty() { vec![d] } else { v.clone() };
    let ns = or(&bc.n_workers, cfg.sampler.n_workers);
    let ms = or(&bc.m_per_worker, cfg.sampler.m_per_worker);
    let gs = or(&bc.groups, cfg.sampler.groups);
    let mut out = Vec::new();
    for &n in &ns {
        for &m in &ms {
            for &g in &gs {
                if m % g == 0 {
                    out.push((n, m, g));
                }
            }
        }
    }
    out
}

/// Measures one geometry once: builds a sampler (without warm-up steps) and
/// times a single collection against the simulated inference server.
pub fn bench_point(cfg: &ExperimentConfig, bc: &BenchConfig, n: usize, m: usize, groups: usize, seed: u64) -> Result<BenchRecord> {
    let sampler_cfg = SamplerConfig {
        n_workers: n,
        m_per_worker: m,
        groups,
        seed,
        max_decorrelation_steps: 0,
    };
    let mut sampler = Sampler::new(sampler_cfg, &cfg.env)?;
    let mut inference = bc.inference;
    sampler.collect(bc.horizon, &mut inference)?;
    let st = sampler.throughput_stats();
    Ok(BenchRecord {
        n_workers: n,
        m_per_worker: m,
        groups,
        seeds: 1,
        steps_per_second: st.steps_per_second,
        server_idle: st.server_idle_fraction,
        worker_idle: st.worker_idle_fraction,
    })
}

/// Runs the configured sweep; one row per geometry with medians over seeds.
pub fn sample_bench(cfg: &ExperimentConfig) -> Result<Vec<BenchRecord>> {
    let bc = cfg.bench.clone().unwrap_or_default();
    let points = bench_points(cfg);
    if points.is_empty() {
        return config_err("the bench sweep has no point where m_per_worker is a multiple of groups");
    }
    points
        .into_iter()
        .map(|(n, m, g)| {
            let runs = (0..bc.seeds)
                .map(|s| bench_point(cfg, &bc, n, m, g, mix_seed(cfg.seed, s as u64)))
                .collect::<Result<Vec<_>>>()?;
            let col = |f: fn(&BenchRecord) -> f64| median(&mut runs.iter().map(f).collect::<Vec<_>>());
            Ok(BenchRecord {
                n_workers: n,
                m_per_worker: m,
                groups: g,
                seeds: bc.seeds,
                steps_per_second: col(|r| r.steps_per_second),
                server_idle: col(|r| r.server_idle),
                worker_idle: col(|r| r.worker_idle),
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::algos::AlgoKind;
    use crate::envs::{EnvSpec, LatencyDist};

    #[test]
    fn median_of_odd_and_even() {
        assert_eq!(median(&mut [3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&mut [4.0, 1.0, 3.0, 2.0]), 2.5);
    }

    #[test]
    fn one_row_per_valid_point() {
        let mut cfg = ExperimentConfig::catch_default(AlgoKind::A2c);
        cfg.env = EnvSpec::latency(LatencyDist::Constant { micros: 0.0 });
        cfg.bench = Some(BenchConfig {
            n_workers: vec![1, 2],
            m_per_worker: vec![1, 2, 4],
            groups: vec![1, 2],
            seeds: 2,
            horizon: 3,
            ..BenchConfig::default()
        });
        cfg.validate().unwrap();
        let rows = sample_bench(&cfg).unwrap();
        // m = 1 admits only one group: 2 x (1 + 2 + 2) points.
        assert_eq!(rows.len(), 10);
        assert!(rows.iter().all(|r| r.seeds == 2 && r.steps_per_second > 0.0));
        assert!(rows.iter().all(|r| (0.0..=1.0).contains(&r.server_idle) && (0.0..=1.0).contains(&r.worker_idle)));
    }
}
