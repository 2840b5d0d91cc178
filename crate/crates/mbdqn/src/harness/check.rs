//! Runtime self-check suite behind the `check` CLI subcommand: quick oracle
//! and statistical checks that exercise the numeric kernels on the installed
//! build.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::approximator::{
    Backend, EnsembleConfig, EnsembleQFunction, HeadSpec, Optimizer,
};
use crate::replay::{ReplayBuffer, Transition};
use crate::returns::{lambda_return, n_step_return, DiscountSpec, LambdaSpec, RewardSegment};

#[derive(Debug, Clone)]
pub struct CheckResult {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

fn result(name: &str, passed: bool, detail: String) -> CheckResult {
    CheckResult {
        name: name.to_string(),
        passed,
        detail,
    }
}

fn naive_n_step(rewards: &[f64], bootstrap: f64, g: f64) -> f64 {
    let mut acc = 0.0;
    for (j, &r) in rewards.iter().enumerate() {
        acc += g.powi(j as i32) * r;
    }
    acc + g.powi(rewards.len() as i32) * bootstrap
}

fn check_n_step_kernel() -> CheckResult {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut worst = 0.0f64;
    for _ in 0..500 {
        let n = rng.random_range(1..=20usize);
        let m = rng.random_range(1..=n);
        let terminated = m < n || rng.random::<f64>() < 0.3;
        let rewards: Vec<f64> = (0..m).map(|_| rng.random_range(-5.0..5.0)).collect();
        let bootstrap = if terminated {
            0.0
        } else {
            rng.random_range(-5.0..5.0)
        };
        let g = rng.random_range(0.5..1.0);
        let seg = RewardSegment::new(rewards.clone(), bootstrap, terminated).unwrap();
        let got = n_step_return(&seg, DiscountSpec::new(g).unwrap(), n).unwrap();
        let want = naive_n_step(&rewards, bootstrap, g);
        let denom = want.abs().max(1.0);
        worst = worst.max((got - want).abs() / denom);
    }
    result(
        "n_step_kernel",
        worst < 1e-12,
        format!("max rel deviation {worst:.3e} over 500 random segments"),
    )
}

fn weighted_sum_lambda(rewards: &[f64], values: &[f64], g: f64, lam: f64, h: usize) -> f64 {
    let h = h.min(rewards.len());
    let partial = |n: usize| {
        let mut acc = 0.0;
        for j in 0..n {
            acc += g.powi(j as i32) * rewards[j];
        }
        acc + g.powi(n as i32) * values[n - 1]
    };
    let mut total = 0.0;
    for n in 1..h {
        total += (1.0 - lam) * lam.powi(n as i32 - 1) * partial(n);
    }
    total + lam.powi(h as i32 - 1) * partial(h)
}

fn check_lambda_kernel() -> CheckResult {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let mut worst = 0.0f64;
    for _ in 0..300 {
        let len = rng.random_range(1..=30usize);
        let h = rng.random_range(1..=40usize);
        let rewards: Vec<f64> = (0..len).map(|_| rng.random_range(-2.0..2.0)).collect();
        let values: Vec<f64> = (0..len).map(|_| rng.random_range(-2.0..2.0)).collect();
        let g = rng.random_range(0.5..1.0);
        let lam = rng.random::<f64>();
        let spec = LambdaSpec::new(lam, h).unwrap();
        let got = lambda_return(&rewards, &values, DiscountSpec::new(g).unwrap(), spec).unwrap();
        let want = weighted_sum_lambda(&rewards, &values, g, lam, h);
        worst = worst.max((got - want).abs() / want.abs().max(1.0));
        // λ = 0 must collapse to the one-step return.
        let zero = lambda_return(
            &rewards,
            &values,
            DiscountSpec::new(g).unwrap(),
            LambdaSpec::new(0.0, h).unwrap(),
        )
        .unwrap();
        let one_step = rewards[0] + g * values[0];
        worst = worst.max((zero - one_step).abs() / one_step.abs().max(1.0));
    }
    result(
        "lambda_kernel",
        worst < 1e-10,
        format!("max rel deviation {worst:.3e} over 300 random episodes"),
    )
}

fn check_gradients() -> CheckResult {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let mut worst = 0.0f64;
    for trial in 0..20 {
        let obs_dim = 3 + trial % 4;
        let cfg = EnsembleConfig {
            obs_dim,
            action_count: 2 + trial % 3,
            head_specs: vec![HeadSpec::new(1), HeadSpec::new(3)],
            backend: Backend::Mlp { hidden: 8 },
            optimizer: Optimizer::Sgd,
            trunk_grad_scale_by_heads: true,
        };
        let q = EnsembleQFunction::new(cfg, &mut rng);
        let obs: Vec<f64> = (0..obs_dim).map(|_| rng.random_range(-1.0..1.0)).collect();
        let sample = (obs, rng.random_range(0..2usize), rng.random_range(-2.0..2.0));
        let head = trial % 2;
        match q.gradient_check(head, &sample) {
            Ok(dev) => worst = worst.max(dev),
            Err(e) => {
                return result("gradient_check", false, format!("error: {e}"));
            }
        }
    }
    result(
        "gradient_check",
        worst < 1e-4,
        format!("max analytic/numeric deviation {worst:.3e} over 20 random nets"),
    )
}

fn seeded_buffer(episodes: usize, episode_len: usize) -> ReplayBuffer {
    let mut buf = ReplayBuffer::new(episodes * episode_len);
    for ep in 0..episodes {
        for step in 0..episode_len {
            buf.append(Transition {
                obs: vec![ep as f64, step as f64],
                action: step % 2,
                reward: (ep * episode_len + step) as f64,
                next_obs: vec![ep as f64, step as f64 + 1.0],
                terminal: step + 1 == episode_len,
                episode_id: ep as u64,
                step_index: step as u64,
            })
            .unwrap();
        }
    }
    buf
}

fn check_replay_uniformity() -> CheckResult {
    let buf = seeded_buffer(10, 10);
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let draws = 100_000usize;
    let mut counts = vec![0u64; buf.len()];
    for &s in &buf.sample_starts(&mut rng, draws).unwrap() {
        counts[s] += 1;
    }
    let p = 1.0 / buf.len() as f64;
    let expected = draws as f64 * p;
    let sigma = (draws as f64 * p * (1.0 - p)).sqrt();
    let worst = counts
        .iter()
        .map(|&c| (c as f64 - expected).abs() / sigma)
        .fold(0.0f64, f64::max);
    result(
        "replay_uniformity",
        worst < 4.0,
        format!("max per-slot z-score {worst:.2} over {draws} draws"),
    )
}

fn check_segment_boundaries() -> CheckResult {
    let episode_len = 7;
    let buf = seeded_buffer(5, episode_len);
    for start in 0..buf.len() {
        for n in 1..=10usize {
            let seg = buf.segment_at(start, n).unwrap();
            let first = buf.get(start).unwrap();
            for off in 0..seg.rewards.len() {
                let t = buf.get(start + off).unwrap();
                if t.episode_id != first.episode_id {
                    return result(
                        "segment_boundaries",
                        false,
                        format!("segment at {start} (n={n}) crossed an episode boundary"),
                    );
                }
            }
            let remaining = episode_len - (start % episode_len);
            if seg.rewards.len() > remaining {
                return result(
                    "segment_boundaries",
                    false,
                    format!("segment at {start} (n={n}) ran past episode end"),
                );
            }
        }
    }
    result(
        "segment_boundaries",
        true,
        "no segment crossed an episode boundary (exhaustive over a 5x7 buffer)".to_string(),
    )
}

pub fn run_checks() -> Vec<CheckResult> {
    vec![
        check_n_step_kernel(),
        check_lambda_kernel(),
        check_gradients(),
        check_replay_uniformity(),
        check_segment_boundaries(),
    ]
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn all_checks_pass() {
        for check in run_checks() {
            assert!(check.passed, "{}: {}", check.name, check.detail);
        }
    }
}
