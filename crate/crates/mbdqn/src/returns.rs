//! Return-estimation kernels: truncated n-step returns, per-head bootstrapped
//! targets, and truncated λ-returns.
//!
//! Everything here is a pure function over immutable inputs; no networks or
//! buffers are involved. The indexing convention is the standard one: an
//! n-step return accumulates n real rewards and bootstraps with `γ^n` from the
//! state n steps ahead, so n = 1 reproduces the classic one-step TD target.

use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum ReturnError {
    #[error("backup length must be >= 1, got {0}")]
    InvalidHorizon(usize),
    #[error("invalid segment: {0}")]
    InvalidSegment(String),
    #[error("discount factor must be in (0, 1], got {0}")]
    InvalidDiscount(f64),
    #[error("lambda must be in [0, 1], got {0}")]
    InvalidLambda(f64),
}

/// Discount factor γ ∈ (0, 1].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DiscountSpec {
    gamma: f64,
}

impl DiscountSpec {
    pub fn new(gamma: f64) -> Result<Self, ReturnError> {
        if !(gamma > 0.0 && gamma <= 1.0) {
            return Err(ReturnError::InvalidDiscount(gamma));
        }
        Ok(Self { gamma })
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }
}

/// λ-return parameters: mixing weight and truncation horizon for the λ-sum.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LambdaSpec {
    lambda: f64,
    max_horizon: usize,
}

impl LambdaSpec {
    pub fn new(lambda: f64, max_horizon: usize) -> Result<Self, ReturnError> {
        if !(0.0..=1.0).contains(&lambda) {
            return Err(ReturnError::InvalidLambda(lambda));
        }
        if max_horizon < 1 {
            return Err(ReturnError::InvalidHorizon(max_horizon));
        }
        Ok(Self {
            lambda,
            max_horizon,
        })
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    pub fn max_horizon(&self) -> usize {
        self.max_horizon
    }
}

/// A run of consecutive rewards plus the value estimate at the segment's end.
///
/// `terminated` means the segment hit the episode end before the requested
/// horizon, in which case the continuation value is zero by definition.
#[derive(Debug, Clone, PartialEq)]
pub struct RewardSegment {
    pub rewards: Vec<f64>,
    pub bootstrap_value: f64,
    pub terminated: bool,
}

impl RewardSegment {
    pub fn new(
        rewards: Vec<f64>,
        bootstrap_value: f64,
        terminated: bool,
    ) -> Result<Self, ReturnError> {
        if rewards.is_empty() {
            return Err(ReturnError::InvalidSegment("empty rewards list".into()));
        }
        if terminated && bootstrap_value != 0.0 {
            return Err(ReturnError::InvalidSegment(
                "terminated segment must have zero bootstrap value".into(),
            ));
        }
        Ok(Self {
            rewards,
            bootstrap_value,
            terminated,
        })
    }

    pub fn effective_length(&self) -> usize {
        self.rewards.len()
    }
}

/// Truncated n-step return: Σ_{j<m} γ^j r_j + γ^m v, with m the number of
/// real rewards in the segment (m ≤ n; m < n only when the episode ended).
pub fn n_step_return(
    segment: &RewardSegment,
    gamma: DiscountSpec,
    n: usize,
) -> Result<f64, ReturnError> {
    if n < 1 {
        return Err(ReturnError::InvalidHorizon(n));
    }
    let m = segment.effective_length();
    if m == 0 {
        return Err(ReturnError::InvalidSegment("empty rewards list".into()));
    }
    if m > n {
        return Err(ReturnError::InvalidSegment(format!(
            "segment holds {m} rewards but horizon is {n}"
        )));
    }
    let g = gamma.gamma();
    let mut acc = 0.0;
    let mut discount = 1.0;
    for &r in &segment.rewards {
        acc += discount * r;
        discount *= g;
    }
    Ok(acc + discount * segment.bootstrap_value)
}

/// Truncated λ-return over an aligned (rewards, bootstrap values) pair.
///
/// `bootstrap_values[j]` is the value estimate at the state following
/// `rewards[j]`. Computed by the backward recursion
/// `G_t = r_t + γ[(1−λ)·v_{t+1} + λ·G_{t+1}]`, with the tail beyond
/// `max_horizon` absorbed into the final n-step return.
pub fn lambda_return(
    rewards: &[f64],
    bootstrap_values: &[f64],
    gamma: DiscountSpec,
    spec: LambdaSpec,
) -> Result<f64, ReturnError> {
    if rewards.is_empty() {
        return Err(ReturnError::InvalidSegment("empty rewards list".into()));
    }
    if rewards.len() != bootstrap_values.len() {
        return Err(ReturnError::InvalidSegment(format!(
            "{} rewards vs {} bootstrap values",
            rewards.len(),
            bootstrap_values.len()
        )));
    }
    let h = spec.max_horizon().min(rewards.len());
    let g = gamma.gamma();
    let lam = spec.lambda();
    // Tail: the H-step return bootstraps plainly from v[H-1].
    let mut acc = rewards[h - 1] + g * bootstrap_values[h - 1];
    for j in (0..h - 1).rev() {
        acc = rewards[j] + g * ((1.0 - lam) * bootstrap_values[j] + lam * acc);
    }
    Ok(acc)
}

/// Per-head bootstrapped target: the n_k-step return with the double-Q greedy
/// value at the bootstrap state. A terminal segment overrides the supplied
/// value with zero.
pub fn per_head_target(
    segment: &RewardSegment,
    gamma: DiscountSpec,
    n_k: usize,
    greedy_next_value: f64,
) -> Result<f64, ReturnError> {
    let bootstrap = if segment.terminated {
        0.0
    } else {
        greedy_next_value
    };
    let effective = RewardSegment {
        rewards: segment.rewards.clone(),
        bootstrap_value: bootstrap,
        terminated: segment.terminated,
    };
    n_step_return(&effective, gamma, n_k)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn gamma(g: f64) -> DiscountSpec {
        DiscountSpec::new(g).unwrap()
    }

    /// Independent oracle: explicit discounted loop over the segment.
    fn naive_n_step(rewards: &[f64], bootstrap: f64, g: f64) -> f64 {
        let mut total = 0.0;
        for (j, &r) in rewards.iter().enumerate() {
            total += g.powi(j as i32) * r;
        }
        total + g.powi(rewards.len() as i32) * bootstrap
    }

    /// Independent oracle: explicit (1−λ)-weighted sum of all n-step returns
    /// up to the truncation horizon.
    fn weighted_sum_lambda(rewards: &[f64], values: &[f64], g: f64, lam: f64, h: usize) -> f64 {
        let h = h.min(rewards.len());
        let mut total = 0.0;
        for n in 1..h {
            let gn = naive_n_step(&rewards[..n], values[n - 1], g);
            total += (1.0 - lam) * lam.powi((n - 1) as i32) * gn;
        }
        let gh = naive_n_step(&rewards[..h], values[h - 1], g);
        total + lam.powi((h - 1) as i32) * gh
    }

    #[test]
    fn zero_rewards_terminal_is_zero() {
        let seg = RewardSegment::new(vec![0.0, 0.0, 0.0], 0.0, true).unwrap();
        assert_eq!(n_step_return(&seg, gamma(0.9), 3).unwrap(), 0.0);
    }

    #[test]
    fn one_step_reduces_to_td_target() {
        let seg = RewardSegment::new(vec![0.7], 2.5, false).unwrap();
        let got = n_step_return(&seg, gamma(0.9), 1).unwrap();
        assert!((got - (0.7 + 0.9 * 2.5)).abs() < 1e-15);
    }

    #[test]
    fn three_step_hand_value() {
        let seg = RewardSegment::new(vec![1.0, 2.0, 4.0], 10.0, false).unwrap();
        let got = n_step_return(&seg, gamma(0.5), 3).unwrap();
        assert!((got - 4.25).abs() < 1e-15);
    }

    #[test]
    fn invalid_horizon_rejected() {
        let seg = RewardSegment::new(vec![1.0], 0.0, false).unwrap();
        assert_eq!(
            n_step_return(&seg, gamma(0.9), 0),
            Err(ReturnError::InvalidHorizon(0))
        );
    }

    #[test]
    fn empty_segment_rejected() {
        assert!(RewardSegment::new(vec![], 0.0, false).is_err());
    }

    #[test]
    fn terminated_segment_rejects_nonzero_bootstrap() {
        assert!(RewardSegment::new(vec![1.0], 0.5, true).is_err());
    }

    #[test]
    fn lambda_zero_collapses_to_one_step() {
        let rewards = [0.3, 1.0, -0.5];
        let values = [2.0, 1.0, 0.5];
        let spec = LambdaSpec::new(0.0, 100).unwrap();
        let got = lambda_return(&rewards, &values, gamma(0.9), spec).unwrap();
        assert!((got - (0.3 + 0.9 * 2.0)).abs() < 1e-14);
    }

    #[test]
    fn lambda_one_collapses_to_monte_carlo() {
        let rewards = [1.0, 0.5, 0.25];
        let values = [7.0, 3.0, 0.0]; // terminal episode: last value 0
        let spec = LambdaSpec::new(1.0, 100).unwrap();
        let got = lambda_return(&rewards, &values, gamma(0.5), spec).unwrap();
        let mc = 1.0 + 0.5 * 0.5 + 0.25 * 0.25;
        assert!((got - mc).abs() < 1e-15);
    }

    #[test]
    fn lambda_half_hand_value() {
        let rewards = [1.0, 1.0];
        let values = [3.0, 0.0];
        let spec = LambdaSpec::new(0.5, 100).unwrap();
        let got = lambda_return(&rewards, &values, gamma(1.0), spec).unwrap();
        assert!((got - 3.0).abs() < 1e-15);
    }

    #[test]
    fn lambda_misaligned_lists_rejected() {
        let spec = LambdaSpec::new(0.5, 100).unwrap();
        assert!(lambda_return(&[1.0, 2.0], &[0.0], gamma(0.9), spec).is_err());
    }

    #[test]
    fn per_head_target_terminal_overrides_greedy_value() {
        let seg = RewardSegment::new(vec![1.0, 2.0], 0.0, true).unwrap();
        let with_value = per_head_target(&seg, gamma(0.9), 3, 99.0).unwrap();
        let without = per_head_target(&seg, gamma(0.9), 3, 0.0).unwrap();
        assert_eq!(with_value, without);
    }

    #[test]
    fn per_head_target_one_step() {
        let seg = RewardSegment::new(vec![0.4], 0.0, false).unwrap();
        let got = per_head_target(&seg, gamma(0.9), 1, 1.5).unwrap();
        assert!((got - (0.4 + 0.9 * 1.5)).abs() < 1e-15);
    }

    #[test]
    fn per_head_target_three_step_hand_value() {
        let seg = RewardSegment::new(vec![0.0, 0.0, 1.0], 0.0, false).unwrap();
        let got = per_head_target(&seg, gamma(0.99), 3, 2.0).unwrap();
        assert!((got - 2.920698).abs() < 1e-9);
    }

    proptest! {
        #[test]
        fn n_step_matches_naive_oracle(
            rewards in proptest::collection::vec(-10.0f64..10.0, 1..=10),
            bootstrap in -10.0f64..10.0,
            g in prop_oneof![Just(0.5), Just(0.9), Just(0.99), Just(1.0)],
        ) {
            let n = rewards.len();
            let seg = RewardSegment::new(rewards.clone(), bootstrap, false).unwrap();
            let got = n_step_return(&seg, gamma(g), n).unwrap();
            let want = naive_n_step(&rewards, bootstrap, g);
            prop_assert!((got - want).abs() <= 1e-12 * want.abs().max(1.0));
        }

        #[test]
        fn lambda_recursion_matches_weighted_sum(
            rewards in proptest::collection::vec(-5.0f64..5.0, 1..=20),
            g in prop_oneof![Just(0.5), Just(0.9), Just(1.0)],
            lam in prop_oneof![Just(0.0), Just(0.25), Just(0.5), Just(0.9), Just(1.0)],
        ) {
            let values: Vec<f64> = rewards.iter().map(|r| r * 0.3 + 1.0).collect();
            let spec = LambdaSpec::new(lam, 100).unwrap();
            let got = lambda_return(&rewards, &values, gamma(g), spec).unwrap();
            let want = weighted_sum_lambda(&rewards, &values, g, lam, 100);
            prop_assert!((got - want).abs() <= 1e-10 * want.abs().max(1.0));
        }

        #[test]
        fn nonnegative_inputs_give_nonnegative_return(
            rewards in proptest::collection::vec(0.0f64..10.0, 1..=10),
            bootstrap in 0.0f64..10.0,
        ) {
            let n = rewards.len();
            let seg = RewardSegment::new(rewards, bootstrap, false).unwrap();
            prop_assert!(n_step_return(&seg, gamma(0.9), n).unwrap() >= 0.0);
        }
    }
}
