//! Training, paired-agent, and comparison runs with seeded reproducibility.
//!
//! Every run derives three independent random streams from its seed: one for
//! acting and head sampling, one for replay sampling during updates, and one
//! for learner initialization in paired runs. Keeping the streams separate
//! makes the environment trajectory independent of the update cadence.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::agent::{Agent, AgentConfig};
use crate::replay::{ReplayBuffer, Transition};

use super::config::RunConfig;
use super::metrics::{write_metrics_csv, EvalRow, RunMetrics, VisitationMap};
use super::HarnessError;

const UPDATE_STREAM_SALT: u64 = 0x9e37_79b9_7f4a_7c15;
const LEARNER_STREAM_SALT: u64 = 0x5851_f42d_4c95_7f2d;

#[derive(Debug, Clone)]
pub struct SeedOutcome {
    pub seed: u64,
    pub metrics: RunMetrics,
    pub visits: VisitationMap,
}

fn ensure_writable(dir: &Path) -> Result<(), HarnessError> {
    std::fs::create_dir_all(dir)?;
    let probe = dir.join(".write_probe");
    std::fs::write(&probe, b"ok")?;
    std::fs::remove_file(&probe)?;
    Ok(())
}

/// Greedy evaluation on a fresh environment instance: majority-vote episodes
/// plus one greedy episode per head. Never mutates the agent or the buffer.
fn evaluate(
    agent: &Agent,
    cfg: &RunConfig,
    seed: u64,
    step: u64,
    unique_states: usize,
) -> Result<EvalRow, HarnessError> {
    let mut env = cfg.env.build()?;
    let mut returns = Vec::with_capacity(cfg.eval_episodes);
    let mut lengths = Vec::with_capacity(cfg.eval_episodes);
    let mut goals = 0usize;
    for _ in 0..cfg.eval_episodes {
        let mut obs = env.reset();
        let mut ep_return = 0.0;
        let mut ep_len = 0u64;
        loop {
            let action = agent.act_majority(&obs)?;
            let out = env.step(action)?;
            ep_return += out.reward;
            ep_len += 1;
            obs = out.obs;
            if out.terminal {
                break;
            }
        }
        if env.at_goal() {
            goals += 1;
        }
        returns.push(ep_return);
        lengths.push(ep_len as f64);
    }
    let n = returns.len().max(1) as f64;
    let mean = returns.iter().sum::<f64>() / n;
    let stderr = if returns.len() > 1 {
        let var = returns.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / (n - 1.0);
        (var / n).sqrt()
    } else {
        0.0
    };
    let mut head_returns = Vec::with_capacity(agent.config().head_count());
    for k in 0..agent.config().head_count() {
        let mut obs = env.reset();
        let mut ep_return = 0.0;
        loop {
            let action = agent.act_greedy_head(k, &obs)?;
            let out = env.step(action)?;
            ep_return += out.reward;
            obs = out.obs;
            if out.terminal {
                break;
            }
        }
        head_returns.push(ep_return);
    }
    Ok(EvalRow {
        seed,
        step,
        majority_return: mean,
        return_stderr: stderr,
        head_returns,
        unique_states,
        mean_episode_len: lengths.iter().sum::<f64>() / lengths.len().max(1) as f64,
        goal_rate: goals as f64 / cfg.eval_episodes.max(1) as f64,
    })
}

/// Trains one seed and returns the trained agent alongside its metrics.
pub fn train_seed(cfg: &RunConfig, seed: u64) -> Result<(Agent, SeedOutcome), HarnessError> {
    let mut env = cfg.env.build()?;
    let mut act_rng = ChaCha8Rng::seed_from_u64(seed);
    let mut update_rng = ChaCha8Rng::seed_from_u64(seed ^ UPDATE_STREAM_SALT);
    let mut agent = Agent::new(
        cfg.agent.clone(),
        env.obs_dim(),
        env.action_count(),
        &mut act_rng,
    )?;
    let mut buf = ReplayBuffer::new(cfg.agent.buffer_capacity);
    let (w, h) = env.grid_size();
    let mut visits = VisitationMap::new(w, h);
    let mut rows = Vec::new();
    rows.push(evaluate(&agent, cfg, seed, 0, 0)?);
    let mut obs = env.reset();
    let mut ctx = agent.begin_episode(&mut act_rng);
    let mut episode_id = 0u64;
    let mut step_index = 0u64;
    for t in 1..=cfg.total_env_steps {
        let action = agent.act(&ctx, &obs, &mut act_rng)?;
        let out = env.step(action)?;
        buf.append(Transition {
            obs: obs.clone(),
            action,
            reward: out.reward,
            next_obs: out.obs.clone(),
            terminal: out.terminal,
            episode_id,
            step_index,
        })?;
        visits.record(out.cell);
        agent.note_env_step();
        for _ in 0..agent.take_due_updates() {
            agent.update_step(&buf, &mut update_rng)?;
        }
        agent.maybe_sync(&mut buf)?;
        if out.terminal {
            episode_id += 1;
            step_index = 0;
            obs = env.reset();
            ctx = agent.begin_episode(&mut act_rng);
        } else {
            step_index += 1;
            obs = out.obs;
        }
        if t % cfg.eval_period == 0 {
            rows.push(evaluate(&agent, cfg, seed, t, visits.unique_states())?);
        }
    }
    Ok((
        agent,
        SeedOutcome {
            seed,
            metrics: RunMetrics { seed, rows },
            visits,
        },
    ))
}

fn write_outcome(
    cfg: &RunConfig,
    label: &str,
    outcome: &SeedOutcome,
    with_visits: bool,
) -> Result<(), HarnessError> {
    let stem = format!("{}{}_seed{}", cfg.experiment, label, outcome.seed);
    write_metrics_csv(
        &cfg.out_dir.join(format!("{stem}.csv")),
        cfg.agent.head_count(),
        &outcome.metrics.rows,
    )?;
    if with_visits {
        outcome
            .visits
            .write_csv(&cfg.out_dir.join(format!("{stem}_visits.csv")))?;
        outcome
            .visits
            .write_pgm(&cfg.out_dir.join(format!("{stem}_visits.pgm")))?;
    }
    Ok(())
}

/// Trains one agent per seed, evaluating on the configured cadence and
/// writing metrics CSV and visitation heatmap files per seed.
pub fn run_training(cfg: &RunConfig) -> Result<Vec<SeedOutcome>, HarnessError> {
    ensure_writable(&cfg.out_dir)?;
    let mut outcomes = Vec::with_capacity(cfg.seeds.len());
    for &seed in &cfg.seeds {
        let (_, outcome) = train_seed(cfg, seed)?;
        write_outcome(cfg, "", &outcome, true)?;
        outcomes.push(outcome);
    }
    Ok(outcomes)
}

/// Paired run: the generator acts and fills the shared buffer; the learner
/// only updates from it. Returns (generator, learner) outcomes per seed.
pub fn run_paired(
    cfg: &RunConfig,
    learner_cfg: &AgentConfig,
) -> Result<(Vec<SeedOutcome>, Vec<SeedOutcome>), HarnessError> {
    ensure_writable(&cfg.out_dir)?;
    let mut generator_outcomes = Vec::new();
    let mut learner_outcomes = Vec::new();
    for &seed in &cfg.seeds {
        let paired = run_paired_seed(cfg, learner_cfg, seed)?;
        let (gen_out, learn_out) = (paired.generator_outcome, paired.learner_outcome);
        write_outcome(cfg, "_generator", &gen_out, true)?;
        let learner_run_cfg = RunConfig {
            agent: learner_cfg.clone(),
            ..cfg.clone()
        };
        write_outcome(&learner_run_cfg, "_learner", &learn_out, false)?;
        generator_outcomes.push(gen_out);
        learner_outcomes.push(learn_out);
    }
    Ok((generator_outcomes, learner_outcomes))
}

struct PairedSeed {
    #[cfg(test)]
    generator: Agent,
    #[cfg(test)]
    learner: Agent,
    generator_outcome: SeedOutcome,
    learner_outcome: SeedOutcome,
}

fn run_paired_seed(
    cfg: &RunConfig,
    learner_cfg: &AgentConfig,
    seed: u64,
) -> Result<PairedSeed, HarnessError> {
    let mut env = cfg.env.build()?;
    let mut act_rng = ChaCha8Rng::seed_from_u64(seed);
    // Identical update streams so both agents draw the same start indices.
    let mut gen_update_rng = ChaCha8Rng::seed_from_u64(seed ^ UPDATE_STREAM_SALT);
    let mut learn_update_rng = ChaCha8Rng::seed_from_u64(seed ^ UPDATE_STREAM_SALT);
    let mut learner_init_rng = ChaCha8Rng::seed_from_u64(seed ^ LEARNER_STREAM_SALT);
    let mut generator = Agent::new(
        cfg.agent.clone(),
        env.obs_dim(),
        env.action_count(),
        &mut act_rng,
    )?;
    let mut learner = Agent::new(
        learner_cfg.clone(),
        env.obs_dim(),
        env.action_count(),
        &mut learner_init_rng,
    )?;
    let mut buf = ReplayBuffer::new(cfg.agent.buffer_capacity);
    let (w, h) = env.grid_size();
    let mut visits = VisitationMap::new(w, h);
    let mut gen_rows = vec![evaluate(&generator, cfg, seed, 0, 0)?];
    let learner_run_cfg = RunConfig {
        agent: learner_cfg.clone(),
        ..cfg.clone()
    };
    let mut learn_rows = vec![evaluate(&learner, &learner_run_cfg, seed, 0, 0)?];
    let mut obs = env.reset();
    let mut ctx = generator.begin_episode(&mut act_rng);
    let mut episode_id = 0u64;
    let mut step_index = 0u64;
    for t in 1..=cfg.total_env_steps {
        let action = generator.act(&ctx, &obs, &mut act_rng)?;
        let out = env.step(action)?;
        buf.append(Transition {
            obs: obs.clone(),
            action,
            reward: out.reward,
            next_obs: out.obs.clone(),
            terminal: out.terminal,
            episode_id,
            step_index,
        })?;
        visits.record(out.cell);
        generator.note_env_step();
        learner.note_env_step();
        for _ in 0..generator.take_due_updates() {
            generator.update_step(&buf, &mut gen_update_rng)?;
        }
        for _ in 0..learner.take_due_updates() {
            learner.update_step(&buf, &mut learn_update_rng)?;
        }
        generator.maybe_sync(&mut buf)?;
        learner.maybe_sync(&mut buf)?;
        if out.terminal {
            episode_id += 1;
            step_index = 0;
            obs = env.reset();
            ctx = generator.begin_episode(&mut act_rng);
        } else {
            step_index += 1;
            obs = out.obs;
        }
        if t % cfg.eval_period == 0 {
            let unique = visits.unique_states();
            gen_rows.push(evaluate(&generator, cfg, seed, t, unique)?);
            learn_rows.push(evaluate(&learner, &learner_run_cfg, seed, t, unique)?);
        }
    }
    let empty = VisitationMap::new(w, h);
    #[cfg(not(test))]
    let (_, _) = (generator, learner);
    Ok(PairedSeed {
        #[cfg(test)]
        generator,
        #[cfg(test)]
        learner,
        generator_outcome: SeedOutcome {
            seed,
            metrics: RunMetrics {
                seed,
                rows: gen_rows,
            },
            visits,
        },
        learner_outcome: SeedOutcome {
            seed,
            metrics: RunMetrics {
                seed,
                rows: learn_rows,
            },
            visits: empty,
        },
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct SummaryRow {
    pub config: String,
    pub final_mean_return: f64,
    pub auc: f64,
    pub steps_to_threshold: Option<u64>,
}

#[derive(Debug, Clone)]
pub struct ComparisonSummary {
    pub threshold: f64,
    pub rows: Vec<SummaryRow>,
}

/// Mean majority return over seeds at each eval step.
fn mean_curve(outcomes: &[SeedOutcome]) -> Vec<(u64, f64)> {
    if outcomes.is_empty() {
        return Vec::new();
    }
    let points = outcomes[0].metrics.rows.len();
    (0..points)
        .map(|i| {
            let step = outcomes[0].metrics.rows[i].step;
            let mean = outcomes
                .iter()
                .map(|o| o.metrics.rows[i].majority_return)
                .sum::<f64>()
                / outcomes.len() as f64;
            (step, mean)
        })
        .collect()
}

fn curve_auc(curve: &[(u64, f64)]) -> f64 {
    curve
        .windows(2)
        .map(|w| (w[1].0 - w[0].0) as f64 * (w[0].1 + w[1].1) / 2.0)
        .sum()
}

pub fn summarize(
    names_and_outcomes: &[(String, Vec<SeedOutcome>)],
    threshold: Option<f64>,
) -> ComparisonSummary {
    let curves: Vec<(String, Vec<(u64, f64)>)> = names_and_outcomes
        .iter()
        .map(|(name, o)| (name.clone(), mean_curve(o)))
        .collect();
    let max_final = curves
        .iter()
        .filter_map(|(_, c)| c.last().map(|&(_, v)| v))
        .fold(f64::NEG_INFINITY, f64::max);
    let threshold = threshold.unwrap_or(0.9 * max_final);
    let mut rows: Vec<SummaryRow> = curves
        .iter()
        .map(|(name, curve)| SummaryRow {
            config: name.clone(),
            final_mean_return: curve.last().map(|&(_, v)| v).unwrap_or(f64::NAN),
            auc: curve_auc(curve),
            steps_to_threshold: curve
                .iter()
                .find(|&&(_, v)| v >= threshold)
                .map(|&(s, _)| s),
        })
        .collect();
    rows.sort_by(|a, b| b.auc.partial_cmp(&a.auc).unwrap_or(std::cmp::Ordering::Equal));
    ComparisonSummary { threshold, rows }
}

/// Runs each config over its seeds and emits a merged per-eval CSV plus a
/// summary table ordered by area under the evaluation curve.
pub fn run_comparison(
    configs: &[RunConfig],
    threshold: Option<f64>,
    out_dir: &Path,
) -> Result<ComparisonSummary, HarnessError> {
    let first = configs
        .first()
        .ok_or_else(|| HarnessError::Config("no configs to compare".into()))?;
    for cfg in configs {
        if cfg.env != first.env {
            return Err(HarnessError::Config(
                "compared configs must share one environment".into(),
            ));
        }
        if cfg.total_env_steps != first.total_env_steps || cfg.seeds != first.seeds {
            return Err(HarnessError::Config(
                "compared configs must share step budget and seeds".into(),
            ));
        }
    }
    ensure_writable(out_dir)?;
    let mut named = Vec::new();
    for cfg in configs {
        let outcomes = run_training(cfg)?;
        named.push((cfg.experiment.clone(), outcomes));
    }
    let summary = summarize(&named, threshold);
    write_comparison_files(&named, &summary, out_dir)?;
    Ok(summary)
}

pub fn write_comparison_files(
    named: &[(String, Vec<SeedOutcome>)],
    summary: &ComparisonSummary,
    out_dir: &Path,
) -> Result<(), HarnessError> {
    use std::io::Write;
    let mut merged = std::io::BufWriter::new(std::fs::File::create(out_dir.join("comparison.csv"))?);
    writeln!(
        merged,
        "config,seed,step,majority_return,return_stderr,unique_states,mean_episode_len"
    )?;
    for (name, outcomes) in named {
        for outcome in outcomes {
            for row in &outcome.metrics.rows {
                writeln!(
                    merged,
                    "{},{},{},{:.6},{:.6},{},{:.6}",
                    name,
                    row.seed,
                    row.step,
                    row.majority_return,
                    row.return_stderr,
                    row.unique_states,
                    row.mean_episode_len
                )?;
            }
        }
    }
    merged.flush()?;
    let mut sum = std::io::BufWriter::new(std::fs::File::create(
        out_dir.join("comparison_summary.csv"),
    )?);
    writeln!(sum, "config,final_mean_return,auc,steps_to_threshold")?;
    for row in &summary.rows {
        writeln!(
            sum,
            "{},{:.6},{:.6},{}",
            row.config,
            row.final_mean_return,
            row.auc,
            row.steps_to_threshold
                .map(|s| s.to_string())
                .unwrap_or_default()
        )?;
    }
    sum.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::agent::{homogeneous_heads, AgentMode, EpsilonSchedule};
    use crate::approximator::{Backend, HeadSpec, Optimizer};
    use crate::envs::{ObservationMode, RewardMode};
    use crate::harness::config::EnvSpec;

    fn small_cfg(out_dir: &Path) -> RunConfig {
        RunConfig {
            experiment: "t".into(),
            env: EnvSpec::Maze {
                width: 4,
                height: 4,
                layout: None,
                reward_mode: RewardMode::Dense,
                observation: ObservationMode::OneHot,
                max_episode_steps: 20,
                step_penalty: 1.0,
                reward_max: 1.0,
            },
            agent: AgentConfig {
                gamma: 0.9,
                head_specs: homogeneous_heads(2, 1),
                epsilon: EpsilonSchedule::constant(0.2),
                learning_rate: 0.2,
                target_sync_period: 100,
                batch_size: 8,
                updates_per_env_step: 0.5,
                buffer_capacity: 4096,
                mode: AgentMode::Ensemble,
                lambda_spec: None,
                backend: Backend::Tabular { init_value: 0.0 },
                optimizer: Optimizer::Sgd,
                trunk_grad_scale_by_heads: true,
            },
            total_env_steps: 500,
            eval_period: 250,
            eval_episodes: 3,
            seeds: vec![7],
            out_dir: out_dir.to_path_buf(),
        }
    }

    #[test]
    fn writes_metrics_and_heatmap_files() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = small_cfg(dir.path());
        let outcomes = run_training(&cfg).unwrap();
        assert_eq!(outcomes.len(), 1);
        // step 0 plus one row per eval period
        assert_eq!(outcomes[0].metrics.rows.len(), 3);
        for suffix in ["", "_visits.csv", "_visits.pgm"] {
            let name = if suffix.is_empty() {
                "t_seed7.csv".to_string()
            } else {
                format!("t_seed7{suffix}")
            };
            assert!(dir.path().join(&name).exists(), "missing {name}");
        }
    }

    #[test]
    fn heatmap_counts_conserve_env_steps() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = small_cfg(dir.path());
        let outcomes = run_training(&cfg).unwrap();
        assert_eq!(outcomes[0].visits.total(), cfg.total_env_steps);
    }

    #[test]
    fn zero_step_run_has_single_eval_row_and_empty_heatmap() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = small_cfg(dir.path());
        cfg.total_env_steps = 0;
        let outcomes = run_training(&cfg).unwrap();
        let rows = &outcomes[0].metrics.rows;
        assert_eq!(rows.len(), 1);
        assert_eq!(rows[0].step, 0);
        assert_eq!(outcomes[0].visits.total(), 0);
    }

    #[test]
    fn repeated_seed_is_bitwise_identical() {
        let d1 = tempfile::tempdir().unwrap();
        let d2 = tempfile::tempdir().unwrap();
        run_training(&small_cfg(d1.path())).unwrap();
        run_training(&small_cfg(d2.path())).unwrap();
        for name in ["t_seed7.csv", "t_seed7_visits.csv", "t_seed7_visits.pgm"] {
            let a = std::fs::read(d1.path().join(name)).unwrap();
            let b = std::fs::read(d2.path().join(name)).unwrap();
            assert_eq!(a, b, "{name} differs between identical runs");
        }
    }

    #[test]
    fn paired_same_config_updates_coincide_batch_for_batch() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = small_cfg(dir.path());
        let paired = run_paired_seed(&cfg, &cfg.agent, 7).unwrap();
        assert!(!paired.generator.update_start_log.is_empty());
        assert_eq!(
            paired.generator.update_start_log,
            paired.learner.update_start_log
        );
    }

    #[test]
    fn zero_lr_learner_stays_at_initialization_performance() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = small_cfg(dir.path());
        let mut frozen = cfg.agent.clone();
        frozen.learning_rate = 0.0;
        let paired = run_paired_seed(&cfg, &frozen, 7).unwrap();
        let rows = &paired.learner_outcome.metrics.rows;
        for row in rows {
            assert_eq!(row.majority_return, rows[0].majority_return);
        }
    }

    #[test]
    fn comparison_rejects_mismatched_envs() {
        let dir = tempfile::tempdir().unwrap();
        let a = small_cfg(dir.path());
        let mut b = small_cfg(dir.path());
        b.env = EnvSpec::Chain {
            states: 4,
            terminal_reward: 1.0,
            step_reward: 0.0,
            max_episode_steps: 20,
        };
        let err = run_comparison(&[a, b], None, dir.path()).unwrap_err();
        assert!(matches!(err, HarnessError::Config(_)));
    }

    #[test]
    fn self_comparison_gives_identical_summary_rows() {
        let dir = tempfile::tempdir().unwrap();
        let mut a = small_cfg(&dir.path().join("a"));
        a.experiment = "same".into();
        let mut b = small_cfg(&dir.path().join("b"));
        b.experiment = "same".into();
        let summary = run_comparison(&[a, b], None, dir.path()).unwrap();
        assert_eq!(summary.rows.len(), 2);
        assert_eq!(summary.rows[0], summary.rows[1]);
    }

    #[test]
    fn lambda_mode_run_trains_and_reproduces() {
        let d1 = tempfile::tempdir().unwrap();
        let d2 = tempfile::tempdir().unwrap();
        let lambda_cfg = |dir: &Path| {
            let mut cfg = small_cfg(dir);
            cfg.agent.head_specs = vec![HeadSpec::new(1)];
            cfg.agent.mode = AgentMode::LambdaSingleTarget;
            cfg.agent.lambda_spec =
                Some(crate::returns::LambdaSpec::new(0.9, 50).unwrap());
            cfg
        };
        run_training(&lambda_cfg(d1.path())).unwrap();
        run_training(&lambda_cfg(d2.path())).unwrap();
        let a = std::fs::read(d1.path().join("t_seed7.csv")).unwrap();
        let b = std::fs::read(d2.path().join("t_seed7.csv")).unwrap();
        assert_eq!(a, b);
    }
}
