//! Command-line surface: `train`, `eval` and `trace` subcommands, the TOML
//! run configuration, and the on-disk artifact layout.
//!
//! Every run writes a `config.toml` snapshot of the fully resolved
//! configuration into its output directory; re-running with `--config` on
//! that snapshot (and no other flags) reproduces the run byte for byte.
//!
//! Config keys (all optional; flags override file values):
//! - top level: `seed`, `scenarios` (list of `turn_left` / `go_straight` /
//!   `turn_right`), `gccp` (`learned` / `cv` / `disabled`),
//!   `goal_conditioning` (bool), `replay_capacity`
//! - `[net]`: `embed`, `heads`, `conv_channels`
//! - `[schedule]`: `n_episodes`, `planner_freeze`, `mask_start`, `window`,
//!   `planner_epochs`, `decision_epochs`, `predictor_steps`, `batch`
//! - `[scenario]`: `lane_width`, `spawn_distance`, `goal_distance`,
//!   `[scenario.traffic]` (`spawn_rate`, `speed_min`, `speed_max`,
//!   `max_vehicles`)
//! - `[sim]`: `step_cap`, `vehicle_length`, `vehicle_width`,
//!   `goal_dist_tol`, `goal_heading_tol`
//! - `[decision_ppo]` / `[planner_ppo]`: `discount`, `gae_lambda`, `clip`,
//!   `entropy_coef`, `epochs`, `minibatch`, `[..lr]` (`initial`, `end`,
//!   `switch_step`); when one of these tables is present all its scalar
//!   keys are required
//! - `[[action_table]]`: exactly six `{dx, dy, dheading}` entries
//!
//! Unknown keys anywhere are rejected with an error naming the key.

use crate::agents::PpoConfig;
use crate::consts::N_ACTIONS;
use crate::gccp::{write_mask_records, GccpMode};
use crate::nets::NetConfig;
use crate::roadnet::{build_scenario_with, ScenarioId, ScenarioParams};
use crate::sim::{ActionDelta, SimParams};
use crate::trainer::{TrainError, TrainSchedule, Trainer, TrainerConfig};
use clap::{Parser, Subcommand};
use serde::{Deserialize, Serialize};
use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("config {path}: {message}")]
    Config { path: String, message: String },
    #[error("checkpoint not found: {0}")]
    MissingCheckpoint(String),
    #[error("action table must have exactly {N_ACTIONS} entries, got {0}")]
    BadActionTable(usize),
    #[error("scenario set is empty")]
    NoScenarios,
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error("trace serialization: {0}")]
    Json(#[from] serde_json::Error),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

/// The full run configuration. Scalar keys precede tables so the snapshot
/// serializes cleanly; the array-of-tables action table comes last.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub scenarios: Vec<ScenarioId>,
    pub gccp: GccpMode,
    pub goal_conditioning: bool,
    pub replay_capacity: usize,
    pub net: NetConfig,
    pub schedule: TrainSchedule,
    pub scenario: ScenarioParams,
    pub sim: SimParams,
    pub decision_ppo: PpoConfig,
    pub planner_ppo: PpoConfig,
    pub action_table: Vec<ActionDelta>,
}

impl Default for RunConfig {
    fn default() -> Self {
        let t = TrainerConfig::default();
        RunConfig {
            seed: t.seed,
            scenarios: t.scenarios,
            gccp: t.gccp,
            goal_conditioning: t.goal_conditioning,
            replay_capacity: t.replay_capacity,
            net: t.net,
            schedule: t.schedule,
            scenario: t.scenario_params,
            sim: t.sim,
            decision_ppo: t.decision_ppo,
            planner_ppo: t.planner_ppo,
            action_table: t.action_table.to_vec(),
        }
    }
}

impl RunConfig {
    pub fn to_trainer(&self) -> Result<TrainerConfig, CliError> {
        if self.scenarios.is_empty() {
            return Err(CliError::NoScenarios);
        }
        let action_table: [ActionDelta; N_ACTIONS] = self
            .action_table
            .clone()
            .try_into()
            .map_err(|v: Vec<ActionDelta>| CliError::BadActionTable(v.len()))?;
        Ok(TrainerConfig {
            net: self.net,
            schedule: self.schedule,
            gccp: self.gccp,
            goal_conditioning: self.goal_conditioning,
            seed: self.seed,
            scenarios: self.scenarios.clone(),
            scenario_params: self.scenario,
            sim: self.sim,
            action_table,
            decision_ppo: self.decision_ppo.clone(),
            planner_ppo: self.planner_ppo.clone(),
            replay_capacity: self.replay_capacity,
        })
    }
}

#[derive(Parser)]
#[command(
    name = "crossnav",
    version,
    about = "Hierarchical intersection navigation: train, evaluate, trace"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train the decision-maker, motion planner and trajectory predictor.
    Train(TrainArgs),
    /// Evaluate a checkpoint greedily over seeded traffic flows.
    Eval(EvalArgs),
    /// Dump one greedy rollout as line-delimited JSON records.
    Trace(TraceArgs),
}

fn parse_scenario(s: &str) -> Result<ScenarioId, String> {
    ScenarioId::from_str(s).map_err(|e| e.to_string())
}

fn parse_gccp(s: &str) -> Result<GccpMode, String> {
    GccpMode::from_str(s).map_err(|e| e.to_string())
}

fn parse_on_off(s: &str) -> Result<bool, String> {
    match s {
        "on" => Ok(true),
        "off" => Ok(false),
        other => Err(format!("expected 'on' or 'off', got '{other}'")),
    }
}

#[derive(clap::Args)]
struct CommonArgs {
    /// TOML run configuration; flags below override file values.
    #[arg(long, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Restrict to a single scenario: turn_left, go_straight or turn_right.
    #[arg(long, value_parser = parse_scenario)]
    scenario: Option<ScenarioId>,
    /// Master seed for network init, action sampling and traffic flows.
    #[arg(long)]
    seed: Option<u64>,
    /// Risk-mask source: learned, cv or disabled.
    #[arg(long, value_parser = parse_gccp)]
    gccp: Option<GccpMode>,
    /// Subgoal conditioning of the trajectory predictor.
    #[arg(long, value_parser = parse_on_off, value_name = "on|off")]
    goal_conditioning: Option<bool>,
}

#[derive(clap::Args)]
struct TrainArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Episode count (overrides the schedule in the config file).
    #[arg(long)]
    episodes: Option<usize>,
    /// Output directory for metrics, checkpoints and the config snapshot.
    #[arg(long, value_name = "DIR")]
    out: PathBuf,
    /// Warm-start checkpoint loaded before training.
    #[arg(long, value_name = "PATH")]
    checkpoint: Option<PathBuf>,
}

#[derive(clap::Args)]
struct EvalArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Traffic flows evaluated per scenario.
    #[arg(long, default_value_t = 50)]
    episodes: usize,
    /// Checkpoint to evaluate.
    #[arg(long, value_name = "PATH")]
    checkpoint: PathBuf,
    /// Optional directory for per-episode records and the config snapshot.
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
}

#[derive(clap::Args)]
struct TraceArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Checkpoint to roll out.
    #[arg(long, value_name = "PATH")]
    checkpoint: PathBuf,
    /// Output directory for trace.jsonl and the config snapshot.
    #[arg(long, value_name = "DIR")]
    out: PathBuf,
}

/// Binary entry point: clap handles usage errors (exit 2) and help (exit
/// 0); every other failure prints a one-line reason and exits 1.
pub fn main() {
    let cli = match Cli::try_parse_from(std::env::args_os()) {
        Ok(cli) => cli,
        Err(e) => e.exit(),
    };
    if let Err(e) = dispatch(cli) {
        eprintln!("error: {e}");
        std::process::exit(1);
    }
}

/// In-process variant of [`main`] for tests: parses `args` (including the
/// program name) and runs the subcommand.
pub fn run_from<I, S>(args: I) -> Result<(), CliError>
where
    I: IntoIterator<Item = S>,
    S: Into<OsString> + Clone,
{
    let cli = Cli::try_parse_from(args).map_err(|e| CliError::Usage(e.to_string()))?;
    dispatch(cli)
}

fn dispatch(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Trace(a) => cmd_trace(a),
    }
}

/// Collapses multi-line deserialization reports (which quote the offending
/// span) into the single-line form the error contract requires.
fn one_line(e: impl std::fmt::Display) -> String {
    e.to_string().split_whitespace().collect::<Vec<_>>().join(" ")
}

fn resolve_config(c: &CommonArgs) -> Result<RunConfig, CliError> {
    let mut cfg: RunConfig = match &c.config {
        Some(path) => {
            let text = std::fs::read_to_string(path).map_err(|e| CliError::Config {
                path: path.display().to_string(),
                message: e.to_string(),
            })?;
            toml::from_str(&text).map_err(|e| CliError::Config {
                path: path.display().to_string(),
                message: one_line(e),
            })?
        }
        None => RunConfig::default(),
    };
    if let Some(s) = c.scenario {
        cfg.scenarios = vec![s];
    }
    if let Some(seed) = c.seed {
        cfg.seed = seed;
    }
    if let Some(g) = c.gccp {
        cfg.gccp = g;
    }
    if let Some(gc) = c.goal_conditioning {
        cfg.goal_conditioning = gc;
    }
    Ok(cfg)
}

fn write_snapshot(cfg: &RunConfig, dir: &Path) -> Result<(), CliError> {
    let text = toml::to_string_pretty(cfg).map_err(|e| CliError::Config {
        path: "snapshot".to_string(),
        message: one_line(e),
    })?;
    std::fs::write(dir.join("config.toml"), text)?;
    Ok(())
}

fn ensure_checkpoint(path: &Path) -> Result<(), CliError> {
    if !path.is_file() {
        return Err(CliError::MissingCheckpoint(path.display().to_string()));
    }
    Ok(())
}

fn cmd_train(a: TrainArgs) -> Result<(), CliError> {
    let mut cfg = resolve_config(&a.common)?;
    if let Some(e) = a.episodes {
        cfg.schedule.n_episodes = e;
    }
    std::fs::create_dir_all(&a.out)?;
    write_snapshot(&cfg, &a.out)?;
    let mut trainer = Trainer::new(cfg.to_trainer()?)?;
    if let Some(ckpt) = &a.checkpoint {
        ensure_checkpoint(ckpt)?;
        trainer.load_checkpoint(ckpt)?;
    }
    let summary = trainer.train(&a.out)?;
    println!(
        "trained {} episodes ({} successes, {} collisions); metrics: {}; final checkpoint: {}",
        summary.episodes,
        summary.successes,
        summary.collisions,
        summary.metrics_path.display(),
        summary.final_checkpoint.display()
    );
    Ok(())
}

/// Per-episode record layout of `eval.csv`.
pub const EVAL_HEADER: &str = "scenario,flow,flow_seed,steps,windows,success,collision,off_road,timeout,decision_return,planner_return,subgoal_arrivals,masked_windows,fallback_windows";

fn eval_flow_seed(seed: u64, scenario_index: usize, flow: usize) -> u64 {
    // Distinct from every training flow seed (different index domain).
    let k = 0x0010_0000 + 0x0001_0000 * scenario_index as u64 + flow as u64;
    seed ^ k.wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

fn cmd_eval(a: EvalArgs) -> Result<(), CliError> {
    let cfg = resolve_config(&a.common)?;
    ensure_checkpoint(&a.checkpoint)?;
    let mut trainer = Trainer::new(cfg.to_trainer()?)?;
    trainer.load_checkpoint(&a.checkpoint)?;

    let mut rows = Vec::new();
    for (si, &sid) in cfg.scenarios.iter().enumerate() {
        let scenario = build_scenario_with(sid, &cfg.scenario);
        for flow in 0..a.episodes {
            let flow_seed = eval_flow_seed(cfg.seed, si, flow);
            let outcome = trainer.rollout(&scenario, flow_seed, false)?;
            rows.push((sid, flow, flow_seed, outcome.result));
        }
    }

    println!("{:<12} {:>6} {:>9} {:>11}", "scenario", "flows", "success", "collision");
    let mut total = (0usize, 0usize, 0usize);
    for &sid in &cfg.scenarios {
        let per: Vec<_> = rows.iter().filter(|r| r.0 == sid).collect();
        let n = per.len();
        let s = per.iter().filter(|r| r.3.success()).count();
        let c = per.iter().filter(|r| r.3.events.collision).count();
        total = (total.0 + n, total.1 + s, total.2 + c);
        println!(
            "{:<12} {:>6} {:>8.1}% {:>10.1}%",
            sid.as_str(),
            n,
            100.0 * s as f64 / n as f64,
            100.0 * c as f64 / n as f64
        );
    }
    println!(
        "{:<12} {:>6} {:>8.1}% {:>10.1}%",
        "overall",
        total.0,
        100.0 * total.1 as f64 / total.0 as f64,
        100.0 * total.2 as f64 / total.0 as f64
    );

    if let Some(dir) = &a.out {
        std::fs::create_dir_all(dir)?;
        write_snapshot(&cfg, dir)?;
        let mut w = std::io::BufWriter::new(std::fs::File::create(dir.join("eval.csv"))?);
        writeln!(w, "{EVAL_HEADER}")?;
        for (sid, flow, flow_seed, r) in &rows {
            writeln!(
                w,
                "{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
                sid.as_str(),
                flow,
                flow_seed,
                r.steps,
                r.windows,
                r.success() as u8,
                r.events.collision as u8,
                r.events.off_road as u8,
                r.events.timeout as u8,
                r.decision_return,
                r.planner_return,
                r.subgoal_arrivals,
                r.masked_windows,
                r.fallback_windows,
            )?;
        }
        w.flush()?;
    }
    Ok(())
}

/// The 13th record of each traced window (after the 12 subgoal records):
/// the decision made there and the poses actually driven.
#[derive(Serialize)]
struct ChoiceRecord {
    step: u64,
    chosen: usize,
    probs: Vec<f64>,
    /// World-frame ego pose at the decision boundary.
    ego: [f64; 3],
    /// World-frame ego poses after each executed step.
    executed: Vec<[f64; 3]>,
}

fn cmd_trace(a: TraceArgs) -> Result<(), CliError> {
    let cfg = resolve_config(&a.common)?;
    ensure_checkpoint(&a.checkpoint)?;
    let mut trainer = Trainer::new(cfg.to_trainer()?)?;
    trainer.load_checkpoint(&a.checkpoint)?;

    let sid = *cfg.scenarios.first().ok_or(CliError::NoScenarios)?;
    let scenario = build_scenario_with(sid, &cfg.scenario);
    let outcome = trainer.rollout(&scenario, cfg.seed, true)?;

    std::fs::create_dir_all(&a.out)?;
    write_snapshot(&cfg, &a.out)?;
    let path = a.out.join("trace.jsonl");
    let mut w = std::io::BufWriter::new(std::fs::File::create(&path)?);
    for win in &outcome.windows {
        write_mask_records(&mut w, win.t0 as u64, &win.subgoals, &win.report)?;
        let record = ChoiceRecord {
            step: win.t0 as u64,
            chosen: win.chosen,
            probs: win.probs.to_vec(),
            ego: [win.ego_pose.x, win.ego_pose.y, win.ego_pose.heading],
            executed: win.executed.iter().map(|p| [p.x, p.y, p.heading]).collect(),
        };
        serde_json::to_writer(&mut w, &record)?;
        writeln!(w)?;
    }
    w.flush()?;

    let r = &outcome.result;
    println!(
        "traced {} (flow seed {}): {} windows, {} steps, success={}, collision={}; records: {}",
        sid.as_str(),
        cfg.seed,
        r.windows,
        r.steps,
        r.success(),
        r.events.collision,
        path.display()
    );
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_config_roundtrips_through_toml() {
        let cfg = RunConfig::default();
        let text = toml::to_string_pretty(&cfg).unwrap();
        let back: RunConfig = toml::from_str(&text).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn unknown_config_key_is_rejected_by_name() {
        let err = toml::from_str::<RunConfig>("warp_speed = 9\n").unwrap_err();
        assert!(err.to_string().contains("warp_speed"));
        let err = toml::from_str::<RunConfig>("[sim]\nstep_cap = 5\nfoo = 1\n").unwrap_err();
        assert!(err.to_string().contains("foo"));
    }

    #[test]
    fn partial_schedule_override_keeps_other_defaults() {
        let cfg: RunConfig = toml::from_str("[schedule]\nn_episodes = 50\n").unwrap();
        assert_eq!(cfg.schedule.n_episodes, 50);
        assert_eq!(cfg.schedule.planner_freeze, 500);
        assert_eq!(cfg.schedule.batch, 64);
    }

    #[test]
    fn flags_override_config_values() {
        let cli = Cli::try_parse_from([
            "crossnav",
            "train",
            "--out",
            "somewhere",
            "--scenario",
            "turn_right",
            "--seed",
            "9",
            "--gccp",
            "cv",
            "--goal-conditioning",
            "off",
        ])
        .unwrap();
        let Command::Train(args) = cli.command else {
            panic!("expected the train subcommand");
        };
        let cfg = resolve_config(&args.common).unwrap();
        assert_eq!(cfg.scenarios, vec![ScenarioId::TurnRight]);
        assert_eq!(cfg.seed, 9);
        assert_eq!(cfg.gccp, GccpMode::Cv);
        assert!(!cfg.goal_conditioning);
    }

    #[test]
    fn bad_flag_values_fail_parsing() {
        assert!(Cli::try_parse_from(["crossnav", "train", "--out", "x", "--gccp", "magic"])
            .is_err());
        assert!(Cli::try_parse_from([
            "crossnav",
            "train",
            "--out",
            "x",
            "--goal-conditioning",
            "maybe"
        ])
        .is_err());
        assert!(
            Cli::try_parse_from(["crossnav", "eval", "--checkpoint", "c", "--scenario", "u_turn"])
                .is_err()
        );
    }

    #[test]
    fn action_table_length_is_enforced() {
        let mut cfg = RunConfig::default();
        cfg.action_table.pop();
        match cfg.to_trainer() {
            Err(CliError::BadActionTable(5)) => {}
            other => panic!("expected BadActionTable(5), got {other:?}"),
        }
    }

    #[test]
    fn missing_checkpoint_is_a_one_line_error() {
        let err = run_from([
            "crossnav",
            "eval",
            "--checkpoint",
            "/nonexistent/final.ckpt",
            "--episodes",
            "1",
        ])
        .unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("/nonexistent/final.ckpt"));
        assert!(!msg.contains('\n'));
    }
}
