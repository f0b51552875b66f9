//! Training orchestration: the gated episode loop, on-policy buffers for
//! both policy levels, the replay buffer feeding the trajectory predictor,
//! metric logging, and checkpointing. The loop structure is: every `window`
//! steps the decision-maker picks a subgoal (risk-masked only after episode
//! `mask_start`), the planner executes the window and trains on it only
//! before episode `planner_freeze`, and after each episode the
//! decision-maker updates; once the planner freezes, completed prediction
//! windows flow into the replay buffer and the predictor trains online.

use crate::agents::{
    decision_reward, planner_reward, ppo_update_decision, ppo_update_planner, subgoal_reached,
    argmax, AgentError, DecisionPolicy, DecisionSample, DecisionState, DecisionValue,
    PlannerPolicy, PlannerSample, PlannerState, PlannerValue, PpoConfig,
};
use crate::autodiff::{load_checkpoint, save_checkpoint, DiffError};
use crate::consts::{N_ACTIONS, N_S, N_SUBGOALS, T_F, T_M};
use crate::encoding::{encode_state, sample_subgoals, SubgoalSet, VectorState};
use crate::gccp::{compute_mask, GccpError, GccpMode, MaskReport, RiskMask};
use crate::geometry::{from_ego_frame, to_ego_frame, Pose};
use crate::nets::NetConfig;
use crate::predictor::{PredictedTrajectories, Predictor, PredictorError, TrainingSample};
use crate::roadnet::{build_scenario_with, RoadError, Scenario, ScenarioId, ScenarioParams};
use crate::sim::{reset_with, step, ActionDelta, EventSet, SimError, SimParams, TrajRecord};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::collections::BTreeMap;
use std::collections::VecDeque;
use std::io::Write;
use std::path::{Path, PathBuf};

/// Held-out windows used for ADE/FDE monitoring.
pub const PROBE_SIZE: usize = 256;
/// Episodes between probe-set refreshes and periodic checkpoints.
pub const PROBE_REFRESH_EVERY: usize = 100;
pub const CHECKPOINT_EVERY: usize = 100;

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error(transparent)]
    Agent(#[from] AgentError),
    #[error(transparent)]
    Gccp(#[from] GccpError),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Road(#[from] RoadError),
    #[error(transparent)]
    Predictor(#[from] PredictorError),
    #[error(transparent)]
    Diff(#[from] DiffError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad schedule: {0}")]
    BadSchedule(&'static str),
}

/// Episode-count gates and per-update step counts of the training loop.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSchedule {
    /// Total episodes (N_e).
    pub n_episodes: usize,
    /// The planner stops updating from this episode on (N_g); the predictor
    /// starts training right after it.
    pub planner_freeze: usize,
    /// The decision-maker consumes real risk masks strictly after this
    /// episode (N_m).
    pub mask_start: usize,
    /// Steps per decision window (T_m); must equal the prediction horizon.
    pub window: usize,
    /// Planner PPO epochs per window update (K_m).
    pub planner_epochs: usize,
    /// Decision PPO epochs per episode update (K_d).
    pub decision_epochs: usize,
    /// Predictor gradient steps per episode (K_p).
    pub predictor_steps: usize,
    /// Replay samples per predictor gradient step (N_b).
    pub batch: usize,
}

impl Default for TrainSchedule {
    fn default() -> Self {
        TrainSchedule {
            n_episodes: 2000,
            planner_freeze: 500,
            mask_start: 800,
            window: T_M,
            planner_epochs: 5,
            decision_epochs: 5,
            predictor_steps: 5,
            batch: 64,
        }
    }
}

impl TrainSchedule {
    /// Gates may sit past `n_episodes`; a short run then simply never
    /// freezes the planner or consumes masks.
    pub fn validate(&self) -> Result<(), TrainError> {
        if self.window != T_F {
            return Err(TrainError::BadSchedule("window must equal the prediction horizon"));
        }
        if self.planner_freeze == 0 {
            return Err(TrainError::BadSchedule("planner freeze episode must be positive"));
        }
        if self.planner_freeze >= self.mask_start {
            return Err(TrainError::BadSchedule("planner freeze must precede mask start"));
        }
        if self.planner_epochs == 0 || self.decision_epochs == 0 || self.predictor_steps == 0 {
            return Err(TrainError::BadSchedule("update step counts must be positive"));
        }
        if self.batch == 0 {
            return Err(TrainError::BadSchedule("predictor batch must be positive"));
        }
        Ok(())
    }
}

/// One stored prediction window: the encoded state at a decision boundary,
/// the subgoal chosen there, and the ground-truth futures extracted from
/// the episode log.
#[derive(Debug, Clone)]
pub struct ReplayEntry {
    /// Simulation step of the window start; always a multiple of the window.
    pub timestep: usize,
    pub sample: TrainingSample,
}

/// FIFO ring of prediction windows.
#[derive(Debug, Default)]
pub struct ReplayBuffer {
    entries: VecDeque<ReplayEntry>,
    capacity: usize,
}

impl ReplayBuffer {
    pub fn new(capacity: usize) -> Self {
        ReplayBuffer { entries: VecDeque::new(), capacity }
    }

    pub fn push(&mut self, entry: ReplayEntry) {
        assert_eq!(entry.timestep % T_M, 0, "windows start at decision boundaries");
        if self.entries.len() == self.capacity {
            self.entries.pop_front();
        }
        self.entries.push_back(entry);
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    /// `n` distinct entries, cloned, drawn without replacement.
    pub fn sample(&self, n: usize, rng: &mut impl Rng) -> Vec<TrainingSample> {
        assert!(n <= self.entries.len());
        rand::seq::index::sample(rng, self.entries.len(), n)
            .into_iter()
            .map(|i| self.entries[i].sample.clone())
            .collect()
    }

    /// Removes up to `n` random entries and returns them (probe reservation).
    pub fn withdraw(&mut self, n: usize, rng: &mut impl Rng) -> Vec<ReplayEntry> {
        let take = n.min(self.entries.len());
        if take == 0 {
            return Vec::new();
        }
        let mut picked: Vec<usize> =
            rand::seq::index::sample(rng, self.entries.len(), take).into_vec();
        picked.sort_unstable_by(|a, b| b.cmp(a));
        picked.into_iter().map(|i| self.entries.remove(i).unwrap()).collect()
    }
}

/// Everything needed to construct a [`Trainer`].
#[derive(Debug, Clone)]
pub struct TrainerConfig {
    pub net: NetConfig,
    pub schedule: TrainSchedule,
    pub gccp: GccpMode,
    pub goal_conditioning: bool,
    pub seed: u64,
    /// Round-robin episode order.
    pub scenarios: Vec<ScenarioId>,
    pub scenario_params: ScenarioParams,
    pub sim: SimParams,
    pub action_table: [ActionDelta; N_ACTIONS],
    pub decision_ppo: PpoConfig,
    pub planner_ppo: PpoConfig,
    pub replay_capacity: usize,
}

impl Default for TrainerConfig {
    fn default() -> Self {
        TrainerConfig {
            net: NetConfig::default(),
            schedule: TrainSchedule::default(),
            gccp: GccpMode::Learned,
            goal_conditioning: true,
            seed: 0,
            scenarios: ScenarioId::ALL.to_vec(),
            scenario_params: ScenarioParams::default(),
            sim: SimParams::default(),
            action_table: crate::agents::default_action_table(),
            decision_ppo: PpoConfig::decision(),
            planner_ppo: PpoConfig::planner(),
            replay_capacity: 50_000,
        }
    }
}

/// Per-episode rollout statistics.
#[derive(Debug, Clone)]
pub struct EpisodeResult {
    pub scenario: ScenarioId,
    pub steps: usize,
    pub windows: usize,
    /// Events of the final step.
    pub events: EventSet,
    pub decision_return: f64,
    pub planner_return: f64,
    /// Windows whose chosen subgoal was reached.
    pub subgoal_arrivals: usize,
    /// Windows where the consumed mask had at least one unsafe entry.
    pub masked_windows: usize,
    /// Windows where every subgoal was predicted unsafe and the mask fell
    /// back to zeros.
    pub fallback_windows: usize,
    pub planner_updates: usize,
}

impl EpisodeResult {
    fn new(scenario: ScenarioId) -> Self {
        EpisodeResult {
            scenario,
            steps: 0,
            windows: 0,
            events: EventSet::default(),
            decision_return: 0.0,
            planner_return: 0.0,
            subgoal_arrivals: 0,
            masked_windows: 0,
            fallback_windows: 0,
            planner_updates: 0,
        }
    }

    pub fn success(&self) -> bool {
        self.events.goal_reached
    }
}

/// What happened during the post-episode update phase.
#[derive(Debug, Clone)]
pub struct EpisodeUpdate {
    pub decision_updated: bool,
    /// One pre-update loss per predictor gradient step this episode.
    pub predictor_losses: Vec<f64>,
    /// Prediction windows moved into the replay buffer.
    pub dumped_windows: usize,
    pub replay_len: usize,
    /// Predictor training was due but the replay buffer was still smaller
    /// than one batch.
    pub predictor_skipped: bool,
}

/// One decision window of a greedy rollout, for tracing and plotting.
#[derive(Debug, Clone)]
pub struct WindowTrace {
    pub t0: usize,
    /// World-frame ego pose at selection time.
    pub ego_pose: Pose,
    pub subgoals: SubgoalSet,
    pub report: MaskReport,
    pub chosen: usize,
    pub probs: [f64; N_SUBGOALS],
    /// World-frame ego poses after each executed step of the window.
    pub executed: Vec<Pose>,
}

#[derive(Debug, Clone)]
pub struct RolloutOutcome {
    pub result: EpisodeResult,
    /// Present only when trace collection was requested.
    pub windows: Vec<WindowTrace>,
}

/// A window recorded during an episode, waiting for its ground-truth future.
#[derive(Debug, Clone)]
struct PendingWindow {
    t0: usize,
    state: VectorState,
    /// Ego-frame subgoal chosen at the boundary.
    subgoal: Pose,
    /// World-frame ego pose at the boundary.
    ego_pose: Pose,
    surr_ids: [Option<u64>; N_S],
}

pub struct Trainer {
    pub config: TrainerConfig,
    pub decision_policy: DecisionPolicy,
    pub decision_value: DecisionValue,
    pub planner_policy: PlannerPolicy,
    pub planner_value: PlannerValue,
    pub predictor: Predictor,
    /// On-policy decision transitions of the current episode; emptied by
    /// [`Trainer::end_of_episode_updates`].
    pub decision_buffer: Vec<DecisionSample>,
    pub replay: ReplayBuffer,
    /// Held-out windows for ADE/FDE monitoring, refreshed periodically.
    pub probe: Vec<TrainingSample>,
    episode_windows: Vec<PendingWindow>,
    last_log: Vec<TrajRecord>,
    rng: ChaCha8Rng,
}

fn episode_flow_seed(seed: u64, episode_index: usize) -> u64 {
    seed ^ (episode_index as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

impl Trainer {
    pub fn new(config: TrainerConfig) -> Result<Self, TrainError> {
        config.schedule.validate()?;
        config.decision_ppo.validate()?;
        config.planner_ppo.validate()?;
        let mut init_rng = ChaCha8Rng::seed_from_u64(config.seed);
        let decision_policy = DecisionPolicy::new(config.net, &mut init_rng)?;
        let decision_value = DecisionValue::new(config.net, &mut init_rng)?;
        let planner_policy = PlannerPolicy::new(config.net, &mut init_rng)?;
        let planner_value = PlannerValue::new(config.net, &mut init_rng)?;
        let predictor = Predictor::new(config.net, config.goal_conditioning, &mut init_rng)?;
        let rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0xA5A5_5A5A_DEAD_BEEF);
        let replay = ReplayBuffer::new(config.replay_capacity);
        Ok(Trainer {
            config,
            decision_policy,
            decision_value,
            planner_policy,
            planner_value,
            predictor,
            decision_buffer: Vec::new(),
            replay,
            probe: Vec::new(),
            episode_windows: Vec::new(),
            last_log: Vec::new(),
            rng,
        })
    }

    fn footprint(&self) -> (f64, f64) {
        (self.config.sim.vehicle_length, self.config.sim.vehicle_width)
    }

    /// The mask consumed at a boundary: zeros until strictly after the
    /// mask-start episode (and always zeros in disabled mode).
    fn boundary_mask(
        &self,
        env: &VectorState,
        subgoals: &SubgoalSet,
        episode_index: usize,
    ) -> Result<MaskReport, TrainError> {
        if episode_index <= self.config.schedule.mask_start {
            return Ok(MaskReport {
                mask: RiskMask::zeros(),
                unsafe_flags: [false; N_SUBGOALS],
                fallback: false,
                predictions: None,
            });
        }
        Ok(compute_mask(env, subgoals, &self.predictor, self.config.gccp, self.footprint())?)
    }

    /// Plays one episode, filling the decision buffer and the episodic
    /// window list, updating the planner per window while it still trains.
    pub fn run_episode(
        &mut self,
        scenario: &Scenario,
        flow_seed: u64,
        episode_index: usize,
    ) -> Result<EpisodeResult, TrainError> {
        let schedule = self.config.schedule;
        let planner_training = episode_index < schedule.planner_freeze;
        self.episode_windows.clear();
        self.last_log.clear();
        let mut world = reset_with(scenario, flow_seed, self.config.sim);
        let mut result = EpisodeResult::new(scenario.id);

        loop {
            let t0 = world.step_count;
            let env = encode_state(&world);
            let subgoals = sample_subgoals(&world)?;
            let task_goal = to_ego_frame(&world.ego.pose, &scenario.task_goal);
            let dstate = DecisionState { env: env.clone(), task_goal };
            let report = self.boundary_mask(&env, &subgoals, episode_index)?;
            if report.mask.entries.iter().any(|&m| m != 0.0) {
                result.masked_windows += 1;
            }
            if report.fallback {
                result.fallback_windows += 1;
            }
            let choice = self.decision_policy.act(&dstate, &subgoals, &report.mask, &mut self.rng)?;
            let subgoal_ego = subgoals.goals[choice.index];
            let subgoal_world = from_ego_frame(&world.ego.pose, &subgoal_ego);
            let d_subgoal = world.ego.pose.distance_to(&subgoal_world);
            let surr_ids = env.surr_ids;
            self.episode_windows.push(PendingWindow {
                t0,
                state: env,
                subgoal: subgoal_ego,
                ego_pose: world.ego.pose,
                surr_ids,
            });

            let mut planner_buf: Vec<PlannerSample> = Vec::with_capacity(schedule.window);
            let mut goal_hit = false;
            let mut subgoal_hit = false;
            let mut last_events = EventSet::default();
            for _ in 0..schedule.window {
                let pstate = PlannerState {
                    env: encode_state(&world),
                    subgoal: to_ego_frame(&world.ego.pose, &subgoal_world),
                };
                let pchoice = self.planner_policy.act(&pstate, &mut self.rng)?;
                let prev_pose = world.ego.pose;
                let outcome = step(&mut world, self.config.action_table[pchoice.index])?;
                last_events = outcome.events;
                let r = planner_reward(&outcome.events, &subgoal_world, &prev_pose, &world.ego.pose);
                goal_hit |= outcome.events.goal_reached;
                subgoal_hit |= subgoal_reached(&world.ego.pose, &subgoal_world);
                let done = outcome.events.is_terminal();
                planner_buf.push(PlannerSample {
                    state: pstate,
                    action: pchoice.index,
                    logp: pchoice.logp,
                    reward: r,
                    done,
                    next: None,
                });
                result.planner_return += r;
                result.steps += 1;
                if done {
                    break;
                }
            }
            // Chain bootstrap observations now that the window is complete.
            for i in 1..planner_buf.len() {
                let prev_state = planner_buf[i].state.clone();
                planner_buf[i - 1].next = Some(prev_state);
            }
            let terminal = last_events.is_terminal();
            if let Some(last) = planner_buf.last_mut() {
                if !terminal {
                    last.next = Some(PlannerState {
                        env: encode_state(&world),
                        subgoal: to_ego_frame(&world.ego.pose, &subgoal_world),
                    });
                }
            }

            let r_d = decision_reward(goal_hit, subgoal_hit, d_subgoal);
            result.decision_return += r_d;
            result.windows += 1;
            if subgoal_hit {
                result.subgoal_arrivals += 1;
            }
            let next = if terminal {
                None
            } else {
                let nenv = encode_state(&world);
                let nsub = sample_subgoals(&world)?;
                let ngoal = to_ego_frame(&world.ego.pose, &scenario.task_goal);
                Some((DecisionState { env: nenv, task_goal: ngoal }, nsub))
            };
            self.decision_buffer.push(DecisionSample {
                state: dstate,
                subgoals,
                mask: report.mask,
                action: choice.index,
                logp: choice.logp,
                reward: r_d,
                done: terminal,
                next,
            });

            if planner_training && !planner_buf.is_empty() {
                let mut cfg = self.config.planner_ppo.clone();
                cfg.epochs = schedule.planner_epochs;
                ppo_update_planner(&mut self.planner_policy, &mut self.planner_value, &planner_buf, &cfg)?;
                result.planner_updates += 1;
            }
            // The window buffer dies here every iteration.
            drop(planner_buf);

            result.events = last_events;
            if terminal {
                break;
            }
        }
        self.last_log = std::mem::take(&mut world.log);
        Ok(result)
    }

    /// Decision-maker PPO, then (after the planner freeze) the episodic
    /// window dump and predictor training.
    pub fn end_of_episode_updates(&mut self, episode_index: usize) -> Result<EpisodeUpdate, TrainError> {
        let schedule = self.config.schedule;
        let mut update = EpisodeUpdate {
            decision_updated: false,
            predictor_losses: Vec::new(),
            dumped_windows: 0,
            replay_len: self.replay.len(),
            predictor_skipped: false,
        };
        if !self.decision_buffer.is_empty() {
            let mut cfg = self.config.decision_ppo.clone();
            cfg.epochs = schedule.decision_epochs;
            let buffer = std::mem::take(&mut self.decision_buffer);
            ppo_update_decision(&mut self.decision_policy, &mut self.decision_value, &buffer, &cfg)?;
            update.decision_updated = true;
        }

        if episode_index > schedule.planner_freeze {
            let windows = std::mem::take(&mut self.episode_windows);
            let samples = windows_to_samples(&windows, &self.last_log);
            update.dumped_windows = samples.len();
            for (timestep, sample) in samples {
                self.replay.push(ReplayEntry { timestep, sample });
            }
            if self.replay.len() >= schedule.batch {
                for _ in 0..schedule.predictor_steps {
                    let batch = self.replay.sample(schedule.batch, &mut self.rng);
                    let loss = self.predictor.train_step(&batch)?;
                    update.predictor_losses.push(loss);
                }
            } else {
                update.predictor_skipped = true;
            }
        }
        update.replay_len = self.replay.len();
        Ok(update)
    }

    /// Moves up to [`PROBE_SIZE`] windows out of the replay buffer into the
    /// probe set (capped at half the buffer so training keeps data).
    pub fn refresh_probe(&mut self) {
        let want = PROBE_SIZE.min(self.replay.len() / 2);
        if want == 0 {
            return;
        }
        let drawn = self.replay.withdraw(want, &mut self.rng);
        self.probe = drawn.into_iter().map(|e| e.sample).collect();
    }

    /// Mean (ADE, FDE) of the predictor over the probe set, averaged over
    /// valid vehicles. `None` while the probe set is empty.
    pub fn probe_metrics(&self) -> Result<Option<(f64, f64)>, TrainError> {
        if self.probe.is_empty() {
            return Ok(None);
        }
        let mut ade_sum = 0.0;
        let mut fde_sum = 0.0;
        let mut count = 0usize;
        for sample in &self.probe {
            let pred = self.predictor.predict(&sample.state, &sample.subgoal)?;
            for v in 0..=N_S {
                if !sample.truth.validity[v] {
                    continue;
                }
                let (p, t) = if v == 0 {
                    (&pred.ego, &sample.truth.ego)
                } else {
                    (&pred.surrounding[v - 1], &sample.truth.surrounding[v - 1])
                };
                let (ade, fde) = crate::predictor::ade_fde(p, t);
                ade_sum += ade;
                fde_sum += fde;
                count += 1;
            }
        }
        if count == 0 {
            return Ok(None);
        }
        Ok(Some((ade_sum / count as f64, fde_sum / count as f64)))
    }

    /// Greedy rollout with the current parameters: argmax subgoals (risk
    /// mask active per the configured mode) and argmax planner actions.
    /// Touches no buffers and performs no updates.
    pub fn rollout(
        &self,
        scenario: &Scenario,
        flow_seed: u64,
        collect: bool,
    ) -> Result<RolloutOutcome, TrainError> {
        let schedule = self.config.schedule;
        let mut world = reset_with(scenario, flow_seed, self.config.sim);
        let mut result = EpisodeResult::new(scenario.id);
        let mut traces = Vec::new();

        loop {
            let t0 = world.step_count;
            let env = encode_state(&world);
            let subgoals = sample_subgoals(&world)?;
            let task_goal = to_ego_frame(&world.ego.pose, &scenario.task_goal);
            let dstate = DecisionState { env: env.clone(), task_goal };
            let report =
                compute_mask(&env, &subgoals, &self.predictor, self.config.gccp, self.footprint())?;
            if report.mask.entries.iter().any(|&m| m != 0.0) {
                result.masked_windows += 1;
            }
            if report.fallback {
                result.fallback_windows += 1;
            }
            let probs = self.decision_policy.probabilities(&dstate, &subgoals, &report.mask)?;
            let chosen = argmax(&probs);
            let ego_pose = world.ego.pose;
            let subgoal_world = from_ego_frame(&ego_pose, &subgoals.goals[chosen]);
            let d_subgoal = ego_pose.distance_to(&subgoal_world);

            let mut goal_hit = false;
            let mut subgoal_hit = false;
            let mut last_events = EventSet::default();
            let mut executed = Vec::with_capacity(schedule.window);
            for _ in 0..schedule.window {
                let pstate = PlannerState {
                    env: encode_state(&world),
                    subgoal: to_ego_frame(&world.ego.pose, &subgoal_world),
                };
                let pprobs = self.planner_policy.probabilities(&pstate)?;
                let action = argmax(&pprobs);
                let prev_pose = world.ego.pose;
                let outcome = step(&mut world, self.config.action_table[action])?;
                last_events = outcome.events;
                result.planner_return +=
                    planner_reward(&outcome.events, &subgoal_world, &prev_pose, &world.ego.pose);
                goal_hit |= outcome.events.goal_reached;
                subgoal_hit |= subgoal_reached(&world.ego.pose, &subgoal_world);
                executed.push(world.ego.pose);
                result.steps += 1;
                if outcome.events.is_terminal() {
                    break;
                }
            }
            result.decision_return += decision_reward(goal_hit, subgoal_hit, d_subgoal);
            result.windows += 1;
            if subgoal_hit {
                result.subgoal_arrivals += 1;
            }
            if collect {
                traces.push(WindowTrace {
                    t0,
                    ego_pose,
                    subgoals,
                    report,
                    chosen,
                    probs,
                    executed,
                });
            }
            if last_events.is_terminal() {
                result.events = last_events;
                break;
            }
        }
        Ok(RolloutOutcome { result, windows: traces })
    }

    pub fn save_checkpoint(&self, path: &Path) -> Result<(), TrainError> {
        save_checkpoint(
            path,
            &[
                ("decision/policy", &self.decision_policy.store),
                ("decision/value", &self.decision_value.store),
                ("planner/policy", &self.planner_policy.store),
                ("planner/value", &self.planner_value.store),
                ("predictor", &self.predictor.store),
            ],
        )?;
        Ok(())
    }

    pub fn load_checkpoint(&mut self, path: &Path) -> Result<(), TrainError> {
        let ckpt = load_checkpoint(path)?;
        self.decision_policy.store.load_values(&ckpt, "decision/policy")?;
        self.decision_value.store.load_values(&ckpt, "decision/value")?;
        self.planner_policy.store.load_values(&ckpt, "planner/policy")?;
        self.planner_value.store.load_values(&ckpt, "planner/value")?;
        self.predictor.store.load_values(&ckpt, "predictor")?;
        Ok(())
    }

    /// Full training run: round-robin scenarios, per-episode metrics CSV,
    /// periodic and final checkpoints. Returns summary counters.
    pub fn train(&mut self, out_dir: &Path) -> Result<TrainSummary, TrainError> {
        std::fs::create_dir_all(out_dir)?;
        let ckpt_dir = out_dir.join("checkpoints");
        std::fs::create_dir_all(&ckpt_dir)?;
        let metrics_path = out_dir.join("metrics.csv");
        let mut metrics = std::io::BufWriter::new(std::fs::File::create(&metrics_path)?);
        writeln!(metrics, "{}", METRICS_HEADER)?;

        let scenarios = self.config.scenarios.clone();
        let mut summary = TrainSummary {
            episodes: 0,
            successes: 0,
            collisions: 0,
            metrics_path: metrics_path.clone(),
            final_checkpoint: out_dir.join("final.ckpt"),
        };
        for e in 1..=self.config.schedule.n_episodes {
            let scenario_id = scenarios[(e - 1) % scenarios.len()];
            let scenario = build_scenario_with(scenario_id, &self.config.scenario_params);
            let flow_seed = episode_flow_seed(self.config.seed, e);
            let result = self.run_episode(&scenario, flow_seed, e)?;
            let update = self.end_of_episode_updates(e)?;
            if e % PROBE_REFRESH_EVERY == 0 {
                self.refresh_probe();
            }
            let probe = self.probe_metrics()?;
            write_metrics_row(&mut metrics, e, &result, &update, probe)?;
            if e % CHECKPOINT_EVERY == 0 {
                self.save_checkpoint(&ckpt_dir.join(format!("ep{e:05}.ckpt")))?;
            }
            summary.episodes += 1;
            summary.successes += result.success() as usize;
            summary.collisions += result.events.collision as usize;
        }
        metrics.flush()?;
        self.save_checkpoint(&summary.final_checkpoint)?;
        Ok(summary)
    }
}

#[derive(Debug, Clone)]
pub struct TrainSummary {
    pub episodes: usize,
    pub successes: usize,
    pub collisions: usize,
    pub metrics_path: PathBuf,
    pub final_checkpoint: PathBuf,
}

/// Column layout of the per-episode metrics CSV. Booleans are 0/1;
/// predictor_loss, probe_ade and probe_fde stay empty until the predictor
/// trains (and the probe set exists).
pub const METRICS_HEADER: &str = "episode,scenario,steps,windows,success,collision,off_road,timeout,decision_return,planner_return,subgoal_arrivals,masked_windows,fallback_windows,planner_updates,predictor_loss,probe_ade,probe_fde,replay_len";

fn write_metrics_row(
    w: &mut impl Write,
    episode: usize,
    r: &EpisodeResult,
    u: &EpisodeUpdate,
    probe: Option<(f64, f64)>,
) -> std::io::Result<()> {
    let loss = if u.predictor_losses.is_empty() {
        String::new()
    } else {
        let mean = u.predictor_losses.iter().sum::<f64>() / u.predictor_losses.len() as f64;
        format!("{mean}")
    };
    let (ade, fde) = match probe {
        Some((a, f)) => (format!("{a}"), format!("{f}")),
        None => (String::new(), String::new()),
    };
    writeln!(
        w,
        "{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
        episode,
        r.scenario.as_str(),
        r.steps,
        r.windows,
        r.events.goal_reached as u8,
        r.events.collision as u8,
        r.events.off_road as u8,
        r.events.timeout as u8,
        r.decision_return,
        r.planner_return,
        r.subgoal_arrivals,
        r.masked_windows,
        r.fallback_windows,
        r.planner_updates,
        loss,
        ade,
        fde,
        u.replay_len,
    )
}

/// Extracts supervised prediction samples from an episode: for every window
/// whose ego future is complete in the log, ego-frame ground-truth
/// trajectories for the ego and each surrounding slot with a full future.
fn windows_to_samples(
    windows: &[PendingWindow],
    log: &[TrajRecord],
) -> Vec<(usize, TrainingSample)> {
    let mut by_id: BTreeMap<u64, BTreeMap<usize, Pose>> = BTreeMap::new();
    for r in log {
        by_id
            .entry(r.id)
            .or_default()
            .insert(r.t, Pose::with_speed(r.x, r.y, r.heading, r.speed));
    }
    let mut out = Vec::new();
    for w in windows {
        let future = |id: u64| -> Option<Vec<Pose>> {
            let track = by_id.get(&id)?;
            (1..=T_F)
                .map(|k| track.get(&(w.t0 + k)).map(|p| to_ego_frame(&w.ego_pose, p)))
                .collect()
        };
        let Some(ego) = future(0) else {
            continue; // the episode ended inside this window
        };
        let mut surrounding = vec![vec![Pose::new(0.0, 0.0, 0.0); T_F]; N_S];
        let mut validity = vec![false; 1 + N_S];
        validity[0] = true;
        for (slot, id) in w.surr_ids.iter().enumerate() {
            if let Some(id) = id {
                if let Some(f) = future(*id) {
                    surrounding[slot] = f;
                    validity[1 + slot] = true;
                }
            }
        }
        out.push((
            w.t0,
            TrainingSample {
                state: w.state.clone(),
                subgoal: w.subgoal,
                truth: PredictedTrajectories { ego, surrounding, validity },
            },
        ));
    }
    out
}
