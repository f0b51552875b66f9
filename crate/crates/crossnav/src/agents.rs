//! The two policy levels and their value functions. The decision-maker
//! scores 12 candidate subgoals, applies the collision risk mask additively
//! to its logits, and samples one; the motion-planner picks one of 6
//! discrete pose deltas every simulation step to track that subgoal. Both
//! levels train with clipped-surrogate PPO over on-policy rollout buffers.

use crate::autodiff::{DiffError, ParamStore, Tape, Tensor, Var};
use crate::consts::{N_ACTIONS, N_SUBGOALS};
use crate::encoding::{SubgoalSet, VectorState};
use crate::gccp::RiskMask;
use crate::geometry::{normalize_angle, Pose};
use crate::nets::{
    encode_scene, mlp_forward, pose_mlp_forward, register_mlp, register_pose_mlp,
    register_scene_encoder, NetConfig,
};
use crate::sim::{ActionDelta, EventSet};
use rand::Rng;
use std::f64::consts::PI;

#[derive(Debug, thiserror::Error)]
pub enum AgentError {
    #[error("empty rollout buffer")]
    EmptyBuffer,
    #[error("non-finite logit at index {index}")]
    NonFiniteLogit { index: usize },
    #[error("bad ppo config: {0}")]
    BadConfig(&'static str),
    #[error(transparent)]
    Diff(#[from] DiffError),
}

// ---------------------------------------------------------------------------
// Rewards

/// Decision bonus for reaching the task goal inside a window.
pub const R_GOAL: f64 = 3.0;
/// Decision bonus for reaching the chosen subgoal inside a window.
pub const R_SUBGOAL: f64 = 0.5;
/// Constant term of the subgoal-distance shaping.
pub const R_NEAR: f64 = -0.5;
/// Per-metre weight of the subgoal-distance shaping.
pub const EPS_S: f64 = 0.05;
/// Per-step time penalty for the planner.
pub const R_TIME: f64 = -0.05;
/// Planner bonus while within the subgoal tolerance.
pub const R_ARRIVE: f64 = 1.0;
/// Planner penalty on a collision step.
pub const R_COLLIDE: f64 = -1.0;
/// Planner penalty on an off-road step.
pub const R_OFFROAD: f64 = -1.0;
/// Weight on per-step subgoal-distance progress.
pub const EPS_DIST: f64 = 0.05;
/// Weight on per-step heading-alignment progress.
pub const EPS_HEAD: f64 = 0.5;

/// Subgoal-arrival tolerances; tighter than the task-goal tolerances since
/// subgoals only guide 1 s horizons.
pub const SUBGOAL_DIST_TOL: f64 = 1.0;
pub const SUBGOAL_HEADING_TOL: f64 = PI / 6.0;

/// Distance and absolute normalized heading difference from `ego` to goal.
pub fn pose_gap(ego: &Pose, goal: &Pose) -> (f64, f64) {
    (ego.distance_to(goal), normalize_angle(ego.heading - goal.heading).abs())
}

/// True when the ego is within both subgoal-arrival tolerances.
pub fn subgoal_reached(ego: &Pose, subgoal: &Pose) -> bool {
    let (d, h) = pose_gap(ego, subgoal);
    d < SUBGOAL_DIST_TOL && h < SUBGOAL_HEADING_TOL
}

/// Window reward for the decision-maker. `d_subgoal` is the ego-to-subgoal
/// distance at selection time, so picking a far subgoal pays more.
pub fn decision_reward(goal_reached: bool, subgoal_reached: bool, d_subgoal: f64) -> f64 {
    let r_goal = if goal_reached { R_GOAL } else { 0.0 };
    let r_sub = if subgoal_reached { R_SUBGOAL } else { 0.0 };
    r_goal + r_sub + (R_NEAR + EPS_S * d_subgoal)
}

/// Per-step reward for the motion-planner: time penalty, arrival bonus,
/// event penalties, and shaping on distance/heading progress toward the
/// subgoal. All poses share one frame.
pub fn planner_reward(events: &EventSet, subgoal: &Pose, prev: &Pose, curr: &Pose) -> f64 {
    let (d_prev, h_prev) = pose_gap(prev, subgoal);
    let (d_curr, h_curr) = pose_gap(curr, subgoal);
    let r_arr = if subgoal_reached(curr, subgoal) { R_ARRIVE } else { 0.0 };
    let r_col = if events.collision { R_COLLIDE } else { 0.0 };
    let r_off = if events.off_road { R_OFFROAD } else { 0.0 };
    R_TIME + r_arr + r_col + r_off + EPS_DIST * (d_prev - d_curr) + EPS_HEAD * (h_prev - h_curr)
}

// ---------------------------------------------------------------------------
// Action table

pub const ACTION_NAMES: [&str; N_ACTIONS] =
    ["slow_down", "keep", "slow_left", "slow_right", "quick_left", "quick_right"];

/// Default per-step pose deltas (0.1 s, ego frame): ~5 m/s cruise, gentle
/// and sharp turn rates. Overridable through the run configuration.
pub fn default_action_table() -> [ActionDelta; N_ACTIONS] {
    [
        ActionDelta { dx: 0.2, dy: 0.0, dheading: 0.0 },
        ActionDelta { dx: 0.5, dy: 0.0, dheading: 0.0 },
        ActionDelta { dx: 0.5, dy: 0.0, dheading: 0.05 },
        ActionDelta { dx: 0.5, dy: 0.0, dheading: -0.05 },
        ActionDelta { dx: 0.45, dy: 0.0, dheading: 0.15 },
        ActionDelta { dx: 0.45, dy: 0.0, dheading: -0.15 },
    ]
}

// ---------------------------------------------------------------------------
// Masked categorical distributions

/// `softmax(logits + mask)` in plain f64. A masked logit carries -1e8, so
/// its probability underflows to exactly zero while every unmasked entry
/// keeps full precision.
pub fn masked_probabilities(logits: &[f64], mask: &[f64]) -> Result<Vec<f64>, AgentError> {
    assert_eq!(logits.len(), mask.len());
    for (index, l) in logits.iter().enumerate() {
        if !l.is_finite() {
            return Err(AgentError::NonFiniteLogit { index });
        }
    }
    let shifted: Vec<f64> = logits.iter().zip(mask).map(|(l, m)| l + m).collect();
    let peak = shifted.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = shifted.iter().map(|z| (z - peak).exp()).collect();
    let total: f64 = exps.iter().sum();
    Ok(exps.into_iter().map(|e| e / total).collect())
}

/// Inverse-CDF draw from a normalized probability vector. The rounding
/// fallback returns the most probable entry, so a zero-probability index
/// can never come out.
pub fn sample_categorical(probs: &[f64], rng: &mut impl Rng) -> usize {
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    for (i, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    argmax(probs)
}

/// Index of the largest value; the last one wins ties.
pub fn argmax(xs: &[f64]) -> usize {
    xs.iter().enumerate().max_by(|a, b| a.1.total_cmp(b.1)).map(|(i, _)| i).unwrap()
}

// ---------------------------------------------------------------------------
// Observations

/// Decision-maker observation: environment state plus the task goal in the
/// ego frame.
#[derive(Debug, Clone)]
pub struct DecisionState {
    pub env: VectorState,
    pub task_goal: Pose,
}

/// Motion-planner observation: environment state plus the chosen subgoal in
/// the ego frame.
#[derive(Debug, Clone)]
pub struct PlannerState {
    pub env: VectorState,
    pub subgoal: Pose,
}

/// Scene encoding fused with a conditioning pose (task goal or subgoal):
/// [ego feature | surrounding mean | drivable | pose embedding] -> dense ->
/// relu, one `embed`-wide feature.
fn conditioned_feature(
    tape: &mut Tape,
    store: &ParamStore,
    cfg: &NetConfig,
    ns: &str,
    env: &VectorState,
    cond: &Pose,
) -> Result<Var, DiffError> {
    let enc = encode_scene(tape, store, cfg, env)?;
    let ego = enc.vehicle_feature(tape, 0)?;
    let surr = enc.surr_mean_feature(tape)?;
    let f_c = pose_mlp_forward(tape, store, &format!("{ns}.cond"), cond)?;
    let cat = tape.concat1(&[ego, surr, enc.f_d, f_c])?;
    let fused = mlp_forward(tape, store, &format!("{ns}.fuse"), 1, cat)?;
    tape.relu(fused)
}

fn register_conditioned_trunk(
    store: &mut ParamStore,
    cfg: &NetConfig,
    rng: &mut impl Rng,
    ns: &str,
) -> Result<(), DiffError> {
    register_scene_encoder(store, cfg, rng)?;
    register_pose_mlp(store, cfg, rng, &format!("{ns}.cond"))?;
    register_mlp(store, rng, &format!("{ns}.fuse"), &[8 * cfg.embed, cfg.embed])
}

// ---------------------------------------------------------------------------
// Decision-maker networks

/// Subgoal-selection policy. Each subgoal is embedded by a 2-layer MLP,
/// concatenated with the goal-conditioned state feature, and scored by a
/// 3-layer MLP into one logit.
pub struct DecisionPolicy {
    pub store: ParamStore,
    pub cfg: NetConfig,
}

fn decision_logits_fwd(
    tape: &mut Tape,
    store: &ParamStore,
    cfg: &NetConfig,
    state: &DecisionState,
    subgoals: &SubgoalSet,
) -> Result<Var, DiffError> {
    let sf = conditioned_feature(tape, store, cfg, "dpol", &state.env, &state.task_goal)?;
    let mut logits = Vec::with_capacity(N_SUBGOALS);
    for g in &subgoals.goals {
        let fg = pose_mlp_forward(tape, store, "dpol.sub", g)?;
        let cat = tape.concat1(&[sf, fg])?;
        logits.push(mlp_forward(tape, store, "dpol.head", 3, cat)?);
    }
    tape.concat1(&logits)
}

/// One sampled decision with its full distribution.
#[derive(Debug, Clone)]
pub struct DecisionChoice {
    pub probs: [f64; N_SUBGOALS],
    pub index: usize,
    pub logp: f64,
}

impl DecisionPolicy {
    pub fn new(cfg: NetConfig, rng: &mut impl Rng) -> Result<Self, DiffError> {
        let mut store = ParamStore::new();
        register_conditioned_trunk(&mut store, &cfg, rng, "dpol")?;
        register_pose_mlp(&mut store, &cfg, rng, "dpol.sub")?;
        let l = cfg.embed;
        register_mlp(&mut store, rng, "dpol.head", &[2 * l, l, l, 1])?;
        Ok(DecisionPolicy { store, cfg })
    }

    /// Raw (unmasked) subgoal logits on the caller's tape, shape `[12]`.
    pub fn logits_on_tape(
        &self,
        tape: &mut Tape,
        state: &DecisionState,
        subgoals: &SubgoalSet,
    ) -> Result<Var, DiffError> {
        decision_logits_fwd(tape, &self.store, &self.cfg, state, subgoals)
    }

    pub fn logits(
        &self,
        state: &DecisionState,
        subgoals: &SubgoalSet,
    ) -> Result<[f64; N_SUBGOALS], AgentError> {
        let mut tape = Tape::new();
        let v = self.logits_on_tape(&mut tape, state, subgoals)?;
        let mut out = [0.0; N_SUBGOALS];
        out.copy_from_slice(tape.value(v).data());
        Ok(out)
    }

    /// Risk-masked subgoal distribution.
    pub fn probabilities(
        &self,
        state: &DecisionState,
        subgoals: &SubgoalSet,
        mask: &RiskMask,
    ) -> Result<[f64; N_SUBGOALS], AgentError> {
        let logits = self.logits(state, subgoals)?;
        let p = masked_probabilities(&logits, &mask.entries)?;
        Ok(p.try_into().unwrap())
    }

    pub fn act(
        &self,
        state: &DecisionState,
        subgoals: &SubgoalSet,
        mask: &RiskMask,
        rng: &mut impl Rng,
    ) -> Result<DecisionChoice, AgentError> {
        let probs = self.probabilities(state, subgoals, mask)?;
        let index = sample_categorical(&probs, rng);
        Ok(DecisionChoice { probs, index, logp: probs[index].ln() })
    }
}

/// Decision-maker value function: per-subgoal hidden vectors are
/// concatenated into one flat feature and regressed to a scalar.
pub struct DecisionValue {
    pub store: ParamStore,
    pub cfg: NetConfig,
}

fn decision_value_fwd(
    tape: &mut Tape,
    store: &ParamStore,
    cfg: &NetConfig,
    state: &DecisionState,
    subgoals: &SubgoalSet,
) -> Result<Var, DiffError> {
    let sf = conditioned_feature(tape, store, cfg, "dval", &state.env, &state.task_goal)?;
    let mut hidden = Vec::with_capacity(N_SUBGOALS);
    for g in &subgoals.goals {
        let fg = pose_mlp_forward(tape, store, "dval.sub", g)?;
        let cat = tape.concat1(&[sf, fg])?;
        hidden.push(mlp_forward(tape, store, "dval.hid", 2, cat)?);
    }
    let flat = tape.concat1(&hidden)?;
    mlp_forward(tape, store, "dval.out", 2, flat)
}

impl DecisionValue {
    pub fn new(cfg: NetConfig, rng: &mut impl Rng) -> Result<Self, DiffError> {
        let mut store = ParamStore::new();
        register_conditioned_trunk(&mut store, &cfg, rng, "dval")?;
        register_pose_mlp(&mut store, &cfg, rng, "dval.sub")?;
        let l = cfg.embed;
        register_mlp(&mut store, rng, "dval.hid", &[2 * l, l, l])?;
        register_mlp(&mut store, rng, "dval.out", &[N_SUBGOALS * l, l, 1])?;
        Ok(DecisionValue { store, cfg })
    }

    /// Scalar state value on the caller's tape, shape `[1]`.
    pub fn value_on_tape(
        &self,
        tape: &mut Tape,
        state: &DecisionState,
        subgoals: &SubgoalSet,
    ) -> Result<Var, DiffError> {
        decision_value_fwd(tape, &self.store, &self.cfg, state, subgoals)
    }

    pub fn value(&self, state: &DecisionState, subgoals: &SubgoalSet) -> Result<f64, AgentError> {
        let mut tape = Tape::new();
        let v = self.value_on_tape(&mut tape, state, subgoals)?;
        Ok(tape.value(v).item())
    }
}

// ---------------------------------------------------------------------------
// Motion-planner networks

/// Discrete-action policy over the 6 pose deltas.
pub struct PlannerPolicy {
    pub store: ParamStore,
    pub cfg: NetConfig,
}

fn planner_logits_fwd(
    tape: &mut Tape,
    store: &ParamStore,
    cfg: &NetConfig,
    state: &PlannerState,
) -> Result<Var, DiffError> {
    let sf = conditioned_feature(tape, store, cfg, "ppol", &state.env, &state.subgoal)?;
    mlp_forward(tape, store, "ppol.head", 3, sf)
}

/// One sampled planner action with its full distribution.
#[derive(Debug, Clone)]
pub struct PlannerChoice {
    pub probs: [f64; N_ACTIONS],
    pub index: usize,
    pub logp: f64,
}

impl PlannerPolicy {
    pub fn new(cfg: NetConfig, rng: &mut impl Rng) -> Result<Self, DiffError> {
        let mut store = ParamStore::new();
        register_conditioned_trunk(&mut store, &cfg, rng, "ppol")?;
        let l = cfg.embed;
        register_mlp(&mut store, rng, "ppol.head", &[l, l, l, N_ACTIONS])?;
        Ok(PlannerPolicy { store, cfg })
    }

    /// Raw action logits on the caller's tape, shape `[6]`.
    pub fn logits_on_tape(&self, tape: &mut Tape, state: &PlannerState) -> Result<Var, DiffError> {
        planner_logits_fwd(tape, &self.store, &self.cfg, state)
    }

    pub fn probabilities(&self, state: &PlannerState) -> Result<[f64; N_ACTIONS], AgentError> {
        let mut tape = Tape::new();
        let v = self.logits_on_tape(&mut tape, state)?;
        let p = masked_probabilities(tape.value(v).data(), &[0.0; N_ACTIONS])?;
        Ok(p.try_into().unwrap())
    }

    pub fn act(&self, state: &PlannerState, rng: &mut impl Rng) -> Result<PlannerChoice, AgentError> {
        let probs = self.probabilities(state)?;
        let index = sample_categorical(&probs, rng);
        Ok(PlannerChoice { probs, index, logp: probs[index].ln() })
    }
}

/// Motion-planner value function.
pub struct PlannerValue {
    pub store: ParamStore,
    pub cfg: NetConfig,
}

fn planner_value_fwd(
    tape: &mut Tape,
    store: &ParamStore,
    cfg: &NetConfig,
    state: &PlannerState,
) -> Result<Var, DiffError> {
    let sf = conditioned_feature(tape, store, cfg, "pval", &state.env, &state.subgoal)?;
    mlp_forward(tape, store, "pval.head", 3, sf)
}

impl PlannerValue {
    pub fn new(cfg: NetConfig, rng: &mut impl Rng) -> Result<Self, DiffError> {
        let mut store = ParamStore::new();
        register_conditioned_trunk(&mut store, &cfg, rng, "pval")?;
        let l = cfg.embed;
        register_mlp(&mut store, rng, "pval.head", &[l, l, l, 1])?;
        Ok(PlannerValue { store, cfg })
    }

    /// Scalar state value on the caller's tape, shape `[1]`.
    pub fn value_on_tape(&self, tape: &mut Tape, state: &PlannerState) -> Result<Var, DiffError> {
        planner_value_fwd(tape, &self.store, &self.cfg, state)
    }

    pub fn value(&self, state: &PlannerState) -> Result<f64, AgentError> {
        let mut tape = Tape::new();
        let v = self.value_on_tape(&mut tape, state)?;
        Ok(tape.value(v).item())
    }
}

// ---------------------------------------------------------------------------
// PPO

/// Two-phase step schedule: `initial` until `switch_step` gradient steps
/// have completed, `end` afterwards.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LrSchedule {
    pub initial: f64,
    pub end: f64,
    pub switch_step: u64,
}

impl LrSchedule {
    pub fn at(&self, completed_steps: u64) -> f64 {
        if completed_steps < self.switch_step {
            self.initial
        } else {
            self.end
        }
    }
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PpoConfig {
    pub discount: f64,
    pub gae_lambda: f64,
    pub clip: f64,
    pub entropy_coef: f64,
    /// Gradient steps per update call (K).
    pub epochs: usize,
    /// `None` trains on the whole buffer each epoch.
    pub minibatch: Option<usize>,
    pub lr: LrSchedule,
}

impl PpoConfig {
    /// Defaults for the decision-maker.
    pub fn decision() -> Self {
        PpoConfig {
            discount: 0.99,
            gae_lambda: 0.95,
            clip: 0.2,
            entropy_coef: 0.01,
            epochs: 5,
            minibatch: None,
            lr: LrSchedule { initial: 5e-5, end: 1e-5, switch_step: 2000 },
        }
    }

    /// Defaults for the motion-planner.
    pub fn planner() -> Self {
        PpoConfig { lr: LrSchedule { initial: 1e-4, end: 1e-5, switch_step: 2000 }, ..Self::decision() }
    }

    pub fn validate(&self) -> Result<(), AgentError> {
        if !(0.0..=1.0).contains(&self.discount) {
            return Err(AgentError::BadConfig("discount outside [0, 1]"));
        }
        if !(0.0..=1.0).contains(&self.gae_lambda) {
            return Err(AgentError::BadConfig("gae lambda outside [0, 1]"));
        }
        if !(self.clip > 0.0) {
            return Err(AgentError::BadConfig("clip ratio must be positive"));
        }
        if self.epochs == 0 {
            return Err(AgentError::BadConfig("epochs must be positive"));
        }
        Ok(())
    }
}

/// One decision-window transition.
#[derive(Debug, Clone)]
pub struct DecisionSample {
    pub state: DecisionState,
    pub subgoals: SubgoalSet,
    pub mask: RiskMask,
    pub action: usize,
    pub logp: f64,
    pub reward: f64,
    pub done: bool,
    /// Observation at the next decision boundary; `None` when the episode
    /// ended inside this window.
    pub next: Option<(DecisionState, SubgoalSet)>,
}

/// One planner-step transition.
#[derive(Debug, Clone)]
pub struct PlannerSample {
    pub state: PlannerState,
    pub action: usize,
    pub logp: f64,
    pub reward: f64,
    pub done: bool,
    pub next: Option<PlannerState>,
}

/// Generalized advantage estimation over one rollout, plain f64.
/// `next_values[t]` is the bootstrap value of the state after step `t`
/// (ignored at terminals). Returns `(advantages, returns)` with
/// `returns = advantages + values`.
pub fn gae_advantages(
    rewards: &[f64],
    values: &[f64],
    next_values: &[f64],
    dones: &[bool],
    discount: f64,
    lambda: f64,
) -> (Vec<f64>, Vec<f64>) {
    let n = rewards.len();
    assert!(n == values.len() && n == next_values.len() && n == dones.len());
    let mut adv = vec![0.0; n];
    let mut acc = 0.0;
    for t in (0..n).rev() {
        let cont = if dones[t] { 0.0 } else { 1.0 };
        let delta = rewards[t] + discount * cont * next_values[t] - values[t];
        acc = delta + discount * lambda * cont * acc;
        adv[t] = acc;
    }
    let ret = adv.iter().zip(values).map(|(a, v)| a + v).collect();
    (adv, ret)
}

/// Standardizes advantages to zero mean and unit variance. A single-sample
/// batch has no spread to standardize and passes through unchanged.
pub fn normalize_advantages(adv: &[f64]) -> Vec<f64> {
    if adv.len() < 2 {
        return adv.to_vec();
    }
    let n = adv.len() as f64;
    let mean = adv.iter().sum::<f64>() / n;
    let var = adv.iter().map(|a| (a - mean) * (a - mean)).sum::<f64>() / n;
    let std = var.sqrt();
    adv.iter().map(|a| (a - mean) / (std + 1e-8)).collect()
}

/// Loss values of one PPO epoch, measured before that epoch's step.
#[derive(Debug, Clone, Copy)]
pub struct PpoStats {
    pub policy_loss: f64,
    pub value_loss: f64,
    pub entropy: f64,
    pub policy_lr: f64,
    pub value_lr: f64,
}

/// Per-epoch statistics from one update call.
#[derive(Debug, Clone)]
pub struct PpoReport {
    pub epochs: Vec<PpoStats>,
}

struct PpoInputs {
    /// Additive logit masks, one `[n_actions]` tensor per sample.
    masks: Vec<Tensor>,
    actions: Vec<usize>,
    logp_old: Vec<f64>,
    advantages: Vec<f64>,
    returns: Vec<f64>,
    n_actions: usize,
}

/// Shared PPO epoch loop. Policy forwards recompute per-sample logits on a
/// fresh tape, re-apply the stored masks, and minimize the clipped
/// surrogate minus the entropy bonus; value forwards regress to returns.
fn ppo_epochs(
    cfg: &PpoConfig,
    inputs: &PpoInputs,
    policy_store: &mut ParamStore,
    value_store: &mut ParamStore,
    mut policy_logits: impl FnMut(&mut Tape, &ParamStore, usize) -> Result<Var, DiffError>,
    mut value_pred: impl FnMut(&mut Tape, &ParamStore, usize) -> Result<Var, DiffError>,
) -> Result<PpoReport, AgentError> {
    let n = inputs.actions.len();
    let chunk = cfg.minibatch.unwrap_or(n).max(1);
    let mut epochs = Vec::with_capacity(cfg.epochs);
    for _ in 0..cfg.epochs {
        let mut stats = PpoStats {
            policy_loss: 0.0,
            value_loss: 0.0,
            entropy: 0.0,
            policy_lr: cfg.lr.at(policy_store.step()),
            value_lr: cfg.lr.at(value_store.step()),
        };
        for start in (0..n).step_by(chunk) {
            let idx: Vec<usize> = (start..(start + chunk).min(n)).collect();
            let m = idx.len();
            let weight = m as f64 / n as f64;

            let mut tape = Tape::new();
            let mut rows = Vec::with_capacity(m);
            for &i in &idx {
                let l = policy_logits(&mut tape, policy_store, i)?;
                rows.push(tape.add_const(l, &inputs.masks[i])?);
            }
            let mat = tape.stack_rows(&rows)?;
            let lp = tape.log_softmax_last(mat)?;
            let a = inputs.n_actions;
            let mut oh = vec![0.0; m * a];
            for (r, &i) in idx.iter().enumerate() {
                oh[r * a + inputs.actions[i]] = 1.0;
            }
            let ohv = tape.input(Tensor::from_vec(&[m, a], oh))?;
            let picked = tape.mul(lp, ohv)?;
            let ones = tape.input(Tensor::from_vec(&[a, 1], vec![1.0; a]))?;
            let lp_new = tape.matmul(picked, ones)?;
            let lp_new = tape.reshape(lp_new, &[m])?;
            let old =
                tape.input(Tensor::from_vec(&[m], idx.iter().map(|&i| inputs.logp_old[i]).collect()))?;
            let diff = tape.sub(lp_new, old)?;
            let ratio = tape.exp(diff)?;
            let adv = tape
                .input(Tensor::from_vec(&[m], idx.iter().map(|&i| inputs.advantages[i]).collect()))?;
            let surr1 = tape.mul(ratio, adv)?;
            let clipped = tape.clamp(ratio, 1.0 - cfg.clip, 1.0 + cfg.clip)?;
            let surr2 = tape.mul(clipped, adv)?;
            let objective = tape.minimum(surr1, surr2)?;
            let mean_obj = tape.mean_all(objective)?;
            let policy_loss = tape.scale(mean_obj, -1.0)?;
            // Entropy bonus: -sum(p * log p) / m. Masked entries contribute
            // exactly zero (p underflows to 0 before multiplying).
            let p = tape.exp(lp)?;
            let plp = tape.mul(p, lp)?;
            let sum_plp = tape.sum_all(plp)?;
            let entropy = tape.scale(sum_plp, -1.0 / m as f64)?;
            let ent_pen = tape.scale(entropy, -cfg.entropy_coef)?;
            let total = tape.add(policy_loss, ent_pen)?;
            stats.policy_loss += weight * tape.value(policy_loss).item();
            stats.entropy += weight * tape.value(entropy).item();
            policy_store.zero_grads();
            tape.backward(total, policy_store, 1.0)?;
            policy_store.adam_step(cfg.lr.at(policy_store.step()));

            let mut vtape = Tape::new();
            let mut preds = Vec::with_capacity(m);
            for &i in &idx {
                preds.push(value_pred(&mut vtape, value_store, i)?);
            }
            let v = vtape.concat1(&preds)?;
            let target = vtape
                .input(Tensor::from_vec(&[m], idx.iter().map(|&i| inputs.returns[i]).collect()))?;
            let d = vtape.sub(v, target)?;
            let sq = vtape.mul(d, d)?;
            let value_loss = vtape.mean_all(sq)?;
            stats.value_loss += weight * vtape.value(value_loss).item();
            value_store.zero_grads();
            vtape.backward(value_loss, value_store, 1.0)?;
            value_store.adam_step(cfg.lr.at(value_store.step()));
        }
        epochs.push(stats);
    }
    Ok(PpoReport { epochs })
}

/// PPO update for the decision-maker over one episode's windows. Stored
/// risk masks are re-applied when recomputing log-probabilities, so masked
/// subgoals never re-enter the surrogate.
pub fn ppo_update_decision(
    policy: &mut DecisionPolicy,
    value: &mut DecisionValue,
    buffer: &[DecisionSample],
    cfg: &PpoConfig,
) -> Result<PpoReport, AgentError> {
    cfg.validate()?;
    if buffer.is_empty() {
        return Err(AgentError::EmptyBuffer);
    }
    let mut values = Vec::with_capacity(buffer.len());
    let mut next_values = Vec::with_capacity(buffer.len());
    for s in buffer {
        values.push(value.value(&s.state, &s.subgoals)?);
        next_values.push(match &s.next {
            Some((st, sg)) if !s.done => value.value(st, sg)?,
            _ => 0.0,
        });
    }
    let rewards: Vec<f64> = buffer.iter().map(|s| s.reward).collect();
    let dones: Vec<bool> = buffer.iter().map(|s| s.done).collect();
    let (adv, returns) =
        gae_advantages(&rewards, &values, &next_values, &dones, cfg.discount, cfg.gae_lambda);
    let inputs = PpoInputs {
        masks: buffer
            .iter()
            .map(|s| Tensor::from_vec(&[N_SUBGOALS], s.mask.entries.to_vec()))
            .collect(),
        actions: buffer.iter().map(|s| s.action).collect(),
        logp_old: buffer.iter().map(|s| s.logp).collect(),
        advantages: normalize_advantages(&adv),
        returns,
        n_actions: N_SUBGOALS,
    };
    let pcfg = policy.cfg;
    let vcfg = value.cfg;
    ppo_epochs(
        cfg,
        &inputs,
        &mut policy.store,
        &mut value.store,
        |tape, store, i| decision_logits_fwd(tape, store, &pcfg, &buffer[i].state, &buffer[i].subgoals),
        |tape, store, i| decision_value_fwd(tape, store, &vcfg, &buffer[i].state, &buffer[i].subgoals),
    )
}

/// PPO update for the motion-planner over one window's steps.
pub fn ppo_update_planner(
    policy: &mut PlannerPolicy,
    value: &mut PlannerValue,
    buffer: &[PlannerSample],
    cfg: &PpoConfig,
) -> Result<PpoReport, AgentError> {
    cfg.validate()?;
    if buffer.is_empty() {
        return Err(AgentError::EmptyBuffer);
    }
    let mut values = Vec::with_capacity(buffer.len());
    let mut next_values = Vec::with_capacity(buffer.len());
    for s in buffer {
        values.push(value.value(&s.state)?);
        next_values.push(match &s.next {
            Some(st) if !s.done => value.value(st)?,
            _ => 0.0,
        });
    }
    let rewards: Vec<f64> = buffer.iter().map(|s| s.reward).collect();
    let dones: Vec<bool> = buffer.iter().map(|s| s.done).collect();
    let (adv, returns) =
        gae_advantages(&rewards, &values, &next_values, &dones, cfg.discount, cfg.gae_lambda);
    let inputs = PpoInputs {
        masks: buffer.iter().map(|_| Tensor::zeros(&[N_ACTIONS])).collect(),
        actions: buffer.iter().map(|s| s.action).collect(),
        logp_old: buffer.iter().map(|s| s.logp).collect(),
        advantages: normalize_advantages(&adv),
        returns,
        n_actions: N_ACTIONS,
    };
    let pcfg = policy.cfg;
    let vcfg = value.cfg;
    ppo_epochs(
        cfg,
        &inputs,
        &mut policy.store,
        &mut value.store,
        |tape, store, i| planner_logits_fwd(tape, store, &pcfg, &buffer[i].state),
        |tape, store, i| planner_value_fwd(tape, store, &vcfg, &buffer[i].state),
    )
}

// ---------------------------------------------------------------------------

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::gradcheck::{check_params, jitter_params};
    use crate::consts::MASK_UNSAFE;
    use crate::encoding::{encode_state, sample_subgoals};
    use crate::roadnet::{build_scenario_with, ScenarioId, ScenarioParams};
    use crate::sim::{reset, step};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn sample_world(spawn_rate: f64, steps: usize, seed: u64) -> (VectorState, SubgoalSet, Pose) {
        let mut p = ScenarioParams::default();
        p.traffic.spawn_rate = spawn_rate;
        let s = build_scenario_with(ScenarioId::GoStraight, &p);
        let mut w = reset(&s, seed);
        for _ in 0..steps {
            step(&mut w, ActionDelta { dx: 0.2, dy: 0.0, dheading: 0.0 }).unwrap();
        }
        let env = encode_state(&w);
        let subgoals = sample_subgoals(&w).unwrap();
        let goal = crate::geometry::to_ego_frame(&w.ego.pose, &w.scenario.task_goal);
        (env, subgoals, goal)
    }

    fn decision_obs(seed: u64) -> (DecisionState, SubgoalSet) {
        let (env, subgoals, task_goal) = sample_world(0.4, 3, seed);
        (DecisionState { env, task_goal }, subgoals)
    }

    fn planner_obs(seed: u64) -> PlannerState {
        let (env, subgoals, _) = sample_world(0.4, 3, seed);
        PlannerState { env, subgoal: subgoals.goals[1] }
    }

    #[test]
    fn action_table_ordering_matches_names() {
        let table = default_action_table();
        assert_eq!(table.len(), N_ACTIONS);
        // quick turns steer strictly harder than slow turns
        assert!(table[4].dheading.abs() > table[2].dheading.abs());
        assert!(table[5].dheading.abs() > table[3].dheading.abs());
        // slow_down moves least
        let mag = |a: &ActionDelta| (a.dx * a.dx + a.dy * a.dy).sqrt();
        for other in &table[1..] {
            assert!(mag(&table[0]) < mag(other));
        }
        assert_eq!(ACTION_NAMES[0], "slow_down");
    }

    #[test]
    fn decision_reward_worked_examples_are_bit_exact() {
        assert_eq!(decision_reward(true, true, 20.0), 4.0);
        assert_eq!(decision_reward(false, false, 10.0), 0.0);
        assert_eq!(decision_reward(false, false, 5.0), -0.25);
    }

    #[test]
    fn planner_reward_worked_examples_are_bit_exact() {
        let goal = Pose::new(0.0, 0.0, 0.0);
        let none = EventSet::default();
        // distance 3.0 -> 2.5, heading gap 0.2 -> 0.1
        let prev = Pose::new(3.0, 0.0, 0.2);
        let curr = Pose::new(2.5, 0.0, 0.1);
        assert_eq!(planner_reward(&none, &goal, &prev, &curr), 0.025);
        // collision without motion
        let stuck = Pose::new(5.0, 0.0, 0.0);
        let collided = EventSet { collision: true, ..EventSet::default() };
        assert_eq!(planner_reward(&collided, &goal, &stuck, &stuck), -1.05);
        // sitting exactly on the subgoal
        assert_eq!(planner_reward(&none, &goal, &goal, &goal), 0.95);
    }

    #[test]
    fn subgoal_reached_respects_both_tolerances() {
        let goal = Pose::new(10.0, 0.0, 0.0);
        assert!(subgoal_reached(&Pose::new(10.5, 0.0, 0.3), &goal));
        assert!(!subgoal_reached(&Pose::new(11.5, 0.0, 0.0), &goal));
        assert!(!subgoal_reached(&Pose::new(10.5, 0.0, 0.7), &goal));
    }

    #[test]
    fn masked_entry_probability_is_below_threshold() {
        let logits = [1.0; N_SUBGOALS];
        let mut mask = [0.0; N_SUBGOALS];
        mask[1] = MASK_UNSAFE;
        let p = masked_probabilities(&logits, &mask).unwrap();
        assert!(p[1] < 1e-9);
        assert_eq!(p[1], 0.0);
        for i in 2..N_SUBGOALS {
            assert_eq!(p[i], p[0]);
        }
    }

    #[test]
    fn zero_mask_equals_plain_softmax() {
        let logits = [0.3, -1.2, 0.8, 2.0, -0.5, 0.0];
        let p = masked_probabilities(&logits, &[0.0; 6]).unwrap();
        let peak = 2.0;
        let exps: Vec<f64> = logits.iter().map(|l| (l - peak).exp()).collect();
        let total: f64 = exps.iter().sum();
        for (got, e) in p.iter().zip(&exps) {
            assert_eq!(*got, e / total);
        }
    }

    #[test]
    fn probabilities_sum_to_one_over_random_draws() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..1000 {
            let logits: Vec<f64> = (0..N_SUBGOALS).map(|_| rng.gen_range(-5.0..5.0)).collect();
            let mask: Vec<f64> =
                (0..N_SUBGOALS).map(|_| if rng.gen_bool(0.3) { MASK_UNSAFE } else { 0.0 }).collect();
            let p = masked_probabilities(&logits, &mask).unwrap();
            let total: f64 = p.iter().sum();
            assert!((total - 1.0).abs() < 1e-12, "sum {total}");
        }
    }

    #[test]
    fn non_finite_logit_is_an_error() {
        let mut logits = [0.0; N_SUBGOALS];
        logits[4] = f64::NAN;
        assert!(matches!(
            masked_probabilities(&logits, &[0.0; N_SUBGOALS]),
            Err(AgentError::NonFiniteLogit { index: 4 })
        ));
    }

    #[test]
    fn sampling_never_returns_a_zero_probability_index() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let probs = [0.5, 0.0, 0.5];
        for _ in 0..2000 {
            assert_ne!(sample_categorical(&probs, &mut rng), 1);
        }
    }

    #[test]
    fn decision_act_avoids_masked_subgoals() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let policy = DecisionPolicy::new(NetConfig::tiny(), &mut rng).unwrap();
        let (state, subgoals) = decision_obs(5);
        let mut flags = [false; N_SUBGOALS];
        for i in [0, 3, 7, 11] {
            flags[i] = true;
        }
        let mask = RiskMask::from_unsafe_flags(&flags);
        for _ in 0..300 {
            let choice = policy.act(&state, &subgoals, &mask, &mut rng).unwrap();
            assert!(!flags[choice.index]);
            assert!(choice.logp.is_finite());
        }
    }

    #[test]
    fn decision_probabilities_are_deterministic_and_normalized() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let policy = DecisionPolicy::new(NetConfig::tiny(), &mut rng).unwrap();
        let (state, subgoals) = decision_obs(8);
        let a = policy.probabilities(&state, &subgoals, &RiskMask::zeros()).unwrap();
        let b = policy.probabilities(&state, &subgoals, &RiskMask::zeros()).unwrap();
        assert_eq!(a, b);
        assert!((a.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn decision_value_is_finite_over_many_random_states() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let value = DecisionValue::new(NetConfig::tiny(), &mut rng).unwrap();
        for seed in 0..1000 {
            let (state, subgoals) = decision_obs(seed);
            let v = value.value(&state, &subgoals).unwrap();
            assert!(v.is_finite(), "seed {seed} gave {v}");
        }
    }

    #[test]
    fn planner_probabilities_are_deterministic_and_normalized() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let policy = PlannerPolicy::new(NetConfig::tiny(), &mut rng).unwrap();
        let state = planner_obs(9);
        let a = policy.probabilities(&state).unwrap();
        let b = policy.probabilities(&state).unwrap();
        assert_eq!(a, b);
        assert!((a.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn lr_schedule_switches_once() {
        let lr = LrSchedule { initial: 5e-5, end: 1e-5, switch_step: 2000 };
        assert_eq!(lr.at(0), 5e-5);
        assert_eq!(lr.at(1999), 5e-5);
        assert_eq!(lr.at(2000), 1e-5);
        assert_eq!(lr.at(1_000_000), 1e-5);
    }

    #[test]
    fn ppo_config_invariants_are_enforced() {
        assert!(PpoConfig::decision().validate().is_ok());
        assert!(PpoConfig::planner().validate().is_ok());
        let mut bad = PpoConfig::decision();
        bad.discount = 1.5;
        assert!(bad.validate().is_err());
        let mut bad = PpoConfig::decision();
        bad.clip = 0.0;
        assert!(bad.validate().is_err());
        let mut bad = PpoConfig::decision();
        bad.gae_lambda = -0.1;
        assert!(bad.validate().is_err());
    }

    #[test]
    fn gae_matches_brute_force_discounted_sums() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let n = 10;
        let rewards: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let values: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let next_values: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let mut dones = vec![false; n];
        dones[4] = true;
        dones[n - 1] = true;
        let (discount, lambda) = (0.99, 0.95);
        let (adv, ret) = gae_advantages(&rewards, &values, &next_values, &dones, discount, lambda);

        let delta = |t: usize| {
            let cont = if dones[t] { 0.0 } else { 1.0 };
            rewards[t] + discount * cont * next_values[t] - values[t]
        };
        for t in 0..n {
            let mut expected = 0.0;
            let mut factor = 1.0;
            for l in t..n {
                expected += factor * delta(l);
                if dones[l] {
                    break;
                }
                factor *= discount * lambda;
            }
            assert!((adv[t] - expected).abs() < 1e-10, "t={t}: {} vs {expected}", adv[t]);
            assert!((ret[t] - (expected + values[t])).abs() < 1e-10);
        }
    }

    #[test]
    fn zero_advantage_batch_leaves_policy_parameters_unchanged() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let mut policy = PlannerPolicy::new(NetConfig::tiny(), &mut rng).unwrap();
        let mut value = PlannerValue::new(NetConfig::tiny(), &mut rng).unwrap();
        let state = planner_obs(14);
        // Two identical terminal samples give identical raw advantages, and
        // standardization maps them both to exactly zero.
        let sample = PlannerSample {
            state: state.clone(),
            action: 2,
            logp: policy.probabilities(&state).unwrap()[2].ln(),
            reward: 0.7,
            done: true,
            next: None,
        };
        let buffer = vec![sample.clone(), sample];
        let mut cfg = PpoConfig::planner();
        cfg.entropy_coef = 0.0;
        let before_policy = policy.store.digest();
        let before_value = value.store.digest();
        ppo_update_planner(&mut policy, &mut value, &buffer, &cfg).unwrap();
        assert_eq!(policy.store.digest(), before_policy);
        assert_ne!(value.store.digest(), before_value);
    }

    #[test]
    fn value_regression_loss_decreases_monotonically() {
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        let mut policy = PlannerPolicy::new(NetConfig::tiny(), &mut rng).unwrap();
        let mut value = PlannerValue::new(NetConfig::tiny(), &mut rng).unwrap();
        let state = planner_obs(15);
        let logp = policy.probabilities(&state).unwrap()[1].ln();
        let buffer: Vec<PlannerSample> = (0..3)
            .map(|_| PlannerSample {
                state: state.clone(),
                action: 1,
                logp,
                reward: 2.0,
                done: true,
                next: None,
            })
            .collect();
        let report = ppo_update_planner(&mut policy, &mut value, &buffer, &PpoConfig::planner()).unwrap();
        assert_eq!(report.epochs.len(), 5);
        for w in report.epochs.windows(2) {
            assert!(
                w[1].value_loss < w[0].value_loss,
                "value loss not decreasing: {} -> {}",
                w[0].value_loss,
                w[1].value_loss
            );
        }
    }

    #[test]
    fn empty_buffer_is_an_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let mut policy = PlannerPolicy::new(NetConfig::tiny(), &mut rng).unwrap();
        let mut value = PlannerValue::new(NetConfig::tiny(), &mut rng).unwrap();
        assert!(matches!(
            ppo_update_planner(&mut policy, &mut value, &[], &PpoConfig::planner()),
            Err(AgentError::EmptyBuffer)
        ));
        let mut dp = DecisionPolicy::new(NetConfig::tiny(), &mut rng).unwrap();
        let mut dv = DecisionValue::new(NetConfig::tiny(), &mut rng).unwrap();
        assert!(matches!(
            ppo_update_decision(&mut dp, &mut dv, &[], &PpoConfig::decision()),
            Err(AgentError::EmptyBuffer)
        ));
    }

    #[test]
    fn decision_update_runs_and_moves_both_stores() {
        let mut rng = ChaCha8Rng::seed_from_u64(24);
        let mut policy = DecisionPolicy::new(NetConfig::tiny(), &mut rng).unwrap();
        let mut value = DecisionValue::new(NetConfig::tiny(), &mut rng).unwrap();
        let (s0, g0) = decision_obs(30);
        let (s1, g1) = decision_obs(31);
        let mut flags = [false; N_SUBGOALS];
        flags[5] = true;
        let mask = RiskMask::from_unsafe_flags(&flags);
        let c0 = policy.act(&s0, &g0, &mask, &mut rng).unwrap();
        let c1 = policy.act(&s1, &g1, &RiskMask::zeros(), &mut rng).unwrap();
        let buffer = vec![
            DecisionSample {
                state: s0.clone(),
                subgoals: g0.clone(),
                mask,
                action: c0.index,
                logp: c0.logp,
                reward: 1.5,
                done: false,
                next: Some((s1.clone(), g1.clone())),
            },
            DecisionSample {
                state: s1,
                subgoals: g1,
                mask: RiskMask::zeros(),
                action: c1.index,
                logp: c1.logp,
                reward: -0.25,
                done: true,
                next: None,
            },
        ];
        let before_policy = policy.store.digest();
        let before_value = value.store.digest();
        let report =
            ppo_update_decision(&mut policy, &mut value, &buffer, &PpoConfig::decision()).unwrap();
        assert_eq!(report.epochs.len(), 5);
        assert_ne!(policy.store.digest(), before_policy);
        assert_ne!(value.store.digest(), before_value);
        assert_eq!(policy.store.step(), 5);
        assert_eq!(value.store.step(), 5);
        for e in &report.epochs {
            assert!(e.policy_loss.is_finite() && e.value_loss.is_finite() && e.entropy > 0.0);
        }
    }

    // Finite-difference checks for all four networks. Each builds a scalar
    // by weighting the network output with fixed pseudo-random
    // coefficients.

    fn weighted_scalar(tape: &mut Tape, out: Var, seed: u64) -> f64 {
        let n = tape.value(out).len();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let w: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let wv = tape.mul_const(out, &Tensor::from_vec(&[n], w)).unwrap();
        let s = tape.sum_all(wv).unwrap();
        tape.value(s).item()
    }

    fn weighted_backward(tape: &mut Tape, out: Var, seed: u64, store: &mut ParamStore) {
        let n = tape.value(out).len();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let w: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let wv = tape.mul_const(out, &Tensor::from_vec(&[n], w)).unwrap();
        let s = tape.sum_all(wv).unwrap();
        tape.backward(s, store, 1.0).unwrap();
    }

    #[test]
    fn decision_policy_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(40);
        let mut net = DecisionPolicy::new(NetConfig::tiny(), &mut rng).unwrap();
        jitter_params(&mut net.store, 0.05, &mut rng).unwrap();
        let (state, subgoals) = decision_obs(41);
        let cfg = net.cfg;
        let mut store = std::mem::replace(&mut net.store, ParamStore::new());
        let check = check_params(
            &mut store,
            2,
            1e-5,
            &mut rng,
            |s| {
                let mut tape = Tape::new();
                let out = decision_logits_fwd(&mut tape, s, &cfg, &state, &subgoals).unwrap();
                weighted_scalar(&mut tape, out, 77)
            },
            |s| {
                let mut tape = Tape::new();
                let out = decision_logits_fwd(&mut tape, s, &cfg, &state, &subgoals).unwrap();
                weighted_backward(&mut tape, out, 77, s);
            },
        )
        .unwrap();
        assert!(check.checked > 60);
        assert!(check.worst < 1e-4, "worst rel err {}", check.worst);
    }

    #[test]
    fn decision_value_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let mut net = DecisionValue::new(NetConfig::tiny(), &mut rng).unwrap();
        jitter_params(&mut net.store, 0.05, &mut rng).unwrap();
        let (state, subgoals) = decision_obs(43);
        let cfg = net.cfg;
        let mut store = std::mem::replace(&mut net.store, ParamStore::new());
        let check = check_params(
            &mut store,
            2,
            1e-5,
            &mut rng,
            |s| {
                let mut tape = Tape::new();
                let out = decision_value_fwd(&mut tape, s, &cfg, &state, &subgoals).unwrap();
                weighted_scalar(&mut tape, out, 78)
            },
            |s| {
                let mut tape = Tape::new();
                let out = decision_value_fwd(&mut tape, s, &cfg, &state, &subgoals).unwrap();
                weighted_backward(&mut tape, out, 78, s);
            },
        )
        .unwrap();
        assert!(check.checked > 60);
        assert!(check.worst < 1e-4, "worst rel err {}", check.worst);
    }

    #[test]
    fn planner_policy_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(44);
        let mut net = PlannerPolicy::new(NetConfig::tiny(), &mut rng).unwrap();
        jitter_params(&mut net.store, 0.05, &mut rng).unwrap();
        let state = planner_obs(45);
        let cfg = net.cfg;
        let mut store = std::mem::replace(&mut net.store, ParamStore::new());
        let check = check_params(
            &mut store,
            2,
            1e-5,
            &mut rng,
            |s| {
                let mut tape = Tape::new();
                let out = planner_logits_fwd(&mut tape, s, &cfg, &state).unwrap();
                weighted_scalar(&mut tape, out, 79)
            },
            |s| {
                let mut tape = Tape::new();
                let out = planner_logits_fwd(&mut tape, s, &cfg, &state).unwrap();
                weighted_backward(&mut tape, out, 79, s);
            },
        )
        .unwrap();
        assert!(check.checked > 60);
        assert!(check.worst < 1e-4, "worst rel err {}", check.worst);
    }

    #[test]
    fn planner_value_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(46);
        let mut net = PlannerValue::new(NetConfig::tiny(), &mut rng).unwrap();
        jitter_params(&mut net.store, 0.05, &mut rng).unwrap();
        let state = planner_obs(47);
        let cfg = net.cfg;
        let mut store = std::mem::replace(&mut net.store, ParamStore::new());
        let check = check_params(
            &mut store,
            2,
            1e-5,
            &mut rng,
            |s| {
                let mut tape = Tape::new();
                let out = planner_value_fwd(&mut tape, s, &cfg, &state).unwrap();
                weighted_scalar(&mut tape, out, 80)
            },
            |s| {
                let mut tape = Tape::new();
                let out = planner_value_fwd(&mut tape, s, &cfg, &state).unwrap();
                weighted_backward(&mut tape, out, 80, s);
            },
        )
        .unwrap();
        assert!(check.checked > 60);
        assert!(check.worst < 1e-4, "worst rel err {}", check.worst);
    }

    #[test]
    fn checkpoint_roundtrip_restores_all_four_networks() {
        let mut rng = ChaCha8Rng::seed_from_u64(50);
        let dp = DecisionPolicy::new(NetConfig::tiny(), &mut rng).unwrap();
        let dv = DecisionValue::new(NetConfig::tiny(), &mut rng).unwrap();
        let pp = PlannerPolicy::new(NetConfig::tiny(), &mut rng).unwrap();
        let pv = PlannerValue::new(NetConfig::tiny(), &mut rng).unwrap();
        let dir = std::env::temp_dir().join(format!("crossnav_agents_ckpt_{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("agents.ckpt");
        crate::autodiff::save_checkpoint(
            &path,
            &[
                ("decision/policy", &dp.store),
                ("decision/value", &dv.store),
                ("planner/policy", &pp.store),
                ("planner/value", &pv.store),
            ],
        )
        .unwrap();
        let ckpt = crate::autodiff::load_checkpoint(&path).unwrap();
        let mut rng2 = ChaCha8Rng::seed_from_u64(999);
        let mut dp2 = DecisionPolicy::new(NetConfig::tiny(), &mut rng2).unwrap();
        let mut pv2 = PlannerValue::new(NetConfig::tiny(), &mut rng2).unwrap();
        assert_ne!(dp2.store.digest(), dp.store.digest());
        dp2.store.load_values(&ckpt, "decision/policy").unwrap();
        pv2.store.load_values(&ckpt, "planner/value").unwrap();
        assert_eq!(dp2.store.digest(), dp.store.digest());
        assert_eq!(pv2.store.digest(), pv.store.digest());
        std::fs::remove_dir_all(&dir).unwrap();
    }
}
