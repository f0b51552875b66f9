//! Goal-conditioned trajectory prediction: encodes the scene, embeds a
//! candidate subgoal, and decodes a 1 s future for the ego and every
//! surrounding slot. Also provides the constant-velocity baseline and the
//! displacement metrics used to evaluate it.

use crate::autodiff::{DiffError, ParamStore, Tape, Tensor, Var};
use crate::consts::{DT, N_S, T_F};
use crate::encoding::{TrajVector, VectorState};
use crate::geometry::Pose;
use crate::nets::{
    encode_scene, mlp_forward, pose_mlp_forward, register_mlp, register_pose_mlp,
    register_scene_encoder, EncodedScene, NetConfig,
};
use rand::Rng;

/// Fixed training-time learning rate.
pub const PREDICTOR_LR: f64 = 1e-4;

#[derive(Debug, thiserror::Error)]
pub enum PredictorError {
    #[error("empty training batch")]
    EmptyBatch,
    #[error("sample {index} has no valid vehicle")]
    EmptySample { index: usize },
    #[error(transparent)]
    Diff(#[from] DiffError),
}

/// Ego-frame trajectories over the prediction horizon. Used both for model
/// output and for ground-truth futures in training samples.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictedTrajectories {
    /// Exactly `T_F` poses.
    pub ego: Vec<Pose>,
    /// `N_S` slots of `T_F` poses each.
    pub surrounding: Vec<Vec<Pose>>,
    /// Ego plus surrounding, length `1 + N_S`. Slots that are empty, or
    /// whose ground-truth future ended early, are flagged false.
    pub validity: Vec<bool>,
}

/// One supervised example; states are only collected at decision boundaries
/// (`t mod T_M = 0`).
#[derive(Debug, Clone)]
pub struct TrainingSample {
    pub state: VectorState,
    /// Ego-frame subgoal the ego was pursuing over the sample's future.
    pub subgoal: Pose,
    pub truth: PredictedTrajectories,
}

pub struct Predictor {
    pub store: ParamStore,
    pub cfg: NetConfig,
    /// When false the subgoal embedding is forced to zero and predictions
    /// become independent of the subgoal argument.
    pub goal_conditioning: bool,
}

impl Predictor {
    pub fn new(
        cfg: NetConfig,
        goal_conditioning: bool,
        rng: &mut impl Rng,
    ) -> Result<Self, DiffError> {
        let mut store = ParamStore::new();
        register_scene_encoder(&mut store, &cfg, rng)?;
        register_pose_mlp(&mut store, &cfg, rng, "pred.goal")?;
        register_mlp(&mut store, rng, "pred.dec", &[5 * cfg.embed, cfg.embed, T_F * 3])?;
        Ok(Predictor { store, cfg, goal_conditioning })
    }

    fn goal_feature(&self, tape: &mut Tape, subgoal: &Pose) -> Result<Var, DiffError> {
        if self.goal_conditioning {
            pose_mlp_forward(tape, &self.store, "pred.goal", subgoal)
        } else {
            tape.input(Tensor::zeros(&[self.cfg.embed]))
        }
    }

    fn decode(
        &self,
        tape: &mut Tape,
        enc: &EncodedScene,
        f_g: Var,
    ) -> Result<Vec<Var>, DiffError> {
        (0..=N_S)
            .map(|i| {
                let veh = enc.vehicle_feature(tape, i)?;
                let feat = tape.concat1(&[veh, enc.f_d, f_g])?;
                let flat = mlp_forward(tape, &self.store, "pred.dec", 2, feat)?;
                tape.reshape(flat, &[T_F, 3])
            })
            .collect()
    }

    /// Raw forward pass on the caller's tape: one `[T_F, 3]` output per
    /// vehicle (index 0 = ego), positions and headings in raw ego-frame
    /// units.
    pub fn forward(
        &self,
        tape: &mut Tape,
        state: &VectorState,
        subgoal: &Pose,
    ) -> Result<Vec<Var>, DiffError> {
        let enc = encode_scene(tape, &self.store, &self.cfg, state)?;
        let f_g = self.goal_feature(tape, subgoal)?;
        self.decode(tape, &enc, f_g)
    }

    /// Forward for many subgoals of the same state, running the scene
    /// encoder once. Deterministic ops make each decode equal to an
    /// independent [`Predictor::forward`] call bit for bit.
    pub fn forward_shared(
        &self,
        tape: &mut Tape,
        state: &VectorState,
        subgoals: &[Pose],
    ) -> Result<Vec<Vec<Var>>, DiffError> {
        let enc = encode_scene(tape, &self.store, &self.cfg, state)?;
        subgoals
            .iter()
            .map(|g| {
                let f_g = self.goal_feature(tape, g)?;
                self.decode(tape, &enc, f_g)
            })
            .collect()
    }

    pub fn predict(
        &self,
        state: &VectorState,
        subgoal: &Pose,
    ) -> Result<PredictedTrajectories, DiffError> {
        let mut tape = Tape::new();
        let outs = self.forward(&mut tape, state, subgoal)?;
        Ok(trajectories_from_vars(&tape, &outs, state))
    }

    /// [`Predictor::predict`] for many subgoals with a single encoder pass.
    pub fn predict_batch(
        &self,
        state: &VectorState,
        subgoals: &[Pose],
    ) -> Result<Vec<PredictedTrajectories>, DiffError> {
        let mut tape = Tape::new();
        let all = self.forward_shared(&mut tape, state, subgoals)?;
        Ok(all.iter().map(|outs| trajectories_from_vars(&tape, outs, state)).collect())
    }

    /// One supervised step: smooth-L1 between predictions and ground truth,
    /// averaged over the `T_F x 3` elements of each vehicle, over the valid
    /// vehicles of each sample, and over the batch; then one adam update at
    /// the fixed learning rate. Returns the pre-update loss.
    pub fn train_step(&mut self, batch: &[TrainingSample]) -> Result<f64, PredictorError> {
        if batch.is_empty() {
            return Err(PredictorError::EmptyBatch);
        }
        let mut tape = Tape::new();
        let mut sample_losses = Vec::with_capacity(batch.len());
        for (index, sample) in batch.iter().enumerate() {
            let outs = self.forward(&mut tape, &sample.state, &sample.subgoal)?;
            let mut vehicle_losses = Vec::new();
            for i in 0..=N_S {
                if !sample.truth.validity[i] {
                    continue;
                }
                let poses =
                    if i == 0 { &sample.truth.ego } else { &sample.truth.surrounding[i - 1] };
                let truth = tape.input(future_tensor(poses))?;
                let elems = tape.smooth_l1(outs[i], truth)?;
                vehicle_losses.push(tape.mean_all(elems)?);
            }
            let Some(&first) = vehicle_losses.first() else {
                return Err(PredictorError::EmptySample { index });
            };
            let mut sum = first;
            for &v in &vehicle_losses[1..] {
                sum = tape.add(sum, v)?;
            }
            sample_losses.push(tape.scale(sum, 1.0 / vehicle_losses.len() as f64)?);
        }
        let mut sum = sample_losses[0];
        for &v in &sample_losses[1..] {
            sum = tape.add(sum, v)?;
        }
        let loss = tape.scale(sum, 1.0 / batch.len() as f64)?;
        self.store.zero_grads();
        tape.backward(loss, &mut self.store, 1.0)?;
        self.store.adam_step(PREDICTOR_LR);
        Ok(tape.value(loss).item())
    }
}

/// `[T_F, 3]` ground-truth tensor in raw units, matching the decoder output
/// layout.
pub fn future_tensor(poses: &[Pose]) -> Tensor {
    debug_assert_eq!(poses.len(), T_F);
    let mut data = Vec::with_capacity(T_F * 3);
    for p in poses {
        data.push(p.x);
        data.push(p.y);
        data.push(p.heading);
    }
    Tensor::from_vec(&[T_F, 3], data)
}

fn trajectories_from_vars(
    tape: &Tape,
    outs: &[Var],
    state: &VectorState,
) -> PredictedTrajectories {
    let to_poses = |v: Var| -> Vec<Pose> {
        let t = tape.value(v);
        (0..T_F)
            .map(|k| Pose::new(t.data()[k * 3], t.data()[k * 3 + 1], t.data()[k * 3 + 2]))
            .collect()
    };
    let ego = to_poses(outs[0]);
    let surrounding = (1..=N_S).map(|i| to_poses(outs[i])).collect();
    let mut validity = vec![true];
    validity.extend_from_slice(&state.surr_valid);
    PredictedTrajectories { ego, surrounding, validity }
}

/// Constant-velocity baseline: every vehicle, ego included, keeps its
/// current speed along its current heading for the full horizon.
pub fn cv_predict(state: &VectorState) -> PredictedTrajectories {
    let roll = |hist: &[TrajVector]| -> Vec<Pose> {
        let last = hist.last().expect("histories have fixed nonzero length");
        let p = last.p_curr;
        let speed = p.speed.unwrap_or_else(|| p.distance_to(&last.p_prev) / DT);
        let (s, c) = p.heading.sin_cos();
        (1..=T_F)
            .map(|k| {
                let d = speed * DT * k as f64;
                Pose::new(p.x + c * d, p.y + s * d, p.heading)
            })
            .collect()
    };
    let ego = roll(&state.ego_history);
    let surrounding = state.surr_histories.iter().map(|h| roll(h)).collect();
    let mut validity = vec![true];
    validity.extend_from_slice(&state.surr_valid);
    PredictedTrajectories { ego, surrounding, validity }
}

/// Average and final displacement error over one trajectory pair, positions
/// only. Both trajectories must cover the same horizon.
pub fn ade_fde(pred: &[Pose], truth: &[Pose]) -> (f64, f64) {
    assert_eq!(pred.len(), truth.len(), "ade_fde requires equal horizons");
    assert!(!pred.is_empty());
    let d: Vec<f64> = pred.iter().zip(truth).map(|(a, b)| a.distance_to(b)).collect();
    let ade = d.iter().sum::<f64>() / d.len() as f64;
    (ade, *d.last().unwrap())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::gradcheck::{check_params, jitter_params};
    use crate::autodiff::{load_checkpoint, save_checkpoint};
    use crate::encoding::encode_state;
    use crate::roadnet::{build_scenario_with, ScenarioId, ScenarioParams};
    use crate::sim::{reset, step, ActionDelta};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn sample_state(spawn_rate: f64, steps: usize, seed: u64) -> VectorState {
        let mut p = ScenarioParams::default();
        p.traffic.spawn_rate = spawn_rate;
        let s = build_scenario_with(ScenarioId::GoStraight, &p);
        let mut w = reset(&s, seed);
        for _ in 0..steps {
            step(&mut w, ActionDelta { dx: 0.2, dy: 0.0, dheading: 0.0 }).unwrap();
        }
        encode_state(&w)
    }

    fn tiny_predictor(seed: u64, goal_conditioning: bool) -> Predictor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Predictor::new(NetConfig::tiny(), goal_conditioning, &mut rng).unwrap()
    }

    /// Overwrites the last history vector so the vehicle is at `pose` with
    /// the given speed, leaving the rest of the state untouched.
    fn pin_current(hist: &mut [TrajVector], pose: Pose, speed: f64) {
        let last = hist.last_mut().unwrap();
        last.p_curr = Pose::with_speed(pose.x, pose.y, pose.heading, speed);
        last.p_prev = last.p_curr;
    }

    #[test]
    fn predict_output_has_fixed_shape_and_state_validity() {
        let p = tiny_predictor(0, true);
        let state = sample_state(0.6, 40, 17);
        let out = p.predict(&state, &Pose::new(10.0, 0.0, 0.0)).unwrap();
        assert_eq!(out.ego.len(), T_F);
        assert_eq!(out.surrounding.len(), N_S);
        for s in &out.surrounding {
            assert_eq!(s.len(), T_F);
        }
        assert_eq!(out.validity.len(), 1 + N_S);
        assert!(out.validity[0]);
        assert_eq!(&out.validity[1..], &state.surr_valid);
    }

    #[test]
    fn cv_predict_extrapolates_speed_along_heading() {
        let mut state = sample_state(0.6, 40, 17);
        pin_current(&mut state.ego_history, Pose::new(0.0, 0.0, 0.0), 5.0);
        pin_current(&mut state.surr_histories[0], Pose::new(3.0, 4.0, 0.0), 0.0);
        pin_current(
            &mut state.surr_histories[1],
            Pose::new(1.0, -2.0, std::f64::consts::FRAC_PI_2),
            2.0,
        );
        let out = cv_predict(&state);
        for (k, p) in out.ego.iter().enumerate() {
            assert!((p.x - 0.5 * (k + 1) as f64).abs() < 1e-12);
            assert!(p.y.abs() < 1e-12);
        }
        for p in &out.surrounding[0] {
            assert_eq!((p.x, p.y), (3.0, 4.0));
        }
        for (k, p) in out.surrounding[1].iter().enumerate() {
            assert!((p.x - 1.0).abs() < 1e-12);
            assert!((p.y - (-2.0 + 0.2 * (k + 1) as f64)).abs() < 1e-12);
        }
    }

    #[test]
    fn cv_predict_falls_back_to_history_displacement_for_speed() {
        let mut state = sample_state(0.0, 3, 1);
        let last = state.ego_history.last_mut().unwrap();
        last.p_prev = Pose::new(-0.3, 0.0, 0.0);
        last.p_curr = Pose::new(0.0, 0.0, 0.0);
        let out = cv_predict(&state);
        assert!((out.ego[0].x - 0.3).abs() < 1e-12);
        assert!((out.ego[9].x - 3.0).abs() < 1e-12);
    }

    #[test]
    fn constant_offset_of_3_gives_loss_2_5() {
        let mut p = tiny_predictor(1, true);
        let state = sample_state(0.6, 40, 17);
        let subgoal = Pose::new(8.0, 1.0, 0.1);

        // Build the truth from the raw forward outputs so heading
        // normalization cannot disturb the offset.
        let mut tape = Tape::new();
        let outs = p.forward(&mut tape, &state, &subgoal).unwrap();
        let shifted = |v: Var| -> Vec<Pose> {
            let t = tape.value(v);
            (0..T_F)
                .map(|k| Pose {
                    x: t.data()[k * 3] + 3.0,
                    y: t.data()[k * 3 + 1] + 3.0,
                    heading: t.data()[k * 3 + 2] + 3.0,
                    speed: None,
                })
                .collect()
        };
        let truth = PredictedTrajectories {
            ego: shifted(outs[0]),
            surrounding: (1..=N_S).map(|i| shifted(outs[i])).collect(),
            validity: std::iter::once(true).chain(state.surr_valid).collect(),
        };
        let batch = vec![TrainingSample { state, subgoal, truth }];
        let loss = p.train_step(&batch).unwrap();
        assert!((loss - 2.5).abs() < 1e-12, "loss {loss}");
    }

    #[test]
    fn exact_truth_gives_zero_loss() {
        let mut p = tiny_predictor(2, true);
        let state = sample_state(0.6, 40, 17);
        let subgoal = Pose::new(8.0, -1.0, 0.0);
        let mut tape = Tape::new();
        let outs = p.forward(&mut tape, &state, &subgoal).unwrap();
        let raw = |v: Var| -> Vec<Pose> {
            let t = tape.value(v);
            (0..T_F)
                .map(|k| Pose {
                    x: t.data()[k * 3],
                    y: t.data()[k * 3 + 1],
                    heading: t.data()[k * 3 + 2],
                    speed: None,
                })
                .collect()
        };
        let truth = PredictedTrajectories {
            ego: raw(outs[0]),
            surrounding: (1..=N_S).map(|i| raw(outs[i])).collect(),
            validity: std::iter::once(true).chain(state.surr_valid).collect(),
        };
        let batch = vec![TrainingSample { state, subgoal, truth }];
        assert_eq!(p.train_step(&batch).unwrap(), 0.0);
    }

    #[test]
    fn train_loss_matches_scalar_oracle() {
        let mut p = tiny_predictor(3, true);
        let smooth = |d: f64| if d.abs() < 1.0 { 0.5 * d * d } else { d.abs() - 0.5 };
        let mut batch = Vec::new();
        for seed in [5, 11, 23, 31] {
            let state = sample_state(0.5, 30 + seed as usize, seed);
            let subgoal = Pose::new(6.0 + seed as f64 * 0.3, -1.0, 0.05);
            let mut truth = cv_predict(&state);
            // Perturb so smooth-L1 exercises both branches.
            for (i, pose) in truth.ego.iter_mut().enumerate() {
                pose.x += 0.1 * i as f64;
                pose.heading += 2.0;
            }
            for traj in &mut truth.surrounding {
                for (i, pose) in traj.iter_mut().enumerate() {
                    pose.y -= 0.3 * i as f64;
                }
            }
            batch.push(TrainingSample { state, subgoal, truth });
        }

        // Oracle: plain-f64 recomputation from independent forward passes.
        let mut oracle_sum = 0.0;
        for s in &batch {
            let mut tape = Tape::new();
            let outs = p.forward(&mut tape, &s.state, &s.subgoal).unwrap();
            let mut veh_sum = 0.0;
            let mut veh_n = 0usize;
            for i in 0..=N_S {
                if !s.truth.validity[i] {
                    continue;
                }
                let poses = if i == 0 { &s.truth.ego } else { &s.truth.surrounding[i - 1] };
                let pred = tape.value(outs[i]).data().to_vec();
                let truth = future_tensor(poses);
                let total: f64 = pred
                    .iter()
                    .zip(truth.data())
                    .map(|(a, b)| smooth(a - b))
                    .sum();
                veh_sum += total / (T_F * 3) as f64;
                veh_n += 1;
            }
            oracle_sum += veh_sum / veh_n as f64;
        }
        let oracle = oracle_sum / batch.len() as f64;
        let loss = p.train_step(&batch).unwrap();
        assert!((loss - oracle).abs() < 1e-10, "loss {loss} oracle {oracle}");
    }

    #[test]
    fn empty_batch_is_an_error() {
        let mut p = tiny_predictor(4, true);
        assert!(matches!(p.train_step(&[]), Err(PredictorError::EmptyBatch)));
    }

    #[test]
    fn loss_strictly_decreases_over_first_50_steps() {
        let mut p = tiny_predictor(5, true);
        let mut batch = Vec::new();
        for seed in [2, 9] {
            let state = sample_state(0.5, 35, seed);
            let subgoal = Pose::new(7.0, 0.5, 0.0);
            let truth = cv_predict(&state);
            batch.push(TrainingSample { state, subgoal, truth });
        }
        let mut prev = f64::INFINITY;
        for step in 0..50 {
            let loss = p.train_step(&batch).unwrap();
            assert!(loss < prev, "step {step}: {loss} !< {prev}");
            prev = loss;
        }
    }

    #[test]
    fn goal_conditioning_off_ignores_the_subgoal() {
        let p = tiny_predictor(6, false);
        let state = sample_state(0.6, 40, 17);
        let a = p.predict(&state, &Pose::new(5.0, 0.0, 0.0)).unwrap();
        let b = p.predict(&state, &Pose::new(-3.0, 12.0, 1.2)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn goal_conditioning_on_feeds_the_subgoal_through() {
        let p = tiny_predictor(6, true);
        let state = sample_state(0.6, 40, 17);
        let a = p.predict(&state, &Pose::new(5.0, 0.0, 0.0)).unwrap();
        let b = p.predict(&state, &Pose::new(-3.0, 12.0, 1.2)).unwrap();
        assert_ne!(a.ego, b.ego);
        let changed = a
            .surrounding
            .iter()
            .zip(&b.surrounding)
            .zip(&a.validity[1..])
            .any(|((x, y), &valid)| valid && x != y);
        assert!(changed, "surrounding predictions must also depend on the subgoal");
    }

    #[test]
    fn batched_subgoals_equal_independent_calls_bitwise() {
        let p = tiny_predictor(7, true);
        let state = sample_state(0.6, 40, 17);
        let subgoals: Vec<Pose> = (0..12)
            .map(|i| Pose::new(2.0 + i as f64, (i % 3) as f64 - 1.0, 0.05 * i as f64))
            .collect();
        let batched = p.predict_batch(&state, &subgoals).unwrap();
        for (g, want) in subgoals.iter().zip(&batched) {
            let single = p.predict(&state, g).unwrap();
            assert_eq!(&single, want);
        }
    }

    #[test]
    fn predictor_gradients_match_finite_differences() {
        let mut p = tiny_predictor(8, true);
        let mut jrng = ChaCha8Rng::seed_from_u64(90);
        jitter_params(&mut p.store, 0.05, &mut jrng).unwrap();
        let state = sample_state(0.6, 40, 17);
        let subgoal = Pose::new(6.0, 0.0, 0.0);
        let mut truth = cv_predict(&state);
        for pose in &mut truth.ego {
            pose.y += 1.7;
        }
        let sample = TrainingSample { state, subgoal, truth };

        let loss_of = |p: &Predictor, tape: &mut Tape| -> Var {
            let outs = p.forward(tape, &sample.state, &sample.subgoal).unwrap();
            let mut parts = Vec::new();
            for i in 0..=N_S {
                if !sample.truth.validity[i] {
                    continue;
                }
                let poses =
                    if i == 0 { &sample.truth.ego } else { &sample.truth.surrounding[i - 1] };
                let t = tape.input(future_tensor(poses)).unwrap();
                let e = tape.smooth_l1(outs[i], t).unwrap();
                parts.push(tape.mean_all(e).unwrap());
            }
            let mut sum = parts[0];
            for &v in &parts[1..] {
                sum = tape.add(sum, v).unwrap();
            }
            sum
        };

        let cfg = p.cfg;
        let goal = p.goal_conditioning;
        let mut store = std::mem::replace(&mut p.store, ParamStore::new());
        let rebuild = |s: &ParamStore| Predictor {
            store: s.clone(),
            cfg,
            goal_conditioning: goal,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        let report = check_params(
            &mut store,
            2,
            1e-5,
            &mut rng,
            |s| {
                let q = rebuild(s);
                let mut tape = Tape::new();
                let l = loss_of(&q, &mut tape);
                tape.value(l).item()
            },
            |s| {
                let q = rebuild(s);
                let mut tape = Tape::new();
                let l = loss_of(&q, &mut tape);
                let mut sink = s.clone();
                tape.backward(l, &mut sink, 1.0).unwrap();
                *s = sink;
            },
        )
        .unwrap();
        assert!(report.checked > 60);
        assert!(report.worst < 1e-4, "worst rel err {}", report.worst);
    }

    #[test]
    fn ade_fde_worked_examples() {
        let a: Vec<Pose> = (1..=10).map(|t| Pose::new(t as f64, 0.0, 0.0)).collect();
        assert_eq!(ade_fde(&a, &a), (0.0, 0.0));

        let lateral: Vec<Pose> = a.iter().map(|p| Pose::new(p.x, 1.0, 0.0)).collect();
        let (ade, fde) = ade_fde(&a, &lateral);
        assert!((ade - 1.0).abs() < 1e-12 && (fde - 1.0).abs() < 1e-12);

        let growing: Vec<Pose> =
            (1..=10).map(|t| Pose::new(t as f64 + 0.1 * t as f64, 0.0, 0.0)).collect();
        let (ade, fde) = ade_fde(&a, &growing);
        assert!((ade - 0.55).abs() < 1e-12, "ade {ade}");
        assert!((fde - 1.0).abs() < 1e-12, "fde {fde}");
    }

    #[test]
    fn checkpoint_roundtrip_preserves_every_parameter() {
        let p = tiny_predictor(9, true);
        let dir = std::env::temp_dir().join("crossnav_pred_ckpt_test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("pred.ckpt");
        save_checkpoint(&path, &[("predictor", &p.store)]).unwrap();
        let ckpt = load_checkpoint(&path).unwrap();
        let mut q = tiny_predictor(10, true);
        assert_ne!(p.store.digest(), q.store.digest());
        q.store.load_values(&ckpt, "predictor").unwrap();
        assert_eq!(p.store.digest(), q.store.digest());
        std::fs::remove_file(&path).unwrap();
    }
}
