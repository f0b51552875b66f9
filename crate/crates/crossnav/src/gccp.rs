//! Goal-conditioned collision prediction: rolls every candidate subgoal
//! through the trajectory predictor and masks the ones whose predicted
//! future collides with predicted surrounding traffic.

use crate::autodiff::DiffError;
use crate::consts::{MASK_UNSAFE, N_SUBGOALS};
use crate::encoding::{SubgoalSet, VectorState};
use crate::geometry::{trajectories_collide, GeometryError, Pose};
use crate::predictor::{cv_predict, PredictedTrajectories, Predictor};
use serde::{Deserialize, Serialize};

#[derive(Debug, thiserror::Error)]
pub enum GccpError {
    #[error(transparent)]
    Diff(#[from] DiffError),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

/// How candidate subgoals are screened for collision risk.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GccpMode {
    /// Ego and surrounding futures both from the learned predictor.
    Learned,
    /// Ego future from the learned predictor, surrounding futures from the
    /// constant-velocity baseline.
    Cv,
    /// No screening: the mask is always zero.
    Disabled,
}

impl GccpMode {
    pub const ALL: [GccpMode; 3] = [GccpMode::Learned, GccpMode::Cv, GccpMode::Disabled];

    pub fn as_str(&self) -> &'static str {
        match self {
            GccpMode::Learned => "learned",
            GccpMode::Cv => "cv",
            GccpMode::Disabled => "disabled",
        }
    }
}

impl std::fmt::Display for GccpMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for GccpMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "learned" => Ok(GccpMode::Learned),
            "cv" => Ok(GccpMode::Cv),
            "disabled" => Ok(GccpMode::Disabled),
            other => Err(format!("unknown gccp mode {other:?} (learned|cv|disabled)")),
        }
    }
}

/// Additive logit mask over the 12 subgoal candidates; every entry is
/// either 0 or the unsafe sentinel.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RiskMask {
    pub entries: [f64; N_SUBGOALS],
}

impl RiskMask {
    pub fn zeros() -> Self {
        RiskMask { entries: [0.0; N_SUBGOALS] }
    }

    pub fn from_unsafe_flags(flags: &[bool; N_SUBGOALS]) -> Self {
        let mut entries = [0.0; N_SUBGOALS];
        for (e, &f) in entries.iter_mut().zip(flags) {
            if f {
                *e = MASK_UNSAFE;
            }
        }
        RiskMask { entries }
    }
}

/// Everything one screening pass produced, including the inputs to the
/// fallback rule and the per-subgoal futures for tracing.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskReport {
    /// The mask handed to the decision-maker (post-fallback).
    pub mask: RiskMask,
    /// Raw per-subgoal collision verdicts, before the fallback rule.
    pub unsafe_flags: [bool; N_SUBGOALS],
    /// True when every subgoal predicted a collision; the mask above was
    /// then replaced by zeros so the policy distribution stays defined.
    pub fallback: bool,
    /// Per-subgoal futures exactly as screened (`None` in disabled mode).
    pub predictions: Option<Vec<PredictedTrajectories>>,
}

/// Screens all 12 subgoals. Pure in (state, subgoals, predictor parameters,
/// mode): identical inputs give identical reports. `footprint` is the
/// (length, width) box swept along every trajectory.
pub fn compute_mask(
    state: &VectorState,
    subgoals: &SubgoalSet,
    predictor: &Predictor,
    mode: GccpMode,
    footprint: (f64, f64),
) -> Result<MaskReport, GccpError> {
    if mode == GccpMode::Disabled {
        return Ok(MaskReport {
            mask: RiskMask::zeros(),
            unsafe_flags: [false; N_SUBGOALS],
            fallback: false,
            predictions: None,
        });
    }
    let mut preds = predictor.predict_batch(state, &subgoals.goals)?;
    if mode == GccpMode::Cv {
        let cv = cv_predict(state);
        for p in &mut preds {
            p.surrounding = cv.surrounding.clone();
        }
    }
    let mut unsafe_flags = [false; N_SUBGOALS];
    for (flag, p) in unsafe_flags.iter_mut().zip(&preds) {
        for (slot, traj) in p.surrounding.iter().enumerate() {
            if !p.validity[slot + 1] {
                continue;
            }
            if trajectories_collide(&p.ego, traj, footprint, footprint)? {
                *flag = true;
                break;
            }
        }
    }
    let fallback = unsafe_flags.iter().all(|&f| f);
    let mask =
        if fallback { RiskMask::zeros() } else { RiskMask::from_unsafe_flags(&unsafe_flags) };
    Ok(MaskReport { mask, unsafe_flags, fallback, predictions: Some(preds) })
}

fn triples(poses: &[Pose]) -> Vec<[f64; 3]> {
    poses.iter().map(|p| [p.x, p.y, p.heading]).collect()
}

#[derive(Serialize)]
struct MaskRecord {
    step: u64,
    subgoal_index: usize,
    subgoal: [f64; 3],
    mask: f64,
    r#unsafe: bool,
    fallback: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    ego: Option<Vec<[f64; 3]>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    surrounding: Option<Vec<Vec<[f64; 3]>>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    validity: Option<Vec<bool>>,
}

/// Writes one JSON record per subgoal: the subgoal, its mask entry, and the
/// exact futures that were screened. The trace CLI command re-emits these
/// records verbatim.
pub fn write_mask_records<W: std::io::Write>(
    w: &mut W,
    step: u64,
    subgoals: &SubgoalSet,
    report: &MaskReport,
) -> std::io::Result<()> {
    for i in 0..N_SUBGOALS {
        let g = &subgoals.goals[i];
        let p = report.predictions.as_ref().map(|ps| &ps[i]);
        let record = MaskRecord {
            step,
            subgoal_index: i,
            subgoal: [g.x, g.y, g.heading],
            mask: report.mask.entries[i],
            r#unsafe: report.unsafe_flags[i],
            fallback: report.fallback,
            ego: p.map(|p| triples(&p.ego)),
            surrounding: p.map(|p| p.surrounding.iter().map(|t| triples(t)).collect()),
            validity: p.map(|p| p.validity.clone()),
        };
        serde_json::to_writer(&mut *w, &record)?;
        writeln!(w)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::ParamStore;
    use crate::consts::{DT, N_S, T_F};
    use crate::encoding::encode_state;
    use crate::geometry::{sat_overlap, OrientedBox};
    use crate::nets::NetConfig;
    use crate::roadnet::{build_scenario_with, ScenarioId, ScenarioParams};
    use crate::sim::{reset, step, ActionDelta};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    const FOOTPRINT: (f64, f64) = (4.0, 1.8);

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

    fn tiny_predictor(seed: u64) -> Predictor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Predictor::new(NetConfig::tiny(), true, &mut rng).unwrap()
    }

    fn spread_subgoals() -> SubgoalSet {
        let goals: Vec<Pose> = (0..N_SUBGOALS)
            .map(|i| Pose::new(3.0 + 1.5 * i as f64, (i % 4) as f64 - 1.5, 0.0))
            .collect();
        SubgoalSet { goals: goals.try_into().unwrap(), sampled: [true; N_SUBGOALS] }
    }

    /// Zeroes every parameter, then wires the network so the predicted ego
    /// trajectory is exactly the straight line from the origin to the
    /// subgoal, sampled at fractions 1/10..10/10, heading 0. Surrounding
    /// outputs become all-zero. Relu pairs (relu(a) - relu(-a) = a) pass
    /// signed values through; L=8 leaves room for the 2x3 pairs needed.
    fn straight_line_predictor() -> Predictor {
        let mut p = tiny_predictor(0);
        let names: Vec<String> = p.store.names().map(|s| s.to_string()).collect();
        for name in &names {
            for e in 0..p.store.value(name).unwrap().len() {
                p.store.set_elem(name, e, 0.0).unwrap();
            }
        }
        let l = p.cfg.embed;
        let set = |s: &mut ParamStore, name: &str, flat: usize, v: f64| {
            s.set_elem(name, flat, v).unwrap();
        };
        for j in 0..3 {
            // goal.l1: h[j] = relu(g_j), h[3+j] = relu(-g_j).
            set(&mut p.store, "pred.goal.l1.w", j * l + j, 1.0);
            set(&mut p.store, "pred.goal.l1.w", j * l + 3 + j, -1.0);
            // goal.l2: f_g[j] = h[j] - h[3+j] = g_j.
            set(&mut p.store, "pred.goal.l2.w", j * l + j, 1.0);
            set(&mut p.store, "pred.goal.l2.w", (3 + j) * l + j, -1.0);
            // dec.l1 reads f_g at concat offset 4L into +- pairs.
            set(&mut p.store, "pred.dec.l1.w", (4 * l + j) * l + 2 * j, 1.0);
            set(&mut p.store, "pred.dec.l1.w", (4 * l + j) * l + 2 * j + 1, -1.0);
        }
        // dec.l2: out[k*3+c] = g_c * (k+1); inputs are scaled by 0.1 so the
        // coefficient (k+1) yields raw metres at fraction (k+1)/10.
        for k in 0..T_F {
            for c in 0..2 {
                set(&mut p.store, "pred.dec.l2.w", (2 * c) * (T_F * 3) + k * 3 + c, (k + 1) as f64);
                set(
                    &mut p.store,
                    "pred.dec.l2.w",
                    (2 * c + 1) * (T_F * 3) + k * 3 + c,
                    -((k + 1) as f64),
                );
            }
        }
        p
    }

    /// Crossing vehicle used by the synthetic scene: at (10, 3) heading -pi/2
    /// moving at 6 m/s, so its constant-velocity future sweeps down through
    /// the ego's straight-ahead corridor around x = 10.
    fn crossing_state() -> VectorState {
        let mut state = sample_state(0.0, 3, 1);
        assert!(state.surr_valid.iter().all(|&v| !v));
        state.surr_valid[0] = true;
        state.surr_ids[0] = Some(1);
        let pose = Pose::with_speed(10.0, 3.0, -std::f64::consts::FRAC_PI_2, 6.0);
        for v in &mut state.surr_histories[0] {
            v.p_prev = pose;
            v.p_curr = pose;
        }
        state
    }

    fn cv_poses(start: &Pose, speed: f64) -> Vec<Pose> {
        let (s, c) = start.heading.sin_cos();
        (1..=T_F)
            .map(|k| {
                let d = speed * DT * k as f64;
                Pose::new(start.x + c * d, start.y + s * d, start.heading)
            })
            .collect()
    }

    fn line_poses(goal: &Pose) -> Vec<Pose> {
        (1..=T_F)
            .map(|k| {
                let f = k as f64 / T_F as f64;
                Pose::new(goal.x * f, goal.y * f, 0.0)
            })
            .collect()
    }

    #[test]
    fn disabled_mode_is_all_zeros_regardless_of_traffic() {
        let p = tiny_predictor(1);
        let state = sample_state(0.6, 40, 17);
        assert!(state.surr_valid.iter().any(|&v| v));
        let r =
            compute_mask(&state, &spread_subgoals(), &p, GccpMode::Disabled, FOOTPRINT).unwrap();
        assert_eq!(r.mask, RiskMask::zeros());
        assert!(!r.fallback);
        assert!(r.predictions.is_none());
    }

    #[test]
    fn empty_map_masks_nothing_in_any_mode() {
        let p = tiny_predictor(2);
        let state = sample_state(0.0, 3, 1);
        for mode in GccpMode::ALL {
            let r = compute_mask(&state, &spread_subgoals(), &p, mode, FOOTPRINT).unwrap();
            assert_eq!(r.mask, RiskMask::zeros(), "mode {mode}");
            assert!(!r.fallback);
        }
    }

    #[test]
    fn learned_mask_equals_independent_per_subgoal_screening() {
        let p = tiny_predictor(3);
        let state = sample_state(0.6, 40, 17);
        let subgoals = spread_subgoals();
        let r = compute_mask(&state, &subgoals, &p, GccpMode::Learned, FOOTPRINT).unwrap();

        let mut expected = [false; N_SUBGOALS];
        for i in 0..N_SUBGOALS {
            let pred = p.predict(&state, &subgoals.goals[i]).unwrap();
            expected[i] = pred
                .surrounding
                .iter()
                .enumerate()
                .filter(|(s, _)| pred.validity[s + 1])
                .any(|(_, t)| {
                    trajectories_collide(&pred.ego, t, FOOTPRINT, FOOTPRINT).unwrap()
                });
            let batch_pred = &r.predictions.as_ref().unwrap()[i];
            assert_eq!(&pred, batch_pred, "batched screening must match subgoal {i}");
        }
        assert_eq!(r.unsafe_flags, expected);
        if !r.fallback {
            assert_eq!(r.mask, RiskMask::from_unsafe_flags(&expected));
        }
    }

    #[test]
    fn cv_crossing_scene_masks_exactly_the_crossing_subgoals() {
        let p = straight_line_predictor();
        let state = crossing_state();

        let goals = [
            Pose::new(5.0, 0.0, 0.0),   // stops short of the crossing: safe
            Pose::new(10.0, 0.0, 0.0),  // reaches x=10 late, vehicle still there
            Pose::new(15.0, 0.0, 0.0),  // crosses while the vehicle passes
            Pose::new(20.0, 0.0, 0.0),  // crosses exactly when the vehicle does
            Pose::new(10.0, -8.0, 0.0), // dives under the crossing point
            Pose::new(4.0, 3.0, 0.0),
            Pose::new(4.0, -3.0, 0.0),
            Pose::new(2.0, 0.0, 0.0),
            Pose::new(6.0, 2.0, 0.0),
            Pose::new(18.0, -9.0, 0.0),
            Pose::new(3.0, 1.0, 0.0),
            Pose::new(7.0, -1.0, 0.0),
        ];
        let subgoals = SubgoalSet { goals, sampled: [true; N_SUBGOALS] };

        // The surgical network must reproduce the straight line exactly.
        let check = p.predict(&state, &goals[3]).unwrap();
        for (have, want) in check.ego.iter().zip(line_poses(&goals[3])) {
            assert!((have.x - want.x).abs() < 1e-9, "{} vs {}", have.x, want.x);
            assert!((have.y - want.y).abs() < 1e-9);
            assert_eq!(have.heading, 0.0);
        }

        let r = compute_mask(&state, &subgoals, &p, GccpMode::Cv, FOOTPRINT).unwrap();

        // Independent oracle: straight ego lines vs the hand-computed
        // constant-velocity sweep, one SAT test per shared timestep.
        let vehicle = Pose::new(10.0, 3.0, -std::f64::consts::FRAC_PI_2);
        let traffic = cv_poses(&vehicle, 6.0);
        let mut expected = [false; N_SUBGOALS];
        for (i, g) in goals.iter().enumerate() {
            expected[i] = line_poses(g).iter().zip(&traffic).any(|(e, t)| {
                sat_overlap(
                    &OrientedBox::new(*e, FOOTPRINT.0, FOOTPRINT.1),
                    &OrientedBox::new(*t, FOOTPRINT.0, FOOTPRINT.1),
                )
            });
        }
        assert_eq!(r.unsafe_flags, expected);
        assert!(!r.fallback);
        assert_eq!(r.mask, RiskMask::from_unsafe_flags(&expected));

        // The crossing straight-ahead subgoals are masked; the short and
        // evasive ones are not.
        assert!(!r.unsafe_flags[0]);
        assert!(r.unsafe_flags[1] && r.unsafe_flags[2] && r.unsafe_flags[3]);
        assert!(!r.unsafe_flags[4]);
        for e in r.mask.entries {
            assert!(e == 0.0 || e == MASK_UNSAFE, "sentinel values only, got {e}");
        }
    }

    #[test]
    fn all_unsafe_screening_falls_back_to_zeros() {
        let mut p = tiny_predictor(4);
        // Zero every parameter: all predictions sit at the origin, so the
        // (valid) surrounding box overlaps the ego box at every subgoal.
        let names: Vec<String> = p.store.names().map(|s| s.to_string()).collect();
        for name in &names {
            for e in 0..p.store.value(name).unwrap().len() {
                p.store.set_elem(name, e, 0.0).unwrap();
            }
        }
        let state = crossing_state();
        let r =
            compute_mask(&state, &spread_subgoals(), &p, GccpMode::Learned, FOOTPRINT).unwrap();
        assert_eq!(r.unsafe_flags, [true; N_SUBGOALS]);
        assert!(r.fallback);
        assert_eq!(r.mask, RiskMask::zeros());
    }

    #[test]
    fn compute_mask_is_deterministic() {
        let p = tiny_predictor(5);
        let state = sample_state(0.6, 40, 17);
        let subgoals = spread_subgoals();
        let a = compute_mask(&state, &subgoals, &p, GccpMode::Cv, FOOTPRINT).unwrap();
        let b = compute_mask(&state, &subgoals, &p, GccpMode::Cv, FOOTPRINT).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn mask_records_emit_one_line_per_subgoal() {
        let p = straight_line_predictor();
        let state = crossing_state();
        let subgoals = spread_subgoals();
        let r = compute_mask(&state, &subgoals, &p, GccpMode::Cv, FOOTPRINT).unwrap();
        let mut buf = Vec::new();
        write_mask_records(&mut buf, 30, &subgoals, &r).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), N_SUBGOALS);
        for (i, line) in lines.iter().enumerate() {
            let v: serde_json::Value = serde_json::from_str(line).unwrap();
            assert_eq!(v["step"], 30);
            assert_eq!(v["subgoal_index"], i as u64);
            assert_eq!(v["ego"].as_array().unwrap().len(), T_F);
            assert_eq!(v["surrounding"].as_array().unwrap().len(), N_S);
            let m = v["mask"].as_f64().unwrap();
            assert!(m == 0.0 || m == MASK_UNSAFE);
        }
    }
}
