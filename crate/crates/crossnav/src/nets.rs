//! Network building blocks shared by the trajectory predictor and both
//! policy levels: input tensor conversion, the scene encoder (history
//! self-attention, interaction self-attention, route cross-attention,
//! drivable-area CNN), and small MLP helpers.
//!
//! Each model owns a full copy of the encoder parameters in its own
//! `ParamStore`; nothing is shared across models.

use crate::autodiff::{Init, ParamStore, Result, Tape, Tensor, Var};
use crate::consts::{N_R, N_S, RASTER_PX, T_H};
use crate::encoding::{RouteVector, TrajVector, VectorState};
use crate::geometry::Pose;
use rand::Rng;
use serde::{Deserialize, Serialize};

/// Inputs are brought to unit-ish scale before entering the networks;
/// predicted trajectories stay in raw metres.
pub const POS_SCALE: f64 = 0.1;
pub const SPEED_SCALE: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NetConfig {
    /// Embedding width L.
    pub embed: usize,
    pub heads: usize,
    /// Channels of the three stride-2 convolutions over the BEV raster.
    pub conv_channels: (usize, usize, usize),
}

impl Default for NetConfig {
    fn default() -> Self {
        NetConfig { embed: 128, heads: 4, conv_channels: (8, 16, 32) }
    }
}

impl NetConfig {
    /// A deliberately small configuration for fast tests.
    pub fn tiny() -> Self {
        NetConfig { embed: 8, heads: 2, conv_channels: (2, 4, 4) }
    }
}

// ---------------------------------------------------------------------------
// Input tensors

pub fn traj_tensor(history: &[TrajVector]) -> Tensor {
    debug_assert_eq!(history.len(), T_H);
    let mut data = Vec::with_capacity(T_H * 9);
    for v in history {
        for p in [&v.p_prev, &v.p_curr] {
            data.push(p.x * POS_SCALE);
            data.push(p.y * POS_SCALE);
            data.push(p.heading);
            data.push(p.speed.unwrap_or(0.0) * SPEED_SCALE);
        }
        data.push(v.vehicle_id as f64);
    }
    Tensor::from_vec(&[T_H, 9], data)
}

pub fn route_tensor(route: &[RouteVector]) -> Tensor {
    let rows = route.len();
    let mut data = Vec::with_capacity(rows * 8);
    for v in route {
        data.push(v.wp_curr.x * POS_SCALE);
        data.push(v.wp_curr.y * POS_SCALE);
        data.push(v.wp_curr.heading);
        data.push(v.wp_next.x * POS_SCALE);
        data.push(v.wp_next.y * POS_SCALE);
        data.push(v.wp_next.heading);
        data.push(v.vehicle_id as f64);
        data.push(v.route_id as f64);
    }
    Tensor::from_vec(&[rows, 8], data)
}

pub fn bev_tensor(state: &VectorState) -> Tensor {
    let data: Vec<f64> = state.drivable.grid.iter().map(|&v| v as f64).collect();
    Tensor::from_vec(&[1, RASTER_PX, RASTER_PX], data)
}

/// (x, y, heading) triple as a scaled input row.
pub fn pose3_tensor(p: &Pose) -> Tensor {
    Tensor::from_vec(&[3], vec![p.x * POS_SCALE, p.y * POS_SCALE, p.heading])
}

// ---------------------------------------------------------------------------
// Parameter registration

fn add_linear(
    store: &mut ParamStore,
    rng: &mut impl Rng,
    name: &str,
    fan_in: usize,
    fan_out: usize,
) -> Result<()> {
    store.add_param(&format!("{name}.w"), &[fan_in, fan_out], Init::XavierUniform, rng)?;
    store.add_param(&format!("{name}.b"), &[fan_out], Init::Zeros, rng)
}

fn add_attention(
    store: &mut ParamStore,
    rng: &mut impl Rng,
    name: &str,
    dim: usize,
) -> Result<()> {
    for p in ["wq", "wk", "wv"] {
        store.add_param(&format!("{name}.{p}"), &[dim, dim], Init::XavierUniform, rng)?;
    }
    Ok(())
}

fn add_layer_norm(store: &mut ParamStore, rng: &mut impl Rng, name: &str, dim: usize) -> Result<()> {
    store.add_param(&format!("{name}.g"), &[dim], Init::Ones, rng)?;
    store.add_param(&format!("{name}.b"), &[dim], Init::Zeros, rng)
}

/// Registers every scene-encoder parameter under the `enc.` namespace.
pub fn register_scene_encoder(
    store: &mut ParamStore,
    cfg: &NetConfig,
    rng: &mut impl Rng,
) -> Result<()> {
    let l = cfg.embed;
    add_linear(store, rng, "enc.hist.embed", 9, l)?;
    add_attention(store, rng, "enc.hist.attn", l)?;
    add_layer_norm(store, rng, "enc.hist.ln", l)?;
    add_attention(store, rng, "enc.inter.attn", l)?;
    add_layer_norm(store, rng, "enc.inter.ln", l)?;
    add_linear(store, rng, "enc.route.embed", 8, l)?;
    add_attention(store, rng, "enc.route.attn", l)?;
    let (c1, c2, c3) = cfg.conv_channels;
    store.add_param("enc.bev.c1.w", &[c1, 1, 3, 3], Init::XavierUniform, rng)?;
    store.add_param("enc.bev.c1.b", &[c1], Init::Zeros, rng)?;
    store.add_param("enc.bev.c2.w", &[c2, c1, 3, 3], Init::XavierUniform, rng)?;
    store.add_param("enc.bev.c2.b", &[c2], Init::Zeros, rng)?;
    store.add_param("enc.bev.c3.w", &[c3, c2, 3, 3], Init::XavierUniform, rng)?;
    store.add_param("enc.bev.c3.b", &[c3], Init::Zeros, rng)?;
    // Three stride-2 convolutions: 64 -> 32 -> 16 -> 8 pixels.
    add_linear(store, rng, "enc.bev.fc", c3 * 8 * 8, l)
}

/// Registers a 2-layer pose MLP (3 -> L -> L) under `{name}.`.
pub fn register_pose_mlp(
    store: &mut ParamStore,
    cfg: &NetConfig,
    rng: &mut impl Rng,
    name: &str,
) -> Result<()> {
    add_linear(store, rng, &format!("{name}.l1"), 3, cfg.embed)?;
    add_linear(store, rng, &format!("{name}.l2"), cfg.embed, cfg.embed)
}

/// Registers an MLP with the given layer widths under `{name}.l1..`.
pub fn register_mlp(
    store: &mut ParamStore,
    rng: &mut impl Rng,
    name: &str,
    widths: &[usize],
) -> Result<()> {
    for (i, w) in widths.windows(2).enumerate() {
        add_linear(store, rng, &format!("{name}.l{}", i + 1), w[0], w[1])?;
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Forward passes

/// Attention projections by name: q from `q_src`, k/v from `kv_src`.
fn attn(
    tape: &mut Tape,
    store: &ParamStore,
    name: &str,
    q_src: Var,
    kv_src: Var,
    heads: usize,
    key_mask: Option<&[bool]>,
) -> Result<Var> {
    let wq = tape.param(store, &format!("{name}.wq"))?;
    let wk = tape.param(store, &format!("{name}.wk"))?;
    let wv = tape.param(store, &format!("{name}.wv"))?;
    let q = tape.matmul(q_src, wq)?;
    let k = tape.matmul(kv_src, wk)?;
    let v = tape.matmul(kv_src, wv)?;
    tape.sdpa(q, k, v, heads, key_mask)
}

fn layer_norm_named(tape: &mut Tape, store: &ParamStore, name: &str, x: Var) -> Result<Var> {
    let g = tape.param(store, &format!("{name}.g"))?;
    let b = tape.param(store, &format!("{name}.b"))?;
    tape.layer_norm(x, g, b)
}

/// `linear + relu` by parameter name.
fn dense_relu(tape: &mut Tape, store: &ParamStore, name: &str, x: Var) -> Result<Var> {
    let w = tape.param(store, &format!("{name}.w"))?;
    let b = tape.param(store, &format!("{name}.b"))?;
    let y = tape.linear(x, w, b)?;
    tape.relu(y)
}

fn dense(tape: &mut Tape, store: &ParamStore, name: &str, x: Var) -> Result<Var> {
    let w = tape.param(store, &format!("{name}.w"))?;
    let b = tape.param(store, &format!("{name}.b"))?;
    tape.linear(x, w, b)
}

/// Forward through a `register_mlp` stack with relu between layers and a
/// linear final layer.
pub fn mlp_forward(
    tape: &mut Tape,
    store: &ParamStore,
    name: &str,
    layers: usize,
    x: Var,
) -> Result<Var> {
    let mut h = x;
    for i in 1..=layers {
        h = if i < layers {
            dense_relu(tape, store, &format!("{name}.l{i}"), h)?
        } else {
            dense(tape, store, &format!("{name}.l{i}"), h)?
        };
    }
    Ok(h)
}

/// 2-layer pose MLP forward (relu, then linear).
pub fn pose_mlp_forward(
    tape: &mut Tape,
    store: &ParamStore,
    name: &str,
    pose: &Pose,
) -> Result<Var> {
    let x = tape.input(pose3_tensor(pose))?;
    let h = dense_relu(tape, store, &format!("{name}.l1"), x)?;
    dense(tape, store, &format!("{name}.l2"), h)
}

/// Per-vehicle encoder outputs. Vehicle index 0 is the ego; 1..=5 are the
/// surrounding slots. Invalid slots carry exact-zero features.
pub struct EncodedScene {
    pub f_h: Vec<Var>,
    pub f_int: Vec<Var>,
    pub f_r: Vec<Var>,
    /// Drivable-area embedding, shared by all vehicles.
    pub f_d: Var,
    /// Ego plus surrounding validity, length 1 + N_s.
    pub validity: Vec<bool>,
}

impl EncodedScene {
    /// [f_h | f_int | f_r] for one vehicle, length 3L.
    pub fn vehicle_feature(&self, tape: &mut Tape, i: usize) -> Result<Var> {
        tape.concat1(&[self.f_h[i], self.f_int[i], self.f_r[i]])
    }

    /// Mean of the valid surrounding vehicle features (zeros when none).
    pub fn surr_mean_feature(&self, tape: &mut Tape) -> Result<Var> {
        let n_valid = self.validity[1..].iter().filter(|&&v| v).count();
        let mut rows = Vec::with_capacity(N_S);
        for i in 1..=N_S {
            rows.push(self.vehicle_feature(tape, i)?);
        }
        let stacked = tape.stack_rows(&rows)?;
        let mean = tape.mean_rows(stacked)?;
        if n_valid == 0 {
            return Ok(mean); // all-zero features already
        }
        // mean_rows divides by N_s; rescale to average over valid only.
        tape.scale(mean, N_S as f64 / n_valid as f64)
    }
}

/// Runs the shared scene encoder for one observation.
pub fn encode_scene(
    tape: &mut Tape,
    store: &ParamStore,
    cfg: &NetConfig,
    state: &VectorState,
) -> Result<EncodedScene> {
    let l = cfg.embed;
    let mut validity = vec![true];
    validity.extend(state.surr_valid.iter().copied());

    // History self-attention per vehicle, shared weights.
    let mut f_h = Vec::with_capacity(1 + N_S);
    for i in 0..=N_S {
        let history = if i == 0 { &state.ego_history } else { &state.surr_histories[i - 1] };
        let x = tape.input(traj_tensor(history))?;
        let e = dense_relu(tape, store, "enc.hist.embed", x)?;
        let a = attn(tape, store, "enc.hist.attn", e, e, cfg.heads, None)?;
        let s = tape.add(e, a)?;
        let s = layer_norm_named(tape, store, "enc.hist.ln", s)?;
        f_h.push(tape.mean_rows(s)?);
    }

    // Interaction self-attention across the 6 vehicle nodes; invalid nodes
    // contribute zero attention weight via the key mask.
    let nodes = tape.stack_rows(&f_h)?;
    let a = attn(tape, store, "enc.inter.attn", nodes, nodes, cfg.heads, Some(&validity))?;
    let s = tape.add(nodes, a)?;
    let s = layer_norm_named(tape, store, "enc.inter.ln", s)?;
    let mut f_int = Vec::with_capacity(1 + N_S);
    for i in 0..=N_S {
        f_int.push(tape.row(s, i)?);
    }

    // Route encoder: pool each candidate route, then cross-attend with the
    // vehicle's interaction feature as the query.
    let mut f_r = Vec::with_capacity(1 + N_S);
    for i in 0..=N_S {
        let routes = if i == 0 { &state.ego_routes } else { &state.surr_routes[i - 1] };
        let mut pooled = Vec::with_capacity(N_R);
        for route in routes {
            let x = tape.input(route_tensor(route))?;
            let e = dense_relu(tape, store, "enc.route.embed", x)?;
            pooled.push(tape.mean_rows(e)?);
        }
        let r = tape.stack_rows(&pooled)?;
        let q = tape.reshape(f_int[i], &[1, l])?;
        let att = attn(tape, store, "enc.route.attn", q, r, cfg.heads, None)?;
        f_r.push(tape.reshape(att, &[l])?);
    }

    // Zero out every feature of invalid slots so downstream consumers see
    // exact zeros (and no gradient flows into padding).
    let zero_l = Tensor::zeros(&[l]);
    for i in 1..=N_S {
        if !validity[i] {
            f_h[i] = tape.mul_const(f_h[i], &zero_l)?;
            f_int[i] = tape.mul_const(f_int[i], &zero_l)?;
            f_r[i] = tape.mul_const(f_r[i], &zero_l)?;
        }
    }

    // Drivable-area CNN: three stride-2 convolutions, flatten, project.
    let (c1, c2, c3) = cfg.conv_channels;
    let _ = (c1, c2);
    let x = tape.input(bev_tensor(state))?;
    let w1 = tape.param(store, "enc.bev.c1.w")?;
    let b1 = tape.param(store, "enc.bev.c1.b")?;
    let h = tape.conv2d(x, w1, b1, 2)?;
    let h = tape.relu(h)?;
    let w2 = tape.param(store, "enc.bev.c2.w")?;
    let b2 = tape.param(store, "enc.bev.c2.b")?;
    let h = tape.conv2d(h, w2, b2, 2)?;
    let h = tape.relu(h)?;
    let w3 = tape.param(store, "enc.bev.c3.w")?;
    let b3 = tape.param(store, "enc.bev.c3.b")?;
    let h = tape.conv2d(h, w3, b3, 2)?;
    let h = tape.relu(h)?;
    let flat = tape.reshape(h, &[c3 * 8 * 8])?;
    let f_d = dense_relu(tape, store, "enc.bev.fc", flat)?;

    Ok(EncodedScene { f_h, f_int, f_r, f_d, validity })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::gradcheck::{check_params, jitter_params};
    use crate::encoding::encode_state;
    use crate::roadnet::{build_scenario_with, ScenarioId, ScenarioParams};
    use crate::sim::{reset, step, ActionDelta};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn sample_state(spawn_rate: f64, steps: usize) -> VectorState {
        let mut p = ScenarioParams::default();
        p.traffic.spawn_rate = spawn_rate;
        let s = build_scenario_with(ScenarioId::GoStraight, &p);
        let mut w = reset(&s, 17);
        for _ in 0..steps {
            step(&mut w, ActionDelta { dx: 0.2, dy: 0.0, dheading: 0.0 }).unwrap();
        }
        encode_state(&w)
    }

    fn encoder_store(cfg: &NetConfig, seed: u64) -> ParamStore {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        register_scene_encoder(&mut store, cfg, &mut rng).unwrap();
        store
    }

    #[test]
    fn default_config_embeds_are_128_wide() {
        let cfg = NetConfig::default();
        let store = encoder_store(&cfg, 0);
        assert_eq!(store.value("enc.hist.embed.w").unwrap().shape(), &[9, 128]);
        assert_eq!(store.value("enc.bev.fc.w").unwrap().shape(), &[32 * 64, 128]);
        assert_eq!(store.value("enc.route.attn.wq").unwrap().shape(), &[128, 128]);
    }

    #[test]
    fn encoder_output_shapes_and_validity() {
        let cfg = NetConfig::tiny();
        let store = encoder_store(&cfg, 1);
        let state = sample_state(0.0, 3);
        let mut tape = Tape::new();
        let enc = encode_scene(&mut tape, &store, &cfg, &state).unwrap();
        assert_eq!(enc.f_h.len(), 1 + N_S);
        for i in 0..=N_S {
            assert_eq!(tape.value(enc.f_h[i]).shape(), &[cfg.embed]);
            assert_eq!(tape.value(enc.f_int[i]).shape(), &[cfg.embed]);
            assert_eq!(tape.value(enc.f_r[i]).shape(), &[cfg.embed]);
        }
        assert_eq!(tape.value(enc.f_d).shape(), &[cfg.embed]);
        // Empty map: all surrounding features are exact zeros.
        for i in 1..=N_S {
            assert!(!enc.validity[i]);
            assert!(tape.value(enc.f_h[i]).data().iter().all(|&v| v == 0.0));
            assert!(tape.value(enc.f_int[i]).data().iter().all(|&v| v == 0.0));
            assert!(tape.value(enc.f_r[i]).data().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn invalid_slot_contents_cannot_influence_valid_features() {
        let cfg = NetConfig::tiny();
        let store = encoder_store(&cfg, 2);
        let state = sample_state(0.0, 2);
        let mut garbled = state.clone();
        // Write junk into an invalid slot without flipping its validity.
        for v in &mut garbled.surr_histories[3] {
            v.p_prev.x = 123.0;
            v.p_curr.y = -55.0;
            v.p_curr.speed = Some(9.0);
        }
        let mut t1 = Tape::new();
        let e1 = encode_scene(&mut t1, &store, &cfg, &state).unwrap();
        let mut t2 = Tape::new();
        let e2 = encode_scene(&mut t2, &store, &cfg, &garbled).unwrap();
        assert_eq!(t1.value(e1.f_int[0]).data(), t2.value(e2.f_int[0]).data());
        assert_eq!(t1.value(e1.f_r[0]).data(), t2.value(e2.f_r[0]).data());
        assert_eq!(t1.value(e1.f_h[4]).data(), t2.value(e2.f_h[4]).data());
    }

    #[test]
    fn encoder_forward_is_deterministic() {
        let cfg = NetConfig::tiny();
        let store = encoder_store(&cfg, 3);
        let state = sample_state(0.5, 30);
        let run = || {
            let mut tape = Tape::new();
            let enc = encode_scene(&mut tape, &store, &cfg, &state).unwrap();
            let f = enc.surr_mean_feature(&mut tape).unwrap();
            let all = tape.concat1(&[enc.f_h[0], enc.f_d, f]).unwrap();
            tape.value(all).data().to_vec()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn encoder_gradients_match_finite_differences() {
        let cfg = NetConfig::tiny();
        let mut store = encoder_store(&cfg, 4);
        let state = sample_state(0.6, 40);
        assert!(state.surr_valid.iter().any(|&v| v), "need live traffic");
        // Move zero-initialised biases off the relu kink; see jitter_params.
        let mut jrng = ChaCha8Rng::seed_from_u64(99);
        jitter_params(&mut store, 0.05, &mut jrng).unwrap();

        // Fixed pseudo-random weighting makes the scalar sensitive to
        // every output coordinate.
        let scalar_loss = |tape: &mut Tape, s: &ParamStore| -> Var {
            let enc = encode_scene(tape, s, &cfg, &state).unwrap();
            let mut parts = vec![enc.f_d];
            for i in 0..=N_S {
                parts.push(enc.vehicle_feature(tape, i).unwrap());
            }
            let z = tape.concat1(&parts).unwrap();
            let n = tape.value(z).len();
            let w: Vec<f64> =
                (0..n).map(|i| ((i * 37 + 11) % 17) as f64 / 8.0 - 1.0).collect();
            let weighted = tape.mul_const(z, &Tensor::from_vec(&[n], w)).unwrap();
            tape.sum_all(weighted).unwrap()
        };

        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let report = check_params(
            &mut store,
            3,
            1e-5,
            &mut rng,
            |s| {
                let mut tape = Tape::new();
                let l = scalar_loss(&mut tape, s);
                tape.value(l).item()
            },
            |s| {
                let mut tape = Tape::new();
                let l = scalar_loss(&mut tape, s);
                tape.backward(l, s, 1.0).unwrap();
            },
        )
        .unwrap();
        assert!(report.checked > 50);
        assert!(report.worst < 1e-4, "worst rel err {}", report.worst);
    }
}
