//! Central finite-difference oracles for verifying analytic gradients, used
//! by the unit tests and the acceptance suite.

use super::{ParamStore, Result, Tape, Tensor, Var};
use rand::Rng;

/// Relative error with an absolute floor so near-zero gradients compare
/// sanely against finite-difference noise.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

/// Checks d(loss)/d(input) for every element of every input against central
/// finite differences with step `h`. `build` must deterministically produce
/// a scalar loss from the given input leaves. Returns the worst relative
/// error observed.
pub fn check_inputs<F>(build: F, inputs: &[Tensor], h: f64) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let eval = |tensors: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = tensors
            .iter()
            .map(|t| tape.input(t.clone()))
            .collect::<Result<_>>()?;
        let loss = build(&mut tape, &vars)?;
        Ok(tape.value(loss).item())
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs
        .iter()
        .map(|t| tape.input(t.clone()))
        .collect::<Result<_>>()?;
    let loss = build(&mut tape, &vars)?;
    let mut scratch = ParamStore::new();
    tape.backward(loss, &mut scratch, 1.0)?;

    let mut worst = 0.0f64;
    for (i, var) in vars.iter().enumerate() {
        let zero = Tensor::zeros(inputs[i].shape());
        let analytic = tape.grad(*var).unwrap_or(&zero).clone();
        for e in 0..inputs[i].len() {
            let mut plus = inputs.to_vec();
            plus[i].data_mut()[e] += h;
            let mut minus = inputs.to_vec();
            minus[i].data_mut()[e] -= h;
            let fd = (eval(&plus)? - eval(&minus)?) / (2.0 * h);
            worst = worst.max(rel_err(analytic.data()[e], fd));
        }
    }
    Ok(worst)
}

pub struct ParamCheck {
    pub worst: f64,
    pub checked: usize,
}

/// Adds uniform noise in `[-scale, scale]` to every parameter element.
/// Freshly initialised biases are exactly zero, and piecewise-constant
/// inputs (the drivable-area raster, zero-padded vehicle slots) then put
/// pre-activations exactly on the relu kink, where central differences
/// measure slope 1/2 instead of a one-sided derivative. Jittering moves
/// every parameter off such special values before a finite-difference run.
pub fn jitter_params(store: &mut ParamStore, scale: f64, rng: &mut impl Rng) -> Result<()> {
    let names: Vec<String> = store.names().map(|s| s.to_string()).collect();
    for name in &names {
        for e in 0..store.value(name)?.len() {
            let v = store.value(name)?.data()[e];
            store.set_elem(name, e, v + rng.gen_range(-scale..scale))?;
        }
    }
    Ok(())
}

/// Checks analytic parameter gradients against central finite differences.
/// `grad_fn` must run one forward+backward pass that accumulates gradients
/// into the store; `loss_fn` must recompute the same scalar loss without
/// touching gradients. Samples up to `per_tensor` elements of each named
/// tensor. Both closures must be deterministic.
pub fn check_params(
    store: &mut ParamStore,
    per_tensor: usize,
    h: f64,
    rng: &mut impl Rng,
    mut loss_fn: impl FnMut(&ParamStore) -> f64,
    mut grad_fn: impl FnMut(&mut ParamStore),
) -> Result<ParamCheck> {
    store.zero_grads();
    grad_fn(store);
    let names: Vec<String> = store.names().map(|s| s.to_string()).collect();
    let mut worst = 0.0f64;
    let mut checked = 0usize;
    for name in &names {
        let len = store.value(name)?.len();
        let indices: Vec<usize> = if len <= per_tensor {
            (0..len).collect()
        } else {
            let mut picked = std::collections::BTreeSet::new();
            while picked.len() < per_tensor {
                picked.insert(rng.gen_range(0..len));
            }
            picked.into_iter().collect()
        };
        for &e in &indices {
            let analytic = store.grad(name)?.data()[e];
            let original = store.value(name)?.data()[e];
            store.set_elem(name, e, original + h)?;
            let plus = loss_fn(store);
            store.set_elem(name, e, original - h)?;
            let minus = loss_fn(store);
            store.set_elem(name, e, original)?;
            let fd = (plus - minus) / (2.0 * h);
            worst = worst.max(rel_err(analytic, fd));
            checked += 1;
        }
    }
    store.zero_grads();
    Ok(ParamCheck { worst, checked })
}
