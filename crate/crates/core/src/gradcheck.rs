//! Central-difference gradient checks in `f64` for every layer type and for
//! whole heads.
//!
//! Each check builds a scalar loss and compares the analytic gradient of a
//! random sample of coordinates against a numeric one. The numeric value is
//! the central difference `D(ε) = (L(θ+ε) - L(θ-ε)) / 2ε` refined by one
//! Richardson step, `(4·D(ε/2) - D(ε)) / 3`. A plain `D(ε)` carries an
//! `O(ε²)` truncation term which, on coordinates with tiny gradients under
//! batch-norm curvature, can exceed a `1e-4` relative tolerance on its own.
//! Steps that would flip the sign of a ReLU input are skipped, since the
//! loss is not differentiable there.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::heads::{HeadError, HeadKind, HeadModel, HeadOptions};
use crate::nn::{
    concat_rows, global_average_pool, global_average_pool_backward, mix_seed, relu, relu_backward,
    softmax_cross_entropy, split_rows, Activation, BatchNorm, Dense, Dropout, Mode, NnError, Tensor,
};

/// Default central-difference step.
pub const EPSILON: f64 = 1e-3;

/// Denominator floor for the relative error, so coordinates whose true
/// gradient is zero are judged on absolute error.
pub const REL_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheck {
    pub name: String,
    pub checked: usize,
    pub skipped: usize,
    /// Against the extrapolated difference.
    pub max_rel_error: f64,
    /// Against the plain central difference at `EPSILON`, for reference.
    pub max_rel_error_plain: f64,
}

/// `|a - n| / max(|a|, |n|, REL_FLOOR)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// Checks `grads` against central differences of `loss` over the sampled
/// `coords`. `loss` receives the perturbed variable vector and returns the
/// loss plus an optional kink signature; a step whose signature differs from
/// the unperturbed one is skipped.
fn check_coords(
    name: &str,
    vars: &[f64],
    grads: &[f64],
    coords: &[usize],
    eps: f64,
    loss: &mut dyn FnMut(&[f64]) -> (f64, Vec<bool>),
) -> GradCheck {
    let (_, base_sig) = loss(vars);
    let mut v = vars.to_vec();
    let mut out = GradCheck {
        name: name.to_owned(),
        checked: 0,
        skipped: 0,
        max_rel_error: 0.0,
        max_rel_error_plain: 0.0,
    };
    for &i in coords {
        let mut diff = |step: f64, v: &mut Vec<f64>| {
            v[i] = vars[i] + step;
            let (lp, sp) = loss(v);
            v[i] = vars[i] - step;
            let (lm, sm) = loss(v);
            v[i] = vars[i];
            ((lp - lm) / (2.0 * step), sp == base_sig && sm == base_sig)
        };
        let (full, ok_full) = diff(eps, &mut v);
        let (half, ok_half) = diff(eps / 2.0, &mut v);
        if !(ok_full && ok_half) {
            out.skipped += 1;
            continue;
        }
        let numeric = (4.0 * half - full) / 3.0;
        out.max_rel_error = out.max_rel_error.max(relative_error(grads[i], numeric));
        out.max_rel_error_plain = out.max_rel_error_plain.max(relative_error(grads[i], full));
        out.checked += 1;
    }
    out
}

fn sample_coords(rng: &mut ChaCha8Rng, len: usize, per_tensor: usize) -> Vec<usize> {
    let mut idx = sample(rng, len, per_tensor.min(len)).into_vec();
    idx.sort_unstable();
    idx
}

fn random_vec(rng: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(lo..hi)).collect()
}

/// Values bounded away from zero so a ReLU never sits on its kink.
fn off_kink(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n)
        .map(|_| {
            let m = rng.random_range(0.05..1.5);
            if rng.random::<bool>() { m } else { -m }
        })
        .collect()
}

/// `Σ r ⊙ y` with a fixed random projection `r`, the scalar used for layer
/// checks.
fn project(y: &Tensor<f64>, r: &[f64]) -> f64 {
    y.data().iter().zip(r).map(|(a, b)| a * b).sum()
}

fn t(shape: Vec<usize>, data: Vec<f64>) -> Tensor<f64> {
    Tensor::new(shape, data).expect("consistent shape")
}

fn split_at(v: &[f64], sizes: &[usize]) -> Vec<Vec<f64>> {
    let mut out = Vec::new();
    let mut at = 0;
    for &s in sizes {
        out.push(v[at..at + s].to_vec());
        at += s;
    }
    out
}

fn dense_check(name: &str, activation: Activation, rng: &mut ChaCha8Rng, per_tensor: usize) -> Result<GradCheck, NnError> {
    let (b, i, o) = (5, 7, 4);
    let x = off_kink(rng, b * i);
    let w = random_vec(rng, i * o, -0.8, 0.8);
    let bias = random_vec(rng, o, -0.3, 0.3);
    let r = random_vec(rng, b * o, -1.0, 1.0);
    let build = |v: &[f64]| {
        let p = split_at(v, &[b * i, i * o, o]);
        let layer = Dense::new(name, p[1].clone(), p[2].clone(), activation).expect("dense shape");
        (t(vec![b, i], p[0].clone()), layer)
    };
    let vars: Vec<f64> = [x, w, bias].concat();
    let (xt, mut layer) = build(&vars);
    let y = layer.forward(&xt)?;
    let gx = layer.backward(&t(vec![b, o], r.clone()))?;
    let grads: Vec<f64> = [gx.data(), &layer.weights.grad, &layer.bias.grad].concat();
    let coords: Vec<usize> = [(0, b * i), (b * i, i * o), (b * i + i * o, o)]
        .iter()
        .flat_map(|&(off, n)| sample_coords(rng, n, per_tensor).into_iter().map(move |k| off + k))
        .collect();
    let _ = y;
    Ok(check_coords(name, &vars, &grads, &coords, EPSILON, &mut |v| {
        let (xt, l) = build(v);
        let y = l.apply(&xt).expect("dense forward");
        let sig = y.data().iter().map(|&z| z > 0.0).collect();
        (project(&y, &r), sig)
    }))
}

fn batch_norm_check(rng: &mut ChaCha8Rng, per_tensor: usize, mode: Mode) -> Result<GradCheck, NnError> {
    let (b, d) = (6, 5);
    let x = random_vec(rng, b * d, -2.0, 2.0);
    let gamma = random_vec(rng, d, 0.5, 1.5);
    let beta = random_vec(rng, d, -0.5, 0.5);
    let r = random_vec(rng, b * d, -1.0, 1.0);
    let running: (Vec<f64>, Vec<f64>) = (random_vec(rng, d, -0.5, 0.5), random_vec(rng, d, 0.5, 2.0));
    let build = |v: &[f64]| {
        let p = split_at(v, &[b * d, d, d]);
        let mut bn = BatchNorm::<f64>::new("batch_norm", d);
        bn.gamma.value = p[1].clone();
        bn.beta.value = p[2].clone();
        bn.running_mean = running.0.clone();
        bn.running_var = running.1.clone();
        (t(vec![b, d], p[0].clone()), bn)
    };
    let vars: Vec<f64> = [x, gamma, beta].concat();
    let (xt, mut bn) = build(&vars);
    bn.forward(&xt, mode)?;
    let gx = bn.backward(&t(vec![b, d], r.clone()))?;
    let grads: Vec<f64> = [gx.data(), &bn.gamma.grad, &bn.beta.grad].concat();
    let coords: Vec<usize> = [(0, b * d), (b * d, d), (b * d + d, d)]
        .iter()
        .flat_map(|&(off, n)| sample_coords(rng, n, per_tensor).into_iter().map(move |k| off + k))
        .collect();
    let name = match mode {
        Mode::Eval => "batch_norm (inference)",
        Mode::Train { .. } => "batch_norm (training)",
    };
    Ok(check_coords(name, &vars, &grads, &coords, EPSILON, &mut |v| {
        let (xt, mut bn) = build(v);
        let y = bn.forward(&xt, mode).expect("batch norm forward");
        (project(&y, &r), Vec::new())
    }))
}

fn single_input_check(
    name: &str,
    shape: Vec<usize>,
    x: Vec<f64>,
    grads: Vec<f64>,
    rng: &mut ChaCha8Rng,
    per_tensor: usize,
    loss: &mut dyn FnMut(&[f64]) -> (f64, Vec<bool>),
) -> GradCheck {
    let n: usize = shape.iter().product();
    let coords = sample_coords(rng, n, per_tensor);
    check_coords(name, &x, &grads, &coords, EPSILON, loss)
}

/// Gradient checks for dense (linear and ReLU), batch norm in both modes,
/// dropout, ReLU, global average pooling, concatenation and softmax
/// cross-entropy.
pub fn layer_checks(seed: u64, per_tensor: usize) -> Result<Vec<GradCheck>, NnError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = vec![
        dense_check("dense", Activation::None, &mut rng, per_tensor)?,
        dense_check("dense+relu", Activation::Relu, &mut rng, per_tensor)?,
        batch_norm_check(&mut rng, per_tensor, Mode::Train { seed: 0 })?,
        batch_norm_check(&mut rng, per_tensor, Mode::Eval)?,
    ];

    // dropout with a fixed mask
    let shape = vec![4, 6];
    let x = random_vec(&mut rng, 24, -1.0, 1.0);
    let r = random_vec(&mut rng, 24, -1.0, 1.0);
    let mode = Mode::Train { seed: mix_seed(seed, 1) };
    let mut d = Dropout::<f64>::new(0.4);
    d.forward(&t(shape.clone(), x.clone()), mode);
    let g = d.backward(&t(shape.clone(), r.clone()))?.into_data();
    out.push(single_input_check("dropout", shape.clone(), x, g, &mut rng, per_tensor, &mut |v| {
        let y = Dropout::<f64>::new(0.4).forward(&t(vec![4, 6], v.to_vec()), mode);
        (project(&y, &r), Vec::new())
    }));

    // relu
    let x = off_kink(&mut rng, 24);
    let g = relu_backward(&t(shape.clone(), x.clone()), &t(shape.clone(), r.clone())).into_data();
    out.push(single_input_check("relu", shape, x, g, &mut rng, per_tensor, &mut |v| {
        let y = relu(&t(vec![4, 6], v.to_vec()));
        (project(&y, &r), v.iter().map(|&z| z > 0.0).collect())
    }));

    // global average pooling over [B, H, W, C]
    let shape = vec![2, 3, 4, 5];
    let x = random_vec(&mut rng, 120, -1.0, 1.0);
    let r = random_vec(&mut rng, 10, -1.0, 1.0);
    let g = global_average_pool_backward(&t(vec![2, 5], r.clone()), 3, 4).into_data();
    out.push(single_input_check("global_average_pool", shape, x, g, &mut rng, per_tensor, &mut |v| {
        let y = global_average_pool(&t(vec![2, 3, 4, 5], v.to_vec())).expect("pool");
        (project(&y, &r), Vec::new())
    }));

    // concatenation of a [3, 2] and a [3, 4] block
    let x = random_vec(&mut rng, 18, -1.0, 1.0);
    let r = random_vec(&mut rng, 18, -1.0, 1.0);
    let parts = split_rows(&t(vec![3, 6], r.clone()), &[2, 4])?;
    let g: Vec<f64> = [parts[0].data(), parts[1].data()].concat();
    out.push(single_input_check("concatenate", vec![18], x, g, &mut rng, per_tensor, &mut |v| {
        let y = concat_rows(&[&t(vec![3, 2], v[..6].to_vec()), &t(vec![3, 4], v[6..].to_vec())]).expect("concat");
        (project(&y, &r), Vec::new())
    }));

    // softmax + cross-entropy on logits
    let x = random_vec(&mut rng, 12, -3.0, 3.0);
    let targets = vec![0, 2, 1];
    let (_, _, g) = softmax_cross_entropy(&t(vec![3, 4], x.clone()), &targets)?;
    out.push(single_input_check("softmax_cross_entropy", vec![12], x, g.into_data(), &mut rng, per_tensor, &mut |v| {
        let (l, _, _) = softmax_cross_entropy(&t(vec![3, 4], v.to_vec()), &targets).expect("loss");
        (l, Vec::new())
    }));
    Ok(out)
}

/// Checks a full head in training mode (batch norm on batch statistics,
/// fixed dropout masks) on a random minibatch, sampling `per_tensor`
/// coordinates from every parameter tensor and from the input.
pub fn head_check(kind: HeadKind, seed: u64, batch: usize, per_tensor: usize) -> Result<GradCheck, HeadError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let spec = kind.spec();
    let mut head = HeadModel::<f64>::new(&spec, HeadOptions::default(), seed)?;
    let width = spec.input_width();
    let x = random_vec(&mut rng, batch * width, 0.0, 2.0);
    let targets: Vec<usize> = (0..batch).map(|_| rng.random_range(0..spec.num_classes)).collect();
    let mode = Mode::Train { seed: mix_seed(seed, 7) };
    let xt = Tensor::matrix(batch, width, x.clone())?;

    head.zero_grad();
    let logits = head.forward_pooled(&xt, mode)?;
    let (_, _, g) = softmax_cross_entropy(&logits, &targets)?;
    let gx = head.backward(&g)?;

    let sizes: Vec<usize> = std::iter::once(x.len()).chain(head.params().iter().map(|p| p.value.len())).collect();
    let vars: Vec<f64> = x.iter().copied().chain(head.params().iter().flat_map(|p| p.value.iter().copied())).collect();
    let grads: Vec<f64> = gx
        .data()
        .iter()
        .copied()
        .chain(head.params().iter().flat_map(|p| p.grad.iter().copied()))
        .collect();
    let mut coords = Vec::new();
    let mut off = 0;
    for &n in &sizes {
        coords.extend(sample_coords(&mut rng, n, per_tensor).into_iter().map(|k| off + k));
        off += n;
    }
    let mut probe = head.clone();
    let mut loss = |v: &[f64]| {
        let mut at = sizes[0];
        for p in probe.params_mut() {
            let n = p.value.len();
            p.value.copy_from_slice(&v[at..at + n]);
            at += n;
        }
        let xt = Tensor::matrix(batch, width, v[..sizes[0]].to_vec()).expect("input");
        let logits = probe.forward_pooled(&xt, mode).expect("forward");
        let (l, _, _) = softmax_cross_entropy(&logits, &targets).expect("loss");
        (l, probe.relu_pattern())
    };
    Ok(check_coords(&format!("{} head", kind.name()), &vars, &grads, &coords, EPSILON, &mut loss))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_layer_type_passes() {
        for c in layer_checks(11, 12).unwrap() {
            assert!(c.checked > 0, "{c:?}");
            assert!(c.max_rel_error <= 1e-4, "{c:?}");
        }
    }

    #[test]
    fn aedes_head_passes() {
        let c = head_check(HeadKind::Aedes, 3, 6, 8).unwrap();
        assert!(c.checked > 50, "{c:?}");
        assert!(c.max_rel_error <= 1e-4, "{c:?}");
    }

    #[test]
    fn relative_error_floor() {
        assert_eq!(relative_error(0.0, 0.0), 0.0);
        assert_eq!(relative_error(2.0, 1.0), 0.5);
        assert!((relative_error(0.0, 1e-9) - 1e-3).abs() < 1e-15);
    }
}
