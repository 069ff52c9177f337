#![allow(dead_code)]

use muscl_core::data::Image;
use muscl_core::nets::{init_params, ArchConfig, ModelParams, WeightNetParams};
use muscl_core::pairgen::{PairBatch, PositivePair, Strategy};
use muscl_core::{ParamSet, Rng, Tape, Tensor, Var};

pub const FD_STEP: f64 = 1e-5;

/// Relative error with a floor so entries that are zero up to rounding
/// compare absolutely.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-7)
}

pub fn random_tensor(shape: &[usize], scale: f64, rng: &mut Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| scale * rng.normal()).collect()).unwrap()
}

/// Central difference of `f` at every element of `inputs[k]`.
pub fn numeric_grad(inputs: &[Tensor], k: usize, step: f64, f: &dyn Fn(&[Tensor]) -> f64) -> Vec<f64> {
    let mut work = inputs.to_vec();
    let n = inputs[k].len();
    (0..n)
        .map(|e| {
            let base = inputs[k].data()[e];
            let mut at = |x: f64| {
                let mut d = work[k].data().to_vec();
                d[e] = x;
                work[k] = Tensor::new(inputs[k].shape().to_vec(), d).unwrap();
                f(&work)
            };
            let up = at(base + step);
            let down = at(base - step);
            at(base);
            (up - down) / (2.0 * step)
        })
        .collect()
}

/// Largest relative error between the tape gradient of `build` and central
/// differences, over every element of every input. Non-scalar outputs are
/// contracted with fixed random weights first.
pub fn gradcheck(inputs: &[Tensor], build: &dyn Fn(&mut Tape, &[Var]) -> Var, seed: u64) -> f64 {
    let probe = {
        let mut t = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|x| t.constant(x.clone())).collect();
        let out = build(&mut t, &vars);
        let shape = t.value(out).unwrap().shape().to_vec();
        random_tensor(&shape, 1.0, &mut Rng::new(seed))
    };
    let scalar = |t: &mut Tape, vars: &[Var]| {
        let out = build(t, vars);
        let r = t.constant(probe.clone());
        let prod = t.mul(out, r).unwrap();
        t.sum(prod).unwrap()
    };
    let mut t = Tape::new();
    let vars: Vec<Var> = inputs
        .iter()
        .enumerate()
        .map(|(i, x)| t.param(i, x.clone()).unwrap())
        .collect();
    let s = scalar(&mut t, &vars);
    let grads = t.backward(s).unwrap();
    let f = |xs: &[Tensor]| {
        let mut t = Tape::new();
        let vars: Vec<Var> = xs.iter().map(|x| t.constant(x.clone())).collect();
        let s = scalar(&mut t, &vars);
        t.value(s).unwrap().item()
    };
    let mut worst: f64 = 0.0;
    for k in 0..inputs.len() {
        let num = numeric_grad(inputs, k, FD_STEP, &f);
        let ana = grads.get(k).unwrap();
        for (a, n) in ana.data().iter().zip(&num) {
            worst = worst.max(rel_err(*a, *n));
        }
    }
    worst
}

pub fn max_rel(a: &ParamSet, b: &ParamSet) -> f64 {
    a.flatten()
        .iter()
        .zip(b.flatten())
        .map(|(x, y)| rel_err(*x, y))
        .fold(0.0, f64::max)
}

pub fn tiny_arch() -> ArchConfig {
    ArchConfig {
        conv_channels: vec![2, 3],
        repr_dim: 5,
        proj_dim: 4,
        weight_hidden: 6,
    }
}

/// He init plus small random biases and a random weighting-net output
/// layer, so no activation sits exactly on a relu kink and weights vary.
pub fn random_params(arch: &ArchConfig, rng: &mut Rng) -> (ModelParams, WeightNetParams) {
    let (mut m, mut c) = init_params(arch, rng).unwrap();
    jitter(&mut m.0, 0.1, rng);
    jitter(&mut c.0, 0.3, rng);
    (m, c)
}

pub fn jitter(p: &mut ParamSet, scale: f64, rng: &mut Rng) {
    let flat: Vec<f64> = p.flatten().iter().map(|x| x + scale * rng.normal()).collect();
    p.set_flat(&flat).unwrap();
}

pub fn random_image(side: usize, rng: &mut Rng) -> Image {
    Image::new(side, side, (0..side * side).map(|_| rng.uniform()).collect()).unwrap()
}

/// A batch of `n` pairs of independent random images.
pub fn random_batch(n: usize, side: usize, rng: &mut Rng) -> PairBatch {
    let pairs = (0..n)
        .map(|i| PositivePair {
            x1: random_image(side, rng),
            x2: random_image(side, rng),
            video_id: format!("v{i}"),
            frame_indices: vec![0],
            xi1: 1.0,
            xi2: 1.0,
            strategy: Strategy::S1,
        })
        .collect();
    PairBatch { pairs }
}

/// Arch for the bi-level oracle: D = 4, d = 3, one small conv layer.
pub fn bilevel_arch() -> ArchConfig {
    ArchConfig {
        conv_channels: vec![2],
        repr_dim: 4,
        proj_dim: 3,
        weight_hidden: 3,
    }
}

/// Closed-form meta gradient against central differences of
/// `Θ_c ↦ L_valid(θ_m − α₁ Σ w_i(Θ_c) g_i)` on one random instance.
/// Returns the norm-relative error `‖a − f‖ / max(‖a‖, ‖f‖)`.
pub fn bilevel_instance(seed: u64, step: f64) -> Option<f64> {
    use muscl_core::meta::{batch_loss, lookahead_step, meta_gradient};
    use muscl_core::nets::WeightNetParams;

    let arch = bilevel_arch();
    let mut rng = Rng::new(seed);
    let (m, c) = random_params(&arch, &mut rng);
    let train = random_batch(2, 4, &mut rng);
    let valid = random_batch(2, 4, &mut rng);
    let (alpha1, tau) = (1.0, 0.5);

    let la = lookahead_step(&arch, &m, &c, &train, alpha1, tau).unwrap();
    let closed = meta_gradient(&arch, &la.theta_hat, &c, &la.per_pair, &valid, alpha1, tau)
        .unwrap()
        .grad
        .flatten();

    let objective = |flat: &[f64]| {
        let mut p = c.0.clone();
        p.set_flat(flat).unwrap();
        let la = lookahead_step(&arch, &m, &WeightNetParams(p), &train, alpha1, tau).unwrap();
        batch_loss(&arch, &la.theta_hat, &valid, tau).unwrap()
    };
    let base = c.0.flatten();
    let numeric: Vec<f64> = (0..base.len())
        .map(|k| {
            let at = |dx: f64| {
                let mut v = base.clone();
                v[k] += dx;
                objective(&v)
            };
            // five-point stencil
            (-at(2.0 * step) + 8.0 * at(step) - 8.0 * at(-step) + at(-2.0 * step)) / (12.0 * step)
        })
        .collect();
    let diff: f64 = closed.iter().zip(&numeric).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
    let na = closed.iter().map(|a| a * a).sum::<f64>().sqrt();
    let nf = numeric.iter().map(|a| a * a).sum::<f64>().sqrt();
    // every unit dead: the meta-gradient is identically zero
    if na < 1e-20 && nf < 1e-10 {
        return None;
    }
    Some(diff / na.max(nf))
}
