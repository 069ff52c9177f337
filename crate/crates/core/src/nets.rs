//! Encoder `f`, projection head `g`, and the pair-weighting network.
//!
//! Encoder: for each conv layer, pad 1, 3×3 valid conv, channel bias, relu,
//! 2×2 mean pool; then a global mean pool and a linear map to `D`. No batch
//! normalization. Projection: `D → D`, relu, `→ d`. Weighting net:
//! `[h1 + h2 ; |h1 − h2|] → hidden`, relu, `→ 1`, sigmoid.

use crate::data::Image;
use crate::error::{Error, Result};
use crate::tensor::{ParamSet, Rng, Tape, Tensor, Var};

pub const KERNEL: usize = 3;

#[derive(Clone, Debug, PartialEq)]
pub struct ArchConfig {
    pub conv_channels: Vec<usize>,
    /// `D`, the representation width.
    pub repr_dim: usize,
    /// `d`, the projection width.
    pub proj_dim: usize,
    pub weight_hidden: usize,
}

impl Default for ArchConfig {
    fn default() -> Self {
        ArchConfig {
            conv_channels: vec![8, 16, 32],
            repr_dim: 64,
            proj_dim: 32,
            weight_hidden: 100,
        }
    }
}

impl ArchConfig {
    pub fn validate(&self) -> Result<()> {
        if self.conv_channels.is_empty() || self.conv_channels.contains(&0) {
            return Err(Error::invalid(format!(
                "conv_channels must be non-empty and positive, got {:?}",
                self.conv_channels
            )));
        }
        if self.repr_dim == 0 || self.proj_dim == 0 || self.weight_hidden == 0 {
            return Err(Error::invalid("layer widths must be positive"));
        }
        Ok(())
    }

    /// Each pooling stage halves the side, so `2^layers` is the smallest
    /// input that leaves one pixel for the global pool.
    pub fn min_image_side(&self) -> usize {
        1 << self.conv_channels.len()
    }

    pub fn last_channels(&self) -> usize {
        *self.conv_channels.last().expect("validated non-empty")
    }

    /// Number of tensors in Θ_m.
    pub fn model_tensors(&self) -> usize {
        2 * self.conv_channels.len() + 6
    }

    /// Index of the encoder's final linear weight within Θ_m.
    pub fn head_index(&self) -> usize {
        2 * self.conv_channels.len()
    }
}

/// Θ_m: encoder and projection parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams(pub ParamSet);

/// Θ_c: weighting-network parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct WeightNetParams(pub ParamSet);

fn he_tensor(shape: &[usize], fan_in: usize, rng: &mut Rng) -> Tensor {
    let std = (2.0 / fan_in as f64).sqrt();
    let n: usize = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| std * rng.normal()).collect()).expect("finite draws")
}

/// He-normal weights, zero biases, and a zero final layer in the weighting
/// net so every initial weight is exactly 0.5.
pub fn init_params(arch: &ArchConfig, rng: &mut Rng) -> Result<(ModelParams, WeightNetParams)> {
    arch.validate()?;
    let mut m = ParamSet::new();
    let mut c_in = 1;
    for (i, &c_out) in arch.conv_channels.iter().enumerate() {
        m.push(
            format!("conv{i}.w"),
            he_tensor(&[c_out, c_in, KERNEL, KERNEL], c_in * KERNEL * KERNEL, rng),
        );
        m.push(format!("conv{i}.b"), Tensor::zeros(&[c_out]));
        c_in = c_out;
    }
    let (dd, d) = (arch.repr_dim, arch.proj_dim);
    m.push("enc.w", he_tensor(&[c_in, dd], c_in, rng));
    m.push("enc.b", Tensor::zeros(&[dd]));
    m.push("proj1.w", he_tensor(&[dd, dd], dd, rng));
    m.push("proj1.b", Tensor::zeros(&[dd]));
    m.push("proj2.w", he_tensor(&[dd, d], dd, rng));
    m.push("proj2.b", Tensor::zeros(&[d]));

    let mut c = ParamSet::new();
    c.push("cmw1.w", he_tensor(&[2 * dd, arch.weight_hidden], 2 * dd, rng));
    c.push("cmw1.b", Tensor::zeros(&[arch.weight_hidden]));
    c.push("cmw2.w", Tensor::zeros(&[arch.weight_hidden, 1]));
    c.push("cmw2.b", Tensor::zeros(&[1]));
    Ok((ModelParams(m), WeightNetParams(c)))
}

impl ModelParams {
    /// Checks that the tensor layout matches `arch`.
    pub fn check(&self, arch: &ArchConfig) -> Result<()> {
        let mut expected: Vec<Vec<usize>> = Vec::new();
        let mut c_in = 1;
        for &c_out in &arch.conv_channels {
            expected.push(vec![c_out, c_in, KERNEL, KERNEL]);
            expected.push(vec![c_out]);
            c_in = c_out;
        }
        let (dd, d) = (arch.repr_dim, arch.proj_dim);
        expected.extend([vec![c_in, dd], vec![dd], vec![dd, dd], vec![dd], vec![dd, d], vec![d]]);
        check_layout(&self.0, &expected, "model")
    }
}

impl WeightNetParams {
    pub fn check(&self, arch: &ArchConfig) -> Result<()> {
        let (dd, hid) = (arch.repr_dim, arch.weight_hidden);
        check_layout(&self.0, &[vec![2 * dd, hid], vec![hid], vec![hid, 1], vec![1]], "weight net")
    }
}

fn check_layout(set: &ParamSet, expected: &[Vec<usize>], what: &str) -> Result<()> {
    let ok = set.len() == expected.len()
        && set.tensors().iter().zip(expected).all(|(t, e)| t.shape() == e.as_slice());
    if ok {
        Ok(())
    } else {
        let got: Vec<&[usize]> = set.tensors().iter().map(Tensor::shape).collect();
        Err(Error::invalid(format!(
            "{what} parameters do not match the architecture: expected {expected:?}, got {got:?}"
        )))
    }
}

/// Stacks equally sized images into `[B, 1, H, W]`.
pub fn images_to_tensor(images: &[&Image]) -> Result<Tensor> {
    let first = images.first().ok_or_else(|| Error::invalid("no images to stack"))?;
    let (h, w) = first.dims();
    let mut data = Vec::with_capacity(images.len() * h * w);
    for img in images {
        if img.dims() != (h, w) {
            return Err(Error::invalid(format!(
                "cannot stack {:?} with {:?} images",
                img.dims(),
                (h, w)
            )));
        }
        data.extend_from_slice(img.pixels());
    }
    Tensor::new(vec![images.len(), 1, h, w], data)
}

fn check_input(arch: &ArchConfig, x: &Tensor) -> Result<()> {
    let s = x.shape();
    if s.len() != 4 || s[1] != 1 {
        return Err(Error::invalid(format!("encoder input must be [B, 1, H, W], got {s:?}")));
    }
    let min = arch.min_image_side();
    if s[2] < min || s[3] < min {
        return Err(Error::invalid(format!(
            "image {}x{} is too small for {} conv/pool stages; minimum is {min}x{min}",
            s[2],
            s[3],
            arch.conv_channels.len()
        )));
    }
    Ok(())
}

/// Conv stack plus global pool: `[B, 1, H, W] → [B, C_last]`.
pub fn conv_features_on(tape: &mut Tape, arch: &ArchConfig, m: &[Var], x: Var) -> Result<Var> {
    check_input(arch, tape.value(x)?)?;
    let mut a = x;
    for layer in 0..arch.conv_channels.len() {
        a = tape.pad2d(a, 1)?;
        a = tape.conv2d(a, m[2 * layer])?;
        a = tape.add_channel_bias(a, m[2 * layer + 1])?;
        a = tape.relu(a)?;
        a = tape.mean_pool2d(a, 2)?;
    }
    tape.global_mean_pool(a)
}

/// Final encoder linear map: `[B, C_last] → [B, D]`.
pub fn encoder_head_on(tape: &mut Tape, arch: &ArchConfig, m: &[Var], pooled: Var) -> Result<Var> {
    let k = arch.head_index();
    let h = tape.matmul(pooled, m[k])?;
    tape.add_bias(h, m[k + 1])
}

/// `H = f(x)` on a tape; `m` are the Θ_m vars in [`init_params`] order.
pub fn encode_on(tape: &mut Tape, arch: &ArchConfig, m: &[Var], x: Var) -> Result<Var> {
    let pooled = conv_features_on(tape, arch, m, x)?;
    encoder_head_on(tape, arch, m, pooled)
}

/// `Z = g(H)` on a tape.
pub fn project_on(tape: &mut Tape, arch: &ArchConfig, m: &[Var], h: Var) -> Result<Var> {
    let shape = tape.value(h)?.shape().to_vec();
    if shape.len() != 2 || shape[1] != arch.repr_dim {
        return Err(Error::ShapeMismatch {
            op: "project",
            left: shape,
            right: vec![0, arch.repr_dim],
        });
    }
    let k = arch.head_index() + 2;
    let a = tape.matmul(h, m[k])?;
    let a = tape.add_bias(a, m[k + 1])?;
    let a = tape.relu(a)?;
    let z = tape.matmul(a, m[k + 2])?;
    tape.add_bias(z, m[k + 3])
}

/// Logit bound that keeps the sigmoid strictly inside (0, 1) in f64.
pub const WEIGHT_LOGIT_LIMIT: f64 = 36.0;

/// Per-row weights `[N, 1]` for representation rows `h1[i]`, `h2[i]`.
pub fn weigh_on(tape: &mut Tape, c: &[Var], h1: Var, h2: Var) -> Result<Var> {
    let s = tape.add(h1, h2)?;
    let d = tape.sub(h1, h2)?;
    let d = tape.abs(d)?;
    let feats = tape.concat(&[s, d], 1)?;
    let a = tape.matmul(feats, c[0])?;
    let a = tape.add_bias(a, c[1])?;
    let a = tape.relu(a)?;
    let o = tape.matmul(a, c[2])?;
    let o = tape.add_bias(o, c[3])?;
    let o = tape.clamp(o, -WEIGHT_LOGIT_LIMIT, WEIGHT_LOGIT_LIMIT)?;
    tape.sigmoid(o)
}

/// `H` for a stack of images, off-tape.
pub fn encode(theta_m: &ModelParams, arch: &ArchConfig, images: &[&Image]) -> Result<Tensor> {
    let mut tape = Tape::new();
    let m = theta_m.0.register_const(&mut tape);
    let x = tape.constant(images_to_tensor(images)?);
    let h = encode_on(&mut tape, arch, &m, x)?;
    Ok(tape.value(h)?.clone())
}

/// Globally pooled conv features `[B, C_last]`, off-tape.
pub fn conv_features(theta_m: &ModelParams, arch: &ArchConfig, images: &[&Image]) -> Result<Tensor> {
    let mut tape = Tape::new();
    let m = theta_m.0.register_const(&mut tape);
    let x = tape.constant(images_to_tensor(images)?);
    let p = conv_features_on(&mut tape, arch, &m, x)?;
    Ok(tape.value(p)?.clone())
}

pub fn project(theta_m: &ModelParams, arch: &ArchConfig, h: &Tensor) -> Result<Tensor> {
    let mut tape = Tape::new();
    let m = theta_m.0.register_const(&mut tape);
    let hv = tape.constant(h.clone());
    let z = project_on(&mut tape, arch, &m, hv)?;
    Ok(tape.value(z)?.clone())
}

/// `W(h1, h2)` for one pair of representation vectors.
pub fn weigh(theta_c: &WeightNetParams, h1: &[f64], h2: &[f64]) -> Result<f64> {
    if h1.len() != h2.len() || h1.is_empty() {
        return Err(Error::ShapeMismatch {
            op: "weigh",
            left: vec![h1.len()],
            right: vec![h2.len()],
        });
    }
    let d = h1.len();
    let mut tape = Tape::new();
    let c = theta_c.0.register_const(&mut tape);
    let a = tape.constant(Tensor::new(vec![1, d], h1.to_vec())?);
    let b = tape.constant(Tensor::new(vec![1, d], h2.to_vec())?);
    let w = weigh_on(&mut tape, &c, a, b)?;
    Ok(tape.value(w)?.item())
}

/// Odd and even rows of an interleaved `[2N, D]` matrix as two `[N, D]` vars.
pub fn split_pairs(tape: &mut Tape, h: Var) -> Result<(Var, Var)> {
    let rows = tape.value(h)?.shape()[0];
    if rows % 2 != 0 {
        return Err(Error::invalid(format!("pair matrix needs an even row count, got {rows}")));
    }
    let first: Vec<usize> = (0..rows).step_by(2).collect();
    let second: Vec<usize> = (1..rows).step_by(2).collect();
    Ok((tape.select_rows(h, &first)?, tape.select_rows(h, &second)?))
}

/// Weights for every pair of an interleaved `[2N, D]` matrix.
pub fn weigh_batch(theta_c: &WeightNetParams, h: &Tensor) -> Result<Vec<f64>> {
    let mut tape = Tape::new();
    let c = theta_c.0.register_const(&mut tape);
    let hv = tape.constant(h.clone());
    let (a, b) = split_pairs(&mut tape, hv)?;
    let w = weigh_on(&mut tape, &c, a, b)?;
    Ok(tape.value(w)?.data().to_vec())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> ArchConfig {
        ArchConfig {
            conv_channels: vec![2, 3],
            repr_dim: 4,
            proj_dim: 3,
            weight_hidden: 5,
        }
    }

    fn random_images(n: usize, side: usize, rng: &mut Rng) -> Vec<Image> {
        (0..n)
            .map(|_| Image::new(side, side, (0..side * side).map(|_| rng.uniform()).collect()).unwrap())
            .collect()
    }

    #[test]
    fn zero_params_give_zero_outputs() {
        let arch = tiny();
        let (m, _) = init_params(&arch, &mut Rng::new(0)).unwrap();
        let zero = ModelParams(m.0.zeros_like());
        let imgs = random_images(2, 8, &mut Rng::new(1));
        let refs: Vec<&Image> = imgs.iter().collect();
        let h = encode(&zero, &arch, &refs).unwrap();
        assert!(h.data().iter().all(|&v| v == 0.0));
        let z = project(&zero, &arch, &h).unwrap();
        assert!(z.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn rows_are_independent() {
        let arch = tiny();
        let (m, _) = init_params(&arch, &mut Rng::new(0)).unwrap();
        let imgs = random_images(3, 8, &mut Rng::new(2));
        let fwd: Vec<&Image> = imgs.iter().collect();
        let rev: Vec<&Image> = imgs.iter().rev().collect();
        let a = encode(&m, &arch, &fwd).unwrap();
        let b = encode(&m, &arch, &rev).unwrap();
        for r in 0..3 {
            assert_eq!(a.row(r), b.row(2 - r));
        }
    }

    #[test]
    fn too_small_image_names_minimum() {
        let arch = ArchConfig::default();
        let (m, _) = init_params(&arch, &mut Rng::new(0)).unwrap();
        let img = Image::filled(4, 4, 0.5).unwrap();
        let err = encode(&m, &arch, &[&img]).unwrap_err().to_string();
        assert!(err.contains("8x8"), "{err}");
    }

    #[test]
    fn fresh_weight_net_is_one_half() {
        let arch = tiny();
        let (_, c) = init_params(&arch, &mut Rng::new(3)).unwrap();
        let mut rng = Rng::new(4);
        for _ in 0..20 {
            let a: Vec<f64> = (0..4).map(|_| rng.normal() * 5.0).collect();
            let b: Vec<f64> = (0..4).map(|_| rng.normal() * 5.0).collect();
            assert_eq!(weigh(&c, &a, &b).unwrap(), 0.5);
        }
    }

    #[test]
    fn init_is_deterministic_and_layout_checked() {
        let arch = ArchConfig::default();
        let a = init_params(&arch, &mut Rng::new(9)).unwrap();
        let b = init_params(&arch, &mut Rng::new(9)).unwrap();
        assert_eq!(a, b);
        a.0.check(&arch).unwrap();
        a.1.check(&arch).unwrap();
        assert!(a.0.check(&tiny()).is_err());
    }

    #[test]
    fn he_std_of_second_conv() {
        // 16 x 8 x 3 x 3 entries, fan_in 72
        let arch = ArchConfig::default();
        let (m, _) = init_params(&arch, &mut Rng::new(11)).unwrap();
        let w = m.0.by_name("conv1.w").unwrap();
        assert_eq!(w.shape(), &[16, 8, 3, 3]);
        let n = w.len() as f64;
        let mean = w.data().iter().sum::<f64>() / n;
        let std = (w.data().iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
        let target = (2.0f64 / 72.0).sqrt();
        assert!((std / target - 1.0).abs() < 0.1, "std {std} vs {target}");
    }

    #[test]
    fn weigh_rejects_mismatch() {
        let (_, c) = init_params(&tiny(), &mut Rng::new(0)).unwrap();
        assert!(weigh(&c, &[1.0; 4], &[1.0; 3]).is_err());
    }
}
