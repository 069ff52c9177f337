//! Forward and adjoint kernels shared by the tape.
//!
//! Image tensors are `[batch, channels, height, width]`. Convolution is
//! cross-correlation with "valid" padding and stride 1; use [`pad2d`] first
//! for size-preserving layers.

use super::Tensor;
use crate::error::{Error, Result};

fn dims4(t: &Tensor, op: &'static str, other: &Tensor) -> Result<[usize; 4]> {
    match *t.shape() {
        [a, b, c, d] => Ok([a, b, c, d]),
        _ => Err(Error::ShapeMismatch {
            op,
            left: t.shape().to_vec(),
            right: other.shape().to_vec(),
        }),
    }
}

pub(crate) fn dims2(t: &Tensor, op: &'static str, other: &Tensor) -> Result<[usize; 2]> {
    match *t.shape() {
        [a, b] => Ok([a, b]),
        _ => Err(Error::ShapeMismatch {
            op,
            left: t.shape().to_vec(),
            right: other.shape().to_vec(),
        }),
    }
}

/// `x: [B, C, H, W]`, `w: [O, C, KH, KW]` → `[B, O, H-KH+1, W-KW+1]`.
pub fn conv2d_valid(x: &Tensor, w: &Tensor) -> Result<Tensor> {
    let [b, c, h, wd] = dims4(x, "conv2d", w)?;
    let [o, wc, kh, kw] = dims4(w, "conv2d", x)?;
    if wc != c || kh > h || kw > wd {
        return Err(Error::ShapeMismatch {
            op: "conv2d",
            left: x.shape().to_vec(),
            right: w.shape().to_vec(),
        });
    }
    let (oh, ow) = (h - kh + 1, wd - kw + 1);
    let xs = x.data();
    let ws = w.data();
    let mut out = vec![0.0; b * o * oh * ow];
    for bi in 0..b {
        for oi in 0..o {
            let plane = &mut out[(bi * o + oi) * oh * ow..(bi * o + oi + 1) * oh * ow];
            for ci in 0..c {
                let input = &xs[(bi * c + ci) * h * wd..(bi * c + ci + 1) * h * wd];
                let kernel = &ws[(oi * c + ci) * kh * kw..(oi * c + ci + 1) * kh * kw];
                for ky in 0..kh {
                    for kx in 0..kw {
                        let wv = kernel[ky * kw + kx];
                        for y in 0..oh {
                            let src = &input[(y + ky) * wd + kx..(y + ky) * wd + kx + ow];
                            let dst = &mut plane[y * ow..(y + 1) * ow];
                            for (d, s) in dst.iter_mut().zip(src) {
                                *d += wv * s;
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(Tensor::from_parts(vec![b, o, oh, ow], out))
}

/// Adjoints of [`conv2d_valid`]. Either side can be skipped.
pub(crate) fn conv2d_backward(
    x: &Tensor,
    w: &Tensor,
    grad: &Tensor,
    want_x: bool,
    want_w: bool,
) -> (Option<Tensor>, Option<Tensor>) {
    let [b, c, h, wd] = <[usize; 4]>::try_from(x.shape()).expect("conv input rank");
    let [o, _, kh, kw] = <[usize; 4]>::try_from(w.shape()).expect("conv kernel rank");
    let (oh, ow) = (h - kh + 1, wd - kw + 1);
    let xs = x.data();
    let ws = w.data();
    let gs = grad.data();
    let mut gx = want_x.then(|| vec![0.0; xs.len()]);
    let mut gw = want_w.then(|| vec![0.0; ws.len()]);
    for bi in 0..b {
        for oi in 0..o {
            let gplane = &gs[(bi * o + oi) * oh * ow..(bi * o + oi + 1) * oh * ow];
            for ci in 0..c {
                let in_off = (bi * c + ci) * h * wd;
                let k_off = (oi * c + ci) * kh * kw;
                for ky in 0..kh {
                    for kx in 0..kw {
                        if let Some(gw) = gw.as_mut() {
                            let mut acc = 0.0;
                            for y in 0..oh {
                                let src = &xs[in_off + (y + ky) * wd + kx..][..ow];
                                let g = &gplane[y * ow..(y + 1) * ow];
                                acc += src.iter().zip(g).map(|(a, b)| a * b).sum::<f64>();
                            }
                            gw[k_off + ky * kw + kx] += acc;
                        }
                        if let Some(gx) = gx.as_mut() {
                            let wv = ws[k_off + ky * kw + kx];
                            for y in 0..oh {
                                let dst = &mut gx[in_off + (y + ky) * wd + kx..][..ow];
                                let g = &gplane[y * ow..(y + 1) * ow];
                                for (d, gv) in dst.iter_mut().zip(g) {
                                    *d += wv * gv;
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    (
        gx.map(|d| Tensor::from_parts(x.shape().to_vec(), d)),
        gw.map(|d| Tensor::from_parts(w.shape().to_vec(), d)),
    )
}

/// Zero-pads the two spatial dimensions of `[B, C, H, W]` by `pad` on every side.
pub fn pad2d(x: &Tensor, pad: usize) -> Result<Tensor> {
    let [b, c, h, w] = dims4(x, "pad2d", x)?;
    let (ph, pw) = (h + 2 * pad, w + 2 * pad);
    let mut out = vec![0.0; b * c * ph * pw];
    let xs = x.data();
    for plane in 0..b * c {
        for y in 0..h {
            let src = &xs[plane * h * w + y * w..][..w];
            out[plane * ph * pw + (y + pad) * pw + pad..][..w].copy_from_slice(src);
        }
    }
    Ok(Tensor::from_parts(vec![b, c, ph, pw], out))
}

pub(crate) fn pad2d_backward(grad: &Tensor, input_shape: &[usize], pad: usize) -> Tensor {
    let [b, c, h, w] = <[usize; 4]>::try_from(input_shape).expect("pad input rank");
    let (ph, pw) = (h + 2 * pad, w + 2 * pad);
    let gs = grad.data();
    let mut out = vec![0.0; b * c * h * w];
    for plane in 0..b * c {
        for y in 0..h {
            out[plane * h * w + y * w..][..w]
                .copy_from_slice(&gs[plane * ph * pw + (y + pad) * pw + pad..][..w]);
        }
    }
    Tensor::from_parts(input_shape.to_vec(), out)
}

/// Non-overlapping `k × k` mean pooling; trailing rows/columns that do not
/// fill a window are dropped.
pub(crate) fn mean_pool2d(x: &Tensor, k: usize) -> Result<Tensor> {
    let [b, c, h, w] = dims4(x, "mean_pool2d", x)?;
    if k == 0 || h < k || w < k {
        return Err(Error::ShapeMismatch {
            op: "mean_pool2d",
            left: x.shape().to_vec(),
            right: vec![k, k],
        });
    }
    let (oh, ow) = (h / k, w / k);
    let inv = 1.0 / (k * k) as f64;
    let xs = x.data();
    let mut out = vec![0.0; b * c * oh * ow];
    for plane in 0..b * c {
        let src = &xs[plane * h * w..(plane + 1) * h * w];
        let dst = &mut out[plane * oh * ow..(plane + 1) * oh * ow];
        for y in 0..oh * k {
            let row = &src[y * w..y * w + ow * k];
            let drow = &mut dst[(y / k) * ow..(y / k + 1) * ow];
            for (xo, d) in drow.iter_mut().enumerate() {
                *d += row[xo * k..(xo + 1) * k].iter().sum::<f64>();
            }
        }
        for d in dst.iter_mut() {
            *d *= inv;
        }
    }
    Ok(Tensor::from_parts(vec![b, c, oh, ow], out))
}

pub(crate) fn mean_pool2d_backward(grad: &Tensor, input_shape: &[usize], k: usize) -> Tensor {
    let [b, c, h, w] = <[usize; 4]>::try_from(input_shape).expect("pool input rank");
    let (oh, ow) = (h / k, w / k);
    let inv = 1.0 / (k * k) as f64;
    let gs = grad.data();
    let mut out = vec![0.0; b * c * h * w];
    for plane in 0..b * c {
        for y in 0..oh * k {
            for x in 0..ow * k {
                out[plane * h * w + y * w + x] = gs[plane * oh * ow + (y / k) * ow + x / k] * inv;
            }
        }
    }
    Tensor::from_parts(input_shape.to_vec(), out)
}

/// `[B, C, H, W]` → `[B, C]` spatial mean.
pub(crate) fn global_mean_pool(x: &Tensor) -> Result<Tensor> {
    let [b, c, h, w] = dims4(x, "global_mean_pool", x)?;
    let inv = 1.0 / (h * w) as f64;
    let out = x
        .data()
        .chunks_exact(h * w)
        .map(|p| p.iter().sum::<f64>() * inv)
        .collect();
    Ok(Tensor::from_parts(vec![b, c], out))
}

pub(crate) fn global_mean_pool_backward(grad: &Tensor, input_shape: &[usize]) -> Tensor {
    let hw = input_shape[2] * input_shape[3];
    let inv = 1.0 / hw as f64;
    let mut out = Vec::with_capacity(grad.len() * hw);
    for &g in grad.data() {
        out.extend(std::iter::repeat_n(g * inv, hw));
    }
    Tensor::from_parts(input_shape.to_vec(), out)
}

/// `[m, k] × [k, n]`, optionally transposing either operand first.
pub(crate) fn matmul_t(a: &Tensor, b: &Tensor, ta: bool, tb: bool) -> Result<Tensor> {
    let [ar, ac] = dims2(a, "matmul", b)?;
    let [br, bc] = dims2(b, "matmul", a)?;
    let (m, k) = if ta { (ac, ar) } else { (ar, ac) };
    let (k2, n) = if tb { (bc, br) } else { (br, bc) };
    if k != k2 {
        return Err(Error::ShapeMismatch {
            op: "matmul",
            left: a.shape().to_vec(),
            right: b.shape().to_vec(),
        });
    }
    let ad = a.data();
    let bd = b.data();
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = if ta { ad[p * ac + i] } else { ad[i * ac + p] };
            if av == 0.0 {
                continue;
            }
            if tb {
                for (j, o) in orow.iter_mut().enumerate() {
                    *o += av * bd[j * bc + p];
                }
            } else {
                for (o, bv) in orow.iter_mut().zip(&bd[p * bc..(p + 1) * bc]) {
                    *o += av * bv;
                }
            }
        }
    }
    Ok(Tensor::from_parts(vec![m, n], out))
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Straight nested-loop cross-correlation, written independently of the
    /// row-sliced kernel above.
    fn conv_oracle(x: &[f64], h: usize, w: usize, k: &[f64], kh: usize, kw: usize) -> Vec<f64> {
        let (oh, ow) = (h - kh + 1, w - kw + 1);
        let mut out = vec![0.0; oh * ow];
        for y in 0..oh {
            for xx in 0..ow {
                let mut s = 0.0;
                for i in 0..kh {
                    for j in 0..kw {
                        s += x[(y + i) * w + xx + j] * k[i * kw + j];
                    }
                }
                out[y * ow + xx] = s;
            }
        }
        out
    }

    #[test]
    fn conv_all_ones_kernel_is_neighbourhood_sum() {
        let img: Vec<f64> = (0..25).map(|v| (v as f64 * 0.37).sin()).collect();
        let x = Tensor::new(vec![1, 1, 5, 5], img.clone()).unwrap();
        let k = Tensor::ones(&[1, 1, 3, 3]);
        let y = conv2d_valid(&x, &k).unwrap();
        assert_eq!(y.shape(), &[1, 1, 3, 3]);
        // centre pixel (2,2) of the input sits at output (1,1)
        let mut neighbourhood = 0.0;
        for dy in 1..4 {
            for dx in 1..4 {
                neighbourhood += img[dy * 5 + dx];
            }
        }
        assert!((y.data()[4] - neighbourhood).abs() < 1e-14);
        let oracle = conv_oracle(&img, 5, 5, &[1.0; 9], 3, 3);
        for (a, b) in y.data().iter().zip(&oracle) {
            assert!((a - b).abs() < 1e-14);
        }
    }

    #[test]
    fn conv_matches_oracle_multichannel() {
        let (b, c, o, h, w) = (2, 3, 2, 6, 7);
        let xs: Vec<f64> = (0..b * c * h * w).map(|i| ((i * 7919) % 101) as f64 / 50.0 - 1.0).collect();
        let ks: Vec<f64> = (0..o * c * 9).map(|i| ((i * 31) % 17) as f64 / 8.0 - 1.0).collect();
        let x = Tensor::new(vec![b, c, h, w], xs.clone()).unwrap();
        let k = Tensor::new(vec![o, c, 3, 3], ks.clone()).unwrap();
        let y = conv2d_valid(&x, &k).unwrap();
        let (oh, ow) = (h - 2, w - 2);
        for bi in 0..b {
            for oi in 0..o {
                let mut expected = vec![0.0; oh * ow];
                for ci in 0..c {
                    let plane = &xs[(bi * c + ci) * h * w..][..h * w];
                    let kern = &ks[(oi * c + ci) * 9..][..9];
                    for (e, v) in expected.iter_mut().zip(conv_oracle(plane, h, w, kern, 3, 3)) {
                        *e += v;
                    }
                }
                let got = &y.data()[(bi * o + oi) * oh * ow..][..oh * ow];
                for (g, e) in got.iter().zip(&expected) {
                    assert!((g - e).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn conv_rejects_channel_mismatch() {
        let x = Tensor::zeros(&[1, 2, 5, 5]);
        let k = Tensor::zeros(&[1, 3, 3, 3]);
        let err = conv2d_valid(&x, &k).unwrap_err().to_string();
        assert!(err.contains("[1, 2, 5, 5]") && err.contains("[1, 3, 3, 3]"), "{err}");
    }

    #[test]
    fn pad_then_crop_round_trips() {
        let x = Tensor::new(vec![1, 2, 3, 3], (0..18).map(f64::from).collect()).unwrap();
        let p = pad2d(&x, 1).unwrap();
        assert_eq!(p.shape(), &[1, 2, 5, 5]);
        assert_eq!(p.data()[0], 0.0);
        assert_eq!(pad2d_backward(&p, x.shape(), 1), x);
    }

    #[test]
    fn mean_pool_drops_ragged_edge() {
        let x = Tensor::new(vec![1, 1, 3, 3], (1..=9).map(f64::from).collect()).unwrap();
        let y = mean_pool2d(&x, 2).unwrap();
        assert_eq!(y.shape(), &[1, 1, 1, 1]);
        assert_eq!(y.data()[0], (1.0 + 2.0 + 4.0 + 5.0) / 4.0);
    }

    #[test]
    fn matmul_transposes() {
        let a = Tensor::new(vec![2, 3], vec![1., 2., 3., 4., 5., 6.]).unwrap();
        let b = Tensor::new(vec![3, 2], vec![1., 0., 0., 1., 1., 1.]).unwrap();
        let ab = matmul_t(&a, &b, false, false).unwrap();
        assert_eq!(ab.data(), &[4., 5., 10., 11.]);
        let at = Tensor::new(vec![3, 2], vec![1., 4., 2., 5., 3., 6.]).unwrap();
        assert_eq!(matmul_t(&at, &b, true, false).unwrap(), ab);
        let bt = Tensor::new(vec![2, 3], vec![1., 0., 1., 0., 1., 1.]).unwrap();
        assert_eq!(matmul_t(&a, &bt, false, true).unwrap(), ab);
    }
}
