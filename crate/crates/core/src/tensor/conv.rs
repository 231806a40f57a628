//! Convolution, pooling and normalization over channels-last `H×W×C` maps.

use super::Tensor;
use crate::error::{dim_err, param_err, Error, Result};

/// Border handling for "same" convolutions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Padding {
    #[default]
    Zero,
    Circular,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Conv2dSpec {
    pub stride: usize,
    pub groups: usize,
    pub padding: Padding,
}

impl Conv2dSpec {
    pub fn dense(stride: usize, padding: Padding) -> Self {
        Self { stride, groups: 1, padding }
    }

    pub fn depthwise(channels: usize, stride: usize, padding: Padding) -> Self {
        Self { stride, groups: channels, padding }
    }
}

fn hwc(t: &Tensor, op: &str) -> Result<(usize, usize, usize)> {
    match *t.shape() {
        [h, w, c] => Ok((h, w, c)),
        _ => Err(dim_err(format!("{op} expects an HxWxC map, got {:?}", t.shape()))),
    }
}

/// Resolves a possibly out-of-range tap coordinate; `None` means a zero pad.
#[inline]
fn tap(i: isize, len: usize, padding: Padding) -> Option<usize> {
    if (0..len as isize).contains(&i) {
        Some(i as usize)
    } else {
        match padding {
            Padding::Zero => None,
            Padding::Circular => Some(i.rem_euclid(len as isize) as usize),
        }
    }
}

impl Tensor {
    /// "Same"-padded 2-D convolution. `weight` is `K×K×(Cin/groups)×Cout`,
    /// `bias` has `Cout` entries; output extents are `ceil(H/stride)`.
    pub fn conv2d(&self, weight: &Tensor, bias: &Tensor, spec: Conv2dSpec) -> Result<Tensor> {
        let (h, w, cin) = hwc(self, "conv2d")?;
        let (k, cin_g, cout) = match *weight.shape() {
            [k1, k2, ci, co] if k1 == k2 && k1 % 2 == 1 => (k1, ci, co),
            _ => return Err(dim_err(format!("conv2d weight must be KxKxCixCo with odd K, got {:?}", weight.shape()))),
        };
        let g = spec.groups;
        if g == 0 || spec.stride == 0 {
            return Err(param_err("conv2d stride and groups must be positive"));
        }
        if cin % g != 0 || cout % g != 0 || cin / g != cin_g {
            return Err(dim_err(format!(
                "conv2d: input {:?} incompatible with weight {:?} at {g} groups",
                self.shape(),
                weight.shape()
            )));
        }
        if bias.numel() != cout {
            return Err(dim_err(format!("conv2d: bias {:?} for {cout} output channels", bias.shape())));
        }
        let (stride, padding) = (spec.stride, spec.padding);
        let pad = (k / 2) as isize;
        let (ho, wo) = (h.div_ceil(stride), w.div_ceil(stride));
        let cout_g = cout / g;

        let x = self.data();
        let wt = weight.data();
        let mut out = vec![0.0; ho * wo * cout];
        for oy in 0..ho {
            for ox in 0..wo {
                let orow = &mut out[(oy * wo + ox) * cout..(oy * wo + ox + 1) * cout];
                orow.copy_from_slice(bias.data());
                for ky in 0..k {
                    let Some(iy) = tap((oy * stride) as isize + ky as isize - pad, h, padding) else { continue };
                    for kx in 0..k {
                        let Some(ix) = tap((ox * stride) as isize + kx as isize - pad, w, padding) else { continue };
                        let xin = &x[(iy * w + ix) * cin..(iy * w + ix + 1) * cin];
                        let wbase = (ky * k + kx) * cin_g * cout;
                        for (o, ov) in orow.iter_mut().enumerate() {
                            let gi = o / cout_g;
                            let mut acc = 0.0;
                            for ci in 0..cin_g {
                                acc += xin[gi * cin_g + ci] * wt[wbase + ci * cout + o];
                            }
                            *ov += acc;
                        }
                    }
                }
            }
        }

        let (xt, wt_t) = (self.clone(), weight.clone());
        let parents = vec![self.clone(), weight.clone(), bias.clone()];
        Ok(Tensor::from_op("conv2d", vec![ho, wo, cout], out, parents, move |grad, _| {
            let x = xt.data();
            let wv = wt_t.data();
            let mut gx = vec![0.0; h * w * cin];
            let mut gw = vec![0.0; k * k * cin_g * cout];
            let mut gb = vec![0.0; cout];
            for oy in 0..ho {
                for ox in 0..wo {
                    let grow = &grad[(oy * wo + ox) * cout..(oy * wo + ox + 1) * cout];
                    for (b, gv) in gb.iter_mut().zip(grow) {
                        *b += gv;
                    }
                    for ky in 0..k {
                        let Some(iy) = tap((oy * stride) as isize + ky as isize - pad, h, padding) else { continue };
                        for kx in 0..k {
                            let Some(ix) = tap((ox * stride) as isize + kx as isize - pad, w, padding) else {
                                continue;
                            };
                            let xbase = (iy * w + ix) * cin;
                            let wbase = (ky * k + kx) * cin_g * cout;
                            for (o, &gv) in grow.iter().enumerate() {
                                if gv == 0.0 {
                                    continue;
                                }
                                let gi = o / cout_g;
                                for ci in 0..cin_g {
                                    let xi = xbase + gi * cin_g + ci;
                                    let wi = wbase + ci * cout + o;
                                    gx[xi] += gv * wv[wi];
                                    gw[wi] += gv * x[xi];
                                }
                            }
                        }
                    }
                }
            }
            vec![Some(gx), Some(gw), Some(gb)]
        }))
    }

    /// 2×2 max pooling with stride 2. Ties route the gradient to the first
    /// maximal cell in row-major order.
    pub fn max_pool2(&self) -> Result<Tensor> {
        let (h, w, c) = hwc(self, "max_pool2")?;
        if h % 2 != 0 || w % 2 != 0 {
            return Err(Error::Partition { h, w, s: 2 });
        }
        let (ho, wo) = (h / 2, w / 2);
        let x = self.data();
        let mut out = vec![0.0; ho * wo * c];
        let mut arg = vec![0usize; ho * wo * c];
        for oy in 0..ho {
            for ox in 0..wo {
                for ch in 0..c {
                    let mut best = f64::NEG_INFINITY;
                    let mut best_i = 0;
                    for (dy, dx) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                        let i = ((2 * oy + dy) * w + 2 * ox + dx) * c + ch;
                        if x[i] > best {
                            best = x[i];
                            best_i = i;
                        }
                    }
                    let o = (oy * wo + ox) * c + ch;
                    out[o] = best;
                    arg[o] = best_i;
                }
            }
        }
        Ok(Tensor::from_op("max_pool2", vec![ho, wo, c], out, vec![self.clone()], move |g, _| {
            let mut gx = vec![0.0; h * w * c];
            for (o, &i) in arg.iter().enumerate() {
                gx[i] += g[o];
            }
            vec![Some(gx)]
        }))
    }

    /// Normalizes every trailing vector to zero mean and unit variance, then
    /// applies a per-channel affine map.
    pub fn layer_norm(&self, gamma: &Tensor, beta: &Tensor, eps: f64) -> Result<Tensor> {
        let c = *self.shape().last().expect("rank >= 1");
        if gamma.numel() != c || beta.numel() != c {
            return Err(dim_err(format!("layer_norm: affine {:?}/{:?} for width {c}", gamma.shape(), beta.shape())));
        }
        let rows = self.numel() / c;
        let x = self.data();
        let (gm, bt) = (gamma.data(), beta.data());
        let mut xhat = vec![0.0; rows * c];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; rows * c];
        for r in 0..rows {
            let row = &x[r * c..(r + 1) * c];
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[r] = is;
            for j in 0..c {
                let xh = (row[j] - mean) * is;
                xhat[r * c + j] = xh;
                out[r * c + j] = xh * gm[j] + bt[j];
            }
        }
        let gamma_t = gamma.clone();
        let parents = vec![self.clone(), gamma.clone(), beta.clone()];
        Ok(Tensor::from_op("layer_norm", self.shape().to_vec(), out, parents, move |g, _| {
            let gm = gamma_t.data();
            let mut gx = vec![0.0; rows * c];
            let mut ggamma = vec![0.0; c];
            let mut gbeta = vec![0.0; c];
            for r in 0..rows {
                let gr = &g[r * c..(r + 1) * c];
                let xr = &xhat[r * c..(r + 1) * c];
                let mut mean_d = 0.0;
                let mut mean_dx = 0.0;
                for j in 0..c {
                    let d = gr[j] * gm[j];
                    mean_d += d;
                    mean_dx += d * xr[j];
                    ggamma[j] += gr[j] * xr[j];
                    gbeta[j] += gr[j];
                }
                mean_d /= c as f64;
                mean_dx /= c as f64;
                for j in 0..c {
                    gx[r * c + j] = inv_std[r] * (gr[j] * gm[j] - mean_d - xr[j] * mean_dx);
                }
            }
            vec![Some(gx), Some(ggamma), Some(gbeta)]
        }))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{grad_check, grad_check_sampled};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    /// Direct convolution straight from the definition, zero or circular border.
    fn conv_oracle(x: &Tensor, w: &Tensor, b: &Tensor, spec: Conv2dSpec) -> Vec<f64> {
        let [h, wd, cin] = x.shape().try_into().unwrap();
        let [k, _, cin_g, cout] = w.shape().try_into().unwrap();
        let cout_g = cout / spec.groups;
        let pad = (k / 2) as isize;
        let (ho, wo) = (h.div_ceil(spec.stride), wd.div_ceil(spec.stride));
        let mut out = vec![0.0; ho * wo * cout];
        for oy in 0..ho {
            for ox in 0..wo {
                for o in 0..cout {
                    let gi = o / cout_g;
                    let mut s = b.data()[o];
                    for ky in 0..k {
                        for kx in 0..k {
                            let mut iy = (oy * spec.stride) as isize + ky as isize - pad;
                            let mut ix = (ox * spec.stride) as isize + kx as isize - pad;
                            if spec.padding == Padding::Circular {
                                iy = iy.rem_euclid(h as isize);
                                ix = ix.rem_euclid(wd as isize);
                            } else if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                continue;
                            }
                            for ci in 0..cin_g {
                                let xv = x.data()[((iy as usize) * wd + ix as usize) * cin + gi * cin_g + ci];
                                let wv = w.data()[((ky * k + kx) * cin_g + ci) * cout + o];
                                s += xv * wv;
                            }
                        }
                    }
                    out[(oy * wo + ox) * cout + o] = s;
                }
            }
        }
        out
    }

    #[test]
    fn conv_matches_definition() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for (spec, cin, cout) in [
            (Conv2dSpec::dense(1, Padding::Zero), 3, 2),
            (Conv2dSpec::dense(2, Padding::Circular), 2, 4),
            (Conv2dSpec::depthwise(4, 2, Padding::Zero), 4, 4),
            (Conv2dSpec::depthwise(3, 1, Padding::Circular), 3, 3),
        ] {
            let x = random(&[6, 4, cin], &mut rng);
            let w = random(&[3, 3, cin / spec.groups, cout], &mut rng);
            let b = random(&[cout], &mut rng);
            let y = x.conv2d(&w, &b, spec).unwrap();
            let oracle = conv_oracle(&x, &w, &b, spec);
            for (a, o) in y.data().iter().zip(&oracle) {
                assert!((a - o).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn conv_gradcheck_all_inputs() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = random(&[4, 4, 2], &mut rng);
        let w = random(&[3, 3, 1, 2], &mut rng);
        let b = random(&[2], &mut rng);
        let spec = Conv2dSpec::depthwise(2, 2, Padding::Zero);
        let r = grad_check("conv_x", |x| Ok(x.conv2d(&w, &b, spec)?.sum_squares()), &x, 1e-5).unwrap();
        assert!(r.max_rel_error < 1e-4, "{r:?}");
        let r = grad_check("conv_w", |w| Ok(x.conv2d(w, &b, spec)?.sum_squares()), &w, 1e-5).unwrap();
        assert!(r.max_rel_error < 1e-4, "{r:?}");
        let r = grad_check("conv_b", |b| Ok(x.conv2d(&w, b, spec)?.sum_squares()), &b, 1e-5).unwrap();
        assert!(r.max_rel_error < 1e-4, "{r:?}");
    }

    #[test]
    fn max_pool_hand_enumerated() {
        // F[r, c] = 4r + c on a 4x4 grid
        let x = Tensor::new(&[4, 4, 1], (0..16).map(f64::from).collect()).unwrap();
        let y = x.max_pool2().unwrap();
        assert_eq!(y.shape(), &[2, 2, 1]);
        assert_eq!(y.data(), &[5.0, 7.0, 13.0, 15.0]);
        assert!(matches!(Tensor::zeros(&[3, 4, 1]).max_pool2(), Err(Error::Partition { .. })));
    }

    #[test]
    fn layer_norm_normalizes_and_differentiates() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = random(&[3, 5], &mut rng);
        let gamma = random(&[5], &mut rng);
        let beta = random(&[5], &mut rng);
        let y = x.layer_norm(&Tensor::full(&[5], 1.0), &Tensor::zeros(&[5]), 1e-12).unwrap();
        for row in y.data().chunks(5) {
            let m: f64 = row.iter().sum::<f64>() / 5.0;
            let v: f64 = row.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / 5.0;
            assert!(m.abs() < 1e-12 && (v - 1.0).abs() < 1e-9);
        }
        let w = random(&[3, 5], &mut rng);
        let loss = |x: &Tensor, g: &Tensor, b: &Tensor| Ok(x.layer_norm(g, b, 1e-5)?.mul(&w)?.sum());
        let r = grad_check_sampled("ln_x", |x| loss(x, &gamma, &beta), &x, 1e-5, 64).unwrap();
        assert!(r.max_rel_error < 1e-4, "{r:?}");
        let r = grad_check("ln_gamma", |g| loss(&x, g, &beta), &gamma, 1e-5).unwrap();
        assert!(r.max_rel_error < 1e-4, "{r:?}");
        let r = grad_check("ln_beta", |b| loss(&x, &gamma, b), &beta, 1e-5).unwrap();
        assert!(r.max_rel_error < 1e-4, "{r:?}");
    }
}
