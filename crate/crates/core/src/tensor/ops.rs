use std::cmp::Ordering;

use super::Tensor;
use crate::error::{dim_err, param_err, Result};

fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, p: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * p];
    for i in 0..m {
        let row = &mut out[i * p..(i + 1) * p];
        for t in 0..k {
            let av = a[i * k + t];
            if av == 0.0 {
                continue;
            }
            let brow = &b[t * p..(t + 1) * p];
            for (o, bv) in row.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

fn transpose_raw(a: &[f64], r: usize, c: usize) -> Vec<f64> {
    let mut out = vec![0.0; r * c];
    for i in 0..r {
        for j in 0..c {
            out[j * r + i] = a[i * c + j];
        }
    }
    out
}

/// Splits `shape` around `axis` into (outer, len, inner) strides.
fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

/// Indices of the `k` largest entries of `v`, best first. Equal values keep
/// ascending index order.
pub fn topk_desc(v: &[f64], k: usize) -> Result<Vec<usize>> {
    if k == 0 || k > v.len() {
        return Err(param_err(format!("top-k with k = {k} over {} values", v.len())));
    }
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[b].partial_cmp(&v[a]).unwrap_or(Ordering::Equal).then(a.cmp(&b)));
    idx.truncate(k);
    Ok(idx)
}

impl Tensor {
    fn require_2d(&self, op: &str) -> Result<(usize, usize)> {
        match *self.shape() {
            [r, c] => Ok((r, c)),
            _ => Err(dim_err(format!("{op} expects a matrix, got shape {:?}", self.shape()))),
        }
    }

    fn require_same_shape(&self, other: &Tensor, op: &str) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(dim_err(format!("{op}: shapes {:?} and {:?} differ", self.shape(), other.shape())));
        }
        Ok(())
    }

    /// Matrix product of an m×k and a k×p tensor.
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        let (m, k) = self.require_2d("matmul")?;
        let (k2, p) = other.require_2d("matmul")?;
        if k != k2 {
            return Err(dim_err(format!(
                "matmul: inner extents of {:?} and {:?} disagree",
                self.shape(),
                other.shape()
            )));
        }
        let out = matmul_raw(self.data(), other.data(), m, k, p);
        let (a, b) = (self.clone(), other.clone());
        Ok(Tensor::from_op("matmul", vec![m, p], out, vec![self.clone(), other.clone()], move |g, _| {
            let ga = a.requires_grad().then(|| {
                let bt = transpose_raw(b.data(), k, p);
                matmul_raw(g, &bt, m, p, k)
            });
            let gb = b.requires_grad().then(|| {
                let at = transpose_raw(a.data(), m, k);
                matmul_raw(&at, g, k, m, p)
            });
            vec![ga, gb]
        }))
    }

    pub fn transpose(&self) -> Result<Tensor> {
        let (r, c) = self.require_2d("transpose")?;
        let out = transpose_raw(self.data(), r, c);
        Ok(Tensor::from_op("transpose", vec![c, r], out, vec![self.clone()], move |g, _| {
            vec![Some(transpose_raw(g, c, r))]
        }))
    }

    /// Same data under a new shape with equal element count.
    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        let numel: usize = shape.iter().product();
        if numel != self.numel() || shape.contains(&0) {
            return Err(dim_err(format!("cannot reshape {:?} into {shape:?}", self.shape())));
        }
        Ok(Tensor::from_op("reshape", shape.to_vec(), self.to_vec(), vec![self.clone()], |g, _| vec![Some(g.to_vec())]))
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.require_same_shape(other, "add")?;
        let out = self.data().iter().zip(other.data()).map(|(a, b)| a + b).collect();
        Ok(Tensor::from_op("add", self.shape().to_vec(), out, vec![self.clone(), other.clone()], |g, _| {
            vec![Some(g.to_vec()), Some(g.to_vec())]
        }))
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.require_same_shape(other, "sub")?;
        let out = self.data().iter().zip(other.data()).map(|(a, b)| a - b).collect();
        Ok(Tensor::from_op("sub", self.shape().to_vec(), out, vec![self.clone(), other.clone()], |g, _| {
            vec![Some(g.to_vec()), Some(g.iter().map(|v| -v).collect())]
        }))
    }

    /// Elementwise product.
    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        self.require_same_shape(other, "mul")?;
        let out = self.data().iter().zip(other.data()).map(|(a, b)| a * b).collect();
        let (a, b) = (self.clone(), other.clone());
        Ok(Tensor::from_op("mul", self.shape().to_vec(), out, vec![self.clone(), other.clone()], move |g, _| {
            let ga = a.requires_grad().then(|| g.iter().zip(b.data()).map(|(g, b)| g * b).collect());
            let gb = b.requires_grad().then(|| g.iter().zip(a.data()).map(|(g, a)| g * a).collect());
            vec![ga, gb]
        }))
    }

    pub fn scale(&self, factor: f64) -> Tensor {
        let out = self.data().iter().map(|v| v * factor).collect();
        Tensor::from_op("scale", self.shape().to_vec(), out, vec![self.clone()], move |g, _| {
            vec![Some(g.iter().map(|v| v * factor).collect())]
        })
    }

    pub fn add_scalar(&self, value: f64) -> Tensor {
        let out = self.data().iter().map(|v| v + value).collect();
        Tensor::from_op("add_scalar", self.shape().to_vec(), out, vec![self.clone()], |g, _| vec![Some(g.to_vec())])
    }

    /// Multiplies every element by the single value held in `factor`.
    pub fn mul_scalar(&self, factor: &Tensor) -> Result<Tensor> {
        if factor.numel() != 1 {
            return Err(dim_err(format!("mul_scalar: factor has shape {:?}", factor.shape())));
        }
        let s = factor.item();
        let out = self.data().iter().map(|v| v * s).collect();
        let (x, f) = (self.clone(), factor.clone());
        Ok(Tensor::from_op(
            "mul_scalar",
            self.shape().to_vec(),
            out,
            vec![self.clone(), factor.clone()],
            move |g, _| {
                let gx = x.requires_grad().then(|| g.iter().map(|v| v * s).collect());
                let gf = f.requires_grad().then(|| vec![g.iter().zip(x.data()).map(|(g, x)| g * x).sum()]);
                vec![gx, gf]
            },
        ))
    }

    /// Adds a vector of length `last extent` to every trailing row.
    pub fn add_bias(&self, bias: &Tensor) -> Result<Tensor> {
        let c = *self.shape().last().expect("rank >= 1");
        if bias.numel() != c {
            return Err(dim_err(format!("add_bias: bias of shape {:?} against rows of width {c}", bias.shape())));
        }
        let b = bias.data();
        let out = self.data().chunks(c).flat_map(|row| row.iter().zip(b).map(|(x, b)| x + b)).collect();
        Ok(Tensor::from_op("add_bias", self.shape().to_vec(), out, vec![self.clone(), bias.clone()], move |g, _| {
            let mut gb = vec![0.0; c];
            for row in g.chunks(c) {
                for (a, v) in gb.iter_mut().zip(row) {
                    *a += v;
                }
            }
            vec![Some(g.to_vec()), Some(gb)]
        }))
    }

    /// Sum of all elements, as a one-element tensor.
    pub fn sum(&self) -> Tensor {
        let n = self.numel();
        let s = self.data().iter().sum();
        Tensor::from_op("sum", vec![1], vec![s], vec![self.clone()], move |g, _| vec![Some(vec![g[0]; n])])
    }

    /// Arithmetic mean along `axis`; the axis is removed from the shape
    /// (a rank-1 input yields shape `[1]`).
    pub fn mean_axis(&self, axis: usize) -> Result<Tensor> {
        if axis >= self.rank() {
            return Err(param_err(format!("mean_axis: axis {axis} on rank {}", self.rank())));
        }
        let (outer, len, inner) = axis_split(self.shape(), axis);
        let x = self.data();
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for t in 0..len {
                let base = (o * len + t) * inner;
                for i in 0..inner {
                    out[o * inner + i] += x[base + i];
                }
            }
        }
        let inv = 1.0 / len as f64;
        out.iter_mut().for_each(|v| *v *= inv);
        let mut shape: Vec<usize> = self.shape().to_vec();
        shape.remove(axis);
        if shape.is_empty() {
            shape.push(1);
        }
        Ok(Tensor::from_op("mean_axis", shape, out, vec![self.clone()], move |g, _| {
            let mut gx = vec![0.0; outer * len * inner];
            for o in 0..outer {
                for t in 0..len {
                    let base = (o * len + t) * inner;
                    for i in 0..inner {
                        gx[base + i] = g[o * inner + i] * inv;
                    }
                }
            }
            vec![Some(gx)]
        }))
    }

    /// Joins tensors along `axis`; all other extents must agree.
    pub fn concat(parts: &[Tensor], axis: usize) -> Result<Tensor> {
        let first = parts.first().ok_or_else(|| dim_err("concat of zero tensors"))?;
        if axis >= first.rank() {
            return Err(param_err(format!("concat: axis {axis} on rank {}", first.rank())));
        }
        for p in parts {
            let ok = p.rank() == first.rank()
                && p.shape().iter().zip(first.shape()).enumerate().all(|(d, (a, b))| d == axis || a == b);
            if !ok {
                return Err(dim_err(format!(
                    "concat along axis {axis}: ragged shapes {:?} and {:?}",
                    first.shape(),
                    p.shape()
                )));
            }
        }
        let (outer, _, inner) = axis_split(first.shape(), axis);
        let lens: Vec<usize> = parts.iter().map(|p| p.shape()[axis]).collect();
        let total: usize = lens.iter().sum();
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for (p, &len) in parts.iter().zip(&lens) {
                out.extend_from_slice(&p.data()[o * len * inner..(o + 1) * len * inner]);
            }
        }
        let mut shape = first.shape().to_vec();
        shape[axis] = total;
        Ok(Tensor::from_op("concat", shape, out, parts.to_vec(), move |g, _| {
            let mut grads: Vec<Vec<f64>> = lens.iter().map(|&l| Vec::with_capacity(outer * l * inner)).collect();
            let mut off = 0;
            for _ in 0..outer {
                for (gp, &len) in grads.iter_mut().zip(&lens) {
                    gp.extend_from_slice(&g[off..off + len * inner]);
                    off += len * inner;
                }
            }
            grads.into_iter().map(Some).collect()
        }))
    }

    /// Selects slices along the first axis; indices may repeat.
    pub fn gather_rows(&self, index: &[usize]) -> Result<Tensor> {
        let rows = self.shape()[0];
        if index.is_empty() {
            return Err(dim_err("gather_rows with an empty index"));
        }
        if let Some(&bad) = index.iter().find(|&&i| i >= rows) {
            return Err(dim_err(format!("gather_rows: index {bad} out of {rows} rows")));
        }
        let width: usize = self.shape()[1..].iter().product();
        let x = self.data();
        let mut out = Vec::with_capacity(index.len() * width);
        for &r in index {
            out.extend_from_slice(&x[r * width..(r + 1) * width]);
        }
        let mut shape = self.shape().to_vec();
        shape[0] = index.len();
        let index = index.to_vec();
        Ok(Tensor::from_op("gather_rows", shape, out, vec![self.clone()], move |g, _| {
            let mut gx = vec![0.0; rows * width];
            for (k, &r) in index.iter().enumerate() {
                for (a, b) in gx[r * width..(r + 1) * width].iter_mut().zip(&g[k * width..(k + 1) * width]) {
                    *a += b;
                }
            }
            vec![Some(gx)]
        }))
    }

    /// Row-wise softmax of `self / temperature`, max-subtracted.
    pub fn softmax_rows(&self, temperature: f64) -> Result<Tensor> {
        let (r, c) = self.require_2d("softmax_rows")?;
        if temperature.is_nan() || temperature <= 0.0 {
            return Err(param_err(format!("softmax temperature must be positive, got {temperature}")));
        }
        let inv_t = 1.0 / temperature;
        let mut out = vec![0.0; r * c];
        for (row, orow) in self.data().chunks(c).zip(out.chunks_mut(c)) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for (o, x) in orow.iter_mut().zip(row) {
                *o = ((x - max) * inv_t).exp();
                z += *o;
            }
            orow.iter_mut().for_each(|o| *o /= z);
        }
        Ok(Tensor::from_op("softmax_rows", vec![r, c], out, vec![self.clone()], move |g, y| {
            let mut gx = vec![0.0; r * c];
            for i in 0..r {
                let (gr, yr) = (&g[i * c..(i + 1) * c], &y[i * c..(i + 1) * c]);
                let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                for j in 0..c {
                    gx[i * c + j] = inv_t * yr[j] * (gr[j] - dot);
                }
            }
            vec![Some(gx)]
        }))
    }

    /// Row-wise log-softmax of `self / temperature`.
    pub fn log_softmax_rows(&self, temperature: f64) -> Result<Tensor> {
        let (r, c) = self.require_2d("log_softmax_rows")?;
        if temperature.is_nan() || temperature <= 0.0 {
            return Err(param_err(format!("softmax temperature must be positive, got {temperature}")));
        }
        let inv_t = 1.0 / temperature;
        let mut out = vec![0.0; r * c];
        for (row, orow) in self.data().chunks(c).zip(out.chunks_mut(c)) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = row.iter().map(|x| ((x - max) * inv_t).exp()).sum::<f64>().ln();
            for (o, x) in orow.iter_mut().zip(row) {
                *o = (x - max) * inv_t - lse;
            }
        }
        Ok(Tensor::from_op("log_softmax_rows", vec![r, c], out, vec![self.clone()], move |g, y| {
            let mut gx = vec![0.0; r * c];
            for i in 0..r {
                let gsum: f64 = g[i * c..(i + 1) * c].iter().sum();
                for j in 0..c {
                    gx[i * c + j] = inv_t * (g[i * c + j] - y[i * c + j].exp() * gsum);
                }
            }
            vec![Some(gx)]
        }))
    }

    /// log Σ exp over all elements.
    pub fn logsumexp(&self) -> Tensor {
        let x = self.data();
        let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + x.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        let input = self.clone();
        Tensor::from_op("logsumexp", vec![1], vec![lse], vec![self.clone()], move |g, _| {
            vec![Some(input.data().iter().map(|v| g[0] * (v - lse).exp()).collect())]
        })
    }

    /// x · sigmoid(x)
    pub fn silu(&self) -> Tensor {
        let out = self.data().iter().map(|&x| x / (1.0 + (-x).exp())).collect();
        let input = self.clone();
        Tensor::from_op("silu", self.shape().to_vec(), out, vec![self.clone()], move |g, _| {
            let gx = input
                .data()
                .iter()
                .zip(g)
                .map(|(&x, g)| {
                    let s = 1.0 / (1.0 + (-x).exp());
                    g * s * (1.0 + x * (1.0 - s))
                })
                .collect();
            vec![Some(gx)]
        })
    }

    pub fn ln(&self) -> Tensor {
        let out = self.data().iter().map(|v| v.ln()).collect();
        let input = self.clone();
        Tensor::from_op("ln", self.shape().to_vec(), out, vec![self.clone()], move |g, _| {
            vec![Some(g.iter().zip(input.data()).map(|(g, x)| g / x).collect())]
        })
    }

    pub fn exp(&self) -> Tensor {
        let out = self.data().iter().map(|v| v.exp()).collect();
        Tensor::from_op("exp", self.shape().to_vec(), out, vec![self.clone()], |g, y| {
            vec![Some(g.iter().zip(y).map(|(g, y)| g * y).collect())]
        })
    }

    /// Sum of squared entries.
    pub fn sum_squares(&self) -> Tensor {
        let s = self.data().iter().map(|v| v * v).sum();
        let input = self.clone();
        Tensor::from_op("sum_squares", vec![1], vec![s], vec![self.clone()], move |g, _| {
            vec![Some(input.data().iter().map(|x| 2.0 * g[0] * x).collect())]
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::grad_check;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    fn naive_matmul(a: &[f64], b: &[f64], m: usize, k: usize, p: usize) -> Vec<f64> {
        let mut c = vec![0.0; m * p];
        for i in 0..m {
            for j in 0..p {
                let mut s = 0.0;
                for t in 0..k {
                    s += a[i * k + t] * b[t * p + j];
                }
                c[i * p + j] = s;
            }
        }
        c
    }

    #[test]
    fn matmul_identity_and_scalar() {
        let a = Tensor::new(&[3, 3], (1..=9).map(f64::from).collect()).unwrap();
        assert_eq!(Tensor::eye(3).matmul(&a).unwrap().data(), a.data());
        let c = Tensor::new(&[1, 1], vec![2.0]).unwrap().matmul(&Tensor::new(&[1, 1], vec![3.0]).unwrap()).unwrap();
        assert_eq!(c.data(), &[6.0]);
    }

    #[test]
    fn matmul_matches_triple_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = random(&[4, 3], &mut rng);
        let b = random(&[3, 5], &mut rng);
        let c = a.matmul(&b).unwrap();
        let oracle = naive_matmul(a.data(), b.data(), 4, 3, 5);
        for (x, y) in c.data().iter().zip(&oracle) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let err = Tensor::zeros(&[2, 3]).matmul(&Tensor::zeros(&[4, 2])).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("[4, 2]"), "{msg}");
    }

    #[test]
    fn softmax_examples() {
        let s = Tensor::full(&[2, 4], 3.0).softmax_rows(1.0).unwrap();
        assert!(s.data().iter().all(|v| (v - 0.25).abs() < 1e-15));
        let s = Tensor::new(&[3, 1], vec![-4.0, 0.0, 9.0]).unwrap().softmax_rows(0.5).unwrap();
        assert_eq!(s.data(), &[1.0, 1.0, 1.0]);
        let s = Tensor::new(&[1, 2], vec![0.0, 2f64.ln()]).unwrap().softmax_rows(1.0).unwrap();
        assert!((s.data()[0] - 1.0 / 3.0).abs() < 1e-15);
        assert!((s.data()[1] - 2.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn softmax_rejects_nonpositive_temperature() {
        let t = Tensor::zeros(&[1, 2]);
        assert!(t.softmax_rows(0.0).is_err());
        assert!(t.softmax_rows(-1.0).is_err());
    }

    #[test]
    fn softmax_is_stable_for_large_inputs() {
        let s = Tensor::new(&[1, 3], vec![1e300, 1e300, -1e300]).unwrap().softmax_rows(1.0).unwrap();
        assert!(s.all_finite());
        assert!((s.data()[0] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn mean_axis_examples() {
        let t = Tensor::new(&[4], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(t.mean_axis(0).unwrap().data(), &[2.5]);
        let t = Tensor::new(&[2, 1, 3], (0..6).map(f64::from).collect()).unwrap();
        let m = t.mean_axis(1).unwrap();
        assert_eq!(m.shape(), &[2, 3]);
        assert_eq!(m.data(), t.data());
        let m = Tensor::full(&[3, 5], 1.75).mean_axis(1).unwrap();
        assert!(m.data().iter().all(|&v| v == 1.75));
        assert!(matches!(t.mean_axis(3), Err(crate::Error::Parameter(_))));
    }

    #[test]
    fn concat_shapes() {
        let a = Tensor::zeros(&[3, 2]);
        assert_eq!(Tensor::concat(std::slice::from_ref(&a), 0).unwrap().data(), a.data());
        let b = Tensor::zeros(&[5, 2]);
        assert_eq!(Tensor::concat(&[a.clone(), b], 0).unwrap().shape(), &[8, 2]);
        // fine keys T_k*s^2 x c stacked on n summaries
        let (tk, s, n, c) = (2, 3, 4, 5);
        let fine = Tensor::zeros(&[tk * s * s, c]);
        let summary = Tensor::zeros(&[n, c]);
        assert_eq!(Tensor::concat(&[fine, summary], 0).unwrap().shape(), &[tk * s * s + n, c]);
        assert!(matches!(Tensor::concat(&[a, Tensor::zeros(&[3, 4])], 0), Err(crate::Error::Dimension(_))));
    }

    #[test]
    fn topk_examples() {
        assert_eq!(topk_desc(&[5.0, 1.0, 9.0], 2).unwrap(), vec![2, 0]);
        assert_eq!(topk_desc(&[7.0, 7.0, 7.0], 2).unwrap(), vec![0, 1]);
        assert_eq!(topk_desc(&[0.3, -1.0, 2.0, 0.3], 4).unwrap(), vec![2, 0, 3, 1]);
        assert!(topk_desc(&[1.0], 0).is_err());
        assert!(topk_desc(&[1.0], 2).is_err());
    }

    #[test]
    fn softmax_dot_gradcheck() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let w = random(&[8, 1], &mut rng);
        let x = random(&[1, 8], &mut rng);
        let report = grad_check("softmax_dot", |x| x.softmax_rows(1.0)?.matmul(&w), &x, 1e-5).unwrap();
        assert!(report.max_rel_error < 1e-4, "{report:?}");
    }

    #[test]
    fn sum_gradcheck_is_exact() {
        let x = Tensor::new(&[3, 2], vec![0.1, 0.2, -0.3, 0.4, 0.5, 0.6]).unwrap();
        let report = grad_check("sum", |x| Ok(x.sum()), &x, 1e-5).unwrap();
        assert!(report.max_rel_error < 1e-10, "{report:?}");
    }

    #[test]
    fn elementwise_ops_gradcheck() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = random(&[3, 4], &mut rng);
        let other = random(&[3, 4], &mut rng);
        let bias = random(&[4], &mut rng);
        let f = |x: &Tensor| -> Result<Tensor> {
            let y = x.mul(&other)?.add(x)?.sub(&other)?.add_bias(&bias)?.silu();
            let z = y.log_softmax_rows(0.7)?.transpose()?;
            let w = Tensor::concat(&[z.clone(), z.scale(0.3)], 1)?;
            let m = w.mean_axis(0)?.gather_rows(&[0, 2, 2, 5])?;
            m.sum_squares().add(&x.exp().sum())?.add(&x.add_scalar(3.0).ln().sum())?.add(&x.logsumexp())
        };
        let report = grad_check("elementwise", f, &x, 1e-5).unwrap();
        assert!(report.max_rel_error < 1e-4, "{report:?}");
    }

    #[test]
    fn mul_scalar_gradcheck_on_factor() {
        let x = Tensor::new(&[2, 2], vec![0.5, -1.0, 2.0, 0.25]).unwrap();
        let f = Tensor::scalar(1.3);
        let report = grad_check("mul_scalar", |a| Ok(x.mul_scalar(a)?.sum_squares()), &f, 1e-5).unwrap();
        assert!(report.max_rel_error < 1e-4, "{report:?}");
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn softmax_rows_are_distributions(r in 1usize..6, c in 1usize..9, seed in 0u64..1000, t in 0.05f64..5.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let m = random(&[r, c], &mut rng).scale(20.0);
            let s = m.softmax_rows(t).unwrap();
            for row in s.data().chunks(c) {
                prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
                prop_assert!(row.iter().all(|&v| (0.0..=1.0).contains(&v)));
            }
        }

        #[test]
        fn matmul_equals_triple_loop(m in 1usize..17, k in 1usize..17, p in 1usize..17, seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a = random(&[m, k], &mut rng);
            let b = random(&[k, p], &mut rng);
            let c = a.matmul(&b).unwrap();
            let oracle = naive_matmul(a.data(), b.data(), m, k, p);
            for (x, y) in c.data().iter().zip(&oracle) {
                prop_assert!((x - y).abs() < 1e-12);
            }
        }

        #[test]
        fn full_topk_sorts_descending(v in proptest::collection::vec(-5i32..5, 1..20)) {
            let v: Vec<f64> = v.into_iter().map(f64::from).collect();
            let idx = topk_desc(&v, v.len()).unwrap();
            let mapped: Vec<f64> = idx.iter().map(|&i| v[i]).collect();
            prop_assert!(mapped.windows(2).all(|w| w[0] >= w[1]));
            let mut sorted = idx.clone();
            sorted.sort_unstable();
            prop_assert_eq!(sorted, (0..v.len()).collect::<Vec<_>>());
        }

        #[test]
        fn concat_then_slice_recovers_parts(lens in proptest::collection::vec(1usize..5, 1..5), c in 1usize..4, seed in 0u64..100) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let parts: Vec<Tensor> = lens.iter().map(|&l| random(&[l, c], &mut rng)).collect();
            let joined = Tensor::concat(&parts, 0).unwrap();
            let mut start = 0;
            for p in &parts {
                let rows: Vec<usize> = (start..start + p.shape()[0]).collect();
                let slice = joined.gather_rows(&rows).unwrap();
                prop_assert_eq!(slice.data(), p.data());
                start += p.shape()[0];
            }
        }
    }
}
