//! Top-k window attention and the spatial/channel attention block.

use super::window::{
    select_top_k, window_average, window_partition, window_similarity, SimilarityMatrix, TopKIndex, WindowContext,
};
use crate::error::{dim_err, Result};
use crate::feature_map::FeatureMap;
use crate::param::{join, Init, Parameterized};
use crate::stem::{mbconv, pointwise, MbConvParams};
use crate::tensor::Tensor;

/// Weights of one attention block.
#[derive(Debug, Clone)]
pub struct AttentionParams {
    pub wq: Tensor,
    pub bq: Tensor,
    pub wk: Tensor,
    pub bk: Tensor,
    pub wv: Tensor,
    pub bv: Tensor,
    pub wo: Tensor,
    pub bo: Tensor,
    /// Query/key maps of the channel branch.
    pub wq_channel: Tensor,
    pub wk_channel: Tensor,
    pub alpha_spatial: Tensor,
    pub alpha_channel: Tensor,
    pub mbconv: MbConvParams,
}

impl AttentionParams {
    pub fn init(init: &mut Init, c: usize) -> Self {
        let std = (1.0 / c as f64).sqrt();
        Self {
            wq: init.normal(&[c, c], std),
            bq: Tensor::zeros(&[c]),
            wk: init.normal(&[c, c], std),
            bk: Tensor::zeros(&[c]),
            wv: init.normal(&[c, c], std),
            bv: Tensor::zeros(&[c]),
            wo: init.normal(&[c, c], std),
            bo: Tensor::zeros(&[c]),
            wq_channel: init.normal(&[c, c], std),
            wk_channel: init.normal(&[c, c], std),
            alpha_spatial: Tensor::scalar(1.0),
            alpha_channel: Tensor::scalar(0.1),
            mbconv: MbConvParams::init(init, c, c, 1, true),
        }
    }

    /// Identity projections, zero biases, default gates and a zero MBConv.
    pub fn identity(c: usize) -> Self {
        Self {
            wq: Tensor::eye(c),
            bq: Tensor::zeros(&[c]),
            wk: Tensor::eye(c),
            bk: Tensor::zeros(&[c]),
            wv: Tensor::eye(c),
            bv: Tensor::zeros(&[c]),
            wo: Tensor::eye(c),
            bo: Tensor::zeros(&[c]),
            wq_channel: Tensor::eye(c),
            wk_channel: Tensor::eye(c),
            alpha_spatial: Tensor::scalar(1.0),
            alpha_channel: Tensor::scalar(0.1),
            mbconv: MbConvParams::zeros(c, c, 1),
        }
    }

    pub fn channels(&self) -> usize {
        self.wq.shape()[0]
    }
}

impl Parameterized for AttentionParams {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor)) {
        for (name, t) in [
            ("wq", &self.wq),
            ("bq", &self.bq),
            ("wk", &self.wk),
            ("bk", &self.bk),
            ("wv", &self.wv),
            ("bv", &self.bv),
            ("wo", &self.wo),
            ("bo", &self.bo),
            ("wq_channel", &self.wq_channel),
            ("wk_channel", &self.wk_channel),
            ("alpha_spatial", &self.alpha_spatial),
            ("alpha_channel", &self.alpha_channel),
        ] {
            f(&join(prefix, name), t);
        }
        self.mbconv.visit(&join(prefix, "mbconv"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        for (name, t) in [
            ("wq", &mut self.wq),
            ("bq", &mut self.bq),
            ("wk", &mut self.wk),
            ("bk", &mut self.bk),
            ("wv", &mut self.wv),
            ("bv", &mut self.bv),
            ("wo", &mut self.wo),
            ("bo", &mut self.bo),
            ("wq_channel", &mut self.wq_channel),
            ("wk_channel", &mut self.wk_channel),
            ("alpha_spatial", &mut self.alpha_spatial),
            ("alpha_channel", &mut self.alpha_channel),
        ] {
            f(&join(prefix, name), t);
        }
        self.mbconv.visit_mut(&join(prefix, "mbconv"), f);
    }
}

/// `q` from `x1`; `k`, `v` from `x2`. Each is `h×w×c`.
pub fn project_qkv(x1: &FeatureMap, x2: &FeatureMap, p: &AttentionParams) -> Result<(Tensor, Tensor, Tensor)> {
    if x1.extents() != x2.extents() {
        return Err(dim_err(format!("attention inputs differ: {:?} vs {:?}", x1.tensor.shape(), x2.tensor.shape())));
    }
    let q = pointwise(&x1.tensor, &p.wq, &p.bq)?;
    let k = pointwise(&x2.tensor, &p.wk, &p.bk)?;
    let v = pointwise(&x2.tensor, &p.wv, &p.bv)?;
    Ok((q, k, v))
}

/// Everything computed by one top-k window attention pass.
#[derive(Debug, Clone)]
pub struct WindowAttentionOutput {
    /// `h×w×c`
    pub output: Tensor,
    pub similarity: SimilarityMatrix,
    pub index: TopKIndex,
    /// Per query window, the `s² × (T_k·s² + n)` attention weights.
    pub weights: Vec<Tensor>,
}

/// Top-k window attention over already projected `q`, `k`, `v`.
///
/// Each query patch attends with scaled dot products (`1/√c`, then
/// `softmax(·/temperature)`) to the fine patches of its window's `T_k` most
/// similar key windows plus every key-window summary.
pub fn window_attention_qkv(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    ctx: &WindowContext,
    temperature: f64,
) -> Result<WindowAttentionOutput> {
    let [h, w, c]: [usize; 3] =
        q.shape().try_into().map_err(|_| dim_err(format!("queries must be HxWxC, got {:?}", q.shape())))?;
    if k.shape() != q.shape() || v.shape() != q.shape() {
        return Err(dim_err(format!("q {:?}, k {:?}, v {:?} differ", q.shape(), k.shape(), v.shape())));
    }
    if ctx.grid.h != h || ctx.grid.w != w {
        return Err(dim_err(format!("window context is {}x{} but features are {h}x{w}", ctx.grid.h, ctx.grid.w)));
    }
    let s = ctx.s();
    let q_sum = window_average(&window_partition(q, s)?)?;
    let k_sum = window_average(&window_partition(k, s)?)?;
    let v_sum = window_average(&window_partition(v, s)?)?;
    let similarity = window_similarity(&q_sum, &k_sum)?;
    let index = select_top_k(&similarity, ctx.top_k)?;

    // gather straight from the flat maps instead of materializing partitions
    let qf = q.reshape(&[h * w, c])?;
    let kf = k.reshape(&[h * w, c])?;
    let vf = v.reshape(&[h * w, c])?;
    let scale = 1.0 / (c as f64).sqrt();
    let n = ctx.n();
    let mut outputs = Vec::with_capacity(n);
    let mut weights = Vec::with_capacity(n);
    for win in 0..n {
        let rows: Vec<usize> = index.row(win).iter().flat_map(|&j| ctx.grid.window_rows(j)).collect();
        let keys = Tensor::concat(&[kf.gather_rows(&rows)?, k_sum.data.clone()], 0)?;
        let values = Tensor::concat(&[vf.gather_rows(&rows)?, v_sum.data.clone()], 0)?;
        let queries = qf.gather_rows(&ctx.grid.window_rows(win))?;
        let attn = queries.matmul(&keys.transpose()?)?.scale(scale).softmax_rows(temperature)?;
        outputs.push(attn.matmul(&values)?);
        weights.push(attn);
    }

    let in_window_order = Tensor::concat(&outputs, 0)?;
    let order = ctx.grid.partition_order();
    let mut inverse = vec![0; order.len()];
    for (pos, &src) in order.iter().enumerate() {
        inverse[src] = pos;
    }
    let output = in_window_order.gather_rows(&inverse)?.reshape(&[h, w, c])?;
    Ok(WindowAttentionOutput { output, similarity, index, weights })
}

/// Projects `x1`/`x2` and runs top-k window attention.
pub fn top_k_window_attention(
    x1: &FeatureMap,
    x2: &FeatureMap,
    ctx: &WindowContext,
    p: &AttentionParams,
    temperature: f64,
) -> Result<Tensor> {
    let (q, k, v) = project_qkv(x1, x2, p)?;
    Ok(window_attention_qkv(&q, &k, &v, ctx, temperature)?.output)
}

/// Channel-to-channel attention. Channel descriptors are the window-pooled
/// query/key maps (`n` values per channel); the `c×c` softmax of their
/// scaled similarity mixes the channels of `v`.
pub fn channel_attention(
    x1: &FeatureMap,
    x2: &FeatureMap,
    v: &Tensor,
    ctx: &WindowContext,
    p: &AttentionParams,
    temperature: f64,
) -> Result<Tensor> {
    let (h, w, c) = x1.extents();
    let s = ctx.s();
    let qc = pointwise(&x1.tensor, &p.wq_channel, &Tensor::zeros(&[c]))?;
    let kc = pointwise(&x2.tensor, &p.wk_channel, &Tensor::zeros(&[c]))?;
    let q_pool = window_average(&window_partition(&qc, s)?)?.data;
    let k_pool = window_average(&window_partition(&kc, s)?)?.data;
    let n = ctx.n() as f64;
    let mix = q_pool.transpose()?.matmul(&k_pool)?.scale(1.0 / n.sqrt()).softmax_rows(temperature)?;
    v.reshape(&[h * w, c])?.matmul(&mix.transpose()?)?.reshape(&[h, w, c])
}

/// `y = x1 + α_s·V_s + α_c·V_c`, output `y + MBConv(y)`.
pub fn attention_block(
    x1: &FeatureMap,
    x2: &FeatureMap,
    ctx: &WindowContext,
    p: &AttentionParams,
    temperature: f64,
) -> Result<FeatureMap> {
    let (q, k, v) = project_qkv(x1, x2, p)?;
    let spatial = window_attention_qkv(&q, &k, &v, ctx, temperature)?.output;
    let spatial = pointwise(&spatial, &p.wo, &p.bo)?;
    let channel = channel_attention(x1, x2, &v, ctx, p, temperature)?;
    let y = x1.tensor.add(&spatial.mul_scalar(&p.alpha_spatial)?)?.add(&channel.mul_scalar(&p.alpha_channel)?)?;
    let y = x1.with_tensor(y)?;
    let out = y.tensor.add(&mbconv(&y, &p.mbconv)?.tensor)?;
    y.with_tensor(out)
}
