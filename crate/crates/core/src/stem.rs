//! Convolutional backbone producing 1/2- and 1/8-scale feature maps.
//!
//! The downsampling chain is `conv3x3 -> Trans -> stage1 -> Trans -> stage2
//! -> Trans -> stage3 -> Trans`, giving maps at 1/2, 1/4, 1/8 and 1/16 of
//! the input. Stage `i` holds `i` MB blocks. The 1/16 map is upsampled,
//! projected to the 1/8 width and summed into the 1/8 map before a final
//! residual MBConv.

use crate::error::{dim_err, Error, Result};
use crate::feature_map::FeatureMap;
use crate::param::{join, Init, Parameterized};
use crate::tensor::{Conv2dSpec, Padding, Tensor};

pub const EXPANSION: usize = 4;
const LN_EPS: f64 = 1e-5;

/// Inverted bottleneck: pointwise expand, depthwise 3×3, pointwise project.
#[derive(Debug, Clone)]
pub struct MbConvParams {
    pub expand_w: Tensor,
    pub expand_b: Tensor,
    pub norm1_g: Tensor,
    pub norm1_b: Tensor,
    pub dw_w: Tensor,
    pub dw_b: Tensor,
    pub norm2_g: Tensor,
    pub norm2_b: Tensor,
    pub project_w: Tensor,
    pub project_b: Tensor,
    pub stride: usize,
    pub padding: Padding,
}

impl MbConvParams {
    pub fn init(init: &mut Init, cin: usize, cout: usize, stride: usize, residual: bool) -> Self {
        let e = cin * EXPANSION;
        // residual branches start small so stacked blocks stay near identity
        let project_gain = if residual { 0.25 } else { 1.0 };
        Self {
            expand_w: init.normal(&[cin, e], (2.0 / cin as f64).sqrt()),
            expand_b: Tensor::zeros(&[e]),
            norm1_g: Tensor::full(&[e], 1.0),
            norm1_b: Tensor::zeros(&[e]),
            dw_w: init.normal(&[3, 3, 1, e], (2.0 / 9.0f64).sqrt()),
            dw_b: Tensor::zeros(&[e]),
            norm2_g: Tensor::full(&[e], 1.0),
            norm2_b: Tensor::zeros(&[e]),
            project_w: init.normal(&[e, cout], project_gain / (e as f64).sqrt()),
            project_b: Tensor::zeros(&[cout]),
            stride,
            padding: Padding::Zero,
        }
    }

    /// All tensors zero.
    pub fn zeros(cin: usize, cout: usize, stride: usize) -> Self {
        let e = cin * EXPANSION;
        Self {
            expand_w: Tensor::zeros(&[cin, e]),
            expand_b: Tensor::zeros(&[e]),
            norm1_g: Tensor::zeros(&[e]),
            norm1_b: Tensor::zeros(&[e]),
            dw_w: Tensor::zeros(&[3, 3, 1, e]),
            dw_b: Tensor::zeros(&[e]),
            norm2_g: Tensor::zeros(&[e]),
            norm2_b: Tensor::zeros(&[e]),
            project_w: Tensor::zeros(&[e, cout]),
            project_b: Tensor::zeros(&[cout]),
            stride,
            padding: Padding::Zero,
        }
    }

    pub fn in_channels(&self) -> usize {
        self.expand_w.shape()[0]
    }

    pub fn out_channels(&self) -> usize {
        self.project_w.shape()[1]
    }
}

impl Parameterized for MbConvParams {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor)) {
        f(&join(prefix, "expand_w"), &self.expand_w);
        f(&join(prefix, "expand_b"), &self.expand_b);
        f(&join(prefix, "norm1_g"), &self.norm1_g);
        f(&join(prefix, "norm1_b"), &self.norm1_b);
        f(&join(prefix, "dw_w"), &self.dw_w);
        f(&join(prefix, "dw_b"), &self.dw_b);
        f(&join(prefix, "norm2_g"), &self.norm2_g);
        f(&join(prefix, "norm2_b"), &self.norm2_b);
        f(&join(prefix, "project_w"), &self.project_w);
        f(&join(prefix, "project_b"), &self.project_b);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        f(&join(prefix, "expand_w"), &mut self.expand_w);
        f(&join(prefix, "expand_b"), &mut self.expand_b);
        f(&join(prefix, "norm1_g"), &mut self.norm1_g);
        f(&join(prefix, "norm1_b"), &mut self.norm1_b);
        f(&join(prefix, "dw_w"), &mut self.dw_w);
        f(&join(prefix, "dw_b"), &mut self.dw_b);
        f(&join(prefix, "norm2_g"), &mut self.norm2_g);
        f(&join(prefix, "norm2_b"), &mut self.norm2_b);
        f(&join(prefix, "project_w"), &mut self.project_w);
        f(&join(prefix, "project_b"), &mut self.project_b);
    }
}

/// Applies `F·W + b` at every cell of an `H×W×Cin` map.
pub fn pointwise(map: &Tensor, w: &Tensor, b: &Tensor) -> Result<Tensor> {
    let [h, wd, c]: [usize; 3] =
        map.shape().try_into().map_err(|_| dim_err(format!("pointwise expects HxWxC, got {:?}", map.shape())))?;
    let cout = w.shape()[1];
    map.reshape(&[h * wd, c])?.matmul(w)?.add_bias(b)?.reshape(&[h, wd, cout])
}

pub fn mbconv(f: &FeatureMap, p: &MbConvParams) -> Result<FeatureMap> {
    if f.c() != p.in_channels() {
        return Err(dim_err(format!("mbconv: map has {} channels, block expects {}", f.c(), p.in_channels())));
    }
    let e = p.expand_w.shape()[1];
    let x = pointwise(&f.tensor, &p.expand_w, &p.expand_b)?.layer_norm(&p.norm1_g, &p.norm1_b, LN_EPS)?.silu();
    let x = x
        .conv2d(&p.dw_w, &p.dw_b, Conv2dSpec::depthwise(e, p.stride, p.padding))?
        .layer_norm(&p.norm2_g, &p.norm2_b, LN_EPS)?
        .silu();
    let out = pointwise(&x, &p.project_w, &p.project_b)?;
    FeatureMap::new(out, f.stride * p.stride)
}

/// Two residual MBConv units in series.
#[derive(Debug, Clone)]
pub struct MbBlockParams {
    pub first: MbConvParams,
    pub second: MbConvParams,
}

impl MbBlockParams {
    pub fn init(init: &mut Init, c: usize) -> Self {
        Self { first: MbConvParams::init(init, c, c, 1, true), second: MbConvParams::init(init, c, c, 1, true) }
    }

    pub fn zeros(c: usize) -> Self {
        Self { first: MbConvParams::zeros(c, c, 1), second: MbConvParams::zeros(c, c, 1) }
    }
}

impl Parameterized for MbBlockParams {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor)) {
        self.first.visit(&join(prefix, "first"), f);
        self.second.visit(&join(prefix, "second"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        self.first.visit_mut(&join(prefix, "first"), f);
        self.second.visit_mut(&join(prefix, "second"), f);
    }
}

/// `y = F + mbconv1(F); out = y + mbconv2(y)`
pub fn mb_block(f: &FeatureMap, p: &MbBlockParams) -> Result<FeatureMap> {
    let y = f.with_tensor(f.tensor.add(&mbconv(f, &p.first)?.tensor)?)?;
    let out = y.tensor.add(&mbconv(&y, &p.second)?.tensor)?;
    y.with_tensor(out)
}

/// Halving block: stride-2 MBConv path plus max-pool / 1×1 conv path.
#[derive(Debug, Clone)]
pub struct TransParams {
    pub mbconv: MbConvParams,
    pub pool_w: Tensor,
    pub pool_b: Tensor,
}

impl TransParams {
    pub fn init(init: &mut Init, cin: usize, cout: usize) -> Self {
        Self {
            mbconv: MbConvParams::init(init, cin, cout, 2, true),
            pool_w: init.normal(&[cin, cout], (1.0 / cin as f64).sqrt()),
            pool_b: Tensor::zeros(&[cout]),
        }
    }

    pub fn zeros(cin: usize, cout: usize) -> Self {
        Self {
            mbconv: MbConvParams::zeros(cin, cout, 2),
            pool_w: Tensor::zeros(&[cin, cout]),
            pool_b: Tensor::zeros(&[cout]),
        }
    }
}

impl Parameterized for TransParams {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor)) {
        self.mbconv.visit(&join(prefix, "mbconv"), f);
        f(&join(prefix, "pool_w"), &self.pool_w);
        f(&join(prefix, "pool_b"), &self.pool_b);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        self.mbconv.visit_mut(&join(prefix, "mbconv"), f);
        f(&join(prefix, "pool_w"), &mut self.pool_w);
        f(&join(prefix, "pool_b"), &mut self.pool_b);
    }
}

pub fn trans_block(f: &FeatureMap, p: &TransParams) -> Result<FeatureMap> {
    let (h, w, _) = f.extents();
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::Partition { h, w, s: 2 });
    }
    let conv_path = mbconv(f, &p.mbconv)?;
    let pooled = pointwise(&f.tensor.max_pool2()?, &p.pool_w, &p.pool_b)?;
    conv_path.with_tensor(conv_path.tensor.add(&pooled)?)
}

/// Nearest-neighbour ×2 upsampling: every cell becomes a 2×2 block.
pub fn upsample_nearest2(f: &FeatureMap) -> Result<FeatureMap> {
    let (h, w, c) = f.extents();
    let index: Vec<usize> = (0..2 * h).flat_map(|y| (0..2 * w).map(move |x| (y / 2) * w + x / 2)).collect();
    let up = f.flat()?.gather_rows(&index)?.reshape(&[2 * h, 2 * w, c])?;
    FeatureMap::new(up, (f.stride / 2).max(1))
}

/// Output of [`stem_forward`].
#[derive(Debug, Clone)]
pub struct PyramidFeatures {
    pub f_half: FeatureMap,
    pub f_eighth: FeatureMap,
}

#[derive(Debug, Clone)]
pub struct StemParams {
    pub entry_w: Tensor,
    pub entry_b: Tensor,
    /// Transition blocks to 1/2, 1/4, 1/8 and 1/16.
    pub trans: Vec<TransParams>,
    /// `stages[i]` holds `i + 1` blocks.
    pub stages: Vec<Vec<MbBlockParams>>,
    pub merge_w: Tensor,
    pub merge_b: Tensor,
    pub merge_mbconv: MbConvParams,
}

impl StemParams {
    /// `channels` are the widths at 1/2, 1/4, 1/8 and 1/16 scale.
    pub fn init(seed: u64, channels: [usize; 4]) -> Self {
        let mut init = Init::new(seed);
        let [c0, c1, c2, c3] = channels;
        let entry_w = init.normal(&[3, 3, 1, c0], (2.0 / 9.0f64).sqrt());
        let ins = [c0, c0, c1, c2];
        let mut trans = Vec::new();
        let mut stages = Vec::new();
        for i in 0..4 {
            trans.push(TransParams::init(&mut init, ins[i], channels[i]));
            if i < 3 {
                stages.push((0..=i).map(|_| MbBlockParams::init(&mut init, channels[i])).collect());
            }
        }
        Self {
            entry_w,
            entry_b: Tensor::zeros(&[c0]),
            trans,
            stages,
            merge_w: init.normal(&[c3, c2], (1.0 / c3 as f64).sqrt()),
            merge_b: Tensor::zeros(&[c2]),
            merge_mbconv: MbConvParams::init(&mut init, c2, c2, 1, true),
        }
    }

    pub fn zeros(channels: [usize; 4]) -> Self {
        let [c0, _, c2, c3] = channels;
        let ins = [c0, c0, channels[1], c2];
        Self {
            entry_w: Tensor::zeros(&[3, 3, 1, c0]),
            entry_b: Tensor::zeros(&[c0]),
            trans: (0..4).map(|i| TransParams::zeros(ins[i], channels[i])).collect(),
            stages: (0..3).map(|i| (0..=i).map(|_| MbBlockParams::zeros(channels[i])).collect()).collect(),
            merge_w: Tensor::zeros(&[c3, c2]),
            merge_b: Tensor::zeros(&[c2]),
            merge_mbconv: MbConvParams::zeros(c2, c2, 1),
        }
    }

    pub fn set_padding(&mut self, padding: Padding) {
        for t in &mut self.trans {
            t.mbconv.padding = padding;
        }
        for block in self.stages.iter_mut().flatten() {
            block.first.padding = padding;
            block.second.padding = padding;
        }
        self.merge_mbconv.padding = padding;
    }

    pub fn padding(&self) -> Padding {
        self.merge_mbconv.padding
    }
}

impl Parameterized for StemParams {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor)) {
        f(&join(prefix, "entry_w"), &self.entry_w);
        f(&join(prefix, "entry_b"), &self.entry_b);
        for (i, t) in self.trans.iter().enumerate() {
            t.visit(&join(prefix, &format!("trans{i}")), f);
        }
        for (i, stage) in self.stages.iter().enumerate() {
            for (j, b) in stage.iter().enumerate() {
                b.visit(&join(prefix, &format!("stage{}.block{j}", i + 1)), f);
            }
        }
        f(&join(prefix, "merge_w"), &self.merge_w);
        f(&join(prefix, "merge_b"), &self.merge_b);
        self.merge_mbconv.visit(&join(prefix, "merge_mbconv"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        f(&join(prefix, "entry_w"), &mut self.entry_w);
        f(&join(prefix, "entry_b"), &mut self.entry_b);
        for (i, t) in self.trans.iter_mut().enumerate() {
            t.visit_mut(&join(prefix, &format!("trans{i}")), f);
        }
        for (i, stage) in self.stages.iter_mut().enumerate() {
            for (j, b) in stage.iter_mut().enumerate() {
                b.visit_mut(&join(prefix, &format!("stage{}.block{j}", i + 1)), f);
            }
        }
        f(&join(prefix, "merge_w"), &mut self.merge_w);
        f(&join(prefix, "merge_b"), &mut self.merge_b);
        self.merge_mbconv.visit_mut(&join(prefix, "merge_mbconv"), f);
    }
}

/// Intermediate maps of the downsampling chain, mostly for inspection.
#[derive(Debug, Clone)]
pub struct StemTrace {
    pub half: FeatureMap,
    pub quarter: FeatureMap,
    pub eighth_pre_merge: FeatureMap,
    pub sixteenth: FeatureMap,
    pub pyramid: PyramidFeatures,
}

pub fn stem_forward(image: &FeatureMap, p: &StemParams) -> Result<PyramidFeatures> {
    stem_trace(image, p).map(|t| t.pyramid)
}

pub fn stem_trace(image: &FeatureMap, p: &StemParams) -> Result<StemTrace> {
    let (h, w, c) = image.extents();
    if c != 1 {
        return Err(dim_err(format!("stem expects a single-channel image, got {c} channels")));
    }
    if h % 16 != 0 || w % 16 != 0 {
        return Err(Error::Partition { h, w, s: 16 });
    }
    let entry = image.tensor.conv2d(&p.entry_w, &p.entry_b, Conv2dSpec::dense(1, p.padding()))?.silu();
    let mut x = image.with_tensor(entry)?;
    let mut levels = Vec::with_capacity(4);
    for (i, trans) in p.trans.iter().enumerate() {
        x = trans_block(&x, trans)?;
        if let Some(stage) = p.stages.get(i) {
            for block in stage {
                x = mb_block(&x, block)?;
            }
        }
        levels.push(x.clone());
    }
    let [half, quarter, eighth, sixteenth]: [FeatureMap; 4] = levels.try_into().expect("four levels");

    let up = upsample_nearest2(&sixteenth)?;
    let projected = pointwise(&up.tensor, &p.merge_w, &p.merge_b)?;
    let merged = eighth.with_tensor(eighth.tensor.add(&projected)?)?;
    let refined = merged.tensor.add(&mbconv(&merged, &p.merge_mbconv)?.tensor)?;
    let f_eighth = merged.with_tensor(refined)?;

    Ok(StemTrace {
        pyramid: PyramidFeatures { f_half: half.clone(), f_eighth },
        half,
        quarter,
        eighth_pre_merge: eighth,
        sixteenth,
    })
}
