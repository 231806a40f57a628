//! Coarse-to-fine matching: staged window attention over both images,
//! dual-softmax patch confidences, mutual nearest neighbours and
//! correlation-based sub-cell refinement on the 1/2 map.

use serde::Serialize;

use crate::attention::{attention_block, AttentionParams, WindowContext};
use crate::config::{FeatureMode, PipelineConfig, TopkSchedule};
use crate::error::{dim_err, param_err, Error, Result};
use crate::feature_map::{cell_center, FeatureMap};
use crate::param::{join, Init, Parameterized};
use crate::stem::{stem_forward, StemParams};
use crate::tensor::{no_grad, Tensor};

/// One row of the interaction schedule.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct Stage {
    pub index: usize,
    pub windows: usize,
    pub top_k: usize,
}

impl Stage {
    /// Windows per side of the square window grid.
    pub fn grid_side(&self) -> usize {
        1 << self.index
    }

    /// Window side in patches for a square patch grid of side `patch_side`.
    pub fn window_side(&self, patch_side: usize) -> Option<usize> {
        let g = self.grid_side();
        (patch_side.is_multiple_of(g) && patch_side >= g).then_some(patch_side / g)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct StageSchedule {
    pub stages: Vec<Stage>,
}

/// Stage `m` uses `4^m` windows and attends to the top `2^m` of them.
pub fn interaction_schedule(num_stages: usize) -> Result<StageSchedule> {
    if num_stages == 0 {
        return Err(param_err("interaction schedule needs at least one stage"));
    }
    if num_stages > 16 {
        return Err(param_err(format!("{num_stages} stages would overflow the window count")));
    }
    let stages = (0..num_stages).map(|m| Stage { index: m, windows: 1 << (2 * m), top_k: 1 << m }).collect();
    Ok(StageSchedule { stages })
}

impl StageSchedule {
    pub fn with_topk(mut self, schedule: TopkSchedule) -> Self {
        if let TopkSchedule::Fixed(k) = schedule {
            for s in &mut self.stages {
                s.top_k = k.min(s.windows);
            }
        }
        self
    }

    pub fn from_config(cfg: &PipelineConfig) -> Result<Self> {
        Ok(interaction_schedule(cfg.stages)?.with_topk(cfg.topk_schedule))
    }

    pub fn last(&self) -> Stage {
        *self.stages.last().expect("schedule is nonempty")
    }

    /// Window contexts for an `h×w` patch grid, one per stage.
    pub fn contexts(&self, h: usize, w: usize) -> Result<Vec<WindowContext>> {
        if h != w {
            return Err(dim_err(format!("staged windows need a square patch grid, got {h}x{w}")));
        }
        self.stages
            .iter()
            .map(|stage| {
                let s = stage.window_side(h).ok_or(Error::Partition { h, w, s: stage.grid_side() })?;
                WindowContext::new(h, w, s, stage.top_k)
            })
            .collect()
    }
}

/// Self and cross attention blocks for one stage. The cross block is shared
/// by both directions.
#[derive(Debug, Clone)]
pub struct StageParams {
    pub self_block: AttentionParams,
    pub cross_block: AttentionParams,
}

#[derive(Debug, Clone)]
pub struct EncoderParams {
    pub stages: Vec<StageParams>,
}

impl EncoderParams {
    pub fn init(seed: u64, c: usize, num_stages: usize) -> Self {
        let mut init = Init::new(seed);
        let stages = (0..num_stages)
            .map(|_| StageParams {
                self_block: AttentionParams::init(&mut init, c),
                cross_block: AttentionParams::init(&mut init, c),
            })
            .collect();
        Self { stages }
    }

    pub fn identity(c: usize, num_stages: usize) -> Self {
        let stages = (0..num_stages)
            .map(|_| StageParams {
                self_block: AttentionParams::identity(c),
                cross_block: AttentionParams::identity(c),
            })
            .collect();
        Self { stages }
    }
}

impl Parameterized for EncoderParams {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor)) {
        for (i, s) in self.stages.iter().enumerate() {
            s.self_block.visit(&join(prefix, &format!("stage{i}.self")), f);
            s.cross_block.visit(&join(prefix, &format!("stage{i}.cross")), f);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        for (i, s) in self.stages.iter_mut().enumerate() {
            s.self_block.visit_mut(&join(prefix, &format!("stage{i}.self")), f);
            s.cross_block.visit_mut(&join(prefix, &format!("stage{i}.cross")), f);
        }
    }
}

/// Interleaved self/cross attention over the 1/8 maps of both images.
pub fn encode(
    fa: &FeatureMap,
    fb: &FeatureMap,
    schedule: &StageSchedule,
    params: &EncoderParams,
    temperature: f64,
) -> Result<(FeatureMap, FeatureMap)> {
    if fa.extents() != fb.extents() {
        return Err(dim_err(format!("encoder inputs differ: {:?} vs {:?}", fa.extents(), fb.extents())));
    }
    if params.stages.len() < schedule.stages.len() {
        return Err(param_err(format!(
            "schedule has {} stages but the encoder only {}",
            schedule.stages.len(),
            params.stages.len()
        )));
    }
    let contexts = schedule.contexts(fa.h(), fa.w())?;
    let (mut a, mut b) = (fa.clone(), fb.clone());
    for (ctx, p) in contexts.iter().zip(&params.stages) {
        let a1 = attention_block(&a, &a, ctx, &p.self_block, temperature)?;
        let b1 = attention_block(&b, &b, ctx, &p.self_block, temperature)?;
        a = attention_block(&a1, &b1, ctx, &p.cross_block, temperature)?;
        b = attention_block(&b1, &a1, ctx, &p.cross_block, temperature)?;
    }
    Ok((a, b))
}

/// Dual-softmax match probabilities between the cells of two maps.
#[derive(Debug, Clone)]
pub struct ConfidenceMatrix {
    /// `N_a×N_b` raw dot products.
    pub scores: Tensor,
    /// `log softmax_rows(S/τ) + log softmax_cols(S/τ)`
    pub log_p: Tensor,
    pub p: Tensor,
}

impl ConfidenceMatrix {
    pub fn rows(&self) -> usize {
        self.p.shape()[0]
    }

    pub fn cols(&self) -> usize {
        self.p.shape()[1]
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.p.data()[i * self.cols() + j]
    }
}

pub fn patch_confidence(ga: &FeatureMap, gb: &FeatureMap, temperature: f64) -> Result<ConfidenceMatrix> {
    if ga.c() != gb.c() {
        return Err(dim_err(format!("descriptor widths differ: {} vs {}", ga.c(), gb.c())));
    }
    let scores = ga.flat()?.matmul(&gb.flat()?.transpose()?)?;
    let by_row = scores.log_softmax_rows(temperature)?;
    let by_col = scores.transpose()?.log_softmax_rows(temperature)?.transpose()?;
    let log_p = by_row.add(&by_col)?;
    let p = log_p.exp();
    Ok(ConfidenceMatrix { scores, log_p, p })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CoarseMatch {
    pub i: usize,
    pub j: usize,
    pub confidence: f64,
}

/// First index of the maximum, so ties go to the smaller index.
fn argmax(values: impl Iterator<Item = f64>) -> usize {
    let mut best = (0, f64::NEG_INFINITY);
    for (i, v) in values.enumerate() {
        if v > best.1 {
            best = (i, v);
        }
    }
    best.0
}

/// Pairs that are each other's best match with confidence at least `threshold`.
pub fn mutual_nn_select(p: &ConfidenceMatrix, threshold: f64) -> Vec<CoarseMatch> {
    mutual_nn_select_raw(p.p.data(), p.rows(), p.cols(), threshold)
}

/// [`mutual_nn_select`] on a row-major `rows×cols` slice.
pub fn mutual_nn_select_raw(p: &[f64], rows: usize, cols: usize, threshold: f64) -> Vec<CoarseMatch> {
    let col_best: Vec<usize> = (0..cols).map(|j| argmax((0..rows).map(|i| p[i * cols + j]))).collect();
    (0..rows)
        .filter_map(|i| {
            let j = argmax(p[i * cols..(i + 1) * cols].iter().copied());
            let confidence = p[i * cols + j];
            (col_best[j] == i && confidence >= threshold).then_some(CoarseMatch { i, j, confidence })
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct FineMatch {
    pub i: usize,
    pub j: usize,
    /// `[x, y]` in input pixels.
    pub point_a: [f64; 2],
    pub point_b: [f64; 2],
    pub confidence: f64,
    /// Spread of the refinement heatmap in squared pixels.
    pub sigma2: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct MatchSet {
    pub coarse: Vec<CoarseMatch>,
    pub fine: Vec<FineMatch>,
    /// Coarse matches too close to the border to refine.
    pub dropped: usize,
}

/// Where the coarse grid sits relative to the fine maps.
#[derive(Debug, Clone, Copy)]
pub struct RefineSpec {
    /// Coarse grid width, to turn flat cell indices into rows and columns.
    pub coarse_w: usize,
    pub coarse_stride: usize,
    /// Odd window side on the fine map.
    pub window: usize,
    pub temperature: f64,
}

/// Differentiable refinement result; row `r` of `points_b` belongs to
/// `pairs[kept[r]]`.
#[derive(Debug, Clone)]
pub struct RefinedPoints {
    /// `kept.len()×2`, `[x, y]` pixels. `None` when nothing survived.
    pub points_b: Option<Tensor>,
    pub points_a: Vec<[f64; 2]>,
    pub sigma2: Vec<f64>,
    pub kept: Vec<usize>,
    pub heatmaps: Vec<Vec<f64>>,
}

/// Fine cell `(row, col)` anchoring the refinement of coarse cell
/// `coarse_cell` on a grid `coarse_w` cells wide.
pub fn refine_anchor(
    coarse_cell: usize,
    coarse_w: usize,
    coarse_stride: usize,
    fine_stride: usize,
) -> Result<(usize, usize)> {
    if fine_stride == 0 || !coarse_stride.is_multiple_of(fine_stride) || coarse_stride < fine_stride {
        return Err(param_err(format!("coarse stride {coarse_stride} is not a multiple of fine stride {fine_stride}")));
    }
    let ratio = coarse_stride / fine_stride;
    let (r, c) = (coarse_cell / coarse_w, coarse_cell % coarse_w);
    Ok((ratio * r + ratio / 2, ratio * c + ratio / 2))
}

fn fine_center(coarse_cell: usize, spec: &RefineSpec, fine_stride: usize) -> Result<(usize, usize)> {
    refine_anchor(coarse_cell, spec.coarse_w, spec.coarse_stride, fine_stride)
}

fn window_fits(center: (usize, usize), radius: usize, h: usize, w: usize) -> bool {
    center.0 >= radius && center.1 >= radius && center.0 + radius < h && center.1 + radius < w
}

/// `[dx, dy]` of every cell of a `(2r+1)²` window, row-major.
fn offset_table(radius: usize) -> Vec<[f64; 2]> {
    let r = radius as i64;
    (-r..=r).flat_map(|dy| (-r..=r).map(move |dx| [dx as f64, dy as f64])).collect()
}

/// Mean offset and covariance trace (in cells) of a heatmap over the window.
pub fn heatmap_moments(heatmap: &[f64], radius: usize) -> ([f64; 2], f64) {
    let table = offset_table(radius);
    let mut mean = [0.0; 2];
    for (h, o) in heatmap.iter().zip(&table) {
        mean[0] += h * o[0];
        mean[1] += h * o[1];
    }
    let mut trace = 0.0;
    for (h, o) in heatmap.iter().zip(&table) {
        trace += h * ((o[0] - mean[0]).powi(2) + (o[1] - mean[1]).powi(2));
    }
    (mean, trace)
}

pub fn refine_points(
    pairs: &[(usize, usize)],
    fine_a: &FeatureMap,
    fine_b: &FeatureMap,
    spec: &RefineSpec,
) -> Result<RefinedPoints> {
    if spec.window.is_multiple_of(2) {
        return Err(param_err(format!("refinement window must be odd, got {}", spec.window)));
    }
    if fine_a.c() != fine_b.c() || fine_a.stride != fine_b.stride {
        return Err(dim_err("fine maps must share width and stride"));
    }
    let radius = spec.window / 2;
    let stride = fine_a.stride;
    let c = fine_a.c();
    let flat_a = fine_a.flat()?;
    let flat_b = fine_b.flat()?;
    let table = offset_table(radius);
    let offsets = Tensor::new(&[table.len(), 2], table.iter().flatten().copied().collect())?;

    let mut out = RefinedPoints { points_b: None, points_a: vec![], sigma2: vec![], kept: vec![], heatmaps: vec![] };
    let mut rows = Vec::new();
    for (k, &(i, j)) in pairs.iter().enumerate() {
        let ca = fine_center(i, spec, stride)?;
        let cb = fine_center(j, spec, stride)?;
        if !window_fits(ca, radius, fine_a.h(), fine_a.w()) || !window_fits(cb, radius, fine_b.h(), fine_b.w()) {
            continue;
        }
        let query = flat_a.gather_rows(&[ca.0 * fine_a.w() + ca.1])?;
        let cells: Vec<usize> =
            table.iter().map(|o| (cb.0 as f64 + o[1]) as usize * fine_b.w() + (cb.1 as f64 + o[0]) as usize).collect();
        let window = flat_b.gather_rows(&cells)?;
        let heatmap =
            query.matmul(&window.transpose()?)?.scale(1.0 / (c as f64).sqrt()).softmax_rows(spec.temperature)?;
        let expected = heatmap.matmul(&offsets)?;
        let base = cell_center(stride, cb.0, cb.1);
        let base = Tensor::new(&[1, 2], vec![base[0], base[1]])?;
        rows.push(expected.scale(stride as f64).add(&base)?);

        let (_, trace) = heatmap_moments(heatmap.data(), radius);
        out.sigma2.push(trace * (stride * stride) as f64);
        out.points_a.push(cell_center(stride, ca.0, ca.1));
        out.heatmaps.push(heatmap.to_vec());
        out.kept.push(k);
    }
    if !rows.is_empty() {
        out.points_b = Some(Tensor::concat(&rows, 0)?);
    }
    Ok(out)
}

/// Refines coarse matches to sub-cell positions on the fine maps. Matches
/// whose window would leave either map are dropped and counted.
pub fn pixel_refine(
    coarse: &[CoarseMatch],
    fine_a: &FeatureMap,
    fine_b: &FeatureMap,
    spec: &RefineSpec,
) -> Result<(Vec<FineMatch>, usize)> {
    let pairs: Vec<(usize, usize)> = coarse.iter().map(|m| (m.i, m.j)).collect();
    let refined = no_grad(|| refine_points(&pairs, fine_a, fine_b, spec))?;
    let points = refined.points_b.as_ref().map(|t| t.to_vec()).unwrap_or_default();
    let fine = refined
        .kept
        .iter()
        .enumerate()
        .map(|(r, &k)| FineMatch {
            i: coarse[k].i,
            j: coarse[k].j,
            point_a: refined.points_a[r],
            point_b: [points[2 * r], points[2 * r + 1]],
            confidence: coarse[k].confidence,
            sigma2: refined.sigma2[r],
        })
        .collect();
    Ok((fine, coarse.len() - refined.kept.len()))
}

/// Mean-subtracted, unit-norm `patch×patch` intensity blocks of a grayscale
/// image, one per cell of a grid with stride `patch`.
pub fn handcrafted_features(image: &FeatureMap, patch: usize) -> Result<FeatureMap> {
    let (h, w, c) = image.extents();
    if c != 1 {
        return Err(dim_err(format!("handcrafted features need a grayscale image, got {c} channels")));
    }
    if patch == 0 || h % patch != 0 || w % patch != 0 {
        return Err(Error::Partition { h, w, s: patch });
    }
    let px = image.tensor.data();
    let (gh, gw, d) = (h / patch, w / patch, patch * patch);
    let mut data = Vec::with_capacity(gh * gw * d);
    for gr in 0..gh {
        for gc in 0..gw {
            let mut v: Vec<f64> = (0..d).map(|k| px[(gr * patch + k / patch) * w + gc * patch + k % patch]).collect();
            let mean = v.iter().sum::<f64>() / d as f64;
            v.iter_mut().for_each(|x| *x -= mean);
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm > 1e-9 {
                v.iter_mut().for_each(|x| *x /= norm);
            }
            data.extend(v);
        }
    }
    FeatureMap::new(Tensor::new(&[gh, gw, d], data)?, image.stride * patch)
}

/// Stem plus encoder weights.
#[derive(Debug, Clone)]
pub struct ModelParams {
    pub stem: StemParams,
    pub encoder: EncoderParams,
}

impl ModelParams {
    pub fn init(cfg: &PipelineConfig) -> Self {
        let mut stem = StemParams::init(cfg.seed, cfg.channels);
        stem.set_padding(cfg.padding);
        let encoder = EncoderParams::init(cfg.seed.wrapping_add(1), cfg.channels[2], cfg.stages);
        Self { stem, encoder }
    }
}

impl Parameterized for ModelParams {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor)) {
        self.stem.visit(&join(prefix, "stem"), f);
        self.encoder.visit(&join(prefix, "encoder"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        self.stem.visit_mut(&join(prefix, "stem"), f);
        self.encoder.visit_mut(&join(prefix, "encoder"), f);
    }
}

/// Everything the matcher computes for one image pair before selection.
#[derive(Debug, Clone)]
pub struct PairFeatures {
    pub coarse_a: FeatureMap,
    pub coarse_b: FeatureMap,
    pub fine_a: FeatureMap,
    pub fine_b: FeatureMap,
    pub confidence: ConfidenceMatrix,
}

impl PairFeatures {
    pub fn refine_spec(&self, cfg: &PipelineConfig) -> RefineSpec {
        RefineSpec {
            coarse_w: self.coarse_a.w(),
            coarse_stride: self.coarse_a.stride,
            window: cfg.fine_window,
            temperature: cfg.refine_temperature,
        }
    }
}

/// Descriptor extraction, encoding and dual-softmax; records gradients when
/// the parameters require them.
pub fn pair_features(
    image_a: &FeatureMap,
    image_b: &FeatureMap,
    cfg: &PipelineConfig,
    params: &ModelParams,
) -> Result<PairFeatures> {
    if image_a.extents() != image_b.extents() {
        return Err(dim_err(format!("images differ: {:?} vs {:?}", image_a.extents(), image_b.extents())));
    }
    let (h, w, _) = image_a.extents();
    if h % 16 != 0 || w % 16 != 0 {
        return Err(Error::Partition { h, w, s: 16 });
    }
    let (coarse_a, coarse_b, fine_a, fine_b) = match cfg.features {
        FeatureMode::Handcrafted => (
            handcrafted_features(image_a, 8)?,
            handcrafted_features(image_b, 8)?,
            handcrafted_features(image_a, 2)?,
            handcrafted_features(image_b, 2)?,
        ),
        FeatureMode::Learned => {
            let pa = stem_forward(image_a, &params.stem)?;
            let pb = stem_forward(image_b, &params.stem)?;
            let schedule = StageSchedule::from_config(cfg)?;
            let (ga, gb) = encode(&pa.f_eighth, &pb.f_eighth, &schedule, &params.encoder, cfg.attention_temperature)?;
            (ga, gb, pa.f_half, pb.f_half)
        }
    };
    let confidence = patch_confidence(&coarse_a, &coarse_b, cfg.match_temperature)?;
    Ok(PairFeatures { coarse_a, coarse_b, fine_a, fine_b, confidence })
}

/// Full matcher on two same-size grayscale images.
pub fn match_pipeline(
    image_a: &FeatureMap,
    image_b: &FeatureMap,
    cfg: &PipelineConfig,
    params: &ModelParams,
) -> Result<MatchSet> {
    cfg.validate()?;
    no_grad(|| {
        let f = pair_features(image_a, image_b, cfg, params)?;
        if !f.confidence.p.all_finite() {
            return Err(Error::NonFinite("match confidences".into()));
        }
        let coarse = mutual_nn_select(&f.confidence, cfg.match_threshold);
        let (fine, dropped) = pixel_refine(&coarse, &f.fine_a, &f.fine_b, &f.refine_spec(cfg))?;
        Ok(MatchSet { coarse, fine, dropped })
    })
}
