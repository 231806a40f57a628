//! Training objective: window-assignment and patch-match negative
//! log-likelihoods plus a variance-weighted refinement error.

use serde::{Deserialize, Serialize};

use crate::attention::{select_top_k, window_average, window_partition, window_similarity, TopKIndex, WindowGrid};
use crate::config::PipelineConfig;
use crate::error::{param_err, Error, Result};
use crate::matcher::{refine_points, PairFeatures, StageSchedule};
use crate::tensor::Tensor;

/// Floor applied to the refinement variance before it divides the error.
pub const SIGMA2_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    pub window: f64,
    pub patch: f64,
    pub pixel: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { window: 1.0, patch: 1.0, pixel: 0.25 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let w = [self.window, self.patch, self.pixel];
        if w.iter().any(|v| !v.is_finite() || *v < 0.0) || w.iter().all(|&v| v == 0.0) {
            return Err(param_err(format!("loss weights must be nonnegative and not all zero, got {w:?}")));
        }
        Ok(())
    }
}

/// True correspondences on the coarse grid. `fine[k]` is the B-image pixel
/// that A's refinement anchor for `coarse[k]` maps to.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub coarse: Vec<(usize, usize)>,
    pub fine: Vec<[f64; 2]>,
}

impl GroundTruth {
    /// Window pair implied by each coarse pair.
    pub fn windows(&self, grid: &WindowGrid) -> Vec<(usize, usize)> {
        self.coarse.iter().map(|&(i, j)| (grid.window_of(i), grid.window_of(j))).collect()
    }

    /// Doubles every pair; the mean losses must not notice.
    pub fn repeated(&self) -> Self {
        Self {
            coarse: self.coarse.iter().chain(&self.coarse).copied().collect(),
            fine: self.fine.iter().chain(&self.fine).copied().collect(),
        }
    }
}

fn pick(t: &Tensor, i: usize) -> Result<Tensor> {
    t.reshape(&[t.numel(), 1])?.gather_rows(&[i])?.reshape(&[1])
}

fn check_pair(grid: &WindowGrid, (i, j): (usize, usize)) -> Result<()> {
    let cells = grid.h * grid.w;
    if i >= cells || j >= cells {
        return Err(param_err(format!("pair ({i}, {j}) outside a grid of {cells} cells")));
    }
    Ok(())
}

/// Probabilities of row `row`'s top-k windows, in top-k order, followed by
/// the mass of every other window (the "no window" bucket).
pub fn assignment_distribution(row: &[f64], top: &[usize]) -> Vec<f64> {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let z: f64 = row.iter().map(|v| (v - max).exp()).sum();
    let mut out: Vec<f64> = top.iter().map(|&k| (row[k] - max).exp() / z).collect();
    let rest: f64 = (0..row.len()).filter(|k| !top.contains(k)).map(|k| (row[k] - max).exp() / z).sum();
    out.push(rest);
    out
}

/// Log-probability that patch `i` of A is assigned to the window holding
/// patch `j` of B, or to the no-window bucket if that window is not among
/// `i`'s top-k. `sm` is the `n×n` window similarity.
pub fn window_assignment_logprob(
    sm: &Tensor,
    idx: &TopKIndex,
    grid: &WindowGrid,
    pair: (usize, usize),
) -> Result<Tensor> {
    check_pair(grid, pair)?;
    let (wi, wj) = (grid.window_of(pair.0), grid.window_of(pair.1));
    let n = grid.n();
    let row = sm.gather_rows(&[wi])?;
    if idx.position(wi, wj).is_some() {
        return pick(&row.log_softmax_rows(1.0)?, wj);
    }
    let excluded: Vec<usize> = (0..n).filter(|k| idx.position(wi, *k).is_none()).collect();
    let col = row.reshape(&[n, 1])?;
    col.gather_rows(&excluded)?.logsumexp().sub(&col.logsumexp())
}

/// Log of the dual-softmax confidence of `(i, j)` renormalized over the
/// patches of B-window `window`.
pub fn patch_match_logprob(log_p: &Tensor, grid: &WindowGrid, window: usize, pair: (usize, usize)) -> Result<Tensor> {
    check_pair(grid, pair)?;
    let (i, j) = pair;
    let candidates = grid.window_rows(window);
    let pos = candidates
        .iter()
        .position(|&c| c == j)
        .ok_or_else(|| Error::Contract(format!("patch {j} is not in window {window}")))?;
    let row = log_p.gather_rows(&[i])?;
    let cand = row.reshape(&[row.numel(), 1])?.gather_rows(&candidates)?;
    pick(&cand, pos)?.sub(&cand.logsumexp())
}

/// Mean negative log-likelihoods `(window, patch)` over the ground-truth pairs.
pub fn window_patch_loss(
    sm: &Tensor,
    idx: &TopKIndex,
    log_p: &Tensor,
    grid: &WindowGrid,
    gt: &GroundTruth,
) -> Result<(Tensor, Tensor)> {
    if gt.coarse.is_empty() {
        return Err(Error::Degenerate("no ground-truth pairs".into()));
    }
    let mut window_terms = Vec::with_capacity(gt.coarse.len());
    let mut patch_terms = Vec::with_capacity(gt.coarse.len());
    for &pair in &gt.coarse {
        window_terms.push(window_assignment_logprob(sm, idx, grid, pair)?);
        patch_terms.push(patch_match_logprob(log_p, grid, grid.window_of(pair.1), pair)?);
    }
    let scale = -1.0 / gt.coarse.len() as f64;
    let lw = Tensor::concat(&window_terms, 0)?.sum().scale(scale);
    let lpa = Tensor::concat(&patch_terms, 0)?.sum().scale(scale);
    Ok((lw, lpa))
}

#[derive(Debug, Clone)]
pub struct PixelLoss {
    pub value: Tensor,
    /// Nothing to refine; the value is zero.
    pub empty: bool,
}

/// `mean ‖pred − gt‖² / max(σ², floor)` with `σ²` held constant.
pub fn pixel_loss(pred: Option<&Tensor>, gt: &[[f64; 2]], sigma2: &[f64]) -> Result<PixelLoss> {
    let Some(pred) = pred else {
        return Ok(PixelLoss { value: Tensor::scalar(0.0), empty: true });
    };
    let n = pred.shape()[0];
    if pred.shape() != [n, 2] || gt.len() != n || sigma2.len() != n {
        return Err(param_err(format!(
            "pixel loss: {:?} predictions, {} targets, {} variances",
            pred.shape(),
            gt.len(),
            sigma2.len()
        )));
    }
    let target = Tensor::new(&[n, 2], gt.iter().flatten().copied().collect())?;
    let weights = Tensor::new(&[n, 2], sigma2.iter().flat_map(|s| [1.0 / s.max(SIGMA2_FLOOR); 2]).collect())?;
    let diff = pred.sub(&target)?;
    let value = diff.mul(&diff)?.mul(&weights)?.sum().scale(1.0 / n as f64);
    Ok(PixelLoss { value, empty: false })
}

pub fn total_loss(window: &Tensor, patch: &Tensor, pixel: &Tensor, w: &LossWeights) -> Result<Tensor> {
    window.scale(w.window).add(&patch.scale(w.patch))?.add(&pixel.scale(w.pixel))
}

#[derive(Debug, Clone)]
pub struct LossBreakdown {
    pub window: Tensor,
    pub patch: Tensor,
    pub pixel: Tensor,
    pub total: Tensor,
    pub pixel_empty: bool,
    /// Refinement variances used as pixel-loss weights.
    pub sigma2: Vec<f64>,
}

impl LossBreakdown {
    pub fn values(&self) -> [f64; 4] {
        [self.window.item(), self.patch.item(), self.pixel.item(), self.total.item()]
    }
}

/// The full objective for one image pair: window similarity and top-k are
/// taken at the last stage's window grid over the encoded descriptors, and
/// refinement runs on the ground-truth pairs.
pub fn pair_loss(features: &PairFeatures, gt: &GroundTruth, cfg: &PipelineConfig) -> Result<LossBreakdown> {
    pair_loss_with_weights(features, gt, cfg, None)
}

/// [`pair_loss`] with the pixel-loss variances supplied by the caller, so
/// that a finite-difference probe sees them as constants too.
pub fn pair_loss_with_weights(
    features: &PairFeatures,
    gt: &GroundTruth,
    cfg: &PipelineConfig,
    sigma2: Option<&[f64]>,
) -> Result<LossBreakdown> {
    let (h, w) = (features.coarse_a.h(), features.coarse_a.w());
    let contexts = StageSchedule::from_config(cfg)?.contexts(h, w)?;
    let ctx = contexts.last().expect("schedule is nonempty");
    let sa = window_average(&window_partition(&features.coarse_a.tensor, ctx.s())?)?;
    let sb = window_average(&window_partition(&features.coarse_b.tensor, ctx.s())?)?;
    let sm = window_similarity(&sa, &sb)?;
    let idx = select_top_k(&sm, ctx.top_k)?;
    let (window, patch) = window_patch_loss(&sm.scores, &idx, &features.confidence.log_p, &ctx.grid, gt)?;

    let refined = refine_points(&gt.coarse, &features.fine_a, &features.fine_b, &features.refine_spec(cfg))?;
    let targets: Vec<[f64; 2]> = refined.kept.iter().map(|&k| gt.fine[k]).collect();
    let sigma2 = sigma2.map_or_else(|| refined.sigma2.clone(), <[f64]>::to_vec);
    let pixel = pixel_loss(refined.points_b.as_ref(), &targets, &sigma2)?;
    let total = total_loss(&window, &patch, &pixel.value, &cfg.loss_weights)?;
    Ok(LossBreakdown { window, patch, pixel: pixel.value, total, pixel_empty: pixel.empty, sigma2 })
}
