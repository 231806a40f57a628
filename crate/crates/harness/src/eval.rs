//! Match quality against a known warp.

use serde::Serialize;
use winmatch_core::config::PipelineConfig;
use winmatch_core::feature_map::cell_center;
use winmatch_core::matcher::{match_pipeline, CoarseMatch, FineMatch, MatchSet, ModelParams};

use crate::error::{HarnessError, Result};
use crate::homography::{corner_error, estimate_homography, Homography, RansacConfig};
use crate::synth::{gen_pair, PairSpec, SyntheticPair};

/// Stride of the coarse matching grid in pixels.
pub const COARSE_STRIDE: usize = 8;
/// A match is correct when it lands this close to the true position.
pub const PRECISION_PX: f64 = 3.0;
pub const CORNER_THRESHOLDS: [f64; 3] = [3.0, 5.0, 10.0];

fn dist(a: [f64; 2], b: [f64; 2]) -> f64 {
    (a[0] - b[0]).hypot(a[1] - b[1])
}

/// `(correct, total)` for coarse matches, comparing B's cell center with the
/// warped center of A's cell.
pub fn coarse_hits(matches: &[CoarseMatch], h_gt: &Homography, coarse_w: usize) -> (usize, usize) {
    let center = |cell: usize| cell_center(COARSE_STRIDE, cell / coarse_w, cell % coarse_w);
    let correct = matches.iter().filter(|m| dist(h_gt.apply(center(m.i)), center(m.j)) <= PRECISION_PX).count();
    (correct, matches.len())
}

pub fn fine_hits(matches: &[FineMatch], h_gt: &Homography) -> (usize, usize) {
    let correct = matches.iter().filter(|m| dist(h_gt.apply(m.point_a), m.point_b) <= PRECISION_PX).count();
    (correct, matches.len())
}

fn fraction((correct, total): (usize, usize)) -> f64 {
    if total == 0 {
        0.0
    } else {
        correct as f64 / total as f64
    }
}

/// Pass fractions of the corner error at 3, 5 and 10 pixels.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize)]
pub struct CornerPass {
    pub px3: f64,
    pub px5: f64,
    pub px10: f64,
}

impl CornerPass {
    fn of(error: Option<f64>) -> Self {
        let pass = |t: f64| if error.is_some_and(|e| e <= t) { 1.0 } else { 0.0 };
        let [a, b, c] = CORNER_THRESHOLDS;
        Self { px3: pass(a), px5: pass(b), px10: pass(c) }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalReport {
    pub pair: PairSpec,
    /// Fine matches within 3 px of the true warp.
    pub precision: f64,
    pub coarse_precision: f64,
    /// No fine matches, so `precision` carries no information.
    pub empty: bool,
    pub num_matches: usize,
    pub num_coarse: usize,
    pub dropped: usize,
    pub inliers: usize,
    /// `None` when no homography could be estimated.
    pub corner_error: Option<f64>,
    pub corner_pass: CornerPass,
}

pub fn evaluate(pair: &SyntheticPair, matches: &MatchSet, h_est: Option<(&Homography, usize)>) -> EvalReport {
    let coarse_w = pair.spec.w / COARSE_STRIDE;
    let error = h_est.map(|(h, _)| corner_error(h, &pair.h_gt, pair.spec.h, pair.spec.w));
    EvalReport {
        pair: pair.spec,
        precision: fraction(fine_hits(&matches.fine, &pair.h_gt)),
        coarse_precision: fraction(coarse_hits(&matches.coarse, &pair.h_gt, coarse_w)),
        empty: matches.fine.is_empty(),
        num_matches: matches.fine.len(),
        num_coarse: matches.coarse.len(),
        dropped: matches.dropped,
        inliers: h_est.map_or(0, |(_, n)| n),
        corner_error: error,
        corner_pass: CornerPass::of(error),
    }
}

/// Aggregate over pairs, in pair order.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalSummary {
    pub pairs: usize,
    pub mean_precision: f64,
    /// Correct coarse matches over all coarse matches, pooled across pairs.
    pub pooled_coarse_precision: f64,
    pub corner_pass: CornerPass,
}

pub fn summarize(reports: &[EvalReport]) -> EvalSummary {
    let n = reports.len().max(1) as f64;
    let mean = |f: &dyn Fn(&EvalReport) -> f64| reports.iter().map(f).sum::<f64>() / n;
    let correct: f64 = reports.iter().map(|r| r.coarse_precision * r.num_coarse as f64).sum();
    let total: usize = reports.iter().map(|r| r.num_coarse).sum();
    EvalSummary {
        pairs: reports.len(),
        mean_precision: mean(&|r| r.precision),
        pooled_coarse_precision: if total == 0 { 0.0 } else { correct / total as f64 },
        corner_pass: CornerPass {
            px3: mean(&|r| r.corner_pass.px3),
            px5: mean(&|r| r.corner_pass.px5),
            px10: mean(&|r| r.corner_pass.px10),
        },
    }
}

/// Generates, matches and scores one pair. Too few matches for a homography
/// is not an error: the corner error is then absent and every threshold fails.
pub fn evaluate_spec(
    spec: PairSpec,
    cfg: &PipelineConfig,
    params: &ModelParams,
    ransac: &RansacConfig,
) -> Result<(EvalReport, MatchSet)> {
    let pair = gen_pair(spec)?;
    let matches = match_pipeline(&pair.image_a.to_feature_map()?, &pair.image_b.to_feature_map()?, cfg, params)?;
    let est = match estimate_homography(&matches.fine, ransac) {
        Ok((h, mask)) => Some((h, mask.iter().filter(|&&m| m).count())),
        Err(HarnessError::InsufficientData(_)) | Err(HarnessError::Core(winmatch_core::Error::Degenerate(_))) => None,
        Err(e) => return Err(e),
    };
    let report = evaluate(&pair, &matches, est.as_ref().map(|(h, n)| (h, *n)));
    Ok((report, matches))
}

/// Scores every pair on its own thread; results come back in input order.
pub fn evaluate_specs(
    specs: &[PairSpec],
    cfg: &PipelineConfig,
    params: &ModelParams,
    ransac: &RansacConfig,
) -> Result<Vec<EvalReport>> {
    let workers = std::thread::available_parallelism().map_or(1, |n| n.get()).min(specs.len().max(1));
    let chunk = specs.len().div_ceil(workers).max(1);
    std::thread::scope(|scope| {
        let handles: Vec<_> = specs
            .chunks(chunk)
            .map(|part| {
                scope.spawn(move || {
                    part.iter()
                        .map(|&s| evaluate_spec(s, cfg, params, ransac).map(|(r, _)| r))
                        .collect::<Result<Vec<_>>>()
                })
            })
            .collect();
        let mut out = Vec::with_capacity(specs.len());
        for h in handles {
            out.extend(h.join().expect("evaluation worker panicked")?);
        }
        Ok(out)
    })
}
