//! Self-check suites shared by the `oracle` and `gradcheck` subcommands.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use winmatch_core::attention::{attention_block, project_qkv, top_k_window_attention, AttentionParams, WindowContext};
use winmatch_core::config::PipelineConfig;
use winmatch_core::loss::{pair_loss, pair_loss_with_weights};
use winmatch_core::matcher::{pair_features, ModelParams};
use winmatch_core::param::Init;
use winmatch_core::reference::{self, Linear, Problem};
use winmatch_core::stem::{stem_forward, StemParams};
use winmatch_core::tensor::{grad_check_sampled, GradReport};
use winmatch_core::{no_grad, FeatureMap, Parameterized, Result as CoreResult, Tensor};

use crate::error::Result;
use crate::synth::{PairKind, PairSpec};
use crate::train::make_sample;

/// Finite-difference step of the gradient suite.
pub const GRAD_STEP: f64 = 1e-5;
/// Largest acceptable relative error of the gradient suite.
pub const GRAD_TOLERANCE: f64 = 1e-4;
/// Largest acceptable deviation from the plain-loop transcription.
pub const ORACLE_TOLERANCE: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OracleReport {
    pub instances: usize,
    /// `(h, w, c, s, top_k)` configurations compared.
    pub configurations: usize,
    pub max_abs_diff: f64,
    pub passed: bool,
}

fn random_vec(n: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
}

/// Random attention instances with `h, w ≤ 8` and `c ≤ 4`, each compared at
/// every valid window side and top-k.
pub fn oracle_suite(seed: u64, instances: usize) -> Result<OracleReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut max_abs_diff: f64 = 0.0;
    let mut configurations = 0;
    for _ in 0..instances {
        let (h, w, c) = (rng.random_range(1..=8), rng.random_range(1..=8), rng.random_range(1..=4));
        let x1 = random_vec(h * w * c, &mut rng);
        let x2 = random_vec(h * w * c, &mut rng);
        let mut p = AttentionParams::identity(c);
        for t in [&mut p.wq, &mut p.wk, &mut p.wv] {
            *t = Tensor::new(&[c, c], random_vec(c * c, &mut rng))?;
        }
        for t in [&mut p.bq, &mut p.bk, &mut p.bv] {
            *t = Tensor::new(&[c], random_vec(c, &mut rng))?;
        }
        let temperature = rng.random_range(0.5..2.0);
        let fa = FeatureMap::new(Tensor::new(&[h, w, c], x1.clone())?, 8)?;
        let fb = FeatureMap::new(Tensor::new(&[h, w, c], x2.clone())?, 8)?;
        for s in (1..=h.min(w)).filter(|s| h % s == 0 && w % s == 0) {
            let n = (h / s) * (w / s);
            for top_k in 1..=n {
                let ctx = WindowContext::new(h, w, s, top_k)?;
                let fast = no_grad(|| top_k_window_attention(&fa, &fb, &ctx, &p, temperature))?;
                let slow = reference::window_attention(&Problem {
                    x1: &x1,
                    x2: &x2,
                    h,
                    w,
                    c,
                    q: Linear { weight: p.wq.data(), bias: p.bq.data() },
                    k: Linear { weight: p.wk.data(), bias: p.bk.data() },
                    v: Linear { weight: p.wv.data(), bias: p.bv.data() },
                    s,
                    top_k,
                    temperature,
                });
                for (a, b) in fast.data().iter().zip(&slow) {
                    max_abs_diff = max_abs_diff.max((a - b).abs());
                }
                configurations += 1;
            }
        }
    }
    Ok(OracleReport { instances, configurations, max_abs_diff, passed: max_abs_diff < ORACLE_TOLERANCE })
}

/// Checks every parameter tensor of `params` for the scalar function `f`.
fn check_params<P, F>(label: &str, params: &P, f: F, max_probes: usize) -> CoreResult<Vec<GradReport>>
where
    P: Parameterized + Clone,
    F: Fn(&P) -> CoreResult<Tensor>,
{
    params
        .named_params()
        .into_iter()
        .map(|(name, value)| {
            let probe = |t: &Tensor| {
                let mut q = params.clone();
                q.set_param(&name, t.clone());
                f(&q)
            };
            grad_check_sampled(&format!("{label}.{name}"), probe, &value, GRAD_STEP, max_probes)
        })
        .collect()
}

fn map(h: usize, w: usize, c: usize, rng: &mut ChaCha8Rng) -> CoreResult<FeatureMap> {
    FeatureMap::new(Tensor::new(&[h, w, c], random_vec(h * w * c, rng))?, 8)
}

/// Fixed random weighting so the checked scalar depends on every output.
fn weighted_sum(t: &Tensor, rng_seed: u64) -> CoreResult<Tensor> {
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let w = Tensor::new(t.shape(), random_vec(t.numel(), &mut rng))?;
    Ok(t.mul(&w)?.sum())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradientSuite {
    pub reports: Vec<GradReport>,
    pub max_rel_error: f64,
    pub passed: bool,
}

/// Central-difference checks on 16×16 inputs for the projections, window
/// attention, the attention block, the stem and the total loss.
pub fn gradient_suite(seed: u64, max_probes: usize) -> Result<GradientSuite> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut reports = Vec::new();
    let c = 3;
    let x1 = map(16, 16, c, &mut rng)?;
    let x2 = map(16, 16, c, &mut rng)?;
    let block = AttentionParams::init(&mut Init::new(seed), c);
    let ctx = WindowContext::new(16, 16, 4, 3)?;

    // projections
    let proj = |p: &AttentionParams| -> CoreResult<Tensor> {
        let (q, k, v) = project_qkv(&x1, &x2, p)?;
        weighted_sum(&q, 1)?.add(&weighted_sum(&k, 2)?)?.add(&weighted_sum(&v, 3)?)
    };
    let mut proj_params = block.clone();
    proj_params.mbconv = winmatch_core::stem::MbConvParams::zeros(c, c, 1);
    for (name, value) in proj_params.named_params() {
        if ["wq", "bq", "wk", "bk", "wv", "bv"].contains(&name.as_str()) {
            let probe = |t: &Tensor| {
                let mut q = proj_params.clone();
                q.set_param(&name, t.clone());
                proj(&q)
            };
            reports.push(grad_check_sampled(&format!("projection.{name}"), probe, &value, GRAD_STEP, max_probes)?);
        }
    }

    // window attention, with respect to both inputs and the projections
    let attend = |a: &FeatureMap, b: &FeatureMap, p: &AttentionParams| -> CoreResult<Tensor> {
        weighted_sum(&top_k_window_attention(a, b, &ctx, p, 1.0)?, 4)
    };
    reports.push(grad_check_sampled(
        "window_attention.x1",
        |t| attend(&x1.with_tensor(t.clone())?, &x2, &block),
        &x1.tensor,
        GRAD_STEP,
        max_probes,
    )?);
    reports.push(grad_check_sampled(
        "window_attention.x2",
        |t| attend(&x1, &x2.with_tensor(t.clone())?, &block),
        &x2.tensor,
        GRAD_STEP,
        max_probes,
    )?);

    // attention block, every parameter group
    reports.extend(check_params(
        "attention_block",
        &block,
        |p| weighted_sum(&attention_block(&x1, &x2, &ctx, p, 1.0)?.tensor, 5),
        max_probes,
    )?);

    // stem
    let image = FeatureMap::from_gray(16, 16, (0..256).map(|_| rng.random_range(0.0..1.0)).collect())?;
    let stem = StemParams::init(seed, [2, 3, 4, 4]);
    reports.extend(check_params(
        "stem",
        &stem,
        |p| {
            let pyr = stem_forward(&image, p)?;
            weighted_sum(&pyr.f_eighth.tensor, 6)?.add(&weighted_sum(&pyr.f_half.tensor, 7)?)
        },
        max_probes,
    )?);

    // total loss on a 16×16 training pair
    let cfg = PipelineConfig { channels: [2, 3, 4, 4], seed, ..PipelineConfig::tiny() };
    let model = ModelParams::init(&cfg);
    let sample =
        make_sample(PairSpec { kind: PairKind::Translate, h: 16, w: 16, magnitude: 1.5, noise_sigma: 0.01, seed })?;
    let (a, b) = (sample.pair.image_a.to_feature_map()?, sample.pair.image_b.to_feature_map()?);
    let sigma2 = no_grad(|| pair_loss(&pair_features(&a, &b, &cfg, &model)?, &sample.gt, &cfg))?.sigma2;
    reports.extend(check_params(
        "total_loss",
        &model,
        |p| Ok(pair_loss_with_weights(&pair_features(&a, &b, &cfg, p)?, &sample.gt, &cfg, Some(&sigma2))?.total),
        max_probes,
    )?);

    let max_rel_error = reports.iter().map(|r| r.max_rel_error).fold(0.0, f64::max);
    Ok(GradientSuite { reports, max_rel_error, passed: max_rel_error < GRAD_TOLERANCE })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn small_oracle_run_passes() {
        let r = oracle_suite(3, 4).unwrap();
        assert!(r.passed, "{r:?}");
        assert!(r.configurations >= 4);
    }
}
