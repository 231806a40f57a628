//! Tiny-scale training on synthetic pairs with Adam, plus checkpoints.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use winmatch_core::config::PipelineConfig;
use winmatch_core::feature_map::cell_center;
use winmatch_core::loss::{pair_loss, GroundTruth};
use winmatch_core::matcher::{match_pipeline, pair_features, refine_anchor, ModelParams};
use winmatch_core::{no_grad, Parameterized, Tensor};

use crate::error::{HarnessError, Result};
use crate::eval::{coarse_hits, COARSE_STRIDE};
use crate::homography::Homography;
use crate::image_io::write_file;
use crate::synth::{gen_pair, PairKind, PairSpec, SyntheticPair};

/// Stride of the refinement map in pixels.
pub const FINE_STRIDE: usize = 2;

/// Adam without weight decay or schedule.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: i32,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Self { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, step: 0, first: vec![], second: vec![] }
    }

    pub fn steps_taken(&self) -> i32 {
        self.step
    }

    /// Applies one update from the accumulated gradients and returns fresh
    /// leaves with cleared gradients.
    pub fn step(&mut self, params: &mut impl Parameterized) {
        self.step += 1;
        let (b1, b2) = (self.beta1, self.beta2);
        let c1 = 1.0 - b1.powi(self.step);
        let c2 = 1.0 - b2.powi(self.step);
        let mut k = 0;
        let (first, second) = (&mut self.first, &mut self.second);
        let (lr, eps) = (self.lr, self.eps);
        params.visit_mut("", &mut |_, t| {
            let n = t.numel();
            if first.len() <= k {
                first.push(vec![0.0; n]);
                second.push(vec![0.0; n]);
            }
            let grad = t.grad().unwrap_or_else(|| vec![0.0; n]);
            let (m, v) = (&mut first[k], &mut second[k]);
            let mut data = t.to_vec();
            for i in 0..n {
                m[i] = b1 * m[i] + (1.0 - b1) * grad[i];
                v[i] = b2 * v[i] + (1.0 - b2) * grad[i] * grad[i];
                data[i] -= lr * (m[i] / c1) / ((v[i] / c2).sqrt() + eps);
            }
            *t = Tensor::param(t.shape(), data).expect("same shape");
            k += 1;
        });
    }
}

/// Coarse cell pairs whose warped A center lands within half a cell of a B
/// center, with the warped refinement anchor of A as the fine target.
pub fn derive_ground_truth(h_gt: &Homography, h: usize, w: usize) -> Result<GroundTruth> {
    let (gh, gw) = (h / COARSE_STRIDE, w / COARSE_STRIDE);
    let half = COARSE_STRIDE as f64 / 2.0;
    let offset = (COARSE_STRIDE as f64 - 1.0) / 2.0;
    let mut gt = GroundTruth::default();
    for i in 0..gh * gw {
        let q = h_gt.apply(cell_center(COARSE_STRIDE, i / gw, i % gw));
        let col = ((q[0] - offset) / COARSE_STRIDE as f64).round();
        let row = ((q[1] - offset) / COARSE_STRIDE as f64).round();
        if !(col >= 0.0 && row >= 0.0 && (col as usize) < gw && (row as usize) < gh) {
            continue;
        }
        let (row, col) = (row as usize, col as usize);
        let c = cell_center(COARSE_STRIDE, row, col);
        if (q[0] - c[0]).abs() >= half || (q[1] - c[1]).abs() >= half {
            continue;
        }
        let anchor = refine_anchor(i, gw, COARSE_STRIDE, FINE_STRIDE)?;
        gt.coarse.push((i, row * gw + col));
        gt.fine.push(h_gt.apply(cell_center(FINE_STRIDE, anchor.0, anchor.1)));
    }
    Ok(gt)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainOptions {
    pub steps: usize,
    pub seed: u64,
    pub h: usize,
    pub w: usize,
    pub lr: f64,
    /// Largest horizontal shift of a training pair, in pixels.
    pub max_shift: f64,
    pub noise_sigma: f64,
    /// Fixed pairs on which the loss is measured before and after training.
    pub eval_pairs: usize,
}

impl Default for TrainOptions {
    fn default() -> Self {
        Self { steps: 300, seed: 0, h: 16, w: 16, lr: 1e-3, max_shift: 3.0, noise_sigma: 0.01, eval_pairs: 8 }
    }
}

/// Independent seeded pair streams for training, loss evaluation and
/// held-out matching.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Eval,
    Holdout,
}

pub fn pair_specs(opts: &TrainOptions, split: Split, count: usize) -> Vec<PairSpec> {
    let salt = match split {
        Split::Train => 0x7261_696e,
        Split::Eval => 0x6576_616c,
        Split::Holdout => 0x686f_6c64,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed ^ salt);
    (0..count)
        .map(|_| PairSpec {
            kind: PairKind::Translate,
            h: opts.h,
            w: opts.w,
            magnitude: rng.random_range(-opts.max_shift..=opts.max_shift),
            noise_sigma: opts.noise_sigma,
            seed: rng.random(),
        })
        .collect()
}

#[derive(Debug, Clone)]
pub struct Sample {
    pub pair: SyntheticPair,
    pub gt: GroundTruth,
}

pub fn make_sample(spec: PairSpec) -> Result<Sample> {
    let pair = gen_pair(spec)?;
    let gt = derive_ground_truth(&pair.h_gt, spec.h, spec.w)?;
    Ok(Sample { pair, gt })
}

/// Window, patch, pixel and total loss on one sample.
pub fn sample_loss(sample: &Sample, cfg: &PipelineConfig, params: &ModelParams) -> Result<[f64; 4]> {
    no_grad(|| {
        let a = sample.pair.image_a.to_feature_map()?;
        let b = sample.pair.image_b.to_feature_map()?;
        let f = pair_features(&a, &b, cfg, params)?;
        Ok(pair_loss(&f, &sample.gt, cfg)?.values())
    })
}

pub fn mean_loss(samples: &[Sample], cfg: &PipelineConfig, params: &ModelParams) -> Result<[f64; 4]> {
    let mut acc = [0.0; 4];
    for s in samples {
        let l = sample_loss(s, cfg, params)?;
        acc.iter_mut().zip(l).for_each(|(a, v)| *a += v);
    }
    Ok(acc.map(|v| v / samples.len().max(1) as f64))
}

/// Pooled coarse precision of the matcher over the given pairs.
pub fn coarse_precision(specs: &[PairSpec], cfg: &PipelineConfig, params: &ModelParams) -> Result<(usize, usize)> {
    let mut hits = (0, 0);
    for &spec in specs {
        let pair = gen_pair(spec)?;
        let m = match_pipeline(&pair.image_a.to_feature_map()?, &pair.image_b.to_feature_map()?, cfg, params)?;
        let (c, t) = coarse_hits(&m.coarse, &pair.h_gt, spec.w / COARSE_STRIDE);
        hits.0 += c;
        hits.1 += t;
    }
    Ok(hits)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrainReport {
    pub config: PipelineConfig,
    pub options: TrainOptions,
    /// Total loss of the training pair at each step, before its update.
    pub losses: Vec<f64>,
    /// `[window, patch, pixel, total]` averaged over the evaluation pairs.
    pub eval_initial: [f64; 4],
    pub eval_final: [f64; 4],
    pub updates: usize,
}

pub fn train_tiny(cfg: &PipelineConfig, opts: &TrainOptions) -> Result<(ModelParams, TrainReport)> {
    cfg.validate()?;
    if opts.steps == 0 {
        return Err(HarnessError::Args("training needs at least one step".into()));
    }
    let mut params = ModelParams::init(cfg);
    params.make_trainable();
    let eval: Vec<Sample> =
        pair_specs(opts, Split::Eval, opts.eval_pairs).into_iter().map(make_sample).collect::<Result<_>>()?;
    let eval_initial = mean_loss(&eval, cfg, &params)?;

    let mut adam = Adam::new(opts.lr);
    let mut losses = Vec::with_capacity(opts.steps);
    for (step, spec) in pair_specs(opts, Split::Train, opts.steps).into_iter().enumerate() {
        let sample = make_sample(spec)?;
        let a = sample.pair.image_a.to_feature_map()?;
        let b = sample.pair.image_b.to_feature_map()?;
        let f = pair_features(&a, &b, cfg, &params)?;
        let loss = pair_loss(&f, &sample.gt, cfg)?.total;
        let value = loss.item();
        if !value.is_finite() {
            return Err(HarnessError::Numerical(format!("loss is {value} at step {step}")));
        }
        losses.push(value);
        loss.backward()?;
        adam.step(&mut params);
    }
    let eval_final = mean_loss(&eval, cfg, &params)?;
    if eval_final.iter().any(|v| !v.is_finite()) {
        return Err(HarnessError::Numerical(format!("evaluation loss {eval_final:?} after training")));
    }
    let report = TrainReport {
        config: cfg.clone(),
        options: *opts,
        losses,
        eval_initial,
        eval_final,
        updates: adam.steps_taken() as usize,
    };
    Ok((params, report))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Element offset into the weight file.
    pub offset: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub config: PipelineConfig,
    /// Always `f64-le`.
    pub dtype: String,
    pub tensors: Vec<TensorEntry>,
}

pub const WEIGHTS_FILE: &str = "weights.bin";
pub const MANIFEST_FILE: &str = "manifest.json";

pub fn save_checkpoint(dir: &Path, cfg: &PipelineConfig, params: &ModelParams) -> Result<()> {
    let mut bytes = Vec::new();
    let mut tensors = Vec::new();
    for (name, t) in params.named_params() {
        tensors.push(TensorEntry { name, shape: t.shape().to_vec(), offset: bytes.len() / 8 });
        for v in t.data() {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
    }
    let manifest = Manifest { config: cfg.clone(), dtype: "f64-le".into(), tensors };
    write_file(&dir.join(WEIGHTS_FILE), &bytes)?;
    let json = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    write_file(&dir.join(MANIFEST_FILE), json.as_bytes())
}

pub fn load_checkpoint(dir: &Path) -> Result<(PipelineConfig, ModelParams)> {
    let manifest_path = dir.join(MANIFEST_FILE);
    let text = std::fs::read_to_string(&manifest_path).map_err(|e| HarnessError::io(&manifest_path, e))?;
    let format_err = |message: String| HarnessError::Format { path: manifest_path.clone(), message };
    let manifest: Manifest = serde_json::from_str(&text).map_err(|e| format_err(e.to_string()))?;
    if manifest.dtype != "f64-le" {
        return Err(format_err(format!("unsupported dtype {}", manifest.dtype)));
    }
    manifest.config.validate()?;
    let weights_path = dir.join(WEIGHTS_FILE);
    let bytes = std::fs::read(&weights_path).map_err(|e| HarnessError::io(&weights_path, e))?;
    let values: Vec<f64> = bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();

    let mut params = ModelParams::init(&manifest.config);
    let expected = params.named_params();
    if expected.len() != manifest.tensors.len() {
        return Err(format_err(format!("{} tensors, model has {}", manifest.tensors.len(), expected.len())));
    }
    for ((name, t), entry) in expected.iter().zip(&manifest.tensors) {
        let n: usize = entry.shape.iter().product();
        if &entry.name != name || entry.shape != t.shape() || entry.offset + n > values.len() {
            return Err(format_err(format!("tensor `{}` does not fit the model", entry.name)));
        }
        let data = values[entry.offset..entry.offset + n].to_vec();
        params.set_param(name, Tensor::new(&entry.shape, data)?);
    }
    Ok((manifest.config, params))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn adam_first_step_moves_by_learning_rate() {
        let mut t = Tensor::param(&[2], vec![1.0, -1.0]).unwrap();
        struct One<'a>(&'a mut Tensor);
        impl Parameterized for One<'_> {
            fn visit(&self, _: &str, f: &mut dyn FnMut(&str, &Tensor)) {
                f("t", self.0)
            }
            fn visit_mut(&mut self, _: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
                f("t", self.0)
            }
        }
        t.sum_squares().backward().unwrap();
        let mut adam = Adam::new(0.1);
        adam.step(&mut One(&mut t));
        assert!((t.data()[0] - 0.9).abs() < 1e-9 && (t.data()[1] + 0.9).abs() < 1e-9);
        assert!(t.grad().is_none_or(|g| g.iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn ground_truth_for_small_and_whole_cell_shifts() {
        let gt = derive_ground_truth(&Homography::translation(2.5, 0.0), 16, 16).unwrap();
        assert_eq!(gt.coarse, vec![(0, 0), (1, 1), (2, 2), (3, 3)]);
        // anchor of cell 0 is fine cell (2, 2), centered at 4.5
        assert_eq!(gt.fine[0], [7.0, 4.5]);

        let gt = derive_ground_truth(&Homography::translation(8.0, 0.0), 32, 32).unwrap();
        assert_eq!(gt.coarse.len(), 12);
        assert!(gt.coarse.iter().all(|&(i, j)| j == i + 1 && i % 4 != 3));
        assert!(derive_ground_truth(&Homography::translation(4.0, 0.0), 16, 16).unwrap().coarse.is_empty());
    }

    #[test]
    fn splits_are_disjoint_and_deterministic() {
        let o = TrainOptions::default();
        let t = pair_specs(&o, Split::Train, 5);
        assert_eq!(t, pair_specs(&o, Split::Train, 5));
        let e = pair_specs(&o, Split::Eval, 5);
        assert!(t.iter().all(|s| e.iter().all(|x| x.seed != s.seed)));
        assert!(t.iter().all(|s| s.magnitude.abs() <= o.max_shift));
    }

    #[test]
    fn checkpoint_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = PipelineConfig { seed: 4, ..PipelineConfig::tiny() };
        let mut params = ModelParams::init(&cfg);
        params.set_param("encoder.stage0.self.alpha_spatial", Tensor::scalar(0.123));
        save_checkpoint(dir.path(), &cfg, &params).unwrap();
        let (cfg2, loaded) = load_checkpoint(dir.path()).unwrap();
        assert_eq!(cfg2, cfg);
        for ((n1, a), (n2, b)) in params.named_params().iter().zip(loaded.named_params()) {
            assert_eq!(n1, &n2);
            assert_eq!(a.data(), b.data());
        }
        std::fs::write(dir.path().join(WEIGHTS_FILE), [0u8; 16]).unwrap();
        assert!(matches!(load_checkpoint(dir.path()), Err(HarnessError::Format { .. })));
    }

    #[test]
    fn one_step_changes_the_weights() {
        let cfg = PipelineConfig::tiny();
        let opts = TrainOptions { steps: 1, eval_pairs: 1, ..Default::default() };
        let (trained, report) = train_tiny(&cfg, &opts).unwrap();
        assert_eq!(report.updates, 1);
        assert_eq!(report.losses.len(), 1);
        let init = ModelParams::init(&cfg);
        let changed =
            trained.named_params().iter().zip(init.named_params()).any(|((_, a), (_, b))| a.data() != b.data());
        assert!(changed);
    }
}
