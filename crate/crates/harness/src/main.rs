use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use serde_json::{json, Value};
use winmatch_core::config::{FeatureMode, PipelineConfig, TopkSchedule};
use winmatch_core::matcher::{match_pipeline, ModelParams};

use winmatch::checks::{gradient_suite, oracle_suite};
use winmatch::eval::{evaluate, evaluate_specs, summarize};
use winmatch::homography::{estimate_homography, Homography, RansacConfig};
use winmatch::image_io::{read_pgm, write_file, write_pgm};
use winmatch::render::render_to_file;
use winmatch::synth::{gen_pair, PairKind, PairSpec, SyntheticPair};
use winmatch::train::{
    coarse_precision, load_checkpoint, pair_specs, save_checkpoint, train_tiny, Split, TrainOptions,
};
use winmatch::{HarnessError, Result};

#[derive(Parser)]
#[command(name = "winmatch", version, about = "Top-k window attention matcher on synthetic image pairs")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic pair (a.pgm, b.pgm, pair.json) to --out.
    Gen(GenArgs),
    /// Train the learned matcher on small translate pairs and save a checkpoint.
    Train(TrainArgs),
    /// Match one pair and render the matches.
    Match(MatchArgs),
    /// Match seeded pairs and report precision and corner error.
    Eval(EvalArgs),
    /// Finite-difference gradient suite.
    Gradcheck(GradcheckArgs),
    /// Compare the attention kernel against a plain-loop transcription.
    Oracle(OracleArgs),
}

#[derive(Args, Clone)]
struct Shared {
    /// Pipeline configuration JSON; keys mirror the config field names.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Image size as HxW.
    #[arg(long, value_parser = parse_size)]
    size: Option<(usize, usize)>,
    #[arg(long)]
    stages: Option<usize>,
    /// `auto` or `fixed:<k>`.
    #[arg(long)]
    topk_schedule: Option<TopkSchedule>,
    /// `learned` or `handcrafted`.
    #[arg(long)]
    features: Option<FeatureMode>,
    /// Write the JSON report here instead of stdout.
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Args, Clone)]
struct PairArgs {
    #[arg(long, default_value = "translate")]
    kind: PairKind,
    #[arg(long, default_value_t = 8.0)]
    magnitude: f64,
    #[arg(long, default_value_t = 0.0)]
    noise: f64,
}

#[derive(Args)]
struct GenArgs {
    #[command(flatten)]
    shared: Shared,
    #[command(flatten)]
    pair: PairArgs,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    shared: Shared,
    #[arg(long, default_value_t = 300)]
    steps: usize,
    #[arg(long, default_value_t = 1e-3)]
    lr: f64,
    /// Held-out pairs scored after training.
    #[arg(long, default_value_t = 10)]
    holdout: usize,
}

#[derive(Args)]
struct MatchArgs {
    #[command(flatten)]
    shared: Shared,
    /// First image (PGM); requires --b.
    #[arg(long, requires = "b", conflicts_with = "pair")]
    a: Option<PathBuf>,
    #[arg(long, requires = "a")]
    b: Option<PathBuf>,
    /// Directory written by `gen`.
    #[arg(long)]
    pair: Option<PathBuf>,
    #[command(flatten)]
    synth: PairArgs,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long, default_value_t = 1000)]
    ransac_iters: usize,
    #[arg(long, default_value_t = 3.0)]
    inlier_px: f64,
    /// Include wall-clock time in the report.
    #[arg(long)]
    timing: bool,
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    shared: Shared,
    #[arg(long, default_value_t = 8)]
    pairs: usize,
    #[command(flatten)]
    synth: PairArgs,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long, default_value_t = 1000)]
    ransac_iters: usize,
    #[arg(long, default_value_t = 3.0)]
    inlier_px: f64,
    #[arg(long)]
    timing: bool,
}

#[derive(Args)]
struct GradcheckArgs {
    #[command(flatten)]
    shared: Shared,
    /// Probed coordinates per parameter tensor.
    #[arg(long, default_value_t = 12)]
    max_probes: usize,
}

#[derive(Args)]
struct OracleArgs {
    #[command(flatten)]
    shared: Shared,
    #[arg(long, default_value_t = 50)]
    instances: usize,
}

fn parse_size(s: &str) -> std::result::Result<(usize, usize), String> {
    let (h, w) = s.split_once(['x', 'X']).ok_or_else(|| format!("expected HxW, got `{s}`"))?;
    let parse = |v: &str| v.trim().parse::<usize>().map_err(|e| format!("bad size `{s}`: {e}"));
    Ok((parse(h)?, parse(w)?))
}

impl Shared {
    fn seed(&self) -> u64 {
        self.seed.unwrap_or(0)
    }

    fn size(&self, default: (usize, usize)) -> (usize, usize) {
        self.size.unwrap_or(default)
    }

    /// File config (or `base`) with the command-line overrides applied.
    fn pipeline(&self, base: PipelineConfig) -> Result<PipelineConfig> {
        let mut cfg = match &self.config {
            Some(path) => {
                let text = std::fs::read_to_string(path).map_err(|e| HarnessError::io(path, e))?;
                PipelineConfig::from_json(&text)?
            }
            None => base,
        };
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        if let Some(stages) = self.stages {
            cfg.stages = stages;
        }
        if let Some(t) = self.topk_schedule {
            cfg.topk_schedule = t;
        }
        if let Some(f) = self.features {
            cfg.features = f;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn emit(&self, report: &impl Serialize) -> Result<()> {
        let mut text = serde_json::to_string_pretty(report).expect("reports serialize");
        text.push('\n');
        match &self.report {
            Some(path) => write_file(path, text.as_bytes()),
            None => {
                print!("{text}");
                Ok(())
            }
        }
    }
}

impl PairArgs {
    fn spec(&self, (h, w): (usize, usize), seed: u64) -> PairSpec {
        PairSpec { kind: self.kind, h, w, magnitude: self.magnitude, noise_sigma: self.noise, seed }
    }
}

fn model(shared: &Shared, checkpoint: Option<&Path>) -> Result<(PipelineConfig, ModelParams)> {
    match checkpoint {
        Some(dir) => {
            let (stored, params) = load_checkpoint(dir)?;
            // Command-line flags still override the stored settings.
            let cfg = Shared { config: None, ..shared.clone() }.pipeline(stored)?;
            Ok((cfg, params))
        }
        None => {
            let cfg = shared.pipeline(PipelineConfig::default())?;
            let params = ModelParams::init(&cfg);
            Ok((cfg, params))
        }
    }
}

fn elapsed(timing: bool, start: Instant) -> Option<f64> {
    timing.then(|| start.elapsed().as_secs_f64() * 1e3)
}

fn gen(args: GenArgs) -> Result<()> {
    let spec = args.pair.spec(args.shared.size((128, 128)), args.shared.seed());
    let pair = gen_pair(spec)?;
    let out = &args.shared.out;
    write_pgm(&out.join("a.pgm"), &pair.image_a)?;
    write_pgm(&out.join("b.pgm"), &pair.image_b)?;
    let meta = json!({ "spec": spec, "h_gt": pair.h_gt });
    let text = serde_json::to_string_pretty(&meta).expect("serializes") + "\n";
    write_file(&out.join("pair.json"), text.as_bytes())?;
    args.shared.emit(&json!({ "command": "gen", "spec": spec, "h_gt": pair.h_gt, "out": out }))
}

fn train(args: TrainArgs) -> Result<()> {
    let cfg = args.shared.pipeline(PipelineConfig::tiny())?;
    let (h, w) = args.shared.size((16, 16));
    let opts = TrainOptions { steps: args.steps, lr: args.lr, seed: cfg.seed, h, w, ..TrainOptions::default() };
    let (params, report) = train_tiny(&cfg, &opts)?;
    let holdout = pair_specs(&opts, Split::Holdout, args.holdout);
    let (hits, total) = coarse_precision(&holdout, &cfg, &params)?;
    save_checkpoint(&args.shared.out, &cfg, &params)?;
    args.shared.emit(&json!({
        "command": "train",
        "report": report,
        "holdout": { "pairs": holdout.len(), "coarse_hits": hits, "coarse_total": total,
                     "coarse_precision": if total == 0 { 0.0 } else { hits as f64 / total as f64 } },
        "checkpoint": args.shared.out,
    }))
}

/// The pair to match: two PGM files, a `gen` directory, or a fresh synthetic pair.
fn load_pair(
    args: &MatchArgs,
) -> Result<(winmatch::image_io::GrayImage, winmatch::image_io::GrayImage, Option<SyntheticPair>)> {
    if let (Some(a), Some(b)) = (&args.a, &args.b) {
        return Ok((read_pgm(a)?, read_pgm(b)?, None));
    }
    if let Some(dir) = &args.pair {
        let (a, b) = (read_pgm(&dir.join("a.pgm"))?, read_pgm(&dir.join("b.pgm"))?);
        let meta = dir.join("pair.json");
        let truth = match std::fs::read_to_string(&meta) {
            Ok(text) => {
                let v: Value = serde_json::from_str(&text)
                    .map_err(|e| HarnessError::Format { path: meta.clone(), message: e.to_string() })?;
                let parse = |key: &str| {
                    v.get(key)
                        .cloned()
                        .ok_or_else(|| HarnessError::Format { path: meta.clone(), message: format!("missing `{key}`") })
                };
                let spec: PairSpec = serde_json::from_value(parse("spec")?)
                    .map_err(|e| HarnessError::Format { path: meta.clone(), message: e.to_string() })?;
                let h_gt: Homography = serde_json::from_value(parse("h_gt")?)
                    .map_err(|e| HarnessError::Format { path: meta.clone(), message: e.to_string() })?;
                Some(SyntheticPair { spec, image_a: a.clone(), image_b: b.clone(), h_gt })
            }
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => None,
            Err(e) => return Err(HarnessError::io(meta, e)),
        };
        return Ok((a, b, truth));
    }
    let pair = gen_pair(args.synth.spec(args.shared.size((128, 128)), args.shared.seed()))?;
    Ok((pair.image_a.clone(), pair.image_b.clone(), Some(pair)))
}

fn run_match(args: MatchArgs) -> Result<()> {
    let start = Instant::now();
    let (cfg, params) = model(&args.shared, args.checkpoint.as_deref())?;
    let (a, b, truth) = load_pair(&args)?;
    if (a.h, a.w) != (b.h, b.w) {
        return Err(HarnessError::Args(format!("image sizes differ: {}x{} vs {}x{}", a.h, a.w, b.h, b.w)));
    }
    let matches = match_pipeline(&a.to_feature_map()?, &b.to_feature_map()?, &cfg, &params)?;
    let ransac = RansacConfig { iters: args.ransac_iters, inlier_px: args.inlier_px, seed: cfg.seed };
    let est = estimate_homography(&matches.fine, &ransac).ok();
    let stats = render_to_file(&args.shared.out.join("matches.ppm"), &a, &b, &matches.fine)?;
    let evaluation = truth
        .as_ref()
        .map(|pair| evaluate(pair, &matches, est.as_ref().map(|(h, mask)| (h, mask.iter().filter(|&&m| m).count()))));
    args.shared.emit(&json!({
        "command": "match",
        "config": cfg,
        "matches": matches,
        "homography": est.map(|(h, _)| h),
        "evaluation": evaluation,
        "render": { "red": stats.red, "green": stats.green },
        "runtime_ms": elapsed(args.timing, start),
    }))
}

fn run_eval(args: EvalArgs) -> Result<()> {
    let start = Instant::now();
    let (cfg, params) = model(&args.shared, args.checkpoint.as_deref())?;
    let size = args.shared.size((128, 128));
    let specs: Vec<PairSpec> =
        (0..args.pairs as u64).map(|i| args.synth.spec(size, args.shared.seed().wrapping_add(i))).collect();
    let ransac = RansacConfig { iters: args.ransac_iters, inlier_px: args.inlier_px, seed: cfg.seed };
    let reports = evaluate_specs(&specs, &cfg, &params, &ransac)?;
    args.shared.emit(&json!({
        "command": "eval",
        "config": cfg,
        "ransac": ransac,
        "summary": summarize(&reports),
        "pairs": reports,
        "runtime_ms": elapsed(args.timing, start),
    }))
}

fn gradcheck(args: GradcheckArgs) -> Result<()> {
    let suite = gradient_suite(args.shared.seed(), args.max_probes)?;
    args.shared.emit(&json!({ "command": "gradcheck", "suite": suite }))?;
    if suite.passed {
        Ok(())
    } else {
        Err(HarnessError::Numerical(format!("max relative gradient error {:.3e}", suite.max_rel_error)))
    }
}

fn oracle(args: OracleArgs) -> Result<()> {
    let report = oracle_suite(args.shared.seed(), args.instances)?;
    args.shared.emit(&json!({ "command": "oracle", "report": report }))?;
    if report.passed {
        Ok(())
    } else {
        Err(HarnessError::Numerical(format!("kernel deviates from the reference by {:.3e}", report.max_abs_diff)))
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = match cli.command {
        Command::Gen(a) => gen(a),
        Command::Train(a) => train(a),
        Command::Match(a) => run_match(a),
        Command::Eval(a) => run_eval(a),
        Command::Gradcheck(a) => gradcheck(a),
        Command::Oracle(a) => oracle(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
