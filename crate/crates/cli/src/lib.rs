//! `morseuq` command line: synth, skeletonize, sample, train, infer, eval,
//! proofread-sim, serve and replay.
//!
//! Exit codes: 0 success, 1 usage error, 2 data or contract error. Every
//! run that writes files also writes a [`RunManifest`] holding the fully
//! resolved arguments; `replay --manifest <file>` re-executes it.

pub mod pipeline;
pub mod server;

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};

use anyhow::Context;
use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use serde_json::json;

use morseuq::grids::{save_binary, save_scalar};
use morseuq::inferpost::{backbone_segmentation, postprocess, McConfig, StructureEstimate};
use morseuq::metrics::{calibration, reliability_csv, segmentation_report, structure_samples, CalSample, DEFAULT_BINS};
use morseuq::morse::{skeletonize, StructureRecord, DEFAULT_BG_THRESHOLD};
use morseuq::probdmt::{sample_skeleton, SamplerConfig};
use morseuq::proofread::{curves_csv, simulate, Session};
use morseuq::regressor::{load_checkpoint, save_checkpoint, train, RegressorParams, TrainCase, TrainConfig};
use morseuq::structgraph::DEFAULT_BOX;
use morseuq::synth::{corpus_config, generate_case, SynthConfig};

use pipeline::{
    estimate_case, load_case, load_corpus, read_binary, read_jsonl, read_scalar, write_json, write_jsonl, LoadedCase,
};

pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Parser, Debug, Clone, Serialize, Deserialize)]
#[command(name = "morseuq", version, about = "Structure-wise uncertainty for curvilinear segmentation")]
pub struct Cli {
    /// Worker threads for per-structure and per-case work (0 = all cores).
    #[arg(long, global = true, default_value_t = 0)]
    pub jobs: usize,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "subcommand", rename_all = "kebab-case")]
pub enum Command {
    /// Generate a synthetic corpus of curvilinear cases.
    Synth(SynthArgs),
    /// Extract Morse structures from a likelihood map.
    Skeletonize(SkeletonizeArgs),
    /// Draw perturbed skeleton samples.
    Sample(SampleArgs),
    /// Train the structure regressor on a corpus.
    Train(TrainArgs),
    /// MC inference, overlay and heatmap for one case.
    Infer(InferArgs),
    /// Segmentation and calibration metrics.
    Eval(EvalArgs),
    /// Oracle proofreading simulation (clicks vs Dice).
    ProofreadSim(ProofreadSimArgs),
    /// HTTP API for interactive proofreading.
    Serve(ServeArgs),
    /// Re-run a command from its manifest.
    Replay(ReplayArgs),
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Synth(_) => "synth",
            Command::Skeletonize(_) => "skeletonize",
            Command::Sample(_) => "sample",
            Command::Train(_) => "train",
            Command::Infer(_) => "infer",
            Command::Eval(_) => "eval",
            Command::ProofreadSim(_) => "proofread-sim",
            Command::Serve(_) => "serve",
            Command::Replay(_) => "replay",
        }
    }
}

#[derive(Args, Debug, Clone, Serialize, Deserialize)]
pub struct SynthArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 20)]
    pub n: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, value_delimiter = ',', default_values_t = SynthConfig::default().dims)]
    pub dims: Vec<usize>,
    #[arg(long, default_value_t = SynthConfig::default().n_curves)]
    pub curves: usize,
    #[arg(long, default_value_t = SynthConfig::default().thickness)]
    pub thickness: usize,
    #[arg(long, default_value_t = SynthConfig::default().gap_rate)]
    pub gap_rate: f64,
    #[arg(long, default_value_t = SynthConfig::default().spur_rate)]
    pub spur_rate: f64,
    #[arg(long, default_value_t = SynthConfig::default().blur_sigma)]
    pub blur_sigma: f64,
    #[arg(long, default_value_t = SynthConfig::default().noise_sigma)]
    pub noise_sigma: f64,
}

#[derive(Args, Debug, Clone, Serialize, Deserialize)]
pub struct SamplerArgs {
    #[arg(long, default_value_t = SamplerConfig::default().u)]
    pub u: f64,
    #[arg(long, default_value_t = SamplerConfig::default().gamma)]
    pub gamma: f64,
    #[arg(long, default_value_t = SamplerConfig::default().alpha)]
    pub alpha: f64,
    #[arg(long, default_value_t = SamplerConfig::default().beta)]
    pub beta: f64,
    #[arg(long, default_value_t = SamplerConfig::default().max_step)]
    pub max_step: usize,
    /// Likelihood level below which pixels are background.
    #[arg(long, default_value_t = DEFAULT_BG_THRESHOLD)]
    pub bg: f64,
}

impl SamplerArgs {
    fn config(&self, seed: u64) -> Result<SamplerConfig, Failure> {
        let cfg = SamplerConfig {
            u: self.u,
            gamma: self.gamma,
            alpha: self.alpha,
            beta: self.beta,
            max_step: self.max_step,
            seed,
            ..Default::default()
        };
        cfg.validate().map_err(|e| Failure::Usage(e.to_string()))?;
        Ok(cfg)
    }
}

/// Inference settings shared by infer, eval, proofread-sim and serve.
#[derive(Args, Debug, Clone, Serialize, Deserialize)]
pub struct InferenceArgs {
    /// Number of MC rounds.
    #[arg(long, default_value_t = morseuq::inferpost::DEFAULT_RUNS)]
    pub runs: usize,
    #[arg(long = "box", default_value_t = DEFAULT_BOX)]
    pub box_size: usize,
    /// Disable MC dropout during inference.
    #[arg(long)]
    pub no_dropout: bool,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[command(flatten)]
    pub sampler: SamplerArgs,
}

impl InferenceArgs {
    fn configs(&self) -> Result<(SamplerConfig, McConfig), Failure> {
        if self.runs == 0 {
            return Err(Failure::Usage("--runs must be at least 1".into()));
        }
        Ok((
            self.sampler.config(self.seed)?,
            McConfig {
                runs: self.runs,
                seed: self.seed,
                dropout: !self.no_dropout,
                box_size: self.box_size,
            },
        ))
    }
}

#[derive(Args, Debug, Clone, Serialize, Deserialize)]
pub struct SkeletonizeArgs {
    #[arg(long)]
    pub likelihood: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = DEFAULT_BG_THRESHOLD)]
    pub bg: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Args, Debug, Clone, Serialize, Deserialize)]
pub struct SampleArgs {
    #[arg(long)]
    pub likelihood: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = morseuq::inferpost::DEFAULT_RUNS)]
    pub runs: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[command(flatten)]
    pub sampler: SamplerArgs,
}

#[derive(Args, Debug, Clone, Serialize, Deserialize)]
pub struct TrainArgs {
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = TrainConfig::default().epochs)]
    pub epochs: usize,
    #[arg(long, default_value_t = TrainConfig::default().lr)]
    pub lr: f64,
    #[arg(long = "box", default_value_t = DEFAULT_BOX)]
    pub box_size: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[command(flatten)]
    pub sampler: SamplerArgs,
}

#[derive(Args, Debug, Clone, Serialize, Deserialize)]
pub struct InferArgs {
    #[arg(long)]
    pub model: PathBuf,
    /// Case directory holding image.grd and likelihood.grd.
    #[arg(long, conflicts_with_all = ["image", "likelihood"])]
    pub case: Option<PathBuf>,
    #[arg(long, requires = "likelihood")]
    pub image: Option<PathBuf>,
    #[arg(long)]
    pub likelihood: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub inference: InferenceArgs,
}

#[derive(Args, Debug, Clone, Serialize, Deserialize)]
pub struct EvalArgs {
    /// Predicted mask (pair mode).
    #[arg(long, requires = "gt", conflicts_with = "corpus")]
    pub pred: Option<PathBuf>,
    #[arg(long, requires = "pred")]
    pub gt: Option<PathBuf>,
    /// Structure estimates (JSON Lines) for calibration in pair mode.
    #[arg(long, requires = "pred")]
    pub estimates: Option<PathBuf>,
    /// Corpus directory (corpus mode; needs --model).
    #[arg(long, requires = "model")]
    pub corpus: Option<PathBuf>,
    #[arg(long)]
    pub model: Option<PathBuf>,
    /// Output directory for report.json and reliability.csv.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, default_value_t = DEFAULT_BINS)]
    pub bins: usize,
    #[command(flatten)]
    pub inference: InferenceArgs,
}

#[derive(Args, Debug, Clone, Serialize, Deserialize)]
pub struct ProofreadSimArgs {
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub inference: InferenceArgs,
}

#[derive(Args, Debug, Clone, Serialize, Deserialize)]
pub struct ServeArgs {
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long, default_value_t = 8080)]
    pub port: u16,
    #[arg(long, default_value = "127.0.0.1")]
    pub host: String,
    /// Where exports go (default: <corpus>/exports).
    #[arg(long)]
    pub export_dir: Option<PathBuf>,
    #[command(flatten)]
    pub inference: InferenceArgs,
}

#[derive(Args, Debug, Clone, Serialize, Deserialize)]
pub struct ReplayArgs {
    #[arg(long)]
    pub manifest: PathBuf,
}

/// Record of one run, written next to its outputs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool: String,
    pub version: String,
    pub subcommand: String,
    pub seed: u64,
    pub config: serde_json::Value,
    pub inputs: Vec<PathBuf>,
    pub outputs: Vec<PathBuf>,
}

#[derive(Debug)]
pub enum Failure {
    Usage(String),
    Data(anyhow::Error),
}

impl<E: Into<anyhow::Error>> From<E> for Failure {
    fn from(e: E) -> Self {
        Failure::Data(e.into())
    }
}

type Outcome = Result<(), Failure>;

fn write_manifest(path: &Path, command: &Command, seed: u64, inputs: &[&Path], outputs: &[&Path]) -> Outcome {
    let manifest = RunManifest {
        tool: "morseuq".into(),
        version: TOOL_VERSION.into(),
        subcommand: command.name().into(),
        seed,
        config: serde_json::to_value(command)?,
        inputs: inputs.iter().map(|p| p.to_path_buf()).collect(),
        outputs: outputs.iter().map(|p| p.to_path_buf()).collect(),
    };
    write_json(path, &manifest)?;
    Ok(())
}

fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

fn init_logging() {
    let env = env_logger::Env::new().filter_or("MORSEUQ_LOG", "warn");
    let _ = env_logger::Builder::from_env(env).format_timestamp(None).try_init();
}

/// Parses `argv` (including the program name) and runs the command.
/// Returns the process exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    init_logging();
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match execute(&cli) {
        Ok(()) => 0,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            1
        }
        Err(Failure::Data(e)) => {
            eprintln!("error: {e:#}");
            2
        }
    }
}

pub fn execute(cli: &Cli) -> Outcome {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cli.jobs)
        .build()
        .context("building worker pool")?;
    pool.install(|| dispatch(&cli.command))
}

fn dispatch(command: &Command) -> Outcome {
    match command {
        Command::Synth(a) => cmd_synth(command, a),
        Command::Skeletonize(a) => cmd_skeletonize(command, a),
        Command::Sample(a) => cmd_sample(command, a),
        Command::Train(a) => cmd_train(command, a),
        Command::Infer(a) => cmd_infer(command, a),
        Command::Eval(a) => cmd_eval(command, a),
        Command::ProofreadSim(a) => cmd_proofread_sim(command, a),
        Command::Serve(a) => cmd_serve(command, a),
        Command::Replay(a) => cmd_replay(a),
    }
}

fn cmd_synth(command: &Command, a: &SynthArgs) -> Outcome {
    let base = SynthConfig {
        dims: a.dims.clone(),
        n_curves: a.curves,
        thickness: a.thickness,
        gap_rate: a.gap_rate,
        spur_rate: a.spur_rate,
        blur_sigma: a.blur_sigma,
        noise_sigma: a.noise_sigma,
        seed: a.seed,
    };
    base.validate().map_err(|e| Failure::Usage(e.to_string()))?;
    fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    let mut cases = Vec::with_capacity(a.n);
    for k in 0..a.n {
        let cfg = corpus_config(&base, a.seed, k);
        let case = generate_case::<f64>(&cfg)?;
        let dir = a.out.join(format!("case_{k:04}"));
        fs::create_dir_all(&dir)?;
        save_scalar(&case.image, dir.join(pipeline::IMAGE_FILE))?;
        save_scalar(&case.likelihood, dir.join(pipeline::LIKELIHOOD_FILE))?;
        save_binary(&case.gt, dir.join(pipeline::GT_FILE))?;
        cases.push(json!({ "dir": dir, "config": cfg }));
    }
    write_json(&a.out.join("cases.json"), &cases)?;
    write_manifest(&a.out.join(MANIFEST_FILE), command, a.seed, &[], &[&a.out])
}

fn cmd_skeletonize(command: &Command, a: &SkeletonizeArgs) -> Outcome {
    let f = read_scalar(&a.likelihood)?;
    let skel = skeletonize(&f, a.bg);
    log::info!("{} structures", skel.len());
    write_jsonl(&a.out, skel.structures.iter().map(StructureRecord::from))?;
    write_manifest(&sibling(&a.out, ".manifest.json"), command, a.seed, &[&a.likelihood], &[&a.out])
}

fn cmd_sample(command: &Command, a: &SampleArgs) -> Outcome {
    let cfg = a.sampler.config(a.seed)?;
    if a.runs == 0 {
        return Err(Failure::Usage("--runs must be at least 1".into()));
    }
    let f = read_scalar(&a.likelihood)?;
    let skel = skeletonize(&f, a.sampler.bg);
    let mut records = Vec::new();
    for run in 1..=a.runs as u64 {
        records.extend(sample_skeleton(&skel, &f, &cfg, run).iter().map(|s| s.record(run)));
    }
    write_jsonl(&a.out, records)?;
    write_manifest(&sibling(&a.out, ".manifest.json"), command, a.seed, &[&a.likelihood], &[&a.out])
}

fn train_corpus(cases: Vec<LoadedCase>, bg: f64) -> Result<Vec<TrainCase<f64>>, Failure> {
    cases
        .into_iter()
        .map(|c| {
            let gt = c
                .gt
                .ok_or_else(|| anyhow::anyhow!("case {} has no {}", c.id, pipeline::GT_FILE))?;
            Ok(TrainCase {
                skeleton: skeletonize(&c.likelihood, bg),
                image: c.image,
                likelihood: c.likelihood,
                gt,
            })
        })
        .collect()
}

fn cmd_train(command: &Command, a: &TrainArgs) -> Outcome {
    let sampler = a.sampler.config(a.seed)?;
    let cfg = TrainConfig {
        lr: a.lr,
        epochs: a.epochs,
        seed: a.seed,
        box_size: a.box_size,
        ..Default::default()
    };
    cfg.validate().map_err(|e| Failure::Usage(e.to_string()))?;
    let corpus = train_corpus(load_corpus(&a.corpus)?, a.sampler.bg)?;
    let out = train::<f64, f32>(&corpus, &sampler, &cfg)?;
    save_checkpoint(&out.params, &a.out)?;
    let loss_path = sibling(&a.out, ".loss.csv");
    let mut csv = String::from("epoch,loss\n");
    for (e, l) in out.loss_trace.iter().enumerate() {
        csv.push_str(&format!("{},{}\n", e + 1, l));
    }
    fs::write(&loss_path, csv)?;
    write_manifest(
        &sibling(&a.out, ".manifest.json"),
        command,
        a.seed,
        &[&a.corpus],
        &[&a.out, &loss_path],
    )
}

fn load_model(path: &Path) -> Result<RegressorParams<f32>, Failure> {
    load_checkpoint(path)
        .with_context(|| format!("loading model {}", path.display()))
        .map_err(Failure::Data)
}

fn cmd_infer(command: &Command, a: &InferArgs) -> Outcome {
    let (sampler, mc) = a.inference.configs()?;
    if a.case.is_none() && a.likelihood.is_none() {
        return Err(Failure::Usage("infer needs --case or --likelihood".into()));
    }
    let params = load_model(&a.model)?;
    let (case, inputs): (LoadedCase, Vec<PathBuf>) = match (&a.case, &a.likelihood) {
        (Some(dir), _) => (load_case(dir)?, vec![dir.clone()]),
        (None, Some(lik)) => {
            let likelihood = read_scalar(lik)?;
            let image = match &a.image {
                Some(p) => read_scalar(p)?,
                None => likelihood.clone(),
            };
            image.same_dims(&likelihood)?;
            let mut inputs = vec![lik.clone()];
            inputs.extend(a.image.clone());
            (
                LoadedCase {
                    id: "case".into(),
                    image,
                    likelihood,
                    gt: None,
                },
                inputs,
            )
        }
        (None, None) => unreachable!("checked above"),
    };
    let estimates = estimate_case(&params, &case, &sampler, &mc, a.inference.sampler.bg)?;
    let result = postprocess(estimates, &backbone_segmentation(&case.likelihood))?;
    fs::create_dir_all(&a.out)?;
    let files = [
        a.out.join("estimates.jsonl"),
        a.out.join("final_mask.grd"),
        a.out.join("heatmap.grd"),
        a.out.join("skeleton.grd"),
    ];
    write_jsonl(&files[0], &result.estimates)?;
    save_binary(&result.final_mask, &files[1])?;
    save_scalar(&result.heatmap, &files[2])?;
    save_binary(&result.skeletal_mask, &files[3])?;
    let mut all_inputs: Vec<&Path> = vec![&a.model];
    all_inputs.extend(inputs.iter().map(|p| p.as_path()));
    let outs: Vec<&Path> = files.iter().map(|p| p.as_path()).collect();
    write_manifest(&a.out.join(MANIFEST_FILE), command, a.inference.seed, &all_inputs, &outs)
}

#[derive(Serialize)]
struct CaseReport {
    id: String,
    structures: usize,
    backbone: morseuq::metrics::SegmentationReport,
    final_mask: morseuq::metrics::SegmentationReport,
}

fn mean(xs: impl Iterator<Item = f64>) -> f64 {
    let v: Vec<f64> = xs.collect();
    v.iter().sum::<f64>() / v.len().max(1) as f64
}

fn cmd_eval(command: &Command, a: &EvalArgs) -> Outcome {
    if a.bins == 0 {
        return Err(Failure::Usage("--bins must be at least 1".into()));
    }
    let (report, rows, inputs) = match (&a.pred, &a.gt, &a.corpus) {
        (Some(pred), Some(gt), _) => {
            let p = read_binary(pred)?;
            let g = read_binary(gt)?;
            let seg = segmentation_report(&p, &g)?;
            let mut report = serde_json::to_value(&seg)?;
            let mut rows = None;
            let mut inputs = vec![pred.clone(), gt.clone()];
            if let Some(est_path) = &a.estimates {
                let est: Vec<StructureEstimate> = read_jsonl(est_path)?;
                let samples = structure_samples(&est, &g);
                if !samples.is_empty() {
                    let (ece, r) = calibration(&samples, a.bins)?;
                    report["ece"] = json!(ece);
                    rows = Some(r);
                }
                inputs.push(est_path.clone());
            }
            (report, rows, inputs)
        }
        (None, None, Some(corpus)) => {
            let model = a.model.as_ref().expect("clap enforces --model");
            let (sampler, mc) = a.inference.configs()?;
            let params = load_model(model)?;
            let mut cases = Vec::new();
            let mut samples: Vec<CalSample> = Vec::new();
            for case in load_corpus(corpus)? {
                let Some(gt) = case.gt.clone() else {
                    log::warn!("{}: no ground truth, skipped", case.id);
                    continue;
                };
                let est = estimate_case(&params, &case, &sampler, &mc, a.inference.sampler.bg)?;
                samples.extend(structure_samples(&est, &gt));
                let backbone = backbone_segmentation(&case.likelihood);
                let n = est.len();
                let result = postprocess(est, &backbone)?;
                cases.push(CaseReport {
                    id: case.id,
                    structures: n,
                    backbone: segmentation_report(&backbone, &gt)?,
                    final_mask: segmentation_report(&result.final_mask, &gt)?,
                });
            }
            if cases.is_empty() {
                return Err(Failure::Data(anyhow::anyhow!("no case with ground truth in corpus")));
            }
            let (ece, rows) = if samples.is_empty() {
                (None, None)
            } else {
                let (e, r) = calibration(&samples, a.bins)?;
                (Some(e), Some(r))
            };
            let aggregate = json!({
                "cases": cases.len(),
                "structures": samples.len(),
                "ece": ece,
                "backbone_dice": mean(cases.iter().map(|c| c.backbone.dice)),
                "final_dice": mean(cases.iter().map(|c| c.final_mask.dice)),
                "final_cldice": mean(cases.iter().map(|c| c.final_mask.cldice)),
                "final_ari": mean(cases.iter().map(|c| c.final_mask.ari)),
                "final_voi": mean(cases.iter().map(|c| c.final_mask.voi)),
            });
            (
                json!({ "cases": cases, "aggregate": aggregate }),
                rows,
                vec![corpus.clone(), model.clone()],
            )
        }
        _ => return Err(Failure::Usage("eval needs --pred and --gt, or --corpus and --model".into())),
    };
    println!("{}", serde_json::to_string_pretty(&report)?);
    if let Some(out) = &a.out {
        fs::create_dir_all(out)?;
        let report_path = out.join("report.json");
        write_json(&report_path, &report)?;
        let mut outs = vec![report_path];
        if let Some(rows) = rows {
            let p = out.join("reliability.csv");
            fs::write(&p, reliability_csv(&rows))?;
            outs.push(p);
        }
        let ins: Vec<&Path> = inputs.iter().map(|p| p.as_path()).collect();
        let outs: Vec<&Path> = outs.iter().map(|p| p.as_path()).collect();
        write_manifest(&out.join(MANIFEST_FILE), command, a.inference.seed, &ins, &outs)?;
    }
    Ok(())
}

fn cmd_proofread_sim(command: &Command, a: &ProofreadSimArgs) -> Outcome {
    let (sampler, mc) = a.inference.configs()?;
    let params = load_model(&a.model)?;
    let mut curves = Vec::new();
    for case in load_corpus(&a.corpus)? {
        let Some(gt) = case.gt.clone() else {
            log::warn!("{}: no ground truth, skipped", case.id);
            continue;
        };
        let est = estimate_case(&params, &case, &sampler, &mc, a.inference.sampler.bg)?;
        let curve = simulate(&est, &backbone_segmentation(&case.likelihood), &gt)?;
        log::info!(
            "{}: {} clicks, dice {:.4} -> {:.4}",
            case.id,
            curve.len() - 1,
            curve[0].1,
            curve.last().unwrap().1
        );
        curves.push((case.id, curve));
    }
    if curves.is_empty() {
        return Err(Failure::Data(anyhow::anyhow!("no case with ground truth in corpus")));
    }
    fs::write(&a.out, curves_csv(&curves))?;
    write_manifest(
        &sibling(&a.out, ".manifest.json"),
        command,
        a.inference.seed,
        &[&a.corpus, &a.model],
        &[&a.out],
    )
}

/// Runs inference over the corpus and opens one session per case.
pub fn build_state(
    corpus: &Path,
    model: &Path,
    inference: &InferenceArgs,
    export_dir: PathBuf,
) -> Result<server::AppState, Failure> {
    let (sampler, mc) = inference.configs()?;
    let params = load_model(model)?;
    let mut cases = Vec::new();
    for case in load_corpus(corpus)? {
        let est = estimate_case(&params, &case, &sampler, &mc, inference.sampler.bg)?;
        let backbone = backbone_segmentation(&case.likelihood);
        let session = Session::new(case.id.clone(), est, &backbone, case.gt.clone())?;
        cases.push(server::CaseEntry {
            id: case.id,
            image: case.image,
            likelihood: case.likelihood,
            backbone,
            session: Mutex::new(session),
        });
    }
    Ok(server::AppState { cases, export_dir })
}

fn cmd_serve(command: &Command, a: &ServeArgs) -> Outcome {
    let export_dir = a.export_dir.clone().unwrap_or_else(|| a.corpus.join("exports"));
    let state = build_state(&a.corpus, &a.model, &a.inference, export_dir.clone())?;
    fs::create_dir_all(&export_dir)?;
    write_manifest(
        &export_dir.join(MANIFEST_FILE),
        command,
        a.inference.seed,
        &[&a.corpus, &a.model],
        &[&export_dir],
    )?;
    let app = server::router(Arc::new(state));
    let addr = format!("{}:{}", a.host, a.port);
    let rt = tokio::runtime::Runtime::new()?;
    rt.block_on(async {
        let listener = tokio::net::TcpListener::bind(&addr)
            .await
            .with_context(|| format!("binding {addr}"))?;
        log::info!("listening on http://{addr}");
        axum::serve(listener, app).await.context("serving")
    })?;
    Ok(())
}

fn cmd_replay(a: &ReplayArgs) -> Outcome {
    let text = fs::read_to_string(&a.manifest).with_context(|| format!("reading {}", a.manifest.display()))?;
    let manifest: RunManifest = serde_json::from_str(&text).context("parsing manifest")?;
    let command: Command = serde_json::from_value(manifest.config).context("manifest config")?;
    if matches!(command, Command::Replay(_)) {
        return Err(Failure::Usage("a manifest cannot replay another replay".into()));
    }
    dispatch(&command)
}
