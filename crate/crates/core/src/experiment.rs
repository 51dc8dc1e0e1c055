//! Experiment orchestration: training runs, fusion with an equivalence
//! report, evaluation, the branch-count ablation and benchmarks.

use std::fs;
use std::path::{Path, PathBuf};

use log::info;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::data::{load_split, Manifest, Split, Utterance};
use crate::error::{Error, Result};
use crate::eval::{self, BenchConfig, BenchReport, MetricSummary, DEFAULT_FA_TARGET, DEFAULT_REFRACTORY};
use crate::features::MfccConfig;
use crate::io::{load_model, load_trainable, save_model};
use crate::model::{Architecture, GraphMode, ModelGraph, RepCnnConfig};
use crate::tensor::Tensor;
use crate::train::{export_loss_curves, train, LossCurve, TrainConfig, TrainData};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentSpec {
    pub manifest: PathBuf,
    #[serde(default = "default_arch")]
    pub arch: Architecture,
    #[serde(default)]
    pub model: RepCnnConfig,
    #[serde(default)]
    pub train: TrainConfig,
    /// Overrides `train.seeds` when present.
    #[serde(default)]
    pub seeds: Option<Vec<u64>>,
    pub output_dir: PathBuf,
}

fn default_arch() -> Architecture {
    Architecture::RepCnn
}

impl ExperimentSpec {
    /// Reads a JSON spec; relative paths are resolved against its directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::InvalidConfig(format!("cannot read spec {}: {e}", path.display())))?;
        let mut spec: ExperimentSpec = serde_json::from_str(&text)
            .map_err(|e| Error::InvalidConfig(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        if spec.manifest.is_relative() {
            spec.manifest = base.join(&spec.manifest);
        }
        if spec.output_dir.is_relative() {
            spec.output_dir = base.join(&spec.output_dir);
        }
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if !self.manifest.is_file() {
            return Err(Error::InvalidConfig(format!(
                "manifest {} does not exist",
                self.manifest.display()
            )));
        }
        self.model.validate()?;
        self.effective_train().validate()
    }

    pub fn effective_train(&self) -> TrainConfig {
        let mut t = self.train.clone();
        if let Some(s) = &self.seeds {
            t.seeds = s.clone();
        }
        t
    }
}

fn load_train_data(manifest: &Manifest) -> Result<TrainData> {
    let train = load_split(manifest, Split::Train)?;
    let val = load_split(manifest, Split::Val)?;
    if train.is_empty() {
        return Err(Error::Empty("manifest has no train split".into()));
    }
    if val.is_empty() {
        return Err(Error::Empty("manifest has no val split".into()));
    }
    Ok(TrainData::new(train, val))
}

pub fn model_file_name(seed: u64) -> String {
    format!("model_seed{seed}.rpcn")
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model_paths: Vec<PathBuf>,
    pub curves_path: PathBuf,
    pub curves: Vec<LossCurve>,
}

/// Trains one model per seed and writes `model_seed{seed}.rpcn` files plus
/// `loss_curves.csv` into the output directory.
pub fn run_train(spec: &ExperimentSpec) -> Result<TrainOutcome> {
    spec.validate()?;
    let manifest = Manifest::load(&spec.manifest)?;
    let data = load_train_data(&manifest)?;
    let cfg = spec.effective_train();
    fs::create_dir_all(&spec.output_dir)?;
    let mut model_paths = Vec::new();
    let mut curves = Vec::new();
    for &seed in &cfg.seeds {
        info!("training seed {seed}");
        let (model, curve) = train(ModelGraph::build(spec.arch, &spec.model, seed)?, &data, &cfg, seed)?;
        let p = spec.output_dir.join(model_file_name(seed));
        save_model(&model, &p)?;
        model_paths.push(p);
        curves.push(curve);
    }
    let curves_path = spec.output_dir.join("loss_curves.csv");
    export_loss_curves(&curves, &curves_path)?;
    Ok(TrainOutcome {
        model_paths,
        curves_path,
        curves,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FuseReport {
    pub inputs: usize,
    pub max_abs_deviation: f32,
    /// Largest deviation divided by the largest training-graph output magnitude.
    pub max_rel_deviation: f32,
}

/// Fuses `graph` and compares both graphs on `inputs` random `(16, frames)` inputs.
pub fn fuse_with_report(graph: &ModelGraph, inputs: usize, frames: usize, seed: u64) -> Result<(ModelGraph, FuseReport)> {
    let fused = graph.fuse()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let c = graph.config.in_channels;
    let mut max_abs = 0f32;
    let mut max_ref = 0f32;
    for _ in 0..inputs {
        let x = Tensor::new(
            vec![c, frames],
            (0..c * frames).map(|_| StandardNormal.sample(&mut rng)).collect(),
        )?;
        let a = graph.forward_eval(&x)?;
        let b = fused.forward_eval(&x)?;
        for (u, v) in a.data().iter().zip(b.data()) {
            max_abs = max_abs.max((u - v).abs());
            max_ref = max_ref.max(u.abs());
        }
    }
    Ok((
        fused,
        FuseReport {
            inputs,
            max_abs_deviation: max_abs,
            max_rel_deviation: max_abs / max_ref.max(f32::MIN_POSITIVE),
        },
    ))
}

/// Clip bounds are set to this multiple of the largest calibration activation.
pub const CLIP_MARGIN: f32 = 1.05;
const CALIBRATION_UTTERANCES: usize = 50;

/// Fuses a training-graph file. With a calibration manifest, every clip gets
/// an upper bound from the first validation utterances; without one the
/// bounds stay open and the fused graph equals the training graph.
pub fn run_fuse(input: &Path, output: &Path, calibration: Option<&Path>) -> Result<FuseReport> {
    let graph = load_model(input)?;
    if graph.mode == GraphMode::Fused {
        return Err(Error::GraphMode(format!("{} is already fused", input.display())));
    }
    let (mut fused, report) = fuse_with_report(&graph, 20, 2 * graph.receptive_field(), 0)?;
    if let Some(manifest) = calibration {
        let manifest = Manifest::load(manifest)?;
        let mfcc = crate::features::Mfcc::new(MfccConfig::default())?;
        let feats: Vec<Tensor> = load_split(&manifest, Split::Val)?
            .iter()
            .take(CALIBRATION_UTTERANCES)
            .map(|u| mfcc.compute(&u.samples))
            .collect::<Result<_>>()?;
        info!("calibrating clip bounds on {} utterances", feats.len());
        crate::reparam::calibrate_clip_bounds(&mut fused, &feats, CLIP_MARGIN)?;
    }
    save_model(&fused, output)?;
    Ok(report)
}

fn inference_graph(graph: ModelGraph) -> Result<ModelGraph> {
    match graph.mode {
        GraphMode::Fused => Ok(graph),
        GraphMode::Train => graph.fuse(),
    }
}

fn load_test_sets(manifest: &Manifest) -> Result<(Vec<Utterance>, Vec<Utterance>)> {
    let pos = load_split(manifest, Split::TestPositive)?;
    let neg = load_split(manifest, Split::TestNegative)?;
    if pos.is_empty() {
        return Err(Error::Empty("manifest has no test-positive split".into()));
    }
    if neg.is_empty() {
        return Err(Error::Empty("manifest has no test-negative split".into()));
    }
    Ok((pos, neg))
}

/// Streams the test splits through the fused model and writes `det.csv` and
/// `summary.csv` into `out_dir`.
pub fn run_eval(model: &Path, manifest: &Path, out_dir: &Path, fa_target: f64) -> Result<MetricSummary> {
    let manifest = Manifest::load(manifest)?;
    let (pos, neg) = load_test_sets(&manifest)?;
    let graph = inference_graph(load_model(model)?)?;
    let sets = eval::score_test_sets(&graph, &pos, &neg, &MfccConfig::default())?;
    let (summary, curve) = eval::summarize(&sets, fa_target, DEFAULT_REFRACTORY)?;
    fs::create_dir_all(out_dir)?;
    eval::write_det_csv(&curve, &out_dir.join("det.csv"))?;
    eval::write_summary_csv(&summary, &out_dir.join("summary.csv"))?;
    Ok(summary)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub branches: usize,
    pub arch: Architecture,
    pub mean_val_loss: f64,
    pub val_losses: Vec<f32>,
    pub mean_frr_at_target: Option<f64>,
}

/// The architecture trained for a branch count: one branch is the plain
/// single-branch network, more branches use multi-branch blocks.
pub fn ablation_arch(branches: usize) -> Architecture {
    if branches <= 1 {
        Architecture::SingleBranch
    } else {
        Architecture::RepCnn
    }
}

/// Trains every branch count for every seed on the same data and budget.
/// With test sets, each model is also fused and scored at `fa_target`.
pub fn ablate(
    model: &RepCnnConfig,
    branch_counts: &[usize],
    data: &TrainData,
    cfg: &TrainConfig,
    test: Option<(&[Utterance], &[Utterance], f64)>,
) -> Result<(Vec<AblationRow>, Vec<(usize, LossCurve)>)> {
    if branch_counts.is_empty() || branch_counts.contains(&0) {
        return Err(Error::InvalidConfig("branch counts must be non-empty and >= 1".into()));
    }
    cfg.validate()?;
    let mut rows = Vec::new();
    let mut curves = Vec::new();
    for &n in branch_counts {
        let arch = ablation_arch(n);
        let mcfg = RepCnnConfig {
            num_branches: n,
            ..model.clone()
        };
        let mut vals = Vec::new();
        let mut frrs = Vec::new();
        for &seed in &cfg.seeds {
            info!("ablation: {n} branch(es), seed {seed}");
            let (trained, curve) = train(ModelGraph::build(arch, &mcfg, seed)?, data, cfg, seed)?;
            vals.push(curve.final_val_loss().ok_or_else(|| Error::Empty("no validation loss".into()))?);
            if let Some((pos, neg, target)) = test {
                let sets = eval::score_test_sets(&trained.fuse()?, pos, neg, &data.mfcc)?;
                frrs.push(eval::summarize(&sets, target, DEFAULT_REFRACTORY)?.0.frr_at_target);
            }
            curves.push((n, curve));
        }
        rows.push(AblationRow {
            branches: n,
            arch,
            mean_val_loss: vals.iter().map(|&v| v as f64).sum::<f64>() / vals.len() as f64,
            val_losses: vals,
            mean_frr_at_target: (!frrs.is_empty()).then(|| frrs.iter().sum::<f64>() / frrs.len() as f64),
        });
    }
    Ok((rows, curves))
}

/// Runs [`ablate`] on the spec's manifest and writes `ablation.csv` and
/// `ablation_loss_curves.csv` (seed column offset by `1000 * branches`).
pub fn run_ablation(spec: &ExperimentSpec, branch_counts: &[usize], fa_target: f64) -> Result<Vec<AblationRow>> {
    spec.validate()?;
    let manifest = Manifest::load(&spec.manifest)?;
    let data = load_train_data(&manifest)?;
    let test = load_test_sets(&manifest).ok();
    let test_ref = test.as_ref().map(|(p, n)| (p.as_slice(), n.as_slice(), fa_target));
    let (rows, curves) = ablate(&spec.model, branch_counts, &data, &spec.effective_train(), test_ref)?;
    fs::create_dir_all(&spec.output_dir)?;
    write_ablation_csv(&rows, &spec.output_dir.join("ablation.csv"))?;
    let tagged: Vec<LossCurve> = curves
        .into_iter()
        .map(|(n, c)| LossCurve {
            seed: n as u64 * 1000 + c.seed,
            ..c
        })
        .collect();
    export_loss_curves(&tagged, &spec.output_dir.join("ablation_loss_curves.csv"))?;
    Ok(rows)
}

pub fn write_ablation_csv(rows: &[AblationRow], path: &Path) -> Result<()> {
    let mut w = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_path(path)
        .map_err(|e| Error::Data(e.to_string()))?;
    w.write_record(["branches", "arch", "mean_val_loss", "val_losses", "mean_frr_at_target"])
        .map_err(|e| Error::Data(e.to_string()))?;
    for r in rows {
        let arch = match r.arch {
            Architecture::RepCnn => "rep_cnn",
            Architecture::SingleBranch => "single_branch",
        };
        let vals: Vec<String> = r.val_losses.iter().map(|v| v.to_string()).collect();
        w.write_record([
            r.branches.to_string(),
            arch.to_string(),
            r.mean_val_loss.to_string(),
            vals.join(";"),
            r.mean_frr_at_target.map_or(String::new(), |v| v.to_string()),
        ])
        .map_err(|e| Error::Data(e.to_string()))?;
    }
    w.flush()?;
    Ok(())
}

/// Benchmarks a training-graph model file against its fusion.
pub fn run_bench(model: &Path, out: &Path, input_seconds: f64, cfg: &BenchConfig) -> Result<BenchReport> {
    let train_graph = load_trainable(model)?;
    let fused = train_graph.fuse()?;
    let report = eval::bench(&train_graph, &fused, input_seconds, cfg)?;
    report.write_csv(out)?;
    Ok(report)
}

pub const DEFAULT_FA: f64 = DEFAULT_FA_TARGET;
