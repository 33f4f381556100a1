//! The `argb` command line: data preparation, autoencoder training and
//! evaluation, the restoration demo, analysis commands and reports.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use argb_nn::Tensor;
use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use crate::analysis::{
    box_blur, decompose, expert_map, export_embeddings, invert, maximize_filter, metric_sweep, mix_embeddings,
    nullspace_invariance, self_reference, write_sweep_csv, InversionConfig, InversionInit, MaxFilterConfig,
};
use crate::checkpoint::Checkpoint;
use crate::data::{
    extract_patches, grid_origins, list_images, synth_patch, synth_patches, Dataset, PatchStore, SynthKind,
};
use crate::error::{ArgbError, Result};
use crate::io::{ensure_parent, plot_series, write_csv, Image};
use crate::losses::{loss_and_grad, render_histograms, GradStats, LossConfig, LossKind, LossSpec, Space};
use crate::model::ArgbModel;
use crate::restoration::{degrade, evaluate, psnr, train_restorer, write_triptychs, RestoreTrainConfig, ValidationSet};
use crate::training::{
    continue_training, evaluate_reconstruction, read_log, AeTrainConfig, AeTrainer, BalanceForm, TrainOutputs,
};

/// Environment variable naming the default output root.
pub const OUT_ENV: &str = "ARGB_OUT";
const DEFAULT_OUT_ROOT: &str = "runs";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    /// Source photographs for `prepare-data`.
    pub src: Option<PathBuf>,
    pub size: usize,
    pub stride: usize,
    /// Patch stores (directories with a `manifest.jsonl`) used for training.
    pub stores: Vec<PathBuf>,
    /// Directories of photographs cropped on the fly with `size`/`stride`.
    pub image_dirs: Vec<PathBuf>,
    /// Synthetic patches of each kind in `synth_kinds` added to training.
    pub synth_per_kind: usize,
    pub synth_size: usize,
    pub synth_kinds: Vec<SynthKind>,
    /// Directories of held-out photographs, tiled into `eval_tile` squares.
    pub heldout: Vec<PathBuf>,
    pub eval_tile: usize,
    pub seed: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            src: None,
            size: 480,
            stride: 240,
            stores: Vec::new(),
            image_dirs: Vec::new(),
            synth_per_kind: 0,
            synth_size: 256,
            synth_kinds: vec![SynthKind::Gradients, SynthKind::Checker, SynthKind::Noise],
            heldout: Vec::new(),
            eval_tile: 64,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AnalysisConfig {
    pub inversion: InversionConfig,
    pub max_filter: MaxFilterConfig,
    pub sigmas: Vec<f64>,
    pub n_samples: usize,
    pub subsample: usize,
    pub bins: usize,
    /// Degradation used by `grad-stats`.
    pub grad_sigma: f64,
    pub grad_kind: LossKind,
    pub blur: usize,
    pub nullspace_draws: usize,
    pub seed: u64,
}

impl Default for AnalysisConfig {
    fn default() -> Self {
        Self {
            inversion: InversionConfig::default(),
            max_filter: MaxFilterConfig::default(),
            sigmas: vec![0.0, 0.02, 0.05, 0.1],
            n_samples: 100,
            subsample: 4,
            bins: 101,
            grad_sigma: 0.1,
            grad_kind: LossKind::L1,
            blur: 9,
            nullspace_draws: 100,
            seed: 0,
        }
    }
}

/// Configuration of every command. Unknown keys are rejected.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub data: DataConfig,
    pub autoencoder: AeTrainConfig,
    pub loss: LossConfig,
    pub restorer: RestoreTrainConfig,
    pub analysis: AnalysisConfig,
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let cfg: Self = serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            ArgbError::config(path, e.into_inner().to_string())
        })?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| ArgbError::missing(path, e.to_string()))?;
        Self::from_json(&text)
    }

    pub fn validate(&self) -> Result<()> {
        let d = &self.data;
        for (key, ok) in [
            ("data.size", d.size >= 1),
            ("data.stride", d.stride >= 1),
            ("data.synth_size", d.synth_size >= 1),
            ("data.eval_tile", d.eval_tile >= 1),
        ] {
            if !ok {
                return Err(ArgbError::config(key, "must be at least 1"));
            }
        }
        self.autoencoder.validate()?;
        self.loss.validate()?;
        self.restorer_config().validate()?;
        let a = &self.analysis;
        if a.inversion.steps == 0 {
            return Err(ArgbError::config("analysis.inversion.steps", "must be at least 1"));
        }
        if !(a.inversion.lr > 0.0) {
            return Err(ArgbError::config("analysis.inversion.lr", "must be positive"));
        }
        if let Some(s) = a.sigmas.iter().find(|s| !(**s >= 0.0 && s.is_finite())) {
            return Err(ArgbError::config("analysis.sigmas", format!("sigma {s} is negative")));
        }
        for (key, ok) in [
            ("analysis.n_samples", a.n_samples >= 1),
            ("analysis.subsample", a.subsample >= 1),
            ("analysis.bins", a.bins >= 1),
            ("analysis.blur", a.blur >= 1),
            ("analysis.max_filter.size", a.max_filter.size >= 1),
            ("analysis.max_filter.steps", a.max_filter.steps >= 1),
        ] {
            if !ok {
                return Err(ArgbError::config(key, "must be at least 1"));
            }
        }
        Ok(())
    }

    pub fn restorer_config(&self) -> RestoreTrainConfig {
        RestoreTrainConfig {
            loss: self.loss.clone(),
            ..self.restorer.clone()
        }
    }

    /// SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(bytes))
    }
}

/// Per-run record written as `manifest.json` next to the outputs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub config_hash: String,
    pub seed: u64,
    pub config: RunConfig,
    pub inputs: BTreeMap<String, String>,
    pub files: Vec<String>,
}

struct Outputs {
    dir: PathBuf,
    files: Vec<PathBuf>,
    inputs: BTreeMap<String, String>,
}

impl Outputs {
    fn new(dir: PathBuf) -> Result<Self> {
        fs::create_dir_all(&dir)?;
        Ok(Self {
            dir,
            files: Vec::new(),
            inputs: BTreeMap::new(),
        })
    }

    /// Registers and returns `dir/name`.
    fn file(&mut self, name: &str) -> PathBuf {
        let p = self.dir.join(name);
        self.files.push(p.clone());
        p
    }

    fn input(&mut self, key: &str, path: &Path) {
        self.inputs.insert(key.to_string(), path.display().to_string());
    }

    fn json(&mut self, name: &str, value: &Value) -> Result<()> {
        let p = self.file(name);
        ensure_parent(&p)?;
        fs::write(&p, serde_json::to_string_pretty(value)? + "\n")?;
        Ok(())
    }

    fn finish(self, command: &str, cfg: &RunConfig, seed: u64) -> Result<PathBuf> {
        let mut files: Vec<String> = self
            .files
            .iter()
            .map(|p| p.strip_prefix(&self.dir).unwrap_or(p).display().to_string())
            .collect();
        files.sort();
        files.dedup();
        let manifest = RunManifest {
            command: command.to_string(),
            config_hash: cfg.hash(),
            seed,
            config: cfg.clone(),
            inputs: self.inputs,
            files,
        };
        let path = self.dir.join("manifest.json");
        fs::write(&path, serde_json::to_string_pretty(&manifest)? + "\n")?;
        Ok(self.dir)
    }
}

#[derive(Debug, Parser)]
#[command(
    name = "argb",
    version,
    about = "Augmented-RGB encoder training, analysis and restoration demo"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct Common {
    /// JSON run configuration.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Output directory (default: $ARGB_OUT/<command> or runs/<command>).
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Crop photographs into a patch store.
    PrepareData {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        src: Option<PathBuf>,
        #[arg(long)]
        size: Option<usize>,
        #[arg(long)]
        stride: Option<usize>,
    },
    /// Generate a synthetic patch store.
    SynthData {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_parser = parse_synth_kind)]
        kind: SynthKind,
        #[arg(long, default_value_t = 100)]
        count: usize,
        #[arg(long)]
        size: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train the autoencoder.
    TrainArgb {
        #[command(flatten)]
        common: Common,
        /// Continue from a checkpoint written by an earlier run.
        #[arg(long)]
        resume: Option<PathBuf>,
        #[arg(long)]
        steps: Option<u64>,
        #[arg(long)]
        experts: Option<usize>,
        #[arg(long)]
        batch: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
        #[arg(long)]
        noise_std: Option<f64>,
        #[arg(long, value_parser = parse_balance_form)]
        balance_form: Option<BalanceForm>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Reconstruction quality of a checkpoint on held-out images.
    EvalArgb {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        ckpt: Option<PathBuf>,
        /// Directory of evaluation images (replaces data.heldout).
        #[arg(long)]
        images: Option<PathBuf>,
    },
    /// Train the denoising demo with an RGB or aRGB loss.
    TrainRestorer {
        #[command(flatten)]
        common: Common,
        /// Autoencoder checkpoint, required for aRGB losses.
        #[arg(long)]
        ckpt: Option<PathBuf>,
        #[arg(long, value_parser = parse_space)]
        space: Option<Space>,
        #[arg(long, value_parser = parse_kind)]
        kind: Option<LossKind>,
        #[arg(long)]
        steps: Option<u64>,
        #[arg(long)]
        batch: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
        #[arg(long)]
        sigma: Option<f64>,
        /// Infinity-norm gradient clip; 0 disables it.
        #[arg(long)]
        grad_clip: Option<f64>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Analyses of a trained autoencoder.
    Analyze {
        #[command(subcommand)]
        command: AnalyzeCommand,
    },
    /// Summarise finished runs below a directory.
    Report {
        #[command(flatten)]
        common: Common,
        /// Directory searched for run manifests (default: the output root).
        #[arg(long)]
        runs: Option<PathBuf>,
    },
}

#[derive(Debug, Clone, Args)]
pub struct AnalyzeArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub ckpt: Option<PathBuf>,
    #[arg(long)]
    pub image: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Subcommand)]
pub enum AnalyzeCommand {
    /// Split an embedding into decoder-visible and nullspace parts.
    Decompose {
        #[command(flatten)]
        args: AnalyzeArgs,
    },
    /// Recover an image from its own embedding by gradient descent.
    Invert {
        #[command(flatten)]
        args: AnalyzeArgs,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
        /// Start from the input image instead of uniform noise.
        #[arg(long)]
        from_input: bool,
    },
    /// Invert the mix of one image's parallel and another's nullspace part.
    Mix {
        #[command(flatten)]
        args: AnalyzeArgs,
        #[arg(long)]
        image2: Option<PathBuf>,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
    },
    /// Per-pixel diagonal of A times the encoder Jacobian.
    SelfRef {
        #[command(flatten)]
        args: AnalyzeArgs,
    },
    /// RGB vs aRGB distance under additive noise.
    MetricSweep {
        #[command(flatten)]
        args: AnalyzeArgs,
        #[arg(long, value_delimiter = ',')]
        sigmas: Option<Vec<f64>>,
        #[arg(long)]
        samples: Option<usize>,
    },
    /// Router assignment of every pixel.
    ExpertMap {
        #[command(flatten)]
        args: AnalyzeArgs,
    },
    /// Per-pixel embeddings as CSV for external embedding tools.
    ExportEmbeddings {
        #[command(flatten)]
        args: AnalyzeArgs,
        #[arg(long)]
        subsample: Option<usize>,
    },
    /// Gradient histograms of an RGB and an aRGB loss on a noisy/clean pair.
    GradStats {
        #[command(flatten)]
        args: AnalyzeArgs,
        #[arg(long)]
        sigma: Option<f64>,
        #[arg(long, value_parser = parse_kind)]
        kind: Option<LossKind>,
        #[arg(long)]
        bins: Option<usize>,
    },
    /// Images that maximally activate expert channels.
    MaxFilter {
        #[command(flatten)]
        args: AnalyzeArgs,
        #[arg(long, default_value_t = 0)]
        expert: usize,
        #[arg(long, value_delimiter = ',', default_value = "0,1,2,3")]
        channels: Vec<usize>,
        #[arg(long)]
        steps: Option<usize>,
    },
}

fn parse_synth_kind(s: &str) -> std::result::Result<SynthKind, String> {
    s.parse().map_err(|e: ArgbError| e.to_string())
}

fn parse_kind(s: &str) -> std::result::Result<LossKind, String> {
    s.parse().map_err(|e: ArgbError| e.to_string())
}

fn parse_space(s: &str) -> std::result::Result<Space, String> {
    match s {
        "rgb" => Ok(Space::Rgb),
        "argb" => Ok(Space::Argb),
        _ => Err(format!("unknown space `{s}` (expected rgb or argb)")),
    }
}

fn parse_balance_form(s: &str) -> std::result::Result<BalanceForm, String> {
    match s {
        "switch" => Ok(BalanceForm::Switch),
        "printed" => Ok(BalanceForm::Printed),
        _ => Err(format!("unknown balance form `{s}` (expected switch or printed)")),
    }
}

/// Parses `args` (including the program name) and runs the command. Returns
/// the process exit code: 0 on success, 1 for configuration errors, 2 for
/// runtime failures and 3 for missing inputs.
pub fn run<I, S>(args: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match execute(cli.command) {
        Ok(dir) => {
            println!("{}", dir.display());
            0
        }
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn out_dir(common: &Common, command: &str) -> PathBuf {
    common.out.clone().unwrap_or_else(|| out_root().join(command))
}

fn out_root() -> PathBuf {
    std::env::var_os(OUT_ENV)
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from(DEFAULT_OUT_ROOT))
}

fn load_config(common: &Common) -> Result<RunConfig> {
    match &common.config {
        Some(p) => RunConfig::load(p),
        None => Ok(RunConfig::default()),
    }
}

fn require<'a>(v: &'a Option<PathBuf>, flag: &str) -> Result<&'a Path> {
    v.as_deref()
        .ok_or_else(|| ArgbError::config(flag, format!("this command requires {flag}")))
}

fn load_image(path: &Path) -> Result<Image> {
    if !path.is_file() {
        return Err(ArgbError::missing(path, "image not found"));
    }
    Image::load(path)
}

fn load_model(path: &Path) -> Result<ArgbModel<f32>> {
    Ok(Checkpoint::load(path)?.model)
}

/// Training patches described by the data section.
pub fn build_dataset(cfg: &DataConfig) -> Result<Dataset> {
    let mut patches = Vec::new();
    for dir in &cfg.stores {
        patches.extend(PatchStore::open(dir)?.load_all()?);
    }
    for dir in &cfg.image_dirs {
        for path in list_images(dir)? {
            let img = Image::load(&path)?;
            for (y, x) in grid_origins(img.height(), img.width(), cfg.size, cfg.stride) {
                patches.push(img.crop(y, x, cfg.size, cfg.size)?);
            }
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    for &kind in &cfg.synth_kinds {
        for _ in 0..cfg.synth_per_kind {
            patches.push(synth_patch(kind, cfg.synth_size, crate::data::CHECKER_CELL, &mut rng));
        }
    }
    if patches.is_empty() {
        return Err(ArgbError::config(
            "data",
            "no training data; set data.stores, data.image_dirs or data.synth_per_kind",
        ));
    }
    Ok(Dataset::new(patches))
}

/// Non-overlapping `eval_tile` squares of every image in `dirs`.
pub fn heldout_tiles(dirs: &[PathBuf], tile: usize) -> Result<Vec<Image>> {
    let mut out = Vec::new();
    for dir in dirs {
        for path in list_images(dir)? {
            let img = Image::load(&path)?;
            for (y, x) in grid_origins(img.height(), img.width(), tile, tile) {
                out.push(img.crop(y, x, tile, tile)?);
            }
        }
    }
    Ok(out)
}

fn execute(command: Command) -> Result<PathBuf> {
    match command {
        Command::PrepareData {
            common,
            src,
            size,
            stride,
        } => {
            let mut cfg = load_config(&common)?;
            cfg.data.src = src.or(cfg.data.src);
            cfg.data.size = size.unwrap_or(cfg.data.size);
            cfg.data.stride = stride.unwrap_or(cfg.data.stride);
            cfg.validate()?;
            let src = require(&cfg.data.src, "--src")?.to_path_buf();
            let mut out = Outputs::new(out_dir(&common, "prepare-data"))?;
            out.input("src", &src);
            let store = extract_patches(&src, cfg.data.size, cfg.data.stride, &out.dir)?;
            for r in store.records() {
                out.file(&r.file);
            }
            out.file(crate::data::MANIFEST_FILE);
            log::info!("wrote {} patches", store.len());
            let seed = cfg.data.seed;
            out.finish("prepare-data", &cfg, seed)
        }
        Command::SynthData {
            common,
            kind,
            count,
            size,
            seed,
        } => {
            let mut cfg = load_config(&common)?;
            cfg.data.synth_size = size.unwrap_or(cfg.data.synth_size);
            cfg.data.seed = seed.unwrap_or(cfg.data.seed);
            cfg.validate()?;
            let mut out = Outputs::new(out_dir(&common, "synth-data"))?;
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.data.seed);
            let store = synth_patches(kind, count, cfg.data.synth_size, &mut rng, &out.dir)?;
            for r in store.records() {
                out.file(&r.file);
            }
            out.file(crate::data::MANIFEST_FILE);
            let seed = cfg.data.seed;
            out.finish("synth-data", &cfg, seed)
        }
        Command::TrainArgb {
            common,
            resume,
            steps,
            experts,
            batch,
            lr,
            noise_std,
            balance_form,
            seed,
        } => {
            let mut cfg = load_config(&common)?;
            let ae = &mut cfg.autoencoder;
            ae.total_steps = steps.unwrap_or(ae.total_steps);
            ae.num_experts = experts.unwrap_or(ae.num_experts);
            ae.batch_size = batch.unwrap_or(ae.batch_size);
            ae.initial_lr = lr.unwrap_or(ae.initial_lr);
            ae.noise_std = noise_std.unwrap_or(ae.noise_std);
            ae.balance_form = balance_form.unwrap_or(ae.balance_form);
            ae.seed = seed.unwrap_or(ae.seed);
            cfg.validate()?;
            train_argb(&common, &cfg, resume.as_deref())
        }
        Command::EvalArgb { common, ckpt, images } => {
            let mut cfg = load_config(&common)?;
            if let Some(dir) = images {
                cfg.data.heldout = vec![dir];
            }
            cfg.validate()?;
            let ckpt = require(&ckpt, "--ckpt")?;
            eval_argb(&common, &cfg, ckpt)
        }
        Command::TrainRestorer {
            common,
            ckpt,
            space,
            kind,
            steps,
            batch,
            lr,
            sigma,
            grad_clip,
            seed,
        } => {
            let mut cfg = load_config(&common)?;
            cfg.loss.space = space.unwrap_or(cfg.loss.space);
            cfg.loss.kind = kind.unwrap_or(cfg.loss.kind);
            let r = &mut cfg.restorer;
            r.steps = steps.unwrap_or(r.steps);
            r.batch = batch.unwrap_or(r.batch);
            r.lr = lr.unwrap_or(r.lr);
            r.sigma = sigma.unwrap_or(r.sigma);
            r.grad_clip = grad_clip.or(r.grad_clip);
            r.seed = seed.unwrap_or(r.seed);
            cfg.validate()?;
            restorer(&common, &cfg, ckpt.as_deref())
        }
        Command::Analyze { command } => analyze(command),
        Command::Report { common, runs } => {
            let cfg = load_config(&common)?;
            let root = runs.unwrap_or_else(out_root);
            report(&common, &cfg, &root)
        }
    }
}

fn train_argb(common: &Common, cfg: &RunConfig, resume: Option<&Path>) -> Result<PathBuf> {
    let data = build_dataset(&cfg.data)?;
    let mut out = Outputs::new(out_dir(common, "train-argb"))?;
    let trainer = match resume {
        Some(p) => {
            out.input("resume", p);
            let mut trainer = AeTrainer::resume(Checkpoint::load(p)?)?;
            trainer.config.total_steps = cfg.autoencoder.total_steps;
            if trainer.config != cfg.autoencoder {
                return Err(ArgbError::config(
                    "autoencoder",
                    "resumed checkpoint was trained with a different configuration",
                ));
            }
            // The log continues from the checkpoint's step.
            let prev = p.with_file_name("train_log.jsonl");
            if out.dir.join("train_log.jsonl") != prev {
                if prev.is_file() {
                    let records: Vec<_> = read_log(&prev)?
                        .into_iter()
                        .filter(|r| r.step < trainer.step_count())
                        .collect();
                    let text: String = records
                        .iter()
                        .map(|r| serde_json::to_string(r).map(|s| s + "\n"))
                        .collect::<std::result::Result<_, _>>()?;
                    fs::write(out.dir.join("train_log.jsonl"), text)?;
                }
            }
            trainer
        }
        None => AeTrainer::new(cfg.autoencoder.clone())?,
    };
    let outputs = TrainOutputs {
        log: Some(out.file("train_log.jsonl")),
        snapshot_dir: Some(out.dir.clone()),
    };
    let (ck, records) = continue_training(trainer, &data, &outputs)?;
    ck.save(&out.file("argb.ckpt"))?;
    let last = records.last();
    let mut summary = json!({
        "steps": cfg.autoencoder.total_steps,
        "param_hash": ck.model.param_hash(),
        "final_l_recon": last.map(|r| r.l_recon),
        "final_l_balance": last.map(|r| r.l_balance),
        "training_patches": data.len(),
    });
    if !cfg.data.heldout.is_empty() {
        let tiles = heldout_tiles(&cfg.data.heldout, cfg.data.eval_tile)?;
        if !tiles.is_empty() {
            summary["heldout_psnr"] = json!(evaluate_reconstruction(&ck.model, &tiles)?.mean_psnr);
        }
    }
    let log = read_log(&out.dir.join("train_log.jsonl"))?;
    let series: Vec<(f64, f64)> = log.iter().map(|r| (r.step as f64, r.l_recon)).collect();
    plot_series(&out.file("train_loss.png"), &[(&smooth(&series, 100), [20, 60, 200])])?;
    out.json("summary.json", &summary)?;
    let seed = cfg.autoencoder.seed;
    out.finish("train-argb", cfg, seed)
}

/// Trailing moving average over `window` points.
fn smooth(series: &[(f64, f64)], window: usize) -> Vec<(f64, f64)> {
    let mut out = Vec::with_capacity(series.len());
    let mut acc = 0.0;
    for (i, &(x, y)) in series.iter().enumerate() {
        acc += y;
        if i >= window {
            acc -= series[i - window].1;
        }
        out.push((x, acc / (i + 1).min(window) as f64));
    }
    out
}

fn eval_argb(common: &Common, cfg: &RunConfig, ckpt: &Path) -> Result<PathBuf> {
    let model = load_model(ckpt)?;
    let mut out = Outputs::new(out_dir(common, "eval-argb"))?;
    out.input("ckpt", ckpt);
    if cfg.data.heldout.is_empty() {
        return Err(ArgbError::config("data.heldout", "no evaluation images; pass --images"));
    }
    let tiles = heldout_tiles(&cfg.data.heldout, cfg.data.eval_tile)?;
    if tiles.is_empty() {
        return Err(ArgbError::missing(
            &cfg.data.heldout[0],
            "no images large enough for one tile",
        ));
    }
    let stats = evaluate_reconstruction(&model, &tiles)?;
    let rows: Vec<Vec<f64>> = stats
        .per_image_psnr
        .iter()
        .enumerate()
        .map(|(i, p)| vec![i as f64, *p])
        .collect();
    write_csv(&out.file("eval.csv"), &["tile", "psnr"], &rows)?;
    for dir in &cfg.data.heldout {
        for path in list_images(dir)? {
            let img = Image::load(&path)?;
            let rec = model.decode(&model.encode(img.tensor())?)?;
            let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("image");
            Image::from_clamped(rec)?.save_png(&out.file(&format!("recon/{stem}.png")))?;
        }
    }
    out.json(
        "eval.json",
        &json!({
            "tiles": tiles.len(),
            "tile_size": cfg.data.eval_tile,
            "mean_psnr": stats.mean_psnr,
            "mean_abs_diff_255": stats.mean_abs_diff_255,
        }),
    )?;
    let seed = cfg.autoencoder.seed;
    out.finish("eval-argb", cfg, seed)
}

/// Seed offset separating the validation noise from the training stream.
const VALIDATION_SEED_SALT: u64 = 0x7a11_da7e;

fn restorer(common: &Common, cfg: &RunConfig, ckpt: Option<&Path>) -> Result<PathBuf> {
    let rcfg = cfg.restorer_config();
    let encoder = match (rcfg.loss.space, ckpt) {
        (Space::Argb, Some(p)) => Some(load_model(p)?),
        (Space::Argb, None) => return Err(ArgbError::config("--ckpt", "aRGB losses need an encoder checkpoint")),
        (Space::Rgb, _) => None,
    };
    let data = build_dataset(&cfg.data)?;
    let mut out = Outputs::new(out_dir(common, "train-restorer"))?;
    if let (Some(p), Some(_)) = (ckpt, &encoder) {
        out.input("ckpt", p);
    }
    let tiles = heldout_tiles(&cfg.data.heldout, cfg.data.eval_tile)?;
    let val = if tiles.is_empty() {
        None
    } else {
        Some(ValidationSet::new(
            &tiles,
            rcfg.sigma,
            rcfg.seed ^ VALIDATION_SEED_SALT,
        )?)
    };
    let log_path = out.file("restore_log.jsonl");
    let run = train_restorer(&rcfg, encoder.as_ref(), &data, val.as_ref(), Some(&log_path))?;
    run.model.save(
        &out.file("restorer.ckpt"),
        json!({ "loss": rcfg.loss, "steps": rcfg.steps }),
    )?;
    let mut metrics = json!({
        "loss": rcfg.loss,
        "final_loss": run.log.last().map(|r| r.loss),
        "grad_clip": rcfg.effective_grad_clip(),
        "encoder_hash_before": run.encoder_hash_before,
        "encoder_hash_after": run.encoder_hash_after,
    });
    if let Some(v) = &val {
        let m = evaluate(&run.model, v)?;
        metrics["val_psnr"] = json!(m.psnr);
        metrics["val_ssim"] = json!(m.ssim);
        metrics["noisy_psnr"] = json!(m.input_psnr);
        for p in write_triptychs(&run.model, v, &out.dir.join("triptychs"))? {
            out.files.push(p);
        }
    }
    out.json("metrics.json", &metrics)?;
    let seed = rcfg.seed;
    out.finish("train-restorer", cfg, seed)
}

struct AnalyzeCtx {
    cfg: RunConfig,
    model: ArgbModel<f32>,
    image: Option<Image>,
    out: Outputs,
    rng: ChaCha8Rng,
}

impl AnalyzeCtx {
    fn new(args: &AnalyzeArgs, name: &str, edit: impl FnOnce(&mut RunConfig)) -> Result<Self> {
        let mut cfg = load_config(&args.common)?;
        cfg.analysis.seed = args.seed.unwrap_or(cfg.analysis.seed);
        edit(&mut cfg);
        cfg.validate()?;
        let ckpt = require(&args.ckpt, "--ckpt")?;
        let model = load_model(ckpt)?;
        let image = args.image.as_deref().map(load_image).transpose()?;
        let mut out = Outputs::new(out_dir(&args.common, &format!("analyze-{name}")))?;
        out.input("ckpt", ckpt);
        if let Some(p) = &args.image {
            out.input("image", p);
        }
        let rng = ChaCha8Rng::seed_from_u64(cfg.analysis.seed);
        Ok(Self {
            cfg,
            model,
            image,
            out,
            rng,
        })
    }

    fn image(&self) -> Result<&Image> {
        self.image
            .as_ref()
            .ok_or_else(|| ArgbError::config("--image", "this command requires --image"))
    }

    fn finish(self, name: &str) -> Result<PathBuf> {
        let seed = self.cfg.analysis.seed;
        self.out.finish(&format!("analyze {name}"), &self.cfg, seed)
    }
}

fn trace_csv(path: &Path, trace: &[f64]) -> Result<()> {
    let rows: Vec<Vec<f64>> = trace.iter().enumerate().map(|(i, v)| vec![i as f64, *v]).collect();
    write_csv(path, &["step", "value"], &rows)
}

fn analyze(command: AnalyzeCommand) -> Result<PathBuf> {
    match command {
        AnalyzeCommand::Decompose { args } => {
            let mut ctx = AnalyzeCtx::new(&args, "decompose", |_| {})?;
            let x = ctx.image()?.tensor().clone();
            let xi = ctx.model.encode(&x)?;
            let eff = ctx.model.effective_decoder();
            let d = decompose(&xi, &eff)?;
            let sum_err = d
                .xi_par
                .tensor()
                .zip_map(d.xi_perp.tensor(), |a, b| a + b)
                .max_abs_diff(xi.tensor());
            let annihilation = eff
                .apply(d.xi_perp.tensor())?
                .max_abs_diff(&eff.apply(&Tensor::zeros(xi.tensor().shape()))?);
            let [_, c, h, w] = xi.tensor().shape();
            let mut ortho = 0.0f64;
            for y in 0..h {
                for xx in 0..w {
                    let dot: f64 = (0..c)
                        .map(|ch| {
                            f64::from(d.xi_par.tensor().at(0, ch, y, xx))
                                * f64::from(d.xi_perp.tensor().at(0, ch, y, xx))
                        })
                        .sum();
                    ortho = ortho.max(dot.abs());
                }
            }
            let normal = rand_distr::StandardNormal;
            let mut worst = 0.0f64;
            for _ in 0..ctx.cfg.analysis.nullspace_draws {
                let data = (0..xi.tensor().len())
                    .map(|_| rand_distr::Distribution::<f32>::sample(&normal, &mut ctx.rng))
                    .collect();
                let zeta = Tensor::new(xi.tensor().shape(), data);
                worst = worst.max(nullspace_invariance(&ctx.model, &xi, &zeta)?);
            }
            let par_img = ctx.model.decode(&d.xi_par)?;
            Image::from_clamped(par_img)?.save_png(&ctx.out.file("decoded_parallel.png"))?;
            let norm = |t: &Tensor<f32>| t.data().iter().map(|v| f64::from(*v).powi(2)).sum::<f64>().sqrt();
            let sidecar = json!({
                "rank": eff.rank,
                "embedding_norm": norm(xi.tensor()),
                "parallel_norm": norm(d.xi_par.tensor()),
                "perpendicular_norm": norm(d.xi_perp.tensor()),
                "sum_max_abs_error": f64::from(sum_err),
                "annihilation_max_abs": f64::from(annihilation),
                "orthogonality_max_abs": ortho,
                "nullspace_draws": ctx.cfg.analysis.nullspace_draws,
                "nullspace_max_change": worst,
            });
            ctx.out.json("decompose.json", &sidecar)?;
            ctx.finish("decompose")
        }
        AnalyzeCommand::Invert {
            args,
            steps,
            lr,
            from_input,
        } => {
            let mut ctx = AnalyzeCtx::new(&args, "invert", |c| {
                let inv = &mut c.analysis.inversion;
                inv.steps = steps.unwrap_or(inv.steps);
                inv.lr = lr.unwrap_or(inv.lr);
                if from_input {
                    inv.init = InversionInit::Provided;
                }
            })?;
            let x = ctx.image()?.tensor().clone();
            let target = ctx.model.encode(&x)?;
            let icfg = ctx.cfg.analysis.inversion.clone();
            let inv = invert(&ctx.model, &target, &icfg, Some(&x), &mut ctx.rng)?;
            Image::from_clamped(inv.image.clone())?.save_png(&ctx.out.file("inversion.png"))?;
            trace_csv(&ctx.out.file("inversion_trace.csv"), &inv.trace)?;
            let sidecar = json!({
                "inversion": icfg,
                "initial_loss": inv.trace[0],
                "final_loss": inv.trace[inv.trace.len() - 1],
                "psnr_vs_input": psnr(&inv.image.map(|v| v.clamp(0.0, 1.0)), &x),
            });
            ctx.out.json("invert.json", &sidecar)?;
            ctx.finish("invert")
        }
        AnalyzeCommand::Mix {
            args,
            image2,
            steps,
            lr,
        } => {
            let mut ctx = AnalyzeCtx::new(&args, "mix", |c| {
                let inv = &mut c.analysis.inversion;
                inv.steps = steps.unwrap_or(inv.steps);
                inv.lr = lr.unwrap_or(inv.lr);
            })?;
            let p2 = require(&image2, "--image2")?;
            ctx.out.input("image2", p2);
            let x1 = ctx.image()?.tensor().clone();
            let x2 = load_image(p2)?.into_tensor();
            let eff = ctx.model.effective_decoder();
            let xi = mix_embeddings(&ctx.model.encode(&x1)?, &ctx.model.encode(&x2)?, &eff)?;
            let icfg = ctx.cfg.analysis.inversion.clone();
            let start = (icfg.init == InversionInit::Provided).then_some(&x1);
            let inv = invert(&ctx.model, &xi, &icfg, start, &mut ctx.rng)?;
            let result = inv.image.map(|v| v.clamp(0.0, 1.0));
            Image::from_clamped(result.clone())?.save_png(&ctx.out.file("mix_inversion.png"))?;
            trace_csv(&ctx.out.file("mix_trace.csv"), &inv.trace)?;
            let k = ctx.cfg.analysis.blur;
            let br = box_blur(&result, k);
            let sidecar = json!({
                "inversion": icfg,
                "blur": k,
                "blur_psnr_vs_image": psnr(&br, &box_blur(&x1, k)),
                "blur_psnr_vs_image2": psnr(&br, &box_blur(&x2, k)),
                "final_loss": inv.trace[inv.trace.len() - 1],
            });
            ctx.out.json("mix.json", &sidecar)?;
            ctx.finish("mix")
        }
        AnalyzeCommand::SelfRef { args } => {
            let mut ctx = AnalyzeCtx::new(&args, "self-ref", |_| {})?;
            let x = ctx.image()?.tensor().clone();
            let map = self_reference(&ctx.model, &x)?;
            let rows: Vec<Vec<f64>> = map
                .values
                .iter()
                .enumerate()
                .map(|(i, v)| vec![(i / map.width) as f64, (i % map.width) as f64, *v])
                .collect();
            write_csv(&ctx.out.file("self_ref.csv"), &["y", "x", "value"], &rows)?;
            let peak = map.max().max(1e-12);
            let heat = Tensor::from_fn([1, 3, map.height, map.width], |_, _, y, xx| {
                (map.values[y * map.width + xx] / peak) as f32
            });
            Image::from_clamped(heat)?.save_png(&ctx.out.file("self_ref.png"))?;
            let sidecar = json!({
                "mean": map.mean(),
                "min": map.min(),
                "max": map.max(),
                "pixels": "all",
                "png_scale": peak,
            });
            ctx.out.json("self_ref.json", &sidecar)?;
            ctx.finish("self-ref")
        }
        AnalyzeCommand::MetricSweep { args, sigmas, samples } => {
            let mut ctx = AnalyzeCtx::new(&args, "metric-sweep", |c| {
                if let Some(s) = sigmas {
                    c.analysis.sigmas = s;
                }
                c.analysis.n_samples = samples.unwrap_or(c.analysis.n_samples);
            })?;
            let x = ctx.image()?.tensor().clone();
            let a = ctx.cfg.analysis.clone();
            let rows = metric_sweep(&ctx.model, &x, &a.sigmas, a.n_samples, &mut ctx.rng)?;
            write_sweep_csv(&ctx.out.file("metric_sweep.csv"), &rows)?;
            let pts: Vec<(f64, f64)> = rows.iter().map(|r| (r.rgb_mean, r.argb_mean)).collect();
            plot_series(&ctx.out.file("metric_sweep.png"), &[(&pts, [200, 40, 40])])?;
            ctx.out.json(
                "metric_sweep.json",
                &json!({ "sigmas": a.sigmas, "n_samples": a.n_samples }),
            )?;
            ctx.finish("metric-sweep")
        }
        AnalyzeCommand::ExpertMap { args } => {
            let mut ctx = AnalyzeCtx::new(&args, "expert-map", |_| {})?;
            let x = ctx.image()?.tensor().clone();
            let map = expert_map(&ctx.model, &x)?;
            map.save_png(&ctx.out.file("expert_map.png"))?;
            let rows: Vec<Vec<usize>> = (0..map.height)
                .map(|y| (0..map.width).map(|xx| map.at(y, xx)).collect())
                .collect();
            let header: Vec<String> = (0..map.width).map(|i| format!("x{i}")).collect();
            let header: Vec<&str> = header.iter().map(String::as_str).collect();
            write_csv(&ctx.out.file("expert_map.csv"), &header, &rows)?;
            ctx.out.json(
                "expert_map.json",
                &json!({ "num_experts": map.num_experts, "histogram": map.histogram() }),
            )?;
            ctx.finish("expert-map")
        }
        AnalyzeCommand::ExportEmbeddings { args, subsample } => {
            let mut ctx = AnalyzeCtx::new(&args, "export-embeddings", |c| {
                c.analysis.subsample = subsample.unwrap_or(c.analysis.subsample);
            })?;
            let x = ctx.image()?.tensor().clone();
            let s = ctx.cfg.analysis.subsample;
            let n = export_embeddings(&ctx.model, &x, s, &ctx.out.file("embeddings.csv"))?;
            ctx.out.json("embeddings.json", &json!({ "subsample": s, "rows": n }))?;
            ctx.finish("export-embeddings")
        }
        AnalyzeCommand::GradStats {
            args,
            sigma,
            kind,
            bins,
        } => {
            let mut ctx = AnalyzeCtx::new(&args, "grad-stats", |c| {
                let a = &mut c.analysis;
                a.grad_sigma = sigma.unwrap_or(a.grad_sigma);
                a.grad_kind = kind.unwrap_or(a.grad_kind);
                a.bins = bins.unwrap_or(a.bins);
            })?;
            let clean = ctx.image()?.tensor().clone();
            let a = ctx.cfg.analysis.clone();
            let noisy = degrade(&clean, a.grad_sigma, &mut ctx.rng)?;
            let (rgb_loss, rgb_grad) =
                loss_and_grad(&LossSpec::new(Space::Rgb, a.grad_kind), None, &noisy, &clean, true)?;
            let (argb_loss, argb_grad) = loss_and_grad(
                &LossSpec::new(Space::Argb, a.grad_kind),
                Some(&ctx.model),
                &noisy,
                &clean,
                true,
            )?;
            let (rgb_grad, argb_grad) = (rgb_grad.expect("requested"), argb_grad.expect("requested"));
            let half = rgb_grad.max_abs().max(argb_grad.max_abs()).max(f32::MIN_POSITIVE) as f64;
            let edges: Vec<f64> = (0..=a.bins)
                .map(|i| -half + 2.0 * half * i as f64 / a.bins as f64)
                .collect();
            let rgb = GradStats::with_edges(&rgb_grad, edges.clone());
            let argb = GradStats::with_edges(&argb_grad, edges);
            rgb.write_csv(&ctx.out.file("grad_hist_rgb.csv"))?;
            argb.write_csv(&ctx.out.file("grad_hist_argb.csv"))?;
            render_histograms(
                &ctx.out.file("grad_hist.png"),
                &[(&argb, [200, 60, 40]), (&rgb, [40, 80, 200])],
            )?;
            let sidecar = json!({
                "sigma": a.grad_sigma,
                "kind": a.grad_kind,
                "rgb_loss": f64::from(rgb_loss),
                "argb_loss": f64::from(argb_loss),
                "rgb": { "mean_abs": rgb.mean_abs, "max_abs": rgb.max_abs, "frac_zero": rgb.frac_zero },
                "argb": { "mean_abs": argb.mean_abs, "max_abs": argb.max_abs, "frac_zero": argb.frac_zero },
                "mean_abs_ratio": argb.mean_abs / rgb.mean_abs,
            });
            ctx.out.json("grad_stats.json", &sidecar)?;
            ctx.finish("grad-stats")
        }
        AnalyzeCommand::MaxFilter {
            args,
            expert,
            channels,
            steps,
        } => {
            let mut ctx = AnalyzeCtx::new(&args, "max-filter", |c| {
                c.analysis.max_filter.steps = steps.unwrap_or(c.analysis.max_filter.steps);
            })?;
            let mcfg = ctx.cfg.analysis.max_filter.clone();
            let mut results = Vec::new();
            for &ch in &channels {
                let m = maximize_filter(&ctx.model, expert, ch, &mcfg, &mut ctx.rng)?;
                Image::from_clamped(m.image.clone())?.save_png(&ctx.out.file(&format!("e{expert}_c{ch}.png")))?;
                trace_csv(&ctx.out.file(&format!("e{expert}_c{ch}_trace.csv")), &m.trace)?;
                let plane = m.image.plane();
                let mean_color: Vec<f64> = (0..3)
                    .map(|c| m.image.plane_slice(0, c).iter().map(|v| f64::from(*v)).sum::<f64>() / plane as f64)
                    .collect();
                results.push(json!({
                    "channel": ch,
                    "initial_activation": m.trace[0],
                    "final_activation": m.trace[m.trace.len() - 1],
                    "mean_color": mean_color,
                }));
            }
            ctx.out.json(
                "max_filter.json",
                &json!({ "expert": expert, "config": mcfg, "channels": results }),
            )?;
            ctx.finish("max-filter")
        }
    }
}

fn find_manifests(root: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
    if !root.is_dir() {
        return Ok(());
    }
    let mut entries: Vec<PathBuf> = fs::read_dir(root)?
        .map(|e| e.map(|e| e.path()))
        .collect::<std::io::Result<_>>()?;
    entries.sort();
    for p in entries {
        if p.is_dir() {
            find_manifests(&p, out)?;
        } else if p.file_name().is_some_and(|n| n == "manifest.json") {
            out.push(p);
        }
    }
    Ok(())
}

fn report(common: &Common, cfg: &RunConfig, root: &Path) -> Result<PathBuf> {
    if !root.is_dir() {
        return Err(ArgbError::missing(root, "run directory not found"));
    }
    let mut manifests = Vec::new();
    find_manifests(root, &mut manifests)?;
    let mut out = Outputs::new(common.out.clone().unwrap_or_else(|| root.join("report")))?;
    manifests.retain(|m| m.parent() != Some(out.dir.as_path()));
    if manifests.is_empty() {
        return Err(ArgbError::missing(root, "no run manifests below this directory"));
    }
    let mut md = String::from("# Runs\n\n| run | command | seed | config |\n|---|---|---|---|\n");
    let mut runs = Vec::new();
    for m in &manifests {
        let text = fs::read_to_string(m)?;
        let Ok(man) = serde_json::from_str::<RunManifest>(&text) else {
            log::warn!("skipping unreadable manifest {}", m.display());
            continue;
        };
        let dir = m.parent().expect("file has a parent");
        let rel = dir.strip_prefix(root).unwrap_or(dir).display().to_string();
        md.push_str(&format!(
            "| {rel} | {} | {} | {} |\n",
            man.command,
            man.seed,
            &man.config_hash[..12]
        ));
        let mut sidecars = serde_json::Map::new();
        for f in &man.files {
            if f.ends_with(".json") {
                if let Ok(v) = fs::read_to_string(dir.join(f))
                    .map_err(ArgbError::from)
                    .and_then(|t| Ok(serde_json::from_str::<Value>(&t)?))
                {
                    sidecars.insert(f.clone(), v);
                }
            }
        }
        runs.push(json!({ "dir": rel, "command": man.command, "seed": man.seed, "results": sidecars }));
    }
    md.push_str("\n## Results\n\n");
    for r in &runs {
        md.push_str(&format!(
            "### {}\n\n```json\n{}\n```\n\n",
            r["dir"].as_str().unwrap_or(""),
            serde_json::to_string_pretty(&r["results"])?
        ));
    }
    let p = out.file("report.md");
    fs::write(&p, md)?;
    out.json("report.json", &Value::Array(runs))?;
    out.input("runs", root);
    let seed = cfg.analysis.seed;
    out.finish("report", cfg, seed)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_keys_name_their_path() {
        let err = RunConfig::from_json(r#"{"autoencoder": {"num_expert": 3}}"#).unwrap_err();
        match err {
            ArgbError::Config { path, .. } => assert_eq!(path, "autoencoder.num_expert"),
            other => panic!("unexpected {other}"),
        }
        let err = RunConfig::from_json(r#"{"analysis": {"inversion": {"stepz": 1}}}"#).unwrap_err();
        assert!(matches!(err, ArgbError::Config { ref path, .. } if path == "analysis.inversion.stepz"));
        assert_eq!(err.exit_code(), 1);
    }

    #[test]
    fn restorer_section_takes_loss_from_top_level() {
        let cfg = RunConfig::from_json(r#"{"loss": {"space": "argb"}, "restorer": {"steps": 3}}"#).unwrap();
        let r = cfg.restorer_config();
        assert_eq!(r.loss.space, Space::Argb);
        assert_eq!(r.steps, 3);
        assert!(RunConfig::from_json(r#"{"restorer": {"loss": {}}}"#).is_err());
    }

    #[test]
    fn config_hash_tracks_content() {
        let a = RunConfig::default();
        let mut b = a.clone();
        assert_eq!(a.hash(), b.hash());
        b.analysis.seed = 1;
        assert_ne!(a.hash(), b.hash());
    }
}
