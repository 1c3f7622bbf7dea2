//! Command-line front end.
//!
//! Settings resolve as flags over `--config` JSON over defaults, and the
//! effective configuration is written into every output directory. Failures
//! print one JSON line on stderr, `{"error":"<kind>","message":"..."}`, and
//! exit nonzero.

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::energy::OpCounts;
use crate::error::{Error, Result};
use crate::global::DistanceKind;
use crate::metrics::MetricsReport;
use crate::micro::Fusion;
use crate::model::SaliencyNet;
use crate::parallel;
use crate::params::ParamStore;
use crate::plot::{bar_chart, line_chart, Series};
use crate::spike::codec::{decode_stream, encode_stream};
use crate::spike::dataset::{prepare_all, read_json, write_json, Dataset, Prepared};
use crate::spike::image_io::{read_clip, write_scaled};
use crate::spike::synthetic::{Scenario, SyntheticConfig};
use crate::spike::{simulate_spikes, tfi_reconstruct};
use crate::train::{energy_estimate, evaluate, train, EpochLog, TrainConfig};

pub const CONFIG_FILE: &str = "config.json";
pub const MODEL_FILE: &str = "model.ssck";
pub const CRITIC_FILE: &str = "critic.ssck";
pub const LOG_FILE: &str = "log.jsonl";

#[derive(Debug, Parser)]
#[command(name = "spike-saliency", version, about = "Spike-camera saliency detection")]
pub struct Cli {
    /// Worker threads for the compute pool.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// Serial execution; outputs are bit-stable across runs.
    #[arg(long, global = true)]
    pub deterministic: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Convert a directory of luminance frames into a spike stream.
    Simulate(SimulateArgs),
    /// Reconstruct frames from a spike stream by inter-spike interval.
    Reconstruct(ReconstructArgs),
    /// Write a synthetic dataset.
    GenData(GenDataArgs),
    /// Train the network (and critic) on a dataset.
    Train(TrainArgs),
    /// Score a checkpoint on a dataset.
    Eval(EvalArgs),
    /// Train and score the fusion, distance and transport-term variants.
    Ablate(AblateArgs),
    /// Count synaptic operations and estimate inference energy.
    Energy(EnergyArgs),
    /// Draw training curves and pixel-ratio charts.
    Plot(PlotArgs),
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    /// Directory of PGM/PNG frames, one per tick, in file-name order.
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long, default_value_t = 1.0)]
    pub theta: f64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ReconstructArgs {
    #[arg(long)]
    pub spk: PathBuf,
    /// Ticks to reconstruct, comma separated.
    #[arg(long, value_delimiter = ',', required = true)]
    pub tick: Vec<usize>,
    #[arg(long, default_value_t = 255.0)]
    pub max_gray: f64,
    #[arg(long)]
    pub out: PathBuf,
}

/// Dataset synthesis settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub scenarios: Vec<Scenario>,
    pub seed: u64,
    pub count: usize,
    pub theta: f64,
    pub synthetic: SyntheticConfig,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            scenarios: Scenario::ALL.to_vec(),
            seed: 0,
            count: 64,
            theta: 1.0,
            synthetic: SyntheticConfig::default(),
        }
    }
}

/// Everything a command can read from `--config`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub train: TrainConfig,
    pub data: DataConfig,
    pub dataset: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        match path {
            Some(p) => read_json(p),
            None => Ok(Self::default()),
        }
    }
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Comma-separated scenario names.
    #[arg(long, value_delimiter = ',')]
    pub scenarios: Option<Vec<Scenario>>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub count: Option<usize>,
    /// Frame size, `N` or `WxH`.
    #[arg(long)]
    pub size: Option<String>,
    #[arg(long)]
    pub ticks: Option<usize>,
    #[arg(long)]
    pub theta: Option<f64>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// Training and model settings shared by several commands.
#[derive(Debug, Args, Default, Clone)]
pub struct TrainFlags {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub time_steps: Option<usize>,
    #[arg(long)]
    pub alpha: Option<f64>,
    /// em, ed, kl or js.
    #[arg(long)]
    pub distance: Option<DistanceKind>,
    /// or, add or sota.
    #[arg(long)]
    pub fusion: Option<Fusion>,
    /// Pointwise instead of depthwise query/key/value projections.
    #[arg(long)]
    pub no_dwconv: bool,
    /// Drop the transport/distance term.
    #[arg(long)]
    pub no_sg: bool,
    #[arg(long)]
    pub heads: Option<usize>,
    #[arg(long)]
    pub base_channels: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub weight_decay: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub penalty_coef: Option<f64>,
    #[arg(long)]
    pub critic_ratio: Option<usize>,
}

impl TrainFlags {
    pub fn apply(&self, c: &mut TrainConfig) {
        macro_rules! set {
            ($flag:ident => $($field:tt)+) => {
                if let Some(v) = self.$flag.clone() {
                    c.$($field)+ = v;
                }
            };
        }
        set!(time_steps => time_steps);
        set!(alpha => alpha);
        set!(distance => distance);
        set!(fusion => model.attention.fusion);
        set!(heads => model.attention.heads);
        set!(base_channels => model.base_channels);
        set!(seed => seed);
        set!(epochs => epochs);
        set!(lr => lr);
        set!(weight_decay => weight_decay);
        set!(batch_size => batch_size);
        set!(penalty_coef => penalty_coef);
        set!(critic_ratio => critic_ratio);
        if self.no_dwconv {
            c.model.attention.use_dwconv_projections = false;
        }
        if self.no_sg {
            c.sg = false;
        }
    }

    fn resolve(&self) -> Result<RunConfig> {
        let mut rc = RunConfig::load(self.config.as_deref())?;
        self.apply(&mut rc.train);
        rc.train.validate()?;
        Ok(rc)
    }
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub flags: TrainFlags,
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub flags: TrainFlags,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    /// Report file (JSON).
    #[arg(long)]
    pub out: PathBuf,
    /// Which samples to score: all, train or val.
    #[arg(long, default_value = "all")]
    pub split: String,
    /// Also estimate inference energy.
    #[arg(long)]
    pub energy: bool,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    #[command(flatten)]
    pub flags: TrainFlags,
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Grids to run: fusion, distance, sg.
    #[arg(long, value_delimiter = ',', default_value = "fusion,distance,sg")]
    pub grid: Vec<String>,
}

#[derive(Debug, Args)]
pub struct EnergyArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Generator checkpoint; a fresh initialisation when absent.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Dataset to draw samples from; synthesised when absent.
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    #[arg(long, value_delimiter = ',', default_value = "1,5")]
    pub time_steps: Vec<usize>,
    #[arg(long, default_value_t = 4)]
    pub samples: usize,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct PlotArgs {
    /// Training log (JSON lines).
    #[arg(long)]
    pub log: Option<PathBuf>,
    /// Metrics report (JSON) with per-class pixel ratios.
    #[arg(long)]
    pub report: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

/// Parse, run, report. Returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                let _ = e.print();
                return 0;
            }
            let msg = e.to_string();
            let first = msg.lines().find(|l| !l.trim().is_empty()).unwrap_or("invalid arguments");
            print_error("usage", first.trim_start_matches("error: "));
            return 2;
        }
    };
    match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            print_error(error_kind(&e), &e.to_string());
            1
        }
    }
}

fn print_error(kind: &str, message: &str) {
    let line = serde_json::json!({ "error": kind, "message": message.replace('\n', " ") });
    eprintln!("{line}");
}

pub fn error_kind(e: &Error) -> &'static str {
    match e {
        Error::Shape { .. } => "shape",
        Error::Param(_) => "param",
        Error::Input(_) => "input",
        Error::Decode(_) => "decode",
        Error::Checkpoint(_) => "checkpoint",
        Error::Diverged { .. } => "diverged",
        Error::Unsupported(_) => "unsupported",
        Error::Io { .. } => "io",
        Error::Image(_) => "image",
        Error::Json(_) => "json",
    }
}

pub fn run(cli: Cli) -> Result<()> {
    if cli.deterministic {
        parallel::set_serial(true);
        parallel::init_threads(1);
    } else if let Some(n) = cli.threads {
        parallel::init_threads(n);
    }
    match cli.command {
        Command::Simulate(a) => cmd_simulate(&a),
        Command::Reconstruct(a) => cmd_reconstruct(&a),
        Command::GenData(a) => cmd_gen_data(&a).map(|_| ()),
        Command::Train(a) => cmd_train(&a).map(|_| ()),
        Command::Eval(a) => cmd_eval(&a).map(|_| ()),
        Command::Ablate(a) => cmd_ablate(&a).map(|_| ()),
        Command::Energy(a) => cmd_energy(&a).map(|_| ()),
        Command::Plot(a) => cmd_plot(&a),
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn require_dataset(p: Option<PathBuf>) -> Result<PathBuf> {
    let p = p.ok_or_else(|| Error::Input("no dataset given (--dataset or config `dataset`)".into()))?;
    let meta = p.join("dataset.json");
    if !meta.is_file() {
        return Err(Error::Input(format!("{} is not a dataset (missing dataset.json)", p.display())));
    }
    Ok(p)
}

fn require_file(p: &Path) -> Result<()> {
    if !p.is_file() {
        return Err(Error::Input(format!("{} does not exist", p.display())));
    }
    Ok(())
}

pub fn cmd_simulate(a: &SimulateArgs) -> Result<()> {
    let clip = read_clip(&a.input)?;
    let stream = simulate_spikes(&clip, a.theta)?;
    if let Some(dir) = a.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        create_dir(dir)?;
    }
    fs::write(&a.out, encode_stream(&stream)).map_err(|e| Error::io(&a.out, e))?;
    println!(
        "wrote {} ({}x{}, {} ticks, {} spikes)",
        a.out.display(),
        stream.width(),
        stream.height(),
        stream.num_ticks(),
        stream.total_spikes()
    );
    Ok(())
}

pub fn cmd_reconstruct(a: &ReconstructArgs) -> Result<()> {
    let bytes = fs::read(&a.spk).map_err(|e| Error::io(&a.spk, e))?;
    let stream = decode_stream(&bytes)?;
    create_dir(&a.out)?;
    for &t in &a.tick {
        let f = tfi_reconstruct(&stream, t, a.max_gray)?;
        let path = a.out.join(format!("tfi_{t:04}.pgm"));
        write_scaled(&path, f.width, f.height, &f.values, a.max_gray)?;
        println!("wrote {}", path.display());
    }
    Ok(())
}

fn parse_size(s: &str) -> Result<(usize, usize)> {
    let bad = || Error::Param(format!("size `{s}` is not N or WxH"));
    match s.split_once(['x', 'X']) {
        Some((w, h)) => Ok((w.trim().parse().map_err(|_| bad())?, h.trim().parse().map_err(|_| bad())?)),
        None => {
            let n = s.trim().parse().map_err(|_| bad())?;
            Ok((n, n))
        }
    }
}

pub fn cmd_gen_data(a: &GenDataArgs) -> Result<Dataset> {
    let mut rc = RunConfig::load(a.config.as_deref())?;
    let d = &mut rc.data;
    if let Some(s) = &a.scenarios {
        d.scenarios = s.clone();
    }
    if let Some(v) = a.seed {
        d.seed = v;
    }
    if let Some(v) = a.count {
        d.count = v;
    }
    if let Some(v) = a.theta {
        d.theta = v;
    }
    if let Some(v) = a.ticks {
        d.synthetic.num_ticks = v;
    }
    if let Some(s) = &a.size {
        let (w, h) = parse_size(s)?;
        d.synthetic.width = w;
        d.synthetic.height = h;
        let side = w.min(h);
        d.synthetic.max_shape = d.synthetic.max_shape.min(side / 2).max(1);
        d.synthetic.min_shape = d.synthetic.min_shape.min(d.synthetic.max_shape);
    }
    if a.out.is_some() {
        rc.out = a.out.clone();
    }
    let out = rc.out.clone().ok_or_else(|| Error::Input("no output directory (--out)".into()))?;
    let ds = Dataset::synthesize(&rc.data.scenarios, rc.data.seed, &rc.data.synthetic, rc.data.count, rc.data.theta)?;
    ds.save(&out)?;
    write_json(&out.join(CONFIG_FILE), &rc)?;
    println!("wrote {} samples to {}", ds.samples.len(), out.display());
    Ok(ds)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub epochs: usize,
    pub final_val: Option<MetricsReport>,
}

pub fn cmd_train(a: &TrainArgs) -> Result<TrainSummary> {
    let mut rc = a.flags.resolve()?;
    if a.dataset.is_some() {
        rc.dataset = a.dataset.clone();
    }
    if a.out.is_some() {
        rc.out = a.out.clone();
    }
    let dataset_dir = require_dataset(rc.dataset.clone())?;
    let out = rc.out.clone().ok_or_else(|| Error::Input("no output directory (--out)".into()))?;
    create_dir(&out)?;
    write_json(&out.join(CONFIG_FILE), &rc)?;
    let ds = Dataset::load(&dataset_dir)?;
    let log_path = out.join(LOG_FILE);
    let mut log = fs::File::create(&log_path).map_err(|e| Error::io(&log_path, e))?;
    let outcome = train(&ds, &rc.train, |e: &EpochLog| {
        let line = serde_json::to_string(e)?;
        writeln!(log, "{line}").map_err(|err| Error::io(&log_path, err))?;
        println!(
            "epoch {} loss {:.5} val_mae {}",
            e.epoch,
            e.terms.total,
            e.val_mae.map_or("-".into(), |v| format!("{v:.5}"))
        );
        Ok(())
    })?;
    outcome.gen.save(&out.join(MODEL_FILE))?;
    outcome.critic.save(&out.join(CRITIC_FILE))?;
    let (_, val) = ds.split();
    let final_val = if val.is_empty() {
        None
    } else {
        let net = build_net(&rc.train, &outcome.gen)?;
        let p = prepare_all(&val, rc.train.time_steps)?;
        let r = evaluate(&net, &outcome.gen, &p, false)?.report;
        write_json(&out.join("metrics.json"), &r)?;
        Some(r)
    };
    Ok(TrainSummary {
        epochs: rc.train.epochs,
        final_val,
    })
}

/// Network skeleton for `cfg`, checked against the parameters in `store`.
pub fn build_net(cfg: &TrainConfig, store: &ParamStore) -> Result<SaliencyNet> {
    let mut fresh = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let net = SaliencyNet::new(&mut fresh, cfg.model, &mut rng)?;
    for id in fresh.ids() {
        let name = fresh.name(id);
        match store.id(name) {
            Some(j) if store.get(j).shape() == fresh.get(id).shape() && j == id => {}
            _ => {
                return Err(Error::Checkpoint(format!(
                    "checkpoint does not match the configured model at `{name}`"
                )))
            }
        }
    }
    if store.len() != fresh.len() {
        return Err(Error::Checkpoint(format!(
            "checkpoint holds {} tensors, the model {}",
            store.len(),
            fresh.len()
        )));
    }
    Ok(net)
}

/// `--config`, else `config.json` beside the checkpoint, else defaults; then flags.
fn resolve_for_checkpoint(flags: &TrainFlags, checkpoint: Option<&Path>) -> Result<RunConfig> {
    let beside = checkpoint
        .and_then(Path::parent)
        .map(|d| d.join(CONFIG_FILE))
        .filter(|p| p.is_file());
    let mut rc = match (&flags.config, beside) {
        (Some(p), _) => read_json(p)?,
        (None, Some(p)) => read_json(&p)?,
        (None, None) => RunConfig::default(),
    };
    flags.apply(&mut rc.train);
    rc.train.validate()?;
    Ok(rc)
}

fn load_model(rc: &RunConfig, checkpoint: Option<&Path>) -> Result<(SaliencyNet, ParamStore)> {
    match checkpoint {
        Some(p) => {
            require_file(p)?;
            let store = ParamStore::load(p)?;
            let net = build_net(&rc.train, &store)?;
            Ok((net, store))
        }
        None => {
            let mut store = ParamStore::new();
            let mut rng = ChaCha8Rng::seed_from_u64(rc.train.seed);
            let net = SaliencyNet::new(&mut store, rc.train.model, &mut rng)?;
            Ok((net, store))
        }
    }
}

pub fn cmd_eval(a: &EvalArgs) -> Result<MetricsReport> {
    let ckpt = a.checkpoint.clone().or(a.flags.config.as_ref().and_then(|p| {
        RunConfig::load(Some(p)).ok().and_then(|rc| rc.checkpoint)
    }));
    let ckpt = ckpt.ok_or_else(|| Error::Input("no checkpoint given (--checkpoint)".into()))?;
    require_file(&ckpt)?;
    let mut rc = resolve_for_checkpoint(&a.flags, Some(&ckpt))?;
    if a.dataset.is_some() {
        rc.dataset = a.dataset.clone();
    }
    rc.checkpoint = Some(ckpt.clone());
    rc.out = Some(a.out.clone());
    let dataset_dir = require_dataset(rc.dataset.clone())?;
    let (net, store) = load_model(&rc, Some(&ckpt))?;
    let ds = Dataset::load(&dataset_dir)?;
    let (tr, val) = ds.split();
    let samples: Vec<_> = match a.split.as_str() {
        "all" => ds.samples.iter().collect(),
        "train" => tr,
        "val" => val,
        s => return Err(Error::Param(format!("unknown split `{s}` (expected all, train, val)"))),
    };
    let prepared = prepare_all(&samples, rc.train.time_steps)?;
    let report = evaluate(&net, &store, &prepared, a.energy)?.report;
    if let Some(dir) = a.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        create_dir(dir)?;
        write_json(&dir.join("eval_config.json"), &rc)?;
    }
    write_json(&a.out, &report)?;
    println!(
        "mae {:.5}  mean_f {:.5}  max_f {:.5}  s_m {:.5}  psnr {:.3}  ssim {:.5}",
        report.mae, report.mean_f_beta, report.max_f_beta, report.s_measure, report.psnr, report.ssim
    );
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub grid: String,
    pub variant: String,
    pub report: MetricsReport,
}

/// Variants per grid, as config edits on a base configuration.
pub fn ablation_variants(grid: &str, base: &TrainConfig) -> Result<Vec<(String, TrainConfig)>> {
    let mut out = Vec::new();
    match grid {
        "fusion" => {
            for f in [Fusion::Or, Fusion::Add, Fusion::Attention] {
                let mut c = base.clone();
                c.model.attention.fusion = f;
                out.push((f.to_string(), c));
            }
        }
        "distance" => {
            for d in [DistanceKind::Ed, DistanceKind::Kl, DistanceKind::Js, DistanceKind::Em] {
                let mut c = base.clone();
                c.distance = d;
                c.sg = true;
                out.push((d.to_string(), c));
            }
        }
        "sg" => {
            for sg in [false, true] {
                let mut c = base.clone();
                c.sg = sg;
                out.push((if sg { "with-sg" } else { "without-sg" }.to_string(), c));
            }
        }
        g => return Err(Error::Param(format!("unknown grid `{g}` (expected fusion, distance, sg)"))),
    }
    Ok(out)
}

pub fn run_ablation(ds: &Dataset, base: &TrainConfig, grids: &[String]) -> Result<Vec<AblationRow>> {
    let (_, val) = ds.split();
    if val.is_empty() {
        return Err(Error::Input("dataset has no validation samples".into()));
    }
    let mut rows = Vec::new();
    for grid in grids {
        for (variant, cfg) in ablation_variants(grid, base)? {
            let outcome = train(ds, &cfg, |_| Ok(()))?;
            let net = build_net(&cfg, &outcome.gen)?;
            let p = prepare_all(&val, cfg.time_steps)?;
            let report = evaluate(&net, &outcome.gen, &p, false)?.report;
            rows.push(AblationRow {
                grid: grid.clone(),
                variant,
                report,
            });
        }
    }
    Ok(rows)
}

pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut s = String::from("grid,variant,mae,mean_f_beta,max_f_beta,s_measure,psnr,ssim\n");
    for r in rows {
        let m = &r.report;
        s.push_str(&format!(
            "{},{},{:.6},{:.6},{:.6},{:.6},{:.4},{:.6}\n",
            r.grid, r.variant, m.mae, m.mean_f_beta, m.max_f_beta, m.s_measure, m.psnr, m.ssim
        ));
    }
    s
}

pub fn ablation_markdown(rows: &[AblationRow]) -> String {
    let mut s = String::from("| grid | variant | MAE | mean F | max F | S-measure | PSNR | SSIM |\n|---|---|---|---|---|---|---|---|\n");
    for r in rows {
        let m = &r.report;
        s.push_str(&format!(
            "| {} | {} | {:.4} | {:.4} | {:.4} | {:.4} | {:.2} | {:.4} |\n",
            r.grid, r.variant, m.mae, m.mean_f_beta, m.max_f_beta, m.s_measure, m.psnr, m.ssim
        ));
    }
    s
}

pub fn cmd_ablate(a: &AblateArgs) -> Result<Vec<AblationRow>> {
    let mut rc = a.flags.resolve()?;
    if a.dataset.is_some() {
        rc.dataset = a.dataset.clone();
    }
    if a.out.is_some() {
        rc.out = a.out.clone();
    }
    for g in &a.grid {
        ablation_variants(g, &rc.train)?;
    }
    let dataset_dir = require_dataset(rc.dataset.clone())?;
    let out = rc.out.clone().ok_or_else(|| Error::Input("no output directory (--out)".into()))?;
    create_dir(&out)?;
    write_json(&out.join(CONFIG_FILE), &rc)?;
    let ds = Dataset::load(&dataset_dir)?;
    let rows = run_ablation(&ds, &rc.train, &a.grid)?;
    let csv = out.join("ablation.csv");
    fs::write(&csv, ablation_csv(&rows)).map_err(|e| Error::io(&csv, e))?;
    let md = ablation_markdown(&rows);
    let mdp = out.join("ablation.md");
    fs::write(&mdp, &md).map_err(|e| Error::io(&mdp, e))?;
    print!("{md}");
    Ok(rows)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnergyRow {
    pub time_steps: usize,
    pub samples: usize,
    /// Mean per sample.
    pub energy_mj: f64,
    pub ac: f64,
    pub mac: f64,
    /// Counts of the first sample, per layer.
    pub layers: OpCounts,
}

pub fn energy_rows(net: &SaliencyNet, store: &ParamStore, ds: &Dataset, steps: &[usize], samples: usize) -> Result<Vec<EnergyRow>> {
    let chosen: Vec<_> = ds.samples.iter().take(samples.max(1)).collect();
    let mut rows = Vec::new();
    for &t in steps {
        let prepared: Vec<Prepared> = prepare_all(&chosen, t)?;
        let mut layers = None;
        let (mut e, mut ac, mut mac) = (0.0, 0.0, 0.0);
        for p in &prepared {
            let c = energy_estimate(net, store, &p.frames)?;
            e += c.energy_mj();
            ac += c.ac as f64;
            mac += c.mac as f64;
            layers.get_or_insert(c);
        }
        let n = prepared.len() as f64;
        rows.push(EnergyRow {
            time_steps: t,
            samples: prepared.len(),
            energy_mj: e / n,
            ac: ac / n,
            mac: mac / n,
            layers: layers.unwrap_or_default(),
        });
    }
    Ok(rows)
}

pub fn cmd_energy(a: &EnergyArgs) -> Result<Vec<EnergyRow>> {
    let flags = TrainFlags {
        config: a.config.clone(),
        ..TrainFlags::default()
    };
    let rc = resolve_for_checkpoint(&flags, a.checkpoint.as_deref())?;
    let (net, store) = load_model(&rc, a.checkpoint.as_deref())?;
    let ds = match &a.dataset {
        Some(d) => Dataset::load(&require_dataset(Some(d.clone()))?)?,
        None => {
            let d = &rc.data;
            Dataset::synthesize(&d.scenarios, d.seed, &d.synthetic, a.samples.max(1), d.theta)?
        }
    };
    let rows = energy_rows(&net, &store, &ds, &a.time_steps, a.samples)?;
    if let Some(dir) = a.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        create_dir(dir)?;
        write_json(&dir.join("energy_config.json"), &rc)?;
    }
    write_json(&a.out, &rows)?;
    for r in &rows {
        println!("T={} energy {:.6} mJ (AC {:.0}, MAC {:.0})", r.time_steps, r.energy_mj, r.ac, r.mac);
    }
    Ok(rows)
}

pub fn read_log(path: &Path) -> Result<Vec<EpochLog>> {
    let s = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    s.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(Error::from))
        .collect()
}

pub fn cmd_plot(a: &PlotArgs) -> Result<()> {
    if a.log.is_none() && a.report.is_none() {
        return Err(Error::Input("nothing to plot (--log and/or --report)".into()));
    }
    create_dir(&a.out)?;
    if let Some(p) = &a.log {
        let log = read_log(p)?;
        let curve = |label: &str, f: &dyn Fn(&EpochLog) -> f64| Series {
            label: label.into(),
            values: log.iter().map(f).collect(),
        };
        line_chart(
            &a.out,
            "loss",
            "Training loss per epoch",
            &[curve("total", &|e| e.terms.total), curve("mse", &|e| e.terms.mse)],
        )?;
        line_chart(
            &a.out,
            "val_mae",
            "Validation MAE per epoch",
            &[curve("val MAE", &|e| e.val_mae.unwrap_or(f64::NAN))],
        )?;
    }
    if let Some(p) = &a.report {
        let r: MetricsReport = read_json(p)?;
        let cats: Vec<String> = r.per_class_pixel_ratio.iter().map(|c| c.class.clone()).collect();
        bar_chart(
            &a.out,
            "pixel_ratio",
            "Salient pixel ratio per class",
            &cats,
            &[
                Series {
                    label: "predicted".into(),
                    values: r.per_class_pixel_ratio.iter().map(|c| c.predicted).collect(),
                },
                Series {
                    label: "ground truth".into(),
                    values: r.per_class_pixel_ratio.iter().map(|c| c.ground_truth).collect(),
                },
            ],
        )?;
    }
    println!("wrote plots to {}", a.out.display());
    Ok(())
}
