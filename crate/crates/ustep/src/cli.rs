//! The `ustep` command line.
//!
//! Every command validates its input and output paths before doing any
//! work and maps failures to an exit status through [`Error::exit_code`].

use std::fmt::Write as _;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use ustep_core::data::{generate, Dataset, GenConfig, Variant};
use ustep_core::gradcheck::{gradcheck_with, GradcheckReport};
use ustep_core::metrics::MetricsReport;
use ustep_core::model::{ModelKind, Predictor, Ustep, UstepConfig};
use ustep_core::rng::Xoshiro256;
use ustep_core::segmentation::FrameSequence;

use crate::checkpoint::{decode_checkpoint, encode_checkpoint};
use crate::dataset_io::{read_dataset_hashed, write_dataset};
use crate::error::{Error, Result};
use crate::kv::KvFile;
use crate::report::{compare_csv, to_csv, to_json};
use crate::trainer::{evaluate, evaluate_floor, resolve_scales, train, AnyModel, ModelSpec, TrainConfig};

/// Tolerance on the relative gradient error below which `gradcheck` passes.
pub const GRADCHECK_TOL: f64 = 1e-4;

#[derive(Debug, Parser)]
#[command(name = "ustep", version, about = "Segment-recurrent video prediction at desk scale")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic bouncing-object dataset.
    GenData(GenDataArgs),
    /// Train a model and write its checkpoint, run log and report.
    Train(TrainArgs),
    /// Roll a checkpoint out on a dataset and write a metrics report.
    Eval(EvalArgs),
    /// Evaluate several checkpoints and the copy-last-frame floor into one CSV.
    Compare(CompareArgs),
    /// Check the analytic gradient of the training loss on a tiny model.
    Gradcheck(GradcheckArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum VariantArg {
    Plain,
    DynamicSpeed,
    Cluttered,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ModelArg {
    Ustep,
    RecLite,
    RecfreeLite,
}

impl From<ModelArg> for ModelKind {
    fn from(m: ModelArg) -> Self {
        match m {
            ModelArg::Ustep => ModelKind::Ustep,
            ModelArg::RecLite => ModelKind::RecurrentLite,
            ModelArg::RecfreeLite => ModelKind::RecurrentFreeLite,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ReportFormat {
    Csv,
    Json,
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    /// Flat `key = value` file using the flag names below; flags override it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub num: Option<usize>,
    /// Observed frames per sequence.
    #[arg(long = "T")]
    pub t: Option<usize>,
    /// Predicted frames per sequence.
    #[arg(long = "Tp")]
    pub tp: Option<usize>,
    #[arg(long = "H")]
    pub h: Option<usize>,
    #[arg(long = "W")]
    pub w: Option<usize>,
    #[arg(long)]
    pub objects: Option<usize>,
    /// Side of each square object in pixels.
    #[arg(long)]
    pub size: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, value_enum)]
    pub variant: Option<VariantArg>,
    /// Per-frame velocity noise for `dynamic-speed`.
    #[arg(long = "sigma-v")]
    pub sigma_v: Option<f64>,
    /// Background texture amplitude for `cluttered`.
    #[arg(long)]
    pub noise: Option<f64>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub data: PathBuf,
    /// Dataset used to pick the best epoch; the training data when absent.
    #[arg(long = "eval-data")]
    pub eval_data: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "ustep")]
    pub model: ModelArg,
    /// Observed frames; half the sequence length when absent.
    #[arg(long = "T")]
    pub t: Option<usize>,
    /// Frames per micro segment; the guideline rule when absent.
    #[arg(long)]
    pub dt: Option<usize>,
    /// Frames per macro window; T rounded down to a multiple of dt when absent.
    #[arg(long = "dT")]
    pub d_big: Option<usize>,
    #[arg(long, default_value_t = 10)]
    pub epochs: usize,
    #[arg(long, default_value_t = 0.01)]
    pub lr: f64,
    #[arg(long, default_value_t = 0.05)]
    pub wd: f64,
    #[arg(long, default_value_t = 16)]
    pub batch: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Hidden channels of every encoder and recurrent state.
    #[arg(long, default_value_t = 16)]
    pub hidden: usize,
    /// Convolutions per encoder.
    #[arg(long, default_value_t = 1)]
    pub depth: usize,
    /// Drop the cross-segment gate (the macro branch is never read).
    #[arg(long = "no-cross")]
    pub no_cross: bool,
    /// Only accept learning rates from the fixed grid.
    #[arg(long = "strict-grid")]
    pub strict_grid: bool,
    /// Add wall-clock seconds to the run log (breaks byte-identical reruns).
    #[arg(long = "record-time")]
    pub record_time: bool,
    /// Checkpoint path; the run log and report are written beside it.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub ckpt: PathBuf,
    /// Observed frames; half the sequence length when absent.
    #[arg(long = "T")]
    pub t: Option<usize>,
    /// Predicted frames; the rest of the sequence when absent.
    #[arg(long = "Tp")]
    pub tp: Option<usize>,
    #[arg(long, value_enum, default_value = "csv")]
    pub report: ReportFormat,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct CompareArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, required = true)]
    pub ckpt: Vec<PathBuf>,
    #[arg(long = "T")]
    pub t: Option<usize>,
    #[arg(long = "Tp")]
    pub tp: Option<usize>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    /// Flat `key = value` file overriding the tiny model: H, W, hidden,
    /// depth, dt, dT, T, Tp, eps.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Perturb one analytic gradient before comparing.
    #[arg(long = "corrupt-grad", hide = true)]
    pub corrupt_grad: bool,
}

/// Parses `args` (including the program name), runs the command and
/// returns the process exit status.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

pub fn run(cli: Cli) -> Result<i32> {
    match cli.command {
        Command::GenData(a) => gen_data(a).map(|()| 0),
        Command::Train(a) => train_cmd(a).map(|()| 0),
        Command::Eval(a) => eval_cmd(a).map(|()| 0),
        Command::Compare(a) => compare_cmd(a).map(|()| 0),
        Command::Gradcheck(a) => gradcheck_cmd(a),
    }
}

fn out(text: &str) {
    let mut stdout = std::io::stdout().lock();
    let _ = stdout.write_all(text.as_bytes());
}

fn check_input(path: &Path) -> Result<()> {
    match std::fs::metadata(path) {
        Ok(m) if m.is_file() => Ok(()),
        Ok(_) => Err(Error::io(path, std::io::Error::other("not a regular file"))),
        Err(e) => Err(Error::io(path, e)),
    }
}

fn check_output(path: &Path) -> Result<()> {
    let parent = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    if !parent.is_dir() {
        return Err(Error::io(
            path,
            std::io::Error::new(std::io::ErrorKind::NotFound, "output directory does not exist"),
        ));
    }
    if path.is_dir() {
        return Err(Error::io(path, std::io::Error::other("output path is a directory")));
    }
    Ok(())
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// `dir/stem.<suffix>` for an output path `dir/stem.ext`.
pub fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    path.with_file_name(format!("{stem}.{suffix}"))
}

const GEN_KEYS: [&str; 12] = [
    "num", "T", "Tp", "H", "W", "objects", "size", "seed", "variant", "sigma-v", "noise", "channels",
];

fn gen_config(a: &GenDataArgs) -> Result<GenConfig> {
    let kv = match &a.config {
        Some(p) => {
            let kv = KvFile::load(p)?;
            kv.check_keys(&GEN_KEYS)?;
            kv
        }
        None => KvFile::default(),
    };
    let d = GenConfig::default();
    let pick = |flag: Option<usize>, key: &str, def: usize| -> Result<usize> {
        Ok(flag.or(kv.get(key)?).unwrap_or(def))
    };
    let variant = match a.variant {
        Some(v) => Some(v),
        None => kv
            .get::<String>("variant")?
            .map(|s| {
                VariantArg::from_str(&s, false)
                    .map_err(|_| Error::Config(format!("config key `variant`: unknown variant `{s}`")))
            })
            .transpose()?,
    };
    let sigma_v = a.sigma_v.or(kv.get("sigma-v")?);
    let noise = a.noise.or(kv.get("noise")?);
    let variant = match variant.unwrap_or(VariantArg::Plain) {
        VariantArg::Plain => {
            if sigma_v.is_some() || noise.is_some() {
                return Err(Error::Usage("--sigma-v and --noise need a matching --variant".into()));
            }
            Variant::Plain
        }
        VariantArg::DynamicSpeed => {
            if noise.is_some() {
                return Err(Error::Usage("--noise applies to --variant cluttered only".into()));
            }
            Variant::DynamicSpeed {
                sigma_v: sigma_v.unwrap_or(0.5),
            }
        }
        VariantArg::Cluttered => {
            if sigma_v.is_some() {
                return Err(Error::Usage("--sigma-v applies to --variant dynamic-speed only".into()));
            }
            Variant::ClutteredBackground {
                noise_amplitude: noise.unwrap_or(0.2),
            }
        }
    };
    let cfg = GenConfig {
        num_sequences: pick(a.num, "num", d.num_sequences)?,
        observed: pick(a.t, "T", d.observed)?,
        predicted: pick(a.tp, "Tp", d.predicted)?,
        height: pick(a.h, "H", d.height)?,
        width: pick(a.w, "W", d.width)?,
        channels: pick(None, "channels", d.channels)?,
        num_objects: pick(a.objects, "objects", d.num_objects)?,
        object_size: pick(a.size, "size", d.object_size)?,
        seed: a.seed.or(kv.get("seed")?).unwrap_or(d.seed),
        variant,
        ..d
    };
    cfg.validate().map_err(|e| Error::Usage(e.to_string()))?;
    Ok(cfg)
}

fn describe_variant(v: Variant) -> String {
    match v {
        Variant::Plain => "plain".into(),
        Variant::DynamicSpeed { sigma_v } => format!("dynamic-speed sigma-v={sigma_v}"),
        Variant::ClutteredBackground { noise_amplitude } => format!("cluttered noise={noise_amplitude}"),
    }
}

fn gen_data(a: GenDataArgs) -> Result<()> {
    if let Some(p) = &a.config {
        check_input(p)?;
    }
    check_output(&a.out)?;
    let cfg = gen_config(&a)?;
    let ds = generate(&cfg)?;
    write_dataset(&ds, &a.out)?;
    out(&format!(
        "N={} L={} C={} H={} W={}\nconfig: num={} T={} Tp={} H={} W={} objects={} size={} seed={} variant={}\nwrote {}\n",
        ds.num_sequences,
        ds.seq_len,
        ds.channels,
        ds.height,
        ds.width,
        cfg.num_sequences,
        cfg.observed,
        cfg.predicted,
        cfg.height,
        cfg.width,
        cfg.num_objects,
        cfg.object_size,
        cfg.seed,
        describe_variant(cfg.variant),
        a.out.display()
    ));
    Ok(())
}

/// Splits a stored sequence length into `(T, T')`, defaulting `T` to half
/// the length and `T'` to the remainder.
pub fn task_split(seq_len: usize, t: Option<usize>, tp: Option<usize>) -> Result<(usize, usize)> {
    let t = t.unwrap_or(seq_len / 2);
    if t == 0 || t >= seq_len {
        return Err(Error::Data(format!(
            "T = {t} must leave at least one of the {seq_len} stored frames to predict"
        )));
    }
    let tp = tp.unwrap_or(seq_len - t);
    if tp == 0 {
        return Err(Error::Usage("--Tp must be at least 1".into()));
    }
    if t + tp > seq_len {
        return Err(Error::Data(format!(
            "T' = {tp} exceeds the {} stored frames after T = {t}; no ground truth",
            seq_len - t
        )));
    }
    Ok((t, tp))
}

fn train_cmd(a: TrainArgs) -> Result<()> {
    check_input(&a.data)?;
    if let Some(p) = &a.eval_data {
        check_input(p)?;
    }
    check_output(&a.out)?;
    let runlog_path = sibling(&a.out, "runlog.jsonl");
    let report_path = sibling(&a.out, "report.json");
    let (train_set, _) = read_dataset_hashed(&a.data)?;
    let (eval_set, eval_hash) = match &a.eval_data {
        Some(p) => read_dataset_hashed(p)?,
        None => read_dataset_hashed(&a.data)?,
    };
    let (observed, predicted) = task_split(train_set.seq_len, a.t, None)?;

    let kind = ModelKind::from(a.model);
    let spec = ModelSpec {
        delta_t: a.dt,
        delta_big: a.d_big,
        hidden: a.hidden,
        depth: a.depth,
        cross_segment: !a.no_cross,
        ..ModelSpec::new(kind)
    };
    if kind == ModelKind::Ustep {
        let (dt, big) = resolve_scales(observed, predicted, a.dt, a.d_big)?;
        let how = if a.dt.is_some() { "given" } else { "guideline" };
        out(&format!("dt={dt} ({how})\ndT={big}\n"));
    } else if a.dt.is_some() || a.d_big.is_some() || a.no_cross {
        return Err(Error::Usage(format!(
            "--dt, --dT and --no-cross apply to --model ustep only, not {}",
            kind.name()
        )));
    }
    let cfg = TrainConfig {
        epochs: a.epochs,
        batch_size: a.batch,
        lr: a.lr,
        weight_decay: a.wd,
        strict_grid: a.strict_grid,
        seed: a.seed,
        record_time: a.record_time,
        ..TrainConfig::new(spec, observed)
    };
    cfg.validate()?;
    out(&format!(
        "model={} T={observed} T'={predicted} epochs={} lr={} wd={} batch={} seed={}\n",
        kind.name(),
        cfg.epochs,
        cfg.lr,
        cfg.weight_decay,
        cfg.batch_size,
        cfg.seed
    ));

    let outcome = train(&cfg, &train_set, &eval_set, |e| {
        out(&format!(
            "epoch {:>4}  train_loss {:.6e}  eval_mse {:.6e}\n",
            e.epoch, e.train_loss, e.eval_mse
        ));
        Ok(())
    })?;

    // Report on exactly what the checkpoint file holds.
    let bytes = encode_checkpoint(&outcome.best.checkpoint_store()?)?;
    let stored = decode_checkpoint(&bytes, &a.out)?;
    let frame = (train_set.channels, train_set.height, train_set.width);
    let model = AnyModel::from_checkpoint(&stored, frame)?;
    let report = evaluate(&model, &eval_set, observed, eval_set.seq_len - observed, &eval_hash)?;

    crate::bytes::write_file(&a.out, &bytes)?;
    write_text(&report_path, &to_json(&report))?;
    let report_name = report_path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    write_text(&runlog_path, &outcome.log.to_jsonl(&report_name))?;
    out(&format!(
        "best epoch {} eval_mse {:.6e}\nwrote {}, {}, {}\n",
        outcome.log.best_epoch,
        outcome.log.best_eval_mse,
        a.out.display(),
        runlog_path.display(),
        report_path.display()
    ));
    Ok(())
}

fn load_model(path: &Path, ds: &Dataset) -> Result<AnyModel> {
    let params = crate::checkpoint::load_checkpoint(path)?;
    AnyModel::from_checkpoint(&params, (ds.channels, ds.height, ds.width))
}

fn eval_cmd(a: EvalArgs) -> Result<()> {
    check_input(&a.data)?;
    check_input(&a.ckpt)?;
    check_output(&a.out)?;
    let (ds, hash) = read_dataset_hashed(&a.data)?;
    let (observed, horizon) = task_split(ds.seq_len, a.t, a.tp)?;
    let model = load_model(&a.ckpt, &ds)?;
    let report = evaluate(&model, &ds, observed, horizon, &hash)?;
    let text = match a.report {
        ReportFormat::Csv => to_csv(&report),
        ReportFormat::Json => to_json(&report),
    };
    write_text(&a.out, &text)?;
    out(&summary_line(&report));
    out(&format!("wrote {}\n", a.out.display()));
    Ok(())
}

fn summary_line(r: &MetricsReport) -> String {
    let a = &r.aggregate;
    format!(
        "{}: T={} T'={} mse={:.6e} mae={:.6e} ssim={:.4} psnr={:.2}\n",
        r.meta.model,
        r.meta.observed,
        r.per_frame.len(),
        a.mse,
        a.mae,
        a.ssim,
        a.psnr
    )
}

fn compare_cmd(a: CompareArgs) -> Result<()> {
    check_input(&a.data)?;
    for c in &a.ckpt {
        check_input(c)?;
    }
    check_output(&a.out)?;
    let (ds, hash) = read_dataset_hashed(&a.data)?;
    let (observed, horizon) = task_split(ds.seq_len, a.t, a.tp)?;
    let mut reports = vec![evaluate_floor(&ds, observed, horizon, &hash)?];
    for path in &a.ckpt {
        let label = path.display().to_string();
        let named = |e: Error| Error::Model {
            model: label.clone(),
            source: Box::new(e),
        };
        let model = load_model(path, &ds).map_err(named)?;
        let mut report = evaluate(&model, &ds, observed, horizon, &hash).map_err(named)?;
        if reports.iter().any(|r| r.meta.model == report.meta.model) {
            let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
            report.meta.model = format!("{}:{stem}", report.meta.model);
        }
        if reports.iter().any(|r| r.meta.model == report.meta.model) {
            return Err(Error::Usage(format!("two checkpoints both report as `{}`", report.meta.model)));
        }
        reports.push(report);
    }
    write_text(&a.out, &compare_csv(&reports))?;
    let mut text = String::new();
    for r in &reports {
        text.push_str(&summary_line(r));
    }
    let _ = writeln!(text, "wrote {}", a.out.display());
    out(&text);
    Ok(())
}

/// Settings of the model and data checked by `gradcheck`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradcheckSetup {
    pub height: usize,
    pub width: usize,
    pub hidden: usize,
    pub depth: usize,
    pub delta_t: usize,
    pub delta_big: usize,
    pub observed: usize,
    pub predicted: usize,
    pub eps: f64,
}

impl Default for GradcheckSetup {
    fn default() -> Self {
        Self {
            height: 8,
            width: 8,
            hidden: 4,
            depth: 1,
            delta_t: 2,
            delta_big: 4,
            observed: 4,
            predicted: 4,
            eps: 1e-5,
        }
    }
}

const GRADCHECK_KEYS: [&str; 9] = ["H", "W", "hidden", "depth", "dt", "dT", "T", "Tp", "eps"];

impl GradcheckSetup {
    pub fn from_kv(kv: &KvFile) -> Result<Self> {
        kv.check_keys(&GRADCHECK_KEYS)?;
        let d = Self::default();
        Ok(Self {
            height: kv.get("H")?.unwrap_or(d.height),
            width: kv.get("W")?.unwrap_or(d.width),
            hidden: kv.get("hidden")?.unwrap_or(d.hidden),
            depth: kv.get("depth")?.unwrap_or(d.depth),
            delta_t: kv.get("dt")?.unwrap_or(d.delta_t),
            delta_big: kv.get("dT")?.unwrap_or(d.delta_big),
            observed: kv.get("T")?.unwrap_or(d.observed),
            predicted: kv.get("Tp")?.unwrap_or(d.predicted),
            eps: kv.get("eps")?.unwrap_or(d.eps),
        })
    }
}

/// Gradient check of the full training loss of a segment model whose
/// parameters and input frames are drawn from `seed`. Parameters are
/// spread over `[-0.5, 0.5)` so that no gate sits at its initial value.
pub fn run_gradcheck(setup: &GradcheckSetup, seed: u64, corrupt: bool) -> Result<GradcheckReport> {
    let mut cfg = UstepConfig::new(1, setup.height, setup.width, setup.delta_t, setup.delta_big);
    cfg.hidden = setup.hidden;
    cfg.depth = setup.depth;
    let mut model = Ustep::new(cfg, seed)?;
    let mut rng = Xoshiro256::for_stream(seed, 1);
    let params = model.params_mut();
    for i in 0..params.len() {
        for v in params.tensor_mut(i).data_mut() {
            *v = rng.uniform(-0.5, 0.5);
        }
    }
    let len = setup.observed + setup.predicted;
    let frame = setup.height * setup.width;
    let data = (0..len * frame).map(|_| rng.next_f64()).collect();
    let seq = FrameSequence::from_data(len, 1, setup.height, setup.width, data)?;
    let observed = setup.observed;
    let report = gradcheck_with(
        model.params(),
        setup.eps,
        |tape, vars| model.training_loss(tape, vars, &seq, observed),
        |grads| {
            if corrupt {
                if let Some(i) = (0..grads.len()).find(|&i| grads.get(i).is_some()) {
                    let g = grads.get_mut(i).expect("gradient present");
                    g[0] += 1e-2 + g[0].abs();
                }
            }
        },
    )?;
    Ok(report)
}

fn gradcheck_cmd(a: GradcheckArgs) -> Result<i32> {
    let setup = match &a.config {
        Some(p) => {
            check_input(p)?;
            GradcheckSetup::from_kv(&KvFile::load(p)?)?
        }
        None => GradcheckSetup::default(),
    };
    let report = run_gradcheck(&setup, a.seed, a.corrupt_grad)?;
    let pass = report.within(GRADCHECK_TOL);
    out(&format!(
        "checked {} parameters of a {}x{} model (C'={}, depth {}, dt={}, dT={})\n\
         max relative error {:.3e} at {}[{}] (analytic {:.6e}, numeric {:.6e})\n{}\n",
        report.checked,
        setup.height,
        setup.width,
        setup.hidden,
        setup.depth,
        setup.delta_t,
        setup.delta_big,
        report.max_rel_error,
        report.worst_param,
        report.worst_element,
        report.analytic,
        report.numeric,
        if pass { "PASS" } else { "FAIL" }
    ));
    Ok(if pass { 0 } else { 1 })
}
