//! `softmask` command line: train, generate, eval, inspect.

use std::ffi::OsString;
use std::fs::OpenOptions;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::backbone::{analytic_param_count, Model};
use crate::checkpoint::{file_checksum, Checkpoint};
use crate::config::RunConfig;
use crate::decoding::{decode_batch, DecodeConfig, Sampler, Strategy, TraceRecord};
use crate::error::{Error, Result};
use crate::eval::{evaluate, sample_seed, EvalInputs};
use crate::softmask::{SmParams, TdConfig};
use crate::training::{MetricsRow, Trainer};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_RUNTIME: i32 = 2;

#[derive(Debug, Parser)]
#[command(name = "softmask", version, about = "Masked diffusion language model with soft-mask feedback")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train from a JSON run config.
    Train(TrainArgs),
    /// Decode text from a checkpoint.
    Generate(GenerateArgs),
    /// Validation bound and sample diagnostics as JSON.
    Eval(EvalArgs),
    /// Print config, parameter counts and soft-mask parameters.
    Inspect(InspectArgs),
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub config: PathBuf,
    /// Continue a run from its checkpoint (parameters, optimizer and RNG).
    #[arg(long, conflicts_with = "init_from")]
    pub resume: Option<PathBuf>,
    /// Start from a checkpoint's backbone parameters with fresh optimizer state.
    #[arg(long)]
    pub init_from: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum OnOff {
    On,
    Off,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SamplerKind {
    Argmax,
    Nucleus,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum StrategyArg {
    ScheduleRandom,
    EntropyCount,
}

#[derive(Debug, Args)]
pub struct DecodeArgs {
    /// Number of generated positions.
    #[arg(long)]
    pub length: Option<usize>,
    #[arg(long)]
    pub steps: Option<usize>,
    /// Steps as a fraction of the length.
    #[arg(long)]
    pub nfe_budget: Option<f64>,
    #[arg(long, value_enum, default_value_t = StrategyArg::EntropyCount)]
    pub strategy: StrategyArg,
    #[arg(long, value_enum, default_value_t = SamplerKind::Argmax)]
    pub sampler: SamplerKind,
    #[arg(long, default_value_t = 1.0)]
    pub temperature: f64,
    #[arg(long, default_value_t = 0.9)]
    pub top_p: f64,
    #[arg(long, value_enum, default_value_t = OnOff::On)]
    pub sm: OnOff,
    /// Time-dependent feedback, `mode` or `mode:threshold`.
    #[arg(long)]
    pub td: Option<String>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

impl DecodeArgs {
    fn config(&self, default_length: usize) -> Result<DecodeConfig> {
        if self.steps.is_some() && self.nfe_budget.is_some() {
            return Err(Error::config("--steps and --nfe-budget are mutually exclusive"));
        }
        let sampler = match self.sampler {
            SamplerKind::Argmax => Sampler::Argmax,
            SamplerKind::Nucleus => Sampler::Nucleus { temperature: self.temperature, top_p: self.top_p },
        };
        let strategy = match self.strategy {
            StrategyArg::ScheduleRandom => Strategy::ScheduleRandom,
            StrategyArg::EntropyCount => Strategy::EntropyCount,
        };
        let td: TdConfig = match &self.td {
            Some(s) => s.parse()?,
            None => TdConfig::default(),
        };
        let cfg = DecodeConfig {
            length: self.length.unwrap_or(default_length),
            steps: self.steps,
            nfe_budget: self.nfe_budget,
            strategy,
            sampler,
            sm_enabled: self.sm == OnOff::On,
            td,
            seed: self.seed,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub prompt: Option<String>,
    #[command(flatten)]
    pub decode: DecodeArgs,
    /// Number of samples; sample `j > 0` uses a seed derived from `--seed`.
    #[arg(long, default_value_t = 1)]
    pub samples: usize,
    /// Per-step CSV trace.
    #[arg(long)]
    pub trace: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Run config supplying the validation data (defaults to the one stored
    /// in the checkpoint).
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, default_value_t = 4)]
    pub mc_samples: usize,
    #[arg(long, default_value_t = 32)]
    pub n_samples: usize,
    #[command(flatten)]
    pub decode: DecodeArgs,
    /// Also write the report here.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct InspectArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
}

/// Parses `args` and runs the command. Returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    if let Err(e) = configure_threads() {
        eprintln!("error: {e}");
        return EXIT_USAGE;
    }
    match run(cli) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_usage() {
                EXIT_USAGE
            } else {
                EXIT_RUNTIME
            }
        }
    }
}

fn configure_threads() -> Result<()> {
    let Ok(v) = std::env::var("SOFTMASK_THREADS") else { return Ok(()) };
    let n: usize = v.trim().parse().map_err(|_| Error::config(format!("SOFTMASK_THREADS must be an integer, got {v:?}")))?;
    // A pool may already exist when called twice in one process; that is fine.
    let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    Ok(())
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train(a) => cmd_train(&a),
        Command::Generate(a) => cmd_generate(&a),
        Command::Eval(a) => cmd_eval(&a),
        Command::Inspect(a) => cmd_inspect(&a),
    }
}

fn config_base(path: &Path) -> PathBuf {
    path.parent().map(Path::to_path_buf).unwrap_or_default()
}

pub const METRICS_FILE: &str = "metrics.csv";
pub const CHECKPOINT_FILE: &str = "checkpoint.ckpt";

pub fn cmd_train(args: &TrainArgs) -> Result<()> {
    let cfg = RunConfig::load(&args.config)?;
    let base = config_base(&args.config);
    let data = cfg.data.load(&base)?;
    let vocab_size = data.vocab.size();
    let backbone = cfg.model.backbone(vocab_size);
    let out_dir = base.join(&cfg.output_dir);
    std::fs::create_dir_all(&out_dir)?;

    let mut trainer = match (&args.resume, &args.init_from) {
        (Some(path), _) => {
            let ck = Checkpoint::load(path)?;
            if ck.config.backbone != backbone {
                return Err(Error::config("checkpoint model does not match the config"));
            }
            let mut tr = Trainer::new(ck.model()?, ck.config.sm.clone(), cfg.train.clone())?;
            tr.opt = ck.optimizer.ok_or_else(|| Error::Checkpoint("no optimizer state to resume".into()))?;
            tr.rng = ck.rng.ok_or_else(|| Error::Checkpoint("no RNG state to resume".into()))?;
            tr.step = ck.step;
            tr
        }
        (None, Some(path)) => {
            let ck = Checkpoint::load(path)?;
            if ck.config.backbone != backbone {
                return Err(Error::config("checkpoint model does not match the config"));
            }
            Trainer::new(ck.model()?, cfg.sm.params(vocab_size)?, cfg.train.clone())?
        }
        (None, None) => {
            let seed = cfg.model.init_seed.unwrap_or(cfg.train.seed);
            Trainer::new(Model::<f32>::new(backbone, seed)?, cfg.sm.params(vocab_size)?, cfg.train.clone())?
        }
    };

    let metrics_path = out_dir.join(METRICS_FILE);
    let append = args.resume.is_some() && metrics_path.exists();
    let file = OpenOptions::new().create(true).write(true).append(append).truncate(!append).open(&metrics_path)?;
    let mut csv = csv::WriterBuilder::new().has_headers(!append).from_writer(file);
    let ckpt_path = out_dir.join(CHECKPOINT_FILE);
    let grammar = cfg.data.grammar.clone();
    let every = cfg.checkpoint_every;

    trainer.run(&data.train, |tr, row: MetricsRow| {
        csv.serialize(row).map_err(csv_err)?;
        if row.step % 100 == 0 {
            log::info!("step {} loss {:.4} omega_s {:.4}", row.step, row.loss, row.omega_s);
        }
        if every > 0 && row.step % every as u64 == 0 {
            csv.flush()?;
            Checkpoint::from_trainer(tr, data.vocab.clone(), grammar.clone(), Some(cfg.clone())).save(&ckpt_path)?;
        }
        Ok(())
    })?;
    csv.flush()?;
    let sum = Checkpoint::from_trainer(&trainer, data.vocab.clone(), grammar, Some(cfg.clone())).save(&ckpt_path)?;
    println!("steps {}", trainer.step);
    println!("checkpoint {}", ckpt_path.display());
    println!("sha256 {sum}");
    Ok(())
}

fn csv_err(e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(io),
        other => Error::Checkpoint(format!("csv: {other:?}")),
    }
}

pub fn cmd_generate(args: &GenerateArgs) -> Result<()> {
    let ck = Checkpoint::load(&args.checkpoint)?;
    let model = ck.model()?;
    let vocab = &ck.config.vocab;
    let prompt = match &args.prompt {
        Some(p) => vocab.encode(p)?,
        None => Vec::new(),
    };
    let room = model.config.max_len.saturating_sub(prompt.len());
    let default_len = ck.config.run.as_ref().map_or(room, |r| r.data.seq_len.min(room).max(1));
    let dcfg = args.decode.config(default_len)?;
    if args.samples == 0 {
        return Err(Error::config("--samples must be at least 1"));
    }
    let seeds: Vec<u64> =
        (0..args.samples as u64).map(|j| if j == 0 { dcfg.seed } else { sample_seed(dcfg.seed, j) }).collect();
    let mut out = Vec::new();
    let mut trace: Vec<TraceRecord> = Vec::new();
    for (chunk_idx, chunk) in seeds.chunks(16).enumerate() {
        let d = decode_batch(&prompt, &model, &ck.config.sm, &dcfg, chunk)?;
        if chunk_idx == 0 {
            trace = d.trace;
        }
        out.extend(d.sequences);
    }
    let stdout = std::io::stdout();
    let mut lock = stdout.lock();
    for seq in &out {
        writeln!(lock, "{}{}", args.prompt.as_deref().unwrap_or(""), vocab.decode_trimmed(seq))?;
    }
    if let Some(path) = &args.trace {
        let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
        for r in &trace {
            w.serialize(r).map_err(csv_err)?;
        }
        w.flush()?;
    }
    Ok(())
}

pub fn cmd_eval(args: &EvalArgs) -> Result<()> {
    let ck = Checkpoint::load(&args.checkpoint)?;
    let model = ck.model()?;
    let (run, base) = match &args.config {
        Some(p) => (RunConfig::load(p)?, config_base(p)),
        None => (
            ck.config.run.clone().ok_or_else(|| Error::config("checkpoint has no run config; pass --config"))?,
            PathBuf::new(),
        ),
    };
    let data = run.data.load(&base)?;
    if data.vocab != ck.config.vocab {
        return Err(Error::config("validation data vocabulary differs from the checkpoint"));
    }
    if data.validation.is_empty() {
        return Err(Error::config("no validation data"));
    }
    let spec = ck
        .config
        .grammar
        .clone()
        .or(run.data.grammar.clone())
        .ok_or_else(|| Error::config("eval needs a grammar for validity scoring"))?;
    let dcfg = args.decode.config(run.data.seq_len.min(model.config.max_len))?;
    let report = evaluate(
        &model,
        &ck.config.sm,
        EvalInputs {
            validation: &data.validation,
            spec: &spec,
            decode: &dcfg,
            mc_samples: args.mc_samples,
            n_samples: args.n_samples,
            sm_on: args.decode.sm == OnOff::On,
            seed: args.decode.seed,
            fingerprint: file_checksum(&args.checkpoint)?,
        },
    )?;
    if !report.all_finite() {
        return Err(Error::NonFiniteLoss { step: ck.step, value: report.nelbo_per_masked_token });
    }
    let json = serde_json::to_string_pretty(&report)?;
    println!("{json}");
    if let Some(p) = &args.out {
        std::fs::write(p, format!("{json}\n"))?;
    }
    Ok(())
}

/// Human-readable checkpoint summary.
pub fn inspect_text(ck: &Checkpoint, checksum: &str) -> Result<String> {
    let model = ck.model()?;
    let sm = &ck.config.sm;
    let eff = sm.effective();
    let (rs, ra, rb) = SmParams::raw_from_effective(eff)?;
    let mut s = String::new();
    use std::fmt::Write as _;
    let _ = writeln!(s, "sha256 {checksum}");
    let _ = writeln!(s, "step {}", ck.step);
    let _ = writeln!(s, "backbone {}", serde_json::to_string(&ck.config.backbone)?);
    let _ = writeln!(s, "vocab_size {}", ck.config.vocab.size());
    let _ = writeln!(s, "params {}", model.param_count());
    let _ = writeln!(s, "params_analytic {}", analytic_param_count(&model.config));
    for spec in &model.layout.specs {
        let _ = writeln!(s, "  {} {:?}", spec.name, spec.shape);
    }
    let _ = writeln!(s, "sm.superposition {}", serde_json::to_string(&sm.superposition)?);
    let _ = writeln!(s, "sm.p_sm {}", sm.p_sm);
    let _ = writeln!(s, "sm.raw_s {:.17e}", sm.raw_s);
    let _ = writeln!(s, "sm.raw_a {:.17e}", sm.raw_a);
    let _ = writeln!(s, "sm.raw_b {:.17e}", sm.raw_b);
    let _ = writeln!(s, "sm.raw_temp {:.17e}", sm.raw_temp);
    let _ = writeln!(s, "sm.omega_s {:.17e}", eff.omega_s);
    let _ = writeln!(s, "sm.omega_a {:.17e}", eff.omega_a);
    let _ = writeln!(s, "sm.omega_b {:.17e}", eff.omega_b);
    let _ = writeln!(s, "sm.temperature {:.17e}", sm.temperature());
    let worst = [(rs, sm.raw_s), (ra, sm.raw_a), (rb, sm.raw_b)].iter().map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    let _ = writeln!(s, "sm.roundtrip_max_abs_err {worst:e}");
    Ok(s)
}

pub fn cmd_inspect(args: &InspectArgs) -> Result<()> {
    let ck = Checkpoint::load(&args.checkpoint)?;
    print!("{}", inspect_text(&ck, &file_checksum(&args.checkpoint)?)?);
    Ok(())
}
