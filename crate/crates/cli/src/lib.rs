//! Command-line front end: argument parsing and verb dispatch.

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use hetadapt_core::autodiff::GradCheckReport;
use hetadapt_core::decoder::{DecodeMode, DecoderConfig, DecoderWeights};
use hetadapt_core::evalharness::{record_mask, run_eval, EvalMode, EvalOptions, EvalReport, Inpainter, Oracle};
use hetadapt_core::hetadapter::{adapter_param_count, attach, gradcheck_adapted};
use hetadapt_core::rng::{domain, keyed};
use hetadapt_core::sequence::{assemble, build_prefix, read_mask, sample_mask, write_mask, Dataset, FrameMask};
use hetadapt_core::symbolic::{format_events, parse_beats, parse_chords, parse_events, piano_reduce, render_block_chords};
use hetadapt_core::synthdata::{gen_dataset, parse_task};
use hetadapt_core::training::{peft_finetune, pretrain_base, Checkpoint, Phase, PretrainLayout, TrainConfig};
use hetadapt_core::TokenSequence;

/// Exit status for a successful run.
pub const EXIT_OK: i32 = 0;
/// Exit status for bad arguments.
pub const EXIT_USAGE: i32 = 1;
/// Exit status for failures while running a verb.
pub const EXIT_RUNTIME: i32 = 2;

/// Gradient tolerance used by `gradcheck`.
pub const GRADCHECK_TOLERANCE: f64 = 1e-4;

#[derive(Parser, Debug)]
#[command(name = "hetadapt", version, about = "Gated heterogeneous adapters for token-sequence inpainting")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct Common {
    /// Seed for every random stream the verb uses.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Worker threads; 1 keeps runs bit-reproducible across machines.
    #[arg(long, default_value_t = 1)]
    pub threads: usize,
}

#[derive(Args, Debug, Clone)]
pub struct ArchArgs {
    #[arg(long, default_value_t = 4)]
    pub layers: usize,
    #[arg(long, default_value_t = 64)]
    pub dim: usize,
    #[arg(long, default_value_t = 4)]
    pub heads: usize,
    #[arg(long, default_value_t = 256)]
    pub ffn: usize,
    /// Defaults to twice the dataset's frame count.
    #[arg(long)]
    pub max_seq_len: Option<usize>,
}

#[derive(Args, Debug, Clone, Default)]
pub struct TrainArgs {
    /// `key = value` training config; flags below win over it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub max_steps: Option<usize>,
    #[arg(long)]
    pub warmup_fraction: Option<f64>,
}

#[derive(Args, Debug, Clone)]
pub struct DecodeArgs {
    /// Sample among the k most likely tokens instead of greedy decoding.
    #[arg(long)]
    pub top_k: Option<usize>,
    #[arg(long, default_value_t = 1.0)]
    pub temperature: f64,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate a synthetic condition/target dataset.
    GenData {
        /// copy, affine[:α,β,γ] or chordcycle.
        #[arg(long)]
        spec: String,
        #[arg(long)]
        n: usize,
        #[arg(long)]
        t: usize,
        #[arg(long, default_value_t = 64)]
        vocab: usize,
        #[arg(long, default_value_t = 0.0)]
        noise: f64,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Train a base decoder on next-token prediction.
    Pretrain {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// target (X alone) or paired ([C; X]).
        #[arg(long)]
        layout: Option<String>,
        #[command(flatten)]
        arch: ArchArgs,
        #[command(flatten)]
        train: TrainArgs,
        /// Per-step losses as CSV.
        #[arg(long)]
        loss_log: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// Train adapters and gates on a frozen base.
    Finetune {
        #[arg(long)]
        base: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 16)]
        width: usize,
        #[command(flatten)]
        train: TrainArgs,
        #[arg(long)]
        mask_lo: Option<f64>,
        #[arg(long)]
        mask_hi: Option<f64>,
        /// Gate magnitudes as CSV.
        #[arg(long)]
        gate_log: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// Fill the masked frames of one dataset record.
    Inpaint {
        #[arg(long)]
        base: PathBuf,
        #[arg(long)]
        adapters: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 0)]
        record: usize,
        #[arg(long, value_parser = clap::value_parser!(u8).range(1..=3), conflicts_with = "mask_file", required_unless_present = "mask_file")]
        mask_pattern: Option<u8>,
        #[arg(long)]
        mask_file: Option<PathBuf>,
        /// CSV of frame, mask flag and predicted tokens.
        #[arg(long)]
        out: PathBuf,
        /// Also write the mask used as a mask file.
        #[arg(long)]
        mask_out: Option<PathBuf>,
        #[command(flatten)]
        decode: DecodeArgs,
        #[command(flatten)]
        common: Common,
    },
    /// Score a model under eval mask patterns and write a CSV report.
    Eval {
        /// Base checkpoint; omit together with --oracle.
        #[arg(long, required_unless_present = "oracle")]
        base: Option<PathBuf>,
        #[arg(long)]
        adapters: Option<PathBuf>,
        /// Score the generative rule itself.
        #[arg(long, conflicts_with_all = ["base", "adapters"])]
        oracle: bool,
        #[arg(long)]
        data: PathBuf,
        /// Task the dataset was drawn from (for the oracle and chord metrics).
        #[arg(long)]
        spec: String,
        #[arg(long, default_value = "1,2,3", value_delimiter = ',')]
        patterns: Vec<u8>,
        #[arg(long, default_value = "inpaint")]
        mode: String,
        /// Replace every condition token by this token.
        #[arg(long)]
        blank_condition: Option<u16>,
        #[arg(long)]
        limit: Option<usize>,
        /// Model label in the report.
        #[arg(long)]
        name: Option<String>,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        decode: DecodeArgs,
        #[command(flatten)]
        common: Common,
    },
    /// Compare analytic and finite-difference gradients of the adapted model.
    Gradcheck {
        /// tiny (L=1, d=8) or small (L=2, d=16, h=2, T=8, m=4).
        #[arg(long, default_value = "small")]
        config: String,
        #[arg(long, default_value_t = 1e-5)]
        eps: f64,
        /// Also check every base weight.
        #[arg(long)]
        include_base: bool,
        #[command(flatten)]
        common: Common,
    },
    /// Keep piano-family notes without same-pitch overlaps.
    ReducePiano {
        #[arg(long = "in")]
        input: PathBuf,
        /// Output path or `-` for standard output.
        #[arg(long)]
        out: String,
        #[command(flatten)]
        common: Common,
    },
    /// Render chord spans as beat-aligned block chords.
    RenderChords {
        #[arg(long)]
        chords: PathBuf,
        #[arg(long)]
        beats: PathBuf,
        #[arg(long)]
        out: String,
        #[command(flatten)]
        common: Common,
    },
    /// Print decoder and adapter parameter counts.
    ParamCount {
        #[command(flatten)]
        arch: ArchArgs,
        #[arg(long, default_value_t = 64)]
        vocab: usize,
        #[arg(long, default_value_t = 1)]
        codebooks: usize,
        #[arg(long, default_value_t = 16)]
        width: usize,
        #[command(flatten)]
        common: Common,
    },
}

/// Parses `argv` (program name first) and runs the verb; returns the exit code.
pub fn run<I, T>(argv: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion | ErrorKind::DisplayHelpOnMissingArgumentOrSubcommand => {
                    let _ = write!(out, "{}", e.render());
                    return if e.kind() == ErrorKind::DisplayHelpOnMissingArgumentOrSubcommand { EXIT_USAGE } else { EXIT_OK };
                }
                _ => EXIT_USAGE,
            };
            let _ = write!(err, "{}", e.render());
            return code;
        }
    };
    match dispatch(cli.command, out) {
        Ok(code) => code,
        Err(e) => {
            let chain: Vec<String> = e.chain().map(|c| c.to_string()).collect();
            let _ = writeln!(err, "error: {}", chain.join(": ").replace('\n', " "));
            EXIT_RUNTIME
        }
    }
}

fn write_output(path: &str, text: &str, out: &mut dyn Write) -> Result<()> {
    if path == "-" {
        out.write_all(text.as_bytes())?;
    } else {
        fs::write(path, text).with_context(|| format!("writing {path}"))?;
    }
    Ok(())
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))
}

fn train_config(phase: Phase, args: &TrainArgs, common: &Common) -> Result<TrainConfig> {
    let mut cfg = match &args.config {
        Some(p) => TrainConfig::parse(&read_text(p)?, phase).with_context(|| format!("config {}", p.display()))?,
        None => TrainConfig::for_phase(phase),
    };
    if let Some(v) = args.epochs {
        cfg.epochs = v;
    }
    if let Some(v) = args.batch_size {
        cfg.batch_size = v;
    }
    if let Some(v) = args.lr {
        cfg.lr = v;
    }
    if let Some(v) = args.max_steps {
        cfg.max_steps = v;
    }
    if let Some(v) = args.warmup_fraction {
        cfg.warmup_fraction = v;
    }
    cfg.seed = common.seed;
    cfg.threads = common.threads;
    Ok(cfg)
}

fn decode_mode(args: &DecodeArgs, seed: u64) -> DecodeMode {
    match args.top_k {
        Some(k) => DecodeMode::TopK { k, temperature: args.temperature, seed },
        None => DecodeMode::Greedy,
    }
}

fn load_model(base: &Path, adapters: Option<&Path>) -> Result<Box<dyn Inpainter>> {
    let w = Checkpoint::load(base)
        .and_then(|c| c.to_decoder())
        .with_context(|| format!("base checkpoint {}", base.display()))?;
    Ok(match adapters {
        Some(p) => Box::new(
            Checkpoint::load(p)
                .and_then(|c| c.attach_to(w))
                .with_context(|| format!("adapter checkpoint {}", p.display()))?,
        ),
        None => Box::new(w),
    })
}

fn gradcheck_setup(name: &str) -> Result<(DecoderConfig, usize, usize)> {
    let (cfg, frames, width) = match name {
        "tiny" => (
            DecoderConfig { num_layers: 1, model_dim: 8, num_heads: 2, ffn_dim: 16, vocab_size: 7, num_codebooks: 1, max_seq_len: 8 },
            4,
            2,
        ),
        "small" => (
            DecoderConfig { num_layers: 2, model_dim: 16, num_heads: 2, ffn_dim: 32, vocab_size: 11, num_codebooks: 1, max_seq_len: 16 },
            8,
            4,
        ),
        other => bail!("unknown gradcheck config `{other}` (expected tiny or small)"),
    };
    Ok((cfg, frames, width))
}

/// Finite-difference check of a randomly initialised adapted model whose
/// gates are moved off zero so every path carries gradient.
pub fn gradcheck(name: &str, eps: f64, include_base: bool, seed: u64) -> Result<GradCheckReport> {
    use rand::Rng;
    let (cfg, frames, width) = gradcheck_setup(name)?;
    let base = DecoderWeights::<f64>::init(cfg, seed)?;
    let mut model = attach(base, width, seed)?;
    let mut rng = keyed(seed, domain::SAMPLE, 0);
    for layer in model.gates.gates.iter_mut() {
        for g in layer.iter_mut() {
            g.data_mut()[0] = rng.gen_range(-0.5..0.5);
        }
    }
    let v = cfg.vocab_size as u16;
    let x = TokenSequence::mono((0..frames).map(|_| rng.gen_range(0..v)).collect());
    let c = TokenSequence::mono((0..frames).map(|_| rng.gen_range(0..v)).collect());
    let mut mask = sample_mask(frames, 0.4, 0.8, &mut rng)?;
    if mask.masked_count() == 0 || mask.masked_count() == frames {
        mask = FrameMask::new((0..frames).map(|t| t >= frames / 2).collect());
    }
    let seq = assemble(&build_prefix(&x, &c, &mask)?, &x, &mask)?;
    Ok(gradcheck_adapted(&model, &seq, eps, include_base)?)
}

fn report_metrics(report: &EvalReport, out: &mut dyn Write) -> Result<()> {
    for r in &report.rows {
        writeln!(out, "pattern {} {} {}: {:.6} (n={})", r.pattern, r.mode.as_str(), r.metric, r.value, r.n)?;
    }
    Ok(())
}

/// Runs a parsed command.
pub fn dispatch(command: Command, out: &mut dyn Write) -> Result<i32> {
    match command {
        Command::GenData { spec, n, t, vocab, noise, out: path, common } => {
            let mut task = parse_task(&spec, vocab, common.seed)?;
            task.p_noise = noise;
            let data = gen_dataset(&task, n, t)?;
            data.write(&path).with_context(|| format!("writing {}", path.display()))?;
            writeln!(out, "records: {}", data.len())?;
        }
        Command::Pretrain { data, out: path, layout, arch, train, loss_log, common } => {
            let ds = Dataset::read(&data).with_context(|| format!("dataset {}", data.display()))?;
            let mut cfg = train_config(Phase::Pretrain, &train, &common)?;
            if let Some(l) = layout {
                cfg.layout = l.parse::<PretrainLayout>()?;
            }
            let dcfg = DecoderConfig {
                num_layers: arch.layers,
                model_dim: arch.dim,
                num_heads: arch.heads,
                ffn_dim: arch.ffn,
                vocab_size: ds.vocab,
                num_codebooks: ds.codebooks,
                max_seq_len: arch.max_seq_len.unwrap_or(2 * ds.frames),
            };
            let (w, report) = pretrain_base(dcfg, &cfg, &ds)?;
            Checkpoint::from_decoder(&w)?.save(&path).with_context(|| format!("writing {}", path.display()))?;
            if let Some(p) = loss_log {
                let mut csv = String::from("step,loss\n");
                for (i, l) in report.losses.iter().enumerate() {
                    csv.push_str(&format!("{},{l:.6}\n", i + 1));
                }
                fs::write(&p, csv).with_context(|| format!("writing {}", p.display()))?;
            }
            writeln!(out, "steps: {}", report.steps)?;
            writeln!(out, "final_loss: {:.6}", report.final_loss().unwrap_or(f64::NAN))?;
        }
        Command::Finetune { base, data, out: path, width, train, mask_lo, mask_hi, gate_log, common } => {
            let w = Checkpoint::load(&base)
                .and_then(|c| c.to_decoder())
                .with_context(|| format!("base checkpoint {}", base.display()))?;
            let ds = Dataset::read(&data).with_context(|| format!("dataset {}", data.display()))?;
            let mut cfg = train_config(Phase::Peft, &train, &common)?;
            if let Some(v) = mask_lo {
                cfg.mask_lo = v;
            }
            if let Some(v) = mask_hi {
                cfg.mask_hi = v;
            }
            let (model, log, report) = peft_finetune(&w, width, &cfg, &ds, None)?;
            Checkpoint::from_adapters(&model)?.save(&path).with_context(|| format!("writing {}", path.display()))?;
            if let Some(p) = gate_log {
                fs::write(&p, log.to_csv()).with_context(|| format!("writing {}", p.display()))?;
            }
            writeln!(out, "steps: {}", report.steps)?;
            writeln!(out, "final_loss: {:.6}", report.final_loss().unwrap_or(f64::NAN))?;
            for r in 0..4 {
                writeln!(out, "max_abs_gate_type{}: {:.6e}", r + 1, log.final_max(r))?;
            }
        }
        Command::Inpaint { base, adapters, data, record, mask_pattern, mask_file, out: path, mask_out, decode, common } => {
            let model = load_model(&base, adapters.as_deref())?;
            let ds = Dataset::read(&data).with_context(|| format!("dataset {}", data.display()))?;
            let Some((x, c)) = ds.records.get(record) else {
                bail!("record {record} out of range ({} records)", ds.len());
            };
            let mask = match (mask_pattern, mask_file) {
                (Some(k), _) => record_mask(common.seed, k, x.frames(), record)?,
                (None, Some(p)) => read_mask(&fs::read(&p).with_context(|| format!("reading {}", p.display()))?)?,
                (None, None) => unreachable!("clap requires one mask source"),
            };
            let pred = model.inpaint(x, c, &mask, decode_mode(&decode, common.seed))?;
            let mut csv = String::from("frame,masked");
            for k in 0..pred.codebooks() {
                csv.push_str(&format!(",token{k}"));
            }
            csv.push('\n');
            for t in 0..pred.frames() {
                csv.push_str(&format!("{t},{}", mask.is_masked(t) as u8));
                for tok in pred.frame(t) {
                    csv.push_str(&format!(",{tok}"));
                }
                csv.push('\n');
            }
            fs::write(&path, csv).with_context(|| format!("writing {}", path.display()))?;
            if let Some(p) = mask_out {
                let mut buf = Vec::new();
                write_mask(&mask, &mut buf)?;
                fs::write(&p, buf).with_context(|| format!("writing {}", p.display()))?;
            }
            let acc = hetadapt_core::evalharness::masked_accuracy(&pred, x, &mask)?;
            writeln!(out, "masked_accuracy: {acc:.6}")?;
        }
        Command::Eval { base, adapters, oracle, data, spec, patterns, mode, blank_condition, limit, name, out: path, decode, common } => {
            let ds = Dataset::read(&data).with_context(|| format!("dataset {}", data.display()))?;
            let task = parse_task(&spec, ds.vocab, common.seed)?;
            if let Some(p) = patterns.iter().find(|p| !(1..=3).contains(*p)) {
                bail!("mask pattern {p} is not one of 1, 2, 3");
            }
            let opts = EvalOptions {
                patterns,
                mode: mode.parse::<EvalMode>()?,
                seed: common.seed,
                decode: decode_mode(&decode, common.seed),
                blank_condition,
                limit,
                threads: common.threads,
            };
            let (model, default_name): (Box<dyn Inpainter + '_>, &str) = if oracle {
                (Box::new(Oracle(&task)), "oracle")
            } else {
                let base = base.expect("clap requires --base without --oracle");
                let label = if adapters.is_some() { "adapted" } else { "base" };
                (load_model(&base, adapters.as_deref())?, label)
            };
            let report = run_eval(model.as_ref(), name.as_deref().unwrap_or(default_name), &task, &ds, &opts)?;
            fs::write(&path, report.to_csv()).with_context(|| format!("writing {}", path.display()))?;
            report_metrics(&report, out)?;
        }
        Command::Gradcheck { config, eps, include_base, common } => {
            let report = gradcheck(&config, eps, include_base, common.seed)?;
            writeln!(out, "max_rel_error: {:.3e}", report.max_rel_error)?;
            writeln!(out, "entries_checked: {}", report.entries_checked)?;
            return Ok(if report.max_rel_error < GRADCHECK_TOLERANCE { EXIT_OK } else { EXIT_RUNTIME });
        }
        Command::ReducePiano { input, out: path, common: _ } => {
            let events = parse_events(&read_text(&input)?).with_context(|| format!("events {}", input.display()))?;
            write_output(&path, &format_events(&piano_reduce(&events)), out)?;
        }
        Command::RenderChords { chords, beats, out: path, common: _ } => {
            let spans = parse_chords(&read_text(&chords)?).with_context(|| format!("chords {}", chords.display()))?;
            let grid = parse_beats(&read_text(&beats)?).with_context(|| format!("beats {}", beats.display()))?;
            write_output(&path, &format_events(&render_block_chords(&spans, &grid)), out)?;
        }
        Command::ParamCount { arch, vocab, codebooks, width, common: _ } => {
            let cfg = DecoderConfig {
                num_layers: arch.layers,
                model_dim: arch.dim,
                num_heads: arch.heads,
                ffn_dim: arch.ffn,
                vocab_size: vocab,
                num_codebooks: codebooks,
                max_seq_len: arch.max_seq_len.unwrap_or(256),
            };
            cfg.validate()?;
            writeln!(out, "decoder_params: {}", cfg.param_count())?;
            writeln!(out, "adapter_params: {}", adapter_param_count(cfg.num_layers, width, cfg.model_dim))?;
        }
    }
    Ok(EXIT_OK)
}
