use std::fs;
use std::io::{BufReader, BufWriter};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anchorstream::experiment::{emit_results, lm_check, lm_check_csv, ExperimentConfig, LmCheckConfig, Summary};
use anchorstream::io::write_atomic;
use anchorstream::metrics::{pareto_csv, pareto_summary, ParadigmOutcome};
use anchorstream::model::{load_model, save_model, ModelState};
use anchorstream::stream::{build_stream, read_jsonl, write_jsonl, StreamDataset};
use anchorstream::train::{pretrain_base, run_experiment, Paradigm};
use anchorstream::{validate, Error};
use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(name = "anchorstream", version, about = "Continual low-rank adaptation on a synthetic two-domain stream")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// JSON file of overrides on top of the preset defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Master seed; falls back to $ANCHORSTREAM_SEED, then the config, then 7.
    #[arg(long, env = "ANCHORSTREAM_SEED")]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Number of target segments.
    #[arg(long)]
    segments: Option<usize>,
    /// Read the stream from a `gen-data` export instead of regenerating it.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Pretrained base written by `pretrain`; pretrains in-process when absent.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Build the synthetic stream and export it as JSON lines.
    GenData(Common),
    /// Train the base model on the general domain.
    Pretrain(Common),
    /// Adapt the base over every target segment under one preset.
    Adapt {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        preset: Option<String>,
        /// Also write adapters, importance and buffer state per segment.
        #[arg(long)]
        save_state: bool,
    },
    /// Run several presets on the same base and seed; writes a Pareto table.
    Compare {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_delimiter = ',', default_value = "V1.1,V2.1,V3.1,V4.5,V5.1")]
        presets: Vec<String>,
    },
    /// Greedy vs n-gram shallow fusion decoding, before and after adaptation.
    LmCheck {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value = "V3.1")]
        preset: String,
        #[arg(long)]
        lm_weight: Option<f64>,
        #[arg(long)]
        beam_width: Option<usize>,
        #[arg(long)]
        word_bonus: Option<f64>,
    },
    /// Run the oracle suites; exit status reflects the outcome.
    Validate {
        #[arg(long, env = "ANCHORSTREAM_SEED", default_value_t = 1)]
        seed: u64,
    },
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::Json(_) => 2,
        Error::Convergence { .. } => 3,
        Error::GradientExplosion { .. } => 4,
        _ => 1,
    }
}

fn parse_preset(s: &str) -> anchorstream::Result<Paradigm> {
    s.parse()
}

fn resolve(common: &Common, preset: Option<Paradigm>) -> anchorstream::Result<ExperimentConfig> {
    let overrides = match &common.config {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| Error::Config(format!("cannot read config {}: {e}", p.display())))?;
            Some(serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", p.display())))?)
        }
        None => None,
    };
    let mut cfg = ExperimentConfig::resolve(preset, common.seed, overrides.as_ref())?;
    if let Some(k) = common.segments {
        cfg.stream.k_segments = k;
        cfg.validate()?;
    }
    Ok(cfg)
}

fn dataset(common: &Common, cfg: &ExperimentConfig) -> anchorstream::Result<StreamDataset> {
    match &common.data {
        Some(p) => {
            let f = fs::File::open(p).map_err(|e| Error::Config(format!("cannot open stream file {}: {e}", p.display())))?;
            let mut ds = read_jsonl(BufReader::new(f))?;
            if let Some(k) = common.segments {
                ds.target_segments.truncate(k);
            }
            Ok(ds)
        }
        None => build_stream(&cfg.stream, cfg.seed),
    }
}

fn base_model(common: &Common, cfg: &ExperimentConfig, data: &StreamDataset) -> anchorstream::Result<ModelState> {
    match &common.checkpoint {
        Some(p) if !p.exists() => Err(Error::Config(format!(
            "checkpoint not found: {} (create one with `anchorstream pretrain`)",
            p.display()
        ))),
        Some(p) => load_model(p),
        None => {
            log::info!("pretraining base (seed {})", cfg.seed);
            Ok(pretrain_base(&data.general_train, &data.general_dev, &cfg.model, &cfg.pretrain, cfg.seed)?.0)
        }
    }
}

fn adapt(cfg: &ExperimentConfig, base: &ModelState, data: &StreamDataset, out: &Path, save_state: bool) -> anchorstream::Result<Summary> {
    let state_dir = out.join("checkpoints");
    if save_state {
        fs::create_dir_all(&state_dir)?;
        save_model(base, &state_dir.join("base.json"))?;
    }
    let outcome = run_experiment(base, &cfg.train, data, cfg.seed, |run, report| {
        if save_state {
            let dir = state_dir.join(format!("segment-{:02}", report.segment));
            fs::create_dir_all(&dir)?;
            write_atomic(&dir.join("adapters.json"), serde_json::to_string(&run.model.adapters)?.as_bytes())?;
            write_atomic(&dir.join("fisher.json"), serde_json::to_string(&run.fisher)?.as_bytes())?;
            write_atomic(&dir.join("buffer.json"), run.buffer.snapshot().to_json()?.as_bytes())?;
        }
        Ok(())
    })?;
    if outcome.base_fingerprint_before != outcome.base_fingerprint_after {
        return Err(Error::Domain("base weights changed during adaptation".into()));
    }
    let summary = Summary::new(cfg, outcome.baseline, &outcome.reports, outcome.base_fingerprint_after)?;
    emit_results(&summary, out)?;
    Ok(summary)
}

fn run(cli: Cli) -> anchorstream::Result<()> {
    match cli.command {
        Command::GenData(common) => {
            let cfg = resolve(&common, None)?;
            let data = build_stream(&cfg.stream, cfg.seed)?;
            fs::create_dir_all(&common.out)?;
            let mut buf = Vec::new();
            write_jsonl(&data, cfg.stream.vocab_size, BufWriter::new(&mut buf))?;
            write_atomic(&common.out.join("stream.jsonl"), &buf)?;
            println!("wrote {} utterances to {}", data.len(), common.out.join("stream.jsonl").display());
        }
        Command::Pretrain(common) => {
            let cfg = resolve(&common, None)?;
            let data = dataset(&common, &cfg)?;
            let (base, log) = pretrain_base(&data.general_train, &data.general_dev, &cfg.model, &cfg.pretrain, cfg.seed)?;
            fs::create_dir_all(&common.out)?;
            save_model(&base, &common.out.join("base.json"))?;
            write_atomic(&common.out.join("pretrain.json"), serde_json::to_string_pretty(&log)?.as_bytes())?;
            println!(
                "base reached general dev WER {:.2}% after {} epochs; saved {}",
                log.general_dev_wer.last().copied().unwrap_or(f64::NAN),
                log.epochs,
                common.out.join("base.json").display()
            );
        }
        Command::Adapt { common, preset, save_state } => {
            let preset = preset.as_deref().map(parse_preset).transpose()?;
            let cfg = resolve(&common, preset)?;
            let data = dataset(&common, &cfg)?;
            let base = base_model(&common, &cfg, &data)?;
            let s = adapt(&cfg, &base, &data, &common.out, save_state)?;
            println!(
                "{}: target WER {:.2} -> {:.2}, general WER {:.2} -> {:.2} (forgetting {:+.2}); results in {}",
                cfg.preset,
                s.baseline.target_wer,
                s.final_scores.target_wer,
                s.baseline.general_wer,
                s.final_scores.general_wer,
                s.final_forgetting,
                common.out.display()
            );
        }
        Command::Compare { common, presets } => {
            let presets: Vec<Paradigm> = presets.iter().map(|p| parse_preset(p.trim())).collect::<Result<_, _>>()?;
            let first = resolve(&common, presets.first().copied())?;
            let data = dataset(&common, &first)?;
            let base = base_model(&common, &first, &data)?;
            let mut summaries = Vec::new();
            for p in &presets {
                let cfg = resolve(&common, Some(*p))?;
                if cfg.base_key() != first.base_key() {
                    return Err(Error::Config("compared presets must share model, pretrain and stream settings".into()));
                }
                summaries.push(adapt(&cfg, &base, &data, &common.out.join(p.name()), false)?);
            }
            let outcomes: Vec<ParadigmOutcome<'_>> = summaries
                .iter()
                .map(|s| ParadigmOutcome {
                    paradigm: s.preset.name(),
                    baseline_target_wer: s.baseline.target_wer,
                    baseline_general_wer: s.baseline.general_wer,
                    final_target_wer: s.final_scores.target_wer,
                    final_general_wer: s.final_scores.general_wer,
                })
                .collect();
            let csv = pareto_csv(&pareto_summary(&outcomes));
            write_atomic(&common.out.join("pareto.csv"), csv.as_bytes())?;
            print!("{csv}");
        }
        Command::LmCheck { common, preset, lm_weight, beam_width, word_bonus } => {
            let cfg = resolve(&common, Some(parse_preset(&preset)?))?;
            let data = dataset(&common, &cfg)?;
            let base = base_model(&common, &cfg, &data)?;
            let outcome = run_experiment(&base, &cfg.train, &data, cfg.seed, |_, _| Ok(()))?;
            let mut lm_cfg = LmCheckConfig::default();
            if let Some(w) = lm_weight {
                lm_cfg.lm_weight = w;
            }
            if let Some(b) = beam_width {
                lm_cfg.beam_width = b;
            }
            if let Some(b) = word_bonus {
                lm_cfg.word_bonus = b;
            }
            let baseline = anchorstream::train::attach_adapters(&base, &cfg.train, cfg.seed)?;
            let check = lm_check(&baseline, &outcome.model, &data, &lm_cfg)?;
            fs::create_dir_all(&common.out)?;
            let csv = lm_check_csv(&check);
            write_atomic(&common.out.join("lm_check.csv"), csv.as_bytes())?;
            print!("{csv}");
        }
        Command::Validate { seed } => {
            let suites = validate::run_all(seed)?;
            let mut ok = true;
            for s in &suites {
                println!(
                    "{} {}: {} cases, worst {:e} (tolerance {:e}), {:.2}s",
                    if s.passed { "PASS" } else { "FAIL" },
                    s.name,
                    s.cases,
                    s.worst,
                    s.tolerance,
                    s.seconds
                );
                ok &= s.passed;
            }
            if !ok {
                return Err(Error::Domain("oracle suites failed".into()));
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
