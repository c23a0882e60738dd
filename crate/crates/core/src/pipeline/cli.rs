//! `told` command-line interface. Exit codes: 0 success, 1 usage error, 2 runtime failure.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use log::info;
use serde::Serialize;

use super::data::{load_recordings, model_features};
use super::train::{
    load_extractor, load_stage1, load_stage2, stage1_feature_config, train_profile_extractor, train_stage1, train_stage2,
};
use super::{run_told, PipelineConfig, Refiner};
use crate::checkpoint::{average_checkpoints, Checkpoint};
use crate::error::{Error, Result};
use crate::features::{compute_logmel, read_wav, FeatureSequence};
use crate::metrics::{format_score_report, rttm_emit, rttm_parse_all, score_recordings};
use crate::simulator::{build_dataset, Manifest};

#[derive(Parser, Debug)]
#[command(name = "told", version, about = "Two-stage overlap-aware speaker diarization")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone, Default)]
struct Common {
    /// TOML configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override a configuration value, e.g. `--set trainer.lr=0.001`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Master seed for simulation and training.
    #[arg(long)]
    seed: Option<u64>,
}

impl Common {
    fn config(&self) -> Result<PipelineConfig> {
        let mut cfg = PipelineConfig::load(self.config.as_deref(), &self.set)?;
        if let Some(seed) = self.seed {
            cfg.set_seed(seed);
        }
        Ok(cfg)
    }
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Simulate a dataset of conversations.
    Simulate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: PathBuf,
        /// Number of mixtures.
        #[arg(long)]
        n: usize,
    },
    /// Train the speaker profile extractor.
    TrainProfiles {
        #[command(flatten)]
        common: Common,
        /// Dataset directory or manifest file.
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// JSON-lines training log.
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Train the end-to-end first stage.
    TrainStage1 {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Train the profile-based second stage with oracle profiles.
    TrainStage2 {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        /// Profile extractor checkpoint.
        #[arg(long)]
        profiles: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Diarize recordings and write RTTM.
    Infer {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        stage1: PathBuf,
        /// Second-stage checkpoint; without it only the first stage runs.
        #[arg(long)]
        stage2: Option<PathBuf>,
        /// Mono 16-bit WAV file.
        #[arg(long, conflicts_with_all = ["features", "data"])]
        audio: Option<PathBuf>,
        /// Frame features in the binary container (10 ms frames, before stacking).
        #[arg(long, conflicts_with = "data")]
        features: Option<PathBuf>,
        /// Dataset directory or manifest; one RTTM per recording is written to `--out`.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Output RTTM (single input, defaults to the input path with `.rttm`) or directory (`--data`).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Score hypothesis RTTM against reference RTTM.
    Score {
        #[command(flatten)]
        common: Common,
        #[arg(long = "ref")]
        reference: PathBuf,
        #[arg(long)]
        hyp: PathBuf,
        #[arg(long, default_value_t = crate::metrics::DEFAULT_COLLAR)]
        collar: f64,
        #[arg(long, default_value_t = crate::metrics::DEFAULT_RESOLUTION)]
        resolution: f64,
    },
    /// Average checkpoints parameter by parameter.
    AvgCkpt {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: PathBuf,
        #[arg(required = true)]
        inputs: Vec<PathBuf>,
    },
}

/// Parses `argv` (program name first) and runs the command.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match execute(cli.command) {
        Ok(()) => 0,
        Err(e @ Error::Config(_)) => {
            eprintln!("error: {e}");
            1
        }
        Err(e) => {
            eprintln!("error: {e}");
            2
        }
    }
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn write_log<T: Serialize>(path: Option<&Path>, rows: &[T]) -> Result<()> {
    let Some(path) = path else { return Ok(()) };
    let mut text = String::new();
    for r in rows {
        text.push_str(&serde_json::to_string(r)?);
        text.push('\n');
    }
    write_text(path, &text)
}

fn execute(command: Command) -> Result<()> {
    match command {
        Command::Simulate { common, out, n } => {
            let cfg = common.config()?;
            let manifest = build_dataset(&cfg.sim, n, &out)?;
            println!("wrote {} mixtures to {}", manifest.len(), out.display());
        }
        Command::TrainProfiles { common, data, out, log } => {
            let cfg = common.config()?;
            let recs = load_recordings(&Manifest::load(&data)?, &cfg)?;
            let (_, report) = train_profile_extractor(&cfg, &recs)?;
            report.checkpoint.save(&out)?;
            write_log(log.as_deref(), &report.epochs)?;
            println!(
                "profile extractor: {} speakers, held-out accuracy {:.3}, cosine same {:.3} / different {:.3}, margin {} scale {}",
                report.speakers.len(),
                report.heldout_accuracy,
                report.mean_same_cosine,
                report.mean_diff_cosine,
                cfg.soap.arc_margin,
                cfg.soap.arc_scale
            );
        }
        Command::TrainStage1 { common, data, out, log } => {
            let cfg = common.config()?;
            let recs = load_recordings(&Manifest::load(&data)?, &cfg)?;
            let (_, report) = train_stage1(&cfg, &recs)?;
            report.checkpoint.save(&out)?;
            write_log(log.as_deref(), &report.epochs)?;
            if let Some(last) = report.epochs.last() {
                println!(
                    "stage1: {} epochs, final loss {:.4}, train DER {}",
                    last.epoch,
                    last.total,
                    last.train_der.map(|d| format!("{:.4}", d)).unwrap_or_else(|| "-".into())
                );
            }
        }
        Command::TrainStage2 {
            common,
            data,
            profiles,
            out,
            log,
        } => {
            let cfg = common.config()?;
            let recs = load_recordings(&Manifest::load(&data)?, &cfg)?;
            let extractor = load_extractor(&Checkpoint::load(&profiles)?)?;
            let (_, report) = train_stage2(&cfg, &recs, &extractor)?;
            report.checkpoint.save(&out)?;
            write_log(log.as_deref(), &report.epochs)?;
            if let Some(last) = report.epochs.last() {
                println!("stage2: {} epochs, final loss {:.4}", last.epoch, last.total);
            }
        }
        Command::Infer {
            common,
            stage1,
            stage2,
            audio,
            features,
            data,
            out,
        } => infer(&common, &stage1, stage2.as_deref(), audio, features, data, out)?,
        Command::Score {
            common: _,
            reference,
            hyp,
            collar,
            resolution,
        } => {
            let read = |p: &Path| fs::read_to_string(p).map_err(|e| Error::io(p, e));
            let refs = rttm_parse_all(&read(&reference)?)?;
            let hyps = rttm_parse_all(&read(&hyp)?)?;
            let rows = score_recordings(&refs, &hyps, collar, resolution)?;
            print!("{}", format_score_report(&rows)?);
        }
        Command::AvgCkpt { common: _, out, inputs } => {
            let ckpts = inputs.iter().map(|p| Checkpoint::load(p)).collect::<Result<Vec<_>>>()?;
            average_checkpoints(&ckpts)?.save(&out)?;
            println!("averaged {} checkpoints into {}", ckpts.len(), out.display());
        }
    }
    Ok(())
}

fn infer(
    common: &Common,
    stage1: &Path,
    stage2: Option<&Path>,
    audio: Option<PathBuf>,
    features: Option<PathBuf>,
    data: Option<PathBuf>,
    out: Option<PathBuf>,
) -> Result<()> {
    let mut cfg = common.config()?;
    let first = Checkpoint::load(stage1)?;
    let model = load_stage1(&first)?;
    let trained = stage1_feature_config(&first)?;
    if trained != cfg.features {
        info!("using the feature settings stored with the stage-1 checkpoint");
        cfg.features = trained;
    }
    let second = match stage2 {
        Some(p) => Some(load_stage2(&Checkpoint::load(p)?)?),
        None => None,
    };
    let refiner = second.as_ref().map(|(soap, extractor)| Refiner { soap, extractor });
    let diarize = |feats: &FeatureSequence| -> Result<String> {
        let result = run_told(feats, &model, refiner.as_ref(), &cfg)?;
        info!("{}: diagnostics {:?}", feats.origin_id, result.diagnostics);
        Ok(rttm_emit(&result.segments))
    };
    let stem = |p: &Path| p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    if let Some(path) = audio.or(features.clone()) {
        let feats = if features.is_some() {
            let mut raw = FeatureSequence::load(&path)?;
            raw.origin_id = stem(&path);
            model_features(&raw, &cfg)?
        } else {
            let mut f = compute_logmel(&read_wav(&path)?, &cfg.features)?;
            f.origin_id = stem(&path);
            f
        };
        let target = out.unwrap_or_else(|| path.with_extension("rttm"));
        write_text(&target, &diarize(&feats)?)?;
        println!("wrote {}", target.display());
    } else if let Some(data) = data {
        let dir = out.ok_or_else(|| Error::Config("--data requires --out <directory>".into()))?;
        let recs = load_recordings(&Manifest::load(&data)?, &cfg)?;
        for rec in &recs {
            write_text(&dir.join(format!("{}.rttm", rec.id)), &diarize(&rec.features)?)?;
        }
        println!("wrote {} RTTM files to {}", recs.len(), dir.display());
    } else {
        return Err(Error::Config("one of --audio, --features or --data is required".into()));
    }
    Ok(())
}
