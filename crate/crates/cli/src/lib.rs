//! Command-line front end: toy training, embedding extraction, scoring and
//! filterbank inspection.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use rayon::prelude::*;

use rawnet2::audio::{read_wav, write_wav};
use rawnet2::eval::{self, EmbeddingStore, Label, Trial};
use rawnet2::io::{read_text, write_atomic};
use rawnet2::train::{loss_csv, ToyRecipe};
use rawnet2::{Error, ModelParams, Result};

/// Frequency grid resolution used by `inspect-filters`.
const RESPONSE_BINS: usize = 4000;

#[derive(Debug, Parser)]
#[command(name = "rawnet2", version, about = "Raw-waveform speaker embeddings")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a small model on synthetic speakers.
    TrainToy {
        /// Recipe file with model and training keys.
        #[arg(long)]
        config: PathBuf,
        /// Weights file to write.
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        /// Number of synthetic speakers (sets n_speakers).
        #[arg(long)]
        speakers: Option<usize>,
        /// Per-epoch loss CSV; defaults to the weights path with `.loss.csv`.
        #[arg(long)]
        loss_csv: Option<PathBuf>,
    },
    /// Write held-out utterances of a recipe's synthetic speakers as WAV
    /// files, with a file list and an all-pairs trial list.
    Synth {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 4)]
        utterances: usize,
        #[arg(long, default_value_t = 1000)]
        seed: u64,
    },
    /// Extract one embedding per listed WAV file.
    Extract {
        #[arg(long)]
        weights: PathBuf,
        /// Text file with one WAV path per line.
        #[arg(long)]
        wav_list: PathBuf,
        /// Directory receiving the embedding cache.
        #[arg(long)]
        out: PathBuf,
        /// Average over overlapping crops instead of using a single crop.
        #[arg(long)]
        tta: bool,
        #[arg(long, default_value_t = 1)]
        jobs: usize,
    },
    /// Cosine-score a trial list.
    Score {
        #[arg(long)]
        trials: PathBuf,
        #[arg(long)]
        embeddings: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score trials and write EER report, scores and DET curve.
    Eval {
        #[arg(long)]
        trials: PathBuf,
        #[arg(long)]
        embeddings: PathBuf,
        #[arg(long)]
        report: PathBuf,
    },
    /// Dump sinc front-end cutoffs and measured peak frequencies as CSV.
    InspectFilters {
        #[arg(long)]
        weights: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

/// Parse `args` (program name first) and run; returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    match run(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}

pub fn run(command: Command) -> Result<()> {
    match command {
        Command::TrainToy {
            config,
            out,
            epochs,
            seed,
            speakers,
            loss_csv,
        } => train_toy(&config, &out, epochs, seed, speakers, loss_csv),
        Command::Synth {
            config,
            out,
            utterances,
            seed,
        } => synth(&config, &out, utterances, seed),
        Command::Extract {
            weights,
            wav_list,
            out,
            tta,
            jobs,
        } => extract(&weights, &wav_list, &out, tta, jobs),
        Command::Score {
            trials,
            embeddings,
            out,
        } => {
            let trials = eval::parse_trials(&trials)?;
            let store = EmbeddingStore::load(&embeddings)?;
            let scores = eval::score_trials(&trials, &store)?;
            write_atomic(&out, eval::format_scores(&scores).as_bytes())
        }
        Command::Eval {
            trials,
            embeddings,
            report,
        } => {
            let trials = eval::parse_trials(&trials)?;
            let store = EmbeddingStore::load(&embeddings)?;
            let e = eval::evaluate(&trials, &store)?;
            eval::write_evaluation(&report, &e)?;
            print!("{}", e.report.to_text());
            Ok(())
        }
        Command::InspectFilters { weights, out } => inspect_filters(&weights, &out),
    }
}

fn train_toy(
    config: &Path,
    out: &Path,
    epochs: Option<usize>,
    seed: Option<u64>,
    speakers: Option<usize>,
    loss_path: Option<PathBuf>,
) -> Result<()> {
    let mut recipe = ToyRecipe::load(config)?;
    if let Some(e) = epochs {
        recipe.train.epochs = e;
    }
    if let Some(s) = seed {
        recipe.train.seed = s;
    }
    if let Some(n) = speakers {
        recipe.model.n_speakers = n;
        recipe.model.validate()?;
    }
    let outcome = recipe.run()?;
    outcome.model.save(out)?;
    let loss_path = loss_path.unwrap_or_else(|| out.with_extension("loss.csv"));
    write_atomic(&loss_path, loss_csv(&outcome.loss_history).as_bytes())?;
    if let (Some(first), Some(last)) = (outcome.loss_history.first(), outcome.loss_history.last()) {
        println!(
            "mean CCE {first:.4} -> {last:.4} over {} epochs",
            outcome.loss_history.len()
        );
    }
    Ok(())
}

fn synth(config: &Path, out: &Path, per_speaker: usize, seed: u64) -> Result<()> {
    let recipe = ToyRecipe::load(config)?;
    let data = recipe.held_out(per_speaker, seed)?;
    let mut ids = Vec::with_capacity(data.utterances.len());
    let mut counts = vec![0usize; data.speakers.len()];
    for (spk, w) in &data.utterances {
        let path = out
            .join(format!("spk{spk:02}"))
            .join(format!("utt{:02}.wav", counts[*spk]));
        counts[*spk] += 1;
        let dir = path.parent().expect("utterance path has a parent");
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        write_wav(&path, w)?;
        ids.push((*spk, path.display().to_string()));
    }
    let list: String = ids.iter().map(|(_, p)| format!("{p}\n")).collect();
    write_atomic(&out.join("wav.lst"), list.as_bytes())?;
    let mut trials = Vec::new();
    for (i, (a, pa)) in ids.iter().enumerate() {
        for (b, pb) in &ids[i + 1..] {
            trials.push(Trial {
                label: if a == b {
                    Label::Target
                } else {
                    Label::Nontarget
                },
                enroll_id: pa.clone(),
                test_id: pb.clone(),
            });
        }
    }
    write_atomic(
        &out.join("trials.txt"),
        eval::format_trials(&trials).as_bytes(),
    )
}

fn extract(weights: &Path, wav_list: &Path, out: &Path, tta: bool, jobs: usize) -> Result<()> {
    let model = ModelParams::load(weights)?;
    let paths: Vec<String> = read_text(wav_list)?
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .map(String::from)
        .collect();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| Error::Config(format!("cannot start {jobs} workers: {e}")))?;
    let results: Vec<Result<rawnet2::Embedding>> = pool.install(|| {
        paths
            .par_iter()
            .map(|p| model.extract_embedding(&read_wav(p)?, tta))
            .collect()
    });
    let mut store = EmbeddingStore::new();
    let mut failed = 0;
    for (path, r) in paths.iter().zip(results) {
        match r {
            Ok(e) => store.insert(path.clone(), e)?,
            Err(e) => {
                eprintln!("error: {path}: {e}");
                failed += 1;
            }
        }
    }
    store.save(out)?;
    println!(
        "{} embeddings written to {}",
        store.len(),
        EmbeddingStore::path_in(out).display()
    );
    if failed > 0 {
        return Err(Error::Contract(format!(
            "{failed} of {} files failed",
            paths.len()
        )));
    }
    Ok(())
}

fn inspect_filters(weights: &Path, out: &Path) -> Result<()> {
    let model = ModelParams::load(weights)?;
    let fb = model.sinc_filterbank().ok_or_else(|| {
        Error::Config(format!(
            "{} has no sinc layer (frontend = {})",
            weights.display(),
            model.config().frontend.name()
        ))
    })?;
    let mut csv = String::from("filter,f1_hz,f2_hz,peak_hz\n");
    for (i, r) in fb.responses(RESPONSE_BINS)?.iter().enumerate() {
        let _ = writeln!(csv, "{i},{:.3},{:.3},{:.3}", r.f1, r.f2, r.peak_hz);
    }
    write_atomic(out, csv.as_bytes())
}
