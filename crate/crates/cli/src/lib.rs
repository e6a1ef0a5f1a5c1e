//! Subcommands of the `fullinfo` executable.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use fullinfo::data::{load_archive, SpeakerMap, Utterance};
use fullinfo::dsp::{fbank_with, mean_normalize, read_wav, FbankConfig};
use fullinfo::eval::{
    self, evaluate_model, extract_dvector, lda_fit, lda_project, parse_conditions, score_trials,
    Condition, DVector, EvalConfig, LdaTransform, TrialList,
};
use fullinfo::featio::{write_archive, Archive};
use fullinfo::net::{load_model, save_model, Model, NetConfig};
use fullinfo::synth::{generate, split, CorpusSpec};
use fullinfo::train::{run_fullinfo, train_baseline, warm_up, ClassifierPolicy, Streams, TrainConfig};
use fullinfo::Error;

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;
pub const EXIT_NUMERICAL: i32 = 3;

pub const RESOLVED_CONFIG: &str = "resolved_config.json";

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Core(Error),
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        CliError::Core(e)
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "usage error: {m}"),
            CliError::Core(e) => write!(f, "{e}"),
        }
    }
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) | CliError::Core(Error::Config(_)) => EXIT_USAGE,
            CliError::Core(Error::Numerical(_)) => EXIT_NUMERICAL,
            CliError::Core(_) => EXIT_DATA,
        }
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;

fn usage<T>(msg: impl Into<String>) -> CliResult<T> {
    Err(CliError::Usage(msg.into()))
}

#[derive(Debug, Parser)]
#[command(name = "fullinfo", version, about = "Speaker feature learning with full-info training")]
pub struct Cli {
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// More logging; repeat for debug output.
    #[arg(long, short = 'v', global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Log mel filterbanks for a directory of WAV files.
    Fbank(FbankArgs),
    /// Write a synthetic corpus as train/enroll/test archives.
    Synth(SynthArgs),
    /// Train a baseline or full-info model.
    Train(TrainArgs),
    /// Write one d-vector per utterance as CSV.
    Extract(ExtractArgs),
    /// Fit an LDA projection on d-vectors of labelled data.
    Lda(LdaArgs),
    /// Score a trial list by cosine similarity.
    Score(ScoreArgs),
    /// EER per test condition.
    Eval(EvalArgs),
    /// Write frame-level features as CSV.
    Export(ExportArgs),
}

#[derive(Debug, Args)]
pub struct FbankArgs {
    #[arg(long)]
    pub in_dir: PathBuf,
    #[arg(long)]
    pub out_dir: PathBuf,
    /// JSON filterbank configuration.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Skip per-utterance mean normalization.
    #[arg(long)]
    pub no_mean_norm: bool,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub out_dir: PathBuf,
    /// JSON corpus specification; defaults to the standard corpus.
    #[arg(long)]
    pub spec: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Frames per evaluation test utterance.
    #[arg(long)]
    pub test_frames: Option<usize>,
    #[arg(long, default_value_t = 50)]
    pub train_speakers: usize,
    #[arg(long, default_value_t = 20)]
    pub eval_speakers: usize,
    #[arg(long, default_value_t = 10)]
    pub enroll_utts: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Baseline,
    Fullinfo,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NetPreset {
    Default,
    Small,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long, value_enum)]
    pub mode: Mode,
    /// Training archive directory.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out_dir: PathBuf,
    /// JSON file with optional `train` and `net` sections.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub net_preset: Option<NetPreset>,
    /// Baseline model that supplies the warm-up speaker vectors.
    #[arg(long)]
    pub warmup_from: Option<PathBuf>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub momentum: Option<f64>,
    #[arg(long)]
    pub batch_chunks: Option<usize>,
    #[arg(long)]
    pub chunk_frames: Option<usize>,
    #[arg(long, value_enum)]
    pub policy: Option<PolicyArg>,
    #[arg(long)]
    pub validation_fraction: Option<f64>,
    #[arg(long)]
    pub warmup_max_epochs: Option<usize>,
    /// Baseline: stop once validation accuracy plateaus.
    #[arg(long)]
    pub stop_on_plateau: bool,
    /// Keep the learning rate fixed instead of halving it on plateaus.
    #[arg(long)]
    pub constant_lr: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum PolicyArg {
    WithinEpoch,
    Frozen,
}

#[derive(Debug, Args)]
pub struct ExtractArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Keep d-vectors un-normalized.
    #[arg(long)]
    pub no_normalize: bool,
}

#[derive(Debug, Args)]
pub struct LdaArgs {
    #[arg(long)]
    pub model: PathBuf,
    /// Labelled archive used to fit the projection.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Output dimension; 0 picks the default.
    #[arg(long, default_value_t = 0)]
    pub lda_dim: usize,
}

#[derive(Debug, Args)]
pub struct ScoreArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub enroll: PathBuf,
    #[arg(long)]
    pub test: PathBuf,
    /// Trial file: `enroll_spk test_utt target|nontarget` per line.
    #[arg(long)]
    pub trials: PathBuf,
    /// LDA projection written by `lda`.
    #[arg(long)]
    pub lda: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub model: PathBuf,
    /// Training-speaker archive for fitting LDA.
    #[arg(long)]
    pub train_data: Option<PathBuf>,
    #[arg(long)]
    pub enroll: PathBuf,
    #[arg(long)]
    pub test: PathBuf,
    #[arg(long)]
    pub out_dir: PathBuf,
    /// Comma-separated list, e.g. S20f,L3s.
    #[arg(long, default_value = "S20f,S50f,S100f,L3s,L9s,L18s")]
    pub condition: String,
    /// LDA output dimension; 0 picks the default.
    #[arg(long, default_value_t = 0)]
    pub lda_dim: usize,
    #[arg(long)]
    pub no_lda: bool,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct ExportArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Frames written per utterance (0 = all).
    #[arg(long, default_value_t = 0)]
    pub max_frames: usize,
}

/// Parses arguments, runs the command and returns the process exit code.
pub fn main_with_args<I, S>(args: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).try_init();
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            log::warn!("thread pool already initialized: {e}");
        }
    }
    match run(&cli.command) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

pub fn run(cmd: &Command) -> CliResult<()> {
    match cmd {
        Command::Fbank(a) => cmd_fbank(a),
        Command::Synth(a) => cmd_synth(a),
        Command::Train(a) => cmd_train(a),
        Command::Extract(a) => cmd_extract(a),
        Command::Lda(a) => cmd_lda(a),
        Command::Score(a) => cmd_score(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Export(a) => cmd_export(a),
    }
}

fn create_dir(dir: &Path) -> CliResult<()> {
    fs::create_dir_all(dir).map_err(|e| Error::Io {
        path: dir.to_path_buf(),
        source: e,
    })?;
    Ok(())
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> CliResult<()> {
    fs::write(path, contents).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    Ok(())
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> CliResult<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    serde_json::from_str(&text)
        .map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))
}

fn echo_config<T: Serialize>(dir: &Path, cfg: &T) -> CliResult<()> {
    let json = serde_json::to_string_pretty(cfg).map_err(Error::from)?;
    write_file(&dir.join(RESOLVED_CONFIG), json + "\n")
}

fn load_utts(dir: &Path) -> CliResult<Vec<Utterance>> {
    Ok(load_archive(&Archive::open(dir)?)?)
}

fn wav_files(dir: &Path, out: &mut Vec<PathBuf>) -> CliResult<()> {
    let rd = fs::read_dir(dir).map_err(|e| Error::Io {
        path: dir.to_path_buf(),
        source: e,
    })?;
    let mut entries: Vec<PathBuf> = rd.filter_map(|e| e.ok().map(|e| e.path())).collect();
    entries.sort();
    for p in entries {
        if p.is_dir() {
            wav_files(&p, out)?;
        } else if p.extension().is_some_and(|e| e.eq_ignore_ascii_case("wav")) {
            out.push(p);
        }
    }
    Ok(())
}

/// Speaker of a WAV file: its parent directory below `root`, or else the
/// file-name prefix before the first `-` or `_`.
fn speaker_of(root: &Path, path: &Path) -> String {
    let stem = path.file_stem().unwrap_or_default().to_string_lossy().to_string();
    match path.parent() {
        Some(p) if p != root => p.file_name().unwrap_or_default().to_string_lossy().to_string(),
        _ => stem.split(['-', '_']).next().unwrap_or(&stem).to_string(),
    }
}

#[derive(Debug, Serialize)]
struct FbankRun<'a> {
    in_dir: &'a Path,
    mean_norm: bool,
    fbank: &'a FbankConfig,
}

pub fn cmd_fbank(a: &FbankArgs) -> CliResult<()> {
    let cfg: FbankConfig = match &a.config {
        Some(p) => read_json(p)?,
        None => FbankConfig::default(),
    };
    let mut files = Vec::new();
    wav_files(&a.in_dir, &mut files)?;
    if files.is_empty() {
        return Err(Error::InsufficientData(format!("no WAV files under {}", a.in_dir.display())).into());
    }
    let mut done = Vec::new();
    let mut failed = 0;
    let mut seen = BTreeMap::new();
    for f in &files {
        let utt = f.file_stem().unwrap_or_default().to_string_lossy().to_string();
        if let Some(prev) = seen.insert(utt.clone(), f.clone()) {
            eprintln!("{}: duplicate utterance id '{utt}' (also {})", f.display(), prev.display());
            failed += 1;
            continue;
        }
        let feats = read_wav(f).and_then(|w| fbank_with(&w, &cfg));
        match feats {
            Ok(m) => {
                let m = if a.no_mean_norm { m } else { mean_normalize(&m) };
                done.push((utt, speaker_of(&a.in_dir, f), m));
            }
            Err(e) => {
                eprintln!("{}: {e}", f.display());
                failed += 1;
            }
        }
    }
    create_dir(&a.out_dir)?;
    write_archive(&a.out_dir, done.iter().map(|(u, s, m)| (u.as_str(), s.as_str(), m)))?;
    echo_config(
        &a.out_dir,
        &FbankRun {
            in_dir: &a.in_dir,
            mean_norm: !a.no_mean_norm,
            fbank: &cfg,
        },
    )?;
    let frames: usize = done.iter().map(|(_, _, m)| m.time()).sum();
    println!("{} utterances, {frames} frames, {failed} failed", done.len());
    if failed > 0 {
        return Err(Error::Format {
            offset: 0,
            msg: format!("{failed} of {} files could not be processed", files.len()),
        }
        .into());
    }
    Ok(())
}

#[derive(Debug, Serialize)]
struct SynthRun<'a> {
    corpus: &'a CorpusSpec,
    train_speakers: usize,
    eval_speakers: usize,
    enroll_utts: usize,
    checksum: String,
}

pub fn cmd_synth(a: &SynthArgs) -> CliResult<()> {
    let mut spec: CorpusSpec = match &a.spec {
        Some(p) => read_json(p)?,
        None => CorpusSpec::standard(0),
    };
    if let Some(s) = a.seed {
        spec.seed = s;
    }
    if let Some(t) = a.test_frames {
        spec.test_frames_per_utt = Some(t);
    }
    if spec.speaker_spread == 0.0 || spec.separability() < 1e-3 {
        log::warn!("degenerate separability");
        eprintln!("warning: degenerate separability ({:.3e})", spec.separability());
    }
    let corpus = generate(&spec)?;
    let parts = split(&corpus, a.train_speakers, a.eval_speakers, a.enroll_utts)?;
    create_dir(&a.out_dir)?;
    for (name, utts) in [("train", &parts.train), ("enroll", &parts.enroll), ("test", &parts.test)] {
        write_archive(
            a.out_dir.join(name),
            utts.iter().map(|u| (u.utt_id.as_str(), u.speaker_id.as_str(), &u.feats)),
        )?;
    }
    let checksum = format!("{:016x}", corpus.checksum());
    echo_config(
        &a.out_dir,
        &SynthRun {
            corpus: &spec,
            train_speakers: a.train_speakers,
            eval_speakers: a.eval_speakers,
            enroll_utts: a.enroll_utts,
            checksum: checksum.clone(),
        },
    )?;
    println!(
        "{} speakers x {} utterances, checksum {checksum}",
        spec.n_speakers, spec.utts_per_speaker
    );
    Ok(())
}

/// Contents of a training config file; every section is optional.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainFile {
    pub train: TrainConfig,
    pub net: Option<NetConfig>,
    pub net_preset: Option<NetPreset>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ResolvedTrain {
    pub mode: Mode,
    pub data: PathBuf,
    pub train: TrainConfig,
    pub net: NetConfig,
}

fn resolve_train(a: &TrainArgs, speakers: usize) -> CliResult<ResolvedTrain> {
    let file: TrainFile = match &a.config {
        Some(p) => read_json(p)?,
        None => TrainFile::default(),
    };
    let mut t = file.train;
    if let Some(v) = a.epochs {
        t.epochs = v;
    }
    if let Some(v) = a.seed {
        t.seed = v;
    }
    if let Some(v) = a.lr {
        t.lr = v;
    }
    if let Some(v) = a.momentum {
        t.momentum = v;
    }
    if let Some(v) = a.batch_chunks {
        t.batch_chunks = v;
    }
    if let Some(v) = a.chunk_frames {
        t.chunk_frames = v;
    }
    if let Some(v) = a.policy {
        t.classifier_update_policy = match v {
            PolicyArg::WithinEpoch => ClassifierPolicy::WithinEpoch,
            PolicyArg::Frozen => ClassifierPolicy::Frozen,
        };
    }
    if let Some(v) = a.validation_fraction {
        t.validation_fraction = v;
    }
    if let Some(v) = a.warmup_max_epochs {
        t.warmup_max_epochs = v;
    }
    if a.stop_on_plateau {
        t.stop_on_plateau = true;
    }
    if a.constant_lr {
        t.halve_lr_on_plateau = false;
    }
    if let Some(p) = &a.warmup_from {
        t.warmup_source = Some(p.clone());
    }
    let preset = a.net_preset.or(file.net_preset);
    let mut net = match (file.net, preset) {
        (_, Some(NetPreset::Small)) => NetConfig::small(speakers),
        (Some(n), _) => n,
        (None, _) => NetConfig::default(),
    };
    net.num_speakers = speakers;
    t.validate()?;
    net.validate()?;
    Ok(ResolvedTrain {
        mode: a.mode,
        data: a.data.clone(),
        train: t,
        net,
    })
}

fn epochs_csv(m: &fullinfo::train::TrainMetrics) -> String {
    let mut s = String::from("phase,epoch,lr,start_val_acc,start_val_loss,end_val_acc,train_loss,train_acc,seconds\n");
    for e in &m.epochs {
        let _ = writeln!(
            s,
            "{},{},{},{:.6},{:.6},{:.6},{:.6},{:.6},{:.3}",
            e.phase, e.epoch, e.lr, e.start_val_acc, e.start_val_loss, e.end_val_acc, e.train_loss, e.train_acc, e.seconds
        );
    }
    s
}

pub fn cmd_train(a: &TrainArgs) -> CliResult<()> {
    if a.mode == Mode::Fullinfo && a.warmup_from.is_none() {
        let from_file = match &a.config {
            Some(p) => read_json::<TrainFile>(p)?.train.warmup_source.is_some(),
            None => false,
        };
        if !from_file {
            return usage("--mode fullinfo requires --warmup-from <baseline model>");
        }
    }
    let utts = load_utts(&a.data)?;
    let speakers = SpeakerMap::from_utterances(&utts);
    let mut resolved = resolve_train(a, speakers.len())?;
    let baseline = match (a.mode, &resolved.train.warmup_source) {
        (Mode::Fullinfo, Some(p)) => {
            let b = load_model(p)?;
            if a.config.is_none() && a.net_preset.is_none() {
                resolved.net = b.cfg.clone();
            }
            Some(b)
        }
        _ => None,
    };
    create_dir(&a.out_dir)?;
    echo_config(&a.out_dir, &resolved)?;
    let streams = Streams::<f32>::build(&utts, resolved.net.receptive_field(), resolved.train.validation_fraction)?;
    let (model, metrics) = match baseline {
        None => train_baseline(&resolved.train, &streams, &resolved.net)?,
        Some(b) => {
            if b.cfg.num_speakers != speakers.len() {
                return Err(Error::ConfigMismatch(format!(
                    "warm-up model has {} speakers, data has {}",
                    b.cfg.num_speakers,
                    speakers.len()
                ))
                .into());
            }
            let (warm, mut wm) = warm_up(&b, &resolved.net, &streams, &resolved.train)?;
            save_model(&warm.params, &warm.cfg, a.out_dir.join("warmup.ctdn"))?;
            let (m, fm) = run_fullinfo(warm, &streams, &resolved.train)?;
            wm.extend(fm);
            (m, wm)
        }
    };
    model.save(a.out_dir.join("model.ctdn"))?;
    write_file(&a.out_dir.join("metrics.csv"), metrics.to_csv())?;
    write_file(&a.out_dir.join("epochs.csv"), epochs_csv(&metrics))?;
    let last = metrics.epochs.last();
    println!(
        "trained {} epochs, final validation accuracy {}, checksum {:016x}",
        metrics.epochs.len(),
        last.map(|e| format!("{:.4}", e.end_val_acc)).unwrap_or_else(|| "-".into()),
        model.params.checksum()
    );
    Ok(())
}

fn dvectors_of(model: &Model, utts: &[Utterance], normalize: bool) -> Vec<DVector> {
    let rf = model.receptive_field();
    let mut out = Vec::new();
    let mut skipped = 0;
    for u in utts {
        if u.feats.time() < rf {
            skipped += 1;
            continue;
        }
        match extract_dvector(model, &u.utt_id, &u.feats, normalize) {
            Ok(v) => out.push(v),
            Err(e) => {
                log::warn!("{}: {e}", u.utt_id);
                skipped += 1;
            }
        }
    }
    if skipped > 0 {
        eprintln!("warning: skipped {skipped} utterances shorter than {rf} frames");
    }
    out
}

pub fn cmd_extract(a: &ExtractArgs) -> CliResult<()> {
    let model = load_model(&a.model)?;
    let utts = load_utts(&a.data)?;
    let vs = dvectors_of(&model, &utts, !a.no_normalize);
    write_file(&a.out, eval::dvectors_to_csv(&vs))?;
    println!("{} d-vectors", vs.len());
    Ok(())
}

pub fn cmd_lda(a: &LdaArgs) -> CliResult<()> {
    let model = load_model(&a.model)?;
    let utts = load_utts(&a.data)?;
    let speakers = SpeakerMap::from_utterances(&utts);
    let vs = eval::extract_all(&model, &utts, true)?;
    let labels = utts
        .iter()
        .map(|u| speakers.index_of(&u.speaker_id))
        .collect::<fullinfo::Result<Vec<_>>>()?;
    let dim = if a.lda_dim == 0 {
        eval::default_lda_dim(speakers.len(), model.cfg.feature_dim)
    } else {
        a.lda_dim
    };
    let raw: Vec<Vec<f64>> = vs.into_iter().map(|v| v.vector).collect();
    let t = lda_fit(&raw, &labels, dim)?;
    let json = serde_json::to_string(&t).map_err(Error::from)?;
    write_file(&a.out, json)?;
    println!("LDA {} -> {}", t.d_in(), t.d_out());
    Ok(())
}

pub fn cmd_score(a: &ScoreArgs) -> CliResult<()> {
    let model = load_model(&a.model)?;
    let text = fs::read_to_string(&a.trials).map_err(|e| Error::Io {
        path: a.trials.clone(),
        source: e,
    })?;
    let trials = TrialList::parse(&text)?;
    let lda: Option<LdaTransform> = match &a.lda {
        Some(p) => Some(read_json(p)?),
        None => None,
    };
    let project = |v: DVector| -> CliResult<DVector> {
        Ok(match &lda {
            Some(t) => lda_project(t, &v)?,
            None => v,
        })
    };
    let enroll_utts = load_utts(&a.enroll)?;
    let mut per_spk: BTreeMap<String, Vec<DVector>> = BTreeMap::new();
    for v in eval::extract_all(&model, &enroll_utts, true)?.into_iter().zip(&enroll_utts) {
        per_spk.entry(v.1.speaker_id.clone()).or_default().push(v.0);
    }
    let mut enrollments = BTreeMap::new();
    for (spk, vs) in per_spk {
        let e = eval::enroll(&spk, &vs, true)?;
        enrollments.insert(spk, project(e)?);
    }
    let tests = load_utts(&a.test)?;
    let mut tv = BTreeMap::new();
    for v in dvectors_of(&model, &tests, true) {
        tv.insert(v.id.clone(), project(v)?);
    }
    let scores = score_trials(&enrollments, &tv, &trials)?;
    write_file(&a.out, scores.to_text())?;
    match scores.eer() {
        Ok(e) => println!("{} trials, EER {e:.2}%", scores.scores.len()),
        Err(_) => println!("{} trials", scores.scores.len()),
    }
    Ok(())
}

#[derive(Debug, Serialize)]
struct EvalRun<'a> {
    model: &'a Path,
    train_data: Option<&'a Path>,
    enroll: &'a Path,
    test: &'a Path,
    eval: &'a EvalConfig,
}

pub fn cmd_eval(a: &EvalArgs) -> CliResult<()> {
    let conditions = parse_conditions(&a.condition).map_err(|e| CliError::Usage(e.to_string()))?;
    if conditions.is_empty() {
        return usage("--condition lists no conditions");
    }
    if !a.no_lda && a.train_data.is_none() {
        return usage("LDA needs --train-data (or pass --no-lda)");
    }
    let cfg = EvalConfig {
        conditions,
        lda_dim: (!a.no_lda).then_some(a.lda_dim),
        normalize: true,
        seed: a.seed,
    };
    let model = load_model(&a.model)?;
    let train = match (&a.train_data, a.no_lda) {
        (Some(p), false) => load_utts(p)?,
        _ => Vec::new(),
    };
    let enroll = load_utts(&a.enroll)?;
    let tests = load_utts(&a.test)?;
    let report = evaluate_model(&model, &train, &enroll, &tests, &cfg)?;
    create_dir(&a.out_dir)?;
    echo_config(
        &a.out_dir,
        &EvalRun {
            model: &a.model,
            train_data: a.train_data.as_deref(),
            enroll: &a.enroll,
            test: &a.test,
            eval: &cfg,
        },
    )?;
    write_file(&a.out_dir.join("eer.csv"), report.to_csv())?;
    for (c, s) in &report.cosine_scores {
        write_file(&a.out_dir.join(format!("scores_{c}_cosine.txt")), s.to_text())?;
    }
    for (c, s) in &report.lda_scores {
        write_file(&a.out_dir.join(format!("scores_{c}_lda.txt")), s.to_text())?;
    }
    for c in Condition::ALL {
        if cfg.conditions.contains(&c) && report.row(c).is_none() {
            eprintln!("warning: condition {c} skipped, test utterances too short");
        }
    }
    print!("{}", report.to_table());
    Ok(())
}

pub fn cmd_export(a: &ExportArgs) -> CliResult<()> {
    let model = load_model(&a.model)?;
    let utts = load_utts(&a.data)?;
    let d = model.cfg.feature_dim;
    let mut s = String::from("utt_id,frame");
    for i in 0..d {
        let _ = write!(s, ",v{i}");
    }
    s.push('\n');
    let mut rows = 0;
    for u in &utts {
        if u.feats.time() < model.receptive_field() {
            eprintln!("warning: {} shorter than the receptive field, skipped", u.utt_id);
            continue;
        }
        let f = model.features_of(&u.feats)?;
        let n = if a.max_frames == 0 { f.rows() } else { a.max_frames.min(f.rows()) };
        for t in 0..n {
            let _ = write!(s, "{},{t}", u.utt_id);
            for v in f.row(t) {
                let _ = write!(s, ",{v:.6}");
            }
            s.push('\n');
            rows += 1;
        }
    }
    write_file(&a.out, s)?;
    println!("{rows} frame features");
    Ok(())
}
