//! Command-line front end.
//!
//! Data goes to files or standard output, diagnostics to standard error.
//! Exit codes: 0 success, 1 runtime error, 2 usage error.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use rayon::prelude::*;
use serde::Serialize;

use crate::audio_io::{decode_wav, read_spectrogram, spectrogram_to_bytes};
use crate::augment::{augment_chunk, chunk_rng, AugmentConfig};
use crate::energy::{monthly_report, power_budget, DeploymentProfile, IrradianceTable};
use crate::nnrt::{
    fixture_input, generate_fixture_model, infer, load_model, resource_report, save_model,
    ModelGraph,
};
use crate::preprocess::{
    preprocess_recording, MelConfig, MelFilterbank, MelSpectrogram, PreprocessConfig,
};
use crate::trials::{
    avg_overall_compression, overall_compression, read_baseline, read_trials, Objectives, TrialSet,
};

pub const EXIT_OK: i32 = 0;
pub const EXIT_RUNTIME: i32 = 1;
pub const EXIT_USAGE: i32 = 2;

#[derive(Debug, Parser)]
#[command(
    name = "birdedge",
    version,
    about = "Bird-call preprocessing, int8 inference and edge deployment sizing"
)]
pub struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Turn WAV recordings into 2 s log-mel spectrograms (MELS files)
    Preprocess(PreprocessArgs),
    /// Apply seeded spectrogram augmentations to a directory of MELS files
    Augment(AugmentArgs),
    /// Classify one spectrogram with an ENM1 model
    Infer(InferArgs),
    /// Time repeated inference and report latency statistics
    Bench(BenchArgs),
    /// Write a seeded stand-in ENM1 model, optionally with matching inputs
    GenFixture(GenFixtureArgs),
    /// Score compression trials and mark the best one
    Rank(RankArgs),
    /// List Pareto-optimal trials
    Pareto(ParetoArgs),
    /// Compression rates of each trial against a baseline model
    Compress(CompressArgs),
    /// Power budget, battery and monthly solar panel size for a device profile
    Energy(EnergyArgs),
}

#[derive(Debug, Args)]
struct OutputArgs {
    /// Write the CSV report here instead of standard output
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct PreprocessArgs {
    /// WAV file or directory of WAV files
    #[arg(long = "in")]
    input: PathBuf,
    /// Output directory for spectrograms; rejected chunks go to its noise/ subdirectory
    #[arg(long)]
    out: PathBuf,
    /// Envelope fraction of the recording peak treated as silence
    #[arg(long, default_value_t = 0.2)]
    silence: f32,
    /// Factor by which a window must exceed its neighborhood median
    #[arg(long, default_value_t = 1.075)]
    peak: f64,
    /// Maximum kept chunks per recording
    #[arg(long, default_value_t = 30)]
    max_chunks: usize,
}

#[derive(Debug, Args)]
struct AugmentArgs {
    #[arg(long)]
    seed: u64,
    /// Directory of MELS files
    #[arg(long = "in")]
    input: PathBuf,
    /// Directory of noise MELS files (may be empty)
    #[arg(long)]
    noise_pool: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Probability of drawing each augmentation
    #[arg(long, default_value_t = 0.5)]
    p_apply: f64,
    /// Maximum augmentations applied to one chunk
    #[arg(long, default_value_t = 3)]
    max_augs: usize,
}

#[derive(Debug, Args)]
struct InferArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    spec: PathBuf,
    #[command(flatten)]
    output: OutputArgs,
}

#[derive(Debug, Args)]
struct BenchArgs {
    #[arg(long)]
    model: PathBuf,
    /// Directory of MELS inputs, cycled through in name order
    #[arg(long)]
    specs: PathBuf,
    #[arg(long, default_value_t = 1000)]
    repetitions: usize,
    #[command(flatten)]
    output: OutputArgs,
}

#[derive(Debug, Args)]
struct GenFixtureArgs {
    #[arg(long)]
    classes: u32,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Model file to write
    #[arg(long)]
    out: PathBuf,
    /// Also write held-out inputs for this model into the directory
    #[arg(long)]
    inputs: Option<PathBuf>,
    /// Number of inputs written with --inputs
    #[arg(long, default_value_t = 10)]
    count: u64,
}

#[derive(Debug, Args)]
struct RankArgs {
    #[arg(long)]
    trials: PathBuf,
    #[command(flatten)]
    output: OutputArgs,
}

#[derive(Debug, Args)]
struct ParetoArgs {
    #[arg(long)]
    trials: PathBuf,
    /// Judge dominance on RAM, ROM and FLOPs only
    #[arg(long)]
    exclude_accuracy: bool,
    #[command(flatten)]
    output: OutputArgs,
}

#[derive(Debug, Args)]
struct CompressArgs {
    #[arg(long)]
    baseline: PathBuf,
    #[arg(long)]
    trials: PathBuf,
    /// Judge Pareto dominance on RAM, ROM and FLOPs only
    #[arg(long)]
    exclude_accuracy: bool,
    #[command(flatten)]
    output: OutputArgs,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Device {
    M7,
    Pi4,
}

#[derive(Debug, Args)]
struct EnergyArgs {
    /// Profile file (TOML keys in mJ, ms, mW and percent)
    #[arg(long, conflicts_with = "device", required_unless_present = "device")]
    profile: Option<PathBuf>,
    /// Bundled measured profile instead of a file
    #[arg(long, value_enum)]
    device: Option<Device>,
    /// Monthly irradiance CSV (month,s_rad); defaults to the bundled German table
    #[arg(long)]
    irradiance: Option<PathBuf>,
    #[command(flatten)]
    output: OutputArgs,
}

/// Reproducibility record written next to every output file or directory.
#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub subcommand: String,
    pub inputs: Vec<String>,
    pub outputs: Vec<String>,
    pub seed: Option<u64>,
    pub config: Vec<(String, String)>,
    pub tool_version: String,
}

impl RunManifest {
    fn new(subcommand: &str) -> Self {
        Self {
            subcommand: subcommand.into(),
            inputs: Vec::new(),
            outputs: Vec::new(),
            seed: None,
            config: Vec::new(),
            tool_version: env!("CARGO_PKG_VERSION").into(),
        }
    }

    fn input(mut self, p: &Path) -> Self {
        self.inputs.push(p.display().to_string());
        self
    }

    fn output(mut self, p: &Path) -> Self {
        self.outputs.push(p.display().to_string());
        self
    }

    fn set(mut self, key: &str, value: impl ToString) -> Self {
        self.config.push((key.into(), value.to_string()));
        self
    }
}

/// Writes through a sibling temporary file and renames it into place.
fn write_atomic(path: &Path, bytes: &[u8]) -> anyhow::Result<()> {
    let name = path
        .file_name()
        .with_context(|| format!("{} has no file name", path.display()))?;
    let mut tmp_name = OsString::from(".");
    tmp_name.push(name);
    tmp_name.push(".tmp");
    let tmp = path.with_file_name(tmp_name);
    fs::write(&tmp, bytes).with_context(|| format!("writing {}", tmp.display()))?;
    fs::rename(&tmp, path).with_context(|| format!("renaming into {}", path.display()))?;
    Ok(())
}

fn write_manifest(path: &Path, manifest: &RunManifest) -> anyhow::Result<()> {
    let mut json = serde_json::to_vec_pretty(manifest)?;
    json.push(b'\n');
    write_atomic(path, &json)
}

/// `report.csv` → `report.csv.manifest.json`
fn manifest_beside(file: &Path) -> PathBuf {
    let mut name = file.file_name().map(OsString::from).unwrap_or_default();
    name.push(".manifest.json");
    file.with_file_name(name)
}

/// Sends a CSV report to `--out` (with a manifest) or standard output.
fn emit(report: &str, output: &OutputArgs, manifest: RunManifest) -> anyhow::Result<()> {
    match &output.out {
        Some(path) => {
            write_atomic(path, report.as_bytes())?;
            write_manifest(&manifest_beside(path), &manifest.output(path))
        }
        None => {
            std::io::stdout().lock().write_all(report.as_bytes())?;
            Ok(())
        }
    }
}

/// Files in `dir` with the given extension, sorted by name.
fn list_files(dir: &Path, ext: &str) -> anyhow::Result<Vec<PathBuf>> {
    let mut files = Vec::new();
    for entry in
        fs::read_dir(dir).with_context(|| format!("reading directory {}", dir.display()))?
    {
        let path = entry?.path();
        if path.is_file()
            && path
                .extension()
                .is_some_and(|e| e.eq_ignore_ascii_case(ext))
        {
            files.push(path);
        }
    }
    files.sort();
    Ok(files)
}

fn read_mels(path: &Path) -> anyhow::Result<MelSpectrogram> {
    let file = fs::File::open(path).with_context(|| format!("opening {}", path.display()))?;
    read_spectrogram(std::io::BufReader::new(file))
        .with_context(|| format!("reading {}", path.display()))
}

fn read_model(path: &Path) -> anyhow::Result<ModelGraph> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    load_model(&bytes).with_context(|| format!("loading {}", path.display()))
}

fn stem(path: &Path) -> String {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default()
}

fn preprocess(args: &PreprocessArgs) -> anyhow::Result<()> {
    let cfg = PreprocessConfig {
        silence_ratio: args.silence,
        peak_ratio: args.peak,
        max_chunks: args.max_chunks,
    };
    if !(args.silence >= 0.0 && args.silence <= 1.0) {
        bail!("--silence must be in [0, 1]");
    }
    if !(args.peak > 0.0 && args.peak.is_finite()) {
        bail!("--peak must be positive");
    }
    let mel_cfg = MelConfig::default();
    let inputs = if args.input.is_dir() {
        list_files(&args.input, "wav")?
    } else {
        vec![args.input.clone()]
    };
    let noise_dir = args.out.join("noise");
    fs::create_dir_all(&noise_dir).with_context(|| format!("creating {}", noise_dir.display()))?;
    let filterbank = MelFilterbank::new(&mel_cfg)?;

    let results: Vec<anyhow::Result<(usize, usize)>> = inputs
        .par_iter()
        .map(|path| {
            let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
            let clip =
                decode_wav(&bytes).with_context(|| format!("decoding {}", path.display()))?;
            let out = preprocess_recording(&clip, &mel_cfg, &cfg)
                .with_context(|| format!("preprocessing {}", path.display()))?;
            let name = stem(path);
            for (k, spec) in out.spectrograms.iter().enumerate() {
                write_atomic(
                    &args.out.join(format!("{name}_{k:03}.mels")),
                    &spectrogram_to_bytes(spec)?,
                )?;
            }
            for (k, chunk) in out.noise.iter().enumerate() {
                let spec = filterbank.compute(chunk)?;
                write_atomic(
                    &noise_dir.join(format!("{name}_{k:03}.mels")),
                    &spectrogram_to_bytes(&spec)?,
                )?;
            }
            Ok((out.spectrograms.len(), out.noise.len()))
        })
        .collect();

    let mut report = String::from("recording,chunks,noise_chunks\n");
    for (path, r) in inputs.iter().zip(results) {
        let (kept, noise) = r?;
        writeln!(report, "{},{kept},{noise}", stem(path))?;
    }
    let mut manifest = RunManifest::new("preprocess")
        .output(&args.out)
        .set("silence", args.silence)
        .set("peak", args.peak)
        .set("max_chunks", args.max_chunks);
    for p in &inputs {
        manifest = manifest.input(p);
    }
    write_atomic(&args.out.join("summary.csv"), report.as_bytes())?;
    write_manifest(&args.out.join("manifest.json"), &manifest)?;
    std::io::stdout().lock().write_all(report.as_bytes())?;
    Ok(())
}

fn augment(args: &AugmentArgs) -> anyhow::Result<()> {
    let cfg = AugmentConfig {
        p_apply: args.p_apply,
        max_augs: args.max_augs,
        seed: args.seed,
        ..AugmentConfig::default()
    };
    cfg.validate()?;
    let files = list_files(&args.input, "mels")?;
    let pool = list_files(&args.noise_pool, "mels")?
        .iter()
        .map(|p| read_mels(p))
        .collect::<anyhow::Result<Vec<_>>>()?;
    fs::create_dir_all(&args.out).with_context(|| format!("creating {}", args.out.display()))?;

    let logs: Vec<anyhow::Result<String>> = files
        .par_iter()
        .enumerate()
        .map(|(i, path)| {
            let spec = read_mels(path)?;
            let mut rng = chunk_rng(args.seed, i as u64);
            let (out, applied) = augment_chunk(&spec, &pool, &cfg, &mut rng)
                .with_context(|| format!("augmenting {}", path.display()))?;
            let name = path.file_name().context("input without file name")?;
            write_atomic(&args.out.join(name), &spectrogram_to_bytes(&out)?)?;
            let list: Vec<String> = applied.iter().map(|a| a.to_string()).collect();
            Ok(format!("{}\t{}\n", name.to_string_lossy(), list.join("; ")))
        })
        .collect();
    let mut log = String::new();
    for l in logs {
        log.push_str(&l?);
    }
    write_atomic(&args.out.join("augment.log"), log.as_bytes())?;
    let manifest = RunManifest::new("augment")
        .input(&args.input)
        .input(&args.noise_pool)
        .output(&args.out)
        .set("p_apply", args.p_apply)
        .set("max_augs", args.max_augs);
    write_manifest(
        &args.out.join("manifest.json"),
        &RunManifest {
            seed: Some(args.seed),
            ..manifest
        },
    )?;
    eprintln!(
        "augmented {} spectrograms with a noise pool of {}",
        files.len(),
        pool.len()
    );
    Ok(())
}

fn infer_cmd(args: &InferArgs) -> anyhow::Result<()> {
    let model = read_model(&args.model)?;
    let spec = read_mels(&args.spec)?;
    let probs = infer(&model, &spec)?;
    let best = probs
        .iter()
        .enumerate()
        .fold(0, |b, (i, p)| if *p > probs[b] { i } else { b });
    let r = resource_report(&model);
    let mut report = String::from("field,value\n");
    for (i, p) in probs.iter().enumerate() {
        writeln!(report, "prob_{i},{p}")?;
    }
    writeln!(report, "argmax,{best}")?;
    writeln!(report, "flops,{}", r.flops)?;
    writeln!(report, "ram_bytes,{}", r.ram_bytes)?;
    writeln!(report, "rom_bytes,{}", r.rom_bytes)?;
    emit(
        &report,
        &args.output,
        RunManifest::new("infer")
            .input(&args.model)
            .input(&args.spec),
    )
}

/// Mean, population standard deviation, min and max of a sample.
pub fn latency_stats(samples: &[f64]) -> (f64, f64, f64, f64) {
    let n = samples.len() as f64;
    let mean = samples.iter().sum::<f64>() / n;
    let var = samples.iter().map(|s| (s - mean) * (s - mean)).sum::<f64>() / n;
    let min = samples.iter().copied().fold(f64::INFINITY, f64::min);
    let max = samples.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    (mean, var.sqrt(), min, max)
}

fn bench(args: &BenchArgs) -> anyhow::Result<()> {
    if args.repetitions == 0 {
        bail!("--repetitions must be at least 1");
    }
    let model = read_model(&args.model)?;
    let specs = list_files(&args.specs, "mels")?
        .iter()
        .map(|p| read_mels(p))
        .collect::<anyhow::Result<Vec<_>>>()?;
    if specs.is_empty() {
        bail!("no .mels files in {}", args.specs.display());
    }
    let mut samples = Vec::with_capacity(args.repetitions);
    for i in 0..args.repetitions {
        let spec = &specs[i % specs.len()];
        let start = Instant::now();
        let probs = infer(&model, spec)?;
        samples.push(start.elapsed().as_secs_f64() * 1e3);
        std::hint::black_box(probs);
    }
    let (mean, std, min, max) = latency_stats(&samples);
    let report = format!(
        "repetitions,mean_ms,std_ms,min_ms,max_ms\n{},{mean:.6},{std:.6},{min:.6},{max:.6}\n",
        args.repetitions
    );
    let manifest = RunManifest::new("bench")
        .input(&args.model)
        .input(&args.specs)
        .set("repetitions", args.repetitions);
    emit(&report, &args.output, manifest)
}

fn gen_fixture(args: &GenFixtureArgs) -> anyhow::Result<()> {
    let model = generate_fixture_model(args.classes, args.seed)?;
    write_atomic(&args.out, &save_model(&model))?;
    let mut manifest = RunManifest::new("gen-fixture")
        .output(&args.out)
        .set("classes", args.classes)
        .set("seed", args.seed);
    if let Some(dir) = &args.inputs {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        let mut labels = String::from("file,class\n");
        for k in 0..args.count {
            let (class, spec) = fixture_input(args.seed, args.classes, k);
            let name = format!("input_{k:04}.mels");
            write_atomic(&dir.join(&name), &spectrogram_to_bytes(&spec)?)?;
            writeln!(labels, "{name},{class}")?;
        }
        write_atomic(&dir.join("labels.csv"), labels.as_bytes())?;
        manifest = manifest.output(dir).set("count", args.count);
    }
    manifest.seed = Some(args.seed);
    write_manifest(&manifest_beside(&args.out), &manifest)
}

fn load_trials(path: &Path) -> anyhow::Result<TrialSet> {
    let file = fs::File::open(path).with_context(|| format!("opening {}", path.display()))?;
    let trials = read_trials(file).with_context(|| format!("parsing {}", path.display()))?;
    Ok(TrialSet::new(trials)?)
}

fn rank(args: &RankArgs) -> anyhow::Result<()> {
    let set = load_trials(&args.trials)?;
    let best = set.select_best()?;
    let mut report = String::from("id,acc_score,mem_score,rank,best\n");
    for s in set.scores()? {
        writeln!(
            report,
            "{},{},{},{},{}",
            s.id,
            s.acc,
            s.mem,
            s.rank,
            u8::from(s.id == best)
        )?;
    }
    emit(
        &report,
        &args.output,
        RunManifest::new("rank").input(&args.trials),
    )
}

fn pareto(args: &ParetoArgs) -> anyhow::Result<()> {
    let set = load_trials(&args.trials)?;
    let objectives = Objectives {
        accuracy: !args.exclude_accuracy,
    };
    let mut report = String::from("id,acc,ram,rom,flops\n");
    for id in set.pareto_front(objectives) {
        let t = set.get(id)?;
        writeln!(report, "{},{},{},{},{}", t.id, t.acc, t.ram, t.rom, t.flops)?;
    }
    let manifest = RunManifest::new("pareto")
        .input(&args.trials)
        .set("exclude_accuracy", args.exclude_accuracy);
    emit(&report, &args.output, manifest)
}

fn compress(args: &CompressArgs) -> anyhow::Result<()> {
    let file = fs::File::open(&args.baseline)
        .with_context(|| format!("opening {}", args.baseline.display()))?;
    let baseline =
        read_baseline(file).with_context(|| format!("parsing {}", args.baseline.display()))?;
    let set = load_trials(&args.trials)?;
    let objectives = Objectives {
        accuracy: !args.exclude_accuracy,
    };
    let front = set.pareto_front(objectives);
    let mut report = String::from("id,cr_ram,cr_rom,cr_flops,cr_overall,pareto\n");
    for t in set.trials() {
        let r = overall_compression(&baseline, t)?;
        writeln!(
            report,
            "{},{},{},{},{},{}",
            t.id,
            r.ram,
            r.rom,
            r.flops,
            r.overall,
            u8::from(front.contains(&t.id))
        )?;
    }
    let avg = avg_overall_compression(&baseline, &set, objectives)?;
    writeln!(report, "pareto_mean,,,,{avg},")?;
    let manifest = RunManifest::new("compress")
        .input(&args.baseline)
        .input(&args.trials)
        .set("exclude_accuracy", args.exclude_accuracy);
    emit(&report, &args.output, manifest)
}

fn energy(args: &EnergyArgs) -> anyhow::Result<()> {
    let mut manifest = RunManifest::new("energy");
    let profile = match (&args.profile, args.device) {
        (Some(path), _) => {
            manifest = manifest.input(path);
            let text =
                fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            DeploymentProfile::from_toml(&text)
                .with_context(|| format!("parsing {}", path.display()))?
        }
        (None, Some(Device::M7)) => DeploymentProfile::cortex_m7(),
        (None, Some(Device::Pi4)) => DeploymentProfile::raspberry_pi4(),
        (None, None) => bail!("either --profile or --device is required"),
    };
    let table = match &args.irradiance {
        Some(path) => {
            manifest = manifest.input(path);
            let file =
                fs::File::open(path).with_context(|| format!("opening {}", path.display()))?;
            IrradianceTable::from_csv(file)
                .with_context(|| format!("parsing {}", path.display()))?
        }
        None => IrradianceTable::germany(),
    };
    if args.device.is_some() {
        manifest = manifest.set("device", &profile.name);
    }
    let budget = power_budget(&profile)?;
    let rows = monthly_report(&profile, &table)?;
    let mut report = String::from(
        "month,s_rad_w_m2,active_w,average_w,capacity_exact_wh,capacity_wh,charge_w,area_m2,worst\n",
    );
    for r in rows {
        writeln!(
            report,
            "{},{},{},{},{},{},{},{},{}",
            r.month,
            r.s_rad,
            budget.active_w,
            budget.average_w,
            budget.capacity_wh,
            r.capacity_wh,
            r.charge_w,
            r.area_m2,
            u8::from(r.worst)
        )?;
    }
    emit(&report, &args.output, manifest)
}

fn dispatch(cli: &Cli) -> anyhow::Result<()> {
    match &cli.command {
        Command::Preprocess(a) => preprocess(a),
        Command::Augment(a) => augment(a),
        Command::Infer(a) => infer_cmd(a),
        Command::Bench(a) => bench(a),
        Command::GenFixture(a) => gen_fixture(a),
        Command::Rank(a) => rank(a),
        Command::Pareto(a) => pareto(a),
        Command::Compress(a) => compress(a),
        Command::Energy(a) => energy(a),
    }
}

/// Parses `argv` (program name first), runs the subcommand and returns the
/// process exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    match dispatch(&cli) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e:#}");
            EXIT_RUNTIME
        }
    }
}
