mod io;
mod wav;

use std::fmt;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use log::{info, warn};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use spectok::codec::{self, Checkpoint, Codec, CodecConfig, MAGIC, WEIGHTS_MAGIC};
use spectok::eval::{evaluate_clip, Report};
use spectok::model::count_cost;
use spectok::train::{write_csv, Corpus, TrainConfig, Trainer};

#[derive(Parser)]
#[command(name = "spectok", version, about = "Streaming spectral audio codec")]
struct Cli {
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Args)]
struct ModelArgs {
    /// Preset name (base, mini, base-32k) or path to a codec config JSON.
    #[arg(long)]
    config: Option<String>,
    /// Weights file. Its embedded config is used when --config is absent.
    #[arg(long)]
    weights: Option<PathBuf>,
    /// Seed for randomly initialized weights when no --weights is given.
    #[arg(long, env = "SPECTOK_SEED", default_value_t = 0)]
    seed: u64,
}

#[derive(Subcommand)]
enum Command {
    /// Compress a WAV file into a .sptk bitstream.
    Encode {
        input: PathBuf,
        output: PathBuf,
        #[command(flatten)]
        model: ModelArgs,
        /// Quantizer stages to emit (default: all).
        #[arg(long)]
        stages: Option<usize>,
    },
    /// Reconstruct a WAV file from a .sptk bitstream.
    Decode {
        input: PathBuf,
        output: PathBuf,
        #[command(flatten)]
        model: ModelArgs,
    },
    /// Train on every .wav file in a directory.
    Train {
        corpus: PathBuf,
        /// Where to write the weights.
        #[arg(long)]
        out: PathBuf,
        /// Preset name or codec config JSON path.
        #[arg(long, default_value = "mini")]
        config: String,
        /// Training config JSON; defaults to the toy settings.
        #[arg(long)]
        train_config: Option<PathBuf>,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long, env = "SPECTOK_SEED")]
        seed: Option<u64>,
        /// Loss curve CSV (default: <out>.loss.csv).
        #[arg(long)]
        loss_csv: Option<PathBuf>,
    },
    /// Reconstruction metrics for every .wav file in a directory.
    Eval {
        corpus: PathBuf,
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long)]
        stages: Option<usize>,
        /// CSV destination (default: stdout).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Describe a config, a weights file or a .sptk stream.
    Info {
        /// A .sptk stream or a weights file.
        file: Option<PathBuf>,
        /// Preset name or config JSON path.
        #[arg(long)]
        config: Option<String>,
    },
}

/// Config or weights that do not belong together.
#[derive(Debug)]
struct Incompatible(String);

impl fmt::Display for Incompatible {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Incompatible {}

const EXIT_INPUT: u8 = 1;
const EXIT_COMPAT: u8 = 2;
const EXIT_INTERNAL: u8 = 3;

fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if cause.is::<Incompatible>() {
            return EXIT_COMPAT;
        }
        if let Some(e) = cause.downcast_ref::<spectok::Error>() {
            return match e {
                spectok::Error::HashMismatch { .. } => EXIT_COMPAT,
                spectok::Error::Shape(_)
                | spectok::Error::Diverged { .. }
                | spectok::Error::Poisoned => EXIT_INTERNAL,
                _ => EXIT_INPUT,
            };
        }
        if cause.is::<hound::Error>()
            || cause.is::<std::io::Error>()
            || cause.is::<serde_json::Error>()
        {
            return EXIT_INPUT;
        }
    }
    // Plain messages come from argument and format checks in this binary.
    EXIT_INPUT
}

fn resolve_config(arg: &str) -> Result<CodecConfig> {
    let path = Path::new(arg);
    if path.is_file() {
        let text = std::fs::read_to_string(path).with_context(|| format!("cannot read {arg}"))?;
        return CodecConfig::from_json(&text)
            .with_context(|| format!("{arg} is not a valid codec config"));
    }
    CodecConfig::preset(arg).with_context(|| format!("{arg} is neither a config file nor a preset"))
}

fn read_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).with_context(|| format!("cannot read {}", path.display()))?;
    Checkpoint::from_bytes(&bytes)
        .with_context(|| format!("{} is not a usable weights file", path.display()))
}

fn load_codec(m: &ModelArgs) -> Result<Codec> {
    let config = m.config.as_deref().map(resolve_config).transpose()?;
    match (&m.weights, config) {
        (Some(path), config) => {
            let ck = read_checkpoint(path)?;
            if let Some(cfg) = config {
                if cfg.hash() != ck.config.hash() {
                    return Err(Incompatible(format!(
                        "{} was trained with config {:016x}, --config is {:016x}",
                        path.display(),
                        ck.config.hash(),
                        cfg.hash()
                    ))
                    .into());
                }
            }
            Codec::from_checkpoint(&ck)
                .map_err(|e| anyhow!(Incompatible(format!("{}: {e}", path.display()))))
        }
        (None, Some(cfg)) => {
            warn!(
                "no --weights given; using randomly initialized weights (seed {})",
                m.seed
            );
            Ok(Codec::new(cfg, &mut ChaCha8Rng::seed_from_u64(m.seed))?)
        }
        (None, None) => bail!("either --weights or --config is required"),
    }
}

fn stages_or_all(codec: &Codec, stages: Option<usize>) -> Result<usize> {
    let n = stages.unwrap_or(codec.n_stages());
    if n == 0 || n > codec.n_stages() {
        bail!("--stages {n} is outside 1..={}", codec.n_stages());
    }
    Ok(n)
}

fn cmd_encode(input: &Path, output: &Path, model: &ModelArgs, stages: Option<usize>) -> Result<()> {
    let codec = load_codec(model)?;
    let n = stages_or_all(&codec, stages)?;
    let audio = wav::read(input, codec.sample_rate())?;
    let t0 = Instant::now();
    let codes = codec.encode(&audio, n)?;
    let bytes = codec.pack(&codes)?;
    let elapsed = t0.elapsed().as_secs_f64();
    io::write_atomic(output, &bytes)?;
    let seconds = audio.len() as f64 / codec.sample_rate() as f64;
    println!(
        "frames {}  stages {n}  {:.3} kbps  {} bytes  realtime factor {:.1}x",
        codes.frames(),
        codes.kbps(),
        bytes.len(),
        seconds / elapsed.max(1e-9)
    );
    Ok(())
}

fn cmd_decode(input: &Path, output: &Path, model: &ModelArgs) -> Result<()> {
    let codec = load_codec(model)?;
    let bytes = std::fs::read(input).with_context(|| format!("cannot read {}", input.display()))?;
    let codes = codec
        .unpack(&bytes)
        .with_context(|| format!("{} cannot be decoded", input.display()))?;
    let t0 = Instant::now();
    let audio = codec.decode(&codes)?;
    let elapsed = t0.elapsed().as_secs_f64();
    io::write_atomic(output, &wav::encode(&audio, codec.sample_rate())?)?;
    let seconds = audio.len() as f64 / codec.sample_rate() as f64;
    println!(
        "frames {}  {:.3} s  realtime factor {:.1}x",
        codes.frames(),
        seconds,
        seconds / elapsed.max(1e-9)
    );
    Ok(())
}

fn read_corpus(dir: &Path, sample_rate: u32) -> Result<Corpus> {
    let files = io::wav_files(dir)?;
    if files.is_empty() {
        bail!("{} holds no .wav files", dir.display());
    }
    let clips = files
        .iter()
        .map(|f| wav::read(f, sample_rate))
        .collect::<Result<Vec<_>>>()?;
    Ok(Corpus::new(clips, sample_rate)?)
}

#[allow(clippy::too_many_arguments)]
fn cmd_train(
    corpus: &Path,
    out: &Path,
    config: &str,
    train_config: Option<&Path>,
    steps: Option<usize>,
    seed: Option<u64>,
    loss_csv: Option<&Path>,
) -> Result<()> {
    let cfg = resolve_config(config)?;
    let mut tcfg = match train_config {
        Some(p) => {
            let text = std::fs::read_to_string(p)
                .with_context(|| format!("cannot read {}", p.display()))?;
            TrainConfig::from_json(&text)
                .with_context(|| format!("{} is not a valid training config", p.display()))?
        }
        None => TrainConfig::toy(),
    };
    if let Some(s) = steps {
        tcfg.steps = s;
    }
    if let Some(s) = seed {
        tcfg.seed = s;
    }
    tcfg.validate()?;
    let corpus = read_corpus(corpus, cfg.stft.sample_rate)?;
    info!(
        "{:.1} s of audio, {} steps, seed {}",
        corpus.seconds(),
        tcfg.steps,
        tcfg.seed
    );
    let mut trainer = Trainer::new(cfg, tcfg)?;
    let t0 = Instant::now();
    let total = trainer.config().steps;
    let reports = trainer.run(&corpus, |r| {
        if r.step % 50 == 0 || r.step + 1 == total {
            info!(
                "step {:>5}  rec {:.4}  cmt {:.4}  total {:.4}  utilization {:.3}  ({:.0} s)",
                r.step,
                r.l_rec,
                r.l_cmt,
                r.total,
                r.utilization,
                t0.elapsed().as_secs_f64()
            );
        }
    })?;
    let mut csv = Vec::new();
    write_csv(&reports, &mut csv)?;
    let csv_path = loss_csv.map(Path::to_path_buf).unwrap_or_else(|| {
        let mut p = out.as_os_str().to_owned();
        p.push(".loss.csv");
        PathBuf::from(p)
    });
    let weights = trainer.codec.checkpoint().to_bytes()?;
    io::write_atomic(out, &weights)?;
    io::write_atomic(&csv_path, &csv)?;
    let (first, last) = (&reports[0], &reports[reports.len() - 1]);
    println!(
        "{} steps in {:.1} s  rec {:.4} -> {:.4}  wrote {} and {}",
        reports.len(),
        t0.elapsed().as_secs_f64(),
        first.l_rec,
        last.l_rec,
        out.display(),
        csv_path.display()
    );
    Ok(())
}

fn cmd_eval(
    corpus: &Path,
    model: &ModelArgs,
    stages: Option<usize>,
    out: Option<&Path>,
) -> Result<()> {
    let codec = load_codec(model)?;
    let n = stages_or_all(&codec, stages)?;
    let files = io::wav_files(corpus)?;
    if files.is_empty() {
        bail!("{} holds no .wav files", corpus.display());
    }
    let mut rows = Vec::new();
    for f in &files {
        let name = f
            .file_name()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default();
        match wav::read(f, codec.sample_rate())
            .and_then(|x| Ok(evaluate_clip(&codec, &name, &x, n)?))
        {
            Ok(r) => rows.push(r),
            Err(e) => warn!("skipping {name}: {e:#}"),
        }
    }
    if rows.is_empty() {
        bail!(
            "none of the {} files in {} could be evaluated",
            files.len(),
            corpus.display()
        );
    }
    let report = Report::new(rows)?;
    let mut csv = Vec::new();
    report.write_csv(&mut csv)?;
    match out {
        Some(p) => io::write_atomic(p, &csv)?,
        None => print!("{}", String::from_utf8(csv)?),
    }
    let agg = report.aggregate();
    info!(
        "{} files  SDR {:.2} dB  mel {:.4}",
        report.rows().len(),
        agg.sdr_db,
        agg.mel_loss
    );
    Ok(())
}

fn print_config(cfg: &CodecConfig) -> Result<()> {
    let cost = count_cost(&cfg.model)?;
    let q = &cfg.quantizer;
    let sr = cfg.stft.sample_rate as f64;
    println!("config_hash      {:016x}", cfg.hash());
    println!("sample_rate      {} Hz", cfg.stft.sample_rate);
    println!(
        "params           {:.3} M (encoder {}, decoder {})",
        cost.params as f64 / 1e6,
        cost.encoder_params,
        cost.decoder_params
    );
    println!(
        "codebook entries {} x {} x {}",
        q.n_stages, q.codebook_size, q.factorized_dim
    );
    println!(
        "compute          {:.3} GFLOPs per second of audio",
        cost.flops_per_second_audio / 1e9
    );
    println!("frame_rate       {} frames/s", cfg.frame_rate());
    println!(
        "bitrate          {:.3} kbps at {} stages",
        cfg.kbps(q.n_stages),
        q.n_stages
    );
    println!(
        "latency          {} samples ({:.2} ms)",
        cfg.latency(),
        1e3 * cfg.latency() as f64 / sr
    );
    Ok(())
}

fn cmd_info(file: Option<&Path>, config: Option<&str>) -> Result<()> {
    match (file, config) {
        (Some(path), None) => {
            let bytes =
                std::fs::read(path).with_context(|| format!("cannot read {}", path.display()))?;
            if bytes.starts_with(&MAGIC) {
                let (h, codes) = codec::unpack(&bytes)
                    .with_context(|| format!("{} is not a valid stream", path.display()))?;
                println!("magic            SPTK");
                println!("version          {}", codec::VERSION);
                println!("sample_rate      {}", h.sample_rate);
                println!("n_stages         {}", h.n_stages);
                println!("codebook_size    {}", h.codebook_size);
                println!("frame_rate       {}", h.frame_rate);
                println!("n_frames         {}", h.n_frames);
                println!("config_hash      {:016x}", h.config_hash);
                println!("bits_per_code    {}", h.bits_per_code());
                println!("payload_bytes    {}", h.payload_len());
                println!("seconds          {:.3}", h.seconds());
                println!("bitrate          {:.3} kbps", h.kbps());
                debug_assert_eq!(codes.frames(), h.n_frames as usize);
                Ok(())
            } else if bytes.starts_with(&WEIGHTS_MAGIC) {
                let ck = Checkpoint::from_bytes(&bytes)
                    .with_context(|| format!("{} is not a usable weights file", path.display()))?;
                println!("tensors          {}", ck.tensors.len());
                print_config(&ck.config)
            } else {
                bail!(
                    "{} is neither a .sptk stream nor a weights file",
                    path.display()
                )
            }
        }
        (None, Some(c)) => print_config(&resolve_config(c)?),
        (None, None) => bail!("give a file or --config"),
        (Some(_), Some(_)) => bail!("give either a file or --config, not both"),
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.cmd {
        Command::Encode {
            input,
            output,
            model,
            stages,
        } => cmd_encode(&input, &output, &model, stages),
        Command::Decode {
            input,
            output,
            model,
        } => cmd_decode(&input, &output, &model),
        Command::Train {
            corpus,
            out,
            config,
            train_config,
            steps,
            seed,
            loss_csv,
        } => cmd_train(
            &corpus,
            &out,
            &config,
            train_config.as_deref(),
            steps,
            seed,
            loss_csv.as_deref(),
        ),
        Command::Eval {
            corpus,
            model,
            stages,
            out,
        } => cmd_eval(&corpus, &model, stages, out.as_deref()),
        Command::Info { file, config } => cmd_info(file.as_deref(), config.as_deref()),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_INPUT } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
