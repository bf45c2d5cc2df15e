use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use harmorch::dissonance::DissonanceParams;
use harmorch::harmony::{analyze_skeleton, skeleton_to_score, FilterConfig, HarmonySkeleton};
use harmorch::hiermodel::{load_checkpoint, save_checkpoint, AdamW, HierModel, ModelConfig, ModelError};
use harmorch::metrics::evaluate;
use harmorch::pipeline::{
    generate_window, grpo_step, read_skeletons, run_grpo, toy_corpus, toy_windows, train, Bandit, GrpoConfig,
    HttpEmbedder, ModelPolicy, PipelineError, RewardKind, RewardSpec, SamplingConfig, SkeletonDecoder,
    SkeletonStream, TrainConfig,
};
use harmorch::score::{parse_midi, write_midi, Bar, MidiError, Score};
use harmorch::tokenizer::{decode_track_bar, encode, from_json, to_json, Capacity, TokenJson, TokenizeError};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::fmt;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "harmorch", version, about = "Harmony-aware symbolic orchestration toolkit")]
struct Cli {
    /// JSON file with optional `model`, `train`, `sampling`, `grpo`, `reward`
    /// and `filter` sections.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Print the beat-wise harmony skeleton of a MIDI file.
    Analyze {
        midi: PathBuf,
        /// Also write the skeleton as a playable MIDI file.
        #[arg(long)]
        emit_midi: Option<PathBuf>,
    },
    /// Print the compressed token streams of every track bar.
    Tokenize {
        midi: PathBuf,
        /// Tokens allowed per cell.
        #[arg(long, default_value_t = 32)]
        capacity: usize,
    },
    /// Rebuild a MIDI file from `tokenize` output.
    Detokenize {
        tokens: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Print the objective metrics of a MIDI file.
    Metrics {
        midi: PathBuf,
        /// Reference skeleton (JSON or MIDI); enables precision/recall.
        #[arg(long)]
        skeleton: Option<PathBuf>,
    },
    /// Sample a piece over a harmony skeleton.
    Generate(GenerateArgs),
    /// Fit a model to the built-in toy corpus.
    TrainToy {
        #[arg(long)]
        out: PathBuf,
        /// Continue from this checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Per-step losses as JSON lines.
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// GRPO fine-tuning on toy skeletons, or on a two-armed bandit.
    GrpoToy {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Rollout records as JSON lines.
        #[arg(long)]
        log: Option<PathBuf>,
        #[arg(long)]
        bandit: bool,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

#[derive(Args)]
struct GenerateArgs {
    /// Skeleton file (JSON or MIDI).
    #[arg(long, conflicts_with = "toy_skeletons")]
    skeleton: Option<PathBuf>,
    /// Which skeleton of a multi-skeleton file.
    #[arg(long, default_value_t = 0)]
    index: usize,
    /// Sample the skeleton from the toy chord decoder.
    #[arg(long)]
    toy_skeletons: bool,
    /// Bars of a toy skeleton.
    #[arg(long, default_value_t = 4)]
    bars: usize,
    /// Drop toy skeletons that fail the skeleton filters.
    #[arg(long)]
    filter: bool,
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    top_p: Option<f64>,
    #[arg(long)]
    temperature: Option<f64>,
    #[arg(long)]
    lambda_hn: Option<f64>,
    #[arg(long)]
    lambda_nn: Option<f64>,
}

#[derive(Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct CliConfig {
    model: Option<ModelConfig>,
    train: TrainConfig,
    sampling: SamplingConfig,
    grpo: Option<GrpoConfig>,
    reward: RewardSpec,
    filter: FilterConfig,
}

impl CliConfig {
    fn load(path: Option<&Path>) -> Result<Self> {
        let Some(path) = path else { return Ok(Self::default()) };
        let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        serde_json::from_str(&text).map_err(|e| ParseFailure(format!("{}: {e}", path.display())).into())
    }
}

/// Malformed input file (exit 2).
#[derive(Debug)]
struct ParseFailure(String);

impl fmt::Display for ParseFailure {
    fn fmt(&self, f: &mut fmt::Formatter) -> fmt::Result {
        write!(f, "cannot parse {}", self.0)
    }
}

impl std::error::Error for ParseFailure {}

/// Cells whose token streams exceed the capacity (exit 3).
#[derive(Debug)]
struct CapacityFailure(Vec<String>);

impl fmt::Display for CapacityFailure {
    fn fmt(&self, f: &mut fmt::Formatter) -> fmt::Result {
        write!(f, "{} cell(s) over capacity: {}", self.0.len(), self.0.join("; "))
    }
}

impl std::error::Error for CapacityFailure {}

fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if cause.is::<ParseFailure>() || cause.is::<serde_json::Error>() {
            return 2;
        }
        if let Some(e) = cause.downcast_ref::<MidiError>() {
            return match e {
                MidiError::Parse { .. } => 2,
                MidiError::Capacity { .. } => 3,
            };
        }
        if cause.is::<CapacityFailure>() {
            return 3;
        }
        if let Some(e) = cause.downcast_ref::<PipelineError>() {
            match e {
                PipelineError::WindowTooLong { .. } => return 4,
                PipelineError::Remote(_) => return 5,
                PipelineError::Midi(MidiError::Parse { .. }) => return 2,
                PipelineError::Midi(MidiError::Capacity { .. }) => return 3,
                PipelineError::Model(ModelError::Shape(_) | ModelError::DuplicateTrack { .. }) => return 4,
                _ => {}
            }
        }
        if let Some(ModelError::Shape(_) | ModelError::DuplicateTrack { .. }) = cause.downcast_ref::<ModelError>() {
            return 4;
        }
    }
    1
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn print_json<T: Serialize>(value: &T) -> Result<()> {
    let mut out = std::io::stdout().lock();
    serde_json::to_writer_pretty(&mut out, value)?;
    writeln!(out)?;
    Ok(())
}

fn read_score(path: &Path) -> Result<Score> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    parse_midi(&bytes).with_context(|| format!("parsing {}", path.display()))
}

fn read_skeleton(path: &Path, index: usize) -> Result<HarmonySkeleton> {
    let all = read_skeletons(path).map_err(|e| match e {
        PipelineError::Config(m) => anyhow::Error::new(ParseFailure(m)),
        e => e.into(),
    })?;
    let n = all.len();
    all.into_iter()
        .nth(index)
        .with_context(|| format!("{} holds {n} skeleton(s), no index {index}", path.display()))
}

#[derive(Serialize, Deserialize)]
struct TrackTokens {
    track_id: u8,
    instrument_id: u8,
    tokens: Vec<TokenJson>,
}

#[derive(Serialize, Deserialize)]
struct BarTokens {
    bar_length: u32,
    tracks: Vec<TrackTokens>,
}

#[derive(Serialize, Deserialize)]
struct TokenFile {
    bars: Vec<BarTokens>,
}

fn run(cli: Cli) -> Result<()> {
    let cfg = CliConfig::load(cli.config.as_deref())?;
    match cli.command {
        Command::Analyze { midi, emit_midi } => {
            let sk = analyze_skeleton(&read_score(&midi)?);
            if let Some(out) = emit_midi {
                fs::write(&out, write_midi(&skeleton_to_score(&sk)))
                    .with_context(|| format!("writing {}", out.display()))?;
            }
            print_json(&sk)
        }
        Command::Tokenize { midi, capacity } => {
            let score = read_score(&midi)?;
            let mut bars = Vec::new();
            let mut overflow = Vec::new();
            for (bi, bar) in score.bars.iter().enumerate() {
                let mut tracks = Vec::new();
                for tb in bar.active_tracks() {
                    match encode(tb, bar.bar_length, Capacity::Custom(capacity)) {
                        Ok(seq) => tracks.push(TrackTokens {
                            track_id: tb.track_id,
                            instrument_id: tb.instrument_id,
                            tokens: to_json(&seq.tokens),
                        }),
                        Err(TokenizeError::Overflow { len, limit, .. }) => {
                            overflow.push(format!("bar {bi} track {}: {len} tokens > {limit}", tb.track_id))
                        }
                        Err(e) => return Err(e).with_context(|| format!("bar {bi} track {}", tb.track_id)),
                    }
                }
                bars.push(BarTokens {
                    bar_length: bar.bar_length,
                    tracks,
                });
            }
            if !overflow.is_empty() {
                return Err(CapacityFailure(overflow).into());
            }
            print_json(&TokenFile { bars })
        }
        Command::Detokenize { tokens, out } => {
            let text = fs::read_to_string(&tokens).with_context(|| format!("reading {}", tokens.display()))?;
            let file: TokenFile = serde_json::from_str(&text)
                .map_err(|e| ParseFailure(format!("{}: {e}", tokens.display())))?;
            let mut bars = Vec::new();
            for (bi, b) in file.bars.iter().enumerate() {
                let mut bar = Bar::new(b.bar_length);
                for t in &b.tracks {
                    let toks = from_json(&t.tokens).map_err(|e| ParseFailure(format!("bar {bi}: {e}")))?;
                    let tb = decode_track_bar(&toks, b.bar_length, t.track_id, t.instrument_id)
                        .map_err(|e| ParseFailure(format!("bar {bi} track {}: {e}", t.track_id)))?;
                    bar.tracks.push(tb);
                }
                bars.push(bar);
            }
            let score = Score::new(bars);
            score.validate().map_err(|e| ParseFailure(e.to_string()))?;
            fs::write(&out, write_midi(&score)).with_context(|| format!("writing {}", out.display()))?;
            print_json(&serde_json::json!({ "midi": out }))
        }
        Command::Metrics { midi, skeleton } => {
            let score = read_score(&midi)?;
            let sk = skeleton.as_deref().map(|p| read_skeleton(p, 0)).transpose()?;
            print_json(&evaluate(
                &score,
                sk.as_ref(),
                cfg.sampling.params,
                &cfg.sampling.weights,
            ))
        }
        Command::Generate(args) => generate(args, &cfg),
        Command::TrainToy { out, resume, log } => train_toy(&cfg, &out, resume.as_deref(), log.as_deref()),
        Command::GrpoToy {
            checkpoint,
            out,
            log,
            bandit,
            seed,
        } => {
            if bandit {
                grpo_bandit(&cfg, seed)
            } else {
                grpo_model(&cfg, checkpoint.as_deref(), out.as_deref(), log.as_deref(), seed)
            }
        }
    }
}

fn generate(args: GenerateArgs, cfg: &CliConfig) -> Result<()> {
    let mut sampling = cfg.sampling.clone();
    if let Some(s) = args.seed {
        sampling.seed = s;
    }
    if let Some(p) = args.top_p {
        sampling.top_p = p;
    }
    if let Some(t) = args.temperature {
        sampling.temperature = t;
    }
    sampling.params = DissonanceParams::new(
        args.lambda_hn.unwrap_or(sampling.params.lambda_hn),
        args.lambda_nn.unwrap_or(sampling.params.lambda_nn),
    );
    let model = load_checkpoint(&args.checkpoint)
        .with_context(|| format!("loading {}", args.checkpoint.display()))?
        .model;
    let sk = match (&args.skeleton, args.toy_skeletons) {
        (Some(path), _) => read_skeleton(path, args.index)?,
        (None, true) => toy_skeleton(sampling.seed, args.bars, args.filter.then_some(&cfg.filter))?,
        (None, false) => bail!("pass --skeleton or --toy-skeletons"),
    };
    let g = generate_window(&model, &sk, &sampling)?;
    fs::write(&args.out, write_midi(&g.score)).with_context(|| format!("writing {}", args.out.display()))?;
    if !g.log.closed_cells.is_empty() {
        eprintln!("closed {} cell(s) early", g.log.closed_cells.len());
    }
    let report = evaluate(&g.score, Some(&sk), sampling.params, &sampling.weights);
    print_json(&serde_json::json!({
        "midi": args.out,
        "metrics": report,
        "log": g.log,
    }))
}

/// Samples from the toy chord decoder until a skeleton passes `filter`.
fn toy_skeleton(seed: u64, bars: usize, filter: Option<&FilterConfig>) -> Result<HarmonySkeleton> {
    let corpus: Vec<HarmonySkeleton> = toy_corpus().into_iter().map(|(_, sk)| sk).collect();
    let mut dec = SkeletonDecoder::new(seed);
    dec.train(&corpus, 150, 3e-3);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let Some(filter) = filter else {
        return Ok(dec.sample(bars, &mut rng)?);
    };
    let attempts = 32;
    let candidates = (0..attempts).map_while(|_| dec.sample(bars, &mut rng).ok());
    let mut stream = SkeletonStream::new(candidates, filter.clone());
    let found = stream.next();
    eprintln!(
        "skeleton survival: {}/{} accepted",
        stream.report.accepted, stream.report.seen
    );
    found.with_context(|| format!("no toy skeleton passed the filters in {attempts} attempts"))
}

fn train_toy(cfg: &CliConfig, out: &Path, resume: Option<&Path>, log: Option<&Path>) -> Result<()> {
    let (mut model, mut opt) = match resume {
        Some(p) => {
            let ck = load_checkpoint(p).with_context(|| format!("loading {}", p.display()))?;
            let opt = ck.optimizer.unwrap_or_else(|| AdamW::new(cfg.train.weight_decay));
            (ck.model, opt)
        }
        None => (
            HierModel::new(cfg.model.clone().unwrap_or_default())?,
            AdamW::new(cfg.train.weight_decay),
        ),
    };
    let data = toy_windows(&model.config)?;
    let mut sink = log
        .map(|p| fs::File::create(p).with_context(|| format!("creating {}", p.display())))
        .transpose()?;
    let mut io_err = None;
    let report = train(&mut model, &mut opt, &data, &cfg.train, |step, loss| {
        if step % 100 == 0 {
            eprintln!("step {step}: loss {:.4}", loss.total);
        }
        if let Some(f) = sink.as_mut() {
            let line = serde_json::json!({ "step": step, "loss": loss });
            if let Err(e) = writeln!(f, "{line}") {
                io_err.get_or_insert(e);
            }
        }
    })?;
    if let Some(e) = io_err {
        return Err(e).context("writing the training log");
    }
    save_checkpoint(out, &model, Some(&opt)).with_context(|| format!("writing {}", out.display()))?;
    print_json(&serde_json::json!({ "checkpoint": out, "report": report }))
}

/// Two-armed bandit paying 1 for arm 1 and 0 for arm 0.
fn grpo_bandit(cfg: &CliConfig, seed: u64) -> Result<()> {
    let gcfg = cfg.grpo.clone().unwrap_or(GrpoConfig {
        k: 1,
        g: 8,
        lr: 0.05,
        epochs: 200,
        ..Default::default()
    });
    gcfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut policy = Bandit::new(2);
    let reference = policy.clone();
    let mut opt = AdamW::new(0.0);
    let mut curve = Vec::new();
    for epoch in 0..gcfg.epochs {
        let behavior = policy.clone();
        let groups: Vec<Vec<(usize, f64)>> = (0..gcfg.k)
            .map(|_| {
                (0..gcfg.g)
                    .map(|_| {
                        let a = behavior.sample(&mut rng);
                        (a, a as f64)
                    })
                    .collect()
            })
            .collect();
        let step = grpo_step(&mut policy, &behavior, &reference, &groups, &gcfg, &mut opt)?;
        if step.rejected {
            eprintln!("epoch {epoch}: step rejected");
        }
        curve.push(serde_json::json!({
            "epoch": epoch,
            "mean_reward": step.mean_reward,
            "p_best": policy.probabilities()[1],
        }));
    }
    print_json(&curve)
}

fn grpo_model(
    cfg: &CliConfig,
    checkpoint: Option<&Path>,
    out: Option<&Path>,
    log: Option<&Path>,
    seed: u64,
) -> Result<()> {
    let gcfg = cfg.grpo.clone().unwrap_or(GrpoConfig {
        k: 2,
        g: 4,
        epochs: 3,
        lr: 1e-4,
        ..Default::default()
    });
    let model = match checkpoint {
        Some(p) => load_checkpoint(p).with_context(|| format!("loading {}", p.display()))?.model,
        None => HierModel::new(cfg.model.clone().unwrap_or_default())?,
    };
    let embedder = match (&cfg.reward.remote, cfg.reward.kind, cfg.reward.base) {
        (Some(r), RewardKind::RemoteEmbedding, _) | (Some(r), RewardKind::Composite, RewardKind::RemoteEmbedding) => {
            Some(HttpEmbedder::new(r))
        }
        _ => None,
    };
    let skeletons: Vec<HarmonySkeleton> = toy_corpus().into_iter().map(|(_, sk)| sk).collect();
    let mut policy = ModelPolicy(model);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sink: Box<dyn Write> = match log {
        Some(p) => Box::new(fs::File::create(p).with_context(|| format!("creating {}", p.display()))?),
        None => Box::new(std::io::sink()),
    };
    let reports = run_grpo(
        &mut policy,
        &skeletons,
        &gcfg,
        &cfg.sampling,
        &cfg.reward,
        embedder.as_ref().map(|e| e as &dyn harmorch::pipeline::Embedder),
        &mut rng,
        std::io::BufWriter::new(sink),
    )?;
    if let Some(out) = out {
        save_checkpoint(out, &policy.0, None).with_context(|| format!("writing {}", out.display()))?;
    }
    print_json(&reports)
}
