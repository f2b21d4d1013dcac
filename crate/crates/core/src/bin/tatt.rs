use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::json;

use tatt::gradcheck::{GradReport, NetworkCase};
use tatt::interpreter::attention_heatmap_extract;
use tatt::losses::{LossWeights, Windowing};
use tatt::network;
use tatt::nn::ParamStore;
use tatt::synth::corpus::{generate_sample, sample_seed, Corpus, GlyphSample, Split, SLOT_STEPS};
use tatt::synth::{generate_corpus, pnm};
use tatt::train::eval::{heldout_tsc, mask_attention};
use tatt::train::{
    evaluate, init_joint_params, load_checkpoint_any, pretrain_tpg, run, AdamState, AnyCheckpoint,
    Checkpoint, PretrainConfig, RngState, TrainConfig, TrainState,
};
use tatt::{Error, NetworkConfig, Precision, Result, Scalar, Tensor};

#[derive(Parser)]
#[command(
    name = "tatt",
    version,
    about = "Text-prior guided super-resolution of text images"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render a synthetic glyph corpus to disk.
    Synth {
        #[arg(long, default_value_t = 512)]
        n: usize,
        #[arg(long, default_value_t = 7)]
        seed: u64,
        #[arg(long, default_value = "corpus")]
        out: PathBuf,
    },
    /// Pretrain the prior generator (`--phase tpg`) or train the network.
    Train(TrainArgs),
    /// Score a checkpoint on a corpus split and print a JSON report.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long, default_value = "corpus")]
        corpus: PathBuf,
        #[arg(long, value_enum, default_value_t = SplitArg::Test)]
        split: SplitArg,
        /// Seed of the per-sample deformations used for the consistency score.
        #[arg(long, default_value_t = 11)]
        seed: u64,
    },
    /// Super-resolve one LR image.
    Infer {
        #[arg(long)]
        ckpt: PathBuf,
        /// LR pixmap; overrides `--sample`.
        #[arg(long)]
        input: Option<PathBuf>,
        #[command(flatten)]
        source: SampleSource,
        #[arg(long, default_value = "sr.ppm")]
        out: PathBuf,
    },
    /// Write the attention heatmap of one label character as a graymap.
    Heatmap {
        #[arg(long)]
        ckpt: PathBuf,
        #[command(flatten)]
        source: SampleSource,
        /// Position of the character within the label.
        #[arg(long = "char", default_value_t = 0)]
        char_index: usize,
        #[arg(long, default_value = "heatmap.pgm")]
        out: PathBuf,
    },
    /// Finite-difference check of the whole-network gradient at mini size.
    Gradcheck {
        /// Number of random cases.
        #[arg(long, default_value_t = 3)]
        n: usize,
        #[arg(long, default_value_t = 1)]
        seed: u64,
    },
}

#[derive(Args)]
struct SampleSource {
    /// Corpus to read the sample from; without it the sample is rendered
    /// from `--seed`, matching a corpus generated with that seed.
    #[arg(long)]
    corpus: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    sample: usize,
    #[arg(long, default_value_t = 7)]
    seed: u64,
}

#[derive(Clone, Copy, ValueEnum)]
enum Phase {
    Tpg,
    Joint,
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Val,
    Test,
}

impl From<SplitArg> for Split {
    fn from(s: SplitArg) -> Self {
        match s {
            SplitArg::Train => Split::Train,
            SplitArg::Val => Split::Val,
            SplitArg::Test => Split::Test,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum PrecisionArg {
    #[value(name = "32")]
    P32,
    #[value(name = "64")]
    P64,
}

impl From<PrecisionArg> for Precision {
    fn from(p: PrecisionArg) -> Self {
        match p {
            PrecisionArg::P32 => Precision::F32,
            PrecisionArg::P64 => Precision::F64,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum ConfigArg {
    Desk,
    Mini,
    Full,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long, value_enum, default_value_t = Phase::Joint)]
    phase: Phase,
    #[arg(long, default_value = "corpus")]
    corpus: PathBuf,
    #[arg(long, default_value_t = 7)]
    seed: u64,
    /// Total steps; a resumed run continues up to this count.
    #[arg(long)]
    steps: Option<u64>,
    #[arg(long, default_value_t = 16)]
    batch: usize,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long, default_value_t = 1.0)]
    alpha: f64,
    #[arg(long, default_value_t = 0.1)]
    beta: f64,
    /// Drop the text-prior branch entirely.
    #[arg(long)]
    no_tp: bool,
    #[arg(long)]
    freeze_tpg: bool,
    /// Deformation per sample fixed by its seed.
    #[arg(long)]
    fixed_deform: bool,
    #[arg(long, value_enum, default_value_t = PrecisionArg::P32)]
    precision: PrecisionArg,
    /// Pretrained generator to start from, or a joint checkpoint to resume.
    #[arg(long)]
    ckpt: Option<PathBuf>,
    #[arg(long, default_value = "model.ckpt")]
    out: PathBuf,
    /// Per-step metrics; defaults to the output path with `.metrics.jsonl`.
    #[arg(long)]
    log: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = ConfigArg::Desk)]
    config: ConfigArg,
}

fn network_config(c: ConfigArg) -> NetworkConfig {
    match c {
        ConfigArg::Desk => NetworkConfig::desk(),
        ConfigArg::Mini => NetworkConfig::mini(),
        ConfigArg::Full => NetworkConfig::full(),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

fn dispatch(cmd: Command) -> Result<ExitCode> {
    match cmd {
        Command::Synth { n, seed, out } => {
            let m = generate_corpus(n, seed, &out)?;
            println!(
                "{}",
                json!({
                    "out": out,
                    "count": m.header.count,
                    "train": m.split_count(Split::Train),
                    "val": m.split_count(Split::Val),
                    "test": m.split_count(Split::Test),
                })
            );
        }
        Command::Train(args) => train(&args)?,
        Command::Eval {
            ckpt,
            corpus,
            split,
            seed,
        } => {
            let corpus = Corpus::load(&corpus)?;
            let out = match load_checkpoint_any(&ckpt)? {
                AnyCheckpoint::F32(c) => {
                    eval_report(&c.params, &c.network, &corpus, split.into(), seed)?
                }
                AnyCheckpoint::F64(c) => {
                    eval_report(&c.params, &c.network, &corpus, split.into(), seed)?
                }
            };
            println!(
                "{}",
                serde_json::to_string_pretty(&out).map_err(|e| Error::Parse(e.to_string()))?
            );
        }
        Command::Infer {
            ckpt,
            input,
            source,
            out,
        } => {
            let ck = load_checkpoint_any(&ckpt)?;
            let lr = match input {
                Some(p) => pnm::read_pnm(&p)?,
                None => load_sample(&source)?.lr,
            };
            let sr = match &ck {
                AnyCheckpoint::F32(c) => {
                    network::infer(&c.params, &c.network, &lr.cast())?.sr.cast()
                }
                AnyCheckpoint::F64(c) => network::infer(&c.params, &c.network, &lr)?.sr,
            };
            pnm::write_file(&out, &pnm::encode_ppm(&sr)?)?;
            println!("{}", json!({ "out": out, "shape": sr.shape() }));
        }
        Command::Heatmap {
            ckpt,
            source,
            char_index,
            out,
        } => {
            let sample = load_sample(&source)?;
            let map = match load_checkpoint_any(&ckpt)? {
                AnyCheckpoint::F32(c) => heatmap(&c.params, &c.network, &sample, char_index)?,
                AnyCheckpoint::F64(c) => heatmap(&c.params, &c.network, &sample, char_index)?,
            };
            pnm::write_file(&out, &pnm::encode_pgm(&map)?)?;
            println!(
                "{}",
                json!({ "out": out, "label": sample.label, "shape": map.shape() })
            );
        }
        Command::Gradcheck { n, seed } => {
            let mut worst = 0.0f64;
            for k in 0..n as u64 {
                let case = NetworkCase::random(NetworkConfig::mini(), seed + k)?;
                let reports = case.check(8, seed + k)?;
                let w = reports
                    .iter()
                    .max_by(|a, b| a.max_rel_error.total_cmp(&b.max_rel_error))
                    .cloned()
                    .unwrap_or(GradReport {
                        name: String::new(),
                        checked: 0,
                        max_rel_error: 0.0,
                    });
                let checked: usize = reports.iter().map(|r| r.checked).sum();
                println!(
                    "{}",
                    json!({ "seed": seed + k, "checked": checked, "worst": w.name, "max_rel_error": w.max_rel_error })
                );
                worst = worst.max(w.max_rel_error);
            }
            let pass = worst < 1e-4;
            println!("{}", json!({ "max_rel_error": worst, "pass": pass }));
            if !pass {
                return Ok(ExitCode::FAILURE);
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn load_sample(src: &SampleSource) -> Result<GlyphSample> {
    match &src.corpus {
        Some(dir) => {
            let corpus = Corpus::load(dir)?;
            corpus
                .samples
                .get(src.sample)
                .cloned()
                .ok_or(Error::Bounds {
                    index: src.sample,
                    limit: corpus.len(),
                })
        }
        None => generate_sample(sample_seed(src.seed, src.sample), src.sample, Split::Test),
    }
}

fn heatmap<T: Scalar>(
    params: &ParamStore<T>,
    net: &NetworkConfig,
    sample: &GlyphSample,
    char_index: usize,
) -> Result<Tensor<f64>> {
    let slot = *sample.slots.get(char_index).ok_or(Error::Bounds {
        index: char_index,
        limit: sample.slots.len(),
    })?;
    let inf = network::infer(params, net, &sample.lr.cast())?;
    let att = inf.attention.ok_or_else(|| {
        Error::Contract("checkpoint was trained without the text-prior branch".into())
    })?;
    attention_heatmap_extract(
        &att,
        slot * net.prior_len / SLOT_STEPS,
        net.lr_height,
        net.lr_width,
    )
}

fn eval_report<T: Scalar>(
    params: &ParamStore<T>,
    net: &NetworkConfig,
    corpus: &Corpus,
    split: Split,
    seed: u64,
) -> Result<serde_json::Value> {
    let w = Windowing::default();
    let report = evaluate(params, net, corpus, split, w)?;
    let tsc = match report.deformed_samples {
        0 => None,
        _ => Some(heldout_tsc(params, net, corpus, split, seed, w)?),
    };
    let mut above = 0;
    let mut scored = 0;
    for i in corpus.indices(split) {
        if let Some(m) = mask_attention(params, net, &corpus.samples[i])? {
            scored += 1;
            above += (m.share > m.uniform) as usize;
        }
    }
    let share = (scored > 0).then(|| above as f64 / scored as f64);
    Ok(json!({ "report": report, "heldout_tsc": tsc, "attention_in_mask_rate": share }))
}

fn train(args: &TrainArgs) -> Result<()> {
    match (args.phase, args.precision.into()) {
        (Phase::Tpg, Precision::F32) => train_tpg::<f32>(args),
        (Phase::Tpg, Precision::F64) => train_tpg::<f64>(args),
        (Phase::Joint, Precision::F32) => train_joint::<f32>(args),
        (Phase::Joint, Precision::F64) => train_joint::<f64>(args),
    }
}

fn train_config(args: &TrainArgs, steps: u64, lr: f64) -> TrainConfig {
    TrainConfig {
        lr,
        batch: args.batch,
        steps,
        weights: LossWeights {
            alpha: args.alpha,
            beta: args.beta,
        },
        seed: args.seed,
        precision: args.precision.into(),
        freeze_tpg: args.freeze_tpg,
        fixed_deform: args.fixed_deform,
        ..TrainConfig::default()
    }
}

fn train_tpg<T: Scalar>(args: &TrainArgs) -> Result<()> {
    let net = network_config(args.config);
    let defaults = PretrainConfig::default();
    let cfg = PretrainConfig {
        steps: args.steps.unwrap_or(defaults.steps),
        batch: args.batch,
        lr: args.lr.unwrap_or(defaults.lr),
        seed: args.seed,
        ..defaults
    };
    let mut log = metrics_writer(args)?;
    let mut failure = None;
    let (params, report) = pretrain_tpg::<T>(&net, &cfg, |step, loss| {
        if let Err(e) = writeln!(log, "{}", json!({ "step": step, "loss": loss })) {
            failure.get_or_insert(e);
        }
    })?;
    if let Some(e) = failure {
        return Err(Error::io(metrics_path(args), e));
    }
    let ckpt = Checkpoint {
        train: train_config(args, cfg.steps, cfg.lr),
        network: net,
        step: cfg.steps,
        rng: RngState::capture(&ChaCha8Rng::seed_from_u64(args.seed)),
        params,
        adam: AdamState::new(),
    };
    ckpt.save(&args.out)?;
    println!("{}", json!({ "out": args.out, "report": report }));
    Ok(())
}

fn is_joint<T: Scalar>(params: &ParamStore<T>) -> bool {
    params.get("tail/w").is_some()
}

fn train_joint<T: Scalar>(args: &TrainArgs) -> Result<()> {
    let corpus = Corpus::load(&args.corpus)?;
    let init = args.ckpt.as_deref().map(load_checkpoint_any).transpose()?;
    let mut state = match init {
        Some(any) if is_joint(&any.params::<T>()) => {
            let asked: Precision = args.precision.into();
            if any.precision() != asked {
                return Err(Error::Contract(format!(
                    "checkpoint is {}-bit, run asked for {}-bit",
                    any.precision().bits(),
                    asked.bits()
                )));
            }
            let ckpt = Checkpoint::<T>::load(args.ckpt.as_deref().expect("checked above"))?;
            TrainState::from_checkpoint(ckpt)
        }
        other => {
            let mut net = network_config(args.config);
            net.tp_branch = !args.no_tp;
            let pretrained = other.map(|c| c.params::<T>());
            let params = init_joint_params(&net, args.seed, pretrained.as_ref())?;
            let train = train_config(args, args.steps.unwrap_or(2000), args.lr.unwrap_or(1e-3));
            TrainState::new(train, net, params)?
        }
    };
    let until = args.steps.unwrap_or(state.train.steps);
    let mut log = metrics_writer(args)?;
    let path = metrics_path(args);
    run(&mut state, &corpus, until, |_, rec, val| {
        let mut line = serde_json::to_value(rec).map_err(|e| Error::Parse(e.to_string()))?;
        if let Some(v) = val {
            line["val_l_sr"] = json!(v.val_l_sr);
            line["val_psnr"] = json!(v.val_psnr);
        }
        writeln!(log, "{line}").map_err(|e| Error::io(&path, e))
    })?;
    log.flush().map_err(|e| Error::io(&path, e))?;
    state.checkpoint().save(&args.out)?;
    println!("{}", json!({ "out": args.out, "step": state.step }));
    Ok(())
}

fn metrics_path(args: &TrainArgs) -> PathBuf {
    args.log.clone().unwrap_or_else(|| {
        let mut s = args.out.clone().into_os_string();
        s.push(".metrics.jsonl");
        PathBuf::from(s)
    })
}

fn metrics_writer(args: &TrainArgs) -> Result<BufWriter<File>> {
    let path = metrics_path(args);
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    File::create(&path)
        .map(BufWriter::new)
        .map_err(|e| Error::io(&path, e))
}
