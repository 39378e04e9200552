use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use acnp::bench::{bench, BenchModel};
use acnp::config::{parse_config, to_args};
use acnp::dataset::{split, synthetic_corpus, validation_split, NamedCloud, NodeSet};
use acnp::demo::demo_ce_paradox;
use acnp::ply::{parse_ply, parse_ply_data, write_ply, write_quantized};
use acnp::synth::{generate_cloud, SyntheticKind, SyntheticSpec};
use acnp::trainer::{
    acnp_numbers, cross_fit_numbers, evaluate_bits, evaluate_count_error, train_acnp, train_context_model, train_context_model_validated, EpochLog, TrainConfig,
    Validation,
};
use acnp_core::acnp::{Acnp, AcnpConfig};
use acnp_core::checkpoint::Checkpoint;
use acnp_core::cloud::{dequantize, quantize, QuantizedCloud};
use acnp_core::codec::{
    decode_cloud, encode_cloud_with_stats, CodecKind, CompressedCloud, EntropyModel, Models, UniformModel,
};
use acnp_core::context::{ContextConfig, DEFAULT_ANCESTORS, DEFAULT_WINDOW};
use acnp_core::context_model::{ContextModel, ContextModelConfig};
use anyhow::{anyhow, bail, Context as _};
use clap::{Args, CommandFactory, Parser, Subcommand};

const EXIT_USAGE: u8 = 1;
const EXIT_DATA: u8 = 2;
const EXIT_VERIFY: u8 = 3;

/// Learned octree geometry codec with child-count-aware context models.
#[derive(Parser, Debug)]
#[command(name = "acnp", version)]
struct Cli {
    /// `key = value` file supplying defaults for the subcommand's flags
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand, Debug)]
enum Cmd {
    /// Voxelize an ASCII PLY at the given bit depth
    Quantize {
        input: PathBuf,
        output: PathBuf,
        #[arg(long)]
        depth: u8,
    },
    /// Write a synthetic quantized cloud
    Gen {
        #[arg(long)]
        kind: SyntheticKind,
        #[arg(long)]
        points: usize,
        #[arg(long)]
        depth: u8,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Output PLY; standard output when absent
        #[arg(long, short)]
        out: Option<PathBuf>,
    },
    /// Train the child-count predictor
    TrainAcnp {
        #[command(flatten)]
        data: DataArgs,
        #[command(flatten)]
        train: TrainArgs,
        #[arg(long, default_value_t = 64)]
        attention_dim: usize,
        #[arg(long, default_value_t = 128)]
        hidden: usize,
        #[arg(long, default_value_t = 1.0)]
        sigma: f64,
    },
    /// Train a context model, enhanced when a child-count checkpoint is given
    TrainModel {
        #[command(flatten)]
        data: DataArgs,
        #[command(flatten)]
        train: TrainArgs,
        /// Frozen child-count predictor; selects the enhanced variant
        #[arg(long)]
        acnp: Option<PathBuf>,
        /// Describe training clouds with N fold predictors (retrained with the
        /// checkpoint's architecture and the default child-count schedule)
        /// instead of the frozen one
        #[arg(long, value_name = "N", requires = "acnp")]
        cross_fit: Option<usize>,
        /// Fraction of training clouds kept for early stopping (0 trains on all
        /// of them for every epoch)
        #[arg(long, default_value_t = 0.0, value_name = "FRAC")]
        validation: f64,
        #[arg(long, default_value_t = 128)]
        hidden: usize,
        #[arg(long, default_value_t = 128)]
        aggregation_hidden: usize,
        #[arg(long, default_value_t = 64)]
        attention_dim: usize,
    },
    /// Compress one cloud
    Encode {
        input: PathBuf,
        output: PathBuf,
        #[command(flatten)]
        models: ModelArgs,
        /// Bit depth for raw (non-quantized) input
        #[arg(long)]
        depth: Option<u8>,
    },
    /// Decompress one cloud
    Decode {
        input: PathBuf,
        output: PathBuf,
        #[command(flatten)]
        models: ModelArgs,
        /// Write real coordinates instead of voxel indices
        #[arg(long)]
        dequantize: bool,
    },
    /// Compare models on a corpus, verifying every round trip
    Bench {
        #[command(flatten)]
        data: DataArgs,
        /// `NAME=MODEL.ckpt`, `NAME=MODEL.ckpt+ACNP.ckpt` or `uniform`; the first is the reference
        #[arg(long = "model", required = true)]
        models: Vec<String>,
        /// Also write the report as CSV
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Show that cross-entropy ignores how wrong the implied child count is
    DemoCeParadox,
}

#[derive(Args, Debug)]
struct DataArgs {
    /// PLY files (quantized, or raw with --depth)
    inputs: Vec<PathBuf>,
    /// Generate the corpus instead: comma-separated kinds
    #[arg(long, value_delimiter = ',')]
    synthetic: Vec<SyntheticKind>,
    /// Synthetic clouds per kind
    #[arg(long, default_value_t = 8)]
    clouds: usize,
    /// Synthetic point budget per cloud
    #[arg(long, default_value_t = 3000)]
    points: usize,
    /// Bit depth (synthetic clouds, raw PLY input)
    #[arg(long)]
    depth: Option<u8>,
    #[arg(long, default_value_t = 0)]
    data_seed: u64,
    /// Fraction of clouds (by name hash) held out for evaluation
    #[arg(long, default_value_t = 0.0)]
    holdout: f64,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long, short)]
    out: PathBuf,
    #[arg(long, default_value_t = DEFAULT_ANCESTORS)]
    ancestors: u8,
    /// Sibling window length; 0 for ancestor-only contexts
    #[arg(long)]
    window: Option<u16>,
    /// Sibling-window variant with the default window length
    #[arg(long)]
    sibling: bool,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    decay: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

impl TrainArgs {
    fn context(&self) -> anyhow::Result<ContextConfig> {
        let w = self.window.unwrap_or(if self.sibling { DEFAULT_WINDOW } else { 0 });
        Ok(ContextConfig::new(self.ancestors, w)?)
    }

    fn config(&self, defaults: TrainConfig) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs.unwrap_or(defaults.epochs),
            lr: self.lr.unwrap_or(defaults.lr),
            decay: self.decay.unwrap_or(defaults.decay),
            batch_size: self.batch_size.unwrap_or(defaults.batch_size),
            seed: self.seed,
        }
    }
}

#[derive(Args, Debug)]
struct ModelArgs {
    /// Context-model checkpoint
    #[arg(long, required_unless_present = "uniform")]
    model: Option<PathBuf>,
    /// Child-count checkpoint (enhanced models)
    #[arg(long)]
    acnp: Option<PathBuf>,
    /// Code with equiprobable symbols instead of a trained model
    #[arg(long, conflicts_with_all = ["model", "acnp"])]
    uniform: bool,
}

#[derive(Debug)]
enum Failure {
    Usage(String),
    Data(anyhow::Error),
    Verify(String),
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        Self::Data(e)
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let argv: Vec<String> = std::env::args().collect();
    let result = parse_args(argv).and_then(run);
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprint!("{msg}");
            ExitCode::from(EXIT_USAGE)
        }
        Err(Failure::Data(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(EXIT_DATA)
        }
        Err(Failure::Verify(msg)) => {
            eprintln!("verification failed: {msg}");
            ExitCode::from(EXIT_VERIFY)
        }
    }
}

fn clap_failure(e: clap::Error) -> Failure {
    use clap::error::ErrorKind;
    match e.kind() {
        ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => {
            print!("{e}");
            std::process::exit(0);
        }
        _ => Failure::Usage(e.render().to_string()),
    }
}

/// Parses the command line, letting a `--config` file fill in flags that
/// were not given explicitly.
fn parse_args(argv: Vec<String>) -> Result<Cli, Failure> {
    let cli = Cli::try_parse_from(&argv).map_err(clap_failure)?;
    let Some(path) = cli.config.clone() else {
        return Ok(cli);
    };
    let text = fs::read_to_string(&path)
        .map_err(|e| Failure::Data(anyhow!("cannot read config {}: {e}", path.display())))?;
    let settings = parse_config(&path.display().to_string(), &text).map_err(|e| Failure::Usage(format!("{e}\n")))?;

    let root = Cli::command();
    let sub_name = argv
        .iter()
        .skip(1)
        .find(|a| root.find_subcommand(a.as_str()).is_some())
        .cloned()
        .ok_or_else(|| Failure::Usage("missing subcommand\n".into()))?;
    let sub = root.find_subcommand(&sub_name).expect("found above");
    let pos = argv.iter().position(|a| *a == sub_name).expect("present");
    let given = |key: &str| {
        argv[pos + 1..].iter().any(|a| a == &format!("--{key}") || a.starts_with(&format!("--{key}=")))
    };
    let mut kept = Vec::new();
    for s in settings {
        let Some(arg) = sub.get_arguments().find(|a| a.get_long() == Some(s.key.as_str())) else {
            return Err(Failure::Usage(format!(
                "{}:{}: '{}' is not a flag of '{sub_name}'\n",
                path.display(),
                s.line,
                s.key
            )));
        };
        if arg.get_id() != "config" && !given(&s.key) {
            kept.push(s);
        }
    }
    let switch = |key: &str| {
        sub.get_arguments().any(|a| a.get_long() == Some(key) && !a.get_action().takes_values())
    };
    let extra = to_args(&kept, switch).map_err(|e| Failure::Usage(format!("{}: {e}\n", path.display())))?;
    let mut merged = argv[..=pos].to_vec();
    merged.extend(extra);
    merged.extend_from_slice(&argv[pos + 1..]);
    Cli::try_parse_from(merged).map_err(clap_failure)
}

fn run(cli: Cli) -> Result<(), Failure> {
    match cli.cmd {
        Cmd::Quantize { input, output, depth } => {
            let raw = parse_ply(&read_text(&input)?).with_context(|| format!("{}", input.display()))?;
            let q = quantize(&raw, depth).context("quantize")?;
            write_text(&output, &write_quantized(&q))?;
            println!("{} points -> {} voxels at depth {depth}", raw.count(), q.len());
        }
        Cmd::Gen { kind, points, depth, seed, out } => {
            let q = generate_cloud(&SyntheticSpec { kind, points, depth, seed }).context("generate")?;
            let text = write_quantized(&q);
            match out {
                Some(p) => write_text(&p, &text)?,
                None => print!("{text}"),
            }
        }
        Cmd::TrainAcnp { data, train, attention_dim, hidden, sigma } => {
            let ctx = train.context()?;
            let cfg = train.config(TrainConfig::acnp_default());
            let (tr, ho) = corpus(&data)?;
            let tr_set = NodeSet::from_clouds(tr.iter().map(|c| &c.cloud), ctx).context("contexts")?;
            log::info!("training child-count model on {} clouds, {} nodes", tr.len(), tr_set.len());
            let model_cfg = AcnpConfig { attention_dim, mlp_hidden: hidden, sigma, ..AcnpConfig::new(ctx) };
            let (model, _) = train_acnp(&tr_set, model_cfg, &cfg, log_epoch("mse")).context("training")?;
            if !ho.is_empty() {
                let ho_set = NodeSet::from_clouds(ho.iter().map(|c| &c.cloud), ctx).context("contexts")?;
                let err = evaluate_count_error(&model, &ho_set).context("evaluation")?;
                println!("held-out mean |n_hat - n|: {err:.4} over {} nodes", ho_set.len());
            }
            write_bytes(&train.out, &model.to_checkpoint().to_bytes())?;
        }
        Cmd::TrainModel { data, train, acnp, cross_fit, validation, hidden, aggregation_hidden, attention_dim } => {
            let acnp = acnp.map(|p| load_acnp(&p)).transpose()?;
            let ctx = match &acnp {
                Some(a) if train.window.is_none() && !train.sibling && train.ancestors == DEFAULT_ANCESTORS => a.context(),
                _ => train.context()?,
            };
            let cfg = train.config(TrainConfig::context_model_default(ctx));
            if !(0.0..1.0).contains(&validation) {
                return Err(Failure::Usage("--validation must be in [0, 1)\n".into()));
            }
            let (tr, ho) = corpus(&data)?;
            let (tr, val) = if validation > 0.0 { validation_split(tr, validation) } else { (tr, Vec::new()) };
            if tr.is_empty() || (validation > 0.0 && val.is_empty()) {
                return Err(anyhow!("--validation {validation} leaves an empty fit or validation part").into());
            }
            let tr_set = NodeSet::from_clouds(tr.iter().map(|c| &c.cloud), ctx).context("contexts")?;
            let numbers = match (&acnp, cross_fit) {
                (Some(a), Some(folds)) => {
                    let clouds: Vec<&QuantizedCloud> = tr.iter().map(|c| &c.cloud).collect();
                    let fold_cfg = TrainConfig { seed: cfg.seed, ..TrainConfig::acnp_default() };
                    log::info!("cross-fitting child-count vectors with {folds} fold predictors");
                    Some(cross_fit_numbers(&clouds, *a.config(), &fold_cfg, folds).context("cross-fitting")?)
                }
                (Some(a), None) => Some(acnp_numbers(a, &tr_set).context("child-count vectors")?),
                (None, _) => None,
            };
            log::info!(
                "training {} context model on {} clouds, {} nodes",
                if acnp.is_some() { "enhanced" } else { "baseline" },
                tr.len(),
                tr_set.len()
            );
            let model_cfg = ContextModelConfig {
                extraction_hidden: hidden,
                aggregation_hidden,
                attention_dim,
                ..ContextModelConfig::new(ctx, acnp.is_some())
            };
            let (model, _) = if val.is_empty() {
                train_context_model(&tr_set, numbers.as_deref(), model_cfg, &cfg, log_epoch("bits/node"))
            } else {
                let val_set = NodeSet::from_clouds(val.iter().map(|c| &c.cloud), ctx).context("contexts")?;
                let val_numbers = acnp.as_ref().map(|a| acnp_numbers(a, &val_set)).transpose().context("child-count vectors")?;
                log::info!("early stopping on {} validation clouds, {} nodes", val.len(), val_set.len());
                let v = Validation { set: &val_set, numbers: val_numbers.as_deref() };
                train_context_model_validated(&tr_set, numbers.as_deref(), v, model_cfg, &cfg, log_epoch("bits/node"))
            }
            .context("training")?;
            if !ho.is_empty() {
                let ho_set = NodeSet::from_clouds(ho.iter().map(|c| &c.cloud), ctx).context("contexts")?;
                let nums = acnp.as_ref().map(|a| acnp_numbers(a, &ho_set)).transpose().context("child-count vectors")?;
                let bits = evaluate_bits(&model, &ho_set, nums.as_deref()).context("evaluation")?;
                println!("held-out cross-entropy: {bits:.4} bits/node over {} nodes", ho_set.len());
            }
            write_bytes(&train.out, &model.to_checkpoint().to_bytes())?;
        }
        Cmd::Encode { input, output, models, depth } => {
            let cloud = read_cloud(&input, depth)?;
            let model = load_models(&models)?;
            let (cc, s) = encode_cloud_with_stats(&cloud, model.as_ref()).context("encode")?;
            write_bytes(&output, &cc.to_bytes())?;
            println!(
                "{} points, {} nodes, {} payload bits, {:.4} bpip ({:.4} with header), model {:.4} bits/node",
                s.points,
                s.nodes,
                s.payload_bits,
                s.bpip(),
                s.bpip_with_header(),
                s.model_bits_per_node()
            );
        }
        Cmd::Decode { input, output, models, dequantize: deq } => {
            let bytes = fs::read(&input).with_context(|| format!("cannot read {}", input.display()))?;
            let cc = CompressedCloud::from_bytes(&bytes).with_context(|| format!("{}", input.display()))?;
            let model = load_models(&models)?;
            if cc.header.kind != model.kind() {
                return Err(anyhow!(
                    "stream was coded with a {} model, but a {} model was given",
                    cc.header.kind.name(),
                    model.kind().name()
                )
                .into());
            }
            let cloud = decode_cloud(&cc, model.as_ref()).context("decode")?;
            let text = if deq { write_ply(&dequantize(&cloud)) } else { write_quantized(&cloud) };
            write_text(&output, &text)?;
            println!("{} points at depth {}", cloud.len(), cloud.depth());
        }
        Cmd::Bench { data, models, csv } => {
            let (clouds, _) = corpus(&DataArgs { holdout: 0.0, ..data })?;
            let models = models.iter().map(|m| parse_bench_model(m)).collect::<anyhow::Result<Vec<_>>>()?;
            let report = match bench(&clouds, &models) {
                Ok(r) => r,
                Err(e) if e.is_verification() => return Err(Failure::Verify(e.to_string())),
                Err(e) => return Err(anyhow!(e).into()),
            };
            print!("{}", report.table());
            if let Some(p) = csv {
                write_text(&p, &report.csv())?;
            }
        }
        Cmd::DemoCeParadox => println!("{}", demo_ce_paradox()),
    }
    Ok(())
}

fn log_epoch(what: &'static str) -> impl FnMut(&EpochLog) {
    move |l| match l.validation {
        Some(v) => log::info!("epoch {:>3}  lr {:.3e}  {what} {:.5}  validation {v:.5}", l.epoch, l.lr, l.loss),
        None => log::info!("epoch {:>3}  lr {:.3e}  {what} {:.5}", l.epoch, l.lr, l.loss),
    }
}

fn read_text(p: &Path) -> anyhow::Result<String> {
    fs::read_to_string(p).with_context(|| format!("cannot read {}", p.display()))
}

fn write_text(p: &Path, text: &str) -> anyhow::Result<()> {
    write_bytes(p, text.as_bytes())
}

fn write_bytes(p: &Path, bytes: &[u8]) -> anyhow::Result<()> {
    fs::write(p, bytes).with_context(|| format!("cannot write {}", p.display()))
}

fn read_cloud(p: &Path, depth: Option<u8>) -> anyhow::Result<QuantizedCloud> {
    let data = parse_ply_data(&read_text(p)?).with_context(|| format!("{}", p.display()))?;
    if let Some(q) = data.quantized() {
        let q = q.with_context(|| format!("{}", p.display()))?;
        if depth.is_some_and(|d| d != q.depth()) {
            bail!("{} is quantized at depth {}, not {}", p.display(), q.depth(), depth.unwrap_or(0));
        }
        return Ok(q);
    }
    let Some(depth) = depth else {
        bail!("{} holds raw coordinates; pass --depth to quantize it", p.display());
    };
    let raw = acnp_core::cloud::RawCloud::new(data.points)?;
    quantize(&raw, depth).with_context(|| format!("{}", p.display()))
}

fn corpus(d: &DataArgs) -> anyhow::Result<(Vec<NamedCloud>, Vec<NamedCloud>)> {
    let mut clouds = Vec::new();
    for p in &d.inputs {
        clouds.push(NamedCloud { name: p.display().to_string(), cloud: read_cloud(p, d.depth)? });
    }
    if !d.synthetic.is_empty() {
        let depth = d.depth.ok_or_else(|| anyhow!("--synthetic needs --depth"))?;
        clouds.extend(synthetic_corpus(&d.synthetic, d.clouds, d.points, depth, d.data_seed)?);
    }
    if clouds.is_empty() {
        bail!("no input clouds: give PLY files or --synthetic kinds");
    }
    if !(0.0..1.0).contains(&d.holdout) {
        bail!("--holdout must be in [0, 1)");
    }
    let (train, hold) = split(clouds, d.holdout);
    if train.is_empty() {
        bail!("every cloud fell into the held-out split");
    }
    Ok((train, hold))
}

fn load_checkpoint(p: &Path) -> anyhow::Result<Checkpoint> {
    let bytes = fs::read(p).with_context(|| format!("cannot read {}", p.display()))?;
    Checkpoint::from_bytes(&bytes).with_context(|| format!("{}", p.display()))
}

fn load_acnp(p: &Path) -> anyhow::Result<Acnp> {
    Acnp::from_checkpoint(&load_checkpoint(p)?).with_context(|| format!("{}", p.display()))
}

fn load_pair(model: &Path, acnp: Option<&Path>) -> anyhow::Result<Models> {
    let cm = ContextModel::from_checkpoint(&load_checkpoint(model)?).with_context(|| format!("{}", model.display()))?;
    Ok(match acnp {
        Some(a) => Models::enhanced(cm, load_acnp(a)?)?,
        None => Models::baseline(cm)?,
    })
}

fn load_models(m: &ModelArgs) -> anyhow::Result<Box<dyn EntropyModel>> {
    if m.uniform {
        return Ok(Box::new(UniformModel { context: ContextConfig::default() }));
    }
    let model = m.model.as_deref().ok_or_else(|| anyhow!("--model is required"))?;
    Ok(Box::new(load_pair(model, m.acnp.as_deref())?))
}

fn parse_bench_model(spec: &str) -> anyhow::Result<BenchModel> {
    if spec == "uniform" {
        return Ok(BenchModel { name: spec.into(), model: Box::new(UniformModel { context: ContextConfig::default() }) });
    }
    let (name, files) = spec.split_once('=').ok_or_else(|| anyhow!("model '{spec}' is not NAME=FILE[+ACNP]"))?;
    let (model, acnp) = match files.split_once('+') {
        Some((m, a)) => (m, Some(Path::new(a))),
        None => (files, None),
    };
    let models = load_pair(Path::new(model), acnp)?;
    debug_assert!(matches!(models.kind(), CodecKind::Baseline | CodecKind::Acnp));
    Ok(BenchModel { name: name.into(), model: Box::new(models) })
}
