use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use setfuse_core::config::RunConfig;
use setfuse_core::coreset::{fps_oracle, select_core_template, GumbelConfig};
use setfuse_core::evalbench::{complexity_scan, pipeline_gradcheck, scan_csv, score_protocol, tar_csv, GradcheckSpec, TarRow, FAR_GRID};
use setfuse_core::io::{load_dataset, load_protocol, save_dataset, verification_set, write_atomic, write_json, Checkpoint, ProtocolFile};
use setfuse_core::numgrad::Tensor;
use setfuse_core::simdata::{gen_dataset, gen_verification_protocol};
use setfuse_core::train::{class_mean_prototypes, log_csv, TrainState, Trainer};
use setfuse_core::{AblationFlags, Error, Model, ModelConfig};

const GRADCHECK_TOLERANCE: f64 = 1e-5;

#[derive(Parser)]
#[command(name = "setfuse", version, about = "Quality-aware coreset fusion of face-embedding templates")]
struct Cli {
    /// Worker threads for template-level parallelism.
    #[arg(long, global = true, default_value_t = 1)]
    threads: usize,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic training set and verification protocol.
    Gen(GenArgs),
    /// Train a model and write a checkpoint.
    Train(TrainArgs),
    /// Show the core-template selection of one template.
    Select(SelectArgs),
    /// Score a verification protocol and report TAR at fixed FARs.
    Eval(EvalArgs),
    /// Count operations of the fuse path and the attention baseline.
    Bench(BenchArgs),
    /// Compare full-pipeline gradients with central differences.
    Gradcheck(GradcheckArgs),
}

#[derive(Args)]
struct GenArgs {
    /// Run config (JSON); defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out_dir: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Seed of the verification protocol; defaults to seed + 1000.
    #[arg(long)]
    protocol_seed: Option<u64>,
}

#[derive(Args)]
struct TrainArgs {
    /// Training manifest, or the directory holding `manifest.json`.
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out_checkpoint: PathBuf,
    /// Training log CSV (`step,loss,gamma`).
    #[arg(long)]
    log: Option<PathBuf>,
    /// Continue from this checkpoint.
    #[arg(long)]
    resume: Option<PathBuf>,
}

#[derive(Args)]
struct SelectArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    template_id: u64,
    /// Core-template size; defaults to the checkpoint's.
    #[arg(long)]
    k: Option<usize>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    data: PathBuf,
    /// Trained model; the average-pool baseline is scored when omitted.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    protocol: PathBuf,
    /// Comma-separated false-accept rates.
    #[arg(long, value_delimiter = ',')]
    fars: Option<Vec<f64>>,
}

#[derive(Args)]
struct BenchArgs {
    /// Comma-separated ascending template sizes.
    #[arg(long, value_delimiter = ',', default_value = "64,128,256,512,1024")]
    sizes: Vec<usize>,
    #[arg(long, default_value_t = 3)]
    trials: usize,
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args)]
struct GradcheckArgs {
    /// Run config (JSON); its `k` and `seed` shape the instance.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value_t = 8)]
    n: usize,
    #[arg(long, default_value_t = 16)]
    channels: usize,
    #[arg(long, default_value_t = 3)]
    identities: usize,
}

enum CliError {
    Usage(String),
    Core(Error),
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        CliError::Core(e)
    }
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Core(e) if e.is_data_error() => 2,
            CliError::Core(_) => 1,
        }
    }

    fn message(&self) -> String {
        match self {
            CliError::Usage(m) => m.clone(),
            CliError::Core(e) => e.to_string(),
        }
    }
}

type CliResult<T> = std::result::Result<T, CliError>;

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion | ErrorKind::DisplayHelpOnMissingArgumentOrSubcommand) => {
            let _ = e.print();
            return if e.kind() == ErrorKind::DisplayHelpOnMissingArgumentOrSubcommand { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
        Err(e) => {
            let text = e.to_string();
            let line = text.lines().next().unwrap_or("invalid arguments");
            eprintln!("setfuse: {}", line.trim_start_matches("error: "));
            return ExitCode::from(1);
        }
    };
    match run(cli) {
        Ok(out) => {
            print!("{out}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("setfuse: {}", e.message().replace('\n', " "));
            ExitCode::from(e.exit_code())
        }
    }
}

fn run(cli: Cli) -> CliResult<String> {
    if cli.threads == 0 {
        return Err(CliError::Usage("--threads must be >= 1".into()));
    }
    rayon::ThreadPoolBuilder::new()
        .num_threads(cli.threads)
        .build_global()
        .map_err(|e| CliError::Usage(format!("thread pool: {e}")))?;
    match cli.command {
        Command::Gen(a) => cmd_gen(a),
        Command::Train(a) => cmd_train(a),
        Command::Select(a) => cmd_select(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Bench(a) => cmd_bench(a),
        Command::Gradcheck(a) => cmd_gradcheck(a),
    }
}

fn load_config(path: Option<&Path>) -> CliResult<RunConfig> {
    match path {
        None => Ok(RunConfig::default()),
        Some(p) => RunConfig::load(p).map_err(|e| match e {
            Error::Io(io) => CliError::Usage(format!("config {}: {io}", p.display())),
            other => CliError::Usage(other.to_string()),
        }),
    }
}

fn manifest_path(data: &Path) -> PathBuf {
    if data.is_dir() {
        data.join("manifest.json")
    } else {
        data.to_path_buf()
    }
}

fn create_dir(dir: &Path) -> CliResult<()> {
    std::fs::create_dir_all(dir).map_err(|e| CliError::Core(Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", dir.display())))))
}

fn cmd_gen(a: GenArgs) -> CliResult<String> {
    let cfg = load_config(a.config.as_deref())?;
    let gen = cfg.generator_config();
    let train = gen_dataset(&gen, cfg.train_ids, cfg.templates_per_id, a.seed)?;
    let protocol_seed = a.protocol_seed.unwrap_or(a.seed.wrapping_add(1000));
    let eval = gen_verification_protocol(&gen, &cfg.protocol_spec(), protocol_seed)?;

    let train_dir = a.out_dir.join("train");
    let eval_dir = a.out_dir.join("eval");
    create_dir(&train_dir)?;
    create_dir(&eval_dir)?;
    let train_manifest = save_dataset(&train, &train_dir)?;
    let eval_manifest = save_dataset(&eval.dataset, &eval_dir)?;
    let protocol_path = eval_dir.join("protocol.json");
    write_json(&protocol_path, &ProtocolFile { pairs: eval.pairs.clone() })?;

    let genuine = eval.pairs.iter().filter(|p| p.genuine).count();
    let mut out = String::new();
    let _ = writeln!(out, "train {} ({} templates, {} items)", train_manifest.display(), train.templates.len(), train.item_count());
    let _ = writeln!(out, "eval {} ({} templates, {} items)", eval_manifest.display(), eval.dataset.templates.len(), eval.dataset.item_count());
    let _ = writeln!(out, "protocol {} ({} genuine, {} impostor pairs)", protocol_path.display(), genuine, eval.pairs.len() - genuine);
    Ok(out)
}

fn cmd_train(a: TrainArgs) -> CliResult<String> {
    let cfg = load_config(a.config.as_deref())?;
    let data = load_dataset(&manifest_path(&a.data))?;
    let mut state = match &a.resume {
        Some(path) => Checkpoint::load(path)?.state,
        None => {
            let protos = class_mean_prototypes(&data, data.identities())?;
            TrainState::new(cfg.init_model(protos)?)
        }
    };
    let trainer = Trainer::new(cfg.train_config(), &data)?;
    let start = state.step;
    let gamma0 = state.model.params.gamma;
    let log = trainer.run(&mut state, |_| {})?;
    Checkpoint::new(state.clone()).save(&a.out_checkpoint)?;
    if let Some(path) = &a.log {
        write_atomic(path, log_csv(&log).as_bytes())?;
    }
    let last = log.last().map_or(f64::NAN, |r| r.loss);
    Ok(format!(
        "steps {}..{} loss {last} gamma {gamma0} -> {} checkpoint {}\n",
        start,
        state.step,
        state.model.params.gamma,
        a.out_checkpoint.display()
    ))
}

#[derive(Serialize)]
struct SelectReport {
    template_id: u64,
    k: usize,
    gamma: f64,
    indices: Vec<usize>,
    /// Distance of each newly selected item to the set before it.
    distances: Vec<f64>,
    /// Logits of every step: norms first, then running min-distances.
    distances_before: Vec<Vec<f64>>,
    oracle_indices: Vec<usize>,
    matches_oracle: bool,
}

fn cmd_select(a: SelectArgs) -> CliResult<String> {
    let data = load_dataset(&manifest_path(&a.data))?;
    let model = Checkpoint::load(&a.checkpoint)?.state.model;
    let k = a.k.unwrap_or(model.config.k);
    let template = data.template(a.template_id)?;
    let features = template.features();
    let gamma = model.gamma();
    let gumbel = GumbelConfig { temperature: model.config.infer_temperature, ..GumbelConfig::inference() };
    let core = select_core_template(&features, k, gamma, &gumbel, template.id)?;
    let oracle = fps_oracle(&features, k, gamma)?;
    let report = SelectReport {
        template_id: template.id,
        k,
        gamma: gamma.value(),
        matches_oracle: core.trace.indices == oracle,
        distances: core.trace.selected_distances(),
        indices: core.trace.indices,
        distances_before: core.trace.distances_before,
        oracle_indices: oracle,
    };
    Ok(setfuse_core::io::to_json(&report)?)
}

fn average_pool_model(channels: usize) -> CliResult<Model> {
    let mut config = ModelConfig::new(channels, 1)?;
    config.flags = AblationFlags::AVERAGE_POOL;
    let mut proto = vec![0.0; channels];
    proto[0] = 1.0;
    Ok(Model::init(config, Tensor::matrix(1, channels, proto)?, 0)?)
}

fn cmd_eval(a: EvalArgs) -> CliResult<String> {
    let fars = a.fars.unwrap_or_else(|| FAR_GRID.to_vec());
    if fars.is_empty() || fars.iter().any(|f| !(*f > 0.0 && *f <= 1.0)) {
        return Err(CliError::Usage("--fars must lie in (0, 1]".into()));
    }
    let data = load_dataset(&manifest_path(&a.data))?;
    let set = verification_set(data, load_protocol(&a.protocol)?)?;
    let model = match &a.checkpoint {
        Some(path) => Checkpoint::load(path)?.state.model,
        None => average_pool_model(set.dataset.channels)?,
    };
    let roc = score_protocol(&model, &set)?;
    let method = model.config.flags.label();
    let rows = fars
        .iter()
        .map(|&far| {
            let p = roc.tar_at_far(far)?;
            Ok(TarRow { method: method.to_string(), seed: 0, far, tar: p.tar, under_resolved: p.under_resolved })
        })
        .collect::<setfuse_core::Result<Vec<_>>>()?;
    Ok(tar_csv(&rows))
}

fn cmd_bench(a: BenchArgs) -> CliResult<String> {
    let cfg = load_config(a.config.as_deref())?;
    if a.sizes.is_empty() || a.sizes.windows(2).any(|w| w[0] >= w[1]) || a.sizes[0] == 0 || a.trials == 0 {
        return Err(CliError::Usage("--sizes must be ascending and positive, --trials >= 1".into()));
    }
    let mut proto = vec![0.0; cfg.n_c];
    proto[0] = 1.0;
    let model = cfg.init_model(Tensor::matrix(1, cfg.n_c, proto)?)?;
    let rows = complexity_scan(&model, &a.sizes, a.trials, cfg.seed)?;
    Ok(scan_csv(&rows))
}

fn cmd_gradcheck(a: GradcheckArgs) -> CliResult<String> {
    let cfg = load_config(a.config.as_deref())?;
    if a.n == 0 || a.channels == 0 || a.identities == 0 || cfg.k > a.n {
        return Err(CliError::Usage("gradcheck needs n >= k >= 1, channels >= 1, identities >= 1".into()));
    }
    let spec = GradcheckSpec { n: a.n, k: cfg.k, channels: a.channels, identities: a.identities, seed: cfg.seed };
    let report = pipeline_gradcheck(&spec)?;
    let mut out = String::from("param,entries,rel_err,max_entry_rel_err,max_abs_err\n");
    for p in &report.params {
        let _ = writeln!(out, "{},{},{:e},{:e},{:e}", p.name, p.entries, p.rel_err, p.max_entry_rel_err, p.max_abs_err);
    }
    let worst = report.max_rel_err();
    let verdict = if worst < GRADCHECK_TOLERANCE { "pass" } else { "fail" };
    let _ = writeln!(out, "max_rel_err,{worst:e},{verdict}");
    Ok(out)
}
