use std::fs;
use std::io::ErrorKind;
use std::path::{Path, PathBuf};

use clap::{ArgGroup, Args, Parser, Subcommand, ValueEnum};
use log::info;

use bnnkh_core::attack::{recover, AttackConfig, KeyMode, Method, MAX_BLOCK_SIZE};
use bnnkh_core::bnn::{correct_count, load_model, save_model, BnnModel};
use bnnkh_core::data::{
    attacker_subset, class_balanced_subset, fetch_dataset, held_out, load_split,
    resolve_data_dir, SubsetSelection,
};
use bnnkh_core::metrics::{emit_report, key_bit_match, run_experiment, ExperimentConfig, ReportFormat};
use bnnkh_core::train::{reverse_engineer_baseline, train_with_report, TrainConfig};
use bnnkh_core::transform::{encrypt_model, generate_key};
use bnnkh_core::{Error, KeySet, LabeledDataset, PufKey, SplitTag};

/// Key length of the standard 512-wide hidden layers.
const DEFAULT_KEY_LENGTH: usize = 256;

pub enum CliError {
    Usage(String),
    Runtime(Error),
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        match e {
            Error::InvalidArgument(msg) => CliError::Usage(msg),
            other => CliError::Runtime(other),
        }
    }
}

type CliResult<T = ()> = Result<T, CliError>;

#[derive(Parser, Debug)]
#[command(name = "bnnkh", version, about = "Binarized MLP key-recovery lab")]
pub struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Download and verify MNIST into the data directory.
    Fetch(FetchArgs),
    /// Train the reference binarized MLP on the MNIST train split.
    Train(TrainArgs),
    /// Print a random key.
    Keygen(KeygenArgs),
    /// Apply a keyed column swap to every hidden layer (also decrypts).
    Encrypt(EncryptArgs),
    /// Recover the key of an encrypted model from labeled samples.
    Attack(AttackArgs),
    /// Print a model's accuracy on a split.
    Eval(EvalArgs),
    /// Train a model from scratch on the attacker's samples only.
    Baseline(BaselineArgs),
    /// Encrypt and attack many key variants of one model.
    Experiment(ExperimentArgs),
    /// Print the fraction of matching bits between two keys.
    CompareKeys(CompareArgs),
}

#[derive(Args, Debug)]
struct DataArgs {
    /// MNIST directory [default: ~/.cache/bnnkh/mnist]
    #[arg(long, env = "BNNKH_DATA_DIR")]
    data_dir: Option<PathBuf>,
}

impl DataArgs {
    fn dir(&self) -> PathBuf {
        resolve_data_dir(self.data_dir.as_deref())
    }

    /// Loads a split, fetching the files first if they are missing.
    fn load(&self, split: SplitTag) -> CliResult<LabeledDataset> {
        let dir = self.dir();
        match load_split(&dir, split) {
            Err(Error::Io { source, .. }) if source.kind() == ErrorKind::NotFound => {
                info!("MNIST not found in {}, fetching", dir.display());
                fetch_dataset(None, &dir)?;
                Ok(load_split(&dir, split)?)
            }
            other => Ok(other?),
        }
    }
}

#[derive(Args, Debug)]
struct ThreadArgs {
    /// Worker threads, 0 for all cores
    #[arg(long, env = "BNNKH_THREADS", default_value_t = 0)]
    threads: usize,
}

#[derive(Copy, Clone, Debug, ValueEnum)]
enum Split {
    Train,
    Test,
}

impl From<Split> for SplitTag {
    fn from(s: Split) -> Self {
        match s {
            Split::Train => SplitTag::Train,
            Split::Test => SplitTag::Test,
        }
    }
}

#[derive(Copy, Clone, Debug, ValueEnum)]
enum MethodArg {
    SingleBit,
    Block,
}

#[derive(Copy, Clone, Debug, ValueEnum)]
enum ModeArg {
    PerLayer,
    Shared,
}

impl From<ModeArg> for KeyMode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::PerLayer => KeyMode::PerLayer,
            ModeArg::Shared => KeyMode::Shared,
        }
    }
}

fn parse_block_size(s: &str) -> Result<usize, String> {
    let g: usize = s.parse().map_err(|e| format!("{e}"))?;
    if g == 0 || DEFAULT_KEY_LENGTH % g != 0 {
        return Err(format!(
            "block size must divide key length ({DEFAULT_KEY_LENGTH} for 512-wide layers), got {g}"
        ));
    }
    if g > MAX_BLOCK_SIZE {
        return Err(format!("block sizes above {MAX_BLOCK_SIZE} are not supported"));
    }
    Ok(g)
}

fn positive(s: &str) -> Result<usize, String> {
    match s.parse::<usize>() {
        Ok(0) => Err("must be at least 1".into()),
        Ok(n) => Ok(n),
        Err(e) => Err(e.to_string()),
    }
}

#[derive(Args, Debug)]
struct FetchArgs {
    #[command(flatten)]
    data: DataArgs,
    /// Base URL holding the four .gz files
    #[arg(long, env = "BNNKH_MNIST_MIRROR")]
    mirror: Option<String>,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[command(flatten)]
    data: DataArgs,
    #[arg(long, default_value_t = 10)]
    epochs: usize,
    #[arg(long, default_value_t = 128, value_parser = positive)]
    batch: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 1e-3)]
    lr: f32,
    /// Output model file
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct KeygenArgs {
    #[arg(long, default_value_t = DEFAULT_KEY_LENGTH, value_parser = positive)]
    length: usize,
    #[arg(long)]
    seed: u64,
    /// Write the key here instead of stdout
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
#[command(group(ArgGroup::new("key_source").required(true).args(["key_seed", "keys"])))]
struct EncryptArgs {
    #[arg(long)]
    model: PathBuf,
    /// Generate fresh keys from this seed
    #[arg(long)]
    key_seed: Option<u64>,
    /// Use the same generated key for every hidden layer
    #[arg(long, requires = "key_seed")]
    shared_key: bool,
    /// Apply keys from a file (one line per layer, or one line for all)
    #[arg(long)]
    keys: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    /// Where to write generated keys
    #[arg(long)]
    keys_out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct SubsetArgs {
    /// Labeled test samples available to the attacker
    #[arg(long, default_value_t = 5000, value_parser = positive)]
    samples: usize,
    /// Draw the same number of samples from each class
    #[arg(long)]
    balanced: bool,
}

impl SubsetArgs {
    fn select(&self, test: &LabeledDataset, seed: u64) -> CliResult<LabeledDataset> {
        Ok(if self.balanced {
            class_balanced_subset(test, self.samples, seed)?
        } else {
            attacker_subset(test, self.samples, seed)?
        })
    }
}

#[derive(Args, Debug)]
struct AttackSettings {
    #[arg(long, value_enum, default_value_t = MethodArg::Block)]
    method: MethodArg,
    /// Key bits searched jointly (1, 2, 4, 8 or 16)
    #[arg(long, default_value_t = 4, value_parser = parse_block_size)]
    block_size: usize,
    #[arg(long, default_value_t = 1, value_parser = positive)]
    passes: usize,
    #[arg(long, value_enum, default_value_t = ModeArg::PerLayer)]
    mode: ModeArg,
    /// Hidden layers in recovery order, e.g. 2,1,0 [default: 0,1,2]
    #[arg(long, value_delimiter = ',')]
    layer_order: Vec<usize>,
    #[command(flatten)]
    threads: ThreadArgs,
}

impl AttackSettings {
    fn config(&self, eval_samples: usize, seed: u64) -> AttackConfig {
        let method = match self.method {
            MethodArg::SingleBit => Method::SingleBit,
            MethodArg::Block => Method::Block,
        };
        AttackConfig {
            method,
            block_size: if method == Method::SingleBit { 1 } else { self.block_size },
            passes: self.passes,
            eval_samples,
            layer_order: self.layer_order.clone(),
            key_mode: self.mode.into(),
            threads: self.threads.threads,
            seed,
        }
    }
}

#[derive(Args, Debug)]
struct AttackArgs {
    /// Encrypted model
    #[arg(long)]
    model: PathBuf,
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    subset: SubsetArgs,
    #[command(flatten)]
    settings: AttackSettings,
    /// Seed selecting the attacker's samples
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// True keys, enabling bit-match scoring
    #[arg(long)]
    true_keys: Option<PathBuf>,
    /// JSON report path [default: stdout]
    #[arg(long)]
    report: Option<PathBuf>,
    #[arg(long)]
    keys_out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    model: PathBuf,
    #[command(flatten)]
    data: DataArgs,
    #[arg(long, value_enum, default_value_t = Split::Test)]
    split: Split,
    /// Decrypt with these keys before evaluating
    #[arg(long)]
    keys: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct BaselineArgs {
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    subset: SubsetArgs,
    /// Seed for sample selection and training
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[arg(long, default_value_t = 10)]
    epochs: usize,
    #[arg(long, default_value_t = 128, value_parser = positive)]
    batch: usize,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct ExperimentArgs {
    /// Unencrypted base model
    #[arg(long)]
    model: PathBuf,
    #[command(flatten)]
    data: DataArgs,
    #[arg(long, default_value_t = 10, value_parser = positive)]
    variants: usize,
    #[command(flatten)]
    subset: SubsetArgs,
    #[command(flatten)]
    settings: AttackSettings,
    /// Base seed for the variant keys
    #[arg(long, default_value_t = 0)]
    seed_base: u64,
    /// Seed selecting the attacker's samples
    #[arg(long, default_value_t = 1)]
    subset_seed: u64,
    /// Draw an independent key per hidden layer instead of one shared key
    #[arg(long)]
    per_layer_keys: bool,
    /// Skip scoring each variant on the full test split
    #[arg(long)]
    no_test_eval: bool,
    /// JSON summary, rewritten after every variant
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    csv: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct CompareArgs {
    /// True key, as text or a key file
    #[arg(long = "true")]
    truth: String,
    /// Recovered key, as text or a key file
    #[arg(long)]
    recovered: String,
}

pub fn run(cli: Cli) -> CliResult {
    match cli.command {
        Command::Fetch(a) => fetch(a),
        Command::Train(a) => train(a),
        Command::Keygen(a) => keygen(a),
        Command::Encrypt(a) => encrypt(a),
        Command::Attack(a) => attack(a),
        Command::Eval(a) => eval(a),
        Command::Baseline(a) => baseline(a),
        Command::Experiment(a) => experiment(a),
        Command::CompareKeys(a) => compare_keys(a),
    }
}

fn require_file(path: &Path) -> CliResult {
    if path.is_file() {
        Ok(())
    } else {
        Err(CliError::Usage(format!("no such file: {}", path.display())))
    }
}

fn write_text(path: &Path, text: &str) -> CliResult {
    fs::write(path, text).map_err(|e| CliError::Runtime(Error::io(path, e)))
}

fn read_keys(path: &Path) -> CliResult<KeySet> {
    require_file(path)?;
    let text = fs::read_to_string(path).map_err(|e| CliError::Runtime(Error::io(path, e)))?;
    KeySet::from_text(&text).map_err(CliError::Runtime)
}

/// Broadcasts a single key to every hidden layer.
fn fit_keys(keys: KeySet, model: &BnnModel) -> KeySet {
    let hidden = model.hidden_count();
    if keys.len() == 1 && hidden > 1 {
        KeySet::shared(keys.keys()[0].clone(), hidden)
    } else {
        keys
    }
}

fn print_json(value: &serde_json::Value) -> CliResult {
    println!("{}", serde_json::to_string_pretty(value).map_err(|e| CliError::Runtime(e.into()))?);
    Ok(())
}

fn fetch(a: FetchArgs) -> CliResult {
    let dir = a.data.dir();
    fetch_dataset(a.mirror.as_deref(), &dir)?;
    println!("{}", dir.display());
    Ok(())
}

fn train(a: TrainArgs) -> CliResult {
    let cfg = TrainConfig {
        epochs: a.epochs,
        batch_size: a.batch,
        seed: a.seed,
        learning_rate: a.lr,
        ..TrainConfig::default()
    };
    cfg.validate()?;
    let train = a.data.load(SplitTag::Train)?;
    let test = a.data.load(SplitTag::Test)?;
    let (model, report) = train_with_report(&train, &cfg)?;
    save_model(&model, &a.out)?;
    let correct = correct_count(&model, &test)?;
    print_json(&serde_json::json!({
        "model": a.out,
        "epochs": a.epochs,
        "epoch_losses": report.epoch_losses,
        "test_accuracy": correct as f64 / test.len() as f64,
    }))
}

fn keygen(a: KeygenArgs) -> CliResult {
    let key = generate_key(a.length, a.seed)?;
    match a.out {
        Some(path) => write_text(&path, &format!("{key}\n")),
        None => {
            println!("{key}");
            Ok(())
        }
    }
}

fn encrypt(a: EncryptArgs) -> CliResult {
    require_file(&a.model)?;
    let model = load_model(&a.model)?;
    let keys = match (a.key_seed, &a.keys) {
        (Some(seed), _) => KeySet::generate_for(&model, seed, a.shared_key)?,
        (None, Some(path)) => fit_keys(read_keys(path)?, &model),
        (None, None) => unreachable!("clap requires one key source"),
    };
    let out = encrypt_model(&model, &keys)?;
    save_model(&out, &a.out)?;
    if let Some(path) = &a.keys_out {
        write_text(path, &keys.to_text())?;
    }
    info!("wrote {}", a.out.display());
    Ok(())
}

fn attack(a: AttackArgs) -> CliResult {
    require_file(&a.model)?;
    let model = load_model(&a.model)?;
    let cfg = a.settings.config(a.subset.samples, a.seed);
    cfg.validate(&model)?;
    let truth = match &a.true_keys {
        Some(p) => Some(fit_keys(read_keys(p)?, &model)),
        None => None,
    };
    let test = a.data.load(SplitTag::Test)?;
    let data = a.subset.select(&test, a.seed)?;
    let report = recover(&model, &data, &cfg, truth.as_ref())?;
    info!(
        "encrypted {:.4} -> recovered {:.4} in {:.1}s",
        report.accuracy.encrypted, report.accuracy.recovered, report.wall_clock_s
    );
    if let Some(path) = &a.keys_out {
        write_text(path, &report.recovered_keys()?.to_text())?;
    }
    let json = serde_json::to_string_pretty(&report).map_err(|e| CliError::Runtime(e.into()))?;
    match &a.report {
        Some(path) => write_text(path, &(json + "\n")),
        None => {
            println!("{json}");
            Ok(())
        }
    }
}

fn eval(a: EvalArgs) -> CliResult {
    require_file(&a.model)?;
    let mut model = load_model(&a.model)?;
    if let Some(path) = &a.keys {
        model = encrypt_model(&model, &fit_keys(read_keys(path)?, &model))?;
    }
    let data = a.data.load(a.split.into())?;
    let correct = correct_count(&model, &data)?;
    println!("{}", correct as f64 / data.len() as f64);
    Ok(())
}

fn baseline(a: BaselineArgs) -> CliResult {
    let cfg = TrainConfig {
        epochs: a.epochs,
        batch_size: a.batch,
        seed: a.seed,
        ..TrainConfig::default()
    };
    cfg.validate()?;
    let test = a.data.load(SplitTag::Test)?;
    let selection = if a.subset.balanced {
        SubsetSelection::class_balanced(&test, a.subset.samples, a.seed)?
    } else {
        SubsetSelection::shuffled(&test, a.subset.samples, a.seed)?
    };
    let attacker = selection.apply(&test)?;
    let rest = held_out(&test, &selection)?;
    let result = reverse_engineer_baseline(&attacker, &rest, &cfg)?;
    if let Some(path) = &a.out {
        save_model(&result.model, path)?;
    }
    println!("{}", result.held_out_accuracy);
    Ok(())
}

fn experiment(a: ExperimentArgs) -> CliResult {
    require_file(&a.model)?;
    let model = load_model(&a.model)?;
    let mut cfg = ExperimentConfig::new(
        a.variants,
        a.settings.config(a.subset.samples, a.subset_seed),
        a.seed_base,
    );
    cfg.shared_keys = !a.per_layer_keys;
    cfg.output = Some(a.out.clone());
    cfg.attack.validate(&model)?;
    let test = a.data.load(SplitTag::Test)?;
    let attack_set = a.subset.select(&test, a.subset_seed)?;
    let test_ref = (!a.no_test_eval).then_some(&test);
    let summary = run_experiment(&model, &attack_set, test_ref, &cfg)?;
    if let Some(path) = &a.csv {
        emit_report(&summary, ReportFormat::Csv, path)?;
    }
    print_json(&serde_json::to_value(&summary.aggregates).map_err(|e| CliError::Runtime(e.into()))?)
}

/// A key given inline, or the keys in a file of that name.
fn key_arg(text: &str) -> CliResult<Vec<PufKey>> {
    let path = Path::new(text);
    if path.is_file() {
        return Ok(read_keys(path)?.keys().to_vec());
    }
    text.parse::<PufKey>()
        .map(|k| vec![k])
        .map_err(|e| CliError::Usage(format!("{text:?} is neither a key nor a key file: {e}")))
}

fn compare_keys(a: CompareArgs) -> CliResult {
    let truth = key_arg(&a.truth)?;
    let recovered = key_arg(&a.recovered)?;
    if truth.len() != recovered.len() {
        return Err(CliError::Usage(format!(
            "{} true keys but {} recovered keys",
            truth.len(),
            recovered.len()
        )));
    }
    let mut total = 0.0;
    for (t, r) in truth.iter().zip(&recovered) {
        total += key_bit_match(t, r).map_err(|e| CliError::Usage(e.to_string()))?;
    }
    println!("{}", total / truth.len() as f64);
    Ok(())
}
