//! Command-line front end. [`run_cli`] parses arguments, runs one
//! subcommand and returns the process exit status.

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

mod commands;

/// Exit status for validation and usage errors.
const EXIT_INVALID: u8 = 1;
/// Exit status for filesystem errors.
const EXIT_IO: u8 = 2;

#[derive(Debug, Parser)]
#[command(name = "promptlens", version, about = "Contrastive prompt-augmented training on frozen CLIP embeddings")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Plan prompt manifests for the embedding exporter.
    #[command(subcommand)]
    Bank(BankCommand),
    /// Train a disentangling network on an embedded prompt bank.
    Train(TrainArgs),
    /// Evaluate a network on image embeddings.
    #[command(subcommand)]
    Eval(EvalCommand),
    /// Synthetic identifiability experiments.
    #[command(subcommand)]
    Synth(SynthCommand),
    /// Export data derived from a network.
    #[command(subcommand)]
    Export(ExportCommand),
    /// Check analytic gradients of the training objective against finite differences.
    Gradcheck(GradcheckArgs),
    /// Print a configuration with every default filled in.
    Config(ConfigArgs),
}

#[derive(Debug, Subcommand)]
enum BankCommand {
    /// Every augmented prompt for every class, as JSONL.
    Plan(PlanArgs),
    /// Class-name prompts for evaluation (C, PC, CP) or the style probe set (ISD).
    Templates(TemplatesArgs),
}

#[derive(Debug, Subcommand)]
enum EvalCommand {
    /// Zero-shot accuracy under the C, PC and CP templates.
    Zs(ZsArgs),
    /// Zero-shot sweep plus text-trained linear probes (lin_C, lin_ISD).
    Probe(ProbeArgs),
}

#[derive(Debug, Subcommand)]
enum SynthCommand {
    /// Sample a synthetic dataset, train on it and score identifiability.
    Run(SynthArgs),
}

#[derive(Debug, Subcommand)]
enum ExportCommand {
    /// Network outputs of an embedding set as CSV (id,label,r_0,..).
    Reps(RepsArgs),
}

#[derive(Debug, Args)]
struct VocabArgs {
    /// Run config whose [vocab] table names vocabulary files [default: built-in vocabulary]
    #[arg(long)]
    config: Option<PathBuf>,
    /// JSON array of style descriptions [default: from --config, else built-in]
    #[arg(long)]
    styles: Option<PathBuf>,
    /// JSON array of adjectives [default: from --config, else built-in]
    #[arg(long)]
    adjectives: Option<PathBuf>,
    /// JSON object mapping class names to synonyms [default: from --config, else built-in]
    #[arg(long)]
    synonyms: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct PlanArgs {
    /// Class list, one name per line, blank lines and # comments ignored [required]
    #[arg(long)]
    classes: PathBuf,
    /// Plus-joined augmentation flags from ISD, SRC, AAC, SSO
    #[arg(long, default_value = "ISD+AAC+SSO")]
    combo: String,
    /// Output JSONL manifest [default: standard output]
    #[arg(long)]
    out: Option<PathBuf>,
    #[command(flatten)]
    vocab: VocabArgs,
}

#[derive(Debug, Args)]
struct TemplatesArgs {
    /// Class list, one name per line [required]
    #[arg(long)]
    classes: PathBuf,
    /// C, PC, CP or ISD [required]
    #[arg(long)]
    template: String,
    /// Output JSONL manifest [default: standard output]
    #[arg(long)]
    out: Option<PathBuf>,
    #[command(flatten)]
    vocab: VocabArgs,
}

#[derive(Debug, Args)]
struct TrainArgs {
    /// Embedded prompt bank (CLAPEMB1) [required]
    #[arg(long)]
    bank: PathBuf,
    /// Run config (TOML) [default: all defaults]
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output network; with several seeds, `.seed<N>` is inserted before the extension [required]
    #[arg(long)]
    out: PathBuf,
    /// Training log (JSON), named per seed like --out [default: not written]
    #[arg(long)]
    log: Option<PathBuf>,
    /// Train this single seed instead of the config's seed list [default: train.seeds]
    #[arg(long, env = "PROMPTLENS_SEED")]
    seed: Option<u64>,
    /// Override train.tau [default: from config, else 0.1]
    #[arg(long)]
    tau: Option<f64>,
    /// Override train.adam.lr [default: from config, else 0.0001]
    #[arg(long)]
    lr: Option<f64>,
    /// Override train.max_steps [default: from config, else 100000]
    #[arg(long)]
    max_steps: Option<u64>,
    /// Override train.batch_classes [default: from config, else every class]
    #[arg(long)]
    batch_classes: Option<usize>,
}

#[derive(Debug, Args)]
struct EvalInputs {
    /// Trained network, or `none` for the raw embedding baseline
    #[arg(long, default_value = "none")]
    net: String,
    /// Labelled image embeddings (CLAPEMB1) [required]
    #[arg(long)]
    images: PathBuf,
    /// Class-name embeddings, template C [required]
    #[arg(long)]
    class_texts_c: PathBuf,
    /// Class-name embeddings, template PC [required]
    #[arg(long)]
    class_texts_pc: PathBuf,
    /// Class-name embeddings, template CP [required]
    #[arg(long)]
    class_texts_cp: PathBuf,
    /// Run config (TOML); its [eval] table is used [default: all defaults]
    #[arg(long)]
    config: Option<PathBuf>,
    /// Dataset name for the report [default: from config, else "dataset"]
    #[arg(long)]
    dataset: Option<String>,
    /// Compare images against raw text anchors [default: off; [eval] apply_to_text decides]
    #[arg(long)]
    raw_text_anchors: bool,
    /// Report path; .csv selects CSV, anything else JSON [default: JSON on standard output]
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct ZsArgs {
    #[command(flatten)]
    inputs: EvalInputs,
}

#[derive(Debug, Args)]
struct ProbeArgs {
    #[command(flatten)]
    inputs: EvalInputs,
    /// Style prompts for the lin_ISD probe (13 per class); lin_C trains on --class-texts-c [required]
    #[arg(long)]
    probe_train: PathBuf,
    /// Probe shuffling seed [default: from config, else 0]
    #[arg(long, env = "PROMPTLENS_SEED")]
    seed: Option<u64>,
}

#[derive(Debug, Args)]
struct SynthArgs {
    /// Synthetic run config (TOML) [default: all defaults]
    #[arg(long)]
    config: Option<PathBuf>,
    /// Report (JSON) [required]
    #[arg(long)]
    report: PathBuf,
    /// Trained network [default: not written]
    #[arg(long)]
    net: Option<PathBuf>,
    /// Training log (JSON) [default: not written]
    #[arg(long)]
    log: Option<PathBuf>,
    /// Override causal.seed [default: from config, else 0]
    #[arg(long, env = "PROMPTLENS_SEED")]
    seed: Option<u64>,
    /// Override train.max_steps [default: from config, else 100000]
    #[arg(long)]
    max_steps: Option<u64>,
}

#[derive(Debug, Args)]
struct RepsArgs {
    /// Trained network, or `none` to export the raw embeddings
    #[arg(long, default_value = "none")]
    net: String,
    /// Embedding set (CLAPEMB1) [required]
    #[arg(long)]
    set: PathBuf,
    /// Output CSV [required]
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct GradcheckArgs {
    /// Random instances to check
    #[arg(long, default_value_t = 50)]
    instances: usize,
    /// Largest batch size K
    #[arg(long, default_value_t = 8)]
    max_k: usize,
    /// Largest embedding width D
    #[arg(long, default_value_t = 16)]
    max_d: usize,
    /// Largest acceptable relative error
    #[arg(long, default_value_t = 1e-5)]
    tol: f64,
    /// Instance seed [default: 0]
    #[arg(long, env = "PROMPTLENS_SEED")]
    seed: Option<u64>,
}

#[derive(Debug, Args)]
struct ConfigArgs {
    /// Config to resolve [default: all defaults]
    #[arg(long)]
    config: Option<PathBuf>,
    /// Treat the config as a `synth run` config [default: off]
    #[arg(long)]
    synth: bool,
}

/// Runs the command line `args` (program name first) and returns the exit
/// status: 0 on success, 1 for usage and validation errors, 2 for I/O errors.
pub fn run_cli<I, T>(args: I) -> u8
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_INVALID } else { 0 };
        }
    };
    match commands::run(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_io() {
                EXIT_IO
            } else {
                EXIT_INVALID
            }
        }
    }
}
