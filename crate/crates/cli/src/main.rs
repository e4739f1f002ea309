//! `lab`: command-line entry point for tumorlab experiments.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use tumorlab::model::{ModelConfig, Task};
use tumorlab::phantom::{generate_dataset, load_manifest, save_manifest, split_dataset, PhantomConfig, Split};
use tumorlab::pipeline::{self, ExperimentConfig, OUTPUT_ROOT_ENV};
use tumorlab::retrieval::{
    embed_dataset, eval_distortion, eval_knn, serve, sweep_k, DistortionParams, EmbeddingTable,
    KnnEvalReport, RetrievalIndex,
};
use tumorlab::training::{train, TrainConfig};
use tumorlab::viz::{
    emit_k_sweep, emit_retrieval_panel, emit_scatter, project_table, ProjectionConfig, ProjectionMethod,
};
use tumorlab::{Error, Result};

#[derive(Parser)]
#[command(name = "lab", version, about = "Tumor retrieval experiments on synthetic volumes")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Synthetic dataset generation and splitting.
    #[command(subcommand)]
    Phantom(PhantomCmd),
    /// Train one network on the train split of a manifest.
    Train(TrainArgs),
    /// Train and evaluate one network per task subset.
    Ablate(AblateArgs),
    /// Embed every tumor of a split into a table.
    Embed(EmbedArgs),
    /// KNN evaluation of test embeddings against train embeddings.
    EvalKnn(EvalKnnArgs),
    /// KNN evaluation over a range of K.
    SweepK(SweepKArgs),
    /// Clean versus distorted-box retrieval.
    EvalDistort(EvalDistortArgs),
    /// Serve nearest-neighbor queries over HTTP.
    Serve(ServeArgs),
    /// Figures and their CSV/JSON twins.
    #[command(subcommand)]
    Viz(VizCmd),
    /// Run the full experiment pipeline.
    Run(RunArgs),
    /// Train and evaluate one model per embedding width.
    SweepChannels(SweepChannelsArgs),
}

#[derive(Subcommand)]
enum PhantomCmd {
    Generate {
        /// Phantom config JSON; defaults apply when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    Split {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, default_value_t = 0.2)]
        test_fraction: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Output manifest; defaults to rewriting the input.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    model_config: Option<PathBuf>,
    #[arg(long)]
    train_config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct ExperimentArgs {
    /// Experiment config JSON; desk defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Replaces the configured output root.
    #[arg(long, env = OUTPUT_ROOT_ENV)]
    output_root: Option<PathBuf>,
    /// Replaces the global seed.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct AblateArgs {
    #[command(flatten)]
    experiment: ExperimentArgs,
    /// JSON list of task lists, e.g. [["segmentation"], ["segmentation", "type"]].
    #[arg(long)]
    subsets: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Test,
    All,
}

impl SplitArg {
    fn split(self) -> Option<Split> {
        match self {
            SplitArg::Train => Some(Split::Train),
            SplitArg::Test => Some(Split::Test),
            SplitArg::All => None,
        }
    }
}

#[derive(Args)]
struct EmbedArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long, value_enum)]
    split: SplitArg,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 64)]
    inference_patch: usize,
}

#[derive(Args)]
struct EvalKnnArgs {
    #[arg(long)]
    train_table: PathBuf,
    #[arg(long)]
    test_table: PathBuf,
    #[arg(long, default_value_t = 5)]
    k: usize,
    /// Report JSON; printed to stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SweepKArgs {
    #[arg(long)]
    train_table: PathBuf,
    #[arg(long)]
    test_table: PathBuf,
    /// Inclusive range `a:b` or a comma list.
    #[arg(long, default_value = "1:10")]
    ks: String,
    /// Directory receiving one `k<K>.json` report per K.
    #[arg(long)]
    out_dir: PathBuf,
}

#[derive(Args)]
struct EvalDistortArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long, default_value_t = 1.0 / 3.0)]
    sigma_scale: f64,
    #[arg(long, default_value_t = 0.1)]
    sigma_trans: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 5)]
    k: usize,
    #[arg(long, default_value_t = 64)]
    inference_patch: usize,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ServeArgs {
    #[arg(long)]
    table: PathBuf,
    #[arg(long, default_value = "127.0.0.1:8080")]
    addr: String,
}

#[derive(Subcommand)]
enum VizCmd {
    Tsne {
        #[arg(long)]
        table: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 30.0)]
        perplexity: f64,
        #[arg(long, default_value_t = 1000)]
        iterations: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Linear projection instead of t-SNE.
        #[arg(long)]
        pca: bool,
    },
    Ksweep {
        #[arg(long)]
        reports_dir: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    Panel {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        table: PathBuf,
        #[arg(long)]
        tumor_id: String,
        #[arg(long, default_value_t = 2)]
        k: usize,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args)]
struct RunArgs {
    #[command(flatten)]
    experiment: ExperimentArgs,
}

#[derive(Args)]
struct SweepChannelsArgs {
    #[command(flatten)]
    experiment: ExperimentArgs,
    /// Comma-separated embedding widths.
    #[arg(long, value_delimiter = ',', required = true)]
    channels: Vec<usize>,
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::json(path.display().to_string(), e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::json("output", e))?;
    std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

fn print_json<T: Serialize>(value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::json("stdout", e))?;
    println!("{text}");
    Ok(())
}

fn parse_ks(spec: &str) -> Result<Vec<usize>> {
    let bad = || Error::config("ks", format!("expected `a:b` or a comma list, got `{spec}`"));
    if let Some((a, b)) = spec.split_once(':') {
        let a: usize = a.trim().parse().map_err(|_| bad())?;
        let b: usize = b.trim().parse().map_err(|_| bad())?;
        if a > b {
            return Err(bad());
        }
        return Ok((a..=b).collect());
    }
    spec.split(',').map(|s| s.trim().parse().map_err(|_| bad())).collect()
}

/// Load an experiment config, then apply the output-root and seed overrides.
/// Returns the config and the verbatim input text, if any.
fn load_experiment(args: &ExperimentArgs) -> Result<(ExperimentConfig, Option<String>)> {
    let (mut config, raw) = match &args.config {
        Some(path) => {
            let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            let c = serde_json::from_str(&text).map_err(|e| Error::json(path.display().to_string(), e))?;
            (c, Some(text))
        }
        None => (ExperimentConfig::default(), None),
    };
    if let Some(root) = &args.output_root {
        config.output_root = root.clone();
    }
    if let Some(seed) = args.seed {
        config.seed = seed;
    }
    Ok((config, raw))
}

fn echo_input(config: &ExperimentConfig, raw: Option<&str>) -> Result<()> {
    if let Some(text) = raw {
        let root = &config.output_root;
        std::fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
        let path = root.join("config.input.json");
        std::fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Phantom(PhantomCmd::Generate { config, out, seed }) => {
            let mut c: PhantomConfig = match config {
                Some(p) => read_json(&p)?,
                None => PhantomConfig::default(),
            };
            if let Some(s) = seed {
                c.seed = s;
            }
            let m = generate_dataset(&c, &out)?;
            log::info!("wrote {} images to {}", m.images.len(), out.display());
        }
        Command::Phantom(PhantomCmd::Split {
            manifest,
            test_fraction,
            seed,
            out,
        }) => {
            let (m, base) = load_manifest(&manifest)?;
            let split = split_dataset(&m, test_fraction, seed)?;
            let out = out.unwrap_or_else(|| manifest.clone());
            if out.parent().map(Path::to_path_buf).unwrap_or_default() != base {
                log::warn!("split manifest written outside {}; image paths stay relative", base.display());
            }
            save_manifest(&split, &out)?;
        }
        Command::Train(a) => {
            let model: ModelConfig = match &a.model_config {
                Some(p) => read_json(p)?,
                None => ModelConfig::default(),
            };
            let mut tc: TrainConfig = match &a.train_config {
                Some(p) => read_json(p)?,
                None => TrainConfig::default(),
            };
            if let Some(s) = a.seed {
                tc.seed = s;
            }
            let report = train(&a.manifest, &model, &tc, &a.out)?;
            log::info!("final checkpoint {}", report.final_checkpoint.display());
        }
        Command::Ablate(a) => {
            let (config, raw) = load_experiment(&a.experiment)?;
            let subsets: Vec<Vec<Task>> = read_json(&a.subsets)?;
            echo_input(&config, raw.as_deref())?;
            let report = pipeline::ablation(&config, &subsets)?;
            print!("{}", report.table());
        }
        Command::Embed(a) => {
            let table = embed_dataset(&a.checkpoint, &a.manifest, a.split.split(), a.inference_patch)?;
            table.write(&a.out)?;
            log::info!("embedded {} tumors into {}", table.len(), a.out.display());
        }
        Command::EvalKnn(a) => {
            let train = EmbeddingTable::read(&a.train_table)?;
            let test = EmbeddingTable::read(&a.test_table)?;
            let report = eval_knn(&train, &test, a.k, &Task::CLASSIFICATION)?;
            match &a.out {
                Some(p) => write_json(p, &report)?,
                None => print_json(&report)?,
            }
            print_json(&report.metrics())?;
        }
        Command::SweepK(a) => {
            let ks = parse_ks(&a.ks)?;
            let train = EmbeddingTable::read(&a.train_table)?;
            let test = EmbeddingTable::read(&a.test_table)?;
            let reports = sweep_k(&train, &test, &ks, &Task::CLASSIFICATION)?;
            for r in &reports {
                write_json(&a.out_dir.join(format!("k{:02}.json", r.k)), r)?;
            }
            for r in &reports {
                println!("k={} {}", r.k, serde_json::to_string(&r.metrics()).map_err(|e| Error::json("metrics", e))?);
            }
        }
        Command::EvalDistort(a) => {
            let params = DistortionParams {
                sigma_log2_scale: a.sigma_scale,
                sigma_translation_fraction: a.sigma_trans,
                seed: a.seed,
            };
            let report = eval_distortion(&a.checkpoint, &a.manifest, &params, a.k, a.inference_patch)?;
            if let Some(p) = &a.out {
                write_json(p, &report)?;
            }
            print_json(&report.deltas)?;
        }
        Command::Serve(a) => {
            let index = RetrievalIndex::new(EmbeddingTable::read(&a.table)?, false)?;
            let server = serve(index, &a.addr)?;
            log::info!("serving on http://{}", server.addr());
            server.join();
        }
        Command::Viz(VizCmd::Tsne {
            table,
            out,
            perplexity,
            iterations,
            seed,
            pca,
        }) => {
            let t = EmbeddingTable::read(&table)?;
            let config = ProjectionConfig {
                perplexity,
                n_iterations: iterations,
                seed,
                method: if pca { ProjectionMethod::PcaFallback } else { ProjectionMethod::Tsne },
            };
            let csv = emit_scatter(&project_table(&t, &config)?, &t, &out)?;
            log::info!("wrote {} and {}", out.display(), csv.display());
        }
        Command::Viz(VizCmd::Ksweep { reports_dir, out }) => {
            let mut reports: Vec<KnnEvalReport> = Vec::new();
            let entries = std::fs::read_dir(&reports_dir).map_err(|e| Error::io(&reports_dir, e))?;
            for entry in entries {
                let path = entry.map_err(|e| Error::io(&reports_dir, e))?.path();
                if path.extension().is_some_and(|e| e == "json") {
                    reports.push(read_json(&path)?);
                }
            }
            reports.sort_by_key(|r| r.k);
            let csv = emit_k_sweep(&reports, &out)?;
            log::info!("wrote {} and {}", out.display(), csv.display());
        }
        Command::Viz(VizCmd::Panel {
            manifest,
            table,
            tumor_id,
            k,
            out,
        }) => {
            let (m, base) = load_manifest(&manifest)?;
            let index = RetrievalIndex::new(EmbeddingTable::read(&table)?, false)?;
            let sidecar = emit_retrieval_panel(&m, &base, &index, &tumor_id, k, &out)?;
            print_json(&sidecar)?;
        }
        Command::Run(a) => {
            let (config, raw) = load_experiment(&a.experiment)?;
            echo_input(&config, raw.as_deref())?;
            let summary = pipeline::run_pipeline(&config)?;
            print_json(&summary.metrics)?;
            log::info!("summary at {}", summary.experiment_dir.join("summary.json").display());
        }
        Command::SweepChannels(a) => {
            let (config, raw) = load_experiment(&a.experiment)?;
            echo_input(&config, raw.as_deref())?;
            let report = pipeline::channel_sweep(&config, &a.channels)?;
            print!("{}", report.table());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn k_ranges_parse() {
        assert_eq!(parse_ks("1:10").unwrap(), (1..=10).collect::<Vec<_>>());
        assert_eq!(parse_ks("3, 5,7").unwrap(), vec![3, 5, 7]);
        assert!(parse_ks("5:1").is_err());
        assert!(parse_ks("x").is_err());
    }

    #[test]
    fn cli_definition_is_consistent() {
        use clap::CommandFactory;
        Cli::command().debug_assert();
    }
}
