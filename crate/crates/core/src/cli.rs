//! Command-line interface.
//!
//! Exit status is 0 on success, 1 on usage errors and 2 on data or
//! configuration errors. Failures of the latter kind print one line
//! `error<TAB>kind<TAB>message` to standard error.

use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::ann::AnnIndex;
use crate::checkpoint::Checkpoint;
use crate::corpus::SyntheticCorpus;
use crate::error::{Error, Result};
use crate::exec;
use crate::inventory::{load_transcripts, PhraseInventory};
use crate::model::{MaskSetting, ModelParams};
use crate::trainer::{
    build_index, encode_inventory, evaluate, fine_tune, sweep, sweep_plot_data, sweep_table, RunConfig, SweepGrid,
};

#[derive(Parser, Debug)]
#[command(name = "annp", version, about = "Hard-negative phrase mining for contextual transducers")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Build a phrase inventory from annotated transcripts or the synthetic corpus.
    BuildInventory(BuildInventoryArgs),
    /// Print the context-encoder embedding of every inventory phrase.
    Encode(ModelArgs),
    /// Embed the inventory and write an ANN index.
    BuildIndex(BuildIndexArgs),
    /// Print the nearest phrases to a phrase by dot product.
    Query(QueryArgs),
    /// Train a model on the synthetic corpus.
    Train(TrainArgs),
    /// Report word error rates of a checkpoint.
    Evaluate(EvaluateArgs),
    /// Train and evaluate over a grid of n, k and append ratio.
    Sweep(SweepArgs),
}

#[derive(Args, Debug)]
struct RunArgs {
    /// Run configuration (TOML).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads; 0 uses every core.
    #[arg(long, default_value_t = 0)]
    jobs: usize,
}

impl RunArgs {
    fn load(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(path) => RunConfig::load(path)?,
            None => RunConfig::default(),
        };
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        Ok(cfg)
    }
}

#[derive(Args, Debug)]
struct BuildInventoryArgs {
    #[command(flatten)]
    run: RunArgs,
    /// Annotated transcripts, one `text<TAB>start:end,...` per line.
    #[arg(long)]
    transcripts: Option<PathBuf>,
    /// Extra phrases, one per line.
    #[arg(long)]
    extra: Option<PathBuf>,
    /// Output inventory file.
    #[arg(long)]
    inventory: PathBuf,
}

#[derive(Args, Debug)]
struct ModelArgs {
    #[command(flatten)]
    run: RunArgs,
    #[arg(long)]
    inventory: PathBuf,
    /// Trained parameters; a fresh seeded model is used when absent.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
}

impl ModelArgs {
    fn params(&self, cfg: &RunConfig) -> Result<ModelParams> {
        match &self.checkpoint {
            Some(path) => Ok(Checkpoint::load(path)?.params),
            None => ModelParams::new(cfg.model.clone(), cfg.seed),
        }
    }
}

#[derive(Args, Debug)]
struct BuildIndexArgs {
    #[command(flatten)]
    model: ModelArgs,
    /// Output index file.
    #[arg(long)]
    index: PathBuf,
}

#[derive(Args, Debug)]
struct QueryArgs {
    #[arg(long)]
    index: PathBuf,
    #[arg(long)]
    phrase: String,
    #[arg(long, default_value_t = 20)]
    n: usize,
    /// Encodes phrases that are not stored in the index.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum MaskArg {
    Global,
    Streaming,
    Variable,
}

impl From<MaskArg> for MaskSetting {
    fn from(m: MaskArg) -> Self {
        match m {
            MaskArg::Global => MaskSetting::Global,
            MaskArg::Streaming => MaskSetting::Streaming,
            MaskArg::Variable => MaskSetting::Variable,
        }
    }
}

#[derive(Args, Debug)]
struct OverrideArgs {
    #[arg(long, value_enum)]
    mask_mode: Option<MaskArg>,
    #[arg(long)]
    chunk_frames: Option<usize>,
}

impl OverrideArgs {
    fn apply(&self, cfg: &mut RunConfig) {
        if let Some(m) = self.mask_mode {
            cfg.mask_mode = m.into();
        }
        if let Some(c) = self.chunk_frames {
            cfg.chunk_frames = c;
        }
    }
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[command(flatten)]
    run: RunArgs,
    #[command(flatten)]
    overrides: OverrideArgs,
    #[arg(long)]
    n: Option<usize>,
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    append_ratio: Option<f64>,
    /// Inventory to sample from; built from the corpus when absent.
    #[arg(long)]
    inventory: Option<PathBuf>,
    /// Where to write the trained parameters.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Where to write the training log; standard output when absent.
    #[arg(long)]
    log: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct EvaluateArgs {
    #[command(flatten)]
    run: RunArgs,
    #[command(flatten)]
    overrides: OverrideArgs,
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    inventory: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct SweepArgs {
    #[command(flatten)]
    run: RunArgs,
    #[command(flatten)]
    overrides: OverrideArgs,
    /// Retrieval depths; defaults to 10,20,40.
    #[arg(long, value_delimiter = ',')]
    n: Vec<usize>,
    /// Sample sizes; defaults to 1,2,4.
    #[arg(long, value_delimiter = ',')]
    k: Vec<usize>,
    /// Append ratios; defaults to 0.25,0.5,1.0.
    #[arg(long, value_delimiter = ',')]
    append_ratio: Vec<f64>,
    #[arg(long)]
    inventory: Option<PathBuf>,
    /// Directory receiving `results.tsv` and `plot.dat`.
    #[arg(long)]
    output: PathBuf,
}

fn inventory_for(path: Option<&Path>, corpus: &SyntheticCorpus) -> Result<PhraseInventory> {
    match path {
        Some(p) => PhraseInventory::load(p),
        None => corpus.inventory(),
    }
}

fn build_inventory(args: &BuildInventoryArgs, out: &mut dyn Write) -> Result<()> {
    let base = match &args.transcripts {
        Some(path) => PhraseInventory::ingest(&load_transcripts(path)?)?.with_word_entries(),
        None => args.run.load()?.generate_corpus()?.inventory()?,
    };
    let inventory = match &args.extra {
        Some(path) => {
            let text = std::fs::read_to_string(path)?;
            let lines: Vec<&str> = text.lines().filter(|l| !l.trim().is_empty()).collect();
            base.extend(&lines)
        }
        None => base,
    };
    inventory.save(&args.inventory)?;
    writeln!(out, "phrases\t{}", inventory.len())?;
    Ok(())
}

fn encode(args: &ModelArgs, out: &mut dyn Write) -> Result<()> {
    let cfg = args.run.load()?;
    let inventory = PhraseInventory::load(&args.inventory)?;
    let params = args.params(&cfg)?;
    let vectors = encode_inventory(&params, &inventory)?;
    for (id, v) in vectors {
        let text = inventory.get(id).map(|p| p.text.as_str()).unwrap_or("");
        let values: Vec<String> = v.iter().map(|x| format!("{x:e}")).collect();
        writeln!(out, "{id}\t{text}\t{}", values.join(" "))?;
    }
    Ok(())
}

fn build_index_cmd(args: &BuildIndexArgs, out: &mut dyn Write) -> Result<()> {
    let cfg = args.model.run.load()?;
    let inventory = PhraseInventory::load(&args.model.inventory)?;
    if inventory.is_empty() {
        return Err(Error::EmptyIndex);
    }
    let params = args.model.params(&cfg)?;
    let index = build_index(&params, &inventory, &cfg.ann, cfg.seed)?;
    index.save(&args.index)?;
    writeln!(out, "indexed\t{}", index.len())?;
    Ok(())
}

fn query(args: &QueryArgs, out: &mut dyn Write) -> Result<()> {
    let index = AnnIndex::load(&args.index)?;
    let phrase = crate::inventory::normalize(&args.phrase);
    let vector = match index.find_label(&phrase).and_then(|id| index.vector(id)) {
        Some(v) => v.to_vec(),
        None => match &args.checkpoint {
            Some(path) => Checkpoint::load(path)?.params.encoder().encode_text(&phrase)?.0,
            None => {
                return Err(Error::InvalidInput(format!(
                    "phrase {phrase:?} is not in the index; pass --checkpoint to encode it"
                )))
            }
        },
    };
    for (rank, hit) in index.query(&vector, args.n)?.iter().enumerate() {
        let label = index
            .label(hit.phrase_id)
            .map_or_else(|| hit.phrase_id.to_string(), str::to_string);
        writeln!(out, "{}\t{}\t{:.6}", rank + 1, label, hit.score)?;
    }
    Ok(())
}

fn train(args: &TrainArgs, out: &mut dyn Write) -> Result<()> {
    let mut cfg = args.run.load()?;
    args.overrides.apply(&mut cfg);
    if let Some(n) = args.n {
        cfg.sampler.n = n;
    }
    if let Some(k) = args.k {
        cfg.sampler.k = k;
    }
    if let Some(r) = args.append_ratio {
        cfg.sampler.append_ratio = r;
    }
    cfg.validate()?;
    let corpus = cfg.generate_corpus()?;
    let inventory = inventory_for(args.inventory.as_deref(), &corpus)?;
    let outcome = exec::with_jobs(args.run.jobs, || fine_tune(&cfg, &corpus, &inventory))?;
    if let Some(path) = &args.checkpoint {
        Checkpoint {
            params: outcome.params,
            mask_mode: cfg.mask_mode,
            chunk_frames: cfg.chunk_frames,
        }
        .save(path)?;
    }
    let log = outcome.log.to_tsv();
    match &args.log {
        Some(path) => std::fs::write(path, log)?,
        None => out.write_all(log.as_bytes())?,
    }
    Ok(())
}

fn evaluate_cmd(args: &EvaluateArgs, out: &mut dyn Write) -> Result<()> {
    let mut cfg = args.run.load()?;
    let checkpoint = Checkpoint::load(&args.checkpoint)?;
    cfg.mask_mode = checkpoint.mask_mode;
    cfg.chunk_frames = checkpoint.chunk_frames;
    args.overrides.apply(&mut cfg);
    let mode = cfg.mask_mode.resolve(cfg.chunk_frames);
    mode.validate()?;
    let corpus = cfg.generate_corpus()?;
    let inventory = inventory_for(args.inventory.as_deref(), &corpus)?;
    let reports = exec::with_jobs(args.run.jobs, || {
        [true, false]
            .iter()
            .map(|&on| evaluate(&checkpoint.params, &corpus, &inventory, mode, on, &cfg.eval))
            .collect::<Result<Vec<_>>>()
    })?;
    for (i, report) in reports.iter().enumerate() {
        let tsv = report.to_tsv();
        let body = if i == 0 { tsv.as_str() } else { tsv.split_once('\n').map_or("", |x| x.1) };
        out.write_all(body.as_bytes())?;
    }
    Ok(())
}

fn sweep_cmd(args: &SweepArgs, out: &mut dyn Write) -> Result<()> {
    let mut cfg = args.run.load()?;
    args.overrides.apply(&mut cfg);
    cfg.validate()?;
    let defaults = SweepGrid::default();
    let grid = SweepGrid {
        n: if args.n.is_empty() { defaults.n } else { args.n.clone() },
        k: if args.k.is_empty() { defaults.k } else { args.k.clone() },
        append_ratio: if args.append_ratio.is_empty() {
            defaults.append_ratio
        } else {
            args.append_ratio.clone()
        },
    };
    let corpus = cfg.generate_corpus()?;
    let inventory = inventory_for(args.inventory.as_deref(), &corpus)?;
    let cells = exec::with_jobs(args.run.jobs, || sweep(&cfg, &corpus, &inventory, &grid));
    std::fs::create_dir_all(&args.output)?;
    let table = sweep_table(&cells);
    std::fs::write(args.output.join("results.tsv"), &table)?;
    std::fs::write(args.output.join("plot.dat"), sweep_plot_data(&cells))?;
    out.write_all(table.as_bytes())?;
    Ok(())
}

fn dispatch(cli: &Cli, out: &mut dyn Write) -> Result<()> {
    match &cli.command {
        Command::BuildInventory(a) => build_inventory(a, out),
        Command::Encode(a) => encode(a, out),
        Command::BuildIndex(a) => build_index_cmd(a, out),
        Command::Query(a) => query(a, out),
        Command::Train(a) => train(a, out),
        Command::Evaluate(a) => evaluate_cmd(a, out),
        Command::Sweep(a) => sweep_cmd(a, out),
    }
}

/// Parses `args` (program name first), runs the command and returns the exit status.
pub fn run<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let rendered = e.render().to_string();
            return if e.use_stderr() {
                let _ = err.write_all(rendered.as_bytes());
                1
            } else {
                let _ = out.write_all(rendered.as_bytes());
                0
            };
        }
    };
    match dispatch(&cli, out) {
        Ok(()) => 0,
        Err(e) => {
            let message = e.to_string().replace(['\t', '\n'], " ");
            let _ = writeln!(err, "error\t{}\t{message}", e.kind());
            2
        }
    }
}
