use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use pcw_core::harness::{
    load_dataset, run_experiment, sweep_b, Dataset, DocAssignment, ExperimentConfig, Mode, StdKind,
};
use pcw_core::layout::{allowed_pair_count, build_mask, render_dump, WindowLayout};
use pcw_core::model::{greedy_generate, Model, ModelConfig, ParallelContext, PositionalKind, StopAfter};
use pcw_core::packer::{compute_n_max, pack, render_windows, task_text, TaskTemplate};
use pcw_core::tokenizer::{load_bpe, ByteTokenizer, Tokenizer};
use serde::Serialize;

#[derive(Parser)]
#[command(
    name = "pcw",
    version,
    about = "Parallel context windows for decoder-only transformers"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Greedy continuation of a task prompt over parallel context windows.
    Generate(GenerateArgs),
    /// ICL baseline vs parallel windows over several training seeds.
    Icl(IclArgs),
    /// Print position ids and the attention mask for a layout.
    MaskDump(MaskArgs),
    /// Compute the example budget and a packed assignment without a model.
    Pack(PackArgs),
    /// Attention cost of a layout across window counts.
    Bench(BenchArgs),
    /// Run the experiment for a range of window counts.
    SweepB(SweepArgs),
    /// Write a randomly initialised weight container for a config.
    InitWeights(InitArgs),
}

#[derive(Args)]
struct ModelArgs {
    /// Weight container.
    #[arg(long)]
    model: PathBuf,
    /// Model config JSON.
    #[arg(long)]
    config: PathBuf,
    #[command(flatten)]
    tok: TokenizerArgs,
}

#[derive(Args)]
struct TokenizerArgs {
    /// GPT-2 vocab.json; byte-level ids are used when omitted.
    #[arg(long, requires = "merges")]
    vocab: Option<PathBuf>,
    /// GPT-2 merges.txt.
    #[arg(long, requires = "vocab")]
    merges: Option<PathBuf>,
}

impl TokenizerArgs {
    fn load(&self) -> Result<Box<dyn Tokenizer>> {
        Ok(match (&self.vocab, &self.merges) {
            (Some(v), Some(m)) => Box::new(load_bpe(v, m)?),
            _ => Box::new(ByteTokenizer),
        })
    }
}

#[derive(Args)]
struct OutArgs {
    /// Output file, `-` for stdout.
    #[arg(long, default_value = "-")]
    out: String,
}

#[derive(Args)]
struct GenerateArgs {
    #[command(flatten)]
    model: ModelArgs,
    /// Context window text; repeat for several windows.
    #[arg(long = "window", required = true)]
    windows: Vec<String>,
    /// Task prompt that follows the windows.
    #[arg(long)]
    task: String,
    #[arg(long, default_value_t = 16)]
    max_new: usize,
    /// Stop after this text (must be a single token), e.g. "\n".
    #[arg(long)]
    stop: Option<String>,
    #[command(flatten)]
    out: OutArgs,
}

#[derive(Args)]
struct ExperimentArgs {
    #[command(flatten)]
    model: ModelArgs,
    /// Training pool (JSONL).
    #[arg(long)]
    dataset: PathBuf,
    /// Separate test pool; otherwise the test subsample is held out of
    /// the training pool.
    #[arg(long)]
    test_dataset: Option<PathBuf>,
    /// Task template JSON.
    #[arg(long)]
    template: PathBuf,
    #[arg(long, default_value_t = 30)]
    n_sets: usize,
    #[arg(long, default_value_t = 250)]
    test_size: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, value_enum, default_value_t = ModeArg::Icl)]
    mode: ModeArg,
    /// Override the computed per-window example budget.
    #[arg(long)]
    n_max: Option<usize>,
    #[arg(long, value_enum, default_value_t = StdArg::Population)]
    std: StdArg,
    /// Docs mode: document-to-window assignment.
    #[arg(long, value_enum, default_value_t = DocsArg::Rank)]
    docs: DocsArg,
    /// Docs mode: documents kept per window.
    #[arg(long)]
    docs_per_window: Option<usize>,
    /// Docs mode: shared few-shot examples at the head of every window.
    #[arg(long, default_value_t = 0)]
    prefix_examples: usize,
    /// Docs mode: answer length limit in tokens.
    #[arg(long, default_value_t = 16)]
    max_new: usize,
    #[command(flatten)]
    out: OutArgs,
}

#[derive(Args)]
struct IclArgs {
    #[command(flatten)]
    exp: ExperimentArgs,
    /// Number of parallel windows.
    #[arg(long, default_value_t = 3)]
    b: usize,
}

#[derive(Args)]
struct SweepArgs {
    #[command(flatten)]
    exp: ExperimentArgs,
    /// Window counts, `1..8` (inclusive) or `1,2,4`.
    #[arg(long = "range", default_value = "1..8", value_parser = parse_range)]
    range: List,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Icl,
    Docs,
}

#[derive(Clone, Copy, ValueEnum)]
enum StdArg {
    Population,
    Sample,
}

#[derive(Clone, Copy, ValueEnum)]
enum DocsArg {
    Rank,
    Random,
}

#[derive(Args)]
struct MaskArgs {
    /// Window lengths, `2,3,2` or `BxC`.
    #[arg(long, value_parser = parse_windows)]
    windows: List,
    /// Task length.
    #[arg(long)]
    task: usize,
    /// Position capacity N (default: just enough).
    #[arg(long)]
    capacity: Option<usize>,
    /// Prepend a shared BOS token.
    #[arg(long)]
    bos: bool,
    #[command(flatten)]
    out: OutArgs,
}

#[derive(Args)]
struct PackArgs {
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long)]
    test_dataset: Option<PathBuf>,
    #[arg(long)]
    template: PathBuf,
    /// Model config JSON (for the position capacity).
    #[arg(long)]
    config: PathBuf,
    #[command(flatten)]
    tok: TokenizerArgs,
    #[arg(long, default_value_t = 3)]
    b: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    n_max: Option<usize>,
    #[command(flatten)]
    out: OutArgs,
}

#[derive(Args)]
struct BenchArgs {
    /// Per-window lengths, `c,c` or `BxC`; only the first length is used
    /// as the fixed window length when sweeping.
    #[arg(long, value_parser = parse_windows)]
    windows: List,
    #[arg(long, default_value_t = 16)]
    task: usize,
    /// Window counts to evaluate, e.g. `1..8`.
    #[arg(long, value_parser = parse_range)]
    sweep_b: Option<List>,
    /// Report wall-clock timings (makes the output non-reproducible).
    #[arg(long)]
    time: bool,
    /// Also time encode + decode on this model (implies --time).
    #[arg(long, requires = "config")]
    model: Option<PathBuf>,
    #[arg(long)]
    config: Option<PathBuf>,
    #[command(flatten)]
    out: OutArgs,
}

#[derive(Args)]
struct InitArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Standard deviation of the random weights.
    #[arg(long, default_value_t = 0.02)]
    std: f32,
    /// Container path to write.
    #[arg(long)]
    out: PathBuf,
}

/// Comma-separated or `BxC` list, parsed as one argument.
#[derive(Clone, Debug)]
struct List(Vec<usize>);

fn parse_windows(s: &str) -> Result<List, String> {
    parse_window_list(s).map(List)
}

fn parse_range(s: &str) -> Result<List, String> {
    parse_range_list(s).map(List)
}

fn parse_window_list(s: &str) -> Result<Vec<usize>, String> {
    let bad = || format!("expected `c1,c2,...` or `BxC`, got `{s}`");
    if let Some((b, c)) = s.split_once(['x', 'X']) {
        let b: usize = b.trim().parse().map_err(|_| bad())?;
        let c: usize = c.trim().parse().map_err(|_| bad())?;
        return Ok(vec![c; b]);
    }
    s.split(',').map(|p| p.trim().parse().map_err(|_| bad())).collect()
}

fn parse_range_list(s: &str) -> Result<Vec<usize>, String> {
    let bad = || format!("expected `lo..hi` or `a,b,c`, got `{s}`");
    if let Some((lo, hi)) = s.split_once("..") {
        let lo: usize = lo.trim().parse().map_err(|_| bad())?;
        let hi: usize = hi.trim_start_matches('=').trim().parse().map_err(|_| bad())?;
        if lo > hi {
            return Err(bad());
        }
        return Ok((lo..=hi).collect());
    }
    s.split(',').map(|p| p.trim().parse().map_err(|_| bad())).collect()
}

/// Writes to stdout, or to a temp file renamed into place on success.
fn emit(out: &str, content: &str) -> Result<()> {
    if out == "-" {
        let mut stdout = std::io::stdout().lock();
        stdout.write_all(content.as_bytes())?;
        return Ok(stdout.flush()?);
    }
    let path = Path::new(out);
    let dir = match path.parent() {
        Some(d) if !d.as_os_str().is_empty() => d,
        _ => Path::new("."),
    };
    let mut tmp =
        tempfile::NamedTempFile::new_in(dir).with_context(|| format!("creating temp file in {}", dir.display()))?;
    tmp.write_all(content.as_bytes())?;
    tmp.persist(path).with_context(|| format!("writing {out}"))?;
    Ok(())
}

fn emit_json(out: &str, value: &impl Serialize) -> Result<()> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    emit(out, &s)
}

fn load_model(args: &ModelArgs) -> Result<Model> {
    let config = ModelConfig::load(&args.config)?;
    Ok(Model::load(&args.model, config)?)
}

fn stem(p: &Path) -> String {
    p.file_stem()
        .map_or_else(|| p.display().to_string(), |s| s.to_string_lossy().into_owned())
}

#[derive(Serialize)]
struct Generation {
    window_tokens: Vec<usize>,
    task_tokens: usize,
    generated_ids: Vec<u32>,
    text: String,
}

fn generate(args: GenerateArgs) -> Result<()> {
    let model = load_model(&args.model)?;
    let tok = args.model.tok.load()?;
    let windows: Vec<Vec<u32>> = args.windows.iter().map(|w| tok.encode(w)).collect();
    let task = tok.encode(&args.task);
    if task.is_empty() {
        bail!("task prompt encodes to no tokens");
    }
    let ctx = ParallelContext::encode(&model, &windows, model.config().bos_token_id)?;
    ctx.layout(task.len(), model.config().max_positions)?;
    let stop = match &args.stop {
        Some(s) => match tok.encode(s)[..] {
            [id] => Some(StopAfter(vec![id])),
            _ => bail!("--stop must encode to exactly one token"),
        },
        None => None,
    };
    let ids = greedy_generate(
        &model,
        &ctx.segments(),
        &task,
        &ctx.task_positions(task.len()),
        args.max_new,
        stop.as_ref().map(|s| s as _),
    )?;
    emit_json(
        &args.out.out,
        &Generation {
            window_tokens: windows.iter().map(Vec::len).collect(),
            task_tokens: task.len(),
            text: tok.decode(&ids)?,
            generated_ids: ids,
        },
    )
}

struct Loaded {
    model: Model,
    tok: Box<dyn Tokenizer>,
    template: TaskTemplate,
    train: Dataset,
    test: Option<Dataset>,
    config: ExperimentConfig,
}

fn load_experiment(args: &ExperimentArgs, b: usize) -> Result<Loaded> {
    let template = TaskTemplate::load(&args.template)?;
    let train = load_dataset(&args.dataset, &template)?;
    let test = args
        .test_dataset
        .as_ref()
        .map(|p| load_dataset(p, &template))
        .transpose()?;
    let config = ExperimentConfig {
        b,
        n_sets: args.n_sets,
        test_size: args.test_size,
        seed: args.seed,
        mode: match args.mode {
            ModeArg::Icl => Mode::Icl,
            ModeArg::Docs => Mode::Docs,
        },
        std_kind: match args.std {
            StdArg::Population => StdKind::Population,
            StdArg::Sample => StdKind::Sample,
        },
        n_max: args.n_max,
        doc_assignment: match args.docs {
            DocsArg::Rank => DocAssignment::RankRoundRobin,
            DocsArg::Random => DocAssignment::Random,
        },
        docs_per_window: args.docs_per_window,
        prefix_examples: args.prefix_examples,
        max_new_tokens: args.max_new,
        model_name: stem(&args.model.model),
    };
    Ok(Loaded {
        model: load_model(&args.model)?,
        tok: args.model.tok.load()?,
        template,
        train,
        test,
        config,
    })
}

fn icl(args: IclArgs) -> Result<()> {
    let l = load_experiment(&args.exp, args.b)?;
    let started = Instant::now();
    let report = run_experiment(
        &l.model,
        l.tok.as_ref(),
        &l.train,
        l.test.as_ref(),
        &l.template,
        l.config,
    )?;
    eprintln!(
        "baseline (B=1) {:.2} ± {:.2}   pcw (B={}) {:.2} ± {:.2}   p={}   [{:.1}s]",
        report.baseline.mean,
        report.baseline.std,
        args.b,
        report.pcw.mean,
        report.pcw.std,
        report
            .pcw
            .p_value_vs_baseline
            .map_or("n/a".into(), |p| format!("{p:.4}")),
        started.elapsed().as_secs_f64()
    );
    emit_json(&args.exp.out.out, &report)
}

fn sweep(args: SweepArgs) -> Result<()> {
    if args.range.0.contains(&0) {
        bail!("window counts must be at least 1");
    }
    let l = load_experiment(&args.exp, 1)?;
    let report = sweep_b(
        &l.model,
        l.tok.as_ref(),
        &l.train,
        l.test.as_ref(),
        &l.template,
        l.config,
        &args.range.0,
    )?;
    eprintln!("B\texamples\tmean\tstd");
    for r in &report.rows {
        eprintln!(
            "{}\t{}\t{:.2}\t{:.2}",
            r.config.b,
            r.config.b * r.config.n_max,
            r.mean,
            r.std
        );
    }
    emit_json(&args.exp.out.out, &report)
}

fn mask_dump(args: MaskArgs) -> Result<()> {
    let needed = usize::from(args.bos) + args.windows.0.iter().max().copied().unwrap_or(0) + args.task;
    let layout = WindowLayout::new(args.windows.0, args.task, args.capacity.unwrap_or(needed), args.bos)?;
    emit(&args.out.out, &render_dump(&layout))
}

#[derive(Serialize)]
struct PackOutput {
    budget: pcw_core::packer::PackingBudget,
    b: usize,
    seed: u64,
    windows: Vec<Vec<usize>>,
    window_example_tokens: Vec<usize>,
    window_rendered_tokens: Vec<usize>,
    longest_task_tokens: usize,
    capacity: usize,
    fits: bool,
}

fn pack_cmd(args: PackArgs) -> Result<()> {
    let template = TaskTemplate::load(&args.template)?;
    let config = ModelConfig::load(&args.config)?;
    let tok = args.tok.load()?;
    let train = load_dataset(&args.dataset, &template)?;
    let test = match &args.test_dataset {
        Some(p) => load_dataset(p, &template)?,
        None => train.clone(),
    };
    let examples = train.examples();
    let lengths: Vec<usize> = examples
        .iter()
        .map(|e| tok.encode(&template.render_example(e)).len() + 1)
        .collect();
    let test_lengths: Vec<usize> = test
        .records
        .iter()
        .map(|r| tok.encode(&task_text(&template, &r.input)).len())
        .collect();
    let capacity = config.max_positions - usize::from(config.bos_token_id.is_some());
    let mut budget = compute_n_max(&lengths, &test_lengths, capacity)?;
    if let Some(n) = args.n_max {
        budget.n_max = n;
    }
    let assignment = pack(&lengths, args.b, budget.n_max, args.seed)?;
    let (texts, _) = render_windows(&assignment, &examples, &template, "")?;
    let rendered: Vec<usize> = texts.iter().map(|t| tok.encode(t).len()).collect();
    let longest_task = budget.t_max;
    let fits = rendered.iter().all(|&w| w + longest_task <= capacity);
    eprintln!(
        "n_max={} (T_max={}, D_90={}), window totals {:?}, spread {}",
        budget.n_max,
        budget.t_max,
        budget.d_90,
        assignment.totals,
        assignment.spread()
    );
    emit_json(
        &args.out.out,
        &PackOutput {
            budget,
            b: args.b,
            seed: args.seed,
            windows: assignment.windows,
            window_example_tokens: assignment.totals,
            window_rendered_tokens: rendered,
            longest_task_tokens: longest_task,
            capacity,
            fits,
        },
    )
}

#[derive(Serialize)]
struct BenchRow {
    b: usize,
    total_tokens: usize,
    allowed_pairs: usize,
    dense_causal_pairs: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    mask_build_us: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    encode_decode_ms: Option<f64>,
}

#[derive(Serialize)]
struct BenchOutput {
    window_length: usize,
    task_length: usize,
    rows: Vec<BenchRow>,
    /// allowed_pairs = slope·B + intercept, fitted from the first two rows.
    slope: Option<i64>,
    intercept: Option<i64>,
    max_affine_residual: Option<u64>,
}

fn bench(args: BenchArgs) -> Result<()> {
    let Some(&c) = args.windows.0.first() else {
        bail!("--windows is empty")
    };
    let args = BenchArgs {
        time: args.time || args.model.is_some(),
        ..args
    };
    if args.windows.0.iter().any(|&w| w != c) && args.sweep_b.is_some() {
        bail!("--sweep-b needs equal window lengths");
    }
    let model = match (&args.model, &args.config) {
        (Some(m), Some(cfg)) => Some(Model::load(m, ModelConfig::load(cfg)?)?),
        _ => None,
    };
    let bs = args.sweep_b.clone().map_or_else(|| vec![args.windows.0.len()], |l| l.0);
    let mut rows = Vec::new();
    for &b in &bs {
        if b == 0 {
            bail!("window counts must be at least 1");
        }
        let windows = if args.sweep_b.is_some() {
            vec![c; b]
        } else {
            args.windows.0.clone()
        };
        let capacity = windows.iter().max().copied().unwrap_or(0) + args.task;
        let layout = WindowLayout::new(windows.clone(), args.task, capacity, false)?;
        let n = layout.total_tokens();
        let t = Instant::now();
        let mask = build_mask(&layout);
        let mask_build_us = args.time.then(|| t.elapsed().as_secs_f64() * 1e6);
        if mask.count_allowed() != allowed_pair_count(&layout) {
            bail!("mask popcount disagrees with the closed-form pair count");
        }
        let encode_decode_ms = match &model {
            Some(m) => {
                let vocab = m.config().vocab_size as u32;
                let win: Vec<Vec<u32>> = windows
                    .iter()
                    .map(|&len| (0..len as u32).map(|i| i % vocab).collect())
                    .collect();
                let task: Vec<u32> = (0..args.task as u32).map(|i| (i * 7) % vocab).collect();
                let t = Instant::now();
                let ctx = ParallelContext::encode(m, &win, m.config().bos_token_id)?;
                ctx.decode(m, &task)?;
                Some(t.elapsed().as_secs_f64() * 1e3)
            }
            None => None,
        };
        rows.push(BenchRow {
            b,
            total_tokens: n,
            allowed_pairs: allowed_pair_count(&layout),
            dense_causal_pairs: n * (n + 1) / 2,
            mask_build_us,
            encode_decode_ms,
        });
    }
    let (slope, intercept, residual) = if args.sweep_b.is_some() && rows.len() >= 2 {
        let (x0, y0) = (rows[0].b as i64, rows[0].allowed_pairs as i64);
        let (x1, y1) = (rows[1].b as i64, rows[1].allowed_pairs as i64);
        let slope = (y1 - y0) / (x1 - x0);
        let intercept = y0 - slope * x0;
        let residual = rows
            .iter()
            .map(|r| (r.allowed_pairs as i64 - (slope * r.b as i64 + intercept)).unsigned_abs())
            .max();
        (Some(slope), Some(intercept), residual)
    } else {
        (None, None, None)
    };
    for r in &rows {
        eprintln!(
            "B={}\ttokens={}\tallowed={}\tdense={}",
            r.b, r.total_tokens, r.allowed_pairs, r.dense_causal_pairs
        );
    }
    emit_json(
        &args.out.out,
        &BenchOutput {
            window_length: c,
            task_length: args.task,
            rows,
            slope,
            intercept,
            max_affine_residual: residual,
        },
    )
}

fn init_weights(args: InitArgs) -> Result<()> {
    let config = ModelConfig::load(&args.config)?;
    let model = Model::random(config, args.seed, args.std)?;
    let bytes = model.weights().to_container().to_bytes()?;
    let dir = match args.out.parent() {
        Some(d) if !d.as_os_str().is_empty() => d,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(&bytes)?;
    tmp.persist(&args.out)
        .with_context(|| format!("writing {}", args.out.display()))?;
    let kind = match model.config().positional_kind {
        PositionalKind::LearnedAbsolute => "learned",
        PositionalKind::Rotary => "rotary",
    };
    eprintln!("wrote {} ({} bytes, {kind} positions)", args.out.display(), bytes.len());
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Generate(a) => generate(a),
        Command::Icl(a) => icl(a),
        Command::MaskDump(a) => mask_dump(a),
        Command::Pack(a) => pack_cmd(a),
        Command::Bench(a) => bench(a),
        Command::SweepB(a) => sweep(a),
        Command::InitWeights(a) => init_weights(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let msg = format!("{e:#}").replace('\n', " ");
            eprintln!("error: {msg}");
            ExitCode::FAILURE
        }
    }
}
