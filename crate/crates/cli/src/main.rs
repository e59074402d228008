use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use adagraph::benchmark::{
    self, generate_family, leave_one_out_pairs, run_continuous, run_pda_grid, run_stream, summarize_sweep,
    sweep_auxiliary_count, write_continuous_csv, write_results_csv, write_stream_csv, ContinuousVariant,
    DomainFamilySpec, PdaContext,
};
use adagraph::checkpoint::Checkpoint;
use adagraph::config::{ExperimentConfig, SEED_ENV};
use adagraph::prediction::{predict_from_image, predict_from_metadata};
use adagraph::{AdaGraphError, DomainGraph, DomainId, Metadata, NodeRole};
use anyhow::{anyhow, Context};
use clap::{Args, Parser, Subcommand};
use serde_json::{Map, Value};

#[derive(Parser)]
#[command(name = "adagraph", version, about = "Graph-based predictive domain adaptation experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Leave-one-out predictive adaptation over the benchmark family.
    Pda(ConfigArgs),
    /// Continuous adaptation on a drifting stream.
    Continuous(ConfigArgs),
    /// Accuracy versus number of auxiliary domains.
    Sweep(ConfigArgs),
    /// Class probabilities from a saved checkpoint.
    Predict(PredictArgs),
    /// Prequential classification of a sample file in arrival order.
    Stream(StreamArgs),
    /// Gradient checks and oracle equivalences.
    Selftest,
}

#[derive(Args)]
struct ConfigArgs {
    /// JSON config file; flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override any config key, e.g. `--set epochs_stage2=3`. Values parse as
    /// JSON, falling back to a string.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Variant to run (repeatable).
    #[arg(long = "variant")]
    variants: Vec<String>,
    /// Seeds: `3`, `0..4` (inclusive) or a comma list (repeatable).
    #[arg(long = "seed")]
    seeds: Vec<String>,
    #[arg(long)]
    source: Option<u32>,
    #[arg(long)]
    target: Option<u32>,
    #[arg(long)]
    sigma: Option<f64>,
    #[arg(long)]
    lambda: Option<f64>,
    /// Run directory.
    #[arg(long, short)]
    output: Option<PathBuf>,
}

#[derive(Args)]
struct CheckpointArgs {
    /// Run directory holding `checkpoint.json` and `config.json`.
    #[arg(long, conflicts_with = "checkpoint")]
    run: Option<PathBuf>,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
}

#[derive(Args)]
struct PredictArgs {
    #[command(flatten)]
    source: CheckpointArgs,
    /// Target metadata as comma-separated floats.
    #[arg(long)]
    metadata: Option<String>,
    /// Sample CSV (`x0,x1,..[,label]`). Without `--metadata`, parameters are
    /// mixed per sample by the checkpoint's domain classifier.
    #[arg(long)]
    inputs: Option<PathBuf>,
    /// Output CSV; stdout when absent.
    #[arg(long, short)]
    output: Option<PathBuf>,
}

#[derive(Args)]
struct StreamArgs {
    #[command(flatten)]
    source: CheckpointArgs,
    /// Sample CSV in arrival order.
    #[arg(long)]
    input: PathBuf,
    /// One of baseline, refine_stats, refine_full.
    #[arg(long, default_value = "refine_full")]
    mode: String,
    /// Start from the target model regressed for this metadata instead of
    /// the source entry.
    #[arg(long)]
    metadata: Option<String>,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    #[arg(long, short)]
    output: Option<PathBuf>,
}

/// Errors that exit with status 2.
#[derive(Debug)]
struct ConfigFailure(anyhow::Error);

impl std::fmt::Display for ConfigFailure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{:#}", self.0)
    }
}

impl std::error::Error for ConfigFailure {}

fn config_err(e: impl Into<anyhow::Error>) -> anyhow::Error {
    ConfigFailure(e.into()).into()
}

fn parse_seeds(specs: &[String]) -> anyhow::Result<Vec<u64>> {
    let mut out = Vec::new();
    for spec in specs {
        for part in spec.split(',').map(str::trim).filter(|p| !p.is_empty()) {
            if let Some((a, b)) = part.split_once("..") {
                let (a, b): (u64, u64) = (a.parse()?, b.trim_start_matches('=').parse()?);
                if a > b {
                    return Err(anyhow!("empty seed range `{part}`"));
                }
                out.extend(a..=b);
            } else {
                out.push(part.parse()?);
            }
        }
    }
    Ok(out)
}

fn parse_metadata(text: &str) -> anyhow::Result<Metadata> {
    let values = text
        .split(',')
        .map(|v| v.trim().parse::<f64>())
        .collect::<Result<Vec<_>, _>>()
        .with_context(|| format!("metadata `{text}` is not a comma-separated list of numbers"))?;
    Ok(Metadata::new(values)?)
}

fn set_overrides(set: &[String], into: &mut Map<String, Value>) -> anyhow::Result<()> {
    for kv in set {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| anyhow!("`--set {kv}` is not KEY=VALUE"))?;
        let value = serde_json::from_str(v).unwrap_or_else(|_| Value::String(v.to_string()));
        into.insert(k.trim().to_string(), value);
    }
    Ok(())
}

fn resolve_config(
    file: Option<&Path>,
    set: &[String],
    build: impl FnOnce(&mut Map<String, Value>) -> anyhow::Result<()>,
) -> anyhow::Result<ExperimentConfig> {
    let text = file
        .map(|p| fs::read_to_string(p).with_context(|| format!("reading config {}", p.display())))
        .transpose()
        .map_err(config_err)?;
    let mut overrides = Map::new();
    set_overrides(set, &mut overrides).map_err(config_err)?;
    build(&mut overrides).map_err(config_err)?;
    let env_seed = std::env::var(SEED_ENV).ok();
    ExperimentConfig::resolve(text.as_deref(), overrides, env_seed.as_deref()).map_err(config_err)
}

impl ConfigArgs {
    fn resolve(&self, variant_key: &str) -> anyhow::Result<ExperimentConfig> {
        resolve_config(self.config.as_deref(), &self.set, |o| {
            if !self.variants.is_empty() {
                o.insert(variant_key.into(), Value::from(self.variants.clone()));
            }
            if !self.seeds.is_empty() {
                o.insert("seeds".into(), Value::from(parse_seeds(&self.seeds)?));
            }
            if let Some(s) = self.source {
                o.insert("source".into(), Value::from(s));
            }
            if let Some(t) = self.target {
                o.insert("target".into(), Value::from(t));
            }
            if let Some(s) = self.sigma {
                o.insert("sigma".into(), Value::from(s));
            }
            if let Some(l) = self.lambda {
                o.insert("lambda".into(), Value::from(l));
            }
            if let Some(p) = &self.output {
                o.insert("output".into(), Value::from(p.to_string_lossy().into_owned()));
            }
            Ok(())
        })
    }
}

/// Creates the run directory and writes the resolved config into it.
fn prepare_run(cfg: &ExperimentConfig) -> anyhow::Result<PathBuf> {
    let dir = cfg.output.clone();
    fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    fs::write(dir.join("config.json"), cfg.to_json()?)?;
    Ok(dir)
}

fn create(path: &Path) -> anyhow::Result<std::io::BufWriter<fs::File>> {
    Ok(std::io::BufWriter::new(
        fs::File::create(path).with_context(|| format!("creating {}", path.display()))?,
    ))
}

fn cmd_pda(args: &ConfigArgs) -> anyhow::Result<()> {
    let cfg = args.resolve("variants")?;
    let protocol = cfg.protocol()?;
    let spec = cfg.family();
    let family = generate_family(&spec, cfg.batch_size)?;
    let mut pairs = leave_one_out_pairs(&family, cfg.min_angle, cfg.source.map(DomainId))?;
    if let Some(t) = cfg.target {
        pairs.retain(|p| p.1 == DomainId(t));
    }
    if pairs.is_empty() {
        return Err(config_err(anyhow!("no (source, target) pair satisfies the filters")));
    }
    let dir = prepare_run(&cfg)?;
    let runs = run_pda_grid(&spec, &protocol, &cfg.variants, &pairs, &cfg.seeds)?;
    let rows: Vec<_> = runs.into_iter().map(|r| r.row).collect();
    write_results_csv(&rows, create(&dir.join("results.csv"))?)?;

    let (s, t) = pairs[0];
    let ctx = PdaContext::new(&family, s, &protocol)?;
    ctx.checkpoint(t)?.save(&dir.join("checkpoint.json"))?;

    for (variant, mean, n) in benchmark::mean_by_variant(&rows) {
        println!("{variant}\t{mean:.4}\t({n} runs)");
    }
    Ok(())
}

fn cmd_continuous(args: &ConfigArgs) -> anyhow::Result<()> {
    let cfg = args.resolve("continuous_variants")?;
    let stream = cfg.stream();
    let dir = prepare_run(&cfg)?;
    let mut all = Vec::new();
    for &seed in &cfg.seeds {
        let protocol = cfg.protocol()?.with_seed(seed);
        let family = DomainFamilySpec {
            seed,
            ..cfg.family()
        };
        let runs = run_continuous(&family, &stream, &cfg.continuous_variants, &protocol)?;
        benchmark::write_samples_csv(
            &stream.generate(&family)?,
            create(&dir.join(format!("stream_input_seed{seed}.csv")))?,
        )?;
        for run in &runs {
            write_stream_csv(
                &run.records,
                create(&dir.join(format!("stream_{}_seed{seed}.csv", run.variant)))?,
            )?;
            println!("{}\tseed {seed}\t{:.4}", run.variant, run.accuracy);
        }
        all.extend(runs);
        if seed == cfg.seeds[0] {
            let net = benchmark::train_stream_source(&family, &stream, &protocol)?;
            let mut graph = DomainGraph::new(family.metadata_dim(), protocol.kernel)?;
            let mut m = vec![stream.start_deg / 360.0];
            m.resize(family.metadata_dim(), 0.0);
            graph.add_node(DomainId(0), Metadata::new(m)?, NodeRole::Source)?;
            graph.assign_params(DomainId(0), net.param_set(DomainId(0))?)?;
            Checkpoint::new(DomainId(0), &graph, &net).save(&dir.join("checkpoint.json"))?;
        }
    }
    write_continuous_csv(&all, create(&dir.join("results.csv"))?)?;
    Ok(())
}

fn cmd_sweep(args: &ConfigArgs) -> anyhow::Result<()> {
    let cfg = args.resolve("variants")?;
    let protocol = cfg.protocol()?;
    let spec = cfg.family();
    let source = DomainId(cfg.source.unwrap_or(0));
    let target = DomainId(cfg.target.unwrap_or((cfg.n_domains / 2) as u32));
    if source == target {
        return Err(config_err(anyhow!("source and target must differ")));
    }
    let dir = prepare_run(&cfg)?;
    let rows = sweep_auxiliary_count(&spec, source, target, &cfg.sweep_counts, cfg.sweep_repeats, &protocol)?;
    let mut out = csv::Writer::from_writer(create(&dir.join("results.csv"))?);
    for r in &rows {
        out.serialize(r)?;
    }
    out.flush()?;
    let family = generate_family(&spec, cfg.batch_size)?;
    PdaContext::new(&family, source, &protocol)?
        .checkpoint(target)?
        .save(&dir.join("checkpoint.json"))?;
    for s in summarize_sweep(&rows) {
        println!("count {}\tmean {:.4}\tstd {:.4}\t({} repeats)", s.count, s.mean, s.std, s.repeats);
    }
    Ok(())
}

fn load_checkpoint(args: &CheckpointArgs) -> anyhow::Result<(Checkpoint, Option<PathBuf>)> {
    let path = match (&args.checkpoint, &args.run) {
        (Some(p), _) => p.clone(),
        (None, Some(run)) => run.join("checkpoint.json"),
        (None, None) => return Err(config_err(anyhow!("pass --run or --checkpoint"))),
    };
    let ckpt = Checkpoint::load(&path).with_context(|| format!("loading {}", path.display()))?;
    Ok((ckpt, args.run.as_ref().map(|r| r.join("config.json"))))
}

fn output(path: Option<&Path>) -> anyhow::Result<Box<dyn Write>> {
    Ok(match path {
        Some(p) => Box::new(create(p)?),
        None => Box::new(std::io::stdout().lock()),
    })
}

fn cmd_predict(args: &PredictArgs) -> anyhow::Result<()> {
    let (ckpt, run_config) = load_checkpoint(&args.source)?;
    let (graph, net) = ckpt.restore()?;
    let metadata = args.metadata.as_deref().map(parse_metadata).transpose().map_err(config_err)?;
    let samples = match (&args.inputs, &metadata, &run_config) {
        (Some(p), _, _) => benchmark::read_samples_csv(create_reader(p)?, DomainId(u32::MAX))?,
        (None, Some(m), Some(cfg_path)) => {
            let cfg = resolve_config(Some(cfg_path), &[], |_| Ok(()))?;
            cfg.family().draw(m, cfg.samples_per_domain, DomainId(u32::MAX))?
        }
        _ => {
            return Err(config_err(anyhow!(
                "pass --inputs, or --metadata together with --run"
            )))
        }
    };
    let x = adagraph::network::stack_all(&samples);
    let probs = match metadata {
        Some(m) => predict_from_metadata(&graph, &net, m)?.predict(x.view())?,
        None => {
            let classifier = ckpt
                .classifier()?
                .ok_or_else(|| config_err(anyhow!("checkpoint has no domain classifier; pass --metadata")))?;
            let mut p = ndarray::Array2::zeros((x.nrows(), net.num_classes()));
            for (i, row) in x.rows().into_iter().enumerate() {
                p.row_mut(i).assign(&predict_from_image(&graph, &net, &classifier, row)?);
            }
            p
        }
    };
    let mut out = csv::Writer::from_writer(output(args.output.as_deref())?);
    let mut header = vec!["idx".to_string()];
    header.extend((0..probs.ncols()).map(|c| format!("p{c}")));
    out.write_record(&header)?;
    for (i, row) in probs.rows().into_iter().enumerate() {
        let mut rec = vec![i.to_string()];
        rec.extend(row.iter().map(|p| p.to_string()));
        out.write_record(&rec)?;
    }
    out.flush()?;
    Ok(())
}

fn create_reader(path: &Path) -> anyhow::Result<fs::File> {
    fs::File::open(path).with_context(|| format!("opening {}", path.display()))
}

fn cmd_stream(args: &StreamArgs) -> anyhow::Result<()> {
    let mode: ContinuousVariant = args.mode.parse().map_err(config_err)?;
    let (ckpt, run_config) = load_checkpoint(&args.source)?;
    let file = args.config.clone().or(run_config);
    let cfg = resolve_config(file.as_deref(), &args.set, |_| Ok(()))?;
    let protocol = cfg.protocol()?;
    let (graph, net) = ckpt.restore()?;
    let samples = benchmark::read_samples_csv(create_reader(&args.input)?, DomainId(u32::MAX))?;
    let records = match args.metadata.as_deref() {
        Some(text) => {
            let m = parse_metadata(text).map_err(config_err)?;
            let model = predict_from_metadata(&graph, &net, m)?;
            run_stream(&model.net, model.target, &samples, mode.mode(), &protocol)?
        }
        None => run_stream(&net, ckpt.source, &samples, mode.mode(), &protocol)?,
    };
    write_stream_csv(&records, output(args.output.as_deref())?)?;
    if let Some(acc) = records.last().and_then(|r| r.cum_acc) {
        eprintln!("prequential accuracy {acc:.4} over {} samples", records.len());
    }
    Ok(())
}

fn cmd_selftest() -> anyhow::Result<()> {
    let outcomes = adagraph::selftest::run();
    for c in &outcomes {
        println!("{} {}: {}", if c.passed { "PASS" } else { "FAIL" }, c.name, c.detail);
    }
    let failed = outcomes.iter().filter(|c| !c.passed).count();
    if failed > 0 {
        return Err(anyhow!("{failed} selftest check(s) failed"));
    }
    Ok(())
}

fn is_config_error(e: &anyhow::Error) -> bool {
    e.chain().any(|c| {
        c.is::<ConfigFailure>() || matches!(c.downcast_ref::<AdaGraphError>(), Some(AdaGraphError::Config(_)))
    })
}

/// A closed downstream pipe (e.g. `| head`) is not an error.
fn is_broken_pipe(e: &anyhow::Error) -> bool {
    e.chain().any(|c| {
        c.downcast_ref::<std::io::Error>()
            .is_some_and(|io| io.kind() == std::io::ErrorKind::BrokenPipe)
            || c.downcast_ref::<csv::Error>().is_some_and(|e| {
                matches!(e.kind(), csv::ErrorKind::Io(io) if io.kind() == std::io::ErrorKind::BrokenPipe)
            })
    })
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Pda(a) => cmd_pda(a),
        Command::Continuous(a) => cmd_continuous(a),
        Command::Sweep(a) => cmd_sweep(a),
        Command::Predict(a) => cmd_predict(a),
        Command::Stream(a) => cmd_stream(a),
        Command::Selftest => cmd_selftest(),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) if is_broken_pipe(&e) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            if is_config_error(&e) {
                ExitCode::from(2)
            } else {
                ExitCode::FAILURE
            }
        }
    }
}
