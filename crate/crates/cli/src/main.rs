//! `vpn`: verify a classifier for data-poisoning backdoors.
//!
//! Exit codes: 10 poisoned, 20 poison-free, 30 inconclusive (from `verify`),
//! 0 for the other commands, 1 for usage, configuration or data errors.

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde_json::json;
use vpn_core::data::{load_csv, load_idx, load_idx_images, select_test_suite, write_idx_images, write_idx_labels};
use vpn_core::eval::{attack_success_rate, transfer_evaluate};
use vpn_core::trigger::apply_trigger;
use vpn_core::verify::{solve_trigger_for_label, vpn_verify, QueryOutcome};
use vpn_core::{
    Dataset, Network, RunReport, SearchMode, SuiteOptions, TestSuite, TriggerRegion, TriggerSpec,
    Verdict, VpnConfig,
};

const POISONED: u8 = 10;
const POISON_FREE: u8 = 20;
const INCONCLUSIVE: u8 = 30;

#[derive(Parser)]
#[command(name = "vpn", version, about = "Backdoor trigger synthesis and poison-freedom proofs")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Search for a trigger that reroutes the test suite, or prove none exists.
    Verify(VerifyArgs),
    /// Measure the attack success rate of a trigger file.
    CheckTrigger(CheckArgs),
    /// Write a copy of an image file with a trigger stamped on every image.
    ApplyTrigger(ApplyArgs),
    /// Run a single (image, position, label) query against the suite.
    SolveOne(SolveOneArgs),
}

#[derive(Args)]
struct DataArgs {
    /// IDX image file, or a CSV file of `label,pixels...` rows.
    #[arg(long)]
    data: PathBuf,
    /// IDX label file; not needed for CSV data.
    #[arg(long)]
    labels: Option<PathBuf>,
}

#[derive(Args)]
struct SuiteArgs {
    #[arg(long, default_value_t = 16)]
    suite_size: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Sample the suite without class balancing.
    #[arg(long)]
    no_stratify: bool,
}

#[derive(Args)]
struct SearchArgs {
    /// Suite members a trigger may miss.
    #[arg(long, default_value_t = 0)]
    k: usize,
    #[arg(long, default_value_t = 1e-6)]
    delta: f64,
    /// Seconds per query.
    #[arg(long, default_value_t = 1800.0)]
    per_query_time: f64,
    /// Seconds for the whole run.
    #[arg(long)]
    total_time: Option<f64>,
    #[arg(long, default_value_t = 0.05)]
    r_excl: f64,
    #[arg(long, default_value_t = 100)]
    max_rounds: usize,
    #[arg(long, default_value_t = 1.0 / 512.0)]
    min_width: f64,
    #[arg(long, default_value_t = 2_000_000)]
    max_nodes: usize,
    /// Round synthesized values to multiples of 1/255 when they still work.
    #[arg(long)]
    quantize: bool,
    #[arg(long, default_value_t = 1)]
    workers: usize,
    /// Force a single worker for reproducible outcome logs.
    #[arg(long)]
    deterministic: bool,
}

#[derive(Args)]
struct Output {
    /// Report path; standard output when absent.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct VerifyArgs {
    #[arg(long)]
    model: PathBuf,
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    suite: SuiteArgs,
    #[command(flatten)]
    search: SearchArgs,
    #[arg(long, default_value_t = 3)]
    trigger_size: usize,
    #[arg(long, default_value_t = 1)]
    stride: usize,
    #[arg(long, default_value = "iterative", value_parser = ["iterative", "joint"])]
    mode: String,
    /// Comma-separated labels to try, in order.
    #[arg(long, value_delimiter = ',')]
    label_order: Option<Vec<usize>>,
    /// Search labels already predicted for most of the suite like any other.
    #[arg(long)]
    keep_vacuous_labels: bool,
    /// Do not try to flip a base image to its own label.
    #[arg(long)]
    skip_base_label: bool,
    #[command(flatten)]
    output: Output,
}

#[derive(Args)]
struct CheckArgs {
    #[arg(long)]
    model: PathBuf,
    /// Identifier recorded in the report; defaults to the model path.
    #[arg(long)]
    model_id: Option<String>,
    #[command(flatten)]
    data: DataArgs,
    /// JSON trigger: {"row":r,"col":c,"size":s,"values":[...]}.
    #[arg(long)]
    trigger: PathBuf,
    #[arg(long)]
    target: usize,
    /// Further models to replay the trigger on.
    #[arg(long)]
    transfer_model: Vec<PathBuf>,
    #[command(flatten)]
    output: Output,
}

#[derive(Args)]
struct ApplyArgs {
    /// IDX image file.
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    trigger: PathBuf,
    #[arg(long)]
    out_images: PathBuf,
    /// Label file to copy alongside the output.
    #[arg(long, requires = "out_labels")]
    labels: Option<PathBuf>,
    #[arg(long, requires = "labels")]
    out_labels: Option<PathBuf>,
}

#[derive(Args)]
struct SolveOneArgs {
    #[arg(long)]
    model: PathBuf,
    /// Index of the base image within the selected suite.
    #[arg(long)]
    image_index: usize,
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    suite: SuiteArgs,
    #[command(flatten)]
    search: SearchArgs,
    #[arg(long)]
    row: usize,
    #[arg(long)]
    col: usize,
    #[arg(long, default_value_t = 3)]
    trigger_size: usize,
    #[arg(long)]
    target: usize,
    #[command(flatten)]
    output: Output,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("VPN_LOG", "warn"))
        .format_timestamp(None)
        .init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = match cli.command {
        Command::Verify(a) => cmd_verify(a),
        Command::CheckTrigger(a) => cmd_check_trigger(a).map(|()| 0),
        Command::ApplyTrigger(a) => cmd_apply_trigger(a).map(|()| 0),
        Command::SolveOne(a) => cmd_solve_one(a).map(|()| 0),
    };
    match result {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

fn exit_code(verdict: &Verdict) -> u8 {
    match verdict {
        Verdict::Poisoned { .. } => POISONED,
        Verdict::PoisonFree { .. } => POISON_FREE,
        Verdict::Inconclusive { .. } => INCONCLUSIVE,
    }
}

fn load_model(path: &Path) -> Result<Network> {
    let file = File::open(path).with_context(|| format!("opening model {}", path.display()))?;
    Network::load(BufReader::new(file)).with_context(|| format!("loading model {}", path.display()))
}

fn load_data(args: &DataArgs, net: &Network) -> Result<Dataset> {
    let open = |p: &Path| File::open(p).with_context(|| format!("opening {}", p.display()));
    let is_csv = args
        .data
        .extension()
        .is_some_and(|e| e.eq_ignore_ascii_case("csv"));
    let data = if is_csv {
        load_csv(BufReader::new(open(&args.data)?), net.input_shape())
    } else {
        let Some(labels) = &args.labels else {
            bail!("--labels is required for IDX data");
        };
        load_idx(BufReader::new(open(&args.data)?), BufReader::new(open(labels)?))
    }
    .with_context(|| format!("loading data {}", args.data.display()))?;
    if data.shape() != net.input_shape() {
        bail!(
            "data images are {} but the model expects {}",
            data.shape(),
            net.input_shape()
        );
    }
    Ok(data)
}

fn load_trigger(path: &Path) -> Result<TriggerSpec> {
    let text = std::fs::read_to_string(path)
        .with_context(|| format!("reading trigger {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing trigger {}", path.display()))
}

fn suite_options(s: &SuiteArgs, k: usize) -> SuiteOptions {
    SuiteOptions {
        size: s.suite_size,
        seed: s.seed,
        stratify: !s.no_stratify,
        k_hint: Some(k),
    }
}

fn search_config(s: &SearchArgs, trigger_size: usize) -> VpnConfig {
    VpnConfig {
        k: s.k,
        trigger_size,
        delta: s.delta,
        per_query_time: s.per_query_time,
        total_time: s.total_time,
        r_excl: s.r_excl,
        max_iterative_rounds: s.max_rounds,
        min_width: s.min_width,
        max_nodes: s.max_nodes,
        quantize: s.quantize,
        workers: if s.deterministic { 1 } else { s.workers },
        ..VpnConfig::default()
    }
}

fn build_suite(net: &Network, data: &Dataset, opts: SuiteOptions, k: usize) -> Result<TestSuite> {
    if k >= opts.size {
        bail!("k = {k} must be below the suite size {}", opts.size);
    }
    Ok(select_test_suite(net, data, opts)?)
}

fn write_report(report: &RunReport, out: &Output) -> Result<()> {
    let text = report.to_json();
    match &out.out {
        Some(path) => std::fs::write(path, text + "\n")
            .with_context(|| format!("writing report {}", path.display())),
        None => {
            let mut stdout = std::io::stdout().lock();
            writeln!(stdout, "{text}")?;
            Ok(())
        }
    }
}

fn path_str(p: &Path) -> String {
    p.display().to_string()
}

fn cmd_verify(a: VerifyArgs) -> Result<u8> {
    let start = Instant::now();
    let net = load_model(&a.model)?;
    let data = load_data(&a.data, &net)?;
    let opts = suite_options(&a.suite, a.search.k);
    let cfg = VpnConfig {
        stride: a.stride,
        mode: a.mode.parse::<SearchMode>()?,
        label_order: a.label_order.clone(),
        skip_vacuous_labels: !a.keep_vacuous_labels,
        skip_base_label: a.skip_base_label,
        ..search_config(&a.search, a.trigger_size)
    };
    let suite = build_suite(&net, &data, opts, cfg.k)?;
    cfg.validate(&net, suite.len())?;

    let mut report = RunReport::new(
        "verify",
        json!({
            "model": path_str(&a.model),
            "data": path_str(&a.data.data),
            "labels": a.data.labels.as_deref().map(path_str),
            "suite": opts,
            "search": cfg,
        }),
    );
    report.suite_indices = suite.source_indices();
    report.warnings = suite.warnings.clone();

    let (verdict, outcomes) = vpn_verify(&net, &suite, &cfg)?;
    if let Verdict::Poisoned {
        trigger, target, ..
    } = &verdict
    {
        let (region, values) = trigger.resolve(net.input_shape())?;
        match attack_success_rate(&net, &data, &region, &values, *target) {
            Ok(r) => report.attack_reports.push(r.with_model_id(path_str(&a.model))),
            Err(vpn_core::Error::EmptyDataset) => report
                .warnings
                .push(format!("no images outside class {target}; attack success rate not measured")),
            Err(e) => return Err(e.into()),
        }
    }
    let code = exit_code(&verdict);
    report.verdict = Some(verdict);
    report.set_outcomes(outcomes);
    report.wall_time = start.elapsed().as_secs_f64();
    write_report(&report, &a.output)?;
    Ok(code)
}

fn cmd_check_trigger(a: CheckArgs) -> Result<()> {
    let start = Instant::now();
    let net = load_model(&a.model)?;
    let data = load_data(&a.data, &net)?;
    let spec = load_trigger(&a.trigger)?;
    let (region, values) = spec.resolve(net.input_shape())?;
    let id = a.model_id.clone().unwrap_or_else(|| path_str(&a.model));
    let direct = attack_success_rate(&net, &data, &region, &values, a.target)?.with_model_id(id);
    let mut report = RunReport::new(
        "check-trigger",
        json!({
            "model": path_str(&a.model),
            "data": path_str(&a.data.data),
            "labels": a.data.labels.as_deref().map(path_str),
            "trigger": spec,
            "target": a.target,
            "transfer_models": a.transfer_model.iter().map(|p| path_str(p)).collect::<Vec<_>>(),
        }),
    );
    for path in &a.transfer_model {
        let other = load_model(path)?;
        let r = transfer_evaluate(&direct, &other, &path_str(path), &data)
            .with_context(|| format!("replaying the trigger on {}", path.display()))?;
        report.attack_reports.push(r);
    }
    report.attack_reports.insert(0, direct);
    report.wall_time = start.elapsed().as_secs_f64();
    write_report(&report, &a.output)
}

fn cmd_apply_trigger(a: ApplyArgs) -> Result<()> {
    let file = File::open(&a.data).with_context(|| format!("opening {}", a.data.display()))?;
    let (shape, images) = load_idx_images(BufReader::new(file))
        .with_context(|| format!("loading images {}", a.data.display()))?;
    let spec = load_trigger(&a.trigger)?;
    let (region, values) = spec.resolve(shape)?;
    let stamped = images
        .iter()
        .map(|img| apply_trigger(img, &region, &values))
        .collect::<vpn_core::Result<Vec<_>>>()?;
    let mut out = BufWriter::new(
        File::create(&a.out_images)
            .with_context(|| format!("creating {}", a.out_images.display()))?,
    );
    write_idx_images(&mut out, shape, &stamped)?;
    out.flush()?;
    if let (Some(labels), Some(out_labels)) = (&a.labels, &a.out_labels) {
        let data = load_idx(
            BufReader::new(File::open(&a.data)?),
            BufReader::new(
                File::open(labels).with_context(|| format!("opening {}", labels.display()))?,
            ),
        )?;
        let mut out = BufWriter::new(
            File::create(out_labels)
                .with_context(|| format!("creating {}", out_labels.display()))?,
        );
        write_idx_labels(&mut out, data.labels())?;
        out.flush()?;
    }
    log::info!("stamped {} images", stamped.len());
    Ok(())
}

fn cmd_solve_one(a: SolveOneArgs) -> Result<()> {
    let start = Instant::now();
    let net = load_model(&a.model)?;
    let data = load_data(&a.data, &net)?;
    let opts = suite_options(&a.suite, a.search.k);
    let cfg = search_config(&a.search, a.trigger_size);
    let suite = build_suite(&net, &data, opts, cfg.k)?;
    let Some(member) = suite.members.get(a.image_index) else {
        bail!(
            "image index {} out of range for a suite of {}",
            a.image_index,
            suite.len()
        );
    };
    let region = TriggerRegion::new(a.row, a.col, a.trigger_size, net.input_shape().channels);
    region.check_within(net.input_shape())?;
    if a.target >= net.label_count() {
        bail!("target {} out of range for {} labels", a.target, net.label_count());
    }
    let attempt = solve_trigger_for_label(&net, &suite, cfg.k, &member.image, &region, a.target, &cfg)?;

    let mut report = RunReport::new(
        "solve-one",
        json!({
            "model": path_str(&a.model),
            "data": path_str(&a.data.data),
            "labels": a.data.labels.as_deref().map(path_str),
            "suite": opts,
            "search": cfg,
            "image_index": a.image_index,
            "region": region,
            "target": a.target,
        }),
    );
    report.suite_indices = suite.source_indices();
    report.warnings = suite.warnings.clone();
    report.set_outcomes(vec![QueryOutcome {
        input: Some(a.image_index),
        region,
        target: a.target,
        status: attempt.status,
        rounds: attempt.rounds,
        nodes: attempt.stats.nodes,
        pruned: attempt.stats.pruned,
        wall_time: start.elapsed().as_secs_f64(),
    }]);
    report.wall_time = start.elapsed().as_secs_f64();
    write_report(&report, &a.output)
}
