use std::fs::File;
use std::io::{self, Write};
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use kdc::assign::AssignRule;
use kdc::bench;
use kdc::dataio::{self, partition_sites, synth, CsvOptions, Dataset, RngStream, SiteLayout};
use kdc::framework::{self, best_row, median, trial_seed, PipelineConfig, SweepGrid};
use kdc::ikernel::KernelParams;
use kdc::metrics::Scores;
use kdc::plugins::{PluginConfig, TauChoice};
use kdc::simnet::{self, RunReport};
use kdc::KdcError;

#[derive(Parser)]
#[command(name = "kdc", version, about = "Distributed clustering with a distributional kernel")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the pipeline and print a JSON report.
    Run(RunArgs),
    /// Evaluate a parameter grid and write a CSV table.
    Sweep(SweepArgs),
    /// Check that distributed runs reproduce the centralized labels.
    Equivalence(EquivalenceArgs),
    /// Write coordinates, true and predicted labels as CSV.
    DumpAssignments(DumpArgs),
    /// Write a bundled synthetic dataset as CSV.
    GenData(GenArgs),
    /// Timing tables.
    #[command(subcommand)]
    Bench(BenchCommand),
}

#[derive(Args)]
struct DataArgs {
    /// CSV file, one point per row.
    #[arg(long)]
    data: PathBuf,
    /// The file has no header line.
    #[arg(long)]
    no_header: bool,
    /// Column holding ground-truth labels: an index, `last` or `none`.
    #[arg(long, default_value = "last")]
    label_column: String,
    /// Min-max scale every dimension to [0, 1] before clustering.
    #[arg(long)]
    normalize: bool,
}

#[derive(Clone, Copy, ValueEnum)]
enum PluginName {
    Kbcc,
    Kmeans,
    KernelKmeans,
    Dp,
}

#[derive(Clone, Copy, ValueEnum)]
enum AssignName {
    Distribution,
    Center,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeName {
    Centralized,
    Distributed,
}

#[derive(Args)]
struct PipelineArgs {
    #[arg(long)]
    k: usize,
    #[arg(long, value_enum, default_value = "kbcc")]
    plugin: PluginName,
    #[arg(long, value_enum, default_value = "distribution")]
    assign: AssignName,
    #[arg(long, default_value_t = 16)]
    psi: usize,
    #[arg(long, default_value_t = 200)]
    t: usize,
    /// kbcc threshold in [0, 1), or `auto`.
    #[arg(long, default_value = "auto")]
    tau: String,
    /// Subset size; defaults to min(n, 10000).
    #[arg(long)]
    s: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Iteration cap for the k-means plugins.
    #[arg(long, default_value_t = PluginConfig::DEFAULT_MAX_ITERS)]
    max_iters: usize,
    /// Density-peak cutoff as a fraction of pairwise distances.
    #[arg(long, default_value_t = PluginConfig::DEFAULT_DC_FRACTION)]
    dc: f64,
}

#[derive(Args)]
struct SiteArgs {
    #[arg(long, value_enum, default_value = "centralized")]
    mode: ModeName,
    #[arg(long, default_value_t = 20)]
    r: usize,
    /// Fraction of the data on site 1; even split when absent.
    #[arg(long)]
    skew: Option<f64>,
}

#[derive(Args)]
struct RunArgs {
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    pipeline: PipelineArgs,
    #[command(flatten)]
    sites: SiteArgs,
    #[arg(long, default_value_t = 5)]
    trials: usize,
    /// Write the report here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SweepArgs {
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    pipeline: PipelineArgs,
    #[arg(long, value_delimiter = ',', default_value = "4,8,16,32,64")]
    psis: Vec<usize>,
    #[arg(long, value_delimiter = ',', default_value = "200")]
    ts: Vec<usize>,
    #[arg(long, value_delimiter = ',', default_value = "0.1,0.2,0.3,0.4,0.5,0.6,0.7,0.8,0.9")]
    taus: Vec<f64>,
    #[arg(long, default_value_t = 5)]
    trials: usize,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct EquivalenceArgs {
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    pipeline: PipelineArgs,
    #[arg(long, value_delimiter = ',', default_value = "1,4,20")]
    rs: Vec<usize>,
    /// Site layouts: `even` or a site-1 fraction.
    #[arg(long, value_delimiter = ',', default_value = "even,0.5")]
    layouts: Vec<String>,
    /// Adds this offset to the distributed seed (negative control).
    #[arg(long, default_value_t = 0, hide = true)]
    seed_offset: u64,
}

#[derive(Args)]
struct DumpArgs {
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    pipeline: PipelineArgs,
    #[command(flatten)]
    sites: SiteArgs,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Fixture {
    JainLike,
    Complex9Like,
    Blobs,
    Scaling,
}

#[derive(Args)]
struct GenArgs {
    #[arg(long, value_enum)]
    name: Fixture,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Point count for `scaling`.
    #[arg(long, default_value_t = 100_000)]
    n: usize,
    /// Cluster count for `scaling`.
    #[arg(long, default_value_t = 10)]
    k: usize,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum BenchCommand {
    /// Step-2 and step-3 time against n with s fixed.
    Scaling(ScalingArgs),
    /// Centralized step 3 against the slowest site.
    PropertyB(PropertyBArgs),
}

#[derive(Args)]
struct BenchCommon {
    #[arg(long, default_value_t = 10)]
    k: usize,
    #[arg(long, default_value_t = 16)]
    psi: usize,
    #[arg(long, default_value_t = 100)]
    t: usize,
    #[arg(long, default_value_t = 2000)]
    s: usize,
    #[arg(long, value_enum, default_value = "kmeans")]
    plugin: PluginName,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Worker threads; 1 gives the cleanest timings.
    #[arg(long, default_value_t = 1)]
    threads: usize,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ScalingArgs {
    #[command(flatten)]
    common: BenchCommon,
    #[arg(long, value_delimiter = ',', default_value = "10000,100000,1000000")]
    sizes: Vec<usize>,
}

#[derive(Args)]
struct PropertyBArgs {
    #[command(flatten)]
    common: BenchCommon,
    #[arg(long, default_value_t = 100_000)]
    n: usize,
    #[arg(long, value_delimiter = ',', default_value = "1,2,5,20")]
    rs: Vec<usize>,
    #[arg(long)]
    skew: Option<f64>,
}

enum Failure {
    Usage(String),
    Pipeline(String),
}

impl From<KdcError> for Failure {
    fn from(e: KdcError) -> Self {
        Failure::Pipeline(e.to_string())
    }
}

impl From<io::Error> for Failure {
    fn from(e: io::Error) -> Self {
        Failure::Pipeline(e.to_string())
    }
}

type CmdResult = Result<(), Failure>;

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run(a) => cmd_run(a),
        Command::Sweep(a) => cmd_sweep(a),
        Command::Equivalence(a) => cmd_equivalence(a),
        Command::DumpAssignments(a) => cmd_dump(a),
        Command::GenData(a) => cmd_gen(a),
        Command::Bench(BenchCommand::Scaling(a)) => cmd_bench_scaling(a),
        Command::Bench(BenchCommand::PropertyB(a)) => cmd_bench_property_b(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(Failure::Pipeline(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
    }
}

fn output(path: &Option<PathBuf>) -> io::Result<Box<dyn Write>> {
    Ok(match path {
        Some(p) => Box::new(File::create(p)?),
        None => Box::new(io::stdout().lock()),
    })
}

fn load(args: &DataArgs) -> Result<Dataset, Failure> {
    let label_column = match args.label_column.as_str() {
        "none" => None,
        "last" => {
            let first = std::fs::read_to_string(&args.data)
                .map_err(|e| Failure::Pipeline(format!("{}: {e}", args.data.display())))?
                .lines()
                .find(|l| !l.trim().is_empty())
                .map(|l| l.split(',').count())
                .unwrap_or(1);
            Some(first - 1)
        }
        idx => Some(idx.parse().map_err(|_| Failure::Usage(format!("--label-column: {idx:?} is not an index, `last` or `none`")))?),
    };
    let ds = dataio::load_csv(&args.data, CsvOptions { label_column, has_header: !args.no_header })?;
    Ok(if args.normalize { dataio::normalize_unit_range(&ds) } else { ds })
}

fn plugin_config(name: PluginName, tau: TauChoice, max_iters: usize, dc: f64) -> PluginConfig {
    match name {
        PluginName::Kbcc => PluginConfig::Kbcc { tau },
        PluginName::Kmeans => PluginConfig::Kmeans { max_iters },
        PluginName::KernelKmeans => PluginConfig::KernelKmeans { max_iters },
        PluginName::Dp => PluginConfig::Dp { dc_fraction: dc },
    }
}

fn pipeline_config(p: &PipelineArgs) -> Result<PipelineConfig, Failure> {
    let tau = match p.tau.as_str() {
        "auto" => TauChoice::Auto,
        v => {
            let tau: f64 = v.parse().map_err(|_| Failure::Usage(format!("--tau: {v:?} is not a number or `auto`")))?;
            if !(0.0..1.0).contains(&tau) {
                return Err(Failure::Usage(format!("--tau {tau} outside [0, 1)")));
            }
            TauChoice::Fixed(tau)
        }
    };
    if p.k == 0 || p.psi == 0 || p.t == 0 {
        return Err(Failure::Usage("--k, --psi and --t must be positive".into()));
    }
    Ok(PipelineConfig {
        k: p.k,
        kernel: KernelParams { psi: p.psi, t: p.t },
        subset_size: p.s,
        plugin: plugin_config(p.plugin, tau, p.max_iters, p.dc),
        assign: match p.assign {
            AssignName::Distribution => AssignRule::Distribution,
            AssignName::Center => AssignRule::Center,
        },
        seed: p.seed,
    })
}

fn layout(skew: Option<f64>) -> Result<SiteLayout, Failure> {
    match skew {
        None => Ok(SiteLayout::Even),
        Some(p) if p > 0.0 && p < 1.0 => Ok(SiteLayout::Skewed(p)),
        Some(p) => Err(Failure::Usage(format!("--skew {p} outside (0, 1)"))),
    }
}

fn run_once(ds: &Dataset, cfg: &PipelineConfig, sites: &SiteArgs) -> Result<RunReport, Failure> {
    Ok(match sites.mode {
        ModeName::Centralized => simnet::run_centralized(ds, cfg)?,
        ModeName::Distributed => {
            let part = partition_sites(ds.len(), sites.r, layout(sites.skew)?, &RngStream::new(cfg.seed, "sites"))?;
            simnet::run_kdc(ds, &part, cfg)?
        }
    })
}

#[derive(Serialize)]
struct RunOutput {
    schema_version: u32,
    trials: Vec<RunReport>,
    mean: Option<Scores>,
    median: Option<Scores>,
}

fn cmd_run(a: RunArgs) -> CmdResult {
    let base = pipeline_config(&a.pipeline)?;
    if a.trials == 0 {
        return Err(Failure::Usage("--trials must be positive".into()));
    }
    layout(a.sites.skew)?;
    let ds = load(&a.data)?;
    let mut reports = Vec::with_capacity(a.trials);
    for i in 0..a.trials {
        let cfg = PipelineConfig { seed: trial_seed(base.seed, i), ..base };
        reports.push(run_once(&ds, &cfg, &a.sites)?);
    }
    let scores: Option<Vec<Scores>> = reports.iter().map(|r| r.scores).collect();
    let summary = scores.map(|s| framework::TrialSummary::from_scores(reports.iter().map(|r| r.config.seed).collect(), s));
    let out = RunOutput {
        schema_version: simnet::SCHEMA_VERSION,
        mean: summary.as_ref().map(|s| s.mean),
        median: summary.as_ref().map(|s| s.median),
        trials: reports,
    };
    let mut w = output(&a.out)?;
    serde_json::to_writer_pretty(&mut w, &out).map_err(|e| Failure::Pipeline(e.to_string()))?;
    writeln!(w)?;
    Ok(())
}

fn cmd_sweep(a: SweepArgs) -> CmdResult {
    let base = pipeline_config(&a.pipeline)?;
    if a.psis.is_empty() || a.ts.is_empty() || a.taus.is_empty() {
        return Err(Failure::Usage("empty sweep grid".into()));
    }
    if a.trials == 0 {
        return Err(Failure::Usage("--trials must be positive".into()));
    }
    let ds = load(&a.data)?;
    let truth = ds.labels().ok_or_else(|| Failure::Usage("sweep needs ground-truth labels".into()))?;
    let grid = SweepGrid { psis: a.psis, ts: a.ts, taus: a.taus };
    let rows = framework::sweep(ds.points(), truth, &base, &grid, a.trials)?;
    let best = best_row(&rows);
    let mut w = csv::Writer::from_writer(output(&a.out)?);
    let io_err = |e: csv::Error| Failure::Pipeline(e.to_string());
    w.write_record(["plugin", "psi", "t", "tau", "median_nmi", "mean_nmi", "median_ami", "median_ari", "median_f1", "failures", "best"])
        .map_err(io_err)?;
    for (i, row) in rows.iter().enumerate() {
        let pick = |f: fn(&Scores) -> f64| median(&row.scores.iter().map(|s| s.as_ref().map_or(0.0, f)).collect::<Vec<_>>());
        w.write_record([
            row.plugin.clone(),
            row.psi.to_string(),
            row.t.to_string(),
            row.tau.map_or_else(String::new, |t| t.to_string()),
            format!("{:.6}", row.median_nmi),
            format!("{:.6}", row.mean_nmi),
            format!("{:.6}", pick(|s| s.ami)),
            format!("{:.6}", pick(|s| s.ari)),
            format!("{:.6}", pick(|s| s.f1)),
            row.scores.iter().filter(|s| s.is_none()).count().to_string(),
            (Some(i) == best).to_string(),
        ])
        .map_err(io_err)?;
    }
    w.flush()?;
    Ok(())
}

fn cmd_equivalence(a: EquivalenceArgs) -> CmdResult {
    let cfg = pipeline_config(&a.pipeline)?;
    let layouts = a
        .layouts
        .iter()
        .map(|l| match l.as_str() {
            "even" => Ok(SiteLayout::Even),
            v => layout(Some(v.parse().map_err(|_| Failure::Usage(format!("--layouts: {v:?}")))?)),
        })
        .collect::<Result<Vec<_>, _>>()?;
    if a.rs.is_empty() || layouts.is_empty() {
        return Err(Failure::Usage("nothing to compare".into()));
    }
    let ds = load(&a.data)?;
    let central = simnet::run_centralized(&ds, &cfg)?;
    let dist_cfg = PipelineConfig { seed: cfg.seed.wrapping_add(a.seed_offset), ..cfg };
    let mut all = true;
    let mut out = io::stdout().lock();
    for &r in &a.rs {
        for &lay in &layouts {
            let part = partition_sites(ds.len(), r, lay, &RngStream::new(cfg.seed, "sites"))?;
            let rep = simnet::run_kdc(&ds, &part, &dist_cfg)?;
            let same = rep.labels == central.labels;
            all &= same;
            let differing = rep.labels.iter().zip(&central.labels).filter(|(a, b)| a != b).count();
            writeln!(out, "{} r={r} layout={lay:?} differing_labels={differing}", if same { "PASS" } else { "FAIL" })?;
        }
    }
    writeln!(out, "{}", if all { "equivalence: PASS" } else { "equivalence: FAIL" })?;
    if all {
        Ok(())
    } else {
        Err(Failure::Pipeline("distributed labels differ from centralized labels".into()))
    }
}

fn cmd_dump(a: DumpArgs) -> CmdResult {
    let cfg = pipeline_config(&a.pipeline)?;
    layout(a.sites.skew)?;
    let ds = load(&a.data)?;
    let rep = run_once(&ds, &cfg, &a.sites)?;
    let mut w = csv::Writer::from_writer(output(&a.out)?);
    let io_err = |e: csv::Error| Failure::Pipeline(e.to_string());
    let mut header: Vec<String> = (0..ds.dim()).map(|j| format!("x{j}")).collect();
    header.push("true_label".into());
    header.push("predicted_label".into());
    w.write_record(&header).map_err(io_err)?;
    for (i, row) in ds.points().rows().into_iter().enumerate() {
        let mut rec: Vec<String> = row.iter().map(|v| v.to_string()).collect();
        rec.push(ds.labels().map_or_else(String::new, |l| l[i].to_string()));
        rec.push((rep.labels[i] + 1).to_string());
        w.write_record(&rec).map_err(io_err)?;
    }
    w.flush()?;
    Ok(())
}

fn cmd_gen(a: GenArgs) -> CmdResult {
    let ds = match a.name {
        Fixture::JainLike => synth::jain_like(a.seed),
        Fixture::Complex9Like => synth::complex9_like(a.seed),
        Fixture::Blobs => synth::blobs_fixture(),
        Fixture::Scaling => {
            if a.k == 0 || a.n < a.k {
                return Err(Failure::Usage("--n must be at least --k, and --k positive".into()));
            }
            bench::scaling_data(a.n, a.k, a.seed)
        }
    };
    ds.write_csv(output(&a.out)?)?;
    Ok(())
}

fn bench_config(c: &BenchCommon) -> PipelineConfig {
    PipelineConfig {
        k: c.k,
        kernel: KernelParams { psi: c.psi, t: c.t },
        subset_size: Some(c.s),
        plugin: plugin_config(c.plugin, TauChoice::Auto, PluginConfig::DEFAULT_MAX_ITERS, PluginConfig::DEFAULT_DC_FRACTION),
        assign: AssignRule::Distribution,
        seed: c.seed,
    }
}

fn cmd_bench_scaling(a: ScalingArgs) -> CmdResult {
    if a.sizes.is_empty() {
        return Err(Failure::Usage("no sizes".into()));
    }
    let rows = bench::bench_step3_scaling(&a.sizes, &bench_config(&a.common), a.common.threads)?;
    bench::write_csv(&rows, output(&a.common.out)?)?;
    if rows.len() >= 2 {
        eprintln!("step-3 log-log slope: {:.3}", bench::step3_slope(&rows));
    }
    Ok(())
}

fn cmd_bench_property_b(a: PropertyBArgs) -> CmdResult {
    let cfg = bench_config(&a.common);
    if a.n < cfg.k {
        return Err(Failure::Usage("--n must be at least --k".into()));
    }
    let ds = bench::scaling_data(a.n, cfg.k, cfg.seed);
    let rows = bench::bench_property_b(&ds, &a.rs, layout(a.skew)?, &cfg, a.common.threads)?;
    bench::write_csv(&rows, output(&a.common.out)?)?;
    Ok(())
}
