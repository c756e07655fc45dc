//! `smpf`: fit, evaluate, explain and benchmark symbolic metamodels.

use std::fmt;
use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use log::info;
use smpf::bench::{self, Source};
use smpf::{Dataset64, Report, SmpfConfig, SmpfError, Tree};

#[derive(Parser)]
#[command(name = "smpf", version, about = "Symbolic metamodels from primitive functions")]
struct Cli {
    /// More log output (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    /// Worker threads; defaults to the number of cores. 1 runs everything serially.
    #[arg(long, global = true)]
    jobs: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Fit a metamodel to a registry target or a CSV dataset.
    Fit(FitArgs),
    /// Predict with a saved model; appends a `g` column.
    Eval(EvalArgs),
    /// Per-feature gradients and ranks at one or more points.
    Importance(ImportanceArgs),
    /// Multi-seed runs over registry targets.
    Bench(BenchArgs),
    /// Print the closed-form expression of a saved model.
    Render(RenderArgs),
}

#[derive(Args)]
struct RunOptions {
    /// Config file, or one of the bundled presets exp1, exp2, exp3.
    #[arg(long, default_value = "exp1")]
    config: String,
    /// Base seed; falls back to SMPF_SEED, then to the config.
    #[arg(long)]
    seed: Option<u64>,
    /// Number of consecutive seeds starting at the base seed.
    #[arg(long, default_value_t = 1)]
    seeds: usize,
    /// Decimals in rendered expressions.
    #[arg(long, default_value_t = 4)]
    precision: usize,
}

#[derive(Args)]
struct FitArgs {
    #[command(flatten)]
    run: RunOptions,
    /// Registry target name.
    #[arg(long, conflicts_with = "data", required_unless_present = "data")]
    target: Option<String>,
    /// CSV with columns x_0..x_{d-1} and y.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Output directory for model.json, expression.txt, report.json and report.csv.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    model: PathBuf,
    /// Points CSV with a header and one column per feature.
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ImportanceArgs {
    #[arg(long)]
    model: PathBuf,
    /// Points CSV with a header and one column per feature.
    #[arg(long, conflicts_with = "point", required_unless_present = "point")]
    data: Option<PathBuf>,
    /// A single point, comma separated.
    #[arg(long, value_delimiter = ',', allow_negative_numbers = true)]
    point: Option<Vec<f64>>,
    /// Also compute the Hessian at each point.
    #[arg(long)]
    hessian: bool,
    /// JSON report path; the flat table goes next to it with a .csv extension.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct BenchArgs {
    #[command(flatten)]
    run: RunOptions,
    /// Comma-separated target names, `prefix*` patterns, or `all`.
    #[arg(long, default_value = "all")]
    target: String,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct RenderArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long, default_value_t = 4)]
    precision: usize,
    /// Write to a file instead of standard output.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug)]
enum CliError {
    Config(String),
    Io { path: PathBuf, source: io::Error },
    Data(String),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => 2,
            CliError::Io { .. } => 3,
            CliError::Data(_) => 4,
        }
    }

    fn io(path: &Path, source: io::Error) -> Self {
        CliError::Io {
            path: path.to_path_buf(),
            source,
        }
    }

    /// Attach `path` to library errors raised while handling that file.
    fn at(path: &Path) -> impl Fn(SmpfError) -> CliError + '_ {
        move |e| match e {
            SmpfError::Io(source) => CliError::io(path, source),
            other => match CliError::from(other) {
                CliError::Data(m) => CliError::Data(format!("{}: {m}", path.display())),
                c => c,
            },
        }
    }
}

impl From<SmpfError> for CliError {
    fn from(e: SmpfError) -> Self {
        match e {
            SmpfError::Config(_) | SmpfError::UnknownTarget { .. } | SmpfError::Parse { .. } => {
                CliError::Config(e.to_string())
            }
            SmpfError::Io(source) => CliError::Io {
                path: PathBuf::from("<unknown>"),
                source,
            },
            other => CliError::Data(other.to_string()),
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Config(m) => write!(f, "configuration error: {m}"),
            CliError::Io { path, source } => write!(f, "{}: {source}", path.display()),
            CliError::Data(m) => write!(f, "data error: {m}"),
        }
    }
}

type CliResult<T = ()> = Result<T, CliError>;

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();

    let mut pool = rayon::ThreadPoolBuilder::new();
    if let Some(n) = cli.jobs {
        pool = pool.num_threads(n.max(1));
    }
    let result = match pool.build() {
        Ok(pool) => pool.install(|| dispatch(cli.command)),
        Err(e) => Err(CliError::Config(format!("cannot start worker pool: {e}"))),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("smpf: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}

fn dispatch(command: Command) -> CliResult {
    match command {
        Command::Fit(a) => fit(a),
        Command::Eval(a) => eval(a),
        Command::Importance(a) => importance(a),
        Command::Bench(a) => run_bench(a),
        Command::Render(a) => render(a),
    }
}

fn load_config(spec: &str) -> CliResult<SmpfConfig> {
    if let Some(cfg) = SmpfConfig::preset(spec) {
        return Ok(cfg);
    }
    let path = Path::new(spec);
    let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    SmpfConfig::from_json(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
}

fn seeds(run: &RunOptions, cfg: &SmpfConfig) -> CliResult<Vec<u64>> {
    let base = match run.seed {
        Some(s) => s,
        None => match std::env::var("SMPF_SEED") {
            Ok(v) => v
                .trim()
                .parse()
                .map_err(|_| CliError::Config(format!("SMPF_SEED is not an unsigned integer: {v:?}")))?,
            Err(_) => cfg.seed,
        },
    };
    if run.seeds == 0 {
        return Err(CliError::Config("--seeds must be at least 1".into()));
    }
    Ok((0..run.seeds as u64).map(|i| base.wrapping_add(i)).collect())
}

fn target_source(name: &str, cfg: &SmpfConfig) -> CliResult<Source<f64>> {
    let spec = bench::find_target(name)?.clone();
    let spec = match cfg.domain_for(spec.dim) {
        Ok(domain) if cfg.domain.is_some() => spec.with_domain(domain)?,
        Ok(_) => spec,
        Err(e) => return Err(CliError::Config(format!("domain does not fit target {name}: {e}"))),
    };
    Ok(Source::Target(spec))
}

/// Write to a temporary file beside `path`, then rename over it.
fn write_atomic(path: &Path, bytes: &[u8]) -> CliResult {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| CliError::io(path, e))?;
    tmp.write_all(bytes).map_err(|e| CliError::io(path, e))?;
    tmp.persist(path).map_err(|e| CliError::io(path, e.error))?;
    Ok(())
}

fn ensure_dir(dir: &Path) -> CliResult {
    fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))
}

fn csv_bytes(f: impl FnOnce(&mut Vec<u8>) -> smpf::Result<()>) -> CliResult<Vec<u8>> {
    let mut buf = Vec::new();
    f(&mut buf)?;
    Ok(buf)
}

fn fit(args: FitArgs) -> CliResult {
    let cfg = load_config(&args.run.config)?;
    let seeds = seeds(&args.run, &cfg)?;
    let source = match (&args.target, &args.data) {
        (Some(name), _) => target_source(name, &cfg)?,
        (None, Some(path)) => Source::Dataset {
            name: path
                .file_stem()
                .map_or("dataset".into(), |s| s.to_string_lossy().into_owned()),
            data: Dataset64::load_csv(path).map_err(CliError::at(path))?,
        },
        (None, None) => return Err(CliError::Config("either --target or --data is required".into())),
    };
    info!("fitting {} with seeds {seeds:?}", source.name());
    let (report, tree) = bench::run_experiment(&source, &cfg, &seeds, args.run.precision)?;
    let csv = csv_bytes(|b| report.write_csv(b))?;
    ensure_dir(&args.out)?;
    write_atomic(&args.out.join("model.json"), tree.to_json().as_bytes())?;
    write_atomic(&args.out.join("expression.txt"), format!("{}\n", report.best_expression).as_bytes())?;
    write_atomic(&args.out.join("report.json"), report.to_json().as_bytes())?;
    write_atomic(&args.out.join("report.csv"), &csv)?;
    println!("{}", report.table_line());
    println!("{}", report.best_expression);
    Ok(())
}

fn load_model(path: &Path) -> CliResult<Tree> {
    let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    Tree::from_json(&text).map_err(CliError::at(path))
}

/// Header and rows of a points file. An empty file has no header.
fn read_points(path: &Path) -> CliResult<(Option<Vec<String>>, Vec<Vec<f64>>)> {
    let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    if text.trim().is_empty() {
        return Ok((None, Vec::new()));
    }
    let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(text.as_bytes());
    let bad = |row: usize, m: String| CliError::Data(format!("{}: row {row}: {m}", path.display()));
    let header: Vec<String> = reader
        .headers()
        .map_err(|e| bad(0, e.to_string()))?
        .iter()
        .map(str::to_string)
        .collect();
    let mut rows = Vec::new();
    for (i, rec) in reader.records().enumerate() {
        let rec = rec.map_err(|e| bad(i + 1, e.to_string()))?;
        let row = rec
            .iter()
            .map(|c| c.parse::<f64>().map_err(|_| bad(i + 1, format!("not a number: {c:?}"))))
            .collect::<CliResult<Vec<f64>>>()?;
        rows.push(row);
    }
    Ok((Some(header), rows))
}

fn check_width(path: &Path, width: usize, dim: usize) -> CliResult {
    if width != dim {
        return Err(CliError::Data(format!(
            "{}: model expects {dim} features, points have {width} columns",
            path.display()
        )));
    }
    Ok(())
}

fn feature_header(dim: usize) -> Vec<String> {
    (0..dim).map(|j| format!("x_{j}")).collect()
}

fn eval(args: EvalArgs) -> CliResult {
    let tree = load_model(&args.model)?;
    let (header, rows) = read_points(&args.data)?;
    let mut header = header.unwrap_or_else(|| feature_header(tree.dim()));
    check_width(&args.data, header.len(), tree.dim())?;
    header.push("g".into());
    let mut w = csv::Writer::from_writer(Vec::new());
    let csv_err = |e: csv::Error| CliError::Data(e.to_string());
    w.write_record(&header).map_err(csv_err)?;
    for row in &rows {
        let g = tree.eval(row)?;
        let rec: Vec<String> = row.iter().chain([&g]).map(|v| v.to_string()).collect();
        w.write_record(&rec).map_err(csv_err)?;
    }
    let bytes = w.into_inner().map_err(|e| CliError::Data(e.to_string()))?;
    write_atomic(&args.out, &bytes)
}

fn importance(args: ImportanceArgs) -> CliResult {
    let tree = load_model(&args.model)?;
    let points = match (&args.point, &args.data) {
        (Some(p), _) => {
            check_width(Path::new("--point"), p.len(), tree.dim())?;
            vec![p.clone()]
        }
        (None, Some(path)) => {
            let (header, rows) = read_points(path)?;
            if let Some(h) = header {
                check_width(path, h.len(), tree.dim())?;
            }
            rows
        }
        (None, None) => return Err(CliError::Config("either --point or --data is required".into())),
    };
    let reports = points
        .iter()
        .map(|x| smpf::rank_features(&tree, x, args.hessian))
        .collect::<smpf::Result<Vec<Report>>>()?;
    let json = serde_json::to_string_pretty(&reports).expect("reports serialize");
    let csv = csv_bytes(|b| smpf::interpret::write_importance_csv(&reports, b))?;
    write_atomic(&args.out, format!("{json}\n").as_bytes())?;
    write_atomic(&args.out.with_extension("csv"), &csv)
}

fn select_targets(filter: &str) -> CliResult<Vec<&'static str>> {
    let names = bench::target_names();
    let mut chosen = Vec::new();
    for pat in filter.split(',').map(str::trim).filter(|p| !p.is_empty()) {
        let hits: Vec<&str> = match pat {
            "all" => names.clone(),
            p if p.ends_with('*') => {
                let prefix = &p[..p.len() - 1];
                names.iter().copied().filter(|n| n.starts_with(prefix)).collect()
            }
            p => names.iter().copied().filter(|n| *n == p).collect(),
        };
        if hits.is_empty() {
            return Err(CliError::Config(format!(
                "no target matches {pat:?}; available: {}",
                names.join(", ")
            )));
        }
        for h in hits {
            if !chosen.contains(&h) {
                chosen.push(h);
            }
        }
    }
    if chosen.is_empty() {
        return Err(CliError::Config(format!("empty target filter; available: {}", names.join(", "))));
    }
    Ok(chosen)
}

fn run_bench(args: BenchArgs) -> CliResult {
    let cfg = load_config(&args.run.config)?;
    let seeds = seeds(&args.run, &cfg)?;
    let targets = select_targets(&args.target)?;
    ensure_dir(&args.out)?;
    let mut reports = Vec::new();
    for name in targets {
        info!("bench {name}");
        let (report, _) = bench::run_experiment(&target_source(name, &cfg)?, &cfg, &seeds, args.run.precision)?;
        let csv = csv_bytes(|b| report.write_csv(b))?;
        write_atomic(&args.out.join(format!("{name}.json")), report.to_json().as_bytes())?;
        write_atomic(&args.out.join(format!("{name}.csv")), &csv)?;
        write_atomic(
            &args.out.join(format!("{name}.expr.txt")),
            format!("{}\n", report.best_expression).as_bytes(),
        )?;
        reports.push(report);
    }
    let mut table = Vec::new();
    bench::write_table(&reports, &mut table)?;
    let csv = csv_bytes(|b| bench::write_table_csv(&reports, b))?;
    write_atomic(&args.out.join("bench.txt"), &table)?;
    write_atomic(&args.out.join("bench.csv"), &csv)?;
    io::stdout().write_all(&table).map_err(|e| CliError::io(Path::new("<stdout>"), e))
}

fn render(args: RenderArgs) -> CliResult {
    let tree = load_model(&args.model)?;
    let text = format!("{}\n", tree.render(args.precision));
    match &args.out {
        Some(path) => write_atomic(path, text.as_bytes()),
        None => io::stdout()
            .write_all(text.as_bytes())
            .map_err(|e| CliError::io(Path::new("<stdout>"), e)),
    }
}
