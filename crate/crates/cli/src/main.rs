use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Component, Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use sketch_overlap::experiments::{
    bijection_check, overlap_curve, planted_spectrum, ranked_parameters, run_baseline, verify_lemma,
    BaselineConfig, CurveConfig, SpectrumKind, DENSE_ORACLE_MAX_DIM,
};
use sketch_overlap::linalg::{gaussian_matrix, seeded_rng};
use sketch_overlap::sketch::default_inner;
use sketch_overlap::storage::create_layout;
use sketch_overlap::{
    make_planted_operator, residual_estimate, sample_mask, seigh, Block, DenseOperator, Error, LinearOperator,
    MatrixStore, MeasurementEnsemble, MetricKind,
};

const OUT_DIR_ENV: &str = "SKETCH_OVERLAP_OUT_DIR";

/// Sketched eigendecompositions, subspace-overlap baselines and chunked
/// matrix storage.
#[derive(Debug, Parser)]
#[command(name = "sketch-overlap", version)]
struct Cli {
    /// Directory receiving every output of the run.
    #[arg(long, global = true, env = OUT_DIR_ENV, default_value = "sketch-overlap-out")]
    out_dir: PathBuf,

    /// Replace outputs that already exist.
    #[arg(long, global = true)]
    overwrite: bool,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Sketched eigendecomposition of a symmetric operator.
    Decompose(DecomposeArgs),
    /// Random-pair baselines for every subspace metric.
    Baseline(BaselineArgs),
    /// Exact and sketched mask-vs-eigenspace overlap for k = 1..=top-k.
    Curve(CurveArgs),
    /// Monte Carlo, identity and storage self-tests; exit code counts failures.
    Verify(VerifyArgs),
    /// Chunked matrix store management.
    #[command(subcommand)]
    Store(StoreCommand),
}

#[derive(Debug, Args, Serialize)]
struct OperatorArgs {
    /// Dense symmetric matrix stored in the chunked or merged format; when
    /// absent a planted operator is built from the flags below.
    #[arg(long)]
    operator: Option<PathBuf>,

    /// Ambient dimension D of the planted operator.
    #[arg(long, default_value_t = 1000)]
    dim: usize,

    /// Number of planted signal eigenvalues.
    #[arg(long, default_value_t = 50)]
    rank: usize,

    /// Signal spectrum: linear (rank, ..., 1) or inverse-square (1/i²).
    #[arg(long, default_value = "linear")]
    spectrum: String,

    /// Number of decaying noise eigenvalues after the signal.
    #[arg(long, default_value_t = 0)]
    noise_rank: usize,

    /// Largest noise eigenvalue.
    #[arg(long, default_value_t = 0.0)]
    noise_level: f64,

    /// Pull of the signal eigenvectors towards a random target mask, in [0, 1].
    #[arg(long, default_value_t = 0.0)]
    alignment: f64,

    /// Seed for the planted eigenbasis and target mask.
    #[arg(long, default_value_t = 1)]
    operator_seed: u64,
}

#[derive(Debug, Args, Serialize)]
struct SketchArgs {
    /// Outer measurements n_o (sketch rank).
    #[arg(long, default_value_t = 80)]
    n_outer: usize,

    /// Inner measurements n_i; defaults to 2 n_o + 1.
    #[arg(long)]
    n_inner: Option<usize>,

    /// Seed for the measurement ensemble.
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Debug, Args, Serialize)]
struct DecomposeArgs {
    #[command(flatten)]
    operator: OperatorArgs,

    #[command(flatten)]
    sketch: SketchArgs,

    /// Gaussian probes for the residual estimate.
    #[arg(long, default_value_t = 20)]
    probes: usize,
}

#[derive(Debug, Args, Serialize)]
struct BaselineArgs {
    /// Comma-separated ambient dimensions.
    #[arg(long, value_delimiter = ',', default_value = "16,32,64,128,256,512,1024,2048")]
    dims: Vec<usize>,

    /// Comma-separated sparsity ratios ρ = k/D.
    #[arg(long, value_delimiter = ',', default_value = "0.4,0.2,0.05,0.01")]
    rho: Vec<f64>,

    /// Comma-separated pairings: OO, OM, MM.
    #[arg(long, value_delimiter = ',', default_value = "OO,OM,MM")]
    modalities: Vec<String>,

    /// Comma-separated metrics.
    #[arg(
        long,
        value_delimiter = ',',
        default_value = "geodesic,chordal2,chordalF,proj2,projF,fubini_study,overlap"
    )]
    metrics: Vec<String>,

    /// Random pairs per cell (T).
    #[arg(long, default_value_t = 50)]
    samples: usize,

    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Debug, Args, Serialize)]
struct CurveArgs {
    #[command(flatten)]
    operator: OperatorArgs,

    #[command(flatten)]
    sketch: SketchArgs,

    /// Largest k on the curve; defaults to min(rank, n_outer).
    #[arg(long)]
    top_k: Option<usize>,
}

#[derive(Debug, Args, Serialize)]
struct VerifyArgs {
    /// Pairs per Monte Carlo cell of the k/D check.
    #[arg(long, default_value_t = 200)]
    samples: usize,

    /// Random pairs for the overlap identity checks.
    #[arg(long, default_value_t = 1000)]
    pairs: usize,

    #[arg(long, default_value_t = 0)]
    seed: u64,

    /// Existing stores to check for integrity (repeatable).
    #[arg(long = "store")]
    stores: Vec<PathBuf>,
}

#[derive(Debug, Subcommand)]
enum StoreCommand {
    /// Lay out an empty chunked store under the output directory.
    Create(StoreCreateArgs),
    /// Stream a complete store into a single file under the output directory.
    Merge {
        source: PathBuf,
        /// File name relative to the output directory.
        dest: PathBuf,
    },
    /// Check every chunk of a store; fails naming the first bad chunk.
    Verify { path: PathBuf },
}

#[derive(Debug, Args, Serialize)]
struct StoreCreateArgs {
    /// Store directory relative to the output directory.
    name: PathBuf,

    #[arg(long)]
    rows: usize,

    #[arg(long)]
    cols: usize,

    #[arg(long, default_value_t = 64)]
    chunk_cols: usize,

    /// Fill the store with Gaussian data from this seed and record checksums.
    #[arg(long)]
    fill_seed: Option<u64>,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(&cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error kind={}: {e}", error_kind(&e));
            ExitCode::from(exit_code(&e))
        }
    }
}

fn error_kind(e: &Error) -> &'static str {
    match e {
        Error::Shape(_) => "shape",
        Error::Domain(_) => "domain",
        Error::Parameter(_) => "parameter",
        Error::Contract(_) => "contract",
        Error::Integrity { .. } => "integrity",
        Error::Manifest { .. } => "manifest",
        Error::Io { .. } => "io",
        Error::Csv(_) => "csv",
    }
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Parameter(_) => 1,
        Error::Shape(_) | Error::Domain(_) | Error::Contract(_) => 2,
        _ => 3,
    }
}

fn run(cli: &Cli) -> Result<u8, Error> {
    let out = Output {
        dir: &cli.out_dir,
        overwrite: cli.overwrite,
    };
    match &cli.command {
        Command::Decompose(args) => decompose(&out, args).map(|_| 0),
        Command::Baseline(args) => baseline(&out, args).map(|_| 0),
        Command::Curve(args) => curve(&out, args).map(|_| 0),
        Command::Verify(args) => verify(&out, args),
        Command::Store(cmd) => store(&out, cmd).map(|_| 0),
    }
}

/// Output directory plus the overwrite policy; every write goes through it.
struct Output<'a> {
    dir: &'a Path,
    overwrite: bool,
}

impl Output<'_> {
    /// `name` inside the output directory, refusing paths that escape it and
    /// existing targets unless overwriting.
    fn target(&self, name: &Path) -> Result<PathBuf, Error> {
        if name.as_os_str().is_empty() || !name.components().all(|c| matches!(c, Component::Normal(_))) {
            return Err(Error::Parameter(format!(
                "output name '{}' must be a relative path inside the output directory",
                name.display()
            )));
        }
        let path = self.dir.join(name);
        if path.exists() && !self.overwrite {
            return Err(Error::Io {
                path: path.clone(),
                source: std::io::Error::new(std::io::ErrorKind::AlreadyExists, "output exists (pass --overwrite)"),
            });
        }
        Ok(path)
    }

    fn targets(&self, names: &[&str]) -> Result<Vec<PathBuf>, Error> {
        names.iter().map(|n| self.target(Path::new(n))).collect()
    }

    fn prepare(&self) -> Result<(), Error> {
        fs::create_dir_all(self.dir).map_err(|e| io_err(self.dir, e))
    }

    fn write_config<T: Serialize>(&self, path: &Path, command: &str, args: &T) -> Result<(), Error> {
        #[derive(Serialize)]
        struct Resolved<'a, T> {
            command: &'a str,
            version: &'a str,
            out_dir: &'a Path,
            overwrite: bool,
            args: &'a T,
        }
        let text = toml::to_string(&Resolved {
            command,
            version: env!("CARGO_PKG_VERSION"),
            out_dir: self.dir,
            overwrite: self.overwrite,
            args,
        })
        .map_err(|e| Error::Parameter(format!("cannot serialize config: {e}")))?;
        fs::write(path, text).map_err(|e| io_err(path, e))
    }
}

fn io_err(path: &Path, source: std::io::Error) -> Error {
    Error::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// A symmetric operator from either a store or planted parameters, plus the
/// target mask indices for planted operators.
fn build_operator(args: &OperatorArgs) -> Result<(Box<dyn LinearOperator>, Vec<usize>), Error> {
    if let Some(path) = &args.operator {
        let matrix = MatrixStore::open(path)?.read_all()?;
        return Ok((Box::new(DenseOperator::symmetric(matrix)?), Vec::new()));
    }
    let kind: SpectrumKind = args.spectrum.parse()?;
    let eigvals = planted_spectrum(kind, args.rank, args.noise_rank, args.noise_level)?;
    if eigvals.len() > args.dim {
        return Err(Error::Parameter(format!(
            "{} planted eigenvalues exceed D={}",
            eigvals.len(),
            args.dim
        )));
    }
    let mask = sample_mask(args.dim, args.rank, args.operator_seed)?;
    let op = make_planted_operator(args.dim, &eigvals, &mask, args.alignment, args.operator_seed)?;
    Ok((Box::new(op), mask.indices().to_vec()))
}

fn ensemble(dim: usize, args: &SketchArgs) -> Result<MeasurementEnsemble, Error> {
    let n_inner = args.n_inner.unwrap_or_else(|| default_inner(args.n_outer, dim));
    MeasurementEnsemble::draw(dim, n_inner, args.n_outer, args.seed)
}

fn decompose(out: &Output, args: &DecomposeArgs) -> Result<(), Error> {
    let paths = out.targets(&["eigvals.csv", "eigenbasis", "decompose_config.toml"])?;
    let (op, _) = build_operator(&args.operator)?;
    let ens = ensemble(op.ncols(), &args.sketch)?;
    let dec = seigh(op.as_ref(), &ens)?;
    let residual = residual_estimate(op.as_ref(), &dec, args.probes.max(1), args.sketch.seed ^ 0x5eed)?;
    log::info!("residual estimate {:.3e} ± {:.1e}", residual.value, residual.stderr);

    out.prepare()?;
    let mut file = fs::File::create(&paths[0]).map_err(|e| io_err(&paths[0], e))?;
    let mut text = format!("# seed={}\nindex,eigenvalue\n", args.sketch.seed);
    for (i, l) in dec.eigvals().iter().enumerate() {
        text.push_str(&format!("{i},{l}\n"));
    }
    file.write_all(text.as_bytes()).map_err(|e| io_err(&paths[0], e))?;

    let basis = dec.q() * dec.u();
    let eigvals: Vec<String> = dec.eigvals().iter().map(|l| l.to_string()).collect();
    let metadata = BTreeMap::from([
        ("n_inner".to_string(), ens.n_inner().to_string()),
        ("n_outer".to_string(), ens.n_outer().to_string()),
        ("seed".to_string(), args.sketch.seed.to_string()),
        ("eigvals".to_string(), eigvals.join(",")),
        ("residual_estimate".to_string(), residual.value.to_string()),
    ]);
    let chunk_cols = basis.ncols().min(64);
    let mut store = create_layout(&paths[1], basis.nrows(), basis.ncols(), chunk_cols, out.overwrite, metadata)?;
    store.write_columns(0, &basis)?;
    store.finalize()?;
    out.write_config(&paths[2], "decompose", args)
}

fn baseline(out: &Output, args: &BaselineArgs) -> Result<(), Error> {
    let paths = out.targets(&["baseline.csv", "baseline_config.toml"])?;
    let config = BaselineConfig {
        dims: args.dims.clone(),
        rhos: args.rho.clone(),
        modalities: args.modalities.iter().map(|m| m.parse()).collect::<Result<_, _>>()?,
        metrics: args.metrics.iter().map(|m| m.parse()).collect::<Result<Vec<MetricKind>, _>>()?,
        samples: args.samples,
        seed: args.seed,
    };
    config.validate()?;
    let result = run_baseline(&config)?;
    out.prepare()?;
    result.write_csv(&paths[0])?;
    out.write_config(&paths[1], "baseline", args)
}

fn curve(out: &Output, args: &CurveArgs) -> Result<(), Error> {
    let paths = out.targets(&["curve.csv", "curve_config.toml"])?;
    let (op, target) = build_operator(&args.operator)?;
    let dim = op.ncols();
    let ens = ensemble(dim, &args.sketch)?;
    let k_max = args.top_k.unwrap_or(args.operator.rank.min(args.sketch.n_outer));
    let theta = ranked_parameters(dim, &target, args.sketch.seed)?;
    if dim > DENSE_ORACLE_MAX_DIM {
        eprintln!("warning: D={dim} exceeds {DENSE_ORACLE_MAX_DIM}; the exact column is left empty");
    }
    let config = CurveConfig {
        n_outer: ens.n_outer(),
        n_inner: ens.n_inner(),
        k_max,
        seed: args.sketch.seed,
    };
    let curve = overlap_curve(op.as_ref(), &theta, config)?;
    out.prepare()?;
    curve.write_csv(&paths[0])?;
    out.write_config(&paths[1], "curve", args)
}

fn verify(out: &Output, args: &VerifyArgs) -> Result<u8, Error> {
    let paths = out.targets(&["verify_report.txt", "verify_config.toml"])?;
    out.prepare()?;
    let mut lines = Vec::new();
    let mut failures = 0usize;
    let mut record = |pass: bool, name: &str, detail: String| {
        if !pass {
            failures += 1;
        }
        let line = format!("{} {name}: {detail}", if pass { "PASS" } else { "FAIL" });
        println!("{line}");
        lines.push(line);
    };

    for (dim, k) in [(128, 6), (512, 26), (2048, 102)] {
        let check = verify_lemma(dim, k, args.samples, args.seed)?;
        record(
            check.pass,
            &format!("lemma D={dim} k={k}"),
            format!(
                "mean {:.6} vs {:.6}, stderr {:.2e}",
                check.mean,
                k as f64 / dim as f64,
                check.stderr
            ),
        );
    }

    let bij = bijection_check(args.pairs, 64, args.seed)?;
    record(
        bij.projection <= 1e-10,
        "overlap = 1 - projF^2/k",
        format!("max deviation {:.2e}", bij.projection),
    );
    record(bij.iou <= 1e-12, "overlap = 2 IoU/(1+IoU)", format!("max deviation {:.2e}", bij.iou));
    record(
        bij.bitflips <= 1e-12,
        "overlap = 1 - bitflips/(2k)",
        format!("max deviation {:.2e}", bij.bitflips),
    );

    let scratch = out.dir.join(".verify-scratch");
    let format_check = storage_self_test(&scratch, args.seed);
    let _ = fs::remove_dir_all(&scratch);
    match format_check {
        Ok(()) => record(true, "storage round trip", "chunked and merged reads are bit-exact".into()),
        Err(e) => record(false, "storage round trip", e.to_string()),
    }

    for path in &args.stores {
        let name = format!("store {}", path.display());
        match MatrixStore::open(path).and_then(|s| s.verify()) {
            Ok(issues) if issues.is_empty() => record(true, &name, "all chunks intact".into()),
            Ok(issues) => {
                let detail: Vec<String> = issues.iter().map(|i| format!("chunk {}: {}", i.chunk, i.reason)).collect();
                record(false, &name, detail.join("; "));
            }
            Err(e) => record(false, &name, e.to_string()),
        }
    }

    let mut report = lines.join("\n");
    report.push('\n');
    fs::write(&paths[0], report).map_err(|e| io_err(&paths[0], e))?;
    out.write_config(&paths[1], "verify", args)?;
    Ok(failures.min(255) as u8)
}

fn storage_self_test(dir: &Path, seed: u64) -> Result<(), Error> {
    let _ = fs::remove_dir_all(dir);
    let mut matrix = gaussian_matrix(&mut seeded_rng(seed, 50), 33, 10);
    for (i, s) in [-0.0, 5e-324, -2.2e-308, f64::MAX].into_iter().enumerate() {
        matrix[(i, i)] = s;
    }
    let store = create_layout(&dir.join("chunked"), 33, 10, 3, true, BTreeMap::new())?;
    std::thread::scope(|scope| {
        let left = scope.spawn(|| store.write_columns(0, &matrix.columns(0, 4).clone_owned()));
        let right = scope.spawn(|| store.write_columns(4, &matrix.columns(4, 6).clone_owned()));
        left.join().expect("writer thread")?;
        right.join().expect("writer thread")
    })?;
    let merged = dir.join("merged.bin");
    store.merge(&merged, true)?;
    let same = |m: &Block| m.iter().zip(matrix.iter()).all(|(a, b)| a.to_bits() == b.to_bits());
    if !same(&store.read_all()?) || !same(&MatrixStore::open(&merged)?.read_all()?) {
        return Err(Error::Integrity {
            chunk: 0,
            reason: "read-back differs from written data".into(),
        });
    }
    Ok(())
}

fn store(out: &Output, cmd: &StoreCommand) -> Result<(), Error> {
    match cmd {
        StoreCommand::Create(args) => {
            let path = out.target(&args.name)?;
            let config = out.target(Path::new("store_create_config.toml"))?;
            out.prepare()?;
            let mut metadata = BTreeMap::new();
            if let Some(seed) = args.fill_seed {
                metadata.insert("fill_seed".to_string(), seed.to_string());
            }
            let mut store = create_layout(&path, args.rows, args.cols, args.chunk_cols, out.overwrite, metadata)?;
            if let Some(seed) = args.fill_seed {
                store.write_columns(0, &gaussian_matrix(&mut seeded_rng(seed, 51), args.rows, args.cols))?;
                store.finalize()?;
            }
            out.write_config(&config, "store create", args)
        }
        StoreCommand::Merge { source, dest } => {
            let path = out.target(dest)?;
            out.prepare()?;
            MatrixStore::open(source)?.merge(&path, out.overwrite)
        }
        StoreCommand::Verify { path } => {
            let store = MatrixStore::open(path)?;
            let issues = store.verify()?;
            for issue in &issues {
                eprintln!("chunk {}: {}", issue.chunk, issue.reason);
            }
            match issues.into_iter().next() {
                Some(first) => Err(first.into()),
                None => {
                    println!("{}: {} chunks intact", path.display(), store.chunks().len());
                    Ok(())
                }
            }
        }
    }
}
