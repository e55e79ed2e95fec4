use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use hwquant::calibration::{calibrate, Calibration, Estimator};
use hwquant::dataset::{graph_fingerprint, load_dataset, Sample};
use hwquant::fixtures::write_fixtures;
use hwquant::graph::{load_graph, save_graph, Graph};
use hwquant::hwspec::{load_spec, HardwareSpec};
use hwquant::interp::{labeled_accuracy, natural_regime, top1_agreement, Executor};
use hwquant::plan::settings_from_bits;
use hwquant::realize::{realize, Strategy};
use hwquant::search::{
    anneal_search, build_search_space, exhaustive_search, greedy_search, random_search, space_size, AnnealConfig, Evaluator,
    GreedyConfig, SearchOutcome, EXHAUSTIVE_CAP, MIN_BIT,
};
use hwquant::topology::prepare;
use hwquant::{Error, OpKind};

const USAGE: u8 = 1;
const VALIDATION: u8 = 2;
const RUNTIME: u8 = 3;

#[derive(Parser)]
#[command(name = "hwquant", version, about = "Hardware-aware post-training quantization pipeline")]
struct Cli {
    /// Worker threads for calibration and candidate evaluation.
    #[arg(long, global = true, env = "HWQUANT_WORKERS")]
    workers: Option<usize>,
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Collect per-edge statistics and estimate thresholds.
    Calibrate {
        #[arg(short, long)]
        model: PathBuf,
        #[arg(short, long)]
        spec: PathBuf,
        #[arg(short, long)]
        dataset: PathBuf,
        #[arg(long, value_enum, default_value_t = EstimatorArg::Quantile)]
        method: EstimatorArg,
        #[arg(long, default_value_t = 0.99)]
        q: f64,
        #[arg(long, default_value_t = 8)]
        kl_bits: u32,
        /// Round thresholds up to powers of two.
        #[arg(long)]
        pow2: bool,
        #[arg(short, long, default_value = "stats.json")]
        output: PathBuf,
    },
    /// Search per-edge bit widths against the float32 model's predictions.
    Search {
        #[arg(short, long)]
        model: PathBuf,
        #[arg(short, long)]
        spec: PathBuf,
        #[arg(long)]
        stats: PathBuf,
        #[arg(short, long)]
        dataset: PathBuf,
        #[arg(long, value_enum, default_value_t = MethodArg::Greedy)]
        method: MethodArg,
        #[arg(long, default_value_t = 1)]
        rounds: usize,
        #[arg(long, default_value_t = 0.0)]
        tol: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = MIN_BIT)]
        min_bit: u32,
        /// Annealing steps.
        #[arg(long, default_value_t = 2000)]
        steps: usize,
        #[arg(long, default_value_t = 0.1)]
        t0: f64,
        #[arg(long, default_value_t = 0.995)]
        decay: f64,
        /// Candidates drawn by random search.
        #[arg(long, default_value_t = 100)]
        samples: usize,
        /// Largest space exhaustive search will enumerate.
        #[arg(long, default_value_t = EXHAUSTIVE_CAP)]
        cap: u64,
        #[arg(short, long, default_value = "strategy.json")]
        output: PathBuf,
        #[arg(long)]
        trace: Option<PathBuf>,
    },
    /// Lower a model and strategy into an integer graph.
    Realize {
        #[arg(short, long)]
        model: PathBuf,
        #[arg(short, long)]
        spec: PathBuf,
        #[arg(long)]
        strategy: PathBuf,
        #[arg(short, long, default_value = "realized.json")]
        output: PathBuf,
    },
    /// Compare two models on a dataset.
    Eval {
        model_a: PathBuf,
        model_b: PathBuf,
        #[arg(short, long)]
        dataset: PathBuf,
        /// Also write the report as JSON.
        #[arg(short, long)]
        output: Option<PathBuf>,
    },
    /// Show which operators run quantized and the dtypes each edge may use.
    Topology {
        #[arg(short, long)]
        model: PathBuf,
        #[arg(short, long)]
        spec: PathBuf,
        #[arg(short, long)]
        output: Option<PathBuf>,
    },
    /// Regenerate the synthetic models, sample sets and specs.
    GenFixtures {
        #[arg(short, long, default_value = "fixtures")]
        output: PathBuf,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum EstimatorArg {
    Max,
    Quantile,
    Kl,
}

#[derive(Clone, Copy, ValueEnum)]
enum MethodArg {
    Greedy,
    Anneal,
    Random,
    Exhaustive,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(USAGE) } else { ExitCode::SUCCESS };
        }
    };
    if let Some(n) = cli.workers {
        if n == 0 {
            eprintln!("error: --workers must be at least 1");
            return ExitCode::from(USAGE);
        }
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: cannot start {n} workers: {e}");
            return ExitCode::from(RUNTIME);
        }
    }
    match run(cli.cmd) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_validation() { VALIDATION } else { RUNTIME })
        }
    }
}

type Result<T> = hwquant::Result<T>;

fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::Calibrate { model, spec, dataset, method, q, kl_bits, pow2, output } => {
            let estimator = match method {
                EstimatorArg::Max => Estimator::Max,
                EstimatorArg::Quantile => Estimator::Quantile(q),
                EstimatorArg::Kl => Estimator::Kl(kl_bits),
            };
            cmd_calibrate(&model, &spec, &dataset, estimator, pow2, &output)
        }
        Command::Search { model, spec, stats, dataset, method, rounds, tol, seed, min_bit, steps, t0, decay, samples, cap, output, trace } => {
            let method = match method {
                MethodArg::Greedy => Method::Greedy(GreedyConfig { rounds, tol }),
                MethodArg::Anneal => Method::Anneal(AnnealConfig { steps, t0, decay, seed }),
                MethodArg::Random => Method::Random { n: samples, seed },
                MethodArg::Exhaustive => Method::Exhaustive { cap },
            };
            cmd_search(&model, &spec, &stats, &dataset, method, min_bit, &output, trace.as_deref())
        }
        Command::Realize { model, spec, strategy, output } => cmd_realize(&model, &spec, &strategy, &output),
        Command::Eval { model_a, model_b, dataset, output } => cmd_eval(&model_a, &model_b, &dataset, output.as_deref()),
        Command::Topology { model, spec, output } => cmd_topology(&model, &spec, output.as_deref()),
        Command::GenFixtures { output } => {
            let written = write_fixtures(&output)?;
            println!("wrote {} files under {}", written.len(), output.display());
            Ok(())
        }
    }
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|source| Error::Io { path: path.to_path_buf(), source })
}

fn inputs(model: &Path, spec: &Path) -> Result<(Graph, HardwareSpec)> {
    Ok((load_graph(model)?, load_spec(spec)?))
}

fn load_samples(path: &Path) -> Result<Vec<Sample>> {
    let samples = load_dataset(path)?;
    if samples.is_empty() {
        return Err(Error::Invalid(format!("{}: dataset has no samples", path.display())));
    }
    Ok(samples)
}

fn cmd_calibrate(model: &Path, spec: &Path, dataset: &Path, estimator: Estimator, pow2: bool, output: &Path) -> Result<()> {
    let (g, spec) = inputs(model, spec)?;
    let samples = load_samples(dataset)?;
    let sim = prepare(&g, &spec)?;
    let calib = calibrate(&g, &sim, &samples, estimator, pow2)?;
    calib.save(output)?;
    let searchable: Vec<usize> = sim.searchable.iter().map(|s| s.edge).collect();
    println!("estimator {estimator}{}", if pow2 { " (pow2)" } else { "" });
    println!("{:>5} {:>9} {:>12} {:>12} {:>12}", "edge", "kind", "min", "max", "threshold");
    for (e, c) in &calib.edges {
        let kind = if searchable.contains(e) { "search" } else { "boundary" };
        println!("{e:>5} {kind:>9} {:>12.6} {:>12.6} {:>12.6}", c.lo, c.hi, c.threshold);
    }
    println!("wrote {}", output.display());
    Ok(())
}

enum Method {
    Greedy(GreedyConfig),
    Anneal(AnnealConfig),
    Random { n: usize, seed: u64 },
    Exhaustive { cap: u64 },
}

#[allow(clippy::too_many_arguments)]
fn cmd_search(model: &Path, spec: &Path, stats: &Path, dataset: &Path, method: Method, min_bit: u32, output: &Path, trace: Option<&Path>) -> Result<()> {
    let (g, spec) = inputs(model, spec)?;
    let calib = Calibration::load(stats)?;
    let fp = graph_fingerprint(&g);
    if calib.stats.graph_fingerprint != fp {
        return Err(Error::Invalid(format!("{} was collected on a different model than {}", stats.display(), model.display())));
    }
    let samples = load_samples(dataset)?;
    let sim = prepare(&g, &spec)?;
    if let Some(s) = sim.searchable.iter().find(|s| !calib.edges.contains_key(&s.edge)) {
        return Err(Error::Invalid(format!("{} has no threshold for searchable edge {}", stats.display(), s.edge)));
    }
    let space = build_search_space(&sim.topology, min_bit)?;
    let eval = Evaluator::new(&sim, &spec, &calib.edges, &samples)?;
    let SearchOutcome { best, loss, trace: log, evaluations } = match method {
        Method::Greedy(cfg) => greedy_search(&space, &eval, cfg)?,
        Method::Anneal(cfg) => anneal_search(&space, &eval, cfg)?,
        Method::Random { n, seed } => random_search(&space, &eval, n, seed)?,
        Method::Exhaustive { cap } => exhaustive_search(&space, &eval, cap)?,
    };
    let settings = settings_from_bits(&sim, &spec, &calib.edges, best.bits())?;
    Strategy::new(&g, &sim, &settings)?.save(output)?;
    if let Some(path) = trace {
        log.write(path)?;
    }
    println!("bits {:?}", best.bits());
    println!("loss {loss:.6} evaluations {evaluations} space {}", space_size(&space));
    println!("wrote {}", output.display());
    Ok(())
}

fn cmd_realize(model: &Path, spec: &Path, strategy: &Path, output: &Path) -> Result<()> {
    let (g, spec) = inputs(model, spec)?;
    let strategy = Strategy::load(strategy)?;
    let r = realize(&g, &spec, &strategy)?;
    save_graph(&r, output)?;
    let (before, after) = (g.nodes.len() as i64, r.nodes.len() as i64);
    println!("nodes {before} -> {after} ({:+})", after - before);
    for kind in [OpKind::Quantize, OpKind::Requantize, OpKind::Dequantize] {
        println!("{:>10} {}", kind.name(), r.count(kind));
    }
    let mut sigs: BTreeMap<String, usize> = BTreeMap::new();
    for n in &r.nodes {
        if let Some(a) = &n.int {
            let ins: Vec<&str> = a.in_dtypes.iter().map(|d| d.name()).collect();
            *sigs.entry(format!("{} ({}) -> {}", n.kind().name(), ins.join(", "), a.acc_dtype.name())).or_default() += 1;
        }
    }
    for (sig, count) in sigs {
        println!("{count:>4} x {sig}");
    }
    println!("wrote {}", output.display());
    Ok(())
}

fn mean_abs_diff(a: &Graph, b: &Graph, samples: &[Sample]) -> Result<f64> {
    let (ea, eb) = (Executor::new(a)?, Executor::new(b)?);
    let (ra, rb) = (natural_regime(a), natural_regime(b));
    let mut total = 0.0;
    let mut count = 0usize;
    for s in samples {
        let oa = ea.run(&s.inputs, ra, None)?;
        let ob = eb.run(&s.inputs, rb, None)?;
        if oa.len() != ob.len() {
            return Err(Error::Invalid(format!("models have {} and {} outputs", oa.len(), ob.len())));
        }
        for (x, y) in oa.iter().zip(&ob) {
            if x.shape() != y.shape() {
                return Err(Error::Invalid(format!("output shapes differ: {:?} vs {:?}", x.shape(), y.shape())));
            }
            total += x.to_f64().iter().zip(y.to_f64()).map(|(p, q)| (p - q).abs()).sum::<f64>();
            count += x.len();
        }
    }
    Ok(if count == 0 { 0.0 } else { total / count as f64 })
}

fn cmd_eval(a: &Path, b: &Path, dataset: &Path, output: Option<&Path>) -> Result<()> {
    let (ga, gb) = (load_graph(a)?, load_graph(b)?);
    let samples = load_samples(dataset)?;
    let agreement = top1_agreement(&ga, &gb, &samples)?;
    let mad = mean_abs_diff(&ga, &gb, &samples)?;
    let acc_a = labeled_accuracy(&ga, &samples)?;
    let acc_b = labeled_accuracy(&gb, &samples)?;
    println!("samples {}", samples.len());
    println!("top1 agreement {agreement:.6}");
    println!("mean abs diff {mad:.6e}");
    let mut report = serde_json::json!({
        "samples": samples.len(),
        "top1_agreement": agreement,
        "mean_abs_diff": mad,
    });
    if let (Some(x), Some(y)) = (acc_a, acc_b) {
        println!("accuracy a {x:.6} b {y:.6} drop {:.6}", x - y);
        report["accuracy_a"] = x.into();
        report["accuracy_b"] = y.into();
        report["accuracy_drop"] = (x - y).into();
    }
    if let Some(path) = output {
        write_text(path, &format!("{}\n", serde_json::to_string_pretty(&report)?))?;
    }
    Ok(())
}

fn cmd_topology(model: &Path, spec: &Path, output: Option<&Path>) -> Result<()> {
    let (g, spec) = inputs(model, spec)?;
    let sim = prepare(&g, &spec)?;
    let t = &sim.topology;
    let names = |ids: &std::collections::BTreeSet<hwquant::NodeId>| -> Vec<String> {
        ids.iter().map(|id| format!("{id}:{}", g.node(*id).map_or("?", |n| n.kind().name()))).collect()
    };
    println!("quantized {}", names(&t.qv).join(" "));
    println!("float     {}", names(&t.nqv).join(" "));
    for s in &sim.searchable {
        let e = t.edges[s.edge];
        let cands: Vec<&str> = s.candidates.iter().map(|d| d.name()).collect();
        println!("edge {:>3} {} -> {}:{}  [{}]", s.edge, e.src.node, e.dst.node, e.dst.port, cands.join(", "));
    }
    println!("searchable edges {}, boundaries {}", sim.searchable.len(), sim.boundaries.len());
    if let Some(path) = output {
        write_text(path, &format!("{}\n", serde_json::to_string_pretty(&t.to_json(&g))?))?;
    }
    Ok(())
}
