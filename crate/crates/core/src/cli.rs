//! Command-line front end.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::bde::{init_population, MutationFactor};
use crate::checkpoint::Checkpoint;
use crate::config::RunConfig;
use crate::data::Dataset;
use crate::nn::optim::sgd_step;
use crate::nn::{presets, Network};
use crate::oracle::{brute_force_best, enumerate_landscape, Landscape};
use crate::report::{mutation_diversity, write_metrics_csv, DiversityReport};
use crate::state::PruningState;
use crate::trainer::{evaluate, train, EvalMetrics};
use crate::unitmap::UnitMap;

#[derive(Debug, Parser)]
#[command(name = "edropout", version, about = "Energy-based dropout and pruning with binary differential evolution")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train with state search, then fine-tune the best sub-network.
    Train(RunArgs),
    /// Report full-network (F) and pruned (P) metrics of a checkpoint.
    Evaluate(EvalArgs),
    /// Dump exhaustive energy landscapes of the 10-unit toy network.
    Landscape(LandscapeArgs),
    /// Monte-Carlo study of mutant diversity for three mutation settings.
    Diversity(DiversityArgs),
}

/// Run options. Every flag also exists as a key in the `--config` file;
/// flags win over file values.
#[derive(Debug, Clone, Default, Args)]
pub struct RunArgs {
    /// key=value configuration file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// `synth` or `idx:<images>,<labels>`.
    #[arg(long)]
    pub dataset: Option<String>,
    /// toy10, mlp or smallcnn.
    #[arg(long)]
    pub net: Option<String>,
    #[arg(long)]
    pub pop_size: Option<String>,
    #[arg(long)]
    pub init_p: Option<String>,
    #[arg(long)]
    pub cr: Option<String>,
    /// `random` or `fixed:<f>`.
    #[arg(long)]
    pub mutation: Option<String>,
    #[arg(long)]
    pub stagnation_epochs: Option<String>,
    #[arg(long)]
    pub epochs: Option<String>,
    #[arg(long)]
    pub batch_size: Option<String>,
    #[arg(long)]
    pub lr: Option<String>,
    /// Epochs between ×0.1 learning-rate decays (0 disables decay).
    #[arg(long)]
    pub lr_step: Option<String>,
    #[arg(long)]
    pub weight_decay: Option<String>,
    #[arg(long)]
    pub seed: Option<String>,
    #[arg(long)]
    pub out: Option<String>,
    /// Comma-separated k values, e.g. 1,3,5.
    #[arg(long)]
    pub topk: Option<String>,
    /// Worker threads for state evaluation (0 uses all cores).
    #[arg(long)]
    pub threads: Option<String>,
    /// Constrain every trial to this many kept units.
    #[arg(long)]
    pub active_units: Option<String>,
    #[arg(long)]
    pub synth_classes: Option<String>,
    #[arg(long)]
    pub synth_per_class: Option<String>,
    #[arg(long)]
    pub synth_size: Option<String>,
    /// Keep only the first N samples of the dataset.
    #[arg(long)]
    pub limit: Option<String>,
}

impl RunArgs {
    fn pairs(&self) -> Vec<(&'static str, &String)> {
        let fields = [
            ("dataset", &self.dataset),
            ("net", &self.net),
            ("pop-size", &self.pop_size),
            ("init-p", &self.init_p),
            ("cr", &self.cr),
            ("mutation", &self.mutation),
            ("stagnation-epochs", &self.stagnation_epochs),
            ("epochs", &self.epochs),
            ("batch-size", &self.batch_size),
            ("lr", &self.lr),
            ("lr-step", &self.lr_step),
            ("weight-decay", &self.weight_decay),
            ("seed", &self.seed),
            ("out", &self.out),
            ("topk", &self.topk),
            ("threads", &self.threads),
            ("active-units", &self.active_units),
            ("synth-classes", &self.synth_classes),
            ("synth-per-class", &self.synth_per_class),
            ("synth-size", &self.synth_size),
            ("limit", &self.limit),
        ];
        fields.into_iter().filter_map(|(k, v)| v.as_ref().map(|v| (k, v))).collect()
    }

    /// Defaults, then the config file, then flags.
    pub fn resolve(&self) -> anyhow::Result<RunConfig> {
        let mut cfg = RunConfig::default();
        if let Some(path) = &self.config {
            let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            cfg.apply_text(&text).with_context(|| format!("in {}", path.display()))?;
        }
        for (key, value) in self.pairs() {
            cfg.set(key, value).with_context(|| format!("--{key}"))?;
        }
        Ok(cfg)
    }
}

#[derive(Debug, Clone, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[command(flatten)]
    pub run: RunArgs,
}

#[derive(Debug, Clone, Args)]
pub struct LandscapeArgs {
    /// Score a stored toy network instead of training one.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Training iterations at which to dump a landscape.
    #[arg(long, default_value = "0,100,200")]
    pub at: String,
    #[command(flatten)]
    pub run: RunArgs,
}

#[derive(Debug, Clone, Args)]
pub struct DiversityArgs {
    #[arg(long, default_value_t = 1000)]
    pub runs: usize,
    #[command(flatten)]
    pub run: RunArgs,
}

fn init_threads(threads: usize) {
    if threads > 0 {
        // A second call in the same process keeps the existing pool.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(threads).build_global();
    }
}

fn prepare_out(dir: &Path) -> anyhow::Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

/// Outcome of [`cmd_train`], also printed as the summary line.
#[derive(Debug, Clone)]
pub struct TrainSummary {
    pub full: EvalMetrics,
    pub pruned: EvalMetrics,
    pub kept_ratio: f64,
    pub best_state: PruningState,
}

pub fn cmd_train(cfg: &RunConfig) -> anyhow::Result<TrainSummary> {
    init_threads(cfg.threads);
    let train_cfg = cfg.train_config()?;
    let data = cfg.load_dataset()?;
    let specs = cfg.layer_specs(data.num_classes())?;
    let net = Network::build(&specs, &data.input_shape(), data.num_classes(), cfg.seed)?;
    prepare_out(&cfg.out)?;
    fs::write(cfg.out.join("config.resolved"), cfg.to_string())?;

    let outcome = train(net, &data, train_cfg)?;
    let mut csv = fs::File::create(cfg.out.join("metrics.csv"))?;
    write_metrics_csv(&mut csv, &outcome.history)?;
    csv.flush()?;
    fs::write(cfg.out.join("best_state.txt"), format!("{}\n", outcome.best_state))?;
    let counter = outcome.iterations.len() as u64;
    let checkpoint =
        Checkpoint { net: outcome.net, best_state: Some(outcome.best_state.clone()), seed: cfg.seed, counter };
    checkpoint.save(cfg.out.join("checkpoint.bin"))?;

    let summary = summarize(&checkpoint.net, &outcome.best_state, &data, &cfg.topk)?;
    println!(
        "final: top1(F)={:.2} top1(P)={:.2} R={:.4} state={}",
        summary.full.top(1).unwrap_or(f64::NAN),
        summary.pruned.top(1).unwrap_or(f64::NAN),
        summary.kept_ratio,
        summary.best_state
    );
    Ok(summary)
}

fn summarize(net: &Network, state: &PruningState, data: &Dataset, topk: &[usize]) -> anyhow::Result<TrainSummary> {
    let mut ks = topk.to_vec();
    if !ks.contains(&1) {
        ks.insert(0, 1);
    }
    let idx = if data.splits.test.is_empty() { &data.splits.train } else { &data.splits.test };
    let full = evaluate(net, None, data, idx, &ks)?;
    let pruned = evaluate(net, Some(state), data, idx, &ks)?;
    let kept_ratio = UnitMap::build(net)?.kept_ratio(state)?;
    Ok(TrainSummary { full, pruned, kept_ratio, best_state: state.clone() })
}

fn metrics_table(summary: &TrainSummary, topk: &[usize]) -> String {
    let mut out = String::from("mode  loss");
    for k in topk {
        out.push_str(&format!("  top{k}"));
    }
    out.push_str("  R\n");
    for (label, m, r) in [("(F)", &summary.full, 1.0), ("(P)", &summary.pruned, summary.kept_ratio)] {
        out.push_str(&format!("{label}  {:.4}", m.loss));
        for &k in topk {
            out.push_str(&format!("  {:.2}", m.top(k).unwrap_or(f64::NAN)));
        }
        out.push_str(&format!("  {r:.4}\n"));
    }
    out
}

pub fn cmd_evaluate(checkpoint: &Path, cfg: &RunConfig) -> anyhow::Result<TrainSummary> {
    let ck = Checkpoint::load(checkpoint).with_context(|| format!("loading {}", checkpoint.display()))?;
    let state = ck.best_state.clone().context("checkpoint holds no pruning state")?;
    // The split (and synthetic data) follow the seed the model was trained with.
    let mut cfg = cfg.clone();
    cfg.seed = ck.seed;
    let data = cfg.load_dataset()?;
    if data.input_shape() != ck.net.input_shape() || data.num_classes() != ck.net.num_classes() {
        bail!("dataset {:?}/{} classes does not fit the checkpoint", data.input_shape(), data.num_classes());
    }
    let summary = summarize(&ck.net, &state, &data, &cfg.topk)?;
    print!("{}", metrics_table(&summary, &cfg.topk));
    Ok(summary)
}

fn parse_iterations(text: &str) -> anyhow::Result<Vec<usize>> {
    let mut at = text
        .split(',')
        .map(|s| s.trim().parse::<usize>().with_context(|| format!("bad iteration {s:?}")))
        .collect::<anyhow::Result<Vec<_>>>()?;
    at.sort_unstable();
    at.dedup();
    Ok(at)
}

fn write_landscape(path: &Path, landscape: &Landscape) -> anyhow::Result<()> {
    let mut f = fs::File::create(path).with_context(|| format!("creating {}", path.display()))?;
    landscape.write_csv(&mut f)?;
    Ok(())
}

/// Landscapes of the toy network at the requested iterations. Training is
/// plain full-network SGD; each landscape is scored on the first
/// `batch_size` validation samples.
pub fn cmd_landscape(args: &LandscapeArgs, cfg: &RunConfig) -> anyhow::Result<Vec<(usize, Landscape)>> {
    init_threads(cfg.threads);
    let data = cfg.load_dataset()?;
    let probe_idx: Vec<usize> = data.splits.val.iter().take(cfg.batch_size).copied().collect();
    if probe_idx.is_empty() {
        bail!("validation split is empty");
    }
    let probe = data.batch(&probe_idx);
    prepare_out(&cfg.out)?;
    fs::write(cfg.out.join("config.resolved"), cfg.to_string())?;

    let mut results = Vec::new();
    if let Some(path) = &args.checkpoint {
        let ck = Checkpoint::load(path).with_context(|| format!("loading {}", path.display()))?;
        let landscape = enumerate_landscape(&ck.net, &probe)?;
        report_landscape(ck.counter as usize, &landscape);
        write_landscape(&cfg.out.join("landscape.csv"), &landscape)?;
        results.push((ck.counter as usize, landscape));
        return Ok(results);
    }

    let specs = presets::by_name("toy10", data.num_classes()).expect("toy preset");
    let mut net = Network::build(&specs, &data.input_shape(), data.num_classes(), cfg.seed)?;
    let at = parse_iterations(&args.at)?;
    let last = *at.last().context("no iterations requested")?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order = data.splits.train.clone();
    let mut t = 0usize;
    let mut cursor = order.len();
    loop {
        if at.contains(&t) {
            let landscape = enumerate_landscape(&net, &probe)?;
            report_landscape(t, &landscape);
            write_landscape(&cfg.out.join(format!("landscape_{t}.csv")), &landscape)?;
            if t == last {
                write_landscape(&cfg.out.join("landscape.csv"), &landscape)?;
                results.push((t, landscape));
                break;
            }
            results.push((t, landscape));
        }
        if cursor >= order.len() {
            rand::seq::SliceRandom::shuffle(order.as_mut_slice(), &mut rng);
            cursor = 0;
        }
        let end = (cursor + cfg.batch_size).min(order.len());
        let batch = data.batch(&order[cursor..end]);
        cursor = end;
        let (_, grads) = net.backward(&batch.images, &batch.labels, None)?;
        sgd_step(&mut net, &grads, cfg.lr, cfg.weight_decay);
        t += 1;
    }
    Ok(results)
}

fn report_landscape(t: usize, landscape: &Landscape) {
    let (state, energy) = brute_force_best(landscape);
    println!(
        "iteration {t}: best state {state} (index {}, one-based {}) energy {energy:.4}",
        state.to_index(),
        state.one_based_index()
    );
}

/// Minimum gap, in percentage points, between adjacent diversity settings.
pub const DIVERSITY_MIN_GAP: f64 = 5.0;

pub fn diversity_ordering_holds(reports: &[DiversityReport; 3]) -> bool {
    let pct = |r: &DiversityReport| 100.0 * r.visited_fraction;
    pct(&reports[2]) - pct(&reports[1]) >= DIVERSITY_MIN_GAP && pct(&reports[1]) - pct(&reports[0]) >= DIVERSITY_MIN_GAP
}

/// Runs the study for F = 0.1, F = 0.9 and random F on the toy network's
/// landscape at initialization. Returns the reports in that order.
pub fn cmd_diversity(runs: usize, cfg: &RunConfig) -> anyhow::Result<[DiversityReport; 3]> {
    init_threads(cfg.threads);
    let data = cfg.load_dataset()?;
    let specs = presets::by_name("toy10", data.num_classes()).expect("toy preset");
    let net = Network::build(&specs, &data.input_shape(), data.num_classes(), cfg.seed)?;
    let probe_idx: Vec<usize> = data.splits.val.iter().take(cfg.batch_size).copied().collect();
    let landscape = enumerate_landscape(&net, &data.batch(&probe_idx))?;

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let population = init_population(cfg.pop_size, landscape.units, cfg.init_p, &mut rng)?;
    let factors = [MutationFactor::Fixed(0.1), MutationFactor::Fixed(0.9), MutationFactor::Random];
    let mut reports = Vec::with_capacity(3);
    for factor in factors {
        reports.push(mutation_diversity(&population, factor, runs, Some(&landscape), &mut rng)?);
    }
    let reports: [DiversityReport; 3] = reports.try_into().expect("three settings");

    prepare_out(&cfg.out)?;
    let mut table = String::from("mutation,runs,distinct,visited_pct,improved_pct\n");
    for r in &reports {
        let name = match r.factor {
            MutationFactor::Fixed(f) => format!("fixed:{f}"),
            MutationFactor::Random => "random".into(),
        };
        table.push_str(&format!(
            "{name},{},{},{:.2},{:.2}\n",
            r.runs,
            r.distinct,
            100.0 * r.visited_fraction,
            100.0 * r.improved_fraction.unwrap_or(f64::NAN)
        ));
    }
    print!("{table}");
    fs::write(cfg.out.join("diversity.csv"), &table)?;
    Ok(reports)
}

/// Dispatches a parsed command line. Returns the process exit code.
pub fn run(cli: Cli) -> i32 {
    let result = match cli.command {
        Command::Train(args) => args.resolve().and_then(|cfg| cmd_train(&cfg)).map(|_| 0),
        Command::Evaluate(args) => args.run.resolve().and_then(|cfg| cmd_evaluate(&args.checkpoint, &cfg)).map(|_| 0),
        Command::Landscape(args) => args.run.resolve().and_then(|cfg| cmd_landscape(&args, &cfg)).map(|_| 0),
        Command::Diversity(args) => args.run.resolve().and_then(|cfg| cmd_diversity(args.runs, &cfg)).map(|reports| {
            if diversity_ordering_holds(&reports) {
                println!("ordering random > 0.9 > 0.1 holds");
                0
            } else {
                eprintln!("error: visited fractions are not ordered random > 0.9 > 0.1 by {DIVERSITY_MIN_GAP} points");
                2
            }
        }),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            1
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn report(pct: f64) -> DiversityReport {
        DiversityReport {
            factor: MutationFactor::Random,
            runs: 1,
            distinct: 0,
            visited_fraction: pct / 100.0,
            improved_fraction: None,
        }
    }

    #[test]
    fn iterations_sorted_and_deduplicated() {
        assert_eq!(parse_iterations("200, 0,100,0").unwrap(), vec![0, 100, 200]);
        assert!(parse_iterations("1,x").is_err());
    }

    #[test]
    fn ordering_needs_both_gaps() {
        assert!(diversity_ordering_holds(&[report(20.0), report(30.0), report(40.0)]));
        assert!(!diversity_ordering_holds(&[report(20.0), report(24.0), report(40.0)]));
        assert!(!diversity_ordering_holds(&[report(40.0), report(30.0), report(20.0)]));
    }

    #[test]
    fn flags_override_config_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.cfg");
        fs::write(&path, "epochs=7\nlr=0.01\n").unwrap();
        let cli = Cli::parse_from(["edropout", "train", "--config", path.to_str().unwrap(), "--lr", "0.5"]);
        let Command::Train(args) = cli.command else { panic!("expected train") };
        let cfg = args.resolve().unwrap();
        assert_eq!(cfg.epochs, 7);
        assert_eq!(cfg.lr, 0.5);
        assert_eq!(cfg.pop_size, RunConfig::default().pop_size);
    }

    #[test]
    fn bad_flag_value_names_the_flag() {
        let args = RunArgs { pop_size: Some("many".into()), ..RunArgs::default() };
        let err = format!("{:#}", args.resolve().unwrap_err());
        assert!(err.contains("--pop-size"), "{err}");
    }
}
