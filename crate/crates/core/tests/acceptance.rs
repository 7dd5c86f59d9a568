//! Acceptance suite: one PASS/FAIL line per criterion, non-zero exit if any
//! criterion fails.

use std::fs;
use std::path::Path;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use clap::Parser;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use edropout::bde::{self, init_population, BdeConfig, MutationFactor, Population};
use edropout::cli::{cmd_diversity, cmd_landscape, cmd_train, diversity_ordering_holds, Cli, Command};
use edropout::config::RunConfig;
use edropout::data::{load_idx, synth_dataset, Dataset};
use edropout::energy::{class_energies, energy_loss, sample_energy_loss};
use edropout::nn::presets;
use edropout::oracle::{brute_force_best, finite_diff_gradient, max_relative_error, physically_prune, Landscape};
use edropout::trainer::{count_inference_calls, evaluate, train, Phase, TrainConfig, Trainer};
use edropout::{Error, LayerSpec, Network, PruningState, Tensor};

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: impl Into<String>) -> Verdict {
    Verdict { pass, detail: detail.into() }
}

fn within(elapsed: Duration, limit_secs: u64) -> bool {
    elapsed <= Duration::from_secs(limit_secs)
}

/// Every Δs seen by any training run in this suite.
#[derive(Default)]
struct DeltaLog {
    runs: usize,
    values: usize,
    worst: f64,
}

impl DeltaLog {
    fn record(&mut self, deltas: impl IntoIterator<Item = f64>) {
        self.runs += 1;
        for d in deltas {
            self.values += 1;
            if self.values == 1 || d > self.worst {
                self.worst = d;
            }
        }
    }
}

fn random_specs(rng: &mut ChaCha8Rng, classes: usize) -> Vec<LayerSpec> {
    let mut specs = vec![LayerSpec::conv(rng.gen_range(2..=3), 3, rng.gen_range(0..=1)), LayerSpec::Relu];
    if rng.gen_bool(0.5) {
        specs.push(LayerSpec::MaxPool2d { size: 2 });
    }
    if rng.gen_bool(0.5) {
        specs.extend([LayerSpec::conv(2, 3, 1), LayerSpec::Relu]);
    }
    specs.extend([
        LayerSpec::Flatten,
        LayerSpec::dense(rng.gen_range(3..=5)),
        LayerSpec::Relu,
        LayerSpec::dense(classes),
    ]);
    specs
}

fn random_tensor(rng: &mut ChaCha8Rng, shape: Vec<usize>) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.sample(StandardNormal)).collect()).unwrap()
}

fn random_state(rng: &mut ChaCha8Rng, len: usize) -> PruningState {
    PruningState::from_bits((0..len).map(|_| rng.gen_bool(0.5)).collect())
}

fn criterion_1() -> Verdict {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let mut worst = 0.0f64;
    let mut built = 0;
    let mut largest = 0;
    while built < 10 {
        let classes = 3;
        let channels = rng.gen_range(1..=2);
        let size = rng.gen_range(5..=6);
        let specs = random_specs(&mut rng, classes);
        let Ok(mut net) = Network::build(&specs, &[channels, size, size], classes, rng.gen()) else { continue };
        if net.num_params() > 500 {
            continue;
        }
        // Random biases too: zero biases behind a dead layer sit exactly on
        // a ReLU kink, where central differences are not a derivative.
        for i in 0..net.num_params() {
            *net.flat_param_mut(i) = 0.5 * rng.sample::<f64, _>(StandardNormal);
        }
        largest = largest.max(net.num_params());
        let batch = 3;
        let x = random_tensor(&mut rng, vec![batch, channels, size, size]);
        let targets: Vec<usize> = (0..batch).map(|_| rng.gen_range(0..classes)).collect();
        let mask = (built % 2 == 1).then(|| random_state(&mut rng, net.num_units()));
        let (_, grads) = net.backward(&x, &targets, mask.as_ref()).unwrap();
        let fd = finite_diff_gradient(&net, &x, &targets, mask.as_ref(), 1e-5).unwrap();
        worst = worst.max(max_relative_error(&grads.flatten(), &fd));
        built += 1;
    }
    let t = start.elapsed();
    verdict(
        worst <= 1e-5 && within(t, 60),
        format!("10 nets (max {largest} params), max relative error {worst:.2e} (<= 1e-5), {:.1}s", t.as_secs_f64()),
    )
}

fn criterion_2() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(202);
    let specs = presets::by_name("toy10", 4).unwrap();
    let net = Network::build(&specs, &[1, 12, 12], 4, 9).unwrap();
    let x = random_tensor(&mut rng, vec![5, 1, 12, 12]);
    let targets = [0, 3, 1, 2, 2];

    let ones = PruningState::ones(net.num_units());
    let plain = net.forward(&x, None).unwrap();
    let gated = net.forward(&x, Some(&ones)).unwrap();
    let same_forward = plain.data().iter().zip(gated.data()).all(|(a, b)| a.to_bits() == b.to_bits());
    let (lp, gp) = net.backward(&x, &targets, None).unwrap();
    let (lg, gg) = net.backward(&x, &targets, Some(&ones)).unwrap();
    let same_backward =
        lp.to_bits() == lg.to_bits() && gp.flatten().iter().zip(gg.flatten()).all(|(a, b)| a.to_bits() == b.to_bits());

    let mut worst = 0.0f64;
    for _ in 0..50 {
        let state = random_state(&mut rng, net.num_units());
        let masked = net.forward(&x, Some(&state)).unwrap();
        let small = physically_prune(&net, &state).unwrap().forward(&x, None).unwrap();
        for (a, b) in masked.data().iter().zip(small.data()) {
            worst = worst.max((a - b).abs());
        }
    }
    verdict(
        same_forward && same_backward && worst <= 1e-12,
        format!(
            "all-ones bit-identical forward={same_forward} backward={same_backward}; 50 states vs shrunken net max |diff| {worst:.2e}"
        ),
    )
}

fn criterion_3() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(303);
    let (mut sign_errors, mut shift_err, mut mean_err) = (0usize, 0.0f64, 0.0f64);
    let batch = 100;
    let mut ties = 0;
    for round in 0..10_000 / batch {
        let classes = rng.gen_range(2..=10);
        let mut logits = random_tensor(&mut rng, vec![batch, classes]);
        // Every other batch is rounded to integers so that ties occur.
        if round % 2 == 1 {
            logits =
                Tensor::new(vec![batch, classes], logits.data().iter().map(|v| (2.0 * v).round()).collect()).unwrap();
        }
        let targets: Vec<usize> = (0..batch).map(|_| rng.gen_range(0..classes)).collect();
        let energies = class_energies(&logits);
        let offset: f64 = rng.gen_range(-50.0..50.0);
        let shifted = Tensor::new(vec![batch, classes], logits.data().iter().map(|v| v + offset).collect()).unwrap();
        let shifted_energies = class_energies(&shifted);
        let mut sum = 0.0;
        for (n, &t) in targets.iter().enumerate() {
            let row = &logits.data()[n * classes..(n + 1) * classes];
            let e = sample_energy_loss(&energies.data()[n * classes..(n + 1) * classes], t).unwrap();
            let strictly_max = row.iter().enumerate().all(|(c, &v)| c == t || row[t] > v);
            if !strictly_max && row.iter().enumerate().all(|(c, &v)| c == t || row[t] >= v) {
                ties += 1;
            }
            if (e < 0.0) != strictly_max {
                sign_errors += 1;
            }
            let es = sample_energy_loss(&shifted_energies.data()[n * classes..(n + 1) * classes], t).unwrap();
            shift_err = shift_err.max((e - es).abs());
            sum += e;
        }
        mean_err = mean_err.max((energy_loss(&energies, &targets).unwrap() - sum / batch as f64).abs());
    }
    verdict(
        sign_errors == 0 && shift_err <= 1e-12 && mean_err <= 1e-12,
        format!("10000 samples ({ties} tied maxima): sign mismatches {sign_errors}, shift error {shift_err:.2e}, batch-mean error {mean_err:.2e}"),
    )
}

fn criterion_4(log: &DeltaLog) -> Verdict {
    verdict(
        log.values > 0 && log.worst <= 0.0,
        format!("{} values over {} training runs, largest {:.3e} (<= 0)", log.values, log.runs, log.worst),
    )
}

/// The toy network's landscape after 200 SGD iterations, built by the
/// `landscape` command.
fn frozen_landscape(out: &Path) -> Landscape {
    let cli = Cli::parse_from(["edropout", "landscape", "--at", "200", "--seed", "5", "--out", out.to_str().unwrap()]);
    let Command::Landscape(args) = cli.command else { unreachable!() };
    let cfg = args.run.resolve().unwrap();
    cmd_landscape(&args, &cfg).unwrap().pop().unwrap().1
}

fn lookup(landscape: &Landscape) -> impl Fn(&[PruningState]) -> edropout::Result<Vec<f64>> + '_ {
    |states| Ok(states.iter().map(|s| landscape.energy_of(s)).collect())
}

fn toy_bde() -> BdeConfig {
    BdeConfig { pop_size: 8, mutation: MutationFactor::Random, crossover_rate: 0.1, init_p: 0.5, active_units: None }
}

fn seeded_population(landscape: &Landscape, cfg: &BdeConfig, rng: &mut ChaCha8Rng) -> Population {
    let mut pop = init_population(cfg.pop_size, landscape.units, cfg.init_p, rng).unwrap();
    pop.energies = lookup(landscape)(&pop.states).unwrap();
    pop
}

fn criterion_5(landscape: &Landscape) -> Verdict {
    let start = Instant::now();
    let cfg = toy_bde();
    let (oracle_state, oracle_min) = brute_force_best(landscape);
    let mut hits = 0;
    let mut beat_oracle = false;
    let mut ranks = Vec::new();
    for seed in 0..10u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut pop = seeded_population(landscape, &cfg, &mut rng);
        for _ in 0..20 {
            bde::evolve_step(&mut pop, lookup(landscape), &cfg, &mut rng).unwrap();
        }
        let (_, best) = bde::best_state(&pop).unwrap();
        let below = landscape.fraction_below(best);
        ranks.push(format!("{:.1}%", 100.0 * below));
        if below < 0.02 {
            hits += 1;
        }
        beat_oracle |= best < oracle_min;
    }
    let t = start.elapsed();
    verdict(
        hits >= 9 && !beat_oracle && within(t, 120),
        format!(
            "{hits}/10 seeds in lowest 2% (share below found: {}); oracle min {oracle_min:.4} at index {} beaten={beat_oracle}, {:.1}s",
            ranks.join(" "),
            oracle_state.one_based_index(),
            t.as_secs_f64()
        ),
    )
}

fn criterion_6(landscape: &Landscape) -> Verdict {
    let cfg = toy_bde();
    let mut violations = 0;
    for seed in 0..10u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
        let mut pop = seeded_population(landscape, &cfg, &mut rng);
        let mut best = bde::best_state(&pop).unwrap().1;
        for _ in 0..50 {
            let before = pop.energies.clone();
            let b = bde::evolve_step(&mut pop, lookup(landscape), &cfg, &mut rng).unwrap();
            violations += pop.energies.iter().zip(&before).filter(|(a, b)| a > b).count();
            // Stored energies must be the states' true energies.
            violations += pop.states.iter().zip(&pop.energies).filter(|(s, &e)| landscape.energy_of(s) != e).count();
            if pop.energies[b] > best {
                violations += 1;
            }
            best = pop.energies[b];
        }
    }
    verdict(violations == 0, format!("10 seeds x 50 generations, {violations} increases"))
}

fn criterion_7(out: &Path) -> Verdict {
    let start = Instant::now();
    let cfg = RunConfig { out: out.into(), ..RunConfig::default() };
    let reports = cmd_diversity(1000, &cfg).unwrap();
    let t = start.elapsed();
    let pct: Vec<String> = reports.iter().map(|r| format!("{:.2}%", 100.0 * r.visited_fraction)).collect();
    verdict(
        diversity_ordering_holds(&reports) && within(t, 120),
        format!(
            "visited F=0.1 {}, F=0.9 {}, random {} (gaps >= 5 points), {:.1}s",
            pct[0],
            pct[1],
            pct[2],
            t.as_secs_f64()
        ),
    )
}

fn top1_on_test(net: &Network, state: Option<&PruningState>, data: &Dataset) -> f64 {
    evaluate(net, state, data, &data.splits.test, &[1]).unwrap().top(1).unwrap()
}

fn criterion_8(log: &mut DeltaLog) -> Verdict {
    let start = Instant::now();
    let cfg = RunConfig { seed: 1, ..RunConfig::default() };
    let data = cfg.load_dataset().unwrap();
    let specs = cfg.layer_specs(data.num_classes()).unwrap();
    let build = || Network::build(&specs, &data.input_shape(), data.num_classes(), cfg.seed).unwrap();

    let run = train(build(), &data, cfg.train_config().unwrap()).unwrap();
    log.record(run.iterations.iter().map(|m| m.delta_s));
    let full = top1_on_test(&run.net, None, &data);
    let pruned = top1_on_test(&run.net, Some(&run.best_state), &data);
    let r = edropout::UnitMap::build(&run.net).unwrap().kept_ratio(&run.best_state).unwrap();

    // Same budget, all units kept throughout.
    let baseline_cfg = RunConfig { stagnation_epochs: Some(0), init_p: 1.0, ..cfg.clone() };
    let base = train(build(), &data, baseline_cfg.train_config().unwrap()).unwrap();
    log.record(base.iterations.iter().map(|m| m.delta_s));
    let baseline = top1_on_test(&base.net, None, &data);
    let t = start.elapsed();
    verdict(
        (0.35..=0.65).contains(&r) && (pruned - baseline).abs() <= 5.0 && (pruned - full).abs() <= 1.0 && within(t, 900),
        format!(
            "smallcnn/synth {} epochs: R={r:.4}, top1 P={pruned:.2} F={full:.2} baseline={baseline:.2}, state {}, {:.1}s",
            cfg.epochs,
            run.best_state,
            t.as_secs_f64()
        ),
    )
}

fn small_config(seed: u64) -> TrainConfig {
    TrainConfig {
        epochs: 8,
        batch_size: 32,
        stagnation_epochs: 4,
        seed,
        lr: edropout::nn::optim::StepDecay { base: 0.3, step: 0, gamma: 0.1 },
        bde: BdeConfig { pop_size: 8, ..BdeConfig::default() },
        ..TrainConfig::default()
    }
}

fn small_data(seed: u64) -> Dataset {
    let mut data = synth_dataset(10, 30, 12, seed).unwrap();
    data.split(0.15, 0.15, seed).unwrap();
    data
}

fn criterion_9(log: &mut DeltaLog) -> Verdict {
    let data = small_data(9);
    let specs = presets::by_name("smallcnn", 10).unwrap();
    let net = Network::build(&specs, &data.input_shape(), 10, 9).unwrap();
    let cfg = small_config(9);
    let epochs = cfg.epochs;
    let mut trainer = Trainer::new(net, cfg).unwrap();
    let mut snapshot = None;
    for _ in 0..epochs {
        trainer.run_epoch(&data).unwrap();
        if snapshot.is_none() && trainer.phase() == Phase::FineTune {
            let state = trainer.best_state().unwrap().clone();
            snapshot = Some((trainer.epoch(), state, trainer.net.flat_params()));
        }
    }
    log.record(trainer.iterations().iter().map(|m| m.delta_s));
    let Some((switch_epoch, state, before)) = snapshot else {
        return verdict(false, "exploration never ended");
    };
    let active = trainer.unit_map.active_params(&state).unwrap();
    let after = trainer.net.flat_params();
    let gated = active.iter().filter(|&&a| !a).count();
    let changed = (0..before.len()).filter(|&i| !active[i] && before[i].to_bits() != after[i].to_bits()).count();
    let trained = (0..before.len()).filter(|&i| active[i] && before[i] != after[i]).count();
    let state_kept = trainer.best_state() == Some(&state);
    verdict(
        gated > 0 && changed == 0 && state_kept,
        format!(
            "switch after epoch {switch_epoch}/{epochs}: {changed} of {gated} gated parameters changed, {trained} active ones trained, s_b fixed={state_kept}"
        ),
    )
}

fn criterion_10(log: &mut DeltaLog) -> Verdict {
    let data = small_data(10);
    let toy = presets::by_name("toy10", 10).unwrap();
    let cases: [(&str, TrainConfig); 3] = [
        ("no exploration", TrainConfig { stagnation_epochs: 0, ..small_config(1) }),
        ("full budget", TrainConfig { epochs: 4, stagnation_epochs: 4, ..small_config(2) }),
        ("early collapse", TrainConfig { bde: BdeConfig { init_p: 1.0, ..small_config(3).bde }, ..small_config(3) }),
    ];
    let mut details = Vec::new();
    let mut ok = true;
    for (name, cfg) in cases {
        let net = Network::build(&toy, &data.input_shape(), 10, cfg.seed).unwrap();
        let run = train(net, &data, cfg.clone()).unwrap();
        log.record(run.iterations.iter().map(|m| m.delta_s));
        let expected = count_inference_calls(&cfg, run.batches_per_epoch, run.convergence_epoch);
        let matches = run.inference_calls == expected;
        let shape_ok = match name {
            "full budget" => run.convergence_epoch.is_none(),
            "early collapse" => run.convergence_epoch == Some(1),
            _ => true,
        };
        ok &= matches && shape_ok;
        details.push(format!(
            "{name}: {} calls (+{} refreshes) {}",
            run.inference_calls.calls(),
            run.inference_calls.parent_refreshes,
            if matches && shape_ok { "match" } else { "MISMATCH" }
        ));
    }
    verdict(ok, details.join("; "))
}

fn criterion_11(out: &Path) -> Verdict {
    let mut paths = Vec::new();
    for run in ["a", "b"] {
        let mut cfg = RunConfig::parse("epochs=6\nseed=11\nsynth-per-class=30\n").unwrap();
        cfg.out = out.join(run);
        cmd_train(&cfg).unwrap();
        paths.push(cfg.out.join("metrics.csv"));
    }
    let (a, b) = (fs::read(&paths[0]).unwrap(), fs::read(&paths[1]).unwrap());
    verdict(!a.is_empty() && a == b, format!("metrics.csv {} bytes each, identical={}", a.len(), a == b))
}

fn idx_bytes(magic: u32, dims: &[u32], payload: &[u8]) -> Vec<u8> {
    let mut out = magic.to_be_bytes().to_vec();
    for d in dims {
        out.extend_from_slice(&d.to_be_bytes());
    }
    out.extend_from_slice(payload);
    out
}

fn criterion_12(dir: &Path) -> Verdict {
    let pixels: Vec<u8> = (0..4 * 28 * 28).map(|i| (i % 256) as u8).collect();
    let labels = [3u8, 0, 9, 1];
    let images_ok = idx_bytes(0x0803, &[4, 28, 28], &pixels);
    let labels_ok = idx_bytes(0x0801, &[4], &labels);
    let write = |name: &str, bytes: &[u8]| {
        let p = dir.join(name);
        fs::write(&p, bytes).unwrap();
        p
    };
    let (img, lbl) = (write("img.idx", &images_ok), write("lbl.idx", &labels_ok));

    let mut checks = Vec::new();
    match load_idx(&img, &lbl) {
        Ok(data) => {
            let batch = data.batch(&[0, 1, 2, 3]);
            let scaled = batch.images.data().iter().zip(&pixels).all(|(&v, &p)| v == f64::from(p) / 255.0);
            let bounded = batch.images.data().iter().all(|v| (0.0..=1.0).contains(v));
            checks.push(("dims", data.dims() == (4, 28, 28, 1)));
            checks.push(("shape", batch.images.shape() == [4, 1, 28, 28]));
            checks.push(("labels", batch.labels == [3, 0, 9, 1]));
            checks.push(("scaling", scaled && bounded));
        }
        Err(_) => checks.push(("load", false)),
    }
    let mut bad_magic = images_ok.clone();
    bad_magic[3] = 0x04;
    let bad = write("bad_magic.idx", &bad_magic);
    checks.push(("bad magic", matches!(load_idx(&bad, &lbl), Err(Error::BadMagic { found: 0x0804, .. }))));
    let short = write("short.idx", &images_ok[..images_ok.len() - 100]);
    checks.push(("truncated", matches!(load_idx(&short, &lbl), Err(Error::Truncated { .. }))));
    let three = write("three.idx", &idx_bytes(0x0801, &[3], &labels[..3]));
    checks.push(("count", matches!(load_idx(&img, &three), Err(Error::CountMismatch { images: 4, labels: 3 }))));

    let failed: Vec<&str> = checks.iter().filter(|(_, ok)| !ok).map(|(n, _)| *n).collect();
    verdict(
        failed.is_empty(),
        if failed.is_empty() {
            "4x28x28 fixture: dims, labels, [0,1] scaling, bad magic, truncation and count mismatch all as specified"
                .into()
        } else {
            format!("failed checks: {}", failed.join(", "))
        },
    )
}

fn main() -> ExitCode {
    // `cargo test` passes harness flags; listing must not run the suite.
    if std::env::args().any(|a| a == "--list") {
        return ExitCode::SUCCESS;
    }
    let dir = tempfile::tempdir().unwrap();
    let sub = |name: &str| {
        let p = dir.path().join(name);
        fs::create_dir_all(&p).unwrap();
        p
    };
    let mut log = DeltaLog::default();
    let landscape = frozen_landscape(&sub("landscape"));

    let mut results: Vec<(usize, Verdict)> = vec![
        (1, criterion_1()),
        (2, criterion_2()),
        (3, criterion_3()),
        (5, criterion_5(&landscape)),
        (6, criterion_6(&landscape)),
        (7, criterion_7(&sub("diversity"))),
        (8, criterion_8(&mut log)),
        (9, criterion_9(&mut log)),
        (10, criterion_10(&mut log)),
        (11, criterion_11(&sub("determinism"))),
        (12, criterion_12(&sub("idx"))),
    ];
    results.push((4, criterion_4(&log)));
    results.sort_by_key(|(n, _)| *n);

    println!();
    for (n, v) in &results {
        println!("criterion {n:>2}: {} - {}", if v.pass { "PASS" } else { "FAIL" }, v.detail);
    }
    let failed = results.iter().filter(|(_, v)| !v.pass).count();
    println!("acceptance: {} passed, {failed} failed", results.len() - failed);
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
