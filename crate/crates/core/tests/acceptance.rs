//! Acceptance suite: one PASS/FAIL line per criterion, non-zero exit if any
//! criterion fails. Scenario criteria use seed-mean final accuracy over
//! seeds 1, 2 and 3 of the reference scenario (the config defaults with five
//! rounds).

use std::collections::HashMap;
use std::process::ExitCode;

use byzdistill::checks;
use byzdistill::config::ExperimentConfig;
use byzdistill::defences::{self, GM_MAX_ITER, GM_TOLERANCE};
use byzdistill::federation::{self, RunOutcome};
use byzdistill::metrics::{self, Line};
use byzdistill::simplex;
use rand::Rng;
use rayon::prelude::*;

const SEEDS: [u64; 3] = [1, 2, 3];
const CHANCE: f64 = 0.2;

struct Verdict {
    passed: bool,
    detail: String,
}

fn verdict(passed: bool, detail: impl Into<String>) -> Verdict {
    Verdict { passed, detail: detail.into() }
}

fn reference(branch: &str, attack: &str, defence: &str, alpha: f64, seed: u64) -> ExperimentConfig {
    let (kind, expguard) = match defence {
        "EGF" => ("FILTER_SCORE", true),
        "EG_GM" => ("GM", true),
        "EG_CRONUS" => ("CRONUS", true),
        other => (other, false),
    };
    let text = format!(
        "branch={branch}\nrounds=5\nalpha={alpha}\nseed={seed}\nattack.kind={attack}\ndefence.kind={kind}\ndefence.expguard={expguard}\n"
    );
    ExperimentConfig::parse(&text).expect("reference config is valid")
}

type Key = (&'static str, &'static str, &'static str);

const SCENARIOS: [(Key, f64); 9] = [
    (("fd", "NONE", "MEAN"), 0.45),
    (("fd", "RLF", "MEAN"), 0.45),
    (("fd", "LMA", "MEAN"), 0.45),
    (("fd", "CPA", "MEAN"), 0.45),
    (("fd", "LMA", "GM"), 0.45),
    (("fd", "LMA", "EGF"), 0.45),
    (("fd", "HIPS_LMA", "MEAN"), 0.45),
    (("fd", "HIPS_LMA", "EGF"), 0.45),
    (("fedavg", "FEDAVG_GAUSS", "MEAN"), 0.1),
];

/// Extra defences exercised only for label validity.
const EXTRA: [Key; 5] = [
    ("fd", "LMA", "CRONUS"),
    ("fd", "LMA", "EG_GM"),
    ("fd", "LMA", "EG_CRONUS"),
    ("fd", "CPA", "EGF"),
    ("fd", "HIPS_CPA", "GM"),
];

struct Runs {
    outcomes: HashMap<(Key, u64), RunOutcome>,
}

impl Runs {
    fn collect() -> Self {
        let mut jobs: Vec<(Key, f64, u64)> = Vec::new();
        for (key, alpha) in SCENARIOS {
            for seed in SEEDS {
                jobs.push((key, alpha, seed));
            }
        }
        for key in EXTRA {
            jobs.push((key, 0.45, 1));
        }
        let outcomes = jobs
            .par_iter()
            .map(|&(key, alpha, seed)| {
                let config = reference(key.0, key.1, key.2, alpha, seed);
                let out = federation::run(&config).unwrap_or_else(|e| panic!("{key:?} seed {seed}: {e}"));
                ((key, seed), out)
            })
            .collect();
        Self { outcomes }
    }

    fn mean_accuracy(&self, key: Key) -> f64 {
        SEEDS.iter().map(|s| self.outcomes[&(key, *s)].final_accuracy()).sum::<f64>() / SEEDS.len() as f64
    }
}

fn criterion_1(runs: &Runs) -> Verdict {
    let (mut checked, mut valid) = (0usize, 0usize);
    for out in runs.outcomes.values() {
        for r in &out.records {
            checked += r.labels_checked;
            valid += r.labels_valid;
        }
    }
    let fd_runs = runs.outcomes.keys().filter(|(k, _)| k.0 == "fd").count();
    verdict(checked > 0 && checked == valid, format!("{valid}/{checked} aggregated labels valid over {fd_runs} FD runs, 6 defences"))
}

fn criterion_2() -> Verdict {
    let r = checks::check_lma_optimality(&[3, 5, 10], &[0.1, 0.3, 0.45], 200, 10_000, 11);
    verdict(r.passed, format!("{}; worst excess {:.3e}", r.instance, r.measured))
}

fn criterion_3() -> Verdict {
    let r = checks::check_hips_optimality(100, 10_000, 12);
    verdict(r.passed, format!("{}; worst excess {:.3e}", r.instance, r.measured))
}

fn criterion_4() -> Verdict {
    let arch = checks::default_arch();
    let fd = checks::check_grad_finite_difference(&arch, 13, 20).expect("finite differences");
    let lin = checks::check_grad_linearity(&arch, 13, 100).expect("linearity");
    let bias = checks::check_bias_bound(&arch, &[0.0, 0.1, 0.3, 0.45], 13, 100).expect("bias bound");
    verdict(
        fd.passed && lin.passed && bias.passed && bias.measured < 1.0,
        format!(
            "finite-difference rel err {:.2e}; {}; bias ratio {:.3} over {}",
            fd.measured, lin.instance, bias.measured, bias.instance
        ),
    )
}

fn criterion_5() -> Verdict {
    let triple: [&[f64]; 3] = [&[0.7, 0.2, 0.1], &[0.8, 0.1, 0.1], &[0.0, 0.0, 1.0]];
    let median = simplex::coordwise_median(&triple).unwrap();
    let median_invalid = simplex::validate(&median).is_err();
    let mean = defences::mean_agg(&triple, None);
    let gm = defences::geometric_median(&triple, GM_TOLERANCE, GM_MAX_ITER);
    let ok = median == [0.7, 0.1, 0.1] && median_invalid && mean.is_ok() && gm.is_ok();
    verdict(ok, format!("median {median:?} invalid={median_invalid}; mean valid={}; gm valid={}", mean.is_ok(), gm.is_ok()))
}

fn objective(points: &[&[f64]], y: &[f64]) -> f64 {
    points.iter().map(|p| p.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt()).sum()
}

fn criterion_6() -> Verdict {
    let mut rng = byzdistill::rng::stream(&[14]);
    let mut worst: f64 = 0.0;
    const INSTANCES: usize = 20;
    for i in 0..INSTANCES {
        // points on the 1e-3 lattice so that a median sitting on a data
        // point is reachable by the grid
        let n = 3 + i % 5;
        let pts: Vec<Vec<f64>> = (0..n)
            .map(|_| {
                let a = rng.random_range(0..=1000u32);
                let b = rng.random_range(0..=(1000 - a));
                vec![a as f64 / 1000.0, b as f64 / 1000.0, (1000 - a - b) as f64 / 1000.0]
            })
            .collect();
        let refs: Vec<&[f64]> = pts.iter().map(|p| p.as_slice()).collect();
        let gm = defences::geometric_median(&refs, GM_TOLERANCE, GM_MAX_ITER).unwrap();
        let found = objective(&refs, gm.point.as_slice());
        let mut grid = f64::INFINITY;
        for a in 0..=1000u32 {
            for b in 0..=(1000 - a) {
                let y = [a as f64 / 1000.0, b as f64 / 1000.0, (1000 - a - b) as f64 / 1000.0];
                grid = grid.min(objective(&refs, &y));
            }
        }
        worst = worst.max((found - grid).abs());
    }
    let verts: [&[f64]; 3] = [&[1.0, 0.0, 0.0], &[0.0, 1.0, 0.0], &[0.0, 0.0, 1.0]];
    let c = defences::geometric_median(&verts, GM_TOLERANCE, GM_MAX_ITER).unwrap();
    let centroid_err = c.point.as_slice().iter().map(|v| (v - 1.0 / 3.0).abs()).fold(0.0, f64::max);
    verdict(
        worst <= 1e-3 && centroid_err <= 1e-6,
        format!("{INSTANCES} instances, max |weiszfeld - grid| objective gap {worst:.2e}; symmetric centroid error {centroid_err:.2e}"),
    )
}

fn criterion_7(runs: &Runs) -> Verdict {
    let gauss = runs.mean_accuracy(("fedavg", "FEDAVG_GAUSS", "MEAN"));
    let benign = runs.mean_accuracy(("fd", "NONE", "MEAN"));
    let rlf = runs.mean_accuracy(("fd", "RLF", "MEAN"));
    verdict(
        (gauss - CHANCE).abs() <= 0.15 && rlf >= benign - 0.05,
        format!("fedavg gauss@0.1 {gauss:.3} (chance {CHANCE}); fd rlf@0.45 {rlf:.3} vs benign {benign:.3}"),
    )
}

fn criterion_8(runs: &Runs) -> Verdict {
    let rlf = runs.mean_accuracy(("fd", "RLF", "MEAN"));
    let lma = runs.mean_accuracy(("fd", "LMA", "MEAN"));
    let cpa = runs.mean_accuracy(("fd", "CPA", "MEAN"));
    verdict(lma <= rlf - 0.05 && cpa <= rlf - 0.05, format!("lma {lma:.3}, cpa {cpa:.3}, rlf {rlf:.3}"))
}

fn criterion_9(runs: &Runs) -> Verdict {
    let egf = runs.mean_accuracy(("fd", "LMA", "EGF"));
    let gm = runs.mean_accuracy(("fd", "LMA", "GM"));
    let mean = runs.mean_accuracy(("fd", "LMA", "MEAN"));
    let benign = runs.mean_accuracy(("fd", "NONE", "MEAN"));
    verdict(
        egf >= gm && gm >= mean && egf >= benign - 0.05,
        format!("egf {egf:.4} >= gm {gm:.4} >= mean {mean:.4}; benign {benign:.4}"),
    )
}

fn criterion_10(runs: &Runs) -> Verdict {
    let hips_mean = runs.mean_accuracy(("fd", "HIPS_LMA", "MEAN"));
    let lma_mean = runs.mean_accuracy(("fd", "LMA", "MEAN"));
    let hips_egf = runs.mean_accuracy(("fd", "HIPS_LMA", "EGF"));
    let lma_egf = runs.mean_accuracy(("fd", "LMA", "EGF"));
    verdict(
        hips_mean > lma_mean && hips_egf < lma_egf,
        format!("mean: hips {hips_mean:.3} > lma {lma_mean:.3}; egf: hips {hips_egf:.3} < lma {lma_egf:.3}"),
    )
}

fn criterion_11(runs: &Runs) -> Verdict {
    let alpha = 0.45;
    let shares: Vec<f64> = SEEDS
        .iter()
        .map(|s| runs.outcomes[&(("fd", "LMA", "EGF"), *s)].records[2].byzantine_share.unwrap_or(f64::NAN))
        .collect();
    verdict(shares.iter().all(|s| *s < alpha / 2.0), format!("byzantine share after 3 rounds {shares:.4?} (limit {})", alpha / 2.0))
}

fn metrics_text(config: &ExperimentConfig) -> String {
    let outcome = federation::run(config).expect("run succeeds");
    let mut buf = Vec::new();
    for r in &outcome.records {
        metrics::write_line(&mut buf, &Line::Round(r.clone())).unwrap();
    }
    let summary = metrics::summarize(config, &outcome, 0.0);
    metrics::write_line(&mut buf, &Line::Summary(summary)).unwrap();
    metrics::without_wall_times(&String::from_utf8(buf).unwrap())
}

fn criterion_12() -> Verdict {
    let configs = [
        reference("fd", "LMA", "EGF", 0.45, 7),
        reference("fd", "CPA", "EG_CRONUS", 0.45, 7),
        reference("fedavg", "FEDAVG_TAKEOVER", "MEAN", 0.1, 7),
        ExperimentConfig::parse("rounds=3\nattack.kind=HIPS_LMA\nattack.loss=MSE\ndefence.kind=GM\ndefence.expguard=false\nloss=MSE\n").unwrap(),
    ];
    let mut identical = 0;
    for c in &configs {
        // different thread counts must not change a single byte
        let one = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap().install(|| metrics_text(c));
        let many = rayon::ThreadPoolBuilder::new().num_threads(4).build().unwrap().install(|| metrics_text(c));
        identical += (one == many && !one.is_empty()) as usize;
    }
    verdict(identical == configs.len(), format!("{identical}/{} configs byte-identical across invocations (1 vs 4 threads)", configs.len()))
}

fn main() -> ExitCode {
    let runs = Runs::collect();
    let results: Vec<(usize, Verdict)> = vec![
        (1, criterion_1(&runs)),
        (2, criterion_2()),
        (3, criterion_3()),
        (4, criterion_4()),
        (5, criterion_5()),
        (6, criterion_6()),
        (7, criterion_7(&runs)),
        (8, criterion_8(&runs)),
        (9, criterion_9(&runs)),
        (10, criterion_10(&runs)),
        (11, criterion_11(&runs)),
        (12, criterion_12()),
    ];
    let mut failed = 0;
    for (n, v) in &results {
        println!("criterion {n:>2}: {} | {}", if v.passed { "PASS" } else { "FAIL" }, v.detail);
        failed += !v.passed as usize;
    }
    println!("{} of {} criteria passed", results.len() - failed, results.len());
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
