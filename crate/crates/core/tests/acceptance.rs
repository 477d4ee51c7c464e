//! Acceptance gates. Each criterion prints one PASS, FAIL or SKIP line; the
//! process exits nonzero if any criterion fails.

use std::env;
use std::path::PathBuf;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use dpquant::accounting::{
    empirical_dp_check, guarantee_for, one_sided_loss, outcome_counts, DpCheckConfig, NeighborModel, QueryClass,
};
use dpquant::bench::experiment::{run_quantile_experiment, run_sum_experiment, DatasetPreset, ExperimentSpec, Method};
use dpquant::bench::figures::{illustration_data, range_contrast};
use dpquant::emq::{emq_estimate, emq_interval_pmf, BoundedRange};
use dpquant::histogram::LogBucketHistogram;
use dpquant::noise::{NoiseKind, RandomSource};
use dpquant::quantile::{noiseless, Dataset, QuantileRequest};
use dpquant::sparse_vector::{
    gumbel_no_halt_prob, gumbel_outcome_pmf, iterative_em_step_probs, run_above_threshold, run_iterative_em,
    SliceStream, SvtConfig,
};

const SEED: u64 = 20_231_016;
const MC_TRIALS: usize = 1_000_000;
const Z_LIMIT: f64 = 4.0;

enum Verdict {
    Pass(String),
    Fail(String),
    Skip(String),
}

type Criterion = (&'static str, Duration, fn() -> Verdict);

fn check(ok: bool, detail: String) -> Verdict {
    if ok {
        Verdict::Pass(detail)
    } else {
        Verdict::Fail(detail)
    }
}

/// Per-outcome deviation in standard errors of the model probability.
fn max_z(counts: &[u64], probs: &[f64], trials: usize) -> f64 {
    let n = trials as f64;
    counts
        .iter()
        .zip(probs)
        .map(|(&c, &p)| {
            let se = (p * (1.0 - p) / n).sqrt().max(1.0 / n);
            (c as f64 / n - p).abs() / se
        })
        .fold(0.0, f64::max)
}

fn max_z_two_sample(a: &[u64], b: &[u64], trials: usize) -> f64 {
    let n = trials as f64;
    a.iter()
        .zip(b)
        .map(|(&x, &y)| {
            let p = (x + y) as f64 / (2.0 * n);
            let se = (2.0 * p * (1.0 - p) / n).sqrt().max(1.0 / n);
            (x as f64 - y as f64).abs() / n / se
        })
        .fold(0.0, f64::max)
}

fn small_instance(rng: &mut RandomSource) -> (Vec<f64>, f64) {
    let k = 1 + rng.below(6);
    let values = (0..k).map(|_| rng.uniform(-3.0, 3.0)).collect();
    (values, rng.uniform(-3.0, 3.0))
}

fn gumbel_closed_form() -> Verdict {
    let mut gen = RandomSource::new(SEED, 1);
    let mut worst = 0.0f64;
    for i in 0..20 {
        let (values, threshold) = small_instance(&mut gen);
        let k = values.len();
        let mut probs: Vec<f64> = (1..=k)
            .map(|j| gumbel_outcome_pmf(&values, threshold, 1.0, 1.0, j).unwrap())
            .collect();
        probs.push(gumbel_no_halt_prob(&values, threshold, 1.0, 1.0));
        let cfg = SvtConfig::new(1.0, 1.0, NoiseKind::Gumbel, threshold).unwrap();
        let run = |rng: &mut RandomSource| run_above_threshold(&mut SliceStream::new(&values, 1.0), &cfg, rng);
        let counts = outcome_counts(&run, MC_TRIALS, k, SEED + 100 + i, 0);
        worst = worst.max(max_z(&counts, &probs, MC_TRIALS));
    }
    check(worst <= Z_LIMIT, format!("20 instances, worst deviation {worst:.2} SE"))
}

fn em_equivalence() -> Verdict {
    let mut gen = RandomSource::new(SEED, 2);
    let mut worst_gap = 0.0f64;
    for _ in 0..1000 {
        let (values, threshold) = small_instance(&mut gen);
        let eps = gen.uniform(0.1, 3.0);
        let steps = iterative_em_step_probs(&values, threshold, eps, 1.0);
        let mut survive = 1.0;
        for (j, p) in steps.iter().enumerate() {
            let closed = gumbel_outcome_pmf(&values, threshold, eps / 2.0, 1.0, j + 1).unwrap();
            worst_gap = worst_gap.max((survive * p - closed).abs());
            survive *= 1.0 - p;
        }
    }
    let mut worst_z = 0.0f64;
    for i in 0..5 {
        let (values, threshold) = small_instance(&mut gen);
        let eps = gen.uniform(0.5, 3.0);
        let cfg = SvtConfig::new(eps / 2.0, eps / 2.0, NoiseKind::Gumbel, threshold).unwrap();
        let em = |rng: &mut RandomSource| run_iterative_em(&mut SliceStream::new(&values, 1.0), threshold, eps, rng);
        let at = |rng: &mut RandomSource| run_above_threshold(&mut SliceStream::new(&values, 1.0), &cfg, rng);
        let a = outcome_counts(&em, MC_TRIALS, values.len(), SEED + 200 + i, 0);
        let b = outcome_counts(&at, MC_TRIALS, values.len(), SEED + 200 + i, 1);
        worst_z = worst_z.max(max_z_two_sample(&a, &b, MC_TRIALS));
    }
    check(
        worst_gap <= 1e-12 && worst_z <= Z_LIMIT,
        format!("product form max gap {worst_gap:.2e}, sampling worst deviation {worst_z:.2} SE"),
    )
}

/// Random nondecreasing counts in `[0, n]` and a second dataset with one
/// extra record entering at query `j`.
fn count_pair(rng: &mut RandomSource) -> (Vec<f64>, Vec<f64>, f64) {
    let n = 1 + rng.below(50);
    let k = 1 + rng.below(12);
    let mut counts: Vec<usize> = (0..k).map(|_| rng.below(n + 1)).collect();
    counts.sort_unstable();
    let j = rng.below(k + 1);
    let with = counts.iter().enumerate().map(|(i, &c)| (c + usize::from(i >= j)) as f64).collect();
    (counts.into_iter().map(|c| c as f64).collect(), with, n as f64)
}

fn privacy_bounds() -> Verdict {
    let mut gen = RandomSource::new(SEED, 3);
    let tol = 1e-12;

    // (a) symbolic values.
    let mut symbolic_ok = true;
    for _ in 0..1000 {
        let (e1, e2) = (gen.uniform(0.01, 3.0), gen.uniform(0.01, 3.0));
        let q = gen.uniform(0.0, 1.0);
        let g = |class, neighbor, noise, q| guarantee_for(class, neighbor, noise, e1, e2, q).unwrap();
        let general = g(QueryClass::General, NeighborModel::Swap, NoiseKind::Laplace, None);
        let mono = g(QueryClass::Monotonic, NeighborModel::Swap, NoiseKind::Exponential, None);
        let count = g(QueryClass::CountMinusQn, NeighborModel::AddSubtract, NoiseKind::Laplace, Some(q));
        let fixed = g(QueryClass::FixedThresholdCount, NeighborModel::AddSubtract, NoiseKind::Laplace, None);
        symbolic_ok &= general.eps_dp == Some(e1 + 2.0 * e2)
            && mono.eps_dp == Some(e1 + e2)
            && (mono.rho_zcdp.unwrap() - 0.5 * (e1 / 2.0 + e2).powi(2)).abs() <= tol
            && count.eps_dp == Some(((1.0 - q) * e1).max(q * e1 + e2))
            && fixed.eps_dp == Some(e1.max(e2));
    }

    // (b) numeric loss against the class bound, both directions of each pair.
    let mut excess = f64::NEG_INFINITY;
    for _ in 0..10_000 {
        let (e1, e2) = (gen.uniform(0.05, 3.0), gen.uniform(0.05, 3.0));
        let delta = gen.uniform(0.2, 3.0);
        let k = 1 + gen.below(12);
        let fx: Vec<f64> = (0..k).map(|_| gen.uniform(-5.0, 5.0)).collect();
        let fxp: Vec<f64> = fx.iter().map(|v| v + gen.uniform(-delta, delta)).collect();
        let loss = one_sided_loss(&fx, &fxp, e1, e2, delta).unwrap();
        excess = excess.max(loss - (e1 + 2.0 * e2));

        let up = gen.uniform(0.0, 1.0) < 0.5;
        let fxp: Vec<f64> = fx
            .iter()
            .map(|v| if up { v + gen.uniform(0.0, delta) } else { v - gen.uniform(0.0, delta) })
            .collect();
        let there = one_sided_loss(&fx, &fxp, e1, e2, delta).unwrap();
        let back = one_sided_loss(&fxp, &fx, e1, e2, delta).unwrap();
        excess = excess.max(there.max(back) - (e1 + e2));

        let (c, c_plus, n) = count_pair(&mut gen);
        let q = gen.uniform(0.0, 1.0);
        let fx: Vec<f64> = c.iter().map(|v| v - q * n).collect();
        let fxp: Vec<f64> = c_plus.iter().map(|v| v - q * (n + 1.0)).collect();
        let there = one_sided_loss(&fx, &fxp, e1, e2, 1.0).unwrap();
        let back = one_sided_loss(&fxp, &fx, e1, e2, 1.0).unwrap();
        excess = excess.max(there.max(back) - ((1.0 - q) * e1).max(q * e1 + e2));

        let t = gen.uniform(0.0, n);
        let fx: Vec<f64> = c.iter().map(|v| v - t).collect();
        let fxp: Vec<f64> = c_plus.iter().map(|v| v - t).collect();
        let there = one_sided_loss(&fx, &fxp, e1, e2, 1.0).unwrap();
        let back = one_sided_loss(&fxp, &fx, e1, e2, 1.0).unwrap();
        excess = excess.max(there.max(back) - e1.max(e2));
    }
    let numeric_ok = excess <= tol;

    // (c) empirical check on monotone counting streams under swap neighbors.
    let base: Vec<f64> = (0..40).map(|i| i as f64 * 0.5).collect();
    let mut swapped = base.clone();
    swapped[0] = 100.0;
    let hx = LogBucketHistogram::build(&base, 1.1, 0.0).unwrap();
    let hxp = LogBucketHistogram::build(&swapped, 1.1, 0.0).unwrap();
    let mut empirical = Vec::new();
    for noise in [NoiseKind::Exponential, NoiseKind::Laplace] {
        let cfg = SvtConfig::new(0.5, 0.5, noise, 20.0).unwrap();
        let run_x = |rng: &mut RandomSource| run_above_threshold(&mut hx.query_stream(1, 200), &cfg, rng);
        let run_xp = |rng: &mut RandomSource| run_above_threshold(&mut hxp.query_stream(1, 200), &cfg, rng);
        let report = empirical_dp_check(run_x, run_xp, &DpCheckConfig::new(1.0, MC_TRIALS, 60, SEED + 300)).unwrap();
        empirical.push((noise, report.passed, report.max_log_ratio_lower));
    }
    let empirical_ok = empirical.iter().all(|e| e.1);
    let empirical_detail: Vec<String> = empirical
        .iter()
        .map(|(noise, _, lower)| format!("{noise} lower bound {lower:.3}"))
        .collect();
    check(
        symbolic_ok && numeric_ok && empirical_ok,
        format!(
            "symbolic {}, worst loss minus bound {excess:.2e}, empirical at eps 1: {}",
            if symbolic_ok { "exact" } else { "MISMATCH" },
            empirical_detail.join(", ")
        ),
    )
}

/// Smallest `k ≥ 1` with `|{x : x - ℓ + 1 < β^k}| ≥ threshold`, by walking
/// the grid over sorted data.
fn brute_force_index(sorted_shifted: &[f64], beta: f64, threshold: f64) -> usize {
    let mut power = 1.0;
    let mut k = 0;
    loop {
        power *= beta;
        k += 1;
        if sorted_shifted.partition_point(|&v| v < power) as f64 >= threshold {
            return k;
        }
    }
}

fn noiseless_oracle() -> Verdict {
    let mut gen = RandomSource::new(SEED, 4);
    let mut index_mismatch = 0;
    let mut prefix_mismatch = 0;
    for i in 0..1000 {
        let n = 1 + gen.below(10_000);
        let beta = [1.001, 1.01, 1.1][i % 3];
        let ell = gen.uniform(-100.0, 100.0);
        let spread = 10f64.powf(gen.uniform(0.0, 4.0));
        let values: Vec<f64> = match i % 4 {
            0 => (0..n).map(|_| ell + gen.uniform(0.0, spread)).collect(),
            1 => (0..n).map(|_| ell - spread * gen.open_unit().ln()).collect(),
            2 => (0..n).map(|_| ell + gen.below(100) as f64).collect(),
            _ => (0..n).map(|_| ell + spread * gen.open_unit().powi(4)).collect(),
        };
        let q = gen.uniform(0.001, 1.0);
        let data = Dataset::with_lower_bound(values.clone(), ell).unwrap();
        let req = QuantileRequest::new(q, 1.0).unwrap().with_beta(beta);
        let est = noiseless::estimate_quantile(&data, &req).unwrap();
        let mut shifted: Vec<f64> = values.iter().map(|x| x - ell + 1.0).collect();
        shifted.sort_by(f64::total_cmp);
        if est.index != brute_force_index(&shifted, beta, q * n as f64) {
            index_mismatch += 1;
        }

        let hist = LogBucketHistogram::build(&values, beta, ell).unwrap();
        let top = (shifted[n - 1].ln() / beta.ln()).ceil() as usize + 2;
        for _ in 0..100 {
            let idx = gen.below(top);
            let t = hist.grid().power(idx);
            let direct = values.iter().filter(|&&x| x - ell + 1.0 < t).count() as u64;
            if direct != hist.prefix_count(idx as u64) {
                prefix_mismatch += 1;
            }
        }
    }
    check(
        index_mismatch == 0 && prefix_mismatch == 0,
        format!("1000 instances: {index_mismatch} index mismatches, {prefix_mismatch} of 100000 prefix mismatches"),
    )
}

fn median_time<F: FnMut()>(repeats: usize, mut f: F) -> f64 {
    let mut times: Vec<f64> = (0..repeats)
        .map(|_| {
            let start = Instant::now();
            f();
            start.elapsed().as_secs_f64()
        })
        .collect();
    times.sort_by(f64::total_cmp);
    times[repeats / 2]
}

fn performance() -> Verdict {
    let mut gen = RandomSource::new(SEED, 5);
    let big: Vec<f64> = (0..1_000_000).map(|_| gen.uniform(0.0, 1000.0)).collect();
    let small = &big[..100_000];
    // Warm the allocator and caches before timing.
    std::hint::black_box(LogBucketHistogram::build(&big, 1.001, 0.0).unwrap());
    let t_big = median_time(15, || {
        std::hint::black_box(LogBucketHistogram::build(&big, 1.001, 0.0).unwrap());
    });
    let t_small = median_time(101, || {
        std::hint::black_box(LogBucketHistogram::build(small, 1.001, 0.0).unwrap());
    });
    let build_ratio = t_big / t_small;

    // Per-query cost: an unreachable threshold makes every run use the cap.
    let queries = 200_000;
    let per_query = |n: usize| {
        let hist = LogBucketHistogram::build(&big[..n], 1.001, 0.0).unwrap();
        let cfg = SvtConfig::new(0.5, 0.5, NoiseKind::Exponential, 1e12).unwrap();
        let mut rng = RandomSource::new(SEED, 6);
        median_time(5, || {
            let out = run_above_threshold(&mut hist.query_stream(1, queries), &cfg, &mut rng);
            assert_eq!(out.queries(), queries);
        }) / queries as f64
    };
    let (q_small, q_big) = (per_query(1_000), per_query(1_000_000));
    let query_ratio = q_big.max(q_small) / q_big.min(q_small);
    check(
        (8.0..=12.0).contains(&build_ratio) && query_ratio < 2.0,
        format!(
            "build ratio {build_ratio:.2}, per-query {:.1} ns vs {:.1} ns (ratio {query_ratio:.2})",
            q_small * 1e9,
            q_big * 1e9
        ),
    )
}

fn figure_contrast() -> Verdict {
    let data = illustration_data(10, &mut RandomSource::new(SEED, 7));
    let [tight, loose] = range_contrast(&data, 0.9, 1.0, 1.001).unwrap();
    let identical = tight.uqe.steps().len() == loose.uqe.steps().len()
        && tight.uqe.steps().iter().zip(loose.uqe.steps()).all(|(a, b)| {
            a.lo.to_bits() == b.lo.to_bits() && a.hi.to_bits() == b.hi.to_bits() && a.mass.to_bits() == b.mass.to_bits()
        });
    let masses_ok = tight.emq.total_mass() <= 1.0 + 1e-9
        && loose.emq.total_mass() <= 1.0 + 1e-9
        && tight.uqe.total_mass() <= 1.0 + 1e-9;
    check(
        loose.emq_top_mass > tight.emq_top_mass && identical && masses_ok,
        format!(
            "EMQ top mass {:.4} on [0,10] vs {:.4} on [0,20]; UQE curves {}",
            tight.emq_top_mass,
            loose.emq_top_mass,
            if identical { "bit-identical" } else { "DIFFER" }
        ),
    )
}

fn census_band() -> Verdict {
    let Some(path) = env::var_os("DPQUANT_CENSUS_CSV").map(PathBuf::from) else {
        return Verdict::Skip("DPQUANT_CENSUS_CSV not set".into());
    };
    if !path.exists() {
        return Verdict::Skip(format!("{} not found", path.display()));
    }
    let column = |var: &str, default: &str| env::var(var).unwrap_or_else(|_| default.to_string());
    let cases = [
        (DatasetPreset::Ages, column("DPQUANT_CENSUS_AGE_COLUMN", "age"), 52.0, 155.0),
        (DatasetPreset::Hours, column("DPQUANT_CENSUS_HOURS_COLUMN", "hours-per-week"), 90.0, 271.0),
    ];
    let mut ok = true;
    let mut details = Vec::new();
    for (preset, col, lo, hi) in cases {
        let mut spec = match ExperimentSpec::from_preset(preset, Some((path.clone(), col.clone()))) {
            Ok(s) => s,
            Err(e) => return Verdict::Fail(format!("{e}")),
        };
        spec.methods = vec![Method::Uqe];
        spec.eps_grid = vec![1.0];
        spec.seed = SEED;
        let records = match run_sum_experiment(&spec) {
            Ok(r) => r,
            Err(e) => return Verdict::Fail(format!("column {col}: {e}")),
        };
        let mae = records[0].mae;
        ok &= (lo..=hi).contains(&mae);
        details.push(format!("{col} MAE {mae:.2} in [{lo}, {hi}]"));
    }
    check(ok, details.join("; "))
}

fn emq_oracle() -> Verdict {
    let mut gen = RandomSource::new(SEED, 8);
    let mut worst = 0.0f64;
    let mut instances = 0;
    for n in 1..=8usize {
        for _ in 0..200 {
            let range = BoundedRange::new(gen.uniform(-10.0, 0.0), gen.uniform(0.1, 10.0)).unwrap();
            let mut data: Vec<f64> = (0..n).map(|_| gen.uniform(range.lo(), range.hi())).collect();
            if gen.below(4) == 0 && n > 1 {
                data[1] = data[0];
            }
            let q = gen.uniform(0.0, 1.0);
            let eps = gen.uniform(0.05, 5.0);
            let pmf = emq_interval_pmf(&data, &range, q, eps).unwrap();
            let mut edges = data.clone();
            edges.sort_by(f64::total_cmp);
            edges.insert(0, range.lo());
            edges.push(range.hi());
            let weights: Vec<f64> = (0..=n)
                .map(|j| (-eps * (j as f64 - q * n as f64).abs() / 2.0).exp() * (edges[j + 1] - edges[j]))
                .collect();
            let total: f64 = weights.iter().sum();
            for (p, w) in pmf.iter().zip(&weights) {
                worst = worst.max((p - w / total).abs());
            }
            instances += 1;
        }
    }

    let mut worst_z = 0.0f64;
    for i in 0..5u64 {
        let n = 3 + gen.below(6);
        let range = BoundedRange::new(0.0, 10.0).unwrap();
        let data: Vec<f64> = (0..n).map(|_| gen.uniform(0.0, 10.0)).collect();
        let (q, eps) = (gen.uniform(0.1, 0.9), gen.uniform(0.5, 3.0));
        let pmf = emq_interval_pmf(&data, &range, q, eps).unwrap();
        let mut edges = data.clone();
        edges.sort_by(f64::total_cmp);
        let mut counts = vec![0u64; n + 1];
        let mut rng = RandomSource::new(SEED + 400, i);
        for _ in 0..MC_TRIALS {
            let x = emq_estimate(&data, &range, q, eps, &mut rng).unwrap();
            counts[edges.partition_point(|&e| e <= x)] += 1;
        }
        worst_z = worst_z.max(max_z(&counts, &pmf, MC_TRIALS));
    }
    check(
        worst <= 1e-12 && worst_z <= Z_LIMIT,
        format!("{instances} enumerated instances, max gap {worst:.2e}; sampling worst deviation {worst_z:.2} SE"),
    )
}

fn determinism() -> Verdict {
    let csv = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("data/sample.csv");
    let run = || {
        let mut spec = ExperimentSpec::from_preset(DatasetPreset::Ages, Some((csv.clone(), "age".into()))).unwrap();
        spec.outer_trials = 20;
        spec.seed = SEED;
        let records = run_quantile_experiment(&spec).unwrap();
        serde_json::to_vec(&serde_json::json!({ "spec": spec, "records": records })).unwrap()
    };
    let first = run();
    let second = run();
    check(first == second, format!("{} bytes, identical: {}", first.len(), first == second))
}

fn main() -> ExitCode {
    let criteria: [Criterion; 9] = [
        ("1 gumbel closed form", Duration::from_secs(120), gumbel_closed_form),
        ("2 iterative EM equivalence", Duration::from_secs(180), em_equivalence),
        ("3 privacy bounds", Duration::from_secs(600), privacy_bounds),
        ("4 noiseless search oracle", Duration::from_secs(120), noiseless_oracle),
        ("5 performance", Duration::from_secs(180), performance),
        ("6 range contrast figure", Duration::from_secs(60), figure_contrast),
        ("7 census sum band", Duration::from_secs(900), census_band),
        ("8 EMQ enumeration oracle", Duration::from_secs(120), emq_oracle),
        ("9 bench determinism", Duration::from_secs(120), determinism),
    ];
    let mut failed = 0;
    for (name, limit, run) in criteria {
        let start = Instant::now();
        let verdict = run();
        let elapsed = start.elapsed();
        let verdict = match verdict {
            Verdict::Pass(d) if elapsed > limit => Verdict::Fail(format!("{d}; over time limit {limit:?}")),
            v => v,
        };
        let (tag, detail) = match verdict {
            Verdict::Pass(d) => ("PASS", d),
            Verdict::Fail(d) => {
                failed += 1;
                ("FAIL", d)
            }
            Verdict::Skip(d) => ("SKIP", d),
        };
        println!("{tag} criterion {name}: {detail} [{:.1}s]", elapsed.as_secs_f64());
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
