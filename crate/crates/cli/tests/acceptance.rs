//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero when any criterion fails.

use std::path::Path;
use std::process::Command;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use coda_match::coda::{aitchison_distance, euclidean_distance, Composition, Metric};
use coda_match::effects::{att, ordered_pairs};
use coda_match::gps::{fit, Coefficients, FitOptions};
use coda_match::io::write_csv;
use coda_match::matcher::{
    binary_equivalence_check, match_pair, match_scalar_logit, MatchSet, MatchSpec, PropensityTable,
};
use coda_match::synth::{generate, DgpConfig};

type Outcome = Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome);

fn check(cond: bool, detail: String) -> Outcome {
    if cond {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn comp(parts: &[f64]) -> Composition {
    Composition::close(parts).unwrap()
}

fn random_raw(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
    (0..dim).map(|_| rng.random_range(0.01..1.0)).collect()
}

fn worked_example() -> Outcome {
    let a = comp(&[5.0, 65.0, 30.0]);
    let b = comp(&[10.0, 60.0, 30.0]);
    let c = comp(&[50.0, 20.0, 30.0]);
    let d = comp(&[55.0, 15.0, 30.0]);
    let euc = (
        euclidean_distance(&a, &b).unwrap(),
        euclidean_distance(&c, &d).unwrap(),
    );
    let ait = (
        aitchison_distance(&a, &b).unwrap(),
        aitchison_distance(&c, &d).unwrap(),
    );
    let ok = (euc.0 - 0.070711).abs() <= 1e-6
        && (euc.1 - 0.070711).abs() <= 1e-6
        && (ait.0 - 0.6013).abs() <= 1e-3
        && (ait.1 - 0.2820).abs() <= 1e-3
        && ait.0 / ait.1 > 2.0;
    check(
        ok,
        format!(
            "euclidean {:.6} / {:.6}, aitchison {:.4} / {:.4} (ratio {:.3})",
            euc.0,
            euc.1,
            ait.0,
            ait.1,
            ait.0 / ait.1
        ),
    )
}

fn axiom_suite() -> Outcome {
    const TOL: f64 = 1e-9;
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut failures = Vec::new();
    for trial in 0..1000 {
        let dim = rng.random_range(2..10);
        let (rx, ry, rz) = (
            random_raw(&mut rng, dim),
            random_raw(&mut rng, dim),
            random_raw(&mut rng, dim),
        );
        let (x, y, z) = (comp(&rx), comp(&ry), comp(&rz));
        let d = |a: &Composition, b: &Composition| aitchison_distance(a, b).unwrap();
        let dxy = d(&x, &y);

        let alpha = rng.random_range(0.01..100.0);
        let beta = rng.random_range(0.01..100.0);
        let sx = comp(&rx.iter().map(|v| v * alpha).collect::<Vec<_>>());
        let sy = comp(&ry.iter().map(|v| v * beta).collect::<Vec<_>>());
        if (d(&sx, &sy) - dxy).abs() > TOL {
            failures.push(format!("scale #{trial}"));
        }

        let mut order: Vec<usize> = (0..dim).collect();
        for i in (1..dim).rev() {
            order.swap(i, rng.random_range(0..=i));
        }
        let (px, py) = (x.permuted(&order).unwrap(), y.permuted(&order).unwrap());
        if (d(&px, &py) - dxy).abs() > TOL {
            failures.push(format!("permutation #{trial}"));
        }

        let p = comp(&random_raw(&mut rng, dim));
        if (d(&x.perturb(&p).unwrap(), &y.perturb(&p).unwrap()) - dxy).abs() > TOL {
            failures.push(format!("perturbation #{trial}"));
        }

        for metric in [Metric::Aitchison, Metric::Euclidean] {
            let m = |a: &Composition, b: &Composition| metric.distance(a, b).unwrap();
            let (ab, ba, bc, ac) = (m(&x, &y), m(&y, &x), m(&y, &z), m(&x, &z));
            if ab < 0.0 || (ab - ba).abs() > TOL || ac > ab + bc + TOL || m(&x, &x) != 0.0 {
                failures.push(format!("{metric} metric axioms #{trial}"));
            }
        }
    }
    check(
        failures.is_empty(),
        format!(
            "1000 trials each; {} failures {:?}",
            failures.len(),
            failures.iter().take(5).collect::<Vec<_>>()
        ),
    )
}

fn clr_correctness() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut worst: f64 = 0.0;
    for _ in 0..1000 {
        let dim = rng.random_range(2..20);
        let s: f64 = comp(&random_raw(&mut rng, dim)).clr().coords().iter().sum();
        worst = worst.max(s.abs());
    }
    let uniform_zero = (2..=50).all(|dim| {
        Composition::uniform(dim)
            .unwrap()
            .clr()
            .coords()
            .iter()
            .all(|&c| c == 0.0)
    });
    check(
        worst <= 1e-9 && uniform_zero,
        format!("max |Σ clr| = {worst:.2e}; uniform maps to zero exactly: {uniform_zero}"),
    )
}

fn strong_selection_beta() -> Vec<f64> {
    vec![0.0, 1.2, -0.6, 0.4, 0.0, -0.5, 1.0, 0.6]
}

fn synth(n: usize, levels: usize, beta: Vec<f64>, tau: Vec<f64>, seed: u64) -> DgpConfig {
    DgpConfig {
        n,
        n_covariates: beta.len() / (levels - 1) - 1,
        n_levels: levels,
        beta,
        tau,
        noise_sd: 1.0,
        seed,
    }
}

fn gradient_check() -> Outcome {
    let (data, _) = generate(&synth(1000, 3, strong_selection_beta(), vec![0.0; 3], 4)).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    for _ in 0..20 {
        let values: Vec<f64> = (0..8).map(|_| rng.random_range(-1.5..1.5)).collect();
        let ll = |v: Vec<f64>| {
            Coefficients::from_values(3, 3, v)
                .unwrap()
                .log_likelihood(&data)
                .unwrap()
        };
        let grad = Coefficients::from_values(3, 3, values.clone())
            .unwrap()
            .gradient(&data)
            .unwrap();
        for d in 0..values.len() {
            let mut up = values.clone();
            let mut down = values.clone();
            up[d] += h;
            down[d] -= h;
            let fd = (ll(up) - ll(down)) / (2.0 * h);
            worst = worst.max((fd - grad[d]).abs());
        }
    }
    check(
        worst <= 1e-4,
        format!("20 points, max |analytic − FD| = {worst:.2e}"),
    )
}

fn coefficient_recovery() -> Outcome {
    let beta = vec![0.3, 0.8, -0.5, 0.2, -0.2, -0.4, 0.7, 0.5];
    let mut covered = 0;
    let mut total = 0;
    for seed in 0..20 {
        let (data, truth) =
            generate(&synth(5000, 3, beta.clone(), vec![0.0; 3], 100 + seed)).unwrap();
        let fitted = fit(&data, &FitOptions::default()).map_err(|e| e.to_string())?;
        if !fitted.converged {
            return Err(format!("seed {seed} did not converge"));
        }
        for ((est, se), b) in fitted
            .coefficients
            .values()
            .iter()
            .zip(&fitted.std_errors)
            .zip(&truth.beta)
        {
            total += 1;
            if (est - b).abs() <= 3.0 * se {
                covered += 1;
            }
        }
    }
    let share = covered as f64 / total as f64;
    check(
        share >= 0.95,
        format!(
            "{covered}/{total} coefficients within 3 SE ({:.1}%)",
            100.0 * share
        ),
    )
}

fn neighbour_ids(m: &MatchSet) -> Vec<(i64, Vec<i64>)> {
    m.matches
        .iter()
        .map(|t| (t.treated_id, t.neighbours.iter().map(|n| n.id).collect()))
        .collect()
}

fn binary_reduction() -> Outcome {
    for seed in 0..10 {
        let cfg = synth(500, 2, vec![0.2, 0.9, -0.6], vec![0.0, 1.5], 200 + seed);
        let (data, _) = generate(&cfg).unwrap();
        let fitted = fit(&data, &FitOptions::default()).map_err(|e| e.to_string())?;
        let table = PropensityTable::from_fit(&data, &fitted).unwrap();
        for (t, s) in [(1, 2), (2, 1)] {
            let spec = MatchSpec::new(t, s);
            if !binary_equivalence_check(&table, &spec).unwrap() {
                return Err(format!("seed {seed}: neighbour sets differ for ({t}, {s})"));
            }
            let compositional = match_pair(&table, &spec).unwrap();
            let scalar = match_scalar_logit(&table, &spec).unwrap();
            if neighbour_ids(&compositional) != neighbour_ids(&scalar) {
                return Err(format!("seed {seed}: match sets differ for ({t}, {s})"));
            }
            let a = att(&compositional, &data).unwrap().estimate;
            let b = att(&scalar, &data).unwrap().estimate;
            if a.to_bits() != b.to_bits() {
                return Err(format!("seed {seed}: ATT {a} vs {b}"));
            }
        }
    }
    Ok("10 seeds × 2 directions: identical neighbours and bit-identical ATT".into())
}

/// Default synthetic selection for three levels and three covariates.
fn moderate_selection_beta() -> Vec<f64> {
    vec![0.0, 0.6, -0.3, 0.0, 0.0, 0.0, 0.6, -0.3]
}

struct RecoveryRun {
    mae: Vec<f64>,
    better: usize,
    naive_mae: f64,
}

fn recovery_run(beta: &[f64], seeds: u64) -> Result<RecoveryRun, String> {
    let tau = vec![0.0, 2.0, 5.0];
    let pairs = ordered_pairs(3);
    let mut mae = vec![0.0; pairs.len()];
    let mut naive_mae = 0.0;
    let mut better = 0;
    for seed in 0..seeds {
        let cfg = synth(2000, 3, beta.to_vec(), tau.clone(), 300 + seed);
        let (data, truth) = generate(&cfg).unwrap();
        let fitted = fit(&data, &FitOptions::default()).map_err(|e| e.to_string())?;
        let table = PropensityTable::from_fit(&data, &fitted).unwrap();
        let mean = |level: usize| {
            let ys: Vec<f64> = data
                .units()
                .iter()
                .filter(|u| u.treatment == level)
                .map(|u| u.outcome)
                .collect();
            ys.iter().sum::<f64>() / ys.len() as f64
        };
        let mut matched_bias = 0.0;
        let mut naive_bias = 0.0;
        for (i, &(t, s)) in pairs.iter().enumerate() {
            let m = match_pair(&table, &MatchSpec::new(t, s)).unwrap();
            let err = (att(&m, &data).unwrap().estimate - truth.att(t, s)).abs();
            mae[i] += err / seeds as f64;
            matched_bias += err;
            naive_bias += (mean(t) - mean(s) - truth.att(t, s)).abs();
        }
        naive_mae += naive_bias / (pairs.len() as u64 * seeds) as f64;
        if matched_bias < naive_bias {
            better += 1;
        }
    }
    Ok(RecoveryRun {
        mae,
        better,
        naive_mae,
    })
}

fn att_recovery() -> Outcome {
    let seeds = 20;
    let pairs = ordered_pairs(3);
    let describe = |mae: &[f64]| {
        pairs
            .iter()
            .zip(mae)
            .map(|((t, s), e)| format!("({t},{s}) {e:.3}"))
            .collect::<Vec<_>>()
            .join(", ")
    };
    let moderate = recovery_run(&moderate_selection_beta(), seeds)?;
    let strong = recovery_run(&strong_selection_beta(), seeds)?;
    let worst = moderate.mae.iter().copied().fold(0.0, f64::max);
    let share = strong.better as f64 / seeds as f64;
    check(
        worst <= 0.15 && share >= 0.8,
        format!(
            "default DGP MAE {}; strong selection: matching beats naive on {}/{seeds} seeds \
             (naive MAE {:.3}, matched MAE {})",
            describe(&moderate.mae),
            strong.better,
            strong.naive_mae,
            describe(&strong.mae),
        ),
    )
}

/// Per treated unit, the comparison with the smallest distance (ties to the
/// smaller id), computed from the public distance functions.
fn brute_force_argmin(
    rows: &[(i64, usize, Composition)],
    t: usize,
    s: usize,
    metric: Metric,
) -> Vec<(i64, Vec<i64>)> {
    let mut treated: Vec<_> = rows.iter().filter(|r| r.1 == t).collect();
    treated.sort_by_key(|r| r.0);
    treated
        .iter()
        .map(|a| {
            let mut best: Option<(f64, i64)> = None;
            for b in rows.iter().filter(|r| r.1 == s) {
                let d = metric.distance(&a.2, &b.2).unwrap();
                let better = match best {
                    None => true,
                    Some((bd, bid)) => d < bd || (d == bd && b.0 < bid),
                };
                if better {
                    best = Some((d, b.0));
                }
            }
            (a.0, vec![best.unwrap().1])
        })
        .collect()
}

/// Greedy replay: repeatedly take the globally closest remaining pair.
fn greedy_replay(
    rows: &[(i64, usize, Composition)],
    t: usize,
    s: usize,
    metric: Metric,
) -> Vec<(i64, Vec<i64>)> {
    let treated: Vec<_> = rows.iter().filter(|r| r.1 == t).collect();
    let comparison: Vec<_> = rows.iter().filter(|r| r.1 == s).collect();
    let mut free_t: Vec<bool> = vec![true; treated.len()];
    let mut free_c: Vec<bool> = vec![true; comparison.len()];
    let mut out = Vec::new();
    loop {
        let mut best: Option<(f64, i64, i64, usize, usize)> = None;
        for (i, a) in treated.iter().enumerate().filter(|(i, _)| free_t[*i]) {
            for (j, b) in comparison.iter().enumerate().filter(|(j, _)| free_c[*j]) {
                let d = metric.distance(&a.2, &b.2).unwrap();
                let key = (d, b.0, a.0);
                let better = match best {
                    None => true,
                    Some((bd, bc, bt, _, _)) => {
                        key.0 < bd || (key.0 == bd && (key.1, key.2) < (bc, bt))
                    }
                };
                if better {
                    best = Some((d, b.0, a.0, i, j));
                }
            }
        }
        let Some((_, cid, tid, i, j)) = best else {
            break;
        };
        free_t[i] = false;
        free_c[j] = false;
        out.push((tid, vec![cid]));
    }
    out.sort_by_key(|p| p.0);
    out
}

fn brute_force_matcher() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut instances = 0;
    for _ in 0..300 {
        let levels = rng.random_range(2..5);
        let n = rng.random_range(2..=12);
        let mut rows: Vec<(i64, usize, Composition)> = (0..n)
            .map(|i| {
                let raw = random_raw(&mut rng, levels);
                (i as i64 * 3 + 1, rng.random_range(1..=levels), comp(&raw))
            })
            .collect();
        rows[0].1 = 1;
        rows[1].1 = 2;
        let table = PropensityTable::new(
            levels,
            rows.iter().map(|r| r.0).collect(),
            rows.iter().map(|r| r.1).collect(),
            rows.iter().map(|r| r.2.clone()).collect(),
        )
        .unwrap();
        for metric in [Metric::Aitchison, Metric::Euclidean] {
            for replacement in [true, false] {
                let spec = MatchSpec {
                    metric,
                    replacement,
                    ..MatchSpec::new(1, 2)
                };
                let got = neighbour_ids(&match_pair(&table, &spec).unwrap());
                let want = if replacement {
                    brute_force_argmin(&rows, 1, 2, metric)
                } else {
                    greedy_replay(&rows, 1, 2, metric)
                };
                if got != want {
                    return Err(format!(
                        "n = {n}, {metric}, replacement {replacement}: {got:?} vs {want:?}"
                    ));
                }
                instances += 1;
            }
        }
    }
    Ok(format!(
        "{instances} random instances with n ≤ 12 agree exactly"
    ))
}

fn strip_timestamp(json: &str) -> String {
    json.lines()
        .filter(|l| !l.trim_start().starts_with("\"generated_at\""))
        .collect::<Vec<_>>()
        .join("\n")
}

fn cli_determinism() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let cfg = synth(600, 3, strong_selection_beta(), vec![0.0, 2.0, 5.0], 9);
    let (data, _) = generate(&cfg).unwrap();
    let csv = dir.path().join("data.csv");
    write_csv(&data, std::fs::File::create(&csv).unwrap()).unwrap();
    let run = |threads: &str, out: &Path| -> Result<String, String> {
        let status = Command::new(env!("CARGO_BIN_EXE_coda-match"))
            .args(["--threads", threads, "report", "--input"])
            .arg(&csv)
            .args([
                "--covariates",
                "x1,x2,x3",
                "--bootstrap",
                "20",
                "--seed",
                "5",
                "--out",
            ])
            .arg(out)
            .output()
            .map_err(|e| e.to_string())?;
        if !status.status.success() {
            return Err(String::from_utf8_lossy(&status.stderr).into_owned());
        }
        std::fs::read_to_string(out).map_err(|e| e.to_string())
    };
    let a = run("1", &dir.path().join("a.json"))?;
    let b = run("8", &dir.path().join("b.json"))?;
    let c = run("8", &dir.path().join("c.json"))?;
    let (a, b, c) = (
        strip_timestamp(&a),
        strip_timestamp(&b),
        strip_timestamp(&c),
    );
    check(
        a == b && b == c,
        format!(
            "{} bytes; threads 1 vs 8 identical: {}, repeat identical: {}",
            a.len(),
            a == b,
            b == c
        ),
    )
}

fn main() {
    let criteria: [Criterion; 9] = [
        ("C1 worked-example distances", worked_example),
        ("C2 Aitchison axiom suite", axiom_suite),
        ("C3 clr correctness", clr_correctness),
        ("C4 gradient vs finite differences", gradient_check),
        ("C5 coefficient recovery", coefficient_recovery),
        ("C6 binary reduction", binary_reduction),
        ("C7 end-to-end ATT recovery", att_recovery),
        ("C8 brute-force matcher equivalence", brute_force_matcher),
        ("C9 CLI determinism across thread counts", cli_determinism),
    ];
    let mut failed = 0;
    for (name, criterion) in criteria {
        let start = Instant::now();
        let result = criterion();
        let secs = start.elapsed().as_secs_f64();
        match result {
            Ok(detail) => println!("PASS  {name}: {detail} [{secs:.1}s]"),
            Err(detail) => {
                failed += 1;
                println!("FAIL  {name}: {detail} [{secs:.1}s]");
            }
        }
    }
    if failed > 0 {
        println!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
    println!("all acceptance criteria passed");
}
