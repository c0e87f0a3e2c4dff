//! End-to-end acceptance run. Prints one PASS/FAIL line per criterion.

#[path = "../../core/tests/common/mod.rs"]
mod common;

use std::fs;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use ltsa::attention::{attention_scores, summarize_attention, OFFSET_CAP};
use ltsa::cohort::{generate_cohort, split_patients, Cohort, CohortConfig, SplitName};
use ltsa::evaluation::{compare, evaluate, forecast_model, forecast_oracle, EvalGrid, Metric, ModelEval, ScoreSource};
use ltsa::losses::{survival_loss, LossConfig};
use ltsa::metrics::{bonferroni, brier_td, concordance_counts, stars, welch_one_sided, PairCounts, RiskRow, BONFERRONI_M};
use ltsa::model::{Model, ModelConfig, ModelKind};
use ltsa::survival::{EventOutcome, HazardCurve};
use ltsa::trainer::{TrainConfig, TrainRun};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

type Outcome = Result<String, String>;

fn check(cond: bool, detail: String) -> Outcome {
    if cond {
        Ok(detail)
    } else {
        Err(detail)
    }
}

// ---- 3: metric oracles ----

fn naive_counts(rows: &[RiskRow], h: usize) -> PairCounts {
    let mut c = PairCounts::default();
    for a in rows {
        if a.censored || a.event_step > h {
            continue;
        }
        for b in rows {
            if b.event_step > a.event_step {
                c.pairs += 1;
                if a.risk > b.risk {
                    c.concordant += 1;
                } else if a.risk == b.risk {
                    c.tied += 1;
                }
            }
        }
    }
    c
}

fn naive_brier(rows: &[RiskRow], h: usize) -> Option<f64> {
    if rows.is_empty() {
        return None;
    }
    let mut s = 0.0;
    for r in rows {
        let y = (!r.censored && r.event_step <= h) as u8 as f64;
        s += (y - r.risk) * (y - r.risk);
    }
    Some(s / rows.len() as f64)
}

fn metric_oracles() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    for i in 0..200 {
        let n = rng.random_range(0..=50);
        let coarse = rng.random::<bool>();
        let rows: Vec<RiskRow> = (0..n)
            .map(|_| RiskRow {
                risk: if coarse { rng.random_range(0..5) as f64 / 4.0 } else { rng.random() },
                event_step: rng.random_range(1..=12),
                censored: rng.random_bool(0.6),
            })
            .collect();
        let h = rng.random_range(1..=12);
        let fast = concordance_counts(&rows, h).unwrap();
        let slow = naive_counts(&rows, h);
        if fast != slow {
            return Err(format!("instance {i}: counts {fast:?} vs {slow:?}"));
        }
        let oracle_c = (slow.pairs > 0).then(|| (slow.concordant as f64 + 0.5 * slow.tied as f64) / slow.pairs as f64);
        match (fast.value(), oracle_c) {
            (Some(a), Some(b)) if (a - b).abs() <= 1e-12 => {}
            (None, None) => {}
            other => return Err(format!("instance {i}: concordance {other:?}")),
        }
        match (brier_td(&rows, h, false).unwrap(), naive_brier(&rows, h)) {
            (Some(a), Some(b)) if (a - b).abs() <= 1e-12 => {}
            (None, None) => {}
            other => return Err(format!("instance {i}: brier {other:?}")),
        }
    }
    Ok("200 instances agree".into())
}

// ---- 4, 5: gradients and masks ----

fn gradients() -> Outcome {
    let t0 = Instant::now();
    let err = common::full_loss_gradient_error(5, 40, &mut ChaCha8Rng::seed_from_u64(5));
    let took = t0.elapsed();
    check(err < 1e-4 && took < Duration::from_secs(120), format!("max relative error {err:.2e} in {took:.1?}"))
}

fn masks() -> Outcome {
    let model = Model::init(common::tiny_config(6), 1).unwrap();
    let causal = common::causal_invariance_holds(&model, &mut ChaCha8Rng::seed_from_u64(2), 100);
    let padding = common::padding_invariance_holds(&model, &mut ChaCha8Rng::seed_from_u64(4), 100);
    check(causal && padding, format!("causal {causal}, padding {padding}, 100 sequences each"))
}

// ---- 6: loss arithmetic ----

fn loss_examples() -> Outcome {
    let cfg = LossConfig::default();
    let beta_default = cfg.beta == 0.15 && TrainConfig::default().loss.beta == 0.15;
    let beta_json: LossConfig = serde_json::from_str(&serde_json::to_string(&cfg).unwrap()).unwrap();

    // S(2) = 0.9 with hazards 0.05 and 1 - 0.9 / 0.95.
    let h = HazardCurve::new(vec![0.05, 1.0 - 0.9 / 0.95, 0.3]).unwrap();
    let censored = survival_loss(&h, EventOutcome { event_step: 2, censored: true }, &cfg).unwrap();
    let want = 0.85 * -(0.9f64.ln());

    // Uncensored: only the event term, (1 - beta) * 0 + beta * -(ln S(1) + ln h(2)).
    let unc = survival_loss(&h, EventOutcome { event_step: 2, censored: false }, &cfg).unwrap();
    let want_unc = 0.15 * -((0.95f64).ln() + (1.0 - 0.9 / 0.95f64).ln());

    let perfect = HazardCurve::new(vec![1.0 - 1e-12, 0.5]).unwrap();
    let near_zero = survival_loss(&perfect, EventOutcome { event_step: 1, censored: false }, &cfg).unwrap();

    let ok = (censored - want).abs() < 1e-10 && (unc - want_unc).abs() < 1e-10 && near_zero.abs() < 1e-10 && beta_default && beta_json.beta == 0.15;
    check(
        ok,
        format!("censored {censored:.10} (want {want:.10}), uncensored {unc:.10}, perfect {near_zero:.1e}, beta {}", cfg.beta),
    )
}

// ---- 7: Welch against quadrature ----

fn ln_gamma(x: f64) -> f64 {
    const G: f64 = 7.0;
    const C: [f64; 9] = [
        0.999_999_999_999_809_9,
        676.520_368_121_885_1,
        -1_259.139_216_722_402_8,
        771.323_428_777_653_1,
        -176.615_029_162_140_6,
        12.507_343_278_686_905,
        -0.138_571_095_265_720_12,
        9.984_369_578_019_572e-6,
        1.505_632_735_149_311_6e-7,
    ];
    if x < 0.5 {
        let pi = std::f64::consts::PI;
        return (pi / (pi * x).sin()).ln() - ln_gamma(1.0 - x);
    }
    let x = x - 1.0;
    let mut a = C[0];
    for (i, c) in C.iter().enumerate().skip(1) {
        a += c / (x + i as f64);
    }
    let t = x + G + 0.5;
    0.5 * (2.0 * std::f64::consts::PI).ln() + (x + 0.5) * t.ln() - t + a.ln()
}

fn simpson(f: &dyn Fn(f64) -> f64, a: f64, b: f64, fa: f64, fm: f64, fb: f64, whole: f64, tol: f64, depth: u32) -> f64 {
    let m = 0.5 * (a + b);
    let (lm, rm) = (0.5 * (a + m), 0.5 * (m + b));
    let (flm, frm) = (f(lm), f(rm));
    let left = (m - a) / 6.0 * (fa + 4.0 * flm + fm);
    let right = (b - m) / 6.0 * (fm + 4.0 * frm + fb);
    if depth == 0 || (left + right - whole).abs() <= 15.0 * tol {
        return left + right + (left + right - whole) / 15.0;
    }
    simpson(f, a, m, fa, flm, fm, left, tol / 2.0, depth - 1) + simpson(f, m, b, fm, frm, fb, right, tol / 2.0, depth - 1)
}

/// Upper tail of Student's t by integrating the density over x = tan(theta).
fn t_upper_tail(t: f64, df: f64) -> f64 {
    let log_norm = ln_gamma((df + 1.0) / 2.0) - ln_gamma(df / 2.0) - 0.5 * (df * std::f64::consts::PI).ln();
    let f = |th: f64| {
        let c = th.cos();
        if c <= 0.0 {
            return 0.0;
        }
        let x = th.tan();
        (log_norm - (df + 1.0) / 2.0 * (1.0 + x * x / df).ln()).exp() / (c * c)
    };
    let (a, b) = (t.atan(), std::f64::consts::FRAC_PI_2);
    let (fa, fm, fb) = (f(a), f(0.5 * (a + b)), f(b));
    let whole = (b - a) / 6.0 * (fa + 4.0 * fm + fb);
    simpson(&f, a, b, fa, fm, fb, whole, 1e-13, 40)
}

fn welch_oracle(a: &[f64], b: &[f64]) -> f64 {
    let stats = |x: &[f64]| {
        let n = x.len() as f64;
        let m = x.iter().sum::<f64>() / n;
        (m, x.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (n - 1.0) / n, n)
    };
    let (ma, qa, na) = stats(a);
    let (mb, qb, nb) = stats(b);
    let t = (ma - mb) / (qa + qb).sqrt();
    let df = (qa + qb).powi(2) / (qa * qa / (na - 1.0) + qb * qb / (nb - 1.0));
    t_upper_tail(t, df)
}

fn welch_protocol() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let draw = |rng: &mut ChaCha8Rng| {
            let n = rng.random_range(5..60);
            let d = Normal::new(rng.random_range(-0.5..0.5), rng.random_range(0.1..2.0)).unwrap();
            (0..n).map(|_| d.sample(rng)).collect::<Vec<f64>>()
        };
        let (a, b) = (draw(&mut rng), draw(&mut rng));
        let p = welch_one_sided(&a, &b).unwrap().p;
        worst = worst.max((p - welch_oracle(&a, &b)).abs());
    }
    let want = [(1e-6, "****"), (1e-4, "**"), (1e-3, "*"), (0.5, "ns")];
    let got: Vec<&str> = want.iter().map(|(p, _)| stars(bonferroni(*p, BONFERRONI_M).unwrap())).collect();
    let stars_ok = want.iter().zip(&got).all(|((_, w), g)| w == g);
    check(worst < 1e-6 && stars_ok, format!("max |P - quadrature| {worst:.1e}, stars {got:?}"))
}

// ---- 9: simulator calibration ----

fn calibration() -> Outcome {
    let cohort = generate_cohort(&CohortConfig::areds_like(2500, 2024)).unwrap();
    let s = cohort.summary();
    let ok = s.eyes == 5000 && (s.censored_pct - 87.8).abs() <= 2.0 && (s.visits_mean / 6.34 - 1.0).abs() <= 0.15;
    check(ok, format!("{} eyes, censored {:.1}%, mean visits {:.2}", s.eyes, s.censored_pct, s.visits_mean))
}

// ---- 10: reproducibility through the command line ----

fn ltsa(args: &[&str]) {
    let out = Command::new(env!("CARGO_BIN_EXE_ltsa")).args(args).env("RUST_LOG", "warn").output().unwrap();
    assert!(out.status.success(), "ltsa {args:?}: {}", String::from_utf8_lossy(&out.stderr));
}

fn snapshot(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files: Vec<(String, Vec<u8>)> = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                files.push((p.strip_prefix(dir).unwrap().display().to_string(), fs::read(&p).unwrap()));
            }
        }
    }
    files.sort();
    files
}

fn pipeline(root: &Path) {
    let p = |n: &str| root.join(n).display().to_string();
    ltsa(&["simulate", "--preset", "smoke", "--patients", "60", "--seed", "4", "--out", &p("data")]);
    ltsa(&["train", "--data", &p("data"), "--epochs", "2", "--seed", "4", "--out", &p("ltsa")]);
    ltsa(&["train", "--kind", "baseline", "--data", &p("data"), "--epochs", "1", "--seed", "4", "--out", &p("base")]);
    ltsa(&["evaluate", "--model", &p("ltsa"), "--data", &p("data"), "--boot", "50", "--seed", "4", "--out", &p("eval")]);
    ltsa(&["compare", "--a", &p("ltsa"), "--b", &p("base"), "--data", &p("data"), "--boot", "50", "--seed", "4", "--out", &p("cmp")]);
    ltsa(&["attention", "--model", &p("ltsa"), "--data", &p("data"), "--seed", "4", "--out", &p("att")]);
    ltsa(&["plot", "box", "--samples", &p("cmp/samples.csv"), "--out", &p("box")]);
    let manifest = fs::read_to_string(root.join("data/manifest.csv")).unwrap();
    let first: Vec<&str> = manifest.lines().nth(1).unwrap().split(',').take(2).collect();
    let eye = first.join(":");
    ltsa(&["plot", "curves", "--model", &p("ltsa"), "--model", "oracle", "--data", &p("data"), "--eye", &eye, "--out", &p("curves")]);
}

fn reproducibility() -> Outcome {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    pipeline(a.path());
    pipeline(b.path());
    let (sa, sb) = (snapshot(a.path()), snapshot(b.path()));
    let differing: Vec<&str> = sa.iter().zip(&sb).filter(|(x, y)| x != y).map(|(x, _)| x.0.as_str()).collect();
    check(sa.len() == sb.len() && differing.is_empty(), format!("{} files across 8 commands, differing: {differing:?}", sa.len()))
}

// ---- 1, 2, 8: trained models on the default cohort ----

struct Trained {
    ltsa: Model,
    ltsa_eval: ModelEval,
    base_eval: ModelEval,
    oracle_eval: ModelEval,
    random_eval: ModelEval,
    test: Cohort,
    elapsed: Duration,
}

fn train(kind: ModelKind, cohort: &Cohort, train: &Cohort, val: &Cohort) -> Model {
    let mc = ModelConfig::desk(kind, cohort.grid, cohort.max_sequence_len());
    let mut tc = TrainConfig::desk(kind);
    tc.seed = 3;
    let mut run = TrainRun::start(Model::init(mc, 1).unwrap(), train, tc).unwrap();
    run.run(train, val, |_| Ok(())).unwrap();
    run.best_model()
}

fn train_default_cohort() -> Trained {
    let t0 = Instant::now();
    let cohort = generate_cohort(&CohortConfig::areds_like(1000, 7)).unwrap();
    let split = split_patients(&cohort, [0.7, 0.1, 0.2], 7).unwrap();
    let (tr, va) = (cohort.subset(&split, SplitName::Train), cohort.subset(&split, SplitName::Val));
    // Scored on an independent draw of the same generator; the 20% split
    // alone leaves some cells with a handful of cases.
    let te = generate_cohort(&CohortConfig::areds_like(1000, 8)).unwrap();
    let ltsa = train(ModelKind::Ltsa, &cohort, &tr, &va);
    let base = train(ModelKind::Baseline, &cohort, &tr, &va);
    let grid = EvalGrid::default();
    let scored = |m: &Model| ScoreSource::Forecasts { forecasts: forecast_model(m, &te).unwrap(), negate: false };
    let ltsa_eval = evaluate("ltsa", &te, &scored(&ltsa), &grid, 1000, 11).unwrap();
    let base_eval = evaluate("baseline", &te, &scored(&base), &grid, 1000, 11).unwrap();
    let elapsed = t0.elapsed();
    let oracle = ScoreSource::Forecasts { forecasts: forecast_oracle(&te).unwrap(), negate: false };
    let oracle_eval = evaluate("oracle", &te, &oracle, &grid, 0, 11).unwrap();
    let random_eval = evaluate("random", &te, &ScoreSource::Random, &grid, 0, 11).unwrap();
    Trained { ltsa, ltsa_eval, base_eval, oracle_eval, random_eval, test: te, elapsed }
}

fn boot_mean(eval: &ModelEval, i: usize) -> Option<f64> {
    eval.cells[i].concordance_boot.as_ref().map(|b| b.mean)
}

fn directional(t: &Trained) -> Outcome {
    let cmp = compare(&t.ltsa_eval, &t.base_eval, Metric::Concordance).unwrap();
    let (mut cells, mut ahead, mut significant) = (0, 0, 0);
    for (i, c) in cmp.iter().enumerate() {
        if c.t_years < 2.0 {
            continue;
        }
        cells += 1;
        if let (Some(l), Some(b)) = (boot_mean(&t.ltsa_eval, i), boot_mean(&t.base_eval, i)) {
            ahead += (l > b) as usize;
        }
        significant += c.p_adjusted.is_some_and(|p| p <= 0.05) as usize;
    }
    let minutes = t.elapsed.as_secs_f64() / 60.0;
    check(
        cells == 16 && ahead == cells && significant >= 12 && minutes <= 30.0,
        format!(
            "LTSA ahead in {ahead}/{cells} cells, significant in {significant}/{cells}; mean C {:.3} vs {:.3}; {minutes:.1} min",
            t.ltsa_eval.mean_concordance().unwrap_or(f64::NAN),
            t.base_eval.mean_concordance().unwrap_or(f64::NAN)
        ),
    )
}

fn sandwich(t: &Trained) -> Outcome {
    let mut broken = Vec::new();
    for i in 0..t.ltsa_eval.cells.len() {
        let get = |e: &ModelEval| e.cells[i].concordance;
        if let (Some(o), Some(l), Some(r)) = (get(&t.oracle_eval), get(&t.ltsa_eval), get(&t.random_eval)) {
            if !(o >= l && l >= r) {
                let c = &t.ltsa_eval.cells[i].cell;
                broken.push(format!("({}, {}) oracle {o:.3} ltsa {l:.3} random {r:.3}", c.t_years, c.dt_years));
            }
        }
    }
    let random = t.random_eval.mean_concordance().unwrap_or(f64::NAN);
    check(broken.is_empty() && (random - 0.5).abs() <= 0.03, format!("random mean C {random:.3}; out of order: {broken:?}"))
}

fn attention(t: &Trained) -> Outcome {
    let eyes = attention_scores(&t.ltsa, &t.test).unwrap();
    let peaks = eyes.iter().all(|e| e.scores.iter().cloned().fold(f64::MIN, f64::max) == 1.0);
    let s = summarize_attention(&eyes);
    let capped = s.bins.iter().any(|b| b.offset == OFFSET_CAP && b.n > 0);
    let r = s.offset_correlation.unwrap_or(f64::NAN);
    check(peaks && capped && r < 0.0, format!("max 1 per eye {peaks}, >=10 bin filled {capped}, offset r {r:.3}"))
}

fn main() {
    let mut results: Vec<(usize, &str, Outcome)> = Vec::new();
    let run = |f: &dyn Fn() -> Outcome| match catch_unwind(AssertUnwindSafe(f)) {
        Ok(o) => o,
        Err(e) => Err(e
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_else(|| "panicked".into())),
    };
    results.push((3, "metric oracle equivalence", run(&metric_oracles)));
    results.push((4, "gradient correctness", run(&gradients)));
    results.push((5, "mask properties", run(&masks)));
    results.push((6, "loss arithmetic", run(&loss_examples)));
    results.push((7, "statistical protocol", run(&welch_protocol)));
    results.push((9, "simulator calibration", run(&calibration)));
    results.push((10, "reproducibility", run(&reproducibility)));
    match catch_unwind(train_default_cohort) {
        Ok(t) => {
            results.push((1, "directional replication", run(&|| directional(&t))));
            results.push((2, "oracle sandwich", run(&|| sandwich(&t))));
            results.push((8, "attention analysis", run(&|| attention(&t))));
        }
        Err(_) => {
            for (n, name) in [(1, "directional replication"), (2, "oracle sandwich"), (8, "attention analysis")] {
                results.push((n, name, Err("training on the default cohort panicked".into())));
            }
        }
    }
    results.sort_by_key(|r| r.0);
    let mut failed = 0;
    for (n, name, outcome) in &results {
        match outcome {
            Ok(d) => println!("PASS {n:>2} {name}: {d}"),
            Err(d) => {
                failed += 1;
                println!("FAIL {n:>2} {name}: {d}");
            }
        }
    }
    println!("{} of {} criteria passed", results.len() - failed, results.len());
    if failed > 0 {
        std::process::exit(1);
    }
}
