use std::fs;
use std::path::{Path, PathBuf};

use ltsa::attention::{attention_scores, summarize_attention};
use ltsa::checkpoint::Checkpoint;
use ltsa::cohort::io::{read_dataset, write_bytes, write_csv, write_dataset, Dataset};
use ltsa::cohort::{generate_cohort, split_patients, Cohort, CohortConfig, PatientSplit, SplitName};
use ltsa::evaluation::{compare as compare_evals, evaluate as evaluate_source, report_rows, EvalGrid, Metric, ModelEval};
use ltsa::model::{Model, ModelConfig, ModelKind};
use ltsa::trainer::{TrainConfig, TrainRun};
use ltsa::{Error, Result};
use serde::Serialize;
use serde_json::json;

use crate::config::RunConfig;
use crate::plot::{box_plot, curve_plot, SampleRow};
use crate::source::{load_model, Loaded, Source};
use crate::{AttentionArgs, CompareArgs, EvalOptions, EvaluateArgs, Global, Kind, PlotArgs, PlotKind, Preset, SimulateArgs, TrainArgs};

fn seed(g: &Global) -> Result<u64> {
    g.seed.ok_or_else(|| Error::Config("--seed is required".into()))
}

fn out_dir(g: &Global) -> Result<PathBuf> {
    let dir = g.out.clone().ok_or_else(|| Error::Config("--out is required".into()))?;
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    Ok(dir)
}

/// Patients of one split, or every patient for `all` (a held-out dataset).
fn scored_subset(cohort: Cohort, split: &PatientSplit, name: &str) -> Result<Cohort> {
    if name == "all" {
        return Ok(cohort);
    }
    let which: SplitName = name
        .parse()
        .map_err(|_| Error::Config(format!("unknown split {name:?}; expected train, val, test or all")))?;
    Ok(cohort.subset(split, which))
}

/// The dataset and its patient split; a dataset without one is split here.
fn load_data(dir: &Path, seed: u64, rc: &RunConfig) -> Result<(Cohort, PatientSplit)> {
    let Dataset { cohort, split, .. } = read_dataset(dir)?;
    let split = match split {
        Some(s) => s,
        None => {
            log::warn!("{} has no splits.csv; splitting with seed {seed}", dir.display());
            split_patients(&cohort, rc.split()?, seed)?
        }
    };
    Ok((cohort, split))
}

fn eval_grid(rc: &RunConfig, opts: &EvalOptions) -> Result<EvalGrid> {
    let mut grid = rc.grid()?;
    if let Some(t) = &opts.times {
        grid.times = t.clone();
    }
    if let Some(h) = &opts.horizons {
        grid.horizons = h.clone();
    }
    grid.validate()?;
    Ok(grid)
}

pub fn simulate(g: &Global, a: &SimulateArgs) -> Result<()> {
    let seed = seed(g)?;
    let out = out_dir(g)?;
    let rc = RunConfig::load(g.config.as_deref())?;
    let base = match a.preset {
        Preset::Areds => CohortConfig::areds_like(1000, seed),
        Preset::Ohts => CohortConfig::ohts_like(1000, seed),
        Preset::Smoke => CohortConfig::areds_like(100, seed),
        Preset::ZeroHazard => {
            let mut c = CohortConfig::areds_like(100, seed);
            c.hazard_a = 0.0;
            c.hazard_b = -800.0;
            c.target_censoring = None;
            c
        }
    };
    let mut cfg = rc.cohort(base)?;
    cfg.seed = seed;
    if let Some(n) = a.patients {
        cfg.n_patients = n;
    }
    let cohort = generate_cohort(&cfg)?;
    let split = split_patients(&cohort, rc.split()?, seed)?;
    let summary = cohort.summary();
    write_dataset(&out, &Dataset { cohort, generator: Some(cfg), split: Some(split) })?;
    let text = format!("{summary}\n");
    write_bytes(&out.join("summary.txt"), text.as_bytes())?;
    print!("{text}");
    Ok(())
}

#[derive(Serialize)]
struct HistoryRow {
    epoch: usize,
    train_loss: f64,
    val_metric: Option<f64>,
    lr: f64,
}

fn save_run(out: &Path, run: &TrainRun, init_seed: u64) -> Result<()> {
    Checkpoint::from_run(run, init_seed).save(out)?;
    write_csv(
        &out.join("history.csv"),
        run.state.history.iter().map(|h| HistoryRow {
            epoch: h.epoch,
            train_loss: h.train_loss,
            val_metric: h.val_metric,
            lr: h.lr,
        }),
    )
}

pub fn train(g: &Global, a: &TrainArgs) -> Result<()> {
    let seed = seed(g)?;
    let out = out_dir(g)?;
    let rc = RunConfig::load(g.config.as_deref())?;
    let (cohort, split) = load_data(&a.data, seed, &rc)?;
    let train = cohort.subset(&split, SplitName::Train);
    let val = cohort.subset(&split, SplitName::Val);
    let kind = match a.kind {
        Kind::Ltsa => ModelKind::Ltsa,
        Kind::Baseline => ModelKind::Baseline,
    };
    let (init_seed, mut run) = match &a.resume {
        Some(dir) => {
            let ck = Checkpoint::load(dir)?;
            let mut run = ck
                .run
                .ok_or_else(|| Error::Config(format!("{} holds no training state to resume", dir.display())))?;
            if run.model.config.kind != kind {
                return Err(Error::Config(format!(
                    "checkpoint is a {} run, not {kind}",
                    run.model.config.kind
                )));
            }
            if let Some(e) = a.epochs {
                run.config.max_epochs = e;
                // Reopen a run that only stopped for lack of epochs.
                if run.state.epochs_done < e && run.state.schedule.since_best < run.config.patience {
                    run.state.finished = false;
                }
            }
            (ck.init_seed, run)
        }
        None => {
            let mut tc = rc.train(TrainConfig::desk(kind))?;
            tc.seed = seed;
            if let Some(e) = a.epochs {
                tc.max_epochs = e;
            }
            let mut mc = ModelConfig::desk(kind, cohort.grid, cohort.max_sequence_len().max(1));
            mc.encoder.image_size = cohort.image_size;
            (seed, TrainRun::start(Model::init(mc, seed)?, &train, tc)?)
        }
    };
    let result = run.run(&train, &val, |r| save_run(&out, r, init_seed));
    save_run(&out, &run, init_seed)?;
    result?;
    let best = run.state.schedule.best.map_or("n/a".into(), |b| format!("{b:.4}"));
    println!(
        "{kind}: {} epochs, best validation C {best} at epoch {}",
        run.state.epochs_done, run.state.schedule.best_epoch
    );
    Ok(())
}

fn sample_rows(eval: &ModelEval) -> Vec<SampleRow> {
    let mut rows = Vec::new();
    for metric in [Metric::Concordance, Metric::Brier] {
        for c in &eval.cells {
            if let Some(b) = c.boot(metric) {
                rows.extend(b.samples.iter().enumerate().map(|(i, &v)| SampleRow {
                    model: eval.name.clone(),
                    metric: metric_name(metric).into(),
                    t: c.cell.t_years,
                    dt: c.cell.dt_years,
                    sample: i,
                    value: v,
                }));
            }
        }
    }
    rows
}

fn metric_name(m: Metric) -> &'static str {
    match m {
        Metric::Concordance => "concordance",
        Metric::Brier => "brier",
    }
}

fn fmt_opt(x: Option<f64>) -> String {
    x.map_or("-".into(), |v| format!("{v:.4}"))
}

fn eval_one(name: &str, loaded: &Loaded, cohort: &Cohort, grid: &EvalGrid, n_boot: usize, seed: u64) -> Result<ModelEval> {
    evaluate_source(name, cohort, &loaded.scores(cohort)?, grid, n_boot, seed)
}

pub fn evaluate(g: &Global, a: &EvaluateArgs) -> Result<()> {
    let seed = seed(g)?;
    let out = out_dir(g)?;
    let rc = RunConfig::load(g.config.as_deref())?;
    let grid = eval_grid(&rc, &a.eval)?;
    let n_boot = a.eval.boot.map_or_else(|| rc.n_boot(), Ok)?;
    let (cohort, split) = load_data(&a.eval.data, seed, &rc)?;
    let sub = scored_subset(cohort, &split, &a.eval.split)?;
    let loaded = Loaded::open(&Source::parse(&a.model))?;
    let eval = eval_one(&loaded.name(), &loaded, &sub, &grid, n_boot, seed)?;
    write_csv(&out.join("concordance.csv"), report_rows(&eval, Metric::Concordance, None))?;
    write_csv(&out.join("brier.csv"), report_rows(&eval, Metric::Brier, None))?;
    write_csv(&out.join("samples.csv"), sample_rows(&eval))?;
    println!("{}: {} eyes, mean C {}", eval.name, sub.eyes.len(), fmt_opt(eval.mean_concordance()));
    println!("   t   dt        C    Brier   pairs");
    for c in &eval.cells {
        println!(
            "{:>4} {:>4} {:>8} {:>8} {:>7}",
            c.cell.t_years,
            c.cell.dt_years,
            fmt_opt(c.concordance),
            fmt_opt(c.brier),
            c.n_pairs
        );
    }
    Ok(())
}

#[derive(Serialize)]
struct ComparisonRow {
    metric: &'static str,
    t: f64,
    dt: f64,
    raw_p: Option<f64>,
    p_adjusted: Option<f64>,
    stars: String,
    degenerate: bool,
}

pub fn compare(g: &Global, a: &CompareArgs) -> Result<()> {
    let seed = seed(g)?;
    let out = out_dir(g)?;
    let rc = RunConfig::load(g.config.as_deref())?;
    let grid = eval_grid(&rc, &a.eval)?;
    let n_boot = a.eval.boot.map_or_else(|| rc.n_boot(), Ok)?;
    if n_boot < 2 {
        return Err(Error::Config("compare needs at least 2 bootstrap resamples".into()));
    }
    let (cohort, split) = load_data(&a.eval.data, seed, &rc)?;
    let sub = scored_subset(cohort, &split, &a.eval.split)?;
    let la = Loaded::open(&Source::parse(&a.a))?;
    let lb = Loaded::open(&Source::parse(&a.b))?;
    let (mut na, mut nb) = (la.name(), lb.name());
    if na == nb {
        na.push_str("-a");
        nb.push_str("-b");
    }
    // Same seed on both sides: the resamples are paired.
    let ea = eval_one(&na, &la, &sub, &grid, n_boot, seed)?;
    let eb = eval_one(&nb, &lb, &sub, &grid, n_boot, seed)?;
    let mut cmp_rows = Vec::new();
    let mut c_cmp = Vec::new();
    for metric in [Metric::Concordance, Metric::Brier] {
        let cmp = compare_evals(&ea, &eb, metric)?;
        let mut rows = report_rows(&ea, metric, Some(&cmp));
        rows.extend(report_rows(&eb, metric, None));
        write_csv(&out.join(format!("{}.csv", metric_name(metric))), rows)?;
        cmp_rows.extend(cmp.iter().map(|c| ComparisonRow {
            metric: metric_name(metric),
            t: c.t_years,
            dt: c.dt_years,
            raw_p: c.raw_p,
            p_adjusted: c.p_adjusted,
            stars: c.stars.clone(),
            degenerate: c.degenerate,
        }));
        if metric == Metric::Concordance {
            c_cmp = cmp;
        }
    }
    write_csv(&out.join("comparison.csv"), cmp_rows)?;
    let mut samples = sample_rows(&ea);
    samples.extend(sample_rows(&eb));
    write_csv(&out.join("samples.csv"), samples)?;

    println!("{na} vs {nb}: one-sided Welch on {n_boot} bootstrap samples, Bonferroni adjusted");
    println!("   t   dt {:>10} {:>10}   P_adj  stars", na, nb);
    for ((ca, cb), c) in ea.cells.iter().zip(&eb.cells).zip(&c_cmp) {
        let p = c.p_adjusted.map_or("-".into(), |p| format!("{p:.2e}"));
        println!(
            "{:>4} {:>4} {:>10} {:>10} {:>8}  {}",
            ca.cell.t_years,
            ca.cell.dt_years,
            fmt_opt(ca.concordance),
            fmt_opt(cb.concordance),
            p,
            c.stars
        );
    }
    Ok(())
}

#[derive(Serialize)]
struct ScoreRow {
    patient_id: u32,
    eye_id: u8,
    visit_month: u32,
    offset: usize,
    score: f64,
}

#[derive(Serialize)]
struct BinRow {
    offset: String,
    n: usize,
    median: f64,
}

pub fn attention(g: &Global, a: &AttentionArgs) -> Result<()> {
    let seed = seed(g)?;
    let out = out_dir(g)?;
    let rc = RunConfig::load(g.config.as_deref())?;
    let model = load_model(&a.model)?;
    let (cohort, split) = load_data(&a.data, seed, &rc)?;
    let sub = scored_subset(cohort, &split, &a.split)?;
    let eyes = attention_scores(&model, &sub)?;
    let summary = summarize_attention(&eyes);
    write_csv(
        &out.join("attention_scores.csv"),
        eyes.iter().flat_map(|e| {
            e.scores.iter().enumerate().map(move |(k, &score)| ScoreRow {
                patient_id: e.patient_id,
                eye_id: e.eye_id,
                visit_month: e.visit_months[k],
                offset: e.offset(k),
                score,
            })
        }),
    )?;
    write_csv(
        &out.join("attention_bins.csv"),
        summary.bins.iter().map(|b| BinRow { offset: b.label(), n: b.n, median: b.median }),
    )?;
    let doc = json!({
        "n_eyes": summary.n_eyes,
        "n_multi_visit": summary.n_multi_visit,
        "last_visit_max_fraction": summary.last_visit_max_fraction,
        "uniform_fraction": summary.uniform_fraction,
        "offset_correlation": summary.offset_correlation,
    });
    write_bytes(&out.join("attention_summary.json"), serde_json::to_string_pretty(&doc)?.as_bytes())?;
    println!(
        "{} eyes ({} with 2+ visits); latest visit holds the max in {} (uniform {})",
        summary.n_eyes,
        summary.n_multi_visit,
        fmt_opt(summary.last_visit_max_fraction),
        fmt_opt(summary.uniform_fraction)
    );
    println!("offset  median score  n");
    for b in &summary.bins {
        println!("{:>6}  {:>12.4}  {}", b.label(), b.median, b.n);
    }
    println!("Pearson r(offset, median) = {}", fmt_opt(summary.offset_correlation));
    Ok(())
}

fn parse_eye(s: &str) -> Result<(u32, u8)> {
    let bad = || Error::Config(format!("eye {s:?} should look like patient:eye, e.g. 12:0"));
    let (p, e) = s.split_once(':').ok_or_else(bad)?;
    Ok((p.trim().parse().map_err(|_| bad())?, e.trim().parse().map_err(|_| bad())?))
}

pub fn plot(g: &Global, a: &PlotArgs) -> Result<()> {
    let out = out_dir(g)?;
    match &a.what {
        PlotKind::Box { samples, metric } => {
            let mut reader = csv::Reader::from_path(samples).map_err(|e| match e.into_kind() {
                csv::ErrorKind::Io(io) => Error::io(samples, io),
                other => Error::Data(format!("{}: {other:?}", samples.display())),
            })?;
            let rows = reader.deserialize().collect::<std::result::Result<Vec<SampleRow>, _>>()?;
            let svg = box_plot(&rows, metric)?;
            write_bytes(&out.join(format!("{metric}_box.svg")), svg.as_bytes())
        }
        PlotKind::Curves { models, data, eyes } => {
            let Dataset { cohort, .. } = read_dataset(data)?;
            let mut picked = Vec::new();
            for s in eyes {
                let (p, e) = parse_eye(s)?;
                let rec = cohort
                    .eyes
                    .iter()
                    .find(|r| r.patient_id == p && r.eye_id == e)
                    .ok_or_else(|| Error::Data(format!("dataset has no eye {p}:{e}")))?;
                picked.push(rec.clone());
            }
            let sel = Cohort { grid: cohort.grid, image_size: cohort.image_size, eyes: picked };
            let mut sets = Vec::new();
            for m in models {
                let loaded = Loaded::open(&Source::parse(m))?;
                let forecasts = loaded
                    .forecasts(&sel)?
                    .ok_or_else(|| Error::Config(format!("{m} produces no survival curves")))?;
                let curves = sel
                    .eyes
                    .iter()
                    .zip(&forecasts)
                    .map(|(e, f)| {
                        let last = f.curves.last().expect("every eye has a visit");
                        let mut s = vec![1.0];
                        s.extend_from_slice(last.values());
                        (format!("{}:{}", e.patient_id, e.eye_id), s)
                    })
                    .collect();
                sets.push((loaded.name(), curves));
            }
            let svg = curve_plot(&sets, sel.grid.step_months as f64 / 12.0)?;
            write_bytes(&out.join("survival_curves.svg"), svg.as_bytes())
        }
    }
}
