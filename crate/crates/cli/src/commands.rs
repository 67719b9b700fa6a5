use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use rayon::prelude::*;
use uacal::checkpoint::{self, CheckpointMeta};
use uacal::experiment::{self, RunConfig};
use uacal::generate::GenerationRecord;
use uacal::losses::LossKind;
use uacal::metrics::{
    calibration_report, rejection_curve, roc_curve, CalibrationReport, EvalRecord, UNCERTAINTY_METRICS,
};
use uacal::model::ModelParams;
use uacal::train::TrainLog;
use uacal::world::{self, QAItem, Split, Vocab};

use crate::error::CliError;
use crate::plot::{Chart, Series};
use crate::run::{read_json, read_jsonl, RunDir};

pub struct Ctx {
    pub config: RunConfig,
    /// Decode items one after another on the calling thread.
    pub deterministic: bool,
}

/// Which prompts to decode.
#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum SplitChoice {
    Eval,
    Ood,
    /// Eval followed by ood.
    Test,
    Finetune,
}

fn stem(path: &Path) -> String {
    path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default()
}

fn label(path: &Path, prefix: &str) -> String {
    let s = stem(path);
    s.strip_prefix(prefix).map(str::to_string).unwrap_or(s)
}

/// Loads `path`, or generates the configured world and saves it into the run.
pub fn world(ctx: &Ctx, run: &mut RunDir, path: Option<&Path>) -> Result<Vec<QAItem>> {
    match path {
        Some(p) => {
            require(p)?;
            Ok(world::load_jsonl(p)?)
        }
        None => genworld(ctx, run),
    }
}

pub fn genworld(ctx: &Ctx, run: &mut RunDir) -> Result<Vec<QAItem>> {
    let items = world::generate_world(&ctx.config.world)?;
    world::save_jsonl(&items, &run.join("world.jsonl"))?;
    run.record("world.jsonl")?;
    let counts: Vec<String> = world::split_counts(&items).iter().map(|(s, n)| format!("{s} {n}")).collect();
    println!("world: {} ({})", items.len(), counts.join(", "));
    Ok(items)
}

fn write_log(run: &mut RunDir, name: &str, log: &TrainLog) -> Result<PathBuf> {
    let mut buf = Vec::new();
    log.write_csv(&mut buf)?;
    run.write(name, buf)
}

fn require(path: &Path) -> Result<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(CliError::missing(format!("{}: no such file", path.display())).into())
    }
}

fn load_checkpoint(path: &Path, vocab: &Vocab) -> Result<(ModelParams, CheckpointMeta)> {
    let (params, meta) = checkpoint::load(path).with_context(|| format!("loading {}", path.display()))?;
    if params.config.vocab_size != vocab.len() {
        return Err(CliError::config(format!(
            "{} was trained on a vocabulary of {} words but the world has {}",
            path.display(),
            params.config.vocab_size,
            vocab.len()
        ))
        .into());
    }
    Ok((params, meta))
}

pub fn pretrain(ctx: &Ctx, run: &mut RunDir, world_path: Option<&Path>) -> Result<PathBuf> {
    let items = world(ctx, run, world_path)?;
    let vocab = world::build_vocab(&items);
    let cfg = &ctx.config;
    let (params, log) = experiment::pretrain(&cfg.model, &cfg.pretrain, &items, &vocab)?;
    let path = run.join("base.ckpt");
    let meta = CheckpointMeta { loss_kind: Some(cfg.pretrain.loss_kind), steps: log.records.len() as u64 };
    checkpoint::save(&path, &params, meta)?;
    run.record("base.ckpt")?;
    write_log(run, "trainlog-pretrain.csv", &log)?;
    let last = log.records.last().map_or(f64::NAN, |r| r.loss);
    println!("pretrain: {} steps, final loss {last:.4}", log.records.len());
    Ok(path)
}

pub fn finetune(ctx: &Ctx, run: &mut RunDir, base: &Path, world_path: Option<&Path>) -> Result<PathBuf> {
    require(base)?;
    let items = world(ctx, run, world_path)?;
    let vocab = world::build_vocab(&items);
    let (base, _) = load_checkpoint(base, &vocab)?;
    let cfg = &ctx.config.finetune;
    let kind = cfg.loss_kind;
    let (params, log) = experiment::finetune(&base, &ctx.config.lora, cfg, &items, &vocab)?;
    let name = format!("finetune-{kind}.ckpt");
    let path = run.join(&name);
    checkpoint::save(&path, &params, CheckpointMeta { loss_kind: Some(kind), steps: log.records.len() as u64 })?;
    run.record(&name)?;
    write_log(run, &format!("trainlog-{kind}.csv"), &log)?;
    if let Some((hc, hi)) = tail_entropies(&log) {
        println!("finetune {kind}: {} steps, final entropy correct {hc:.4} incorrect {hi:.4}", log.records.len());
    }
    Ok(path)
}

/// Mean entropy over correct and incorrect positions across the last tenth of
/// the steps.
pub fn tail_entropies(log: &TrainLog) -> Option<(f64, f64)> {
    let tail = log.tail(0.1);
    let mean = |f: fn(&uacal::train::StepRecord) -> Option<(f64, usize)>| {
        let (s, n) = tail.iter().filter_map(f).fold((0.0, 0usize), |(s, n), (h, k)| (s + h * k as f64, n + k));
        (n > 0).then(|| s / n as f64)
    };
    let correct = mean(|r| r.mean_entropy_correct.map(|h| (h, r.n_correct)));
    let incorrect = mean(|r| r.mean_entropy_incorrect.map(|h| (h, r.n_incorrect)));
    correct.zip(incorrect)
}

fn select(items: &[QAItem], split: SplitChoice) -> Vec<&QAItem> {
    match split {
        SplitChoice::Eval => world::split_items(items, Split::Eval),
        SplitChoice::Ood => world::split_items(items, Split::Ood),
        SplitChoice::Finetune => world::split_items(items, Split::Finetune),
        SplitChoice::Test => experiment::test_items(items),
    }
}

pub fn generate(
    ctx: &Ctx,
    run: &mut RunDir,
    ckpt: &Path,
    world_path: Option<&Path>,
    split: SplitChoice,
) -> Result<PathBuf> {
    require(ckpt)?;
    let items = world(ctx, run, world_path)?;
    let vocab = world::build_vocab(&items);
    let (params, _) = load_checkpoint(ckpt, &vocab)?;
    let model = experiment::decoding_model(&params)?;
    let chosen = select(&items, split);
    let cfg = &ctx.config.generate;
    let one = |(k, item): (usize, &&QAItem)| experiment::generate_item(&model, &vocab, item, k, cfg);
    let gens: Vec<GenerationRecord> = if ctx.deterministic {
        chosen.iter().enumerate().map(one).collect::<uacal::Result<_>>()?
    } else {
        chosen.par_iter().enumerate().map(one).collect::<uacal::Result<_>>()?
    };
    let name = format!("generations-{}.jsonl", label(ckpt, "finetune-"));
    println!("generate: {} prompts from {}", gens.len(), ckpt.display());
    run.write_jsonl(&name, &gens)
}

fn check_report(r: &CalibrationReport) -> Result<()> {
    let unit = |name: &str, v: f64| {
        if (0.0..=1.0).contains(&v) {
            Ok(())
        } else {
            Err(CliError::invalid_output(format!("{name} = {v} lies outside [0, 1]")))
        }
    };
    unit("accuracy", r.accuracy)?;
    unit("ece", r.ece)?;
    unit("mean_rouge_l", r.mean_rouge_l)?;
    for m in &r.metrics {
        for (field, v) in [("auroc", m.auroc), ("auarc", m.auarc), ("ood_auroc", m.ood_auroc), ("ood_aupr", m.ood_aupr)]
        {
            if let Some(v) = v {
                unit(&format!("{}.{field}", m.metric), v)?;
            }
        }
        for (field, v) in [("spearman", m.spearman), ("pearson", m.pearson)] {
            if let Some(v) = v.filter(|v| !(-1.0..=1.0).contains(v)) {
                return Err(CliError::invalid_output(format!("{}.{field} = {v} lies outside [-1, 1]", m.metric)).into());
            }
        }
    }
    Ok(())
}

pub fn evaluate(ctx: &Ctx, run: &mut RunDir, generations: &Path, world_path: Option<&Path>) -> Result<PathBuf> {
    let mut gens: Vec<GenerationRecord> = read_jsonl(generations)?;
    let items = world(ctx, run, world_path)?;
    let (records, report) = experiment::evaluate(&mut gens, &items, &ctx.config.uncertainty)?;
    check_report(&report)?;
    let name = label(generations, "generations-");
    run.write_jsonl(&format!("eval-{name}.jsonl"), &records)?;
    run.write(&format!("metrics-{name}.csv"), report.metrics_csv())?;
    run.write(&format!("summary-{name}.csv"), report.summary_csv())?;
    let md = report.markdown(&name);
    run.write(&format!("report-{name}.md"), &md)?;
    print!("{md}");
    run.write_json(&format!("report-{name}.json"), &report)
}

/// Rows of `(section, field, value)` covering every number of a report.
fn report_rows(r: &CalibrationReport) -> Vec<(String, &'static str, Option<f64>)> {
    let mut rows = vec![
        ("summary".to_string(), "accuracy", Some(r.accuracy)),
        ("summary".to_string(), "exact_match_rate", Some(r.exact_match_rate)),
        ("summary".to_string(), "mean_rouge_l", Some(r.mean_rouge_l)),
        ("summary".to_string(), "ece", Some(r.ece)),
    ];
    for m in &r.metrics {
        for (field, v) in [
            ("auroc", m.auroc),
            ("auarc", m.auarc),
            ("spearman", m.spearman),
            ("pearson", m.pearson),
            ("ood_auroc", m.ood_auroc),
            ("ood_aupr", m.ood_aupr),
        ] {
            rows.push((m.metric.clone(), field, v));
        }
    }
    rows
}

pub struct Delta {
    pub section: String,
    pub field: &'static str,
    pub a: Option<f64>,
    pub b: Option<f64>,
}

impl Delta {
    pub fn delta(&self) -> Option<f64> {
        Some(self.b? - self.a?)
    }
}

pub fn deltas(a: &CalibrationReport, b: &CalibrationReport) -> Result<Vec<Delta>> {
    let (ra, rb) = (report_rows(a), report_rows(b));
    if ra.len() != rb.len() || ra.iter().zip(&rb).any(|(x, y)| x.0 != y.0) {
        return Err(CliError::usage("reports list different metrics").into());
    }
    Ok(ra.into_iter().zip(rb).map(|((section, field, a), (_, _, b))| Delta { section, field, a, b }).collect())
}

pub fn compare(run: &mut RunDir, a: &Path, b: &Path) -> Result<PathBuf> {
    let (ra, rb): (CalibrationReport, CalibrationReport) = (read_json(a)?, read_json(b)?);
    let (la, lb) = (label(a, "report-"), label(b, "report-"));
    let rows = deltas(&ra, &rb)?;
    let cell = |v: Option<f64>| v.map_or_else(String::new, |v| format!("{v:.6}"));
    let mut csv = format!("section,field,{la},{lb},delta\n");
    let mut md = format!("## {lb} vs {la}\n\nDelta is {lb} minus {la}.\n\n| Section | Field | {la} | {lb} | Delta |\n|---|---|---|---|---|\n");
    for d in &rows {
        let cells = [cell(d.a), cell(d.b), cell(d.delta())];
        writeln!(csv, "{},{},{}", d.section, d.field, cells.join(","))?;
        let shown = cells.map(|c| if c.is_empty() { "n/a".to_string() } else { c });
        writeln!(md, "| {} | {} | {} |", d.section, d.field, shown.join(" | "))?;
    }
    run.write("compare.csv", csv)?;
    print!("{md}");
    run.write("compare.md", md)
}

fn moving_average(points: &[(f64, f64)], window: usize) -> Vec<(f64, f64)> {
    let w = window.max(1);
    points
        .iter()
        .enumerate()
        .map(|(i, &(x, _))| {
            let lo = i.saturating_sub(w - 1);
            let slice = &points[lo..=i];
            (x, slice.iter().map(|p| p.1).sum::<f64>() / slice.len() as f64)
        })
        .collect()
}

pub fn report(run: &mut RunDir, evals: &[PathBuf], logs: &[PathBuf]) -> Result<PathBuf> {
    if evals.is_empty() && logs.is_empty() {
        return Err(CliError::usage("report needs at least one --eval or --log file").into());
    }
    let mut md = String::from("# Calibration report\n\n");
    let mut sets = Vec::new();
    for path in evals {
        let records: Vec<EvalRecord> = read_jsonl(path)?;
        let report = calibration_report(&records)?;
        check_report(&report)?;
        let name = label(path, "eval-");
        md.push_str(&report.markdown(&name));
        md.push('\n');
        sets.push((name, records, report));
    }

    if !sets.is_empty() {
        md.push_str("## Figures\n\n");
        for metric in UNCERTAINTY_METRICS {
            let mut roc = Vec::new();
            let mut arc = Vec::new();
            for (name, records, _) in &sets {
                let ind: Vec<&EvalRecord> = records.iter().filter(|r| !r.ood).collect();
                let scores: Vec<f64> = ind.iter().map(|r| score(r, metric)).collect();
                let wrong: Vec<bool> = ind.iter().map(|r| !r.correct).collect();
                let right: Vec<bool> = ind.iter().map(|r| r.correct).collect();
                if let Ok(points) = roc_curve(&scores, &wrong) {
                    roc.push(Series::new(name.clone(), points));
                }
                arc.push(Series::new(name.clone(), rejection_curve(&scores, &right)?));
            }
            let chart = Chart {
                diagonal: true,
                ..Chart::new(format!("Incorrect-answer ROC: {metric}"), "false positive rate", "true positive rate")
                    .unit_square()
            };
            let file = format!("roc-{metric}.svg");
            run.write(&file, chart.lines(&roc))?;
            writeln!(md, "- ![ROC {metric}]({file})")?;
            let chart =
                Chart::new(format!("Accuracy-rejection: {metric}"), "fraction rejected", "accuracy of retained");
            let chart = Chart { x_range: Some((0.0, 1.0)), ..chart };
            let file = format!("arc-{metric}.svg");
            run.write(&file, chart.lines(&arc))?;
            writeln!(md, "- ![ARC {metric}]({file})")?;
        }

        let mut ood = Vec::new();
        for (name, records, _) in &sets {
            let scores: Vec<f64> = records.iter().map(|r| r.uncertainty.perplexity).collect();
            let labels: Vec<bool> = records.iter().map(|r| r.ood).collect();
            if let Ok(points) = roc_curve(&scores, &labels) {
                ood.push(Series::new(name.clone(), points));
            }
        }
        if !ood.is_empty() {
            let chart = Chart {
                diagonal: true,
                ..Chart::new("OOD ROC: perplexity", "false positive rate", "true positive rate").unit_square()
            };
            run.write("roc-ood-perplexity.svg", chart.lines(&ood))?;
            writeln!(md, "- ![OOD ROC](roc-ood-perplexity.svg)")?;
        }

        let points: Vec<Series> =
            sets.iter().map(|(n, _, r)| Series::new(n.clone(), vec![(r.ece, r.accuracy)])).collect();
        run.write("accuracy-ece.svg", Chart::new("Accuracy vs ECE", "ECE", "accuracy").scatter(&points))?;
        writeln!(md, "- ![Accuracy vs ECE](accuracy-ece.svg)")?;
    }

    if !logs.is_empty() {
        md.push_str("\n## Training token entropy\n\n| Run | Steps | Final entropy, correct | Final entropy, incorrect | Gap |\n|---|---|---|---|---|\n");
        let mut figures = String::new();
        for path in logs {
            let file = std::fs::File::open(path).map_err(|e| CliError::missing(format!("{}: {e}", path.display())))?;
            let log = TrainLog::read_csv(file).with_context(|| format!("reading {}", path.display()))?;
            let name = label(path, "trainlog-");
            let curve = |f: fn(&uacal::train::StepRecord) -> Option<f64>| -> Vec<(f64, f64)> {
                let raw: Vec<(f64, f64)> =
                    log.records.iter().filter_map(|r| f(r).map(|h| (r.step as f64, h))).collect();
                moving_average(&raw, log.records.len() / 20)
            };
            let series = [
                Series::new("correct (C)", curve(|r| r.mean_entropy_correct)),
                Series { dashed: true, ..Series::new("incorrect (C~)", curve(|r| r.mean_entropy_incorrect)) },
            ];
            let file = format!("entropy-{name}.svg");
            run.write(
                &file,
                Chart::new(format!("Token entropy during training: {name}"), "step", "mean entropy (nats)")
                    .lines(&series),
            )?;
            writeln!(figures, "- ![Entropy {name}]({file})")?;
            match tail_entropies(&log) {
                Some((c, i)) => writeln!(md, "| {name} | {} | {c:.4} | {i:.4} | {:.4} |", log.records.len(), i - c)?,
                None => writeln!(md, "| {name} | {} | n/a | n/a | n/a |", log.records.len())?,
            }
        }
        md.push('\n');
        md.push_str(&figures);
    }
    run.write("report.md", md)
}

fn score(r: &EvalRecord, metric: &str) -> f64 {
    let u = &r.uncertainty;
    match metric {
        "perplexity" => u.perplexity,
        "mean_token_entropy" => u.mean_token_entropy,
        "predictive_entropy" => u.predictive_entropy,
        _ => u.semantic_entropy,
    }
}

/// genworld, pretrain, fine-tuning with both objectives from the same base,
/// decoding, evaluation, comparison and report, all in one run directory.
pub fn paper_mirror(ctx: &Ctx, run: &mut RunDir) -> Result<()> {
    genworld(ctx, run)?;
    let world_path = run.join("world.jsonl");
    let w = Some(world_path.as_path());
    let base = pretrain(ctx, run, w)?;
    let mut evals = Vec::new();
    let mut logs = Vec::new();
    let mut reports = Vec::new();
    let mut ckpts = vec![base.clone()];
    for kind in [LossKind::Clm, LossKind::UaClm] {
        let mut ft = Ctx { config: ctx.config.clone(), deterministic: ctx.deterministic };
        ft.config.finetune.loss_kind = kind;
        ckpts.push(finetune(&ft, run, &base, w)?);
        logs.push(run.join(&format!("trainlog-{kind}.csv")));
    }
    for ckpt in &ckpts {
        let gens = generate(ctx, run, ckpt, w, SplitChoice::Test)?;
        reports.push(evaluate(ctx, run, &gens, w)?);
        evals.push(run.join(&format!("eval-{}.jsonl", label(&gens, "generations-"))));
    }
    compare(run, &reports[1], &reports[2])?;
    report(run, &evals, &logs)?;
    Ok(())
}
