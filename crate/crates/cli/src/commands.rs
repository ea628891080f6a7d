use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use naer_core::calendar;
use naer_core::gridio::{self, GridStack, LatLonGrid, Regridder};
use naer_core::hpo::{incumbent, read_ledger, HyperPoint};
use naer_core::interpret::{explain, ExplainConfig, Method, Target};
use naer_core::labeler::{extract_domain, fit_eof, label_regimes, project, BBox, Regime, RegimeSeries};
use naer_core::metrics::{argmax_rows, one_hot, performance_diagram, roc_curve, score, write_diagram_csv, write_roc_csv, LogReg, Report, WeeklyClimatology};
use naer_core::seeds::derive;
use naer_core::splitter::{load_phase_csv, stratified_split, IndexName, Partition, SplitPlan, Teleconnections};
use naer_core::synthlab::{phase_series, preset_paperlike, simulate, write_phase_csv, SynthSpec};
use naer_core::trainer::{finetune, make_supervised, train_new, ModelCheckpoint, Stage, TrainConfig, TrainData};
use naer_tensor::nn::ModelSpec;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value};

use crate::config::{resolve, resolve_as, PipelineConfig};
use crate::{Cli, Command, DataArgs, ModelKind};

pub fn run(cli: &Cli, cfg: &PipelineConfig) -> Result<()> {
    match &cli.command {
        Command::Convert(a) => convert(a),
        Command::Inspect(a) => inspect(&a.file),
        Command::Anomaly(a) => anomaly(a, cfg),
        Command::Label(a) => label(a, cfg, cli.seed),
        Command::Split(a) => split(a, cfg, cli.seed),
        Command::Train(a) => train(a, cfg, cli.seed),
        Command::Hpo(a) => hpo(a, cfg, cli.seed),
        Command::Evaluate(a) => evaluate(a, cfg, cli.seed),
        Command::Explain(a) => explain_cmd(a, cfg, cli.seed),
        Command::Synth(a) => synth(a, cli.seed),
    }
}

fn emit(v: &impl serde::Serialize) -> Result<()> {
    use std::io::Write;
    let mut out = std::io::stdout().lock();
    match writeln!(out, "{}", serde_json::to_string_pretty(v)?) {
        Err(e) if e.kind() == std::io::ErrorKind::BrokenPipe => Ok(()),
        r => Ok(r?),
    }
}

fn out_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn require(path: &Path) -> Result<()> {
    if path.exists() {
        return Ok(());
    }
    let e = std::io::Error::new(std::io::ErrorKind::NotFound, format!("{} does not exist", path.display()));
    Err(e.into())
}

fn read_stack(path: &Path) -> Result<GridStack> {
    require(path)?;
    gridio::read_gridstack(path).with_context(|| format!("reading {}", path.display()))
}

fn read_labels(path: &Path) -> Result<RegimeSeries> {
    require(path)?;
    RegimeSeries::read_csv(path).with_context(|| format!("reading {}", path.display()))
}

fn read_plan(path: &Path) -> Result<SplitPlan> {
    require(path)?;
    SplitPlan::read_json(path).with_context(|| format!("reading {}", path.display()))
}

fn read_checkpoint(path: &Path) -> Result<ModelCheckpoint> {
    require(path)?;
    ModelCheckpoint::load(path).with_context(|| format!("reading checkpoint {}", path.display()))
}

fn date_range(dates: &[i64]) -> Value {
    match (dates.first(), dates.last()) {
        (Some(&a), Some(&b)) => json!([calendar::format(a), calendar::format(b)]),
        _ => Value::Null,
    }
}

fn grid_summary(g: &LatLonGrid) -> Value {
    json!({
        "ny": g.ny(),
        "nx": g.nx(),
        "lat": [g.lats.first(), g.lats.last()],
        "lon": [g.lons.first(), g.lons.last()],
    })
}

fn convert(a: &crate::ConvertArgs) -> Result<()> {
    let mut stack = read_stack(&a.input)?;
    if !a.variables.is_empty() {
        let names: Vec<&str> = a.variables.iter().map(String::as_str).collect();
        stack = stack.select_variables(&names)?;
    }
    let dst = if a.spacing == gridio::SPACING {
        LatLonGrid::canonical()
    } else {
        LatLonGrid::regular(a.spacing)
    };
    let out = Regridder::new(&stack.grid, &dst)?.apply_stack(&stack, &dst)?;
    gridio::write_gridstack(&a.output, &out)?;
    emit(&json!({ "output": a.output, "grid": grid_summary(&dst), "days": out.len(), "variables": out.variables }))
}

fn inspect(path: &Path) -> Result<()> {
    let bytes = std::fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    let file = gridio::decode(&bytes)?;
    let s = &file.stack;
    let arrays: Vec<Value> = file.arrays.iter().map(|a| json!({ "name": a.name, "shape": a.shape })).collect();
    emit(&json!({
        "file": path,
        "bytes": bytes.len(),
        "grid": grid_summary(&s.grid),
        "variables": s.variables,
        "days": s.len(),
        "dates": date_range(&s.dates),
        "meta": file.meta,
        "arrays": arrays,
    }))
}

fn anomaly(a: &crate::AnomalyArgs, cfg: &PipelineConfig) -> Result<()> {
    let input = resolve(&a.data, &cfg.paths.data, "data")?;
    let output = resolve(&a.anomalies, &cfg.paths.anomalies, "anomalies")?;
    let p = &cfg.anomaly;
    let mut stack = read_stack(&input)?;
    let mut removed = 0;
    if p.drop_corrupt {
        let (clean, report) = gridio::drop_corrupt(&stack);
        removed = stack.len() - clean.len();
        if let Some(path) = &a.removals {
            gridio::write_removals_csv(path, &report)?;
        }
        stack = clean;
    }
    let clim = gridio::build_climatology(&stack, p.window, p.step)?;
    let mut anoms = gridio::anomalies(&stack, &clim)?;
    if p.winter_only {
        anoms = gridio::winter_filter(&anoms);
    }
    gridio::write_gridstack(&output, &anoms)?;
    emit(&json!({
        "output": output,
        "days": anoms.len(),
        "dropped_corrupt": removed,
        "climatology_epochs": clim.epochs.iter().map(|e| [e.start_year, e.end_year]).collect::<Vec<_>>(),
    }))
}

fn synth_spec_for(path: Option<&PathBuf>, grid: &LatLonGrid) -> Result<SynthSpec> {
    let mut spec = match path {
        Some(p) => serde_json::from_str(&std::fs::read_to_string(p)?).with_context(|| format!("synthetic spec {}", p.display()))?,
        None => preset_paperlike(),
    };
    spec.grid = grid.clone();
    Ok(spec)
}

fn label(a: &crate::LabelArgs, cfg: &PipelineConfig, seed: u64) -> Result<()> {
    let input = resolve(&a.anomalies, &cfg.paths.anomalies, "anomalies")?;
    let stack = read_stack(&input)?;
    let templates = synth_spec_for(a.synth_spec.as_ref(), &stack.grid)?.templates(&cfg.labeling.bbox)?;
    let lab = label_regimes(&stack, &templates, &cfg.labeling, derive(seed, "label"))?;
    out_dir(&a.out_dir)?;
    lab.series.write_csv(&a.out_dir.join("labels.csv"))?;
    gridio::write_gsk1(&a.out_dir.join("eofs.gsk"), &lab.basis.to_gsk1())?;
    gridio::write_gsk1(&a.out_dir.join("centroids.gsk"), &lab.centroids.to_gsk1())?;
    let n = lab.series.len() as f64;
    let freq: serde_json::Map<String, Value> = Regime::ALL
        .iter()
        .map(|r| {
            let c = lab.series.labels.iter().filter(|&&l| l == r.index()).count();
            (r.name().to_string(), json!(c as f64 / n))
        })
        .collect();
    let summary = json!({
        "days": lab.series.len(),
        "naming_correlation": lab.naming_correlation,
        "explained_variance": lab.basis.explained_variance,
        "frequencies": freq,
        "config": cfg.labeling,
    });
    std::fs::write(a.out_dir.join("labeling.json"), serde_json::to_string_pretty(&summary)? + "\n")?;
    emit(&summary)
}

fn split(a: &crate::SplitArgs, cfg: &PipelineConfig, seed: u64) -> Result<()> {
    let stack = read_stack(&resolve(&a.anomalies, &cfg.paths.anomalies, "anomalies")?)?;
    let load = |flag: &Option<PathBuf>, conf: &Option<PathBuf>, index: IndexName, what: &str| -> Result<_> {
        let p = resolve(flag, conf, what)?;
        load_phase_csv(&p, index).with_context(|| format!("reading {}", p.display()))
    };
    let tele = Teleconnections {
        enso: load(&a.enso, &cfg.paths.enso, IndexName::Enso, "enso")?,
        pdo: load(&a.pdo, &cfg.paths.pdo, IndexName::Pdo, "pdo")?,
        amo: load(&a.amo, &cfg.paths.amo, IndexName::Amo, "amo")?,
        thresholds: cfg.thresholds,
    };
    let strata = tele.strata(&stack.dates);
    let plan = stratified_split(&stack.dates, &strata, &cfg.split, derive(seed, "split"))?;
    let output = resolve(&a.split, &cfg.paths.split, "split")?;
    plan.write_json(&output)?;
    let [train, val, test] = plan.indices(&stack.dates);
    emit(&json!({
        "output": output,
        "blocks": plan.blocks.len(),
        "days": { "train": train.len(), "validation": val.len(), "test": test.len() },
    }))
}

struct Inputs {
    stack: GridStack,
    labels: RegimeSeries,
    plan: SplitPlan,
}

fn load_inputs(d: &DataArgs, cfg: &PipelineConfig) -> Result<Inputs> {
    Ok(Inputs {
        stack: read_stack(&resolve(&d.anomalies, &cfg.paths.anomalies, "anomalies")?)?,
        labels: read_labels(&resolve(&d.labels, &cfg.paths.labels, "labels")?)?,
        plan: read_plan(&resolve(&d.split, &cfg.paths.split, "split")?)?,
    })
}

fn fit_to_stack(spec: &mut ModelSpec, stack: &GridStack) {
    spec.in_channels = stack.variables.len();
    spec.height = stack.grid.ny();
    spec.width = stack.grid.nx();
}

/// `1..15`, `1..=15`, `1-15` or `1,3,5`.
pub fn parse_leads(s: &str) -> Result<Vec<i64>> {
    let s = s.trim();
    let range = s.split_once("..=").or_else(|| s.split_once("..")).or_else(|| s.split_once('-'));
    let leads: Vec<i64> = match range {
        Some((a, b)) => {
            let (a, b): (i64, i64) = (a.trim().parse()?, b.trim().parse()?);
            if a > b {
                bail!("empty lead range {s:?}");
            }
            (a..=b).collect()
        }
        None => s.split(',').map(|v| v.trim().parse()).collect::<Result<_, _>>()?,
    };
    if leads.is_empty() {
        bail!("no lead times in {s:?}");
    }
    Ok(leads)
}

fn train_one(inp: &Inputs, base: &TrainConfig, parent: Option<&ModelCheckpoint>, lead: i64, seed: u64, dir: &Path) -> Result<Value> {
    let mut cfg = base.clone();
    cfg.lead = lead;
    cfg.seed = derive(seed, &format!("train/lead{lead}"));
    match parent {
        Some(p) => cfg.model = p.spec.clone(),
        None => fit_to_stack(&mut cfg.model, &inp.stack),
    }
    cfg.validate()?;
    let test_range = inp.plan.config.test_range()?;
    let sup = make_supervised(&inp.stack, &inp.labels, lead, Some(test_range))?;
    let data = TrainData::from_plan(&inp.stack, &sup, &inp.plan);
    if data.train.is_empty() || data.val.is_empty() {
        bail!("lead {lead}: empty training or validation partition");
    }
    let log = dir.join(format!("log_lead{lead:02}.csv"));
    let run = match parent {
        Some(p) => finetune(p, &data, &cfg, Some(&log)),
        None => train_new(&data, &cfg, Stage::Scratch, Some(&log)),
    }
    .with_context(|| format!("lead {lead}"))?;
    let model = dir.join(format!("model_lead{lead:02}.gsk"));
    run.checkpoint.save(&model)?;
    let p = &run.checkpoint.provenance;
    Ok(json!({
        "lead": lead,
        "checkpoint": model,
        "log": log,
        "stage": p.stage,
        "epochs_run": p.epochs_run,
        "best_epoch": p.best_epoch,
        "lr": p.lr,
        "val_accuracy": p.val_acc,
        "val_loss": p.val_loss,
        "pairs": { "train": data.train.len(), "validation": data.val.len() },
    }))
}

fn train(a: &crate::TrainArgs, cfg: &PipelineConfig, seed: u64) -> Result<()> {
    let leads = match (&a.leads, a.lead) {
        (Some(s), _) => parse_leads(s)?,
        (None, Some(l)) => vec![l],
        (None, None) => vec![cfg.train.lead],
    };
    let dir = resolve_as(&a.out_dir, &cfg.paths.checkpoints, "out-dir", "checkpoints")?;
    out_dir(&dir)?;
    let inp = load_inputs(&a.data, cfg)?;
    let parent = a.pretrain_from.as_deref().map(read_checkpoint).transpose()?;
    let mut base = cfg.train.clone();
    if let Some(e) = a.epochs {
        base.max_epochs = e;
    }
    let jobs = a
        .jobs
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
        .clamp(1, leads.len());
    let run = |l: i64| train_one(&inp, &base, parent.as_ref(), l, seed, &dir);
    let results: Vec<Result<Value>> = if jobs == 1 {
        leads.iter().map(|&l| run(l)).collect()
    } else {
        let mut slots: Vec<Option<Result<Value>>> = leads.iter().map(|_| None).collect();
        std::thread::scope(|s| {
            let handles: Vec<_> = (0..jobs)
                .map(|k| {
                    let (leads, run) = (&leads, &run);
                    s.spawn(move || leads.iter().enumerate().skip(k).step_by(jobs).map(|(i, &l)| (i, run(l))).collect::<Vec<_>>())
                })
                .collect();
            for h in handles {
                for (i, r) in h.join().expect("training thread panicked") {
                    slots[i] = Some(r);
                }
            }
        });
        slots.into_iter().map(|r| r.expect("every lead ran")).collect()
    };
    let runs = results.into_iter().collect::<Result<Vec<_>>>()?;
    emit(&json!({ "runs": runs }))
}

fn hpo(a: &crate::HpoArgs, cfg: &PipelineConfig, seed: u64) -> Result<()> {
    let inp = load_inputs(&a.data, cfg)?;
    out_dir(&a.out_dir)?;
    let budget = a.budget.unwrap_or(cfg.hpo.budget);
    let mut base = cfg.train.clone();
    base.lead = a.lead;
    base.max_epochs = a.epochs.unwrap_or(cfg.hpo.max_epochs);
    fit_to_stack(&mut base.model, &inp.stack);
    base.validate()?;
    let sup = make_supervised(&inp.stack, &inp.labels, a.lead, Some(inp.plan.config.test_range()?))?;
    let data = TrainData::from_plan(&inp.stack, &sup, &inp.plan);
    let ledger = a.out_dir.join("trials.jsonl");
    let prior = if ledger.exists() { read_ledger(&ledger)? } else { Vec::new() };
    let mut trial = prior.len();
    let mut objective = |p: &HyperPoint| {
        let mut c = base.clone();
        for b in &mut c.model.blocks {
            b.filters = p.filters;
        }
        c.model.dropout = p.dropout;
        c.model.fc_width = p.fc_width;
        c.batch_size = p.batch_size;
        c.seed = derive(seed, &format!("hpo/trial{trial}"));
        trial += 1;
        let run = train_new(&data, &c, Stage::Scratch, None)?;
        Ok(1.0 - run.checkpoint.provenance.val_acc.unwrap_or(0.0))
    };
    let trials = cfg.hpo.space.optimize(&mut objective, budget, derive(seed, "hpo"), prior, Some(&ledger))?;
    let best = incumbent(&trials).ok_or_else(|| anyhow!("no trial finished"))?;
    let summary = json!({
        "lead": a.lead,
        "trials": trials.len(),
        "failed": trials.iter().filter(|t| !t.is_done()).count(),
        "best": {
            "trial": best.index,
            "config": best.config,
            "val_accuracy": best.objective.map(|o| 1.0 - o),
        },
        "space": cfg.hpo.space,
    });
    std::fs::write(a.out_dir.join("best.json"), serde_json::to_string_pretty(&summary)? + "\n")?;
    emit(&summary)
}

/// Verification pairs built from the label record: initial date, regime at
/// the initial date and regime `lead` days later.
#[derive(Default)]
struct Pairs {
    init: Vec<i64>,
    init_label: Vec<usize>,
    target: Vec<usize>,
}

impl Pairs {
    fn build(labels: &RegimeSeries, lead: i64, plan: Option<&SplitPlan>, part: Partition) -> Self {
        let mut out = Pairs::default();
        for (&d, &l) in labels.dates.iter().zip(&labels.labels) {
            let v = d + lead;
            if !calendar::is_winter(d) || !calendar::is_winter(v) {
                continue;
            }
            let Some(y) = labels.label_on(v) else { continue };
            if let Some(plan) = plan {
                let p = plan.partition_of(d);
                if p != Some(part) || plan.partition_of(v) != p {
                    continue;
                }
            }
            out.init.push(d);
            out.init_label.push(l);
            out.target.push(y);
        }
        out
    }

    fn rows(&self, stack: &GridStack) -> Result<Vec<usize>> {
        self.init
            .iter()
            .map(|&d| stack.date_index(d).ok_or_else(|| anyhow!("date {} missing from the anomaly stack", calendar::format(d))))
            .collect()
    }
}

fn evaluate(a: &crate::EvaluateArgs, cfg: &PipelineConfig, seed: u64) -> Result<()> {
    let mut models: Vec<ModelKind> = Vec::new();
    for m in &a.model {
        let add: &[ModelKind] = match m {
            ModelKind::All => &[ModelKind::Decnn, ModelKind::Persistence, ModelKind::Climatology, ModelKind::Logreg],
            other => std::slice::from_ref(other),
        };
        for k in add {
            if !models.contains(k) {
                models.push(*k);
            }
        }
    }
    let needs_stack = models.iter().any(|m| matches!(m, ModelKind::Decnn | ModelKind::Logreg));
    let labels_path = resolve(&a.data.labels, &cfg.paths.labels, "labels")?;
    let labels = read_labels(&labels_path)?;
    let split_path = a.data.split.clone().or(cfg.paths.split.clone());
    let plan = split_path.as_deref().map(read_plan).transpose()?;
    let stack_path = a.data.anomalies.clone().or(cfg.paths.anomalies.clone());
    let stack = match (&stack_path, needs_stack) {
        (Some(p), true) => Some(read_stack(p)?),
        (None, true) => bail!("no anomalies given: pass --anomalies or set paths.anomalies in the config"),
        _ => None,
    };
    if plan.is_none() {
        log::warn!("no split plan: scoring every pair and fitting baselines in-sample");
    }
    let test = Pairs::build(&labels, a.lead, plan.as_ref(), Partition::Test);
    if test.init.is_empty() {
        bail!("no verification pairs at lead {}", a.lead);
    }
    let train = Pairs::build(&labels, a.lead, plan.as_ref(), Partition::Train);

    let mut report = Report::new(
        a.lead,
        json!({
            "seed": seed,
            "models": models.iter().map(|m| format!("{m:?}").to_lowercase()).collect::<Vec<_>>(),
            "inputs": { "labels": labels_path, "split": split_path, "anomalies": stack_path, "checkpoint": a.checkpoint },
            "pipeline": cfg,
        }),
    );
    let mut curves = Vec::new();
    let mut diagrams = Vec::new();
    for m in &models {
        let (name, probs) = match m {
            ModelKind::Decnn => {
                let path = a.checkpoint.as_ref().ok_or_else(|| anyhow!("decnn needs --checkpoint"))?;
                let ckpt = read_checkpoint(path)?;
                if ckpt.provenance.lead != a.lead {
                    bail!(naer_core::CoreError::InvalidArgument(format!(
                        "checkpoint was trained for lead {}, not {}",
                        ckpt.provenance.lead, a.lead
                    )));
                }
                let stack = stack.as_ref().expect("loaded");
                ("decnn", ckpt.predict_proba(stack, &test.rows(stack)?)?)
            }
            ModelKind::Persistence => ("persistence", one_hot(&test.init_label)),
            ModelKind::Climatology => {
                let (dates, labs): (Vec<i64>, Vec<usize>) = labels
                    .dates
                    .iter()
                    .zip(&labels.labels)
                    .filter(|(d, _)| plan.as_ref().is_none_or(|p| p.partition_of(**d) == Some(Partition::Train)))
                    .map(|(d, l)| (*d, *l))
                    .unzip();
                let clim = WeeklyClimatology::fit(&dates, &labs)?;
                let pred: Vec<usize> = test.init.iter().map(|&d| clim.forecast(d + a.lead)).collect();
                ("climatology", one_hot(&pred))
            }
            ModelKind::Logreg => {
                let stack = stack.as_ref().expect("loaded");
                let z = extract_domain(stack, &BBox::NAE, "Z500")?;
                let train_rows = train.rows(stack)?;
                if train_rows.is_empty() {
                    bail!("logreg: no training pairs");
                }
                let basis = fit_eof(&z.select_rows(&train_rows), cfg.evaluate.logreg_eofs, None)?;
                let scores = project(&z, &basis)?;
                let lr = LogReg::fit(&scores.select_rows(&train_rows), &train.target, &cfg.evaluate.logreg)?;
                ("logreg", lr.predict_proba(&scores.select_rows(&test.rows(stack)?))?)
            }
            ModelKind::All => unreachable!("expanded above"),
        };
        report.models.insert(name.into(), score(&probs, &test.target)?);
        if a.curves_dir.is_some() {
            for r in Regime::ALL {
                let s: Vec<f64> = probs.iter().map(|p| p[r.index()]).collect();
                let t: Vec<bool> = test.target.iter().map(|&y| y == r.index()).collect();
                if let Ok(c) = roc_curve(&s, &t) {
                    curves.push((name.to_string(), r, c));
                }
            }
            diagrams.push((name.to_string(), performance_diagram(&argmax_rows(&probs), &test.target)?));
        }
    }
    if let Some(dir) = &a.curves_dir {
        out_dir(dir)?;
        write_roc_csv(&dir.join("roc.csv"), &curves)?;
        write_diagram_csv(&dir.join("diagram.csv"), &diagrams)?;
    }
    match &a.output {
        Some(p) => report.write_json(p)?,
        None => emit(&report)?,
    }
    Ok(())
}

fn parse_target(s: &str) -> Result<Target> {
    match s.to_ascii_lowercase().as_str() {
        "predicted" => Ok(Target::Predicted),
        "true" => Ok(Target::True),
        other => Ok(Target::Class(
            other.parse().with_context(|| format!("target {s:?} is not predicted, true or a class index"))?,
        )),
    }
}

fn method_name(m: Method) -> &'static str {
    match m {
        Method::Ig => "ig",
        Method::Sg => "sg",
        Method::Sgsq => "sgsq",
    }
}

fn explain_cmd(a: &crate::ExplainArgs, cfg: &PipelineConfig, seed: u64) -> Result<()> {
    let ckpt = read_checkpoint(&a.checkpoint)?;
    if ckpt.provenance.lead != a.lead {
        bail!(naer_core::CoreError::InvalidArgument(format!(
            "checkpoint was trained for lead {}, not {}",
            ckpt.provenance.lead, a.lead
        )));
    }
    let stack = read_stack(&resolve(&a.anomalies, &cfg.paths.anomalies, "anomalies")?)?;
    let date = calendar::parse(&a.date)?;
    let t = stack.date_index(date).ok_or_else(|| anyhow!("date {} not in the anomaly stack", a.date))?;
    let labels = a.labels.as_ref().or(cfg.paths.labels.as_ref()).map(|p| read_labels(p)).transpose()?;
    let truth = labels.as_ref().and_then(|l| l.label_on(date + a.lead));
    let ecfg = ExplainConfig {
        method: a.method.unwrap_or(cfg.interpret.method),
        target: a.target.as_deref().map(parse_target).transpose()?.unwrap_or(cfg.interpret.target),
        seed: derive(seed, "explain"),
        ..cfg.interpret
    };
    let (map, input) = explain(&ckpt, &stack, t, truth, &ecfg)?;
    out_dir(&a.out_dir)?;
    let stem = format!("attribution_{}_{}", calendar::format(date), method_name(ecfg.method));
    let gsk = a.out_dir.join(format!("{stem}.gsk"));
    let csv = a.out_dir.join(format!("{stem}.csv"));
    gridio::write_gsk1(&gsk, &map.to_gsk1(&input))?;
    map.write_csv(&csv, &input)?;
    let probs = ckpt.predict_proba(&stack, &[t])?;
    emit(&json!({
        "date": a.date,
        "lead": a.lead,
        "method": ecfg.method,
        "class": Regime::from_index(map.class).map(|r| r.name()),
        "true_class": truth.and_then(Regime::from_index).map(|r| r.name()),
        "probabilities": probs[0],
        "files": { "gsk1": gsk, "csv": csv },
    }))
}

fn synth(a: &crate::SynthArgs, seed: u64) -> Result<()> {
    let mut spec = match &a.spec {
        Some(p) => serde_json::from_str(&std::fs::read_to_string(p)?).with_context(|| format!("synthetic spec {}", p.display()))?,
        None => preset_paperlike(),
    };
    if let Some(d) = a.days {
        spec.days = d;
    }
    if let Some(y) = a.start_year {
        spec.start_year = y;
    }
    if let Some(s) = a.spacing {
        spec.grid = LatLonGrid::regular(s);
    }
    spec.seed = derive(seed, "synth");
    let (stack, truth) = simulate(&spec)?;
    out_dir(&a.out_dir)?;
    gridio::write_gridstack(&a.out_dir.join("anomalies.gsk"), &stack)?;
    truth.write_csv(&a.out_dir.join("truth.csv"))?;
    let (y0, y1) = match (stack.dates.first(), stack.dates.last()) {
        (Some(&f), Some(&l)) => (calendar::year(f), calendar::year(l)),
        _ => bail!("synthetic spec produced no days"),
    };
    let mut rng = ChaCha8Rng::seed_from_u64(derive(seed, "synth/phases"));
    for name in ["enso", "pdo", "amo"] {
        write_phase_csv(&a.out_dir.join(format!("{name}.csv")), &phase_series(y0, y1, 0.9, &mut rng))?;
    }
    std::fs::write(a.out_dir.join("synth.json"), serde_json::to_string_pretty(&spec)? + "\n")?;
    emit(&json!({
        "out_dir": a.out_dir,
        "days": stack.len(),
        "dates": date_range(&stack.dates),
        "grid": grid_summary(&stack.grid),
    }))
}
