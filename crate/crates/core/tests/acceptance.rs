//! Acceptance checks. Prints one PASS/FAIL line per criterion and exits
//! nonzero if any fails.

mod common;

use std::time::Instant;

use nalgebra::DMatrix;
use naer_core::gridio::{GridStack, LatLonGrid};
use naer_core::hpo::{incumbent_trace, HyperBox, HyperPoint};
use naer_core::interpret::{integrated_gradients, resolve_target, Attributable, LinearModel, NetworkModel, Target};
use naer_core::labeler::*;
use naer_core::metrics::*;
use naer_core::splitter::*;
use naer_core::synthlab::*;
use naer_core::trainer::*;
use naer_tensor::nn::{conv2d, deform_conv2d, ModelSpec};
use naer_tensor::{layer_suite, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = (bool, String);

fn report(name: &str, start: Instant, outcome: Outcome) -> bool {
    let (ok, detail) = outcome;
    println!("{} {name}: {detail} [{:.1} s]", if ok { "PASS" } else { "FAIL" }, start.elapsed().as_secs_f64());
    ok
}

fn run(name: &str, f: impl FnOnce() -> Outcome) -> bool {
    let start = Instant::now();
    let outcome = std::panic::catch_unwind(std::panic::AssertUnwindSafe(f)).unwrap_or_else(|e| {
        let msg = e
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_default();
        (false, format!("panicked: {msg}"))
    });
    report(name, start, outcome)
}

fn gradients() -> Outcome {
    let start = Instant::now();
    let checks = layer_suite(20, 2024).unwrap();
    let worst = checks.iter().max_by(|a, b| a.max_error.total_cmp(&b.max_error)).unwrap();
    let secs = start.elapsed().as_secs_f64();
    let few = checks.iter().filter(|c| c.cases < 20).count();
    (
        worst.max_error < 1e-5 && secs < 120.0 && few == 0,
        format!(
            "{} layer/argument pairs x 20 shapes, worst {} wrt {} rel err {:.2e}",
            checks.len(),
            worst.layer,
            worst.wrt,
            worst.max_error
        ),
    )
}

fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::from_vec((0..n).map(|_| rng.random_range(-1.0..1.0)).collect(), shape).unwrap()
}

fn deform_degeneracy() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let (b, c, f) = (rng.random_range(1..=3), rng.random_range(1..=6), rng.random_range(1..=6));
        let k = [1, 3, 5][rng.random_range(0..3)];
        let pad = rng.random_range(0..=k / 2);
        let stride = rng.random_range(1..=2);
        let (h, w) = (rng.random_range(k..k + 10), rng.random_range(k..k + 10));
        let x = random_tensor(&mut rng, &[b, c, h, w]);
        let wt = random_tensor(&mut rng, &[f, c, k, k]);
        let bias = random_tensor(&mut rng, &[f]);
        let regular = conv2d(&x, &wt, Some(&bias), stride, pad).unwrap();
        let s = regular.shape().to_vec();
        let off = Tensor::zeros(&[b, 2 * k * k, s[2], s[3]]);
        let deform = deform_conv2d(&x, &off, &wt, Some(&bias), stride, pad).unwrap();
        for (a, r) in deform.data().iter().zip(regular.data().iter()) {
            worst = worst.max((a - r).abs());
        }
    }
    (worst < 1e-6, format!("100 parameterizations, max abs diff {worst:.2e}"))
}

fn pairwise_auc(scores: &[f64], truth: &[bool]) -> f64 {
    let (mut wins, mut pairs) = (0.0, 0.0);
    for (i, &si) in scores.iter().enumerate().filter(|(i, _)| truth[*i]) {
        let _ = i;
        for (_, &sj) in scores.iter().enumerate().filter(|(j, _)| !truth[*j]) {
            pairs += 1.0;
            wins += if si > sj { 1.0 } else if si == sj { 0.5 } else { 0.0 };
        }
    }
    wins / pairs
}

fn metric_oracles() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let (mut auc_err, mut csi_err, mut bs_err) = (0.0f64, 0.0f64, 0.0f64);
    for trial in 0..500 {
        let n = rng.random_range(2..=200);
        let levels = rng.random_range(2..60);
        let scores: Vec<f64> = (0..n).map(|_| rng.random_range(0..levels) as f64 / levels as f64).collect();
        let mut truth: Vec<bool> = (0..n).map(|_| rng.random_bool(0.3)).collect();
        truth[trial % n] = true;
        truth[(trial + 1) % n] = false;
        auc_err = auc_err.max((roc_curve(&scores, &truth).unwrap().auc - pairwise_auc(&scores, &truth)).abs());

        let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..4)).collect();
        let pred: Vec<usize> = (0..n).map(|_| rng.random_range(0..4)).collect();
        let probs: Vec<Vec<f64>> = (0..n)
            .map(|_| {
                let r: Vec<f64> = (0..4).map(|_| rng.random::<f64>() + 1e-3).collect();
                let s: f64 = r.iter().sum();
                r.iter().map(|v| v / s).collect()
            })
            .collect();
        let (mut num, mut den, mut bnum) = (0.0, 0.0, 0.0);
        for c in 0..4 {
            let count = |p: bool, t: bool| pred.iter().zip(&labels).filter(|(a, b)| (**a == c) == p && (**b == c) == t).count() as f64;
            let (tp, fnn, fp) = (count(true, true), count(false, true), count(true, false));
            let support = tp + fnn;
            if tp + fnn + fp > 0.0 {
                num += support * tp / (tp + fnn + fp);
                den += support;
            }
            let bs: f64 = probs.iter().zip(&labels).map(|(p, &t)| (p[c] - (t == c) as u8 as f64).powi(2)).sum::<f64>() / n as f64;
            bnum += support * bs;
        }
        let got_csi = csi(&contingency(&pred, &labels).unwrap(), &supports(&labels)).unwrap();
        csi_err = csi_err.max((got_csi - num / den).abs());
        bs_err = bs_err.max((brier(&probs, &labels).unwrap() - bnum / n as f64).abs());
    }
    (
        auc_err < 1e-9 && csi_err < 1e-12 && bs_err < 1e-12,
        format!("500 cases, AUC err {auc_err:.1e}, CSI err {csi_err:.1e}, Brier err {bs_err:.1e}"),
    )
}

fn stationary() -> Outcome {
    let pi = stationary_distribution(&preset_paperlike().transition).unwrap();
    let mut worst = 0.0f64;
    let mut parts = Vec::new();
    for (name, want) in [("NAO+", 0.32), ("SB", 0.28), ("NAO-", 0.19), ("AR", 0.21)] {
        let r = Regime::ALL.iter().position(|r| r.name() == name).unwrap();
        worst = worst.max((pi[r] - want).abs());
        parts.push(format!("{name} {:.6}", pi[r]));
    }
    (worst <= 1e-6, format!("{}, max dev {worst:.1e}", parts.join(", ")))
}

fn split_integrity() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2718);
    for case in 0..1000 {
        let (dates, strata) = common::random_split_case(rng.random());
        let plan = match stratified_split(&dates, &strata, &SplitConfig::default(), rng.random()) {
            Ok(p) => p,
            Err(e) => return (false, format!("case {case}: {e}")),
        };
        if let Err(e) = common::check_split(&plan, &dates) {
            return (false, format!("case {case}: {e}"));
        }
    }
    (true, "1000 random phase series: disjoint, >=365-day validation blocks, per-stratum share within one block, test range untouched".into())
}

fn hpo() -> Outcome {
    let b = HyperBox::default();
    let target = b.encode(&HyperPoint {
        filters: 20,
        dropout: 0.3,
        fc_width: 96,
        batch_size: 64,
    });
    let bowl = |p: &HyperPoint| 1.0 + b.encode(p).iter().zip(&target).map(|(u, t)| (u - t).powi(2)).sum::<f64>();
    let mut best: Vec<f64> = (0..20)
        .map(|seed| {
            let trials = b.optimize(&mut |p| Ok(bowl(p)), 15, seed, Vec::new(), None).unwrap();
            *incumbent_trace(&trials).last().unwrap()
        })
        .collect();
    best.sort_by(f64::total_cmp);
    let median = 0.5 * (best[9] + best[10]);
    let gap = (median - 1.0) / 1.0;
    (gap <= 0.02, format!("20-seed median incumbent {median:.5} vs optimum 1, gap {:.2}%", 100.0 * gap))
}

/// The `paperlike` synthetic corpus with labels, split and pairs at lead 5.
struct Pipeline {
    spec: SynthSpec,
    stack: GridStack,
    truth: RegimeSeries,
    labeling: Option<Labeling>,
    labeling_secs: f64,
}

fn labeler(p: &mut Pipeline) -> Outcome {
    let start = Instant::now();
    let templates = p.spec.templates(&BBox::NAE).unwrap();
    let lab = label_regimes(&p.stack, &templates, &LabelConfig::default(), 1).unwrap();
    p.labeling_secs = start.elapsed().as_secs_f64();
    let ari = adjusted_rand_index(&lab.series.labels, &p.truth.labels);
    let c = &lab.basis.components;
    let gram = c * c.transpose();
    let ortho = (gram - DMatrix::identity(c.nrows(), c.nrows())).abs().max();
    let ok = ari >= 0.95 && ortho < 1e-8;
    p.labeling = Some(lab);
    (
        ok,
        format!("noise 0.1x amplitude, {} days: ARI {ari:.4}, EOF orthonormality err {ortho:.1e}", p.stack.len()),
    )
}

fn end_to_end(p: &Pipeline) -> (Outcome, Option<ModelCheckpoint>) {
    let start = Instant::now();
    let lab = p.labeling.as_ref().expect("labeling ran");
    let labels = &lab.series;

    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let mut tele_series = |index| {
        let rows = phase_series(1871, 2020, 0.9, &mut rng);
        PhaseSeries::new(index, rows.iter().map(|r| (r.0, r.1)).collect(), rows.iter().map(|r| r.2).collect()).unwrap()
    };
    let tele = Teleconnections {
        enso: tele_series(IndexName::Enso),
        pdo: tele_series(IndexName::Pdo),
        amo: tele_series(IndexName::Amo),
        thresholds: Thresholds::default(),
    };
    let split_cfg = SplitConfig::default();
    let plan = stratified_split(&p.stack.dates, &tele.strata(&p.stack.dates), &split_cfg, 7).unwrap();
    let sup = make_supervised(&p.stack, labels, 5, Some(split_cfg.test_range().unwrap())).unwrap();
    let data = TrainData::from_plan(&p.stack, &sup, &plan);
    let [_, _, test] = sup.partition(&plan);

    let cfg = TrainConfig {
        lead: 5,
        max_epochs: 3,
        patience: 2,
        model: ModelSpec::deformable(8, 0.2, 32),
        seed: 11,
        ..Default::default()
    };
    let trained = train_new(&data, &cfg, Stage::Scratch, None).unwrap();
    let ckpt = trained.checkpoint;

    let y: Vec<usize> = test.iter().map(|&i| sup.target[i]).collect();
    let rows: Vec<usize> = test.iter().map(|&i| sup.input[i]).collect();
    let decnn = score(&ckpt.predict_proba(&p.stack, &rows).unwrap(), &y).unwrap();

    let persist: Vec<usize> = test.iter().map(|&i| labels.label_on(sup.init[i]).unwrap()).collect();
    let persistence = accuracy(&persist, &y).unwrap();

    let train_rows: Vec<usize> = data.train.iter().map(|&i| sup.input[i]).collect();
    let clim = WeeklyClimatology::fit(
        &train_rows.iter().map(|&t| p.stack.dates[t]).collect::<Vec<_>>(),
        &train_rows.iter().map(|&t| labels.labels[t]).collect::<Vec<_>>(),
    )
    .unwrap();
    let clim_pred: Vec<usize> = test.iter().map(|&i| clim.forecast(sup.init[i] + sup.lead)).collect();
    let climatology = accuracy(&clim_pred, &y).unwrap();

    let z500 = extract_domain(&p.stack, &BBox::NAE, "Z500").unwrap();
    let basis = fit_eof(&z500.select_rows(&train_rows), 20, None).unwrap();
    let scores = project(&z500, &basis).unwrap();
    let train_y: Vec<usize> = data.train.iter().map(|&i| sup.target[i]).collect();
    let lr = LogReg::fit(&scores.select_rows(&train_rows), &train_y, &LogRegConfig::default()).unwrap();
    let lr_scores = score(&lr.predict_proba(&scores.select_rows(&rows)).unwrap(), &y).unwrap();

    let secs = start.elapsed().as_secs_f64() + p.labeling_secs;
    let ok = decnn.accuracy >= persistence + 0.10
        && decnn.accuracy >= climatology + 0.10
        && decnn.weighted_auc > lr_scores.weighted_auc
        && secs < 900.0;
    (
        (
            ok,
            format!(
                "lead 5, {} test pairs: deCNN acc {:.3} AUC {:.3}; persistence acc {persistence:.3}; weekly climatology acc {climatology:.3}; logistic regression acc {:.3} AUC {:.3}; pipeline {secs:.0} s on {} core(s)",
                y.len(),
                decnn.accuracy,
                decnn.weighted_auc,
                lr_scores.accuracy,
                lr_scores.weighted_auc,
                std::thread::available_parallelism().map_or(1, |n| n.get()),
            ),
        ),
        Some(ckpt),
    )
}

fn integrated_gradients_axioms(ckpt: Option<&ModelCheckpoint>, stack: &GridStack) -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut linear_err = 0.0f64;
    for _ in 0..20 {
        let n = rng.random_range(1..200);
        let m = LinearModel {
            weights: (0..4).map(|_| (0..n).map(|_| rng.random_range(-3.0..3.0)).collect()).collect(),
            bias: (0..4).map(|_| rng.random_range(-1.0..1.0)).collect(),
        };
        let x: Vec<f64> = (0..n).map(|_| rng.random_range(-5.0..5.0)).collect();
        let c = rng.random_range(0..4);
        let steps = rng.random_range(1..300);
        let attr = integrated_gradients(&m, &x, &vec![0.0; n], c, steps).unwrap();
        for i in 0..n {
            linear_err = linear_err.max((attr[i] - m.weights[c][i] * x[i]).abs());
        }
    }
    let Some(ckpt) = ckpt else {
        return (false, "no trained model available".into());
    };
    let model = NetworkModel::from_checkpoint(ckpt).unwrap();
    let base = vec![0.0; model.input_len()];
    let mut worst = 0.0f64;
    let days = [stack.len() - 1, stack.len() - 400, stack.len() - 800];
    for &t in &days {
        let x: Vec<f64> = stack.day(t).iter().map(|&v| v as f64).collect();
        let c = resolve_target(&model, &x, Target::Predicted, None).unwrap();
        let attr = integrated_gradients(&model, &x, &base, c, 256).unwrap();
        let delta = model.logits(&x).unwrap()[0][c] - model.logits(&base).unwrap()[0][c];
        worst = worst.max((attr.iter().sum::<f64>() - delta).abs() / delta.abs());
    }
    (
        worst < 0.01 && linear_err < 1e-10,
        format!(
            "completeness rel err {:.3}% (m=256, {} inputs, trained deCNN); linear closed form err {linear_err:.1e}",
            100.0 * worst,
            days.len()
        ),
    )
}

fn transfer_once(seed: u64) -> (f64, f64) {
    let mut big = preset_paperlike();
    big.grid = LatLonGrid::regular(11.25);
    big.days = 3000;
    big.seed = 1000 + 3 * seed;
    let mut shifted = big.clone();
    shifted.layout = big.layout.shifted(5.0, 10.0, 1.0);
    shifted.days = 200 + 1200;
    shifted.seed = 1001 + 3 * seed;
    let (bs, bl) = simulate(&big).unwrap();
    let (ss, sl) = simulate(&shifted).unwrap();
    let mut model = ModelSpec::deformable(4, 0.2, 16);
    model.height = 16;
    model.width = 32;
    let cfg = TrainConfig {
        lead: 5,
        max_epochs: 4,
        model,
        seed,
        ..Default::default()
    };
    let bsup = make_supervised(&bs, &bl, 5, None).unwrap();
    let n = bsup.len();
    let bdata = TrainData {
        stack: &bs,
        sup: &bsup,
        train: (0..n * 4 / 5).collect(),
        val: (n * 4 / 5..n).collect(),
    };
    let pre = pretrain(&bdata, &cfg, None).unwrap();
    let ssup = make_supervised(&ss, &sl, 5, None).unwrap();
    let small = 200;
    let fdata = TrainData {
        stack: &ss,
        sup: &ssup,
        train: (0..small * 4 / 5).collect(),
        val: (small * 4 / 5..small).collect(),
    };
    let fcfg = TrainConfig { max_epochs: 10, ..cfg };
    let tuned = finetune(&pre.checkpoint, &fdata, &fcfg, None).unwrap();
    let scratch = train_new(&fdata, &fcfg, Stage::Scratch, None).unwrap();
    let held_out = TrainData {
        stack: &ss,
        sup: &ssup,
        train: Vec::new(),
        val: (small + 100..ssup.len()).collect(),
    };
    (
        validation_accuracy(&tuned.checkpoint, &held_out).unwrap(),
        validation_accuracy(&scratch.checkpoint, &held_out).unwrap(),
    )
}

fn transfer() -> Outcome {
    let results: Vec<(f64, f64)> = (0..10).map(transfer_once).collect();
    let wins = results.iter().filter(|(f, s)| f > s).count();
    let not_worse = results.iter().all(|(f, s)| f >= s);
    let mean = |k: usize| results.iter().map(|r| if k == 0 { r.0 } else { r.1 }).sum::<f64>() / 10.0;
    (
        wins >= 8,
        format!(
            "finetuned > no-pretrain in {wins}/10 seeds (mean acc {:.3} vs {:.3}; finetuned >= no-pretrain in every seed: {not_worse})",
            mean(0),
            mean(1)
        ),
    )
}

fn main() {
    let mut all = true;
    all &= run("gradient-correctness", gradients);
    all &= run("deformable-degeneracy", deform_degeneracy);
    all &= run("metric-oracles", metric_oracles);
    all &= run("stationary-distribution", stationary);
    all &= run("split-integrity", split_integrity);
    all &= run("hpo-sanity", hpo);

    let spec = preset_paperlike();
    let (stack, truth) = simulate(&spec).expect("simulate the paper-like corpus");
    let mut pipeline = Pipeline {
        spec,
        stack,
        truth,
        labeling: None,
        labeling_secs: 0.0,
    };
    all &= run("labeler-recovery", || labeler(&mut pipeline));
    let mut ckpt = None;
    all &= run("end-to-end-skill-ordering", || {
        let (outcome, c) = end_to_end(&pipeline);
        ckpt = c;
        outcome
    });
    all &= run("integrated-gradients-axioms", || integrated_gradients_axioms(ckpt.as_ref(), &pipeline.stack));
    all &= run("transfer-learning-effect", transfer);

    println!("{}", if all { "all acceptance criteria passed" } else { "some acceptance criteria FAILED" });
    if !all {
        std::process::exit(1);
    }
}
