//! One PASS/FAIL line per acceptance criterion. Lines are written to the raw
//! stdout handle so they appear without `--nocapture`.

use std::io::Write;
use std::time::{Duration, Instant};

use cortigraph::gradcheck::{gradcheck, random_graph, GRADCHECK_TOLERANCE};
use cortigraph::graph::{BrainGraph, GraphDataset};
use cortigraph::model::{GraphClassifier, ModelConfig};
use cortigraph::rng::sub_rng;
use cortigraph::synthgen::{generate_dataset, generate_subject, GenConfig};
use cortigraph::tensor::{Activation, NormMode, Tape};
use cortigraph::train::{evaluate, train, TrainConfig, TrainOutcome};
use rand::seq::SliceRandom;

struct Report {
    failed: Vec<&'static str>,
}

impl Report {
    fn line(&mut self, name: &'static str, ok: bool, detail: String) {
        let tag = if ok { "PASS" } else { "FAIL" };
        let mut out = std::io::stdout().lock();
        let _ = writeln!(out, "acceptance {tag} {name}: {detail}");
        let _ = out.flush();
        if !ok {
            self.failed.push(name);
        }
    }
}

fn planted_train_config() -> TrainConfig {
    TrainConfig {
        epochs: 150,
        activation: Activation::Relu,
        seed: 1,
        ..TrainConfig::default()
    }
}

/// Best threshold on mean edge weight, fitted on `fit` and scored on `score`.
/// Either direction of the inequality is allowed.
fn threshold_baseline(ds: &GraphDataset, fit: &[usize], score: &[usize]) -> f64 {
    let acc = |idx: &[usize], t: f64, above_is_ad: bool| {
        let hits = idx
            .iter()
            .filter(|&&i| {
                let g = &ds.graphs[i];
                let ad = (g.mean_weight() > t) == above_is_ad;
                u8::from(ad) == g.label
            })
            .count();
        hits as f64 / idx.len() as f64
    };
    let mut ws: Vec<f64> = fit.iter().map(|&i| ds.graphs[i].mean_weight()).collect();
    ws.sort_by(f64::total_cmp);
    let mut best = (f64::NEG_INFINITY, 0.0, false);
    for pair in ws.windows(2) {
        let t = 0.5 * (pair[0] + pair[1]);
        for dir in [false, true] {
            let a = acc(fit, t, dir);
            if a > best.0 {
                best = (a, t, dir);
            }
        }
    }
    acc(score, best.1, best.2)
}

fn gradient_oracle(r: &mut Report) {
    let start = Instant::now();
    let mut worst: f64 = 0.0;
    let mut entries = 0;
    for act in [Activation::Sigmoid, Activation::Relu] {
        let rep = gradcheck(0, act, None).unwrap();
        worst = worst.max(rep.max_rel_error);
        entries += rep.entries();
    }
    let t = start.elapsed();
    r.line(
        "gradient oracle",
        worst < GRADCHECK_TOLERANCE && t < Duration::from_secs(60),
        format!("max rel error {worst:.3e} over {entries} entries (sigmoid+relu) in {t:.2?}"),
    );
}

fn shape_and_edges(r: &mut Report) {
    let cfg = GenConfig::default();
    let graphs: Vec<BrainGraph> = [0, cfg.n_ad + cfg.n_nc - 1]
        .iter()
        .map(|&i| generate_subject(&cfg, i).unwrap().0)
        .collect();
    let n = graphs[0].num_nodes();
    let expected = n * (n - 1) / 2;
    let counts: Vec<usize> = graphs
        .iter()
        .map(|g| g.edge_index().unwrap().len())
        .collect();
    r.line(
        "edge-count identity",
        n == 1162 && counts.iter().all(|&c| c == 674_541 && c == expected),
        format!("N={n}, COO edges {counts:?}, N(N-1)/2={expected}"),
    );

    let model = GraphClassifier::new(ModelConfig::new(n), 0).unwrap();
    let start = Instant::now();
    let pass = model.forward_graph(&graphs[0], NormMode::Eval).unwrap();
    let t = start.elapsed();
    let counts = pass.node_counts();
    r.line(
        "shape contract",
        counts == [1162, 291, 73, 18]
            && pass.logit_value().is_finite()
            && t < Duration::from_secs(30),
        format!("node counts {counts:?}, forward {t:.2?}"),
    );
}

fn permutation_invariance(r: &mut Report) {
    let n = 64;
    let model = GraphClassifier::new(ModelConfig::new(n), 21).unwrap();
    let (features, adj) = random_graph(n, 21);
    let base = model
        .forward(&features, &adj, NormMode::Eval)
        .unwrap()
        .logit_value();
    let mut rng = sub_rng(21, 1);
    let mut perm: Vec<usize> = (0..n).collect();
    let mut spread: f64 = 0.0;
    for _ in 0..20 {
        perm.shuffle(&mut rng);
        let mut f = vec![0.0; n * 3];
        let mut a = vec![0.0; n * n];
        for (i, &pi) in perm.iter().enumerate() {
            f[i * 3..i * 3 + 3].copy_from_slice(&features[pi * 3..pi * 3 + 3]);
            for (j, &pj) in perm.iter().enumerate() {
                a[i * n + j] = adj[pi * n + pj];
            }
        }
        let got = model.forward(&f, &a, NormMode::Eval).unwrap().logit_value();
        spread = spread.max((got - base).abs());
    }
    r.line(
        "permutation invariance",
        spread < 1e-8,
        format!("max |logit change| {spread:.3e} over 20 permutations at N={n}"),
    );
}

fn normalization(r: &mut Report) {
    let ds = generate_dataset(&GenConfig {
        n_ad: 3,
        n_nc: 3,
        ..GenConfig::desk()
    })
    .unwrap();
    let model = GraphClassifier::new(ModelConfig::new(ds.num_nodes()), 2).unwrap();
    let (mut row_err, mut asym, mut min_entry): (f64, f64, f64) = (0.0, 0.0, f64::INFINITY);
    for g in &ds.graphs {
        for mode in [NormMode::Train, NormMode::Eval] {
            let pass = model.forward_graph(g, mode).unwrap();
            for (&s, &a) in pass.assignments.iter().zip(&pass.coarsened) {
                let c = pass.tape.shape(s)[1];
                for row in pass.tape.value(s).chunks(c) {
                    row_err = row_err.max((row.iter().sum::<f64>() - 1.0).abs());
                }
                let k = pass.tape.shape(a)[0];
                let v = pass.tape.value(a);
                for i in 0..k {
                    for j in 0..k {
                        asym = asym.max((v[i * k + j] - v[j * k + i]).abs());
                        min_entry = min_entry.min(v[i * k + j]);
                    }
                }
            }
        }
    }
    r.line(
        "normalization",
        row_err < 1e-12 && asym < 1e-10 && min_entry >= -1e-12,
        format!("row-sum error {row_err:.3e}, asymmetry {asym:.3e}, min entry {min_entry:.3e}"),
    );
}

fn planted_signal(r: &mut Report) -> TrainOutcome {
    let start = Instant::now();
    let gen = GenConfig {
        seed: 1,
        thinning_factor: 0.85,
        ..GenConfig::desk()
    };
    let ds = generate_dataset(&gen).unwrap();
    let cfg = planted_train_config();
    let out = train(&ds, &cfg).unwrap();
    let t = start.elapsed();

    let baseline = threshold_baseline(&ds, &out.split.train, &(0..ds.len()).collect::<Vec<_>>());
    let recs = &out.history.records;
    let (initial, last) = (recs[0].train_loss, recs[recs.len() - 1].train_loss);
    let best = out.history.best().unwrap();
    let ok = ds.len() == 40
        && ds.num_nodes() == 128
        && baseline > 0.8
        && best.val_acc >= 0.90
        && last < 0.8 * initial
        && t < Duration::from_secs(15 * 60);
    r.line(
        "planted signal",
        ok,
        format!(
            "baseline acc {baseline:.3}, peak val acc {:.3} (epoch {}), train loss {initial:.4} -> {last:.4}, {t:.1?}",
            best.val_acc, best.epoch
        ),
    );

    // The best checkpoint re-scored on its own data should not fall far
    // below the training accuracy logged at that epoch.
    let own = evaluate(&out.best, &ds).unwrap();
    assert!(
        own.accuracy >= best.train_acc - 0.05,
        "{} vs {}",
        own.accuracy,
        best.train_acc
    );
    out
}

fn null_control(r: &mut Report) {
    let gen = GenConfig {
        seed: 2,
        thinning_factor: 1.0,
        ..GenConfig::desk()
    };
    let ds = generate_dataset(&gen).unwrap();
    let out = train(&ds, &planted_train_config()).unwrap();
    // Eight validation graphs give accuracy in steps of 0.125, so the
    // selected checkpoint is also scored on a large independent null cohort.
    let held_out = generate_dataset(&GenConfig {
        seed: 1002,
        n_ad: 200,
        n_nc: 200,
        ..gen
    })
    .unwrap();
    let eval = evaluate(&out.best, &held_out).unwrap();
    let last_val = out.history.records.last().unwrap().val_acc;
    r.line(
        "null-signal control",
        (0.4..=0.6).contains(&eval.accuracy),
        format!(
            "held-out accuracy {:.3} on {} graphs (in-run val: peak {:.3}, final {last_val:.3})",
            eval.accuracy,
            held_out.len(),
            out.history.best().unwrap().val_acc
        ),
    );
}

fn determinism(r: &mut Report) {
    let dir = tempfile::tempdir().unwrap();
    let ds = generate_dataset(&GenConfig {
        seed: 3,
        ..GenConfig::desk()
    })
    .unwrap();
    let cfg = TrainConfig {
        epochs: 12,
        activation: Activation::Relu,
        seed: 3,
        ..TrainConfig::default()
    };
    let mut files = Vec::new();
    for run in 0..2 {
        let out = train(&ds, &cfg).unwrap();
        let csv = dir.path().join(format!("metrics{run}.csv"));
        let ckpt = dir.path().join(format!("model{run}.adck"));
        out.history.write_csv(&csv).unwrap();
        out.best.save(&ckpt).unwrap();
        files.push((std::fs::read(csv).unwrap(), std::fs::read(ckpt).unwrap()));
    }
    let same = files[0] == files[1];
    r.line(
        "determinism",
        same,
        format!(
            "two {}-epoch runs: metrics {} bytes, checkpoint {} bytes, identical={same}",
            cfg.epochs,
            files[0].0.len(),
            files[0].1.len()
        ),
    );
}

fn round_trips(r: &mut Report, planted: &TrainOutcome) {
    let dir = tempfile::tempdir().unwrap();
    let (g, _) = generate_subject(&GenConfig::default(), 0).unwrap();
    let gpath = dir.path().join("g.adgr");
    g.save(&gpath).unwrap();
    let g_ok = std::fs::read(&gpath).unwrap() == BrainGraph::load(&gpath).unwrap().to_bytes();

    let cpath = dir.path().join("m.adck");
    planted.best.save(&cpath).unwrap();
    let loaded = GraphClassifier::load(&cpath).unwrap();
    let c_ok = std::fs::read(&cpath).unwrap() == loaded.to_bytes() && loaded == planted.best;
    r.line(
        "round-trips",
        g_ok && c_ok,
        format!(
            "graph N={} identical={g_ok}, checkpoint identical={c_ok}",
            g.num_nodes()
        ),
    );
}

fn bce_anchor(r: &mut Report) {
    let mut err: f64 = 0.0;
    for y in [0.0, 1.0] {
        let mut tape = Tape::new();
        let z = tape.constant(vec![1], vec![0.0]).unwrap();
        let l = tape.bce_with_logits(z, y).unwrap();
        err = err.max((tape.scalar(l) - std::f64::consts::LN_2).abs());
    }
    r.line(
        "BCE anchor",
        err < 1e-12,
        format!("|loss(0) - ln 2| = {err:.3e}"),
    );
}

#[test]
fn acceptance() {
    let mut r = Report { failed: Vec::new() };
    gradient_oracle(&mut r);
    shape_and_edges(&mut r);
    permutation_invariance(&mut r);
    normalization(&mut r);
    let planted = planted_signal(&mut r);
    null_control(&mut r);
    determinism(&mut r);
    round_trips(&mut r, &planted);
    bce_anchor(&mut r);
    assert!(r.failed.is_empty(), "failed criteria: {:?}", r.failed);
}
