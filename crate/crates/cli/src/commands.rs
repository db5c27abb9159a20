use std::fs;
use std::path::Path;

use cortigraph::gradcheck::{gradcheck as run_gradcheck, GRADCHECK_TOLERANCE};
use cortigraph::graph::{BrainGraph, GraphDataset};
use cortigraph::model::{predict as predict_label, probability, GraphClassifier};
use cortigraph::synthgen::generate_dataset;
use cortigraph::tensor::{Activation, BackwardFault};
use cortigraph::train::{evaluate, format_sig6, train_with_observer, Evaluation};

use crate::config::RunConfig;
use crate::CliError;

pub const CHECKPOINT_FILE: &str = "checkpoint.adck";
pub const METRICS_FILE: &str = "metrics.csv";
pub const RUN_MANIFEST_FILE: &str = "run_manifest.txt";

fn write(path: &Path, bytes: impl AsRef<[u8]>) -> Result<(), CliError> {
    fs::write(path, bytes).map_err(|e| cortigraph::Error::io(path, e).into())
}

pub fn summary_line(ds: &GraphDataset) -> String {
    let counts: Vec<usize> = ds.graphs.iter().map(BrainGraph::edge_count).collect();
    let lo = counts.iter().copied().min().unwrap_or(0);
    let hi = counts.iter().copied().max().unwrap_or(0);
    let edges = if lo == hi {
        format!("{lo} edges each")
    } else {
        format!("{lo} to {hi} edges per graph")
    };
    format!(
        "{} graphs ({} AD / {} NC), {edges}",
        ds.len(),
        ds.count_label(1),
        ds.count_label(0)
    )
}

pub fn gen(cfg: &RunConfig, quiet: bool) -> Result<(), CliError> {
    let out = cfg.require(&cfg.out_dir, "out_dir")?;
    let gen = cfg.gen_config();
    gen.validate()?;
    if !quiet {
        eprintln!(
            "generating {} subjects at {} nodes x {} vertices",
            gen.n_ad + gen.n_nc,
            gen.nodes_target,
            gen.vertices_per_node
        );
    }
    let ds = generate_dataset(&gen)?;
    ds.save(out)?;
    println!("{}", summary_line(&ds));
    Ok(())
}

pub fn train(cfg: &RunConfig, quiet: bool) -> Result<(), CliError> {
    let data = cfg.require(&cfg.dataset_dir, "dataset_dir")?;
    let out = cfg.require(&cfg.out_dir, "out_dir")?;
    let tc = cfg.train_config();
    tc.validate()?;
    let ds = GraphDataset::load(data)?;
    let outcome = train_with_observer(&ds, &tc, |m| {
        if !quiet {
            eprintln!(
                "epoch {:>4}  train_loss {}  train_acc {}  val_loss {}  val_acc {}",
                m.epoch,
                format_sig6(m.train_loss),
                format_sig6(m.train_acc),
                format_sig6(m.val_loss),
                format_sig6(m.val_acc)
            );
        }
    })?;
    fs::create_dir_all(out).map_err(|e| cortigraph::Error::io(out, e))?;
    outcome.best.save(out.join(CHECKPOINT_FILE))?;
    outcome.history.write_csv(out.join(METRICS_FILE))?;
    let manifest = format!(
        "{}# dataset: {} graphs, {} nodes\n# best epoch: {}\n",
        cfg.to_text(),
        ds.len(),
        ds.num_nodes(),
        outcome.history.best_epoch
    );
    write(&out.join(RUN_MANIFEST_FILE), manifest)?;
    let best = outcome.history.best().expect("at least one epoch");
    println!(
        "best epoch {}: peak val accuracy {:.4} (val loss {})",
        best.epoch,
        best.val_acc,
        format_sig6(best.val_loss)
    );
    Ok(())
}

pub fn eval_csv(e: &Evaluation) -> String {
    let [[tn, fp], [fn_, tp]] = e.confusion;
    format!(
        "graphs,accuracy,mean_loss,tn,fp,fn,tp\n{},{},{},{tn},{fp},{fn_},{tp}\n",
        e.total(),
        format_sig6(e.accuracy),
        format_sig6(e.mean_loss)
    )
}

pub fn eval(cfg: &RunConfig) -> Result<(), CliError> {
    let ckpt = cfg.require(&cfg.checkpoint, "checkpoint")?;
    let data = cfg.require(&cfg.dataset_dir, "dataset_dir")?;
    let model = GraphClassifier::load(ckpt)?;
    let ds = GraphDataset::load(data)?;
    let e = evaluate(&model, &ds)?;
    let [[tn, fp], [fn_, tp]] = e.confusion;
    println!(
        "accuracy {:.4} ({}/{}), mean loss {}",
        e.accuracy,
        tn + tp,
        e.total(),
        format_sig6(e.mean_loss)
    );
    println!("confusion (rows true, cols predicted): NC [{tn} {fp}]  AD [{fn_} {tp}]");
    if let Some(path) = &cfg.eval_csv {
        write(path, eval_csv(&e))?;
    }
    Ok(())
}

pub fn predict(cfg: &RunConfig) -> Result<(), CliError> {
    let ckpt = cfg.require(&cfg.checkpoint, "checkpoint")?;
    let graph = cfg.require(&cfg.graph, "graph")?;
    let model = GraphClassifier::load(ckpt)?;
    let g = BrainGraph::load(graph)?;
    let logit = model.logit(&g)?;
    println!("label={} p={:.6}", predict_label(logit), probability(logit));
    Ok(())
}

pub fn gradcheck(cfg: &RunConfig, fault: Option<f64>) -> Result<(), CliError> {
    let fault = fault.map(BackwardFault::MatMulLhsScale);
    let mut worst: f64 = 0.0;
    let mut failed = Vec::new();
    for act in [Activation::Sigmoid, Activation::Relu] {
        let report = run_gradcheck(cfg.seed, act, fault)?;
        println!(
            "{}: max relative error {:.3e} over {} entries",
            act.name(),
            report.max_rel_error,
            report.entries()
        );
        worst = worst.max(report.max_rel_error);
        for p in report.failures() {
            failed.push(format!(
                "{}/{} (entry {}, error {:.3e})",
                act.name(),
                p.name,
                p.worst_index,
                p.max_rel_error
            ));
        }
    }
    println!("max relative error {worst:.3e} (tolerance {GRADCHECK_TOLERANCE:e})");
    if failed.is_empty() {
        Ok(())
    } else {
        for f in &failed {
            eprintln!("  {f}");
        }
        Err(CliError::Gradcheck(format!(
            "{} parameter tensors exceed tolerance",
            failed.len()
        )))
    }
}
