use std::fs;
use std::path::{Path, PathBuf};

use grrcoca::data::{decode_caption, load_image, write_synth_dataset, ManifestDataset};
use grrcoca::gradsuite::{self, LAYERS};
use grrcoca::model::{
    count_parameters, load_checkpoint, save_checkpoint, CoCaModel, EncoderVariant, ModelConfig,
};
use grrcoca::training::{evaluate, train, EpochDecision, MetricsWriter};
use grrcoca::{Error, Result};
use serde::Serialize;
use serde_json::json;

use crate::config::RunConfig;

pub fn cmd_train(config: &Path, seed: Option<u64>, out: Option<PathBuf>) -> Result<()> {
    let mut cfg = RunConfig::load(config)?;
    if let Some(seed) = seed {
        cfg.train.seed = seed;
    }
    if let Some(out) = out {
        cfg.output.run_dir = std::path::absolute(&out).map_err(|e| Error::io(&out, e))?;
    }
    let cfg = cfg.resolve()?;
    let dir = cfg.output.run_dir.clone();
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let resolved = serde_json::to_string_pretty(&cfg)?;
    let resolved_path = dir.join("resolved-config.json");
    fs::write(&resolved_path, resolved + "\n").map_err(|e| Error::io(&resolved_path, e))?;

    let (train_set, val_set) = cfg.load_splits()?;
    let model = CoCaModel::new(&cfg.model)?;
    let params = model.init_params(cfg.train.seed);
    eprintln!(
        "training {} encoder: {} parameters, {} train / {} val samples",
        cfg.model.encoder_variant,
        model.specs().iter().map(|s| s.numel()).sum::<usize>(),
        train_set.len(),
        val_set.len()
    );

    let mut metrics = MetricsWriter::create(&dir.join("metrics.csv"))?;
    let ckpt = dir.join("best.ckpt");
    let run_config = serde_json::to_value(&cfg)?;
    let outcome = train(&model, params, &train_set, &val_set, &cfg.train, |r| {
        metrics.write(r.train)?;
        metrics.write(r.val)?;
        if r.decision == (EpochDecision::Continue { improved: true }) {
            let extra = json!({"run_config": run_config, "epoch": r.epoch, "val_coca_loss": r.val.coca_loss});
            save_checkpoint(&ckpt, &model, r.params, Some(extra))?;
        }
        eprintln!(
            "epoch {:>3}  train {:.4}  val {:.4}  ppl {:.2}  con {:.4}  lr_max {:.2e}  {:?}",
            r.epoch,
            r.train.coca_loss,
            r.val.coca_loss,
            r.val.perplexity,
            r.val.contrastive_loss,
            r.val.lr_max_current,
            r.decision
        );
        Ok(())
    })?;
    println!(
        "run directory {}: {} steps, best val coca_loss {:.6}{}",
        dir.display(),
        outcome.steps,
        outcome.best_val_loss,
        if outcome.stopped_early {
            ", stopped early"
        } else {
            ""
        }
    );
    Ok(())
}

/// The configuration stored in a checkpoint, or defaults around its model.
fn checkpoint_config(model: &ModelConfig, extra: Option<&serde_json::Value>) -> Result<RunConfig> {
    match extra.and_then(|e| e.get("run_config")) {
        Some(v) => serde_json::from_value(v.clone())
            .map_err(|e| Error::Checkpoint(format!("stored run configuration: {e}"))),
        None => Ok(RunConfig {
            model: model.clone(),
            ..RunConfig::default()
        }),
    }
}

#[derive(Serialize)]
struct EvaluationRow<'a> {
    split: &'a str,
    samples: usize,
    coca_loss: f64,
    caption_loss_mean: f64,
    perplexity: f64,
    contrastive_loss: f64,
}

pub fn cmd_evaluate(
    checkpoint: &Path,
    config: Option<&Path>,
    manifest: Option<&Path>,
    out: Option<PathBuf>,
) -> Result<()> {
    let (model, params, extra) = load_checkpoint(checkpoint)?;
    let mut cfg = match config {
        Some(p) => RunConfig::load(p)?,
        None => checkpoint_config(&model.config, extra.as_ref())?,
    };
    cfg.model = model.config.clone();
    let (samples, split) = match manifest {
        Some(m) => {
            let ds = ManifestDataset::load(m)?;
            let tok = cfg.tokenizer()?;
            let s = ds.load_samples(tok.as_ref(), &cfg.pipeline(), cfg.model.context_len)?;
            (s, ds.split)
        }
        None => (cfg.load_val()?, "val".to_string()),
    };
    let m = evaluate(
        &model,
        &params,
        &samples,
        cfg.train.effective_batch(),
        cfg.train.weights(),
    )?;
    println!("coca_loss {:.9}", m.coca_loss);
    println!("perplexity {:.9}", m.perplexity);
    println!("contrastive_loss {:.9}", m.contrastive_loss);

    let dir = match out {
        Some(d) => d,
        None => checkpoint.parent().map(Path::to_path_buf).unwrap_or_default(),
    };
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let path = dir.join("evaluation.csv");
    let mut w = csv::Writer::from_path(&path).map_err(Error::from)?;
    w.serialize(EvaluationRow {
        split: &split,
        samples: m.samples,
        coca_loss: m.coca_loss,
        caption_loss_mean: m.caption_loss_mean,
        perplexity: m.perplexity,
        contrastive_loss: m.contrastive_loss,
    })?;
    w.flush().map_err(|e| Error::io(&path, e))?;
    Ok(())
}

pub fn cmd_caption(checkpoint: &Path, image: &Path, max_len: Option<usize>) -> Result<()> {
    let (model, params, extra) = load_checkpoint(checkpoint)?;
    let cfg = checkpoint_config(&model.config, extra.as_ref())?;
    let img = load_image(image, &cfg.pipeline())?;
    let ids = model.generate_caption(&params, &img, max_len.unwrap_or(model.config.context_len))?;
    println!("{}", decode_caption(&ids, cfg.tokenizer()?.as_ref()));
    Ok(())
}

pub fn cmd_param_count(config: Option<&Path>) -> Result<()> {
    let base = match config {
        Some(p) => RunConfig::load(p)?.model,
        None => ModelConfig::default(),
    };
    base.validate()?;
    let grr = count_parameters(&base.clone().with_variant(EncoderVariant::Grr))?;
    let baseline = count_parameters(&base.clone().with_variant(EncoderVariant::Baseline))?;
    let (g, b) = (grr.groups(), baseline.groups());
    println!("{:<12} {:>14} {:>14}", "group", "grr", "baseline");
    for (name, n) in &g {
        println!("{name:<12} {n:>14} {:>14}", b.get(name).copied().unwrap_or(0));
    }
    println!("{:<12} {:>14} {:>14}", "total", grr.total, baseline.total);
    let diff = (grr.total as f64 - baseline.total as f64) / baseline.total as f64;
    println!("grr_over_baseline {:+.4}%", 100.0 * diff);
    Ok(())
}

/// Returns whether every check passed.
pub fn cmd_grad_check(tolerance: f64, seeds: u64, inject_bug: bool) -> Result<bool> {
    if !(tolerance > 0.0) || seeds == 0 {
        return Err(Error::Config(
            "grad-check needs a positive tolerance and at least one seed".into(),
        ));
    }
    let seeds: Vec<u64> = (0..seeds).collect();
    let checks = gradsuite::run_suite(&seeds, tolerance, inject_bug)?;
    let mut all = true;
    println!("{:<18} {:>14}  result", "layer", "max_rel_error");
    for layer in LAYERS {
        let mine: Vec<_> = checks.iter().filter(|c| c.layer == layer).collect();
        let worst = mine.iter().map(|c| c.report.max_rel_error).fold(0.0, f64::max);
        let ok = mine.iter().all(|c| c.report.passed);
        all &= ok;
        println!("{layer:<18} {worst:>14.3e}  {}", if ok { "pass" } else { "FAIL" });
    }
    println!(
        "{} at tolerance {tolerance:e} over {} seeds",
        if all { "all passed" } else { "failures" },
        seeds.len()
    );
    Ok(all)
}

pub fn cmd_synth_data(out: &Path, n: usize, split: &str, seed: u64, size: usize) -> Result<()> {
    let ds = write_synth_dataset(out, split, n, seed, size)?;
    println!("wrote {} records to {}", ds.len(), ds.path.display());
    Ok(())
}
