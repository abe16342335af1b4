use grrcoca::data::{synth_samples, ByteTokenizer, ImagePipelineConfig, Sample};
use grrcoca::model::{CoCaModel, ModelConfig};
use grrcoca::objectives::LossWeights;
use grrcoca::training::{
    batch_gradients, evaluate, micro_batches, train, write_metrics, AdamWConfig, OptimizerState, RunMode,
    TrainConfig,
};
use grrcoca::Error;

fn tiny_config() -> ModelConfig {
    ModelConfig {
        d_model: 16,
        heads: 2,
        blocks_per_submodel: 1,
        image_size: 16,
        patch_size: 8,
        ..ModelConfig::toy()
    }
}

fn samples(n: usize, seed: u64, config: &ModelConfig) -> Vec<Sample> {
    let pipe = ImagePipelineConfig::with_size(config.image_size);
    synth_samples(n, seed, &pipe, &ByteTokenizer, config.context_len).unwrap()
}

#[test]
fn accumulated_gradients_match_single_batch() {
    let config = tiny_config();
    let model = CoCaModel::new(&config).unwrap();
    let params = model.init_params(3);
    let data = samples(8, 5, &config);
    let group: Vec<usize> = (0..8).collect();
    let w = LossWeights::PRETRAIN;

    let whole = micro_batches(&data, &group, 8).unwrap();
    let split = micro_batches(&data, &group, 2).unwrap();
    assert_eq!(split.len(), 4);
    let a = batch_gradients(&model, &params, &whole, w, None).unwrap();
    let b = batch_gradients(&model, &params, &split, w, None).unwrap();

    assert!((a.contrastive_loss - b.contrastive_loss).abs() < 1e-12);
    assert!((a.caption_loss_sum - b.caption_loss_sum).abs() < 1e-9);
    assert_eq!(a.valid_tokens, b.valid_tokens);
    let worst = a
        .grads
        .iter()
        .zip(&b.grads)
        .map(|(x, y)| x.max_abs_diff(y))
        .fold(0.0, f64::max);
    assert!(worst < 1e-9, "gradient mismatch {worst}");

    let mut pa = params.clone();
    let mut pb = params.clone();
    OptimizerState::new(&pa, AdamWConfig::default())
        .step(&mut pa, &a.grads, 1e-3)
        .unwrap();
    OptimizerState::new(&pb, AdamWConfig::default())
        .step(&mut pb, &b.grads, 1e-3)
        .unwrap();
    assert!(pa.max_abs_diff(&pb) < 1e-9);
}

#[test]
fn accumulation_with_dropout_is_reproducible() {
    let config = ModelConfig {
        dropout: 0.2,
        ..tiny_config()
    };
    let model = CoCaModel::new(&config).unwrap();
    let params = model.init_params(0);
    let data = samples(6, 1, &config);
    let split = micro_batches(&data, &[0, 1, 2, 3, 4, 5], 3).unwrap();
    let w = LossWeights::FINETUNE;
    let a = batch_gradients(&model, &params, &split, w, Some(9)).unwrap();
    let b = batch_gradients(&model, &params, &split, w, Some(9)).unwrap();
    let c = batch_gradients(&model, &params, &split, w, Some(10)).unwrap();
    assert_eq!(a.contrastive_loss, b.contrastive_loss);
    assert!(a.grads.iter().zip(&b.grads).all(|(x, y)| x == y));
    assert_ne!(a.contrastive_loss, c.contrastive_loss);
}

fn short_run(seed: u64) -> Vec<u8> {
    let config = tiny_config();
    let model = CoCaModel::new(&config).unwrap();
    let cfg = TrainConfig {
        micro_batch: 4,
        accum_steps: 2,
        epochs: 2,
        warmup_steps: 2,
        seed,
        log_wallclock: false,
        dropout: Some(0.0),
        ..TrainConfig::default()
    };
    let mut epochs_seen = Vec::new();
    let out = train(
        &model,
        model.init_params(seed),
        &samples(20, 1, &config),
        &samples(6, 2, &config),
        &cfg,
        |r| {
            epochs_seen.push(r.epoch);
            Ok(())
        },
    )
    .unwrap();
    assert_eq!(epochs_seen, [1, 2]);
    assert_eq!(out.metrics.len(), 4);
    assert_eq!(out.steps, 2 * 3);
    let mut csv = Vec::new();
    write_metrics(&mut csv, &out.metrics).unwrap();
    csv
}

#[test]
fn fixed_seed_runs_are_identical() {
    let a = short_run(4);
    assert_eq!(a, short_run(4));
    assert_ne!(a, short_run(5));
    let text = String::from_utf8(a).unwrap();
    assert!(text.starts_with(
        "epoch,split,coca_loss,caption_loss_mean,perplexity,contrastive_loss,lr_max_current,resets_done,wallclock_s\n"
    ));
    assert_eq!(text.lines().count(), 5);
}

#[test]
fn validation_metrics_are_consistent() {
    let config = tiny_config();
    let model = CoCaModel::new(&config).unwrap();
    let params = model.init_params(1);
    let val = samples(10, 3, &config);
    let m = evaluate(&model, &params, &val, 4, LossWeights::PRETRAIN).unwrap();
    assert_eq!(m.samples, 10);
    assert!((m.perplexity - m.caption_loss_mean.exp()).abs() < 1e-9 * m.perplexity);
    assert!((m.coca_loss - (2.0 * m.contrastive_loss + m.caption_loss_mean)).abs() < 1e-12);
    // Random initialization predicts close to uniformly over the vocabulary.
    let v = config.vocab_size as f64;
    assert!((m.perplexity - v).abs() < 0.05 * v, "perplexity {}", m.perplexity);
    let again = evaluate(&model, &params, &val, 4, LossWeights::PRETRAIN).unwrap();
    assert_eq!(m, again);
}

#[test]
fn degenerate_inputs_are_rejected() {
    let config = tiny_config();
    let model = CoCaModel::new(&config).unwrap();
    let data = samples(4, 0, &config);
    let run = |cfg: &TrainConfig, tr: &[Sample], va: &[Sample]| {
        train(&model, model.init_params(0), tr, va, cfg, |_| Ok(()))
    };
    let ok = TrainConfig {
        micro_batch: 2,
        accum_steps: 1,
        epochs: 1,
        ..TrainConfig::default()
    };
    assert!(matches!(run(&ok, &[], &data), Err(Error::Data(_))));
    assert!(matches!(run(&ok, &data, &[]), Err(Error::Data(_))));
    let zero_accum = TrainConfig {
        accum_steps: 0,
        ..ok.clone()
    };
    assert!(matches!(run(&zero_accum, &data, &data), Err(Error::Config(_))));
    let single = TrainConfig {
        micro_batch: 1,
        ..ok.clone()
    };
    assert!(matches!(run(&single, &data, &data), Err(Error::Config(_))));
}

#[test]
fn run_mode_defaults() {
    let pre = TrainConfig::default();
    assert_eq!(pre.mode, RunMode::Pretrain);
    assert_eq!(pre.weights(), LossWeights::PRETRAIN);
    assert_eq!(pre.resolved_dropout(), 0.15);
    let fine = TrainConfig {
        mode: RunMode::Finetune,
        ..TrainConfig::default()
    };
    assert_eq!(fine.weights(), LossWeights::FINETUNE);
    assert_eq!(fine.resolved_dropout(), 0.1);
    let json = serde_json::to_string(&fine).unwrap();
    let back: TrainConfig = serde_json::from_str(&json).unwrap();
    assert_eq!(back, fine);
    assert!(serde_json::from_str::<TrainConfig>(r#"{"learning_rate": 1}"#).is_err());
}
