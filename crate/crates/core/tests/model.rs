use std::collections::BTreeSet;

use grrcoca::data::{synth_samples, Batch, ByteTokenizer, ImagePipelineConfig, BOS, EOS};
use grrcoca::model::{
    count_parameters, load_checkpoint, read_checkpoint, save_checkpoint, CoCaModel, EncoderVariant,
    ModelConfig,
};
use grrcoca::nn::{ParamSet, Session};
use grrcoca::tensor::{Tape, Tensor};
use grrcoca::Error;

fn small() -> ModelConfig {
    ModelConfig {
        d_model: 16,
        heads: 2,
        blocks_per_submodel: 1,
        image_size: 16,
        patch_size: 8,
        ..ModelConfig::toy()
    }
}

fn batch(config: &ModelConfig, n: usize) -> Batch {
    let pipe = ImagePipelineConfig::with_size(config.image_size);
    let samples = synth_samples(n, 11, &pipe, &ByteTokenizer, config.context_len).unwrap();
    Batch::from_samples(&samples.iter().collect::<Vec<_>>()).unwrap()
}

struct Outputs {
    image: Tensor,
    text: Tensor,
    logits: Tensor,
}

fn run(model: &CoCaModel, params: &ParamSet, images: &Tensor, ids: &[usize]) -> Outputs {
    let tape = Tape::new();
    let s = Session::inference(&tape, params);
    let out = model.forward(&s, tape.constant(images.clone()), ids).unwrap();
    Outputs {
        image: (*out.image_latent.value()).clone(),
        text: (*out.text_latent.value()).clone(),
        logits: (*out.logits.value()).clone(),
    }
}

fn row_norms(t: &Tensor) -> Vec<f64> {
    let d = t.shape()[1];
    t.data()
        .chunks(d)
        .map(|r| r.iter().map(|x| x * x).sum::<f64>().sqrt())
        .collect()
}

#[test]
fn forward_shapes_and_unit_latents() {
    for variant in [EncoderVariant::Grr, EncoderVariant::Baseline] {
        let config = small().with_variant(variant);
        let model = CoCaModel::new(&config).unwrap();
        let params = model.init_params(0);
        let b = batch(&config, 3);
        let out = run(&model, &params, &b.images, &b.inputs);
        assert_eq!(out.image.shape(), [3, 16]);
        assert_eq!(out.text.shape(), [3, 16]);
        assert_eq!(out.logits.shape(), [3, config.context_len, config.vocab_size]);
        for n in row_norms(&out.image).into_iter().chain(row_norms(&out.text)) {
            assert!((n - 1.0).abs() < 1e-12);
        }
    }
}

#[test]
fn logits_do_not_see_future_tokens() {
    let config = small();
    let model = CoCaModel::new(&config).unwrap();
    let params = model.init_params(2);
    let b = batch(&config, 1);
    let base = run(&model, &params, &b.images, &b.inputs);
    let mut ids = b.inputs.clone();
    let t = 6;
    for id in &mut ids[t + 1..] {
        *id = 100;
    }
    let changed = run(&model, &params, &b.images, &ids);
    let v = config.vocab_size;
    let prefix = (t + 1) * v;
    let diff = base.logits.data()[..prefix]
        .iter()
        .zip(&changed.logits.data()[..prefix])
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    assert!(diff < 1e-12, "prefix logits moved by {diff}");
    assert_ne!(base.logits.data()[prefix..], changed.logits.data()[prefix..]);
}

#[test]
fn text_latent_is_read_at_the_cls_slot() {
    let config = small();
    let model = CoCaModel::new(&config).unwrap();
    let params = model.init_params(4);
    let b = batch(&config, 1);
    let base = run(&model, &params, &b.images, &b.inputs);
    // Changing the image leaves the unimodal text path untouched.
    let other = Tensor::from_fn(b.images.shape(), |i| (i as f64 * 0.37).sin());
    let swapped = run(&model, &params, &other, &b.inputs);
    assert_eq!(base.text, swapped.text);
    assert_ne!(base.image, swapped.image);
}

#[test]
fn variants_differ_only_in_encoder_parameters() {
    let names = |v| -> BTreeSet<(String, Vec<usize>)> {
        CoCaModel::new(&small().with_variant(v))
            .unwrap()
            .specs()
            .iter()
            .map(|s| (s.name.clone(), s.shape.clone()))
            .collect()
    };
    let grr = names(EncoderVariant::Grr);
    let base = names(EncoderVariant::Baseline);
    for (name, _) in grr.symmetric_difference(&base) {
        assert!(name.starts_with("encoder."), "{name} differs outside the encoder");
    }
    assert!(base.iter().any(|(n, _)| n == "encoder.pos_embed"));
    assert!(!grr.iter().any(|(n, _)| n == "encoder.pos_embed"));
}

/// Closed-form count, written out independently of the layer code.
fn closed_form(c: &ModelConfig) -> usize {
    let d = c.d_model;
    let attn = 4 * (d * d + d);
    let geglu_h = (c.geglu_scaler * d as f64 + 1e-9).floor() as usize;
    let geglu = 3 * d * geglu_h + 2 * geglu_h + d;
    let plain_h = (c.ff_scaler * d as f64).round() as usize;
    let plain = 2 * d * plain_h + plain_h + d;
    let (enc_norm, enc_ff, pos) = match c.encoder_variant {
        EncoderVariant::Grr => (d, geglu, 0),
        EncoderVariant::Baseline => (2 * d, plain, c.num_patches() * d),
    };
    let n = c.blocks_per_submodel;
    let patch = c.channels * c.patch_size * c.patch_size * d + d;
    let encoder = patch + pos + n * (2 * enc_norm + attn + enc_ff) + enc_norm;
    let poolers = c.gen_pool_queries * d + attn + d + attn;
    let uni = n * (2 * d + attn + geglu) + d;
    let self_ff = if c.multimodal_self_ff { d + geglu } else { 0 };
    let multi = n * (2 * d + attn + self_ff + d + attn + geglu) + d;
    let text = c.vocab_size * d + d * c.vocab_size + c.vocab_size;
    encoder + poolers + uni + multi + text + 1
}

#[test]
fn counts_match_closed_form() {
    let paper = ModelConfig::default();
    for config in [
        ModelConfig::toy(),
        ModelConfig::toy().with_variant(EncoderVariant::Baseline),
        small(),
        ModelConfig {
            multimodal_self_ff: false,
            ..small()
        },
        paper.clone(),
        paper.with_variant(EncoderVariant::Baseline),
    ] {
        let counted = count_parameters(&config).unwrap();
        assert_eq!(counted.total, closed_form(&config), "{config:?}");
        assert_eq!(counted.groups().values().sum::<usize>(), counted.total);
    }
}

#[test]
fn checkpoint_round_trip_is_exact() {
    let config = small().with_variant(EncoderVariant::Baseline);
    let model = CoCaModel::new(&config).unwrap();
    let params = model.init_params(8);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    let extra = serde_json::json!({"epoch": 3});
    save_checkpoint(&path, &model, &params, Some(extra.clone())).unwrap();
    let (loaded_model, loaded, got_extra) = load_checkpoint(&path).unwrap();
    assert_eq!(loaded_model.config, config);
    assert_eq!(got_extra, Some(extra));
    for (a, b) in params.iter().zip(loaded.iter()) {
        assert_eq!(a.name, b.name);
        let bits = |t: &Tensor| t.data().iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a.value), bits(&b.value), "{}", a.name);
    }
    let b = batch(&config, 2);
    let x = run(&model, &params, &b.images, &b.inputs);
    let y = run(&loaded_model, &loaded, &b.images, &b.inputs);
    assert_eq!(x.logits, y.logits);
    assert_eq!(x.image, y.image);
    assert_eq!(x.text, y.text);
}

#[test]
fn damaged_checkpoints_are_rejected() {
    let config = small();
    let model = CoCaModel::new(&config).unwrap();
    let params = model.init_params(0);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    save_checkpoint(&path, &model, &params, None).unwrap();
    let bytes = std::fs::read(&path).unwrap();

    let cut = dir.path().join("cut.ckpt");
    std::fs::write(&cut, &bytes[..bytes.len() - 4]).unwrap();
    assert!(matches!(read_checkpoint(&cut), Err(Error::Checkpoint(_))));

    let magic = dir.path().join("magic.ckpt");
    let mut wrong = bytes.clone();
    wrong[0] = b'X';
    std::fs::write(&magic, wrong).unwrap();
    assert!(matches!(read_checkpoint(&magic), Err(Error::Checkpoint(_))));

    assert!(matches!(
        load_checkpoint(&dir.path().join("absent.ckpt")),
        Err(Error::Io { .. })
    ));

    let other = CoCaModel::new(&small().with_variant(EncoderVariant::Baseline)).unwrap();
    let err = read_checkpoint(&path).unwrap().params_for(&other).unwrap_err();
    assert!(err.to_string().contains("encoder"), "{err}");
}

#[test]
fn forced_eos_generates_an_empty_caption() {
    let config = small();
    let model = CoCaModel::new(&config).unwrap();
    let mut params = model.init_params(0);
    let bias = model.lm_head.bias.unwrap();
    let mut b = Tensor::zeros(vec![config.vocab_size]);
    b.data_mut()[EOS] = 1e3;
    params.set(bias, b);
    let image = batch(&config, 1).images.reshape(vec![3, 16, 16]).unwrap();
    let ids = model
        .generate_caption(&params, &image, config.context_len)
        .unwrap();
    assert_eq!(ids, [BOS, EOS]);
    assert!(model.generate_caption(&params, &image, 0).is_err());
    assert!(model
        .generate_caption(&params, &image, config.context_len + 1)
        .is_err());
}

#[test]
fn malformed_inputs_are_rejected() {
    let config = small();
    let model = CoCaModel::new(&config).unwrap();
    let params = model.init_params(0);
    let b = batch(&config, 2);
    let tape = Tape::new();
    let s = Session::inference(&tape, &params);
    let images = tape.constant(b.images.clone());
    assert!(model.forward(&s, images, &b.inputs[..10]).is_err());
    let mut bad = b.inputs.clone();
    bad[3] = config.vocab_size;
    assert!(model.forward(&s, images, &bad).is_err());
    let wrong = tape.constant(Tensor::zeros(vec![2, 3, 8, 8]));
    assert!(model.forward(&s, wrong, &b.inputs).is_err());
}
