use criterion::{black_box, criterion_group, criterion_main, BatchSize, Criterion};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use refcat::charis::{color_score, hungarian, ColorThresholds};
use refcat::dit::{
    apply_lora, Dit, Init, LoraConfig, ModelConfig, ModelParams, TextCondition, Trainable,
};
use refcat::flow::{loss_gradients, LossConfig};
use refcat::latents::{build_mask, sample_noise};
use refcat::synthdata::{gen_subject, prompt_tokens, render, Context, Pose};

fn model_inputs(cfg: &ModelConfig) -> (refcat::LatentGrid, refcat::LatentGrid, TextCondition) {
    let (h, w, c) = (cfg.grid_height, 2 * cfg.grid_width, cfg.latent_dim);
    let text =
        TextCondition::Tokens(prompt_tokens(Pose::Run, Context::Plain, cfg.text_tokens).unwrap());
    (
        sample_noise(h, w, c, 1).unwrap(),
        sample_noise(h, w, c, 2).unwrap(),
        text,
    )
}

fn forward(c: &mut Criterion) {
    let cfg = ModelConfig::default();
    let params = ModelParams::init(&cfg, 0, Init::Dense).unwrap();
    let (z, _, text) = model_inputs(&cfg);
    let dit = Dit::new(&params, None).unwrap();
    c.bench_function("dit_forward_default", |b| {
        b.iter(|| dit.forward(black_box(&z), &text, 0.5).unwrap())
    });
}

fn train_step(c: &mut Criterion) {
    let cfg = ModelConfig::default();
    let params = ModelParams::init(&cfg, 0, Init::Dense).unwrap();
    let lora = apply_lora(&params, &LoraConfig::default(), 1).unwrap();
    let (z0, z1, text) = model_inputs(&cfg);
    let mask = build_mask(cfg.grid_height, cfg.grid_width).unwrap();
    let dit = Dit::new(&params, Some(&lora)).unwrap();
    c.bench_function("lora_loss_and_gradients_one_sample", |b| {
        b.iter(|| {
            loss_gradients(
                &z0,
                &z1,
                0.3,
                &text,
                &mask,
                &dit,
                LossConfig::default(),
                Trainable::Lora,
            )
            .unwrap()
        })
    });
}

fn colour(c: &mut Criterion) {
    let spec = gen_subject(3);
    let a = render(&spec, Pose::Stand, Context::Plain, 64)
        .unwrap()
        .image;
    let b = render(&spec, Pose::Wave, Context::Gradient, 64)
        .unwrap()
        .image;
    let thr = ColorThresholds::default();
    c.bench_function("color_score_64px", |bench| {
        bench.iter(|| color_score(black_box(&a), &b, &thr).unwrap())
    });
}

fn matching(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    c.bench_function("hungarian_12x12", |b| {
        b.iter_batched(
            || {
                (0..12)
                    .map(|_| (0..12).map(|_| rng.random::<f64>()).collect::<Vec<f64>>())
                    .collect::<Vec<_>>()
            },
            |cost| hungarian(&cost),
            BatchSize::SmallInput,
        )
    });
}

criterion_group! {
    name = benches;
    config = Criterion::default().sample_size(10);
    targets = forward, train_step, colour, matching
}
criterion_main!(benches);
