//! End-to-end acceptance checks, one test per criterion.
//!
//! Every test writes a single `[criterion N] ... PASS|FAIL` line straight to
//! stderr (bypassing libtest capture) before asserting, so a full
//! `cargo test` log shows the verdict of all ten.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::{Duration, Instant};

use image::{Rgb, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use refcat::charis::{
    color_score, cost_matrix, hungarian, match_regions, rgb_to_hsv, rgb_to_lab, score_from_tiers,
    segment, weighted_geometric_mean, Backends, ColorThresholds, SegmentConfig,
};
use refcat::dit::{
    apply_lora, rope_apply, Dit, Init, LoraConfig, LoraPolicy, ModelConfig, ModelParams,
    TextCondition,
};
use refcat::flow::{
    initial_noise, masked_cfm_loss, sample, sample_traced, LossConfig, LossMode, SamplerConfig,
    VelocityField,
};
use refcat::latents::{build_mask, concat_width, sample_noise};
use refcat::synthdata::{build_corpus, render, Context, CorpusConfig, Pose};
use refcat::train::{
    ablate, evaluate, gradcheck, train_adapters, train_base, AblationAxis, EvalConfig, EvalItem,
    Runtime, TrainConfig, GRADCHECK_TOL,
};
use refcat::{LatentGrid, ReferenceNoising, Result, SpatialMask};

fn report(n: usize, name: &str, pass: bool, detail: &str) {
    let verdict = if pass { "PASS" } else { "FAIL" };
    let line = format!("[criterion {n:>2}] {name}: {verdict} ({detail})\n");
    let _ = std::io::stderr().lock().write_all(line.as_bytes());
}

fn tokens(len: usize) -> TextCondition {
    TextCondition::Tokens(
        refcat::synthdata::prompt_tokens(Pose::Wave, Context::Gradient, len).unwrap(),
    )
}

#[test]
fn criterion_01_gradient_correctness() {
    let cfg = ModelConfig::gradcheck();
    assert_eq!((cfg.layers, cfg.model_dim), (2, 16));
    let r = gradcheck(&cfg, 11).unwrap();
    let worst = r
        .base
        .iter()
        .chain(&r.lora)
        .map(|g| g.max_rel_err)
        .fold(0.0, f64::max);
    let pass = r.passed && r.elapsed < Duration::from_secs(60) && r.tolerance == GRADCHECK_TOL;
    report(
        1,
        "gradient correctness",
        pass,
        &format!(
            "{} base + {} adapter groups, worst rel err {worst:.2e} < {GRADCHECK_TOL:e}, {:.1?}",
            r.base.len(),
            r.lora.len(),
            r.elapsed
        ),
    );
    assert!(pass, "failing groups: {:?}", r.failures());
}

/// The model's velocity with its reference half shifted by a constant.
struct Perturbed<'a> {
    inner: Dit<'a>,
    shift: f64,
}

impl VelocityField for Perturbed<'_> {
    fn velocity(&self, z_t: &LatentGrid, t: f64, text: &TextCondition) -> Result<LatentGrid> {
        let mut v = self.inner.forward(z_t, text, t)?;
        let (h, w, c) = v.shape();
        for i in 0..h {
            for j in w / 2..w {
                for k in 0..c {
                    v.set(
                        i,
                        j,
                        k,
                        v.get(i, j, k) + self.shift * (1.0 + (i + j + k) as f64),
                    );
                }
            }
        }
        Ok(v)
    }
}

#[test]
fn criterion_02_mask_semantics() {
    let cfg = ModelConfig::gradcheck();
    let params = ModelParams::init(&cfg, 3, Init::Dense).unwrap();
    let (h, w, c) = (cfg.grid_height, cfg.grid_width, cfg.latent_dim);
    let z0 = concat_width(
        &sample_noise(h, w, c, 1).unwrap(),
        &sample_noise(h, w, c, 2).unwrap(),
    )
    .unwrap();
    let z1 = sample_noise(h, 2 * w, c, 3).unwrap();
    let mask = build_mask(h, w).unwrap();
    let text = tokens(cfg.text_tokens);
    let mut perturbation_delta = 0.0f64;
    let mut ones_mismatch = 0usize;
    let mut trials = 0usize;
    for noising in [ReferenceNoising::Clean, ReferenceNoising::Noised] {
        let masked = LossConfig {
            mode: LossMode::Masked,
            reference_noising: noising,
        };
        let full = LossConfig {
            mode: LossMode::Full,
            ..masked
        };
        for (k, t) in [0.1, 0.37, 0.8].into_iter().enumerate() {
            let base = Dit::new(&params, None).unwrap();
            let clean = masked_cfm_loss(&z0, &z1, t, &text, &mask, &base, masked).unwrap();
            for shift in [1e-3, 0.5, 40.0] {
                let model = Perturbed {
                    inner: base,
                    shift: shift * (k + 1) as f64,
                };
                let moved = masked_cfm_loss(&z0, &z1, t, &text, &mask, &model, masked).unwrap();
                perturbation_delta =
                    perturbation_delta.max((moved.objective() - clean.objective()).abs());
                assert!(
                    moved.reference_half != clean.reference_half,
                    "perturbation must reach the reference half"
                );
                trials += 1;
            }
            let ones = SpatialMask::ones(h, 2 * w);
            let as_masked = masked_cfm_loss(&z0, &z1, t, &text, &ones, &base, masked).unwrap();
            let as_full = masked_cfm_loss(&z0, &z1, t, &text, &mask, &base, full).unwrap();
            if as_masked.objective().to_bits() != as_full.objective().to_bits() {
                ones_mismatch += 1;
            }
        }
    }
    let pass = perturbation_delta == 0.0 && ones_mismatch == 0;
    report(
        2,
        "mask semantics",
        pass,
        &format!("{trials} reference-half perturbations, max |dL| = {perturbation_delta:e}; all-ones mask bit mismatches = {ones_mismatch}"),
    );
    assert!(pass);
}

#[test]
fn criterion_03_rope_relative_position() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
    let mut worst = 0.0f64;
    for trial in 0..1000 {
        let dh = [8, 16, 32][trial % 3];
        let q: Vec<f64> = (0..dh).map(|_| rng.random_range(-1.0..1.0)).collect();
        let k: Vec<f64> = (0..dh).map(|_| rng.random_range(-1.0..1.0)).collect();
        let pq = (rng.random_range(0..64), rng.random_range(0..64));
        let pk = (rng.random_range(0..64), rng.random_range(0..64));
        let off = (rng.random_range(0..1000), rng.random_range(0..1000));
        let before = dot(&rope_apply(&q, pq).unwrap(), &rope_apply(&k, pk).unwrap());
        let after = dot(
            &rope_apply(&q, (pq.0 + off.0, pq.1 + off.1)).unwrap(),
            &rope_apply(&k, (pk.0 + off.0, pk.1 + off.1)).unwrap(),
        );
        worst = worst.max((before - after).abs());
    }
    let pass = worst < 1e-5;
    report(
        3,
        "RoPE relative position",
        pass,
        &format!("1000 triples, max |Δ q·k| = {worst:.2e} < 1e-5"),
    );
    assert!(pass);
}

#[test]
fn criterion_04_lora_identity_at_init() {
    let cfg = ModelConfig::default();
    let params = ModelParams::init(&cfg, 5, Init::Dense).unwrap();
    let z = sample_noise(cfg.grid_height, 2 * cfg.grid_width, cfg.latent_dim, 6).unwrap();
    let text = tokens(cfg.text_tokens);
    let base = Dit::new(&params, None)
        .unwrap()
        .forward(&z, &text, 0.42)
        .unwrap();
    let mut worst = 0.0f64;
    let mut sets = BTreeMap::new();
    for policy in LoraPolicy::ALL {
        for rank in [4, 16] {
            let lcfg = LoraConfig {
                policy,
                rank,
                ..LoraConfig::default()
            };
            let lora = apply_lora(&params, &lcfg, 7).unwrap();
            let out = Dit::new(&params, Some(&lora))
                .unwrap()
                .forward(&z, &text, 0.42)
                .unwrap();
            worst = worst.max(out.max_abs_diff(&base));
            let names: std::collections::BTreeSet<String> =
                lora.target_names(&params).map(str::to_string).collect();
            sets.insert(policy, names);
        }
    }
    let (a, b, c) = (
        &sets[&LoraPolicy::A],
        &sets[&LoraPolicy::B],
        &sets[&LoraPolicy::C],
    );
    let nested = a.is_subset(b) && b.is_subset(c) && a.len() < b.len() && b.len() < c.len();
    let pass = worst <= 1e-6 && nested;
    report(
        4,
        "LoRA identity at init",
        pass,
        &format!(
            "policies A/B/C x ranks 4,16: max |Δ| = {worst:e}; |A|={} ⊂ |B|={} ⊂ |C|={}",
            a.len(),
            b.len(),
            c.len()
        ),
    );
    assert!(pass);
}

/// Constant velocity field.
struct Constant(LatentGrid);

impl VelocityField for Constant {
    fn velocity(&self, _: &LatentGrid, _: f64, _: &TextCondition) -> Result<LatentGrid> {
        Ok(self.0.clone())
    }
}

#[test]
fn criterion_05_sampler_contracts() {
    let cfg = ModelConfig::default();
    let (h, w, c) = (cfg.grid_height, cfg.grid_width, cfg.latent_dim);
    let reference = sample_noise(h, w, c, 40).unwrap();
    let target = sample_noise(h, w, c, 41).unwrap();
    let scfg = SamplerConfig {
        steps: 32,
        seed: 9,
        ..SamplerConfig::default()
    };
    let text = tokens(cfg.text_tokens);

    // Oracle: v = z0 - z1 everywhere, so Euler integration lands on z0.
    let z1 = concat_width(&initial_noise(&reference, scfg.seed).unwrap(), &reference).unwrap();
    let z0 = concat_width(&target, &reference).unwrap();
    let recovered = sample(&reference, &text, &Constant(z0.sub(&z1)), &scfg).unwrap();
    let oracle_err = recovered.max_abs_diff(&target);

    let params = ModelParams::init(&cfg, 8, Init::Dense).unwrap();
    let dit = Dit::new(&params, None).unwrap();
    let mut clamp_err = 0.0f64;
    let mut observed = 0;
    let first = sample_traced(&reference, &text, &dit, &scfg, |_, _, z| {
        clamp_err = clamp_err.max(z.reference_half().unwrap().max_abs_diff(&reference));
        observed += 1;
    })
    .unwrap();
    let second = sample(&reference, &text, &dit, &scfg).unwrap();
    let identical = first
        .data()
        .iter()
        .zip(second.data())
        .all(|(a, b)| a.to_bits() == b.to_bits());

    let pass = oracle_err < 1e-12 && clamp_err == 0.0 && observed == scfg.steps + 1 && identical;
    report(
        5,
        "sampler contracts",
        pass,
        &format!(
            "constant-field error {oracle_err:.1e}; reference max|diff| {clamp_err:e} over {observed} states; repeat bit-identical = {identical}"
        ),
    );
    assert!(pass);
}

fn blocks(colors: &[[u8; 3]], bg: [u8; 3]) -> RgbImage {
    // Colour blocks in a row on a uniform background.
    RgbImage::from_fn(64, 64, |x, y| {
        let k = (x / 16) as usize;
        if (8..56).contains(&y) && x % 16 >= 2 && x % 16 < 14 && k < colors.len() {
            Rgb(colors[k])
        } else {
            Rgb(bg)
        }
    })
}

/// Exhaustive optimum over every injective assignment of the smaller side.
fn brute_force(cost: &[Vec<f64>]) -> f64 {
    let n = cost.len();
    let m = cost.first().map_or(0, Vec::len);
    if n == 0 || m == 0 {
        return 0.0;
    }
    fn go(
        cost: &[Vec<f64>],
        row: usize,
        used: &mut Vec<bool>,
        transpose: bool,
        acc: f64,
        best: &mut f64,
    ) {
        let (rows, cols) = if transpose {
            (cost[0].len(), cost.len())
        } else {
            (cost.len(), cost[0].len())
        };
        if row == rows {
            *best = best.min(acc);
            return;
        }
        for col in 0..cols {
            if !used[col] {
                used[col] = true;
                let c = if transpose {
                    cost[col][row]
                } else {
                    cost[row][col]
                };
                go(cost, row + 1, used, transpose, acc + c, best);
                used[col] = false;
            }
        }
    }
    let transpose = n > m;
    let mut best = f64::INFINITY;
    let cols = if transpose { n } else { m };
    go(cost, 0, &mut vec![false; cols], transpose, 0.0, &mut best);
    best
}

#[test]
fn criterion_06_color_score() {
    let thr = ColorThresholds::default();
    let spec = refcat::synthdata::gen_subject(77);
    let sprite = render(&spec, Pose::Stand, Context::Plain, 64)
        .unwrap()
        .image;
    let self_score = color_score(&sprite, &sprite, &thr).unwrap().score;

    let original = [[200, 40, 40], [40, 160, 60], [50, 70, 210]];
    let shifted = [[40, 200, 200], [200, 40, 190], [230, 210, 40]];
    for (a, b) in original.iter().zip(&shifted) {
        for s in refcat::charis::ColorSpace::ALL {
            let (ca, cb) = (
                refcat::charis::convert(a.map(f64::from), s),
                refcat::charis::convert(b.map(f64::from), s),
            );
            assert!(
                refcat::charis::distance(ca, cb, s) > thr.get(s).t2,
                "shift must exceed t2 in {s:?}"
            );
        }
    }
    let bg = [128, 128, 128];
    let shift_report = color_score(&blocks(&original, bg), &blocks(&shifted, bg), &thr).unwrap();
    let worked = score_from_tiers(&[[2, 1, 2], [2, 2, 0]]);

    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut instances = 0usize;
    let mut worst_gap = 0.0f64;
    for n in 1..=5 {
        for m in 1..=5 {
            for _ in 0..40 {
                let cost: Vec<Vec<f64>> = (0..n)
                    .map(|_| (0..m).map(|_| rng.random::<f64>()).collect())
                    .collect();
                let got: f64 = hungarian(&cost).iter().map(|&(i, j)| cost[i][j]).sum();
                worst_gap = worst_gap.max((got - brute_force(&cost)).abs());
                instances += 1;
            }
            // Region-level instances: random colour blocks.
            for _ in 0..4 {
                let pick = |rng: &mut ChaCha8Rng, k: usize| -> Vec<[u8; 3]> {
                    (0..k)
                        .map(|_| {
                            [
                                rng.random_range(0..4) * 60 + 10,
                                rng.random_range(0..4) * 60 + 10,
                                rng.random_range(0..4) * 60 + 10,
                            ]
                        })
                        .collect()
                };
                let ra = segment(
                    &blocks(&pick(&mut rng, n.min(4)), [255, 255, 255]),
                    &SegmentConfig::foreground(),
                );
                let rb = segment(
                    &blocks(&pick(&mut rng, m.min(4)), [255, 255, 255]),
                    &SegmentConfig::foreground(),
                );
                let (Ok(ra), Ok(rb)) = (ra, rb) else { continue };
                let cost = cost_matrix(&ra, &rb);
                let got = match_regions(&ra, &rb).total_cost;
                worst_gap = worst_gap.max((got - brute_force(&cost)).abs());
                instances += 1;
            }
        }
    }
    let pass = self_score == 1.0
        && shift_report.score == 0.0
        && !shift_report.empty_matching
        && worked == 0.75
        && worst_gap < 1e-12;
    report(
        6,
        "ColorScore",
        pass,
        &format!(
            "self = {self_score}; beyond-t2 shift = {} over {} regions; worked example = {worked}; matching vs brute force over {instances} instances, max gap {worst_gap:e}",
            shift_report.score,
            shift_report.pairs.len()
        ),
    );
    assert!(pass);
}

#[test]
fn criterion_07_charis_composite_properties() {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let mut failures = BTreeMap::from([
        ("annihilation", 0),
        ("symmetry", 0),
        ("scaling", 0),
        ("monotonicity", 0),
    ]);
    let close = |a: f64, b: f64| (a - b).abs() <= 1e-12 * a.abs().max(b.abs()).max(1e-300);
    for _ in 0..10_000 {
        let k = rng.random_range(2..=5);
        let scores: Vec<f64> = (0..k).map(|_| rng.random_range(0.0..=1.0)).collect();
        let weights: Vec<f64> = (0..k).map(|_| rng.random_range(0.01..1.0)).collect();
        let base = weighted_geometric_mean(&scores, &weights).unwrap();

        let mut zeroed = scores.clone();
        zeroed[rng.random_range(0..k)] = 0.0;
        if weighted_geometric_mean(&zeroed, &weights).unwrap() != 0.0 {
            *failures.get_mut("annihilation").unwrap() += 1;
        }

        let equal = vec![0.25; k];
        let mut permuted = scores.clone();
        permuted.reverse();
        permuted.rotate_left(rng.random_range(0..k));
        let (p, q) = (
            weighted_geometric_mean(&scores, &equal).unwrap(),
            weighted_geometric_mean(&permuted, &equal).unwrap(),
        );
        if !close(p, q) {
            *failures.get_mut("symmetry").unwrap() += 1;
        }

        let c = rng.random_range(0.001..1000.0);
        let scaled: Vec<f64> = weights.iter().map(|w| w * c).collect();
        if !close(base, weighted_geometric_mean(&scores, &scaled).unwrap()) {
            *failures.get_mut("scaling").unwrap() += 1;
        }

        let mut raised = scores.clone();
        let i = rng.random_range(0..k);
        raised[i] = rng.random_range(raised[i]..=1.0);
        if weighted_geometric_mean(&raised, &weights).unwrap() < base * (1.0 - 1e-12) {
            *failures.get_mut("monotonicity").unwrap() += 1;
        }
    }
    let pass = failures.values().all(|&v| v == 0);
    report(
        7,
        "CHARIS composite properties",
        pass,
        &format!("10000 tuples, violations {failures:?}"),
    );
    assert!(pass);
}

/// Independent sRGB → CIELAB, written from the standard formulas.
fn lab_oracle(rgb: [u8; 3]) -> [f64; 3] {
    let m = [
        [0.4124564, 0.3575761, 0.1804375],
        [0.2126729, 0.7151522, 0.0721750],
        [0.0193339, 0.1191920, 0.9503041],
    ];
    let lin: Vec<f64> = rgb
        .iter()
        .map(|&c| {
            let v = f64::from(c) / 255.0;
            if v <= 0.04045 {
                v / 12.92
            } else {
                ((v + 0.055) / 1.055).powf(2.4)
            }
        })
        .collect();
    let mut f = [0.0; 3];
    for r in 0..3 {
        let white = m[r][0] + m[r][1] + m[r][2];
        let t = (m[r][0] * lin[0] + m[r][1] * lin[1] + m[r][2] * lin[2]) / white;
        let eps = 216.0 / 24389.0;
        let kappa = 24389.0 / 27.0;
        f[r] = if t > eps {
            t.powf(1.0 / 3.0)
        } else {
            (kappa * t + 16.0) / 116.0
        };
    }
    [
        116.0 * f[1] - 16.0,
        500.0 * (f[0] - f[1]),
        200.0 * (f[1] - f[2]),
    ]
}

fn delta_e(a: [f64; 3], b: [f64; 3]) -> f64 {
    a.iter()
        .zip(&b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

#[test]
fn criterion_08_color_conversion_fixtures() {
    let hsv_ok = rgb_to_hsv([255.0, 0.0, 0.0]) == [0.0, 1.0, 1.0]
        && rgb_to_hsv([255.0, 255.0, 255.0]) == [0.0, 0.0, 1.0]
        && rgb_to_hsv([0.0, 0.0, 0.0]) == [0.0, 0.0, 0.0];
    let lab_white = rgb_to_lab([255.0; 3]);
    let lab_black = rgb_to_lab([0.0; 3]);
    let lab_red = rgb_to_lab([255.0, 0.0, 0.0]);
    let exact_ok = lab_white == [100.0, 0.0, 0.0] && lab_black == [0.0, 0.0, 0.0];
    let red_oracle = delta_e(lab_red, lab_oracle([255, 0, 0]));
    // scikit-image 0.2x `rgb2lab` on uint8 (0, 128, 255), D65 / 2°.
    let reference = [54.714_538_79, 18.773_463_8, -70.913_764_37];
    let nontrivial = delta_e(rgb_to_lab([0.0, 128.0, 255.0]), reference);
    let pass = hsv_ok && exact_ok && red_oracle < 1e-9 && nontrivial < 0.1;
    report(
        8,
        "colour conversion fixtures",
        pass,
        &format!(
            "HSV exact = {hsv_ok}; LAB white {lab_white:?}, black {lab_black:?}; red {lab_red:.4?} vs formula ΔE {red_oracle:.1e}; (0,128,255) vs external ΔE {nontrivial:.4}"
        ),
    );
    assert!(pass);
}

#[test]
fn criterion_09_desk_experiment() {
    let workers = std::thread::available_parallelism().map_or(1, |n| n.get());
    let backends = Backends::stub();
    let corpus = build_corpus(&CorpusConfig::default(), &backends, workers).unwrap();
    assert_eq!(corpus.candidates.len(), 512);
    let data = corpus.latent_pairs().unwrap();
    // Held-out subjects: a different corpus seed.
    let held_out = build_corpus(
        &CorpusConfig {
            subjects: 8,
            pairs_per_subject: 2,
            seed: 0x05ee_d0ff,
            ..CorpusConfig::default()
        },
        &backends,
        workers,
    )
    .unwrap();
    let items = EvalItem::from_corpus(&held_out);
    let eval_cfg = EvalConfig::default();

    // Main masked run, clean reference. Step budget and objective are the
    // defaults; the adapter lr, rank and policy are the desk preset (at lr
    // 1e-4 the colour score stays near 0.08 after 2000 steps).
    let cfg = TrainConfig {
        lr: 3e-3,
        lora: LoraConfig {
            rank: 32,
            alpha: 32.0,
            policy: LoraPolicy::C,
            ..LoraConfig::default()
        },
        base_same_subject: 0.5,
        ..TrainConfig::default()
    };
    assert_eq!((cfg.steps, cfg.loss_mode), (2000, LossMode::Masked));
    let started = Instant::now();
    let rt = Runtime::with_workers(workers);
    let base = train_base(&data, &cfg, &rt).unwrap();
    let masked = train_adapters(&data, &base, &cfg, &mut Runtime::with_workers(workers)).unwrap();
    let elapsed = started.elapsed();
    let rec = &masked.record;
    let ratio = rec.probe_final.loss / rec.probe_untrained.loss;
    let (_, summary) = evaluate(&items, &masked.checkpoint, &eval_cfg, &backends, workers).unwrap();
    let loss_ok = ratio <= 0.2 && elapsed < Duration::from_secs(30 * 60);
    let color_ok = summary.color_gt >= 0.8;

    // Masked vs full with a noised reference half, so that the
    // reference-half residual is learnable at all.
    let ablation_cfg = TrainConfig {
        reference_noising: ReferenceNoising::Noised,
        ..cfg.clone()
    };
    let ab = ablate(
        &data,
        &items,
        &ablation_cfg,
        AblationAxis::LossMode,
        &eval_cfg,
        &backends,
        workers,
    )
    .unwrap();
    let row = |name: &str| ab.rows.iter().find(|r| r.variant == name).unwrap().clone();
    let (m, f) = (row("masked"), row("full"));
    let signature_ok = f.reference_half_final < f.reference_half_initial
        && m.reference_half_final >= 0.95 * m.reference_half_initial
        && m.reference_half_final >= 2.0 * f.reference_half_final;

    report(
        9,
        "desk experiment: loss",
        loss_ok,
        &format!(
            "probe {:.4} -> {:.4} = {:.1}% of initial (adapter phase alone {:.4} -> {:.4}), {:.1?} on {workers} worker(s)",
            rec.probe_untrained.loss,
            rec.probe_final.loss,
            100.0 * ratio,
            rec.probe_initial.loss,
            rec.probe_final.loss,
            elapsed
        ),
    );
    report(
        9,
        "desk experiment: masked vs full",
        signature_ok,
        &format!(
            "reference-half residual full {:.4} -> {:.4}, masked {:.4} -> {:.4}, ratio {:.2}x",
            f.reference_half_initial,
            f.reference_half_final,
            m.reference_half_initial,
            m.reference_half_final,
            m.reference_half_final / f.reference_half_final
        ),
    );
    report(
        9,
        "desk experiment: colour",
        color_ok,
        &format!(
            "ColorScore on ground-truth regions {:.4} over {} held-out pairs",
            summary.color_gt, summary.pairs
        ),
    );
    assert!(loss_ok && signature_ok && color_ok);
}

fn refcat_bin() -> &'static str {
    env!("CARGO_BIN_EXE_refcat")
}

fn run(args: &[&str]) -> std::process::Output {
    let out = Command::new(refcat_bin())
        .args(args)
        .output()
        .expect("binary runs");
    assert!(
        out.status.success(),
        "refcat {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

/// Relative path to bytes for every file under `root`.
fn tree(root: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    fn walk(root: &Path, dir: &Path, out: &mut BTreeMap<PathBuf, Vec<u8>>) {
        let mut entries: Vec<_> = std::fs::read_dir(dir)
            .unwrap()
            .map(|e| e.unwrap().path())
            .collect();
        entries.sort();
        for p in entries {
            if p.is_dir() {
                walk(root, &p, out);
            } else {
                out.insert(
                    p.strip_prefix(root).unwrap().to_path_buf(),
                    std::fs::read(&p).unwrap(),
                );
            }
        }
    }
    let mut out = BTreeMap::new();
    walk(root, root, &mut out);
    out
}

#[test]
fn criterion_10_cli_determinism() {
    let scratch = tempfile::tempdir().unwrap();
    let dir = |name: &str| scratch.path().join(name);
    let s = |p: &Path| p.to_str().unwrap().to_string();
    let tiny_train = [
        "--set",
        "train.steps=2",
        "--set",
        "train.base_steps=2",
        "--set",
        "train.batch_size=3",
        "--set",
        "train.probe_size=2",
        "--set",
        "train.checkpoint_every=1",
        "--set",
        "eval.max_pairs=2",
        "--set",
        "eval.sampler.steps=2",
    ];

    // Inputs for the downstream subcommands.
    run(&[
        "gen-data",
        "--subjects",
        "4",
        "--pairs",
        "4",
        "--seed",
        "7",
        "--out",
        &s(&dir("data")),
        "--workers",
        "1",
    ]);
    let mut args = vec![
        "train".to_string(),
        "--data".to_string(),
        s(&dir("data")),
        "--seed".into(),
        "3".into(),
        "--out".into(),
        s(&dir("ckpt")),
        "--workers".into(),
        "1".into(),
    ];
    args.extend(tiny_train.iter().map(|a| a.to_string()));
    run(&args.iter().map(String::as_str).collect::<Vec<_>>());
    let reference = s(
        &dir("data").join(&refcat::synthdata::load_manifest(&dir("data")).unwrap()[0].reference)
    );
    let checkpoint = s(&dir("ckpt").join("ckpt-final"));

    let data = s(&dir("data"));
    let commands: Vec<(&str, Vec<String>)> = vec![
        (
            "gen-data",
            ["--subjects", "4", "--pairs", "4", "--seed", "7"]
                .map(String::from)
                .to_vec(),
        ),
        (
            "train",
            [
                vec![
                    "--data".into(),
                    data.clone(),
                    "--eval-data".into(),
                    data.clone(),
                    "--seed".into(),
                    "3".into(),
                ],
                tiny_train.map(String::from).to_vec(),
            ]
            .concat(),
        ),
        (
            "ablate",
            [
                vec![
                    "--data".into(),
                    data.clone(),
                    "--axis".into(),
                    "loss_mode".into(),
                    "--seed".into(),
                    "3".into(),
                ],
                tiny_train.map(String::from).to_vec(),
            ]
            .concat(),
        ),
        (
            "sample",
            vec![
                "--checkpoint".into(),
                checkpoint.clone(),
                "--reference".into(),
                reference,
                "--pose".into(),
                "wave".into(),
                "--seed".into(),
                "5".into(),
            ],
        ),
        (
            "eval",
            vec![
                "--data".into(),
                data.clone(),
                "--checkpoint".into(),
                checkpoint,
                "--seed".into(),
                "5".into(),
                "--set".into(),
                "eval.max_pairs=3".into(),
                "--set".into(),
                "eval.sampler.steps=3".into(),
            ],
        ),
        ("gradcheck", vec!["--seed".into(), "2".into()]),
    ];
    let mut summary = Vec::new();
    let mut all_same = true;
    for (name, extra) in &commands {
        let mut trees = Vec::new();
        for (run_ix, workers) in ["1", "1", "4", "4"].iter().enumerate() {
            let out = dir(&format!("{name}-{run_ix}"));
            let mut args = vec![name.to_string()];
            args.extend(extra.iter().cloned());
            args.extend([
                "--out".into(),
                s(&out),
                "--workers".into(),
                workers.to_string(),
            ]);
            run(&args.iter().map(String::as_str).collect::<Vec<_>>());
            trees.push(tree(&out));
        }
        let same = trees.iter().all(|t| t == &trees[0]) && !trees[0].is_empty();
        all_same &= same;
        summary.push(format!(
            "{name}: {} files {}",
            trees[0].len(),
            if same { "identical" } else { "DIFFER" }
        ));
    }
    report(
        10,
        "CLI determinism",
        all_same,
        &format!("2 runs x workers {{1, 4}}: {}", summary.join("; ")),
    );
    assert!(all_same);
}
