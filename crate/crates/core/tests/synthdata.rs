use std::time::{Duration, Instant};

use image::GenericImageView;
use refcat::charis::{mean_colors, segment, Backends, ColorThresholds, SegmentConfig};
use refcat::synthdata::{
    build_corpus, gen_sheet, gen_subject, load_manifest, palette_is_valid, render, rescore,
    write_corpus, Context, CorpusConfig, FilterConfig, Pose, RegionalLayout, IMAGE_SIZE,
    MIN_PALETTE_SEPARATION,
};
use refcat::train::{color_score_gt, EvalItem};
use refcat::Error;

fn rgb_dist(a: [u8; 3], b: [u8; 3]) -> f64 {
    a.iter()
        .zip(&b)
        .map(|(&x, &y)| (f64::from(x) - f64::from(y)).powi(2))
        .sum::<f64>()
        .sqrt()
}

#[test]
fn thousand_palettes_are_separated() {
    for seed in 0..1000 {
        let s = gen_subject(seed);
        let c = s.palette.colors();
        for i in 0..3 {
            for j in 0..i {
                assert!(
                    rgb_dist(c[i], c[j]) >= MIN_PALETTE_SEPARATION,
                    "seed {seed}: {c:?}"
                );
            }
        }
        assert!(palette_is_valid(&s.palette));
    }
}

#[test]
fn sprites_never_touch_the_border() {
    for seed in 0..200 {
        let s = gen_subject(seed);
        for pose in Pose::ALL {
            let fg = render(&s, pose, Context::Plain, IMAGE_SIZE)
                .unwrap()
                .foreground();
            let n = IMAGE_SIZE as usize;
            for k in 0..n {
                assert!(
                    !fg[k] && !fg[(n - 1) * n + k] && !fg[k * n] && !fg[k * n + n - 1],
                    "seed {seed} {pose:?}"
                );
            }
        }
    }
}

#[test]
fn render_is_deterministic() {
    let s = gen_subject(5);
    let a = render(&s, Pose::Sit, Context::Patterned, IMAGE_SIZE).unwrap();
    let b = render(&s, Pose::Sit, Context::Patterned, IMAGE_SIZE).unwrap();
    assert_eq!(a.image, b.image);
    assert_eq!(a.masks, b.masks);
}

#[test]
fn poses_preserve_region_colours() {
    for seed in 0..20 {
        let s = gen_subject(seed);
        let means: Vec<_> = Pose::ALL
            .iter()
            .map(|&p| {
                let r = render(&s, p, Context::Gradient, IMAGE_SIZE).unwrap();
                let w = r.image.width() as usize;
                let px = (0..r.masks[0].len())
                    .filter(|&i| r.masks[0][i])
                    .map(|i| r.image.get_pixel((i % w) as u32, (i / w) as u32).0);
                mean_colors(px).unwrap()[0]
            })
            .collect();
        assert!(means.windows(2).all(|w| w[0] == w[1]), "seed {seed}");
    }
}

#[test]
fn context_changes_only_background() {
    let s = gen_subject(8);
    for pose in Pose::ALL {
        let base = render(&s, pose, Context::Plain, IMAGE_SIZE).unwrap();
        let fg = base.foreground();
        for ctx in [Context::Gradient, Context::Patterned] {
            let other = render(&s, pose, ctx, IMAGE_SIZE).unwrap();
            assert_eq!(other.masks, base.masks);
            let w = IMAGE_SIZE as usize;
            let mut background_changed = false;
            for (i, &f) in fg.iter().enumerate() {
                let (x, y) = ((i % w) as u32, (i / w) as u32);
                if f {
                    assert_eq!(other.image.get_pixel(x, y), base.image.get_pixel(x, y));
                } else {
                    background_changed |= other.image.get_pixel(x, y) != base.image.get_pixel(x, y);
                }
            }
            assert!(background_changed);
        }
    }
}

#[test]
fn single_region_sheet_is_a_render() {
    let s = gen_subject(2);
    let layout = RegionalLayout::grid(1, 1, IMAGE_SIZE, &[(Pose::Run, Context::Gradient)]).unwrap();
    assert_eq!(
        gen_sheet(&s, &layout).unwrap(),
        render(&s, Pose::Run, Context::Gradient, IMAGE_SIZE)
            .unwrap()
            .image
    );
}

#[test]
fn two_by_two_sheet_crops_are_renders() {
    let s = gen_subject(13);
    let prompts = [
        (Pose::Stand, Context::Plain),
        (Pose::Sit, Context::Gradient),
        (Pose::Run, Context::Patterned),
        (Pose::Wave, Context::Plain),
    ];
    let layout = RegionalLayout::grid(2, 2, IMAGE_SIZE, &prompts).unwrap();
    layout.validate().unwrap();
    let sheet = gen_sheet(&s, &layout).unwrap();
    let mut body = Vec::new();
    for r in &layout.regions {
        let crop = sheet.view(r.x, r.y, r.size, r.size).to_image();
        let single = render(&s, r.pose, r.context, r.size).unwrap();
        assert_eq!(crop, single.image);
        let w = r.size as usize;
        body.push(
            mean_colors(
                (0..w * w)
                    .filter(|&i| single.masks[0][i])
                    .map(|i| crop.get_pixel((i % w) as u32, (i / w) as u32).0),
            )
            .unwrap()[0],
        );
    }
    assert!(body.windows(2).all(|w| w[0] == w[1]));

    // Coverage: every canvas pixel in exactly one region mask.
    let masks: Vec<Vec<bool>> = (0..layout.regions.len()).map(|r| layout.mask(r)).collect();
    for i in 0..masks[0].len() {
        assert_eq!(masks.iter().filter(|m| m[i]).count(), 1);
    }
}

#[test]
fn overlapping_layout_rejected() {
    let s = gen_subject(1);
    let mut layout = RegionalLayout::grid(
        1,
        2,
        IMAGE_SIZE,
        &[(Pose::Stand, Context::Plain), (Pose::Run, Context::Plain)],
    )
    .unwrap();
    layout.regions[1].x -= 8;
    assert!(matches!(gen_sheet(&s, &layout), Err(Error::Layout(_))));
}

#[test]
fn segmentation_recovers_ground_truth_regions() {
    let seg = SegmentConfig::foreground();
    for seed in 0..40 {
        let s = gen_subject(seed);
        for (pose, ctx) in [
            (Pose::Stand, Context::Plain),
            (Pose::Wave, Context::Gradient),
            (Pose::Sit, Context::Patterned),
        ] {
            let r = render(&s, pose, ctx, IMAGE_SIZE).unwrap();
            let regions = segment(&r.image, &seg).unwrap();
            for (k, gt) in r.masks.iter().enumerate() {
                let gt_area = gt.iter().filter(|&&b| b).count();
                let best = regions
                    .iter()
                    .map(|reg| {
                        let inter = reg.pixels.iter().filter(|&&i| gt[i]).count();
                        inter as f64 / (gt_area + reg.area() - inter) as f64
                    })
                    .fold(0.0, f64::max);
                assert!(
                    best >= 0.9,
                    "seed {seed} {pose:?}/{ctx:?} region {k}: IoU {best}"
                );
            }
        }
    }
}

#[test]
fn vacuous_filter_keeps_everything() {
    let cfg = CorpusConfig {
        subjects: 6,
        pairs_per_subject: 4,
        seed: 3,
        filter: FilterConfig::vacuous(),
        adversarial_fraction: 0.5,
        ..CorpusConfig::default()
    };
    let c = build_corpus(&cfg, &Backends::stub(), 1).unwrap();
    assert_eq!(c.retained_count(), 24);
}

#[test]
fn palette_swapped_targets_are_rejected() {
    let cfg = CorpusConfig {
        subjects: 8,
        pairs_per_subject: 8,
        seed: 11,
        adversarial_fraction: 0.5,
        ..CorpusConfig::default()
    };
    let c = build_corpus(&cfg, &Backends::stub(), 1).unwrap();
    let swapped: Vec<_> = c
        .candidates
        .iter()
        .filter(|r| r.tags.iter().any(|t| t == "palette_swap"))
        .collect();
    assert!(swapped.len() > 10);
    for r in swapped {
        assert!(
            !r.retained && r.scores.color < 0.8,
            "{} kept with colour {}",
            r.pair_id,
            r.scores.color
        );
    }
}

#[test]
fn retained_pairs_score_one_on_ground_truth_regions() {
    let c = build_corpus(
        &CorpusConfig {
            subjects: 6,
            pairs_per_subject: 4,
            ..CorpusConfig::default()
        },
        &Backends::stub(),
        1,
    )
    .unwrap();
    let thr = ColorThresholds::default();
    let retained = c
        .candidates
        .iter()
        .zip(&c.images)
        .filter(|(r, _)| r.retained);
    for (item, (rec, (_, target))) in EvalItem::from_corpus(&c).iter().zip(retained) {
        assert_eq!(item.pair_id, rec.pair_id);
        assert_eq!(color_score_gt(item, target, &thr).unwrap().score, 1.0);
    }
}

#[test]
fn manifest_rescoring_is_bit_exact() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = CorpusConfig {
        subjects: 4,
        pairs_per_subject: 3,
        seed: 21,
        ..CorpusConfig::default()
    };
    let backends = Backends::stub();
    write_corpus(dir.path(), &build_corpus(&cfg, &backends, 1).unwrap()).unwrap();
    let records = load_manifest(dir.path()).unwrap();
    assert!(!records.is_empty());
    for r in &records {
        let again = rescore(dir.path(), r, &cfg.filter, &backends).unwrap();
        assert_eq!(again, r.scores);
        assert_eq!(again.composite.to_bits(), r.scores.composite.to_bits());
    }
}

#[test]
fn default_corpus_is_deterministic_and_fast() {
    let start = Instant::now();
    let a = build_corpus(&CorpusConfig::default(), &Backends::stub(), 1).unwrap();
    assert!(start.elapsed() < Duration::from_secs(60));
    assert_eq!(a.candidates.len(), 512);
    let b = build_corpus(&CorpusConfig::default(), &Backends::stub(), 3).unwrap();
    assert_eq!(a.candidates, b.candidates);
}

#[test]
fn rejecting_everything_is_an_explicit_error() {
    let cfg = CorpusConfig {
        subjects: 2,
        pairs_per_subject: 2,
        adversarial_fraction: 1.0,
        ..CorpusConfig::default()
    };
    assert!(matches!(
        build_corpus(&cfg, &Backends::stub(), 1),
        Err(Error::EmptyCorpus { .. })
    ));
}
