use std::collections::HashSet;

use proptest::prelude::*;
use psl_core::raster::Image;
use psl_core::rng::{child_rng, rng_from_seed};
use psl_core::tasks::augment::{gaussian_blur, sobel};
use psl_core::tasks::jigsaw::{assemble_puzzle, JigsawDraw};
use psl_core::tasks::rotation::{rotate_image, rotation_sample_with_angle};
use psl_core::tasks::*;

fn all_perms(n: usize) -> Vec<Vec<u8>> {
    if n == 0 {
        return vec![vec![]];
    }
    let mut out = Vec::new();
    for p in all_perms(n - 1) {
        for pos in 0..=p.len() {
            let mut q = p.clone();
            q.insert(pos, (n - 1) as u8);
            out.push(q);
        }
    }
    out
}

fn hamming(a: &[u8], b: &[u8]) -> usize {
    a.iter().zip(b).filter(|(x, y)| x != y).count()
}

fn brute_avg(members: &[Permutation]) -> f64 {
    let mut sum = 0usize;
    let mut pairs = 0usize;
    for i in 0..members.len() {
        for j in i + 1..members.len() {
            sum += hamming(members[i].as_slice(), members[j].as_slice());
            pairs += 1;
        }
    }
    sum as f64 / pairs as f64
}

#[test]
fn two_element_set_is_both_orders() {
    let set = generate_permutation_set(2, 2, 0, 1).unwrap();
    let got: HashSet<Vec<u8>> = set.members().iter().map(|p| p.as_slice().to_vec()).collect();
    assert_eq!(got, HashSet::from([vec![0, 1], vec![1, 0]]));
    assert_eq!(set.avg_hamming(), 2.0);
}

#[test]
fn four_element_set_checked_against_all_of_s4() {
    let set = generate_permutation_set(4, 4, 0, 2).unwrap();
    let universe: HashSet<Vec<u8>> = all_perms(4).into_iter().collect();
    assert_eq!(universe.len(), 24);
    for p in set.members() {
        assert!(universe.contains(p.as_slice()));
    }
    let mut min = usize::MAX;
    for (i, a) in set.members().iter().enumerate() {
        for b in &set.members()[i + 1..] {
            min = min.min(hamming(a.as_slice(), b.as_slice()));
        }
    }
    assert!(min >= 2);
    assert_eq!(set.min_hamming(), min);
    assert!((set.avg_hamming() - brute_avg(set.members())).abs() < 1e-12);
}

#[test]
fn nesting_over_s4_matches_pairwise_oracle() {
    let base = generate_permutation_set(4, 24, 5, 1).unwrap();
    let levels = nest_levels(&base, &[6, 12, 24]).unwrap();
    for w in levels.windows(2) {
        assert_eq!(&w[1].members()[..w[0].len()], w[0].members());
    }
    assert_eq!(levels[2].members(), base.members());
    for l in &levels {
        assert!((l.avg_hamming() - brute_avg(l.members())).abs() < 1e-12);
    }
}

#[test]
fn paper_cardinalities_hit_the_hamming_band() {
    let base = generate_permutation_set(9, 2000, 0, 3).unwrap();
    assert_eq!(base.len(), 2000);
    let levels = nest_levels(&base, &[500, 1000, 2000]).unwrap();
    for l in &levels {
        assert!((7.5..=8.5).contains(&l.avg_hamming()), "avg {}", l.avg_hamming());
        assert!(l.min_hamming() >= 3);
    }
    assert_eq!(nest_levels(&base, &[2000]).unwrap()[0], base);
    let csv = base.to_csv();
    assert!(csv.starts_with("# n=9 cardinality=2000 seed=0 avg_hamming="));
    assert_eq!(PermutationSet::from_csv(&csv).unwrap(), base);
}

#[test]
fn jigsaw_full_geometry_shapes() {
    let base = generate_permutation_set(9, 2000, 1, 3).unwrap();
    let level = &jigsaw_levels(&base, &[500, 1000, 2000]).unwrap()[2];
    assert_eq!(level.num_classes, Some(2000));
    let img = Image::filled(3, 256, 256, 0.3);
    let s = make_jigsaw_sample(&img, level, &JigsawGeometry::FULL, &mut rng_from_seed(2), SampleMeta::default()).unwrap();
    assert_eq!(s.input.shape(), [27, 64, 64]);
    assert!(s.label < 2000);
    let small = Image::filled(3, 200, 256, 0.3);
    assert!(make_jigsaw_sample(&small, level, &JigsawGeometry::FULL, &mut rng_from_seed(2), SampleMeta::default()).is_err());
}

#[test]
fn identity_permutation_keeps_raster_order() {
    let geometry = JigsawGeometry {
        normalize_tiles: false,
        ..JigsawGeometry::DESK
    };
    let data: Vec<f32> = (0..96 * 96).map(|i| i as f32).collect();
    let img = Image::from_vec(1, 96, 96, data).unwrap();
    let draw = JigsawDraw {
        window_top: 0,
        window_left: 0,
        tile_offsets: vec![(0, 0); 9],
        permutation_index: 0,
    };
    let out = assemble_puzzle(&img, &geometry, &draw, &Permutation::identity(9)).unwrap();
    for cell in 0..9 {
        let (r, c) = (cell / 3, cell % 3);
        assert_eq!(out.at(cell, 0, 0), img.at(0, r * 32, c * 32));
        assert_eq!(out.at(cell, 23, 23), img.at(0, r * 32 + 23, c * 32 + 23));
    }
}

#[test]
fn toy_grid_draws_reproduce() {
    let geometry = JigsawGeometry {
        window: 128,
        grid: 2,
        cell: 64,
        tile: 48,
        normalize_tiles: true,
    };
    let set = generate_permutation_set(4, 24, 0, 1).unwrap();
    let level = &jigsaw_levels(&set, &[24]).unwrap()[0];
    let img = Image::from_vec(3, 140, 150, (0..3 * 140 * 150).map(|i| (i % 97) as f32 / 97.0).collect()).unwrap();
    let a = JigsawDraw::sample(&img, &geometry, 24, &mut rng_from_seed(11)).unwrap();
    let b = JigsawDraw::sample(&img, &geometry, 24, &mut rng_from_seed(11)).unwrap();
    assert_eq!(a, b);
    let sa = make_jigsaw_sample(&img, level, &geometry, &mut rng_from_seed(11), SampleMeta::default()).unwrap();
    let sb = make_jigsaw_sample(&img, level, &geometry, &mut rng_from_seed(11), SampleMeta::default()).unwrap();
    assert_eq!(sa, sb);
    assert_eq!(sa.input.shape(), [12, 48, 48]);
}

#[test]
fn quarter_turns_compose() {
    let img = Image::from_vec(2, 5, 5, (0..50).map(|v| v as f32).collect()).unwrap();
    let level = &rotation_levels()[1];
    let s = rotation_sample_with_angle(&img, level, 90, SampleMeta::default()).unwrap();
    assert_eq!(s.label, 1);
    let twice = rotate_image(&rotate_image(&img, 90).unwrap(), 90).unwrap();
    assert_eq!(twice, rotate_image(&img, 180).unwrap());
}

#[test]
fn level_one_uses_zero_and_half_turn() {
    let level = &rotation_levels()[0];
    match &level.payload {
        LevelPayload::Rotation(r) => assert_eq!(r.angles(), &[0, 180]),
        _ => unreachable!(),
    }
    let img = Image::filled(3, 8, 8, 0.5);
    for seed in 0..20 {
        let s = make_rotation_sample(&img, level, &mut rng_from_seed(seed), SampleMeta::default()).unwrap();
        assert!(s.label < 2);
    }
}

#[test]
fn diagonal_rotation_of_constant_field_is_constant() {
    let img = Image::filled(3, 32, 32, 0.37);
    let out = rotate_image(&img, 45).unwrap();
    assert_eq!(out.shape(), [3, 32, 32]);
    assert!(out.data().iter().all(|v| (v - 0.37).abs() <= 1e-6));
}

#[test]
fn contrastive_level_one_only_crops() {
    let params = ContrastiveParams {
        size: 24,
        ..ContrastiveParams::default()
    };
    let levels = contrastive_levels(&params, 0.5).unwrap();
    match &levels[0].payload {
        LevelPayload::Contrastive(p) => {
            assert_eq!(p.ops.len(), 1);
            assert_eq!(p.ops[0].kind(), "crop-resize");
        }
        _ => unreachable!(),
    }
}

#[test]
fn noop_pipeline_returns_resized_source() {
    let pipeline = AugmentationPipeline {
        level: 1,
        size: 16,
        ops: vec![
            AugmentOp::CropResize {
                p: 1.0,
                scale: (1.0, 1.0),
                ratio: (1.0, 1.0),
            },
            AugmentOp::ColorDistortion {
                p: 0.0,
                strength: 1.0,
                grayscale_p: 0.0,
            },
            AugmentOp::GaussianBlur {
                p: 0.0,
                sigma: (0.1, 2.0),
                kernel_frac: 0.1,
            },
            AugmentOp::Sobel { p: 0.0 },
        ],
    };
    let img = Image::from_vec(3, 32, 32, (0..3072).map(|i| (i % 31) as f32 / 31.0).collect()).unwrap();
    let (a, b) = make_contrastive_pair(&img, &pipeline, &mut rng_from_seed(3)).unwrap();
    let expect = img.resize_bilinear(16, 16).unwrap();
    assert_eq!(a, expect);
    assert_eq!(b, expect);
    let empty = AugmentationPipeline {
        ops: vec![],
        ..pipeline
    };
    assert!(make_contrastive_pair(&img, &empty, &mut rng_from_seed(3)).is_err());
}

#[test]
fn level_three_views_are_reproducible() {
    let params = ContrastiveParams {
        size: 32,
        ..ContrastiveParams::default()
    };
    let levels = contrastive_levels(&params, 0.5).unwrap();
    let LevelPayload::Contrastive(p) = &levels[2].payload else { unreachable!() };
    let img = Image::from_vec(3, 40, 40, (0..4800).map(|i| ((i * 13) % 101) as f32 / 101.0).collect()).unwrap();
    let a = make_contrastive_pair(&img, p, &mut rng_from_seed(9)).unwrap();
    let b = make_contrastive_pair(&img, p, &mut rng_from_seed(9)).unwrap();
    let bytes = |i: &Image| i.data().iter().flat_map(|v| v.to_le_bytes()).collect::<Vec<u8>>();
    assert_eq!(bytes(&a.0), bytes(&b.0));
    assert_eq!(bytes(&a.1), bytes(&b.1));
}

#[test]
fn tiny_blur_is_identity() {
    let img = Image::from_vec(1, 6, 6, (0..36).map(|i| (i % 7) as f32 / 7.0).collect()).unwrap();
    let out = gaussian_blur(&img, 1e-3, 3).unwrap();
    for (a, b) in out.data().iter().zip(img.data()) {
        assert!((a - b).abs() <= 1e-6);
    }
    assert!(gaussian_blur(&img, 0.0, 3).is_err());
}

#[test]
fn sobel_of_constant_is_zero() {
    let out = sobel(&Image::filled(3, 7, 7, 0.8));
    assert!(out.data().iter().all(|&v| v == 0.0));
}

#[test]
fn sobel_step_edge_matches_hand_convolution() {
    // columns 0..=1 dark, 2..=4 bright
    let mut img = Image::zeros(1, 5, 5);
    for y in 0..5 {
        for x in 2..5 {
            img.set(0, y, x, 1.0);
        }
    }
    let gx = [[-1.0f32, 0.0, 1.0], [-2.0, 0.0, 2.0], [-1.0, 0.0, 1.0]];
    let at = |y: isize, x: isize| img.at(0, y.clamp(0, 4) as usize, x.clamp(0, 4) as usize);
    let mut mag = [[0.0f32; 5]; 5];
    let mut max = 0.0f32;
    for y in 0..5isize {
        for x in 0..5isize {
            let (mut sx, mut sy) = (0.0, 0.0);
            for ky in 0..3 {
                for kx in 0..3 {
                    let v = at(y + ky as isize - 1, x + kx as isize - 1);
                    sx += gx[ky][kx] * v;
                    sy += gx[kx][ky] * v;
                }
            }
            mag[y as usize][x as usize] = (sx * sx + sy * sy).sqrt();
            max = max.max(mag[y as usize][x as usize]);
        }
    }
    let out = sobel(&img);
    for y in 0..5 {
        for x in 0..5 {
            assert!((out.at(0, y, x) - mag[y][x] / max).abs() < 1e-6);
        }
        let row: Vec<f32> = (0..5).map(|x| out.at(0, y, x)).collect();
        assert_eq!(row[1], 1.0);
        assert_eq!(row[2], 1.0);
        assert_eq!(row[0], 0.0);
    }
}

/// Chi-square critical values at alpha = 0.01.
fn chi2_crit(df: usize) -> f64 {
    match df {
        1 => 6.635,
        3 => 11.345,
        7 => 18.475,
        _ => {
            // Wilson-Hilferty
            let k = df as f64;
            let z = 2.326;
            k * (1.0 - 2.0 / (9.0 * k) + z * (2.0 / (9.0 * k)).sqrt()).powi(3)
        }
    }
}

fn chi2(counts: &[usize]) -> f64 {
    let n: usize = counts.iter().sum();
    let e = n as f64 / counts.len() as f64;
    counts.iter().map(|&c| (c as f64 - e).powi(2) / e).sum()
}

#[test]
fn rotation_labels_are_uniform() {
    let img = Image::filled(3, 8, 8, 0.5);
    for level in rotation_levels() {
        let k = level.num_classes.unwrap();
        let mut counts = vec![0; k];
        for i in 0..(500 * k) as u64 {
            let s = make_rotation_sample(&img, &level, &mut child_rng(17, &[i]), SampleMeta::default()).unwrap();
            counts[s.label] += 1;
        }
        assert!(chi2(&counts) < chi2_crit(k - 1), "level {} counts {counts:?}", level.level);
    }
}

#[test]
fn jigsaw_labels_are_uniform() {
    let base = generate_permutation_set(9, 100, 2, 3).unwrap();
    let level = &jigsaw_levels(&base, &[100]).unwrap()[0];
    let img = Image::filled(3, 110, 110, 0.5);
    let mut counts = vec![0; 100];
    for i in 0..2000u64 {
        let s = make_jigsaw_sample(&img, level, &JigsawGeometry::DESK, &mut child_rng(3, &[i]), SampleMeta::default())
            .unwrap();
        counts[s.label] += 1;
    }
    assert!(chi2(&counts) < chi2_crit(99));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn generated_sets_are_distinct_bijections(n in 3usize..7, card in 2usize..20, seed in any::<u64>()) {
        let card = card.min((1..=n).product());
        let set = generate_permutation_set(n, card, seed, 1).unwrap();
        let distinct: HashSet<&[u8]> = set.members().iter().map(|p| p.as_slice()).collect();
        prop_assert_eq!(distinct.len(), card);
        for p in set.members() {
            let mut sorted = p.as_slice().to_vec();
            sorted.sort_unstable();
            prop_assert_eq!(sorted, (0..n as u8).collect::<Vec<_>>());
        }
        prop_assert!((set.avg_hamming() - brute_avg(set.members())).abs() < 1e-9);
        prop_assert_eq!(&generate_permutation_set(n, card, seed, 1).unwrap(), &set);
    }

    #[test]
    fn nested_prefixes_are_subsets(seed in any::<u64>(), a in 2usize..10, b in 10usize..30) {
        let base = generate_permutation_set(5, 30, seed, 1).unwrap();
        let levels = nest_levels(&base, &[a, b, 30]).unwrap();
        for w in levels.windows(2) {
            let upper: HashSet<&[u8]> = w[1].members().iter().map(|p| p.as_slice()).collect();
            prop_assert!(w[0].members().iter().all(|p| upper.contains(p.as_slice())));
        }
    }

    #[test]
    fn jigsaw_channel_contract(seed in any::<u64>(), channels in 1usize..4) {
        let base = generate_permutation_set(9, 10, 0, 3).unwrap();
        let level = &jigsaw_levels(&base, &[10]).unwrap()[0];
        let img = Image::filled(channels, 100, 104, 0.2);
        let s = make_jigsaw_sample(&img, level, &JigsawGeometry::DESK, &mut rng_from_seed(seed), SampleMeta::default()).unwrap();
        prop_assert_eq!(s.input.shape(), [9 * channels, 24, 24]);
        prop_assert!(s.label < 10);
    }

    #[test]
    fn augmentations_stay_in_unit_range(seed in any::<u64>(), level in 1u8..=3) {
        let params = ContrastiveParams { size: 16, ..ContrastiveParams::default() };
        let pipeline = AugmentationPipeline::standard(level, &params).unwrap();
        let img = Image::from_vec(3, 20, 20, (0..1200).map(|i| ((i as u64 * 7 + seed) % 255) as f32 / 255.0).collect()).unwrap();
        let mut r = rng_from_seed(seed);
        for op in &pipeline.ops {
            let out = apply_augmentation(op, &img, &mut r).unwrap();
            prop_assert!(out.data().iter().all(|v| (0.0..=1.0).contains(v)));
        }
        let (a, b) = make_contrastive_pair(&img, &pipeline, &mut r).unwrap();
        prop_assert_eq!(a.shape(), [3, 16, 16]);
        prop_assert_eq!(b.shape(), [3, 16, 16]);
    }

    #[test]
    fn rotation_labels_in_range(seed in any::<u64>(), level in 0usize..3) {
        let lv = &rotation_levels()[level];
        let img = Image::filled(3, 12, 12, 0.4);
        let s = make_rotation_sample(&img, lv, &mut rng_from_seed(seed), SampleMeta::default()).unwrap();
        prop_assert!(s.label < lv.num_classes.unwrap());
    }
}
