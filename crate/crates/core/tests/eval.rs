use std::collections::BTreeMap;

use proptest::prelude::*;
use psl_core::data::synthetic_shapes;
use psl_core::eval::*;
use psl_core::model::{build_backbone, BackboneConfig};
use psl_core::partition::make_stages;
use psl_core::rng::rng_from_seed;
use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};

fn blobs(n: usize, dim: usize, classes: usize, spread: f32, seed: u64) -> FeatureTable {
    let mut r = rng_from_seed(seed);
    let centers: Vec<Vec<f32>> = (0..classes)
        .map(|_| (0..dim).map(|_| StandardNormal.sample(&mut r)).collect())
        .collect();
    let mut features = Vec::with_capacity(n * dim);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let c = i % classes;
        for &m in &centers[c] {
            let noise: f32 = StandardNormal.sample(&mut r);
            features.push(m + spread * noise);
        }
        labels.push(c);
    }
    FeatureTable {
        block: "B1".into(),
        dim,
        features,
        labels,
    }
}

#[test]
fn pooled_feature_is_mean_of_map() {
    let cfg = BackboneConfig::with_widths(&[4, 6, 8]);
    let (mut net, specs) = build_backbone(&cfg).unwrap();
    let p = make_stages(&specs, 2).unwrap();
    let d = synthetic_shapes("s", 5, 32, 2);
    let table = extract_block_features(&mut net, &p, "B2", &d).unwrap();
    assert_eq!(table.dim, 6);
    let x = batch_tensor(&d, &[3], &cfg).unwrap();
    let map = net.features(&x, 1).unwrap();
    let (_, c, h, w) = map.dims4().unwrap();
    for ch in 0..c {
        let plane = &map.data()[ch * h * w..(ch + 1) * h * w];
        let mean = plane.iter().map(|&v| f64::from(v)).sum::<f64>() / (h * w) as f64;
        assert!((f64::from(table.row(3)[ch]) - mean).abs() < 1e-5);
    }
    assert_eq!(table, extract_block_features(&mut net, &p, "B2", &d).unwrap());
    assert!(extract_block_features(&mut net, &p, "B9", &d).is_err());
}

#[test]
fn last_block_width_matches_default_backbone() {
    let (mut net, specs) = build_backbone(&BackboneConfig::default()).unwrap();
    let p = make_stages(&specs, 3).unwrap();
    let t = extract_block_features(&mut net, &p, "B5", &synthetic_shapes("s", 2, 32, 0)).unwrap();
    assert_eq!(t.dim, 256);
}

#[test]
fn separable_blobs_are_learned() {
    let train = blobs(200, 8, 2, 0.1, 1);
    let test = blobs(200, 8, 2, 0.1, 1);
    let r = linear_probe(&train, &test, &ProbeSchedule::default()).unwrap();
    assert!(r.test_accuracy >= 0.99, "{}", r.test_accuracy);
}

#[test]
fn shuffled_labels_sit_at_chance() {
    let k = 5;
    let mut train = blobs(500, 16, k, 1.0, 3);
    let mut test = blobs(1000, 16, k, 1.0, 4);
    let mut r = rng_from_seed(8);
    train.labels.shuffle(&mut r);
    test.labels.shuffle(&mut r);
    let res = linear_probe(&train, &test, &ProbeSchedule::default()).unwrap();
    let p = 1.0 / k as f64;
    let sigma = (p * (1.0 - p) / test.len() as f64).sqrt();
    assert!((res.test_accuracy - p).abs() <= 3.0 * sigma, "{}", res.test_accuracy);
}

#[test]
fn single_class_is_rejected() {
    let mut t = blobs(20, 4, 2, 0.1, 0);
    t.labels.iter_mut().for_each(|l| *l = 0);
    assert!(linear_probe(&t, &t.clone(), &ProbeSchedule::default()).is_err());
}

/// Full-batch Newton-free reference: gradient descent with Nesterov
/// momentum on the strongly convex regularized objective, run to a tiny
/// gradient norm.
fn reference_fit(x: &[f64], labels: &[usize], d: usize, k: usize, l2: f64) -> (Vec<f64>, Vec<f64>) {
    let n = labels.len();
    let mut w = vec![0.0; k * d];
    let mut b = vec![0.0; k];
    let (mut yw, mut yb) = (w.clone(), b.clone());
    let lr = 0.5;
    for t in 0..20_000 {
        let mut gw = vec![0.0; k * d];
        let mut gb = vec![0.0; k];
        for i in 0..n {
            let xi = &x[i * d..(i + 1) * d];
            let z: Vec<f64> = (0..k).map(|c| yb[c] + (0..d).map(|j| yw[c * d + j] * xi[j]).sum::<f64>()).collect();
            let m = z.iter().cloned().fold(f64::MIN, f64::max);
            let e: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
            let s: f64 = e.iter().sum();
            for c in 0..k {
                let g = (e[c] / s - f64::from(u8::from(c == labels[i]))) / n as f64;
                gb[c] += g;
                for j in 0..d {
                    gw[c * d + j] += g * xi[j];
                }
            }
        }
        let mut norm = 0.0;
        for (g, v) in gw.iter_mut().zip(&yw) {
            *g += l2 * v;
            norm += *g * *g;
        }
        norm += gb.iter().map(|g| g * g).sum::<f64>();
        let nw: Vec<f64> = yw.iter().zip(&gw).map(|(v, g)| v - lr * g).collect();
        let nb: Vec<f64> = yb.iter().zip(&gb).map(|(v, g)| v - lr * g).collect();
        let beta = t as f64 / (t as f64 + 3.0);
        yw = nw.iter().zip(&w).map(|(a, o)| a + beta * (a - o)).collect();
        yb = nb.iter().zip(&b).map(|(a, o)| a + beta * (a - o)).collect();
        w = nw;
        b = nb;
        if norm.sqrt() < 1e-9 {
            break;
        }
    }
    (w, b)
}

#[test]
fn probe_reaches_the_convex_optimum() {
    let (n, d, k) = (200, 16, 10);
    let table = blobs(n, d, k, 1.2, 17);
    let schedule = ProbeSchedule::default();
    let model = fit_linear(&table, k, &schedule).unwrap();
    let (probe_correct, _) = model.accuracy(&table);

    // same standardization the probe applies
    let mut x = vec![0.0; n * d];
    for j in 0..d {
        let col: Vec<f64> = (0..n).map(|i| f64::from(table.row(i)[j])).collect();
        let mean = col.iter().sum::<f64>() / n as f64;
        let sd = (col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64).sqrt();
        for i in 0..n {
            x[i * d + j] = (col[i] - mean) / sd;
        }
    }
    let (w, b) = reference_fit(&x, &table.labels, d, k, schedule.weight_decay);
    let oracle_correct = (0..n)
        .filter(|&i| {
            let xi = &x[i * d..(i + 1) * d];
            let z: Vec<f64> = (0..k).map(|c| b[c] + (0..d).map(|j| w[c * d + j] * xi[j]).sum::<f64>()).collect();
            let best = (0..k).max_by(|&a, &c| z[a].total_cmp(&z[c])).unwrap();
            best == table.labels[i]
        })
        .count();
    let gap = (probe_correct as f64 - oracle_correct as f64).abs() / n as f64;
    assert!(gap <= 0.02, "probe {probe_correct} vs optimum {oracle_correct}");
}

#[test]
fn one_percent_of_cifar_sized_classes() {
    let labels: Vec<usize> = (0..50_000).map(|i| i % 10).collect();
    let (spec, idx) = class_balanced_subset(&labels, 0.01, 5).unwrap();
    assert_eq!(spec.per_class_counts, vec![50; 10]);
    let mut counts = [0usize; 10];
    for &i in &idx {
        counts[labels[i]] += 1;
    }
    assert_eq!(counts, [50; 10]);
    assert_eq!(idx.len(), 500);
    let (_, again) = class_balanced_subset(&labels, 0.01, 5).unwrap();
    assert_eq!(idx, again);
    let (_, all) = class_balanced_subset(&labels, 1.0, 5).unwrap();
    assert_eq!(all, (0..50_000).collect::<Vec<_>>());
    assert!(class_balanced_subset(&labels[..500], 0.01, 5).is_err());
}

#[test]
fn null_finetune_stays_at_chance() {
    let cfg = BackboneConfig::with_widths(&[4, 6, 8]);
    let (net, _) = build_backbone(&cfg).unwrap();
    let train = synthetic_shapes("train", 60, 32, 1);
    let test = synthetic_shapes("test", 120, 32, 2);
    let schedule = FinetuneSchedule {
        epochs: 1,
        batch_size: 20,
        lr: 0.0,
        ..FinetuneSchedule::default()
    };
    let r = semi_supervised_finetune(&net, &train, &test, &schedule).unwrap();
    let p = 1.0 / test.num_classes() as f64;
    let sigma = (p * (1.0 - p) / test.len() as f64).sqrt();
    assert!(r.top1 <= p + 3.0 * sigma, "{}", r.top1);
    assert!(r.top5 >= r.top1);
}

#[test]
fn report_json_round_trip_and_validation() {
    let (_, specs) = build_backbone(&BackboneConfig::default()).unwrap();
    let p = make_stages(&specs, 3).unwrap();
    let acc: BTreeMap<String, f64> = (1..=5).map(|i| (format!("B{i}"), 0.1 * i as f64)).collect();
    let report = ProbeReport {
        protocol: Protocol::FrozenLinear,
        dataset_id: "cifar10".into(),
        checkpoint_id: "final".into(),
        config_hash: "abc".into(),
        block_accuracies: acc.clone(),
        baseline_accuracies: acc,
        train_samples: 10,
        test_samples: 10,
        finetune: Vec::new(),
    };
    let back = ProbeReport::from_json(&report.to_json()).unwrap();
    assert_eq!(back, report);
    back.validate(&p).unwrap();
    assert_eq!(back.best_block().unwrap().0, "B5");
    let table = back.render_table();
    assert!(table.contains("B1") && table.contains("B5"));
    let bad = report.to_json().replace("0.5", "1.5");
    assert!(ProbeReport::from_json(&bad).is_err());
    let mut stray = report.clone();
    stray.block_accuracies.insert("B7".into(), 0.3);
    assert!(stray.validate(&p).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn subsets_stay_balanced(sizes in prop::collection::vec(10usize..80, 2..6), fraction in 0.1f64..1.0, seed in any::<u64>()) {
        let labels: Vec<usize> = sizes.iter().enumerate().flat_map(|(c, &n)| std::iter::repeat_n(c, n)).collect();
        let (spec, idx) = class_balanced_subset(&labels, fraction, seed).unwrap();
        for (c, &n) in sizes.iter().enumerate() {
            let exact = fraction * n as f64;
            let got = spec.per_class_counts[c];
            prop_assert!(got as f64 >= exact.floor() - 1e-9 && got as f64 <= exact.ceil() + 1e-9);
            prop_assert_eq!(idx.iter().filter(|&&i| labels[i] == c).count(), got);
        }
        let target = (fraction * labels.len() as f64).round() as i64;
        prop_assert!((idx.len() as i64 - target).abs() <= 1);
        let (_, again) = class_balanced_subset(&labels, fraction, seed).unwrap();
        prop_assert_eq!(idx, again);
    }

    #[test]
    fn feature_tables_round_trip(rows in 1usize..20, dim in 1usize..8, seed in any::<u64>()) {
        let mut r = rng_from_seed(seed);
        let t = FeatureTable {
            block: format!("B{}", seed % 5 + 1),
            dim,
            features: (0..rows * dim).map(|_| r.gen_range(-10.0..10.0)).collect(),
            labels: (0..rows).map(|_| r.gen_range(0..10)).collect(),
        };
        let bytes = t.to_bytes();
        prop_assert_eq!(FeatureTable::from_bytes(&bytes).unwrap(), t);
        prop_assert!(FeatureTable::from_bytes(&bytes[..bytes.len() - 1]).is_err());
    }
}

