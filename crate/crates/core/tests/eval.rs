use mmaae_core::eval::*;
use mmaae_core::numerics::Rng;
use mmaae_core::Error;

/// Raw-moment Pearson, a different algebraic route from the centred one.
fn pearson_oracle(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let (sx, sy) = (x.iter().sum::<f64>(), y.iter().sum::<f64>());
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| a * b).sum();
    let sxx: f64 = x.iter().map(|a| a * a).sum();
    let syy: f64 = y.iter().map(|b| b * b).sum();
    (n * sxy - sx * sy) / ((n * sxx - sx * sx).sqrt() * (n * syy - sy * sy).sqrt())
}

/// Rank by counting: 1 + #smaller + (#equal - 1) / 2.
fn ranks_oracle(x: &[f64]) -> Vec<f64> {
    x.iter()
        .map(|a| {
            let less = x.iter().filter(|b| *b < a).count() as f64;
            let equal = x.iter().filter(|b| *b == a).count() as f64;
            1.0 + less + (equal - 1.0) / 2.0
        })
        .collect()
}

fn cosine_oracle(u: &[f64], v: &[f64]) -> f64 {
    let dot: f64 = u.iter().zip(v).map(|(a, b)| a * b).sum();
    let nu = u.iter().map(|a| a * a).sum::<f64>().sqrt();
    let nv = v.iter().map(|a| a * a).sum::<f64>().sqrt();
    dot / nu / nv
}

fn dataset(rng: &mut Rng, ties: bool) -> (Vec<f64>, Vec<f64>) {
    let n = 2 + rng.below(60);
    let q = |v: f64| if ties { (v * 4.0).round() / 4.0 } else { v };
    let x: Vec<f64> = (0..n).map(|_| q(rng.symmetric(1.0))).collect();
    let y: Vec<f64> = x.iter().map(|v| q(0.5 * v + rng.symmetric(1.0))).collect();
    (x, y)
}

#[test]
fn correlations_match_formula_oracles() {
    let mut rng = Rng::new(2024);
    let mut checked = 0;
    while checked < 100 {
        let (x, y) = dataset(&mut rng, checked % 2 == 1);
        let Ok(p) = pearson(&x, &y) else { continue };
        assert!((p - pearson_oracle(&x, &y)).abs() < 1e-10);
        let s = spearman(&x, &y).unwrap();
        assert!((s - pearson_oracle(&ranks_oracle(&x), &ranks_oracle(&y))).abs() < 1e-10);
        assert_eq!(average_ranks(&x), ranks_oracle(&x));
        let c = cosine_f64(&x, &y).unwrap();
        assert!((c - cosine_oracle(&x, &y)).abs() < 1e-10);
        checked += 1;
    }
}

#[test]
fn f32_cosine_agrees_with_wide_oracle() {
    let mut rng = Rng::new(3);
    for _ in 0..100 {
        let u: Vec<f32> = (0..16).map(|_| rng.symmetric(1.0) as f32).collect();
        let v: Vec<f32> = (0..16).map(|_| rng.symmetric(1.0) as f32).collect();
        let wide = |a: &[f32]| a.iter().map(|&x| x as f64).collect::<Vec<_>>();
        assert!((cosine(&u, &v).unwrap() - cosine_oracle(&wide(&u), &wide(&v))).abs() < 1e-10);
    }
}

#[test]
fn constant_input_is_undefined() {
    assert!(matches!(pearson(&[1.0, 1.0, 1.0], &[1.0, 2.0, 3.0]), Err(Error::UndefinedCorrelation(_))));
    assert!(matches!(spearman(&[1.0], &[2.0]), Err(Error::UndefinedCorrelation(_))));
    assert!(matches!(cosine(&[0.0, 0.0], &[1.0, 0.0]), Err(Error::DegenerateInput(_))));
}

fn fixed_encoder(s: &str) -> mmaae_core::Result<Vec<f32>> {
    let mut v = vec![0.1f32; 6];
    for (i, b) in s.bytes().enumerate() {
        v[(b as usize + i) % 6] += (b % 7) as f32;
    }
    Ok(v)
}

#[test]
fn similarity_self_consistency() {
    let sentences = ["a cat", "the dog barks", "birds fly south", "rain", "we sing", "old stone wall", "x y z"];
    let mut pairs = Vec::new();
    for i in 0..sentences.len() {
        for j in i + 1..sentences.len() {
            let (a, b) = (sentences[i], sentences[j]);
            let gold = cosine(&fixed_encoder(a).unwrap(), &fixed_encoder(b).unwrap()).unwrap();
            pairs.push((a.to_string(), b.to_string(), gold));
        }
    }
    let ds = SimilarityDataset { pairs };
    let c = similarity_eval(&ds, fixed_encoder).unwrap();
    assert!((c.pearson - 1.0).abs() < 1e-12 && (c.spearman - 1.0).abs() < 1e-12);
    assert_eq!(c, similarity_eval(&ds, fixed_encoder).unwrap());

    let two = SimilarityDataset { pairs: ds.pairs[..2].to_vec() };
    let c = similarity_eval(&two, fixed_encoder).unwrap();
    assert!(c.pearson.abs() <= 1.0 + 1e-12 && c.spearman.abs() <= 1.0 + 1e-12);
}

fn gaussian_features(n: usize, rng: &mut Rng) -> Vec<Vec<f32>> {
    (0..n).map(|_| (0..8).map(|_| rng.symmetric(1.0) as f32).collect()).collect()
}

#[test]
fn shuffled_labels_give_chance_accuracy() {
    let mut rng = Rng::new(17);
    let train_x = gaussian_features(200, &mut rng);
    let test_x = gaussian_features(200, &mut rng);
    let mut train_y: Vec<usize> = (0..200).map(|i| i % 2).collect();
    let mut test_y = train_y.clone();
    rng.shuffle(&mut train_y);
    rng.shuffle(&mut test_y);
    let probe = LogisticProbe::fit(&train_x, &train_y, 2, &ProbeConfig::default()).unwrap();
    let acc = probe.accuracy(&test_x, &test_y);
    assert!((0.38..=0.62).contains(&acc), "{acc}");
    let again = LogisticProbe::fit(&train_x, &train_y, 2, &ProbeConfig::default()).unwrap();
    assert_eq!(again.accuracy(&test_x, &test_y), acc);
}

#[test]
fn separable_classes_are_learned() {
    let mut rng = Rng::new(18);
    let make = |rng: &mut Rng| {
        let x = gaussian_features(120, rng);
        let y: Vec<usize> = x.iter().map(|f| usize::from(f[0] + f[3] > 0.0)).collect();
        (x, y)
    };
    let (tx, ty) = make(&mut rng);
    let (vx, vy) = make(&mut rng);
    let probe = LogisticProbe::fit(&tx, &ty, 2, &ProbeConfig { l2: 0.0, epochs: 2000, lr: 1.0 }).unwrap();
    assert!(probe.accuracy(&tx, &ty) == 1.0);
    assert!(probe.accuracy(&vx, &vy) >= 0.95);
}

#[test]
fn weaker_regularization_fits_training_data_at_least_as_well() {
    let mut rng = Rng::new(19);
    let x = gaussian_features(80, &mut rng);
    let y: Vec<usize> = x.iter().map(|f| usize::from(f[1] * f[2] > 0.0) + usize::from(f[0] > 0.5)).collect();
    let free = LogisticProbe::fit(&x, &y, 3, &ProbeConfig { l2: 0.0, epochs: 1000, lr: 0.5 }).unwrap();
    let tight = LogisticProbe::fit(&x, &y, 3, &ProbeConfig { l2: 10.0, epochs: 1000, lr: 0.5 }).unwrap();
    assert!(free.accuracy(&x, &y) >= tight.accuracy(&x, &y));
}

#[test]
fn nearest_neighbors_match_exhaustive_sort() {
    let mut rng = Rng::new(21);
    let mut corpus: Vec<Vec<f32>> = (0..100).map(|_| (0..5).map(|_| rng.symmetric(1.0) as f32).collect()).collect();
    corpus[40] = corpus[7].clone();
    let query = corpus[7].clone();
    let got = nearest_neighbors(&query, &corpus, 100).unwrap();

    let mut oracle: Vec<(usize, f64)> = corpus
        .iter()
        .enumerate()
        .map(|(i, c)| {
            let w = |a: &[f32]| a.iter().map(|&x| x as f64).collect::<Vec<_>>();
            (i, cosine_oracle(&w(&query), &w(c)))
        })
        .collect();
    // Insertion sort: descending score, ascending index on ties.
    for i in 1..oracle.len() {
        let mut j = i;
        while j > 0 && (oracle[j].1 > oracle[j - 1].1 || (oracle[j].1 == oracle[j - 1].1 && oracle[j].0 < oracle[j - 1].0)) {
            oracle.swap(j, j - 1);
            j -= 1;
        }
    }
    assert_eq!(got[0].0, 7);
    assert_eq!(got[1].0, 40);
    assert!((got[0].1 - 1.0).abs() < 1e-6);
    let got_idx: Vec<usize> = got.iter().map(|p| p.0).collect();
    let want_idx: Vec<usize> = oracle.iter().map(|p| p.0).collect();
    assert_eq!(got_idx, want_idx);
    assert_eq!(nearest_neighbors(&query, &corpus, 3).unwrap(), got[..3].to_vec());
}

#[test]
fn dataset_files_round_trip_and_report_lines() {
    let dir = tempfile::tempdir().unwrap();
    let sim = dir.path().join("sim.tsv");
    std::fs::write(&sim, "a cat\ta dog\t3.5\n\nthe sun\tthe moon\t1\n").unwrap();
    let ds = read_similarity(&sim).unwrap();
    assert_eq!(ds.pairs.len(), 2);
    assert_eq!(ds.pairs[1].2, 1.0);
    std::fs::write(&sim, "a\tb\t1\nbroken line\n").unwrap();
    assert!(matches!(read_similarity(&sim), Err(Error::Format { line: 2, .. })));

    let probe = dir.path().join("probe.tsv");
    std::fs::write(&probe, "0\tgood film\n1\tbad film\n2\tok film\n").unwrap();
    let ds = read_probe(&probe).unwrap();
    assert_eq!(ds.n_classes, 3);
    assert_eq!(ds.labels(), vec![0, 1, 2]);
}
