use std::collections::HashSet;
use std::fs;

use ctxreport_core::data::{
    generate_synthetic_dataset, load_image, load_manifest, save_manifest, split_dataset, LabelSet,
    Manifest, PhraseBank, SplitRatios, LABEL_NAMES,
};
use ctxreport_core::{Dataset, Error, Split, SyntheticConfig};
use proptest::prelude::*;

fn cfg(samples: usize, seed: u64) -> SyntheticConfig {
    SyntheticConfig {
        samples,
        seed,
        ..SyntheticConfig::default()
    }
}

fn ids(n: usize) -> Vec<String> {
    (0..n).map(|i| format!("id{i}")).collect()
}

#[test]
fn split_sizes_follow_floor_rule() {
    for (n, want) in [
        (100, (70, 10, 20)),
        (10, (7, 1, 2)),
        (3, (3, 0, 0)),
        (7, (6, 0, 1)),
    ] {
        // Test and val take floor(n * ratio), train takes what is left.
        let test = (n as f64 * 0.1).floor() as usize;
        let val = (n as f64 * 0.2).floor() as usize;
        assert_eq!((n - test - val, test, val), want);
        let s = split_dataset(&ids(n), SplitRatios::default(), 11).unwrap();
        assert_eq!((s.train.len(), s.test.len(), s.val.len()), want, "n = {n}");
    }
}

#[test]
fn split_is_seeded() {
    let a = split_dataset(&ids(50), SplitRatios::default(), 3).unwrap();
    assert_eq!(
        a,
        split_dataset(&ids(50), SplitRatios::default(), 3).unwrap()
    );
    assert_ne!(
        a,
        split_dataset(&ids(50), SplitRatios::default(), 4).unwrap()
    );
}

#[test]
fn split_rejects_bad_input() {
    assert!(matches!(
        split_dataset(&[], SplitRatios::default(), 0),
        Err(Error::InvalidParameter(_))
    ));
    let off = SplitRatios {
        train: 0.7,
        test: 0.1,
        val: 0.2 + 1e-6,
    };
    assert!(split_dataset(&ids(10), off, 0).is_err());
}

#[test]
fn generation_is_byte_identical() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let ma = generate_synthetic_dataset(&cfg(24, 5))
        .unwrap()
        .save(a.path())
        .unwrap();
    let mb = generate_synthetic_dataset(&cfg(24, 5))
        .unwrap()
        .save(b.path())
        .unwrap();
    assert_eq!(fs::read(&ma).unwrap(), fs::read(&mb).unwrap());
    for r in load_manifest(&ma).unwrap().records {
        assert_eq!(
            fs::read(a.path().join(&r.image)).unwrap(),
            fs::read(b.path().join(&r.image)).unwrap()
        );
    }
    let other = generate_synthetic_dataset(&cfg(24, 6)).unwrap();
    assert_ne!(other, generate_synthetic_dataset(&cfg(24, 5)).unwrap());
}

#[test]
fn positive_count_matches_header() {
    let d = generate_synthetic_dataset(&cfg(200, 9)).unwrap();
    let meta = d.manifest.meta.unwrap();
    let counted = d
        .records()
        .iter()
        .filter(|r| !r.labels.is_no_finding())
        .count();
    assert_eq!(meta.positives, counted);
    assert_eq!(meta.samples, 200);
    // Binomial(200, 0.5) stays within four standard deviations of 100.
    assert!(
        (counted as f64 - 100.0).abs() < 4.0 * 50f64.sqrt(),
        "{counted}"
    );
}

#[test]
fn labels_agree_with_phrases() {
    let bank = PhraseBank::default();
    let d = generate_synthetic_dataset(&cfg(120, 2)).unwrap();
    for r in d.records() {
        let mentioned: Vec<usize> = (0..4)
            .filter(|&q| {
                bank.findings[q]
                    .iter()
                    .any(|p| r.report.contains(p.as_str()))
            })
            .collect();
        let positive = !r.labels.is_no_finding();
        assert_eq!(positive, !mentioned.is_empty(), "{}", r.report);
        assert_eq!(positive, r.report.contains("Note"), "{}", r.report);
        let mut want = if positive {
            LabelSet::default()
        } else {
            LabelSet::no_finding()
        };
        for q in mentioned {
            want.0[bank.finding_labels[q]] = true;
        }
        assert_eq!(r.labels, want);
        if positive {
            assert!(!r.labels.names().any(|n| n == LABEL_NAMES[0]));
        }
    }
}

#[test]
fn manifest_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let mut d = generate_synthetic_dataset(&cfg(30, 1)).unwrap();
    d.manifest.records[0].report = "tab\there, newline\nand \\ slash".into();
    let path = d.save(dir.path()).unwrap();
    assert_eq!(load_manifest(&path).unwrap(), d.manifest);
    let back = Dataset::load(&path, 32).unwrap();
    assert_eq!(back.manifest, d.manifest);
    for (id, img) in &d.images {
        let got = back.image(id).unwrap();
        let err = img
            .data()
            .iter()
            .zip(got.data())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        // Grids are stored as f32.
        assert!(err < 1e-6, "{id}: {err}");
    }
}

#[test]
fn truncated_line_reports_its_number() {
    let dir = tempfile::tempdir().unwrap();
    let d = generate_synthetic_dataset(&cfg(5, 1)).unwrap();
    let path = dir.path().join("m.tsv");
    save_manifest(&d.manifest, &path).unwrap();
    let text = fs::read_to_string(&path).unwrap();
    let mut lines: Vec<String> = text.lines().map(str::to_string).collect();
    let target = lines.iter().position(|l| l.starts_with("s0002")).unwrap();
    let cut = lines[target].rfind('\t').unwrap();
    lines[target].truncate(cut);
    fs::write(&path, lines.join("\n")).unwrap();
    match load_manifest(&path) {
        Err(Error::Parse { line, .. }) => assert_eq!(line, target + 1),
        other => panic!("expected parse error, got {other:?}"),
    }
}

#[test]
fn duplicate_ids_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let d = generate_synthetic_dataset(&cfg(4, 1)).unwrap();
    let mut m: Manifest = d.manifest.clone();
    m.records[3].id = m.records[1].id.clone();
    let path = dir.path().join("m.tsv");
    assert!(matches!(
        save_manifest(&m, &path),
        Err(Error::Validation(_))
    ));

    save_manifest(&d.manifest, &path).unwrap();
    let text = fs::read_to_string(&path)
        .unwrap()
        .replace("s0003\t", "s0001\t");
    fs::write(&path, text).unwrap();
    assert!(matches!(load_manifest(&path), Err(Error::Validation(_))));
}

#[test]
fn missing_header_is_a_parse_error() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.tsv");
    fs::write(&path, "a\tb\tc\t00000000000000\ttrain\n").unwrap();
    assert!(matches!(
        load_manifest(&path),
        Err(Error::Parse { line: 1, .. })
    ));
}

#[test]
fn png_images_load_as_unit_grayscale() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("x.png");
    let img = image::GrayImage::from_fn(3, 2, |x, y| image::Luma([(x * 100 + y * 10) as u8]));
    img.save(&path).unwrap();
    let t = load_image(&path).unwrap();
    assert_eq!(t.shape(), &[1, 2, 3]);
    assert_eq!(t.data()[4], 110.0 / 255.0);
}

#[test]
fn invalid_configs_are_rejected() {
    for bad in [
        SyntheticConfig {
            prevalence: 1.0,
            ..SyntheticConfig::default()
        },
        SyntheticConfig {
            image_size: 6,
            ..SyntheticConfig::default()
        },
        SyntheticConfig {
            samples: 0,
            ..SyntheticConfig::default()
        },
    ] {
        assert!(generate_synthetic_dataset(&bad).is_err());
    }
}

/// Logistic regression on raw pixels, trained by full-batch gradient descent.
struct Logistic {
    w: Vec<f64>,
    b: f64,
}

impl Logistic {
    fn fit(x: &[Vec<f64>], y: &[f64], steps: usize, lr: f64) -> Self {
        let d = x[0].len();
        let mut m = Self {
            w: vec![0.0; d],
            b: 0.0,
        };
        for _ in 0..steps {
            let mut gw = vec![0.0; d];
            let mut gb = 0.0;
            for (xi, &yi) in x.iter().zip(y) {
                let r = m.prob(xi) - yi;
                for (g, v) in gw.iter_mut().zip(xi) {
                    *g += r * v;
                }
                gb += r;
            }
            let n = x.len() as f64;
            for (w, g) in m.w.iter_mut().zip(&gw) {
                *w -= lr * g / n;
            }
            m.b -= lr * gb / n;
        }
        m
    }

    fn prob(&self, x: &[f64]) -> f64 {
        let z: f64 = self.b + self.w.iter().zip(x).map(|(w, v)| w * v).sum::<f64>();
        1.0 / (1.0 + (-z).exp())
    }
}

#[test]
fn pixels_separate_polarity_linearly() {
    let d = generate_synthetic_dataset(&cfg(400, 13)).unwrap();
    let split = |s: Split| -> (Vec<Vec<f64>>, Vec<f64>) {
        d.records()
            .iter()
            .filter(|r| (r.split == Split::Train) == (s == Split::Train))
            .map(|r| {
                let px = d.image(&r.id).unwrap().data();
                let mean = px.iter().sum::<f64>() / px.len() as f64;
                // Per-image centering removes the global background level.
                let x = px.iter().map(|v| (v - mean) * 4.0).collect();
                (x, if r.labels.is_no_finding() { 0.0 } else { 1.0 })
            })
            .unzip()
    };
    let (xt, yt) = split(Split::Train);
    let (xe, ye) = split(Split::Test);
    let m = Logistic::fit(&xt, &yt, 400, 0.5);
    let acc = xe
        .iter()
        .zip(&ye)
        .filter(|(x, &y)| (m.prob(x) > 0.5) == (y > 0.5))
        .count() as f64
        / ye.len() as f64;
    assert!(acc > 0.95, "held-out accuracy {acc}");
}

proptest! {
    #[test]
    fn split_is_disjoint_and_exhaustive(n in 1usize..300, seed in any::<u64>()) {
        let all = ids(n);
        let s = split_dataset(&all, SplitRatios::default(), seed).unwrap();
        prop_assert_eq!(s.test.len(), (n as f64 * 0.1 + 1e-9).floor() as usize);
        prop_assert_eq!(s.val.len(), (n as f64 * 0.2 + 1e-9).floor() as usize);
        let mut seen = HashSet::new();
        for id in s.train.iter().chain(&s.val).chain(&s.test) {
            prop_assert!(seen.insert(id.clone()));
        }
        prop_assert_eq!(seen, all.into_iter().collect::<HashSet<_>>());
    }
}
