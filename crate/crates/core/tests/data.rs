use std::path::PathBuf;

use cqnet::data::*;
use cqnet::Error;

fn idx_bytes(magic: u32, dims: &[u32], payload: &[u8]) -> Vec<u8> {
    let mut b = magic.to_be_bytes().to_vec();
    for d in dims {
        b.extend_from_slice(&d.to_be_bytes());
    }
    b.extend_from_slice(payload);
    b
}

fn write_pair(dir: &tempfile::TempDir, img: &[u8], lab: &[u8]) -> (PathBuf, PathBuf) {
    let (i, l) = (dir.path().join("img.idx"), dir.path().join("lab.idx"));
    std::fs::write(&i, img).unwrap();
    std::fs::write(&l, lab).unwrap();
    (i, l)
}

#[test]
fn hand_built_idx_pair_parses() {
    let dir = tempfile::tempdir().unwrap();
    let img = idx_bytes(0x803, &[2, 2, 2], &[0, 255, 51, 102, 255, 0, 0, 255]);
    let lab = idx_bytes(0x801, &[2], &[3, 1]);
    let (i, l) = write_pair(&dir, &img, &lab);
    let ds = read_idx(&i, &l).unwrap();
    assert_eq!((ds.len(), ds.feature_dim), (2, 4));
    assert_eq!(ds.samples[0].features, vec![0.0, 1.0, 0.2, 0.4]);
    assert_eq!(ds.samples[1].features, vec![1.0, 0.0, 0.0, 1.0]);
    assert_eq!((ds.samples[0].label, ds.samples[1].label), (3, 1));
    assert_eq!(ds.n_classes, 4);
}

#[test]
fn malformed_idx_files_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let img = idx_bytes(0x803, &[2, 2, 2], &[0; 8]);
    let lab = idx_bytes(0x801, &[2], &[0, 1]);
    let cases = [
        // count mismatch
        (img.clone(), idx_bytes(0x801, &[3], &[0, 1, 2])),
        // wrong magic
        (idx_bytes(0x801, &[2, 2, 2], &[0; 8]), lab.clone()),
        // truncated payload
        (img[..img.len() - 1].to_vec(), lab.clone()),
        // truncated header
        (img[..6].to_vec(), lab.clone()),
        // dimensions whose product overflows
        (idx_bytes(0x803, &[u32::MAX, u32::MAX, u32::MAX], &[]), lab.clone()),
    ];
    for (k, (im, lb)) in cases.into_iter().enumerate() {
        let (i, l) = write_pair(&dir, &im, &lb);
        assert!(matches!(read_idx(&i, &l), Err(Error::Idx { .. })), "case {k}");
    }
    let missing = dir.path().join("missing");
    assert!(read_idx(&missing, &missing).is_err());
}

#[test]
fn idx_round_trip_plain_and_gzipped() {
    let dir = tempfile::tempdir().unwrap();
    let samples = (0..7)
        .map(|i| Sample {
            features: (0..6).map(|j| ((i * 37 + j * 11) % 256) as f64 / 255.0).collect(),
            label: i % 3,
        })
        .collect();
    let ds = Dataset::new(samples, 6, 3, Provenance::Csv).unwrap();
    for ext in ["idx", "idx.gz"] {
        let (i, l) = (dir.path().join(format!("i.{ext}")), dir.path().join(format!("l.{ext}")));
        write_idx(&ds, 2, 3, &i, &l).unwrap();
        let back = read_idx(&i, &l).unwrap();
        assert_eq!(back.samples, ds.samples);
    }
    assert!(write_idx(&ds, 2, 2, &dir.path().join("x"), &dir.path().join("y")).is_err());
}

#[test]
fn shipped_fashion_subset_is_readable() {
    let root = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../data/fashion-mnist");
    let ds = read_idx(
        &root.join("test-pool-images-idx3-ubyte.gz"),
        &root.join("test-pool-labels-idx1-ubyte.gz"),
    )
    .unwrap();
    assert_eq!((ds.len(), ds.feature_dim, ds.n_classes), (1000, 784, 10));
    assert!(ds
        .samples
        .iter()
        .flat_map(|s| &s.features)
        .all(|&v| (0.0..=1.0).contains(&v)));
    assert!(ds.class_counts().iter().all(|&c| c >= 50));
}

/// P(0 ≤ Z < 1) for standard normal Z by composite Simpson on the density.
fn std_normal_mass_0_to_1() -> f64 {
    let n = 10_000;
    let f = |x: f64| (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt();
    let h = 1.0 / n as f64;
    let mut s = f(0.0) + f(1.0);
    for i in 1..n {
        s += f(i as f64 * h) * if i % 2 == 1 { 4.0 } else { 2.0 };
    }
    s * h / 3.0
}

fn within_3_sigma(count: usize, n: usize, p: f64) -> bool {
    let mean = n as f64 * p;
    let sd = (n as f64 * p * (1.0 - p)).sqrt();
    (count as f64 - mean).abs() <= 3.0 * sd
}

#[test]
fn generators_are_seeded_embedded_and_balanced_as_expected() {
    let p1 = std_normal_mass_0_to_1();
    assert!((p1 - 0.341_344_746).abs() < 1e-8);
    for seed in 0..5 {
        for n in [200, 5000] {
            let a = gen_1d_embedded(n, seed).unwrap();
            assert_eq!(a, gen_1d_embedded(n, seed).unwrap());
            assert!(a.samples.iter().all(|s| s.features[1] == 0.0));
            assert!(
                within_3_sigma(a.class_counts()[1], n, p1),
                "1-D seed {seed}: {:?}",
                a.class_counts()
            );

            let b = gen_2d_embedded(n, seed).unwrap();
            assert_eq!(b, gen_2d_embedded(n, seed).unwrap());
            assert!(b.samples.iter().all(|s| s.features[2] == 0.0));
            // The wedge v2 > |v1| covers a quarter of the rotation-invariant plane.
            assert!(
                within_3_sigma(b.class_counts()[1], n, 0.25),
                "2-D seed {seed}: {:?}",
                b.class_counts()
            );
        }
    }
    assert_ne!(gen_1d_embedded(50, 1).unwrap(), gen_1d_embedded(50, 2).unwrap());
    assert!(gen_1d_embedded(1, 0).is_err());
}

#[test]
fn stratified_parts_are_disjoint_and_exact() {
    let ds = gen_2d_embedded(400, 3).unwrap();
    let (a, b) = stratified_split(&ds, 20, 30, 9).unwrap();
    assert_eq!(a.class_counts(), vec![20, 20]);
    assert_eq!(b.class_counts(), vec![30, 30]);
    // Samples are continuous draws, so features identify them.
    for s in &a.samples {
        assert!(!b.samples.contains(s));
    }
    assert_eq!((a.clone(), b.clone()), stratified_split(&ds, 20, 30, 9).unwrap());

    let sub = subsample(&ds, 25, 1).unwrap();
    assert_eq!(sub.class_counts(), vec![25, 25]);
    let minority = ds.class_counts()[1];
    assert!(matches!(
        subsample(&ds, minority + 1, 1),
        Err(Error::InsufficientSamples { class: 1, .. })
    ));

    let (tr, va) = split_fraction(&ds, 0.8, 5).unwrap();
    assert_eq!((tr.len(), va.len()), (320, 80));
    assert!(split_fraction(&ds, 1.5, 5).is_err());
}

#[test]
fn standardizer_uses_training_statistics() {
    // Feature 0 takes values 1, 3 (mean 2, std 1); feature 1 is constant 5.
    let train = Dataset::new(
        vec![
            Sample {
                features: vec![1.0, 5.0],
                label: 0,
            },
            Sample {
                features: vec![3.0, 5.0],
                label: 1,
            },
        ],
        2,
        2,
        Provenance::Csv,
    )
    .unwrap();
    let st = Standardizer::fit(&train, 0.5).unwrap();
    assert_eq!(st.mean, vec![2.0, 5.0]);
    let out = st.apply(&train).unwrap();
    assert_eq!(out.samples[0].features, vec![-1.0 / 1.5, 0.0]);
    assert_eq!(out.samples[1].features, vec![1.0 / 1.5, 0.0]);
    assert_eq!(out.samples[1].label, 1);

    let other = Dataset::new(
        vec![Sample {
            features: vec![2.0, 7.0],
            label: 0,
        }],
        2,
        2,
        Provenance::Csv,
    )
    .unwrap();
    assert_eq!(st.apply(&other).unwrap().samples[0].features, vec![0.0, 2.0 / 0.5]);

    assert!(Standardizer::fit(&train, 0.0).is_err());
    let wrong = Dataset::new(
        vec![Sample {
            features: vec![1.0],
            label: 0,
        }],
        1,
        2,
        Provenance::Csv,
    )
    .unwrap();
    assert!(matches!(st.apply(&wrong), Err(Error::DimensionMismatch { .. })));
}
