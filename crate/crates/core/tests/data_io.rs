use std::collections::HashSet;
use std::io::Write;
use std::path::PathBuf;

use flate2::write::GzEncoder;
use ndarray::Array2;
use proptest::prelude::*;
use serlu::data::{batches, load_idx, load_mnist, norm_stats, write_idx, Dataset, Split, Splits, DATA_DIR_ENV, IMAGE_MAGIC};
use serlu::Error;

fn mnist_dir() -> PathBuf {
    std::env::var_os(DATA_DIR_ENV)
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../data/mnist"))
}

fn byte_dataset(pixels: &[u8], n: usize, labels: Vec<u8>) -> Dataset {
    let img = Array2::from_shape_vec((n, 4), pixels.iter().map(|&b| b as f64 / 255.0).collect()).unwrap();
    Dataset::new(img, labels, 2, 2).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn idx_round_trip(n in 0usize..20, seed in any::<u64>(), gz in any::<bool>()) {
        let pixels: Vec<u8> = (0..n * 4).map(|i| (seed.wrapping_mul(31).wrapping_add(i as u64 * 97) % 256) as u8).collect();
        let labels: Vec<u8> = (0..n).map(|i| ((seed as usize + i) % 10) as u8).collect();
        let ds = byte_dataset(&pixels, n, labels);
        let dir = tempfile::tempdir().unwrap();
        let (ip, lp) = (dir.path().join("img"), dir.path().join("lab"));
        write_idx(&ds, &ip, &lp).unwrap();
        if gz {
            for p in [&ip, &lp] {
                let raw = std::fs::read(p).unwrap();
                let mut enc = GzEncoder::new(Vec::new(), flate2::Compression::fast());
                enc.write_all(&raw).unwrap();
                std::fs::write(p, enc.finish().unwrap()).unwrap();
            }
        }
        let back = load_idx(&ip, &lp).unwrap();
        prop_assert_eq!(&back.images, &ds.images);
        prop_assert_eq!(&back.labels, &ds.labels);
        prop_assert_eq!((back.rows, back.cols), (2, 2));
    }

    #[test]
    fn batches_cover_every_index_once(len in 0usize..500, bs in 1usize..64, seed in any::<u64>(), epoch in 0u64..5) {
        let b = batches(len, bs, seed, epoch).unwrap();
        let mut all: Vec<usize> = b.iter().flatten().copied().collect();
        prop_assert!(b.iter().rev().skip(1).all(|x| x.len() == bs));
        all.sort_unstable();
        prop_assert_eq!(all, (0..len).collect::<Vec<_>>());
        prop_assert_eq!(b, batches(len, bs, seed, epoch).unwrap());
    }
}

#[test]
fn large_batch_keeps_everything() {
    let b = batches(7, 100, 1, 0).unwrap();
    assert_eq!(b.len(), 1);
    let set: HashSet<usize> = b[0].iter().copied().collect();
    assert_eq!(set, (0..7).collect());
    assert!(matches!(batches(7, 0, 1, 0), Err(Error::Config(_))));
    assert_ne!(batches(100, 10, 1, 0).unwrap(), batches(100, 10, 1, 1).unwrap());
}

#[test]
fn wrong_magic_reports_offset_zero() {
    let dir = tempfile::tempdir().unwrap();
    let ds = byte_dataset(&[1, 2, 3, 4], 1, vec![3]);
    let (ip, lp) = (dir.path().join("img"), dir.path().join("lab"));
    write_idx(&ds, &ip, &lp).unwrap();
    match load_idx(&ip, &ip) {
        Err(Error::Parse { offset, message, .. }) => {
            assert_eq!(offset, 0);
            assert!(message.contains("magic"), "{message}");
        }
        other => panic!("expected parse error, got {other:?}"),
    }
    let mut bytes = std::fs::read(&ip).unwrap();
    assert_eq!(u32::from_be_bytes(bytes[..4].try_into().unwrap()), IMAGE_MAGIC);
    bytes.truncate(18);
    std::fs::write(&ip, &bytes).unwrap();
    match load_idx(&ip, &lp) {
        Err(Error::Parse { offset, .. }) => assert_eq!(offset, 18),
        other => panic!("expected parse error, got {other:?}"),
    }
}

#[test]
fn count_mismatch_is_a_parse_error() {
    let dir = tempfile::tempdir().unwrap();
    let two = byte_dataset(&[1, 2, 3, 4, 5, 6, 7, 8], 2, vec![1, 2]);
    let one = byte_dataset(&[1, 2, 3, 4], 1, vec![1]);
    let (ip, lp, ip1, lp1) = (dir.path().join("a"), dir.path().join("b"), dir.path().join("c"), dir.path().join("d"));
    write_idx(&two, &ip, &lp).unwrap();
    write_idx(&one, &ip1, &lp1).unwrap();
    assert!(matches!(load_idx(&ip, &lp1), Err(Error::Parse { offset: 4, .. })));
}

#[test]
fn normalization_uses_training_statistics() {
    let img = |v: f64, n: usize| Array2::from_shape_fn((n, 4), |(i, j)| v + (i * 4 + j) as f64 * 0.01);
    let full = Dataset::new(img(0.2, 30), vec![1; 30], 2, 2).unwrap();
    let test = Dataset::new(img(5.0, 5), vec![2; 5], 2, 2).unwrap();
    let stats = norm_stats(&full.slice(0..20, Split::Train)).unwrap();
    let s = Splits::from_train(full, 10, Some(test)).unwrap().normalize().unwrap();
    assert_eq!(s.train.split, Split::Train);
    assert_eq!(s.validation.split, Split::Validation);
    assert_eq!(s.train.norm, Some(stats));
    assert_eq!(s.validation.norm, Some(stats));
    assert_eq!(s.test.as_ref().unwrap().norm, Some(stats));
    let m = s.train.images.mean().unwrap();
    let sd = s.train.images.std(0.0);
    assert!(m.abs() < 1e-12 && (sd - 1.0).abs() < 1e-12);
    // normalizing again is a no-op
    let again = norm_stats(&s.train).unwrap();
    assert!(again.mean.abs() < 1e-12 && (again.std - 1.0).abs() < 1e-12);

    let flat = Dataset::new(Array2::from_elem((3, 4), 0.5), vec![0; 3], 2, 2).unwrap();
    assert!(matches!(norm_stats(&flat), Err(Error::Data(_))));
}

#[test]
fn splits_are_disjoint_tail_cut() {
    let n = 25;
    let img = Array2::from_shape_fn((n, 4), |(i, _)| i as f64);
    let full = Dataset::new(img, vec![0; n], 2, 2).unwrap();
    let s = Splits::from_train(full, 5, None).unwrap();
    let train: HashSet<u64> = s.train.images.column(0).iter().map(|v| *v as u64).collect();
    let val: HashSet<u64> = s.validation.images.column(0).iter().map(|v| *v as u64).collect();
    assert_eq!(train.len(), 20);
    assert_eq!(val, (20..25).collect());
    assert!(train.is_disjoint(&val));
}

#[test]
fn mnist_headers_and_normalization() {
    let dir = mnist_dir();
    if !dir.join("train-images-idx3-ubyte").exists() && !dir.join("train-images-idx3-ubyte.gz").exists() {
        eprintln!("skipping: no MNIST files in {}", dir.display());
        return;
    }
    let s = load_mnist(&dir).unwrap();
    assert_eq!(s.train.len() + s.validation.len(), 60_000);
    assert_eq!(s.validation.len(), 10_000);
    assert_eq!((s.train.rows, s.train.cols), (28, 28));
    assert_eq!(s.test.as_ref().unwrap().len(), 10_000);
    let m = s.train.images.mean().unwrap();
    let sd = s.train.images.std(0.0);
    assert!(m.abs() < 1e-10, "{m}");
    assert!((sd - 1.0).abs() < 1e-10, "{sd}");
}
