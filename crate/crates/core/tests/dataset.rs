//! Compression pipeline, Q-pool partitioning and manifest construction.

use std::collections::HashSet;

use djpeg_core::dataset::{
    build_dataset, decompress, default_q_pool, double_compress, format_q_pool, parse_q_pool, single_compress,
    split_q_pool, synth_corpus, synth_image, CorpusConfig, DatasetConfig, DatasetManifest, Label, PatchMode, Split,
    StorageFormat,
};
use djpeg_core::features::extract_histograms;
use djpeg_core::jpeg::{standard_qmatrix, QuantMatrix};
use djpeg_core::raster::{write_pgm, GrayImage};
use djpeg_core::Error;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn textured(size: usize, seed: u64) -> GrayImage {
    synth_image(size, size, &mut ChaCha8Rng::seed_from_u64(seed))
}

/// Orthonormal 2-D DCT-II by direct summation.
fn naive_dct(px: &[f64; 64]) -> [f64; 64] {
    use std::f64::consts::PI;
    let c = |u: usize| if u == 0 { (1.0f64 / 8.0).sqrt() } else { (2.0f64 / 8.0).sqrt() };
    std::array::from_fn(|i| {
        let (v, u) = (i / 8, i % 8);
        let mut s = 0.0;
        for y in 0..8 {
            for x in 0..8 {
                s += px[y * 8 + x]
                    * ((2 * x + 1) as f64 * u as f64 * PI / 16.0).cos()
                    * ((2 * y + 1) as f64 * v as f64 * PI / 16.0).cos();
            }
        }
        c(u) * c(v) * s
    })
}

#[test]
fn constant_patch_quantizes_to_zero() {
    let img = GrayImage::new(16, 16, vec![128; 256]).unwrap();
    let plane = single_compress(&img, &standard_qmatrix(50).unwrap()).unwrap();
    assert!(plane.blocks.iter().flatten().all(|&v| v == 0));
    let odd = GrayImage::new(12, 16, vec![128; 192]).unwrap();
    assert!(matches!(single_compress(&odd, &QuantMatrix::uniform(1).unwrap()), Err(Error::Dimension(_))));
}

#[test]
fn unit_steps_give_rounded_dct() {
    let img = textured(32, 4);
    let plane = single_compress(&img, &QuantMatrix::uniform(1).unwrap()).unwrap();
    for by in 0..4 {
        for bx in 0..4 {
            let px = img.block(bx, by).map(|p| f64::from(p) - 128.0);
            let expected = naive_dct(&px);
            for (got, want) in plane.block(bx, by).iter().zip(expected) {
                // an exact half can land on either side in floating point
                if (want.abs().fract() - 0.5).abs() < 1e-9 {
                    assert!((f64::from(*got) - want).abs() < 0.5 + 1e-9, "want {want}");
                } else {
                    assert_eq!(*got, want.round() as i32, "want {want}");
                }
            }
        }
    }
}

#[test]
fn compression_is_deterministic() {
    let img = textured(64, 9);
    let q1 = standard_qmatrix(70).unwrap();
    let q2 = standard_qmatrix(90).unwrap();
    assert_eq!(single_compress(&img, &q1).unwrap(), single_compress(&img, &q1).unwrap());
    assert_eq!(double_compress(&img, &q1, &q2).unwrap(), double_compress(&img, &q1, &q2).unwrap());
}

#[test]
fn double_compress_requires_distinct_matrices() {
    let img = textured(16, 1);
    let ones = QuantMatrix::uniform(1).unwrap();
    assert!(matches!(double_compress(&img, &ones, &ones), Err(Error::SameMatrix)));
    let mut steps = [1u16; 64];
    steps[10] = 2;
    let other = QuantMatrix::new(steps).unwrap();
    assert!(double_compress(&img, &ones, &other).is_ok());
}

#[test]
fn double_compress_matches_manual_pipeline() {
    let img = textured(32, 2);
    let q1 = standard_qmatrix(60).unwrap();
    let q2 = standard_qmatrix(85).unwrap();
    let manual = single_compress(&decompress(&single_compress(&img, &q1).unwrap(), &q1), &q2).unwrap();
    assert_eq!(double_compress(&img, &q1, &q2).unwrap(), manual);
}

fn odd_fraction(plane: &djpeg_core::jpeg::CoeffPlane) -> f64 {
    let h = extract_histograms(plane, 40).unwrap();
    let (mut odd, mut total) = (0u32, 0u32);
    for k in 2..=64 {
        for i in -40..=40 {
            total += h.count(k, i);
            if i % 2 != 0 {
                odd += h.count(k, i);
            }
        }
    }
    f64::from(odd) / f64::from(total)
}

#[test]
fn halved_steps_leave_odd_bins_nearly_empty() {
    let q1 = QuantMatrix::uniform(4).unwrap();
    let q2 = QuantMatrix::uniform(2).unwrap();
    for seed in 0..4 {
        let img = textured(256, seed);
        let double = odd_fraction(&double_compress(&img, &q1, &q2).unwrap());
        let single = odd_fraction(&single_compress(&img, &q2).unwrap());
        assert!(double < 0.02, "seed {seed}: odd fraction {double}");
        assert!(single > 0.2, "seed {seed}: single odd fraction {single}");
    }
}

fn random_pool(n: usize, seed: u64) -> Vec<QuantMatrix> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| QuantMatrix::new(std::array::from_fn(|_| rng.random_range(1..=255))).unwrap())
        .collect()
}

#[test]
fn pool_split_sizes() {
    let pool = random_pool(1120, 5);
    let (seen, unseen) = split_q_pool(&pool, 0.7, 11).unwrap();
    assert_eq!((seen.len(), unseen.len()), (784, 336));
    let (seen, unseen) = split_q_pool(&default_q_pool(), 0.7, 11).unwrap();
    assert_eq!((seen.len(), unseen.len()), (14, 6));
    let again = split_q_pool(&default_q_pool(), 0.7, 11).unwrap();
    assert_eq!((seen.clone(), unseen.clone()), again);
    let s: HashSet<_> = seen.iter().collect();
    assert!(unseen.iter().all(|q| !s.contains(q)));
}

#[test]
fn pool_split_rejects_bad_input() {
    let pool = default_q_pool();
    assert!(matches!(split_q_pool(&pool, 0.0, 1), Err(Error::Domain(_))));
    assert!(matches!(split_q_pool(&pool, 1.0, 1), Err(Error::Domain(_))));
    let same = vec![pool[0]; 5];
    assert!(matches!(split_q_pool(&same, 0.5, 1), Err(Error::Domain(_))));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn pool_split_is_a_partition(n in 2usize..200, frac in 0.01f64..0.99, seed in any::<u64>()) {
        let pool = random_pool(n, seed);
        let (seen, unseen) = split_q_pool(&pool, frac, seed).unwrap();
        prop_assert_eq!(seen.len() + unseen.len(), n);
        prop_assert!(!seen.is_empty() && !unseen.is_empty());
        let all: HashSet<_> = seen.iter().chain(&unseen).collect();
        prop_assert_eq!(all.len(), n);
    }
}

#[test]
fn pool_text_roundtrip() {
    let pool = default_q_pool();
    let text = format_q_pool(&pool);
    assert_eq!(parse_q_pool(&text).unwrap(), pool);
    let commented = format!("# two tables\n\n{}\n\n\n", format_q_pool(&pool[..2]));
    assert_eq!(parse_q_pool(&commented).unwrap(), pool[..2].to_vec());
    assert!(parse_q_pool("1 2 3\n").is_err());
    assert!(parse_q_pool(&"0 ".repeat(64)).is_err());
}

fn write_corpus(dir: &std::path::Path, count: usize, size: usize) {
    synth_corpus(
        dir,
        &CorpusConfig {
            count,
            width: size,
            height: size,
            seed: 17,
        },
    )
    .unwrap();
}

#[test]
fn ten_images_give_forty_pairs() {
    let tmp = tempfile::tempdir().unwrap();
    let raw = tmp.path().join("raw");
    write_corpus(&raw, 10, 512);
    let config = DatasetConfig {
        patch_size: 64,
        seed: 3,
        ..DatasetConfig::default()
    };
    let out = tmp.path().join("ds");
    let m = build_dataset(&raw, &out, &default_q_pool(), &config).unwrap();
    assert_eq!(m.records.iter().filter(|r| r.label == Label::Single).count(), 40);
    assert_eq!(m.records.iter().filter(|r| r.label == Label::Double).count(), 40);
    m.verify().unwrap();
    let loaded = DatasetManifest::load(&out).unwrap();
    assert_eq!(loaded, m);
    // sub-grid mode stores the top-left 8x8 blocks of each 256 patch
    let plane = m.load_plane(&out, &m.records[0]).unwrap();
    assert_eq!((plane.width_blocks, plane.height_blocks), (8, 8));
    for r in &m.records {
        if let Some(q2) = r.q2 {
            assert_ne!(q2, r.q1);
        }
    }

    // rebuilding from scratch reproduces the manifest and every patch
    let out2 = tmp.path().join("ds2");
    let m2 = build_dataset(&raw, &out2, &default_q_pool(), &config).unwrap();
    assert_eq!(m.digest().unwrap(), m2.digest().unwrap());
    for r in &m.records {
        assert_eq!(std::fs::read(out.join(&r.path)).unwrap(), std::fs::read(out2.join(&r.path)).unwrap());
    }
}

#[test]
fn unseen_split_uses_reserved_matrices() {
    let tmp = tempfile::tempdir().unwrap();
    let raw = tmp.path().join("raw");
    write_corpus(&raw, 6, 256);
    let config = DatasetConfig {
        patch_size: 64,
        mode: PatchMode::Native,
        seed: 8,
        splits: [0.5, 0.25, 0.25],
        unseen_eval: true,
        storage: StorageFormat::Jpeg,
        ..DatasetConfig::default()
    };
    let out = tmp.path().join("ds");
    let m = build_dataset(&raw, &out, &default_q_pool(), &config).unwrap();
    assert_eq!((m.header.seen_pool.len(), m.header.unseen_pool.len()), (14, 6));
    let unseen: HashSet<_> = m.header.unseen_pool.iter().collect();
    let seen: HashSet<_> = m.header.seen_pool.iter().collect();
    let test_unseen: Vec<_> = m.split(Split::TestUnseen).collect();
    assert_eq!(test_unseen.len(), m.split(Split::Test).count());
    assert!(!test_unseen.is_empty());
    for r in &test_unseen {
        assert!(unseen.contains(r.final_q()) && unseen.contains(&r.q1));
    }
    for r in m.records.iter().filter(|r| r.split != Split::TestUnseen) {
        assert!(seen.contains(r.final_q()));
    }
    // JPEG storage keeps coefficients and the final matrix
    let r = m.records.iter().find(|r| r.label == Label::Double).unwrap();
    let plane = m.load_plane(&out, r).unwrap();
    let region = djpeg_core::raster::read_raster(&raw.join(&r.source)).unwrap().to_luma();
    let region = region.crop(r.offset.0, r.offset.1, 64, 64).unwrap();
    assert_eq!(plane, double_compress(&region, &r.q1, r.final_q()).unwrap());
}

#[test]
fn empty_corpus_and_small_pool() {
    let tmp = tempfile::tempdir().unwrap();
    let raw = tmp.path().join("raw");
    std::fs::create_dir_all(&raw).unwrap();
    write_pgm(&raw.join("tiny.pgm"), &GrayImage::new(40, 40, vec![9; 1600]).unwrap()).unwrap();
    let config = DatasetConfig {
        patch_size: 64,
        mode: PatchMode::Native,
        ..DatasetConfig::default()
    };
    let out = tmp.path().join("ds");
    assert!(matches!(
        build_dataset(&raw, &out, &default_q_pool(), &config),
        Err(Error::EmptyCorpus(_))
    ));
    let one = vec![standard_qmatrix(80).unwrap(); 3];
    assert!(matches!(build_dataset(&raw, &out, &one, &config), Err(Error::InsufficientQPool(_))));
    let unseen = DatasetConfig {
        unseen_eval: true,
        ..config
    };
    assert!(matches!(
        build_dataset(&raw, &out, &default_q_pool()[..3], &unseen),
        Err(Error::InsufficientQPool(_))
    ));
}
