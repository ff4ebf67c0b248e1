//! Histogram extraction, HQ assembly and the packed feature file.

use djpeg_core::dataset::{single_compress, synth_image};
use djpeg_core::features::{assemble_hq, extract_histograms, FeatureRecord, FeatureSet, FreqOrder, AC_COUNT};
use djpeg_core::jpeg::{freq_1d_to_2d, standard_qmatrix, CoeffPlane, QuantMatrix};
use djpeg_core::quant_model::requantize;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[test]
fn single_zero_block() {
    let plane = CoeffPlane::zeros(1, 1, 1);
    let h = extract_histograms(&plane, 80).unwrap();
    for k in 2..=64 {
        for i in -80..=80 {
            assert_eq!(h.count(k, i), u32::from(i == 0));
        }
    }
}

#[test]
fn out_of_range_values_are_dropped() {
    // raster k = 5 is row 1, column 5, i.e. array index 4
    let values = [0, 0, 3, -2, 200];
    let blocks = values
        .iter()
        .map(|&v| {
            let mut b = [0; 64];
            b[4] = v;
            b
        })
        .collect();
    let plane = CoeffPlane::new(1, 5, 1, blocks).unwrap();
    let h = extract_histograms(&plane, 80).unwrap();
    assert_eq!(h.count(5, 0), 2);
    assert_eq!(h.count(5, 3), 1);
    assert_eq!(h.count(5, -2), 1);
    assert_eq!(h.frequency(5).iter().sum::<u32>(), 4);
    // DC is never counted
    let mut b = [0; 64];
    b[0] = 1;
    let h = extract_histograms(&CoeffPlane::new(1, 1, 1, vec![b]).unwrap(), 2).unwrap();
    assert_eq!(h.total(), 63);
}

#[test]
fn requantized_halving_empties_odd_bins() {
    let img = synth_image(128, 128, &mut ChaCha8Rng::seed_from_u64(3));
    let single = single_compress(&img, &QuantMatrix::uniform(4).unwrap()).unwrap();
    // coefficient-domain requantization from step 4 to step 2
    let double = CoeffPlane {
        blocks: single
            .blocks
            .iter()
            .map(|b| b.map(|s| requantize(i64::from(s), 4, 2) as i32))
            .collect(),
        ..single
    };
    let h = extract_histograms(&double, 20).unwrap();
    assert!(h.total() > 0);
    for k in 2..=64 {
        for i in (-20..=20).filter(|i| i % 2 != 0) {
            assert_eq!(h.count(k, i), 0);
        }
    }
}

#[test]
fn q_channel_replicates_matrix() {
    let plane = CoeffPlane::zeros(1, 2, 2);
    let h = extract_histograms(&plane, 3).unwrap();
    let hq = assemble_hq(&h, &QuantMatrix::uniform(7).unwrap(), FreqOrder::Raster);
    assert_eq!(hq.values.len(), AC_COUNT * 7 * 2);
    for pos in 0..AC_COUNT {
        for bin in 0..7 {
            assert_eq!(hq.at(pos, bin, 1), 7.0);
        }
    }
    let q = standard_qmatrix(75).unwrap();
    let raster = assemble_hq(&h, &q, FreqOrder::Raster);
    let zigzag = assemble_hq(&h, &q, FreqOrder::Zigzag);
    // first position is (1,2) in both orders; second differs
    assert_eq!(freq_1d_to_2d(2).unwrap(), (1, 2));
    assert_eq!(raster.at(0, 0, 1), f64::from(q.get(0, 1)));
    assert_eq!(zigzag.at(0, 0, 1), f64::from(q.get(0, 1)));
    assert_eq!(raster.at(1, 0, 1), f64::from(q.get(0, 2)));
    assert_eq!(zigzag.at(1, 0, 1), f64::from(q.get(1, 0)));
    assert_eq!(zigzag.at(62, 0, 1), f64::from(q.get(7, 7)));
}

fn random_plane(seed: u64, wb: usize, hb: usize) -> CoeffPlane {
    use rand::Rng;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let blocks = (0..wb * hb)
        .map(|_| std::array::from_fn(|_| rng.random_range(-30..=30)))
        .collect();
    CoeffPlane::new(1, wb, hb, blocks).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn counts_are_conserved(seed in any::<u64>(), b in 1usize..25, wb in 1usize..5, hb in 1usize..5) {
        let plane = random_plane(seed, wb, hb);
        let h = extract_histograms(&plane, b).unwrap();
        let in_range = plane
            .blocks
            .iter()
            .flat_map(|blk| blk[1..].iter())
            .filter(|v| v.unsigned_abs() as usize <= b)
            .count();
        prop_assert_eq!(h.total(), in_range as u64);
    }

    #[test]
    fn orders_are_row_permutations(seed in any::<u64>(), b in 1usize..8) {
        let plane = random_plane(seed, 2, 2);
        let h = extract_histograms(&plane, b).unwrap();
        let q = standard_qmatrix(80).unwrap();
        let w = 2 * b + 1;
        let raster = assemble_hq(&h, &q, FreqOrder::Raster);
        let zigzag = assemble_hq(&h, &q, FreqOrder::Zigzag);
        let rows = |v: &[f64]| {
            let mut r: Vec<Vec<u64>> = v.chunks(2 * w).map(|c| c.iter().map(|x| x.to_bits()).collect()).collect();
            r.sort();
            r
        };
        prop_assert_eq!(rows(&raster.values), rows(&zigzag.values));
        prop_assert_eq!(&raster, &assemble_hq(&h, &q, FreqOrder::Raster));
    }
}

#[test]
fn feature_file_roundtrip() {
    for order in [FreqOrder::Raster, FreqOrder::Zigzag] {
        let records: Vec<FeatureRecord> = (0..5)
            .map(|i| FeatureRecord {
                label: (i % 2) as u8,
                hist: extract_histograms(&random_plane(i, 3, 2), 6).unwrap(),
                q: standard_qmatrix(60 + i as u32).unwrap(),
            })
            .collect();
        let set = FeatureSet { b: 6, order, records };
        let mut bytes = Vec::new();
        set.write_to(&mut bytes).unwrap();
        assert_eq!(&bytes[..4], b"DJPF");
        assert_eq!(bytes.len(), 17 + 5 * (1 + 63 * 13 * 4 + 64));
        assert_eq!(FeatureSet::read_from(bytes.as_slice()).unwrap(), set);
        assert!(FeatureSet::read_from(&bytes[..bytes.len() - 3]).is_err());
    }
}
