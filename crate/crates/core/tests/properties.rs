mod common;

use mlsc_core::baseline::{digital_baseline_with_table, QualityTable};
use mlsc_core::channel::{budget_for, power_normalize};
use mlsc_core::codec::{branch_specs, decode_split, select_channels, ChannelLayout, LatentTensor};
use mlsc_core::data::{denormalize, normalize, ImageBatch, RawImage};
use mlsc_core::{ModelConfig, Tensor, Tensor64};
use proptest::prelude::*;

fn layout(l: usize) -> ChannelLayout {
    ChannelLayout::new(&branch_specs(&ModelConfig { l, e: 1, ..Default::default() }))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn normalized_frames_have_unit_power(v in prop::collection::vec(-1e4f64..1e4, 2..400)) {
        prop_assume!(v.iter().any(|x| x.abs() > 1e-6));
        let f = power_normalize(&v).unwrap();
        prop_assert!((f.power() - 1.0).abs() < 1e-9);
        prop_assert_eq!(f.k(), v.len() / 2);
    }

    #[test]
    fn denormalize_covers_unit_interval(px in prop::collection::vec(any::<u8>(), 12)) {
        let img = RawImage::new(2, 2, px.clone(), "p").unwrap();
        let t = normalize::<f64>(&img);
        prop_assert!(t.data().iter().all(|v| (0.0..=1.0).contains(v)));
        let back = denormalize(&ImageBatch::new(Tensor::stack(&[t]).unwrap()).unwrap());
        prop_assert_eq!(&back[0].pixels, &px);
    }

    #[test]
    fn out_of_range_values_are_clamped(v in prop::collection::vec(-3.0f64..3.0, 12)) {
        let t = Tensor64::from_vec(&[1, 2, 2, 3], v.clone()).unwrap();
        let out = denormalize(&ImageBatch::new(t).unwrap());
        for (p, x) in out[0].pixels.iter().zip(&v) {
            prop_assert_eq!(*p, (x.clamp(0.0, 1.0) * 255.0).round() as u8);
        }
    }

    #[test]
    fn receiver_split_inverts_selection(l in 3usize..7, e_frac in 0.0f64..1.0, seed in any::<u64>()) {
        let lay = layout(l);
        let wtot = lay.total_width();
        let e = 1 + ((wtot - 1) as f64 * e_frac) as usize;
        let n = 2 * 3 * 2 * wtot;
        let data: Vec<f64> = (0..n).map(|i| ((i as u64).wrapping_mul(seed | 1) % 1000) as f64 + 1.0).collect();
        let r = LatentTensor { data: Tensor64::from_vec(&[2, 3, 2, wtot], data.clone()).unwrap(), branch_id: None };
        let sel = select_channels(&r, &lay, e).unwrap();
        let qs = decode_split(&sel.data, &lay).unwrap();
        // every split channel is either the original value or zero, and
        // exactly e channels per pixel survive
        let mut kept = 0;
        for (b, q) in qs.iter().enumerate() {
            let w = lay.widths[b];
            for (p, px) in q.data().chunks_exact(w).enumerate() {
                for (c, &v) in px.iter().enumerate() {
                    let orig = data[p * wtot + lay.offsets[b] + c];
                    prop_assert!(v == 0.0 || v == orig);
                    kept += (v != 0.0) as usize;
                }
            }
        }
        prop_assert_eq!(kept, e * 12);
        // the selection order is a permutation of all latent channels
        let mut idx: Vec<usize> = lay.selection.iter().map(|&s| lay.latent_index(s)).collect();
        idx.sort();
        prop_assert_eq!(idx, (0..wtot).collect::<Vec<_>>());
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn baseline_respects_budget(seed in 0usize..50, reals in 0usize..4000, snr in -10.0f64..40.0) {
        let img = common::synthetic_image(32, 32, seed);
        let table = QualityTable::build(&img).unwrap();
        let budget = budget_for(3 * 32 * 32, reals, snr);
        let r = digital_baseline_with_table(&img, &table, &budget).unwrap();
        prop_assert_eq!(r.failed, table.min_bits() as f64 > budget.bit_budget);
        if !r.failed {
            prop_assert!(r.bits_used as f64 <= budget.bit_budget);
        }
    }
}
