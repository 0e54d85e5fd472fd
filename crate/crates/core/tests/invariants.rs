use nalgebra::DMatrix;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use segtrans_autograd::{EntryKind, Graph, Tensor};
use segtrans_core::networks::decode_residual;
use segtrans_core::{sample_unique, Architecture, Model, OptimizerConfig, PresetName, VariantKind};

fn input(seed: u64, shape: &[usize]) -> Tensor<f64> {
    let mut s = seed.wrapping_mul(0x9e3779b97f4a7c15) | 1;
    Tensor::from_fn(shape, |_| {
        s ^= s << 13;
        s ^= s >> 7;
        s ^= s << 17;
        (s >> 11) as f64 / (1u64 << 53) as f64 * 2.0 - 1.0
    })
}

fn proposed(h: usize, w: usize, c: usize, seed: u64) -> Model<f64> {
    Model::new(VariantKind::Proposed, Architecture::tiny((h, w), c), seed).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn common_decoder_restores_input_shape(h in 5usize..23, w in 5usize..23, c in 1usize..3, n in 1usize..3, seed in 0u64..1000) {
        let m = proposed(h, w, c, seed);
        let mut g = Graph::new();
        let x = g.constant(input(seed, &[n, c, h, w]));
        let (lat, skips) = m.encode(&mut g, x).unwrap();
        let out = m.common.as_ref().unwrap().decode(&mut g, lat.common, Some(&skips)).unwrap();
        prop_assert_eq!(g.shape(out), &[n, c, h, w][..]);

        // Skip levels halve (rounding up) and strictly shrink.
        let sizes = m.arch.level_sizes();
        prop_assert_eq!(skips.levels.len(), sizes.len() - 2);
        for (i, &s) in skips.levels.iter().enumerate() {
            let shape = g.shape(s);
            prop_assert_eq!((shape[2], shape[3]), sizes[i + 1]);
        }
        for pair in sizes.windows(2) {
            prop_assert!(pair[1].0 * pair[1].1 < pair[0].0 * pair[0].1);
        }
    }

    #[test]
    fn latent_split_is_a_channel_slice(h in 6usize..20, w in 6usize..20, seed in 0u64..1000) {
        let m = proposed(h, w, 1, seed);
        let mut g = Graph::new();
        let x = g.constant(input(seed + 1, &[2, 1, h, w]));
        let (lat, _) = m.encode(&mut g, x).unwrap();
        let joined = g.concat(&[lat.common, lat.unique]).unwrap();
        prop_assert_eq!(g.value(joined), g.value(lat.raw));
        prop_assert_eq!(g.shape(lat.unique)[1], m.arch.unique_channels);
        prop_assert_eq!(g.shape(lat.common)[1] + g.shape(lat.unique)[1], m.arch.latent_channels);
    }

    #[test]
    fn translations_are_additive(h in 6usize..18, w in 6usize..18, seed in 0u64..1000) {
        let m = proposed(h, w, 1, seed);
        let mut g = Graph::new();
        let xp = g.constant(input(seed + 2, &[2, 1, h, w]));
        let xa = g.constant(input(seed + 3, &[2, 1, h, w]));
        let p = m.forward_presence(&mut g, xp, &[1]).unwrap();
        let u = sample_unique::<f64>(&m.latent_shape(2), &mut ChaCha8Rng::seed_from_u64(seed));
        let a = m.forward_absence(&mut g, xa, u, true).unwrap();
        let sum = |g: &Graph<f64>, x, d| -> Vec<f64> {
            g.value(x).data().iter().zip(g.value(d).data()).map(|(a, b)| a + b).collect()
        };
        prop_assert_eq!(g.value(p.x_pp).data(), &sum(&g, p.x_pa, p.delta_pa)[..]);
        prop_assert_eq!(g.value(a.x_ap).data(), &sum(&g, a.x_aa, a.delta_ap)[..]);

        // The absence-to-presence residual is the residual decoder applied to (c_A, u).
        let (lat, skips) = m.encode(&mut g, xa).unwrap();
        let d = decode_residual(&mut g, m.residual.as_ref().unwrap(), lat.common, a.u_sampled, &skips).unwrap();
        prop_assert_eq!(g.value(d), g.value(a.delta_ap));
        prop_assert_eq!(g.shape(p.y_seg.unwrap()), &[1, 1, h, w][..]);
    }

    #[test]
    fn discriminator_scores_each_image_on_its_own(n in 2usize..5, seed in 0u64..1000) {
        let m = proposed(16, 16, 1, seed);
        let d = m.disc_p.as_ref().unwrap();
        let x = input(seed + 4, &[n, 1, 16, 16]);
        let score = |t: Tensor<f64>| {
            let mut g = Graph::new();
            let v = g.constant(t);
            let s = d.discriminate(&mut g, v).unwrap();
            g.value(s).data().to_vec()
        };
        let all = score(x.clone());
        prop_assert_eq!(all.len(), n);
        let reversed: Vec<usize> = (0..n).rev().collect();
        let flipped = score(x.select_batch(&reversed).unwrap());
        for i in 0..n {
            prop_assert!((flipped[n - 1 - i] - all[i]).abs() <= 1e-12 * all[i].abs().max(1.0));
            let alone = score(x.select_batch(&[i]).unwrap())[0];
            prop_assert!((alone - all[i]).abs() <= 1e-12 * all[i].abs().max(1.0));
        }
    }
}

/// Largest singular value of a weight viewed as `(dim 0) × (rest)`.
fn sigma_max(t: &Tensor<f64>) -> f64 {
    let rows = t.dim(0);
    let cols = t.numel() / rows;
    DMatrix::from_row_slice(rows, cols, t.data()).singular_values().max()
}

#[test]
fn every_proposed_network_is_spectrally_normalized() {
    let m = proposed(16, 16, 1, 7);
    let (mut checked, mut skipped) = (0, 0);
    for net in m.nets() {
        assert!(net.spectral_enabled(), "{} is not normalized", net.store.name());
        let entries = net.store.entries();
        for e in entries.iter().filter(|e| e.kind == EntryKind::Param && e.name.ends_with(".weight")) {
            let stem = e.name.trim_end_matches(".weight");
            // The norm-parameter MLP is left unnormalized.
            if net.store.name() == "seg_head" && stem.starts_with("mlp.") {
                assert!(!entries.iter().any(|b| b.name == format!("{stem}.sn_u")), "{stem} is normalized");
                skipped += 1;
                continue;
            }
            let u = entries.iter().find(|b| b.name == format!("{stem}.sn_u")).expect("power vector");
            let v = entries.iter().find(|b| b.name == format!("{stem}.sn_v")).expect("power vector");
            let rows = e.tensor.dim(0);
            let cols = e.tensor.numel() / rows;
            let w = e.tensor.data();
            let estimate: f64 =
                (0..rows).map(|r| u.tensor.data()[r] * (0..cols).map(|c| w[r * cols + c] * v.tensor.data()[c]).sum::<f64>()).sum();
            let ratio = sigma_max(&e.tensor) / estimate;
            assert!((0.95..=1.05).contains(&ratio), "{}.{}: sigma ratio {ratio}", net.store.name(), e.name);
            checked += 1;
        }
    }
    assert!(checked > 20);
    assert!(skipped > 4);

    let baseline = Model::<f64>::new(VariantKind::SegOnly, Architecture::tiny((16, 16), 1), 7).unwrap();
    assert!(baseline.nets().iter().all(|n| !n.spectral_enabled()));
}

#[test]
fn preset_tables() {
    let a = Architecture::preset(PresetName::Mnist48);
    assert_eq!(a.encoder.block_channels, vec![64, 128, 256, 512]);
    assert_eq!(a.encoder.stem_channels, 32);
    assert_eq!((a.latent_channels, a.unique_channels), (512, 128));
    assert_eq!((a.residual_decoder.kernel, a.residual_decoder.short_skip), (5, false));
    assert_eq!(a.level_sizes().last(), Some(&(3, 3)));
    for p in [PresetName::Mnist48, PresetName::Mnist128, PresetName::Brats] {
        Architecture::preset(p).validate().unwrap();
    }
    let o = OptimizerConfig::default();
    assert_eq!(o.lr_discriminator, 10.0 * o.lr_generator);
}
