use proptest::prelude::*;
use thinseg_core::peft::{
    adapter_param_count, count_params, AdapterParams, LoraLayer, ParamBudget, ParamConfig,
};
use thinseg_core::Tensor;

fn layer_parts() -> impl Strategy<Value = (Tensor, Tensor, Tensor, usize, u64)> {
    (1usize..12, 1usize..12, 1usize..5, any::<u64>()).prop_flat_map(|(d_in, d_out, n, seed)| {
        let rank = 1 + (seed as usize) % d_in.min(d_out);
        (
            prop::collection::vec(-2.0f64..2.0, d_in * d_out),
            prop::collection::vec(-2.0f64..2.0, d_out),
            prop::collection::vec(-2.0f64..2.0, d_in * n),
        )
            .prop_map(move |(w, b, x)| {
                (
                    Tensor::new([d_out, d_in], w).unwrap(),
                    Tensor::new([d_out], b).unwrap(),
                    Tensor::new([d_in, n], x).unwrap(),
                    rank,
                    seed,
                )
            })
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn fresh_lora_layer_equals_frozen_base((w0, b0, x, rank, seed) in layer_parts()) {
        let layer = LoraLayer::new(w0, b0, rank, rank as f64, seed).unwrap();
        let out = layer.forward(&x).unwrap();
        let base = layer.base_forward(&x).unwrap();
        prop_assert_eq!(out.shape(), base.shape());
        for (a, b) in out.data().iter().zip(base.data()) {
            prop_assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn doubling_alpha_doubles_low_rank_contribution(
        (w0, b0, x, rank, seed) in layer_parts(),
        alpha in 0.1f64..8.0,
        fill in -1.0f64..1.0,
    ) {
        let fresh = LoraLayer::new(w0.clone(), b0.clone(), rank, alpha, seed).unwrap();
        let b = Tensor::from_fn(fresh.b().shape().to_vec(), |i| fill + 0.1 * i as f64).unwrap();
        let one = LoraLayer::from_parts(w0.clone(), b0.clone(), fresh.a().clone(), b.clone(), alpha).unwrap();
        let two = LoraLayer::from_parts(w0, b0, fresh.a().clone(), b, 2.0 * alpha).unwrap();
        let base = one.base_forward(&x).unwrap();
        let y1 = one.forward(&x).unwrap();
        let y2 = two.forward(&x).unwrap();
        for ((b, o), t) in base.data().iter().zip(y1.data()).zip(y2.data()) {
            let (d1, d2) = (o - b, t - b);
            prop_assert!((d2 - 2.0 * d1).abs() <= 1e-12 * d2.abs().max(b.abs()).max(1.0));
        }
    }

    #[test]
    fn zero_adapter_is_identity(
        (c, h, w, z) in (1usize..6, 1usize..7, 1usize..7)
            .prop_flat_map(|(c, h, w)| (Just(c), Just(h), Just(w), prop::collection::vec(-5.0f64..5.0, c * h * w)))
    ) {
        let z = Tensor::new([c, h, w], z).unwrap();
        let out = AdapterParams::zeros(c).unwrap().forward(&z).unwrap();
        prop_assert_eq!(out, z);
    }

    #[test]
    fn lora_count_is_exact_integer_arithmetic(
        d_in in 1u64..4096, d_out in 1u64..4096, rank in 1u64..64, blocks in 0u64..24, per in 1u64..4,
    ) {
        let cfg = ParamConfig {
            d_in, d_out, rank, n_blocks: blocks, layers_per_block: per,
            channels: 0, head_params: 0, frozen_params: 1,
        };
        let b = count_params(&cfg);
        prop_assert_eq!(b.lora, blocks * per * rank * (d_in + d_out));
        prop_assert_eq!(b.trainable, b.lora);
        prop_assert_eq!(b.total, b.lora + 1);
    }
}

#[test]
fn adapter_count_at_256_channels() {
    assert_eq!(adapter_param_count(256), 2304 + 256 + 65_536 + 256);
    assert_eq!(adapter_param_count(256), 68_352);
    assert_eq!(AdapterParams::zeros(256).unwrap().param_count(), 68_352);
}

#[test]
fn vit_b_ffn_lora_count() {
    let b = count_params(&ParamConfig::vit_b_ffn(16));
    assert_eq!(b.lora, 1_474_560);
    assert_eq!(b.adapter, 68_352);
    let none = count_params(&ParamConfig {
        n_blocks: 0,
        channels: 0,
        ..ParamConfig::vit_b_ffn(16)
    });
    assert_eq!(none.lora, 0);
}

#[test]
fn stated_component_sizes_give_five_point_two_percent() {
    let b = ParamBudget::from_parts(2_400_000, 66_000, 2_400_000, 93_700_000).unwrap();
    let pct = 100.0 * b.fraction();
    assert!((pct - 5.19).abs() < 0.01, "{pct}");
    assert!((pct - 5.2).abs() <= 0.1);
}
