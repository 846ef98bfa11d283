//! Adapter injection into the reference encoder.

use std::collections::BTreeSet;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use jointwatch::encoder::{ReferenceEncoder, ReferenceEncoderConfig};
use jointwatch::fusion::FusionConfig;
use jointwatch::lora::{inject_lora, merge_lora, LoraConfig};
use jointwatch::tensor::Matrix;
use jointwatch::trainer::{Model, TrainMode};
use jointwatch::Error;

fn stems(n: usize, tokens: usize, d: usize, rng: &mut ChaCha8Rng) -> Vec<Matrix<f64>> {
    (0..n)
        .map(|_| Matrix::from_fn(tokens, d, |_, _| rng.random_range(-2.0..2.0)))
        .collect()
}

#[test]
fn trainable_set_is_adapters_plus_head() {
    let base = ReferenceEncoder::<f32>::new(ReferenceEncoderConfig::default(), 1).unwrap();
    let model = Model::new(TrainMode::Lora, &base, FusionConfig::default(), &LoraConfig::default(), 2).unwrap();
    let mut want = BTreeSet::new();
    for b in 0..2 {
        for layer in ["attn.query", "attn.key", "attn.value", "mlp.fc1", "mlp.fc2"] {
            for m in ["lora_a", "lora_b"] {
                want.insert(format!("encoder.blocks.{b}.{layer}.{m}"));
            }
        }
    }
    let got: BTreeSet<String> = model.encoder.params().trainable_names().into_iter().collect();
    assert_eq!(got, want);
    let head: Vec<String> = model.head.params().iter().map(|(_, p)| p.name.clone()).collect();
    assert_eq!(model.head.params().trainable_names(), head);
    assert!(head.iter().any(|n| n.starts_with("head.pos_proj")));
    assert!(head.iter().any(|n| n.starts_with("head.attn.0")));
    assert!(head.iter().any(|n| n.starts_with("head.classifier")));
    // Scalars: per block, three d×d attention adapters (2·8·32 each) and two
    // feed-forward adapters (8·32 + 64·8 each).
    assert_eq!(model.encoder.params().trainable_count(), 2 * (3 * 512 + 2 * 768));
}

#[test]
fn only_the_last_two_blocks_take_adapters() {
    let cfg = ReferenceEncoderConfig {
        blocks: 3,
        ..ReferenceEncoderConfig::default()
    };
    let mut enc = ReferenceEncoder::<f64>::new(cfg, 3).unwrap();
    let n = inject_lora(&mut enc, &LoraConfig::default(), &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    assert_eq!(n, 10);
    assert!(enc
        .params()
        .trainable_names()
        .iter()
        .all(|name| !name.starts_with("encoder.blocks.0.")));
}

#[test]
fn too_few_blocks_is_a_config_error() {
    let cfg = ReferenceEncoderConfig {
        blocks: 1,
        ..ReferenceEncoderConfig::default()
    };
    let mut enc = ReferenceEncoder::<f64>::new(cfg, 3).unwrap();
    let r = inject_lora(&mut enc, &LoraConfig::default(), &mut ChaCha8Rng::seed_from_u64(0));
    assert!(matches!(r, Err(Error::Config(_))));
    let zero = LoraConfig {
        rank: 0,
        ..LoraConfig::default()
    };
    let mut enc = ReferenceEncoder::<f64>::new(ReferenceEncoderConfig::default(), 3).unwrap();
    assert!(matches!(
        inject_lora(&mut enc, &zero, &mut ChaCha8Rng::seed_from_u64(0)),
        Err(Error::Config(_))
    ));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn untrained_adapters_change_nothing(seed in any::<u64>()) {
        let base = ReferenceEncoder::<f64>::new(ReferenceEncoderConfig::default(), seed).unwrap();
        let mut injected = base.clone();
        inject_lora(&mut injected, &LoraConfig::default(), &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 7);
        let s = stems(3, base.config.tokens(), 32, &mut rng);
        let diff = base.tokens_from_stems(&s).max_abs_diff(&injected.tokens_from_stems(&s));
        prop_assert!(diff <= 1e-6);
    }

    #[test]
    fn merging_reproduces_adapted_outputs(seed in any::<u64>()) {
        let mut enc = ReferenceEncoder::<f64>::new(ReferenceEncoderConfig::default(), seed).unwrap();
        inject_lora(&mut enc, &LoraConfig::default(), &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 9);
        let ids: Vec<_> = enc.params().iter().filter(|(_, p)| p.name.ends_with(".lora_b")).map(|(id, _)| id).collect();
        for id in ids {
            for v in enc.params_mut().get_mut(id).value.data_mut() {
                *v = rng.random_range(-0.1..0.1);
            }
        }
        let s = stems(3, enc.config.tokens(), 32, &mut rng);
        let adapted = enc.tokens_from_stems(&s);
        prop_assert_eq!(merge_lora(&mut enc), 10);
        prop_assert!(enc.tokens_from_stems(&s).max_abs_diff(&adapted) <= 1e-5);
    }
}
