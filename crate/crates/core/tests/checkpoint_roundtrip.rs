use lclab::model::{gen_toy_model_with, load_checkpoint, save_checkpoint, Checkpoint, ModelConfig, ToyModelOptions};
use lclab::ParseError;
use lclab::LabError;
use proptest::prelude::*;

fn config_strategy() -> impl Strategy<Value = ModelConfig> {
    (1usize..3, 1usize..4, prop_oneof![Just(2usize), Just(4), Just(8)], 1usize..24, 2usize..40, 1usize..64).prop_map(
        |(n_layers, n_heads, d_head, d_ff, vocab_size, max_context)| ModelConfig {
            n_layers,
            d_model: n_heads * d_head,
            n_heads,
            d_head,
            d_ff,
            vocab_size,
            rope_theta: 10000.0,
            max_context,
        },
    )
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn save_load_is_bitwise(cfg in config_strategy(), seed in any::<u64>(), frac in 0.0f64..0.05, bits in proptest::option::of(prop_oneof![Just(4u8), Just(8u8)])) {
        let opts = ToyModelOptions { outlier_fraction: frac, ..ToyModelOptions::default() };
        let ck = gen_toy_model_with(&cfg, seed, &opts).with_activation_bits(bits);
        let back = Checkpoint::from_bytes(&ck.to_bytes()).unwrap();
        prop_assert!(back.bit_eq(&ck));
    }
}

#[test]
fn file_round_trip_and_errors() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.lcmp");
    let cfg = ModelConfig {
        n_layers: 1,
        d_model: 8,
        n_heads: 2,
        d_head: 4,
        d_ff: 12,
        vocab_size: 16,
        rope_theta: 10000.0,
        max_context: 32,
    };
    let ck = gen_toy_model_with(&cfg, 5, &ToyModelOptions::default());
    save_checkpoint(&ck, &path).unwrap();
    assert!(load_checkpoint(&path).unwrap().bit_eq(&ck));
    let bytes = std::fs::read(&path).unwrap();

    let mut bad = bytes.clone();
    bad[0] = b'X';
    std::fs::write(&path, &bad).unwrap();
    assert!(matches!(load_checkpoint(&path), Err(LabError::Parse(ParseError::BadMagic { .. }))));

    std::fs::write(&path, &bytes[..bytes.len() - 3]).unwrap();
    assert!(matches!(load_checkpoint(&path), Err(LabError::Parse(_))));

    assert!(matches!(load_checkpoint(dir.path().join("missing")), Err(LabError::Io { .. })));
}

#[test]
fn same_seed_same_bytes_different_seed_different_bytes() {
    let cfg = ModelConfig::default();
    let a = gen_toy_model_with(&cfg, 1, &ToyModelOptions::default()).to_bytes();
    let b = gen_toy_model_with(&cfg, 1, &ToyModelOptions::default()).to_bytes();
    let c = gen_toy_model_with(&cfg, 2, &ToyModelOptions::default()).to_bytes();
    assert_eq!(a, b);
    assert_ne!(a, c);
}
