//! Invariants of the public API on random small models and sequences.

use induction_lab::model::checkpoint::{decode_checkpoint, encode_checkpoint};
use induction_lab::model::{init_model, AblationMask, Capture, HeadId, ModelConfig, ModelParameters};
use induction_lab::rng::rng_from_seed;
use induction_lab::seqgen::{generate, SequenceSpec};
use proptest::prelude::*;

fn small_config(n_layers: usize, n_heads: usize) -> ModelConfig {
    ModelConfig {
        n_layers,
        n_heads,
        d_model: 8 * n_heads,
        d_mlp: 32,
        vocab_size: 12,
        max_seq_len: 40,
        layernorm_eps: 1e-5,
    }
}

fn model(n_layers: usize, n_heads: usize, seed: u64) -> ModelParameters {
    init_model(&small_config(n_layers, n_heads), &mut rng_from_seed(seed)).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn generation_is_a_pure_function_of_the_spec(
        seed in any::<u64>(), v in 2usize..7, p in 2usize..5, n in 1usize..6,
    ) {
        let spec = SequenceSpec::second(n, if v == 2 { p.min(2) } else { p }, v).with_seed(seed);
        let a = generate(&spec).unwrap();
        let b = generate(&spec).unwrap();
        prop_assert_eq!(&a.tokens, &b.tokens);
        prop_assert_eq!(a.len(), n * spec.chunks * v);
        prop_assert!(a.tokens.iter().all(|&t| (t as usize) < spec.model_vocab_size));
    }

    #[test]
    fn attention_is_causal_and_normalized(
        seed in any::<u64>(), tokens in prop::collection::vec(0u32..12, 1..40),
    ) {
        let params = model(2, 2, seed);
        let trace = params.forward(&tokens, &AblationMask::none(), Capture::attention()).unwrap();
        for head in params.config.all_heads() {
            let a = trace.attention(head).unwrap();
            for t in 0..tokens.len() {
                let row = a.row(t);
                prop_assert!(row[t + 1..].iter().all(|&x| x == 0.0));
                prop_assert!((row.iter().map(|&x| x as f64).sum::<f64>() - 1.0).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn prefix_logits_do_not_see_the_future(
        seed in any::<u64>(), tokens in prop::collection::vec(0u32..12, 2..40), cut in 1usize..40,
    ) {
        let cut = cut.min(tokens.len());
        let params = model(2, 2, seed);
        let full = params.forward(&tokens, &AblationMask::none(), Capture::none()).unwrap();
        let prefix = params.forward(&tokens[..cut], &AblationMask::none(), Capture::none()).unwrap();
        for t in 0..cut {
            for (a, b) in full.logits_row(t).iter().zip(prefix.logits_row(t)) {
                prop_assert!((a - b).abs() <= 1e-4 * (1.0 + a.abs()), "position {}: {} vs {}", t, a, b);
            }
        }
    }

    #[test]
    fn ablation_zeroes_output_and_leaves_earlier_layers(
        seed in any::<u64>(), layer in 0usize..3, head in 0usize..2,
        tokens in prop::collection::vec(0u32..12, 2..30),
    ) {
        let params = model(3, 2, seed);
        let target = HeadId::new(layer, head);
        let intact = params.forward(&tokens, &AblationMask::none(), Capture::all()).unwrap();
        let ablated = params.forward(&tokens, &AblationMask::from_iter([target]), Capture::all()).unwrap();
        prop_assert!(ablated.head_output(target).unwrap().iter().all(|&x| x == 0.0));
        prop_assert_eq!(&ablated.attention(target).unwrap().data, &intact.attention(target).unwrap().data);
        for h in params.config.all_heads().into_iter().filter(|h| h.layer <= layer && *h != target) {
            prop_assert_eq!(ablated.head_output(h).unwrap(), intact.head_output(h).unwrap());
        }
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact(seed in any::<u64>(), layers in 1usize..3, heads in 1usize..3) {
        let params = model(layers, heads, seed);
        let meta = serde_json::json!({ "step": seed % 1000 });
        let bytes = encode_checkpoint(&params, &meta).unwrap();
        let (back, back_meta) = decode_checkpoint(&bytes).unwrap();
        prop_assert_eq!(back.config, params.config);
        prop_assert!(back.data.iter().zip(&params.data).all(|(a, b)| a.to_bits() == b.to_bits()));
        prop_assert_eq!(back_meta["step"].as_u64(), Some(seed % 1000));
    }
}

#[test]
fn corrupted_checkpoint_is_rejected() {
    let params = model(1, 1, 4);
    let mut bytes = encode_checkpoint(&params, &serde_json::json!({})).unwrap();
    assert!(decode_checkpoint(&bytes[..bytes.len() - 4]).is_err());
    bytes[3] ^= 0x40;
    assert!(decode_checkpoint(&bytes).is_err());
}
