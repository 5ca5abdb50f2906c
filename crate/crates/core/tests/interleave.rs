use gelina_core::interleave::{
    build_stream, mask_for_pretrain, slot_modality, split_stream, Modality, TokenStream,
};
use proptest::prelude::*;

fn valid_pair() -> impl Strategy<Value = (Vec<usize>, Vec<usize>)> {
    (0usize..200).prop_flat_map(|n| {
        (
            proptest::collection::vec(0usize..256, n),
            proptest::collection::vec(0usize..64, n / 15),
        )
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(500))]

    #[test]
    fn build_split_roundtrip((speech, gesture) in valid_pair()) {
        let s = build_stream(&speech, &gesture).unwrap();
        prop_assert_eq!(split_stream(&s).unwrap(), (speech, gesture));
        s.validate_vocab(256, 64).unwrap();
    }

    #[test]
    fn positional_law_holds((speech, gesture) in valid_pair()) {
        let s = build_stream(&speech, &gesture).unwrap();
        for (p, e) in s.body().iter().enumerate() {
            prop_assert_eq!(e.modality == Modality::Gesture, (p + 1) % 16 == 0);
            prop_assert_eq!(e.modality, slot_modality(p + 1));
        }
    }

    #[test]
    fn masking_preserves_layout((speech, gesture) in valid_pair(), seed in any::<u64>()) {
        let s = build_stream(&speech, &gesture).unwrap();
        let (m, mask) = mask_for_pretrain(&s, 64, seed);
        prop_assert_eq!(m.len(), s.len());
        prop_assert_eq!(mask.0.len(), s.len());
        prop_assert_eq!(mask.count_false(), gesture.len());
        prop_assert!(m.entries.iter().zip(&s.entries).all(|(a, b)| a.modality == b.modality));
        prop_assert!(m.body().iter().all(|e| e.token < 256));
    }

    #[test]
    fn serialization_roundtrip((speech, gesture) in valid_pair()) {
        let s = build_stream(&speech, &gesture).unwrap();
        prop_assert_eq!(TokenStream::from_bytes(&s.to_bytes().unwrap()).unwrap(), s);
    }
}
