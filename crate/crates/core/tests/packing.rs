mod common;

use proptest::prelude::*;
use siu_core::databuild::{pack_and_chunk, tokenize_with_mask, PackedBatchSet};
use siu_core::tokenizer::Tokenizer;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn packing_invariants(seed in any::<u64>()) {
        if let Err(e) = common::check_packing(seed) {
            prop_assert!(false, "{}", e);
        }
    }

    #[test]
    fn bpe_packing_conserves_mask(seed in any::<u64>(), batch in 1usize..4, seq_len in 4usize..64) {
        let samples = common::random_samples(seed);
        let tok = Tokenizer::train_bpe(samples.iter().map(|s| s.full_text.as_str()), 50);
        let seqs: Vec<_> = samples.iter().map(|s| tokenize_with_mask(s, &tok).unwrap()).collect();
        let packed = pack_and_chunk(&seqs, batch, seq_len, seed, &tok.spec()).unwrap();
        prop_assert_eq!(packed.total_masked(), seqs.iter().map(|s| s.masked_count()).sum::<usize>());
        // every loss span is covered by the decoded masked tokens of its sample
        for (s, q) in samples.iter().zip(&seqs) {
            let ids: Vec<u32> = q.ids.iter().zip(&q.loss_mask).filter(|(_, &m)| m).map(|(&i, _)| i).collect();
            let text = String::from_utf8_lossy(&tok.decode_bytes(&ids)).into_owned();
            prop_assert!(text.contains(s.loss_text()));
        }
    }

    #[test]
    fn roundtrip_through_files(seed in any::<u64>()) {
        let tok = Tokenizer::byte_level();
        let seqs: Vec<_> = common::random_samples(seed).iter().map(|s| tokenize_with_mask(s, &tok).unwrap()).collect();
        let packed = pack_and_chunk(&seqs, 2, 32, seed, &tok.spec()).unwrap();
        let mut bin = Vec::new();
        packed.write_binary(&mut bin).unwrap();
        prop_assert_eq!(&PackedBatchSet::read_binary(bin.as_slice()).unwrap(), &packed);
        let mut js = Vec::new();
        packed.write_jsonl(&mut js).unwrap();
        prop_assert_eq!(&PackedBatchSet::read_jsonl(js.as_slice()).unwrap(), &packed);
    }
}
