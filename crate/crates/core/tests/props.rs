//! Property tests for the library's structural invariants.

use proptest::prelude::*;

use wd_core::data::{gen_synthetic, Batcher, TaskKind};
use wd_core::metrics::corpus_bleu;
use wd_core::model::{Part, WeightClass};
use wd_core::taxonomy::{split, WeightGroup};
use wd_core::tensor::{Graph, Tensor};

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    /// Softmax rows sum to one (within 1e-12) for arbitrary finite inputs
    /// and masks, and masked entries are exactly zero.
    #[test]
    fn softmax_rows_always_normalize(
        rows in 1usize..6,
        cols in 2usize..8,
        values in prop::collection::vec(-30.0f64..30.0, 48),
        mask_bits in prop::collection::vec(any::<bool>(), 48),
    ) {
        let n = rows * cols;
        let data: Vec<f64> = values.iter().cycle().take(n).copied().collect();
        let mut mask: Vec<bool> = mask_bits.iter().cycle().take(n).copied().collect();
        // Keep at least one entry alive per row.
        for r in 0..rows {
            mask[r * cols] = false;
        }
        let mut g = Graph::new();
        let x = g.constant(Tensor::from_vec(&[rows, cols], data).unwrap());
        let p = g.softmax_rows(x, Some(&mask)).unwrap();
        let out = g.value(p).data();
        for r in 0..rows {
            let sum: f64 = out[r * cols..(r + 1) * cols].iter().sum();
            prop_assert!((sum - 1.0).abs() < 1e-12, "row {r} sums to {sum}");
        }
        for (i, &m) in mask.iter().enumerate() {
            if m {
                prop_assert_eq!(out[i], 0.0);
            }
        }
    }

    /// For divisible depth pairs, splitting partitions the layer list into
    /// contiguous, ordered subsets whose concatenation is the original.
    #[test]
    fn split_partitions_divisible_groups(
        chunk in 1usize..5,
        student_depth in 1usize..5,
    ) {
        let teacher_depth = chunk * student_depth;
        let group = WeightGroup {
            part: Part::Decoder,
            class: WeightClass::SelfAttnWv,
            layers: (0..teacher_depth as i32).collect(),
        };
        let plans = split(&group, student_depth).unwrap();
        prop_assert_eq!(plans.len(), student_depth);
        let flat: Vec<i32> = plans.iter().flat_map(|p| p.source_layers.clone()).collect();
        let expect: Vec<i32> = (0..teacher_depth as i32).collect();
        prop_assert_eq!(flat, expect);
        for plan in &plans {
            prop_assert_eq!(plan.source_layers.len(), chunk);
        }
    }

    /// Every epoch's batches cover the filtered corpus exactly once,
    /// regardless of batch size, length cap, or shuffling seed.
    #[test]
    fn batches_cover_corpus_exactly(
        n in 1usize..40,
        batch_size in 1usize..9,
        max_len in 4usize..10,
        seed in 0u64..1000,
        epoch in 0usize..4,
    ) {
        let corpus = gen_synthetic(TaskKind::Reverse, n, (2, 6), 9, seed).unwrap();
        let batcher = match Batcher::new(&corpus, batch_size, max_len) {
            Ok(b) => b,
            // Everything filtered out is a legal outcome for short caps.
            Err(_) => return Ok(()),
        };
        let mut seen = vec![0usize; corpus.len()];
        for batch in batcher.epoch_batches(&corpus, seed, epoch) {
            for &idx in &batch.pair_idx {
                seen[idx] += 1;
            }
        }
        for (idx, &count) in seen.iter().enumerate() {
            let (src, tgt) = &corpus.pairs[idx];
            let kept = src.len() <= max_len && tgt.len() <= max_len;
            prop_assert_eq!(count, usize::from(kept), "pair {}", idx);
        }
        prop_assert_eq!(
            batcher.kept() + batcher.dropped(),
            corpus.len()
        );
    }

    /// BLEU is 100 exactly when hypothesis and reference agree tokenwise,
    /// and below 100 for any single-token corruption (lengths >= 4).
    #[test]
    fn bleu_is_100_iff_identical(
        len in 4usize..12,
        seed in 0u64..500,
        flip in 0usize..12,
    ) {
        let corpus = gen_synthetic(TaskKind::Copy, 3, (len, len), 12, seed).unwrap();
        let refs = corpus.target_contents();
        prop_assert_eq!(corpus_bleu(&refs, &refs, 4).unwrap(), 100.0);

        let mut hyps = refs.clone();
        let pos = flip % hyps[0].len();
        // Corrupt one token to a value outside the generated alphabet.
        hyps[0][pos] = 2;
        prop_assert!(corpus_bleu(&hyps, &refs, 4).unwrap() < 100.0);
    }
}
