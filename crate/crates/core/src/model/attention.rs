//! Sentence-level reweighting of word attention and the copy distribution.

use super::tensor::Tensor;

/// Denominator below which fusion falls back to the unfused attention.
pub const FUSION_EPS: f64 = 1e-12;

/// Multiplies each word's attention by the score of the sentence it belongs
/// to and renormalises:
///
/// `fused[m] = attn[m] * scores[map[m]] / Σ_k attn[k] * scores[map[k]]`
///
/// If the denominator is below [`FUSION_EPS`] the input attention is
/// returned unchanged.
pub fn fuse_attention(word_attention: &[f64], sentence_scores: &[f64], sentence_map: &[usize]) -> Vec<f64> {
    fuse_with_guard(word_attention, sentence_scores, sentence_map).0
}

/// Fused attention, plus whether the degenerate-denominator fallback fired.
pub(crate) fn fuse_with_guard(
    word_attention: &[f64],
    sentence_scores: &[f64],
    sentence_map: &[usize],
) -> (Vec<f64>, bool) {
    debug_assert_eq!(word_attention.len(), sentence_map.len());
    let weighted: Vec<f64> = word_attention
        .iter()
        .zip(sentence_map)
        .map(|(a, &i)| a * sentence_scores[i])
        .collect();
    let z: f64 = weighted.iter().sum();
    if z < FUSION_EPS {
        return (word_attention.to_vec(), true);
    }
    (weighted.into_iter().map(|w| w / z).collect(), false)
}

/// `Σ_m attention[m] · word_reps[m]`.
pub fn context_vector(attention: &[f64], word_reps: &Tensor) -> Vec<f64> {
    debug_assert_eq!(attention.len(), word_reps.rows());
    let mut out = vec![0.0; word_reps.cols()];
    for (m, &a) in attention.iter().enumerate() {
        for (o, x) in out.iter_mut().zip(word_reps.row(m)) {
            *o += a * x;
        }
    }
    out
}

/// Pointer-generator mixture over the extended vocabulary:
/// `p_gen · P_vocab(w) + (1 − p_gen) · Σ_{m: src[m] = w} attention[m]`.
pub fn mix_copy_distribution(
    p_gen: f64,
    vocab_dist: &[f64],
    attention: &[f64],
    source_ext_ids: &[usize],
    extended_size: usize,
) -> Vec<f64> {
    debug_assert!(extended_size >= vocab_dist.len());
    let mut out = vec![0.0; extended_size];
    for (o, p) in out.iter_mut().zip(vocab_dist) {
        *o = p_gen * p;
    }
    for (&id, &a) in source_ext_ids.iter().zip(attention) {
        out[id] += (1.0 - p_gen) * a;
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn worked_example() {
        // 0.5*0.8 / (0.5*0.8 + 0.5*0.2) and 0.1 / 0.5
        let fused = fuse_attention(&[0.5, 0.5], &[0.8, 0.2], &[0, 1]);
        assert_eq!(fused, vec![0.8, 0.2]);
    }

    #[test]
    fn equal_scores_are_identity() {
        let a = [0.1, 0.2, 0.3, 0.4];
        let fused = fuse_attention(&a, &[0.7, 0.7], &[0, 0, 1, 1]);
        for (x, y) in fused.iter().zip(a) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn near_zero_score_eliminates_sentence() {
        let mut prev = 0.0;
        for eps in [1e-2, 1e-4, 1e-8] {
            let fused = fuse_attention(&[0.3, 0.7], &[1.0 - eps, eps], &[0, 1]);
            assert!(fused[0] > prev);
            prev = fused[0];
        }
        assert!(prev > 1.0 - 1e-6);
    }

    #[test]
    fn degenerate_denominator_falls_back() {
        let (fused, guarded) = fuse_with_guard(&[0.4, 0.6], &[0.0, 0.0], &[0, 1]);
        assert!(guarded);
        assert_eq!(fused, vec![0.4, 0.6]);
    }

    #[test]
    fn context_examples() {
        let reps = Tensor::from_vec(3, 2, vec![1., 2., 3., 4., 5., 6.]);
        assert_eq!(context_vector(&[0., 1., 0.], &reps), vec![3., 4.]);
        let same = Tensor::from_vec(3, 2, vec![1., -1., 1., -1., 1., -1.]);
        let c = context_vector(&[1. / 3.; 3], &same);
        assert!((c[0] - 1.0).abs() < 1e-12 && (c[1] + 1.0).abs() < 1e-12);
    }

    #[test]
    fn context_matches_naive_loop() {
        let reps = Tensor::from_vec(4, 3, (0..12).map(|i| (i as f64).sin()).collect());
        let att = [0.1, 0.2, 0.3, 0.4];
        let got = context_vector(&att, &reps);
        for j in 0..3 {
            let mut s = 0.0;
            for m in 0..4 {
                s += att[m] * reps.get(m, j);
            }
            assert!((got[j] - s).abs() < 1e-12);
        }
    }

    #[test]
    fn copy_mixture_gate_extremes() {
        let vocab = [0.2, 0.3, 0.5];
        let att = [0.0, 1.0, 0.0];
        let src = [0, 4, 1];
        assert_eq!(mix_copy_distribution(1.0, &vocab, &att, &src, 5), vec![0.2, 0.3, 0.5, 0.0, 0.0]);
        let copy = mix_copy_distribution(0.0, &vocab, &att, &src, 5);
        assert_eq!(copy[4], 1.0);
    }

    fn simplex(n: usize) -> impl Strategy<Value = Vec<f64>> {
        proptest::collection::vec(0.001f64..1.0, n).prop_map(|v| {
            let z: f64 = v.iter().sum();
            v.into_iter().map(|x| x / z).collect()
        })
    }

    proptest! {
        #[test]
        fn fused_stays_on_simplex(
            att in simplex(12),
            scores in proptest::collection::vec(1e-6f64..1.0, 3),
            k in 0.01f64..50.0,
        ) {
            let map: Vec<usize> = (0..12).map(|m| m / 4).collect();
            let fused = fuse_attention(&att, &scores, &map);
            prop_assert!((fused.iter().sum::<f64>() - 1.0).abs() < 1e-6);
            // invariant to rescaling the scores
            let scaled: Vec<f64> = scores.iter().map(|s| s * k).collect();
            let again = fuse_attention(&att, &scaled, &map);
            for (a, b) in fused.iter().zip(&again) {
                prop_assert!((a - b).abs() < 1e-9);
            }
            // within-sentence ratios preserved
            for m in 0..12 {
                for n in 0..12 {
                    if map[m] == map[n] {
                        let lhs = fused[m] / fused[n];
                        let rhs = att[m] / att[n];
                        prop_assert!((lhs - rhs).abs() <= 1e-9 * rhs.abs().max(1.0));
                    }
                }
            }
        }

        #[test]
        fn copy_mixture_sums_to_one(
            gate in 0.0f64..=1.0,
            vocab in simplex(6),
            att in simplex(5),
        ) {
            let src = [0, 6, 2, 7, 6];
            let p = mix_copy_distribution(gate, &vocab, &att, &src, 8);
            prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        }
    }
}
