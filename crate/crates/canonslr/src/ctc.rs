//! Connectionist temporal classification: exact log-space forward-backward
//! loss with analytic gradient, the collapsing operator, greedy decoding,
//! and prefix beam search.
//!
//! Logits are [T', C] with the blank class at index `blank` (the vocabulary
//! size; gloss classes occupy the lower indices).

use std::collections::BTreeMap;

use ndarray::{Array2, ArrayView2};

use crate::error::{Error, Result};
use crate::numutil::{log_softmax_rows, lse2};

/// Collapses an alignment path: merges adjacent repeats, then removes
/// blanks.
pub fn collapse(path: &[usize], blank: usize) -> Vec<usize> {
    let mut out = Vec::new();
    let mut prev: Option<usize> = None;
    for &s in path {
        if prev != Some(s) && s != blank {
            out.push(s);
        }
        prev = Some(s);
    }
    out
}

/// Minimum alignment length for a target: one frame per gloss plus one
/// separating blank per adjacent equal pair.
pub fn min_alignment_frames(target: &[usize]) -> usize {
    let pairs = target.windows(2).filter(|w| w[0] == w[1]).count();
    target.len() + pairs
}

fn validate_inputs(logits: &ArrayView2<f64>, target: &[usize], blank: usize) -> Result<()> {
    let (t, c) = logits.dim();
    if blank != c - 1 {
        return Err(Error::invalid(format!(
            "blank index {blank} must be the last of {c} classes"
        )));
    }
    if logits.iter().any(|v| v.is_nan()) {
        return Err(Error::invalid("logits contain NaN"));
    }
    if target.iter().any(|&g| g >= blank) {
        return Err(Error::invalid("target contains blank or out-of-range class"));
    }
    if t < min_alignment_frames(target) {
        return Err(Error::infeasible(format!(
            "target of length {} (minimum alignment {}) cannot fit in {} frames",
            target.len(),
            min_alignment_frames(target),
            t
        )));
    }
    Ok(())
}

/// CTC negative log likelihood and its gradient with respect to the logits.
///
/// The loss is the negative log of the total probability of every alignment
/// path that collapses to `target`, under independent per-frame softmax,
/// computed by the forward-backward recursion in log space.
pub fn ctc_loss_grad(
    logits: &ArrayView2<f64>,
    target: &[usize],
    blank: usize,
) -> Result<(f64, Array2<f64>)> {
    validate_inputs(logits, target, blank)?;
    let (t_len, classes) = logits.dim();
    let lsm = log_softmax_rows(logits);

    // Extended target with interleaved blanks: [b, y1, b, y2, ..., b].
    let l = 2 * target.len() + 1;
    let ext = |s: usize| -> usize {
        if s % 2 == 0 {
            blank
        } else {
            target[s / 2]
        }
    };

    let neg = f64::NEG_INFINITY;
    let mut alpha = Array2::<f64>::from_elem((t_len, l), neg);
    alpha[[0, 0]] = lsm[[0, ext(0)]];
    if l > 1 {
        alpha[[0, 1]] = lsm[[0, ext(1)]];
    }
    for t in 1..t_len {
        for s in 0..l {
            let mut acc = alpha[[t - 1, s]];
            if s >= 1 {
                acc = lse2(acc, alpha[[t - 1, s - 1]]);
            }
            if s >= 2 && ext(s) != blank && ext(s) != ext(s - 2) {
                acc = lse2(acc, alpha[[t - 1, s - 2]]);
            }
            if acc != neg {
                alpha[[t, s]] = acc + lsm[[t, ext(s)]];
            }
        }
    }
    let log_p = if l > 1 {
        lse2(alpha[[t_len - 1, l - 1]], alpha[[t_len - 1, l - 2]])
    } else {
        alpha[[t_len - 1, l - 1]]
    };
    let loss = -log_p;

    // Backward scores, emission at t included, mirroring the forward pass.
    let mut beta = Array2::<f64>::from_elem((t_len, l), neg);
    beta[[t_len - 1, l - 1]] = lsm[[t_len - 1, ext(l - 1)]];
    if l > 1 {
        beta[[t_len - 1, l - 2]] = lsm[[t_len - 1, ext(l - 2)]];
    }
    for t in (0..t_len - 1).rev() {
        for s in 0..l {
            let mut acc = beta[[t + 1, s]];
            if s + 1 < l {
                acc = lse2(acc, beta[[t + 1, s + 1]]);
            }
            if s + 2 < l && ext(s + 2) != blank && ext(s + 2) != ext(s) {
                acc = lse2(acc, beta[[t + 1, s + 2]]);
            }
            if acc != neg {
                beta[[t, s]] = acc + lsm[[t, ext(s)]];
            }
        }
    }

    // grad[t, c] = softmax[t, c] - occupancy(t, c) / p, where occupancy
    // divides out the doubled emission shared by alpha and beta.
    let mut grad = Array2::<f64>::zeros((t_len, classes));
    let mut class_mass = vec![neg; classes];
    for t in 0..t_len {
        class_mass.iter_mut().for_each(|m| *m = neg);
        for s in 0..l {
            let ab = alpha[[t, s]] + beta[[t, s]];
            if ab != neg {
                let c = ext(s);
                class_mass[c] = lse2(class_mass[c], ab);
            }
        }
        for c in 0..classes {
            let y = lsm[[t, c]].exp();
            let occupancy = if class_mass[c] == neg {
                0.0
            } else {
                (class_mass[c] - log_p - lsm[[t, c]]).exp()
            };
            grad[[t, c]] = y - occupancy;
        }
    }
    Ok((loss, grad))
}

/// Per-frame argmax (ties to the lower class index) followed by collapse.
pub fn greedy_decode(logits: &ArrayView2<f64>, blank: usize) -> Vec<usize> {
    let path: Vec<usize> = logits
        .rows()
        .into_iter()
        .map(|row| {
            let mut best = 0;
            for (i, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = i;
                }
            }
            best
        })
        .collect();
    collapse(&path, blank)
}

/// Prefix beam search: maintains per-prefix probability mass split between
/// "ends in blank" and "ends in the final symbol", merging paths that
/// collapse to the same prefix. Ties in pruning and in the final argmax
/// break toward the lexicographically smaller prefix, so decoding is
/// deterministic even on uniform logits.
pub fn beam_decode(
    logits: &ArrayView2<f64>,
    blank: usize,
    beam_width: usize,
) -> Result<Vec<usize>> {
    if beam_width == 0 {
        return Err(Error::invalid("beam width must be at least 1"));
    }
    let (t_len, classes) = logits.dim();
    if blank != classes - 1 {
        return Err(Error::invalid(format!(
            "blank index {blank} must be the last of {classes} classes"
        )));
    }
    if logits.iter().any(|v| v.is_nan()) {
        return Err(Error::invalid("logits contain NaN"));
    }
    let lsm = log_softmax_rows(logits);
    let neg = f64::NEG_INFINITY;

    // prefix -> (log mass ending in blank, log mass ending in non-blank)
    let mut beams: BTreeMap<Vec<usize>, (f64, f64)> = BTreeMap::new();
    beams.insert(Vec::new(), (0.0, neg));

    for t in 0..t_len {
        let mut next: BTreeMap<Vec<usize>, (f64, f64)> = BTreeMap::new();
        for (prefix, &(pb, pnb)) in &beams {
            let total = lse2(pb, pnb);
            for c in 0..classes {
                let p = lsm[[t, c]];
                if c == blank {
                    let slot = next.entry(prefix.clone()).or_insert((neg, neg));
                    slot.0 = lse2(slot.0, total + p);
                } else if prefix.last() == Some(&c) {
                    let slot = next.entry(prefix.clone()).or_insert((neg, neg));
                    slot.1 = lse2(slot.1, pnb + p);
                    let mut extended = prefix.clone();
                    extended.push(c);
                    let slot = next.entry(extended).or_insert((neg, neg));
                    slot.1 = lse2(slot.1, pb + p);
                } else {
                    let mut extended = prefix.clone();
                    extended.push(c);
                    let slot = next.entry(extended).or_insert((neg, neg));
                    slot.1 = lse2(slot.1, total + p);
                }
            }
        }
        let mut ranked: Vec<(Vec<usize>, (f64, f64))> = next.into_iter().collect();
        ranked.sort_by(|a, b| {
            let sa = lse2(a.1 .0, a.1 .1);
            let sb = lse2(b.1 .0, b.1 .1);
            sb.partial_cmp(&sa).unwrap().then_with(|| a.0.cmp(&b.0))
        });
        ranked.truncate(beam_width);
        beams = ranked.into_iter().collect();
    }

    let mut best: Option<(Vec<usize>, f64)> = None;
    for (prefix, (pb, pnb)) in beams {
        let score = lse2(pb, pnb);
        let better = match &best {
            None => true,
            Some((bp, bs)) => score > *bs || (score == *bs && prefix < *bp),
        };
        if better {
            best = Some((prefix, score));
        }
    }
    Ok(best.map(|(p, _)| p).unwrap_or_default())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::grad_rel_err;
    use ndarray::{arr2, Array2};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    const A: usize = 0;
    const B: usize = 1;

    fn random_logits(t: usize, c: usize, rng: &mut ChaCha8Rng) -> Array2<f64> {
        Array2::from_shape_fn((t, c), |_| rng.gen_range(-2.0..2.0))
    }

    /// Sums the probability of every full-length path that collapses to
    /// `target` by brute-force enumeration.
    fn brute_force_target_prob(logits: &ArrayView2<f64>, target: &[usize], blank: usize) -> f64 {
        let (t, c) = logits.dim();
        let lsm = log_softmax_rows(logits);
        let mut total = f64::NEG_INFINITY;
        let paths = (c as u64).pow(t as u32);
        for code in 0..paths {
            let mut path = Vec::with_capacity(t);
            let mut rem = code;
            for _ in 0..t {
                path.push((rem % c as u64) as usize);
                rem /= c as u64;
            }
            if collapse(&path, blank) == target {
                let lp: f64 = path.iter().enumerate().map(|(i, &s)| lsm[[i, s]]).sum();
                total = lse2(total, lp);
            }
        }
        total.exp()
    }

    /// Exact marginal argmax over collapsed sequences by enumeration.
    fn brute_force_best(logits: &ArrayView2<f64>, blank: usize) -> Vec<usize> {
        let (t, c) = logits.dim();
        let lsm = log_softmax_rows(logits);
        let mut mass: BTreeMap<Vec<usize>, f64> = BTreeMap::new();
        let paths = (c as u64).pow(t as u32);
        for code in 0..paths {
            let mut path = Vec::with_capacity(t);
            let mut rem = code;
            for _ in 0..t {
                path.push((rem % c as u64) as usize);
                rem /= c as u64;
            }
            let lp: f64 = path.iter().enumerate().map(|(i, &s)| lsm[[i, s]]).sum();
            let slot = mass.entry(collapse(&path, blank)).or_insert(f64::NEG_INFINITY);
            *slot = lse2(*slot, lp);
        }
        mass.into_iter()
            .max_by(|a, b| a.1.partial_cmp(&b.1).unwrap())
            .map(|(k, _)| k)
            .unwrap()
    }

    #[test]
    fn collapse_merges_repeats_then_removes_blanks() {
        let blank = 2;
        assert_eq!(collapse(&[A, A, blank, B], blank), vec![A, B]);
        assert_eq!(collapse(&[blank, blank], blank), Vec::<usize>::new());
        assert_eq!(collapse(&[A, blank, A], blank), vec![A, A]);
    }

    #[test]
    fn collapse_idempotent_on_clean_sequences() {
        let blank = 5;
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..100 {
            let len = rng.gen_range(1..8);
            let mut seq = Vec::new();
            for _ in 0..len {
                let mut s = rng.gen_range(0..5);
                while Some(&s) == seq.last() {
                    s = rng.gen_range(0..5);
                }
                seq.push(s);
            }
            assert_eq!(collapse(&seq, blank), seq);
        }
    }

    #[test]
    fn single_frame_loss_is_negative_log_prob() {
        let logits = arr2(&[[0.7f64.ln(), 0.2f64.ln(), 0.1f64.ln()]]);
        let (loss, _) = ctc_loss_grad(&logits.view(), &[A], 2).unwrap();
        assert!((loss - (-(0.7f64.ln()))).abs() < 1e-12);
        assert!((loss - 0.35667).abs() < 1e-5);
    }

    #[test]
    fn two_frame_uniform_loss_is_ln3() {
        // Valid paths for target [a] in 2 frames over {a, b, blank}:
        // (a,a), (a,-), (-,a); each has probability 1/9.
        let logits = Array2::<f64>::zeros((2, 3));
        let (loss, _) = ctc_loss_grad(&logits.view(), &[A], 2).unwrap();
        assert!((loss - 3f64.ln()).abs() < 1e-10);
    }

    #[test]
    fn infeasible_targets_rejected() {
        let logits = Array2::<f64>::zeros((1, 3));
        let err = ctc_loss_grad(&logits.view(), &[A, A], 2).unwrap_err();
        assert!(matches!(err, Error::Feasibility(_)));
        let logits = Array2::<f64>::zeros((2, 3));
        assert!(ctc_loss_grad(&logits.view(), &[A, A], 2).is_err());
        let logits = Array2::<f64>::zeros((3, 3));
        assert!(ctc_loss_grad(&logits.view(), &[A, A], 2).is_ok());
    }

    #[test]
    fn nan_logits_rejected() {
        let mut logits = Array2::<f64>::zeros((2, 3));
        logits[[1, 1]] = f64::NAN;
        let err = ctc_loss_grad(&logits.view(), &[A], 2).unwrap_err();
        assert!(matches!(err, Error::InvalidArgument(_)));
    }

    #[test]
    fn loss_matches_brute_force_enumeration() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for v in [2usize, 3] {
            let blank = v;
            let classes = v + 1;
            for t in 1..=6 {
                for _ in 0..8 {
                    let logits = random_logits(t, classes, &mut rng);
                    let m = rng.gen_range(1..=3.min(t));
                    let target: Vec<usize> = (0..m).map(|_| rng.gen_range(0..v)).collect();
                    if t < min_alignment_frames(&target) {
                        continue;
                    }
                    let (loss, _) = ctc_loss_grad(&logits.view(), &target, blank).unwrap();
                    let oracle = brute_force_target_prob(&logits.view(), &target, blank);
                    assert!(
                        ((-loss).exp() - oracle).abs() < 1e-10,
                        "T={t} V={v} target {target:?}: exp(-loss)={} oracle={oracle}",
                        (-loss).exp()
                    );
                    assert!(loss >= 0.0);
                }
            }
        }
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for (t, v, target) in [(5, 3, vec![0, 2, 1]), (4, 2, vec![1, 1]), (6, 3, vec![2])] {
            let classes = v + 1;
            let logits = random_logits(t, classes, &mut rng);
            let (_, grad) = ctc_loss_grad(&logits.view(), &target, v).unwrap();
            let mut flat: Vec<f64> = logits.iter().copied().collect();
            let fd = crate::autodiff::finite_difference(&mut flat, 1e-6, |p| {
                let l = Array2::from_shape_vec((t, classes), p.to_vec()).unwrap();
                ctc_loss_grad(&l.view(), &target, v).unwrap().0
            });
            for (a, f) in grad.iter().zip(fd.iter()) {
                assert!(
                    grad_rel_err(*a, *f) < 1e-5,
                    "analytic {a} vs fd {f} (T={t} target {target:?})"
                );
            }
        }
    }

    #[test]
    fn greedy_decode_follows_argmax_and_collapse() {
        let blank = 2;
        // argmax path: a, a, blank, b
        let logits = arr2(&[
            [5.0, 0.0, 0.0],
            [5.0, 1.0, 0.0],
            [0.0, 0.0, 5.0],
            [0.0, 5.0, 0.0],
        ]);
        assert_eq!(greedy_decode(&logits.view(), blank), vec![A, B]);

        let all_blank = arr2(&[[0.0, 0.0, 5.0], [0.0, 0.0, 5.0]]);
        assert_eq!(greedy_decode(&all_blank.view(), blank), Vec::<usize>::new());

        let one = arr2(&[[5.0, 0.0, 0.0]]);
        assert_eq!(greedy_decode(&one.view(), blank), vec![A]);

        // Ties break to the lower class index.
        let tie = arr2(&[[1.0, 1.0, 0.0]]);
        assert_eq!(greedy_decode(&tie.view(), 2), vec![A]);
    }

    #[test]
    fn narrow_beam_equals_greedy_on_peaked_logits() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        for _ in 0..20 {
            let t = rng.gen_range(2..6);
            let mut logits = Array2::<f64>::zeros((t, 4));
            for ti in 0..t {
                logits[[ti, rng.gen_range(0..4)]] = 12.0;
            }
            let g = greedy_decode(&logits.view(), 3);
            let b = beam_decode(&logits.view(), 3, 1).unwrap();
            assert_eq!(g, b);
        }
    }

    #[test]
    fn wide_beam_matches_exhaustive_marginal_argmax() {
        let mut rng = ChaCha8Rng::seed_from_u64(29);
        for _ in 0..20 {
            let logits = random_logits(3, 3, &mut rng);
            let beam = beam_decode(&logits.view(), 2, 64).unwrap();
            let oracle = brute_force_best(&logits.view(), 2);
            assert_eq!(beam, oracle, "logits {logits:?}");
        }
        for _ in 0..10 {
            let logits = random_logits(4, 4, &mut rng);
            let beam = beam_decode(&logits.view(), 3, 256).unwrap();
            let oracle = brute_force_best(&logits.view(), 3);
            assert_eq!(beam, oracle);
        }
    }

    #[test]
    fn uniform_logits_decode_deterministically() {
        let logits = Array2::<f64>::zeros((4, 4));
        let a = beam_decode(&logits.view(), 3, 8).unwrap();
        let b = beam_decode(&logits.view(), 3, 8).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn zero_beam_width_rejected() {
        let logits = Array2::<f64>::zeros((2, 3));
        assert!(beam_decode(&logits.view(), 2, 0).is_err());
    }

    #[test]
    fn loss_small_when_mass_concentrated_on_target_paths() {
        // Strongly peaked on the path (a, blank, b): loss must be near zero
        // but strictly positive since softmax never reaches probability 1.
        let logits = arr2(&[
            [30.0, 0.0, 0.0],
            [0.0, 0.0, 30.0],
            [0.0, 30.0, 0.0],
        ]);
        let (loss, _) = ctc_loss_grad(&logits.view(), &[A, B], 2).unwrap();
        assert!(loss > 0.0);
        assert!(loss < 1e-9);
    }
}
