//! Word error rate with substitution/insertion/deletion decomposition.

use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};

/// Error counts from one minimum-cost alignment of hypothesis to reference.
///
/// A deletion is a reference gloss absent from the hypothesis; an insertion
/// is a hypothesis gloss with no reference counterpart.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub struct EditBreakdown {
    pub sub: usize,
    pub ins: usize,
    pub del: usize,
    pub ref_len: usize,
}

impl EditBreakdown {
    pub fn distance(&self) -> usize {
        self.sub + self.ins + self.del
    }

    pub fn wer(&self) -> f64 {
        self.distance() as f64 / self.ref_len as f64
    }

    pub fn accumulate(&mut self, other: &EditBreakdown) {
        self.sub += other.sub;
        self.ins += other.ins;
        self.del += other.del;
        self.ref_len += other.ref_len;
    }
}

/// Minimum edit distance with unit costs, decomposed deterministically.
///
/// Among all minimum-cost alignments the one with the most aligned
/// (diagonal) steps is chosen, which prefers substitutions over
/// insertion/deletion pairs and makes the decomposition symmetric: swapping
/// the arguments swaps ins and del and preserves sub.
pub fn edit_breakdown(reference: &[usize], hypothesis: &[usize]) -> Result<EditBreakdown> {
    if reference.is_empty() {
        return Err(Error::invalid("reference sequence must not be empty"));
    }
    let n = reference.len();
    let m = hypothesis.len();

    // cost[i][j]: edit distance between reference[..i] and hypothesis[..j].
    // diag[i][j]: most diagonal steps on any minimum-cost alignment.
    let mut cost = vec![vec![0usize; m + 1]; n + 1];
    let mut diag = vec![vec![0usize; m + 1]; n + 1];
    for i in 0..=n {
        cost[i][0] = i;
    }
    for j in 0..=m {
        cost[0][j] = j;
    }
    for i in 1..=n {
        for j in 1..=m {
            let sub_cost = usize::from(reference[i - 1] != hypothesis[j - 1]);
            let via_diag = cost[i - 1][j - 1] + sub_cost;
            let via_del = cost[i - 1][j] + 1;
            let via_ins = cost[i][j - 1] + 1;
            let best = via_diag.min(via_del).min(via_ins);
            cost[i][j] = best;
            let mut d = 0;
            if via_diag == best {
                d = d.max(diag[i - 1][j - 1] + 1);
            }
            if via_del == best {
                d = d.max(diag[i - 1][j]);
            }
            if via_ins == best {
                d = d.max(diag[i][j - 1]);
            }
            diag[i][j] = d;
        }
    }

    let distance = cost[n][m];
    let aligned = diag[n][m];
    let del = n - aligned;
    let ins = m - aligned;
    let sub = distance - del - ins;
    Ok(EditBreakdown {
        sub,
        ins,
        del,
        ref_len: n,
    })
}

/// Corpus-level aggregation: error counts and reference lengths are summed
/// over pairs before dividing, rather than averaging per-pair rates.
pub fn corpus_wer(pairs: &[(Vec<usize>, Vec<usize>)]) -> Result<EditBreakdown> {
    if pairs.is_empty() {
        return Err(Error::invalid("corpus_wer needs at least one pair"));
    }
    let mut total = EditBreakdown::default();
    for (i, (reference, hypothesis)) in pairs.iter().enumerate() {
        if reference.is_empty() {
            return Err(Error::invalid(format!("pair {i} has an empty reference")));
        }
        total.accumulate(&edit_breakdown(reference, hypothesis)?);
    }
    Ok(total)
}

/// One row of a WER report table.
#[derive(Clone, Debug)]
pub struct ReportRow {
    pub label: String,
    pub wer: f64,
    pub breakdown: EditBreakdown,
    pub n_samples: usize,
}

/// Writes rows as a tab-separated table with a header line:
/// view/category, WER, del, ins, sub, n_samples.
pub fn write_wer_report(path: &Path, rows: &[ReportRow]) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = std::io::BufWriter::new(file);
    writeln!(w, "view\twer\tdel\tins\tsub\tn_samples").map_err(|e| Error::io(path, e))?;
    for row in rows {
        writeln!(
            w,
            "{}\t{:.4}\t{}\t{}\t{}\t{}",
            row.label, row.wer, row.breakdown.del, row.breakdown.ins, row.breakdown.sub, row.n_samples
        )
        .map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    const A: usize = 0;
    const B: usize = 1;
    const C: usize = 2;
    const X: usize = 3;

    /// Independent plain Levenshtein distance with a rolling row, used as
    /// an oracle for the total count.
    fn plain_distance(a: &[usize], b: &[usize]) -> usize {
        let mut prev: Vec<usize> = (0..=b.len()).collect();
        for (i, &ai) in a.iter().enumerate() {
            let mut cur = vec![i + 1; b.len() + 1];
            for (j, &bj) in b.iter().enumerate() {
                let sub = prev[j] + usize::from(ai != bj);
                cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
            }
            prev = cur;
        }
        prev[b.len()]
    }

    #[test]
    fn identical_sequences_have_zero_wer() {
        let e = edit_breakdown(&[A, B, C], &[A, B, C]).unwrap();
        assert_eq!((e.sub, e.ins, e.del), (0, 0, 0));
        assert_eq!(e.wer(), 0.0);
    }

    #[test]
    fn missing_hypothesis_word_is_a_deletion() {
        let e = edit_breakdown(&[A, B, C], &[A, C]).unwrap();
        assert_eq!((e.sub, e.ins, e.del), (0, 0, 1));
        assert!((e.wer() - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn replaced_word_is_a_substitution() {
        let e = edit_breakdown(&[A, B, C], &[A, X, C]).unwrap();
        assert_eq!((e.sub, e.ins, e.del), (1, 0, 0));
        assert!((e.wer() - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn extra_hypothesis_word_is_an_insertion() {
        let e = edit_breakdown(&[A, C], &[A, B, C]).unwrap();
        assert_eq!((e.sub, e.ins, e.del), (0, 1, 0));
    }

    #[test]
    fn empty_hypothesis_is_all_deletions() {
        let e = edit_breakdown(&[A, B, C], &[]).unwrap();
        assert_eq!((e.sub, e.ins, e.del), (0, 0, 3));
        assert_eq!(e.wer(), 1.0);
    }

    #[test]
    fn empty_reference_rejected() {
        assert!(edit_breakdown(&[], &[A]).is_err());
    }

    #[test]
    fn substitutions_preferred_over_paired_ins_del() {
        let e = edit_breakdown(&[A, B], &[B, A]).unwrap();
        assert_eq!((e.sub, e.ins, e.del), (2, 0, 0));
    }

    #[test]
    fn total_matches_plain_levenshtein_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..1000 {
            let n = rng.gen_range(1..=8);
            let m = rng.gen_range(0..=8);
            let reference: Vec<usize> = (0..n).map(|_| rng.gen_range(0..5)).collect();
            let hypothesis: Vec<usize> = (0..m).map(|_| rng.gen_range(0..5)).collect();
            let e = edit_breakdown(&reference, &hypothesis).unwrap();
            assert_eq!(
                e.distance(),
                plain_distance(&reference, &hypothesis),
                "ref {reference:?} hyp {hypothesis:?}"
            );
        }
    }

    #[test]
    fn swapping_arguments_swaps_ins_and_del() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        for _ in 0..1000 {
            let n = rng.gen_range(1..=8);
            let m = rng.gen_range(1..=8);
            let reference: Vec<usize> = (0..n).map(|_| rng.gen_range(0..5)).collect();
            let hypothesis: Vec<usize> = (0..m).map(|_| rng.gen_range(0..5)).collect();
            let fwd = edit_breakdown(&reference, &hypothesis).unwrap();
            let rev = edit_breakdown(&hypothesis, &reference).unwrap();
            assert_eq!(fwd.distance(), rev.distance());
            assert_eq!(fwd.sub, rev.sub, "ref {reference:?} hyp {hypothesis:?}");
            assert_eq!(fwd.ins, rev.del);
            assert_eq!(fwd.del, rev.ins);
        }
    }

    #[test]
    fn corpus_wer_pools_counts_before_dividing() {
        let pairs = vec![
            (vec![A, B], vec![A, X]),
            (vec![A, B], vec![A, B]),
        ];
        let e = corpus_wer(&pairs).unwrap();
        assert_eq!(e.ref_len, 4);
        assert_eq!(e.distance(), 1);
        assert!((e.wer() - 0.25).abs() < 1e-12);

        let zero = corpus_wer(&vec![(vec![A], vec![A]), (vec![A], vec![A])]).unwrap();
        assert_eq!(zero.wer(), 0.0);

        let single = corpus_wer(&vec![(vec![A, B, C], vec![A, C])]).unwrap();
        assert_eq!(single, edit_breakdown(&[A, B, C], &[A, C]).unwrap());
    }

    #[test]
    fn corpus_wer_validates_inputs() {
        assert!(corpus_wer(&[]).is_err());
        let err = corpus_wer(&vec![(vec![A], vec![A]), (vec![], vec![A])]).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("pair 1"), "message was: {msg}");
    }

    #[test]
    fn report_file_matches_expected_layout() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("report.tsv");
        let rows = vec![ReportRow {
            label: "Front".to_string(),
            wer: 0.125,
            breakdown: EditBreakdown {
                sub: 1,
                ins: 0,
                del: 1,
                ref_len: 16,
            },
            n_samples: 10,
        }];
        write_wer_report(&path, &rows).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next().unwrap(), "view\twer\tdel\tins\tsub\tn_samples");
        assert_eq!(lines.next().unwrap(), "Front\t0.1250\t1\t0\t1\t10");
    }
}
