//! Token error rates with deletion / insertion / substitution counts.

use std::io::Write;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::model::TokenId;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct WerBreakdown {
    pub ref_len: usize,
    pub deletions: usize,
    pub insertions: usize,
    pub substitutions: usize,
}

impl WerBreakdown {
    pub fn errors(&self) -> usize {
        self.deletions + self.insertions + self.substitutions
    }

    fn rate(&self, count: usize) -> f64 {
        if self.ref_len == 0 {
            f64::NAN
        } else {
            count as f64 / self.ref_len as f64
        }
    }

    /// `(D + I + S) / N`; NaN when `N = 0`.
    pub fn wer(&self) -> f64 {
        self.rate(self.errors())
    }

    pub fn del_rate(&self) -> f64 {
        self.rate(self.deletions)
    }

    pub fn ins_rate(&self) -> f64 {
        self.rate(self.insertions)
    }

    pub fn sub_rate(&self) -> f64 {
        self.rate(self.substitutions)
    }

    pub fn add(&mut self, other: &WerBreakdown) {
        self.ref_len += other.ref_len;
        self.deletions += other.deletions;
        self.insertions += other.insertions;
        self.substitutions += other.substitutions;
    }
}

/// Minimum-edit alignment counts. Works for an empty reference too (all
/// insertions), where rates are undefined.
pub fn edit_counts(reference: &[TokenId], hypothesis: &[TokenId]) -> WerBreakdown {
    let (n, m) = (reference.len(), hypothesis.len());
    let w = m + 1;
    let mut cost = vec![0usize; (n + 1) * w];
    for j in 0..=m {
        cost[j] = j;
    }
    for i in 1..=n {
        cost[i * w] = i;
        for j in 1..=m {
            let diag = cost[(i - 1) * w + j - 1] + usize::from(reference[i - 1] != hypothesis[j - 1]);
            let del = cost[(i - 1) * w + j] + 1;
            let ins = cost[i * w + j - 1] + 1;
            cost[i * w + j] = diag.min(del).min(ins);
        }
    }

    let mut out = WerBreakdown {
        ref_len: n,
        ..Default::default()
    };
    let (mut i, mut j) = (n, m);
    while i > 0 || j > 0 {
        let here = cost[i * w + j];
        if i > 0 && j > 0 {
            let mismatch = reference[i - 1] != hypothesis[j - 1];
            if cost[(i - 1) * w + j - 1] + usize::from(mismatch) == here {
                out.substitutions += usize::from(mismatch);
                i -= 1;
                j -= 1;
                continue;
            }
        }
        if i > 0 && cost[(i - 1) * w + j] + 1 == here {
            out.deletions += 1;
            i -= 1;
        } else {
            out.insertions += 1;
            j -= 1;
        }
    }
    out
}

/// Like [`edit_counts`] but refuses an empty reference.
pub fn edit_align(reference: &[TokenId], hypothesis: &[TokenId]) -> Result<WerBreakdown> {
    if reference.is_empty() {
        return Err(Error::Data("empty reference: error rates are undefined".into()));
    }
    Ok(edit_counts(reference, hypothesis))
}

#[derive(Debug, Clone, PartialEq)]
pub struct LengthBucket {
    /// Inclusive reference-length range.
    pub min_len: usize,
    pub max_len: usize,
    pub n_utts: usize,
    pub breakdown: WerBreakdown,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CorpusWer {
    pub n_utts: usize,
    pub total: WerBreakdown,
    pub buckets: Vec<LengthBucket>,
}

/// Bucket upper bounds are 8, 16, 32, ... reference tokens.
fn bucket_bounds(len: usize) -> (usize, usize) {
    let mut hi = 8;
    while len > hi {
        hi *= 2;
    }
    let lo = if hi == 8 { 0 } else { hi / 2 + 1 };
    (lo, hi)
}

/// Pooled counts: the ratio of summed errors to summed reference length,
/// never a mean of per-utterance rates.
pub fn corpus_wer<R, H>(pairs: &[(R, H)]) -> CorpusWer
where
    R: AsRef<[TokenId]>,
    H: AsRef<[TokenId]>,
{
    let mut total = WerBreakdown::default();
    let mut buckets: Vec<LengthBucket> = Vec::new();
    for (r, h) in pairs {
        let b = edit_counts(r.as_ref(), h.as_ref());
        total.add(&b);
        let (lo, hi) = bucket_bounds(r.as_ref().len());
        match buckets.iter_mut().find(|x| x.min_len == lo) {
            Some(bucket) => {
                bucket.n_utts += 1;
                bucket.breakdown.add(&b);
            }
            None => buckets.push(LengthBucket {
                min_len: lo,
                max_len: hi,
                n_utts: 1,
                breakdown: b,
            }),
        }
    }
    buckets.sort_by_key(|b| b.min_len);
    CorpusWer {
        n_utts: pairs.len(),
        total,
        buckets,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct WerRow {
    pub test_set: String,
    pub n_utts: usize,
    pub ref_tokens: usize,
    pub wer: f64,
    pub del_rate: f64,
    pub ins_rate: f64,
    pub sub_rate: f64,
}

impl WerRow {
    pub fn new(test_set: impl Into<String>, n_utts: usize, b: &WerBreakdown) -> Self {
        Self {
            test_set: test_set.into(),
            n_utts,
            ref_tokens: b.ref_len,
            wer: b.wer(),
            del_rate: b.del_rate(),
            ins_rate: b.ins_rate(),
            sub_rate: b.sub_rate(),
        }
    }
}

impl CorpusWer {
    /// Pooled row followed by one row per length bucket (`name/len9-16`).
    pub fn rows(&self, test_set: &str) -> Vec<WerRow> {
        let mut rows = vec![WerRow::new(test_set, self.n_utts, &self.total)];
        for b in &self.buckets {
            rows.push(WerRow::new(
                format!("{test_set}/len{}-{}", b.min_len, b.max_len),
                b.n_utts,
                &b.breakdown,
            ));
        }
        rows
    }
}

pub fn write_wer_csv<W: Write>(out: W, rows: &[WerRow]) -> Result<()> {
    let mut writer = csv::Writer::from_writer(out);
    for row in rows {
        writer
            .serialize(row)
            .map_err(|e| Error::Data(format!("writing WER csv: {e}")))?;
    }
    writer
        .flush()
        .map_err(|e| Error::Data(format!("writing WER csv: {e}")))
}

/// Plain-text table: test set, WER (%) and D / I / S in percent.
pub fn format_table(rows: &[WerRow]) -> String {
    let width = rows.iter().map(|r| r.test_set.len()).max().unwrap_or(8).max(8);
    let mut s = format!("{:<width$}  {:>7}  {:>8}  {}\n", "test set", "utts", "WER (%)", "(D / I / S)");
    for r in rows {
        s.push_str(&format!(
            "{:<width$}  {:>7}  {:>8.1}  ({:.1} / {:.1} / {:.1})\n",
            r.test_set,
            r.n_utts,
            100.0 * r.wer,
            100.0 * r.del_rate,
            100.0 * r.ins_rate,
            100.0 * r.sub_rate
        ));
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identical_sequences() {
        let b = edit_align(&[1, 2, 3], &[1, 2, 3]).unwrap();
        assert_eq!(b.errors(), 0);
        assert_eq!(b.wer(), 0.0);
    }

    #[test]
    fn single_deletion() {
        let b = edit_align(&[1, 2, 3], &[1, 3]).unwrap();
        assert_eq!((b.deletions, b.insertions, b.substitutions), (1, 0, 0));
        assert!((b.wer() - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn swap_prefers_substitutions() {
        let b = edit_align(&[1, 2], &[2, 1]).unwrap();
        assert_eq!(b.errors(), 2);
        assert_eq!((b.deletions, b.insertions, b.substitutions), (0, 0, 2));
    }

    #[test]
    fn empty_reference_is_an_error() {
        assert!(edit_align(&[], &[1]).is_err());
        assert_eq!(edit_counts(&[], &[1, 2]).insertions, 2);
    }

    #[test]
    fn all_blank_hypotheses_are_pure_deletions() {
        let pairs = vec![(vec![1, 2, 3], vec![]), (vec![4, 5], vec![])];
        let c = corpus_wer(&pairs);
        assert_eq!(c.total.del_rate(), 1.0);
        assert_eq!(c.total.ins_rate(), 0.0);
        assert_eq!(c.total.sub_rate(), 0.0);
    }

    #[test]
    fn pooling_sums_counts() {
        let pairs = vec![(vec![1, 2], vec![1, 2]), (vec![3, 4], vec![5, 6])];
        assert_eq!(corpus_wer(&pairs).total.wer(), 0.5);
        // unequal lengths: pooled rate differs from the per-utterance mean
        let pairs = vec![(vec![1], vec![2]), (vec![1, 2, 3], vec![1, 2, 3])];
        let c = corpus_wer(&pairs);
        assert_eq!(c.total.wer(), 0.25);
        assert_eq!(c.n_utts, 2);
    }

    #[test]
    fn buckets_partition_utterances() {
        let pairs: Vec<(Vec<usize>, Vec<usize>)> = [3usize, 8, 9, 16, 17, 40]
            .iter()
            .map(|&n| ((0..n).collect(), vec![]))
            .collect();
        let c = corpus_wer(&pairs);
        let spans: Vec<_> = c.buckets.iter().map(|b| (b.min_len, b.max_len, b.n_utts)).collect();
        assert_eq!(spans, vec![(0, 8, 2), (9, 16, 2), (17, 32, 1), (33, 64, 1)]);
        let total: usize = c.buckets.iter().map(|b| b.breakdown.ref_len).sum();
        assert_eq!(total, c.total.ref_len);
    }

    #[test]
    fn csv_layout() {
        let c = corpus_wer(&[(vec![1, 2, 3, 4], vec![1, 2, 4])]);
        let mut buf = Vec::new();
        write_wer_csv(&mut buf, &c.rows("search")).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let mut lines = text.lines();
        assert_eq!(
            lines.next().unwrap(),
            "test_set,n_utts,ref_tokens,wer,del_rate,ins_rate,sub_rate"
        );
        assert_eq!(lines.next().unwrap(), "search,1,4,0.25,0.25,0.0,0.0");
        assert_eq!(lines.next().unwrap(), "search/len0-8,1,4,0.25,0.25,0.0,0.0");
        assert!(format_table(&c.rows("search")).contains("25.0"));
    }
}
