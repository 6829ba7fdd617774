//! Ranking and classification metrics.
//!
//! Fast implementations live at module level; [`oracle`] holds quadratic
//! brute-force versions used to cross-check them. Both perform the same
//! final floating-point arithmetic, so they agree exactly.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::Impression;
use crate::models::Predictions;

pub const NDCG_CUTOFFS: [usize; 3] = [5, 10, 20];

fn check_lengths(a: usize, b: usize, what: &str) -> Result<()> {
    if a != b {
        return Err(Error::InvalidArgument(format!("{what}: {a} scores but {b} labels")));
    }
    Ok(())
}

fn check_finite(scores: &[f64]) -> Result<()> {
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::NonFinite("metric scores".into()));
    }
    Ok(())
}

/// Concordant-pair count (times two, ties counting one) and pair total.
fn auc_counts(scores: &[f64], labels: &[bool]) -> (u64, u64) {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut negatives_below = 0u64;
    let mut twice_concordant = 0u64;
    let mut k = 0;
    while k < idx.len() {
        let mut end = k;
        let (mut pos, mut neg) = (0u64, 0u64);
        while end < idx.len() && scores[idx[end]] == scores[idx[k]] {
            if labels[idx[end]] {
                pos += 1;
            } else {
                neg += 1;
            }
            end += 1;
        }
        twice_concordant += 2 * pos * negatives_below + pos * neg;
        negatives_below += neg;
        k = end;
    }
    let positives = labels.iter().filter(|&&l| l).count() as u64;
    let negatives = labels.len() as u64 - positives;
    (twice_concordant, 2 * positives * negatives)
}

/// Probability that a random positive outscores a random negative, ties
/// counting one half. `None` when either class is absent.
pub fn auc(scores: &[f64], labels: &[bool]) -> Result<Option<f64>> {
    check_lengths(scores.len(), labels.len(), "auc")?;
    check_finite(scores)?;
    let (num, den) = auc_counts(scores, labels);
    Ok(if den == 0 {
        None
    } else {
        Some(num as f64 / den as f64)
    })
}

/// Group AUC result: the weighted mean and how many groups entered it.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Gauc {
    pub value: f64,
    pub groups: usize,
}

/// Impression-weighted mean of per-user AUC over users that have both
/// classes. Users are visited in ascending id order. `None` when no user
/// qualifies.
pub fn gauc(scores: &[f64], labels: &[bool], users: &[u64]) -> Result<Option<Gauc>> {
    check_lengths(scores.len(), labels.len(), "gauc")?;
    check_lengths(scores.len(), users.len(), "gauc users")?;
    check_finite(scores)?;
    let mut groups: BTreeMap<u64, Vec<usize>> = BTreeMap::new();
    for (i, &u) in users.iter().enumerate() {
        groups.entry(u).or_default().push(i);
    }
    let mut num = 0.0;
    let mut den = 0.0;
    let mut count = 0;
    for rows in groups.values() {
        let s: Vec<f64> = rows.iter().map(|&i| scores[i]).collect();
        let l: Vec<bool> = rows.iter().map(|&i| labels[i]).collect();
        let (a, b) = auc_counts(&s, &l);
        if b == 0 {
            continue;
        }
        let w = rows.len() as f64;
        num += w * (a as f64 / b as f64);
        den += w;
        count += 1;
    }
    Ok((count > 0).then(|| Gauc {
        value: num / den,
        groups: count,
    }))
}

fn discount(rank: usize) -> f64 {
    ((rank + 1) as f64).log2()
}

fn dcg(gains_in_rank_order: impl Iterator<Item = f64>, k: usize) -> f64 {
    let mut s = 0.0;
    for (r, g) in gains_in_rank_order.take(k).enumerate() {
        s += g / discount(r + 1);
    }
    s
}

/// NDCG@k with linear gain `z` over the score-descending order (ties keep
/// the original order). A list whose ideal DCG is zero scores 1.
pub fn ndcg_at_k(scores: &[f64], z: &[f64], k: usize) -> Result<f64> {
    check_lengths(scores.len(), z.len(), "ndcg")?;
    check_finite(scores)?;
    if k == 0 || scores.is_empty() {
        return Err(Error::InvalidArgument("ndcg needs k >= 1 and a nonempty list".into()));
    }
    let mut by_score: Vec<usize> = (0..scores.len()).collect();
    by_score.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut ideal = z.to_vec();
    ideal.sort_by(|a, b| b.total_cmp(a));
    let idcg = dcg(ideal.into_iter(), k);
    if idcg == 0.0 {
        return Ok(1.0);
    }
    Ok(dcg(by_score.iter().map(|&i| z[i]), k) / idcg)
}

/// Session-length weighted NDCG@k. `sessions` gives the session of every
/// row; sessions are visited in order of first appearance.
pub fn wndcg_at_k(scores: &[f64], z: &[f64], sessions: &[u64], k: usize) -> Result<f64> {
    check_lengths(scores.len(), z.len(), "wndcg")?;
    check_lengths(scores.len(), sessions.len(), "wndcg sessions")?;
    if scores.is_empty() {
        return Err(Error::InvalidArgument("wndcg needs at least one session".into()));
    }
    let groups = group_in_order(sessions);
    let mut num = 0.0;
    let mut den = 0.0;
    for rows in &groups {
        let s: Vec<f64> = rows.iter().map(|&i| scores[i]).collect();
        let g: Vec<f64> = rows.iter().map(|&i| z[i]).collect();
        let w = rows.len() as f64;
        num += w * ndcg_at_k(&s, &g, k)?;
        den += w;
    }
    Ok(num / den)
}

fn group_in_order(keys: &[u64]) -> Vec<Vec<usize>> {
    let mut slot: std::collections::HashMap<u64, usize> = std::collections::HashMap::new();
    let mut groups: Vec<Vec<usize>> = Vec::new();
    for (i, &k) in keys.iter().enumerate() {
        let g = *slot.entry(k).or_insert_with(|| {
            groups.push(Vec::new());
            groups.len() - 1
        });
        groups[g].push(i);
    }
    groups
}

/// Every evaluation number for one model on one dataset. Undefined metrics
/// (a class missing entirely) are `None`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub ctr_auc: Option<f64>,
    pub cvr_auc: Option<f64>,
    pub ctcvr_auc: Option<f64>,
    pub ctr_gauc: Option<f64>,
    pub cvr_gauc: Option<f64>,
    pub ctcvr_gauc: Option<f64>,
    pub ndcg_5: f64,
    pub ndcg_10: f64,
    pub ndcg_20: f64,
    pub wndcg_5: f64,
    pub wndcg_10: f64,
    pub wndcg_20: f64,
    pub impressions: usize,
    pub sessions: usize,
    pub users: usize,
    pub ctr_gauc_users: usize,
    pub cvr_gauc_users: usize,
    pub ctcvr_gauc_users: usize,
}

impl MetricsReport {
    /// Column names of [`MetricsReport::csv_values`].
    pub const CSV_COLUMNS: [&'static str; 18] = [
        "ctr_auc",
        "cvr_auc",
        "ctcvr_auc",
        "ctr_gauc",
        "cvr_gauc",
        "ctcvr_gauc",
        "ndcg_5",
        "ndcg_10",
        "ndcg_20",
        "wndcg_5",
        "wndcg_10",
        "wndcg_20",
        "impressions",
        "sessions",
        "users",
        "ctr_gauc_users",
        "cvr_gauc_users",
        "ctcvr_gauc_users",
    ];

    /// Flat row aligned with [`MetricsReport::CSV_COLUMNS`]; undefined
    /// metrics are empty fields.
    pub fn csv_values(&self) -> Vec<String> {
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        vec![
            opt(self.ctr_auc),
            opt(self.cvr_auc),
            opt(self.ctcvr_auc),
            opt(self.ctr_gauc),
            opt(self.cvr_gauc),
            opt(self.ctcvr_gauc),
            self.ndcg_5.to_string(),
            self.ndcg_10.to_string(),
            self.ndcg_20.to_string(),
            self.wndcg_5.to_string(),
            self.wndcg_10.to_string(),
            self.wndcg_20.to_string(),
            self.impressions.to_string(),
            self.sessions.to_string(),
            self.users.to_string(),
            self.ctr_gauc_users.to_string(),
            self.cvr_gauc_users.to_string(),
            self.ctcvr_gauc_users.to_string(),
        ]
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Header line plus one data line.
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(Self::CSV_COLUMNS)?;
        w.write_record(self.csv_values())?;
        let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }

    /// NDCG@k for one of the standard cutoffs.
    pub fn ndcg(&self, k: usize) -> Option<f64> {
        match k {
            5 => Some(self.ndcg_5),
            10 => Some(self.ndcg_10),
            20 => Some(self.ndcg_20),
            _ => None,
        }
    }
}

/// Compute the full report. `pred` must be aligned with `impressions`.
pub fn compute_report(pred: &Predictions, impressions: &[Impression]) -> Result<MetricsReport> {
    check_lengths(pred.len(), impressions.len(), "report")?;
    if impressions.is_empty() {
        return Err(Error::InvalidArgument("cannot evaluate an empty dataset".into()));
    }
    let clicked: Vec<bool> = impressions.iter().map(Impression::clicked).collect();
    let ordered: Vec<bool> = impressions.iter().map(Impression::ordered).collect();
    let users: Vec<u64> = impressions.iter().map(|i| i.user_id).collect();
    let sessions: Vec<u64> = impressions.iter().map(|i| i.session_id).collect();
    let z: Vec<f64> = impressions.iter().map(|i| i.z).collect();

    let click_rows: Vec<usize> = (0..impressions.len()).filter(|&i| clicked[i]).collect();
    let pick = |v: &[f64]| click_rows.iter().map(|&i| v[i]).collect::<Vec<f64>>();
    let cvr_scores = pick(&pred.p_cvr);
    let cvr_labels: Vec<bool> = click_rows.iter().map(|&i| ordered[i]).collect();
    let cvr_users: Vec<u64> = click_rows.iter().map(|&i| users[i]).collect();

    let ctr_g = gauc(&pred.p_ctr, &clicked, &users)?;
    let cvr_g = gauc(&cvr_scores, &cvr_labels, &cvr_users)?;
    let ctcvr_g = gauc(&pred.p_ctcvr, &ordered, &users)?;
    let nd = |k| ndcg_at_k(&pred.p_ctcvr, &z, k);
    let wnd = |k| wndcg_at_k(&pred.p_ctcvr, &z, &sessions, k);

    Ok(MetricsReport {
        ctr_auc: auc(&pred.p_ctr, &clicked)?,
        cvr_auc: auc(&cvr_scores, &cvr_labels)?,
        ctcvr_auc: auc(&pred.p_ctcvr, &ordered)?,
        ctr_gauc: ctr_g.map(|g| g.value),
        cvr_gauc: cvr_g.map(|g| g.value),
        ctcvr_gauc: ctcvr_g.map(|g| g.value),
        ndcg_5: nd(5)?,
        ndcg_10: nd(10)?,
        ndcg_20: nd(20)?,
        wndcg_5: wnd(5)?,
        wndcg_10: wnd(10)?,
        wndcg_20: wnd(20)?,
        impressions: impressions.len(),
        sessions: group_in_order(&sessions).len(),
        users: group_in_order(&users).len(),
        ctr_gauc_users: ctr_g.map_or(0, |g| g.groups),
        cvr_gauc_users: cvr_g.map_or(0, |g| g.groups),
        ctcvr_gauc_users: ctcvr_g.map_or(0, |g| g.groups),
    })
}

/// Quadratic reference implementations.
pub mod oracle {
    /// Compare every positive with every negative.
    pub fn auc(scores: &[f64], labels: &[bool]) -> Option<f64> {
        let mut twice = 0u64;
        let mut pairs = 0u64;
        for i in 0..scores.len() {
            for j in 0..scores.len() {
                if labels[i] && !labels[j] {
                    pairs += 2;
                    if scores[i] > scores[j] {
                        twice += 2;
                    } else if scores[i] == scores[j] {
                        twice += 1;
                    }
                }
            }
        }
        (pairs > 0).then(|| twice as f64 / pairs as f64)
    }

    pub fn gauc(scores: &[f64], labels: &[bool], users: &[u64]) -> Option<f64> {
        let mut ids: Vec<u64> = users.to_vec();
        ids.sort_unstable();
        ids.dedup();
        let mut num = 0.0;
        let mut den = 0.0;
        for u in ids {
            let s: Vec<f64> = (0..scores.len()).filter(|&i| users[i] == u).map(|i| scores[i]).collect();
            let l: Vec<bool> = (0..scores.len()).filter(|&i| users[i] == u).map(|i| labels[i]).collect();
            if let Some(a) = auc(&s, &l) {
                let w = s.len() as f64;
                num += w * a;
                den += w;
            }
        }
        (den > 0.0).then(|| num / den)
    }

    /// Selection-sort ranking: repeatedly take the highest remaining score,
    /// lowest index first among equals.
    fn ranking(scores: &[f64]) -> Vec<usize> {
        let mut left: Vec<usize> = (0..scores.len()).collect();
        let mut out = Vec::new();
        while !left.is_empty() {
            let mut best = 0;
            for p in 1..left.len() {
                if scores[left[p]] > scores[left[best]] {
                    best = p;
                }
            }
            out.push(left.remove(best));
        }
        out
    }

    pub fn ndcg(scores: &[f64], z: &[f64], k: usize) -> f64 {
        let mut dcg = 0.0;
        for (r, &i) in ranking(scores).iter().enumerate().take(k) {
            dcg += z[i] / ((r + 2) as f64).log2();
        }
        let mut idcg = 0.0;
        for (r, &i) in ranking(z).iter().enumerate().take(k) {
            idcg += z[i] / ((r + 2) as f64).log2();
        }
        if idcg == 0.0 {
            1.0
        } else {
            dcg / idcg
        }
    }

    pub fn wndcg(scores: &[f64], z: &[f64], sessions: &[u64], k: usize) -> f64 {
        let mut seen: Vec<u64> = Vec::new();
        for &s in sessions {
            if !seen.contains(&s) {
                seen.push(s);
            }
        }
        let mut num = 0.0;
        let mut den = 0.0;
        for s in seen {
            let rows: Vec<usize> = (0..sessions.len()).filter(|&i| sessions[i] == s).collect();
            let sc: Vec<f64> = rows.iter().map(|&i| scores[i]).collect();
            let zz: Vec<f64> = rows.iter().map(|&i| z[i]).collect();
            let w = rows.len() as f64;
            num += w * ndcg(&sc, &zz, k);
            den += w;
        }
        num / den
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn auc_examples() {
        assert_eq!(auc(&[0.9, 0.2, 0.6], &[true, false, true]).unwrap(), Some(1.0));
        assert_eq!(auc(&[0.3; 4], &[true, false, true, false]).unwrap(), Some(0.5));
        assert_eq!(auc(&[0.1, 0.9], &[true, false]).unwrap(), Some(0.0));
        assert_eq!(auc(&[0.1, 0.9], &[true, true]).unwrap(), None);
        assert!(auc(&[f64::NAN, 0.9], &[true, false]).is_err());
        assert!(auc(&[0.9], &[true, false]).is_err());
    }

    #[test]
    fn gauc_examples() {
        // user 1: AUC 1.0 over 2 rows; user 2: AUC 0.5 over 2 rows
        let s = [0.9, 0.1, 0.4, 0.4];
        let l = [true, false, true, false];
        let u = [1, 1, 2, 2];
        let g = gauc(&s, &l, &u).unwrap().unwrap();
        assert_eq!(g.value, 0.75);
        assert_eq!(g.groups, 2);
        // adding a user with only positives changes nothing
        let s2 = [0.9, 0.1, 0.4, 0.4, 0.2, 0.3];
        let l2 = [true, false, true, false, true, true];
        let u2 = [1, 1, 2, 2, 3, 3];
        assert_eq!(gauc(&s2, &l2, &u2).unwrap().unwrap(), g);
        // single user equals plain AUC
        let single = gauc(&s, &l, &[7; 4]).unwrap().unwrap();
        assert_eq!(Some(single.value), auc(&s, &l).unwrap());
        assert_eq!(gauc(&[0.1], &[true], &[1]).unwrap(), None);
    }

    #[test]
    fn ndcg_examples() {
        let v = ndcg_at_k(&[0.9, 0.5, 0.1], &[3.0, 5.0, 1.0], 3).unwrap();
        let dcg = 3.0 + 5.0 / 3f64.log2() + 0.5;
        let idcg = 5.0 + 3.0 / 3f64.log2() + 0.5;
        assert!((dcg - 6.654649).abs() < 1e-6);
        assert!((idcg - 7.392789).abs() < 1e-6);
        // 6.654649 / 7.392789 = 0.9001540 (hand computation)
        assert_eq!(v, dcg / idcg);
        assert!((v - 0.900154).abs() < 5e-7);
        assert_eq!(ndcg_at_k(&[3.0, 2.0, 1.0], &[5.0, 3.0, 1.0], 2).unwrap(), 1.0);
        assert_eq!(ndcg_at_k(&[0.2, 0.9, 0.4], &[2.0; 3], 2).unwrap(), 1.0);
        assert_eq!(ndcg_at_k(&[0.2, 0.9], &[0.0; 2], 1).unwrap(), 1.0);
        assert!(ndcg_at_k(&[0.2], &[1.0], 0).is_err());
    }

    #[test]
    fn ndcg_ties_keep_original_order() {
        // equal scores: index 0 ranks first, so its z=1 takes rank 1
        let v = ndcg_at_k(&[0.5, 0.5], &[1.0, 2.0], 1).unwrap();
        assert_eq!(v, 0.5);
    }

    #[test]
    fn wndcg_examples() {
        // session 1: perfect, length 2; session 2: length 6, NDCG@1 = 0.5
        let s = [0.9, 0.1, 0.9, 0.8, 0.1, 0.1, 0.1, 0.1];
        let z = [2.0, 1.0, 1.0, 2.0, 0.0, 0.0, 0.0, 0.0];
        let sess = [1, 1, 2, 2, 2, 2, 2, 2];
        assert_eq!(wndcg_at_k(&s, &z, &sess, 1).unwrap(), 0.625);
        let one = wndcg_at_k(&s[..2], &z[..2], &sess[..2], 1).unwrap();
        assert_eq!(one, ndcg_at_k(&s[..2], &z[..2], 1).unwrap());
    }

    #[test]
    fn fast_matches_oracle_on_random_instances() {
        let mut rng = crate::rng::stream(5, crate::rng::Domain::Test, 0);
        for _ in 0..200 {
            let n = rng.gen_range(1..=50);
            // coarse scores force ties
            let s: Vec<f64> = (0..n).map(|_| rng.gen_range(0..8) as f64 / 8.0).collect();
            let l: Vec<bool> = (0..n).map(|_| rng.gen_bool(0.4)).collect();
            let u: Vec<u64> = (0..n).map(|_| rng.gen_range(0..5)).collect();
            let z: Vec<f64> = (0..n).map(|_| rng.gen_range(0..6) as f64 * 0.5).collect();
            let k = rng.gen_range(1..=25);
            assert_eq!(auc(&s, &l).unwrap(), oracle::auc(&s, &l));
            assert_eq!(gauc(&s, &l, &u).unwrap().map(|g| g.value), oracle::gauc(&s, &l, &u));
            assert_eq!(ndcg_at_k(&s, &z, k).unwrap(), oracle::ndcg(&s, &z, k));
            assert_eq!(wndcg_at_k(&s, &z, &u, k).unwrap(), oracle::wndcg(&s, &z, &u, k));
        }
    }

    #[test]
    fn report_csv_has_matching_columns() {
        let r = MetricsReport {
            ctr_auc: Some(0.7),
            cvr_auc: None,
            ctcvr_auc: Some(0.6),
            ctr_gauc: Some(0.65),
            cvr_gauc: None,
            ctcvr_gauc: Some(0.5),
            ndcg_5: 0.9,
            ndcg_10: 0.8,
            ndcg_20: 0.85,
            wndcg_5: 0.7,
            wndcg_10: 0.75,
            wndcg_20: 0.8,
            impressions: 10,
            sessions: 2,
            users: 2,
            ctr_gauc_users: 2,
            cvr_gauc_users: 0,
            ctcvr_gauc_users: 1,
        };
        let csv = r.to_csv().unwrap();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines.len(), 2);
        assert_eq!(lines[0].split(',').count(), lines[1].split(',').count());
        assert!(lines[1].starts_with("0.7,,0.6"));
        let back: MetricsReport = serde_json::from_str(&r.to_json().unwrap()).unwrap();
        assert_eq!(back, r);
    }
}
