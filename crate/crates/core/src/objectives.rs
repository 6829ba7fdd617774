//! Training objectives: the entire-space pointwise loss, the pairwise
//! ranking losses over sessions, the pointwise monotonic penalty and their
//! weighted total.

use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, NodeId};
use crate::error::{Error, Result};
use crate::features::Impression;
use crate::tensor::Tensor;

/// Probabilities are clamped to `[PROB_EPS, 1 - PROB_EPS]` before logs.
pub const PROB_EPS: f64 = 1e-7;

/// Two MCI scores closer than this are tied.
pub const Z_TIE_TOL: f64 = 1e-9;

pub const DEFAULT_PAIR_CAP: usize = 200;

/// Which rule admits an MCI (Z) pair.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ZRule {
    /// `y_i >= y_j` and `z_i > z_j`: MCI ordering only inside a label stratum
    /// or in agreement with it.
    Stratified,
    /// `z_i > z_j` alone.
    Unstratified,
}

/// An ordered impression pair `(i, j)` meaning "i should outrank j".
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub struct Pair {
    pub i: usize,
    pub j: usize,
    /// `y_i > y_j`.
    pub y: bool,
    /// Admitted by the MCI rule.
    pub z: bool,
}

/// Greater-relation pairs of one or more sessions.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct PairSet {
    pub pairs: Vec<Pair>,
}

impl PairSet {
    pub fn y_pairs(&self) -> Vec<(usize, usize)> {
        self.pairs.iter().filter(|p| p.y).map(|p| (p.i, p.j)).collect()
    }

    pub fn z_pairs(&self) -> Vec<(usize, usize)> {
        self.pairs.iter().filter(|p| p.z).map(|p| (p.i, p.j)).collect()
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    fn offset(mut self, by: usize) -> Self {
        for p in &mut self.pairs {
            p.i += by;
            p.j += by;
        }
        self
    }
}

/// All greater-relation pairs of one session (indices local to the slices).
/// When more than `cap` pairs qualify, `cap` of them are kept, drawn
/// uniformly without replacement and returned in enumeration order.
pub fn enumerate_session_pairs<R: Rng>(
    y: &[u8],
    z: &[f64],
    rule: ZRule,
    cap: usize,
    rng: &mut R,
) -> Result<PairSet> {
    if y.len() != z.len() {
        return Err(Error::InvalidArgument(format!(
            "{} labels but {} MCI scores",
            y.len(),
            z.len()
        )));
    }
    let n = y.len();
    let mut pairs = Vec::new();
    for i in 0..n {
        for j in 0..n {
            if i == j {
                continue;
            }
            let yp = y[i] > y[j];
            let z_greater = z[i] > z[j] + Z_TIE_TOL;
            let zp = match rule {
                ZRule::Stratified => y[i] >= y[j] && z_greater,
                ZRule::Unstratified => z_greater,
            };
            if yp || zp {
                pairs.push(Pair { i, j, y: yp, z: zp });
            }
        }
    }
    if pairs.len() > cap {
        let mut keep = sample(rng, pairs.len(), cap).into_vec();
        keep.sort_unstable();
        pairs = keep.into_iter().map(|k| pairs[k]).collect();
    }
    Ok(PairSet { pairs })
}

/// Pairs of every session in `impressions`, which must be grouped into
/// contiguous sessions. Indices refer to positions in `impressions`.
pub fn enumerate_batch_pairs<R: Rng>(
    impressions: &[Impression],
    rule: ZRule,
    cap: usize,
    rng: &mut R,
) -> Result<PairSet> {
    let mut all = PairSet::default();
    let mut start = 0;
    while start < impressions.len() {
        let sid = impressions[start].session_id;
        let end = start
            + impressions[start..]
                .iter()
                .take_while(|i| i.session_id == sid)
                .count();
        let s = &impressions[start..end];
        let y: Vec<u8> = s.iter().map(|i| i.y).collect();
        let z: Vec<f64> = s.iter().map(|i| i.z).collect();
        let set = enumerate_session_pairs(&y, &z, rule, cap, rng)?;
        all.pairs.extend(set.offset(start).pairs);
        start = end;
    }
    Ok(all)
}

fn label_column(g: &mut Graph, y: &[u8], positive: impl Fn(u8) -> bool) -> NodeId {
    g.constant(Tensor::column(
        y.iter().map(|&v| if positive(v) { 1.0 } else { 0.0 }).collect(),
    ))
}

/// Mean binary cross-entropy of `[B, 1]` probabilities against 0/1 targets.
fn bce_terms(g: &mut Graph, p: NodeId, target: NodeId) -> Result<NodeId> {
    let p = g.clamp(p, PROB_EPS, 1.0 - PROB_EPS);
    let one = g.constant(Tensor::scalar(1.0));
    let log_p = g.log(p);
    let q = g.sub(one, p)?;
    let log_q = g.log(q);
    let not_t = g.sub(one, target)?;
    let a = g.mul(target, log_p)?;
    let b = g.mul(not_t, log_q)?;
    let s = g.add(a, b)?;
    Ok(g.neg(s))
}

/// Entire-space pointwise loss: mean over impressions of
/// `BCE(pCTR, click) + BCE(pCTCVR, order)`.
pub fn esmm_pointwise_loss(g: &mut Graph, p_ctr: NodeId, p_ctcvr: NodeId, y: &[u8]) -> Result<NodeId> {
    for node in [p_ctr, p_ctcvr] {
        if g.shape(node) != [y.len(), 1] {
            return Err(Error::shape("esmm_loss", &[g.shape(node), &[y.len(), 1]]));
        }
    }
    if y.is_empty() {
        return Ok(g.constant(Tensor::scalar(0.0)));
    }
    let click = label_column(g, y, |v| v >= 1);
    let order = label_column(g, y, |v| v == 2);
    let a = bce_terms(g, p_ctr, click)?;
    let b = bce_terms(g, p_ctcvr, order)?;
    let per = g.add(a, b)?;
    Ok(g.mean(per))
}

/// Mean over `pairs` of `-ln sigmoid(s_i - s_j)`; zero when there are none.
pub fn pairwise_loss(g: &mut Graph, scores: NodeId, pairs: &[(usize, usize)]) -> Result<NodeId> {
    if pairs.is_empty() {
        return Ok(g.constant(Tensor::scalar(0.0)));
    }
    let is: Vec<usize> = pairs.iter().map(|p| p.0).collect();
    let js: Vec<usize> = pairs.iter().map(|p| p.1).collect();
    let si = g.gather_rows(scores, &is)?;
    let sj = g.gather_rows(scores, &js)?;
    let d = g.sub(si, sj)?;
    let nd = g.neg(d);
    // -ln sigmoid(d) = softplus(-d), evaluated without cancellation
    let l = g.softplus(nd);
    Ok(g.mean(l))
}

/// Ranking loss on label pairs (`y_i > y_j`).
pub fn pairwise_ctrcvr_loss(g: &mut Graph, scores: NodeId, pairs: &PairSet) -> Result<NodeId> {
    pairwise_loss(g, scores, &pairs.y_pairs())
}

/// MCI ranking loss on stratified Z-pairs. `pairs` must come from
/// [`ZRule::Stratified`] enumeration.
pub fn stratified_pairwise_loss(g: &mut Graph, scores: NodeId, pairs: &PairSet) -> Result<NodeId> {
    pairwise_loss(g, scores, &pairs.z_pairs())
}

/// MCI ranking loss on unstratified Z-pairs. `pairs` must come from
/// [`ZRule::Unstratified`] enumeration.
pub fn unstratified_pairwise_loss(g: &mut Graph, scores: NodeId, pairs: &PairSet) -> Result<NodeId> {
    pairwise_loss(g, scores, &pairs.z_pairs())
}

/// Weights of the two pairwise terms in the total loss.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawWeights")]
pub struct LossWeights {
    pub lambda1: f64,
    pub lambda2: f64,
}

#[derive(Deserialize)]
struct RawWeights {
    lambda1: f64,
    lambda2: f64,
}

impl TryFrom<RawWeights> for LossWeights {
    type Error = Error;
    fn try_from(r: RawWeights) -> Result<Self> {
        LossWeights::new(r.lambda1, r.lambda2)
    }
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda1: 1.0,
            lambda2: 0.1,
        }
    }
}

impl LossWeights {
    pub fn new(lambda1: f64, lambda2: f64) -> Result<Self> {
        for (name, v) in [("lambda1", lambda1), ("lambda2", lambda2)] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::Config(format!("{name} must be finite and non-negative, got {v}")));
            }
        }
        Ok(LossWeights { lambda1, lambda2 })
    }
}

/// `esmm + lambda1 * pair_ctrcvr + lambda2 * pair_mci`.
pub fn combine_losses(
    g: &mut Graph,
    esmm: NodeId,
    pair_ctrcvr: NodeId,
    pair_mci: NodeId,
    w: LossWeights,
) -> Result<NodeId> {
    let a = g.scale(pair_ctrcvr, w.lambda1);
    let b = g.scale(pair_mci, w.lambda2);
    let s = g.add(esmm, a)?;
    g.add(s, b)
}

/// Scalar form of [`combine_losses`].
pub fn combine_values(esmm: f64, pair_ctrcvr: f64, pair_mci: f64, w: LossWeights) -> f64 {
    esmm + w.lambda1 * pair_ctrcvr + w.lambda2 * pair_mci
}

/// Training-time penalty from an in-graph Jacobian `[B, 9]`:
/// mean of `relu(-d s / d x_s)`.
pub fn monotonic_penalty_node(g: &mut Graph, jacobian: NodeId) -> NodeId {
    let n = g.neg(jacobian);
    let r = g.relu(n);
    g.mean(r)
}

/// Pointwise monotonic penalty of an arbitrary scorer, computed by
/// backpropagating into the `x_s` leaf. `build` maps the `[B, 9]` input node
/// to per-row scores `[B, 1]`; rows must not interact.
pub fn pointwise_monotonic_penalty<F>(build: F, x_s: &Tensor) -> Result<f64>
where
    F: FnOnce(&mut Graph, NodeId) -> Result<NodeId>,
{
    let mut g = Graph::new();
    let x = g.watched(x_s.clone());
    let s = build(&mut g, x)?;
    let total = g.sum(s);
    let grads = g.backward(total)?;
    let grad = grads
        .get(x)
        .cloned()
        .unwrap_or_else(|| Tensor::zeros(x_s.shape()));
    Ok(penalty_from_gradient(&grad))
}

/// Mean of `relu(-g)` over all entries of `grad`.
pub fn penalty_from_gradient(grad: &Tensor) -> f64 {
    if grad.is_empty() {
        return 0.0;
    }
    let neg: Vec<f64> = grad.data().iter().map(|&v| (-v).max(0.0)).collect();
    crate::autodiff::pairwise_sum(&neg) / grad.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{stream, Domain};

    fn rng() -> rand_chacha::ChaCha8Rng {
        stream(3, Domain::Pairs, 0)
    }

    fn pairs(y: &[u8], z: &[f64], rule: ZRule) -> PairSet {
        enumerate_session_pairs(y, z, rule, DEFAULT_PAIR_CAP, &mut rng()).unwrap()
    }

    fn eval_pairwise(scores: &[f64], p: &[(usize, usize)]) -> f64 {
        let mut g = Graph::new();
        let s = g.constant(Tensor::column(scores.to_vec()));
        let l = pairwise_loss(&mut g, s, p).unwrap();
        g.value(l).item()
    }

    #[test]
    fn pair_enumeration_examples() {
        let p = pairs(&[2, 0], &[1.0, 4.0], ZRule::Stratified);
        assert_eq!(p.y_pairs(), vec![(0, 1)]);
        assert!(p.z_pairs().is_empty());

        let p = pairs(&[1, 1], &[3.0, 2.0], ZRule::Stratified);
        assert!(p.y_pairs().is_empty());
        assert_eq!(p.z_pairs(), vec![(0, 1)]);

        let p = pairs(&[0, 1, 2], &[2.0; 3], ZRule::Stratified);
        let mut y = p.y_pairs();
        y.sort();
        assert_eq!(y, vec![(1, 0), (2, 0), (2, 1)]);
        assert!(p.z_pairs().is_empty());

        let p = pairs(&[2, 0], &[1.0, 4.0], ZRule::Unstratified);
        assert_eq!(p.z_pairs(), vec![(1, 0)]);
    }

    #[test]
    fn z_ties_within_tolerance() {
        let p = pairs(&[0, 0], &[1.0, 1.0 + 5e-10], ZRule::Unstratified);
        assert!(p.is_empty());
    }

    #[test]
    fn cap_subsamples_reproducibly() {
        let y: Vec<u8> = (0..30).map(|i| (i % 3) as u8).collect();
        let z: Vec<f64> = (0..30).map(|i| i as f64).collect();
        let full = enumerate_session_pairs(&y, &z, ZRule::Unstratified, usize::MAX, &mut rng()).unwrap();
        let a = enumerate_session_pairs(&y, &z, ZRule::Unstratified, 200, &mut rng()).unwrap();
        let b = enumerate_session_pairs(&y, &z, ZRule::Unstratified, 200, &mut rng()).unwrap();
        assert!(full.len() > 200);
        assert_eq!(a.len(), 200);
        assert_eq!(a, b);
        assert!(a.pairs.iter().all(|p| full.pairs.contains(p)));
    }

    #[test]
    fn esmm_examples() {
        let mut g = Graph::new();
        let ctr = g.constant(Tensor::column(vec![0.5, 0.5]));
        let ctcvr = g.constant(Tensor::column(vec![0.5, 0.25]));
        let l = esmm_pointwise_loss(&mut g, ctr, ctcvr, &[2, 0]).unwrap();
        let first = 2.0 * std::f64::consts::LN_2;
        let second = -(0.5f64).ln() - (0.75f64).ln();
        assert!((first - 1.386294).abs() < 1e-6);
        assert!((second - 0.980829).abs() < 1e-6);
        assert!((g.value(l).item() - (first + second) / 2.0).abs() < 1e-12);
        assert!((g.value(l).item() - 1.183562).abs() < 1e-6);
    }

    #[test]
    fn esmm_clamps_extreme_probabilities() {
        let mut g = Graph::new();
        let ctr = g.constant(Tensor::column(vec![0.0]));
        let ctcvr = g.constant(Tensor::column(vec![1.0]));
        let l = esmm_pointwise_loss(&mut g, ctr, ctcvr, &[2]).unwrap();
        let v = g.value(l).item();
        assert!(v.is_finite());
        assert!((v - (-(PROB_EPS).ln() - (1.0 - PROB_EPS).ln())).abs() < 1e-9);
    }

    #[test]
    fn pairwise_examples() {
        assert!((eval_pairwise(&[0.4, 0.4], &[(0, 1)]) - std::f64::consts::LN_2).abs() < 1e-15);
        assert!(eval_pairwise(&[800.0, 0.0], &[(0, 1)]) < 1e-300);
        assert!((eval_pairwise(&[0.9, 0.1], &[(0, 1)]) - 0.371101).abs() < 1e-6);
        assert_eq!(eval_pairwise(&[0.9, 0.1], &[]), 0.0);
    }

    #[test]
    fn stratified_and_unstratified_examples() {
        let p = pairs(&[2, 1], &[5.0, 1.0], ZRule::Stratified);
        assert_eq!(p.z_pairs(), vec![(0, 1)]);
        assert!((eval_pairwise(&[0.3, 0.7], &p.z_pairs()) - 0.913015).abs() < 1e-6);

        let mspl = pairs(&[2, 0], &[1.0, 4.0], ZRule::Stratified);
        let mpl = pairs(&[2, 0], &[1.0, 4.0], ZRule::Unstratified);
        assert_eq!(eval_pairwise(&[0.6, 0.4], &mspl.z_pairs()), 0.0);
        assert!((eval_pairwise(&[0.6, 0.4], &mpl.z_pairs()) - 0.798139).abs() < 1e-6);

        // correct order keeps every pair below ln 2
        let z = [4.0, 3.0, 2.0, 1.0];
        let p = pairs(&[0; 4], &z, ZRule::Unstratified);
        assert_eq!(p.z_pairs().len(), 6);
        assert!(eval_pairwise(&[0.9, 0.7, 0.5, 0.1], &p.z_pairs()) < std::f64::consts::LN_2);
    }

    #[test]
    fn combine_examples() {
        let w = LossWeights::default();
        assert!((combine_values(1.0, 0.5, 0.2, w) - 1.52).abs() < 1e-15);
        let zero = LossWeights::new(0.0, 0.0).unwrap();
        assert_eq!(combine_values(0.7, 3.0, 9.0, zero), 0.7);
        let w2 = LossWeights::new(1.0, 0.2).unwrap();
        let d = combine_values(1.0, 0.5, 0.3, w2) - combine_values(1.0, 0.5, 0.3, w);
        assert!((d - 0.1 * 0.3).abs() < 1e-15);

        let mut g = Graph::new();
        let [a, b, c] = [1.0, 0.5, 0.2].map(|v| g.constant(Tensor::scalar(v)));
        let t = combine_losses(&mut g, a, b, c, w).unwrap();
        assert!((g.value(t).item() - 1.52).abs() < 1e-15);
    }

    #[test]
    fn weights_validated() {
        assert!(LossWeights::new(-0.1, 0.0).is_err());
        assert!(LossWeights::new(0.0, f64::NAN).is_err());
        assert!(serde_json::from_str::<LossWeights>(r#"{"lambda1":1.0,"lambda2":-1}"#).is_err());
    }

    #[test]
    fn penalty_examples() {
        // s = -x1 on a one-input scorer
        let x1 = Tensor::column(vec![0.3, -1.2, 4.0]);
        let p = pointwise_monotonic_penalty(|g, x| Ok(g.neg(x)), &x1).unwrap();
        assert_eq!(p, 1.0);
        // s = x1 - 2 x2 on a two-input scorer
        let x2 = Tensor::matrix(3, 2, vec![0.1, 0.2, 0.3, 0.4, 0.5, 0.6]).unwrap();
        let p = pointwise_monotonic_penalty(
            |g, x| {
                let w = g.constant(Tensor::matrix(2, 1, vec![1.0, -2.0]).unwrap());
                g.matmul(x, w)
            },
            &x2,
        )
        .unwrap();
        assert_eq!(p, 1.0);
        // an increasing scorer has no penalty
        let x = Tensor::matrix(2, 9, (0..18).map(|v| v as f64 * 0.1).collect()).unwrap();
        let p = pointwise_monotonic_penalty(|g, x| g.sum_axis(x, 1), &x).unwrap();
        assert_eq!(p, 0.0);
    }
}
