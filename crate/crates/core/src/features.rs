//! Feature schema, categorical/discretized encoding, and the Merchant
//! Competitiveness Index (MCI).
//!
//! All non-MCI fields are turned into embedding indices: categorical values
//! look up a vocabulary (index 0 is reserved for unknown values) and
//! continuous values are bucketed against quantile edges, right-closed, so a
//! value equal to an edge lands in the higher bin. The nine MCI indicators
//! bypass embedding and enter the model as a dense vector oriented so that
//! larger is always better.

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Number of MCI indicators.
pub const MCI_DIM: usize = 9;

/// Upper end of the MCI score scale.
pub const MCI_MAX: f64 = 5.0;

/// Names of the oriented MCI coordinates, in vector order.
pub const MCI_NAMES: [&str; MCI_DIM] = [
    "inventory_to_sales_ratio",
    "gmv",
    "historical_cvr",
    "online_inventory",
    "hot_selling_room_ratio",
    "service_acceptance",
    "order_acceptance",
    "picture_quality",
    "info_completeness",
];

/// Raw merchant-quality indicators of one hotel.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MciFactors {
    pub inventory_to_sales_ratio: f64,
    pub gmv: f64,
    pub historical_cvr: f64,
    pub online_inventory: f64,
    pub hot_selling_room_ratio: f64,
    pub service_refusal_rate: f64,
    pub order_refusal_rate: f64,
    pub picture_quality: f64,
    pub info_completeness: f64,
}

impl MciFactors {
    /// Best attainable value of every indicator given the normalizers.
    pub fn best(norm: &MciNormalizers) -> Self {
        MciFactors {
            inventory_to_sales_ratio: 1.0,
            gmv: norm.gmv,
            historical_cvr: 1.0,
            online_inventory: norm.online_inventory,
            hot_selling_room_ratio: 1.0,
            service_refusal_rate: 0.0,
            order_refusal_rate: 0.0,
            picture_quality: 1.0,
            info_completeness: 1.0,
        }
    }
}

/// Scale constants for the two unbounded indicators.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MciNormalizers {
    pub gmv: f64,
    pub online_inventory: f64,
}

impl Default for MciNormalizers {
    fn default() -> Self {
        MciNormalizers {
            gmv: 1_000_000.0,
            online_inventory: 200.0,
        }
    }
}

/// MCI indicators mapped into `[0, 1]`, larger is better.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct OrientedMci(pub [f64; MCI_DIM]);

impl OrientedMci {
    pub fn values(&self) -> &[f64; MCI_DIM] {
        &self.0
    }
}

fn check_fraction(name: &str, v: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&v) {
        return Err(Error::InvalidArgument(format!(
            "{name} = {v} is not a fraction in [0, 1]"
        )));
    }
    Ok(())
}

fn check_nonneg(name: &str, v: f64) -> Result<()> {
    if !(v >= 0.0 && v.is_finite()) {
        return Err(Error::InvalidArgument(format!("{name} = {v} must be >= 0")));
    }
    Ok(())
}

/// Orient raw indicators: refusal rates become `1 - rate`, GMV and online
/// inventory become `min(x / normalizer, 1)`, fractions pass through.
pub fn orient_mci(raw: &MciFactors, norm: &MciNormalizers) -> Result<OrientedMci> {
    if !(norm.gmv > 0.0 && norm.online_inventory > 0.0) {
        return Err(Error::InvalidArgument(
            "MCI normalizers must be positive".into(),
        ));
    }
    check_fraction("inventory_to_sales_ratio", raw.inventory_to_sales_ratio)?;
    check_nonneg("gmv", raw.gmv)?;
    check_fraction("historical_cvr", raw.historical_cvr)?;
    check_nonneg("online_inventory", raw.online_inventory)?;
    check_fraction("hot_selling_room_ratio", raw.hot_selling_room_ratio)?;
    check_fraction("service_refusal_rate", raw.service_refusal_rate)?;
    check_fraction("order_refusal_rate", raw.order_refusal_rate)?;
    check_fraction("picture_quality", raw.picture_quality)?;
    check_fraction("info_completeness", raw.info_completeness)?;
    Ok(OrientedMci([
        raw.inventory_to_sales_ratio,
        (raw.gmv / norm.gmv).min(1.0),
        raw.historical_cvr,
        (raw.online_inventory / norm.online_inventory).min(1.0),
        raw.hot_selling_room_ratio,
        1.0 - raw.service_refusal_rate,
        1.0 - raw.order_refusal_rate,
        raw.picture_quality,
        raw.info_completeness,
    ]))
}

/// Aggregation weights over the oriented indicators; a probability simplex.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "[f64; MCI_DIM]", into = "[f64; MCI_DIM]")]
pub struct MciWeights([f64; MCI_DIM]);

impl MciWeights {
    pub fn new(w: [f64; MCI_DIM]) -> Result<Self> {
        let sum: f64 = w.iter().sum();
        if w.iter().any(|&x| !(x >= 0.0 && x.is_finite())) || (sum - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidArgument(format!(
                "MCI weights must be nonnegative and sum to 1, got {w:?}"
            )));
        }
        Ok(MciWeights(w))
    }

    pub fn uniform() -> Self {
        MciWeights([1.0 / MCI_DIM as f64; MCI_DIM])
    }

    pub fn values(&self) -> &[f64; MCI_DIM] {
        &self.0
    }
}

impl Default for MciWeights {
    fn default() -> Self {
        Self::uniform()
    }
}

impl TryFrom<[f64; MCI_DIM]> for MciWeights {
    type Error = Error;
    fn try_from(w: [f64; MCI_DIM]) -> Result<Self> {
        MciWeights::new(w)
    }
}

impl From<MciWeights> for [f64; MCI_DIM] {
    fn from(w: MciWeights) -> Self {
        w.0
    }
}

/// MCI score in `[0, 5]`: five times the weighted mean of the oriented indicators.
pub fn compute_mci(oriented: &OrientedMci, weights: &MciWeights) -> f64 {
    let s: f64 = oriented
        .0
        .iter()
        .zip(weights.0.iter())
        .map(|(o, w)| o * w)
        .sum();
    (MCI_MAX * s).clamp(0.0, MCI_MAX)
}

/// Reporting level on the half-point grid. Hotels without consumer ratings
/// are level 0; rated hotels never fall below 0.5.
pub fn mci_level(score: f64, has_ratings: bool) -> f64 {
    if !has_ratings {
        return 0.0;
    }
    ((score.clamp(0.0, MCI_MAX) * 2.0).round() / 2.0).max(0.5)
}

/// Bin edges at the empirical `k / n_bins` quantiles (linear interpolation
/// between order statistics). Duplicate edges collapse, so fewer bins may
/// result; all-identical input yields no edges (a single bin).
pub fn quantile_discretize(values: &[f64], n_bins: usize) -> Result<Vec<f64>> {
    if n_bins < 2 {
        return Err(Error::InvalidArgument(format!(
            "n_bins must be >= 2, got {n_bins}"
        )));
    }
    if values.is_empty() {
        return Err(Error::InvalidArgument("no values to discretize".into()));
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("quantile_discretize input".into()));
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len();
    let mut edges: Vec<f64> = Vec::with_capacity(n_bins - 1);
    for k in 1..n_bins {
        let pos = k as f64 / n_bins as f64 * (n - 1) as f64;
        let lo = pos.floor() as usize;
        let hi = (lo + 1).min(n - 1);
        let frac = pos - lo as f64;
        let q = sorted[lo] + frac * (sorted[hi] - sorted[lo]);
        if edges.last().is_none_or(|&last| q > last) {
            edges.push(q);
        }
    }
    if sorted[0] == sorted[n - 1] {
        log::warn!("all {n} values identical; discretizing into a single bin");
        return Ok(Vec::new());
    }
    Ok(edges)
}

/// Right-closed bucket index: the number of edges `<= value`.
pub fn bin_index(edges: &[f64], value: f64) -> usize {
    edges.partition_point(|&e| e <= value)
}

/// The five embedded feature groups, plus the dense MCI group.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FieldGroup {
    /// Consumer basic profile.
    Profile,
    /// Consumer historical preferences.
    Behavior,
    /// Request context.
    Context,
    Query,
    Hotel,
    Mci,
}

impl FieldGroup {
    /// Embedding width for fields of this group.
    pub fn embedding_dim(self) -> usize {
        match self {
            FieldGroup::Profile | FieldGroup::Behavior | FieldGroup::Query => 4,
            FieldGroup::Context | FieldGroup::Hotel => 8,
            FieldGroup::Mci => 0,
        }
    }

    /// Position of the group in the concatenated embedding.
    pub fn concat_rank(self) -> usize {
        match self {
            FieldGroup::Profile => 0,
            FieldGroup::Behavior => 1,
            FieldGroup::Query => 2,
            FieldGroup::Hotel => 3,
            FieldGroup::Context => 4,
            FieldGroup::Mci => 5,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum FieldKind {
    /// Known values; encoded index is position + 1.
    Categorical { vocab: Vec<String> },
    /// Strictly increasing bin edges.
    Continuous { edges: Vec<f64> },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FieldSpec {
    pub name: String,
    pub group: FieldGroup,
    #[serde(flatten)]
    pub kind: FieldKind,
}

impl FieldSpec {
    pub fn categorical(name: &str, group: FieldGroup, vocab: Vec<String>) -> Self {
        FieldSpec {
            name: name.to_string(),
            group,
            kind: FieldKind::Categorical { vocab },
        }
    }

    pub fn continuous(name: &str, group: FieldGroup, edges: Vec<f64>) -> Self {
        FieldSpec {
            name: name.to_string(),
            group,
            kind: FieldKind::Continuous { edges },
        }
    }

    /// Number of distinct encoded indices.
    pub fn vocab_size(&self) -> usize {
        match &self.kind {
            FieldKind::Categorical { vocab } => vocab.len() + 1,
            FieldKind::Continuous { edges } => edges.len() + 1,
        }
    }

    pub fn embedding_dim(&self) -> usize {
        self.group.embedding_dim()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct SchemaRepr {
    fields: Vec<FieldSpec>,
    mci_normalizers: MciNormalizers,
    mci_weights: MciWeights,
}

/// Immutable description of every model input.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(try_from = "SchemaRepr", into = "SchemaRepr")]
pub struct FeatureSchema {
    fields: Vec<FieldSpec>,
    mci_normalizers: MciNormalizers,
    mci_weights: MciWeights,
    lookups: Vec<HashMap<String, usize>>,
}

impl PartialEq for FeatureSchema {
    fn eq(&self, other: &Self) -> bool {
        self.fields == other.fields
            && self.mci_normalizers == other.mci_normalizers
            && self.mci_weights == other.mci_weights
    }
}

impl TryFrom<SchemaRepr> for FeatureSchema {
    type Error = Error;
    fn try_from(r: SchemaRepr) -> Result<Self> {
        FeatureSchema::new(r.fields, r.mci_normalizers, r.mci_weights)
    }
}

impl From<FeatureSchema> for SchemaRepr {
    fn from(s: FeatureSchema) -> Self {
        SchemaRepr {
            fields: s.fields,
            mci_normalizers: s.mci_normalizers,
            mci_weights: s.mci_weights,
        }
    }
}

/// One raw (pre-encoding) feature value.
#[derive(Clone, Debug, PartialEq)]
pub enum RawValue {
    Text(String),
    Number(f64),
}

/// Raw consumer/query/hotel/context record keyed by field name.
pub type RawRecord = BTreeMap<String, RawValue>;

/// Encoded model input of one impression.
#[derive(Clone, Debug, PartialEq)]
pub struct EncodedFeatures {
    /// One index per schema field, in schema order.
    pub indices: Vec<usize>,
    pub mci: OrientedMci,
}

impl FeatureSchema {
    pub fn new(
        fields: Vec<FieldSpec>,
        mci_normalizers: MciNormalizers,
        mci_weights: MciWeights,
    ) -> Result<Self> {
        let mut seen = std::collections::HashSet::new();
        let mut lookups = Vec::with_capacity(fields.len());
        for f in &fields {
            if !seen.insert(f.name.as_str()) {
                return Err(Error::Schema(format!("duplicate field {}", f.name)));
            }
            if f.group == FieldGroup::Mci {
                return Err(Error::Schema(format!(
                    "field {} in the mci group; MCI indicators are dense, not embedded",
                    f.name
                )));
            }
            let mut map = HashMap::new();
            match &f.kind {
                FieldKind::Categorical { vocab } => {
                    for (i, v) in vocab.iter().enumerate() {
                        if map.insert(v.clone(), i + 1).is_some() {
                            return Err(Error::Schema(format!(
                                "duplicate vocabulary entry {v:?} in {}",
                                f.name
                            )));
                        }
                    }
                }
                FieldKind::Continuous { edges } => {
                    if edges.windows(2).any(|w| w[0] >= w[1]) || edges.iter().any(|e| !e.is_finite()) {
                        return Err(Error::Schema(format!(
                            "bin edges of {} are not strictly increasing",
                            f.name
                        )));
                    }
                }
            }
            lookups.push(map);
        }
        if !(mci_normalizers.gmv > 0.0 && mci_normalizers.online_inventory > 0.0) {
            return Err(Error::Schema("MCI normalizers must be positive".into()));
        }
        Ok(FeatureSchema {
            fields,
            mci_normalizers,
            mci_weights,
            lookups,
        })
    }

    pub fn fields(&self) -> &[FieldSpec] {
        &self.fields
    }

    pub fn field_index(&self, name: &str) -> Option<usize> {
        self.fields.iter().position(|f| f.name == name)
    }

    pub fn mci_normalizers(&self) -> &MciNormalizers {
        &self.mci_normalizers
    }

    pub fn mci_weights(&self) -> &MciWeights {
        &self.mci_weights
    }

    /// Field indices ordered by concatenation group, stable within a group.
    pub fn concat_order(&self) -> Vec<usize> {
        let mut order: Vec<usize> = (0..self.fields.len()).collect();
        order.sort_by_key(|&i| self.fields[i].group.concat_rank());
        order
    }

    /// Width of the concatenated embedding vector.
    pub fn embedding_width(&self) -> usize {
        self.fields.iter().map(FieldSpec::embedding_dim).sum()
    }

    /// Encode one field value.
    pub fn encode_value(&self, field: usize, value: &RawValue) -> Result<usize> {
        let f = &self.fields[field];
        match (&f.kind, value) {
            (FieldKind::Categorical { .. }, RawValue::Text(s)) => {
                Ok(self.lookups[field].get(s).copied().unwrap_or(0))
            }
            (FieldKind::Continuous { edges }, RawValue::Number(x)) => {
                if !x.is_finite() {
                    return Err(Error::NonFinite(format!("field {}", f.name)));
                }
                Ok(bin_index(edges, *x))
            }
            (FieldKind::Categorical { .. }, RawValue::Number(_)) => Err(Error::Schema(format!(
                "field {} is categorical but got a number",
                f.name
            ))),
            (FieldKind::Continuous { .. }, RawValue::Text(_)) => Err(Error::Schema(format!(
                "field {} is continuous but got text",
                f.name
            ))),
        }
    }

    /// Encode a full record plus the hotel's MCI factors.
    pub fn encode_sample(&self, record: &RawRecord, factors: &MciFactors) -> Result<EncodedFeatures> {
        if let Some(extra) = record
            .keys()
            .find(|k| self.field_index(k).is_none())
        {
            return Err(Error::Schema(format!("record has unknown field {extra}")));
        }
        let indices = self
            .fields
            .iter()
            .enumerate()
            .map(|(i, f)| {
                let v = record
                    .get(&f.name)
                    .ok_or_else(|| Error::Schema(format!("record is missing field {}", f.name)))?;
                self.encode_value(i, v)
            })
            .collect::<Result<Vec<_>>>()?;
        let mci = orient_mci(factors, &self.mci_normalizers)?;
        Ok(EncodedFeatures { indices, mci })
    }

    /// Check that encoded indices fit the schema.
    pub fn validate_indices(&self, indices: &[usize]) -> Result<()> {
        if indices.len() != self.fields.len() {
            return Err(Error::Schema(format!(
                "expected {} encoded fields, got {}",
                self.fields.len(),
                indices.len()
            )));
        }
        for (f, &i) in self.fields.iter().zip(indices) {
            if i >= f.vocab_size() {
                return Err(Error::IndexOutOfRange {
                    what: format!("field {}", f.name),
                    index: i,
                    size: f.vocab_size(),
                });
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }
}

/// One displayed (consumer, query, hotel) event.
#[derive(Clone, Debug, PartialEq)]
pub struct Impression {
    pub session_id: u64,
    pub user_id: u64,
    pub hotel_id: u64,
    /// Display rank, starting at 1.
    pub position: u32,
    pub timestamp: u64,
    pub indices: Vec<usize>,
    pub mci: OrientedMci,
    /// 0 = not clicked, 1 = clicked only, 2 = clicked and ordered.
    pub y: u8,
    /// Continuous MCI score of the hotel, in `[0, 5]`.
    pub z: f64,
    pub has_ratings: bool,
}

impl Impression {
    pub fn clicked(&self) -> bool {
        self.y >= 1
    }

    pub fn ordered(&self) -> bool {
        self.y == 2
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mid_factors() -> MciFactors {
        MciFactors {
            inventory_to_sales_ratio: 0.5,
            gmv: 500_000.0,
            historical_cvr: 0.5,
            online_inventory: 100.0,
            hot_selling_room_ratio: 0.5,
            service_refusal_rate: 0.5,
            order_refusal_rate: 0.5,
            picture_quality: 0.5,
            info_completeness: 0.5,
        }
    }

    #[test]
    fn zero_refusal_orients_to_one() {
        let mut f = mid_factors();
        f.service_refusal_rate = 0.0;
        let o = orient_mci(&f, &MciNormalizers::default()).unwrap();
        assert_eq!(o.0[5], 1.0);
    }

    #[test]
    fn best_factors_orient_to_all_ones() {
        let n = MciNormalizers::default();
        let o = orient_mci(&MciFactors::best(&n), &n).unwrap();
        assert_eq!(o.0, [1.0; MCI_DIM]);
    }

    #[test]
    fn gmv_saturates_at_normalizer() {
        let n = MciNormalizers::default();
        let mut f = mid_factors();
        f.gmv = n.gmv;
        assert_eq!(orient_mci(&f, &n).unwrap().0[1], 1.0);
        f.gmv = 3.0 * n.gmv;
        assert_eq!(orient_mci(&f, &n).unwrap().0[1], 1.0);
    }

    #[test]
    fn orient_rejects_bad_fraction_and_normalizer() {
        let mut f = mid_factors();
        f.order_refusal_rate = 1.2;
        assert!(orient_mci(&f, &MciNormalizers::default()).is_err());
        let bad = MciNormalizers {
            gmv: 0.0,
            online_inventory: 1.0,
        };
        assert!(orient_mci(&mid_factors(), &bad).is_err());
    }

    #[test]
    fn orientation_direction() {
        let n = MciNormalizers::default();
        let base = orient_mci(&mid_factors(), &n).unwrap();
        let mut f = mid_factors();
        f.service_refusal_rate = 0.6;
        f.gmv = 600_000.0;
        let o = orient_mci(&f, &n).unwrap();
        assert!(o.0[5] < base.0[5]);
        assert!(o.0[1] > base.0[1]);
    }

    #[test]
    fn mci_examples() {
        let w = MciWeights::uniform();
        assert_eq!(compute_mci(&OrientedMci([1.0; 9]), &w), 5.0);
        assert_eq!(compute_mci(&OrientedMci([0.0; 9]), &w), 0.0);
        let o = OrientedMci([1., 1., 1., 0., 0., 0., 0., 0., 0.]);
        assert!((compute_mci(&o, &w) - 5.0 / 3.0).abs() < 1e-12);
        let skewed = MciWeights::new([0.5, 0.5, 0., 0., 0., 0., 0., 0., 0.]).unwrap();
        assert_eq!(compute_mci(&OrientedMci([1.0; 9]), &skewed), 5.0);
    }

    #[test]
    fn invalid_weights_rejected() {
        assert!(MciWeights::new([0.2; 9]).is_err());
        let mut w = [1.0 / 9.0; 9];
        w[0] = -0.1;
        w[1] += 0.1;
        assert!(MciWeights::new(w).is_err());
        assert!(serde_json::from_str::<MciWeights>("[1,0,0,0,0,0,0,0,0.5]").is_err());
    }

    #[test]
    fn level_examples() {
        assert_eq!(mci_level(3.24, true), 3.0);
        assert_eq!(mci_level(3.26, true), 3.5);
        assert_eq!(mci_level(4.9, false), 0.0);
        assert_eq!(mci_level(0.1, true), 0.5);
        assert_eq!(mci_level(5.0, true), 5.0);
    }

    #[test]
    fn level_idempotent_on_grid() {
        for k in 1..=10 {
            let l = k as f64 * 0.5;
            assert_eq!(mci_level(l, true), l);
        }
    }

    #[test]
    fn quantiles_of_one_to_hundred() {
        // Linear interpolation at p*(n-1): 24.75, 49.5, 74.25 positions.
        let v: Vec<f64> = (1..=100).map(f64::from).collect();
        let e = quantile_discretize(&v, 4).unwrap();
        assert_eq!(e, vec![25.75, 50.5, 75.25]);
    }

    #[test]
    fn two_distinct_values_one_edge_between() {
        let e = quantile_discretize(&[1.0, 3.0], 2).unwrap();
        assert_eq!(e.len(), 1);
        assert!(e[0] > 1.0 && e[0] < 3.0);
    }

    #[test]
    fn identical_values_single_bin() {
        assert!(quantile_discretize(&[2.0; 10], 4).unwrap().is_empty());
    }

    #[test]
    fn duplicate_quantiles_collapse() {
        let mut v = vec![0.0; 90];
        v.extend((1..=10).map(f64::from));
        let e = quantile_discretize(&v, 10).unwrap();
        assert!(e.windows(2).all(|w| w[0] < w[1]));
        assert!(e.len() < 9);
    }

    #[test]
    fn right_closed_bins() {
        let edges = [10.0, 20.0];
        assert_eq!(bin_index(&edges, 5.0), 0);
        assert_eq!(bin_index(&edges, 10.0), 1);
        assert_eq!(bin_index(&edges, 19.9), 1);
        assert_eq!(bin_index(&edges, 20.0), 2);
    }

    fn schema() -> FeatureSchema {
        FeatureSchema::new(
            vec![
                FieldSpec::categorical("city", FieldGroup::Query, vec!["hz".into(), "sh".into()]),
                FieldSpec::continuous("price", FieldGroup::Hotel, vec![100.0, 200.0]),
            ],
            MciNormalizers::default(),
            MciWeights::uniform(),
        )
        .unwrap()
    }

    fn record(city: &str, price: f64) -> RawRecord {
        let mut r = RawRecord::new();
        r.insert("city".into(), RawValue::Text(city.into()));
        r.insert("price".into(), RawValue::Number(price));
        r
    }

    #[test]
    fn encode_sample_rules() {
        let s = schema();
        let e = s.encode_sample(&record("beijing", 50.0), &mid_factors()).unwrap();
        assert_eq!(e.indices, vec![0, 0]);
        let e = s.encode_sample(&record("sh", 100.0), &mid_factors()).unwrap();
        assert_eq!(e.indices, vec![2, 1]);
        assert_eq!(e.mci.0[0], 0.5);
    }

    #[test]
    fn encode_sample_errors() {
        let s = schema();
        let mut r = record("hz", 1.0);
        r.remove("price");
        assert!(matches!(s.encode_sample(&r, &mid_factors()), Err(Error::Schema(_))));
        let mut r = record("hz", 1.0);
        r.insert("price".into(), RawValue::Text("cheap".into()));
        assert!(s.encode_sample(&r, &mid_factors()).is_err());
        let mut r = record("hz", 1.0);
        r.insert("stars".into(), RawValue::Number(3.0));
        assert!(s.encode_sample(&r, &mid_factors()).is_err());
    }

    #[test]
    fn schema_rejects_bad_edges() {
        let r = FeatureSchema::new(
            vec![FieldSpec::continuous("p", FieldGroup::Hotel, vec![2.0, 2.0])],
            MciNormalizers::default(),
            MciWeights::uniform(),
        );
        assert!(r.is_err());
    }

    #[test]
    fn schema_json_round_trip() {
        let s = schema();
        let back = FeatureSchema::from_json(&s.to_json().unwrap()).unwrap();
        assert_eq!(s, back);
        assert_eq!(back.encode_value(0, &RawValue::Text("sh".into())).unwrap(), 2);
    }

    #[test]
    fn embedding_dims_by_group() {
        assert_eq!(FieldGroup::Profile.embedding_dim(), 4);
        assert_eq!(FieldGroup::Query.embedding_dim(), 4);
        assert_eq!(FieldGroup::Context.embedding_dim(), 8);
        assert_eq!(FieldGroup::Hotel.embedding_dim(), 8);
        assert_eq!(schema().embedding_width(), 12);
    }
}
