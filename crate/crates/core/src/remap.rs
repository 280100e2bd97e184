//! Closed-form next-token logit remapping.
//!
//! Within a candidate mask taken from the final layer, each token's logit
//! becomes
//!
//! ```text
//! z~ = (1 + alpha) * z_final - alpha * z_peak + beta_eff * z_gt
//! beta_eff = beta * pi_max(gt layer)
//! ```
//!
//! and the next token is the arg-max of `z~` over the mask. Tokens outside the
//! mask are never eligible. Ties everywhere resolve to the lower token id.

use std::borrow::Cow;
use std::cmp::Ordering;
use std::str::FromStr;

use serde::{Serialize, Serializer};

use crate::error::{Error, Result};

/// Slack on the nucleus threshold so that `top_p = 1` keeps every token
/// despite round-off in the cumulative sum.
const NUCLEUS_EPS: f64 = 1e-12;

/// Sparse logits of one layer over an exported token-id set.
#[derive(Debug, Clone, PartialEq)]
pub struct LogitView {
    layer: usize,
    token_ids: Vec<u32>,
    values: Vec<f64>,
    pi_max: Option<f64>,
}

impl LogitView {
    pub fn new(layer: usize, token_ids: Vec<u32>, values: Vec<f64>, pi_max: Option<f64>) -> Result<Self> {
        if token_ids.is_empty() {
            return Err(Error::Invalid(format!("layer {layer}: empty logit view")));
        }
        if token_ids.len() != values.len() {
            return Err(Error::Invalid(format!(
                "layer {layer}: {} token ids but {} logits",
                token_ids.len(),
                values.len()
            )));
        }
        if token_ids.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Invalid(format!(
                "layer {layer}: token ids must be strictly increasing"
            )));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::Invalid(format!(
                "layer {layer}: non-finite logit for token {}",
                token_ids[i]
            )));
        }
        if let Some(p) = pi_max {
            if !(p > 0.0 && p <= 1.0) {
                return Err(Error::Invalid(format!(
                    "layer {layer}: pi_max {p} outside (0, 1]"
                )));
            }
        }
        Ok(Self {
            layer,
            token_ids,
            values,
            pi_max,
        })
    }

    pub fn layer(&self) -> usize {
        self.layer
    }

    pub fn token_ids(&self) -> &[u32] {
        &self.token_ids
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn pi_max(&self) -> Option<f64> {
        self.pi_max
    }

    pub fn len(&self) -> usize {
        self.token_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.token_ids.is_empty()
    }

    pub fn value_of(&self, token: u32) -> Option<f64> {
        self.token_ids
            .binary_search(&token)
            .ok()
            .map(|i| self.values[i])
    }
}

/// Which distribution the candidate mask is drawn from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum MaskBasis {
    /// Final-layer distribution (default).
    #[default]
    Final,
    /// Softmax of the composed logits.
    Composed,
}

impl MaskBasis {
    pub fn name(self) -> &'static str {
        match self {
            MaskBasis::Final => "final",
            MaskBasis::Composed => "composed",
        }
    }
}

impl FromStr for MaskBasis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "final" => Ok(MaskBasis::Final),
            "composed" => Ok(MaskBasis::Composed),
            other => Err(Error::Config(format!("unknown mask basis {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct RemapConfig {
    pub alpha: f64,
    pub beta: f64,
    pub top_k: usize,
    pub top_p: f64,
    pub mask_basis: MaskBasis,
}

impl Default for RemapConfig {
    fn default() -> Self {
        Self {
            alpha: 0.1,
            beta: 0.0,
            top_k: 10,
            top_p: 0.9,
            mask_basis: MaskBasis::Final,
        }
    }
}

impl RemapConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return Err(Error::Config(format!("alpha must be ≥ 0, got {}", self.alpha)));
        }
        if !(self.beta >= 0.0 && self.beta.is_finite()) {
            return Err(Error::Config(format!("beta must be ≥ 0, got {}", self.beta)));
        }
        if self.top_k == 0 {
            return Err(Error::Config("top-k must be positive".into()));
        }
        if !(self.top_p > 0.0 && self.top_p <= 1.0) {
            return Err(Error::Config(format!("top-p must lie in (0, 1], got {}", self.top_p)));
        }
        Ok(())
    }
}

/// Max-shifted softmax.
pub fn softmax(values: &[f64]) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(values.len());
    softmax_into(values, &mut out)?;
    Ok(out)
}

fn softmax_into(values: &[f64], out: &mut Vec<f64>) -> Result<()> {
    if values.is_empty() {
        return Err(Error::Invalid("softmax of an empty vector".into()));
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::Invalid("softmax of non-finite logits".into()));
    }
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    out.clear();
    out.extend(values.iter().map(|v| (v - max).exp()));
    let sum: f64 = out.iter().sum();
    out.iter_mut().for_each(|p| *p /= sum);
    Ok(())
}

/// Greedy choice over a view: arg-max value, lower id on ties.
pub fn greedy_token(view: &LogitView) -> u32 {
    view.token_ids[argmax_by_id(&view.values, &view.token_ids, 0..view.len())]
}

fn argmax_by_id(values: &[f64], ids: &[u32], positions: impl IntoIterator<Item = usize>) -> usize {
    let mut best: Option<usize> = None;
    for i in positions {
        best = match best {
            None => Some(i),
            Some(b) if values[i] > values[b] || (values[i] == values[b] && ids[i] < ids[b]) => Some(i),
            keep => keep,
        };
    }
    best.expect("non-empty candidate positions")
}

const SMALL_TOP_K: usize = 64;

/// Descending value, ascending id.
fn rank(values: &[f64], ids: &[u32], a: usize, b: usize) -> Ordering {
    values[b]
        .partial_cmp(&values[a])
        .unwrap_or(Ordering::Equal)
        .then(ids[a].cmp(&ids[b]))
}

/// Token ids surviving both the top-k cut and the nucleus prefix of the
/// final-layer distribution, in ascending id order.
pub fn candidate_mask(final_view: &LogitView, cfg: &RemapConfig) -> Result<Vec<u32>> {
    cfg.validate()?;
    let mut scratch = Remapper::default();
    scratch.mask_positions(&final_view.values, &final_view.token_ids, cfg)?;
    let mut ids: Vec<u32> = scratch.mask.iter().map(|&i| final_view.token_ids[i]).collect();
    ids.sort_unstable();
    Ok(ids)
}

/// `(1 + alpha) * z_final - alpha * z_peak` on the final view's tokens.
pub fn contrast_alpha(final_view: &LogitView, peak: &LogitView, alpha: f64) -> Result<LogitView> {
    if !(alpha >= 0.0 && alpha.is_finite()) {
        return Err(Error::Config(format!("alpha must be ≥ 0, got {alpha}")));
    }
    let peak_values = aligned(final_view, peak)?;
    let values = final_view
        .values
        .iter()
        .zip(peak_values.iter())
        .map(|(z, p)| (1.0 + alpha) * z - alpha * p)
        .collect();
    LogitView::new(final_view.layer, final_view.token_ids.clone(), values, None)
}

/// `beta * pi_max` of the gt layer. With `beta = 0` the view is not consulted.
pub fn gate_beta(gt: &LogitView, beta: f64) -> Result<f64> {
    if !(beta >= 0.0 && beta.is_finite()) {
        return Err(Error::Config(format!("beta must be ≥ 0, got {beta}")));
    }
    if beta == 0.0 {
        return Ok(0.0);
    }
    let pi = gt.pi_max.ok_or_else(|| {
        Error::TraceContract(format!(
            "layer {} carries no pi_max but beta = {beta}",
            gt.layer
        ))
    })?;
    Ok(beta * pi)
}

fn aligned<'a>(final_view: &LogitView, other: &'a LogitView) -> Result<Cow<'a, [f64]>> {
    if final_view.token_ids == other.token_ids {
        return Ok(Cow::Borrowed(&other.values));
    }
    final_view
        .token_ids
        .iter()
        .map(|&t| {
            other.value_of(t).ok_or_else(|| {
                Error::TraceContract(format!(
                    "token {t} of the final layer is missing from layer {}",
                    other.layer
                ))
            })
        })
        .collect::<Result<Vec<_>>>()
        .map(Cow::Owned)
}

/// Remapped logits for one step. Masked tokens hold `None`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RemapOutcome {
    pub token_ids: Vec<u32>,
    #[serde(serialize_with = "serialize_masked")]
    pub values: Vec<Option<f64>>,
    pub chosen: u32,
    pub beta_eff: f64,
}

fn serialize_masked<S: Serializer>(values: &[Option<f64>], s: S) -> std::result::Result<S::Ok, S::Error> {
    use serde::ser::SerializeSeq;
    let mut seq = s.serialize_seq(Some(values.len()))?;
    for v in values {
        match v {
            Some(x) => seq.serialize_element(x)?,
            None => seq.serialize_element("masked")?,
        }
    }
    seq.end()
}

impl RemapOutcome {
    pub fn value_of(&self, token: u32) -> Option<f64> {
        self.token_ids
            .binary_search(&token)
            .ok()
            .and_then(|i| self.values[i])
    }

    pub fn mask(&self) -> Vec<u32> {
        self.token_ids
            .iter()
            .zip(&self.values)
            .filter(|(_, v)| v.is_some())
            .map(|(&t, _)| t)
            .collect()
    }
}

/// Full remap: mask, contrast against the peak layer, gated correction from the gt layer.
pub fn compose_full(
    final_view: &LogitView,
    peak: &LogitView,
    gt: &LogitView,
    cfg: &RemapConfig,
) -> Result<RemapOutcome> {
    let mut remapper = Remapper::default();
    let chosen = remapper.compose(final_view, peak, gt, cfg)?;
    Ok(remapper.outcome(final_view, chosen))
}

/// Reusable buffers for repeated remaps; no allocation once warmed up to the
/// largest view size.
#[derive(Debug, Default)]
pub struct Remapper {
    composed: Vec<f64>,
    probs: Vec<f64>,
    order: Vec<usize>,
    mask: Vec<usize>,
    beta_eff: f64,
}

impl Remapper {
    /// Runs the remap and returns the chosen token id.
    pub fn compose(
        &mut self,
        final_view: &LogitView,
        peak: &LogitView,
        gt: &LogitView,
        cfg: &RemapConfig,
    ) -> Result<u32> {
        cfg.validate()?;
        let z = &final_view.values;
        self.beta_eff = gate_beta(gt, cfg.beta)?;
        self.composed.clear();
        if cfg.alpha == 0.0 {
            self.composed.extend_from_slice(z);
        } else {
            let p = aligned(final_view, peak)?;
            let (a1, a) = (1.0 + cfg.alpha, cfg.alpha);
            self.composed
                .extend(z.iter().zip(p.iter()).map(|(z, p)| a1 * z - a * p));
        }
        if self.beta_eff != 0.0 {
            let g = aligned(final_view, gt)?;
            let b = self.beta_eff;
            self.composed
                .iter_mut()
                .zip(g.iter())
                .for_each(|(c, g)| *c += b * g);
        }
        match cfg.mask_basis {
            MaskBasis::Final => self.mask_positions(z, &final_view.token_ids, cfg)?,
            MaskBasis::Composed => {
                let composed = std::mem::take(&mut self.composed);
                let r = self.mask_positions(&composed, &final_view.token_ids, cfg);
                self.composed = composed;
                r?
            }
        }
        let best = argmax_by_id(&self.composed, &final_view.token_ids, self.mask.iter().copied());
        Ok(final_view.token_ids[best])
    }

    pub fn beta_eff(&self) -> f64 {
        self.beta_eff
    }

    /// Materializes the last remap.
    pub fn outcome(&self, final_view: &LogitView, chosen: u32) -> RemapOutcome {
        let mut values = vec![None; final_view.len()];
        for &i in &self.mask {
            values[i] = Some(self.composed[i]);
        }
        RemapOutcome {
            token_ids: final_view.token_ids.clone(),
            values,
            chosen,
            beta_eff: self.beta_eff,
        }
    }

    fn mask_positions(&mut self, values: &[f64], ids: &[u32], cfg: &RemapConfig) -> Result<()> {
        softmax_into(values, &mut self.probs)?;
        let n = values.len();
        let k = cfg.top_k.min(n);
        self.order.clear();
        if k <= SMALL_TOP_K {
            // One pass keeping the k best in rank order.
            for i in 0..n {
                if self.order.len() == k {
                    let worst = self.order[k - 1];
                    if rank(values, ids, i, worst) != Ordering::Less {
                        continue;
                    }
                    self.order.pop();
                }
                let at = self
                    .order
                    .partition_point(|&j| rank(values, ids, j, i) == Ordering::Less);
                self.order.insert(at, i);
            }
        } else {
            self.order.extend(0..n);
            if k < n {
                self.order
                    .select_nth_unstable_by(k - 1, |&a, &b| rank(values, ids, a, b));
                self.order.truncate(k);
            }
            self.order.sort_unstable_by(|&a, &b| rank(values, ids, a, b));
        }
        self.mask.clear();
        let mut cumulative = 0.0;
        for &i in &self.order {
            self.mask.push(i);
            cumulative += self.probs[i];
            if cumulative >= cfg.top_p - NUCLEUS_EPS {
                break;
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn view(layer: usize, values: &[f64]) -> LogitView {
        LogitView::new(layer, (0..values.len() as u32).collect(), values.to_vec(), Some(0.5)).unwrap()
    }

    fn open() -> RemapConfig {
        RemapConfig {
            top_p: 1.0,
            ..RemapConfig::default()
        }
    }

    #[test]
    fn defaults() {
        let cfg = RemapConfig::default();
        assert_eq!((cfg.alpha, cfg.beta, cfg.top_k, cfg.top_p), (0.1, 0.0, 10, 0.9));
        assert_eq!(cfg.mask_basis, MaskBasis::Final);
    }

    #[test]
    fn softmax_examples() {
        assert_eq!(softmax(&[0.0, 0.0]).unwrap(), vec![0.5, 0.5]);
        let p = softmax(&[1000.0, 0.0]).unwrap();
        assert!((p[0] - 1.0).abs() < 1e-12 && p[1] < 1e-300 && p[1] >= 0.0);
        let p = softmax(&[3.0, 2.0, 1.0, 0.0]).unwrap();
        // e^-k / Σ e^-j for k = 0..3
        let z: f64 = (0..4).map(|k| (-(k as f64)).exp()).sum();
        for (k, &pk) in p.iter().enumerate() {
            assert!((pk - (-(k as f64)).exp() / z).abs() < 1e-15);
        }
        for (got, want) in p.iter().zip([0.6439, 0.2369, 0.0871, 0.0321]) {
            assert!((got - want).abs() < 1e-4);
        }
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        assert!(softmax(&[]).is_err());
    }

    #[test]
    fn mask_examples() {
        let v = view(0, &[3.0, 2.0, 1.0, 0.0]);
        assert_eq!(candidate_mask(&v, &RemapConfig::default()).unwrap(), vec![0, 1, 2]);
        let k1 = RemapConfig {
            top_k: 1,
            top_p: 0.3,
            ..RemapConfig::default()
        };
        assert_eq!(candidate_mask(&v, &k1).unwrap(), vec![0]);
        assert_eq!(candidate_mask(&v, &open()).unwrap(), vec![0, 1, 2, 3]);
        // Equal values: the lower id ranks first.
        let tied = view(0, &[1.0, 1.0, 1.0]);
        let k2 = RemapConfig { top_k: 2, ..open() };
        assert_eq!(candidate_mask(&tied, &k2).unwrap(), vec![0, 1]);
    }

    #[test]
    fn contrast_examples() {
        let f = view(31, &[2.0, 1.0]);
        let p = view(12, &[3.0, 0.0]);
        assert_eq!(contrast_alpha(&f, &p, 0.0).unwrap().values(), f.values());
        assert_eq!(contrast_alpha(&f, &f, 0.7).unwrap().values(), f.values());
        let c = contrast_alpha(&f, &p, 0.1).unwrap();
        assert!((c.values()[0] - 1.9).abs() < 1e-12 && (c.values()[1] - 1.1).abs() < 1e-12);
        let short = LogitView::new(12, vec![0], vec![1.0], None).unwrap();
        assert!(matches!(contrast_alpha(&f, &short, 0.1), Err(Error::TraceContract(_))));
    }

    #[test]
    fn contrast_aligns_superset_views() {
        let f = LogitView::new(31, vec![4, 9], vec![2.0, 1.0], None).unwrap();
        let p = LogitView::new(12, vec![1, 4, 9], vec![7.0, 3.0, 0.0], None).unwrap();
        let c = contrast_alpha(&f, &p, 0.1).unwrap();
        assert!((c.values()[0] - 1.9).abs() < 1e-12);
    }

    #[test]
    fn gate_examples() {
        let gt = LogitView::new(20, vec![0], vec![0.0], Some(0.25)).unwrap();
        assert!((gate_beta(&gt, 0.6).unwrap() - 0.15).abs() < 1e-15);
        let none = LogitView::new(20, vec![0], vec![0.0], None).unwrap();
        assert_eq!(gate_beta(&none, 0.0).unwrap(), 0.0);
        assert!(matches!(gate_beta(&none, 0.2), Err(Error::TraceContract(_))));
        let one = LogitView::new(20, vec![0], vec![0.0], Some(1.0)).unwrap();
        assert_eq!(gate_beta(&one, 0.6).unwrap(), 0.6);
    }

    #[test]
    fn compose_examples() {
        let f = view(31, &[2.0, 1.9]);
        let peak = view(12, &[5.0, 0.0]);
        let gt = view(20, &[0.0, 0.0]);
        let zero = RemapConfig {
            alpha: 0.0,
            beta: 0.0,
            ..open()
        };
        assert_eq!(compose_full(&f, &peak, &gt, &zero).unwrap().chosen, 0);

        let a = RemapConfig { alpha: 0.5, ..open() };
        let out = compose_full(&f, &peak, &gt, &a).unwrap();
        assert!((out.values[0].unwrap() - 0.5).abs() < 1e-12);
        assert!((out.values[1].unwrap() - 2.85).abs() < 1e-12);
        assert_eq!(out.chosen, 1);

        let f = view(31, &[2.0, 1.0]);
        let peak = view(12, &[3.0, 0.0]);
        let gt = view(20, &[0.0, 4.0]);
        let ab = RemapConfig {
            alpha: 0.1,
            beta: 0.6,
            ..open()
        };
        let out = compose_full(&f, &peak, &gt, &ab).unwrap();
        assert!((out.beta_eff - 0.3).abs() < 1e-12);
        assert!((out.values[0].unwrap() - 1.9).abs() < 1e-12);
        assert!((out.values[1].unwrap() - 2.3).abs() < 1e-12);
        assert_eq!(out.chosen, 1);
    }

    #[test]
    fn masked_tokens_are_excluded_and_serialized_as_sentinel() {
        let f = view(31, &[3.0, 2.0, 1.0, 0.0]);
        let peak = view(12, &[0.0, 0.0, 0.0, -100.0]);
        let out = compose_full(&f, &peak, &f, &RemapConfig { alpha: 1.0, ..RemapConfig::default() }).unwrap();
        assert_eq!(out.values[3], None);
        assert_eq!(out.chosen, 0);
        assert_eq!(out.mask(), vec![0, 1, 2]);
        let json = serde_json::to_string(&out).unwrap();
        assert!(json.contains("\"masked\""), "{json}");
    }

    #[test]
    fn composed_mask_basis() {
        let f = view(31, &[3.0, 2.0, 1.0, 0.0]);
        let peak = view(12, &[0.0, 0.0, 0.0, -100.0]);
        let cfg = RemapConfig {
            alpha: 1.0,
            top_k: 1,
            mask_basis: MaskBasis::Composed,
            ..RemapConfig::default()
        };
        let out = compose_full(&f, &peak, &f, &cfg).unwrap();
        assert_eq!(out.chosen, 3);
    }

    fn views() -> impl Strategy<Value = (Vec<f64>, Vec<f64>, Vec<f64>, f64)> {
        (1usize..12).prop_flat_map(|m| {
            (
                proptest::collection::vec(-8i32..8, m),
                proptest::collection::vec(-8i32..8, m),
                proptest::collection::vec(-8i32..8, m),
                1i32..16,
            )
                .prop_map(|(a, b, c, pi)| {
                    let f = |v: Vec<i32>| v.into_iter().map(|x| f64::from(x) / 4.0).collect();
                    (f(a), f(b), f(c), f64::from(pi) / 16.0)
                })
        })
    }

    proptest! {
        #[test]
        fn remap_identities((zf, zp, zg, pi) in views(), alpha_q in 0u8..16, k in 1usize..12, p_q in 1u8..=16, shift in -16i32..16) {
            let m = zf.len();
            let ids: Vec<u32> = (0..m as u32).map(|i| 3 * i + 1).collect();
            let mk = |layer, v: &Vec<f64>| LogitView::new(layer, ids.clone(), v.clone(), Some(pi)).unwrap();
            let (f, p, g) = (mk(31, &zf), mk(12, &zp), mk(20, &zg));
            let cfg = RemapConfig { alpha: f64::from(alpha_q) / 16.0, beta: 0.0, top_k: k, top_p: f64::from(p_q) / 16.0, mask_basis: MaskBasis::Final };

            let zero = RemapConfig { alpha: 0.0, ..cfg };
            prop_assert_eq!(compose_full(&f, &p, &g, &zero).unwrap().chosen, greedy_token(&f));

            let same = compose_full(&f, &f, &g, &cfg).unwrap();
            for (i, v) in same.values.iter().enumerate() {
                if let Some(v) = v { prop_assert_eq!(*v, zf[i]); }
            }

            let out = compose_full(&f, &p, &g, &cfg).unwrap();
            let mask = candidate_mask(&f, &cfg).unwrap();
            prop_assert!(mask.contains(&out.chosen));
            prop_assert!(mask.contains(&greedy_token(&f)));

            let c = f64::from(shift);
            let fs = mk(31, &zf.iter().map(|v| v + c).collect());
            let ps = mk(12, &zp.iter().map(|v| v + c).collect());
            prop_assert_eq!(compose_full(&fs, &ps, &g, &cfg).unwrap().chosen, out.chosen);
        }
    }

    // Oracle: sort everything by (value desc, id asc), cut at k, then take the
    // shortest prefix reaching p.
    fn naive_mask(values: &[f64], k: usize, p: f64) -> Vec<u32> {
        let probs = softmax(values).unwrap();
        let mut order: Vec<usize> = (0..values.len()).collect();
        order.sort_by(|&a, &b| values[b].partial_cmp(&values[a]).unwrap().then(a.cmp(&b)));
        let mut out = Vec::new();
        let mut cum = 0.0;
        for &i in order.iter().take(k) {
            out.push(i as u32);
            cum += probs[i];
            if cum >= p - NUCLEUS_EPS {
                break;
            }
        }
        out.sort_unstable();
        out
    }

    proptest! {
        #[test]
        fn mask_matches_full_sort(values in proptest::collection::vec(-4i32..4, 1..300), k in 1usize..200, p_q in 1u8..=20) {
            let values: Vec<f64> = values.into_iter().map(|v| v as f64 * 0.5).collect();
            let p = f64::from(p_q) / 20.0;
            let cfg = RemapConfig { top_k: k, top_p: p, ..RemapConfig::default() };
            prop_assert_eq!(candidate_mask(&view(31, &values), &cfg).unwrap(), naive_mask(&values, k, p));
        }
    }
}
