//! Score-ranked subnetwork selection and per-session mask bookkeeping.
//!
//! Every maskable tensor carries a score tensor of the same shape. A session's
//! mask keeps the top `round(c * n)` scores of each tensor; the cumulative mask
//! is the union of all finished sessions and marks weights that are frozen.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// One bit per weight of a tensor.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct BitMask(Vec<bool>);

impl BitMask {
    pub fn zeros(len: usize) -> Self {
        Self(vec![false; len])
    }

    pub fn ones(len: usize) -> Self {
        Self(vec![true; len])
    }

    pub fn from_bits(bits: Vec<bool>) -> Self {
        Self(bits)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn bits(&self) -> &[bool] {
        &self.0
    }

    pub fn get(&self, i: usize) -> bool {
        self.0[i]
    }

    pub fn count_ones(&self) -> usize {
        self.0.iter().filter(|&&b| b).count()
    }

    pub fn density(&self) -> f64 {
        if self.0.is_empty() {
            0.0
        } else {
            self.count_ones() as f64 / self.0.len() as f64
        }
    }

    /// Zeroes the entries of `values` whose bit is clear.
    pub fn apply(&self, values: &[f64]) -> Vec<f64> {
        values.iter().zip(&self.0).map(|(&v, &b)| if b { v } else { 0.0 }).collect()
    }
}

/// Number of weights a session keeps in a tensor of `n` weights.
pub fn kept_count(n: usize, capacity: f64) -> usize {
    ((capacity * n as f64).round() as usize).min(n)
}

/// Marks the `round(c * n)` largest scores; equal scores go to the lower index.
pub fn select_topc(scores: &[f64], capacity: f64) -> Result<BitMask> {
    if scores.is_empty() {
        return Err(Error::Empty("cannot select from an empty score tensor".into()));
    }
    if !(capacity > 0.0 && capacity <= 1.0) {
        return Err(Error::Config(format!("capacity must lie in (0, 1], got {capacity}")));
    }
    if let Some(bad) = scores.iter().find(|v| !v.is_finite()) {
        return Err(Error::NonFinite(format!("score {bad}")));
    }
    let k = kept_count(scores.len(), capacity);
    let mut bits = vec![false; scores.len()];
    if k == scores.len() {
        bits.iter_mut().for_each(|b| *b = true);
        return Ok(BitMask(bits));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    let by_rank = |a: &usize, b: &usize| scores[*b].total_cmp(&scores[*a]).then(a.cmp(b));
    if k > 0 {
        order.select_nth_unstable_by(k - 1, by_rank);
        for &i in &order[..k] {
            bits[i] = true;
        }
    }
    Ok(BitMask(bits))
}

fn same_len(a: usize, b: usize, what: &str) -> Result<()> {
    if a != b {
        return Err(Error::Shape(format!("{what}: {a} vs {b} entries")));
    }
    Ok(())
}

/// Elementwise OR of the previous cumulative mask with a session mask.
pub fn accumulate(prev: &BitMask, session: &BitMask) -> Result<BitMask> {
    same_len(prev.len(), session.len(), "accumulate")?;
    Ok(BitMask(prev.0.iter().zip(&session.0).map(|(&a, &b)| a | b).collect()))
}

/// `grad * m_s * (1 - M_prev)`: weights owned by earlier sessions get no update.
pub fn gate_weight_gradient(grad: &[f64], session: &BitMask, frozen: &BitMask) -> Result<Vec<f64>> {
    same_len(grad.len(), session.len(), "gradient vs session mask")?;
    same_len(grad.len(), frozen.len(), "gradient vs cumulative mask")?;
    Ok(grad
        .iter()
        .zip(session.0.iter().zip(&frozen.0))
        .map(|(&g, (&m, &f))| if m && !f { g } else { 0.0 })
        .collect())
}

/// Straight-through score gradient: the top-c indicator is treated as the
/// identity, so `dL/d score = dL/d(theta * m) * theta`.
pub fn score_gradient_ste(upstream: &[f64], theta: &[f64]) -> Result<Vec<f64>> {
    same_len(upstream.len(), theta.len(), "score gradient")?;
    Ok(upstream.iter().zip(theta).map(|(g, t)| g * t).collect())
}

/// Packs masks LSB-first, each tensor padded to a whole byte.
pub fn pack_masks(masks: &[BitMask]) -> Vec<u8> {
    let mut out = Vec::with_capacity(masks.iter().map(|m| m.len().div_ceil(8)).sum());
    for mask in masks {
        for chunk in mask.0.chunks(8) {
            let byte = chunk.iter().enumerate().fold(0u8, |acc, (i, &b)| acc | ((b as u8) << i));
            out.push(byte);
        }
    }
    out
}

pub fn unpack_masks(bytes: &[u8], sizes: &[usize]) -> Result<Vec<BitMask>> {
    let expected: usize = sizes.iter().map(|n| n.div_ceil(8)).sum();
    if bytes.len() != expected {
        return Err(Error::Checkpoint(format!(
            "mask stream has {} bytes, layout needs {expected}",
            bytes.len()
        )));
    }
    let mut masks = Vec::with_capacity(sizes.len());
    let mut pos = 0;
    for &n in sizes {
        let nbytes = n.div_ceil(8);
        let chunk = &bytes[pos..pos + nbytes];
        let bits: Vec<bool> = (0..n).map(|i| chunk[i / 8] >> (i % 8) & 1 == 1).collect();
        if n % 8 != 0 && chunk[nbytes - 1] >> (n % 8) != 0 {
            return Err(Error::Checkpoint("nonzero padding bits in mask stream".into()));
        }
        masks.push(BitMask(bits));
        pos += nbytes;
    }
    Ok(masks)
}

/// Per-session masks `m_s` and their running union `M_s`.
#[derive(Clone, Debug, PartialEq)]
pub struct SessionMaskSet {
    sizes: Vec<usize>,
    sessions: Vec<Vec<BitMask>>,
    cumulative: Vec<BitMask>,
}

impl SessionMaskSet {
    pub fn new(sizes: Vec<usize>) -> Self {
        let cumulative = sizes.iter().map(|&n| BitMask::zeros(n)).collect();
        Self { sizes, sessions: Vec::new(), cumulative }
    }

    pub fn sizes(&self) -> &[usize] {
        &self.sizes
    }

    pub fn session_count(&self) -> usize {
        self.sessions.len()
    }

    pub fn session(&self, s: usize) -> Result<&[BitMask]> {
        self.sessions
            .get(s)
            .map(Vec::as_slice)
            .ok_or(Error::UnknownSession { session: s, available: self.sessions.len() })
    }

    /// Union of all finished sessions.
    pub fn cumulative(&self) -> &[BitMask] {
        &self.cumulative
    }

    /// Union of sessions `0..s` (all zeros for `s == 0`).
    pub fn cumulative_before(&self, s: usize) -> Result<Vec<BitMask>> {
        if s > self.sessions.len() {
            return Err(Error::UnknownSession { session: s, available: self.sessions.len() });
        }
        let mut acc: Vec<BitMask> = self.sizes.iter().map(|&n| BitMask::zeros(n)).collect();
        for masks in &self.sessions[..s] {
            for (a, m) in acc.iter_mut().zip(masks) {
                *a = accumulate(a, m)?;
            }
        }
        Ok(acc)
    }

    /// Freezes a finished session's masks and folds them into the union.
    pub fn push_session(&mut self, masks: Vec<BitMask>) -> Result<()> {
        same_len(masks.len(), self.sizes.len(), "session mask tensor count")?;
        for (m, &n) in masks.iter().zip(&self.sizes) {
            same_len(m.len(), n, "session mask size")?;
        }
        for (c, m) in self.cumulative.iter_mut().zip(&masks) {
            *c = accumulate(c, m)?;
        }
        self.sessions.push(masks);
        Ok(())
    }

    /// Drops sessions after the first `keep`, recomputing the union.
    pub fn truncate(&mut self, keep: usize) -> Result<()> {
        self.sessions.truncate(keep);
        self.cumulative = self.cumulative_before(self.sessions.len())?;
        Ok(())
    }

    /// Fraction of session `s`'s selected weights already owned by earlier sessions.
    pub fn reuse_fraction(&self, s: usize) -> Result<f64> {
        let masks = self.session(s)?;
        let before = self.cumulative_before(s)?;
        let (mut shared, mut total) = (0usize, 0usize);
        for (m, b) in masks.iter().zip(&before) {
            total += m.count_ones();
            shared += m.0.iter().zip(&b.0).filter(|(&x, &y)| x && y).count();
        }
        Ok(if total == 0 { 0.0 } else { shared as f64 / total as f64 })
    }
}

/// Learnable ranking scores, one tensor per maskable weight tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct ScoreState {
    pub scores: Vec<Vec<f64>>,
    pub seed: u64,
}

impl ScoreState {
    /// Draws each tensor's scores from `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`.
    ///
    /// `shapes` lists `(len, fan_in)` per tensor.
    pub fn init(shapes: &[(usize, usize)], seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let scores = shapes
            .iter()
            .map(|&(len, fan_in)| {
                let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
                (0..len).map(|_| rng.gen_range(-bound..bound)).collect()
            })
            .collect();
        Self { scores, seed }
    }

    /// Recomputes every tensor's session mask from the current scores.
    pub fn masks(&self, capacities: &[f64]) -> Result<Vec<BitMask>> {
        self.scores.iter().zip(capacities).map(|(s, &c)| select_topc(s, c)).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;
    use std::collections::BTreeSet;

    fn mask(bits: &[u8]) -> BitMask {
        BitMask(bits.iter().map(|&b| b == 1).collect())
    }

    #[test]
    fn selects_two_largest() {
        assert_eq!(select_topc(&[0.1, 0.5, 0.3, 0.9], 0.5).unwrap(), mask(&[0, 1, 0, 1]));
    }

    #[test]
    fn full_capacity_keeps_everything() {
        assert_eq!(select_topc(&[0.3, -2.0, 7.0], 1.0).unwrap(), BitMask::ones(3));
    }

    #[test]
    fn ties_go_to_lower_index() {
        let scores = [0.2; 4];
        let got = select_topc(&scores, 0.5).unwrap();
        assert_eq!(got, mask(&[1, 1, 0, 0]));
        // every 2-subset has the same score sum, so the tie-break is the only freedom
        let best: f64 = scores.iter().zip(got.bits()).filter(|(_, &b)| b).map(|(s, _)| s).sum();
        for a in 0..4 {
            for b in a + 1..4 {
                assert_eq!(scores[a] + scores[b], best);
            }
        }
    }

    #[test]
    fn select_errors() {
        assert!(select_topc(&[], 0.5).is_err());
        assert!(select_topc(&[1.0], 0.0).is_err());
        assert!(select_topc(&[f64::NAN], 0.5).is_err());
    }

    #[test]
    fn accumulate_examples() {
        assert_eq!(accumulate(&mask(&[1, 0, 0]), &mask(&[0, 0, 1])).unwrap(), mask(&[1, 0, 1]));
        let m = mask(&[1, 0, 1, 1]);
        assert_eq!(accumulate(&m, &m).unwrap(), m);
        assert!(accumulate(&mask(&[1]), &mask(&[1, 0])).is_err());
    }

    #[test]
    fn cumulative_matches_set_union() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let mut set = SessionMaskSet::new(vec![1000]);
        let mut union = BTreeSet::new();
        for _ in 0..3 {
            let scores: Vec<f64> = (0..1000).map(|_| rng.gen()).collect();
            let m = select_topc(&scores, 0.3).unwrap();
            assert_eq!(m.count_ones(), 300);
            union.extend(m.bits().iter().enumerate().filter(|(_, &b)| b).map(|(i, _)| i));
            let before = set.cumulative()[0].count_ones();
            set.push_session(vec![m]).unwrap();
            assert!(set.cumulative()[0].count_ones() >= before);
        }
        assert_eq!(set.cumulative()[0].count_ones(), union.len());
        for i in 0..1000 {
            assert_eq!(set.cumulative()[0].get(i), union.contains(&i));
        }
    }

    #[test]
    fn gate_examples() {
        let g = gate_weight_gradient(&[1.0, 2.0, 3.0], &BitMask::ones(3), &mask(&[0, 1, 0])).unwrap();
        assert_eq!(g, vec![1.0, 0.0, 3.0]);
        let g = gate_weight_gradient(&[1.0, -2.0], &BitMask::ones(2), &BitMask::ones(2)).unwrap();
        assert_eq!(g, vec![0.0, 0.0]);
        assert!(gate_weight_gradient(&[1.0], &BitMask::ones(2), &BitMask::ones(1)).is_err());
    }

    #[test]
    fn sgd_step_leaves_frozen_weights_bit_identical() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let theta: Vec<f64> = (0..100).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let grad: Vec<f64> = (0..100).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let frozen = BitMask((0..100).map(|_| rng.gen_bool(0.4)).collect());
        let session = BitMask((0..100).map(|_| rng.gen_bool(0.5)).collect());
        let gated = gate_weight_gradient(&grad, &session, &frozen).unwrap();
        let stepped: Vec<f64> = theta.iter().zip(&gated).map(|(t, g)| t - 0.1 * g).collect();
        for i in 0..100 {
            if frozen.get(i) {
                assert_eq!(stepped[i].to_bits(), theta[i].to_bits());
            }
        }
    }

    #[test]
    fn ste_examples() {
        assert_eq!(score_gradient_ste(&[2.0, -1.0], &[0.5, 4.0]).unwrap(), vec![1.0, -4.0]);
        assert_eq!(score_gradient_ste(&[3.0, 1.0], &[0.0, 0.0]).unwrap(), vec![0.0, 0.0]);
    }

    #[test]
    fn pack_sizes_and_corruption() {
        let m = BitMask((0..10).map(|i| i % 3 == 0).collect());
        let bytes = pack_masks(std::slice::from_ref(&m));
        assert_eq!(bytes.len(), 2);
        assert!(unpack_masks(&bytes, &[10, 1]).is_err());
        let mut bad = bytes.clone();
        bad[1] |= 0x80;
        assert!(unpack_masks(&bad, &[10]).is_err());
    }

    #[test]
    fn reuse_fraction_counts_overlap() {
        let mut set = SessionMaskSet::new(vec![4]);
        set.push_session(vec![mask(&[1, 1, 0, 0])]).unwrap();
        set.push_session(vec![mask(&[0, 1, 1, 0])]).unwrap();
        assert_eq!(set.reuse_fraction(0).unwrap(), 0.0);
        assert_eq!(set.reuse_fraction(1).unwrap(), 0.5);
        assert!(set.session(2).is_err());
    }

    #[test]
    fn score_init_is_seeded_and_bounded() {
        let a = ScoreState::init(&[(50, 4), (10, 100)], 9);
        let b = ScoreState::init(&[(50, 4), (10, 100)], 9);
        assert_eq!(a, b);
        assert!(a.scores[0].iter().all(|v| v.abs() <= 0.5));
        assert!(a.scores[1].iter().all(|v| v.abs() <= 0.1));
        assert_ne!(a, ScoreState::init(&[(50, 4), (10, 100)], 10));
    }

    proptest! {
        #[test]
        fn selection_is_invariant_to_positive_affine_maps(
            scores in prop::collection::vec(-10.0f64..10.0, 1..64),
            c in 0.05f64..1.0,
            a in 0.1f64..10.0,
            b in -5.0f64..5.0,
        ) {
            let shifted: Vec<f64> = scores.iter().map(|s| a * s + b).collect();
            // affine maps can merge nearly-equal floats into ties; only compare when order is strict
            let mut order: Vec<usize> = (0..scores.len()).collect();
            order.sort_by(|&i, &j| scores[j].total_cmp(&scores[i]).then(i.cmp(&j)));
            let strict = order.windows(2).all(|w| shifted[w[0]] > shifted[w[1]] || scores[w[0]] == scores[w[1]]);
            prop_assume!(strict);
            prop_assert_eq!(select_topc(&scores, c).unwrap(), select_topc(&shifted, c).unwrap());
        }

        #[test]
        fn selection_has_exact_capacity(scores in prop::collection::vec(-1.0f64..1.0, 1..200), c in 0.01f64..1.0) {
            let m = select_topc(&scores, c).unwrap();
            prop_assert_eq!(m.count_ones(), kept_count(scores.len(), c));
        }

        #[test]
        fn pack_round_trip(bits in prop::collection::vec(prop::collection::vec(any::<bool>(), 1..64), 1..5)) {
            let masks: Vec<BitMask> = bits.into_iter().map(BitMask).collect();
            let sizes: Vec<usize> = masks.iter().map(BitMask::len).collect();
            let back = unpack_masks(&pack_masks(&masks), &sizes).unwrap();
            for (a, b) in masks.iter().zip(&back) {
                prop_assert_eq!(a.density(), b.density());
            }
            prop_assert_eq!(back, masks);
        }
    }
}
