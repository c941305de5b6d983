//! Start/end span scoring over the dialogue segment.

use ndarray::Array2;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autograd::{log_softmax_rows, Graph, ParamId, ParamStore, Var};
use crate::error::{Error, Result};

/// Logit assigned to positions outside the span mask.
pub const MASKED_LOGIT: f64 = -1e9;

pub const DEFAULT_MAX_SPAN_LEN: usize = 10;

/// Inclusive token span. `(0, 0)` denotes "no trigger".
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Span {
    pub start: usize,
    pub end: usize,
}

impl Span {
    pub const NONE: Span = Span { start: 0, end: 0 };

    pub fn new(start: usize, end: usize) -> Self {
        Self { start, end }
    }

    pub fn is_none(self) -> bool {
        self == Self::NONE
    }

    pub fn rows(self) -> Vec<usize> {
        (self.start..=self.end).collect()
    }

    #[allow(clippy::len_without_is_empty)]
    pub fn len(self) -> usize {
        self.end - self.start + 1
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SpanLogits {
    pub start: Vec<f64>,
    pub end: Vec<f64>,
    /// Valid positions: the dialogue segment plus index 0.
    pub mask: Vec<bool>,
}

impl SpanLogits {
    pub fn len(&self) -> usize {
        self.start.len()
    }

    pub fn is_empty(&self) -> bool {
        self.start.is_empty()
    }
}

#[derive(Debug, Clone)]
pub struct TriggerHead {
    start: ParamId,
    end: ParamId,
}

pub const START_WEIGHT: &str = "trigger.start.weight";
pub const END_WEIGHT: &str = "trigger.end.weight";

impl TriggerHead {
    pub fn init<R: Rng + ?Sized>(hidden: usize, std: f64, store: &mut ParamStore, rng: &mut R) -> Result<Self> {
        let normal = Normal::new(0.0, std).map_err(|e| Error::Config(format!("init_std: {e}")))?;
        store.insert(START_WEIGHT, Array2::from_shape_simple_fn((1, hidden), || normal.sample(rng)));
        store.insert(END_WEIGHT, Array2::from_shape_simple_fn((1, hidden), || normal.sample(rng)));
        Self::bind(hidden, store)
    }

    pub fn bind(hidden: usize, store: &ParamStore) -> Result<Self> {
        let get = |name: &str| {
            let id = store.id(name).ok_or_else(|| Error::MissingWeights(name.into()))?;
            if store.get(id).dim() != (1, hidden) {
                return Err(Error::Shape(format!("{name}: expected (1, {hidden})")));
            }
            Ok(id)
        };
        Ok(Self {
            start: get(START_WEIGHT)?,
            end: get(END_WEIGHT)?,
        })
    }

    /// Masked `1 × n` start and end logit rows for token matrix `h`.
    pub fn forward(&self, g: &mut Graph, h: Var, mask: &[bool]) -> (Var, Var) {
        let keep = Array2::from_shape_fn((1, mask.len()), |(_, j)| if mask[j] { 1.0 } else { 0.0 });
        let fill = Array2::from_shape_fn((1, mask.len()), |(_, j)| if mask[j] { 0.0 } else { MASKED_LOGIT });
        let out = [self.start, self.end].map(|w| {
            let w = g.param(w);
            let raw = g.matmul_t(w, h);
            let kept = g.mul_const(raw, keep.clone());
            g.shift(kept, &fill)
        });
        (out[0], out[1])
    }

    pub fn span_logits(&self, store: &ParamStore, h: &Array2<f64>, mask: &[bool]) -> SpanLogits {
        let mut g = Graph::new(store);
        let hv = g.input(h.clone());
        let (s, e) = self.forward(&mut g, hv, mask);
        logits_from_graph(&g, s, e, mask)
    }
}

pub fn logits_from_graph(g: &Graph, start: Var, end: Var, mask: &[bool]) -> SpanLogits {
    SpanLogits {
        start: g.value(start).iter().copied().collect(),
        end: g.value(end).iter().copied().collect(),
        mask: mask.to_vec(),
    }
}

/// Highest-scoring span by `start[i] + end[j]` over in-mask positions
/// `1 ≤ i ≤ j` with `j - i < max_span_len`, or `(0, 0)` if nothing beats
/// the no-trigger score `start[0] + end[0]`. Ties prefer smaller `i`, then
/// smaller `j`.
pub fn decode_span(logits: &SpanLogits, max_span_len: usize) -> Span {
    let n = logits.len();
    let mut best = Span::NONE;
    let mut best_score = logits.start[0] + logits.end[0];
    for i in 1..n {
        if !logits.mask[i] {
            continue;
        }
        for j in i..n.min(i + max_span_len) {
            if !logits.mask[j] {
                continue;
            }
            let score = logits.start[i] + logits.end[j];
            if score > best_score {
                best_score = score;
                best = Span::new(i, j);
            }
        }
    }
    best
}

fn check_gold(mask: &[bool], gold: Span) -> Result<()> {
    if gold.is_none() {
        return Ok(());
    }
    let ok = gold.start >= 1 && gold.start <= gold.end && gold.end < mask.len() && mask[gold.start] && mask[gold.end];
    if ok {
        Ok(())
    } else {
        Err(Error::InvalidSpan(format!(
            "gold span ({}, {}) is outside the dialogue segment",
            gold.start, gold.end
        )))
    }
}

/// Mean of the start and end cross-entropies.
pub fn trigger_loss(logits: &SpanLogits, gold: Span) -> Result<f64> {
    check_gold(&logits.mask, gold)?;
    let ls = log_softmax_rows(&Array2::from_shape_vec((1, logits.len()), logits.start.clone()).expect("row"));
    let le = log_softmax_rows(&Array2::from_shape_vec((1, logits.len()), logits.end.clone()).expect("row"));
    Ok(-0.5 * (ls[[0, gold.start]] + le[[0, gold.end]]))
}

/// Graph form of [`trigger_loss`].
pub fn trigger_loss_var(g: &mut Graph, start: Var, end: Var, mask: &[bool], gold: Span) -> Result<Var> {
    check_gold(mask, gold)?;
    let ls = g.log_softmax_rows(start);
    let le = g.log_softmax_rows(end);
    let a = g.pick(ls, 0, gold.start);
    let b = g.pick(le, 0, gold.end);
    let sum = g.add(a, b);
    Ok(g.scale(sum, -0.5))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn logits(start: Vec<f64>, end: Vec<f64>) -> SpanLogits {
        let mask = vec![true; start.len()];
        SpanLogits { start, end, mask }
    }

    #[test]
    fn masked_positions_get_surrogate() {
        let mut store = ParamStore::new();
        store.insert(START_WEIGHT, array![[1.0, 0.0]]);
        store.insert(END_WEIGHT, array![[0.0, 1.0]]);
        let head = TriggerHead::bind(2, &store).unwrap();
        let h = array![[1.0, 2.0], [3.0, -1.0], [0.5, 0.25]];
        let l = head.span_logits(&store, &h, &[true, false, true]);
        // manual dot products
        assert_eq!(l.start, vec![1.0, MASKED_LOGIT, 0.5]);
        assert_eq!(l.end, vec![2.0, MASKED_LOGIT, 0.25]);
        assert_eq!(l.len(), 3);
    }

    #[test]
    fn decode_unimodal_and_no_answer() {
        let mut s = vec![0.0; 12];
        let mut e = vec![0.0; 12];
        s[7] = 5.0;
        e[8] = 5.0;
        assert_eq!(decode_span(&logits(s.clone(), e.clone()), 10), Span::new(7, 8));
        s[0] = 6.0;
        e[0] = 6.0;
        assert_eq!(decode_span(&logits(s, e), 10), Span::NONE);
    }

    #[test]
    fn decode_respects_max_len_and_ties() {
        let s = vec![0.0, 1.0, 1.0, 0.0];
        let e = vec![0.0, 0.0, 0.0, 1.0];
        // (1,3) and (2,3) tie; smaller start wins
        assert_eq!(decode_span(&logits(s.clone(), e.clone()), 3), Span::new(1, 3));
        // length limit 2 excludes (1,3)
        assert_eq!(decode_span(&logits(s, e), 2), Span::new(2, 3));
    }

    #[test]
    fn loss_limits() {
        let mut s = vec![-50.0; 5];
        let mut e = vec![-50.0; 5];
        s[2] = 50.0;
        e[3] = 50.0;
        assert!(trigger_loss(&logits(s, e), Span::new(2, 3)).unwrap() < 1e-12);
        let u = trigger_loss(&logits(vec![0.3; 6], vec![0.3; 6]), Span::new(1, 4)).unwrap();
        assert!((u - 6f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn loss_matches_hand_softmax() {
        let s = vec![0.1, -0.4, 1.2, 0.0, 0.5];
        let e = vec![0.3, 0.2, -1.0, 2.0, 0.7];
        let ce = |v: &[f64], k: usize| {
            let z: f64 = v.iter().map(|x| x.exp()).sum();
            -(v[k].exp() / z).ln()
        };
        let expected = 0.5 * (ce(&s, 2) + ce(&e, 3));
        let got = trigger_loss(&logits(s, e), Span::new(2, 3)).unwrap();
        assert!((got - expected).abs() < 1e-12);
    }

    #[test]
    fn gold_in_masked_region_is_rejected() {
        let mut l = logits(vec![0.0; 4], vec![0.0; 4]);
        l.mask[2] = false;
        assert!(trigger_loss(&l, Span::new(2, 3)).is_err());
        assert!(trigger_loss(&l, Span::NONE).is_ok());
    }
}
