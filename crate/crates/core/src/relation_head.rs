//! Bilinear attention fusion of the relation-name embedding with span
//! embeddings, followed by a sigmoid classifier.

use ndarray::Array2;
use rand::Rng;
use rand_distr::{Bernoulli, Distribution, Normal};

use crate::autograd::{Graph, ParamId, ParamStore, Var};
use crate::error::{Error, Result};

pub const PROB_EPS: f64 = 1e-7;
pub const DEFAULT_DROPOUT: f64 = 0.1;

pub const ATTENTION_WEIGHT: &str = "relation.attention.weight";
pub const OUTPUT_WEIGHT: &str = "relation.output.weight";
pub const OUTPUT_BIAS: &str = "relation.output.bias";

#[derive(Debug, Clone)]
pub struct RelationHead {
    pub hidden: usize,
    pub dropout: f64,
    attention: ParamId,
    out_weight: ParamId,
    out_bias: ParamId,
}

impl RelationHead {
    pub fn init<R: Rng + ?Sized>(
        hidden: usize,
        dropout: f64,
        std: f64,
        store: &mut ParamStore,
        rng: &mut R,
    ) -> Result<Self> {
        let normal = Normal::new(0.0, std).map_err(|e| Error::Config(format!("init_std: {e}")))?;
        store.insert(ATTENTION_WEIGHT, Array2::from_shape_simple_fn((hidden, hidden), || normal.sample(rng)));
        store.insert(OUTPUT_WEIGHT, Array2::from_shape_simple_fn((2 * hidden, 1), || normal.sample(rng)));
        store.insert(OUTPUT_BIAS, Array2::zeros((1, 1)));
        Self::bind(hidden, dropout, store)
    }

    pub fn bind(hidden: usize, dropout: f64, store: &ParamStore) -> Result<Self> {
        if !(0.0..1.0).contains(&dropout) {
            return Err(Error::Config(format!("dropout must lie in [0, 1), got {dropout}")));
        }
        let get = |name: &str, shape: (usize, usize)| {
            let id = store.id(name).ok_or_else(|| Error::MissingWeights(name.into()))?;
            if store.get(id).dim() != shape {
                return Err(Error::Shape(format!("{name}: expected {shape:?}")));
            }
            Ok(id)
        };
        Ok(Self {
            hidden,
            dropout,
            attention: get(ATTENTION_WEIGHT, (hidden, hidden))?,
            out_weight: get(OUTPUT_WEIGHT, (2 * hidden, 1))?,
            out_bias: get(OUTPUT_BIAS, (1, 1))?,
        })
    }

    pub fn attention_weight(&self) -> ParamId {
        self.attention
    }

    pub fn param_ids(&self) -> [ParamId; 3] {
        [self.attention, self.out_weight, self.out_bias]
    }

    fn check(&self, g: &Graph, query: Var, keys: Var) -> Result<()> {
        let (qr, qc) = g.value(query).dim();
        let (kr, kc) = g.value(keys).dim();
        if kr == 0 {
            return Err(Error::Shape("attention needs at least one key row".into()));
        }
        if qr != 1 || qc != self.hidden || kc != self.hidden {
            return Err(Error::Shape(format!(
                "query {qr}×{qc} and keys {kr}×{kc} do not match hidden size {}",
                self.hidden
            )));
        }
        Ok(())
    }

    /// Attention weights `softmax(q W kᵢ)` as a `1 × m` row.
    pub fn attention_weights(&self, g: &mut Graph, query: Var, keys: Var) -> Result<Var> {
        self.check(g, query, keys)?;
        let w = g.param(self.attention);
        let qw = g.matmul(query, w);
        let scores = g.matmul_t(qw, keys);
        Ok(g.softmax_rows(scores))
    }

    /// Context vector: keys weighted by attention (values are the keys).
    pub fn attend(&self, g: &mut Graph, query: Var, keys: Var) -> Result<Var> {
        let p = self.attention_weights(g, query, keys)?;
        Ok(g.matmul(p, keys))
    }

    /// Pre-sigmoid score of `[query ; context]`. Dropout on the concatenated
    /// vector is applied only when an RNG is supplied.
    pub fn logit<R: Rng + ?Sized>(
        &self,
        g: &mut Graph,
        query: Var,
        keys: Var,
        dropout_rng: Option<&mut R>,
    ) -> Result<Var> {
        let ctx = self.attend(g, query, keys)?;
        let mut cat = g.concat_cols(&[query, ctx]);
        if let Some(rng) = dropout_rng {
            if self.dropout > 0.0 {
                let keep = Bernoulli::new(1.0 - self.dropout).expect("dropout in [0, 1)");
                let scale = 1.0 / (1.0 - self.dropout);
                let mask = Array2::from_shape_simple_fn((1, 2 * self.hidden), || {
                    if keep.sample(rng) {
                        scale
                    } else {
                        0.0
                    }
                });
                cat = g.mul_const(cat, mask);
            }
        }
        let w = g.param(self.out_weight);
        let b = g.param(self.out_bias);
        let y = g.matmul(cat, w);
        Ok(g.add(y, b))
    }

    pub fn predict<R: Rng + ?Sized>(
        &self,
        g: &mut Graph,
        query: Var,
        keys: Var,
        dropout_rng: Option<&mut R>,
    ) -> Result<Var> {
        let logit = self.logit(g, query, keys, dropout_rng)?;
        Ok(g.sigmoid(logit))
    }

    /// Inference-mode probability on plain matrices.
    pub fn predict_relation(&self, store: &ParamStore, query: &Array2<f64>, keys: &Array2<f64>) -> Result<f64> {
        let mut g = Graph::new(store);
        let q = g.input(query.clone());
        let k = g.input(keys.clone());
        let p = self.predict::<rand::rngs::ThreadRng>(&mut g, q, k, None)?;
        Ok(g.scalar(p))
    }
}

/// `-[y ln p + (1 - y) ln(1 - p)]` with `p` clamped to `[1e-7, 1 - 1e-7]`.
pub fn binary_loss(prob: f64, label: u8) -> f64 {
    let p = prob.clamp(PROB_EPS, 1.0 - PROB_EPS);
    if label == 1 {
        -p.ln()
    } else {
        -(1.0 - p).ln()
    }
}

/// Graph form of [`binary_loss`].
pub fn binary_loss_var(g: &mut Graph, prob: Var, label: u8) -> Var {
    let p = g.clamp(prob, PROB_EPS, 1.0 - PROB_EPS);
    let target = if label == 1 {
        p
    } else {
        let neg = g.scale(p, -1.0);
        g.shift_scalar(neg, 1.0)
    };
    let l = g.ln(target);
    g.scale(l, -1.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn head_2d(store: &mut ParamStore) -> RelationHead {
        store.insert(ATTENTION_WEIGHT, Array2::eye(2));
        store.insert(OUTPUT_WEIGHT, array![[0.5], [-1.0], [0.25], [2.0]]);
        store.insert(OUTPUT_BIAS, array![[0.1]]);
        RelationHead::bind(2, 0.1, store).unwrap()
    }

    fn context(head: &RelationHead, store: &ParamStore, q: Array2<f64>, k: Array2<f64>) -> Array2<f64> {
        let mut g = Graph::new(store);
        let q = g.input(q);
        let k = g.input(k);
        let c = head.attend(&mut g, q, k).unwrap();
        g.value(c).clone()
    }

    #[test]
    fn single_and_duplicate_keys() {
        let mut store = ParamStore::new();
        let head = head_2d(&mut store);
        let v = array![[0.3, -1.7]];
        assert_eq!(context(&head, &store, array![[1.0, 2.0]], v.clone()), v);
        let c = context(&head, &store, array![[1.0, 2.0]], array![[0.3, -1.7], [0.3, -1.7]]);
        assert!((&c - &v).iter().all(|d| d.abs() < 1e-15));
    }

    #[test]
    fn two_key_mixture() {
        let mut store = ParamStore::new();
        let head = head_2d(&mut store);
        let c = context(&head, &store, array![[1.0, 0.0]], array![[2.0, 0.0], [0.0, 2.0]]);
        let w0 = 2f64.exp() / (2f64.exp() + 1.0);
        assert!((c[[0, 0]] - 2.0 * w0).abs() < 1e-12);
        assert!((c[[0, 1]] - 2.0 * (1.0 - w0)).abs() < 1e-12);
    }

    #[test]
    fn zero_projection_gives_half() {
        let mut store = ParamStore::new();
        let head = head_2d(&mut store);
        store.insert(OUTPUT_WEIGHT, Array2::zeros((4, 1)));
        store.insert(OUTPUT_BIAS, Array2::zeros((1, 1)));
        let p = head.predict_relation(&store, &array![[3.0, -2.0]], &array![[1.0, 1.0]]).unwrap();
        assert_eq!(p, 0.5);
    }

    #[test]
    fn hand_computed_probability() {
        let mut store = ParamStore::new();
        let head = head_2d(&mut store);
        let q = array![[1.0, 0.0]];
        let k = array![[0.5, -0.5]];
        // single key: context = k
        let z: f64 = 0.5 * 1.0 - 1.0 * 0.0 + 0.25 * 0.5 + 2.0 * -0.5 + 0.1;
        let expected = 1.0 / (1.0 + (-z).exp());
        let p = head.predict_relation(&store, &q, &k).unwrap();
        assert!((p - expected).abs() < 1e-12);
        // raising the bias raises the probability
        store.insert(OUTPUT_BIAS, array![[0.6]]);
        assert!(head.predict_relation(&store, &q, &k).unwrap() > p);
    }

    #[test]
    fn shape_errors() {
        let mut store = ParamStore::new();
        let head = head_2d(&mut store);
        assert!(head.predict_relation(&store, &array![[1.0, 0.0]], &Array2::zeros((0, 2))).is_err());
        assert!(head.predict_relation(&store, &array![[1.0, 0.0, 0.0]], &array![[1.0, 0.0]]).is_err());
    }

    #[test]
    fn bce_values() {
        assert!((binary_loss(0.5, 0) - 2f64.ln()).abs() < 1e-15);
        assert!((binary_loss(0.5, 1) - 2f64.ln()).abs() < 1e-15);
        assert!((binary_loss(0.8, 0) - 5f64.ln()).abs() < 1e-12);
        assert!(binary_loss(1.0, 1) < 1e-6);
        assert!(binary_loss(0.0, 1).is_finite());
    }
}
