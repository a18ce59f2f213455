//! Model layers: linear projections, layer norm, multi-head attention and
//! pre-norm transformer blocks. Layers own parameter names; weights live in
//! a [`ParamStore`] and are bound per pass through a [`Session`].

use std::rc::Rc;

use rand_chacha::ChaCha20Rng;
use thiserror::Error;

use crate::params::{ParamError, ParamStore, Session};
use crate::tensor::{TensorError, Value};

#[derive(Debug, Error)]
pub enum NnError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Param(#[from] ParamError),
    #[error("width {width} not divisible by {heads} heads")]
    HeadSplit { width: usize, heads: usize },
}

pub type Result<T> = std::result::Result<T, NnError>;

pub const LN_EPS: f64 = 1e-5;

/// Hard block structure plus an optional soft multiplier over attention
/// probabilities. `allowed` is row-major `[q_len * k_len]`; `soft`, when
/// present, has the same shape and rescales probabilities before the row is
/// renormalized.
#[derive(Clone)]
pub struct AttentionMask {
    pub q_len: usize,
    pub k_len: usize,
    pub allowed: Rc<Vec<bool>>,
    pub soft: Option<Value>,
}

impl AttentionMask {
    pub fn full(q_len: usize, k_len: usize) -> Self {
        AttentionMask {
            q_len,
            k_len,
            allowed: Rc::new(vec![true; q_len * k_len]),
            soft: None,
        }
    }

    pub fn from_allowed(q_len: usize, k_len: usize, allowed: Vec<bool>) -> Self {
        debug_assert_eq!(allowed.len(), q_len * k_len);
        AttentionMask {
            q_len,
            k_len,
            allowed: Rc::new(allowed),
            soft: None,
        }
    }

    /// Block-diagonal mask: `blocks` consecutive groups of `block_len` keys,
    /// each attending only within its own group.
    pub fn block_diagonal(blocks: usize, block_len: usize) -> Self {
        let n = blocks * block_len;
        let mut allowed = vec![false; n * n];
        for b in 0..blocks {
            for i in 0..block_len {
                for j in 0..block_len {
                    allowed[(b * block_len + i) * n + b * block_len + j] = true;
                }
            }
        }
        AttentionMask::from_allowed(n, n, allowed)
    }
}

pub struct Linear {
    pub w: String,
    pub b: Option<String>,
}

impl Linear {
    pub fn new(
        ps: &mut ParamStore,
        rng: &mut ChaCha20Rng,
        name: &str,
        d_in: usize,
        d_out: usize,
        bias: bool,
    ) -> Result<Self> {
        let w = format!("{name}.w");
        ps.register_xavier(&w, d_in, d_out, rng)?;
        let b = if bias {
            let b = format!("{name}.b");
            ps.register_zeros(&b, 1, d_out)?;
            Some(b)
        } else {
            None
        };
        Ok(Linear { w, b })
    }

    pub fn forward(&self, sess: &mut Session, ps: &ParamStore, x: &Value) -> Result<Value> {
        let w = sess.param(ps, &self.w)?;
        let y = x.matmul(&w)?;
        match &self.b {
            Some(b) => {
                let b = sess.param(ps, b)?;
                Ok(y.add_row(&b)?)
            }
            None => Ok(y),
        }
    }
}

pub struct LayerNorm {
    pub gamma: String,
    pub beta: String,
}

impl LayerNorm {
    pub fn new(ps: &mut ParamStore, name: &str, width: usize) -> Result<Self> {
        let gamma = format!("{name}.gamma");
        let beta = format!("{name}.beta");
        ps.register_full(&gamma, 1, width, 1.0)?;
        ps.register_zeros(&beta, 1, width)?;
        Ok(LayerNorm { gamma, beta })
    }

    pub fn forward(&self, sess: &mut Session, ps: &ParamStore, x: &Value) -> Result<Value> {
        let g = sess.param(ps, &self.gamma)?;
        let b = sess.param(ps, &self.beta)?;
        Ok(x.layer_norm(&g, &b, LN_EPS)?)
    }
}

/// Scaled dot-product attention with learned Q/K/V/output projections.
pub struct MultiHeadAttention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub heads: usize,
    pub width: usize,
}

impl MultiHeadAttention {
    pub fn new(
        ps: &mut ParamStore,
        rng: &mut ChaCha20Rng,
        name: &str,
        width: usize,
        heads: usize,
    ) -> Result<Self> {
        if heads == 0 || width % heads != 0 {
            return Err(NnError::HeadSplit { width, heads });
        }
        Ok(MultiHeadAttention {
            q: Linear::new(ps, rng, &format!("{name}.q"), width, width, true)?,
            k: Linear::new(ps, rng, &format!("{name}.k"), width, width, true)?,
            v: Linear::new(ps, rng, &format!("{name}.v"), width, width, true)?,
            o: Linear::new(ps, rng, &format!("{name}.o"), width, width, true)?,
            heads,
            width,
        })
    }

    /// Queries come from `q_src` `[Q, D]`, keys and values from `kv_src`
    /// `[M, D]`. Without a mask every key is visible.
    pub fn forward(
        &self,
        sess: &mut Session,
        ps: &ParamStore,
        q_src: &Value,
        kv_src: &Value,
        mask: Option<&AttentionMask>,
    ) -> Result<Value> {
        let q_len = q_src.rows();
        let k_len = kv_src.rows();
        let q = self.q.forward(sess, ps, q_src)?;
        let k = self.k.forward(sess, ps, kv_src)?;
        let v = self.v.forward(sess, ps, kv_src)?;

        let head_dim = self.width / self.heads;
        let scale = 1.0 / (head_dim as f64).sqrt();
        let ones = sess.tape.leaf_from(q_len, k_len, vec![1.0; q_len * k_len])?;
        let full = Rc::new(vec![true; q_len * k_len]);
        let (allowed, mult) = match mask {
            Some(m) => (
                Rc::clone(&m.allowed),
                m.soft.clone().unwrap_or_else(|| ones.clone()),
            ),
            None => (full, ones),
        };

        let mut head_outputs = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let qh = q.slice_cols(h * head_dim, head_dim)?;
            let kh = k.slice_cols(h * head_dim, head_dim)?;
            let vh = v.slice_cols(h * head_dim, head_dim)?;
            let scores = qh.matmul(&kh.transpose())?.scale(scale);
            let weights = scores.masked_softmax(&allowed, &mult)?;
            head_outputs.push(weights.matmul(&vh)?);
        }
        let cat = Value::concat_cols(&head_outputs)?;
        self.o.forward(sess, ps, &cat)
    }
}

pub struct FeedForward {
    pub lin1: Linear,
    pub lin2: Linear,
}

impl FeedForward {
    pub fn new(
        ps: &mut ParamStore,
        rng: &mut ChaCha20Rng,
        name: &str,
        width: usize,
        hidden: usize,
    ) -> Result<Self> {
        Ok(FeedForward {
            lin1: Linear::new(ps, rng, &format!("{name}.lin1"), width, hidden, true)?,
            lin2: Linear::new(ps, rng, &format!("{name}.lin2"), hidden, width, true)?,
        })
    }

    pub fn forward(&self, sess: &mut Session, ps: &ParamStore, x: &Value) -> Result<Value> {
        let h = self.lin1.forward(sess, ps, x)?.gelu();
        self.lin2.forward(sess, ps, &h)
    }
}

/// Pre-norm self-attention block:
/// `x + attn(ln1(x))` followed by `h + ffn(ln2(h))`.
pub struct SelfAttnBlock {
    pub ln1: LayerNorm,
    pub attn: MultiHeadAttention,
    pub ln2: LayerNorm,
    pub ffn: FeedForward,
}

impl SelfAttnBlock {
    pub fn new(
        ps: &mut ParamStore,
        rng: &mut ChaCha20Rng,
        name: &str,
        width: usize,
        heads: usize,
        ffn_hidden: usize,
    ) -> Result<Self> {
        Ok(SelfAttnBlock {
            ln1: LayerNorm::new(ps, &format!("{name}.ln1"), width)?,
            attn: MultiHeadAttention::new(ps, rng, &format!("{name}.attn"), width, heads)?,
            ln2: LayerNorm::new(ps, &format!("{name}.ln2"), width)?,
            ffn: FeedForward::new(ps, rng, &format!("{name}.ffn"), width, ffn_hidden)?,
        })
    }

    pub fn forward(
        &self,
        sess: &mut Session,
        ps: &ParamStore,
        x: &Value,
        mask: Option<&AttentionMask>,
    ) -> Result<Value> {
        let n = self.ln1.forward(sess, ps, x)?;
        let h = x.add(&self.attn.forward(sess, ps, &n, &n, mask)?)?;
        let n2 = self.ln2.forward(sess, ps, &h)?;
        Ok(h.add(&self.ffn.forward(sess, ps, &n2)?)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;
    use rand::SeedableRng;

    /// MHA with identity Q/K/V/O weights and zero biases.
    fn identity_mha(ps: &mut ParamStore, width: usize, heads: usize) -> MultiHeadAttention {
        let mut rng = ChaCha20Rng::seed_from_u64(0);
        let mha = MultiHeadAttention::new(ps, &mut rng, "mha", width, heads).unwrap();
        for proj in ["mha.q", "mha.k", "mha.v", "mha.o"] {
            let p = ps.get_mut(&format!("{proj}.w")).unwrap();
            let mut eye = vec![0.0; width * width];
            for i in 0..width {
                eye[i * width + i] = 1.0;
            }
            p.tensor.data = eye;
        }
        mha
    }

    #[test]
    fn single_key_attention_returns_the_value_row() {
        let mut ps = ParamStore::new();
        let mha = identity_mha(&mut ps, 2, 1);
        let mut sess = Session::new();
        let q = sess.tape.leaf_from(1, 2, vec![0.3, -0.7]).unwrap();
        let kv = sess.tape.leaf_from(1, 2, vec![5.0, -2.0]).unwrap();
        let out = mha.forward(&mut sess, &ps, &q, &kv, None).unwrap();
        assert_eq!(out.data(), vec![5.0, -2.0]);
    }

    #[test]
    fn zero_values_give_zero_output() {
        let mut ps = ParamStore::new();
        let mha = identity_mha(&mut ps, 2, 1);
        let mut sess = Session::new();
        let q = sess.tape.leaf_from(2, 2, vec![0.3, -0.7, 1.0, 2.0]).unwrap();
        let kv = sess.tape.leaf_from(3, 2, vec![0.0; 6]).unwrap();
        let out = mha.forward(&mut sess, &ps, &q, &kv, None).unwrap();
        assert_eq!(out.data(), vec![0.0; 4]);
    }

    #[test]
    fn two_key_attention_matches_hand_computed_weights() {
        // query [1,0], keys [[1,0],[0,1]], values [[2,0],[0,2]], scale 1/sqrt(2):
        // weights are softmax(1/sqrt(2), 0) and the output is their convex
        // combination of the value rows.
        let mut ps = ParamStore::new();
        let mha = identity_mha(&mut ps, 2, 1);
        // value projection 2*I so values are twice the key rows
        let p = ps.get_mut("mha.v.w").unwrap();
        p.tensor.data = vec![2.0, 0.0, 0.0, 2.0];
        let mut sess = Session::new();
        let q = sess.tape.leaf_from(1, 2, vec![1.0, 0.0]).unwrap();
        let kv = sess.tape.leaf_from(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let out = mha.forward(&mut sess, &ps, &q, &kv, None).unwrap();
        let s = 1.0 / 2.0f64.sqrt();
        let w1 = s.exp() / (s.exp() + 1.0);
        let w2 = 1.0 - w1;
        let d = out.data();
        assert!((d[0] - 2.0 * w1).abs() < 1e-12);
        assert!((d[1] - 2.0 * w2).abs() < 1e-12);
    }

    #[test]
    fn head_split_must_divide_width() {
        let mut ps = ParamStore::new();
        let mut rng = ChaCha20Rng::seed_from_u64(0);
        assert!(matches!(
            MultiHeadAttention::new(&mut ps, &mut rng, "m", 6, 4),
            Err(NnError::HeadSplit { .. })
        ));
    }

    #[test]
    fn hard_blocked_keys_get_zero_weight() {
        let mut ps = ParamStore::new();
        let mha = identity_mha(&mut ps, 2, 1);
        let mut sess = Session::new();
        let q = sess.tape.leaf_from(1, 2, vec![1.0, 1.0]).unwrap();
        let kv = sess
            .tape
            .leaf_from(2, 2, vec![3.0, 0.0, 0.0, 7.0])
            .unwrap();
        let mask = AttentionMask::from_allowed(1, 2, vec![true, false]);
        let out = mha.forward(&mut sess, &ps, &q, &kv, Some(&mask)).unwrap();
        // only key 0 visible: output is exactly its value row
        assert_eq!(out.data(), vec![3.0, 0.0]);
    }

    #[test]
    fn zero_output_projection_reduces_block_to_identity_plus_ffn_path() {
        let mut ps = ParamStore::new();
        let mut rng = ChaCha20Rng::seed_from_u64(3);
        let block = SelfAttnBlock::new(&mut ps, &mut rng, "blk", 4, 2, 8).unwrap();
        // zero both residual writers: attention output proj and ffn.lin2
        for name in ["blk.attn.o.w", "blk.ffn.lin2.w"] {
            let p = ps.get_mut(name).unwrap();
            p.tensor.data.iter_mut().for_each(|v| *v = 0.0);
        }
        let mut sess = Session::new();
        let x = sess
            .tape
            .leaf_from(2, 4, vec![0.5, -1.0, 2.0, 0.0, 1.0, 1.0, -3.0, 0.25])
            .unwrap();
        let y = block.forward(&mut sess, &ps, &x, None).unwrap();
        assert_eq!(y.data(), x.data());
    }

    #[test]
    fn identity_check_tensor_roundtrip() {
        let t = Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(t.numel(), 4);
    }
}
