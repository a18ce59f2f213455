//! Prompt-guided multimodal interaction: the two cross-attention refinement
//! blocks, the video-text matching loss over score classes, and the score /
//! action prediction heads.
//!
//! Context refinement computes `E_P* = MHCA(E_P, E_V) + gamma1 * E_P` with
//! prompt tokens as queries; score-guided refinement is the mirror image,
//! `E_V* = MHCA(E_V, E_P*) + gamma2 * E_V`.

use rand_chacha::ChaCha20Rng;

use crate::nn::{Linear, MultiHeadAttention, NnError, SelfAttnBlock};
use crate::params::{ParamStore, Session};
use crate::score_space::PromptText;
use crate::tensor::{Tensor, Value};
use crate::vocab::{Vocab, PAD};

pub type Result<T> = std::result::Result<T, NnError>;

/// Prompt tokens as ids into an augmented table: vocabulary rows first,
/// then the learnable slot rows.
#[derive(Debug, Clone)]
pub struct PromptTokenIds {
    /// Flattened `[class_count * tokens_per_class]` augmented ids.
    pub ids: Vec<usize>,
    pub class_count: usize,
    pub tokens_per_class: usize,
}

/// Encode prompt texts against the vocabulary, padding every class to a
/// common length. Learnable "[X]" slots map positionally to the same slot
/// rows in every class.
pub fn prompt_token_ids(prompts: &[PromptText], vocab: &Vocab) -> PromptTokenIds {
    let tokens_per_class = prompts.iter().map(|p| p.tokens.len()).max().unwrap_or(0);
    let vocab_len = vocab.len();
    let mut ids = Vec::with_capacity(prompts.len() * tokens_per_class);
    for p in prompts {
        let mut slot = 0usize;
        for tok in &p.tokens {
            if tok == crate::score_space::LEARNABLE_TOKEN {
                ids.push(vocab_len + slot);
                slot += 1;
            } else {
                ids.push(vocab.id_or_unk(tok));
            }
        }
        for _ in p.tokens.len()..tokens_per_class {
            ids.push(PAD);
        }
    }
    PromptTokenIds {
        ids,
        class_count: prompts.len(),
        tokens_per_class,
    }
}

/// Single-block text encoder over the K prompt sequences. Classes attend
/// only within themselves via a block-diagonal mask.
pub struct TextEncoder {
    pub block: SelfAttnBlock,
    pub pos: String,
    pub slots: String,
    pub slot_count: usize,
}

impl TextEncoder {
    pub fn new(
        ps: &mut ParamStore,
        rng: &mut ChaCha20Rng,
        width: usize,
        heads: usize,
        ffn_hidden: usize,
        tokens_per_class: usize,
        slot_count: usize,
    ) -> Result<Self> {
        let pos = "text_enc.pos".to_string();
        ps.register_xavier(&pos, tokens_per_class.max(1), width, rng)?;
        let slots = "emb.prompt_slots".to_string();
        ps.register_xavier(&slots, slot_count.max(1), width, rng)?;
        Ok(TextEncoder {
            block: SelfAttnBlock::new(ps, rng, "text_enc.block0", width, heads, ffn_hidden)?,
            pos,
            slots,
            slot_count,
        })
    }

    /// Produce `E_P` as `[K * L_p, D]` from the shared vocabulary embedding
    /// and the prompt slot table.
    pub fn forward(
        &self,
        sess: &mut Session,
        ps: &ParamStore,
        vocab_emb: &Value,
        prompt_ids: &PromptTokenIds,
    ) -> Result<Value> {
        let slots = sess.param(ps, &self.slots)?;
        let table = Value::concat_rows(&[vocab_emb.clone(), slots])?;
        let tok = table.gather_rows(&prompt_ids.ids)?;
        let pos = sess.param(ps, &self.pos)?;
        let tiled: Vec<usize> = (0..prompt_ids.class_count)
            .flat_map(|_| 0..prompt_ids.tokens_per_class)
            .collect();
        let x = tok.add(&pos.gather_rows(&tiled)?)?;
        let mask = crate::nn::AttentionMask::block_diagonal(
            prompt_ids.class_count,
            prompt_ids.tokens_per_class,
        );
        self.block.forward(sess, ps, &x, Some(&mask))
    }
}

/// Linear projection plus one self-attention block over the video tokens.
pub struct VideoEncoder {
    pub proj: Linear,
    pub pos: String,
    pub block: SelfAttnBlock,
}

impl VideoEncoder {
    pub fn new(
        ps: &mut ParamStore,
        rng: &mut ChaCha20Rng,
        feature_dim: usize,
        width: usize,
        heads: usize,
        ffn_hidden: usize,
        video_tokens: usize,
    ) -> Result<Self> {
        let pos = "video_enc.pos".to_string();
        ps.register_xavier(&pos, video_tokens, width, rng)?;
        Ok(VideoEncoder {
            proj: Linear::new(ps, rng, "video_enc.proj", feature_dim, width, true)?,
            pos,
            block: SelfAttnBlock::new(ps, rng, "video_enc.block0", width, heads, ffn_hidden)?,
        })
    }

    pub fn forward(&self, sess: &mut Session, ps: &ParamStore, features: &Tensor) -> Result<Value> {
        let x = sess.tape.leaf(features)?;
        let x = self.proj.forward(sess, ps, &x)?;
        let pos = sess.param(ps, &self.pos)?;
        let x = x.add(&pos)?;
        self.block.forward(sess, ps, &x, None)
    }
}

/// The paired refinement transformers and the matching head state.
pub struct Interaction {
    pub context_attn: MultiHeadAttention,
    pub score_attn: MultiHeadAttention,
    pub gamma1: String,
    pub gamma2: String,
    pub logit_scale: String,
}

impl Interaction {
    pub fn new(
        ps: &mut ParamStore,
        rng: &mut ChaCha20Rng,
        width: usize,
        heads: usize,
    ) -> Result<Self> {
        let gamma1 = "interact.gamma1".to_string();
        let gamma2 = "interact.gamma2".to_string();
        ps.register_full(&gamma1, 1, 1, 1.0)?;
        ps.register_full(&gamma2, 1, 1, 1.0)?;
        // inverse-temperature multiplier on cosine logits
        let logit_scale = "interact.logit_scale".to_string();
        ps.register_full(&logit_scale, 1, 1, 14.3)?;
        Ok(Interaction {
            context_attn: MultiHeadAttention::new(ps, rng, "interact.context_attn", width, heads)?,
            score_attn: MultiHeadAttention::new(ps, rng, "interact.score_attn", width, heads)?,
            gamma1,
            gamma2,
            logit_scale,
        })
    }

    /// `E_P* = MHCA(E_P, E_V) + gamma1 * E_P`
    pub fn context_aware_refine(
        &self,
        sess: &mut Session,
        ps: &ParamStore,
        e_p: &Value,
        e_v: &Value,
    ) -> Result<Value> {
        let attended = self.context_attn.forward(sess, ps, e_p, e_v, None)?;
        let g1 = sess.param(ps, &self.gamma1)?;
        Ok(attended.add(&e_p.mul_scalar(&g1)?)?)
    }

    /// `E_V* = MHCA(E_V, E_P*) + gamma2 * E_V`
    pub fn score_guided_refine(
        &self,
        sess: &mut Session,
        ps: &ParamStore,
        e_v: &Value,
        e_p_star: &Value,
    ) -> Result<Value> {
        let attended = self.score_attn.forward(sess, ps, e_v, e_p_star, None)?;
        let g2 = sess.param(ps, &self.gamma2)?;
        Ok(attended.add(&e_v.mul_scalar(&g2)?)?)
    }

    /// Mean-pool each class's refined prompt tokens to `[K, D]`.
    pub fn pool_prompt_classes(e_p: &Value, class_count: usize) -> Result<Value> {
        let rows = e_p.rows();
        let per_class = rows / class_count;
        let pooled: Vec<Value> = (0..class_count)
            .map(|k| Ok(e_p.slice_rows(k * per_class, per_class)?.mean_rows()))
            .collect::<Result<_>>()?;
        Ok(Value::concat_rows(&pooled)?)
    }

    /// Cosine logits between the pooled video embedding and each pooled
    /// class prompt, scaled by the learnable coefficient. `[1, K]`.
    pub fn match_logits(
        &self,
        sess: &mut Session,
        ps: &ParamStore,
        e_v_star: &Value,
        pooled_prompts: &Value,
    ) -> Result<Value> {
        let v = e_v_star.mean_rows().l2_normalize_rows()?;
        let u = pooled_prompts.l2_normalize_rows()?;
        let cos = v.matmul(&u.transpose())?;
        let scale = sess.param(ps, &self.logit_scale)?;
        Ok(cos.mul_scalar(&scale)?)
    }
}

/// Matching distribution plus its cross-entropy against the true interval.
pub struct MatchOutcome {
    pub logits: Vec<f64>,
    pub probabilities: Vec<f64>,
    pub target_class: usize,
    pub loss: Value,
}

/// Cross-entropy of the match logits against the 0-based target class.
pub fn match_loss(logits: &Value, target_class: usize) -> Result<MatchOutcome> {
    let loss = logits.cross_entropy(&[target_class])?;
    let raw = logits.data();
    let max = raw.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = raw.iter().map(|&v| (v - max).exp()).collect();
    let z: f64 = exps.iter().sum();
    Ok(MatchOutcome {
        logits: raw,
        probabilities: exps.iter().map(|&e| e / z).collect(),
        target_class,
        loss,
    })
}

/// Two-layer perceptrons over the flattened refined video tokens: one for
/// the normalized score, one per part for action classes.
pub struct PredictionHeads {
    pub score: (Linear, Linear),
    pub actions: Vec<(Linear, Linear)>,
}

impl PredictionHeads {
    pub fn new(
        ps: &mut ParamStore,
        rng: &mut ChaCha20Rng,
        video_tokens: usize,
        width: usize,
        hidden: usize,
        class_counts: &[usize],
    ) -> Result<Self> {
        let in_dim = video_tokens * width;
        let score = (
            Linear::new(ps, rng, "head.score.l1", in_dim, hidden, true)?,
            Linear::new(ps, rng, "head.score.l2", hidden, 1, true)?,
        );
        let actions = class_counts
            .iter()
            .enumerate()
            .map(|(p, &classes)| {
                Ok((
                    Linear::new(ps, rng, &format!("head.action{p}.l1"), in_dim, hidden, true)?,
                    Linear::new(ps, rng, &format!("head.action{p}.l2"), hidden, classes, true)?,
                ))
            })
            .collect::<Result<_>>()?;
        Ok(PredictionHeads { score, actions })
    }

    /// Returns the normalized score prediction `[1,1]` and per-part action
    /// logits `[1, C_p]` from `E_V*` `[M, D]`.
    pub fn forward(
        &self,
        sess: &mut Session,
        ps: &ParamStore,
        e_v_star: &Value,
    ) -> Result<(Value, Vec<Value>)> {
        let (m, d) = e_v_star.shape();
        let flat = e_v_star.reshape(1, m * d)?;
        let mlp = |sess: &mut Session, pair: &(Linear, Linear), x: &Value| -> Result<Value> {
            let h = pair.0.forward(sess, ps, x)?.gelu();
            pair.1.forward(sess, ps, &h)
        };
        // Output gain well below 1: Adam steps are scale-free, so a small
        // gain makes the score land on a finer grid per update.
        let score = mlp(sess, &self.score, &flat)?.scale(SCORE_OUTPUT_GAIN);
        let actions = self
            .actions
            .iter()
            .map(|pair| mlp(sess, pair, &flat))
            .collect::<Result<_>>()?;
        Ok((score, actions))
    }
}

pub const SCORE_OUTPUT_GAIN: f64 = 0.1;

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn zero_out(ps: &mut ParamStore, name: &str) {
        ps.get_mut(name)
            .unwrap()
            .tensor
            .data
            .iter_mut()
            .for_each(|v| *v = 0.0);
    }

    #[test]
    fn refine_reduces_to_gamma_input_with_zero_output_projection() {
        let mut ps = ParamStore::new();
        let mut rng = ChaCha20Rng::seed_from_u64(5);
        let inter = Interaction::new(&mut ps, &mut rng, 4, 2).unwrap();
        zero_out(&mut ps, "interact.context_attn.o.w");
        ps.get_mut("interact.gamma1").unwrap().tensor.data[0] = 0.75;

        let mut sess = Session::new();
        let e_p = sess
            .tape
            .leaf_from(3, 4, (0..12).map(|i| i as f64 * 0.1).collect())
            .unwrap();
        let e_v = sess
            .tape
            .leaf_from(2, 4, vec![0.4, -0.2, 1.0, 0.3, -0.5, 0.8, 0.1, 0.9])
            .unwrap();
        let refined = inter.context_aware_refine(&mut sess, &ps, &e_p, &e_v).unwrap();
        for (r, x) in refined.data().iter().zip(e_p.data()) {
            assert!((r - 0.75 * x).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_videos_leave_prompts_unchanged_under_identity() {
        let mut ps = ParamStore::new();
        let mut rng = ChaCha20Rng::seed_from_u64(5);
        let inter = Interaction::new(&mut ps, &mut rng, 2, 1).unwrap();
        // identity projections, zero biases; gamma1 stays 1.0
        for proj in ["q", "k", "v", "o"] {
            let p = ps
                .get_mut(&format!("interact.context_attn.{proj}.w"))
                .unwrap();
            p.tensor.data = vec![1.0, 0.0, 0.0, 1.0];
        }
        let mut sess = Session::new();
        let e_p = sess.tape.leaf_from(2, 2, vec![0.3, 0.7, -0.4, 0.2]).unwrap();
        let e_v = sess.tape.leaf_from(3, 2, vec![0.0; 6]).unwrap();
        let refined = inter.context_aware_refine(&mut sess, &ps, &e_p, &e_v).unwrap();
        assert_eq!(refined.data(), e_p.data());
    }

    #[test]
    fn match_loss_uniform_when_prompts_identical() {
        let mut ps = ParamStore::new();
        let mut rng = ChaCha20Rng::seed_from_u64(5);
        let inter = Interaction::new(&mut ps, &mut rng, 4, 1).unwrap();
        let mut sess = Session::new();
        let e_v_star = sess
            .tape
            .leaf_from(2, 4, vec![0.5, 0.2, -0.1, 0.4, 0.5, 0.2, -0.1, 0.4])
            .unwrap();
        let same_row = vec![1.0, 2.0, 3.0, 4.0];
        let mut rows = Vec::new();
        for _ in 0..3 {
            rows.extend_from_slice(&same_row);
        }
        let prompts = sess.tape.leaf_from(3, 4, rows).unwrap();
        let logits = inter
            .match_logits(&mut sess, &ps, &e_v_star, &prompts)
            .unwrap();
        let out = match_loss(&logits, 1).unwrap();
        for p in &out.probabilities {
            assert!((p - 1.0 / 3.0).abs() < 1e-12);
        }
        assert!((out.loss.item() - 3.0f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn match_loss_matches_closed_form() {
        let tape = crate::tensor::Tape::new();
        let logits = tape.leaf_from(1, 3, vec![1.25, -0.5, 0.3]).unwrap();
        let out = match_loss(&logits, 2).unwrap();
        let z: f64 = logits.data().iter().map(|v| v.exp()).sum();
        let expected = -(0.3f64.exp() / z).ln();
        assert!((out.loss.item() - expected).abs() < 1e-12);
    }

    #[test]
    fn zero_heads_give_zero_score_and_uniform_actions() {
        let mut ps = ParamStore::new();
        let mut rng = ChaCha20Rng::seed_from_u64(5);
        let heads = PredictionHeads::new(&mut ps, &mut rng, 2, 4, 8, &[5, 4]).unwrap();
        for p in ["head.score.l1", "head.score.l2", "head.action0.l1", "head.action0.l2", "head.action1.l1", "head.action1.l2"] {
            zero_out(&mut ps, &format!("{p}.w"));
        }
        let mut sess = Session::new();
        let e_v_star = sess
            .tape
            .leaf_from(2, 4, vec![0.4, -0.6, 1.0, 0.2, 0.1, 0.3, -0.2, 0.5])
            .unwrap();
        let (score, actions) = heads.forward(&mut sess, &ps, &e_v_star).unwrap();
        assert_eq!(score.item(), 0.0);
        let l_a = actions[0]
            .cross_entropy(&[3])
            .unwrap()
            .add(&actions[1].cross_entropy(&[0]).unwrap())
            .unwrap()
            .scale(0.5);
        let expected = (5.0f64.ln() + 4.0f64.ln()) / 2.0;
        assert!((l_a.item() - expected).abs() < 1e-12);
    }

    #[test]
    fn prompt_ids_share_slots_positionally() {
        let vocab = Vocab::from_words(["alpha", "to", "beta"]);
        let prompts = vec![
            PromptText {
                class_index: 1,
                learnable_slot_count: 2,
                tokens: ["[X]", "[X]", "alpha", "to", "beta"]
                    .iter()
                    .map(|s| s.to_string())
                    .collect(),
            },
            PromptText {
                class_index: 2,
                learnable_slot_count: 2,
                tokens: ["[X]", "[X]", "beta"].iter().map(|s| s.to_string()).collect(),
            },
        ];
        let ids = prompt_token_ids(&prompts, &vocab);
        assert_eq!(ids.tokens_per_class, 5);
        let v = vocab.len();
        // both classes use the same slot rows v and v+1; short class padded
        assert_eq!(ids.ids[0], v);
        assert_eq!(ids.ids[1], v + 1);
        assert_eq!(ids.ids[5], v);
        assert_eq!(ids.ids[6], v + 1);
        assert_eq!(ids.ids[8], PAD);
        assert_eq!(ids.ids[9], PAD);
    }
}
