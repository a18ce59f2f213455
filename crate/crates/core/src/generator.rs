//! The text generator: a learnable template carrying rendered action and
//! score words, the tri-token attention mask with its learnable sparse
//! video block, the masked transformer decoder, and greedy / beam decoding.

use std::rc::Rc;

use rand_chacha::ChaCha20Rng;
use thiserror::Error;

use crate::lexicon::{ActionLexicon, LexiconError};
use crate::nn::{AttentionMask, LayerNorm, Linear, NnError, SelfAttnBlock};
use crate::params::{ParamError, ParamStore, Session};
use crate::tensor::{TensorError, Value};
use crate::vocab::{Vocab, BOS, EOS, PAD};
use crate::words::{number_to_words, WordsError};

#[derive(Debug, Error)]
pub enum GeneratorError {
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Param(#[from] ParamError),
    #[error(transparent)]
    Lexicon(#[from] LexiconError),
    #[error(transparent)]
    Words(#[from] WordsError),
    #[error("caption has {got} tokens, limit {limit}")]
    CaptionTooLong { got: usize, limit: usize },
    #[error("template word {0:?} missing from vocabulary")]
    UnknownTemplateWord(String),
}

pub type Result<T> = std::result::Result<T, GeneratorError>;

/// One template entry: a vocabulary token or a trainable slot.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TemplateToken {
    Fixed(usize),
    Learnable(usize),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Template {
    pub tokens: Vec<TemplateToken>,
}

impl Template {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn slot_count(&self) -> usize {
        self.tokens
            .iter()
            .filter(|t| matches!(t, TemplateToken::Learnable(_)))
            .count()
    }
}

/// Assemble the template: `slots_per_gap` learnable tokens around each fixed
/// span, one span of action words per part, then the rendered score.
/// Slot ids are stable across calls.
pub fn build_template(
    score: f64,
    decimals: usize,
    actions: &[usize],
    lexicon: &ActionLexicon,
    vocab: &Vocab,
    slots_per_gap: usize,
) -> Result<Template> {
    let mut tokens = Vec::new();
    let mut next_slot = 0usize;
    let mut push_gap = |tokens: &mut Vec<TemplateToken>| {
        for _ in 0..slots_per_gap {
            tokens.push(TemplateToken::Learnable(next_slot));
            next_slot += 1;
        }
    };
    let mut push_words = |tokens: &mut Vec<TemplateToken>, words: &[String]| -> Result<()> {
        for w in words {
            let id = vocab
                .id(w)
                .ok_or_else(|| GeneratorError::UnknownTemplateWord(w.clone()))?;
            tokens.push(TemplateToken::Fixed(id));
        }
        Ok(())
    };

    push_gap(&mut tokens);
    for (part, &class) in actions.iter().enumerate() {
        let words = lexicon.phrase_tokens(part, class)?;
        push_words(&mut tokens, &words)?;
        push_gap(&mut tokens);
    }
    push_words(&mut tokens, &number_to_words(score, decimals)?)?;
    push_gap(&mut tokens);
    Ok(Template { tokens })
}

/// Worst-case template length for sizing the slot table and the position
/// table: every part takes its longest phrase and the score takes the
/// longest rendering.
pub fn max_template_len(
    lexicon: &ActionLexicon,
    decimals: usize,
    slots_per_gap: usize,
) -> usize {
    let action_words: usize = lexicon
        .parts
        .iter()
        .map(|p| {
            p.iter()
                .map(|phrase| phrase.split_whitespace().count())
                .max()
                .unwrap_or(0)
        })
        .sum();
    // "nine hundred ninety-nine point nine nine" bounds the score span
    let score_words = 4 + decimals;
    slots_per_gap * (lexicon.part_count() + 2) + action_words + score_words
}

pub fn template_slot_capacity(lexicon: &ActionLexicon, slots_per_gap: usize) -> usize {
    (slots_per_gap * (lexicon.part_count() + 2)).max(1)
}

/// The `(words | template | video)` attention layout:
/// word row `i` sees words `..=i`, every template token and every video
/// token; template rows see template and video only; video rows see video
/// only, modulated by the learnable soft block `V = sigmoid(raw)`.
pub fn tri_token_allowed(w: usize, p: usize, m: usize) -> Vec<bool> {
    let s = w + p + m;
    let mut allowed = vec![false; s * s];
    for i in 0..s {
        for j in 0..s {
            let open = if i < w {
                j <= i || j >= w
            } else if i < w + p {
                j >= w
            } else {
                j >= w + p
            };
            allowed[i * s + j] = open;
        }
    }
    allowed
}

/// Mask bound to one pass: hard structure plus the tape values of the soft
/// video block.
pub struct TriTokenMask {
    pub w: usize,
    pub p: usize,
    pub m: usize,
    pub allowed: Rc<Vec<bool>>,
    /// `sigmoid(raw)`, shape `[m, m]`; kept for the sparse loss.
    pub video_block: Option<Value>,
    /// Full `[s, s]` multiplier with the video block pasted in.
    pub soft: Option<Value>,
}

impl TriTokenMask {
    pub fn attention_mask(&self) -> AttentionMask {
        let s = self.w + self.p + self.m;
        AttentionMask {
            q_len: s,
            k_len: s,
            allowed: Rc::clone(&self.allowed),
            soft: self.soft.clone(),
        }
    }

    /// Sum of the soft block entries (`V` is nonnegative by construction).
    pub fn video_block_sum(&self) -> f64 {
        self.video_block
            .as_ref()
            .map(|v| v.data().iter().sum())
            .unwrap_or(0.0)
    }
}

/// Build the mask for one pass, wiring the raw `[m, m]` weights through a
/// sigmoid into the video-video region.
pub fn build_tri_token_mask(
    sess: &mut Session,
    ps: &ParamStore,
    w: usize,
    p: usize,
    m: usize,
    raw_video_mask: &str,
) -> Result<TriTokenMask> {
    let allowed = Rc::new(tri_token_allowed(w, p, m));
    let (video_block, soft) = if m > 0 {
        let raw = sess.param(ps, raw_video_mask)?;
        let v = raw.sigmoid();
        let s = w + p + m;
        let soft = v.paste_into_ones(s, s, w + p, w + p)?;
        (Some(v), Some(soft))
    } else {
        (None, None)
    };
    Ok(TriTokenMask {
        w,
        p,
        m,
        allowed,
        video_block,
        soft,
    })
}

/// Transformer decoder over the concatenated `(words | template | video)`
/// sequence with the tri-token mask at every layer.
pub struct Decoder {
    pub blocks: Vec<SelfAttnBlock>,
    pub final_ln: LayerNorm,
    pub lm_head: Linear,
    pub word_pos: String,
    pub template_pos: String,
    pub video_pos: String,
    pub segment: String,
    pub template_slots: String,
    pub raw_video_mask: String,
    pub word_rows: usize,
}

pub struct DecoderLayout {
    pub width: usize,
    pub heads: usize,
    pub layers: usize,
    pub ffn_hidden: usize,
    pub vocab_len: usize,
    /// Word rows: one for the start token plus the caption capacity.
    pub max_caption_len: usize,
    pub max_template_len: usize,
    pub template_slot_capacity: usize,
    pub video_tokens: usize,
}

impl Decoder {
    pub fn new(ps: &mut ParamStore, rng: &mut ChaCha20Rng, layout: &DecoderLayout) -> Result<Self> {
        let word_rows = layout.max_caption_len + 1;
        let blocks = (0..layout.layers)
            .map(|i| {
                SelfAttnBlock::new(
                    ps,
                    rng,
                    &format!("dec.block{i}"),
                    layout.width,
                    layout.heads,
                    layout.ffn_hidden,
                )
            })
            .collect::<std::result::Result<_, _>>()?;
        let word_pos = "dec.word_pos".to_string();
        ps.register_xavier(&word_pos, word_rows, layout.width, rng)?;
        let template_pos = "dec.template_pos".to_string();
        ps.register_xavier(&template_pos, layout.max_template_len.max(1), layout.width, rng)?;
        let video_pos = "dec.video_pos".to_string();
        ps.register_xavier(&video_pos, layout.video_tokens.max(1), layout.width, rng)?;
        let segment = "dec.segment".to_string();
        ps.register_xavier(&segment, 3, layout.width, rng)?;
        let template_slots = "emb.template_slots".to_string();
        ps.register_xavier(&template_slots, layout.template_slot_capacity, layout.width, rng)?;
        let raw_video_mask = "dec.video_mask_raw".to_string();
        ps.register_zeros(&raw_video_mask, layout.video_tokens.max(1), layout.video_tokens.max(1))?;
        Ok(Decoder {
            blocks,
            final_ln: LayerNorm::new(ps, "dec.final_ln", layout.width)?,
            lm_head: Linear::new(ps, rng, "dec.lm_head", layout.width, layout.vocab_len, true)?,
            word_pos,
            template_pos,
            video_pos,
            segment,
            template_slots,
            raw_video_mask,
            word_rows,
        })
    }

    /// Embed the three blocks and concatenate. `word_ids` is padded to the
    /// fixed word-row count; padding rows are causally invisible to every
    /// row that matters.
    fn assemble(
        &self,
        sess: &mut Session,
        ps: &ParamStore,
        vocab_emb: &Value,
        word_ids: &[usize],
        template: &Template,
        e_v_star: &Value,
    ) -> Result<Value> {
        debug_assert_eq!(word_ids.len(), self.word_rows);
        let seg = sess.param(ps, &self.segment)?;

        let words = vocab_emb.gather_rows(word_ids)?;
        let wp = sess.param(ps, &self.word_pos)?;
        let words = words.add(&wp)?.add_row(&seg.slice_rows(0, 1)?)?;

        let slots = sess.param(ps, &self.template_slots)?;
        let table = Value::concat_rows(&[vocab_emb.clone(), slots])?;
        let vocab_len = vocab_emb.rows();
        let ids: Vec<usize> = template
            .tokens
            .iter()
            .map(|t| match t {
                TemplateToken::Fixed(id) => *id,
                TemplateToken::Learnable(slot) => vocab_len + slot,
            })
            .collect();
        let tmpl = table.gather_rows(&ids)?;
        let tp = sess.param(ps, &self.template_pos)?;
        let tp = tp.gather_rows(&(0..template.len()).collect::<Vec<_>>())?;
        let tmpl = tmpl.add(&tp)?.add_row(&seg.slice_rows(1, 1)?)?;

        let vp = sess.param(ps, &self.video_pos)?;
        let video = e_v_star.add(&vp)?.add_row(&seg.slice_rows(2, 1)?)?;

        Ok(Value::concat_rows(&[words, tmpl, video])?)
    }

    /// Full decoder pass; returns word-row vocabulary logits and the final
    /// hidden states of the whole sequence.
    pub fn forward(
        &self,
        sess: &mut Session,
        ps: &ParamStore,
        vocab_emb: &Value,
        word_ids: &[usize],
        template: &Template,
        e_v_star: &Value,
        mask: &TriTokenMask,
    ) -> Result<DecoderOutput> {
        let mut x = self.assemble(sess, ps, vocab_emb, word_ids, template, e_v_star)?;
        let attn_mask = mask.attention_mask();
        for block in &self.blocks {
            x = block.forward(sess, ps, &x, Some(&attn_mask))?;
        }
        let hidden = self.final_ln.forward(sess, ps, &x)?;
        let words = hidden.slice_rows(0, self.word_rows)?;
        let logits = self.lm_head.forward(sess, ps, &words)?;
        Ok(DecoderOutput { logits, hidden })
    }

    /// Teacher-forced training pass: the gold caption supplies the word
    /// block, next-token cross-entropy covers every real position, and the
    /// sparse loss is `lambda * sum(V)`.
    pub fn forward_train(
        &self,
        sess: &mut Session,
        ps: &ParamStore,
        vocab_emb: &Value,
        caption_ids: &[usize],
        template: &Template,
        e_v_star: &Value,
        lambda_sparse: f64,
    ) -> Result<TrainingOutput> {
        let max_caption = self.word_rows - 1;
        if caption_ids.len() > max_caption {
            return Err(GeneratorError::CaptionTooLong {
                got: caption_ids.len(),
                limit: max_caption,
            });
        }
        let mut word_ids = Vec::with_capacity(self.word_rows);
        word_ids.push(BOS);
        word_ids.extend_from_slice(caption_ids);
        word_ids.resize(self.word_rows, PAD);

        let mask = build_tri_token_mask(
            sess,
            ps,
            self.word_rows,
            template.len(),
            e_v_star.rows(),
            &self.raw_video_mask,
        )?;
        let out = self.forward(sess, ps, vocab_emb, &word_ids, template, e_v_star, &mask)?;

        // row t predicts token t+1; targets are the caption then EOS
        let mut targets = caption_ids.to_vec();
        targets.push(EOS);
        let gen_loss = out
            .logits
            .slice_rows(0, targets.len())?
            .cross_entropy(&targets)?;

        let sum_v = mask.video_block_sum();
        let sparse_loss = match &mask.video_block {
            Some(v) => v.sum_all().scale(lambda_sparse),
            None => sess.tape.scalar(0.0),
        };
        Ok(TrainingOutput {
            decoder: out,
            gen_loss,
            sparse_loss,
            sum_v,
        })
    }
}

pub struct DecoderOutput {
    /// `[word_rows, vocab]`
    pub logits: Value,
    /// `[word_rows + template + video, width]`
    pub hidden: Value,
}

pub struct TrainingOutput {
    pub decoder: DecoderOutput,
    pub gen_loss: Value,
    pub sparse_loss: Value,
    pub sum_v: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DecodeStrategy {
    Greedy,
    Beam(usize),
}

/// Everything generation needs besides the word prefix.
pub struct GenerationContext<'a> {
    pub decoder: &'a Decoder,
    pub ps: &'a ParamStore,
    pub vocab_emb_name: &'a str,
    pub template: &'a Template,
    /// Raw refined video embeddings `[m, width]`, detached from any tape.
    pub e_v_star: Vec<f64>,
    pub video_tokens: usize,
    pub width: usize,
}

impl GenerationContext<'_> {
    /// Log-probabilities over the vocabulary for the next token after
    /// `prefix` (generated ids so far, without the start token).
    fn next_token_log_probs(&self, prefix: &[usize]) -> Result<Vec<f64>> {
        let mut sess = Session::new();
        let vocab_emb = sess.param(self.ps, self.vocab_emb_name)?;
        let mut word_ids = Vec::with_capacity(self.decoder.word_rows);
        word_ids.push(BOS);
        word_ids.extend_from_slice(prefix);
        word_ids.resize(self.decoder.word_rows, PAD);
        let e_v_star = sess
            .tape
            .leaf_from(self.video_tokens, self.width, self.e_v_star.clone())?;
        let mask = build_tri_token_mask(
            &mut sess,
            self.ps,
            self.decoder.word_rows,
            self.template.len(),
            self.video_tokens,
            &self.decoder.raw_video_mask,
        )?;
        let out = self.decoder.forward(
            &mut sess,
            self.ps,
            &vocab_emb,
            &word_ids,
            self.template,
            &e_v_star,
            &mask,
        )?;
        let row = out.logits.slice_rows(prefix.len(), 1)?.data();
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = row.iter().map(|&v| (v - max).exp()).sum::<f64>().ln() + max;
        Ok(row.iter().map(|&v| v - lse).collect())
    }
}

fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in xs.iter().enumerate() {
        if v > xs[best] {
            best = i;
        }
    }
    best
}

/// Emit tokens until the end token or `max_len`. Beam search keeps `width`
/// hypotheses by total log-probability and selects the final output by
/// length-normalized score; width 1 coincides with greedy.
pub fn generate(
    ctx: &GenerationContext,
    max_len: usize,
    strategy: DecodeStrategy,
) -> Result<Vec<usize>> {
    match strategy {
        DecodeStrategy::Greedy => {
            let mut tokens = Vec::new();
            for _ in 0..max_len {
                let log_probs = ctx.next_token_log_probs(&tokens)?;
                let next = argmax(&log_probs);
                if next == EOS {
                    break;
                }
                tokens.push(next);
            }
            Ok(tokens)
        }
        DecodeStrategy::Beam(width) => {
            let width = width.max(1);
            let mut live: Vec<(Vec<usize>, f64)> = vec![(Vec::new(), 0.0)];
            let mut done: Vec<(Vec<usize>, f64)> = Vec::new();
            for _ in 0..max_len {
                let mut expanded: Vec<(Vec<usize>, f64)> = Vec::new();
                for (tokens, score) in &live {
                    let log_probs = ctx.next_token_log_probs(tokens)?;
                    let mut order: Vec<usize> = (0..log_probs.len()).collect();
                    order.sort_by(|&a, &b| log_probs[b].partial_cmp(&log_probs[a]).unwrap());
                    for &tok in order.iter().take(width) {
                        let mut t = tokens.clone();
                        let s = score + log_probs[tok];
                        if tok == EOS {
                            done.push((t, s));
                        } else {
                            t.push(tok);
                            expanded.push((t, s));
                        }
                    }
                }
                expanded.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap());
                expanded.truncate(width);
                if expanded.is_empty() {
                    break;
                }
                live = expanded;
            }
            done.extend(live);
            // length-normalized final selection; stable against ties
            let best = done
                .into_iter()
                .map(|(t, s)| {
                    let norm = s / (t.len().max(1)) as f64;
                    (t, norm)
                })
                .max_by(|a, b| a.1.partial_cmp(&b.1).unwrap())
                .map(|(t, _)| t)
                .unwrap_or_default();
            Ok(best)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mask_smallest_case_matches_rules() {
        // W=1, P=1, M=1: word sees everything, template skips words,
        // video sees itself only
        let allowed = tri_token_allowed(1, 1, 1);
        assert_eq!(
            allowed,
            vec![true, true, true, false, true, true, false, false, true]
        );
    }

    #[test]
    fn mask_single_video_token() {
        assert_eq!(tri_token_allowed(0, 0, 1), vec![true]);
    }

    #[test]
    fn mask_word_causality() {
        // W=2: word 0 must not see word 1
        let allowed = tri_token_allowed(2, 0, 0);
        assert_eq!(allowed, vec![true, false, true, true]);
    }

    #[test]
    fn mask_brute_force_three_rules() {
        for w in 0..=3usize {
            for p in 0..=3usize {
                for m in 0..=3usize {
                    let s = w + p + m;
                    let got = tri_token_allowed(w, p, m);
                    for i in 0..s {
                        for j in 0..s {
                            let expected = match (i < w, i < w + p) {
                                (true, _) => (j < w && j <= i) || j >= w,
                                (false, true) => j >= w,
                                (false, false) => j >= w + p,
                            };
                            assert_eq!(
                                got[i * s + j],
                                expected,
                                "w={w} p={p} m={m} cell ({i},{j})"
                            );
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn template_expansion_layout() {
        let lexicon = ActionLexicon::standard(1).unwrap();
        let vocab = crate::vocab::build_vocab(&lexicon);
        let t = build_template(85.5, 1, &[0], &lexicon, &vocab, 2).unwrap();
        // [L][L] forward somersault [L][L] eighty-five point five [L][L]
        let words: Vec<String> = t
            .tokens
            .iter()
            .map(|tok| match tok {
                TemplateToken::Fixed(id) => vocab.token(*id).to_string(),
                TemplateToken::Learnable(slot) => format!("[L{slot}]"),
            })
            .collect();
        assert_eq!(
            words.join(" "),
            "[L0] [L1] forward somersault [L2] [L3] eighty-five point five [L4] [L5]"
        );
        assert_eq!(t.slot_count(), 6);
    }

    #[test]
    fn template_without_learnable_tokens() {
        let lexicon = ActionLexicon::standard(1).unwrap();
        let vocab = crate::vocab::build_vocab(&lexicon);
        let t = build_template(12.0, 1, &[2], &lexicon, &vocab, 0).unwrap();
        assert_eq!(t.slot_count(), 0);
        assert!(t.tokens.iter().all(|tok| matches!(tok, TemplateToken::Fixed(_))));
    }

    #[test]
    fn template_score_only() {
        let lexicon = ActionLexicon::standard(1).unwrap();
        let vocab = crate::vocab::build_vocab(&lexicon);
        let t = build_template(7.5, 1, &[], &lexicon, &vocab, 3).unwrap();
        // [L]x3 seven point five [L]x3
        assert_eq!(t.len(), 9);
        assert_eq!(t.slot_count(), 6);
    }

    #[test]
    fn template_rejects_missing_lexicon_entry() {
        let lexicon = ActionLexicon::standard(1).unwrap();
        let vocab = crate::vocab::build_vocab(&lexicon);
        assert!(build_template(9.0, 1, &[123], &lexicon, &vocab, 1).is_err());
    }
}
