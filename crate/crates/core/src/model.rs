//! The full pipeline: encoders, the two interaction blocks, the matching
//! and prediction heads, and the masked text generator, all over one
//! parameter store.
//!
//! Training teacher-forces the template with gold score and action words;
//! inference fills it from the heads' predictions before decoding.

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use thiserror::Error;

use crate::config::{DecodeMode, RunConfig};
use crate::data::Sample;
use crate::generator::{
    build_template, generate, max_template_len, template_slot_capacity, DecodeStrategy, Decoder,
    DecoderLayout, GenerationContext, GeneratorError, Template,
};
use crate::interaction::{
    match_loss, prompt_token_ids, Interaction, MatchOutcome, PredictionHeads, PromptTokenIds,
    TextEncoder, VideoEncoder,
};
use crate::lexicon::{ActionLexicon, LexiconError};
use crate::nn::NnError;
use crate::params::{ParamError, ParamStore, Session};
use crate::score_space::{
    build_prompt_texts, classify_score, ScorePartition, ScoreSpaceError,
};
use crate::tensor::{Tensor, TensorError, Value};
use crate::vocab::{build_vocab, Vocab};
use crate::words::WordsError;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Param(#[from] ParamError),
    #[error(transparent)]
    Generator(#[from] GeneratorError),
    #[error(transparent)]
    ScoreSpace(#[from] ScoreSpaceError),
    #[error(transparent)]
    Lexicon(#[from] LexiconError),
    #[error(transparent)]
    Words(#[from] WordsError),
    #[error("sample {id}: expected {expected} action parts, got {got}")]
    PartCountMismatch {
        id: String,
        expected: usize,
        got: usize,
    },
    #[error("sample {id}: features are {got:?}, expected {expected:?}")]
    FeatureShape {
        id: String,
        expected: Vec<usize>,
        got: Vec<usize>,
    },
}

pub type Result<T> = std::result::Result<T, ModelError>;

pub const VOCAB_EMB: &str = "emb.vocab";

pub struct NaeModel {
    pub cfg: RunConfig,
    pub vocab: Vocab,
    pub lexicon: ActionLexicon,
    pub partition: ScorePartition,
    pub store: ParamStore,
    video_enc: VideoEncoder,
    text_enc: TextEncoder,
    interaction: Interaction,
    heads: PredictionHeads,
    decoder: Decoder,
    prompt_ids: PromptTokenIds,
}

/// Scalar views of every loss component plus the tape values behind them.
pub struct StepLosses {
    pub total: Value,
    pub gen: Value,
    pub ce_s: Value,
    pub mse: Value,
    pub ce_a: Value,
    pub sparse: Value,
}

pub struct StepOutput {
    pub sess: Session,
    pub losses: StepLosses,
    pub sum_v: f64,
    pub match_outcome: MatchOutcome,
    pub score_pred_norm: f64,
}

pub struct Prediction {
    pub score: f64,
    pub actions: Vec<usize>,
    pub e_v_star: Vec<f64>,
}

pub struct GeneratedSample {
    pub tokens: Vec<String>,
    pub score_pred: f64,
    pub action_preds: Vec<usize>,
}

impl NaeModel {
    pub fn new(
        cfg: RunConfig,
        lexicon: ActionLexicon,
        partition: ScorePartition,
    ) -> Result<Self> {
        let vocab = build_vocab(&lexicon);
        let prompts = build_prompt_texts(&partition, cfg.prompt_slots, cfg.score_decimals)?;
        let prompt_ids = prompt_token_ids(&prompts, &vocab);

        let mut store = ParamStore::new();
        let mut rng = ChaCha20Rng::seed_from_u64(cfg.seed);
        let ffn_hidden = cfg.dim * cfg.ffn_mult;
        store.register_xavier(VOCAB_EMB, vocab.len(), cfg.dim, &mut rng)?;
        let video_enc = VideoEncoder::new(
            &mut store,
            &mut rng,
            cfg.feature_dim,
            cfg.dim,
            cfg.heads,
            ffn_hidden,
            cfg.video_tokens,
        )?;
        let text_enc = TextEncoder::new(
            &mut store,
            &mut rng,
            cfg.dim,
            cfg.heads,
            ffn_hidden,
            prompt_ids.tokens_per_class,
            cfg.prompt_slots,
        )?;
        let interaction = Interaction::new(&mut store, &mut rng, cfg.dim, cfg.heads)?;
        let heads = PredictionHeads::new(
            &mut store,
            &mut rng,
            cfg.video_tokens,
            cfg.dim,
            cfg.mlp_hidden,
            &lexicon.class_counts(),
        )?;
        let decoder = Decoder::new(
            &mut store,
            &mut rng,
            &DecoderLayout {
                width: cfg.dim,
                heads: cfg.heads,
                layers: cfg.dec_layers,
                ffn_hidden,
                vocab_len: vocab.len(),
                max_caption_len: cfg.max_caption_len,
                max_template_len: max_template_len(&lexicon, cfg.score_decimals, cfg.slots_per_gap),
                template_slot_capacity: template_slot_capacity(&lexicon, cfg.slots_per_gap),
                video_tokens: cfg.video_tokens,
            },
        )?;
        Ok(NaeModel {
            cfg,
            vocab,
            lexicon,
            partition,
            store,
            video_enc,
            text_enc,
            interaction,
            heads,
            decoder,
            prompt_ids,
        })
    }

    fn check_sample(&self, sample: &Sample) -> Result<()> {
        let expected = vec![self.cfg.video_tokens, self.cfg.feature_dim];
        if sample.features.shape != expected {
            return Err(ModelError::FeatureShape {
                id: sample.id.clone(),
                expected,
                got: sample.features.shape.clone(),
            });
        }
        if sample.actions.len() != self.lexicon.part_count() {
            return Err(ModelError::PartCountMismatch {
                id: sample.id.clone(),
                expected: self.lexicon.part_count(),
                got: sample.actions.len(),
            });
        }
        Ok(())
    }

    fn score_norm(&self, score: f64) -> f64 {
        let (min, max) = self.partition.range();
        (score - min) / (max - min)
    }

    fn denormalize(&self, norm: f64) -> f64 {
        let (min, max) = self.partition.range();
        min + norm.clamp(0.0, 1.0) * (max - min)
    }

    /// Shared trunk: features -> (E_V*, pooled prompts, pooled video).
    fn encode(
        &self,
        sess: &mut Session,
        features: &Tensor,
    ) -> Result<(Value, Value, Value)> {
        let vocab_emb = sess.param(&self.store, VOCAB_EMB)?;
        let e_v = self.video_enc.forward(sess, &self.store, features)?;
        let e_p = self
            .text_enc
            .forward(sess, &self.store, &vocab_emb, &self.prompt_ids)?;
        let e_p_star = self
            .interaction
            .context_aware_refine(sess, &self.store, &e_p, &e_v)?;
        let pooled_prompts =
            Interaction::pool_prompt_classes(&e_p_star, self.prompt_ids.class_count)?;
        let e_v_star = self
            .interaction
            .score_guided_refine(sess, &self.store, &e_v, &e_p_star)?;
        Ok((e_v_star, pooled_prompts, vocab_emb))
    }

    /// One teacher-forced training pass over a sample. The first caption is
    /// the generation target.
    pub fn forward_train(&self, sample: &Sample) -> Result<StepOutput> {
        self.check_sample(sample)?;
        let mut sess = Session::new();
        let (e_v_star, pooled_prompts, vocab_emb) = self.encode(&mut sess, &sample.features)?;

        let logits = self
            .interaction
            .match_logits(&mut sess, &self.store, &e_v_star, &pooled_prompts)?;
        let target_class = classify_score(sample.score, &self.partition)? - 1;
        let match_outcome = match_loss(&logits, target_class)?;

        let (score_pred, action_logits) = self.heads.forward(&mut sess, &self.store, &e_v_star)?;
        let target_norm = sess.tape.scalar(self.score_norm(sample.score));
        let l_mse = score_pred.mse(&target_norm)?;
        let mut ce_sum: Option<Value> = None;
        for (part, logits) in action_logits.iter().enumerate() {
            let ce = logits.cross_entropy(&[sample.actions[part]])?;
            ce_sum = Some(match ce_sum {
                Some(acc) => acc.add(&ce)?,
                None => ce,
            });
        }
        let l_ce_a = match ce_sum {
            Some(acc) => acc.scale(1.0 / action_logits.len() as f64),
            None => sess.tape.scalar(0.0),
        };

        let template = build_template(
            sample.score,
            self.cfg.score_decimals,
            &sample.actions,
            &self.lexicon,
            &self.vocab,
            self.cfg.slots_per_gap,
        )?;
        let caption_words: Vec<String> = sample.captions[0]
            .split_whitespace()
            .map(str::to_string)
            .collect();
        let caption_ids = self.vocab.encode(&caption_words);
        let train_out = self.decoder.forward_train(
            &mut sess,
            &self.store,
            &vocab_emb,
            &caption_ids,
            &template,
            &e_v_star,
            self.cfg.lambda_sparse,
        )?;

        let total = train_out
            .gen_loss
            .add(&match_outcome.loss)?
            .add(&l_mse)?
            .add(&l_ce_a)?
            .add(&train_out.sparse_loss)?;
        let score_pred_norm = score_pred.item();
        Ok(StepOutput {
            sess,
            losses: StepLosses {
                total,
                gen: train_out.gen_loss,
                ce_s: match_outcome.loss.clone(),
                mse: l_mse,
                ce_a: l_ce_a,
                sparse: train_out.sparse_loss,
            },
            sum_v: train_out.sum_v,
            match_outcome,
            score_pred_norm,
        })
    }

    /// Interval-matching logits for a sample, for classification accuracy.
    pub fn match_probabilities(&self, sample: &Sample) -> Result<(Vec<f64>, usize)> {
        self.check_sample(sample)?;
        let mut sess = Session::new();
        let (e_v_star, pooled_prompts, _) = self.encode(&mut sess, &sample.features)?;
        let logits = self
            .interaction
            .match_logits(&mut sess, &self.store, &e_v_star, &pooled_prompts)?;
        let target = classify_score(sample.score, &self.partition)? - 1;
        Ok((logits.data(), target))
    }

    /// Head predictions plus the refined video embeddings for decoding.
    pub fn predict(&self, features: &Tensor) -> Result<Prediction> {
        let mut sess = Session::new();
        let (e_v_star, _pooled_prompts, _) = self.encode(&mut sess, features)?;
        let (score_pred, action_logits) = self.heads.forward(&mut sess, &self.store, &e_v_star)?;
        let actions = action_logits
            .iter()
            .map(|l| {
                let d = l.data();
                let mut best = 0;
                for (i, &v) in d.iter().enumerate() {
                    if v > d[best] {
                        best = i;
                    }
                }
                best
            })
            .collect();
        Ok(Prediction {
            score: self.denormalize(score_pred.item()),
            actions,
            e_v_star: e_v_star.data(),
        })
    }

    /// Round the predicted score to the rendered precision so the template
    /// words and the reported prediction agree.
    fn rendered_score(&self, score: f64) -> f64 {
        let scale = 10f64.powi(self.cfg.score_decimals as i32);
        (score * scale).round() / scale
    }

    /// Full inference: predict heads, fill the template, decode.
    pub fn generate_for_features(&self, features: &Tensor) -> Result<GeneratedSample> {
        let pred = self.predict(features)?;
        let score_pred = self.rendered_score(pred.score);
        let template = build_template(
            score_pred,
            self.cfg.score_decimals,
            &pred.actions,
            &self.lexicon,
            &self.vocab,
            self.cfg.slots_per_gap,
        )?;
        let tokens = self.decode_with_template(&template, pred.e_v_star.clone())?;
        Ok(GeneratedSample {
            tokens: self.vocab.decode(&tokens),
            score_pred,
            action_preds: pred.actions,
        })
    }

    pub fn decode_with_template(
        &self,
        template: &Template,
        e_v_star: Vec<f64>,
    ) -> Result<Vec<usize>> {
        let ctx = GenerationContext {
            decoder: &self.decoder,
            ps: &self.store,
            vocab_emb_name: VOCAB_EMB,
            template,
            e_v_star,
            video_tokens: self.cfg.video_tokens,
            width: self.cfg.dim,
        };
        let strategy = match self.cfg.decode {
            DecodeMode::Greedy => DecodeStrategy::Greedy,
            DecodeMode::Beam(w) => DecodeStrategy::Beam(w),
        };
        Ok(generate(&ctx, self.cfg.max_caption_len, strategy)?)
    }

    /// Hidden states of one decoder pass, for mask-behavior tests:
    /// `(word rows, template rows, video rows)` of the final layer.
    pub fn decoder_hidden_blocks(
        &self,
        sample: &Sample,
        caption_ids: &[usize],
    ) -> Result<(Vec<f64>, Vec<f64>, Vec<f64>)> {
        self.check_sample(sample)?;
        let mut sess = Session::new();
        let (e_v_star, _, vocab_emb) = self.encode(&mut sess, &sample.features)?;
        let template = build_template(
            sample.score,
            self.cfg.score_decimals,
            &sample.actions,
            &self.lexicon,
            &self.vocab,
            self.cfg.slots_per_gap,
        )?;
        let out = self.decoder.forward_train(
            &mut sess,
            &self.store,
            &vocab_emb,
            caption_ids,
            &template,
            &e_v_star,
            self.cfg.lambda_sparse,
        )?;
        let hidden = &out.decoder.hidden;
        let w = self.decoder_word_rows();
        let p = template.len();
        let m = self.cfg.video_tokens;
        Ok((
            hidden.slice_rows(0, w)?.data(),
            hidden.slice_rows(w, p)?.data(),
            hidden.slice_rows(w + p, m)?.data(),
        ))
    }

    /// Word-row logits of one teacher-forced pass.
    pub fn decoder_word_logits(&self, sample: &Sample, caption_ids: &[usize]) -> Result<Vec<f64>> {
        self.check_sample(sample)?;
        let mut sess = Session::new();
        let (e_v_star, _, vocab_emb) = self.encode(&mut sess, &sample.features)?;
        let template = build_template(
            sample.score,
            self.cfg.score_decimals,
            &sample.actions,
            &self.lexicon,
            &self.vocab,
            self.cfg.slots_per_gap,
        )?;
        let out = self.decoder.forward_train(
            &mut sess,
            &self.store,
            &vocab_emb,
            caption_ids,
            &template,
            &e_v_star,
            self.cfg.lambda_sparse,
        )?;
        Ok(out.decoder.logits.data())
    }

    pub fn decoder_word_rows(&self) -> usize {
        self.cfg.max_caption_len + 1
    }

    pub fn raw_video_mask_name(&self) -> &str {
        "dec.video_mask_raw"
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::gen_synthetic_dataset;
    use crate::score_space::partition_scores;

    pub(crate) fn tiny_cfg() -> RunConfig {
        let mut cfg = RunConfig::default();
        cfg.dim = 8;
        cfg.heads = 2;
        cfg.dec_layers = 1;
        cfg.ffn_mult = 2;
        cfg.mlp_hidden = 8;
        cfg.video_tokens = 3;
        cfg.feature_dim = 4;
        cfg.intervals = 3;
        cfg.parts = 1;
        cfg.max_caption_len = 20;
        cfg.prompt_slots = 2;
        cfg.slots_per_gap = 1;
        cfg.n_train = 6;
        cfg.n_test = 2;
        cfg
    }

    pub(crate) fn tiny_model() -> (NaeModel, Vec<Sample>) {
        let cfg = tiny_cfg();
        let lexicon = ActionLexicon::standard(cfg.parts).unwrap();
        let (train, _) = gen_synthetic_dataset(&cfg, &lexicon).unwrap();
        let scores: Vec<f64> = train.iter().map(|s| s.score).collect();
        let partition = partition_scores(&scores, cfg.intervals).unwrap();
        let model = NaeModel::new(cfg, lexicon, partition).unwrap();
        (model, train)
    }

    #[test]
    fn forward_losses_are_finite_and_nonnegative() {
        let (model, train) = tiny_model();
        let out = model.forward_train(&train[0]).unwrap();
        for (name, v) in [
            ("total", &out.losses.total),
            ("gen", &out.losses.gen),
            ("ce_s", &out.losses.ce_s),
            ("mse", &out.losses.mse),
            ("ce_a", &out.losses.ce_a),
            ("sparse", &out.losses.sparse),
        ] {
            let x = v.item();
            assert!(x.is_finite() && x >= 0.0, "{name} = {x}");
        }
        // lambda * sum(V) exactly
        assert!(
            (out.losses.sparse.item() - model.cfg.lambda_sparse * out.sum_v).abs() < 1e-12
        );
    }

    #[test]
    fn sparse_sum_matches_sigmoid_of_zero_init() {
        let (model, train) = tiny_model();
        let out = model.forward_train(&train[0]).unwrap();
        // raw mask initializes to zeros: V = 0.5 everywhere
        let m = model.cfg.video_tokens as f64;
        assert!((out.sum_v - 0.5 * m * m).abs() < 1e-12);
    }

    #[test]
    fn backward_reaches_prompt_slots() {
        let (mut model, train) = tiny_model();
        let out = model.forward_train(&train[0]).unwrap();
        out.losses.total.backward().unwrap();
        out.sess.harvest(&mut model.store);
        let grad = model
            .store
            .get("emb.prompt_slots")
            .unwrap()
            .tensor
            .grad
            .clone()
            .expect("slot grads populated");
        assert!(grad.iter().any(|&g| g != 0.0));
    }

    #[test]
    fn deterministic_forward() {
        let (model_a, train_a) = tiny_model();
        let (model_b, train_b) = tiny_model();
        assert_eq!(train_a, train_b);
        let a = model_a.forward_train(&train_a[0]).unwrap();
        let b = model_b.forward_train(&train_b[0]).unwrap();
        assert_eq!(a.losses.total.item(), b.losses.total.item());
        assert_eq!(a.match_outcome.logits, b.match_outcome.logits);
    }

    #[test]
    fn generation_is_deterministic_and_bounded() {
        let (model, train) = tiny_model();
        let a = model.generate_for_features(&train[0].features).unwrap();
        let b = model.generate_for_features(&train[0].features).unwrap();
        assert_eq!(a.tokens, b.tokens);
        assert!(a.tokens.len() <= model.cfg.max_caption_len);
    }

    #[test]
    fn beam_width_one_equals_greedy() {
        let (mut model, train) = tiny_model();
        let greedy = model.generate_for_features(&train[1].features).unwrap();
        model.cfg.decode = DecodeMode::Beam(1);
        let beam = model.generate_for_features(&train[1].features).unwrap();
        assert_eq!(greedy.tokens, beam.tokens);
    }

    #[test]
    fn mismatched_sample_shapes_error() {
        let (model, train) = tiny_model();
        let mut bad = train[0].clone();
        bad.actions.push(0);
        assert!(matches!(
            model.forward_train(&bad),
            Err(ModelError::PartCountMismatch { .. })
        ));
        let mut bad2 = train[0].clone();
        bad2.features = Tensor::zeros(vec![2, 2]);
        assert!(matches!(
            model.forward_train(&bad2),
            Err(ModelError::FeatureShape { .. })
        ));
    }
}
