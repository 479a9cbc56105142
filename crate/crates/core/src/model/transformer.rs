//! Encoder-decoder transformer with rule vectors in the encoder input and
//! rule/prefix key-value injection in selected encoder layers.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::attention::{multi_head, AttentionParams, HeadTrace};
use super::init::{normal_matrix, xavier_std};
use super::tape::{Mask, Mat, ParamId, ParamStore, Tape, Var};
use crate::error::{Error, Result};
use crate::scoring::embed_text_hashed;
use crate::text::{BOS_ID, EOS_ID};

/// How the rule text becomes encoder rows.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RuleTokenMode {
    /// One pooled vector for the whole serialized rule.
    #[default]
    Pooled,
    /// One vector for the verb and one per role/filler segment.
    PerPair,
    /// One vector for the verb and one per (role, filler), so every
    /// multi-token name keeps its own row.
    PerFiller,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub d_model: usize,
    pub n_heads: usize,
    pub n_enc_layers: usize,
    pub n_dec_layers: usize,
    pub ffn_dim: usize,
    pub vocab_size: usize,
    /// 1-based encoder layers that receive rule/prefix injection.
    pub inject_layers: Vec<usize>,
    pub prefix_len: usize,
    pub d_img: usize,
    pub d_rule_txt: usize,
    pub max_src_len: usize,
    pub max_tgt_len: usize,
    #[serde(default)]
    pub rule_tokens: RuleTokenMode,
    #[serde(default)]
    pub rule_text_seed: u64,
    #[serde(default)]
    pub init_seed: u64,
    #[serde(default = "default_prefix_std")]
    pub prefix_init_std: f64,
    /// Allocate the rule projection and prefixes at all.
    #[serde(default = "default_true")]
    pub use_rule: bool,
    #[serde(default = "default_ln_eps")]
    pub ln_eps: f64,
}

fn default_prefix_std() -> f64 {
    0.02
}

fn default_true() -> bool {
    true
}

fn default_ln_eps() -> f64 {
    1e-5
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            d_model: 128,
            n_heads: 4,
            n_enc_layers: 4,
            n_dec_layers: 4,
            ffn_dim: 256,
            vocab_size: 512,
            inject_layers: vec![4],
            prefix_len: 4,
            d_img: 64,
            d_rule_txt: 256,
            max_src_len: 64,
            max_tgt_len: 32,
            rule_tokens: RuleTokenMode::Pooled,
            rule_text_seed: 0,
            init_seed: 0,
            prefix_init_std: default_prefix_std(),
            use_rule: true,
            ln_eps: default_ln_eps(),
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.d_model == 0 || self.n_heads == 0 || !self.d_model.is_multiple_of(self.n_heads) {
            return bad(format!(
                "d_model {} must be a positive multiple of n_heads {}",
                self.d_model, self.n_heads
            ));
        }
        if self.n_enc_layers == 0 || self.n_dec_layers == 0 {
            return bad("need at least one encoder and one decoder layer".into());
        }
        if self.vocab_size <= EOS_ID {
            return bad("vocab_size must include the special tokens".into());
        }
        if self.ffn_dim == 0 || self.d_img == 0 || self.d_rule_txt == 0 {
            return bad("ffn_dim, d_img and d_rule_txt must be >= 1".into());
        }
        if self.max_tgt_len == 0 {
            return bad("max_tgt_len must be >= 1".into());
        }
        let mut seen = std::collections::BTreeSet::new();
        for &l in &self.inject_layers {
            if l == 0 || l > self.n_enc_layers {
                return bad(format!(
                    "inject layer {l} outside 1..={}",
                    self.n_enc_layers
                ));
            }
            if !seen.insert(l) {
                return bad(format!("inject layer {l} listed twice"));
            }
        }
        if !self.use_rule && (!self.inject_layers.is_empty() || self.prefix_len > 0) {
            return bad("inject_layers/prefix_len need use_rule = true".into());
        }
        Ok(())
    }

    /// Number of injected layers.
    pub fn m(&self) -> usize {
        self.inject_layers.len()
    }
}

/// Ablation variants. The rule text differs between FULL, NON_ENTITY and
/// PER_RULE; NON_RULE removes the rule from the model entirely.
#[derive(
    Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize, Default,
)]
pub enum Variant {
    #[default]
    #[serde(rename = "FULL")]
    Full,
    #[serde(rename = "NON_RULE")]
    NonRule,
    #[serde(rename = "NON_ENTITY")]
    NonEntity,
    #[serde(rename = "PER_RULE")]
    PerRule,
}

impl Variant {
    pub const ALL: [Variant; 4] = [
        Variant::Full,
        Variant::NonRule,
        Variant::NonEntity,
        Variant::PerRule,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Variant::Full => "FULL",
            Variant::NonRule => "NON_RULE",
            Variant::NonEntity => "NON_ENTITY",
            Variant::PerRule => "PER_RULE",
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_uppercase().replace('-', "_").as_str() {
            "FULL" => Ok(Variant::Full),
            "NON_RULE" => Ok(Variant::NonRule),
            "NON_ENTITY" => Ok(Variant::NonEntity),
            "PER_RULE" => Ok(Variant::PerRule),
            other => Err(Error::Config(format!("unknown variant {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy)]
struct LayerNormParams {
    gamma: ParamId,
    beta: ParamId,
}

impl LayerNormParams {
    fn new(store: &mut ParamStore, name: &str, d: usize) -> Self {
        LayerNormParams {
            gamma: store.add(format!("{name}.gamma"), Array2::ones((1, d)), false),
            beta: store.add(format!("{name}.beta"), Array2::zeros((1, d)), false),
        }
    }

    fn apply(&self, tape: &mut Tape<'_>, x: Var, eps: f64) -> Var {
        let g = tape.param(self.gamma);
        let b = tape.param(self.beta);
        tape.layer_norm(x, g, b, eps)
    }
}

#[derive(Debug, Clone, Copy)]
struct FeedForward {
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
}

impl FeedForward {
    fn new(
        store: &mut ParamStore,
        name: &str,
        d_in: usize,
        d_hidden: usize,
        d_out: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        FeedForward {
            w1: store.add(
                format!("{name}.w1"),
                normal_matrix(d_in, d_hidden, xavier_std(d_in, d_hidden), rng),
                true,
            ),
            b1: store.add(format!("{name}.b1"), Array2::zeros((1, d_hidden)), false),
            w2: store.add(
                format!("{name}.w2"),
                normal_matrix(d_hidden, d_out, xavier_std(d_hidden, d_out), rng),
                true,
            ),
            b2: store.add(format!("{name}.b2"), Array2::zeros((1, d_out)), false),
        }
    }

    fn apply(&self, tape: &mut Tape<'_>, x: Var) -> Var {
        let (w1, b1, w2, b2) = (
            tape.param(self.w1),
            tape.param(self.b1),
            tape.param(self.w2),
            tape.param(self.b2),
        );
        let h = tape.matmul(x, w1);
        let h = tape.add_row(h, b1);
        let h = tape.gelu(h);
        let o = tape.matmul(h, w2);
        tape.add_row(o, b2)
    }
}

#[derive(Debug, Clone)]
struct EncoderLayer {
    attn: AttentionParams,
    ln1: LayerNormParams,
    ffn: FeedForward,
    ln2: LayerNormParams,
}

#[derive(Debug, Clone)]
struct DecoderLayer {
    self_attn: AttentionParams,
    ln1: LayerNormParams,
    cross_attn: AttentionParams,
    ln2: LayerNormParams,
    ffn: FeedForward,
    ln3: LayerNormParams,
}

#[derive(Debug, Clone, Copy)]
struct RuleParams {
    w: ParamId,
    b: ParamId,
}

#[derive(Debug, Clone)]
struct ModelParams {
    tok_emb: ParamId,
    enc_pos: ParamId,
    dec_pos: ParamId,
    visual: FeedForward,
    enc: Vec<EncoderLayer>,
    dec: Vec<DecoderLayer>,
    out_bias: ParamId,
    rule: Option<RuleParams>,
    prefixes: BTreeMap<usize, ParamId>,
}

/// Raw per-sample model input.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ModelInput {
    /// Serialized rule text(s); ignored when the rule is disabled.
    pub rule_texts: Vec<String>,
    pub image_feature: Vec<f64>,
    pub article_ids: Vec<usize>,
}

/// Encoder output on a tape.
#[derive(Debug, Clone)]
pub struct Encoded {
    pub context: Var,
    /// Article tokens dropped to fit `max_src_len`.
    pub truncated: usize,
    pub trace: Vec<HeadTrace>,
}

#[derive(Debug, Clone)]
pub struct RuleCapModel {
    config: ModelConfig,
    pub params: ParamStore,
    ids: ModelParams,
    variant: Variant,
    /// Put rule vectors at the front of the encoder input sequence.
    pub rule_in_input: bool,
    /// Add rule vectors and prefixes to keys/values of injected layers.
    pub rule_injection: bool,
}

impl RuleCapModel {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let c = &config;
        let d = c.d_model;
        let mut rng = ChaCha8Rng::seed_from_u64(c.init_seed);
        let mut store = ParamStore::new();
        let emb_std = 0.3 / (d as f64).sqrt();
        let tok_emb = store.add(
            "tok_emb",
            normal_matrix(c.vocab_size, d, emb_std, &mut rng),
            true,
        );
        let enc_pos = store.add(
            "enc_pos",
            normal_matrix(c.max_src_len.max(1), d, 0.02, &mut rng),
            false,
        );
        let dec_pos = store.add(
            "dec_pos",
            normal_matrix(c.max_tgt_len + 1, d, 0.02, &mut rng),
            false,
        );
        let visual = FeedForward::new(&mut store, "visual", c.d_img, d, d, &mut rng);
        let enc = (0..c.n_enc_layers)
            .map(|l| {
                let name = format!("enc.{}", l + 1);
                EncoderLayer {
                    attn: AttentionParams::new(&mut store, &format!("{name}.attn"), d, &mut rng),
                    ln1: LayerNormParams::new(&mut store, &format!("{name}.ln1"), d),
                    ffn: FeedForward::new(
                        &mut store,
                        &format!("{name}.ffn"),
                        d,
                        c.ffn_dim,
                        d,
                        &mut rng,
                    ),
                    ln2: LayerNormParams::new(&mut store, &format!("{name}.ln2"), d),
                }
            })
            .collect();
        let dec = (0..c.n_dec_layers)
            .map(|l| {
                let name = format!("dec.{}", l + 1);
                DecoderLayer {
                    self_attn: AttentionParams::new(
                        &mut store,
                        &format!("{name}.self_attn"),
                        d,
                        &mut rng,
                    ),
                    ln1: LayerNormParams::new(&mut store, &format!("{name}.ln1"), d),
                    cross_attn: AttentionParams::new(
                        &mut store,
                        &format!("{name}.cross_attn"),
                        d,
                        &mut rng,
                    ),
                    ln2: LayerNormParams::new(&mut store, &format!("{name}.ln2"), d),
                    ffn: FeedForward::new(
                        &mut store,
                        &format!("{name}.ffn"),
                        d,
                        c.ffn_dim,
                        d,
                        &mut rng,
                    ),
                    ln3: LayerNormParams::new(&mut store, &format!("{name}.ln3"), d),
                }
            })
            .collect();
        let out_bias = store.add("out_bias", Array2::zeros((1, c.vocab_size)), false);

        // Rule machinery is allocated last so models built without it share
        // every other parameter for the same seed.
        let mut rule = None;
        let mut prefixes = BTreeMap::new();
        if c.use_rule {
            rule = Some(RuleParams {
                w: store.add(
                    "rule.w",
                    normal_matrix(c.d_rule_txt, d, xavier_std(c.d_rule_txt, d), &mut rng),
                    true,
                ),
                b: store.add("rule.b", Array2::zeros((1, d)), false),
            });
            if c.prefix_len > 0 {
                for &l in &c.inject_layers {
                    let p = normal_matrix(c.prefix_len, d, c.prefix_init_std, &mut rng);
                    prefixes.insert(l, store.add(format!("prefix.{l}"), p, false));
                }
            }
        }
        let has_rule = c.use_rule;
        Ok(RuleCapModel {
            config,
            params: store,
            ids: ModelParams {
                tok_emb,
                enc_pos,
                dec_pos,
                visual,
                enc,
                dec,
                out_bias,
                rule,
                prefixes,
            },
            variant: if has_rule {
                Variant::Full
            } else {
                Variant::NonRule
            },
            rule_in_input: has_rule,
            rule_injection: has_rule,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn variant(&self) -> Variant {
        self.variant
    }

    /// Selects an ablation variant. NON_RULE drops the rule vector from the
    /// encoder input and disables every injection; the other variants keep
    /// both (they differ in how the rule text is built).
    pub fn set_variant(&mut self, variant: Variant) -> Result<()> {
        let wants_rule = variant != Variant::NonRule;
        if wants_rule && self.ids.rule.is_none() {
            return Err(Error::Config(format!(
                "variant {variant} needs a model built with use_rule = true"
            )));
        }
        self.variant = variant;
        self.rule_in_input = wants_rule;
        self.rule_injection = wants_rule;
        Ok(())
    }

    pub fn has_rule_params(&self) -> bool {
        self.ids.rule.is_some()
    }

    /// Prefix matrix for an injected layer, if any.
    pub fn prefix(&self, layer: usize) -> Option<ParamId> {
        self.ids.prefixes.get(&layer).copied()
    }

    /// Two-layer perceptron from the image feature to one `1 × d_model` row.
    pub fn embed_visual(&self, tape: &mut Tape<'_>, feature: &[f64]) -> Result<Var> {
        if feature.len() != self.config.d_img {
            return Err(Error::Dimension(format!(
                "image feature has {} entries, model expects {}",
                feature.len(),
                self.config.d_img
            )));
        }
        let f = tape
            .constant(Array2::from_shape_vec((1, feature.len()), feature.to_vec()).expect("row"));
        Ok(self.ids.visual.apply(tape, f))
    }

    /// Linear map of the hashed text embedding of one rule text.
    pub fn embed_rule(&self, tape: &mut Tape<'_>, rule_text: &str) -> Result<Var> {
        let rp = self
            .ids
            .rule
            .ok_or_else(|| Error::Config("model was built without rule parameters".into()))?;
        let e = embed_text_hashed(
            rule_text,
            self.config.d_rule_txt,
            self.config.rule_text_seed,
        );
        let e = tape.constant(Array2::from_shape_vec((1, e.len()), e).expect("row"));
        let w = tape.param(rp.w);
        let b = tape.param(rp.b);
        let y = tape.matmul(e, w);
        Ok(tape.add_row(y, b))
    }

    fn rule_rows(&self, tape: &mut Tape<'_>, texts: &[String]) -> Result<Option<Var>> {
        if texts.is_empty() {
            return Ok(None);
        }
        let rows = texts
            .iter()
            .map(|t| self.embed_rule(tape, t))
            .collect::<Result<Vec<_>>>()?;
        Ok(Some(tape.concat_rows(&rows)))
    }

    /// Builds the encoder sequence `[rule rows; visual row; article]` and
    /// runs every encoder layer. Injected layers attend over
    /// `[rule rows; prefix; X]` for keys and values while queries come
    /// from `X` only, so the output has the input's length.
    pub fn encode(&self, tape: &mut Tape<'_>, input: &ModelInput) -> Result<Encoded> {
        let c = &self.config;
        let want_rule = self.rule_in_input || self.rule_injection;
        let rule = if want_rule {
            self.rule_rows(tape, &input.rule_texts)?
        } else {
            None
        };
        let visual = self.embed_visual(tape, &input.image_feature)?;

        let keep = input.article_ids.len().min(c.max_src_len);
        let truncated = input.article_ids.len() - keep;
        if truncated > 0 {
            log::warn!(
                "article truncated by {truncated} tokens to max_src_len {}",
                c.max_src_len
            );
        }
        let mut parts = Vec::with_capacity(3);
        if self.rule_in_input {
            if let Some(r) = rule {
                parts.push(r);
            }
        }
        parts.push(visual);
        if keep > 0 {
            let ids = &input.article_ids[..keep];
            if let Some(&bad) = ids.iter().find(|&&i| i >= c.vocab_size) {
                return Err(Error::InvalidInput(format!(
                    "token id {bad} outside vocabulary"
                )));
            }
            let table = tape.param(self.ids.tok_emb);
            let tok = tape.gather_rows(table, ids);
            let pos_table = tape.param(self.ids.enc_pos);
            let positions: Vec<usize> = (0..keep).collect();
            let pos = tape.gather_rows(pos_table, &positions);
            parts.push(tape.add(tok, pos));
        }
        let mut x = tape.concat_rows(&parts);

        let mut trace = Vec::new();
        for (li, layer) in self.ids.enc.iter().enumerate() {
            let l = li + 1;
            let injected = self.rule_injection && c.inject_layers.contains(&l);
            let (kv, prefix) = if injected {
                let kv = match rule {
                    Some(r) => tape.concat_rows(&[r, x]),
                    None => x,
                };
                let prefix = self.ids.prefixes.get(&l).map(|&p| tape.param(p));
                (kv, prefix)
            } else {
                (x, None)
            };
            let a = multi_head(
                tape,
                &layer.attn,
                x,
                kv,
                prefix,
                c.n_heads,
                Mask::None,
                l,
                &mut trace,
            )?;
            let h = tape.add(x, a);
            let h = layer.ln1.apply(tape, h, c.ln_eps);
            let f = layer.ffn.apply(tape, h);
            let h2 = tape.add(h, f);
            x = layer.ln2.apply(tape, h2, c.ln_eps);
        }
        Ok(Encoded {
            context: x,
            truncated,
            trace,
        })
    }

    /// Teacher-forced decoder logits, one row per input position
    /// (`len × vocab_size`).
    pub fn decode_logits(
        &self,
        tape: &mut Tape<'_>,
        context: Var,
        dec_input: &[usize],
        trace: &mut Vec<HeadTrace>,
    ) -> Result<Var> {
        let c = &self.config;
        if dec_input.is_empty() || dec_input.len() > c.max_tgt_len + 1 {
            return Err(Error::InvalidInput(format!(
                "decoder input length {} outside 1..={}",
                dec_input.len(),
                c.max_tgt_len + 1
            )));
        }
        if let Some(&bad) = dec_input.iter().find(|&&i| i >= c.vocab_size) {
            return Err(Error::InvalidInput(format!(
                "token id {bad} outside vocabulary"
            )));
        }
        let table = tape.param(self.ids.tok_emb);
        let tok = tape.gather_rows(table, dec_input);
        let pos_table = tape.param(self.ids.dec_pos);
        let positions: Vec<usize> = (0..dec_input.len()).collect();
        let pos = tape.gather_rows(pos_table, &positions);
        let mut x = tape.add(tok, pos);
        let base = c.n_enc_layers;
        for (li, layer) in self.ids.dec.iter().enumerate() {
            let l = base + li + 1;
            let a = multi_head(
                tape,
                &layer.self_attn,
                x,
                x,
                None,
                c.n_heads,
                Mask::Causal { offset: 0 },
                l,
                trace,
            )?;
            let h = tape.add(x, a);
            let h = layer.ln1.apply(tape, h, c.ln_eps);
            let ca = multi_head(
                tape,
                &layer.cross_attn,
                h,
                context,
                None,
                c.n_heads,
                Mask::None,
                l,
                trace,
            )?;
            let h2 = tape.add(h, ca);
            let h2 = layer.ln2.apply(tape, h2, c.ln_eps);
            let f = layer.ffn.apply(tape, h2);
            let h3 = tape.add(h2, f);
            x = layer.ln3.apply(tape, h3, c.ln_eps);
        }
        let logits = tape.matmul_nt(x, table);
        let bias = tape.param(self.ids.out_bias);
        Ok(tape.add_row(logits, bias))
    }

    /// Summed cross-entropy of `[target; EOS]` given `[BOS; target]`, with
    /// the target clipped to `max_tgt_len`. Returns the loss node and the
    /// number of predicted tokens.
    pub fn sequence_loss(
        &self,
        tape: &mut Tape<'_>,
        input: &ModelInput,
        target: &[usize],
    ) -> Result<(Var, usize)> {
        let (dec_in, dec_out) = self.teacher_forcing_pair(target);
        let enc = self.encode(tape, input)?;
        let logits = self.decode_logits(tape, enc.context, &dec_in, &mut Vec::new())?;
        Ok((tape.cross_entropy_sum(logits, &dec_out), dec_out.len()))
    }

    pub fn teacher_forcing_pair(&self, target: &[usize]) -> (Vec<usize>, Vec<usize>) {
        let t = &target[..target.len().min(self.config.max_tgt_len)];
        let mut dec_in = Vec::with_capacity(t.len() + 1);
        dec_in.push(BOS_ID);
        dec_in.extend_from_slice(t);
        let mut dec_out = t.to_vec();
        dec_out.push(EOS_ID);
        (dec_in, dec_out)
    }

    /// Encoder output as a plain matrix, for decoding.
    pub fn context(&self, input: &ModelInput) -> Result<Mat> {
        let mut tape = Tape::new(&self.params);
        let enc = self.encode(&mut tape, input)?;
        Ok(tape.value(enc.context).clone())
    }

    pub fn param_names(&self) -> Vec<String> {
        self.params
            .ids()
            .map(|id| self.params.name(id).to_string())
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn tiny_config() -> ModelConfig {
        ModelConfig {
            d_model: 8,
            n_heads: 2,
            n_enc_layers: 2,
            n_dec_layers: 1,
            ffn_dim: 8,
            vocab_size: 12,
            inject_layers: vec![2],
            prefix_len: 2,
            d_img: 4,
            d_rule_txt: 6,
            max_src_len: 10,
            max_tgt_len: 6,
            ..ModelConfig::default()
        }
    }

    fn input() -> ModelInput {
        ModelInput {
            rule_texts: vec!["performing | Agent: Ms. Micucci".into()],
            image_feature: vec![0.1, -0.3, 0.7, 0.2],
            article_ids: vec![4, 5, 6, 7, 8],
        }
    }

    #[test]
    fn config_validation() {
        assert!(tiny_config().validate().is_ok());
        let mut c = tiny_config();
        c.d_model = 7;
        assert!(c.validate().is_err());
        let mut c = tiny_config();
        c.inject_layers = vec![3];
        assert!(c.validate().is_err());
        let mut c = tiny_config();
        c.inject_layers = vec![1, 1];
        assert!(c.validate().is_err());
        let mut c = tiny_config();
        c.use_rule = false;
        assert!(c.validate().is_err());
    }

    #[test]
    fn encoder_keeps_sequence_length() {
        let m = RuleCapModel::new(tiny_config()).unwrap();
        let mut t = Tape::new(&m.params);
        let e = m.encode(&mut t, &input()).unwrap();
        // rule + visual + 5 article tokens
        assert_eq!(t.shape(e.context), (7, 8));
        let mut m2 = m.clone();
        m2.set_variant(Variant::NonRule).unwrap();
        let mut t2 = Tape::new(&m2.params);
        let e2 = m2.encode(&mut t2, &input()).unwrap();
        assert_eq!(t2.shape(e2.context), (6, 8));
    }

    #[test]
    fn truncates_long_articles() {
        let m = RuleCapModel::new(tiny_config()).unwrap();
        let mut inp = input();
        inp.article_ids = vec![4; 15];
        let mut t = Tape::new(&m.params);
        let e = m.encode(&mut t, &inp).unwrap();
        assert_eq!(e.truncated, 5);
        assert_eq!(t.shape(e.context).0, 12);
    }

    #[test]
    fn visual_zero_weights_give_zero() {
        let mut c = tiny_config();
        c.d_img = 3;
        let mut m = RuleCapModel::new(c).unwrap();
        for name in ["visual.w1", "visual.w2"] {
            let id = m.params.ids().find(|&i| m.params.name(i) == name).unwrap();
            m.params.get_mut(id).fill(0.0);
        }
        let mut t = Tape::new(&m.params);
        let v = m.embed_visual(&mut t, &[1.0, 2.0, 3.0]).unwrap();
        assert!(t.value(v).iter().all(|&x| x == 0.0));
        assert!(matches!(
            m.embed_visual(&mut t, &[1.0]),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn visual_one_by_one_by_hand() {
        let mut c = tiny_config();
        c.d_img = 1;
        c.d_model = 1;
        c.n_heads = 1;
        let mut m = RuleCapModel::new(c).unwrap();
        for (name, v) in [
            ("visual.w1", 2.0),
            ("visual.b1", -0.5),
            ("visual.w2", 3.0),
            ("visual.b2", 0.25),
        ] {
            let id = m.params.ids().find(|&i| m.params.name(i) == name).unwrap();
            m.params.get_mut(id).fill(v);
        }
        let mut t = Tape::new(&m.params);
        let v = m.embed_visual(&mut t, &[0.75]).unwrap();
        // h = 2 * 0.75 - 0.5 = 1.0; gelu(1.0) = 0.5 * (1 + tanh(0.7978845608 * 1.044715))
        let g1 = 0.5 * (1.0 + (0.797_884_560_802_865_4_f64 * 1.044715).tanh());
        assert!((t.value(v)[[0, 0]] - (3.0 * g1 + 0.25)).abs() < 1e-12);
        assert!((g1 - 0.841_191_990_608_276_8).abs() < 1e-12);
    }

    #[test]
    fn rule_embedding_edge_cases() {
        let mut m = RuleCapModel::new(tiny_config()).unwrap();
        let w = m
            .params
            .ids()
            .find(|&i| m.params.name(i) == "rule.w")
            .unwrap();
        let b = m
            .params
            .ids()
            .find(|&i| m.params.name(i) == "rule.b")
            .unwrap();
        m.params
            .get_mut(b)
            .assign(&Array2::from_shape_fn((1, 8), |(_, c)| c as f64));
        {
            let mut t = Tape::new(&m.params);
            let empty = m.embed_rule(&mut t, "").unwrap();
            assert_eq!(t.value(empty), m.params.get(b));
        }
        m.params.get_mut(w).fill(0.0);
        let mut t = Tape::new(&m.params);
        let r = m.embed_rule(&mut t, "performing | Agent: X").unwrap();
        assert_eq!(t.value(r), m.params.get(b));
    }

    #[test]
    fn rule_embedding_two_dim_by_hand() {
        let mut c = tiny_config();
        c.d_rule_txt = 2;
        c.d_model = 2;
        c.n_heads = 1;
        let mut m = RuleCapModel::new(c.clone()).unwrap();
        let w = m
            .params
            .ids()
            .find(|&i| m.params.name(i) == "rule.w")
            .unwrap();
        let b = m
            .params
            .ids()
            .find(|&i| m.params.name(i) == "rule.b")
            .unwrap();
        *m.params.get_mut(w) = ndarray::array![[1.0, 2.0], [3.0, 4.0]];
        *m.params.get_mut(b) = ndarray::array![[0.5, -0.5]];
        let text = "alpha beta";
        let e = embed_text_hashed(text, 2, c.rule_text_seed);
        let mut t = Tape::new(&m.params);
        let r = m.embed_rule(&mut t, text).unwrap();
        let expect = [e[0] * 1.0 + e[1] * 3.0 + 0.5, e[0] * 2.0 + e[1] * 4.0 - 0.5];
        assert!((t.value(r)[[0, 0]] - expect[0]).abs() < 1e-12);
        assert!((t.value(r)[[0, 1]] - expect[1]).abs() < 1e-12);
    }

    #[test]
    fn non_rule_variant_needs_no_rule_params() {
        let mut c = tiny_config();
        c.use_rule = false;
        c.inject_layers.clear();
        c.prefix_len = 0;
        let mut m = RuleCapModel::new(c).unwrap();
        assert_eq!(m.variant(), Variant::NonRule);
        assert!(m.set_variant(Variant::Full).is_err());
        assert!(m.set_variant(Variant::NonRule).is_ok());
    }

    #[test]
    fn variant_parsing() {
        for v in Variant::ALL {
            assert_eq!(v.as_str().parse::<Variant>().unwrap(), v);
        }
        assert_eq!("non-rule".parse::<Variant>().unwrap(), Variant::NonRule);
        assert!("x".parse::<Variant>().is_err());
    }
}
