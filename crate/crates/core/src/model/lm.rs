use rand::distr::{Distribution, Uniform};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::tokenizer::{TokenId, BYTE_VOCAB};
use crate::autodiff::{ParamSet, Tape, Tensor, Var};
use crate::error::{Error, Result};

const LN_EPS: f64 = 1e-5;
const EMBED_STD: f64 = 0.02;
const PARAMS_PER_LAYER: usize = 12;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub context_len: usize,
    pub init_seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            vocab_size: BYTE_VOCAB,
            d_model: 64,
            n_layers: 2,
            n_heads: 4,
            context_len: 256,
            init_seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("vocab_size", self.vocab_size),
            ("d_model", self.d_model),
            ("n_layers", self.n_layers),
            ("n_heads", self.n_heads),
            ("context_len", self.context_len),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::ModelConfig(format!("{name} must be positive")));
        }
        if self.d_model % self.n_heads != 0 {
            return Err(Error::ModelConfig(format!(
                "d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        Ok(())
    }

    /// Equal in everything but the initialisation seed.
    pub fn same_architecture(&self, other: &ModelConfig) -> bool {
        ModelConfig {
            init_seed: other.init_seed,
            ..self.clone()
        } == *other
    }

    fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }
}

/// A tokenized prompt/answer record. The answer is scored token by token,
/// each conditioned on the prompt and the preceding answer tokens.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Sample {
    prompt: Vec<TokenId>,
    answer: Vec<TokenId>,
}

impl Sample {
    /// The prompt must hold at least one token so the first answer token
    /// has something to be predicted from.
    pub fn new(prompt: Vec<TokenId>, answer: Vec<TokenId>) -> Result<Self> {
        if prompt.is_empty() {
            return Err(Error::InvalidValue("sample prompt is empty".into()));
        }
        if answer.is_empty() {
            return Err(Error::InvalidValue("sample answer is empty".into()));
        }
        Ok(Self { prompt, answer })
    }

    pub fn prompt_tokens(&self) -> &[TokenId] {
        &self.prompt
    }

    pub fn answer_tokens(&self) -> &[TokenId] {
        &self.answer
    }

    /// Answer length `m`.
    pub fn answer_len(&self) -> usize {
        self.answer.len()
    }

    pub fn total_len(&self) -> usize {
        self.prompt.len() + self.answer.len()
    }

    pub fn tokens(&self) -> Vec<TokenId> {
        let mut t = self.prompt.clone();
        t.extend_from_slice(&self.answer);
        t
    }

    /// `true` at positions of [`Sample::tokens`] that belong to the answer.
    pub fn answer_mask(&self) -> Vec<bool> {
        let mut m = vec![false; self.prompt.len()];
        m.resize(self.total_len(), true);
        m
    }
}

/// Answer log-probability under a model, in nats.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LogProbSummary {
    pub sum_logprob: f64,
    pub mean_logprob: f64,
    pub answer_len: usize,
}

impl LogProbSummary {
    pub fn new(sum_logprob: f64, answer_len: usize) -> Self {
        assert!(answer_len > 0);
        Self {
            sum_logprob,
            mean_logprob: sum_logprob / answer_len as f64,
            answer_len,
        }
    }
}

/// Differentiable answer log-probability (sum convention).
#[derive(Debug, Clone, Copy)]
pub struct LogProbVar<'t> {
    pub sum: Var<'t>,
    pub answer_len: usize,
}

impl LogProbVar<'_> {
    pub fn summary(&self) -> LogProbSummary {
        LogProbSummary::new(self.sum.item(), self.answer_len)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LanguageModel {
    config: ModelConfig,
    params: ParamSet,
}

fn uniform_tensor(rng: &mut ChaCha8Rng, shape: Vec<usize>, bound: f64) -> Tensor {
    let dist = Uniform::new_inclusive(-bound, bound).expect("positive bound");
    let n = shape.iter().product();
    let data = (0..n).map(|_| dist.sample(rng)).collect();
    Tensor::new(shape, data).expect("consistent shape")
}

fn filled(shape: Vec<usize>, value: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, vec![value; n]).expect("consistent shape")
}

impl LanguageModel {
    /// Builds a model with parameters drawn deterministically from
    /// `config.init_seed`.
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.init_seed);
        let (v, d, c) = (config.vocab_size, config.d_model, config.context_len);
        let hidden = 4 * d;
        // Uniform with the same variance as N(0, EMBED_STD^2).
        let embed = EMBED_STD * 3f64.sqrt();
        let fan_in = |n: usize| 1.0 / (n as f64).sqrt();

        let mut params = ParamSet::new();
        params.push("tok_emb", uniform_tensor(&mut rng, vec![v, d], embed));
        params.push("pos_emb", uniform_tensor(&mut rng, vec![c, d], embed));
        for l in 0..config.n_layers {
            let p = format!("layers.{l}");
            params.push(format!("{p}.ln1.gain"), filled(vec![d], 1.0));
            params.push(format!("{p}.ln1.bias"), filled(vec![d], 0.0));
            for w in ["wq", "wk", "wv", "wo"] {
                params.push(format!("{p}.attn.{w}"), uniform_tensor(&mut rng, vec![d, d], fan_in(d)));
            }
            params.push(format!("{p}.ln2.gain"), filled(vec![d], 1.0));
            params.push(format!("{p}.ln2.bias"), filled(vec![d], 0.0));
            params.push(format!("{p}.mlp.w1"), uniform_tensor(&mut rng, vec![d, hidden], fan_in(d)));
            params.push(format!("{p}.mlp.b1"), filled(vec![hidden], 0.0));
            params.push(format!("{p}.mlp.w2"), uniform_tensor(&mut rng, vec![hidden, d], fan_in(hidden)));
            params.push(format!("{p}.mlp.b2"), filled(vec![d], 0.0));
        }
        params.push("ln_f.gain", filled(vec![d], 1.0));
        params.push("ln_f.bias", filled(vec![d], 0.0));
        params.push("head.w", uniform_tensor(&mut rng, vec![d, v], fan_in(d)));
        params.push("head.b", filled(vec![v], 0.0));
        Ok(Self { config, params })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    /// Records the parameters as differentiable leaves on `tape`.
    pub fn bind<'t>(&self, tape: &'t Tape) -> BoundModel<'t> {
        BoundModel {
            config: self.config.clone(),
            vars: self.params.bind(tape),
        }
    }

    /// Records the parameters as constants on `tape`.
    pub fn bind_frozen<'t>(&self, tape: &'t Tape) -> BoundModel<'t> {
        BoundModel {
            config: self.config.clone(),
            vars: self.params.bind_frozen(tape),
        }
    }

    /// Logits for every position, without gradient tracking.
    pub fn forward_logits(&self, tokens: &[TokenId]) -> Result<Tensor> {
        let tape = Tape::new();
        Ok(self.bind_frozen(&tape).forward_logits(tokens)?.value())
    }

    /// Answer log-probability, without gradient tracking.
    pub fn answer_logprob(&self, sample: &Sample) -> Result<LogProbSummary> {
        let tape = Tape::new();
        Ok(self.bind_frozen(&tape).answer_logprob(sample)?.summary())
    }

    /// Copies gradients left on `bound` by a backward pass into the
    /// parameters' gradient buffers.
    pub fn accumulate_grads(&mut self, bound: &BoundModel<'_>) {
        self.params.accumulate_grads(&bound.vars);
    }

    pub fn zero_grad(&mut self) {
        self.params.zero_grad();
    }
}

/// A model's parameters recorded on a tape.
#[derive(Debug, Clone)]
pub struct BoundModel<'t> {
    config: ModelConfig,
    vars: Vec<Var<'t>>,
}

impl<'t> BoundModel<'t> {
    /// Wraps vars that follow the parameter layout of a [`LanguageModel`]
    /// built from `config`.
    pub fn from_vars(config: ModelConfig, vars: Vec<Var<'t>>) -> Result<Self> {
        config.validate()?;
        let expected = 2 + PARAMS_PER_LAYER * config.n_layers + 4;
        if vars.len() != expected {
            return Err(Error::ModelConfig(format!(
                "expected {expected} parameter vars, got {}",
                vars.len()
            )));
        }
        Ok(Self { config, vars })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn vars(&self) -> &[Var<'t>] {
        &self.vars
    }

    fn layer(&self, l: usize, offset: usize) -> Var<'t> {
        self.vars[2 + l * PARAMS_PER_LAYER + offset]
    }

    fn tail(&self, offset: usize) -> Var<'t> {
        self.vars[2 + self.config.n_layers * PARAMS_PER_LAYER + offset]
    }

    /// Next-token logits of shape `[tokens.len(), vocab_size]`. Row `t`
    /// depends only on `tokens[..=t]`.
    pub fn forward_logits(&self, tokens: &[TokenId]) -> Result<Var<'t>> {
        let cfg = &self.config;
        let len = tokens.len();
        if len == 0 {
            return Err(Error::InvalidValue("cannot run the model on zero tokens".into()));
        }
        if len > cfg.context_len {
            return Err(Error::ContextOverflow {
                len,
                context_len: cfg.context_len,
            });
        }
        let index: Vec<usize> = tokens.iter().map(|&t| t as usize).collect();
        if let Some(bad) = index.iter().find(|&&t| t >= cfg.vocab_size) {
            return Err(Error::InvalidValue(format!(
                "token {bad} outside vocabulary of {}",
                cfg.vocab_size
            )));
        }

        let mut x = self.vars[0]
            .index_rows(&index)?
            .add(self.vars[1].slice_rows(0, len)?)?;
        let dh = cfg.head_dim();
        let scale = 1.0 / (dh as f64).sqrt();
        for l in 0..cfg.n_layers {
            let h = x.layer_norm(self.layer(l, 0), self.layer(l, 1), LN_EPS)?;
            let q = h.matmul(self.layer(l, 2))?;
            let k = h.matmul(self.layer(l, 3))?;
            let v = h.matmul(self.layer(l, 4))?;
            let mut heads = Vec::with_capacity(cfg.n_heads);
            for head in 0..cfg.n_heads {
                let qh = q.slice_cols(head * dh, dh)?;
                let kh = k.slice_cols(head * dh, dh)?;
                let vh = v.slice_cols(head * dh, dh)?;
                let attn = qh.matmul(kh.transpose()?)?.scale(scale).causal_softmax()?;
                heads.push(attn.matmul(vh)?);
            }
            let attn_out = x.tape().concat_cols(&heads)?.matmul(self.layer(l, 5))?;
            x = x.add(attn_out)?;

            let h = x.layer_norm(self.layer(l, 6), self.layer(l, 7), LN_EPS)?;
            let mlp = h
                .matmul(self.layer(l, 8))?
                .add_bias(self.layer(l, 9))?
                .gelu()
                .matmul(self.layer(l, 10))?
                .add_bias(self.layer(l, 11))?;
            x = x.add(mlp)?;
        }
        x.layer_norm(self.tail(0), self.tail(1), LN_EPS)?
            .matmul(self.tail(2))?
            .add_bias(self.tail(3))
    }

    /// Sum over answer positions of the log-probability of the true next
    /// token. Prompt positions are not scored.
    pub fn answer_logprob(&self, sample: &Sample) -> Result<LogProbVar<'t>> {
        let total = sample.total_len();
        if total > self.config.context_len {
            return Err(Error::ContextOverflow {
                len: total,
                context_len: self.config.context_len,
            });
        }
        let tokens = sample.tokens();
        let logits = self.forward_logits(&tokens[..total - 1])?;
        let first = sample.prompt_tokens().len() - 1;
        let targets: Vec<usize> = sample.answer_tokens().iter().map(|&t| t as usize).collect();
        let sum = logits
            .slice_rows(first, sample.answer_len())?
            .log_softmax()?
            .gather(&targets)?
            .sum();
        Ok(LogProbVar {
            sum,
            answer_len: sample.answer_len(),
        })
    }
}
