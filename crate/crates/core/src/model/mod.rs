//! The hybrid stack: byte embedding, interleaved recurrence and sparse
//! attention blocks on a pre-norm residual stream, and a vocabulary head.
//! There is no positional encoding anywhere; order enters only through the
//! recurrence and the causal attention rule.

mod checkpoint;
mod config;
mod layout;
mod loss;

pub use checkpoint::{load_checkpoint, save_checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use config::{ModelConfig, BOS, BYTE_VOCAB, CONFIG_KEYS, EOS};
pub use layout::{build_layout, expansion_positions, LayerKind, LayerLayout};
pub use loss::{cross_entropy, weighted_ce, weighted_ce_with, TokenWeighting, UniformWeights};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::kv_cache::KvCache;
use crate::rwkv7::{Rwkv7Inputs, Rwkv7State};
use crate::scalar::Scalar;
use crate::sparse_attn::{self, AttnConfig};
use crate::tensor::{dot, Matrix, Vector};

const NORM_EPS: f64 = 1e-6;

/// Delta-rule block: six input projections feeding the recurrence and one
/// output projection back onto the residual stream.
#[derive(Debug, Clone, PartialEq)]
pub struct RecurrenceBlock<T> {
    pub w_decay: Matrix<T>,
    pub w_lr: Matrix<T>,
    pub w_removal: Matrix<T>,
    pub w_replace: Matrix<T>,
    pub w_value: Matrix<T>,
    pub w_receptance: Matrix<T>,
    pub w_out: Matrix<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttentionBlock<T> {
    pub w_q: Matrix<T>,
    pub w_k: Matrix<T>,
    pub w_v: Matrix<T>,
    pub w_out: Matrix<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Block<T> {
    Recurrence(RecurrenceBlock<T>),
    SparseAttention(AttentionBlock<T>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layer<T> {
    pub block: Block<T>,
    /// Inserted by block expansion; the only trainable layers in the
    /// alignment stage.
    pub expanded: bool,
}

impl<T> Layer<T> {
    pub fn kind(&self) -> LayerKind {
        match self.block {
            Block::Recurrence(_) => LayerKind::Recurrence,
            Block::SparseAttention(_) => LayerKind::SparseAttention,
        }
    }
}

/// Carried state of one layer.
#[derive(Debug, Clone, PartialEq)]
pub enum LayerState<T> {
    Recurrence(Rwkv7State<T>),
    Attention(KvCache<T>),
}

/// Decode state for the whole stack.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelState<T> {
    pub layers: Vec<LayerState<T>>,
    /// Tokens consumed so far.
    pub position: usize,
}

impl<T: Scalar> ModelState<T> {
    /// Largest number of entries held by any single attention cache.
    pub fn cache_entries(&self) -> usize {
        self.caches().map(KvCache::len).max().unwrap_or(0)
    }

    pub fn caches(&self) -> impl Iterator<Item = &KvCache<T>> {
        self.layers.iter().filter_map(|l| match l {
            LayerState::Attention(c) => Some(c),
            LayerState::Recurrence(_) => None,
        })
    }

    pub fn has_attention_state(&self) -> bool {
        self.caches().next().is_some()
    }

    pub fn has_recurrence_state(&self) -> bool {
        self.layers.iter().any(|l| matches!(l, LayerState::Recurrence(_)))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Whole sequence in one pass.
    Prefill,
    /// One token at a time against carried state.
    Decode,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model<T> {
    config: ModelConfig,
    embedding: Matrix<T>,
    layers: Vec<Layer<T>>,
    head: Matrix<T>,
}

fn uniform<T: Scalar>(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Matrix<T> {
    let bound = 1.0 / (cols as f64).sqrt();
    Matrix::from_fn(rows, cols, |_, _| T::lit(rng.gen_range(-bound..bound)))
}

fn recurrence_block<T: Scalar>(rng: &mut ChaCha8Rng, cfg: &ModelConfig) -> RecurrenceBlock<T> {
    let (d, dk, dv) = (cfg.d_model, cfg.d_k, cfg.d_v);
    RecurrenceBlock {
        w_decay: uniform(rng, dk, d),
        w_lr: uniform(rng, dk, d),
        w_removal: uniform(rng, dk, d),
        w_replace: uniform(rng, dk, d),
        w_value: uniform(rng, dv, d),
        w_receptance: uniform(rng, dk, d),
        w_out: uniform(rng, d, dv),
    }
}

fn attention_block<T: Scalar>(rng: &mut ChaCha8Rng, cfg: &ModelConfig) -> AttentionBlock<T> {
    let (d, dk, dv) = (cfg.d_model, cfg.d_k, cfg.d_v);
    AttentionBlock {
        w_q: uniform(rng, dk, d),
        w_k: uniform(rng, dk, d),
        w_v: uniform(rng, dv, d),
        w_out: uniform(rng, d, dv),
    }
}

/// RMS normalization without a learned gain.
fn rms_norm<T: Scalar>(x: &[T], out: &mut [T]) {
    let ms = dot(x, x) / T::lit(x.len() as f64);
    let inv = T::one() / (ms + T::lit(NORM_EPS)).sqrt();
    for (o, &v) in out.iter_mut().zip(x) {
        *o = v * inv;
    }
}

fn rms_norm_rows<T: Scalar>(x: &Matrix<T>) -> Matrix<T> {
    let mut out = Matrix::zeros(x.rows(), x.cols());
    for r in 0..x.rows() {
        rms_norm(x.row(r), out.row_mut(r));
    }
    out
}

fn add_in_place<T: Scalar>(x: &mut [T], delta: &[T]) {
    for (a, &b) in x.iter_mut().zip(delta) {
        *a += b;
    }
}

impl<T: Scalar> RecurrenceBlock<T> {
    fn gates(&self, h: &[T]) -> Result<Rwkv7Inputs<T>> {
        Rwkv7Inputs::from_preactivations(
            &self.w_decay.matvec(h)?,
            &self.w_lr.matvec(h)?,
            &self.w_removal.matvec(h)?,
            &self.w_replace.matvec(h)?,
            &self.w_value.matvec(h)?,
            &self.w_receptance.matvec(h)?,
        )
    }

    fn step(&self, h: &[T], state: &mut Rwkv7State<T>) -> Result<Vector<T>> {
        let inputs = self.gates(h)?;
        state.step(&inputs)?;
        let y = state.readout(&inputs.r)?;
        self.w_out.matvec(&y)
    }

    fn params(&self) -> [(&'static str, &Matrix<T>); 7] {
        [
            ("w_decay", &self.w_decay),
            ("w_lr", &self.w_lr),
            ("w_removal", &self.w_removal),
            ("w_replace", &self.w_replace),
            ("w_value", &self.w_value),
            ("w_receptance", &self.w_receptance),
            ("w_out", &self.w_out),
        ]
    }

    fn params_mut(&mut self) -> [(&'static str, &mut Matrix<T>); 7] {
        [
            ("w_decay", &mut self.w_decay),
            ("w_lr", &mut self.w_lr),
            ("w_removal", &mut self.w_removal),
            ("w_replace", &mut self.w_replace),
            ("w_value", &mut self.w_value),
            ("w_receptance", &mut self.w_receptance),
            ("w_out", &mut self.w_out),
        ]
    }
}

impl<T: Scalar> AttentionBlock<T> {
    fn prefill(&self, h: &Matrix<T>, cfg: &AttnConfig) -> Result<(Matrix<T>, KvCache<T>)> {
        let q = h.matmul_transposed(&self.w_q)?;
        let k = h.matmul_transposed(&self.w_k)?;
        let v = h.matmul_transposed(&self.w_v)?;
        let y = sparse_attn::prefill(&q, &k, &v, cfg)?;
        let cache = KvCache::from_sequence(&q, &k, &v, cfg.cache_budget, cfg.obs_window)?;
        Ok((y.matmul_transposed(&self.w_out)?, cache))
    }

    fn step(&self, h: &[T], cache: &mut KvCache<T>, cfg: &AttnConfig) -> Result<Vector<T>> {
        let q = self.w_q.matvec(h)?;
        cache.append(&q, &self.w_k.matvec(h)?, &self.w_v.matvec(h)?)?;
        let y = sparse_attn::decode_step(&q, cache, cfg)?;
        self.w_out.matvec(&y)
    }

    fn params(&self) -> [(&'static str, &Matrix<T>); 4] {
        [
            ("w_q", &self.w_q),
            ("w_k", &self.w_k),
            ("w_v", &self.w_v),
            ("w_out", &self.w_out),
        ]
    }

    fn params_mut(&mut self) -> [(&'static str, &mut Matrix<T>); 4] {
        [
            ("w_q", &mut self.w_q),
            ("w_k", &mut self.w_k),
            ("w_v", &mut self.w_v),
            ("w_out", &mut self.w_out),
        ]
    }
}

impl<T: Scalar> Block<T> {
    fn prefix(&self) -> &'static str {
        match self {
            Block::Recurrence(_) => "rwkv",
            Block::SparseAttention(_) => "attn",
        }
    }
}

impl<T: Scalar> Model<T> {
    /// Randomly initialized model whose layout follows `config.attn_ratio`.
    pub fn new(config: ModelConfig) -> Result<Self> {
        let layout = build_layout(config.n_layers, config.attn_ratio)?;
        Self::with_layout(config, &layout)
    }

    /// Randomly initialized model with an explicit layout; `config.n_layers`
    /// is taken from the layout.
    pub fn with_layout(mut config: ModelConfig, layout: &LayerLayout) -> Result<Self> {
        config.n_layers = layout.len();
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let embedding = uniform(&mut rng, config.vocab_size, config.d_model);
        let layers = layout
            .kinds
            .iter()
            .map(|kind| Layer {
                block: match kind {
                    LayerKind::Recurrence => Block::Recurrence(recurrence_block(&mut rng, &config)),
                    LayerKind::SparseAttention => Block::SparseAttention(attention_block(&mut rng, &config)),
                },
                expanded: false,
            })
            .collect();
        let head = uniform(&mut rng, config.vocab_size, config.d_model);
        Ok(Model {
            config,
            embedding,
            layers,
            head,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn layers(&self) -> &[Layer<T>] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer<T>] {
        &mut self.layers
    }

    pub fn layout(&self) -> LayerLayout {
        LayerLayout {
            kinds: self.layers.iter().map(Layer::kind).collect(),
        }
    }

    pub fn head_mut(&mut self) -> &mut Matrix<T> {
        &mut self.head
    }

    pub fn fresh_state(&self) -> Result<ModelState<T>> {
        let layers = self
            .layers
            .iter()
            .map(|l| match l.block {
                Block::Recurrence(_) => Ok(LayerState::Recurrence(Rwkv7State::zeros(
                    self.config.d_v,
                    self.config.d_k,
                ))),
                Block::SparseAttention(_) => KvCache::for_config(&self.config.attn).map(LayerState::Attention),
            })
            .collect::<Result<_>>()?;
        Ok(ModelState { layers, position: 0 })
    }

    fn check_tokens(&self, tokens: &[usize]) -> Result<()> {
        match tokens.iter().find(|&&t| t >= self.config.vocab_size) {
            Some(t) => Err(Error::Input(format!(
                "token {t} outside vocabulary of size {}",
                self.config.vocab_size
            ))),
            None => Ok(()),
        }
    }

    /// Runs `tokens` through the stack in the given mode, returning one row of
    /// logits per token and the resulting state.
    pub fn forward(&self, tokens: &[usize], mode: Mode) -> Result<(Matrix<T>, ModelState<T>)> {
        match mode {
            Mode::Prefill => self.prefill(tokens),
            Mode::Decode => {
                self.check_tokens(tokens)?;
                let mut state = self.fresh_state()?;
                let mut logits = Matrix::empty(self.config.vocab_size);
                for &t in tokens {
                    logits.push_row(&self.decode(t, &mut state)?)?;
                }
                Ok((logits, state))
            }
        }
    }

    /// Processes a whole prompt from a fresh state.
    pub fn prefill(&self, tokens: &[usize]) -> Result<(Matrix<T>, ModelState<T>)> {
        self.check_tokens(tokens)?;
        let mut state = self.fresh_state()?;
        if tokens.is_empty() {
            return Ok((Matrix::empty(self.config.vocab_size), state));
        }
        let mut x = self.embedding.gather_rows(tokens);
        for (layer, layer_state) in self.layers.iter().zip(state.layers.iter_mut()) {
            let h = rms_norm_rows(&x);
            let delta = match (&layer.block, layer_state) {
                (Block::Recurrence(b), LayerState::Recurrence(s)) => {
                    let mut out = Matrix::zeros(h.rows(), self.config.d_model);
                    for t in 0..h.rows() {
                        out.row_mut(t).copy_from_slice(&b.step(h.row(t), s)?);
                    }
                    out
                }
                (Block::SparseAttention(b), LayerState::Attention(c)) => {
                    let (out, cache) = b.prefill(&h, &self.config.attn)?;
                    *c = cache;
                    out
                }
                _ => unreachable!("state built from the same layer list"),
            };
            add_in_place(x.data_mut(), delta.data());
        }
        state.position = tokens.len();
        Ok((rms_norm_rows(&x).matmul_transposed(&self.head)?, state))
    }

    /// Consumes one token against carried state and returns its logits.
    pub fn decode(&self, token: usize, state: &mut ModelState<T>) -> Result<Vector<T>> {
        self.check_tokens(&[token])?;
        if state.layers.len() != self.layers.len() {
            return Err(Error::Input("state does not belong to this model".into()));
        }
        let mut x = self.embedding.row(token).to_vec();
        let mut h = vec![T::zero(); x.len()];
        for (layer, layer_state) in self.layers.iter().zip(state.layers.iter_mut()) {
            rms_norm(&x, &mut h);
            let delta = match (&layer.block, layer_state) {
                (Block::Recurrence(b), LayerState::Recurrence(s)) => b.step(&h, s)?,
                (Block::SparseAttention(b), LayerState::Attention(c)) => b.step(&h, c, &self.config.attn)?,
                _ => return Err(Error::Input("state does not belong to this model".into())),
            };
            add_in_place(&mut x, &delta);
        }
        rms_norm(&x, &mut h);
        state.position += 1;
        self.head.matvec(&h)
    }

    /// Inserts a new sparse attention layer before each listed base index
    /// (`0..=n_layers`, ascending; repeats insert several). New layers get a
    /// zero output projection, so the expanded model computes exactly what
    /// the base model did until those projections are trained.
    pub fn expand_blocks(&self, positions: &[usize]) -> Result<Self> {
        let n = self.layers.len();
        if let Some(&bad) = positions.iter().find(|&&p| p > n) {
            return Err(Error::IndexOutOfRange { index: bad, max: n });
        }
        let mut sorted = positions.to_vec();
        sorted.sort_unstable();

        let mut layers = Vec::with_capacity(n + sorted.len());
        let mut next = sorted.iter().peekable();
        let mut inserted = 0u64;
        for i in 0..=n {
            while next.next_if(|&&p| p == i).is_some() {
                let mut rng = ChaCha8Rng::seed_from_u64(expansion_seed(self.config.seed, i, inserted));
                let mut block = attention_block::<T>(&mut rng, &self.config);
                block.w_out = Matrix::zeros(self.config.d_model, self.config.d_v);
                layers.push(Layer {
                    block: Block::SparseAttention(block),
                    expanded: true,
                });
                inserted += 1;
            }
            if i < n {
                layers.push(self.layers[i].clone());
            }
        }
        let mut config = self.config.clone();
        config.n_layers = layers.len();
        Ok(Model {
            config,
            embedding: self.embedding.clone(),
            layers,
            head: self.head.clone(),
        })
    }

    /// Every parameter with its canonical name, in checkpoint order.
    pub fn parameters(&self) -> Vec<(String, &Matrix<T>)> {
        let mut out = vec![("embedding".to_string(), &self.embedding)];
        for (i, layer) in self.layers.iter().enumerate() {
            let prefix = layer.block.prefix();
            let named: Vec<(&str, &Matrix<T>)> = match &layer.block {
                Block::Recurrence(b) => b.params().to_vec(),
                Block::SparseAttention(b) => b.params().to_vec(),
            };
            out.extend(named.into_iter().map(|(n, m)| (format!("layers.{i}.{prefix}.{n}"), m)));
        }
        out.push(("head".to_string(), &self.head));
        out
    }

    pub fn parameters_mut(&mut self) -> Vec<(String, &mut Matrix<T>)> {
        let mut out = vec![("embedding".to_string(), &mut self.embedding)];
        for (i, layer) in self.layers.iter_mut().enumerate() {
            let prefix = layer.block.prefix();
            let named: Vec<(&str, &mut Matrix<T>)> = match &mut layer.block {
                Block::Recurrence(b) => b.params_mut().into_iter().collect(),
                Block::SparseAttention(b) => b.params_mut().into_iter().collect(),
            };
            out.extend(named.into_iter().map(|(n, m)| (format!("layers.{i}.{prefix}.{n}"), m)));
        }
        out.push(("head".to_string(), &mut self.head));
        out
    }

    pub fn parameter(&self, name: &str) -> Option<&Matrix<T>> {
        self.parameters().into_iter().find(|(n, _)| n == name).map(|(_, m)| m)
    }

    /// Parameter names paired with whether they train in the alignment stage
    /// (only blocks added by expansion do; everything else is frozen).
    pub fn freeze_mask(&self) -> Vec<(String, bool)> {
        let mut mask = vec![("embedding".to_string(), false)];
        for (i, layer) in self.layers.iter().enumerate() {
            let prefix = layer.block.prefix();
            let names: Vec<&str> = match &layer.block {
                Block::Recurrence(b) => b.params().iter().map(|(n, _)| *n).collect(),
                Block::SparseAttention(b) => b.params().iter().map(|(n, _)| *n).collect(),
            };
            mask.extend(
                names
                    .into_iter()
                    .map(|n| (format!("layers.{i}.{prefix}.{n}"), layer.expanded)),
            );
        }
        mask.push(("head".to_string(), false));
        mask
    }

    pub fn parameter_count(&self) -> usize {
        self.parameters().iter().map(|(_, m)| m.data().len()).sum()
    }

    /// Zero-weight skeleton for a given layout, to be filled by a loader.
    pub(crate) fn zeroed(config: ModelConfig, layout: &LayerLayout, expanded: &[usize]) -> Result<Self> {
        let mut model = Self::with_layout(config, layout)?;
        for (_, m) in model.parameters_mut() {
            m.data_mut().iter_mut().for_each(|v| *v = T::zero());
        }
        for &i in expanded {
            model
                .layers
                .get_mut(i)
                .ok_or(Error::IndexOutOfRange {
                    index: i,
                    max: layout.len(),
                })?
                .expanded = true;
        }
        Ok(model)
    }
}

fn expansion_seed(seed: u64, position: usize, ordinal: u64) -> u64 {
    seed ^ 0x9E37_79B9_7F4A_7C15u64.wrapping_mul(position as u64 + 1) ^ ordinal.rotate_left(32)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_config(seed: u64, ratio: f64) -> ModelConfig {
        ModelConfig {
            n_layers: 4,
            d_model: 16,
            d_k: 8,
            d_v: 8,
            vocab_size: 32,
            attn_ratio: ratio,
            attn: AttnConfig {
                chunk_size: 4,
                top_k: 1,
                d_k: 8,
                d_v: 8,
                cache_budget: None,
                obs_window: 4,
            },
            seed,
        }
    }

    #[test]
    fn zero_head_gives_zero_logits() {
        let mut m = Model::<f64>::new(small_config(1, 0.5)).unwrap();
        *m.head_mut() = Matrix::zeros(32, 16);
        let (logits, _) = m.prefill(&[1, 5, 9, 31]).unwrap();
        assert!(logits.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn token_order_matters() {
        let m = Model::<f64>::new(small_config(2, 0.5)).unwrap();
        let (a, _) = m.prefill(&[3, 7, 11]).unwrap();
        let (b, _) = m.prefill(&[11, 7, 3]).unwrap();
        assert!(a.row(2) != b.row(2));
    }

    #[test]
    fn out_of_vocab_is_rejected() {
        let m = Model::<f64>::new(small_config(3, 0.5)).unwrap();
        assert!(matches!(m.prefill(&[1, 32]), Err(Error::Input(_))));
        let mut s = m.fresh_state().unwrap();
        assert!(m.decode(99, &mut s).is_err());
    }

    #[test]
    fn decode_matches_prefill() {
        let m = Model::<f64>::new(small_config(4, 0.5)).unwrap();
        let tokens: Vec<usize> = (0..23).map(|i| (i * 7 + 3) % 32).collect();
        let (p, _) = m.forward(&tokens, Mode::Prefill).unwrap();
        let (d, state) = m.forward(&tokens, Mode::Decode).unwrap();
        assert!(p.max_abs_diff(&d) < 1e-10);
        assert_eq!(state.position, 23);
    }

    #[test]
    fn layout_endpoints_carry_matching_state() {
        let m = Model::<f64>::new(small_config(5, 0.0)).unwrap();
        let s = m.fresh_state().unwrap();
        assert!(!s.has_attention_state() && s.has_recurrence_state());
        let m = Model::<f64>::new(small_config(5, 1.0)).unwrap();
        let s = m.fresh_state().unwrap();
        assert!(s.has_attention_state() && !s.has_recurrence_state());
    }

    #[test]
    fn expansion_inserts_zero_output_blocks() {
        let base = Model::<f64>::new(small_config(6, 0.0)).unwrap();
        let ex = base.expand_blocks(&[2, 4]).unwrap();
        assert_eq!(ex.layout().to_string(), "RRARRA");
        assert_eq!(ex.config().n_layers, 6);
        assert!(ex
            .parameter("layers.2.attn.w_out")
            .unwrap()
            .data()
            .iter()
            .all(|&v| v == 0.0));
        assert!(ex
            .parameter("layers.2.attn.w_q")
            .unwrap()
            .data()
            .iter()
            .any(|&v| v != 0.0));
        let trainable: Vec<String> = ex
            .freeze_mask()
            .into_iter()
            .filter(|(_, t)| *t)
            .map(|(n, _)| n)
            .collect();
        assert_eq!(trainable.len(), 8);
        assert!(trainable
            .iter()
            .all(|n| n.starts_with("layers.2.") || n.starts_with("layers.5.")));

        assert_eq!(base.expand_blocks(&[]).unwrap(), base);
        assert!(matches!(
            base.expand_blocks(&[5]),
            Err(Error::IndexOutOfRange { index: 5, max: 4 })
        ));
    }
}
