//! Stacked models: an encoder classifier, a decoder-only language model and
//! a small encoder-decoder, plus loss, optimizer, checkpoints and training.

mod checkpoint;
mod config;
mod optim;
mod train;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CHECKPOINT_META};
pub use config::{Mechanism, Mode, ModelConfig};
pub use optim::{OptimConfig, OptimizerState};
pub use train::{evaluate, EvalReport, StepMetrics, TrainConfig, Trainer};

use crate::attention::AttnMask;
use crate::error::{LunaError, Result};
use crate::layers::{
    self, embed, pool, EmbeddingParams, EncoderMemory, FixedProjLayerParams, LunaDecoderLayerParams,
    LunaLayerParams, TransformerLayerParams,
};
use crate::numerics::{Dropout, Graph, ParamId, ParamStore, RngState, Scalar, Tensor, Var};
use crate::tasks::{Example, Label, CLS, PAD, SEP};

#[derive(Debug, Clone, PartialEq, Eq)]
enum EncoderLayer {
    Luna(LunaLayerParams),
    Full(TransformerLayerParams),
    FixedProj(FixedProjLayerParams),
}

#[derive(Debug, Clone, PartialEq, Eq)]
enum DecoderLayer {
    Luna(LunaDecoderLayerParams),
    Full(TransformerLayerParams),
}

/// Output of the encoder stack on one graph.
#[derive(Debug, Clone)]
pub struct Encoded {
    pub h: Var,
    /// Final packed state; `None` for non-Luna encoders.
    pub p_final: Option<Var>,
    /// `P` fed into each layer and `P'` returned by it, in layer order.
    pub p_inputs: Vec<Var>,
    pub p_outputs: Vec<Var>,
}

/// One padded example ready for a forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct Row {
    /// Encoder tokens (classifier and seq2seq) or decoder tokens (LM).
    pub input: Vec<usize>,
    /// Context keep-mask when `input` carries padding.
    pub keep: Option<Vec<bool>>,
    /// Decoder input for seq2seq.
    pub decoder_input: Vec<usize>,
    /// Per-position targets (one entry for classifiers).
    pub targets: Vec<Option<usize>>,
}

#[derive(Debug, Clone)]
pub struct Model<T: Scalar> {
    config: ModelConfig,
    store: ParamStore<T>,
    embed: EmbeddingParams,
    encoder: Vec<EncoderLayer>,
    decoder: Vec<DecoderLayer>,
    head_w: ParamId,
    head_b: ParamId,
}

impl<T: Scalar> Model<T> {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let c = &config;
        let rng = RngState::new(c.seed);
        let mut store = ParamStore::new();
        let luna = c.mechanism == crate::model::Mechanism::Luna;
        let p_init = (luna && c.mode != Mode::DecoderLm).then_some(c.l);
        let embed = EmbeddingParams::init(&mut store, &rng, "embed", c.vocab, c.n_max, c.d, p_init)?;

        let mut encoder = Vec::new();
        if c.mode != Mode::DecoderLm {
            for i in 0..c.layers {
                let prefix = format!("encoder.{i}");
                encoder.push(match c.mechanism {
                    Mechanism::Luna => EncoderLayer::Luna(LunaLayerParams::init(
                        &mut store, &rng, &prefix, c.d, c.d_hidden, c.heads, c.tying,
                    )?),
                    Mechanism::Full => EncoderLayer::Full(TransformerLayerParams::init(
                        &mut store, &rng, &prefix, c.d, c.d_hidden, c.heads, c.tying, false,
                    )?),
                    Mechanism::FixedProj => EncoderLayer::FixedProj(FixedProjLayerParams::init(
                        &mut store, &rng, &prefix, c.d, c.d_hidden, c.heads, c.l, c.n_max, c.tying,
                    )?),
                });
            }
        }
        let mut decoder = Vec::new();
        if c.mode != Mode::EncoderClassifier {
            let cross = c.mode == Mode::Seq2seq;
            for i in 0..c.layers {
                let prefix = format!("decoder.{i}");
                decoder.push(match c.mechanism {
                    Mechanism::Luna => DecoderLayer::Luna(LunaDecoderLayerParams::init(
                        &mut store, &rng, &prefix, c.d, c.d_hidden, c.heads, c.l, c.tying, cross,
                    )?),
                    _ => DecoderLayer::Full(TransformerLayerParams::init(
                        &mut store, &rng, &prefix, c.d, c.d_hidden, c.heads, c.tying, cross,
                    )?),
                });
            }
        }
        let out = match c.mode {
            Mode::EncoderClassifier => c.classes,
            _ => c.vocab,
        };
        let head_w = store.add("head.w", rng.xavier_uniform("head.w", &[c.d, out]))?;
        let head_b = store.add("head.b", Tensor::zeros(&[out]))?;
        Ok(Model {
            config,
            store,
            embed,
            encoder,
            decoder,
            head_w,
            head_b,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn store(&self) -> &ParamStore<T> {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.store
    }

    /// Total trainable scalars; tied projections count once.
    pub fn param_count(&self) -> usize {
        self.store.census()
    }

    pub fn head(&self) -> (ParamId, ParamId) {
        (self.head_w, self.head_b)
    }

    fn head_graph(&self, g: &mut Graph<'_, T>, h: Var) -> Result<Var> {
        let w = g.param(self.head_w);
        let b = g.param(self.head_b);
        let y = g.matmul(h, w)?;
        g.add_row(y, b)
    }

    fn require(&self, mode: Mode) -> Result<()> {
        if self.config.mode != mode {
            return Err(LunaError::Config(format!(
                "operation needs a {mode:?} model, this one is {:?}",
                self.config.mode
            )));
        }
        Ok(())
    }

    /// Runs the encoder stack, threading `P` from each layer into the next.
    pub fn encode_graph(
        &self,
        g: &mut Graph<'_, T>,
        tokens: &[usize],
        mask: Option<&AttnMask>,
        dropout: Option<&Dropout<'_>>,
    ) -> Result<Encoded> {
        if self.encoder.is_empty() {
            return Err(LunaError::Config("decoder-only models have no encoder".into()));
        }
        let mut x = embed(g, tokens, &self.embed)?;
        if let Some(d) = dropout {
            x = d.apply(g, x, d.residual, "embed")?;
        }
        let mut p = self.embed.p_init.map(|id| g.param(id));
        let mut p_inputs = Vec::new();
        let mut p_outputs = Vec::new();
        for (i, layer) in self.encoder.iter().enumerate() {
            let ld = dropout.map(|d| d.child(&format!("enc{i}")));
            match layer {
                EncoderLayer::Luna(params) => {
                    let p_in = p.expect("luna encoder always carries P");
                    let (x2, p2) = layers::luna_encoder_layer_with(g, x, p_in, params, mask, ld.as_ref())?;
                    p_inputs.push(p_in);
                    p_outputs.push(p2);
                    x = x2;
                    p = Some(p2);
                }
                EncoderLayer::Full(params) => {
                    x = layers::transformer_layer(g, x, params, mask, false, None, ld.as_ref())?;
                }
                EncoderLayer::FixedProj(params) => {
                    x = layers::fixed_proj_layer(g, x, params, mask, ld.as_ref())?;
                }
            }
        }
        for pair in p_inputs.windows(2).zip(&p_outputs) {
            debug_assert_eq!(pair.0[1], *pair.1);
        }
        Ok(Encoded {
            h: x,
            p_final: p,
            p_inputs,
            p_outputs,
        })
    }

    /// Classifier logits (`1 x classes`) for raw task tokens; `[CLS]` is
    /// prepended in cls pooling mode. `keep` masks padded positions of `tokens`.
    pub fn classify_graph(
        &self,
        g: &mut Graph<'_, T>,
        tokens: &[usize],
        keep: Option<&[bool]>,
        dropout: Option<&Dropout<'_>>,
    ) -> Result<Var> {
        self.require(Mode::EncoderClassifier)?;
        let cls = self.config.uses_cls();
        let mut seq = Vec::with_capacity(tokens.len() + 1);
        if cls {
            seq.push(CLS);
        }
        seq.extend_from_slice(tokens);
        let mask = match keep {
            Some(k) => {
                if k.len() != tokens.len() {
                    return Err(LunaError::dim("classify mask", &[tokens.len()], &[k.len()]));
                }
                let mut full = Vec::with_capacity(seq.len());
                if cls {
                    full.push(true);
                }
                full.extend_from_slice(k);
                Some(AttnMask::new(full)?)
            }
            None => None,
        };
        let enc = self.encode_graph(g, &seq, mask.as_ref(), dropout)?;
        let pooled = pool(g, enc.h, enc.p_final, self.config.pooling)?;
        self.head_graph(g, pooled)
    }

    /// Next-token logits (`n x V`) of the decoder-only stack.
    pub fn lm_graph(&self, g: &mut Graph<'_, T>, tokens: &[usize], dropout: Option<&Dropout<'_>>) -> Result<Var> {
        self.require(Mode::DecoderLm)?;
        let mut x = embed(g, tokens, &self.embed)?;
        if let Some(d) = dropout {
            x = d.apply(g, x, d.residual, "embed")?;
        }
        for (i, layer) in self.decoder.iter().enumerate() {
            let ld = dropout.map(|d| d.child(&format!("dec{i}")));
            x = match layer {
                DecoderLayer::Luna(params) => {
                    let p = g.param(params.p.expect("decoder-only layers own P"));
                    layers::luna_decoder_layer_with(g, x, p, None, params, self.config.pack_omega, ld.as_ref())?.0
                }
                DecoderLayer::Full(params) => layers::transformer_layer(g, x, params, None, true, None, ld.as_ref())?,
            };
        }
        self.head_graph(g, x)
    }

    /// Decoder logits (`n x V`) for `target_in` conditioned on `source`.
    pub fn seq2seq_graph(
        &self,
        g: &mut Graph<'_, T>,
        source: &[usize],
        source_keep: Option<&[bool]>,
        target_in: &[usize],
        dropout: Option<&Dropout<'_>>,
    ) -> Result<Var> {
        self.require(Mode::Seq2seq)?;
        let mask = source_keep.map(|k| AttnMask::new(k.to_vec())).transpose()?;
        let enc_drop = dropout.map(|d| d.child("encoder"));
        let enc = self.encode_graph(g, source, mask.as_ref(), enc_drop.as_ref())?;
        let mem = EncoderMemory {
            states: enc.h,
            mask: mask.as_ref(),
        };
        let mut y = embed(g, target_in, &self.embed)?;
        if let Some(d) = dropout {
            y = d.apply(g, y, d.residual, "decoder_embed")?;
        }
        let mut p = enc.p_final;
        for (i, layer) in self.decoder.iter().enumerate() {
            let ld = dropout.map(|d| d.child(&format!("dec{i}")));
            y = match layer {
                DecoderLayer::Luna(params) => {
                    let p_in = p.expect("luna encoder always carries P");
                    let (y2, p2) = layers::luna_decoder_layer_with(
                        g,
                        y,
                        p_in,
                        Some(mem),
                        params,
                        self.config.pack_omega,
                        ld.as_ref(),
                    )?;
                    p = Some(p2);
                    y2
                }
                DecoderLayer::Full(params) => {
                    layers::transformer_layer(g, y, params, None, true, Some(mem), ld.as_ref())?
                }
            };
        }
        self.head_graph(g, y)
    }

    /// Mean cross-entropy of one assembled row.
    pub fn row_loss(&self, g: &mut Graph<'_, T>, row: &Row, dropout: Option<&Dropout<'_>>) -> Result<Var> {
        let logits = match self.config.mode {
            Mode::EncoderClassifier => self.classify_graph(g, &row.input, row.keep.as_deref(), dropout)?,
            Mode::DecoderLm => self.lm_graph(g, &row.input, dropout)?,
            Mode::Seq2seq => self.seq2seq_graph(g, &row.input, row.keep.as_deref(), &row.decoder_input, dropout)?,
        };
        g.cross_entropy(logits, &row.targets)
    }

    /// Final hidden states and packed state for `tokens` (no `[CLS]` added).
    pub fn encode(&self, tokens: &[usize]) -> Result<(Tensor<T>, Option<Tensor<T>>)> {
        let mut g = Graph::with_params(&self.store);
        let enc = self.encode_graph(&mut g, tokens, None, None)?;
        Ok((g.value(enc.h).clone(), enc.p_final.map(|p| g.value(p).clone())))
    }

    /// Class logits as a vector of length `classes`.
    pub fn classify(&self, tokens: &[usize]) -> Result<Tensor<T>> {
        let mut g = Graph::with_params(&self.store);
        let logits = self.classify_graph(&mut g, tokens, None, None)?;
        let classes = g.shape(logits)[1];
        g.value(logits).clone().reshape(&[classes])
    }

    pub fn predict_class(&self, tokens: &[usize]) -> Result<usize> {
        Ok(argmax(self.classify(tokens)?.data()))
    }

    pub fn lm_forward(&self, tokens: &[usize]) -> Result<Tensor<T>> {
        let mut g = Graph::with_params(&self.store);
        let logits = self.lm_graph(&mut g, tokens, None)?;
        Ok(g.value(logits).clone())
    }

    pub fn seq2seq_forward(&self, source: &[usize], target_in: &[usize]) -> Result<Tensor<T>> {
        let mut g = Graph::with_params(&self.store);
        let logits = self.seq2seq_graph(&mut g, source, None, target_in, None)?;
        Ok(g.value(logits).clone())
    }

    /// Appends `steps` greedily chosen tokens to `prefix`.
    pub fn greedy_continue(&self, prefix: &[usize], steps: usize) -> Result<Vec<usize>> {
        let mut seq = prefix.to_vec();
        for _ in 0..steps {
            let logits = self.lm_forward(&seq)?;
            let last = logits.rows() - 1;
            seq.push(argmax(logits.row(last)));
        }
        Ok(seq[prefix.len()..].to_vec())
    }

    /// Greedy decode of `len` tokens for `source`.
    pub fn greedy_translate(&self, source: &[usize], len: usize) -> Result<Vec<usize>> {
        let mut target_in = vec![SEP];
        let mut out = Vec::with_capacity(len);
        for _ in 0..len {
            let logits = self.seq2seq_forward(source, &target_in)?;
            let next = argmax(logits.row(logits.rows() - 1));
            out.push(next);
            target_in.push(next);
        }
        Ok(out)
    }

    /// Pads `examples` to the longest one and lays out inputs and targets for this model's mode.
    pub fn assemble(&self, examples: &[Example]) -> Result<Vec<Row>> {
        assemble(&self.config, examples)
    }
}

pub(crate) fn argmax<T: Scalar>(v: &[T]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best
}

fn pad(tokens: &[usize], len: usize) -> (Vec<usize>, Option<Vec<bool>>) {
    let mut out = tokens.to_vec();
    out.resize(len, PAD);
    let keep = (tokens.len() < len).then(|| (0..len).map(|i| i < tokens.len()).collect());
    (out, keep)
}

/// Batch layout shared by training and evaluation.
pub fn assemble(config: &ModelConfig, examples: &[Example]) -> Result<Vec<Row>> {
    let sequence = |ex: &Example| -> Result<Vec<usize>> {
        match &ex.label {
            Label::Sequence(t) => Ok(t.clone()),
            Label::Class(_) => Err(LunaError::Config(format!(
                "{:?} models need sequence targets, got a class label",
                config.mode
            ))),
        }
    };
    match config.mode {
        Mode::EncoderClassifier => {
            let len = examples.iter().map(|e| e.tokens.len()).max().unwrap_or(0);
            examples
                .iter()
                .map(|ex| {
                    let class = ex.class().ok_or_else(|| {
                        LunaError::Config("classifier models need class labels".into())
                    })?;
                    if class >= config.classes {
                        return Err(LunaError::Input(format!("label {class} >= classes {}", config.classes)));
                    }
                    let (input, keep) = pad(&ex.tokens, len);
                    Ok(Row {
                        input,
                        keep,
                        decoder_input: Vec::new(),
                        targets: vec![Some(class)],
                    })
                })
                .collect()
        }
        Mode::DecoderLm => {
            let seqs: Vec<(Vec<usize>, usize)> = examples
                .iter()
                .map(|ex| {
                    let mut seq = ex.tokens.clone();
                    seq.push(SEP);
                    seq.extend(sequence(ex)?);
                    Ok((seq, ex.tokens.len()))
                })
                .collect::<Result<_>>()?;
            let len = seqs.iter().map(|(s, _)| s.len() - 1).max().unwrap_or(0);
            Ok(seqs
                .into_iter()
                .map(|(seq, src)| {
                    let n = seq.len() - 1;
                    // position t predicts seq[t + 1]; only the copied half is scored
                    let targets = (0..len).map(|t| (t >= src && t < n).then(|| seq[t + 1])).collect();
                    Row {
                        input: pad(&seq[..n], len).0,
                        keep: None,
                        decoder_input: Vec::new(),
                        targets,
                    }
                })
                .collect())
        }
        Mode::Seq2seq => {
            let src_len = examples.iter().map(|e| e.tokens.len()).max().unwrap_or(0);
            let targets: Vec<Vec<usize>> = examples.iter().map(sequence).collect::<Result<_>>()?;
            let tgt_len = targets.iter().map(Vec::len).max().unwrap_or(0);
            Ok(examples
                .iter()
                .zip(targets)
                .map(|(ex, tgt)| {
                    let (input, keep) = pad(&ex.tokens, src_len);
                    let mut dec_in = vec![SEP];
                    dec_in.extend_from_slice(&tgt[..tgt.len() - 1]);
                    let mut t: Vec<Option<usize>> = tgt.iter().map(|&x| Some(x)).collect();
                    t.resize(tgt_len, None);
                    Row {
                        input,
                        keep,
                        decoder_input: pad(&dec_in, tgt_len).0,
                        targets: t,
                    }
                })
                .collect())
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tasks::TaskSpec;

    fn tiny(mode: Mode, mechanism: Mechanism) -> ModelConfig {
        ModelConfig {
            mode,
            mechanism,
            d: 8,
            d_hidden: 16,
            heads: 2,
            l: 3,
            layers: 2,
            vocab: 12,
            classes: 3,
            n_max: 40,
            dropout_attn: 0.0,
            dropout_hidden: 0.0,
            dropout_residual: 0.0,
            ..ModelConfig::default()
        }
    }

    #[test]
    fn encode_shapes_and_variable_length() {
        let m = Model::<f64>::new(tiny(Mode::EncoderClassifier, Mechanism::Luna)).unwrap();
        for n in [1, 7, 40] {
            let tokens: Vec<usize> = (0..n).map(|i| 3 + i % 9).collect();
            let (h, p) = m.encode(&tokens).unwrap();
            assert_eq!(h.shape(), &[n, 8]);
            assert_eq!(p.unwrap().shape(), &[3, 8]);
        }
        assert!(matches!(m.encode(&[12]), Err(LunaError::Input(_))));
    }

    #[test]
    fn zero_layers_rejected() {
        let mut c = tiny(Mode::EncoderClassifier, Mechanism::Luna);
        c.layers = 0;
        assert!(matches!(Model::<f64>::new(c), Err(LunaError::Config(_))));
    }

    #[test]
    fn p_threading_is_node_identity() {
        let m = Model::<f64>::new(tiny(Mode::EncoderClassifier, Mechanism::Luna)).unwrap();
        let mut g = Graph::with_params(m.store());
        let enc = m.encode_graph(&mut g, &[3, 4, 5], None, None).unwrap();
        assert_eq!(enc.p_inputs.len(), 2);
        assert_eq!(enc.p_inputs[1], enc.p_outputs[0]);
        assert_eq!(enc.p_final, Some(enc.p_outputs[1]));
    }

    #[test]
    fn classifier_logits_and_zero_head() {
        let mut m = Model::<f64>::new(tiny(Mode::EncoderClassifier, Mechanism::Luna)).unwrap();
        let logits = m.classify(&[3, 4, 5, 6]).unwrap();
        assert_eq!(logits.shape(), &[3]);
        let (w, _) = m.head();
        let shape = m.store().get(w).shape().to_vec();
        m.store_mut().set(w, Tensor::zeros(&shape)).unwrap();
        assert!(m.classify(&[3, 4, 5, 6]).unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn lm_is_causal_and_single_row() {
        for mech in [Mechanism::Luna, Mechanism::Full] {
            let m = Model::<f64>::new(tiny(Mode::DecoderLm, mech)).unwrap();
            assert_eq!(m.lm_forward(&[4]).unwrap().shape(), &[1, 12]);
            let a = m.lm_forward(&[3, 4, 5, 6, 7, 8]).unwrap();
            let b = m.lm_forward(&[3, 4, 5, 9, 9, 9]).unwrap();
            assert_eq!(&a.data()[..3 * 12], &b.data()[..3 * 12]);
            assert_ne!(a.row(3), b.row(3));
        }
    }

    #[test]
    fn padding_leaves_classifier_output_unchanged() {
        for mech in [Mechanism::Luna, Mechanism::Full, Mechanism::FixedProj] {
            let m = Model::<f64>::new(tiny(Mode::EncoderClassifier, mech)).unwrap();
            let tokens = [3, 5, 7, 4];
            let plain = m.classify(&tokens).unwrap();
            let mut g = Graph::with_params(m.store());
            let keep = [true, true, true, true, false, false, false];
            let v = m
                .classify_graph(&mut g, &[3, 5, 7, 4, 0, 0, 0], Some(&keep), None)
                .unwrap();
            let padded = g.value(v).clone().reshape(&[3]).unwrap();
            assert!(plain.max_abs_diff(&padded) < 1e-12, "{mech}");
        }
    }

    #[test]
    fn assemble_layouts() {
        let lm = tiny(Mode::DecoderLm, Mechanism::Luna);
        let spec = TaskSpec::copy(2, 4, 5, 0);
        let ex = Example {
            tokens: vec![5, 6],
            label: Label::Sequence(vec![5, 6]),
        };
        let long = spec.generate(0).unwrap();
        let rows = assemble(&lm, &[ex.clone(), long.clone()]).unwrap();
        // source 5 6 | SEP | 5 6  -> inputs 5 6 SEP 5, targets . . 5 6
        assert_eq!(&rows[0].input[..4], &[5, 6, SEP, 5]);
        assert_eq!(&rows[0].targets[..4], &[None, None, Some(5), Some(6)]);
        let s2s = tiny(Mode::Seq2seq, Mechanism::Luna);
        let rows = assemble(&s2s, &[ex]).unwrap();
        assert_eq!(rows[0].decoder_input, vec![SEP, 5]);
        assert_eq!(rows[0].targets, vec![Some(5), Some(6)]);
        let cls = tiny(Mode::EncoderClassifier, Mechanism::Luna);
        assert!(matches!(assemble(&cls, &[long]), Err(LunaError::Config(_))));
    }
}
