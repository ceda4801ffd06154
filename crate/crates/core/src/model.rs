//! The full model: embedders, fused transformer, classification head, and
//! the masked-language-modelling / image-text-matching pretraining heads.

use serde::{Deserialize, Serialize};

use crate::data::{BBox, ImageSize, Region, Sample};
use crate::embedders::{assemble_image_embedding, ImageEmbedder, TextEmbedder};
use crate::error::{Error, Result};
use crate::numerics::gradcheck::{check, GradCheckReport};
use crate::numerics::{Mode, Prng, Scalar, Tape, Tensor, Var};
use crate::params::{Init, Linear, ParamStore};
use crate::tokenizer::{encode, EncodedInstruction, Vocab, MASK_ID, NUM_SPECIALS};
use crate::transformer::{encode as encode_sequence, late_fusion_encode, Stochastic, TransformerLayer};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum Fusion {
    /// Text, target and contexts share one transformer.
    #[default]
    Early,
    /// The target runs through its own stack; summaries meet at the head.
    Late,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub layers: usize,
    pub hidden: usize,
    pub heads: usize,
    pub dropout: f64,
    pub vocab_size: usize,
    pub max_positions: usize,
    pub feat_dim: usize,
    pub max_contexts: usize,
    pub ffn_mult: usize,
    #[serde(default)]
    pub fusion: Fusion,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            layers: 2,
            hidden: 768,
            heads: 12,
            dropout: 0.1,
            vocab_size: 4682,
            max_positions: 32,
            feat_dim: 16,
            max_contexts: 32,
            ffn_mult: 4,
            fusion: Fusion::Early,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("layers", self.layers),
            ("hidden", self.hidden),
            ("heads", self.heads),
            ("vocab_size", self.vocab_size),
            ("max_positions", self.max_positions),
            ("feat_dim", self.feat_dim),
            ("max_contexts", self.max_contexts),
            ("ffn_mult", self.ffn_mult),
        ];
        if let Some((name, _)) = dims.iter().find(|(_, v)| *v == 0) {
            return Err(Error::invalid(format!("model config: {name} must be positive")));
        }
        if !self.hidden.is_multiple_of(self.heads) {
            return Err(Error::invalid(format!(
                "model config: hidden {} not divisible by heads {}",
                self.hidden, self.heads
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::invalid("model config: dropout must be in [0, 1)"));
        }
        if self.vocab_size <= NUM_SPECIALS {
            return Err(Error::invalid("model config: vocabulary has no ordinary tokens"));
        }
        Ok(())
    }

    /// Layer split for late fusion: `(context stack, target stack)`.
    pub fn late_split(&self) -> (usize, usize) {
        let b = (self.layers / 2).max(1);
        ((self.layers - self.layers / 2).max(1), b)
    }

    pub fn max_sequence(&self) -> usize {
        self.max_positions + self.max_contexts + 1
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LateFusionParams {
    pub target_layers: Vec<TransformerLayer>,
    pub fuse: Linear,
}

/// Every learnable tensor plus the structure that addresses them.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams<T: Scalar = f32> {
    pub config: ModelConfig,
    pub store: ParamStore<T>,
    pub text: TextEmbedder,
    pub image: ImageEmbedder,
    /// Early fusion: the shared stack. Late fusion: the text/context stack.
    pub layers: Vec<TransformerLayer>,
    pub late: Option<LateFusionParams>,
    pub head: Linear,
    pub mlm_head: Linear,
    pub itm_head: Linear,
}

impl<T: Scalar> ModelParams<T> {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        Self::with_init(config, Init::new(seed))
    }

    pub fn with_init(config: ModelConfig, mut init: Init) -> Result<Self> {
        config.validate()?;
        let h = config.hidden;
        let mut store = ParamStore::default();
        let text = TextEmbedder::new(&mut store, &mut init, config.vocab_size, config.max_positions, h, h, h);
        let image = ImageEmbedder::new(&mut store, &mut init, config.feat_dim, h, h, h);
        let (stack_a, stack_b) = match config.fusion {
            Fusion::Early => (config.layers, 0),
            Fusion::Late => config.late_split(),
        };
        let layers = (0..stack_a)
            .map(|i| TransformerLayer::new(&mut store, &mut init, &format!("layer{i}"), h, config.heads, config.ffn_mult))
            .collect::<Result<Vec<_>>>()?;
        let late = match config.fusion {
            Fusion::Early => None,
            Fusion::Late => Some(LateFusionParams {
                target_layers: (0..stack_b)
                    .map(|i| {
                        TransformerLayer::new(&mut store, &mut init, &format!("target_layer{i}"), h, config.heads, config.ffn_mult)
                    })
                    .collect::<Result<Vec<_>>>()?,
                fuse: Linear::new(&mut store, &mut init, "fuse", 2 * h, h),
            }),
        };
        let head = Linear::new(&mut store, &mut init, "head", h, 2);
        let mlm_head = Linear::new(&mut store, &mut init, "pretrain.mlm", h, config.vocab_size);
        let itm_head = Linear::new(&mut store, &mut init, "pretrain.itm", h, 2);
        Ok(ModelParams {
            config,
            store,
            text,
            image,
            layers,
            late,
            head,
            mlm_head,
            itm_head,
        })
    }

    /// Same structure and values in another precision.
    pub fn cast<U: Scalar>(&self) -> ModelParams<U> {
        ModelParams {
            config: self.config.clone(),
            store: self.store.cast(),
            text: self.text.clone(),
            image: self.image.clone(),
            layers: self.layers.clone(),
            late: self.late.clone(),
            head: self.head,
            mlm_head: self.mlm_head,
            itm_head: self.itm_head,
        }
    }

    /// Parameters used by the fine-tuning objective (pretraining heads excluded).
    pub fn finetune_numel(&self) -> usize {
        let excluded: usize = [self.mlm_head, self.itm_head].iter().map(Linear::numel).sum();
        self.store.numel() - excluded
    }
}

/// A sample with its instruction tokenized.
#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub tokens: EncodedInstruction,
    pub sample: Sample,
}

impl Example {
    pub fn new(sample: Sample, vocab: &Vocab, config: &ModelConfig) -> Result<Self> {
        sample.validate(config.max_contexts)?;
        let tokens = encode(&sample.instruction, vocab, config.max_positions);
        Ok(Example { tokens, sample })
    }

    pub fn label(&self) -> usize {
        self.sample.label as usize
    }
}

pub fn prepare(samples: &[Sample], vocab: &Vocab, config: &ModelConfig) -> Result<Vec<Example>> {
    samples.iter().map(|s| Example::new(s.clone(), vocab, config)).collect()
}

/// Output probabilities `[p(incorrect), p(correct)]` and the pooled vector.
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub p: [f64; 2],
    pub pooled: Vec<f64>,
}

impl Prediction {
    pub fn p_correct(&self) -> f64 {
        self.p[1]
    }
}

/// Intermediate handles of one forward pass.
#[derive(Debug, Clone, Copy)]
pub struct ForwardVars {
    pub logits: Var,
    pub pooled: Var,
    /// Final-layer sequence (early fusion only).
    pub sequence: Option<Var>,
    pub text_len: usize,
}

/// Records one forward pass for `tokens` against a target and its contexts.
#[allow(clippy::too_many_arguments)]
pub fn forward_on_tape<T: Scalar>(
    tape: &mut Tape<T>,
    params: &ModelParams<T>,
    tokens: &EncodedInstruction,
    target: &Region,
    contexts: &[Region],
    image: ImageSize,
    mode: Mode,
    rng: &mut Prng,
) -> Result<ForwardVars> {
    let cfg = &params.config;
    let seq = tokens.len() + contexts.len() + 1;
    if tokens.len() > cfg.max_positions || contexts.len() > cfg.max_contexts {
        return Err(Error::invalid(format!(
            "sequence of {} tokens and {} contexts exceeds the limit of {} slots",
            tokens.len(),
            contexts.len(),
            cfg.max_sequence()
        )));
    }
    let store = &params.store;
    let mut st = Stochastic { p: cfg.dropout, mode, rng };
    let text = params.text.forward(tape, store, tokens)?;
    match &params.late {
        None => {
            let img = assemble_image_embedding(tape, store, &params.image, target, contexts, image)?;
            let mask = vec![true; seq];
            let h = encode_sequence(tape, store, text, img, &params.layers, &mask, &mut st)?;
            let pooled = tape.select_rows(h, &[tokens.len()])?;
            let logits = params.head.forward(tape, store, pooled)?;
            Ok(ForwardVars {
                logits,
                pooled,
                sequence: Some(h),
                text_len: tokens.len(),
            })
        }
        Some(late) => {
            if !contexts.contains(target) {
                return Err(Error::invalid("target region is not among the context regions"));
            }
            let ctx_refs: Vec<&Region> = contexts.iter().collect();
            let ctx = params.image.forward(tape, store, &ctx_refs, image)?;
            let tgt = params.image.forward(tape, store, &[target], image)?;
            let mask = vec![true; tokens.len() + contexts.len()];
            let (a, b) = late_fusion_encode(tape, store, text, ctx, tgt, &params.layers, &late.target_layers, &mask, &mut st)?;
            let joined = tape.concat_cols(&[a, b])?;
            let fused = late.fuse.forward(tape, store, joined)?;
            let pooled = tape.gelu(fused)?;
            let logits = params.head.forward(tape, store, pooled)?;
            Ok(ForwardVars {
                logits,
                pooled,
                sequence: None,
                text_len: tokens.len(),
            })
        }
    }
}

/// `p(y) = softmax(head(h_target))`.
pub fn forward<T: Scalar>(params: &ModelParams<T>, example: &Example, mode: Mode, rng: &mut Prng) -> Result<Prediction> {
    let mut tape = Tape::new();
    let s = &example.sample;
    let vars = forward_on_tape(&mut tape, params, &example.tokens, &s.target, &s.contexts, s.image_size, mode, rng)?;
    let probs = tape.softmax(vars.logits, None)?;
    let p = tape.value(probs).data();
    Ok(Prediction {
        p: [p[0].as_f64(), p[1].as_f64()],
        pooled: tape.value(vars.pooled).data().iter().map(|v| v.as_f64()).collect(),
    })
}

/// Batch-summed cross entropy of predicted probabilities against labels.
pub fn loss(predictions: &[Prediction], labels: &[u8]) -> Result<f64> {
    if predictions.len() != labels.len() {
        return Err(Error::shape("loss", &[predictions.len()], &[labels.len()]));
    }
    let mut total = 0.0;
    for (p, &y) in predictions.iter().zip(labels) {
        if y > 1 {
            return Err(Error::LabelOutOfRange { label: y as usize, classes: 2 });
        }
        total -= p.p[y as usize].ln();
    }
    Ok(total)
}

/// Classification loss of one example and its parameter gradients.
pub fn example_gradients<T: Scalar>(
    params: &ModelParams<T>,
    example: &Example,
    mode: Mode,
    rng: &mut Prng,
) -> Result<(f64, Vec<Tensor<T>>)> {
    let mut tape = Tape::new();
    let s = &example.sample;
    let vars = forward_on_tape(&mut tape, params, &example.tokens, &s.target, &s.contexts, s.image_size, mode, rng)?;
    let loss = tape.cross_entropy(vars.logits, &[example.label()])?;
    let grads = tape.backward(loss)?;
    Ok((tape.value(loss).data()[0].as_f64(), params.store.gradients(&tape, &grads)))
}

/// Selects each position with probability `rate`; a selected position becomes
/// `[MASK]` 80% of the time, a random ordinary token 10%, and stays put 10%.
/// Returns the corrupted ids and the selected positions.
pub fn mlm_mask(ids: &[usize], vocab_size: usize, rate: f64, rng: &mut Prng) -> (Vec<usize>, Vec<usize>) {
    let mut out = ids.to_vec();
    let mut picked = Vec::new();
    for (i, slot) in out.iter_mut().enumerate() {
        if !rng.bernoulli(rate) {
            continue;
        }
        picked.push(i);
        let r = rng.next_f64();
        if r < 0.8 {
            *slot = MASK_ID;
        } else if r < 0.9 && vocab_size > NUM_SPECIALS {
            *slot = NUM_SPECIALS + rng.below(vocab_size - NUM_SPECIALS);
        }
    }
    (out, picked)
}

pub const MLM_RATE: f64 = 0.15;
pub const ITM_CORRUPT_PROB: f64 = 0.5;

/// One pretraining pair: region context plus possibly-swapped instruction.
#[derive(Debug, Clone, PartialEq)]
pub struct PretrainInput {
    pub tokens: EncodedInstruction,
    /// Masked-LM targets as `(position, original id)`.
    pub mlm_targets: Vec<(usize, usize)>,
    /// 1 when the instruction belongs to this target, 0 when swapped.
    pub itm_label: usize,
}

/// Builds a pretraining input from `example`: with probability 0.5 its
/// instruction is replaced by one from `pool` with different text, then the
/// tokens are masked.
pub fn make_pretrain_input(example: &Example, pool: &[Example], vocab_size: usize, rng: &mut Prng) -> PretrainInput {
    let mut tokens = example.tokens.clone();
    let mut itm_label = 1;
    if rng.bernoulli(ITM_CORRUPT_PROB) {
        let others: Vec<&Example> = pool
            .iter()
            .filter(|e| e.sample.instruction != example.sample.instruction)
            .collect();
        if !others.is_empty() {
            tokens = others[rng.below(others.len())].tokens.clone();
            itm_label = 0;
        }
    }
    let (masked, picked) = mlm_mask(&tokens.ids, vocab_size, MLM_RATE, rng);
    let mlm_targets = picked.iter().map(|&p| (p, tokens.ids[p])).collect();
    tokens.ids = masked;
    PretrainInput {
        tokens,
        mlm_targets,
        itm_label,
    }
}

/// MLM cross entropy over masked text slots plus ITM cross entropy at the
/// target slot, recorded on `tape`.
pub fn pretrain_loss_on_tape<T: Scalar>(
    tape: &mut Tape<T>,
    params: &ModelParams<T>,
    input: &PretrainInput,
    sample: &Sample,
    mode: Mode,
    rng: &mut Prng,
) -> Result<Var> {
    if params.late.is_some() {
        return Err(Error::invalid("pretraining is defined for the early-fusion model only"));
    }
    let store = &params.store;
    let vars = forward_on_tape(tape, params, &input.tokens, &sample.target, &sample.contexts, sample.image_size, mode, rng)?;
    let itm_logits = params.itm_head.forward(tape, store, vars.pooled)?;
    let mut loss = tape.cross_entropy(itm_logits, &[input.itm_label])?;
    if !input.mlm_targets.is_empty() {
        let seq = vars.sequence.expect("early fusion keeps the sequence");
        let (pos, ids): (Vec<usize>, Vec<usize>) = input.mlm_targets.iter().copied().unzip();
        let rows = tape.select_rows(seq, &pos)?;
        let logits = params.mlm_head.forward(tape, store, rows)?;
        let mlm = tape.cross_entropy(logits, &ids)?;
        loss = tape.add(loss, mlm)?;
    }
    Ok(loss)
}

pub fn pretrain_gradients<T: Scalar>(
    params: &ModelParams<T>,
    input: &PretrainInput,
    sample: &Sample,
    rng: &mut Prng,
) -> Result<(f64, Vec<Tensor<T>>)> {
    let mut tape = Tape::new();
    let loss = pretrain_loss_on_tape(&mut tape, params, input, sample, Mode::Train, rng)?;
    let grads = tape.backward(loss)?;
    Ok((tape.value(loss).data()[0].as_f64(), params.store.gradients(&tape, &grads)))
}

/// Configuration used for end-to-end gradient verification.
pub fn grad_check_config() -> ModelConfig {
    ModelConfig {
        layers: 2,
        hidden: 16,
        heads: 2,
        dropout: 0.1,
        vocab_size: 12,
        max_positions: 8,
        feat_dim: 5,
        max_contexts: 3,
        ffn_mult: 4,
        fusion: Fusion::Early,
    }
}

/// Checks analytic gradients of the classification loss plus the pretraining
/// loss against central differences over every parameter, in 64-bit with
/// dropout disabled. The synthetic input has 6 tokens and 3 context regions.
pub fn grad_check(config: &ModelConfig, seed: u64, h: f64) -> Result<GradCheckReport> {
    let params: ModelParams<f64> = ModelParams::with_init(config.clone(), Init::with_std(seed, 0.3))?;
    let mut rng = Prng::new(seed).split(1);
    let n = 3.min(config.max_contexts);
    let t = 6.min(config.max_positions);
    let contexts: Vec<Region> = (0..n)
        .map(|i| {
            let x = 10.0 + 40.0 * i as f32;
            Region {
                feat: (0..config.feat_dim).map(|_| rng.normal() as f32).collect(),
                bbox: BBox::new(x, 5.0 + 20.0 * rng.next_f64() as f32, x + 30.0, 60.0).expect("valid box"),
                score: rng.next_f64() as f32,
            }
        })
        .collect();
    let ids: Vec<usize> = (0..t).map(|_| NUM_SPECIALS + rng.below(config.vocab_size - NUM_SPECIALS)).collect();
    let tokens = EncodedInstruction { positions: (0..t).collect(), ids };
    let sample = Sample {
        id: "grad-check".into(),
        instruction: String::new(),
        image_size: ImageSize { w: 40 * n as u32 + 20, h: 80 },
        target: contexts[n / 2].clone(),
        contexts,
        label: 1,
    };
    let pretrain = PretrainInput {
        mlm_targets: vec![(1, tokens.ids[1]), (t - 1, tokens.ids[t - 1])],
        tokens: EncodedInstruction {
            ids: tokens.ids.iter().enumerate().map(|(i, &id)| if i == 1 { MASK_ID } else { id }).collect(),
            positions: tokens.positions.clone(),
        },
        itm_label: 0,
    };
    let with_tensors = |tensors: &[Tensor<f64>]| -> Result<ModelParams<f64>> {
        let mut p = params.clone();
        p.store.replace_tensors(tensors.to_vec())?;
        Ok(p)
    };
    let record = |tape: &mut Tape<f64>, p: &ModelParams<f64>| -> Result<Var> {
        let mut r = Prng::new(0);
        let s = &sample;
        let vars = forward_on_tape(tape, p, &tokens, &s.target, &s.contexts, s.image_size, Mode::Infer, &mut r)?;
        let cls = tape.cross_entropy(vars.logits, &[s.label as usize])?;
        if p.late.is_some() {
            return Ok(cls);
        }
        let pre = pretrain_loss_on_tape(tape, p, &pretrain, s, Mode::Infer, &mut r)?;
        tape.add(cls, pre)
    };
    check(
        params.store.tensors(),
        h,
        |tensors| {
            let p = with_tensors(tensors)?;
            let mut tape = Tape::new();
            let loss = record(&mut tape, &p)?;
            Ok(tape.value(loss).data()[0])
        },
        |tensors| {
            let p = with_tensors(tensors)?;
            let mut tape = Tape::new();
            let loss = record(&mut tape, &p)?;
            let grads = tape.backward(loss)?;
            Ok(p.store.gradients(&tape, &grads))
        },
    )
}
