//! Text branch used only while training: five learnable prompt banks shifted
//! by a skeleton-conditioned vector, fed through a small transformer.

use std::collections::BTreeMap;

use rand::Rng;

use crate::config::{ClassSlot, Conditioning, ModelConfig};
use crate::error::{Error, Result};
use crate::nn::{blocks, run_blocks, Ctx, LayerNorm, Linear, TransformerBlock};
use crate::params::{ParamId, ParamKind, ParamStore};
use crate::skeleton::Limb;
use crate::tensor::Tensor;
use crate::Var;

/// Prompt bank identity: one global bank and one per limb.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Bank {
    Global,
    Limb(Limb),
}

impl Bank {
    pub const ALL: [Bank; 5] = [
        Bank::Global,
        Bank::Limb(Limb::Head),
        Bank::Limb(Limb::Hands),
        Bank::Limb(Limb::Hip),
        Bank::Limb(Limb::Legs),
    ];

    pub fn name(self) -> &'static str {
        match self {
            Bank::Global => "global",
            Bank::Limb(l) => l.name(),
        }
    }
}

/// Word-level vocabulary over class labels.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    ids: BTreeMap<String, usize>,
    classes: Vec<Vec<usize>>,
}

impl Vocabulary {
    pub const UNK: &'static str = "<unk>";

    fn words(label: &str) -> impl Iterator<Item = String> + '_ {
        label.split_whitespace().map(str::to_lowercase)
    }

    /// Ids follow sorted word order after the specials.
    pub fn from_labels<S: AsRef<str>>(labels: &[S]) -> Result<Self> {
        let mut words: Vec<String> = labels.iter().flat_map(|l| Self::words(l.as_ref())).collect();
        words.sort();
        words.dedup();
        let mut ids = BTreeMap::new();
        ids.insert(Self::UNK.to_string(), 0);
        for w in words {
            let next = ids.len();
            ids.entry(w).or_insert(next);
        }
        let mut vocab = Vocabulary {
            ids,
            classes: Vec::new(),
        };
        for (i, l) in labels.iter().enumerate() {
            let toks = vocab.encode(l.as_ref());
            if toks.is_empty() {
                return Err(Error::Config(format!("class {i} has an empty label")));
            }
            vocab.classes.push(toks);
        }
        Ok(vocab)
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn id(&self, word: &str) -> Option<usize> {
        self.ids.get(word).copied()
    }

    pub fn encode(&self, text: &str) -> Vec<usize> {
        Self::words(text).map(|w| self.ids.get(&w).copied().unwrap_or(0)).collect()
    }

    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn class_tokens(&self, class: usize) -> Result<&[usize]> {
        self.classes
            .get(class)
            .map(Vec::as_slice)
            .ok_or_else(|| Error::invalid("compose_prompt", format!("unknown class {class}")))
    }
}

/// Two-layer network mapping a skeleton feature to a prompt shift `π`.
#[derive(Clone, Debug)]
pub struct MetaNet {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl MetaNet {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, rng: &mut R, cfg: &ModelConfig) -> Self {
        MetaNet {
            fc1: Linear::new(store, rng, "text.meta_net.fc1", cfg.embed_dim, cfg.meta_hidden, true),
            fc2: Linear::new(store, rng, "text.meta_net.fc2", cfg.meta_hidden, cfg.text_width, true),
        }
    }

    pub fn forward(&self, cx: &mut Ctx, s: Var) -> Result<Var> {
        let h = self.fc1.forward(cx, s)?;
        let h = cx.relu(h)?;
        self.fc2.forward(cx, h)
    }
}

/// `M` context vectors of one bank.
#[derive(Clone, Debug)]
pub struct PromptBank {
    pub bank: Bank,
    pub context: ParamId,
}

/// Builds `[B, M + k, d_t]` prompt sequences for one bank and one class.
///
/// `context` is `[M, d_t]`, `class_embed` is `[k, d_t]` and `pi`, when given,
/// is `[B, d_t]` and is added to every context vector of its row.
pub fn compose_prompt(
    cx: &mut Ctx,
    context: Var,
    class_embed: Var,
    pi: Option<Var>,
    batch: usize,
    slot: ClassSlot,
) -> Result<Var> {
    let cs = cx.shape(context).to_vec();
    let ks = cx.shape(class_embed).to_vec();
    if cs.len() != 2 || ks.len() != 2 || cs[1] != ks[1] {
        return Err(Error::shape("compose_prompt", &cs, &ks));
    }
    let (m, d) = (cs[0], cs[1]);
    let ctx = match pi {
        Some(pi) => {
            let ps = cx.shape(pi).to_vec();
            if ps != [batch, d] {
                return Err(Error::shape("compose_prompt", &[batch, d], &ps));
            }
            let pi = cx.reshape(pi, &[batch, 1, d])?;
            let pi = cx.select(pi, 1, &vec![0; m])?;
            cx.add(pi, context)?
        }
        None => tile(cx, context, batch)?,
    };
    let class = tile(cx, class_embed, batch)?;
    match slot {
        ClassSlot::Front => cx.concat(&[class, ctx], 1),
        ClassSlot::End => cx.concat(&[ctx, class], 1),
        ClassSlot::Middle => {
            let half = m / 2;
            let first: Vec<usize> = (0..half).collect();
            let second: Vec<usize> = (half..m).collect();
            let a = cx.select(ctx, 1, &first)?;
            let b = cx.select(ctx, 1, &second)?;
            cx.concat(&[a, class, b], 1)
        }
    }
}

fn tile(cx: &mut Ctx, x: Var, batch: usize) -> Result<Var> {
    let mut shape = vec![1];
    shape.extend(cx.shape(x).to_vec());
    let x = cx.reshape(x, &shape)?;
    cx.select(x, 0, &vec![0; batch])
}

/// Transformer over prompt sequences, pooled and projected to unit vectors.
#[derive(Clone, Debug)]
pub struct TextEncoder {
    pub token_embed: ParamId,
    pub pos_embed: ParamId,
    pub blocks: Vec<TransformerBlock>,
    pub norm: LayerNorm,
    pub proj: Linear,
    pub max_len: usize,
}

impl TextEncoder {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, rng: &mut R, cfg: &ModelConfig, vocab: usize) -> Result<Self> {
        let d = cfg.text_width;
        Ok(TextEncoder {
            token_embed: store.add("text.token_embed", Tensor::randn(&[vocab, d], 0.02, rng), ParamKind::Weight),
            pos_embed: store.add("text.pos_embed", Tensor::randn(&[cfg.max_text_len, d], 0.01, rng), ParamKind::Weight),
            blocks: blocks(store, rng, "text.blocks", cfg.text_depth, d, cfg.text_heads)?,
            norm: LayerNorm::new(store, "text.norm", d),
            proj: Linear::new(store, rng, "text.proj", d, cfg.embed_dim, true),
            max_len: cfg.max_text_len,
        })
    }

    /// `[k, d_t]` embeddings of the given token ids.
    pub fn embed_tokens(&self, cx: &mut Ctx, ids: &[usize]) -> Result<Var> {
        let table = cx.p(self.token_embed);
        cx.select(table, 0, ids)
    }

    /// `[N, L, d_t]` sequences to `[N, d_e]` unit-norm features.
    pub fn encode(&self, cx: &mut Ctx, seq: Var) -> Result<Var> {
        let s = cx.shape(seq).to_vec();
        if s.len() != 3 {
            return Err(Error::invalid("encode_text", format!("expected [N, L, d], got {s:?}")));
        }
        if s[1] > self.max_len {
            return Err(Error::invalid(
                "encode_text",
                format!("sequence of {} tokens exceeds maximum {}", s[1], self.max_len),
            ));
        }
        let pos = cx.p(self.pos_embed);
        let rows: Vec<usize> = (0..s[1]).collect();
        let pos = cx.select(pos, 0, &rows)?;
        let x = cx.add(seq, pos)?;
        let x = run_blocks(&self.blocks, cx, x)?;
        let x = self.norm.forward(cx, x)?;
        let x = cx.mean(x, 1)?;
        let x = self.proj.forward(cx, x)?;
        cx.l2_normalize(x)
    }
}

/// Prompt banks, the shared Meta-Net and the text encoder.
#[derive(Clone, Debug)]
pub struct TextModule {
    pub vocab: Vocabulary,
    pub banks: Vec<PromptBank>,
    pub meta_net: MetaNet,
    pub encoder: TextEncoder,
    pub slot: ClassSlot,
    pub conditioning: Conditioning,
}

impl TextModule {
    pub const PREFIX: &'static str = "text.";

    pub fn new<R: Rng + ?Sized, S: AsRef<str>>(
        store: &mut ParamStore,
        rng: &mut R,
        cfg: &ModelConfig,
        labels: &[S],
    ) -> Result<Self> {
        let vocab = Vocabulary::from_labels(labels)?;
        let longest = vocab.classes.iter().map(Vec::len).max().unwrap_or(0);
        if cfg.context_tokens + longest > cfg.max_text_len {
            return Err(Error::Config(format!(
                "prompt of {} tokens exceeds max_text_len {}",
                cfg.context_tokens + longest,
                cfg.max_text_len
            )));
        }
        let banks = Bank::ALL
            .iter()
            .map(|&bank| PromptBank {
                bank,
                context: store.add(
                    format!("text.prompt.{}.context", bank.name()),
                    Tensor::randn(&[cfg.context_tokens, cfg.text_width], 0.02, rng),
                    ParamKind::Weight,
                ),
            })
            .collect();
        let meta_net = MetaNet::new(store, rng, cfg);
        let encoder = TextEncoder::new(store, rng, cfg, vocab.len())?;
        Ok(TextModule {
            vocab,
            banks,
            meta_net,
            encoder,
            slot: cfg.class_slot,
            conditioning: cfg.conditioning,
        })
    }

    /// Per-bank shift vectors `[B, d_t]`, or `None` when conditioning is off.
    ///
    /// `global` and `limbs` are the skeleton features in [`Bank::ALL`] order.
    pub fn shifts(&self, cx: &mut Ctx, global: Var, limbs: &[Var; 4]) -> Result<[Option<Var>; 5]> {
        Ok(match self.conditioning {
            Conditioning::Off => [None; 5],
            Conditioning::GlobalOnly => {
                let pi = self.meta_net.forward(cx, global)?;
                [Some(pi); 5]
            }
            Conditioning::PerLimb => {
                let mut out = [None; 5];
                out[0] = Some(self.meta_net.forward(cx, global)?);
                for (i, &l) in limbs.iter().enumerate() {
                    out[i + 1] = Some(self.meta_net.forward(cx, l)?);
                }
                out
            }
        })
    }

    /// Text feature `[B, d_e]` per bank for each sample's own class, with
    /// row `i` built from `shifts[bank]` row `i`.
    pub fn features(&self, cx: &mut Ctx, labels: &[usize], shifts: &[Option<Var>; 5]) -> Result<[Var; 5]> {
        let b = labels.len();
        // Samples grouped by class token count so every encoder call sees
        // equal-length sequences; all five banks share each call.
        let mut by_len: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for (i, &y) in labels.iter().enumerate() {
            by_len.entry(self.vocab.class_tokens(y)?.len()).or_default().push(i);
        }
        let mut pieces = Vec::new();
        let mut order = Vec::new(); // (bank, sample) of each encoded row
        for (_, members) in &by_len {
            let mut seqs = Vec::new();
            for (bi, bank) in self.banks.iter().enumerate() {
                let context = cx.p(bank.context);
                let pi = match shifts[bi] {
                    Some(p) => Some(cx.select(p, 0, members)?),
                    None => None,
                };
                // One class at a time; shifts are per sample.
                for (mi, &i) in members.iter().enumerate() {
                    let ids = self.vocab.class_tokens(labels[i])?.to_vec();
                    let class_embed = self.encoder.embed_tokens(cx, &ids)?;
                    let row_pi = match pi {
                        Some(p) => Some(cx.select(p, 0, &[mi])?),
                        None => None,
                    };
                    seqs.push(compose_prompt(cx, context, class_embed, row_pi, 1, self.slot)?);
                    order.push((bi, i));
                }
            }
            let batch = cx.concat(&seqs, 0)?;
            pieces.push(self.encoder.encode(cx, batch)?);
        }
        let all = if pieces.len() == 1 { pieces[0] } else { cx.concat(&pieces, 0)? };
        let mut row_of = vec![vec![0; b]; 5];
        for (r, &(bi, i)) in order.iter().enumerate() {
            row_of[bi][i] = r;
        }
        let mut out = Vec::with_capacity(5);
        for rows in &row_of {
            out.push(cx.select(all, 0, rows)?);
        }
        Ok(out.try_into().expect("five banks"))
    }
}
