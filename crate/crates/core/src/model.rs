//! A small post-norm decoder transformer whose linear modules can be
//! dense, low-dimensional adapters, or low-rank adapters.
//!
//! A batch of `b` sequences of length `n` is carried as one `(b·n)×d`
//! matrix; attention slices it back into sequences and heads.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::accounting::ModelSpec;
use crate::adapter::{AdapterState, LoraState};
use crate::allocator::{ModuleId, ModuleKind};
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

pub const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ToyConfig {
    pub layers: usize,
    pub d_model: usize,
    pub heads: usize,
    pub ffn_dim: usize,
    pub vocab: usize,
    pub context: usize,
    #[serde(default = "default_causal")]
    pub causal: bool,
}

fn default_causal() -> bool {
    true
}

impl Default for ToyConfig {
    fn default() -> Self {
        ToyConfig {
            layers: 2,
            d_model: 64,
            heads: 4,
            ffn_dim: 256,
            vocab: 64,
            context: 32,
            causal: true,
        }
    }
}

impl ToyConfig {
    pub fn validate(&self) -> Result<()> {
        let dims = [self.layers, self.d_model, self.heads, self.ffn_dim, self.vocab, self.context];
        if dims.contains(&0) {
            return Err(Error::config("toy model dimensions must be positive"));
        }
        if self.d_model % self.heads != 0 {
            return Err(Error::config(format!(
                "d_model {} not divisible by {} heads",
                self.d_model, self.heads
            )));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.heads
    }

    pub fn module_shape(&self, kind: ModuleKind) -> (usize, usize) {
        let (d, f) = (self.d_model, self.ffn_dim);
        match kind {
            ModuleKind::Ffn1 => (d, f),
            ModuleKind::Ffn2 => (f, d),
            _ => (d, d),
        }
    }

    /// The matching accounting spec for `batch` sequences.
    pub fn model_spec(&self, batch: usize, kinds: &[ModuleKind]) -> ModelSpec {
        ModelSpec {
            name: "toy".into(),
            layers: self.layers,
            d_model: self.d_model,
            ffn_dim: self.ffn_dim,
            kinds: kinds.to_vec(),
            seq_len: self.context,
            batch,
            bytes_per_scalar: 4,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Projection {
    Dense(Tensor),
    Lamda(AdapterState),
    Lora(LoraState),
}

impl Projection {
    /// The dense weight this projection currently computes.
    pub fn effective_weight(&self) -> Result<Tensor> {
        match self {
            Projection::Dense(w) => Ok(w.clone()),
            Projection::Lamda(s) => s.effective_weight(),
            Projection::Lora(s) => s.a.matmul(&s.b).map(|ab| ab.scale(s.alpha)).and_then(|ab| s.w().add(&ab)),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub proj: Projection,
    pub bias: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Block {
    /// Indexed in `ModuleKind::ALL` order.
    pub linears: Vec<Linear>,
    pub ln1_gain: Tensor,
    pub ln1_bias: Tensor,
    pub ln2_gain: Tensor,
    pub ln2_bias: Tensor,
}

impl Block {
    pub fn linear(&self, kind: ModuleKind) -> &Linear {
        &self.linears[kind_index(kind)]
    }

    pub fn linear_mut(&mut self, kind: ModuleKind) -> &mut Linear {
        &mut self.linears[kind_index(kind)]
    }
}

pub fn kind_index(kind: ModuleKind) -> usize {
    ModuleKind::ALL.iter().position(|&k| k == kind).expect("kind listed in ALL")
}

#[derive(Debug, Clone, PartialEq)]
pub struct ToyModel {
    pub config: ToyConfig,
    pub tok_emb: Tensor,
    pub pos_emb: Tensor,
    pub blocks: Vec<Block>,
    pub unembed: Tensor,
    pub unembed_bias: Tensor,
    /// Whether non-adapter tensors are trained.
    pub train_backbone: bool,
}

/// A tensor bound into a graph for one step.
#[derive(Debug, Clone)]
pub struct BoundParam {
    pub name: String,
    pub var: Var,
    /// Leading rows an optimizer may update (`None`: all).
    pub live_rows: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum ParamSlot {
    TokEmb,
    PosEmb,
    Unembed,
    UnembedBias,
    Ln { layer: usize, which: u8 },
    Bias(ModuleId),
    Weight(ModuleId),
    LamdaS(ModuleId),
    LamdaB(ModuleId),
    LoraA(ModuleId),
    LoraB(ModuleId),
}

pub struct Forward {
    pub logits: Var,
    pub params: Vec<BoundParam>,
}

impl ToyModel {
    /// Randomly initialised dense model.
    pub fn init(config: ToyConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = config.d_model;
        let dense = |d_in: usize, d_out: usize, rng: &mut ChaCha8Rng| {
            Tensor::randn(&[d_in, d_out], 1.0 / (d_in as f64).sqrt(), rng)
        };
        let tok_emb = Tensor::randn(&[config.vocab, d], 1.0, &mut rng);
        let pos_emb = Tensor::randn(&[config.context, d], 1.0, &mut rng);
        let blocks = (0..config.layers)
            .map(|_| {
                let linears = ModuleKind::ALL
                    .iter()
                    .map(|&k| {
                        let (i, o) = config.module_shape(k);
                        Linear {
                            proj: Projection::Dense(dense(i, o, &mut rng)),
                            bias: Tensor::zeros(&[o]),
                        }
                    })
                    .collect();
                Block {
                    linears,
                    ln1_gain: Tensor::full(&[d], 1.0),
                    ln1_bias: Tensor::zeros(&[d]),
                    ln2_gain: Tensor::full(&[d], 1.0),
                    ln2_bias: Tensor::zeros(&[d]),
                }
            })
            .collect();
        let unembed = dense(d, config.vocab, &mut rng);
        Ok(ToyModel {
            config,
            tok_emb,
            pos_emb,
            blocks,
            unembed,
            unembed_bias: Tensor::zeros(&[config.vocab]),
            train_backbone: true,
        })
    }

    pub fn linear(&self, id: ModuleId) -> &Linear {
        self.blocks[id.layer].linear(id.kind)
    }

    pub fn linear_mut(&mut self, id: ModuleId) -> &mut Linear {
        self.blocks[id.layer].linear_mut(id.kind)
    }

    pub fn module_ids(&self) -> Vec<ModuleId> {
        (0..self.config.layers)
            .flat_map(|l| ModuleKind::ALL.iter().map(move |&k| ModuleId::new(l, k)))
            .collect()
    }

    /// Dense pre-trained weights of every module, for spectral analysis.
    pub fn dense_weights(&self) -> Result<Vec<(ModuleId, Tensor)>> {
        self.module_ids()
            .into_iter()
            .map(|id| Ok((id, self.linear(id).proj.effective_weight()?)))
            .collect()
    }

    /// Scalars an optimizer currently updates.
    pub fn live_trainable_params(&self) -> usize {
        let mut n = 0;
        if self.train_backbone {
            n += self.tok_emb.len() + self.pos_emb.len() + self.unembed.len() + self.unembed_bias.len();
            n += self.blocks.len() * 4 * self.config.d_model;
        }
        for b in &self.blocks {
            for lin in &b.linears {
                n += match &lin.proj {
                    Projection::Dense(w) if self.train_backbone => w.len(),
                    Projection::Dense(_) => 0,
                    Projection::Lamda(s) => s.live_trainable_params(),
                    Projection::Lora(s) => s.live_trainable_params(),
                };
                if self.train_backbone {
                    n += lin.bias.len();
                }
            }
        }
        n
    }

    fn bind(&self, g: &mut Graph, params: &mut Vec<BoundParam>, name: String, t: &Tensor, train: bool, live_rows: Option<usize>) -> Var {
        let v = g.leaf(t.clone(), train);
        if train {
            params.push(BoundParam { name, var: v, live_rows });
        }
        v
    }

    /// Logits for `ids`, laid out as `batch` consecutive sequences of equal
    /// length.
    pub fn forward(&self, g: &mut Graph, ids: &[usize], batch: usize) -> Result<Forward> {
        let cfg = &self.config;
        if batch == 0 || ids.len() % batch != 0 {
            return Err(Error::Contract(format!(
                "{} token ids do not split into {batch} sequences",
                ids.len()
            )));
        }
        let n = ids.len() / batch;
        if n > cfg.context {
            return Err(Error::Contract(format!(
                "sequence length {n} exceeds context {}",
                cfg.context
            )));
        }
        let tb = self.train_backbone;
        let mut params = Vec::new();
        let tok = self.bind(g, &mut params, "tok_emb".into(), &self.tok_emb, tb, None);
        let pos = self.bind(g, &mut params, "pos_emb".into(), &self.pos_emb, tb, None);
        let te = g.embedding(tok, ids)?;
        let pos_ids: Vec<usize> = (0..ids.len()).map(|i| i % n).collect();
        let pe = g.embedding(pos, &pos_ids)?;
        let mut x = g.add(te, pe)?;
        for (l, block) in self.blocks.iter().enumerate() {
            x = self.block_forward(g, &mut params, l, block, x, batch)?;
        }
        let u = self.bind(g, &mut params, "unembed".into(), &self.unembed, tb, None);
        let ub = self.bind(g, &mut params, "unembed_bias".into(), &self.unembed_bias, tb, None);
        let logits = g.matmul(x, u)?;
        let logits = g.add_row(logits, ub)?;
        Ok(Forward { logits, params })
    }

    fn linear_forward(&self, g: &mut Graph, params: &mut Vec<BoundParam>, id: ModuleId, x: Var) -> Result<Var> {
        let lin = self.linear(id);
        let p = id.prefix();
        let tb = self.train_backbone;
        let y = match &lin.proj {
            Projection::Dense(w) => {
                let w = self.bind(g, params, format!("{p}.weight"), w, tb, None);
                g.matmul(x, w)?
            }
            Projection::Lamda(s) => {
                let (y, vars) = s.forward(g, x, &p)?;
                params.push(BoundParam { name: format!("{p}.s"), var: vars.s, live_rows: None });
                if s.trainable_rows() > 0 {
                    params.push(BoundParam {
                        name: format!("{p}.b"),
                        var: vars.b,
                        live_rows: Some(s.trainable_rows()),
                    });
                }
                y
            }
            Projection::Lora(s) => {
                let (y, vars) = s.forward(g, x, &p)?;
                params.push(BoundParam { name: format!("{p}.a"), var: vars.a, live_rows: None });
                params.push(BoundParam { name: format!("{p}.b"), var: vars.b, live_rows: None });
                y
            }
        };
        let b = self.bind(g, params, format!("{p}.bias"), &lin.bias, tb, None);
        g.add_row(y, b)
    }

    fn block_forward(&self, g: &mut Graph, params: &mut Vec<BoundParam>, l: usize, block: &Block, x: Var, batch: usize) -> Result<Var> {
        let tb = self.train_backbone;
        let id = |k| ModuleId::new(l, k);
        let q = self.linear_forward(g, params, id(ModuleKind::Q), x)?;
        let k = self.linear_forward(g, params, id(ModuleKind::K), x)?;
        let v = self.linear_forward(g, params, id(ModuleKind::V), x)?;
        let heads = attention(g, q, k, v, batch, self.config.heads, self.config.causal)?;
        let attn = self.linear_forward(g, params, id(ModuleKind::O), heads)?;
        let g1 = self.bind(g, params, format!("layers.{l}.ln1.gain"), &block.ln1_gain, tb, None);
        let b1 = self.bind(g, params, format!("layers.{l}.ln1.bias"), &block.ln1_bias, tb, None);
        let res = g.add(x, attn)?;
        let x1 = g.layer_norm(res, g1, b1, LN_EPS)?;
        let h = self.linear_forward(g, params, id(ModuleKind::Ffn1), x1)?;
        let h = g.gelu(h)?;
        let f = self.linear_forward(g, params, id(ModuleKind::Ffn2), h)?;
        let g2 = self.bind(g, params, format!("layers.{l}.ln2.gain"), &block.ln2_gain, tb, None);
        let b2 = self.bind(g, params, format!("layers.{l}.ln2.bias"), &block.ln2_bias, tb, None);
        let res = g.add(x1, f)?;
        g.layer_norm(res, g2, b2, LN_EPS)
    }

    fn slot(&self, name: &str) -> Option<ParamSlot> {
        match name {
            "tok_emb" => return Some(ParamSlot::TokEmb),
            "pos_emb" => return Some(ParamSlot::PosEmb),
            "unembed" => return Some(ParamSlot::Unembed),
            "unembed_bias" => return Some(ParamSlot::UnembedBias),
            _ => {}
        }
        let rest = name.strip_prefix("layers.")?;
        let (layer, rest) = rest.split_once('.')?;
        let layer: usize = layer.parse().ok()?;
        if layer >= self.config.layers {
            return None;
        }
        let (module, field) = rest.split_once('.')?;
        if let Some(which) = match (module, field) {
            ("ln1", "gain") => Some(0),
            ("ln1", "bias") => Some(1),
            ("ln2", "gain") => Some(2),
            ("ln2", "bias") => Some(3),
            _ => None,
        } {
            return Some(ParamSlot::Ln { layer, which });
        }
        let id = ModuleId::new(layer, module.parse().ok()?);
        Some(match field {
            "bias" => ParamSlot::Bias(id),
            "weight" => ParamSlot::Weight(id),
            "s" => ParamSlot::LamdaS(id),
            "b" if matches!(self.linear(id).proj, Projection::Lamda(_)) => ParamSlot::LamdaB(id),
            "b" => ParamSlot::LoraB(id),
            "a" => ParamSlot::LoraA(id),
            _ => return None,
        })
    }

    /// Mutable access to a trainable tensor by its bound name.
    pub fn param_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        let slot = self.slot(name)?;
        match slot {
            ParamSlot::TokEmb => Some(&mut self.tok_emb),
            ParamSlot::PosEmb => Some(&mut self.pos_emb),
            ParamSlot::Unembed => Some(&mut self.unembed),
            ParamSlot::UnembedBias => Some(&mut self.unembed_bias),
            ParamSlot::Ln { layer, which } => {
                let b = &mut self.blocks[layer];
                Some(match which {
                    0 => &mut b.ln1_gain,
                    1 => &mut b.ln1_bias,
                    2 => &mut b.ln2_gain,
                    _ => &mut b.ln2_bias,
                })
            }
            ParamSlot::Bias(id) => Some(&mut self.linear_mut(id).bias),
            ParamSlot::Weight(id) => match &mut self.linear_mut(id).proj {
                Projection::Dense(w) => Some(w),
                _ => None,
            },
            ParamSlot::LamdaS(id) => match &mut self.linear_mut(id).proj {
                Projection::Lamda(s) => Some(&mut s.s),
                _ => None,
            },
            ParamSlot::LamdaB(id) => match &mut self.linear_mut(id).proj {
                Projection::Lamda(s) => Some(&mut s.b),
                _ => None,
            },
            ParamSlot::LoraA(id) => match &mut self.linear_mut(id).proj {
                Projection::Lora(s) => Some(&mut s.a),
                _ => None,
            },
            ParamSlot::LoraB(id) => match &mut self.linear_mut(id).proj {
                Projection::Lora(s) => Some(&mut s.b),
                _ => None,
            },
        }
    }

    /// Every tensor of the model under its canonical name.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out: Vec<(String, &Tensor)> = vec![
            ("tok_emb".into(), &self.tok_emb),
            ("pos_emb".into(), &self.pos_emb),
            ("unembed".into(), &self.unembed),
            ("unembed_bias".into(), &self.unembed_bias),
        ];
        for (l, b) in self.blocks.iter().enumerate() {
            out.push((format!("layers.{l}.ln1.gain"), &b.ln1_gain));
            out.push((format!("layers.{l}.ln1.bias"), &b.ln1_bias));
            out.push((format!("layers.{l}.ln2.gain"), &b.ln2_gain));
            out.push((format!("layers.{l}.ln2.bias"), &b.ln2_bias));
            for (&kind, lin) in ModuleKind::ALL.iter().zip(&b.linears) {
                let p = ModuleId::new(l, kind).prefix();
                out.push((format!("{p}.bias"), &lin.bias));
                match &lin.proj {
                    Projection::Dense(w) => out.push((format!("{p}.weight"), w)),
                    Projection::Lamda(s) => {
                        out.push((format!("{p}.w_res"), s.w_res()));
                        out.push((format!("{p}.a"), s.a()));
                        out.push((format!("{p}.s"), &s.s));
                        out.push((format!("{p}.b"), &s.b));
                    }
                    Projection::Lora(s) => {
                        out.push((format!("{p}.weight"), s.w()));
                        out.push((format!("{p}.a"), &s.a));
                        out.push((format!("{p}.b"), &s.b));
                    }
                }
            }
        }
        out
    }

    /// Tensors no adapter method may change.
    pub fn frozen_tensors(&self) -> Vec<(String, Tensor)> {
        let mut out: Vec<(String, Tensor)> = self
            .named_tensors()
            .into_iter()
            .filter(|(n, _)| !(n.ends_with(".s") || n.ends_with(".b") || n.ends_with(".a")))
            .map(|(n, t)| (n, t.clone()))
            .collect();
        for (l, b) in self.blocks.iter().enumerate() {
            for (&kind, lin) in ModuleKind::ALL.iter().zip(&b.linears) {
                let p = ModuleId::new(l, kind).prefix();
                if let Projection::Lamda(s) = &lin.proj {
                    out.push((format!("{p}.a"), s.a().clone()));
                    let r = s.trainable_rows();
                    let frozen = s.b.slice_rows(r, s.rank() - r);
                    if let Ok(fb) = frozen {
                        out.push((format!("{p}.b[{r}..]"), fb));
                    }
                }
            }
        }
        out
    }

    /// Adapter scope names whose retained activations are instrumented.
    pub fn adapter_scopes(&self) -> Vec<String> {
        self.module_ids()
            .into_iter()
            .filter(|&id| !matches!(self.linear(id).proj, Projection::Dense(_)))
            .map(|id| id.prefix())
            .collect()
    }
}

/// Multi-head scaled dot-product attention over `batch` stacked
/// sequences, given projected queries, keys and values. Returns the
/// concatenated head outputs (before the output projection).
pub fn attention(g: &mut Graph, q: Var, k: Var, v: Var, batch: usize, heads: usize, causal: bool) -> Result<Var> {
    let rows = g.value(q).rows();
    let d = g.value(q).cols();
    if heads == 0 || d % heads != 0 || rows % batch != 0 {
        return Err(Error::shape("attention", g.value(q).shape(), &[batch, heads]));
    }
    let n = rows / batch;
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut seqs = Vec::with_capacity(batch);
    for s in 0..batch {
        let (qs, ks, vs) = (
            g.slice_rows(q, s * n, n)?,
            g.slice_rows(k, s * n, n)?,
            g.slice_rows(v, s * n, n)?,
        );
        let mut outs = Vec::with_capacity(heads);
        for h in 0..heads {
            let qh = g.slice_cols(qs, h * dh, dh)?;
            let kh = g.slice_cols(ks, h * dh, dh)?;
            let vh = g.slice_cols(vs, h * dh, dh)?;
            let kt = g.transpose(kh)?;
            let scores = g.matmul(qh, kt)?;
            let scores = g.scale(scores, scale)?;
            let p = g.softmax_rows(scores, causal)?;
            outs.push(g.matmul(p, vh)?);
        }
        seqs.push(if heads == 1 { outs[0] } else { g.concat_cols(&outs)? });
    }
    if batch == 1 {
        Ok(seqs[0])
    } else {
        g.concat_rows(&seqs)
    }
}

/// Self-attention sub-layer of block `layer`: projections, attention and
/// output projection, without the residual.
pub fn mhsa_forward(model: &ToyModel, g: &mut Graph, layer: usize, x: Var, batch: usize) -> Result<Var> {
    let mut params = Vec::new();
    let id = |k| ModuleId::new(layer, k);
    let q = model.linear_forward(g, &mut params, id(ModuleKind::Q), x)?;
    let k = model.linear_forward(g, &mut params, id(ModuleKind::K), x)?;
    let v = model.linear_forward(g, &mut params, id(ModuleKind::V), x)?;
    let heads = attention(g, q, k, v, batch, model.config.heads, model.config.causal)?;
    model.linear_forward(g, &mut params, id(ModuleKind::O), heads)
}

/// Full post-norm block `layer` applied to `x`; also returns the bound
/// trainable tensors.
pub fn block_forward(model: &ToyModel, g: &mut Graph, layer: usize, x: Var, batch: usize) -> Result<(Var, Vec<BoundParam>)> {
    let mut params = Vec::new();
    let y = model.block_forward(g, &mut params, layer, &model.blocks[layer], x, batch)?;
    Ok((y, params))
}
