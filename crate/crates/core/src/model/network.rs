use std::collections::{BTreeMap, HashMap};
use std::rc::Rc;

use crate::tensor::{Graph, SeededRng, Tensor, Var};

use super::embed::{patch_index, pos_embed_2d, timestep_features};
use super::modulation::{ModulationTuple, ALPHA1, ALPHA2, BETA1, BETA2, GAMMA1, GAMMA2};
use super::params::{init_tensor, param_specs, weight_name, InitScheme};
use super::{ModelConfig, ModelError, Result, Variant};

const LN_EPS: f64 = 1e-6;

/// Text-encoder output for one caption.
#[derive(Clone, Debug, PartialEq)]
pub struct TextCondition {
    tokens: Tensor,
    mask: Vec<bool>,
    null: bool,
}

impl TextCondition {
    pub fn new(tokens: Tensor, mask: Vec<bool>) -> Result<Self> {
        let [n, _] = *tokens.shape() else {
            return Err(ModelError::Shape(format!(
                "text tokens must be [n_tok, text_dim], got {:?}",
                tokens.shape()
            )));
        };
        if mask.len() != n {
            return Err(ModelError::Shape(format!(
                "mask length {} for {n} tokens",
                mask.len()
            )));
        }
        if !mask.iter().any(|&m| m) {
            return Err(ModelError::Contract(
                "text condition has no unmasked token".into(),
            ));
        }
        Ok(Self {
            tokens,
            mask,
            null: false,
        })
    }

    /// Placeholder for the model's learned null token (unconditional branch).
    pub fn null(text_dim: usize) -> Self {
        Self {
            tokens: Tensor::zeros(&[1, text_dim]),
            mask: vec![true],
            null: true,
        }
    }

    pub fn tokens(&self) -> &Tensor {
        &self.tokens
    }

    pub fn mask(&self) -> &[bool] {
        &self.mask
    }

    pub fn len(&self) -> usize {
        self.mask.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mask.is_empty()
    }

    pub fn is_null(&self) -> bool {
        self.null
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Condition {
    /// Class label for the class-conditional variant; `None` drops the class
    /// term entirely.
    Class(Option<usize>),
    Text(TextCondition),
}

impl Condition {
    /// The unconditional input for a variant.
    pub fn null_for(config: &ModelConfig) -> Self {
        if config.variant.is_text_conditioned() {
            Condition::Text(TextCondition::null(config.text_dim))
        } else {
            Condition::Class(None)
        }
    }

    pub fn is_null(&self) -> bool {
        match self {
            Condition::Class(c) => c.is_none(),
            Condition::Text(t) => t.is_null(),
        }
    }
}

/// Weights plus architecture. Immutable during a forward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    config: ModelConfig,
    params: BTreeMap<String, Tensor>,
}

impl Model {
    pub fn new(config: ModelConfig, scheme: InitScheme, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = SeededRng::new(seed, 0);
        let params = param_specs(&config)
            .iter()
            .map(|spec| (spec.name.clone(), init_tensor(spec, scheme, &mut rng)))
            .collect();
        Ok(Self { config, params })
    }

    /// Assemble from named weights; the set of names and shapes must match the
    /// configuration exactly.
    pub fn from_params(config: ModelConfig, params: BTreeMap<String, Tensor>) -> Result<Self> {
        config.validate()?;
        let specs = param_specs(&config);
        for spec in &specs {
            match params.get(&spec.name) {
                None => return Err(ModelError::MissingParam(spec.name.clone())),
                Some(t) if t.shape() != spec.shape.as_slice() => {
                    return Err(ModelError::Shape(format!(
                        "{}: expected {:?}, got {:?}",
                        spec.name,
                        spec.shape,
                        t.shape()
                    )))
                }
                Some(_) => {}
            }
        }
        if params.len() != specs.len() {
            let known: std::collections::HashSet<_> =
                specs.iter().map(|s| s.name.as_str()).collect();
            let extra = params
                .keys()
                .find(|k| !known.contains(k.as_str()))
                .cloned()
                .unwrap_or_default();
            return Err(ModelError::UnexpectedParam(extra));
        }
        if let Some((name, _)) = params.iter().find(|(_, t)| !t.is_finite()) {
            return Err(ModelError::Contract(format!(
                "{name} holds non-finite values"
            )));
        }
        Ok(Self { config, params })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &BTreeMap<String, Tensor> {
        &self.params
    }

    /// Weights for in-place optimizer updates; names and shapes must not change.
    pub(crate) fn params_mut(&mut self) -> &mut BTreeMap<String, Tensor> {
        &mut self.params
    }

    pub fn into_params(self) -> BTreeMap<String, Tensor> {
        self.params
    }

    pub fn param(&self, name: &str) -> Option<&Tensor> {
        self.params.get(name)
    }

    pub fn set_param(&mut self, name: &str, value: Tensor) -> Result<()> {
        let slot = self
            .params
            .get_mut(name)
            .ok_or_else(|| ModelError::MissingParam(name.to_string()))?;
        if slot.shape() != value.shape() {
            return Err(ModelError::Shape(format!(
                "{name}: expected {:?}, got {:?}",
                slot.shape(),
                value.shape()
            )));
        }
        *slot = value;
        Ok(())
    }

    pub fn num_params(&self) -> usize {
        self.params.values().map(Tensor::numel).sum()
    }

    /// Register every weight on `g`. Trainable weights become gradient leaves.
    pub fn bind(&self, g: &mut Graph, trainable: bool) -> Bound<'_> {
        let vars = self
            .params
            .iter()
            .map(|(name, t)| {
                let v = if trainable {
                    g.param(t.clone())
                } else {
                    g.constant(t.clone())
                };
                (name.clone(), v)
            })
            .collect();
        Bound { model: self, vars }
    }

    /// Noise prediction for one latent, no gradient tracking.
    pub fn forward(&self, latent: &Tensor, t: f64, cond: &Condition) -> Result<Tensor> {
        let mut g = Graph::new();
        let bound = self.bind(&mut g, false);
        let out = bound.forward(&mut g, latent, t, cond)?;
        Ok(g.value(out).clone())
    }

    /// `S⁽ⁱ⁾` for every block at timestep `t`.
    pub fn block_modulations(&self, t: f64, cond: &Condition) -> Result<Vec<ModulationTuple>> {
        let mut g = Graph::new();
        let bound = self.bind(&mut g, false);
        let c = bound.conditioning(&mut g, t, cond)?;
        c.blocks
            .iter()
            .map(|&v| ModulationTuple::unpack(g.value(v).data(), self.config.hidden_size))
            .collect()
    }

    /// `[shift | scale]` of the final layer at timestep `t`.
    pub fn final_modulation(&self, t: f64, cond: &Condition) -> Result<Vec<f64>> {
        let mut g = Graph::new();
        let bound = self.bind(&mut g, false);
        let c = bound.conditioning(&mut g, t, cond)?;
        Ok(g.value(c.final_mod).data().to_vec())
    }
}

/// Conditioning signals derived once per forward pass.
pub struct Conditioning {
    /// Time embedding `[1, hidden]`.
    pub t_emb: Var,
    /// Shared modulation `S̄` (adaLN-single only), `[6·hidden]`.
    pub global: Option<Var>,
    /// Packed `S⁽ⁱ⁾` per block, `[6·hidden]` each.
    pub blocks: Vec<Var>,
    /// `[shift | scale]` for the final layer, `[2·hidden]`.
    pub final_mod: Var,
    /// Projected caption tokens `[n_tok, hidden]` with their mask.
    pub text: Option<(Var, Vec<bool>)>,
}

/// The six modulation components of one block as graph nodes.
#[derive(Clone, Copy, Debug)]
pub struct BlockModulation {
    pub beta1: Var,
    pub beta2: Var,
    pub gamma1: Var,
    pub gamma2: Var,
    pub alpha1: Var,
    pub alpha2: Var,
}

/// A model whose weights live on a particular graph.
pub struct Bound<'m> {
    model: &'m Model,
    vars: HashMap<String, Var>,
}

impl<'m> Bound<'m> {
    pub fn model(&self) -> &'m Model {
        self.model
    }

    pub fn config(&self) -> &'m ModelConfig {
        &self.model.config
    }

    pub fn var(&self, name: &str) -> Option<Var> {
        self.vars.get(name).copied()
    }

    fn w(&self, module: &str, index: usize, role: &str) -> Var {
        self.vars[&weight_name(module, index, role)]
    }

    fn linear(
        &self,
        g: &mut Graph,
        x: Var,
        module: &str,
        index: usize,
        prefix: &str,
    ) -> Result<Var> {
        let w = self.w(module, index, &format!("{prefix}_w"));
        let b = self.w(module, index, &format!("{prefix}_b"));
        Ok(g.linear(x, w, b)?)
    }

    /// Gradients of the last backward pass, keyed by weight name.
    pub fn grads(&self, g: &Graph) -> BTreeMap<String, Tensor> {
        self.vars
            .iter()
            .map(|(name, &v)| {
                let grad = g
                    .grad(v)
                    .unwrap_or_else(|| Tensor::zeros(self.model.params[name].shape()));
                (name.clone(), grad)
            })
            .collect()
    }

    /// Frequency features followed by the two-layer SiLU MLP, `[1, hidden]`.
    pub fn time_embedding(&self, g: &mut Graph, t: f64) -> Result<Var> {
        let freq = timestep_features(t, self.config().time_embed_freq_dim)?;
        let freq = g.constant(freq.reshape(&[1, self.config().time_embed_freq_dim])?);
        let h = self.linear(g, freq, "t_embedder", 0, "fc1")?;
        let h = g.silu(h)?;
        self.linear(g, h, "t_embedder", 0, "fc2")
    }

    /// `S̄ = f(t)`: SiLU then the shared `hidden → 6·hidden` projection.
    pub fn global_modulation(&self, g: &mut Graph, t_emb: Var) -> Result<Var> {
        if self.config().variant != Variant::T2iAdalnSingle {
            return Err(ModelError::Contract(format!(
                "global modulation is only defined for t2i_adaln_single, not {}",
                self.config().variant
            )));
        }
        let h = g.silu(t_emb)?;
        let s = self.linear(g, h, "t_block", 0, "mod")?;
        Ok(g.reshape(s, &[6 * self.config().hidden_size])?)
    }

    /// `S⁽ⁱ⁾ = S̄ + E⁽ⁱ⁾`.
    pub fn block_modulation(&self, g: &mut Graph, global: Var, index: usize) -> Result<Var> {
        if index >= self.config().depth {
            return Err(ModelError::Contract(format!(
                "block index {index} out of range for depth {}",
                self.config().depth
            )));
        }
        if self.config().variant != Variant::T2iAdalnSingle {
            return Err(ModelError::Contract(
                "per-block offsets need t2i_adaln_single".into(),
            ));
        }
        let table = self.w("blocks", index, "mod_table");
        Ok(g.add(global, table)?)
    }

    /// Caption tokens through the projection MLP; the null condition swaps in
    /// the learned null token.
    pub fn caption_tokens(&self, g: &mut Graph, text: &TextCondition) -> Result<Var> {
        let cfg = self.config();
        if text.tokens().shape()[1] != cfg.text_dim {
            return Err(ModelError::Shape(format!(
                "text width {} does not match text_dim {}",
                text.tokens().shape()[1],
                cfg.text_dim
            )));
        }
        if text.len() > cfg.max_text_tokens {
            return Err(ModelError::Contract(format!(
                "{} text tokens exceed the limit of {}",
                text.len(),
                cfg.max_text_tokens
            )));
        }
        let y = if text.is_null() {
            self.w("caption", 0, "null_token")
        } else {
            g.constant(text.tokens().clone())
        };
        let h = self.linear(g, y, "caption", 0, "fc1")?;
        let h = g.gelu(h)?;
        self.linear(g, h, "caption", 0, "fc2")
    }

    fn packed_to_row(&self, g: &mut Graph, packed: Var, width: usize) -> Result<Var> {
        Ok(g.reshape(packed, &[width])?)
    }

    pub fn conditioning(&self, g: &mut Graph, t: f64, cond: &Condition) -> Result<Conditioning> {
        let cfg = self.config();
        let h = cfg.hidden_size;
        let t_emb = self.time_embedding(g, t)?;

        let text = match (cfg.variant, cond) {
            (Variant::DitClassConditional, Condition::Class(_)) => None,
            (Variant::DitClassConditional, Condition::Text(_)) => {
                return Err(ModelError::Contract(
                    "class-conditional model given a text condition".into(),
                ))
            }
            (_, Condition::Text(text)) => {
                Some((self.caption_tokens(g, text)?, text.mask().to_vec()))
            }
            (_, Condition::Class(_)) => {
                return Err(ModelError::Contract(format!(
                    "{} model given a class condition",
                    cfg.variant
                )))
            }
        };

        match cfg.variant {
            Variant::T2iAdalnSingle => {
                let global = self.global_modulation(g, t_emb)?;
                let blocks = (0..cfg.depth)
                    .map(|i| self.block_modulation(g, global, i))
                    .collect::<Result<Vec<_>>>()?;
                let t_row = g.reshape(t_emb, &[h])?;
                let both = g.concat_last(&[t_row, t_row])?;
                let table = self.w("final", 0, "mod_table");
                let final_mod = g.add(both, table)?;
                Ok(Conditioning {
                    t_emb,
                    global: Some(global),
                    blocks,
                    final_mod,
                    text,
                })
            }
            Variant::DitClassConditional | Variant::T2iAdalnPerBlock => {
                let c = match (cond, &text) {
                    (Condition::Class(Some(label)), _) => {
                        if *label >= cfg.num_classes {
                            return Err(ModelError::Contract(format!(
                                "class {label} out of range for {} classes",
                                cfg.num_classes
                            )));
                        }
                        let table = self.w("y_embedder", 0, "table");
                        let row =
                            g.gather(table, (label * h..(label + 1) * h).collect(), &[1, h])?;
                        g.add(t_emb, row)?
                    }
                    (Condition::Class(None), _) => t_emb,
                    (Condition::Text(_), Some((y, mask))) => {
                        let n = mask.len();
                        let count = mask.iter().filter(|&&m| m).count() as f64;
                        let weights: Vec<f64> = mask
                            .iter()
                            .map(|&m| if m { 1.0 / count } else { 0.0 })
                            .collect();
                        let pool = g.constant(Tensor::new(&[1, n], weights)?);
                        let pooled = g.matmul(pool, *y)?;
                        g.add(t_emb, pooled)?
                    }
                    (Condition::Text(_), None) => unreachable!("text path resolved above"),
                };
                let act = g.silu(c)?;
                let blocks = (0..cfg.depth)
                    .map(|i| {
                        let m = self.linear(g, act, "blocks", i, "adaln")?;
                        self.packed_to_row(g, m, 6 * h)
                    })
                    .collect::<Result<Vec<_>>>()?;
                let fm = self.linear(g, act, "final", 0, "adaln")?;
                let final_mod = self.packed_to_row(g, fm, 2 * h)?;
                Ok(Conditioning {
                    t_emb,
                    global: None,
                    blocks,
                    final_mod,
                    text,
                })
            }
        }
    }

    pub fn split_modulation(&self, g: &mut Graph, packed: Var) -> Result<BlockModulation> {
        let h = self.config().hidden_size;
        let mut part = |k: usize| g.slice_last(packed, k * h, h);
        Ok(BlockModulation {
            beta1: part(BETA1)?,
            beta2: part(BETA2)?,
            gamma1: part(GAMMA1)?,
            gamma2: part(GAMMA2)?,
            alpha1: part(ALPHA1)?,
            alpha2: part(ALPHA2)?,
        })
    }

    /// Multi-head scaled dot-product attention; `mask` hides key columns.
    fn attention(
        &self,
        g: &mut Graph,
        q: Var,
        k: Var,
        v: Var,
        mask: Option<&[bool]>,
    ) -> Result<Var> {
        let cfg = self.config();
        let dh = cfg.head_dim();
        let scale = 1.0 / (dh as f64).sqrt();
        let mut heads = Vec::with_capacity(cfg.num_heads);
        for head in 0..cfg.num_heads {
            let qh = g.slice_last(q, head * dh, dh)?;
            let kh = g.slice_last(k, head * dh, dh)?;
            let vh = g.slice_last(v, head * dh, dh)?;
            let kt = g.transpose(kh)?;
            let scores = g.matmul(qh, kt)?;
            let scores = g.scale(scores, scale)?;
            let weights = g.softmax(scores, mask)?;
            heads.push(g.matmul(weights, vh)?);
        }
        Ok(g.concat_last(&heads)?)
    }

    /// `x + α₁ ⊙ Attn(LN(x)·(1+γ₁)+β₁)`.
    pub fn self_attention(
        &self,
        g: &mut Graph,
        x: Var,
        index: usize,
        m: &BlockModulation,
    ) -> Result<Var> {
        let h = self.config().hidden_size;
        let n = g.layer_norm(x, LN_EPS)?;
        let n = g.scale_shift(n, m.gamma1, m.beta1)?;
        let qkv = self.linear(g, n, "blocks", index, "attn_qkv")?;
        let q = g.slice_last(qkv, 0, h)?;
        let k = g.slice_last(qkv, h, h)?;
        let v = g.slice_last(qkv, 2 * h, h)?;
        let a = self.attention(g, q, k, v, None)?;
        let out = self.linear(g, a, "blocks", index, "attn_out")?;
        let gated = g.gate_row(out, m.alpha1)?;
        Ok(g.add(x, gated)?)
    }

    /// `x + CrossAttn(LN(x), text)`; no modulation on this branch.
    pub fn cross_attention(
        &self,
        g: &mut Graph,
        x: Var,
        index: usize,
        text: Var,
        mask: &[bool],
    ) -> Result<Var> {
        let h = self.config().hidden_size;
        if mask.is_empty() || !mask.iter().any(|&m| m) {
            return Err(ModelError::Contract(
                "cross-attention needs at least one text token".into(),
            ));
        }
        let n = g.layer_norm(x, LN_EPS)?;
        let q = self.linear(g, n, "blocks", index, "cross_q")?;
        let kv = self.linear(g, text, "blocks", index, "cross_kv")?;
        let k = g.slice_last(kv, 0, h)?;
        let v = g.slice_last(kv, h, h)?;
        let a = self.attention(g, q, k, v, Some(mask))?;
        let out = self.linear(g, a, "blocks", index, "cross_out")?;
        Ok(g.add(x, out)?)
    }

    /// `x + α₂ ⊙ MLP(LN(x)·(1+γ₂)+β₂)`, GELU between the two projections.
    pub fn mlp(&self, g: &mut Graph, x: Var, index: usize, m: &BlockModulation) -> Result<Var> {
        let n = g.layer_norm(x, LN_EPS)?;
        let n = g.scale_shift(n, m.gamma2, m.beta2)?;
        let h = self.linear(g, n, "blocks", index, "mlp_fc1")?;
        let h = g.gelu(h)?;
        let out = self.linear(g, h, "blocks", index, "mlp_fc2")?;
        let gated = g.gate_row(out, m.alpha2)?;
        Ok(g.add(x, gated)?)
    }

    /// Self-attention, then cross-attention (text variants), then MLP.
    pub fn block(
        &self,
        g: &mut Graph,
        x: Var,
        index: usize,
        modulation: Var,
        text: Option<(Var, &[bool])>,
    ) -> Result<Var> {
        let m = self.split_modulation(g, modulation)?;
        let x = self.self_attention(g, x, index, &m)?;
        let x = match text {
            Some((y, mask)) => self.cross_attention(g, x, index, y, mask)?,
            None => x,
        };
        self.mlp(g, x, index, &m)
    }

    /// Patch embedding plus the positional embedding of the actual grid.
    pub fn embed_latent(&self, g: &mut Graph, latent: &Tensor) -> Result<Var> {
        let cfg = self.config();
        let (c, hh, ww) = latent_dims(latent, cfg)?;
        let p = cfg.patch_size;
        let tokens = super::embed::patchify(latent, p)?;
        let x = g.constant(tokens);
        let x = self.linear(g, x, "patch_embed", 0, "proj")?;
        debug_assert_eq!(c, cfg.latent_channels);
        let pos = g.constant(pos_embed_2d(cfg.hidden_size, hh / p, ww / p, cfg.base_grid));
        Ok(g.add(x, pos)?)
    }

    /// Predicted noise `ε̂` with the latent's shape.
    pub fn forward(&self, g: &mut Graph, latent: &Tensor, t: f64, cond: &Condition) -> Result<Var> {
        let cfg = self.config();
        let (c, hh, ww) = latent_dims(latent, cfg)?;
        let p = cfg.patch_size;
        let mut x = self.embed_latent(g, latent)?;
        let cd = self.conditioning(g, t, cond)?;
        for (i, &m) in cd.blocks.iter().enumerate() {
            let text = cd.text.as_ref().map(|(y, mask)| (*y, mask.as_slice()));
            x = self.block(g, x, i, m, text)?;
        }

        let h = cfg.hidden_size;
        let shift = g.slice_last(cd.final_mod, 0, h)?;
        let scale = g.slice_last(cd.final_mod, h, h)?;
        let n = g.layer_norm(x, LN_EPS)?;
        let n = g.scale_shift(n, scale, shift)?;
        let out = self.linear(g, n, "final", 0, "linear")?;

        // token layout back to [C, H, W]
        let index = patch_index(c, hh, ww, p)?;
        let mut inverse = vec![0; index.len()];
        for (src, &dst) in index.iter().enumerate() {
            inverse[dst] = src;
        }
        let inverse: Rc<[usize]> = inverse.into();
        Ok(g.gather(out, inverse, &[c, hh, ww])?)
    }
}

fn latent_dims(latent: &Tensor, cfg: &ModelConfig) -> Result<(usize, usize, usize)> {
    match *latent.shape() {
        [c, h, w] if c == cfg.latent_channels => {
            let p = cfg.patch_size;
            if h % p != 0 || w % p != 0 {
                return Err(ModelError::Shape(format!(
                    "latent {h}x{w} is not divisible by patch size {p}"
                )));
            }
            Ok((c, h, w))
        }
        ref s => Err(ModelError::Shape(format!(
            "expected a [{}, H, W] latent, got {s:?}",
            cfg.latent_channels
        ))),
    }
}
