//! Toy decoder-only transformer with LLaMA-style blocks.
//!
//! Each block is pre-norm (RMS) causal multi-head attention with Q/K/V/O
//! projections followed by a pre-norm gated MLP `D·(silu(G·x) ⊙ U·x)`.
//! Positions use learned absolute embeddings. All base weights are frozen;
//! only attached adapters train.

use std::fs;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::adapters::checkpoint::{read_json_block, write_json_block};
use crate::adapters::{
    attach_group, AdapterCheckpoint, AdapterConfig, AdapterGroup, AdapterManifest, AdapterVariant, SiteAdapter,
};
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::param::{ParamId, ParamStore};
use crate::rng::Rng;
use crate::site::{Site, TargetSet};
use crate::tensor::{read_u64, Tensor};

pub const MODEL_MAGIC: &[u8; 4] = b"DLMC";
pub const MODEL_FORMAT_VERSION: u32 = 1;
const RMS_EPS: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub vocab_size: usize,
    pub max_seq_len: usize,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            n_layers: 2,
            d_model: 32,
            n_heads: 4,
            d_ff: 64,
            vocab_size: 16,
            max_seq_len: 16,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("n_layers", self.n_layers),
            ("d_model", self.d_model),
            ("n_heads", self.n_heads),
            ("d_ff", self.d_ff),
            ("vocab_size", self.vocab_size),
            ("max_seq_len", self.max_seq_len),
        ];
        if let Some((name, _)) = dims.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be >= 1")));
        }
        if self.d_model % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    /// `(k, d)`: input and output width of a projection site.
    pub fn site_shape(&self, site: Site) -> (usize, usize) {
        let (m, f) = (self.d_model, self.d_ff);
        match site {
            Site::Q | Site::K | Site::V | Site::O => (m, m),
            Site::G | Site::U => (m, f),
            Site::D => (f, m),
        }
    }
}

#[derive(Clone, Debug)]
struct Block {
    attn_norm: ParamId,
    mlp_norm: ParamId,
    /// Indexed by `Site as usize`.
    proj: [ParamId; 7],
}

/// Inputs and outputs of every projection site from one forward pass.
#[derive(Clone, Debug, Default)]
pub struct Trace {
    pub records: Vec<SiteRecord>,
}

#[derive(Clone, Debug)]
pub struct SiteRecord {
    pub layer: usize,
    pub site: Site,
    pub input: Tensor,
    pub output: Tensor,
}

impl Trace {
    pub fn get(&self, layer: usize, site: Site) -> Option<&SiteRecord> {
        self.records.iter().find(|r| r.layer == layer && r.site == site)
    }
}

#[derive(Clone, Debug)]
pub struct AdaptedModel {
    config: ModelConfig,
    store: ParamStore,
    tok_emb: ParamId,
    pos_emb: ParamId,
    blocks: Vec<Block>,
    final_norm: ParamId,
    lm_head: ParamId,
    base_ids: Vec<ParamId>,
    groups: Vec<AdapterGroup>,
}

impl AdaptedModel {
    /// Builds the frozen base model, deterministically from `config.seed`.
    pub fn build(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = Rng::derive(config.seed, 0);
        let mut store = ParamStore::new();
        let (m, v) = (config.d_model, config.vocab_size);

        let tok_emb = store.add("tok_emb", rng.uniform_tensor(&[v, m], -1.0, 1.0), false);
        let pos_emb = store.add("pos_emb", rng.uniform_tensor(&[config.max_seq_len, m], -1.0, 1.0), false);
        let mut blocks = Vec::with_capacity(config.n_layers);
        for l in 0..config.n_layers {
            let attn_norm = store.add(format!("layer{l}.attn_norm"), Tensor::ones(&[m]), false);
            let mlp_norm = store.add(format!("layer{l}.mlp_norm"), Tensor::ones(&[m]), false);
            let proj = Site::ALL.map(|site| {
                let (k, d) = config.site_shape(site);
                let bound = (3.0 / k as f64).sqrt();
                store.add(format!("layer{l}.{site}"), rng.uniform_tensor(&[d, k], -bound, bound), false)
            });
            blocks.push(Block {
                attn_norm,
                mlp_norm,
                proj,
            });
        }
        let final_norm = store.add("final_norm", Tensor::ones(&[m]), false);
        let bound = (3.0 / m as f64).sqrt();
        let lm_head = store.add("lm_head", rng.uniform_tensor(&[v, m], -bound, bound), false);
        let base_ids = store.iter().map(|(id, _)| id).collect();
        Ok(Self {
            config,
            store,
            tok_emb,
            pos_emb,
            blocks,
            final_norm,
            lm_head,
            base_ids,
            groups: Vec::new(),
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn groups(&self) -> &[AdapterGroup] {
        &self.groups
    }

    pub fn base_param_ids(&self) -> &[ParamId] {
        &self.base_ids
    }

    pub fn base_param_count(&self) -> usize {
        self.base_ids.iter().map(|&id| self.store.value(id).len()).sum()
    }

    /// The frozen projection weight `W0[d×k]` of a site.
    pub fn projection(&self, layer: usize, site: Site) -> ParamId {
        self.blocks[layer].proj[site as usize]
    }

    pub fn targets(&self) -> TargetSet {
        self.groups.iter().map(|g| g.site).collect()
    }

    pub fn group(&self, site: Site) -> Option<&AdapterGroup> {
        self.groups.iter().find(|g| g.site == site)
    }

    pub fn adapter_at(&self, layer: usize, site: Site) -> Option<&SiteAdapter> {
        self.group(site).map(|g| &g.adapters[layer])
    }

    /// Attaches one adapter group per target site. A second call with
    /// disjoint targets builds hybrid configurations (e.g. LoRA on QKV and
    /// DenseLoRA on UD).
    pub fn attach(
        &mut self,
        variant: AdapterVariant,
        targets: TargetSet,
        config: &AdapterConfig,
        rng: &mut Rng,
    ) -> Result<&[AdapterGroup]> {
        if targets.is_empty() {
            return Err(Error::Config("target set is empty".into()));
        }
        if targets.intersects(self.targets()) {
            return Err(Error::Config(format!(
                "targets {targets} overlap already adapted sites {}",
                self.targets()
            )));
        }
        for site in targets.iter() {
            let shape = self.config.site_shape(site);
            let group = attach_group(&mut self.store, site, self.config.n_layers, shape, variant, config, rng)?;
            self.groups.push(group);
        }
        self.groups.sort_by_key(|g| g.site);
        debug_assert!(self.base_ids.iter().all(|&id| !self.store.is_trainable(id)));
        Ok(&self.groups)
    }

    /// Logits `[n × vocab]` for one token sequence. Passing a dropout stream
    /// selects training mode; `None` is the deterministic eval mode.
    pub fn forward(&self, g: &mut Graph, tokens: &[usize], dropout_rng: Option<&mut Rng>) -> Result<Var> {
        self.forward_inner(g, tokens, dropout_rng, None)
    }

    /// Eval-mode logits as a plain tensor.
    pub fn logits(&self, tokens: &[usize]) -> Result<Tensor> {
        let mut g = Graph::new();
        let out = self.forward(&mut g, tokens, None)?;
        Ok(g.value(out).clone())
    }

    /// Eval-mode forward that also records every projection site's input and output.
    pub fn forward_traced(&self, tokens: &[usize]) -> Result<(Tensor, Trace)> {
        let mut g = Graph::new();
        let mut trace = Trace::default();
        let out = self.forward_inner(&mut g, tokens, None, Some(&mut trace))?;
        Ok((g.value(out).clone(), trace))
    }

    fn check_tokens(&self, tokens: &[usize]) -> Result<()> {
        if tokens.is_empty() {
            return Err(Error::Input("empty token sequence".into()));
        }
        if tokens.len() > self.config.max_seq_len {
            return Err(Error::Input(format!(
                "sequence length {} exceeds max_seq_len {}",
                tokens.len(),
                self.config.max_seq_len
            )));
        }
        if let Some(&t) = tokens.iter().find(|&&t| t >= self.config.vocab_size) {
            return Err(Error::Input(format!(
                "token {t} out of range for vocab {}",
                self.config.vocab_size
            )));
        }
        Ok(())
    }

    fn forward_inner(
        &self,
        g: &mut Graph,
        tokens: &[usize],
        mut dropout_rng: Option<&mut Rng>,
        mut trace: Option<&mut Trace>,
    ) -> Result<Var> {
        self.check_tokens(tokens)?;
        let n = tokens.len();
        let s = &self.store;
        let positions: Vec<usize> = (0..n).collect();
        let tok = g.param(s, self.tok_emb);
        let tok = g.gather(tok, tokens)?;
        let pos = g.param(s, self.pos_emb);
        let pos = g.gather(pos, &positions)?;
        let mut h = g.add(tok, pos)?;

        let hd = self.config.head_dim();
        let inv_sqrt = 1.0 / (hd as f64).sqrt();
        for (l, block) in self.blocks.iter().enumerate() {
            let mut site = |g: &mut Graph, site: Site, x: Var| -> Result<Var> {
                let w = g.param(s, block.proj[site as usize]);
                let base = g.linear(x, w)?;
                let out = match self.adapter_at(l, site) {
                    Some(a) => a.apply(g, s, x, base, dropout_rng.as_deref_mut())?,
                    None => base,
                };
                if let Some(t) = trace.as_deref_mut() {
                    t.records.push(SiteRecord {
                        layer: l,
                        site,
                        input: g.value(x).clone(),
                        output: g.value(out).clone(),
                    });
                }
                Ok(out)
            };

            let a = rms_norm_gain(g, s, h, block.attn_norm)?;
            let q = site(g, Site::Q, a)?;
            let k = site(g, Site::K, a)?;
            let v = site(g, Site::V, a)?;
            let mut heads = Vec::with_capacity(self.config.n_heads);
            for head in 0..self.config.n_heads {
                let qh = g.slice_cols(q, head * hd, hd)?;
                let kh = g.slice_cols(k, head * hd, hd)?;
                let vh = g.slice_cols(v, head * hd, hd)?;
                let scores = g.linear(qh, kh)?;
                let scores = g.scale(scores, inv_sqrt);
                let p = g.causal_softmax(scores)?;
                heads.push(g.matmul(p, vh)?);
            }
            let attn = g.concat_cols(&heads)?;
            let o = site(g, Site::O, attn)?;
            h = g.add(h, o)?;

            let m = rms_norm_gain(g, s, h, block.mlp_norm)?;
            let gate = site(g, Site::G, m)?;
            let up = site(g, Site::U, m)?;
            let gate = g.silu(gate);
            let act = g.mul(gate, up)?;
            let down = site(g, Site::D, act)?;
            h = g.add(h, down)?;
        }
        let h = rms_norm_gain(g, s, h, self.final_norm)?;
        let head = g.param(s, self.lm_head);
        g.linear(h, head)
    }

    /// Adapter parameters at their attach-time snapshot (`initial`) or current value.
    pub fn adapter_checkpoint(&self, initial: bool) -> AdapterCheckpoint {
        AdapterCheckpoint::capture(&self.store, &self.groups, initial)
    }

    pub fn manifest(&self) -> ModelManifest {
        ModelManifest {
            config: self.config.clone(),
            targets: self.targets(),
            adapters: AdapterManifest::from_groups(&self.groups),
        }
    }

    /// Writes `"DLMC" | u32 version | manifest JSON | base tensors | adapter container`.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = BufWriter::new(fs::File::create(path)?);
        w.write_all(MODEL_MAGIC)?;
        w.write_all(&MODEL_FORMAT_VERSION.to_le_bytes())?;
        write_json_block(&mut w, &self.manifest())?;
        w.write_all(&(self.base_ids.len() as u64).to_le_bytes())?;
        for &id in &self.base_ids {
            write_json_block(&mut w, &self.store.get(id).name())?;
            self.store.value(id).write_to(&mut w)?;
        }
        self.adapter_checkpoint(false).write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    /// Restores a model saved with [`AdaptedModel::save`]. Attach-time
    /// snapshots of the restored adapters equal their loaded values.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let mut r = BufReader::new(fs::File::open(path)?);
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != MODEL_MAGIC {
            return Err(Error::Format(format!("bad model checkpoint magic {magic:?}")));
        }
        let mut version = [0u8; 4];
        r.read_exact(&mut version)?;
        if u32::from_le_bytes(version) != MODEL_FORMAT_VERSION {
            return Err(Error::Format("unsupported model checkpoint version".into()));
        }
        let manifest: ModelManifest = read_json_block(&mut r)?;
        let mut model = AdaptedModel::build(manifest.config.clone())?;
        let count = read_u64(&mut r)? as usize;
        if count != model.base_ids.len() {
            return Err(Error::Format(format!(
                "checkpoint has {count} base tensors, config implies {}",
                model.base_ids.len()
            )));
        }
        for i in 0..count {
            let name: String = read_json_block(&mut r)?;
            let id = model.base_ids[i];
            if model.store.get(id).name() != name {
                return Err(Error::Format(format!("unexpected base tensor {name:?}")));
            }
            let t = Tensor::read_from(&mut r)?;
            model.store.set_value(id, t)?;
        }
        let adapters = AdapterCheckpoint::read_from(&mut r)?;
        model.restore_adapters(&adapters)?;
        Ok(model)
    }

    /// Recreates the adapter groups described by `ck.manifest` and copies
    /// every tensor in.
    pub fn restore_adapters(&mut self, ck: &AdapterCheckpoint) -> Result<()> {
        if !self.groups.is_empty() {
            return Err(Error::Config("model already has adapters".into()));
        }
        let mut rng = Rng::new(0);
        for gm in &ck.manifest.groups {
            if self.config.site_shape(gm.module_type) != (gm.in_dim, gm.out_dim) || gm.layers != self.config.n_layers {
                return Err(Error::Format(format!("group {} does not fit this model", gm.module_type)));
            }
            let cfg = AdapterConfig {
                rank: gm.rank,
                alpha: Some(gm.alpha),
                dropout: gm.dropout,
                activation: gm.activation,
            };
            let targets: TargetSet = std::iter::once(gm.module_type).collect();
            self.attach(gm.variant, targets, &cfg, &mut rng)?;
        }
        for group in &self.groups {
            for (layer, role, id) in group.all_params() {
                let t = ck
                    .get(group.site, layer, role)
                    .ok_or_else(|| Error::Format(format!("missing {}/{layer:?}/{role}", group.site)))?;
                self.store.set_value(id, t.clone())?;
            }
        }
        // re-register so attach-time snapshots equal the restored values
        let mut store = ParamStore::new();
        for (_, p) in self.store.iter() {
            store.add(p.name(), p.value().clone(), p.trainable());
        }
        self.store = store;
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelManifest {
    pub config: ModelConfig,
    pub targets: TargetSet,
    pub adapters: AdapterManifest,
}

fn rms_norm_gain(g: &mut Graph, s: &ParamStore, x: Var, gain: ParamId) -> Result<Var> {
    let n = g.rms_norm(x, RMS_EPS)?;
    let gv = g.param(s, gain);
    g.mul_row(n, gv)
}
