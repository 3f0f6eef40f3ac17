//! Compact pre-norm encoder-decoder transformer.
//!
//! Sequences in a batch are packed row-wise into one matrix, so every
//! position-wise op is a single matmul; attention is restricted to each
//! sequence's own block by [`AttnSpan`]s. Encoder layers listed in
//! `mta_layer_indices` use an [`MtaLayer`] in place of the FFN.

use std::collections::BTreeMap;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::autodiff::{AttnSpan, Graph, Var};
use crate::data::Example;
use crate::error::{Error, Result};
use crate::mta::{MtaConfig, MtaLayer, Routing, Segment, Stage};
use crate::params::ParamStore;
use crate::rng::{rng_for, Rng};
use crate::tensor::Tensor;

pub const EMBED_STD: f64 = 0.02;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub d_ff: usize,
    pub n_heads: usize,
    pub n_enc_layers: usize,
    pub n_dec_layers: usize,
    pub max_seq_len: usize,
    pub dropout_rate: f64,
    /// Encoder layers whose FFN is replaced by an MTA block.
    pub mta_layer_indices: Vec<usize>,
    pub mta: MtaConfig,
    pub pad_id: usize,
    pub start_token_id: usize,
    pub eos_id: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            vocab_size: 120,
            d_model: 64,
            d_ff: 256,
            n_heads: 4,
            n_enc_layers: 2,
            n_dec_layers: 2,
            max_seq_len: 64,
            dropout_rate: 0.0,
            mta_layer_indices: vec![1],
            mta: MtaConfig::default(),
            pad_id: 0,
            start_token_id: 1,
            eos_id: 2,
        }
    }
}

impl ModelConfig {
    pub fn violations(&self) -> Vec<String> {
        let mut v = Vec::new();
        for (name, val) in [
            ("vocab_size", self.vocab_size),
            ("d_model", self.d_model),
            ("d_ff", self.d_ff),
            ("n_heads", self.n_heads),
            ("n_enc_layers", self.n_enc_layers),
            ("n_dec_layers", self.n_dec_layers),
            ("max_seq_len", self.max_seq_len),
        ] {
            if val == 0 {
                v.push(format!("model.{name} must be positive"));
            }
        }
        if self.n_heads > 0 && !self.d_model.is_multiple_of(self.n_heads) {
            v.push(format!(
                "model.d_model ({}) must be divisible by model.n_heads ({})",
                self.d_model, self.n_heads
            ));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            v.push(format!(
                "model.dropout_rate must lie in [0, 1), got {}",
                self.dropout_rate
            ));
        }
        for &i in &self.mta_layer_indices {
            if i >= self.n_enc_layers {
                v.push(format!(
                    "model.mta_layer_indices entry {i} is not an encoder layer (n_enc_layers = {})",
                    self.n_enc_layers
                ));
            }
        }
        let mut sorted = self.mta_layer_indices.clone();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.len() != self.mta_layer_indices.len() {
            v.push("model.mta_layer_indices has duplicates".into());
        }
        let ids = [self.pad_id, self.start_token_id, self.eos_id];
        if ids[0] == ids[1] || ids[0] == ids[2] || ids[1] == ids[2] {
            v.push(format!("reserved ids pad/start/eos must be distinct, got {ids:?}"));
        }
        if ids.iter().any(|&i| i >= self.vocab_size) {
            v.push(format!(
                "reserved ids {ids:?} must be below vocab_size {}",
                self.vocab_size
            ));
        }
        v.extend(self.mta.violations());
        v
    }

    pub fn validate(&self) -> Result<()> {
        let v = self.violations();
        if v.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(v))
        }
    }
}

/// Encoder output for one sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct HiddenStates {
    pub states: Tensor,
    pub start_position: usize,
}

/// Loss node plus the per-layer stage-2 gate outputs (`B×2`) of a batch.
pub struct LossParts {
    pub loss: Var,
    pub gates: Vec<(usize, Var)>,
}

struct Packed {
    ids: Vec<usize>,
    positions: Vec<usize>,
    spans: Vec<(usize, usize)>,
}

impl Packed {
    fn new(seqs: &[&[usize]]) -> Self {
        let mut ids = Vec::new();
        let mut positions = Vec::new();
        let mut spans = Vec::new();
        for s in seqs {
            spans.push((ids.len(), s.len()));
            ids.extend_from_slice(s);
            positions.extend(0..s.len());
        }
        Packed { ids, positions, spans }
    }

    fn attn_spans(&self) -> Vec<AttnSpan> {
        self.spans.iter().map(|&(s, l)| AttnSpan::square(s, l)).collect()
    }
}

#[derive(Debug, Clone)]
pub struct Model {
    config: ModelConfig,
    params: ParamStore,
    mta: BTreeMap<usize, MtaLayer>,
}

fn ln_params(store: &mut ParamStore, prefix: &str, d: usize) -> Result<()> {
    store.init_const(&format!("{prefix}.g"), &[d], 1.0)?;
    store.init_const(&format!("{prefix}.b"), &[d], 0.0)
}

fn linear_params(store: &mut ParamStore, prefix: &str, fan_in: usize, fan_out: usize, seed: u64) -> Result<()> {
    store.init_xavier(&format!("{prefix}.w"), fan_in, fan_out, seed)?;
    store.init_const(&format!("{prefix}.b"), &[fan_out], 0.0)
}

fn attn_params(store: &mut ParamStore, prefix: &str, d: usize, seed: u64) -> Result<()> {
    for p in ["q", "k", "v", "o"] {
        linear_params(store, &format!("{prefix}.{p}"), d, d, seed)?;
    }
    Ok(())
}

fn ffn_params(store: &mut ParamStore, prefix: &str, d: usize, d_ff: usize, seed: u64) -> Result<()> {
    linear_params(store, &format!("{prefix}.in"), d, d_ff, seed)?;
    linear_params(store, &format!("{prefix}.out"), d_ff, d, seed)
}

impl Model {
    /// Fresh model with every parameter drawn from its seeded init scheme.
    pub fn build(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let d = config.d_model;
        let mut store = ParamStore::new();
        store.init_normal("embed.tokens", &[config.vocab_size, d], EMBED_STD, seed)?;
        store.init_normal("embed.enc_pos", &[config.max_seq_len, d], EMBED_STD, seed)?;
        store.init_normal("embed.dec_pos", &[config.max_seq_len, d], EMBED_STD, seed)?;
        let mut mta = BTreeMap::new();
        for l in 0..config.n_enc_layers {
            let p = format!("enc.{l}");
            ln_params(&mut store, &format!("{p}.ln1"), d)?;
            attn_params(&mut store, &format!("{p}.attn"), d, seed)?;
            ln_params(&mut store, &format!("{p}.ln2"), d)?;
            if config.mta_layer_indices.contains(&l) {
                let layer = MtaLayer::new(&format!("{p}.mta"), &config.mta, d, config.d_ff, &mut store, seed)?;
                mta.insert(l, layer);
            } else {
                ffn_params(&mut store, &format!("{p}.ffn"), d, config.d_ff, seed)?;
            }
        }
        ln_params(&mut store, "enc.final_ln", d)?;
        for l in 0..config.n_dec_layers {
            let p = format!("dec.{l}");
            ln_params(&mut store, &format!("{p}.ln1"), d)?;
            attn_params(&mut store, &format!("{p}.self_attn"), d, seed)?;
            ln_params(&mut store, &format!("{p}.ln2"), d)?;
            attn_params(&mut store, &format!("{p}.cross_attn"), d, seed)?;
            ln_params(&mut store, &format!("{p}.ln3"), d)?;
            ffn_params(&mut store, &format!("{p}.ffn"), d, config.d_ff, seed)?;
        }
        ln_params(&mut store, "dec.final_ln", d)?;
        Ok(Model {
            config,
            params: store,
            mta,
        })
    }

    /// Reassembles a model around existing parameters (checkpoint loading).
    pub fn from_parts(config: ModelConfig, params: ParamStore, stage: Stage) -> Result<Self> {
        config.validate()?;
        let reference = Model::build(config.clone(), 0)?;
        let mut mta = BTreeMap::new();
        for &l in &config.mta_layer_indices {
            let layer = MtaLayer::attach(
                &format!("enc.{l}.mta"),
                &config.mta,
                config.d_model,
                config.d_ff,
                stage,
                &params,
            )?;
            mta.insert(l, layer);
        }
        let model = Model { config, params, mta };
        let mut expected: Vec<String> = reference
            .params
            .names()
            .filter(|n| !reference.is_mta_param(n))
            .map(str::to_string)
            .collect();
        for layer in model.mta.values() {
            expected.extend(layer.expected_param_names());
        }
        expected.sort();
        let actual: Vec<String> = model.params.names().map(str::to_string).collect();
        if expected != actual {
            return Err(Error::Checkpoint(
                "parameter names do not match the model configuration".into(),
            ));
        }
        for name in &actual {
            let want = if let Ok(v) = reference.params.value(name) {
                v.shape().to_vec()
            } else {
                continue;
            };
            if model.params.value(name)?.shape() != want.as_slice() {
                return Err(Error::Checkpoint(format!("parameter {name} has the wrong shape")));
            }
        }
        Ok(model)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn num_params(&self) -> usize {
        self.params.num_values()
    }

    pub fn mta_layers(&self) -> impl Iterator<Item = (usize, &MtaLayer)> {
        self.mta.iter().map(|(&i, l)| (i, l))
    }

    pub fn mta_layer_mut(&mut self, index: usize) -> Option<&mut MtaLayer> {
        self.mta.get_mut(&index)
    }

    pub fn has_mta(&self) -> bool {
        !self.mta.is_empty()
    }

    /// Stage of the MTA layers; a model without MTA layers reports stage 1.
    pub fn stage(&self) -> Stage {
        self.mta.values().map(MtaLayer::stage).max().unwrap_or(Stage::One)
    }

    pub fn is_mta_param(&self, name: &str) -> bool {
        self.mta.values().any(|l| l.owns(name))
    }

    pub fn promote_to_stage2(&mut self, seed: u64) -> Result<()> {
        if self.mta.is_empty() {
            return Err(Error::State("model has no MTA layers to promote".into()));
        }
        for layer in self.mta.values_mut() {
            layer.promote_to_stage2(&mut self.params, seed)?;
        }
        Ok(())
    }

    fn check_input(&self, ids: &[usize], task_id: usize) -> Result<()> {
        if ids.first() != Some(&self.config.start_token_id) {
            return Err(Error::Input("input must begin with the [START] token".into()));
        }
        if ids.len() > self.config.max_seq_len {
            return Err(Error::Input(format!(
                "input of {} tokens exceeds max_seq_len {}",
                ids.len(),
                self.config.max_seq_len
            )));
        }
        if let Some(bad) = ids.iter().find(|&&i| i >= self.config.vocab_size) {
            return Err(Error::Input(format!("token id {bad} outside vocabulary")));
        }
        if task_id >= self.config.mta.num_task_types {
            return Err(Error::Routing(format!(
                "task id {task_id} outside the {} task types",
                self.config.mta.num_task_types
            )));
        }
        Ok(())
    }

    fn check_stage(&self, stage: Stage) -> Result<()> {
        if stage == Stage::Two && self.mta.values().any(|l| l.stage() != Stage::Two) {
            return Err(Error::State("stage-2 forward requested before promotion".into()));
        }
        Ok(())
    }

    fn linear(&self, g: &mut Graph<'_>, prefix: &str, x: Var) -> Result<Var> {
        let w = g.param(&format!("{prefix}.w"))?;
        let b = g.param(&format!("{prefix}.b"))?;
        let y = g.matmul(x, w)?;
        g.add_bias(y, b)
    }

    fn layer_norm(&self, g: &mut Graph<'_>, prefix: &str, x: Var) -> Result<Var> {
        let gamma = g.param(&format!("{prefix}.g"))?;
        let beta = g.param(&format!("{prefix}.b"))?;
        g.layer_norm(x, gamma, beta)
    }

    fn ffn(&self, g: &mut Graph<'_>, prefix: &str, x: Var) -> Result<Var> {
        let h = self.linear(g, &format!("{prefix}.in"), x)?;
        let h = g.relu(h)?;
        self.linear(g, &format!("{prefix}.out"), h)
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_block(
        &self,
        g: &mut Graph<'_>,
        prefix: &str,
        x: Var,
        memory: Var,
        spans: &[AttnSpan],
        causal: bool,
    ) -> Result<Var> {
        let q = self.linear(g, &format!("{prefix}.q"), x)?;
        let k = self.linear(g, &format!("{prefix}.k"), memory)?;
        let v = self.linear(g, &format!("{prefix}.v"), memory)?;
        let a = g.attention(q, k, v, spans, self.config.n_heads, causal)?;
        self.linear(g, &format!("{prefix}.o"), a)
    }

    fn dropout(&self, g: &mut Graph<'_>, x: Var, rng: &mut Option<Rng>) -> Result<Var> {
        let p = self.config.dropout_rate;
        let Some(rng) = rng.as_mut() else { return Ok(x) };
        if p == 0.0 {
            return Ok(x);
        }
        let shape = g.value(x).shape().to_vec();
        let keep = 1.0 / (1.0 - p);
        let mask: Vec<f64> = (0..g.value(x).len())
            .map(|_| if rng.random::<f64>() < p { 0.0 } else { keep })
            .collect();
        let m = g.input(Tensor::new(shape, mask)?);
        g.mul(x, m)
    }

    fn embed(&self, g: &mut Graph<'_>, packed: &Packed, pos_table: &str) -> Result<Var> {
        let tok = g.param("embed.tokens")?;
        let pos = g.param(pos_table)?;
        let t = g.gather_rows(tok, &packed.ids)?;
        let p = g.gather_rows(pos, &packed.positions)?;
        g.add(t, p)
    }

    /// Encoder over packed inputs. Returns the final normalized hidden states
    /// and the gate output of every stage-2 MTA layer.
    fn encoder(
        &self,
        g: &mut Graph<'_>,
        packed: &Packed,
        routing: &Routing,
        stage: Stage,
        rng: &mut Option<Rng>,
    ) -> Result<(Var, Vec<(usize, Var)>)> {
        let spans = packed.attn_spans();
        let mut x = self.embed(g, packed, "embed.enc_pos")?;
        let mut gates = Vec::new();
        for l in 0..self.config.n_enc_layers {
            let p = format!("enc.{l}");
            let a = self.layer_norm(g, &format!("{p}.ln1"), x)?;
            let a = self.attention_block(g, &format!("{p}.attn"), a, a, &spans, false)?;
            let a = self.dropout(g, a, rng)?;
            x = g.add(x, a)?;
            let h = self.layer_norm(g, &format!("{p}.ln2"), x)?;
            let f = match self.mta.get(&l) {
                Some(layer) => {
                    let out = layer.forward(g, h, routing, stage)?;
                    if let Some(gate) = out.gate {
                        gates.push((l, gate));
                    }
                    out.y
                }
                None => self.ffn(g, &format!("{p}.ffn"), h)?,
            };
            let f = self.dropout(g, f, rng)?;
            x = g.add(x, f)?;
        }
        Ok((self.layer_norm(g, "enc.final_ln", x)?, gates))
    }

    /// Decoder over packed prefixes attending to `memory`; returns logits.
    fn decoder(
        &self,
        g: &mut Graph<'_>,
        packed: &Packed,
        memory: Var,
        memory_spans: &[(usize, usize)],
        rng: &mut Option<Rng>,
    ) -> Result<Var> {
        let self_spans = packed.attn_spans();
        let cross_spans: Vec<AttnSpan> = packed
            .spans
            .iter()
            .zip(memory_spans)
            .map(|(&(qs, ql), &(ks, kl))| AttnSpan {
                q_start: qs,
                q_len: ql,
                k_start: ks,
                k_len: kl,
            })
            .collect();
        let mut x = self.embed(g, packed, "embed.dec_pos")?;
        for l in 0..self.config.n_dec_layers {
            let p = format!("dec.{l}");
            let a = self.layer_norm(g, &format!("{p}.ln1"), x)?;
            let a = self.attention_block(g, &format!("{p}.self_attn"), a, a, &self_spans, true)?;
            let a = self.dropout(g, a, rng)?;
            x = g.add(x, a)?;
            let c = self.layer_norm(g, &format!("{p}.ln2"), x)?;
            let c = self.attention_block(g, &format!("{p}.cross_attn"), c, memory, &cross_spans, false)?;
            let c = self.dropout(g, c, rng)?;
            x = g.add(x, c)?;
            let f = self.layer_norm(g, &format!("{p}.ln3"), x)?;
            let f = self.ffn(g, &format!("{p}.ffn"), f)?;
            let f = self.dropout(g, f, rng)?;
            x = g.add(x, f)?;
        }
        let h = self.layer_norm(g, "dec.final_ln", x)?;
        let emb = g.param("embed.tokens")?;
        let emb_t = g.transpose(emb)?;
        g.matmul(h, emb_t)
    }

    fn routing(packed: &Packed, tasks: &[usize]) -> Routing {
        Routing {
            segments: packed
                .spans
                .iter()
                .zip(tasks)
                .map(|(&(start, len), &task_id)| Segment {
                    start,
                    len,
                    task_id,
                    start_pos: 0,
                })
                .collect(),
        }
    }

    /// Encoder hidden states for one input (`len × d_model`).
    pub fn encode(&self, input_ids: &[usize], task_id: usize, stage: Stage) -> Result<HiddenStates> {
        self.check_input(input_ids, task_id)?;
        self.check_stage(stage)?;
        let packed = Packed::new(&[input_ids]);
        let routing = Self::routing(&packed, &[task_id]);
        let mut g = Graph::new(&self.params);
        let (h, _) = self.encoder(&mut g, &packed, &routing, stage, &mut None)?;
        Ok(HiddenStates {
            states: g.value(h).clone(),
            start_position: 0,
        })
    }

    /// Stage-2 gate outputs `W*` (one row per input) for every MTA layer.
    pub fn gate_values(&self, inputs: &[(&[usize], usize)]) -> Result<Vec<(usize, Tensor)>> {
        self.check_stage(Stage::Two)?;
        if !self.has_mta() {
            return Err(Error::State("model has no MTA layers".into()));
        }
        for &(ids, task) in inputs {
            self.check_input(ids, task)?;
        }
        let seqs: Vec<&[usize]> = inputs.iter().map(|(s, _)| *s).collect();
        let tasks: Vec<usize> = inputs.iter().map(|(_, t)| *t).collect();
        let packed = Packed::new(&seqs);
        let routing = Self::routing(&packed, &tasks);
        let mut g = Graph::new(&self.params);
        let (_, gates) = self.encoder(&mut g, &packed, &routing, Stage::Two, &mut None)?;
        Ok(gates.into_iter().map(|(l, v)| (l, g.value(v).clone())).collect())
    }

    /// Records teacher-forced mean token cross-entropy of `batch` on `g`.
    /// With `dropout_seed` set and a positive dropout rate, dropout masks are
    /// drawn from that seed.
    pub fn build_loss(
        &self,
        g: &mut Graph<'_>,
        batch: &[Example],
        stage: Stage,
        dropout_seed: Option<u64>,
    ) -> Result<LossParts> {
        if batch.is_empty() {
            return Err(Error::Input("empty batch".into()));
        }
        self.check_stage(stage)?;
        for ex in batch {
            self.check_input(&ex.input_ids, ex.task_id)?;
            if ex.target_ids.is_empty() || ex.target_ids.len() > self.config.max_seq_len {
                return Err(Error::Input(format!(
                    "target of {} tokens outside 1..={}",
                    ex.target_ids.len(),
                    self.config.max_seq_len
                )));
            }
        }
        let mut rng = dropout_seed.map(|s| rng_for(s, "dropout"));
        let inputs: Vec<&[usize]> = batch.iter().map(|e| e.input_ids.as_slice()).collect();
        let tasks: Vec<usize> = batch.iter().map(|e| e.task_id).collect();
        let enc_packed = Packed::new(&inputs);
        let routing = Self::routing(&enc_packed, &tasks);
        let (memory, gates) = self.encoder(g, &enc_packed, &routing, stage, &mut rng)?;

        let dec_inputs: Vec<Vec<usize>> = batch
            .iter()
            .map(|e| {
                let mut v = vec![self.config.pad_id];
                v.extend_from_slice(&e.target_ids[..e.target_ids.len() - 1]);
                v
            })
            .collect();
        let dec_refs: Vec<&[usize]> = dec_inputs.iter().map(Vec::as_slice).collect();
        let dec_packed = Packed::new(&dec_refs);
        let logits = self.decoder(g, &dec_packed, memory, &enc_packed.spans, &mut rng)?;
        let targets: Vec<usize> = batch.iter().flat_map(|e| e.target_ids.iter().copied()).collect();
        let loss = g.cross_entropy(logits, &targets, Some(self.config.pad_id))?;
        Ok(LossParts { loss, gates })
    }

    /// Loss value only (no dropout).
    pub fn forward_loss(&self, batch: &[Example], stage: Stage) -> Result<f64> {
        let mut g = Graph::new(&self.params);
        let parts = self.build_loss(&mut g, batch, stage, None)?;
        g.value(parts.loss).item()
    }

    pub fn greedy_decode(
        &self,
        input_ids: &[usize],
        task_id: usize,
        stage: Stage,
        max_new: usize,
    ) -> Result<Vec<usize>> {
        Ok(self
            .greedy_decode_batch(&[(input_ids, task_id)], stage, max_new)?
            .remove(0))
    }

    /// Argmax decoding for several inputs at once; each output stops after
    /// end-of-sequence or `max_new` tokens. Ties go to the lower token id.
    pub fn greedy_decode_batch(
        &self,
        inputs: &[(&[usize], usize)],
        stage: Stage,
        max_new: usize,
    ) -> Result<Vec<Vec<usize>>> {
        if max_new == 0 {
            return Err(Error::Input("max_new must be at least 1".into()));
        }
        if inputs.is_empty() {
            return Ok(Vec::new());
        }
        self.check_stage(stage)?;
        for &(ids, task) in inputs {
            self.check_input(ids, task)?;
        }
        let seqs: Vec<&[usize]> = inputs.iter().map(|(s, _)| *s).collect();
        let tasks: Vec<usize> = inputs.iter().map(|(_, t)| *t).collect();
        let enc_packed = Packed::new(&seqs);
        let routing = Self::routing(&enc_packed, &tasks);
        let memory = {
            let mut g = Graph::new(&self.params);
            let (h, _) = self.encoder(&mut g, &enc_packed, &routing, stage, &mut None)?;
            g.value(h).clone()
        };
        let max_new = max_new.min(self.config.max_seq_len);
        let mut outputs: Vec<Vec<usize>> = vec![Vec::new(); inputs.len()];
        let mut active: Vec<usize> = (0..inputs.len()).collect();
        while !active.is_empty() {
            let prefixes: Vec<Vec<usize>> = active
                .iter()
                .map(|&i| {
                    let mut p = vec![self.config.pad_id];
                    p.extend_from_slice(&outputs[i]);
                    p
                })
                .collect();
            let refs: Vec<&[usize]> = prefixes.iter().map(Vec::as_slice).collect();
            let dec_packed = Packed::new(&refs);
            let mem_spans: Vec<(usize, usize)> = active.iter().map(|&i| enc_packed.spans[i]).collect();
            let mut g = Graph::new(&self.params);
            let mem = g.input(memory.clone());
            let logits = self.decoder(&mut g, &dec_packed, mem, &mem_spans, &mut None)?;
            let lt = g.value(logits);
            let mut still = Vec::with_capacity(active.len());
            for (slot, &i) in active.iter().enumerate() {
                let (start, len) = dec_packed.spans[slot];
                let row = lt.row(start + len - 1);
                let mut best = 0;
                for (j, &v) in row.iter().enumerate() {
                    if v > row[best] {
                        best = j;
                    }
                }
                outputs[i].push(best);
                if best != self.config.eos_id && outputs[i].len() < max_new {
                    still.push(i);
                }
            }
            active = still;
        }
        Ok(outputs)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_dataset, TaskSuite};

    fn tiny() -> ModelConfig {
        ModelConfig {
            d_model: 16,
            d_ff: 32,
            n_heads: 2,
            ..ModelConfig::default()
        }
    }

    fn batch(n: usize) -> Vec<Example> {
        generate_dataset(&TaskSuite::default(), 5, n, 64).unwrap()
    }

    #[test]
    fn config_violations_are_listed() {
        assert!(ModelConfig::default().violations().is_empty());
        let bad = ModelConfig {
            d_model: 65,
            mta_layer_indices: vec![5],
            ..ModelConfig::default()
        };
        match Model::build(bad, 0) {
            Err(Error::Config(v)) => {
                assert!(v.iter().any(|m| m.contains("d_model (65)")), "{v:?}");
                assert!(v.iter().any(|m| m.contains("entry 5")), "{v:?}");
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn build_is_seed_deterministic() {
        let a = Model::build(tiny(), 3).unwrap();
        let b = Model::build(tiny(), 3).unwrap();
        let c = Model::build(tiny(), 4).unwrap();
        assert!(a.params().bit_eq(b.params()));
        assert!(!a.params().bit_eq(c.params()));
        assert!(a.params().contains("enc.1.mta.task_weights"));
        assert!(a.params().contains("enc.0.ffn.in.w"));
        assert!(!a.params().contains("enc.1.ffn.in.w"));
    }

    #[test]
    fn vanilla_model_has_no_mta() {
        let cfg = ModelConfig {
            mta_layer_indices: vec![],
            ..tiny()
        };
        let m = Model::build(cfg, 0).unwrap();
        assert!(!m.has_mta());
        assert!(m.params().names().all(|n| !n.contains("mta")));
        assert!(matches!(m.clone().promote_to_stage2(0), Err(Error::State(_))));
    }

    #[test]
    fn encode_checks_inputs() {
        let m = Model::build(tiny(), 0).unwrap();
        let h = m.encode(&[1, 40, 41, 42], 0, Stage::One).unwrap();
        assert_eq!(h.states.shape(), &[4, 16]);
        assert_eq!(h.start_position, 0);
        assert!(matches!(m.encode(&[40, 41], 0, Stage::One), Err(Error::Input(_))));
        let long = [vec![1], vec![40; 64]].concat();
        assert!(matches!(m.encode(&long, 0, Stage::One), Err(Error::Input(_))));
        assert!(matches!(m.encode(&[1, 40], 7, Stage::One), Err(Error::Routing(_))));
        assert!(matches!(m.encode(&[1, 40], 0, Stage::Two), Err(Error::State(_))));
    }

    #[test]
    fn initial_loss_is_near_uniform() {
        let m = Model::build(tiny(), 1).unwrap();
        let loss = m.forward_loss(&batch(4), Stage::One).unwrap();
        let uniform = (m.config().vocab_size as f64).ln();
        assert!((loss - uniform).abs() < 0.1, "{loss} vs {uniform}");
    }

    #[test]
    fn packed_loss_is_token_weighted_mean_of_singles() {
        let m = Model::build(tiny(), 2).unwrap();
        let exs = batch(2);
        let packed = m.forward_loss(&exs, Stage::One).unwrap();
        let mut total = 0.0;
        let mut tokens = 0;
        for e in &exs {
            let l = m.forward_loss(std::slice::from_ref(e), Stage::One).unwrap();
            total += l * e.target_ids.len() as f64;
            tokens += e.target_ids.len();
        }
        assert!((packed - total / tokens as f64).abs() < 1e-12);
    }

    #[test]
    fn every_parameter_receives_gradient_in_stage1() {
        let m = Model::build(tiny(), 3).unwrap();
        let exs = batch(3);
        let mut g = Graph::new(m.params());
        let parts = m.build_loss(&mut g, &exs, Stage::One, None).unwrap();
        assert!(parts.gates.is_empty());
        let grads = g.backward(parts.loss).unwrap();
        for name in m.params().names() {
            let gr = grads.get(name).unwrap_or_else(|| panic!("no grad for {name}"));
            assert!(gr.data().iter().any(|&v| v != 0.0), "all-zero grad for {name}");
        }
    }

    #[test]
    fn stage2_reports_gates_and_trains_gate_and_shared() {
        let mut m = Model::build(tiny(), 3).unwrap();
        m.promote_to_stage2(11).unwrap();
        assert_eq!(m.stage(), Stage::Two);
        let exs = batch(2);
        let mut g = Graph::new(m.params());
        let parts = m.build_loss(&mut g, &exs, Stage::Two, None).unwrap();
        assert_eq!(parts.gates.len(), 1);
        let gate = g.value(parts.gates[0].1).clone();
        assert_eq!(gate.shape(), &[exs.len(), 2]);
        for r in 0..exs.len() {
            assert!((gate.row(r).iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
        let grads = g.backward(parts.loss).unwrap();
        for name in ["enc.1.mta.gate.l1.w", "enc.1.mta.gate.l2.w", "enc.1.mta.shared.up.w"] {
            let gr = grads.get(name).unwrap();
            assert!(gr.data().iter().any(|&v| v != 0.0), "{name}");
        }
    }

    #[test]
    fn batched_decode_matches_single_decode() {
        let m = Model::build(tiny(), 4).unwrap();
        let exs = batch(2);
        let inputs: Vec<(&[usize], usize)> = exs.iter().map(|e| (e.input_ids.as_slice(), e.task_id)).collect();
        let together = m.greedy_decode_batch(&inputs, Stage::One, 6).unwrap();
        for (e, out) in exs.iter().zip(&together) {
            assert_eq!(&m.greedy_decode(&e.input_ids, e.task_id, Stage::One, 6).unwrap(), out);
            assert!(!out.is_empty() && out.len() <= 6);
            if let Some(p) = out.iter().position(|&t| t == 2) {
                assert_eq!(p, out.len() - 1);
            }
        }
        let first = m
            .greedy_decode(&exs[0].input_ids, exs[0].task_id, Stage::One, 1)
            .unwrap();
        assert_eq!(first[..], together[0][..1]);
        assert!(matches!(
            m.greedy_decode(&exs[0].input_ids, 0, Stage::One, 0),
            Err(Error::Input(_))
        ));
    }

    #[test]
    fn from_parts_round_trips_and_rejects_mismatch() {
        let mut m = Model::build(tiny(), 6).unwrap();
        m.promote_to_stage2(1).unwrap();
        let again = Model::from_parts(tiny(), m.params().clone(), Stage::Two).unwrap();
        let exs = batch(1);
        assert_eq!(
            again.forward_loss(&exs, Stage::Two).unwrap().to_bits(),
            m.forward_loss(&exs, Stage::Two).unwrap().to_bits()
        );
        let other = ModelConfig { d_ff: 64, ..tiny() };
        assert!(matches!(
            Model::from_parts(other, m.params().clone(), Stage::Two),
            Err(Error::Checkpoint(_) | Error::Dimension(_) | Error::State(_))
        ));
    }

    #[test]
    fn dropout_is_seeded() {
        let cfg = ModelConfig {
            dropout_rate: 0.2,
            ..tiny()
        };
        let m = Model::build(cfg, 0).unwrap();
        let exs = batch(1);
        let run = |seed: Option<u64>| {
            let mut g = Graph::new(m.params());
            let p = m.build_loss(&mut g, &exs, Stage::One, seed).unwrap();
            g.value(p.loss).item().unwrap()
        };
        assert_eq!(run(Some(9)).to_bits(), run(Some(9)).to_bits());
        assert_ne!(run(Some(9)).to_bits(), run(None).to_bits());
    }
}
