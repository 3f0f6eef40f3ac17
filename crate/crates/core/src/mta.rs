//! Mixture of task adapters.
//!
//! An [`MtaLayer`] replaces a transformer FFN block with `N` parallel adapters
//! combined by task-conditioned weights. In stage 1 every adapter contributes,
//! weighted by a temperature-sharpened softmax over the task's row of the
//! learnable task-weight matrix `W`, whose initialization is biased toward one
//! designated adapter per task. Stage 2 keeps only the top-K adapters of the
//! task's row, adds a shared adapter, and lets a small gate network look at the
//! `[START]` position to decide how much of each to use for the whole sequence.

use serde::{Deserialize, Serialize};

use crate::autodiff::{softmax_t, Graph, Var};
use crate::error::{Error, Result};
use crate::params::{InitRecord, InitScheme, ParamStore};
use crate::tensor::Tensor;

/// Training stage of an MTA layer (and of the forward pass that uses it).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub enum Stage {
    One,
    Two,
}

impl TryFrom<u8> for Stage {
    type Error = String;

    fn try_from(v: u8) -> Result<Self, String> {
        match v {
            1 => Ok(Stage::One),
            2 => Ok(Stage::Two),
            _ => Err(format!("stage must be 1 or 2, got {v}")),
        }
    }
}

impl From<Stage> for u8 {
    fn from(s: Stage) -> u8 {
        match s {
            Stage::One => 1,
            Stage::Two => 2,
        }
    }
}

impl std::fmt::Display for Stage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}", u8::from(*self))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MtaConfig {
    /// Number of parallel task adapters.
    pub n_adapters: usize,
    pub num_task_types: usize,
    /// Bias added to the designated adapter's initial weight, as `(1+λ)/N`.
    pub lambda_bias: f64,
    pub temperature: f64,
    pub top_k: usize,
    /// Adapter inner width; `None` means `d_ff / 4`.
    pub d_adapter: Option<usize>,
    /// Gate MLP hidden width; `None` means `d_model`.
    pub gate_hidden: Option<usize>,
    /// Designated adapter for each task type.
    pub designated_map: Vec<usize>,
}

impl Default for MtaConfig {
    fn default() -> Self {
        MtaConfig {
            n_adapters: 3,
            num_task_types: 3,
            lambda_bias: 1.0,
            temperature: 0.3,
            top_k: 2,
            d_adapter: None,
            gate_hidden: None,
            designated_map: vec![0, 1, 2],
        }
    }
}

impl MtaConfig {
    pub fn violations(&self) -> Vec<String> {
        let mut v = Vec::new();
        if self.n_adapters == 0 {
            v.push("mta.n_adapters must be at least 1".to_string());
        }
        if self.num_task_types == 0 {
            v.push("mta.num_task_types must be at least 1".to_string());
        }
        if !(self.lambda_bias > 0.0) {
            v.push(format!("mta.lambda_bias must be positive, got {}", self.lambda_bias));
        }
        if !(self.temperature > 0.0) {
            v.push(format!("mta.temperature must be positive, got {}", self.temperature));
        }
        if self.top_k == 0 || self.top_k > self.n_adapters {
            v.push(format!(
                "mta.top_k must lie in [1, {}], got {}",
                self.n_adapters, self.top_k
            ));
        }
        if self.d_adapter == Some(0) {
            v.push("mta.d_adapter must be positive".to_string());
        }
        if self.gate_hidden == Some(0) {
            v.push("mta.gate_hidden must be positive".to_string());
        }
        if self.designated_map.len() != self.num_task_types {
            v.push(format!(
                "mta.designated_map has {} entries for {} task types",
                self.designated_map.len(),
                self.num_task_types
            ));
        }
        if let Some(bad) = self.designated_map.iter().find(|&&a| a >= self.n_adapters) {
            v.push(format!(
                "mta.designated_map entry {bad} is not an adapter index (N = {})",
                self.n_adapters
            ));
        }
        v
    }
}

/// Biased initial task-weight matrix: row `i` is `1/N` everywhere except
/// `(1+λ)/N` at `designated[i]`.
pub fn init_task_weights(num_task_types: usize, n: usize, lambda: f64, designated: &[usize]) -> Result<Tensor> {
    if n == 0 || num_task_types == 0 {
        return Err(Error::Config(vec![
            "task-weight matrix needs N ≥ 1 and at least one task".into(),
        ]));
    }
    if designated.len() != num_task_types {
        return Err(Error::Config(vec![format!(
            "designated map has {} entries for {num_task_types} task types",
            designated.len()
        )]));
    }
    if let Some(&bad) = designated.iter().find(|&&a| a >= n) {
        return Err(Error::Config(vec![format!("designated adapter {bad} ≥ N = {n}")]));
    }
    if !(lambda >= 0.0) {
        return Err(Error::Config(vec![format!("λ must be non-negative, got {lambda}")]));
    }
    let nf = n as f64;
    let mut data = vec![1.0 / nf; num_task_types * n];
    for (i, &a) in designated.iter().enumerate() {
        data[i * n + a] = (1.0 + lambda) / nf;
    }
    Tensor::matrix(num_task_types, n, data)
}

/// One sequence inside a packed batch of rows.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Segment {
    pub start: usize,
    pub len: usize,
    pub task_id: usize,
    /// Offset of the `[START]` token within the segment.
    pub start_pos: usize,
}

/// Which rows belong to which sequence, and each sequence's task type.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Routing {
    pub segments: Vec<Segment>,
}

impl Routing {
    pub fn single(len: usize, task_id: usize, start_pos: usize) -> Self {
        Routing {
            segments: vec![Segment {
                start: 0,
                len,
                task_id,
                start_pos,
            }],
        }
    }

    pub fn rows(&self) -> usize {
        self.segments.last().map_or(0, |s| s.start + s.len)
    }

    fn row_tasks(&self) -> Vec<usize> {
        self.segments
            .iter()
            .flat_map(|s| std::iter::repeat_n(s.task_id, s.len))
            .collect()
    }

    fn row_segments(&self) -> Vec<usize> {
        self.segments
            .iter()
            .enumerate()
            .flat_map(|(i, s)| std::iter::repeat_n(i, s.len))
            .collect()
    }

    fn start_rows(&self) -> Vec<usize> {
        self.segments.iter().map(|s| s.start + s.start_pos).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TopK {
    /// Selected adapter indices, ascending.
    pub indices: Vec<usize>,
    /// Renormalized weights aligned with `indices`.
    pub weights: Vec<f64>,
    /// Set when the requested K exceeded N and was reduced.
    pub clamped: bool,
}

/// Output of an MTA forward pass.
#[derive(Debug, Clone, Copy)]
pub struct MtaOutput {
    pub y: Var,
    /// Per-sequence gate weights `W*` (`B×2`), stage 2 only.
    pub gate: Option<Var>,
}

/// Indices of the `k` largest entries (ties to the lower index), ascending.
/// `k` is clamped to `[1, len]`.
fn top_k_indices(row: &[f64], k: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..row.len()).collect();
    order.sort_by(|&a, &b| row[b].total_cmp(&row[a]).then(a.cmp(&b)));
    order.truncate(k.clamp(1, row.len()));
    order.sort_unstable();
    order
}

/// Position-wise bottleneck MLP `up(relu(down(x)))`, the same shape as an FFN.
pub fn adapter_forward(g: &mut Graph<'_>, prefix: &str, x: Var) -> Result<Var> {
    let dw = g.param(&format!("{prefix}.down.w"))?;
    let db = g.param(&format!("{prefix}.down.b"))?;
    let uw = g.param(&format!("{prefix}.up.w"))?;
    let ub = g.param(&format!("{prefix}.up.b"))?;
    let h = g.matmul(x, dw)?;
    let h = g.add_bias(h, db)?;
    let h = g.relu(h)?;
    let o = g.matmul(h, uw)?;
    g.add_bias(o, ub)
}

fn init_adapter(
    store: &mut ParamStore,
    prefix: &str,
    d_model: usize,
    d_inner: usize,
    seed: u64,
    zero_up: bool,
) -> Result<()> {
    store.init_xavier(&format!("{prefix}.down.w"), d_model, d_inner, seed)?;
    store.init_const(&format!("{prefix}.down.b"), &[d_inner], 0.0)?;
    if zero_up {
        store.init_const(&format!("{prefix}.up.w"), &[d_inner, d_model], 0.0)?;
    } else {
        store.init_xavier(&format!("{prefix}.up.w"), d_inner, d_model, seed)?;
    }
    store.init_const(&format!("{prefix}.up.b"), &[d_model], 0.0)
}

/// A mixture-of-task-adapters block. Its parameters live in the model's
/// [`ParamStore`] under `prefix`.
#[derive(Debug, Clone, PartialEq)]
pub struct MtaLayer {
    prefix: String,
    config: MtaConfig,
    d_model: usize,
    d_adapter: usize,
    gate_hidden: usize,
    stage: Stage,
    gate_override: Option<[f64; 2]>,
}

impl MtaLayer {
    /// Creates a stage-1 layer and registers its adapters and task weights.
    pub fn new(
        prefix: &str,
        config: &MtaConfig,
        d_model: usize,
        d_ff: usize,
        store: &mut ParamStore,
        seed: u64,
    ) -> Result<Self> {
        let errs = config.violations();
        if !errs.is_empty() {
            return Err(Error::Config(errs));
        }
        let d_adapter = config.d_adapter.unwrap_or((d_ff / 4).max(1));
        let gate_hidden = config.gate_hidden.unwrap_or(d_model);
        let layer = MtaLayer {
            prefix: prefix.to_string(),
            config: config.clone(),
            d_model,
            d_adapter,
            gate_hidden,
            stage: Stage::One,
            gate_override: None,
        };
        for i in 0..config.n_adapters {
            init_adapter(store, &layer.adapter_prefix(i), d_model, d_adapter, seed, false)?;
        }
        let w = init_task_weights(
            config.num_task_types,
            config.n_adapters,
            config.lambda_bias,
            &config.designated_map,
        )?;
        store.insert(
            &layer.task_weights_name(),
            w,
            InitRecord {
                seed: 0,
                scheme: InitScheme::Explicit {
                    description: format!("biased task weights, lambda = {}", config.lambda_bias),
                },
            },
        )?;
        Ok(layer)
    }

    /// Rebuilds the layer description for parameters that already exist in
    /// `store` (e.g. after loading a checkpoint).
    pub fn attach(
        prefix: &str,
        config: &MtaConfig,
        d_model: usize,
        d_ff: usize,
        stage: Stage,
        store: &ParamStore,
    ) -> Result<Self> {
        let layer = MtaLayer {
            prefix: prefix.to_string(),
            config: config.clone(),
            d_model,
            d_adapter: config.d_adapter.unwrap_or((d_ff / 4).max(1)),
            gate_hidden: config.gate_hidden.unwrap_or(d_model),
            stage,
            gate_override: None,
        };
        for name in layer.expected_param_names() {
            if !store.contains(&name) {
                return Err(Error::Checkpoint(format!("missing MTA parameter {name}")));
            }
        }
        Ok(layer)
    }

    pub fn prefix(&self) -> &str {
        &self.prefix
    }

    pub fn config(&self) -> &MtaConfig {
        &self.config
    }

    pub fn stage(&self) -> Stage {
        self.stage
    }

    pub fn d_adapter(&self) -> usize {
        self.d_adapter
    }

    pub fn adapter_prefix(&self, i: usize) -> String {
        format!("{}.adapter.{i}", self.prefix)
    }

    pub fn shared_prefix(&self) -> String {
        format!("{}.shared", self.prefix)
    }

    pub fn task_weights_name(&self) -> String {
        format!("{}.task_weights", self.prefix)
    }

    fn gate_name(&self, part: &str) -> String {
        format!("{}.gate.{part}", self.prefix)
    }

    /// True when `name` is one of this layer's parameters.
    pub fn owns(&self, name: &str) -> bool {
        name.strip_prefix(&self.prefix)
            .is_some_and(|rest| rest.starts_with('.'))
    }

    /// Names of every parameter this layer should have at its current stage.
    pub fn expected_param_names(&self) -> Vec<String> {
        let adapter = |p: String| ["down.w", "down.b", "up.w", "up.b"].map(|s| format!("{p}.{s}"));
        let mut names: Vec<String> = (0..self.config.n_adapters)
            .flat_map(|i| adapter(self.adapter_prefix(i)))
            .collect();
        names.push(self.task_weights_name());
        if self.stage == Stage::Two {
            names.extend(adapter(self.shared_prefix()));
            names.extend(["l1.w", "l1.b", "l2.w", "l2.b"].map(|s| self.gate_name(s)));
        }
        names
    }

    /// Forces the stage-2 gate output to a fixed pair for every sequence.
    /// Used for ablation diagnostics; `None` restores the learned gate.
    pub fn set_gate_override(&mut self, w: Option<[f64; 2]>) {
        self.gate_override = w;
    }

    /// `softmax_t(W[i], T)` for every task row.
    pub fn task_weight_distribution(&self, store: &ParamStore) -> Result<Vec<Vec<f64>>> {
        let w = store.value(&self.task_weights_name())?;
        let (rows, _) = w.dims2()?;
        (0..rows)
            .map(|r| softmax_t(w.row(r), self.config.temperature))
            .collect()
    }

    /// The `k` largest entries of `W[task_id]` (ties to the lower index), with
    /// weights renormalized by softmax-T over the selected raw entries. A `k`
    /// above `N` is clamped.
    pub fn select_top_k(&self, store: &ParamStore, task_id: usize, k: usize) -> Result<TopK> {
        self.check_task(task_id)?;
        let w = store.value(&self.task_weights_name())?;
        let row = w.row(task_id);
        let n = row.len();
        let clamped = k > n;
        if clamped {
            log::warn!("{}: top-K of {k} clamped to N = {n}", self.prefix);
        }
        let indices = top_k_indices(row, k);
        let raw: Vec<f64> = indices.iter().map(|&i| row[i]).collect();
        let weights = softmax_t(&raw, self.config.temperature)?;
        Ok(TopK {
            indices,
            weights,
            clamped,
        })
    }

    fn check_task(&self, task_id: usize) -> Result<()> {
        if task_id >= self.config.num_task_types {
            return Err(Error::Routing(format!(
                "task id {task_id} outside the {} configured task types",
                self.config.num_task_types
            )));
        }
        Ok(())
    }

    fn check_routing(&self, g: &Graph<'_>, x: Var, routing: &Routing) -> Result<()> {
        let (rows, d) = g.value(x).dims2()?;
        if d != self.d_model || rows != routing.rows() {
            return Err(Error::dim(format!(
                "MTA input {:?} does not match {} routed rows of width {}",
                g.value(x).shape(),
                routing.rows(),
                self.d_model
            )));
        }
        for s in &routing.segments {
            self.check_task(s.task_id)?;
            if s.start_pos >= s.len {
                return Err(Error::Input(format!(
                    "[START] offset {} outside a segment of length {}",
                    s.start_pos, s.len
                )));
            }
        }
        Ok(())
    }

    /// Stage-1 mixture `Σ_i softmax_t(W[task], T)_i · A_i(x)` for every row.
    pub fn forward_stage1(&self, g: &mut Graph<'_>, x: Var, routing: &Routing) -> Result<Var> {
        self.check_routing(g, x, routing)?;
        let w = g.param(&self.task_weights_name())?;
        let dist = g.softmax_rows(w, self.config.temperature, None)?;
        let row_w = g.gather_rows(dist, &routing.row_tasks())?;
        let outs = (0..self.config.n_adapters)
            .map(|i| adapter_forward(g, &self.adapter_prefix(i), x))
            .collect::<Result<Vec<_>>>()?;
        g.mix(&outs, row_w)
    }

    /// `W* = softmax(G(concat(s_start, astar_start)))`, one row per sequence.
    /// `s_start` is `B×d_model` and `astar_start` is `B×2·d_model`.
    pub fn gate_forward(&self, g: &mut Graph<'_>, s_start: Var, astar_start: Var) -> Result<Var> {
        if self.stage != Stage::Two {
            return Err(Error::State("gate network exists only in stage 2".into()));
        }
        let input = g.concat(&[s_start, astar_start], 1)?;
        let (w1, b1) = (g.param(&self.gate_name("l1.w"))?, g.param(&self.gate_name("l1.b"))?);
        let (w2, b2) = (g.param(&self.gate_name("l2.w"))?, g.param(&self.gate_name("l2.b"))?);
        let h = g.matmul(input, w1)?;
        let h = g.add_bias(h, b1)?;
        let h = g.relu(h)?;
        let logits = g.matmul(h, w2)?;
        let logits = g.add_bias(logits, b2)?;
        g.softmax_rows(logits, 1.0, None)
    }

    /// Stage-2 output `W*₀·mix + W*₁·S` where `mix` is the renormalized top-K
    /// adapter mixture and `S` the shared adapter. Adapters outside a task's
    /// top-K have no effect on that task's rows, bit for bit.
    pub fn forward_stage2(&self, g: &mut Graph<'_>, x: Var, routing: &Routing) -> Result<MtaOutput> {
        if self.stage != Stage::Two {
            return Err(Error::State(format!(
                "{} has not been promoted to stage 2",
                self.prefix
            )));
        }
        self.check_routing(g, x, routing)?;
        let n = self.config.n_adapters;
        let t = self.config.num_task_types;
        let w = g.param(&self.task_weights_name())?;

        // Selection is read from the current W values; only the renormalized
        // weights are differentiable.
        let mut mask = vec![false; t * n];
        let mut used = vec![false; n];
        let w_now = g.value(w).clone();
        for task in 0..t {
            for i in top_k_indices(w_now.row(task), self.config.top_k) {
                mask[task * n + i] = true;
            }
        }
        for s in &routing.segments {
            for i in 0..n {
                used[i] |= mask[s.task_id * n + i];
            }
        }
        let dist = g.softmax_rows(w, self.config.temperature, Some(&mask))?;
        let row_w = g.gather_rows(dist, &routing.row_tasks())?;

        let active: Vec<usize> = (0..n).filter(|&i| used[i]).collect();
        let mut outs = Vec::with_capacity(active.len());
        let mut cols = Vec::with_capacity(active.len());
        for &i in &active {
            outs.push(adapter_forward(g, &self.adapter_prefix(i), x)?);
            cols.push(g.slice(row_w, 1, i, 1)?);
        }
        let active_w = if cols.len() == 1 { cols[0] } else { g.concat(&cols, 1)? };
        let mix = g.mix(&outs, active_w)?;

        let shared = adapter_forward(g, &self.shared_prefix(), x)?;
        let starts = routing.start_rows();
        let gate = match self.gate_override {
            Some(fixed) => {
                let rows = vec![fixed.to_vec(); routing.segments.len()];
                g.input(Tensor::from_rows(&rows)?)
            }
            None => {
                let s_start = g.gather_rows(shared, &starts)?;
                let m_start = g.gather_rows(mix, &starts)?;
                let astar_start = g.concat(&[m_start, s_start], 1)?;
                self.gate_forward(g, s_start, astar_start)?
            }
        };
        let row_gate = g.gather_rows(gate, &routing.row_segments())?;
        let y = g.mix(&[mix, shared], row_gate)?;
        Ok(MtaOutput { y, gate: Some(gate) })
    }

    /// Forward pass in the requested stage. A promoted layer may still be run
    /// in stage 1 (shared adapter and gate unused).
    pub fn forward(&self, g: &mut Graph<'_>, x: Var, routing: &Routing, stage: Stage) -> Result<MtaOutput> {
        match stage {
            Stage::One => Ok(MtaOutput {
                y: self.forward_stage1(g, x, routing)?,
                gate: None,
            }),
            Stage::Two => self.forward_stage2(g, x, routing),
        }
    }

    /// Adds the shared adapter (zero up-projection) and a fresh gate network.
    /// Adapters and task weights are left untouched.
    pub fn promote_to_stage2(&mut self, store: &mut ParamStore, seed: u64) -> Result<()> {
        if self.stage == Stage::Two {
            return Err(Error::State(format!("{} is already in stage 2", self.prefix)));
        }
        init_adapter(store, &self.shared_prefix(), self.d_model, self.d_adapter, seed, true)?;
        store.init_xavier(&self.gate_name("l1.w"), 3 * self.d_model, self.gate_hidden, seed)?;
        store.init_const(&self.gate_name("l1.b"), &[self.gate_hidden], 0.0)?;
        store.init_xavier(&self.gate_name("l2.w"), self.gate_hidden, 2, seed)?;
        store.init_const(&self.gate_name("l2.b"), &[2], 0.0)?;
        self.stage = Stage::Two;
        Ok(())
    }
}
