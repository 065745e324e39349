//! Multi-task ranking models trained online from label streams.
//!
//! The model maps a (user, live-room) pair to three probabilities — click,
//! follow, like — through hashed embeddings and either a shared-bottom MLP
//! or a mixture-of-experts body with per-task softmax gates. Training
//! consumes label streams in emit-time order so the learner only ever sees
//! supervision that would have been available at that moment.

mod adam;
mod checkpoint;
mod layers;

pub use adam::{AdamConfig, AdamState};
pub use checkpoint::{load_model, save_model, CheckpointError};
pub use layers::{sigmoid, Dense, DenseGrad, Mlp};

use crate::events::{
    ImpressionSession, LiveRoomSnapshot, SessionKey, SessionStore, TaskKind, Timestamp,
    UserProfile,
};
use crate::windowing::{LabeledSample, TaskLabels};
use layers::{softmax, MlpCache};
use ndarray::{Array1, Array2};
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use std::collections::BTreeMap;
use std::io::Write as _;
use std::path::Path;

/// Side (non-id) categorical fields, in input-layout order.
pub const SIDE_FIELDS: [&str; 6] = [
    "gender",
    "age_bucket",
    "city",
    "live_type",
    "anchor_gender",
    "anchor_type",
];

/// Probabilities are clipped to `[ε, 1-ε]` inside the log loss.
pub const PROB_CLIP: f64 = 1e-7;

/// How raw categorical values become embedding-table rows.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct FeatureEncoding {
    /// Rows in each id table (user, live, anchor). Row 0 is reserved for
    /// missing values, so `id_hash_size - 1` buckets carry real ids.
    pub id_hash_size: usize,
    /// Rows in each side-field table.
    pub side_hash_size: usize,
    /// Embedding width for id fields.
    pub id_width: usize,
    /// Embedding width for side fields.
    pub side_width: usize,
    /// Whether the user id gets its own embedding block. Off by default:
    /// user identity is represented by the click history plus side fields.
    pub include_user_id: bool,
    /// At most this many most-recent history entries are pooled.
    pub history_cap: usize,
}

impl Default for FeatureEncoding {
    fn default() -> FeatureEncoding {
        FeatureEncoding {
            id_hash_size: 1 << 16,
            side_hash_size: 64,
            id_width: 32,
            side_width: 8,
            include_user_id: false,
            history_cap: 50,
        }
    }
}

impl FeatureEncoding {
    /// Width of the concatenated model input:
    /// `[live | anchor | pooled history | user? | six side fields]`.
    pub fn input_dim(&self) -> usize {
        let id_blocks = 3 + self.include_user_id as usize;
        id_blocks * self.id_width + SIDE_FIELDS.len() * self.side_width
    }

    /// Embedding tables in canonical order: live, anchor (shared with the
    /// history field), user if enabled, then one per side field.
    pub fn table_dims(&self) -> Vec<(usize, usize)> {
        let mut dims = vec![
            (self.id_hash_size, self.id_width),
            (self.id_hash_size, self.id_width),
        ];
        if self.include_user_id {
            dims.push((self.id_hash_size, self.id_width));
        }
        for _ in SIDE_FIELDS {
            dims.push((self.side_hash_size, self.side_width));
        }
        dims
    }

    pub fn table_names(&self) -> Vec<String> {
        let mut names = vec!["table.live".to_string(), "table.anchor".to_string()];
        if self.include_user_id {
            names.push("table.user".to_string());
        }
        for field in SIDE_FIELDS {
            names.push(format!("table.{field}"));
        }
        names
    }

    pub fn num_tables(&self) -> usize {
        2 + self.include_user_id as usize + SIDE_FIELDS.len()
    }

    fn side_table_slot(&self, field: usize) -> usize {
        2 + self.include_user_id as usize + field
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.id_hash_size < 2 || self.side_hash_size < 2 {
            return Err("hash sizes must be at least 2 (row 0 is reserved)".into());
        }
        if self.id_width == 0 || self.side_width == 0 {
            return Err("embedding widths must be positive".into());
        }
        if self.history_cap == 0 {
            return Err("history_cap must be positive".into());
        }
        Ok(())
    }
}

fn fnv1a64(parts: &[&[u8]]) -> u64 {
    let mut h = 0xcbf2_9ce4_8422_2325u64;
    for part in parts {
        for &byte in *part {
            h ^= byte as u64;
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        }
    }
    h
}

/// Bucket for `value` in a table of `size` rows. The field tag keeps equal
/// strings in different fields from aliasing; empty values map to the
/// reserved row 0.
pub fn hash_bucket(field: &str, value: &str, size: usize) -> usize {
    debug_assert!(size >= 2);
    if value.is_empty() {
        return 0;
    }
    let h = fnv1a64(&[field.as_bytes(), b":", value.as_bytes()]);
    1 + (h % (size as u64 - 1)) as usize
}

/// Table rows for one sample, resolved from the raw strings.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EncodedFeatures {
    pub live: usize,
    pub anchor: usize,
    pub user: Option<usize>,
    /// Anchor-table rows to mean-pool; `[0]` when the history is empty so
    /// pooling is always defined.
    pub history: Vec<usize>,
    pub side: [usize; SIDE_FIELDS.len()],
}

/// Hash a (user, live-room) pair into table rows. History ids are hashed
/// with the anchor-id tag so history entries share rows — and therefore
/// embeddings — with the anchor field.
pub fn encode(
    user: &UserProfile,
    live: &LiveRoomSnapshot,
    enc: &FeatureEncoding,
) -> EncodedFeatures {
    let ids = enc.id_hash_size;
    let start = user.click_anchor_history.len().saturating_sub(enc.history_cap);
    let mut history: Vec<usize> = user.click_anchor_history[start..]
        .iter()
        .map(|a| hash_bucket("anchor_id", a, ids))
        .collect();
    if history.is_empty() {
        history.push(0);
    }
    let side_values = [
        user.gender.as_str(),
        user.age_bucket.as_str(),
        user.city.as_str(),
        live.live_type.as_str(),
        live.anchor_gender.as_str(),
        live.anchor_type.as_str(),
    ];
    let mut side = [0usize; SIDE_FIELDS.len()];
    for (i, (field, value)) in SIDE_FIELDS.iter().zip(side_values).enumerate() {
        side[i] = hash_bucket(field, value, enc.side_hash_size);
    }
    EncodedFeatures {
        live: hash_bucket("live_id", &live.live_id, ids),
        anchor: hash_bucket("anchor_id", &live.anchor_id, ids),
        user: enc
            .include_user_id
            .then(|| hash_bucket("user_id", &user.user_id, ids)),
        history,
        side,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Architecture {
    SharedBottom,
    Mmoe,
}

impl Architecture {
    pub fn name(self) -> &'static str {
        match self {
            Architecture::SharedBottom => "shared-bottom",
            Architecture::Mmoe => "mmoe",
        }
    }

    pub fn parse(s: &str) -> Option<Architecture> {
        match s {
            "shared-bottom" | "shared_bottom" => Some(Architecture::SharedBottom),
            "mmoe" => Some(Architecture::Mmoe),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub arch: Architecture,
    pub encoding: FeatureEncoding,
    /// Hidden sizes of the shared bottom (shared-bottom architecture).
    pub bottom_hidden: Vec<usize>,
    pub num_experts: usize,
    /// Hidden sizes of each expert (mixture-of-experts architecture).
    pub expert_hidden: Vec<usize>,
    /// Hidden sizes of each task tower; a 1-unit sigmoid head follows.
    pub tower_hidden: Vec<usize>,
    /// Seed for parameter initialization.
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> ModelConfig {
        ModelConfig {
            arch: Architecture::SharedBottom,
            encoding: FeatureEncoding::default(),
            bottom_hidden: vec![64, 32],
            num_experts: 3,
            expert_hidden: vec![64, 32],
            tower_hidden: vec![32, 32, 16],
            seed: 17,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), String> {
        self.encoding.validate()?;
        if self.tower_hidden.is_empty() {
            return Err("tower_hidden must not be empty".into());
        }
        match self.arch {
            Architecture::SharedBottom if self.bottom_hidden.is_empty() => {
                Err("bottom_hidden must not be empty".into())
            }
            Architecture::Mmoe if self.expert_hidden.is_empty() => {
                Err("expert_hidden must not be empty".into())
            }
            Architecture::Mmoe if self.num_experts == 0 => {
                Err("num_experts must be positive".into())
            }
            _ => Ok(()),
        }
    }
}

/// Per-task weights: `train` scales each task's loss term, `fusion` mixes
/// the three predicted probabilities into one ranking score.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub train: [f64; 3],
    pub fusion: [f64; 3],
}

impl Default for LossWeights {
    fn default() -> LossWeights {
        LossWeights {
            train: [1.0; 3],
            fusion: [1.0; 3],
        }
    }
}

/// Weighted sum of the per-task probabilities, used for ranking.
pub fn fusion_score(probs: [f64; 3], weights: &LossWeights) -> f64 {
    probs
        .iter()
        .zip(weights.fusion)
        .map(|(p, a)| a * p)
        .sum()
}

#[derive(Debug, Clone)]
pub enum Body {
    SharedBottom(Mlp),
    Mmoe {
        experts: Vec<Mlp>,
        /// One gate per task, producing expert mixture logits from the input.
        gates: Vec<Dense>,
    },
}

#[derive(Debug, Clone)]
pub struct TaskHead {
    pub mlp: Mlp,
    /// 1-unit linear head; a sigmoid turns its output into a probability.
    pub out: Dense,
}

#[derive(Debug, Clone)]
pub struct MultiTaskModel {
    pub config: ModelConfig,
    /// Embedding tables in [`FeatureEncoding::table_names`] order.
    pub tables: Vec<Array2<f64>>,
    pub body: Body,
    /// One head per task, in [`TaskKind::ALL`] order.
    pub towers: Vec<TaskHead>,
}

impl MultiTaskModel {
    /// Build a freshly initialized model. Parameters are drawn in a fixed
    /// order from a seeded generator, so equal configs give equal models.
    pub fn new(config: &ModelConfig) -> MultiTaskModel {
        if let Err(msg) = config.validate() {
            panic!("invalid model config: {msg}");
        }
        let mut rng = ChaCha12Rng::seed_from_u64(config.seed);
        let tables = config
            .encoding
            .table_dims()
            .into_iter()
            .map(|(rows, cols)| layers::glorot_matrix(rows, cols, rows, cols, &mut rng))
            .collect();
        let input_dim = config.encoding.input_dim();
        let body = match config.arch {
            Architecture::SharedBottom => {
                Body::SharedBottom(Mlp::init(input_dim, &config.bottom_hidden, &mut rng))
            }
            Architecture::Mmoe => Body::Mmoe {
                experts: (0..config.num_experts)
                    .map(|_| Mlp::init(input_dim, &config.expert_hidden, &mut rng))
                    .collect(),
                gates: (0..TaskKind::ALL.len())
                    .map(|_| Dense::init(input_dim, config.num_experts, &mut rng))
                    .collect(),
            },
        };
        let tower_in = match &body {
            Body::SharedBottom(mlp) => mlp.out_dim(),
            Body::Mmoe { experts, .. } => experts[0].out_dim(),
        };
        let towers = TaskKind::ALL
            .iter()
            .map(|_| TaskHead {
                mlp: Mlp::init(tower_in, &config.tower_hidden, &mut rng),
                out: Dense::init(*config.tower_hidden.last().unwrap(), 1, &mut rng),
            })
            .collect();
        MultiTaskModel {
            config: config.clone(),
            tables,
            body,
            towers,
        }
    }

    /// Dense layers in gradient/optimizer visit order: body (experts then
    /// gates for the mixture), then each tower's hidden layers and head.
    fn dense_layers(&self) -> Vec<&Dense> {
        let mut out = Vec::new();
        match &self.body {
            Body::SharedBottom(mlp) => out.extend(mlp.layers.iter()),
            Body::Mmoe { experts, gates } => {
                for expert in experts {
                    out.extend(expert.layers.iter());
                }
                out.extend(gates.iter());
            }
        }
        for tower in &self.towers {
            out.extend(tower.mlp.layers.iter());
            out.push(&tower.out);
        }
        out
    }

    fn dense_layers_mut(&mut self) -> Vec<&mut Dense> {
        let mut out = Vec::new();
        match &mut self.body {
            Body::SharedBottom(mlp) => out.extend(mlp.layers.iter_mut()),
            Body::Mmoe { experts, gates } => {
                for expert in experts {
                    out.extend(expert.layers.iter_mut());
                }
                out.extend(gates.iter_mut());
            }
        }
        for tower in &mut self.towers {
            out.extend(tower.mlp.layers.iter_mut());
            out.push(&mut tower.out);
        }
        out
    }

    pub fn dense_names(&self) -> Vec<String> {
        let mut names = Vec::new();
        match &self.body {
            Body::SharedBottom(mlp) => {
                names.extend((0..mlp.layers.len()).map(|i| format!("bottom.{i}")));
            }
            Body::Mmoe { experts, gates } => {
                for (e, expert) in experts.iter().enumerate() {
                    names.extend((0..expert.layers.len()).map(|i| format!("expert.{e}.{i}")));
                }
                names.extend((0..gates.len()).map(|t| format!("gate.{}", TaskKind::ALL[t].as_str())));
            }
        }
        for (t, tower) in self.towers.iter().enumerate() {
            let task = TaskKind::ALL[t].as_str();
            names.extend((0..tower.mlp.layers.len()).map(|i| format!("tower.{task}.{i}")));
            names.push(format!("tower.{task}.out"));
        }
        names
    }

    pub fn dense_shapes(&self) -> Vec<(usize, usize)> {
        self.dense_layers()
            .iter()
            .map(|l| (l.out_dim(), l.in_dim()))
            .collect()
    }

    pub fn table_shapes(&self) -> Vec<(usize, usize)> {
        self.config.encoding.table_dims()
    }

    /// Fresh Adam state sized for this model.
    pub fn optimizer(&self, config: AdamConfig) -> AdamState {
        AdamState::new(config, &self.dense_shapes(), &self.table_shapes())
    }

    /// All parameter tensors with stable names: tables first (matrices, in
    /// `table_names` order), then for each dense layer in `dense_names`
    /// order its weight matrix (`<name>.w`) and bias vector (`<name>.b`).
    pub fn named_tensors(&self) -> Vec<(String, TensorRef<'_>)> {
        let mut out: Vec<(String, TensorRef<'_>)> = self
            .config
            .encoding
            .table_names()
            .into_iter()
            .zip(self.tables.iter())
            .map(|(name, t)| (name, TensorRef::Matrix(t)))
            .collect();
        for (name, layer) in self.dense_names().into_iter().zip(self.dense_layers()) {
            out.push((format!("{name}.w"), TensorRef::Matrix(&layer.w)));
            out.push((format!("{name}.b"), TensorRef::Vector(&layer.b)));
        }
        out
    }

    /// Mutable variant of [`named_tensors`](Self::named_tensors), same order.
    pub fn named_tensors_mut(&mut self) -> Vec<(String, TensorMut<'_>)> {
        let table_names = self.config.encoding.table_names();
        let dense_names = self.dense_names();
        let MultiTaskModel {
            tables,
            body,
            towers,
            ..
        } = self;
        let mut out: Vec<(String, TensorMut<'_>)> = table_names
            .into_iter()
            .zip(tables.iter_mut())
            .map(|(name, t)| (name, TensorMut::Matrix(t)))
            .collect();
        let mut layers: Vec<&mut Dense> = Vec::new();
        match body {
            Body::SharedBottom(mlp) => layers.extend(mlp.layers.iter_mut()),
            Body::Mmoe { experts, gates } => {
                for expert in experts {
                    layers.extend(expert.layers.iter_mut());
                }
                layers.extend(gates.iter_mut());
            }
        }
        for tower in towers {
            layers.extend(tower.mlp.layers.iter_mut());
            layers.push(&mut tower.out);
        }
        for (name, layer) in dense_names.into_iter().zip(layers) {
            let Dense { w, b } = layer;
            out.push((format!("{name}.w"), TensorMut::Matrix(w)));
            out.push((format!("{name}.b"), TensorMut::Vector(b)));
        }
        out
    }

    /// Concatenate embedding lookups into the input matrix `(B, input_dim)`.
    pub fn assemble_input(&self, batch: &[EncodedFeatures]) -> Array2<f64> {
        let enc = &self.config.encoding;
        let w = enc.id_width;
        let mut x = Array2::zeros((batch.len(), enc.input_dim()));
        for (i, f) in batch.iter().enumerate() {
            let mut row = x.row_mut(i);
            let mut off = 0;
            for v in self.tables[0].row(f.live) {
                row[off] = *v;
                off += 1;
            }
            for v in self.tables[1].row(f.anchor) {
                row[off] = *v;
                off += 1;
            }
            // Mean-pooled history, sharing the anchor table.
            let scale = 1.0 / f.history.len() as f64;
            for &h in &f.history {
                for (j, v) in self.tables[1].row(h).iter().enumerate() {
                    row[off + j] += scale * v;
                }
            }
            off += w;
            if let Some(u) = f.user {
                for v in self.tables[2].row(u) {
                    row[off] = *v;
                    off += 1;
                }
            }
            for (j, &s) in f.side.iter().enumerate() {
                let table = &self.tables[enc.side_table_slot(j)];
                for v in table.row(s) {
                    row[off] = *v;
                    off += 1;
                }
            }
            debug_assert_eq!(off, row.len());
        }
        x
    }

    pub fn forward(&self, batch: &[EncodedFeatures]) -> ForwardCache {
        let x = self.assemble_input(batch);
        let bsz = batch.len();
        let (body_cache, task_inputs): (BodyCache, Vec<Array2<f64>>) = match &self.body {
            Body::SharedBottom(mlp) => {
                let cache = mlp.forward(&x);
                let shared = cache.out.clone();
                (
                    BodyCache::SharedBottom(cache),
                    vec![shared.clone(), shared.clone(), shared],
                )
            }
            Body::Mmoe { experts, gates } => {
                let expert_caches: Vec<MlpCache> = experts.iter().map(|e| e.forward(&x)).collect();
                let d = experts[0].out_dim();
                let mut gate_probs = Vec::with_capacity(gates.len());
                let mut mixed = Vec::with_capacity(gates.len());
                for gate in gates {
                    let g = softmax(&gate.forward(&x));
                    let mut t = Array2::zeros((bsz, d));
                    for (e, cache) in expert_caches.iter().enumerate() {
                        for i in 0..bsz {
                            let gi = g[[i, e]];
                            for j in 0..d {
                                t[[i, j]] += gi * cache.out[[i, j]];
                            }
                        }
                    }
                    gate_probs.push(g);
                    mixed.push(t);
                }
                let task_inputs = mixed.clone();
                (
                    BodyCache::Mmoe {
                        expert_caches,
                        gate_probs,
                        mixed,
                    },
                    task_inputs,
                )
            }
        };
        let mut probs = Array2::zeros((bsz, TaskKind::ALL.len()));
        let mut tower_caches = Vec::with_capacity(self.towers.len());
        for (t, tower) in self.towers.iter().enumerate() {
            let cache = tower.mlp.forward(&task_inputs[t]);
            let z = tower.out.forward(&cache.out);
            for i in 0..bsz {
                probs[[i, t]] = sigmoid(z[[i, 0]]);
            }
            tower_caches.push(cache);
        }
        ForwardCache {
            x,
            body: body_cache,
            towers: tower_caches,
            probs,
        }
    }

    pub fn predict_batch(&self, batch: &[EncodedFeatures]) -> Array2<f64> {
        self.forward(batch).probs
    }

    pub fn predict(&self, features: &EncodedFeatures) -> [f64; 3] {
        let probs = self.predict_batch(std::slice::from_ref(features));
        [probs[[0, 0]], probs[[0, 1]], probs[[0, 2]]]
    }

    /// Fused ranking score for one candidate.
    pub fn score(&self, features: &EncodedFeatures, weights: &LossWeights) -> f64 {
        fusion_score(self.predict(features), weights)
    }

    pub fn zero_gradients(&self) -> Gradients {
        Gradients {
            tables: vec![BTreeMap::new(); self.tables.len()],
            dense: self
                .dense_layers()
                .iter()
                .map(|l| DenseGrad::zeros_like(l))
                .collect(),
        }
    }

    pub fn loss(
        &self,
        batch: &[EncodedFeatures],
        targets: &[Targets],
        weights: &LossWeights,
    ) -> LossBreakdown {
        batch_loss(&self.forward(batch).probs, targets, weights)
    }

    /// Loss plus exact gradients for one batch. Tasks with no present label
    /// contribute neither loss nor gradient.
    pub fn loss_and_gradients(
        &self,
        batch: &[EncodedFeatures],
        targets: &[Targets],
        weights: &LossWeights,
    ) -> (LossBreakdown, Gradients) {
        assert_eq!(batch.len(), targets.len());
        let fwd = self.forward(batch);
        let loss = batch_loss(&fwd.probs, targets, weights);
        let bsz = batch.len();
        let mut grads = self.zero_gradients();

        // Dense-grad slot layout mirrors dense_layers(): body first, then
        // per-tower (hidden layers, head).
        let n_body = match &self.body {
            Body::SharedBottom(mlp) => mlp.layers.len(),
            Body::Mmoe { experts, gates } => {
                experts.iter().map(|e| e.layers.len()).sum::<usize>() + gates.len()
            }
        };
        let tower_span = self.config.tower_hidden.len() + 1;

        // ∂L/∂tower-input per task.
        let mut d_task_inputs = Vec::with_capacity(self.towers.len());
        for (t, tower) in self.towers.iter().enumerate() {
            let n = loss.present[t];
            let mut dz = Array2::zeros((bsz, 1));
            if n > 0 {
                let scale = weights.train[t] / n as f64;
                for (i, target) in targets.iter().enumerate() {
                    if let Some(y) = target[t] {
                        dz[[i, 0]] = scale * (fwd.probs[[i, t]] - y);
                    }
                }
            }
            let start = n_body + t * tower_span;
            let dh = tower.out.backward(
                &fwd.towers[t].out,
                &dz,
                &mut grads.dense[start + tower_span - 1],
            );
            let d_in = tower.mlp.backward(
                &fwd.towers[t],
                &dh,
                &mut grads.dense[start..start + tower_span - 1],
            );
            d_task_inputs.push(d_in);
        }

        let dx = match (&self.body, &fwd.body) {
            (Body::SharedBottom(mlp), BodyCache::SharedBottom(cache)) => {
                let mut d_shared = d_task_inputs[0].clone();
                d_shared += &d_task_inputs[1];
                d_shared += &d_task_inputs[2];
                mlp.backward(cache, &d_shared, &mut grads.dense[..n_body])
            }
            (
                Body::Mmoe { experts, gates },
                BodyCache::Mmoe {
                    expert_caches,
                    gate_probs,
                    ..
                },
            ) => {
                let n_expert = experts.len();
                let d = experts[0].out_dim();
                let mut dx = Array2::zeros((bsz, self.config.encoding.input_dim()));
                let mut d_expert_out = vec![Array2::zeros((bsz, d)); n_expert];
                let expert_layer_count: Vec<usize> =
                    experts.iter().map(|e| e.layers.len()).collect();
                let gates_start: usize = expert_layer_count.iter().sum();
                for (t, gate) in gates.iter().enumerate() {
                    let dt = &d_task_inputs[t];
                    let g = &gate_probs[t];
                    // Mixture backward: outputs get the gated share of the
                    // gradient; gate logits get the softmax pullback of the
                    // per-expert alignment scores.
                    let mut dg = Array2::zeros((bsz, n_expert));
                    for (e, cache) in expert_caches.iter().enumerate() {
                        for i in 0..bsz {
                            let gi = g[[i, e]];
                            let mut dot = 0.0;
                            for j in 0..d {
                                d_expert_out[e][[i, j]] += gi * dt[[i, j]];
                                dot += dt[[i, j]] * cache.out[[i, j]];
                            }
                            dg[[i, e]] = dot;
                        }
                    }
                    let mut dlogits = Array2::zeros((bsz, n_expert));
                    for i in 0..bsz {
                        let mut inner = 0.0;
                        for e in 0..n_expert {
                            inner += g[[i, e]] * dg[[i, e]];
                        }
                        for e in 0..n_expert {
                            dlogits[[i, e]] = g[[i, e]] * (dg[[i, e]] - inner);
                        }
                    }
                    dx += &gate.backward(&fwd.x, &dlogits, &mut grads.dense[gates_start + t]);
                }
                let mut slot = 0;
                for (e, expert) in experts.iter().enumerate() {
                    let span = expert_layer_count[e];
                    dx += &expert.backward(
                        &expert_caches[e],
                        &d_expert_out[e],
                        &mut grads.dense[slot..slot + span],
                    );
                    slot += span;
                }
                dx
            }
            _ => unreachable!("forward cache kind always matches the body"),
        };

        self.scatter_input_grads(batch, &dx, &mut grads);
        (loss, grads)
    }

    /// Distribute `∂L/∂x` back onto the embedding-table rows each sample
    /// gathered from.
    fn scatter_input_grads(
        &self,
        batch: &[EncodedFeatures],
        dx: &Array2<f64>,
        grads: &mut Gradients,
    ) {
        let enc = &self.config.encoding;
        let w = enc.id_width;
        let sw = enc.side_width;
        for (i, f) in batch.iter().enumerate() {
            let row = dx.row(i);
            let mut off = 0;
            add_row_grad(&mut grads.tables[0], f.live, &row.as_slice().unwrap()[off..off + w]);
            off += w;
            add_row_grad(&mut grads.tables[1], f.anchor, &row.as_slice().unwrap()[off..off + w]);
            off += w;
            // Mean pooling splits the gradient evenly across history rows.
            let scale = 1.0 / f.history.len() as f64;
            let hist_seg: Vec<f64> = row.as_slice().unwrap()[off..off + w]
                .iter()
                .map(|v| v * scale)
                .collect();
            for &h in &f.history {
                add_row_grad(&mut grads.tables[1], h, &hist_seg);
            }
            off += w;
            if let Some(u) = f.user {
                add_row_grad(&mut grads.tables[2], u, &row.as_slice().unwrap()[off..off + w]);
                off += w;
            }
            for (j, &s) in f.side.iter().enumerate() {
                let slot = enc.side_table_slot(j);
                add_row_grad(&mut grads.tables[slot], s, &row.as_slice().unwrap()[off..off + sw]);
                off += sw;
            }
        }
    }

    fn check_finite(&self, grads: &Gradients, step: u64) -> Result<(), TrainError> {
        let table_names = self.config.encoding.table_names();
        for (t, rows) in grads.tables.iter().enumerate() {
            for g in rows.values() {
                if g.iter().any(|v| !v.is_finite()) {
                    return Err(TrainError::NonFiniteGradient {
                        tensor: table_names[t].clone(),
                        step,
                    });
                }
            }
        }
        let dense_names = self.dense_names();
        for (j, g) in grads.dense.iter().enumerate() {
            if g.w.iter().any(|v| !v.is_finite()) {
                return Err(TrainError::NonFiniteGradient {
                    tensor: format!("{}.w", dense_names[j]),
                    step,
                });
            }
            if g.b.iter().any(|v| !v.is_finite()) {
                return Err(TrainError::NonFiniteGradient {
                    tensor: format!("{}.b", dense_names[j]),
                    step,
                });
            }
        }
        Ok(())
    }

    /// One optimizer step on a batch. Refuses to apply non-finite gradients.
    pub fn train_step(
        &mut self,
        adam: &mut AdamState,
        batch: &[EncodedFeatures],
        targets: &[Targets],
        weights: &LossWeights,
    ) -> Result<LossBreakdown, TrainError> {
        let (loss, grads) = self.loss_and_gradients(batch, targets, weights);
        self.check_finite(&grads, adam.step + 1)?;
        adam.step += 1;
        for (t, rows) in grads.tables.iter().enumerate() {
            adam.apply_table(t, &mut self.tables[t], rows);
        }
        for (j, layer) in self.dense_layers_mut().into_iter().enumerate() {
            adam.apply_dense(j, &mut layer.w, &mut layer.b, &grads.dense[j].w, &grads.dense[j].b);
        }
        Ok(loss)
    }
}

/// One tensor's worth of accumulated row gradients.
fn add_row_grad(rows: &mut BTreeMap<usize, Array1<f64>>, row: usize, seg: &[f64]) {
    let entry = rows
        .entry(row)
        .or_insert_with(|| Array1::zeros(seg.len()));
    for (dst, src) in entry.iter_mut().zip(seg) {
        *dst += src;
    }
}

#[derive(Debug)]
pub enum TensorRef<'a> {
    Matrix(&'a Array2<f64>),
    Vector(&'a Array1<f64>),
}

impl TensorRef<'_> {
    pub fn shape(&self) -> Vec<usize> {
        match self {
            TensorRef::Matrix(m) => m.shape().to_vec(),
            TensorRef::Vector(v) => vec![v.len()],
        }
    }

    pub fn iter(&self) -> Box<dyn Iterator<Item = f64> + '_> {
        match self {
            TensorRef::Matrix(m) => Box::new(m.iter().copied()),
            TensorRef::Vector(v) => Box::new(v.iter().copied()),
        }
    }
}

#[derive(Debug)]
pub enum TensorMut<'a> {
    Matrix(&'a mut Array2<f64>),
    Vector(&'a mut Array1<f64>),
}

impl TensorMut<'_> {
    pub fn len(&self) -> usize {
        match self {
            TensorMut::Matrix(m) => m.len(),
            TensorMut::Vector(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Flat (row-major) element access, for perturbation and loading.
    pub fn get_flat(&self, idx: usize) -> f64 {
        match self {
            TensorMut::Matrix(m) => *m.as_slice().unwrap().get(idx).expect("index in range"),
            TensorMut::Vector(v) => v[idx],
        }
    }

    pub fn set_flat(&mut self, idx: usize, value: f64) {
        match self {
            TensorMut::Matrix(m) => m.as_slice_mut().unwrap()[idx] = value,
            TensorMut::Vector(v) => v[idx] = value,
        }
    }
}

/// Forward-pass activations kept for backprop.
pub struct ForwardCache {
    pub x: Array2<f64>,
    body: BodyCache,
    towers: Vec<MlpCache>,
    /// Predicted probabilities, `(B, 3)` in task order.
    pub probs: Array2<f64>,
}

enum BodyCache {
    SharedBottom(MlpCache),
    Mmoe {
        expert_caches: Vec<MlpCache>,
        /// Softmax gate outputs per task, each `(B, num_experts)`.
        gate_probs: Vec<Array2<f64>>,
        #[allow(dead_code)]
        mixed: Vec<Array2<f64>>,
    },
}

/// Per-task regression targets; `None` marks an absent label.
pub type Targets = [Option<f64>; 3];

pub fn targets_from_labels(labels: &TaskLabels) -> Targets {
    [
        labels.click.target(),
        labels.follow.target(),
        labels.like.target(),
    ]
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossBreakdown {
    /// Weighted sum of the per-task means.
    pub total: f64,
    /// Per-task mean log loss over present labels (0 when none present).
    pub task: [f64; 3],
    /// Present-label counts per task.
    pub present: [usize; 3],
}

/// Mean binary log loss per task over present labels, with probabilities
/// clipped away from 0 and 1 before the log.
pub fn batch_loss(probs: &Array2<f64>, targets: &[Targets], weights: &LossWeights) -> LossBreakdown {
    assert_eq!(probs.nrows(), targets.len());
    let mut task = [0.0; 3];
    let mut present = [0usize; 3];
    for (i, target) in targets.iter().enumerate() {
        for t in 0..3 {
            if let Some(y) = target[t] {
                let p = probs[[i, t]].clamp(PROB_CLIP, 1.0 - PROB_CLIP);
                task[t] -= y * p.ln() + (1.0 - y) * (1.0 - p).ln();
                present[t] += 1;
            }
        }
    }
    let mut total = 0.0;
    for t in 0..3 {
        if present[t] > 0 {
            task[t] /= present[t] as f64;
        }
        total += weights.train[t] * task[t];
    }
    LossBreakdown {
        total,
        task,
        present,
    }
}

/// Accumulated gradients for one batch. `tables[i]` holds sparse row grads
/// for the i-th embedding table; `dense[j]` mirrors the j-th dense layer.
/// Both indices follow the model's canonical tensor order.
#[derive(Debug, Clone)]
pub struct Gradients {
    pub tables: Vec<BTreeMap<usize, Array1<f64>>>,
    pub dense: Vec<DenseGrad>,
}

impl Gradients {
    /// Gradient for the element `(row, col)` of the tensor at position
    /// `tensor_idx` in [`MultiTaskModel::named_tensors`] order (`col` is
    /// ignored for bias vectors). Untouched table rows read as 0.
    pub fn tensor_value(&self, num_tables: usize, tensor_idx: usize, row: usize, col: usize) -> f64 {
        if tensor_idx < num_tables {
            return self.tables[tensor_idx]
                .get(&row)
                .map_or(0.0, |g| g[col]);
        }
        let rest = tensor_idx - num_tables;
        let grad = &self.dense[rest / 2];
        if rest % 2 == 0 {
            grad.w[[row, col]]
        } else {
            grad.b[row]
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error("non-finite gradient in tensor {tensor} at step {step}")]
    NonFiniteGradient { tensor: String, step: u64 },
    #[error("label stream not sorted by emit time: sample {index} at {ts} follows {prev}")]
    UnsortedStream {
        index: usize,
        ts: Timestamp,
        prev: Timestamp,
    },
    #[error("label stream references unknown session {key}")]
    UnknownSession { key: SessionKey },
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct FitOptions {
    pub batch_size: usize,
    pub weights: LossWeights,
    pub adam: AdamConfig,
}

impl Default for FitOptions {
    fn default() -> FitOptions {
        FitOptions {
            batch_size: 512,
            weights: LossWeights::default(),
            adam: AdamConfig::default(),
        }
    }
}

/// One optimizer step's summary for the training trace.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TraceRow {
    pub step: u64,
    /// Emit time of the newest sample the step consumed.
    pub frontier: Timestamp,
    pub loss: f64,
    pub task_loss: [f64; 3],
}

#[derive(Debug, Clone, Copy, PartialEq, Default, serde::Serialize, serde::Deserialize)]
pub struct FitStats {
    pub steps: u64,
    pub samples: usize,
    /// Mean of per-step total losses.
    pub mean_loss: f64,
}

/// Train through a label stream in emit order. The stream must be sorted by
/// `emit_ts` and every sample must resolve in `sessions`; features come from
/// the session as it looked at request time, so nothing later than the
/// sample's emit time leaks in.
pub fn streaming_fit(
    model: &mut MultiTaskModel,
    adam: &mut AdamState,
    samples: &[LabeledSample],
    sessions: &SessionStore,
    opts: &FitOptions,
    mut trace: Option<&mut Vec<TraceRow>>,
) -> Result<FitStats, TrainError> {
    assert!(opts.batch_size > 0, "batch_size must be positive");
    let mut stats = FitStats::default();
    let mut loss_sum = 0.0;
    let mut batch: Vec<EncodedFeatures> = Vec::with_capacity(opts.batch_size);
    let mut targets: Vec<Targets> = Vec::with_capacity(opts.batch_size);
    let mut prev: Option<Timestamp> = None;
    let mut frontier = Timestamp(0);

    let flush = |model: &mut MultiTaskModel,
                     adam: &mut AdamState,
                     batch: &mut Vec<EncodedFeatures>,
                     targets: &mut Vec<Targets>,
                     frontier: Timestamp,
                     stats: &mut FitStats,
                     loss_sum: &mut f64,
                     trace: &mut Option<&mut Vec<TraceRow>>|
     -> Result<(), TrainError> {
        if batch.is_empty() {
            return Ok(());
        }
        let loss = model.train_step(adam, batch, targets, &opts.weights)?;
        stats.steps += 1;
        stats.samples += batch.len();
        *loss_sum += loss.total;
        if let Some(rows) = trace.as_deref_mut() {
            rows.push(TraceRow {
                step: adam.step,
                frontier,
                loss: loss.total,
                task_loss: loss.task,
            });
        }
        batch.clear();
        targets.clear();
        Ok(())
    };

    for (index, sample) in samples.iter().enumerate() {
        if let Some(p) = prev {
            if sample.emit_ts < p {
                return Err(TrainError::UnsortedStream {
                    index,
                    ts: sample.emit_ts,
                    prev: p,
                });
            }
        }
        prev = Some(sample.emit_ts);
        let session = sessions
            .get(&sample.session)
            .ok_or_else(|| TrainError::UnknownSession {
                key: sample.session.clone(),
            })?;
        batch.push(encode(&session.user, &session.live, &model.config.encoding));
        targets.push(targets_from_labels(&sample.labels));
        frontier = sample.emit_ts;
        if batch.len() == opts.batch_size {
            flush(
                model, adam, &mut batch, &mut targets, frontier, &mut stats, &mut loss_sum,
                &mut trace,
            )?;
        }
    }
    flush(
        model, adam, &mut batch, &mut targets, frontier, &mut stats, &mut loss_sum, &mut trace,
    )?;
    if stats.steps > 0 {
        stats.mean_loss = loss_sum / stats.steps as f64;
    }
    Ok(stats)
}

/// Convenience: encode a session's features with this model's encoding.
pub fn encode_session(model: &MultiTaskModel, session: &ImpressionSession) -> EncodedFeatures {
    encode(&session.user, &session.live, &model.config.encoding)
}

/// Write a training trace as CSV.
pub fn write_trace(path: &Path, rows: &[TraceRow]) -> std::io::Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(out, "step,frontier_ts,loss,loss_click,loss_follow,loss_like")?;
    for r in rows {
        writeln!(
            out,
            "{},{},{},{},{},{}",
            r.step, r.frontier.0, r.loss, r.task_loss[0], r.task_loss[1], r.task_loss[2]
        )?;
    }
    out.flush()
}
