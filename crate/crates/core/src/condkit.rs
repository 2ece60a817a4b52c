//! Conditioning toolkit: prompt embeddings, Temporal Scene Attention, and
//! Audio-Visual Nexus Alignment.
//!
//! Three stages turn raw conditioning inputs into model-ready tokens:
//!
//! 1. **Prompt encoding** — a learned embedding table maps class labels to
//!    dense prompt vectors (a trainable stand-in for a pooled text encoder).
//! 2. **Temporal Scene Attention (TSA)** — per-frame features are refined
//!    residually and aggregated into a global scene summary by single-head
//!    additive attention (`score_k = wᵀ tanh(W s_k)`, softmax over frames).
//! 3. **Audio-Visual Nexus Alignment (AVNA)** — refined frame features are
//!    resampled onto the audio-token timeline by nearest-neighbor matching
//!    on normalized time grids, yielding one visual token per audio token.
//!    An alternative strategy matches in embedding space instead (cosine
//!    nearest neighbor against projected audio tokens); the time-grid form
//!    is the default because it is deterministic, monotone, and free of
//!    trainable parts.
//!
//! Every stage exists in two forms: a tape version used inside training
//! graphs (gradients flow into the table, the refinement, and the scoring
//! head) and a plain version producing the domain types below for
//! inspection and evaluation. Both compute identical values.

use ndarray::{Array1, Array2, ArrayD, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{MageError, Result};
use crate::graph::{Tape, Var};
use crate::nn::{init_normal, init_zeros, BoundParams, ParamStore};
use crate::rng::seeded_rng;
use crate::scalar::Scalar;

/// Prompt vector for one class label.
#[derive(Debug, Clone, PartialEq)]
pub struct PromptEmbedding<T: Scalar> {
    /// Dense vector of dimension `cond_dim`.
    pub vector: Array1<T>,
    /// The label the vector was looked up for.
    pub label: usize,
}

impl<T: Scalar> PromptEmbedding<T> {
    /// Checks that the vector is finite.
    pub fn validate(&self) -> Result<()> {
        if self.vector.iter().any(|v| !v.is_finite()) {
            return Err(MageError::Data(
                "prompt embedding contains non-finite values".into(),
            ));
        }
        Ok(())
    }
}

/// Refined per-frame features plus their attention summary.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneFeatures<T: Scalar> {
    /// Refined frame features, one row per frame (`[T_v, cond_dim]`).
    pub per_frame: Array2<T>,
    /// Attention weights over frames; sums to one.
    pub weights: Array1<T>,
    /// Convex combination of `per_frame` rows under `weights`.
    pub global_summary: Array1<T>,
    /// Normalized frame timestamps in `[0, 1]`, strictly increasing.
    pub timestamps: Vec<f64>,
}

impl<T: Scalar> SceneFeatures<T> {
    /// Checks finiteness, weight normalization, and that the summary is the
    /// stated convex combination of the per-frame rows.
    pub fn validate(&self) -> Result<()> {
        let t_v = self.per_frame.nrows();
        if t_v == 0 {
            return Err(MageError::Data(
                "scene features require at least one frame".into(),
            ));
        }
        if self.weights.len() != t_v || self.timestamps.len() != t_v {
            return Err(MageError::Data(
                "scene feature field lengths disagree".into(),
            ));
        }
        if self.per_frame.iter().any(|v| !v.is_finite())
            || self.global_summary.iter().any(|v| !v.is_finite())
        {
            return Err(MageError::Data(
                "scene features contain non-finite values".into(),
            ));
        }
        let weight_sum: f64 = self.weights.iter().map(|w| w.to_f64c()).sum();
        if (weight_sum - 1.0).abs() > 1e-6 {
            return Err(MageError::Data(format!(
                "attention weights sum to {weight_sum}, expected 1"
            )));
        }
        let mut combo = Array1::<f64>::zeros(self.per_frame.ncols());
        for (k, row) in self.per_frame.rows().into_iter().enumerate() {
            let w = self.weights[k].to_f64c();
            for (c, v) in row.iter().enumerate() {
                combo[c] += w * v.to_f64c();
            }
        }
        for (c, v) in self.global_summary.iter().enumerate() {
            if (combo[c] - v.to_f64c()).abs() > 1e-5 {
                return Err(MageError::Data(
                    "global summary is not the weighted frame combination".into(),
                ));
            }
        }
        Ok(())
    }
}

/// Frame features resampled onto the audio-token timeline.
#[derive(Debug, Clone, PartialEq)]
pub struct AlignedScene<T: Scalar> {
    /// One visual token per audio token (`[N, cond_dim]`); every row is a
    /// copy of some `per_frame` row.
    pub tokens: Array2<T>,
    /// For each audio token, the frame index its row was copied from.
    pub source_index: Vec<usize>,
}

impl<T: Scalar> AlignedScene<T> {
    /// Checks that every token row is an exact copy of its source frame.
    pub fn validate(&self, per_frame: &Array2<T>) -> Result<()> {
        if self.tokens.nrows() != self.source_index.len() {
            return Err(MageError::Data(
                "aligned token/index lengths disagree".into(),
            ));
        }
        for (n, &k) in self.source_index.iter().enumerate() {
            if k >= per_frame.nrows() {
                return Err(MageError::Data("aligned source index out of range".into()));
            }
            if self.tokens.row(n) != per_frame.row(k) {
                return Err(MageError::Data(
                    "aligned token is not a copy of its source frame".into(),
                ));
            }
        }
        Ok(())
    }
}

/// How AVNA picks the source frame for each audio token.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AlignStrategy {
    /// Nearest neighbor on normalized time grids (default): deterministic,
    /// parameter-free, and monotone in the frame index.
    TimeGrid,
    /// Cosine nearest neighbor between projected audio tokens and frame
    /// features. Data-dependent; monotonicity is not guaranteed.
    EmbeddingSpace,
}

impl Default for AlignStrategy {
    fn default() -> Self {
        AlignStrategy::TimeGrid
    }
}

/// Dimensions and seed for the conditioning encoders.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CondConfig {
    /// Number of class labels in the prompt vocabulary.
    pub num_classes: usize,
    /// Dimension of raw per-frame features.
    pub frame_dim: usize,
    /// Shared conditioning width: prompt vectors, scene features, and the
    /// attention head all live in this dimension.
    pub cond_dim: usize,
    /// Seed for parameter initialization.
    pub seed: u64,
}

impl CondConfig {
    /// Small profile matched to the compact benchmark.
    pub fn tiny(seed: u64) -> Self {
        CondConfig {
            num_classes: 4,
            frame_dim: 32,
            cond_dim: 64,
            seed,
        }
    }

    /// Checks that all dimensions are positive.
    pub fn validate(&self) -> Result<()> {
        if self.num_classes == 0 || self.frame_dim == 0 || self.cond_dim == 0 {
            return Err(MageError::Config(
                "conditioning dimensions must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// Learned conditioning encoders: prompt table, frame projection, TSA.
#[derive(Debug, Clone)]
pub struct CondEncoder<T: Scalar> {
    pub cfg: CondConfig,
    pub params: ParamStore<T>,
}

/// Tape handles produced by the scene-encoding pipeline.
#[derive(Debug, Clone, Copy)]
pub struct SceneVars {
    /// Refined per-frame features `[T_v, cond_dim]`.
    pub per_frame: Var,
    /// Attention weights `[1, T_v]`.
    pub weights: Var,
    /// Global summary `[1, cond_dim]`.
    pub summary: Var,
}

/// Creates the conditioning parameters (prompt table, frame projection,
/// TSA heads) in `params`. Shared by the standalone encoder and by models
/// that absorb these parameters into a larger store for joint training.
pub fn init_cond_params<T: Scalar>(cfg: &CondConfig, params: &mut ParamStore<T>) {
    let mut rng = seeded_rng(cfg.seed, "cond-init", 0);
    let d = cfg.cond_dim;
    params.insert(
        "prompt.table",
        init_normal(&mut rng, &[cfg.num_classes, d], 1.0),
    );
    params.insert(
        "vis.in.w",
        init_normal(
            &mut rng,
            &[cfg.frame_dim, d],
            (1.0 / cfg.frame_dim as f64).sqrt(),
        ),
    );
    params.insert("vis.in.b", init_zeros(&[d]));
    params.insert(
        "tsa.score.w1",
        init_normal(&mut rng, &[d, d], (1.0 / d as f64).sqrt()),
    );
    params.insert(
        "tsa.score.w2",
        init_normal(&mut rng, &[d, 1], (1.0 / d as f64).sqrt()),
    );
    params.insert("tsa.refine.w", init_zeros(&[d, d]));
    params.insert("tsa.refine.b", init_zeros(&[d]));
}

/// Looks up prompt rows for a batch of labels: `[len, cond_dim]`.
pub fn encode_prompt_tape<T: Scalar>(
    cfg: &CondConfig,
    tape: &mut Tape<T>,
    bound: &BoundParams,
    labels: &[usize],
) -> Result<Var> {
    for &label in labels {
        if label >= cfg.num_classes {
            return Err(MageError::Data(format!(
                "label {label} outside vocabulary of {} classes",
                cfg.num_classes
            )));
        }
    }
    let table = bound.var("prompt.table");
    Ok(tape.gather_rows(table, labels.to_vec()))
}

/// Projects raw frame features into the conditioning space:
/// `[T_v, frame_dim] -> [T_v, cond_dim]`.
pub fn project_frames_tape<T: Scalar>(
    cfg: &CondConfig,
    tape: &mut Tape<T>,
    bound: &BoundParams,
    frames: &Array2<T>,
) -> Result<Var> {
    if frames.ncols() != cfg.frame_dim {
        return Err(MageError::Data(format!(
            "frame features have dim {}, expected {}",
            frames.ncols(),
            cfg.frame_dim
        )));
    }
    if frames.nrows() == 0 {
        return Err(MageError::Data("frame sequence is empty".into()));
    }
    let x = tape.constant(frames.clone().into_dyn());
    let w = bound.var("vis.in.w");
    let b = bound.var("vis.in.b");
    let proj = tape.matmul(x, w);
    Ok(tape.add_row(proj, b))
}

/// Temporal Scene Attention over projected features `[T_v, cond_dim]`.
///
/// Scores come from the additive head on the *input* features; the output
/// rows carry a residual linear refinement; the summary is the
/// softmax-weighted combination of the refined rows.
pub fn tsa_tape<T: Scalar>(tape: &mut Tape<T>, bound: &BoundParams, feats: Var) -> SceneVars {
    let w1 = bound.var("tsa.score.w1");
    let w2 = bound.var("tsa.score.w2");
    let rw = bound.var("tsa.refine.w");
    let rb = bound.var("tsa.refine.b");

    let hidden = tape.matmul(feats, w1);
    let hidden = tape.tanh(hidden);
    let scores = tape.matmul(hidden, w2); // [T_v, 1]
    let scores_row = tape.transpose2(scores); // [1, T_v]
    let weights = tape.softmax_rows(scores_row); // [1, T_v]

    let refine = tape.matmul(feats, rw);
    let refine = tape.add_row(refine, rb);
    let refined = tape.add(feats, refine); // [T_v, cond_dim]

    let summary = tape.matmul(weights, refined); // [1, cond_dim]
    SceneVars {
        per_frame: refined,
        weights,
        summary,
    }
}

/// Full scene pipeline on the tape: project, then TSA.
pub fn encode_scene_tape<T: Scalar>(
    cfg: &CondConfig,
    tape: &mut Tape<T>,
    bound: &BoundParams,
    frames: &Array2<T>,
) -> Result<SceneVars> {
    let proj = project_frames_tape(cfg, tape, bound, frames)?;
    Ok(tsa_tape(tape, bound, proj))
}

impl<T: Scalar> CondEncoder<T> {
    /// Initializes the prompt table, frame projection, and TSA parameters.
    pub fn new(cfg: CondConfig) -> Result<Self> {
        cfg.validate()?;
        let mut params = ParamStore::new();
        init_cond_params(&cfg, &mut params);
        Ok(CondEncoder { cfg, params })
    }

    /// Looks up prompt rows for a batch of labels: `[len, cond_dim]`.
    pub fn encode_prompt_tape(
        &self,
        tape: &mut Tape<T>,
        bound: &BoundParams,
        labels: &[usize],
    ) -> Result<Var> {
        encode_prompt_tape(&self.cfg, tape, bound, labels)
    }

    /// Looks up one prompt vector without building a graph.
    pub fn encode_prompt(&self, label: usize) -> Result<PromptEmbedding<T>> {
        if label >= self.cfg.num_classes {
            return Err(MageError::Data(format!(
                "label {label} outside vocabulary of {} classes",
                self.cfg.num_classes
            )));
        }
        let table = self.params.get("prompt.table");
        let table2 = table
            .view()
            .into_dimensionality::<ndarray::Ix2>()
            .expect("prompt table is 2-d");
        Ok(PromptEmbedding {
            vector: table2.row(label).to_owned(),
            label,
        })
    }

    /// Full scene pipeline on the tape: project, then TSA.
    pub fn encode_scene_tape(
        &self,
        tape: &mut Tape<T>,
        bound: &BoundParams,
        frames: &Array2<T>,
    ) -> Result<SceneVars> {
        encode_scene_tape(&self.cfg, tape, bound, frames)
    }

    /// Plain scene pipeline producing the domain type (no gradients).
    pub fn encode_scene(&self, frames: &Array2<T>) -> Result<SceneFeatures<T>> {
        let mut tape = Tape::new();
        let bound = self.params.bind_frozen(&mut tape);
        let vars = self.encode_scene_tape(&mut tape, &bound, frames)?;
        let per_frame = to2(tape.value(vars.per_frame));
        let weights_row = to2(tape.value(vars.weights));
        let summary_row = to2(tape.value(vars.summary));
        let t_v = per_frame.nrows();
        let timestamps = (0..t_v).map(|k| frame_time(k, t_v)).collect();
        let scene = SceneFeatures {
            per_frame,
            weights: weights_row.row(0).to_owned(),
            global_summary: summary_row.row(0).to_owned(),
            timestamps,
        };
        scene.validate()?;
        Ok(scene)
    }
}

fn to2<T: Scalar>(value: &ArrayD<T>) -> Array2<T> {
    value
        .view()
        .into_dimensionality::<ndarray::Ix2>()
        .expect("expected 2-d value")
        .to_owned()
}

/// Normalized grid position of index `k` on a grid of `len` points:
/// `k / (len - 1)`, or `0` for a single-point grid.
pub fn frame_time(k: usize, len: usize) -> f64 {
    if len <= 1 {
        0.0
    } else {
        k as f64 / (len - 1) as f64
    }
}

/// Nearest-neighbor source frame for each of `n` audio tokens over `t_v`
/// frames, matching normalized time grids with ties broken toward the
/// smaller frame index.
///
/// The comparison `|k/(T_v-1) - n/(N-1)|` is evaluated in exact integer
/// arithmetic (both sides scaled by `(T_v-1)(N-1)`), so tie-breaking never
/// depends on floating-point rounding.
pub fn avna_indices(t_v: usize, n: usize) -> Vec<usize> {
    assert!(t_v >= 1, "avna_indices requires at least one frame");
    assert!(n >= 1, "avna_indices requires at least one audio token");
    let mut out = Vec::with_capacity(n);
    for token in 0..n {
        // |k*(N-1) - token*(T_v-1)| as i128 to avoid any overflow concerns.
        let target = token as i128 * (t_v as i128 - 1);
        let scale = n as i128 - 1;
        let mut best_k = 0usize;
        let mut best_dist = i128::MAX;
        for k in 0..t_v {
            let dist = (k as i128 * scale - target).abs();
            if dist < best_dist {
                best_dist = dist;
                best_k = k;
            }
        }
        out.push(best_k);
    }
    out
}

/// Resamples refined frame features onto `n` audio tokens on the time grid.
pub fn avna_align<T: Scalar>(scene: &SceneFeatures<T>, n: usize) -> Result<AlignedScene<T>> {
    if n == 0 {
        return Err(MageError::Data(
            "alignment needs at least one audio token".into(),
        ));
    }
    scene.validate()?;
    let indices = avna_indices(scene.per_frame.nrows(), n);
    Ok(gather_scene(&scene.per_frame, indices))
}

/// Resamples frame features by cosine nearest neighbor against projected
/// audio tokens (`[N, cond_dim]`). Ties break toward the smaller frame
/// index. Unlike the time-grid strategy, the result need not be monotone.
pub fn avna_align_embedding<T: Scalar>(
    scene: &SceneFeatures<T>,
    audio_tokens: &Array2<T>,
) -> Result<AlignedScene<T>> {
    scene.validate()?;
    if audio_tokens.nrows() == 0 {
        return Err(MageError::Data(
            "alignment needs at least one audio token".into(),
        ));
    }
    if audio_tokens.ncols() != scene.per_frame.ncols() {
        return Err(MageError::Data(format!(
            "audio tokens have dim {}, frames have dim {}",
            audio_tokens.ncols(),
            scene.per_frame.ncols()
        )));
    }
    let frames = scene.per_frame.mapv(|v| v.to_f64c());
    let tokens = audio_tokens.mapv(|v| v.to_f64c());
    let frame_norms: Vec<f64> = frames
        .axis_iter(Axis(0))
        .map(|r| r.dot(&r).sqrt().max(1e-12))
        .collect();
    let mut indices = Vec::with_capacity(tokens.nrows());
    for token in tokens.axis_iter(Axis(0)) {
        let token_norm = token.dot(&token).sqrt().max(1e-12);
        let mut best_k = 0usize;
        let mut best_cos = f64::NEG_INFINITY;
        for (k, frame) in frames.axis_iter(Axis(0)).enumerate() {
            let cos = token.dot(&frame) / (token_norm * frame_norms[k]);
            if cos > best_cos {
                best_cos = cos;
                best_k = k;
            }
        }
        indices.push(best_k);
    }
    Ok(gather_scene(&scene.per_frame, indices))
}

fn gather_scene<T: Scalar>(per_frame: &Array2<T>, indices: Vec<usize>) -> AlignedScene<T> {
    let mut tokens = Array2::<T>::zeros((indices.len(), per_frame.ncols()));
    for (row, &k) in indices.iter().enumerate() {
        tokens.row_mut(row).assign(&per_frame.row(k));
    }
    AlignedScene {
        tokens,
        source_index: indices,
    }
}

/// Tape-side alignment: gathers refined frame rows onto the audio grid so
/// gradients scatter back into the attended frames.
pub fn avna_align_tape<T: Scalar>(tape: &mut Tape<T>, per_frame: Var, n: usize) -> Var {
    let t_v = tape.shape(per_frame)[0];
    let indices = avna_indices(t_v, n);
    tape.gather_rows(per_frame, indices)
}
