//! Toy joint audio–text embedding space.
//!
//! A small classifier is trained on single-source benchmark clips: pooled
//! log-spectral features → MLP → class logits. Its penultimate layer (32
//! dimensions, L2-normalized) is the audio embedding; the "text" embedding
//! of a class label is that class's mean training-audio embedding,
//! re-normalized. Distribution distances and similarity scores are computed
//! in this space.

use ndarray::{Array1, Array2, ArrayView1};
use serde::{Deserialize, Serialize};

use crate::audio::Waveform;
use crate::error::{MageError, Result};
use crate::graph::Tape;
use crate::nn::{AdamW, ParamStore};
use crate::rng::seeded_rng;
use crate::stft::StftPlan;
use crate::synthbench::{clip_seed, clip_spec, synth_source, BenchConfig};

/// Embedding dimensionality (the classifier's penultimate width).
pub const EMBED_DIM: usize = 32;

/// Embedder architecture and training hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EmbedderConfig {
    pub stft_win: usize,
    pub stft_hop: usize,
    pub hidden: usize,
    pub train_steps: usize,
    pub learning_rate: f64,
    pub seed: u64,
}

impl Default for EmbedderConfig {
    fn default() -> Self {
        EmbedderConfig {
            stft_win: 256,
            stft_hop: 128,
            hidden: 64,
            train_steps: 300,
            learning_rate: 3e-3,
            seed: 0xE3BED,
        }
    }
}

/// Trained audio/label embedder.
#[derive(Debug, Clone)]
pub struct ToyEmbedder {
    pub cfg: EmbedderConfig,
    plan: StftPlan<f64>,
    params: ParamStore<f64>,
    /// `[num_classes, EMBED_DIM]` unit-norm class prototypes.
    prototypes: Array2<f64>,
    /// Feature standardization fit on the training set.
    feat_mean: Array1<f64>,
    feat_std: Array1<f64>,
    num_classes: usize,
}

fn pooled_features(plan: &StftPlan<f64>, wave: &Waveform<f64>) -> Result<Array1<f64>> {
    let mag = plan.magnitude(&wave.samples);
    if mag.nrows() == 0 {
        return Err(MageError::InvalidArgument(format!(
            "clip too short for embedding: {} samples < window {}",
            wave.len(),
            plan.win_len
        )));
    }
    let bins = mag.ncols();
    let log_mag = mag.mapv(|v| (v + 1e-5).ln());
    let mut out = Array1::<f64>::zeros(2 * bins);
    for k in 0..bins {
        let col = log_mag.column(k);
        let mean = col.mean().expect("non-empty");
        let max = col.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        out[k] = mean;
        out[bins + k] = max;
    }
    Ok(out)
}

fn init_params(cfg: &EmbedderConfig, input_dim: usize, num_classes: usize) -> ParamStore<f64> {
    let mut params = ParamStore::new();
    let mut rng = seeded_rng(cfg.seed, "embedder-init", 0);
    params.insert(
        "w1",
        crate::nn::init_kaiming(&mut rng, &[input_dim, cfg.hidden], input_dim),
    );
    params.insert("b1", crate::nn::init_zeros(&[cfg.hidden]));
    params.insert(
        "w2",
        crate::nn::init_kaiming(&mut rng, &[cfg.hidden, EMBED_DIM], cfg.hidden),
    );
    params.insert("b2", crate::nn::init_zeros(&[EMBED_DIM]));
    params.insert(
        "w3",
        crate::nn::init_kaiming(&mut rng, &[EMBED_DIM, num_classes], EMBED_DIM),
    );
    params.insert("b3", crate::nn::init_zeros(&[num_classes]));
    params
}

/// Forward pass to (penultimate, logits) on a tape.
fn forward(
    tape: &mut Tape<f64>,
    bound: &crate::nn::BoundParams,
    x: crate::graph::Var,
) -> (crate::graph::Var, crate::graph::Var) {
    let w1 = bound.var("w1");
    let b1 = bound.var("b1");
    let w2 = bound.var("w2");
    let b2 = bound.var("b2");
    let w3 = bound.var("w3");
    let b3 = bound.var("b3");
    let h = tape.matmul(x, w1);
    let h = tape.add_row(h, b1);
    let h = tape.silu(h);
    let pen = tape.matmul(h, w2);
    let pen = tape.add_row(pen, b2);
    let logits = tape.matmul(pen, w3);
    let logits = tape.add_row(logits, b3);
    (pen, logits)
}

fn normalize_rows(mut rows: Array2<f64>) -> Array2<f64> {
    for mut row in rows.rows_mut() {
        let norm = row.dot(&row).sqrt().max(1e-12);
        row.mapv_inplace(|v| v / norm);
    }
    rows
}

impl ToyEmbedder {
    /// Trains the embedder on single-source clips from the benchmark's
    /// train split and fixes class prototypes from the training embeddings.
    ///
    /// Deterministic given `(bench, cfg)`.
    pub fn train(bench: &BenchConfig, cfg: EmbedderConfig) -> Result<Self> {
        bench.validate()?;
        let plan = StftPlan::<f64>::new(cfg.stft_win, cfg.stft_hop);

        // Training clips: every train-split clip of every class.
        let counts = train_clip_range(bench);
        let mut feats = Vec::new();
        let mut labels = Vec::new();
        for class in 0..bench.num_classes {
            for clip in 0..counts {
                let spec = clip_spec(bench, class, clip)?;
                let wave = synth_source::<f64>(
                    &spec,
                    bench.segment_samples,
                    bench.sample_rate,
                    clip_seed(bench, class, clip),
                )?;
                feats.push(pooled_features(&plan, &wave)?);
                labels.push(class);
            }
        }
        let n = feats.len();
        let d = feats[0].len();
        let mut x = Array2::<f64>::zeros((n, d));
        for (i, f) in feats.iter().enumerate() {
            x.row_mut(i).assign(f);
        }

        // Standardize features for stable optimization.
        let feat_mean = x.mean_axis(ndarray::Axis(0)).expect("n > 0");
        let mut feat_std = Array1::<f64>::zeros(d);
        for j in 0..d {
            let col = x.column(j);
            let var = col.iter().map(|&v| (v - feat_mean[j]).powi(2)).sum::<f64>() / n as f64;
            feat_std[j] = var.sqrt().max(1e-6);
        }
        for i in 0..n {
            for j in 0..d {
                x[(i, j)] = (x[(i, j)] - feat_mean[j]) / feat_std[j];
            }
        }

        let mut params = init_params(&cfg, d, bench.num_classes);
        let mut opt = AdamW::new(cfg.learning_rate, 0.0);
        for _ in 0..cfg.train_steps {
            let mut tape = Tape::new();
            let bound = params.bind(&mut tape);
            let xv = tape.constant(x.clone().into_dyn());
            let (_, logits) = forward(&mut tape, &bound, xv);
            let loss = tape.cross_entropy(logits, &labels);
            let grads = tape.backward(loss);
            let grad_map = bound.grads(&grads);
            opt.step(&mut params, &grad_map, Some(5.0));
        }

        let mut embedder = ToyEmbedder {
            cfg,
            plan,
            params,
            prototypes: Array2::zeros((bench.num_classes, EMBED_DIM)),
            feat_mean,
            feat_std,
            num_classes: bench.num_classes,
        };

        // Class prototypes: mean training embedding per class, normalized.
        let emb = embedder.embed_features(&x)?;
        let mut proto = Array2::<f64>::zeros((bench.num_classes, EMBED_DIM));
        let mut class_counts = vec![0usize; bench.num_classes];
        for (i, &label) in labels.iter().enumerate() {
            for j in 0..EMBED_DIM {
                proto[(label, j)] += emb[(i, j)];
            }
            class_counts[label] += 1;
        }
        for (c, &count) in class_counts.iter().enumerate() {
            if count == 0 {
                return Err(MageError::Data(format!("class {c} has no training clips")));
            }
            for j in 0..EMBED_DIM {
                proto[(c, j)] /= count as f64;
            }
        }
        embedder.prototypes = normalize_rows(proto);
        Ok(embedder)
    }

    /// Embeds standardized feature rows (internal).
    fn embed_features(&self, x: &Array2<f64>) -> Result<Array2<f64>> {
        let mut tape = Tape::new();
        let bound = self.params.bind_frozen(&mut tape);
        let xv = tape.constant(x.clone().into_dyn());
        let (pen, _) = forward(&mut tape, &bound, xv);
        let pen = tape
            .value(pen)
            .clone()
            .into_dimensionality::<ndarray::Ix2>()
            .expect("penultimate is 2-D");
        Ok(normalize_rows(pen))
    }

    /// Unit-norm embedding of a waveform.
    pub fn embed_audio(&self, wave: &Waveform<f64>) -> Result<Array1<f64>> {
        let raw = pooled_features(&self.plan, wave)?;
        let mut x = Array2::<f64>::zeros((1, raw.len()));
        for j in 0..raw.len() {
            x[(0, j)] = (raw[j] - self.feat_mean[j]) / self.feat_std[j];
        }
        Ok(self.embed_features(&x)?.row(0).to_owned())
    }

    /// Unit-norm embedding of a class label (the class prototype).
    pub fn embed_label(&self, class: usize) -> Result<Array1<f64>> {
        if class >= self.num_classes {
            return Err(MageError::InvalidArgument(format!(
                "unknown class label {class} (embedder knows {})",
                self.num_classes
            )));
        }
        Ok(self.prototypes.row(class).to_owned())
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    /// Fraction of the given clips whose own-class prototype similarity
    /// beats every other prototype (used to validate the embedding space).
    pub fn prototype_accuracy(&self, clips: &[(Waveform<f64>, usize)]) -> Result<f64> {
        if clips.is_empty() {
            return Err(MageError::InvalidArgument("no clips to score".into()));
        }
        let mut hits = 0usize;
        for (wave, label) in clips {
            let e = self.embed_audio(wave)?;
            let mut best = (0usize, f64::NEG_INFINITY);
            for c in 0..self.num_classes {
                let sim = cosine_similarity(e.view(), self.prototypes.row(c));
                if sim > best.1 {
                    best = (c, sim);
                }
            }
            if best.0 == *label {
                hits += 1;
            }
        }
        Ok(hits as f64 / clips.len() as f64)
    }
}

/// Number of train-split clips per class under the benchmark's split rule.
fn train_clip_range(bench: &BenchConfig) -> usize {
    crate::synthbench::clip_split_ranges(bench)[0].len()
}

/// Clips available for held-out evaluation (val + test splits), with labels.
pub fn held_out_clips(bench: &BenchConfig) -> Result<Vec<(Waveform<f64>, usize)>> {
    let start = train_clip_range(bench);
    let mut out = Vec::new();
    for class in 0..bench.num_classes {
        for clip in start..bench.clips_per_class {
            let spec = clip_spec(bench, class, clip)?;
            let wave = synth_source::<f64>(
                &spec,
                bench.segment_samples,
                bench.sample_rate,
                clip_seed(bench, class, clip),
            )?;
            out.push((wave, class));
        }
    }
    Ok(out)
}

/// Dot product of two unit vectors.
pub fn cosine_similarity(a: ArrayView1<'_, f64>, b: ArrayView1<'_, f64>) -> f64 {
    a.dot(&b)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use ndarray::arr1;

    fn quick_cfg() -> (BenchConfig, EmbedderConfig) {
        let bench = BenchConfig::tiny(400);
        let cfg = EmbedderConfig {
            train_steps: 200,
            ..EmbedderConfig::default()
        };
        (bench, cfg)
    }

    #[test]
    fn cosine_similarity_basics() {
        let a = arr1(&[1.0, 0.0]);
        let b = arr1(&[0.0, 1.0]);
        let neg = arr1(&[-1.0, 0.0]);
        assert_eq!(cosine_similarity(a.view(), a.view()), 1.0);
        assert_eq!(cosine_similarity(a.view(), b.view()), 0.0);
        assert_eq!(cosine_similarity(a.view(), neg.view()), -1.0);
    }

    #[test]
    fn embeddings_are_unit_norm_and_deterministic() {
        let (bench, cfg) = quick_cfg();
        let embedder = ToyEmbedder::train(&bench, cfg.clone()).unwrap();
        let spec = clip_spec(&bench, 2, 0).unwrap();
        let wave = synth_source::<f64>(
            &spec,
            bench.segment_samples,
            bench.sample_rate,
            clip_seed(&bench, 2, 0),
        )
        .unwrap();
        let e1 = embedder.embed_audio(&wave).unwrap();
        let e2 = embedder.embed_audio(&wave).unwrap();
        assert_eq!(e1, e2);
        assert_relative_eq!(e1.dot(&e1).sqrt(), 1.0, epsilon = 1e-6);
        assert_relative_eq!(cosine_similarity(e1.view(), e2.view()), 1.0, epsilon = 1e-9);

        for c in 0..bench.num_classes {
            let p = embedder.embed_label(c).unwrap();
            assert_relative_eq!(p.dot(&p).sqrt(), 1.0, epsilon = 1e-6);
        }
        assert!(embedder.embed_label(99).is_err());
    }

    #[test]
    fn held_out_clips_match_their_class_prototype() {
        let (bench, cfg) = quick_cfg();
        let embedder = ToyEmbedder::train(&bench, cfg).unwrap();
        let clips = held_out_clips(&bench).unwrap();
        assert!(!clips.is_empty());
        let acc = embedder.prototype_accuracy(&clips).unwrap();
        assert!(acc >= 0.95, "held-out prototype accuracy {acc} below 0.95");
    }
}
