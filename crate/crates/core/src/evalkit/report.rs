//! Set-level evaluation: per-clip separation metrics, embedding-space
//! similarities, Fréchet distance, and the mixture-as-estimate baseline,
//! collected into one serializable report.

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use crate::audio::Waveform;
use crate::error::{MageError, Result};
use crate::evalkit::bss::{bss_decompose, sdr_sir_sar};
use crate::evalkit::embedder::{cosine_similarity, ToyEmbedder, EMBED_DIM};
use crate::evalkit::fad::{fad, GaussianStats};

/// Parallel per-clip evaluation inputs. `prompts` are class labels, the
/// benchmark's stand-in for text prompts; `mixtures` are mean-mixtures
/// (`0.5·(target + interferer)`), from which the interferer is re-derived
/// for the projection decomposition.
pub struct EvalInputs<'a> {
    pub estimates: &'a [Waveform<f64>],
    pub references: &'a [Waveform<f64>],
    pub mixtures: &'a [Waveform<f64>],
    pub prompts: &'a [usize],
}

/// Metrics for one successfully evaluated clip.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ClipMetrics {
    pub index: usize,
    pub sdr_db: f64,
    pub sir_db: f64,
    pub sar_db: f64,
    pub text_audio_cos: f64,
    pub audio_audio_cos: f64,
}

/// A clip that could not be evaluated, with the reason.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ClipError {
    pub index: usize,
    pub message: String,
}

/// Aggregates over the finite per-clip values of one estimate set.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SetSummary {
    pub sdr_mean_db: f64,
    pub sdr_median_db: f64,
    pub sir_mean_db: f64,
    pub sir_median_db: f64,
    pub sar_mean_db: f64,
    pub sar_median_db: f64,
    pub text_audio_cos_mean: f64,
    pub audio_audio_cos_mean: f64,
    pub fad: f64,
    pub evaluated: usize,
    pub failed: usize,
}

/// Full evaluation report: per-clip rows, errors, the estimate summary, and
/// the mixture-as-estimate baseline computed on the same inputs.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricsReport {
    pub per_clip: Vec<ClipMetrics>,
    pub errors: Vec<ClipError>,
    pub summary: SetSummary,
    pub baseline: SetSummary,
}

fn check_parallel(inputs: &EvalInputs<'_>) -> Result<usize> {
    let n = inputs.estimates.len();
    if inputs.references.len() != n || inputs.mixtures.len() != n || inputs.prompts.len() != n {
        return Err(MageError::Shape(format!(
            "evaluation inputs must be parallel: {} estimates, {} references, {} mixtures, {} prompts",
            n,
            inputs.references.len(),
            inputs.mixtures.len(),
            inputs.prompts.len()
        )));
    }
    if n == 0 {
        return Err(MageError::InvalidArgument("no clips to evaluate".into()));
    }
    Ok(n)
}

fn evaluate_one_set(
    estimates: &[Waveform<f64>],
    inputs: &EvalInputs<'_>,
    embedder: &ToyEmbedder,
) -> Result<(Vec<ClipMetrics>, Vec<ClipError>, SetSummary)> {
    let n = estimates.len();
    let mut per_clip = Vec::with_capacity(n);
    let mut errors = Vec::new();
    let mut est_embeddings = Vec::with_capacity(n);
    let mut ref_embeddings = Vec::with_capacity(n);

    for i in 0..n {
        let clip = (|| -> Result<ClipMetrics> {
            let reference = &inputs.references[i];
            let estimate = &estimates[i];
            // Interferer recovered from the mean-mixture identity.
            let interferer = Waveform::new(
                inputs.mixtures[i]
                    .samples
                    .iter()
                    .zip(reference.samples.iter())
                    .map(|(&m, &r)| 2.0 * m - r)
                    .collect::<Array1<f64>>(),
                reference.sample_rate,
            )?;
            let dec = bss_decompose(estimate, &[reference, &interferer], 0)?;
            let (sdr, sir, sar) = sdr_sir_sar(&dec);
            let est_emb = embedder.embed_audio(estimate)?;
            let ref_emb = embedder.embed_audio(reference)?;
            let prompt_emb = embedder.embed_label(inputs.prompts[i])?;
            let clip = ClipMetrics {
                index: i,
                sdr_db: sdr,
                sir_db: sir,
                sar_db: sar,
                text_audio_cos: cosine_similarity(prompt_emb.view(), est_emb.view()),
                audio_audio_cos: cosine_similarity(ref_emb.view(), est_emb.view()),
            };
            est_embeddings.push(est_emb);
            ref_embeddings.push(ref_emb);
            Ok(clip)
        })();
        match clip {
            Ok(m) => per_clip.push(m),
            Err(e) => errors.push(ClipError {
                index: i,
                message: e.to_string(),
            }),
        }
    }

    if per_clip.is_empty() {
        return Err(MageError::Data(
            "every clip failed evaluation; no aggregates available".into(),
        ));
    }

    let fad_value = {
        let real = stats_from(&ref_embeddings)?;
        let generated = stats_from(&est_embeddings)?;
        fad(&real, &generated)?
    };

    let collect = |f: fn(&ClipMetrics) -> f64| -> Vec<f64> { per_clip.iter().map(f).collect() };
    let sdr = collect(|m| m.sdr_db);
    let sir = collect(|m| m.sir_db);
    let sar = collect(|m| m.sar_db);
    let summary = SetSummary {
        sdr_mean_db: mean(&sdr),
        sdr_median_db: median(&sdr),
        sir_mean_db: mean(&sir),
        sir_median_db: median(&sir),
        sar_mean_db: mean(&sar),
        sar_median_db: median(&sar),
        text_audio_cos_mean: mean(&collect(|m| m.text_audio_cos)),
        audio_audio_cos_mean: mean(&collect(|m| m.audio_audio_cos)),
        fad: fad_value,
        evaluated: per_clip.len(),
        failed: errors.len(),
    };
    Ok((per_clip, errors, summary))
}

/// Evaluates an estimate set against references: per-clip SDR/SIR/SAR,
/// similarity scores, set-level Fréchet distance, and the baseline row
/// obtained by scoring the mixtures themselves as estimates.
pub fn evaluate_set(inputs: &EvalInputs<'_>, embedder: &ToyEmbedder) -> Result<MetricsReport> {
    check_parallel(inputs)?;
    let (per_clip, errors, summary) = evaluate_one_set(inputs.estimates, inputs, embedder)?;
    let (_, _, baseline) = evaluate_one_set(inputs.mixtures, inputs, embedder)?;
    Ok(MetricsReport {
        per_clip,
        errors,
        summary,
        baseline,
    })
}

fn stats_from(embeddings: &[Array1<f64>]) -> Result<GaussianStats> {
    let mut rows = Array2::<f64>::zeros((embeddings.len(), EMBED_DIM));
    for (i, e) in embeddings.iter().enumerate() {
        rows.row_mut(i).assign(e);
    }
    GaussianStats::from_rows(rows.view())
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

fn median(xs: &[f64]) -> f64 {
    let mut sorted = xs.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = sorted.len();
    if n % 2 == 1 {
        sorted[n / 2]
    } else {
        0.5 * (sorted[n / 2 - 1] + sorted[n / 2])
    }
}

/// Writes a report as pretty-printed JSON.
pub fn write_report<P: AsRef<std::path::Path>>(path: P, report: &MetricsReport) -> Result<()> {
    let f = std::io::BufWriter::new(std::fs::File::create(path)?);
    serde_json::to_writer_pretty(f, report)?;
    Ok(())
}

/// Reads a report written by [`write_report`].
pub fn read_report<P: AsRef<std::path::Path>>(path: P) -> Result<MetricsReport> {
    let f = std::io::BufReader::new(std::fs::File::open(path)?);
    Ok(serde_json::from_reader(f)?)
}
