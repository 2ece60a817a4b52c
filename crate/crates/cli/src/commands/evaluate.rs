//! `mage evaluate`: editing and generation scorecards on a dataset split.
//!
//! Two tables are produced. The editing table re-synthesizes each held-out
//! mixture under three conditioning regimes (prompt + frames, prompt only,
//! frames only) plus a ground-truth row that scores the references against
//! themselves, pinning the metric ceiling. The generation table samples from
//! pure noise under the same three regimes. Every row is a full metrics
//! report (separation ratios, embedding similarities, distribution distance)
//! over the same examples, written as JSON and CSV under `reports/`.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use mage_core::error::{MageError, Result};
use mage_core::evalkit::{evaluate_set, EvalInputs, MetricsReport, SetSummary, ToyEmbedder};
use mage_core::fluxformer::FluxFormer;
use mage_core::mixwavcodec::Codec;
use mage_core::sampler::{self, InferenceConfig};
use mage_core::audio::Waveform;
use mage_core::synthbench::{dataset_records, materialize_example, FrameSequence, Split};
use mage_core::TrainScalar;

use crate::commands::{
    load_codec, load_flux_model, resolve_codec_ckpt, resolve_flux_ckpt, wave_to_f64, ConfigArgs,
};
use crate::config::RunConfig;
use crate::runs::RunContext;

/// Split selector for the command line.
#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum SplitArg {
    Train,
    Val,
    Test,
}

impl From<SplitArg> for Split {
    fn from(value: SplitArg) -> Self {
        match value {
            SplitArg::Train => Split::Train,
            SplitArg::Val => Split::Val,
            SplitArg::Test => Split::Test,
        }
    }
}

#[derive(Debug, clap::Args)]
pub struct EvaluateArgs {
    #[command(flatten)]
    pub cfg: ConfigArgs,
    /// Backbone checkpoint (default: the newest in this run).
    #[arg(long, value_name = "FILE")]
    pub flux_ckpt: Option<PathBuf>,
    /// Codec checkpoint (default: the one the backbone was trained against).
    #[arg(long, value_name = "FILE")]
    pub codec_ckpt: Option<PathBuf>,
    /// Dataset split to score (default: eval.split).
    #[arg(long, value_enum)]
    pub split: Option<SplitArg>,
    /// Cap on evaluated examples; 0 scores the whole split
    /// (default: eval.max_examples).
    #[arg(long)]
    pub limit: Option<usize>,
    /// Euler steps per sample (default: inference.num_steps).
    #[arg(long)]
    pub steps: Option<usize>,
    /// Enable classifier-free guidance at this scale for every row.
    #[arg(long, value_name = "SCALE")]
    pub cfg_gamma: Option<f64>,
}

/// Evaluation materials for one split: double-precision ground truth for the
/// metrics plus the single-precision conditioning payloads the sampler eats.
pub struct EvalSet {
    /// Position of each row's example in the dataset record stream; inference
    /// seeds are derived from it so every example gets distinct noise.
    pub indices: Vec<usize>,
    pub references: Vec<Waveform<f64>>,
    pub mixtures: Vec<Waveform<f64>>,
    pub prompts: Vec<usize>,
    pub mixtures32: Vec<Waveform<TrainScalar>>,
    pub frames32: Vec<FrameSequence<TrainScalar>>,
    pub sample_rate: u32,
    pub segment_len: usize,
}

impl EvalSet {
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }
}

/// Materializes the scored slice of `split`, one example at a time.
///
/// Each example is synthesized twice: natively in f64 for references and
/// mixtures (what the metrics compare against) and natively in f32 for the
/// sampler, matching what the model saw in training.
pub fn collect_eval_set(cfg: &RunConfig, split: Split, limit: usize) -> Result<EvalSet> {
    let records = dataset_records(&cfg.dataset)?;
    let mut set = EvalSet {
        indices: Vec::new(),
        references: Vec::new(),
        mixtures: Vec::new(),
        prompts: Vec::new(),
        mixtures32: Vec::new(),
        frames32: Vec::new(),
        sample_rate: cfg.dataset.sample_rate,
        segment_len: cfg.dataset.segment_samples,
    };
    for (index, record) in records.iter().enumerate() {
        if record.split != split {
            continue;
        }
        if limit > 0 && set.len() >= limit {
            break;
        }
        let wide = materialize_example::<f64>(&cfg.dataset, record)?;
        let narrow = materialize_example::<TrainScalar>(&cfg.dataset, record)?;
        set.indices.push(index);
        set.references.push(wide.target().clone());
        set.mixtures.push(wide.mixture.clone());
        set.prompts.push(wide.target_label());
        set.mixtures32.push(narrow.mixture.clone());
        set.frames32.push(narrow.target_frames().clone());
    }
    if set.is_empty() {
        return Err(MageError::Data(format!(
            "the {split} split has no examples under this dataset configuration"
        )));
    }
    Ok(set)
}

fn per_example_config(base: &InferenceConfig, example_index: usize) -> InferenceConfig {
    InferenceConfig {
        seed: base.seed.wrapping_add(example_index as u64),
        ..base.clone()
    }
}

/// Re-synthesizes every mixture in `set` under the chosen conditioning
/// subset, returning double-precision estimates for scoring.
pub fn edit_estimates(
    flux: &FluxFormer<TrainScalar>,
    codec: &Codec<TrainScalar>,
    set: &EvalSet,
    use_prompt: bool,
    use_frames: bool,
    base: &InferenceConfig,
) -> Result<Vec<Waveform<f64>>> {
    let mut estimates = Vec::with_capacity(set.len());
    for (row, &example_index) in set.indices.iter().enumerate() {
        let icfg = per_example_config(base, example_index);
        let prompt = use_prompt.then_some(set.prompts[row]);
        let frames = use_frames.then_some(&set.frames32[row]);
        let (wave, _) = sampler::edit(flux, codec, &set.mixtures32[row], prompt, frames, &icfg)?;
        estimates.push(wave_to_f64(&wave));
    }
    Ok(estimates)
}

/// Samples one clip from noise per example under the chosen conditioning
/// subset, returning double-precision estimates for scoring.
pub fn generate_estimates(
    flux: &FluxFormer<TrainScalar>,
    codec: &Codec<TrainScalar>,
    set: &EvalSet,
    use_prompt: bool,
    use_frames: bool,
    base: &InferenceConfig,
) -> Result<Vec<Waveform<f64>>> {
    let mut estimates = Vec::with_capacity(set.len());
    for (row, &example_index) in set.indices.iter().enumerate() {
        let icfg = per_example_config(base, example_index);
        let prompt = use_prompt.then_some(set.prompts[row]);
        let frames = use_frames.then_some(&set.frames32[row]);
        let (wave, _) = sampler::generate(
            flux,
            codec,
            prompt,
            frames,
            set.sample_rate,
            set.segment_len,
            &icfg,
        )?;
        estimates.push(wave_to_f64(&wave));
    }
    Ok(estimates)
}

/// One named row of a scorecard table.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TableRow {
    pub name: String,
    pub report: MetricsReport,
}

/// A full scorecard: editing or generation, one metrics report per
/// conditioning regime over a fixed example slice.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TableReport {
    pub table: String,
    pub split: String,
    pub num_steps: usize,
    pub guidance_scale: f64,
    pub cfg_enabled: bool,
    pub examples: usize,
    pub rows: Vec<TableRow>,
}

/// The three conditioning regimes every table reports.
pub const ROW_SPECS: [(&str, bool, bool); 3] = [
    ("text_visual", true, true),
    ("text_only", true, false),
    ("visual_only", false, true),
];

/// Summary rows for printing / CSV: each table row plus the shared
/// mixture-as-estimate baseline.
fn summary_rows(report: &TableReport) -> Vec<(String, SetSummary)> {
    let mut rows: Vec<(String, SetSummary)> = report
        .rows
        .iter()
        .map(|row| (row.name.clone(), row.report.summary.clone()))
        .collect();
    if let Some(first) = report.rows.first() {
        rows.push(("mixture_baseline".into(), first.report.baseline.clone()));
    }
    rows
}

fn write_summary_csv(path: &std::path::Path, rows: &[(String, SetSummary)]) -> Result<()> {
    let mut writer = csv::Writer::from_path(path)
        .map_err(|e| MageError::Io(std::io::Error::other(e.to_string())))?;
    writer
        .write_record([
            "row",
            "sdr_mean_db",
            "sdr_median_db",
            "sir_mean_db",
            "sir_median_db",
            "sar_mean_db",
            "sar_median_db",
            "text_audio_cos_mean",
            "audio_audio_cos_mean",
            "fad",
            "evaluated",
            "failed",
        ])
        .map_err(|e| MageError::Io(std::io::Error::other(e.to_string())))?;
    for (name, s) in rows {
        writer
            .write_record([
                name.clone(),
                s.sdr_mean_db.to_string(),
                s.sdr_median_db.to_string(),
                s.sir_mean_db.to_string(),
                s.sir_median_db.to_string(),
                s.sar_mean_db.to_string(),
                s.sar_median_db.to_string(),
                s.text_audio_cos_mean.to_string(),
                s.audio_audio_cos_mean.to_string(),
                s.fad.to_string(),
                s.evaluated.to_string(),
                s.failed.to_string(),
            ])
            .map_err(|e| MageError::Io(std::io::Error::other(e.to_string())))?;
    }
    writer
        .flush()
        .map_err(|e| MageError::Io(std::io::Error::other(e.to_string())))?;
    Ok(())
}

fn print_table(report: &TableReport) {
    println!(
        "\n{} ({} split, {} examples, {} steps{})",
        report.table,
        report.split,
        report.examples,
        report.num_steps,
        if report.cfg_enabled {
            format!(", guidance {}", report.guidance_scale)
        } else {
            String::new()
        }
    );
    println!(
        "{:<17} {:>8} {:>8} {:>8} {:>7} {:>7} {:>10} {:>4} {:>5}",
        "row", "sdr_med", "sir_med", "sar_med", "t_cos", "a_cos", "fad", "n", "fail"
    );
    for (name, s) in summary_rows(report) {
        println!(
            "{:<17} {:>8.2} {:>8.2} {:>8.2} {:>7.3} {:>7.3} {:>10.4} {:>4} {:>5}",
            name,
            s.sdr_median_db,
            s.sir_median_db,
            s.sar_median_db,
            s.text_audio_cos_mean,
            s.audio_audio_cos_mean,
            s.fad,
            s.evaluated,
            s.failed
        );
    }
}

/// Serializes a table as pretty JSON plus a summary CSV under `reports/`,
/// registering both in the run manifest.
fn write_table(ctx: &mut RunContext, report: &TableReport) -> Result<()> {
    let stem = format!("{}-{}", report.table, report.split);
    let json_path = ctx.paths.reports().join(format!("{stem}.json"));
    let body = serde_json::to_vec_pretty(report)
        .map_err(|e| MageError::Io(std::io::Error::other(e.to_string())))?;
    std::fs::write(&json_path, body)?;
    ctx.add_report(&json_path)?;

    let csv_path = ctx.paths.reports().join(format!("{stem}.csv"));
    write_summary_csv(&csv_path, &summary_rows(report))?;
    ctx.add_report(&csv_path)?;
    Ok(())
}

pub fn evaluate(args: EvaluateArgs) -> Result<()> {
    let mut ctx = args.cfg.open("evaluate")?;
    let flux_path = resolve_flux_ckpt(&ctx, &args.flux_ckpt)?;
    let (flux, meta) = load_flux_model(&flux_path)?;
    let codec_path = resolve_codec_ckpt(&args.codec_ckpt, &meta)?;
    let codec = load_codec(&codec_path)?;
    if codec.cfg.latent_dim != flux.cfg.latent_dim {
        return Err(MageError::Config(format!(
            "codec checkpoint has latent_dim {}, backbone expects {}",
            codec.cfg.latent_dim, flux.cfg.latent_dim
        )));
    }

    let split: Split = args.split.map(Split::from).unwrap_or(ctx.config.eval.split);
    let limit = args.limit.unwrap_or(ctx.config.eval.max_examples);
    let mut icfg = ctx.config.inference.clone();
    if let Some(steps) = args.steps {
        icfg.num_steps = steps;
    }
    if let Some(scale) = args.cfg_gamma {
        icfg.guidance_scale = scale;
        icfg.cfg_enabled = true;
    }
    icfg.validate()?;

    println!("materializing the {split} split…");
    let set = collect_eval_set(&ctx.config, split, limit)?;
    println!("scoring {} examples with {} Euler steps", set.len(), icfg.num_steps);
    println!("fitting the toy embedder…");
    let embedder = ToyEmbedder::train(&ctx.config.dataset, ctx.config.eval.embedder.clone())?;

    let mut editing = TableReport {
        table: "editing".into(),
        split: split.to_string(),
        num_steps: icfg.num_steps,
        guidance_scale: icfg.guidance_scale,
        cfg_enabled: icfg.cfg_enabled,
        examples: set.len(),
        rows: Vec::new(),
    };
    for (name, use_prompt, use_frames) in ROW_SPECS {
        let estimates = edit_estimates(&flux, &codec, &set, use_prompt, use_frames, &icfg)?;
        let report = evaluate_set(
            &EvalInputs {
                estimates: &estimates,
                references: &set.references,
                mixtures: &set.mixtures,
                prompts: &set.prompts,
            },
            &embedder,
        )?;
        println!(
            "editing/{name}: median SDR {:+.2} dB over {} examples",
            report.summary.sdr_median_db, report.summary.evaluated
        );
        editing.rows.push(TableRow { name: name.into(), report });
    }
    let ground_truth = evaluate_set(
        &EvalInputs {
            estimates: &set.references,
            references: &set.references,
            mixtures: &set.mixtures,
            prompts: &set.prompts,
        },
        &embedder,
    )?;
    println!(
        "editing/ground_truth: audio-audio cosine {:.3}",
        ground_truth.summary.audio_audio_cos_mean
    );
    editing.rows.push(TableRow { name: "ground_truth".into(), report: ground_truth });

    let mut generation = TableReport {
        table: "generation".into(),
        split: split.to_string(),
        num_steps: icfg.num_steps,
        guidance_scale: icfg.guidance_scale,
        cfg_enabled: icfg.cfg_enabled,
        examples: set.len(),
        rows: Vec::new(),
    };
    for (name, use_prompt, use_frames) in ROW_SPECS {
        let estimates = generate_estimates(&flux, &codec, &set, use_prompt, use_frames, &icfg)?;
        let report = evaluate_set(
            &EvalInputs {
                estimates: &estimates,
                references: &set.references,
                mixtures: &set.mixtures,
                prompts: &set.prompts,
            },
            &embedder,
        )?;
        println!(
            "generation/{name}: text-audio cosine {:.3} over {} examples",
            report.summary.text_audio_cos_mean, report.summary.evaluated
        );
        generation.rows.push(TableRow { name: name.into(), report });
    }

    write_table(&mut ctx, &editing)?;
    write_table(&mut ctx, &generation)?;
    print_table(&editing);
    print_table(&generation);

    ctx.finish(&format!(
        "scored {} {split}-split examples: {} editing rows, {} generation rows",
        set.len(),
        editing.rows.len(),
        generation.rows.len()
    ))
}
