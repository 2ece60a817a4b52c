//! `mage ablate`: retrain the backbone under ablated configurations and
//! compare joint-conditioned editing quality against the full model.
//!
//! Each variant × seed trains a fresh backbone from the same frozen codec
//! and data, scores prompt+frames editing on the evaluation split, and the
//! per-variant number is the median across seeds. The full model is expected
//! to beat every ablation by a margin; a miss is flagged in the report and
//! on stdout but never fails the command, since small training budgets make
//! the ordering noisy.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use mage_core::error::{MageError, Result};
use mage_core::evalkit::{evaluate_set, EvalInputs, SetSummary, ToyEmbedder};
use mage_core::fluxformer::train::FluxTrainState;
use mage_core::fluxformer::{FluxConfig, FluxFormer, FusionVariant};
use mage_core::TrainScalar;

use crate::commands::evaluate::{collect_eval_set, edit_estimates};
use crate::commands::train_flux::{batch_indices, prepare_training_set};
use crate::commands::{load_codec, save_flux_checkpoint, ConfigArgs};
use crate::runs::{latest_checkpoint, sha256_hex};

/// How far (median SDR, dB) the full model should sit above each ablation.
pub const MARGIN_DB: f64 = 1.0;

#[derive(Debug, clap::Args)]
pub struct AblateArgs {
    #[command(flatten)]
    pub cfg: ConfigArgs,
    /// Frozen codec checkpoint (default: the newest codec checkpoint in
    /// this run).
    #[arg(long, value_name = "FILE")]
    pub codec_ckpt: Option<PathBuf>,
    /// Variant to include, repeatable (default: the whole grid).
    #[arg(long = "variant", value_name = "NAME")]
    pub variants: Vec<String>,
    /// Backbone training steps per variant × seed
    /// (default: ablate.flux_steps).
    #[arg(long)]
    pub steps: Option<usize>,
    /// Cap on evaluated examples; 0 scores the whole split
    /// (default: ablate.max_examples).
    #[arg(long)]
    pub limit: Option<usize>,
    /// Comma-separated model seeds (default: ablate.seeds).
    #[arg(long, value_delimiter = ',', value_name = "SEEDS")]
    pub seeds: Vec<u64>,
}

/// One cell of the ablation grid: a named edit to the backbone config.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AblationVariant {
    Full,
    NoAvna,
    NoCgm,
    FusionAdd,
    FusionGatedRes,
    FusionSelfAttn,
    FusionCrossAttn,
    StaticVisual,
}

impl AblationVariant {
    pub const ALL: [AblationVariant; 8] = [
        AblationVariant::Full,
        AblationVariant::NoAvna,
        AblationVariant::NoCgm,
        AblationVariant::FusionAdd,
        AblationVariant::FusionGatedRes,
        AblationVariant::FusionSelfAttn,
        AblationVariant::FusionCrossAttn,
        AblationVariant::StaticVisual,
    ];

    pub fn parse(name: &str) -> Result<Self> {
        match name {
            "full" => Ok(Self::Full),
            "no-avna" => Ok(Self::NoAvna),
            "no-cgm" => Ok(Self::NoCgm),
            "fusion:add" => Ok(Self::FusionAdd),
            "fusion:gated-res" => Ok(Self::FusionGatedRes),
            "fusion:self-attn" => Ok(Self::FusionSelfAttn),
            "fusion:cross-attn" => Ok(Self::FusionCrossAttn),
            "static-visual" => Ok(Self::StaticVisual),
            other => Err(MageError::InvalidArgument(format!(
                "unknown ablation variant '{other}'; valid: full, no-avna, no-cgm, \
                 fusion:add, fusion:gated-res, fusion:self-attn, fusion:cross-attn, \
                 static-visual"
            ))),
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            Self::Full => "full",
            Self::NoAvna => "no-avna",
            Self::NoCgm => "no-cgm",
            Self::FusionAdd => "fusion:add",
            Self::FusionGatedRes => "fusion:gated-res",
            Self::FusionSelfAttn => "fusion:self-attn",
            Self::FusionCrossAttn => "fusion:cross-attn",
            Self::StaticVisual => "static-visual",
        }
    }

    /// Applies the ablation to a full-model backbone config.
    pub fn apply(self, cfg: &mut FluxConfig) {
        match self {
            Self::Full => {}
            Self::NoAvna => cfg.use_avna = false,
            Self::NoCgm => cfg.fusion = FusionVariant::Disabled,
            Self::FusionAdd => cfg.fusion = FusionVariant::Add,
            Self::FusionGatedRes => cfg.fusion = FusionVariant::GatedResidual,
            Self::FusionSelfAttn => cfg.fusion = FusionVariant::SelfAttn,
            Self::FusionCrossAttn => cfg.fusion = FusionVariant::CrossAttn,
            Self::StaticVisual => cfg.static_visual = true,
        }
    }

    /// Label with filesystem-safe separators, for checkpoint names.
    fn file_label(self) -> String {
        self.label().replace(':', "-")
    }
}

/// Median of a non-empty slice (mean of the middle pair when even).
pub fn median(values: &[f64]) -> f64 {
    let mut sorted = values.to_vec();
    sorted.sort_by(|a, b| a.total_cmp(b));
    let mid = sorted.len() / 2;
    if sorted.len() % 2 == 1 {
        sorted[mid]
    } else {
        0.5 * (sorted[mid - 1] + sorted[mid])
    }
}

/// Grid outcome for one variant: per-seed summaries and cross-seed medians.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct VariantResult {
    pub name: String,
    pub per_seed: Vec<SetSummary>,
    pub sdr_median_db: f64,
    pub sir_median_db: f64,
    pub sar_median_db: f64,
    /// Full-model median SDR minus this variant's, when the grid includes
    /// the full model.
    pub gap_to_full_db: Option<f64>,
    /// Whether the gap reaches `margin_db` (never set on the full row).
    pub meets_margin: Option<bool>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AblationReport {
    pub split: String,
    pub steps: usize,
    pub seeds: Vec<u64>,
    pub examples: usize,
    pub margin_db: f64,
    pub variants: Vec<VariantResult>,
}

fn parse_variants(names: &[String]) -> Result<Vec<AblationVariant>> {
    if names.is_empty() {
        return Ok(AblationVariant::ALL.to_vec());
    }
    let mut variants = Vec::new();
    for name in names {
        let variant = AblationVariant::parse(name)?;
        if !variants.contains(&variant) {
            variants.push(variant);
        }
    }
    Ok(variants)
}

fn write_ablation_csv(path: &std::path::Path, report: &AblationReport) -> Result<()> {
    let mut writer = csv::Writer::from_path(path)
        .map_err(|e| MageError::Io(std::io::Error::other(e.to_string())))?;
    writer
        .write_record([
            "variant",
            "sdr_median_db",
            "sir_median_db",
            "sar_median_db",
            "gap_to_full_db",
            "meets_margin",
        ])
        .map_err(|e| MageError::Io(std::io::Error::other(e.to_string())))?;
    for v in &report.variants {
        writer
            .write_record([
                v.name.clone(),
                v.sdr_median_db.to_string(),
                v.sir_median_db.to_string(),
                v.sar_median_db.to_string(),
                v.gap_to_full_db.map(|g| g.to_string()).unwrap_or_default(),
                v.meets_margin.map(|m| m.to_string()).unwrap_or_default(),
            ])
            .map_err(|e| MageError::Io(std::io::Error::other(e.to_string())))?;
    }
    writer
        .flush()
        .map_err(|e| MageError::Io(std::io::Error::other(e.to_string())))?;
    Ok(())
}

fn print_ablation(report: &AblationReport) {
    println!(
        "\nablation grid ({} split, {} examples, {} steps, seeds {:?}, margin {} dB)",
        report.split, report.examples, report.steps, report.seeds, report.margin_db
    );
    println!(
        "{:<18} {:>8} {:>8} {:>8} {:>9} {:>7}",
        "variant", "sdr_med", "sir_med", "sar_med", "gap", "margin"
    );
    for v in &report.variants {
        let gap = v
            .gap_to_full_db
            .map(|g| format!("{g:+.2}"))
            .unwrap_or_else(|| "-".into());
        let margin = match v.meets_margin {
            Some(true) => "met",
            Some(false) => "MISSED",
            None => "-",
        };
        println!(
            "{:<18} {:>8.2} {:>8.2} {:>8.2} {:>9} {:>7}",
            v.name, v.sdr_median_db, v.sir_median_db, v.sar_median_db, gap, margin
        );
    }
}

pub fn ablate(args: AblateArgs) -> Result<()> {
    let mut ctx = args.cfg.open("ablate")?;
    let steps = args.steps.unwrap_or(ctx.config.ablate.flux_steps);
    if steps == 0 {
        return Err(MageError::InvalidArgument(
            "--steps must be positive".into(),
        ));
    }
    let seeds = if args.seeds.is_empty() {
        ctx.config.ablate.seeds.clone()
    } else {
        args.seeds.clone()
    };
    if seeds.is_empty() {
        return Err(MageError::InvalidArgument(
            "at least one seed is required".into(),
        ));
    }
    let limit = args.limit.unwrap_or(ctx.config.ablate.max_examples);
    let variants = parse_variants(&args.variants)?;
    let batch_size = ctx.config.train.batch_size;
    let split = ctx.config.eval.split;
    let icfg = ctx.config.inference.clone();
    let ckpt_dir = ctx.paths.checkpoints();

    let codec_path = match &args.codec_ckpt {
        Some(path) => path.clone(),
        None => latest_checkpoint(&ckpt_dir, "codec")?.ok_or_else(|| {
            MageError::Data(format!(
                "no codec checkpoint in {}; run `mage train-codec` first or \
                 pass --codec-ckpt",
                ckpt_dir.display()
            ))
        })?,
    };
    let codec = load_codec(&codec_path)?;
    let codec_sha = sha256_hex(&std::fs::read(&codec_path)?);
    let codec_path_str = codec_path.to_string_lossy().into_owned();
    if codec.cfg.latent_dim != ctx.config.flux.latent_dim {
        return Err(MageError::Config(format!(
            "codec checkpoint has latent_dim {}, backbone expects {}",
            codec.cfg.latent_dim, ctx.config.flux.latent_dim
        )));
    }

    println!("encoding the train split with the frozen codec…");
    let prepared = prepare_training_set(&ctx.config, &codec)?;
    println!("materializing the {split} split…");
    let set = collect_eval_set(&ctx.config, split, limit)?;
    println!("fitting the toy embedder…");
    let embedder = ToyEmbedder::train(&ctx.config.dataset, ctx.config.eval.embedder.clone())?;
    println!(
        "grid: {} variants × {} seeds, {} steps each, {} eval examples",
        variants.len(),
        seeds.len(),
        steps,
        set.len()
    );

    let mut results: Vec<VariantResult> = Vec::new();
    for variant in &variants {
        let mut per_seed = Vec::new();
        for &seed in &seeds {
            let mut flux_cfg = ctx.config.flux.clone();
            variant.apply(&mut flux_cfg);
            flux_cfg.seed = seed;
            let mut trainer: FluxTrainState<TrainScalar> =
                FluxTrainState::new(FluxFormer::new(flux_cfg)?);
            while trainer.step < steps {
                let batch = batch_indices(seed, trainer.step as u64, batch_size, prepared.len())
                    .into_iter()
                    .map(|i| prepared[i].clone())
                    .collect::<Vec<_>>();
                trainer.train_step(&batch)?;
            }
            let ckpt = ckpt_dir.join(format!(
                "ablate-{}-seed{}.ckpt",
                variant.file_label(),
                seed
            ));
            save_flux_checkpoint(&ckpt, &trainer, &codec_path_str, &codec_sha)?;
            ctx.add_checkpoint(&ckpt)?;

            let estimates = edit_estimates(&trainer.model, &codec, &set, true, true, &icfg)?;
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
                "{} seed {seed}: median SDR {:+.2} dB",
                variant.label(),
                report.summary.sdr_median_db
            );
            per_seed.push(report.summary);
        }
        let sdr: Vec<f64> = per_seed.iter().map(|s| s.sdr_median_db).collect();
        let sir: Vec<f64> = per_seed.iter().map(|s| s.sir_median_db).collect();
        let sar: Vec<f64> = per_seed.iter().map(|s| s.sar_median_db).collect();
        results.push(VariantResult {
            name: variant.label().into(),
            per_seed,
            sdr_median_db: median(&sdr),
            sir_median_db: median(&sir),
            sar_median_db: median(&sar),
            gap_to_full_db: None,
            meets_margin: None,
        });
    }

    let full_sdr = variants
        .iter()
        .position(|v| *v == AblationVariant::Full)
        .map(|i| results[i].sdr_median_db);
    if let Some(full) = full_sdr {
        for (variant, result) in variants.iter().zip(results.iter_mut()) {
            if *variant == AblationVariant::Full {
                continue;
            }
            let gap = full - result.sdr_median_db;
            result.gap_to_full_db = Some(gap);
            result.meets_margin = Some(gap >= MARGIN_DB);
        }
    } else {
        println!("note: grid omits the full model, so margin checks are skipped");
    }

    let report = AblationReport {
        split: split.to_string(),
        steps,
        seeds: seeds.clone(),
        examples: set.len(),
        margin_db: MARGIN_DB,
        variants: results,
    };

    let json_path = ctx.paths.reports().join("ablation.json");
    let body = serde_json::to_vec_pretty(&report)
        .map_err(|e| MageError::Io(std::io::Error::other(e.to_string())))?;
    std::fs::write(&json_path, body)?;
    ctx.add_report(&json_path)?;
    let csv_path = ctx.paths.reports().join("ablation.csv");
    write_ablation_csv(&csv_path, &report)?;
    ctx.add_report(&csv_path)?;

    print_ablation(&report);
    for v in &report.variants {
        if v.meets_margin == Some(false) {
            println!(
                "note: full model leads '{}' by {:+.2} dB, under the {} dB margin",
                v.name,
                v.gap_to_full_db.unwrap_or(f64::NAN),
                MARGIN_DB
            );
        }
    }

    ctx.finish(&format!(
        "ablation grid: {} variants × {} seeds at {} steps on the {split} split",
        report.variants.len(),
        seeds.len(),
        steps
    ))
}
