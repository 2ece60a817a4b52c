//! `mage make-data`: plan the synthetic benchmark, write its manifest, and
//! optionally export listening copies of evaluation examples.

use std::path::PathBuf;

use serde::Serialize;

use mage_core::audio::WavEncoding;
use mage_core::error::Result;
use mage_core::synthbench::{dataset_records, materialize_example, write_manifest, ExampleRecord};
use mage_core::TrainScalar;

use crate::commands::ConfigArgs;
use crate::runs::sha256_hex;

#[derive(Debug, clap::Args)]
pub struct MakeDataArgs {
    #[command(flatten)]
    pub cfg: ConfigArgs,
    /// Export the first N evaluation-split examples as WAV files (mixture +
    /// target) with JSON sidecars under `audio/`.
    #[arg(long, value_name = "N", default_value_t = 0)]
    pub export_audio: usize,
}

/// Sidecar written next to each exported example pair.
#[derive(Debug, Serialize)]
struct ExportSidecar<'a> {
    record: &'a ExampleRecord,
    target_label: usize,
    interferer_label: usize,
    mixture_wav: String,
    target_wav: String,
}

pub fn make_data(args: MakeDataArgs) -> Result<()> {
    let ctx = args.cfg.open("make-data")?;
    let records = dataset_records(&ctx.config.dataset)?;

    let manifest_path = ctx.paths.dataset_manifest();
    write_manifest(&manifest_path, &records)?;
    let hash = sha256_hex(&std::fs::read(&manifest_path)?);

    let mut exported = 0usize;
    if args.export_audio > 0 {
        let split = ctx.config.eval.split;
        for record in records.iter().filter(|r| r.split == split) {
            if exported == args.export_audio {
                break;
            }
            let example = materialize_example::<TrainScalar>(&ctx.config.dataset, record)?;
            let stem = format!("example-{:04}", record.example_index);
            let mixture_wav: PathBuf = ctx.paths.audio().join(format!("{stem}-mixture.wav"));
            let target_wav: PathBuf = ctx.paths.audio().join(format!("{stem}-target.wav"));
            example.mixture.write_wav(&mixture_wav, WavEncoding::Float32)?;
            example.target().write_wav(&target_wav, WavEncoding::Float32)?;
            let sidecar = ExportSidecar {
                record,
                target_label: example.target_label(),
                interferer_label: if example.target_index == 0 {
                    example.label_b
                } else {
                    example.label_a
                },
                mixture_wav: mixture_wav.to_string_lossy().into_owned(),
                target_wav: target_wav.to_string_lossy().into_owned(),
            };
            let text = serde_json::to_string_pretty(&sidecar)?;
            std::fs::write(ctx.paths.audio().join(format!("{stem}.json")), text)?;
            exported += 1;
        }
    }

    let by_split = |s: mage_core::synthbench::Split| records.iter().filter(|r| r.split == s).count();
    let detail = format!(
        "{} examples (train {}, val {}, test {}), manifest sha256 {hash}",
        records.len(),
        by_split(mage_core::synthbench::Split::Train),
        by_split(mage_core::synthbench::Split::Val),
        by_split(mage_core::synthbench::Split::Test),
    );
    println!("dataset manifest: {}", manifest_path.display());
    println!("manifest sha256: {hash}");
    if exported > 0 {
        println!(
            "exported {exported} evaluation examples to {}",
            ctx.paths.audio().display()
        );
    }
    ctx.finish(&detail)
}
