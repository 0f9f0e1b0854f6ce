use std::path::Path;
use std::time::Duration;

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};
use tracebox_core::chat::{build_transport, CassetteMode, EndpointConfig};
use tracebox_core::harness::{
    build_report, evaluate, load_dataset, ChatModelClient, EvalOptions, EvalRecord, EvalReport,
};
use tracebox_core::template::{PromptTemplate, TemplateProvenance};
use tracebox_core::verdicts::{consensus_filter, VerdictTable};

use crate::config::EvalSettings;
use crate::jsonl;

/// What a run needs to be re-reported without the model.
#[derive(Debug, Serialize, Deserialize)]
pub struct RunManifest {
    pub model: String,
    pub prompt_template: TemplateProvenance,
    pub seed: u64,
    pub dataset_sha256: String,
}

pub struct RunArgs<'a> {
    pub dataset: &'a Path,
    pub out: &'a Path,
    pub prompt: Option<&'a Path>,
    pub endpoint: EndpointConfig,
    pub cassette_mode: CassetteMode,
    pub cassette: Option<&'a Path>,
    pub seed: u64,
    pub settings: &'a EvalSettings,
}

fn sha256_file(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).with_context(|| path.display().to_string())?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

fn write_reports(out: &Path, report: &EvalReport) -> Result<()> {
    std::fs::write(out.join("report.json"), report.to_json())?;
    std::fs::write(out.join("report.md"), report.markdown())?;
    std::fs::write(out.join("per_category.csv"), report.category_csv())?;
    std::fs::write(out.join("histograms.csv"), report.histogram_csv())?;
    Ok(())
}

fn summary(report: &EvalReport) -> String {
    format!(
        "accuracy {:.2}% ({}/{}), mIoU {:.4}, unanswered {}",
        report.overall_accuracy, report.correct, report.total, report.miou, report.unanswered
    )
}

pub async fn run(args: RunArgs<'_>) -> Result<String> {
    let samples = load_dataset(args.dataset).with_context(|| args.dataset.display().to_string())?;
    let template = match args.prompt {
        Some(p) => PromptTemplate::load(p).with_context(|| p.display().to_string())?,
        None => PromptTemplate::eval_v1(),
    };
    let transport = build_transport(&args.endpoint, args.cassette_mode, args.cassette)?;
    let client = ChatModelClient::new(transport, args.endpoint.clone());
    let opts = EvalOptions {
        max_in_flight: args.settings.max_in_flight,
        max_retries: args.settings.max_retries,
        backoff: Duration::from_millis(args.settings.backoff_ms),
    };
    let records = evaluate(&client, &samples, &template, args.seed, &opts).await;

    std::fs::create_dir_all(args.out)?;
    jsonl::write(&args.out.join("records.jsonl"), &records)?;
    let manifest = RunManifest {
        model: args.endpoint.model.clone(),
        prompt_template: template.provenance(),
        seed: args.seed,
        dataset_sha256: sha256_file(args.dataset)?,
    };
    std::fs::write(
        args.out.join("run.json"),
        serde_json::to_string_pretty(&manifest)? + "\n",
    )?;
    let report =
        build_report(&records, &samples)?.with_provenance(Some(manifest.model), Some(manifest.prompt_template));
    write_reports(args.out, &report)?;
    Ok(summary(&report))
}

pub fn report(dataset: &Path, out: &Path) -> Result<String> {
    let samples = load_dataset(dataset).with_context(|| dataset.display().to_string())?;
    let records: Vec<EvalRecord> = jsonl::read(&out.join("records.jsonl"))?;
    let manifest_path = out.join("run.json");
    let mut report = build_report(&records, &samples)?;
    if manifest_path.exists() {
        let manifest: RunManifest = serde_json::from_str(&std::fs::read_to_string(&manifest_path)?)?;
        if manifest.dataset_sha256 != sha256_file(dataset)? {
            tracing::warn!("dataset differs from the one recorded in run.json");
        }
        report = report.with_provenance(Some(manifest.model), Some(manifest.prompt_template));
    }
    write_reports(out, &report)?;
    Ok(summary(&report))
}

pub fn verdict_table(record_files: &[impl AsRef<Path>]) -> Result<VerdictTable> {
    let mut table = VerdictTable::new();
    for path in record_files {
        let records: Vec<EvalRecord> = jsonl::read(path.as_ref())?;
        table.extend(records.into_iter().map(|r| (r.id, r.correct)));
    }
    Ok(table)
}

pub fn filter_consensus(input: &Path, record_files: &[impl AsRef<Path>], out: &Path) -> Result<usize> {
    let samples: Vec<Value> = jsonl::read(input)?;
    let kept = consensus_filter(&samples, &verdict_table(record_files)?, record_files.len())?;
    jsonl::write(out, &kept)?;
    Ok(kept.len())
}
