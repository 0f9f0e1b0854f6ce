use std::path::Path;

use anyhow::{bail, Context, Result};
use serde::Deserialize;
use serde_json::Value;
use tracebox_core::geometry::ImageDims;
use tracebox_core::pipeline::{
    denormalize_trajectory, filter_multibox as keep_multibox, inject_reflection as inject, make_counting_mcq,
    parse_visdrone, selected_for_reflection, DecoyConfig, ImageAnnotation, NormalizedTrajectory, Rounding, Trajectory,
    DEFAULT_REFLECTION_FRACTION,
};
use tracebox_core::verdicts::filter_hard as keep_hard;

use crate::eval::verdict_table;
use crate::jsonl;

pub fn denormalize(input: &Path, out: &Path, rounding: Rounding) -> Result<String> {
    let records: Vec<NormalizedTrajectory> = jsonl::read(input)?;
    let n = records.len();
    let trajectories = records
        .into_iter()
        .map(|r| {
            let id = r.id.clone();
            denormalize_trajectory(r, rounding).with_context(|| format!("record {id}"))
        })
        .collect::<Result<Vec<_>>>()?;
    jsonl::write(out, &trajectories)?;
    Ok(format!("converted {n} record(s)"))
}

pub fn filter_multibox(input: &Path, out: &Path) -> Result<String> {
    let records: Vec<Trajectory> = jsonl::read(input)?;
    let n = records.len();
    let kept = keep_multibox(records);
    jsonl::write(out, &kept)?;
    Ok(format!("kept {} of {n}", kept.len()))
}

pub fn inject_reflection(
    input: &Path,
    out: &Path,
    seed: u64,
    fraction: Option<f64>,
    only_modified: bool,
    iou_ceiling: Option<f64>,
) -> Result<String> {
    let fraction = fraction.unwrap_or(DEFAULT_REFLECTION_FRACTION);
    if !(0.0..=1.0).contains(&fraction) {
        bail!("fraction must be within [0, 1], got {fraction}");
    }
    let mut cfg = DecoyConfig::default();
    if let Some(c) = iou_ceiling {
        cfg.iou_ceiling = c;
    }
    let records: Vec<Trajectory> = jsonl::read(input)?;
    let mut written = Vec::with_capacity(records.len());
    let mut modified = 0;
    for t in &records {
        if selected_for_reflection(seed, &t.id, fraction) {
            written.push(inject(t, seed, &cfg)?);
            modified += 1;
        } else if !only_modified {
            written.push(t.clone());
        }
    }
    jsonl::write(out, &written)?;
    Ok(format!("modified {modified} of {}", records.len()))
}

pub fn filter_hard(input: &Path, record_files: &[impl AsRef<Path>], out: &Path, attempts: usize) -> Result<String> {
    let samples: Vec<Value> = jsonl::read(input)?;
    let kept = keep_hard(&samples, &verdict_table(record_files)?, attempts)?;
    jsonl::write(out, &kept)?;
    Ok(format!("kept {} of {}", kept.len(), samples.len()))
}

/// A VisDrone annotation file referenced from the input list.
#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct VisDroneRef {
    id: String,
    #[serde(rename = "image_ref", alias = "image")]
    image: String,
    dims: ImageDims,
    visdrone: String,
}

fn load_annotation(line: Value, base: &Path) -> Result<ImageAnnotation> {
    if line.get("visdrone").is_none() {
        return Ok(serde_json::from_value(line)?);
    }
    let r: VisDroneRef = serde_json::from_value(line)?;
    let path = base.join(&r.visdrone);
    let text = std::fs::read_to_string(&path).with_context(|| path.display().to_string())?;
    parse_visdrone(&r.id, &r.image, r.dims, &text).map_err(|e| anyhow::anyhow!("{}: {e}", path.display()))
}

pub fn make_counting(input: &Path, out: &Path, seed: u64) -> Result<String> {
    let base = input.parent().unwrap_or(Path::new("."));
    let lines: Vec<Value> = jsonl::read(input)?;
    let n = lines.len();
    let mut made = Vec::new();
    for line in lines {
        let ann = load_annotation(line, base)?;
        if let Some(q) = make_counting_mcq(&ann, seed) {
            made.push(q);
        }
    }
    jsonl::write(out, &made)?;
    Ok(format!("made {} question(s) from {n} image(s)", made.len()))
}
