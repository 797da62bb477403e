//! Deterministic evaluation: argmax prediction, confusion accounting, and
//! report export (JSON, CSV, and a grayscale confusion heatmap).

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dataset::{Manifest, StageLabel, SubjectRecord, STAGE_COUNT};
use crate::error::{Error, Result};
use crate::model::{age_feature, MultiPodModel, AGE_REPEAT};
use crate::nn::tensor::Feat;
use crate::nn::Real;
use crate::pipeline::{self, ImageBuffer, PatchSet};

/// Records per forward pass during evaluation. Evaluation normalisation uses
/// running statistics only, so batching is a throughput choice that cannot
/// change any prediction.
pub const EVAL_BATCH: usize = 32;

/// Index of the largest value; ties resolve to the lower index so results
/// never depend on iteration accidents.
pub fn argmax<F: Real>(values: &[F]) -> usize {
    assert!(!values.is_empty(), "argmax of empty slice");
    let mut best = 0usize;
    for (i, v) in values.iter().enumerate().skip(1) {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

// ---------------------------------------------------------------------------
// Confusion matrix

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    /// `counts[truth][prediction]`.
    counts: [[u64; STAGE_COUNT]; STAGE_COUNT],
}

impl ConfusionMatrix {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, truth: StageLabel, pred: StageLabel) {
        self.counts[truth.index()][pred.index()] += 1;
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) {
        for (row, orow) in self.counts.iter_mut().zip(&other.counts) {
            for (c, o) in row.iter_mut().zip(orow) {
                *c += o;
            }
        }
    }

    pub fn count(&self, truth: StageLabel, pred: StageLabel) -> u64 {
        self.counts[truth.index()][pred.index()]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn trace(&self) -> u64 {
        (0..STAGE_COUNT).map(|i| self.counts[i][i]).sum()
    }

    pub fn accuracy(&self) -> f64 {
        let total = self.total();
        if total == 0 {
            0.0
        } else {
            self.trace() as f64 / total as f64
        }
    }

    /// Diagonal over row sum per class; classes absent from the truth set
    /// report 0 so the numbers stay JSON-serialisable.
    pub fn per_class_recall(&self) -> [f64; STAGE_COUNT] {
        let mut out = [0.0; STAGE_COUNT];
        for (i, row) in self.counts.iter().enumerate() {
            let sum: u64 = row.iter().sum();
            if sum > 0 {
                out[i] = row[i] as f64 / sum as f64;
            }
        }
        out
    }

    /// 7×7 CSV: a header naming prediction columns, then one row per truth
    /// class.
    pub fn to_csv_string(&self) -> String {
        let mut s = String::new();
        for label in StageLabel::ALL {
            s.push(',');
            s.push_str(label.token());
        }
        s.push('\n');
        for (i, row) in self.counts.iter().enumerate() {
            s.push_str(StageLabel::ALL[i].token());
            for c in row {
                s.push_str(&format!(",{c}"));
            }
            s.push('\n');
        }
        s
    }

    pub fn from_csv_str(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        let header: String = StageLabel::ALL
            .iter()
            .map(|l| format!(",{}", l.token()))
            .collect();
        if lines.next() != Some(header.as_str()) {
            return Err(Error::config("confusion CSV header mismatch"));
        }
        let mut out = ConfusionMatrix::new();
        for (i, line) in lines.enumerate() {
            if i >= STAGE_COUNT {
                return Err(Error::config("confusion CSV has too many rows"));
            }
            let mut fields = line.split(',');
            if fields.next() != Some(StageLabel::ALL[i].token()) {
                return Err(Error::config(format!("confusion CSV row {i} has a bad label")));
            }
            for j in 0..STAGE_COUNT {
                let field = fields
                    .next()
                    .ok_or_else(|| Error::config(format!("confusion CSV row {i} is short")))?;
                out.counts[i][j] = field
                    .parse()
                    .map_err(|_| Error::config(format!("bad count '{field}' in confusion CSV")))?;
            }
            if fields.next().is_some() {
                return Err(Error::config(format!("confusion CSV row {i} has extra fields")));
            }
        }
        Ok(out)
    }

    /// Grayscale heatmap: one square cell per (truth, prediction) pair,
    /// brightness proportional to count over the matrix maximum.
    pub fn to_heatmap(&self, cell: usize) -> ImageBuffer {
        let max = self.counts.iter().flatten().copied().max().unwrap_or(0);
        let side = STAGE_COUNT * cell;
        ImageBuffer::from_fn(side, side, 1, |y, x, _| {
            if max == 0 {
                return 0.0;
            }
            let v = self.counts[y / cell][x / cell];
            (v as f64 * 255.0 / max as f64) as f32
        })
    }
}

// ---------------------------------------------------------------------------
// Reports

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EvalReport {
    pub accuracy: f64,
    pub per_class_recall: [f64; STAGE_COUNT],
    pub n: usize,
    pub confusion: ConfusionMatrix,
    pub variant: String,
    pub seed: u64,
    pub epoch: u64,
}

/// Write `report.json`, `confusion.csv`, and `confusion.png` into `dir`
/// (created if needed).
pub fn export_report(report: &EvalReport, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|source| Error::Write {
        path: dir.to_path_buf(),
        source,
    })?;
    let json = serde_json::to_string_pretty(report)
        .map_err(|e| Error::config(format!("report serialisation failed: {e}")))?;
    let json_path = dir.join("report.json");
    fs::write(&json_path, json).map_err(|source| Error::Write {
        path: json_path.clone(),
        source,
    })?;
    let csv_path = dir.join("confusion.csv");
    fs::write(&csv_path, report.confusion.to_csv_string()).map_err(|source| Error::Write {
        path: csv_path.clone(),
        source,
    })?;
    pipeline::save_png(&report.confusion.to_heatmap(32), &dir.join("confusion.png"))?;
    Ok(())
}

// ---------------------------------------------------------------------------
// Prediction

fn forward_prepared(
    model: &mut MultiPodModel<f32>,
    sets: &[&PatchSet],
    ages: &[f64],
    parallel: bool,
) -> Result<Vec<StageLabel>> {
    let variant = model.cfg.variant;
    let pod_count = variant.pod_count();
    let inputs: Vec<Feat<f32>> = (0..pod_count)
        .map(|k| MultiPodModel::<f32>::pod_input_batch(variant, k, sets))
        .collect();
    let age_block: Vec<f32> = if model.cfg.use_age {
        let mut block = Vec::with_capacity(sets.len() * AGE_REPEAT);
        for &age in ages {
            block.extend(age_feature(age, None)?.iter().map(|&v| v as f32));
        }
        block
    } else {
        Vec::new()
    };
    let logits = model.forward_batch(
        &inputs,
        model.cfg.use_age.then_some(age_block.as_slice()),
        false,
        parallel,
    )?;
    Ok((0..sets.len())
        .map(|b| StageLabel::from_index(argmax(logits.sample(b))).expect("argmax is in 0..6"))
        .collect())
}

/// Predict stages for patch sets that have already been through the
/// geometric pipeline. Runs in [`EVAL_BATCH`]-sized batches.
pub fn predictions_prepared(
    model: &mut MultiPodModel<f32>,
    sets: &[PatchSet],
    ages: &[f64],
    parallel: bool,
) -> Result<Vec<StageLabel>> {
    assert_eq!(sets.len(), ages.len(), "one age per patch set");
    let mut out = Vec::with_capacity(sets.len());
    for start in (0..sets.len()).step_by(EVAL_BATCH) {
        let end = (start + EVAL_BATCH).min(sets.len());
        let refs: Vec<&PatchSet> = sets[start..end].iter().collect();
        out.extend(forward_prepared(model, &refs, &ages[start..end], parallel)?);
    }
    Ok(out)
}

/// Predict one record's stage: resolve and prepare its image, then run the
/// model in evaluation mode.
pub fn predict(
    model: &mut MultiPodModel<f32>,
    record: &SubjectRecord,
    base_dir: &Path,
) -> Result<StageLabel> {
    let img = pipeline::eval_base_image(record, base_dir)?;
    let set = pipeline::extract_patches(&img)?;
    let labels = forward_prepared(model, &[&set], &[record.age_years], false)?;
    Ok(labels[0])
}

/// Evaluate a manifest: per-record predictions against recorded stages,
/// aggregated into a confusion matrix and summary report.
pub fn evaluate(
    model: &mut MultiPodModel<f32>,
    manifest: &Manifest,
    parallel: bool,
) -> Result<EvalReport> {
    let sets: Vec<PatchSet> = manifest
        .records()
        .iter()
        .map(|r| {
            let img = pipeline::eval_base_image(r, manifest.base_dir())?;
            pipeline::extract_patches(&img)
        })
        .collect::<Result<_>>()?;
    let ages: Vec<f64> = manifest.records().iter().map(|r| r.age_years).collect();
    let preds = predictions_prepared(model, &sets, &ages, parallel)?;
    let mut confusion = ConfusionMatrix::new();
    for (record, pred) in manifest.records().iter().zip(&preds) {
        confusion.add(record.stage, *pred);
    }
    Ok(EvalReport {
        accuracy: confusion.accuracy(),
        per_class_recall: confusion.per_class_recall(),
        n: manifest.len(),
        confusion,
        variant: model.cfg.variant.to_string(),
        seed: model.cfg.seed,
        epoch: model.epoch,
    })
}
