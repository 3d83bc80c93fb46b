//! Region, staging and Limited/Advanced agreement statistics against a
//! reference standard.

mod export;
mod kappa;
mod metrics;
mod reference;

use std::collections::{BTreeMap, BTreeSet};

use log::warn;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::localization::InvolvementProfile;
use crate::region::RegionId;
use crate::staging::{Stage, StagingResult, TherapeuticGroup};

pub use export::{confusion_svg, confusion_text, summary_text, region_table_csv};
pub use kappa::{weighted_kappa, StagingConfusion};
pub use metrics::*;
pub use reference::{reference_header, ReferenceRow, ReferenceTable};

/// One patient's pipeline output as consumed by the evaluator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatientPrediction {
    pub patient_id: String,
    pub profile: InvolvementProfile,
    pub staging: StagingResult,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalOptions {
    pub ci_method: CiMethod,
    pub ci_level: f64,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions {
            ci_method: CiMethod::ClopperPearson,
            ci_level: 0.95,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BinaryEvaluation {
    pub counts: ConfusionCounts,
    pub metrics: MetricSet,
}

impl BinaryEvaluation {
    fn new(counts: ConfusionCounts, opts: &EvalOptions) -> Result<Self> {
        Ok(BinaryEvaluation {
            counts,
            metrics: binary_metrics_with(&counts, opts.ci_method, opts.ci_level)?,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegionRow {
    pub region: RegionId,
    pub label: String,
    pub positive_cases: u64,
    #[serde(flatten)]
    pub evaluation: BinaryEvaluation,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StagingEvaluation {
    pub confusion: StagingConfusion,
    pub accuracy: Metric,
    /// Quadratically weighted; `None` when undefined.
    pub weighted_kappa: Option<f64>,
    pub per_stage: BTreeMap<Stage, BinaryEvaluation>,
}

/// Limited (I/II) versus Advanced (III/IV), Advanced as the positive class.
/// Unstaged patients count as not Advanced.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TherapeuticEvaluation {
    #[serde(flatten)]
    pub evaluation: BinaryEvaluation,
    pub positive_f1: Option<f64>,
    pub macro_f1: Option<f64>,
    pub f_accuracy_recall: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub patients: usize,
    pub options: EvalOptions,
    pub regions: Vec<RegionRow>,
    /// Sum of the per-region rows over all patient-region cells.
    pub pooled: BinaryEvaluation,
    pub extranodal: BinaryEvaluation,
    pub staging: StagingEvaluation,
    pub therapeutic: TherapeuticEvaluation,
    pub warnings: Vec<String>,
}

fn advanced(stage: Stage) -> bool {
    stage.group() == TherapeuticGroup::Advanced
}

/// Compares predictions to the reference. Every predicted patient must have
/// a reference row; unmatched reference rows are only reported.
pub fn evaluate_cohort(
    predictions: &[PatientPrediction],
    reference: &ReferenceTable,
    opts: &EvalOptions,
) -> Result<EvalReport> {
    if predictions.is_empty() {
        return Err(Error::NoPredictions);
    }
    let mut seen = BTreeSet::new();
    for p in predictions {
        if !seen.insert(p.patient_id.as_str()) {
            return Err(Error::DuplicatePatient(p.patient_id.clone()));
        }
        if !reference.rows.contains_key(&p.patient_id) {
            return Err(Error::Reference(format!("no reference row for patient {:?}", p.patient_id)));
        }
    }
    let mut warnings = Vec::new();
    let unmatched: Vec<&str> = reference
        .rows
        .keys()
        .map(String::as_str)
        .filter(|id| !seen.contains(id))
        .collect();
    if !unmatched.is_empty() {
        let w = format!("{} reference rows without predictions: {}", unmatched.len(), unmatched.join(", "));
        warn!("{w}");
        warnings.push(w);
    }

    let mut region_counts = [ConfusionCounts::default(); 21];
    let mut extranodal = ConfusionCounts::default();
    let mut therapeutic = ConfusionCounts::default();
    let mut stage_pairs = Vec::with_capacity(predictions.len());
    for p in predictions {
        let r = &reference.rows[&p.patient_id];
        for id in RegionId::ALL {
            region_counts[id.index()].record(r.involved.contains(id), p.profile.involved.contains(id));
        }
        extranodal.record(r.extranodal, p.profile.extranodal);
        therapeutic.record(advanced(r.stage), advanced(p.staging.stage));
        stage_pairs.push((r.stage, p.staging.stage));
    }

    let regions = RegionId::ALL
        .iter()
        .map(|&id| {
            let c = region_counts[id.index()];
            Ok(RegionRow {
                region: id,
                label: id.label().to_string(),
                positive_cases: c.tp + c.fn_,
                evaluation: BinaryEvaluation::new(c, opts)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let pooled = region_counts.iter().fold(ConfusionCounts::default(), |a, c| a.add(c));

    let confusion = StagingConfusion::from_pairs(&stage_pairs);
    let per_stage = confusion
        .stages
        .iter()
        .map(|&s| Ok((s, BinaryEvaluation::new(confusion.one_vs_rest(s), opts)?)))
        .collect::<Result<BTreeMap<_, _>>>()?;
    let staging = StagingEvaluation {
        accuracy: proportion(confusion.correct(), confusion.total(), opts.ci_method, opts.ci_level)?,
        weighted_kappa: confusion.kappa()?,
        per_stage,
        confusion,
    };

    let t = BinaryEvaluation::new(therapeutic, opts)?;
    let therapeutic = TherapeuticEvaluation {
        positive_f1: t.metrics.f1.value,
        macro_f1: macro_f1(&therapeutic),
        f_accuracy_recall: t.metrics.f_accuracy_recall.value,
        evaluation: t,
    };

    Ok(EvalReport {
        patients: predictions.len(),
        options: *opts,
        regions,
        pooled: BinaryEvaluation::new(pooled, opts)?,
        extranodal: BinaryEvaluation::new(extranodal, opts)?,
        staging,
        therapeutic,
        warnings,
    })
}
