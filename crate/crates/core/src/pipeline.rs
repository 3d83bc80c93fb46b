//! Single-patient orchestration: load, normalize, segment, build the atlas,
//! localize, stage, report.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use log::{debug, info};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::atlas::{build_atlas, default_rules, parse_rules, RegionAtlas, RuleSet};
use crate::error::{Error, Result};
use crate::evaluation::EvalOptions;
use crate::localization::{build_involvement, localize_lesions, InvolvementProfile, Lesion, LocalizationConfig};
use crate::normalization::{compute_liver_stats_with, normalize_with, LiverStats, NormalizationConfig, NormalizationMode};
use crate::segmentation::{import_lesion_mask, suv_threshold_segment, threshold_segment, SegmentationConfig, SegmentationMode};
use crate::staging::{stage, StagingResult};
use crate::volume::{nifti, Interpolation, LabelVolume, Resample, ScalarKind, ScalarVolume};

pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InputPaths {
    pub pet: PathBuf,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ct: Option<PathBuf>,
    pub landmarks: PathBuf,
    /// `{"id": "name"}` JSON; defaults to the `.labels.json` sidecar of
    /// `landmarks`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub landmark_labels: Option<PathBuf>,
    /// Required when segmentation mode is `external`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lesion_mask: Option<PathBuf>,
    /// Rule file; the shipped default rules when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub rules: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub reference: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NormalizationSettings {
    /// When false the liver is not required and segmentation uses the SUV
    /// threshold alone.
    pub enabled: bool,
    pub liver_label: String,
    pub mode: NormalizationMode,
    pub min_liver_voxels: usize,
    pub epsilon: f64,
}

impl Default for NormalizationSettings {
    fn default() -> Self {
        let c = NormalizationConfig::default();
        NormalizationSettings {
            enabled: true,
            liver_label: "liver".into(),
            mode: c.mode,
            min_liver_voxels: c.min_liver_voxels,
            epsilon: c.epsilon,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub patient_id: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<PathBuf>,
    /// Write the lesion mask and atlas next to the report as they are made.
    pub write_intermediates: bool,
    pub paths: InputPaths,
    pub normalization: NormalizationSettings,
    pub segmentation: SegmentationConfig,
    pub localization: LocalizationConfig,
    pub evaluation: EvalOptions,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            patient_id: "patient".into(),
            output_dir: None,
            write_intermediates: true,
            paths: InputPaths::default(),
            normalization: NormalizationSettings::default(),
            segmentation: SegmentationConfig::default(),
            localization: LocalizationConfig::default(),
            evaluation: EvalOptions::default(),
        }
    }
}

impl PipelineConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::from_toml(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        if let Some(base) = path.parent().filter(|b| !b.as_os_str().is_empty()) {
            cfg.rebase(base);
        }
        Ok(cfg)
    }

    /// Resolves relative paths against `base` (the config file's directory).
    pub fn rebase(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        let paths = &mut self.paths;
        fix(&mut paths.pet);
        fix(&mut paths.landmarks);
        for p in [
            &mut paths.ct,
            &mut paths.landmark_labels,
            &mut paths.lesion_mask,
            &mut paths.rules,
            &mut paths.reference,
            &mut self.output_dir,
        ]
        .into_iter()
        .flatten()
        {
            fix(p);
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.segmentation.validate()?;
        self.localization.extranodal.validate()?;
        if self.patient_id.trim().is_empty() {
            return Err(Error::Config("patient_id is empty".into()));
        }
        if self.segmentation.mode == SegmentationMode::External && self.paths.lesion_mask.is_none() {
            return Err(Error::Config("external segmentation needs paths.lesion_mask".into()));
        }
        if !(self.evaluation.ci_level > 0.0 && self.evaluation.ci_level < 1.0) {
            return Err(Error::Config(format!("ci_level must be in (0, 1), got {}", self.evaluation.ci_level)));
        }
        Ok(())
    }
}

/// `x.nii.gz` / `x.nii` → `x.labels.json`.
pub fn label_sidecar(path: &Path) -> PathBuf {
    let name = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    let stem = name
        .strip_suffix(".nii.gz")
        .or_else(|| name.strip_suffix(".nii"))
        .unwrap_or(&name);
    path.with_file_name(format!("{stem}.labels.json"))
}

/// Pipeline step names used in error reports.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Step {
    Config,
    Load,
    Normalize,
    Segment,
    Atlas,
    Localize,
    Stage,
    Report,
}

impl Step {
    pub fn name(self) -> &'static str {
        match self {
            Step::Config => "config",
            Step::Load => "load",
            Step::Normalize => "normalize",
            Step::Segment => "segment",
            Step::Atlas => "atlas",
            Step::Localize => "localize",
            Step::Stage => "stage",
            Step::Report => "report",
        }
    }
}

#[derive(Debug, thiserror::Error)]
#[error("{} failed: {error}", .step.name())]
pub struct PipelineError {
    pub step: Step,
    #[source]
    pub error: Error,
}

trait AtStep<T> {
    fn at(self, step: Step) -> std::result::Result<T, PipelineError>;
}

impl<T> AtStep<T> for Result<T> {
    fn at(self, step: Step) -> std::result::Result<T, PipelineError> {
        self.map_err(|error| PipelineError { step, error })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormalizationReport {
    pub enabled: bool,
    pub mode: NormalizationMode,
    pub liver: Option<LiverStats>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatientReport {
    pub patient_id: String,
    pub tool_version: String,
    pub rule_hash: String,
    /// sha256 of each input file.
    pub input_hashes: BTreeMap<String, String>,
    pub normalization: NormalizationReport,
    pub segmentation_mode: SegmentationMode,
    pub lesion_voxels: usize,
    pub atlas_warnings: Vec<String>,
    pub lesions: Vec<Lesion>,
    pub profile: InvolvementProfile,
    pub staging: StagingResult,
    pub config: PipelineConfig,
}

impl PatientReport {
    /// Pretty JSON with a trailing newline; stable across runs.
    pub fn to_json(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        Ok(s)
    }
}

/// Everything the pipeline produced, for callers that want the volumes.
#[derive(Debug, Clone)]
pub struct PipelineOutput {
    pub report: PatientReport,
    pub lesion_mask: LabelVolume,
    pub atlas: RegionAtlas,
}

pub fn file_sha256(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(format!("{:x}", Sha256::digest(&bytes)))
}

pub fn load_rules(path: Option<&Path>) -> Result<RuleSet> {
    match path {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
            Ok(parse_rules(&text)?)
        }
        None => Ok(default_rules()),
    }
}

/// Reads a landmark map with its dictionary (explicit path, else the
/// sidecar when present).
pub fn load_landmarks(path: &Path, labels: Option<&Path>) -> Result<LabelVolume> {
    let dict = match labels {
        Some(p) => nifti::read_label_dictionary(p)?,
        None => {
            let side = label_sidecar(path);
            if side.exists() {
                nifti::read_label_dictionary(&side)?
            } else {
                BTreeMap::new()
            }
        }
    };
    nifti::read_labels(path, dict)
}

fn binary_of(labels: &LabelVolume, name: &str) -> Result<LabelVolume> {
    let mask: Vec<bool> = match labels.label_id(name) {
        Some(id) => labels.labels().iter().map(|&l| l == id).collect(),
        None => {
            return Err(Error::LiverStatsUnavailable(format!(
                "landmark map has no `{name}` label"
            )))
        }
    };
    LabelVolume::binary(*labels.grid(), &mask, name)
}

fn write_intermediate(cfg: &PipelineConfig, name: &str, f: impl FnOnce(&Path) -> Result<()>) -> Result<()> {
    if let (Some(dir), true) = (&cfg.output_dir, cfg.write_intermediates) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let p = dir.join(name);
        f(&p)?;
        debug!("wrote {}", p.display());
    }
    Ok(())
}

/// Runs all steps on in-memory volumes. `landmarks` may sit on another grid
/// and is resampled (nearest) onto the PET grid.
pub fn run_on_volumes(
    cfg: &PipelineConfig,
    pet: &ScalarVolume,
    landmarks: &LabelVolume,
    rules: &RuleSet,
    external_mask: Option<LabelVolume>,
    input_hashes: BTreeMap<String, String>,
) -> std::result::Result<PipelineOutput, PipelineError> {
    cfg.validate().at(Step::Config)?;
    let grid = *pet.grid();
    let landmarks = if landmarks.grid().matches(&grid) {
        landmarks.clone()
    } else {
        info!("resampling landmark map onto the PET grid");
        landmarks.resample(&grid, Interpolation::Nearest).at(Step::Load)?
    };

    let n = &cfg.normalization;
    let (liver, petnorm) = if n.enabled {
        let liver_mask = binary_of(&landmarks, &n.liver_label).at(Step::Normalize)?;
        let stats = compute_liver_stats_with(pet, &liver_mask, n.min_liver_voxels).at(Step::Normalize)?;
        let norm = normalize_with(pet, &stats, n.mode, n.epsilon).at(Step::Normalize)?;
        info!(
            "liver SUV mean {:.3} std {:.3} over {} voxels",
            stats.mean_suv, stats.std_suv, stats.voxel_count
        );
        (Some(stats), Some(norm))
    } else {
        (None, None)
    };

    let mask = match (cfg.segmentation.mode, external_mask) {
        (SegmentationMode::External, Some(m)) => {
            if m.grid().matches(&grid) {
                m.binarized("lesion")
            } else {
                m.binarized("lesion").resample(&grid, Interpolation::Nearest).at(Step::Segment)?
            }
        }
        (SegmentationMode::External, None) => {
            return Err(Error::Config("external segmentation without a lesion mask".into())).at(Step::Segment)
        }
        (SegmentationMode::Threshold, _) => match &petnorm {
            Some(norm) => threshold_segment(pet, norm, &cfg.segmentation),
            None => suv_threshold_segment(pet, &cfg.segmentation),
        }
        .at(Step::Segment)?,
    };
    info!("lesion mask: {} foreground voxels", mask.foreground_count());
    write_intermediate(cfg, "lesion_mask.nii.gz", |p| nifti::write_labels(p, &mask)).at(Step::Segment)?;

    let atlas = build_atlas(rules, &landmarks, &grid).at(Step::Atlas)?;
    write_intermediate(cfg, "atlas.nii.gz", |p| nifti::write_labels(p, &atlas.label_volume())).at(Step::Atlas)?;

    let lesions = localize_lesions(&mask, &atlas, &landmarks, &cfg.localization).at(Step::Localize)?;
    let profile = build_involvement(&lesions);
    let staging = stage(&profile);
    info!("{}: stage {} ({:?})", cfg.patient_id, staging.stage, staging.group);

    let report = PatientReport {
        patient_id: cfg.patient_id.clone(),
        tool_version: TOOL_VERSION.to_string(),
        rule_hash: rules.source_hash.clone(),
        input_hashes,
        normalization: NormalizationReport {
            enabled: n.enabled,
            mode: n.mode,
            liver,
        },
        segmentation_mode: cfg.segmentation.mode,
        lesion_voxels: mask.foreground_count(),
        atlas_warnings: atlas.report().warnings.clone(),
        lesions,
        profile,
        staging,
        config: cfg.clone(),
    };
    Ok(PipelineOutput {
        report,
        lesion_mask: mask,
        atlas,
    })
}

/// Loads the configured inputs, runs every step and writes
/// `<output_dir>/<patient_id>.json` when an output directory is set.
pub fn run_pipeline(cfg: &PipelineConfig) -> std::result::Result<PipelineOutput, PipelineError> {
    cfg.validate().at(Step::Config)?;
    let p = &cfg.paths;
    let mut hashes = BTreeMap::new();
    let mut hash = |key: &str, path: &Path| -> Result<()> {
        hashes.insert(key.to_string(), file_sha256(path)?);
        Ok(())
    };
    hash("pet", &p.pet).at(Step::Load)?;
    hash("landmarks", &p.landmarks).at(Step::Load)?;
    let pet = nifti::read_scalar(&p.pet, ScalarKind::Suv).at(Step::Load)?;
    let landmarks = load_landmarks(&p.landmarks, p.landmark_labels.as_deref()).at(Step::Load)?;
    if let Some(ct) = &p.ct {
        hash("ct", ct).at(Step::Load)?;
        let ct = nifti::read_scalar(ct, ScalarKind::Hu).at(Step::Load)?;
        debug!("CT grid {:?}", ct.grid().dims());
    }
    let rules = load_rules(p.rules.as_deref()).at(Step::Atlas)?;
    if let Some(r) = &p.rules {
        hash("rules", r).at(Step::Atlas)?;
    }
    let external = match (cfg.segmentation.mode, &p.lesion_mask) {
        (SegmentationMode::External, Some(m)) => {
            hash("lesion_mask", m).at(Step::Segment)?;
            Some(import_lesion_mask(m, pet.grid()).at(Step::Segment)?)
        }
        _ => None,
    };
    let out = run_on_volumes(cfg, &pet, &landmarks, &rules, external, hashes)?;
    if let Some(dir) = &cfg.output_dir {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e)).at(Step::Report)?;
        let path = dir.join(format!("{}.json", cfg.patient_id));
        let json = out.report.to_json().at(Step::Report)?;
        fs::write(&path, json).map_err(|e| Error::io(&path, e)).at(Step::Report)?;
        info!("wrote {}", path.display());
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::phantom::{generate, LesionTarget, PhantomSpec, PlantedLesion};
    use crate::region::RegionId;
    use crate::staging::Stage;

    #[test]
    fn config_round_trips_through_toml() {
        let mut cfg = PipelineConfig {
            patient_id: "p7".into(),
            output_dir: Some("out/p7".into()),
            ..Default::default()
        };
        cfg.paths.pet = "pet.nii.gz".into();
        cfg.paths.landmarks = "lm.nii.gz".into();
        cfg.paths.rules = Some("r.rules".into());
        cfg.segmentation.suv_threshold = 3.25;
        cfg.evaluation.ci_level = 0.9;
        let text = cfg.to_toml().unwrap();
        assert_eq!(PipelineConfig::from_toml(&text).unwrap(), cfg);
        assert_eq!(PipelineConfig::from_toml("").unwrap(), PipelineConfig::default());
        assert!(PipelineConfig::from_toml("bogus = 1").is_err());
    }

    #[test]
    fn sidecar_names() {
        assert_eq!(label_sidecar(Path::new("a/lm.nii.gz")), PathBuf::from("a/lm.labels.json"));
        assert_eq!(label_sidecar(Path::new("lm.nii")), PathBuf::from("lm.labels.json"));
    }

    #[test]
    fn phantom_neck_and_spleen_is_stage_three() {
        let mut spec = PhantomSpec::standard(4);
        for r in [RegionId::NeckL, RegionId::Spleen] {
            spec.lesions.push(PlantedLesion::at_anchor(LesionTarget::Region(r), 8.0).unwrap());
        }
        let ph = generate(&spec).unwrap();
        let cfg = PipelineConfig::default();
        let out = run_on_volumes(&cfg, &ph.pet, &ph.landmarks, &default_rules(), None, BTreeMap::new()).unwrap();
        assert_eq!(out.report.staging.stage, Stage::III);
        assert_eq!(out.report.profile.involved, ph.truth.profile.involved);
        assert_eq!(out.atlas.overlapping_voxels(), 0);
    }

    #[test]
    fn missing_liver_is_reported_at_normalize() {
        let mut spec = PhantomSpec::standard(1);
        spec.anatomy.retain(|s| s.name != "liver");
        spec.lesions.push(PlantedLesion::at_anchor(LesionTarget::Region(RegionId::NeckL), 8.0).unwrap());
        let ph = generate(&spec).unwrap();
        let mut cfg = PipelineConfig::default();
        let err = run_on_volumes(&cfg, &ph.pet, &ph.landmarks, &default_rules(), None, BTreeMap::new()).unwrap_err();
        assert_eq!(err.step, Step::Normalize);
        assert_eq!(err.error.class(), "liver-stats-unavailable");
        cfg.normalization.enabled = false;
        let out = run_on_volumes(&cfg, &ph.pet, &ph.landmarks, &default_rules(), None, BTreeMap::new()).unwrap();
        assert_eq!(out.report.staging.stage, Stage::I);
        assert_eq!(out.report.normalization.liver, None);
    }
}
