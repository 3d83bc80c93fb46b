use std::collections::BTreeMap;
use std::fs;
use std::io::Read;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use log::{info, warn};
use rayon::prelude::*;
use serde_json::{json, Value};

use lymphstage::atlas::{build_atlas, RegionAtlas};
use lymphstage::error::Error;
use lymphstage::evaluation::{
    confusion_svg, confusion_text, evaluate_cohort, summary_text, region_table_csv, CiMethod, EvalOptions,
    PatientPrediction, ReferenceRow, ReferenceTable,
};
use lymphstage::localization::{build_involvement, localize_lesions, InvolvementProfile};
use lymphstage::normalization::{compute_liver_stats_with, normalize_with, NormalizationMode};
use lymphstage::phantom::{generate, parse_spec, scenario_spec, Scenario};
use lymphstage::pipeline::{load_landmarks, load_rules, run_pipeline, PipelineConfig, Step};
use lymphstage::region::RegionSet;
use lymphstage::segmentation::{suv_threshold_segment, threshold_segment, Combine, SegmentationMode};
use lymphstage::staging::stage;
use lymphstage::volume::{nifti, Connectivity, Interpolation, LabelVolume, Resample, ScalarKind};

#[derive(Parser)]
#[command(name = "lymphstage", version, about = "Lymphoma lesion localization and Lugano staging from PET/CT volumes")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Threshold-segment lesions from PET with a liver reference.
    Segment(SegmentArgs),
    /// Build the 21-region atlas from a landmark label map.
    Atlas(AtlasArgs),
    /// Split a lesion mask into lesions and assign regions and organs.
    Localize(LocalizeArgs),
    /// Stage an involvement profile given as JSON.
    Stage(StageArgs),
    /// Run the whole pipeline for one or more patients.
    Pipeline(PipelineArgs),
    /// Compare pipeline reports with a reference table.
    Evaluate(EvaluateArgs),
    /// Generate a synthetic phantom with known truth.
    Phantom(PhantomArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Zscore,
    Ratio,
}

#[derive(Clone, Copy, ValueEnum)]
enum CombineArg {
    And,
    Or,
}

#[derive(Clone, Copy, ValueEnum)]
enum SegModeArg {
    Threshold,
    External,
}

#[derive(Clone, Copy, ValueEnum)]
enum CiArg {
    ClopperPearson,
    Wald,
}

#[derive(Clone, Copy, ValueEnum)]
enum ScenarioArg {
    None,
    StageI,
    StageII,
    StageIII,
    StageIV,
    ExtranodalOnly,
}

/// Settings shared by the config file and the command line; a flag given
/// here overrides the config value.
#[derive(Args, Clone, Default)]
struct Settings {
    /// Skip liver normalization (no liver needed; SUV threshold only).
    #[arg(long)]
    no_normalization: bool,
    #[arg(long)]
    normalization_mode: Option<ModeArg>,
    #[arg(long)]
    liver_label: Option<String>,
    #[arg(long)]
    min_liver_voxels: Option<usize>,
    #[arg(long)]
    segmentation_mode: Option<SegModeArg>,
    #[arg(long)]
    suv_threshold: Option<f64>,
    #[arg(long)]
    znorm_threshold: Option<f64>,
    #[arg(long)]
    combine: Option<CombineArg>,
    #[arg(long)]
    min_lesion_voxels: Option<usize>,
    /// 6, 18 or 26.
    #[arg(long)]
    connectivity: Option<u8>,
    #[arg(long)]
    extranodal_min_voxels: Option<usize>,
    #[arg(long)]
    extranodal_min_fraction: Option<f64>,
    #[arg(long)]
    ci_method: Option<CiArg>,
    #[arg(long)]
    ci_level: Option<f64>,
}

impl Settings {
    fn apply(&self, cfg: &mut PipelineConfig) -> Result<(), Error> {
        if self.no_normalization {
            cfg.normalization.enabled = false;
        }
        if let Some(m) = self.normalization_mode {
            cfg.normalization.mode = match m {
                ModeArg::Zscore => NormalizationMode::Zscore,
                ModeArg::Ratio => NormalizationMode::Ratio,
            };
        }
        if let Some(l) = &self.liver_label {
            cfg.normalization.liver_label = l.clone();
        }
        if let Some(v) = self.min_liver_voxels {
            cfg.normalization.min_liver_voxels = v;
        }
        if let Some(m) = self.segmentation_mode {
            cfg.segmentation.mode = match m {
                SegModeArg::Threshold => SegmentationMode::Threshold,
                SegModeArg::External => SegmentationMode::External,
            };
        }
        if let Some(v) = self.suv_threshold {
            cfg.segmentation.suv_threshold = v;
        }
        if let Some(v) = self.znorm_threshold {
            cfg.segmentation.znorm_threshold = v;
        }
        if let Some(c) = self.combine {
            cfg.segmentation.combine = match c {
                CombineArg::And => Combine::And,
                CombineArg::Or => Combine::Or,
            };
        }
        if let Some(v) = self.min_lesion_voxels {
            cfg.segmentation.min_lesion_voxels = v;
        }
        if let Some(c) = self.connectivity {
            let c = Connectivity::try_from(c).map_err(Error::Config)?;
            cfg.segmentation.connectivity = c;
            cfg.localization.connectivity = c;
        }
        if let Some(v) = self.extranodal_min_voxels {
            cfg.localization.extranodal.min_voxels = v;
        }
        if let Some(v) = self.extranodal_min_fraction {
            cfg.localization.extranodal.min_fraction = v;
        }
        if let Some(m) = self.ci_method {
            cfg.evaluation.ci_method = match m {
                CiArg::ClopperPearson => CiMethod::ClopperPearson,
                CiArg::Wald => CiMethod::Wald,
            };
        }
        if let Some(v) = self.ci_level {
            cfg.evaluation.ci_level = v;
        }
        Ok(())
    }
}

#[derive(Args)]
struct SegmentArgs {
    #[arg(long)]
    pet: PathBuf,
    /// Landmark map holding the liver label (resampled onto the PET grid).
    #[arg(long)]
    landmarks: Option<PathBuf>,
    #[arg(long)]
    landmark_labels: Option<PathBuf>,
    /// Output lesion mask (NIfTI).
    #[arg(long, short)]
    out: PathBuf,
    #[command(flatten)]
    settings: Settings,
}

#[derive(Args)]
struct AtlasArgs {
    #[arg(long)]
    landmarks: PathBuf,
    #[arg(long)]
    landmark_labels: Option<PathBuf>,
    /// Rule file; the built-in rules when absent.
    #[arg(long)]
    rules: Option<PathBuf>,
    /// Volume whose grid the atlas is built on; the landmark grid by default.
    #[arg(long)]
    reference_grid: Option<PathBuf>,
    /// Output multi-label atlas (NIfTI); a JSON manifest is written beside it.
    #[arg(long, short)]
    out: PathBuf,
}

#[derive(Args)]
struct LocalizeArgs {
    #[arg(long)]
    lesion_mask: PathBuf,
    /// Atlas written by `atlas`.
    #[arg(long)]
    atlas: PathBuf,
    /// Landmark map used for extranodal organ overlap.
    #[arg(long)]
    landmarks: PathBuf,
    #[arg(long)]
    landmark_labels: Option<PathBuf>,
    /// Output JSON with lesions and the involvement profile; stdout if absent.
    #[arg(long, short)]
    out: Option<PathBuf>,
    #[command(flatten)]
    settings: Settings,
}

#[derive(Args)]
struct StageArgs {
    /// JSON file (`-` for stdin): a list of region names, an involvement
    /// profile, or a patient report.
    input: PathBuf,
}

#[derive(Args)]
struct PipelineArgs {
    /// TOML config; repeat for a batch run in parallel.
    #[arg(long, short)]
    config: Vec<PathBuf>,
    #[arg(long)]
    patient_id: Option<String>,
    #[arg(long)]
    pet: Option<PathBuf>,
    #[arg(long)]
    ct: Option<PathBuf>,
    #[arg(long)]
    landmarks: Option<PathBuf>,
    #[arg(long)]
    landmark_labels: Option<PathBuf>,
    #[arg(long)]
    lesion_mask: Option<PathBuf>,
    #[arg(long)]
    rules: Option<PathBuf>,
    #[arg(long)]
    output_dir: Option<PathBuf>,
    /// Print the effective config as TOML and exit.
    #[arg(long)]
    print_config: bool,
    #[command(flatten)]
    settings: Settings,
}

#[derive(Args)]
struct EvaluateArgs {
    /// Directory of patient report JSON files.
    #[arg(long)]
    predictions: PathBuf,
    /// Reference CSV: patient_id, region_1..region_21, extranodal, stage.
    #[arg(long)]
    reference: PathBuf,
    /// Output directory for the report, Table-3 CSV and confusion plots.
    #[arg(long, short)]
    out: PathBuf,
    #[arg(long)]
    ci_method: Option<CiArg>,
    #[arg(long)]
    ci_level: Option<f64>,
}

#[derive(Args)]
struct PhantomArgs {
    /// Spec file in the phantom text format.
    #[arg(long, conflicts_with = "scenario")]
    spec: Option<PathBuf>,
    /// Random standard-anatomy phantom of this kind.
    #[arg(long)]
    scenario: Option<ScenarioArg>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value = "phantom")]
    patient_id: String,
    #[arg(long, short)]
    out: PathBuf,
}

/// A failure reported as `{error_class, stage, message}`.
struct Failure {
    class: String,
    stage: String,
    message: String,
}

impl Failure {
    fn new(step: &str, e: Error) -> Self {
        Failure {
            class: e.class().to_string(),
            stage: step.to_string(),
            message: e.to_string(),
        }
    }

    fn json(&self) -> Value {
        json!({"error_class": self.class, "stage": self.stage, "message": self.message})
    }
}

type CmdResult = Result<(), Failure>;

trait Tag<T> {
    fn tag(self, step: &str) -> Result<T, Failure>;
}

impl<T> Tag<T> for Result<T, Error> {
    fn tag(self, step: &str) -> Result<T, Failure> {
        self.map_err(|e| Failure::new(step, e))
    }
}

fn write_text(path: &Path, text: &str) -> Result<(), Error> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn pretty(v: &impl serde::Serialize) -> Result<String, Error> {
    let mut s = serde_json::to_string_pretty(v)?;
    s.push('\n');
    Ok(s)
}

fn sibling_with_ext(path: &Path, ext: &str) -> PathBuf {
    let name = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    let stem = name
        .strip_suffix(".nii.gz")
        .or_else(|| name.strip_suffix(".nii"))
        .unwrap_or(&name);
    path.with_file_name(format!("{stem}.{ext}"))
}

fn segment(a: SegmentArgs) -> CmdResult {
    let mut cfg = PipelineConfig::default();
    a.settings.apply(&mut cfg).tag("config")?;
    cfg.segmentation.validate().tag("config")?;
    let pet = nifti::read_scalar(&a.pet, ScalarKind::Suv).tag("load")?;
    let n = &cfg.normalization;
    let (mask, liver) = if n.enabled {
        let Some(lm) = &a.landmarks else {
            return Err(Failure::new(
                "normalize",
                Error::LiverStatsUnavailable("no landmark map given (use --landmarks or --no-normalization)".into()),
            ));
        };
        let lm = load_landmarks(lm, a.landmark_labels.as_deref()).tag("load")?;
        let lm = if lm.grid().matches(pet.grid()) {
            lm
        } else {
            lm.resample(pet.grid(), Interpolation::Nearest).tag("load")?
        };
        let id = lm.label_id(&n.liver_label).ok_or_else(|| {
            Failure::new(
                "normalize",
                Error::LiverStatsUnavailable(format!("landmark map has no `{}` label", n.liver_label)),
            )
        })?;
        let liver_mask: Vec<bool> = lm.labels().iter().map(|&l| l == id).collect();
        let liver_mask = LabelVolume::binary(*pet.grid(), &liver_mask, "liver").tag("normalize")?;
        let stats = compute_liver_stats_with(&pet, &liver_mask, n.min_liver_voxels).tag("normalize")?;
        let norm = normalize_with(&pet, &stats, n.mode, n.epsilon).tag("normalize")?;
        (threshold_segment(&pet, &norm, &cfg.segmentation).tag("segment")?, Some(stats))
    } else {
        (suv_threshold_segment(&pet, &cfg.segmentation).tag("segment")?, None)
    };
    nifti::write_labels(&a.out, &mask).tag("segment")?;
    let summary = json!({
        "mask": a.out,
        "foreground_voxels": mask.foreground_count(),
        "liver": liver,
        "normalization_mode": if n.enabled { json!(n.mode) } else { Value::Null },
        "segmentation": cfg.segmentation,
    });
    print!("{}", pretty(&summary).tag("segment")?);
    Ok(())
}

fn atlas(a: AtlasArgs) -> CmdResult {
    let lm = load_landmarks(&a.landmarks, a.landmark_labels.as_deref()).tag("load")?;
    let grid = match &a.reference_grid {
        Some(p) => nifti::read_image(p).tag("load")?.grid,
        None => *lm.grid(),
    };
    let lm = if lm.grid().matches(&grid) {
        lm
    } else {
        lm.resample(&grid, Interpolation::Nearest).tag("load")?
    };
    let rules = load_rules(a.rules.as_deref()).tag("atlas")?;
    let atlas = build_atlas(&rules, &lm, &grid).tag("atlas")?;
    nifti::write_labels(&a.out, &atlas.label_volume()).tag("atlas")?;
    let manifest = sibling_with_ext(&a.out, "json");
    write_text(&manifest, &pretty(atlas.report()).tag("atlas")?).tag("atlas")?;
    info!("wrote {} and {}", a.out.display(), manifest.display());
    for w in &atlas.report().warnings {
        warn!("{w}");
    }
    Ok(())
}

fn localize(a: LocalizeArgs) -> CmdResult {
    let mut cfg = PipelineConfig::default();
    a.settings.apply(&mut cfg).tag("config")?;
    cfg.localization.extranodal.validate().tag("config")?;
    let atlas_map = nifti::read_labels(&a.atlas, BTreeMap::new()).tag("load")?;
    let atlas = RegionAtlas::from_label_volume(&atlas_map).tag("load")?;
    let grid = *atlas.grid();
    let mask = nifti::read_labels(&a.lesion_mask, BTreeMap::new()).tag("load")?.binarized("lesion");
    let mask = if mask.grid().matches(&grid) {
        mask
    } else {
        mask.resample(&grid, Interpolation::Nearest).tag("load")?
    };
    let lm = load_landmarks(&a.landmarks, a.landmark_labels.as_deref()).tag("load")?;
    let lm = if lm.grid().matches(&grid) {
        lm
    } else {
        lm.resample(&grid, Interpolation::Nearest).tag("load")?
    };
    let lesions = localize_lesions(&mask, &atlas, &lm, &cfg.localization).tag("localize")?;
    let profile = build_involvement(&lesions);
    let text = pretty(&json!({"lesions": lesions, "profile": profile})).tag("localize")?;
    match &a.out {
        Some(p) => write_text(p, &text).tag("localize")?,
        None => print!("{text}"),
    }
    Ok(())
}

fn profile_from_json(v: Value) -> Result<InvolvementProfile, Error> {
    match v {
        Value::Array(_) => Ok(InvolvementProfile::new(serde_json::from_value::<RegionSet>(v)?, false)),
        Value::Object(ref m) if m.contains_key("profile") => Ok(serde_json::from_value(m["profile"].clone())?),
        Value::Object(_) => Ok(serde_json::from_value(v)?),
        _ => Err(Error::Config("expected a JSON list of regions or an involvement object".into())),
    }
}

fn stage_cmd(a: StageArgs) -> CmdResult {
    let text = if a.input.as_os_str() == "-" {
        let mut s = String::new();
        std::io::stdin()
            .read_to_string(&mut s)
            .map_err(|e| Error::io("<stdin>", e))
            .tag("load")?;
        s
    } else {
        fs::read_to_string(&a.input).map_err(|e| Error::io(&a.input, e)).tag("load")?
    };
    let v: Value = serde_json::from_str(&text).map_err(Error::from).tag("load")?;
    let profile = profile_from_json(v).tag("stage")?;
    print!("{}", pretty(&stage(&profile)).tag("stage")?);
    Ok(())
}

fn pipeline(a: PipelineArgs) -> CmdResult {
    let mut configs = Vec::new();
    if a.config.is_empty() {
        configs.push(PipelineConfig::default());
    }
    for p in &a.config {
        configs.push(PipelineConfig::read(p).tag("config")?);
    }
    if configs.len() > 1 && (a.patient_id.is_some() || a.output_dir.is_some() || a.pet.is_some()) {
        return Err(Failure::new(
            "config",
            Error::Config("--patient-id, --output-dir and --pet apply to a single patient".into()),
        ));
    }
    for cfg in &mut configs {
        let p = &mut cfg.paths;
        let set = |slot: &mut PathBuf, v: &Option<PathBuf>| {
            if let Some(v) = v {
                *slot = v.clone();
            }
        };
        set(&mut p.pet, &a.pet);
        set(&mut p.landmarks, &a.landmarks);
        for (slot, v) in [
            (&mut p.ct, &a.ct),
            (&mut p.landmark_labels, &a.landmark_labels),
            (&mut p.lesion_mask, &a.lesion_mask),
            (&mut p.rules, &a.rules),
        ] {
            if v.is_some() {
                *slot = v.clone();
            }
        }
        if let Some(id) = &a.patient_id {
            cfg.patient_id = id.clone();
        }
        if a.output_dir.is_some() {
            cfg.output_dir = a.output_dir.clone();
        }
        a.settings.apply(cfg).tag("config")?;
    }
    if a.print_config {
        for cfg in &configs {
            print!("{}", cfg.to_toml().tag("config")?);
        }
        return Ok(());
    }
    let results: Vec<_> = configs.par_iter().map(|cfg| (cfg.patient_id.clone(), run_pipeline(cfg))).collect();
    let mut first_failure = None;
    for (id, r) in results {
        match r {
            Ok(out) => {
                let s = &out.report.staging;
                println!(
                    "{}",
                    json!({"patient_id": id, "stage": s.stage, "group": s.group, "lesions": out.report.lesions.len()})
                );
            }
            Err(e) => {
                let f = Failure::new(e.step.name(), e.error);
                if configs.len() > 1 {
                    let mut v = f.json();
                    v["patient_id"] = json!(id);
                    eprintln!("{v}");
                }
                first_failure.get_or_insert(f);
            }
        }
    }
    match first_failure {
        Some(f) if configs.len() == 1 => Err(f),
        Some(_) => Err(Failure {
            class: "batch".into(),
            stage: Step::Report.name().into(),
            message: "one or more patients failed".into(),
        }),
        None => Ok(()),
    }
}

fn read_predictions(dir: &Path) -> Result<Vec<PatientPrediction>, Error> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "json"))
        .collect();
    files.sort();
    files
        .iter()
        .map(|p| {
            let text = fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
            serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", p.display())))
        })
        .collect()
}

fn evaluate(a: EvaluateArgs) -> CmdResult {
    let mut opts = EvalOptions::default();
    if let Some(m) = a.ci_method {
        opts.ci_method = match m {
            CiArg::ClopperPearson => CiMethod::ClopperPearson,
            CiArg::Wald => CiMethod::Wald,
        };
    }
    if let Some(l) = a.ci_level {
        opts.ci_level = l;
    }
    let preds = read_predictions(&a.predictions).tag("load")?;
    let reference = ReferenceTable::read(&a.reference).tag("load")?;
    let report = evaluate_cohort(&preds, &reference, &opts).tag("evaluate")?;
    let out = &a.out;
    write_text(&out.join("eval_report.json"), &pretty(&report).tag("evaluate")?).tag("evaluate")?;
    write_text(&out.join("region_table.csv"), &region_table_csv(&report).tag("evaluate")?).tag("evaluate")?;
    write_text(&out.join("confusion.txt"), &confusion_text(&report.staging.confusion)).tag("evaluate")?;
    write_text(&out.join("confusion.svg"), &confusion_svg(&report.staging.confusion)).tag("evaluate")?;
    print!("{}", summary_text(&report));
    Ok(())
}

fn phantom(a: PhantomArgs) -> CmdResult {
    let spec = match (&a.spec, a.scenario) {
        (Some(p), _) => {
            let text = fs::read_to_string(p).map_err(|e| Error::io(p, e)).tag("load")?;
            parse_spec(&text).tag("phantom")?
        }
        (None, s) => {
            let sc = match s.unwrap_or(ScenarioArg::None) {
                ScenarioArg::None => Scenario::NoInvolvement,
                ScenarioArg::StageI => Scenario::StageI,
                ScenarioArg::StageII => Scenario::StageII,
                ScenarioArg::StageIII => Scenario::StageIII,
                ScenarioArg::StageIV => Scenario::StageIV,
                ScenarioArg::ExtranodalOnly => Scenario::ExtranodalOnly,
            };
            scenario_spec(sc, a.seed)
        }
    };
    let ph = generate(&spec).tag("phantom")?;
    let out = &a.out;
    fs::create_dir_all(out).map_err(|e| Error::io(out, e)).tag("phantom")?;
    let step = "phantom";
    nifti::write_scalar(out.join("pet.nii.gz"), &ph.pet).tag(step)?;
    nifti::write_scalar(out.join("ct.nii.gz"), &ph.ct).tag(step)?;
    nifti::write_labels(out.join("landmarks.nii.gz"), &ph.landmarks).tag(step)?;
    nifti::write_label_dictionary(out.join("landmarks.labels.json"), ph.landmarks.dictionary()).tag(step)?;
    write_text(&out.join("truth.json"), &pretty(&ph.truth).tag(step)?).tag(step)?;
    write_text(&out.join("spec.txt"), &spec.to_text()).tag(step)?;
    let reference = ReferenceTable {
        rows: BTreeMap::from([(
            a.patient_id.clone(),
            ReferenceRow {
                patient_id: a.patient_id.clone(),
                involved: ph.truth.profile.involved,
                extranodal: ph.truth.profile.extranodal,
                stage: ph.truth.stage,
            },
        )]),
    };
    write_text(&out.join("reference.csv"), &reference.to_csv().tag(step)?).tag(step)?;
    let mut cfg = PipelineConfig {
        patient_id: a.patient_id.clone(),
        output_dir: Some("out".into()),
        ..Default::default()
    };
    cfg.paths.pet = "pet.nii.gz".into();
    cfg.paths.ct = Some("ct.nii.gz".into());
    cfg.paths.landmarks = "landmarks.nii.gz".into();
    write_text(&out.join("pipeline.toml"), &cfg.to_toml().tag(step)?).tag(step)?;
    println!(
        "{}",
        json!({"out": out, "stage": ph.truth.stage, "group": ph.truth.group, "lesions": spec.lesions.len()})
    );
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("LYMPHSTAGE_LOG", "warn")).init();
    let cli = Cli::parse();
    let (name, result) = match cli.command {
        Command::Segment(a) => ("segment", segment(a)),
        Command::Atlas(a) => ("atlas", atlas(a)),
        Command::Localize(a) => ("localize", localize(a)),
        Command::Stage(a) => ("stage", stage_cmd(a)),
        Command::Pipeline(a) => ("pipeline", pipeline(a)),
        Command::Evaluate(a) => ("evaluate", evaluate(a)),
        Command::Phantom(a) => ("phantom", phantom(a)),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            log::debug!("{name} failed");
            eprintln!("{}", f.json());
            ExitCode::FAILURE
        }
    }
}
