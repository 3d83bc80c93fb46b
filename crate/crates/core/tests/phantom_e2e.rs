use std::collections::BTreeMap;

use lymphstage::atlas::default_rules;
use lymphstage::localization::LesionStatus;
use lymphstage::phantom::{generate, LesionTarget, PhantomSpec, PlantedLesion, ORGAN_ANCHORS};
use lymphstage::pipeline::{run_on_volumes, PipelineConfig};
use lymphstage::region::RegionId;
use lymphstage::staging::Stage;

fn nearest_lesion(report: &lymphstage::pipeline::PatientReport, c: [f64; 3]) -> &lymphstage::localization::Lesion {
    report
        .lesions
        .iter()
        .min_by(|a, b| {
            let d = |l: &lymphstage::localization::Lesion| (0..3).map(|k| (l.centroid_mm[k] - c[k]).powi(2)).sum::<f64>();
            d(a).total_cmp(&d(b))
        })
        .unwrap()
}

#[test]
fn every_anchor_is_localized_to_its_target() {
    let mut spec = PhantomSpec::standard(17);
    for r in RegionId::ALL {
        spec.lesions.push(PlantedLesion::at_anchor(LesionTarget::Region(r), 7.0).unwrap());
    }
    for o in ORGAN_ANCHORS {
        spec.lesions.push(PlantedLesion::at_anchor(LesionTarget::Organ(o.into()), 7.0).unwrap());
    }
    spec.lesions.push(PlantedLesion::at_anchor(LesionTarget::None, 7.0).unwrap());
    let ph = generate(&spec).unwrap();
    let out = run_on_volumes(&PipelineConfig::default(), &ph.pet, &ph.landmarks, &default_rules(), None, BTreeMap::new())
        .unwrap();
    let report = &out.report;
    assert_eq!(report.lesions.len(), spec.lesions.len(), "lesions merged or lost");
    for planted in &spec.lesions {
        let l = nearest_lesion(report, planted.center);
        match &planted.target {
            LesionTarget::Region(r) => {
                assert_eq!(l.primary_region, Some(*r), "{r:?}: {:?}", l.overlap_table);
                assert!(l.secondary_regions.is_empty(), "{r:?}: {:?}", l.overlap_table);
                assert_eq!(l.status, LesionStatus::Nodal, "{r:?}: {:?}", l.overlap_table);
                // the whole lesion sits in the region
                assert_eq!(l.overlap_table.regions[r], l.voxel_count, "{r:?}: {:?}", l.overlap_table);
            }
            LesionTarget::Organ(o) => {
                assert_eq!(l.status, LesionStatus::Extranodal, "{o}: {:?}", l.overlap_table);
                assert_eq!(l.primary_region, None, "{o}");
            }
            LesionTarget::None => assert_eq!(l.status, LesionStatus::Unlocalized),
        }
    }
    assert_eq!(report.staging.stage, Stage::IV);
    assert_eq!(report.profile.involved.len(), 21);
    assert_eq!(out.atlas.overlapping_voxels(), 0);
}
