use std::fs;

use nerfca::dataset::{render_optical_depth, vessel_union_mask, AngiogramDataset, DatasetConfig};
use nerfca::phantom::Phantom;
use nerfca::Error;

fn files_of(dir: &std::path::Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    for sub in ["", "frames", "maps"] {
        let mut entries: Vec<_> = fs::read_dir(dir.join(sub)).unwrap().map(|e| e.unwrap().path()).collect();
        entries.sort();
        for p in entries.into_iter().filter(|p| p.is_file()) {
            out.push((p.strip_prefix(dir).unwrap().display().to_string(), fs::read(&p).unwrap()));
        }
    }
    out
}

#[test]
fn save_load_save_is_byte_identical() {
    let ds = AngiogramDataset::generate(&DatasetConfig {
        samples_per_ray: 64,
        ..DatasetConfig::default()
    })
    .unwrap();
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    ds.save(a.path()).unwrap();
    let back = AngiogramDataset::load(a.path()).unwrap();
    assert_eq!(back, ds);
    back.save(b.path()).unwrap();
    assert_eq!(files_of(a.path()), files_of(b.path()));

    let four_views = back.training_view_ids().len() * back.phases();
    assert_eq!(four_views, 40);
    assert_eq!(back.frames.len(), 80);
}

#[test]
fn missing_frame_is_named() {
    let ds = AngiogramDataset::generate(&DatasetConfig {
        samples_per_ray: 16,
        include_validation: false,
        ..DatasetConfig::default()
    })
    .unwrap();
    let dir = tempfile::tempdir().unwrap();
    ds.save(dir.path()).unwrap();
    fs::remove_file(dir.path().join("frames/view02_phase07.npy")).unwrap();
    match AngiogramDataset::load(dir.path()) {
        Err(e @ Error::Format { .. }) => assert!(e.to_string().contains("view02_phase07.npy"), "{e}"),
        other => panic!("expected a format error, got {other:?}"),
    }
}

/// Ground-truth vessel pixels come from the vessel-only projection; the
/// variance mask should cover nearly all of them.
#[test]
fn variance_mask_covers_projected_vessels() {
    let cfg = DatasetConfig::default();
    let ds = AngiogramDataset::generate(&cfg).unwrap();
    let phantom = Phantom::new(&cfg.phantom).unwrap();
    let field = phantom.vessel_field();
    for view in ds.training_view_ids() {
        let pose = &ds.views[view].pose;
        let depths: Vec<_> = (1..=ds.phases())
            .map(|i| render_optical_depth(pose, &field, i, cfg.samples_per_ray).unwrap())
            .collect();
        let truth = vessel_union_mask(&depths, 1e-3);
        let mask = &ds.maps[view].high_variance_mask;
        let vessel = truth.iter().filter(|t| **t).count();
        let hit = truth.iter().zip(mask).filter(|(t, m)| **t && **m).count();
        let coverage = hit as f64 / vessel as f64;
        assert!(vessel > 50, "view {view}: only {vessel} vessel pixels");
        assert!(coverage >= 0.95, "view {view}: mask covers {coverage:.3} of vessel pixels");
    }
}
