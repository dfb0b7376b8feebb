mod common;

use stkit::graft::graft;
use stkit::pipeline::synth::{donor_weights, generate, toy_destination, SynthConfig};
use stkit::pipeline::{run_pipeline, PipelineConfig};

#[test]
fn demo_scene_recovers_planted_sites() {
    let dir = tempfile::tempdir().unwrap();
    let scene = generate(&SynthConfig::demo(7), dir.path().join("scene"), "demo.kwcoco.json").unwrap();
    let (weights, _) = graft(&donor_weights(), &toy_destination(), "2024-01-01T00:00:00Z").unwrap();
    let t = std::time::Instant::now();
    let run = run_pipeline(&scene.manifest, &weights, &PipelineConfig::default(), dir.path().join("out")).unwrap();
    eprintln!("pipeline took {:?}", t.elapsed());
    for s in &run.bas_sites {
        eprintln!("BAS {} {:?} {:?}..{:?} area {}", s.site_id, s.status, s.start_date, s.end_date, s.polygon.area());
    }
    for s in &run.ac_sites {
        eprintln!("AC {} {:?} {:?}..{:?} area {}", s.site_id, s.status, s.start_date, s.end_date, s.polygon.area());
    }
    let dims = |id: i64| {
        let v = scene.manifest.video(id).unwrap();
        (v.width, v.height)
    };
    let score = common::e2e::score(&scene.truth, &run.ac_sites, dims);
    eprintln!("{score:?}");
    assert!(score.passed(), "{score:?}");
}
