use a2bis::eval::evaluate_scenes;
use a2bis::proposal::{propose, ProposalConfig};
use a2bis::skeleton::build_targets;
use a2bis::train::{gen_dataset, SynthConfig};

#[test]
fn gt_maps_reconstruct_scenes() {
    let cfg = SynthConfig::default();
    let data = gen_dataset(&cfg, 20, 11).unwrap();
    let mut dets = Vec::new();
    for (_, scene) in &data {
        let t = build_targets(scene, cfg.n_classes).unwrap();
        dets.push(propose(&t.skl, &t.seg, &t.boxes, &ProposalConfig::default()).unwrap());
    }
    let report = evaluate_scenes(data.iter().map(|(_, s)| s).zip(dets.iter().map(|d| d.as_slice()))).unwrap();
    println!("{}", report.to_json().unwrap());
    assert_eq!(report.map50, 1.0);
    assert!(report.bpq >= 0.95);
}
