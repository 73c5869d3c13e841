use dstg::synthdata::{generate_dataset, CaseKind, GeneratorConfig};
use dstg::trainer::{train, Checkpoint, TrainConfig};

fn easy_videos(n: usize, seed: u64) -> Vec<dstg::synthdata::VideoSample> {
    let gcfg = GeneratorConfig { case_kind: Some(CaseKind::SingleTargetSingleSegment), ..Default::default() };
    generate_dataset(&gcfg, n, seed).unwrap()
}

#[test]
fn consistency_loss_goes_down_on_easy_videos() {
    let data = easy_videos(20, 11);
    let cfg = TrainConfig { steps: 300, seed: 4, ..Default::default() };
    let mut l_c = Vec::new();
    train(&data, &cfg, |r| l_c.push(r.l_c)).unwrap();
    assert_eq!(l_c.len(), 300);
    let mean = |s: &[f64]| s.iter().sum::<f64>() / s.len() as f64;
    let (first, last) = (mean(&l_c[..40]), mean(&l_c[260..]));
    assert!(last < first, "L_c {first:.4} -> {last:.4}");
}

#[test]
fn checkpoint_file_reproduces_grounding() {
    let data = easy_videos(4, 3);
    let cfg = TrainConfig { steps: 30, seed: 9, ..Default::default() };
    let ck = train(&data, &cfg, |_| {}).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("c.bin");
    let manifest = serde_json::json!({ "command": "test" });
    ck.save(&path, &manifest).unwrap();
    let (back, m) = Checkpoint::load(&path).unwrap();
    assert_eq!(m, manifest);
    assert_eq!(ck.ground_all(&data).unwrap(), back.ground_all(&data).unwrap());
}

#[test]
fn same_seed_same_log() {
    let data = easy_videos(3, 5);
    let cfg = TrainConfig { steps: 20, seed: 1, ..Default::default() };
    let run = || {
        let mut log = Vec::new();
        train(&data, &cfg, |r| log.push(r.clone())).unwrap();
        log
    };
    assert_eq!(run(), run());
}
