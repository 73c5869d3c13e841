use dstg::grounding::{random_anchor, read_predictions, write_predictions};
use dstg::metrics::{match_and_score, Split};
use dstg::synthdata::{generate_dataset, read_dataset, write_dataset, GeneratorConfig};
use dstg::trainer::{train, TrainConfig};

#[test]
fn dataset_and_predictions_roundtrip_through_files() {
    let data = generate_dataset(&GeneratorConfig::default(), 6, 21).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let dpath = dir.path().join("d.jsonl");
    write_dataset(&dpath, Some(&serde_json::json!({ "seed": 21 })), &data).unwrap();
    assert_eq!(read_dataset(&dpath).unwrap(), data);

    let ck = train(&data, &TrainConfig { steps: 20, ..Default::default() }, |_| {}).unwrap();
    let preds = ck.ground_all(&data).unwrap();
    let ppath = dir.path().join("p.jsonl");
    write_predictions(&ppath, None, &preds).unwrap();
    let back = read_predictions(&ppath).unwrap();
    assert_eq!(back, preds);

    let report = match_and_score(&back, &data, Split::All);
    assert_eq!(report.num_cases, data.iter().map(|s| s.expressions.len()).sum::<usize>());
    assert!(report.missing.is_empty());
    assert!((0.0..=1.0).contains(&report.m_viou));
}

#[test]
fn split_case_counts_add_up() {
    let data = generate_dataset(&GeneratorConfig::default(), 30, 2).unwrap();
    let preds: Vec<_> =
        data.iter().flat_map(|s| (0..s.expressions.len()).map(move |e| random_anchor(s, e, 1))).collect();
    let n = |sp| match_and_score(&preds, &data, sp).num_cases;
    assert_eq!(n(Split::All), n(Split::VgEasy) + n(Split::SgHard) + n(Split::TgHard));
}

#[test]
fn missing_predictions_score_zero() {
    let data = generate_dataset(&GeneratorConfig::default(), 3, 8).unwrap();
    let report = match_and_score(&[], &data, Split::All);
    assert_eq!(report.m_viou, 0.0);
    assert_eq!(report.missing.len(), report.num_cases);
}
