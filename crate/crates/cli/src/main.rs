//! `dstg` — generate data, train, ground, evaluate, ablate and report.
//!
//! Exit codes: 0 ok, 1 validation/runtime failure, 2 usage error.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use dstg::featurize::featurize_sample;
use dstg::grounding::{read_predictions, write_predictions};
use dstg::manifest::{file_sha256, json_sha256, now_unix_ms, write_sidecar, RunManifest};
use dstg::metrics::{match_and_score, Split};
use dstg::report::{emit_report, ReportConfig};
use dstg::stgraph::build_dual_graph;
use dstg::synthdata::{generate_dataset, read_dataset, write_dataset, GeneratorConfig};
use dstg::trainer::{ablation_markdown, run_ablation, train, write_log, Checkpoint, TrainConfig};
use dstg::DstgError;

#[derive(Debug, Parser)]
#[command(name = "dstg", version, about = "Dual spatio-temporal graph grounding on synthetic videos")]
struct Cli {
    /// Print errors as a single JSON object on stderr.
    #[arg(long, global = true)]
    json_errors: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic dataset (JSON lines).
    Gen {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        num_videos: usize,
        /// Drawn at random (and recorded) when omitted.
        #[arg(long)]
        seed: Option<u64>,
        /// Generator config (JSON); defaults when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Train a model and write a checkpoint plus a JSONL loss log.
    Train {
        #[arg(long)]
        data: PathBuf,
        /// Training config (JSON); defaults when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        log: PathBuf,
        /// Overrides the config seed; drawn at random when neither is given.
        #[arg(long)]
        seed: Option<u64>,
        /// Overrides the config step count.
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Ground every expression of a dataset with a checkpoint.
    Ground {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Also write each video's graph adjacency (one JSON object per line).
        #[arg(long)]
        dump_graph: Option<PathBuf>,
    },
    /// Score predictions against ground truth.
    Eval {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        #[arg(long, default_value = "all", value_parser = parse_split)]
        split: Split,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train and score every ablation row; the last videos are held out.
    Ablate {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, value_delimiter = ',', default_value = "0,1,2")]
        seeds: Vec<u64>,
        /// Number of held-out videos (default: a fifth of the data).
        #[arg(long)]
        held_out: Option<usize>,
    },
    /// Render an HTML report with per-case images.
    Report {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn parse_split(s: &str) -> Result<Split, String> {
    Split::parse(s).ok_or_else(|| format!("unknown split '{s}' (expected all, vg_easy, sg_hard or tg_hard)"))
}

fn read_json_config<T: serde::de::DeserializeOwned + Default>(
    path: Option<&Path>,
) -> Result<(T, serde_json::Value), DstgError> {
    match path {
        None => Ok((T::default(), serde_json::json!({}))),
        Some(p) => {
            require_file(p)?;
            let raw: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(p)?)
                .map_err(|e| DstgError::Config(format!("{}: {e}", p.display())))?;
            let cfg =
                serde_json::from_value(raw.clone()).map_err(|e| DstgError::Config(format!("{}: {e}", p.display())))?;
            Ok((cfg, raw))
        }
    }
}

/// Fail early, naming the path, when an input file is missing.
fn require_file(path: &Path) -> Result<(), DstgError> {
    if path.is_file() {
        Ok(())
    } else {
        Err(DstgError::Input(format!("{}: no such file", path.display())))
    }
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<(), DstgError> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    std::fs::write(path, s)?;
    Ok(())
}

fn run(cmd: Command) -> Result<(), DstgError> {
    let started = now_unix_ms();
    match cmd {
        Command::Gen { out, num_videos, seed, config } => {
            let (cfg, _) = read_json_config::<GeneratorConfig>(config.as_deref())?;
            cfg.validate()?;
            let seed = seed.unwrap_or_else(rand::random);
            let samples = generate_dataset(&cfg, num_videos, seed)?;
            let mut m = RunManifest::new("gen");
            m.seed = Some(seed);
            m.config_hash = Some(json_sha256(&cfg)?);
            write_dataset(&out, Some(&m.to_value()), &samples)?;
            write_sidecar(&out, &m, started)?;
            eprintln!("wrote {} videos to {} (seed {seed})", samples.len(), out.display());
        }
        Command::Train { data, config, out, log, seed, steps } => {
            let (mut cfg, raw) = read_json_config::<TrainConfig>(config.as_deref())?;
            cfg.seed = match (seed, raw.get("seed")) {
                (Some(s), _) => s,
                (None, Some(_)) => cfg.seed,
                (None, None) => rand::random(),
            };
            if let Some(n) = steps {
                cfg.steps = n;
            }
            cfg.validate()?;
            require_file(&data)?;
            let samples = read_dataset(&data)?;
            let mut records = Vec::new();
            let ck = train(&samples, &cfg, |r| records.push(r.clone()))?;
            let mut m = RunManifest::new("train");
            m.seed = Some(cfg.seed);
            m.config_hash = Some(json_sha256(&cfg)?);
            m.dataset_hash = Some(file_sha256(&data)?);
            ck.save(&out, &m.to_value())?;
            write_log(&log, Some(&m.to_value()), &records)?;
            write_sidecar(&out, &m, started)?;
            write_sidecar(&log, &m, started)?;
            if let Some(last) = records.last() {
                eprintln!("trained {} steps (seed {}); last L_total {:.4}", cfg.steps, cfg.seed, last.l_total);
            }
        }
        Command::Ground { ckpt, data, out, dump_graph } => {
            require_file(&ckpt)?;
            require_file(&data)?;
            let (ck, _) = Checkpoint::load(&ckpt)?;
            let samples = read_dataset(&data)?;
            let preds = ck.ground_all(&samples)?;
            let mut m = RunManifest::new("ground");
            m.seed = Some(ck.config.seed);
            m.config_hash = Some(json_sha256(&ck.config)?);
            m.dataset_hash = Some(file_sha256(&data)?);
            m.checkpoint_hash = Some(file_sha256(&ckpt)?);
            write_predictions(&out, Some(&m.to_value()), &preds)?;
            write_sidecar(&out, &m, started)?;
            if let Some(path) = dump_graph {
                let mut f = std::io::BufWriter::new(std::fs::File::create(&path)?);
                writeln!(f, "{}", serde_json::json!({ "manifest": m.to_value() }))?;
                for s in &samples {
                    let feats = featurize_sample(s, &ck.config.model.features)?;
                    let g = build_dual_graph(s, &feats, &ck.config.graph)?;
                    let line = serde_json::json!({ "video_id": s.video_id, "graph": g.to_json() });
                    writeln!(f, "{}", serde_json::to_string(&line)?)?;
                }
                f.flush()?;
                drop(f);
                write_sidecar(&path, &m, started)?;
            }
            eprintln!("wrote {} predictions to {}", preds.len(), out.display());
        }
        Command::Eval { pred, gt, split, out } => {
            require_file(&pred)?;
            require_file(&gt)?;
            let preds = read_predictions(&pred)?;
            let samples = read_dataset(&gt)?;
            let mut m = RunManifest::new("eval");
            m.dataset_hash = Some(file_sha256(&gt)?);
            m.predictions_hash = Some(file_sha256(&pred)?);
            let mut report = match_and_score(&preds, &samples, split);
            report.manifest = Some(m.to_value());
            write_json(&out, &report)?;
            write_sidecar(&out, &m, started)?;
            println!("m_vIoU {:.4}  m_tIoU {:.4}  cases {}", report.m_viou, report.m_tiou, report.num_cases);
        }
        Command::Ablate { data, out, config, seeds, held_out } => {
            let (cfg, _) = read_json_config::<TrainConfig>(config.as_deref())?;
            cfg.validate()?;
            if seeds.is_empty() {
                return Err(DstgError::Config("at least one seed is required".into()));
            }
            require_file(&data)?;
            let samples = read_dataset(&data)?;
            let k = held_out.unwrap_or(samples.len() / 5);
            if k == 0 || k >= samples.len() {
                return Err(DstgError::Config(format!("held-out count {k} must be in 1..{}", samples.len())));
            }
            let (train_set, held) = samples.split_at(samples.len() - k);
            let rows = run_ablation(train_set, held, &cfg, &seeds)?;
            let mut m = RunManifest::new("ablate");
            m.seed = seeds.first().copied();
            m.config_hash = Some(json_sha256(&cfg)?);
            m.dataset_hash = Some(file_sha256(&data)?);
            let table = serde_json::json!({
                "schema": "ablate/1",
                "manifest": m.to_value(),
                "seeds": seeds,
                "held_out": k,
                "rows": rows,
            });
            write_json(&out, &table)?;
            write_sidecar(&out, &m, started)?;
            print!("{}", ablation_markdown(&rows));
        }
        Command::Report { pred, data, out } => {
            require_file(&pred)?;
            require_file(&data)?;
            let preds = read_predictions(&pred)?;
            let samples = read_dataset(&data)?;
            let mut m = RunManifest::new("report");
            m.dataset_hash = Some(file_sha256(&data)?);
            m.predictions_hash = Some(file_sha256(&pred)?);
            let (index, cases) = emit_report(&preds, &samples, &out, Some(&m.to_value()), &ReportConfig::default())?;
            write_sidecar(&index, &m, started)?;
            eprintln!("wrote {} ({} cases)", index.display(), cases.len());
        }
    }
    Ok(())
}

fn report_error(json: bool, kind: &str, message: &str) {
    if json {
        let v = serde_json::json!({ "error": { "kind": kind, "message": message } });
        eprintln!("{v}");
    } else {
        eprintln!("error: {message}");
    }
}

fn main() -> ExitCode {
    // Parse by hand so usage errors respect --json-errors and always exit 2.
    let json_errors = std::env::args().any(|a| a == "--json-errors");
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                let _ = e.print();
                return ExitCode::SUCCESS;
            }
            if json_errors {
                report_error(true, "usage", e.render().to_string().trim());
            } else {
                let _ = e.print();
            }
            return ExitCode::from(2);
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            report_error(cli.json_errors, "failure", &e.to_string());
            ExitCode::from(1)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use clap::CommandFactory;

    #[test]
    fn cli_definition_is_consistent() {
        Cli::command().debug_assert();
    }

    #[test]
    fn splits_parse() {
        assert_eq!(parse_split("tg_hard"), Ok(Split::TgHard));
        assert!(parse_split("hard").is_err());
    }

    #[test]
    fn seeds_are_comma_separated() {
        let cli = Cli::try_parse_from(["dstg", "ablate", "--data", "d", "--out", "o", "--seeds", "4,5"]).unwrap();
        match cli.command {
            Command::Ablate { seeds, held_out, .. } => {
                assert_eq!(seeds, vec![4, 5]);
                assert_eq!(held_out, None);
            }
            other => panic!("parsed {other:?}"),
        }
    }
}
