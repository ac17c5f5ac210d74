//! Needle-in-a-haystack and ablation harness, and the command-line surface.

use std::process::Command;

use salova::harness::{ablation_table, niah_build, niah_eval, standard_variants, NiahSpec, Scorer, TOPK_SET};
use salova::model::Model;
use salova::numerics::parallel;
use salova::trainer::{save_checkpoint, CheckpointMeta, Dataset, TrainConfig};

fn small_spec() -> NiahSpec {
    NiahSpec {
        haystack_lengths: vec![8, 16],
        depth_fractions: vec![0.0, 0.5, 1.0],
        trials: 10,
        ..NiahSpec::default()
    }
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    dot / (a.iter().map(|x| x * x).sum::<f64>().sqrt() * b.iter().map(|x| x * x).sum::<f64>().sqrt())
}

#[test]
fn needle_is_the_closest_prototype() {
    let spec = NiahSpec::default();
    for (n, depth, seed) in [(8, 0.0, 1), (32, 0.5, 2), (64, 1.0, 3), (16, 0.75, 4)] {
        let inst = niah_build(&spec, n, depth, seed).unwrap();
        let q = inst.query.pooled();
        let p = &inst.video.prototypes;
        let needle = cosine(&q, p.row(inst.needle_index));
        for i in (0..n).filter(|&i| i != inst.needle_index) {
            assert!(needle > cosine(&q, p.row(i)));
        }
        assert_eq!(inst.segments.len(), n);
    }
    assert_eq!(niah_build(&spec, 10, 1.0, 0).unwrap().needle_index, 9);
    assert_eq!(niah_build(&spec, 10, 0.0, 0).unwrap().needle_index, 0);
}

#[test]
fn oracle_is_perfect_and_random_is_chance() {
    let oracle = niah_eval(&small_spec(), &Scorer::Oracle).unwrap();
    assert!(oracle.cells.iter().flatten().all(|&c| c == 1.0));

    let spec = NiahSpec {
        trials: 200,
        ..small_spec()
    };
    let random = niah_eval(&spec, &Scorer::Random).unwrap();
    for row in &random.cells {
        for (&n, &cell) in spec.haystack_lengths.iter().zip(row) {
            let p = 1.0 / n as f64;
            let sigma = (p * (1.0 - p) / spec.trials as f64).sqrt();
            assert!((cell - p).abs() <= 3.0 * sigma, "n={n}: {cell}");
        }
    }
}

#[test]
fn heatmaps_are_reproducible_across_modes() {
    let model = Model::new(TrainConfig::default().model, 3).unwrap();
    let scorer = Scorer::Router {
        model: &model,
        precision: salova::numerics::Precision::F64,
    };
    let a = niah_eval(&small_spec(), &scorer).unwrap();
    parallel::set_mode(parallel::Mode::Sequential);
    let b = niah_eval(&small_spec(), &scorer).unwrap();
    parallel::set_mode(parallel::Mode::Parallel);
    assert_eq!(a, b);
    assert_eq!(a.to_csv().lines().next().unwrap(), "depth\\frames,32,64");
}

#[test]
fn ablation_table_has_every_protocol_row() {
    let mut cfg = TrainConfig::default();
    cfg.task.train_videos = 1;
    cfg.task.heldout_videos = 2;
    let data = Dataset::generate(&cfg.task, 0).unwrap();
    let model = Model::new(cfg.model.clone(), 0).unwrap();
    let table = ablation_table(&standard_variants(), &model, &data.heldout, cfg.top_k).unwrap();
    let names: Vec<&str> = table.rows.iter().map(|r| r.variant.as_str()).collect();
    assert_eq!(
        names,
        [
            "frames_8",
            "frames_16",
            "fps_1",
            "full",
            "no_focusfast",
            "topk_1",
            "topk_5",
            "topk_9",
            "topk_13"
        ]
    );
    assert_eq!(TOPK_SET, [1, 5, 9, 13]);
    let csv = table.to_csv();
    assert_eq!(csv.lines().count(), 10);
    assert!(csv.starts_with("variant,group,recall_at_1,recall_at_k,readout_loss,readout_acc\n"));
    let full = table.get("full").unwrap();
    let topk_13 = table.get("topk_13").unwrap();
    assert_eq!(topk_13.recall_at_k, 1.0);
    assert_eq!(full.recall_at_1, table.get("no_focusfast").unwrap().recall_at_1);
}

fn salova(args: &[&str], dir: &std::path::Path) -> (i32, String, String) {
    let out = Command::new(env!("CARGO_BIN_EXE_salova"))
        .args(args)
        .current_dir(dir)
        .output()
        .unwrap();
    (
        out.status.code().unwrap(),
        String::from_utf8(out.stdout).unwrap(),
        String::from_utf8(out.stderr).unwrap(),
    )
}

fn json(line: &str) -> serde_json::Value {
    serde_json::from_str(line).unwrap()
}

#[test]
fn cli_synth_segment_supervise_route() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let (code, out, _) = salova(&["--seed", "4", "synth", "--out-dir", "v", "--describe", "2"], d);
    assert_eq!(code, 0);
    let segments = json(out.trim())["segments"].as_u64().unwrap();

    let (code, out, _) = salova(&["segment", "--stream", "v/stream.slvf", "--out", "det.json"], d);
    assert_eq!(code, 0);
    assert_eq!(json(out.trim())["segments"].as_u64().unwrap(), segments);

    let (code, out, _) = salova(&["supervise", "--v2t", "v/v2t.csv", "--t2t", "v/t2t.csv"], d);
    assert_eq!(code, 0);
    let y = &json(out.trim())["y"];
    for i in 0..segments as usize {
        assert_eq!(y[i][i], 1);
    }

    let model = Model::new(TrainConfig::default().model, 0).unwrap();
    let meta = CheckpointMeta {
        model: model.config.clone(),
        steps: 0,
        seed: 0,
    };
    save_checkpoint(d.join("fresh.ckpt"), &model, &meta).unwrap();
    let (code, out, _) = salova(
        &[
            "route",
            "--ckpt",
            "fresh.ckpt",
            "--stream",
            "v/stream.slvf",
            "--manifest",
            "v/manifest.json",
            "--query",
            "v/query.slvf",
        ],
        d,
    );
    assert_eq!(code, 0);
    let v = json(out.trim());
    assert_eq!(v["scores"].as_array().unwrap().len() as u64, segments);
    assert_eq!(v["selected"].as_array().unwrap().len(), 5);

    let (code, _, err) = salova(&["niah", "--ckpt", "fresh.ckpt"], d);
    assert_eq!(code, 2, "{err}");
    assert!(err.contains("untrained"));
}

#[test]
fn cli_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    assert_eq!(salova(&["frobnicate"], d).0, 1);
    assert_eq!(salova(&["--precision", "f16", "gradcheck"], d).0, 1);
    assert_eq!(salova(&["niah"], d).0, 1);
    assert_eq!(salova(&["segment", "--stream", "missing.slvf"], d).0, 2);
    std::fs::write(d.join("bad.slvf"), b"SLVF\x09").unwrap();
    assert_eq!(salova(&["segment", "--stream", "bad.slvf"], d).0, 2);
    std::fs::write(d.join("cfg.json"), r#"{"train": {"top_k": 0}}"#).unwrap();
    assert_eq!(salova(&["--config", "cfg.json", "train", "--out", "x.ckpt"], d).0, 1);
    std::fs::write(d.join("tol.json"), r#"{"gradcheck_tol": 1e-300}"#).unwrap();
    let (code, out, _) = salova(&["--config", "tol.json", "gradcheck"], d);
    assert_eq!(code, 3);
    assert_eq!(json(out.trim())["report"]["passed"], false);
    let out = Command::new(env!("CARGO_BIN_EXE_salova"))
        .args(["gradcheck"])
        .env("SALOVA_THREADS", "0")
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn cli_gradcheck_reports_json() {
    let dir = tempfile::tempdir().unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_salova"))
        .args(["gradcheck"])
        .env("SALOVA_THREADS", "1")
        .current_dir(dir.path())
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(0));
    let v = json(String::from_utf8(out.stdout).unwrap().trim());
    assert_eq!(v["report"]["passed"], true);
    assert!(v["report"]["max_rel_err"].as_f64().unwrap() <= 1e-4);
}
