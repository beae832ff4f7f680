use std::collections::BTreeMap;
use std::fs;
use std::net::TcpListener;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use asuka_core::judge::{StubReply, StubServer};
use asuka_core::Image;
use asuka_lab::report::{parse_summary, SUMMARY};
use serde_json::Value;

const BIN: &str = env!("CARGO_BIN_EXE_asuka-lab");

fn lab(args: &[&str]) -> Output {
    Command::new(BIN).args(args).output().expect("binary runs")
}

fn ok(args: &[&str]) -> Output {
    let out = lab(args);
    assert!(out.status.success(), "asuka-lab {args:?}: {}", String::from_utf8_lossy(&out.stderr));
    out
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn json(path: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

fn files(dir: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.insert(p.strip_prefix(dir).unwrap().to_path_buf(), fs::read(&p).unwrap());
            }
        }
    }
    out
}

#[test]
fn mask_gen_is_reproducible() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    ok(&["mask-gen", "--n", "100", "--seed", "7", "--out", s(&a)]);
    ok(&["mask-gen", "--n", "100", "--seed", "7", "--out", s(&b)]);
    let (fa, fb) = (files(&a), files(&b));
    assert_eq!(fa.keys().collect::<Vec<_>>(), fb.keys().collect::<Vec<_>>());
    for (path, bytes) in &fa {
        if path == Path::new("run.json") {
            let strip = |v: &[u8]| {
                let mut v: Value = serde_json::from_slice(v).unwrap();
                v.as_object_mut().unwrap().remove("created_utc");
                v
            };
            assert_eq!(strip(bytes), strip(&fb[path]));
        } else {
            assert_eq!(bytes, &fb[path], "{}", path.display());
        }
    }
    let index = fs::read_to_string(a.join("masks/index.jsonl")).unwrap();
    assert_eq!(index.lines().count(), 100);
    assert_eq!(fa.keys().filter(|p| p.extension().is_some_and(|e| e == "png")).count(), 100);
    let manifest = json(&a.join("run.json"));
    assert_eq!(manifest["root_seed"], 7);
    assert_eq!(manifest["complete"], true);

    let c = tmp.path().join("c");
    ok(&["mask-gen", "--n", "100", "--seed", "8", "--out", s(&c)]);
    assert_ne!(fs::read(a.join("masks/index.jsonl")).unwrap(), fs::read(c.join("masks/index.jsonl")).unwrap());
}

#[test]
fn invalid_config_lists_every_violation() {
    let tmp = tempfile::tempdir().unwrap();
    let out = lab(&["mask-gen", "--set", "mask.p_object=0.7", "--set", "align_train.lr=-1", "--out", s(&tmp.path().join("r"))]);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("mask.p_object"), "{err}");
    assert!(err.contains("align_train.lr"), "{err}");
    assert!(!tmp.path().join("r").exists());

    let cfg = tmp.path().join("bad.toml");
    fs::write(&cfg, "seed = 1\n[mask]\np_objects = 0.5\n[eval]\nitems = \"many\"\n").unwrap();
    let out = lab(&["mask-gen", "--config", s(&cfg)]);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("mask.p_objects") && err.contains("eval.items"), "{err}");

    assert_eq!(lab(&["mask-gen", "--bogus"]).status.code(), Some(2));
    assert_eq!(lab(&["--help"]).status.code(), Some(0));
}

#[test]
fn config_file_and_overrides_are_snapshotted() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("c.toml");
    fs::write(&cfg, "seed = 3\n[mask]\np_object = 0.4\np_irregular = 0.5\n").unwrap();
    let run = tmp.path().join("r");
    ok(&["mask-gen", "--n", "5", "--config", s(&cfg), "--set", "mask.ratio_max=0.6", "--out", s(&run)]);
    let snap: toml::Value = toml::from_str(&fs::read_to_string(run.join("config.toml")).unwrap()).unwrap();
    assert_eq!(snap["seed"].as_integer(), Some(3));
    assert_eq!(snap["mask"]["p_object"].as_float(), Some(0.4));
    assert_eq!(snap["mask"]["ratio_max"].as_float(), Some(0.6));
    assert_eq!(snap["mask"]["p_regular"].as_float(), Some(0.1));
}

#[test]
fn runs_need_resume_to_reuse_a_directory() {
    let tmp = tempfile::tempdir().unwrap();
    let run = tmp.path().join("r");
    ok(&["mask-gen", "--n", "3", "--out", s(&run)]);
    let created = json(&run.join("run.json"))["created_utc"].clone();
    assert_eq!(lab(&["mask-gen", "--n", "3", "--out", s(&run)]).status.code(), Some(3));
    ok(&["mask-gen", "--n", "3", "--out", s(&run), "--resume"]);
    assert_eq!(json(&run.join("run.json"))["created_utc"], created);
    let out = lab(&["mask-gen", "--n", "3", "--out", s(&run), "--resume", "--seed", "99"]);
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains("config hash"));
}

#[test]
fn default_run_directory_is_named_by_subcommand_and_hash() {
    let tmp = tempfile::tempdir().unwrap();
    let runs = tmp.path().join("runs");
    let out = ok(&["mask-gen", "--n", "2", "--set", &format!("runs_dir=\"{}\"", s(&runs))]);
    let printed = String::from_utf8_lossy(&out.stdout).trim().to_string();
    let dir = fs::read_dir(&runs).unwrap().next().unwrap().unwrap().path();
    assert_eq!(Path::new(&printed), dir);
    let name = dir.file_name().unwrap().to_string_lossy().to_string();
    let hash = json(&dir.join("run.json"))["config_hash"].as_str().unwrap().to_string();
    assert!(name.starts_with("mask-gen-") && name.ends_with(&hash), "{name}");
}

#[test]
fn report_summary_round_trips_and_is_stable() {
    let tmp = tempfile::tempdir().unwrap();
    let run = tmp.path().join("r");
    ok(&["mask-gen", "--n", "40", "--seed", "4", "--out", s(&run)]);
    ok(&["report", "--run", s(&run)]);
    let text = fs::read_to_string(run.join(SUMMARY)).unwrap();
    let summary = parse_summary(&text).unwrap();
    assert_eq!(summary.subcommand, "mask-gen");
    assert_eq!(summary.root_seed, 4);
    let ratios = summary.mask_ratios.as_ref().unwrap();
    assert_eq!(ratios.masks, 40);
    assert_eq!(ratios.bins.iter().sum::<usize>(), 40);
    assert_eq!(ratios.base_counts.values().sum::<usize>(), 40);
    assert_eq!(serde_json::to_value(&summary).unwrap(), serde_json::from_str::<Value>(&text).unwrap());
    for p in &summary.plots {
        assert!(fs::read_to_string(run.join(p)).unwrap().starts_with("<svg"));
    }
    ok(&["report", "--run", s(&run)]);
    assert_eq!(fs::read_to_string(run.join(SUMMARY)).unwrap(), text);
    assert_eq!(lab(&["report", "--run", s(&tmp.path().join("missing"))]).status.code(), Some(3));
}

const TINY: [&str; 8] = [
    "--set", "vae_train.steps=20",
    "--set", "base_train.steps=2",
    "--set", "data.train_images=4",
    "--set", "eval.items=6",
];

#[test]
fn eval_without_a_trained_decoder_reports_the_baseline() {
    let tmp = tempfile::tempdir().unwrap();
    let base = tmp.path().join("base");
    let eval = tmp.path().join("eval");
    let mut args = vec!["train-base", "--out", s(&base)];
    args.extend(TINY);
    ok(&args);
    assert!(base.join("checkpoints/vae_encoder/header.json").exists());
    assert!(base.join("losses/vae.csv").exists() && base.join("plots/vae_loss.svg").exists());

    let mut args = vec!["eval", "--out", s(&eval), "--from", s(&base)];
    args.extend(TINY);
    ok(&args);
    let m = json(&eval.join("metrics.json"));
    assert_eq!(m["eval"]["g@e"]["items"], 6);
    assert!(m["eval"]["g@e"].get("trained_mean").is_none());
    for name in ["lpips", "fid", "u-ids", "p-ids"] {
        assert_eq!(m["eval"]["scores"][name], "unavailable", "{name}");
    }
    assert!(m["eval"]["scores"]["g@e"].is_number());
    let table = fs::read_to_string(eval.join("eval/per_item.csv")).unwrap();
    assert_eq!(table.lines().count(), 7);
    assert!(eval.join("eval/set/manifest.json").exists());

    // The saved set evaluates to the same baseline scores.
    let again = tmp.path().join("again");
    let set = eval.join("eval/set");
    let mut args = vec!["eval", "--out", s(&again), "--from", s(&base), "--eval-set", s(&set)];
    args.extend(TINY);
    ok(&args);
    assert_eq!(fs::read_to_string(again.join("eval/per_item.csv")).unwrap(), table);
}

#[test]
fn missing_checkpoints_are_reported() {
    let tmp = tempfile::tempdir().unwrap();
    let out = lab(&["train-align", "--out", s(&tmp.path().join("r"))]);
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains("checkpoint"));
    let manifest = json(&tmp.path().join("r/run.json"));
    assert_eq!(manifest["complete"], false);
}

fn composites(dir: &Path, n: usize) {
    fs::create_dir_all(dir).unwrap();
    for i in 0..n {
        Image::filled(8, 16, [i as f64 / n as f64, 0.5, 0.2]).save_png(&dir.join(format!("item{i}.png"))).unwrap();
    }
}

#[test]
fn judge_against_stub_and_unreachable_endpoint() {
    let tmp = tempfile::tempdir().unwrap();
    let comp = tmp.path().join("comp");
    composites(&comp, 6);
    let stub = StubServer::start(4, |id, _| {
        let i: usize = id.trim_start_matches("item").parse().unwrap();
        StubReply::Content(["ANSWER: YES", "ANSWER: NO", "unsure"][i % 3].into())
    })
    .unwrap();
    let url = format!("judge.base_url=\"{}\"", stub.base_url());
    let run = tmp.path().join("ok");
    ok(&["judge", "--composites", s(&comp), "--set", &url, "--out", s(&run)]);
    let lines = fs::read_to_string(run.join("judge/verdicts.jsonl")).unwrap();
    assert_eq!(lines.lines().count(), 6);
    let m = json(&run.join("metrics.json"));
    assert_eq!(m["judge"]["hallucination"], 2);
    assert_eq!(m["judge"]["clean"], 2);
    assert_eq!(m["judge"]["unparsed"], 2);

    let port = {
        let l = TcpListener::bind("127.0.0.1:0").unwrap();
        l.local_addr().unwrap().port()
    };
    let dead = format!("judge.base_url=\"http://127.0.0.1:{port}/v1\"");
    let run = tmp.path().join("dead");
    let out = lab(&["judge", "--composites", s(&comp), "--set", &dead, "--set", "judge.max_retries=0", "--out", s(&run)]);
    assert_eq!(out.status.code(), Some(4), "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(fs::read_to_string(run.join("judge/verdicts.jsonl")).unwrap().lines().count(), 6);
}

#[test]
fn build_dataset_writes_a_manifest() {
    let tmp = tempfile::tempdir().unwrap();
    let run = tmp.path().join("ds");
    ok(&["build-dataset", "--set", "dataset.clusters_per_dataset=3", "--out", s(&run)]);
    let manifest = json(&run.join("dataset/manifest.json"));
    let recs = manifest.as_array().unwrap();
    assert_eq!(recs.len(), 12);
    for r in recs {
        let id = r["id"].as_str().unwrap();
        let img = Image::load(&run.join(format!("dataset/images/{id}.png"))).unwrap();
        assert_eq!(img.dims(), (64, 64));
        assert!(run.join(format!("dataset/masks/{id}.png")).exists());
        let ratio = r["mask_ratio"].as_f64().unwrap();
        assert!((0.0..=1.0).contains(&ratio));
    }

    // A folder layout with a foreground mask.
    let input = tmp.path().join("in");
    for src in ["rooms", "hills"] {
        fs::create_dir_all(input.join(src).join("fg")).unwrap();
        for i in 0..4 {
            Image::filled(80, 96, [0.1 * i as f64, 0.4, 0.6]).save_png(&input.join(src).join(format!("{src}{i}.png"))).unwrap();
        }
    }
    asuka_core::mask::Mask::ones(80, 96).save_png(&input.join("rooms/fg/rooms0.png")).unwrap();
    let run = tmp.path().join("ds2");
    ok(&[
        "build-dataset", "--input", s(&input), "--domain", "rooms=indoor", "--domain", "hills=landscape",
        "--set", "dataset.clusters_per_dataset=2", "--out", s(&run),
    ]);
    let manifest = json(&run.join("dataset/manifest.json"));
    let recs = manifest.as_array().unwrap();
    assert_eq!(recs.len(), 4);
    let tags: Vec<&str> = recs.iter().map(|r| r["domain_tag"].as_str().unwrap()).collect();
    assert_eq!(tags.iter().filter(|t| **t == "indoor").count(), 2);
    assert_eq!(tags.iter().filter(|t| **t == "landscape").count(), 2);

    let out = lab(&["build-dataset", "--input", s(&input), "--domain", "rooms=kitchen", "--out", s(&tmp.path().join("bad"))]);
    assert_eq!(out.status.code(), Some(3));
}
