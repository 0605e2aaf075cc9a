use std::fs;
use std::path::Path;

use splatroom_cli::run;

fn cli(args: &[&str]) -> (i32, String, String) {
    let (mut out, mut err) = (Vec::new(), Vec::new());
    let code = run(std::iter::once("splatroom").chain(args.iter().copied()), &mut out, &mut err);
    (code, String::from_utf8(out).unwrap(), String::from_utf8(err).unwrap())
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn tiny_dataset(dir: &Path) -> std::path::PathBuf {
    let spec = dir.join("spec.txt");
    fs::write(&spec, "n_views = 3\nimage_width = 16\nimage_height = 12\nn_points = 800\n").unwrap();
    let data = dir.join("data");
    let (code, _, err) = cli(&["synth", s(&spec), s(&data)]);
    assert_eq!(code, 0, "{err}");
    data.join("manifest.json")
}

#[test]
fn eval_of_a_mesh_against_itself_is_perfect() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = tiny_dataset(dir.path());
    let gt = manifest.with_file_name("gt_mesh.ply");
    let (code, out, _) = cli(&["eval", s(&gt), s(&gt)]);
    assert_eq!(code, 0);
    let v: serde_json::Value = serde_json::from_str(&out).unwrap();
    assert_eq!(v["fscore"], 1.0);
    assert!(v["accuracy"].as_f64().unwrap() < 0.02);
}

#[test]
fn missing_manifest_is_a_runtime_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let (code, _, err) = cli(&["train", s(&dir.path().join("nope.json")), "--iters", "2", "--out", s(&out)]);
    assert_eq!(code, 2, "{err}");
    assert!(!out.exists());
}

#[test]
fn usage_errors_exit_1_without_side_effects() {
    let dir = tempfile::tempdir().unwrap();
    let target = dir.path().join("out");
    let t = s(&target);
    let cases: [&[&str]; 5] = [
        &["train", "m.json", "--bogus", "--out", t],
        &["train", "m.json", "--set", "train.no_such_key=1", "--out", t],
        &["train", "m.json", "--set", "loss.lambda_d=-1", "--out", t],
        &["synth", "default", t, "--seed", "x"],
        &["--threads", "0", "synth", "default", t],
    ];
    for args in cases {
        let (code, _, err) = cli(args);
        assert_eq!(code, 1, "{args:?}: {err}");
        assert!(!target.exists(), "{args:?} wrote output");
    }
}

#[test]
fn help_exits_cleanly() {
    let (code, out, _) = cli(&["--help"]);
    assert_eq!(code, 0);
    assert!(out.contains("train"));
}

#[test]
fn init_train_render_mesh_roundtrip() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = tiny_dataset(dir.path());
    let init = dir.path().join("init.bin");
    let (code, _, err) = cli(&["init", s(&manifest), "--delta", "0.5", "--k", "2", "--out", s(&init)]);
    assert_eq!(code, 0, "{err}");

    let run_dir = dir.path().join("run");
    let (code, _, err) = cli(&["train", s(&manifest), "--init", s(&init), "--iters", "4", "--out", s(&run_dir)]);
    assert_eq!(code, 0, "{err}");
    let final_ck = run_dir.join("final.bin");
    let log = fs::read_to_string(run_dir.join("loss.csv")).unwrap();
    assert_eq!(log.lines().count(), 5);

    // Resuming past the requested count is a no-op that still writes outputs.
    let again = dir.path().join("again");
    let (code, _, err) = cli(&["train", s(&manifest), "--init", s(&final_ck), "--iters", "4", "--out", s(&again)]);
    assert_eq!(code, 0, "{err}");
    assert_eq!(fs::read(again.join("final.bin")).unwrap(), fs::read(&final_ck).unwrap());

    let renders = dir.path().join("renders");
    let (code, _, err) = cli(&["render", s(&final_ck), "all", s(&renders)]);
    assert_eq!(code, 0, "{err}");
    assert_eq!(fs::read_dir(&renders).unwrap().count(), 3 * 4);
    let (code, _, _) = cli(&["render", s(&final_ck), "no-such-camera", s(&dir.path().join("r2"))]);
    assert_eq!(code, 2);

    let mesh = dir.path().join("mesh.ply");
    let (code, _, err) = cli(&["mesh", s(&final_ck), s(&manifest), s(&mesh), "--voxel", "0.1"]);
    assert_eq!(code, 0, "{err}");
    assert!(mesh.exists());
}

#[test]
fn corrupt_checkpoint_is_a_runtime_error() {
    let dir = tempfile::tempdir().unwrap();
    let ck = dir.path().join("bad.bin");
    fs::write(&ck, b"not a checkpoint").unwrap();
    let (code, _, _) = cli(&["render", s(&ck), "all", s(&dir.path().join("r"))]);
    assert_eq!(code, 2);
}
