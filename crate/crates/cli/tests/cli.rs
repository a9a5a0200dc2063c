use std::path::Path;
use std::process::{Command, Output};

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_icpcov")).args(args).output().expect("binary runs")
}

fn ok(args: &[&str]) {
    let out = run(args);
    assert!(out.status.success(), "icpcov {}: {}", args.join(" "), String::from_utf8_lossy(&out.stderr));
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn read(path: &Path) -> String {
    std::fs::read_to_string(path).unwrap_or_else(|e| panic!("{}: {e}", path.display()))
}

#[test]
fn gen_scene_is_deterministic_in_its_seed() {
    let tmp = tempfile::tempdir().unwrap();
    let d = |s: &str| tmp.path().join(s);
    for (dir, seed) in [("a", "4"), ("b", "4"), ("c", "5")] {
        ok(&["gen-scene", "--archetype", "corner", "--points", "300", "--seed", seed, "--out", p(&d(dir))]);
    }
    for f in ["reading.csv", "reference.csv", "ground_truth.csv"] {
        assert_eq!(read(&d("a").join(f)), read(&d("b").join(f)), "{f}");
    }
    assert_ne!(read(&d("a").join("reading.csv")), read(&d("c").join("reading.csv")));
    let manifest: serde_json::Value = serde_json::from_str(&read(&d("a").join("manifest.json"))).unwrap();
    assert_eq!(manifest["command"]["gen-scene"]["seed"], 4);
    assert!(manifest["outputs"].as_array().unwrap().iter().any(|o| o == "reading.csv"));
}

#[test]
fn usage_errors_exit_with_2() {
    let tmp = tempfile::tempdir().unwrap();
    let missing = tmp.path().join("nope");
    let out = run(&["sample", "--pair", p(&missing), "--out", p(&tmp.path().join("o"))]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("error:"));
    assert_eq!(run(&["frobnicate"]).status.code(), Some(2));
    assert_eq!(run(&["sample", "--out", p(&tmp.path().join("o"))]).status.code(), Some(2));
}

#[test]
fn runtime_errors_exit_with_1() {
    let tmp = tempfile::tempdir().unwrap();
    let pair = tmp.path().join("pair");
    std::fs::create_dir(&pair).unwrap();
    std::fs::write(pair.join("reading.csv"), "x,y,z\n0,0,oops\n").unwrap();
    std::fs::write(pair.join("reference.csv"), "x,y,z\n0,0,0\n").unwrap();
    std::fs::write(pair.join("ground_truth.csv"), "1,0,0,0,0,1,0,0,0,0,1,0\n").unwrap();
    let out = run(&["sample", "--pair", p(&pair), "--out", p(&tmp.path().join("o"))]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("reading.csv"));
}

#[test]
fn sample_writes_a_six_by_six_covariance() {
    let tmp = tempfile::tempdir().unwrap();
    let scene = tmp.path().join("scene");
    let samples = tmp.path().join("samples");
    ok(&["gen-scene", "--archetype", "cube", "--seed", "2", "--out", p(&scene)]);
    ok(&["sample", "--pair", p(&scene), "--n", "500", "--a", "0.05", "--seed", "2", "--out", p(&samples)]);

    let cov = read(&samples.join("covariance_pair.csv"));
    let rows: Vec<Vec<f64>> = cov
        .lines()
        .filter(|l| !l.starts_with('#') && !l.starts_with('c'))
        .map(|l| l.split(',').map(|x| x.parse().unwrap()).collect())
        .collect();
    assert_eq!(rows.len(), 6);
    assert!(rows.iter().all(|r| r.len() == 6));
    for i in 0..6 {
        assert!(rows[i][i] >= 0.0);
        for j in 0..6 {
            assert_eq!(rows[i][j], rows[j][i]);
        }
    }

    let summary = read(&samples.join("summary.csv"));
    let mut lines = summary.lines();
    let header: Vec<&str> = lines.next().unwrap().split(',').collect();
    let row: Vec<&str> = lines.next().unwrap().split(',').collect();
    let field = |name: &str| row[header.iter().position(|h| *h == name).unwrap()].parse::<usize>().unwrap();
    assert_eq!(field("n_total"), 500);
    assert!(field("n_kept") <= 500 && field("n_kept") > 0);
    assert_eq!(read(&samples.join("samples_pair.csv")).lines().count(), 501);
}

#[test]
fn eval_pairs_table_layout() {
    let tmp = tempfile::tempdir().unwrap();
    let d = |s: &str| tmp.path().join(s);
    ok(&["gen-sequence", "--scans", "3", "--points", "500", "--seed", "9", "--out", p(&d("seq"))]);
    ok(&["sample", "--dataset", p(&d("seq")), "--n", "12", "--seed", "1", "--out", p(&d("samples"))]);
    ok(&["describe", "--dataset", p(&d("seq")), "--samples", p(&d("samples")), "--out", p(&d("desc"))]);
    let examples = d("desc").join("examples.json");
    ok(&["train", "--examples", p(&examples), "--max-epochs", "2", "--out", p(&d("model"))]);
    let model = d("model").join("model.json");
    ok(&["eval-pairs", "--model", p(&model), "--test", p(&examples), "--dataset", p(&d("seq")), "--out", p(&d("eval"))]);

    let table = read(&d("eval").join("eval_pairs.csv"));
    let lines: Vec<&str> = table.lines().collect();
    assert_eq!(lines[0], "pair,kl_baseline,kl_learned,kl_censi");
    // Three scans give the pairs 000_001, 000_002 and 001_002.
    assert_eq!(lines.len(), 1 + 3 + 1);
    assert!(lines.last().unwrap().starts_with("mean,"));
    for l in &lines[1..] {
        let cols: Vec<&str> = l.split(',').collect();
        assert_eq!(cols.len(), 4);
        for c in &cols[1..] {
            assert!(c.parse::<f64>().unwrap() >= -1e-9, "{l}");
        }
    }
}

#[test]
fn import_converts_generic_scans() {
    let tmp = tempfile::tempdir().unwrap();
    let scans = tmp.path().join("scans");
    std::fs::create_dir(&scans).unwrap();
    std::fs::write(scans.join("a.xyz"), "0 0 0\n1 0 0\n0 1 0\n").unwrap();
    std::fs::write(scans.join("b.txt"), "x y z intensity\n0 0 1 7\n1 1 1 7\n").unwrap();
    std::fs::write(scans.join("notes.md"), "ignored").unwrap();
    let poses = tmp.path().join("poses.txt");
    std::fs::write(&poses, "1 0 0 0 0 1 0 0 0 0 1 0\n1 0 0 2 0 1 0 0 0 0 1 0\n").unwrap();

    let out = tmp.path().join("out");
    ok(&["import", "--clouds", p(&scans), "--poses", p(&poses), "--convention", "world-to-sensor", "--out", p(&out)]);
    let data = icpcov::dataset::load_dataset(&out).unwrap();
    assert_eq!(data.names, ["a", "b"]);
    assert_eq!(data.clouds[1].len(), 2);
    // World-to-sensor rows are inverted on the way in.
    assert_eq!(data.poses[1].translation.x, -2.0);

    std::fs::write(&poses, "1 0 0 0 0 1 0 0 0 0 1 0\n").unwrap();
    let out = run(&["import", "--clouds", p(&scans), "--poses", p(&poses), "--out", p(&tmp.path().join("o2"))]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn replay_reproduces_outputs() {
    let tmp = tempfile::tempdir().unwrap();
    let d = |s: &str| tmp.path().join(s);
    ok(&["gen-scene", "--archetype", "planes", "--points", "300", "--seed", "3", "--out", p(&d("scene"))]);
    ok(&["landscape", "--pair", p(&d("scene")), "--axes", "x,rz", "--steps", "5", "--out", p(&d("land"))]);
    ok(&["replay", p(&d("land").join("manifest.json")), "--out", p(&d("again"))]);
    assert_eq!(read(&d("land").join("landscape.csv")), read(&d("again").join("landscape.csv")));
    let grid = read(&d("land").join("landscape.csv"));
    assert_eq!(grid.lines().next().unwrap(), "d_x,d_rz,cost");
    assert_eq!(grid.lines().count(), 1 + 25);
}
