use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use smpf::evolve::{stream_rng, Stream};
use smpf::{Node, Primitive, PrimitiveClass, Tree};
use tempfile::TempDir;

fn smpf(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_smpf"))
        .current_dir(dir)
        .env_remove("SMPF_SEED")
        .args(args)
        .output()
        .expect("binary runs")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn write(dir: &Path, name: &str, text: &str) -> PathBuf {
    let p = dir.join(name);
    fs::write(&p, text).unwrap();
    p
}

const SMALL: &str = r#"{"population": 4, "survivors": 2, "max_iter": 2, "gd_steps": 5, "batch_size": 64,
    "min_nodes": 1, "max_nodes": 1, "edge_prob": 1.0, "p_del": 0.0}"#;

fn poly(p: [f64; 4]) -> Primitive {
    Primitive::new(PrimitiveClass::Poly3, &p)
}

fn save(dir: &Path, name: &str, t: &Tree) -> String {
    write(dir, name, &t.to_json());
    name.to_string()
}

/// g = 3 x_0 + x_1 over three features; x_2 is not connected.
fn linear_model() -> Tree {
    let id = poly([0.0, 0.0, 1.0, 0.0]);
    Tree::new(
        3,
        vec![vec![Node::over_features(id, [(0, poly([0.0, 0.0, 3.0, 0.0])), (1, id)])]],
    )
    .unwrap()
}

fn read_column(path: &Path, col: &str) -> Vec<f64> {
    let mut r = csv::Reader::from_path(path).unwrap();
    let idx = r.headers().unwrap().iter().position(|h| h == col).unwrap();
    r.records().map(|rec| rec.unwrap()[idx].parse().unwrap()).collect()
}

#[test]
fn fit_writes_model_expression_and_report() {
    let dir = TempDir::new().unwrap();
    let o = smpf(dir.path(), &["fit", "--config", "exp1", "--target", "exp2d", "--seed", "3", "--out", "run"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let run = dir.path().join("run");
    let model = Tree::from_json(&fs::read_to_string(run.join("model.json")).unwrap()).unwrap();
    let expr = fs::read_to_string(run.join("expression.txt")).unwrap();
    assert_eq!(expr.trim(), model.render(4));
    let report: serde_json::Value = serde_json::from_str(&fs::read_to_string(run.join("report.json")).unwrap()).unwrap();
    assert_eq!(report["target"], "exp2d");
    assert!(report["rows"][0]["test_r2"].as_f64().unwrap() > 0.9);
    let header = fs::read_to_string(run.join("report.csv")).unwrap();
    assert!(header.starts_with("seed,train_mse,test_mse,train_r2,test_r2,seconds"));
}

#[test]
fn fit_is_reproducible_across_thread_counts() {
    let dir = TempDir::new().unwrap();
    write(dir.path(), "small.json", SMALL);
    let a = smpf(dir.path(), &["--jobs", "1", "fit", "--config", "small.json", "--target", "sin2d", "--seed", "5", "--out", "a"]);
    let b = smpf(dir.path(), &["--jobs", "4", "fit", "--config", "small.json", "--target", "sin2d", "--seed", "5", "--out", "b"]);
    assert!(a.status.success() && b.status.success());
    for f in ["model.json", "expression.txt"] {
        assert_eq!(
            fs::read(dir.path().join("a").join(f)).unwrap(),
            fs::read(dir.path().join("b").join(f)).unwrap(),
            "{f}"
        );
    }
}

#[test]
fn seed_falls_back_to_environment() {
    let dir = TempDir::new().unwrap();
    write(dir.path(), "small.json", SMALL);
    let flag = smpf(dir.path(), &["fit", "--config", "small.json", "--target", "sin2d", "--seed", "11", "--out", "a"]);
    let env = Command::new(env!("CARGO_BIN_EXE_smpf"))
        .current_dir(dir.path())
        .env("SMPF_SEED", "11")
        .args(["fit", "--config", "small.json", "--target", "sin2d", "--out", "b"])
        .output()
        .unwrap();
    assert!(flag.status.success() && env.status.success());
    assert_eq!(
        fs::read(dir.path().join("a/model.json")).unwrap(),
        fs::read(dir.path().join("b/model.json")).unwrap()
    );
}

#[test]
fn fit_on_a_dataset() {
    let dir = TempDir::new().unwrap();
    write(dir.path(), "small.json", SMALL);
    let mut text = String::from("x_1,x_0,y\n");
    for i in 0..40 {
        let (a, b) = (i as f64 / 40.0, ((i * 7) % 40) as f64 / 40.0);
        text.push_str(&format!("{b},{a},{}\n", a * a + b));
    }
    write(dir.path(), "train.csv", &text);
    let o = smpf(dir.path(), &["fit", "--config", "small.json", "--data", "train.csv", "--seeds", "2", "--out", "run"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let report: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("run/report.json")).unwrap()).unwrap();
    assert_eq!(report["target"], "train");
    assert_eq!(report["rows"].as_array().unwrap().len(), 2);
}

#[test]
fn missing_config_is_an_io_error() {
    let dir = TempDir::new().unwrap();
    let o = smpf(dir.path(), &["fit", "--config", "nowhere.json", "--target", "exp2d", "--out", "run"]);
    assert_eq!(o.status.code(), Some(3));
    assert!(stderr(&o).contains("nowhere.json"));
    assert!(!dir.path().join("run").exists());
}

#[test]
fn indivisible_population_is_a_config_error() {
    let dir = TempDir::new().unwrap();
    write(dir.path(), "bad.json", r#"{"population": 10, "survivors": 3}"#);
    let o = smpf(dir.path(), &["fit", "--config", "bad.json", "--target", "exp2d", "--out", "run"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("M mod s"), "{}", stderr(&o));
}

#[test]
fn unreadable_dataset_leaves_no_output() {
    let dir = TempDir::new().unwrap();
    write(dir.path(), "broken.csv", "x_0,y\n0.5,1.0\n0.7,inf\n");
    let o = smpf(dir.path(), &["fit", "--config", "exp1", "--data", "broken.csv", "--out", "run"]);
    assert_eq!(o.status.code(), Some(4), "{}", stderr(&o));
    assert!(stderr(&o).contains("row 2"), "{}", stderr(&o));
    assert!(!dir.path().join("run").exists());
}

#[test]
fn eval_identity_model() {
    let dir = TempDir::new().unwrap();
    let id = poly([0.0, 0.0, 1.0, 0.0]);
    let t = Tree::new(1, vec![vec![Node::over_features(id, [(0, id)])]]).unwrap();
    let model = save(dir.path(), "id.json", &t);
    write(dir.path(), "pts.csv", "x_0\n0.1\n0.9\n");
    let o = smpf(dir.path(), &["eval", "--model", &model, "--data", "pts.csv", "--out", "pred.csv"]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(fs::read_to_string(dir.path().join("pred.csv")).unwrap(), "x_0,g\n0.1,0.1\n0.9,0.9\n");
}

#[test]
fn eval_matches_in_process_evaluation() {
    let dir = TempDir::new().unwrap();
    let mut rng = stream_rng(8, Stream::Init, 0, 0);
    let cfg = smpf::SmpfConfig {
        hidden_layers: 2,
        max_nodes: 3,
        ..smpf::SmpfConfig::default()
    };
    let t: Tree = smpf::evolve::random_tree(&cfg, 3, &mut rng);
    let model = save(dir.path(), "m.json", &t);
    let mut text = String::from("x_0,x_1,x_2\n");
    let mut points = Vec::new();
    for i in 0..25 {
        let x = [i as f64 / 25.0, 1.0 - i as f64 / 50.0, (i as f64).sin()];
        text.push_str(&format!("{},{},{}\n", x[0], x[1], x[2]));
        points.push(x);
    }
    write(dir.path(), "pts.csv", &text);
    let o = smpf(dir.path(), &["eval", "--model", &model, "--data", "pts.csv", "--out", "pred.csv"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let g = read_column(&dir.path().join("pred.csv"), "g");
    for (x, v) in points.iter().zip(&g) {
        let expect = t.eval(x).unwrap();
        assert!((v - expect).abs() <= 1e-12 * (1.0 + expect.abs()));
    }
}

#[test]
fn eval_of_empty_points_writes_header_only() {
    let dir = TempDir::new().unwrap();
    let model = save(dir.path(), "m.json", &linear_model());
    write(dir.path(), "empty.csv", "");
    let o = smpf(dir.path(), &["eval", "--model", &model, "--data", "empty.csv", "--out", "pred.csv"]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(fs::read_to_string(dir.path().join("pred.csv")).unwrap(), "x_0,x_1,x_2,g\n");
    write(dir.path(), "header.csv", "a,b,c\n");
    let o = smpf(dir.path(), &["eval", "--model", &model, "--data", "header.csv", "--out", "pred2.csv"]);
    assert!(o.status.success());
    assert_eq!(fs::read_to_string(dir.path().join("pred2.csv")).unwrap(), "a,b,c,g\n");
}

#[test]
fn eval_width_mismatch_is_a_shape_error() {
    let dir = TempDir::new().unwrap();
    let model = save(dir.path(), "m.json", &linear_model());
    write(dir.path(), "pts.csv", "x_0,x_1\n0.1,0.2\n");
    let o = smpf(dir.path(), &["eval", "--model", &model, "--data", "pts.csv", "--out", "pred.csv"]);
    assert_eq!(o.status.code(), Some(4));
    assert!(!dir.path().join("pred.csv").exists());
}

#[test]
fn malformed_model_reports_position() {
    let dir = TempDir::new().unwrap();
    write(dir.path(), "m.json", "{\"version\": 1,\n \"d\": oops}");
    write(dir.path(), "pts.csv", "x_0\n0.1\n");
    let o = smpf(dir.path(), &["eval", "--model", "m.json", "--data", "pts.csv", "--out", "pred.csv"]);
    assert_eq!(o.status.code(), Some(4));
    assert!(stderr(&o).contains("line 2"), "{}", stderr(&o));
}

#[test]
fn importance_ranks_and_zero_gradient() {
    let dir = TempDir::new().unwrap();
    let model = save(dir.path(), "m.json", &linear_model());
    let o = smpf(dir.path(), &["importance", "--model", &model, "--point", "0.5,0.5,0.5", "--out", "imp.json"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let csv = fs::read_to_string(dir.path().join("imp.csv")).unwrap();
    assert_eq!(csv, "point,feature,gradient,rank\n0,0,3,1\n0,1,1,2\n0,2,0,3\n");
    let json: serde_json::Value = serde_json::from_str(&fs::read_to_string(dir.path().join("imp.json")).unwrap()).unwrap();
    assert_eq!(json[0]["ranking"], serde_json::json!([0, 1, 2]));
    assert!(json[0]["hessian"].is_null());
}

#[test]
fn importance_with_hessian() {
    let dir = TempDir::new().unwrap();
    let model = save(dir.path(), "m.json", &linear_model());
    write(dir.path(), "pts.csv", "x_0,x_1,x_2\n0.1,0.2,0.3\n0.4,0.5,0.6\n");
    let o = smpf(dir.path(), &["importance", "--model", &model, "--data", "pts.csv", "--hessian", "--out", "imp.json"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let json: serde_json::Value = serde_json::from_str(&fs::read_to_string(dir.path().join("imp.json")).unwrap()).unwrap();
    assert_eq!(json.as_array().unwrap().len(), 2);
    let h = json[1]["hessian"].as_array().unwrap();
    assert_eq!(h.len(), 3);
    assert!(h.iter().flat_map(|r| r.as_array().unwrap()).all(|v| v.as_f64().unwrap().abs() < 1e-5));
}

#[test]
fn importance_agrees_with_differenced_eval() {
    let dir = TempDir::new().unwrap();
    let mut rng = stream_rng(21, Stream::Init, 0, 0);
    let cfg = smpf::SmpfConfig {
        max_nodes: 3,
        ..smpf::SmpfConfig::default()
    };
    let t: Tree = smpf::evolve::random_tree(&cfg, 2, &mut rng);
    let model = save(dir.path(), "m.json", &t);
    let x = [0.37, 0.61];
    let h = 1e-6;
    let pts = format!(
        "x_0,x_1\n{},{}\n{},{}\n{},{}\n{},{}\n",
        x[0] + h, x[1], x[0] - h, x[1], x[0], x[1] + h, x[0], x[1] - h
    );
    write(dir.path(), "pts.csv", &pts);
    assert!(smpf(dir.path(), &["eval", "--model", &model, "--data", "pts.csv", "--out", "p.csv"]).status.success());
    let g = read_column(&dir.path().join("p.csv"), "g");
    let point = format!("{},{}", x[0], x[1]);
    assert!(smpf(dir.path(), &["importance", "--model", &model, "--point", &point, "--out", "i.json"]).status.success());
    let grad = read_column(&dir.path().join("i.csv"), "gradient");
    for j in 0..2 {
        let fd = (g[2 * j] - g[2 * j + 1]) / (2.0 * h);
        assert!((grad[j] - fd).abs() <= 1e-4 * (1.0 + fd.abs()), "{j}: {} vs {fd}", grad[j]);
    }
}

#[test]
fn bench_table_and_per_target_files() {
    let dir = TempDir::new().unwrap();
    write(dir.path(), "small.json", SMALL);
    let o = smpf(dir.path(), &["bench", "--config", "small.json", "--target", "exp2d", "--seeds", "5", "--out", "b"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let table = String::from_utf8(o.stdout).unwrap();
    assert!(table.lines().nth(1).unwrap().starts_with("exp2d"));
    assert!(table.contains('±'));
    let rows = fs::read_to_string(dir.path().join("b/exp2d.csv")).unwrap();
    assert_eq!(rows.lines().count(), 6);
    let agg = read_column(&dir.path().join("b/bench.csv"), "test_r2_std");
    assert_eq!(agg.len(), 1);
    assert!(dir.path().join("b/exp2d.expr.txt").exists());
}

#[test]
fn bench_single_seed_has_zero_std() {
    let dir = TempDir::new().unwrap();
    write(dir.path(), "small.json", SMALL);
    let o = smpf(dir.path(), &["bench", "--config", "small.json", "--target", "sin2d", "--seeds", "1", "--out", "b"]);
    assert!(o.status.success(), "{}", stderr(&o));
    for col in ["train_mse_std", "test_mse_std", "train_r2_std", "test_r2_std"] {
        assert_eq!(read_column(&dir.path().join("b/bench.csv"), col), vec![0.0]);
    }
}

#[test]
fn bench_unknown_target_lists_names() {
    let dir = TempDir::new().unwrap();
    let o = smpf(dir.path(), &["bench", "--target", "nonesuch", "--out", "b"]);
    assert_eq!(o.status.code(), Some(2));
    let err = stderr(&o);
    assert!(err.contains("exp2d") && err.contains("r_8"), "{err}");
}

#[test]
fn render_prints_expression() {
    let dir = TempDir::new().unwrap();
    let model = save(dir.path(), "m.json", &linear_model());
    let o = smpf(dir.path(), &["render", "--model", &model, "--precision", "2"]);
    assert!(o.status.success());
    let text = String::from_utf8(o.stdout).unwrap();
    assert_eq!(text.trim(), linear_model().render(2));
    let e = smpf::Expr::parse(text.trim()).unwrap();
    assert_eq!(e.eval(&[1.0, 2.0, 7.0]), 5.0);
}
