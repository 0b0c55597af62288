use std::path::Path;
use std::process::{Command, Output};

use orbiconv::experiments::{Dataset, Manifest, Split};

fn orbiconv(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_orbiconv")).args(args).output().expect("binary runs")
}

fn path(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn manifest(p: &Path) -> Manifest {
    Manifest::from_json(&std::fs::read_to_string(p).unwrap()).unwrap()
}

const TINY: &str = "\
data.kind = ring_vs_cross
data.n_per_class = 12
data.size = 10
train.epochs = 1
train.batch_size = 8
model.width = 2
model.blocks = 1
robustness.angles = 20,40
robustness.trials = 2
";

#[test]
fn geometry_lists_every_sample() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("g.csv");
    let o = orbiconv(&["geometry", "--size", "5", "--mode", "circular", "--dilation", "2", "--out", path(&out)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let csv = std::fs::read_to_string(&out).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some("index,x,y,ring"));
    let rows: Vec<Vec<f64>> = lines.map(|l| l.split(',').map(|v| v.parse().unwrap()).collect()).collect();
    assert_eq!(rows.len(), 25);
    for r in &rows {
        let radius = (r[1] * r[1] + r[2] * r[2]).sqrt();
        assert!((radius - 2.0 * r[3]).abs() < 1e-12);
    }
    let m = manifest(&dir.path().join("g.csv.manifest.json"));
    assert_eq!(m.command, "geometry");
    assert!(m.mismatches().is_empty());
}

#[test]
fn transform_rows_are_convex_weights() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("b.csv");
    assert!(orbiconv(&["transform", "--size", "3", "--out", path(&out)]).status.success());
    let mut sums = [0.0f64; 9];
    for l in std::fs::read_to_string(&out).unwrap().lines().skip(1) {
        let f: Vec<&str> = l.split(',').collect();
        let v: f64 = f[2].parse().unwrap();
        assert!(v > 0.0);
        sums[f[0].parse::<usize>().unwrap()] += v;
    }
    assert!(sums.iter().all(|s| (s - 1.0).abs() < 1e-12));
}

#[test]
fn identity_check_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("id.csv");
    let ok = orbiconv(&["identity-check", "--sizes", "3,5", "--trials", "2", "--out", path(&out)]);
    assert_eq!(ok.status.code(), Some(0));
    assert_eq!(std::fs::read_to_string(&out).unwrap().lines().count(), 1 + 2 * 2 * 2);
    let strict = orbiconv(&["identity-check", "--sizes", "3", "--trials", "2", "--tolerance", "0", "--out", path(&out)]);
    assert_eq!(strict.status.code(), Some(3));
}

#[test]
fn config_errors_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.cfg");
    std::fs::write(&cfg, "train.epochs = lots\n").unwrap();
    let o = orbiconv(&["train", "--config", path(&cfg), "--out-dir", path(dir.path())]);
    assert_eq!(o.status.code(), Some(2));
    let o = orbiconv(&["train", "--set", "nosuch.key=1", "--out-dir", path(dir.path())]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("nosuch.key"));
}

#[test]
fn gen_data_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let (im, lb) = (dir.path().join("x.orbt"), dir.path().join("y.orbt"));
    let o = orbiconv(&["gen-data", "--kind", "oriented_bars", "--n", "5", "--size", "9", "--seed", "4", "--images", path(&im), "--labels", path(&lb)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let d = Dataset::load_orbt(&im, &lb, Split::Train).unwrap();
    assert_eq!((d.len(), d.image_dims()), (10, (1, 9, 9)));
    assert_eq!(manifest(&dir.path().join("x.orbt.manifest.json")).outputs.len(), 2);
}

#[test]
fn train_then_robustness_from_saved_weights() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.cfg");
    std::fs::write(&cfg, TINY).unwrap();
    let run = dir.path().join("run");
    let o = orbiconv(&["train", "--config", path(&cfg), "--out-dir", path(&run)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(std::fs::read_to_string(run.join("train.csv")).unwrap().lines().count() == 2);
    let m = manifest(&run.join("manifest.json"));
    assert!(m.config_hash.is_some() && m.outputs.len() > 2 && m.mismatches().is_empty());

    let out = dir.path().join("rob.csv");
    let o = orbiconv(&["robustness", "--config", path(&cfg), "--weights", path(&run.join("weights")), "--out", path(&out)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let csv = std::fs::read_to_string(&out).unwrap();
    assert!(csv.starts_with("mode,a,trial,err\n"));
    assert_eq!(csv.lines().count(), 1 + 2 * 2 + 2 * 2);
}

#[test]
fn compare_writes_tables_and_chart() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.cfg");
    std::fs::write(&cfg, format!("{TINY}compare.shapes = square,circular\ncompare.kernel_sizes = 3\ncompare.seeds = 0\n")).unwrap();
    let o = orbiconv(&["compare", "--config", path(&cfg), "--out-dir", path(dir.path())]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(std::fs::read_to_string(dir.path().join("compare.csv")).unwrap().lines().count(), 3);
    assert!(std::fs::read_to_string(dir.path().join("compare.svg")).unwrap().contains("<svg"));
    assert_eq!(manifest(&dir.path().join("manifest.json")).outputs.len(), 3);
}

#[test]
fn search_writes_genotypes_and_graphs() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.cfg");
    std::fs::write(
        &cfg,
        "data.kind = planted_circular\ndata.n_per_class = 8\ndata.size = 10\nsearch.epochs = 1\nsearch.batch_size = 8\nsearch.channels = 2\nsearch.cells = n,r\n",
    )
    .unwrap();
    let (g, dot) = (dir.path().join("genotype.json"), dir.path().join("cell.dot"));
    let o = orbiconv(&["search", "--config", path(&cfg), "--out", path(&g), "--dot", path(&dot)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let json: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&g).unwrap()).unwrap();
    assert_eq!(json.as_array().map(Vec::len), Some(2));
    assert_eq!(std::fs::read_to_string(&dot).unwrap().matches("digraph").count(), 2);
}
