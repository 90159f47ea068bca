use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use dbfuse::data::{self, Role};
use dbfuse::model::{forward_reconstruct, ModelWeights};
use dbfuse::{Shape, Tensor};
use tempfile::TempDir;

fn dbfuse(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dbfuse"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = dbfuse(args);
    assert!(
        out.status.success(),
        "dbfuse {args:?} failed:\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn fails(args: &[&str]) -> String {
    let out = dbfuse(args);
    assert!(!out.status.success(), "dbfuse {args:?} should fail");
    String::from_utf8(out.stderr).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn pattern(h: usize, w: usize, seed: usize) -> Tensor<f32> {
    Tensor::from_fn(Shape::new(1, 1, h, w), |_, _, y, x| {
        ((x * (3 + seed) + y * 5 + (x * y) % (7 + seed)) % 256) as f32 / 255.0
    })
}

fn write_image(dir: &Path, name: &str, t: &Tensor<f32>) -> PathBuf {
    let p = dir.join(name);
    data::write_png8(&p, t).unwrap();
    p
}

/// A manifest with one train pair and one test pair of the given size.
fn manifest(dir: &Path, h: usize, w: usize) -> PathBuf {
    write_image(dir, "ir.png", &pattern(h, w, 0));
    write_image(dir, "vis.png", &pattern(h, w, 1));
    let p = dir.join("manifest.tsv");
    fs::write(
        &p,
        "# role\tir\tvis\ntrain\tir.png\tvis.png\ntest\tir.png\tvis.png\n",
    )
    .unwrap();
    p
}

fn weights(dir: &Path) -> PathBuf {
    let p = dir.join("w.dbfw");
    ModelWeights::<f32>::init(3).save(&p).unwrap();
    p
}

#[test]
fn prep_counts_tiles() {
    let dir = TempDir::new().unwrap();
    let m = manifest(dir.path(), 270, 360);
    let out = dir.path().join("tiles");
    let stdout = ok(&["prep", "--manifest", s(&m), "--out", s(&out)]);
    // 11 x 17 positions, two sources, each also mirrored.
    assert!(
        stdout.contains("wrote 748 tiles from 1 training pairs"),
        "{stdout}"
    );
    assert_eq!(data::load_tile_dir(&out).unwrap().len(), 748);
    let index = fs::read_to_string(out.join("index.tsv")).unwrap();
    assert_eq!(index.lines().count(), 749);

    let plain = dir.path().join("plain");
    let stdout = ok(&[
        "prep",
        "--manifest",
        s(&m),
        "--out",
        s(&plain),
        "--no-mirror",
    ]);
    assert!(stdout.contains("wrote 374 tiles"), "{stdout}");
}

#[test]
fn prep_rejects_empty_manifest() {
    let dir = TempDir::new().unwrap();
    let m = dir.path().join("empty.tsv");
    fs::write(&m, "# nothing\n").unwrap();
    let err = fails(&[
        "prep",
        "--manifest",
        s(&m),
        "--out",
        s(&dir.path().join("t")),
    ]);
    assert!(err.contains("no image pairs"), "{err}");
}

#[test]
fn fuse_of_identical_sources_is_the_reconstruction() {
    let dir = TempDir::new().unwrap();
    let img = write_image(dir.path(), "a.png", &pattern(48, 64, 2));
    let w = weights(dir.path());
    let out = dir.path().join("f.png");
    ok(&[
        "fuse",
        "--ir",
        s(&img),
        "--vis",
        s(&img),
        "--weights",
        s(&w),
        "--out",
        s(&out),
    ]);

    let input = data::load_grayscale(&img, Role::Test).unwrap().pixels;
    let recon = forward_reconstruct(&input, &ModelWeights::load(&w).unwrap()).unwrap();
    let fused = data::load_grayscale(&out, Role::Test).unwrap().pixels;
    assert_eq!(fused.shape(), input.shape());
    for (&f, &r) in fused.data().iter().zip(recon.data()) {
        let (f, r) = (data::quantize_u8(f) as i32, data::quantize_u8(r) as i32);
        assert!((f - r).abs() <= 1, "{f} vs {r}");
    }
}

#[test]
fn fuse_keeps_sizes_that_need_padding() {
    let dir = TempDir::new().unwrap();
    let ir = write_image(dir.path(), "ir.png", &pattern(450, 500, 0));
    let vis = write_image(dir.path(), "vis.png", &pattern(450, 500, 1));
    let w = weights(dir.path());
    let out = dir.path().join("f.png");
    let stdout = ok(&[
        "fuse",
        "--ir",
        s(&ir),
        "--vis",
        s(&vis),
        "--weights",
        s(&w),
        "--out",
        s(&out),
        "--strategy",
        "addition",
    ]);
    assert!(stdout.contains("450x500"), "{stdout}");
    let fused = data::load_grayscale(&out, Role::Test).unwrap().pixels;
    assert_eq!((fused.shape().h, fused.shape().w), (450, 500));
}

#[test]
fn fuse_diagnostics() {
    let dir = TempDir::new().unwrap();
    let a = write_image(dir.path(), "a.png", &pattern(16, 16, 0));
    let b = write_image(dir.path(), "b.png", &pattern(16, 24, 0));
    let w = weights(dir.path());
    let out = dir.path().join("f.png");

    let bad = dir.path().join("bad.dbfw");
    fs::write(&bad, b"not weights at all").unwrap();
    let err = fails(&[
        "fuse",
        "--ir",
        s(&a),
        "--vis",
        s(&a),
        "--weights",
        s(&bad),
        "--out",
        s(&out),
    ]);
    assert!(err.contains("bad magic"), "{err}");

    let err = fails(&[
        "fuse",
        "--ir",
        s(&a),
        "--vis",
        s(&b),
        "--weights",
        s(&w),
        "--out",
        s(&out),
    ]);
    assert!(err.contains("size mismatch"), "{err}");

    let err = fails(&[
        "fuse",
        "--ir",
        s(&a),
        "--vis",
        s(&a),
        "--weights",
        s(&w),
        "--out",
        s(&out),
        "--strategy",
        "max",
    ]);
    assert!(err.contains("invalid value 'max'"), "{err}");
    assert!(!out.exists());
}

#[test]
fn eval_of_identical_triple() {
    let dir = TempDir::new().unwrap();
    let a = write_image(dir.path(), "a.png", &pattern(32, 32, 4));
    let stdout = ok(&[
        "eval",
        "--fused",
        s(&a),
        "--ir",
        s(&a),
        "--vis",
        s(&a),
        "--format",
        "json",
    ]);
    let rows: serde_json::Value = serde_json::from_str(&stdout).unwrap();
    let row = &rows[0];
    assert!((row["ssim"].as_f64().unwrap() - 1.0).abs() < 1e-9, "{row}");
    assert_eq!(row["nabf"].as_f64().unwrap(), 0.0);
}

#[test]
fn eval_directory_mode_adds_a_mean_row() {
    let dir = TempDir::new().unwrap();
    let names = ["x1.png", "x2.png", "x3.png"];
    for sub in ["fused", "ir", "vis"] {
        fs::create_dir(dir.path().join(sub)).unwrap();
        for (i, n) in names.iter().enumerate() {
            write_image(&dir.path().join(sub), n, &pattern(20, 20, i + sub.len()));
        }
    }
    let report = dir.path().join("report.csv");
    ok(&[
        "eval",
        "--fused",
        s(&dir.path().join("fused")),
        "--ir",
        s(&dir.path().join("ir")),
        "--vis",
        s(&dir.path().join("vis")),
        "--out",
        s(&report),
    ]);
    let text = fs::read_to_string(&report).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), 1 + names.len() + 1);
    assert!(lines[0].starts_with("image,ei,sf,en,"), "{}", lines[0]);
    assert!(lines.last().unwrap().starts_with("mean,"));
}

#[test]
fn eval_rejects_unknown_format() {
    let err = fails(&[
        "eval", "--fused", "a", "--ir", "b", "--vis", "c", "--format", "xml",
    ]);
    assert!(err.contains("invalid value 'xml'"), "{err}");
}

#[test]
fn training_is_reproducible() {
    let dir = TempDir::new().unwrap();
    let m = manifest(dir.path(), 32, 32);
    let tiles = dir.path().join("tiles");
    ok(&[
        "prep",
        "--manifest",
        s(&m),
        "--out",
        s(&tiles),
        "--size",
        "16",
        "--stride",
        "16",
    ]);

    let run = |name: &str| {
        let ck = dir.path().join(name);
        let stdout = ok(&[
            "train",
            "--data-dir",
            s(&tiles),
            "--checkpoint-dir",
            s(&ck),
            "--epochs",
            "2",
            "--batch",
            "8",
            "--seed",
            "5",
        ]);
        assert!(stdout.contains("epoch 2/2"), "{stdout}");
        (fs::read(ck.join("final.dbfw")).unwrap(), ck)
    };
    let (a, ck) = run("a");
    let (b, _) = run("b");
    assert_eq!(a, b);
    assert!(ck.join("train_log.csv").is_file());
    assert!(ck.join("config.toml").is_file());
}

#[test]
fn training_needs_its_data_directory() {
    let dir = TempDir::new().unwrap();
    let err = fails(&[
        "train",
        "--data-dir",
        s(&dir.path().join("missing")),
        "--checkpoint-dir",
        s(&dir.path().join("ck")),
    ]);
    assert!(err.contains("does not exist"), "{err}");
}

#[test]
fn config_file_fills_in_options() {
    let dir = TempDir::new().unwrap();
    let a = write_image(dir.path(), "a.png", &pattern(16, 16, 0));
    let cfg = dir.path().join("run.toml");
    fs::write(
        &cfg,
        "[eval]\nfused = \"a.png\"\nir = \"a.png\"\nvis = \"a.png\"\nformat = \"json\"\n",
    )
    .unwrap();
    let out = dbfuse(&["eval", "--config", s(&cfg)]);
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let echo = String::from_utf8(out.stderr).unwrap();
    assert!(
        echo.contains("# resolved config") && echo.contains(s(&a)),
        "{echo}"
    );
    assert!(String::from_utf8(out.stdout)
        .unwrap()
        .trim_start()
        .starts_with('['));
}
