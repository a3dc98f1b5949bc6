use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use lesionseg::imaging::{load_image, load_mask, to_grayscale3, DEFAULT_MASK_THRESHOLD};
use lesionseg::dataset::Manifest;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_lesionseg"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = run(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

const TINY: &str = r#"
master_seed = 5
[network]
stage_channels = [4, 8]
bottleneck_channels = 8
[train]
epochs = 2
batch_size = 4
[ensemble]
models_dir = "models"
erosion_enabled = false
[[ensemble.members]]
name = "a"
input_size = [32, 24]
[[ensemble.members]]
name = "b"
input_size = [24, 16]
[synth]
count = 6
width = 40
height = 30
"#;

fn setup(dir: &Path, extra: &str) -> PathBuf {
    let cfg = dir.join("run.cfg");
    fs::write(&cfg, format!("{TINY}{extra}")).unwrap();
    cfg
}

fn read_dir_bytes(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut v: Vec<_> = fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let e = e.unwrap();
            (e.file_name().to_string_lossy().into_owned(), fs::read(e.path()).unwrap())
        })
        .collect();
    v.sort();
    v
}

#[test]
fn synth_is_seeded_and_masks_are_large_enough() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = setup(dir.path(), "");
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    ok(&["synth", "--config", s(&cfg), "--out", s(&a)]);
    ok(&["synth", "--config", s(&cfg), "--out", s(&b)]);
    assert_eq!(read_dir_bytes(&a), read_dir_bytes(&b));
    let m = Manifest::load(a.join("manifest.csv")).unwrap();
    assert_eq!(m.len(), 6);
    for e in &m.entries {
        let mask = load_mask(e.mask.as_ref().unwrap(), DEFAULT_MASK_THRESHOLD).unwrap();
        assert!(mask.count() as f64 >= 0.01 * (40 * 30) as f64);
    }
    let c = dir.path().join("c");
    ok(&["synth", "--config", s(&cfg), "--out", s(&c), "--seed", "6"]);
    assert_ne!(read_dir_bytes(&a), read_dir_bytes(&c));

    let empty = dir.path().join("empty");
    ok(&["synth", "--config", s(&cfg), "--out", s(&empty), "--count", "0"]);
    assert_eq!(fs::read_to_string(empty.join("manifest.csv")).unwrap(), "image,mask\n");
}

#[test]
fn augment_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let identity = "[augment]\nrcpv_apply_prob = 0.0\nflip_h_prob = 0.0\nflip_v_prob = 0.0\ncrop_min_fraction = 1.0\n";
    let cfg = setup(dir.path(), identity);
    let data = dir.path().join("data");
    ok(&["synth", "--config", s(&cfg), "--out", s(&data)]);
    let manifest = data.join("manifest.csv");
    let out = dir.path().join("aug");
    ok(&["augment", "--config", s(&cfg), "--manifest", s(&manifest), "--out", s(&out), "--variants", "3"]);
    let m = Manifest::load(&manifest).unwrap();
    for e in &m.entries {
        let gray = to_grayscale3(&load_image(&e.image).unwrap()).unwrap();
        for v in 0..3 {
            let img = load_image(out.join(format!("{}_aug{v:02}.ppm", e.id))).unwrap();
            assert_eq!(img, gray);
            assert!(out.join(format!("{}_aug{v:02}_mask.pgm", e.id)).exists());
            assert!(out.join(format!("{}_aug{v:02}_overlay.ppm", e.id)).exists());
        }
    }
    assert_eq!(fs::read_dir(&out).unwrap().count(), 6 * 3 * 3);

    // RCPV only: every changed pixel holds a fill value below 128
    let cfg = setup(dir.path(), "[augment]\nrcpv_apply_prob = 1.0\nflip_h_prob = 0.0\nflip_v_prob = 0.0\ncrop_min_fraction = 1.0\n");
    let out = dir.path().join("aug_rcpv");
    ok(&["augment", "--config", s(&cfg), "--manifest", s(&manifest), "--out", s(&out), "--variants", "4"]);
    let mut changed = 0;
    for e in &m.entries {
        let gray = to_grayscale3(&load_image(&e.image).unwrap()).unwrap();
        for v in 0..4 {
            let img = load_image(out.join(format!("{}_aug{v:02}.ppm", e.id))).unwrap();
            for (a, b) in img.pixels().iter().zip(gray.pixels()) {
                if a != b {
                    changed += 1;
                    assert!(*a < 128);
                }
            }
        }
    }
    assert!(changed > 0);
}

#[test]
fn augment_requires_masks() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = setup(dir.path(), "");
    let data = dir.path().join("data");
    ok(&["synth", "--config", s(&cfg), "--out", s(&data), "--count", "1"]);
    let manifest = dir.path().join("nomask.csv");
    fs::write(&manifest, "image,mask\ndata/synth_00000.ppm,\n").unwrap();
    let out = run(&["augment", "--config", s(&cfg), "--manifest", s(&manifest), "--out", s(&dir.path().join("x"))]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn png_inputs_are_accepted() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = setup(dir.path(), "");
    let inside = |x: u32, y: u32| (16..48).contains(&x) && (12..36).contains(&y);
    image::RgbImage::from_fn(64, 48, |x, y| {
        if inside(x, y) { image::Rgb([90, 60, 40]) } else { image::Rgb([200, 170, 150]) }
    })
    .save(dir.path().join("a.png"))
    .unwrap();
    image::GrayImage::from_fn(64, 48, |x, y| image::Luma([if inside(x, y) { 255 } else { 0 }]))
        .save(dir.path().join("a_mask.png"))
        .unwrap();
    let manifest = dir.path().join("png.csv");
    fs::write(&manifest, "image,mask\na.png,a_mask.png\n").unwrap();
    let out = dir.path().join("aug");
    ok(&["augment", "--config", s(&cfg), "--manifest", s(&manifest), "--out", s(&out), "--variants", "1"]);
    let mask = load_mask(out.join("a_aug00_mask.pgm"), DEFAULT_MASK_THRESHOLD).unwrap();
    assert!(mask.count() > 0);
}

#[test]
fn train_predict_evaluate_round() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = setup(dir.path(), "");
    let data = dir.path().join("data");
    ok(&["synth", "--config", s(&cfg), "--out", s(&data)]);
    let manifest = data.join("manifest.csv");
    let stdout = ok(&["train", "--config", s(&cfg), "--manifest", s(&manifest), "--deterministic"]);
    assert!(stdout.contains("a epoch 2/2"));
    let models = dir.path().join("models");
    for name in ["a", "b"] {
        let log = fs::read_to_string(models.join(format!("{name}_log.csv"))).unwrap();
        assert_eq!(log.lines().count(), 1 + 2);
        assert!(log.starts_with("epoch,loss,jaccard,seconds\n"));
    }

    let p1 = dir.path().join("p1");
    let p2 = dir.path().join("p2");
    ok(&["predict", "--config", s(&cfg), "--manifest", s(&manifest), "--out", s(&p1)]);
    ok(&["predict", "--config", s(&cfg), "--manifest", s(&manifest), "--out", s(&p2), "--jobs", "2"]);
    assert_eq!(read_dir_bytes(&p1), read_dir_bytes(&p2));
    let m = Manifest::load(&manifest).unwrap();
    for e in &m.entries {
        let img = load_image(&e.image).unwrap();
        let mask = load_mask(p1.join(format!("{}_mask.pgm", e.id)), DEFAULT_MASK_THRESHOLD).unwrap();
        assert_eq!(mask.dimensions(), img.dimensions());
    }

    let ev = dir.path().join("ev");
    let stdout = ok(&["evaluate", "--config", s(&cfg), "--manifest", s(&manifest), "--out", s(&ev)]);
    assert!(stdout.starts_with("mean_jaccard="));
    let csv = fs::read_to_string(ev.join("report.csv")).unwrap();
    let rows: Vec<f64> = csv.lines().skip(1).map(|l| l.split(',').nth(1).unwrap().parse().unwrap()).collect();
    assert_eq!(rows.len(), m.len());
    let summary = fs::read_to_string(ev.join("summary.txt")).unwrap();
    let mean: f64 = summary.lines().next().unwrap().strip_prefix("mean_jaccard=").unwrap().parse().unwrap();
    assert!((mean - rows.iter().sum::<f64>() / rows.len() as f64).abs() < 1e-9);
    assert!(summary.contains("count=6\n"));

    let labels = dir.path().join("ev_labels");
    let stdout = ok(&["evaluate", "--config", s(&cfg), "--manifest", s(&manifest), "--out", s(&labels), "--predictions", s(&data)]);
    assert!(stdout.starts_with("mean_jaccard=1 "));

    // oracle selection without ground truth is refused up front
    let img = m.entries[0].image.clone();
    let out = run(&["predict", "--config", s(&cfg), "--image", s(&img), "--out", s(&dir.path().join("p3"))]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("oracle"));
    let consensus = setup(dir.path(), "");
    let text = fs::read_to_string(&consensus).unwrap().replace("erosion_enabled = false", "erosion_enabled = false\nselection = \"consensus\"");
    fs::write(&consensus, text).unwrap();
    ok(&["predict", "--config", s(&consensus), "--image", s(&img), "--out", s(&dir.path().join("p3"))]);
    assert!(dir.path().join("p3").join(format!("{}_mask.pgm", m.entries[0].id)).exists());
}

#[test]
fn gradcheck_lists_every_check_once() {
    let stdout = ok(&["gradcheck"]);
    for name in lesionseg::gradcheck::GRADCHECK_NAMES {
        let lines = stdout.lines().filter(|l| l.split_whitespace().next() == Some(name)).count();
        assert_eq!(lines, 1, "{name}");
    }
    assert!(!stdout.contains("FAIL"));
    let out = run(&["gradcheck", "--sabotage", "batchnorm"]);
    assert_eq!(out.status.code(), Some(3));
    let text = String::from_utf8_lossy(&out.stdout);
    assert!(text.lines().any(|l| l.starts_with("batchnorm") && l.ends_with("FAIL")));
}

#[test]
fn usage_errors_exit_with_one() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(run(&["train", "--config", "/definitely/missing.cfg", "--manifest", "m.csv"]).status.code(), Some(1));
    assert_eq!(run(&["train"]).status.code(), Some(1));
    assert_eq!(run(&["frobnicate"]).status.code(), Some(1));
    let bad = dir.path().join("bad.cfg");
    fs::write(&bad, "[train]\nepochs = 3\nlearning_rat = 0.1\n").unwrap();
    let out = run(&["synth", "--config", s(&bad), "--out", s(&dir.path().join("o"))]);
    assert_eq!(out.status.code(), Some(1));
    assert!(!dir.path().join("o").exists());
    assert_eq!(run(&["--help"]).status.code(), Some(0));
}

#[test]
fn missing_data_exits_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = setup(dir.path(), "");
    let manifest = dir.path().join("m.csv");
    fs::write(&manifest, "image,mask\nnope.ppm,nope_mask.pgm\n").unwrap();
    let out = run(&["train", "--config", s(&cfg), "--manifest", s(&manifest)]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("nope.ppm"));
}

#[test]
fn shipped_configs_parse() {
    let root = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    for name in ["paper.cfg", "desk.cfg"] {
        let loaded = lesionseg_cli::PipelineConfig::load(&root.join(name)).unwrap();
        assert_eq!(loaded.config.ensemble.members.len(), 3);
    }
    let paper = lesionseg_cli::PipelineConfig::load(&root.join("paper.cfg")).unwrap().config;
    let sizes: Vec<[usize; 2]> = paper.ensemble.members.iter().map(|m| m.input_size).collect();
    assert_eq!(sizes, vec![[500, 350], [450, 300], [400, 250]]);
    assert_eq!(paper.postprocess().erosion, Some((10, 10)));
    let desk = lesionseg_cli::PipelineConfig::load(&root.join("desk.cfg")).unwrap().config;
    let sizes: Vec<[usize; 2]> = desk.ensemble.members.iter().map(|m| m.input_size).collect();
    assert_eq!(sizes, vec![[96, 64], [80, 56], [64, 48]]);
}
