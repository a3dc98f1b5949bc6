//! End-to-end acceptance suite. Prints one PASS/FAIL line per criterion
//! and exits non-zero if any criterion fails.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::{Duration, Instant};

use lesionseg::augment::{rcpv, AugmentSpec};
use lesionseg::dataset::{load_samples, Sample};
use lesionseg::ensemble::Postprocess;
use lesionseg::geometry::lesion_geometry;
use lesionseg::gradcheck::run_gradchecks;
use lesionseg::imaging::{BinaryMask, ImageU8};
use lesionseg::metrics::jaccard;
use lesionseg::morphology::erode;
use lesionseg::nn::{load_checkpoint, save_checkpoint, ModelCheckpoint, Network, Tensor4, TrainingMeta};
use lesionseg::rng::{derive_rng, RngState};
use lesionseg::synth::write_dataset;
use lesionseg::train::{evaluate_model, train_samples};
use lesionseg_cli::PipelineConfig;

const GRADCHECK_BUDGET: Duration = Duration::from_secs(60);
const RCPV_RUNS: u64 = 1000;
const RCPV_RADIUS: f64 = 20.0;
const RCPV_MIN_CHANGED_FRACTION: f64 = 0.99;
const RCPV_BUDGET: Duration = Duration::from_secs(10);
const MORPHOLOGY_MASKS: usize = 100;
const OVERFIT_IMAGES: usize = 4;
const OVERFIT_MAX_EPOCHS: usize = 500;
const OVERFIT_EVAL_EVERY: usize = 10;
const OVERFIT_TARGET: f64 = 0.90;
const OVERFIT_BUDGET: Duration = Duration::from_secs(600);
const PIPELINE_TRAIN: usize = 200;
const PIPELINE_VAL: usize = 50;
const PIPELINE_MAX_EPOCHS: usize = 40;
const PIPELINE_TARGET: f64 = 0.85;
const PIPELINE_BUDGET: Duration = Duration::from_secs(30 * 60);
const TRAIN_SYNTH_SEED: &str = "101";
const VAL_SYNTH_SEED: &str = "202";
const ROUNDTRIP_INPUTS: usize = 10;

type Outcome = Result<String, String>;
type Criterion<'a> = (&'static str, Box<dyn Fn() -> Outcome + 'a>);

fn desk_config_path() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/desk.cfg")
}

fn check(cond: bool, msg: impl Into<String>) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn e2s<E: std::fmt::Display>(e: E) -> String {
    e.to_string()
}

fn criterion_gradcheck() -> Outcome {
    let pool = rayon::ThreadPoolBuilder::new().num_threads(1).build().map_err(e2s)?;
    let started = Instant::now();
    let results = pool.install(|| run_gradchecks(0, None)).map_err(e2s)?;
    let elapsed = started.elapsed();
    let failed: Vec<String> = results
        .iter()
        .filter(|r| !r.passed())
        .map(|r| format!("{} ({:.2e} >= {:.0e})", r.name, r.max_rel_error, r.tolerance))
        .collect();
    check(failed.is_empty(), format!("failing checks: {}", failed.join(", ")))?;
    check(elapsed < GRADCHECK_BUDGET, format!("took {elapsed:?}"))?;
    let worst = results
        .iter()
        .filter(|r| r.name != "network")
        .map(|r| r.max_rel_error)
        .fold(0.0, f64::max);
    let net = results.iter().find(|r| r.name == "network").map(|r| r.max_rel_error).unwrap_or(f64::NAN);
    Ok(format!(
        "{} checks, worst layer error {worst:.2e}, network {net:.2e}, {:.1}s",
        results.len(),
        elapsed.as_secs_f64()
    ))
}

fn disk_case(size: usize, radius: f64) -> (ImageU8, BinaryMask) {
    let c = (size / 2) as f64;
    let mask = BinaryMask::from_fn(size, size, |x, y| {
        (x as f64 - c).powi(2) + (y as f64 - c).powi(2) <= radius * radius
    })
    .unwrap();
    let mut img = ImageU8::filled(size, size, 3, 210).unwrap();
    for (x, y) in mask.foreground().collect::<Vec<_>>() {
        img.pixel_mut(x, y).fill(170);
    }
    (img, mask)
}

/// Changed pixel coordinates and their new values.
fn changes(before: &ImageU8, after: &ImageU8) -> Vec<(usize, usize, u8)> {
    let mut out = Vec::new();
    for y in 0..before.height() {
        for x in 0..before.width() {
            let (a, b) = (before.pixel(x, y), after.pixel(x, y));
            for c in 0..a.len() {
                if a[c] != b[c] {
                    out.push((x, y, b[c]));
                }
            }
        }
    }
    out
}

fn criterion_rcpv() -> Outcome {
    let started = Instant::now();
    let (img, mask) = disk_case(81, RCPV_RADIUS);
    let geo = lesion_geometry(&mask).map_err(e2s)?;
    check((geo.inradius - RCPV_RADIUS).abs() <= 1.0, format!("disk in-radius {}", geo.inradius))?;
    let never = AugmentSpec { rcpv_apply_prob: 0.0, ..AugmentSpec::default() };
    let always = AugmentSpec { rcpv_apply_prob: 1.0, ..AugmentSpec::default() };

    let mut q0_changes = 0usize;
    let mut applied_with_change = 0u64;
    let mut out_of_range = 0usize;
    let mut too_far = 0usize;
    let mut max_dist: f64 = 0.0;
    for k in 0..RCPV_RUNS {
        let out = rcpv(&img, &geo, &never, &mut derive_rng(1, 0, k)).map_err(e2s)?;
        q0_changes += changes(&img, &out).len();
        let out = rcpv(&img, &geo, &always, &mut derive_rng(2, 0, k)).map_err(e2s)?;
        let ch = changes(&img, &out);
        if !ch.is_empty() {
            applied_with_change += 1;
        }
        for (x, y, v) in ch {
            if v >= 128 {
                out_of_range += 1;
            }
            let d = ((x as f64 - geo.centroid_x).powi(2) + (y as f64 - geo.centroid_y).powi(2)).sqrt();
            max_dist = max_dist.max(d);
            if d > 2.0 * geo.inradius {
                too_far += 1;
            }
        }
    }

    let dot = BinaryMask::from_fn(31, 31, |x, y| x == 15 && y == 15).map_err(e2s)?;
    let dot_geo = lesion_geometry(&dot).map_err(e2s)?;
    let dot_img = ImageU8::filled(31, 31, 3, 200).map_err(e2s)?;
    let mut dot_changes = 0;
    for k in 0..RCPV_RUNS {
        let out = rcpv(&dot_img, &dot_geo, &always, &mut derive_rng(3, 0, k)).map_err(e2s)?;
        dot_changes += changes(&dot_img, &out).len();
    }
    let elapsed = started.elapsed();

    let frac = applied_with_change as f64 / RCPV_RUNS as f64;
    check(q0_changes == 0, format!("q=0 changed {q0_changes} pixels"))?;
    check(frac >= RCPV_MIN_CHANGED_FRACTION, format!("only {frac} of applications changed a pixel"))?;
    check(out_of_range == 0, format!("{out_of_range} changed values outside [0,128)"))?;
    check(too_far == 0, format!("{too_far} changed pixels beyond 2R (max distance {max_dist:.2})"))?;
    check(dot_geo.inradius == 0.0 && dot_changes == 0, format!("single-pixel lesion changed {dot_changes} values"))?;
    check(elapsed < RCPV_BUDGET, format!("took {elapsed:?}"))?;
    Ok(format!(
        "R={:.2}, {:.1}% applications changed pixels, max distance {max_dist:.2} <= {:.2}, {:.2}s",
        geo.inradius,
        100.0 * frac,
        2.0 * geo.inradius,
        elapsed.as_secs_f64()
    ))
}

/// Direct per-pixel window scan with floor/ceil anchoring.
fn brute_erode(m: &BinaryMask, kw: usize, kh: usize) -> BinaryMask {
    let (w, h) = m.dimensions();
    let (lx, rx) = ((kw as isize - 1) / 2, kw as isize / 2);
    let (ly, ry) = ((kh as isize - 1) / 2, kh as isize / 2);
    BinaryMask::from_fn(w, h, |x, y| {
        (-ly..=ry).all(|dy| {
            (-lx..=rx).all(|dx| {
                let (sx, sy) = (x as isize + dx, y as isize + dy);
                sx >= 0 && sy >= 0 && sx < w as isize && sy < h as isize && m.get(sx as usize, sy as usize)
            })
        })
    })
    .unwrap()
}

fn criterion_morphology() -> Outcome {
    let mut rng = RngState::new(31337);
    let mut compared = 0;
    for i in 0..MORPHOLOGY_MASKS {
        let density = [0.5, 0.85, 0.97][i % 3];
        let m = BinaryMask::from_fn(64, 64, |_, _| rng.bernoulli(density)).map_err(e2s)?;
        for k in [1, 3, 10] {
            let got = erode(&m, k, k).map_err(e2s)?;
            check(got == brute_erode(&m, k, k), format!("mismatch on mask {i}, kernel {k}x{k}"))?;
            compared += 1;
        }
    }
    let block = BinaryMask::from_fn(40, 40, |x, y| (10..22).contains(&x) && (10..22).contains(&y)).map_err(e2s)?;
    let eroded = erode(&block, 10, 10).map_err(e2s)?;
    let expected = BinaryMask::from_fn(40, 40, |x, y| (14..17).contains(&x) && (14..17).contains(&y)).map_err(e2s)?;
    check(eroded == expected, "12x12 block did not erode to the 3x3 block at offset (4,4)")?;
    Ok(format!("{compared} mask/kernel pairs bit-exact, 12x12 -> 3x3 block exact"))
}

fn criterion_metric() -> Outcome {
    let row = |bits: &[u8]| BinaryMask::new(bits.len(), 1, bits.to_vec()).unwrap();
    let a = row(&[1, 1, 1, 1, 1, 1, 0, 0, 0, 0]);
    let b = row(&[0, 0, 0, 0, 1, 1, 1, 1, 0, 0]);
    let c = row(&[0, 0, 0, 0, 0, 0, 0, 0, 1, 1]);
    let z = row(&[0; 10]);
    let j = |x: &BinaryMask, y: &BinaryMask| jaccard(x, y).unwrap();
    check(j(&a, &a) == 1.0, "identical masks")?;
    check(j(&a, &c) == 0.0, "disjoint masks")?;
    check(j(&a, &b) == 0.25, format!("6/4/2 case gave {}", j(&a, &b)))?;
    check(j(&z, &z) == 1.0, "both empty")?;
    Ok("identical 1.0, disjoint 0.0, 6/4/2 -> 0.25, both empty 1.0".into())
}

fn criterion_overfit(cfg: &PipelineConfig, scratch: &Path) -> Outcome {
    let started = Instant::now();
    let dir = scratch.join("overfit");
    let manifest = write_dataset(&dir, OVERFIT_IMAGES, &cfg.synth_spec(), 7).map_err(e2s)?;
    let samples: Vec<Sample> = load_samples(&manifest).map_err(e2s)?;
    let [w, h] = cfg.ensemble.members[0].input_size;
    let mut tc = cfg.train_config((w, h));
    tc.epochs = OVERFIT_MAX_EPOCHS;
    tc.batch_size = OVERFIT_IMAGES;
    let mut reached: Option<(usize, f64)> = None;
    let mut best = 0.0f64;
    let stop = "target reached";
    let result = train_samples(&samples, &tc, &cfg.network_config(), |r, snap| {
        if r.epoch % OVERFIT_EVAL_EVERY == 0 {
            let score = evaluate_model(snap, &samples, 0.5, &Postprocess::none())?.mean_jaccard;
            best = best.max(score);
            if score >= OVERFIT_TARGET {
                reached = Some((r.epoch, score));
                return Err(lesionseg::Error::InvalidArgument(stop.into()));
            }
        }
        Ok(())
    });
    match result {
        Ok(_) => {}
        Err(lesionseg::Error::InvalidArgument(m)) if m == stop => {}
        Err(e) => return Err(e.to_string()),
    }
    let elapsed = started.elapsed();
    let (epoch, score) = reached.ok_or(format!(
        "mean training Jaccard stayed below {OVERFIT_TARGET} for {OVERFIT_MAX_EPOCHS} epochs (best {best:.4})"
    ))?;
    check(elapsed < OVERFIT_BUDGET, format!("took {elapsed:?}"))?;
    Ok(format!(
        "mean training Jaccard {score:.4} at epoch {epoch} ({w}x{h}), {:.1}s",
        elapsed.as_secs_f64()
    ))
}

fn cli(args: &[&str]) -> Result<String, String> {
    let out = Command::new(env!("CARGO_BIN_EXE_lesionseg"))
        .args(args)
        .output()
        .map_err(e2s)?;
    if !out.status.success() {
        return Err(format!(
            "`lesionseg {}` exited with {:?}: {}",
            args.join(" "),
            out.status.code(),
            String::from_utf8_lossy(&out.stderr).trim()
        ));
    }
    Ok(String::from_utf8_lossy(&out.stdout).into_owned())
}

fn p(path: &Path) -> &str {
    path.to_str().expect("UTF-8 temp path")
}

/// Runs synth, train, predict and evaluate into `root` in deterministic mode.
fn pipeline(root: &Path) -> Result<Duration, String> {
    let cfg = desk_config_path();
    let cfg = p(&cfg);
    let started = Instant::now();
    let (train, val, models) = (root.join("train"), root.join("val"), root.join("models"));
    let count = |n: usize| n.to_string();
    cli(&["synth", "--config", cfg, "--out", p(&train), "--count", &count(PIPELINE_TRAIN), "--seed", TRAIN_SYNTH_SEED])?;
    cli(&["synth", "--config", cfg, "--out", p(&val), "--count", &count(PIPELINE_VAL), "--seed", VAL_SYNTH_SEED])?;
    let train_manifest = train.join("manifest.csv");
    let val_manifest = val.join("manifest.csv");
    cli(&["train", "--config", cfg, "--manifest", p(&train_manifest), "--out", p(&models), "--deterministic"])?;
    cli(&["predict", "--config", cfg, "--manifest", p(&val_manifest), "--models", p(&models), "--out", p(&root.join("masks")), "--deterministic"])?;
    cli(&["evaluate", "--config", cfg, "--manifest", p(&val_manifest), "--models", p(&models), "--out", p(&root.join("report")), "--deterministic"])?;
    Ok(started.elapsed())
}

fn criterion_pipeline(cfg: &PipelineConfig, root: &Path) -> Outcome {
    check(cfg.train.epochs <= PIPELINE_MAX_EPOCHS, format!("desk config trains {} epochs", cfg.train.epochs))?;
    check(cfg.postprocess().erosion.is_none(), "desk config must evaluate with erosion disabled")?;
    let elapsed = pipeline(root)?;
    let report = root.join("report");
    let summary = fs::read_to_string(report.join("summary.txt")).map_err(e2s)?;
    let mean: f64 = summary
        .lines()
        .find_map(|l| l.strip_prefix("mean_jaccard="))
        .ok_or("summary has no mean")?
        .parse()
        .map_err(e2s)?;
    check(summary.contains("selection=oracle\n") && summary.contains("erosion=off\n"), "unexpected evaluation settings")?;

    let members = fs::read_to_string(report.join("members.csv")).map_err(e2s)?;
    let mut rows = 0;
    for line in members.lines().skip(1) {
        let cols: Vec<&str> = line.split(',').collect();
        let selected: f64 = cols[2].parse().map_err(e2s)?;
        let each: Vec<f64> = cols[3..].iter().map(|c| c.parse().map_err(e2s)).collect::<Result<_, _>>()?;
        check(each.len() == 3, "expected three members")?;
        check(
            each.iter().all(|&j| selected >= j) && each.contains(&selected),
            format!("selection not dominant for {}", cols[0]),
        )?;
        rows += 1;
    }
    check(rows == PIPELINE_VAL, format!("{rows} evaluated images"))?;
    let member_means: Vec<String> = summary
        .lines()
        .filter(|l| l.contains("_raw_mean_jaccard="))
        .map(|l| {
            let (k, v) = l.split_once('=').unwrap();
            format!("{}={:.4}", k.trim_end_matches("_raw_mean_jaccard"), v.parse::<f64>().unwrap_or(f64::NAN))
        })
        .collect();
    check(mean >= PIPELINE_TARGET, format!("mean validation Jaccard {mean:.4} < {PIPELINE_TARGET}"))?;
    check(elapsed < PIPELINE_BUDGET, format!("took {elapsed:?}"))?;
    Ok(format!(
        "mean validation Jaccard {mean:.4} (members {}), oracle dominance on {rows} images, {:.0}s",
        member_means.join(" "),
        elapsed.as_secs_f64()
    ))
}

fn tree(dir: &Path) -> Result<BTreeMap<String, Vec<u8>>, String> {
    let mut out = BTreeMap::new();
    for entry in fs::read_dir(dir).map_err(e2s)? {
        let entry = entry.map_err(e2s)?;
        let name = entry.file_name().to_string_lossy().into_owned();
        out.insert(name, fs::read(entry.path()).map_err(e2s)?);
    }
    Ok(out)
}

fn criterion_determinism(first: &Path, second: &Path) -> Outcome {
    if !first.join("report/summary.txt").exists() {
        pipeline(first)?;
    }
    pipeline(second)?;
    let mut compared = 0;
    let checkpoints = |dir: &Path| -> Result<BTreeMap<String, Vec<u8>>, String> {
        Ok(tree(dir)?.into_iter().filter(|(k, _)| k.ends_with(".lsn")).collect())
    };
    let pairs = [
        ("checkpoints", checkpoints(&first.join("models"))?, checkpoints(&second.join("models"))?),
        ("masks", tree(&first.join("masks"))?, tree(&second.join("masks"))?),
        ("reports", tree(&first.join("report"))?, tree(&second.join("report"))?),
    ];
    for (what, a, b) in &pairs {
        check(!a.is_empty(), format!("no {what} produced"))?;
        check(a.keys().eq(b.keys()), format!("{what}: different file sets"))?;
        for (name, bytes) in a {
            check(b[name] == *bytes, format!("{what}: {name} differs"))?;
            compared += 1;
        }
    }
    Ok(format!("{compared} files byte-identical across two seeded runs"))
}

fn criterion_roundtrip(cfg: &PipelineConfig, scratch: &Path) -> Outcome {
    let mut rng = RngState::new(8);
    let network = Network::<f32>::new(cfg.network_config(), &mut rng).map_err(e2s)?;
    let ckpt = ModelCheckpoint {
        network,
        meta: TrainingMeta { epoch: 0, seed: 8, input_width: 96, input_height: 64 },
    };
    let path = scratch.join("roundtrip.lsn");
    save_checkpoint(&ckpt, &path).map_err(e2s)?;
    let back = load_checkpoint(&path).map_err(e2s)?;
    for i in 0..ROUNDTRIP_INPUTS {
        let (h, w) = (64 - 4 * (i % 3), 96 - 8 * (i % 4));
        let x = Tensor4::new((1, 3, h, w), (0..3 * h * w).map(|_| rng.next_f64() as f32).collect()).map_err(e2s)?;
        let a = ckpt.network.forward_eval(&x).map_err(e2s)?;
        let b = back.network.forward_eval(&x).map_err(e2s)?;
        let same = a.data().iter().zip(b.data()).all(|(u, v)| u.to_bits() == v.to_bits());
        check(same, format!("input {i} differs after reload"))?;
    }
    Ok(format!("{ROUNDTRIP_INPUTS} random inputs bit-identical after save/load"))
}

fn main() {
    let scratch = tempfile::tempdir().expect("temp dir");
    let cfg = PipelineConfig::load(&desk_config_path()).expect("desk config").config;
    let run1 = scratch.path().join("run1");
    let run2 = scratch.path().join("run2");

    let criteria: Vec<Criterion> = vec![
        ("1 gradient verification", Box::new(criterion_gradcheck)),
        ("2 RCPV fidelity", Box::new(criterion_rcpv)),
        ("3 morphology oracle", Box::new(criterion_morphology)),
        ("4 metric oracle", Box::new(criterion_metric)),
        ("5 overfit check", Box::new(|| criterion_overfit(&cfg, scratch.path()))),
        ("6 desk-scale pipeline", Box::new(|| criterion_pipeline(&cfg, &run1))),
        ("7 determinism", Box::new(|| criterion_determinism(&run1, &run2))),
        ("8 checkpoint round-trip", Box::new(|| criterion_roundtrip(&cfg, scratch.path()))),
    ];
    let mut failures = 0;
    for (name, f) in &criteria {
        match f() {
            Ok(detail) => println!("criterion {name}: PASS ({detail})"),
            Err(why) => {
                failures += 1;
                println!("criterion {name}: FAIL ({why})");
            }
        }
    }
    println!("acceptance: {} of {} criteria passed", criteria.len() - failures, criteria.len());
    if failures > 0 {
        std::process::exit(1);
    }
}
