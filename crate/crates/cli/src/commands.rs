use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use lesionseg::augment::augment_sample;
use lesionseg::dataset::{load_samples, Manifest, ManifestEntry, Sample};
use lesionseg::ensemble::{Ensemble, EvalReport, ImageResult, Member, Selection};
use lesionseg::gradcheck::run_gradchecks;
use lesionseg::imaging::{load_image, load_mask, overlay, save_image, save_mask, to_rgb, BinaryMask, DEFAULT_MASK_THRESHOLD};
use lesionseg::metrics::jaccard;
use lesionseg::nn::{load_checkpoint, save_checkpoint};
use lesionseg::rng::derive_rng;
use lesionseg::synth::{mask_stem, write_dataset};
use lesionseg::train::train_samples;
use lesionseg::Error;
use rayon::prelude::*;

use crate::config::{LoadedConfig, PipelineConfig};
use crate::error::CliError;
use crate::{Cli, Command};

/// Prints a line to stdout, ignoring a closed pipe.
macro_rules! say {
    ($($arg:tt)*) => {{
        use std::io::Write as _;
        let _ = writeln!(std::io::stdout().lock(), $($arg)*);
    }};
}

const OVERLAY_COLOR: [u8; 3] = [255, 40, 40];
const OVERLAY_ALPHA: f64 = 0.4;

fn usage(msg: impl Into<String>) -> CliError {
    CliError::Usage(msg.into())
}

fn require<'a>(value: &'a Option<PathBuf>, flag: &str, command: &str) -> Result<&'a Path, CliError> {
    value
        .as_deref()
        .ok_or_else(|| usage(format!("`{command}` requires --{flag}")))
}

fn create_dir(dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(|e| CliError::Core(Error::Io { path: dir.to_path_buf(), source: e }))
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<(), CliError> {
    fs::write(path, contents).map_err(|e| CliError::Core(Error::Io { path: path.to_path_buf(), source: e }))
}

fn load_config(cli: &Cli, command: &str) -> Result<LoadedConfig, CliError> {
    let path = require(&cli.config, "config", command)?;
    let mut loaded = PipelineConfig::load(path)?;
    if let Some(seed) = cli.seed {
        loaded.config.master_seed = seed;
    }
    Ok(loaded)
}

fn thread_count(cli: &Cli) -> Result<usize, CliError> {
    match (cli.deterministic, cli.jobs) {
        (true, _) => Ok(1),
        (false, Some(0)) => Err(usage("--jobs must be at least 1")),
        (false, Some(n)) => Ok(n),
        (false, None) => Ok(0),
    }
}

pub fn execute(cli: &Cli) -> Result<(), CliError> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(thread_count(cli)?)
        .build()
        .map_err(|e| usage(format!("cannot start worker threads: {e}")))?;
    pool.install(|| match &cli.command {
        Command::Synth { count } => synth(cli, *count),
        Command::Augment { variants } => augment(cli, *variants),
        Command::Train { member } => train(cli, member.as_deref()),
        Command::Predict { image, models, overlays } => predict(cli, image.as_deref(), models.as_deref(), *overlays),
        Command::Evaluate { models, predictions } => evaluate(cli, models.as_deref(), predictions.as_deref()),
        Command::Gradcheck { sabotage } => gradcheck(cli, sabotage.as_deref()),
    })
}

fn synth(cli: &Cli, count: Option<usize>) -> Result<(), CliError> {
    let cfg = load_config(cli, "synth")?;
    let out = require(&cli.out, "out", "synth")?;
    let count = count.unwrap_or(cfg.config.synth.count);
    let manifest = write_dataset(out, count, &cfg.config.synth_spec(), cfg.config.master_seed)?;
    say!("wrote {} samples and {}", manifest.len(), out.join("manifest.csv").display());
    Ok(())
}

fn load_manifest(cli: &Cli, command: &str) -> Result<Manifest, CliError> {
    Ok(Manifest::load(require(&cli.manifest, "manifest", command)?)?)
}

fn require_masks(manifest: &Manifest, why: &str) -> Result<(), CliError> {
    match manifest.entries.iter().find(|e| e.mask.is_none()) {
        Some(e) => Err(usage(format!("{why}, but {} has no mask in the manifest", e.image.display()))),
        None => Ok(()),
    }
}

fn augment(cli: &Cli, variants: usize) -> Result<(), CliError> {
    let cfg = load_config(cli, "augment")?;
    let manifest = load_manifest(cli, "augment")?;
    require_masks(&manifest, "augmentation needs ground-truth masks")?;
    let out = require(&cli.out, "out", "augment")?;
    create_dir(out)?;
    let spec = cfg.config.augment_spec();
    spec.validate()?;
    let samples = load_samples(&manifest)?;
    let seed = cfg.config.master_seed;
    samples
        .par_iter()
        .enumerate()
        .try_for_each(|(i, s)| -> Result<(), CliError> {
            for v in 0..variants {
                let (img, mask) = augment_sample(&s.image, &s.mask, &spec, &mut derive_rng(seed, v as u64, i as u64))?;
                let stem = format!("{}_aug{v:02}", s.id);
                save_image(&img, out.join(format!("{stem}.ppm")))?;
                save_mask(&mask, out.join(format!("{}.pgm", mask_stem(&stem))))?;
                let preview = overlay(&img, &mask, OVERLAY_COLOR, OVERLAY_ALPHA)?;
                save_image(&preview, out.join(format!("{stem}_overlay.ppm")))?;
            }
            Ok(())
        })?;
    say!("wrote {} variants for each of {} images to {}", variants, samples.len(), out.display());
    Ok(())
}

fn train(cli: &Cli, only: Option<&str>) -> Result<(), CliError> {
    let cfg = load_config(cli, "train")?;
    let manifest = load_manifest(cli, "train")?;
    if manifest.is_empty() {
        return Err(usage("training manifest is empty"));
    }
    require_masks(&manifest, "training needs ground-truth masks")?;
    let out = cli.out.clone().unwrap_or_else(|| cfg.models_dir());
    let c = &cfg.config;
    let members: Vec<(usize, _)> = match only {
        None => c.ensemble.members.iter().enumerate().collect(),
        Some(sel) => {
            let found = c
                .ensemble
                .members
                .iter()
                .enumerate()
                .find(|(i, m)| m.name == sel || sel.parse::<usize>().ok() == Some(*i));
            vec![found.ok_or_else(|| usage(format!("no ensemble member {sel:?}")))?]
        }
    };
    let net_cfg = c.network_config();
    let samples = load_samples(&manifest)?;
    create_dir(&out)?;
    for (index, member) in members {
        let [w, h] = member.input_size;
        let mut tc = c.train_config((w, h));
        tc.master_seed = c.master_seed.wrapping_add(index as u64);
        let every = c.train.checkpoint_every;
        let epochs = tc.epochs;
        let name = &member.name;
        say!("training {name} at {w}x{h} on {} images for {epochs} epochs", samples.len());
        let (ckpt, log) = train_samples(&samples, &tc, &net_cfg, |r, snapshot| {
            say!(
                "{name} epoch {}/{epochs} loss={:.5} jaccard={:.4} ({:.1}s)",
                r.epoch, r.loss, r.jaccard, r.seconds
            );
            if every > 0 && r.epoch % every == 0 && r.epoch < epochs {
                save_checkpoint(snapshot, out.join(format!("{name}_epoch{:04}.lsn", r.epoch)))?;
            }
            Ok(())
        })?;
        let path = out.join(format!("{name}.lsn"));
        save_checkpoint(&ckpt, &path)?;
        log.write_csv(out.join(format!("{name}_log.csv")))?;
        say!("saved {}", path.display());
    }
    Ok(())
}

fn load_ensemble(cfg: &LoadedConfig, models: Option<&Path>) -> Result<Ensemble, CliError> {
    let dir = models.map(Path::to_path_buf).unwrap_or_else(|| cfg.models_dir());
    let c = &cfg.config;
    let members = c
        .ensemble
        .members
        .iter()
        .map(|m| {
            let path = dir.join(format!("{}.lsn", m.name));
            let ckpt = load_checkpoint(&path)?;
            let size = (m.input_size[0], m.input_size[1]);
            if (ckpt.meta.input_width, ckpt.meta.input_height) != size {
                return Err(usage(format!(
                    "{} was trained at {}x{} but member {} is configured for {}x{}",
                    path.display(),
                    ckpt.meta.input_width,
                    ckpt.meta.input_height,
                    m.name,
                    size.0,
                    size.1
                )));
            }
            Ok(Member { network: ckpt.network, input_size: size })
        })
        .collect::<Result<Vec<_>, CliError>>()?;
    Ok(Ensemble {
        members,
        selection: c.selection(),
        threshold: c.ensemble.threshold,
        postprocess: c.postprocess(),
    })
}

fn predict(cli: &Cli, image: Option<&Path>, models: Option<&Path>, overlays: bool) -> Result<(), CliError> {
    let cfg = load_config(cli, "predict")?;
    let manifest = match (image, &cli.manifest) {
        (Some(_), Some(_)) => return Err(usage("give either --image or --manifest, not both")),
        (Some(img), None) => Manifest { entries: vec![ManifestEntry::new(img, None)] },
        (None, Some(m)) => Manifest::load(m)?,
        (None, None) => return Err(usage("`predict` requires --image or --manifest")),
    };
    if cfg.config.selection() == Selection::Oracle {
        require_masks(&manifest, "oracle selection needs ground truth")?;
    }
    let out = require(&cli.out, "out", "predict")?;
    let ensemble = load_ensemble(&cfg, models)?;
    create_dir(out)?;
    let selected = manifest
        .entries
        .par_iter()
        .map(|e| -> Result<usize, CliError> {
            let img = to_rgb(&load_image(&e.image).map_err(|err| sample_error(&e.image, err))?);
            let truth = match &e.mask {
                Some(p) if ensemble.selection == Selection::Oracle => {
                    Some(load_mask(p, DEFAULT_MASK_THRESHOLD).map_err(|err| sample_error(p, err))?)
                }
                _ => None,
            };
            let pred = ensemble.predict(&img, truth.as_ref())?;
            save_mask(&pred.mask, out.join(format!("{}.pgm", mask_stem(&e.id))))?;
            if overlays {
                let preview = overlay(&img, &pred.mask, OVERLAY_COLOR, OVERLAY_ALPHA)?;
                save_image(&preview, out.join(format!("{}_overlay.ppm", e.id)))?;
            }
            Ok(pred.selected)
        })
        .collect::<Result<Vec<_>, _>>()?;
    for (e, s) in manifest.entries.iter().zip(selected) {
        say!("{} member={s}", e.id);
    }
    Ok(())
}

fn sample_error(path: &Path, e: Error) -> CliError {
    CliError::Core(Error::Sample { path: path.to_path_buf(), source: Box::new(e) })
}

fn config_echo(c: &PipelineConfig, predictions: bool) -> Vec<(String, String)> {
    let mut echo = Vec::new();
    if predictions {
        echo.push(("source".to_string(), "predictions".to_string()));
        return echo;
    }
    let selection = match c.selection() {
        Selection::Oracle => "oracle".to_string(),
        Selection::Consensus => "consensus".to_string(),
        Selection::Single(i) => format!("single:{i}"),
    };
    let kernel = |k: Option<(usize, usize)>| k.map_or("off".to_string(), |(w, h)| format!("{w}x{h}"));
    let post = c.postprocess();
    echo.push(("selection".into(), selection));
    echo.push(("threshold".into(), c.ensemble.threshold.to_string()));
    echo.push(("erosion".into(), kernel(post.erosion)));
    echo.push(("closing".into(), kernel(post.closing)));
    for (i, m) in c.ensemble.members.iter().enumerate() {
        echo.push((format!("member{i}"), format!("{} {}x{}", m.name, m.input_size[0], m.input_size[1])));
    }
    echo
}

fn members_csv(report: &EvalReport) -> String {
    let members = report.images.first().map_or(0, |r| r.member_jaccards.len());
    let mut s = String::from("id,selected,selected_raw_jaccard");
    for m in 0..members {
        let _ = write!(s, ",member{m}");
    }
    s.push('\n');
    for r in &report.images {
        let raw = r.member_jaccards.get(r.member).copied().unwrap_or(f64::NAN);
        let _ = write!(s, "{},{},{}", r.id, r.member, raw);
        for j in &r.member_jaccards {
            let _ = write!(s, ",{j}");
        }
        s.push('\n');
    }
    s
}

fn score_predictions(samples: &[Sample], dir: &Path) -> Result<EvalReport, CliError> {
    let images = samples
        .par_iter()
        .map(|s| -> Result<ImageResult, CliError> {
            let path = dir.join(format!("{}.pgm", mask_stem(&s.id)));
            let pred: BinaryMask = load_mask(&path, DEFAULT_MASK_THRESHOLD).map_err(|e| sample_error(&path, e))?;
            let j = jaccard(&pred, &s.mask).map_err(|e| sample_error(&path, e))?;
            Ok(ImageResult { id: s.id.clone(), jaccard: j, member: 0, member_jaccards: vec![j] })
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok(EvalReport::new(images))
}

fn evaluate(cli: &Cli, models: Option<&Path>, predictions: Option<&Path>) -> Result<(), CliError> {
    let cfg = load_config(cli, "evaluate")?;
    let manifest = load_manifest(cli, "evaluate")?;
    if manifest.is_empty() {
        return Err(usage("evaluation manifest is empty"));
    }
    require_masks(&manifest, "evaluation needs ground truth")?;
    let out = require(&cli.out, "out", "evaluate")?;
    let samples = load_samples(&manifest)?;
    let report = match predictions {
        Some(dir) => score_predictions(&samples, dir)?,
        None => load_ensemble(&cfg, models)?.evaluate(&samples)?,
    };
    create_dir(out)?;
    report.write(&out.join("report.csv"), &out.join("summary.txt"), &config_echo(&cfg.config, predictions.is_some()))?;
    write_file(&out.join("members.csv"), members_csv(&report))?;
    say!("mean_jaccard={} count={}", report.mean_jaccard, report.count());
    Ok(())
}

fn gradcheck(cli: &Cli, sabotage: Option<&str>) -> Result<(), CliError> {
    let seed = cli.seed.unwrap_or(0);
    let results = run_gradchecks(seed, sabotage)?;
    say!("{:<20} {:>14} {:>10}  result", "check", "max_rel_error", "tolerance");
    let mut failed = Vec::new();
    for r in &results {
        let status = if r.passed() { "PASS" } else { "FAIL" };
        say!("{:<20} {:>14.3e} {:>10.0e}  {status}", r.name, r.max_rel_error, r.tolerance);
        if !r.passed() {
            failed.push(r.name);
        }
    }
    if failed.is_empty() {
        Ok(())
    } else {
        Err(CliError::Gradcheck(failed.join(", ")))
    }
}
