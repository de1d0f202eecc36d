//! Command implementations behind the `hyperdit` binary.
//!
//! Each command resolves a [`RunConfig`], does its work through
//! `hyperdit-core`, and writes artifacts plus the resolved `config.toml`
//! under the run directory:
//!
//! ```text
//! <run>/config.toml, train_log.tsv, checkpoints/   train
//! <run>/data/{train,reference}/                    gen-data
//! <run>/samples/                                   sample
//! <run>/eval/metrics.tsv                           eval
//! <run>/sweep/sweep.tsv                            sweep
//! <run>/rope/rope.tsv                              inspect-rope
//! ```

use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{bail, ensure, Context, Result};
use hyperdit_core::checkpoint::{load_checkpoint_for, save_checkpoint};
use hyperdit_core::data::{generate_synthetic_dataset, Dataset, SyntheticSpec, NUM_CLASSES};
use hyperdit_core::eval::{
    cfg_sweep, frechet_distance, generate_samples, sweep_tsv, NearestCentroid, SweepRow, SweepSetup, ToyFidExtractor,
};
use hyperdit_core::sa_rope::{compute_base_patch, unified_index};
use hyperdit_core::trainer::{dataset_features, TrainState, Trainer};
use hyperdit_core::vfm::load_features;
use hyperdit_core::{HyperDit, ImageTensor, RunConfig};

pub const CONFIG_FILE: &str = "config.toml";
pub const TRAIN_LOG: &str = "train_log.tsv";
pub const LATEST_CHECKPOINT: &str = "latest.ckpt";

/// Base config: `explicit` file, else `<run_dir>/config.toml` if present, else defaults.
/// `key=value` overrides are applied on top and the result is validated.
pub fn resolve_config(explicit: Option<&Path>, run_dir: Option<&Path>, overrides: &[String]) -> Result<RunConfig> {
    let implicit = run_dir.map(|d| d.join(CONFIG_FILE)).filter(|p| p.is_file());
    let mut config = match explicit.map(Path::to_path_buf).or(implicit) {
        Some(path) => {
            let text = fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
            toml::from_str(&text).with_context(|| format!("parsing {}", path.display()))?
        }
        None => RunConfig::default(),
    };
    for o in overrides {
        config.apply_override(o)?;
    }
    config.validate()?;
    Ok(config)
}

/// Checks the procedural dataset can feed this model.
pub fn check_data_compat(config: &RunConfig) -> Result<()> {
    let m = &config.model;
    ensure!(
        m.image_height == m.image_width,
        "model.image_height/model.image_width: toy data is square, got {}x{}",
        m.image_height,
        m.image_width
    );
    ensure!(m.channels == 3, "model.channels: toy data is RGB, got {}", m.channels);
    ensure!(
        m.num_classes >= NUM_CLASSES,
        "model.num_classes: toy data has {NUM_CLASSES} classes, got {}",
        m.num_classes
    );
    Ok(())
}

pub fn train_set(config: &RunConfig) -> Dataset {
    generate_synthetic_dataset(&SyntheticSpec {
        size: config.model.image_height,
        count: config.data.train_size,
        seed: config.data.seed,
    })
}

/// Held-out images from the next seed, used as the FID reference.
pub fn reference_set(config: &RunConfig) -> Dataset {
    generate_synthetic_dataset(&SyntheticSpec {
        size: config.model.image_height,
        count: config.data.reference_size,
        seed: config.data.seed + 1,
    })
}

pub fn write_config(dir: &Path, config: &RunConfig) -> Result<PathBuf> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let path = dir.join(CONFIG_FILE);
    fs::write(&path, config.to_toml()?).with_context(|| format!("writing {}", path.display()))?;
    Ok(path)
}

/// Maps `[-1, 1]` to 8-bit with clamping; 1 channel gives grayscale, 3 give RGB.
pub fn to_8bit(img: &ImageTensor<f32>) -> Result<image::DynamicImage> {
    let (c, h, w) = img.dims();
    let q = |v: f32| ((v.clamp(-1.0, 1.0) + 1.0) * 127.5).round() as u8;
    let data = img.data();
    match c {
        1 => Ok(image::DynamicImage::ImageLuma8(image::GrayImage::from_fn(w as u32, h as u32, |x, y| {
            image::Luma([q(data[[0, y as usize, x as usize]])])
        }))),
        3 => Ok(image::DynamicImage::ImageRgb8(image::RgbImage::from_fn(w as u32, h as u32, |x, y| {
            image::Rgb(std::array::from_fn(|k| q(data[[k, y as usize, x as usize]])))
        }))),
        _ => bail!("cannot rasterize {c}-channel image"),
    }
}

pub fn save_png(img: &ImageTensor<f32>, path: &Path) -> Result<()> {
    to_8bit(img)?.save(path).with_context(|| format!("writing {}", path.display()))
}

fn write_split(dir: &Path, dataset: &Dataset) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut index = String::from("id\tlabel\tfile\n");
    for item in &dataset.items {
        let file = format!("{}.png", item.id);
        save_png(&item.image, &dir.join(&file))?;
        writeln!(index, "{}\t{}\t{}", item.id, item.label, file)?;
    }
    fs::write(dir.join("labels.tsv"), index)?;
    Ok(())
}

/// Renders the training and reference splits as PNGs with a label table each.
pub fn cmd_gen_data(config: &RunConfig, run_dir: &Path) -> Result<PathBuf> {
    check_data_compat(config)?;
    let out = run_dir.join("data");
    write_config(&out, config)?;
    write_split(&out.join("train"), &train_set(config))?;
    write_split(&out.join("reference"), &reference_set(config))?;
    Ok(out)
}

pub struct TrainOutcome {
    pub step: u64,
    pub checkpoint: PathBuf,
    pub last_loss: Option<f64>,
}

/// Trains until the configured step budget, logging and checkpointing under `run_dir`.
/// With `resume`, continues from `checkpoints/latest.ckpt`.
pub fn cmd_train(
    config: &RunConfig,
    run_dir: &Path,
    resume: bool,
    mut progress: impl FnMut(&str),
) -> Result<TrainOutcome> {
    check_data_compat(config)?;
    let ckpt_dir = run_dir.join("checkpoints");
    let latest = ckpt_dir.join(LATEST_CHECKPOINT);
    if !resume && latest.exists() {
        bail!("{} already holds a checkpoint; pass --resume to continue it", run_dir.display());
    }
    fs::create_dir_all(&ckpt_dir)?;
    write_config(run_dir, config)?;

    let dataset = train_set(config);
    let file = match &config.paths.features {
        Some(p) => Some(load_features(p).with_context(|| format!("paths.features: {}", p.display()))?),
        None => None,
    };
    let features = dataset_features(config, &dataset, file.as_ref())?;
    let state = if resume {
        let (_, state) = load_checkpoint_for(&latest, &config.model)
            .with_context(|| format!("resuming from {}", latest.display()))?;
        state
    } else {
        TrainState::new(&config.model, config.train.seed)?
    };
    let mut trainer = Trainer::resume(config.clone(), &dataset, features, state)?;

    let log_path = run_dir.join(TRAIN_LOG);
    let mut log = if resume && log_path.exists() {
        fs::OpenOptions::new().append(true).open(&log_path)?
    } else {
        let mut log = fs::File::create(&log_path)?;
        writeln!(log, "step\tlr\ttotal\tfm\tfreq\talign\tgrad_norm")?;
        log
    };

    let total = trainer.total_steps();
    let log_every = config.train.log_every.max(1);
    let ckpt_every = config.train.checkpoint_every;
    let mut window = (0.0, 0u64);
    let mut last_loss = None;
    trainer.run_until(total, |tr, r| {
        window.0 += r.total;
        window.1 += 1;
        last_loss = Some(r.total);
        if r.step % log_every == 0 || r.step == total {
            let l = &r.losses;
            writeln!(
                log,
                "{}\t{:e}\t{:.6}\t{:.6}\t{:.6}\t{:.6}\t{:.6}",
                r.step, r.lr, r.total, l.fm, l.freq, l.align, r.grad_norm
            )?;
            progress(&format!("step {}/{} loss {:.4}", r.step, total, window.0 / window.1 as f64));
            window = (0.0, 0);
        }
        if ckpt_every > 0 && r.step % ckpt_every == 0 {
            save_checkpoint(&tr.config, &tr.state, ckpt_dir.join(format!("step_{:08}.ckpt", r.step)))?;
        }
        Ok(())
    })?;
    save_checkpoint(config, &trainer.state, &latest)?;
    Ok(TrainOutcome { step: trainer.state.step, checkpoint: latest, last_loss })
}

/// EMA (or raw) weights from `paths.checkpoint`, defaulting to the run's latest checkpoint.
pub fn load_model(config: &RunConfig, run_dir: &Path, raw: bool) -> Result<HyperDit<f32>> {
    let path = config.paths.checkpoint.clone().unwrap_or_else(|| run_dir.join("checkpoints").join(LATEST_CHECKPOINT));
    let (_, state) =
        load_checkpoint_for(&path, &config.model).with_context(|| format!("loading {}", path.display()))?;
    Ok(if raw { state.params } else { state.ema })
}

/// Writes `count` samples as PNGs; labels cycle over classes unless `class` is given.
pub fn cmd_sample(
    config: &RunConfig,
    run_dir: &Path,
    count: usize,
    class: Option<usize>,
    raw: bool,
) -> Result<PathBuf> {
    let model = load_model(config, run_dir, raw)?;
    let classes = config.model.num_classes;
    if let Some(c) = class {
        ensure!(c < classes, "--class {c} is out of range for model.num_classes = {classes}");
    }
    let labels: Vec<usize> = (0..count).map(|i| class.unwrap_or(i % classes)).collect();
    let samples = generate_samples(&model, &labels, &config.cfg, &config.sampler, config.eval.sample_seed)?;
    let out = run_dir.join("samples");
    write_config(&out, config)?;
    let mut index = String::from("file\tlabel\n");
    for (i, (img, label)) in samples.iter().zip(&labels).enumerate() {
        let file = format!("sample_{i:04}.png");
        save_png(img, &out.join(&file))?;
        writeln!(index, "{file}\t{label}")?;
    }
    fs::write(out.join("samples.tsv"), index)?;
    Ok(out)
}

pub fn sweep_setup(config: &RunConfig) -> Result<SweepSetup> {
    check_data_compat(config)?;
    let e = &config.eval;
    let fid = ToyFidExtractor::new(config.model.channels, e.fid_tokens, e.fid_dim, e.fid_seed)?;
    let reference = fid.dataset_stats(&reference_set(config))?;
    Ok(SweepSetup {
        num_samples: e.num_samples,
        num_classes: NUM_CLASSES,
        interval: config.cfg,
        sampler: config.sampler.clone(),
        seed: e.sample_seed,
        reference,
        fid,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Metrics {
    pub toy_fid: f64,
    pub accuracy: f64,
}

/// Toy-FID against the reference split and nearest-centroid accuracy of the sample labels.
pub fn evaluate(model: &HyperDit<f32>, config: &RunConfig) -> Result<Metrics> {
    let setup = sweep_setup(config)?;
    ensure!(setup.num_samples >= 2, "eval.num_samples: {} is too few (need >= 2)", setup.num_samples);
    let labels: Vec<usize> = (0..setup.num_samples).map(|i| i % NUM_CLASSES).collect();
    let samples = generate_samples(model, &labels, &config.cfg, &config.sampler, setup.seed)?;
    let refs: Vec<&ImageTensor<f32>> = samples.iter().collect();
    let toy_fid = frechet_distance(&setup.fid.stats(&refs)?, &setup.reference)?;
    let classifier = NearestCentroid::fit(&train_set(config).items, NUM_CLASSES)?;
    Ok(Metrics { toy_fid, accuracy: classifier.accuracy(&refs, &labels) })
}

pub fn cmd_eval(config: &RunConfig, run_dir: &Path, raw: bool) -> Result<Metrics> {
    let model = load_model(config, run_dir, raw)?;
    let metrics = evaluate(&model, config)?;
    let out = run_dir.join("eval");
    write_config(&out, config)?;
    fs::write(
        out.join("metrics.tsv"),
        format!("metric\tvalue\ntoy_fid\t{:.6}\naccuracy\t{:.6}\n", metrics.toy_fid, metrics.accuracy),
    )?;
    Ok(metrics)
}

pub fn cmd_sweep(config: &RunConfig, run_dir: &Path, raw: bool) -> Result<Vec<SweepRow>> {
    let model = load_model(config, run_dir, raw)?;
    let rows = cfg_sweep(&model, &config.eval.sweep_scales, &sweep_setup(config)?)?;
    let out = run_dir.join("sweep");
    write_config(&out, config)?;
    fs::write(out.join("sweep.tsv"), sweep_tsv(&rows))?;
    Ok(rows)
}

/// Base patch and the first `count` unified indices of each stream, tab-delimited.
pub fn rope_report(size: usize, large: usize, small: usize, count: usize) -> Result<String> {
    let p_base = compute_base_patch(size, size, small, large)?;
    let mut out = format!("p_base\t{p_base}\nstream\tindex\trow\tcol\ti\tj\n");
    for (stream, p) in [("large", large), ("small", small)] {
        let side = size / p;
        for k in 0..count.min(side * side) {
            let (row, col) = (k / side, k % side);
            let u = unified_index(row, col, p, p_base);
            writeln!(out, "{stream}\t{k}\t{row}\t{col}\t{}\t{}", u.i, u.j)?;
        }
    }
    Ok(out)
}

pub fn cmd_inspect_rope(
    config: &RunConfig,
    run_dir: Option<&Path>,
    size: usize,
    large: usize,
    small: usize,
    count: usize,
) -> Result<String> {
    let report = rope_report(size, large, small, count)?;
    if let Some(dir) = run_dir {
        let out = dir.join("rope");
        write_config(&out, config)?;
        fs::write(out.join("rope.tsv"), &report)?;
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rope_report_for_imagenet_geometry() {
        let report = rope_report(256, 16, 8, 4).unwrap();
        let lines: Vec<&str> = report.lines().collect();
        assert_eq!(lines[0], "p_base\t4");
        assert_eq!(lines[2], "large\t0\t0\t0\t2\t2");
        assert_eq!(lines[3], "large\t1\t0\t1\t2\t6");
        assert_eq!(lines[6], "small\t0\t0\t0\t1\t1");
        assert_eq!(lines[7], "small\t1\t0\t1\t1\t3");
        assert_eq!(lines.len(), 10);
    }

    #[test]
    fn eight_bit_mapping_clamps() {
        let img = ImageTensor::from_vec(1, 1, 4, vec![-2.0, -1.0, 0.0, 1.0]).unwrap();
        let png = to_8bit(&img).unwrap().into_luma8();
        assert_eq!(png.as_raw(), &vec![0, 0, 128, 255]);
        assert!(to_8bit(&ImageTensor::zeros(2, 2, 2)).is_err());
    }

    #[test]
    fn overrides_apply_before_validation() {
        let config = resolve_config(None, None, &["train.lr=0.002".into()]).unwrap();
        assert_eq!(config.train.lr, 0.002);
        let err = resolve_config(None, None, &["model.connectors=3".into()]).unwrap_err().to_string();
        assert!(err.contains("model.anchor_interval") && err.contains("model.connectors"), "{err}");
    }

    #[test]
    fn data_compat_rejects_non_rgb() {
        let mut config = RunConfig::default();
        config.model.channels = 1;
        assert!(check_data_compat(&config).unwrap_err().to_string().contains("model.channels"));
    }
}
