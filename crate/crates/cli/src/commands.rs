use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context, Result};
use serde_json::json;

use iretinex_core::colorspace::ImageRgb;
use iretinex_core::gradsuite::{run_suite, suite_names, SUITE_TOLERANCE};
use iretinex_core::io::{load_image, save_heatmap, save_image, Checkpoint, RunConfig};
use iretinex_core::metrics::{
    cosine_similarity, error_map_csv, flop_audit, histogram_csv, MetricsReport,
};
use iretinex_core::training::{
    bundled_textures, sample_rng, trace_csv, train as run_training, Dataset, DegradeConfig, TraceRow,
};
use iretinex_core::{Image32, Model32};

const IMAGE_EXTENSIONS: [&str; 2] = ["png", "ppm"];

fn is_image(path: &Path) -> bool {
    path.extension()
        .and_then(|e| e.to_str())
        .is_some_and(|e| IMAGE_EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()))
}

/// A single image file, or every PNG/PPM directly inside a directory, sorted by name.
fn image_inputs(input: &Path) -> Result<Vec<PathBuf>> {
    if !input.is_dir() {
        return Ok(vec![input.to_path_buf()]);
    }
    let mut files = Vec::new();
    for entry in fs::read_dir(input).with_context(|| format!("reading {}", input.display()))? {
        let path = entry?.path();
        if path.is_file() && is_image(&path) {
            files.push(path);
        }
    }
    files.sort();
    if files.is_empty() {
        bail!("no PNG or PPM images in {}", input.display());
    }
    Ok(files)
}

fn out_path(out_dir: &Path, input: &Path) -> Result<PathBuf> {
    let name = input
        .file_name()
        .with_context(|| format!("{} has no file name", input.display()))?;
    Ok(out_dir.join(name))
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

/// Writes through a sibling temporary file so readers never see a partial file.
fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    fs::write(&tmp, bytes).with_context(|| format!("writing {}", tmp.display()))?;
    fs::rename(&tmp, path).with_context(|| format!("renaming onto {}", path.display()))
}

fn load_checkpoint(path: &Path) -> Result<Model32> {
    Ok(Checkpoint::load(path)?.model)
}

fn training_images(cfg: &RunConfig) -> Result<Vec<Image32>> {
    if cfg.data_dir.as_os_str().is_empty() {
        let mut tex = bundled_textures(cfg.texture_size, cfg.texture_size, cfg.seed);
        tex.truncate(cfg.bundled_pairs);
        return Ok(tex);
    }
    image_inputs(&cfg.data_dir)?
        .iter()
        .map(|p| Ok(load_image(p)?))
        .collect()
}

pub fn train(config: Option<&Path>, out: &Path, trace: Option<&Path>) -> Result<()> {
    let cfg = match config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    let trace_path = match trace {
        Some(p) => p.to_path_buf(),
        None if !cfg.trace.as_os_str().is_empty() => cfg.trace.clone(),
        None => {
            let mut p = out.as_os_str().to_owned();
            p.push(".trace.csv");
            PathBuf::from(p)
        }
    };
    let train_cfg = cfg.train_config();
    let data = Dataset::from_clean(training_images(&cfg)?, &cfg.degrade_config()?, cfg.seed)?;
    let mut model = Model32::new(cfg.model_config(), cfg.seed)?;

    let started = Instant::now();
    let mut rows: Vec<TraceRow> = Vec::with_capacity(train_cfg.total_iters);
    let outcome = run_training(&mut model, &data, &train_cfg, |p| {
        rows.push(p.row);
        let every = cfg.checkpoint_every;
        if every > 0 && p.row.iter % every == 0 && p.row.iter < train_cfg.total_iters {
            let ckpt = Checkpoint {
                model: p.model.clone(),
                seed: cfg.seed,
                iteration: p.row.iter as u64,
            };
            write_atomic(out, &ckpt.to_bytes())
                .map_err(|e| iretinex_core::Error::Io(std::io::Error::other(format!("{e:#}"))))?;
        }
        Ok(())
    });
    write_atomic(&trace_path, trace_csv(&rows).as_bytes())?;
    outcome?;

    let ckpt = Checkpoint {
        model,
        seed: cfg.seed,
        iteration: rows.len() as u64,
    };
    write_atomic(out, &ckpt.to_bytes())?;
    let report = json!({
        "iterations": rows.len(),
        "final_loss": rows.last().map(|r| r.loss),
        "pairs": data.len(),
        "seconds": started.elapsed().as_secs_f64(),
        "checkpoint": out.display().to_string(),
        "trace": trace_path.display().to_string(),
    });
    println!("{report}");
    Ok(())
}

/// Edge-replicates `img` up to the next multiple of `2^depth` in each direction.
fn pad_to_multiple(img: &Image32, depth: usize) -> Image32 {
    let m = 1usize << depth;
    let (h, w) = (img.height(), img.width());
    let (ph, pw) = (h.div_ceil(m) * m, w.div_ceil(m) * m);
    if (ph, pw) == (h, w) {
        return img.clone();
    }
    ImageRgb::from_fn(ph, pw, |y, x, c| img.get(y.min(h - 1), x.min(w - 1), c))
}

fn enhance_image(model: &Model32, img: &Image32) -> Result<Image32> {
    let padded = pad_to_multiple(img, model.config().depth());
    let out = model.enhance(&padded)?;
    Ok(out.crop(0, 0, img.height(), img.width())?)
}

pub fn enhance(ckpt: &Path, input: &Path, out: &Path) -> Result<()> {
    let model = load_checkpoint(ckpt)?;
    let files = image_inputs(input)?;
    create_dir(out)?;
    let mut written = Vec::with_capacity(files.len());
    for file in &files {
        let img: Image32 = load_image(file)?;
        let dest = out_path(out, file)?;
        save_image(&enhance_image(&model, &img)?, &dest)?;
        written.push(dest.display().to_string());
    }
    println!("{}", json!({ "images": written.len(), "outputs": written }));
    Ok(())
}

pub fn decompose(ckpt: &Path, input: &Path, out: &Path) -> Result<()> {
    let model = load_checkpoint(ckpt)?;
    let img: Image32 = load_image(input)?;
    model.check_input(img.height(), img.width())?;
    let d = model.decompose(&img)?;
    create_dir(out)?;
    let illum = out.join("illumination.png");
    let reflect = out.join("reflectance.png");
    save_heatmap(&d.illum_map.cast(), &illum)?;
    save_image(&ImageRgb::clamped(d.reflect_img)?, &reflect)?;
    let cos = cosine_similarity(&d.illum_features.cast::<f64>(), &d.reflect_features.cast::<f64>())?;
    let report = json!({
        "cosine_similarity": cos.value,
        "degenerate": cos.degenerate,
        "illumination": illum.display().to_string(),
        "reflectance": reflect.display().to_string(),
    });
    println!("{report}");
    Ok(())
}

pub fn metrics(a: &Path, b: &Path, out: Option<&Path>) -> Result<()> {
    let ia: ImageRgb<f64> = load_image(a)?;
    let ib: ImageRgb<f64> = load_image(b)?;
    let r = MetricsReport::compare(&ia, &ib)?;
    println!("psnr={:?} ssim={:?}", r.psnr, r.ssim);
    // JSON has no infinity; identical images report the string "inf"
    let psnr = if r.psnr.is_finite() {
        json!(r.psnr)
    } else {
        json!("inf")
    };
    let mut report = json!({
        "psnr": psnr,
        "ssim": r.ssim,
        "cosine_similarity": r.cosine.value,
        "mean_abs_error": r.mean_abs_error(),
        "pixels_a": r.histogram_a[0].iter().sum::<u64>(),
        "pixels_b": r.histogram_b[0].iter().sum::<u64>(),
    });
    if let Some(dir) = out {
        create_dir(dir)?;
        let files = [
            ("histogram_a.csv", histogram_csv(&r.histogram_a)),
            ("histogram_b.csv", histogram_csv(&r.histogram_b)),
            ("error_map.csv", error_map_csv(&r.error_map)),
        ];
        for (name, text) in &files {
            fs::write(dir.join(name), text).with_context(|| format!("writing {name}"))?;
        }
        save_heatmap(&r.error_map, dir.join("error_map.png"))?;
        report["out"] = json!(dir.display().to_string());
    }
    println!("{report}");
    Ok(())
}

pub fn audit(h: usize, w: usize, c: usize, s: usize) -> Result<()> {
    let a = flop_audit(h, w, c, s)?;
    println!("mres={} gmsa={}", a.mres_flops, a.gmsa_flops);
    let report = json!({
        "H": a.h, "W": a.w, "C": a.c, "s": a.s,
        "mres": a.mres_flops,
        "gmsa": a.gmsa_flops,
        "ratio": a.ratio,
        "live_mres": a.live_mres_flops,
        "live_matches": a.live_mres_flops.map(|live| live == a.mres_flops),
    });
    println!("{report}");
    Ok(())
}

pub fn synth_data(
    input: &Path,
    out: &Path,
    gamma: f64,
    alpha: f64,
    sigma: f64,
    seed: u64,
    poisson: bool,
) -> Result<()> {
    let degrade = DegradeConfig {
        poisson,
        ..DegradeConfig::fixed(alpha, gamma, sigma)
    };
    degrade.validate()?;
    let files = image_inputs(input)?;
    create_dir(out)?;
    let mut written = Vec::with_capacity(files.len());
    for (i, file) in files.iter().enumerate() {
        let clean: ImageRgb<f64> = load_image(file)?;
        let mut rng = sample_rng(seed, i as u64);
        let low = degrade.sample(&mut rng)?.apply(&clean, &mut rng)?;
        let dest = out_path(out, file)?;
        save_image(&low, &dest)?;
        written.push(dest.display().to_string());
    }
    println!("{}", json!({ "images": written.len(), "outputs": written }));
    Ok(())
}

pub fn gradcheck(module: Option<&str>) -> Result<()> {
    if let Some(m) = module {
        if !suite_names().iter().any(|(module, name)| *module == m || *name == m) {
            bail!("unknown gradcheck module or entry {m:?}");
        }
    }
    let started = Instant::now();
    let entries = run_suite(module)?;
    let mut failed = 0;
    for e in &entries {
        let status = if e.passed() { "pass" } else { "FAIL" };
        failed += usize::from(!e.passed());
        println!(
            "{status} {}::{} max_rel_error={:e}",
            e.module, e.name, e.report.max_rel_error
        );
    }
    let report = json!({
        "entries": entries.len(),
        "failed": failed,
        "tolerance": SUITE_TOLERANCE,
        "seconds": started.elapsed().as_secs_f64(),
    });
    println!("{report}");
    if failed > 0 {
        bail!("{failed} gradient check(s) exceeded tolerance {SUITE_TOLERANCE:e}");
    }
    Ok(())
}
