use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context, Result};
use emrf_core::config::RunConfig;
use emrf_core::gradcheck::{run_suite, SuiteOptions};
use emrf_core::io::{load_checkpoint, read_image, write_image};
use emrf_core::metrics::{mean_std, PairMetrics};
use emrf_core::model::Model;
use emrf_core::rain::{make_dataset, CleanSource, Manifest};
use emrf_core::train::train as run_training;
use rayon::prelude::*;

use crate::ablate::{self, AblationPlan};

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    std::fs::write(path, contents).with_context(|| format!("writing {}", path.display()))
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

/// `.ppm`/`.pgm` files of a directory in name order, or the file itself.
pub(crate) fn image_files(path: &Path) -> Result<Vec<PathBuf>> {
    if path.is_file() {
        return Ok(vec![path.to_path_buf()]);
    }
    let mut files = Vec::new();
    for entry in std::fs::read_dir(path).with_context(|| format!("listing {}", path.display()))? {
        let p = entry?.path();
        let ext = p.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase);
        if p.is_file() && matches!(ext.as_deref(), Some("ppm" | "pgm")) {
            files.push(p);
        }
    }
    files.sort();
    if files.is_empty() {
        bail!("no .ppm or .pgm images in {}", path.display());
    }
    Ok(files)
}

pub(crate) fn synth(cfg: &RunConfig, out: &Path, count: usize, size: usize, clean: Option<&Path>) -> Result<()> {
    let source = match clean {
        Some(dir) => CleanSource::Directory(dir.to_path_buf()),
        None => CleanSource::Procedural {
            height: size,
            width: size,
        },
    };
    let manifest = make_dataset(&source, out, &cfg.streaks, count)?;
    eprintln!("wrote {} pairs to {}", manifest.pairs.len(), out.display());
    Ok(())
}

pub(crate) fn train(cfg: &RunConfig, data: &Path, out: &Path) -> Result<()> {
    let manifest = Manifest::load(data)?;
    let pairs = manifest.load_pairs(data)?;
    create_dir(out)?;
    write(&out.join("config.json"), cfg.to_json()?)?;
    let start = Instant::now();
    let trained = run_training(&cfg.model, &cfg.train, &pairs, &cfg.metrics, Some(out))?;
    let r = &trained.report;
    eprintln!(
        "trained {} epochs on {} pairs in {:.1}s: ssim loss {:.4} -> {:.4}, val PSNR_Y {:.2} dB (rainy {:.2} dB)",
        r.epochs.len(),
        r.train_pairs,
        start.elapsed().as_secs_f64(),
        r.initial_loss,
        r.final_loss,
        r.final_val_psnr_y(),
        r.val_baseline_psnr_y,
    );
    Ok(())
}

pub(crate) fn derain(checkpoint: &Path, input: &Path, out: &Path) -> Result<()> {
    let (config, params) = load_checkpoint::<f64>(checkpoint)?;
    let model = Model { config, params };
    let files = image_files(input)?;
    create_dir(out)?;
    files.par_iter().try_for_each(|f| -> Result<()> {
        let img = read_image(f)?;
        let shape = img.shape().to_vec();
        let x = img.reshape(&[1, shape[0], shape[1], shape[2]])?;
        let y = model
            .infer(&x)
            .with_context(|| format!("deraining {}", f.display()))?
            .reshape(&shape)?;
        let name = Path::new(f.file_stem().expect("listed files have names")).with_extension("ppm");
        write_image(&out.join(name), &y)?;
        Ok(())
    })?;
    eprintln!("derained {} images into {}", files.len(), out.display());
    Ok(())
}

pub(crate) const EVAL_HEADER: &str = "file,psnr_y,ssim_y,mae,psnr_rgb,ssim_rgb";

fn metric_row(m: &PairMetrics) -> [f64; 5] {
    [m.psnr_y, m.ssim_y, m.mae, m.psnr_rgb, m.ssim_rgb]
}

pub(crate) fn eval(cfg: &RunConfig, pred: &Path, gt: &Path, out: Option<&Path>) -> Result<()> {
    let files = image_files(pred)?;
    let rows = files
        .par_iter()
        .map(|f| -> Result<(String, PairMetrics)> {
            let name = f
                .file_name()
                .expect("listed files have names")
                .to_string_lossy()
                .into_owned();
            let reference = gt.join(&name);
            if !reference.is_file() {
                bail!("no ground truth {} for {}", reference.display(), f.display());
            }
            let m = PairMetrics::compute(&read_image(f)?, &read_image(&reference)?, &cfg.metrics)
                .with_context(|| format!("comparing {name}"))?;
            Ok((name, m))
        })
        .collect::<Result<Vec<_>>>()?;

    let mut csv = format!("{EVAL_HEADER}\n");
    for (name, m) in &rows {
        let vals: Vec<String> = metric_row(m).iter().map(f64::to_string).collect();
        writeln!(csv, "{name},{}", vals.join(","))?;
    }
    let columns: Vec<Vec<f64>> = (0..5)
        .map(|c| rows.iter().map(|(_, m)| metric_row(m)[c]).collect())
        .collect();
    let stats: Vec<(f64, f64)> = columns.iter().map(|c| mean_std(c)).collect();
    for (label, pick) in [("mean", 0), ("std", 1)] {
        let vals: Vec<String> = stats
            .iter()
            .map(|s| if pick == 0 { s.0 } else { s.1 }.to_string())
            .collect();
        writeln!(csv, "{label},{}", vals.join(","))?;
    }
    match out {
        Some(dir) => {
            create_dir(dir)?;
            write(&dir.join("metrics.csv"), &csv)?;
        }
        None => print!("{csv}"),
    }
    let names = ["PSNR_Y", "SSIM_Y", "MAE", "PSNR_RGB", "SSIM_RGB"];
    for (n, (m, s)) in names.iter().zip(&stats) {
        eprintln!("{n:>8}: {m:.4} ± {s:.4}");
    }
    Ok(())
}

pub(crate) fn ablate(
    cfg: &RunConfig,
    out: &Path,
    data: Option<&Path>,
    seeds: usize,
    count: usize,
    size: usize,
) -> Result<()> {
    create_dir(out)?;
    let pairs = match data {
        Some(dir) => Manifest::load(dir)?.load_pairs(dir)?,
        None => {
            let dir = out.join("data");
            make_dataset(
                &CleanSource::Procedural {
                    height: size,
                    width: size,
                },
                &dir,
                &cfg.streaks,
                count,
            )?
            .load_pairs(&dir)?
        }
    };
    let plan = AblationPlan::standard(cfg, seeds);
    let result = ablate::run(&plan, &pairs, |run, secs| {
        eprintln!(
            "t={} k={} seed={}: loss {:.4} -> {:.4}, val PSNR_Y {:.3} dB ({secs:.0}s)",
            run.iterations, run.cascades, run.seed, run.initial_loss, run.final_loss, run.psnr_y
        );
    })?;
    write(&out.join(ablate::RUNS_FILE), ablate::runs_csv(&result.runs))?;
    write(&out.join(ablate::SUMMARY_FILE), ablate::summary_csv(&result.rows))?;
    eprintln!("wrote {}", out.join(ablate::SUMMARY_FILE).display());
    Ok(())
}

pub(crate) fn gradcheck(seed: u64, per_tensor: usize, out: Option<&Path>) -> Result<()> {
    let opts = SuiteOptions {
        seed,
        per_tensor,
        ..SuiteOptions::default()
    };
    let start = Instant::now();
    let cases = run_suite(&opts)?;
    let mut csv = String::from("case,checked,max_rel_error,passed\n");
    for c in &cases {
        writeln!(csv, "{},{},{:e},{}", c.name, c.checked, c.max_rel_error, c.passed)?;
        let worst = c.worst.as_deref().unwrap_or("-");
        println!(
            "{:<4} {:<32} {:>6} checked  max rel err {:.2e}  worst {worst}",
            if c.passed { "ok" } else { "FAIL" },
            c.name,
            c.checked,
            c.max_rel_error
        );
    }
    if let Some(dir) = out {
        create_dir(dir)?;
        write(&dir.join("gradcheck.csv"), &csv)?;
    }
    let failed = cases.iter().filter(|c| !c.passed).count();
    println!(
        "{} cases, {failed} failed, tolerance {:e}, step {:e}, {:.1}s",
        cases.len(),
        opts.tol,
        opts.step,
        start.elapsed().as_secs_f64()
    );
    if failed > 0 {
        bail!("{failed} gradient checks exceeded the tolerance");
    }
    Ok(())
}
