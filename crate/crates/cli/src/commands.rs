use std::fmt::Write as _;
use std::io::Write;
use std::path::{Path, PathBuf};

use dmri::baseline::cs_reconstruct;
use dmri::data::{
    generate_phantom, metric_mse, metric_psnr, metric_ssim, read_dataset, shear_patches,
    simulate_samples, write_dataset, PhantomConfig,
};
use dmri::gradcheck::run_all;
use dmri::kspace::{
    forward_model, zero_filled_recon, ComplexImageSequence, KSpaceData, SamplingMask,
};
use dmri::network::{crdn_forward, ModelParams};
use dmri::tensor::Element;
use dmri::training::{train, write_log_csv, TrainOutcome};
use dmri::{Error, Result};
use rayon::prelude::*;

use crate::config::{ExperimentConfig, SIMULATION_SEED_OFFSET};

/// Upper end of the grey-level scale for error maps.
pub const ERROR_DISPLAY_MAX: f64 = 0.07;
pub const SNAPSHOT: &str = "config.resolved.json";
pub const MANIFEST: &str = "manifest.csv";
pub const TIMING: &str = "timing.csv";

pub struct Run {
    pub config: ExperimentConfig,
    pub output: PathBuf,
    pub force: bool,
    pub float64: bool,
}

impl Run {
    /// Creates the output directory and refuses to replace any of `names`
    /// unless `--force` was given.
    fn outputs(&self, names: &[&str]) -> Result<Vec<PathBuf>> {
        std::fs::create_dir_all(&self.output)?;
        let mut all: Vec<&str> = names.to_vec();
        all.extend([SNAPSHOT, MANIFEST, TIMING]);
        if !self.force {
            if let Some(existing) = all.iter().map(|n| self.output.join(n)).find(|p| p.exists()) {
                return Err(Error::InvalidArgument(format!(
                    "{} already exists; pass --force to overwrite",
                    existing.display()
                )));
            }
        }
        Ok(names.iter().map(|n| self.output.join(n)).collect())
    }

    /// Writes the resolved config and a CRC manifest of `files`.
    fn finish(&self, files: &[PathBuf]) -> Result<()> {
        let snapshot = self.output.join(SNAPSHOT);
        std::fs::write(&snapshot, self.config.to_json() + "\n")?;
        let mut manifest = String::from("file,bytes,crc32\n");
        for f in files.iter().chain([&snapshot]) {
            let bytes = std::fs::read(f)?;
            let name = f
                .file_name()
                .map(|n| n.to_string_lossy().into_owned())
                .unwrap_or_default();
            writeln!(
                manifest,
                "{name},{},{:08x}",
                bytes.len(),
                crc32fast::hash(&bytes)
            )
            .unwrap();
        }
        std::fs::write(self.output.join(MANIFEST), manifest)?;
        Ok(())
    }

    fn input(
        &self,
        flag: Option<PathBuf>,
        configured: &Option<PathBuf>,
        what: &str,
    ) -> Result<PathBuf> {
        flag.or_else(|| configured.clone()).ok_or_else(|| {
            Error::InvalidArgument(format!("no {what} given (flag or paths.{what})"))
        })
    }
}

fn magnitude_pgm(path: &Path, values: &[f64], nx: usize, ny: usize, max: f64) -> Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    write!(out, "P5\n{nx} {ny}\n255\n")?;
    let pixels: Vec<u8> = values
        .iter()
        .map(|v| ((v / max).clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    out.write_all(&pixels)?;
    out.flush()?;
    Ok(())
}

fn frame_magnitude(seq: &ComplexImageSequence, t: usize) -> Vec<f64> {
    seq.frame(t).iter().map(|c| c.norm()).collect()
}

/// Reference, reconstruction and error map of frame 0 of the first sequence.
fn dump_frames(
    run: &Run,
    rec: &ComplexImageSequence,
    reference: &ComplexImageSequence,
) -> Result<Vec<PathBuf>> {
    let (nx, ny, _) = rec.geometry();
    let names = ["reference_t0.pgm", "reconstruction_t0.pgm", "error_t0.pgm"];
    let paths: Vec<PathBuf> = names.iter().map(|n| run.output.join(n)).collect();
    let (a, b) = (frame_magnitude(reference, 0), frame_magnitude(rec, 0));
    let peak = a.iter().copied().fold(0.0, f64::max).max(f64::MIN_POSITIVE);
    let err: Vec<f64> = a.iter().zip(&b).map(|(x, y)| (x - y).abs()).collect();
    magnitude_pgm(&paths[0], &a, nx, ny, peak)?;
    magnitude_pgm(&paths[1], &b, nx, ny, peak)?;
    magnitude_pgm(&paths[2], &err, nx, ny, ERROR_DISPLAY_MAX)?;
    Ok(paths)
}

pub fn generate_data(run: &Run) -> Result<()> {
    let files = run.outputs(&["dataset.dmri", "preview_t0.pgm"])?;
    let data = &run.config.data;
    let mut records = Vec::new();
    for i in 0..data.volumes as u64 {
        let volume = generate_phantom(&PhantomConfig {
            seed: run.config.seed + i,
            ..data.phantom.clone()
        })?;
        match &data.patch {
            Some(spec) => records.extend(shear_patches(&volume, spec)?),
            None => records.push(volume),
        }
    }
    write_dataset(&files[0], &records)?;
    let (nx, ny, nt) = records[0].geometry();
    magnitude_pgm(&files[1], &frame_magnitude(&records[0], 0), nx, ny, 1.0)?;
    run.finish(&files)?;
    println!(
        "wrote {} records of {nx}x{ny}x{nt} to {}",
        records.len(),
        files[0].display()
    );
    Ok(())
}

pub fn make_mask(run: &Run) -> Result<()> {
    let files = run.outputs(&["mask.bin", "mask.pgm", "density.csv", "mask_report.csv"])?;
    let (nx, ny, nt) = run.config.data.geometry()?;
    let mask = run.config.mask.generate(nx, ny, nt, run.config.seed)?;
    mask.write_bitset(std::fs::File::create(&files[0])?)?;
    mask.write_pgm(std::io::BufWriter::new(std::fs::File::create(&files[1])?))?;

    let sigma = run.config.mask.density_std.unwrap_or(ny as f64 / 6.0);
    let mut density = String::from("ky,sampled_fraction,gaussian_weight\n");
    for (ky, f) in mask.line_frequency().iter().enumerate() {
        let z = (ky as f64 - (ny / 2) as f64) / sigma;
        writeln!(density, "{ky},{f},{}", (-0.5 * z * z).exp()).unwrap();
    }
    std::fs::write(&files[2], density)?;

    let counts: Vec<usize> = (0..nt).map(|t| mask.lines_in_frame(t)).collect();
    let report = format!(
        "key,value\nnx,{nx}\nny,{ny}\nnt,{nt}\nacceleration,{}\nacs_lines,{}\nlines_per_frame_min,{}\n\
         lines_per_frame_max,{}\nsampled_fraction,{}\n",
        mask.acceleration(),
        mask.acs_lines(),
        counts.iter().min().unwrap(),
        counts.iter().max().unwrap(),
        mask.sampled_fraction()
    );
    std::fs::write(&files[3], report)?;
    run.finish(&files)?;
    println!(
        "mask {nx}x{ny}x{nt}: {:.1}% of lines sampled",
        100.0 * mask.sampled_fraction()
    );
    Ok(())
}

fn load_references(path: &Path) -> Result<Vec<ComplexImageSequence>> {
    read_dataset(path).map_err(|e| match e {
        Error::Io(io) => {
            Error::InvalidArgument(format!("cannot read dataset {}: {io}", path.display()))
        }
        other => other,
    })
}

fn load_mask(path: &Path) -> Result<SamplingMask> {
    let f = std::fs::File::open(path)
        .map_err(|e| Error::InvalidArgument(format!("cannot read mask {}: {e}", path.display())))?;
    SamplingMask::read_bitset(f)
}

pub fn train_cmd(run: &Run, dataset: Option<PathBuf>) -> Result<()> {
    let dataset = run.input(dataset, &run.config.paths.dataset, "dataset")?;
    let files = run.outputs(&["model.ckpt", "last.ckpt", "train_log.csv"])?;
    let refs = load_references(&dataset)?;
    let cfg = &run.config;
    let samples = simulate_samples(
        &refs,
        &cfg.mask,
        cfg.noise,
        cfg.seed + SIMULATION_SEED_OFFSET,
    )?;
    let report = |r: &dmri::training::EpochRecord| {
        let val = match (r.val_loss, r.val_psnr) {
            (Some(l), Some(p)) => format!(" val_loss {l:.4e} val_psnr {p:.2}"),
            _ => String::new(),
        };
        println!(
            "epoch {:>3} lr {:.3e} train_loss {:.4e}{val}",
            r.epoch, r.lr, r.train_loss
        );
    };
    fn save<T: Element>(out: TrainOutcome<T>, files: &[PathBuf]) -> Result<usize> {
        out.best.save(&files[0])?;
        out.last.save(&files[1])?;
        write_log_csv(
            &out.log,
            std::io::BufWriter::new(std::fs::File::create(&files[2])?),
        )?;
        // wall-clock times vary run to run; kept out of the manifest
        let mut timing = String::from("epoch,wall_seconds\n");
        for r in &out.log {
            writeln!(timing, "{},{:.3}", r.epoch, r.wall_seconds).unwrap();
        }
        std::fs::write(files[0].with_file_name(TIMING), timing)?;
        Ok(out.best_epoch)
    }
    let best = if run.float64 {
        save(
            train::<f64>(&samples, &cfg.network, &cfg.train, report)?,
            &files,
        )?
    } else {
        save(
            train::<f32>(&samples, &cfg.network, &cfg.train, report)?,
            &files,
        )?
    };
    run.finish(&files)?;
    println!(
        "trained on {} sequences; best epoch {best} saved to {}",
        samples.len(),
        files[0].display()
    );
    Ok(())
}

/// Simulated measurements of each reference through one fixed mask.
fn measure(
    run: &Run,
    refs: &[ComplexImageSequence],
    mask: &SamplingMask,
) -> Result<Vec<KSpaceData>> {
    refs.iter()
        .enumerate()
        .map(|(i, r)| {
            forward_model(
                r,
                mask,
                run.config.noise,
                run.config.seed + SIMULATION_SEED_OFFSET + i as u64,
            )
        })
        .collect()
}

enum Model {
    F32(ModelParams<f32>),
    F64(ModelParams<f64>),
}

fn load_model(path: &Path, float64: bool) -> Result<Model> {
    let bytes = std::fs::read(path).map_err(|e| {
        Error::InvalidArgument(format!("cannot read checkpoint {}: {e}", path.display()))
    })?;
    let model = match ModelParams::<f32>::from_bytes(&bytes) {
        Ok(p) => Model::F32(p),
        Err(e32) => match ModelParams::<f64>::from_bytes(&bytes) {
            Ok(p) => Model::F64(p),
            Err(_) => return Err(e32),
        },
    };
    Ok(match (model, float64) {
        (Model::F32(p), true) => Model::F64(p.cast()),
        (m, _) => m,
    })
}

fn metrics_rows(
    recs: &[ComplexImageSequence],
    refs: &[ComplexImageSequence],
    extra: Option<&[KSpaceData]>,
) -> Result<String> {
    let mut out = String::from("index,mse,psnr,ssim");
    out.push_str(if extra.is_some() {
        ",zero_filled_psnr,zero_filled_ssim\n"
    } else {
        "\n"
    });
    for (i, (r, s)) in recs.iter().zip(refs).enumerate() {
        write!(
            out,
            "{i},{},{},{}",
            metric_mse(r, s)?,
            metric_psnr(r, s)?,
            metric_ssim(r, s)?
        )
        .unwrap();
        if let Some(k) = extra {
            let zf = zero_filled_recon(&k[i]);
            write!(out, ",{},{}", metric_psnr(&zf, s)?, metric_ssim(&zf, s)?).unwrap();
        }
        out.push('\n');
    }
    Ok(out)
}

pub fn reconstruct_cmd(
    run: &Run,
    checkpoint: Option<PathBuf>,
    dataset: Option<PathBuf>,
    mask: Option<PathBuf>,
) -> Result<()> {
    let checkpoint = run.input(checkpoint, &run.config.paths.checkpoint, "checkpoint")?;
    let dataset = run.input(dataset, &run.config.paths.dataset, "dataset")?;
    let mask = run.input(mask, &run.config.paths.mask, "mask")?;
    let mut files = run.outputs(&["reconstruction.dmri", "metrics.csv"])?;
    let model = load_model(&checkpoint, run.float64)?;
    let refs = load_references(&dataset)?;
    let k = measure(run, &refs, &load_mask(&mask)?)?;
    let recs: Vec<ComplexImageSequence> = match &model {
        Model::F32(p) => k
            .par_iter()
            .map(|k| crdn_forward(k, p))
            .collect::<Result<_>>()?,
        Model::F64(p) => k
            .par_iter()
            .map(|k| crdn_forward(k, p))
            .collect::<Result<_>>()?,
    };
    write_dataset(&files[0], &recs)?;
    std::fs::write(&files[1], metrics_rows(&recs, &refs, Some(&k))?)?;
    files.extend(dump_frames(run, &recs[0], &refs[0])?);
    run.finish(&files)?;
    println!(
        "reconstructed {} sequences into {}",
        recs.len(),
        files[0].display()
    );
    Ok(())
}

pub fn baseline_cmd(run: &Run, dataset: Option<PathBuf>, mask: Option<PathBuf>) -> Result<()> {
    let dataset = run.input(dataset, &run.config.paths.dataset, "dataset")?;
    let mask = run.input(mask, &run.config.paths.mask, "mask")?;
    let mut files = run.outputs(&["reconstruction.dmri", "metrics.csv", "trace.csv"])?;
    let refs = load_references(&dataset)?;
    let k = measure(run, &refs, &load_mask(&mask)?)?;
    let results: Vec<_> = k
        .par_iter()
        .map(|k| cs_reconstruct(k, &run.config.cs))
        .collect::<Result<_>>()?;
    let recs: Vec<_> = results.iter().map(|r| r.image.clone()).collect();
    write_dataset(&files[0], &recs)?;
    std::fs::write(&files[1], metrics_rows(&recs, &refs, Some(&k))?)?;
    let mut trace = String::from("index,iteration,objective\n");
    for (i, r) in results.iter().enumerate() {
        for (it, v) in r.trace.iter().enumerate() {
            writeln!(trace, "{i},{it},{v}").unwrap();
        }
    }
    std::fs::write(&files[2], trace)?;
    files.extend(dump_frames(run, &recs[0], &refs[0])?);
    run.finish(&files)?;
    println!(
        "CS reconstruction of {} sequences written to {}",
        recs.len(),
        files[0].display()
    );
    Ok(())
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = if v.len() > 1 {
        v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    (mean, var.sqrt())
}

pub fn evaluate_cmd(run: &Run, reconstruction: PathBuf, reference: PathBuf) -> Result<()> {
    let files = run.outputs(&["metrics.csv"])?;
    let recs = load_references(&reconstruction)?;
    let refs = load_references(&reference)?;
    if recs.len() != refs.len() {
        return Err(Error::InvalidArgument(format!(
            "{} reconstructions vs {} references",
            recs.len(),
            refs.len()
        )));
    }
    let mut cols = [Vec::new(), Vec::new(), Vec::new()];
    for (r, s) in recs.iter().zip(&refs) {
        cols[0].push(metric_mse(r, s)?);
        cols[1].push(metric_psnr(r, s)?);
        cols[2].push(metric_ssim(r, s)?);
    }
    let mut out = metrics_rows(&recs, &refs, None)?;
    let stats: Vec<(f64, f64)> = cols.iter().map(|c| mean_std(c)).collect();
    writeln!(out, "mean,{},{},{}", stats[0].0, stats[1].0, stats[2].0).unwrap();
    writeln!(out, "std,{},{},{}", stats[0].1, stats[1].1, stats[2].1).unwrap();
    std::fs::write(&files[0], out)?;
    run.finish(&files)?;
    println!(
        "{} sequences: PSNR {:.2} +/- {:.2} dB, SSIM {:.4} +/- {:.4}",
        recs.len(),
        stats[1].0,
        stats[1].1,
        stats[2].0,
        stats[2].1
    );
    Ok(())
}

pub fn gradcheck_cmd(run: &Run) -> Result<()> {
    let files = run.outputs(&["gradcheck.csv"])?;
    let results = run_all(run.config.seed);
    let mut csv = String::from("name,coordinates,rel_error,tolerance,passed\n");
    for r in &results {
        println!("{r}");
        writeln!(
            csv,
            "{},{},{:e},{:e},{}",
            r.name, r.coordinates, r.rel_error, r.tolerance, r.passed
        )
        .unwrap();
    }
    std::fs::write(&files[0], csv)?;
    run.finish(&files)?;
    let failed: Vec<&str> = results
        .iter()
        .filter(|r| !r.passed)
        .map(|r| r.name.as_str())
        .collect();
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Error::Numerical(format!(
            "gradient check failed for {}",
            failed.join(", ")
        )))
    }
}
