//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any criterion fails.
//!
//! Run a subset with `cargo test -p dmri --test acceptance -- 1 3 4`.

use std::io::Write;
use std::time::Instant;

use dmri::baseline::{cs_reconstruct, CsConfig};
use dmri::data::{
    generate_phantom, metric_psnr, shear_patches, simulate_samples, PatchSpec, PhantomConfig,
    Sample,
};
use dmri::gradcheck::run_all;
use dmri::kspace::{
    fft2_per_frame, forward_model, generate_mask, ifft2_per_frame, undersampled_fft,
    undersampled_ifft, zero_filled_recon, ComplexImageSequence, MaskConfig, NoiseModel,
};
use dmri::losses::{tv_field, tv_statistic, LossConfig, TvKind};
use dmri::network::{
    kpn_forward, kspace_consistency, rdn_body, Bound, DcMode, DcTerms, ModelParams, NetworkConfig,
};
use dmri::tensor::{Boundary, Tape, Tensor};
use dmri::training::{reconstruct, train, write_log_csv, TrainConfig, TrainOutcome};
use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Outcome {
    pass: bool,
    detail: String,
}

type Criterion = (usize, &'static str, f64, fn() -> Outcome);

/// `(id, title, runtime budget in seconds, check)`.
const CRITERIA: [Criterion; 9] = [
    (1, "operator correctness", 10.0, operators),
    (2, "autodiff correctness", 300.0, autodiff),
    (3, "TV oracle equivalence", 60.0, tv_oracles),
    (4, "architecture audit", 60.0, architecture),
    (5, "mask statistics", 60.0, mask_statistics),
    (6, "baseline efficacy", 300.0, baseline_efficacy),
    (7, "learning efficacy", 3600.0, learning_efficacy),
    (8, "edge-enhanced loss effect", 4.0 * 3600.0, tv_loss_effect),
    (9, "reproducibility", f64::INFINITY, reproducibility),
];

fn main() {
    let wanted: Vec<usize> = std::env::args()
        .skip(1)
        .filter_map(|a| a.parse().ok())
        .collect();
    let mut failed = 0;
    for (id, title, budget, check) in CRITERIA {
        if !wanted.is_empty() && !wanted.contains(&id) {
            continue;
        }
        let start = Instant::now();
        let outcome = check();
        let secs = start.elapsed().as_secs_f64();
        // Criterion 7's budget is stated for 8 cores; it is reported, not
        // enforced, on smaller machines.
        let cores = std::thread::available_parallelism().map_or(1, |n| n.get());
        let enforce = id != 7 || cores >= 8;
        let in_budget = secs < budget || !enforce;
        let pass = outcome.pass && in_budget;
        if !pass {
            failed += 1;
        }
        let budget_note = if budget.is_finite() {
            format!(
                ", budget {budget:.0}s{}",
                if enforce {
                    ""
                } else {
                    " on 8 cores, not enforced"
                }
            )
        } else {
            String::new()
        };
        let line = format!(
            "{} criterion {id} ({title}): {} [{secs:.1}s on {cores} core(s){budget_note}]",
            if pass { "PASS" } else { "FAIL" },
            outcome.detail
        );
        let mut out = std::io::stdout().lock();
        writeln!(out, "{line}").unwrap();
        out.flush().unwrap();
    }
    if failed > 0 {
        eprintln!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
}

fn progress(msg: impl AsRef<str>) {
    eprintln!("    {}", msg.as_ref());
}

fn random_seq(nx: usize, ny: usize, nt: usize, rng: &mut ChaCha8Rng) -> ComplexImageSequence {
    ComplexImageSequence::from_fn(nx, ny, nt, |_, _, _| {
        Complex64::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0))
    })
    .unwrap()
}

/// Centered orthonormal 2-D DFT of one frame by direct summation.
fn naive_dft(seq: &ComplexImageSequence, t: usize) -> Vec<Complex64> {
    let (nx, ny, _) = seq.geometry();
    let (cx, cy) = ((nx / 2) as f64, (ny / 2) as f64);
    let norm = 1.0 / ((nx * ny) as f64).sqrt();
    let mut out = vec![Complex64::new(0.0, 0.0); nx * ny];
    for ky in 0..ny {
        for kx in 0..nx {
            let mut acc = Complex64::new(0.0, 0.0);
            for y in 0..ny {
                for x in 0..nx {
                    let phase = -2.0
                        * std::f64::consts::PI
                        * ((kx as f64 - cx) * (x as f64 - cx) / nx as f64
                            + (ky as f64 - cy) * (y as f64 - cy) / ny as f64);
                    acc += seq.at(x, y, t) * Complex64::from_polar(1.0, phase);
                }
            }
            out[ky * nx + kx] = acc * norm;
        }
    }
    out
}

fn operators() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let (mut roundtrip, mut adjoint) = (0.0f64, 0.0f64);
    for i in 0..100 {
        let x = random_seq(32, 32, 4, &mut rng);
        let y = random_seq(32, 32, 4, &mut rng);
        let mask = generate_mask(32, 32, 4, 4.0, 6, i).unwrap();
        roundtrip = roundtrip.max(ifft2_per_frame(&fft2_per_frame(&x)).max_abs_diff(&x));
        let lhs = undersampled_fft(&x, &mask).unwrap().dot(&y);
        let rhs = x.dot(&undersampled_ifft(&y, &mask).unwrap());
        adjoint = adjoint.max((lhs - rhs).norm() / lhs.norm().max(rhs.norm()));
    }
    let mut dft = 0.0f64;
    for (nx, ny) in [(8, 6), (5, 7)] {
        let x = random_seq(nx, ny, 2, &mut rng);
        let k = fft2_per_frame(&x);
        for t in 0..2 {
            for (a, b) in naive_dft(&x, t).iter().zip(k.frame(t)) {
                dft = dft.max((a - b).norm());
            }
        }
    }
    Outcome {
        pass: roundtrip <= 1e-6 && adjoint <= 1e-6 && dft <= 1e-9,
        detail: format!(
            "roundtrip max-abs {roundtrip:.2e}, adjoint rel {adjoint:.2e} (tol 1e-6, 100 instances); \
             direct-DFT max-abs {dft:.2e}"
        ),
    }
}

fn autodiff() -> Outcome {
    let mut worst_layer = 0.0f64;
    let mut pipeline = 0.0f64;
    let mut failures = Vec::new();
    for seed in 0..5 {
        for r in run_all(seed) {
            progress(format!("seed {seed}: {r}"));
            if !r.passed {
                failures.push(r.name.clone());
            }
            if r.name.starts_with("crdn") {
                pipeline = pipeline.max(r.rel_error);
            } else {
                worst_layer = worst_layer.max(r.rel_error);
            }
        }
    }
    Outcome {
        pass: failures.is_empty() && worst_layer <= 1e-4 && pipeline <= 1e-3,
        detail: format!(
            "worst layer/TV rel error {worst_layer:.2e} (tol 1e-4), CRDN-tiny end-to-end {pipeline:.2e} \
             (tol 1e-3){}",
            if failures.is_empty() { String::new() } else { format!("; failing: {failures:?}") }
        ),
    }
}

/// Scalar-loop anisotropic / isotropic TV, replicate forward differences,
/// mean over pixels and frames.
fn tv_loop(s: &ComplexImageSequence, iso: bool, eps: f64) -> f64 {
    let (nx, ny, nt) = s.geometry();
    let mut total = 0.0;
    for t in 0..nt {
        for y in 0..ny {
            for x in 0..nx {
                let v = s.at(x, y, t);
                let dx = s.at((x + 1).min(nx - 1), y, t) - v;
                let dy = s.at(x, (y + 1).min(ny - 1), t) - v;
                total += if iso {
                    (dx.norm_sqr() + dy.norm_sqr() + eps).sqrt()
                } else {
                    (dx.norm_sqr() + eps).sqrt() + (dy.norm_sqr() + eps).sqrt()
                };
            }
        }
    }
    total / (nx * ny * nt) as f64
}

fn field(s: &ComplexImageSequence, kind: TvKind) -> Tensor<f64> {
    let tape = Tape::<f64>::new();
    let (nx, ny, nt) = s.geometry();
    let x = tape.constant(s.to_tensor::<f64>().reshape(&[1, 2, nt, ny, nx]).unwrap());
    let f = tv_field(x, kind, 0.0, Boundary::Replicate)
        .unwrap()
        .value()
        .clone();
    f
}

/// Largest deviation from `want` over pixels at least `margin` from every edge.
fn interior_error(s: &ComplexImageSequence, kind: TvKind, margin: usize, want: f64) -> f64 {
    let (nx, ny, _) = s.geometry();
    let f = field(s, kind);
    let mut worst = 0.0f64;
    for y in margin..ny - margin {
        for x in margin..nx - margin {
            worst = worst.max((f.data()[y * nx + x] - want).abs());
        }
    }
    worst
}

fn real_image(n: usize, f: impl Fn(f64, f64) -> f64) -> ComplexImageSequence {
    ComplexImageSequence::from_fn(n, n, 1, |x, y, _| {
        Complex64::new(f(x as f64, y as f64), 0.0)
    })
    .unwrap()
}

fn tv_oracles() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut loop_err = 0.0f64;
    for i in 0..20 {
        let s = random_seq(
            rng.random_range(2..12),
            rng.random_range(2..12),
            rng.random_range(1..4),
            &mut rng,
        );
        let eps = if i % 2 == 0 { 0.0 } else { 1e-8 };
        for (kind, iso) in [(TvKind::Aniso, false), (TvKind::Iso, true)] {
            let want = tv_loop(&s, iso, eps);
            let got = tv_statistic(&s, kind, eps).unwrap();
            loop_err = loop_err.max((got - want).abs() / want.abs());
        }
    }
    // one unit x-jump in a 1x4 frame: unnormalized value 1
    let step = ComplexImageSequence::from_fn(4, 1, 1, |x, _, _| {
        Complex64::new((x >= 2) as u8 as f64, 0.0)
    })
    .unwrap();
    let step_err = (tv_statistic(&step, TvKind::Aniso, 0.0).unwrap() * 4.0 - 1.0).abs();

    let n = 12;
    let mut hand = Vec::new();
    let affine = real_image(n, |x, y| 3.0 + 2.0 * x - 5.0 * y);
    hand.push((
        "2dtv affine",
        interior_error(&affine, TvKind::Hdtv2, 1, 0.0),
    ));
    hand.push((
        "2dtv x^2",
        interior_error(
            &real_image(n, |x, _| x * x),
            TvKind::Hdtv2,
            1,
            1.5f64.sqrt(),
        ),
    ));
    hand.push((
        "2dtv y^2",
        interior_error(
            &real_image(n, |_, y| y * y),
            TvKind::Hdtv2,
            1,
            1.5f64.sqrt(),
        ),
    ));
    hand.push((
        "2dtv xy",
        interior_error(
            &real_image(n, |x, y| x * y),
            TvKind::Hdtv2,
            1,
            0.5f64.sqrt(),
        ),
    ));
    let quad = real_image(n, |x, y| x * x - 3.0 * x * y + 2.0 * y * y + x);
    hand.push((
        "3dtv quadratic",
        interior_error(&quad, TvKind::Hdtv3, 2, 0.0),
    ));
    let c3 = (5.0f64 * 36.0).sqrt() / (4.0 * 2f64.sqrt());
    hand.push((
        "3dtv x^3",
        interior_error(&real_image(n, |x, _| x * x * x), TvKind::Hdtv3, 2, c3),
    ));
    hand.push((
        "3dtv y^3",
        interior_error(&real_image(n, |_, y| y * y * y), TvKind::Hdtv3, 2, c3),
    ));
    let c21 = (9.0f64 * 4.0).sqrt() / (4.0 * 2f64.sqrt());
    hand.push((
        "3dtv x^2 y",
        interior_error(&real_image(n, |x, y| x * x * y), TvKind::Hdtv3, 2, c21),
    ));
    let worst_hand = hand.iter().map(|h| h.1).fold(0.0, f64::max);

    // 90-degree rotation of a radial bump leaves the higher-degree TVs unchanged
    let bump = |x: f64, y: f64| (-((x - 8.3).powi(2) + (y - 7.1).powi(2)) / 9.0).exp();
    let a = ComplexImageSequence::from_fn(16, 16, 1, |x, y, _| {
        Complex64::new(bump(x as f64, y as f64), 0.0)
    })
    .unwrap();
    let b = ComplexImageSequence::from_fn(16, 16, 1, |x, y, _| {
        Complex64::new(bump(y as f64, 15.0 - x as f64), 0.0)
    })
    .unwrap();
    let mut rotation = 0.0f64;
    for kind in [TvKind::Hdtv2, TvKind::Hdtv3] {
        let (va, vb) = (
            tv_statistic(&a, kind, 0.0).unwrap(),
            tv_statistic(&b, kind, 0.0).unwrap(),
        );
        rotation = rotation.max((va - vb).abs() / va);
    }
    // global phase rotation leaves every TV unchanged
    let z = random_seq(9, 7, 2, &mut rng);
    let rotated = ComplexImageSequence::from_fn(9, 7, 2, |x, y, t| {
        z.at(x, y, t) * Complex64::from_polar(1.0, 0.7)
    })
    .unwrap();
    let mut phase = 0.0f64;
    for kind in [TvKind::Aniso, TvKind::Iso, TvKind::Hdtv2, TvKind::Hdtv3] {
        let (va, vb) = (
            tv_statistic(&z, kind, 1e-8).unwrap(),
            tv_statistic(&rotated, kind, 1e-8).unwrap(),
        );
        phase = phase.max((va - vb).abs() / va);
    }
    let exact_zero = hand
        .iter()
        .filter(|h| h.0.ends_with("affine") || h.0.ends_with("quadratic"))
        .all(|h| h.1 == 0.0);
    Outcome {
        pass: loop_err <= 1e-6 && step_err <= 1e-12 && worst_hand <= 1e-12 && exact_zero && rotation <= 1e-6 && phase <= 1e-6,
        detail: format!(
            "aniso/iso vs loop {loop_err:.2e} (tol 1e-6); unit step {step_err:.1e}; hand-derived 2DTV/3DTV \
             worst {worst_hand:.1e} over {} images, exact zeros {exact_zero}; 90-degree rotation {rotation:.1e}; \
             phase rotation {phase:.1e}",
            hand.len()
        ),
    }
}

fn architecture() -> Outcome {
    let cfg = NetworkConfig::default();
    let census = cfg.census();
    let params = ModelParams::<f64>::random(&cfg, 5, 1.0).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let reference = random_seq(16, 16, 4, &mut rng);
    let mask = generate_mask(16, 16, 4, 4.0, 4, 9).unwrap();
    let k_u = forward_model(&reference, &mask, NoiseModel { sigma: 0.01 }, 10).unwrap();

    let tape = Tape::<f64>::new();
    let bound = Bound::constants(&tape, &params);
    let dc = DcTerms::from_kspace(&tape, &k_u, DcMode::Hard).unwrap();
    let measured = |k: &Tensor<f64>| -> f64 {
        let kt = k_u.samples().to_tensor::<f64>();
        let m = mask.to_tensor::<f64>(2);
        let mut worst = 0.0f64;
        for ((a, b), w) in k.data().iter().zip(kt.data()).zip(m.data()) {
            if *w == 1.0 {
                worst = worst.max((a - b).abs());
            }
        }
        worst
    };
    // exact fidelity of every DC output in k-space
    let k = kpn_forward(dc.k_u, &bound, &cfg, &dc).unwrap();
    let mut kspace = measured(&k.value());
    let mut img = k.ifft2().unwrap();
    for b in 0..cfg.num_rdn_blocks {
        let body = rdn_body(img, &bound, &cfg, b).unwrap();
        let kd = kspace_consistency(body.fft2().unwrap(), &dc).unwrap();
        kspace = kspace.max(measured(&kd.value()));
        img = kd.ifft2().unwrap();
    }
    // and of the image after one more forward transform
    let image = measured(&img.fft2().unwrap().value());
    Outcome {
        pass: census.total_layers == 25 && kspace == 0.0 && image <= 1e-12,
        detail: format!(
            "{census}; hard-DC max |mask(FFT(out) - K_u)|: {kspace:e} at each DC output, \
             {image:.1e} after the final inverse/forward FFT pair"
        ),
    }
}

/// Spearman correlation with average ranks for ties.
fn spearman(a: &[f64], b: &[f64]) -> f64 {
    fn ranks(v: &[f64]) -> Vec<f64> {
        let mut idx: Vec<usize> = (0..v.len()).collect();
        idx.sort_by(|&i, &j| v[i].total_cmp(&v[j]));
        let mut r = vec![0.0; v.len()];
        let mut i = 0;
        while i < idx.len() {
            let mut j = i;
            while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
                j += 1;
            }
            for k in i..=j {
                r[idx[k]] = (i + j) as f64 / 2.0;
            }
            i = j + 1;
        }
        r
    }
    let (ra, rb) = (ranks(a), ranks(b));
    let n = a.len() as f64;
    let (ma, mb) = (ra.iter().sum::<f64>() / n, rb.iter().sum::<f64>() / n);
    let cov: f64 = ra.iter().zip(&rb).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = ra.iter().map(|x| (x - ma).powi(2)).sum();
    let vb: f64 = rb.iter().map(|y| (y - mb).powi(2)).sum();
    cov / (va * vb).sqrt()
}

fn mask_statistics() -> Outcome {
    let (ny, nt) = (192, 10_000);
    let mask = generate_mask(1, ny, nt, 4.0, 6, 2024).unwrap();
    let acs = mask.acs_range();
    let acs_ok = (0..nt).all(|t| acs.clone().all(|ky| mask.is_sampled(t, ky)));
    let counts: Vec<usize> = (0..nt).map(|t| mask.lines_in_frame(t)).collect();
    let (lo, hi) = (*counts.iter().min().unwrap(), *counts.iter().max().unwrap());
    let freq = mask.line_frequency();
    let sigma = ny as f64 / 6.0;
    let center = (ny / 2) as f64;
    let pdf: Vec<f64> = (0..ny)
        .map(|ky| (-((ky as f64 - center) / sigma).powi(2) / 2.0).exp())
        .collect();
    let rho = spearman(&freq, &pdf);
    Outcome {
        pass: acs_ok && lo + 1 >= 48 && hi <= 49 && rho > 0.95,
        detail: format!(
            "ACS present in all {nt} frames: {acs_ok}; lines per frame {lo}..{hi} (target 48 +/- 1); \
             Spearman rho vs Gaussian pdf {rho:.4} (> 0.95)"
        ),
    }
}

fn baseline_efficacy() -> Outcome {
    let img = generate_phantom(&PhantomConfig {
        nx: 64,
        ny: 64,
        nt: 8,
        smooth_phase: false,
        seed: 3,
        ..PhantomConfig::default()
    })
    .unwrap();
    let mask = MaskConfig::default().generate(64, 64, 8, 11).unwrap();
    let k = forward_model(&img, &mask, NoiseModel::default(), 12).unwrap();
    let zf = metric_psnr(&zero_filled_recon(&k), &img).unwrap();
    let mut best = (f64::NEG_INFINITY, 0.0, false);
    for lambda in [1e-3, 3e-3, 1e-2, 3e-2, 1e-1] {
        let r = cs_reconstruct(
            &k,
            &CsConfig {
                lambda,
                iterations: 200,
                ..CsConfig::default()
            },
        )
        .unwrap();
        let p = metric_psnr(&r.image, &img).unwrap();
        let monotone = r.trace.windows(2).all(|w| w[1] <= w[0]);
        progress(format!(
            "lambda {lambda}: psnr {p:.2} dB, non-increasing trace {monotone}"
        ));
        if p > best.0 {
            best = (p, lambda, monotone);
        }
    }
    let gain = best.0 - zf;
    Outcome {
        pass: gain >= 2.0 && best.2,
        detail: format!(
            "zero-filled {zf:.2} dB, CS (aniso, lambda {}) {:.2} dB, gain {gain:.2} dB (>= 2); trace non-increasing {}",
            best.1, best.0, best.2
        ),
    }
}

/// `32x32x8` patches sheared from `48x48x12` phantoms, simulated at R = 4.
fn patch_pairs(
    phantom_seeds: std::ops::Range<u64>,
    take_every: usize,
    limit: usize,
    sim_seed: u64,
) -> Vec<Sample> {
    let spec = PatchSpec {
        size: [32, 32, 8],
        stride: [8, 8, 4],
    };
    let mut refs = Vec::new();
    for seed in phantom_seeds {
        let v = generate_phantom(&PhantomConfig {
            nx: 48,
            ny: 48,
            nt: 12,
            seed,
            ..PhantomConfig::default()
        })
        .unwrap();
        refs.extend(
            shear_patches(&v, &spec)
                .unwrap()
                .into_iter()
                .step_by(take_every),
        );
        if refs.len() >= limit {
            break;
        }
    }
    refs.truncate(limit);
    simulate_samples(
        &refs,
        &MaskConfig::default(),
        NoiseModel::default(),
        sim_seed,
    )
    .unwrap()
}

/// Held-out sequences: one central patch from each of `n` unseen phantoms.
fn test_pairs(n: usize) -> Vec<Sample> {
    let spec = PatchSpec {
        size: [32, 32, 8],
        stride: [8, 8, 4],
    };
    let refs: Vec<_> = (0..n as u64)
        .map(|i| {
            let v = generate_phantom(&PhantomConfig {
                nx: 48,
                ny: 48,
                nt: 12,
                seed: 1_000_000 + i,
                ..PhantomConfig::default()
            })
            .unwrap();
            shear_patches(&v, &spec).unwrap().swap_remove(4)
        })
        .collect();
    simulate_samples(
        &refs,
        &MaskConfig::default(),
        NoiseModel::default(),
        900_000,
    )
    .unwrap()
}

fn mean_psnr(params: &ModelParams<f32>, test: &[Sample]) -> (f64, Vec<ComplexImageSequence>) {
    let recs: Vec<_> = test
        .iter()
        .map(|s| reconstruct(params, s).unwrap())
        .collect();
    let p = recs
        .iter()
        .zip(test)
        .map(|(r, s)| metric_psnr(r, &s.reference).unwrap())
        .sum::<f64>()
        / test.len() as f64;
    (p, recs)
}

fn zero_filled_psnr(test: &[Sample]) -> f64 {
    test.iter()
        .map(|s| metric_psnr(&zero_filled_recon(&s.k_u), &s.reference).unwrap())
        .sum::<f64>()
        / test.len() as f64
}

fn log_epochs(tag: &'static str) -> impl FnMut(&dmri::training::EpochRecord) {
    move |r| {
        let val = r
            .val_psnr
            .map(|p| format!(", val psnr {p:.2}"))
            .unwrap_or_default();
        progress(format!(
            "{tag} epoch {:>2}: loss {:.3e}{val} ({:.0}s)",
            r.epoch, r.train_loss, r.wall_seconds
        ));
    }
}

fn learning_efficacy() -> Outcome {
    // 556 pairs with a 10% validation split leave 500 for training
    let samples = patch_pairs(0..1000, 1, 556, 100);
    let test = test_pairs(20);
    let cfg = TrainConfig {
        batch_size: 10,
        initial_lr: 1e-3,
        lr_decay: 0.95,
        epochs: 50,
        seed: 7,
        validation_fraction: 0.1,
        ..TrainConfig::default()
    };
    let out: TrainOutcome<f32> = train(
        &samples,
        &NetworkConfig::tiny(),
        &cfg,
        log_epochs("crdn-tiny"),
    )
    .unwrap();
    let zf = zero_filled_psnr(&test);
    let (p, _) = mean_psnr(&out.best, &test);
    let n_train = samples.len() - out.validation_indices.len();
    Outcome {
        pass: p - zf >= 3.0 && n_train >= 500 && test.len() >= 20,
        detail: format!(
            "{n_train} training pairs, 50 epochs, best epoch {}: test PSNR {p:.2} dB vs zero-filled {zf:.2} dB, \
             gain {:.2} dB (>= 3, {} test sequences)",
            out.best_epoch,
            p - zf,
            test.len()
        ),
    }
}

fn tv_loss_effect() -> Outcome {
    let samples = patch_pairs(0..1000, 1, 160, 200);
    let test = test_pairs(20);
    let gt_tv = test
        .iter()
        .map(|s| tv_statistic(&s.reference, TvKind::Aniso, 0.0).unwrap())
        .sum::<f64>()
        / test.len() as f64;
    let run = |kind: TvKind, weight: f64| -> (f64, f64) {
        let cfg = TrainConfig {
            batch_size: 4,
            initial_lr: 1e-3,
            lr_decay: 0.95,
            epochs: 10,
            seed: 11,
            validation_fraction: 0.0,
            loss: LossConfig {
                tv_kind: kind,
                tv_weight: weight,
                smoothing_eps: 1e-8,
            },
            ..TrainConfig::default()
        };
        let out: TrainOutcome<f32> = train(&samples, &NetworkConfig::tiny(), &cfg, |_| {}).unwrap();
        let (p, recs) = mean_psnr(&out.last, &test);
        let tv = recs
            .iter()
            .map(|r| tv_statistic(r, TvKind::Aniso, 0.0).unwrap())
            .sum::<f64>()
            / recs.len() as f64;
        progress(format!(
            "{kind} weight {weight}: psnr {p:.2} dB, aniso TV {tv:.5} (ground truth {gt_tv:.5})"
        ));
        (p, tv)
    };
    let (p_none, tv_none) = run(TvKind::None, 0.0);
    let weights = [3e-4, 1e-3, 3e-3];
    let mut sweep = Vec::new();
    for w in weights {
        sweep.push((w, run(TvKind::Aniso, w)));
    }
    let ok =
        |(p, tv): (f64, f64)| p >= p_none - 0.1 && (tv - gt_tv).abs() < (tv_none - gt_tv).abs();
    let winners: Vec<String> = sweep
        .iter()
        .filter(|(_, r)| ok(*r))
        .map(|(w, _)| format!("{w}"))
        .collect();
    // ranking of the four penalties at the best-PSNR aniso weight
    let (w_rank, aniso_best) = sweep
        .iter()
        .map(|&(w, r)| (w, r))
        .max_by(|a, b| a.1 .0.total_cmp(&b.1 .0))
        .unwrap();
    let mut ranking = vec![(TvKind::Aniso, aniso_best.0)];
    for kind in [TvKind::Iso, TvKind::Hdtv2, TvKind::Hdtv3] {
        ranking.push((kind, run(kind, w_rank).0));
    }
    ranking.sort_by(|a, b| b.1.total_cmp(&a.1));
    let ranking: Vec<String> = ranking.iter().map(|(k, p)| format!("{k} {p:.2}")).collect();
    let sweep_s: Vec<String> = sweep
        .iter()
        .map(|(w, (p, tv))| format!("w={w}: {p:.2} dB / TV {tv:.4}"))
        .collect();
    Outcome {
        pass: !winners.is_empty(),
        detail: format!(
            "none: {p_none:.2} dB / TV {tv_none:.4} (ground truth TV {gt_tv:.4}); aniso sweep [{}]; {}; \
             ranking at w={w_rank}: {} (reported only)",
            sweep_s.join(", "),
            if winners.is_empty() {
                "no swept weight meets both conditions".to_string()
            } else {
                format!("weights meeting both conditions: {}", winners.join(", "))
            },
            ranking.join(" > ")
        ),
    }
}

fn reproducibility() -> Outcome {
    let samples = patch_pairs(0..2, 6, 6, 300);
    let cfg = TrainConfig {
        batch_size: 2,
        initial_lr: 1e-3,
        epochs: 2,
        seed: 5,
        validation_fraction: 0.34,
        loss: LossConfig {
            tv_kind: TvKind::Iso,
            tv_weight: 1e-3,
            smoothing_eps: 1e-8,
        },
        ..TrainConfig::default()
    };
    let net = NetworkConfig {
        growth_channels: 4,
        base_channels: 6,
        kpn_channels: 4,
        ..NetworkConfig::tiny()
    };
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(1)
        .build()
        .unwrap();
    let run = || -> (String, u32, u32) {
        pool.install(|| {
            let out: TrainOutcome<f64> = train(&samples, &net, &cfg, |_| {}).unwrap();
            let mut csv = Vec::new();
            write_log_csv(&out.log, &mut csv).unwrap();
            let csv = String::from_utf8(csv).unwrap();
            let ckpt = crc32fast::hash(&out.best.to_bytes());
            let recs: Vec<u8> = samples
                .iter()
                .flat_map(|s| {
                    reconstruct(&out.best, s)
                        .unwrap()
                        .data()
                        .iter()
                        .flat_map(|c| [c.re.to_le_bytes(), c.im.to_le_bytes()])
                        .flatten()
                        .collect::<Vec<_>>()
                })
                .collect();
            (csv, ckpt, crc32fast::hash(&recs))
        })
    };
    let a = run();
    let b = run();
    Outcome {
        pass: a == b,
        detail: format!(
            "two f64 single-worker runs: log CSV identical {}, checkpoint CRC {:08x}/{:08x}, reconstruction CRC {:08x}/{:08x}",
            a.0 == b.0,
            a.1,
            b.1,
            a.2,
            b.2
        ),
    }
}
