//! Finite-difference verification of every differentiable building block.
//!
//! All checks run in `f64` with central differences. The error reported is
//! norm-wise: `||analytic - numeric|| / max(||analytic||, ||numeric||)`.

use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::data::Sample;
use crate::kspace::{forward_model, generate_mask, ComplexImageSequence, NoiseModel};
use crate::losses::{mse_loss, total_loss, tv_loss, LossConfig, TvKind};
use crate::network::{
    crdn_forward_var, data_consistency, kpn_forward, rdb_forward, rdn_forward, Bound, DcMode,
    DcTerms, ModelParams, NetworkConfig,
};
use crate::tensor::{concat_channels, conv1x1, conv3d, Boundary, Stencil, Tape, Tensor, Var};
use crate::Result;

pub const DEFAULT_STEP: f64 = 1e-5;
pub const LAYER_TOLERANCE: f64 = 1e-4;
pub const PIPELINE_TOLERANCE: f64 = 1e-3;

#[derive(Clone, Debug, Serialize)]
pub struct CheckResult {
    pub name: String,
    pub coordinates: usize,
    pub rel_error: f64,
    pub tolerance: f64,
    pub passed: bool,
}

impl std::fmt::Display for CheckResult {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "{} {:<28} rel_error {:.3e} (tol {:.0e}, {} coords)",
            if self.passed { "PASS" } else { "FAIL" },
            self.name,
            self.rel_error,
            self.tolerance,
            self.coordinates
        )
    }
}

/// Which coordinates of each input to perturb.
#[derive(Clone, Copy, Debug)]
pub enum Coords {
    All,
    /// At most this many, drawn without replacement.
    Sample(usize),
}

pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    let diff = a
        .iter()
        .zip(b)
        .map(|(x, y)| (x - y).powi(2))
        .sum::<f64>()
        .sqrt();
    let scale = norm(a).max(norm(b)).max(f64::MIN_POSITIVE);
    if diff == 0.0 {
        0.0
    } else {
        diff / scale
    }
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Compares tape gradients of a scalar function of `inputs` with central
/// differences.
pub fn check<F>(
    name: &str,
    inputs: &[Tensor<f64>],
    f: F,
    coords: Coords,
    tolerance: f64,
    seed: u64,
) -> Result<CheckResult>
where
    F: for<'t> Fn(&'t Tape<f64>, &[Var<'t, f64>]) -> Result<Var<'t, f64>>,
{
    let tape = Tape::new();
    let vars: Vec<_> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let out = f(&tape, &vars)?;
    let grads = tape.backward(out)?;
    let analytic: Vec<Tensor<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(v, t)| {
            grads
                .get(*v)
                .cloned()
                .unwrap_or_else(|| Tensor::zeros(t.shape()))
        })
        .collect();

    let eval = |perturbed: &[Tensor<f64>]| -> Result<f64> {
        let tape = Tape::new();
        let vars: Vec<_> = perturbed.iter().map(|t| tape.constant(t.clone())).collect();
        let v = f(&tape, &vars)?.value().item()?;
        Ok(v)
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut a = Vec::new();
    let mut n = Vec::new();
    let mut work = inputs.to_vec();
    for (i, input) in inputs.iter().enumerate() {
        let mut idx: Vec<usize> = (0..input.len()).collect();
        if let Coords::Sample(k) = coords {
            for j in 0..k.min(idx.len()) {
                let r = rng.random_range(j..idx.len());
                idx.swap(j, r);
            }
            idx.truncate(k);
        }
        for j in idx {
            let x0 = input.data()[j];
            let h = DEFAULT_STEP * x0.abs().max(1.0);
            work[i].data_mut()[j] = x0 + h;
            let fp = eval(&work)?;
            work[i].data_mut()[j] = x0 - h;
            let fm = eval(&work)?;
            work[i].data_mut()[j] = x0;
            n.push((fp - fm) / (2.0 * h));
            a.push(analytic[i].data()[j]);
        }
    }
    let rel_error = relative_error(&a, &n);
    Ok(CheckResult {
        name: name.to_string(),
        coordinates: a.len(),
        rel_error,
        tolerance,
        passed: rel_error <= tolerance,
    })
}

fn uniform(shape: &[usize], rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(lo..hi))
}

/// Uniform values with `|x| >= gap`, away from the ReLU / abs kinks.
fn away_from_zero(shape: &[usize], rng: &mut ChaCha8Rng, gap: f64) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| {
        let v: f64 = rng.random_range(gap..1.0);
        if rng.random_bool(0.5) {
            v
        } else {
            -v
        }
    })
}

/// Projects a tensor-valued output onto fixed weights, giving a scalar.
fn project<'t>(tape: &'t Tape<f64>, y: Var<'t, f64>, seed: u64) -> Result<Var<'t, f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let w = tape.constant(uniform(&y.shape(), &mut rng, -1.0, 1.0));
    Ok(y.mul(w)?.sum())
}

fn random_sequence(nx: usize, ny: usize, nt: usize, rng: &mut ChaCha8Rng) -> ComplexImageSequence {
    ComplexImageSequence::from_fn(nx, ny, nt, |_, _, _| {
        Complex64::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0))
    })
    .expect("finite")
}

fn random_sample(nx: usize, ny: usize, nt: usize, seed: u64) -> Result<Sample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let reference = random_sequence(nx, ny, nt, &mut rng);
    let mask = generate_mask(nx, ny, nt, 2.0, 2, seed)?;
    let k_u = forward_model(&reference, &mask, NoiseModel::default(), seed)?;
    Ok(Sample { reference, k_u })
}

/// Network config used by the pipeline checks: every width small.
pub fn gradcheck_network() -> NetworkConfig {
    NetworkConfig {
        growth_channels: 3,
        base_channels: 4,
        kpn_channels: 3,
        ..NetworkConfig::tiny()
    }
}

/// One named check.
pub struct Suite {
    pub name: &'static str,
    run: fn(u64) -> Result<CheckResult>,
}

impl Suite {
    pub fn run(&self, seed: u64) -> Result<CheckResult> {
        (self.run)(seed)
    }
}

fn elementwise(seed: u64) -> Result<CheckResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let a = away_from_zero(&[3, 4], &mut rng, 0.1);
    let b = away_from_zero(&[3, 4], &mut rng, 0.1);
    check(
        "elementwise",
        &[a, b],
        |_, v| {
            // (a + b) * a - 0.5 b^2 + sqrt(a^2 + 1) + |b|, reduced by sum and mean
            let one = v[0].tape().constant(Tensor::ones(&[3, 4]));
            let t = v[0].add(v[1])?.mul(v[0])?.sub(v[1].square().scale(0.5))?;
            let t = t.add(v[0].square().add(one)?.sqrt())?.add(v[1].abs())?;
            t.sum().add(t.mean())
        },
        Coords::All,
        LAYER_TOLERANCE,
        seed,
    )
}

fn relu(seed: u64) -> Result<CheckResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = away_from_zero(&[2, 3, 4], &mut rng, 1e-3);
    check(
        "relu",
        &[x],
        |t, v| project(t, v[0].relu(), seed),
        Coords::All,
        LAYER_TOLERANCE,
        seed,
    )
}

fn conv3d_suite(seed: u64) -> Result<CheckResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = uniform(&[1, 2, 3, 4, 4], &mut rng, -1.0, 1.0);
    let k = uniform(&[2, 2, 3, 3, 3], &mut rng, -1.0, 1.0);
    let b = uniform(&[2], &mut rng, -1.0, 1.0);
    check(
        "conv3d",
        &[x, k, b],
        |t, v| project(t, conv3d(v[0], v[1], v[2], [1, 1, 1])?, seed),
        Coords::All,
        LAYER_TOLERANCE,
        seed,
    )
}

fn conv1x1_suite(seed: u64) -> Result<CheckResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = uniform(&[2, 3, 2, 3, 3], &mut rng, -1.0, 1.0);
    let k = uniform(&[4, 3, 1, 1, 1], &mut rng, -1.0, 1.0);
    let b = uniform(&[4], &mut rng, -1.0, 1.0);
    check(
        "conv1x1",
        &[x, k, b],
        |t, v| project(t, conv1x1(v[0], v[1], v[2])?, seed),
        Coords::All,
        LAYER_TOLERANCE,
        seed,
    )
}

fn concat_suite(seed: u64) -> Result<CheckResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let a = uniform(&[2, 1, 2, 3, 3], &mut rng, -1.0, 1.0);
    let b = uniform(&[2, 2, 2, 3, 3], &mut rng, -1.0, 1.0);
    check(
        "concat_channels",
        &[a, b],
        |t, v| project(t, concat_channels(&[v[0], v[1]])?, seed),
        Coords::All,
        LAYER_TOLERANCE,
        seed,
    )
}

fn channel_sum_and_stencil(seed: u64) -> Result<CheckResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = uniform(&[1, 2, 2, 5, 6], &mut rng, -1.0, 1.0);
    let s1 = Stencil::new(
        vec![(0, 1, 1.0), (0, 0, -1.0), (2, -1, 0.5)],
        Boundary::Replicate,
    );
    let s2 = Stencil::new(vec![(1, 1, 0.25), (-1, -2, -0.75)], Boundary::Circular);
    check(
        "stencil+sum_channels",
        &[x],
        |t, v| {
            project(
                t,
                v[0].stencil(&s1)?
                    .add(v[0].stencil(&s2)?)?
                    .square()
                    .sum_channels()?,
                seed,
            )
        },
        Coords::All,
        LAYER_TOLERANCE,
        seed,
    )
}

fn fourier(seed: u64) -> Result<CheckResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = uniform(&[1, 2, 2, 4, 5], &mut rng, -1.0, 1.0);
    check(
        "fft2/ifft2",
        &[x],
        |t, v| {
            let k = v[0].fft2()?;
            project(t, k.square().add(k.ifft2()?.scale(0.3))?, seed)
        },
        Coords::All,
        LAYER_TOLERANCE,
        seed,
    )
}

fn tv_suite(kind: TvKind, seed: u64) -> Result<CheckResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = uniform(&[1, 2, 2, 6, 7], &mut rng, -1.0, 1.0);
    check(
        &format!("tv_{kind}"),
        &[x],
        |_, v| tv_loss(v[0], kind, 1e-8),
        Coords::All,
        LAYER_TOLERANCE,
        seed,
    )
}

fn losses_suite(seed: u64) -> Result<CheckResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let rec = uniform(&[1, 2, 2, 5, 5], &mut rng, -1.0, 1.0);
    let reference = uniform(&[1, 2, 2, 5, 5], &mut rng, -1.0, 1.0);
    let cfg = LossConfig {
        tv_kind: TvKind::Hdtv2,
        tv_weight: 0.3,
        smoothing_eps: 1e-8,
    };
    check(
        "mse+total_loss",
        &[rec, reference],
        |_, v| mse_loss(v[0], v[1])?.add(total_loss(v[0], v[1], &cfg)?),
        Coords::All,
        LAYER_TOLERANCE,
        seed,
    )
}

fn dc_suite(mode: DcMode, seed: u64) -> Result<CheckResult> {
    let s = random_sample(6, 6, 2, seed)?;
    let x = s.reference.to_tensor::<f64>().reshape(&[1, 2, 2, 6, 6])?;
    let name = match mode {
        DcMode::Hard => "data_consistency_hard",
        DcMode::Soft { .. } => "data_consistency_soft",
    };
    check(
        name,
        &[x],
        |t, v| {
            let dc = DcTerms::from_kspace(t, &s.k_u, mode)?;
            project(t, data_consistency(v[0], &dc)?, seed)
        },
        Coords::All,
        LAYER_TOLERANCE,
        seed,
    )
}

/// Checks a block's output with respect to its input and all of its parameters.
fn block_suite(name: &'static str, seed: u64) -> Result<CheckResult> {
    let cfg = gradcheck_network();
    let params = ModelParams::<f64>::random(&cfg, seed, 1.0)?;
    let s = random_sample(5, 6, 3, seed)?;
    let (nx, ny, nt) = (5, 6, 3);
    let c0 = cfg.base_channels;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let input = match name {
        "rdb" => uniform(&[1, c0, nt, ny, nx], &mut rng, -1.0, 1.0),
        "kpn" => s
            .k_u
            .samples()
            .to_tensor::<f64>()
            .reshape(&[1, 2, nt, ny, nx])?,
        _ => s
            .reference
            .to_tensor::<f64>()
            .reshape(&[1, 2, nt, ny, nx])?,
    };
    let prefix = match name {
        "rdb" => "rdn0.rdb0.",
        "kpn" => "kpn.",
        _ => "rdn1.",
    };
    let selected: Vec<String> = params
        .names()
        .iter()
        .filter(|n| n.starts_with(prefix))
        .cloned()
        .collect();
    let mut inputs = vec![input];
    inputs.extend(
        selected
            .iter()
            .map(|n| params.get(n).expect("listed").clone()),
    );
    check(
        name,
        &inputs,
        |t, v| {
            let mut bound = Bound::constants(t, &params);
            for (n, var) in selected.iter().zip(&v[1..]) {
                bound.set(n, *var)?;
            }
            let dc = DcTerms::from_kspace(t, &s.k_u, DcMode::Hard)?;
            let y = match name {
                "rdb" => rdb_forward(v[0], &bound, &cfg, "rdn0.rdb0")?,
                "kpn" => kpn_forward(v[0], &bound, &cfg, &dc)?,
                _ => rdn_forward(v[0], &bound, &cfg, 1, &dc)?,
            };
            project(t, y, seed)
        },
        Coords::Sample(120),
        LAYER_TOLERANCE,
        seed,
    )
}

fn three_layer(seed: u64) -> Result<CheckResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = uniform(&[1, 2, 2, 4, 4], &mut rng, -1.0, 1.0);
    let k1 = uniform(&[3, 2, 3, 3, 3], &mut rng, -0.5, 0.5);
    let b1 = uniform(&[3], &mut rng, -0.1, 0.1);
    let k2 = uniform(&[3, 3, 3, 3, 3], &mut rng, -0.5, 0.5);
    let b2 = uniform(&[3], &mut rng, -0.1, 0.1);
    let k3 = uniform(&[2, 6, 1, 1, 1], &mut rng, -0.5, 0.5);
    let b3 = uniform(&[2], &mut rng, -0.1, 0.1);
    check(
        "three_layer_network",
        &[x, k1, b1, k2, b2, k3, b3],
        |t, v| {
            let h1 = conv3d(v[0], v[1], v[2], [1, 1, 1])?.relu();
            let h2 = conv3d(h1, v[3], v[4], [1, 1, 1])?.relu();
            let y = conv1x1(concat_channels(&[h1, h2])?, v[5], v[6])?;
            project(t, y, seed)
        },
        Coords::All,
        LAYER_TOLERANCE,
        seed,
    )
}

/// Full CRDN (tiny depth, narrow widths) loss gradient with respect to the
/// first k-space kernel, which every later layer depends on.
pub fn crdn_pipeline(seed: u64) -> Result<CheckResult> {
    let cfg = gradcheck_network();
    let params = ModelParams::<f64>::random(&cfg, seed, 1.0)?;
    let s = random_sample(6, 6, 4, seed)?;
    let target = "kpn.conv0.weight";
    let loss = LossConfig {
        tv_kind: TvKind::Aniso,
        tv_weight: 0.1,
        smoothing_eps: 1e-8,
    };
    check(
        "crdn_tiny_end_to_end",
        &[params.get(target).expect("kpn layer exists").clone()],
        |t, v| {
            let mut bound = Bound::constants(t, &params);
            bound.set(target, v[0])?;
            let dc = DcTerms::from_kspace(t, &s.k_u, cfg.dc_mode)?;
            let out = crdn_forward_var(&bound, &cfg, &dc)?;
            let (nx, ny, nt) = s.reference.geometry();
            let reference = t.constant(
                s.reference
                    .to_tensor::<f64>()
                    .reshape(&[1, 2, nt, ny, nx])?,
            );
            total_loss(out, reference, &loss)
        },
        Coords::All,
        PIPELINE_TOLERANCE,
        seed,
    )
}

pub fn suites() -> Vec<Suite> {
    vec![
        Suite {
            name: "elementwise",
            run: elementwise,
        },
        Suite {
            name: "relu",
            run: relu,
        },
        Suite {
            name: "conv3d",
            run: conv3d_suite,
        },
        Suite {
            name: "conv1x1",
            run: conv1x1_suite,
        },
        Suite {
            name: "concat_channels",
            run: concat_suite,
        },
        Suite {
            name: "stencil",
            run: channel_sum_and_stencil,
        },
        Suite {
            name: "fft2",
            run: fourier,
        },
        Suite {
            name: "tv_aniso",
            run: |s| tv_suite(TvKind::Aniso, s),
        },
        Suite {
            name: "tv_iso",
            run: |s| tv_suite(TvKind::Iso, s),
        },
        Suite {
            name: "tv_2dtv",
            run: |s| tv_suite(TvKind::Hdtv2, s),
        },
        Suite {
            name: "tv_3dtv",
            run: |s| tv_suite(TvKind::Hdtv3, s),
        },
        Suite {
            name: "losses",
            run: losses_suite,
        },
        Suite {
            name: "dc_hard",
            run: |s| dc_suite(DcMode::Hard, s),
        },
        Suite {
            name: "dc_soft",
            run: |s| dc_suite(DcMode::Soft { lambda: 0.7 }, s),
        },
        Suite {
            name: "three_layer",
            run: three_layer,
        },
        Suite {
            name: "kpn",
            run: |s| block_suite("kpn", s),
        },
        Suite {
            name: "rdb",
            run: |s| block_suite("rdb", s),
        },
        Suite {
            name: "rdn",
            run: |s| block_suite("rdn", s),
        },
        Suite {
            name: "crdn",
            run: crdn_pipeline,
        },
    ]
}

/// Runs every suite; errors inside a suite are reported as failures.
pub fn run_all(seed: u64) -> Vec<CheckResult> {
    suites()
        .iter()
        .map(|s| {
            s.run(seed).unwrap_or_else(|e| CheckResult {
                name: format!("{} ({e})", s.name),
                coordinates: 0,
                rel_error: f64::INFINITY,
                tolerance: 0.0,
                passed: false,
            })
        })
        .collect()
}
