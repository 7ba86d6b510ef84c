use dmri::data::Sample;
use dmri::kspace::{
    fft2_per_frame, forward_model, generate_mask, zero_filled_recon, ComplexImageSequence,
    KSpaceData, NoiseModel, SamplingMask,
};
use dmri::losses::LossConfig;
use dmri::network::*;
use dmri::tensor::{Tape, Tensor};
use dmri::training::gradient_norms;
use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_seq(nx: usize, ny: usize, nt: usize, seed: u64) -> ComplexImageSequence {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    ComplexImageSequence::from_fn(nx, ny, nt, |_, _, _| {
        Complex64::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0))
    })
    .unwrap()
}

fn sample(nx: usize, ny: usize, nt: usize, seed: u64) -> Sample {
    let reference = random_seq(nx, ny, nt, seed);
    let mask = generate_mask(nx, ny, nt, 4.0, 2, seed).unwrap();
    let k_u = forward_model(&reference, &mask, NoiseModel::default(), seed).unwrap();
    Sample { reference, k_u }
}

fn small() -> NetworkConfig {
    NetworkConfig {
        growth_channels: 4,
        base_channels: 6,
        kpn_channels: 5,
        ..NetworkConfig::tiny()
    }
}

/// Direct 6-deep loop, "same" zero padding.
fn naive_conv(x: &Tensor<f64>, w: &Tensor<f64>, b: &Tensor<f64>) -> Tensor<f64> {
    let (xs, ws) = (x.shape(), w.shape());
    let (n, cin, d, h, wd) = (xs[0], xs[1], xs[2], xs[3], xs[4]);
    let (cout, kd, kh, kw) = (ws[0], ws[2], ws[3], ws[4]);
    let mut out = Tensor::zeros(&[n, cout, d, h, wd]);
    let xi = |n_, c, z, y, x_| (((n_ * cin + c) * d + z) * h + y) * wd + x_;
    for ni in 0..n {
        for o in 0..cout {
            for z in 0..d {
                for y in 0..h {
                    for xx in 0..wd {
                        let mut acc = b.data()[o];
                        for c in 0..cin {
                            for a in 0..kd {
                                for bb in 0..kh {
                                    for e in 0..kw {
                                        let (zz, yy, x2) = (
                                            z as isize + a as isize - (kd / 2) as isize,
                                            y as isize + bb as isize - (kh / 2) as isize,
                                            xx as isize + e as isize - (kw / 2) as isize,
                                        );
                                        if zz < 0
                                            || yy < 0
                                            || x2 < 0
                                            || zz >= d as isize
                                            || yy >= h as isize
                                            || x2 >= wd as isize
                                        {
                                            continue;
                                        }
                                        let wv =
                                            w.data()[(((o * cin + c) * kd + a) * kh + bb) * kw + e];
                                        acc += wv
                                            * x.data()
                                                [xi(ni, c, zz as usize, yy as usize, x2 as usize)];
                                    }
                                }
                            }
                        }
                        out.data_mut()[(((ni * cout + o) * d + z) * h + y) * wd + xx] = acc;
                    }
                }
            }
        }
    }
    out
}

fn cat(parts: &[&Tensor<f64>]) -> Tensor<f64> {
    let s = parts[0].shape();
    let plane = s[2] * s[3] * s[4];
    let c: usize = parts.iter().map(|p| p.shape()[1]).sum();
    let mut data = Vec::with_capacity(c * plane);
    for p in parts {
        data.extend_from_slice(p.data());
    }
    Tensor::new(&[1, c, s[2], s[3], s[4]], data).unwrap()
}

#[test]
fn zero_initialized_network_returns_zero_filled() {
    let s = sample(12, 10, 3, 1);
    let params = ModelParams::<f64>::init(&NetworkConfig::tiny(), 4).unwrap();
    let out = crdn_forward(&s.k_u, &params).unwrap();
    assert!(out.max_abs_diff(&zero_filled_recon(&s.k_u)) < 1e-12);
}

#[test]
fn zero_initialized_rdb_is_identity() {
    let cfg = small();
    let params = ModelParams::<f64>::init(&cfg, 2).unwrap();
    let tape = Tape::new();
    let bound = Bound::constants(&tape, &params);
    let x = Tensor::from_fn(&[1, cfg.base_channels, 2, 4, 5], |i| {
        (i as f64 * 0.37).sin()
    });
    let y = rdb_forward(tape.constant(x.clone()), &bound, &cfg, "rdn0.rdb1").unwrap();
    assert_eq!(*y.value(), x);
}

#[test]
fn rdb_matches_loop_composition() {
    let cfg = NetworkConfig {
        num_rdbs_per_rdn: 1,
        convs_per_block: 4,
        ..small()
    };
    let params = ModelParams::<f64>::random(&cfg, 8, 1.0).unwrap();
    let p = |n: &str| params.get(n).unwrap();
    let x = Tensor::from_fn(&[1, cfg.base_channels, 3, 5, 4], |i| {
        ((i * 7919) % 101) as f64 / 50.0 - 1.0
    });
    let relu = |t: Tensor<f64>| t.map(|v| v.max(0.0));
    let h1 = relu(naive_conv(
        &x,
        p("rdn0.rdb0.conv0.weight"),
        p("rdn0.rdb0.conv0.bias"),
    ));
    let h2 = relu(naive_conv(
        &cat(&[&x, &h1]),
        p("rdn0.rdb0.conv1.weight"),
        p("rdn0.rdb0.conv1.bias"),
    ));
    let fused = naive_conv(
        &cat(&[&x, &h1, &h2]),
        p("rdn0.rdb0.lff.weight"),
        p("rdn0.rdb0.lff.bias"),
    );
    let want = x.zip_map(&fused, |a, b| a + b).unwrap();

    let tape = Tape::new();
    let bound = Bound::constants(&tape, &params);
    let got = rdb_forward(tape.constant(x), &bound, &cfg, "rdn0.rdb0").unwrap();
    let diff = got
        .value()
        .data()
        .iter()
        .zip(want.data())
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    assert!(diff < 1e-12, "{diff}");
}

#[test]
fn parameter_count_matches_closed_form() {
    for cfg in [NetworkConfig::default(), NetworkConfig::tiny(), small()] {
        let k: usize = cfg.kernel.iter().product();
        let conv = |cin: usize, cout: usize, k: usize| cin * cout * k + cout;
        let (c0, g, ck, l) = (
            cfg.base_channels,
            cfg.growth_channels,
            cfg.kpn_channels,
            cfg.convs_per_block,
        );
        let kpn = conv(2, ck, k) + (l - 2) * conv(ck, ck, k) + conv(ck, 2, k);
        let rdb = (0..cfg.convs_per_rdb)
            .map(|i| conv(c0 + i * g, g, k))
            .sum::<usize>()
            + conv(c0 + cfg.convs_per_rdb * g, c0, 1);
        let rdn = conv(2, c0, k)
            + cfg.num_rdbs_per_rdn * rdb
            + conv(cfg.num_rdbs_per_rdn * c0, c0, 1)
            + conv(c0, 2, k);
        let want = kpn + cfg.num_rdn_blocks * rdn;
        assert_eq!(
            ModelParams::<f32>::init(&cfg, 0).unwrap().num_scalars(),
            want
        );
    }
}

#[test]
fn random_configs_keep_shapes() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    for i in 0..20 {
        let d = rng.random_range(1..3);
        let k = [
            rng.random_range(0..2) * 2 + 1,
            rng.random_range(0..2) * 2 + 1,
            rng.random_range(0..2) * 2 + 1,
        ];
        let cfg = NetworkConfig {
            num_rdn_blocks: rng.random_range(1..3),
            convs_per_block: d + 3,
            num_rdbs_per_rdn: d,
            convs_per_rdb: rng.random_range(1..3),
            growth_channels: rng.random_range(1..4),
            base_channels: rng.random_range(1..5),
            kpn_channels: rng.random_range(1..4),
            kernel: k,
            dc_mode: if i % 2 == 0 {
                DcMode::Hard
            } else {
                DcMode::Soft { lambda: 2.0 }
            },
        };
        let s = sample(
            rng.random_range(4..9),
            rng.random_range(8..12),
            rng.random_range(1..4),
            i,
        );
        let params = ModelParams::<f32>::random(&cfg, i, 1.0).unwrap();
        let out = crdn_forward(&s.k_u, &params).unwrap();
        assert_eq!(out.geometry(), s.reference.geometry(), "{cfg:?}");
        assert!(out
            .data()
            .iter()
            .all(|c| c.re.is_finite() && c.im.is_finite()));
    }
}

fn sampled_max_error(img: &ComplexImageSequence, k: &KSpaceData) -> f64 {
    let (nx, ny, nt) = img.geometry();
    let f = fft2_per_frame(img);
    let mut worst = 0.0f64;
    for t in 0..nt {
        for y in 0..ny {
            if k.mask().is_sampled(t, y) {
                for x in 0..nx {
                    worst = worst.max((f.at(x, y, t) - k.samples().at(x, y, t)).norm());
                }
            }
        }
    }
    worst
}

#[test]
fn hard_dc_keeps_measured_samples() {
    let s = sample(10, 12, 3, 5);
    let params = ModelParams::<f64>::random(&small(), 3, 1.0).unwrap();
    let out = crdn_forward(&s.k_u, &params).unwrap();
    assert!(sampled_max_error(&out, &s.k_u) < 1e-12);
    // the network did change the unmeasured part
    assert!(out.max_abs_diff(&zero_filled_recon(&s.k_u)) > 1e-3);
}

#[test]
fn full_mask_yields_inverse_fft() {
    let reference = random_seq(8, 8, 2, 9);
    let k_u = forward_model(
        &reference,
        &SamplingMask::full(8, 8, 2),
        NoiseModel::default(),
        0,
    )
    .unwrap();
    let params = ModelParams::<f64>::random(&small(), 1, 1.0).unwrap();
    let out = crdn_forward(&k_u, &params).unwrap();
    assert!(out.max_abs_diff(&reference) < 1e-12);
}

fn dc_apply(x: &ComplexImageSequence, k: &KSpaceData, mode: DcMode) -> ComplexImageSequence {
    let tape = Tape::<f64>::new();
    let (nx, ny, nt) = x.geometry();
    let dc = DcTerms::from_kspace(&tape, k, mode).unwrap();
    let v = tape.constant(x.to_tensor::<f64>().reshape(&[1, 2, nt, ny, nx]).unwrap());
    let out = data_consistency(v, &dc).unwrap().value().clone();
    ComplexImageSequence::from_tensor(&out).unwrap()
}

#[test]
fn dc_contracts() {
    let x = random_seq(8, 6, 2, 1);
    let s = sample(8, 6, 2, 2);
    // empty mask: identity
    let empty = KSpaceData::from_dense(
        fft2_per_frame(&s.reference),
        &SamplingMask::from_lines(8, 6, 2, vec![false; 12], 0, 1.0).unwrap(),
    )
    .unwrap();
    assert!(dc_apply(&x, &empty, DcMode::Hard).max_abs_diff(&x) < 1e-12);
    // idempotent
    let once = dc_apply(&x, &s.k_u, DcMode::Hard);
    assert!(dc_apply(&once, &s.k_u, DcMode::Hard).max_abs_diff(&once) < 1e-12);
    // soft with a huge lambda approaches hard
    let soft = dc_apply(&x, &s.k_u, DcMode::Soft { lambda: 1e6 });
    assert!(soft.max_abs_diff(&once) < 1e-5);
    // soft with lambda = 0 changes nothing
    assert!(dc_apply(&x, &s.k_u, DcMode::Soft { lambda: 0.0 }).max_abs_diff(&x) < 1e-12);
}

#[test]
fn checkpoint_forward_is_bit_identical() {
    let s = sample(8, 8, 2, 3);
    let params = ModelParams::<f32>::random(&small(), 6, 0.5).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    params.save(&path).unwrap();
    let loaded = ModelParams::<f32>::load(&path).unwrap();
    assert_eq!(
        crdn_forward(&s.k_u, &params).unwrap(),
        crdn_forward(&s.k_u, &loaded).unwrap()
    );
}

#[test]
fn every_parameter_receives_gradient() {
    let s = sample(8, 8, 3, 4);
    let params = ModelParams::<f64>::random(&small(), 2, 1.0).unwrap();
    let norms = gradient_norms(&params, &s, &LossConfig::default()).unwrap();
    assert_eq!(norms.len(), params.len());
    for (name, n) in &norms {
        assert!(n.is_finite() && *n > 0.0, "{name}: {n}");
    }
}
