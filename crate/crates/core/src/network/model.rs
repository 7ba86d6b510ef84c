use super::{DcMode, ModelParams, NetworkConfig};
use crate::error::invalid;
use crate::kspace::{ComplexImageSequence, KSpaceData};
use crate::tensor::{concat_channels, conv3d, same_padding, Element, Tape, Tensor, Var};
use crate::Result;

/// Model parameters recorded on a tape, looked up by name.
pub struct Bound<'t, T: Element> {
    names: Vec<String>,
    vars: Vec<Var<'t, T>>,
}

impl<'t, T: Element> Bound<'t, T> {
    /// Trainable leaves (gradients will be produced for them).
    pub fn params(tape: &'t Tape<T>, params: &ModelParams<T>) -> Self {
        Self::bind(tape, params, true)
    }

    /// Frozen leaves, for inference.
    pub fn constants(tape: &'t Tape<T>, params: &ModelParams<T>) -> Self {
        Self::bind(tape, params, false)
    }

    fn bind(tape: &'t Tape<T>, params: &ModelParams<T>, trainable: bool) -> Self {
        let vars = params
            .iter()
            .map(|(name, t)| {
                let v = tape.leaf(t.clone(), trainable);
                tape.set_label(v, name);
                v
            })
            .collect();
        Self {
            names: params.names().to_vec(),
            vars,
        }
    }

    pub fn get(&self, name: &str) -> Result<Var<'t, T>> {
        self.names
            .iter()
            .position(|n| n == name)
            .map(|i| self.vars[i])
            .ok_or_else(|| invalid!("no parameter named {name}"))
    }

    /// Leaves in parameter order.
    pub fn vars(&self) -> &[Var<'t, T>] {
        &self.vars
    }

    /// Substitutes another variable for a named parameter.
    pub fn set(&mut self, name: &str, var: Var<'t, T>) -> Result<()> {
        let i = self
            .names
            .iter()
            .position(|n| n == name)
            .ok_or_else(|| invalid!("no parameter named {name}"))?;
        self.vars[i] = var;
        Ok(())
    }
}

fn conv<'t, T: Element>(x: Var<'t, T>, bound: &Bound<'t, T>, prefix: &str) -> Result<Var<'t, T>> {
    let w = bound.get(&format!("{prefix}.weight"))?;
    let b = bound.get(&format!("{prefix}.bias"))?;
    let s = w.shape();
    conv3d(x, w, b, same_padding([s[2], s[3], s[4]]))
}

/// Constant factors of a data-consistency step, `dc(X) = keep * X + inject`
/// in k-space.
#[derive(Clone, Copy)]
pub struct DcTerms<'t, T: Element> {
    /// Measured two-channel k-space, zero where unsampled.
    pub k_u: Var<'t, T>,
    pub keep: Var<'t, T>,
    pub inject: Var<'t, T>,
}

impl<'t, T: Element> DcTerms<'t, T> {
    /// `k_u` and `mask` are `[N, 2, T, H, W]`; the mask holds 0/1.
    pub fn new(tape: &'t Tape<T>, k_u: Tensor<T>, mask: &Tensor<T>, mode: DcMode) -> Result<Self> {
        if k_u.shape() != mask.shape() || k_u.shape().len() != 5 || k_u.shape()[1] != 2 {
            return Err(invalid!(
                "data consistency needs matching [N, 2, T, H, W] k-space {:?} and mask {:?}",
                k_u.shape(),
                mask.shape()
            ));
        }
        let w = match mode {
            DcMode::Hard => 1.0,
            DcMode::Soft { lambda } => lambda / (1.0 + lambda),
        };
        let w = T::cast(w);
        let keep = mask.map(|m| T::one() - m * w);
        let inject = k_u.zip_map(mask, |k, m| k * m * w)?;
        Ok(Self {
            k_u: tape.constant(k_u),
            keep: tape.constant(keep),
            inject: tape.constant(inject),
        })
    }

    pub fn from_kspace(tape: &'t Tape<T>, k: &KSpaceData, mode: DcMode) -> Result<Self> {
        let (nx, ny, nt) = k.geometry();
        let kt = k.samples().to_tensor::<T>().reshape(&[1, 2, nt, ny, nx])?;
        Self::new(tape, kt, &k.mask().to_tensor(2), mode)
    }
}

/// DC applied directly to k-space values.
pub fn kspace_consistency<'t, T: Element>(
    k: Var<'t, T>,
    dc: &DcTerms<'t, T>,
) -> Result<Var<'t, T>> {
    k.mul(dc.keep)?.add(dc.inject)
}

/// FFT, blend in measured samples, IFFT.
pub fn data_consistency<'t, T: Element>(
    image: Var<'t, T>,
    dc: &DcTerms<'t, T>,
) -> Result<Var<'t, T>> {
    kspace_consistency(image.fft2()?, dc)?.ifft2()
}

fn check_two_channel<T: Element>(x: &Var<'_, T>, what: &str) -> Result<()> {
    let s = x.shape();
    if s.len() != 5 || s[1] != 2 {
        return Err(invalid!(
            "{what} expects a two-channel [N, 2, T, H, W] input, got {s:?}"
        ));
    }
    Ok(())
}

/// Residual conv block on two-channel k-space followed by k-space DC.
pub fn kpn_forward<'t, T: Element>(
    k: Var<'t, T>,
    bound: &Bound<'t, T>,
    config: &NetworkConfig,
    dc: &DcTerms<'t, T>,
) -> Result<Var<'t, T>> {
    check_two_channel(&k, "kpn")?;
    let mut h = k;
    for i in 0..config.convs_per_block {
        h = conv(h, bound, &format!("kpn.conv{i}"))?;
        if i + 1 < config.convs_per_block {
            h = h.relu();
        }
    }
    kspace_consistency(k.add(h)?, dc)
}

/// Residual dense block `prefix` (e.g. `rdn0.rdb1`).
pub fn rdb_forward<'t, T: Element>(
    features: Var<'t, T>,
    bound: &Bound<'t, T>,
    config: &NetworkConfig,
    prefix: &str,
) -> Result<Var<'t, T>> {
    let mut local = vec![features];
    for i in 0..config.convs_per_rdb {
        let input = if local.len() == 1 {
            features
        } else {
            concat_channels(&local)?
        };
        local.push(conv(input, bound, &format!("{prefix}.conv{i}"))?.relu());
    }
    let fused = conv(concat_channels(&local)?, bound, &format!("{prefix}.lff"))?;
    features.add(fused)
}

/// RDN number `block`: shallow features, RDBs, global fusion, output conv,
/// global residual and DC.
pub fn rdn_forward<'t, T: Element>(
    image: Var<'t, T>,
    bound: &Bound<'t, T>,
    config: &NetworkConfig,
    block: usize,
    dc: &DcTerms<'t, T>,
) -> Result<Var<'t, T>> {
    data_consistency(rdn_body(image, bound, config, block)?, dc)
}

/// [`rdn_forward`] without the final data-consistency step.
pub fn rdn_body<'t, T: Element>(
    image: Var<'t, T>,
    bound: &Bound<'t, T>,
    config: &NetworkConfig,
    block: usize,
) -> Result<Var<'t, T>> {
    check_two_channel(&image, "rdn")?;
    let p = format!("rdn{block}");
    let shallow = conv(image, bound, &format!("{p}.shallow"))?;
    let mut f = shallow;
    let mut outs = Vec::with_capacity(config.num_rdbs_per_rdn);
    for d in 0..config.num_rdbs_per_rdn {
        f = rdb_forward(f, bound, config, &format!("{p}.rdb{d}"))?;
        outs.push(f);
    }
    let fused = conv(concat_channels(&outs)?, bound, &format!("{p}.gff"))?.add(shallow)?;
    let residual = conv(fused, bound, &format!("{p}.out"))?;
    image.add(residual)
}

/// Full cascade on the tape; returns the two-channel image `[N, 2, T, H, W]`.
pub fn crdn_forward_var<'t, T: Element>(
    bound: &Bound<'t, T>,
    config: &NetworkConfig,
    dc: &DcTerms<'t, T>,
) -> Result<Var<'t, T>> {
    let k = kpn_forward(dc.k_u, bound, config, dc)?;
    let mut img = k.ifft2()?;
    for b in 0..config.num_rdn_blocks {
        img = rdn_forward(img, bound, config, b, dc)?;
    }
    Ok(img)
}

/// Inference on one measured sequence.
pub fn crdn_forward<T: Element>(
    k_u: &KSpaceData,
    params: &ModelParams<T>,
) -> Result<ComplexImageSequence> {
    let tape = Tape::new();
    let bound = Bound::constants(&tape, params);
    let dc = DcTerms::from_kspace(&tape, k_u, params.config().dc_mode)?;
    let out = crdn_forward_var(&bound, params.config(), &dc)?;
    if let Some(bad) = tape.first_non_finite() {
        return Err(crate::Error::Numerical(format!(
            "non-finite value in forward pass at {bad}"
        )));
    }
    let value = out.value();
    ComplexImageSequence::from_tensor(&value)
}
