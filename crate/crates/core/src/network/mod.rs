//! Cascaded residual dense network (CRDN).
//!
//! ```text
//! K_u -> KPN (k-space conv block + DC) -> IFFT -> RDN_1 -> ... -> RDN_B -> S
//! ```
//!
//! Every RDN is shallow conv -> D residual dense blocks -> global feature
//! fusion -> output conv -> global residual -> data consistency.

mod checkpoint;
mod model;

use serde::{Deserialize, Serialize};

use crate::error::invalid;
use crate::tensor::{Element, Tensor};
use crate::Result;

pub use model::{
    crdn_forward, crdn_forward_var, data_consistency, kpn_forward, kspace_consistency, rdb_forward,
    rdn_body, rdn_forward, Bound, DcTerms,
};

/// Data-consistency rule applied at the end of the KPN and every RDN.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "lowercase", deny_unknown_fields)]
pub enum DcMode {
    /// Measured samples replace predictions.
    Hard,
    /// Sampled entries become `(pred + lambda * k_u) / (1 + lambda)`.
    Soft { lambda: f64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetworkConfig {
    pub num_rdn_blocks: usize,
    pub convs_per_block: usize,
    /// D: residual dense blocks per RDN.
    pub num_rdbs_per_rdn: usize,
    /// 3x3x3 conv+ReLU layers inside each RDB (before the 1x1 fusion).
    pub convs_per_rdb: usize,
    pub growth_channels: usize,
    pub base_channels: usize,
    /// Hidden width of the k-space block.
    pub kpn_channels: usize,
    /// Kernel extents `(kt, ky, kx)`; odd so that "same" padding exists.
    pub kernel: [usize; 3],
    pub dc_mode: DcMode,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        Self {
            num_rdn_blocks: 4,
            convs_per_block: 5,
            num_rdbs_per_rdn: 2,
            convs_per_rdb: 2,
            growth_channels: 12,
            base_channels: 24,
            kpn_channels: 24,
            kernel: [3, 3, 3],
            dc_mode: DcMode::Hard,
        }
    }
}

/// Layer count broken down the way the 25-layer audit counts it.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct LayerCensus {
    pub kpn_layers: usize,
    /// Per RDN: shallow conv, D composite RDBs, global fusion, output conv.
    pub rdn_layers: usize,
    pub total_layers: usize,
    /// Every conv actually instantiated, with RDB internals and 1x1 fusions
    /// expanded.
    pub physical_convs: usize,
}

impl std::fmt::Display for LayerCensus {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "kpn {} + rdn {} x blocks = {} counted layers ({} physical convs)",
            self.kpn_layers, self.rdn_layers, self.total_layers, self.physical_convs
        )
    }
}

impl NetworkConfig {
    /// Small model for desk-scale training and gradient checks.
    pub fn tiny() -> Self {
        Self {
            num_rdn_blocks: 2,
            kpn_channels: 8,
            ..Self::default()
        }
    }

    pub fn census(&self) -> LayerCensus {
        let d = self.num_rdbs_per_rdn;
        let rdn_layers = 1 + d + 1 + 1;
        let physical_rdn = 1 + d * (self.convs_per_rdb + 1) + 1 + 1;
        LayerCensus {
            kpn_layers: self.convs_per_block,
            rdn_layers,
            total_layers: self.convs_per_block + self.num_rdn_blocks * rdn_layers,
            physical_convs: self.convs_per_block + self.num_rdn_blocks * physical_rdn,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("num_rdn_blocks", self.num_rdn_blocks),
            ("convs_per_block", self.convs_per_block),
            ("num_rdbs_per_rdn", self.num_rdbs_per_rdn),
            ("convs_per_rdb", self.convs_per_rdb),
            ("growth_channels", self.growth_channels),
            ("base_channels", self.base_channels),
            ("kpn_channels", self.kpn_channels),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(invalid!("network.{name} must be >= 1"));
            }
        }
        if self.kernel.iter().any(|&k| k == 0 || k % 2 == 0) {
            return Err(invalid!(
                "network.kernel extents must be odd, got {:?}",
                self.kernel
            ));
        }
        if let DcMode::Soft { lambda } = self.dc_mode {
            if !(lambda > 0.0 && lambda.is_finite()) {
                return Err(invalid!(
                    "soft DC lambda must be finite and > 0, got {lambda}"
                ));
            }
        }
        let census = self.census();
        if census.rdn_layers != self.convs_per_block {
            return Err(invalid!(
                "layer census mismatch: an RDN counts 1 shallow + {} RDBs + 1 fusion + 1 output = {} layers, \
                 but convs_per_block = {} (set num_rdbs_per_rdn = convs_per_block - 3)",
                self.num_rdbs_per_rdn,
                census.rdn_layers,
                self.convs_per_block
            ));
        }
        Ok(())
    }

    /// Shapes and initialization rules of every parameter, in forward order.
    pub fn param_specs(&self) -> Vec<ParamSpec> {
        let [kt, ky, kx] = self.kernel;
        let mut specs = Vec::new();
        let mut conv = |prefix: String, cin: usize, cout: usize, k: [usize; 3], zero: bool| {
            let fan_in = cin * k.iter().product::<usize>();
            let init = if zero {
                Init::Zero
            } else {
                Init::He { fan_in }
            };
            specs.push(ParamSpec {
                name: format!("{prefix}.weight"),
                shape: vec![cout, cin, k[0], k[1], k[2]],
                init,
            });
            specs.push(ParamSpec {
                name: format!("{prefix}.bias"),
                shape: vec![cout],
                init: Init::Zero,
            });
        };
        let k3 = [kt, ky, kx];
        let unit = [1, 1, 1];
        let l = self.convs_per_block;
        for i in 0..l {
            let cin = if i == 0 { 2 } else { self.kpn_channels };
            let cout = if i + 1 == l { 2 } else { self.kpn_channels };
            conv(format!("kpn.conv{i}"), cin, cout, k3, i + 1 == l);
        }
        let (c0, g) = (self.base_channels, self.growth_channels);
        for b in 0..self.num_rdn_blocks {
            conv(format!("rdn{b}.shallow"), 2, c0, k3, false);
            for d in 0..self.num_rdbs_per_rdn {
                for i in 0..self.convs_per_rdb {
                    conv(format!("rdn{b}.rdb{d}.conv{i}"), c0 + i * g, g, k3, false);
                }
                conv(
                    format!("rdn{b}.rdb{d}.lff"),
                    c0 + self.convs_per_rdb * g,
                    c0,
                    unit,
                    true,
                );
            }
            conv(
                format!("rdn{b}.gff"),
                c0 * self.num_rdbs_per_rdn,
                c0,
                unit,
                false,
            );
            conv(format!("rdn{b}.out"), c0, 2, k3, true);
        }
        specs
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Init {
    Zero,
    He { fan_in: usize },
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: Init,
}

/// Named network weights and biases, in forward order.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams<T: Element> {
    config: NetworkConfig,
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
}

impl<T: Element> ModelParams<T> {
    /// He-initialized kernels, zero biases and zero-initialized residual
    /// branch outputs.
    pub fn init(config: &NetworkConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let specs = config.param_specs();
        let tensors = specs
            .iter()
            .enumerate()
            .map(|(i, s)| match s.init {
                Init::Zero => Tensor::zeros(&s.shape),
                Init::He { fan_in } => {
                    crate::training::he_init_stream(&s.shape, fan_in, seed, i as u64)
                }
            })
            .collect();
        Ok(Self {
            config: config.clone(),
            names: specs.into_iter().map(|s| s.name).collect(),
            tensors,
        })
    }

    /// Every parameter (biases and zero-init layers included) drawn from
    /// `N(0, (scale * he_std)^2)`; bias std is `scale * 0.1`. Used where all branches must be live.
    pub fn random(config: &NetworkConfig, seed: u64, scale: f64) -> Result<Self> {
        config.validate()?;
        let specs = config.param_specs();
        let tensors = specs
            .iter()
            .enumerate()
            .map(|(i, s)| {
                let fan_in = if s.shape.len() == 1 {
                    200
                } else {
                    s.shape[1..].iter().product()
                };
                let t: Tensor<T> =
                    crate::training::he_init_stream(&s.shape, fan_in, seed, i as u64);
                t.map(|v| v * T::cast(scale))
            })
            .collect();
        Ok(Self {
            config: config.clone(),
            names: specs.into_iter().map(|s| s.name).collect(),
            tensors,
        })
    }

    pub fn from_parts(
        config: NetworkConfig,
        names: Vec<String>,
        tensors: Vec<Tensor<T>>,
    ) -> Result<Self> {
        config.validate()?;
        let specs = config.param_specs();
        if specs.len() != names.len() || names.len() != tensors.len() {
            return Err(invalid!(
                "expected {} parameters, got {} names / {} tensors",
                specs.len(),
                names.len(),
                tensors.len()
            ));
        }
        for ((s, n), t) in specs.iter().zip(&names).zip(&tensors) {
            if &s.name != n || s.shape != t.shape() {
                return Err(invalid!(
                    "parameter {n} {:?} does not match expected {} {:?}",
                    t.shape(),
                    s.name,
                    s.shape
                ));
            }
        }
        Ok(Self {
            config,
            names,
            tensors,
        })
    }

    pub fn config(&self) -> &NetworkConfig {
        &self.config
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor<T>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.tensors
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.names
            .iter()
            .position(|n| n == name)
            .map(|i| &self.tensors[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.names
            .iter()
            .position(|n| n == name)
            .map(|i| &mut self.tensors[i])
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    /// Total number of scalars.
    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn cast<U: Element>(&self) -> ModelParams<U> {
        ModelParams {
            config: self.config.clone(),
            names: self.names.clone(),
            tensors: self.tensors.iter().map(Tensor::cast).collect(),
        }
    }
}
