//! Networks `E`, `G`, `H`, `D1`, `D2`: parameter containers, architecture
//! configuration and forward evaluation.
//!
//! All five networks live in one [`ModelBundle`] as named parameter blocks
//! (`"H.phi2.w"`, `"G.fc1.w"`, …). `H` and `D2` each own a separate set of
//! per-view embeddings `φ_k`; the aggregate `Ψ(v(s,x)) = Σ_k s_k φ_k(x̃_k)`
//! is a masked dense sum over those embeddings.

mod api;
mod arch;
mod forward;

use std::collections::BTreeMap;
use std::fmt;

use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::Real;
use crate::error::{Error, Result};
use crate::view::ViewShape;

pub use api::{
    aggregate, discriminate_pair, discriminate_view_pair, encode_target, encode_views, generate,
    sample_latent, ViewBatch, ViewNet,
};
pub use arch::{Activation, ArchConfig, DenseLayer};
pub use forward::{Forward, Latent, MaskBatch, StatUpdate};

/// The five networks of the model.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum NetId {
    G,
    E,
    H,
    D1,
    D2,
}

impl NetId {
    pub const ALL: [NetId; 5] = [NetId::G, NetId::E, NetId::H, NetId::D1, NetId::D2];

    pub fn prefix(self) -> &'static str {
        match self {
            NetId::G => "G",
            NetId::E => "E",
            NetId::H => "H",
            NetId::D1 => "D1",
            NetId::D2 => "D2",
        }
    }

    pub fn of_param(name: &str) -> Option<NetId> {
        let prefix = name.split('.').next()?;
        NetId::ALL.into_iter().find(|n| n.prefix() == prefix)
    }

    pub fn is_discriminator(self) -> bool {
        matches!(self, NetId::D1 | NetId::D2)
    }
}

impl fmt::Display for NetId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.prefix())
    }
}

/// Latent prior `N(0, I)` of dimension `Z`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PriorSpec {
    pub dim: usize,
}

impl PriorSpec {
    pub fn sample<R: Rng + ?Sized, F: Real>(&self, rows: usize, rng: &mut R) -> Array2<F> {
        standard_normal(rows, self.dim, rng)
    }
}

pub fn standard_normal<R: Rng + ?Sized, F: Real>(rows: usize, cols: usize, rng: &mut R) -> Array2<F> {
    Array2::from_shape_simple_fn((rows, cols), || {
        F::lit(rng.sample::<f64, _>(rand_distr::StandardNormal))
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunningStats<F> {
    pub mean: Array1<F>,
    pub var: Array1<F>,
}

/// Declared parameter block.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParamSpec {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    /// Weight blocks are drawn fan-in scaled; biases start at zero.
    pub fan_in: Option<usize>,
}

#[derive(Default)]
struct Layout {
    params: Vec<ParamSpec>,
    norms: Vec<(String, usize)>,
}

impl Layout {
    fn weight(&mut self, name: String, rows: usize, cols: usize, fan_in: usize) {
        self.params.push(ParamSpec {
            name,
            rows,
            cols,
            fan_in: Some(fan_in),
        });
    }

    fn bias(&mut self, name: String, cols: usize) {
        self.params.push(ParamSpec {
            name,
            rows: 1,
            cols,
            fan_in: None,
        });
    }

    /// Affine layer stored as `in × out` (dense) and its bias when not normed.
    fn dense(&mut self, prefix: &str, input: usize, width: usize, normed: bool) {
        self.weight(format!("{prefix}.w"), input, width, input);
        if normed {
            self.norms.push((format!("{prefix}.bn"), width));
        } else {
            self.bias(format!("{prefix}.b"), width);
        }
    }

    fn conv_encoder(&mut self, prefix: &str, shape: ViewShape, arch: &ArchConfig) {
        let ViewShape::Image { channels, .. } = shape else {
            unreachable!("conv encoder on a flat view")
        };
        let mut cin = channels;
        for (j, &maps) in arch.conv_encoder_maps.iter().enumerate() {
            let fan_in = cin * 16;
            self.weight(format!("{prefix}.conv{j}.w"), maps, fan_in, fan_in);
            if j == 0 {
                self.bias(format!("{prefix}.conv{j}.b"), maps);
            } else {
                self.norms.push((format!("{prefix}.conv{j}.bn"), maps));
            }
            cin = maps;
        }
        let fan_in = cin * 16;
        self.weight(format!("{prefix}.proj.w"), arch.aggregation_dim, fan_in, fan_in);
        self.bias(format!("{prefix}.proj.b"), arch.aggregation_dim);
    }

    fn embedding(&mut self, prefix: &str, shape: ViewShape, arch: &ArchConfig) {
        if arch.uses_conv(&shape) {
            self.conv_encoder(prefix, shape, arch);
        } else {
            self.dense(prefix, shape.size(), arch.aggregation_dim, false);
        }
    }

    fn stack(&mut self, net: &str, mut input: usize, layers: &[DenseLayer]) -> usize {
        for (i, l) in layers.iter().enumerate() {
            self.dense(&format!("{net}.fc{i}"), input, l.width, l.batch_norm);
            input = l.width;
        }
        input
    }

    fn build(arch: &ArchConfig) -> Self {
        let mut lay = Layout::default();
        let z = arch.latent_dim;
        let a = arch.aggregation_dim;

        // G
        let mut width = lay.stack("G", z, &arch.generator_layers);
        if arch.uses_conv(&arch.output) {
            let ViewShape::Image { channels, .. } = arch.output else {
                unreachable!()
            };
            for (j, &maps) in arch.conv_decoder_maps.iter().enumerate() {
                lay.weight(format!("G.deconv{j}.w"), width, maps * 16, width);
                lay.norms.push((format!("G.deconv{j}.bn"), maps));
                width = maps;
            }
            lay.weight("G.deconv_out.w".into(), width, channels * 16, width);
            lay.bias("G.deconv_out.b".into(), channels);
        } else {
            lay.dense("G.out", width, arch.output.size(), false);
        }

        // E: single-view aggregation of the target, then the encoder trunk.
        lay.embedding("E.phi0", arch.output, arch);
        let top = lay.stack("E", a, &arch.encoder_layers);
        lay.dense("E.head", top, 2 * z, false);

        // H
        for (k, &shape) in arch.views.iter().enumerate() {
            lay.embedding(&format!("H.phi{k}"), shape, arch);
        }
        let top = lay.stack("H", a, &arch.encoder_layers);
        lay.dense("H.head", top, 2 * z, false);

        // D1
        let mut input = if arch.uses_conv(&arch.output) {
            lay.conv_encoder("D1.feat", arch.output, arch);
            a
        } else {
            arch.output.size()
        };
        for (i, l) in arch.d1_layers.iter().enumerate() {
            if i == arch.d1_z_layer {
                input += z;
            }
            lay.dense(&format!("D1.fc{i}"), input, l.width, l.batch_norm);
            input = l.width;
        }
        if arch.d1_z_layer == arch.d1_layers.len() {
            input += z;
        }
        lay.dense("D1.out", input, 1, false);

        // D2
        for (k, &shape) in arch.views.iter().enumerate() {
            lay.embedding(&format!("D2.phi{k}"), shape, arch);
        }
        let top = lay.stack("D2", a + z, &arch.d2_layers);
        lay.dense("D2.out", top, 1, false);

        lay
    }
}

/// Parameter blocks and batch-norm running statistics of all networks,
/// together with the architecture they were built from.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelBundle<F: Real = f32> {
    arch: ArchConfig,
    params: BTreeMap<String, Array2<F>>,
    running: BTreeMap<String, RunningStats<F>>,
}

/// Builds a model with fan-in scaled uniform weights and zero biases.
pub fn init_model<F: Real>(arch: &ArchConfig, seed: u64) -> Result<ModelBundle<F>> {
    arch.validate()?;
    let layout = Layout::build(arch);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = BTreeMap::new();
    for spec in &layout.params {
        let block = match spec.fan_in {
            Some(fan_in) => {
                let bound = 1.0 / (fan_in as f64).sqrt();
                Array2::from_shape_simple_fn((spec.rows, spec.cols), || {
                    F::lit(rng.random_range(-bound..bound))
                })
            }
            None => Array2::zeros((spec.rows, spec.cols)),
        };
        params.insert(spec.name.clone(), block);
    }
    let running = layout
        .norms
        .iter()
        .map(|(name, c)| {
            (
                name.clone(),
                RunningStats {
                    mean: Array1::zeros(*c),
                    var: Array1::ones(*c),
                },
            )
        })
        .collect();
    Ok(ModelBundle {
        arch: arch.clone(),
        params,
        running,
    })
}

impl<F: Real> ModelBundle<F> {
    /// Reassembles a bundle, checking every block against the architecture.
    pub fn from_parts(
        arch: ArchConfig,
        params: BTreeMap<String, Array2<F>>,
        running: BTreeMap<String, RunningStats<F>>,
    ) -> Result<Self> {
        arch.validate()?;
        let layout = Layout::build(&arch);
        if layout.params.len() != params.len() {
            return Err(Error::shape(format!(
                "expected {} parameter blocks, got {}",
                layout.params.len(),
                params.len()
            )));
        }
        for spec in &layout.params {
            let block = params
                .get(&spec.name)
                .ok_or_else(|| Error::shape(format!("missing parameter block {}", spec.name)))?;
            if block.dim() != (spec.rows, spec.cols) {
                return Err(Error::shape(format!(
                    "{} has shape {:?}, expected {:?}",
                    spec.name,
                    block.dim(),
                    (spec.rows, spec.cols)
                )));
            }
        }
        if layout.norms.len() != running.len() {
            return Err(Error::shape("batch-norm statistics do not match the architecture"));
        }
        for (name, c) in &layout.norms {
            let st = running
                .get(name)
                .ok_or_else(|| Error::shape(format!("missing running statistics {name}")))?;
            if st.mean.len() != *c || st.var.len() != *c {
                return Err(Error::shape(format!("{name} has the wrong channel count")));
            }
        }
        let bundle = Self {
            arch,
            params,
            running,
        };
        if !bundle.all_finite() {
            return Err(Error::NonFinite("model parameters".into()));
        }
        Ok(bundle)
    }

    pub fn arch(&self) -> &ArchConfig {
        &self.arch
    }

    pub fn params(&self) -> &BTreeMap<String, Array2<F>> {
        &self.params
    }

    pub fn running(&self) -> &BTreeMap<String, RunningStats<F>> {
        &self.running
    }

    pub fn param(&self, name: &str) -> Option<&Array2<F>> {
        self.params.get(name)
    }

    pub fn param_mut(&mut self, name: &str) -> Option<&mut Array2<F>> {
        self.params.get_mut(name)
    }

    pub fn params_mut(&mut self) -> impl Iterator<Item = (&String, &mut Array2<F>)> {
        self.params.iter_mut()
    }

    /// Names of the parameter blocks owned by `net`, in sorted order.
    pub fn param_names(&self, net: NetId) -> Vec<&str> {
        self.params
            .keys()
            .filter(|k| NetId::of_param(k) == Some(net))
            .map(String::as_str)
            .collect()
    }

    pub fn num_parameters(&self) -> usize {
        self.params.values().map(|p| p.len()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.params.values().all(|p| p.iter().all(|x| x.is_finite()))
            && self
                .running
                .values()
                .all(|s| s.mean.iter().chain(s.var.iter()).all(|x| x.is_finite()))
    }

    /// Folds batch statistics into the running averages:
    /// `running = momentum·running + (1-momentum)·batch`.
    pub fn update_running(&mut self, updates: &[StatUpdate<F>]) {
        let m = F::lit(self.arch.bn_momentum);
        let one_m = F::one() - m;
        for u in updates {
            if let Some(st) = self.running.get_mut(&u.key) {
                st.mean.zip_mut_with(&u.mean, |r, &b| *r = *r * m + b * one_m);
                st.var.zip_mut_with(&u.var, |r, &b| *r = *r * m + b * one_m);
            }
        }
    }

    /// Same model in another float type.
    pub fn cast<G: Real>(&self) -> ModelBundle<G> {
        let conv = |a: &Array2<F>| a.mapv(|x| G::lit(x.to_f64_lossy()));
        let conv1 = |a: &Array1<F>| a.mapv(|x| G::lit(x.to_f64_lossy()));
        ModelBundle {
            arch: self.arch.clone(),
            params: self.params.iter().map(|(k, v)| (k.clone(), conv(v))).collect(),
            running: self
                .running
                .iter()
                .map(|(k, s)| {
                    (
                        k.clone(),
                        RunningStats {
                            mean: conv1(&s.mean),
                            var: conv1(&s.var),
                        },
                    )
                })
                .collect(),
        }
    }
}

/// Declared parameter blocks for `arch`, in initialization order.
pub fn parameter_layout(arch: &ArchConfig) -> Vec<ParamSpec> {
    Layout::build(arch).params
}
