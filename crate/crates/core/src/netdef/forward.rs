use std::collections::HashMap;

use ndarray::{Array1, Array2};

use super::{Activation, DenseLayer, ModelBundle, NetId};
use crate::autodiff::{ConvGeom, Graph, Real, Var};
use crate::view::{SubsetMask, ViewShape};

/// Batch statistics observed in a training-mode forward pass, to be folded
/// into the running averages with [`ModelBundle::update_running`].
#[derive(Clone, Debug)]
pub struct StatUpdate<F> {
    pub key: String,
    pub mean: Array1<F>,
    pub var: Array1<F>,
}

/// `(μ, log σ²)` nodes of a latent Gaussian, one row per batch item.
#[derive(Clone, Copy, Debug)]
pub struct Latent {
    pub mu: Var,
    pub log_var: Var,
}

/// Per-view mask coefficients for a batch: `coefs[k][i] = s_k` of item `i`.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskBatch<F> {
    coefs: Vec<Array1<F>>,
}

impl<F: Real> MaskBatch<F> {
    pub fn new(masks: &[&SubsetMask]) -> Self {
        let views = masks.first().map_or(0, |m| m.len());
        let coefs = (0..views)
            .map(|k| {
                masks
                    .iter()
                    .map(|m| if m.get(k) { F::one() } else { F::zero() })
                    .collect()
            })
            .collect();
        Self { coefs }
    }

    /// The same mask for every one of `rows` items.
    pub fn uniform(mask: &SubsetMask, rows: usize) -> Self {
        Self::new(&vec![mask; rows])
    }

    pub fn num_views(&self) -> usize {
        self.coefs.len()
    }

    pub fn rows(&self) -> usize {
        self.coefs.first().map_or(0, |c| c.len())
    }

    pub fn view(&self, k: usize) -> &Array1<F> {
        &self.coefs[k]
    }
}

/// One forward evaluation over a [`ModelBundle`], recorded on a [`Graph`].
///
/// Parameters of networks marked trainable enter the graph as
/// differentiable leaves; all others are constants, so gradients can flow
/// through a frozen network to its inputs without touching its weights.
pub struct Forward<'m, F: Real> {
    pub graph: Graph<F>,
    model: &'m ModelBundle<F>,
    train: bool,
    trainable: [bool; 5],
    bound: HashMap<&'m str, Var>,
    stats: Vec<StatUpdate<F>>,
}

fn net_slot(net: NetId) -> usize {
    net as usize
}

impl<'m, F: Real> Forward<'m, F> {
    pub fn new(model: &'m ModelBundle<F>, train: bool, trainable: &[NetId]) -> Self {
        let mut flags = [false; 5];
        for &n in trainable {
            flags[net_slot(n)] = true;
        }
        Self {
            graph: Graph::new(),
            model,
            train,
            trainable: flags,
            bound: HashMap::new(),
            stats: Vec::new(),
        }
    }

    pub fn model(&self) -> &'m ModelBundle<F> {
        self.model
    }

    pub fn is_train(&self) -> bool {
        self.train
    }

    /// Graph node of a parameter block, created on first use.
    pub fn param(&mut self, name: &str) -> Var {
        if let Some(&v) = self.bound.get(name) {
            return v;
        }
        let (key, value) = self
            .model
            .params
            .get_key_value(name)
            .unwrap_or_else(|| panic!("parameter block {name} is not in the model"));
        let net = NetId::of_param(name).expect("parameter name has a network prefix");
        let v = if self.trainable[net_slot(net)] {
            self.graph.leaf(value.clone())
        } else {
            self.graph.constant(value.clone())
        };
        self.bound.insert(key.as_str(), v);
        v
    }

    /// Parameter blocks bound so far, with their graph nodes.
    pub fn bound_params(&self) -> impl Iterator<Item = (&'m str, Var)> + '_ {
        self.bound.iter().map(|(k, v)| (*k, *v))
    }

    pub fn take_stats(&mut self) -> Vec<StatUpdate<F>> {
        std::mem::take(&mut self.stats)
    }

    pub fn input(&mut self, value: Array2<F>) -> Var {
        self.graph.constant(value)
    }

    fn activate(&mut self, x: Var, act: Activation) -> Var {
        match act {
            Activation::Relu => self.graph.relu(x),
            Activation::LeakyRelu => {
                let slope = F::lit(self.model.arch.leaky_slope);
                self.graph.leaky_relu(x, slope)
            }
            Activation::Sigmoid => self.graph.sigmoid(x),
            Activation::Tanh => self.graph.tanh(x),
            Activation::Linear => x,
        }
    }

    fn norm(&mut self, x: Var, key: String, spatial: usize) -> Var {
        if self.train {
            let eps = F::lit(self.model.arch.bn_eps);
            let (y, st) = self.graph.batch_norm(x, spatial, eps);
            self.stats.push(StatUpdate {
                key,
                mean: st.mean,
                var: st.var,
            });
            y
        } else {
            let model = self.model;
            let st = &model.running[&key];
            let eps = F::lit(self.model.arch.bn_eps);
            let scale = st.var.mapv(|v| F::one() / (v + eps).sqrt());
            let shift = -(&st.mean * &scale);
            self.graph.channel_affine(x, scale, shift, spatial)
        }
    }

    fn dense(&mut self, x: Var, prefix: &str, normed: bool) -> Var {
        let w = self.param(&format!("{prefix}.w"));
        let h = self.graph.matmul(x, w);
        if normed {
            self.norm(h, format!("{prefix}.bn"), 1)
        } else {
            let b = self.param(&format!("{prefix}.b"));
            self.graph.add_bias(h, b)
        }
    }

    fn stack(&mut self, mut x: Var, net: NetId, layers: &[DenseLayer], act: Activation) -> Var {
        for (i, l) in layers.iter().enumerate() {
            let h = self.dense(x, &format!("{net}.fc{i}"), l.batch_norm);
            x = self.activate(h, act);
        }
        x
    }

    /// Strided-convolution encoder down to a `1×1×A` code (linear output).
    fn conv_encoder(&mut self, x: Var, prefix: &str, shape: ViewShape) -> Var {
        let ViewShape::Image {
            channels,
            height,
            width,
        } = shape
        else {
            unreachable!("conv encoder on a flat view")
        };
        let model = self.model;
        let arch = &model.arch;
        let maps = arch.conv_encoder_maps.clone();
        let a = arch.aggregation_dim;
        let (mut c, mut h, mut w) = (channels, height, width);
        let mut x = x;
        for (j, &out) in maps.iter().enumerate() {
            let geom = ConvGeom {
                in_channels: c,
                in_height: h,
                in_width: w,
                out_channels: out,
                kernel: 4,
                stride: 2,
                padding: 1,
            };
            let wv = self.param(&format!("{prefix}.conv{j}.w"));
            let y = self.graph.conv2d(x, wv, geom);
            (h, w) = geom.conv_out();
            let y = if j == 0 {
                let b = self.param(&format!("{prefix}.conv{j}.b"));
                self.graph.channel_bias(y, b, h * w)
            } else {
                self.norm(y, format!("{prefix}.conv{j}.bn"), h * w)
            };
            x = self.activate(y, Activation::LeakyRelu);
            c = out;
        }
        let geom = ConvGeom {
            in_channels: c,
            in_height: h,
            in_width: w,
            out_channels: a,
            kernel: 4,
            stride: 1,
            padding: 0,
        };
        let wv = self.param(&format!("{prefix}.proj.w"));
        let y = self.graph.conv2d(x, wv, geom);
        let (oh, ow) = geom.conv_out();
        let b = self.param(&format!("{prefix}.proj.b"));
        self.graph.channel_bias(y, b, oh * ow)
    }

    fn embed(&mut self, x: Var, prefix: &str, shape: ViewShape) -> Var {
        if self.model.arch.uses_conv(&shape) {
            self.conv_encoder(x, prefix, shape)
        } else {
            self.dense(x, prefix, false)
        }
    }

    /// Per-view embeddings `φ_k(x̃_k)` of `net` (`H` or `D2`).
    pub fn embed_views(&mut self, net: NetId, views: &[Var]) -> Vec<Var> {
        assert!(matches!(net, NetId::H | NetId::D2));
        let shapes = self.model.arch.views.clone();
        assert_eq!(views.len(), shapes.len(), "one input per declared view");
        views
            .iter()
            .zip(shapes)
            .enumerate()
            .map(|(k, (&x, shape))| self.embed(x, &format!("{net}.phi{k}"), shape))
            .collect()
    }

    /// `Ψ = Σ_k s_k φ_k(x̃_k)`.
    pub fn aggregate(&mut self, embeds: &[Var], mask: &MaskBatch<F>) -> Var {
        assert_eq!(embeds.len(), mask.num_views());
        let mut acc: Option<Var> = None;
        for (k, &e) in embeds.iter().enumerate() {
            let term = self.graph.scale_rows(e, mask.view(k).clone());
            acc = Some(match acc {
                Some(a) => self.graph.add(a, term),
                None => term,
            });
        }
        acc.expect("at least one view")
    }

    fn encoder_head(&mut self, agg: Var, net: NetId) -> Latent {
        let layers = self.model.arch.encoder_layers.clone();
        let act = self.model.arch.encoder_activation;
        let h = self.stack(agg, net, &layers, act);
        let out = self.dense(h, &format!("{net}.head"), false);
        let z = self.model.arch.latent_dim;
        let mu = self.graph.slice_cols(out, 0, z);
        let mu = self.graph.tanh(mu);
        let lv = self.graph.slice_cols(out, z, 2 * z);
        let log_var = self.graph.nelu(lv);
        Latent { mu, log_var }
    }

    /// `E(y)`: posterior over the latent code given the target.
    pub fn encode_target(&mut self, y: Var) -> Latent {
        let shape = self.model.arch.output;
        let agg = self.embed(y, "E.phi0", shape);
        self.encoder_head(agg, NetId::E)
    }

    /// `H(v(s,x))` from precomputed `H` embeddings.
    pub fn encode_views(&mut self, h_embeds: &[Var], mask: &MaskBatch<F>) -> Latent {
        let agg = self.aggregate(h_embeds, mask);
        self.encoder_head(agg, NetId::H)
    }

    /// Pathwise sample `μ + exp(½ log σ²) ⊙ ε`.
    pub fn sample(&mut self, latent: Latent, noise: Array2<F>) -> Var {
        let half = self.graph.scale(latent.log_var, F::lit(0.5));
        let sigma = self.graph.exp(half);
        let eps = self.graph.constant(noise);
        let spread = self.graph.mul(sigma, eps);
        self.graph.add(latent.mu, spread)
    }

    /// `G(z)`.
    pub fn generate(&mut self, z: Var) -> Var {
        let model = self.model;
        let arch = &model.arch;
        let layers = arch.generator_layers.clone();
        let act = arch.generator_activation;
        let out_act = arch.output_activation;
        let output = arch.output;
        let h = self.stack(z, NetId::G, &layers, act);
        let pre = if arch.uses_conv(&output) {
            let ViewShape::Image { channels, .. } = output else {
                unreachable!()
            };
            let maps = arch.conv_decoder_maps.clone();
            let mut c = self.graph.shape(h).1;
            let (mut side, mut x) = (1usize, h);
            for (j, &out) in maps.iter().enumerate() {
                let (stride, padding) = if j == 0 { (1, 0) } else { (2, 1) };
                let geom = ConvGeom {
                    in_channels: c,
                    in_height: side,
                    in_width: side,
                    out_channels: out,
                    kernel: 4,
                    stride,
                    padding,
                };
                let wv = self.param(&format!("G.deconv{j}.w"));
                let y = self.graph.conv_transpose2d(x, wv, geom);
                side = geom.transpose_out().0;
                let y = self.norm(y, format!("G.deconv{j}.bn"), side * side);
                x = self.activate(y, Activation::Relu);
                c = out;
            }
            let geom = ConvGeom {
                in_channels: c,
                in_height: side,
                in_width: side,
                out_channels: channels,
                kernel: 4,
                stride: 2,
                padding: 1,
            };
            let wv = self.param("G.deconv_out.w");
            let y = self.graph.conv_transpose2d(x, wv, geom);
            let side = geom.transpose_out().0;
            let b = self.param("G.deconv_out.b");
            self.graph.channel_bias(y, b, side * side)
        } else {
            self.dense(h, "G.out", false)
        };
        self.activate(pre, out_act)
    }

    /// Logit of `D1(y, z)`.
    pub fn d1_logits(&mut self, y: Var, z: Var) -> Var {
        let model = self.model;
        let arch = &model.arch;
        let layers = arch.d1_layers.clone();
        let z_at = arch.d1_z_layer;
        let act = arch.discriminator_activation;
        let output = arch.output;
        let mut x = if arch.uses_conv(&output) {
            self.conv_encoder(y, "D1.feat", output)
        } else {
            y
        };
        for (i, l) in layers.iter().enumerate() {
            if i == z_at {
                x = self.graph.concat(x, z);
            }
            let h = self.dense(x, &format!("D1.fc{i}"), l.batch_norm);
            x = self.activate(h, act);
        }
        if z_at == layers.len() {
            x = self.graph.concat(x, z);
        }
        self.dense(x, "D1.out", false)
    }

    /// Logit of `D2(v(s,x), z)` from precomputed `D2` embeddings.
    pub fn d2_logits(&mut self, d2_embeds: &[Var], mask: &MaskBatch<F>, z: Var) -> Var {
        let agg = self.aggregate(d2_embeds, mask);
        let x = self.graph.concat(agg, z);
        let layers = self.model.arch.d2_layers.clone();
        let act = self.model.arch.discriminator_activation;
        let h = self.stack(x, NetId::D2, &layers, act);
        self.dense(h, "D2.out", false)
    }
}
