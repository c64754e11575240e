use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::kv;
use crate::view::ViewShape;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Relu,
    LeakyRelu,
    Sigmoid,
    Tanh,
    Linear,
}

impl fmt::Display for Activation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Activation::Relu => "relu",
            Activation::LeakyRelu => "leaky_relu",
            Activation::Sigmoid => "sigmoid",
            Activation::Tanh => "tanh",
            Activation::Linear => "linear",
        })
    }
}

impl FromStr for Activation {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        Ok(match s.trim() {
            "relu" => Activation::Relu,
            "leaky_relu" => Activation::LeakyRelu,
            "sigmoid" => Activation::Sigmoid,
            "tanh" => Activation::Tanh,
            "linear" => Activation::Linear,
            other => return Err(format!("unknown activation `{other}`")),
        })
    }
}

/// Fully connected layer; `batch_norm` inserts parameter-free batch
/// normalization between the affine map and the nonlinearity.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DenseLayer {
    pub width: usize,
    pub batch_norm: bool,
}

impl DenseLayer {
    pub fn plain(width: usize) -> Self {
        Self {
            width,
            batch_norm: false,
        }
    }

    pub fn normed(width: usize) -> Self {
        Self {
            width,
            batch_norm: true,
        }
    }
}

impl fmt::Display for DenseLayer {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.width)?;
        if self.batch_norm {
            f.write_str("+bn")?;
        }
        Ok(())
    }
}

impl FromStr for DenseLayer {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        let s = s.trim();
        let (width, batch_norm) = match s.strip_suffix("+bn") {
            Some(w) => (w, true),
            None => (s, false),
        };
        let width = width
            .trim()
            .parse()
            .map_err(|e| format!("bad layer `{s}`: {e}"))?;
        Ok(Self { width, batch_norm })
    }
}

/// Architecture of all five networks.
///
/// In dense mode every view is flattened and embedded by a linear map. In
/// conv mode, image-shaped views and image targets go through the
/// strided-convolution stacks (`conv_encoder_maps` downsampling to a 4×4 map,
/// then a 4×4 valid convolution to a 1×1 code) and `G` becomes a stack of
/// fractionally-strided convolutions (`conv_decoder_maps`).
#[derive(Clone, Debug, PartialEq)]
pub struct ArchConfig {
    pub latent_dim: usize,
    pub output: ViewShape,
    pub views: Vec<ViewShape>,
    pub aggregation_dim: usize,
    /// Hidden layers of `E` and `H` on top of the aggregation space.
    pub encoder_layers: Vec<DenseLayer>,
    pub generator_layers: Vec<DenseLayer>,
    pub d1_layers: Vec<DenseLayer>,
    /// Index of the `D1` layer whose input gets `z` appended.
    pub d1_z_layer: usize,
    /// Hidden layers of `D2` on top of `[Ψ(v) | z]`.
    pub d2_layers: Vec<DenseLayer>,
    pub generator_activation: Activation,
    pub encoder_activation: Activation,
    pub discriminator_activation: Activation,
    pub output_activation: Activation,
    pub leaky_slope: f64,
    pub conv_mode: bool,
    pub conv_encoder_maps: Vec<usize>,
    pub conv_decoder_maps: Vec<usize>,
    pub bn_eps: f64,
    pub bn_momentum: f64,
}

impl ArchConfig {
    /// Dense architecture with every hidden layer and the aggregation space
    /// of width `hidden`, laid out as in the MNIST experiments.
    pub fn dense(output: ViewShape, views: Vec<ViewShape>, latent_dim: usize, hidden: usize) -> Self {
        Self {
            latent_dim,
            output,
            views,
            aggregation_dim: hidden,
            encoder_layers: vec![DenseLayer::plain(hidden), DenseLayer::normed(hidden)],
            generator_layers: vec![
                DenseLayer::plain(hidden),
                DenseLayer::normed(hidden),
                DenseLayer::normed(hidden),
            ],
            d1_layers: vec![
                DenseLayer::plain(hidden),
                DenseLayer::plain(hidden),
                DenseLayer::normed(hidden),
            ],
            d1_z_layer: 1,
            d2_layers: vec![DenseLayer::plain(hidden), DenseLayer::normed(hidden)],
            generator_activation: Activation::Relu,
            encoder_activation: Activation::Relu,
            discriminator_activation: Activation::LeakyRelu,
            output_activation: Activation::Sigmoid,
            leaky_slope: 0.2,
            conv_mode: false,
            conv_encoder_maps: vec![64, 128, 256, 512],
            conv_decoder_maps: vec![512, 256, 128, 64],
            bn_eps: 1e-5,
            bn_momentum: 0.9,
        }
    }

    /// Four 14×14 quarters predicting a 28×28 digit: `Z = 128`, width 1500.
    pub fn mnist_quarters() -> Self {
        Self::dense(ViewShape::Flat(784), vec![ViewShape::Flat(196); 4], 128, 1500)
    }

    /// Convolutional layout for 64×64 RGB targets with an attribute view and
    /// an image view; aggregation space of size 1000.
    pub fn celeba(attributes: usize) -> Self {
        let image = ViewShape::Image {
            channels: 3,
            height: 64,
            width: 64,
        };
        let mut arch = Self::dense(image, vec![ViewShape::Flat(attributes), image], 128, 1000);
        arch.conv_mode = true;
        arch.encoder_layers = vec![DenseLayer::normed(1000)];
        arch.d2_layers = vec![DenseLayer::normed(1000)];
        arch.d1_layers = vec![DenseLayer::plain(1000)];
        arch.d1_z_layer = 0;
        arch.generator_layers = Vec::new();
        arch.output_activation = Activation::Tanh;
        arch
    }

    pub fn view_sizes(&self) -> Vec<usize> {
        self.views.iter().map(|v| v.size()).collect()
    }

    /// True if view (or target) `shape` is embedded by the convolution stack.
    pub fn uses_conv(&self, shape: &ViewShape) -> bool {
        self.conv_mode && shape.is_image()
    }

    pub fn validate(&self) -> Result<()> {
        let positive = |what: &str, n: usize| {
            if n == 0 {
                Err(Error::config(format!("{what} must be positive")))
            } else {
                Ok(())
            }
        };
        positive("latent_dim", self.latent_dim)?;
        positive("aggregation_dim", self.aggregation_dim)?;
        positive("output size", self.output.size())?;
        if self.views.is_empty() {
            return Err(Error::config("at least one view is required"));
        }
        for (k, v) in self.views.iter().enumerate() {
            positive(&format!("view {k} size"), v.size())?;
        }
        for (name, layers) in [
            ("encoder", &self.encoder_layers),
            ("generator", &self.generator_layers),
            ("d1", &self.d1_layers),
            ("d2", &self.d2_layers),
        ] {
            for (i, l) in layers.iter().enumerate() {
                positive(&format!("{name} layer {i} width"), l.width)?;
            }
        }
        if self.d1_z_layer > self.d1_layers.len() {
            return Err(Error::config(format!(
                "d1_z_layer {} exceeds the {} D1 layers",
                self.d1_z_layer,
                self.d1_layers.len()
            )));
        }
        if !(self.leaky_slope.is_finite() && self.leaky_slope >= 0.0) {
            return Err(Error::config("leaky_slope must be finite and non-negative"));
        }
        if !(self.bn_eps > 0.0) || !(0.0..1.0).contains(&self.bn_momentum) {
            return Err(Error::config("bn_eps must be > 0 and bn_momentum in [0,1)"));
        }
        if self.conv_mode {
            for maps in [&self.conv_encoder_maps, &self.conv_decoder_maps] {
                if maps.is_empty() || maps.contains(&0) {
                    return Err(Error::config("conv feature maps must be non-empty and positive"));
                }
            }
            let shapes = self.views.iter().chain(std::iter::once(&self.output));
            for shape in shapes {
                if let ViewShape::Image { height, width, .. } = *shape {
                    let side = 4usize << self.conv_encoder_maps.len();
                    if height != side || width != side {
                        return Err(Error::config(format!(
                            "conv stacks with {} stride-2 layers need {side}x{side} images, got {height}x{width}",
                            self.conv_encoder_maps.len()
                        )));
                    }
                }
            }
            if let ViewShape::Image { height, .. } = self.output {
                let side = 4usize << self.conv_decoder_maps.len();
                if height != side {
                    return Err(Error::config(format!(
                        "generator with {} deconv layers produces {side}x{side} images, target is {height}",
                        self.conv_decoder_maps.len()
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn to_kv(&self) -> Vec<(String, String)> {
        let p = |k: &str, v: String| (format!("arch.{k}"), v);
        vec![
            p("latent_dim", self.latent_dim.to_string()),
            p("output", self.output.to_string()),
            p("views", kv::join(&self.views)),
            p("aggregation_dim", self.aggregation_dim.to_string()),
            p("encoder_layers", kv::join(&self.encoder_layers)),
            p("generator_layers", kv::join(&self.generator_layers)),
            p("d1_layers", kv::join(&self.d1_layers)),
            p("d1_z_layer", self.d1_z_layer.to_string()),
            p("d2_layers", kv::join(&self.d2_layers)),
            p("generator_activation", self.generator_activation.to_string()),
            p("encoder_activation", self.encoder_activation.to_string()),
            p("discriminator_activation", self.discriminator_activation.to_string()),
            p("output_activation", self.output_activation.to_string()),
            p("leaky_slope", kv::float(self.leaky_slope)),
            p("conv_mode", self.conv_mode.to_string()),
            p("conv_encoder_maps", kv::join(&self.conv_encoder_maps)),
            p("conv_decoder_maps", kv::join(&self.conv_decoder_maps)),
            p("bn_eps", kv::float(self.bn_eps)),
            p("bn_momentum", kv::float(self.bn_momentum)),
        ]
    }

    /// Applies one `arch.*` key; other keys are rejected. `arch.width` is
    /// shorthand for [`with_width`](Self::with_width).
    pub fn apply(&mut self, key: &str, raw: &str) -> Result<()> {
        let name = key
            .strip_prefix("arch.")
            .ok_or_else(|| Error::UnknownKey(key.to_string()))?;
        match name {
            "latent_dim" => self.latent_dim = kv::value(key, raw)?,
            "output" => self.output = kv::value(key, raw)?,
            "views" => self.views = kv::list(key, raw)?,
            "aggregation_dim" => self.aggregation_dim = kv::value(key, raw)?,
            "encoder_layers" => self.encoder_layers = kv::list(key, raw)?,
            "generator_layers" => self.generator_layers = kv::list(key, raw)?,
            "d1_layers" => self.d1_layers = kv::list(key, raw)?,
            "d1_z_layer" => self.d1_z_layer = kv::value(key, raw)?,
            "d2_layers" => self.d2_layers = kv::list(key, raw)?,
            "generator_activation" => self.generator_activation = kv::value(key, raw)?,
            "encoder_activation" => self.encoder_activation = kv::value(key, raw)?,
            "discriminator_activation" => self.discriminator_activation = kv::value(key, raw)?,
            "output_activation" => self.output_activation = kv::value(key, raw)?,
            "leaky_slope" => self.leaky_slope = kv::value(key, raw)?,
            "conv_mode" => self.conv_mode = kv::value(key, raw)?,
            "conv_encoder_maps" => self.conv_encoder_maps = kv::list(key, raw)?,
            "conv_decoder_maps" => self.conv_decoder_maps = kv::list(key, raw)?,
            "bn_eps" => self.bn_eps = kv::value(key, raw)?,
            "bn_momentum" => self.bn_momentum = kv::value(key, raw)?,
            "width" => *self = self.clone().with_width(kv::value(key, raw)?),
            _ => return Err(Error::UnknownKey(key.to_string())),
        }
        Ok(())
    }

    /// Convenience: resize every hidden layer and the aggregation space.
    pub fn with_width(mut self, width: usize) -> Self {
        self.aggregation_dim = width;
        for layers in [
            &mut self.encoder_layers,
            &mut self.generator_layers,
            &mut self.d1_layers,
            &mut self.d2_layers,
        ] {
            for l in layers.iter_mut() {
                l.width = width;
            }
        }
        self
    }
}
