//! Views, subset masks and the latent Gaussian type shared across the crate.
//!
//! An object is observed through `V` views. A [`SubsetMask`] marks which of
//! them are available, and a [`ViewSet`] carries the view values together
//! with the mask. Views whose mask bit is zero are kept as all-zero
//! placeholders so every batch has the same dense shape.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};

/// Checks that `bits` is a binary vector of length `views`.
pub fn validate_mask(bits: &[u8], views: usize) -> Result<()> {
    if bits.len() != views {
        return Err(Error::LengthMismatch {
            expected: views,
            got: bits.len(),
        });
    }
    match bits.iter().position(|&b| b > 1) {
        Some(index) => Err(Error::NonBinaryEntry {
            index,
            value: bits[index],
        }),
        None => Ok(()),
    }
}

/// Index vector `s ∈ {0,1}^V` selecting the available views.
#[derive(Clone, PartialEq, Eq, Hash)]
pub struct SubsetMask {
    bits: Vec<bool>,
}

impl SubsetMask {
    pub fn from_bits(bits: &[u8], views: usize) -> Result<Self> {
        validate_mask(bits, views)?;
        Ok(Self {
            bits: bits.iter().map(|&b| b == 1).collect(),
        })
    }

    pub fn from_bools(bits: Vec<bool>) -> Self {
        Self { bits }
    }

    pub fn full(views: usize) -> Self {
        Self {
            bits: vec![true; views],
        }
    }

    pub fn empty(views: usize) -> Self {
        Self {
            bits: vec![false; views],
        }
    }

    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }

    pub fn get(&self, k: usize) -> bool {
        self.bits[k]
    }

    pub fn set(&mut self, k: usize, on: bool) {
        self.bits[k] = on;
    }

    pub fn bools(&self) -> &[bool] {
        &self.bits
    }

    pub fn to_bits(&self) -> Vec<u8> {
        self.bits.iter().map(|&b| b as u8).collect()
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    /// True iff every view available in `self` is also available in `other`.
    pub fn is_subset_of(&self, other: &SubsetMask) -> Result<bool> {
        is_nested(self, other)
    }
}

impl fmt::Debug for SubsetMask {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "SubsetMask(")?;
        for &b in &self.bits {
            write!(f, "{}", b as u8)?;
        }
        write!(f, ")")
    }
}

/// `s ⊆ s'`, i.e. `s'_k >= s_k` for every view `k`.
pub fn is_nested(s: &SubsetMask, s_prime: &SubsetMask) -> Result<bool> {
    if s.len() != s_prime.len() {
        return Err(Error::LengthMismatch {
            expected: s.len(),
            got: s_prime.len(),
        });
    }
    Ok(s.bits.iter().zip(&s_prime.bits).all(|(&a, &b)| b || !a))
}

/// Declared shape of a view or of the target.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ViewShape {
    Flat(usize),
    Image {
        channels: usize,
        height: usize,
        width: usize,
    },
}

impl ViewShape {
    pub fn size(&self) -> usize {
        match *self {
            ViewShape::Flat(n) => n,
            ViewShape::Image {
                channels,
                height,
                width,
            } => channels * height * width,
        }
    }

    pub fn is_image(&self) -> bool {
        matches!(self, ViewShape::Image { .. })
    }
}

impl fmt::Display for ViewShape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match *self {
            ViewShape::Flat(n) => write!(f, "{n}"),
            ViewShape::Image {
                channels,
                height,
                width,
            } => write!(f, "{channels}x{height}x{width}"),
        }
    }
}

impl FromStr for ViewShape {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        let parts: Vec<&str> = s.trim().split('x').collect();
        let parse = |p: &str| {
            p.trim()
                .parse::<usize>()
                .map_err(|e| format!("bad shape `{s}`: {e}"))
        };
        match parts.as_slice() {
            [n] => Ok(ViewShape::Flat(parse(n)?)),
            [c, h, w] => Ok(ViewShape::Image {
                channels: parse(c)?,
                height: parse(h)?,
                width: parse(w)?,
            }),
            _ => Err(format!("bad shape `{s}`: expected N or CxHxW")),
        }
    }
}

/// Per-view declaration: shape and whether values are pixel intensities in `[0,1]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ViewSpec {
    pub shape: ViewShape,
    pub unit_range: bool,
}

impl ViewSpec {
    pub fn flat(n: usize) -> Self {
        Self {
            shape: ViewShape::Flat(n),
            unit_range: false,
        }
    }

    pub fn pixels(n: usize) -> Self {
        Self {
            shape: ViewShape::Flat(n),
            unit_range: true,
        }
    }

    pub fn size(&self) -> usize {
        self.shape.size()
    }
}

fn check_values(values: &[f32], unit_range: bool, what: &str) -> Result<()> {
    for (i, &x) in values.iter().enumerate() {
        if !x.is_finite() {
            return Err(Error::NonFinite(format!("{what}[{i}] = {x}")));
        }
        if unit_range && !(0.0..=1.0).contains(&x) {
            return Err(Error::shape(format!(
                "{what}[{i}] = {x} outside the [0,1] pixel range"
            )));
        }
    }
    Ok(())
}

/// Available views of one object: the value `v(s, x)`.
#[derive(Clone, Debug, PartialEq)]
pub struct ViewSet {
    mask: SubsetMask,
    views: Vec<Vec<f32>>,
}

impl ViewSet {
    /// Builds a view set; views with mask bit 0 are replaced by zeros.
    pub fn new(mask: SubsetMask, mut views: Vec<Vec<f32>>, layout: &[ViewSpec]) -> Result<Self> {
        if mask.len() != layout.len() {
            return Err(Error::LengthMismatch {
                expected: layout.len(),
                got: mask.len(),
            });
        }
        if views.len() != layout.len() {
            return Err(Error::LengthMismatch {
                expected: layout.len(),
                got: views.len(),
            });
        }
        for (k, (view, spec)) in views.iter_mut().zip(layout).enumerate() {
            if view.len() != spec.size() {
                return Err(Error::shape(format!(
                    "view {k} has {} values, declared {}",
                    view.len(),
                    spec.shape
                )));
            }
            if mask.get(k) {
                check_values(view, spec.unit_range, &format!("view {k}"))?;
            } else {
                view.iter_mut().for_each(|x| *x = 0.0);
            }
        }
        Ok(Self { mask, views })
    }

    pub fn mask(&self) -> &SubsetMask {
        &self.mask
    }

    pub fn views(&self) -> &[Vec<f32>] {
        &self.views
    }

    pub fn view(&self, k: usize) -> &[f32] {
        &self.views[k]
    }

    pub fn num_views(&self) -> usize {
        self.views.len()
    }

    /// Same underlying values restricted to `mask`. `mask` must be a subset of
    /// the current mask, since zeroed placeholders cannot be recovered.
    pub fn restrict(&self, mask: &SubsetMask) -> Result<Self> {
        if !is_nested(mask, &self.mask)? {
            return Err(Error::shape(format!(
                "{mask:?} is not a subset of the available views {:?}",
                self.mask
            )));
        }
        let views = self
            .views
            .iter()
            .enumerate()
            .map(|(k, v)| {
                if mask.get(k) {
                    v.clone()
                } else {
                    vec![0.0; v.len()]
                }
            })
            .collect();
        Ok(Self {
            mask: mask.clone(),
            views,
        })
    }
}

/// Diagonal Gaussian over the latent space, parameterized by `(μ, log σ²)`.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentGaussian {
    pub mu: Vec<f64>,
    pub log_var: Vec<f64>,
}

impl LatentGaussian {
    pub fn new(mu: Vec<f64>, log_var: Vec<f64>) -> Result<Self> {
        if mu.len() != log_var.len() {
            return Err(Error::LengthMismatch {
                expected: mu.len(),
                got: log_var.len(),
            });
        }
        if let Some(x) = mu.iter().chain(&log_var).find(|x| !x.is_finite()) {
            return Err(Error::NonFinite(format!("latent parameter {x}")));
        }
        Ok(Self { mu, log_var })
    }

    pub fn standard(dim: usize) -> Self {
        Self {
            mu: vec![0.0; dim],
            log_var: vec![0.0; dim],
        }
    }

    pub fn dim(&self) -> usize {
        self.mu.len()
    }

    pub fn variance(&self) -> Vec<f64> {
        self.log_var.iter().map(|lv| lv.exp()).collect()
    }
}

/// One training or test item: the target `y` and its views.
#[derive(Clone, Debug, PartialEq)]
pub struct Example {
    pub target: Vec<f32>,
    pub viewset: ViewSet,
    pub label: Option<u8>,
}

impl Example {
    pub fn new(target: Vec<f32>, viewset: ViewSet, output: &ViewSpec) -> Result<Self> {
        if target.len() != output.size() {
            return Err(Error::shape(format!(
                "target has {} values, declared {}",
                target.len(),
                output.shape
            )));
        }
        check_values(&target, output.unit_range, "target")?;
        Ok(Self {
            target,
            viewset,
            label: None,
        })
    }

    pub fn with_label(mut self, label: u8) -> Self {
        self.label = Some(label);
        self
    }
}

/// Ordered masks `s(1) ⊆ s(2) ⊆ … ⊆ s(L)`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ViewSequence {
    masks: Vec<SubsetMask>,
}

impl ViewSequence {
    pub fn new(masks: Vec<SubsetMask>) -> Result<Self> {
        for (t, pair) in masks.windows(2).enumerate() {
            if !is_nested(&pair[0], &pair[1])? {
                return Err(Error::shape(format!(
                    "mask {} = {:?} does not contain mask {t} = {:?}",
                    t + 1,
                    pair[1],
                    pair[0]
                )));
            }
        }
        Ok(Self { masks })
    }

    pub fn masks(&self) -> &[SubsetMask] {
        &self.masks
    }

    pub fn len(&self) -> usize {
        self.masks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.masks.is_empty()
    }
}
