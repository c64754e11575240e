//! Batched, side-effect-free evaluation of the individual networks.
//!
//! Training-mode calls normalize with the statistics of the given batch but
//! never touch the bundle's running averages.

use ndarray::{Array1, Array2, ArrayView2};

use super::{Forward, Latent, MaskBatch, ModelBundle, NetId};
use crate::autodiff::{sigmoid, Real, Var};
use crate::error::{Error, Result};
use crate::view::{LatentGaussian, SubsetMask, ViewSet};

/// Which network's embeddings to aggregate with.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ViewNet {
    H,
    D2,
}

impl From<ViewNet> for NetId {
    fn from(v: ViewNet) -> Self {
        match v {
            ViewNet::H => NetId::H,
            ViewNet::D2 => NetId::D2,
        }
    }
}

/// A batch of view sets as dense per-view matrices plus per-item masks.
///
/// Unlike [`ViewSet`], the raw matrices may hold anything in masked-out
/// slots; the networks are expected to ignore it.
#[derive(Clone, Debug, PartialEq)]
pub struct ViewBatch<F> {
    pub views: Vec<Array2<F>>,
    pub masks: Vec<SubsetMask>,
}

impl<F: Real> ViewBatch<F> {
    pub fn new(views: Vec<Array2<F>>, masks: Vec<SubsetMask>) -> Self {
        Self { views, masks }
    }

    pub fn from_viewsets(sets: &[ViewSet]) -> Result<Self> {
        let first = sets.first().ok_or(Error::EmptyDataset)?;
        let v = first.num_views();
        let mut views = Vec::with_capacity(v);
        for k in 0..v {
            let n = first.view(k).len();
            let mut m = Array2::zeros((sets.len(), n));
            for (i, s) in sets.iter().enumerate() {
                if s.num_views() != v || s.view(k).len() != n {
                    return Err(Error::shape(format!("view set {i} does not match the batch layout")));
                }
                for (dst, &src) in m.row_mut(i).iter_mut().zip(s.view(k)) {
                    *dst = F::lit(src as f64);
                }
            }
            views.push(m);
        }
        Ok(Self {
            views,
            masks: sets.iter().map(|s| s.mask().clone()).collect(),
        })
    }

    pub fn rows(&self) -> usize {
        self.masks.len()
    }

    pub fn mask_batch(&self) -> MaskBatch<F> {
        MaskBatch::new(&self.masks.iter().collect::<Vec<_>>())
    }

    fn check(&self, model: &ModelBundle<F>) -> Result<()> {
        let sizes = model.arch().view_sizes();
        if self.views.len() != sizes.len() {
            return Err(Error::shape(format!(
                "{} views given, model declares {}",
                self.views.len(),
                sizes.len()
            )));
        }
        for (k, (m, &n)) in self.views.iter().zip(&sizes).enumerate() {
            if m.dim() != (self.rows(), n) {
                return Err(Error::shape(format!(
                    "view {k} batch is {:?}, expected ({}, {n})",
                    m.dim(),
                    self.rows()
                )));
            }
        }
        if let Some(m) = self.masks.iter().find(|m| m.len() != sizes.len()) {
            return Err(Error::shape(format!("mask {m:?} does not cover {} views", sizes.len())));
        }
        Ok(())
    }
}

fn check_cols<F: Real>(what: &str, x: &ArrayView2<F>, cols: usize) -> Result<()> {
    if x.ncols() != cols {
        return Err(Error::shape(format!("{what} has {} columns, expected {cols}", x.ncols())));
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite(format!("{what} input")));
    }
    Ok(())
}

fn finite<'a, F: Real>(what: &str, a: &'a Array2<F>) -> Result<&'a Array2<F>> {
    if a.iter().all(|v| v.is_finite()) {
        Ok(a)
    } else {
        Err(Error::NonFiniteActivation(what.to_string()))
    }
}

fn gaussians<F: Real>(fw: &Forward<'_, F>, lat: Latent, what: &str) -> Result<Vec<LatentGaussian>> {
    let mu = finite(what, fw.graph.value(lat.mu))?;
    let lv = finite(what, fw.graph.value(lat.log_var))?;
    Ok(mu
        .rows()
        .into_iter()
        .zip(lv.rows())
        .map(|(m, l)| LatentGaussian {
            mu: m.iter().map(|x| x.to_f64_lossy()).collect(),
            log_var: l.iter().map(|x| x.to_f64_lossy()).collect(),
        })
        .collect())
}

fn probabilities<F: Real>(fw: &Forward<'_, F>, logits: Var, what: &str) -> Result<Array1<F>> {
    let l = finite(what, fw.graph.value(logits))?;
    Ok(l.column(0).mapv(sigmoid))
}

/// `E(y)` for each row of `y`.
pub fn encode_target<F: Real>(
    model: &ModelBundle<F>,
    y: ArrayView2<F>,
    train_mode: bool,
) -> Result<Vec<LatentGaussian>> {
    check_cols("target", &y, model.arch().output.size())?;
    let mut fw = Forward::new(model, train_mode, &[]);
    let yv = fw.input(y.to_owned());
    let lat = fw.encode_target(yv);
    gaussians(&fw, lat, "E")
}

/// `G(z)` for each row of `z`.
pub fn generate<F: Real>(model: &ModelBundle<F>, z: ArrayView2<F>, train_mode: bool) -> Result<Array2<F>> {
    check_cols("latent", &z, model.arch().latent_dim)?;
    let mut fw = Forward::new(model, train_mode, &[]);
    let zv = fw.input(z.to_owned());
    let out = fw.generate(zv);
    Ok(finite("G", fw.graph.value(out))?.clone())
}

/// `Ψ(v(s,x))` with the embeddings of `net`, one row per item.
pub fn aggregate<F: Real>(model: &ModelBundle<F>, net: ViewNet, batch: &ViewBatch<F>) -> Result<Array2<F>> {
    batch.check(model)?;
    let mut fw = Forward::new(model, false, &[]);
    let inputs: Vec<Var> = batch.views.iter().map(|v| fw.input(v.clone())).collect();
    let embeds = fw.embed_views(net.into(), &inputs);
    let agg = fw.aggregate(&embeds, &batch.mask_batch());
    Ok(finite("aggregate", fw.graph.value(agg))?.clone())
}

/// `H(v(s,x))` for each item.
pub fn encode_views<F: Real>(
    model: &ModelBundle<F>,
    batch: &ViewBatch<F>,
    train_mode: bool,
) -> Result<Vec<LatentGaussian>> {
    batch.check(model)?;
    let mut fw = Forward::new(model, train_mode, &[]);
    let inputs: Vec<Var> = batch.views.iter().map(|v| fw.input(v.clone())).collect();
    let embeds = fw.embed_views(NetId::H, &inputs);
    let lat = fw.encode_views(&embeds, &batch.mask_batch());
    gaussians(&fw, lat, "H")
}

/// `D1(y, z)` probabilities.
pub fn discriminate_pair<F: Real>(
    model: &ModelBundle<F>,
    y: ArrayView2<F>,
    z: ArrayView2<F>,
    train_mode: bool,
) -> Result<Array1<F>> {
    check_cols("target", &y, model.arch().output.size())?;
    check_cols("latent", &z, model.arch().latent_dim)?;
    if y.nrows() != z.nrows() {
        return Err(Error::shape(format!("{} targets vs {} latents", y.nrows(), z.nrows())));
    }
    let mut fw = Forward::new(model, train_mode, &[]);
    let yv = fw.input(y.to_owned());
    let zv = fw.input(z.to_owned());
    let logits = fw.d1_logits(yv, zv);
    probabilities(&fw, logits, "D1")
}

/// `D2(v(s,x), z)` probabilities.
pub fn discriminate_view_pair<F: Real>(
    model: &ModelBundle<F>,
    batch: &ViewBatch<F>,
    z: ArrayView2<F>,
    train_mode: bool,
) -> Result<Array1<F>> {
    batch.check(model)?;
    check_cols("latent", &z, model.arch().latent_dim)?;
    if z.nrows() != batch.rows() {
        return Err(Error::shape(format!("{} view sets vs {} latents", batch.rows(), z.nrows())));
    }
    let mut fw = Forward::new(model, train_mode, &[]);
    let inputs: Vec<Var> = batch.views.iter().map(|v| fw.input(v.clone())).collect();
    let embeds = fw.embed_views(NetId::D2, &inputs);
    let zv = fw.input(z.to_owned());
    let logits = fw.d2_logits(&embeds, &batch.mask_batch(), zv);
    probabilities(&fw, logits, "D2")
}

/// `μ + exp(½ log σ²) ⊙ noise`.
pub fn sample_latent(g: &LatentGaussian, noise: &[f64]) -> Result<Vec<f64>> {
    if noise.len() != g.dim() {
        return Err(Error::shape(format!("noise has {} entries, latent has {}", noise.len(), g.dim())));
    }
    if noise.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite("noise".into()));
    }
    Ok(g.mu
        .iter()
        .zip(&g.log_var)
        .zip(noise)
        .map(|((m, lv), e)| m + (0.5 * lv).exp() * e)
        .collect())
}
