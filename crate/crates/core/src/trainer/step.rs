use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use ndarray::Array2;
use rand::Rng;

use crate::autodiff::{Grads, Real, Var};
use crate::dataio::Dataset;
use crate::error::{Error, Result};
use crate::netdef::{standard_normal, Forward, Latent, MaskBatch, ModelBundle, NetId, StatUpdate};
use crate::objective::{assemble_losses, tape, LossBreakdown, LossParts};
use crate::view::{SubsetMask, ViewSequence};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum UpdateMode {
    /// Discriminator step, then a fresh forward pass for the generator step.
    #[default]
    Alternating,
    /// Both steps from one shared forward pass.
    OnePass,
}

impl fmt::Display for UpdateMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            UpdateMode::Alternating => "alternating",
            UpdateMode::OnePass => "onepass",
        })
    }
}

impl FromStr for UpdateMode {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "alternating" => Ok(UpdateMode::Alternating),
            "onepass" => Ok(UpdateMode::OnePass),
            other => Err(format!("expected `alternating` or `onepass`, got `{other}`")),
        }
    }
}

/// Optimizer and regularization settings of one step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepConfig {
    pub lambda: f64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub update_mode: UpdateMode,
}

/// Adam moments for every parameter block, plus the shared step count.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<F> {
    pub step: u64,
    pub m: BTreeMap<String, Array2<F>>,
    pub v: BTreeMap<String, Array2<F>>,
}

impl<F: Real> AdamState<F> {
    pub fn new(model: &ModelBundle<F>) -> Self {
        let zeros: BTreeMap<String, Array2<F>> = model
            .params()
            .iter()
            .map(|(k, p)| (k.clone(), Array2::zeros(p.raw_dim())))
            .collect();
        Self {
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    fn apply(&mut self, model: &mut ModelBundle<F>, grads: &[(String, Array2<F>)], cfg: &StepConfig) {
        let t = self.step.max(1) as i32;
        let (b1, b2) = (F::lit(cfg.beta1), F::lit(cfg.beta2));
        let c1 = F::lit(1.0 - cfg.beta1.powi(t));
        let c2 = F::lit(1.0 - cfg.beta2.powi(t));
        let (lr, eps) = (F::lit(cfg.lr), F::lit(cfg.eps));
        let (one_b1, one_b2) = (F::one() - b1, F::one() - b2);
        for (name, g) in grads {
            let m = self.m.get_mut(name).expect("moment for every parameter");
            let v = self.v.get_mut(name).expect("moment for every parameter");
            let p = model.param_mut(name).expect("gradient for a known parameter");
            ndarray::Zip::from(p).and(m).and(v).and(g).for_each(|p, m, v, &g| {
                *m = b1 * *m + one_b1 * g;
                *v = b2 * *v + one_b2 * g * g;
                let m_hat = *m / c1;
                let v_hat = *v / c2;
                *p = *p - lr * m_hat / (v_hat.sqrt() + eps);
            });
        }
    }
}

/// One minibatch: targets, all views, and one nested sequence per item.
#[derive(Clone, Debug)]
pub struct TrainBatch<F> {
    pub targets: Array2<F>,
    pub views: Vec<Array2<F>>,
    pub sequences: Vec<ViewSequence>,
}

impl<F: Real> TrainBatch<F> {
    pub fn collate(data: &Dataset, indices: &[usize], sequences: Vec<ViewSequence>) -> Result<Self> {
        if indices.is_empty() {
            return Err(Error::EmptyDataset);
        }
        if sequences.len() != indices.len() {
            return Err(Error::LengthMismatch {
                expected: indices.len(),
                got: sequences.len(),
            });
        }
        let rows = indices.len();
        let to_f = |x: f32| F::lit(x as f64);
        let n = data.task.output.size();
        let mut targets = Array2::zeros((rows, n));
        for (r, &i) in indices.iter().enumerate() {
            let t = &data.examples[i].target;
            if t.len() != n {
                return Err(Error::shape(format!("example {i} target has {} values", t.len())));
            }
            targets.row_mut(r).iter_mut().zip(t).for_each(|(d, &s)| *d = to_f(s));
        }
        let views = data
            .task
            .views
            .iter()
            .enumerate()
            .map(|(k, spec)| {
                let mut m = Array2::zeros((rows, spec.size()));
                for (r, &i) in indices.iter().enumerate() {
                    let v = data.examples[i].viewset.view(k);
                    m.row_mut(r).iter_mut().zip(v).for_each(|(d, &s)| *d = to_f(s));
                }
                m
            })
            .collect();
        Ok(Self {
            targets,
            views,
            sequences,
        })
    }

    pub fn rows(&self) -> usize {
        self.targets.nrows()
    }

    pub fn seq_len(&self) -> usize {
        self.sequences.first().map_or(0, ViewSequence::len)
    }

    fn check(&self, model: &ModelBundle<F>) -> Result<()> {
        let arch = model.arch();
        let rows = self.rows();
        if self.targets.ncols() != arch.output.size() {
            return Err(Error::shape(format!(
                "targets have {} columns, model outputs {}",
                self.targets.ncols(),
                arch.output.size()
            )));
        }
        let sizes = arch.view_sizes();
        if self.views.len() != sizes.len()
            || self.views.iter().zip(&sizes).any(|(v, &n)| v.dim() != (rows, n))
        {
            return Err(Error::shape("view matrices do not match the model's views"));
        }
        let len = self.seq_len();
        if len == 0 || self.sequences.len() != rows || self.sequences.iter().any(|s| s.len() != len) {
            return Err(Error::shape("every item needs a sequence of the same non-zero length"));
        }
        if self.sequences.iter().flat_map(|s| s.masks()).any(|m| m.len() != sizes.len()) {
            return Err(Error::shape("sequence masks do not cover the model's views"));
        }
        Ok(())
    }

    fn mask_at(&self, t: usize) -> MaskBatch<F> {
        let masks: Vec<&SubsetMask> = self.sequences.iter().map(|s| &s.masks()[t]).collect();
        MaskBatch::new(&masks)
    }
}

/// Reparameterization noise of one step.
#[derive(Clone, Debug)]
pub struct StepNoise<F> {
    /// For `z_E ~ E(y)`.
    pub target: Array2<F>,
    /// For `z_H ~ H(v(s(t), x))`, one matrix per sequence step.
    pub views: Vec<Array2<F>>,
    /// Prior draws fed to `G`.
    pub prior: Array2<F>,
}

impl<F: Real> StepNoise<F> {
    pub fn draw<R: Rng + ?Sized>(rows: usize, latent: usize, steps: usize, rng: &mut R) -> Self {
        let target = standard_normal(rows, latent, rng);
        let views = (0..steps).map(|_| standard_normal(rows, latent, rng)).collect();
        let prior = standard_normal(rows, latent, rng);
        Self { target, views, prior }
    }

    pub fn zeros(rows: usize, latent: usize, steps: usize) -> Self {
        Self {
            target: Array2::zeros((rows, latent)),
            views: vec![Array2::zeros((rows, latent)); steps],
            prior: Array2::zeros((rows, latent)),
        }
    }
}

/// Scalar loss nodes of one forward pass.
#[derive(Clone, Copy, Debug)]
pub struct LossNodes {
    pub d1: Var,
    pub d2: Var,
    pub gen_adv: Var,
    pub enc_adv: Var,
    /// Item-averaged sequence KL; absent for single-step sequences.
    pub kl: Option<Var>,
    pub disc_total: Var,
    pub gen_total: Var,
}

/// Records every loss of the model on `batch`.
///
/// The `D2` terms are averaged over the sequence steps. With
/// `include_kl = false` the KL term is evaluated but kept out of
/// `gen_total`.
pub fn build_losses<F: Real>(
    fw: &mut Forward<'_, F>,
    batch: &TrainBatch<F>,
    noise: &StepNoise<F>,
    lambda: f64,
    include_kl: bool,
) -> LossNodes {
    let y = fw.input(batch.targets.clone());
    let lat_e = fw.encode_target(y);
    let z_e = fw.sample(lat_e, noise.target.clone());
    let z_p = fw.input(noise.prior.clone());
    let x_g = fw.generate(z_p);
    let d1_real = fw.d1_logits(y, z_e);
    let d1_fake = fw.d1_logits(x_g, z_p);
    let d1 = tape::discriminator_loss(&mut fw.graph, d1_real, d1_fake);
    let gen_adv = tape::generator_loss(&mut fw.graph, d1_fake, d1_real);

    let inputs: Vec<Var> = batch.views.iter().map(|v| fw.input(v.clone())).collect();
    let h_embeds = fw.embed_views(NetId::H, &inputs);
    let d2_embeds = fw.embed_views(NetId::D2, &inputs);
    let steps = batch.seq_len();
    let mut latents: Vec<Latent> = Vec::with_capacity(steps);
    let mut d2_terms = Vec::with_capacity(steps);
    let mut enc_terms = Vec::with_capacity(steps);
    for t in 0..steps {
        let mask = batch.mask_at(t);
        let lat_h = fw.encode_views(&h_embeds, &mask);
        let z_h = fw.sample(lat_h, noise.views[t].clone());
        let real = fw.d2_logits(&d2_embeds, &mask, z_e);
        let fake = fw.d2_logits(&d2_embeds, &mask, z_h);
        d2_terms.push(tape::discriminator_loss(&mut fw.graph, real, fake));
        enc_terms.push(tape::generator_loss(&mut fw.graph, fake, real));
        latents.push(lat_h);
    }
    let g = &mut fw.graph;
    let d2 = average(g, &d2_terms);
    let enc_adv = average(g, &enc_terms);
    let kl = tape::sequence_kl(g, &latents);
    let disc_total = g.add(d1, d2);
    let adv = g.add(gen_adv, enc_adv);
    let gen_total = match kl {
        Some(kl) if include_kl => {
            let weighted = g.scale(kl, F::lit(lambda));
            g.add(adv, weighted)
        }
        _ => adv,
    };
    LossNodes {
        d1,
        d2,
        gen_adv,
        enc_adv,
        kl,
        disc_total,
        gen_total,
    }
}

fn average<F: Real>(g: &mut crate::autodiff::Graph<F>, terms: &[Var]) -> Var {
    let mut acc = terms[0];
    for &t in &terms[1..] {
        acc = g.add(acc, t);
    }
    g.scale(acc, F::lit(1.0 / terms.len() as f64))
}

fn scalar<F: Real>(fw: &Forward<'_, F>, v: Var) -> f64 {
    fw.graph.value(v)[[0, 0]].to_f64_lossy()
}

fn non_finite(detail: String) -> Error {
    Error::NonFiniteLoss {
        epoch: 0,
        batch: 0,
        detail,
    }
}

fn check_scalars(named: &[(&str, f64)]) -> Result<()> {
    match named.iter().find(|(_, v)| !v.is_finite()) {
        Some((name, v)) => Err(non_finite(format!("{name} = {v}"))),
        None => Ok(()),
    }
}

/// Gradients of the bound parameters owned by `nets`.
fn collect_grads<F: Real>(fw: &Forward<'_, F>, grads: &Grads<F>, nets: &[NetId]) -> Result<Vec<(String, Array2<F>)>> {
    let mut out: Vec<(String, Array2<F>)> = fw
        .bound_params()
        .filter(|(name, _)| NetId::of_param(name).is_some_and(|n| nets.contains(&n)))
        .filter_map(|(name, v)| grads.get(v).map(|g| (name.to_string(), g.clone())))
        .collect();
    out.sort_by(|a, b| a.0.cmp(&b.0));
    if let Some((name, _)) = out.iter().find(|(_, g)| g.iter().any(|x| !x.is_finite())) {
        return Err(non_finite(format!("gradient of {name}")));
    }
    Ok(out)
}

const DISCRIMINATORS: [NetId; 2] = [NetId::D1, NetId::D2];
const GENERATORS: [NetId; 3] = [NetId::G, NetId::E, NetId::H];

struct Pass<F> {
    parts: LossParts,
    grads: Vec<(String, Array2<F>)>,
    stats: Vec<StatUpdate<F>>,
}

fn read_parts<F: Real>(fw: &Forward<'_, F>, nodes: &LossNodes) -> Result<LossParts> {
    let parts = LossParts {
        d1_loss: scalar(fw, nodes.d1),
        d2_loss: scalar(fw, nodes.d2),
        gen_adv_loss: scalar(fw, nodes.gen_adv),
        enc_adv_loss: scalar(fw, nodes.enc_adv),
        kl_penalty: nodes.kl.map_or(0.0, |k| scalar(fw, k)),
    };
    check_scalars(&[
        ("d1_loss", parts.d1_loss),
        ("d2_loss", parts.d2_loss),
        ("gen_adv", parts.gen_adv_loss),
        ("enc_adv", parts.enc_adv_loss),
        ("kl_penalty", parts.kl_penalty),
    ])?;
    Ok(parts)
}

fn pass<F: Real>(
    model: &ModelBundle<F>,
    batch: &TrainBatch<F>,
    noise: &StepNoise<F>,
    cfg: &StepConfig,
    include_kl: bool,
    nets: &[NetId],
    root: impl Fn(&LossNodes) -> Var,
) -> Result<Pass<F>> {
    let mut fw = Forward::new(model, true, nets);
    let nodes = build_losses(&mut fw, batch, noise, cfg.lambda, include_kl);
    let parts = read_parts(&fw, &nodes)?;
    let grads = fw.graph.backward(root(&nodes));
    let grads = collect_grads(&fw, &grads, nets)?;
    Ok(Pass {
        parts,
        grads,
        stats: fw.take_stats(),
    })
}

/// One training step: discriminators, then generator and encoders.
///
/// Batch-norm running averages are updated from the first forward pass.
/// On a non-finite loss or gradient the returned `NonFiniteLoss` carries
/// epoch and batch 0; [`Trainer`](super::Trainer) fills in the position.
pub fn train_step<F: Real>(
    model: &mut ModelBundle<F>,
    optim: &mut AdamState<F>,
    batch: &TrainBatch<F>,
    noise: &StepNoise<F>,
    cfg: &StepConfig,
) -> Result<LossBreakdown> {
    train_step_with(model, optim, batch, noise, cfg, true)
}

/// [`train_step`] with the option of leaving the KL term out of the
/// generator-side gradient.
pub fn train_step_with<F: Real>(
    model: &mut ModelBundle<F>,
    optim: &mut AdamState<F>,
    batch: &TrainBatch<F>,
    noise: &StepNoise<F>,
    cfg: &StepConfig,
    include_kl: bool,
) -> Result<LossBreakdown> {
    batch.check(model)?;
    if noise.views.len() != batch.seq_len() {
        return Err(Error::shape("one noise matrix per sequence step"));
    }
    optim.step += 1;
    let (disc_parts, gen_parts) = match cfg.update_mode {
        UpdateMode::Alternating => {
            let d = pass(model, batch, noise, cfg, include_kl, &DISCRIMINATORS, |n| n.disc_total)?;
            optim.apply(model, &d.grads, cfg);
            model.update_running(&d.stats);
            let g = pass(model, batch, noise, cfg, include_kl, &GENERATORS, |n| n.gen_total)?;
            optim.apply(model, &g.grads, cfg);
            (d.parts, g.parts)
        }
        UpdateMode::OnePass => {
            let mut fw = Forward::new(model, true, &NetId::ALL);
            let nodes = build_losses(&mut fw, batch, noise, cfg.lambda, include_kl);
            let parts = read_parts(&fw, &nodes)?;
            let dg = fw.graph.backward(nodes.disc_total);
            let dg = collect_grads(&fw, &dg, &DISCRIMINATORS)?;
            let gg = fw.graph.backward(nodes.gen_total);
            let gg = collect_grads(&fw, &gg, &GENERATORS)?;
            let stats = fw.take_stats();
            drop(fw);
            optim.apply(model, &dg, cfg);
            optim.apply(model, &gg, cfg);
            model.update_running(&stats);
            (parts, parts)
        }
    };
    let parts = LossParts {
        d1_loss: disc_parts.d1_loss,
        d2_loss: disc_parts.d2_loss,
        ..gen_parts
    };
    assemble_losses(parts, cfg.lambda).map_err(|e| non_finite(e.to_string()))
}

/// Losses of `model` on `batch` without updating anything.
pub fn evaluate_losses<F: Real>(
    model: &ModelBundle<F>,
    batch: &TrainBatch<F>,
    noise: &StepNoise<F>,
    lambda: f64,
) -> Result<LossBreakdown> {
    batch.check(model)?;
    let mut fw = Forward::new(model, true, &[]);
    let nodes = build_losses(&mut fw, batch, noise, lambda, true);
    assemble_losses(read_parts(&fw, &nodes)?, lambda)
}
