//! Conditional sampling and the metrics built on it.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use ndarray::Array2;
use rand::Rng;
use serde::Serialize;

use crate::dataio::{epoch_rng, reveal_sequence, sample_view_sequence, Dataset, SyntheticSpec, TaskKind, TaskSpec, MISSING, SIDE};
use crate::error::{Error, Result};
use crate::netdef::{encode_views, generate, standard_normal, ModelBundle, ViewBatch};
use crate::view::{SubsetMask, ViewSequence, ViewSet};

const PROFILE_STREAM: u64 = 11;

/// Seeded generator for the sampling functions below.
pub fn seeded_rng(seed: u64) -> rand_chacha::ChaCha8Rng {
    rand::SeedableRng::seed_from_u64(seed)
}

/// `G(z)` for `z = μ_H + σ_H ⊙ noise[i]`, one output per noise row.
pub fn sample_conditional_from_noise(model: &ModelBundle, viewset: &ViewSet, noise: &Array2<f32>) -> Result<Vec<Vec<f32>>> {
    let batch = ViewBatch::from_viewsets(std::slice::from_ref(viewset))?;
    let lat = encode_views(model, &batch, false)?.remove(0);
    if noise.ncols() != lat.dim() {
        return Err(Error::shape(format!("noise has {} columns, latent has {}", noise.ncols(), lat.dim())));
    }
    let z = Array2::from_shape_fn(noise.dim(), |(i, j)| {
        (lat.mu[j] + (0.5 * lat.log_var[j]).exp() * noise[[i, j]] as f64) as f32
    });
    let out = generate(model, z.view(), false)?;
    Ok(out.rows().into_iter().map(|r| r.to_vec()).collect())
}

/// `m` independent draws `y = G(z)`, `z ~ H(v(s,x))`, in eval mode.
pub fn sample_conditional<R: Rng + ?Sized>(model: &ModelBundle, viewset: &ViewSet, m: usize, rng: &mut R) -> Result<Vec<Vec<f32>>> {
    if m == 0 {
        return Err(Error::TooFewSamples(0));
    }
    let noise = standard_normal(m, model.arch().latent_dim, rng);
    sample_conditional_from_noise(model, viewset, &noise)
}

/// Mean over dimensions of the population variance across samples.
pub fn variance_metric(samples: &[Vec<f32>]) -> Result<f64> {
    if samples.len() < 2 {
        return Err(Error::TooFewSamples(samples.len()));
    }
    let dims = samples[0].len();
    if dims == 0 || samples.iter().any(|s| s.len() != dims) {
        return Err(Error::shape("samples must share one non-zero length"));
    }
    let m = samples.len() as f64;
    let mut total = 0.0;
    for d in 0..dims {
        let mean = samples.iter().map(|s| s[d] as f64).sum::<f64>() / m;
        total += samples.iter().map(|s| (s[d] as f64 - mean).powi(2)).sum::<f64>() / m;
    }
    Ok(total / dims as f64)
}

/// Sample variance along a sequence of growing view subsets.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct VarianceProfile {
    /// `per_item[i][t]`: variance of item `i` given the first `t + 1` masks.
    pub per_item: Vec<Vec<f64>>,
    /// Per-step means over items.
    pub step_means: Vec<f64>,
    /// Whether each item's variance strictly decreases at every step.
    pub monotone: Vec<bool>,
    pub fraction_monotone: f64,
}

impl VarianceProfile {
    pub fn from_items(per_item: Vec<Vec<f64>>) -> Result<Self> {
        let steps = per_item.first().map_or(0, Vec::len);
        if steps == 0 || per_item.iter().any(|v| v.len() != steps) {
            return Err(Error::shape("every item needs the same non-zero number of steps"));
        }
        let n = per_item.len() as f64;
        let step_means = (0..steps).map(|t| per_item.iter().map(|v| v[t]).sum::<f64>() / n).collect();
        let monotone: Vec<bool> = per_item.iter().map(|v| strictly_decreasing(v)).collect();
        let fraction_monotone = monotone.iter().filter(|&&b| b).count() as f64 / n;
        Ok(Self {
            per_item,
            step_means,
            monotone,
            fraction_monotone,
        })
    }

    pub fn population_decreasing(&self) -> bool {
        strictly_decreasing(&self.step_means)
    }

    /// Item-averaged `var(L) / var(1)`.
    pub fn mean_ratio(&self) -> f64 {
        let ratios: Vec<f64> = self
            .per_item
            .iter()
            .map(|v| v[v.len() - 1] / v[0])
            .filter(|r| r.is_finite())
            .collect();
        ratios.iter().sum::<f64>() / ratios.len() as f64
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("profile serializes")
    }
}

fn strictly_decreasing(v: &[f64]) -> bool {
    v.windows(2).all(|w| w[1] < w[0])
}

/// An evaluation sequence of length `len` for `task`.
pub fn eval_sequence<R: Rng + ?Sized>(task: &TaskSpec, len: usize, rng: &mut R) -> Result<ViewSequence> {
    match task.kind {
        TaskKind::Stream => reveal_sequence(task.num_views(), len),
        _ => sample_view_sequence(task.num_views(), len, rng),
    }
}

/// Variance of `m` conditional samples at each step of one random
/// sequence per item. Item `i` draws from its own stream of `seed`.
pub fn variance_profile(model: &ModelBundle, data: &Dataset, len: usize, m: usize, seed: u64) -> Result<VarianceProfile> {
    if m < 2 {
        return Err(Error::TooFewSamples(m));
    }
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let per_item = data
        .examples
        .iter()
        .enumerate()
        .map(|(i, ex)| {
            let mut rng = epoch_rng(seed, i as u64, PROFILE_STREAM);
            let seq = eval_sequence(&data.task, len, &mut rng)?;
            seq.masks()
                .iter()
                .map(|mask| {
                    let vs = ex.viewset.restrict(mask)?;
                    variance_metric(&sample_conditional(model, &vs, m, &mut rng)?)
                })
                .collect::<Result<Vec<f64>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    VarianceProfile::from_items(per_item)
}

/// 28×28 picture of the views available in `viewset`, unknown pixels at mid-gray.
pub fn input_canvas(task: &TaskSpec, viewset: &ViewSet) -> Result<Vec<f32>> {
    let mut canvas = vec![MISSING; SIDE * SIDE];
    let mask = viewset.mask();
    match task.kind {
        TaskKind::Quarters => {
            let h = SIDE / 2;
            for q in (0..4).filter(|&q| mask.get(q)) {
                let (r0, c0) = ((q / 2) * h, (q % 2) * h);
                for r in 0..h {
                    canvas[(r0 + r) * SIDE + c0..(r0 + r) * SIDE + c0 + h]
                        .copy_from_slice(&viewset.view(q)[r * h..(r + 1) * h]);
                }
            }
        }
        TaskKind::Stream => {
            // Reveals are cumulative, so the richest available view shows everything known.
            if let Some(k) = (0..mask.len()).rev().find(|&k| mask.get(k)) {
                canvas.copy_from_slice(viewset.view(k));
            }
        }
        TaskKind::Hetero => {
            if mask.get(1) {
                canvas.copy_from_slice(viewset.view(1));
            }
        }
        TaskKind::Synthetic => return Err(Error::shape("the synthetic task has no image views")),
    }
    Ok(canvas)
}

/// One grid row: the input picture followed by samples.
#[derive(Clone, Debug, PartialEq)]
pub struct GridRow {
    pub input: Vec<f32>,
    pub samples: Vec<Vec<f32>>,
}

fn to_byte(x: f32) -> u8 {
    (x.clamp(0.0, 1.0) as f64 * 255.0 + 0.5).floor() as u8
}

/// Encodes rows of `height × width` cells as a binary PGM.
pub fn encode_grid(rows: &[GridRow], height: usize, width: usize) -> Result<Vec<u8>> {
    let cells = rows.first().map_or(0, |r| 1 + r.samples.len());
    if cells == 0 || rows.iter().any(|r| 1 + r.samples.len() != cells) {
        return Err(Error::shape("grid rows must have the same number of cells"));
    }
    let cell = height * width;
    if rows
        .iter()
        .flat_map(|r| std::iter::once(&r.input).chain(&r.samples))
        .any(|c| c.len() != cell)
    {
        return Err(Error::shape(format!("every cell must hold {height}x{width} values")));
    }
    let (gw, gh) = (cells * width, rows.len() * height);
    let mut out = format!("P5\n{gw} {gh}\n255\n").into_bytes();
    for row in rows {
        let cs: Vec<&Vec<f32>> = std::iter::once(&row.input).chain(&row.samples).collect();
        for y in 0..height {
            for c in &cs {
                out.extend(c[y * width..(y + 1) * width].iter().map(|&x| to_byte(x)));
            }
        }
    }
    Ok(out)
}

pub fn render_grid(rows: &[GridRow], height: usize, width: usize, path: &Path) -> Result<()> {
    let bytes = encode_grid(rows, height, width)?;
    if let Some(dir) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, bytes)?;
    Ok(())
}

/// Parses a binary PGM with maxval 255 into `(width, height, pixels)`.
pub fn parse_pgm(bytes: &[u8]) -> Result<(usize, usize, Vec<u8>)> {
    let mut fields = Vec::new();
    let mut at = 0;
    while fields.len() < 4 {
        while at < bytes.len() && bytes[at].is_ascii_whitespace() {
            at += 1;
        }
        let start = at;
        while at < bytes.len() && !bytes[at].is_ascii_whitespace() {
            at += 1;
        }
        if start == at {
            return Err(Error::TruncatedFile("PGM header".into()));
        }
        fields.push(String::from_utf8_lossy(&bytes[start..at]).into_owned());
    }
    at += 1;
    let num = |s: &str| s.parse::<usize>().map_err(|_| Error::shape(format!("bad PGM header field {s:?}")));
    if fields[0] != "P5" || num(&fields[3])? != 255 {
        return Err(Error::shape("not an 8-bit binary PGM"));
    }
    let (w, h) = (num(&fields[1])?, num(&fields[2])?);
    let data = bytes.get(at..at + w * h).ok_or_else(|| Error::TruncatedFile("PGM pixels".into()))?;
    Ok((w, h, data.to_vec()))
}

/// Sample statistics of one conditioning against their analytic values.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ConditionStats {
    pub available: [bool; 2],
    pub mean: [f64; 2],
    pub var: [f64; 2],
    pub analytic_mean: [f64; 2],
    pub analytic_var: [f64; 2],
}

/// Results for one sign pattern of the synthetic views.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SignCondition {
    pub signs: [i8; 2],
    /// Both views available.
    pub both: ConditionStats,
    /// Only view `k` available, for `k = 0, 1`.
    pub single: [ConditionStats; 2],
}

impl SignCondition {
    /// `var(only view k, dim 1-k) / var(both views, dim 1-k)` for `k = 0, 1`.
    pub fn orthogonal_ratios(&self) -> [f64; 2] {
        [0, 1].map(|k| self.single[k].var[1 - k] / self.both.var[1 - k])
    }

    /// Largest absolute deviation of the two-view mean from its analytic value.
    pub fn mean_error(&self) -> f64 {
        (0..2)
            .map(|d| (self.both.mean[d] - self.both.analytic_mean[d]).abs())
            .fold(0.0, f64::max)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SyntheticReport {
    pub samples_per_condition: usize,
    pub conditions: Vec<SignCondition>,
}

impl SyntheticReport {
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let f2 = |a: [f64; 2]| format!("{:.4}, {:.4}", a[0], a[1]);
        let _ = writeln!(s, "samples_per_condition = {}", self.samples_per_condition);
        for c in &self.conditions {
            let tag = format!("signs[{:+},{:+}]", c.signs[0], c.signs[1]);
            let stats = [("both", &c.both), ("view0", &c.single[0]), ("view1", &c.single[1])];
            for (name, st) in stats {
                let _ = writeln!(s, "{tag}.{name}.mean = {}", f2(st.mean));
                let _ = writeln!(s, "{tag}.{name}.analytic_mean = {}", f2(st.analytic_mean));
                let _ = writeln!(s, "{tag}.{name}.var = {}", f2(st.var));
                let _ = writeln!(s, "{tag}.{name}.analytic_var = {}", f2(st.analytic_var));
            }
            let r = c.orthogonal_ratios();
            let _ = writeln!(s, "{tag}.orthogonal_ratio = {:.2}, {:.2}", r[0], r[1]);
        }
        s
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

/// Mean and variance of `y` under the mixture, conditioned on the signs of
/// the available coordinates. Tail leakage across the sign boundary is ignored.
pub fn analytic_conditional(spec: &SyntheticSpec, signs: [i8; 2], available: [bool; 2]) -> Result<([f64; 2], [f64; 2])> {
    let matches = |c: &[f64; 2]| (0..2).all(|d| !available[d] || (c[d] > 0.0) == (signs[d] > 0));
    let comps: Vec<&[f64; 2]> = spec.centers.iter().filter(|c| matches(c)).collect();
    if comps.is_empty() {
        return Err(Error::InvalidSpec(format!("no component has signs {signs:?}")));
    }
    let n = comps.len() as f64;
    let mean = [0, 1].map(|d| comps.iter().map(|c| c[d]).sum::<f64>() / n);
    let var = [0, 1].map(|d| spec.stddev.powi(2) + comps.iter().map(|c| (c[d] - mean[d]).powi(2)).sum::<f64>() / n);
    Ok((mean, var))
}

fn condition_stats<R: Rng + ?Sized>(
    model: &ModelBundle,
    spec: &SyntheticSpec,
    signs: [i8; 2],
    available: [bool; 2],
    batches: usize,
    m: usize,
    rng: &mut R,
) -> Result<ConditionStats> {
    let task = TaskSpec::synthetic();
    let views = signs.iter().map(|&s| vec![s as f32]).collect();
    let vs = ViewSet::new(SubsetMask::from_bools(available.to_vec()), views, &task.views)?;
    let mut samples = Vec::with_capacity(batches * m);
    for _ in 0..batches {
        samples.extend(sample_conditional(model, &vs, m, rng)?);
    }
    let n = samples.len() as f64;
    let mean = [0, 1].map(|d| samples.iter().map(|s| s[d] as f64).sum::<f64>() / n);
    let var = [0, 1].map(|d| samples.iter().map(|s| (s[d] as f64 - mean[d]).powi(2)).sum::<f64>() / n);
    let (analytic_mean, analytic_var) = analytic_conditional(spec, signs, available)?;
    Ok(ConditionStats {
        available,
        mean,
        var,
        analytic_mean,
        analytic_var,
    })
}

/// Conditional sample moments for every sign pattern with one and two views.
/// Each conditioning uses `n_eval` batches of `m` samples.
pub fn synthetic_report<R: Rng + ?Sized>(
    model: &ModelBundle,
    spec: &SyntheticSpec,
    n_eval: usize,
    m: usize,
    rng: &mut R,
) -> Result<SyntheticReport> {
    spec.validate()?;
    if n_eval * m < 2 {
        return Err(Error::TooFewSamples(n_eval * m));
    }
    if model.arch().views.len() != 2 || model.arch().output.size() != 2 {
        return Err(Error::shape("model was not built for the synthetic task"));
    }
    let mut conditions = Vec::new();
    for signs in [[1, 1], [1, -1], [-1, 1], [-1, -1]] {
        let both = condition_stats(model, spec, signs, [true, true], n_eval, m, rng)?;
        let v0 = condition_stats(model, spec, signs, [true, false], n_eval, m, rng)?;
        let v1 = condition_stats(model, spec, signs, [false, true], n_eval, m, rng)?;
        conditions.push(SignCondition {
            signs,
            both,
            single: [v0, v1],
        });
    }
    Ok(SyntheticReport {
        samples_per_condition: n_eval * m,
        conditions,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn variance_hand_cases() {
        let same = vec![vec![0.3f32, 0.7]; 5];
        assert_eq!(variance_metric(&same).unwrap(), 0.0);
        assert_eq!(variance_metric(&[vec![0.0; 4], vec![1.0; 4]]).unwrap(), 0.25);
        assert!(matches!(variance_metric(&[vec![1.0]]), Err(Error::TooFewSamples(1))));
    }

    #[test]
    fn analytic_synthetic_moments() {
        let spec = SyntheticSpec::default();
        let (m, v) = analytic_conditional(&spec, [1, -1], [true, true]).unwrap();
        assert_eq!(m, [1.0, -1.0]);
        assert!((v[0] - 0.01).abs() < 1e-12 && (v[1] - 0.01).abs() < 1e-12);
        let (m, v) = analytic_conditional(&spec, [-1, 1], [true, false]).unwrap();
        assert_eq!(m, [-1.0, 0.0]);
        assert!((v[0] - 0.01).abs() < 1e-12);
        assert!((v[1] - 1.01).abs() < 1e-12);
    }

    #[test]
    fn grid_layout_and_rounding() {
        let cell = vec![0.5f32; 28 * 28];
        let rows = vec![
            GridRow {
                input: cell.clone(),
                samples: vec![cell.clone(); 8]
            };
            3
        ];
        let bytes = encode_grid(&rows, 28, 28).unwrap();
        let (w, h, px) = parse_pgm(&bytes).unwrap();
        assert_eq!((w, h), (9 * 28, 3 * 28));
        assert!(px.iter().all(|&p| p == 128));
        assert_eq!(to_byte(0.0), 0);
        assert_eq!(to_byte(1.0), 255);
    }
}
