//! Dataset ingestion, the view regimes built from MNIST, incremental view
//! sequences, batching and the synthetic mixture task.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::view::{Example, SubsetMask, ViewSequence, ViewSet, ViewShape, ViewSpec};

pub const SIDE: usize = 28;
pub const PIXELS: usize = SIDE * SIDE;
pub const QUARTER: usize = PIXELS / 4;
/// Value of unrevealed pixels.
pub const MISSING: f32 = 0.5;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TaskKind {
    Quarters,
    Stream,
    Hetero,
    Synthetic,
}

impl fmt::Display for TaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TaskKind::Quarters => "quarters",
            TaskKind::Stream => "stream",
            TaskKind::Hetero => "hetero",
            TaskKind::Synthetic => "synthetic",
        })
    }
}

impl FromStr for TaskKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "quarters" => Ok(TaskKind::Quarters),
            "stream" => Ok(TaskKind::Stream),
            "hetero" => Ok(TaskKind::Hetero),
            "synthetic" => Ok(TaskKind::Synthetic),
            other => Err(Error::InvalidSpec(format!("unknown task {other:?}"))),
        }
    }
}

/// Rectangle geometry of the stream task.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct StreamGeometry {
    /// Rectangles added per step.
    pub rects_per_step: usize,
    pub min_side: usize,
    pub max_side: usize,
}

impl Default for StreamGeometry {
    fn default() -> Self {
        Self {
            rects_per_step: 1,
            min_side: 6,
            max_side: 12,
        }
    }
}

/// Layout of a task: its views, output and training sequence length.
#[derive(Clone, Debug, PartialEq)]
pub struct TaskSpec {
    pub kind: TaskKind,
    pub views: Vec<ViewSpec>,
    pub output: ViewSpec,
    pub seq_len: usize,
    pub stream: StreamGeometry,
}

impl TaskSpec {
    pub fn quarters() -> Self {
        Self {
            kind: TaskKind::Quarters,
            views: vec![ViewSpec::pixels(QUARTER); 4],
            output: ViewSpec::pixels(PIXELS),
            seq_len: 4,
            stream: StreamGeometry::default(),
        }
    }

    /// `steps` cumulative reveals of the full image.
    pub fn stream(steps: usize) -> Self {
        Self {
            kind: TaskKind::Stream,
            views: vec![ViewSpec::pixels(PIXELS); steps],
            output: ViewSpec::pixels(PIXELS),
            seq_len: steps,
            stream: StreamGeometry::default(),
        }
    }

    pub fn hetero() -> Self {
        Self {
            kind: TaskKind::Hetero,
            views: vec![ViewSpec::pixels(10), ViewSpec::pixels(PIXELS)],
            output: ViewSpec::pixels(PIXELS),
            seq_len: 2,
            stream: StreamGeometry::default(),
        }
    }

    pub fn synthetic() -> Self {
        Self {
            kind: TaskKind::Synthetic,
            views: vec![ViewSpec::flat(1); 2],
            output: ViewSpec::flat(2),
            seq_len: 2,
            stream: StreamGeometry::default(),
        }
    }

    pub fn for_kind(kind: TaskKind) -> Self {
        match kind {
            TaskKind::Quarters => Self::quarters(),
            TaskKind::Stream => Self::stream(4),
            TaskKind::Hetero => Self::hetero(),
            TaskKind::Synthetic => Self::synthetic(),
        }
    }

    pub fn num_views(&self) -> usize {
        self.views.len()
    }

    pub fn view_shapes(&self) -> Vec<ViewShape> {
        self.views.iter().map(|v| v.shape).collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.views.is_empty() {
            return Err(Error::InvalidSpec("task declares no views".into()));
        }
        if self.seq_len == 0 || self.seq_len > self.views.len() {
            return Err(Error::InvalidLength {
                len: self.seq_len,
                available: self.views.len(),
            });
        }
        let g = self.stream;
        if g.min_side == 0 || g.min_side > g.max_side || g.max_side > SIDE {
            return Err(Error::InvalidSpec(format!(
                "stream rectangle sides {}..={} do not fit a {SIDE}x{SIDE} image",
                g.min_side, g.max_side
            )));
        }
        Ok(())
    }

    /// A training sequence: the reveal order for streams, a random
    /// incremental permutation otherwise.
    pub fn sample_sequence<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<ViewSequence> {
        match self.kind {
            TaskKind::Stream => reveal_sequence(self.views.len(), self.seq_len),
            _ => sample_view_sequence(self.views.len(), self.seq_len, rng),
        }
    }
}

/// Decoded IDX array of unsigned bytes.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct IdxBytes {
    pub dims: Vec<usize>,
    pub data: Vec<u8>,
}

/// IDX array scaled to `[0,1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct IdxArray {
    pub dims: Vec<usize>,
    pub data: Vec<f32>,
}

impl IdxArray {
    /// Row `i` of the leading dimension.
    pub fn item(&self, i: usize) -> &[f32] {
        let stride: usize = self.dims[1..].iter().product();
        &self.data[i * stride..(i + 1) * stride]
    }

    pub fn len(&self) -> usize {
        self.dims.first().copied().unwrap_or(0)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Decodes an in-memory IDX blob of unsigned bytes.
pub fn decode_idx(bytes: &[u8], what: &str) -> Result<IdxBytes> {
    let header: [u8; 4] = bytes
        .get(..4)
        .and_then(|b| b.try_into().ok())
        .ok_or_else(|| Error::TruncatedFile(format!("{what}: missing magic")))?;
    let magic = u32::from_be_bytes(header);
    let ndim = header[3] as usize;
    if header[0] != 0 || header[1] != 0 || header[2] != 0x08 || ndim == 0 {
        return Err(Error::BadMagic(magic));
    }
    let mut dims = Vec::with_capacity(ndim);
    for d in 0..ndim {
        let at = 4 + 4 * d;
        let raw: [u8; 4] = bytes
            .get(at..at + 4)
            .and_then(|b| b.try_into().ok())
            .ok_or_else(|| Error::TruncatedFile(format!("{what}: header ends at dimension {d}")))?;
        dims.push(u32::from_be_bytes(raw) as usize);
    }
    let start = 4 + 4 * ndim;
    let count: usize = dims.iter().product();
    let body = &bytes[start..];
    if body.len() < count {
        return Err(Error::TruncatedFile(format!(
            "{what}: {} data bytes, header promises {count}",
            body.len()
        )));
    }
    Ok(IdxBytes {
        dims,
        data: body[..count].to_vec(),
    })
}

/// Encodes unsigned bytes as an IDX blob.
pub fn encode_idx(dims: &[usize], data: &[u8]) -> Vec<u8> {
    let mut out = vec![0, 0, 0x08, dims.len() as u8];
    for &d in dims {
        out.extend_from_slice(&(d as u32).to_be_bytes());
    }
    out.extend_from_slice(data);
    out
}

pub fn parse_idx_bytes(path: &Path) -> Result<IdxBytes> {
    let bytes = std::fs::read(path)?;
    decode_idx(&bytes, &path.display().to_string())
}

/// Reads an IDX file, mapping each byte `b` to `b / 255`.
pub fn parse_idx(path: &Path) -> Result<IdxArray> {
    let raw = parse_idx_bytes(path)?;
    Ok(IdxArray {
        dims: raw.dims,
        data: raw.data.iter().map(|&b| b as f32 / 255.0).collect(),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

/// MNIST images and labels of one split.
#[derive(Clone, Debug)]
pub struct Mnist {
    pub images: IdxArray,
    pub labels: Vec<u8>,
}

/// Loads `{train,t10k}-{images-idx3,labels-idx1}-ubyte` from `dir`.
pub fn load_mnist(dir: &Path, split: Split) -> Result<Mnist> {
    let stem = match split {
        Split::Train => "train",
        Split::Test => "t10k",
    };
    let images = parse_idx(&dir.join(format!("{stem}-images-idx3-ubyte")))?;
    let labels = parse_idx_bytes(&dir.join(format!("{stem}-labels-idx1-ubyte")))?;
    if images.dims[1..] != [SIDE, SIDE] {
        return Err(Error::shape(format!("MNIST images have dims {:?}", images.dims)));
    }
    if labels.dims != [images.len()] {
        return Err(Error::shape(format!(
            "{} labels for {} images",
            labels.dims.iter().product::<usize>(),
            images.len()
        )));
    }
    Ok(Mnist {
        images,
        labels: labels.data,
    })
}

fn check_image(image: &[f32]) -> Result<()> {
    if image.len() != PIXELS {
        return Err(Error::shape(format!(
            "image has {} values, expected {SIDE}x{SIDE}",
            image.len()
        )));
    }
    Ok(())
}

/// Quarters in the order top-left, top-right, bottom-left, bottom-right.
pub fn make_quarter_views(image: &[f32]) -> Result<ViewSet> {
    check_image(image)?;
    let h = SIDE / 2;
    let views = (0..4)
        .map(|q| {
            let (r0, c0) = ((q / 2) * h, (q % 2) * h);
            (r0..r0 + h)
                .flat_map(|r| image[r * SIDE + c0..r * SIDE + c0 + h].iter().copied())
                .collect()
        })
        .collect();
    ViewSet::new(SubsetMask::full(4), views, &TaskSpec::quarters().views)
}

/// Inverse of [`make_quarter_views`].
pub fn assemble_quarters(views: &[Vec<f32>]) -> Result<Vec<f32>> {
    if views.len() != 4 || views.iter().any(|v| v.len() != QUARTER) {
        return Err(Error::shape("expected four 14x14 quarters"));
    }
    let h = SIDE / 2;
    let mut image = vec![0.0; PIXELS];
    for (q, v) in views.iter().enumerate() {
        let (r0, c0) = ((q / 2) * h, (q % 2) * h);
        for r in 0..h {
            image[(r0 + r) * SIDE + c0..(r0 + r) * SIDE + c0 + h].copy_from_slice(&v[r * h..(r + 1) * h]);
        }
    }
    Ok(image)
}

/// Cumulative revealed-pixel sets for `steps` steps.
pub fn reveal_masks<R: Rng + ?Sized>(steps: usize, geom: StreamGeometry, rng: &mut R) -> Vec<Vec<bool>> {
    let mut revealed = vec![false; PIXELS];
    let mut out = Vec::with_capacity(steps);
    for _ in 0..steps {
        for _ in 0..geom.rects_per_step {
            let h = rng.random_range(geom.min_side..=geom.max_side);
            let w = rng.random_range(geom.min_side..=geom.max_side);
            let r0 = rng.random_range(0..=SIDE - h);
            let c0 = rng.random_range(0..=SIDE - w);
            for r in r0..r0 + h {
                revealed[r * SIDE + c0..r * SIDE + c0 + w].fill(true);
            }
        }
        out.push(revealed.clone());
    }
    out
}

/// View `t` shows the image on the union of the first `t + 1` reveals and
/// [`MISSING`] elsewhere.
pub fn make_stream_views<R: Rng + ?Sized>(
    image: &[f32],
    steps: usize,
    geom: StreamGeometry,
    rng: &mut R,
) -> Result<Vec<Vec<f32>>> {
    check_image(image)?;
    if steps == 0 {
        return Err(Error::InvalidLength { len: 0, available: 0 });
    }
    Ok(reveal_masks(steps, geom, rng)
        .into_iter()
        .map(|m| {
            image
                .iter()
                .zip(m)
                .map(|(&p, on)| if on { p } else { MISSING })
                .collect()
        })
        .collect())
}

/// One-hot label plus the image with a random half hidden.
pub fn make_hetero_views<R: Rng + ?Sized>(image: &[f32], label: u8, rng: &mut R) -> Result<ViewSet> {
    check_image(image)?;
    if label > 9 {
        return Err(Error::shape(format!("label {label} is not a digit")));
    }
    let mut onehot = vec![0.0; 10];
    onehot[label as usize] = 1.0;
    let half = rng.random_range(0..4);
    let h = SIDE / 2;
    let partial = image
        .iter()
        .enumerate()
        .map(|(i, &p)| {
            let (r, c) = (i / SIDE, i % SIDE);
            let hidden = match half {
                0 => c < h,
                1 => c >= h,
                2 => r < h,
                _ => r >= h,
            };
            if hidden {
                MISSING
            } else {
                p
            }
        })
        .collect();
    ViewSet::new(SubsetMask::full(2), vec![onehot, partial], &TaskSpec::hetero().views)
}

/// Random permutation of the views, prefix-accumulated into `L` nested masks.
pub fn sample_view_sequence<R: Rng + ?Sized>(views: usize, len: usize, rng: &mut R) -> Result<ViewSequence> {
    if len == 0 || len > views {
        return Err(Error::InvalidLength { len, available: views });
    }
    let mut order: Vec<usize> = (0..views).collect();
    order.shuffle(rng);
    let mut mask = SubsetMask::empty(views);
    let masks = order[..len]
        .iter()
        .map(|&k| {
            mask.set(k, true);
            mask.clone()
        })
        .collect();
    ViewSequence::new(masks)
}

/// Masks `{0}, {0,1}, …` in reveal order.
pub fn reveal_sequence(views: usize, len: usize) -> Result<ViewSequence> {
    if len == 0 || len > views {
        return Err(Error::InvalidLength { len, available: views });
    }
    ViewSequence::new(
        (1..=len)
            .map(|t| SubsetMask::from_bools((0..views).map(|k| k < t).collect()))
            .collect(),
    )
}

/// Deterministic per-epoch RNG stream derived from a run seed.
pub fn epoch_rng(seed: u64, epoch: u64, purpose: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ purpose.wrapping_mul(0x9e37_79b9_7f4a_7c15));
    rng.set_stream(epoch);
    rng
}

/// Shuffled index batches for one epoch; the last batch may be short.
pub fn make_batches(len: usize, batch_size: usize, seed: u64, epoch: u64) -> Result<Vec<Vec<usize>>> {
    if len == 0 {
        return Err(Error::EmptyDataset);
    }
    if batch_size == 0 {
        return Err(Error::config("batch size must be at least 1"));
    }
    let mut order: Vec<usize> = (0..len).collect();
    order.shuffle(&mut epoch_rng(seed, epoch, 1));
    Ok(order.chunks(batch_size).map(<[usize]>::to_vec).collect())
}

/// Gaussian mixture over `ℝ²` with sign views.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSpec {
    pub centers: Vec<[f64; 2]>,
    pub stddev: f64,
    /// Standard deviation of additive noise on the ±1 views.
    pub view_noise: f64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            centers: vec![[1.0, 1.0], [1.0, -1.0], [-1.0, 1.0], [-1.0, -1.0]],
            stddev: 0.1,
            view_noise: 0.0,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.centers.is_empty() {
            return Err(Error::InvalidSpec("mixture has no components".into()));
        }
        for (i, a) in self.centers.iter().enumerate() {
            if a.iter().any(|x| !x.is_finite()) {
                return Err(Error::InvalidSpec(format!("center {i} is not finite")));
            }
            if self.centers[..i].contains(a) {
                return Err(Error::InvalidSpec(format!("center {a:?} appears twice")));
            }
        }
        if !(self.stddev > 0.0 && self.stddev.is_finite()) {
            return Err(Error::InvalidSpec(format!("stddev must be positive, got {}", self.stddev)));
        }
        if !(self.view_noise >= 0.0 && self.view_noise.is_finite()) {
            return Err(Error::InvalidSpec(format!("view noise must be non-negative, got {}", self.view_noise)));
        }
        Ok(())
    }
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else {
        -1.0
    }
}

/// Draws `count` examples; view `k` is the sign of `y_k`.
pub fn sample_synthetic<R: Rng + ?Sized>(spec: &SyntheticSpec, count: usize, rng: &mut R) -> Result<Vec<Example>> {
    spec.validate()?;
    let task = TaskSpec::synthetic();
    let comp = Normal::new(0.0, spec.stddev).map_err(|e| Error::InvalidSpec(e.to_string()))?;
    let noise = Normal::new(0.0, spec.view_noise).map_err(|e| Error::InvalidSpec(e.to_string()))?;
    (0..count)
        .map(|_| {
            let c = spec.centers[rng.random_range(0..spec.centers.len())];
            let y = [c[0] + comp.sample(rng), c[1] + comp.sample(rng)];
            let views = y
                .iter()
                .map(|&v| vec![(sign(v) + noise.sample(rng)) as f32])
                .collect();
            let vs = ViewSet::new(SubsetMask::full(2), views, &task.views)?;
            Example::new(y.iter().map(|&v| v as f32).collect(), vs, &task.output)
        })
        .collect()
}

/// Examples of a task, in a fixed order.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub task: TaskSpec,
    pub examples: Vec<Example>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }
}

/// Builds a task from the first `count` MNIST items of `mnist`.
///
/// Stream reveals and hetero halves are drawn once per item from `seed`.
pub fn build_mnist_dataset(task: &TaskSpec, mnist: &Mnist, count: usize, seed: u64) -> Result<Dataset> {
    task.validate()?;
    let n = count.min(mnist.images.len());
    if n == 0 {
        return Err(Error::EmptyDataset);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let examples = (0..n)
        .map(|i| {
            let image = mnist.images.item(i);
            let label = mnist.labels[i];
            let vs = match task.kind {
                TaskKind::Quarters => make_quarter_views(image)?,
                TaskKind::Stream => ViewSet::new(
                    SubsetMask::full(task.num_views()),
                    make_stream_views(image, task.num_views(), task.stream, &mut rng)?,
                    &task.views,
                )?,
                TaskKind::Hetero => make_hetero_views(image, label, &mut rng)?,
                TaskKind::Synthetic => {
                    return Err(Error::InvalidSpec("the synthetic task is not built from MNIST".into()))
                }
            };
            Ok(Example::new(image.to_vec(), vs, &task.output)?.with_label(label))
        })
        .collect::<Result<_>>()?;
    Ok(Dataset {
        task: task.clone(),
        examples,
    })
}

/// Synthetic dataset of `count` draws.
pub fn build_synthetic_dataset(spec: &SyntheticSpec, count: usize, seed: u64) -> Result<Dataset> {
    if count == 0 {
        return Err(Error::EmptyDataset);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(Dataset {
        task: TaskSpec::synthetic(),
        examples: sample_synthetic(spec, count, &mut rng)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp() -> Vec<f32> {
        (0..PIXELS).map(|i| i as f32 / PIXELS as f32).collect()
    }

    #[test]
    fn idx_roundtrip_and_errors() {
        let data: Vec<u8> = (0..8).map(|i| i * 30).collect();
        let blob = encode_idx(&[2, 2, 2], &data);
        let back = decode_idx(&blob, "blob").unwrap();
        assert_eq!(back.dims, vec![2, 2, 2]);
        assert_eq!(back.data, data);
        assert!(matches!(decode_idx(&blob[..blob.len() - 1], "t"), Err(Error::TruncatedFile(_))));
        assert!(matches!(decode_idx(&blob[..6], "t"), Err(Error::TruncatedFile(_))));
        let mut bad = blob.clone();
        bad[2] = 0x0d;
        assert!(matches!(decode_idx(&bad, "t"), Err(Error::BadMagic(0x0d03))));
    }

    #[test]
    fn quarters_partition_the_image() {
        let img = ramp();
        let vs = make_quarter_views(&img).unwrap();
        assert_eq!(vs.num_views(), 4);
        assert_eq!(vs.mask(), &SubsetMask::full(4));
        assert_eq!(assemble_quarters(vs.views()).unwrap(), img);
        let mut dot = vec![0.0; PIXELS];
        dot[0] = 1.0;
        let vs = make_quarter_views(&dot).unwrap();
        assert_eq!(vs.view(0)[0], 1.0);
        assert_eq!(vs.views().iter().flatten().filter(|&&x| x != 0.0).count(), 1);
        // Row 0, column 14 is the first pixel of the top-right quarter.
        let mut dot = vec![0.0; PIXELS];
        dot[14] = 1.0;
        assert_eq!(make_quarter_views(&dot).unwrap().view(1)[0], 1.0);
        assert!(make_quarter_views(&[0.0; 10]).is_err());
    }

    #[test]
    fn stream_reveals_are_cumulative() {
        let img = ramp();
        for seed in 0..20 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let views = make_stream_views(&img, 5, StreamGeometry::default(), &mut rng).unwrap();
            for t in 1..views.len() {
                for i in 0..PIXELS {
                    if views[t - 1][i] != MISSING {
                        assert_eq!(views[t][i], img[i]);
                    }
                }
            }
            // Pixels never revealed stay at the fill value.
            let last = &views[4];
            for v in &views {
                for i in 0..PIXELS {
                    if last[i] == MISSING && img[i] != MISSING {
                        assert_eq!(v[i], MISSING);
                    }
                }
            }
        }
        let none = StreamGeometry {
            rects_per_step: 0,
            ..StreamGeometry::default()
        };
        let views = make_stream_views(&img, 1, none, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert!(views[0].iter().all(|&x| x == MISSING));
    }

    #[test]
    fn hetero_views() {
        let img = vec![0.0; PIXELS];
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..8 {
            let vs = make_hetero_views(&img, 3, &mut rng).unwrap();
            let mut e3 = vec![0.0; 10];
            e3[3] = 1.0;
            assert_eq!(vs.view(0), &e3[..]);
            assert_eq!(vs.view(1).iter().filter(|&&x| x == MISSING).count(), PIXELS / 2);
            let attr_only = vs.restrict(&SubsetMask::from_bits(&[1, 0], 2).unwrap()).unwrap();
            assert!(attr_only.view(1).iter().all(|&x| x == 0.0));
        }
        assert!(make_hetero_views(&img, 10, &mut rng).is_err());
    }

    #[test]
    fn sequences() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let seq = sample_view_sequence(4, 4, &mut rng).unwrap();
        let counts: Vec<usize> = seq.masks().iter().map(SubsetMask::count).collect();
        assert_eq!(counts, vec![1, 2, 3, 4]);
        assert_eq!(sample_view_sequence(4, 1, &mut rng).unwrap().masks()[0].count(), 1);
        assert!(matches!(sample_view_sequence(4, 5, &mut rng), Err(Error::InvalidLength { .. })));
        assert!(matches!(sample_view_sequence(4, 0, &mut rng), Err(Error::InvalidLength { .. })));
        let r = reveal_sequence(3, 3).unwrap();
        assert_eq!(r.masks()[0].to_bits(), vec![1, 0, 0]);
        assert_eq!(r.masks()[2].to_bits(), vec![1, 1, 1]);
    }

    #[test]
    fn first_view_is_uniform() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let mut first = [0usize; 4];
        for _ in 0..10_000 {
            let seq = sample_view_sequence(4, 4, &mut rng).unwrap();
            let k = seq.masks()[0].bools().iter().position(|&b| b).unwrap();
            first[k] += 1;
        }
        for c in first {
            assert!((c as f64 - 2500.0).abs() <= 125.0, "{first:?}");
        }
    }

    #[test]
    fn batching() {
        let b = make_batches(10, 3, 7, 0).unwrap();
        assert_eq!(b.iter().map(Vec::len).collect::<Vec<_>>(), vec![3, 3, 3, 1]);
        let mut all: Vec<usize> = b.concat();
        all.sort();
        assert_eq!(all, (0..10).collect::<Vec<_>>());
        assert_eq!(b, make_batches(10, 3, 7, 0).unwrap());
        let big = make_batches(1000, 1000, 7, 0).unwrap();
        assert_ne!(big, make_batches(1000, 1000, 7, 1).unwrap());
        assert_ne!(big, make_batches(1000, 1000, 8, 0).unwrap());
        assert!(matches!(make_batches(0, 3, 0, 0), Err(Error::EmptyDataset)));
    }

    #[test]
    fn synthetic_moments() {
        let spec = SyntheticSpec::default();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let data = sample_synthetic(&spec, 100_000, &mut rng).unwrap();
        let mut sums = [[0.0f64; 2]; 4];
        let mut counts = [0usize; 4];
        let mut all = [0.0f64; 2];
        let mut sq = [0.0f64; 2];
        for ex in &data {
            let y = [ex.target[0] as f64, ex.target[1] as f64];
            assert_eq!(ex.viewset.view(0)[0] > 0.0, y[0] > 0.0);
            assert_eq!(ex.viewset.view(1)[0] > 0.0, y[1] > 0.0);
            let c = (y[0] < 0.0) as usize * 2 + (y[1] < 0.0) as usize;
            counts[c] += 1;
            for d in 0..2 {
                sums[c][d] += y[d];
                all[d] += y[d];
                sq[d] += y[d] * y[d];
            }
        }
        for (c, center) in spec.centers.iter().enumerate() {
            for d in 0..2 {
                assert!((sums[c][d] / counts[c] as f64 - center[d]).abs() < 0.02);
            }
        }
        let n = data.len() as f64;
        for d in 0..2 {
            let var = sq[d] / n - (all[d] / n).powi(2);
            assert!((var - 1.01).abs() < 0.02, "variance {var}");
        }
        let bad = SyntheticSpec {
            stddev: 0.0,
            ..SyntheticSpec::default()
        };
        assert!(matches!(sample_synthetic(&bad, 1, &mut rng), Err(Error::InvalidSpec(_))));
    }
}
