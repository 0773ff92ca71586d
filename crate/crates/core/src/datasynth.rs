//! Synthetic hypersphere datasets and the three corruption protocols:
//! conflict splitting, label flips and long-tail condensation.

use std::collections::BTreeMap;
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{domain, l2_normalize_columns, sample_without_replacement, Matrix, SeededRng, NORM_EPS};

pub const FORMAT_VERSION: u32 = 1;
const MAGIC: &[u8; 8] = b"PFCDSET\0";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthConfig {
    pub num_identities: usize,
    pub min_per_identity: usize,
    pub max_per_identity: usize,
    pub dim: usize,
    /// Bound on the angle (radians) between a point and its prototype.
    pub noise: f64,
    pub seed: u64,
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_identities < 2 {
            return Err(Error::Config("num_identities must be at least 2".into()));
        }
        if self.min_per_identity < 1 || self.max_per_identity < self.min_per_identity {
            return Err(Error::Config(format!(
                "samples per identity must satisfy 1 <= min <= max, got [{}, {}]",
                self.min_per_identity, self.max_per_identity
            )));
        }
        if self.dim < 2 {
            return Err(Error::Config("dim must be at least 2".into()));
        }
        if !(0.0..std::f64::consts::FRAC_PI_4).contains(&self.noise) {
            return Err(Error::Config(format!("noise must be in [0, π/4), got {}", self.noise)));
        }
        Ok(())
    }
}

/// Per-point corruption record.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorruptionRecord {
    pub flipped: bool,
    /// Observed label before any flip.
    pub clean_label: usize,
    /// Identity whose classes were split, when this point belongs to one.
    pub conflict_group: Option<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticDataset {
    /// `D × N`, one point per column.
    pub points: Matrix,
    pub observed_labels: Vec<usize>,
    pub true_identities: Vec<usize>,
    /// `D × I`, one unit prototype per identity.
    pub prototypes: Matrix,
    /// Identity behind each observed class, `len = C`.
    pub class_identity: Vec<usize>,
    pub corruption: Vec<CorruptionRecord>,
}

impl SyntheticDataset {
    pub fn dim(&self) -> usize {
        self.points.rows()
    }

    pub fn len(&self) -> usize {
        self.observed_labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.observed_labels.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.class_identity.len()
    }

    pub fn num_identities(&self) -> usize {
        self.prototypes.cols()
    }

    pub fn point(&self, i: usize) -> Vec<f64> {
        self.points.column(i)
    }

    pub fn class_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.num_classes()];
        for y in &self.observed_labels {
            sizes[*y] += 1;
        }
        sizes
    }

    /// Rebuilds (clean label, identity) per point from the corruption log alone.
    pub fn reconstruct_clean(&self) -> Vec<(usize, usize)> {
        self.corruption
            .iter()
            .zip(&self.observed_labels)
            .map(|(rec, observed)| {
                let clean = if rec.flipped { rec.clean_label } else { *observed };
                let identity = rec.conflict_group.unwrap_or(self.class_identity[clean]);
                (clean, identity)
            })
            .collect()
    }

    /// Keeps the listed points, in the given order.
    pub fn subset(&self, keep: &[usize]) -> SyntheticDataset {
        SyntheticDataset {
            points: self.points.select_columns(keep),
            observed_labels: keep.iter().map(|i| self.observed_labels[*i]).collect(),
            true_identities: keep.iter().map(|i| self.true_identities[*i]).collect(),
            prototypes: self.prototypes.clone(),
            class_identity: self.class_identity.clone(),
            corruption: keep.iter().map(|i| self.corruption[*i]).collect(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.points.cols();
        let consistent = self.observed_labels.len() == n
            && self.true_identities.len() == n
            && self.corruption.len() == n
            && self.prototypes.rows() == self.points.rows();
        if !consistent {
            return Err(Error::format("dataset", "field lengths disagree"));
        }
        let c = self.num_classes();
        if self.observed_labels.iter().any(|y| *y >= c)
            || self.corruption.iter().any(|r| r.clean_label >= c)
        {
            return Err(Error::format("dataset", "label out of range"));
        }
        let ids = self.num_identities();
        if self.true_identities.iter().chain(&self.class_identity).any(|i| *i >= ids) {
            return Err(Error::format("dataset", "identity out of range"));
        }
        Ok(())
    }
}

/// Uniform unit prototypes and points at a bounded angular offset from them.
///
/// Offsets are `|N(0, (noise/2)²)|` angles, redrawn until `≤ noise`, toward a
/// uniformly random direction orthogonal to the prototype.
pub fn generate(cfg: &SynthConfig) -> Result<SyntheticDataset> {
    cfg.validate()?;
    let d = cfg.dim;
    let mut protos = Vec::with_capacity(cfg.num_identities);
    for id in 0..cfg.num_identities {
        let mut rng = SeededRng::keyed(cfg.seed, domain::SYNTH, 0, id as u64);
        protos.push(unit_gaussian(&mut rng, d));
    }
    let prototypes = Matrix::from_columns(d, &protos)?;

    let mut columns = Vec::new();
    let mut labels = Vec::new();
    for (id, proto) in protos.iter().enumerate() {
        let mut rng = SeededRng::keyed(cfg.seed, domain::SYNTH, 1, id as u64);
        let count = rng.random_range(cfg.min_per_identity..=cfg.max_per_identity);
        for _ in 0..count {
            columns.push(perturb(&mut rng, proto, cfg.noise));
            labels.push(id);
        }
    }
    Ok(SyntheticDataset {
        points: Matrix::from_columns(d, &columns)?,
        corruption: labels
            .iter()
            .map(|y| CorruptionRecord {
                flipped: false,
                clean_label: *y,
                conflict_group: None,
            })
            .collect(),
        true_identities: labels.clone(),
        observed_labels: labels,
        prototypes,
        class_identity: (0..cfg.num_identities).collect(),
    })
}

fn unit_gaussian(rng: &mut SeededRng, d: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..d).map(|_| StandardNormal.sample(rng)).collect();
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-8 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}

fn perturb(rng: &mut SeededRng, proto: &[f64], noise: f64) -> Vec<f64> {
    if noise == 0.0 {
        return proto.to_vec();
    }
    let theta = loop {
        let t: f64 = StandardNormal.sample(rng);
        let t = (t * noise / 2.0).abs();
        if t <= noise {
            break t;
        }
    };
    let dir = loop {
        let g = unit_gaussian(rng, proto.len());
        let proj: f64 = g.iter().zip(proto).map(|(a, b)| a * b).sum();
        let o: Vec<f64> = g.iter().zip(proto).map(|(a, b)| a - proj * b).collect();
        let n = o.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-6 {
            break o.into_iter().map(|x| x / n).collect::<Vec<_>>();
        }
    };
    let (s, c) = theta.sin_cos();
    proto.iter().zip(&dir).map(|(p, u)| c * p + s * u).collect()
}

/// Splits `num_to_split` random classes into `extra_classes` pseudo classes.
///
/// Kept classes are renumbered `0..C−s` in their original order; pseudo
/// classes follow. Each split class receives `⌊e/s⌋` pseudo classes (the
/// first `e mod s` get one more), capped at its point count, and its points
/// are dealt round-robin over them.
pub fn conflict_split(
    ds: &SyntheticDataset,
    num_to_split: usize,
    extra_classes: usize,
    seed: u64,
) -> Result<SyntheticDataset> {
    let c = ds.num_classes();
    if num_to_split > c {
        return Err(Error::Config(format!("cannot split {num_to_split} of {c} classes")));
    }
    if extra_classes < num_to_split {
        return Err(Error::Config(format!(
            "extra_classes ({extra_classes}) must be at least num_to_split ({num_to_split})"
        )));
    }
    let mut rng = SeededRng::keyed(seed, domain::CORRUPT, 0, 0);
    let mut chosen = sample_without_replacement(&mut rng, 0..c, &[], num_to_split)?;
    chosen.sort_unstable();

    let sizes = ds.class_sizes();
    let mut new_id = vec![usize::MAX; c];
    let mut class_identity = Vec::new();
    for (class, slot) in new_id.iter_mut().enumerate() {
        if chosen.binary_search(&class).is_err() {
            *slot = class_identity.len();
            class_identity.push(ds.class_identity[class]);
        }
    }
    // pseudo class ids per split class
    let mut pseudo: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (idx, class) in chosen.iter().enumerate() {
        let wanted = extra_classes / num_to_split + usize::from(idx < extra_classes % num_to_split);
        let count = wanted.min(sizes[*class]).max(1);
        let ids = (0..count)
            .map(|_| {
                class_identity.push(ds.class_identity[*class]);
                class_identity.len() - 1
            })
            .collect();
        pseudo.insert(*class, ids);
    }

    let mut dealt: BTreeMap<usize, usize> = BTreeMap::new();
    let mut out = ds.clone();
    for i in 0..ds.len() {
        let old = ds.observed_labels[i];
        let label = match pseudo.get(&old) {
            Some(ids) => {
                let k = dealt.entry(old).or_insert(0);
                let y = ids[*k % ids.len()];
                *k += 1;
                out.corruption[i].conflict_group = Some(ds.class_identity[old]);
                y
            }
            None => new_id[old],
        };
        out.observed_labels[i] = label;
        out.corruption[i].clean_label = label;
    }
    out.class_identity = class_identity;
    Ok(out)
}

/// Gives exactly `⌊ratio·N⌋` uniformly chosen points a uniformly chosen wrong label.
pub fn flip_labels(ds: &SyntheticDataset, ratio: f64, seed: u64) -> Result<SyntheticDataset> {
    if !(0.0..1.0).contains(&ratio) {
        return Err(Error::Config(format!("flip ratio must be in [0, 1), got {ratio}")));
    }
    let c = ds.num_classes();
    if c < 2 {
        return Err(Error::Config("flipping labels needs at least two classes".into()));
    }
    let n = ds.len();
    let count = (ratio * n as f64).floor() as usize;
    let mut rng = SeededRng::keyed(seed, domain::CORRUPT, 1, 0);
    let mut chosen = sample_without_replacement(&mut rng, 0..n, &[], count)?;
    chosen.sort_unstable();
    let mut out = ds.clone();
    for i in chosen {
        let current = out.observed_labels[i];
        let draw = rng.random_range(0..c - 1);
        let wrong = if draw >= current { draw + 1 } else { draw };
        if !out.corruption[i].flipped {
            out.corruption[i].clean_label = current;
        }
        out.corruption[i].flipped = true;
        out.observed_labels[i] = wrong;
    }
    Ok(out)
}

/// Keeps `head_count` random classes intact and cuts every other class down
/// to a uniform random size in `[tail_min, tail_max]` (or all of its points if fewer).
pub fn longtail_condense(
    ds: &SyntheticDataset,
    head_count: usize,
    tail_min: usize,
    tail_max: usize,
    seed: u64,
) -> Result<SyntheticDataset> {
    if tail_min < 1 || tail_max < tail_min {
        return Err(Error::Config(format!(
            "tail sizes must satisfy 1 <= min <= max, got [{tail_min}, {tail_max}]"
        )));
    }
    let c = ds.num_classes();
    let mut rng = SeededRng::keyed(seed, domain::CORRUPT, 2, 0);
    let head = sample_without_replacement(&mut rng, 0..c, &[], head_count.min(c))?;
    let mut is_head = vec![false; c];
    for h in head {
        is_head[h] = true;
    }
    let mut members: Vec<Vec<usize>> = vec![Vec::new(); c];
    for (i, y) in ds.observed_labels.iter().enumerate() {
        members[*y].push(i);
    }
    let mut keep = Vec::with_capacity(ds.len());
    for (class, pts) in members.iter().enumerate() {
        if is_head[class] {
            keep.extend_from_slice(pts);
            continue;
        }
        let target = rng.random_range(tail_min..=tail_max).min(pts.len());
        keep.extend(
            sample_without_replacement(&mut rng, 0..pts.len(), &[], target)?
                .into_iter()
                .map(|j| pts[j]),
        );
    }
    keep.sort_unstable();
    Ok(ds.subset(&keep))
}

/// Human-readable statistics written next to every dataset file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetSummary {
    pub format_version: u32,
    pub dim: usize,
    pub points: usize,
    pub classes: usize,
    pub identities: usize,
    pub min_class_size: usize,
    pub max_class_size: usize,
    pub mean_class_size: f64,
    /// class size → number of classes of that size
    pub class_size_histogram: BTreeMap<usize, usize>,
    pub flipped: usize,
    pub flipped_fraction: f64,
    pub conflicted_points: usize,
    pub conflict_groups: usize,
}

pub fn summarize(ds: &SyntheticDataset) -> DatasetSummary {
    let sizes = ds.class_sizes();
    let mut histogram = BTreeMap::new();
    for s in &sizes {
        *histogram.entry(*s).or_insert(0) += 1;
    }
    let flipped = ds.corruption.iter().filter(|r| r.flipped).count();
    let groups: std::collections::BTreeSet<usize> =
        ds.corruption.iter().filter_map(|r| r.conflict_group).collect();
    DatasetSummary {
        format_version: FORMAT_VERSION,
        dim: ds.dim(),
        points: ds.len(),
        classes: ds.num_classes(),
        identities: ds.num_identities(),
        min_class_size: sizes.iter().copied().min().unwrap_or(0),
        max_class_size: sizes.iter().copied().max().unwrap_or(0),
        mean_class_size: ds.len() as f64 / ds.num_classes().max(1) as f64,
        class_size_histogram: histogram,
        flipped,
        flipped_fraction: flipped as f64 / ds.len().max(1) as f64,
        conflicted_points: ds.corruption.iter().filter(|r| r.conflict_group.is_some()).count(),
        conflict_groups: groups.len(),
    }
}

/// Little-endian container:
///
/// ```text
/// magic "PFCDSET\0" | version u32 | D u64 | N u64 | C u64 | I u64
/// prototypes   I × D f64 (one prototype at a time)
/// points       N × D f64 (one point at a time)
/// observed     N × u64
/// identities   N × u64
/// class→id     C × u64
/// corruption   N × (flipped u8, clean_label u64, conflict_group i64, -1 = none)
/// ```
pub fn to_bytes(ds: &SyntheticDataset) -> Vec<u8> {
    let (d, n, c, ids) = (ds.dim(), ds.len(), ds.num_classes(), ds.num_identities());
    let mut out = Vec::with_capacity(44 + 8 * (d * (n + ids) + 3 * n + c) + n * 17);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    for v in [d, n, c, ids] {
        out.extend_from_slice(&(v as u64).to_le_bytes());
    }
    for m in [&ds.prototypes, &ds.points] {
        for col in 0..m.cols() {
            for r in 0..d {
                out.extend_from_slice(&m[(r, col)].to_le_bytes());
            }
        }
    }
    for v in ds.observed_labels.iter().chain(&ds.true_identities).chain(&ds.class_identity) {
        out.extend_from_slice(&(*v as u64).to_le_bytes());
    }
    for r in &ds.corruption {
        out.push(u8::from(r.flipped));
        out.extend_from_slice(&(r.clean_label as u64).to_le_bytes());
        let group = r.conflict_group.map_or(-1i64, |g| g as i64);
        out.extend_from_slice(&group.to_le_bytes());
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|e| *e <= self.buf.len()).ok_or_else(|| {
            Error::format("dataset file", format!("truncated at byte {}", self.pos))
        })?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn usize(&mut self) -> Result<usize> {
        usize::try_from(self.u64()?).map_err(|_| Error::format("dataset file", "count overflows usize"))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

pub fn from_bytes(buf: &[u8]) -> Result<SyntheticDataset> {
    let mut r = Reader { buf, pos: 0 };
    if r.take(8)? != MAGIC {
        return Err(Error::format("dataset file", "bad magic"));
    }
    let version = u32::from_le_bytes(r.take(4)?.try_into().unwrap());
    if version != FORMAT_VERSION {
        return Err(Error::format(
            "dataset file",
            format!("version {version}, expected {FORMAT_VERSION}"),
        ));
    }
    let (d, n, c, ids) = (r.usize()?, r.usize()?, r.usize()?, r.usize()?);
    let mut matrix = |cols: usize| -> Result<Matrix> {
        let mut m = Matrix::zeros(d, cols);
        for col in 0..cols {
            for row in 0..d {
                m[(row, col)] = r.f64()?;
            }
        }
        Ok(m)
    };
    let prototypes = matrix(ids)?;
    let points = matrix(n)?;
    let mut list = |len: usize| (0..len).map(|_| r.usize()).collect::<Result<Vec<_>>>();
    let observed_labels = list(n)?;
    let true_identities = list(n)?;
    let class_identity = list(c)?;
    let corruption = (0..n)
        .map(|_| {
            let flipped = r.take(1)?[0] != 0;
            let clean_label = r.usize()?;
            let group = r.u64()? as i64;
            Ok(CorruptionRecord {
                flipped,
                clean_label,
                conflict_group: (group >= 0).then_some(group as usize),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    if r.pos != buf.len() {
        return Err(Error::format("dataset file", "trailing bytes"));
    }
    let ds = SyntheticDataset {
        points,
        observed_labels,
        true_identities,
        prototypes,
        class_identity,
        corruption,
    };
    ds.validate()?;
    Ok(ds)
}

pub fn write_dataset(ds: &SyntheticDataset, path: &Path) -> Result<()> {
    std::fs::write(path, to_bytes(ds)).map_err(|e| Error::io(path, e))
}

pub fn read_dataset(path: &Path) -> Result<SyntheticDataset> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    from_bytes(&bytes)
}

/// Fraction of points whose nearest prototype (by cosine) is their own identity's.
pub fn nearest_prototype_accuracy(ds: &SyntheticDataset) -> f64 {
    let protos = l2_normalize_columns(&ds.prototypes, NORM_EPS);
    let pts = l2_normalize_columns(&ds.points, NORM_EPS);
    let mut hits = 0;
    for i in 0..ds.len() {
        let mut best = (f64::NEG_INFINITY, usize::MAX);
        for p in 0..protos.cols() {
            let dot: f64 = (0..ds.dim()).map(|r| pts[(r, i)] * protos[(r, p)]).sum();
            if dot > best.0 {
                best = (dot, p);
            }
        }
        hits += usize::from(best.1 == ds.true_identities[i]);
    }
    hits as f64 / ds.len().max(1) as f64
}
