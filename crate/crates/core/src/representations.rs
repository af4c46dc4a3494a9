//! Semantic-visual target construction and the distance measures over it.
//!
//! Raw semantic (100-dim) and visual (512-dim) vectors have outliers replaced
//! by the column median, the visual block is reduced to 150 principal
//! components, both blocks are binarized and then concatenated into a 250-bit
//! target per item.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use nalgebra::DMatrix;
use ndarray::{Array1, Array2, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::phonology::Lexicon;

pub const SEM_DIM: usize = 100;
pub const VIS_RAW_DIM: usize = 512;
pub const VIS_DIM: usize = 150;
pub const REP_DIM: usize = SEM_DIM + VIS_DIM;

const OUTLIER_Z: f64 = 2.0;
/// Probability that a structured synthetic target moves one of its prototype bits.
const STRUCTURE_NOISE: f64 = 0.35;
/// Share of items placed in visual look-alike pairs.
const LOOKALIKE_FRACTION: f64 = 0.4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RepKind {
    Semantic,
    Visual,
    Aggregated,
}

/// Item-aligned real matrix, one row per item.
#[derive(Debug, Clone, PartialEq)]
pub struct RepMatrix {
    pub rows: Array2<f64>,
    pub kind: RepKind,
    pub item_ids: Vec<usize>,
}

impl RepMatrix {
    pub fn new(rows: Array2<f64>, kind: RepKind, item_ids: Vec<usize>) -> Result<Self> {
        if rows.nrows() != item_ids.len() {
            return Err(Error::dim("item ids", rows.nrows(), item_ids.len()));
        }
        if rows.iter().any(|v| !v.is_finite()) {
            return Err(Error::Parameter("representation matrix has non-finite values".into()));
        }
        Ok(Self { rows, kind, item_ids })
    }

    fn with_rows(&self, rows: Array2<f64>) -> Self {
        Self {
            rows,
            kind: self.kind,
            item_ids: self.item_ids.clone(),
        }
    }
}

fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Replaces entries with |z| > 2 by their column median.
///
/// z uses the column mean and population standard deviation; the median is
/// taken over the original column. Zero-variance columns are left untouched.
pub fn replace_outliers(m: &RepMatrix) -> Result<RepMatrix> {
    let n = m.rows.nrows();
    if n < 2 {
        return Err(Error::Parameter(format!("outlier replacement needs at least 2 rows, got {n}")));
    }
    let mut out = m.rows.clone();
    for (col, mut dst) in m.rows.axis_iter(Axis(1)).zip(out.axis_iter_mut(Axis(1))) {
        let values = col.to_vec();
        let mean = values.iter().sum::<f64>() / n as f64;
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;
        let sd = var.sqrt();
        if sd == 0.0 {
            continue;
        }
        let med = median(&values);
        for (d, &v) in dst.iter_mut().zip(&values) {
            if ((v - mean) / sd).abs() > OUTLIER_Z {
                *d = med;
            }
        }
    }
    Ok(m.with_rows(out))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PcaModel {
    pub mean: Array1<f64>,
    /// k×D, orthonormal rows.
    pub components: Array2<f64>,
    pub variance_ratios: Vec<f64>,
}

impl PcaModel {
    pub fn k(&self) -> usize {
        self.components.nrows()
    }

    pub fn cumulative_variance(&self) -> f64 {
        self.variance_ratios.iter().sum()
    }

    pub fn reconstruct(&self, scores: &Array2<f64>) -> Array2<f64> {
        scores.dot(&self.components) + &self.mean
    }
}

/// Top-k principal directions of the column-centered data via SVD.
pub fn pca_fit(m: &RepMatrix, k: usize) -> Result<PcaModel> {
    let (n, d) = m.rows.dim();
    if n < 2 {
        return Err(Error::Parameter(format!("PCA needs at least 2 rows, got {n}")));
    }
    if k == 0 || k > n.min(d) {
        return Err(Error::Parameter(format!("k = {k} outside 1..={}", n.min(d))));
    }
    let mean = m.rows.mean_axis(Axis(0)).expect("non-empty");
    let centered = &m.rows - &mean;
    let total: f64 = centered.iter().map(|v| v * v).sum();

    let mat = DMatrix::from_fn(n, d, |i, j| centered[[i, j]]);
    let svd = mat.svd(false, true);
    let v_t = svd.v_t.expect("requested V^T");
    let sv = svd.singular_values;

    // stable sort keeps input order among equal singular values
    let mut order: Vec<usize> = (0..sv.len()).collect();
    order.sort_by(|&a, &b| sv[b].total_cmp(&sv[a]));

    let mut components = Array2::zeros((k, d));
    let mut variance_ratios = Vec::with_capacity(k);
    for (row, &idx) in order.iter().take(k).enumerate() {
        let dir: Vec<f64> = (0..d).map(|j| v_t[(idx, j)]).collect();
        // sign convention: largest-magnitude entry positive
        let pivot = dir
            .iter()
            .enumerate()
            .fold(0, |best, (j, v)| if v.abs() > dir[best].abs() { j } else { best });
        let sign = if dir[pivot] < 0.0 { -1.0 } else { 1.0 };
        for (j, v) in dir.iter().enumerate() {
            components[[row, j]] = sign * v;
        }
        variance_ratios.push(if total > 0.0 { sv[idx] * sv[idx] / total } else { 0.0 });
    }
    Ok(PcaModel {
        mean,
        components,
        variance_ratios,
    })
}

pub fn pca_transform(model: &PcaModel, m: &RepMatrix) -> Result<RepMatrix> {
    let d = model.mean.len();
    if m.rows.ncols() != d {
        return Err(Error::dim("pca input columns", d, m.rows.ncols()));
    }
    let scores = (&m.rows - &model.mean).dot(&model.components.t());
    Ok(m.with_rows(scores))
}

/// Per-column min-max normalization followed by rounding at 0.5.
/// Constant columns become all zeros.
pub fn binarize(m: &RepMatrix) -> RepMatrix {
    let mut out = Array2::zeros(m.rows.dim());
    for (col, mut dst) in m.rows.axis_iter(Axis(1)).zip(out.axis_iter_mut(Axis(1))) {
        let lo = col.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = col.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let range = hi - lo;
        if !(range > 0.0) {
            continue;
        }
        for (d, &v) in dst.iter_mut().zip(col.iter()) {
            *d = if (v - lo) / range >= 0.5 { 1.0 } else { 0.0 };
        }
    }
    m.with_rows(out)
}

/// A 250-bit aggregated semantic-visual target.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SemVisRep {
    pub item_id: usize,
    bits: Vec<u8>,
}

impl SemVisRep {
    pub fn from_bits(item_id: usize, bits: Vec<u8>) -> Result<Self> {
        if bits.len() != REP_DIM {
            return Err(Error::dim("semantic-visual bits", REP_DIM, bits.len()));
        }
        if bits.iter().any(|&b| b > 1) {
            return Err(Error::Parameter("representation bits must be 0 or 1".into()));
        }
        Ok(Self { item_id, bits })
    }

    pub fn bits(&self) -> &[u8] {
        &self.bits
    }

    pub fn sem_part(&self) -> &[u8] {
        &self.bits[..SEM_DIM]
    }

    pub fn vis_part(&self) -> &[u8] {
        &self.bits[SEM_DIM..]
    }

    pub fn popcount(&self) -> usize {
        self.bits.iter().map(|&b| b as usize).sum()
    }
}

pub fn aggregate(item_id: usize, sem_bits: &[u8], vis_bits: &[u8]) -> Result<SemVisRep> {
    if sem_bits.len() != SEM_DIM {
        return Err(Error::dim("semantic bits", SEM_DIM, sem_bits.len()));
    }
    if vis_bits.len() != VIS_DIM {
        return Err(Error::dim("visual bits", VIS_DIM, vis_bits.len()));
    }
    let bits = sem_bits.iter().chain(vis_bits).copied().collect();
    SemVisRep::from_bits(item_id, bits)
}

/// Fraction of differing positions.
pub fn hamming_norm(a: &[u8], b: &[u8]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::dim("hamming operands", a.len(), b.len()));
    }
    if a.is_empty() {
        return Ok(0.0);
    }
    let diff = a.iter().zip(b).filter(|(x, y)| x != y).count();
    Ok(diff as f64 / a.len() as f64)
}

/// One minus the soft Hamming distance (mean absolute difference) between a
/// real-valued output and a target. Equals 1 − hamming_norm for binary output.
pub fn activation(output: &[f64], rep: &SemVisRep) -> Result<f64> {
    if output.len() != rep.bits.len() {
        return Err(Error::dim("activation output", rep.bits.len(), output.len()));
    }
    let total: f64 = output
        .iter()
        .zip(&rep.bits)
        .map(|(&o, &b)| (o.clamp(0.0, 1.0) - f64::from(b)).abs())
        .sum();
    Ok(1.0 - total / output.len() as f64)
}

fn check_densities(sem_density: f64, vis_density: f64) -> Result<()> {
    for (name, d) in [("semantic", sem_density), ("visual", vis_density)] {
        if !(d > 0.0 && d < 1.0) {
            return Err(Error::Parameter(format!("{name} density {d} outside (0, 1)")));
        }
    }
    Ok(())
}

/// Random Bernoulli targets; item ids are `0..count`.
pub fn synth_reps(count: usize, sem_density: f64, vis_density: f64, seed: u64) -> Result<Vec<SemVisRep>> {
    check_densities(sem_density, vis_density)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|id| {
            let bits = (0..REP_DIM)
                .map(|j| {
                    let p = if j < SEM_DIM { sem_density } else { vis_density };
                    u8::from(rng.gen::<f64>() < p)
                })
                .collect();
            SemVisRep::from_bits(id, bits)
        })
        .collect()
}

/// `k` distinct positions out of `width`, ascending.
fn sample(rng: &mut ChaCha8Rng, width: usize, k: usize) -> Vec<usize> {
    let mut picked = rand::seq::index::sample(rng, width, k).into_vec();
    picked.sort_unstable();
    picked
}

/// Copies a prototype's active positions, moving each with probability
/// `STRUCTURE_NOISE` to a position that is inactive in the prototype.
fn perturb(rng: &mut ChaCha8Rng, width: usize, proto: &[usize]) -> Vec<u8> {
    let mut bits = vec![0u8; width];
    let mut moved = 0;
    for &j in proto {
        if rng.gen::<f64>() < STRUCTURE_NOISE {
            moved += 1;
        } else {
            bits[j] = 1;
        }
    }
    let mut free: Vec<usize> = (0..width).filter(|j| !proto.contains(j)).collect();
    free.shuffle(rng);
    for &j in free.iter().take(moved) {
        bits[j] = 1;
    }
    bits
}

/// Targets keyed by item id.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct RepSet {
    reps: BTreeMap<usize, SemVisRep>,
}

impl RepSet {
    pub fn new(reps: impl IntoIterator<Item = SemVisRep>) -> Self {
        Self {
            reps: reps.into_iter().map(|r| (r.item_id, r)).collect(),
        }
    }

    /// Synthetic targets for every lexicon item, drawn in lexicon order.
    pub fn synthetic(lexicon: &Lexicon, sem_density: f64, vis_density: f64, seed: u64) -> Result<Self> {
        let reps = synth_reps(lexicon.len(), sem_density, vis_density, seed)?;
        Ok(Self::new(
            lexicon
                .items()
                .iter()
                .zip(reps)
                .map(|(it, r)| SemVisRep { item_id: it.id, bits: r.bits }),
        ))
    }

    /// Synthetic targets with coarse structure: semantic bits are noisy
    /// copies of a per-category prototype, and visual bits are noisy copies of
    /// a prototype shared by small look-alike groups drawn across categories.
    /// Independent Bernoulli targets have almost no pairs in the closest
    /// visual tail that are also semantically distant, so they yield few
    /// valid visual world trials; this generator does.
    ///
    /// Every item has exactly `round(density × width)` ones per block: noise
    /// moves an active bit rather than flipping it, so activations compare
    /// overlap and not item density.
    pub fn synthetic_structured(lexicon: &Lexicon, sem_density: f64, vis_density: f64, seed: u64) -> Result<Self> {
        check_densities(sem_density, vis_density)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = lexicon.len();
        let active = |width: usize, p: f64| ((width as f64 * p).round() as usize).clamp(1, width - 1);
        let (sem_k, vis_k) = (active(SEM_DIM, sem_density), active(VIS_DIM, vis_density));

        let mut categories: Vec<&str> = lexicon.items().iter().map(|it| it.category.as_str()).collect();
        categories.sort_unstable();
        categories.dedup();
        let sem_protos: BTreeMap<&str, Vec<usize>> =
            categories.iter().map(|&c| (c, sample(&mut rng, SEM_DIM, sem_k))).collect();

        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng);
        let mut vis_group = vec![0usize; n];
        let paired = (n as f64 * LOOKALIKE_FRACTION) as usize / 2 * 2;
        for (k, &i) in order.iter().enumerate() {
            vis_group[i] = if k < paired { k / 2 } else { k };
        }
        let vis_protos: Vec<Vec<usize>> = (0..n).map(|_| sample(&mut rng, VIS_DIM, vis_k)).collect();

        let mut reps = Vec::with_capacity(n);
        for (i, it) in lexicon.items().iter().enumerate() {
            let mut bits = perturb(&mut rng, SEM_DIM, &sem_protos[it.category.as_str()]);
            bits.extend(perturb(&mut rng, VIS_DIM, &vis_protos[vis_group[i]]));
            reps.push(SemVisRep { item_id: it.id, bits });
        }
        Ok(Self::new(reps))
    }

    pub fn get(&self, id: usize) -> Option<&SemVisRep> {
        self.reps.get(&id)
    }

    pub fn len(&self) -> usize {
        self.reps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.reps.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &SemVisRep> {
        self.reps.values()
    }

    /// Writes `id,label,b1..b250`, with labels taken from the lexicon.
    pub fn write_csv<W: Write>(&self, lexicon: &Lexicon, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        let mut header = vec!["id".to_string(), "label".to_string()];
        header.extend((1..=REP_DIM).map(|i| format!("b{i}")));
        w.write_record(&header)?;
        for it in lexicon.items() {
            let rep = self.get(it.id).ok_or_else(|| Error::MissingRepresentation {
                id: it.id,
                label: it.label.clone(),
            })?;
            let mut rec = vec![it.id.to_string(), it.label.clone()];
            rec.extend(rep.bits.iter().map(|b| b.to_string()));
            w.write_record(&rec)?;
        }
        w.flush().map_err(|e| Error::io("<prepared representations>", e))?;
        Ok(())
    }

    pub fn read_csv<R: Read>(reader: R, origin: &str) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
        let schema = |row, message: String| Error::Schema {
            path: origin.into(),
            row,
            message,
        };
        let headers = rdr.headers()?.clone();
        if headers.len() != REP_DIM + 2 || &headers[0] != "id" || &headers[1] != "label" {
            return Err(schema(0, format!("expected header id,label,b1..b{REP_DIM}")));
        }
        let mut reps = Vec::new();
        for (i, rec) in rdr.records().enumerate() {
            let row = i + 1;
            let rec = rec?;
            if rec.len() != REP_DIM + 2 {
                return Err(schema(row, format!("expected {} columns, got {}", REP_DIM + 2, rec.len())));
            }
            let id = rec[0]
                .parse()
                .map_err(|_| schema(row, format!("bad id `{}`", &rec[0])))?;
            let bits = rec
                .iter()
                .skip(2)
                .map(|f| match f {
                    "0" => Ok(0),
                    "1" => Ok(1),
                    other => Err(schema(row, format!("bit `{other}` is not 0 or 1"))),
                })
                .collect::<Result<Vec<u8>>>()?;
            reps.push(SemVisRep::from_bits(id, bits)?);
        }
        Ok(Self::new(reps))
    }

    pub fn from_path(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        Self::read_csv(file, &path.display().to_string())
    }
}

/// Raw vectors as produced by the embedding extractor.
#[derive(Debug, Clone)]
pub struct RawReps {
    pub labels: Vec<String>,
    pub semantic: RepMatrix,
    pub visual: RepMatrix,
}

impl RawReps {
    /// Parses `id,label,s1..s100,v1..v512`.
    pub fn read_csv<R: Read>(reader: R, origin: &str) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new()
            .trim(csv::Trim::All)
            .comment(Some(b'#'))
            .flexible(true)
            .from_reader(reader);
        let width = 2 + SEM_DIM + VIS_RAW_DIM;
        let schema = |row, message: String| Error::Schema {
            path: origin.into(),
            row,
            message,
        };
        let headers = rdr.headers()?.clone();
        if headers.len() != width || &headers[0] != "id" || &headers[1] != "label" {
            return Err(schema(0, format!("expected header id,label,s1..s{SEM_DIM},v1..v{VIS_RAW_DIM}")));
        }
        let mut ids = Vec::new();
        let mut labels = Vec::new();
        let mut sem = Vec::new();
        let mut vis = Vec::new();
        for (i, rec) in rdr.records().enumerate() {
            let row = i + 1;
            let rec = rec?;
            if rec.len() != width {
                return Err(schema(
                    row,
                    format!(
                        "expected {SEM_DIM} semantic and {VIS_RAW_DIM} visual columns, got {} columns in total",
                        rec.len()
                    ),
                ));
            }
            ids.push(rec[0].parse().map_err(|_| schema(row, format!("bad id `{}`", &rec[0])))?);
            labels.push(rec[1].to_string());
            for (j, f) in rec.iter().skip(2).enumerate() {
                let v: f64 = f
                    .parse()
                    .map_err(|_| schema(row, format!("column {} value `{f}` is not a number", j + 3)))?;
                if !v.is_finite() {
                    return Err(schema(row, format!("column {} is not finite", j + 3)));
                }
                if j < SEM_DIM {
                    sem.push(v);
                } else {
                    vis.push(v);
                }
            }
        }
        let n = ids.len();
        let semantic = RepMatrix::new(
            Array2::from_shape_vec((n, SEM_DIM), sem).expect("row widths checked"),
            RepKind::Semantic,
            ids.clone(),
        )?;
        let visual = RepMatrix::new(
            Array2::from_shape_vec((n, VIS_RAW_DIM), vis).expect("row widths checked"),
            RepKind::Visual,
            ids,
        )?;
        Ok(Self {
            labels,
            semantic,
            visual,
        })
    }

    pub fn from_path(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        Self::read_csv(file, &path.display().to_string())
    }

    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        let mut header = vec!["id".to_string(), "label".to_string()];
        header.extend((1..=SEM_DIM).map(|i| format!("s{i}")));
        header.extend((1..=VIS_RAW_DIM).map(|i| format!("v{i}")));
        w.write_record(&header)?;
        for (r, id) in self.semantic.item_ids.iter().enumerate() {
            let mut rec = vec![id.to_string(), self.labels[r].clone()];
            rec.extend(self.semantic.rows.row(r).iter().map(|v| v.to_string()));
            rec.extend(self.visual.rows.row(r).iter().map(|v| v.to_string()));
            w.write_record(&rec)?;
        }
        w.flush().map_err(|e| Error::io("<raw representations>", e))?;
        Ok(())
    }
}

/// Output of the preparation pipeline.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub reps: RepSet,
    pub pca: PcaModel,
}

/// Outlier replacement, PCA on the visual block, binarization, concatenation.
pub fn prepare(raw: &RawReps, visual_components: usize) -> Result<Prepared> {
    if visual_components != VIS_DIM {
        return Err(Error::Parameter(format!(
            "aggregated targets need {VIS_DIM} visual components, got {visual_components}"
        )));
    }
    let sem = replace_outliers(&raw.semantic)?;
    let vis = replace_outliers(&raw.visual)?;
    let pca = pca_fit(&vis, visual_components)?;
    let vis = pca_transform(&pca, &vis)?;
    let sem_bits = binarize(&sem);
    let vis_bits = binarize(&vis);
    let to_u8 = |row: ndarray::ArrayView1<f64>| row.iter().map(|&v| v as u8).collect::<Vec<u8>>();
    let reps = raw
        .semantic
        .item_ids
        .iter()
        .enumerate()
        .map(|(r, &id)| aggregate(id, &to_u8(sem_bits.rows.row(r)), &to_u8(vis_bits.rows.row(r))))
        .collect::<Result<Vec<_>>>()?;
    Ok(Prepared {
        reps: RepSet::new(reps),
        pca,
    })
}
