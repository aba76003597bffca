//! Product quantization: per-subspace prototypes, encoding, dot-product
//! tables and lookup aggregation.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::binio::{read_file, write_file, Reader, Writer};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

const MAX_ITERS: usize = 25;
const REL_TOL: f64 = 1e-4;

/// `C` subspaces of dimension `V`, `K` prototypes each.
#[derive(Debug, Clone, PartialEq)]
pub struct Codebook {
    pub subspaces: usize,
    pub sub_dim: usize,
    pub k: usize,
    /// `C x K x V`, row-major.
    pub prototypes: Vec<f64>,
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Index of the nearest row of `centers` (`k x v`); ties go to the lowest index.
fn nearest(x: &[f64], centers: &[f64], v: usize) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (i, c) in centers.chunks_exact(v).enumerate() {
        let d = sq_dist(x, c);
        if d < best.1 {
            best = (i, d);
        }
    }
    best
}

impl Codebook {
    pub fn dim(&self) -> usize {
        self.subspaces * self.sub_dim
    }

    pub fn prototype(&self, c: usize, k: usize) -> &[f64] {
        let v = self.sub_dim;
        let start = (c * self.k + k) * v;
        &self.prototypes[start..start + v]
    }

    fn subspace(&self, c: usize) -> &[f64] {
        let n = self.k * self.sub_dim;
        &self.prototypes[c * n..(c + 1) * n]
    }

    /// Bits needed for one encoded index, `ceil(log2 K)`.
    pub fn index_bits(&self) -> u32 {
        ceil_log2(self.k)
    }

    fn check_len(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.dim() {
            return Err(Error::shape(format!(
                "encode: vector of {} vs codebook dim {}",
                x.len(),
                self.dim()
            )));
        }
        Ok(())
    }

    /// Nearest prototype per subspace (lowest index on ties).
    pub fn encode(&self, x: &[f64]) -> Result<Vec<usize>> {
        self.check_len(x)?;
        Ok((0..self.subspaces)
            .map(|c| {
                nearest(
                    &x[c * self.sub_dim..(c + 1) * self.sub_dim],
                    self.subspace(c),
                    self.sub_dim,
                )
                .0
            })
            .collect())
    }

    /// Multiply count of one [`Self::encode`] call.
    pub fn encode_cost(&self) -> u64 {
        (self.subspaces * self.k * self.sub_dim) as u64
    }

    /// Concatenated prototypes selected by `indices`.
    pub fn reconstruct(&self, indices: &[usize]) -> Vec<f64> {
        indices
            .iter()
            .enumerate()
            .flat_map(|(c, &k)| self.prototype(c, k).iter().copied())
            .collect()
    }

    pub(crate) fn write(&self, w: &mut Writer) -> Result<()> {
        w.magic(b"PQCB");
        w.len_u32(self.subspaces)?;
        w.len_u32(self.sub_dim)?;
        w.len_u32(self.k)?;
        w.f64s(&self.prototypes);
        Ok(())
    }

    pub(crate) fn read(r: &mut Reader) -> Result<Self> {
        r.expect_magic(b"PQCB")?;
        let (subspaces, sub_dim, k) = (r.usize()?, r.usize()?, r.usize()?);
        let prototypes = r.f64s(subspaces * sub_dim * k)?;
        let cb = Codebook {
            subspaces,
            sub_dim,
            k,
            prototypes,
        };
        cb.validate().map_err(|e| Error::Format(e.to_string()))?;
        Ok(cb)
    }

    pub fn validate(&self) -> Result<()> {
        if self.subspaces == 0 || self.sub_dim == 0 || self.k == 0 {
            return Err(Error::config("codebook dimensions must be >= 1"));
        }
        if self.prototypes.len() != self.subspaces * self.k * self.sub_dim {
            return Err(Error::shape("codebook prototype count"));
        }
        if self.prototypes.iter().any(|v| !v.is_finite()) {
            return Err(Error::Range("non-finite prototype".into()));
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut w = Writer::default();
        self.write(&mut w)?;
        Ok(w.buf)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes);
        let cb = Self::read(&mut r)?;
        r.finish()?;
        Ok(cb)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_file(path, &self.to_bytes()?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&read_file(path)?)
    }
}

pub(crate) fn ceil_log2(k: usize) -> u32 {
    if k <= 1 {
        0
    } else {
        usize::BITS - (k - 1).leading_zeros()
    }
}

/// Distinct rows in first-occurrence order, or `None` once more than `k`
/// have been seen.
fn distinct_rows(rows: &[f64], v: usize, k: usize) -> Option<Vec<&[f64]>> {
    let mut seen: Vec<&[f64]> = Vec::new();
    for r in rows.chunks_exact(v) {
        if !seen
            .iter()
            .any(|s| s.iter().zip(r).all(|(a, b)| a.to_bits() == b.to_bits()))
        {
            if seen.len() == k {
                return None;
            }
            seen.push(r);
        }
    }
    Some(seen)
}

/// Draws an index with probability proportional to `weights`.
fn weighted_pick(rng: &mut ChaCha8Rng, weights: &[f64]) -> usize {
    let total: f64 = weights.iter().sum();
    if total <= 0.0 {
        return 0;
    }
    let target = rng.gen::<f64>() * total;
    let mut acc = 0.0;
    for (i, &w) in weights.iter().enumerate() {
        acc += w;
        if acc > target {
            return i;
        }
    }
    weights.iter().rposition(|&w| w > 0.0).unwrap_or(0)
}

fn kmeans(rows: &[f64], v: usize, k: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let n = rows.len() / v;
    if let Some(distinct) = distinct_rows(rows, v, k) {
        let m = distinct.len();
        return (0..k).flat_map(|i| distinct[i % m].iter().copied()).collect();
    }

    // k-means++ seeding
    let mut centers = Vec::with_capacity(k * v);
    let first = weighted_pick(rng, &vec![1.0; n]);
    centers.extend_from_slice(&rows[first * v..(first + 1) * v]);
    let mut d2: Vec<f64> = rows.chunks_exact(v).map(|r| sq_dist(r, &centers[..v])).collect();
    for _ in 1..k {
        let i = weighted_pick(rng, &d2);
        let c = rows[i * v..(i + 1) * v].to_vec();
        for (dv, r) in d2.iter_mut().zip(rows.chunks_exact(v)) {
            *dv = dv.min(sq_dist(r, &c));
        }
        centers.extend_from_slice(&c);
    }

    let mut assign = vec![0usize; n];
    let mut dist = vec![0.0; n];
    let mut prev = f64::INFINITY;
    for it in 0..MAX_ITERS {
        let mut obj = 0.0;
        for (i, r) in rows.chunks_exact(v).enumerate() {
            let (a, d) = nearest(r, &centers, v);
            assign[i] = a;
            dist[i] = d;
            obj += d;
        }
        if it > 0 && (obj == 0.0 || (prev - obj) <= REL_TOL * prev) {
            break;
        }
        prev = obj;
        let mut sums = vec![0.0; k * v];
        let mut counts = vec![0usize; k];
        for (i, r) in rows.chunks_exact(v).enumerate() {
            counts[assign[i]] += 1;
            for (s, x) in sums[assign[i] * v..(assign[i] + 1) * v].iter_mut().zip(r) {
                *s += x;
            }
        }
        for j in 0..k {
            let c = &mut centers[j * v..(j + 1) * v];
            if counts[j] == 0 {
                // Reseed to the point farthest from its center.
                let far = dist
                    .iter()
                    .enumerate()
                    .fold(0, |best, (i, &d)| if d > dist[best] { i } else { best });
                c.copy_from_slice(&rows[far * v..(far + 1) * v]);
                dist[far] = 0.0;
            } else {
                for (cv, s) in c.iter_mut().zip(&sums[j * v..(j + 1) * v]) {
                    *cv = s / counts[j] as f64;
                }
            }
        }
    }
    centers
}

/// Learns `k` prototypes in each of `c` subspaces of the rows of `data`
/// (`N x D`) with k-means.
pub fn learn_prototypes(data: &Tensor, k: usize, c: usize, seed: u64) -> Result<Codebook> {
    if data.shape().len() != 2 {
        return Err(Error::shape("learn_prototypes expects an N x D matrix"));
    }
    let (n, d) = (data.rows(), data.cols());
    if n == 0 {
        return Err(Error::InsufficientData { needed: 1, got: 0 });
    }
    if c == 0 || k == 0 || d % c != 0 {
        return Err(Error::config(format!(
            "dimension {d} is not divisible into {c} subspaces"
        )));
    }
    let v = d / c;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut prototypes = Vec::with_capacity(c * k * v);
    let mut sub = vec![0.0; n * v];
    for ci in 0..c {
        for (r, dst) in sub.chunks_exact_mut(v).enumerate() {
            dst.copy_from_slice(&data.row(r)[ci * v..(ci + 1) * v]);
        }
        prototypes.extend(kmeans(&sub, v, k, &mut rng));
    }
    Ok(Codebook {
        subspaces: c,
        sub_dim: v,
        k,
        prototypes,
    })
}

/// `D_O x K x C` table of prototype/weight dot products.
#[derive(Debug, Clone, PartialEq)]
pub struct PQTable {
    pub outputs: usize,
    pub k: usize,
    pub subspaces: usize,
    pub entries: Vec<f64>,
}

impl PQTable {
    #[inline]
    pub fn entry(&self, o: usize, k: usize, c: usize) -> f64 {
        self.entries[(o * self.k + k) * self.subspaces + c]
    }

    pub fn index_bits(&self) -> u32 {
        ceil_log2(self.k)
    }

    pub(crate) fn write(&self, w: &mut Writer) -> Result<()> {
        w.magic(b"PQTB");
        w.len_u32(self.outputs)?;
        w.len_u32(self.k)?;
        w.len_u32(self.subspaces)?;
        w.f64s(&self.entries);
        Ok(())
    }

    pub(crate) fn read(r: &mut Reader) -> Result<Self> {
        r.expect_magic(b"PQTB")?;
        let (outputs, k, subspaces) = (r.usize()?, r.usize()?, r.usize()?);
        let entries = r.f64s(outputs * k * subspaces)?;
        if entries.iter().any(|v| !v.is_finite()) {
            return Err(Error::Format("non-finite table entry".into()));
        }
        Ok(PQTable {
            outputs,
            k,
            subspaces,
            entries,
        })
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut w = Writer::default();
        self.write(&mut w)?;
        Ok(w.buf)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes);
        let t = Self::read(&mut r)?;
        r.finish()?;
        Ok(t)
    }
}

/// `entries[o][k][c] = dot(W_o^c, P_k^c)` for `W` of shape `D_O x D`.
pub fn build_table(cb: &Codebook, w: &Tensor) -> Result<PQTable> {
    if w.shape().len() != 2 || w.cols() != cb.dim() {
        return Err(Error::shape(format!(
            "build_table: W {:?} vs codebook dim {}",
            w.shape(),
            cb.dim()
        )));
    }
    let (outputs, v) = (w.rows(), cb.sub_dim);
    let mut entries = Vec::with_capacity(outputs * cb.k * cb.subspaces);
    for o in 0..outputs {
        let row = w.row(o);
        for k in 0..cb.k {
            for c in 0..cb.subspaces {
                entries.push(crate::tensor::dot(&row[c * v..(c + 1) * v], cb.prototype(c, k)));
            }
        }
    }
    Ok(PQTable {
        outputs,
        k: cb.k,
        subspaces: cb.subspaces,
        entries,
    })
}

/// `sum_c entries[o][indices[c]][c]`, accumulated in ascending `c`.
pub fn lookup_aggregate(indices: &[usize], table: &PQTable, o: usize) -> Result<f64> {
    if indices.len() != table.subspaces {
        return Err(Error::shape(format!(
            "{} indices for {} subspaces",
            indices.len(),
            table.subspaces
        )));
    }
    if o >= table.outputs {
        return Err(Error::IndexOutOfRange {
            index: o,
            limit: table.outputs,
        });
    }
    if let Some(&bad) = indices.iter().find(|&&i| i >= table.k) {
        return Err(Error::IndexOutOfRange {
            index: bad,
            limit: table.k,
        });
    }
    Ok(aggregate(indices, table, o))
}

/// Unchecked [`lookup_aggregate`].
#[inline]
pub(crate) fn aggregate(indices: &[usize], table: &PQTable, o: usize) -> f64 {
    let base = o * table.k * table.subspaces;
    let mut acc = 0.0;
    for (c, &k) in indices.iter().enumerate() {
        acc += table.entries[base + k * table.subspaces + c];
    }
    acc
}
