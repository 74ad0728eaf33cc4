//! Weighted Euclidean distances and exact k-nearest-neighbor search.
//!
//! Distances are the quadratic form `(y - x)^T W (y - x)`, never square
//! rooted. The [`SearchIndex`] whitens the stored vectors with a factor
//! `L` of `W` (so `d_W(y, x) = |L(y - x)|^2`) and searches a kd-tree in
//! the whitened space. Candidates that survive the tree search are
//! re-scored with [`weighted_distance`] on the original vectors and ranked
//! by `(distance, sample_id)`, which makes the indexed result identical to
//! [`brute_force_knn`] including tie order.
//!
//! A built index is immutable; `query_knn` takes `&self` and results do not
//! depend on how many threads query concurrently.

use std::cmp::Ordering;
use std::collections::BinaryHeap;

use nalgebra::DMatrix;

use crate::envelope::{ByteReader, ByteWriter, Envelope, Tag};
use crate::error::{Error, Result};
use crate::model::{AtmosphericClass, MatchedSample, WeightMatrix};

pub const TAG_INDEX: &Tag = b"IDX1";

const LEAF_SIZE: usize = 12;
/// Relative slack applied to the whitened pruning bound.
const PRUNE_REL: f64 = 1e-9;
/// Absolute slack, as a multiple of `|W| (|y| + max |x|)^2`. Sits above the
/// whitening reconstruction tolerance.
const PRUNE_ABS: f64 = 1e-8;
const WHITEN_TOL: f64 = 1e-9;
const EIGEN_FLOOR: f64 = 1e-12;

/// One neighbor returned by a search.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NeighborHit {
    pub sample_id: u64,
    /// Quadratic-form distance to the query.
    pub distance: f64,
    pub atmospheric_class: AtmosphericClass,
    /// Position of the sample in the stratum the search ran over.
    pub slot: usize,
}

fn hit_order(a: &NeighborHit, b: &NeighborHit) -> Ordering {
    a.distance
        .total_cmp(&b.distance)
        .then(a.sample_id.cmp(&b.sample_id))
}

#[inline]
fn quad_form(y: &[f64], x: &[f64], w: &WeightMatrix) -> f64 {
    match w {
        WeightMatrix::Diagonal(wd) => {
            let mut acc = 0.0;
            for i in 0..wd.len() {
                let d = y[i] - x[i];
                acc += wd[i] * d * d;
            }
            acc
        }
        WeightMatrix::Full { dim, entries } => {
            let n = *dim;
            let mut acc = 0.0;
            for i in 0..n {
                let di = y[i] - x[i];
                let row = &entries[i * n..(i + 1) * n];
                let mut inner = 0.0;
                for j in 0..n {
                    inner += row[j] * (y[j] - x[j]);
                }
                acc += di * inner;
            }
            acc.max(0.0)
        }
    }
}

/// `(y - x)^T W (y - x)`.
pub fn weighted_distance(y: &[f64], x: &[f64], w: &WeightMatrix) -> Result<f64> {
    let n = w.dim();
    for len in [y.len(), x.len()] {
        if len != n {
            return Err(Error::DimensionMismatch {
                expected: n,
                actual: len,
            });
        }
    }
    Ok(quad_form(y, x, w))
}

/// Linear map `L` with `L^T L = W`.
#[derive(Debug, Clone, PartialEq)]
pub enum Whitening {
    /// `L = diag(sqrt(w))`.
    Diagonal(Vec<f64>),
    /// Row-major `dim x dim` factor.
    Dense { dim: usize, rows: Vec<f64> },
}

impl Whitening {
    pub fn dim(&self) -> usize {
        match self {
            Whitening::Diagonal(s) => s.len(),
            Whitening::Dense { dim, .. } => *dim,
        }
    }

    #[inline]
    pub fn apply_into(&self, x: &[f64], out: &mut [f64]) {
        match self {
            Whitening::Diagonal(s) => {
                for i in 0..s.len() {
                    out[i] = s[i] * x[i];
                }
            }
            Whitening::Dense { dim, rows } => {
                for i in 0..*dim {
                    let row = &rows[i * dim..(i + 1) * dim];
                    out[i] = row.iter().zip(x).map(|(a, b)| a * b).sum();
                }
            }
        }
    }

    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.dim()];
        self.apply_into(x, &mut out);
        out
    }

    /// Dense row-major copy of `L`.
    pub fn matrix(&self) -> Vec<f64> {
        match self {
            Whitening::Diagonal(s) => {
                let n = s.len();
                let mut m = vec![0.0; n * n];
                for i in 0..n {
                    m[i * n + i] = s[i];
                }
                m
            }
            Whitening::Dense { rows, .. } => rows.clone(),
        }
    }
}

fn reconstruction_residual(l: &DMatrix<f64>, w: &DMatrix<f64>) -> f64 {
    let rec = l.transpose() * l;
    let norm = w.norm();
    if norm == 0.0 {
        rec.norm()
    } else {
        (rec - w).norm() / norm
    }
}

/// Factors `W` as `L^T L`.
///
/// Positive definite matrices use the Cholesky factor (`L` triangular);
/// rank-deficient ones fall back to an eigendecomposition with eigenvalues
/// below `1e-12 * max` set to zero.
pub fn whiten(w: &WeightMatrix) -> Result<Whitening> {
    match w {
        WeightMatrix::Diagonal(d) => {
            WeightMatrix::diagonal(d.clone())?;
            Ok(Whitening::Diagonal(d.iter().map(|v| v.sqrt()).collect()))
        }
        WeightMatrix::Full { dim, entries } => {
            WeightMatrix::full(*dim, entries.clone())?;
            let n = *dim;
            let m = DMatrix::from_row_slice(n, n, entries);
            let m = (&m + m.transpose()) * 0.5;
            if let Some(chol) = m.clone().cholesky() {
                let l = chol.l().transpose();
                if reconstruction_residual(&l, &m) < WHITEN_TOL {
                    return Ok(Whitening::Dense {
                        dim: n,
                        rows: row_major(&l),
                    });
                }
            }
            let eig = m.clone().symmetric_eigen();
            let max = eig.eigenvalues.iter().fold(0.0f64, |a, v| a.max(*v));
            let mut l = DMatrix::zeros(n, n);
            for (k, &lambda) in eig.eigenvalues.iter().enumerate() {
                let lambda = if lambda < EIGEN_FLOOR * max { 0.0 } else { lambda };
                let s = lambda.sqrt();
                for j in 0..n {
                    l[(k, j)] = s * eig.eigenvectors[(j, k)];
                }
            }
            let residual = reconstruction_residual(&l, &m);
            if residual >= WHITEN_TOL {
                return Err(Error::InvalidWeights(format!(
                    "whitening residual {residual:.3e} exceeds tolerance"
                )));
            }
            Ok(Whitening::Dense {
                dim: n,
                rows: row_major(&l),
            })
        }
    }
}

fn row_major(m: &DMatrix<f64>) -> Vec<f64> {
    let (r, c) = m.shape();
    let mut out = Vec::with_capacity(r * c);
    for i in 0..r {
        for j in 0..c {
            out.push(m[(i, j)]);
        }
    }
    out
}

fn check_k(k: usize, n: usize) -> Result<()> {
    if k == 0 || k > n {
        return Err(Error::InvalidArgument(format!(
            "k = {k} outside 1..={n} (stratum size)"
        )));
    }
    Ok(())
}

/// Exhaustive k-nearest-neighbor scan; the oracle for [`SearchIndex`].
pub fn brute_force_knn(
    stratum: &[MatchedSample],
    y: &[f64],
    k: usize,
    w: &WeightMatrix,
) -> Result<Vec<NeighborHit>> {
    check_k(k, stratum.len())?;
    if y.len() != w.dim() {
        return Err(Error::DimensionMismatch {
            expected: w.dim(),
            actual: y.len(),
        });
    }
    let mut hits = Vec::with_capacity(stratum.len());
    for (slot, s) in stratum.iter().enumerate() {
        hits.push(NeighborHit {
            sample_id: s.sample_id,
            distance: weighted_distance(y, s.tb.as_slice(), w)?,
            atmospheric_class: s.atmospheric_class(),
            slot,
        });
    }
    Ok(top_k(hits, k))
}

fn top_k(mut hits: Vec<NeighborHit>, k: usize) -> Vec<NeighborHit> {
    if k < hits.len() {
        hits.select_nth_unstable_by(k - 1, hit_order);
        hits.truncate(k);
    }
    hits.sort_unstable_by(hit_order);
    hits
}

/// Ranks a subset of a stratum afresh under `w` and keeps the nearest `k`.
pub fn knn_among(
    stratum: &[MatchedSample],
    candidates: &[NeighborHit],
    y: &[f64],
    k: usize,
    w: &WeightMatrix,
) -> Result<Vec<NeighborHit>> {
    check_k(k, candidates.len())?;
    let mut hits = Vec::with_capacity(candidates.len());
    for c in candidates {
        let s = stratum.get(c.slot).ok_or_else(|| {
            Error::Invariant(format!("neighbor slot {} outside stratum", c.slot))
        })?;
        hits.push(NeighborHit {
            distance: weighted_distance(y, s.tb.as_slice(), w)?,
            ..*c
        });
    }
    Ok(top_k(hits, k))
}

#[derive(Debug, Clone, PartialEq)]
enum Node {
    Leaf { start: u32, end: u32 },
    /// The left child is stored directly after the split node.
    Split { dim: u32, value: f64, right: u32 },
}

/// Exact kNN index over one stratum for a fixed weight matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct SearchIndex {
    weights: WeightMatrix,
    whitening: Whitening,
    dim: usize,
    /// Whitened vectors in tree order.
    points: Vec<f64>,
    /// Original vectors in tree order.
    raw: Vec<f64>,
    ids: Vec<u64>,
    classes: Vec<AtmosphericClass>,
    slots: Vec<u32>,
    nodes: Vec<Node>,
    /// Largest squared norm of an original vector, for the pruning slack.
    max_norm2: f64,
}

#[derive(Clone, Copy)]
struct HeapEntry(f64);

impl PartialEq for HeapEntry {
    fn eq(&self, other: &Self) -> bool {
        self.0.total_cmp(&other.0) == Ordering::Equal
    }
}
impl Eq for HeapEntry {}
impl PartialOrd for HeapEntry {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for HeapEntry {
    fn cmp(&self, other: &Self) -> Ordering {
        self.0.total_cmp(&other.0)
    }
}

struct Search<'a> {
    index: &'a SearchIndex,
    query: &'a [f64],
    k: usize,
    heap: BinaryHeap<HeapEntry>,
    candidates: Vec<(f64, u32)>,
    abs_slack: f64,
    offsets: Vec<f64>,
}

impl Search<'_> {
    #[inline]
    fn bound(&self) -> f64 {
        if self.heap.len() < self.k {
            f64::INFINITY
        } else {
            let kth = self.heap.peek().expect("heap is full").0;
            kth * (1.0 + PRUNE_REL) + self.abs_slack
        }
    }

    fn visit(&mut self, node: usize, rd: f64) {
        match self.index.nodes[node] {
            Node::Leaf { start, end } => {
                let dim = self.index.dim;
                for pos in start as usize..end as usize {
                    let p = &self.index.points[pos * dim..(pos + 1) * dim];
                    let d: f64 = self.query.iter().zip(p).map(|(q, x)| (q - x) * (q - x)).sum();
                    if d <= self.bound() {
                        self.candidates.push((d, pos as u32));
                        if self.heap.len() < self.k {
                            self.heap.push(HeapEntry(d));
                        } else if d < self.heap.peek().expect("heap is full").0 {
                            self.heap.pop();
                            self.heap.push(HeapEntry(d));
                        }
                    }
                }
            }
            Node::Split { dim, value, right } => {
                let dim = dim as usize;
                let diff = self.query[dim] - value;
                let (near, far) = if diff < 0.0 {
                    (node + 1, right as usize)
                } else {
                    (right as usize, node + 1)
                };
                self.visit(near, rd);
                let old = self.offsets[dim];
                let far_rd = rd - old * old + diff * diff;
                if far_rd <= self.bound() {
                    self.offsets[dim] = diff;
                    self.visit(far, far_rd);
                    self.offsets[dim] = old;
                }
            }
        }
    }
}

impl SearchIndex {
    pub fn weights(&self) -> &WeightMatrix {
        &self.weights
    }

    pub fn whitening(&self) -> &Whitening {
        &self.whitening
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Exact k nearest neighbors of `y`, sorted by `(distance, sample_id)`.
    pub fn query_knn(&self, y: &[f64], k: usize) -> Result<Vec<NeighborHit>> {
        check_k(k, self.len())?;
        if y.len() != self.dim {
            return Err(Error::DimensionMismatch {
                expected: self.dim,
                actual: y.len(),
            });
        }
        let query = self.whitening.apply(y);
        let qn = y.iter().map(|v| v * v).sum::<f64>().sqrt();
        let span = qn + self.max_norm2.sqrt();
        // Covers rounding and factorization differences between
        // |L(y - x)|^2 and the direct quadratic form.
        let abs_slack = PRUNE_ABS * self.weights.norm() * span * span + f64::MIN_POSITIVE;
        let mut search = Search {
            index: self,
            query: &query,
            k,
            heap: BinaryHeap::with_capacity(k + 1),
            candidates: Vec::with_capacity(4 * k),
            abs_slack,
            offsets: vec![0.0; self.dim],
        };
        search.visit(0, 0.0);
        let limit = search.bound();
        let mut hits: Vec<NeighborHit> = search
            .candidates
            .iter()
            .filter(|(d, _)| *d <= limit)
            .map(|&(_, pos)| {
                let pos = pos as usize;
                NeighborHit {
                    sample_id: self.ids[pos],
                    distance: quad_form(y, &self.raw[pos * self.dim..(pos + 1) * self.dim], &self.weights),
                    atmospheric_class: self.classes[pos],
                    slot: self.slots[pos] as usize,
                }
            })
            .collect();
        if hits.len() < k {
            return Err(Error::Invariant(format!(
                "index search produced {} candidates for k = {k}",
                hits.len()
            )));
        }
        hits.sort_unstable_by(hit_order);
        hits.truncate(k);
        Ok(hits)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = ByteWriter::new();
        w.u32(self.dim as u32);
        match &self.weights {
            WeightMatrix::Diagonal(d) => {
                w.u8(0);
                d.iter().for_each(|v| w.f64(*v));
            }
            WeightMatrix::Full { entries, .. } => {
                w.u8(1);
                entries.iter().for_each(|v| w.f64(*v));
            }
        }
        w.u64(self.ids.len() as u64);
        for pos in 0..self.ids.len() {
            w.u64(self.ids[pos]);
            w.u8(self.classes[pos].index() as u8);
            w.u32(self.slots[pos]);
        }
        self.raw.iter().for_each(|v| w.f64(*v));
        w.u64(self.nodes.len() as u64);
        for node in &self.nodes {
            match node {
                Node::Leaf { start, end } => {
                    w.u8(0);
                    w.u32(*start);
                    w.u32(*end);
                }
                Node::Split { dim, value, right } => {
                    w.u8(1);
                    w.u32(*dim);
                    w.f64(*value);
                    w.u32(*right);
                }
            }
        }
        w.into_inner()
    }

    /// Restores an index written by [`SearchIndex::to_bytes`]. Whitened
    /// coordinates are recomputed from the stored weights.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader::new(bytes);
        let dim = r.u32()? as usize;
        let weights = match r.u8()? {
            0 => WeightMatrix::diagonal((0..dim).map(|_| r.f64()).collect::<Result<_>>()?)?,
            1 => WeightMatrix::full(dim, (0..dim * dim).map(|_| r.f64()).collect::<Result<_>>()?)?,
            t => return Err(Error::Format(format!("bad weight storage flag {t}"))),
        };
        let n = r.u64()? as usize;
        let mut ids = Vec::with_capacity(n);
        let mut classes = Vec::with_capacity(n);
        let mut slots = Vec::with_capacity(n);
        for _ in 0..n {
            ids.push(r.u64()?);
            let c = r.u8()?;
            classes.push(
                AtmosphericClass::ALL
                    .iter()
                    .copied()
                    .find(|a| a.index() == c as usize)
                    .ok_or_else(|| Error::Format(format!("bad class code {c}")))?,
            );
            slots.push(r.u32()?);
        }
        let raw = (0..n * dim).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
        let node_count = r.u64()? as usize;
        let mut nodes = Vec::with_capacity(node_count);
        for _ in 0..node_count {
            nodes.push(match r.u8()? {
                0 => Node::Leaf {
                    start: r.u32()?,
                    end: r.u32()?,
                },
                1 => Node::Split {
                    dim: r.u32()?,
                    value: r.f64()?,
                    right: r.u32()?,
                },
                t => return Err(Error::Format(format!("bad node tag {t}"))),
            });
        }
        r.finish()?;
        let whitening = whiten(&weights)?;
        let mut points = vec![0.0; n * dim];
        for pos in 0..n {
            whitening.apply_into(&raw[pos * dim..(pos + 1) * dim], &mut points[pos * dim..(pos + 1) * dim]);
        }
        let max_norm2 = max_norm2(&raw, dim);
        Ok(SearchIndex {
            weights,
            whitening,
            dim,
            points,
            raw,
            ids,
            classes,
            slots,
            nodes,
            max_norm2,
        })
    }

    pub fn to_envelope(&self) -> Envelope {
        let mut env = Envelope::new();
        env.push(TAG_INDEX, self.to_bytes());
        env
    }

    pub fn from_envelope(env: &Envelope) -> Result<Self> {
        SearchIndex::from_bytes(env.require(TAG_INDEX)?)
    }
}

fn max_norm2(points: &[f64], dim: usize) -> f64 {
    if dim == 0 {
        return 0.0;
    }
    points
        .chunks_exact(dim)
        .map(|p| p.iter().map(|v| v * v).sum::<f64>())
        .fold(0.0, f64::max)
}

struct Builder<'a> {
    points: &'a [f64],
    dim: usize,
    nodes: Vec<Node>,
}

impl Builder<'_> {
    fn build(&mut self, order: &mut [u32], offset: usize) -> usize {
        let me = self.nodes.len();
        if order.len() <= LEAF_SIZE {
            self.nodes.push(Node::Leaf {
                start: offset as u32,
                end: (offset + order.len()) as u32,
            });
            return me;
        }
        let dim = self.dim;
        let mut best = (0usize, -1.0f64);
        for d in 0..dim {
            let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
            for &p in order.iter() {
                let v = self.points[p as usize * dim + d];
                lo = lo.min(v);
                hi = hi.max(v);
            }
            if hi - lo > best.1 {
                best = (d, hi - lo);
            }
        }
        let split_dim = best.0;
        if best.1 <= 0.0 {
            // All points coincide.
            self.nodes.push(Node::Leaf {
                start: offset as u32,
                end: (offset + order.len()) as u32,
            });
            return me;
        }
        let mid = order.len() / 2;
        let key = |p: &u32| self.points[*p as usize * dim + split_dim];
        order.select_nth_unstable_by(mid, |a, b| key(a).total_cmp(&key(b)).then(a.cmp(b)));
        let value = key(&order[mid]);
        self.nodes.push(Node::Split {
            dim: split_dim as u32,
            value,
            right: 0,
        });
        let (left, right) = order.split_at_mut(mid);
        self.build(left, offset);
        let right_node = self.build(right, offset + mid);
        if let Node::Split { right, .. } = &mut self.nodes[me] {
            *right = right_node as u32;
        }
        me
    }
}

/// Builds the index over `stratum` for weight matrix `w`.
///
/// Construction is deterministic for a fixed input order.
pub fn build_index(stratum: &[MatchedSample], w: &WeightMatrix) -> Result<SearchIndex> {
    if stratum.is_empty() {
        return Err(Error::InvalidArgument("cannot index an empty stratum".into()));
    }
    if stratum.len() > u32::MAX as usize {
        return Err(Error::InvalidArgument("stratum too large to index".into()));
    }
    let dim = w.dim();
    let whitening = whiten(w)?;
    let n = stratum.len();
    let mut white = vec![0.0; n * dim];
    for (i, s) in stratum.iter().enumerate() {
        if s.tb.len() != dim {
            return Err(Error::DimensionMismatch {
                expected: dim,
                actual: s.tb.len(),
            });
        }
        whitening.apply_into(s.tb.as_slice(), &mut white[i * dim..(i + 1) * dim]);
    }
    let mut order: Vec<u32> = (0..n as u32).collect();
    let mut builder = Builder {
        points: &white,
        dim,
        nodes: Vec::new(),
    };
    builder.build(&mut order, 0);
    let nodes = builder.nodes;

    let mut points = Vec::with_capacity(n * dim);
    let mut raw = Vec::with_capacity(n * dim);
    let mut ids = Vec::with_capacity(n);
    let mut classes = Vec::with_capacity(n);
    for &p in &order {
        let p = p as usize;
        points.extend_from_slice(&white[p * dim..(p + 1) * dim]);
        raw.extend_from_slice(stratum[p].tb.as_slice());
        ids.push(stratum[p].sample_id);
        classes.push(stratum[p].atmospheric_class());
    }
    let max_norm2 = max_norm2(&raw, dim);
    Ok(SearchIndex {
        weights: w.clone(),
        whitening,
        dim,
        points,
        raw,
        ids,
        classes,
        slots: order,
        nodes,
        max_norm2,
    })
}

/// Free-function form of [`SearchIndex::query_knn`].
pub fn query_knn(index: &SearchIndex, y: &[f64], k: usize) -> Result<Vec<NeighborHit>> {
    index.query_knn(y, k)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ChannelVector, PhaseLabel};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    pub(crate) fn point_sample(id: u64, tb: Vec<f64>, precip: bool) -> MatchedSample {
        MatchedSample {
            sample_id: id,
            tb: ChannelVector::new_unchecked(tb),
            rate: if precip { 1.0 } else { 0.0 },
            active_phase: None,
            passive_phase_prob: None,
            ref_phase: precip.then_some(PhaseLabel::Liquid),
            snow_fraction: 0.0,
            skin_temp: 280.0,
            air_temp: 280.0,
            latitude: 0.0,
            longitude: 0.0,
            timestamp: 0,
        }
    }

    fn dense(m: &[f64], n: usize, i: usize, j: usize) -> f64 {
        m[i * n + j]
    }

    #[test]
    fn distance_examples() {
        let i2 = WeightMatrix::identity(2);
        assert_eq!(weighted_distance(&[1.0, 2.0], &[1.0, 2.0], &i2).unwrap(), 0.0);
        assert_eq!(weighted_distance(&[1.0, 2.0], &[4.0, 6.0], &i2).unwrap(), 25.0);
        let w = WeightMatrix::diagonal(vec![2.0, 1.0]).unwrap();
        assert_eq!(weighted_distance(&[1.0, 2.0], &[4.0, 6.0], &w).unwrap(), 34.0);
        let wf = WeightMatrix::full(2, vec![2.0, 0.0, 0.0, 1.0]).unwrap();
        assert_eq!(weighted_distance(&[1.0, 2.0], &[4.0, 6.0], &wf).unwrap(), 34.0);
        // whitened route
        let l = whiten(&w).unwrap();
        let d: Vec<f64> = l.apply(&[1.0, 2.0]).iter().zip(l.apply(&[4.0, 6.0])).map(|(a, b)| a - b).collect();
        assert!((d.iter().map(|v| v * v).sum::<f64>() - 34.0).abs() < 1e-12);
        assert!(weighted_distance(&[1.0], &[1.0, 2.0], &i2).is_err());
    }

    #[test]
    fn whiten_examples() {
        assert_eq!(whiten(&WeightMatrix::identity(3)).unwrap().matrix(), WeightMatrix::identity(3).to_dense());
        let l = whiten(&WeightMatrix::full(2, vec![4.0, 0.0, 0.0, 9.0]).unwrap()).unwrap();
        let m = l.matrix();
        assert!((m[0] - 2.0).abs() < 1e-15 && (m[3] - 3.0).abs() < 1e-15);
        assert_eq!((m[1], m[2]), (0.0, 0.0));
        let l = whiten(&WeightMatrix::diagonal(vec![4.0, 9.0]).unwrap()).unwrap();
        assert_eq!(l.matrix(), vec![2.0, 0.0, 0.0, 3.0]);
    }

    fn random_psd(rng: &mut ChaCha8Rng, n: usize, rank: usize) -> WeightMatrix {
        let a: Vec<f64> = (0..n * rank).map(|_| rng.random_range(-1.0..1.0)).collect();
        let mut w = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..n {
                w[i * n + j] = (0..rank).map(|r| a[i * rank + r] * a[j * rank + r]).sum();
            }
        }
        for i in 0..n {
            for j in 0..i {
                w[i * n + j] = w[j * n + i];
            }
        }
        WeightMatrix::full(n, w).unwrap()
    }

    #[test]
    fn whitening_reconstructs_random_psd() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for rank in [13, 9, 1] {
            let w = random_psd(&mut rng, 13, rank);
            let l = whiten(&w).unwrap().matrix();
            let wd = w.to_dense();
            // independent multiply: (L^T L)_ij = sum_k L_ki L_kj
            let mut num = 0.0;
            let mut den = 0.0;
            for i in 0..13 {
                for j in 0..13 {
                    let rec: f64 = (0..13).map(|k| dense(&l, 13, k, i) * dense(&l, 13, k, j)).sum();
                    num += (rec - wd[i * 13 + j]).powi(2);
                    den += wd[i * 13 + j].powi(2);
                }
            }
            assert!((num / den).sqrt() < 1e-9, "rank {rank}: {}", (num / den).sqrt());
        }
    }

    #[test]
    fn single_sample_index() {
        let s = vec![point_sample(42, vec![1.0, 2.0], true)];
        let idx = build_index(&s, &WeightMatrix::identity(2)).unwrap();
        for q in [[0.0, 0.0], [100.0, -5.0]] {
            let hits = idx.query_knn(&q, 1).unwrap();
            assert_eq!(hits[0].sample_id, 42);
        }
        assert!(idx.query_knn(&[0.0, 0.0], 2).is_err());
        assert!(idx.query_knn(&[0.0, 0.0], 0).is_err());
        assert!(build_index(&[], &WeightMatrix::identity(2)).is_err());
    }

    #[test]
    fn duplicates_are_ordered_by_id() {
        let s: Vec<_> = [5u64, 3, 9, 1]
            .iter()
            .map(|&id| point_sample(id, vec![1.0, 1.0], false))
            .chain(std::iter::once(point_sample(0, vec![3.0, 3.0], false)))
            .collect();
        let idx = build_index(&s, &WeightMatrix::identity(2)).unwrap();
        let ids: Vec<u64> = idx.query_knn(&[1.0, 1.0], 5).unwrap().iter().map(|h| h.sample_id).collect();
        assert_eq!(ids, vec![1, 3, 5, 9, 0]);
        let brute: Vec<u64> = brute_force_knn(&s, &[1.0, 1.0], 5, &WeightMatrix::identity(2))
            .unwrap()
            .iter()
            .map(|h| h.sample_id)
            .collect();
        assert_eq!(ids, brute);
    }

    #[test]
    fn query_equal_to_stored_vector_comes_first() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let s: Vec<_> = (0..500)
            .map(|i| point_sample(i, (0..5).map(|_| rng.random_range(0.0..10.0)).collect(), i % 2 == 0))
            .collect();
        let idx = build_index(&s, &WeightMatrix::identity(5)).unwrap();
        let hits = idx.query_knn(s[123].tb.as_slice(), 500).unwrap();
        assert_eq!(hits[0].sample_id, 123);
        assert_eq!(hits[0].distance, 0.0);
        assert_eq!(hits.len(), 500);
        assert!(hits.windows(2).all(|w| hit_order(&w[0], &w[1]) == Ordering::Less));
    }

    #[test]
    fn index_matches_brute_force_at_ten_thousand() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let s: Vec<_> = (0..10_000)
            .map(|i| point_sample(i, (0..13).map(|_| rng.random_range(150.0..300.0)).collect(), rng.random::<bool>()))
            .collect();
        let w = WeightMatrix::diagonal((0..13).map(|_| rng.random_range(0.1..2.0)).collect()).unwrap();
        let idx = build_index(&s, &w).unwrap();
        for _ in 0..100 {
            let q: Vec<f64> = (0..13).map(|_| rng.random_range(150.0..300.0)).collect();
            let a = idx.query_knn(&q, 30).unwrap();
            let b = brute_force_knn(&s, &q, 30, &w).unwrap();
            assert_eq!(a, b);
        }
    }

    #[test]
    fn knn_among_reranks_subset() {
        let s = vec![
            point_sample(1, vec![0.0, 5.0], true),
            point_sample(2, vec![5.0, 0.0], true),
            point_sample(3, vec![1.0, 1.0], true),
        ];
        let all = brute_force_knn(&s, &[0.0, 0.0], 3, &WeightMatrix::identity(2)).unwrap();
        let only_x = WeightMatrix::diagonal(vec![1.0, 0.0]).unwrap();
        let ranked = knn_among(&s, &all[1..], &[0.0, 0.0], 2, &only_x).unwrap();
        assert_eq!(ranked.iter().map(|h| h.sample_id).collect::<Vec<_>>(), vec![1, 2]);
        assert!(knn_among(&s, &all[1..], &[0.0, 0.0], 3, &only_x).is_err());
    }

    #[test]
    fn index_serialization_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let s: Vec<_> = (0..300)
            .map(|i| point_sample(i, (0..4).map(|_| rng.random_range(0.0..1.0)).collect(), false))
            .collect();
        let w = random_psd(&mut rng, 4, 4);
        let idx = build_index(&s, &w).unwrap();
        let env = Envelope::decode(&idx.to_envelope().encode()).unwrap();
        let back = SearchIndex::from_envelope(&env).unwrap();
        assert_eq!(back, idx);
    }
}
