//! Patch extraction: farthest point sampling for centers, k-nearest
//! neighbors for membership.
//!
//! Every ordering in this module breaks distance ties by ascending point
//! index, so the accelerated paths agree exactly with brute force.

use std::cmp::Ordering;
use std::collections::BinaryHeap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::pointcloud::PointCloud;
use crate::seed;

#[inline]
pub fn dist2(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    let dx = a[0] - b[0];
    let dy = a[1] - b[1];
    let dz = a[2] - b[2];
    dx * dx + dy * dy + dz * dz
}

#[inline]
fn cmp_candidate(a: &(f64, usize), b: &(f64, usize)) -> Ordering {
    a.0.total_cmp(&b.0).then(a.1.cmp(&b.1))
}

/// Greedy farthest point sampling with a seeded uniform first pick.
pub fn farthest_point_sampling(coords: &[[f64; 3]], count: usize, seed: u64) -> Result<Vec<usize>> {
    if count > coords.len() || coords.is_empty() {
        return Err(Error::CountExceedsPoints {
            count,
            points: coords.len(),
        });
    }
    let first = seed::rng(seed).gen_range(0..coords.len());
    farthest_point_sampling_from(coords, count, first)
}

/// Farthest point sampling starting from a fixed first index.
pub fn farthest_point_sampling_from(
    coords: &[[f64; 3]],
    count: usize,
    first: usize,
) -> Result<Vec<usize>> {
    if count > coords.len() {
        return Err(Error::CountExceedsPoints {
            count,
            points: coords.len(),
        });
    }
    if count == 0 {
        return Ok(Vec::new());
    }
    let mut min_d = vec![f64::INFINITY; coords.len()];
    let mut picked = Vec::with_capacity(count);
    let mut last = first;
    min_d[last] = f64::NEG_INFINITY;
    picked.push(last);
    while picked.len() < count {
        let anchor = coords[last];
        let mut best = usize::MAX;
        let mut best_d = f64::NEG_INFINITY;
        for (i, (p, m)) in coords.iter().zip(min_d.iter_mut()).enumerate() {
            if *m == f64::NEG_INFINITY {
                continue;
            }
            let d = dist2(p, &anchor);
            if d < *m {
                *m = d;
            }
            if *m > best_d {
                best_d = *m;
                best = i;
            }
        }
        last = best;
        min_d[last] = f64::NEG_INFINITY;
        picked.push(last);
    }
    Ok(picked)
}

/// Exhaustive k-nearest neighbors, sorted by `(distance, index)`.
pub fn knn(coords: &[[f64; 3]], query: &[f64; 3], k: usize) -> Result<Vec<usize>> {
    if k > coords.len() {
        return Err(Error::KExceedsPoints {
            k,
            points: coords.len(),
        });
    }
    if k == 0 {
        return Ok(Vec::new());
    }
    let mut cand: Vec<(f64, usize)> = coords
        .iter()
        .enumerate()
        .map(|(i, p)| (dist2(p, query), i))
        .collect();
    if k < cand.len() {
        cand.select_nth_unstable_by(k - 1, cmp_candidate);
        cand.truncate(k);
    }
    cand.sort_unstable_by(cmp_candidate);
    Ok(cand.into_iter().map(|(_, i)| i).collect())
}

const LEAF_SIZE: usize = 12;

#[derive(Debug, Clone)]
enum KdNode {
    Leaf { start: usize, end: usize },
    Split {
        axis: usize,
        value: f64,
        left: usize,
        right: usize,
    },
}

/// Static kd-tree for repeated exact k-NN queries over one point set.
#[derive(Debug, Clone)]
pub struct KdTree<'a> {
    coords: &'a [[f64; 3]],
    order: Vec<usize>,
    nodes: Vec<KdNode>,
}

#[derive(PartialEq)]
struct HeapItem(f64, usize);

impl Eq for HeapItem {}

impl PartialOrd for HeapItem {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for HeapItem {
    fn cmp(&self, other: &Self) -> Ordering {
        cmp_candidate(&(self.0, self.1), &(other.0, other.1))
    }
}

impl<'a> KdTree<'a> {
    pub fn new(coords: &'a [[f64; 3]]) -> Self {
        let mut tree = KdTree {
            coords,
            order: (0..coords.len()).collect(),
            nodes: Vec::new(),
        };
        if !coords.is_empty() {
            tree.build(0, coords.len());
        }
        tree
    }

    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    fn build(&mut self, start: usize, end: usize) -> usize {
        let id = self.nodes.len();
        if end - start <= LEAF_SIZE {
            self.nodes.push(KdNode::Leaf { start, end });
            return id;
        }
        let mut lo = [f64::INFINITY; 3];
        let mut hi = [f64::NEG_INFINITY; 3];
        for &i in &self.order[start..end] {
            for a in 0..3 {
                lo[a] = lo[a].min(self.coords[i][a]);
                hi[a] = hi[a].max(self.coords[i][a]);
            }
        }
        let axis = (0..3)
            .max_by(|&a, &b| (hi[a] - lo[a]).total_cmp(&(hi[b] - lo[b])))
            .unwrap();
        let mid = start + (end - start) / 2;
        let coords = self.coords;
        self.order[start..end].select_nth_unstable_by(mid - start, |&a, &b| {
            coords[a][axis].total_cmp(&coords[b][axis])
        });
        let value = coords[self.order[mid]][axis];
        self.nodes.push(KdNode::Leaf { start, end });
        let left = self.build(start, mid);
        let right = self.build(mid, end);
        self.nodes[id] = KdNode::Split {
            axis,
            value,
            left,
            right,
        };
        id
    }

    /// Same contract as [`knn`]: `k` indices sorted by `(distance, index)`.
    pub fn knn(&self, query: &[f64; 3], k: usize) -> Result<Vec<usize>> {
        if k > self.coords.len() {
            return Err(Error::KExceedsPoints {
                k,
                points: self.coords.len(),
            });
        }
        if k == 0 {
            return Ok(Vec::new());
        }
        let mut heap = BinaryHeap::with_capacity(k + 1);
        self.search(0, query, k, &mut heap);
        let mut out: Vec<(f64, usize)> = heap.into_iter().map(|h| (h.0, h.1)).collect();
        out.sort_unstable_by(cmp_candidate);
        Ok(out.into_iter().map(|(_, i)| i).collect())
    }

    fn search(&self, node: usize, q: &[f64; 3], k: usize, heap: &mut BinaryHeap<HeapItem>) {
        match self.nodes[node] {
            KdNode::Leaf { start, end } => {
                for &i in &self.order[start..end] {
                    let item = HeapItem(dist2(&self.coords[i], q), i);
                    if heap.len() < k {
                        heap.push(item);
                    } else if item < *heap.peek().unwrap() {
                        heap.pop();
                        heap.push(item);
                    }
                }
            }
            KdNode::Split {
                axis,
                value,
                left,
                right,
            } => {
                let diff = q[axis] - value;
                let (near, far) = if diff < 0.0 { (left, right) } else { (right, left) };
                self.search(near, q, k, heap);
                // Points equal to the split value may sit on either side, so
                // only a strictly farther plane can be skipped.
                let plane = diff * diff;
                if heap.len() < k || plane <= heap.peek().unwrap().0 {
                    self.search(far, q, k, heap);
                }
            }
        }
    }
}

/// Seeded index sample; pads with replacement when `count > n_points`.
pub fn random_sample(n_points: usize, count: usize, seed: u64) -> Vec<usize> {
    let mut rng = seed::rng(seed);
    if n_points == 0 {
        return Vec::new();
    }
    if count <= n_points {
        return rand::seq::index::sample(&mut rng, n_points, count).into_vec();
    }
    let mut out: Vec<usize> = (0..n_points).collect();
    out.extend((0..count - n_points).map(|_| rng.gen_range(0..n_points)));
    rand::seq::SliceRandom::shuffle(out.as_mut_slice(), &mut rng);
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PatchConfig {
    pub k: usize,
    pub np: usize,
    pub seed: u64,
}

impl Default for PatchConfig {
    fn default() -> Self {
        Self {
            k: 16,
            np: 14900,
            seed: 0,
        }
    }
}

impl PatchConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k == 0 || self.np == 0 {
            return Err(Error::InvalidConfig("K and Np must be positive".into()));
        }
        Ok(())
    }
}

/// `K x Np x 6` patch tensor in single precision, plus patch centers.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchSet {
    k: usize,
    np: usize,
    data: Vec<f32>,
    centers: Vec<[f32; 3]>,
    source_indices: Option<Vec<usize>>,
}

const PATCH_MAGIC: &[u8; 4] = b"PSTP";

impl PatchSet {
    /// Builds a patch set from raw rows; centers are taken from each patch's first row.
    pub fn from_data(k: usize, np: usize, data: Vec<f32>) -> Result<Self> {
        if k == 0 || np == 0 || data.len() != k * np * 6 {
            return Err(Error::shape(format!(
                "patch data has {} values, expected {k}x{np}x6",
                data.len()
            )));
        }
        let centers = (0..k)
            .map(|p| {
                let r = &data[p * np * 6..];
                [r[0], r[1], r[2]]
            })
            .collect();
        Ok(Self {
            k,
            np,
            data,
            centers,
            source_indices: None,
        })
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn np(&self) -> usize {
        self.np
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn centers(&self) -> &[[f32; 3]] {
        &self.centers
    }

    /// Row-major `K x Np` indices into the source cloud, when known.
    pub fn source_indices(&self) -> Option<&[usize]> {
        self.source_indices.as_deref()
    }

    pub fn patch(&self, p: usize) -> &[f32] {
        &self.data[p * self.np * 6..(p + 1) * self.np * 6]
    }

    pub fn point(&self, p: usize, i: usize) -> [f32; 6] {
        let o = (p * self.np + i) * 6;
        self.data[o..o + 6].try_into().unwrap()
    }

    /// Reorders patches: output patch `j` is input patch `perm[j]`.
    pub fn permuted(&self, perm: &[usize]) -> Self {
        let mut data = Vec::with_capacity(self.data.len());
        for &p in perm {
            data.extend_from_slice(self.patch(p));
        }
        let source_indices = self.source_indices.as_ref().map(|s| {
            perm.iter()
                .flat_map(|&p| s[p * self.np..(p + 1) * self.np].iter().copied())
                .collect()
        });
        Self {
            k: self.k,
            np: self.np,
            data,
            centers: perm.iter().map(|&p| self.centers[p]).collect(),
            source_indices,
        }
    }

    /// Writes the flat binary form: `PSTP`, `u32 K`, `u32 Np`, then
    /// little-endian `f32` rows.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = BufWriter::new(File::create(path.as_ref())?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        w.write_all(PATCH_MAGIC)?;
        w.write_all(&(self.k as u32).to_le_bytes())?;
        w.write_all(&(self.np as u32).to_le_bytes())?;
        let mut buf = Vec::with_capacity(self.data.len() * 4);
        for v in &self.data {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&buf)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let mut bytes = Vec::new();
        BufReader::new(File::open(path.as_ref())?).read_to_end(&mut bytes)?;
        Self::from_bytes(&bytes)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 12 || &bytes[..4] != PATCH_MAGIC {
            return Err(Error::Format("missing PSTP magic".into()));
        }
        let k = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
        let np = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        let body = &bytes[12..];
        if body.len() != k * np * 6 * 4 {
            return Err(Error::Format(format!(
                "PSTP body has {} bytes, header implies {}",
                body.len(),
                k * np * 24
            )));
        }
        let data = body
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Self::from_data(k, np, data)
    }
}

/// Extracts `K` patches of `Np` points from a normalized cloud.
///
/// Centers come from farthest point sampling. Each patch lists the center's
/// nearest points in ascending distance order; clouds smaller than `Np` are
/// padded by seeded resampling with replacement.
pub fn extract_patches(cloud: &PointCloud, config: &PatchConfig) -> Result<PatchSet> {
    config.validate()?;
    let coords = cloud.coords();
    let n = coords.len();
    let fps_count = config.k.min(n);
    let mut centers = farthest_point_sampling(&coords, fps_count, seed::derive(config.seed, 1))?;
    if config.k > n {
        let mut rng = seed::rng(seed::derive(config.seed, 2));
        let extra: Vec<usize> = (0..config.k - n).map(|_| centers[rng.gen_range(0..n)]).collect();
        centers.extend(extra);
    }
    let take = config.np.min(n);
    let rows: Vec<Vec<usize>> = centers
        .par_iter()
        .enumerate()
        .map(|(p, &c)| {
            let mut idx = knn(&coords, &coords[c], take)?;
            if config.np > n {
                let mut rng = seed::rng(seed::derive(config.seed, 100 + p as u64));
                idx.extend((0..config.np - n).map(|_| rng.gen_range(0..n)));
            }
            Ok(idx)
        })
        .collect::<Result<_>>()?;
    let points = cloud.points();
    let mut data = Vec::with_capacity(config.k * config.np * 6);
    for row in &rows {
        for &i in row {
            data.extend(points[i].iter().map(|&v| v as f32));
        }
    }
    let mut set = PatchSet::from_data(config.k, config.np, data)?;
    set.source_indices = Some(rows.into_iter().flatten().collect());
    Ok(set)
}
