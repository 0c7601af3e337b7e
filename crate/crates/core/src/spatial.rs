//! Exact nearest-neighbour KD-tree over dictionary positions, and the
//! posture dictionary itself.

use std::collections::BTreeMap;
use std::io::{Read, Write};

use nalgebra::Vector3;

use crate::dataset::{group_by_position, Dataset, PositionKey};
use crate::error::{Error, Result};
use crate::model::{
    auto_lambda, filter_distinct_positions, read_f64, read_f64s, read_hash, read_u32, write_f64s, write_hash,
    PostureIndex, SikModel,
};

pub const DICTIONARY_MAGIC: &[u8; 8] = b"SIKDICT\0";
pub const DICTIONARY_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug)]
struct Node {
    id: u32,
    axis: u8,
    left: Option<u32>,
    right: Option<u32>,
}

/// Balanced 3-D tree. Every point carries a stable id (its position in the
/// input) and the dictionary key it represents.
#[derive(Clone, Debug)]
pub struct KdTree {
    points: Vec<[f64; 3]>,
    keys: Vec<PositionKey>,
    nodes: Vec<Node>,
    root: Option<u32>,
}

/// Result of a nearest-neighbour query.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Neighbour {
    pub id: u32,
    pub key: PositionKey,
    pub distance: f64,
}

#[inline]
fn dist2(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    let dx = a[0] - b[0];
    let dy = a[1] - b[1];
    let dz = a[2] - b[2];
    dx * dx + dy * dy + dz * dz
}

/// (squared distance, id) ordering; lower id wins ties.
#[inline]
fn better(d2: f64, id: u32, best: (f64, u32)) -> bool {
    d2 < best.0 || (d2 == best.0 && id < best.1)
}

impl KdTree {
    pub fn build(items: Vec<(PositionKey, [f64; 3])>) -> Self {
        let (keys, points): (Vec<_>, Vec<_>) = items.into_iter().unzip();
        let mut tree = KdTree { points, keys, nodes: Vec::new(), root: None };
        let mut ids: Vec<u32> = (0..tree.points.len() as u32).collect();
        tree.nodes.reserve(ids.len());
        tree.root = tree.build_rec(&mut ids);
        tree
    }

    fn build_rec(&mut self, ids: &mut [u32]) -> Option<u32> {
        if ids.is_empty() {
            return None;
        }
        let axis = widest_axis(&self.points, ids);
        let mid = ids.len() / 2;
        let pts = &self.points;
        ids.select_nth_unstable_by(mid, |&a, &b| {
            pts[a as usize][axis].total_cmp(&pts[b as usize][axis]).then(a.cmp(&b))
        });
        let id = ids[mid];
        let slot = self.nodes.len() as u32;
        self.nodes.push(Node { id, axis: axis as u8, left: None, right: None });
        let (lo, hi) = ids.split_at_mut(mid);
        let left = self.build_rec(lo);
        let right = self.build_rec(&mut hi[1..]);
        let node = &mut self.nodes[slot as usize];
        node.left = left;
        node.right = right;
        Some(slot)
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn keys(&self) -> &[PositionKey] {
        &self.keys
    }

    pub fn point(&self, id: u32) -> [f64; 3] {
        self.points[id as usize]
    }

    /// Checks the splitting invariant on every node.
    pub fn is_ordered(&self) -> bool {
        fn subtree_ok(t: &KdTree, node: Option<u32>, axis: usize, split: f64, left: bool) -> bool {
            let Some(n) = node else { return true };
            let nd = t.nodes[n as usize];
            let v = t.points[nd.id as usize][axis];
            (if left { v <= split } else { v >= split })
                && subtree_ok(t, nd.left, axis, split, left)
                && subtree_ok(t, nd.right, axis, split, left)
        }
        self.nodes.iter().all(|n| {
            let split = self.points[n.id as usize][n.axis as usize];
            subtree_ok(self, n.left, n.axis as usize, split, true)
                && subtree_ok(self, n.right, n.axis as usize, split, false)
        })
    }

    pub fn nearest(&self, p: &Vector3<f64>) -> Result<Neighbour> {
        let root = self.root.ok_or(Error::Empty("kd-tree"))?;
        let q = [p.x, p.y, p.z];
        let mut best = (f64::INFINITY, u32::MAX);
        self.nearest_rec(root, &q, &mut best);
        Ok(Neighbour { id: best.1, key: self.keys[best.1 as usize], distance: best.0.sqrt() })
    }

    fn nearest_rec(&self, node: u32, q: &[f64; 3], best: &mut (f64, u32)) {
        let n = self.nodes[node as usize];
        let d2 = dist2(&self.points[n.id as usize], q);
        if better(d2, n.id, *best) {
            *best = (d2, n.id);
        }
        let diff = q[n.axis as usize] - self.points[n.id as usize][n.axis as usize];
        let (near, far) = if diff < 0.0 { (n.left, n.right) } else { (n.right, n.left) };
        if let Some(c) = near {
            self.nearest_rec(c, q, best);
        }
        if diff * diff <= best.0 {
            if let Some(c) = far {
                self.nearest_rec(c, q, best);
            }
        }
    }

    /// The `k` nearest points ordered by (distance, id).
    pub fn k_nearest(&self, p: &Vector3<f64>, k: usize) -> Vec<Neighbour> {
        let Some(root) = self.root else { return Vec::new() };
        if k == 0 {
            return Vec::new();
        }
        let q = [p.x, p.y, p.z];
        let mut found: Vec<(f64, u32)> = Vec::with_capacity(k + 1);
        self.knn_rec(root, &q, k, &mut found);
        found
            .into_iter()
            .map(|(d2, id)| Neighbour { id, key: self.keys[id as usize], distance: d2.sqrt() })
            .collect()
    }

    fn knn_rec(&self, node: u32, q: &[f64; 3], k: usize, found: &mut Vec<(f64, u32)>) {
        let n = self.nodes[node as usize];
        let d2 = dist2(&self.points[n.id as usize], q);
        if found.len() < k || better(d2, n.id, *found.last().unwrap()) {
            let pos = found.partition_point(|&(fd, fid)| !better(d2, n.id, (fd, fid)));
            found.insert(pos, (d2, n.id));
            found.truncate(k);
        }
        let diff = q[n.axis as usize] - self.points[n.id as usize][n.axis as usize];
        let (near, far) = if diff < 0.0 { (n.left, n.right) } else { (n.right, n.left) };
        if let Some(c) = near {
            self.knn_rec(c, q, k, found);
        }
        let bound = if found.len() < k { f64::INFINITY } else { found.last().unwrap().0 };
        if diff * diff <= bound {
            if let Some(c) = far {
                self.knn_rec(c, q, k, found);
            }
        }
    }

    /// Every point within `radius` (inclusive), ordered by (distance, id).
    pub fn within_radius(&self, p: &Vector3<f64>, radius: f64) -> Vec<Neighbour> {
        let Some(root) = self.root else { return Vec::new() };
        let q = [p.x, p.y, p.z];
        let r2 = radius * radius;
        let mut found = Vec::new();
        let mut stack = vec![root];
        while let Some(node) = stack.pop() {
            let n = self.nodes[node as usize];
            let d2 = dist2(&self.points[n.id as usize], &q);
            if d2 <= r2 {
                found.push((d2, n.id));
            }
            let diff = q[n.axis as usize] - self.points[n.id as usize][n.axis as usize];
            if let Some(c) = n.left {
                if diff <= 0.0 || diff * diff <= r2 {
                    stack.push(c);
                }
            }
            if let Some(c) = n.right {
                if diff >= 0.0 || diff * diff <= r2 {
                    stack.push(c);
                }
            }
        }
        found.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        found
            .into_iter()
            .map(|(d2, id)| Neighbour { id, key: self.keys[id as usize], distance: d2.sqrt() })
            .collect()
    }
}

fn widest_axis(points: &[[f64; 3]], ids: &[u32]) -> usize {
    let mut lo = [f64::INFINITY; 3];
    let mut hi = [f64::NEG_INFINITY; 3];
    for &i in ids {
        for a in 0..3 {
            lo[a] = lo[a].min(points[i as usize][a]);
            hi[a] = hi[a].max(points[i as usize][a]);
        }
    }
    (0..3).max_by(|&a, &b| (hi[a] - lo[a]).total_cmp(&(hi[b] - lo[b])).then(b.cmp(&a))).unwrap()
}

#[derive(Clone, Debug, PartialEq)]
pub struct DictionaryEntry {
    /// Centroid of the member positions.
    pub representative: Vector3<f64>,
    pub indices: Vec<PostureIndex>,
    /// Posterior variances alongside each index (variational models only).
    pub variances: Option<Vec<Vec<f64>>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PostureDictionary {
    pub entries: BTreeMap<PositionKey, DictionaryEntry>,
    pub lambda: f64,
    pub resolution: f64,
    pub model_hash: String,
    pub index_dim: usize,
}

impl PostureDictionary {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn lookup(&self, key: &PositionKey) -> Result<&[PostureIndex]> {
        self.entries
            .get(key)
            .map(|e| e.indices.as_slice())
            .ok_or_else(|| Error::MissingKey(key.to_string()))
    }

    pub fn entry(&self, key: &PositionKey) -> Result<&DictionaryEntry> {
        self.entries.get(key).ok_or_else(|| Error::MissingKey(key.to_string()))
    }

    /// Tree over representatives; ids follow key order.
    pub fn build_tree(&self) -> KdTree {
        KdTree::build(
            self.entries
                .iter()
                .map(|(k, e)| (*k, [e.representative.x, e.representative.y, e.representative.z]))
                .collect(),
        )
    }

    pub fn total_indices(&self) -> usize {
        self.entries.values().map(|e| e.indices.len()).sum()
    }

    pub fn write_to<W: Write>(&self, mut out: W) -> Result<W> {
        let has_var = self.entries.values().any(|e| e.variances.is_some());
        out.write_all(DICTIONARY_MAGIC)?;
        out.write_all(&DICTIONARY_VERSION.to_le_bytes())?;
        write_hash(&mut out, &self.model_hash)?;
        out.write_all(&self.lambda.to_le_bytes())?;
        out.write_all(&self.resolution.to_le_bytes())?;
        out.write_all(&(self.entries.len() as u64).to_le_bytes())?;
        out.write_all(&(self.index_dim as u32).to_le_bytes())?;
        out.write_all(&[has_var as u8])?;
        for (key, e) in &self.entries {
            for c in key.cell {
                out.write_all(&c.to_le_bytes())?;
            }
            write_f64s(&mut out, e.representative.iter().copied())?;
            out.write_all(&(e.indices.len() as u32).to_le_bytes())?;
            for idx in &e.indices {
                write_f64s(&mut out, idx.iter().copied())?;
            }
            if has_var {
                let vars = e.variances.as_ref().ok_or_else(|| Error::Format("mixed variance entries".into()))?;
                for v in vars {
                    write_f64s(&mut out, v.iter().copied())?;
                }
            }
        }
        Ok(out)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        self.write_to(Vec::new()).expect("in-memory write")
    }

    pub fn read_from<R: Read>(mut input: R) -> Result<Self> {
        let mut magic = [0u8; 8];
        input.read_exact(&mut magic)?;
        if &magic != DICTIONARY_MAGIC {
            return Err(Error::Format("not a dictionary file".into()));
        }
        let version = read_u32(&mut input)?;
        if version != DICTIONARY_VERSION {
            return Err(Error::Format(format!("unsupported dictionary version {version}")));
        }
        let model_hash = read_hash(&mut input)?;
        let lambda = read_f64(&mut input)?;
        let resolution = read_f64(&mut input)?;
        let mut b8 = [0u8; 8];
        input.read_exact(&mut b8)?;
        let count = u64::from_le_bytes(b8);
        let index_dim = read_u32(&mut input)? as usize;
        let mut flag = [0u8; 1];
        input.read_exact(&mut flag)?;
        let has_var = flag[0] != 0;
        let mut entries = BTreeMap::new();
        for _ in 0..count {
            let mut cell = [0i64; 3];
            for c in &mut cell {
                input.read_exact(&mut b8)?;
                *c = i64::from_le_bytes(b8);
            }
            let rep = read_f64s(&mut input, 3)?;
            let n = read_u32(&mut input)? as usize;
            if n == 0 {
                return Err(Error::Format("dictionary entry without indices".into()));
            }
            let indices = (0..n)
                .map(|_| read_f64s(&mut input, index_dim).map(PostureIndex))
                .collect::<Result<Vec<_>>>()?;
            let variances = if has_var {
                Some((0..n).map(|_| read_f64s(&mut input, index_dim)).collect::<Result<Vec<_>>>()?)
            } else {
                None
            };
            let key = PositionKey { cell, resolution };
            let entry = DictionaryEntry { representative: Vector3::new(rep[0], rep[1], rep[2]), indices, variances };
            if entries.insert(key, entry).is_some() {
                return Err(Error::Format(format!("duplicate key {key}")));
            }
        }
        Ok(PostureDictionary { entries, lambda, resolution, model_hash, index_dim })
    }
}

/// Encodes every record, groups by position cell, keeps λ-distinct indices
/// per cell and builds the tree over cell centroids. With `lambda = None`
/// the threshold is derived from the encoded indices.
pub fn build_dictionary(
    model: &SikModel,
    dataset: &Dataset,
    resolution: f64,
    lambda: Option<f64>,
    seed: u64,
) -> Result<(PostureDictionary, KdTree)> {
    if dataset.is_empty() {
        return Err(Error::Empty("dataset"));
    }
    if model.chain_id != dataset.chain_id {
        return Err(Error::ArtifactMismatch("model and dataset belong to different chains".into()));
    }
    if !model.dataset_hash.is_empty() && model.dataset_hash != dataset.content_hash() {
        return Err(Error::ArtifactMismatch("model was trained on a different dataset".into()));
    }
    let records: Vec<_> = dataset.records.iter().collect();
    let (indices, variances) = model.encode_records(&records)?;
    let lambda = match lambda {
        Some(l) if l > 0.0 => l,
        Some(l) => return Err(Error::InvalidArgument(format!("lambda must be positive, got {l}"))),
        None => auto_lambda(&indices, seed)?,
    };
    let groups = group_by_position(dataset, resolution)?;
    let mut entries = BTreeMap::new();
    for (key, members) in groups {
        let centroid = members
            .iter()
            .fold(Vector3::zeros(), |acc, &i| acc + dataset.records[i].pose.position)
            / members.len() as f64;
        let group: Vec<PostureIndex> = members.iter().map(|&i| indices[i].clone()).collect();
        let kept = filter_distinct_positions(&group, lambda)?;
        let entry = DictionaryEntry {
            representative: centroid,
            indices: kept.iter().map(|&k| group[k].clone()).collect(),
            variances: variances
                .as_ref()
                .map(|v| kept.iter().map(|&k| v[members[k]].clone()).collect()),
        };
        entries.insert(key, entry);
    }
    let dict = PostureDictionary {
        entries,
        lambda,
        resolution,
        model_hash: model.model_hash(),
        index_dim: model.index_dim,
    };
    let tree = dict.build_tree();
    Ok((dict, tree))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::quantize;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn tree_of(points: &[[f64; 3]]) -> KdTree {
        KdTree::build(points.iter().map(|p| (quantize(&Vector3::from(*p), 0.01), *p)).collect())
    }

    fn brute(points: &[[f64; 3]], q: &[f64; 3]) -> (u32, f64) {
        let mut best = (f64::INFINITY, u32::MAX);
        for (i, p) in points.iter().enumerate() {
            let d2 = (p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2) + (p[2] - q[2]).powi(2);
            if d2 < best.0 {
                best = (d2, i as u32);
            }
        }
        (best.1, best.0.sqrt())
    }

    #[test]
    fn stored_point_is_its_own_neighbour() {
        let pts = [[0.1, 0.2, 0.3], [1.0, 0.0, 0.0], [-0.5, 0.5, 0.1]];
        let tree = tree_of(&pts);
        for (i, p) in pts.iter().enumerate() {
            let n = tree.nearest(&Vector3::from(*p)).unwrap();
            assert_eq!(n.id, i as u32);
            assert_eq!(n.distance, 0.0);
        }
    }

    #[test]
    fn ties_go_to_lower_id() {
        let pts = [[1.0, 0.0, 0.0], [-1.0, 0.0, 0.0], [0.0, 3.0, 0.0]];
        let tree = tree_of(&pts);
        assert_eq!(tree.nearest(&Vector3::zeros()).unwrap().id, 0);
        let dup = [[0.5, 0.5, 0.5]; 6];
        let tree = tree_of(&dup);
        assert_eq!(tree.nearest(&Vector3::new(0.0, 0.1, 0.0)).unwrap().id, 0);
    }

    #[test]
    fn empty_tree_errors() {
        assert!(matches!(tree_of(&[]).nearest(&Vector3::zeros()), Err(Error::Empty(_))));
        assert!(tree_of(&[]).k_nearest(&Vector3::zeros(), 3).is_empty());
    }

    #[test]
    fn matches_linear_scan() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let pts: Vec<[f64; 3]> = (0..500).map(|_| [0, 1, 2].map(|_| rng.random_range(-1.0..1.0))).collect();
        let tree = tree_of(&pts);
        assert!(tree.is_ordered());
        for _ in 0..500 {
            let q = [0, 1, 2].map(|_| rng.random_range(-1.2..1.2));
            let n = tree.nearest(&Vector3::from(q)).unwrap();
            let (id, d) = brute(&pts, &q);
            assert_eq!(n.id, id);
            assert_eq!(n.distance, d);
        }
    }

    #[test]
    fn knn_and_radius_agree_with_sorting() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let pts: Vec<[f64; 3]> = (0..300).map(|_| [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), 0.0]).collect();
        let tree = tree_of(&pts);
        let q = Vector3::new(0.1, -0.2, 0.0);
        let mut all: Vec<(f64, u32)> = pts
            .iter()
            .enumerate()
            .map(|(i, p)| ((Vector3::from(*p) - q).norm_squared(), i as u32))
            .collect();
        all.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        let knn: Vec<u32> = tree.k_nearest(&q, 7).iter().map(|n| n.id).collect();
        assert_eq!(knn, all[..7].iter().map(|a| a.1).collect::<Vec<_>>());
        let r = 0.3;
        let within: Vec<u32> = tree.within_radius(&q, r).iter().map(|n| n.id).collect();
        let expect: Vec<u32> = all.iter().filter(|a| a.0 <= r * r).map(|a| a.1).collect();
        assert_eq!(within, expect);
    }

    #[test]
    fn lookup_missing_key() {
        let dict = PostureDictionary {
            entries: BTreeMap::new(),
            lambda: 0.1,
            resolution: 0.01,
            model_hash: String::new(),
            index_dim: 3,
        };
        let key = quantize(&Vector3::zeros(), 0.01);
        assert!(matches!(dict.lookup(&key), Err(Error::MissingKey(_))));
    }
}
