//! Ground-truth collection by joint-space grid sampling, the binary dataset
//! file, and position quantization.

use std::collections::BTreeMap;
use std::hash::{Hash, Hasher};
use std::io::{self, BufRead, BufReader, BufWriter, Read, Write};
use std::time::SystemTime;

use nalgebra::{Quaternion, UnitQuaternion, Vector3};
use rayon::prelude::*;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::kinematics::{forward_kinematics, JointVector, KinematicChain, Pose};

pub const DATASET_MAGIC: &[u8; 8] = b"SIKDSET\0";
pub const DATASET_VERSION: u32 = 1;

/// Default quantization resolution for grouping positions, in meters.
pub const DEFAULT_RESOLUTION: f64 = 0.01;

const CHUNK: usize = 1 << 14;

#[derive(Clone, Debug, PartialEq)]
pub struct GroundTruthRecord {
    pub q: JointVector,
    pub pose: Pose,
}

#[derive(Clone, Debug)]
pub struct Dataset {
    pub chain_id: String,
    pub step_degrees: f64,
    pub joint_count: usize,
    pub records: Vec<GroundTruthRecord>,
    /// Set at collection or load time; not part of the file.
    pub created_at: SystemTime,
}

/// Sampled angles of one joint: `limit_min + k * step` for every `k` that
/// stays at or below `limit_max`. Never empty.
pub fn joint_grid(limit_min: f64, limit_max: f64, step_degrees: f64) -> Vec<f64> {
    let step = step_degrees.to_radians();
    let count = ((limit_max - limit_min) / step + 1e-9).floor().max(0.0) as usize + 1;
    (0..count).map(|k| limit_min + k as f64 * step).collect()
}

/// Lexicographic walk over the Cartesian product of per-joint grids; the last
/// joint varies fastest.
#[derive(Clone, Debug)]
pub struct GridIter {
    axes: Vec<Vec<f64>>,
    cursor: Vec<usize>,
    remaining: u64,
}

impl GridIter {
    pub fn total(&self) -> u64 {
        self.axes.iter().map(|a| a.len() as u64).product()
    }
}

impl Iterator for GridIter {
    type Item = JointVector;

    fn next(&mut self) -> Option<JointVector> {
        if self.remaining == 0 {
            return None;
        }
        let q = self.cursor.iter().zip(&self.axes).map(|(&i, a)| a[i]).collect();
        self.remaining -= 1;
        for j in (0..self.cursor.len()).rev() {
            self.cursor[j] += 1;
            if self.cursor[j] < self.axes[j].len() {
                break;
            }
            self.cursor[j] = 0;
        }
        Some(JointVector::from_vec_unchecked(q))
    }

    fn size_hint(&self) -> (usize, Option<usize>) {
        let n = usize::try_from(self.remaining).unwrap_or(usize::MAX);
        (n, Some(n))
    }
}

pub fn grid_sample(chain: &KinematicChain, step_degrees: f64) -> Result<GridIter> {
    if !(step_degrees > 0.0) {
        return Err(Error::InvalidArgument(format!("step_degrees must be positive, got {step_degrees}")));
    }
    let axes: Vec<Vec<f64>> = chain
        .joints()
        .iter()
        .map(|j| joint_grid(j.limit_min, j.limit_max, step_degrees))
        .collect();
    let remaining = axes.iter().map(|a| a.len() as u64).product();
    Ok(GridIter { cursor: vec![0; axes.len()], axes, remaining })
}

/// Number of configurations `grid_sample` will produce, without enumerating.
pub fn grid_len(chain: &KinematicChain, step_degrees: f64) -> Result<u64> {
    Ok(grid_sample(chain, step_degrees)?.total())
}

fn record_for(chain: &KinematicChain, q: JointVector) -> GroundTruthRecord {
    let pose = forward_kinematics(chain, &q).expect("grid vectors match chain dof");
    GroundTruthRecord { q, pose }
}

/// Streams FK-labelled grid records in lexicographic order. Chunks are
/// evaluated in parallel and emitted in order.
pub fn for_each_record(
    chain: &KinematicChain,
    step_degrees: f64,
    mut sink: impl FnMut(GroundTruthRecord) -> Result<()>,
) -> Result<()> {
    let mut grid = grid_sample(chain, step_degrees)?;
    loop {
        let chunk: Vec<JointVector> = grid.by_ref().take(CHUNK).collect();
        if chunk.is_empty() {
            return Ok(());
        }
        let records: Vec<GroundTruthRecord> =
            chunk.into_par_iter().map(|q| record_for(chain, q)).collect();
        for r in records {
            sink(r)?;
        }
    }
}

pub fn collect(chain: &KinematicChain, step_degrees: f64) -> Result<Dataset> {
    let mut records = Vec::with_capacity(grid_len(chain, step_degrees)? as usize);
    for_each_record(chain, step_degrees, |r| {
        records.push(r);
        Ok(())
    })?;
    Ok(Dataset {
        chain_id: chain.chain_id(),
        step_degrees,
        joint_count: chain.dof(),
        records,
        created_at: SystemTime::now(),
    })
}

/// Collects straight into a dataset file without materializing the records.
pub fn collect_to_writer<W: Write>(chain: &KinematicChain, step_degrees: f64, out: W) -> Result<u64> {
    let total = grid_len(chain, step_degrees)?;
    let mut writer = DatasetWriter::new(out, &chain.chain_id(), step_degrees, chain.dof(), total)?;
    for_each_record(chain, step_degrees, |r| writer.write_record(&r))?;
    writer.finish()?;
    Ok(total)
}

/// Serialized size in bytes of a dataset with the given shape.
pub fn file_size(joint_count: usize, record_count: u64) -> u64 {
    header_len() as u64 + record_count * record_len(joint_count) as u64
}

fn header_len() -> usize {
    8 + 4 + 32 + 8 + 4 + 8
}

fn record_len(joint_count: usize) -> usize {
    (joint_count + 7) * 8
}

pub struct DatasetWriter<W: Write> {
    out: BufWriter<W>,
    joint_count: usize,
    expected: u64,
    written: u64,
}

impl<W: Write> DatasetWriter<W> {
    pub fn new(out: W, chain_id: &str, step_degrees: f64, joint_count: usize, record_count: u64) -> Result<Self> {
        let hash = hex::decode(chain_id)
            .ok()
            .filter(|h| h.len() == 32)
            .ok_or_else(|| Error::Format(format!("chain id {chain_id:?} is not a sha256 hex digest")))?;
        let mut out = BufWriter::new(out);
        out.write_all(DATASET_MAGIC)?;
        out.write_all(&DATASET_VERSION.to_le_bytes())?;
        out.write_all(&hash)?;
        out.write_all(&step_degrees.to_le_bytes())?;
        out.write_all(&(joint_count as u32).to_le_bytes())?;
        out.write_all(&record_count.to_le_bytes())?;
        Ok(DatasetWriter { out, joint_count, expected: record_count, written: 0 })
    }

    pub fn write_record(&mut self, r: &GroundTruthRecord) -> Result<()> {
        if r.q.len() != self.joint_count {
            return Err(Error::DimensionMismatch { expected: self.joint_count, actual: r.q.len() });
        }
        for a in r.q.iter() {
            self.out.write_all(&a.to_le_bytes())?;
        }
        for c in r.pose.position.iter() {
            self.out.write_all(&c.to_le_bytes())?;
        }
        let quat = r.pose.orientation.quaternion();
        for c in [quat.w, quat.i, quat.j, quat.k] {
            self.out.write_all(&c.to_le_bytes())?;
        }
        self.written += 1;
        Ok(())
    }

    pub fn finish(mut self) -> Result<W> {
        if self.written != self.expected {
            return Err(Error::Format(format!(
                "header announced {} records, wrote {}",
                self.expected, self.written
            )));
        }
        self.out.flush()?;
        self.out.into_inner().map_err(|e| Error::Io(e.into_error()))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetHeader {
    pub chain_id: String,
    pub step_degrees: f64,
    pub joint_count: usize,
    pub record_count: u64,
}

/// Sequential reader over a dataset file.
pub struct DatasetReader<R: Read> {
    input: BufReader<R>,
    pub header: DatasetHeader,
    read: u64,
    buf: Vec<u8>,
}

fn read_exact<const N: usize>(r: &mut impl Read) -> Result<[u8; N]> {
    let mut b = [0u8; N];
    r.read_exact(&mut b)?;
    Ok(b)
}

impl<R: Read> DatasetReader<R> {
    pub fn new(input: R) -> Result<Self> {
        let mut input = BufReader::new(input);
        let magic: [u8; 8] = read_exact(&mut input)?;
        if &magic != DATASET_MAGIC {
            return Err(Error::Format("not a dataset file".into()));
        }
        let version = u32::from_le_bytes(read_exact(&mut input)?);
        if version != DATASET_VERSION {
            return Err(Error::Format(format!("unsupported dataset version {version}")));
        }
        let hash: [u8; 32] = read_exact(&mut input)?;
        let step_degrees = f64::from_le_bytes(read_exact(&mut input)?);
        let joint_count = u32::from_le_bytes(read_exact(&mut input)?) as usize;
        let record_count = u64::from_le_bytes(read_exact(&mut input)?);
        let header = DatasetHeader { chain_id: hex::encode(hash), step_degrees, joint_count, record_count };
        Ok(DatasetReader { input, buf: vec![0; record_len(joint_count)], header, read: 0 })
    }

    fn read_record(&mut self) -> Result<GroundTruthRecord> {
        self.input.read_exact(&mut self.buf)?;
        let vals: Vec<f64> = self
            .buf
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let n = self.header.joint_count;
        let q = JointVector::from_vec_unchecked(vals[..n].to_vec());
        let p = Vector3::new(vals[n], vals[n + 1], vals[n + 2]);
        let quat = UnitQuaternion::new_unchecked(Quaternion::new(vals[n + 3], vals[n + 4], vals[n + 5], vals[n + 6]));
        Ok(GroundTruthRecord { q, pose: Pose::new(p, quat) })
    }
}

impl<R: Read> Iterator for DatasetReader<R> {
    type Item = Result<GroundTruthRecord>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.read == self.header.record_count {
            return None;
        }
        self.read += 1;
        Some(self.read_record())
    }
}

impl Dataset {
    pub fn write_to<W: Write>(&self, out: W) -> Result<W> {
        let mut w = DatasetWriter::new(
            out,
            &self.chain_id,
            self.step_degrees,
            self.joint_count,
            self.records.len() as u64,
        )?;
        for r in &self.records {
            w.write_record(r)?;
        }
        w.finish()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        self.write_to(Vec::new()).expect("in-memory write")
    }

    pub fn read_from<R: Read>(input: R) -> Result<Self> {
        let reader = DatasetReader::new(input)?;
        let header = reader.header.clone();
        let records = reader.collect::<Result<Vec<_>>>()?;
        Ok(Dataset {
            chain_id: header.chain_id,
            step_degrees: header.step_degrees,
            joint_count: header.joint_count,
            records,
            created_at: SystemTime::now(),
        })
    }

    /// SHA-256 of the serialized dataset, hex encoded.
    pub fn content_hash(&self) -> String {
        let mut hasher = Sha256::new();
        let mut sink = HashWriter(&mut hasher);
        self.write_to(&mut sink).expect("hashing never fails");
        hex::encode(hasher.finalize())
    }

    /// CSV export for inspection: `q1..qn,x,y,z,qw,qx,qy,qz`.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut out = BufWriter::new(out);
        let mut cols: Vec<String> = (1..=self.joint_count).map(|i| format!("q{i}")).collect();
        cols.extend(["x", "y", "z", "qw", "qx", "qy", "qz"].map(String::from));
        writeln!(out, "{}", cols.join(","))?;
        for r in &self.records {
            let quat = r.pose.orientation.quaternion();
            let vals: Vec<String> = r
                .q
                .iter()
                .chain(r.pose.position.iter())
                .chain([quat.w, quat.i, quat.j, quat.k].iter())
                .map(|v| format!("{v:?}"))
                .collect();
            writeln!(out, "{}", vals.join(","))?;
        }
        out.flush()?;
        Ok(())
    }

    pub fn positions(&self) -> impl Iterator<Item = &Vector3<f64>> {
        self.records.iter().map(|r| &r.pose.position)
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }
}

/// Reads only the header of a dataset stream.
pub fn read_header<R: BufRead>(input: R) -> Result<DatasetHeader> {
    Ok(DatasetReader::new(input)?.header)
}

struct HashWriter<'a>(&'a mut Sha256);

impl Write for HashWriter<'_> {
    fn write(&mut self, buf: &[u8]) -> io::Result<usize> {
        self.0.update(buf);
        Ok(buf.len())
    }

    fn flush(&mut self) -> io::Result<()> {
        Ok(())
    }
}

/// Floor-grid cell of a position at a given resolution.
#[derive(Clone, Copy, Debug)]
pub struct PositionKey {
    pub cell: [i64; 3],
    pub resolution: f64,
}

impl PositionKey {
    pub fn cell_min(&self) -> Vector3<f64> {
        Vector3::new(self.cell[0] as f64, self.cell[1] as f64, self.cell[2] as f64) * self.resolution
    }
}

impl PartialEq for PositionKey {
    fn eq(&self, other: &Self) -> bool {
        self.cell == other.cell && self.resolution.to_bits() == other.resolution.to_bits()
    }
}

impl Eq for PositionKey {}

impl Hash for PositionKey {
    fn hash<H: Hasher>(&self, state: &mut H) {
        self.cell.hash(state);
        self.resolution.to_bits().hash(state);
    }
}

impl PartialOrd for PositionKey {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for PositionKey {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        self.cell
            .cmp(&other.cell)
            .then(self.resolution.total_cmp(&other.resolution))
    }
}

impl std::fmt::Display for PositionKey {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "({}, {}, {})@{}", self.cell[0], self.cell[1], self.cell[2], self.resolution)
    }
}

pub fn quantize(position: &Vector3<f64>, resolution: f64) -> PositionKey {
    let cell = [0, 1, 2].map(|i| (position[i] / resolution).floor() as i64);
    PositionKey { cell, resolution }
}

pub fn quantize_position(pose: &Pose, resolution: f64) -> Result<PositionKey> {
    if !(resolution > 0.0) {
        return Err(Error::InvalidArgument(format!("resolution must be positive, got {resolution}")));
    }
    Ok(quantize(&pose.position, resolution))
}

/// Partition of record indices by position cell, in key order.
pub fn group_by_position(dataset: &Dataset, resolution: f64) -> Result<BTreeMap<PositionKey, Vec<usize>>> {
    if dataset.is_empty() {
        return Err(Error::Empty("dataset"));
    }
    let mut groups: BTreeMap<PositionKey, Vec<usize>> = BTreeMap::new();
    for (i, r) in dataset.records.iter().enumerate() {
        groups.entry(quantize_position(&r.pose, resolution)?).or_default().push(i);
    }
    Ok(groups)
}
