//! Conditional autoencoder models that learn a posture index.
//!
//! The encoder sees a goal together with one joint solution and compresses
//! them into a low-dimensional posture index; the decoder maps (goal, index)
//! back to joint angles. The deterministic variant trains on reconstruction
//! error alone. The variational variant predicts a mean and log-variance per
//! index component, samples through the reparameterization, and adds a KL
//! penalty towards the standard normal.

use std::io::{Read, Write};
use std::ops::Deref;

use ndarray::{concatenate, s, Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dataset::{Dataset, GroundTruthRecord};
use crate::error::{check_dim, Error, Result};
use crate::kinematics::{clamp_angles, JointVector, KinematicChain};
use crate::neuralnet::{adam_step, lr_at_epoch, sgd_step, Activation, AdamState, Gradients, Layer, Mlp, Optimizer, TrainConfig};
use crate::solver::{Goal, GoalMode};

pub const MODEL_MAGIC: &[u8; 8] = b"SIKMODEL";
pub const MODEL_VERSION: u32 = 1;

/// Floor applied to variances before taking square roots.
pub const VARIANCE_FLOOR: f64 = 1e-12;

/// Index dimensions below this tend not to fit the training data.
pub const MIN_RECOMMENDED_INDEX_DIM: usize = 3;

const LAMBDA_SAMPLE_PAIRS: usize = 10_000;
const LAMBDA_RMS_FRACTION: f64 = 0.25;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ModelMode {
    /// Plain conditional autoencoder.
    Deterministic,
    /// Conditional variational autoencoder.
    Variational,
}

/// Latent vector that selects one joint solution among many for a goal.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PostureIndex(pub Vec<f64>);

impl PostureIndex {
    pub fn distance(&self, other: &PostureIndex) -> f64 {
        self.0
            .iter()
            .zip(&other.0)
            .map(|(a, b)| (a - b).powi(2))
            .sum::<f64>()
            .sqrt()
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }
}

impl Deref for PostureIndex {
    type Target = [f64];

    fn deref(&self) -> &[f64] {
        &self.0
    }
}

impl From<Vec<f64>> for PostureIndex {
    fn from(v: Vec<f64>) -> Self {
        PostureIndex(v)
    }
}

/// Hidden-layer widths of both networks plus the index dimension. Output
/// widths follow from the mode, goal features and joint count.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Architecture {
    pub encoder_hidden: Vec<usize>,
    pub decoder_hidden: Vec<usize>,
    pub index_dim: usize,
}

impl Default for Architecture {
    fn default() -> Self {
        Architecture { encoder_hidden: vec![256, 256, 64], decoder_hidden: vec![128, 256, 64], index_dim: 4 }
    }
}

impl Architecture {
    /// The large configuration used for a 7-joint arm.
    pub fn panda_scale() -> Self {
        Architecture {
            encoder_hidden: vec![2048, 2048, 1024, 512],
            decoder_hidden: vec![512, 1024, 1024, 512],
            index_dim: 4,
        }
    }

    pub fn warnings(&self) -> Vec<String> {
        if self.index_dim < MIN_RECOMMENDED_INDEX_DIM {
            vec![format!(
                "index dimension {} is below {MIN_RECOMMENDED_INDEX_DIM}; training may stall",
                self.index_dim
            )]
        } else {
            Vec::new()
        }
    }
}

/// Suggested index dimension for an arm: two orientation-like components
/// plus one per redundant joint beyond six.
pub fn suggested_index_dim(dof: usize) -> usize {
    (2 + dof.saturating_sub(6)).max(MIN_RECOMMENDED_INDEX_DIM)
}

/// Per-feature affine maps into roughly [-1, 1].
#[derive(Clone, Debug, PartialEq)]
pub struct Normalization {
    pub goal_offset: Vec<f64>,
    pub goal_scale: Vec<f64>,
    pub angle_offset: Vec<f64>,
    pub angle_scale: Vec<f64>,
}

fn centered(min: f64, max: f64) -> (f64, f64) {
    let half = (max - min) / 2.0;
    ((max + min) / 2.0, if half > 0.0 { half } else { 1.0 })
}

impl Normalization {
    /// Goals by dataset min/max, angles by joint limits.
    pub fn fit(goal_features: &Array2<f64>, limits: &[(f64, f64)]) -> Self {
        let (goal_offset, goal_scale) = goal_features
            .axis_iter(Axis(1))
            .map(|col| {
                let lo = col.iter().copied().fold(f64::INFINITY, f64::min);
                let hi = col.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                centered(lo, hi)
            })
            .unzip();
        let (angle_offset, angle_scale) = limits.iter().map(|&(lo, hi)| centered(lo, hi)).unzip();
        Normalization { goal_offset, goal_scale, angle_offset, angle_scale }
    }

    fn goals(&self, raw: &mut Array2<f64>) {
        for (mut col, (o, s)) in raw.axis_iter_mut(Axis(1)).zip(self.goal_offset.iter().zip(&self.goal_scale)) {
            col.mapv_inplace(|v| (v - o) / s);
        }
    }

    fn angles(&self, raw: &mut Array2<f64>) {
        for (mut col, (o, s)) in raw.axis_iter_mut(Axis(1)).zip(self.angle_offset.iter().zip(&self.angle_scale)) {
            col.mapv_inplace(|v| (v - o) / s);
        }
    }

    fn denormalize_angles(&self, normalized: &[f64]) -> Vec<f64> {
        normalized
            .iter()
            .zip(self.angle_offset.iter().zip(&self.angle_scale))
            .map(|(v, (o, s))| v * s + o)
            .collect()
    }

    fn is_valid(&self) -> bool {
        self.goal_offset.iter().chain(&self.angle_offset).all(|v| v.is_finite())
            && self
                .goal_scale
                .iter()
                .chain(&self.angle_scale)
                .all(|v| v.is_finite() && *v != 0.0)
    }
}

/// Decoded joint solution.
#[derive(Clone, Debug, PartialEq)]
pub struct Decoded {
    pub q: JointVector,
    /// Whether the raw decoder output left the joint limits.
    pub clamped: bool,
}

/// Normalized training batch.
#[derive(Clone, Debug)]
pub struct Batch {
    pub goals: Array2<f64>,
    pub angles: Array2<f64>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.goals.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn select(&self, rows: &[usize]) -> Batch {
        Batch { goals: self.goals.select(Axis(0), rows), angles: self.angles.select(Axis(0), rows) }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub reconstruction: f64,
    pub kl: f64,
}

#[derive(Clone, Debug)]
pub struct ModelGradients {
    pub encoder: Gradients,
    pub decoder: Gradients,
}

/// Where the reparameterization noise comes from during training.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NoiseSource {
    /// Standard normal draws from the run's seeded noise stream.
    Gaussian,
    /// All-zero noise: the index is the encoder mean.
    Zero,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub learning_rate: f64,
    pub loss: f64,
    pub reconstruction: f64,
    pub kl: f64,
}

#[derive(Clone, Debug, Default)]
pub struct TrainingLog {
    pub epochs: Vec<EpochLog>,
    /// Total loss of every optimizer step, in order.
    pub batch_losses: Vec<f64>,
}

impl TrainingLog {
    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<()> {
        writeln!(out, "epoch,learning_rate,loss,reconstruction,kl")?;
        for e in &self.epochs {
            writeln!(out, "{},{:?},{:?},{:?},{:?}", e.epoch, e.learning_rate, e.loss, e.reconstruction, e.kl)?;
        }
        Ok(())
    }

    pub fn final_loss(&self) -> Option<f64> {
        self.epochs.last().map(|e| e.loss)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SikModel {
    pub mode: ModelMode,
    pub goal_mode: GoalMode,
    pub joint_count: usize,
    pub index_dim: usize,
    pub encoder: Mlp,
    pub decoder: Mlp,
    pub norm: Normalization,
    pub limits: Vec<(f64, f64)>,
    pub chain_id: String,
    pub dataset_hash: String,
    /// Distinctness threshold used when the dictionary was built.
    pub lambda: Option<f64>,
}

pub fn record_goal_features(record: &GroundTruthRecord, goal_mode: GoalMode) -> Vec<f64> {
    let p = &record.pose.position;
    match goal_mode {
        GoalMode::Position => vec![p.x, p.y, p.z],
        GoalMode::PositionApproach => {
            let a = &record.pose.approach;
            vec![p.x, p.y, p.z, a.x, a.y, a.z]
        }
    }
}

fn rows_to_array(rows: &[Vec<f64>], cols: usize) -> Array2<f64> {
    Array2::from_shape_vec((rows.len(), cols), rows.concat()).expect("uniform row lengths")
}

/// Reparameterized sample `mean + sqrt(variance) ⊙ noise`.
pub fn reparameterize(mean: &[f64], variance: &[f64], noise: &[f64]) -> Result<PostureIndex> {
    check_dim(mean.len(), variance.len())?;
    check_dim(mean.len(), noise.len())?;
    if let Some(&v) = variance.iter().find(|v| !(**v > 0.0)) {
        return Err(Error::NonPositiveVariance(v));
    }
    Ok(PostureIndex(
        mean.iter()
            .zip(variance)
            .zip(noise)
            .map(|((m, v), e)| m + v.max(VARIANCE_FLOOR).sqrt() * e)
            .collect(),
    ))
}

/// `0.5 · Σ (mean² + variance − ln variance − 1)`
pub fn kl_to_standard_normal(mean: &[f64], variance: &[f64]) -> Result<f64> {
    check_dim(mean.len(), variance.len())?;
    if let Some(&v) = variance.iter().find(|v| !(**v > 0.0)) {
        return Err(Error::NonPositiveVariance(v));
    }
    Ok(0.5
        * mean
            .iter()
            .zip(variance)
            .map(|(m, v)| m * m + v - v.ln() - 1.0)
            .sum::<f64>())
}

/// Greedy distinctness filter: keeps an index when it is farther than
/// `lambda` from every index kept before it. Returns kept positions.
pub fn filter_distinct_positions(indices: &[PostureIndex], lambda: f64) -> Result<Vec<usize>> {
    if !(lambda > 0.0) {
        return Err(Error::InvalidArgument(format!("lambda must be positive, got {lambda}")));
    }
    let mut kept: Vec<usize> = Vec::new();
    for (i, idx) in indices.iter().enumerate() {
        if kept.iter().all(|&k| indices[k].distance(idx) > lambda) {
            kept.push(i);
        }
    }
    Ok(kept)
}

pub fn filter_distinct(indices: &[PostureIndex], lambda: f64) -> Result<Vec<PostureIndex>> {
    Ok(filter_distinct_positions(indices, lambda)?
        .into_iter()
        .map(|i| indices[i].clone())
        .collect())
}

/// Data-driven threshold: a quarter of the RMS distance over a seeded sample
/// of index pairs.
pub fn auto_lambda(indices: &[PostureIndex], seed: u64) -> Result<f64> {
    if indices.len() < 2 {
        return Err(Error::InvalidArgument("need at least two indices to pick lambda".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = indices.len();
    let mut sum_sq = 0.0;
    for _ in 0..LAMBDA_SAMPLE_PAIRS {
        let a = rng.random_range(0..n);
        let mut b = rng.random_range(0..n - 1);
        if b >= a {
            b += 1;
        }
        sum_sq += indices[a].distance(&indices[b]).powi(2);
    }
    let rms = (sum_sq / LAMBDA_SAMPLE_PAIRS as f64).sqrt();
    Ok((LAMBDA_RMS_FRACTION * rms).max(VARIANCE_FLOOR))
}

impl SikModel {
    /// Untrained model with He-initialized networks. Initialization draws
    /// encoder weights then decoder weights from `seed`; the variational
    /// log-variance head comes from a separate stream so both modes share
    /// every other initial parameter.
    pub fn initialize(
        mode: ModelMode,
        goal_mode: GoalMode,
        chain: &KinematicChain,
        arch: &Architecture,
        norm: Normalization,
        seed: u64,
    ) -> Result<Self> {
        let n = chain.dof();
        let gd = goal_mode.feature_dim();
        let d = arch.index_dim;
        if d == 0 {
            return Err(Error::InvalidArgument("index dimension must be positive".into()));
        }
        check_dim(gd, norm.goal_offset.len())?;
        check_dim(n, norm.angle_offset.len())?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let enc_dims: Vec<usize> = std::iter::once(gd + n)
            .chain(arch.encoder_hidden.iter().copied())
            .chain(std::iter::once(d))
            .collect();
        let mut encoder = Mlp::he_uniform(&enc_dims, &mut rng)?;
        let dec_dims: Vec<usize> = std::iter::once(gd + d)
            .chain(arch.decoder_hidden.iter().copied())
            .chain(std::iter::once(n))
            .collect();
        let decoder = Mlp::he_uniform(&dec_dims, &mut rng)?;
        if mode == ModelMode::Variational {
            let mut head_rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
            let last = encoder.layers.last_mut().expect("encoder has layers");
            let fan_in = last.inputs();
            let bound = (6.0 / fan_in as f64).sqrt();
            let head = Array2::from_shape_simple_fn((d, fan_in), || head_rng.random_range(-bound..bound));
            last.weights = concatenate![Axis(0), last.weights, head];
            last.bias = ndarray::Array1::zeros(2 * d);
        }
        Ok(SikModel {
            mode,
            goal_mode,
            joint_count: n,
            index_dim: d,
            encoder,
            decoder,
            norm,
            limits: chain.limits(),
            chain_id: chain.chain_id(),
            dataset_hash: String::new(),
            lambda: None,
        })
    }

    pub fn goal_dim(&self) -> usize {
        self.goal_mode.feature_dim()
    }

    pub fn check_consistency(&self) -> Result<()> {
        let gd = self.goal_dim();
        let n = self.joint_count;
        let d = self.index_dim;
        let enc_out = match self.mode {
            ModelMode::Deterministic => d,
            ModelMode::Variational => 2 * d,
        };
        let ok = self.encoder.input_dim() == gd + n
            && self.encoder.output_dim() == enc_out
            && self.decoder.input_dim() == gd + d
            && self.decoder.output_dim() == n
            && self.limits.len() == n
            && self.norm.goal_offset.len() == gd
            && self.norm.goal_scale.len() == gd
            && self.norm.angle_offset.len() == n
            && self.norm.angle_scale.len() == n
            && self.norm.is_valid();
        if ok {
            Ok(())
        } else {
            Err(Error::Format("model dimensions or normalization are inconsistent".into()))
        }
    }

    fn goal_row(&self, goal: &Goal) -> Result<Vec<f64>> {
        goal.features(self.goal_mode)
    }

    /// Normalized batch from dataset records.
    pub fn batch_from_records<'a>(&self, records: impl IntoIterator<Item = &'a GroundTruthRecord>) -> Result<Batch> {
        let mut goals = Vec::new();
        let mut angles = Vec::new();
        for r in records {
            check_dim(self.joint_count, r.q.len())?;
            goals.push(record_goal_features(r, self.goal_mode));
            angles.push(r.q.to_vec());
        }
        self.normalized_batch(&goals, &angles)
    }

    fn normalized_batch(&self, goals: &[Vec<f64>], angles: &[Vec<f64>]) -> Result<Batch> {
        let mut g = rows_to_array(goals, self.goal_dim());
        let mut a = rows_to_array(angles, self.joint_count);
        self.norm.goals(&mut g);
        self.norm.angles(&mut a);
        Ok(Batch { goals: g, angles: a })
    }

    fn encoder_input(&self, batch: &Batch) -> Array2<f64> {
        concatenate![Axis(1), batch.goals, batch.angles]
    }

    fn require(&self, mode: ModelMode) -> Result<()> {
        if self.mode == mode {
            Ok(())
        } else {
            Err(Error::ModeMismatch(format!("operation needs a {mode:?} model, this one is {:?}", self.mode)))
        }
    }

    fn single_batch(&self, goal: &Goal, q: &[f64]) -> Result<Batch> {
        check_dim(self.joint_count, q.len())?;
        self.normalized_batch(&[self.goal_row(goal)?], &[q.to_vec()])
    }

    /// Posture index of a (goal, solution) pair; deterministic models only.
    pub fn encode(&self, goal: &Goal, q: &[f64]) -> Result<PostureIndex> {
        self.require(ModelMode::Deterministic)?;
        let batch = self.single_batch(goal, q)?;
        let out = self.encoder.predict(self.encoder_input(&batch).view())?;
        Ok(PostureIndex(out.row(0).to_vec()))
    }

    /// Mean and variance of the posterior; variational models only.
    pub fn encode_distribution(&self, goal: &Goal, q: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        self.require(ModelMode::Variational)?;
        let batch = self.single_batch(goal, q)?;
        let out = self.encoder.predict(self.encoder_input(&batch).view())?;
        let d = self.index_dim;
        let mean = out.slice(s![0, ..d]).to_vec();
        let variance = out.slice(s![0, d..]).iter().map(|v| v.exp()).collect();
        Ok((mean, variance))
    }

    /// Index used for the dictionary (the mean for variational models),
    /// together with the variance when there is one.
    pub fn encode_records(&self, records: &[&GroundTruthRecord]) -> Result<(Vec<PostureIndex>, Option<Vec<Vec<f64>>>)> {
        if records.is_empty() {
            return Ok((Vec::new(), None));
        }
        let batch = self.batch_from_records(records.iter().copied())?;
        let out = self.encoder.predict(self.encoder_input(&batch).view())?;
        let d = self.index_dim;
        let means = out.rows().into_iter().map(|r| PostureIndex(r.slice(s![..d]).to_vec())).collect();
        let variances = (self.mode == ModelMode::Variational).then(|| {
            out.rows()
                .into_iter()
                .map(|r| r.slice(s![d..]).iter().map(|v| v.exp()).collect())
                .collect()
        });
        Ok((means, variances))
    }

    /// Joint angles for one goal under each of several indices.
    pub fn decode_many(&self, goal: &Goal, indices: &[PostureIndex]) -> Result<Vec<Decoded>> {
        let mut goal_row = self.goal_row(goal)?;
        for ((v, o), s) in goal_row.iter_mut().zip(&self.norm.goal_offset).zip(&self.norm.goal_scale) {
            *v = (*v - o) / s;
        }
        let gd = self.goal_dim();
        let d = self.index_dim;
        let mut input = Array2::zeros((indices.len(), gd + d));
        for (r, idx) in indices.iter().enumerate() {
            check_dim(d, idx.dim())?;
            for (c, v) in goal_row.iter().chain(idx.iter()).enumerate() {
                input[(r, c)] = *v;
            }
        }
        let out = self.decoder.predict(input.view())?;
        out.rows()
            .into_iter()
            .map(|row| {
                let raw = self.norm.denormalize_angles(row.as_slice().expect("contiguous row"));
                let (q, clamped) = clamp_angles(&self.limits, &raw)?;
                Ok(Decoded { q, clamped })
            })
            .collect()
    }

    pub fn decode(&self, goal: &Goal, index: &PostureIndex) -> Result<Decoded> {
        Ok(self.decode_many(goal, std::slice::from_ref(index))?.remove(0))
    }

    /// Loss and parameter gradients on a normalized batch. `noise` is used
    /// only by variational models; `None` means zero noise.
    pub fn loss_and_gradients(
        &self,
        batch: &Batch,
        noise: Option<ArrayView2<f64>>,
        beta_kl: f64,
    ) -> Result<(LossBreakdown, ModelGradients)> {
        let (loss, grads) = self.evaluate(batch, noise, beta_kl, true)?;
        Ok((loss, grads.expect("gradients requested")))
    }

    pub fn loss(&self, batch: &Batch, noise: Option<ArrayView2<f64>>, beta_kl: f64) -> Result<LossBreakdown> {
        Ok(self.evaluate(batch, noise, beta_kl, false)?.0)
    }

    fn evaluate(
        &self,
        batch: &Batch,
        noise: Option<ArrayView2<f64>>,
        beta_kl: f64,
        want_grads: bool,
    ) -> Result<(LossBreakdown, Option<ModelGradients>)> {
        let b = batch.len();
        if b == 0 {
            return Err(Error::Empty("batch"));
        }
        let d = self.index_dim;
        let n = self.joint_count;
        let (enc_out, enc_tape) = self.encoder.forward(self.encoder_input(batch).view())?;

        // index rows and, for variational models, the KL pieces
        let mut kl = 0.0;
        let (z, std_noise) = match self.mode {
            ModelMode::Deterministic => (enc_out.clone(), None),
            ModelMode::Variational => {
                let eps = match noise {
                    Some(e) => {
                        if e.dim() != (b, d) {
                            return Err(Error::DimensionMismatch { expected: d, actual: e.ncols() });
                        }
                        e.to_owned()
                    }
                    None => Array2::zeros((b, d)),
                };
                let mean = enc_out.slice(s![.., ..d]);
                let logvar = enc_out.slice(s![.., d..]);
                let std = logvar.mapv(|lv| lv.exp().max(VARIANCE_FLOOR).sqrt());
                let z = &mean + &(&std * &eps);
                for (m, lv) in mean.iter().zip(logvar.iter()) {
                    kl += 0.5 * (m * m + lv.exp() - lv - 1.0);
                }
                kl /= b as f64;
                (z, Some((eps, std)))
            }
        };

        let dec_in = concatenate![Axis(1), batch.goals, z];
        let (pred, dec_tape) = self.decoder.forward(dec_in.view())?;
        let diff = &pred - &batch.angles;
        let scale = (b * n) as f64;
        let recon = diff.iter().map(|v| v * v).sum::<f64>() / scale;
        let total = if self.mode == ModelMode::Variational { recon + beta_kl * kl } else { recon };
        let loss = LossBreakdown { total, reconstruction: recon, kl };
        if !want_grads {
            return Ok((loss, None));
        }

        let dpred = diff.mapv(|v| 2.0 * v / scale);
        let (dec_grads, dec_in_grad) = self.decoder.backward(&dec_tape, dpred.view())?;
        let gd = self.goal_dim();
        let dz = dec_in_grad.slice(s![.., gd..]).to_owned();
        let enc_grad_out = match std_noise {
            None => dz,
            Some((eps, std)) => {
                let mut g = Array2::zeros((b, 2 * d));
                let bf = b as f64;
                for r in 0..b {
                    for c in 0..d {
                        let m = enc_out[(r, c)];
                        let lv = enc_out[(r, d + c)];
                        g[(r, c)] = dz[(r, c)] + beta_kl * m / bf;
                        g[(r, d + c)] =
                            dz[(r, c)] * eps[(r, c)] * 0.5 * std[(r, c)] + beta_kl * 0.5 * (lv.exp() - 1.0) / bf;
                    }
                }
                g
            }
        };
        let (enc_grads, _) = self.encoder.backward(&enc_tape, enc_grad_out.view())?;
        Ok((loss, Some(ModelGradients { encoder: enc_grads, decoder: dec_grads })))
    }

    /// Flattened encoder parameters followed by decoder parameters.
    pub fn flat_params(&self) -> Vec<f64> {
        let mut v = self.encoder.flat_params();
        v.extend(self.decoder.flat_params());
        v
    }

    pub fn param_mut(&mut self, index: usize) -> &mut f64 {
        let ne = self.encoder.param_count();
        if index < ne {
            self.encoder.param_mut(index)
        } else {
            self.decoder.param_mut(index - ne)
        }
    }

    // -- checkpoint -------------------------------------------------------

    pub fn write_to<W: Write>(&self, out: W) -> Result<W> {
        self.write_with_lambda(out, self.lambda)
    }

    fn write_with_lambda<W: Write>(&self, mut out: W, lambda: Option<f64>) -> Result<W> {
        out.write_all(MODEL_MAGIC)?;
        out.write_all(&MODEL_VERSION.to_le_bytes())?;
        out.write_all(&[mode_tag(self.mode), goal_mode_tag(self.goal_mode)])?;
        out.write_all(&(self.joint_count as u32).to_le_bytes())?;
        out.write_all(&(self.index_dim as u32).to_le_bytes())?;
        out.write_all(&lambda.unwrap_or(f64::NAN).to_le_bytes())?;
        write_hash(&mut out, &self.chain_id)?;
        write_hash(&mut out, &self.dataset_hash)?;
        for v in [&self.norm.goal_offset, &self.norm.goal_scale, &self.norm.angle_offset, &self.norm.angle_scale] {
            write_f64s(&mut out, v.iter().copied())?;
        }
        write_f64s(&mut out, self.limits.iter().flat_map(|&(a, b)| [a, b]))?;
        write_mlp(&mut out, &self.encoder)?;
        write_mlp(&mut out, &self.decoder)?;
        Ok(out)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        self.write_to(Vec::new()).expect("in-memory write")
    }

    pub fn read_from<R: Read>(mut input: R) -> Result<Self> {
        let mut magic = [0u8; 8];
        input.read_exact(&mut magic)?;
        if &magic != MODEL_MAGIC {
            return Err(Error::Format("not a model checkpoint".into()));
        }
        let version = read_u32(&mut input)?;
        if version != MODEL_VERSION {
            return Err(Error::Format(format!("unsupported model version {version}")));
        }
        let mut tags = [0u8; 2];
        input.read_exact(&mut tags)?;
        let mode = match tags[0] {
            0 => ModelMode::Deterministic,
            1 => ModelMode::Variational,
            t => return Err(Error::Format(format!("unknown mode tag {t}"))),
        };
        let goal_mode = match tags[1] {
            3 => GoalMode::Position,
            6 => GoalMode::PositionApproach,
            t => return Err(Error::Format(format!("unknown goal mode tag {t}"))),
        };
        let joint_count = read_u32(&mut input)? as usize;
        let index_dim = read_u32(&mut input)? as usize;
        let lambda = read_f64(&mut input)?;
        let chain_id = read_hash(&mut input)?;
        let dataset_hash = read_hash(&mut input)?;
        let gd = goal_mode.feature_dim();
        let norm = Normalization {
            goal_offset: read_f64s(&mut input, gd)?,
            goal_scale: read_f64s(&mut input, gd)?,
            angle_offset: read_f64s(&mut input, joint_count)?,
            angle_scale: read_f64s(&mut input, joint_count)?,
        };
        let flat = read_f64s(&mut input, 2 * joint_count)?;
        let limits = flat.chunks_exact(2).map(|c| (c[0], c[1])).collect();
        let encoder = read_mlp(&mut input)?;
        let decoder = read_mlp(&mut input)?;
        let model = SikModel {
            mode,
            goal_mode,
            joint_count,
            index_dim,
            encoder,
            decoder,
            norm,
            limits,
            chain_id,
            dataset_hash,
            lambda: (!lambda.is_nan()).then_some(lambda),
        };
        model.check_consistency()?;
        Ok(model)
    }

    pub fn architecture(&self) -> Architecture {
        let hidden = |m: &Mlp| {
            let d = m.dims();
            d[1..d.len() - 1].to_vec()
        };
        Architecture {
            encoder_hidden: hidden(&self.encoder),
            decoder_hidden: hidden(&self.decoder),
            index_dim: self.index_dim,
        }
    }

    /// Identity of the trained networks; independent of the stored lambda.
    pub fn model_hash(&self) -> String {
        let bytes = self.write_with_lambda(Vec::new(), None).expect("in-memory write");
        hex::encode(Sha256::digest(&bytes))
    }
}

fn mode_tag(mode: ModelMode) -> u8 {
    match mode {
        ModelMode::Deterministic => 0,
        ModelMode::Variational => 1,
    }
}

fn goal_mode_tag(mode: GoalMode) -> u8 {
    mode.feature_dim() as u8
}

pub(crate) fn write_hash<W: Write>(out: &mut W, hex_digest: &str) -> Result<()> {
    let bytes = if hex_digest.is_empty() {
        vec![0u8; 32]
    } else {
        hex::decode(hex_digest)
            .ok()
            .filter(|b| b.len() == 32)
            .ok_or_else(|| Error::Format(format!("{hex_digest:?} is not a sha256 digest")))?
    };
    out.write_all(&bytes)?;
    Ok(())
}

pub(crate) fn read_hash<R: Read>(input: &mut R) -> Result<String> {
    let mut b = [0u8; 32];
    input.read_exact(&mut b)?;
    Ok(if b == [0u8; 32] { String::new() } else { hex::encode(b) })
}

pub(crate) fn read_u32<R: Read>(input: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    input.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

pub(crate) fn read_f64<R: Read>(input: &mut R) -> Result<f64> {
    let mut b = [0u8; 8];
    input.read_exact(&mut b)?;
    Ok(f64::from_le_bytes(b))
}

pub(crate) fn read_f64s<R: Read>(input: &mut R, count: usize) -> Result<Vec<f64>> {
    (0..count).map(|_| read_f64(input)).collect()
}

pub(crate) fn write_f64s<W: Write>(out: &mut W, values: impl Iterator<Item = f64>) -> Result<()> {
    for v in values {
        out.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

/// Architecture descriptor (layer count, dims, activation tags) followed by
/// row-major weights and biases.
fn write_mlp<W: Write>(out: &mut W, mlp: &Mlp) -> Result<()> {
    let dims = mlp.dims();
    out.write_all(&(mlp.layers.len() as u32).to_le_bytes())?;
    for d in dims {
        out.write_all(&(d as u32).to_le_bytes())?;
    }
    out.write_all(&[mlp.hidden_activation.tag(), mlp.output_activation.tag()])?;
    for l in &mlp.layers {
        write_f64s(out, l.weights.iter().copied())?;
        write_f64s(out, l.bias.iter().copied())?;
    }
    Ok(())
}

fn read_mlp<R: Read>(input: &mut R) -> Result<Mlp> {
    let count = read_u32(input)? as usize;
    if count == 0 || count > 64 {
        return Err(Error::Format(format!("implausible layer count {count}")));
    }
    let dims = (0..=count).map(|_| read_u32(input).map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
    let mut tags = [0u8; 2];
    input.read_exact(&mut tags)?;
    let mut layers = Vec::with_capacity(count);
    for w in dims.windows(2) {
        let weights = Array2::from_shape_vec((w[1], w[0]), read_f64s(input, w[0] * w[1])?)
            .map_err(|e| Error::Format(e.to_string()))?;
        let bias = ndarray::Array1::from(read_f64s(input, w[1])?);
        layers.push(Layer { weights, bias });
    }
    Mlp::from_layers(layers, Activation::from_tag(tags[0])?, Activation::from_tag(tags[1])?)
}

/// What to train: network shape, model mode and goal features.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelSpec {
    pub mode: ModelMode,
    pub goal_mode: GoalMode,
    pub arch: Architecture,
}

/// Trains a model on a dataset collected for `chain`.
pub fn train(
    dataset: &Dataset,
    chain: &KinematicChain,
    spec: &ModelSpec,
    config: &TrainConfig,
    noise: NoiseSource,
) -> Result<(SikModel, TrainingLog)> {
    config.validate()?;
    if dataset.is_empty() {
        return Err(Error::Empty("dataset"));
    }
    if dataset.chain_id != chain.chain_id() {
        return Err(Error::ArtifactMismatch("dataset was collected for a different chain".into()));
    }
    check_dim(chain.dof(), dataset.joint_count)?;
    let goal_rows: Vec<Vec<f64>> = dataset
        .records
        .iter()
        .map(|r| record_goal_features(r, spec.goal_mode))
        .collect();
    let raw_goals = rows_to_array(&goal_rows, spec.goal_mode.feature_dim());
    let norm = Normalization::fit(&raw_goals, &chain.limits());
    let mut model = SikModel::initialize(spec.mode, spec.goal_mode, chain, &spec.arch, norm, config.seed)?;
    model.dataset_hash = dataset.content_hash();
    let data = model.batch_from_records(&dataset.records)?;

    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(1));
    let mut noise_rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(2));
    let mut enc_state = AdamState::new(&model.encoder);
    let mut dec_state = AdamState::new(&model.decoder);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut log = TrainingLog::default();
    let d = model.index_dim;

    for epoch in 0..config.epochs {
        let lr = lr_at_epoch(config, epoch);
        order.shuffle(&mut shuffle_rng);
        let mut sums = LossBreakdown::default();
        for rows in order.chunks(config.batch_size) {
            let batch = data.select(rows);
            let eps = match (model.mode, noise) {
                (ModelMode::Variational, NoiseSource::Gaussian) => {
                    Some(Array2::from_shape_simple_fn((rows.len(), d), || noise_rng.sample(StandardNormal)))
                }
                _ => None,
            };
            let (loss, grads) = model.loss_and_gradients(&batch, eps.as_ref().map(|e| e.view()), config.beta_kl)?;
            if !loss.total.is_finite() {
                return Err(Error::Diverged { epoch, loss: loss.total });
            }
            match config.optimizer {
                Optimizer::Adam => {
                    adam_step(&mut model.encoder, &grads.encoder, &mut enc_state, lr);
                    adam_step(&mut model.decoder, &grads.decoder, &mut dec_state, lr);
                }
                Optimizer::Sgd => {
                    sgd_step(&mut model.encoder, &grads.encoder, lr);
                    sgd_step(&mut model.decoder, &grads.decoder, lr);
                }
            }
            let w = rows.len() as f64;
            sums.total += loss.total * w;
            sums.reconstruction += loss.reconstruction * w;
            sums.kl += loss.kl * w;
            log.batch_losses.push(loss.total);
        }
        let count = data.len() as f64;
        log.epochs.push(EpochLog {
            epoch,
            learning_rate: lr,
            loss: sums.total / count,
            reconstruction: sums.reconstruction / count,
            kl: sums.kl / count,
        });
    }
    if !model.encoder.all_finite() || !model.decoder.all_finite() {
        return Err(Error::Diverged { epoch: config.epochs, loss: f64::NAN });
    }
    Ok((model, log))
}

pub fn train_sik(
    dataset: &Dataset,
    chain: &KinematicChain,
    goal_mode: GoalMode,
    arch: &Architecture,
    config: &TrainConfig,
) -> Result<(SikModel, TrainingLog)> {
    let spec = ModelSpec { mode: ModelMode::Deterministic, goal_mode, arch: arch.clone() };
    train(dataset, chain, &spec, config, NoiseSource::Gaussian)
}

pub fn train_psik(
    dataset: &Dataset,
    chain: &KinematicChain,
    goal_mode: GoalMode,
    arch: &Architecture,
    config: &TrainConfig,
) -> Result<(SikModel, TrainingLog)> {
    let spec = ModelSpec { mode: ModelMode::Variational, goal_mode, arch: arch.clone() };
    train(dataset, chain, &spec, config, NoiseSource::Gaussian)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::collect;
    use crate::kinematics::forward_kinematics;
    use std::f64::consts::{E, PI};

    fn small_arch(d: usize) -> Architecture {
        Architecture { encoder_hidden: vec![16, 12], decoder_hidden: vec![12, 16], index_dim: d }
    }

    fn planar2() -> KinematicChain {
        KinematicChain::planar("p2", &[0.6, 0.4], (-PI * 0.9, PI * 0.9)).unwrap()
    }

    fn untrained(mode: ModelMode) -> (KinematicChain, SikModel) {
        let chain = planar2();
        let ds = collect(&chain, 45.0).unwrap();
        let rows: Vec<Vec<f64>> = ds.records.iter().map(|r| record_goal_features(r, GoalMode::Position)).collect();
        let norm = Normalization::fit(&rows_to_array(&rows, 3), &chain.limits());
        let model = SikModel::initialize(mode, GoalMode::Position, &chain, &small_arch(3), norm, 5).unwrap();
        (chain, model)
    }

    #[test]
    fn kl_closed_forms() {
        assert_eq!(kl_to_standard_normal(&[0.0], &[1.0]).unwrap(), 0.0);
        assert!((kl_to_standard_normal(&[1.0], &[1.0]).unwrap() - 0.5).abs() < 1e-12);
        // 0.5 (e - ln e - 1) = 0.5 (e - 2)
        let v = kl_to_standard_normal(&[0.0], &[E]).unwrap();
        assert!((v - 0.5 * (E - 2.0)).abs() < 1e-12);
        assert!((v - 0.3591409142295225).abs() < 1e-9);
        assert!(kl_to_standard_normal(&[0.0], &[0.0]).is_err());
    }

    #[test]
    fn reparameterize_examples() {
        assert_eq!(reparameterize(&[0.3, -1.0], &[2.0, 0.5], &[0.0, 0.0]).unwrap().0, vec![0.3, -1.0]);
        let tiny = reparameterize(&[0.7], &[1e-300], &[1.0]).unwrap();
        assert!((tiny[0] - 0.7 - 1e-6).abs() <= 1e-12);
        assert_eq!(reparameterize(&[0.0], &[1.0], &[0.42]).unwrap().0, vec![0.42]);
        assert!(matches!(reparameterize(&[0.0], &[0.0], &[1.0]), Err(Error::NonPositiveVariance(_))));
        assert!(reparameterize(&[0.0], &[-1.0], &[1.0]).is_err());
    }

    #[test]
    fn filter_distinct_examples() {
        let idx = |v: f64| PostureIndex(vec![v]);
        assert!(filter_distinct(&[], 0.5).unwrap().is_empty());
        assert_eq!(filter_distinct(&[idx(1.0), idx(1.0)], 0.01).unwrap().len(), 1);
        let kept = filter_distinct(&[idx(0.0), idx(0.4), idx(0.9)], 0.5).unwrap();
        assert_eq!(kept, vec![idx(0.0), idx(0.9)]);
        assert!(filter_distinct(&[idx(0.0)], 0.0).is_err());
    }

    #[test]
    fn zero_encoder_outputs_bias() {
        let (chain, mut model) = untrained(ModelMode::Deterministic);
        for l in &mut model.encoder.layers {
            l.weights.fill(0.0);
        }
        let last = model.encoder.layers.last_mut().unwrap();
        last.bias = ndarray::array![0.5, -1.5, 2.0];
        let q = [0.3, -0.2];
        let goal = Goal::position(forward_kinematics(&chain, &q).unwrap().position);
        assert_eq!(model.encode(&goal, &q).unwrap().0, vec![0.5, -1.5, 2.0]);
        assert!(model.encode_distribution(&goal, &q).is_err());
    }

    #[test]
    fn zero_heads_give_unit_variance() {
        let (chain, mut model) = untrained(ModelMode::Variational);
        for l in &mut model.encoder.layers {
            l.weights.fill(0.0);
            l.bias.fill(0.0);
        }
        let q = [1.0, 0.5];
        let goal = Goal::position(forward_kinematics(&chain, &q).unwrap().position);
        let (mean, var) = model.encode_distribution(&goal, &q).unwrap();
        assert_eq!(mean, vec![0.0; 3]);
        assert_eq!(var, vec![1.0; 3]);
        assert!(model.encode(&goal, &q).is_err());
    }

    #[test]
    fn zero_decoder_returns_bias_pose() {
        let (_, mut model) = untrained(ModelMode::Deterministic);
        for l in &mut model.decoder.layers {
            l.weights.fill(0.0);
        }
        // normalized home pose (0.1 rad, -0.2 rad)
        let home = [0.1, -0.2];
        let normalized: Vec<f64> = home
            .iter()
            .zip(model.norm.angle_offset.iter().zip(&model.norm.angle_scale))
            .map(|(a, (o, s))| (a - o) / s)
            .collect();
        model.decoder.layers.last_mut().unwrap().bias = ndarray::Array1::from(normalized);
        for p in [[0.1, 0.2, 0.0], [-0.5, 0.3, 0.0]] {
            let goal = Goal::position(p.into());
            let out = model.decode(&goal, &PostureIndex(vec![1.0, 2.0, 3.0])).unwrap();
            assert!((out.q[0] - 0.1).abs() < 1e-12 && (out.q[1] + 0.2).abs() < 1e-12);
            assert!(!out.clamped);
        }
    }

    #[test]
    fn decode_clamps_and_reports() {
        let (_, mut model) = untrained(ModelMode::Deterministic);
        for l in &mut model.decoder.layers {
            l.weights.fill(0.0);
        }
        model.decoder.layers.last_mut().unwrap().bias = ndarray::array![5.0, 0.0];
        let out = model.decode(&Goal::position([0.2, 0.0, 0.0].into()), &PostureIndex(vec![0.0; 3])).unwrap();
        assert!(out.clamped);
        assert_eq!(out.q[0], model.limits[0].1);
        assert!(model.decode(&Goal::position([0.2, 0.0, 0.0].into()), &PostureIndex(vec![0.0; 2])).is_err());
    }

    fn fd_check(model: &SikModel, batch: &Batch, noise: Option<&Array2<f64>>, beta: f64) {
        let (_, grads) = model.loss_and_gradients(batch, noise.map(|n| n.view()), beta).unwrap();
        let mut analytic = grads.encoder.flat();
        analytic.extend(grads.decoder.flat());
        assert_eq!(analytic.len(), model.flat_params().len());
        let h = 1e-5;
        let mut worst: f64 = 0.0;
        for (i, a) in analytic.iter().enumerate() {
            let mut plus = model.clone();
            *plus.param_mut(i) += h;
            let mut minus = model.clone();
            *minus.param_mut(i) -= h;
            let fp = plus.loss(batch, noise.map(|n| n.view()), beta).unwrap().total;
            let fm = minus.loss(batch, noise.map(|n| n.view()), beta).unwrap().total;
            let fd = (fp - fm) / (2.0 * h);
            let scale = fd.abs().max(a.abs());
            if scale > 1e-7 {
                worst = worst.max((fd - a).abs() / scale);
            }
        }
        assert!(worst < 1e-4, "worst relative error {worst}");
    }

    #[test]
    fn end_to_end_gradients_match_finite_differences() {
        let (chain, sik) = untrained(ModelMode::Deterministic);
        let ds = collect(&chain, 45.0).unwrap();
        let batch = sik.batch_from_records(&ds.records[3..6]).unwrap();
        fd_check(&sik, &batch, None, 0.0);

        let (_, psik) = untrained(ModelMode::Variational);
        let noise = ndarray::array![[0.3, -1.2, 0.5], [1.1, 0.2, -0.7], [-0.4, 0.9, 1.5]];
        fd_check(&psik, &batch, Some(&noise), 1.0);
    }

    #[test]
    fn checkpoint_roundtrip_and_hash() {
        let (_, mut model) = untrained(ModelMode::Variational);
        model.dataset_hash = "ab".repeat(32);
        let bytes = model.to_bytes();
        let back = SikModel::read_from(bytes.as_slice()).unwrap();
        assert_eq!(back, model);
        let h = model.model_hash();
        model.lambda = Some(0.25);
        assert_eq!(model.model_hash(), h);
        assert_eq!(SikModel::read_from(model.to_bytes().as_slice()).unwrap().lambda, Some(0.25));
        assert!(SikModel::read_from(&b"garbage"[..]).is_err());
    }

    #[test]
    fn memorizes_a_single_record() {
        let chain = planar2();
        let mut ds = collect(&chain, 45.0).unwrap();
        ds.records.truncate(1);
        let cfg = TrainConfig { epochs: 500, batch_size: 1, learning_rate: 2e-3, seed: 1, ..Default::default() };
        let (model, log) = train_sik(&ds, &chain, GoalMode::Position, &small_arch(3), &cfg).unwrap();
        assert!(log.final_loss().unwrap() < 1e-3);
        let r = &ds.records[0];
        let goal = Goal::position(r.pose.position);
        let idx = model.encode(&goal, &r.q).unwrap();
        let out = model.decode(&goal, &idx).unwrap();
        let err: f64 = out.q.iter().zip(r.q.iter()).map(|(a, b)| ((a - b) / (PI * 0.9)).powi(2)).sum::<f64>() / 2.0;
        assert!(err < 1e-3, "{err}");
    }

    #[test]
    fn training_is_reproducible_and_rejects_foreign_chain() {
        let chain = planar2();
        let ds = collect(&chain, 30.0).unwrap();
        let cfg = TrainConfig { epochs: 3, batch_size: 32, seed: 9, ..Default::default() };
        let (a, _) = train_psik(&ds, &chain, GoalMode::Position, &small_arch(3), &cfg).unwrap();
        let (b, _) = train_psik(&ds, &chain, GoalMode::Position, &small_arch(3), &cfg).unwrap();
        assert_eq!(a.to_bytes(), b.to_bytes());
        let other = KinematicChain::planar("x", &[0.5, 0.5], (-1.0, 1.0)).unwrap();
        assert!(matches!(
            train_sik(&ds, &other, GoalMode::Position, &small_arch(3), &cfg),
            Err(Error::ArtifactMismatch(_))
        ));
    }

    #[test]
    fn zero_noise_zero_beta_matches_deterministic_training() {
        let chain = planar2();
        let ds = collect(&chain, 30.0).unwrap();
        let cfg = TrainConfig { epochs: 4, batch_size: 16, seed: 4, beta_kl: 0.0, ..Default::default() };
        let arch = small_arch(3);
        let (_, sik_log) = train_sik(&ds, &chain, GoalMode::Position, &arch, &cfg).unwrap();
        let spec = ModelSpec { mode: ModelMode::Variational, goal_mode: GoalMode::Position, arch };
        let (_, psik_log) = train(&ds, &chain, &spec, &cfg, NoiseSource::Zero).unwrap();
        assert_eq!(sik_log.batch_losses.len(), psik_log.batch_losses.len());
        for (a, b) in sik_log.batch_losses.iter().zip(&psik_log.batch_losses) {
            assert!((a - b).abs() < 1e-9, "{a} vs {b}");
        }
    }

    #[test]
    fn auto_lambda_is_a_quarter_rms() {
        let indices: Vec<PostureIndex> = (0..2).map(|i| PostureIndex(vec![i as f64 * 4.0])).collect();
        // every sampled pair is at distance 4
        assert!((auto_lambda(&indices, 0).unwrap() - 1.0).abs() < 1e-12);
        assert!(auto_lambda(&indices[..1], 0).is_err());
    }

    #[test]
    fn index_dim_hint() {
        assert_eq!(suggested_index_dim(7), 3);
        assert_eq!(suggested_index_dim(9), 5);
        assert_eq!(Architecture { index_dim: 2, ..Default::default() }.warnings().len(), 1);
    }
}
