//! Synthetic transition datasets with hidden ground-truth actions.
//!
//! Two families:
//!
//! - `pointmass`: `s_{t+1} = s_t + a_t` with `a_t` sampled in `[-1, 1]^D`.
//!   Actions are snapped to a `2^-20` grid so the additive dynamics are exact
//!   in f64 and the action is recoverable from a noise-free pair bit for bit.
//! - `arm2link`: two revolute joints advanced by `a_t`; the observed state is
//!   the forward-kinematics endpoint plus per-joint sine/cosine. Recovery is
//!   a damped Gauss-Newton inversion of the state-feature map.
//!
//! Observations append `nuisance_dim` extra features (static per episode or
//! slowly drifting) and optional per-frame Gaussian noise. The stored data is
//! raw; a standardized view (per-feature zero mean, unit variance over the
//! pooled pair set) is what training consumes. Action labels are reachable
//! only through the evaluation accessors, never through the training view.

use serde::{Deserialize, Serialize};

use crate::container::{self, Frame};
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::DenseMatrix;

/// Grid for action quantization; keeps pointmass sums exact in f64.
const ACTION_GRID: f64 = 1.0 / (1 << 20) as f64;

/// Arm link lengths.
pub const ARM_L1: f64 = 1.0;
pub const ARM_L2: f64 = 0.7;

/// Drift step of the random-walk nuisance mode.
const NUISANCE_DRIFT_STEP: f64 = 0.05;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EnvKind {
    Pointmass,
    Arm2Link,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NuisanceMode {
    Static,
    Drift,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ActionMode {
    Iid,
    PiecewiseConstant,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnvConfig {
    pub kind: EnvKind,
    pub state_dim: usize,
    pub action_dim: usize,
    pub nuisance_dim: usize,
    pub nuisance_mode: NuisanceMode,
    pub obs_noise_sigma: f64,
    pub action_mode: ActionMode,
    /// Steps per constant-action segment; only read in piecewise mode.
    #[serde(default = "default_segment_len")]
    pub segment_len: usize,
    pub episode_len: usize,
    pub episodes: usize,
    pub seed: u64,
}

fn default_segment_len() -> usize {
    8
}

impl Default for EnvConfig {
    fn default() -> Self {
        EnvConfig {
            kind: EnvKind::Pointmass,
            state_dim: 2,
            action_dim: 2,
            nuisance_dim: 8,
            nuisance_mode: NuisanceMode::Static,
            obs_noise_sigma: 0.01,
            action_mode: ActionMode::Iid,
            segment_len: default_segment_len(),
            episode_len: 100,
            episodes: 200,
            seed: 0,
        }
    }
}

impl EnvConfig {
    pub fn validate(&self) -> Result<()> {
        match self.kind {
            EnvKind::Pointmass => {
                if self.state_dim == 0 || self.state_dim != self.action_dim {
                    return Err(Error::InvalidConfig(format!(
                        "pointmass needs state_dim == action_dim >= 1, got {} and {}",
                        self.state_dim, self.action_dim
                    )));
                }
            }
            EnvKind::Arm2Link => {
                if self.state_dim != 2 || self.action_dim != 2 {
                    return Err(Error::InvalidConfig(format!(
                        "arm2link is a two-joint arm: state_dim and action_dim must be 2, got {} and {}",
                        self.state_dim, self.action_dim
                    )));
                }
            }
        }
        if self.obs_noise_sigma < 0.0 {
            return Err(Error::InvalidConfig(format!(
                "obs_noise_sigma must be >= 0, got {}",
                self.obs_noise_sigma
            )));
        }
        if self.action_mode == ActionMode::PiecewiseConstant && self.segment_len == 0 {
            return Err(Error::InvalidConfig("segment_len must be >= 1".into()));
        }
        if self.episode_len < 2 {
            return Err(Error::InvalidConfig(format!(
                "episode_len must be >= 2 (one transition), got {}",
                self.episode_len
            )));
        }
        if self.episodes == 0 {
            return Err(Error::InvalidConfig("episodes must be >= 1".into()));
        }
        Ok(())
    }

    /// Number of observed state features.
    pub fn state_feature_dim(&self) -> usize {
        match self.kind {
            EnvKind::Pointmass => self.state_dim,
            // endpoint (x, y) + sin/cos per joint
            EnvKind::Arm2Link => 2 + 2 * self.state_dim,
        }
    }

    pub fn obs_dim(&self) -> usize {
        self.state_feature_dim() + self.nuisance_dim
    }
}

/// Per-feature standardization constants of a dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardization {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Standardization {
    fn fit(obs_t: &DenseMatrix, obs_next: &DenseMatrix) -> Standardization {
        let d = obs_t.cols();
        let n = (obs_t.rows() + obs_next.rows()) as f64;
        let mut mean = vec![0.0; d];
        for m in [obs_t, obs_next] {
            for r in 0..m.rows() {
                for (acc, &v) in mean.iter_mut().zip(m.row(r)) {
                    *acc += v;
                }
            }
        }
        for v in &mut mean {
            *v /= n;
        }
        let mut var = vec![0.0; d];
        for m in [obs_t, obs_next] {
            for r in 0..m.rows() {
                for ((acc, &v), &mu) in var.iter_mut().zip(m.row(r)).zip(&mean) {
                    *acc += (v - mu) * (v - mu);
                }
            }
        }
        let std = var
            .iter()
            .map(|&v| {
                let s = (v / n).sqrt();
                if s < 1e-12 {
                    1.0
                } else {
                    s
                }
            })
            .collect();
        Standardization { mean, std }
    }

    pub fn apply(&self, raw: &DenseMatrix) -> DenseMatrix {
        let mut out = raw.clone();
        for r in 0..out.rows() {
            for ((v, &m), &s) in out.row_mut(r).iter_mut().zip(&self.mean).zip(&self.std) {
                *v = (*v - m) / s;
            }
        }
        out
    }
}

/// The training-facing view: standardized observation pairs, nothing else.
///
/// Training code takes this type, so action labels are out of reach by
/// construction.
#[derive(Debug, Clone, PartialEq)]
pub struct ObservationPairs {
    pub obs_t: DenseMatrix,
    pub obs_next: DenseMatrix,
    /// Temporal gap `k` between the two frames of a pair.
    pub offset: usize,
}

impl ObservationPairs {
    pub fn len(&self) -> usize {
        self.obs_t.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Observation pairs plus hidden action labels and generation metadata.
#[derive(Debug, Clone, PartialEq)]
pub struct TransitionDataset {
    config: EnvConfig,
    offset: usize,
    raw_obs_t: DenseMatrix,
    raw_obs_next: DenseMatrix,
    actions: DenseMatrix,
    standardization: Standardization,
    pairs: ObservationPairs,
}

impl TransitionDataset {
    fn assemble(
        config: EnvConfig,
        offset: usize,
        raw_obs_t: DenseMatrix,
        raw_obs_next: DenseMatrix,
        actions: DenseMatrix,
        standardization: Option<Standardization>,
    ) -> TransitionDataset {
        let standardization =
            standardization.unwrap_or_else(|| Standardization::fit(&raw_obs_t, &raw_obs_next));
        let pairs = ObservationPairs {
            obs_t: standardization.apply(&raw_obs_t),
            obs_next: standardization.apply(&raw_obs_next),
            offset,
        };
        TransitionDataset {
            config,
            offset,
            raw_obs_t,
            raw_obs_next,
            actions,
            standardization,
            pairs,
        }
    }

    pub fn len(&self) -> usize {
        self.raw_obs_t.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn d_obs(&self) -> usize {
        self.raw_obs_t.cols()
    }

    pub fn d_action(&self) -> usize {
        self.actions.cols()
    }

    pub fn offset(&self) -> usize {
        self.offset
    }

    pub fn config(&self) -> &EnvConfig {
        &self.config
    }

    pub fn seed(&self) -> u64 {
        self.config.seed
    }

    pub fn standardization(&self) -> &Standardization {
        &self.standardization
    }

    /// Standardized pairs for training. This is the only surface training
    /// code sees; it carries no action labels.
    pub fn observations(&self) -> &ObservationPairs {
        &self.pairs
    }

    /// Raw (unstandardized) observations, for recovery and inspection.
    pub fn raw_obs_t(&self) -> &DenseMatrix {
        &self.raw_obs_t
    }

    pub fn raw_obs_next(&self) -> &DenseMatrix {
        &self.raw_obs_next
    }

    /// Ground-truth action labels. Evaluation-only interface.
    pub fn actions_for_eval(&self) -> &DenseMatrix {
        &self.actions
    }

    /// Invert the dynamics for one stored pair from raw observations.
    pub fn recover_action(&self, row: usize) -> Result<Vec<f64>> {
        recover_action(
            self.config.kind,
            self.config.state_dim,
            self.raw_obs_t.row(row),
            self.raw_obs_next.row(row),
        )
    }
}

/// Observed state features for one pointmass/arm state.
fn emit_state_features(kind: EnvKind, state: &[f64], out: &mut [f64]) {
    match kind {
        EnvKind::Pointmass => out[..state.len()].copy_from_slice(state),
        EnvKind::Arm2Link => {
            let (x, y) = arm_forward_kinematics(state[0], state[1]);
            out[0] = x;
            out[1] = y;
            out[2] = state[0].sin();
            out[3] = state[0].cos();
            out[4] = state[1].sin();
            out[5] = state[1].cos();
        }
    }
}

/// Endpoint of the two-link arm.
pub fn arm_forward_kinematics(theta1: f64, theta2: f64) -> (f64, f64) {
    (
        ARM_L1 * theta1.cos() + ARM_L2 * (theta1 + theta2).cos(),
        ARM_L1 * theta1.sin() + ARM_L2 * (theta1 + theta2).sin(),
    )
}

/// Jacobian of the endpoint w.r.t. the joint angles, row-major 2x2.
pub fn arm_jacobian(theta1: f64, theta2: f64) -> [[f64; 2]; 2] {
    let s1 = theta1.sin();
    let c1 = theta1.cos();
    let s12 = (theta1 + theta2).sin();
    let c12 = (theta1 + theta2).cos();
    [
        [-ARM_L1 * s1 - ARM_L2 * s12, -ARM_L2 * s12],
        [ARM_L1 * c1 + ARM_L2 * c12, ARM_L2 * c12],
    ]
}

fn draw_action(rng: &mut Rng, d: usize) -> Vec<f64> {
    (0..d)
        .map(|_| (rng.uniform_in(-1.0, 1.0) / ACTION_GRID).floor() * ACTION_GRID)
        .collect()
}

/// Raw per-episode rollouts: observations for every step and actions for
/// every transition. Draw order per episode is fixed: state init, nuisance
/// init, then per step (action | state advance | nuisance drift | obs noise).
fn roll_episodes(config: &EnvConfig) -> (Vec<DenseMatrix>, Vec<DenseMatrix>) {
    let length = config.episode_len;
    let d_obs = config.obs_dim();
    let sf = config.state_feature_dim();
    let mut all_obs = Vec::with_capacity(config.episodes);
    let mut all_actions = Vec::with_capacity(config.episodes);

    for e in 0..config.episodes {
        let mut rng = Rng::derive(config.seed, &format!("episode/{e}"));
        let mut state: Vec<f64> = match config.kind {
            EnvKind::Pointmass => vec![0.0; config.state_dim],
            EnvKind::Arm2Link => (0..2)
                .map(|_| rng.uniform_in(-std::f64::consts::PI, std::f64::consts::PI))
                .collect(),
        };
        let mut nuisance: Vec<f64> = (0..config.nuisance_dim).map(|_| rng.normal()).collect();
        let mut obs = DenseMatrix::zeros(length, d_obs);
        let mut actions = DenseMatrix::zeros(length - 1, config.action_dim);
        let mut current = vec![0.0; config.action_dim];

        for t in 0..length {
            let row = obs.row_mut(t);
            emit_state_features(config.kind, &state, row);
            row[sf..].copy_from_slice(&nuisance);
            if config.obs_noise_sigma > 0.0 {
                for v in row.iter_mut() {
                    *v += config.obs_noise_sigma * rng.normal();
                }
            }
            if t + 1 < length {
                let redraw = match config.action_mode {
                    ActionMode::Iid => true,
                    ActionMode::PiecewiseConstant => t % config.segment_len == 0,
                };
                if redraw || t == 0 {
                    current = draw_action(&mut rng, config.action_dim);
                }
                actions.row_mut(t).copy_from_slice(&current);
                for (s, &a) in state.iter_mut().zip(&current) {
                    *s += a;
                }
                if config.nuisance_mode == NuisanceMode::Drift {
                    for nu in nuisance.iter_mut() {
                        *nu += NUISANCE_DRIFT_STEP * rng.normal();
                    }
                }
            }
        }
        all_obs.push(obs);
        all_actions.push(actions);
    }
    (all_obs, all_actions)
}

/// Which action the label of a `k > 1` pair reports.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GapLabel {
    /// The action of the gap's first step (the default convention).
    First,
    /// Mean of the actions across the gap.
    Mean,
    /// Sum of the actions across the gap.
    Sum,
}

fn pairs_from_episodes(
    config: &EnvConfig,
    episodes_obs: &[DenseMatrix],
    episodes_actions: &[DenseMatrix],
    k: usize,
    label: GapLabel,
) -> Result<TransitionDataset> {
    if k == 0 {
        return Err(Error::InvalidConfig("offset k must be >= 1".into()));
    }
    if k >= config.episode_len {
        return Err(Error::InvalidConfig(format!(
            "offset k = {k} leaves no pairs in episodes of length {}",
            config.episode_len
        )));
    }
    let per = config.episode_len - k;
    let n = config.episodes * per;
    let d_obs = config.obs_dim();
    let mut obs_t = DenseMatrix::zeros(n, d_obs);
    let mut obs_next = DenseMatrix::zeros(n, d_obs);
    let mut actions = DenseMatrix::zeros(n, config.action_dim);

    for (e, (obs, acts)) in episodes_obs.iter().zip(episodes_actions).enumerate() {
        for t in 0..per {
            let r = e * per + t;
            obs_t.row_mut(r).copy_from_slice(obs.row(t));
            obs_next.row_mut(r).copy_from_slice(obs.row(t + k));
            match label {
                GapLabel::First => actions.row_mut(r).copy_from_slice(acts.row(t)),
                GapLabel::Mean | GapLabel::Sum => {
                    let dst = actions.row_mut(r);
                    for step in t..t + k {
                        for (d, &a) in dst.iter_mut().zip(acts.row(step)) {
                            *d += a;
                        }
                    }
                    if label == GapLabel::Mean {
                        for d in dst.iter_mut() {
                            *d /= k as f64;
                        }
                    }
                }
            }
        }
    }
    Ok(TransitionDataset::assemble(
        config.clone(),
        k,
        obs_t,
        obs_next,
        actions,
        None,
    ))
}

/// Generate a fresh dataset of consecutive pairs (`k = 1`).
pub fn generate(config: &EnvConfig) -> Result<TransitionDataset> {
    generate_with_offset(config, 1)
}

/// Generate and pair at offset `k` in one pass. The canonical path used by
/// the command-line tools; `generate` is the `k = 1` special case.
pub fn generate_with_offset(config: &EnvConfig, k: usize) -> Result<TransitionDataset> {
    config.validate()?;
    let (obs, actions) = roll_episodes(config);
    pairs_from_episodes(config, &obs, &actions, k, GapLabel::First)
}

/// Re-pair an existing `k = 1` dataset at a larger offset.
///
/// The per-episode observation sequences are reconstructed exactly from the
/// stored raw pairs, so this matches `generate_with_offset` bit for bit.
pub fn offset_pairs(dataset: &TransitionDataset, k: usize) -> Result<TransitionDataset> {
    offset_pairs_with_label(dataset, k, GapLabel::First)
}

pub fn offset_pairs_with_label(
    dataset: &TransitionDataset,
    k: usize,
    label: GapLabel,
) -> Result<TransitionDataset> {
    if dataset.offset != 1 {
        return Err(Error::Unsupported(format!(
            "offset_pairs needs a k = 1 source dataset, got k = {}",
            dataset.offset
        )));
    }
    if k == 1 && label == GapLabel::First {
        return Ok(dataset.clone());
    }
    let config = &dataset.config;
    let per = config.episode_len - 1;
    let d_obs = config.obs_dim();
    let mut episodes_obs = Vec::with_capacity(config.episodes);
    let mut episodes_actions = Vec::with_capacity(config.episodes);
    for e in 0..config.episodes {
        let mut obs = DenseMatrix::zeros(config.episode_len, d_obs);
        let mut acts = DenseMatrix::zeros(per, config.action_dim);
        for t in 0..per {
            let r = e * per + t;
            obs.row_mut(t).copy_from_slice(dataset.raw_obs_t.row(r));
            acts.row_mut(t).copy_from_slice(dataset.actions.row(r));
        }
        obs.row_mut(per)
            .copy_from_slice(dataset.raw_obs_next.row(e * per + per - 1));
        episodes_obs.push(obs);
        episodes_actions.push(acts);
    }
    pairs_from_episodes(config, &episodes_obs, &episodes_actions, k, label)
}

/// Invert the dynamics for one raw observation pair.
///
/// Pointmass: the state-feature difference, exact on noise-free data.
/// Arm: damped Gauss-Newton on the six state features.
pub fn recover_action(
    kind: EnvKind,
    state_dim: usize,
    raw_obs_t: &[f64],
    raw_obs_next: &[f64],
) -> Result<Vec<f64>> {
    match kind {
        EnvKind::Pointmass => {
            if raw_obs_t.len() < state_dim || raw_obs_next.len() < state_dim {
                return Err(Error::Unsupported(format!(
                    "observation too narrow to contain a {state_dim}-dim state"
                )));
            }
            Ok((0..state_dim)
                .map(|i| raw_obs_next[i] - raw_obs_t[i])
                .collect())
        }
        EnvKind::Arm2Link => {
            if raw_obs_t.len() < 6 || raw_obs_next.len() < 6 {
                return Err(Error::Unsupported(
                    "arm observation needs 6 state features".into(),
                ));
            }
            let theta = [
                raw_obs_t[2].atan2(raw_obs_t[3]),
                raw_obs_t[4].atan2(raw_obs_t[5]),
            ];
            Ok(arm_recover_step(theta, &raw_obs_next[..6]).to_vec())
        }
    }
}

/// Least-squares solve for the joint increment that maps `theta` onto the
/// observed next state features.
fn arm_recover_step(theta: [f64; 2], target: &[f64]) -> [f64; 2] {
    let mut delta = [0.0f64; 2];
    for _ in 0..60 {
        let t1 = theta[0] + delta[0];
        let t2 = theta[1] + delta[1];
        let (x, y) = arm_forward_kinematics(t1, t2);
        let f = [
            x - target[0],
            y - target[1],
            t1.sin() - target[2],
            t1.cos() - target[3],
            t2.sin() - target[4],
            t2.cos() - target[5],
        ];
        let ep = arm_jacobian(t1, t2);
        // Full Jacobian rows: endpoint (2) then sin/cos features (4).
        let jac: [[f64; 2]; 6] = [
            ep[0],
            ep[1],
            [t1.cos(), 0.0],
            [-t1.sin(), 0.0],
            [0.0, t2.cos()],
            [0.0, -t2.sin()],
        ];
        // Normal equations with light damping.
        let (mut a11, mut a12, mut a22, mut b1, mut b2) = (0.0, 0.0, 0.0, 0.0, 0.0);
        for (row, fv) in jac.iter().zip(&f) {
            a11 += row[0] * row[0];
            a12 += row[0] * row[1];
            a22 += row[1] * row[1];
            b1 += row[0] * fv;
            b2 += row[1] * fv;
        }
        let lambda = 1e-9;
        a11 += lambda;
        a22 += lambda;
        let det = a11 * a22 - a12 * a12;
        if det.abs() < 1e-300 {
            break;
        }
        let step = [-(a22 * b1 - a12 * b2) / det, -(a11 * b2 - a12 * b1) / det];
        delta[0] += step[0];
        delta[1] += step[1];
        if step[0].abs().max(step[1].abs()) < 1e-14 {
            break;
        }
    }
    delta
}

// ---------------------------------------------------------------------------
// Dataset file format: magic "IBDS", version 1.
// Meta: JSON (config, offset, n, dims, standardization constants).
// Payload: three little-endian f32 row-major blocks (obs_t, obs_next, actions).
// ---------------------------------------------------------------------------

const DATASET_MAGIC: &[u8; 4] = b"IBDS";
const DATASET_VERSION: u16 = 1;

#[derive(Serialize, Deserialize)]
struct DatasetMeta {
    config: EnvConfig,
    seed: u64,
    offset: usize,
    n: usize,
    d_obs: usize,
    d_action: usize,
    standardization: Standardization,
}

pub fn save_dataset(dataset: &TransitionDataset, path: &std::path::Path) -> Result<()> {
    let meta = DatasetMeta {
        config: dataset.config.clone(),
        seed: dataset.config.seed,
        offset: dataset.offset,
        n: dataset.len(),
        d_obs: dataset.d_obs(),
        d_action: dataset.d_action(),
        standardization: dataset.standardization.clone(),
    };
    let mut payload = container::f32s_to_le_bytes(
        dataset.raw_obs_t.data().iter().map(|&v| v as f32),
    );
    payload.extend(container::f32s_to_le_bytes(
        dataset.raw_obs_next.data().iter().map(|&v| v as f32),
    ));
    payload.extend(container::f32s_to_le_bytes(
        dataset.actions.data().iter().map(|&v| v as f32),
    ));
    let frame = Frame {
        version: DATASET_VERSION,
        meta: serde_json::to_vec(&meta)?,
        payload,
    };
    let mut file = std::io::BufWriter::new(std::fs::File::create(path)?);
    container::write_frame(&mut file, DATASET_MAGIC, &frame)
}

pub fn load_dataset(path: &std::path::Path) -> Result<TransitionDataset> {
    let mut file = std::io::BufReader::new(std::fs::File::open(path)?);
    let frame = container::read_frame(&mut file, DATASET_MAGIC, DATASET_VERSION)?;
    let meta: DatasetMeta = serde_json::from_slice(&frame.meta)?;
    meta.config.validate()?;
    if meta.offset == 0 || meta.offset >= meta.config.episode_len {
        return Err(Error::Format(format!("bad offset {} in header", meta.offset)));
    }
    let expect_n = meta.config.episodes * (meta.config.episode_len - meta.offset);
    if meta.n != expect_n {
        return Err(Error::Format(format!(
            "header row count {} does not match episodes x (episode_len - k) = {expect_n}",
            meta.n
        )));
    }
    if meta.d_obs != meta.config.obs_dim() || meta.d_action != meta.config.action_dim {
        return Err(Error::Format("header dims disagree with config".into()));
    }
    let vals = container::le_bytes_to_f32s(&frame.payload)?;
    let obs_block = meta.n * meta.d_obs;
    let act_block = meta.n * meta.d_action;
    if vals.len() != 2 * obs_block + act_block {
        return Err(Error::Format(format!(
            "payload holds {} floats, expected {}",
            vals.len(),
            2 * obs_block + act_block
        )));
    }
    let to_f64 = |s: &[f32]| s.iter().map(|&v| v as f64).collect::<Vec<f64>>();
    let raw_obs_t = DenseMatrix::from_vec(meta.n, meta.d_obs, to_f64(&vals[..obs_block]))?;
    let raw_obs_next =
        DenseMatrix::from_vec(meta.n, meta.d_obs, to_f64(&vals[obs_block..2 * obs_block]))?;
    let actions =
        DenseMatrix::from_vec(meta.n, meta.d_action, to_f64(&vals[2 * obs_block..]))?;
    Ok(TransitionDataset::assemble(
        meta.config,
        meta.offset,
        raw_obs_t,
        raw_obs_next,
        actions,
        Some(meta.standardization),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn noise_free_pointmass(seed: u64) -> EnvConfig {
        EnvConfig {
            obs_noise_sigma: 0.0,
            nuisance_dim: 3,
            episodes: 4,
            episode_len: 20,
            seed,
            ..EnvConfig::default()
        }
    }

    #[test]
    fn pointmass_recovery_is_exact() {
        let ds = generate(&noise_free_pointmass(1)).unwrap();
        for row in 0..ds.len() {
            let rec = ds.recover_action(row).unwrap();
            let truth = ds.actions_for_eval().row(row);
            assert_eq!(rec.as_slice(), truth, "row {row}");
        }
    }

    #[test]
    fn recover_difference_example() {
        let a = recover_action(EnvKind::Pointmass, 2, &[1.0, 2.0, 9.9], &[1.5, 1.7, 0.1]).unwrap();
        assert_eq!(a, vec![0.5, -0.30000000000000004]);
        let zero = recover_action(EnvKind::Pointmass, 2, &[1.0, 2.0], &[1.0, 2.0]).unwrap();
        assert_eq!(zero, vec![0.0, 0.0]);
    }

    #[test]
    fn arm_recovery_under_1e6() {
        let cfg = EnvConfig {
            kind: EnvKind::Arm2Link,
            obs_noise_sigma: 0.0,
            nuisance_dim: 2,
            episodes: 3,
            episode_len: 15,
            seed: 9,
            ..EnvConfig::default()
        };
        let ds = generate(&cfg).unwrap();
        for row in 0..ds.len() {
            let rec = ds.recover_action(row).unwrap();
            let truth = ds.actions_for_eval().row(row);
            for (r, t) in rec.iter().zip(truth) {
                assert!((r - t).abs() < 1e-6, "row {row}: {rec:?} vs {truth:?}");
            }
        }
    }

    #[test]
    fn arm_jacobian_first_order_in_action() {
        let theta = [0.4, -1.1];
        let action = [3e-4, -2e-4];
        let (x0, y0) = arm_forward_kinematics(theta[0], theta[1]);
        let (x1, y1) = arm_forward_kinematics(theta[0] + action[0], theta[1] + action[1]);
        let jac = arm_jacobian(theta[0], theta[1]);
        let pred = [
            jac[0][0] * action[0] + jac[0][1] * action[1],
            jac[1][0] * action[0] + jac[1][1] * action[1],
        ];
        let norm2 = action[0] * action[0] + action[1] * action[1];
        assert!((x1 - x0 - pred[0]).abs() < 10.0 * norm2);
        assert!((y1 - y0 - pred[1]).abs() < 10.0 * norm2);
    }

    #[test]
    fn generation_is_deterministic() {
        let a = generate(&noise_free_pointmass(5)).unwrap();
        let b = generate(&noise_free_pointmass(5)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn offset_one_is_identity() {
        let ds = generate(&noise_free_pointmass(2)).unwrap();
        let same = offset_pairs(&ds, 1).unwrap();
        assert_eq!(ds, same);
    }

    #[test]
    fn offset_pairs_match_direct_generation() {
        let mut cfg = noise_free_pointmass(3);
        cfg.obs_noise_sigma = 0.4;
        let base = generate(&cfg).unwrap();
        let re = offset_pairs(&base, 4).unwrap();
        let direct = generate_with_offset(&cfg, 4).unwrap();
        assert_eq!(re, direct);
    }

    #[test]
    fn offset_two_displacement_is_action_sum() {
        let cfg = noise_free_pointmass(4);
        let base = generate(&cfg).unwrap();
        let k2 = offset_pairs(&base, 2).unwrap();
        let summed = offset_pairs_with_label(&base, 2, GapLabel::Sum).unwrap();
        for row in 0..k2.len() {
            let o_t = k2.raw_obs_t().row(row);
            let o_n = k2.raw_obs_next().row(row);
            for d in 0..2 {
                let disp = o_n[d] - o_t[d];
                assert!((disp - summed.actions_for_eval().get(row, d)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn pairs_never_cross_episode_boundaries() {
        // With zero noise and zero nuisance the state is continuous inside an
        // episode but resets to the origin between episodes; a crossing pair
        // would show an impossible jump back to zero.
        let cfg = EnvConfig {
            nuisance_dim: 0,
            obs_noise_sigma: 0.0,
            episodes: 3,
            episode_len: 10,
            seed: 6,
            ..EnvConfig::default()
        };
        let k = 4;
        let ds = generate_with_offset(&cfg, k).unwrap();
        assert_eq!(ds.len(), 3 * (10 - k));
        for row in 0..ds.len() {
            let a = ds.recover_action(row).unwrap();
            // every displacement is a sum of k unit-box actions
            for v in a {
                assert!(v.abs() <= k as f64 + 1e-9);
            }
        }
        // first pair of each episode starts at the origin
        for e in 0..3 {
            let first = ds.raw_obs_t().row(e * (10 - k));
            assert_eq!(&first[..2], &[0.0, 0.0]);
        }
    }

    #[test]
    fn offset_k_too_large_is_rejected() {
        let ds = generate(&noise_free_pointmass(7)).unwrap();
        assert!(offset_pairs(&ds, 20).is_err());
        assert!(offset_pairs(&ds, 0).is_err());
    }

    #[test]
    fn piecewise_actions_repeat_within_segments() {
        let cfg = EnvConfig {
            action_mode: ActionMode::PiecewiseConstant,
            segment_len: 5,
            obs_noise_sigma: 0.0,
            episodes: 2,
            episode_len: 21,
            seed: 11,
            ..EnvConfig::default()
        };
        let ds = generate(&cfg).unwrap();
        let per = 20;
        for e in 0..2 {
            for t in 0..per {
                let a = ds.actions_for_eval().row(e * per + t);
                let seg_first = ds.actions_for_eval().row(e * per + (t / 5) * 5);
                assert_eq!(a, seg_first);
            }
        }
    }

    #[test]
    fn dataset_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ds.ibds");
        let mut cfg = noise_free_pointmass(8);
        cfg.obs_noise_sigma = 0.2;
        let ds = generate(&cfg).unwrap();
        save_dataset(&ds, &path).unwrap();
        let loaded = load_dataset(&path).unwrap();
        assert_eq!(loaded.len(), ds.len());
        assert_eq!(loaded.config(), ds.config());
        // f32 quantization of the f64 originals
        for (a, b) in loaded
            .raw_obs_t()
            .data()
            .iter()
            .zip(ds.raw_obs_t().data())
        {
            assert_eq!(*a, *b as f32 as f64);
        }
        // reload-of-reload is exact
        let path2 = dir.path().join("ds2.ibds");
        save_dataset(&loaded, &path2).unwrap();
        let again = load_dataset(&path2).unwrap();
        assert_eq!(again, loaded);
    }

    #[test]
    fn dataset_file_detects_corruption() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ds.ibds");
        let ds = generate(&noise_free_pointmass(9)).unwrap();
        save_dataset(&ds, &path).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        let mid = bytes.len() / 2;
        bytes[mid] ^= 0xff;
        std::fs::write(&path, &bytes).unwrap();
        assert!(load_dataset(&path).is_err());
    }

    #[test]
    fn header_row_count_mismatch_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ds.ibds");
        let ds = generate(&noise_free_pointmass(10)).unwrap();
        save_dataset(&ds, &path).unwrap();
        // Rewrite the meta with an inconsistent n, fixing up the frame by hand.
        let bytes = std::fs::read(&path).unwrap();
        let meta_len = u32::from_le_bytes(bytes[6..10].try_into().unwrap()) as usize;
        let mut meta: serde_json::Value = serde_json::from_slice(&bytes[10..10 + meta_len]).unwrap();
        meta["n"] = serde_json::json!(123);
        let new_meta = serde_json::to_vec(&meta).unwrap();
        let mut out = Vec::new();
        out.extend_from_slice(&bytes[..6]);
        out.extend_from_slice(&(new_meta.len() as u32).to_le_bytes());
        out.extend_from_slice(&new_meta);
        out.extend_from_slice(&bytes[10 + meta_len..]);
        std::fs::write(&path, &out).unwrap();
        let err = load_dataset(&path).unwrap_err();
        assert!(err.to_string().contains("row count"), "{err}");
    }

    #[test]
    fn standardized_view_has_zero_mean_unit_variance() {
        let mut cfg = noise_free_pointmass(12);
        cfg.obs_noise_sigma = 0.1;
        let ds = generate(&cfg).unwrap();
        let pairs = ds.observations();
        let d = ds.d_obs();
        let n = (2 * ds.len()) as f64;
        for c in 0..d {
            let mut sum = 0.0;
            let mut sq = 0.0;
            for m in [&pairs.obs_t, &pairs.obs_next] {
                for r in 0..m.rows() {
                    let v = m.get(r, c);
                    sum += v;
                    sq += v * v;
                }
            }
            let mean = sum / n;
            let var = sq / n - mean * mean;
            assert!(mean.abs() < 1e-9, "col {c} mean {mean}");
            assert!((var - 1.0).abs() < 1e-6, "col {c} var {var}");
        }
    }
}
