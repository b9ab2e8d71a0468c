//! Histogram alignment metrics between latent channels and action channels.
//!
//! Plug-in estimators only, in nats: empirical entropy `-sum p ln p`, mutual
//! information over the joint histogram, and the capture ratio
//! `I(z_i; a_j) / H(a_j)`. No bias correction is applied; the plug-in bias of
//! the MI estimate under independence is approximately
//! `(B_x - 1)(B_y - 1) / (2N)` nats (occupied-bin counts in place of `B`
//! when the joint table is sparse), which callers should keep in mind when
//! reading small values.
//!
//! Binning: `n_bins` equal-width bins over either the per-channel empirical
//! min/max or a fixed range. A sample exactly on the upper edge lands in the
//! top bin. A zero-width range (constant channel) collapses to a single
//! occupied bin, so its entropy is 0 and it is flagged degenerate rather
//! than treated as an error.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::DenseMatrix;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RangeMode {
    PerChannelMinMax,
    Fixed { lo: f64, hi: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BinningConfig {
    pub n_bins: usize,
    pub range_mode: RangeMode,
}

impl Default for BinningConfig {
    fn default() -> Self {
        BinningConfig {
            n_bins: 256,
            range_mode: RangeMode::PerChannelMinMax,
        }
    }
}

impl BinningConfig {
    pub fn new(n_bins: usize) -> Result<Self> {
        let cfg = BinningConfig {
            n_bins,
            range_mode: RangeMode::PerChannelMinMax,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_bins < 2 {
            return Err(Error::InvalidConfig(format!(
                "n_bins must be >= 2, got {}",
                self.n_bins
            )));
        }
        if let RangeMode::Fixed { lo, hi } = self.range_mode {
            if !(lo < hi) {
                return Err(Error::InvalidConfig(format!(
                    "fixed range needs lo < hi, got [{lo}, {hi}]"
                )));
            }
        }
        Ok(())
    }

    fn range_for(&self, samples: &[f64]) -> (f64, f64) {
        match self.range_mode {
            RangeMode::Fixed { lo, hi } => (lo, hi),
            RangeMode::PerChannelMinMax => {
                let mut lo = f64::INFINITY;
                let mut hi = f64::NEG_INFINITY;
                for &v in samples {
                    lo = lo.min(v);
                    hi = hi.max(v);
                }
                (lo, hi)
            }
        }
    }

    /// Bin indices for one channel. Zero-width ranges collapse to bin 0.
    pub fn bin_indices(&self, samples: &[f64]) -> Vec<u32> {
        let (lo, hi) = self.range_for(samples);
        let width = hi - lo;
        if !(width > 0.0) {
            return vec![0; samples.len()];
        }
        let n = self.n_bins as f64;
        samples
            .iter()
            .map(|&v| {
                let idx = ((v - lo) / width * n).floor();
                (idx.max(0.0).min(n - 1.0)) as u32
            })
            .collect()
    }
}

fn check_samples(op: &'static str, samples: &[f64]) -> Result<()> {
    if samples.is_empty() {
        return Err(Error::InvalidConfig(format!("{op}: empty sample set")));
    }
    if let Some(i) = samples.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite { context: op, index: i });
    }
    Ok(())
}

fn entropy_of_counts(counts: impl Iterator<Item = u64>, n: f64) -> f64 {
    let mut h = 0.0;
    for c in counts {
        if c > 0 {
            let p = c as f64 / n;
            h -= p * p.ln();
        }
    }
    h
}

/// Plug-in entropy of one channel, in nats.
pub fn entropy(samples: &[f64], binning: &BinningConfig) -> Result<f64> {
    binning.validate()?;
    check_samples("entropy", samples)?;
    let idx = binning.bin_indices(samples);
    let mut counts = vec![0u64; binning.n_bins];
    for &i in &idx {
        counts[i as usize] += 1;
    }
    Ok(entropy_of_counts(counts.into_iter(), samples.len() as f64))
}

/// Plug-in mutual information between two channels, in nats.
///
/// Each channel is binned with its own range; the sum runs over occupied
/// joint cells in a fixed (u, v) order so results are reproducible.
pub fn mutual_information(x: &[f64], y: &[f64], binning: &BinningConfig) -> Result<f64> {
    binning.validate()?;
    check_samples("mutual_information", x)?;
    check_samples("mutual_information", y)?;
    if x.len() != y.len() {
        return Err(Error::ShapeMismatch {
            op: "mutual_information",
            expected: format!("{} samples", x.len()),
            got: format!("{}", y.len()),
        });
    }
    let ix = binning.bin_indices(x);
    let iy = binning.bin_indices(y);
    let mut joint: BTreeMap<(u32, u32), u64> = BTreeMap::new();
    let mut px = vec![0u64; binning.n_bins];
    let mut py = vec![0u64; binning.n_bins];
    for (&u, &v) in ix.iter().zip(&iy) {
        *joint.entry((u, v)).or_insert(0) += 1;
        px[u as usize] += 1;
        py[v as usize] += 1;
    }
    let n = x.len() as f64;
    let mut mi = 0.0;
    for (&(u, v), &c) in &joint {
        let p_uv = c as f64 / n;
        let p_u = px[u as usize] as f64 / n;
        let p_v = py[v as usize] as f64 / n;
        mi += p_uv * (p_uv / (p_u * p_v)).ln();
    }
    Ok(mi)
}

/// Empirical Pearson correlation coefficient.
pub fn pearson(x: &[f64], y: &[f64]) -> Result<f64> {
    check_samples("pearson", x)?;
    check_samples("pearson", y)?;
    if x.len() != y.len() {
        return Err(Error::ShapeMismatch {
            op: "pearson",
            expected: format!("{} samples", x.len()),
            got: format!("{}", y.len()),
        });
    }
    if x.len() < 2 {
        return Err(Error::InvalidConfig("pearson needs at least 2 samples".into()));
    }
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (&a, &b) in x.iter().zip(y) {
        let dx = a - mx;
        let dy = b - my;
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::Degenerate(
            "pearson undefined for a zero-variance channel".into(),
        ));
    }
    Ok(sxy / (sxx.sqrt() * syy.sqrt()))
}

/// Alignment matrices between every latent channel and every action channel.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AlignmentReport {
    pub d_z: usize,
    pub d_action: usize,
    pub n_samples: usize,
    pub binning: BinningConfig,
    /// `|r(z_i, a_j)|`, row-major `d_z x d_action`; 0 where degenerate.
    pub pearson_abs: Vec<f64>,
    /// `I(z_i; a_j) / H(a_j)`, row-major; 0 where the action channel is degenerate.
    pub mi_ratio: Vec<f64>,
    /// `I(z_i; a_j)` in nats, row-major.
    pub mi_nats: Vec<f64>,
    /// `H(a_j)` in nats.
    pub entropy: Vec<f64>,
    /// Action channels with `H(a_j) = 0` or zero variance.
    pub degenerate_action: Vec<bool>,
    /// Latent channels with zero variance (correlation recorded as 0).
    pub degenerate_latent: Vec<bool>,
    /// Column-wise maxima over non-degenerate entries.
    pub max_pearson_per_channel: Vec<f64>,
    pub max_ratio_per_channel: Vec<f64>,
}

impl AlignmentReport {
    pub fn pearson_at(&self, i: usize, j: usize) -> f64 {
        self.pearson_abs[i * self.d_action + j]
    }

    pub fn ratio_at(&self, i: usize, j: usize) -> f64 {
        self.mi_ratio[i * self.d_action + j]
    }

    /// Mean over non-degenerate action channels of the per-channel max ratio.
    pub fn mean_max_ratio(&self) -> f64 {
        mean_over_active(&self.max_ratio_per_channel, &self.degenerate_action)
    }

    pub fn mean_max_pearson(&self) -> f64 {
        mean_over_active(&self.max_pearson_per_channel, &self.degenerate_action)
    }
}

fn mean_over_active(vals: &[f64], degenerate: &[bool]) -> f64 {
    let mut sum = 0.0;
    let mut count = 0usize;
    for (v, &d) in vals.iter().zip(degenerate) {
        if !d {
            sum += v;
            count += 1;
        }
    }
    if count == 0 {
        0.0
    } else {
        sum / count as f64
    }
}

/// Fill both alignment matrices plus entropies and per-channel maxima.
pub fn alignment_report(
    latents: &DenseMatrix,
    actions: &DenseMatrix,
    binning: &BinningConfig,
) -> Result<AlignmentReport> {
    binning.validate()?;
    if latents.rows() != actions.rows() {
        return Err(Error::ShapeMismatch {
            op: "alignment_report",
            expected: format!("{} rows", latents.rows()),
            got: format!("{}", actions.rows()),
        });
    }
    if latents.rows() < 2 {
        return Err(Error::InvalidConfig(
            "alignment_report needs at least 2 samples".into(),
        ));
    }
    let (d_z, d_a, n) = (latents.cols(), actions.cols(), latents.rows());
    if d_z == 0 || d_a == 0 {
        return Err(Error::InvalidConfig("empty channel set".into()));
    }

    let z_cols: Vec<Vec<f64>> = (0..d_z).map(|i| latents.column(i)).collect();
    let a_cols: Vec<Vec<f64>> = (0..d_a).map(|j| actions.column(j)).collect();

    let mut entropies = vec![0.0; d_a];
    let mut degenerate_action = vec![false; d_a];
    for j in 0..d_a {
        let h = entropy(&a_cols[j], binning)?;
        entropies[j] = h;
        let varies = a_cols[j].iter().any(|&v| v != a_cols[j][0]);
        degenerate_action[j] = h == 0.0 || !varies;
    }
    let degenerate_latent: Vec<bool> = z_cols
        .iter()
        .map(|c| c.iter().all(|&v| v == c[0]))
        .collect();

    let mut pearson_abs = vec![0.0; d_z * d_a];
    let mut mi_nats = vec![0.0; d_z * d_a];
    let mut mi_ratio = vec![0.0; d_z * d_a];
    for i in 0..d_z {
        for j in 0..d_a {
            let cell = i * d_a + j;
            mi_nats[cell] = mutual_information(&z_cols[i], &a_cols[j], binning)?;
            if !degenerate_action[j] {
                mi_ratio[cell] = mi_nats[cell] / entropies[j];
            }
            if !degenerate_latent[i] && !degenerate_action[j] {
                pearson_abs[cell] = pearson(&z_cols[i], &a_cols[j])?.abs();
            }
        }
    }

    let mut max_pearson = vec![0.0f64; d_a];
    let mut max_ratio = vec![0.0f64; d_a];
    for j in 0..d_a {
        if degenerate_action[j] {
            continue;
        }
        for i in 0..d_z {
            max_pearson[j] = max_pearson[j].max(pearson_abs[i * d_a + j]);
            max_ratio[j] = max_ratio[j].max(mi_ratio[i * d_a + j]);
        }
    }

    Ok(AlignmentReport {
        d_z,
        d_action: d_a,
        n_samples: n,
        binning: *binning,
        pearson_abs,
        mi_ratio,
        mi_nats,
        entropy: entropies,
        degenerate_action,
        degenerate_latent,
        max_pearson_per_channel: max_pearson,
        max_ratio_per_channel: max_ratio,
    })
}

/// Fixed-precision float formatting shared by every emitted CSV: 17
/// significant digits round-trip f64 exactly.
pub fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}

/// CSV rows `(i, j, abs_pearson, mi_nats, h_nats, ratio, degenerate_flag)`.
pub fn report_to_csv(report: &AlignmentReport) -> String {
    let mut out = String::from("z_dim,action_dim,abs_pearson,mi_nats,h_nats,ratio,degenerate\n");
    for i in 0..report.d_z {
        for j in 0..report.d_action {
            let cell = i * report.d_action + j;
            let degenerate = report.degenerate_action[j] || report.degenerate_latent[i];
            out.push_str(&format!(
                "{i},{j},{},{},{},{},{}\n",
                fmt_f64(report.pearson_abs[cell]),
                fmt_f64(report.mi_nats[cell]),
                fmt_f64(report.entropy[j]),
                fmt_f64(report.mi_ratio[cell]),
                u8::from(degenerate),
            ));
        }
    }
    out
}

/// Parse the CSV emitted by [`report_to_csv`] back into its matrices.
pub fn report_matrices_from_csv(csv: &str) -> Result<(Vec<(usize, usize, f64, f64)>, usize)> {
    let mut rows = Vec::new();
    let mut max_j = 0;
    for (ln, line) in csv.lines().enumerate().skip(1) {
        if line.trim().is_empty() {
            continue;
        }
        let parts: Vec<&str> = line.split(',').collect();
        if parts.len() != 7 {
            return Err(Error::Format(format!("csv line {ln}: expected 7 fields")));
        }
        let i: usize = parts[0]
            .parse()
            .map_err(|e| Error::Format(format!("csv line {ln}: {e}")))?;
        let j: usize = parts[1]
            .parse()
            .map_err(|e| Error::Format(format!("csv line {ln}: {e}")))?;
        let r: f64 = parts[2]
            .parse()
            .map_err(|e| Error::Format(format!("csv line {ln}: {e}")))?;
        let ratio: f64 = parts[5]
            .parse()
            .map_err(|e| Error::Format(format!("csv line {ln}: {e}")))?;
        max_j = max_j.max(j);
        rows.push((i, j, r, ratio));
    }
    Ok((rows, max_j + 1))
}
