//! Source-side upsampling so the CTC lattice is longer than the target.
//!
//! Each output position `j` is assigned the source position `i` whose
//! insertion point `(i + 1)·r − r/2` is nearest to `j`, where `r` is the
//! realized ratio `L / |x|` and `L = ⌊s_eff·|x|⌋`. Ties go to the larger `i`,
//! which reproduces plain duplication for integer ratios. Ratios are exact
//! fractions so boundaries never depend on floating-point rounding.

use std::fmt;
use std::str::FromStr;

use num_rational::Ratio;

use crate::error::{Error, Result};

/// Exact positive upsampling ratio.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct UpsampleRatio(Ratio<u64>);

impl UpsampleRatio {
    pub fn new(numer: u64, denom: u64) -> Result<Self> {
        if numer == 0 || denom == 0 {
            return Err(Error::invalid(format!(
                "ratio {numer}/{denom} must be positive"
            )));
        }
        Ok(UpsampleRatio(Ratio::new(numer, denom)))
    }

    pub fn integer(s: u64) -> Result<Self> {
        Self::new(s, 1)
    }

    pub fn numer(&self) -> u64 {
        *self.0.numer()
    }

    pub fn denom(&self) -> u64 {
        *self.0.denom()
    }

    pub fn as_f64(&self) -> f64 {
        self.numer() as f64 / self.denom() as f64
    }

    /// `⌊self · n⌋`.
    pub fn scaled_floor(&self, n: usize) -> usize {
        ((self.numer() as u128 * n as u128) / self.denom() as u128) as usize
    }
}

impl fmt::Display for UpsampleRatio {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.denom() == 1 {
            write!(f, "{}", self.numer())
        } else {
            write!(f, "{}/{}", self.numer(), self.denom())
        }
    }
}

/// Accepts `"4"`, `"3/2"` or a finite decimal such as `"2.56"`.
impl FromStr for UpsampleRatio {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::invalid(format!("cannot parse ratio {s:?}"));
        let s = s.trim();
        if let Some((n, d)) = s.split_once('/') {
            let n = n.trim().parse().map_err(|_| bad())?;
            let d = d.trim().parse().map_err(|_| bad())?;
            return Self::new(n, d);
        }
        let (int, frac) = s.split_once('.').unwrap_or((s, ""));
        if frac.len() > 9 || !frac.chars().all(|c| c.is_ascii_digit()) {
            return Err(bad());
        }
        let int: u64 = if int.is_empty() {
            0
        } else {
            int.parse().map_err(|_| bad())?
        };
        let denom = 10u64.pow(frac.len() as u32);
        let frac: u64 = if frac.is_empty() {
            0
        } else {
            frac.parse().map_err(|_| bad())?
        };
        let numer = int
            .checked_mul(denom)
            .and_then(|v| v.checked_add(frac))
            .ok_or_else(bad)?;
        Self::new(numer, denom)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Scheme {
    /// Duplicate source tokens.
    InsertTokens,
    /// Keep each source token once and fill the remaining slots with `<mask>`.
    InsertMasks,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RatioMode {
    /// Fixed ratio; positions beyond the budget are truncated.
    Fixed,
    /// Ratio shrinks for long inputs so the output fits the budget.
    Dynamic,
}

impl FromStr for Scheme {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "it" => Ok(Scheme::InsertTokens),
            "im" => Ok(Scheme::InsertMasks),
            _ => Err(Error::invalid(format!(
                "unknown scheme {s:?} (expected it|im)"
            ))),
        }
    }
}

impl FromStr for RatioMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "fr" => Ok(RatioMode::Fixed),
            "dr" => Ok(RatioMode::Dynamic),
            _ => Err(Error::invalid(format!(
                "unknown ratio mode {s:?} (expected fr|dr)"
            ))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct UpsampleConfig {
    pub scheme: Scheme,
    pub ratio: UpsampleRatio,
    pub mode: RatioMode,
    /// Maximum number of positions the encoder can embed.
    pub max_positions: usize,
}

impl UpsampleConfig {
    pub fn new(
        scheme: Scheme,
        ratio: UpsampleRatio,
        mode: RatioMode,
        max_positions: usize,
    ) -> Result<Self> {
        if max_positions == 0 {
            return Err(Error::invalid("position budget must be at least 1"));
        }
        Ok(UpsampleConfig {
            scheme,
            ratio,
            mode,
            max_positions,
        })
    }
}

/// Ratio actually applied to a source of `src_len` tokens.
pub fn effective_ratio(src_len: usize, cfg: &UpsampleConfig) -> Result<UpsampleRatio> {
    if src_len == 0 {
        return Err(Error::invalid("empty source sequence"));
    }
    match cfg.mode {
        RatioMode::Fixed => Ok(cfg.ratio),
        RatioMode::Dynamic => {
            let scaled = cfg.ratio.0 * Ratio::from_integer(src_len as u64);
            if scaled <= Ratio::from_integer(cfg.max_positions as u64) {
                Ok(cfg.ratio)
            } else {
                UpsampleRatio::new(cfg.max_positions as u64, src_len as u64)
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct UpsampledSource {
    pub tokens: Vec<u32>,
    /// Source index assigned to each output position.
    pub provenance: Vec<usize>,
    /// Whether the position holds `<mask>` rather than a source token.
    pub masked: Vec<bool>,
}

impl UpsampledSource {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

/// Source index for output position `j` out of `out_len`, given `src_len`
/// source tokens.
fn assigned_source(j: usize, src_len: usize, out_len: usize) -> usize {
    ((j as u128 * src_len as u128) / out_len as u128) as usize
}

pub fn upsample_tokens(x: &[u32], cfg: &UpsampleConfig, mask_id: u32) -> Result<UpsampledSource> {
    let ratio = effective_ratio(x.len(), cfg)?;
    let full_len = ratio.scaled_floor(x.len());
    if full_len == 0 {
        return Err(Error::invalid(format!(
            "ratio {ratio} gives an empty upsampled sequence for {} tokens",
            x.len()
        )));
    }
    let out_len = full_len.min(cfg.max_positions);

    let mut tokens = Vec::with_capacity(out_len);
    let mut provenance = Vec::with_capacity(out_len);
    let mut masked = Vec::with_capacity(out_len);
    let mut prev = None;
    for j in 0..out_len {
        let i = assigned_source(j, x.len(), full_len);
        let first = prev != Some(i);
        prev = Some(i);
        let mask = cfg.scheme == Scheme::InsertMasks && !first;
        tokens.push(if mask { mask_id } else { x[i] });
        provenance.push(i);
        masked.push(mask);
    }
    Ok(UpsampledSource {
        tokens,
        provenance,
        masked,
    })
}

/// Distance-based soft copy weights: row `j` is
/// `softmax_i(−|j − i| / tau)` over the `src_len` inputs.
pub fn softcopy_weights(src_len: usize, out_len: usize, tau: f64) -> Result<Vec<Vec<f64>>> {
    if !(tau > 0.0) || !tau.is_finite() {
        return Err(Error::invalid(format!(
            "temperature {tau} must be positive"
        )));
    }
    Ok((0..out_len)
        .map(|j| {
            let scores: Vec<f64> = (0..src_len)
                .map(|i| -(j as f64 - i as f64).abs() / tau)
                .collect();
            let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
            let z: f64 = exps.iter().sum();
            exps.into_iter().map(|e| e / z).collect()
        })
        .collect())
}

/// Soft copy of hidden states to `⌊s·|h|⌋` positions.
pub fn softcopy(h: &[Vec<f64>], s: UpsampleRatio, tau: f64) -> Result<Vec<Vec<f64>>> {
    if h.is_empty() {
        return Err(Error::invalid("softcopy of an empty sequence"));
    }
    let d = h[0].len();
    if h.iter().any(|v| v.len() != d) {
        return Err(Error::Shape("softcopy inputs differ in dimension".into()));
    }
    let weights = softcopy_weights(h.len(), s.scaled_floor(h.len()), tau)?;
    Ok(weights
        .iter()
        .map(|row| {
            let mut out = vec![0.0; d];
            for (w, hi) in row.iter().zip(h) {
                for (o, v) in out.iter_mut().zip(hi) {
                    *o += w * v;
                }
            }
            out
        })
        .collect())
}
