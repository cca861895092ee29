//! Per-site sparsity reports, preactivation histograms and aggregated-sparsity
//! traces.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::activations::count_sparse;
use crate::error::{Error, Result};
use crate::flops::SparsityProfile;
use crate::model::{Hooks, PreactSite, Site};

/// Exact zero/entry tallies for one `(layer, site)`.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SiteTally {
    pub sparse: u64,
    pub entries: u64,
    pub tokens: u64,
}

impl SiteTally {
    pub fn sparsity(&self) -> f64 {
        if self.entries == 0 {
            0.0
        } else {
            self.sparse as f64 / self.entries as f64
        }
    }
}

/// Mean input sparsity per `(layer, site)` over the observed tokens.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SparsityReport {
    pub tau: f64,
    pub tallies: BTreeMap<(usize, Site), SiteTally>,
}

impl SparsityReport {
    pub fn token_count(&self) -> u64 {
        self.tallies.values().map(|t| t.tokens).max().unwrap_or(0)
    }

    pub fn get(&self, layer: usize, site: Site) -> Option<f64> {
        self.tallies.get(&(layer, site)).map(SiteTally::sparsity)
    }

    pub fn n_layers(&self) -> usize {
        self.tallies.keys().map(|(l, _)| l + 1).max().unwrap_or(0)
    }

    /// Mean over layers for one site.
    pub fn site_mean(&self, site: Site) -> f64 {
        let vals: Vec<f64> = self
            .tallies
            .iter()
            .filter(|((_, s), _)| *s == site)
            .map(|(_, t)| t.sparsity())
            .collect();
        if vals.is_empty() {
            0.0
        } else {
            vals.iter().sum::<f64>() / vals.len() as f64
        }
    }

    pub fn per_layer(&self, site: Site) -> Vec<f64> {
        (0..self.n_layers())
            .map(|l| self.get(l, site).unwrap_or(0.0))
            .collect()
    }

    pub fn profile(&self) -> SparsityProfile {
        SparsityProfile {
            qkv_in: self.site_mean(Site::QkvIn),
            up_in: self.site_mean(Site::UpIn),
            down_in: self.site_mean(Site::DownIn),
        }
    }

    pub fn merge(&mut self, other: &SparsityReport) -> Result<()> {
        if self.tau != other.tau {
            return Err(Error::input("cannot merge reports recorded at different thresholds"));
        }
        for (k, t) in &other.tallies {
            let e = self.tallies.entry(*k).or_default();
            e.sparse += t.sparse;
            e.entries += t.entries;
            e.tokens += t.tokens;
        }
        Ok(())
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("layer,site,sparsity\n");
        for ((layer, site), t) in &self.tallies {
            let _ = writeln!(out, "{layer},{},{}", site.as_str(), t.sparsity());
        }
        out
    }
}

/// Hook that accumulates [`SparsityReport`] tallies.
#[derive(Debug, Clone)]
pub struct SparsityRecorder {
    tau: f64,
    tallies: BTreeMap<(usize, Site), SiteTally>,
}

impl SparsityRecorder {
    pub fn new(tau: f64) -> Self {
        Self {
            tau,
            tallies: BTreeMap::new(),
        }
    }

    /// Finishes the recording. Fails if no token was observed.
    pub fn report(&self) -> Result<SparsityReport> {
        if self.tallies.values().all(|t| t.tokens == 0) {
            return Err(Error::input("no tokens observed"));
        }
        Ok(SparsityReport {
            tau: self.tau,
            tallies: self.tallies.clone(),
        })
    }
}

impl Hooks for SparsityRecorder {
    fn on_site_input(&mut self, layer: usize, site: Site, _pos: usize, input: &[f64]) {
        let t = self.tallies.entry((layer, site)).or_default();
        t.sparse += count_sparse(input, self.tau) as u64;
        t.entries += input.len() as u64;
        t.tokens += 1;
    }
}

/// Fixed-range histogram with under/overflow bins.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreactHistogram {
    lo: f64,
    hi: f64,
    counts: Vec<u64>,
    underflow: u64,
    overflow: u64,
    total: u64,
}

impl Default for PreactHistogram {
    fn default() -> Self {
        Self::new(-10.0, 10.0, 400).expect("default range is valid")
    }
}

impl PreactHistogram {
    pub fn new(lo: f64, hi: f64, n_bins: usize) -> Result<Self> {
        if !(lo < hi) || !lo.is_finite() || !hi.is_finite() || n_bins == 0 {
            return Err(Error::input(format!("invalid histogram range [{lo}, {hi}] x {n_bins}")));
        }
        Ok(Self {
            lo,
            hi,
            counts: vec![0; n_bins],
            underflow: 0,
            overflow: 0,
            total: 0,
        })
    }

    pub fn n_bins(&self) -> usize {
        self.counts.len()
    }

    pub fn bin_width(&self) -> f64 {
        (self.hi - self.lo) / self.counts.len() as f64
    }

    pub fn range(&self) -> (f64, f64) {
        (self.lo, self.hi)
    }

    pub fn counts(&self) -> &[u64] {
        &self.counts
    }

    pub fn underflow(&self) -> u64 {
        self.underflow
    }

    pub fn overflow(&self) -> u64 {
        self.overflow
    }

    pub fn total(&self) -> u64 {
        self.total
    }

    pub fn bin_edges(&self, i: usize) -> (f64, f64) {
        let n = self.counts.len() as f64;
        let span = self.hi - self.lo;
        (self.lo + span * i as f64 / n, self.lo + span * (i + 1) as f64 / n)
    }

    pub fn record(&mut self, x: f64) {
        self.total += 1;
        if x < self.lo {
            self.underflow += 1;
        } else if x >= self.hi || x.is_nan() {
            self.overflow += 1;
        } else {
            let n = self.counts.len();
            let idx = ((x - self.lo) * n as f64 / (self.hi - self.lo)).floor() as usize;
            self.counts[idx.min(n - 1)] += 1;
        }
    }

    pub fn extend(&mut self, xs: impl IntoIterator<Item = f64>) {
        for x in xs {
            self.record(x);
        }
    }

    /// Smallest bin upper edge whose cumulative mass reaches `q`. Underflow
    /// counts as mass at `lo`; mass in overflow resolves to `hi`.
    pub fn quantile(&self, q: f64) -> Result<f64> {
        if self.total == 0 {
            return Err(Error::input("quantile of an empty histogram"));
        }
        if !(q > 0.0 && q < 1.0) {
            return Err(Error::input(format!("quantile level must lie in (0, 1), got {q}")));
        }
        let need = q * self.total as f64;
        let mut cum = self.underflow;
        if cum as f64 >= need {
            return Ok(self.lo);
        }
        for (i, &c) in self.counts.iter().enumerate() {
            cum += c;
            if cum as f64 >= need {
                return Ok(self.bin_edges(i).1);
            }
        }
        Ok(self.hi)
    }

    /// Fraction of mass at or below `x`, resolved to whole bins.
    pub fn mass_below(&self, x: f64) -> f64 {
        if self.total == 0 {
            return 0.0;
        }
        let mut cum = self.underflow;
        for (i, &c) in self.counts.iter().enumerate() {
            if self.bin_edges(i).1 <= x {
                cum += c;
            }
        }
        cum as f64 / self.total as f64
    }

    pub fn merge(&mut self, other: &PreactHistogram) -> Result<()> {
        if self.lo != other.lo || self.hi != other.hi || self.counts.len() != other.counts.len() {
            return Err(Error::input("cannot merge histograms with different binning"));
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        self.underflow += other.underflow;
        self.overflow += other.overflow;
        self.total += other.total;
        Ok(())
    }

    /// `bin_lo,bin_hi,count`; underflow and overflow appear as the first and
    /// last rows with infinite outer edges.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("bin_lo,bin_hi,count\n");
        let _ = writeln!(out, "-inf,{},{}", self.lo, self.underflow);
        for (i, c) in self.counts.iter().enumerate() {
            let (a, b) = self.bin_edges(i);
            let _ = writeln!(out, "{a},{b},{c}");
        }
        let _ = writeln!(out, "{},inf,{}", self.hi, self.overflow);
        out
    }
}

/// Total-variation distance between the normalized histograms, counting the
/// under/overflow bins.
pub fn total_variation(a: &PreactHistogram, b: &PreactHistogram) -> Result<f64> {
    if a.lo != b.lo || a.hi != b.hi || a.counts.len() != b.counts.len() {
        return Err(Error::input("histograms have different binning"));
    }
    if a.total == 0 || b.total == 0 {
        return Err(Error::input("total variation of an empty histogram"));
    }
    let (na, nb) = (a.total as f64, b.total as f64);
    let mut d = (a.underflow as f64 / na - b.underflow as f64 / nb).abs()
        + (a.overflow as f64 / na - b.overflow as f64 / nb).abs();
    for (x, y) in a.counts.iter().zip(&b.counts) {
        d += (*x as f64 / na - *y as f64 / nb).abs();
    }
    Ok(0.5 * d)
}

/// Hook that histograms preactivations at one site, pooled over layers
/// unless `layer` is set.
#[derive(Debug, Clone)]
pub struct HistogramRecorder {
    pub site: PreactSite,
    pub layer: Option<usize>,
    pub hist: PreactHistogram,
}

impl HistogramRecorder {
    pub fn new(site: PreactSite, hist: PreactHistogram) -> Self {
        Self {
            site,
            layer: None,
            hist,
        }
    }
}

impl Hooks for HistogramRecorder {
    fn on_preact(&mut self, layer: usize, site: PreactSite, _pos: usize, preact: &[f64]) {
        if site == self.site && self.layer.map_or(true, |l| l == layer) {
            self.hist.extend(preact.iter().copied());
        }
    }
}

/// Bitset of FFN neurons activated so far.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ActiveSet {
    bits: Vec<bool>,
    len: usize,
}

impl ActiveSet {
    pub fn new(d_ffn: usize) -> Self {
        Self {
            bits: vec![false; d_ffn],
            len: 0,
        }
    }

    pub fn capacity(&self) -> usize {
        self.bits.len()
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn contains(&self, i: usize) -> bool {
        self.bits.get(i).copied().unwrap_or(false)
    }

    /// Returns true if `i` was not already present.
    pub fn insert(&mut self, i: usize) -> Result<bool> {
        let dim = self.bits.len();
        let slot = self
            .bits
            .get_mut(i)
            .ok_or(Error::IndexOutOfRange { index: i, dim })?;
        if *slot {
            Ok(false)
        } else {
            *slot = true;
            self.len += 1;
            Ok(true)
        }
    }

    pub fn indices(&self) -> impl Iterator<Item = usize> + '_ {
        self.bits.iter().enumerate().filter(|(_, b)| **b).map(|(i, _)| i)
    }
}

/// Per-layer fraction of FFN neurons never activated within the first `t`
/// tokens, for `t = 1..=t_max`.
#[derive(Debug, Clone)]
pub struct AggregatedTrace {
    d_ffn: usize,
    active: Vec<ActiveSet>,
    values: Vec<Vec<f64>>,
}

impl AggregatedTrace {
    pub fn new(n_layers: usize, d_ffn: usize) -> Self {
        Self {
            d_ffn,
            active: vec![ActiveSet::new(d_ffn); n_layers],
            values: vec![Vec::new(); n_layers],
        }
    }

    pub fn d_ffn(&self) -> usize {
        self.d_ffn
    }

    pub fn n_layers(&self) -> usize {
        self.values.len()
    }

    pub fn t_max(&self) -> usize {
        self.values.iter().map(Vec::len).min().unwrap_or(0)
    }

    pub fn layer(&self, layer: usize) -> &[f64] {
        &self.values[layer]
    }

    pub fn active_set(&self, layer: usize) -> &ActiveSet {
        &self.active[layer]
    }

    /// Advances every layer by one token given its active neuron indices.
    pub fn update(&mut self, masks: &[Vec<usize>]) -> Result<()> {
        if masks.len() != self.values.len() {
            return Err(Error::DimensionMismatch {
                expected: self.values.len(),
                found: masks.len(),
            });
        }
        for mask in masks {
            if let Some(&bad) = mask.iter().find(|&&i| i >= self.d_ffn) {
                return Err(Error::IndexOutOfRange {
                    index: bad,
                    dim: self.d_ffn,
                });
            }
        }
        for (layer, mask) in masks.iter().enumerate() {
            self.update_layer(layer, mask.iter().copied())?;
        }
        Ok(())
    }

    /// Advances a single layer by one token.
    pub fn update_layer(&mut self, layer: usize, mask: impl IntoIterator<Item = usize>) -> Result<()> {
        let set = &mut self.active[layer];
        for i in mask {
            set.insert(i)?;
        }
        let unused = 1.0 - set.len() as f64 / self.d_ffn as f64;
        self.values[layer].push(unused);
        Ok(())
    }

    /// Value at token count `t` (1-based), averaged over layers.
    pub fn mean_at(&self, t: usize) -> Option<f64> {
        if t == 0 || t > self.t_max() {
            return None;
        }
        Some(self.values.iter().map(|v| v[t - 1]).sum::<f64>() / self.values.len() as f64)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("t,layer,unused_fraction\n");
        for t in 0..self.t_max() {
            for (layer, v) in self.values.iter().enumerate() {
                let _ = writeln!(out, "{},{layer},{}", t + 1, v[t]);
            }
        }
        out
    }
}

/// Expected unused fraction after `t` tokens if each token activated neurons
/// independently at per-token sparsity `s`: `s^t`.
pub fn random_baseline(s: &[f64], t: u32) -> Result<Vec<f64>> {
    s.iter()
        .map(|&si| {
            if (0.0..=1.0).contains(&si) {
                Ok(si.powi(t as i32))
            } else {
                Err(Error::input(format!("sparsity {si} outside [0, 1]")))
            }
        })
        .collect()
}

/// Hook that builds an [`AggregatedTrace`] from down-projection inputs and
/// tracks the mean per-token sparsity of each layer.
#[derive(Debug, Clone)]
pub struct TraceRecorder {
    tau: f64,
    trace: AggregatedTrace,
    sparse: Vec<u64>,
    entries: Vec<u64>,
}

impl TraceRecorder {
    pub fn new(n_layers: usize, d_ffn: usize, tau: f64) -> Self {
        Self {
            tau,
            trace: AggregatedTrace::new(n_layers, d_ffn),
            sparse: vec![0; n_layers],
            entries: vec![0; n_layers],
        }
    }

    pub fn trace(&self) -> &AggregatedTrace {
        &self.trace
    }

    pub fn into_trace(self) -> AggregatedTrace {
        self.trace
    }

    /// Mean per-token sparsity of each layer's down-projection input.
    pub fn per_token_sparsity(&self) -> Vec<f64> {
        self.sparse
            .iter()
            .zip(&self.entries)
            .map(|(&s, &e)| if e == 0 { 0.0 } else { s as f64 / e as f64 })
            .collect()
    }
}

impl Hooks for TraceRecorder {
    fn on_site_input(&mut self, layer: usize, site: Site, _pos: usize, input: &[f64]) {
        if site != Site::DownIn {
            return;
        }
        let tau = self.tau;
        let active = input
            .iter()
            .enumerate()
            .filter(|(_, v)| v.abs() > tau)
            .map(|(i, _)| i);
        // indices come from the input itself, so they are always in range
        let _ = self.trace.update_layer(layer, active);
        self.sparse[layer] += count_sparse(input, tau) as u64;
        self.entries[layer] += input.len() as u64;
    }
}
