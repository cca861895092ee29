//! Analytic per-token MAC model. One multiply-accumulate counts as one FLOP;
//! the LM head is included and the embedding lookup is free.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{FfnKind, ModelConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArchSpec {
    #[serde(default)]
    pub name: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub source: Option<String>,
    pub n_layers: usize,
    pub d_model: usize,
    pub d_ffn: usize,
    pub vocab_size: usize,
    pub ffn_kind: FfnKind,
    /// Query projection output width.
    pub q_dim: usize,
    /// Key and value projection output width each (smaller under MQA).
    pub kv_dim: usize,
    #[serde(default = "default_true")]
    pub include_head: bool,
}

fn default_true() -> bool {
    true
}

const PRESETS: [(&str, &str); 5] = [
    ("opt-1.3b", include_str!("../data/archs/opt-1.3b.json")),
    ("opt-2.7b", include_str!("../data/archs/opt-2.7b.json")),
    ("opt-6.7b", include_str!("../data/archs/opt-6.7b.json")),
    ("llama-7b", include_str!("../data/archs/llama-7b.json")),
    ("falcon-7b", include_str!("../data/archs/falcon-7b.json")),
];

impl ArchSpec {
    /// Named architecture shipped with the crate.
    pub fn preset(name: &str) -> Result<Self> {
        let (_, json) = PRESETS
            .iter()
            .find(|(n, _)| *n == name)
            .ok_or_else(|| {
                let known: Vec<&str> = PRESETS.iter().map(|(n, _)| *n).collect();
                Error::input(format!("unknown architecture `{name}` (known: {})", known.join(", ")))
            })?;
        Ok(serde_json::from_str(json)?)
    }

    pub fn preset_names() -> impl Iterator<Item = &'static str> {
        PRESETS.iter().map(|(n, _)| *n)
    }

    pub fn from_model(cfg: &ModelConfig, include_head: bool) -> Self {
        Self {
            name: "model".into(),
            source: None,
            n_layers: cfg.n_layers,
            d_model: cfg.d_model,
            d_ffn: cfg.d_ffn,
            vocab_size: cfg.vocab_size,
            ffn_kind: cfg.ffn_kind,
            q_dim: cfg.d_model,
            kv_dim: cfg.d_model,
            include_head,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("n_layers", self.n_layers),
            ("d_model", self.d_model),
            ("d_ffn", self.d_ffn),
            ("vocab_size", self.vocab_size),
            ("q_dim", self.q_dim),
            ("kv_dim", self.kv_dim),
        ] {
            if v == 0 {
                return Err(Error::config(format!("arch.{name}"), "must be positive"));
            }
        }
        Ok(())
    }
}

/// Input sparsity per projection group, as fractions.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct SparsityProfile {
    pub qkv_in: f64,
    pub up_in: f64,
    pub down_in: f64,
}

impl SparsityProfile {
    pub fn new(qkv_in: f64, up_in: f64, down_in: f64) -> Result<Self> {
        let p = Self { qkv_in, up_in, down_in };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("qkv_in", self.qkv_in), ("up_in", self.up_in), ("down_in", self.down_in)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::config(format!("profile.{name}"), format!("{v} outside [0, 1]")));
            }
        }
        Ok(())
    }

    /// Parses `qkv,up,down`.
    pub fn parse(s: &str) -> Result<Self> {
        let parts: Vec<f64> = s
            .split(',')
            .map(|p| p.trim().parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| Error::config("profile", e.to_string()))?;
        match parts.as_slice() {
            [q, u, d] => Self::new(*q, *u, *d),
            _ => Err(Error::config("profile", "expected three comma-separated fractions")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SiteFlops {
    pub site: String,
    pub dense_macs: f64,
    pub effective_macs: f64,
    pub share: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlopsReport {
    pub arch: String,
    pub profile: SparsityProfile,
    pub sites: Vec<SiteFlops>,
    pub dense_total: f64,
    pub effective_total: f64,
}

impl FlopsReport {
    pub fn site(&self, name: &str) -> Option<&SiteFlops> {
        self.sites.iter().find(|s| s.site == name)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("site,dense_macs,effective_macs,share\n");
        for s in &self.sites {
            let _ = writeln!(out, "{},{},{},{}", s.site, s.dense_macs, s.effective_macs, s.share);
        }
        out
    }
}

/// Dense MACs as `(site, macs)` in a fixed order. Gate appears for gated FFNs
/// only; head only when included.
fn dense_sites(arch: &ArchSpec) -> Vec<(&'static str, f64)> {
    let l = arch.n_layers as f64;
    let d = arch.d_model as f64;
    let f = arch.d_ffn as f64;
    let mut sites = vec![
        ("qkv", l * d * (arch.q_dim + 2 * arch.kv_dim) as f64),
        ("o", l * arch.q_dim as f64 * d),
    ];
    if arch.ffn_kind == FfnKind::Gated {
        sites.push(("gate", l * d * f));
    }
    sites.push(("up", l * d * f));
    sites.push(("down", l * f * d));
    if arch.include_head {
        sites.push(("head", arch.vocab_size as f64 * d));
    }
    sites
}

fn retained(site: &str, kind: FfnKind, p: &SparsityProfile) -> f64 {
    match (site, kind) {
        ("qkv", _) => 1.0 - p.qkv_in,
        ("gate", _) => 1.0 - p.up_in,
        ("up", FfnKind::Plain) => 1.0 - p.up_in,
        ("down", FfnKind::Plain) => 1.0 - p.down_in,
        // a zero gate output skips both its up column and its down row
        ("up" | "down", FfnKind::Gated) => 1.0 - p.up_in.max(p.down_in),
        _ => 1.0,
    }
}

pub fn dense_macs(arch: &ArchSpec) -> Result<FlopsReport> {
    effective_macs(arch, &SparsityProfile::default())
}

pub fn effective_macs(arch: &ArchSpec, profile: &SparsityProfile) -> Result<FlopsReport> {
    arch.validate()?;
    profile.validate()?;
    let dense = dense_sites(arch);
    let dense_total: f64 = dense.iter().map(|(_, m)| m).sum();
    let sites: Vec<SiteFlops> = dense
        .iter()
        .map(|&(site, m)| SiteFlops {
            site: site.to_string(),
            dense_macs: m,
            effective_macs: m * retained(site, arch.ffn_kind, profile),
            share: m / dense_total,
        })
        .collect();
    let effective_total = sites.iter().map(|s| s.effective_macs).sum();
    Ok(FlopsReport {
        arch: arch.name.clone(),
        profile: *profile,
        sites,
        dense_total,
        effective_total,
    })
}

/// Fractions of the dense total per projection group.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ComputeShares {
    pub qkv: f64,
    pub o: f64,
    /// Gate plus up.
    pub up: f64,
    pub down: f64,
    pub head: f64,
}

impl ComputeShares {
    /// Share of the projections fed by a normalized stream (QKV, up, gate).
    pub fn qkv_plus_up(&self) -> f64 {
        self.qkv + self.up
    }
}

pub fn compute_shares(arch: &ArchSpec) -> Result<ComputeShares> {
    let r = dense_macs(arch)?;
    let share = |name: &str| r.site(name).map_or(0.0, |s| s.share);
    Ok(ComputeShares {
        qkv: share("qkv"),
        o: share("o"),
        up: share("up") + share("gate"),
        down: share("down"),
        head: share("head"),
    })
}

/// Dense MACs of `arch` with every hidden width multiplied by `k`.
pub fn width_scaled_macs(arch: &ArchSpec, k: f64) -> f64 {
    dense_sites(arch)
        .iter()
        .map(|&(site, m)| if site == "head" { m * k } else { m * k * k })
        .sum()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatchedCompare {
    pub effective_macs_a: f64,
    pub dense_macs_b: f64,
    /// `effective_macs_a − dense_macs_b`
    pub mac_gap: f64,
    /// Width multiplier applied to `arch_b` so its dense MACs equal the
    /// effective MACs of `arch_a`.
    pub scale_factor: f64,
}

/// Finds the width scale of `arch_b` whose dense cost matches the sparse cost
/// of `arch_a`, by bisection on the monotone cost curve.
pub fn flops_matched_compare(
    arch_a: &ArchSpec,
    profile_a: &SparsityProfile,
    arch_b: &ArchSpec,
) -> Result<MatchedCompare> {
    arch_b.validate()?;
    let target = effective_macs(arch_a, profile_a)?.effective_total;
    let dense_b = dense_macs(arch_b)?.dense_total;
    let (mut lo, mut hi) = (0.0_f64, 1.0_f64);
    while width_scaled_macs(arch_b, hi) < target {
        hi *= 2.0;
    }
    while hi - lo > 1e-9 * hi.max(1.0) {
        let mid = 0.5 * (lo + hi);
        if width_scaled_macs(arch_b, mid) < target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(MatchedCompare {
        effective_macs_a: target,
        dense_macs_b: dense_b,
        mac_gap: target - dense_b,
        scale_factor: 0.5 * (lo + hi),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn unit(kind: FfnKind) -> ArchSpec {
        ArchSpec {
            name: "unit".into(),
            source: None,
            n_layers: 1,
            d_model: 1,
            d_ffn: 1,
            vocab_size: 1,
            ffn_kind: kind,
            q_dim: 1,
            kv_dim: 1,
            include_head: false,
        }
    }

    #[test]
    fn unit_dimensions() {
        assert_eq!(dense_macs(&unit(FfnKind::Plain)).unwrap().dense_total, 6.0);
        assert_eq!(dense_macs(&unit(FfnKind::Gated)).unwrap().dense_total, 7.0);
    }

    #[test]
    fn square_toy_down_share() {
        let mut a = unit(FfnKind::Plain);
        a.d_model = 32;
        a.d_ffn = 32;
        a.q_dim = 32;
        a.kv_dim = 32;
        a.n_layers = 3;
        let s = compute_shares(&a).unwrap();
        assert!((s.down - 1.0 / 6.0).abs() < 1e-15);
    }

    #[test]
    fn zero_profile_is_dense() {
        for name in ArchSpec::preset_names() {
            let a = ArchSpec::preset(name).unwrap();
            let r = dense_macs(&a).unwrap();
            assert_eq!(r.dense_total, r.effective_total);
            let shares: f64 = r.sites.iter().map(|s| s.share).sum();
            assert!((shares - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn effective_is_monotone_in_each_component() {
        for name in ["opt-6.7b", "llama-7b"] {
            let a = ArchSpec::preset(name).unwrap();
            let grid = [0.0, 0.2, 0.5, 0.8, 1.0];
            for &q in &grid {
                for &u in &grid {
                    for w in grid.windows(2) {
                        let lo = effective_macs(&a, &SparsityProfile::new(q, u, w[0]).unwrap()).unwrap();
                        let hi = effective_macs(&a, &SparsityProfile::new(q, u, w[1]).unwrap()).unwrap();
                        assert!(hi.effective_total <= lo.effective_total);
                        let lo = effective_macs(&a, &SparsityProfile::new(w[0], u, q).unwrap()).unwrap();
                        let hi = effective_macs(&a, &SparsityProfile::new(w[1], u, q).unwrap()).unwrap();
                        assert!(hi.effective_total <= lo.effective_total);
                        let lo = effective_macs(&a, &SparsityProfile::new(q, w[0], u).unwrap()).unwrap();
                        let hi = effective_macs(&a, &SparsityProfile::new(q, w[1], u).unwrap()).unwrap();
                        assert!(hi.effective_total <= lo.effective_total);
                    }
                }
            }
        }
    }

    #[test]
    fn profile_parsing() {
        let p = SparsityProfile::parse("0, 0,0.97").unwrap();
        assert_eq!(p, SparsityProfile::new(0.0, 0.0, 0.97).unwrap());
        assert!(SparsityProfile::parse("0,0").is_err());
        assert!(SparsityProfile::parse("0,0,1.5").is_err());
        assert!(ArchSpec::preset("gpt-5").is_err());
    }

    #[test]
    fn csv_header() {
        let r = dense_macs(&unit(FfnKind::Plain)).unwrap();
        assert!(r.to_csv().starts_with("site,dense_macs,effective_macs,share\nqkv,3,3,0.5\n"));
    }
}
