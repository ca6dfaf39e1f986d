//! Entropy gate choosing between auto-regressive and parallel decoding.

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Which vector the gate softmaxes before taking the entropy.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum EntropySource {
    /// Softmax over the `d` components of the last hidden state.
    #[default]
    Hidden,
    /// Softmax over the LM-head logits.
    Logits,
}

impl std::str::FromStr for EntropySource {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "hidden" => Ok(EntropySource::Hidden),
            "logits" => Ok(EntropySource::Logits),
            other => Err(Error::config(format!("unknown gate source {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GateConfig {
    pub enabled: bool,
    /// Threshold in bits; `f64::INFINITY` never routes to auto-regressive decoding.
    pub threshold: f64,
    pub source: EntropySource,
}

impl Default for GateConfig {
    fn default() -> Self {
        GateConfig {
            enabled: true,
            threshold: f64::INFINITY,
            source: EntropySource::Hidden,
        }
    }
}

impl GateConfig {
    pub fn disabled() -> Self {
        GateConfig {
            enabled: false,
            ..Default::default()
        }
    }

    pub fn with_threshold(threshold: f64, source: EntropySource) -> Self {
        GateConfig {
            enabled: true,
            threshold,
            source,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.threshold.is_nan() || self.threshold < 0.0 {
            return Err(Error::config(format!(
                "gate.threshold must be ≥ 0, got {}",
                self.threshold
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Hash)]
#[serde(rename_all = "lowercase")]
pub enum Route {
    Autoregressive,
    Parallel,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GateDecision {
    /// Entropy of the configured source, in bits.
    pub entropy: f64,
    pub route: Route,
}

/// Shannon entropy (bits) of `softmax(v)`, with `0·log 0 = 0`.
pub fn entropy(v: &[f32]) -> f64 {
    if v.is_empty() {
        return 0.0;
    }
    let max = v.iter().copied().fold(f32::NEG_INFINITY, f32::max) as f64;
    let exps: Vec<f64> = v.iter().map(|&x| (x as f64 - max).exp()).collect();
    let z: f64 = exps.iter().sum();
    let h: f64 = exps
        .iter()
        .filter(|&&e| e > 0.0)
        .map(|&e| {
            let p = e / z;
            -p * p.log2()
        })
        .sum();
    // Rounding can push the sum marginally outside [0, log2 K].
    h.clamp(0.0, (v.len() as f64).log2())
}

/// Routes by threshold: `S > T` is auto-regressive, `S ≤ T` parallel.
pub fn route_for(cfg: &GateConfig, s: f64) -> Route {
    if cfg.enabled && s > cfg.threshold {
        Route::Autoregressive
    } else {
        Route::Parallel
    }
}

pub fn decide(cfg: &GateConfig, h_last: &[f32], logits: &[f32]) -> GateDecision {
    let s = match cfg.source {
        EntropySource::Hidden => entropy(h_last),
        EntropySource::Logits => entropy(logits),
    };
    GateDecision {
        entropy: s,
        route: route_for(cfg, s),
    }
}

/// 32 evenly spaced thresholds over `[0, log2 K]`.
pub fn threshold_grid(k: usize) -> Vec<f64> {
    let top = (k.max(1) as f64).log2();
    (0..32).map(|i| top * i as f64 / 31.0).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn entropy_examples() {
        assert!(entropy(&[1000.0, 0.0, 0.0, 0.0]) <= 1e-6);
        assert_eq!(entropy(&[3.5; 4]), 2.0);
        let p: Vec<f64> = {
            let z: f64 = (1..=3).map(|i| (i as f64).exp()).sum();
            (1..=3).map(|i| (i as f64).exp() / z).collect()
        };
        let oracle: f64 = p.iter().map(|p| -p * p.log2()).sum();
        let h = entropy(&[1.0, 2.0, 3.0]);
        assert!((h - oracle).abs() < 1e-9);
        assert!((h - 1.200_893).abs() < 1e-4);
    }

    #[test]
    fn decide_thresholds() {
        let cfg = GateConfig::with_threshold(0.0, EntropySource::Hidden);
        assert_eq!(decide(&cfg, &[0.1, 0.2], &[]).route, Route::Autoregressive);
        let off = GateConfig::disabled();
        assert_eq!(decide(&off, &[0.1, 0.2], &[]).route, Route::Parallel);
        let inf = GateConfig::with_threshold(f64::INFINITY, EntropySource::Hidden);
        assert_eq!(decide(&inf, &[0.0; 8], &[]).route, Route::Parallel);

        let paper = GateConfig::with_threshold(0.59, EntropySource::Hidden);
        assert_eq!(route_for(&paper, 0.58), Route::Parallel);
        assert_eq!(route_for(&paper, 0.60), Route::Autoregressive);
        assert_eq!(route_for(&paper, 0.59), Route::Parallel);
    }

    #[test]
    fn source_selects_vector() {
        let cfg = GateConfig::with_threshold(1.5, EntropySource::Logits);
        let d = decide(&cfg, &[1000.0, 0.0], &[0.0; 4]);
        assert_eq!(d.entropy, 2.0);
        assert_eq!(d.route, Route::Autoregressive);
    }

    #[test]
    fn grid_spans_range() {
        let g = threshold_grid(256);
        assert_eq!(g.len(), 32);
        assert_eq!(g[0], 0.0);
        assert!((g[31] - 8.0).abs() < 1e-12);
    }

    #[test]
    fn negative_threshold_rejected() {
        assert!(GateConfig::with_threshold(-0.1, EntropySource::Hidden)
            .validate()
            .is_err());
    }

    proptest::proptest! {
        #[test]
        fn entropy_range_and_permutation(mut xs in proptest::collection::vec(-20.0f32..20.0, 1..64), rot in 0usize..64) {
            let h = entropy(&xs);
            proptest::prop_assert!(h >= 0.0 && h <= (xs.len() as f64).log2() + 1e-12);
            let r = rot % xs.len();
            xs.rotate_left(r);
            proptest::prop_assert!((entropy(&xs) - h).abs() < 1e-9);
        }

        #[test]
        fn raising_threshold_never_reduces_parallel_steps(
            trace in proptest::collection::vec(0.0f64..8.0, 0..100),
            t1 in 0.0f64..8.0,
            dt in 0.0f64..8.0,
        ) {
            let count = |t: f64| {
                let cfg = GateConfig::with_threshold(t, EntropySource::Hidden);
                trace.iter().filter(|&&s| route_for(&cfg, s) == Route::Parallel).count()
            };
            proptest::prop_assert!(count(t1 + dt) >= count(t1));
        }
    }
}
