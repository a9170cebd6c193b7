//! Client-side gradient defenses: magnitude pruning, prefix interception and
//! additive Gaussian noise, plus left-to-right chains of them.

use std::cmp::Ordering;
use std::fmt;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flsim::GradientSet;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DefenseSpec {
    None,
    /// Keep the `keep_fraction` largest-magnitude entries, zero the rest.
    Prune {
        keep_fraction: f64,
        /// Rank within each parameter array instead of the whole vector.
        #[serde(default)]
        per_layer: bool,
    },
    /// Keep the leading `keep_fraction` of the flattened gradient.
    Intercept { keep_fraction: f64 },
    /// Add N(0, sigma2) to every entry.
    GaussianNoise { sigma2: f64 },
    Chain { steps: Vec<DefenseSpec> },
}

impl DefenseSpec {
    pub fn prune(keep_fraction: f64) -> Self {
        DefenseSpec::Prune {
            keep_fraction,
            per_layer: false,
        }
    }

    /// Translates a "pruning rate" in percent (share of entries zeroed).
    pub fn prune_rate_percent(rate: f64) -> Self {
        Self::prune(1.0 - rate / 100.0)
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            DefenseSpec::None => Ok(()),
            DefenseSpec::Prune { keep_fraction, .. } | DefenseSpec::Intercept { keep_fraction } => {
                check_fraction(*keep_fraction)
            }
            DefenseSpec::GaussianNoise { sigma2 } => check_sigma2(*sigma2),
            DefenseSpec::Chain { steps } => {
                if steps.is_empty() {
                    return Err(Error::InvalidArgument("defense chain is empty".into()));
                }
                steps.iter().try_for_each(DefenseSpec::validate)
            }
        }
    }
}

impl fmt::Display for DefenseSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DefenseSpec::None => write!(f, "none"),
            DefenseSpec::Prune {
                keep_fraction,
                per_layer: false,
            } => write!(f, "prune({keep_fraction})"),
            DefenseSpec::Prune { keep_fraction, .. } => write!(f, "prune-layer({keep_fraction})"),
            DefenseSpec::Intercept { keep_fraction } => write!(f, "intercept({keep_fraction})"),
            DefenseSpec::GaussianNoise { sigma2 } => write!(f, "noise({sigma2:e})"),
            DefenseSpec::Chain { steps } => {
                let parts: Vec<String> = steps.iter().map(ToString::to_string).collect();
                write!(f, "chain[{}]", parts.join(">"))
            }
        }
    }
}

fn check_fraction(f: f64) -> Result<()> {
    if f > 0.0 && f <= 1.0 {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!("keep fraction {f} not in (0, 1]")))
    }
}

fn check_sigma2(s: f64) -> Result<()> {
    if s >= 0.0 && s.is_finite() {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!("noise variance {s} must be finite and >= 0")))
    }
}

/// `⌈fraction·n⌉`, ignoring float noise within 1e-9 of an integer
/// (0.7·10 must be 7, not 8), and at least one entry.
pub fn kept_count(fraction: f64, n: usize) -> usize {
    let x = fraction * n as f64;
    let r = x.round();
    let k = if (x - r).abs() <= 1e-9 * x.max(1.0) { r } else { x.ceil() };
    (k as usize).clamp(1, n)
}

fn nonempty(grad: &GradientSet) -> Result<()> {
    if grad.is_empty() {
        Err(Error::Empty("gradient"))
    } else {
        Ok(())
    }
}

/// Larger magnitude first; equal magnitudes keep the lower index first.
fn rank(a: &(usize, f64), b: &(usize, f64)) -> Ordering {
    b.1.abs().total_cmp(&a.1.abs()).then(a.0.cmp(&b.0))
}

fn top_k_mask(values: &[f64], k: usize) -> Vec<bool> {
    let mut keep = vec![false; values.len()];
    if k >= values.len() {
        keep.fill(true);
        return keep;
    }
    let mut order: Vec<(usize, f64)> = values.iter().copied().enumerate().collect();
    order.select_nth_unstable_by(k, rank);
    for &(i, _) in &order[..k] {
        keep[i] = true;
    }
    keep
}

/// Magnitude pruning over the globally flattened gradient.
pub fn prune_gradient(grad: &GradientSet, keep_fraction: f64) -> Result<GradientSet> {
    check_fraction(keep_fraction)?;
    nonempty(grad)?;
    let flat = grad.flatten();
    let keep = top_k_mask(&flat, kept_count(keep_fraction, flat.len()));
    let out: Vec<f64> = flat
        .iter()
        .zip(keep)
        .map(|(&v, k)| if k { v } else { 0.0 })
        .collect();
    grad.with_flat(&out)
}

/// Magnitude pruning applied to each parameter array separately.
pub fn prune_gradient_per_layer(grad: &GradientSet, keep_fraction: f64) -> Result<GradientSet> {
    check_fraction(keep_fraction)?;
    nonempty(grad)?;
    let mut out = Vec::with_capacity(grad.len());
    for e in grad.entries().iter().filter(|e| !e.is_empty()) {
        let keep = top_k_mask(&e.data, kept_count(keep_fraction, e.len()));
        out.extend(e.data.iter().zip(keep).map(|(&v, k)| if k { v } else { 0.0 }));
    }
    grad.with_flat(&out)
}

/// Keeps the first `⌈keep_fraction·n⌉` entries in parameter order.
pub fn intercept_gradient(grad: &GradientSet, keep_fraction: f64) -> Result<GradientSet> {
    check_fraction(keep_fraction)?;
    nonempty(grad)?;
    let mut flat = grad.flatten();
    let k = kept_count(keep_fraction, flat.len());
    flat[k..].fill(0.0);
    grad.with_flat(&flat)
}

pub fn add_gaussian_noise<R: Rng + ?Sized>(grad: &GradientSet, sigma2: f64, rng: &mut R) -> Result<GradientSet> {
    check_sigma2(sigma2)?;
    if sigma2 == 0.0 {
        return Ok(grad.clone());
    }
    let normal = Normal::new(0.0, sigma2.sqrt()).map_err(|e| Error::InvalidArgument(e.to_string()))?;
    let noisy: Vec<f64> = grad.values().map(|v| v + normal.sample(rng)).collect();
    grad.with_flat(&noisy)
}

pub fn apply_defense<R: Rng + ?Sized>(grad: &GradientSet, spec: &DefenseSpec, rng: &mut R) -> Result<GradientSet> {
    spec.validate()?;
    match spec {
        DefenseSpec::None => Ok(grad.clone()),
        DefenseSpec::Prune {
            keep_fraction,
            per_layer: false,
        } => prune_gradient(grad, *keep_fraction),
        DefenseSpec::Prune { keep_fraction, .. } => prune_gradient_per_layer(grad, *keep_fraction),
        DefenseSpec::Intercept { keep_fraction } => intercept_gradient(grad, *keep_fraction),
        DefenseSpec::GaussianNoise { sigma2 } => add_gaussian_noise(grad, *sigma2, rng),
        DefenseSpec::Chain { steps } => {
            let mut g = grad.clone();
            for step in steps {
                g = apply_defense(&g, step, rng)?;
            }
            Ok(g)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::NamedArray;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn grad(values: &[f64]) -> GradientSet {
        GradientSet::new(
            vec![NamedArray::new("w", vec![values.len()], values.to_vec()).unwrap()],
            1,
        )
    }

    #[test]
    fn prune_keeps_largest_magnitudes() {
        let g = grad(&[3.0, -5.0, 1.0, 0.5]);
        assert_eq!(prune_gradient(&g, 0.5).unwrap().flatten(), vec![3.0, -5.0, 0.0, 0.0]);
        assert_eq!(prune_gradient(&g, 1.0).unwrap(), g);
    }

    #[test]
    fn prune_ties_prefer_lower_index() {
        let g = grad(&[1.0, -2.0, 2.0, -1.0]);
        assert_eq!(prune_gradient(&g, 0.25).unwrap().flatten(), vec![0.0, -2.0, 0.0, 0.0]);
        assert_eq!(prune_gradient(&g, 0.75).unwrap().flatten(), vec![1.0, -2.0, 2.0, 0.0]);
    }

    #[test]
    fn intercept_keeps_prefix() {
        let g = grad(&[3.0, -5.0, 1.0, 0.5]);
        assert_eq!(intercept_gradient(&g, 0.5).unwrap().flatten(), vec![3.0, -5.0, 0.0, 0.0]);
        assert_eq!(intercept_gradient(&g, 1.0).unwrap(), g);
    }

    #[test]
    fn kept_count_ignores_float_noise() {
        assert_eq!(kept_count(0.7, 10), 7);
        assert_eq!(kept_count(0.3, 1000), 300);
        assert_eq!(kept_count(0.01, 50), 1);
        assert_eq!(kept_count(0.001, 10), 1);
        assert_eq!(kept_count(0.55, 10), 6);
    }

    #[test]
    fn invalid_specs_rejected() {
        let g = grad(&[1.0]);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(prune_gradient(&g, 0.0).is_err());
        assert!(intercept_gradient(&g, 1.5).is_err());
        assert!(add_gaussian_noise(&g, -1.0, &mut rng).is_err());
        assert!(apply_defense(&g, &DefenseSpec::Chain { steps: vec![] }, &mut rng).is_err());
        assert!(matches!(prune_gradient(&GradientSet::new(vec![], 1), 0.5), Err(Error::Empty(_))));
    }

    #[test]
    fn noise_zero_is_identity_and_seeded() {
        let g = grad(&[0.1, 0.2, 0.3]);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        assert_eq!(add_gaussian_noise(&g, 0.0, &mut rng).unwrap(), g);
        let a = add_gaussian_noise(&g, 1e-2, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        let b = add_gaussian_noise(&g, 1e-2, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, g);
    }

    #[test]
    fn per_layer_prune_ranks_within_arrays() {
        let g = GradientSet::new(
            vec![
                NamedArray::new("a", vec![2], vec![10.0, 9.0]).unwrap(),
                NamedArray::new("b", vec![2], vec![0.1, -0.2]).unwrap(),
            ],
            1,
        );
        assert_eq!(prune_gradient(&g, 0.5).unwrap().flatten(), vec![10.0, 9.0, 0.0, 0.0]);
        assert_eq!(prune_gradient_per_layer(&g, 0.5).unwrap().flatten(), vec![10.0, 0.0, 0.0, -0.2]);
    }

    #[test]
    fn spec_serde_and_labels() {
        let spec: DefenseSpec = serde_json::from_str(
            r#"{"kind":"chain","steps":[{"kind":"prune","keep_fraction":0.5},{"kind":"gaussian_noise","sigma2":0.01}]}"#,
        )
        .unwrap();
        assert_eq!(spec.to_string(), "chain[prune(0.5)>noise(1e-2)]");
        assert!(serde_json::from_str::<DefenseSpec>(r#"{"kind":"prune","keep":0.5}"#).is_err());
        assert_eq!(DefenseSpec::prune_rate_percent(70.0), DefenseSpec::prune(1.0 - 0.7));
    }
}
