//! Paired synthetic source/target domains.
//!
//! Identities are Gaussian clusters around unit centroids, split into one
//! sub-cluster per camera by an identity-specific view offset. Both domains
//! share a random nuisance subspace holding per-sample nuisance noise, and
//! each domain has its own per-camera offsets; the target domain
//! additionally passes through a shared random affine map. Occluded samples
//! have a fixed trailing block of coordinates zeroed, so the occluded views
//! of an identity form their own sub-cluster. Every sample is L2-normalized
//! at the end.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, SampleLabel};
use crate::embedding::{dot, normalize_in_place};
use crate::error::{Error, Result};

/// Minimum angle between identity centroids, in degrees.
pub const MIN_CENTROID_ANGLE_DEG: f64 = 15.0;

/// The nuisance subspace spans `d_in / NUISANCE_DIVISOR` dimensions.
pub const NUISANCE_DIVISOR: usize = 4;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub ids_source: usize,
    pub ids_target: usize,
    pub per_id: usize,
    pub cams: usize,
    pub d_in: usize,
    /// Norm scale of the within-identity Gaussian spread.
    pub intra_sigma: f64,
    /// Norm of each camera offset.
    pub cam_sigma: f64,
    /// Norm scale of the per-sample noise inside the shared nuisance subspace.
    pub nuisance_sigma: f64,
    /// Norm of the offset specific to one identity seen by one camera.
    pub view_sigma: f64,
    /// Strength of the target-domain affine map.
    pub shift: f64,
    pub occl_rate: f64,
    pub occl_frac: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            ids_source: 50,
            ids_target: 50,
            per_id: 12,
            cams: 4,
            d_in: 64,
            intra_sigma: 0.35,
            cam_sigma: 0.3,
            nuisance_sigma: 0.6,
            view_sigma: 0.6,
            shift: 0.5,
            occl_rate: 0.3,
            occl_frac: 0.5,
            seed: 0,
        }
    }
}

/// `(key, description)` for every generator key, for `--help` output.
pub const SYNTH_KEYS: &[(&str, &str)] = &[
    ("ids_source", "source identities"),
    ("ids_target", "target identities"),
    ("per_id", "samples per identity"),
    ("cams", "cameras"),
    ("d_in", "feature dimension"),
    ("intra_sigma", "within-identity spread"),
    ("cam_sigma", "norm of each camera offset"),
    (
        "nuisance_sigma",
        "per-sample noise in the shared nuisance subspace",
    ),
    ("view_sigma", "norm of the per-identity, per-camera offset"),
    ("shift", "strength of the target-domain affine map"),
    (
        "occl_rate",
        "fraction of samples with a zeroed coordinate block",
    ),
    ("occl_frac", "fraction of coordinates in the zeroed block"),
    ("seed", "random seed"),
];

impl SynthConfig {
    pub fn from_toml_str(s: &str) -> Result<Self> {
        let config: Self = toml::from_str(s).map_err(|e| Error::Config(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn occlusion_block(&self) -> usize {
        (self.occl_frac * self.d_in as f64).round() as usize
    }

    pub fn validate(&self) -> Result<()> {
        let counts = [self.ids_source, self.ids_target, self.per_id, self.cams];
        if counts.iter().any(|&c| c == 0) {
            return Err(Error::Config(
                "identity, sample and camera counts must be >= 1".into(),
            ));
        }
        if self.d_in < 2 {
            return Err(Error::Config(format!(
                "d_in must be >= 2, got {}",
                self.d_in
            )));
        }
        for (name, v) in [("occl_rate", self.occl_rate), ("occl_frac", self.occl_frac)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Config(format!("{name} must be in [0, 1], got {v}")));
            }
        }
        for (name, v) in [
            ("intra_sigma", self.intra_sigma),
            ("cam_sigma", self.cam_sigma),
            ("nuisance_sigma", self.nuisance_sigma),
            ("view_sigma", self.view_sigma),
            ("shift", self.shift),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!(
                    "{name} must be finite and >= 0, got {v}"
                )));
            }
        }
        if self.occl_rate > 0.0 && self.d_in - self.occlusion_block().min(self.d_in) < 2 {
            return Err(Error::Config(format!(
                "d_in = {} too small for an occlusion block of {} coordinates",
                self.d_in,
                self.occlusion_block()
            )));
        }
        Ok(())
    }
}

/// Source domain with labels, target domain with hidden ground truth.
#[derive(Clone, Debug, PartialEq)]
pub struct SynthDomains {
    pub source: Dataset,
    pub target: Dataset,
    /// Which target samples were occluded.
    pub target_occluded: Vec<bool>,
}

fn gaussian(rng: &mut ChaCha8Rng, d: usize, scale: f64) -> Vec<f64> {
    (0..d)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            scale * z
        })
        .collect::<Vec<f64>>()
}

fn random_unit(rng: &mut ChaCha8Rng, d: usize) -> Vec<f64> {
    loop {
        let mut v = gaussian(rng, d, 1.0);
        if normalize_in_place(&mut v).is_ok() {
            return v;
        }
    }
}

fn centroids(rng: &mut ChaCha8Rng, count: usize, d: usize) -> Result<Vec<Vec<f64>>> {
    let max_cos = MIN_CENTROID_ANGLE_DEG.to_radians().cos();
    let mut out: Vec<Vec<f64>> = Vec::with_capacity(count);
    let mut rejected = 0usize;
    while out.len() < count {
        let c = random_unit(rng, d);
        if out.iter().all(|o| dot(o, &c) <= max_cos) {
            out.push(c);
        } else {
            rejected += 1;
            if rejected > 100_000 {
                return Err(Error::Config(format!(
                    "cannot place {count} centroids {MIN_CENTROID_ANGLE_DEG} degrees apart in {d} dimensions"
                )));
            }
        }
    }
    Ok(out)
}

struct DomainSpec<'a> {
    centroids: &'a [Vec<f64>],
    first_label: usize,
    cam_offsets: Vec<Vec<f64>>,
    nuisance: &'a [Vec<f64>],
    affine: Option<(Vec<f64>, Vec<f64>)>,
}

pub fn generate(config: &SynthConfig) -> Result<SynthDomains> {
    config.validate()?;
    let d = config.d_in;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let all = centroids(&mut rng, config.ids_source + config.ids_target, d)?;
    let (src_c, tgt_c) = all.split_at(config.ids_source);

    let nuisance = nuisance_basis(&mut rng, d);
    let cams = |rng: &mut ChaCha8Rng| -> Vec<Vec<f64>> {
        (0..config.cams)
            .map(|_| {
                random_unit(rng, d)
                    .into_iter()
                    .map(|x| x * config.cam_sigma)
                    .collect()
            })
            .collect()
    };
    let src_cams = cams(&mut rng);
    let tgt_cams = cams(&mut rng);
    // x -> (I + shift G / sqrt(d)) x + shift u
    let mut matrix = gaussian(&mut rng, d * d, config.shift / (d as f64).sqrt());
    for i in 0..d {
        matrix[i * d + i] += 1.0;
    }
    let offset: Vec<f64> = random_unit(&mut rng, d)
        .into_iter()
        .map(|x| x * config.shift)
        .collect();

    let source_spec = DomainSpec {
        centroids: src_c,
        first_label: 0,
        cam_offsets: src_cams,
        nuisance: &nuisance,
        affine: None,
    };
    let target_spec = DomainSpec {
        centroids: tgt_c,
        first_label: config.ids_source,
        cam_offsets: tgt_cams,
        nuisance: &nuisance,
        affine: Some((matrix, offset)),
    };
    let (source, _) = sample_domain(config, &source_spec, &mut rng)?;
    let (target, target_occluded) = sample_domain(config, &target_spec, &mut rng)?;
    Ok(SynthDomains {
        source,
        target,
        target_occluded,
    })
}

/// Orthonormal basis of a random `d / NUISANCE_DIVISOR`-dimensional subspace.
fn nuisance_basis(rng: &mut ChaCha8Rng, d: usize) -> Vec<Vec<f64>> {
    let r = (d / NUISANCE_DIVISOR).max(1);
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(r);
    while basis.len() < r {
        let mut v = gaussian(rng, d, 1.0);
        for b in &basis {
            let proj = dot(b, &v);
            v.iter_mut().zip(b).for_each(|(x, y)| *x -= proj * y);
        }
        if normalize_in_place(&mut v).is_ok() {
            basis.push(v);
        }
    }
    basis
}

fn in_subspace(basis: &[Vec<f64>], coeffs: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; basis[0].len()];
    for (b, c) in basis.iter().zip(coeffs) {
        out.iter_mut().zip(b).for_each(|(o, x)| *o += c * x);
    }
    out
}

fn sample_domain(
    config: &SynthConfig,
    spec: &DomainSpec<'_>,
    rng: &mut ChaCha8Rng,
) -> Result<(Dataset, Vec<bool>)> {
    let d = config.d_in;
    let block = config.occlusion_block().min(d);
    let noise_scale = config.intra_sigma / (d as f64).sqrt();
    let nuisance_scale = config.nuisance_sigma / (spec.nuisance.len() as f64).sqrt();
    let mut features = Vec::new();
    let mut labels = Vec::new();
    let mut occluded = Vec::new();
    for (id, centroid) in spec.centroids.iter().enumerate() {
        let views: Vec<Vec<f64>> = (0..config.cams)
            .map(|_| {
                random_unit(rng, d)
                    .into_iter()
                    .map(|x| x * config.view_sigma)
                    .collect()
            })
            .collect();
        for _ in 0..config.per_id {
            let camera = rng.random_range(0..config.cams);
            let noise = gaussian(rng, d, noise_scale);
            let nuisance = in_subspace(
                spec.nuisance,
                &gaussian(rng, spec.nuisance.len(), nuisance_scale),
            );
            let mut x: Vec<f64> = centroid
                .iter()
                .zip(&noise)
                .zip(&spec.cam_offsets[camera])
                .zip(&nuisance)
                .zip(&views[camera])
                .map(|((((c, n), o), u), w)| c + n + o + u + w)
                .collect();
            if let Some((m, t)) = &spec.affine {
                x = m
                    .chunks_exact(d)
                    .zip(t)
                    .map(|(row, b)| dot(row, &x) + b)
                    .collect();
            }
            let hide = rng.random::<f64>() < config.occl_rate;
            if hide {
                x[d - block..].iter_mut().for_each(|v| *v = 0.0);
            }
            if normalize_in_place(&mut x).is_err() {
                return Err(Error::Data("generated a zero feature vector".into()));
            }
            features.push(x);
            labels.push(SampleLabel {
                identity: spec.first_label + id,
                camera,
            });
            occluded.push(hide);
        }
    }
    Ok((Dataset::new(features, Some(labels))?, occluded))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mean(v: &[f64]) -> f64 {
        v.iter().sum::<f64>() / v.len() as f64
    }

    #[test]
    fn deterministic_per_seed() {
        let c = SynthConfig {
            ids_source: 5,
            ids_target: 5,
            per_id: 4,
            ..SynthConfig::default()
        };
        assert_eq!(generate(&c).unwrap(), generate(&c).unwrap());
        let other = SynthConfig {
            seed: 1,
            ..c.clone()
        };
        assert_ne!(
            generate(&c).unwrap().source,
            generate(&other).unwrap().source
        );
    }

    #[test]
    fn label_spaces_are_disjoint() {
        let c = SynthConfig {
            ids_source: 3,
            ids_target: 4,
            per_id: 2,
            ..SynthConfig::default()
        };
        let g = generate(&c).unwrap();
        let src = g.source.identities().unwrap();
        let tgt = g.target.identities().unwrap();
        assert!(src.iter().all(|s| !tgt.contains(s)));
        assert_eq!(tgt.len(), 8);
    }

    #[test]
    fn degenerate_clusters_are_tight() {
        let c = SynthConfig {
            ids_source: 3,
            ids_target: 3,
            per_id: 5,
            cams: 1,
            intra_sigma: 1e-9,
            cam_sigma: 0.0,
            nuisance_sigma: 0.0,
            view_sigma: 0.0,
            shift: 0.0,
            occl_rate: 0.0,
            ..SynthConfig::default()
        };
        let g = generate(&c).unwrap();
        for block in g.target.features.chunks(5) {
            for x in block {
                assert!(dot(x, &block[0]) > 1.0 - 1e-12);
            }
        }
    }

    #[test]
    fn antipodal_identities_are_opposite() {
        // Two identities in two dimensions sit at least 15 degrees apart;
        // construct the antipodal case by hand through the sampler.
        let c = SynthConfig {
            ids_source: 1,
            ids_target: 1,
            per_id: 3,
            cams: 1,
            intra_sigma: 0.0,
            cam_sigma: 0.0,
            nuisance_sigma: 0.0,
            view_sigma: 0.0,
            shift: 0.0,
            occl_rate: 0.0,
            d_in: 4,
            ..SynthConfig::default()
        };
        let centroids = vec![vec![1.0, 0.0, 0.0, 0.0], vec![-1.0, 0.0, 0.0, 0.0]];
        let nuisance = vec![vec![0.0, 0.0, 0.0, 1.0]];
        let spec = DomainSpec {
            centroids: &centroids,
            first_label: 0,
            cam_offsets: vec![vec![0.0; 4]],
            nuisance: &nuisance,
            affine: None,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (d, _) = sample_domain(&c, &spec, &mut rng).unwrap();
        assert!((dot(&d.features[0], &d.features[3]) + 1.0).abs() < 1e-12);
    }

    #[test]
    fn occlusion_lowers_same_identity_similarity() {
        let c = SynthConfig {
            occl_rate: 0.3,
            ..SynthConfig::default()
        };
        let g = generate(&c).unwrap();
        let ids = g.target.identities().unwrap();
        let (mut clean, mut mixed) = (Vec::new(), Vec::new());
        for i in 0..ids.len() {
            for j in i + 1..ids.len() {
                if ids[i] != ids[j] {
                    continue;
                }
                let s = dot(&g.target.features[i], &g.target.features[j]);
                if !g.target_occluded[i] && !g.target_occluded[j] {
                    clean.push(s);
                } else if g.target_occluded[i] != g.target_occluded[j] {
                    mixed.push(s);
                }
            }
        }
        assert!(
            mean(&mixed) < mean(&clean),
            "{} vs {}",
            mean(&mixed),
            mean(&clean)
        );
    }

    #[test]
    fn rejects_bad_configs() {
        assert!(generate(&SynthConfig {
            occl_frac: 1.5,
            ..SynthConfig::default()
        })
        .is_err());
        assert!(generate(&SynthConfig {
            d_in: 4,
            occl_frac: 0.9,
            ..SynthConfig::default()
        })
        .is_err());
        assert!(generate(&SynthConfig {
            per_id: 0,
            ..SynthConfig::default()
        })
        .is_err());
    }

    #[test]
    fn every_key_is_documented() {
        let text = SynthConfig::default().to_toml_string();
        let keys: Vec<&str> = text.lines().filter_map(|l| l.split(" = ").next()).collect();
        assert_eq!(keys.len(), SYNTH_KEYS.len());
        for k in keys {
            assert!(
                SYNTH_KEYS.iter().any(|(name, _)| *name == k),
                "undocumented key {k}"
            );
        }
        assert!(SynthConfig::from_toml_str("occl_frac = 2.0").is_err());
        assert!(SynthConfig::from_toml_str("nope = 1").is_err());
    }
}
