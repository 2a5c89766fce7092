//! Seeded CT-like phantoms with optional fibrosis-like lesions.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{Manifest, ManifestRow};
use crate::error::{Error, Result};
use crate::volume::{save_volume, Dtype, Volume};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LesionPlacement {
    /// Lesion straddles the isocentre's axial plane.
    Central,
    /// Flat lesion (z radius 9 mm) displaced 14–18 mm along z, clear of the
    /// axial mid-plane.
    OffAxial,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub n_patients: usize,
    /// Inclusive range of scans per patient.
    pub scans_per_patient: (usize, usize),
    /// Probability that a scan is positive.
    pub prevalence: f64,
    pub seed: u64,
    pub shape: [usize; 3],
    pub spacing_mm: [f64; 3],
    pub placement: LesionPlacement,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_patients: 40,
            scans_per_patient: (1, 3),
            prevalence: 0.5,
            seed: 0,
            shape: [96, 96, 48],
            spacing_mm: [1.0, 1.0, 2.0],
            placement: LesionPlacement::Central,
        }
    }
}

impl SynthConfig {
    /// Reference dataset for end-to-end checks.
    pub fn standard() -> Self {
        Self { n_patients: 60, seed: 2024, ..Self::default() }
    }

    pub fn off_axial() -> Self {
        Self { placement: LesionPlacement::OffAxial, seed: 2025, ..Self::standard() }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.prevalence > 0.0 && self.prevalence < 1.0) {
            return Err(Error::validation(format!("prevalence {} outside (0, 1)", self.prevalence)));
        }
        let (lo, hi) = self.scans_per_patient;
        if lo == 0 || lo > hi {
            return Err(Error::validation(format!("invalid scans-per-patient range {lo}..={hi}")));
        }
        if self.n_patients == 0 || self.shape.contains(&0) || self.spacing_mm.iter().any(|&s| !(s > 0.0)) {
            return Err(Error::validation("patients, shape and spacing must be positive"));
        }
        Ok(())
    }
}

/// Per-scan draw that fixes everything about a phantom.
#[derive(Clone, Debug, PartialEq)]
pub struct ScanPlan {
    pub label: u8,
    pub nodule_size_cm: f64,
    pub months_post_sbrt: f64,
    pub stream: u64,
}

struct Wave {
    k: [f64; 3],
    phase: f64,
    amp: f64,
}

/// Lesion radius in the axial plane for a nodule of `size_cm`.
pub fn lesion_radius_mm(size_cm: f64) -> f64 {
    12.0 + 1.5 * size_cm
}

/// Builds one phantom volume. Voxel values are HU.
pub fn phantom(cfg: &SynthConfig, plan: &ScanPlan) -> Result<Volume> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(plan.stream);
    let [nx, ny, nz] = cfg.shape;
    let s = cfg.spacing_mm;
    let origin = [0, 1, 2].map(|a| -((cfg.shape[a] - 1) as f64) * s[a] / 2.0);
    let iso = [0, 1, 2].map(|_| rng.random_range(-3.0..3.0));

    let waves: Vec<Wave> = (0..3)
        .map(|_| {
            let wavelength = rng.random_range(30.0..60.0);
            let dir: [f64; 3] = [0, 1, 2].map(|_| rng.random_range(-1.0..1.0));
            let norm = dir.iter().map(|d| d * d).sum::<f64>().sqrt().max(1e-6);
            Wave {
                k: dir.map(|d| d / norm * std::f64::consts::TAU / wavelength),
                phase: rng.random_range(0.0..std::f64::consts::TAU),
                amp: rng.random_range(15.0..25.0),
            }
        })
        .collect();

    let lesion = (plan.label == 1).then(|| {
        let r = lesion_radius_mm(plan.nodule_size_cm);
        let jitter = [0, 1].map(|_| rng.random_range(0.85..1.15));
        let mut centre = [0, 1, 2].map(|a| iso[a] + rng.random_range(-3.0..3.0));
        let rz = match cfg.placement {
            LesionPlacement::Central => r * rng.random_range(0.8..1.0),
            LesionPlacement::OffAxial => {
                let dz = rng.random_range(14.0..18.0);
                centre[2] = iso[2] + if rng.random_bool(0.5) { dz } else { -dz };
                9.0
            }
        };
        (centre, [r * jitter[0], r * jitter[1], rz])
    });

    let background = Normal::new(-800.0, 50.0).expect("valid normal");
    let fibrosis = Normal::new(-100.0, 40.0).expect("valid normal");
    let mut voxels = Vec::with_capacity(nx * ny * nz);
    for k in 0..nz {
        for j in 0..ny {
            for i in 0..nx {
                let p = [origin[0] + i as f64 * s[0], origin[1] + j as f64 * s[1], origin[2] + k as f64 * s[2]];
                let texture: f64 =
                    waves.iter().map(|w| w.amp * (w.k[0] * p[0] + w.k[1] * p[1] + w.k[2] * p[2] + w.phase).cos()).sum();
                let mut hu = background.sample(&mut rng) + texture;
                if let Some((c, r)) = &lesion {
                    let d = (0..3).map(|a| ((p[a] - c[a]) / r[a]).powi(2)).sum::<f64>().sqrt();
                    if d < 1.0 {
                        let w = (2.0 * (1.0 - d)).min(1.0);
                        hu = (1.0 - w) * hu + w * fibrosis.sample(&mut rng);
                    }
                }
                voxels.push(hu as f32);
            }
        }
    }
    Volume::new(cfg.shape, s, origin, iso, voxels)
}

/// Draws scan metadata for every patient.
pub fn plan_dataset(cfg: &SynthConfig) -> Result<Vec<(String, String, ScanPlan)>> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let (lo, hi) = cfg.scans_per_patient;
    let mut out = Vec::new();
    for p in 0..cfg.n_patients {
        let patient = format!("P{p:04}");
        for s in 0..rng.random_range(lo..=hi) {
            let plan = ScanPlan {
                label: u8::from(rng.random_bool(cfg.prevalence)),
                nodule_size_cm: rng.random_range(1.0..4.0),
                months_post_sbrt: rng.random_range(0.5..24.0),
                stream: out.len() as u64 + 1,
            };
            out.push((patient.clone(), format!("{patient}_S{s}"), plan));
        }
    }
    Ok(out)
}

/// Writes `manifest.csv` and `volumes/<scan>.meta.json|.raw` under `out_dir`.
pub fn synth_dataset(cfg: &SynthConfig, out_dir: &Path) -> Result<Manifest> {
    let plans = plan_dataset(cfg)?;
    let vol_dir = out_dir.join("volumes");
    std::fs::create_dir_all(&vol_dir).map_err(|e| Error::io(&vol_dir, e))?;
    let mut rows = Vec::with_capacity(plans.len());
    for (patient, scan, plan) in plans {
        let v = phantom(cfg, &plan)?;
        let rel = Path::new("volumes").join(format!("{scan}.meta.json"));
        save_volume(&v, &out_dir.join(&rel), Dtype::I16)?;
        rows.push(ManifestRow {
            patient_id: patient,
            scan_id: scan,
            volume_path: rel,
            label: plan.label,
            nodule_size_cm: Some((plan.nodule_size_cm * 100.0).round() / 100.0),
            months_post_sbrt: Some((plan.months_post_sbrt * 10.0).round() / 10.0),
        });
    }
    let manifest = Manifest::new(rows, out_dir)?;
    manifest.save(&out_dir.join("manifest.csv"))?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volume::{crop_isocenter, window_normalize};

    fn small() -> SynthConfig {
        SynthConfig { n_patients: 40, prevalence: 0.6, seed: 5, ..SynthConfig::default() }
    }

    #[test]
    fn prevalence_is_respected() {
        let plans = plan_dataset(&small()).unwrap();
        let pos = plans.iter().filter(|p| p.2.label == 1).count() as f64 / plans.len() as f64;
        // binomial with n ≈ 80: ±4 standard errors
        let se = (0.6f64 * 0.4 / plans.len() as f64).sqrt();
        assert!((pos - 0.6).abs() < 4.0 * se, "{pos}");
        assert!(plan_dataset(&SynthConfig { prevalence: 1.0, ..small() }).is_err());
    }

    fn central_mean(v: &Volume) -> f64 {
        let c = crop_isocenter(v, 30.0, -1000.0).unwrap();
        let w = window_normalize(&c, -500.0, 200.0).unwrap();
        w.voxels.iter().map(|&x| f64::from(x)).sum::<f64>() / w.voxels.len() as f64
    }

    #[test]
    fn lesions_separate_the_classes() {
        let cfg = SynthConfig {
            n_patients: 200,
            scans_per_patient: (1, 1),
            seed: 11,
            shape: [48, 48, 24],
            ..SynthConfig::default()
        };
        let mut pos = Vec::new();
        let mut neg = Vec::new();
        for (_, _, plan) in plan_dataset(&cfg).unwrap() {
            let m = central_mean(&phantom(&cfg, &plan).unwrap());
            if plan.label == 1 {
                pos.push(m)
            } else {
                neg.push(m)
            }
        }
        let stats = |x: &[f64]| {
            let mu = x.iter().sum::<f64>() / x.len() as f64;
            let var = x.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / (x.len() - 1) as f64;
            (mu, var)
        };
        let ((mp, vp), (mn, vn)) = (stats(&pos), stats(&neg));
        let pooled = ((vp + vn) / 2.0).sqrt();
        assert!(mp - mn > 3.0 * pooled, "gap {} vs pooled std {pooled}", mp - mn);
    }

    #[test]
    fn off_axial_lesions_miss_the_mid_plane() {
        let cfg = SynthConfig { placement: LesionPlacement::OffAxial, ..small() };
        let plan = plan_dataset(&cfg).unwrap().into_iter().find(|p| p.2.label == 1).unwrap().2;
        let v = phantom(&cfg, &plan).unwrap();
        let crop = window_normalize(&crop_isocenter(&v, 50.0, -1000.0).unwrap(), -500.0, 200.0).unwrap();
        let axial = crate::volume::mid_axial(&crop);
        let coronal = crate::volume::mid_coronal(&crop);
        let mean = |s: &[f32]| s.iter().map(|&x| f64::from(x)).sum::<f64>() / s.len() as f64;
        assert!(mean(&axial.values) < 0.01);
        assert!(mean(&coronal.values) > 0.03);
    }

    #[test]
    fn files_are_deterministic() {
        let cfg = SynthConfig { n_patients: 2, scans_per_patient: (1, 1), shape: [16, 16, 8], ..small() };
        let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
        let ma = synth_dataset(&cfg, a.path()).unwrap();
        synth_dataset(&cfg, b.path()).unwrap();
        for r in &ma.rows {
            for ext in ["meta.json", "raw"] {
                let name = format!("volumes/{}.{ext}", r.scan_id);
                assert_eq!(std::fs::read(a.path().join(&name)).unwrap(), std::fs::read(b.path().join(&name)).unwrap());
            }
        }
        assert_eq!(Manifest::load(&a.path().join("manifest.csv")).unwrap().rows, ma.rows);
        ma.check_paths().unwrap();
    }

    #[test]
    fn unwritable_output_is_an_io_error() {
        let dir = tempfile::tempdir().unwrap();
        let blocker = dir.path().join("file");
        std::fs::write(&blocker, b"x").unwrap();
        let cfg = SynthConfig { n_patients: 1, shape: [8, 8, 4], ..small() };
        assert_eq!(synth_dataset(&cfg, &blocker.join("sub")).unwrap_err().exit_code(), 3);
    }
}
