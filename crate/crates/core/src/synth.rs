//! Phantom FDG-PET cohorts: an ellipsoidal brain with a hypometabolic core,
//! two posterior-lateral regions attenuated by a class factor, and a
//! cohort-level affine intensity shift plus Gaussian noise.

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};

use chrono::{Duration, NaiveDate};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::cohort::{write_manifest, Diagnosis, RawDiagnosis, VisitRecord};
use crate::error::{Error, IoContext, Result};
use crate::volume::{save_volume, Volume};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Ellipsoid {
    pub center: [f64; 3],
    pub radii: [f64; 3],
}

impl Ellipsoid {
    fn level(&self, p: [f64; 3]) -> f64 {
        (0..3).map(|a| ((p[a] - self.center[a]) / self.radii[a]).powi(2)).sum()
    }
}

/// Anatomy in millimetres around the field-of-view centre. Regions and the
/// core are given in units of the brain radii so they follow shape jitter.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhantomSpec {
    pub brain_radii_mm: [f64; 3],
    pub cortex_intensity: f64,
    pub core: Ellipsoid,
    pub core_intensity: f64,
    pub regions: Vec<Ellipsoid>,
    /// Attenuation inside the regions for CN, MCI and AD.
    pub factors: [f64; 3],
    /// Relative half-width of the uniform per-subject radius jitter.
    pub shape_jitter: f64,
    /// Relative half-width of the uniform per-subject uptake jitter.
    pub intensity_jitter: f64,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        PhantomSpec {
            brain_radii_mm: [62.0, 78.0, 55.0],
            cortex_intensity: 1.0,
            core: Ellipsoid { center: [0.0, 0.0, 0.0], radii: [0.35, 0.35, 0.35] },
            core_intensity: 0.6,
            regions: vec![
                Ellipsoid { center: [-0.5, 0.4, 0.05], radii: [0.3, 0.3, 0.3] },
                Ellipsoid { center: [0.5, 0.4, 0.05], radii: [0.3, 0.3, 0.3] },
            ],
            factors: [1.0, 0.85, 0.7],
            shape_jitter: 0.05,
            intensity_jitter: 0.05,
        }
    }
}

impl PhantomSpec {
    pub fn factor(&self, d: Diagnosis) -> f64 {
        self.factors[d as usize]
    }

    pub fn validate(&self) -> Result<()> {
        if let Some(f) = self.factors.iter().find(|f| !(**f > 0.0 && **f <= 1.0)) {
            return Err(Error::Config(format!("hypometabolism factor {f} outside (0, 1]")));
        }
        if self.brain_radii_mm.iter().any(|r| !(*r > 0.0)) {
            return Err(Error::Config("brain radii must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.shape_jitter) || !(0.0..1.0).contains(&self.intensity_jitter) {
            return Err(Error::Config("jitter must lie in [0, 1)".into()));
        }
        if self.core.radii.iter().any(|x| !(*x > 0.0)) {
            return Err(Error::Config("core has a non-positive radius".into()));
        }
        for (i, r) in self.regions.iter().enumerate() {
            if r.radii.iter().any(|x| !(*x > 0.0)) {
                return Err(Error::Config(format!("region {i} has a non-positive radius")));
            }
            // The ball of the largest radius around the centre bounds the region.
            let dist = r.center.iter().map(|c| c * c).sum::<f64>().sqrt();
            if dist + r.radii.iter().cloned().fold(0.0, f64::max) > 1.0 {
                return Err(Error::Config(format!("region {i} extends outside the brain ellipsoid")));
            }
        }
        Ok(())
    }
}

/// Per-subject draws that do not depend on diagnosis.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SubjectJitter {
    pub radius_scale: [f64; 3],
    pub uptake: f64,
}

impl SubjectJitter {
    pub const NONE: SubjectJitter = SubjectJitter { radius_scale: [1.0; 3], uptake: 1.0 };

    fn draw(spec: &PhantomSpec, rng: &mut ChaCha8Rng) -> Self {
        let mut u = |w: f64| if w > 0.0 { 1.0 + rng.gen_range(-w..w) } else { 1.0 };
        let radius_scale = [u(spec.shape_jitter), u(spec.shape_jitter), u(spec.shape_jitter)];
        let uptake = u(spec.intensity_jitter);
        SubjectJitter { radius_scale, uptake }
    }
}

/// Noise-free phantom on the given grid, centred in the field of view.
pub fn render_phantom(
    spec: &PhantomSpec,
    diagnosis: Diagnosis,
    jitter: SubjectJitter,
    dims: [usize; 3],
    spacing: [f64; 3],
) -> Result<Volume> {
    spec.validate()?;
    let radii: [f64; 3] = std::array::from_fn(|a| spec.brain_radii_mm[a] * jitter.radius_scale[a]);
    let brain = Ellipsoid { center: [0.0; 3], radii };
    let factor = spec.factor(diagnosis);
    let [nx, ny, nz] = dims;
    let mut out = Volume::zeros(dims, spacing)?;
    let vox = out.voxels_mut();
    for z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                let idx = [x, y, z];
                let p: [f64; 3] = std::array::from_fn(|a| {
                    ((idx[a] as f64 + 0.5) - dims[a] as f64 / 2.0) * spacing[a]
                });
                if brain.level(p) > 1.0 {
                    continue;
                }
                let q: [f64; 3] = std::array::from_fn(|a| p[a] / radii[a]);
                let tissue = if spec.core.level(q) <= 1.0 { spec.core_intensity } else { spec.cortex_intensity };
                let mut v = (tissue * jitter.uptake) as f32;
                if spec.regions.iter().any(|r| r.level(q) <= 1.0) {
                    v = (v as f64 * factor) as f32;
                }
                vox[(z * ny + y) * nx + x] = v;
            }
        }
    }
    Ok(out)
}

/// Boolean map of voxels inside any hypometabolic region.
pub fn region_mask(spec: &PhantomSpec, jitter: SubjectJitter, dims: [usize; 3], spacing: [f64; 3]) -> Vec<bool> {
    let radii: [f64; 3] = std::array::from_fn(|a| spec.brain_radii_mm[a] * jitter.radius_scale[a]);
    let [nx, ny, nz] = dims;
    let mut out = vec![false; nx * ny * nz];
    for z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                let idx = [x, y, z];
                let q: [f64; 3] = std::array::from_fn(|a| {
                    ((idx[a] as f64 + 0.5) - dims[a] as f64 / 2.0) * spacing[a] / radii[a]
                });
                out[(z * ny + y) * nx + x] = spec.regions.iter().any(|r| r.level(q) <= 1.0);
            }
        }
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DomainShift {
    pub scale: f64,
    pub offset: f64,
    pub noise_sigma: f64,
}

impl DomainShift {
    pub const IDENTITY: DomainShift = DomainShift { scale: 1.0, offset: 0.0, noise_sigma: 0.0 };
}

/// `x -> scale*x + offset + N(0, sigma)` on every voxel, background included.
pub fn inject_domain_shift(v: &Volume, shift: DomainShift, rng: &mut impl Rng) -> Result<Volume> {
    if !(shift.scale > 0.0) {
        return Err(Error::Config(format!("shift scale {} must be positive", shift.scale)));
    }
    if !(shift.noise_sigma >= 0.0) {
        return Err(Error::Config(format!("noise sigma {} must be non-negative", shift.noise_sigma)));
    }
    let mut out = v.map(|x| (shift.scale * x as f64 + shift.offset) as f32);
    if shift.noise_sigma > 0.0 {
        let n = Normal::new(0.0, shift.noise_sigma).expect("sigma checked");
        for x in out.voxels_mut() {
            *x = (*x as f64 + n.sample(rng)) as f32;
        }
    }
    Ok(out)
}

/// Longitudinal visit policy. Earlier visits are walked backwards from the
/// final diagnosis; each step back stays at the same stage or moves one stage
/// earlier with `p_earlier`, so trajectories are monotone CN -> MCI -> AD.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct VisitPolicy {
    pub min_visits: usize,
    pub max_visits: usize,
    pub p_earlier: f64,
}

impl VisitPolicy {
    pub const SINGLE: VisitPolicy = VisitPolicy { min_visits: 1, max_visits: 1, p_earlier: 0.0 };
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CohortSpec {
    pub name: String,
    pub dims: [usize; 3],
    pub spacing: [f64; 3],
    pub shift: DomainShift,
    /// Fractions of subjects whose final diagnosis is CN, MCI, AD.
    pub mixture: [f64; 3],
    pub subjects: usize,
    pub visits: VisitPolicy,
    pub phantom: PhantomSpec,
}

impl CohortSpec {
    pub fn adni_like(subjects: usize) -> Self {
        CohortSpec {
            name: "adni-like".into(),
            dims: [160, 160, 96],
            spacing: [1.5, 1.5, 1.5],
            shift: DomainShift { scale: 1.0, offset: 0.0, noise_sigma: 0.1 },
            mixture: [0.4, 0.3, 0.3],
            subjects,
            visits: VisitPolicy { min_visits: 1, max_visits: 3, p_earlier: 0.4 },
            phantom: PhantomSpec::default(),
        }
    }

    pub fn fleni_like(subjects: usize) -> Self {
        CohortSpec {
            name: "fleni-like".into(),
            dims: [128, 128, 47],
            spacing: [2.0, 2.0, 3.27],
            shift: DomainShift { scale: 1.3, offset: 0.2, noise_sigma: 0.1 },
            mixture: [0.5, 0.0, 0.5],
            subjects,
            visits: VisitPolicy::SINGLE,
            phantom: PhantomSpec::default(),
        }
    }

    /// Same field of view on a grid `factor` times coarser in every axis.
    pub fn coarsened(mut self, factor: usize) -> Self {
        let f = factor.max(1);
        for a in 0..3 {
            let fov = self.dims[a] as f64 * self.spacing[a];
            self.dims[a] = self.dims[a].div_ceil(f);
            self.spacing[a] = fov / self.dims[a] as f64;
        }
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.subjects == 0 {
            return Err(Error::Config("cohort needs at least one subject".into()));
        }
        if self.dims.contains(&0) || self.spacing.iter().any(|s| !(*s > 0.0)) {
            return Err(Error::Config("cohort grid must have positive dims and spacing".into()));
        }
        if self.mixture.iter().any(|m| !(*m >= 0.0)) || (self.mixture.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!("class mixture {:?} must be non-negative and sum to 1", self.mixture)));
        }
        let v = self.visits;
        if v.min_visits == 0 || v.min_visits > v.max_visits || !(0.0..=1.0).contains(&v.p_earlier) {
            return Err(Error::Config("visit policy needs 1 <= min <= max visits and p in [0, 1]".into()));
        }
        if !(self.shift.scale > 0.0) || !(self.shift.noise_sigma >= 0.0) {
            return Err(Error::Config("shift needs scale > 0 and sigma >= 0".into()));
        }
        self.phantom.validate()
    }

    /// Final diagnosis per subject: largest-remainder counts, then a seeded
    /// shuffle.
    pub fn final_diagnoses(&self, seed: u64) -> Vec<Diagnosis> {
        let n = self.subjects;
        let raw: Vec<f64> = self.mixture.iter().map(|m| m * n as f64).collect();
        let mut counts: Vec<usize> = raw.iter().map(|r| r.floor() as usize).collect();
        let mut order: Vec<usize> = (0..3).collect();
        order.sort_by(|&a, &b| (raw[b] - raw[b].floor()).total_cmp(&(raw[a] - raw[a].floor())).then(a.cmp(&b)));
        let mut left = n - counts.iter().sum::<usize>();
        for &c in order.iter().cycle() {
            if left == 0 {
                break;
            }
            if self.mixture[c] > 0.0 {
                counts[c] += 1;
                left -= 1;
            }
        }
        let mut out = Vec::with_capacity(n);
        for (c, d) in [Diagnosis::CN, Diagnosis::MCI, Diagnosis::AD].into_iter().enumerate() {
            out.extend(std::iter::repeat_n(d, counts[c]));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(u64::MAX);
        for i in (1..n).rev() {
            out.swap(i, rng.gen_range(0..=i));
        }
        out
    }
}

#[derive(Clone, Debug)]
pub struct SyntheticVisit {
    pub scan_id: String,
    pub date: NaiveDate,
    pub diagnosis: Diagnosis,
    pub volume: Volume,
}

#[derive(Clone, Debug)]
pub struct SyntheticSubject {
    pub subject_id: String,
    pub jitter: SubjectJitter,
    pub visits: Vec<SyntheticVisit>,
}

fn subject_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    rng
}

fn earlier(d: Diagnosis) -> Diagnosis {
    match d {
        Diagnosis::AD => Diagnosis::MCI,
        _ => Diagnosis::CN,
    }
}

pub fn subject_id(spec: &CohortSpec, index: usize) -> String {
    format!("{}-{index:04}", spec.name)
}

/// Visits and volumes for subject `index`, a pure function of its inputs.
pub fn generate_subject(spec: &CohortSpec, seed: u64, index: usize, final_dx: Diagnosis) -> Result<SyntheticSubject> {
    spec.validate()?;
    let mut rng = subject_rng(seed, index);
    let jitter = SubjectJitter::draw(&spec.phantom, &mut rng);
    let p = spec.visits;
    let count = rng.gen_range(p.min_visits..=p.max_visits);
    let mut dx = vec![final_dx; count];
    for i in (0..count.saturating_sub(1)).rev() {
        dx[i] = if rng.gen_bool(p.p_earlier) { earlier(dx[i + 1]) } else { dx[i + 1] };
    }
    let base = NaiveDate::from_ymd_opt(2010, 1, 1).expect("valid date") + Duration::days(rng.gen_range(0..1500));
    let sid = subject_id(spec, index);
    let mut visits = Vec::with_capacity(count);
    for (v, &d) in dx.iter().enumerate() {
        let clean = render_phantom(&spec.phantom, d, jitter, spec.dims, spec.spacing)?;
        let volume = inject_domain_shift(&clean, spec.shift, &mut rng)?;
        visits.push(SyntheticVisit {
            scan_id: format!("{sid}-v{}", v + 1),
            date: base + Duration::days(365 * v as i64 + rng.gen_range(0..60)),
            diagnosis: d,
            volume,
        });
    }
    Ok(SyntheticSubject { subject_id: sid, jitter, visits })
}

pub fn generate_subjects(spec: &CohortSpec, seed: u64) -> Result<Vec<SyntheticSubject>> {
    spec.validate()?;
    let finals = spec.final_diagnoses(seed);
    let gen = |(i, d): (usize, &Diagnosis)| generate_subject(spec, seed, i, *d);
    #[cfg(feature = "parallel")]
    {
        use rayon::prelude::*;
        finals.par_iter().enumerate().map(gen).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        finals.iter().enumerate().map(gen).collect()
    }
}

pub const MANIFEST_FILE: &str = "manifest.csv";
pub const SPEC_FILE: &str = "cohort.json";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CohortSummary {
    pub subjects: usize,
    pub scans: usize,
    /// Subjects per final diagnosis, CN, MCI, AD.
    pub final_counts: [usize; 3],
}

/// Writes `manifest.csv`, `cohort.json` and one volume per scan under
/// `volumes/`; manifest paths are relative to `out`.
pub fn generate_cohort(spec: &CohortSpec, seed: u64, out: &Path) -> Result<CohortSummary> {
    spec.validate()?;
    fs::create_dir_all(out).at(out)?;
    let finals = spec.final_diagnoses(seed);
    let mut records = Vec::new();
    let mut final_counts = [0usize; 3];
    for (i, &d) in finals.iter().enumerate() {
        let s = generate_subject(spec, seed, i, d)?;
        final_counts[d as usize] += 1;
        for v in s.visits {
            let rel = PathBuf::from("volumes").join(&v.scan_id);
            save_volume(&v.volume, &out.join(&rel))?;
            records.push(VisitRecord {
                subject_id: s.subject_id.clone(),
                scan_id: v.scan_id,
                acquisition_date: v.date,
                diagnosis: raw_code(v.diagnosis),
                volume_path: rel.to_string_lossy().into_owned(),
            });
        }
    }
    write_manifest(&out.join(MANIFEST_FILE), &records)?;
    let meta = serde_json::json!({ "seed": seed, "spec": spec });
    let p = out.join(SPEC_FILE);
    fs::write(&p, serde_json::to_string_pretty(&meta)? + "\n").at(&p)?;
    Ok(CohortSummary { subjects: finals.len(), scans: records.len(), final_counts })
}

/// The cohort without touching disk: manifest rows (volume paths are the
/// scan ids) and the volumes keyed by scan id.
pub fn generate_in_memory(spec: &CohortSpec, seed: u64) -> Result<(Vec<VisitRecord>, HashMap<String, Volume>)> {
    let mut records = Vec::new();
    let mut volumes = HashMap::new();
    for s in generate_subjects(spec, seed)? {
        for v in s.visits {
            records.push(VisitRecord {
                subject_id: s.subject_id.clone(),
                scan_id: v.scan_id.clone(),
                acquisition_date: v.date,
                diagnosis: raw_code(v.diagnosis),
                volume_path: v.scan_id.clone(),
            });
            volumes.insert(v.scan_id, v.volume);
        }
    }
    Ok((records, volumes))
}

fn raw_code(d: Diagnosis) -> RawDiagnosis {
    match d {
        Diagnosis::CN => RawDiagnosis::CN,
        Diagnosis::MCI => RawDiagnosis::MCI,
        Diagnosis::AD => RawDiagnosis::AD,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cohort::{read_manifest, Labeling};

    fn small(mut s: CohortSpec) -> CohortSpec {
        s = s.coarsened(8);
        s
    }

    fn region_mean(v: &Volume, mask: &[bool]) -> f64 {
        let (s, n) = v.voxels().iter().zip(mask).filter(|(_, m)| **m).fold((0.0, 0), |(s, n), (x, _)| (s + *x as f64, n + 1));
        s / n as f64
    }

    #[test]
    fn deterministic() {
        let spec = small(CohortSpec::adni_like(4));
        let a = generate_subject(&spec, 3, 1, Diagnosis::AD).unwrap();
        let b = generate_subject(&spec, 3, 1, Diagnosis::AD).unwrap();
        assert_eq!(a.visits.len(), b.visits.len());
        for (x, y) in a.visits.iter().zip(&b.visits) {
            assert_eq!((x.date, x.diagnosis, &x.scan_id), (y.date, y.diagnosis, &y.scan_id));
            assert!(x.volume.voxels().iter().zip(y.volume.voxels()).all(|(p, q)| p.to_bits() == q.to_bits()));
        }
    }

    #[test]
    fn region_attenuation_is_exact_before_noise() {
        let spec = PhantomSpec::default();
        let (dims, sp) = ([40, 40, 24], [6.0, 6.0, 6.0]);
        let j = SubjectJitter { radius_scale: [1.02, 0.97, 1.01], uptake: 1.03 };
        let mask = region_mask(&spec, j, dims, sp);
        assert!(mask.iter().filter(|m| **m).count() > 20);
        let cn = render_phantom(&spec, Diagnosis::CN, j, dims, sp).unwrap();
        let ad = render_phantom(&spec, Diagnosis::AD, j, dims, sp).unwrap();
        for ((a, c), m) in ad.voxels().iter().zip(cn.voxels()).zip(&mask) {
            if *m {
                assert_eq!(*a, (*c as f64 * 0.7) as f32);
            } else {
                assert_eq!(a, c);
            }
        }
        let ratio = region_mean(&ad, &mask) / region_mean(&cn, &mask);
        assert!((ratio - 0.7).abs() < 1e-6);
    }

    #[test]
    fn region_attenuation_with_noise_within_three_sigma() {
        let spec = PhantomSpec::default();
        let (dims, sp) = ([40, 40, 24], [6.0, 6.0, 6.0]);
        let mask = region_mask(&spec, SubjectJitter::NONE, dims, sp);
        let n = mask.iter().filter(|m| **m).count() as f64;
        let shift = DomainShift { scale: 1.0, offset: 0.0, noise_sigma: 0.1 };
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let clean_cn = render_phantom(&spec, Diagnosis::CN, SubjectJitter::NONE, dims, sp).unwrap();
        let clean_ad = render_phantom(&spec, Diagnosis::AD, SubjectJitter::NONE, dims, sp).unwrap();
        let cn = inject_domain_shift(&clean_cn, shift, &mut rng).unwrap();
        let ad = inject_domain_shift(&clean_ad, shift, &mut rng).unwrap();
        let expect = 0.7 * region_mean(&clean_cn, &mask);
        // Difference of two noisy means has sigma * sqrt(2/n).
        assert!((region_mean(&ad, &mask) - 0.7 * region_mean(&cn, &mask) - 0.0).abs() < 3.0 * 0.1 * (1.49 / n).sqrt());
        assert!((region_mean(&ad, &mask) - expect).abs() < 3.0 * 0.1 / n.sqrt());
    }

    #[test]
    fn identity_shift() {
        let spec = PhantomSpec::default();
        let v = render_phantom(&spec, Diagnosis::MCI, SubjectJitter::NONE, [20, 20, 12], [12.0; 3]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let w = inject_domain_shift(&v, DomainShift::IDENTITY, &mut rng).unwrap();
        assert_eq!(v, w);
        assert!(inject_domain_shift(&v, DomainShift { scale: 0.0, ..DomainShift::IDENTITY }, &mut rng).is_err());
    }

    #[test]
    fn region_outside_brain_rejected() {
        let mut spec = PhantomSpec::default();
        spec.regions[0].center = [0.9, 0.0, 0.0];
        assert!(matches!(spec.validate(), Err(Error::Config(_))));
        let mut spec = PhantomSpec::default();
        spec.factors[2] = 1.2;
        assert!(spec.validate().is_err());
    }

    #[test]
    fn mixture_counts() {
        let mut spec = CohortSpec::adni_like(100);
        spec.mixture = [0.5, 0.0, 0.5];
        let f = spec.final_diagnoses(7);
        let ad = f.iter().filter(|d| **d == Diagnosis::AD).count();
        assert_eq!(ad, 50);
        spec.subjects = 7;
        spec.mixture = [0.4, 0.3, 0.3];
        let f = spec.final_diagnoses(1);
        for (c, m) in spec.mixture.iter().enumerate() {
            let got = f.iter().filter(|d| **d as usize == c).count() as f64;
            assert!((got - m * 7.0).abs() <= 1.0);
        }
    }

    #[test]
    fn trajectories_are_monotone() {
        let spec = small(CohortSpec::adni_like(40));
        let mut lengths = std::collections::BTreeSet::new();
        for s in generate_subjects(&spec, 11).unwrap() {
            lengths.insert(s.visits.len());
            for w in s.visits.windows(2) {
                assert!(w[0].diagnosis <= w[1].diagnosis);
                assert!(w[0].date < w[1].date);
            }
        }
        assert_eq!(lengths.into_iter().collect::<Vec<_>>(), vec![1, 2, 3]);
    }

    #[test]
    fn cohort_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let spec = small(CohortSpec::fleni_like(6));
        let summary = generate_cohort(&spec, 2, dir.path()).unwrap();
        assert_eq!(summary, CohortSummary { subjects: 6, scans: 6, final_counts: [3, 0, 3] });
        let rows = read_manifest(&dir.path().join(MANIFEST_FILE)).unwrap();
        assert_eq!(rows.len(), 6);
        let out = crate::cohort::apply_labeling(&rows, Labeling::Visit953).unwrap();
        assert_eq!(out.scans.len(), 6);
        let v = crate::volume::load_volume(&dir.path().join(&rows[0].volume_path)).unwrap();
        assert_eq!(v.dims(), spec.dims);
    }

    #[test]
    fn coarsened_keeps_field_of_view() {
        let s = CohortSpec::fleni_like(1).coarsened(4);
        assert_eq!(s.dims, [32, 32, 12]);
        assert!((s.spacing[2] * 12.0 - 47.0 * 3.27).abs() < 1e-9);
    }
}
