//! Synthetic multi-domain datasets with rotation-controlled domain shift,
//! leave-one-domain-out splitting and the JSON-lines dataset format.

use std::collections::BTreeSet;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{CegError, Result};
use crate::pools::{Sample, SampleId};
use crate::rng::RngStream;
use crate::scalar::Scalar;

pub const DATASET_FORMAT: &str = "ceg-dataset";
pub const DATASET_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DomainSpec {
    pub num_domains: usize,
    pub num_classes: usize,
    pub samples_per_domain: usize,
    pub latent_dim: usize,
    pub ambient_dim: usize,
    pub rotation_angles_deg: Vec<f64>,
    pub class_separation: f64,
    pub noise_sigma: f64,
    /// Std of the isotropic noise added after embedding (variance 0.01 by default).
    pub ambient_noise_sigma: f64,
    pub seed: u64,
}

impl Default for DomainSpec {
    fn default() -> Self {
        Self {
            num_domains: 4,
            num_classes: 3,
            samples_per_domain: 300,
            latent_dim: 2,
            ambient_dim: 16,
            rotation_angles_deg: vec![0.0, 15.0, 30.0, 45.0],
            class_separation: 3.0,
            noise_sigma: 0.4,
            ambient_noise_sigma: 0.1,
            seed: 0,
        }
    }
}

impl DomainSpec {
    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(CegError::Config(msg));
        if self.num_domains < 2 {
            return fail(format!("num_domains must be >= 2, got {}", self.num_domains));
        }
        if self.num_classes < 2 {
            return fail(format!("num_classes must be >= 2, got {}", self.num_classes));
        }
        if self.rotation_angles_deg.len() != self.num_domains {
            return fail(format!(
                "rotation_angles_deg has {} entries for {} domains",
                self.rotation_angles_deg.len(),
                self.num_domains
            ));
        }
        let mut seen = Vec::new();
        for a in &self.rotation_angles_deg {
            if !a.is_finite() {
                return fail("rotation angles must be finite".into());
            }
            if seen.contains(a) {
                return fail(format!("rotation angles must be distinct, {a} repeats"));
            }
            seen.push(*a);
        }
        if self.samples_per_domain < self.num_classes {
            return fail(format!(
                "samples_per_domain ({}) must be >= num_classes ({})",
                self.samples_per_domain, self.num_classes
            ));
        }
        if self.latent_dim < 2 || self.ambient_dim < self.latent_dim {
            return fail(format!(
                "need 2 <= latent_dim <= ambient_dim, got {} and {}",
                self.latent_dim, self.ambient_dim
            ));
        }
        for (name, v) in [
            ("class_separation", self.class_separation),
            ("noise_sigma", self.noise_sigma),
            ("ambient_noise_sigma", self.ambient_noise_sigma),
        ] {
            if !(v >= 0.0) || !v.is_finite() {
                return fail(format!("{name} must be finite and >= 0, got {v}"));
            }
        }
        Ok(())
    }

    pub fn total_samples(&self) -> usize {
        self.num_domains * self.samples_per_domain
    }
}

/// Class mean in the 2-D latent plane for a domain rotated by `angle_deg`.
pub fn latent_class_mean(separation: f64, num_classes: usize, class: usize, angle_deg: f64) -> [f64; 2] {
    let phi = std::f64::consts::TAU * class as f64 / num_classes as f64 + angle_deg.to_radians();
    [separation * phi.cos(), separation * phi.sin()]
}

#[derive(Debug, Clone, PartialEq)]
pub struct GeneratedDataset<S> {
    pub spec: DomainSpec,
    pub samples: Vec<Sample<S>>,
}

/// Random `ambient × latent` matrix with orthonormal columns (row-major).
fn orthonormal_embedding(ambient: usize, latent: usize, rng: &mut RngStream) -> Vec<Vec<f64>> {
    let mut cols: Vec<Vec<f64>> = Vec::with_capacity(latent);
    while cols.len() < latent {
        let mut v: Vec<f64> = (0..ambient).map(|_| rng.sample(StandardNormal)).collect();
        for c in &cols {
            let proj: f64 = v.iter().zip(c).map(|(a, b)| a * b).sum();
            v.iter_mut().zip(c).for_each(|(a, b)| *a -= proj * b);
        }
        let n = v.iter().map(|a| a * a).sum::<f64>().sqrt();
        if n > 1e-8 {
            cols.push(v.into_iter().map(|a| a / n).collect());
        }
    }
    cols
}

pub fn generate<S: Scalar>(spec: &DomainSpec) -> Result<GeneratedDataset<S>> {
    spec.validate()?;
    let embedding = orthonormal_embedding(
        spec.ambient_dim,
        spec.latent_dim,
        &mut RngStream::new(spec.seed, "datagen/embedding"),
    );
    let mut samples = Vec::with_capacity(spec.total_samples());
    for (k, angle) in spec.rotation_angles_deg.iter().enumerate() {
        let mut rng = RngStream::new(spec.seed, format!("datagen/domain-{k}"));
        for i in 0..spec.samples_per_domain {
            let class = i % spec.num_classes;
            let mean = latent_class_mean(spec.class_separation, spec.num_classes, class, *angle);
            let latent: Vec<f64> = (0..spec.latent_dim)
                .map(|j| {
                    let z: f64 = rng.sample(StandardNormal);
                    mean.get(j).copied().unwrap_or(0.0) + spec.noise_sigma * z
                })
                .collect();
            let features = (0..spec.ambient_dim)
                .map(|a| {
                    let clean: f64 = embedding.iter().zip(&latent).map(|(col, l)| col[a] * l).sum();
                    let z: f64 = rng.sample(StandardNormal);
                    S::lit(clean + spec.ambient_noise_sigma * z)
                })
                .collect();
            samples.push(Sample {
                id: (k * spec.samples_per_domain + i) as SampleId,
                domain: k,
                class,
                features,
            });
        }
    }
    Ok(GeneratedDataset {
        spec: spec.clone(),
        samples,
    })
}

/// Source/target partition of a dataset with source domains renumbered `0..K-1`.
#[derive(Debug, Clone, PartialEq)]
pub struct DomainSplit<S> {
    pub sources: Vec<Sample<S>>,
    pub target: Vec<Sample<S>>,
    pub target_domain: usize,
    /// `source_domains[new] = original` domain index.
    pub source_domains: Vec<usize>,
    pub num_classes: usize,
}

impl<S> DomainSplit<S> {
    pub fn num_source_domains(&self) -> usize {
        self.source_domains.len()
    }
}

pub fn leave_one_domain_out<S: Scalar>(dataset: &GeneratedDataset<S>, target: usize) -> Result<DomainSplit<S>> {
    let k = dataset.spec.num_domains;
    if target >= k {
        return Err(CegError::Config(format!(
            "target domain {target} out of range for {k} domains"
        )));
    }
    let source_domains: Vec<usize> = (0..k).filter(|d| *d != target).collect();
    let mut sources = Vec::new();
    let mut held_out = Vec::new();
    for s in &dataset.samples {
        if s.domain == target {
            held_out.push(s.clone());
        } else {
            let mut s = s.clone();
            s.domain = source_domains
                .iter()
                .position(|d| *d == s.domain)
                .expect("domain index validated at load");
            sources.push(s);
        }
    }
    Ok(DomainSplit {
        sources,
        target: held_out,
        target_domain: target,
        source_domains,
        num_classes: dataset.spec.num_classes,
    })
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    format: String,
    version: u32,
    spec: DomainSpec,
}

/// Writes the header line followed by one JSON object per sample.
pub fn save_dataset<S: Scalar>(dataset: &GeneratedDataset<S>, path: &Path) -> Result<()> {
    let mut out = BufWriter::new(fs::File::create(path)?);
    let header = Header {
        format: DATASET_FORMAT.into(),
        version: DATASET_VERSION,
        spec: dataset.spec.clone(),
    };
    writeln!(out, "{}", serde_json::to_string(&header)?)?;
    for s in &dataset.samples {
        writeln!(out, "{}", serde_json::to_string(s)?)?;
    }
    out.flush()?;
    Ok(())
}

pub fn load_dataset<S: Scalar>(path: &Path) -> Result<GeneratedDataset<S>> {
    let parse_err = |line: usize, message: String| CegError::Parse {
        path: path.to_path_buf(),
        line,
        message,
    };
    let reader = BufReader::new(fs::File::open(path)?);
    let mut lines = reader.lines();
    let header_line = lines.next().ok_or_else(|| parse_err(1, "empty file".into()))??;
    let header: Header = serde_json::from_str(&header_line).map_err(|e| parse_err(1, e.to_string()))?;
    if header.format != DATASET_FORMAT || header.version != DATASET_VERSION {
        return Err(parse_err(
            1,
            format!("unsupported format {} v{}", header.format, header.version),
        ));
    }
    let spec = header.spec;
    spec.validate().map_err(|e| parse_err(1, e.to_string()))?;

    let mut samples: Vec<Sample<S>> = Vec::with_capacity(spec.total_samples());
    let mut ids = BTreeSet::new();
    let mut per_domain = vec![0usize; spec.num_domains];
    for (i, line) in lines.enumerate() {
        let lineno = i + 2;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let s: Sample<S> = serde_json::from_str(&line).map_err(|e| parse_err(lineno, e.to_string()))?;
        if s.domain >= spec.num_domains || s.class >= spec.num_classes {
            return Err(parse_err(lineno, "domain or class index out of range".into()));
        }
        if s.features.len() != spec.ambient_dim {
            return Err(parse_err(
                lineno,
                format!("expected {} features, found {}", spec.ambient_dim, s.features.len()),
            ));
        }
        if !ids.insert(s.id) {
            return Err(parse_err(lineno, format!("duplicate id {}", s.id)));
        }
        per_domain[s.domain] += 1;
        samples.push(s);
    }
    if let Some(k) = per_domain.iter().position(|n| *n != spec.samples_per_domain) {
        return Err(parse_err(
            samples.len() + 1,
            format!(
                "domain {k} has {} samples, header declares {} (truncated file?)",
                per_domain[k], spec.samples_per_domain
            ),
        ));
    }
    Ok(GeneratedDataset { spec, samples })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_spec() -> DomainSpec {
        DomainSpec {
            num_domains: 3,
            num_classes: 3,
            samples_per_domain: 12,
            ambient_dim: 5,
            rotation_angles_deg: vec![0.0, 20.0, 40.0],
            seed: 3,
            ..DomainSpec::default()
        }
    }

    #[test]
    fn validation_names_the_failed_invariant() {
        let spec = DomainSpec { num_domains: 1, rotation_angles_deg: vec![0.0], ..DomainSpec::default() };
        let err = spec.validate().unwrap_err().to_string();
        assert!(err.contains("num_domains"), "{err}");
        let spec = DomainSpec { rotation_angles_deg: vec![0.0, 0.0, 30.0, 45.0], ..DomainSpec::default() };
        assert!(spec.validate().unwrap_err().to_string().contains("distinct"));
        let spec = DomainSpec { samples_per_domain: 2, ..DomainSpec::default() };
        assert!(spec.validate().is_err());
    }

    #[test]
    fn noiseless_cells_are_identical() {
        let spec = DomainSpec { noise_sigma: 0.0, ambient_noise_sigma: 0.0, ..small_spec() };
        let ds = generate::<f64>(&spec).unwrap();
        for a in &ds.samples {
            for b in &ds.samples {
                if a.domain == b.domain && a.class == b.class {
                    assert_eq!(a.features, b.features);
                }
            }
        }
    }

    #[test]
    fn zero_rotation_means_coincide() {
        for h in 0..3 {
            assert_eq!(latent_class_mean(3.0, 3, h, 0.0), latent_class_mean(3.0, 3, h, 0.0));
        }
        let a = latent_class_mean(3.0, 3, 1, 0.0);
        let b = latent_class_mean(3.0, 3, 1, 360.0);
        assert!((a[0] - b[0]).abs() < 1e-12 && (a[1] - b[1]).abs() < 1e-12);
    }

    #[test]
    fn larger_angle_gap_means_larger_shift() {
        let gap = |deg: f64| {
            (0..3)
                .map(|h| {
                    let a = latent_class_mean(3.0, 3, h, 0.0);
                    let b = latent_class_mean(3.0, 3, h, deg);
                    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt()
                })
                .sum::<f64>()
                / 3.0
        };
        let mut last = 0.0;
        for deg in [5.0, 15.0, 30.0, 45.0, 90.0] {
            let g = gap(deg);
            assert!(g > last);
            last = g;
        }
    }

    #[test]
    fn balanced_and_counted() {
        let ds = generate::<f64>(&small_spec()).unwrap();
        assert_eq!(ds.samples.len(), 36);
        for k in 0..3 {
            for h in 0..3 {
                let n = ds.samples.iter().filter(|s| s.domain == k && s.class == h).count();
                assert_eq!(n, 4);
            }
        }
    }

    #[test]
    fn leave_one_out_split() {
        let spec = DomainSpec { num_domains: 2, rotation_angles_deg: vec![0.0, 30.0], ..small_spec() };
        let ds = generate::<f64>(&spec).unwrap();
        let split = leave_one_domain_out(&ds, 0).unwrap();
        assert_eq!(split.num_source_domains(), 1);
        assert_eq!(split.sources.len() + split.target.len(), ds.samples.len());
        assert!(leave_one_domain_out(&ds, 2).is_err());

        let ds = generate::<f64>(&small_spec()).unwrap();
        for t in 0..3 {
            let split = leave_one_domain_out(&ds, t).unwrap();
            assert_eq!(split.sources.len() + split.target.len(), ds.samples.len());
            assert!(split.target.iter().all(|s| s.domain == t));
            for s in &split.sources {
                let original = ds.samples.iter().find(|o| o.id == s.id).unwrap();
                assert_eq!(split.source_domains[s.domain], original.domain);
                assert_ne!(original.domain, t);
            }
        }
    }

    #[test]
    fn save_load_round_trip_and_determinism() {
        let dir = tempfile::tempdir().unwrap();
        let ds = generate::<f64>(&small_spec()).unwrap();
        let p1 = dir.path().join("a.jsonl");
        let p2 = dir.path().join("b.jsonl");
        save_dataset(&ds, &p1).unwrap();
        save_dataset(&generate::<f64>(&small_spec()).unwrap(), &p2).unwrap();
        assert_eq!(fs::read(&p1).unwrap(), fs::read(&p2).unwrap());
        let back = load_dataset::<f64>(&p1).unwrap();
        assert_eq!(back, ds);
    }

    #[test]
    fn truncated_file_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let ds = generate::<f64>(&small_spec()).unwrap();
        let path = dir.path().join("t.jsonl");
        save_dataset(&ds, &path).unwrap();
        let text = fs::read_to_string(&path).unwrap();
        // cut mid-line
        fs::write(&path, &text[..text.len() - 20]).unwrap();
        match load_dataset::<f64>(&path) {
            Err(CegError::Parse { line, .. }) => assert_eq!(line, 37),
            other => panic!("expected parse error, got {other:?}"),
        }
        // cut at a line boundary
        let lines: Vec<&str> = text.lines().collect();
        fs::write(&path, lines[..20].join("\n")).unwrap();
        assert!(matches!(load_dataset::<f64>(&path), Err(CegError::Parse { .. })));
    }

    #[test]
    fn hand_written_fixture_parses() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("fixture.jsonl");
        let text = concat!(
            r#"{"format":"ceg-dataset","version":1,"spec":{"num_domains":2,"num_classes":2,"samples_per_domain":2,"latent_dim":2,"ambient_dim":2,"rotation_angles_deg":[0.0,10.0],"class_separation":1.0,"noise_sigma":0.0,"ambient_noise_sigma":0.0,"seed":0}}"#,
            "\n",
            r#"{"id":0,"domain":0,"class":0,"x":[1.0,0.5]}"#,
            "\n",
            r#"{"id":1,"domain":0,"class":1,"x":[-0.25,2e-3]}"#,
            "\n",
            r#"{"id":7,"domain":1,"class":0,"x":[0.1,0.2]}"#,
            "\n",
            r#"{"id":8,"domain":1,"class":1,"x":[3,-4]}"#,
            "\n",
        );
        fs::write(&path, text).unwrap();
        let ds = load_dataset::<f64>(&path).unwrap();
        assert_eq!(ds.samples.len(), 4);
        assert_eq!(ds.samples[1], Sample { id: 1, domain: 0, class: 1, features: vec![-0.25, 0.002] });
        assert_eq!(ds.samples[3].features, vec![3.0, -4.0]);

        fs::write(&path, text.replace(r#""class":1,"x":[3,-4]"#, r#""class":5,"x":[3,-4]"#)).unwrap();
        match load_dataset::<f64>(&path) {
            Err(CegError::Parse { line, .. }) => assert_eq!(line, 5),
            other => panic!("{other:?}"),
        }
    }
}
