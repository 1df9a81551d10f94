//! Synthetic datasets with controlled label noise and domain shift, plus the
//! plain-text tabular format.
//!
//! File format: no header, one sample per line, comma separated, `D` feature
//! columns followed by one integer label column, `.` as decimal separator.

use std::fmt;
use std::io::{Read, Write};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{AlumError, Result};
use crate::mining::fraction_count;
use crate::rng::{tag, RngKey};
use crate::tensor::DiffArray;

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDataset {
    pub dims: usize,
    pub num_classes: usize,
    /// Row-major `N×D`.
    pub features: Vec<f64>,
    pub labels: Vec<usize>,
    /// Labels before corruption, when known.
    pub clean_labels: Option<Vec<usize>>,
    pub domain_id: Option<Vec<usize>>,
}

impl LabeledDataset {
    pub fn new(dims: usize, num_classes: usize, features: Vec<f64>, labels: Vec<usize>) -> Result<Self> {
        if dims == 0 || features.len() != dims * labels.len() {
            return Err(AlumError::shape(format!(
                "{} feature values for {} samples of dimension {dims}",
                features.len(),
                labels.len()
            )));
        }
        if let Some(&l) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(AlumError::Label {
                label: l,
                classes: num_classes,
            });
        }
        Ok(LabeledDataset {
            dims,
            num_classes,
            features,
            labels,
            clean_labels: None,
            domain_id: None,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.features[i * self.dims..(i + 1) * self.dims]
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes];
        for &l in &self.labels {
            counts[l] += 1;
        }
        counts
    }

    /// Fraction of labels that differ from the clean labels.
    pub fn corruption_rate(&self) -> Option<f64> {
        let clean = self.clean_labels.as_ref()?;
        let flips = clean.iter().zip(&self.labels).filter(|(a, b)| a != b).count();
        Some(flips as f64 / self.len() as f64)
    }

    /// Every class must appear at least twice so in-batch mining is feasible.
    pub fn validate(&self) -> Result<()> {
        if let Some((c, n)) = self.class_counts().into_iter().enumerate().find(|&(_, n)| n < 2) {
            return Err(AlumError::contract(format!(
                "class {c} has {n} samples; need at least 2"
            )));
        }
        Ok(())
    }

    /// Gather a subset of samples, preserving clean labels and domains.
    pub fn subset(&self, index: &[usize]) -> LabeledDataset {
        let pick = |v: &Vec<usize>| index.iter().map(|&i| v[i]).collect::<Vec<_>>();
        LabeledDataset {
            dims: self.dims,
            num_classes: self.num_classes,
            features: index.iter().flat_map(|&i| self.row(i).iter().copied()).collect(),
            labels: pick(&self.labels),
            clean_labels: self.clean_labels.as_ref().map(pick),
            domain_id: self.domain_id.as_ref().map(pick),
        }
    }

    /// Split into the first `n_first` samples and the rest.
    pub fn split_at(&self, n_first: usize) -> (LabeledDataset, LabeledDataset) {
        let first: Vec<usize> = (0..n_first.min(self.len())).collect();
        let rest: Vec<usize> = (n_first.min(self.len())..self.len()).collect();
        (self.subset(&first), self.subset(&rest))
    }

    /// Features of the given samples as a `B×D` array.
    pub fn batch_features(&self, index: &[usize]) -> DiffArray {
        let vals = index.iter().flat_map(|&i| self.row(i).iter().copied()).collect();
        DiffArray::new(&[index.len(), self.dims], vals).expect("batch shape")
    }

    pub fn batch_labels(&self, index: &[usize]) -> Vec<usize> {
        index.iter().map(|&i| self.labels[i]).collect()
    }
}

/// Default distance of each class center from the origin.
pub const DEFAULT_CENTER_RADIUS: f64 = 5.0;

#[derive(Debug, Clone, PartialEq)]
pub struct BlobSpec {
    pub classes: usize,
    pub dims: usize,
    pub size: usize,
    /// Per-dimension standard deviation of each cluster.
    pub spread: f64,
    /// Centers are unit directions scaled by this radius.
    pub center_radius: f64,
    pub seed: u64,
}

impl BlobSpec {
    pub fn generate(&self) -> Result<LabeledDataset> {
        let (k, d, n) = (self.classes, self.dims, self.size);
        if k < 2 || n < 2 * k || d == 0 {
            return Err(AlumError::Generation(format!(
                "need K ≥ 2, D ≥ 1 and N ≥ 2K (K={k}, D={d}, N={n})"
            )));
        }
        if self.spread.is_nan() || self.spread < 0.0 || self.center_radius.is_nan() || self.center_radius <= 0.0 {
            return Err(AlumError::Generation("spread must be ≥ 0 and radius > 0".into()));
        }
        let mut rng = RngKey::root(self.seed).child(tag::DATA).rng();
        let min_sep = 2.0 * self.spread;
        let mut centers = None;
        for _ in 0..1000 {
            let c: Vec<Vec<f64>> = (0..k)
                .map(|_| {
                    let v: Vec<f64> = (0..d).map(|_| StandardNormal.sample(&mut rng)).collect();
                    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(f64::MIN_POSITIVE);
                    v.iter().map(|x| self.center_radius * x / norm).collect()
                })
                .collect();
            let sep = (0..k)
                .flat_map(|i| (i + 1..k).map(move |j| (i, j)))
                .map(|(i, j)| {
                    c[i].iter()
                        .zip(&c[j])
                        .map(|(a, b)| (a - b) * (a - b))
                        .sum::<f64>()
                        .sqrt()
                })
                .fold(f64::INFINITY, f64::min);
            if sep >= min_sep && sep > 0.0 {
                centers = Some(c);
                break;
            }
        }
        let centers = centers.ok_or_else(|| {
            AlumError::Generation(format!(
                "no {k} centers of radius {} separated by {min_sep} after 1000 draws",
                self.center_radius
            ))
        })?;
        let labels: Vec<usize> = (0..n).map(|i| i % k).collect();
        let mut features = Vec::with_capacity(n * d);
        for &l in &labels {
            for &c in &centers[l] {
                let z: f64 = StandardNormal.sample(&mut rng);
                features.push(c + self.spread * z);
            }
        }
        LabeledDataset::new(d, k, features, labels)
    }
}

/// `K` Gaussian clusters around unit-direction centers at the default radius.
pub fn make_blobs(classes: usize, dims: usize, size: usize, spread: f64, seed: u64) -> Result<LabeledDataset> {
    BlobSpec {
        classes,
        dims,
        size,
        spread,
        center_radius: DEFAULT_CENTER_RADIUS,
        seed,
    }
    .generate()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum NoiseKind {
    /// Flip labels to a uniformly chosen other class.
    SymmetricFlip,
    /// Replace features with draws far from every cluster, labels unchanged.
    OutlierInject,
    /// Per-domain random affine transforms of the features.
    DomainShift { domains: usize },
}

impl FromStr for NoiseKind {
    type Err = AlumError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "symmetric-flip" => Ok(NoiseKind::SymmetricFlip),
            "outlier-inject" => Ok(NoiseKind::OutlierInject),
            _ => match s.strip_prefix("domain-shift:") {
                Some(n) => Ok(NoiseKind::DomainShift {
                    domains: n
                        .parse()
                        .map_err(|_| AlumError::Config(format!("bad domain count in `{s}`")))?,
                }),
                None => Err(AlumError::Config(format!("unknown noise kind `{s}`"))),
            },
        }
    }
}

impl fmt::Display for NoiseKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            NoiseKind::SymmetricFlip => f.write_str("symmetric-flip"),
            NoiseKind::OutlierInject => f.write_str("outlier-inject"),
            NoiseKind::DomainShift { domains } => write!(f, "domain-shift:{domains}"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NoiseSpec {
    pub kind: NoiseKind,
    pub ratio: f64,
    pub seed: u64,
}

impl NoiseSpec {
    /// Noise levels of the standard label-flip grid.
    pub const STANDARD_RATIOS: [f64; 4] = [0.0, 0.1, 0.2, 0.3];

    pub fn flip(ratio: f64, seed: u64) -> Self {
        NoiseSpec {
            kind: NoiseKind::SymmetricFlip,
            ratio,
            seed,
        }
    }
}

fn check_ratio(ratio: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&ratio) {
        return Err(AlumError::contract(format!("noise ratio {ratio} outside [0, 1]")));
    }
    Ok(())
}

/// Flip exactly `floor(ratio·N)` uniformly chosen labels to a uniformly chosen
/// different class.
pub fn corrupt_labels(ds: &LabeledDataset, spec: &NoiseSpec) -> Result<LabeledDataset> {
    if spec.kind != NoiseKind::SymmetricFlip {
        return Err(AlumError::contract(format!(
            "corrupt_labels needs symmetric-flip, got {}",
            spec.kind
        )));
    }
    check_ratio(spec.ratio)?;
    let mut out = ds.clone();
    if out.clean_labels.is_none() {
        out.clean_labels = Some(ds.labels.clone());
    }
    let mut rng = RngKey::root(spec.seed).child(tag::NOISE).rng();
    let mut order: Vec<usize> = (0..ds.len()).collect();
    order.shuffle(&mut rng);
    let k = ds.num_classes;
    for &i in &order[..fraction_count(spec.ratio, ds.len())] {
        let offset = rng.random_range(1..k);
        out.labels[i] = (ds.labels[i] + offset) % k;
    }
    Ok(out)
}

/// Replace the features of `floor(ratio·N)` samples by isotropic Gaussian
/// draws with three times the spread of the data around its mean.
pub fn inject_outliers(ds: &LabeledDataset, spec: &NoiseSpec) -> Result<LabeledDataset> {
    check_ratio(spec.ratio)?;
    let n = ds.len() as f64;
    let d = ds.dims;
    let mean: Vec<f64> = (0..d)
        .map(|j| (0..ds.len()).map(|i| ds.row(i)[j]).sum::<f64>() / n)
        .collect();
    let scale = 3.0
        * ((0..ds.len())
            .map(|i| ds.row(i).iter().zip(&mean).map(|(x, m)| (x - m) * (x - m)).sum::<f64>())
            .sum::<f64>()
            / (n * d as f64))
            .sqrt();
    let mut out = ds.clone();
    let mut rng = RngKey::root(spec.seed).child(tag::NOISE).rng();
    let mut order: Vec<usize> = (0..ds.len()).collect();
    order.shuffle(&mut rng);
    for &i in &order[..fraction_count(spec.ratio, ds.len())] {
        for (j, m) in mean.iter().enumerate() {
            let z: f64 = StandardNormal.sample(&mut rng);
            out.features[i * d + j] = m + scale * z;
        }
    }
    Ok(out)
}

/// Diagonal affine map `x ↦ scale ∘ x + shift`.
#[derive(Debug, Clone, PartialEq)]
pub struct DomainTransform {
    pub scale: Vec<f64>,
    pub shift: Vec<f64>,
}

impl DomainTransform {
    pub fn identity(dims: usize) -> Self {
        DomainTransform {
            scale: vec![1.0; dims],
            shift: vec![0.0; dims],
        }
    }

    /// Scale uniform in `[0.5, 2]`, shift uniform in `[−1, 1]`, per dimension.
    pub fn random(dims: usize, rng: &mut impl Rng) -> Self {
        DomainTransform {
            scale: (0..dims).map(|_| rng.random_range(0.5..=2.0)).collect(),
            shift: (0..dims).map(|_| rng.random_range(-1.0..=1.0)).collect(),
        }
    }
}

pub fn domain_transforms(dims: usize, n_domains: usize, seed: u64) -> Vec<DomainTransform> {
    let mut rng = RngKey::root(seed).child(tag::DOMAIN).rng();
    (0..n_domains)
        .map(|_| DomainTransform::random(dims, &mut rng))
        .collect()
}

/// Assign domains round-robin and apply each domain's transform.
pub fn apply_domains(ds: &LabeledDataset, transforms: &[DomainTransform]) -> Result<LabeledDataset> {
    if transforms.is_empty()
        || transforms
            .iter()
            .any(|t| t.scale.len() != ds.dims || t.shift.len() != ds.dims)
    {
        return Err(AlumError::shape("domain transforms must match the feature dimension"));
    }
    let mut out = ds.clone();
    let ids: Vec<usize> = (0..ds.len()).map(|i| i % transforms.len()).collect();
    for (i, &dom) in ids.iter().enumerate() {
        let t = &transforms[dom];
        for j in 0..ds.dims {
            let v = &mut out.features[i * ds.dims + j];
            *v = t.scale[j] * *v + t.shift[j];
        }
    }
    out.domain_id = Some(ids);
    Ok(out)
}

pub fn shift_domain(ds: &LabeledDataset, n_domains: usize, seed: u64) -> Result<LabeledDataset> {
    if n_domains < 2 {
        return Err(AlumError::contract(format!("need at least 2 domains, got {n_domains}")));
    }
    apply_domains(ds, &domain_transforms(ds.dims, n_domains, seed))
}

pub fn apply_noise(ds: &LabeledDataset, spec: &NoiseSpec) -> Result<LabeledDataset> {
    match spec.kind {
        NoiseKind::SymmetricFlip => corrupt_labels(ds, spec),
        NoiseKind::OutlierInject => inject_outliers(ds, spec),
        NoiseKind::DomainShift { domains } => shift_domain(ds, domains, spec.seed),
    }
}

pub fn write_dataset<W: Write>(ds: &LabeledDataset, writer: W) -> Result<()> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(writer);
    let mut record = Vec::with_capacity(ds.dims + 1);
    for i in 0..ds.len() {
        record.clear();
        record.extend(ds.row(i).iter().map(|v| v.to_string()));
        record.push(ds.labels[i].to_string());
        w.write_record(&record)?;
    }
    w.flush()?;
    Ok(())
}

/// Read the tabular format. `num_classes` defaults to `max label + 1`.
pub fn read_dataset<R: Read>(reader: R, num_classes: Option<usize>) -> Result<LabeledDataset> {
    let mut r = csv::ReaderBuilder::new()
        .has_headers(false)
        .trim(csv::Trim::All)
        .from_reader(reader);
    let mut dims = None;
    let mut features = Vec::new();
    let mut labels = Vec::new();
    for (line, rec) in r.records().enumerate() {
        let rec = rec?;
        if rec.len() < 2 {
            return Err(AlumError::Format(format!(
                "line {}: need features and a label",
                line + 1
            )));
        }
        let d = rec.len() - 1;
        if *dims.get_or_insert(d) != d {
            return Err(AlumError::Format(format!(
                "line {}: expected {} features, got {d}",
                line + 1,
                dims.unwrap()
            )));
        }
        for field in rec.iter().take(d) {
            let v: f64 = field
                .parse()
                .map_err(|_| AlumError::Format(format!("line {}: bad number `{field}`", line + 1)))?;
            if !v.is_finite() {
                return Err(AlumError::Format(format!("line {}: non-finite value", line + 1)));
            }
            features.push(v);
        }
        let label = &rec[d];
        labels.push(
            label
                .parse::<usize>()
                .map_err(|_| AlumError::Format(format!("line {}: bad label `{label}`", line + 1)))?,
        );
    }
    let dims = dims.ok_or_else(|| AlumError::Format("empty dataset file".into()))?;
    let k = num_classes.unwrap_or_else(|| labels.iter().max().map_or(0, |m| m + 1));
    LabeledDataset::new(dims, k, features, labels)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn point_clusters_without_spread() {
        let ds = make_blobs(2, 3, 10, 0.0, 4).unwrap();
        assert_eq!(ds.class_counts(), vec![5, 5]);
        for i in 2..10 {
            assert_eq!(ds.row(i), ds.row(i % 2));
        }
        assert_ne!(ds.row(0), ds.row(1));
    }

    #[test]
    fn blobs_are_seeded() {
        assert_eq!(
            make_blobs(4, 10, 200, 1.0, 3).unwrap(),
            make_blobs(4, 10, 200, 1.0, 3).unwrap()
        );
        assert_ne!(
            make_blobs(4, 10, 200, 1.0, 3).unwrap(),
            make_blobs(4, 10, 200, 1.0, 4).unwrap()
        );
    }

    #[test]
    fn infeasible_separation_fails() {
        let spec = BlobSpec {
            classes: 4,
            dims: 10,
            size: 100,
            spread: 5.0,
            center_radius: 1.0,
            seed: 0,
        };
        assert!(matches!(spec.generate(), Err(AlumError::Generation(_))));
        assert!(make_blobs(3, 2, 5, 0.1, 0).is_err());
    }

    #[test]
    fn flip_counts_are_exact() {
        let ds = make_blobs(4, 2, 1000, 1.0, 1).unwrap();
        let noisy = corrupt_labels(&ds, &NoiseSpec::flip(0.3, 9)).unwrap();
        let flips = noisy.labels.iter().zip(&ds.labels).filter(|(a, b)| a != b).count();
        assert_eq!(flips, 300);
        assert_eq!(noisy.clean_labels.as_ref().unwrap(), &ds.labels);
        assert!((noisy.corruption_rate().unwrap() - 0.3).abs() < 1e-12);

        let same = corrupt_labels(&ds, &NoiseSpec::flip(0.0, 9)).unwrap();
        assert_eq!(same.labels, ds.labels);
    }

    #[test]
    fn full_flip_of_two_classes_is_complement() {
        let ds = make_blobs(2, 2, 20, 1.0, 1).unwrap();
        let noisy = corrupt_labels(&ds, &NoiseSpec::flip(1.0, 2)).unwrap();
        assert!(noisy.labels.iter().zip(&ds.labels).all(|(a, b)| *a == 1 - *b));
    }

    #[test]
    fn bad_ratio_is_contract_error() {
        let ds = make_blobs(2, 2, 20, 1.0, 1).unwrap();
        assert!(matches!(
            corrupt_labels(&ds, &NoiseSpec::flip(1.5, 2)),
            Err(AlumError::Contract(_))
        ));
    }

    #[test]
    fn identity_domain_is_noop() {
        let ds = make_blobs(3, 4, 30, 1.0, 1).unwrap();
        let shifted = apply_domains(&ds, &[DomainTransform::identity(4)]).unwrap();
        assert_eq!(shifted.features, ds.features);
        assert_eq!(shift_domain(&ds, 3, 5).unwrap(), shift_domain(&ds, 3, 5).unwrap());
        assert_eq!(shift_domain(&ds, 3, 5).unwrap().domain_id.unwrap()[..4], [0, 1, 2, 0]);
        assert!(shift_domain(&ds, 1, 5).is_err());
    }

    #[test]
    fn outliers_keep_labels() {
        let ds = make_blobs(3, 4, 30, 1.0, 1).unwrap();
        let out = apply_noise(
            &ds,
            &NoiseSpec {
                kind: NoiseKind::OutlierInject,
                ratio: 0.2,
                seed: 3,
            },
        )
        .unwrap();
        assert_eq!(out.labels, ds.labels);
        let changed = (0..30).filter(|&i| out.row(i) != ds.row(i)).count();
        assert_eq!(changed, 6);
    }

    #[test]
    fn file_round_trip() {
        let ds = make_blobs(3, 4, 30, 1.0, 1).unwrap();
        let mut buf = Vec::new();
        write_dataset(&ds, &mut buf).unwrap();
        let back = read_dataset(&buf[..], Some(3)).unwrap();
        assert_eq!(back, ds);
        assert!(read_dataset("1.0,2.0,0\n1.0,1\n".as_bytes(), None).is_err());
        assert!(read_dataset("1.0,x,0\n".as_bytes(), None).is_err());
        assert!(read_dataset("".as_bytes(), None).is_err());
    }
}
