//! Dataset ingestion: directory-layout multi-domain datasets, a
//! deterministic synthetic multi-style generator for desk-scale
//! experiments, and leave-one-domain-out splitting.
//!
//! Domain annotations exist in manifests for evaluation and diagnostics,
//! but the training path sees them only through a guard that stays locked
//! unless the no-clustering ablation is active.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{LdpfError, Result};
use crate::rng::RngSeed;

/// One dataset record. `payload` is the numeric feature vector consumed by
/// the encoder; directory datasets populate it from `.json` payload files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub id: usize,
    pub class_id: usize,
    #[serde(default)]
    pub payload: Option<Vec<f64>>,
    #[serde(default)]
    pub path: Option<PathBuf>,
    /// Ground-truth domain/style id, when the dataset carries one.
    #[serde(default)]
    pub annotated_domain: Option<usize>,
}

/// A loaded dataset: class labels, optional domain annotations, samples.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub name: String,
    pub classes: Vec<String>,
    #[serde(default)]
    pub annotated_domains: Option<Vec<String>>,
    pub samples: Vec<Sample>,
}

impl DatasetManifest {
    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn num_annotated_domains(&self) -> usize {
        self.annotated_domains.as_ref().map(|d| d.len()).unwrap_or(0)
    }

    pub fn payload_dim(&self) -> Result<usize> {
        self.samples
            .iter()
            .find_map(|s| s.payload.as_ref().map(|p| p.len()))
            .ok_or_else(|| LdpfError::Dataset("no sample carries a numeric payload".into()))
    }

    fn validate(&self) -> Result<()> {
        let k = self.classes.len();
        if k == 0 || self.samples.is_empty() {
            return Err(LdpfError::Dataset("empty dataset".into()));
        }
        let l = self.num_annotated_domains();
        for s in &self.samples {
            if s.class_id >= k {
                return Err(LdpfError::Dataset(format!(
                    "sample {} has class {} out of {k}",
                    s.id, s.class_id
                )));
            }
            if let Some(d) = s.annotated_domain {
                if self.annotated_domains.is_none() || d >= l {
                    return Err(LdpfError::Dataset(format!(
                        "sample {} has domain annotation {d} out of {l}",
                        s.id
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Configuration of the synthetic generator. Class signal and style signal
/// live in disjoint payload coordinates, so they are orthogonal by
/// construction; every (style, class) cell receives the same sample count.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub n_styles: usize,
    pub n_classes: usize,
    pub samples_per_cell: usize,
    pub payload_dim: usize,
    pub noise_std: f64,
    /// Magnitude of class centers along their private coordinates
    /// (absolute units; the default is 50x the default noise).
    pub separation: f64,
    /// Style offset magnitude as a multiple of `separation`. Style is the
    /// dominant variance axis, as photographic style is for real image
    /// features; latent-domain recovery is only well-posed when the style
    /// factor outweighs per-class structure.
    pub style_scale: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            n_styles: 3,
            n_classes: 5,
            samples_per_cell: 40,
            payload_dim: 16,
            noise_std: 0.1,
            separation: 5.0,
            style_scale: 2.0,
            seed: 7,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_styles == 0 || self.n_classes == 0 || self.samples_per_cell == 0 {
            return Err(LdpfError::InvalidConfig(
                "synthetic spec needs positive styles, classes, and samples per cell".into(),
            ));
        }
        if self.payload_dim < self.n_classes + self.n_styles {
            return Err(LdpfError::InvalidConfig(format!(
                "payload dim {} too small for {} classes + {} styles in disjoint subspaces",
                self.payload_dim, self.n_classes, self.n_styles
            )));
        }
        if !self.noise_std.is_finite() || self.noise_std < 0.0 {
            return Err(LdpfError::InvalidConfig("noise_std must be >= 0".into()));
        }
        if !self.separation.is_finite() || self.separation <= 0.0 {
            return Err(LdpfError::InvalidConfig("separation must be > 0".into()));
        }
        if !self.style_scale.is_finite() || self.style_scale <= 0.0 {
            return Err(LdpfError::InvalidConfig("style_scale must be > 0".into()));
        }
        Ok(())
    }

    /// Class center: `separation` along the class's private coordinate.
    pub fn class_center(&self, class_id: usize) -> Vec<f64> {
        let mut p = vec![0.0; self.payload_dim];
        p[class_id] = self.separation;
        p
    }

    /// Style offset: `style_scale * separation` along the style's private
    /// coordinate.
    pub fn style_offset(&self, style_id: usize) -> Vec<f64> {
        let mut p = vec![0.0; self.payload_dim];
        p[self.n_classes + style_id] = self.style_scale * self.separation;
        p
    }

    /// One canonical payload per class (style-free), used to align the toy
    /// encoder pair the way a pretrained backbone would be.
    pub fn class_anchor_payloads(&self) -> Vec<Vec<f64>> {
        (0..self.n_classes).map(|k| self.class_center(k)).collect()
    }
}

/// Generate the synthetic dataset:
/// `payload = class_center(class) + style_offset(style) + noise`.
/// Styles double as annotated domains. Deterministic per seed.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<DatasetManifest> {
    spec.validate()?;
    let mut rng = RngSeed::new(spec.seed).rng();
    let mut samples = Vec::with_capacity(spec.n_styles * spec.n_classes * spec.samples_per_cell);
    let mut id = 0;
    for style in 0..spec.n_styles {
        for class in 0..spec.n_classes {
            let center = spec.class_center(class);
            let offset = spec.style_offset(style);
            for _ in 0..spec.samples_per_cell {
                let payload: Vec<f64> = center
                    .iter()
                    .zip(&offset)
                    .map(|(c, o)| c + o + spec.noise_std * crate::rng::gaussian(&mut rng))
                    .collect();
                samples.push(Sample {
                    id,
                    class_id: class,
                    payload: Some(payload),
                    path: None,
                    annotated_domain: Some(style),
                });
                id += 1;
            }
        }
    }
    let manifest = DatasetManifest {
        name: format!("synthetic-{}", spec.seed),
        classes: (0..spec.n_classes).map(|k| format!("class_{k}")).collect(),
        annotated_domains: Some((0..spec.n_styles).map(|s| format!("style_{s}")).collect()),
        samples,
    };
    manifest.validate()?;
    Ok(manifest)
}

/// Load a `root/domain/class/file` directory dataset.
///
/// Classes are the sorted union of class directory names; every domain must
/// carry the same class set. Files named `*.json` are parsed as numeric
/// payload vectors; other files keep only their path (decoding them is the
/// external adapter's job).
pub fn load_directory_dataset(root: &Path) -> Result<DatasetManifest> {
    if !root.is_dir() {
        return Err(LdpfError::Dataset(format!(
            "missing root: {} is not a directory",
            root.display()
        )));
    }
    let mut domains: Vec<PathBuf> = std::fs::read_dir(root)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .collect();
    domains.sort();
    if domains.is_empty() {
        return Err(LdpfError::Dataset(format!(
            "no domain directories under {}",
            root.display()
        )));
    }

    let class_set_of = |domain: &Path| -> Result<BTreeSet<String>> {
        let mut set = BTreeSet::new();
        for e in std::fs::read_dir(domain)? {
            let p = e?.path();
            if p.is_dir() {
                set.insert(p.file_name().unwrap().to_string_lossy().into_owned());
            }
        }
        Ok(set)
    };

    let first_classes = class_set_of(&domains[0])?;
    if first_classes.is_empty() {
        return Err(LdpfError::Dataset(format!(
            "no class directories under {}",
            domains[0].display()
        )));
    }
    for d in &domains[1..] {
        let classes = class_set_of(d)?;
        if classes != first_classes {
            return Err(LdpfError::Dataset(format!(
                "inconsistent label set: {} has classes {:?}, expected {:?}",
                d.display(),
                classes,
                first_classes
            )));
        }
    }

    let classes: Vec<String> = first_classes.into_iter().collect();
    let mut samples = Vec::new();
    let mut id = 0;
    for (domain_id, domain) in domains.iter().enumerate() {
        for (class_id, class) in classes.iter().enumerate() {
            let class_dir = domain.join(class);
            let mut files: Vec<PathBuf> = std::fs::read_dir(&class_dir)?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|p| p.is_file())
                .collect();
            files.sort();
            for f in files {
                let payload = if f.extension().is_some_and(|x| x == "json") {
                    let bytes = std::fs::read(&f)?;
                    let v: Vec<f64> = serde_json::from_slice(&bytes).map_err(|e| {
                        LdpfError::Format(format!("payload file {}: {e}", f.display()))
                    })?;
                    Some(v)
                } else {
                    None
                };
                samples.push(Sample {
                    id,
                    class_id,
                    payload,
                    path: Some(f),
                    annotated_domain: Some(domain_id),
                });
                id += 1;
            }
        }
    }
    let manifest = DatasetManifest {
        name: root
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_else(|| "dataset".into()),
        classes,
        annotated_domains: Some(
            domains
                .iter()
                .map(|d| d.file_name().unwrap().to_string_lossy().into_owned())
                .collect(),
        ),
        samples,
    };
    manifest.validate()?;
    Ok(manifest)
}

/// One leave-one-domain-out split: train on every domain except the target,
/// test on the target.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Split {
    pub target_domain: usize,
    pub target_name: String,
    pub train_indices: Vec<usize>,
    pub test_indices: Vec<usize>,
    /// Number of domains present in the training half.
    pub train_domain_count: usize,
}

impl Split {
    /// Dense re-index of an annotated domain id within the training half
    /// (the held-out target leaves a hole in the id space).
    pub fn dense_train_domain(&self, annotated: usize) -> Option<usize> {
        use std::cmp::Ordering;
        match annotated.cmp(&self.target_domain) {
            Ordering::Less => Some(annotated),
            Ordering::Equal => None,
            Ordering::Greater => Some(annotated - 1),
        }
    }
}

/// Build the L leave-one-domain-out splits of an annotated manifest.
pub fn leave_one_domain_out_splits(manifest: &DatasetManifest) -> Result<Vec<Split>> {
    let names = manifest.annotated_domains.as_ref().ok_or_else(|| {
        LdpfError::Dataset("leave-one-domain-out needs domain annotations".into())
    })?;
    let l = names.len();
    if l < 2 {
        return Err(LdpfError::Dataset(format!(
            "leave-one-domain-out needs at least 2 domains, found {l}"
        )));
    }
    if manifest.samples.iter().any(|s| s.annotated_domain.is_none()) {
        return Err(LdpfError::Dataset(
            "every sample needs a domain annotation for splitting".into(),
        ));
    }
    Ok((0..l)
        .map(|target| {
            let mut train = Vec::new();
            let mut test = Vec::new();
            for (i, s) in manifest.samples.iter().enumerate() {
                if s.annotated_domain == Some(target) {
                    test.push(i);
                } else {
                    train.push(i);
                }
            }
            Split {
                target_domain: target,
                target_name: names[target].clone(),
                train_indices: train,
                test_indices: test,
                train_domain_count: l - 1,
            }
        })
        .collect())
}

/// The training path's window onto a dataset. Payloads and class labels are
/// always visible; domain annotations are only readable when the view was
/// built with the no-clustering ablation active.
pub struct TrainView<'a> {
    manifest: &'a DatasetManifest,
    split: &'a Split,
    annotations_unlocked: bool,
}

impl<'a> TrainView<'a> {
    pub fn new(manifest: &'a DatasetManifest, split: &'a Split, unlock_annotations: bool) -> Self {
        Self {
            manifest,
            split,
            annotations_unlocked: unlock_annotations,
        }
    }

    pub fn len(&self) -> usize {
        self.split.train_indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.split.train_indices.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.manifest.num_classes()
    }

    /// How many annotated domains the training half spans, when the dataset
    /// is annotated at all. A count, not per-sample information; choosing
    /// the number of latent domains from it mirrors how the benchmark
    /// protocols fix that hyperparameter.
    pub fn train_domain_count(&self) -> Option<usize> {
        self.manifest
            .annotated_domains
            .as_ref()
            .map(|_| self.split.train_domain_count)
    }

    pub fn payload(&self, i: usize) -> Result<&[f64]> {
        let sample = &self.manifest.samples[self.split.train_indices[i]];
        sample.payload.as_deref().ok_or_else(|| {
            LdpfError::Dataset(format!(
                "sample {} has no numeric payload; decoding {} is delegated to the external \
                 encoder adapter",
                sample.id,
                sample
                    .path
                    .as_ref()
                    .map(|p| p.display().to_string())
                    .unwrap_or_else(|| "<no path>".into()),
            ))
        })
    }

    pub fn class_label(&self, i: usize) -> usize {
        self.manifest.samples[self.split.train_indices[i]].class_id
    }

    /// Densely re-indexed annotated domain of every training sample.
    ///
    /// Errors unless the view was explicitly unlocked (no-clustering
    /// ablation); this guard is what keeps ground-truth domains away from
    /// the training path.
    pub fn annotated_domains(&self) -> Result<Vec<usize>> {
        if !self.annotations_unlocked {
            return Err(LdpfError::AnnotationAccessDenied);
        }
        self.split
            .train_indices
            .iter()
            .map(|&idx| {
                let s = &self.manifest.samples[idx];
                let a = s.annotated_domain.ok_or_else(|| {
                    LdpfError::Dataset(format!("sample {} has no domain annotation", s.id))
                })?;
                self.split.dense_train_domain(a).ok_or_else(|| {
                    LdpfError::Dataset(format!(
                        "sample {} is annotated with the held-out domain",
                        s.id
                    ))
                })
            })
            .collect()
    }
}
