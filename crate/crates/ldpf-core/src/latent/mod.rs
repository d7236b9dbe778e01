//! Latent domain discovery: a small adversarially-trained extractor pulls
//! class-independent style features out of frozen image features, k-means
//! groups them into latent domains, and Kuhn-Munkres keeps cluster labels
//! stable across re-clustering rounds.

pub mod hungarian;
pub mod kmeans;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{LdpfError, Result};
use crate::math::{mean_cross_entropy, temperature_softmax, SimplexWeights, Temperature};
use crate::rng::RngSeed;

pub use hungarian::{min_cost_assignment, stabilize_assignment};
pub use kmeans::{kmeans_cluster, nearest_centroid, squared_distance, KmeansResult};

/// Fully-connected layer, `y = W x + b`, weight stored row-major `out x in`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Linear {
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn seeded(in_dim: usize, out_dim: usize, weight_std: f64, seed: RngSeed) -> Self {
        let mut rng = seed.rng();
        Linear {
            weight: (0..in_dim * out_dim)
                .map(|_| weight_std * crate::rng::gaussian(&mut rng))
                .collect(),
            bias: vec![0.0; out_dim],
            in_dim,
            out_dim,
        }
    }

    /// Orthonormal-row initialization scaled by `gain` (requires
    /// `out_dim <= in_dim`). Preserves input geometry better than iid rows,
    /// which matters when the layer's output is clustered.
    pub fn seeded_orthogonal(in_dim: usize, out_dim: usize, gain: f64, seed: RngSeed) -> Self {
        assert!(out_dim <= in_dim, "orthogonal rows need out_dim <= in_dim");
        let mut rng = seed.rng();
        let mut rows: Vec<Vec<f64>> = Vec::with_capacity(out_dim);
        while rows.len() < out_dim {
            let mut v: Vec<f64> = (0..in_dim).map(|_| crate::rng::gaussian(&mut rng)).collect();
            for r in &rows {
                let d: f64 = v.iter().zip(r).map(|(a, b)| a * b).sum();
                for (x, y) in v.iter_mut().zip(r) {
                    *x -= d * y;
                }
            }
            let n: f64 = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if n > 1e-8 {
                rows.push(v.into_iter().map(|x| x / n).collect());
            }
        }
        Linear {
            weight: rows
                .into_iter()
                .flat_map(|r| r.into_iter().map(|x| gain * x))
                .collect(),
            bias: vec![0.0; out_dim],
            in_dim,
            out_dim,
        }
    }

    pub fn forward(&self, x: &[f64]) -> Vec<f64> {
        debug_assert_eq!(x.len(), self.in_dim);
        (0..self.out_dim)
            .map(|o| {
                let row = &self.weight[o * self.in_dim..(o + 1) * self.in_dim];
                self.bias[o] + row.iter().zip(x).map(|(w, xi)| w * xi).sum::<f64>()
            })
            .collect()
    }

    /// Accumulate parameter gradients for one sample and return dL/dx.
    pub fn backward(&self, x: &[f64], grad_out: &[f64], grads: &mut LinearGrads) -> Vec<f64> {
        debug_assert_eq!(grad_out.len(), self.out_dim);
        let mut grad_in = vec![0.0; self.in_dim];
        for (o, g) in grad_out.iter().enumerate() {
            grads.bias[o] += g;
            let row = &self.weight[o * self.in_dim..(o + 1) * self.in_dim];
            let grow = &mut grads.weight[o * self.in_dim..(o + 1) * self.in_dim];
            for i in 0..self.in_dim {
                grow[i] += g * x[i];
                grad_in[i] += g * row[i];
            }
        }
        grad_in
    }

    pub fn zero_grads(&self) -> LinearGrads {
        LinearGrads {
            weight: vec![0.0; self.weight.len()],
            bias: vec![0.0; self.bias.len()],
        }
    }
}

/// Gradient buffers mirroring a [`Linear`].
#[derive(Debug, Clone)]
pub struct LinearGrads {
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

/// Two-layer MLP mapping frozen image features (dim D) to domain features
/// (dim Dd), rectifier between the layers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainFeatureExtractor {
    pub fc1: Linear,
    pub fc2: Linear,
}

/// Forward activations kept for the backward pass.
pub struct ExtractorCache {
    input: Vec<f64>,
    pre1: Vec<f64>,
    hidden: Vec<f64>,
}

impl DomainFeatureExtractor {
    pub fn seeded(feature_dim: usize, hidden_dim: usize, domain_dim: usize, seed: RngSeed) -> Self {
        // orthogonal rows (gain sqrt(2) for the rectifier) so the initial
        // domain features preserve image-feature geometry; clustering runs
        // on this space from the first epoch
        Self {
            fc1: Linear::seeded_orthogonal(
                feature_dim,
                hidden_dim,
                2.0f64.sqrt(),
                seed.child(0),
            ),
            fc2: Linear::seeded_orthogonal(hidden_dim, domain_dim, 2.0f64.sqrt(), seed.child(1)),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.fc1.in_dim
    }

    pub fn domain_dim(&self) -> usize {
        self.fc2.out_dim
    }

    /// `e(f(x)) = W2 relu(W1 f(x) + b1) + b2`.
    pub fn extract(&self, image_feature: &[f64]) -> Result<Vec<f64>> {
        Ok(self.extract_cached(image_feature)?.0)
    }

    pub fn extract_cached(&self, image_feature: &[f64]) -> Result<(Vec<f64>, ExtractorCache)> {
        if image_feature.len() != self.fc1.in_dim {
            return Err(LdpfError::DimensionMismatch(format!(
                "image feature dim {} vs extractor input dim {}",
                image_feature.len(),
                self.fc1.in_dim
            )));
        }
        let pre1 = self.fc1.forward(image_feature);
        let hidden: Vec<f64> = pre1.iter().map(|z| z.max(0.0)).collect();
        let out = self.fc2.forward(&hidden);
        Ok((
            out,
            ExtractorCache {
                input: image_feature.to_vec(),
                pre1,
                hidden,
            },
        ))
    }

    /// Accumulate parameter gradients given dL/d(domain feature).
    pub fn backward(&self, cache: &ExtractorCache, grad_out: &[f64], grads: &mut ExtractorGrads) {
        let grad_hidden = self.fc2.backward(&cache.hidden, grad_out, &mut grads.fc2);
        let grad_pre1: Vec<f64> = grad_hidden
            .iter()
            .zip(&cache.pre1)
            .map(|(g, z)| if *z > 0.0 { *g } else { 0.0 })
            .collect();
        self.fc1.backward(&cache.input, &grad_pre1, &mut grads.fc1);
    }

    pub fn zero_grads(&self) -> ExtractorGrads {
        ExtractorGrads {
            fc1: self.fc1.zero_grads(),
            fc2: self.fc2.zero_grads(),
        }
    }

    pub fn checksum(&self) -> String {
        let mut h = Sha256::new();
        for v in self
            .fc1
            .weight
            .iter()
            .chain(&self.fc1.bias)
            .chain(&self.fc2.weight)
            .chain(&self.fc2.bias)
        {
            h.update(v.to_le_bytes());
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }
}

#[derive(Debug, Clone)]
pub struct ExtractorGrads {
    pub fc1: LinearGrads,
    pub fc2: LinearGrads,
}

/// Linear classifier from domain features to class logits. Trained to
/// predict classes; the extractor is trained against it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuxiliaryClassifier {
    pub fc: Linear,
}

impl AuxiliaryClassifier {
    pub fn seeded(domain_dim: usize, num_classes: usize, seed: RngSeed) -> Self {
        Self {
            fc: Linear::seeded(domain_dim, num_classes, 1.0 / (domain_dim as f64).sqrt(), seed),
        }
    }

    pub fn num_classes(&self) -> usize {
        self.fc.out_dim
    }

    pub fn logits(&self, domain_feature: &[f64]) -> Result<Vec<f64>> {
        if domain_feature.len() != self.fc.in_dim {
            return Err(LdpfError::DimensionMismatch(format!(
                "domain feature dim {} vs classifier input dim {}",
                domain_feature.len(),
                self.fc.in_dim
            )));
        }
        Ok(self.fc.forward(domain_feature))
    }

    pub fn checksum(&self) -> String {
        let mut h = Sha256::new();
        for v in self.fc.weight.iter().chain(&self.fc.bias) {
            h.update(v.to_le_bytes());
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// Identity forward, `-lambda` scaled backward. Descending the adversarial
/// loss through this layer makes the classifier better at predicting classes
/// while pushing the extractor to erase them.
#[derive(Debug, Clone, Copy)]
pub struct GradientReversal {
    lambda: f64,
}

impl GradientReversal {
    pub fn new(lambda: f64) -> Result<Self> {
        if !lambda.is_finite() || lambda < 0.0 {
            return Err(LdpfError::InvalidScalar(format!(
                "reversal strength must be finite and nonnegative, got {lambda}"
            )));
        }
        Ok(Self { lambda })
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    pub fn forward(&self, batch: &[Vec<f64>]) -> Vec<Vec<f64>> {
        batch.to_vec()
    }

    pub fn backward(&self, grads: &[Vec<f64>]) -> Vec<Vec<f64>> {
        grads
            .iter()
            .map(|g| g.iter().map(|x| -self.lambda * x).collect())
            .collect()
    }
}

/// Mean cross-entropy of the auxiliary classifier on a batch of domain
/// features against class labels.
pub fn adversarial_loss(
    aux: &AuxiliaryClassifier,
    domain_features: &[Vec<f64>],
    class_labels: &[usize],
) -> Result<f64> {
    if domain_features.is_empty() {
        return Err(LdpfError::EmptyInput("adversarial batch".into()));
    }
    let tau1 = Temperature::new(1.0)?;
    let probs: Vec<SimplexWeights> = domain_features
        .iter()
        .map(|d| temperature_softmax(&aux.logits(d)?, tau1))
        .collect::<Result<_>>()?;
    mean_cross_entropy(&probs, class_labels)
}

/// Adversarial loss plus gradients: parameter gradients for the classifier
/// and dL/d(domain feature) per sample (to be routed through the reversal
/// layer into the extractor).
pub fn adversarial_loss_with_grads(
    aux: &AuxiliaryClassifier,
    domain_features: &[Vec<f64>],
    class_labels: &[usize],
) -> Result<(f64, LinearGrads, Vec<Vec<f64>>)> {
    if domain_features.is_empty() {
        return Err(LdpfError::EmptyInput("adversarial batch".into()));
    }
    if domain_features.len() != class_labels.len() {
        return Err(LdpfError::DimensionMismatch(format!(
            "{} features vs {} labels",
            domain_features.len(),
            class_labels.len()
        )));
    }
    let n = domain_features.len() as f64;
    let tau1 = Temperature::new(1.0)?;
    let mut grads = aux.fc.zero_grads();
    let mut input_grads = Vec::with_capacity(domain_features.len());
    let mut loss = 0.0;
    for (d, &y) in domain_features.iter().zip(class_labels) {
        let logits = aux.logits(d)?;
        if y >= logits.len() {
            return Err(LdpfError::IndexOutOfRange(format!(
                "class label {y} out of {}",
                logits.len()
            )));
        }
        let p = temperature_softmax(&logits, tau1)?;
        loss -= p.as_slice()[y].max(1e-12).ln();
        let grad_logits: Vec<f64> = p
            .as_slice()
            .iter()
            .enumerate()
            .map(|(k, pk)| (pk - if k == y { 1.0 } else { 0.0 }) / n)
            .collect();
        input_grads.push(aux.fc.backward(d, &grad_logits, &mut grads));
    }
    Ok((loss / n, grads, input_grads))
}

/// Centroids and per-sample latent labels produced by a clustering round.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatentDomainState {
    pub centroids: Vec<Vec<f64>>,
    pub assignments: Vec<usize>,
    /// Re-clustering round counter.
    pub round: u64,
}

impl LatentDomainState {
    pub fn new(centroids: Vec<Vec<f64>>, assignments: Vec<usize>, round: u64) -> Self {
        Self {
            centroids,
            assignments,
            round,
        }
    }

    pub fn num_domains(&self) -> usize {
        self.centroids.len()
    }

    /// Nearest centroid by Euclidean distance, ties to the lowest index.
    pub fn assign(&self, domain_feature: &[f64]) -> Result<usize> {
        if self.centroids.is_empty() {
            return Err(LdpfError::EmptyInput("latent domain centroids".into()));
        }
        Ok(nearest_centroid(domain_feature, &self.centroids))
    }

    /// Relabel centroids and assignments so label `s` refers to what
    /// `perm[s]` referred to before (the Kuhn-Munkres match).
    pub fn relabel(&mut self, perm: &[usize]) -> Result<()> {
        let k = self.centroids.len();
        if perm.len() != k {
            return Err(LdpfError::DimensionMismatch(format!(
                "permutation of length {} for {} centroids",
                perm.len(),
                k
            )));
        }
        let mut inverse = vec![usize::MAX; k];
        for (s, &j) in perm.iter().enumerate() {
            if j >= k || inverse[j] != usize::MAX {
                return Err(LdpfError::InvalidConfig(
                    "relabeling permutation is not a bijection".into(),
                ));
            }
            inverse[j] = s;
        }
        self.centroids = perm.iter().map(|&j| self.centroids[j].clone()).collect();
        for a in self.assignments.iter_mut() {
            *a = inverse[*a];
        }
        Ok(())
    }
}
