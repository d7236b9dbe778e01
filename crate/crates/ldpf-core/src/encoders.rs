//! Frozen encoder pair: a deterministic toy image/text encoder for
//! desk-scale experiments plus an adapter seam for externally supplied
//! backbone weights.
//!
//! The image path is `normalize(tanh(P x + c))`. The text path pools token
//! embeddings with fixed position weights anchored at the sequence end
//! (mimicking end-of-text pooling), applies a fixed affine map, and
//! normalizes: `normalize(A (sum_j w_j t_j) + b)`. The text path exposes an
//! analytic backward pass so gradients reach learnable prompt tokens while
//! every encoder parameter stays frozen.
//!
//! When class anchor payloads are given, `A` is constructed so that each
//! class token lands near that class's canonical image direction. This makes
//! the pair behave like a pretrained, modality-aligned backbone instead of
//! two unrelated random projections.

use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{LdpfError, Result};
use crate::math::{l2_norm, l2_normalize, FeatureVector};
use crate::rng::RngSeed;

/// Default context capacity of the text encoder.
pub const MAX_CONTEXT_LENGTH: usize = 77;

/// An ordered list of token embeddings fed to the text encoder.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenSequence {
    tokens: Vec<Vec<f64>>,
}

impl TokenSequence {
    pub fn new(tokens: Vec<Vec<f64>>, embed_dim: usize) -> Result<Self> {
        if tokens.is_empty() {
            return Err(LdpfError::EmptyInput("token sequence".into()));
        }
        if tokens.len() > MAX_CONTEXT_LENGTH {
            return Err(LdpfError::DimensionMismatch(format!(
                "sequence length {} exceeds context capacity {}",
                tokens.len(),
                MAX_CONTEXT_LENGTH
            )));
        }
        if let Some(t) = tokens.iter().find(|t| t.len() != embed_dim) {
            return Err(LdpfError::DimensionMismatch(format!(
                "token of dim {} in sequence of embed dim {}",
                t.len(),
                embed_dim
            )));
        }
        Ok(Self { tokens })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[Vec<f64>] {
        &self.tokens
    }
}

/// Which backbone to construct and where its parameters come from.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct BackboneDescriptor {
    /// "toy" or "external".
    pub kind: String,
    /// Path of a weights file, used only by the external kind.
    #[serde(default)]
    pub weights_path: String,
    /// Feature dimension D shared by image and text features.
    pub image_dim: usize,
    /// Token embedding dimension E.
    pub embed_dim: usize,
    /// Seed for the toy parameter construction.
    #[serde(default = "default_backbone_seed")]
    pub seed: u64,
}

fn default_backbone_seed() -> u64 {
    42
}

impl Default for BackboneDescriptor {
    fn default() -> Self {
        Self {
            kind: "toy".into(),
            weights_path: String::new(),
            image_dim: 32,
            embed_dim: 16,
            seed: default_backbone_seed(),
        }
    }
}

/// Serialized parameter set accepted on the external adapter path.
///
/// Any upstream system that can project images and pooled token embeddings
/// through fixed affine maps can export this file and plug in here.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExternalWeights {
    pub image_proj: Vec<Vec<f64>>,
    pub image_bias: Vec<f64>,
    pub text_map: Vec<Vec<f64>>,
    pub text_bias: Vec<f64>,
    pub position_weights: Vec<f64>,
    pub class_tokens: Vec<Vec<f64>>,
}

/// The frozen encoder pair. No method mutates parameters after construction.
#[derive(Debug, Clone)]
pub struct EncoderPair {
    /// D x payload_dim image projection.
    image_proj: Vec<Vec<f64>>,
    /// D image bias.
    image_bias: Vec<f64>,
    /// D x E text map.
    text_map: Vec<Vec<f64>>,
    /// D text bias.
    text_bias: Vec<f64>,
    /// Position weights indexed by distance from the sequence end:
    /// `position_weights[0]` multiplies the last token.
    position_weights: Vec<f64>,
    /// K fixed class token embeddings (one token per class).
    class_tokens: Vec<Vec<f64>>,
    payload_dim: usize,
    feature_dim: usize,
    embed_dim: usize,
}

impl EncoderPair {
    /// Build the encoder pair named by `desc`.
    ///
    /// `class_anchor_payloads`, when present, gives one canonical payload per
    /// class; the toy text map is aligned so the bare class token encodes
    /// near that class's image direction (requires `K <= embed_dim`).
    pub fn from_descriptor(
        desc: &BackboneDescriptor,
        payload_dim: usize,
        num_classes: usize,
        class_anchor_payloads: Option<&[Vec<f64>]>,
    ) -> Result<Self> {
        match desc.kind.as_str() {
            "toy" => Self::toy(
                payload_dim,
                desc.image_dim,
                desc.embed_dim,
                num_classes,
                RngSeed::new(desc.seed),
                class_anchor_payloads,
            ),
            "external" => Self::external(&desc.weights_path, payload_dim, num_classes),
            other => Err(LdpfError::InvalidConfig(format!(
                "unknown backbone kind {other:?}; expected \"toy\" or \"external\""
            ))),
        }
    }

    /// Deterministic toy pair from a seed.
    pub fn toy(
        payload_dim: usize,
        feature_dim: usize,
        embed_dim: usize,
        num_classes: usize,
        seed: RngSeed,
        class_anchor_payloads: Option<&[Vec<f64>]>,
    ) -> Result<Self> {
        if payload_dim == 0 || feature_dim == 0 || embed_dim == 0 || num_classes == 0 {
            return Err(LdpfError::InvalidConfig(
                "encoder dims and class count must be positive".into(),
            ));
        }
        let gauss = crate::rng::gaussian;

        // Image projection: unit-norm rows scaled by a fixed gain, so the
        // tanh works in a mildly saturating range for payloads of order
        // a few units.
        let mut rng = seed.child(10).rng();
        let image_gain = 0.35 / (payload_dim as f64).sqrt();
        let mut image_proj = Vec::with_capacity(feature_dim);
        for _ in 0..feature_dim {
            let row: Vec<f64> = (0..payload_dim).map(|_| gauss(&mut rng)).collect();
            let n = l2_norm(&row).max(1e-12);
            image_proj.push(
                row.iter()
                    .map(|x| x / n * image_gain * (payload_dim as f64).sqrt())
                    .collect(),
            );
        }
        let mut rng = seed.child(11).rng();
        let image_bias: Vec<f64> = (0..feature_dim).map(|_| 0.1 * gauss(&mut rng)).collect();

        // End-anchored position weights, distinct by construction.
        let mut rng = seed.child(14).rng();
        let position_weights: Vec<f64> = (0..MAX_CONTEXT_LENGTH)
            .map(|i| 0.93f64.powi(i as i32) * (1.0 + 0.05 * rng.random::<f64>()))
            .collect();

        // Class tokens: unit-norm random embeddings, one per class.
        let mut rng = seed.child(15).rng();
        let mut class_tokens = Vec::with_capacity(num_classes);
        for _ in 0..num_classes {
            let t: Vec<f64> = (0..embed_dim).map(|_| gauss(&mut rng)).collect();
            class_tokens.push(l2_normalize(&t)?);
        }

        let mut rng = seed.child(13).rng();
        let text_bias: Vec<f64> = (0..feature_dim).map(|_| 0.01 * gauss(&mut rng)).collect();

        let mut rng = seed.child(12).rng();
        let sigma_r = 1.0 / (embed_dim as f64).sqrt();
        let mut text_map: Vec<Vec<f64>> = (0..feature_dim)
            .map(|_| (0..embed_dim).map(|_| sigma_r * gauss(&mut rng)).collect())
            .collect();

        let mut pair = Self {
            image_proj,
            image_bias,
            text_map,
            text_bias: text_bias.clone(),
            position_weights: position_weights.clone(),
            class_tokens: class_tokens.clone(),
            payload_dim,
            feature_dim,
            embed_dim,
        };

        if let Some(anchors) = class_anchor_payloads {
            if anchors.len() != num_classes {
                return Err(LdpfError::InvalidConfig(format!(
                    "{} class anchors for {} classes",
                    anchors.len(),
                    num_classes
                )));
            }
            if num_classes > embed_dim {
                return Err(LdpfError::InvalidConfig(format!(
                    "class anchoring needs num_classes <= embed_dim ({num_classes} > {embed_dim}); raise embed_dim"
                )));
            }
            // Targets: the canonical image direction of each class, scaled so
            // that the bare class token (weighted by the end position weight)
            // reproduces it through A.
            let mut targets = Vec::with_capacity(num_classes);
            for anchor in anchors {
                let f = pair.encode_image(anchor)?;
                targets.push(f.0);
            }
            let w0 = position_weights[0];
            text_map = aligned_text_map(
                &pair.text_map,
                &class_tokens,
                &targets,
                w0,
                feature_dim,
                embed_dim,
            )?;
            pair.text_map = text_map;
        }

        Ok(pair)
    }

    /// Load an externally exported parameter set.
    fn external(weights_path: &str, payload_dim: usize, num_classes: usize) -> Result<Self> {
        if weights_path.is_empty() {
            return Err(LdpfError::MissingWeights(
                "no weights_path configured for the external backbone; point it at an \
                 exported weights file or switch kind to \"toy\""
                    .into(),
            ));
        }
        let bytes = std::fs::read(weights_path).map_err(|e| {
            LdpfError::MissingWeights(format!(
                "cannot read {weights_path}: {e}; export backbone weights to this path \
                 or switch kind to \"toy\""
            ))
        })?;
        let w: ExternalWeights = serde_json::from_slice(&bytes)
            .map_err(|e| LdpfError::Format(format!("malformed weights file {weights_path}: {e}")))?;

        let feature_dim = w.image_proj.len();
        if feature_dim == 0 || w.text_map.len() != feature_dim {
            return Err(LdpfError::DimensionMismatch(
                "external weights: image_proj and text_map must have equal, nonzero row counts"
                    .into(),
            ));
        }
        if w.image_proj.iter().any(|r| r.len() != payload_dim) {
            return Err(LdpfError::DimensionMismatch(format!(
                "external weights expect payload dim {}, dataset provides {payload_dim}",
                w.image_proj[0].len()
            )));
        }
        let embed_dim = w.text_map[0].len();
        if w.text_map.iter().any(|r| r.len() != embed_dim)
            || w.image_bias.len() != feature_dim
            || w.text_bias.len() != feature_dim
        {
            return Err(LdpfError::DimensionMismatch(
                "external weights: inconsistent row dims".into(),
            ));
        }
        if w.class_tokens.len() != num_classes {
            return Err(LdpfError::DimensionMismatch(format!(
                "external weights carry {} class tokens, dataset has {num_classes} classes",
                w.class_tokens.len()
            )));
        }
        if w.class_tokens.iter().any(|t| t.len() != embed_dim) {
            return Err(LdpfError::DimensionMismatch(
                "external weights: class token dim differs from embed dim".into(),
            ));
        }
        if w.position_weights.is_empty() {
            return Err(LdpfError::Format(
                "external weights: empty position_weights".into(),
            ));
        }
        Ok(Self {
            image_proj: w.image_proj,
            image_bias: w.image_bias,
            text_map: w.text_map,
            text_bias: w.text_bias,
            position_weights: w.position_weights,
            class_tokens: w.class_tokens,
            payload_dim,
            feature_dim,
            embed_dim,
        })
    }

    pub fn payload_dim(&self) -> usize {
        self.payload_dim
    }

    pub fn feature_dim(&self) -> usize {
        self.feature_dim
    }

    pub fn embed_dim(&self) -> usize {
        self.embed_dim
    }

    pub fn num_classes(&self) -> usize {
        self.class_tokens.len()
    }

    pub fn max_context(&self) -> usize {
        self.position_weights.len()
    }

    /// The fixed embedding of class `k`.
    pub fn class_token(&self, k: usize) -> Result<&[f64]> {
        self.class_tokens
            .get(k)
            .map(|t| t.as_slice())
            .ok_or_else(|| {
                LdpfError::IndexOutOfRange(format!(
                    "class {k} out of {}",
                    self.class_tokens.len()
                ))
            })
    }

    /// Image path: `normalize(tanh(P x + c))`. Deterministic.
    pub fn encode_image(&self, payload: &[f64]) -> Result<FeatureVector> {
        if payload.len() != self.payload_dim {
            return Err(LdpfError::DimensionMismatch(format!(
                "payload dim {} vs encoder input dim {}",
                payload.len(),
                self.payload_dim
            )));
        }
        let mut z = Vec::with_capacity(self.feature_dim);
        for (row, b) in self.image_proj.iter().zip(&self.image_bias) {
            let mut s = *b;
            for (w, x) in row.iter().zip(payload) {
                s += w * x;
            }
            z.push(s.tanh());
        }
        Ok(FeatureVector(l2_normalize(&z)?))
    }

    /// Pooled pre-activation `z = A (sum_j w_j t_j) + b` for a sequence.
    fn text_preactivation(&self, seq: &TokenSequence) -> Result<(Vec<f64>, Vec<f64>)> {
        if seq.is_empty() {
            return Err(LdpfError::EmptyInput("token sequence".into()));
        }
        let n = seq.len();
        if n > self.position_weights.len() {
            return Err(LdpfError::DimensionMismatch(format!(
                "sequence length {n} exceeds context capacity {}",
                self.position_weights.len()
            )));
        }
        let mut pooled = vec![0.0; self.embed_dim];
        for (j, tok) in seq.tokens().iter().enumerate() {
            if tok.len() != self.embed_dim {
                return Err(LdpfError::DimensionMismatch(format!(
                    "token dim {} vs embed dim {}",
                    tok.len(),
                    self.embed_dim
                )));
            }
            let w = self.position_weights[n - 1 - j];
            for (p, t) in pooled.iter_mut().zip(tok) {
                *p += w * t;
            }
        }
        let mut z = Vec::with_capacity(self.feature_dim);
        for (row, b) in self.text_map.iter().zip(&self.text_bias) {
            let mut s = *b;
            for (a, p) in row.iter().zip(&pooled) {
                s += a * p;
            }
            z.push(s);
        }
        Ok((pooled, z))
    }

    /// Text path: position-weighted pooling, fixed affine map, L2 normalize.
    pub fn encode_text(&self, seq: &TokenSequence) -> Result<FeatureVector> {
        let (_, z) = self.text_preactivation(seq)?;
        Ok(FeatureVector(l2_normalize(&z)?))
    }

    /// Gradient of `encode_text` with respect to every token embedding.
    ///
    /// `grad_out` is dL/d(feature); the result is dL/d(token) for each token
    /// in order. Encoder parameters receive no gradient (frozen contract).
    pub fn encode_text_backward(
        &self,
        seq: &TokenSequence,
        grad_out: &[f64],
    ) -> Result<Vec<Vec<f64>>> {
        if grad_out.len() != self.feature_dim {
            return Err(LdpfError::DimensionMismatch(format!(
                "gradient dim {} vs feature dim {}",
                grad_out.len(),
                self.feature_dim
            )));
        }
        let (_, z) = self.text_preactivation(seq)?;
        let zn = l2_norm(&z);
        if zn < 1e-12 {
            return Err(LdpfError::DegenerateFeature);
        }
        let u: Vec<f64> = z.iter().map(|x| x / zn).collect();
        // d(normalize)/dz = (I - u u^T) / |z|
        let gu: f64 = grad_out.iter().zip(&u).map(|(g, ui)| g * ui).sum();
        let grad_z: Vec<f64> = grad_out
            .iter()
            .zip(&u)
            .map(|(g, ui)| (g - gu * ui) / zn)
            .collect();
        // dL/d(pooled) = A^T grad_z
        let mut grad_pooled = vec![0.0; self.embed_dim];
        for (row, gz) in self.text_map.iter().zip(&grad_z) {
            for (gp, a) in grad_pooled.iter_mut().zip(row) {
                *gp += a * gz;
            }
        }
        let n = seq.len();
        Ok((0..n)
            .map(|j| {
                let w = self.position_weights[n - 1 - j];
                grad_pooled.iter().map(|g| w * g).collect()
            })
            .collect())
    }

    /// SHA-256 over every parameter, for the frozen contract and checkpoint
    /// fingerprints.
    pub fn checksum(&self) -> String {
        let mut h = Sha256::new();
        let mut feed = |values: &[f64]| {
            for v in values {
                h.update(v.to_le_bytes());
            }
        };
        for row in &self.image_proj {
            feed(row);
        }
        feed(&self.image_bias);
        for row in &self.text_map {
            feed(row);
        }
        feed(&self.text_bias);
        feed(&self.position_weights);
        for t in &self.class_tokens {
            feed(t);
        }
        let digest = h.finalize();
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// Replace the span of the class tokens in `residual_map` so that
/// `A (w0 tok_k) = target_k`, keeping the residual action on the orthogonal
/// complement. Both behaviors combine as `A = T P + R (I - P)` with `P` the
/// projector onto span(tok_k).
fn aligned_text_map(
    residual_map: &[Vec<f64>],
    class_tokens: &[Vec<f64>],
    targets: &[Vec<f64>],
    w0: f64,
    feature_dim: usize,
    embed_dim: usize,
) -> Result<Vec<Vec<f64>>> {
    let k = class_tokens.len();
    // Gram matrix G = Tok^T Tok (k x k) and its inverse.
    let mut gram = vec![vec![0.0; k]; k];
    for i in 0..k {
        for j in 0..k {
            gram[i][j] = class_tokens[i]
                .iter()
                .zip(&class_tokens[j])
                .map(|(a, b)| a * b)
                .sum();
        }
    }
    let gram_inv = invert_matrix(&gram).ok_or_else(|| {
        LdpfError::InvalidConfig("class token embeddings are linearly dependent".into())
    })?;
    // Pinv rows: Tok^+ = G^-1 Tok^T, shape k x E.
    let mut pinv = vec![vec![0.0; embed_dim]; k];
    for i in 0..k {
        for e in 0..embed_dim {
            let mut s = 0.0;
            for j in 0..k {
                s += gram_inv[i][j] * class_tokens[j][e];
            }
            pinv[i][e] = s;
        }
    }
    // Projector P = Tok Tok^+ (E x E).
    let mut proj = vec![vec![0.0; embed_dim]; embed_dim];
    for e in 0..embed_dim {
        for f in 0..embed_dim {
            let mut s = 0.0;
            for j in 0..k {
                s += class_tokens[j][e] * pinv[j][f];
            }
            proj[e][f] = s;
        }
    }
    // Anchored part: M = (1/w0) * Targets Tok^+, shape D x E.
    let mut out = vec![vec![0.0; embed_dim]; feature_dim];
    for d in 0..feature_dim {
        for e in 0..embed_dim {
            let mut anchored = 0.0;
            for j in 0..k {
                anchored += targets[j][d] * pinv[j][e];
            }
            // Residual acting on (I - P).
            let mut residual = 0.0;
            for f in 0..embed_dim {
                let ip = if e == f { 1.0 } else { 0.0 };
                residual += residual_map[d][f] * (ip - proj[f][e]);
            }
            out[d][e] = anchored / w0 + residual;
        }
    }
    Ok(out)
}

/// Gauss-Jordan inverse with partial pivoting; None if singular.
fn invert_matrix(m: &[Vec<f64>]) -> Option<Vec<Vec<f64>>> {
    let n = m.len();
    let mut a: Vec<Vec<f64>> = m
        .iter()
        .enumerate()
        .map(|(i, row)| {
            let mut r = row.clone();
            r.extend((0..n).map(|j| if i == j { 1.0 } else { 0.0 }));
            r
        })
        .collect();
    for col in 0..n {
        let pivot = (col..n).max_by(|&i, &j| {
            a[i][col]
                .abs()
                .partial_cmp(&a[j][col].abs())
                .unwrap_or(std::cmp::Ordering::Equal)
        })?;
        if a[pivot][col].abs() < 1e-12 {
            return None;
        }
        a.swap(col, pivot);
        let p = a[col][col];
        for x in a[col].iter_mut() {
            *x /= p;
        }
        for row in 0..n {
            if row != col {
                let factor = a[row][col];
                if factor != 0.0 {
                    for j in 0..2 * n {
                        a[row][j] -= factor * a[col][j];
                    }
                }
            }
        }
    }
    Some(a.into_iter().map(|row| row[n..].to_vec()).collect())
}
