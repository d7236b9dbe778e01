//! Inference-time prompt fusion: weight each latent domain by the cosine
//! similarity between the input's domain feature and that domain's centroid,
//! fuse per-domain text features as a convex combination, and classify the
//! image feature against the fused class features.
//!
//! Fused features are deliberately not renormalized: the classification
//! cosine removes scale, and renormalizing would only add a degenerate-vector
//! hazard.

use serde::{Deserialize, Serialize};

use crate::encoders::EncoderPair;
use crate::error::{LdpfError, Result};
use crate::latent::{DomainFeatureExtractor, LatentDomainState};
use crate::math::{
    argmax, cosine_similarity, temperature_softmax, FeatureVector, SimplexWeights, Temperature,
};
use crate::prompts::{classify, compute_text_features, PromptBank, PromptMode, TextFeatureTable};

/// How fusion weights are formed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", tag = "kind", content = "domain")]
pub enum FusionMode {
    /// Softmax over cosine similarities to the latent domain centroids.
    Similarity,
    /// One-hot at the most similar centroid (by cosine).
    Greedy,
    /// Uniform 1/N_s.
    Average,
    /// One-hot at a fixed domain.
    Single(usize),
}

impl FusionMode {
    /// Parse "similarity" | "greedy" | "average" | "single:<s>".
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "similarity" => Ok(Self::Similarity),
            "greedy" => Ok(Self::Greedy),
            "average" => Ok(Self::Average),
            other => {
                if let Some(idx) = other.strip_prefix("single:") {
                    let s: usize = idx.parse().map_err(|_| {
                        LdpfError::InvalidConfig(format!("bad fusion mode {other:?}"))
                    })?;
                    Ok(Self::Single(s))
                } else {
                    Err(LdpfError::InvalidConfig(format!(
                        "bad fusion mode {other:?}; expected similarity, greedy, average, or single:<s>"
                    )))
                }
            }
        }
    }
}

impl std::fmt::Display for FusionMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Self::Similarity => write!(f, "similarity"),
            Self::Greedy => write!(f, "greedy"),
            Self::Average => write!(f, "average"),
            Self::Single(s) => write!(f, "single:{s}"),
        }
    }
}

/// Fusion temperature and mode.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FusionConfig {
    pub tau_fusion: Temperature,
    pub mode: FusionMode,
}

impl FusionConfig {
    pub fn new(tau_fusion: f64, mode: FusionMode) -> Result<Self> {
        Ok(Self {
            tau_fusion: Temperature::new(tau_fusion)?,
            mode,
        })
    }

    /// Similarity fusion at the default temperature 0.1.
    pub fn similarity_default() -> Result<Self> {
        Self::new(0.1, FusionMode::Similarity)
    }

    fn validate_against(&self, num_domains: usize) -> Result<()> {
        if let FusionMode::Single(s) = self.mode {
            if s >= num_domains {
                return Err(LdpfError::IndexOutOfRange(format!(
                    "fusion mode single:{s} out of {num_domains} domains"
                )));
            }
        }
        Ok(())
    }
}

/// Per-sample fusion weights over the latent domains.
pub fn fusion_weights(
    domain_feature: &[f64],
    state: &LatentDomainState,
    cfg: &FusionConfig,
) -> Result<SimplexWeights> {
    let n_s = state.num_domains();
    if n_s == 0 {
        return Err(LdpfError::EmptyInput("latent domain centroids".into()));
    }
    cfg.validate_against(n_s)?;
    match cfg.mode {
        FusionMode::Average => SimplexWeights::uniform(n_s),
        FusionMode::Single(s) => SimplexWeights::one_hot(n_s, s),
        FusionMode::Similarity | FusionMode::Greedy => {
            let cosines: Vec<f64> = state
                .centroids
                .iter()
                .map(|c| cosine_similarity(domain_feature, c))
                .collect::<Result<_>>()?;
            match cfg.mode {
                FusionMode::Similarity => temperature_softmax(&cosines, cfg.tau_fusion),
                _ => SimplexWeights::one_hot(n_s, argmax(&cosines)),
            }
        }
    }
}

/// Fused class features: for every class k, the alpha-weighted combination
/// of that class's per-domain text features.
pub fn fuse_text_features(
    table: &TextFeatureTable,
    alpha: &SimplexWeights,
) -> Result<Vec<FeatureVector>> {
    if alpha.len() != table.num_domains() {
        return Err(LdpfError::DimensionMismatch(format!(
            "{} fusion weights for {} domains",
            alpha.len(),
            table.num_domains()
        )));
    }
    let k = table.num_classes();
    let mut fused = Vec::with_capacity(k);
    for class_id in 0..k {
        let dim = table.get(0, class_id)?.dim();
        let mut acc = vec![0.0; dim];
        for (s, &w) in alpha.as_slice().iter().enumerate() {
            if w == 0.0 {
                continue;
            }
            for (a, x) in acc.iter_mut().zip(table.get(s, class_id)?.as_slice()) {
                *a += w * x;
            }
        }
        if acc.iter().all(|x| x.abs() < 1e-12) {
            return Err(LdpfError::DegenerateFusion);
        }
        fused.push(FeatureVector(acc));
    }
    Ok(fused)
}

/// The outcome of one fused prediction.
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub probabilities: SimplexWeights,
    pub alpha: SimplexWeights,
    pub predicted_class: usize,
}

/// Full inference pipeline from a raw payload: encode the image, extract its
/// domain feature, weight the latent domains, fuse text features, classify.
pub fn predict(
    payload: &[f64],
    bank: &PromptBank,
    extractor: &DomainFeatureExtractor,
    state: &LatentDomainState,
    enc: &EncoderPair,
    cfg: &FusionConfig,
    tau_cls: Temperature,
) -> Result<Prediction> {
    let table = compute_text_features(bank, enc, PromptMode::Full)?;
    predict_with_table(payload, &table, extractor, state, enc, cfg, tau_cls)
}

/// [`predict`] with a precomputed text feature table (batch evaluation).
pub fn predict_with_table(
    payload: &[f64],
    table: &TextFeatureTable,
    extractor: &DomainFeatureExtractor,
    state: &LatentDomainState,
    enc: &EncoderPair,
    cfg: &FusionConfig,
    tau_cls: Temperature,
) -> Result<Prediction> {
    if table.num_domains() != state.num_domains() {
        return Err(LdpfError::DimensionMismatch(format!(
            "text feature table has {} domains, state has {}",
            table.num_domains(),
            state.num_domains()
        )));
    }
    let image_feature = enc.encode_image(payload)?;
    let domain_feature = extractor.extract(image_feature.as_slice())?;
    let alpha = fusion_weights(&domain_feature, state, cfg)?;
    let fused = fuse_text_features(table, &alpha)?;
    let probabilities = classify(&image_feature, &fused, tau_cls)?;
    let predicted_class = probabilities.argmax();
    Ok(Prediction {
        probabilities,
        alpha,
        predicted_class,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::RngSeed;
    use rand::Rng;

    fn state(centroids: Vec<Vec<f64>>) -> LatentDomainState {
        LatentDomainState::new(centroids, vec![], 0)
    }

    fn cfg(tau: f64, mode: FusionMode) -> FusionConfig {
        FusionConfig::new(tau, mode).unwrap()
    }

    #[test]
    fn equal_cosines_give_uniform_weights() {
        // three centroids at symmetric angles around the feature
        let st = state(vec![
            vec![1.0, 1.0, 0.0],
            vec![1.0, 0.0, 1.0],
            vec![1.0, -1.0, 0.0],
        ]);
        let w = fusion_weights(&[1.0, 0.0, 0.0], &st, &cfg(0.7, FusionMode::Similarity)).unwrap();
        for &x in w.as_slice() {
            assert!((x - 1.0 / 3.0).abs() < 1e-12, "{w:?}");
        }
    }

    #[test]
    fn similarity_weights_match_hand_computation() {
        // cosines exactly (1, 0, 0) at tau = 1: e/(e+2), 1/(e+2), 1/(e+2)
        let st = state(vec![
            vec![1.0, 0.0, 0.0],
            vec![0.0, 1.0, 0.0],
            vec![0.0, 0.0, 1.0],
        ]);
        let w = fusion_weights(&[1.0, 0.0, 0.0], &st, &cfg(1.0, FusionMode::Similarity)).unwrap();
        assert!((w.as_slice()[0] - 0.5761).abs() < 1e-4, "{w:?}");
        assert!((w.as_slice()[1] - 0.2119).abs() < 1e-4);
        assert!((w.as_slice()[2] - 0.2119).abs() < 1e-4);
    }

    #[test]
    fn greedy_picks_the_nearest_centroid_one_hot() {
        // cosines (0.2, 0.9, 0.5) up to scale
        let d = [1.0, 0.0];
        let c = |cos: f64| vec![cos, (1.0 - cos * cos).sqrt()];
        let st = state(vec![c(0.2), c(0.9), c(0.5)]);
        let w = fusion_weights(&d, &st, &cfg(0.1, FusionMode::Greedy)).unwrap();
        assert_eq!(w.as_slice(), &[0.0, 1.0, 0.0]);
    }

    #[test]
    fn average_mode_ignores_the_feature() {
        let st = state(vec![vec![1.0, 0.0], vec![0.0, 1.0]]);
        let w = fusion_weights(&[0.3, -2.0], &st, &cfg(0.1, FusionMode::Average)).unwrap();
        assert_eq!(w.as_slice(), &[0.5, 0.5]);
    }

    #[test]
    fn single_mode_validates_the_index() {
        let st = state(vec![vec![1.0, 0.0], vec![0.0, 1.0]]);
        let w = fusion_weights(&[1.0, 1.0], &st, &cfg(0.1, FusionMode::Single(1))).unwrap();
        assert_eq!(w.as_slice(), &[0.0, 1.0]);
        assert!(fusion_weights(&[1.0, 1.0], &st, &cfg(0.1, FusionMode::Single(2))).is_err());
    }

    #[test]
    fn similarity_weights_are_scale_invariant() {
        let st = state(vec![vec![0.4, 1.0, -0.2], vec![1.0, -0.3, 0.8]]);
        let d = [0.5, 0.25, -1.0];
        let d3: Vec<f64> = d.iter().map(|x| 3.0 * x).collect();
        let a = fusion_weights(&d, &st, &cfg(0.1, FusionMode::Similarity)).unwrap();
        let b = fusion_weights(&d3, &st, &cfg(0.1, FusionMode::Similarity)).unwrap();
        for (x, y) in a.as_slice().iter().zip(b.as_slice()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn degenerate_domain_feature_is_rejected() {
        let st = state(vec![vec![1.0, 0.0]]);
        assert!(matches!(
            fusion_weights(&[0.0, 0.0], &st, &cfg(0.1, FusionMode::Similarity)).unwrap_err(),
            LdpfError::DegenerateFeature
        ));
    }

    fn toy_table(n_s: usize, k: usize) -> TextFeatureTable {
        let enc = EncoderPair::toy(8, 32, 16, k, RngSeed::new(42), None).unwrap();
        let bank = crate::prompts::PromptBank::seeded(2, 3, n_s, k, 16, RngSeed::new(5)).unwrap();
        compute_text_features(&bank, &enc, PromptMode::Full).unwrap()
    }

    #[test]
    fn one_hot_alpha_reproduces_the_table_row_exactly() {
        let table = toy_table(3, 4);
        let alpha = SimplexWeights::one_hot(3, 1).unwrap();
        let fused = fuse_text_features(&table, &alpha).unwrap();
        for (k, f) in fused.iter().enumerate() {
            assert_eq!(f, table.get(1, k).unwrap());
        }
    }

    #[test]
    fn fusion_is_the_stated_linear_combination() {
        let table = toy_table(2, 3);
        let alpha = SimplexWeights::new(vec![0.3, 0.7]).unwrap();
        let fused = fuse_text_features(&table, &alpha).unwrap();
        for (k, f) in fused.iter().enumerate() {
            // independent recomputation
            let a = table.get(0, k).unwrap().as_slice();
            let b = table.get(1, k).unwrap().as_slice();
            for ((got, x), y) in f.as_slice().iter().zip(a).zip(b) {
                assert!((got - (0.3 * x + 0.7 * y)).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn fused_norm_respects_the_convexity_bound() {
        let table = toy_table(3, 5);
        let mut rng = RngSeed::new(2).rng();
        for _ in 0..20 {
            let raw: Vec<f64> = (0..3).map(|_| rng.random::<f64>() + 1e-3).collect();
            let sum: f64 = raw.iter().sum();
            let alpha = SimplexWeights::new(raw.iter().map(|x| x / sum).collect()).unwrap();
            for f in fuse_text_features(&table, &alpha).unwrap() {
                assert!(f.norm() <= 1.0 + 1e-6);
            }
        }
    }

    #[test]
    fn antipodal_features_can_fuse_to_zero() {
        // hand-built table bypassing the encoder
        let table = TextFeatureTable::from_features(vec![
            vec![FeatureVector(vec![1.0, 0.0])],
            vec![FeatureVector(vec![-1.0, 0.0])],
        ])
        .unwrap();
        let alpha = SimplexWeights::new(vec![0.5, 0.5]).unwrap();
        assert!(matches!(
            fuse_text_features(&table, &alpha).unwrap_err(),
            LdpfError::DegenerateFusion
        ));
    }

    #[test]
    fn midpoint_fusion_of_orthogonal_unit_features() {
        let table = TextFeatureTable::from_features(vec![
            vec![FeatureVector(vec![1.0, 0.0])],
            vec![FeatureVector(vec![0.0, 1.0])],
        ])
        .unwrap();
        let alpha = SimplexWeights::new(vec![0.5, 0.5]).unwrap();
        let fused = fuse_text_features(&table, &alpha).unwrap();
        assert_eq!(fused[0].as_slice(), &[0.5, 0.5]);
    }

    struct Rig {
        enc: EncoderPair,
        bank: crate::prompts::PromptBank,
        extractor: DomainFeatureExtractor,
        state: LatentDomainState,
    }

    fn rig(n_s: usize) -> Rig {
        let enc = EncoderPair::toy(8, 32, 16, 4, RngSeed::new(42), None).unwrap();
        let bank = crate::prompts::PromptBank::seeded(2, 3, n_s, 4, 16, RngSeed::new(5)).unwrap();
        let extractor = DomainFeatureExtractor::seeded(32, 16, 8, RngSeed::new(6));
        let mut rng = RngSeed::new(7).rng();
        let centroids: Vec<Vec<f64>> = (0..n_s)
            .map(|_| (0..8).map(|_| rng.random::<f64>() * 2.0 - 1.0).collect())
            .collect();
        let state = LatentDomainState::new(centroids, vec![], 0);
        Rig {
            enc,
            bank,
            extractor,
            state,
        }
    }

    #[test]
    fn single_domain_predictions_ignore_the_fusion_mode() {
        let r = rig(1);
        let payload = vec![0.4, -0.6, 1.0, 0.2, 0.0, 0.9, -1.2, 0.5];
        let tau = Temperature::new(0.01).unwrap();
        let modes = [
            FusionMode::Similarity,
            FusionMode::Greedy,
            FusionMode::Average,
            FusionMode::Single(0),
        ];
        let preds: Vec<Prediction> = modes
            .iter()
            .map(|m| {
                predict(
                    &payload,
                    &r.bank,
                    &r.extractor,
                    &r.state,
                    &r.enc,
                    &cfg(0.1, *m),
                    tau,
                )
                .unwrap()
            })
            .collect();
        for p in &preds[1..] {
            assert_eq!(p.probabilities, preds[0].probabilities);
            assert_eq!(p.predicted_class, preds[0].predicted_class);
        }
    }

    #[test]
    fn similarity_at_vanishing_temperature_matches_greedy() {
        let r = rig(3);
        let tau = Temperature::new(0.01).unwrap();
        let mut rng = RngSeed::new(9).rng();
        for _ in 0..10 {
            let payload: Vec<f64> = (0..8).map(|_| rng.random::<f64>() * 2.0 - 1.0).collect();
            let sim = predict(
                &payload,
                &r.bank,
                &r.extractor,
                &r.state,
                &r.enc,
                &cfg(1e-4, FusionMode::Similarity),
                tau,
            )
            .unwrap();
            let greedy = predict(
                &payload,
                &r.bank,
                &r.extractor,
                &r.state,
                &r.enc,
                &cfg(0.1, FusionMode::Greedy),
                tau,
            )
            .unwrap();
            assert_eq!(sim.predicted_class, greedy.predicted_class);
            assert_eq!(sim.alpha.argmax(), greedy.alpha.argmax());
        }
    }

    #[test]
    fn one_hot_alpha_equals_single_domain_prediction_bitwise() {
        let r = rig(3);
        let tau = Temperature::new(0.01).unwrap();
        let payload = vec![0.1, 0.2, -0.4, 0.8, -0.9, 0.3, 0.6, -0.2];
        let single = predict(
            &payload,
            &r.bank,
            &r.extractor,
            &r.state,
            &r.enc,
            &cfg(0.1, FusionMode::Single(2)),
            tau,
        )
        .unwrap();
        // classify directly against domain 2's row
        let table = compute_text_features(&r.bank, &r.enc, PromptMode::Full).unwrap();
        let img = r.enc.encode_image(&payload).unwrap();
        let direct = classify(&img, table.domain_row(2).unwrap(), tau).unwrap();
        assert_eq!(single.probabilities, direct);
    }
}
