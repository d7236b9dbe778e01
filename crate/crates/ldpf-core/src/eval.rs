//! Evaluation: target-domain accuracy under a fusion mode, per-prompt
//! accuracies, the selection bound, prediction dumps, and clustering
//! diagnostics against annotated domains.

use serde::{Deserialize, Serialize};

use crate::data::{DatasetManifest, Split, TrainView};
use crate::encoders::EncoderPair;
use crate::error::{LdpfError, Result};
use crate::fusion::{fusion_weights, predict_with_table, FusionConfig};
use crate::latent::{
    min_cost_assignment, squared_distance, DomainFeatureExtractor, LatentDomainState,
};
use crate::math::Temperature;
use crate::oracle::{bound_report, BoundReport, DumpRow, PredictionDump};
use crate::prompts::{classify, compute_text_features, PromptBank, PromptMode};

/// Result of evaluating one checkpoint on one target domain.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalOutcome {
    pub target_domain: String,
    pub fusion_mode: String,
    pub n_samples: usize,
    pub accuracy: f64,
    pub per_prompt_accuracy: Vec<f64>,
    pub u_sel: f64,
}

/// Evaluate on the test half of a split, producing the outcome plus the
/// per-sample prediction dump consumed by the bound analysis.
pub fn evaluate_split(
    manifest: &DatasetManifest,
    split: &Split,
    bank: &PromptBank,
    extractor: &DomainFeatureExtractor,
    state: &LatentDomainState,
    enc: &EncoderPair,
    fusion_cfg: &FusionConfig,
    tau_cls: Temperature,
) -> Result<(EvalOutcome, PredictionDump)> {
    if split.test_indices.is_empty() {
        return Err(LdpfError::Dataset("split has no test samples".into()));
    }
    let table = compute_text_features(bank, enc, PromptMode::Full)?;
    let mut rows = Vec::with_capacity(split.test_indices.len());
    let mut correct = 0usize;
    for &i in &split.test_indices {
        let sample = &manifest.samples[i];
        let payload = sample.payload.as_deref().ok_or_else(|| {
            LdpfError::Dataset(format!("sample {} has no numeric payload", sample.id))
        })?;
        let pred =
            predict_with_table(payload, &table, extractor, state, enc, fusion_cfg, tau_cls)?;
        // what each domain's prompt alone would have predicted
        let image_feature = enc.encode_image(payload)?;
        let per_domain: Vec<usize> = (0..table.num_domains())
            .map(|s| classify(&image_feature, table.domain_row(s)?, tau_cls).map(|p| p.argmax()))
            .collect::<Result<_>>()?;
        if pred.predicted_class == sample.class_id {
            correct += 1;
        }
        rows.push(DumpRow {
            sample_id: sample.id,
            true_class: sample.class_id,
            alpha: pred.alpha.as_slice().to_vec(),
            per_domain_predicted_class: per_domain,
            fused_probabilities: pred.probabilities.as_slice().to_vec(),
            fused_predicted_class: pred.predicted_class,
        });
    }
    let dump = PredictionDump::new(rows)?;
    let bounds: BoundReport = bound_report(&dump)?;
    Ok((
        EvalOutcome {
            target_domain: split.target_name.clone(),
            fusion_mode: fusion_cfg.mode.to_string(),
            n_samples: split.test_indices.len(),
            accuracy: correct as f64 / split.test_indices.len() as f64,
            per_prompt_accuracy: bounds.per_prompt_accuracy,
            u_sel: bounds.u_sel,
        },
        dump,
    ))
}

/// Best-permutation agreement between cluster assignments and reference
/// labels with the same cardinality (Kuhn-Munkres on the negated counts).
pub fn clustering_agreement(assignments: &[usize], reference: &[usize], k: usize) -> Result<f64> {
    if assignments.len() != reference.len() {
        return Err(LdpfError::DimensionMismatch(format!(
            "{} assignments vs {} reference labels",
            assignments.len(),
            reference.len()
        )));
    }
    if assignments.is_empty() {
        return Err(LdpfError::EmptyInput("clustering agreement".into()));
    }
    let mut counts = vec![vec![0.0f64; k]; k];
    for (&a, &r) in assignments.iter().zip(reference) {
        if a >= k || r >= k {
            return Err(LdpfError::IndexOutOfRange(format!(
                "label ({a}, {r}) out of {k}"
            )));
        }
        counts[a][r] += 1.0;
    }
    let cost: Vec<Vec<f64>> = counts
        .iter()
        .map(|row| row.iter().map(|c| -c).collect())
        .collect();
    let perm = min_cost_assignment(&cost)?;
    let matched: f64 = perm.iter().enumerate().map(|(a, &r)| counts[a][r]).sum();
    Ok(matched / assignments.len() as f64)
}

/// Plug-in mutual information (nats) between two discrete labelings.
pub fn mutual_information(a: &[usize], b: &[usize]) -> Result<f64> {
    if a.len() != b.len() || a.is_empty() {
        return Err(LdpfError::DimensionMismatch(
            "mutual information needs equal-length nonempty labelings".into(),
        ));
    }
    let ka = a.iter().max().unwrap() + 1;
    let kb = b.iter().max().unwrap() + 1;
    let n = a.len() as f64;
    let mut joint = vec![vec![0.0f64; kb]; ka];
    for (&x, &y) in a.iter().zip(b) {
        joint[x][y] += 1.0 / n;
    }
    let pa: Vec<f64> = joint.iter().map(|row| row.iter().sum()).collect();
    let mut pb = vec![0.0f64; kb];
    for row in &joint {
        for (acc, p) in pb.iter_mut().zip(row) {
            *acc += p;
        }
    }
    let mut mi = 0.0;
    for x in 0..ka {
        for y in 0..kb {
            let pxy = joint[x][y];
            if pxy > 0.0 {
                mi += pxy * (pxy / (pa[x] * pb[y])).ln();
            }
        }
    }
    Ok(mi.max(0.0))
}

/// Diagnostics of the final clustering on the training half of a split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterReport {
    pub cluster_sizes: Vec<usize>,
    pub inertia: f64,
    /// Rows = latent assignment, columns = annotated training domain.
    pub confusion_with_annotations: Option<Vec<Vec<usize>>>,
    /// Best-permutation agreement with annotations (needs equal counts).
    pub agreement_with_annotations: Option<f64>,
    /// Mutual information between assignments and class labels.
    pub class_mutual_information: f64,
    /// Per-sample fusion weight of the sample's own cluster, averaged.
    pub mean_self_weight: f64,
}

/// Recompute diagnostics for a trained model on the training half of its
/// split. Annotations are read directly from the manifest: this is the
/// inspection path, not the training path.
pub fn cluster_diagnostics(
    manifest: &DatasetManifest,
    split: &Split,
    extractor: &DomainFeatureExtractor,
    state: &LatentDomainState,
    enc: &EncoderPair,
    fusion_cfg: &FusionConfig,
) -> Result<ClusterReport> {
    let view = TrainView::new(manifest, split, false);
    let n = view.len();
    if n == 0 {
        return Err(LdpfError::Dataset("split has no training samples".into()));
    }
    if state.assignments.len() != n {
        return Err(LdpfError::DimensionMismatch(format!(
            "state carries {} assignments for {} training samples",
            state.assignments.len(),
            n
        )));
    }
    let k = state.num_domains();
    let mut sizes = vec![0usize; k];
    let mut inertia = 0.0;
    let mut self_weight = 0.0;
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let f = enc.encode_image(view.payload(i)?)?;
        let d = extractor.extract(f.as_slice())?;
        let a = state.assignments[i];
        sizes[a] += 1;
        inertia += squared_distance(&d, &state.centroids[a]);
        let alpha = fusion_weights(&d, state, fusion_cfg)?;
        self_weight += alpha.as_slice()[a];
        labels.push(view.class_label(i));
    }

    let annotated: Option<Vec<usize>> = if manifest.annotated_domains.is_some() {
        Some(
            split
                .train_indices
                .iter()
                .map(|&idx| {
                    let raw = manifest.samples[idx].annotated_domain.ok_or_else(|| {
                        LdpfError::Dataset("sample missing domain annotation".into())
                    })?;
                    split.dense_train_domain(raw).ok_or_else(|| {
                        LdpfError::Dataset("training sample annotated with target domain".into())
                    })
                })
                .collect::<Result<Vec<usize>>>()?,
        )
    } else {
        None
    };

    let (confusion, agreement) = match &annotated {
        Some(ann) => {
            let l = split.train_domain_count;
            let mut confusion = vec![vec![0usize; l]; k];
            for (&a, &r) in state.assignments.iter().zip(ann) {
                confusion[a][r] += 1;
            }
            let agreement = if k == l {
                Some(clustering_agreement(&state.assignments, ann, k)?)
            } else {
                None
            };
            (Some(confusion), agreement)
        }
        None => (None, None),
    };

    Ok(ClusterReport {
        cluster_sizes: sizes,
        inertia,
        confusion_with_annotations: confusion,
        agreement_with_annotations: agreement,
        class_mutual_information: mutual_information(&state.assignments, &labels)?,
        mean_self_weight: self_weight / n as f64,
    })
}

/// Mean and (population) standard deviation of a series.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn agreement_is_one_for_identical_labelings_up_to_permutation() {
        let a = [0, 0, 1, 1, 2, 2];
        let b = [2, 2, 0, 0, 1, 1];
        assert_eq!(clustering_agreement(&a, &b, 3).unwrap(), 1.0);
    }

    #[test]
    fn agreement_counts_best_permutation_matches() {
        // clusters: [0,0,1,1]; truth: [0,1,1,1] -> best match 3/4
        let a = [0, 0, 1, 1];
        let b = [0, 1, 1, 1];
        assert_eq!(clustering_agreement(&a, &b, 2).unwrap(), 0.75);
    }

    #[test]
    fn mutual_information_of_identical_labelings_is_entropy() {
        let a = [0usize, 0, 1, 1, 2, 2];
        let mi = mutual_information(&a, &a).unwrap();
        assert!((mi - (3.0f64).ln()).abs() < 1e-12);
        // independent labelings carry no information
        let b = [0usize, 1, 0, 1, 0, 1];
        let mi2 = mutual_information(&[0, 0, 0, 1, 1, 1], &b).unwrap();
        assert!(mi2.abs() < 1e-12);
    }

    #[test]
    fn mean_std_matches_hand_computation() {
        let (m, s) = mean_std(&[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(m, 2.5);
        assert!((s - (1.25f64).sqrt()).abs() < 1e-12);
    }
}
