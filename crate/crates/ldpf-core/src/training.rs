//! Two-stage training: per epoch, domain features are re-extracted and
//! re-clustered (labels stabilized across rounds), a stage-1 pass fits the
//! domain-specific prompts within each latent domain while the adversarial
//! branch trains the auxiliary classifier against the reversed extractor,
//! and a stage-2 pass fits the shared domain-agnostic prompt on all samples.
//!
//! The combined objective is `L_dsp + lambda (L_dap - L_adv)` with
//! `lambda = 2 / (1 + exp(-10 p)) - 1` over training progress `p`. Prompt
//! parameters receive gradients from `L_dsp` and `lambda * L_dap`; the
//! auxiliary classifier descends `L_adv`; the extractor ascends it through
//! the gradient reversal layer.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::data::TrainView;
use crate::encoders::EncoderPair;
use crate::error::{LdpfError, Result};
use crate::fusion::{self, FusionConfig};
use crate::latent::{
    adversarial_loss_with_grads, kmeans_cluster, stabilize_assignment, AuxiliaryClassifier,
    DomainFeatureExtractor, GradientReversal, LatentDomainState,
};
use crate::math::{FeatureVector, Temperature};
use crate::prompts::{
    accumulate_prompt_grads, classify, compute_text_features, PromptBank, PromptGrads, PromptMode,
};
use crate::rng::{stream, RngSeed};

/// Ablation switches mirroring the study variants.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct AblationSwitches {
    /// Drop the domain-agnostic prompt (forces M1 = 0, skips stage 2).
    #[serde(default)]
    pub no_dap: bool,
    /// Drop domain-specific prompts: one shared prompt trained on all data.
    #[serde(default)]
    pub no_dsp: bool,
    /// Drop the adversarial branch; extractor and classifier stay at init.
    #[serde(default)]
    pub no_adv: bool,
    /// Replace latent clustering with annotated domain labels.
    #[serde(default)]
    pub no_clustering: bool,
}

/// Training hyperparameters. Zeros in the `auto` fields resolve against the
/// dataset and encoder at train time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub warmup_epochs: usize,
    pub warmup_lr: f64,
    /// Domain-agnostic prompt length M1.
    pub m1: usize,
    /// Domain-specific prompt length M2.
    pub m2: usize,
    /// Number of latent domains; 0 = number of annotated training domains
    /// when known, else 3.
    pub n_latent_domains: usize,
    /// Classification temperature (logit scale 1/tau).
    pub tau_cls: f64,
    /// Extractor hidden width; 0 = feature_dim / 2.
    pub extractor_hidden: usize,
    /// Domain feature dimension; 0 = feature_dim / 4.
    pub domain_feature_dim: usize,
    /// Fraction of training samples held out for validation reporting.
    pub val_fraction: f64,
    #[serde(default)]
    pub ablation: AblationSwitches,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 32,
            learning_rate: 0.002,
            momentum: 0.9,
            warmup_epochs: 1,
            warmup_lr: 1e-5,
            m1: 4,
            m2: 8,
            n_latent_domains: 0,
            tau_cls: 0.01,
            extractor_hidden: 0,
            domain_feature_dim: 0,
            val_fraction: 0.0,
            ablation: AblationSwitches::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(LdpfError::InvalidConfig("batch_size must be >= 1".into()));
        }
        if !(self.learning_rate > 0.0) || !(self.warmup_lr > 0.0) {
            return Err(LdpfError::InvalidConfig(
                "learning rates must be positive".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(LdpfError::InvalidConfig("momentum must be in [0,1)".into()));
        }
        if !(0.0..0.9).contains(&self.val_fraction) {
            return Err(LdpfError::InvalidConfig(
                "val_fraction must be in [0, 0.9)".into(),
            ));
        }
        Temperature::new(self.tau_cls)?;
        if self.ablation.no_dap && self.ablation.no_dsp {
            return Err(LdpfError::InvalidConfig(
                "ablations no_dap and no_dsp together leave nothing to train".into(),
            ));
        }
        Ok(())
    }

    /// Resolve auto fields and ablation-forced values against a dataset.
    pub fn resolve(&self, train_domain_count: Option<usize>, feature_dim: usize) -> Result<ResolvedTrainConfig> {
        self.validate()?;
        let mut m1 = self.m1;
        let mut m2 = self.m2;
        let mut n_s = if self.n_latent_domains > 0 {
            self.n_latent_domains
        } else {
            train_domain_count.unwrap_or(3)
        };
        if self.ablation.no_dap {
            m1 = 0;
        }
        if self.ablation.no_dsp {
            // one shared prompt: the agnostic block carries everything
            m2 = 0;
            n_s = 1;
        }
        if self.ablation.no_clustering {
            let l = train_domain_count.ok_or_else(|| {
                LdpfError::InvalidConfig(
                    "no_clustering needs a dataset with domain annotations".into(),
                )
            })?;
            if self.n_latent_domains > 0 && self.n_latent_domains != l {
                return Err(LdpfError::InvalidConfig(format!(
                    "no_clustering requires n_latent_domains == {l} (annotated training domains)"
                )));
            }
            n_s = l;
        }
        if m1 == 0 && m2 == 0 {
            return Err(LdpfError::InvalidConfig(
                "resolved prompt lengths are both zero; nothing to train".into(),
            ));
        }
        Ok(ResolvedTrainConfig {
            m1,
            m2,
            n_latent_domains: n_s,
            extractor_hidden: if self.extractor_hidden > 0 {
                self.extractor_hidden
            } else {
                (feature_dim / 2).max(1)
            },
            domain_feature_dim: if self.domain_feature_dim > 0 {
                self.domain_feature_dim
            } else {
                (feature_dim / 4).max(1)
            },
        })
    }

    fn learning_rate_at(&self, epoch: usize) -> f64 {
        if epoch < self.warmup_epochs {
            return self.warmup_lr;
        }
        let t = (epoch - self.warmup_epochs) as f64;
        let span = (self.epochs.saturating_sub(self.warmup_epochs)).max(1) as f64;
        self.learning_rate * 0.5 * (1.0 + (std::f64::consts::PI * t / span).cos())
    }
}

/// Concrete dimensions after resolving the auto fields.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ResolvedTrainConfig {
    pub m1: usize,
    pub m2: usize,
    pub n_latent_domains: usize,
    pub extractor_hidden: usize,
    pub domain_feature_dim: usize,
}

/// Fraction of training completed and the reversal strength it implies.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainProgress {
    pub p: f64,
    pub lambda: f64,
}

impl TrainProgress {
    pub fn at(p: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&p) {
            return Err(LdpfError::InvalidScalar(format!(
                "training progress must be in [0,1], got {p}"
            )));
        }
        Ok(Self {
            p,
            lambda: lambda_schedule(p),
        })
    }
}

/// `lambda(p) = 2 / (1 + exp(-10 p)) - 1`.
pub fn lambda_schedule(p: f64) -> f64 {
    2.0 / (1.0 + (-10.0 * p).exp()) - 1.0
}

/// A batch of frozen image features with class labels and current latent
/// assignments.
pub struct TrainBatch<'a> {
    pub image_features: &'a [FeatureVector],
    pub class_labels: &'a [usize],
    pub assignments: &'a [usize],
}

impl TrainBatch<'_> {
    fn validate(&self, num_domains: usize) -> Result<()> {
        if self.image_features.is_empty() {
            return Err(LdpfError::EmptyInput("training batch".into()));
        }
        if self.image_features.len() != self.class_labels.len()
            || self.image_features.len() != self.assignments.len()
        {
            return Err(LdpfError::DimensionMismatch(
                "batch features, labels, and assignments must have equal length".into(),
            ));
        }
        if let Some(bad) = self.assignments.iter().find(|&&a| a >= num_domains) {
            return Err(LdpfError::IndexOutOfRange(format!(
                "latent assignment {bad} out of {num_domains}; sample is unassigned"
            )));
        }
        Ok(())
    }
}

/// Mean cross-entropy where each sample is classified against the text
/// features of its own latent domain, built from domain-specific prompts
/// alone.
pub fn loss_dsp(
    batch: &TrainBatch,
    bank: &PromptBank,
    enc: &EncoderPair,
    tau: Temperature,
) -> Result<f64> {
    Ok(prompt_loss(batch, bank, enc, tau, PromptMode::DspOnly, None)?.0)
}

/// Mean cross-entropy with full prompts (agnostic block plus the sample's
/// domain-specific block).
pub fn loss_dap(
    batch: &TrainBatch,
    bank: &PromptBank,
    enc: &EncoderPair,
    tau: Temperature,
) -> Result<f64> {
    Ok(prompt_loss(batch, bank, enc, tau, PromptMode::Full, None)?.0)
}

/// `loss_dsp` plus gradients; only domain-specific blocks receive gradient.
pub fn loss_dsp_with_grads(
    batch: &TrainBatch,
    bank: &PromptBank,
    enc: &EncoderPair,
    tau: Temperature,
) -> Result<(f64, PromptGrads)> {
    let (loss, grads) = prompt_loss(
        batch,
        bank,
        enc,
        tau,
        PromptMode::DspOnly,
        Some((false, true)),
    )?;
    Ok((loss, grads.expect("gradients requested")))
}

/// `loss_dap` plus gradients; only the agnostic block receives gradient
/// (stage-2 contract: specific blocks are frozen here).
pub fn loss_dap_with_grads(
    batch: &TrainBatch,
    bank: &PromptBank,
    enc: &EncoderPair,
    tau: Temperature,
) -> Result<(f64, PromptGrads)> {
    let (loss, grads) = prompt_loss(
        batch,
        bank,
        enc,
        tau,
        PromptMode::Full,
        Some((true, false)),
    )?;
    Ok((loss, grads.expect("gradients requested")))
}

/// Shared cross-entropy body. `grad_targets = (agnostic, specific)` gates
/// which prompt blocks receive gradient; `None` skips the backward pass.
fn prompt_loss(
    batch: &TrainBatch,
    bank: &PromptBank,
    enc: &EncoderPair,
    tau: Temperature,
    mode: PromptMode,
    grad_targets: Option<(bool, bool)>,
) -> Result<(f64, Option<PromptGrads>)> {
    batch.validate(bank.num_domains())?;
    let table = compute_text_features(bank, enc, mode)?;
    let n = batch.image_features.len() as f64;
    let t = tau.get();
    let mut loss = 0.0;
    // dL/d(table entry (s,k)) accumulated over the batch
    let mut feature_grads: Option<Vec<Vec<Vec<f64>>>> = grad_targets.map(|_| {
        vec![vec![vec![0.0; enc.feature_dim()]; bank.num_classes]; bank.num_domains()]
    });

    for ((f, &y), &s) in batch
        .image_features
        .iter()
        .zip(batch.class_labels)
        .zip(batch.assignments)
    {
        if y >= bank.num_classes {
            return Err(LdpfError::IndexOutOfRange(format!(
                "class label {y} out of {}",
                bank.num_classes
            )));
        }
        let row = table.domain_row(s)?;
        let probs = classify(f, row, tau)?;
        loss -= probs.as_slice()[y].max(1e-12).ln();

        if let Some(grads) = feature_grads.as_mut() {
            for (k, pk) in probs.as_slice().iter().enumerate() {
                let dlogit = (pk - if k == y { 1.0 } else { 0.0 }) / (n * t);
                // d cos(t, f) / d t for unit-norm t: f - cos * t
                let tk = row[k].as_slice();
                let cos = crate::math::dot(tk, f.as_slice());
                for (g, (fi, ti)) in grads[s][k]
                    .iter_mut()
                    .zip(f.as_slice().iter().zip(tk))
                {
                    *g += dlogit * (fi - cos * ti);
                }
            }
        }
    }

    let prompt_grads = match (grad_targets, feature_grads) {
        (Some((agnostic, specific)), Some(grads)) => {
            let mut pg = PromptGrads::zeros_like(bank);
            for s in 0..bank.num_domains() {
                for k in 0..bank.num_classes {
                    if grads[s][k].iter().any(|g| *g != 0.0) {
                        accumulate_prompt_grads(
                            bank,
                            enc,
                            s,
                            k,
                            mode,
                            &grads[s][k],
                            agnostic,
                            specific,
                            &mut pg,
                        )?;
                    }
                }
            }
            Some(pg)
        }
        _ => None,
    };
    Ok((loss / n, prompt_grads))
}

/// The combined objective value and its components at a progress point.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TotalLoss {
    pub value: f64,
    pub loss_dsp: f64,
    pub loss_dap: f64,
    pub loss_adv: f64,
    pub lambda: f64,
}

/// Evaluate `L = L_dsp + lambda (L_dap - L_adv)` on a batch (value only;
/// the training loop routes gradients per the backward contract). Ablations
/// drop their term from the reported value.
pub fn total_loss(
    batch: &TrainBatch,
    bank: &PromptBank,
    enc: &EncoderPair,
    extractor: &DomainFeatureExtractor,
    aux: &AuxiliaryClassifier,
    progress: TrainProgress,
    ablation: AblationSwitches,
    tau: Temperature,
) -> Result<TotalLoss> {
    let l_dsp = loss_dsp(batch, bank, enc, tau)?;
    let l_dap = if ablation.no_dap {
        0.0
    } else {
        loss_dap(batch, bank, enc, tau)?
    };
    let l_adv = if ablation.no_adv {
        0.0
    } else {
        let feats: Vec<Vec<f64>> = batch
            .image_features
            .iter()
            .map(|f| extractor.extract(f.as_slice()))
            .collect::<Result<_>>()?;
        crate::latent::adversarial_loss(aux, &feats, batch.class_labels)?
    };
    Ok(TotalLoss {
        value: l_dsp + progress.lambda * (l_dap - l_adv),
        loss_dsp: l_dsp,
        loss_dap: l_dap,
        loss_adv: l_adv,
        lambda: progress.lambda,
    })
}

/// One line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    #[serde(rename = "L_dsp")]
    pub loss_dsp: f64,
    #[serde(rename = "L_dap")]
    pub loss_dap: f64,
    #[serde(rename = "L_adv")]
    pub loss_adv: f64,
    pub lambda: f64,
    pub inertia: f64,
    pub cluster_sizes: Vec<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub val_accuracy: Option<f64>,
}

/// Everything a training run produces.
#[derive(Debug, Clone)]
pub struct TrainOutput {
    pub bank: PromptBank,
    pub extractor: DomainFeatureExtractor,
    pub aux: AuxiliaryClassifier,
    pub state: LatentDomainState,
    pub log: Vec<EpochRecord>,
    pub resolved: ResolvedTrainConfig,
}

/// Classifier updates per extractor update in the adversarial branch.
const AUX_INNER_STEPS: usize = 5;

struct Momentum(Vec<f64>);

impl Momentum {
    fn zeros(n: usize) -> Self {
        Self(vec![0.0; n])
    }

    fn step(&mut self, params: &mut [f64], grads: &[f64], lr: f64, momentum: f64) {
        for ((p, g), v) in params.iter_mut().zip(grads).zip(&mut self.0) {
            *v = momentum * *v + g;
            *p -= lr * *v;
        }
    }
}

/// Run the full two-stage optimization on the training half of a split.
pub fn train(
    view: &TrainView,
    config: &TrainConfig,
    enc: &EncoderPair,
    seed: RngSeed,
) -> Result<TrainOutput> {
    config.validate()?;
    let resolved = config.resolve(view.train_domain_count(), enc.feature_dim())?;
    let n_s = resolved.n_latent_domains;
    let num_classes = view.num_classes();

    // degenerate-dataset checks before any epoch
    if view.len() < n_s {
        return Err(LdpfError::Dataset(format!(
            "degenerate dataset: {} training samples for {n_s} latent domains",
            view.len()
        )));
    }
    let distinct_classes: std::collections::BTreeSet<usize> =
        (0..view.len()).map(|i| view.class_label(i)).collect();
    if distinct_classes.len() < 2 {
        return Err(LdpfError::Dataset(
            "degenerate dataset: fewer than 2 classes in the training split".into(),
        ));
    }

    // deterministic validation carve-out: the tail of each class's index list
    let mut train_ids: Vec<usize> = (0..view.len()).collect();
    let mut val_ids: Vec<usize> = Vec::new();
    if config.val_fraction > 0.0 {
        let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); num_classes];
        for i in 0..view.len() {
            by_class[view.class_label(i)].push(i);
        }
        train_ids.clear();
        for ids in by_class {
            let n_val = ((ids.len() as f64) * config.val_fraction).floor() as usize;
            let cut = ids.len() - n_val;
            train_ids.extend(&ids[..cut]);
            val_ids.extend(&ids[cut..]);
        }
        train_ids.sort_unstable();
        val_ids.sort_unstable();
        if train_ids.len() < n_s {
            return Err(LdpfError::Dataset(
                "degenerate dataset: validation carve-out leaves too few samples".into(),
            ));
        }
    }

    // frozen image features, encoded once
    let image_features: Vec<FeatureVector> = train_ids
        .iter()
        .map(|&i| enc.encode_image(view.payload(i)?))
        .collect::<Result<_>>()?;
    let class_labels: Vec<usize> = train_ids.iter().map(|&i| view.class_label(i)).collect();

    let annotations: Option<Vec<usize>> = if config.ablation.no_clustering {
        let all = view.annotated_domains()?;
        Some(train_ids.iter().map(|&i| all[i]).collect())
    } else {
        None
    };

    let tau = Temperature::new(config.tau_cls)?;
    let mut bank = PromptBank::seeded(
        resolved.m1,
        resolved.m2,
        n_s,
        num_classes,
        enc.embed_dim(),
        seed.child(stream::PROMPT_INIT),
    )?;
    let mut extractor = DomainFeatureExtractor::seeded(
        enc.feature_dim(),
        resolved.extractor_hidden,
        resolved.domain_feature_dim,
        seed.child(stream::EXTRACTOR_INIT),
    );
    let mut aux = AuxiliaryClassifier::seeded(
        resolved.domain_feature_dim,
        num_classes,
        seed.child(stream::AUX_INIT),
    );

    let mut vel_agnostic = Momentum::zeros(resolved.m1 * enc.embed_dim());
    let mut vel_specific = Momentum::zeros(n_s * resolved.m2 * enc.embed_dim());
    let mut vel_ext_w1 = Momentum::zeros(extractor.fc1.weight.len());
    let mut vel_ext_b1 = Momentum::zeros(extractor.fc1.bias.len());
    let mut vel_ext_w2 = Momentum::zeros(extractor.fc2.weight.len());
    let mut vel_ext_b2 = Momentum::zeros(extractor.fc2.bias.len());
    let mut vel_aux_w = Momentum::zeros(aux.fc.weight.len());
    let mut vel_aux_b = Momentum::zeros(aux.fc.bias.len());

    let mut state: Option<LatentDomainState> = None;
    let mut log = Vec::with_capacity(config.epochs);

    for epoch in 0..config.epochs {
        let progress = TrainProgress::at(epoch as f64 / config.epochs as f64)?;
        let lr = config.learning_rate_at(epoch);

        // (a) re-cluster on current domain features, stabilize labels
        let (new_state, inertia) = clustering_round(
            &image_features,
            &extractor,
            n_s,
            seed.child(stream::KMEANS).child(epoch as u64),
            state.as_ref(),
            annotations.as_deref(),
        )?;
        let cluster_sizes = sizes_of(&new_state.assignments, n_s);
        state = Some(new_state);
        let assignments = state.as_ref().unwrap().assignments.clone();

        // deterministic batch order per epoch
        let mut order: Vec<usize> = (0..image_features.len()).collect();
        let mut shuffle_rng = seed
            .child(stream::EPOCH_SHUFFLE)
            .child(epoch as u64)
            .rng();
        order.shuffle(&mut shuffle_rng);

        // (b) stage 1: domain-specific prompts + adversarial branch
        #[cfg(debug_assertions)]
        let agnostic_before_stage1 = bank.checksum_agnostic();
        let grl = GradientReversal::new(progress.lambda)?;
        let mut epoch_dsp = 0.0;
        let mut epoch_adv = 0.0;
        let mut n_batches = 0.0;
        for chunk in order.chunks(config.batch_size) {
            let feats: Vec<FeatureVector> =
                chunk.iter().map(|&i| image_features[i].clone()).collect();
            let labels: Vec<usize> = chunk.iter().map(|&i| class_labels[i]).collect();
            let assigns: Vec<usize> = chunk.iter().map(|&i| assignments[i]).collect();
            let batch = TrainBatch {
                image_features: &feats,
                class_labels: &labels,
                assignments: &assigns,
            };

            let (l_dsp, grads) = loss_dsp_with_grads(&batch, &bank, enc, tau)?;
            epoch_dsp += l_dsp;
            apply_specific(&mut bank, &grads, &mut vel_specific, lr, config.momentum);

            if !config.ablation.no_adv {
                let mut caches = Vec::with_capacity(chunk.len());
                let mut dfeats = Vec::with_capacity(chunk.len());
                for f in &feats {
                    let (d, cache) = extractor.extract_cached(f.as_slice())?;
                    dfeats.push(d);
                    caches.push(cache);
                }
                let forwarded = grl.forward(&dfeats);
                // several classifier steps per extractor step keep the
                // adversary near its best response, so the reversed gradient
                // erases real class structure instead of chasing a stale
                // readout; momentum is skipped on both minimax players
                // the minimax pair runs at a constant rate: decaying it with
                // the prompt schedule would stall class erasure exactly when
                // the reversal strength peaks
                let adv_lr = config.learning_rate;
                for inner in 0..AUX_INNER_STEPS {
                    let (l_adv, aux_grads, _) =
                        adversarial_loss_with_grads(&aux, &forwarded, &labels)?;
                    if inner == 0 {
                        epoch_adv += l_adv;
                    }
                    vel_aux_w.step(&mut aux.fc.weight, &aux_grads.weight, adv_lr, 0.0);
                    vel_aux_b.step(&mut aux.fc.bias, &aux_grads.bias, adv_lr, 0.0);
                }
                // extractor receives the reversed gradient at the updated aux
                let (_, _, input_grads) =
                    adversarial_loss_with_grads(&aux, &forwarded, &labels)?;
                let reversed = grl.backward(&input_grads);
                let mut ext_grads = extractor.zero_grads();
                for (cache, g) in caches.iter().zip(&reversed) {
                    extractor.backward(cache, g, &mut ext_grads);
                }
                vel_ext_w1.step(&mut extractor.fc1.weight, &ext_grads.fc1.weight, adv_lr, 0.0);
                vel_ext_b1.step(&mut extractor.fc1.bias, &ext_grads.fc1.bias, adv_lr, 0.0);
                vel_ext_w2.step(&mut extractor.fc2.weight, &ext_grads.fc2.weight, adv_lr, 0.0);
                vel_ext_b2.step(&mut extractor.fc2.bias, &ext_grads.fc2.bias, adv_lr, 0.0);
            }
            n_batches += 1.0;
        }

        #[cfg(debug_assertions)]
        debug_assert_eq!(
            agnostic_before_stage1,
            bank.checksum_agnostic(),
            "stage 1 must not move agnostic tokens"
        );

        // (c) stage 2: agnostic prompt only, scaled by lambda
        #[cfg(debug_assertions)]
        let specific_before_stage2 = bank.checksum_specific();
        let mut epoch_dap = 0.0;
        for chunk in order.chunks(config.batch_size) {
            let feats: Vec<FeatureVector> =
                chunk.iter().map(|&i| image_features[i].clone()).collect();
            let labels: Vec<usize> = chunk.iter().map(|&i| class_labels[i]).collect();
            let assigns: Vec<usize> = chunk.iter().map(|&i| assignments[i]).collect();
            let batch = TrainBatch {
                image_features: &feats,
                class_labels: &labels,
                assignments: &assigns,
            };
            if config.ablation.no_dap || resolved.m1 == 0 {
                epoch_dap += loss_dap(&batch, &bank, enc, tau)?;
            } else {
                let (l_dap, mut grads) = loss_dap_with_grads(&batch, &bank, enc, tau)?;
                epoch_dap += l_dap;
                for row in grads.agnostic.iter_mut() {
                    for g in row.iter_mut() {
                        *g *= progress.lambda;
                    }
                }
                apply_agnostic(&mut bank, &grads, &mut vel_agnostic, lr, config.momentum);
            }
        }

        #[cfg(debug_assertions)]
        debug_assert_eq!(
            specific_before_stage2,
            bank.checksum_specific(),
            "stage 2 must not move specific tokens"
        );

        let record = EpochRecord {
            epoch,
            loss_dsp: epoch_dsp / n_batches,
            loss_dap: epoch_dap / n_batches,
            loss_adv: if config.ablation.no_adv {
                0.0
            } else {
                epoch_adv / n_batches
            },
            lambda: progress.lambda,
            inertia,
            cluster_sizes,
            val_accuracy: if val_ids.is_empty() {
                None
            } else {
                Some(validation_accuracy(
                    view, &val_ids, &bank, &extractor, state.as_ref().unwrap(), enc, tau,
                )?)
            },
        };
        if !record.loss_dsp.is_finite()
            || !record.loss_dap.is_finite()
            || !record.loss_adv.is_finite()
        {
            return Err(LdpfError::NonFinite(format!(
                "epoch {epoch}: L_dsp={} L_dap={} L_adv={}",
                record.loss_dsp, record.loss_dap, record.loss_adv
            )));
        }
        log.push(record);
    }

    // final full pass so checkpointed centroids reflect the final extractor
    let (final_state, _) = clustering_round(
        &image_features,
        &extractor,
        n_s,
        seed.child(stream::FINAL_KMEANS),
        state.as_ref(),
        annotations.as_deref(),
    )?;

    Ok(TrainOutput {
        bank,
        extractor,
        aux,
        state: final_state,
        log,
        resolved,
    })
}

fn sizes_of(assignments: &[usize], n_s: usize) -> Vec<usize> {
    let mut sizes = vec![0usize; n_s];
    for &a in assignments {
        sizes[a] += 1;
    }
    sizes
}

fn apply_specific(
    bank: &mut PromptBank,
    grads: &PromptGrads,
    vel: &mut Momentum,
    lr: f64,
    momentum: f64,
) {
    let mut flat_p: Vec<f64> = bank
        .specific
        .iter()
        .flatten()
        .flatten()
        .cloned()
        .collect();
    let flat_g: Vec<f64> = grads
        .specific
        .iter()
        .flatten()
        .flatten()
        .cloned()
        .collect();
    vel.step(&mut flat_p, &flat_g, lr, momentum);
    let mut it = flat_p.into_iter();
    for block in bank.specific.iter_mut() {
        for tok in block.iter_mut() {
            for v in tok.iter_mut() {
                *v = it.next().unwrap();
            }
        }
    }
}

fn apply_agnostic(
    bank: &mut PromptBank,
    grads: &PromptGrads,
    vel: &mut Momentum,
    lr: f64,
    momentum: f64,
) {
    let mut flat_p: Vec<f64> = bank.agnostic.iter().flatten().cloned().collect();
    let flat_g: Vec<f64> = grads.agnostic.iter().flatten().cloned().collect();
    vel.step(&mut flat_p, &flat_g, lr, momentum);
    let mut it = flat_p.into_iter();
    for tok in bank.agnostic.iter_mut() {
        for v in tok.iter_mut() {
            *v = it.next().unwrap();
        }
    }
}

/// One clustering round: extract domain features, cluster (or group by
/// annotations under the no-clustering ablation), and relabel against the
/// previous round's centroids so identities persist.
fn clustering_round(
    image_features: &[FeatureVector],
    extractor: &DomainFeatureExtractor,
    n_s: usize,
    seed: RngSeed,
    prev: Option<&LatentDomainState>,
    annotations: Option<&[usize]>,
) -> Result<(LatentDomainState, f64)> {
    let domain_features: Vec<Vec<f64>> = image_features
        .iter()
        .map(|f| extractor.extract(f.as_slice()))
        .collect::<Result<_>>()?;
    let round = prev.map(|s| s.round + 1).unwrap_or(0);

    if let Some(ann) = annotations {
        // assignments are fixed by annotation; centroids are group means
        let dim = extractor.domain_dim();
        let mut sums = vec![vec![0.0; dim]; n_s];
        let mut counts = vec![0usize; n_s];
        for (d, &a) in domain_features.iter().zip(ann) {
            if a >= n_s {
                return Err(LdpfError::IndexOutOfRange(format!(
                    "annotated domain {a} out of {n_s}"
                )));
            }
            counts[a] += 1;
            for (s, x) in sums[a].iter_mut().zip(d) {
                *s += x;
            }
        }
        if let Some(empty) = counts.iter().position(|&c| c == 0) {
            return Err(LdpfError::Dataset(format!(
                "annotated domain {empty} has no training samples"
            )));
        }
        let centroids: Vec<Vec<f64>> = sums
            .iter()
            .zip(&counts)
            .map(|(s, &c)| s.iter().map(|x| x / c as f64).collect())
            .collect();
        let inertia: f64 = domain_features
            .iter()
            .zip(ann)
            .map(|(d, &a)| crate::latent::squared_distance(d, &centroids[a]))
            .sum();
        return Ok((
            LatentDomainState::new(centroids, ann.to_vec(), round),
            inertia,
        ));
    }

    let result = kmeans_cluster(&domain_features, n_s, seed)?;
    let mut new_state = LatentDomainState::new(result.centroids, result.assignments, round);
    if let Some(prev_state) = prev {
        let perm = stabilize_assignment(&prev_state.centroids, &new_state.centroids)?;
        new_state.relabel(&perm)?;
    }
    Ok((new_state, result.inertia))
}

fn validation_accuracy(
    view: &TrainView,
    val_ids: &[usize],
    bank: &PromptBank,
    extractor: &DomainFeatureExtractor,
    state: &LatentDomainState,
    enc: &EncoderPair,
    tau: Temperature,
) -> Result<f64> {
    let cfg = FusionConfig::similarity_default()?;
    let table = compute_text_features(bank, enc, PromptMode::Full)?;
    let mut correct = 0usize;
    for &i in val_ids {
        let pred = fusion::predict_with_table(
            view.payload(i)?,
            &table,
            extractor,
            state,
            enc,
            &cfg,
            tau,
        )?;
        if pred.predicted_class == view.class_label(i) {
            correct += 1;
        }
    }
    Ok(correct as f64 / val_ids.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synthetic, leave_one_domain_out_splits, SyntheticSpec};

    fn toy_world() -> (crate::data::DatasetManifest, EncoderPair, SyntheticSpec) {
        let spec = SyntheticSpec {
            samples_per_cell: 8,
            ..Default::default()
        };
        let manifest = generate_synthetic(&spec).unwrap();
        let anchors = spec.class_anchor_payloads();
        let enc = EncoderPair::toy(
            spec.payload_dim,
            32,
            16,
            spec.n_classes,
            RngSeed::new(42),
            Some(&anchors),
        )
        .unwrap();
        (manifest, enc, spec)
    }

    fn small_config(epochs: usize) -> TrainConfig {
        TrainConfig {
            epochs,
            batch_size: 16,
            ..Default::default()
        }
    }

    #[test]
    fn lambda_schedule_endpoints_and_monotonicity() {
        assert_eq!(lambda_schedule(0.0), 0.0);
        assert!((lambda_schedule(0.5) - 0.98661).abs() < 1e-5);
        assert!((lambda_schedule(1.0) - 0.99991).abs() < 1e-5);
        let mut prev = -1.0;
        for i in 0..=100 {
            let l = lambda_schedule(i as f64 / 100.0);
            assert!(l > prev, "not strictly increasing at {i}");
            prev = l;
        }
        assert!(TrainProgress::at(1.5).is_err());
        assert!(TrainProgress::at(-0.1).is_err());
    }

    #[test]
    fn dsp_loss_on_uniform_class_features_is_ln_k() {
        // an encoder whose class tokens coincide makes every class feature
        // identical, so predictions are exactly uniform
        let (_, enc, spec) = toy_world();
        let w = crate::encoders::ExternalWeights {
            image_proj: vec![vec![0.1; spec.payload_dim]; 32],
            image_bias: vec![0.05; 32],
            text_map: (0..32)
                .map(|d| (0..16).map(|e| ((d * 16 + e) as f64 * 0.01).sin()).collect())
                .collect(),
            text_bias: vec![0.0; 32],
            position_weights: (0..77).map(|i| 0.9f64.powi(i)).collect(),
            class_tokens: vec![vec![0.3; 16]; spec.n_classes],
        };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("w.json");
        std::fs::write(&path, serde_json::to_vec(&w).unwrap()).unwrap();
        let desc = crate::encoders::BackboneDescriptor {
            kind: "external".into(),
            weights_path: path.to_string_lossy().into_owned(),
            ..Default::default()
        };
        let enc2 =
            EncoderPair::from_descriptor(&desc, spec.payload_dim, spec.n_classes, None).unwrap();
        drop(enc);

        let bank = PromptBank::seeded(2, 3, 2, spec.n_classes, 16, RngSeed::new(1)).unwrap();
        let feats = vec![
            enc2.encode_image(&vec![0.5; spec.payload_dim]).unwrap(),
            enc2.encode_image(&vec![-0.25; spec.payload_dim]).unwrap(),
        ];
        let batch = TrainBatch {
            image_features: &feats,
            class_labels: &[0, 3],
            assignments: &[0, 1],
        };
        let tau = Temperature::new(0.01).unwrap();
        let l = loss_dsp(&batch, &bank, &enc2, tau).unwrap();
        assert!((l - (spec.n_classes as f64).ln()).abs() < 1e-9, "{l}");
        // and with full prompts the same holds
        let l2 = loss_dap(&batch, &bank, &enc2, tau).unwrap();
        assert!((l2 - (spec.n_classes as f64).ln()).abs() < 1e-9);
    }

    #[test]
    fn single_sample_batch_is_plain_cross_entropy_of_its_domain() {
        let (_, enc, _) = toy_world();
        let bank = PromptBank::seeded(2, 3, 3, 5, 16, RngSeed::new(1)).unwrap();
        let tau = Temperature::new(0.01).unwrap();
        let f = enc.encode_image(&vec![0.3; 16]).unwrap();
        let batch = TrainBatch {
            image_features: std::slice::from_ref(&f),
            class_labels: &[2],
            assignments: &[1],
        };
        let l = loss_dsp(&batch, &bank, &enc, tau).unwrap();
        // independent recomputation against domain 1's dsp-only features
        let table = compute_text_features(&bank, &enc, PromptMode::DspOnly).unwrap();
        let probs = classify(&f, table.domain_row(1).unwrap(), tau).unwrap();
        let want = -probs.as_slice()[2].max(1e-12).ln();
        assert!((l - want).abs() < 1e-12);
    }

    #[test]
    fn empty_agnostic_block_makes_dap_equal_dsp() {
        let (_, enc, _) = toy_world();
        let bank = PromptBank::seeded(0, 4, 2, 5, 16, RngSeed::new(3)).unwrap();
        let tau = Temperature::new(0.01).unwrap();
        let feats: Vec<FeatureVector> = (0..6)
            .map(|i| enc.encode_image(&vec![0.1 * i as f64 - 0.2; 16]).unwrap())
            .collect();
        let labels = [0, 1, 2, 3, 4, 0];
        let assigns = [0, 1, 0, 1, 0, 1];
        let batch = TrainBatch {
            image_features: &feats,
            class_labels: &labels,
            assignments: &assigns,
        };
        let a = loss_dsp(&batch, &bank, &enc, tau).unwrap();
        let b = loss_dap(&batch, &bank, &enc, tau).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn unassigned_sample_is_rejected() {
        let (_, enc, _) = toy_world();
        let bank = PromptBank::seeded(1, 2, 2, 5, 16, RngSeed::new(3)).unwrap();
        let f = enc.encode_image(&vec![0.2; 16]).unwrap();
        let batch = TrainBatch {
            image_features: std::slice::from_ref(&f),
            class_labels: &[0],
            assignments: &[5], // out of range = unassigned
        };
        assert!(loss_dsp(&batch, &bank, &enc, Temperature::new(0.01).unwrap()).is_err());
    }

    #[test]
    fn stage_gradients_respect_isolation() {
        let (_, enc, _) = toy_world();
        let bank = PromptBank::seeded(2, 3, 2, 5, 16, RngSeed::new(3)).unwrap();
        let tau = Temperature::new(0.01).unwrap();
        let feats: Vec<FeatureVector> = (0..4)
            .map(|i| enc.encode_image(&vec![0.15 * (i + 1) as f64; 16]).unwrap())
            .collect();
        let batch = TrainBatch {
            image_features: &feats,
            class_labels: &[0, 1, 2, 3],
            assignments: &[0, 1, 0, 1],
        };
        let (_, g1) = loss_dsp_with_grads(&batch, &bank, &enc, tau).unwrap();
        assert!(g1.agnostic.iter().flatten().all(|g| *g == 0.0));
        assert!(g1.specific.iter().flatten().flatten().any(|g| *g != 0.0));

        let (_, g2) = loss_dap_with_grads(&batch, &bank, &enc, tau).unwrap();
        assert!(g2.specific.iter().flatten().flatten().all(|g| *g == 0.0));
        assert!(g2.agnostic.iter().flatten().any(|g| *g != 0.0));

        // applying stage updates leaves the other block's checksum intact
        let mut b1 = bank.clone();
        let before_agnostic = b1.checksum_agnostic();
        apply_specific(
            &mut b1,
            &g1,
            &mut Momentum::zeros(2 * 3 * 16),
            0.01,
            0.9,
        );
        assert_eq!(b1.checksum_agnostic(), before_agnostic);
        assert_ne!(b1.checksum_specific(), bank.checksum_specific());

        let mut b2 = bank.clone();
        let before_specific = b2.checksum_specific();
        apply_agnostic(
            &mut b2,
            &g2,
            &mut Momentum::zeros(2 * 16),
            0.01,
            0.9,
        );
        assert_eq!(b2.checksum_specific(), before_specific);
        assert_ne!(b2.checksum_agnostic(), bank.checksum_agnostic());
    }

    #[test]
    fn total_loss_at_zero_progress_is_dsp_only() {
        let (manifest, enc, _) = toy_world();
        let splits = leave_one_domain_out_splits(&manifest).unwrap();
        let view = TrainView::new(&manifest, &splits[0], false);
        let bank = PromptBank::seeded(2, 3, 2, 5, 16, RngSeed::new(3)).unwrap();
        let ext = DomainFeatureExtractor::seeded(32, 16, 8, RngSeed::new(4));
        let aux = AuxiliaryClassifier::seeded(8, 5, RngSeed::new(5));
        let tau = Temperature::new(0.01).unwrap();
        let feats: Vec<FeatureVector> = (0..8)
            .map(|i| enc.encode_image(view.payload(i).unwrap()).unwrap())
            .collect();
        let labels: Vec<usize> = (0..8).map(|i| view.class_label(i)).collect();
        let assigns: Vec<usize> = (0..8).map(|i| i % 2).collect();
        let batch = TrainBatch {
            image_features: &feats,
            class_labels: &labels,
            assignments: &assigns,
        };
        let t0 = total_loss(
            &batch,
            &bank,
            &enc,
            &ext,
            &aux,
            TrainProgress::at(0.0).unwrap(),
            AblationSwitches::default(),
            tau,
        )
        .unwrap();
        assert_eq!(t0.lambda, 0.0);
        assert_eq!(t0.value, t0.loss_dsp);

        // without the adversarial term: L_dsp + lambda * L_dap
        let t1 = total_loss(
            &batch,
            &bank,
            &enc,
            &ext,
            &aux,
            TrainProgress::at(0.5).unwrap(),
            AblationSwitches {
                no_adv: true,
                ..Default::default()
            },
            tau,
        )
        .unwrap();
        assert!((t1.value - (t1.loss_dsp + t1.lambda * t1.loss_dap)).abs() < 1e-15);
        assert_eq!(t1.loss_adv, 0.0);
    }

    #[test]
    fn zero_epochs_returns_initialized_bank_and_empty_log() {
        let (manifest, enc, _) = toy_world();
        let splits = leave_one_domain_out_splits(&manifest).unwrap();
        let view = TrainView::new(&manifest, &splits[0], false);
        let config = small_config(0);
        let out = train(&view, &config, &enc, RngSeed::new(0)).unwrap();
        assert!(out.log.is_empty());
        let fresh = PromptBank::seeded(
            out.resolved.m1,
            out.resolved.m2,
            out.resolved.n_latent_domains,
            5,
            16,
            RngSeed::new(0).child(stream::PROMPT_INIT),
        )
        .unwrap();
        assert_eq!(out.bank, fresh);
        // final clustering pass still produces usable centroids
        assert_eq!(out.state.num_domains(), out.resolved.n_latent_domains);
    }

    #[test]
    fn training_is_bit_reproducible() {
        let (manifest, enc, _) = toy_world();
        let splits = leave_one_domain_out_splits(&manifest).unwrap();
        let view = TrainView::new(&manifest, &splits[1], false);
        let config = small_config(3);
        let a = train(&view, &config, &enc, RngSeed::new(11)).unwrap();
        let b = train(&view, &config, &enc, RngSeed::new(11)).unwrap();
        assert_eq!(a.bank, b.bank);
        assert_eq!(a.extractor, b.extractor);
        assert_eq!(a.aux, b.aux);
        assert_eq!(a.state, b.state);
        assert_eq!(a.log, b.log);
        let c = train(&view, &config, &enc, RngSeed::new(12)).unwrap();
        assert_ne!(a.bank, c.bank);
    }

    #[test]
    fn encoder_stays_frozen_through_training() {
        let (manifest, enc, _) = toy_world();
        let before = enc.checksum();
        let splits = leave_one_domain_out_splits(&manifest).unwrap();
        let view = TrainView::new(&manifest, &splits[0], false);
        train(&view, &small_config(2), &enc, RngSeed::new(0)).unwrap();
        assert_eq!(enc.checksum(), before);
    }

    #[test]
    fn no_clustering_uses_annotations_every_epoch() {
        let (manifest, enc, _) = toy_world();
        let splits = leave_one_domain_out_splits(&manifest).unwrap();
        let view = TrainView::new(&manifest, &splits[0], true);
        let config = TrainConfig {
            epochs: 2,
            batch_size: 16,
            ablation: AblationSwitches {
                no_clustering: true,
                ..Default::default()
            },
            ..Default::default()
        };
        let out = train(&view, &config, &enc, RngSeed::new(0)).unwrap();
        let annotations = view.annotated_domains().unwrap();
        assert_eq!(out.state.assignments, annotations);
        assert_eq!(out.resolved.n_latent_domains, 2);
    }

    #[test]
    fn no_clustering_without_unlock_fails_at_the_guard() {
        let (manifest, enc, _) = toy_world();
        let splits = leave_one_domain_out_splits(&manifest).unwrap();
        let view = TrainView::new(&manifest, &splits[0], false);
        let config = TrainConfig {
            ablation: AblationSwitches {
                no_clustering: true,
                ..Default::default()
            },
            ..Default::default()
        };
        assert!(matches!(
            train(&view, &config, &enc, RngSeed::new(0)).unwrap_err(),
            LdpfError::AnnotationAccessDenied
        ));
    }

    #[test]
    fn degenerate_datasets_are_rejected_before_any_epoch() {
        let spec = SyntheticSpec {
            n_classes: 1,
            payload_dim: 8,
            ..Default::default()
        };
        let manifest = generate_synthetic(&spec).unwrap();
        let splits = leave_one_domain_out_splits(&manifest).unwrap();
        let view = TrainView::new(&manifest, &splits[0], false);
        let enc = EncoderPair::toy(8, 32, 16, 1, RngSeed::new(42), None).unwrap();
        let err = train(&view, &small_config(1), &enc, RngSeed::new(0)).unwrap_err();
        assert!(err.to_string().contains("degenerate dataset"));
    }

    #[test]
    fn conflicting_ablations_are_rejected() {
        let config = TrainConfig {
            ablation: AblationSwitches {
                no_dap: true,
                no_dsp: true,
                ..Default::default()
            },
            ..Default::default()
        };
        assert!(config.validate().is_err());
    }

    #[test]
    fn learning_rate_schedule_warms_up_then_decays() {
        let config = TrainConfig {
            epochs: 10,
            ..Default::default()
        };
        assert_eq!(config.learning_rate_at(0), config.warmup_lr);
        assert_eq!(config.learning_rate_at(1), config.learning_rate);
        let mut prev = config.learning_rate;
        for e in 2..10 {
            let lr = config.learning_rate_at(e);
            assert!(lr < prev, "cosine decay must be monotone after warmup");
            prev = lr;
        }
    }
}
