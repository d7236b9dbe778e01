//! Dual-part soft prompts: one shared domain-agnostic token block, one
//! domain-specific block per latent domain, and a fixed class token. Text
//! features for every (domain, class) pair come from encoding the assembled
//! sequences; classification scores an image feature against class features
//! with a temperature softmax over cosine similarities.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::encoders::{EncoderPair, TokenSequence, MAX_CONTEXT_LENGTH};
use crate::error::{LdpfError, Result};
use crate::math::{cosine_similarity, temperature_softmax, FeatureVector, SimplexWeights, Temperature};
use crate::rng::RngSeed;

/// Prompt-token initialization scale (zero-mean Gaussian).
pub const PROMPT_INIT_STD: f64 = 0.02;

/// Which prompt parts go into an assembled sequence.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PromptMode {
    /// Domain-specific tokens and the class token only (stage 1).
    DspOnly,
    /// Agnostic block, then the domain's specific block, then the class token.
    Full,
}

/// Learnable prompt parameters. The agnostic block is shared by every
/// domain; specific blocks are parameter-disjoint per domain. Class tokens
/// are fixed and live in the encoder.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptBank {
    /// M1 x E shared tokens.
    pub agnostic: Vec<Vec<f64>>,
    /// N_s x M2 x E per-domain tokens.
    pub specific: Vec<Vec<Vec<f64>>>,
    pub num_classes: usize,
    pub embed_dim: usize,
}

impl PromptBank {
    pub fn seeded(
        m1: usize,
        m2: usize,
        num_domains: usize,
        num_classes: usize,
        embed_dim: usize,
        seed: RngSeed,
    ) -> Result<Self> {
        if num_domains == 0 || num_classes == 0 || embed_dim == 0 {
            return Err(LdpfError::InvalidConfig(
                "prompt bank needs at least one domain, one class, and a positive embed dim"
                    .into(),
            ));
        }
        if m1 + m2 + 1 > MAX_CONTEXT_LENGTH {
            return Err(LdpfError::InvalidConfig(format!(
                "prompt lengths {m1}+{m2}+1 exceed context capacity {MAX_CONTEXT_LENGTH}"
            )));
        }
        let mut rng = seed.rng();
        let mut gauss = || PROMPT_INIT_STD * crate::rng::gaussian(&mut rng);
        let mut block = |len: usize| -> Vec<Vec<f64>> {
            (0..len)
                .map(|_| (0..embed_dim).map(|_| gauss()).collect())
                .collect()
        };
        let agnostic = block(m1);
        let specific = (0..num_domains).map(|_| block(m2)).collect();
        Ok(Self {
            agnostic,
            specific,
            num_classes,
            embed_dim,
        })
    }

    pub fn m1(&self) -> usize {
        self.agnostic.len()
    }

    pub fn m2(&self) -> usize {
        self.specific.first().map(|b| b.len()).unwrap_or(0)
    }

    pub fn num_domains(&self) -> usize {
        self.specific.len()
    }

    /// Assemble the token sequence for (domain, class).
    ///
    /// Full mode: `[v]_1..[v]_M1 [d^s]_1..[d^s]_M2 [CLASS]_k`.
    /// DspOnly mode drops the agnostic block entirely.
    pub fn assemble(
        &self,
        enc: &EncoderPair,
        domain: usize,
        class_id: usize,
        mode: PromptMode,
    ) -> Result<TokenSequence> {
        let block = self.specific.get(domain).ok_or_else(|| {
            LdpfError::IndexOutOfRange(format!(
                "domain {domain} out of {}",
                self.specific.len()
            ))
        })?;
        if class_id >= self.num_classes {
            return Err(LdpfError::IndexOutOfRange(format!(
                "class {class_id} out of {}",
                self.num_classes
            )));
        }
        let mut tokens: Vec<Vec<f64>> = Vec::with_capacity(self.m1() + self.m2() + 1);
        if mode == PromptMode::Full {
            tokens.extend(self.agnostic.iter().cloned());
        }
        tokens.extend(block.iter().cloned());
        tokens.push(enc.class_token(class_id)?.to_vec());
        TokenSequence::new(tokens, self.embed_dim)
    }

    pub fn checksum_agnostic(&self) -> String {
        checksum_blocks(self.agnostic.iter())
    }

    pub fn checksum_specific(&self) -> String {
        checksum_blocks(self.specific.iter().flatten())
    }
}

fn checksum_blocks<'a>(blocks: impl Iterator<Item = &'a Vec<f64>>) -> String {
    let mut h = Sha256::new();
    for row in blocks {
        for v in row {
            h.update(v.to_le_bytes());
        }
    }
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

/// Normalized text features for every (domain, class) pair.
#[derive(Debug, Clone, PartialEq)]
pub struct TextFeatureTable {
    /// N_s x K feature vectors.
    features: Vec<Vec<FeatureVector>>,
}

impl TextFeatureTable {
    /// Build a table from precomputed features (one row per domain, one
    /// column per class). Rows must be rectangular and nonempty.
    pub fn from_features(features: Vec<Vec<FeatureVector>>) -> Result<Self> {
        let k = features.first().map(|r| r.len()).unwrap_or(0);
        if k == 0 {
            return Err(LdpfError::EmptyInput("text feature table".into()));
        }
        if features.iter().any(|r| r.len() != k) {
            return Err(LdpfError::DimensionMismatch(
                "ragged text feature table".into(),
            ));
        }
        let dim = features[0][0].dim();
        if features.iter().flatten().any(|f| f.dim() != dim) {
            return Err(LdpfError::DimensionMismatch(
                "text feature table entries of unequal dimension".into(),
            ));
        }
        Ok(Self { features })
    }

    pub fn num_domains(&self) -> usize {
        self.features.len()
    }

    pub fn num_classes(&self) -> usize {
        self.features.first().map(|r| r.len()).unwrap_or(0)
    }

    pub fn get(&self, domain: usize, class_id: usize) -> Result<&FeatureVector> {
        self.features
            .get(domain)
            .and_then(|row| row.get(class_id))
            .ok_or_else(|| {
                LdpfError::IndexOutOfRange(format!("table entry ({domain}, {class_id})"))
            })
    }

    /// All class features of one domain.
    pub fn domain_row(&self, domain: usize) -> Result<&[FeatureVector]> {
        self.features
            .get(domain)
            .map(|r| r.as_slice())
            .ok_or_else(|| LdpfError::IndexOutOfRange(format!("domain {domain}")))
    }
}

/// Encode every assembled prompt and normalize. Recompute after any prompt
/// update; nothing caches across parameter changes.
pub fn compute_text_features(
    bank: &PromptBank,
    enc: &EncoderPair,
    mode: PromptMode,
) -> Result<TextFeatureTable> {
    if bank.embed_dim != enc.embed_dim() {
        return Err(LdpfError::DimensionMismatch(format!(
            "bank embed dim {} vs encoder embed dim {}",
            bank.embed_dim,
            enc.embed_dim()
        )));
    }
    if bank.num_classes != enc.num_classes() {
        return Err(LdpfError::DimensionMismatch(format!(
            "bank has {} classes, encoder has {}",
            bank.num_classes,
            enc.num_classes()
        )));
    }
    let mut features = Vec::with_capacity(bank.num_domains());
    for s in 0..bank.num_domains() {
        let mut row = Vec::with_capacity(bank.num_classes);
        for k in 0..bank.num_classes {
            let seq = bank.assemble(enc, s, k, mode)?;
            row.push(enc.encode_text(&seq)?);
        }
        features.push(row);
    }
    Ok(TextFeatureTable { features })
}

/// Gradient buffers mirroring the learnable parts of a [`PromptBank`].
#[derive(Debug, Clone)]
pub struct PromptGrads {
    pub agnostic: Vec<Vec<f64>>,
    pub specific: Vec<Vec<Vec<f64>>>,
}

impl PromptGrads {
    pub fn zeros_like(bank: &PromptBank) -> Self {
        Self {
            agnostic: bank
                .agnostic
                .iter()
                .map(|t| vec![0.0; t.len()])
                .collect(),
            specific: bank
                .specific
                .iter()
                .map(|b| b.iter().map(|t| vec![0.0; t.len()]).collect())
                .collect(),
        }
    }
}

/// Backpropagate dL/d(text feature) of table entry (domain, class) into the
/// prompt token gradients. `update_agnostic` / `update_specific` gate which
/// blocks receive gradient; a blocked block stays untouched (stage
/// isolation).
pub fn accumulate_prompt_grads(
    bank: &PromptBank,
    enc: &EncoderPair,
    domain: usize,
    class_id: usize,
    mode: PromptMode,
    grad_feature: &[f64],
    update_agnostic: bool,
    update_specific: bool,
    grads: &mut PromptGrads,
) -> Result<()> {
    let seq = bank.assemble(enc, domain, class_id, mode)?;
    let token_grads = enc.encode_text_backward(&seq, grad_feature)?;
    let m1 = if mode == PromptMode::Full { bank.m1() } else { 0 };
    let m2 = bank.m2();
    for (j, tg) in token_grads.iter().enumerate() {
        if j < m1 {
            if update_agnostic {
                for (g, t) in grads.agnostic[j].iter_mut().zip(tg) {
                    *g += t;
                }
            }
        } else if j < m1 + m2 {
            if update_specific {
                for (g, t) in grads.specific[domain][j - m1].iter_mut().zip(tg) {
                    *g += t;
                }
            }
        }
        // the trailing class token is fixed; its gradient is dropped
    }
    Ok(())
}

/// Classification probabilities of an image feature against class features:
/// softmax over classes of `cos(class_feature_k, image_feature) / tau`.
pub fn classify(
    image_feature: &FeatureVector,
    class_features: &[FeatureVector],
    tau: Temperature,
) -> Result<SimplexWeights> {
    if class_features.is_empty() {
        return Err(LdpfError::EmptyInput("class features".into()));
    }
    let cosines: Vec<f64> = class_features
        .iter()
        .map(|cf| cosine_similarity(cf.as_slice(), image_feature.as_slice()))
        .collect::<Result<_>>()?;
    temperature_softmax(&cosines, tau)
}
