// scratch experiment driver (not shipped): prints synthetic e2e numbers
use ldpf_core::data::{generate_synthetic, leave_one_domain_out_splits, SyntheticSpec, TrainView};
use ldpf_core::encoders::EncoderPair;
use ldpf_core::eval::{clustering_agreement, evaluate_split, mutual_information};
use ldpf_core::fusion::FusionConfig;
use ldpf_core::math::Temperature;
use ldpf_core::rng::RngSeed;
use ldpf_core::training::{train, TrainConfig};

fn main() {
    let envf = |k: &str, d: f64| -> f64 {
        std::env::var(k).ok().and_then(|v| v.parse().ok()).unwrap_or(d)
    };
    let spec = SyntheticSpec {
        style_scale: envf("STYLE_SCALE", 2.0),
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
    let splits = leave_one_domain_out_splits(&manifest).unwrap();
    let config = TrainConfig::default();
    let tau_cls = Temperature::new(config.tau_cls).unwrap();
    let fusion_cfg = FusionConfig::new(
        envf("TAU_FUSION", 0.1),
        ldpf_core::fusion::FusionMode::Similarity,
    )
    .unwrap();

    let mut all_acc = vec![];
    let mut all_agree = vec![];
    for split in &splits {
        for seed in [0u64, 1, 2] {
            let t0 = std::time::Instant::now();
            let view = TrainView::new(&manifest, split, false);
            let out = train(&view, &config, &enc, RngSeed::new(seed)).unwrap();
            // agreement of final assignments with dense annotations
            let truth: Vec<usize> = split
                .train_indices
                .iter()
                .map(|&i| {
                    split
                        .dense_train_domain(manifest.samples[i].annotated_domain.unwrap())
                        .unwrap()
                })
                .collect();
            let agree =
                clustering_agreement(&out.state.assignments, &truth, out.state.num_domains())
                    .unwrap();
            let (outcome, _dump) = evaluate_split(
                &manifest,
                split,
                &out.bank,
                &out.extractor,
                &out.state,
                &enc,
                &fusion_cfg,
                tau_cls,
            )
            .unwrap();
            let labels: Vec<usize> = split
                .train_indices
                .iter()
                .map(|&i| manifest.samples[i].class_id)
                .collect();
            let mi = mutual_information(&out.state.assignments, &labels).unwrap();
            let last = out.log.last().unwrap();
            println!(
                "target={} seed={} agree={:.3} acc={:.3} u_sel={:.3} per_prompt={:?} mi={:.4} L_dsp={:.4} L_dap={:.4} L_adv={:.4} ({:.1?})",
                split.target_name,
                seed,
                agree,
                outcome.accuracy,
                outcome.u_sel,
                outcome
                    .per_prompt_accuracy
                    .iter()
                    .map(|a| (a * 1000.0).round() / 1000.0)
                    .collect::<Vec<_>>(),
                mi,
                last.loss_dsp,
                last.loss_dap,
                last.loss_adv,
                t0.elapsed(),
            );
            all_acc.push(outcome.accuracy);
            all_agree.push(agree);
        }
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    println!("MEAN acc={:.4} agree={:.4}", mean(&all_acc), mean(&all_agree));
}
