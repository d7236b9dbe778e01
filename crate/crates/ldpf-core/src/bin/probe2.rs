// scratch diagnostic (not shipped): inertia of the found partition vs the
// ground-truth style partition for the stubborn run
use ldpf_core::data::{generate_synthetic, leave_one_domain_out_splits, SyntheticSpec, TrainView};
use ldpf_core::encoders::EncoderPair;
use ldpf_core::latent::squared_distance;
use ldpf_core::rng::RngSeed;
use ldpf_core::training::{train, TrainConfig};

fn partition_inertia(points: &[Vec<f64>], labels: &[usize], k: usize) -> f64 {
    let dim = points[0].len();
    let mut sums = vec![vec![0.0; dim]; k];
    let mut counts = vec![0usize; k];
    for (p, &l) in points.iter().zip(labels) {
        counts[l] += 1;
        for (s, x) in sums[l].iter_mut().zip(p) {
            *s += x;
        }
    }
    let centroids: Vec<Vec<f64>> = sums
        .iter()
        .zip(&counts)
        .map(|(s, &c)| s.iter().map(|x| x / c.max(1) as f64).collect())
        .collect();
    points
        .iter()
        .zip(labels)
        .map(|(p, &l)| squared_distance(p, &centroids[l]))
        .sum()
}

fn main() {
    let spec = SyntheticSpec::default();
    let manifest = generate_synthetic(&spec).unwrap();
    let anchors = spec.class_anchor_payloads();
    let enc = EncoderPair::toy(spec.payload_dim, 32, 16, 5, RngSeed::new(42), Some(&anchors))
        .unwrap();
    let splits = leave_one_domain_out_splits(&manifest).unwrap();
    let split = &splits[0]; // target style_0
    let view = TrainView::new(&manifest, split, false);
    let out = train(&view, &TrainConfig::default(), &enc, RngSeed::new(1)).unwrap();

    let dfeats: Vec<Vec<f64>> = (0..view.len())
        .map(|i| {
            let f = enc.encode_image(view.payload(i).unwrap()).unwrap();
            out.extractor.extract(f.as_slice()).unwrap()
        })
        .collect();
    let truth: Vec<usize> = split
        .train_indices
        .iter()
        .map(|&i| split.dense_train_domain(manifest.samples[i].annotated_domain.unwrap()).unwrap())
        .collect();
    let found = partition_inertia(&dfeats, &out.state.assignments, 2);
    let style = partition_inertia(&dfeats, &truth, 2);
    println!("found-partition inertia = {found:.4}");
    println!("style-partition inertia = {style:.4}");
    // scale of features
    let norm_mean: f64 =
        dfeats.iter().map(|d| d.iter().map(|x| x * x).sum::<f64>().sqrt()).sum::<f64>()
            / dfeats.len() as f64;
    println!("mean |e(f(x))| = {norm_mean:.4}");
    // restarts: best of 16 seeded k-means runs
    for r in 0..4 {
        let km = ldpf_core::latent::kmeans_cluster(&dfeats, 2, RngSeed::new(1000 + r)).unwrap();
        let agree = ldpf_core::eval::clustering_agreement(&km.assignments, &truth, 2).unwrap();
        println!("restart {r}: inertia={:.4} agree={agree:.3}", km.inertia);
    }

    // same seed, untrained extractor: does the random init already mislead?
    for seed in [0u64, 1, 2] {
        for (si, split) in splits.iter().enumerate() {
            let view = TrainView::new(&manifest, split, false);
            let truth: Vec<usize> = split
                .train_indices
                .iter()
                .map(|&i| {
                    split
                        .dense_train_domain(manifest.samples[i].annotated_domain.unwrap())
                        .unwrap()
                })
                .collect();
            let ext_init = ldpf_core::latent::DomainFeatureExtractor::seeded(
                32,
                16,
                8,
                RngSeed::new(seed).child(ldpf_core::rng::stream::EXTRACTOR_INIT),
            );
            let df: Vec<Vec<f64>> = (0..view.len())
                .map(|i| {
                    let f = enc.encode_image(view.payload(i).unwrap()).unwrap();
                    ext_init.extract(f.as_slice()).unwrap()
                })
                .collect();
            let km = ldpf_core::latent::kmeans_cluster(&df, 2, RngSeed::new(7)).unwrap();
            let agree = ldpf_core::eval::clustering_agreement(&km.assignments, &truth, 2).unwrap();
            println!("INIT seed={seed} split={si}: agree={agree:.3}");
        }
    }
}

// comparison: untrained extractor (pure random init) for the same seed
#[allow(dead_code)]
fn init_vs_trained() {}
