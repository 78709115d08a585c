use sp_transfer::fisher::fisher_on_indices;
use sp_transfer::{estimate_fisher_diag, Dataset, LayerSpec, Network, Shape3, Tensor};

fn dataset(rows: Vec<Vec<f64>>, shape: Shape3, classes: usize) -> Dataset {
    let n = rows.len();
    let data: Vec<f64> = rows.into_iter().flatten().collect();
    let images = Tensor::new(vec![n, shape.c, shape.h, shape.w], data).unwrap();
    Dataset::new(images, vec![0; n], classes, "oracle").unwrap()
}

/// Logistic model p = σ(w·x + b) written as FC(1) feeding a fixed two-class head with
/// logits (z, 0). At w = b = 0 and x = 1 the Fisher information of w is p(1 − p)x² = 1/4.
#[test]
fn bernoulli_logistic_fisher_is_one_quarter() {
    let mut net = Network::with_zero_params(
        Shape3::new(1, 1, 1),
        vec![LayerSpec::FullyConnected { out_dim: 1 }, LayerSpec::SoftmaxHead { num_classes: 2 }],
    )
    .unwrap();
    let head = net.head_slice();
    net.params.values[head.offset] = 1.0; // class 0 logit = z, class 1 logit = 0
    let data = dataset(vec![vec![1.0]], Shape3::new(1, 1, 1), 2);
    let f = estimate_fisher_diag(&net, &data, 1, 0).unwrap();
    // shared part = [w, b]
    assert_eq!(f.values.len(), 2);
    assert!((f.values[0] - 0.25).abs() < 1e-10, "{}", f.values[0]);
    assert!((f.values[1] - 0.25).abs() < 1e-10);

    // x = 2 scales the weight entry by x².
    let data = dataset(vec![vec![2.0]], Shape3::new(1, 1, 1), 2);
    let f = estimate_fisher_diag(&net, &data, 1, 0).unwrap();
    assert!((f.values[0] - 1.0).abs() < 1e-10);
}

#[test]
fn single_class_head_has_zero_fisher() {
    let net = Network::new(
        Shape3::new(1, 1, 3),
        vec![LayerSpec::FullyConnected { out_dim: 2 }, LayerSpec::Relu, LayerSpec::SoftmaxHead { num_classes: 1 }],
        3,
    )
    .unwrap();
    let data = dataset(vec![vec![0.2, -1.0, 0.7], vec![1.0, 0.5, -0.3]], Shape3::new(1, 1, 3), 1);
    let f = estimate_fisher_diag(&net, &data, 2, 0).unwrap();
    assert!(f.values.iter().all(|&v| v == 0.0));
}

#[test]
fn parameter_without_influence_has_zero_fisher() {
    let mut net = Network::new(
        Shape3::new(1, 1, 3),
        vec![LayerSpec::FullyConnected { out_dim: 2 }, LayerSpec::Relu, LayerSpec::SoftmaxHead { num_classes: 3 }],
        5,
    )
    .unwrap();
    let head = net.head_slice();
    for k in 0..3 {
        net.params.values[head.offset + k * 2 + 1] = 0.0;
    }
    let fc = net.params.layout[0];
    let data = dataset(vec![vec![0.4, -0.1, 0.9], vec![-0.5, 0.8, 0.3], vec![1.0, 1.0, 1.0]], Shape3::new(1, 1, 3), 3);
    let f = estimate_fisher_diag(&net, &data, 3, 0).unwrap();
    let shared = net.params.shared_indices();
    for j in fc.channel_indices(1) {
        let pos = shared.iter().position(|&s| s == j).unwrap();
        assert_eq!(f.values[pos], 0.0);
    }
    assert!(f.values.iter().any(|&v| v > 0.0));
}

/// Hand-written score for FC(h) → ReLU → softmax head, enumerating classes and inputs.
fn brute_force_fisher(net: &Network, inputs: &[Vec<f64>]) -> Vec<f64> {
    let w = &net.params.values;
    let fc = net.params.layout[0];
    let hd = net.head_slice();
    let (n_in, n_hid, k_count) = (fc.fan_in, fc.out_channels, hd.out_channels);
    let mut fisher = vec![0.0; fc.len()];
    for x in inputs {
        let pre: Vec<f64> = (0..n_hid)
            .map(|o| w[fc.bias_offset() + o] + (0..n_in).map(|i| w[fc.offset + o * n_in + i] * x[i]).sum::<f64>())
            .collect();
        let h: Vec<f64> = pre.iter().map(|v| v.max(0.0)).collect();
        let z: Vec<f64> = (0..k_count)
            .map(|k| w[hd.bias_offset() + k] + (0..n_hid).map(|o| w[hd.offset + k * n_hid + o] * h[o]).sum::<f64>())
            .collect();
        let zmax = z.iter().cloned().fold(f64::MIN, f64::max);
        let e: Vec<f64> = z.iter().map(|v| (v - zmax).exp()).collect();
        let total: f64 = e.iter().sum();
        let p: Vec<f64> = e.iter().map(|v| v / total).collect();
        for k in 0..k_count {
            let dz: Vec<f64> = (0..k_count).map(|c| f64::from(c == k) - p[c]).collect();
            let mut score = vec![0.0; fc.len()];
            for o in 0..n_hid {
                if pre[o] <= 0.0 {
                    continue;
                }
                let dh: f64 = (0..k_count).map(|c| w[hd.offset + c * n_hid + o] * dz[c]).sum();
                for i in 0..n_in {
                    score[o * n_in + i] = dh * x[i];
                }
                score[n_hid * n_in + o] = dh;
            }
            for (f, s) in fisher.iter_mut().zip(&score) {
                *f += p[k] * s * s;
            }
        }
    }
    fisher.iter_mut().for_each(|f| *f /= inputs.len() as f64);
    fisher
}

#[test]
fn matches_brute_force_enumeration() {
    let net = Network::new(
        Shape3::new(1, 1, 4),
        vec![LayerSpec::FullyConnected { out_dim: 5 }, LayerSpec::Relu, LayerSpec::SoftmaxHead { num_classes: 4 }],
        11,
    )
    .unwrap();
    let inputs: Vec<Vec<f64>> = (0..9)
        .map(|i| (0..4).map(|d| ((i * 5 + d * 3) % 7) as f64 / 3.0 - 1.0).collect())
        .collect();
    let data = dataset(inputs.clone(), Shape3::new(1, 1, 4), 4);
    let all: Vec<usize> = (0..inputs.len()).collect();
    let got = fisher_on_indices(&net, &data, &all).unwrap();
    let want = brute_force_fisher(&net, &inputs);
    assert_eq!(got.values.len(), want.len());
    for (g, w) in got.values.iter().zip(&want) {
        assert!((g - w).abs() < 1e-10, "{g} vs {w}");
    }
    // Sampling every example without replacement is the same estimate up to summation order.
    let sampled = estimate_fisher_diag(&net, &data, inputs.len(), 123).unwrap();
    for (g, w) in sampled.values.iter().zip(&want) {
        assert!((g - w).abs() < 1e-10);
    }
}
