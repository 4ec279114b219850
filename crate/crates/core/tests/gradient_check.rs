//! Central finite-difference verification of the analytic gradient.

use flcarbon_core::model::{loss_and_gradient, Dataset, MlpArchitecture};
use flcarbon_core::rng::{self, stream, StreamKind};
use flcarbon_core::ParameterVector;

fn random_instance(seed: u64) -> (MlpArchitecture, ParameterVector, Dataset) {
    let mut r = stream(seed, StreamKind::Dataset, 0, 0);
    let input_dim = 2 + rng::next_index(&mut r, 4);
    let n_classes = 2 + rng::next_index(&mut r, 3);
    let hidden_dims = if rng::next_f64(&mut r) < 0.5 {
        vec![3 + rng::next_index(&mut r, 5)]
    } else {
        vec![]
    };
    let arch = MlpArchitecture { input_dim, hidden_dims, n_classes };

    let mut init_rng = stream(seed, StreamKind::Init, 0, 0);
    let mut params = arch.init_params(&mut init_rng);
    for v in params.values_mut() {
        *v += 0.1 * rng::next_gaussian(&mut r);
    }

    let n_samples = 4 + rng::next_index(&mut r, 8);
    let features = (0..n_samples * input_dim).map(|_| rng::next_gaussian(&mut r)).collect();
    let labels = (0..n_samples).map(|_| rng::next_index(&mut r, n_classes)).collect();
    let data = Dataset { features, labels, input_dim, n_classes };
    data.validate().unwrap();
    (arch, params, data)
}

#[test]
fn analytic_gradient_matches_central_differences() {
    for seed in 0..20u64 {
        let (arch, params, data) = random_instance(seed);
        let indices: Vec<usize> = (0..data.n_samples()).collect();
        let (_, grad) = loss_and_gradient(&arch, &params, &data, &indices).unwrap();

        let h = 1e-5;
        for i in 0..params.n_params() {
            let mut plus = params.clone();
            plus.values_mut()[i] += h;
            let mut minus = params.clone();
            minus.values_mut()[i] -= h;
            let (lp, _) = loss_and_gradient(&arch, &plus, &data, &indices).unwrap();
            let (lm, _) = loss_and_gradient(&arch, &minus, &data, &indices).unwrap();
            let fd = (lp - lm) / (2.0 * h);
            let denom = grad[i].abs().max(fd.abs()).max(1e-4);
            let rel = (grad[i] - fd).abs() / denom;
            assert!(
                rel < 1e-5,
                "seed {seed} coord {i}: analytic {} vs fd {fd} (rel {rel})",
                grad[i]
            );
        }
    }
}
