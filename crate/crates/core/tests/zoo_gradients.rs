mod common;

use common::{finite_difference, random_inputs, small_networks};
use transfer_risk::matcore::Matrix;
use transfer_risk::zoo::{LayerParams, NetworkDescriptor, TrainedModel, TrainingMeta};

#[test]
fn input_gradient_matches_central_differences() {
    for (k, d) in small_networks().into_iter().enumerate() {
        let model = TrainedModel::initialized(d);
        let n_in = model.descriptor().input_shape().len();
        let x = random_inputs(4, n_in, 100 + k as u64);
        let labels: Vec<usize> = (0..4).map(|i| i % model.descriptor().classes()).collect();
        let analytic = model.input_gradient(&x, &labels).unwrap();
        let numeric = finite_difference(&model, &x, &labels, 1e-4);
        let err = analytic.max_abs_diff(&numeric);
        assert!(err <= 1e-4, "{}: max abs error {err}", model.id());
    }
}

#[test]
fn zero_weight_network_has_zero_input_gradient() {
    // With all weights zero the logits equal the final bias, whatever the
    // input, so the loss is flat in x.
    let d = NetworkDescriptor::mlp("z", 3, &[4], 3, 0).unwrap();
    let params = vec![
        Some(LayerParams {
            weight: Matrix::zeros(4, 3),
            bias: vec![0.1; 4],
        }),
        None,
        Some(LayerParams {
            weight: Matrix::zeros(3, 4),
            bias: vec![0.5, -0.2, 0.0],
        }),
    ];
    // Dense weights are (outputs, inputs).
    let model = TrainedModel::from_parts(d, params, TrainingMeta::default()).unwrap();
    let x = random_inputs(3, 3, 1);
    let g = model.input_gradient(&x, &[0, 1, 2]).unwrap();
    assert!(g.data().iter().all(|&v| v == 0.0));

    // Softmax of the bias gives the loss in closed form.
    let z = [0.5f64, -0.2, 0.0];
    let lse = z.iter().map(|v| v.exp()).sum::<f64>().ln();
    let loss = model.loss(&x, &[0, 1, 2]).unwrap();
    for (i, l) in loss.iter().enumerate() {
        assert!((l - (lse - z[i])).abs() <= 1e-12);
    }
}

#[test]
fn batching_does_not_change_rows() {
    for d in small_networks() {
        let model = TrainedModel::initialized(d);
        let n_in = model.descriptor().input_shape().len();
        let x = random_inputs(5, n_in, 9);
        let labels: Vec<usize> = (0..5).map(|i| i % model.descriptor().classes()).collect();
        let all = model.logits(&x).unwrap();
        let grads = model.input_gradient(&x, &labels).unwrap();
        for i in 0..5 {
            let xi = x.select_rows(&[i]).unwrap();
            assert_eq!(model.logits(&xi).unwrap().row(0), all.row(i));
            assert_eq!(model.input_gradient(&xi, &labels[i..=i]).unwrap().row(0), grads.row(i));
        }
    }
}
