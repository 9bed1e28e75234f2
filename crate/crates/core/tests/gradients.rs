mod common;

use common::{finite_difference_gradient, grid_aligned_problem, random_problem, relative_error};
use ndarray::{array, Array2};
use qap_core::nn::{init_model, MlpConfig, Mode};
use qap_core::quant::{QuantSpec, Rounding};

#[test]
fn analytic_gradients_match_finite_differences() {
    for seed in 0..30 {
        let p = random_problem(seed, &QuantSpec::float32());
        assert!(p.model.parameter_count() <= 200);
        let pass = p.model.forward(p.x.view(), Mode::Train).unwrap();
        let analytic = p.model.backward(&pass, &p.y).unwrap().to_vec();
        let numeric = finite_difference_gradient(&p.model, &p.x, &p.y, 1e-5);
        let mask = p.model.parameter_mask();
        for (i, (a, n)) in analytic.iter().zip(&numeric).enumerate() {
            if !mask[i] {
                assert_eq!(*a, 0.0);
                continue;
            }
            let err = relative_error(*a, *n, 1e-6);
            assert!(err < 1e-4, "seed {seed} param {i}: analytic {a} numeric {n}");
        }
    }
}

#[test]
fn clamp_only_surrogate_gradients_match_finite_differences() {
    let mut quant = QuantSpec::bits(4);
    quant.rounding = Rounding::Identity;
    for seed in 100..120 {
        let p = random_problem(seed, &quant);
        let pass = p.model.forward(p.x.view(), Mode::Train).unwrap();
        let analytic = p.model.backward(&pass, &p.y).unwrap().to_vec();
        let numeric = finite_difference_gradient(&p.model, &p.x, &p.y, 1e-6);
        for (i, (a, n)) in analytic.iter().zip(&numeric).enumerate() {
            let err = relative_error(*a, *n, 1e-5);
            assert!(err < 1e-3, "seed {seed} param {i}: analytic {a} numeric {n}");
        }
    }
}

#[test]
fn ste_gradient_equals_clamp_only_gradient_on_grid() {
    let cfg = MlpConfig {
        input_dim: 3,
        hidden_widths: vec![4, 3],
        output_dim: 2,
        use_bn: false,
        l1_lambda: 1e-3,
    };
    let mut model = init_model(&cfg, &QuantSpec::bits(6), 0).unwrap();
    // s_w = 1/8, then 1, then 1/8; s_A = 1/32 with log_scale = 0. Inputs on a
    // 1/4 grid keep every pre-activation on the activation grid.
    model.layers[0].dense.weights = array![
        [31.0, -3.0, 5.0],
        [-7.0, 12.0, 1.0],
        [2.0, -31.0, 9.0],
        [4.0, 6.0, -2.0]
    ] / 8.0;
    model.layers[1].dense.weights = array![[31.0, -4.0, 2.0, 1.0], [-3.0, 5.0, 7.0, -1.0], [2.0, 2.0, -6.0, 3.0]];
    model.layers[2].dense.weights = array![[31.0, -5.0, 4.0], [-2.0, 8.0, -31.0]] / 8.0;
    model.layers[0].dense.bias = array![1.0, -2.0, 3.0, 0.0] / 32.0;
    for l in &mut model.layers {
        if let Some(q) = &mut l.act_quant {
            q.log_scale = 0.0;
        }
    }
    let x: Array2<f64> = array![[1.0, 2.0, -1.0], [3.0, 0.0, 2.0], [-2.0, 1.0, 1.0], [4.0, -3.0, 0.0]] / 4.0;
    let y = [0, 1, 1, 0];

    let rounded = model.forward(x.view(), Mode::Train).unwrap();
    let mut surrogate = model.clone();
    surrogate.quant.rounding = Rounding::Identity;
    let clamped = surrogate.forward(x.view(), Mode::Train).unwrap();
    assert_eq!(rounded.hidden, clamped.hidden);
    assert!(rounded.hidden.iter().flatten().any(|&v| v == 63.0 / 32.0), "exercise saturation");

    let g_round = model.backward(&rounded, &y).unwrap();
    let g_clamp = surrogate.backward(&clamped, &y).unwrap();
    assert_eq!(g_round, g_clamp);
    assert!(g_round.layers.iter().any(|g| g.log_scale.is_some_and(|v| v != 0.0)));
}

#[test]
fn ste_matches_clamp_only_on_random_grid_aligned_models() {
    for seed in 0..25 {
        let p = grid_aligned_problem(seed);
        let rounded = p.model.forward(p.x.view(), Mode::Train).unwrap();
        let mut surrogate = p.model.clone();
        surrogate.quant.rounding = Rounding::Identity;
        let clamped = surrogate.forward(p.x.view(), Mode::Train).unwrap();
        assert_eq!(rounded.logits, clamped.logits, "seed {seed}: inputs not grid aligned");
        assert_eq!(
            p.model.backward(&rounded, &p.y).unwrap(),
            surrogate.backward(&clamped, &p.y).unwrap(),
            "seed {seed}"
        );
    }
}
