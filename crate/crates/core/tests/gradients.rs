mod common;

use common::{grad_check_step, gradient_suite, uniform, GRAD_TOL};
use u2net::netarch::{DomainSpec, Mode, ModelState, NetworkConfig};
use u2net::Tape;

#[test]
fn primitives_match_finite_differences() {
    for seed in [1, 2] {
        for (name, err) in gradient_suite(seed) {
            assert!(err < GRAD_TOL, "{name}: relative error {err:e} (seed {seed})");
        }
    }
}

fn tiny_domain(id: &str) -> DomainSpec {
    DomainSpec {
        id: id.into(),
        modalities: 2,
        classes: 3,
        median_spacing: [1.0; 3],
        patch_shape: [8, 8, 8],
        levels: 2,
        class_names: Vec::new(),
    }
}

#[test]
fn whole_network_input_gradient() {
    for mode in [Mode::Universal, Mode::Shared, Mode::Independent] {
        let config = NetworkConfig::new(mode, 2, 2).with_seed(3);
        let model = ModelState::<f64>::build(config, &[tiny_domain("a"), tiny_domain("b")]).unwrap();
        let x = uniform(&[2, 8, 8, 8], -1.0, 1.0, 9);
        let err = grad_check_step(4, 1e-5, &[x], &|t: &mut Tape<f64>, v| {
            model.forward(t, "b", v[0]).unwrap().0
        });
        assert!(err < GRAD_TOL, "{mode}: relative error {err:e}");
    }
}
