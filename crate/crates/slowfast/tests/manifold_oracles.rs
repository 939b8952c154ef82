//! Manifold iteration against the presets' closed-form references.

use nalgebra::DVector;
use slowfast::grid::vector_jacobian;
use slowfast::manifold::{invariance_residual, BuildOptions, ManifoldApprox};
use slowfast::systems::{self, make_lindemann, make_mmh, make_neishtadt};

#[test]
fn mmh_residual_reaches_floor_within_twelve_iterations() {
    let preset = make_mmh(2.0, 1.0, 0.1).unwrap();
    let spec = preset.default_grid(0.01).unwrap();
    let m = ManifoldApprox::build(preset.system.clone(), &spec, 12, &BuildOptions::default())
        .unwrap();
    assert!(
        m.e_eta <= 1e-12,
        "manifold residual {} did not reach 1e-12 in 12 iterations: {:?}",
        m.e_eta,
        m.residual_history
    );
    // residual decreases over the first three refinement steps
    assert!(m.residual_history[1] < m.residual_history[0]);
    assert!(m.residual_history[2] < m.residual_history[1]);
}

#[test]
fn mmh_first_layer_matches_closed_form() {
    let (kappa, lambda, eps) = (2.0f64, 1.0f64, 0.1f64);
    let preset = make_mmh(kappa, lambda, eps).unwrap();
    let spec = preset.default_grid(0.01).unwrap();
    let m =
        ManifoldApprox::build(preset.system.clone(), &spec, 1, &BuildOptions::default()).unwrap();
    let layer = &m.eta_layers[0];
    let mut worst = 0.0f64;
    for (flat, x) in layer.valid_nodes() {
        let expect = systems::mmh::eta1(x[0], kappa, lambda, eps);
        worst = worst.max((layer.value_at(flat)[0] - expect).abs());
    }
    assert!(worst < 1e-11, "eta_1 deviates from closed form by {worst}");
    // frozen spot value: eta_1(1.5) = 1.97612e-3
    let x = DVector::from_vec(vec![1.5]);
    let got = layer.eval(&x).unwrap()[0];
    assert!((got - 1.97612e-3).abs() < 1e-8);
}

#[test]
fn mmh_first_layer_is_order_eps() {
    let (kappa, lambda) = (2.0, 1.0);
    for &eps in &[0.1, 0.05, 0.025] {
        let preset = make_mmh(kappa, lambda, eps).unwrap();
        let spec = preset.default_grid(0.01).unwrap();
        let m = ManifoldApprox::build(preset.system.clone(), &spec, 1, &BuildOptions::default())
            .unwrap();
        // sup |eta_1| <= C eps with C from the closed form's x-profile
        let c = 2.0 * kappa * lambda * 3.0 / (2.5f64).powi(4);
        assert!(m.eta_layers[0].sup_norm() <= c * eps);
    }
}

#[test]
fn lindemann_first_graph_matches_closed_form() {
    let eps = 0.1f64;
    let preset = make_lindemann(eps).unwrap();
    let spec = preset.grid(vec![0.4], vec![2.2], 0.002).unwrap();
    let m =
        ManifoldApprox::build(preset.system.clone(), &spec, 1, &BuildOptions::default()).unwrap();
    let total = m.total_graph();
    let mut worst = 0.0f64;
    for (flat, x) in total.valid_nodes() {
        if x[0] < 0.5 || x[0] > 2.0 {
            continue;
        }
        let expect = systems::lindemann::eta_first(x[0], eps);
        worst = worst.max((total.value_at(flat)[0] - expect).abs());
    }
    assert!(worst < 1e-10, "eta0 + eta_1 deviates from closed form by {worst}");
}

#[test]
fn lindemann_rho1_matches_closed_form_and_improves_near_origin() {
    let eps = 0.1f64;
    let preset = make_lindemann(eps).unwrap();
    let spec = preset.grid(vec![0.0], vec![2.2], 0.002).unwrap();
    let m =
        ManifoldApprox::build(preset.system.clone(), &spec, 1, &BuildOptions::default()).unwrap();
    let rho = invariance_residual(
        preset.system.as_ref(),
        &m.eta0,
        &m.deta0,
        &m.eta_cum,
        &m.deta_cum,
    );
    let mut worst = 0.0f64;
    let mut innermost: Option<(f64, f64)> = None;
    for (flat, x) in rho.valid_nodes() {
        let got = rho.value_at(flat)[0];
        if x[0] >= 0.5 && x[0] <= 2.0 {
            worst = worst.max((got - systems::lindemann::rho1(x[0], eps)).abs());
        }
        match innermost {
            Some((xi, _)) if x[0] >= xi => {}
            _ => innermost = Some((x[0], got)),
        }
    }
    assert!(worst < 1e-10, "rho_1 deviates from closed form by {worst}");
    // near-origin nodes are masked (not fast), and the residual improves
    // toward the mask boundary
    assert!(m.eta0.masked_count() > 0, "expected masked nodes near x = 0");
    let (xi, rin) = innermost.unwrap();
    assert!(xi < 0.2, "mask boundary unexpectedly far out: {xi}");
    assert!(rin.abs() < rho.sup_norm());
}

#[test]
fn neishtadt_layers_match_example_closed_forms() {
    // Layer numbering: the example's first layer is the critical graph, so
    // computed eta0 = oracle(1) and computed layer k = oracle(k + 1).
    for &eps in &[1.0 / 3.0, 0.21] {
        let preset = make_neishtadt(eps).unwrap();
        let spec = preset.default_grid(0.01).unwrap();
        let m = ManifoldApprox::build(preset.system.clone(), &spec, 4, &BuildOptions::default())
            .unwrap();

        let mut worst_eta = vec![0.0f64; 5];
        for (flat, x) in m.eta0.valid_nodes() {
            let expect = systems::neishtadt::oracle_eta(1, x[0], eps);
            worst_eta[0] = worst_eta[0].max((m.eta0.value_at(flat) - expect).norm());
        }
        for (k, layer) in m.eta_layers.iter().enumerate() {
            for (flat, x) in layer.valid_nodes() {
                let expect = systems::neishtadt::oracle_eta(k + 2, x[0], eps);
                worst_eta[k + 1] =
                    worst_eta[k + 1].max((layer.value_at(flat) - expect).norm());
            }
        }
        println!("eps = {eps}: layer errors vs closed forms: {worst_eta:?}");
        for (k, w) in worst_eta.iter().enumerate() {
            assert!(*w < 1e-12, "eps = {eps}, layer {k}: error {w} vs oracle");
        }

        // residuals after each depth
        let sys = preset.system.as_ref();
        let mut cum = m.eta0.map(|v| v.zero_like_vec());
        for (k, layer) in m.eta_layers.iter().enumerate() {
            cum = cum.zip_map(layer, |a, b| a + b);
            let dcum = vector_jacobian(&cum).unwrap();
            let rho = invariance_residual(sys, &m.eta0, &m.deta0, &cum, &dcum);
            let mut worst = 0.0f64;
            for (flat, x) in rho.valid_nodes() {
                let expect = systems::neishtadt::oracle_rho(k + 2, x[0], eps);
                worst = worst.max((rho.value_at(flat) - expect).norm());
            }
            assert!(worst < 1e-12, "eps = {eps}, rho after layer {k}: error {worst}");
        }
    }
}

trait ZeroLikeVec {
    fn zero_like_vec(&self) -> Self;
}

impl ZeroLikeVec for DVector<f64> {
    fn zero_like_vec(&self) -> Self {
        DVector::zeros(self.len())
    }
}
