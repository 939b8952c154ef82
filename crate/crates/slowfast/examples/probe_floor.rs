use slowfast::fibers::FiberLinearMap;
use slowfast::manifold::{BuildOptions, ManifoldApprox};
use slowfast::systems::make_mmh;
use std::sync::Arc;

fn main() {
    for n1 in [6usize, 8, 9, 10, 12] {
        let preset = make_mmh(2.0, 1.0, 0.1).unwrap();
        let spec = preset.default_grid(0.01).unwrap();
        let m = Arc::new(
            ManifoldApprox::build(preset.system.clone(), &spec, n1, &BuildOptions::default())
                .unwrap(),
        );
        let e_eta = m.e_eta;
        let hist_eta: Vec<String> = m.residual_history.iter().map(|v| format!("{v:.2e}")).collect();
        let f = FiberLinearMap::build(m, preset.frame, 12).unwrap();
        let hist: Vec<String> = f.mu_history.iter().map(|v| format!("{v:.2e}")).collect();
        println!("N1={n1}: E_eta={e_eta:.2e} eta_hist={hist_eta:?}");
        println!("        E_phi={:.2e} phi_hist={hist:?}", f.e_phi);
    }
}
