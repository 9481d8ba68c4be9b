use distillgan::autodiff::{check_layer_kind, GradCheckConfig, LAYER_KINDS};

fn sweep<E: distillgan::autodiff::Element>(cfg: GradCheckConfig) -> Vec<(&'static str, f64)> {
    LAYER_KINDS
        .iter()
        .map(|&kind| {
            let worst = (0..100u64)
                .map(|case| check_layer_kind::<E>(kind, case, cfg).unwrap().max_rel_err)
                .fold(0.0, f64::max);
            (kind, worst)
        })
        .collect()
}

#[test]
fn every_layer_kind_matches_finite_differences_f32() {
    let cfg = GradCheckConfig::f32_default();
    for (kind, worst) in sweep::<f32>(cfg) {
        println!("f32 {kind:>18}: max rel err {worst:.3e}");
        assert!(worst < cfg.tolerance, "{kind}: {worst:e}");
    }
}

#[test]
fn every_layer_kind_matches_finite_differences_f64() {
    let cfg = GradCheckConfig::f64_default();
    for (kind, worst) in sweep::<f64>(cfg) {
        println!("f64 {kind:>18}: max rel err {worst:.3e}");
        assert!(worst < cfg.tolerance, "{kind}: {worst:e}");
    }
}
