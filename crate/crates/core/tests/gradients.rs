use refcat::dit::ModelConfig;
use refcat::train::{gradcheck, GRADCHECK_TOL};

#[test]
fn toy_model_gradients_match_finite_differences() {
    let report = gradcheck(&ModelConfig::gradcheck(), 11).unwrap();
    for g in report.base.iter().chain(&report.lora) {
        println!(
            "{:<28} n={:<5} |g|max={:.3e} abs={:.3e} rel={:.3e}",
            g.name, g.numel, g.max_abs_grad, g.max_abs_err, g.max_rel_err
        );
    }
    println!("elapsed {:?}", report.elapsed);
    assert!(report.passed, "{:?}", report.ensure());
    assert!(report
        .base
        .iter()
        .chain(&report.lora)
        .all(|g| g.max_rel_err < GRADCHECK_TOL));
    assert_eq!(report.base_groups_in_lora_grads, 0);
}
