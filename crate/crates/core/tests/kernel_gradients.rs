//! Every primitive kernel against the central finite-difference oracle,
//! 20+ random shape/seed draws each, f64, rel. error < 1e-4.

use ftvit_core::gradcheck::kernel_checks;

#[test]
fn all_kernels_match_finite_differences() {
    let reports = kernel_checks(20);
    assert!(reports.len() >= 15);
    for r in &reports {
        println!("{:<32} seeds={:<3} max_rel_err={:.3e}", r.kernel, r.seeds, r.max_rel_err);
        assert!(
            r.max_rel_err < 1e-4,
            "{} exceeded tolerance: {:.3e}",
            r.kernel,
            r.max_rel_err
        );
    }
}
