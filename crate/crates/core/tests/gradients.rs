//! Every loss and layer against central differences.

use cogcas_core::gradcheck::run_suite;

#[test]
fn losses_and_layers_match_finite_differences() {
    let results = run_suite(100, 5).unwrap();
    assert!(results.len() >= 15);
    for r in &results {
        assert!(r.worst < 1e-5, "{}: worst relative error {:e}", r.name, r.worst);
    }
}
