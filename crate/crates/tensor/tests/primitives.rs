use duett_tensor::gradcheck::{check, primitive_suite};
use duett_tensor::{Graph, Tensor};

#[test]
fn every_primitive_matches_finite_differences() {
    let results = primitive_suite(20, 11).unwrap();
    for r in &results {
        println!("{:<16} worst rel error {:.3e}", r.op, r.worst_rel_error);
        assert!(r.worst_rel_error < 1e-4, "{} failed: {}", r.op, r.worst_rel_error);
    }
    assert!(results.len() >= 20);
}

#[test]
fn matmul_sum_matches_finite_differences_tightly() {
    let a = Tensor::new(vec![3, 4], (0..12).map(|i| (i as f64 * 0.37).sin()).collect()).unwrap();
    let b = Tensor::new(vec![4, 2], (0..8).map(|i| (i as f64 * 1.3).cos()).collect()).unwrap();
    let report = check(&[a, b], 1e-5, |g: &mut Graph<f64>, v| {
        let y = g.matmul(v[0], v[1])?;
        Ok(g.sum(y))
    })
    .unwrap();
    assert!(report.rel_error < 1e-6, "{report:?}");
}
