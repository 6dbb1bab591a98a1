use halc_core::gradcheck::{check, full_suite, TOLERANCE};
use halc_core::Tensor;

#[test]
fn every_check_in_the_suite_passes() {
    let results = full_suite(7).unwrap();
    for r in &results {
        println!("{:<40} {:.3e} ({} entries)", r.name, r.max_rel_error, r.entries);
    }
    let failed: Vec<_> = results.iter().filter(|r| !r.passed).collect();
    assert!(failed.is_empty(), "failed: {failed:?}");
    assert!(results.iter().any(|r| r.name.starts_with("tensor hallucinator")));
    assert!(results.iter().any(|r| r.name.starts_with("vector hallucinator")));
}

#[test]
fn suite_passes_for_other_seeds() {
    for seed in 0..12 {
        for r in full_suite(seed).unwrap() {
            assert!(r.max_rel_error < TOLERANCE, "seed {seed}: {r:?}");
        }
    }
}

#[test]
fn sigmoid_of_sum_by_hand() {
    let x = Tensor::from_vec(vec![0.2, -0.4, 0.9]);
    let r = check("sigmoid(sum)", &[x], |t, v| {
        let s = t.sum(v[0]);
        Ok(t.sigmoid(s))
    })
    .unwrap();
    assert!(r.passed);
    assert_eq!(r.entries, 3);
}
