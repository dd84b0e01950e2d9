mod support {
    pub mod gradcheck;
}

use support::gradcheck::{run_all, MAX_REL_ERR};

#[test]
fn every_op_matches_central_differences() {
    let mut failures = Vec::new();
    for (name, worst) in run_all(7) {
        println!("{name:>18}: {worst:.3e}");
        if worst >= MAX_REL_ERR {
            failures.push(format!("{name}: {worst:.3e}"));
        }
    }
    assert!(failures.is_empty(), "gradient check failures: {failures:?}");
}
