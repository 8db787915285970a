use csknet::gradcheck::{run_suite, MAX_REL_ERROR};

#[test]
fn every_op_loss_and_the_full_model_match_finite_differences() {
    let seeds: Vec<u64> = (0..10).collect();
    let report = run_suite(&seeds, &[0, 1]).unwrap();
    for c in &report.checks {
        println!("{:<42} max rel err {:.2e} over {} entries", c.name, c.max_rel_error, c.entries);
    }
    println!("suite took {:.1}s", report.seconds);
    let failed: Vec<_> = report.checks.iter().filter(|c| !c.passed()).map(|c| &c.name).collect();
    assert!(failed.is_empty(), "above {MAX_REL_ERROR}: {failed:?}");
}
