use lstmatch_core::audit::run_audit;

#[test]
fn scan_audit_seeds() {
    for seed in 0..24u64 {
        let cases = run_audit(seed, 1e-5).unwrap();
        let worst = cases
            .iter()
            .map(|c| (c.max_rel_err, c.name))
            .fold((0.0, ""), |acc, x| if x.0 > acc.0 { x } else { acc });
        println!("seed {seed:2}: worst {:.2e} ({})", worst.0, worst.1);
    }
    panic!("scan done");
}
