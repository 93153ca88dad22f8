use fedepth::experiment::{setup, BudgetMode, ExperimentConfig};

fn run_on(threads: usize, cfg: &ExperimentConfig) -> fedepth::experiment::RunSummary {
    let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
    pool.install(|| setup(cfg).unwrap().run().unwrap())
}

#[test]
fn thread_count_does_not_change_results() {
    let mut cfg = ExperimentConfig::default();
    cfg.budget.mode = BudgetMode::Groups;
    cfg.federation.rounds = 3;
    cfg.data.train = 1000;
    let one = run_on(1, &cfg);
    let four = run_on(4, &cfg);
    assert_eq!(one.weights, four.weights);
    assert_eq!(one.records, four.records);
}

#[test]
fn same_seed_same_run_different_seed_different_run() {
    let mut cfg = ExperimentConfig::default();
    cfg.federation.rounds = 2;
    cfg.data.train = 800;
    let a = setup(&cfg).unwrap().run().unwrap();
    let b = setup(&cfg).unwrap().run().unwrap();
    assert_eq!(a.weights, b.weights);
    cfg.experiment.seed = 1;
    let c = setup(&cfg).unwrap().run().unwrap();
    assert_ne!(a.weights, c.weights);
}
