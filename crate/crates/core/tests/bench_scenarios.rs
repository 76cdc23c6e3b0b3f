use splitnet::bench::{self, BenchConfig, BenchMode, Scenario};

fn cfg(s: Scenario, m: BenchMode) -> BenchConfig {
    let mut c = BenchConfig::new(s, m);
    c.iterations = 20;
    c.warmup = 2;
    c.corpus_bytes = 256 << 10;
    c.batch_bytes = 64 << 10;
    c
}

#[test]
fn echo_runs_in_every_mode() {
    for m in [BenchMode::Dma, BenchMode::Ddio, BenchMode::Baseline] {
        let r = bench::run(&cfg(Scenario::Echo, m)).unwrap();
        println!("{}", r.summary());
        assert_eq!(r.rows.len(), 5);
    }
}

#[test]
fn local_runs_every_route() {
    let r = bench::run(&cfg(Scenario::Local, BenchMode::Dma)).unwrap();
    println!("{}", r.summary());
    assert_eq!(r.rows.len(), 20);
}

#[test]
fn conn_setup_runs_in_every_mode() {
    for m in [BenchMode::Dma, BenchMode::Ddio, BenchMode::Baseline] {
        let r = bench::run(&cfg(Scenario::ConnSetup, m)).unwrap();
        println!("{}", r.summary());
    }
}

#[test]
fn wordcount_runs_in_every_mode() {
    for m in [BenchMode::Dma, BenchMode::Ddio, BenchMode::Baseline] {
        let r = bench::run(&cfg(Scenario::WordCount, m)).unwrap();
        println!("{}", r.summary());
    }
}
