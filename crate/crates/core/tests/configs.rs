use std::path::Path;

use itemkc::pipeline::{KSource, PipelineConfig};

fn load(name: &str) -> PipelineConfig {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs").join(name);
    let cfg = PipelineConfig::load(&path).unwrap();
    cfg.validate().unwrap();
    cfg
}

#[test]
fn shipped_configs_are_valid() {
    let sim = load("simulation.toml");
    assert_eq!(sim.k_source().unwrap(), KSource::Fixed(20));
    assert_eq!(sim.simulation.unwrap().repetitions, 100);
    let real = load("real-data.toml");
    assert!(matches!(real.k_source().unwrap(), KSource::Granularity(_)));
    assert!(real.data.unwrap().responses.ends_with("data/responses.csv"));
}
