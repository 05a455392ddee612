use transporter_core::concept::{module_digest, steering_sweep, train_concept, ConceptConfig, Frozen, SteerSettings};
use transporter_core::coupling::{train_coupling, CouplingConfig};
use transporter_core::flow::{train_generator, GeneratorConfig};
use transporter_core::nn::Module;
use transporter_core::toyworld::{make_world, WorldSpec};

fn short_coupling() -> CouplingConfig {
    CouplingConfig {
        iterations: 20,
        warmup: 5,
        ..CouplingConfig::default()
    }
}

#[test]
fn coupling_training_is_deterministic() {
    let world = make_world(WorldSpec::default()).unwrap();
    let (a, ra) = train_coupling(&world, &short_coupling()).unwrap();
    let (b, rb) = train_coupling(&world, &short_coupling()).unwrap();
    assert_eq!(module_digest(&a.model), module_digest(&b.model));
    assert_eq!(ra, rb);
}

#[test]
fn short_pipeline_keeps_frozen_models_and_zero_shift() {
    let world = make_world(WorldSpec::default()).unwrap();
    let mut coupling = train_coupling(&world, &short_coupling()).unwrap().0.model;
    coupling.set_trainable(false);
    let gen_cfg = GeneratorConfig {
        iterations: 100,
        ..GeneratorConfig::default()
    };
    let mut generator = train_generator(&world, &gen_cfg).unwrap().net;
    generator.set_trainable(false);
    let digests = |g: &dyn Module, c: &dyn Module| (module_digest(g), module_digest(c), module_digest(&world.vlm));
    let before = digests(&generator, &coupling);

    let frozen = Frozen {
        world: &world,
        generator: &generator,
        coupling: &coupling,
        settings: SteerSettings::default(),
    };
    let cfg = ConceptConfig {
        iterations: 30,
        ..ConceptConfig::default()
    };
    let trained = train_concept(&frozen, "hit", "miss", &cfg).unwrap();
    assert!(trained.final_loss < trained.initial_loss);
    assert!((0.0..=1.0).contains(&trained.delta));
    assert_eq!(digests(&generator, &coupling), before);

    let rows = steering_sweep(&frozen, &trained.vector, &[0.0, 1.0], &[0, 1, 2]).unwrap();
    assert_eq!(rows.len(), 6);
    assert!(rows.iter().filter(|r| r.delta == 0.0).all(|r| r.delta_omega == 0.0));
    assert!(rows.iter().all(|r| (0.0..=1.0).contains(&r.delta_omega)));
}
