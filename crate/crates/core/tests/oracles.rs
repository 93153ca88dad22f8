use fedepth::data::GaussianMixture;
use fedepth::decomposition::DecompositionPlan;
use fedepth::experiment::{setup, ExperimentConfig};
use fedepth::nn::{predict, Block, BlockGraph, LayerSpec, ModelWeights, SgdConfig, Shape};
use fedepth::rng::rng_for;
use fedepth::trainer::{baseline_update, mkd_update, ClientUpdateConfig, MkdConfig, StudentInit};

#[test]
fn five_rounds_improve_on_the_initial_model() {
    let mut cfg = ExperimentConfig::default();
    cfg.federation.rounds = 5;
    let s = setup(&cfg).unwrap();
    assert_eq!(s.clients.len(), 20);
    let run = s.run().unwrap();
    assert!(
        run.final_top1() > run.initial.top1,
        "{} -> {}",
        run.initial.top1,
        run.final_top1()
    );
}

#[test]
fn linear_model_separates_distant_classes() {
    let (train, test) = GaussianMixture {
        classes: 2,
        dim: 4,
        clusters_per_class: 1,
        separation: 10.0,
    }
    .generate::<f32>(400, 400, 3)
    .unwrap();
    let g = BlockGraph::new(
        Shape::new(vec![4]).unwrap(),
        vec![Block {
            layers: vec![LayerSpec::Flatten],
        }],
        vec![LayerSpec::Classifier { inputs: 4, classes: 2 }],
    )
    .unwrap();
    let w = ModelWeights::init(&g, &mut rng_for(3, &[]));
    let cfg = ClientUpdateConfig {
        epochs: 5,
        sgd: SgdConfig {
            lr: 0.1,
            ..SgdConfig::default()
        },
        ..Default::default()
    };
    let trained = baseline_update(&g, &w, &train, &cfg).unwrap().weights;
    let logits = predict(&g, &trained, &test.inputs).unwrap();
    let acc = fedepth::analysis::top1_accuracy(&logits, &test.labels).unwrap();
    assert!(acc >= 0.99, "accuracy {acc}");
}

#[test]
fn distillation_shrinks_disagreement_between_different_students() {
    let (train, _) = GaussianMixture {
        classes: 4,
        dim: 8,
        clusters_per_class: 3,
        separation: 4.0,
    }
    .generate::<f32>(1000, 4, 8)
    .unwrap();
    let g = BlockGraph::mlp(8, 32, 3, 4).unwrap();
    let w = ModelWeights::init(&g, &mut rng_for(8, &[]));
    let mkd = MkdConfig {
        init: StudentInit::Fresh,
        ..MkdConfig::default()
    };
    let cfg = ClientUpdateConfig {
        epochs: 4,
        seed: 8,
        ..Default::default()
    };
    let out = mkd_update(&g, &w, &DecompositionPlan::whole(3), &train, &cfg, &mkd).unwrap();
    let kl = &out.report.kl_by_epoch;
    assert_eq!(kl.len(), 4);
    assert!(kl[3] < kl[0], "{kl:?}");
}
