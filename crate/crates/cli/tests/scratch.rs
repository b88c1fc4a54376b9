// temporary diagnostics; removed before ship
use viscop_core::data::{self, DataConfig, DomainTransform, QuestionFamily};
use viscop_core::model::VlmModel;
use viscop_core::trainer::{self, TrainConfig};
use viscop_cli::ExperimentConfig;

fn acc_on(model: &VlmModel, b: &data::Benchmark) -> f64 {
    trainer::evaluate_accuracy(model, b).unwrap()
}

#[test]
#[ignore]
fn single_family_learnability() {
    run_family(QuestionFamily::ActorColor, "actor-color");
    run_family(QuestionFamily::EndCell, "end-cell");
    run_family(QuestionFamily::TouchedShape, "touched-shape");
}

fn run_family(FAMILY: QuestionFamily, label: &str) {
    println!("=== {label} ===");
    let cfg = ExperimentConfig::default();
    let vocab = data::build_vocab(cfg.data.grid);
    let dc = DataConfig {
        seed: 0,
        ..cfg.data.clone()
    };
    let bench = data::make_benchmark(
        640,
        DomainTransform::Identity,
        FAMILY,
        &dc,
        &vocab,
        "source",
    )
    .unwrap();
    let mut mc = cfg.model_config();
    mc.decoder.vocab_size = vocab.len();
    let mut model = VlmModel::init_base(&mc, vocab, 0).unwrap();
    for id in model.store.ids().collect::<Vec<_>>() {
        model.store.get_mut(id).set_requires_grad(true);
    }
    let pool: Vec<&data::QASample> = bench.train().collect();
    for round in 0..4 {
        let tc = TrainConfig {
            base_lr: 3e-3,
            ve_lr_scale: 1.0,
            epochs: 5,
            batch_size: 8,
            seed: round,
            ..TrainConfig::default()
        };
        let rep = trainer::train(&mut model, &pool, &tc).unwrap();
        // train-split accuracy = memorization check, eval = generalization
        let train_acc = {
            let mut correct = 0;
            for s in pool.iter().take(100) {
                if model.predict(s, 4).unwrap() == s.answer {
                    correct += 1;
                }
            }
            correct as f64 / 100.0
        };
        println!(
            "round {round}: loss {:.4} train_acc {train_acc:.3} eval_acc {:.3}",
            rep.loss_curve.last().unwrap(),
            acc_on(&model, &bench)
        );
    }
}
