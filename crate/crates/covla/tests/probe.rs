// temporary tuning probe; removed once acceptance settings are pinned

use covla::data::{generate_dataset, DatasetSpec, Split};
use covla::eval;
use covla::model::{build_model, ModelDims, Variant};
use covla::train::{train, TrainConfig};

#[test]
#[ignore]
fn probe_everything() {
    let dims = ModelDims::default();

    // ablation over 5 seeds
    let ds = generate_dataset(&DatasetSpec::default()).unwrap().dataset;
    for variant in Variant::ALL {
        let mut f1s = Vec::new();
        for seed in [1u64, 2, 3, 4, 5] {
            let config = TrainConfig { seed, ..TrainConfig::default() };
            let outcome = train(build_model(variant, &dims, seed), &ds, &config).unwrap();
            let report = eval::evaluate(&outcome.model, &ds.split(Split::Test)).unwrap();
            f1s.push(report.macro_f1);
        }
        let mean = f1s.iter().sum::<f64>() / f1s.len() as f64;
        println!(
            "{}: mean_f1={:.4} per-seed={:?}",
            variant,
            mean,
            f1s.iter().map(|v| (v * 1e4).round() / 1e4).collect::<Vec<_>>()
        );
    }

    // robustness with the seed-2 model (matches the acceptance test)
    let config = TrainConfig { seed: 2, ..TrainConfig::default() };
    let outcome = train(build_model(Variant::Full, &dims, 2), &ds, &config).unwrap();
    let test = ds.split(Split::Test);
    let clean = eval::evaluate(&outcome.model, &test).unwrap();
    let curves = eval::robustness_sweep(&outcome.model, &test, &[0.0, 0.5, 1.0, 2.0], &[0.0, 0.3, 0.6, 0.9], 7).unwrap();
    println!("clean={:.4}", clean.macro_f1);
    print!("{}", curves.to_csv());

    // easy-spec learnability
    let easy_spec = DatasetSpec {
        ambiguity_rate: 0.0,
        dominance: 0.0,
        conflict_rate: 0.0,
        ..DatasetSpec::default()
    };
    let easy = generate_dataset(&easy_spec).unwrap().dataset;
    let config = TrainConfig { seed: 1, ..TrainConfig::default() };
    let outcome = train(build_model(Variant::Full, &dims, 1), &easy, &config).unwrap();
    let report = eval::evaluate(&outcome.model, &easy.split(Split::Test)).unwrap();
    println!("easy: macro_f1={:.4}", report.macro_f1);
}
