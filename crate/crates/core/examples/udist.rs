//! Inspect the pretrained model's uncertainty regime on corrupted data.
use tta_lab::engine;
use tta_lab::model::{pretrain, MlpClassifier, PretrainConfig};
use tta_lab::objectives::{ObjectiveConfig, ObjectiveKind};
use tta_lab::scenarios::*;

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let sigma: f64 = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(0.25);
    let epochs: usize = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(60);
    let lr: f64 = args.get(3).and_then(|s| s.parse().ok()).unwrap_or(0.05);

    let (task, train) = make_source_task(8, 16, 500, sigma, 60.0, 7).unwrap();
    let mut model = MlpClassifier::new(16, &[32, 32], 8, 5).unwrap();
    let pcfg = PretrainConfig { epochs, learning_rate: lr, momentum: 0.9, batch_size: 128, seed: 11 };
    let out = pretrain(&mut model, &train, &pcfg).unwrap();
    let clean_test = sample_clean(&task, 200, 999);
    println!("sigma={sigma} epochs={epochs} lr={lr} clean_acc={:.4}", model.accuracy_on(&clean_test).unwrap());

    let spec = ScenarioSpec { mode: ScenarioMode::Standard,
        schedule: vec![CorruptionSpec { kind: CorruptionKind::AdditiveGaussian, severity: 5 }],
        outlier_ratio: 0.0, batch_size: 64, stream_length: 20, seed: 101 };
    let stream = build_stream(&task, &spec).unwrap();
    let base = engine::no_adapt_baseline(&out.theta0, &stream, ObjectiveConfig::new(ObjectiveKind::Em)).unwrap();

    let mut us: Vec<f64> = base.records.iter().flat_map(|r| r.rows.iter().map(|x| x.uncertainty)).collect();
    us.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let q = |p: f64| us[(p * (us.len() - 1) as f64) as usize];
    let above: f64 = us.iter().filter(|&&u| u > 1.0 / std::f64::consts::E).count() as f64 / us.len() as f64;
    let acc: f64 = base.records.iter().filter_map(|r| r.accuracy).sum::<f64>() / base.records.len() as f64;
    println!("sev5 acc={acc:.3} u quantiles: 10%={:.3} 50%={:.3} 90%={:.3} | frac u>1/e = {:.3}", q(0.1), q(0.5), q(0.9), above);

    // logit magnitude on corrupted data
    let b = &stream[0];
    let logits = out.theta0.logits(&b.features, b.rows).unwrap();
    let maxes: Vec<f64> = logits.chunks(8).map(|r| r.iter().cloned().fold(f64::NEG_INFINITY, f64::max)).collect();
    let mean_max = maxes.iter().sum::<f64>() / maxes.len() as f64;
    println!("mean max-logit on sev5 batch: {mean_max:.3}");
    let conf: f64 = base.records.iter().map(|r| r.mean_confidence).sum::<f64>() / base.records.len() as f64;
    println!("mean confidence on sev5: {conf:.3}");
}
