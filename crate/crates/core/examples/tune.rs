//! Scratch harness for picking the shipped default learning rates.
use tta_lab::engine::{self, AdaptConfig, AdaptState, TrajectoryRecord};
use tta_lab::model::{pretrain, MlpClassifier, PretrainConfig};
use tta_lab::objectives::{ObjectiveConfig, ObjectiveKind};
use tta_lab::scenarios::*;

fn tail_acc(recs: &[TrajectoryRecord], window: usize) -> f64 {
    let t: Vec<f64> = recs.iter().rev().take(window).filter_map(|r| r.accuracy).collect();
    t.iter().sum::<f64>() / t.len() as f64
}

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let sigma: f64 = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(0.15);
    let etas: Vec<f64> = args.get(2).map(|s| s.split(',').map(|x| x.parse().unwrap()).collect())
        .unwrap_or_else(|| vec![0.1, 0.2, 0.3]);
    let epochs: usize = args.get(3).and_then(|s| s.parse().ok()).unwrap_or(60);
    let plr: f64 = args.get(4).and_then(|s| s.parse().ok()).unwrap_or(0.05);
    let kind = match args.get(5).map(|s| s.as_str()) {
        Some("dropout") => CorruptionKind::FeatureDropout,
        Some("affine") => CorruptionKind::AffineShift,
        _ => CorruptionKind::AdditiveGaussian,
    };

    let (task, train) = make_source_task(8, 16, 500, sigma, 60.0, 7).unwrap();
    let mut model = MlpClassifier::new(16, &[32, 32], 8, 5).unwrap();
    let pcfg = PretrainConfig { epochs, learning_rate: plr, momentum: 0.9, batch_size: 128, seed: 11 };
    let out = pretrain(&mut model, &train, &pcfg).unwrap();
    let clean_test = sample_clean(&task, 200, 999);
    println!("sigma={sigma} train_acc={:.4} clean_test_acc={:.4}", out.train_accuracy, model.accuracy_on(&clean_test).unwrap());

    let theta0 = out.theta0;
    let seeds: Vec<u64> = (100..110).collect();
    let ln_k = (8f64).ln();

    for &eta in &etas {
        let mut em_collapse = 0; let mut come_ok = 0; let mut filt_collapse = 0;
        let mut em_conf = 0.0; let mut come_conf = 0.0;
        let mut base_accs = vec![]; let mut em_accs = vec![]; let mut come_accs = vec![];
        for &seed in &seeds {
            let spec = ScenarioSpec { mode: ScenarioMode::Standard,
                schedule: vec![CorruptionSpec { kind, severity: 5 }],
                outlier_ratio: 0.0, batch_size: 64, stream_length: 300, seed };
            let stream = build_stream(&task, &spec).unwrap();
            let base = engine::no_adapt_baseline(&theta0, &stream, ObjectiveConfig::new(ObjectiveKind::Em)).unwrap();
            let base_tail = tail_acc(&base.records, 30);
            base_accs.push(base_tail);

            let mk = |kind, filter: Option<f64>| AdaptConfig {
                objective: ObjectiveConfig::new(kind), learning_rate: eta, momentum: 0.9,
                entropy_filter: filter, episodic_reset: false, seed: 1 };

            let em = engine::run(AdaptState::new(theta0.clone(), theta0.clone()), &stream, &mk(ObjectiveKind::Em, None)).unwrap();
            let em_tail = tail_acc(&em.records, 30);
            let em_min_ent = em.records.iter().map(|r| r.mean_entropy).fold(f64::INFINITY, f64::min);
            if em_min_ent < 0.01 * ln_k && em_tail < base_tail { em_collapse += 1; }
            em_accs.push(em_tail);
            em_conf += em.records.iter().map(|r| r.mean_confidence).sum::<f64>() / em.records.len() as f64 / 10.0;

            let come = engine::run(AdaptState::new(theta0.clone(), theta0.clone()), &stream, &mk(ObjectiveKind::Come, None)).unwrap();
            let come_tail = tail_acc(&come.records, 30);
            if come_tail >= base_tail { come_ok += 1; }
            come_accs.push(come_tail);
            come_conf += come.records.iter().map(|r| r.mean_confidence).sum::<f64>() / come.records.len() as f64 / 10.0;

            let filt = engine::run(AdaptState::new(theta0.clone(), theta0.clone()), &stream, &mk(ObjectiveKind::Em, Some(0.4 * ln_k))).unwrap();
            let f_tail = tail_acc(&filt.records, 30);
            let f_min_ent = filt.records.iter().map(|r| r.mean_entropy).fold(f64::INFINITY, f64::min);
            if f_min_ent < 0.01 * ln_k && f_tail < base_tail { filt_collapse += 1; }
        }
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
        println!("eta={eta}: em_collapse={em_collapse}/10 come_ok={come_ok}/10 filt_collapse={filt_collapse}/10 | base={:.3} em={:.3} come={:.3} | conf em={:.3} come={:.3}",
            mean(&base_accs), mean(&em_accs), mean(&come_accs), em_conf, come_conf);
    }
}
