//! Manifest planning through training and evaluation, with a stand-in
//! encoder in place of the real exporter.

use std::collections::hash_map::DefaultHasher;
use std::hash::{Hash, Hasher};

use promptlens_core::dnet::DisentangleNet;
use promptlens_core::embstore::{read_embedding_set, write_embedding_set, EmbeddingSet, RowMeta};
use promptlens_core::evalkit::{
    export_report, isd_probe_manifest, probe_eval, probe_train, prompt_sweep, template_manifest, zero_shot_eval,
    EvalReport, ProbeConfig, ReportFormat, Template,
};
use promptlens_core::optim::AdamHyper;
use promptlens_core::promptgen::{plan_manifest, AugmentCombo, ManifestRow, Vocabulary};
use promptlens_core::trainer::{train, StopReason, TrainConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const DIM: usize = 12;

fn centre(label: i64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(100 + label as u64);
    (0..DIM).map(|_| rng.random_range(-1.0..1.0)).collect()
}

/// Class direction plus a text-dependent offset, the nuisance the network
/// is meant to remove.
fn encode(rows: &[ManifestRow], offset: f64) -> EmbeddingSet {
    let mut data = Vec::new();
    let mut meta = Vec::new();
    for r in rows {
        let mut h = DefaultHasher::new();
        r.text.hash(&mut h);
        let mut rng = ChaCha8Rng::seed_from_u64(h.finish());
        data.extend(centre(r.label).iter().map(|&c| (c + rng.random_range(-offset..offset)) as f32));
        meta.push(
            RowMeta::new(r.id.clone(), r.label)
                .with_class_name(r.class_name.clone())
                .with_text(r.text.clone()),
        );
    }
    EmbeddingSet::new(DIM, data, meta).unwrap()
}

fn images(per_class: usize, classes: usize) -> EmbeddingSet {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut data = Vec::new();
    let mut meta = Vec::new();
    for label in 0..classes as i64 {
        for k in 0..per_class {
            data.extend(centre(label).iter().map(|&c| (c + rng.random_range(-0.6..0.6)) as f32));
            meta.push(RowMeta::new(format!("img{label}-{k}"), label));
        }
    }
    EmbeddingSet::new(DIM, data, meta).unwrap()
}

#[test]
fn plan_train_and_evaluate() {
    let dir = tempfile::tempdir().unwrap();
    let vocab = Vocabulary::builtin();
    let classes: Vec<String> = ["dog", "horse", "house", "guitar"].iter().map(|s| s.to_string()).collect();
    let combo: AugmentCombo = "ISD+SSO".parse().unwrap();
    let plan = plan_manifest(&vocab, &classes, combo).unwrap();
    assert_eq!(plan.len(), 4 * 26);

    let bank_path = dir.path().join("bank.clapemb");
    write_embedding_set(&encode(&plan, 0.5), &bank_path).unwrap();
    let bank = read_embedding_set(&bank_path).unwrap();

    let cfg = TrainConfig {
        adam: AdamHyper::with_lr(1e-3),
        combo,
        max_steps: 400,
        seeds: vec![0],
        ..TrainConfig::default()
    };
    let (net, log) = train(&bank, &cfg, 0).unwrap();
    let summary = log.summary();
    assert!(summary.final_loss.unwrap() < summary.initial_loss);
    assert_eq!(log.checkpoints.len() as u64, summary.stop_step.div_ceil(50));
    if summary.stop_reason == StopReason::MaxSteps {
        assert_eq!(summary.stop_step, 400);
    }

    // Same seed, same weights.
    let (again, _) = train(&bank, &cfg, 0).unwrap();
    assert_eq!(again.to_bytes().unwrap(), net.to_bytes().unwrap());

    let imgs = images(10, classes.len());
    let sets: Vec<(Template, EmbeddingSet)> = Template::ALL
        .into_iter()
        .map(|t| (t, encode(&template_manifest(&classes, t), 0.5)))
        .collect();
    let pairs: Vec<(Template, &EmbeddingSet)> = sets.iter().map(|(t, s)| (*t, s)).collect();
    let raw = prompt_sweep(None, &imgs, &pairs, true).unwrap();
    let trained = prompt_sweep(Some(&net), &imgs, &pairs, true).unwrap();
    for v in raw.values().into_iter().chain(trained.values()) {
        assert!((0.0..=100.0).contains(&v));
    }

    // An untrained network reproduces the raw baseline exactly.
    let fresh = DisentangleNet::init(net.config().clone()).unwrap();
    for (_, s) in &pairs {
        assert_eq!(
            zero_shot_eval(Some(&fresh), &imgs, s, true).unwrap(),
            zero_shot_eval(None, &imgs, s, true).unwrap()
        );
    }

    let probe_cfg = ProbeConfig {
        max_epochs: 200,
        ..ProbeConfig::default()
    };
    let (lin_c_clf, _) = probe_train(pairs[0].1, Some(&net), &probe_cfg).unwrap();
    let lin_c = probe_eval(&lin_c_clf, Some(&net), &imgs).unwrap();
    let isd = encode(&isd_probe_manifest(&vocab, &classes), 0.5);
    assert_eq!(isd.len(), classes.len() * 13);
    let (lin_isd_clf, log) = probe_train(&isd, Some(&net), &probe_cfg).unwrap();
    assert!(!log.epoch_losses.is_empty());
    let lin_isd = probe_eval(&lin_isd_clf, Some(&net), &imgs).unwrap();

    let report = EvalReport::new("toy", trained, Some(lin_c), Some(lin_isd)).with_probe(probe_cfg);
    assert_eq!(report.delta_isd, Some(lin_isd - trained.c));
    let json = dir.path().join("report.json");
    export_report(&report, &json, ReportFormat::Json).unwrap();
    let back: EvalReport = serde_json::from_slice(&std::fs::read(&json).unwrap()).unwrap();
    assert_eq!(back, report);
    let csv = dir.path().join("report.csv");
    export_report(&report, &csv, ReportFormat::from_path(&csv)).unwrap();
    assert_eq!(std::fs::read_to_string(&csv).unwrap().lines().count(), 2);
}
