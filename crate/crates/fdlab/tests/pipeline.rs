//! End-to-end plumbing at toy scale: a small federation with planted
//! probes, both membership attacks, and the evasion scorers. Statistical
//! power is left to the acceptance suite; these tests pin structure,
//! determinism, and the surrogate-score contracts.

use std::collections::{HashMap, HashSet};

use fdlab::attacks::{
    coop_select_references, distill_reference_models, distill_shadow_model, make_neighbors,
    run_coop_mia, run_distill_mia, run_ldia, withheld_rows, AttackError, CoopConfig,
    DistillLiraConfig, ShadowConfig, TargetScorer,
};
use fdlab::data::{
    dirichlet_partition, make_eval_split, split_train_public, synth_gaussian_mixture, PlantKind,
    PublicPool,
};
use fdlab::fdsim::{ClientTrainConfig, FdConfig, Federation, Framework, ModelArch, ShareKind};
use fdlab::metrics::roc_curve;
use fdlab::nn::Activation;
use fdlab::rng::{streams, StreamRng};

const PROBES_PER_SIDE: usize = 8;

struct Scene {
    fed: Federation,
    neighbor_map: HashMap<usize, Vec<usize>>,
}

/// Federation of 3 clients on separable blobs, with client 0's membership
/// probes (and noisy neighbor copies) planted into the public pool.
fn attack_scene(seed: u64, neighbor_noise: f64) -> Scene {
    let ds = synth_gaussian_mixture(3, 6, 900, 2.5, seed).unwrap();
    let (rest, test) = split_train_public(&ds, 0.8, false, seed).unwrap();
    let (train, public) = split_train_public(&rest, 0.75, false, seed + 1).unwrap();
    let shards = dirichlet_partition(&train, 3, 1.0, seed + 2).unwrap();

    let mut pool = PublicPool::from_dataset(&public);
    let eval = make_eval_split(&shards[0], &train, &test, PROBES_PER_SIDE, false, seed + 3).unwrap();
    let mut neighbor_map: HashMap<usize, Vec<usize>> = HashMap::new();
    let mut noise = StreamRng::new(seed, streams::NEIGHBOR_NOISE);
    let train_labels = train.labels().unwrap().to_vec();
    let test_labels = test.labels().unwrap().to_vec();

    let mut plant_with_neighbors = |pool: &mut PublicPool,
                                    x: Vec<f64>,
                                    label: usize,
                                    is_member: bool,
                                    origin: usize| {
        let probe_row = pool.plant(&x, 0, label, is_member, origin, PlantKind::Probe).unwrap();
        let xv = ndarray::Array1::from(x);
        let mut rows = Vec::new();
        for n in make_neighbors(xv.view(), 2, neighbor_noise, 0.7, &mut noise) {
            rows.push(
                pool.plant(&n, 0, label, is_member, origin, PlantKind::Neighbor { of_pool_row: probe_row })
                    .unwrap(),
            );
        }
        neighbor_map.insert(probe_row, rows);
    };

    for &r in &eval.members {
        plant_with_neighbors(&mut pool, train.features().row(r).to_vec(), train_labels[r], true, r);
    }
    for &r in &eval.non_members {
        plant_with_neighbors(&mut pool, test.features().row(r).to_vec(), test_labels[r], false, r);
    }

    let mut cfg = FdConfig::for_framework(Framework::FedMd, 3);
    cfg.rounds = 1;
    cfg.round_public_count = 120;
    cfg.first_round_epochs = 12;
    cfg.distill_epochs = 2;
    let mut fed = Federation::new(
        cfg,
        train,
        pool,
        test,
        shards,
        &ModelArch { hidden: vec![16], activation: Activation::Relu },
        ClientTrainConfig { lr: 0.1, batch_size: 16, dp: None },
        seed,
    )
    .unwrap();
    fed.run().unwrap();
    Scene { fed, neighbor_map }
}

fn wide_open() -> CoopConfig {
    CoopConfig { beta: 1e9, symmetric: false }
}

#[test]
fn coop_attack_produces_scorable_verdicts() {
    let scene = attack_scene(11, 0.5);
    let record = &scene.fed.records()[0];
    let pool = scene.fed.pool();
    let out = run_coop_mia(
        record,
        pool,
        ShareKind::Logits,
        0,
        &wide_open(),
        &TargetScorer::Direct,
        &HashSet::new(),
    )
    .unwrap();
    assert_eq!(out.references, vec![1, 2]);
    assert_eq!(out.verdicts.len(), 2 * PROBES_PER_SIDE);
    assert_eq!(out.verdicts.iter().filter(|v| v.is_member).count(), PROBES_PER_SIDE);
    for v in &out.verdicts {
        assert!((0.0..=1.0).contains(&v.lambda));
        assert_eq!(v.client, 0);
    }
    let roc = roc_curve(&out.verdicts).unwrap();
    assert!((0.0..=1.0).contains(&roc.auc));

    // same inputs, same verdicts, bit for bit
    let again = run_coop_mia(
        record,
        pool,
        ShareKind::Logits,
        0,
        &wide_open(),
        &TargetScorer::Direct,
        &HashSet::new(),
    )
    .unwrap();
    let lambdas: Vec<f64> = out.verdicts.iter().map(|v| v.lambda).collect();
    let lambdas2: Vec<f64> = again.verdicts.iter().map(|v| v.lambda).collect();
    assert_eq!(lambdas, lambdas2);
}

#[test]
fn coop_without_similar_clients_reports_no_references() {
    let scene = attack_scene(12, 0.5);
    let record = &scene.fed.records()[0];
    let err = run_coop_mia(
        record,
        scene.fed.pool(),
        ShareKind::Logits,
        0,
        &CoopConfig { beta: 0.0, symmetric: false },
        &TargetScorer::Direct,
        &HashSet::new(),
    )
    .unwrap_err();
    assert!(matches!(err, AttackError::NoUsableReferences { candidates: 0 }));
}

#[test]
fn reference_selection_is_stable_across_calls() {
    let scene = attack_scene(13, 0.5);
    let record = &scene.fed.records()[0];
    let estimates =
        fdlab::attacks::client_label_estimates(record, scene.fed.pool(), ShareKind::Logits).unwrap();
    let a = coop_select_references(&estimates, 1, &wide_open()).unwrap();
    let b = coop_select_references(&estimates, 1, &wide_open()).unwrap();
    assert_eq!(a, b);
    assert!(!a.contains(&1));
}

#[test]
fn distilled_references_never_see_planted_rows() {
    let scene = attack_scene(14, 0.5);
    let record = &scene.fed.records()[0];
    let pool = scene.fed.pool();
    let cfg = DistillLiraConfig {
        reference_models: 3,
        subset_fraction: 0.8,
        epochs: 4,
        lr: 0.1,
        batch_size: 16,
        arch: ModelArch { hidden: vec![16], activation: Activation::Relu },
        seed: 99,
    };
    let ensemble = distill_reference_models(record, pool, ShareKind::Logits, 0, &cfg).unwrap();
    assert_eq!(ensemble.models.len(), 3);
    let planted = pool.planted_rows();
    for subset in &ensemble.subsets {
        assert!(!subset.is_empty());
        for row in subset {
            assert!(!planted.contains(row), "student trained on planted row {row}");
            assert!(record.selection.binary_search(row).is_ok());
        }
    }
    // students differ (different subsets, different inits)
    assert_ne!(ensemble.subsets[0], ensemble.subsets[1]);

    let verdicts = run_distill_mia(
        record,
        pool,
        ShareKind::Logits,
        0,
        &ensemble.models,
        &TargetScorer::Direct,
        &HashSet::new(),
    )
    .unwrap();
    assert_eq!(verdicts.len(), 2 * PROBES_PER_SIDE);

    // a prefix of the ensemble is a valid smaller ensemble
    let fewer = run_distill_mia(
        record,
        pool,
        ShareKind::Logits,
        0,
        &ensemble.models[..2],
        &TargetScorer::Direct,
        &HashSet::new(),
    )
    .unwrap();
    assert_eq!(fewer.len(), 2 * PROBES_PER_SIDE);
}

/// Spearman rank correlation with average ranks on ties.
fn spearman(a: &[f64], b: &[f64]) -> f64 {
    fn ranks(xs: &[f64]) -> Vec<f64> {
        let mut idx: Vec<usize> = (0..xs.len()).collect();
        idx.sort_by(|&i, &j| xs[i].partial_cmp(&xs[j]).unwrap());
        let mut out = vec![0.0; xs.len()];
        let mut i = 0;
        while i < idx.len() {
            let mut j = i;
            while j + 1 < idx.len() && xs[idx[j + 1]] == xs[idx[i]] {
                j += 1;
            }
            let avg = (i + j) as f64 / 2.0 + 1.0;
            for &k in &idx[i..=j] {
                out[k] = avg;
            }
            i = j + 1;
        }
        out
    }
    let ra = ranks(a);
    let rb = ranks(b);
    let n = a.len() as f64;
    let ma = ra.iter().sum::<f64>() / n;
    let mb = rb.iter().sum::<f64>() / n;
    let cov: f64 = ra.iter().zip(&rb).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = ra.iter().map(|x| (x - ma) * (x - ma)).sum();
    let vb: f64 = rb.iter().map(|x| (x - mb) * (x - mb)).sum();
    cov / (va.sqrt() * vb.sqrt())
}

#[test]
fn shadow_model_tracks_direct_scores() {
    let scene = attack_scene(15, 0.5);
    let record = &scene.fed.records()[0];
    let pool = scene.fed.pool();
    // train the shadow as the attacker would against an evasive client:
    // on everything answered, which excludes the probes themselves but
    // keeps their noisy neighbor copies
    let withheld = withheld_rows(pool, 0);
    let shadow = distill_shadow_model(
        record,
        pool,
        ShareKind::Logits,
        0,
        &ShadowConfig {
            epochs: 40,
            lr: 0.1,
            batch_size: 16,
            arch: ModelArch { hidden: vec![16], activation: Activation::Relu },
            seed: 7,
        },
        &withheld,
    )
    .unwrap();

    let cfg = DistillLiraConfig {
        reference_models: 4,
        subset_fraction: 0.8,
        epochs: 12,
        lr: 0.1,
        batch_size: 16,
        arch: ModelArch { hidden: vec![16], activation: Activation::Relu },
        seed: 8,
    };
    let ensemble = distill_reference_models(record, pool, ShareKind::Logits, 0, &cfg).unwrap();

    let none = HashSet::new();
    let direct = run_distill_mia(record, pool, ShareKind::Logits, 0, &ensemble.models, &TargetScorer::Direct, &none).unwrap();
    let via_shadow = run_distill_mia(record, pool, ShareKind::Logits, 0, &ensemble.models, &TargetScorer::Shadow(shadow), &none).unwrap();
    let a: Vec<f64> = direct.iter().map(|v| v.lambda).collect();
    let b: Vec<f64> = via_shadow.iter().map(|v| v.lambda).collect();
    let rho = spearman(&a, &b);
    assert!(rho > 0.5, "shadow scores drifted from direct scores: spearman {rho}");
}

#[test]
fn noiseless_neighbors_reproduce_direct_scores_exactly() {
    let scene = attack_scene(16, 0.0);
    let record = &scene.fed.records()[0];
    let pool = scene.fed.pool();
    let none = HashSet::new();
    let direct = run_coop_mia(
        record,
        pool,
        ShareKind::Logits,
        0,
        &wide_open(),
        &TargetScorer::Direct,
        &none,
    )
    .unwrap();
    let via_neighbors = run_coop_mia(
        record,
        pool,
        ShareKind::Logits,
        0,
        &wide_open(),
        &TargetScorer::Neighbors(scene.neighbor_map.clone()),
        &none,
    )
    .unwrap();
    for (d, n) in direct.verdicts.iter().zip(&via_neighbors.verdicts) {
        assert_eq!(d.sample, n.sample);
        assert_eq!(d.lambda, n.lambda, "probe {}", d.sample);
    }
}

#[test]
fn withholding_blocks_direct_scoring_only() {
    let scene = attack_scene(17, 0.5);
    let record = &scene.fed.records()[0];
    let pool = scene.fed.pool();
    let withheld = withheld_rows(pool, 0);
    assert_eq!(withheld.len(), 2 * PROBES_PER_SIDE);

    let err = run_coop_mia(
        record,
        pool,
        ShareKind::Logits,
        0,
        &wide_open(),
        &TargetScorer::Direct,
        &withheld,
    )
    .unwrap_err();
    assert!(matches!(err, AttackError::WithheldSample { .. }));

    // neighbors are not recognizable, so indirect querying still works
    let out = run_coop_mia(
        record,
        pool,
        ShareKind::Logits,
        0,
        &wide_open(),
        &TargetScorer::Neighbors(scene.neighbor_map.clone()),
        &withheld,
    )
    .unwrap();
    assert_eq!(out.verdicts.len(), 2 * PROBES_PER_SIDE);
}

#[test]
fn ldia_runs_on_every_round_and_client() {
    let scene = attack_scene(18, 0.5);
    let pool = scene.fed.pool();
    for client in 0..3 {
        let res = run_ldia(scene.fed.records(), pool, ShareKind::Logits, client).unwrap();
        assert_eq!(res.per_round.len(), 1);
        assert_eq!(res.final_estimate.len(), 3);
        let sum: f64 = res.final_estimate.probs().iter().sum();
        assert!((sum - 1.0).abs() < 1e-9);
    }
}
