//! Builds and runs one experiment end to end: data, planted probes,
//! federation rounds (trace flushed per round), attacks, report.
//!
//! Error taxonomy: anything wrong with the requested setup (files,
//! fractions, size relations) is a config error; failures after training
//! starts (divergence, exhausted retries, io on outputs) are runtime
//! aborts. The caller maps these to exit codes.

use std::collections::HashMap;
use std::io::Write;
use std::path::Path;

use fdlab::attacks::{
    distill_reference_models, distill_shadow_model, make_neighbors, run_coop_mia, run_distill_mia,
    run_ldia, withheld_rows, AttackError, CoopConfig, DistillLiraConfig, LabelDistribution,
    ShadowConfig, TargetScorer,
};
use fdlab::data::{
    dirichlet_partition, label_distribution, load_csv, load_idx, make_eval_split,
    split_train_public, synth_gaussian_mixture, Dataset, PlantKind, PublicPool,
};
use fdlab::fdsim::{Federation, LogitRecord};
use fdlab::metrics::{
    best_balanced_accuracy, chebyshev, kl_divergence, random_label_baseline, roc_curve,
    tpr_at_fpr, MembershipVerdict, RocCurve,
};
use fdlab::rng::{client_seed, derive_seed, streams, StreamRng};

use crate::config::{EvasionMode, ExperimentSpec, SourceSpec};
use crate::report::{
    AttackRecord, AttackRecordSet, EvasionReport, FederationReport, LdiaClientReport, LdiaReport,
    MembershipClientReport, MembershipReport, Report,
};
use crate::{HarnessError, SCHEMA_VERSION};

fn config_err(stage: &str) -> impl Fn(fdlab::data::DataError) -> HarnessError + '_ {
    move |e| HarnessError::Config(format!("{stage}: {e}"))
}

fn runtime<E: std::fmt::Display>(stage: &str) -> impl Fn(E) -> HarnessError + '_ {
    move |e| HarnessError::Runtime(format!("{stage}: {e}"))
}

fn load_source(spec: &ExperimentSpec) -> Result<Dataset, HarnessError> {
    let ds = match &spec.data.source {
        SourceSpec::Synthetic { classes, dim, examples, class_sep } => {
            synth_gaussian_mixture(*classes, *dim, *examples, *class_sep, spec.seed)
                .map_err(config_err("synthesize"))?
        }
        SourceSpec::Csv { path, label_column } => load_csv(path, label_column.as_deref())
            .map_err(config_err("load csv"))?
            .dataset,
        SourceSpec::Idx { features, labels } => {
            load_idx(features, labels.as_deref()).map_err(config_err("load idx"))?
        }
    };
    if ds.labels().is_none() {
        return Err(HarnessError::Config(
            "the base dataset must be labeled; private training needs labels".into(),
        ));
    }
    Ok(ds)
}

/// ROC points as a three-column CSV.
fn write_roc(path: &Path, roc: &RocCurve) -> Result<(), HarnessError> {
    let mut w = csv::Writer::from_path(path).map_err(runtime("write roc"))?;
    w.write_record(["threshold", "fpr", "tpr"]).map_err(runtime("write roc"))?;
    for p in &roc.points {
        w.write_record([p.threshold.to_string(), p.fpr.to_string(), p.tpr.to_string()])
            .map_err(runtime("write roc"))?;
    }
    w.flush().map_err(runtime("write roc"))?;
    Ok(())
}

struct PooledAttack {
    report: MembershipReport,
    roc: Option<RocCurve>,
}

/// Collapses per-client verdicts into one report. Clients the attack
/// could not score keep `auc: None` and count at chance level in the
/// per-client mean; with no scorable client at all the pooled numbers
/// are pinned to chance and no curve is returned.
fn summarize_membership(
    attack: &str,
    pooled: Vec<MembershipVerdict>,
    per_client: Vec<MembershipClientReport>,
) -> Result<PooledAttack, HarnessError> {
    let mean_client_auc = per_client.iter().map(|c| c.auc.unwrap_or(0.5)).sum::<f64>()
        / per_client.len().max(1) as f64;
    if pooled.is_empty() {
        return Ok(PooledAttack {
            report: MembershipReport {
                attack: attack.into(),
                auc: 0.5,
                tpr_at_1pct_fpr: 0.01,
                tpr_at_10pct_fpr: 0.1,
                best_balanced_accuracy: 0.5,
                verdicts: 0,
                per_client,
                mean_client_auc,
            },
            roc: None,
        });
    }
    let roc = roc_curve(&pooled).map_err(runtime(attack))?;
    let bba = best_balanced_accuracy(&pooled).map_err(runtime(attack))?;
    Ok(PooledAttack {
        report: MembershipReport {
            attack: attack.into(),
            auc: roc.auc,
            tpr_at_1pct_fpr: tpr_at_fpr(&roc, 0.01),
            tpr_at_10pct_fpr: tpr_at_fpr(&roc, 0.10),
            best_balanced_accuracy: bba.accuracy,
            verdicts: pooled.len(),
            per_client,
            mean_client_auc,
        },
        roc: Some(roc),
    })
}

fn client_auc(verdicts: &[MembershipVerdict]) -> Result<f64, HarnessError> {
    Ok(roc_curve(verdicts).map_err(runtime("per-client roc"))?.auc)
}

fn record_set(
    attack: &str,
    seed: u64,
    beta: Option<f64>,
    reference_models: Option<usize>,
    verdicts: &[MembershipVerdict],
) -> AttackRecordSet {
    AttackRecordSet {
        attack: attack.into(),
        seed,
        beta,
        reference_models,
        records: verdicts
            .iter()
            .map(|v| AttackRecord {
                client: v.client,
                index: v.sample,
                lambda: v.lambda,
                scaled_score: v.scaled_score,
                truth: v.is_member,
            })
            .collect(),
    }
}

pub fn run_experiment(spec: &ExperimentSpec, out: &Path) -> Result<Report, HarnessError> {
    spec.validate()?;
    std::fs::create_dir_all(out).map_err(runtime("create output dir"))?;

    let seed = spec.seed;
    let base = load_source(spec)?;
    let (rest, test) = split_train_public(&base, 1.0 - spec.data.test_fraction, false, derive_seed(seed, 1))
        .map_err(config_err("test split"))?;
    let (train, public) = split_train_public(
        &rest,
        1.0 - spec.data.public_fraction,
        !spec.data.public_labels,
        derive_seed(seed, 2),
    )
    .map_err(config_err("public split"))?;
    let shards = dirichlet_partition(&train, spec.federation.clients, spec.data.partition_alpha, seed)
        .map_err(runtime("partition"))?;

    let truth: Vec<LabelDistribution> = shards
        .iter()
        .map(|shard| label_distribution(&train, shard))
        .collect::<Result<_, _>>()
        .map_err(runtime("shard label distribution"))?;

    // Plant membership probes (and neighbor copies for the evasive
    // client) before the pool is handed to the federation.
    let mut pool = PublicPool::from_dataset(&public);
    let mut neighbor_map: HashMap<usize, Vec<usize>> = HashMap::new();
    let targets = spec.attack_targets();
    if spec.attacks.membership_enabled() {
        let train_labels = train.require_labels("probe planting").map_err(config_err("probes"))?;
        let test_labels = test.require_labels("probe planting").map_err(config_err("probes"))?;
        let ev = &spec.attacks.evasion;
        let wants_neighbors = ev.enabled && ev.modes.contains(&EvasionMode::Neighbors);
        let mut noise = StreamRng::new(client_seed(seed, ev.client), streams::NEIGHBOR_NOISE);
        for &target in &targets {
            let eval = make_eval_split(
                &shards[target],
                &train,
                &test,
                spec.attacks.probes_per_client,
                spec.attacks.stratified_probes,
                client_seed(seed, target),
            )
            .map_err(config_err("probe split"))?;
            let mut plant = |x: Vec<f64>, label: usize, is_member: bool, origin: usize, pool: &mut PublicPool|
             -> Result<(), HarnessError> {
                let row = pool
                    .plant(&x, target, label, is_member, origin, PlantKind::Probe)
                    .map_err(config_err("plant probe"))?;
                if wants_neighbors && target == ev.client {
                    let xv = ndarray::Array1::from(x);
                    let mut rows = Vec::with_capacity(ev.neighbors_per_probe);
                    for n in make_neighbors(
                        xv.view(),
                        ev.neighbors_per_probe,
                        ev.neighbor_noise,
                        fdlab::attacks::NEIGHBOR_CLIP,
                        &mut noise,
                    ) {
                        rows.push(
                            pool.plant(&n, target, label, is_member, origin, PlantKind::Neighbor { of_pool_row: row })
                                .map_err(config_err("plant neighbor"))?,
                        );
                    }
                    neighbor_map.insert(row, rows);
                }
                Ok(())
            };
            for &r in &eval.members {
                plant(train.features().row(r).to_vec(), train_labels[r], true, r, &mut pool)?;
            }
            for &r in &eval.non_members {
                plant(test.features().row(r).to_vec(), test_labels[r], false, r, &mut pool)?;
            }
        }
    }

    let fd_cfg = spec.federation.fd_config();
    let share = fd_cfg.share_kind;
    let classes = train.num_classes();
    let mut fed = Federation::new(
        fd_cfg,
        train,
        pool,
        test,
        shards,
        &spec.federation.arch(),
        spec.federation.train_config(),
        seed,
    )
    .map_err(|e| HarnessError::Config(format!("federation setup: {e}")))?;

    let pretrain = fed.pretrain_public().map_err(runtime("pretrain"))?;

    let trace_path = out.join("trace.ndjson");
    let mut trace = std::io::BufWriter::new(
        std::fs::File::create(&trace_path).map_err(runtime("create trace"))?,
    );
    for _ in 0..spec.federation.rounds {
        let entry = fed.run_round().map_err(runtime("round"))?;
        serde_json::to_writer(&mut trace, entry).map_err(runtime("write trace"))?;
        trace.write_all(b"\n").map_err(runtime("write trace"))?;
        trace.flush().map_err(runtime("write trace"))?;
    }

    let federation_report = FederationReport {
        pretrain,
        rounds: spec.federation.rounds,
        round0_local_accuracy: fed.round0_local_accuracy(),
        final_accuracy: fed.final_mean_accuracy(),
        per_round_accuracy: fed
            .trace()
            .iter()
            .map(|t| fdlab::fdsim::mean(&t.accuracy_after_distill))
            .collect(),
    };

    let ldia = if spec.attacks.ldia.enabled {
        let mut per_client = Vec::with_capacity(spec.federation.clients);
        for c in 0..spec.federation.clients {
            let res = run_ldia(fed.records(), fed.pool(), share, c).map_err(runtime("ldia"))?;
            let est = res.final_estimate;
            let tru = &truth[c];
            let baseline = random_label_baseline(classes, client_seed(seed, c));
            per_client.push(LdiaClientReport {
                client: c,
                kl: kl_divergence(est.probs(), tru.probs()).map_err(runtime("ldia kl"))?,
                chebyshev: chebyshev(est.probs(), tru.probs()).map_err(runtime("ldia chebyshev"))?,
                argmax_match: est.argmax() == tru.argmax(),
                baseline_kl: kl_divergence(&baseline, tru.probs()).map_err(runtime("ldia baseline"))?,
                baseline_chebyshev: chebyshev(&baseline, tru.probs()).map_err(runtime("ldia baseline"))?,
                estimate: est.probs().to_vec(),
                true_distribution: tru.probs().to_vec(),
            });
        }
        let n = per_client.len() as f64;
        Some(LdiaReport {
            mean_kl: per_client.iter().map(|c| c.kl).sum::<f64>() / n,
            mean_chebyshev: per_client.iter().map(|c| c.chebyshev).sum::<f64>() / n,
            argmax_accuracy: per_client.iter().filter(|c| c.argmax_match).count() as f64 / n,
            baseline_mean_kl: per_client.iter().map(|c| c.baseline_kl).sum::<f64>() / n,
            baseline_mean_chebyshev: per_client.iter().map(|c| c.baseline_chebyshev).sum::<f64>() / n,
            per_client,
        })
    } else {
        None
    };

    let mut membership = Vec::new();
    let mut evasion = Vec::new();
    let mut attack_records: Vec<AttackRecordSet> = Vec::new();
    if spec.attacks.membership_enabled() {
        let record: &LogitRecord = &fed.records()[spec.attacks.attack_round];
        let pool = fed.pool();
        let none_withheld = std::collections::HashSet::new();
        let coop_cfg =
            CoopConfig { beta: spec.attacks.coop.beta, symmetric: spec.attacks.coop.symmetric };

        if spec.attacks.coop.enabled {
            let mut pooled = Vec::new();
            let mut per_client = Vec::new();
            for &target in &targets {
                match run_coop_mia(record, pool, share, target, &coop_cfg, &TargetScorer::Direct, &none_withheld)
                {
                    Ok(out) => {
                        per_client.push(MembershipClientReport {
                            client: target,
                            auc: Some(client_auc(&out.verdicts)?),
                            references: Some(out.references.len()),
                        });
                        pooled.extend(out.verdicts);
                    }
                    Err(AttackError::NoUsableReferences { candidates }) => {
                        per_client.push(MembershipClientReport {
                            client: target,
                            auc: None,
                            references: Some(candidates),
                        });
                    }
                    Err(e) => return Err(runtime("coop attack")(e)),
                }
            }
            attack_records.push(record_set("coop", seed, Some(coop_cfg.beta), None, &pooled));
            let summary = summarize_membership("coop", pooled, per_client)?;
            if let Some(roc) = &summary.roc {
                write_roc(&out.join("roc_coop.csv"), roc)?;
            }
            membership.push(summary.report);
        }

        if spec.attacks.distill.enabled {
            let d = &spec.attacks.distill;
            let mut pooled = Vec::new();
            let mut per_client = Vec::new();
            for &target in &targets {
                let cfg = DistillLiraConfig {
                    reference_models: d.reference_models,
                    subset_fraction: d.subset_fraction,
                    epochs: d.epochs,
                    lr: d.lr,
                    batch_size: d.batch_size,
                    arch: spec.federation.arch(),
                    seed: derive_seed(seed, 0xD100 + target as u64),
                };
                let ensemble = distill_reference_models(record, pool, share, target, &cfg)
                    .map_err(runtime("distill references"))?;
                let verdicts = run_distill_mia(
                    record,
                    pool,
                    share,
                    target,
                    &ensemble.models,
                    &TargetScorer::Direct,
                    &none_withheld,
                )
                .map_err(runtime("distill attack"))?;
                per_client.push(MembershipClientReport {
                    client: target,
                    auc: Some(client_auc(&verdicts)?),
                    references: Some(ensemble.models.len()),
                });
                pooled.extend(verdicts);
            }
            attack_records.push(record_set(
                "distill",
                seed,
                None,
                Some(d.reference_models),
                &pooled,
            ));
            let summary = summarize_membership("distill", pooled, per_client)?;
            if let Some(roc) = &summary.roc {
                write_roc(&out.join("roc_distill.csv"), roc)?;
            }
            membership.push(summary.report);
        }

        if spec.attacks.evasion.enabled {
            let ev = &spec.attacks.evasion;
            let withheld = withheld_rows(pool, ev.client);
            for mode in &ev.modes {
                let (name, scorer) = match mode {
                    EvasionMode::Shadow => {
                        let shadow = distill_shadow_model(
                            record,
                            pool,
                            share,
                            ev.client,
                            &ShadowConfig {
                                epochs: ev.shadow_epochs,
                                lr: spec.attacks.distill.lr,
                                batch_size: spec.attacks.distill.batch_size,
                                arch: spec.federation.arch(),
                                seed: derive_seed(seed, 0xE5D0),
                            },
                            &withheld,
                        )
                        .map_err(runtime("shadow distillation"))?;
                        ("shadow", TargetScorer::Shadow(shadow))
                    }
                    EvasionMode::Neighbors => {
                        ("neighbors", TargetScorer::Neighbors(neighbor_map.clone()))
                    }
                };
                match run_coop_mia(record, pool, share, ev.client, &coop_cfg, &scorer, &withheld) {
                    Ok(result) => {
                        attack_records.push(record_set(
                            &format!("coop_{name}"),
                            seed,
                            Some(coop_cfg.beta),
                            None,
                            &result.verdicts,
                        ));
                        let roc = roc_curve(&result.verdicts).map_err(runtime("evasion roc"))?;
                        write_roc(&out.join(format!("roc_coop_{name}.csv")), &roc)?;
                        evasion.push(EvasionReport {
                            mode: name.into(),
                            client: ev.client,
                            withheld_rows: withheld.len(),
                            auc: Some(roc.auc),
                            tpr_at_1pct_fpr: Some(tpr_at_fpr(&roc, 0.01)),
                            references: Some(result.references.len()),
                        });
                    }
                    Err(AttackError::NoUsableReferences { candidates }) => {
                        evasion.push(EvasionReport {
                            mode: name.into(),
                            client: ev.client,
                            withheld_rows: withheld.len(),
                            auc: None,
                            tpr_at_1pct_fpr: None,
                            references: Some(candidates),
                        });
                    }
                    Err(e) => return Err(runtime("evasion attack")(e)),
                }
            }
        }
    }

    let records_json =
        serde_json::to_string_pretty(&attack_records).map_err(runtime("serialize attack records"))?;
    std::fs::write(out.join("attack_records.json"), records_json.as_bytes())
        .map_err(runtime("write attack records"))?;

    let report = Report {
        schema_version: SCHEMA_VERSION,
        config: spec.clone(),
        federation: federation_report,
        ldia,
        membership,
        evasion,
    };
    let json = serde_json::to_string_pretty(&report).map_err(runtime("serialize report"))?;
    std::fs::write(out.join("report.json"), json.as_bytes()).map_err(runtime("write report"))?;
    Ok(report)
}
