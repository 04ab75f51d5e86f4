//! The five subcommands. Each one maps core errors onto the documented
//! exit-code classes at the phase where they arise.

use std::io::Write;
use std::path::Path;

use atacnet::data::{self, LabeledBatch};
use atacnet::graph::HostSpec;
use atacnet::model::{peek_checkpoint, Model};
use atacnet::train::{evaluate, train, TrainSession};
use atacnet::verify;

use crate::config::{DatasetChoice, RunConfig};
use crate::CliError;

pub struct LoadedData {
    pub train: LabeledBatch,
    pub test: LabeledBatch,
    /// `file-name -> sha256` of every dataset file read, or the synthetic
    /// generator description.
    pub checksums: Vec<(String, String)>,
}

fn read_and_hash(dir: &Path, name: &str, sums: &mut Vec<(String, String)>) -> Result<Vec<u8>, CliError> {
    let path = dir.join(name);
    let bytes = std::fs::read(&path)
        .map_err(|e| CliError::Data(format!("cannot read {}: {e}", path.display())))?;
    sums.push((name.to_string(), data::sha256_hex(&bytes)));
    Ok(bytes)
}

/// Loads the configured dataset. CIFAR files are checksum-verified against
/// the manifest (when one is configured) before any parsing happens.
pub fn load_dataset(cfg: &RunConfig) -> Result<LoadedData, CliError> {
    match cfg.dataset {
        DatasetChoice::Synthetic => {
            let (train, test) = data::synthetic_dataset_sized(
                cfg.synthetic_classes,
                cfg.synthetic_train,
                cfg.synthetic_test,
                cfg.seed,
                cfg.synthetic_snr,
            )
            .map_err(CliError::from_config_phase)?;
            Ok(LoadedData {
                train,
                test,
                checksums: vec![(
                    "synthetic".into(),
                    format!(
                        "classes={} train={} test={} snr={} seed={}",
                        cfg.synthetic_classes,
                        cfg.synthetic_train,
                        cfg.synthetic_test,
                        cfg.synthetic_snr,
                        cfg.seed
                    ),
                )],
            })
        }
        DatasetChoice::Cifar10 | DatasetChoice::Cifar100 => {
            let dir = cfg
                .data_dir
                .as_ref()
                .ok_or_else(|| CliError::Config("key 'data_dir' is required for CIFAR datasets".into()))?;
            if let Some(manifest_path) = &cfg.checksum_manifest {
                let text = std::fs::read_to_string(manifest_path).map_err(|e| {
                    CliError::Data(format!("cannot read checksum manifest {}: {e}", manifest_path.display()))
                })?;
                let entries = data::parse_checksum_manifest(&text).map_err(CliError::from_data_phase)?;
                data::verify_checksums(dir, &entries).map_err(CliError::from_data_phase)?;
            }

            let mut sums = Vec::new();
            let (train_raw, train_labels, test_raw, test_labels, classes) = match cfg.dataset {
                DatasetChoice::Cifar10 => {
                    let mut images = data::RawImages { count: 0, pixels: Vec::new() };
                    let mut labels = Vec::new();
                    for i in 1..=5 {
                        let bytes = read_and_hash(dir, &format!("data_batch_{i}.bin"), &mut sums)?;
                        let part = data::parse_cifar10(&bytes).map_err(CliError::from_data_phase)?;
                        images.count += part.images.count;
                        images.pixels.extend(part.images.pixels);
                        labels.extend(part.labels);
                    }
                    let bytes = read_and_hash(dir, "test_batch.bin", &mut sums)?;
                    let test = data::parse_cifar10(&bytes).map_err(CliError::from_data_phase)?;
                    (images, labels, test.images, test.labels, 10usize)
                }
                DatasetChoice::Cifar100 => {
                    let bytes = read_and_hash(dir, "train.bin", &mut sums)?;
                    let train = data::parse_cifar100(&bytes).map_err(CliError::from_data_phase)?;
                    let bytes = read_and_hash(dir, "test.bin", &mut sums)?;
                    let test = data::parse_cifar100(&bytes).map_err(CliError::from_data_phase)?;
                    (
                        train.images,
                        train.fine_labels,
                        test.images,
                        test.fine_labels,
                        100usize,
                    )
                }
                DatasetChoice::Synthetic => unreachable!(),
            };

            // statistics from the training split only
            let meta = data::compute_meta(cfg.dataset.name(), classes, &train_raw, test_raw.count);
            let mut train = data::normalize(&train_raw, &train_labels, &meta)
                .map_err(CliError::from_data_phase)?;
            let mut test =
                data::normalize(&test_raw, &test_labels, &meta).map_err(CliError::from_data_phase)?;
            if cfg.train_subset > 0 && cfg.train_subset < train.len() {
                train = train.take(cfg.train_subset);
            }
            if cfg.test_subset > 0 && cfg.test_subset < test.len() {
                test = test.take(cfg.test_subset);
            }
            Ok(LoadedData {
                train,
                test,
                checksums: sums,
            })
        }
    }
}

fn configure_threads(threads: usize) {
    if threads > 0 {
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build_global();
    }
}

fn write_run_manifest(
    dir: &Path,
    cfg: &RunConfig,
    spec: &HostSpec,
    graph: &atacnet::ModelGraph,
    data: &LoadedData,
) -> Result<(), CliError> {
    let sites = graph.activation_sites();
    let replaced = sites
        .iter()
        .filter(|s| matches!(s.kind, atacnet::ActivationKind::Atac { .. }))
        .count();
    let flops = graph
        .count_flops(1)
        .map_err(CliError::from_config_phase)?;
    let mut out = String::new();
    out.push_str("atacnet-run v1\n");
    out.push_str(&format!("version {}\n", env!("CARGO_PKG_VERSION")));
    out.push_str("[config]\n");
    for (k, v) in cfg.echo() {
        out.push_str(&format!("{k} = {v}\n"));
    }
    out.push_str("[derived]\n");
    out.push_str(&format!("model_spec = {}\n", spec.spec_string()));
    out.push_str(&format!("activation_sites = {}\n", sites.len()));
    out.push_str(&format!("replaced_sites = {replaced}\n"));
    out.push_str(&format!("param_count = {}\n", graph.count_params()));
    out.push_str(&format!("flops_per_image = {flops}\n"));
    out.push_str(&format!("train_examples = {}\n", data.train.len()));
    out.push_str(&format!("test_examples = {}\n", data.test.len()));
    out.push_str("[dataset_checksums]\n");
    for (name, digest) in &data.checksums {
        out.push_str(&format!("{name} {digest}\n"));
    }
    out.push_str("[outputs]\n");
    out.push_str("metrics = metrics.csv\n");
    out.push_str("checkpoint_last = last.ckpt\n");
    std::fs::write(dir.join("manifest.txt"), out)
        .map_err(|e| CliError::Data(format!("cannot write manifest: {e}")))?;
    Ok(())
}

fn prepare_run(cfg: &RunConfig) -> Result<(Model, HostSpec, LoadedData), CliError> {
    let spec = cfg.host_spec()?;
    if !matches!(spec, HostSpec::Resnet20V2 { .. }) {
        return Err(CliError::Config(format!(
            "key 'model': training drives resnet20v2 hosts; '{}' is account-only",
            cfg.model
        )));
    }
    let graph = spec.build().map_err(CliError::from_config_phase)?;
    let data = load_dataset(cfg)?;
    let num_classes = cfg.num_classes();
    if graph.num_classes != num_classes {
        return Err(CliError::Config(format!(
            "model head has {} classes but dataset has {num_classes}",
            graph.num_classes
        )));
    }
    let mut model = Model::new(graph).map_err(CliError::from_config_phase)?;
    model.he_init(cfg.seed);
    Ok((model, spec, data))
}

pub fn cmd_train(config_path: &Path, overrides: &[String]) -> Result<(), CliError> {
    let mut cfg = RunConfig::load(config_path)?;
    cfg.apply_overrides(overrides)?;
    configure_threads(cfg.threads);
    let out_dir = cfg
        .out_dir
        .clone()
        .ok_or_else(|| CliError::Config("key 'out_dir' is required for train".into()))?;

    let (mut model, spec, data) = prepare_run(&cfg)?;
    let train_cfg = cfg.train_config(&spec.spec_string());
    train_cfg.validate().map_err(CliError::from_config_phase)?;

    std::fs::create_dir_all(&out_dir)
        .map_err(|e| CliError::Data(format!("cannot create {}: {e}", out_dir.display())))?;
    write_run_manifest(&out_dir, &cfg, &spec, &model.graph, &data)?;

    let rows = train(
        &mut model,
        &TrainSession {
            cfg: &train_cfg,
            run_dir: Some(&out_dir),
            start_epoch: 0,
        },
        &data.train,
        &data.test,
    )
    .map_err(CliError::from_run_phase)?;

    if let Some(last) = rows.last() {
        println!(
            "run complete: {} epochs, final train_loss {:.4}, test_acc {:.4}",
            rows.len(),
            last.train_loss,
            last.test_acc
        );
    }
    println!("outputs in {}", out_dir.display());
    Ok(())
}

pub fn cmd_sweep_replacement(
    config_path: &Path,
    ratios: &[f64],
    overrides: &[String],
) -> Result<(), CliError> {
    let mut base_cfg = RunConfig::load(config_path)?;
    base_cfg.apply_overrides(overrides)?;
    configure_threads(base_cfg.threads);
    let out_dir = base_cfg
        .out_dir
        .clone()
        .ok_or_else(|| CliError::Config("key 'out_dir' is required for sweep-replacement".into()))?;
    if let Some(&bad) = ratios.iter().find(|r| !(0.0..=1.0).contains(*r)) {
        return Err(CliError::Config(format!("ratio {bad} outside [0, 1]")));
    }
    std::fs::create_dir_all(&out_dir)
        .map_err(|e| CliError::Data(format!("cannot create {}: {e}", out_dir.display())))?;

    let mut summary = String::from("ratio,replaced_sites,params,final_test_acc\n");
    for &ratio in ratios {
        let mut cfg = base_cfg.clone();
        cfg.replacement_ratio = ratio;
        let run_dir = out_dir.join(format!("ratio_{ratio:.3}"));
        cfg.out_dir = Some(run_dir.clone());

        let (mut model, spec, data) = prepare_run(&cfg)?;
        let replaced = model
            .graph
            .activation_sites()
            .iter()
            .filter(|s| matches!(s.kind, atacnet::ActivationKind::Atac { .. }))
            .count();
        let params = model.graph.count_params();
        let train_cfg = cfg.train_config(&spec.spec_string());
        train_cfg.validate().map_err(CliError::from_config_phase)?;
        std::fs::create_dir_all(&run_dir)
            .map_err(|e| CliError::Data(format!("cannot create {}: {e}", run_dir.display())))?;
        write_run_manifest(&run_dir, &cfg, &spec, &model.graph, &data)?;

        let rows = train(
            &mut model,
            &TrainSession {
                cfg: &train_cfg,
                run_dir: Some(&run_dir),
                start_epoch: 0,
            },
            &data.train,
            &data.test,
        )
        .map_err(CliError::from_run_phase)?;
        let final_acc = rows.last().map(|r| r.test_acc).unwrap_or(0.0);
        summary.push_str(&format!("{ratio},{replaced},{params},{final_acc:.6}\n"));
        println!("ratio {ratio}: replaced {replaced} sites, {params} params, test_acc {final_acc:.4}");
    }
    std::fs::write(out_dir.join("summary.csv"), &summary)
        .map_err(|e| CliError::Data(format!("cannot write summary: {e}")))?;
    println!("summary in {}", out_dir.join("summary.csv").display());
    Ok(())
}

fn human_m(v: u64) -> String {
    format!("{:.2}M", v as f64 / 1e6)
}

fn human_g(v: u64) -> String {
    format!("{:.3}G", v as f64 / 1e9)
}

pub fn cmd_account(
    model: &str,
    blocks: usize,
    activation: &str,
    ratio: f64,
    reduction: usize,
    classes: usize,
) -> Result<(), CliError> {
    let spec = match model {
        "resnet20v2" => {
            let activation = atacnet::graph::parse_activation(activation, reduction)
                .map_err(CliError::from_config_phase)?;
            HostSpec::Resnet20V2 {
                blocks_per_stage: blocks,
                num_classes: classes,
                activation,
                replacement_ratio: ratio,
                reduction,
            }
        }
        "resnet50" => HostSpec::Resnet50 { num_classes: 1000 },
        "resnet50v1b" => HostSpec::Resnet50V1b { num_classes: 1000, atac: false },
        "atac-resnet50" => HostSpec::Resnet50V1b { num_classes: 1000, atac: true },
        other => return Err(CliError::Config(format!("unknown model {other:?}"))),
    };
    let graph = spec.build().map_err(CliError::from_config_phase)?;
    let params = graph.count_params();
    let flops = graph.count_flops(1).map_err(CliError::from_config_phase)?;
    let sites = graph.activation_sites();
    let replaced = sites
        .iter()
        .filter(|s| matches!(s.kind, atacnet::ActivationKind::Atac { .. }))
        .count();

    println!("model: {}", graph.name);
    println!("activation sites: {} ({} ATAC)", sites.len(), replaced);
    println!("params: {params} ({})", human_m(params));
    println!("flops per image: {flops} ({})", human_g(flops));
    println!("per-stage breakdown:");
    println!("  {:<8} {:>12} {:>16}", "stage", "params", "flops");
    for (stage, p, f) in graph.stage_breakdown(1).map_err(CliError::from_config_phase)? {
        println!("  {stage:<8} {p:>12} {f:>16}");
    }
    Ok(())
}

pub fn cmd_verify() -> Result<(), CliError> {
    let outcomes = verify::run_all();
    let mut failed = Vec::new();
    for outcome in &outcomes {
        let status = if outcome.passed { "PASS" } else { "FAIL" };
        println!("VERIFY {:<32} {status}  {}", outcome.name, outcome.detail);
        if !outcome.passed {
            failed.push(outcome.name.clone());
        }
    }
    let _ = std::io::stdout().flush();
    if failed.is_empty() {
        println!("verify: all {} checks passed", outcomes.len());
        Ok(())
    } else {
        Err(CliError::Verify(format!(
            "{} of {} checks failed: {}",
            failed.len(),
            outcomes.len(),
            failed.join(", ")
        )))
    }
}

pub fn cmd_eval(checkpoint: &Path, config_path: &Path, overrides: &[String]) -> Result<(), CliError> {
    let mut cfg = RunConfig::load(config_path)?;
    cfg.apply_overrides(overrides)?;
    configure_threads(cfg.threads);

    let meta = peek_checkpoint(checkpoint).map_err(CliError::from_data_phase)?;
    let spec = HostSpec::parse(&meta.model_spec).map_err(CliError::from_data_phase)?;
    let graph = spec.build().map_err(CliError::from_data_phase)?;
    let mut model = Model::new(graph).map_err(CliError::from_data_phase)?;
    model
        .load_checkpoint(checkpoint)
        .map_err(CliError::from_data_phase)?;

    let data = load_dataset(&cfg)?;
    let (acc, loss) = evaluate(&mut model, &data.test, cfg.batch_size.max(1))
        .map_err(CliError::from_run_phase)?;
    println!(
        "checkpoint {} (epochs_completed {}): test_acc {acc:.4}, test_loss {loss:.4} over {} examples",
        checkpoint.display(),
        meta.epochs_completed,
        data.test.len()
    );
    Ok(())
}
