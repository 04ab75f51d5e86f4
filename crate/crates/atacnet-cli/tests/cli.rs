//! End-to-end runs of the `atacnet` binary: run-directory layout, rerun
//! determinism, sweep summaries, and the documented exit codes.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use atacnet::data::{sha256_hex, synthetic_cifar10_bytes};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_atacnet"))
}

fn run_ok(cmd: &mut Command) -> Output {
    let out = cmd.output().expect("spawn atacnet");
    assert!(
        out.status.success(),
        "command failed\nstdout: {}\nstderr: {}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn exit_code(cmd: &mut Command) -> (i32, String) {
    let out = cmd.output().expect("spawn atacnet");
    (
        out.status.code().unwrap_or(-1),
        format!(
            "{}{}",
            String::from_utf8_lossy(&out.stdout),
            String::from_utf8_lossy(&out.stderr)
        ),
    )
}

fn smoke_config(dir: &Path) -> PathBuf {
    let path = dir.join("smoke.conf");
    std::fs::write(
        &path,
        "dataset = synthetic\n\
         synthetic_train = 48\n\
         synthetic_test = 24\n\
         augment = false\n\
         model = resnet20v2\n\
         blocks_per_stage = 1\n\
         activation = relu\n\
         replacement_ratio = 0.0\n\
         reduction = 2\n\
         base_lr = 0.05\n\
         epochs = 2\n\
         weight_decay = 1e-4\n\
         batch_size = 16\n\
         momentum = 0.9\n\
         lr_decay_factor = 0.1\n\
         lr_decay_epochs =\n\
         seed = 5\n",
    )
    .unwrap();
    path
}

#[test]
fn account_reports_host_costs() {
    let out = run_ok(bin().args(["account", "--model", "resnet50"]));
    let text = String::from_utf8_lossy(&out.stdout).to_string();
    assert!(text.contains("params: 25557032"), "{text}");
    assert!(text.contains("per-stage breakdown"), "{text}");

    let out = run_ok(bin().args(["account", "--model", "atac-resnet50"]));
    let text = String::from_utf8_lossy(&out.stdout).to_string();
    assert!(text.contains("params: 27934760"), "{text}");
    assert!(text.contains("(18 ATAC)"), "{text}");

    let (code, _) = exit_code(bin().args(["account", "--model", "resnet99"]));
    assert_eq!(code, 2);
}

#[test]
fn train_produces_run_directory_and_is_rerun_identical() {
    let dir = tempfile::tempdir().unwrap();
    let config = smoke_config(dir.path());
    let run1 = dir.path().join("run1");
    let run2 = dir.path().join("run2");

    run_ok(bin().arg("train").arg(&config).arg(format!("out_dir={}", run1.display())));
    for file in ["metrics.csv", "manifest.txt", "last.ckpt", "epoch_0002.ckpt"] {
        assert!(run1.join(file).exists(), "{file} missing");
    }
    let metrics1 = std::fs::read(run1.join("metrics.csv")).unwrap();
    // header + one row per epoch
    assert_eq!(String::from_utf8_lossy(&metrics1).lines().count(), 3);

    let manifest = std::fs::read_to_string(run1.join("manifest.txt")).unwrap();
    assert!(manifest.contains("activation_sites = 7"), "{manifest}");
    assert!(manifest.contains("param_count = 77850"), "{manifest}");

    run_ok(bin().arg("train").arg(&config).arg(format!("out_dir={}", run2.display())));
    let metrics2 = std::fs::read(run2.join("metrics.csv")).unwrap();
    assert_eq!(metrics1, metrics2, "identical config+seed must reproduce metrics bitwise");
}

#[test]
fn eval_reads_back_a_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let config = smoke_config(dir.path());
    let run = dir.path().join("run");
    run_ok(bin().arg("train").arg(&config).arg(format!("out_dir={}", run.display())));

    let out = run_ok(
        bin()
            .arg("eval")
            .arg("--checkpoint")
            .arg(run.join("last.ckpt"))
            .arg("--config")
            .arg(&config),
    );
    let text = String::from_utf8_lossy(&out.stdout).to_string();
    assert!(text.contains("test_acc"), "{text}");
    assert!(text.contains("epochs_completed 2"), "{text}");

    // a truncated checkpoint is a data error
    std::fs::write(run.join("broken.ckpt"), b"atacnet-checkpoint v1\n").unwrap();
    let (code, msg) = exit_code(
        bin()
            .arg("eval")
            .arg("--checkpoint")
            .arg(run.join("broken.ckpt"))
            .arg("--config")
            .arg(&config),
    );
    assert_eq!(code, 3, "{msg}");
}

#[test]
fn sweep_matches_single_runs_and_orders_costs() {
    let dir = tempfile::tempdir().unwrap();
    let config = smoke_config(dir.path());
    let sweep_dir = dir.path().join("sweep");
    run_ok(
        bin()
            .arg("sweep-replacement")
            .arg(&config)
            .args(["--ratios", "0,1"])
            .arg(format!("out_dir={}", sweep_dir.display()))
            .arg("epochs=1"),
    );
    let summary = std::fs::read_to_string(sweep_dir.join("summary.csv")).unwrap();
    let rows: Vec<&str> = summary.lines().collect();
    assert_eq!(rows[0], "ratio,replaced_sites,params,final_test_acc");
    assert_eq!(rows.len(), 3);
    let parse = |row: &str| -> (f64, usize, u64, f64) {
        let f: Vec<&str> = row.split(',').collect();
        (f[0].parse().unwrap(), f[1].parse().unwrap(), f[2].parse().unwrap(), f[3].parse().unwrap())
    };
    let (r0, s0, p0, _) = parse(rows[1]);
    let (r1, s1, p1, _) = parse(rows[2]);
    assert_eq!((r0, s0), (0.0, 0));
    assert_eq!((r1, s1), (1.0, 7));
    assert!(p1 > p0);

    // the ratio-0 sweep member reproduces a plain train run bitwise
    let solo = dir.path().join("solo");
    run_ok(
        bin()
            .arg("train")
            .arg(&config)
            .arg(format!("out_dir={}", solo.display()))
            .arg("epochs=1"),
    );
    let sweep_metrics = std::fs::read(sweep_dir.join("ratio_0.000/metrics.csv")).unwrap();
    let solo_metrics = std::fs::read(solo.join("metrics.csv")).unwrap();
    assert_eq!(sweep_metrics, solo_metrics);

    let (code, _) = exit_code(
        bin()
            .arg("sweep-replacement")
            .arg(&config)
            .args(["--ratios", "0,1.5"])
            .arg(format!("out_dir={}", dir.path().join("bad").display())),
    );
    assert_eq!(code, 2);
}

#[test]
fn config_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let config = smoke_config(dir.path());

    let (code, msg) = exit_code(bin().arg("train").arg(&config).arg("bogus_key=1"));
    assert_eq!(code, 2);
    assert!(msg.contains("bogus_key"), "{msg}");

    // reduction that does not divide the channel width is rejected before
    // any training
    let (code, msg) = exit_code(
        bin()
            .arg("train")
            .arg(&config)
            .arg(format!("out_dir={}", dir.path().join("x").display()))
            .arg("reduction=3")
            .arg("replacement_ratio=1.0"),
    );
    assert_eq!(code, 2);
    assert!(msg.contains("reduction ratio 3"), "{msg}");
    assert!(!dir.path().join("x").join("metrics.csv").exists());

    let (code, _) = exit_code(bin().arg("train").arg(dir.path().join("missing.conf")));
    assert_eq!(code, 2);
}

#[test]
fn data_errors_exit_3_and_numeric_aborts_exit_4() {
    let dir = tempfile::tempdir().unwrap();
    let data_dir = dir.path().join("cifar");
    std::fs::create_dir_all(&data_dir).unwrap();
    // five valid batches plus a valid test batch
    for i in 1..=5 {
        std::fs::write(
            data_dir.join(format!("data_batch_{i}.bin")),
            synthetic_cifar10_bytes(24, i as u64),
        )
        .unwrap();
    }
    std::fs::write(data_dir.join("test_batch.bin"), synthetic_cifar10_bytes(12, 99)).unwrap();

    let config = dir.path().join("cifar.conf");
    std::fs::write(
        &config,
        format!(
            "dataset = cifar10\ndata_dir = {}\nmodel = resnet20v2\nblocks_per_stage = 1\n\
             epochs = 1\nbatch_size = 16\nbase_lr = 0.05\nlr_decay_epochs =\nseed = 3\naugment = false\n",
            data_dir.display()
        ),
    )
    .unwrap();

    // clean fixture trains fine
    run_ok(
        bin()
            .arg("train")
            .arg(&config)
            .arg(format!("out_dir={}", dir.path().join("ok").display())),
    );

    // trailing byte in one batch: malformed data, exit 3
    let mut bytes = synthetic_cifar10_bytes(24, 2);
    bytes.push(0);
    std::fs::write(data_dir.join("data_batch_2.bin"), &bytes).unwrap();
    let (code, msg) = exit_code(
        bin()
            .arg("train")
            .arg(&config)
            .arg(format!("out_dir={}", dir.path().join("bad1").display())),
    );
    assert_eq!(code, 3, "{msg}");
    assert!(msg.contains("trailing bytes"), "{msg}");

    // missing file: exit 3
    std::fs::remove_file(data_dir.join("data_batch_2.bin")).unwrap();
    let (code, _) = exit_code(
        bin()
            .arg("train")
            .arg(&config)
            .arg(format!("out_dir={}", dir.path().join("bad2").display())),
    );
    assert_eq!(code, 3);
    std::fs::write(data_dir.join("data_batch_2.bin"), synthetic_cifar10_bytes(24, 2)).unwrap();

    // checksum manifest mismatch: exit 3, distinct from config errors
    let manifest = dir.path().join("sums.txt");
    std::fs::write(
        &manifest,
        format!("data_batch_1.bin {}\n", sha256_hex(b"not the real bytes")),
    )
    .unwrap();
    let (code, msg) = exit_code(
        bin()
            .arg("train")
            .arg(&config)
            .arg(format!("checksum_manifest={}", manifest.display()))
            .arg(format!("out_dir={}", dir.path().join("bad3").display())),
    );
    assert_eq!(code, 3, "{msg}");
    assert!(msg.contains("checksum mismatch"), "{msg}");

    // a diverging run aborts with the numeric exit code
    let smoke = smoke_config(dir.path());
    let (code, msg) = exit_code(
        bin()
            .arg("train")
            .arg(&smoke)
            .arg(format!("out_dir={}", dir.path().join("nan").display()))
            .arg("base_lr=1e300"),
    );
    assert_eq!(code, 4, "{msg}");
}
