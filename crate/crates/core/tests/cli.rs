use std::path::Path;
use std::process::{Command, Output};

use cbnn::config;
use cbnn::net::{Mode, Schedule};

fn cbnn(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cbnn"))
        .args(args)
        .current_dir(cwd)
        .env_remove("CBNN_DATA_DIR")
        .env_remove("CBNN_THREADS")
        .output()
        .unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

#[test]
fn bundled_configs_carry_the_published_settings() {
    let lenet = config::parse(config::bundled("mnist_lenet_bayes").unwrap()).unwrap();
    assert_eq!(lenet.mode, Mode::Bayes);
    assert_eq!(lenet.train.batch_size, 64);
    assert_eq!(lenet.train.base_lr, 0.01);
    assert_eq!(
        lenet.train.schedule,
        Schedule::Inv {
            gamma: 0.0001,
            power: 0.75
        }
    );
    assert_eq!(lenet.train.momentum, 0.9);
    assert_eq!(lenet.train.kappa, 50.0);
    assert_eq!(lenet.train.nu_for(60_000), 1.0 / (60_000.0 * 100.0));
    assert!(lenet
        .arch
        .layers
        .iter()
        .all(|l| l.prior_mean == 0.0 && l.prior_std == 1.0));

    let cifar = config::parse(config::bundled("cifar10_bayes").unwrap()).unwrap();
    assert_eq!(cifar.train.batch_size, 100);
    assert_eq!(cifar.train.schedule, Schedule::Fixed);
    assert_eq!(cifar.train.base_lr, 0.001);
    assert_eq!(cifar.train.iterations, 40_000);
    assert_eq!(cifar.train.kappa, 50.0);
    assert_eq!(cifar.train.nu_for(50_000), 1.0 / (50_000.0 * 10.0));
    for l in &cifar.arch.layers {
        match l.kind {
            cbnn::layers::LayerKind::Conv { .. } => assert_eq!(l.prior_std, 1.0),
            cbnn::layers::LayerKind::Dense { .. } => assert_eq!(l.prior_std, 0.05),
            _ => {}
        }
    }

    let freq = config::parse(config::bundled("mnist_lenet_freq").unwrap()).unwrap();
    assert_eq!(freq.mode, Mode::Freq);
    let kinds: Vec<_> = freq.arch.layers.iter().map(|l| l.kind).collect();
    let drop = kinds
        .iter()
        .position(|k| matches!(k, cbnn::layers::LayerKind::Dropout { rate } if *rate == 0.5))
        .expect("dropout layer");
    assert!(matches!(kinds[drop - 1], cbnn::layers::LayerKind::Relu));
    assert!(matches!(
        kinds[drop - 2],
        cbnn::layers::LayerKind::Dense { outputs: 100 }
    ));
    for l in &freq.arch.layers {
        if l.kind.is_parametric() {
            assert_eq!(l.weight_decay, 0.0005);
        }
    }
}

#[test]
fn bundled_configs_round_trip() {
    for (name, text) in config::BUNDLED {
        let a = config::parse(text).unwrap();
        let b = config::parse(&config::serialize(&a)).unwrap();
        assert_eq!(a, b, "{name}");
    }
}

#[test]
fn config_errors_exit_2_with_line_number() {
    let dir = tempfile::tempdir().unwrap();
    let bad = config::bundled("blobs_smoke")
        .unwrap()
        .replace("momentum = 0.9", "momentom = 0.9");
    let line = bad.lines().position(|l| l.starts_with("momentom")).unwrap() + 1;
    std::fs::write(dir.path().join("bad.cfg"), bad).unwrap();
    let o = cbnn(&["train", "--config", "bad.cfg"], dir.path());
    assert_eq!(o.status.code(), Some(2));
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains(&format!("line {line}")), "{err}");

    let o = cbnn(&["train", "--config", "no_such_config"], dir.path());
    assert_eq!(o.status.code(), Some(2));
    let o = cbnn(&["frobnicate"], dir.path());
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn train_eval_boxdata_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    let o = cbnn(
        &["train", "--config", "blobs_smoke", "--iterations", "200"],
        p,
    );
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let runs = p.join("runs");
    for f in [
        "blobs_smoke.ckpt",
        "blobs_smoke_train.csv",
        "blobs_smoke_params.csv",
    ] {
        assert!(runs.join(f).exists(), "{f}");
    }
    let log = std::fs::read_to_string(runs.join("blobs_smoke_train.csv")).unwrap();
    assert_eq!(
        log.lines().next(),
        Some("iteration,lr,loss,approx_test_error")
    );
    assert_eq!(log.lines().count(), 1 + 20);
    let params = std::fs::read_to_string(runs.join("blobs_smoke_params.csv")).unwrap();
    assert!(params.starts_with("layer,kind,weights,biases,tau_w,tau_b,rho_w,rho_b"));
    assert_eq!(params.lines().count(), 3);

    let ck = "runs/blobs_smoke.ckpt";
    let o = cbnn(
        &[
            "eval",
            "--checkpoint",
            ck,
            "--config",
            "blobs_smoke",
            "--samples",
            "30",
        ],
        p,
    );
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let table = stdout(&o);
    assert_eq!(table.lines().count(), 3);
    assert!(runs.join("blobs_smoke_report_95.csv").exists());
    assert!(runs.join("blobs_smoke_report_99.csv").exists());
    let report = std::fs::read_to_string(runs.join("blobs_smoke_report_95.csv")).unwrap();
    assert!(report
        .starts_with("index,true_label,predicted_label,mean_0,mean_1,lo_0,lo_1,hi_0,hi_1,certain"));
    assert_eq!(report.lines().count(), 1 + 400);

    let box_args = [
        "boxdata",
        "--checkpoint",
        ck,
        "--config",
        "blobs_smoke",
        "--index",
        "5",
        "--samples",
        "12",
    ];
    let a = cbnn(&box_args, p);
    let b = cbnn(&box_args, p);
    assert!(a.status.success());
    assert_eq!(a.stdout, b.stdout);
    assert_eq!(stdout(&a).lines().count(), 13);
    let one = cbnn(
        &[
            "boxdata",
            "--checkpoint",
            ck,
            "--config",
            "blobs_smoke",
            "--index",
            "5",
            "--samples",
            "1",
        ],
        p,
    );
    assert_eq!(stdout(&one).lines().count(), 2);
    let out = cbnn(
        &[
            "boxdata",
            "--checkpoint",
            ck,
            "--config",
            "blobs_smoke",
            "--index",
            "400",
            "--samples",
            "3",
        ],
        p,
    );
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn saturated_example_gives_near_one_hot_samples() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    assert!(cbnn(&["train", "--config", "blobs_smoke"], p)
        .status
        .success());
    let ck = "runs/blobs_smoke.ckpt";
    assert!(
        cbnn(&["eval", "--checkpoint", ck, "--config", "blobs_smoke"], p)
            .status
            .success()
    );
    let report = std::fs::read_to_string(p.join("runs/blobs_smoke_report_95.csv")).unwrap();
    let (index, best) = report
        .lines()
        .skip(1)
        .map(|l| {
            let f: Vec<&str> = l.split(',').collect();
            let m: f64 = f[3].parse::<f64>().unwrap().max(f[4].parse().unwrap());
            (f[0].to_string(), m)
        })
        .max_by(|a, b| a.1.total_cmp(&b.1))
        .unwrap();
    assert!(best > 0.999);
    let o = cbnn(
        &[
            "boxdata",
            "--checkpoint",
            ck,
            "--config",
            "blobs_smoke",
            "--index",
            &index,
            "--samples",
            "50",
        ],
        p,
    );
    let rows: Vec<&str> = std::str::from_utf8(&o.stdout)
        .unwrap()
        .lines()
        .skip(1)
        .collect();
    assert_eq!(rows.len(), 50);
    for row in rows {
        let v: Vec<f64> = row.split(',').skip(1).map(|x| x.parse().unwrap()).collect();
        assert!(v.iter().any(|&x| x > 0.99), "{row}");
    }
}

#[test]
fn mismatched_checkpoint_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    assert!(cbnn(
        &["train", "--config", "blobs_smoke", "--iterations", "1"],
        p
    )
    .status
    .success());
    let other = config::bundled("blobs_smoke")
        .unwrap()
        .replace("input = 4x1x1", "input = 6x1x1")
        .replace("outputs = 8", "outputs = 5");
    std::fs::write(p.join("other.cfg"), other).unwrap();
    let o = cbnn(
        &[
            "eval",
            "--checkpoint",
            "runs/blobs_smoke.ckpt",
            "--config",
            "other.cfg",
        ],
        p,
    );
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn verify_cholesky_reports_csv() {
    let dir = tempfile::tempdir().unwrap();
    let o = cbnn(&["verify", "cholesky", "--out", "v.csv"], dir.path());
    assert_eq!(o.status.code(), Some(0));
    let text = stdout(&o);
    assert!(text.starts_with("suite,check,value,tolerance,passed"));
    assert!(text.lines().skip(1).all(|l| l.ends_with(",true")));
    assert_eq!(
        std::fs::read_to_string(dir.path().join("v.csv")).unwrap(),
        text
    );
}

#[test]
fn thread_count_does_not_change_outputs() {
    let run = |threads: &str| {
        let dir = tempfile::tempdir().unwrap();
        let o = Command::new(env!("CARGO_BIN_EXE_cbnn"))
            .args(["train", "--config", "blobs_smoke", "--iterations", "100"])
            .current_dir(dir.path())
            .env("CBNN_THREADS", threads)
            .output()
            .unwrap();
        assert!(o.status.success());
        std::fs::read(dir.path().join("runs/blobs_smoke.ckpt")).unwrap()
    };
    assert_eq!(run("1"), run("3"));
}
