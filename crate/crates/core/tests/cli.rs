mod common;

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use manysr::train::RunConfig;

const TINY: [&str; 14] = [
    "--set",
    "arch.num_rrdb=1",
    "--set",
    "arch.trunk_channels=8",
    "--set",
    "arch.growth_channels=4",
    "--set",
    "arch.disc_channels=8",
    "--set",
    "patch_size=32",
    "--set",
    "batch_size=2",
    "--set",
    "total_iterations=2",
];

fn manysr(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_manysr"))
        .args(args)
        .env("RUST_LOG", "warn")
        .env_remove("MANYSR_WEIGHTS_DIR")
        .output()
        .unwrap()
}

fn ok(out: &Output) -> String {
    assert!(
        out.status.success(),
        "stderr: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout.clone()).unwrap()
}

fn code(out: &Output) -> i32 {
    out.status.code().unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn fixtures() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures")
}

fn write_corpus(dir: &Path) {
    std::fs::create_dir_all(dir).unwrap();
    for (name, img) in common::synthetic_corpus(4, 64, 5) {
        img.save_png(dir.join(format!("{name}.png"))).unwrap();
    }
}

/// Runs a two-iteration tiny pretraining into `out`.
fn train_tiny(data: &Path, out: &Path, extra: &[&str]) -> Output {
    let mut args = vec![
        "train-psnr",
        "--preset",
        "table1_a",
        "--profile",
        "desk",
        "--quiet",
    ];
    args.extend(TINY);
    args.extend([
        "--set",
        "checkpoint_every=1",
        "--data",
        s(data),
        "--out",
        s(out),
    ]);
    args.extend(extra);
    manysr(&args)
}

fn tree(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut v = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let rel = p.strip_prefix(dir).unwrap().to_string_lossy().into_owned();
                v.push((rel, std::fs::read(&p).unwrap()));
            }
        }
    }
    v.sort();
    v
}

#[test]
fn dry_run_has_no_side_effects() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    write_corpus(&data);
    let out = tmp.path().join("run");
    let text = ok(&train_tiny(&data, &out, &["--dry-run"]));
    assert!(text.starts_with("plan: Pretrain stage, 2 iterations"));
    assert!(!out.exists());

    let sr_out = tmp.path().join("sr");
    let eval_out = tmp.path().join("eval");
    ok(&train_tiny(&data, &out, &[]));
    let ck = out.join("checkpoints/iter_00000002");
    let before = tree(&out);
    ok(&manysr(&[
        "--dry-run",
        "sr",
        "--checkpoint",
        s(&ck),
        "--input",
        s(&data),
        "--out",
        s(&sr_out),
    ]));
    let ds = format!("d={}", s(&data));
    ok(&manysr(&[
        "eval",
        "--dry-run",
        "--checkpoints",
        s(&ck),
        "--dataset",
        &ds,
        "--out",
        s(&eval_out),
    ]));
    ok(&manysr(&[
        "--dry-run",
        "noise-stats",
        "--checkpoint",
        s(&ck),
        "--out",
        s(&sr_out),
    ]));
    ok(&manysr(&[
        "--dry-run",
        "blur-scan",
        "--data",
        s(&data),
        "--out",
        s(&sr_out.join("b.json")),
    ]));
    assert!(!sr_out.exists() && !eval_out.exists());
    assert_eq!(tree(&out), before);
}

#[test]
fn exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("o");
    let o = s(&out);
    assert_eq!(code(&manysr(&["train-psnr", "--out", o])), 2);
    assert_eq!(
        code(&manysr(&["train-psnr", "--preset", "table9", "--out", o])),
        2
    );
    assert_eq!(
        code(&manysr(&["train-psnr", "--preset", "table1_f", "--out", o])),
        2
    );
    assert_eq!(
        code(&manysr(&[
            "train-psnr",
            "--preset",
            "table1_a",
            "--set",
            "bogus=1",
            "--out",
            o
        ])),
        2
    );
    let missing = tmp.path().join("missing");
    assert_eq!(
        code(&manysr(&[
            "train-psnr",
            "--preset",
            "table1_a",
            "--data",
            s(&missing),
            "--out",
            o
        ])),
        3
    );
    assert_eq!(code(&manysr(&["blur-scan", "--data", s(&missing)])), 3);
    assert_eq!(code(&manysr(&["no-such-command"])), 2);

    let data = tmp.path().join("data");
    write_corpus(&data);
    let run = tmp.path().join("run");
    let boom = train_tiny(
        &data,
        &run,
        &[
            "--set",
            "lr_g.initial_lr=1e30",
            "--set",
            "total_iterations=20",
        ],
    );
    assert_eq!(
        code(&boom),
        4,
        "stderr: {}",
        String::from_utf8_lossy(&boom.stderr)
    );

    let run = tmp.path().join("run2");
    ok(&train_tiny(&data, &run, &[]));
    let ck = run.join("checkpoints/iter_00000002");
    let ds = format!("d={}", s(&data));
    let e = manysr(&[
        "eval",
        "--checkpoints",
        s(&ck),
        "--dataset",
        &ds,
        "--lpips",
        "pretrained",
        "--out",
        o,
    ]);
    assert_eq!(code(&e), 5);
    assert_eq!(
        code(&manysr(&[
            "sr",
            "--checkpoint",
            s(&ck),
            "--input",
            s(&data),
            "--out",
            o,
            "--samples",
            "0"
        ])),
        2
    );
}

#[test]
fn training_writes_effective_config_and_repeats_bytewise() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    write_corpus(&data);
    let a = tmp.path().join("a");
    let b = tmp.path().join("b");
    ok(&train_tiny(&data, &a, &["--seed", "7"]));
    ok(&train_tiny(&data, &b, &["--seed", "7"]));

    let eff = RunConfig::from_file(&a.join("effective_config.toml")).unwrap();
    assert_eq!(eff.seed, 7);
    assert_eq!(
        (eff.arch.num_rrdb, eff.patch_size, eff.total_iterations),
        (1, 32, 2)
    );
    assert_eq!(eff.train_dir.as_deref(), Some(data.as_path()));

    let csv_a = std::fs::read(a.join("loss.csv")).unwrap();
    assert_eq!(csv_a, std::fs::read(b.join("loss.csv")).unwrap());
    let g = "checkpoints/iter_00000002/generator.safetensors";
    assert_eq!(
        std::fs::read(a.join(g)).unwrap(),
        std::fs::read(b.join(g)).unwrap()
    );

    let c = tmp.path().join("c");
    ok(&train_tiny(&data, &c, &["--seed", "8"]));
    assert_ne!(csv_a, std::fs::read(c.join("loss.csv")).unwrap());
}

#[test]
fn sr_eval_noise_stats_and_blur_scan() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    write_corpus(&data);
    let run = tmp.path().join("run");
    let mut gan = vec![
        "train-gan",
        "--preset",
        "table1_f",
        "--profile",
        "desk",
        "--quiet",
    ];
    gan.extend(TINY);
    gan.extend([
        "--set",
        "checkpoint_every=1",
        "--data",
        s(&data),
        "--out",
        s(&run),
    ]);
    ok(&manysr(&gan));
    let ck = run.join("checkpoints/iter_00000002");

    let input = fixtures().join("fixture_00.png");
    let one = |dir: &Path| {
        ok(&manysr(&[
            "--seed",
            "3",
            "sr",
            "--checkpoint",
            s(&ck),
            "--input",
            s(&input),
            "--out",
            s(dir),
        ]));
        std::fs::read(dir.join("fixture_00_sr.png")).unwrap()
    };
    let x = one(&tmp.path().join("sr1"));
    let y = one(&tmp.path().join("sr2"));
    assert_eq!(x, y);
    let sr =
        manysr::image::ImageTensor::load_png(tmp.path().join("sr1/fixture_00_sr.png")).unwrap();
    assert_eq!(sr.dims(), (96, 128, 3));
    let many = tmp.path().join("many");
    ok(&manysr(&[
        "sr",
        "--checkpoint",
        s(&ck),
        "--input",
        s(&input),
        "--out",
        s(&many),
        "--samples",
        "3",
    ]));
    for k in 0..3 {
        assert!(many.join(format!("fixture_00_sample{k}.png")).exists());
    }

    let ev = tmp.path().join("eval");
    let ds = format!("Set5={}", s(&fixtures()));
    let md = ok(&manysr(&[
        "eval",
        "--checkpoints",
        "last2",
        "--run",
        s(&run),
        "--dataset",
        &ds,
        "--name",
        "tiny",
        "--out",
        s(&ev),
    ]));
    assert!(md.starts_with("| Model | Set5 |\n|---|---|\n| tiny | "));
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(ev.join("report.json")).unwrap()).unwrap();
    assert_eq!(report["checkpoints"].as_array().unwrap().len(), 2);
    assert_eq!(report["crop_border"], 4);
    assert_eq!(
        code(&manysr(&[
            "eval",
            "--checkpoints",
            "last2",
            "--dataset",
            &ds,
            "--out",
            s(&ev)
        ])),
        2
    );

    let ns = tmp.path().join("ns");
    ok(&manysr(&[
        "noise-stats",
        "--checkpoint",
        s(&ck),
        "--out",
        s(&ns),
    ]));
    let csv = std::fs::read_to_string(ns.join("noise_stats.csv")).unwrap();
    assert!(csv.starts_with("block_index,min,q1,median,q3,max\n"));
    assert_eq!(csv.lines().count(), 2);
    assert!(std::fs::read_to_string(ns.join("noise_stats.svg"))
        .unwrap()
        .starts_with("<svg"));

    let scan = tmp.path().join("scan/report.json");
    let fx = fixtures();
    let args = [
        "--seed",
        "1",
        "blur-scan",
        "--data",
        s(&fx),
        "--patch",
        "16",
        "--samples",
        "50",
        "--out",
        s(&scan),
    ];
    ok(&manysr(&args));
    let first = std::fs::read(&scan).unwrap();
    let json: serde_json::Value = serde_json::from_slice(&first).unwrap();
    assert_eq!(json["total"], 50);
    assert!(json["fraction"].as_f64().unwrap() >= 0.0);
    ok(&manysr(&args));
    assert_eq!(std::fs::read(&scan).unwrap(), first);
    assert!(tmp.path().join("scan/command.json").exists());

    let prep = tmp.path().join("prep");
    ok(&manysr(&[
        "prepare",
        "--data",
        s(&data),
        "--out",
        s(&prep),
        "--patch",
        "32",
    ]));
    let m: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(prep.join("dataset.json")).unwrap()).unwrap();
    assert_eq!(m["usable"], 4);
    assert_eq!(
        code(&manysr(&[
            "prepare",
            "--data",
            s(&data),
            "--out",
            s(&prep),
            "--patch",
            "4096"
        ])),
        3
    );
}
