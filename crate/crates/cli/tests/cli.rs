use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use flowiid_core::data::{load_dataset, write_f32_dump};

fn flowiid(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_flowiid"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = flowiid(args);
    assert!(
        out.status.success(),
        "flowiid {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn code(args: &[&str]) -> i32 {
    flowiid(args).status.code().expect("exit code")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn tree(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(dir).unwrap().to_path_buf(), std::fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

fn tiny_conf(dir: &Path) -> PathBuf {
    let p = dir.join("test.conf");
    std::fs::write(
        &p,
        "model.preset = tiny\n\
         train.batch_size = 4\n\
         train.vae_epochs = 1\n\
         train.fm_epochs = 1\n\
         train.max_steps = 2\n\
         train.checkpoint_every = 1\n\
         train.vae_lr = 0.001\n\
         train.fm_lr = 0.001\n",
    )
    .unwrap();
    p
}

#[test]
fn gen_data_is_deterministic() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    for d in [&a, &b] {
        ok(&["gen-data", "--seed", "3", "--count", "5", "--side", "32", "--out", s(d)]);
    }
    // The resolved configuration records the output directory; everything else must match.
    let data_only = |d: &Path| -> Vec<_> {
        tree(d).into_iter().filter(|(p, _)| p != Path::new("config.resolved")).collect()
    };
    let (ta, tb) = (data_only(&a), data_only(&b));
    assert!(!ta.is_empty());
    assert!(ta == tb, "dataset bytes differ");
    let resolved = |d: &Path| -> Vec<String> {
        std::fs::read_to_string(d.join("config.resolved"))
            .unwrap()
            .lines()
            .filter(|l| !l.starts_with("paths.out"))
            .map(String::from)
            .collect()
    };
    assert_eq!(resolved(&a), resolved(&b));
    assert!(a.join("manifest.txt").exists());
}

#[test]
fn usage_errors_exit_one() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path().join("d");
    assert_eq!(code(&["gen-data", "--count", "0", "--out", s(&d)]), 1);
    assert_eq!(code(&["no-such-command"]), 1);
    assert_eq!(code(&["count-params", "--set", "model.bogus=1"]), 1);
    assert_eq!(code(&["count-params", "--preset", "huge"]), 1);

    ok(&["gen-data", "--count", "2", "--side", "32", "--out", s(&d)]);
    assert_eq!(code(&["gen-data", "--count", "2", "--side", "32", "--out", s(&d)]), 1);
    ok(&["gen-data", "--count", "2", "--side", "32", "--out", s(&d), "--force"]);
}

#[test]
fn count_params_orders_the_ablations() {
    let table = ok(&["count-params", "--preset", "tiny"]);
    let inference = |name: &str| -> usize {
        let row = table.lines().find(|l| l.starts_with(&format!("{name},"))).unwrap();
        row.split(',').nth(6).unwrap().parse().unwrap()
    };
    assert!(inference("five_blocks") > inference("full"));
    assert!(inference("full") > inference("no_concat"));
    assert_eq!(inference("full"), 1_513_217);
}

#[test]
fn eval_scores_ground_truth_as_perfect_and_flags_missing_stems() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    let pred = tmp.path().join("pred");
    ok(&["gen-data", "--count", "3", "--side", "32", "--test-count", "1", "--out", s(&data)]);
    std::fs::create_dir_all(&pred).unwrap();
    for e in load_dataset(&data, None).unwrap().entries {
        write_f32_dump(&pred.join(format!("{}_albedo.f32", e.stem)), &e.scene.albedo).unwrap();
        write_f32_dump(&pred.join(format!("{}_shading.f32", e.stem)), &e.scene.shading).unwrap();
    }
    let report = tmp.path().join("report.csv");
    ok(&["eval", "--pred", s(&pred), "--gt", s(&data), "--report", s(&report)]);
    let csv = std::fs::read_to_string(&report).unwrap();
    let mut lines = csv.lines();
    let header: Vec<&str> = lines.next().unwrap().split(',').collect();
    let rows: Vec<Vec<&str>> = lines.map(|l| l.split(',').collect()).collect();
    assert!(rows.len() >= 3);
    for row in &rows {
        for (col, v) in header.iter().zip(row) {
            if col.ends_with("mse") {
                assert_eq!(v.parse::<f64>().unwrap(), 0.0, "{col}");
            } else if col.ends_with("_ssim") {
                assert!((v.parse::<f64>().unwrap() - 1.0).abs() < 1e-12, "{col}");
            }
        }
    }

    std::fs::remove_file(pred.join("000000_albedo.f32")).unwrap();
    assert_eq!(code(&["eval", "--pred", s(&pred), "--gt", s(&data)]), 2);
}

#[test]
fn train_infer_and_reproduce_from_the_resolved_config() {
    let tmp = tempfile::tempdir().unwrap();
    let conf = tiny_conf(tmp.path());
    let c = s(&conf);
    let data = tmp.path().join("data");
    ok(&["--config", c, "gen-data", "--count", "10", "--test-count", "2", "--seed", "1", "--out", s(&data)]);

    let vae_dir = tmp.path().join("vae");
    ok(&["--config", c, "train-vae", "--data", s(&data), "--out", s(&vae_dir)]);
    for f in ["vae.ckpt", "vae_state.ckpt", "vae_loss.csv", "vae_summary.txt", "config.resolved"] {
        assert!(vae_dir.join(f).exists(), "{f}");
    }
    let vae_ckpt = vae_dir.join("vae.ckpt");

    let fm_dir = tmp.path().join("fm");
    ok(&["--config", c, "train-fm", "--data", s(&data), "--vae", s(&vae_ckpt), "--out", s(&fm_dir)]);
    for f in ["model.ckpt", "fm_state.ckpt", "fm_loss.csv", "fm_time_hist.csv"] {
        assert!(fm_dir.join(f).exists(), "{f}");
    }
    let loss = std::fs::read_to_string(fm_dir.join("fm_loss.csv")).unwrap();
    assert_eq!(loss.lines().count(), 3, "{loss}");

    let again = tmp.path().join("fm2");
    ok(&[
        "--config",
        s(&fm_dir.join("config.resolved")),
        "train-fm",
        "--out",
        s(&again),
    ]);
    assert_eq!(std::fs::read(again.join("fm_loss.csv")).unwrap(), loss.as_bytes());
    assert_eq!(std::fs::read(again.join("model.ckpt")).unwrap(), std::fs::read(fm_dir.join("model.ckpt")).unwrap());

    let model = fm_dir.join("model.ckpt");
    let pred = tmp.path().join("pred");
    ok(&["infer", "--checkpoint", s(&model), "--input", s(&data), "--split", "test", "--out", s(&pred)]);
    let infer_csv = std::fs::read_to_string(pred.join("infer.csv")).unwrap();
    assert_eq!(infer_csv.lines().count(), 3);
    for stem in ["000008", "000009"] {
        for layer in ["shading", "albedo", "reconstruction"] {
            assert!(pred.join(format!("{stem}_{layer}.png")).exists());
            assert!(pred.join(format!("{stem}_{layer}.f32")).exists());
        }
    }
    let report = ok(&["eval", "--pred", s(&pred), "--gt", s(&data), "--split", "test"]);
    assert!(report.lines().count() >= 3);

    // A wrong-resolution input is a data error; with --resize it is accepted.
    let odd = tmp.path().join("odd");
    ok(&["gen-data", "--count", "1", "--side", "48", "--test-count", "0", "--out", s(&odd)]);
    let png = odd.join("scenes/000000/image.png");
    assert_eq!(code(&["infer", "--checkpoint", s(&model), "--input", s(&png), "--out", s(&tmp.path().join("o1"))]), 2);
    ok(&["infer", "--checkpoint", s(&model), "--input", s(&png), "--resize", "--out", s(&tmp.path().join("o2"))]);

    // A VAE trained for another architecture is refused before training.
    assert_ne!(
        code(&[
            "--config", c, "--set", "model.vae_width=16", "train-fm", "--data", s(&data), "--vae", s(&vae_ckpt),
            "--out", s(&tmp.path().join("bad")),
        ]),
        0
    );

    let abl = tmp.path().join("ablate");
    ok(&["--config", c, "ablate", "--data", s(&data), "--vae", s(&vae_ckpt), "--out", s(&abl)]);
    let table = std::fs::read_to_string(abl.join("ablation.csv")).unwrap();
    assert_eq!(table.lines().count(), 4, "{table}");
}

#[test]
fn vae_resume_continues_the_log() {
    let tmp = tempfile::tempdir().unwrap();
    let conf = tiny_conf(tmp.path());
    let c = s(&conf);
    let data = tmp.path().join("data");
    ok(&["gen-data", "--count", "8", "--test-count", "0", "--side", "64", "--out", s(&data)]);
    let full = tmp.path().join("full");
    ok(&["--config", c, "--set", "train.vae_epochs=2", "--set", "train.max_steps=4", "train-vae", "--data", s(&data), "--out", s(&full)]);
    let part = tmp.path().join("part");
    ok(&["--config", c, "train-vae", "--data", s(&data), "--out", s(&part)]);
    ok(&[
        "--config", c, "--set", "train.vae_epochs=2", "--set", "train.max_steps=4", "train-vae", "--data", s(&data), "--resume",
        s(&part.join("vae_state.ckpt")), "--out", s(&part),
    ]);
    assert_eq!(
        std::fs::read(full.join("vae_loss.csv")).unwrap(),
        std::fs::read(part.join("vae_loss.csv")).unwrap()
    );
}
