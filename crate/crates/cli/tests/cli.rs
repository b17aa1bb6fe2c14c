use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use hsr_core::imaging::{self, Image};

fn hsr(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_hsr"))
        .args(args)
        .env_remove("HSR_SEED")
        .output()
        .expect("spawn hsr")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn repo_root() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..")
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn test_image(h: usize, w: usize) -> Image {
    Image::from_fn(h, w, |y, x, c| {
        let edge = if (x / 6 + y / 9) % 2 == 0 { 0.2 } else { 0.0 };
        0.4 + 0.3 * ((y as f64 * 0.21 + x as f64 * 0.13 + c as f64).sin()) + edge
    })
    .unwrap()
}

fn write_image(path: &Path, img: &Image) {
    imaging::save(img, path).unwrap();
}

/// Tiny x2 training config over `hr_dir`, writing into `dir`.
fn tiny_config(dir: &Path, hr_dir: &Path, steps: u64) -> PathBuf {
    let cfg = format!(
        r#"{{
  "lr": 0.003, "steps": {steps}, "batch_size": 1, "patch_size": 16, "seed": 3,
  "data_dir": "{}", "checkpoint": "{}", "loss_csv": "{}",
  "model": {{ "channels": 16, "n_blocks": 1, "iterations": 2, "scale": 2 }}
}}"#,
        p(hr_dir),
        p(&dir.join("model.ckpt")),
        p(&dir.join("loss.csv")),
    );
    let path = dir.join("train.json");
    fs::write(&path, cfg).unwrap();
    path
}

#[test]
fn usage_errors_exit_1() {
    assert_eq!(code(&hsr(&[])), 1);
    assert_eq!(code(&hsr(&["bogus"])), 1);
    assert_eq!(code(&hsr(&["lss", "--in", "a.png", "--fast"])), 1);
    assert_eq!(code(&hsr(&["degrade", "--in", "a.png", "--out", "b.png"])), 1);
    assert_eq!(code(&hsr(&["degrade", "--in", "a.png", "--out", "b.png", "--scale", "1"])), 1);
}

#[test]
fn help_for_every_subcommand() {
    assert_eq!(code(&hsr(&["--help"])), 0);
    for sub in ["train", "infer", "degrade", "eval", "lss", "params", "gradcheck", "hqs-demo", "features"] {
        let out = hsr(&[sub, "--help"]);
        assert_eq!(code(&out), 0, "{sub}");
        assert!(stdout(&out).contains("Usage"), "{sub}");
    }
}

#[test]
fn missing_files_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("missing.png");
    assert_eq!(code(&hsr(&["lss", "--in", p(&missing)])), 2);
    assert_eq!(code(&hsr(&["params", "--config", p(&missing)])), 2);
    let junk = dir.path().join("junk.ckpt");
    fs::write(&junk, b"nope").unwrap();
    let out = hsr(&["infer", "--ckpt", p(&junk), "--in", p(&missing), "--out", p(&missing)]);
    assert_eq!(code(&out), 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("bad magic"));
}

#[test]
fn degrade_shapes_and_idempotence() {
    let dir = tempfile::tempdir().unwrap();
    let src = dir.path().join("hr.png");
    write_image(&src, &test_image(96, 96));
    let (a, b) = (dir.path().join("a.png"), dir.path().join("b.png"));
    assert_eq!(code(&hsr(&["degrade", "--in", p(&src), "--out", p(&a), "--scale", "4"])), 0);
    assert_eq!(code(&hsr(&["degrade", "--in", p(&src), "--out", p(&b), "--scale", "4"])), 0);
    let lr = imaging::load(&a).unwrap();
    assert_eq!((lr.height(), lr.width()), (24, 24));
    assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
    // No temporary files are left behind.
    assert_eq!(fs::read_dir(dir.path()).unwrap().count(), 3);
}

#[test]
fn params_reports_paper_counts() {
    let root = repo_root();
    let x4 = hsr(&["params", "--config", p(&root.join("configs/paper_x4.json"))]);
    assert_eq!(code(&x4), 0);
    assert!(stdout(&x4).starts_with("parameters: 1313680\n"), "{}", stdout(&x4));
    let x2 = hsr(&["params", "--config", p(&root.join("configs/paper_x2.json"))]);
    assert!(stdout(&x2).starts_with("parameters: 1292908\n"));
    let bare = hsr(&["params", "--config", p(&root.join("configs/ablation/blocks_n10.json"))]);
    assert_eq!(stdout(&bare), stdout(&x4));
}

#[test]
fn lss_of_constant_image_is_one() {
    let dir = tempfile::tempdir().unwrap();
    let img = dir.path().join("flat.png");
    write_image(&img, &Image::filled(40, 40, [0.3, 0.5, 0.7]).unwrap());
    let out = hsr(&["lss", "--in", p(&img)]);
    assert_eq!(code(&out), 0);
    assert_eq!(stdout(&out), "1.000000\n");
}

#[test]
fn gradcheck_passes() {
    let out = hsr(&["gradcheck", "--cases", "3"]);
    assert_eq!(code(&out), 0, "{}", stdout(&out));
    assert!(stdout(&out).lines().all(|l| l.ends_with(" ok")));
}

#[test]
fn hqs_demo_improves_on_bicubic() {
    let dir = tempfile::tempdir().unwrap();
    let src = dir.path().join("ref.png");
    write_image(&src, &test_image(32, 32));
    let hist = dir.path().join("hist.csv");
    let est = dir.path().join("est.png");
    let out = hsr(&[
        "hqs-demo", "--in", p(&src), "--scale", "2", "--iters", "4", "--history", p(&hist), "--out", p(&est),
    ]);
    assert_eq!(code(&out), 0);
    let text = stdout(&out);
    let db = |prefix: &str| -> f64 {
        let line = text.lines().find(|l| l.starts_with(prefix)).unwrap();
        line.rsplit(' ').next().unwrap().parse().unwrap()
    };
    assert!(db("hqs") > db("bicubic"), "{text}");
    assert!(fs::read_to_string(&hist).unwrap().starts_with("step,beta,objective\n"));
    assert_eq!(imaging::load(&est).unwrap().height(), 32);
}

#[test]
fn train_infer_eval_features() {
    let dir = tempfile::tempdir().unwrap();
    let hr_dir = dir.path().join("hr");
    fs::create_dir(&hr_dir).unwrap();
    write_image(&hr_dir.join("a.png"), &test_image(48, 48));
    write_image(&hr_dir.join("b.png"), &test_image(40, 44));
    let cfg = tiny_config(dir.path(), &hr_dir, 3);

    let out = hsr(&["train", "--config", p(&cfg)]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let ckpt = dir.path().join("model.ckpt");
    let first = fs::read(&ckpt).unwrap();
    assert_eq!(fs::read_to_string(dir.path().join("loss.csv")).unwrap().lines().count(), 4);

    // Same seed, same bytes; HSR_SEED changes them.
    assert_eq!(code(&hsr(&["train", "--config", p(&cfg)])), 0);
    assert_eq!(fs::read(&ckpt).unwrap(), first);
    let reseeded = Command::new(env!("CARGO_BIN_EXE_hsr"))
        .args(["train", "--config", p(&cfg)])
        .env("HSR_SEED", "99")
        .output()
        .unwrap();
    assert_eq!(code(&reseeded), 0);
    assert_ne!(fs::read(&ckpt).unwrap(), first);
    let bad_seed = Command::new(env!("CARGO_BIN_EXE_hsr"))
        .args(["train", "--config", p(&cfg)])
        .env("HSR_SEED", "x")
        .output()
        .unwrap();
    assert_eq!(code(&bad_seed), 1);

    let lr = dir.path().join("lr.png");
    write_image(&lr, &test_image(13, 10));
    let sr = dir.path().join("sr.png");
    assert_eq!(code(&hsr(&["infer", "--ckpt", p(&ckpt), "--in", p(&lr), "--out", p(&sr)])), 0);
    let sr_img = imaging::load(&sr).unwrap();
    assert_eq!((sr_img.height(), sr_img.width()), (26, 20));

    let (c1, c2) = (dir.path().join("e1.csv"), dir.path().join("e2.csv"));
    for csv in [&c1, &c2] {
        let out = hsr(&["eval", "--ckpt", p(&ckpt), "--hr-dir", p(&hr_dir), "--scale", "2", "--y-only", "--csv", p(csv)]);
        assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    }
    let csv = fs::read_to_string(&c1).unwrap();
    assert_eq!(csv, fs::read_to_string(&c2).unwrap());
    let rows: Vec<&str> = csv.lines().collect();
    assert_eq!(rows[0], "name,psnr,ssim,lss");
    assert!(rows[1].starts_with("a.png,") && rows[2].starts_with("b.png,"));
    assert_eq!(code(&hsr(&["eval", "--ckpt", p(&ckpt), "--hr-dir", p(&hr_dir), "--scale", "3"])), 1);

    let feats = dir.path().join("feats");
    let out = hsr(&["features", "--ckpt", p(&ckpt), "--in", p(&lr), "--out-dir", p(&feats)]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let names: Vec<String> = fs::read_dir(&feats)
        .unwrap()
        .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
        .collect();
    // n_blocks = 1, K = 2: 4 HEB branches and 3 MSA levels per block and iteration.
    assert_eq!(names.iter().filter(|n| n.starts_with("heb_branch_")).count(), 8);
    assert_eq!(names.iter().filter(|n| n.starts_with("msa_level_")).count(), 6);
    assert!(names.contains(&"lr_feature_0_0.png".to_string()));
    let bytes = fs::read(feats.join("lr_feature_0_0.png")).unwrap();
    assert_eq!((bytes[24], bytes[25]), (8, 0), "8-bit grayscale");

    let out = hsr(&["features", "--ckpt", p(&ckpt), "--in", p(&lr), "--out-dir", p(&feats), "--stage", "nope"]);
    assert_eq!(code(&out), 1);
    assert!(String::from_utf8_lossy(&out.stderr).contains("lr_feature"));
}

#[test]
fn non_finite_training_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    let hr_dir = dir.path().join("hr");
    fs::create_dir(&hr_dir).unwrap();
    write_image(&hr_dir.join("a.png"), &test_image(40, 40));
    let cfg = tiny_config(dir.path(), &hr_dir, 2);
    let text = fs::read_to_string(&cfg).unwrap().replace("\"lr\": 0.003", "\"lr\": 1e300");
    fs::write(&cfg, text).unwrap();
    let out = hsr(&["train", "--config", p(&cfg)]);
    assert_eq!(code(&out), 3, "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stderr).contains("non-finite loss at step 2"));
}
