use std::path::Path;
use std::process::{Command, Output};

use iretinex_core::colorspace::ImageRgb;
use iretinex_core::io::save_image;

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_iretinex"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn write_image(path: &Path, h: usize, w: usize, shift: usize) {
    let img = ImageRgb::from_fn(h, w, |y, x, c| ((y * 13 + x * 5 + c * 40 + shift) % 256) as f64 / 255.0);
    save_image(&img, path).unwrap();
}

const TINY: &str = "channels = 4\ndepth = 1\nicrr_width = 4\ntotal_iters = 3\nbatch = 1\n\
                    patch = 16\ntexture_size = 16\nbundled_pairs = 2\ncheckpoint_every = 2\n";

fn tiny_checkpoint(dir: &Path) -> std::path::PathBuf {
    std::fs::write(dir.join("tiny.toml"), TINY).unwrap();
    let ckpt = dir.join("tiny.ckpt");
    let o = run(&["train", "--config", p(&dir.join("tiny.toml")), "--out", p(&ckpt)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    ckpt
}

#[test]
fn usage_errors_exit_2() {
    assert_eq!(run(&[]).status.code(), Some(2));
    assert_eq!(run(&["audit", "--H", "16"]).status.code(), Some(2));
    assert_eq!(run(&["bogus"]).status.code(), Some(2));
    assert_eq!(run(&["audit", "--H", "x", "--W", "1", "--C", "1", "--s", "1"]).status.code(), Some(2));
}

#[test]
fn runtime_failures_exit_1() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("missing.png");
    let o = run(&["metrics", "--a", p(&missing), "--b", p(&missing)]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("missing.png"));

    std::fs::write(dir.path().join("bad.toml"), "no_such_key = 1\n").unwrap();
    let o = run(&["train", "--config", p(&dir.path().join("bad.toml")), "--out", p(&dir.path().join("x"))]);
    assert_eq!(o.status.code(), Some(1));
    assert_eq!(run(&["gradcheck", "--module", "nope"]).status.code(), Some(1));
}

#[test]
fn audit_prints_closed_forms() {
    let o = run(&["audit", "--H", "16", "--W", "16", "--C", "32", "--s", "2"]);
    assert!(o.status.success());
    let out = stdout(&o);
    let mut lines = out.lines();
    assert_eq!(lines.next(), Some("mres=2621440 gmsa=4194304"));
    let json: serde_json::Value = serde_json::from_str(lines.next().unwrap()).unwrap();
    assert_eq!(json["live_matches"], true);
}

#[test]
fn metrics_on_identical_images() {
    let dir = tempfile::tempdir().unwrap();
    let x = dir.path().join("x.png");
    write_image(&x, 16, 16, 0);
    let out_dir = dir.path().join("report");
    let o = run(&["metrics", "--a", p(&x), "--b", p(&x), "--out", p(&out_dir)]);
    assert!(o.status.success());
    let out = stdout(&o);
    assert_eq!(out.lines().next(), Some("psnr=inf ssim=1.0"));
    let json: serde_json::Value = serde_json::from_str(out.lines().nth(1).unwrap()).unwrap();
    assert_eq!(json["psnr"], "inf");
    for f in ["histogram_a.csv", "histogram_b.csv", "error_map.csv", "error_map.png"] {
        assert!(out_dir.join(f).is_file(), "{f}");
    }
}

#[test]
fn synth_data_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let input = dir.path().join("clean");
    std::fs::create_dir(&input).unwrap();
    write_image(&input.join("a.png"), 8, 8, 0);
    write_image(&input.join("b.ppm"), 8, 8, 9);
    let go = |out: &str| {
        let out = dir.path().join(out);
        let o = run(&[
            "synth-data", "--in", p(&input), "--out", p(&out), "--gamma", "2.0", "--alpha", "0.3", "--sigma",
            "0.02", "--seed", "7", "--poisson",
        ]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
        out
    };
    let (a, b) = (go("one"), go("two"));
    for name in ["a.png", "b.ppm"] {
        assert_eq!(std::fs::read(a.join(name)).unwrap(), std::fs::read(b.join(name)).unwrap());
    }
}

#[test]
fn train_enhance_decompose_round() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = tiny_checkpoint(dir.path());
    let trace = std::fs::read_to_string(dir.path().join("tiny.ckpt.trace.csv")).unwrap();
    assert_eq!(trace.lines().count(), 4);

    let input = dir.path().join("inputs");
    std::fs::create_dir(&input).unwrap();
    write_image(&input.join("one.png"), 16, 16, 0);
    write_image(&input.join("two.png"), 10, 14, 3);
    write_image(&input.join("three.ppm"), 8, 8, 5);
    std::fs::write(input.join("notes.txt"), "skip me").unwrap();
    let out = dir.path().join("enhanced");
    let o = run(&["enhance", "--ckpt", p(&ckpt), "--in", p(&input), "--out", p(&out)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let mut names: Vec<_> = std::fs::read_dir(&out)
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .collect();
    names.sort();
    assert_eq!(names, ["one.png", "three.ppm", "two.png"]);

    let again = dir.path().join("again");
    run(&["enhance", "--ckpt", p(&ckpt), "--in", p(&input.join("two.png")), "--out", p(&again)]);
    assert_eq!(std::fs::read(out.join("two.png")).unwrap(), std::fs::read(again.join("two.png")).unwrap());

    let dec = dir.path().join("dec");
    let o = run(&["decompose", "--ckpt", p(&ckpt), "--in", p(&input.join("one.png")), "--out", p(&dec)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let json: serde_json::Value = serde_json::from_str(stdout(&o).trim()).unwrap();
    let cos = json["cosine_similarity"].as_f64().unwrap();
    assert!((-1.0..=1.0).contains(&cos));
    assert!(dec.join("illumination.png").is_file() && dec.join("reflectance.png").is_file());
}

#[test]
fn gradcheck_single_module() {
    let o = run(&["gradcheck", "--module", "losses"]);
    assert!(o.status.success());
    assert!(stdout(&o).starts_with("pass losses::rmc_loss"));
}
