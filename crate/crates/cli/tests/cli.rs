use std::path::Path;
use std::process::{Command, Output};

use stoken::blocks::ArchConfig;
use stoken::flops::count_model;
use stoken::image::Image;

fn stoken(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_stoken")).args(args).output().expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

#[test]
fn flops_reports_presets_and_rejects_unknown_arch() {
    let out = stoken(&["flops", "--arch", "svit-s", "--res", "224"]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    assert!(stdout(&out).contains("params 25.47M, MACs 4.34G"), "{}", stdout(&out));

    let out = stoken(&["flops", "--arch", "bogus"]);
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("svit-s, svit-b, svit-l, tiny"));

    assert_eq!(code(&stoken(&["flops"])), 2);
    assert_eq!(code(&stoken(&["flops", "--arch", "tiny", "--frobnicate"])), 2);
}

#[test]
fn flops_csv_matches_the_library_report() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("tiny.csv");
    let out = stoken(&["flops", "--arch", "tiny", "--res", "32", "--csv", p(&csv)]);
    assert_eq!(code(&out), 0);
    let text = std::fs::read_to_string(&csv).unwrap();
    let rep = count_model(&ArchConfig::tiny(), 32).unwrap();
    assert_eq!(text, rep.to_csv());

    let cfg = dir.path().join("arch.txt");
    std::fs::write(&cfg, "arch = tiny\ngrids = 2, 2, 1, 1\n").unwrap();
    let out = stoken(&["flops", "--config", p(&cfg)]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    std::fs::write(&cfg, "arch = tiny\ngrids = 3, 2, 1, 1\n").unwrap();
    let out = stoken(&["flops", "--config", p(&cfg)]);
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("stage 1"));
}

#[test]
fn verify_suites_and_usage_errors() {
    let out = stoken(&["verify", "--suite", "oracle"]);
    assert_eq!(code(&out), 0, "{}", stdout(&out));
    let text = stdout(&out);
    let lines: Vec<_> = text.lines().filter(|l| l.starts_with("PASS") || l.starts_with("FAIL")).collect();
    assert!(lines.len() >= 12 && lines.iter().all(|l| l.starts_with("PASS")), "{text}");
    assert!(text.contains("81 geometries"));

    assert_eq!(code(&stoken(&["verify", "--suite", ""])), 2);
    assert_eq!(code(&stoken(&["verify", "--suite", "everything"])), 2);
    assert_eq!(code(&stoken(&["verify"])), 2);
}

#[test]
fn gen_data_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a.stds"), dir.path().join("b.stds"));
    for f in [&a, &b] {
        let out =
            stoken(&["gen-data", "--out", p(f), "--per-class", "3", "--classes", "4", "--kind", "striped-textures"]);
        assert_eq!(code(&out), 0, "{}", stderr(&out));
    }
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    let h = dir.path().join("h.stds");
    stoken(&[
        "gen-data",
        "--out",
        p(&h),
        "--per-class",
        "3",
        "--classes",
        "4",
        "--kind",
        "striped-textures",
        "--held-out",
    ]);
    assert_ne!(std::fs::read(&a).unwrap(), std::fs::read(&h).unwrap());
    assert_eq!(code(&stoken(&["gen-data", "--out", p(&h), "--classes", "11"])), 2);
}

#[test]
fn train_infer_and_visualize() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let data = d.join("train.stds");
    assert_eq!(code(&stoken(&["gen-data", "--out", p(&data), "--per-class", "16"])), 0);
    let cfg = d.join("run.txt");
    std::fs::write(&cfg, "# short run\nsteps = 60\nbatch = 16\n").unwrap();
    let run = d.join("run");
    let out = stoken(&["train", "--config", p(&cfg), "--data", p(&data), "--out", p(&run)]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let log = std::fs::read_to_string(run.join("metrics.log")).unwrap();
    let steps: Vec<_> = log.lines().filter(|l| !l.starts_with('#')).collect();
    assert_eq!(steps.len(), 60);
    assert!(steps[0].starts_with("1 ") && steps[0].split(' ').count() == 3);
    assert!(run.join("config.txt").is_file());

    for index in ["0", "5", "10", "31"] {
        let img = d.join(format!("sample{index}.ppm"));
        let out = stoken(&["export-image", "--data", p(&data), "--index", index, "--out", p(&img)]);
        let label = stdout(&out).trim().strip_prefix("label ").unwrap().to_string();
        let out = stoken(&["infer", "--ckpt", p(&run.join("best.stwt")), "--image", p(&img)]);
        assert_eq!(code(&out), 0, "{}", stderr(&out));
        let text = stdout(&out);
        assert!(text.starts_with(&format!("label {label}\n")), "{text}");
        let prob: f64 = text
            .lines()
            .find(|l| l.starts_with(&format!("p[{label}]")))
            .and_then(|l| l.split(" = ").nth(1))
            .unwrap()
            .parse()
            .unwrap();
        assert!(prob > 0.5);
    }

    let img = d.join("sample0.ppm");
    let viz = d.join("viz");
    let ckpt = run.join("best.stwt");
    let out =
        stoken(&["viz", "--ckpt", p(&ckpt), "--image", p(&img), "--stage", "1", "--anchor", "5,20", "--out", p(&viz)]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let seg = Image::read(viz.join("segmentation_stage1.ppm")).unwrap();
    let heat = Image::read(viz.join("heatmap_stage1_5_20.pgm")).unwrap();
    assert_eq!((seg.channels, seg.width, heat.channels, heat.height), (3, 32, 1, 32));
    assert_eq!(heat.data.iter().max(), Some(&255));

    let out = stoken(&["viz", "--ckpt", p(&ckpt), "--image", p(&img), "--anchor", "32,0", "--out", p(&viz)]);
    assert_eq!(code(&out), 2);
    let out = stoken(&["viz", "--ckpt", p(&ckpt), "--image", p(&img), "--stage", "9", "--out", p(&viz)]);
    assert_eq!(code(&out), 2);

    // 64×64 is an exact 2× enlargement target; 48×48 is not
    let big = Image::read(&img).unwrap().resize_exact(64, 64).unwrap();
    big.write(d.join("big.ppm")).unwrap();
    assert_eq!(code(&stoken(&["infer", "--ckpt", p(&ckpt), "--image", p(&d.join("big.ppm"))])), 0);
    Image::filled(48, 48, [9, 9, 9]).write(d.join("odd.ppm")).unwrap();
    assert_eq!(code(&stoken(&["infer", "--ckpt", p(&ckpt), "--image", p(&d.join("odd.ppm"))])), 2);

    let bytes = std::fs::read(&img).unwrap();
    let trunc = d.join("trunc.ppm");
    std::fs::write(&trunc, &bytes[..bytes.len() / 2]).unwrap();
    let out = stoken(&["infer", "--ckpt", p(&ckpt), "--image", p(&trunc)]);
    assert_eq!(code(&out), 3);
    assert!(stderr(&out).contains("byte"));

    let ck = std::fs::read(&ckpt).unwrap();
    let bad = d.join("bad.stwt");
    std::fs::write(&bad, &ck[..ck.len() - 7]).unwrap();
    let out = stoken(&["infer", "--ckpt", p(&bad), "--image", p(&img), "--config", p(&run.join("config.txt"))]);
    assert_eq!(code(&out), 3, "{}", stderr(&out));
}

#[test]
fn malformed_and_missing_inputs() {
    let dir = tempfile::tempdir().unwrap();
    let junk = dir.path().join("junk.stds");
    std::fs::write(&junk, b"STDS\x01\x00garbage").unwrap();
    let out = stoken(&["train", "--data", p(&junk), "--out", p(dir.path())]);
    assert_eq!(code(&out), 3);
    assert!(stderr(&out).contains("byte"));
    let out = stoken(&["train", "--data", p(&dir.path().join("missing.stds")), "--out", p(dir.path())]);
    assert_eq!(code(&out), 3);

    let data = dir.path().join("d.stds");
    stoken(&["gen-data", "--out", p(&data), "--per-class", "2"]);
    let cfg = dir.path().join("c.txt");
    std::fs::write(&cfg, "colour = blue\n").unwrap();
    let out = stoken(&["train", "--config", p(&cfg), "--data", p(&data), "--out", p(dir.path())]);
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("line 1"));
}
