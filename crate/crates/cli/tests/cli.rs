use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use crl_core::dataset::read_disparity;
use crl_core::formats::{read_disparity_pfm, write_disparity_pfm};
use crl_core::{DisparityMap, Tensor};

fn crl(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_crl")).args(args).output().expect("crl runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn synth(out: &Path, preset: &str, count: usize, seed: u64) {
    let o = crl(&["synth", "--preset", preset, "--count", &count.to_string(), "--seed", &seed.to_string(), "--out", p(out)]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
}

fn map(h: usize, w: usize, values: Vec<f64>) -> DisparityMap {
    DisparityMap::new(Tensor::new([1, 1, h, w], values).unwrap(), 0).unwrap()
}

fn write_config(dir: &Path, extra: &str) -> std::path::PathBuf {
    let text = format!(
        "# smoke run\nschedule = 1F-2F-0F\ndataset.F = data\nsteps = 3\nbatch = 2\nbatch.0 = 2\nlr = 1e-3\nmax_disp = 4\nout = ckpt\n{extra}"
    );
    let path = dir.join("train.cfg");
    fs::write(&path, text).unwrap();
    path
}

#[test]
fn synth_is_deterministic_and_accepts_zero_count() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b, empty) = (dir.path().join("a"), dir.path().join("b"), dir.path().join("e"));
    synth(&a, "tiny", 3, 11);
    synth(&b, "tiny", 3, 11);
    for sub in ["left/000002.png", "right/000001.png", "disp/000000.pfm", "manifest.txt"] {
        assert_eq!(fs::read(a.join(sub)).unwrap(), fs::read(b.join(sub)).unwrap(), "{sub}");
    }
    let samples = crl_core::dataset::load_dataset(&a, crl_core::dataset::DispFormat::Pfm).unwrap();
    assert_eq!(samples.len(), 3);
    for s in &samples {
        let warped = crl_core::stereo::warp(&s.right, &DisparityMap::new(s.gt.data.clone(), 0).unwrap(), -1.0).unwrap();
        let (w, l) = (warped.to_vec(), s.left.to_vec());
        let plane = s.gt.data.numel();
        for i in 0..l.len() {
            if s.gt.is_valid(i % plane) {
                assert_eq!(w[i], l[i], "sample {} value {i}", s.id);
            }
        }
    }

    synth(&empty, "desk", 0, 0);
    assert_eq!(fs::read_to_string(empty.join("manifest.txt")).unwrap(), "");

    let o = crl(&["synth", "--preset", "nope", "--out", p(&empty)]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn synth_from_scene_file() {
    let dir = tempfile::tempdir().unwrap();
    let scene = dir.path().join("scene.txt");
    fs::write(&scene, "width=64\nheight=32\nbackground=2\nrect=10 8 20 12 9\ntexture_seed=3\n").unwrap();
    let out = dir.path().join("s");
    let o = crl(&["synth", "--spec", p(&scene), "--count", "2", "--out", p(&out)]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let gt = read_disparity(&out.join("disp/000001.pfm")).unwrap();
    assert_eq!(gt.shape(), [1, 1, 32, 64]);
    assert_eq!(gt.data.at(0, 0, 14, 20), 9.0);
    assert_eq!(gt.data.at(0, 0, 0, 40), 2.0);

    fs::write(&scene, "width=64\nheight=32\nrect=10 8 80 12 9\n").unwrap();
    let o = crl(&["synth", "--spec", p(&scene), "--out", p(&out)]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn train_writes_checkpoints_and_keeps_stage1_frozen() {
    let dir = tempfile::tempdir().unwrap();
    synth(&dir.path().join("data"), "tiny", 10, 1);
    let cfg = write_config(dir.path(), "");
    let o = crl(&["train", "--config", p(&cfg)]);
    let text = stdout(&o);
    assert_eq!(o.status.code(), Some(0), "{text}{}", stderr(&o));
    for name in ["phase1-1F.ckpt", "phase2-2F.ckpt", "phase3-0F.ckpt", "final.ckpt"] {
        assert!(dir.path().join("ckpt").join(name).is_file(), "{name}");
    }
    let lines: Vec<&str> = text.lines().collect();
    let phase2 = lines.iter().position(|l| l.starts_with("phase 2 2F")).unwrap();
    assert!(lines[phase2 + 1].contains("stage1") && lines[phase2 + 1].ends_with("(unchanged)"));
    assert!(lines[phase2 + 2].ends_with("(changed)"));
    let phase1 = lines.iter().position(|l| l.starts_with("phase 1 1F")).unwrap();
    assert!(lines[phase1 + 2].ends_with("(unchanged)"));

    let log = fs::read_to_string(dir.path().join("ckpt/train_log.csv")).unwrap();
    assert_eq!(log.lines().count(), 1 + 9);
    assert!(log.starts_with("phase_index,phase,step,loss"));

    let again = crl(&["train", "--config", p(&cfg)]);
    assert_eq!(again.status.code(), Some(0));
    let losses = |text: &str| -> Vec<String> {
        text.lines().map(|l| l.split(',').nth(3).unwrap().to_string()).collect()
    };
    let rerun = fs::read_to_string(dir.path().join("ckpt/train_log.csv")).unwrap();
    assert_eq!(losses(&rerun), losses(&log));
}

#[test]
fn config_errors_exit_with_usage_code() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "colour = blue\n");
    let o = crl(&["train", "--config", p(&cfg)]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("line 10"), "{}", stderr(&o));

    let o = crl(&["train", "--config", p(&dir.path().join("missing.cfg"))]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn runaway_learning_rate_exits_as_divergence() {
    let dir = tempfile::tempdir().unwrap();
    synth(&dir.path().join("data"), "tiny", 6, 2);
    let cfg = write_config(dir.path(), "lr = 1e300\nsteps = 12\n");
    let o = crl(&["train", "--config", p(&cfg)]);
    assert_eq!(o.status.code(), Some(3), "{}{}", stdout(&o), stderr(&o));
}

#[test]
fn inference_outputs_are_consistent_with_the_residual() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    synth(&data, "tiny", 6, 3);
    let cfg = write_config(dir.path(), "zero_init_residuals = false\n");
    assert_eq!(crl(&["train", "--config", p(&cfg)]).status.code(), Some(0));
    let ckpt = dir.path().join("ckpt/final.ckpt");
    let (l, r) = (data.join("left/000000.png"), data.join("right/000000.png"));
    let run = |stage: &str, out: &Path, extra: &[&str]| {
        let mut args = vec!["infer", "--ckpt", p(&ckpt), "--left", p(&l), "--right", p(&r), "--out", p(out), "--stage", stage];
        args.extend_from_slice(extra);
        let o = crl(&args);
        assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    };
    let (d1, d2, res) = (dir.path().join("d1.pfm"), dir.path().join("d2.pfm"), dir.path().join("r.pfm"));
    run("1", &d1, &[]);
    run("2", &d2, &["--dump-residual", p(&res)]);
    let (d1, d2, res) = (
        read_disparity_pfm(&d1).unwrap().data.to_vec(),
        read_disparity_pfm(&d2).unwrap().data.to_vec(),
        read_disparity_pfm(&res).unwrap().data.to_vec(),
    );
    assert!(res.iter().any(|v| *v != 0.0));
    assert_eq!(d1.len(), 64 * 64);
    let repeat = dir.path().join("d2b.pfm");
    run("2", &repeat, &[]);
    assert_eq!(fs::read(&repeat).unwrap(), fs::read(dir.path().join("d2.pfm")).unwrap());
    for i in 0..d1.len() {
        assert!((d2[i] - d1[i] - res[i]).abs() <= 1e-5, "pixel {i}");
    }

    let o = crl(&["infer", "--ckpt", p(&ckpt), "--left", p(&l), "--right", p(&r), "--out", p(&dir.path().join("x.pfm")), "--dump-residual", p(&dir.path().join("r.png"))]);
    assert_eq!(o.status.code(), Some(2));
    let other = dir.path().join("other");
    synth(&other, "desk", 1, 0);
    let o = crl(&["infer", "--ckpt", p(&ckpt), "--left", p(&l), "--right", p(&other.join("right/000000.png")), "--out", p(&dir.path().join("x.pfm"))]);
    assert_eq!(o.status.code(), Some(2));
    let o = crl(&["infer", "--ckpt", p(&dir.path().join("none.ckpt")), "--left", p(&l), "--right", p(&r), "--out", p(&dir.path().join("x.pfm"))]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn sgm_dataset_inference_feeds_evaluation() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    synth(&data, "desk", 3, 4);
    let pred = dir.path().join("pred");
    let o = crl(&["infer", "--method", "sgm", "--max-disp", "20", "--dataset", p(&data), "--out", p(&pred)]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert!(pred.join("timing.csv").is_file());
    let o = crl(&["eval", "--pred", p(&pred), "--gt", p(&data), "--method", "sgm"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let text = stdout(&o);
    let all = text.lines().find(|l| l.starts_with("sgm,ALL,")).unwrap();
    let three: f64 = all.split(',').nth(3).unwrap().parse().unwrap();
    assert!(three < 5.0, "{all}");
}

#[test]
fn evaluation_of_known_errors() {
    let dir = tempfile::tempdir().unwrap();
    let (gt, pred) = (dir.path().join("gt"), dir.path().join("pred"));
    fs::create_dir_all(&gt).unwrap();
    fs::create_dir_all(&pred).unwrap();
    let truth: Vec<f64> = (0..40).map(|i| 100.0 + i as f64).collect();
    write_disparity_pfm(&gt.join("a.pfm"), &map(4, 10, truth.clone())).unwrap();
    write_disparity_pfm(&pred.join("a.pfm"), &map(4, 10, truth.clone())).unwrap();
    let o = crl(&["eval", "--pred", p(&pred), "--gt", p(&gt)]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert!(stdout(&o).contains("pred,a,0,0,40,0"), "{}", stdout(&o));

    let shifted: Vec<f64> = truth.iter().enumerate().map(|(i, v)| if i < 20 { v + 4.0 } else { *v }).collect();
    write_disparity_pfm(&pred.join("a.pfm"), &map(4, 10, shifted)).unwrap();
    let plain = stdout(&crl(&["eval", "--pred", p(&pred), "--gt", p(&gt)]));
    assert!(plain.contains("pred,a,2,50,40,0"), "{plain}");
    let kitti = stdout(&crl(&["eval", "--pred", p(&pred), "--gt", p(&gt), "--mode", "kitti"]));
    assert!(kitti.contains("pred,a,2,0,40,0"), "{kitti}");

    write_disparity_pfm(&pred.join("b.pfm"), &map(4, 10, truth)).unwrap();
    let o = crl(&["eval", "--pred", p(&pred), "--gt", p(&gt)]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains('b'));
}

#[test]
fn report_merges_evaluation_files() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a.csv"), dir.path().join("b.csv"));
    fs::write(&a, "method,sample,epe,3pe,valid_pixels,seconds\nm,x,1,0,10,0.5\nm,ALL,1,0,10,0.5\n").unwrap();
    fs::write(&b, "method,sample,epe,3pe,valid_pixels,seconds\nm,y,4,50,30,1.5\nn,y,2,10,30,0\n").unwrap();
    let merged = dir.path().join("merged.csv");
    let o = crl(&["report", "--csv", p(&a), "--csv", p(&b), "--out", p(&merged)]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let text = fs::read_to_string(&merged).unwrap();
    assert!(text.contains("m,ALL,3.25,37.5,40,1\n"), "{text}");
    assert!(text.contains("n,ALL,2,10,30,0\n"), "{text}");

    fs::write(&b, "method,sample\n").unwrap();
    assert_eq!(crl(&["report", "--csv", p(&b)]).status.code(), Some(2));
}

#[test]
fn screening_lists_planted_maps_and_is_idempotent() {
    let dir = tempfile::tempdir().unwrap();
    let gt = dir.path().join("gt");
    fs::create_dir_all(&gt).unwrap();
    let planted: Vec<f64> = (0..100).map(|i| if i < 30 { 320.0 } else { 10.0 }).collect();
    let borderline: Vec<f64> = (0..100).map(|i| if i < 25 { 320.0 } else { 10.0 }).collect();
    write_disparity_pfm(&gt.join("far.pfm"), &map(10, 10, planted)).unwrap();
    write_disparity_pfm(&gt.join("edge.pfm"), &map(10, 10, borderline)).unwrap();
    let first = crl(&["screen", "--gt", p(&gt)]);
    assert_eq!(first.status.code(), Some(0));
    assert_eq!(stdout(&first), "kept 1 removed 1\nremoved far\n");
    assert_eq!(stdout(&crl(&["screen", "--gt", p(&gt)])), stdout(&first));
    fs::remove_file(gt.join("far.pfm")).unwrap();
    assert_eq!(stdout(&crl(&["screen", "--gt", p(&gt)])), "kept 1 removed 0\n");

    let data = dir.path().join("data");
    synth(&data, "desk", 4, 0);
    assert_eq!(stdout(&crl(&["screen", "--gt", p(&data)])), "kept 4 removed 0\n");
}

#[test]
fn gradcheck_reports_verification_failures() {
    let o = crl(&["gradcheck", "--ops", "add,warp", "--seed", "1"]);
    assert_eq!(o.status.code(), Some(0));
    assert!(stdout(&o).contains("all 2 checks passed"));
    let warp_only = crl(&["gradcheck", "--ops", "warp", "--seed", "3"]);
    let table = stdout(&warp_only);
    assert_eq!(table.lines().filter(|l| l.ends_with("pass")).count(), 1);
    assert!(table.lines().any(|l| l.starts_with("warp ")));
    assert_eq!(stdout(&crl(&["gradcheck", "--ops", "warp", "--seed", "3"])), table);
    let o = crl(&["gradcheck", "--ops", "conv2d", "--tol", "0"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("conv2d"));
}
