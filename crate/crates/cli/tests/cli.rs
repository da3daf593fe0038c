//! The binary, driven through its command line.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use fmdiff::bench::mean_std;
use fmdiff::io;
use fmdiff_core::codecs::{extract, CodecConfig, Scheme};
use fmdiff_core::metrics::{ber, psnr};
use fmdiff_core::synth::synth_image;
use fmdiff_core::SeededRng;

fn fmdiff(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fmdiff")).args(args).output().unwrap()
}

fn ok(args: &[&str]) -> String {
    let out = fmdiff(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn write_images(dir: &Path, n: usize, side: usize) {
    for i in 0..n {
        let img = synth_image(&mut SeededRng::new(100 + i as u64), side, side, 3);
        io::save_image(&dir.join(format!("img{i}.png")), &img).unwrap();
    }
}

#[test]
fn embed_attack_extract_and_bench_agree() {
    let tmp = tempfile::tempdir().unwrap();
    let (imgs, wmd, att) = (tmp.path().join("imgs"), tmp.path().join("wmd"), tmp.path().join("att"));
    fs::create_dir_all(&imgs).unwrap();
    write_images(&imgs, 3, 128);
    let wm_path = tmp.path().join("wm.txt");
    io::write_watermark(&wm_path, &fmdiff_core::codecs::WatermarkBits::random(&mut SeededRng::new(9))).unwrap();

    ok(&["embed", "--codec", "lsb", "--wm", s(&wm_path), "--in", s(&imgs), "--out", s(&wmd), "--seed", "1"]);
    assert_eq!(io::list_images(&wmd).unwrap().len(), 3);
    let report = ok(&["extract", "--codec", "lsb", "--in", s(&wmd), "--wm", s(&wm_path)]);
    assert!(report.lines().last().unwrap().ends_with("0.000000"), "{report}");

    ok(&["attack", "--method", "gaussian", "--param", "0.002", "--in", s(&wmd), "--out", s(&att), "--seed", "2"]);
    let again = tmp.path().join("att2");
    ok(&["attack", "--method", "gaussian", "--param", "0.002", "--in", s(&wmd), "--out", s(&again), "--seed", "2"]);
    for p in io::list_images(&att).unwrap() {
        assert_eq!(fs::read(&p).unwrap(), fs::read(again.join(p.file_name().unwrap())).unwrap());
    }

    // Manual pipeline numbers.
    let wm = io::read_watermark(&wm_path).unwrap();
    let codec = CodecConfig::new(Scheme::Lsb);
    let (mut psnrs, mut bers) = (Vec::new(), Vec::new());
    for p in io::list_images(&att).unwrap() {
        let attacked = io::load_image(&p).unwrap();
        let marked = io::load_image(&wmd.join(p.file_name().unwrap())).unwrap();
        psnrs.push(psnr(&marked, &attacked).unwrap());
        bers.push(ber(&wm, &extract(&attacked, &codec).unwrap()));
    }

    let csv = ok(&[
        "bench", "--corpus", s(&imgs), "--size", "128", "--codecs", "lsb", "--attacks", "gaussian:0.002",
        "--wm", s(&wm_path), "--seed", "2", "--on-bytes",
    ]);
    let row: Vec<&str> = csv.lines().nth(1).unwrap().split(',').collect();
    let (pm, ps) = mean_std(&psnrs);
    let (bm, bs) = mean_std(&bers);
    assert_eq!(row[..4], ["lsb", "gaussian", "0.002", "3"]);
    assert_eq!(row[4..8], [pm, ps, bm, bs].map(|v| format!("{v:.6}")));
    assert!(bm > 0.2);
}

#[test]
fn bench_is_byte_identical_across_runs() {
    let tmp = tempfile::tempdir().unwrap();
    let run = |name: &str| {
        let out = tmp.path().join(name);
        ok(&[
            "bench", "--synth", "2", "--size", "128", "--codecs", "lsb,dct", "--attacks", "identity,jpeg:50,saltpepper:0.005",
            "--seed", "11", "--out", s(&out),
        ]);
        fs::read(out).unwrap()
    };
    let a = run("a.csv");
    assert_eq!(a, run("b.csv"));
    let text = String::from_utf8(a).unwrap();
    assert!(text.starts_with("codec,attack,param,n,psnr_mean,psnr_std,ber_mean,ber_std,seed\n"));
    assert!(text.contains("dct,identity,0,2,99.000000,0.000000,0.000000,0.000000,11"));
}

#[test]
fn train_then_sample_with_config_file() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("lab.cfg");
    fs::write(
        &cfg,
        "# tiny run\ntrain.iters = 3\ntrain.transition = 2\ntrain.patch = 16\ntrain.patches = 1\ntrain.batch = 1\n\
         train.levels = 2\ntrain.base_width = 4\ntrain.time_dim = 8\ntrain.groups = 2\ntrain.ssim_scales = 1\ntrain.refine_lr = 1e-4\ntrain.lr_final = 1e-5\ntrain.full_unroll = on\n\
         fwm.steps = 2\nfwm.patch = 16\n",
    )
    .unwrap();
    let ck = tmp.path().join("ck.fmdw");
    let log = tmp.path().join("loss.csv");
    ok(&["train", "--config", s(&cfg), "--synth", "2", "--size", "32", "--out", s(&ck), "--log", s(&log), "--quiet"]);
    let lines: Vec<String> = fs::read_to_string(&log).unwrap().lines().map(String::from).collect();
    assert_eq!(lines[0], "iter,stage,loss,l1,msssim");
    assert_eq!(lines.len(), 4);
    assert!(lines[1].starts_with("1,1,") && lines[1].ends_with(",,"));
    assert!(lines[3].starts_with("3,2,"));

    let (imgs, out) = (tmp.path().join("imgs"), tmp.path().join("out"));
    fs::create_dir_all(&imgs).unwrap();
    write_images(&imgs, 1, 32);
    ok(&["sample", "--config", s(&cfg), "--checkpoint", s(&ck), "--in", s(&imgs), "--out", s(&out), "--seed", "3"]);
    let first = fs::read(out.join("img0.png")).unwrap();
    ok(&["attack", "--method", "fmdiff", "--config", s(&cfg), "--checkpoint", s(&ck), "--in", s(&imgs), "--out", s(&out), "--seed", "3"]);
    assert_eq!(first, fs::read(out.join("img0.png")).unwrap());

    let csv = ok(&[
        "bench", "--config", s(&cfg), "--checkpoint", s(&ck), "--synth", "1", "--size", "32", "--codecs", "lsb",
        "--attacks", "fmdiff", "--seed", "5",
    ]);
    assert!(csv.lines().nth(1).unwrap().starts_with("lsb,fmdiff,2,1,"));
}

#[test]
fn gradcheck_passes() {
    let out = ok(&["gradcheck", "--seed", "3"]);
    assert!(out.lines().count() > 20);
    assert!(!out.contains("FAIL"));
}

#[test]
fn bad_invocations_fail_with_diagnostics() {
    let tmp = tempfile::tempdir().unwrap();
    let cases: [&[&str]; 6] = [
        &["frobnicate"],
        &["attack", "--method", "gaussian", "--param", "0", "--in", ".", "--out", "x"],
        &["attack", "--method", "blur", "--in", ".", "--out", "x"],
        &["bench", "--synth", "1", "--attacks", "fmdiff"],
        &["bench", "--synth", "1", "--codecs", ""],
        &["embed", "--in", s(tmp.path()), "--out", "x", "--bogus"],
    ];
    for args in cases {
        let out = fmdiff(args);
        assert!(!out.status.success(), "{args:?}");
        assert!(!out.stderr.is_empty(), "{args:?}");
    }
    let bad_cfg = tmp.path().join("bad.cfg");
    fs::write(&bad_cfg, "lr=3\n").unwrap();
    assert!(!fmdiff(&["bench", "--synth", "1", "--config", s(&bad_cfg)]).status.success());
}
