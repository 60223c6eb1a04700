//! End-to-end checks of the `tlda` binary: exit codes, output files and
//! their formats.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tlda_cli::{write_linear_checkpoint, Config, QGAP_HEADER, VERIFY_HEADER};
use tlda_core::agent::METRICS_HEADER;
use tlda_core::lipschitz::{KMatrix, LinearPolicy};
use tlda_core::numerics::Tensor;
use tlda_core::pnm::PnmImage;
use tlda_core::rng::Rng;

const SMALL: &str = "env.width = 16\nenv.height = 16\nenv.episode_length = 20\nagent.conv_channels = 4\n\
agent.conv_layers = 2\nagent.feature_dim = 8\nagent.hidden_dim = 16\nagent.batch_size = 8\nagent.init_steps = 10\n\
agent.shift_pad = 2\ntlda.stride = 4\ntlda.mask_sigma = 1.5\nrun.eval_episodes = 2\nrun.diag_samples = 16\n\
verify.instances = 5\n";

fn tlda(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_tlda")).args(args).output().expect("binary runs")
}

fn scratch(name: &str) -> PathBuf {
    let dir = std::env::temp_dir().join(format!("tlda-cli-{}-{name}", std::process::id()));
    let _ = std::fs::remove_dir_all(&dir);
    std::fs::create_dir_all(&dir).unwrap();
    dir
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn small_config(dir: &Path) -> PathBuf {
    let p = dir.join("small.cfg");
    std::fs::write(&p, SMALL).unwrap();
    p
}

fn random_image(path: &Path, side: usize, seed: u64) {
    let mut rng = Rng::new(seed, "cli.image");
    let px = (0..side * side * 3).map(|_| rng.below(256) as u8).collect();
    let img = PnmImage::new(side, side, 3, px).unwrap();
    img.write(std::fs::File::create(path).unwrap()).unwrap();
}

fn lines(path: &Path) -> Vec<String> {
    std::fs::read_to_string(path).unwrap().lines().map(str::to_string).collect()
}

#[test]
fn missing_config_is_a_usage_error_and_writes_nothing() {
    let dir = scratch("missing");
    let out = dir.join("out");
    let res = tlda(&["train", "--config", s(&dir.join("nope.cfg")), "--out", s(&out)]);
    assert_eq!(res.status.code(), Some(1));
    assert!(!out.exists());
}

#[test]
fn unknown_key_reports_its_line() {
    let dir = scratch("unknown");
    let cfg = dir.join("bad.cfg");
    std::fs::write(&cfg, "# header\nagent.gamma = 0.9\nagent.gama = 0.9\n").unwrap();
    let res = tlda(&["verify", "--config", s(&cfg), "--out", s(&dir.join("out"))]);
    assert_eq!(res.status.code(), Some(1));
    let err = String::from_utf8_lossy(&res.stderr);
    assert!(err.contains("line 3"), "{err}");
    assert!(!dir.join("out").exists());
}

#[test]
fn bad_flag_value_is_a_usage_error() {
    let dir = scratch("badflag");
    let res = tlda(&["train", "--mode", "sideways", "--out", s(&dir.join("out"))]);
    assert_eq!(res.status.code(), Some(1));
    let res = tlda(&["frobnicate"]);
    assert_eq!(res.status.code(), Some(1));
}

#[test]
fn zero_step_training_writes_header_checkpoint_and_manifest() {
    let dir = scratch("zero");
    let cfg = small_config(&dir);
    let out = dir.join("out");
    let res = tlda(&["train", "--config", s(&cfg), "--steps", "0", "--out", s(&out)]);
    assert!(res.status.success(), "{}", String::from_utf8_lossy(&res.stderr));
    assert_eq!(lines(&out.join("metrics.csv")), vec![METRICS_HEADER.to_string()]);
    assert!(out.join("final.ckpt").exists());
    let manifest = std::fs::read_to_string(out.join("manifest.txt")).unwrap();
    assert!(manifest.contains("command = train"));
    assert!(manifest.contains("[config]"));
    assert!(manifest.contains("run.steps = 0"));
}

#[test]
fn short_training_run_produces_metrics_rows_and_a_loadable_checkpoint() {
    let dir = scratch("short");
    let cfg = small_config(&dir);
    let out = dir.join("out");
    let res = tlda(&["train", "--config", s(&cfg), "--steps", "120", "--seed", "3", "--out", s(&out)]);
    assert!(res.status.success(), "{}", String::from_utf8_lossy(&res.stderr));
    let rows = lines(&out.join("metrics.csv"));
    assert_eq!(rows[0], METRICS_HEADER);
    // 20-step episodes: one row per finished episode.
    assert_eq!(rows.len(), 1 + 6);
    for r in &rows[1..] {
        assert_eq!(r.split(',').count(), 10);
    }
    let ckpt = tlda_cli::load_checkpoint(&out.join("final.ckpt")).unwrap();
    let echoed = ckpt.config.expect("checkpoint carries its config");
    assert_eq!(echoed.run.seed, 3);
    assert_eq!(echoed.env.width, 16);

    // The checkpoint's own config is enough to evaluate it.
    let eval = dir.join("eval");
    let res = tlda(&["eval", "--checkpoint", s(&out.join("final.ckpt")), "--episodes", "0", "--out", s(&eval)]);
    assert!(res.status.success(), "{}", String::from_utf8_lossy(&res.stderr));
    assert_eq!(lines(&eval.join("eval.csv")), vec!["variation,episodes,mean_return,std_return".to_string()]);

    let qgap = dir.join("qgap");
    let res = tlda(&["qgap", "--checkpoint", s(&out.join("final.ckpt")), "--samples", "8", "--out", s(&qgap)]);
    assert!(res.status.success(), "{}", String::from_utf8_lossy(&res.stderr));
    let rows = lines(&qgap.join("qgap.csv"));
    assert_eq!(rows[0], QGAP_HEADER);
    // three modes times the two default strong augmentations
    assert_eq!(rows.len(), 1 + 6);
}

#[test]
fn identity_augment_reproduces_the_input_bytes() {
    let dir = scratch("identity");
    let img = dir.join("in.ppm");
    random_image(&img, 20, 1);
    let out = dir.join("out");
    let res = tlda(&["augment", "--image", s(&img), "--aug", "identity", "--out", s(&out)]);
    assert!(res.status.success(), "{}", String::from_utf8_lossy(&res.stderr));
    assert_eq!(std::fs::read(out.join("augmented.ppm")).unwrap(), std::fs::read(&img).unwrap());
}

#[test]
fn verify_identity_map_passes_with_one_row_per_instance() {
    let dir = scratch("verify");
    let out = dir.join("out");
    let res = tlda(&["verify", "--instances", "7", "--identity", "--seed", "2", "--out", s(&out)]);
    assert_eq!(res.status.code(), Some(0), "{}", String::from_utf8_lossy(&res.stderr));
    let rows = lines(&out.join("verify.csv"));
    assert_eq!(rows[0], VERIFY_HEADER);
    assert_eq!(rows.len(), 1 + 7);
    let cols: Vec<&str> = VERIFY_HEADER.split(',').collect();
    let at = |r: &str, c: &str| r.split(',').nth(cols.iter().position(|x| *x == c).unwrap()).unwrap().to_string();
    for r in &rows[1..] {
        assert_eq!(at(r, "holds"), "true");
        assert_eq!(at(r, "sup_distance").parse::<f64>().unwrap(), 0.0);
    }
    assert!(!out.join("violations").exists());
}

#[test]
fn constant_policy_gives_zero_k_and_full_mask() {
    let dir = scratch("constant");
    let img = dir.join("in.ppm");
    random_image(&img, 12, 2);
    let ckpt = dir.join("zero.ckpt");
    let n = 3 * 12 * 12;
    let policy = LinearPolicy::new(Tensor::zeros(&[2, n]), vec![0.2, -0.4], true).unwrap();
    write_linear_checkpoint(&ckpt, &policy).unwrap();
    let out = dir.join("out");
    let res = tlda(&["kmatrix", "--checkpoint", s(&ckpt), "--image", s(&img), "--stride", "3", "--out", s(&out)]);
    assert!(res.status.success(), "{}", String::from_utf8_lossy(&res.stderr));
    let k = KMatrix::from_raw(&std::fs::read(out.join("kmatrix.kmat")).unwrap()).unwrap();
    assert_eq!((k.height, k.width, k.stride), (12, 12, 3));
    assert!(k.values.iter().all(|v| *v == 0.0));
    let mask = PnmImage::read(std::fs::File::open(out.join("mask.pgm")).unwrap()).unwrap();
    assert!(mask.pixels.iter().all(|p| *p == 255));
}

#[test]
fn coarse_lattice_matches_the_full_grid_raw_values() {
    let dir = scratch("lattice");
    let img = dir.join("in.ppm");
    random_image(&img, 16, 3);
    let ckpt = dir.join("lin.ckpt");
    let mut rng = Rng::new(5, "cli.policy");
    let n = 3 * 16 * 16;
    let w = Tensor::from_vec(&[2, n], (0..2 * n).map(|_| rng.uniform_f32() - 0.5).collect()).unwrap();
    write_linear_checkpoint(&ckpt, &LinearPolicy::new(w, vec![0.0, 0.1], true).unwrap()).unwrap();
    let mut ks = Vec::new();
    for stride in ["1", "5"] {
        let out = dir.join(format!("s{stride}"));
        let res = tlda(&["kmatrix", "--checkpoint", s(&ckpt), "--image", s(&img), "--stride", stride, "--out", s(&out)]);
        assert!(res.status.success(), "{}", String::from_utf8_lossy(&res.stderr));
        ks.push(KMatrix::from_raw(&std::fs::read(out.join("kmatrix.kmat")).unwrap()).unwrap());
    }
    for &y in &KMatrix::lattice(16, 5) {
        for &x in &KMatrix::lattice(16, 5) {
            assert_eq!(ks[0].get(y, x), ks[1].get(y, x), "({y}, {x})");
        }
    }
}

#[test]
fn mismatched_image_size_is_rejected() {
    let dir = scratch("mismatch");
    let img = dir.join("in.ppm");
    random_image(&img, 10, 4);
    let ckpt = dir.join("lin.ckpt");
    write_linear_checkpoint(&ckpt, &LinearPolicy::one_pixel(&[3, 12, 12], 0, 1, 1, 1.0, true).unwrap()).unwrap();
    let res = tlda(&["kmatrix", "--checkpoint", s(&ckpt), "--image", s(&img), "--out", s(&dir.join("out"))]);
    assert_eq!(res.status.code(), Some(1));
}

#[test]
fn shipped_default_config_matches_the_built_in_defaults() {
    let root = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    let text = std::fs::read_to_string(root.join("default.cfg")).unwrap();
    let parsed = Config::parse(&text).unwrap();
    assert_eq!(parsed.render(), Config::default().render());
    Config::parse(&std::fs::read_to_string(root.join("toy.cfg")).unwrap()).unwrap();
}
