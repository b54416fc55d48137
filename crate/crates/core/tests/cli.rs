use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use patchprior::manifest::{manifest_path, RunManifest};
use patchprior::model_io::load_model;
use patchprior::pgm::{read_pgm, write_pgm};
use patchprior::synthetic::{scene, smoke_image};

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_patchprior"));
    c.env("PATCHPRIOR_THREADS", "1");
    c
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("spawn patchprior")
}

fn ok(args: &[&str]) -> String {
    let out = run(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn smoke_file(dir: &Path) -> PathBuf {
    let p = dir.join("smoke.pgm");
    write_pgm(&p, &smoke_image()).unwrap();
    p
}

/// Small training corpus of synthetic scenes and a model fitted to it.
fn trained_model(dir: &Path, seed: u64) -> PathBuf {
    let corpus = dir.join("corpus");
    std::fs::create_dir_all(&corpus).unwrap();
    for i in 0..3 {
        write_pgm(corpus.join(format!("scene{i}.pgm")), &scene(64, 64, 200 + i).unwrap()).unwrap();
    }
    let model = dir.join("generic.gmmp");
    let seed = seed.to_string();
    ok(&[
        "train", s(&corpus), "-o", s(&model), "--k", "6", "--stride", "2", "--iters", "25", "--seed", &seed,
    ]);
    model
}

#[test]
fn psnr_of_identical_images_is_sentinel() {
    let dir = tempfile::tempdir().unwrap();
    let a = smoke_file(dir.path());
    let out = ok(&["psnr", s(&a), s(&a)]);
    assert_eq!(out.trim().parse::<f64>().unwrap(), 99.0);
}

#[test]
fn zero_sigma_noise_is_identity() {
    let dir = tempfile::tempdir().unwrap();
    let a = smoke_file(dir.path());
    let b = dir.path().join("noisy.pgm");
    ok(&["noise", s(&a), "-o", s(&b), "--sigma", "0", "--seed", "7"]);
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    let m = RunManifest::parse(&std::fs::read_to_string(manifest_path(&b)).unwrap());
    assert_eq!(m.get("command"), Some("noise"));
    assert_eq!(m.get("seed"), Some("7"));
}

#[test]
fn usage_and_runtime_exit_codes() {
    assert_eq!(run(&[]).status.code(), Some(2));
    assert_eq!(run(&["frobnicate"]).status.code(), Some(2));
    assert_eq!(run(&["psnr", "--bogus", "a", "b"]).status.code(), Some(2));
    assert_eq!(run(&["--help"]).status.code(), Some(0));
    assert_eq!(run(&["--version"]).status.code(), Some(0));
    let out = run(&["psnr", "/nonexistent/a.pgm", "/nonexistent/b.pgm"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(!out.stderr.is_empty());

    let dir = tempfile::tempdir().unwrap();
    let a = smoke_file(dir.path());
    let out = run(&["denoise", s(&a), "-o", s(&dir.path().join("x.pgm")), "--sigma", "20",
        "--model", s(&a), "--betas", "1,x"]);
    assert_eq!(out.status.code(), Some(2));
    let out = run(&["denoise", s(&a), "-o", s(&dir.path().join("x.pgm")), "--sigma", "20",
        "--model", s(&a)]);
    assert_eq!(out.status.code(), Some(1), "a PGM is not a model");
}

#[test]
fn commands_are_deterministic_per_seed() {
    let dir = tempfile::tempdir().unwrap();
    let clean = smoke_file(dir.path());
    let model_a = trained_model(&dir.path().join("a"), 3);
    let model_b = trained_model(&dir.path().join("b"), 3);
    assert_eq!(std::fs::read(&model_a).unwrap(), std::fs::read(&model_b).unwrap());

    let mut outputs = Vec::new();
    for tag in ["a", "b"] {
        let noisy = dir.path().join(format!("noisy_{tag}.pgm"));
        let den = dir.path().join(format!("den_{tag}.pgm"));
        ok(&["noise", s(&clean), "-o", s(&noisy), "--sigma", "25", "--seed", "11"]);
        ok(&["denoise", s(&noisy), "-o", s(&den), "--sigma", "25", "--model", s(&model_a)]);
        outputs.push((std::fs::read(&noisy).unwrap(), std::fs::read(&den).unwrap()));
    }
    assert_eq!(outputs[0], outputs[1]);

    let other = dir.path().join("noisy_c.pgm");
    ok(&["noise", s(&clean), "-o", s(&other), "--sigma", "25", "--seed", "12"]);
    assert_ne!(std::fs::read(&other).unwrap(), outputs[0].0);
}

#[test]
fn manifests_record_changed_parameters() {
    let dir = tempfile::tempdir().unwrap();
    let clean = smoke_file(dir.path());
    let model = trained_model(dir.path(), 0);
    let noisy = dir.path().join("noisy.pgm");
    ok(&["noise", s(&clean), "-o", s(&noisy), "--sigma", "20", "--seed", "1"]);

    let manifest = |args: &[&str], out: &Path| {
        ok(args);
        RunManifest::parse(&std::fs::read_to_string(manifest_path(out)).unwrap())
    };
    let diff = |a: &RunManifest, b: &RunManifest| -> Vec<String> {
        a.entries()
            .iter()
            .filter(|(k, v)| !k.starts_with("time.") && b.get(k) != Some(v.as_str()))
            .map(|(k, _)| k.clone())
            .collect()
    };

    let d1 = dir.path().join("d1.pgm");
    let d2 = dir.path().join("d2.pgm");
    let base = ["denoise", s(&noisy), "--sigma", "20", "--model", s(&model)];
    let m1 = manifest(&[&base[..], &["-o", s(&d1)]].concat(), &d1);
    let m2 = manifest(&[&base[..], &["-o", s(&d2), "--betas", "1,4,8"]].concat(), &d2);
    let changed = diff(&m1, &m2);
    assert!(changed.contains(&"beta_multipliers".to_string()), "{changed:?}");
    assert!(changed.contains(&"betas".to_string()));

    let a1 = dir.path().join("a1.gmmp");
    let a2 = dir.path().join("a2.gmmp");
    let base = ["adapt", s(&model), s(&clean), "--sigma-tilde", "0"];
    let m1 = manifest(&[&base[..], &["-o", s(&a1), "--rho", "1"]].concat(), &a1);
    let m2 = manifest(&[&base[..], &["-o", s(&a2), "--rho", "5"]].concat(), &a2);
    assert!(diff(&m1, &m2).contains(&"rho".to_string()));
    assert_eq!(m1.get("sigma_tilde_sq"), Some("0"));
    assert!(a1.with_file_name("a1.gmmp.report.csv").exists());
    assert_ne!(load_model(&a1).unwrap(), load_model(&a2).unwrap());
}

#[test]
fn full_pipeline_keeps_generic_quality() {
    let dir = tempfile::tempdir().unwrap();
    let clean = smoke_file(dir.path());
    let model = trained_model(dir.path(), 0);
    let noisy = dir.path().join("noisy.pgm");
    ok(&["noise", s(&clean), "-o", s(&noisy), "--sigma", "20", "--seed", "4"]);

    let est = ok(&["sure", s(&noisy), "--sigma", "20", "--model", s(&model)]);
    let sigma_tilde_sq: f64 = est
        .lines()
        .find_map(|l| l.strip_prefix("sigma_tilde_sq="))
        .unwrap()
        .parse()
        .unwrap();
    assert!((1.0..400.0).contains(&sigma_tilde_sq), "{sigma_tilde_sq}");
    assert!(est.contains("ratio="));

    let adapted = dir.path().join("adapted.gmmp");
    ok(&["adapt", s(&model), s(&noisy), "-o", s(&adapted), "--sigma-tilde", "sure", "--sigma", "20"]);

    let psnr_with = |m: &Path, name: &str| -> f64 {
        let out = dir.path().join(name);
        let trace = ok(&["denoise", s(&noisy), "-o", s(&out), "--sigma", "20", "--model", s(m),
            "--trace", "--ref", s(&clean)]);
        let mut lines = trace.lines();
        assert_eq!(lines.next(), Some("stage,beta,psnr"));
        assert_eq!(lines.clone().count(), 5);
        ok(&["psnr", s(&clean), s(&out)]).trim().parse().unwrap()
    };
    let generic = psnr_with(&model, "generic.pgm");
    let adapted = psnr_with(&adapted, "adapted.pgm");
    let noisy_psnr: f64 = ok(&["psnr", s(&clean), s(&noisy)]).trim().parse().unwrap();
    assert!(generic > noisy_psnr + 3.0, "{generic} vs noisy {noisy_psnr}");
    assert!(adapted >= generic - 0.05, "adapted {adapted} < generic {generic}");
}

#[test]
fn identity_prefilter_sure_needs_no_model() {
    let dir = tempfile::tempdir().unwrap();
    let clean = smoke_file(dir.path());
    let out = ok(&["sure", s(&clean), "--sigma", "10", "--prefilter", "identity", "--probes", "50"]);
    let v: f64 = out.lines().find_map(|l| l.strip_prefix("sigma_tilde_sq=")).unwrap().parse().unwrap();
    assert!((v - 100.0).abs() < 10.0, "{v}");
    assert_eq!(run(&["sure", s(&clean), "--sigma", "10"]).status.code(), Some(2));
}

#[test]
fn toy_writes_csv_files() {
    let dir = tempfile::tempdir().unwrap();
    let out = ok(&["toy", "-o", s(dir.path()), "--seed", "2"]);
    assert!(out.contains("adapted_mean_error="));
    let models = std::fs::read_to_string(dir.path().join("models.csv")).unwrap();
    assert!(models.starts_with("model,component,"));
    assert_eq!(models.lines().count(), 1 + 4 * 2);
    let pts = std::fs::read_to_string(dir.path().join("target_points.csv")).unwrap();
    assert_eq!(pts.lines().count(), 21);
    assert!(read_pgm(dir.path().join("nothing.pgm")).is_err());
}
