use patchprior::adapt::{adapt, AdaptationConfig};
use patchprior::denoise::{denoise, HqsSchedule};
use patchprior::em::{em_fit, EmConfig};
use patchprior::image::{add_gaussian_noise, psnr};
use patchprior::model_io::{load_model, save_model};
use patchprior::patches::{extract_patches, PatchSet};
use patchprior::synthetic::{scene, smoke_image};
use patchprior::Gmm;

fn small_generic() -> Gmm {
    let sets: Vec<PatchSet> = (300..303)
        .map(|s| extract_patches(&scene(64, 64, s).unwrap(), 8, 2).unwrap())
        .collect();
    let cfg = EmConfig {
        components: 8,
        max_iters: 30,
        ..EmConfig::default()
    };
    em_fit(&PatchSet::concat(&sets).unwrap(), &cfg).unwrap().gmm
}

#[test]
fn adapting_to_the_clean_image_helps() {
    let generic = small_generic();
    let clean = smoke_image();
    let (adapted, report) = adapt(
        &generic,
        &extract_patches(&clean, 8, 1).unwrap(),
        &AdaptationConfig::default(),
    )
    .unwrap();
    assert_eq!(report.objective.len(), 1);
    assert!(report.alphas.iter().all(|a| (0.0..=1.0).contains(a)));

    let sched = HqsSchedule::default_for(25.0).unwrap();
    let mut gain = 0.0;
    for seed in 0..2 {
        let y = add_gaussian_noise(&clean, 25.0, seed).unwrap();
        let g = psnr(&clean, &denoise(&y, 25.0, &generic, &sched, None).unwrap().image).unwrap();
        let a = psnr(&clean, &denoise(&y, 25.0, &adapted, &sched, None).unwrap().image).unwrap();
        assert!(g > psnr(&clean, &y).unwrap());
        gain += a - g;
    }
    assert!(gain > 0.0, "adaptation lost {gain} dB");
}

#[test]
fn saved_models_denoise_identically() {
    let generic = small_generic();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("g.gmmp");
    save_model(&generic, &path).unwrap();
    let loaded = load_model(&path).unwrap();

    let y = add_gaussian_noise(&smoke_image(), 15.0, 3).unwrap();
    let sched = HqsSchedule::default_for(15.0).unwrap();
    let a = denoise(&y, 15.0, &generic, &sched, None).unwrap().image;
    let b = denoise(&y, 15.0, &loaded, &sched, None).unwrap().image;
    assert_eq!(a, b);
}

#[test]
fn denoising_trace_improves_over_noisy_input() {
    let clean = scene(48, 48, 9).unwrap();
    let generic = small_generic();
    let y = add_gaussian_noise(&clean, 30.0, 1).unwrap();
    let out = denoise(&y, 30.0, &generic, &HqsSchedule::default_for(30.0).unwrap(), Some(&clean)).unwrap();
    assert_eq!(out.psnr_trace.len(), 5);
    let noisy = psnr(&clean, &y).unwrap();
    assert!(out.psnr_trace.iter().all(|p| *p > noisy));
    assert_eq!(out.mode_histograms.len(), 5);
}
