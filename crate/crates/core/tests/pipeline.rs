use flaresim::augment::{apply_flare_pipeline, draw_plan};
use flaresim::netblocks::{slcformer_forward, ModelConfig, Slcformer};
use flaresim::optics::{build_psf_grid, circular_aperture, decompose_basis, PsfSampling};
use flaresim::svrender::{composite, sv_convolve, CompositeRecipe};
use flaresim::tensor::{dump_tensor, load_tensor};
use flaresim::zernike::{
    build_basis, sample_coeff_field, AnchorGrid, CoeffField, TurbulenceConfig, ZernikeCoeffs,
};
use flaresim::{ImageF, SeededRng, Tensor};

const SAMPLING: PsfSampling = PsfSampling {
    kernel_size: 15,
    fft_size: 64,
};

#[test]
fn full_rank_basis_reproduces_anchor_kernels() {
    let cfg = TurbulenceConfig::default();
    let aperture = circular_aperture(32, 1.0).unwrap();
    let zb = build_basis(32, cfg.n_modes).unwrap();
    // 49 px puts the 3×3 anchors on pixels 0, 24 and 48
    let anchors = AnchorGrid::new(3, 3, 49, 49).unwrap();
    let field = sample_coeff_field(&mut SeededRng::new(8), &cfg, &anchors).unwrap();
    let grid = build_psf_grid(&aperture, &zb, &field, SAMPLING).unwrap();
    let basis = decompose_basis(&grid, anchors.len(), (49, 49))
        .unwrap()
        .basis;

    for (a, psf) in grid.psfs().iter().enumerate() {
        let (y, x) = ((a / 3) * 24, (a % 3) * 24);
        let mut src = ImageF::zeros(49, 49, 1);
        src.set(0, y, x, 1.0);
        let out = sv_convolve(&src, &basis).unwrap().get(0, y, x);
        let (cy, cx) = psf.center();
        let want = psf.get(cy, cx);
        assert!((out - want).abs() < 1e-9, "anchor {a}: {out} vs {want}");
    }
}

#[test]
fn uniform_field_renders_a_shift_invariant_blur() {
    let aperture = circular_aperture(32, 1.0).unwrap();
    let zb = build_basis(32, 6).unwrap();
    let anchors = AnchorGrid::new(2, 2, 40, 40).unwrap();
    let coeffs = ZernikeCoeffs(vec![0.0, 0.0, 0.0, 0.4, 0.0, -0.2]);
    let grid = build_psf_grid(
        &aperture,
        &zb,
        &CoeffField::uniform(anchors, coeffs).unwrap(),
        SAMPLING,
    )
    .unwrap();
    let basis = decompose_basis(&grid, 1, (40, 40)).unwrap().basis;

    let mut a = ImageF::zeros(40, 40, 1);
    let mut b = ImageF::zeros(40, 40, 1);
    a.set(0, 12, 12, 1.0);
    b.set(0, 26, 20, 1.0);
    let (fa, fb) = (
        sv_convolve(&a, &basis).unwrap(),
        sv_convolve(&b, &basis).unwrap(),
    );
    for dy in 0..15 {
        for dx in 0..15 {
            let pa = fa.get(0, 5 + dy, 5 + dx);
            let pb = fb.get(0, 19 + dy, 13 + dx);
            assert!((pa - pb).abs() < 1e-10, "offset ({dy},{dx}): {pa} vs {pb}");
        }
    }
}

#[test]
fn augmented_flare_composites_inside_range() {
    let mut rng = SeededRng::new(21);
    let flare = ImageF::from_fn(32, 32, 3, |_, y, x| {
        if (y as i32 - 16).abs() + (x as i32 - 16).abs() < 3 {
            1.0
        } else {
            0.05
        }
    });
    let plan = draw_plan(&mut rng);
    let aug = apply_flare_pipeline(&flare, &plan).unwrap();
    let bg = ImageF::from_fn(32, 32, 3, |_, _, _| rng.uniform(0.0, 1.0));
    let (input, gt) = composite(&bg, &aug, &CompositeRecipe::default()).unwrap();
    assert!(input.data().iter().all(|v| (0.0..=1.0).contains(v)));
    assert!(gt.data().iter().all(|v| (0.0..=1.0).contains(v)));
    for (i, (x, b)) in input.data().iter().zip(bg.data()).enumerate() {
        assert!(
            x + 1e-12 >= b.min(1.0),
            "pixel {i}: flare darkened the scene"
        );
    }

    let (same, clean) =
        composite(&bg, &ImageF::zeros(32, 32, 3), &CompositeRecipe::default()).unwrap();
    assert_eq!(same.data(), bg.data());
    assert_eq!(clean.data(), bg.data());
}

#[test]
fn tensor_file_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("t.fftd");
    let t = Tensor::new(
        vec![2, 3, 4],
        (0..24).map(|i| i as f32 * 0.25 - 2.0).collect(),
    )
    .unwrap();
    dump_tensor(&path, &t).unwrap();
    let back = load_tensor(&path).unwrap();
    assert_eq!(back.shape(), t.shape());
    assert_eq!(back.data(), t.data());

    let mut bytes = std::fs::read(&path).unwrap();
    bytes.truncate(bytes.len() - 3);
    std::fs::write(&path, bytes).unwrap();
    assert!(load_tensor(&path).is_err());
}

#[test]
fn saved_model_reproduces_its_output() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = ModelConfig {
        base_channels: 8,
        ..ModelConfig::default()
    };
    let model = Slcformer::seeded(cfg, 12).unwrap();
    model.save(dir.path()).unwrap();
    let loaded = Slcformer::load(dir.path()).unwrap();
    let mut rng = SeededRng::new(1);
    let img = ImageF::from_fn(16, 16, 3, |_, _, _| rng.uniform(0.0, 1.0));
    let a = slcformer_forward(&img, &model).unwrap();
    let b = slcformer_forward(&img, &loaded).unwrap();
    // weights are stored as f32 and the model is seeded in f32 too
    assert_eq!(a.data(), b.data());
}
