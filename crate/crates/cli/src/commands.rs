//! Subcommand implementations.

use std::io::Write;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde_json::{json, Value};

use flaresim::augment::{
    apply_background_pipeline, apply_flare_pipeline, crop, draw_plan, resize_bilinear, AugPlan,
};
use flaresim::image::{load_png, save_png};
use flaresim::metrics::{
    masked_psnr, psnr, ssim_with_peak, ExternalScores, MaskKind, PerceptualMetric, Psnr, RegionMask,
};
use flaresim::netblocks::{slcformer_forward, Slcformer};
use flaresim::optics::{
    build_psf_grid, circular_aperture, decompose_basis, heatmap, ApertureMask, PsfBasis,
};
use flaresim::params::zero_learned;
use flaresim::svrender::{composite as composite_pair, sv_convolve};
use flaresim::tensor::{dump_tensor, Tensor};
use flaresim::zernike::{build_basis, sample_coeff_field, ZernikeBasis};
use flaresim::{ImageF, SeededRng};

use crate::config::RunConfig;
use crate::error::{Classify, CliError, CmdResult, Kind};
use crate::AugKind;

pub struct Context {
    pub cfg: RunConfig,
    pub seed: u64,
    pub verbose: bool,
}

impl Context {
    fn log(&self, msg: impl AsRef<str>) {
        if self.verbose {
            eprintln!("{}", msg.as_ref());
        }
    }

    /// Independent stream for item `i`.
    fn item_rng(&self, i: usize) -> SeededRng {
        SeededRng::new(self.seed).fork(i as u64)
    }
}

fn data_err(msg: impl std::fmt::Display) -> CliError {
    CliError::msg(Kind::Data, msg)
}

fn create_dir(dir: &Path) -> CmdResult<()> {
    std::fs::create_dir_all(dir).map_err(|e| data_err(format!("{}: {e}", dir.display())))
}

/// PNG files of a directory in name order.
fn list_pngs(dir: &Path) -> CmdResult<Vec<PathBuf>> {
    let entries =
        std::fs::read_dir(dir).map_err(|e| data_err(format!("{}: {e}", dir.display())))?;
    let mut files = Vec::new();
    for entry in entries {
        let path = entry
            .map_err(|e| data_err(format!("{}: {e}", dir.display())))?
            .path();
        let is_png = path
            .extension()
            .is_some_and(|x| x.eq_ignore_ascii_case("png"));
        if is_png && path.is_file() {
            files.push(path);
        }
    }
    files.sort();
    Ok(files)
}

fn nonempty_pngs(dir: &Path) -> CmdResult<Vec<PathBuf>> {
    let files = list_pngs(dir)?;
    if files.is_empty() {
        return Err(data_err(format!("{}: no PNG files", dir.display())));
    }
    Ok(files)
}

fn file_name(p: &Path) -> String {
    p.file_name()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default()
}

fn load_rgb(path: &Path, gamma: f64) -> CmdResult<ImageF> {
    let img = load_png(path, gamma).data()?;
    if img.channels() == 3 {
        return Ok(img);
    }
    let plane = img.plane(0).to_vec();
    ImageF::from_planes(
        img.height(),
        img.width(),
        vec![plane.clone(), plane.clone(), plane],
    )
    .internal()
}

fn write_atomic(path: &Path, bytes: &[u8]) -> CmdResult<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    let io = |e: std::io::Error| data_err(format!("{}: {e}", path.display()));
    let mut f = std::fs::File::create(&tmp).map_err(io)?;
    f.write_all(bytes).map_err(io)?;
    drop(f);
    std::fs::rename(&tmp, path).map_err(io)
}

fn write_jsonl(path: &Path, lines: &[Value]) -> CmdResult<()> {
    let mut text = String::new();
    for l in lines {
        text.push_str(&serde_json::to_string(l).expect("JSON value serializes"));
        text.push('\n');
    }
    write_atomic(path, text.as_bytes())
}

/// Pupil aperture and Zernike basis shared by every item of a run.
struct Optics {
    aperture: ApertureMask,
    zernike: ZernikeBasis,
}

impl Optics {
    fn new(cfg: &RunConfig) -> CmdResult<Self> {
        Ok(Self {
            aperture: circular_aperture(cfg.optics.grid_size, cfg.optics.radius_frac).internal()?,
            zernike: build_basis(cfg.optics.grid_size, cfg.turbulence.n_modes).internal()?,
        })
    }

    /// Samples a coefficient field and decomposes its PSF grid.
    fn psf_basis(
        &self,
        cfg: &RunConfig,
        rng: &mut SeededRng,
    ) -> CmdResult<(flaresim::optics::PsfGrid, PsfBasis, f64)> {
        let field = sample_coeff_field(rng, &cfg.turbulence, &cfg.anchors()).internal()?;
        let grid = build_psf_grid(&self.aperture, &self.zernike, &field, cfg.optics.sampling())
            .internal()?;
        let d = decompose_basis(
            &grid,
            cfg.basis.rank,
            (cfg.augment.height, cfg.augment.width),
        )
        .internal()?;
        let residual = d.residual(&grid);
        Ok((grid, d.basis, residual))
    }
}

pub fn gen_psf(ctx: &Context, out: &Path) -> CmdResult<()> {
    let cfg = &ctx.cfg;
    let optics = Optics::new(cfg)?;
    let mut rng = SeededRng::new(ctx.seed);
    let field = sample_coeff_field(&mut rng, &cfg.turbulence, &cfg.anchors()).internal()?;
    let grid = build_psf_grid(
        &optics.aperture,
        &optics.zernike,
        &field,
        cfg.optics.sampling(),
    )
    .internal()?;
    let d = decompose_basis(
        &grid,
        cfg.basis.rank,
        (cfg.augment.height, cfg.augment.width),
    )
    .internal()?;
    let heat_dir = out.join("heatmaps");
    create_dir(&heat_dir)?;
    let anchors = cfg.anchors();
    let coeffs =
        Tensor::from_f64(vec![anchors.len(), field.n_modes()], &field.flatten()).internal()?;
    dump_tensor(out.join("coeffs.fftd"), &coeffs).data()?;
    dump_tensor(out.join("psf_grid.fftd"), &grid.to_tensor()).data()?;
    let (bases, maps) = d.basis.to_tensors();
    dump_tensor(out.join("basis.fftd"), &bases).data()?;
    dump_tensor(out.join("coeff_maps.fftd"), &maps).data()?;
    for (a, psf) in grid.psfs().iter().enumerate() {
        let (r, c) = (a / anchors.cols, a % anchors.cols);
        save_png(
            &heatmap(psf),
            heat_dir.join(format!("anchor_{r:02}_{c:02}.png")),
            1.0,
        )
        .data()?;
    }
    let summary = json!({
        "seed": ctx.seed,
        "anchors": [anchors.rows, anchors.cols],
        "kernel_size": grid.kernel_size(),
        "rank": cfg.basis.rank,
        "residual": d.residual(&grid),
    });
    write_atomic(
        &out.join("summary.json"),
        serde_json::to_string_pretty(&summary).unwrap().as_bytes(),
    )?;
    ctx.log(format!(
        "wrote {} kernels to {}",
        grid.psfs().len(),
        out.display()
    ));
    Ok(())
}

/// Upscales until the image covers `h×w`, then takes a seeded crop.
fn fit(img: &ImageF, h: usize, w: usize, rng: &mut SeededRng) -> CmdResult<(ImageF, [usize; 2])> {
    let mut img = img.clone();
    if img.height() < h || img.width() < w {
        let s = (h as f64 / img.height() as f64).max(w as f64 / img.width() as f64);
        let nh = ((img.height() as f64 * s).ceil() as usize).max(h);
        let nw = ((img.width() as f64 * s).ceil() as usize).max(w);
        img = resize_bilinear(&img, nh, nw).internal()?;
    }
    let top = rng.index(img.height() - h + 1);
    let left = rng.index(img.width() - w + 1);
    Ok((crop(&img, top, left, h, w).internal()?, [top, left]))
}

fn synth_one(
    ctx: &Context,
    optics: &Optics,
    flares: &[PathBuf],
    bgs: &[PathBuf],
    out: &Path,
    i: usize,
) -> CmdResult<Value> {
    let cfg = &ctx.cfg;
    let (h, w) = (cfg.augment.height, cfg.augment.width);
    let mut rng = ctx.item_rng(i);
    let flare_path = &flares[rng.index(flares.len())];
    let bg_path = &bgs[rng.index(bgs.len())];
    let (flare, flare_crop) = fit(&load_rgb(flare_path, 1.0)?, h, w, &mut rng)?;
    let (bg, bg_crop) = fit(&load_rgb(bg_path, 1.0)?, h, w, &mut rng)?;
    let plan = draw_plan(&mut rng);
    let flare = if cfg.augment.flare {
        apply_flare_pipeline(&flare, &plan).internal()?
    } else {
        flare
    };
    let bg = if cfg.augment.background {
        apply_background_pipeline(&bg, &plan, &mut rng).internal()?
    } else {
        bg
    };
    let (_, basis, residual) = optics.psf_basis(cfg, &mut rng)?;
    let scatter = sv_convolve(&flare, &basis).internal()?;
    let (input, gt) = composite_pair(&bg, &scatter, &cfg.composite).internal()?;
    let name = format!("{i:04}.png");
    let g = cfg.composite.gamma;
    save_png(&input, out.join("input").join(&name), g).data()?;
    save_png(&gt, out.join("gt").join(&name), g).data()?;
    save_png(&scatter, out.join("flare").join(&name), g).data()?;
    ctx.log(format!(
        "pair {i}: {} + {}",
        file_name(flare_path),
        file_name(bg_path)
    ));
    Ok(json!({
        "index": i,
        "seed": ctx.seed,
        "stream": i,
        "file": name,
        "flare": file_name(flare_path),
        "flare_crop": flare_crop,
        "background": file_name(bg_path),
        "background_crop": bg_crop,
        "plan": plan,
        "basis_residual": residual,
    }))
}

pub fn synthesize(
    ctx: &Context,
    flare_dir: &Path,
    bg_dir: &Path,
    out: &Path,
    count: usize,
) -> CmdResult<()> {
    let flares = nonempty_pngs(flare_dir)?;
    let bgs = nonempty_pngs(bg_dir)?;
    for sub in ["input", "gt", "flare"] {
        create_dir(&out.join(sub))?;
    }
    let optics = Optics::new(&ctx.cfg)?;
    let lines = (0..count)
        .into_par_iter()
        .map(|i| synth_one(ctx, &optics, &flares, &bgs, out, i))
        .collect::<CmdResult<Vec<_>>>()?;
    write_jsonl(&out.join("manifest.jsonl"), &lines)?;
    ctx.log(format!("wrote {count} pairs to {}", out.display()));
    Ok(())
}

pub fn augment(
    ctx: &Context,
    input_dir: &Path,
    out: &Path,
    count: usize,
    kind: AugKind,
) -> CmdResult<()> {
    let files = nonempty_pngs(input_dir)?;
    create_dir(out)?;
    let g = ctx.cfg.composite.gamma;
    let lines = (0..count)
        .into_par_iter()
        .map(|i| {
            let mut rng = ctx.item_rng(i);
            let src = &files[rng.index(files.len())];
            let img = load_rgb(src, 1.0)?;
            let plan: AugPlan = draw_plan(&mut rng);
            let result = match kind {
                AugKind::Flare => apply_flare_pipeline(&img, &plan),
                AugKind::Background => apply_background_pipeline(&img, &plan, &mut rng),
            }
            .internal()?;
            let name = format!("{i:04}.png");
            save_png(&result, out.join(&name), g).data()?;
            Ok(json!({
                "index": i,
                "seed": ctx.seed,
                "stream": i,
                "file": name,
                "source": file_name(src),
                "kind": match kind { AugKind::Flare => "flare", AugKind::Background => "background" },
                "plan": plan,
            }))
        })
        .collect::<CmdResult<Vec<_>>>()?;
    write_jsonl(&out.join("manifest.jsonl"), &lines)
}

pub fn composite(ctx: &Context, flare_dir: &Path, bg_dir: &Path, out: &Path) -> CmdResult<()> {
    let flares = nonempty_pngs(flare_dir)?;
    let bgs = nonempty_pngs(bg_dir)?;
    if flares.len() != bgs.len() {
        return Err(data_err(format!(
            "{} flares but {} backgrounds; composite pairs files in name order",
            flares.len(),
            bgs.len()
        )));
    }
    create_dir(&out.join("input"))?;
    create_dir(&out.join("gt"))?;
    let recipe = &ctx.cfg.composite;
    let lines = flares
        .par_iter()
        .zip(&bgs)
        .enumerate()
        .map(|(i, (f, b))| {
            let flare = load_rgb(f, recipe.gamma)?;
            let bg = load_rgb(b, recipe.gamma)?;
            let (input, gt) = composite_pair(&bg, &flare, recipe)
                .map_err(|e| data_err(format!("{} + {}: {e}", f.display(), b.display())))?;
            let name = format!("{i:04}.png");
            save_png(&input, out.join("input").join(&name), recipe.gamma).data()?;
            save_png(&gt, out.join("gt").join(&name), recipe.gamma).data()?;
            Ok(json!({
                "index": i,
                "file": name,
                "flare": file_name(f),
                "background": file_name(b),
                "recipe": recipe,
            }))
        })
        .collect::<CmdResult<Vec<_>>>()?;
    write_jsonl(&out.join("manifest.jsonl"), &lines)
}

pub struct EvalInputs {
    pub pred_dir: PathBuf,
    pub gt_dir: PathBuf,
    pub glare_masks: Option<PathBuf>,
    pub streak_masks: Option<PathBuf>,
    pub lpips: Option<PathBuf>,
}

fn psnr_value(p: Psnr) -> Value {
    serde_json::to_value(p).expect("PSNR serializes")
}

/// Masked PSNR for one image, or the reason it is absent.
fn masked_entry(
    dir: Option<&Path>,
    name: &str,
    kind: MaskKind,
    pred: &ImageF,
    gt: &ImageF,
    thresh: f64,
    peak: f64,
) -> CmdResult<(Option<Psnr>, &'static str)> {
    let Some(dir) = dir else {
        return Ok((None, "not_provided"));
    };
    let path = dir.join(name);
    if !path.is_file() {
        return Ok((None, "missing"));
    }
    let mask = RegionMask::from_image(&load_png(&path, 1.0).data()?, kind)
        .map_err(|e| data_err(format!("{}: {e}", path.display())))?;
    if mask.grid().iter().all(|&v| v < thresh) {
        return Ok((None, "empty"));
    }
    let p = masked_psnr(pred, gt, &mask, thresh, peak)
        .map_err(|e| data_err(format!("{}: {e}", path.display())))?;
    Ok((Some(p), "present"))
}

/// Mean over finite values; `"inf"` when every value is infinite.
fn aggregate_psnr(values: &[Psnr]) -> Value {
    if values.is_empty() {
        return Value::Null;
    }
    let finite: Vec<f64> = values.iter().filter_map(|p| p.db()).collect();
    if finite.is_empty() {
        return psnr_value(Psnr::Infinite);
    }
    json!(finite.iter().sum::<f64>() / finite.len() as f64)
}

pub fn eval(ctx: &Context, inputs: &EvalInputs, report: &Path) -> CmdResult<()> {
    let e = &ctx.cfg.eval;
    let preds = list_pngs(&inputs.pred_dir)?;
    let gts = list_pngs(&inputs.gt_dir)?;
    let pred_names: Vec<String> = preds.iter().map(|p| file_name(p)).collect();
    let gt_names: Vec<String> = gts.iter().map(|p| file_name(p)).collect();
    if let Some(n) = pred_names.iter().find(|n| !gt_names.contains(n)) {
        return Err(data_err(format!(
            "{n} has no ground truth in {}",
            inputs.gt_dir.display()
        )));
    }
    if let Some(n) = gt_names.iter().find(|n| !pred_names.contains(n)) {
        return Err(data_err(format!(
            "{n} has no prediction in {}",
            inputs.pred_dir.display()
        )));
    }
    if preds.is_empty() {
        return Err(data_err(format!(
            "{}: no PNG files",
            inputs.pred_dir.display()
        )));
    }
    let scores = match &inputs.lpips {
        Some(p) => {
            let text = std::fs::read_to_string(p)
                .map_err(|err| data_err(format!("{}: {err}", p.display())))?;
            Some(
                ExternalScores::from_json(&text)
                    .map_err(|err| data_err(format!("{}: {err}", p.display())))?,
            )
        }
        None => None,
    };
    struct Row {
        name: String,
        psnr: Psnr,
        ssim: f64,
        glare: (Option<Psnr>, &'static str),
        streak: (Option<Psnr>, &'static str),
        lpips: Option<f64>,
    }
    let rows = pred_names
        .par_iter()
        .map(|name| {
            let pp = inputs.pred_dir.join(name);
            let gp = inputs.gt_dir.join(name);
            let pred = load_png(&pp, e.decode_gamma).data()?;
            let gt = load_png(&gp, e.decode_gamma).data()?;
            let pair = |err: flaresim::Error| data_err(format!("{name}: {err}"));
            let psnr_v = psnr(&pred, &gt, e.peak).map_err(pair)?;
            let ssim_v = ssim_with_peak(&pred, &gt, e.peak).map_err(pair)?;
            let glare = masked_entry(
                inputs.glare_masks.as_deref(),
                name,
                MaskKind::Glare,
                &pred,
                &gt,
                e.mask_threshold,
                e.peak,
            )?;
            let streak = masked_entry(
                inputs.streak_masks.as_deref(),
                name,
                MaskKind::Streak,
                &pred,
                &gt,
                e.mask_threshold,
                e.peak,
            )?;
            let lpips = scores.as_ref().and_then(|s| s.score(name, &pred, &gt));
            Ok(Row {
                name: name.clone(),
                psnr: psnr_v,
                ssim: ssim_v,
                glare,
                streak,
                lpips,
            })
        })
        .collect::<CmdResult<Vec<_>>>()?;

    let per_image: Vec<Value> = rows
        .iter()
        .map(|r| {
            let mut v = json!({
                "name": r.name,
                "psnr": psnr_value(r.psnr),
                "psnr_infinite": r.psnr.is_infinite(),
                "ssim": r.ssim,
                "glare_mask": r.glare.1,
                "streak_mask": r.streak.1,
            });
            let obj = v.as_object_mut().expect("object literal");
            if let Some(p) = r.glare.0 {
                obj.insert("g_psnr".into(), psnr_value(p));
            }
            if let Some(p) = r.streak.0 {
                obj.insert("s_psnr".into(), psnr_value(p));
            }
            if let Some(l) = r.lpips {
                obj.insert("lpips".into(), json!(l));
            }
            v
        })
        .collect();
    let collect = |f: &dyn Fn(&Row) -> Option<Psnr>| rows.iter().filter_map(f).collect::<Vec<_>>();
    let all_psnr = collect(&|r| Some(r.psnr));
    let g = collect(&|r| r.glare.0);
    let s = collect(&|r| r.streak.0);
    let lp: Vec<f64> = rows.iter().filter_map(|r| r.lpips).collect();
    let mean = |v: &[f64]| {
        if v.is_empty() {
            Value::Null
        } else {
            json!(v.iter().sum::<f64>() / v.len() as f64)
        }
    };
    let ssims: Vec<f64> = rows.iter().map(|r| r.ssim).collect();
    let report_json = json!({
        "count": rows.len(),
        "aggregate": {
            "psnr": aggregate_psnr(&all_psnr),
            "psnr_infinite_count": all_psnr.iter().filter(|p| p.is_infinite()).count(),
            "ssim": mean(&ssims),
            "g_psnr": aggregate_psnr(&g),
            "g_psnr_count": g.len(),
            "s_psnr": aggregate_psnr(&s),
            "s_psnr_count": s.len(),
            "lpips": mean(&lp),
            "lpips_count": lp.len(),
        },
        "lpips_available": scores.is_some(),
        "per_image": per_image,
    });
    if let Some(parent) = report.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_dir(parent)?;
    }
    write_atomic(
        report,
        serde_json::to_string_pretty(&report_json)
            .unwrap()
            .as_bytes(),
    )?;
    ctx.log(format!("scored {} images", rows.len()));
    Ok(())
}

pub fn forward(
    ctx: &Context,
    input: &Path,
    weights: Option<&Path>,
    output: &Path,
) -> CmdResult<()> {
    let model = match weights {
        Some(dir) => {
            Slcformer::load(dir).map_err(|e| data_err(format!("{}: {e}", dir.display())))?
        }
        None => Slcformer::seeded(ctx.cfg.model, ctx.seed).internal()?,
    };
    let img = load_png(input, 1.0).data()?;
    let m = model.config().resolution_multiple();
    if img.height() % m != 0 || img.width() % m != 0 {
        return Err(data_err(format!(
            "{}: {}x{} is not a multiple of {m} (needed by {} stages); crop to {}x{}",
            input.display(),
            img.height(),
            img.width(),
            model.config().stages,
            img.height() / m * m,
            img.width() / m * m
        )));
    }
    let out = slcformer_forward(&img, &model)
        .map_err(|e| data_err(format!("{}: {e}", input.display())))?;
    save_png(&out, output, 1.0).data()?;
    ctx.log(format!("wrote {}", output.display()));
    Ok(())
}

pub fn init_weights(ctx: &Context, out: &Path, zero: bool) -> CmdResult<()> {
    let mut model = Slcformer::seeded(ctx.cfg.model, ctx.seed).internal()?;
    if zero {
        zero_learned(&mut model);
    }
    model.save(out).data()?;
    ctx.log(format!("wrote weights to {}", out.display()));
    Ok(())
}
