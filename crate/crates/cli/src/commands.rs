use std::path::{Path, PathBuf};
use std::time::Instant;

use eyepurify::fsutil::write_atomic;
use eyepurify::loss::{GramNormalization, LossConfig};
use eyepurify::lossnet::LossNet;
use eyepurify::masks::{decode_mask, encode_mask, repair_orphans, Provenance, SemanticMask};
use eyepurify::metrics::{bench as run_bench, pupil_center_batch, pupil_csv, summarize, BenchConfig};
use eyepurify::optim::{
    image_objective, load_corpus, load_mask, projected_lbfgs, train_transform, white_noise_image, write_curve_csv,
    LbfgsConfig, TrainConfig,
};
use eyepurify::synth::{eye_fixture, Domain};
use eyepurify::transform::{Preset, TransformConfig, TransformNet};
use eyepurify::{decode_image, read_image, resize_bilinear, write_image, Error, Image, Result};

use crate::config::{List, PathArg, Resolver};
use crate::LossArgs;

fn parse<T: std::str::FromStr>(key: &str, v: Option<String>) -> Result<Option<T>>
where
    T::Err: std::fmt::Display,
{
    v.map(|s| {
        s.parse::<T>()
            .map_err(|e| Error::Config(format!("invalid value `{s}` for --{key}: {e}")))
    })
    .transpose()
}

fn path_flag(v: Option<String>) -> Option<PathArg> {
    v.map(|s| PathArg(s.into()))
}

fn finish(r: &Resolver, command: &str) -> Result<()> {
    r.finish()?;
    eprintln!("{command}: resolved configuration\n{}", r.render().trim_end());
    Ok(())
}

fn resolve_loss(r: &mut Resolver, a: LossArgs) -> Result<(LossConfig, Option<PathArg>, u64)> {
    let d = LossConfig::default();
    let layers = |r: &mut Resolver, key: &str, flag: Option<String>, def: &[String]| -> Result<Vec<String>> {
        Ok(r.get(key, parse::<List<String>>(key, flag)?, List(def.to_vec()))?.0)
    };
    let cfg = LossConfig {
        content_local: layers(r, "content-local", a.content_local, &d.content_local)?,
        content_global: layers(r, "content-global", a.content_global, &d.content_global)?,
        style_local: layers(r, "style-local", a.style_local, &d.style_local)?,
        style_global: layers(r, "style-global", a.style_global, &d.style_global)?,
        alpha: r.get("alpha", a.alpha, d.alpha)?,
        beta: r.get("beta", a.beta, d.beta)?,
        lambda_global: r.get("lambda-global", a.lambda_global, d.lambda_global)?,
        lambda_local: r.get("lambda-local", a.lambda_local, d.lambda_local)?,
        theta: r.get("theta", a.theta, d.theta)?,
        gram: r.get("gram", parse::<GramNormalization>("gram", a.gram)?, d.gram)?,
        ..d
    };
    let loss_net = r.optional("loss-net", path_flag(a.loss_net))?;
    let loss_seed = r.get("loss-seed", a.loss_seed, 0)?;
    Ok((cfg, loss_net, loss_seed))
}

fn loss_network(path: Option<&PathArg>, seed: u64) -> Result<LossNet<f32>> {
    match path {
        Some(p) => LossNet::load(&p.0),
        None => Ok(LossNet::seeded(seed)),
    }
}

fn check_same_size(image: &Image, image_path: &Path, mask: &SemanticMask, mask_path: &Path) -> Result<()> {
    if (mask.height(), mask.width()) != (image.height(), image.width()) {
        return Err(Error::Resolution {
            what: format!("{} (mask for {})", mask_path.display(), image_path.display()),
            expected_h: image.height(),
            expected_w: image.width(),
            actual_h: mask.height(),
            actual_w: mask.width(),
        });
    }
    Ok(())
}

pub fn stylize(
    r: &mut Resolver,
    model: Option<String>,
    input: Option<String>,
    output: Option<String>,
    size: Option<usize>,
) -> Result<()> {
    let model = r.require("model", path_flag(model))?;
    let input = r.require("input", path_flag(input))?;
    let output = r.require("output", path_flag(output))?;
    let size = r.optional("size", size)?;
    finish(r, "stylize")?;
    let net = TransformNet::<f32>::load(&model.0)?;
    let mut image = read_image(&input.0)?;
    if let Some(s) = size {
        image = resize_bilinear(&image, s, s);
    }
    let t = Instant::now();
    let out = net.forward(&image.to_tensor())?;
    let elapsed = t.elapsed();
    let result = Image::from_tensor(&out, 0)?;
    write_image(&result, &output.0)?;
    println!(
        "stylized {}x{} in {:.1} ms -> {}",
        result.height(),
        result.width(),
        elapsed.as_secs_f64() * 1e3,
        output
    );
    Ok(())
}

pub struct OptimizeArgs {
    pub content: Option<String>,
    pub style: Option<String>,
    pub content_mask: Option<String>,
    pub style_mask: Option<String>,
    pub iters: Option<usize>,
    pub out: Option<String>,
    pub curve_csv: Option<String>,
    pub seed: Option<u64>,
    pub tolerance: Option<f64>,
}

pub fn optimize(r: &mut Resolver, a: OptimizeArgs, loss: LossArgs) -> Result<()> {
    let content = r.require("content", path_flag(a.content))?;
    let style = r.require("style", path_flag(a.style))?;
    let content_mask = r.require("content-mask", path_flag(a.content_mask))?;
    let style_mask = r.require("style-mask", path_flag(a.style_mask))?;
    let out = r.require("out", path_flag(a.out))?;
    let curve = r.optional("curve-csv", path_flag(a.curve_csv))?;
    let defaults = LbfgsConfig::default();
    let lbfgs = LbfgsConfig {
        max_iter: r.get("iters", a.iters, defaults.max_iter)?,
        tolerance: r.get("tolerance", a.tolerance, defaults.tolerance)?,
        ..defaults
    };
    let seed = r.get("seed", a.seed, 0)?;
    let (cfg, loss_net_path, loss_seed) = resolve_loss(r, loss)?;
    cfg.validate()?;
    finish(r, "optimize")?;

    let content_img = read_image(&content.0)?;
    let style_img = read_image(&style.0)?;
    let cm = load_mask(&content_mask.0)?;
    let sm = load_mask(&style_mask.0)?;
    check_same_size(&content_img, &content.0, &cm, &content_mask.0)?;
    check_same_size(&style_img, &style.0, &sm, &style_mask.0)?;
    let net = loss_network(loss_net_path.as_ref(), loss_seed)?;
    let mut objective = image_objective(&net, &cfg, &content_img, &cm, &style_img, &sm)?;
    let (h, w) = (content_img.height(), content_img.width());
    let init: Vec<f64> = white_noise_image(h, w, seed).data().iter().map(|&v| v as f64).collect();
    let t = Instant::now();
    let every = (lbfgs.max_iter / 20).max(1);
    let run = projected_lbfgs(&mut objective, &init, &lbfgs, |rep| {
        if rep.iter % every == 0 {
            eprintln!("iter {:>5}  objective {:.6e}", rep.iter, rep.objective);
        }
    })?;
    let pixels: Vec<f32> = run.x.iter().map(|&v| v as f32).collect();
    write_image(&Image::new(h, w, pixels)?, &out.0)?;
    if let Some(c) = curve {
        write_curve_csv(&c.0, &run.reports)?;
    }
    println!(
        "optimized {}x{} for {} iterations ({:?}) in {:.1} s, objective {:.6e} -> {}",
        h,
        w,
        run.reports.len() - 1,
        run.stop,
        t.elapsed().as_secs_f64(),
        run.objective(),
        out
    );
    Ok(())
}

pub struct TrainArgs {
    pub corpus: Option<String>,
    pub style: Option<String>,
    pub style_mask: Option<String>,
    pub out_model: Option<String>,
    pub iters: Option<usize>,
    pub batch: Option<usize>,
    pub lr: Option<f64>,
    pub seed: Option<u64>,
    pub size: Option<usize>,
    pub preset: Option<String>,
    pub curve_csv: Option<String>,
}

pub fn train(r: &mut Resolver, a: TrainArgs, loss: LossArgs) -> Result<()> {
    let corpus = r.require("corpus", path_flag(a.corpus))?;
    let style = r.require("style", path_flag(a.style))?;
    let style_mask = r.require("style-mask", path_flag(a.style_mask))?;
    let out_model = r.require("out-model", path_flag(a.out_model))?;
    let curve = r.optional("curve-csv", path_flag(a.curve_csv))?;
    let d = TrainConfig::default();
    let iterations = r.get("iters", a.iters, d.iterations)?;
    let batch_size = r.get("batch", a.batch, d.batch_size)?;
    let lr = r.get("lr", a.lr, d.lr)?;
    let seed = r.get("seed", a.seed, d.seed)?;
    let size = r.get("size", a.size, d.image_size.0)?;
    let preset = r.get("preset", parse::<Preset>("preset", a.preset)?, d.transform.preset)?;
    let (loss_cfg, loss_net_path, loss_seed) = resolve_loss(r, loss)?;
    let cfg = TrainConfig {
        batch_size,
        iterations,
        lr,
        seed,
        image_size: (size, size),
        transform: TransformConfig::new(preset),
        loss: loss_cfg,
    };
    cfg.validate()?;
    eyepurify::transform::shape_plan(&cfg.transform, size, size)?;
    finish(r, "train")?;

    let items = load_corpus(&corpus.0)?;
    let style_img = read_image(&style.0)?;
    let sm = load_mask(&style_mask.0)?;
    check_same_size(&style_img, &style.0, &sm, &style_mask.0)?;
    let net = loss_network(loss_net_path.as_ref(), loss_seed)?;
    eprintln!("training on {} images at {size}x{size}", items.len());
    let every = (iterations / 20).max(1);
    let t = Instant::now();
    let out = train_transform(&items, &style_img, &sm, &cfg, &net, |rep| {
        if rep.iter % every == 0 || rep.iter == 1 {
            eprintln!("iter {:>6}  loss {:.6e}  {:.0} ms", rep.iter, rep.objective, rep.ms);
        }
    })?;
    out.net.save(&out_model.0)?;
    let curve_path = curve.map(|c| c.0).unwrap_or_else(|| {
        let mut p = out_model.0.clone().into_os_string();
        p.push(".curve.csv");
        PathBuf::from(p)
    });
    write_curve_csv(&curve_path, &out.curve)?;
    let first = out.curve.first().map_or(f64::NAN, |r| r.objective);
    let last = out.curve.last().map_or(f64::NAN, |r| r.objective);
    println!(
        "trained {iterations} iterations in {:.1} s, loss {first:.6e} -> {last:.6e}; model {} curve {}",
        t.elapsed().as_secs_f64(),
        out_model,
        curve_path.display()
    );
    Ok(())
}

fn image_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for entry in std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let p = entry.map_err(|e| Error::io(dir, e))?.path();
        let ext = p.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase);
        if p.is_file() && matches!(ext.as_deref(), Some("png" | "ppm")) {
            out.push(p);
        }
    }
    out.sort();
    Ok(out)
}

pub fn repair_masks(r: &mut Resolver, input: Option<String>, out: Option<String>) -> Result<()> {
    let input = r.require("in", path_flag(input))?;
    let out = r.require("out", path_flag(out))?;
    finish(r, "repair-masks")?;
    let files = image_files(&input.0)?;
    std::fs::create_dir_all(&out.0).map_err(|e| Error::io(&out.0, e))?;
    let (mut orphans, mut clipped, mut failed) = (0usize, 0usize, Vec::new());
    for p in &files {
        let bytes = std::fs::read(p).map_err(|e| Error::io(p, e))?;
        let dest = out.0.join(p.file_name().expect("file name"));
        let mask = decode_mask(&decode_image(&bytes, p)?);
        match repair_orphans(&mask) {
            Ok((fixed, outcome)) => {
                orphans += outcome.orphan_fixed as usize;
                clipped += (outcome.clipped > 0) as usize;
                if fixed.provenance() == Provenance::Decoded {
                    write_atomic(&dest, &bytes)?;
                } else {
                    write_image(&encode_mask(&fixed), &dest)?;
                }
            }
            Err(e) => {
                eprintln!("{}: {e}", p.display());
                failed.push(p.display().to_string());
            }
        }
    }
    println!(
        "processed {} masks: {orphans} orphan labels repaired, {clipped} pupils clipped to the iris, {} failed",
        files.len(),
        failed.len()
    );
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Error::format(&input.0, format!("masks without an eye region: {}", failed.join(", "))))
    }
}

#[allow(clippy::too_many_arguments)]
pub fn bench(
    r: &mut Resolver,
    model: Option<String>,
    sizes: Option<String>,
    lbfgs_iters: Option<usize>,
    lbfgs_sample: Option<usize>,
    runs: Option<usize>,
    csv: Option<String>,
    loss: LossArgs,
) -> Result<()> {
    let model = r.require("model", path_flag(model))?;
    let d = BenchConfig::default();
    let sizes = r.get("sizes", parse::<List<usize>>("sizes", sizes)?, List(vec![256, 512, 1024]))?;
    let lbfgs_iters = r.get("lbfgs-iters", lbfgs_iters, d.lbfgs_iters)?;
    let sample = r.get("lbfgs-sample", lbfgs_sample, d.lbfgs_sample.unwrap_or(0))?;
    let runs = r.get("runs", runs, d.feed_forward_runs)?;
    let csv = r.optional("csv", path_flag(csv))?;
    let (cfg, loss_net_path, loss_seed) = resolve_loss(r, loss)?;
    cfg.validate()?;
    if sizes.0.contains(&0) {
        return Err(Error::Config("bench sizes must be positive".into()));
    }
    finish(r, "bench")?;
    let net = TransformNet::<f32>::load(&model.0)?;
    let loss_net = loss_network(loss_net_path.as_ref(), loss_seed)?;
    let bench_cfg = BenchConfig {
        resolutions: sizes.0,
        lbfgs_iters,
        feed_forward_runs: runs,
        lbfgs_sample: (sample > 0).then_some(sample),
        seed: 0,
    };
    let report = run_bench(&net, &loss_net, &cfg, &bench_cfg, |res| {
        let c = eye_fixture(res, res, Domain::Real, 1);
        let s = eye_fixture(res, res, Domain::Synthetic, 2);
        (c.image, c.mask, s.image, s.mask)
    })?;
    for s in &report.skipped {
        eprintln!("{s}");
    }
    print!("{}", report.to_table());
    if let Some(c) = csv {
        write_atomic(&c.0, report.to_csv().as_bytes())?;
    }
    Ok(())
}

pub fn pupil_center(r: &mut Resolver, a: Option<String>, b: Option<String>, csv: Option<String>) -> Result<()> {
    let a = r.require("a", path_flag(a))?;
    let b = r.require("b", path_flag(b))?;
    let csv = r.optional("csv", path_flag(csv))?;
    finish(r, "metrics pupil-center")?;
    let rows = pupil_center_batch(&a.0, &b.0)?;
    match &csv {
        Some(c) => write_atomic(&c.0, pupil_csv(&rows).as_bytes())?,
        None => print!("{}", pupil_csv(&rows)),
    }
    let s = summarize(&rows.iter().map(|(_, d)| *d).collect::<Vec<_>>());
    if s.n == 0 {
        println!("pupil-center distance over 0 pairs");
    } else {
        println!("pupil-center distance over {} pairs: {:.3} ± {:.3} px", s.n, s.mean, s.std);
    }
    Ok(())
}
