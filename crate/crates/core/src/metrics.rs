//! Ellipse fitting, pupil-center preservation, objective parity and speed
//! benchmarking.

use std::collections::BTreeMap;
use std::path::Path;
use std::time::Instant;

use nalgebra::{Matrix2, Matrix3, Vector3};

use crate::error::{Error, Result};
use crate::image_io::Image;
use crate::loss::LossConfig;
use crate::lossnet::LossNet;
use crate::masks::{SemanticMask, PUPIL};
use crate::optim::{image_objective, load_mask, projected_lbfgs, white_noise_image, LbfgsConfig};
use crate::transform::TransformNet;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Ellipse {
    pub cx: f64,
    pub cy: f64,
    /// Semi-major axis.
    pub a: f64,
    /// Semi-minor axis.
    pub b: f64,
    /// Angle of the major axis from the x axis, in `(-π/2, π/2]`.
    pub theta: f64,
}

fn degenerate(msg: &str) -> Error {
    Error::Degenerate(msg.to_string())
}

/// Null vector of a rank-2 `3 × 3` matrix via the largest row cross product.
fn null_vector(m: &Matrix3<f64>) -> Vector3<f64> {
    let rows = [m.row(0).transpose(), m.row(1).transpose(), m.row(2).transpose()];
    let candidates = [rows[0].cross(&rows[1]), rows[0].cross(&rows[2]), rows[1].cross(&rows[2])];
    candidates
        .into_iter()
        .max_by(|a, b| a.norm_squared().total_cmp(&b.norm_squared()))
        .expect("three candidates")
}

/// Direct least-squares ellipse fit (numerically stable variant), on points
/// normalized to zero mean and unit RMS radius.
pub fn fit_ellipse(points: &[(f64, f64)]) -> Result<Ellipse> {
    if points.len() < 6 {
        return Err(degenerate("ellipse fit needs at least 6 points"));
    }
    if points.iter().any(|(x, y)| !x.is_finite() || !y.is_finite()) {
        return Err(Error::NonFinite("ellipse fit input".into()));
    }
    let n = points.len() as f64;
    let mx = points.iter().map(|p| p.0).sum::<f64>() / n;
    let my = points.iter().map(|p| p.1).sum::<f64>() / n;
    let scale = (points.iter().map(|p| (p.0 - mx).powi(2) + (p.1 - my).powi(2)).sum::<f64>() / n).sqrt();
    if scale.is_nan() || scale <= 0.0 {
        return Err(degenerate("all points coincide"));
    }
    let mut s1 = Matrix3::<f64>::zeros();
    let mut s2 = Matrix3::<f64>::zeros();
    let mut s3 = Matrix3::<f64>::zeros();
    for &(px, py) in points {
        let (x, y) = ((px - mx) / scale, (py - my) / scale);
        let d1 = Vector3::new(x * x, x * y, y * y);
        let d2 = Vector3::new(x, y, 1.0);
        s1 += d1 * d1.transpose();
        s2 += d1 * d2.transpose();
        s3 += d2 * d2.transpose();
    }
    let s3_inv = s3.try_inverse().ok_or_else(|| degenerate("points are collinear"))?;
    let t = -s3_inv * s2.transpose();
    let m = s1 + s2 * t;
    // Premultiply by the inverse of the ellipse constraint matrix.
    let reduced = Matrix3::from_rows(&[
        (m.row(2) / 2.0).into_owned(),
        (-m.row(1)).into_owned(),
        (m.row(0) / 2.0).into_owned(),
    ]);
    // The scatter matrix is PSD, so the ellipse is the eigenvector of the
    // largest real eigenvalue; the other two are negative.
    let eigen = reduced.complex_eigenvalues();
    let lambda = eigen
        .iter()
        .filter(|l| l.im.abs() <= 1e-9 * (1.0 + l.re.abs()))
        .map(|l| l.re)
        .max_by(f64::total_cmp)
        .ok_or_else(|| degenerate("no real eigenvalue"))?;
    let a1 = null_vector(&(reduced - Matrix3::identity() * lambda));
    let scale_m = reduced.norm().max(f64::MIN_POSITIVE);
    if a1.norm() <= 1e-12 * scale_m * scale_m || 4.0 * a1[0] * a1[2] - a1[1] * a1[1] <= 0.0 {
        return Err(degenerate("no ellipse fits the points"));
    }
    let a2 = t * a1;
    let (a, b, c, d, e, f) = (a1[0], a1[1], a1[2], a2[0], a2[1], a2[2]);
    let det = 4.0 * a * c - b * b;
    if det.is_nan() || det <= 0.0 {
        return Err(degenerate("conic is not an ellipse"));
    }
    let x0 = (b * e - 2.0 * c * d) / det;
    let y0 = (b * d - 2.0 * a * e) / det;
    let f0 = f + (d * x0 + e * y0) / 2.0;
    let q = Matrix2::new(a, b / 2.0, b / 2.0, c);
    let eig = q.symmetric_eigen();
    let (l_small, l_big, i_small) = if eig.eigenvalues[0] <= eig.eigenvalues[1] {
        (eig.eigenvalues[0], eig.eigenvalues[1], 0)
    } else {
        (eig.eigenvalues[1], eig.eigenvalues[0], 1)
    };
    if !(-f0 / l_small > 0.0 && -f0 / l_big > 0.0) {
        return Err(degenerate("imaginary ellipse"));
    }
    let major = (-f0 / l_small).sqrt();
    let minor = (-f0 / l_big).sqrt();
    let axis = eig.eigenvectors.column(i_small);
    let mut theta = axis[1].atan2(axis[0]);
    if theta <= -std::f64::consts::FRAC_PI_2 {
        theta += std::f64::consts::PI;
    } else if theta > std::f64::consts::FRAC_PI_2 {
        theta -= std::f64::consts::PI;
    }
    if (major - minor).abs() <= 1e-12 * major {
        theta = 0.0;
    }
    Ok(Ellipse {
        cx: x0 * scale + mx,
        cy: y0 * scale + my,
        a: major * scale,
        b: minor * scale,
        theta,
    })
}

/// Centers of support pixels with a 4-neighbor outside the support (or
/// outside the image).
pub fn contour_points(support: &[bool], height: usize, width: usize) -> Vec<(f64, f64)> {
    let at = |y: isize, x: isize| {
        y >= 0 && x >= 0 && (y as usize) < height && (x as usize) < width && support[y as usize * width + x as usize]
    };
    let mut out = Vec::new();
    for y in 0..height as isize {
        for x in 0..width as isize {
            if at(y, x) && !(at(y - 1, x) && at(y + 1, x) && at(y, x - 1) && at(y, x + 1)) {
                out.push((x as f64, y as f64));
            }
        }
    }
    out
}

/// Pupil center: ellipse fit to the pupil contour, or the support centroid
/// when the contour is too small or degenerate.
pub fn pupil_center(mask: &SemanticMask) -> Result<(f64, f64)> {
    let support = mask.support(PUPIL);
    let count = support.iter().filter(|&&s| s).count();
    if count == 0 {
        return Err(degenerate("pupil channel is empty"));
    }
    let contour = contour_points(&support, mask.height(), mask.width());
    if let Ok(e) = fit_ellipse(&contour) {
        return Ok((e.cx, e.cy));
    }
    let (mut sx, mut sy) = (0.0, 0.0);
    for (i, _) in support.iter().enumerate().filter(|(_, &s)| s) {
        sx += (i % mask.width()) as f64;
        sy += (i / mask.width()) as f64;
    }
    Ok((sx / count as f64, sy / count as f64))
}

/// Euclidean distance between the two masks' pupil centers.
pub fn pupil_center_diff(a: &SemanticMask, b: &SemanticMask) -> Result<f64> {
    let (ax, ay) = pupil_center(a)?;
    let (bx, by) = pupil_center(b)?;
    Ok((ax - bx).hypot(ay - by))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Summary {
    pub n: usize,
    pub mean: f64,
    /// Sample standard deviation; zero for fewer than two values.
    pub std: f64,
}

pub fn summarize(values: &[f64]) -> Summary {
    let n = values.len();
    if n == 0 {
        return Summary { n, mean: f64::NAN, std: f64::NAN };
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    let std = if n > 1 {
        (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
    } else {
        0.0
    };
    Summary { n, mean, std }
}

fn mask_files(dir: &Path) -> Result<BTreeMap<String, std::path::PathBuf>> {
    let mut out = BTreeMap::new();
    for entry in std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let p = entry.map_err(|e| Error::io(dir, e))?.path();
        let ext = p.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase);
        if p.is_file() && matches!(ext.as_deref(), Some("png" | "ppm")) {
            let name = p.file_name().and_then(|n| n.to_str()).unwrap_or_default().to_string();
            out.insert(name, p);
        }
    }
    Ok(out)
}

/// Pupil-center distance for every same-named mask pair of two directories.
pub fn pupil_center_batch(dir_a: &Path, dir_b: &Path) -> Result<Vec<(String, f64)>> {
    let a = mask_files(dir_a)?;
    let b = mask_files(dir_b)?;
    let unpaired: Vec<String> = a
        .keys()
        .filter(|k| !b.contains_key(*k))
        .map(|k| dir_a.join(k).display().to_string())
        .chain(b.keys().filter(|k| !a.contains_key(*k)).map(|k| dir_b.join(k).display().to_string()))
        .collect();
    if !unpaired.is_empty() {
        return Err(Error::Unpaired(unpaired));
    }
    a.iter()
        .map(|(name, pa)| {
            let d = pupil_center_diff(&load_mask(pa)?, &load_mask(&b[name])?)
                .map_err(|e| Error::format(pa, format!("pupil center: {e}")))?;
            Ok((name.clone(), d))
        })
        .collect()
}

pub fn pupil_csv(rows: &[(String, f64)]) -> String {
    let mut s = String::from("name,distance_px\n");
    for (name, d) in rows {
        s.push_str(&format!("{name},{d:.6}\n"));
    }
    s
}

/// Content image and mask used in an objective-parity comparison.
#[derive(Clone, Debug)]
pub struct ParityCase {
    pub name: String,
    pub content: Image,
    pub mask: SemanticMask,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParityCurve {
    pub name: String,
    pub feed_forward: f64,
    /// L-BFGS objective per iteration, starting with the white-noise init.
    pub lbfgs: Vec<f64>,
    /// First iteration whose objective is below `feed_forward`.
    pub crossover: Option<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParityReport {
    pub curves: Vec<ParityCurve>,
    /// Iterations requested per case; a case without crossover counts as
    /// `iterations + 1`.
    pub iterations: usize,
}

impl ParityReport {
    fn crossover_values(&self) -> Vec<f64> {
        self.curves
            .iter()
            .map(|c| c.crossover.unwrap_or(self.iterations + 1) as f64)
            .collect()
    }

    pub fn median_crossover(&self) -> f64 {
        let mut v = self.crossover_values();
        v.sort_by(f64::total_cmp);
        let n = v.len();
        if n == 0 {
            return f64::NAN;
        }
        if n % 2 == 1 {
            v[n / 2]
        } else {
            (v[n / 2 - 1] + v[n / 2]) / 2.0
        }
    }

    /// Per-iteration mean and standard deviation over cases; shorter curves
    /// carry their last value forward.
    pub fn to_csv(&self) -> String {
        let len = self.curves.iter().map(|c| c.lbfgs.len()).max().unwrap_or(0);
        let ff = summarize(&self.curves.iter().map(|c| c.feed_forward).collect::<Vec<_>>());
        let mut s = String::from("iter,lbfgs_mean,lbfgs_std,feedforward_mean,feedforward_std\n");
        for k in 0..len {
            let vals: Vec<f64> = self
                .curves
                .iter()
                .filter_map(|c| c.lbfgs.get(k).or(c.lbfgs.last()).copied())
                .collect();
            let st = summarize(&vals);
            s.push_str(&format!("{k},{:.9e},{:.9e},{:.9e},{:.9e}\n", st.mean, st.std, ff.mean, ff.std));
        }
        s
    }
}

/// Compares a transform network's feed-forward objective against projected
/// L-BFGS from white noise on each case.
#[allow(clippy::too_many_arguments)]
pub fn objective_parity(
    model: &TransformNet<f32>,
    loss_net: &LossNet<f32>,
    cfg: &LossConfig,
    cases: &[ParityCase],
    style: &Image,
    style_mask: &SemanticMask,
    lbfgs: &LbfgsConfig,
    seed: u64,
) -> Result<ParityReport> {
    cfg.validate()?;
    if let Some(fp) = model.loss_fingerprint() {
        if fp != cfg.fingerprint() {
            return Err(Error::Config(format!(
                "model was trained with loss configuration {fp:08x}, but {:08x} was given",
                cfg.fingerprint()
            )));
        }
    }
    let mut curves = Vec::with_capacity(cases.len());
    for (i, case) in cases.iter().enumerate() {
        let mut obj = image_objective(loss_net, cfg, &case.content, &case.mask, style, style_mask)?;
        let out = model.forward(&case.content.to_tensor())?;
        let (feed_forward, _) = obj.value(&out)?;
        let (h, w) = (case.content.height(), case.content.width());
        let init: Vec<f64> = white_noise_image(h, w, seed.wrapping_add(i as u64)).data().iter().map(|&v| v as f64).collect();
        let run = projected_lbfgs(&mut obj, &init, lbfgs, |_| {})?;
        let curve: Vec<f64> = run.reports.iter().map(|r| r.objective).collect();
        let crossover = curve.iter().position(|&v| v < feed_forward);
        curves.push(ParityCurve {
            name: case.name.clone(),
            feed_forward,
            lbfgs: curve,
            crossover,
        });
    }
    Ok(ParityReport {
        curves,
        iterations: lbfgs.max_iter,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct BenchRow {
    pub method: String,
    pub resolution: usize,
    pub seconds: f64,
    /// L-BFGS seconds over this row's seconds.
    pub speedup: f64,
    /// True when the time is projected from a sampled prefix of iterations.
    pub extrapolated: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BenchConfig {
    pub resolutions: Vec<usize>,
    pub lbfgs_iters: usize,
    pub feed_forward_runs: usize,
    /// Iterations actually run before extrapolating to `lbfgs_iters`;
    /// `None` runs them all.
    pub lbfgs_sample: Option<usize>,
    pub seed: u64,
}

impl Default for BenchConfig {
    fn default() -> Self {
        BenchConfig {
            resolutions: vec![256, 512],
            lbfgs_iters: 400,
            feed_forward_runs: 5,
            lbfgs_sample: Some(5),
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct BenchReport {
    pub rows: Vec<BenchRow>,
    /// One line per skipped resolution.
    pub skipped: Vec<String>,
}

pub fn median(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n == 0 {
        f64::NAN
    } else if n % 2 == 1 {
        values[n / 2]
    } else {
        (values[n / 2 - 1] + values[n / 2]) / 2.0
    }
}

/// Rough peak bytes of one L-BFGS evaluation at `r × r`.
pub fn lbfgs_memory_estimate(r: usize) -> u64 {
    // Loss-network activations, gradients and im2col scratch.
    5_000 * (r as u64) * (r as u64)
}

fn available_memory() -> Option<u64> {
    let info = std::fs::read_to_string("/proc/meminfo").ok()?;
    let line = info.lines().find(|l| l.starts_with("MemAvailable:"))?;
    let kb: u64 = line.split_whitespace().nth(1)?.parse().ok()?;
    Some(kb * 1024)
}

/// Times feed-forward inference and L-BFGS image optimization per resolution.
pub fn bench(
    model: &TransformNet<f32>,
    loss_net: &LossNet<f32>,
    cfg: &LossConfig,
    bench_cfg: &BenchConfig,
    mut fixture: impl FnMut(usize) -> (Image, SemanticMask, Image, SemanticMask),
) -> Result<BenchReport> {
    if bench_cfg.feed_forward_runs < 5 {
        return Err(Error::Config("bench needs at least 5 feed-forward runs".into()));
    }
    let mut report = BenchReport::default();
    let avail = available_memory();
    for &r in &bench_cfg.resolutions {
        let need = lbfgs_memory_estimate(r);
        if let Some(a) = avail {
            if need > a {
                report.skipped.push(format!(
                    "{r}x{r}: skipped, needs about {} MiB but {} MiB are available",
                    need >> 20,
                    a >> 20
                ));
                continue;
            }
        }
        let (content, cmask, style, smask) = fixture(r);
        let input = content.to_tensor::<f32>();
        let mut times = Vec::with_capacity(bench_cfg.feed_forward_runs);
        for _ in 0..bench_cfg.feed_forward_runs {
            let t = Instant::now();
            let out = model.forward(&input)?;
            times.push(t.elapsed().as_secs_f64());
            std::hint::black_box(out);
        }
        let ff = median(&mut times).max(1e-9);

        let mut obj = image_objective(loss_net, cfg, &content, &cmask, &style, &smask)?;
        let init: Vec<f64> = white_noise_image(r, r, bench_cfg.seed).data().iter().map(|&v| v as f64).collect();
        let run_iters = bench_cfg.lbfgs_sample.map_or(bench_cfg.lbfgs_iters, |s| s.min(bench_cfg.lbfgs_iters)).max(1);
        let lcfg = LbfgsConfig {
            max_iter: run_iters,
            tolerance: 0.0,
            grad_tolerance: 0.0,
            ..Default::default()
        };
        let t = Instant::now();
        let run = projected_lbfgs(&mut obj, &init, &lcfg, |_| {})?;
        let elapsed = t.elapsed().as_secs_f64();
        let done = run.reports.len().saturating_sub(1).max(1);
        let extrapolated = done < bench_cfg.lbfgs_iters;
        let lbfgs_s = elapsed * bench_cfg.lbfgs_iters as f64 / done as f64;
        report.rows.push(BenchRow {
            method: format!("lbfgs-{}-iters", bench_cfg.lbfgs_iters),
            resolution: r,
            seconds: lbfgs_s,
            speedup: 1.0,
            extrapolated,
        });
        report.rows.push(BenchRow {
            method: "feed-forward".into(),
            resolution: r,
            seconds: ff,
            speedup: lbfgs_s / ff,
            extrapolated: false,
        });
    }
    Ok(report)
}

impl BenchReport {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("method,resolution,seconds,speedup,extrapolated\n");
        for r in &self.rows {
            s.push_str(&format!(
                "{},{},{:.6},{:.2},{}\n",
                r.method, r.resolution, r.seconds, r.speedup, r.extrapolated
            ));
        }
        s
    }

    /// Methods as rows, resolutions as columns, then a speedup row.
    pub fn to_table(&self) -> String {
        let mut resolutions: Vec<usize> = self.rows.iter().map(|r| r.resolution).collect();
        resolutions.dedup();
        let mut methods: Vec<&str> = Vec::new();
        for r in &self.rows {
            if !methods.contains(&r.method.as_str()) {
                methods.push(&r.method);
            }
        }
        let cell = |method: &str, res: usize| {
            self.rows
                .iter()
                .find(|r| r.method == method && r.resolution == res)
                .map(|r| format!("{:.4}s{}", r.seconds, if r.extrapolated { "*" } else { "" }))
                .unwrap_or_else(|| "-".into())
        };
        let mut lines: Vec<Vec<String>> = Vec::new();
        let mut header = vec!["Method \\ Resolution".to_string()];
        header.extend(resolutions.iter().map(|r| format!("{r}x{r}")));
        lines.push(header);
        for m in &methods {
            let mut row = vec![m.to_string()];
            row.extend(resolutions.iter().map(|&r| cell(m, r)));
            lines.push(row);
        }
        let mut speed = vec!["speedup (feed-forward vs lbfgs)".to_string()];
        speed.extend(resolutions.iter().map(|&res| {
            self.rows
                .iter()
                .find(|r| r.method == "feed-forward" && r.resolution == res)
                .map(|r| format!("{:.0}x", r.speedup))
                .unwrap_or_else(|| "-".into())
        }));
        lines.push(speed);
        let widths: Vec<usize> = (0..lines[0].len())
            .map(|c| lines.iter().map(|l| l[c].len()).max().unwrap_or(0))
            .collect();
        let mut out = String::new();
        for (i, l) in lines.iter().enumerate() {
            let cells: Vec<String> = l.iter().zip(&widths).map(|(s, w)| format!("{s:<w$}")).collect();
            out.push_str(&format!("| {} |\n", cells.join(" | ")));
            if i == 0 {
                let rule: Vec<String> = widths.iter().map(|w| "-".repeat(*w)).collect();
                out.push_str(&format!("| {} |\n", rule.join(" | ")));
            }
        }
        if self.rows.iter().any(|r| r.extrapolated) {
            out.push_str("* extrapolated from a sampled prefix of iterations\n");
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::disc_mask;

    fn ellipse_points(cx: f64, cy: f64, a: f64, b: f64, theta: f64, n: usize) -> Vec<(f64, f64)> {
        (0..n)
            .map(|i| {
                let t = i as f64 / n as f64 * std::f64::consts::TAU;
                let (x, y) = (a * t.cos(), b * t.sin());
                (cx + x * theta.cos() - y * theta.sin(), cy + x * theta.sin() + y * theta.cos())
            })
            .collect()
    }

    #[test]
    fn exact_circle() {
        let e = fit_ellipse(&ellipse_points(20.0, 30.0, 10.0, 10.0, 0.0, 40)).unwrap();
        for (got, want) in [(e.cx, 20.0), (e.cy, 30.0), (e.a, 10.0), (e.b, 10.0)] {
            assert!((got - want).abs() < 1e-6, "{got} vs {want}");
        }
    }

    #[test]
    fn rotated_ellipse() {
        let e = fit_ellipse(&ellipse_points(-5.0, 7.0, 12.0, 7.0, 0.6, 50)).unwrap();
        for (got, want) in [(e.cx, -5.0), (e.cy, 7.0), (e.a, 12.0), (e.b, 7.0), (e.theta, 0.6)] {
            assert!((got - want).abs() < 1e-6, "{got} vs {want}");
        }
    }

    #[test]
    fn collinear_points_are_rejected() {
        let pts: Vec<(f64, f64)> = (0..10).map(|i| (i as f64, 2.0 * i as f64)).collect();
        assert!(matches!(fit_ellipse(&pts), Err(Error::Degenerate(_))));
        assert!(fit_ellipse(&pts[..5]).is_err());
    }

    #[test]
    fn translated_disc_distance() {
        let a = disc_mask(64, 64, 30.0, 30.0, 8.0);
        let b = disc_mask(64, 64, 33.0, 34.0, 8.0);
        assert!((pupil_center_diff(&a, &b).unwrap() - 5.0).abs() < 0.5);
        assert_eq!(pupil_center_diff(&a, &a).unwrap(), 0.0);
    }

    #[test]
    fn tiny_pupil_falls_back_to_centroid() {
        let m = SemanticMask::from_fn(16, 16, |y, x| (y, x) == (5, 6) || (y, x) == (5, 7), |_, _| true);
        let (x, y) = pupil_center(&m).unwrap();
        assert_eq!((x, y), (6.5, 5.0));
    }

    #[test]
    fn summary_statistics() {
        let s = summarize(&[1.0, 2.0, 3.0]);
        assert_eq!((s.n, s.mean, s.std), (3, 2.0, 1.0));
    }

    #[test]
    fn table_layout() {
        let report = BenchReport {
            rows: vec![
                BenchRow {
                    method: "lbfgs-400-iters".into(),
                    resolution: 256,
                    seconds: 100.0,
                    speedup: 1.0,
                    extrapolated: true,
                },
                BenchRow {
                    method: "feed-forward".into(),
                    resolution: 256,
                    seconds: 0.5,
                    speedup: 200.0,
                    extrapolated: false,
                },
            ],
            skipped: vec![],
        };
        let t = report.to_table();
        assert!(t.contains("256x256"));
        assert!(t.contains("200x"));
        assert!(t.contains("100.0000s*"));
        assert_eq!(report.to_csv().lines().count(), 3);
    }
}
