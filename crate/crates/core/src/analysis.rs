//! Layer-pattern analysis: per-layer top singular directions and their 2-D
//! projections (PCA and exact t-SNE), exported as CSV and SVG.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::checkpoint::MatrixFamily;
use crate::error::{Error, Result};
use crate::numkernel::{svd_thin_f64, Rng};
use crate::svdspace::SvdSpace;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerSignature {
    pub family: MatrixFamily,
    /// 1-based.
    pub layer_index: usize,
    pub vector: Vec<f64>,
}

/// Row 0 of each layer's coefficient block: the slice of the global top
/// right-singular vector belonging to that layer.
pub fn layer_signatures(space: &SvdSpace) -> Vec<LayerSignature> {
    space
        .coeffs
        .iter()
        .enumerate()
        .map(|(i, c)| LayerSignature {
            family: space.family,
            layer_index: i + 1,
            vector: c.row(0).iter().map(|&v| v as f64).collect(),
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Point2D {
    pub layer: usize,
    pub x: f64,
    pub y: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "method", rename_all = "snake_case")]
pub enum ProjectionMethod {
    Pca,
    Tsne {
        perplexity: f64,
        iterations: usize,
        seed: u64,
        learning_rate: f64,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Projection2D {
    pub points: Vec<Point2D>,
    pub method: ProjectionMethod,
    /// KL(P‖Q) after each iteration; empty for PCA.
    pub kl_history: Vec<f64>,
}

fn check_vectors(vectors: &[Vec<f64>], min: usize) -> Result<usize> {
    if vectors.len() < min {
        return Err(Error::arg(format!(
            "need at least {min} vectors, got {}",
            vectors.len()
        )));
    }
    let d = vectors[0].len();
    if d == 0 {
        return Err(Error::arg("vectors are empty"));
    }
    for (i, v) in vectors.iter().enumerate() {
        if v.len() != d {
            return Err(Error::dim(format!(
                "vector {i} has length {}, expected {d}",
                v.len()
            )));
        }
        if v.iter().any(|x| !x.is_finite()) {
            return Err(Error::numeric(format!("vector {i} has non-finite entries")));
        }
    }
    Ok(d)
}

/// Centres the data and projects it on the two leading principal
/// directions. Directions follow the SVD sign convention, so the result is
/// deterministic. Points are labelled `1..=n`.
pub fn pca2d(vectors: &[Vec<f64>]) -> Result<Projection2D> {
    let d = check_vectors(vectors, 3)?;
    let n = vectors.len();
    let mut mean = vec![0.0; d];
    for v in vectors {
        for (m, x) in mean.iter_mut().zip(v) {
            *m += x / n as f64;
        }
    }
    let mut x = Vec::with_capacity(n * d);
    for v in vectors {
        x.extend(v.iter().zip(&mean).map(|(a, m)| a - m));
    }
    let svd = svd_thin_f64(&x, n, d)?;
    let comps = svd.rank.min(2);
    let coord = |i: usize, k: usize| -> f64 {
        if k >= comps {
            return 0.0;
        }
        let dir = &svd.vt[k * d..(k + 1) * d];
        x[i * d..(i + 1) * d].iter().zip(dir).map(|(a, b)| a * b).sum()
    };
    Ok(Projection2D {
        points: (0..n)
            .map(|i| Point2D {
                layer: i + 1,
                x: coord(i, 0),
                y: coord(i, 1),
            })
            .collect(),
        method: ProjectionMethod::Pca,
        kl_history: Vec::new(),
    })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TsneParams {
    pub perplexity: f64,
    pub iterations: usize,
    pub seed: u64,
    pub learning_rate: f64,
}

pub const EXAGGERATION: f64 = 12.0;
pub const EXAGGERATION_ITERS: usize = 250;
pub const PERPLEXITY_TOL: f64 = 1e-4;

impl Default for TsneParams {
    fn default() -> Self {
        TsneParams {
            perplexity: 5.0,
            iterations: 1000,
            seed: 0,
            learning_rate: 2.0,
        }
    }
}

fn sq_dists(vectors: &[Vec<f64>]) -> Vec<f64> {
    let n = vectors.len();
    let mut d = vec![0.0; n * n];
    for i in 0..n {
        for j in i + 1..n {
            let s: f64 = vectors[i]
                .iter()
                .zip(&vectors[j])
                .map(|(a, b)| (a - b) * (a - b))
                .sum();
            d[i * n + j] = s;
            d[j * n + i] = s;
        }
    }
    d
}

/// Row `i` of the conditional affinities for precision `beta`, with its
/// entropy in nats.
fn cond_row(d: &[f64], i: usize, n: usize, beta: f64, row: &mut [f64]) -> f64 {
    let di = &d[i * n..(i + 1) * n];
    // Shift by the smallest off-diagonal distance for stability.
    let dmin = (0..n)
        .filter(|&j| j != i)
        .map(|j| di[j])
        .fold(f64::INFINITY, f64::min);
    let mut sum = 0.0;
    for j in 0..n {
        row[j] = if j == i { 0.0 } else { (-(di[j] - dmin) * beta).exp() };
        sum += row[j];
    }
    let mut h = 0.0;
    for j in 0..n {
        row[j] /= sum;
        if row[j] > 0.0 {
            h -= row[j] * row[j].ln();
        }
    }
    h
}

/// Conditional affinities `p_{j|i}` (row-major, rows sum to 1) with each
/// row's Gaussian precision found by bisection so that its perplexity
/// `exp(H)` matches the target. Returns the matrix and the achieved
/// perplexity of every row.
pub fn calibrate_affinities(vectors: &[Vec<f64>], perplexity: f64) -> Result<(Vec<f64>, Vec<f64>)> {
    check_vectors(vectors, 3)?;
    let n = vectors.len();
    if !(perplexity > 0.0 && perplexity < (n as f64 - 1.0) / 3.0) {
        return Err(Error::arg(format!(
            "perplexity {perplexity} infeasible for {n} points (need 0 < p < {:.3})",
            (n as f64 - 1.0) / 3.0
        )));
    }
    let d = sq_dists(vectors);
    let target = perplexity.ln();
    let mut p = vec![0.0; n * n];
    let mut achieved = vec![0.0; n];
    for i in 0..n {
        let row = &mut p[i * n..(i + 1) * n];
        let (mut lo, mut hi) = (0.0f64, f64::INFINITY);
        let mut beta = 1.0;
        let mut h = cond_row(&d, i, n, beta, row);
        for _ in 0..500 {
            if (h.exp() - perplexity).abs() <= PERPLEXITY_TOL * 1e-3 {
                break;
            }
            // Entropy falls as the precision grows.
            if h > target {
                lo = beta;
                beta = if hi.is_finite() { 0.5 * (beta + hi) } else { beta * 2.0 };
            } else {
                hi = beta;
                beta = 0.5 * (beta + lo);
            }
            h = cond_row(&d, i, n, beta, row);
        }
        achieved[i] = h.exp();
        if (achieved[i] - perplexity).abs() > PERPLEXITY_TOL {
            return Err(Error::Convergence(format!(
                "perplexity calibration of point {i} reached {} (target {perplexity})",
                achieved[i]
            )));
        }
    }
    Ok((p, achieved))
}

fn kl_and_q(p: &[f64], y: &[f64], n: usize, num: &mut [f64]) -> (f64, f64) {
    let mut z = 0.0;
    for i in 0..n {
        for j in 0..n {
            if i == j {
                num[i * n + j] = 0.0;
                continue;
            }
            let dx = y[2 * i] - y[2 * j];
            let dy = y[2 * i + 1] - y[2 * j + 1];
            let v = 1.0 / (1.0 + dx * dx + dy * dy);
            num[i * n + j] = v;
            z += v;
        }
    }
    let mut kl = 0.0;
    for i in 0..n {
        for j in 0..n {
            let pij = p[i * n + j];
            if i != j && pij > 0.0 {
                let q = (num[i * n + j] / z).max(1e-300);
                kl += pij * (pij / q).ln();
            }
        }
    }
    (kl, z)
}

/// Exact t-SNE into two dimensions.
pub fn tsne2d(vectors: &[Vec<f64>], params: &TsneParams) -> Result<Projection2D> {
    if params.iterations == 0 || !(params.learning_rate > 0.0) {
        return Err(Error::arg("t-SNE needs at least one iteration and a positive learning rate"));
    }
    let (cond, _) = calibrate_affinities(vectors, params.perplexity)?;
    let n = vectors.len();
    let mut p = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            if i != j {
                p[i * n + j] = ((cond[i * n + j] + cond[j * n + i]) / (2.0 * n as f64)).max(1e-12);
            }
        }
    }
    let mut rng = Rng::derive(params.seed, "tsne");
    let mut y: Vec<f64> = (0..2 * n).map(|_| 1e-4 * rng.normal()).collect();
    let mut update = vec![0.0; 2 * n];
    let mut gains = vec![1.0f64; 2 * n];
    let mut num = vec![0.0; n * n];
    let mut grad = vec![0.0; 2 * n];
    let mut history = Vec::with_capacity(params.iterations);
    for it in 0..params.iterations {
        let exag = if it < EXAGGERATION_ITERS { EXAGGERATION } else { 1.0 };
        let momentum = if it < EXAGGERATION_ITERS { 0.5 } else { 0.8 };
        let (_, z) = kl_and_q(&p, &y, n, &mut num);
        grad.iter_mut().for_each(|g| *g = 0.0);
        for i in 0..n {
            for j in 0..n {
                if i == j {
                    continue;
                }
                let w = num[i * n + j];
                let m = 4.0 * (exag * p[i * n + j] - w / z) * w;
                grad[2 * i] += m * (y[2 * i] - y[2 * j]);
                grad[2 * i + 1] += m * (y[2 * i + 1] - y[2 * j + 1]);
            }
        }
        for k in 0..2 * n {
            gains[k] = if (grad[k] > 0.0) != (update[k] > 0.0) {
                gains[k] + 0.2
            } else {
                (gains[k] * 0.8).max(0.01)
            };
            update[k] = momentum * update[k] - params.learning_rate * gains[k] * grad[k];
            y[k] += update[k];
        }
        for c in 0..2 {
            let mean = (0..n).map(|i| y[2 * i + c]).sum::<f64>() / n as f64;
            for i in 0..n {
                y[2 * i + c] -= mean;
            }
        }
        let (kl, _) = kl_and_q(&p, &y, n, &mut num);
        if !kl.is_finite() || y.iter().any(|v| !v.is_finite()) {
            return Err(Error::numeric(format!("t-SNE diverged at iteration {it}")));
        }
        history.push(kl);
    }
    Ok(Projection2D {
        points: (0..n)
            .map(|i| Point2D {
                layer: i + 1,
                x: y[2 * i],
                y: y[2 * i + 1],
            })
            .collect(),
        method: ProjectionMethod::Tsne {
            perplexity: params.perplexity,
            iterations: params.iterations,
            seed: params.seed,
            learning_rate: params.learning_rate,
        },
        kl_history: history,
    })
}

pub fn projection_csv(proj: &Projection2D) -> String {
    let mut s = String::from("layer,x,y\n");
    for p in &proj.points {
        let _ = writeln!(s, "{},{:?},{:?}", p.layer, p.x, p.y);
    }
    s
}

pub fn parse_projection_csv(text: &str) -> Result<Vec<Point2D>> {
    let mut lines = text.lines();
    if lines.next() != Some("layer,x,y") {
        return Err(Error::Format("projection CSV must start with 'layer,x,y'".into()));
    }
    lines
        .filter(|l| !l.is_empty())
        .map(|l| {
            let f: Vec<&str> = l.split(',').collect();
            let bad = || Error::Format(format!("bad projection row '{l}'"));
            if f.len() != 3 {
                return Err(bad());
            }
            Ok(Point2D {
                layer: f[0].parse().map_err(|_| bad())?,
                x: f[1].parse().map_err(|_| bad())?,
                y: f[2].parse().map_err(|_| bad())?,
            })
        })
        .collect()
}

/// Sequential ramp from dark purple through teal to yellow.
fn ramp(t: f64) -> (u8, u8, u8) {
    const STOPS: [(f64, f64, f64); 3] = [(68.0, 1.0, 84.0), (33.0, 145.0, 140.0), (253.0, 231.0, 37.0)];
    let t = t.clamp(0.0, 1.0) * 2.0;
    let k = (t.floor() as usize).min(1);
    let f = t - k as f64;
    let (a, b) = (STOPS[k], STOPS[k + 1]);
    let mix = |x: f64, y: f64| (x + (y - x) * f).round() as u8;
    (mix(a.0, b.0), mix(a.1, b.1), mix(a.2, b.2))
}

pub fn projection_svg(proj: &Projection2D, title: &str) -> String {
    const W: f64 = 480.0;
    const PAD: f64 = 40.0;
    let (mut x0, mut x1, mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
    for p in &proj.points {
        x0 = x0.min(p.x);
        x1 = x1.max(p.x);
        y0 = y0.min(p.y);
        y1 = y1.max(p.y);
    }
    let span = (x1 - x0).max(y1 - y0).max(1e-12);
    let sx = |x: f64| PAD + (x - x0) / span * (W - 2.0 * PAD);
    let sy = |y: f64| W - PAD - (y - y0) / span * (W - 2.0 * PAD);
    let max_layer = proj.points.iter().map(|p| p.layer).max().unwrap_or(1).max(2);
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{W}" viewBox="0 0 {W} {W}">"#
    );
    let _ = writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(
        s,
        r#"<title>{}</title>"#,
        title.replace('&', "&amp;").replace('<', "&lt;")
    );
    for p in &proj.points {
        let (r, g, b) = ramp((p.layer - 1) as f64 / (max_layer - 1) as f64);
        let (cx, cy) = (sx(p.x), sy(p.y));
        let _ = writeln!(
            s,
            r#"<circle cx="{cx:.2}" cy="{cy:.2}" r="7" fill="rgb({r},{g},{b})" stroke="black" stroke-width="0.5"/>"#
        );
        let _ = writeln!(
            s,
            r#"<text x="{:.2}" y="{:.2}" font-size="11" font-family="sans-serif">{}</text>"#,
            cx + 9.0,
            cy + 4.0,
            p.layer
        );
    }
    s.push_str("</svg>\n");
    s
}

pub fn export_projection(proj: &Projection2D, csv_path: &Path, svg_path: &Path) -> Result<()> {
    let title = match proj.method {
        ProjectionMethod::Pca => "pca".to_string(),
        ProjectionMethod::Tsne { perplexity, .. } => format!("tsne (perplexity {perplexity})"),
    };
    std::fs::write(csv_path, projection_csv(proj))?;
    std::fs::write(svg_path, projection_svg(proj, &title))?;
    Ok(())
}
