//! Pixel-level and semantic-level evaluation.
//!
//! Perfect matches map to infinite sentinels (`psnr = +∞`, `nmse = −∞`)
//! rather than errors so that sweep tables stay rectangular.

use std::collections::HashMap;

use sha2::{Digest, Sha256};

use crate::channel::C64;
use crate::error::{Error, Result};
use crate::raster::Image;
use crate::scalar::Scalar;
use crate::scene_io::SceneSpec;

fn same_len(a: usize, b: usize) -> Result<()> {
    if a != b {
        return Err(Error::InvalidArgument(format!("length mismatch: {a} vs {b}")));
    }
    if a == 0 {
        return Err(Error::invalid("inputs must be nonempty"));
    }
    Ok(())
}

pub fn mse(a: &[f64], b: &[f64]) -> Result<f64> {
    same_len(a.len(), b.len())?;
    Ok(a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.len() as f64)
}

pub fn psnr(a: &[f64], b: &[f64], max_val: f64) -> Result<f64> {
    if !(max_val > 0.0) {
        return Err(Error::invalid("max_val must be positive"));
    }
    let m = mse(a, b)?;
    if m == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (max_val * max_val / m).log10())
}

pub fn psnr_images<T: Scalar>(a: &Image<T>, b: &Image<T>) -> Result<f64> {
    if !a.same_size(b) {
        return Err(Error::invalid("image sizes differ"));
    }
    psnr(&to_f64(&a.data), &to_f64(&b.data), 1.0)
}

fn to_f64<T: Scalar>(v: &[T]) -> Vec<f64> {
    v.iter().map(|x| x.f64()).collect()
}

/// Standard constants `((0.01·L)², (0.03·L)²)` for dynamic range `L`.
pub fn ssim_constants(range: f64) -> (f64, f64) {
    ((0.01 * range).powi(2), (0.03 * range).powi(2))
}

/// Mean SSIM over all `window × window` positions (stride 1) of every channel.
///
/// `a` and `b` are interleaved `height × width × channels` buffers.
#[allow(clippy::too_many_arguments)]
pub fn ssim(
    a: &[f64],
    b: &[f64],
    width: usize,
    height: usize,
    channels: usize,
    window: usize,
    c1: f64,
    c2: f64,
) -> Result<f64> {
    same_len(a.len(), b.len())?;
    if a.len() != width * height * channels {
        return Err(Error::invalid("buffer does not match the stated shape"));
    }
    if window == 0 || window > width || window > height {
        return Err(Error::InvalidArgument(format!("window {window} does not fit a {width}×{height} image")));
    }
    let n = (window * window) as f64;
    let mut total = 0.0;
    let mut count = 0usize;
    for ch in 0..channels {
        for r0 in 0..=height - window {
            for c0 in 0..=width - window {
                let (mut sa, mut sb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0);
                for r in r0..r0 + window {
                    for c in c0..c0 + window {
                        let i = (r * width + c) * channels + ch;
                        let (x, y) = (a[i], b[i]);
                        sa += x;
                        sb += y;
                        saa += x * x;
                        sbb += y * y;
                        sab += x * y;
                    }
                }
                let (ma, mb) = (sa / n, sb / n);
                let va = (saa / n - ma * ma).max(0.0);
                let vb = (sbb / n - mb * mb).max(0.0);
                let cov = sab / n - ma * mb;
                total += (2.0 * ma * mb + c1) * (2.0 * cov + c2) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
                count += 1;
            }
        }
    }
    Ok(total / count as f64)
}

/// SSIM of two RGB images in `[0, 1]` with 8×8 windows.
pub fn ssim_images<T: Scalar>(a: &Image<T>, b: &Image<T>) -> Result<f64> {
    if !a.same_size(b) {
        return Err(Error::invalid("image sizes differ"));
    }
    let (c1, c2) = ssim_constants(1.0);
    let w = 8.min(a.width).min(a.height);
    ssim(&to_f64(&a.data), &to_f64(&b.data), a.width, a.height, 3, w, c1, c2)
}

/// `10·log10(mean|H − Ĥ|² / Var(H))`.
pub fn nmse_db(h: &[C64], h_hat: &[C64]) -> Result<f64> {
    same_len(h.len(), h_hat.len())?;
    let n = h.len() as f64;
    let mean: C64 = h.iter().sum::<C64>() / n;
    let var = h.iter().map(|v| (v - mean).norm_sqr()).sum::<f64>() / n;
    if var <= 0.0 {
        return Err(Error::invalid("reference channel has zero variance"));
    }
    let err = h.iter().zip(h_hat).map(|(a, b)| (a - b).norm_sqr()).sum::<f64>() / n;
    if err == 0.0 {
        return Ok(f64::NEG_INFINITY);
    }
    Ok(10.0 * (err / var).log10())
}

fn ngram_counts<'a, 'b>(tokens: &'b [&'a str], n: usize) -> HashMap<&'b [&'a str], usize> {
    let mut m = HashMap::new();
    if tokens.len() >= n {
        for g in tokens.windows(n) {
            *m.entry(g).or_insert(0) += 1;
        }
    }
    m
}

/// Sentence BLEU with uniform weights and brevity penalty.
///
/// With `smoothing`, an order with no matches contributes `1 / (total + 1)`.
/// An empty hypothesis scores 0.
pub fn bleu(reference: &[&str], hypothesis: &[&str], max_n: usize, smoothing: bool) -> Result<f64> {
    if max_n == 0 {
        return Err(Error::invalid("max_n must be at least 1"));
    }
    if hypothesis.is_empty() || reference.is_empty() {
        return Ok(0.0);
    }
    let mut log_sum = 0.0;
    for n in 1..=max_n {
        let hyp = ngram_counts(hypothesis, n);
        let refc = ngram_counts(reference, n);
        let total: usize = hyp.values().sum();
        let matched: usize = hyp.iter().map(|(g, &c)| c.min(refc.get(g).copied().unwrap_or(0))).sum();
        let p = if matched == 0 {
            if !smoothing {
                return Ok(0.0);
            }
            1.0 / (total as f64 + 1.0)
        } else {
            matched as f64 / total as f64
        };
        log_sum += p.ln();
    }
    let (c, r) = (hypothesis.len() as f64, reference.len() as f64);
    let bp = if c >= r { 1.0 } else { (1.0 - r / c).exp() };
    Ok((bp * (log_sum / max_n as f64).exp()).clamp(0.0, 1.0))
}

pub fn cosine_sim(u: &[f64], v: &[f64]) -> Result<f64> {
    same_len(u.len(), v.len())?;
    let nu = u.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nv = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if nu == 0.0 || nv == 0.0 {
        return Err(Error::invalid("cosine similarity of a zero vector"));
    }
    let dot: f64 = u.iter().zip(v).map(|(a, b)| a * b).sum();
    Ok((dot / (nu * nv)).clamp(-1.0, 1.0))
}

/// Template caption naming the scene objects visible in `image`, most
/// prominent first. Pixels are attributed to the object with the nearest
/// colour; objects covering under 1% of the frame are left out.
pub fn caption_stub<T: Scalar>(image: &Image<T>, scene: &SceneSpec) -> String {
    let mut counts = vec![0usize; scene.primitives.len()];
    for px in image.data.chunks(3) {
        let rgb = [px[0].f64(), px[1].f64(), px[2].f64()];
        let dist = |c: [f64; 3]| (0..3).map(|k| (c[k] - rgb[k]).powi(2)).sum::<f64>();
        let best = scene
            .primitives
            .iter()
            .enumerate()
            .map(|(i, p)| (i, dist(p.color)))
            .min_by(|a, b| a.1.total_cmp(&b.1));
        if let Some((i, d)) = best {
            if d < 0.04 {
                counts[i] += 1;
            }
        }
    }
    let min_px = (image.width * image.height).div_ceil(100);
    let mut seen: Vec<(usize, usize)> = counts.into_iter().enumerate().filter(|&(_, c)| c >= min_px).collect();
    seen.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
    if seen.is_empty() {
        return "an empty scene".to_string();
    }
    let parts: Vec<String> = seen.iter().map(|&(i, _)| format!("a {}", scene.primitives[i].label())).collect();
    parts.join(" and ")
}

pub const EMBED_DIM: usize = 256;

fn token_bucket(token: &str) -> usize {
    let digest = Sha256::digest(token.as_bytes());
    u64::from_le_bytes(digest[..8].try_into().expect("8 bytes")) as usize % EMBED_DIM
}

/// Hashed bag-of-words embedding, unit-normalized. Empty text embeds to zeros.
pub fn embed_stub(text: &str) -> Vec<f64> {
    let mut v = vec![0.0; EMBED_DIM];
    for tok in text.split_whitespace() {
        v[token_bucket(&tok.to_lowercase())] += 1.0;
    }
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    }
    v
}

pub fn tokens(text: &str) -> Vec<&str> {
    text.split_whitespace().collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricReport {
    pub psnr_db: f64,
    pub ssim: f64,
    /// Absent when no channel estimate was involved.
    pub nmse_db: Option<f64>,
    pub bleu: f64,
    pub cosine: f64,
    pub snr_db: f64,
    pub seed: u64,
    pub views: usize,
}

/// Formats a float for CSV output; infinities become `inf` / `-inf`.
pub fn csv_float(v: f64) -> String {
    if v == f64::INFINITY {
        "inf".into()
    } else if v == f64::NEG_INFINITY {
        "-inf".into()
    } else {
        format!("{v:.6}")
    }
}

impl MetricReport {
    pub const CSV_HEADER: &'static str = "snr_db,seed,views,psnr_db,ssim,nmse_db,bleu,cosine";

    pub fn to_csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{}",
            csv_float(self.snr_db),
            self.seed,
            self.views,
            csv_float(self.psnr_db),
            csv_float(self.ssim),
            self.nmse_db.map(csv_float).unwrap_or_default(),
            csv_float(self.bleu),
            csv_float(self.cosine)
        )
    }
}
