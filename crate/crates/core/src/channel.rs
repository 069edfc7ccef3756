//! Block-fading channel simulation, SNR calibration and equalization.
//!
//! Real-valued streams are carried as complex symbols, two consecutive reals
//! per symbol. Transmit power is referenced to unit average symbol energy
//! (`E|x|² = 1`), so the noise variance depends only on the configured SNR.

use nalgebra::DMatrix;
use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type C64 = Complex64;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "model", rename_all = "lowercase")]
pub enum ChannelModel {
    Awgn,
    Rayleigh,
    /// Rician fading with linear K-factor (LOS to scattered power ratio).
    Rician { k: f64 },
}

impl ChannelModel {
    pub fn parse(name: &str, k: f64) -> Result<Self> {
        match name {
            "awgn" => Ok(Self::Awgn),
            "rayleigh" => Ok(Self::Rayleigh),
            "rician" => Ok(Self::Rician { k }),
            other => Err(Error::InvalidArgument(format!("unknown channel model {other:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Layout {
    /// One gain per grid position; symbol `k` sees gain `k mod (rows·cols)`.
    Elementwise,
    /// Square mixing matrix applied to consecutive blocks of `rows` symbols.
    Matrix,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ChannelRealization {
    pub model: ChannelModel,
    pub layout: Layout,
    pub rows: usize,
    pub cols: usize,
    /// Row-major gains.
    pub gains: Vec<C64>,
    pub seed: u64,
}

impl ChannelRealization {
    pub fn from_gains(rows: usize, cols: usize, gains: Vec<C64>) -> Result<Self> {
        if gains.len() != rows * cols || gains.is_empty() {
            return Err(Error::invalid("gain count does not match grid shape"));
        }
        Ok(Self { model: ChannelModel::Awgn, layout: Layout::Elementwise, rows, cols, gains, seed: 0 })
    }

    pub fn len(&self) -> usize {
        self.gains.len()
    }

    pub fn is_empty(&self) -> bool {
        self.gains.is_empty()
    }

    pub fn matrix(&self) -> DMatrix<C64> {
        DMatrix::from_row_slice(self.rows, self.cols, &self.gains)
    }
}

fn complex_normal(rng: &mut ChaCha8Rng) -> C64 {
    let re: f64 = rng.sample(StandardNormal);
    let im: f64 = rng.sample(StandardNormal);
    C64::new(re, im) * std::f64::consts::FRAC_1_SQRT_2
}

// Separable binomial kernel scaled to unit energy, so filtering i.i.d.
// CN(0,1) samples keeps unit variance while correlating neighbours.
const SMOOTH: [f64; 3] = [0.408_248_290_463_863, 0.816_496_580_927_726, 0.408_248_290_463_863];

fn smooth_wrapped(rows: usize, cols: usize, x: &[C64]) -> Vec<C64> {
    let mut out = vec![C64::new(0.0, 0.0); x.len()];
    for r in 0..rows {
        for c in 0..cols {
            let mut acc = C64::new(0.0, 0.0);
            for (dr, wr) in SMOOTH.iter().enumerate() {
                for (dc, wc) in SMOOTH.iter().enumerate() {
                    let rr = (r + rows + dr - 1) % rows;
                    let cc = (c + cols + dc - 1) % cols;
                    acc += x[rr * cols + cc] * (wr * wc);
                }
            }
            out[r * cols + c] = acc;
        }
    }
    out
}

fn check_model(model: ChannelModel) -> Result<f64> {
    match model {
        ChannelModel::Awgn => Ok(f64::INFINITY),
        ChannelModel::Rayleigh => Ok(0.0),
        ChannelModel::Rician { k } if k >= 0.0 && !k.is_nan() => Ok(k),
        ChannelModel::Rician { k } => Err(Error::InvalidArgument(format!("K-factor must be nonnegative, got {k}"))),
    }
}

/// Spatially correlated fading grid of `rows × cols` gains.
///
/// The scattered component is smoothed with a wrapped 3×3 kernel of unit
/// energy, so `E|h|² = 1` holds at every position.
pub fn draw_channel(model: ChannelModel, rows: usize, cols: usize, seed: u64) -> Result<ChannelRealization> {
    let k = check_model(model)?;
    if rows == 0 || cols == 0 {
        return Err(Error::invalid("channel grid must be nonempty"));
    }
    let n = rows * cols;
    let gains = if k.is_infinite() {
        vec![C64::new(1.0, 0.0); n]
    } else {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let phase: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
        let los = C64::from_polar((k / (k + 1.0)).sqrt(), phase);
        let nlos_amp = (1.0 / (k + 1.0)).sqrt();
        let raw: Vec<C64> = (0..n).map(|_| complex_normal(&mut rng)).collect();
        smooth_wrapped(rows, cols, &raw).into_iter().map(|s| los + s * nlos_amp).collect()
    };
    Ok(ChannelRealization { model, layout: Layout::Elementwise, rows, cols, gains, seed })
}

/// Unsmoothed `n × n` mixing matrix with i.i.d. entries of unit mean power.
pub fn draw_matrix_channel(model: ChannelModel, n: usize, seed: u64) -> Result<ChannelRealization> {
    let k = check_model(model)?;
    if n == 0 {
        return Err(Error::invalid("channel matrix must be nonempty"));
    }
    let gains = if k.is_infinite() {
        (0..n * n).map(|i| if i / n == i % n { C64::new(1.0, 0.0) } else { C64::new(0.0, 0.0) }).collect()
    } else {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let phase: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
        let los = C64::from_polar((k / (k + 1.0)).sqrt(), phase);
        let nlos_amp = (1.0 / (k + 1.0)).sqrt();
        (0..n * n).map(|_| los + complex_normal(&mut rng) * nlos_amp).collect()
    };
    Ok(ChannelRealization { model, layout: Layout::Matrix, rows: n, cols: n, gains, seed })
}

/// Noise variance giving `snr_db` for signal power `p`.
pub fn noise_power_for_snr(p: f64, snr_db: f64) -> f64 {
    p / 10f64.powf(snr_db / 10.0)
}

/// Packs reals pairwise into complex symbols, zero-padding an odd tail.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct FrameMapping {
    pub len: usize,
    pub padded: bool,
}

impl FrameMapping {
    pub fn new(len: usize) -> Self {
        Self { len, padded: len % 2 == 1 }
    }

    pub fn symbols(&self) -> usize {
        self.len.div_ceil(2)
    }

    pub fn to_symbols(&self, x: &[f64]) -> Vec<C64> {
        debug_assert_eq!(x.len(), self.len);
        x.chunks(2).map(|p| C64::new(p[0], p.get(1).copied().unwrap_or(0.0))).collect()
    }

    pub fn from_symbols(&self, s: &[C64]) -> Vec<f64> {
        let mut out: Vec<f64> = s.iter().flat_map(|z| [z.re, z.im]).collect();
        out.truncate(self.len);
        out
    }
}

fn padded_symbols(chan: &ChannelRealization, x: &[C64]) -> Vec<C64> {
    let mut s = x.to_vec();
    if chan.layout == Layout::Matrix {
        let n = chan.cols;
        s.resize(x.len().div_ceil(n) * n, C64::new(0.0, 0.0));
    }
    s
}

/// `y = Hx + n` on complex symbols. `snr_db = ∞` disables the noise.
///
/// Under the matrix layout the input is zero-padded to whole blocks, so the
/// output may be longer than the input.
pub fn transmit_symbols(x: &[C64], chan: &ChannelRealization, snr_db: f64, seed: u64) -> Result<Vec<C64>> {
    if x.iter().any(|z| !z.re.is_finite() || !z.im.is_finite()) {
        return Err(Error::invalid("transmit input must be finite"));
    }
    if snr_db.is_nan() || snr_db == f64::NEG_INFINITY {
        return Err(Error::InvalidArgument(format!("unusable SNR {snr_db}")));
    }
    let s = padded_symbols(chan, x);
    let mut y = match chan.layout {
        Layout::Elementwise => s.iter().enumerate().map(|(i, &v)| chan.gains[i % chan.len()] * v).collect(),
        Layout::Matrix => {
            let n = chan.cols;
            let mut y = vec![C64::new(0.0, 0.0); s.len()];
            for (blk_in, blk_out) in s.chunks(n).zip(y.chunks_mut(n)) {
                for (r, out) in blk_out.iter_mut().enumerate() {
                    *out = (0..n).map(|c| chan.gains[r * n + c] * blk_in[c]).sum();
                }
            }
            y
        }
    };
    if snr_db.is_finite() {
        let sigma = noise_power_for_snr(1.0, snr_db).sqrt();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for v in &mut y {
            *v += complex_normal(&mut rng) * sigma;
        }
    }
    Ok(y)
}

/// Real-vector wrapper around [`transmit_symbols`].
pub fn transmit(x: &[f64], chan: &ChannelRealization, snr_db: f64, seed: u64) -> Result<Vec<f64>> {
    let map = FrameMapping::new(x.len());
    let y = transmit_symbols(&map.to_symbols(x), chan, snr_db, seed)?;
    Ok(y.iter().flat_map(|z| [z.re, z.im]).collect())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EqualizeMode {
    Elementwise,
    PseudoInverse,
}

const SINGULAR_EPS: f64 = 1e-12;

/// Undoes the channel on received symbols using the estimate `h`.
pub fn equalize_symbols(y: &[C64], h: &ChannelRealization, mode: EqualizeMode) -> Result<Vec<C64>> {
    match (h.layout, mode) {
        (Layout::Elementwise, _) => {
            // On a diagonal channel the pseudo-inverse reduces to per-symbol division.
            y.iter()
                .enumerate()
                .map(|(i, &v)| {
                    let g = h.gains[i % h.len()];
                    if g.norm() < SINGULAR_EPS {
                        Err(Error::SingularChannel(format!("gain at symbol {i} is {g}")))
                    } else {
                        Ok(v / g)
                    }
                })
                .collect()
        }
        (Layout::Matrix, EqualizeMode::Elementwise) => {
            let n = h.cols;
            if y.len() % n != 0 {
                return Err(Error::invalid("received length is not a whole number of blocks"));
            }
            let mut out = Vec::with_capacity(y.len());
            for blk in y.chunks(n) {
                for (r, &v) in blk.iter().enumerate() {
                    let g = h.gains[r * n + r];
                    if g.norm() < SINGULAR_EPS {
                        return Err(Error::SingularChannel(format!("diagonal gain at symbol {r} is {g}")));
                    }
                    out.push(v / g);
                }
            }
            Ok(out)
        }
        (Layout::Matrix, EqualizeMode::PseudoInverse) => {
            let n = h.cols;
            if y.len() % h.rows != 0 {
                return Err(Error::invalid("received length is not a whole number of blocks"));
            }
            let hm = h.matrix();
            let pinv = pseudo_inverse(&hm)?;
            let blocks = y.len() / h.rows;
            let ym = DMatrix::from_column_slice(h.rows, blocks, y);
            let x = pinv * ym;
            debug_assert_eq!(x.nrows(), n);
            Ok(x.as_slice().to_vec())
        }
    }
}

/// `(HᴴH)⁻¹Hᴴ`, rejecting rank-deficient `H`.
pub fn pseudo_inverse(h: &DMatrix<C64>) -> Result<DMatrix<C64>> {
    let svd = h.clone().svd(false, false);
    let smax = svd.singular_values.max();
    let smin = svd.singular_values.min();
    if h.nrows() < h.ncols() || smin <= SINGULAR_EPS * smax.max(1.0) {
        return Err(Error::SingularChannel(format!(
            "{}×{} matrix is rank deficient (σ_min = {smin:e})",
            h.nrows(),
            h.ncols()
        )));
    }
    let hh = h.adjoint();
    let gram = &hh * h;
    let inv = gram
        .try_inverse()
        .ok_or_else(|| Error::SingularChannel("Gram matrix is not invertible".into()))?;
    Ok(inv * hh)
}

/// Real-vector wrapper around [`equalize_symbols`].
pub fn equalize(y: &[f64], h: &ChannelRealization, mode: EqualizeMode) -> Result<Vec<f64>> {
    let map = FrameMapping::new(y.len());
    let x = equalize_symbols(&map.to_symbols(y), h, mode)?;
    Ok(x.iter().flat_map(|z| [z.re, z.im]).take(y.len()).collect())
}
