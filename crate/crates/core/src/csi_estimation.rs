//! Pilot-based channel estimation: classical baselines (LS, LMMSE, OMP,
//! AMP), a conditional least-squares GAN and a diffusion refiner.
//!
//! Channels live on a `rows × cols` grid of complex gains. Learned models
//! see them as two-plane real images (real part, imaginary part).

use std::path::Path;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::channel::{draw_channel, ChannelModel, C64};
use crate::checkpoint;
use crate::error::{Error, Result};
use crate::metrics::nmse_db;
use crate::nn::{Adam, Conv2d, Gradients, Linear, ParamSet, Tape, Tensor, Var};
use crate::scalar::Scalar;

#[derive(Clone, Debug, PartialEq)]
pub struct CsiImage {
    pub rows: usize,
    pub cols: usize,
    pub re: Vec<f64>,
    pub im: Vec<f64>,
}

impl CsiImage {
    pub fn from_complex(rows: usize, cols: usize, h: &[C64]) -> Result<Self> {
        if h.len() != rows * cols {
            return Err(Error::invalid(format!("{} gains for a {rows}x{cols} grid", h.len())));
        }
        if h.iter().any(|v| !v.re.is_finite() || !v.im.is_finite()) {
            return Err(Error::Numeric("non-finite channel gain".into()));
        }
        Ok(Self { rows, cols, re: h.iter().map(|v| v.re).collect(), im: h.iter().map(|v| v.im).collect() })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, re: vec![0.0; rows * cols], im: vec![0.0; rows * cols] }
    }

    pub fn to_complex(&self) -> Vec<C64> {
        self.re.iter().zip(&self.im).map(|(&r, &i)| C64::new(r, i)).collect()
    }

    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Real plane followed by imaginary plane, as one CHW sample.
    pub fn planes<T: Scalar>(&self) -> Vec<T> {
        self.re.iter().chain(&self.im).map(|&v| T::of(v)).collect()
    }

    pub fn from_planes<T: Scalar>(rows: usize, cols: usize, planes: &[T]) -> Result<Self> {
        let n = rows * cols;
        if planes.len() != 2 * n {
            return Err(Error::invalid(format!("{} plane values for a {rows}x{cols} grid", planes.len())));
        }
        let re: Vec<f64> = planes[..n].iter().map(|v| v.f64()).collect();
        let im: Vec<f64> = planes[n..].iter().map(|v| v.f64()).collect();
        if re.iter().chain(&im).any(|v| !v.is_finite()) {
            return Err(Error::Numeric("non-finite CSI estimate".into()));
        }
        Ok(Self { rows, cols, re, im })
    }

    pub fn nmse_db(&self, truth: &CsiImage) -> Result<f64> {
        nmse_db(&truth.to_complex(), &self.to_complex())
    }
}

/// Known unit-modulus symbols on a rectangular lattice of grid positions.
#[derive(Clone, Debug, PartialEq)]
pub struct PilotBlock {
    pub rows: usize,
    pub cols: usize,
    pub pilot_rows: Vec<usize>,
    pub pilot_cols: Vec<usize>,
    /// Row-major over the pilot lattice.
    pub symbols: Vec<C64>,
}

impl PilotBlock {
    /// Every `stride`-th row and column, starting at `stride / 2`, with
    /// random QPSK symbols.
    pub fn regular(rows: usize, cols: usize, stride: usize, seed: u64) -> Result<Self> {
        if stride == 0 {
            return Err(Error::invalid("pilot stride must be positive"));
        }
        let off = (stride / 2).min(rows.min(cols).saturating_sub(1));
        let pilot_rows: Vec<usize> = (off..rows).step_by(stride).collect();
        let pilot_cols: Vec<usize> = (off..cols).step_by(stride).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let s = std::f64::consts::FRAC_1_SQRT_2;
        let symbols = (0..pilot_rows.len() * pilot_cols.len())
            .map(|_| C64::new(if rng.gen() { s } else { -s }, if rng.gen() { s } else { -s }))
            .collect();
        let b = Self { rows, cols, pilot_rows, pilot_cols, symbols };
        b.validate()?;
        Ok(b)
    }

    pub fn full(rows: usize, cols: usize, seed: u64) -> Result<Self> {
        let mut b = Self::regular(rows, cols, 1, seed)?;
        b.pilot_rows = (0..rows).collect();
        b.pilot_cols = (0..cols).collect();
        Ok(b)
    }

    pub fn validate(&self) -> Result<()> {
        let sorted = |v: &[usize], n: usize| v.windows(2).all(|w| w[0] < w[1]) && v.iter().all(|&i| i < n);
        if !sorted(&self.pilot_rows, self.rows) || !sorted(&self.pilot_cols, self.cols) {
            return Err(Error::invalid("pilot positions must be increasing and inside the grid"));
        }
        if self.symbols.len() != self.len() {
            return Err(Error::invalid(format!("{} pilot symbols for {} positions", self.symbols.len(), self.len())));
        }
        if let Some(i) = self.symbols.iter().position(|s| s.norm() < 1e-12) {
            return Err(Error::invalid(format!("pilot symbol {i} is zero")));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.pilot_rows.len() * self.pilot_cols.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Flat grid indices of the pilots, in symbol order.
    pub fn positions(&self) -> Vec<usize> {
        let mut out = Vec::with_capacity(self.len());
        for &r in &self.pilot_rows {
            for &c in &self.pilot_cols {
                out.push(r * self.cols + c);
            }
        }
        out
    }

    /// Pilot symbols scattered on the grid, zero elsewhere.
    pub fn symbol_grid(&self) -> Vec<C64> {
        let mut g = vec![C64::new(0.0, 0.0); self.rows * self.cols];
        for (p, &s) in self.positions().into_iter().zip(&self.symbols) {
            g[p] = s;
        }
        g
    }
}

/// Received pilots `y = h θ + n` with `n ~ CN(0, 10^(−snr/10))`.
pub fn observe_pilots(h: &[C64], block: &PilotBlock, snr_db: f64, seed: u64) -> Result<Vec<C64>> {
    block.validate()?;
    if h.len() != block.rows * block.cols {
        return Err(Error::invalid("channel grid does not match the pilot block"));
    }
    if snr_db.is_nan() || snr_db == f64::NEG_INFINITY {
        return Err(Error::invalid(format!("SNR {snr_db} dB is not usable")));
    }
    let sigma = (10f64.powf(-snr_db / 10.0) / 2.0).sqrt();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(block
        .positions()
        .into_iter()
        .zip(&block.symbols)
        .map(|(p, &s)| {
            let n = C64::new(rng.sample::<f64, _>(StandardNormal), rng.sample::<f64, _>(StandardNormal)) * sigma;
            h[p] * s + n
        })
        .collect())
}

fn check_obs(y: &[C64], block: &PilotBlock) -> Result<()> {
    block.validate()?;
    if y.len() != block.len() {
        return Err(Error::invalid(format!("{} observations for {} pilots", y.len(), block.len())));
    }
    Ok(())
}

fn pilot_ls(y: &[C64], block: &PilotBlock) -> Vec<C64> {
    y.iter().zip(&block.symbols).map(|(&y, &s)| y / s).collect()
}

/// Piecewise-linear weights from lattice positions onto `0..n`, constant
/// beyond the outermost pilots.
fn axis_weights(pos: &[usize], n: usize) -> Vec<(usize, usize, f64)> {
    (0..n)
        .map(|i| {
            if i <= pos[0] {
                (0, 0, 0.0)
            } else if i >= pos[pos.len() - 1] {
                (pos.len() - 1, pos.len() - 1, 0.0)
            } else {
                let k = pos.partition_point(|&p| p <= i) - 1;
                let t = (i - pos[k]) as f64 / (pos[k + 1] - pos[k]) as f64;
                (k, k + 1, t)
            }
        })
        .collect()
}

/// Bilinear interpolation of lattice values onto the full grid.
pub fn interpolate_pilots(values: &[C64], block: &PilotBlock) -> Result<Vec<C64>> {
    if block.is_empty() {
        return Err(Error::invalid("interpolation needs at least one pilot"));
    }
    let nc = block.pilot_cols.len();
    let rw = axis_weights(&block.pilot_rows, block.rows);
    let cw = axis_weights(&block.pilot_cols, block.cols);
    let at = |r: usize, c: usize| values[r * nc + c];
    let mut out = Vec::with_capacity(block.rows * block.cols);
    for &(r0, r1, tr) in &rw {
        for &(c0, c1, tc) in &cw {
            let top = at(r0, c0) * (1.0 - tc) + at(r0, c1) * tc;
            let bot = at(r1, c0) * (1.0 - tc) + at(r1, c1) * tc;
            out.push(top * (1.0 - tr) + bot * tr);
        }
    }
    Ok(out)
}

/// `ĥ = y/θ` at the pilots, bilinear elsewhere.
pub fn ls_estimate(y: &[C64], block: &PilotBlock) -> Result<CsiImage> {
    check_obs(y, block)?;
    let h = interpolate_pilots(&pilot_ls(y, block), block)?;
    CsiImage::from_complex(block.rows, block.cols, &h)
}

/// Second-order channel statistics over the full grid.
#[derive(Clone, Debug)]
pub struct ChannelPrior {
    pub mean: Vec<C64>,
    pub cov: DMatrix<C64>,
}

impl ChannelPrior {
    pub fn new(mean: Vec<C64>, cov: DMatrix<C64>) -> Result<Self> {
        let n = mean.len();
        if cov.nrows() != n || cov.ncols() != n {
            return Err(Error::invalid("covariance shape does not match the mean"));
        }
        let scale = cov.iter().map(|v| v.norm()).fold(0.0, f64::max).max(1e-300);
        let herm = (&cov - cov.adjoint()).iter().map(|v| v.norm()).fold(0.0, f64::max);
        if herm > 1e-9 * scale {
            return Err(Error::invalid("covariance is not Hermitian"));
        }
        let eig = SymmetricEigen::new(cov.clone());
        let min = eig.eigenvalues.iter().cloned().fold(f64::INFINITY, f64::min);
        if min < -1e-9 * scale {
            return Err(Error::invalid(format!("covariance is not positive semidefinite (eigenvalue {min:.3e})")));
        }
        Ok(Self { mean, cov })
    }

    /// Sample mean and covariance of channel draws.
    pub fn from_draws(draws: &[Vec<C64>]) -> Result<Self> {
        let Some(first) = draws.first() else {
            return Err(Error::invalid("empirical prior needs at least one draw"));
        };
        let n = first.len();
        let k = draws.len() as f64;
        let mut mean = vec![C64::new(0.0, 0.0); n];
        for d in draws {
            if d.len() != n {
                return Err(Error::invalid("channel draws differ in size"));
            }
            mean.iter_mut().zip(d).for_each(|(m, &v)| *m += v / k);
        }
        let mut centred = DMatrix::<C64>::zeros(n, draws.len());
        for (j, d) in draws.iter().enumerate() {
            for i in 0..n {
                centred[(i, j)] = d[i] - mean[i];
            }
        }
        let mut cov = &centred * centred.adjoint() / C64::new(k, 0.0);
        cov = (&cov + cov.adjoint()) * C64::new(0.5, 0.0);
        Self::new(mean, cov)
    }

    /// Draws `count` channels and estimates their statistics.
    pub fn empirical(model: ChannelModel, rows: usize, cols: usize, count: usize, seed: u64) -> Result<Self> {
        let draws: Vec<Vec<C64>> = (0..count)
            .map(|i| draw_channel(model, rows, cols, seed.wrapping_add(i as u64)).map(|c| c.gains))
            .collect::<Result<_>>()?;
        Self::from_draws(&draws)
    }
}

/// Linear MMSE interpolation `μ + R_hp (R_pp + σ²I)⁻¹ (ĥ_LS,p − μ_p)`.
pub fn mmse_estimate(y: &[C64], block: &PilotBlock, prior: &ChannelPrior, sigma2: f64) -> Result<CsiImage> {
    check_obs(y, block)?;
    let n = block.rows * block.cols;
    if prior.mean.len() != n {
        return Err(Error::invalid("prior does not match the grid"));
    }
    if !(sigma2 >= 0.0) {
        return Err(Error::invalid(format!("noise variance {sigma2} must be nonnegative")));
    }
    let pos = block.positions();
    let p = pos.len();
    let ls = pilot_ls(y, block);
    if sigma2.is_infinite() {
        return CsiImage::from_complex(block.rows, block.cols, &prior.mean);
    }
    let r_pp = DMatrix::from_fn(p, p, |i, j| prior.cov[(pos[i], pos[j])]);
    let r_hp = DMatrix::from_fn(n, p, |i, j| prior.cov[(i, pos[j])]);
    let resid = DVector::from_fn(p, |i, _| ls[i] - prior.mean[pos[i]]);
    let eig = SymmetricEigen::new(r_pp);
    let lmax = eig.eigenvalues.iter().cloned().fold(0.0, f64::max);
    let coeff = eig.eigenvectors.adjoint() * resid;
    let scaled = DVector::from_fn(p, |i, _| {
        let d = eig.eigenvalues[i].max(0.0) + sigma2;
        if d > 1e-13 * lmax.max(1e-300) {
            coeff[i] / d
        } else {
            C64::new(0.0, 0.0)
        }
    });
    let w = &eig.eigenvectors * scaled;
    let est = r_hp * w;
    let h: Vec<C64> = (0..n).map(|i| prior.mean[i] + est[i]).collect();
    CsiImage::from_complex(block.rows, block.cols, &h)
}

/// Unit-norm atoms spanning the grid, one per column.
#[derive(Clone, Debug)]
pub struct Dictionary {
    pub rows: usize,
    pub cols: usize,
    pub atoms: DMatrix<C64>,
}

impl Dictionary {
    pub fn new(rows: usize, cols: usize, atoms: DMatrix<C64>) -> Result<Self> {
        if atoms.nrows() != rows * cols {
            return Err(Error::invalid("atom length does not match the grid"));
        }
        for (j, c) in atoms.column_iter().enumerate() {
            if (c.norm() - 1.0).abs() > 1e-9 {
                return Err(Error::invalid(format!("atom {j} does not have unit norm")));
            }
        }
        Ok(Self { rows, cols, atoms })
    }

    /// Orthonormal 2-D DFT basis, atoms ordered by centred frequency
    /// magnitude so ties in greedy selection favour smooth atoms.
    pub fn dft2(rows: usize, cols: usize) -> Self {
        Self::dft2_band(rows, cols, usize::MAX)
    }

    /// DFT atoms with centred frequency at most `max_freq` on both axes.
    pub fn dft2_band(rows: usize, cols: usize, max_freq: usize) -> Self {
        let centred = |k: usize, n: usize| -> i64 {
            let k = k as i64;
            let n = n as i64;
            if 2 * k > n {
                k - n
            } else {
                k
            }
        };
        let mut freqs: Vec<(i64, i64)> = Vec::new();
        for u in 0..rows {
            for v in 0..cols {
                let (fu, fv) = (centred(u, rows), centred(v, cols));
                if fu.unsigned_abs() as usize <= max_freq && fv.unsigned_abs() as usize <= max_freq {
                    freqs.push((fu, fv));
                }
            }
        }
        freqs.sort_by_key(|&(a, b)| (a * a + b * b, a.abs().max(b.abs()), -a, -b));
        let n = rows * cols;
        let s = 1.0 / (n as f64).sqrt();
        let atoms = DMatrix::from_fn(n, freqs.len(), |i, j| {
            let (r, c) = (i / cols, i % cols);
            let (fu, fv) = freqs[j];
            let ph = std::f64::consts::TAU * ((fu * r as i64) as f64 / rows as f64 + (fv * c as i64) as f64 / cols as f64);
            C64::from_polar(s, ph)
        });
        Self { rows, cols, atoms }
    }

    fn at_pilots(&self, pos: &[usize]) -> DMatrix<C64> {
        DMatrix::from_fn(pos.len(), self.atoms.ncols(), |i, j| self.atoms[(pos[i], j)])
    }
}

fn check_dict(block: &PilotBlock, dict: &Dictionary) -> Result<()> {
    if dict.rows != block.rows || dict.cols != block.cols {
        return Err(Error::invalid("dictionary grid does not match the pilot block"));
    }
    Ok(())
}

/// Greedy pursuit over pilot-restricted atoms with a least-squares refit
/// after each selection.
pub fn omp_estimate(y: &[C64], block: &PilotBlock, dict: &Dictionary, k: usize) -> Result<CsiImage> {
    check_obs(y, block)?;
    check_dict(block, dict)?;
    if k > block.len() {
        return Err(Error::invalid(format!("sparsity {k} exceeds the {} pilots", block.len())));
    }
    let a = dict.at_pilots(&block.positions());
    let b = DVector::from_vec(pilot_ls(y, block));
    let norms: Vec<f64> = a.column_iter().map(|c| c.norm()).collect();
    let mut support: Vec<usize> = Vec::with_capacity(k);
    let mut coef = DVector::<C64>::zeros(0);
    let mut resid = b.clone();
    for _ in 0..k {
        if resid.norm() < 1e-14 * b.norm().max(1.0) {
            break;
        }
        let corr = a.adjoint() * &resid;
        // First index wins ties, up to rounding.
        let mut best: Option<(usize, f64)> = None;
        for j in (0..a.ncols()).filter(|j| !support.contains(j) && norms[*j] > 1e-12) {
            let score = corr[j].norm() / norms[j];
            if best.map_or(true, |(_, b)| score > b * (1.0 + 1e-9) + 1e-15) {
                best = Some((j, score));
            }
        }
        let Some((j, _)) = best else { break };
        support.push(j);
        let sub = a.select_columns(&support);
        coef = sub.clone().svd(true, true).solve(&b, 1e-12).map_err(|e| Error::Numeric(e.to_string()))?;
        resid = &b - sub * &coef;
    }
    let mut h = DVector::<C64>::zeros(block.rows * block.cols);
    for (i, &j) in support.iter().enumerate() {
        h += dict.atoms.column(j) * coef[i];
    }
    CsiImage::from_complex(block.rows, block.cols, h.as_slice())
}

fn soft_threshold(u: C64, tau: f64) -> C64 {
    let m = u.norm();
    if m > tau {
        u * ((m - tau) / m)
    } else {
        C64::new(0.0, 0.0)
    }
}

/// Approximate message passing with a complex soft-threshold denoiser.
/// `threshold` scales the residual RMS to give the per-iteration threshold.
pub fn amp_estimate(y: &[C64], block: &PilotBlock, dict: &Dictionary, iters: usize, threshold: f64) -> Result<CsiImage> {
    check_obs(y, block)?;
    check_dict(block, dict)?;
    if !(threshold >= 0.0) {
        return Err(Error::invalid("AMP threshold must be nonnegative"));
    }
    let n_grid = block.rows * block.cols;
    if block.is_empty() {
        return Ok(CsiImage::zeros(block.rows, block.cols));
    }
    let raw = dict.at_pilots(&block.positions());
    let norms: Vec<f64> = raw.column_iter().map(|c| c.norm().max(1e-300)).collect();
    let mut a = raw.clone();
    for (j, mut col) in a.column_iter_mut().enumerate() {
        col /= C64::new(norms[j], 0.0);
    }
    let (m, n) = (a.nrows(), a.ncols());
    let b = DVector::from_vec(pilot_ls(y, block));
    let mut x = DVector::<C64>::zeros(n);
    let mut z = b.clone();
    for _ in 0..iters {
        let tau = threshold * z.norm() / (m as f64).sqrt();
        let u = &x + a.adjoint() * &z;
        let mut div = 0.0;
        for i in 0..n {
            let mag = u[i].norm();
            if mag > tau {
                div += 1.0 - tau / (2.0 * mag);
            }
            x[i] = soft_threshold(u[i], tau);
        }
        let onsager = z.clone() * C64::new(div / m as f64, 0.0);
        z = &b - &a * &x + onsager;
    }
    let mut h = DVector::<C64>::zeros(n_grid);
    for j in 0..n {
        if x[j].norm() > 0.0 {
            h += dict.atoms.column(j) * (x[j] / norms[j]);
        }
    }
    CsiImage::from_complex(block.rows, block.cols, h.as_slice())
}

// ---------------------------------------------------------------------------
// Conditional GAN

/// `(d_real − 1)² + (d_fake + 1)²`.
pub fn cgan_discriminator_loss(d_real: f64, d_fake: f64) -> f64 {
    (d_real - 1.0).powi(2) + (d_fake + 1.0).powi(2)
}

/// `d_fake² + μ · mean|G − H|` over both planes.
pub fn cgan_generator_loss(d_fake: f64, g_out: &CsiImage, h: &CsiImage, mu_l1: f64) -> Result<f64> {
    if !(mu_l1 >= 0.0) {
        return Err(Error::invalid(format!("L1 weight {mu_l1} must be nonnegative")));
    }
    if g_out.rows != h.rows || g_out.cols != h.cols {
        return Err(Error::invalid("generator output and target differ in size"));
    }
    let n = 2 * h.len();
    let l1 = g_out.re.iter().chain(&g_out.im).zip(h.re.iter().chain(&h.im)).map(|(a, b)| (a - b).abs()).sum::<f64>()
        / n.max(1) as f64;
    Ok(d_fake * d_fake + mu_l1 * l1)
}

/// One training or validation example.
#[derive(Clone, Debug)]
pub struct CsiSample {
    pub y: Vec<C64>,
    pub h: CsiImage,
    pub snr_db: f64,
}

/// Pilot observations of fresh channel draws at SNRs uniform in `snr_db`.
pub fn make_csi_samples(
    model: ChannelModel,
    block: &PilotBlock,
    count: usize,
    snr_db: (f64, f64),
    seed: u64,
) -> Result<Vec<CsiSample>> {
    block.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|_| {
            let chan = draw_channel(model, block.rows, block.cols, rng.gen())?;
            let snr = if snr_db.1 > snr_db.0 { rng.gen_range(snr_db.0..=snr_db.1) } else { snr_db.0 };
            let y = observe_pilots(&chan.gains, block, snr, rng.gen())?;
            Ok(CsiSample { y, h: CsiImage::from_complex(block.rows, block.cols, &chan.gains)?, snr_db: snr })
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GanConfig {
    pub width: usize,
    pub mu_l1: f64,
    pub lr_g: f64,
    pub lr_d: f64,
    pub batch: usize,
    pub epochs: usize,
    pub seed: u64,
    /// Redraw a symmetry of each pair (global phase, lattice-preserving
    /// cyclic shift, transpose) every time it is visited.
    pub augment: bool,
}

impl Default for GanConfig {
    fn default() -> Self {
        Self { width: 16, mu_l1: 1000.0, lr_g: 1e-3, lr_d: 1e-3, batch: 16, epochs: 200, seed: 0, augment: true }
    }
}

/// Shifts `s` with `(pos + s) mod n` a permutation of `pos`.
fn lattice_shifts(pos: &[usize], n: usize) -> Vec<usize> {
    (0..n)
        .filter(|&s| {
            let mut moved: Vec<usize> = pos.iter().map(|&p| (p + s) % n).collect();
            moved.sort_unstable();
            moved == pos
        })
        .collect()
}

/// Exact symmetries of the training law: the channel statistics are
/// invariant to global phase and cyclic shifts, and a pilot observation
/// `y = hθ + n` maps to `(y/θ)·θ'` at the image position with noise of
/// unchanged law.
struct Augmenter {
    row_shifts: Vec<usize>,
    col_shifts: Vec<usize>,
    transpose: bool,
}

impl Augmenter {
    fn new(block: &PilotBlock) -> Self {
        Self {
            row_shifts: lattice_shifts(&block.pilot_rows, block.rows),
            col_shifts: lattice_shifts(&block.pilot_cols, block.cols),
            transpose: block.rows == block.cols && block.pilot_rows == block.pilot_cols,
        }
    }

    fn apply(&self, s: &CsiSample, block: &PilotBlock, rng: &mut ChaCha8Rng) -> Result<CsiSample> {
        let (rows, cols) = (block.rows, block.cols);
        let dr = *self.row_shifts.choose(rng).unwrap_or(&0);
        let dc = *self.col_shifts.choose(rng).unwrap_or(&0);
        let tr = self.transpose && rng.gen::<bool>();
        let rot = C64::from_polar(1.0, rng.gen_range(0.0..std::f64::consts::TAU));
        let map = |r: usize, c: usize| {
            let (r, c) = ((r + dr) % rows, (c + dc) % cols);
            if tr {
                (c, r)
            } else {
                (r, c)
            }
        };
        let h = s.h.to_complex();
        let mut h2 = vec![C64::new(0.0, 0.0); h.len()];
        for r in 0..rows {
            for c in 0..cols {
                let (r2, c2) = map(r, c);
                h2[r2 * cols + c2] = h[r * cols + c] * rot;
            }
        }
        let nc = block.pilot_cols.len();
        let mut ls2 = vec![C64::new(0.0, 0.0); block.len()];
        for (i, &r) in block.pilot_rows.iter().enumerate() {
            for (j, &c) in block.pilot_cols.iter().enumerate() {
                let (r2, c2) = map(r, c);
                let i2 = block.pilot_rows.binary_search(&r2).expect("lattice-preserving map");
                let j2 = block.pilot_cols.binary_search(&c2).expect("lattice-preserving map");
                ls2[i2 * nc + j2] = s.y[i * nc + j] / block.symbols[i * nc + j] * rot;
            }
        }
        let y = ls2.iter().zip(&block.symbols).map(|(v, &t)| v * t).collect();
        Ok(CsiSample { y, h: CsiImage::from_complex(rows, cols, &h2)?, snr_db: s.snr_db })
    }
}

const LRELU: f64 = 0.2;

/// Conditioning planes: LS interpolation (2), received pilots (2) and
/// pilot symbols (2), each scattered on the grid.
pub fn condition_planes<T: Scalar>(y: &[C64], block: &PilotBlock) -> Result<Vec<T>> {
    let ls = ls_estimate(y, block)?;
    let mut sparse = vec![C64::new(0.0, 0.0); block.rows * block.cols];
    for (p, &v) in block.positions().into_iter().zip(y) {
        sparse[p] = v;
    }
    let sym = block.symbol_grid();
    let mut out = ls.planes::<T>();
    out.extend(CsiImage::from_complex(block.rows, block.cols, &sparse)?.planes::<T>());
    out.extend(CsiImage::from_complex(block.rows, block.cols, &sym)?.planes::<T>());
    Ok(out)
}

const COND_CH: usize = 6;

#[derive(Clone, Copy, Debug)]
struct Generator {
    c1: Conv2d,
    c2: Conv2d,
    c3: Conv2d,
    c4: Conv2d,
    c5: Conv2d,
}

#[derive(Clone, Copy, Debug)]
struct Critic {
    c1: Conv2d,
    c2: Conv2d,
    fc: Linear,
}

/// Generator and discriminator with their parameters.
pub struct GanPair<T: Scalar> {
    pub cfg: GanConfig,
    pub rows: usize,
    pub cols: usize,
    pub gen_params: ParamSet<T>,
    pub disc_params: ParamSet<T>,
    gen: Generator,
    critic: Critic,
}

pub const GAN_KIND: &str = "cgan_generator";
pub const CRITIC_KIND: &str = "cgan_critic";

fn zero_layer<T: Scalar>(params: &mut ParamSet<T>, conv: &Conv2d) {
    params.get_mut(conv.w).data.iter_mut().for_each(|v| *v = T::zero());
    params.get_mut(conv.b).data.iter_mut().for_each(|v| *v = T::zero());
}

impl<T: Scalar> GanPair<T> {
    pub fn new(cfg: GanConfig, rows: usize, cols: usize) -> Result<Self> {
        if rows % 4 != 0 || cols % 4 != 0 || rows == 0 || cols == 0 {
            return Err(Error::invalid("GAN grids must have sides divisible by 4"));
        }
        if cfg.width == 0 {
            return Err(Error::invalid("GAN width must be positive"));
        }
        let w = cfg.width;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut gp = ParamSet::new();
        let gen = Generator {
            c1: Conv2d::new(&mut gp, "g1", COND_CH, w, 3, 1, 1, &mut rng),
            c2: Conv2d::new(&mut gp, "g2", w, 2 * w, 3, 2, 1, &mut rng),
            c3: Conv2d::new(&mut gp, "g3", 2 * w, 2 * w, 3, 1, 1, &mut rng),
            c4: Conv2d::new(&mut gp, "g4", 3 * w, w, 3, 1, 1, &mut rng),
            c5: Conv2d::new(&mut gp, "g5", w, 2, 3, 1, 1, &mut rng),
        };
        // Starts as the LS interpolator.
        zero_layer(&mut gp, &gen.c5);
        let mut dp = ParamSet::new();
        let critic = Critic {
            c1: Conv2d::new(&mut dp, "d1", 2 + COND_CH, w, 3, 2, 1, &mut rng),
            c2: Conv2d::new(&mut dp, "d2", w, 2 * w, 3, 2, 1, &mut rng),
            fc: Linear::new(&mut dp, "d3", 2 * w * (rows / 4) * (cols / 4), 1, &mut rng),
        };
        Ok(Self { cfg, rows, cols, gen_params: gp, disc_params: dp, gen, critic })
    }

    fn arch(&self) -> serde_json::Value {
        json!({ "rows": self.rows, "cols": self.cols, "config": self.cfg })
    }

    /// Writes `<stem>.gen` and `<stem>.critic` next to `path`.
    pub fn save(&self, path: &Path) -> Result<()> {
        checkpoint::save(path, GAN_KIND, &self.arch(), &self.gen_params)?;
        checkpoint::save(&path.with_extension("critic"), CRITIC_KIND, &self.arch(), &self.disc_params)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let header = checkpoint::read_header(path)?;
        let bad = |m: &str| Error::format(path, m.to_string());
        let rows = header.arch["rows"].as_u64().ok_or_else(|| bad("missing rows"))? as usize;
        let cols = header.arch["cols"].as_u64().ok_or_else(|| bad("missing cols"))? as usize;
        let cfg: GanConfig = serde_json::from_value(header.arch["config"].clone())
            .map_err(|e| Error::format(path, format!("bad GAN configuration: {e}")))?;
        let mut pair = Self::new(cfg, rows, cols)?;
        let g = checkpoint::load::<T>(path, GAN_KIND, &header.arch)?;
        checkpoint::adopt(path, &mut pair.gen_params, g)?;
        let cpath = path.with_extension("critic");
        if cpath.exists() {
            let d = checkpoint::load::<T>(&cpath, CRITIC_KIND, &header.arch)?;
            checkpoint::adopt(&cpath, &mut pair.disc_params, d)?;
        }
        Ok(pair)
    }

    /// `cond` is `batch × 6 × rows × cols`; returns `batch × 2 × rows × cols`.
    fn gen_graph(&self, tape: &mut Tape<T>, p: &[Var], cond: Var) -> Var {
        let slope = T::of(LRELU);
        let s = tape.shape(cond).to_vec();
        let a = self.gen.c1.forward(tape, p, cond);
        let a = tape.leaky_relu(a, slope);
        let b = self.gen.c2.forward(tape, p, a);
        let b = tape.leaky_relu(b, slope);
        let b = self.gen.c3.forward(tape, p, b);
        let b = tape.leaky_relu(b, slope);
        let u = tape.upsample2x(b);
        let j = tape.concat_channels(&[u, a]);
        let c = self.gen.c4.forward(tape, p, j);
        let c = tape.leaky_relu(c, slope);
        let r = self.gen.c5.forward(tape, p, c);
        // The first two conditioning planes are the LS interpolation.
        let flat = tape.reshape(cond, &[s[0], s[1] * s[2] * s[3]]);
        let ls = tape.slice_cols(flat, 0, 2 * s[2] * s[3]);
        let ls = tape.reshape(ls, &[s[0], 2, s[2], s[3]]);
        tape.add(ls, r)
    }

    fn critic_graph(&self, tape: &mut Tape<T>, p: &[Var], x: Var, cond: Var) -> Var {
        let slope = T::of(LRELU);
        let n = tape.shape(x)[0];
        let j = tape.concat_channels(&[x, cond]);
        let a = self.critic.c1.forward(tape, p, j);
        let a = tape.leaky_relu(a, slope);
        let b = self.critic.c2.forward(tape, p, a);
        let b = tape.leaky_relu(b, slope);
        let len = tape.value(b).len() / n;
        let f = tape.reshape(b, &[n, len]);
        self.critic.fc.forward(tape, p, f)
    }

    fn cond_tensor(&self, samples: &[&[C64]], block: &PilotBlock) -> Result<Tensor<T>> {
        if block.rows != self.rows || block.cols != self.cols {
            return Err(Error::invalid("pilot grid does not match the GAN"));
        }
        let mut data = Vec::with_capacity(samples.len() * COND_CH * self.rows * self.cols);
        for y in samples {
            data.extend(condition_planes::<T>(y, block)?);
        }
        Ok(Tensor::new(vec![samples.len(), COND_CH, self.rows, self.cols], data))
    }

    /// `G(Y | Θ)`.
    pub fn generate(&self, y: &[C64], block: &PilotBlock) -> Result<CsiImage> {
        check_obs(y, block)?;
        let mut tape = Tape::new();
        let p = self.gen_params.load(&mut tape);
        let cond = self.cond_tensor(&[y], block)?;
        let cond = tape.leaf(cond);
        let out = self.gen_graph(&mut tape, &p, cond);
        CsiImage::from_planes(self.rows, self.cols, tape.data(out))
    }

    /// Critic score `D(x | Θ)`.
    pub fn discriminate(&self, x: &CsiImage, y: &[C64], block: &PilotBlock) -> Result<f64> {
        check_obs(y, block)?;
        let mut tape = Tape::new();
        let p = self.disc_params.load(&mut tape);
        let cond = self.cond_tensor(&[y], block)?;
        let cond = tape.leaf(cond);
        let xv = tape.leaf(Tensor::new(vec![1, 2, self.rows, self.cols], x.planes()));
        let d = self.critic_graph(&mut tape, &p, xv, cond);
        Ok(tape.value(d).item().f64())
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct GanReport {
    pub d_losses: Vec<f64>,
    pub g_losses: Vec<f64>,
}

/// Alternating critic and generator updates per batch.
pub fn train_cgan<T: Scalar>(samples: &[CsiSample], block: &PilotBlock, cfg: &GanConfig) -> Result<(GanPair<T>, GanReport)> {
    if samples.is_empty() {
        return Err(Error::invalid("GAN training needs samples"));
    }
    if !(cfg.mu_l1 >= 0.0) {
        return Err(Error::invalid("L1 weight must be nonnegative"));
    }
    let mut pair = GanPair::<T>::new(cfg.clone(), block.rows, block.cols)?;
    let mut opt_g = Adam::<T>::new(cfg.lr_g).with_betas(0.5, 0.999);
    let mut opt_d = Adam::<T>::new(cfg.lr_d).with_betas(0.5, 0.999);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(0x6a4));
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut report = GanReport::default();
    let (rows, cols) = (block.rows, block.cols);
    let aug = Augmenter::new(block);
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let (mut dl, mut gl, mut steps) = (0.0, 0.0, 0);
        for idx in order.chunks(cfg.batch.max(1)) {
            let n = idx.len();
            let batch: Vec<CsiSample> = idx
                .iter()
                .map(|&i| if cfg.augment { aug.apply(&samples[i], block, &mut rng) } else { Ok(samples[i].clone()) })
                .collect::<Result<_>>()?;
            let ys: Vec<&[C64]> = batch.iter().map(|s| s.y.as_slice()).collect();
            let cond = pair.cond_tensor(&ys, block)?;
            let mut real = Vec::with_capacity(n * 2 * rows * cols);
            for s in &batch {
                real.extend(s.h.planes::<T>());
            }
            let real = Tensor::new(vec![n, 2, rows, cols], real);

            // Critic step on a detached fake.
            let fake = {
                let mut tape = Tape::new();
                let p = pair.gen_params.load(&mut tape);
                let c = tape.leaf(cond.clone());
                let g = pair.gen_graph(&mut tape, &p, c);
                tape.value(g).clone()
            };
            let mut tape = Tape::new();
            let p = pair.disc_params.load(&mut tape);
            let c = tape.leaf(cond.clone());
            let rv = tape.leaf(real.clone());
            let fv = tape.leaf(fake);
            let d_real = pair.critic_graph(&mut tape, &p, rv, c);
            let d_fake = pair.critic_graph(&mut tape, &p, fv, c);
            let lr = tape.add_scalar(d_real, T::of(-1.0));
            let lr = tape.square(lr);
            let lr = tape.mean(lr);
            let lf = tape.add_scalar(d_fake, T::one());
            let lf = tape.square(lf);
            let lf = tape.mean(lf);
            let d_loss = tape.add(lr, lf);
            let dv = tape.value(d_loss).item().f64();
            let grads = tape.backward(d_loss);
            opt_d.step(&mut pair.disc_params, &grads);

            // Generator step through the frozen critic.
            let mut tape = Tape::new();
            let gp = pair.gen_params.load(&mut tape);
            let dp: Vec<Var> = pair.disc_params.iter().map(|(_, t)| tape.leaf(t.clone())).collect();
            let c = tape.leaf(cond);
            let rv = tape.leaf(real);
            let g = pair.gen_graph(&mut tape, &gp, c);
            let d_fake = pair.critic_graph(&mut tape, &dp, g, c);
            let adv = tape.square(d_fake);
            let adv = tape.mean(adv);
            let diff = tape.sub(g, rv);
            let l1 = tape.abs(diff);
            let l1 = tape.mean(l1);
            let l1 = tape.scale(l1, T::of(cfg.mu_l1));
            let g_loss = tape.add(adv, l1);
            let gv = tape.value(g_loss).item().f64();
            if !(dv.is_finite() && gv.is_finite()) {
                return Err(Error::Divergence { epoch, msg: format!("GAN losses became {dv} / {gv}") });
            }
            let grads = tape.backward(g_loss);
            opt_g.step(&mut pair.gen_params, &grads);
            dl += dv;
            gl += gv;
            steps += 1;
        }
        report.d_losses.push(dl / steps as f64);
        report.g_losses.push(gl / steps as f64);
    }
    Ok((pair, report))
}

// ---------------------------------------------------------------------------
// Diffusion refinement

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseSchedule {
    pub betas: Vec<f64>,
    pub alphas: Vec<f64>,
    pub alpha_bars: Vec<f64>,
}

impl NoiseSchedule {
    pub fn from_betas(betas: Vec<f64>) -> Result<Self> {
        if betas.is_empty() {
            return Err(Error::invalid("a schedule needs at least one step"));
        }
        if betas.iter().any(|&b| !(b > 0.0 && b < 1.0)) {
            return Err(Error::invalid("every beta must lie in (0, 1)"));
        }
        if betas.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::invalid("betas must be strictly increasing"));
        }
        let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
        let mut alpha_bars = Vec::with_capacity(alphas.len());
        let mut acc = 1.0;
        for a in &alphas {
            acc *= a;
            alpha_bars.push(acc);
        }
        Ok(Self { betas, alphas, alpha_bars })
    }

    pub fn steps(&self) -> usize {
        self.betas.len()
    }

    /// `β_t` for 1-based `t`.
    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t - 1]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alphas[t - 1]
    }

    /// `ᾱ_t`, with `ᾱ_0 = 1`.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        if t == 0 {
            1.0
        } else {
            self.alpha_bars[t - 1]
        }
    }

    /// Coefficients `(c0, ct)` of the posterior mean
    /// `μ̃ = c0·x0 + ct·x_t` of `q(x_{t−1} | x_t, x0)`.
    pub fn posterior_coefficients(&self, t: usize) -> (f64, f64) {
        let (om, om_prev) = (self.one_minus_alpha_bar(t), self.one_minus_alpha_bar(t - 1));
        let b = self.beta(t);
        (self.alpha_bar(t - 1).sqrt() * b / om, self.alpha(t).sqrt() * om_prev / om)
    }

    /// `1 − ᾱ_t` without cancellation for small betas.
    pub fn one_minus_alpha_bar(&self, t: usize) -> f64 {
        self.betas[..t].iter().fold(0.0, |u, &b| u + b * (1.0 - u))
    }
}

/// Linear schedule from `β_1` to `β_T` over `T` steps.
pub fn make_schedule(steps: usize, beta_1: f64, beta_t: f64) -> Result<NoiseSchedule> {
    if steps == 0 {
        return Err(Error::invalid("a schedule needs at least one step"));
    }
    if !(beta_1 < beta_t) {
        return Err(Error::invalid(format!("beta_1 = {beta_1} must be below beta_T = {beta_t}")));
    }
    if !(beta_1 > 0.0 && beta_t < 1.0) {
        return Err(Error::invalid("betas must lie in (0, 1)"));
    }
    let betas = if steps == 1 {
        vec![beta_1]
    } else {
        (0..steps).map(|i| beta_1 + (beta_t - beta_1) * i as f64 / (steps - 1) as f64).collect()
    };
    NoiseSchedule::from_betas(betas)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DiffuseMode {
    Chain,
    Marginal,
}

fn gauss_planes(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.sample(StandardNormal)).collect()
}

/// `x_t` from `x_0`, either by `t` single steps or the closed-form marginal.
pub fn forward_diffuse(h0: &CsiImage, t: usize, schedule: &NoiseSchedule, seed: u64, mode: DiffuseMode) -> Result<CsiImage> {
    if t == 0 || t > schedule.steps() {
        return Err(Error::invalid(format!("step {t} outside 1..={}", schedule.steps())));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut x = h0.planes::<f64>();
    match mode {
        DiffuseMode::Chain => {
            for s in 1..=t {
                let (a, b) = (schedule.alpha(s).sqrt(), schedule.beta(s).sqrt());
                let z = gauss_planes(&mut rng, x.len());
                x.iter_mut().zip(z).for_each(|(v, z)| *v = a * *v + b * z);
            }
        }
        DiffuseMode::Marginal => {
            let ab = schedule.alpha_bar(t);
            let z = gauss_planes(&mut rng, x.len());
            x.iter_mut().zip(z).for_each(|(v, z)| *v = ab.sqrt() * *v + (1.0 - ab).sqrt() * z);
        }
    }
    CsiImage::from_planes(h0.rows, h0.cols, &x)
}

/// Side information the denoiser sees next to `x_t` and the step.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Conditioning {
    /// Timestep only.
    None,
    /// The coarse estimate being refined.
    Estimate,
    /// The coarse estimate plus the generator's pilot planes.
    #[default]
    EstimatePilots,
}

impl Conditioning {
    pub fn channels(self) -> usize {
        match self {
            Conditioning::None => 0,
            Conditioning::Estimate => 2,
            Conditioning::EstimatePilots => 2 + COND_CH,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DenoiserConfig {
    pub width: usize,
    pub lr: f64,
    pub batch: usize,
    pub epochs: usize,
    pub seed: u64,
    pub conditioning: Conditioning,
    /// Clean end point `x_0` that training diffuses.
    pub diffuse_from: DiffuseSource,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        Self {
            width: 16,
            lr: 1e-3,
            batch: 16,
            epochs: 100,
            seed: 0,
            conditioning: Conditioning::EstimatePilots,
            diffuse_from: DiffuseSource::Estimate,
        }
    }
}

/// Which image training noises into `x_t`; the regression target is
/// always the posterior mean toward the true channel.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DiffuseSource {
    /// The generator output `Ĥ_0`.
    #[default]
    Estimate,
    /// The true channel.
    Truth,
}

const TIME_CH: usize = 4;

/// One denoiser training example: generator output, true channel and the
/// pilots it was estimated from.
#[derive(Clone, Debug)]
pub struct RefineSample {
    pub coarse: CsiImage,
    pub truth: CsiImage,
    pub y: Vec<C64>,
}

/// Mean predictor in clean-estimate form: `μ_θ(x_t, t | c) = c0·x̂_0 +
/// ct·x_t` with the posterior coefficients of step `t` and
/// `x̂_0 = Ĥ + r_θ(x_t, t, c)` (`x_t / √ᾱ_t` in place of `Ĥ` when
/// unconditioned). `r_θ` is zero at initialization, so the untrained chain
/// returns its starting estimate. `c` is selected by [`Conditioning`].
pub struct DenoiserModel<T: Scalar> {
    pub cfg: DenoiserConfig,
    pub schedule: NoiseSchedule,
    pub rows: usize,
    pub cols: usize,
    pub params: ParamSet<T>,
    layers: [Conv2d; 4],
}

pub const DENOISER_KIND: &str = "csi_denoiser";

impl<T: Scalar> DenoiserModel<T> {
    pub fn new(cfg: DenoiserConfig, schedule: NoiseSchedule, rows: usize, cols: usize) -> Result<Self> {
        if cfg.width == 0 || rows == 0 || cols == 0 {
            return Err(Error::invalid("denoiser width and grid must be positive"));
        }
        let w = cfg.width;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut params = ParamSet::new();
        let cin = 2 + TIME_CH + cfg.conditioning.channels();
        let layers = [
            Conv2d::new(&mut params, "n1", cin, w, 3, 1, 1, &mut rng),
            Conv2d::new(&mut params, "n2", w, w, 3, 1, 1, &mut rng),
            Conv2d::new(&mut params, "n3", w, w, 3, 1, 1, &mut rng),
            Conv2d::new(&mut params, "n4", w, 2, 3, 1, 1, &mut rng),
        ];
        zero_layer(&mut params, &layers[3]);
        Ok(Self { cfg, schedule, rows, cols, params, layers })
    }

    fn arch(&self) -> serde_json::Value {
        json!({ "rows": self.rows, "cols": self.cols, "config": self.cfg, "schedule": self.schedule.betas })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        checkpoint::save(path, DENOISER_KIND, &self.arch(), &self.params)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let header = checkpoint::read_header(path)?;
        let bad = |m: String| Error::format(path, m);
        let rows = header.arch["rows"].as_u64().ok_or_else(|| bad("missing rows".into()))? as usize;
        let cols = header.arch["cols"].as_u64().ok_or_else(|| bad("missing cols".into()))? as usize;
        let cfg: DenoiserConfig =
            serde_json::from_value(header.arch["config"].clone()).map_err(|e| bad(format!("bad denoiser configuration: {e}")))?;
        let betas: Vec<f64> =
            serde_json::from_value(header.arch["schedule"].clone()).map_err(|e| bad(format!("bad schedule: {e}")))?;
        let mut model = Self::new(cfg, NoiseSchedule::from_betas(betas)?, rows, cols)?;
        let loaded = checkpoint::load::<T>(path, DENOISER_KIND, &header.arch)?;
        checkpoint::adopt(path, &mut model.params, loaded)?;
        Ok(model)
    }

    /// Conditioning planes for one estimate.
    pub fn condition(&self, coarse: &CsiImage, pilots: Option<(&[C64], &PilotBlock)>) -> Result<Vec<T>> {
        if coarse.rows != self.rows || coarse.cols != self.cols {
            return Err(Error::invalid("estimate grid does not match the denoiser"));
        }
        Ok(match self.cfg.conditioning {
            Conditioning::None => Vec::new(),
            Conditioning::Estimate => coarse.planes(),
            Conditioning::EstimatePilots => {
                let Some((y, block)) = pilots else {
                    return Err(Error::invalid("this denoiser needs the pilot observations"));
                };
                check_obs(y, block)?;
                if block.rows != self.rows || block.cols != self.cols {
                    return Err(Error::invalid("pilot grid does not match the denoiser"));
                }
                let mut c = coarse.planes();
                c.extend(condition_planes::<T>(y, block)?);
                c
            }
        })
    }

    fn time_planes(&self, t: usize) -> Vec<T> {
        let u = t as f64 / self.schedule.steps() as f64;
        let feats = [
            (std::f64::consts::PI * u).sin(),
            (std::f64::consts::PI * u).cos(),
            (std::f64::consts::TAU * u).sin(),
            (std::f64::consts::TAU * u).cos(),
        ];
        let n = self.rows * self.cols;
        feats.iter().flat_map(|&f| std::iter::repeat(T::of(f)).take(n)).collect()
    }

    /// `x` is `batch × 2 × rows × cols`, `cond` the matching conditioning
    /// planes, one step index per sample.
    fn graph(&self, tape: &mut Tape<T>, p: &[Var], x: Var, cond: Vec<T>, steps: &[usize]) -> Var {
        let n = self.rows * self.cols;
        let b = steps.len();
        let base = if self.cfg.conditioning == Conditioning::None {
            let inv: Vec<T> = steps.iter().map(|&t| T::of(1.0 / self.schedule.alpha_bar(t).sqrt())).collect();
            let flat = tape.reshape(x, &[b, 2 * n]);
            let inv = tape.leaf(Tensor::new(vec![b], inv));
            let scaled = tape.mul_col(flat, inv);
            tape.reshape(scaled, &[b, 2, self.rows, self.cols])
        } else {
            let cc = self.cfg.conditioning.channels();
            let est: Vec<T> = cond.chunks(cc * n).flat_map(|c| c[..2 * n].iter().copied()).collect();
            tape.leaf(Tensor::new(vec![b, 2, self.rows, self.cols], est))
        };
        let mut tp = Vec::with_capacity(b * TIME_CH * n);
        for &t in steps {
            tp.extend(self.time_planes(t));
        }
        let tv = tape.leaf(Tensor::new(vec![b, TIME_CH, self.rows, self.cols], tp));
        let cc = self.cfg.conditioning.channels();
        let mut h = if cc > 0 {
            let cv = tape.leaf(Tensor::new(vec![b, cc, self.rows, self.cols], cond));
            tape.concat_channels(&[x, cv, tv])
        } else {
            tape.concat_channels(&[x, tv])
        };
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(tape, p, h);
            if i + 1 < self.layers.len() {
                h = tape.leaky_relu(h, T::of(LRELU));
            }
        }
        let x0 = tape.add(base, h);
        let (c0, ct): (Vec<T>, Vec<T>) = steps
            .iter()
            .map(|&t| {
                let (a, b) = self.schedule.posterior_coefficients(t);
                (T::of(a), T::of(b))
            })
            .unzip();
        let c0 = tape.leaf(Tensor::new(vec![b], c0));
        let ct = tape.leaf(Tensor::new(vec![b], ct));
        let x0 = tape.reshape(x0, &[b, 2 * n]);
        let xf = tape.reshape(x, &[b, 2 * n]);
        let a = tape.mul_col(x0, c0);
        let c = tape.mul_col(xf, ct);
        let mu = tape.add(a, c);
        tape.reshape(mu, &[b, 2, self.rows, self.cols])
    }

    /// `μ_θ(x_t, t | c)` with `cond` from [`DenoiserModel::condition`].
    pub fn mean(&self, x: &CsiImage, t: usize, cond: &[T]) -> Result<CsiImage> {
        if t == 0 || t > self.schedule.steps() {
            return Err(Error::invalid(format!("step {t} outside 1..={}", self.schedule.steps())));
        }
        if x.rows != self.rows || x.cols != self.cols {
            return Err(Error::invalid("estimate grid does not match the denoiser"));
        }
        if cond.len() != self.cfg.conditioning.channels() * self.rows * self.cols {
            return Err(Error::invalid("conditioning planes do not match the denoiser"));
        }
        let mut tape = Tape::new();
        let p = self.params.load(&mut tape);
        let xv = tape.leaf(Tensor::new(vec![1, 2, self.rows, self.cols], x.planes()));
        let out = self.graph(&mut tape, &p, xv, cond.to_vec(), &[t]);
        CsiImage::from_planes(self.rows, self.cols, tape.data(out))
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct DenoiserReport {
    pub losses: Vec<f64>,
}

/// Regresses `μ_θ(x_t, t | c)` onto the posterior mean
/// `μ̃(x_t, x_0)` with `x_t` diffused from `x_0`. Conditioned models take
/// `x_0 = H` and learn to pull the chain from the coarse estimate toward
/// the channel; the unconditioned model diffuses the coarse estimate itself.
pub fn train_denoiser<T: Scalar>(
    samples: &[RefineSample],
    block: &PilotBlock,
    schedule: &NoiseSchedule,
    cfg: &DenoiserConfig,
) -> Result<(DenoiserModel<T>, DenoiserReport)> {
    if samples.is_empty() {
        return Err(Error::invalid("denoiser training needs samples"));
    }
    let (rows, cols) = (block.rows, block.cols);
    let mut model = DenoiserModel::<T>::new(cfg.clone(), schedule.clone(), rows, cols)?;
    let conds: Vec<Vec<T>> = samples
        .iter()
        .map(|s| {
            if s.truth.rows != rows || s.truth.cols != cols {
                return Err(Error::invalid("denoiser samples differ in grid size"));
            }
            model.condition(&s.coarse, Some((&s.y, block)))
        })
        .collect::<Result<_>>()?;
    let mut opt = Adam::<T>::new(cfg.lr);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(0xd1f));
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut report = DenoiserReport::default();
    let n = 2 * rows * cols;
    let from_truth = cfg.diffuse_from == DiffuseSource::Truth;
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let (mut total, mut steps) = (0.0, 0);
        for idx in order.chunks(cfg.batch.max(1)) {
            let mut xs = Vec::with_capacity(idx.len() * n);
            let mut cs = Vec::new();
            let mut targets = Vec::with_capacity(idx.len() * n);
            let mut ts = Vec::with_capacity(idx.len());
            for &i in idx {
                let s = &samples[i];
                let t = rng.gen_range(1..=schedule.steps());
                let ab = schedule.alpha_bar(t);
                let (c0, ct) = schedule.posterior_coefficients(t);
                let z = gauss_planes(&mut rng, n);
                let x0 = if from_truth { s.truth.planes::<f64>() } else { s.coarse.planes::<f64>() };
                for ((x0, h), z) in x0.into_iter().zip(s.truth.planes::<f64>()).zip(z) {
                    let xt = ab.sqrt() * x0 + (1.0 - ab).sqrt() * z;
                    xs.push(T::of(xt));
                    targets.push(T::of(c0 * h + ct * xt));
                }
                cs.extend_from_slice(&conds[i]);
                ts.push(t);
            }
            let shape = vec![idx.len(), 2, rows, cols];
            let mut tape = Tape::new();
            let p = model.params.load(&mut tape);
            let xv = tape.leaf(Tensor::new(shape.clone(), xs));
            let tv = tape.leaf(Tensor::new(shape, targets));
            let out = model.graph(&mut tape, &p, xv, cs, &ts);
            let loss = tape.mse(out, tv);
            let lv = tape.value(loss).item().f64();
            if !lv.is_finite() {
                return Err(Error::Divergence { epoch, msg: format!("denoiser loss became {lv}") });
            }
            let grads: Gradients<T> = tape.backward(loss);
            opt.step(&mut model.params, &grads);
            total += lv;
            steps += 1;
        }
        report.losses.push(total / steps as f64);
    }
    Ok((model, report))
}

/// Where the reverse chain starts.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DiffusionStart {
    /// `x_T = Ĥ`.
    #[default]
    Estimate,
    /// `x_T = √ᾱ_T Ĥ + √(1 − ᾱ_T) z`.
    Renoised,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RefineOptions {
    /// Keep the noise at `t = 1` and return `x_1 / √α_1`.
    pub literal: bool,
    pub start: DiffusionStart,
    /// Independent chains averaged into the returned estimate.
    pub chains: usize,
    /// Multiplies the injected `√β_t z`.
    pub noise_scale: f64,
}

impl Default for RefineOptions {
    fn default() -> Self {
        Self { literal: false, start: DiffusionStart::Estimate, chains: 1, noise_scale: 1.0 }
    }
}

/// Single reverse chain from `x_T = Ĥ`. `literal` keeps the noise at
/// `t = 1` and divides the result by `√α_1`; otherwise the last step is
/// noise-free.
pub fn refine_csi<T: Scalar>(
    h: &CsiImage,
    pilots: Option<(&[C64], &PilotBlock)>,
    model: &DenoiserModel<T>,
    seed: u64,
    literal: bool,
) -> Result<CsiImage> {
    refine_csi_with(h, pilots, model, seed, &RefineOptions { literal, ..Default::default() })
}

pub fn refine_csi_with<T: Scalar>(
    h: &CsiImage,
    pilots: Option<(&[C64], &PilotBlock)>,
    model: &DenoiserModel<T>,
    seed: u64,
    opts: &RefineOptions,
) -> Result<CsiImage> {
    if opts.chains == 0 {
        return Err(Error::invalid("refinement needs at least one chain"));
    }
    if !(opts.noise_scale >= 0.0) {
        return Err(Error::invalid("noise scale must be nonnegative"));
    }
    let cond = model.condition(h, pilots)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut acc = vec![0.0; 2 * h.len()];
    for _ in 0..opts.chains {
        let x = reverse_chain(h, &cond, model, &mut rng, opts)?;
        acc.iter_mut().zip(x.planes::<f64>()).for_each(|(a, v)| *a += v / opts.chains as f64);
    }
    CsiImage::from_planes(h.rows, h.cols, &acc)
}

fn reverse_chain<T: Scalar>(
    h: &CsiImage,
    cond: &[T],
    model: &DenoiserModel<T>,
    rng: &mut ChaCha8Rng,
    opts: &RefineOptions,
) -> Result<CsiImage> {
    let literal = opts.literal;
    let sched = &model.schedule;
    let mut x = h.clone();
    if opts.start == DiffusionStart::Renoised {
        let ab = sched.alpha_bar(sched.steps());
        let z = gauss_planes(rng, 2 * h.len());
        let planes: Vec<f64> = h.planes::<f64>().iter().zip(z).map(|(v, z)| ab.sqrt() * v + (1.0 - ab).sqrt() * z).collect();
        x = CsiImage::from_planes(h.rows, h.cols, &planes)?;
    }
    for t in (1..=sched.steps()).rev() {
        let mu = model.mean(&x, t, cond)?;
        let mut planes = mu.planes::<f64>();
        if t > 1 || literal {
            let s = opts.noise_scale * sched.beta(t).sqrt();
            let z = gauss_planes(rng, planes.len());
            planes.iter_mut().zip(z).for_each(|(v, z)| *v += s * z);
        }
        x = CsiImage::from_planes(h.rows, h.cols, &planes)?;
    }
    if literal {
        let k = 1.0 / sched.alpha(1).sqrt();
        x.re.iter_mut().chain(x.im.iter_mut()).for_each(|v| *v *= k);
    }
    Ok(x)
}

/// Coarse generator output and its diffusion refinement.
#[derive(Clone, Debug)]
pub struct GdceEstimate {
    pub coarse: CsiImage,
    pub refined: CsiImage,
}

pub fn estimate_csi<T: Scalar>(
    y: &[C64],
    block: &PilotBlock,
    gan: &GanPair<T>,
    denoiser: &DenoiserModel<T>,
    seed: u64,
    opts: &RefineOptions,
) -> Result<GdceEstimate> {
    let coarse = gan.generate(y, block)?;
    let refined = refine_csi_with(&coarse, Some((y, block)), denoiser, seed, opts)?;
    Ok(GdceEstimate { coarse, refined })
}

/// Everything needed to train the two-stage estimator from scratch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GdceConfig {
    pub rows: usize,
    pub cols: usize,
    pub pilot_stride: usize,
    pub pilot_seed: u64,
    pub channel: ChannelModel,
    pub snr_db: (f64, f64),
    pub gan_pairs: usize,
    pub denoiser_pairs: usize,
    pub steps: usize,
    pub beta_1: f64,
    pub beta_t: f64,
    pub gan: GanConfig,
    pub denoiser: DenoiserConfig,
    pub seed: u64,
}

impl Default for GdceConfig {
    fn default() -> Self {
        Self {
            rows: 16,
            cols: 16,
            pilot_stride: 4,
            pilot_seed: 7,
            channel: ChannelModel::Rician { k: 3.0 },
            snr_db: (0.0, 25.0),
            gan_pairs: 256,
            denoiser_pairs: 2048,
            steps: 50,
            beta_1: 1e-4,
            beta_t: 0.02,
            gan: GanConfig::default(),
            denoiser: DenoiserConfig::default(),
            seed: 0,
        }
    }
}

impl GdceConfig {
    pub fn pilot_block(&self) -> Result<PilotBlock> {
        PilotBlock::regular(self.rows, self.cols, self.pilot_stride, self.pilot_seed)
    }

    pub fn schedule(&self) -> Result<NoiseSchedule> {
        make_schedule(self.steps, self.beta_1, self.beta_t)
    }
}

pub struct GdceModels<T: Scalar> {
    pub block: PilotBlock,
    pub gan: GanPair<T>,
    pub denoiser: DenoiserModel<T>,
    pub gan_report: GanReport,
    pub denoiser_report: DenoiserReport,
}

impl<T: Scalar> GdceModels<T> {
    pub fn estimate(&self, y: &[C64], seed: u64, opts: &RefineOptions) -> Result<GdceEstimate> {
        estimate_csi(y, &self.block, &self.gan, &self.denoiser, seed, opts)
    }

    /// Writes `<stem>.gen`, `<stem>.critic` and `<stem>.den`.
    pub fn save(&self, stem: &Path) -> Result<()> {
        self.gan.save(&stem.with_extension("gen"))?;
        self.denoiser.save(&stem.with_extension("den"))
    }

    pub fn load(stem: &Path, block: PilotBlock) -> Result<Self> {
        let gan = GanPair::load(&stem.with_extension("gen"))?;
        let denoiser = DenoiserModel::load(&stem.with_extension("den"))?;
        if gan.rows != block.rows || gan.cols != block.cols || denoiser.rows != block.rows || denoiser.cols != block.cols {
            return Err(Error::format(stem, "checkpoint grid does not match the pilot block"));
        }
        Ok(Self { block, gan, denoiser, gan_report: GanReport::default(), denoiser_report: DenoiserReport::default() })
    }
}

/// Trains the generator on `gan_pairs` draws, then the denoiser on fresh
/// draws refined by that generator.
pub fn train_gdce<T: Scalar>(cfg: &GdceConfig) -> Result<GdceModels<T>> {
    let block = cfg.pilot_block()?;
    let schedule = cfg.schedule()?;
    let gan_set = make_csi_samples(cfg.channel, &block, cfg.gan_pairs, cfg.snr_db, cfg.seed)?;
    let gan_cfg = GanConfig { seed: cfg.seed, ..cfg.gan.clone() };
    let (gan, gan_report) = train_cgan::<T>(&gan_set, &block, &gan_cfg)?;
    let den_set = make_csi_samples(cfg.channel, &block, cfg.denoiser_pairs, cfg.snr_db, cfg.seed.wrapping_add(1))?;
    let refine: Vec<RefineSample> = den_set
        .into_iter()
        .map(|s| Ok(RefineSample { coarse: gan.generate(&s.y, &block)?, truth: s.h, y: s.y }))
        .collect::<Result<_>>()?;
    let den_cfg = DenoiserConfig { seed: cfg.seed, ..cfg.denoiser.clone() };
    let (denoiser, denoiser_report) = train_denoiser::<T>(&refine, &block, &schedule, &den_cfg)?;
    Ok(GdceModels { block, gan, denoiser, gan_report, denoiser_report })
}

// ---------------------------------------------------------------------------
// Benchmark

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BenchRow {
    pub method: String,
    pub snr_db: f64,
    pub nmse_db: f64,
    pub trials: usize,
    pub seed: u64,
}

impl BenchRow {
    pub const CSV_HEADER: &'static str = "method,snr_db,nmse_db,trials,seed";

    pub fn to_csv_row(&self) -> String {
        format!(
            "{},{},{},{},{}",
            self.method,
            crate::metrics::csv_float(self.snr_db),
            crate::metrics::csv_float(self.nmse_db),
            self.trials,
            self.seed
        )
    }
}

/// Estimators available to [`benchmark_estimators`].
pub struct Estimators<'a, T: Scalar> {
    pub prior: Option<&'a ChannelPrior>,
    pub dictionary: Option<(&'a Dictionary, usize)>,
    pub amp: Option<(&'a Dictionary, usize, f64)>,
    pub gan: Option<&'a GanPair<T>>,
    pub denoiser: Option<&'a DenoiserModel<T>>,
    pub refine: RefineOptions,
}

/// Pooled NMSE (total error over total channel energy) per method and SNR.
pub fn benchmark_estimators<T: Scalar>(
    model: ChannelModel,
    block: &PilotBlock,
    snrs: &[f64],
    trials: usize,
    seed: u64,
    est: &Estimators<T>,
) -> Result<Vec<BenchRow>> {
    let mut rows = Vec::new();
    for &snr in snrs {
        let sigma2 = 10f64.powf(-snr / 10.0);
        let samples = make_csi_samples(model, block, trials, (snr, snr), seed ^ snr.to_bits())?;
        let mut acc: Vec<(String, f64)> = Vec::new();
        let mut energy = 0.0;
        let mut add = |name: &str, e: &CsiImage, h: &CsiImage| {
            let err: f64 = e.to_complex().iter().zip(h.to_complex()).map(|(a, b)| (a - b).norm_sqr()).sum();
            match acc.iter_mut().find(|(n, _)| n == name) {
                Some(slot) => slot.1 += err,
                None => acc.push((name.to_string(), err)),
            }
        };
        for (i, s) in samples.iter().enumerate() {
            let h_mean = s.h.to_complex().iter().sum::<C64>() / s.h.len() as f64;
            energy += s.h.to_complex().iter().map(|v| (v - h_mean).norm_sqr()).sum::<f64>();
            add("ls", &ls_estimate(&s.y, block)?, &s.h);
            if let Some(prior) = est.prior {
                add("mmse", &mmse_estimate(&s.y, block, prior, sigma2)?, &s.h);
            }
            if let Some((dict, k)) = est.dictionary {
                add("omp", &omp_estimate(&s.y, block, dict, k)?, &s.h);
            }
            if let Some((dict, iters, thr)) = est.amp {
                add("amp", &amp_estimate(&s.y, block, dict, iters, thr)?, &s.h);
            }
            if let Some(gan) = est.gan {
                let coarse = gan.generate(&s.y, block)?;
                add("cgan", &coarse, &s.h);
                if let Some(den) = est.denoiser {
                    add("gdce", &refine_csi_with(&coarse, Some((&s.y, block)), den, seed.wrapping_add(i as u64), &est.refine)?, &s.h);
                }
            }
        }
        for (name, err) in acc {
            rows.push(BenchRow { method: name, snr_db: snr, nmse_db: 10.0 * (err / energy).log10(), trials, seed });
        }
    }
    Ok(rows)
}
