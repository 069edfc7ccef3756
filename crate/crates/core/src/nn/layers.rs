use rand_chacha::ChaCha8Rng;

use super::params::ParamSet;
use super::tape::{Tape, Var};
use crate::scalar::Scalar;

/// Affine map `x · W + b` on row vectors.
#[derive(Clone, Copy, Debug)]
pub struct Linear {
    pub w: usize,
    pub b: usize,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl Linear {
    pub fn new<T: Scalar>(params: &mut ParamSet<T>, name: &str, fan_in: usize, fan_out: usize, rng: &mut ChaCha8Rng) -> Self {
        let w = params.add_glorot(&format!("{name}.w"), &[fan_in, fan_out], fan_in, fan_out, rng);
        let b = params.add_zeros(&format!("{name}.b"), &[fan_out]);
        Self { w, b, fan_in, fan_out }
    }

    /// A layer whose weights and bias start at zero.
    pub fn zeroed<T: Scalar>(params: &mut ParamSet<T>, name: &str, fan_in: usize, fan_out: usize) -> Self {
        let w = params.add_zeros(&format!("{name}.w"), &[fan_in, fan_out]);
        let b = params.add_zeros(&format!("{name}.b"), &[fan_out]);
        Self { w, b, fan_in, fan_out }
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, p: &[Var], x: Var) -> Var {
        let y = tape.matmul(x, p[self.w]);
        tape.add_bias(y, p[self.b])
    }
}

/// Row standardization followed by a learned gain and bias.
#[derive(Clone, Copy, Debug)]
pub struct LayerNorm {
    pub gain: usize,
    pub bias: usize,
}

impl LayerNorm {
    pub fn new<T: Scalar>(params: &mut ParamSet<T>, name: &str, dim: usize) -> Self {
        let gain = params.add_full(&format!("{name}.g"), &[dim], T::one());
        let bias = params.add_zeros(&format!("{name}.b"), &[dim]);
        Self { gain, bias }
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, p: &[Var], x: Var) -> Var {
        let n = tape.layer_norm(x, T::of(1e-5));
        let g = tape.mul_row(n, p[self.gain]);
        tape.add_bias(g, p[self.bias])
    }
}

/// Square-kernel 2-D convolution over NCHW tensors.
#[derive(Clone, Copy, Debug)]
pub struct Conv2d {
    pub w: usize,
    pub b: usize,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Scalar>(
        params: &mut ParamSet<T>,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let fan_in = in_ch * kernel * kernel;
        let fan_out = out_ch * kernel * kernel;
        let w = params.add_glorot(&format!("{name}.w"), &[out_ch, in_ch, kernel, kernel], fan_in, fan_out, rng);
        let b = params.add_zeros(&format!("{name}.b"), &[out_ch]);
        Self { w, b, stride, pad }
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, p: &[Var], x: Var) -> Var {
        tape.conv2d(x, p[self.w], p[self.b], self.stride, self.pad)
    }
}
