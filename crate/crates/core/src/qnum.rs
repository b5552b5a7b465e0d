//! Quaternion algebra, its real 4×4 matrix form, quaternion-structured
//! linear layers and split activations.

use std::fmt;
use std::ops::{Add, Mul, Neg, Sub};
use std::str::FromStr;

use rand::Rng;

use crate::error::{dim_err, Error, Result};
use crate::grad::{Tape, Tensor, Var};

/// `r + x·i + y·j + z·k`.
#[derive(Clone, Copy, Debug, PartialEq, Default)]
pub struct Quaternion {
    pub r: f64,
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl Quaternion {
    pub const ONE: Quaternion = Quaternion::new(1.0, 0.0, 0.0, 0.0);
    pub const I: Quaternion = Quaternion::new(0.0, 1.0, 0.0, 0.0);
    pub const J: Quaternion = Quaternion::new(0.0, 0.0, 1.0, 0.0);
    pub const K: Quaternion = Quaternion::new(0.0, 0.0, 0.0, 1.0);

    pub const fn new(r: f64, x: f64, y: f64, z: f64) -> Self {
        Quaternion { r, x, y, z }
    }

    pub fn norm(self) -> f64 {
        (self.r * self.r + self.x * self.x + self.y * self.y + self.z * self.z).sqrt()
    }

    pub fn conj(self) -> Self {
        Quaternion::new(self.r, -self.x, -self.y, -self.z)
    }

    pub fn is_finite(self) -> bool {
        self.r.is_finite() && self.x.is_finite() && self.y.is_finite() && self.z.is_finite()
    }

    pub fn to_array(self) -> [f64; 4] {
        [self.r, self.x, self.y, self.z]
    }

    /// Left-multiplication matrix: `q ⊗ p == to_real_matrix(q) · [p.r, p.x, p.y, p.z]ᵀ`.
    pub fn to_real_matrix(self) -> [[f64; 4]; 4] {
        let Quaternion { r, x, y, z } = self;
        [
            [r, -x, -y, -z],
            [x, r, -z, y],
            [y, z, r, -x],
            [z, -y, x, r],
        ]
    }
}

/// Real 4×4 matrix representation of `q`.
pub fn quat_to_real_matrix(q: Quaternion) -> [[f64; 4]; 4] {
    q.to_real_matrix()
}

impl Mul for Quaternion {
    type Output = Quaternion;

    /// Hamilton product.
    fn mul(self, b: Quaternion) -> Quaternion {
        let a = self;
        Quaternion::new(
            a.r * b.r - a.x * b.x - a.y * b.y - a.z * b.z,
            a.r * b.x + a.x * b.r + a.y * b.z - a.z * b.y,
            a.r * b.y - a.x * b.z + a.y * b.r + a.z * b.x,
            a.r * b.z + a.x * b.y - a.y * b.x + a.z * b.r,
        )
    }
}

impl Add for Quaternion {
    type Output = Quaternion;

    fn add(self, b: Quaternion) -> Quaternion {
        Quaternion::new(self.r + b.r, self.x + b.x, self.y + b.y, self.z + b.z)
    }
}

impl Sub for Quaternion {
    type Output = Quaternion;

    fn sub(self, b: Quaternion) -> Quaternion {
        Quaternion::new(self.r - b.r, self.x - b.x, self.y - b.y, self.z - b.z)
    }
}

impl Neg for Quaternion {
    type Output = Quaternion;

    fn neg(self) -> Quaternion {
        Quaternion::new(-self.r, -self.x, -self.y, -self.z)
    }
}

/// Four aligned real tensors holding the `r`, `i`, `j`, `k` components of a
/// batch of quaternion units. The last axis counts quaternion units.
#[derive(Clone, Debug, PartialEq)]
pub struct QuaternionTensor {
    pub r: Tensor,
    pub x: Tensor,
    pub y: Tensor,
    pub z: Tensor,
}

impl QuaternionTensor {
    pub fn new(r: Tensor, x: Tensor, y: Tensor, z: Tensor) -> Result<Self> {
        if r.shape() != x.shape() || r.shape() != y.shape() || r.shape() != z.shape() {
            return Err(dim_err!(
                "quaternion components disagree: {:?} {:?} {:?} {:?}",
                r.shape(),
                x.shape(),
                y.shape(),
                z.shape()
            ));
        }
        let q = QuaternionTensor { r, x, y, z };
        if !q.components().iter().all(|c| c.is_finite()) {
            return Err(Error::Numeric("quaternion tensor has non-finite entries".into()));
        }
        Ok(q)
    }

    pub fn zeros(shape: &[usize]) -> Self {
        QuaternionTensor {
            r: Tensor::zeros(shape),
            x: Tensor::zeros(shape),
            y: Tensor::zeros(shape),
            z: Tensor::zeros(shape),
        }
    }

    pub fn from_quaternions(qs: &[Quaternion]) -> Self {
        let comp = |f: fn(&Quaternion) -> f64| Tensor::from_vec(qs.iter().map(f).collect());
        QuaternionTensor {
            r: comp(|q| q.r),
            x: comp(|q| q.x),
            y: comp(|q| q.y),
            z: comp(|q| q.z),
        }
    }

    pub fn shape(&self) -> &[usize] {
        self.r.shape()
    }

    pub fn components(&self) -> [&Tensor; 4] {
        [&self.r, &self.x, &self.y, &self.z]
    }

    pub fn get(&self, flat: usize) -> Quaternion {
        Quaternion::new(
            self.r.data()[flat],
            self.x.data()[flat],
            self.y.data()[flat],
            self.z.data()[flat],
        )
    }

    fn map_components(&self, f: impl Fn(&Tensor) -> Tensor) -> Self {
        QuaternionTensor {
            r: f(&self.r),
            x: f(&self.x),
            y: f(&self.y),
            z: f(&self.z),
        }
    }
}

/// Unit-wise Hamilton product `a ⊗ b`. `b` may be broadcast over the leading
/// axes of `a` (its shape must be a suffix of `a`'s).
pub fn hamilton_product(a: &QuaternionTensor, b: &QuaternionTensor) -> Result<QuaternionTensor> {
    let (sa, sb) = (a.shape(), b.shape());
    if sb.len() > sa.len() || sa[sa.len() - sb.len()..] != *sb {
        return Err(dim_err!("hamilton product of {:?} and {:?}", sa, sb));
    }
    let n = a.r.numel();
    let period = b.r.numel().max(1);
    let mut out = [vec![0.0; n], vec![0.0; n], vec![0.0; n], vec![0.0; n]];
    for i in 0..n {
        let p = a.get(i) * b.get(i % period);
        out[0][i] = p.r;
        out[1][i] = p.x;
        out[2][i] = p.y;
        out[3][i] = p.z;
    }
    let [r, x, y, z] = out.map(|d| Tensor::new(sa.to_vec(), d).expect("same shape"));
    Ok(QuaternionTensor { r, x, y, z })
}

/// Real scalar nonlinearity applied independently to each component.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Identity,
    Tanh,
}

impl Activation {
    pub fn apply(self, v: f64) -> f64 {
        match self {
            Activation::Relu => v.max(0.0),
            Activation::Identity => v,
            Activation::Tanh => v.tanh(),
        }
    }

    pub(crate) fn on_tape(self, tape: &mut Tape, v: Var) -> Result<Var> {
        match self {
            Activation::Relu => tape.relu(v),
            Activation::Identity => Ok(v),
            Activation::Tanh => tape.tanh(v),
        }
    }
}

impl FromStr for Activation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "relu" => Ok(Activation::Relu),
            "identity" => Ok(Activation::Identity),
            "tanh" => Ok(Activation::Tanh),
            other => Err(Error::Config(format!("unknown activation `{other}`"))),
        }
    }
}

impl fmt::Display for Activation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Activation::Relu => "relu",
            Activation::Identity => "identity",
            Activation::Tanh => "tanh",
        })
    }
}

/// Apply `f` to each of the four components of `q`.
pub fn split_activation(q: &QuaternionTensor, f: Activation) -> QuaternionTensor {
    q.map_components(|t| t.map(|v| f.apply(v)))
}

/// How a quaternion layer combines its weights with its input.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum QuatMode {
    /// Dense Hamilton-structured map: every output unit mixes every input unit
    /// through the 4×4 sign pattern of the real matrix form.
    #[default]
    Hamilton,
    /// Unit-wise product with one weight quaternion per unit (`d_in == d_out`).
    Hadamard,
}

impl FromStr for QuatMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "hamilton" => Ok(QuatMode::Hamilton),
            "hadamard" => Ok(QuatMode::Hadamard),
            other => Err(Error::Config(format!("unknown quat_mode `{other}`"))),
        }
    }
}

impl fmt::Display for QuatMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            QuatMode::Hamilton => "hamilton",
            QuatMode::Hadamard => "hadamard",
        })
    }
}

/// Sign and weight-component index of each block of the Hamilton-structured
/// operator: output component `o` receives `SIGN[o][c] · W[IDX[o][c]] · q_c`.
const BLOCK_IDX: [[usize; 4]; 4] = [[0, 1, 2, 3], [1, 0, 3, 2], [2, 3, 0, 1], [3, 2, 1, 0]];
const BLOCK_SIGN: [[f64; 4]; 4] = [
    [1.0, -1.0, -1.0, -1.0],
    [1.0, 1.0, -1.0, 1.0],
    [1.0, 1.0, 1.0, -1.0],
    [1.0, -1.0, 1.0, 1.0],
];

/// Quaternion-valued affine map between `d_in` and `d_out` quaternion units.
///
/// In [`QuatMode::Hamilton`] the four weights are `[d_out, d_in]` matrices;
/// in [`QuatMode::Hadamard`] they are `[1, d]` rows holding one weight
/// quaternion per unit.
#[derive(Clone, Debug, PartialEq)]
pub struct QuaternionLinear {
    pub w_r: Tensor,
    pub w_x: Tensor,
    pub w_y: Tensor,
    pub w_z: Tensor,
    pub bias: Option<QuaternionTensor>,
    pub mode: QuatMode,
}

impl QuaternionLinear {
    /// Hamilton layer with weights uniform in `±1/√(4·d_in)`.
    pub fn init<R: Rng + ?Sized>(d_in: usize, d_out: usize, bias: bool, rng: &mut R) -> Self {
        let s = 1.0 / ((4 * d_in) as f64).sqrt();
        let mut w = || Tensor::uniform(&[d_out, d_in], s, rng);
        let (w_r, w_x, w_y, w_z) = (w(), w(), w(), w());
        QuaternionLinear {
            w_r,
            w_x,
            w_y,
            w_z,
            bias: bias.then(|| QuaternionTensor::zeros(&[d_out])),
            mode: QuatMode::Hamilton,
        }
    }

    /// Unit-wise layer over `d` units, same init scale as a `d → d` Hamilton layer.
    pub fn init_hadamard<R: Rng + ?Sized>(d: usize, bias: bool, rng: &mut R) -> Self {
        let s = 1.0 / ((4 * d) as f64).sqrt();
        let mut w = || Tensor::uniform(&[1, d], s, rng);
        let (w_r, w_x, w_y, w_z) = (w(), w(), w(), w());
        QuaternionLinear {
            w_r,
            w_x,
            w_y,
            w_z,
            bias: bias.then(|| QuaternionTensor::zeros(&[d])),
            mode: QuatMode::Hadamard,
        }
    }

    pub fn from_weights(w_r: Tensor, w_x: Tensor, w_y: Tensor, w_z: Tensor) -> Result<Self> {
        if w_r.rank() != 2 || w_r.shape() != w_x.shape() || w_r.shape() != w_y.shape() || w_r.shape() != w_z.shape() {
            return Err(dim_err!("quaternion weights must share one rank-2 shape"));
        }
        Ok(QuaternionLinear {
            w_r,
            w_x,
            w_y,
            w_z,
            bias: None,
            mode: QuatMode::Hamilton,
        })
    }

    pub fn weights(&self) -> [&Tensor; 4] {
        [&self.w_r, &self.w_x, &self.w_y, &self.w_z]
    }

    pub fn weights_mut(&mut self) -> [&mut Tensor; 4] {
        [&mut self.w_r, &mut self.w_x, &mut self.w_y, &mut self.w_z]
    }

    pub fn d_in(&self) -> usize {
        self.w_r.shape()[1]
    }

    pub fn d_out(&self) -> usize {
        match self.mode {
            QuatMode::Hamilton => self.w_r.shape()[0],
            QuatMode::Hadamard => self.w_r.shape()[1],
        }
    }

    /// Number of real weight scalars (bias excluded).
    pub fn weight_count(&self) -> usize {
        4 * self.w_r.numel()
    }

    /// Dense `[4·d_out, 4·d_in]` real operator acting on the component-major
    /// vector `[r; x; y; z]` (Hamilton mode only).
    pub fn block_matrix(&self) -> Result<Tensor> {
        if self.mode != QuatMode::Hamilton {
            return Err(Error::Config("block matrix is defined for hamilton layers".into()));
        }
        let (d_out, d_in) = (self.d_out(), self.d_in());
        let w = self.weights();
        let cols = 4 * d_in;
        let mut m = Tensor::zeros(&[4 * d_out, cols]);
        let md = m.data_mut();
        for o in 0..4 {
            for c in 0..4 {
                let src = w[BLOCK_IDX[o][c]].data();
                let sign = BLOCK_SIGN[o][c];
                for i in 0..d_out {
                    for j in 0..d_in {
                        md[(o * d_out + i) * cols + c * d_in + j] = sign * src[i * d_in + j];
                    }
                }
            }
        }
        Ok(m)
    }

    /// Pre-activation output `W ⊗ q (+ bias)`.
    pub fn forward(&self, q: &QuaternionTensor) -> Result<QuaternionTensor> {
        quaternion_linear_forward(self, q)
    }
}

/// Apply a quaternion layer to `q` (last axis = `d_in` units).
pub fn quaternion_linear_forward(
    layer: &QuaternionLinear,
    q: &QuaternionTensor,
) -> Result<QuaternionTensor> {
    let shape = q.shape();
    if shape.last() != Some(&layer.d_in()) {
        return Err(dim_err!(
            "quaternion layer expects {} input units, got shape {:?}",
            layer.d_in(),
            shape
        ));
    }
    let mut out = match layer.mode {
        QuatMode::Hamilton => {
            let d_in = layer.d_in();
            let rows = q.r.numel() / d_in.max(1);
            let mut out_shape = shape.to_vec();
            *out_shape.last_mut().unwrap() = layer.d_out();
            let wt: Vec<Tensor> = layer
                .weights()
                .iter()
                .map(|w| w.transpose2())
                .collect::<Result<_>>()?;
            let inputs: Vec<Tensor> = q
                .components()
                .iter()
                .map(|c| (*c).clone().reshaped(&[rows, d_in]))
                .collect::<Result<_>>()?;
            let mut comps = Vec::with_capacity(4);
            for o in 0..4 {
                let mut acc = Tensor::zeros(&[rows, layer.d_out()]);
                for c in 0..4 {
                    let term = inputs[c].matmul2(&wt[BLOCK_IDX[o][c]])?;
                    let sign = BLOCK_SIGN[o][c];
                    acc.data_mut()
                        .iter_mut()
                        .zip(term.data())
                        .for_each(|(a, t)| *a += sign * t);
                }
                comps.push(acc.reshaped(&out_shape)?);
            }
            let mut it = comps.into_iter();
            QuaternionTensor {
                r: it.next().unwrap(),
                x: it.next().unwrap(),
                y: it.next().unwrap(),
                z: it.next().unwrap(),
            }
        }
        QuatMode::Hadamard => {
            let d = layer.d_in();
            let w = QuaternionTensor {
                r: layer.w_r.clone().reshaped(&[d])?,
                x: layer.w_x.clone().reshaped(&[d])?,
                y: layer.w_y.clone().reshaped(&[d])?,
                z: layer.w_z.clone().reshaped(&[d])?,
            };
            // q's leading axes broadcast against the per-unit weights
            let n = q.r.numel();
            let mut out = QuaternionTensor::zeros(shape);
            for i in 0..n {
                let p = w.get(i % d) * q.get(i);
                out.r.data_mut()[i] = p.r;
                out.x.data_mut()[i] = p.x;
                out.y.data_mut()[i] = p.y;
                out.z.data_mut()[i] = p.z;
            }
            out
        }
    };
    if let Some(b) = &layer.bias {
        let period = b.r.numel().max(1);
        for (o, bc) in [&mut out.r, &mut out.x, &mut out.y, &mut out.z]
            .into_iter()
            .zip(b.components())
        {
            o.data_mut()
                .iter_mut()
                .enumerate()
                .for_each(|(i, v)| *v += bc.data()[i % period]);
        }
    }
    Ok(out)
}

/// Tape handles for the four components of a quaternion-valued activation.
#[derive(Clone, Copy, Debug)]
pub struct QuatVars {
    pub r: Var,
    pub x: Var,
    pub y: Var,
    pub z: Var,
}

impl QuatVars {
    pub fn components(&self) -> [Var; 4] {
        [self.r, self.x, self.y, self.z]
    }
}

/// Tape handles for a quaternion layer's parameters.
#[derive(Clone, Debug)]
pub struct QuatLayerVars {
    pub w: [Var; 4],
    pub bias: Option<[Var; 4]>,
    pub mode: QuatMode,
}

impl QuatLayerVars {
    /// Register `layer`'s weights on `tape` as trainable leaves.
    pub fn register(tape: &mut Tape, layer: &QuaternionLinear) -> Self {
        let w = layer.weights().map(|t| tape.param(t.clone()));
        let bias = layer
            .bias
            .as_ref()
            .map(|b| b.components().map(|t| tape.param(t.clone())));
        QuatLayerVars {
            w,
            bias,
            mode: layer.mode,
        }
    }

    pub fn params(&self) -> Vec<Var> {
        let mut v = self.w.to_vec();
        if let Some(b) = self.bias {
            v.extend(b);
        }
        v
    }

    /// Differentiable counterpart of [`quaternion_linear_forward`].
    pub fn forward(&self, tape: &mut Tape, q: QuatVars) -> Result<QuatVars> {
        let comps = q.components();
        let out: [Var; 4] = match self.mode {
            QuatMode::Hamilton => {
                let shape = tape.shape(comps[0]).to_vec();
                let last = shape.len() - 1;
                let d_in = tape.shape(self.w[0])[1];
                let d_out = tape.shape(self.w[0])[0];
                if shape[last] != d_in {
                    return Err(dim_err!(
                        "quaternion layer expects {} input units, got shape {:?}",
                        d_in,
                        shape
                    ));
                }
                let wt: Vec<Var> = self
                    .w
                    .iter()
                    .map(|&w| tape.transpose(w))
                    .collect::<Result<_>>()?;
                let neg: Vec<Var> = wt
                    .iter()
                    .map(|&w| tape.scale(w, -1.0))
                    .collect::<Result<_>>()?;
                // Block row c of the transposed operator feeds input component c
                // into each output component o.
                let mut block_rows = Vec::with_capacity(4);
                for c in 0..4 {
                    let blocks: Vec<Var> = (0..4)
                        .map(|o| {
                            let k = BLOCK_IDX[o][c];
                            if BLOCK_SIGN[o][c] > 0.0 {
                                wt[k]
                            } else {
                                neg[k]
                            }
                        })
                        .collect();
                    block_rows.push(tape.concat(&blocks, 1)?);
                }
                let op = tape.concat(&block_rows, 0)?;
                let stacked = tape.concat(&comps, last)?;
                let y = tape.matmul(stacked, op)?;
                let mut out = [y; 4];
                for (o, slot) in out.iter_mut().enumerate() {
                    *slot = tape.slice(y, last, o * d_out, d_out)?;
                }
                out
            }
            QuatMode::Hadamard => {
                let d = tape.shape(self.w[0])[1];
                let w: Vec<Var> = self
                    .w
                    .iter()
                    .map(|&w| tape.reshape(w, &[d]))
                    .collect::<Result<_>>()?;
                let mut out = [comps[0]; 4];
                for (o, slot) in out.iter_mut().enumerate() {
                    let mut acc: Option<Var> = None;
                    for c in 0..4 {
                        let term = tape.mul(comps[c], w[BLOCK_IDX[o][c]])?;
                        acc = Some(match acc {
                            None if BLOCK_SIGN[o][c] > 0.0 => term,
                            None => tape.scale(term, -1.0)?,
                            Some(a) if BLOCK_SIGN[o][c] > 0.0 => tape.add(a, term)?,
                            Some(a) => tape.sub(a, term)?,
                        });
                    }
                    *slot = acc.expect("four terms");
                }
                out
            }
        };
        let out = match self.bias {
            Some(b) => {
                let mut biased = out;
                for i in 0..4 {
                    biased[i] = tape.add(out[i], b[i])?;
                }
                biased
            }
            None => out,
        };
        Ok(QuatVars {
            r: out[0],
            x: out[1],
            y: out[2],
            z: out[3],
        })
    }
}

/// Differentiable split activation.
pub fn split_activation_on_tape(tape: &mut Tape, q: QuatVars, f: Activation) -> Result<QuatVars> {
    Ok(QuatVars {
        r: f.on_tape(tape, q.r)?,
        x: f.on_tape(tape, q.x)?,
        y: f.on_tape(tape, q.y)?,
        z: f.on_tape(tape, q.z)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn close(a: Quaternion, b: Quaternion, tol: f64) -> bool {
        (a - b).norm() <= tol
    }

    fn q_strategy() -> impl Strategy<Value = Quaternion> {
        (-3.0..3.0f64, -3.0..3.0f64, -3.0..3.0f64, -3.0..3.0f64)
            .prop_map(|(r, x, y, z)| Quaternion::new(r, x, y, z))
    }

    #[test]
    fn identity_and_basis_products() {
        let p = Quaternion::new(0.3, -1.2, 2.5, 0.7);
        assert_eq!(Quaternion::ONE * p, p);
        assert_eq!(Quaternion::I * Quaternion::J, Quaternion::K);
        let m1 = -Quaternion::ONE;
        assert_eq!(Quaternion::I * Quaternion::I, m1);
        assert_eq!(Quaternion::J * Quaternion::J, m1);
        assert_eq!(Quaternion::K * Quaternion::K, m1);
        assert_eq!(Quaternion::I * Quaternion::J * Quaternion::K, m1);
    }

    #[test]
    fn real_matrix_of_units() {
        let id = quat_to_real_matrix(Quaternion::ONE);
        for (a, row) in id.iter().enumerate() {
            for (b, v) in row.iter().enumerate() {
                assert_eq!(*v, if a == b { 1.0 } else { 0.0 });
            }
        }
        assert_eq!(
            quat_to_real_matrix(Quaternion::I),
            [
                [0.0, -1.0, 0.0, 0.0],
                [1.0, 0.0, 0.0, 0.0],
                [0.0, 0.0, 0.0, -1.0],
                [0.0, 0.0, 1.0, 0.0]
            ]
        );
    }

    #[test]
    fn split_activation_semantics() {
        let q = QuaternionTensor::from_quaternions(&[Quaternion::new(1.0, -1.0, 2.0, -2.0)]);
        assert_eq!(split_activation(&q, Activation::Identity), q);
        let r = split_activation(&q, Activation::Relu);
        assert_eq!(r.get(0), Quaternion::new(1.0, 0.0, 2.0, 0.0));
        let t = split_activation(&q, Activation::Tanh);
        assert!(t.get(0).to_array().iter().all(|v| v.abs() < 1.0));
        assert!(matches!("gelu".parse::<Activation>(), Err(Error::Config(_))));
    }

    #[test]
    fn zero_and_identity_layers() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let q = QuaternionTensor::new(
            Tensor::normal(&[2, 5], 1.0, &mut rng),
            Tensor::normal(&[2, 5], 1.0, &mut rng),
            Tensor::normal(&[2, 5], 1.0, &mut rng),
            Tensor::normal(&[2, 5], 1.0, &mut rng),
        )
        .unwrap();
        let zero = QuaternionLinear::from_weights(
            Tensor::zeros(&[3, 5]),
            Tensor::zeros(&[3, 5]),
            Tensor::zeros(&[3, 5]),
            Tensor::zeros(&[3, 5]),
        )
        .unwrap();
        let out = zero.forward(&q).unwrap();
        assert_eq!(out.shape(), &[2, 3]);
        assert!(out.components().iter().all(|c| c.data().iter().all(|&v| v == 0.0)));

        let ident = QuaternionLinear::from_weights(
            Tensor::eye(5),
            Tensor::zeros(&[5, 5]),
            Tensor::zeros(&[5, 5]),
            Tensor::zeros(&[5, 5]),
        )
        .unwrap();
        assert_eq!(ident.forward(&q).unwrap(), q);

        let bad = QuaternionTensor::zeros(&[2, 4]);
        assert!(matches!(ident.forward(&bad), Err(Error::Dimension(_))));
    }

    #[test]
    fn parameter_sharing_count() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let layer = QuaternionLinear::init(6, 10, false, &mut rng);
        assert_eq!(layer.weight_count(), 4 * 6 * 10);
        let dense = layer.block_matrix().unwrap();
        assert_eq!(dense.numel(), 16 * 6 * 10);
        let s = 1.0 / 24f64.sqrt();
        assert!(layer
            .weights()
            .iter()
            .all(|w| w.data().iter().all(|v| v.abs() <= s)));
    }

    #[test]
    fn mismatched_hamilton_shapes() {
        let a = QuaternionTensor::zeros(&[2, 3]);
        let b = QuaternionTensor::zeros(&[2]);
        assert!(matches!(hamilton_product(&a, &b), Err(Error::Dimension(_))));
        let c = QuaternionTensor::zeros(&[3]);
        assert_eq!(hamilton_product(&a, &c).unwrap().shape(), &[2, 3]);
    }

    #[test]
    fn tape_forward_matches_plain_forward() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for mode in [QuatMode::Hamilton, QuatMode::Hadamard] {
            let mut layer = match mode {
                QuatMode::Hamilton => QuaternionLinear::init(4, 3, true, &mut rng),
                QuatMode::Hadamard => QuaternionLinear::init_hadamard(4, true, &mut rng),
            };
            let d_out = layer.d_out();
            layer.bias = Some(QuaternionTensor {
                r: Tensor::normal(&[d_out], 1.0, &mut rng),
                x: Tensor::normal(&[d_out], 1.0, &mut rng),
                y: Tensor::normal(&[d_out], 1.0, &mut rng),
                z: Tensor::normal(&[d_out], 1.0, &mut rng),
            });
            let q = QuaternionTensor {
                r: Tensor::normal(&[2, 4], 1.0, &mut rng),
                x: Tensor::normal(&[2, 4], 1.0, &mut rng),
                y: Tensor::normal(&[2, 4], 1.0, &mut rng),
                z: Tensor::normal(&[2, 4], 1.0, &mut rng),
            };
            let expect = layer.forward(&q).unwrap();
            let mut tape = Tape::new();
            let lv = QuatLayerVars::register(&mut tape, &layer);
            let qv = q.components().map(|c| tape.constant(c.clone()));
            let out = lv
                .forward(
                    &mut tape,
                    QuatVars {
                        r: qv[0],
                        x: qv[1],
                        y: qv[2],
                        z: qv[3],
                    },
                )
                .unwrap();
            for (v, e) in out.components().iter().zip(expect.components()) {
                assert!(tape.value(*v).max_abs_diff(e) < 1e-12, "{mode}");
            }
        }
    }

    proptest! {
        #[test]
        fn associativity_and_distributivity(a in q_strategy(), b in q_strategy(), c in q_strategy()) {
            prop_assert!(close((a * b) * c, a * (b * c), 1e-10));
            prop_assert!(close(a * (b + c), a * b + a * c, 1e-10));
            prop_assert!(close((a + b) * c, a * c + b * c, 1e-10));
        }

        #[test]
        fn norm_is_multiplicative(a in q_strategy(), b in q_strategy()) {
            let lhs = (a * b).norm();
            let rhs = a.norm() * b.norm();
            prop_assert!((lhs - rhs).abs() <= 1e-10 * rhs.max(1e-300));
        }

        #[test]
        fn product_matches_matrix_form(a in q_strategy(), b in q_strategy()) {
            let m = quat_to_real_matrix(a);
            let v = b.to_array();
            let p = (a * b).to_array();
            for row in 0..4 {
                let mv: f64 = (0..4).map(|c| m[row][c] * v[c]).sum();
                prop_assert!((mv - p[row]).abs() <= 1e-12);
            }
            // first column reproduces the quaternion itself
            let col: Vec<f64> = (0..4).map(|row| m[row][0]).collect();
            prop_assert_eq!(col, a.to_array().to_vec());
        }
    }
}
