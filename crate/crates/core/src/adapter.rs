//! Domain projection and quaternion fusion of domain features with learnable
//! language context.
//!
//! The projected domain feature `F̂_d` and the learnable context `T_c` occupy
//! two orthogonal quaternion axes (`r` and `i`, with `j = k = 0`). A quaternion
//! layer `Q_t` mixes them and the real part of its activated output becomes
//! the domain context `T_d`. Vision prompts are built the same way from each
//! layer's language prompt `P_l^i` through `Q_v^i`, without noise.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{dim_err, Error, Result};
use crate::grad::{Tape, Tensor, Var};
use crate::qnum::{
    quaternion_linear_forward, split_activation, split_activation_on_tape, Activation,
    QuatLayerVars, QuatMode, QuatVars, QuaternionLinear, QuaternionTensor,
};

/// Where Gaussian noise is injected into the quaternion hidden space.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum NoiseMode {
    /// Into the language fusion only (the default recipe).
    #[default]
    Language,
    Off,
    /// Into the vision-prompt fusion only; exists for the noise-placement ablation.
    Vision,
}

impl FromStr for NoiseMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "language" | "lb" => Ok(NoiseMode::Language),
            "off" | "none" => Ok(NoiseMode::Off),
            "vision" | "vb" => Ok(NoiseMode::Vision),
            other => Err(Error::Config(format!("unknown noise_mode `{other}`"))),
        }
    }
}

impl fmt::Display for NoiseMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            NoiseMode::Language => "language",
            NoiseMode::Off => "off",
            NoiseMode::Vision => "vision",
        })
    }
}

/// How the noise amplitude is derived from `F̂_d`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum NoiseScale {
    /// One scalar: the mean over all elements of `F̂_d`.
    #[default]
    Scalar,
    /// Each feature dimension scaled by its own value of `F̂_d`.
    PerDim,
}

impl FromStr for NoiseScale {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "scalar" => Ok(NoiseScale::Scalar),
            "per_dim" => Ok(NoiseScale::PerDim),
            other => Err(Error::Config(format!("unknown noise_scale `{other}`"))),
        }
    }
}

impl fmt::Display for NoiseScale {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            NoiseScale::Scalar => "scalar",
            NoiseScale::PerDim => "per_dim",
        })
    }
}

/// Plain trainable affine map `x W + b` with `W: [d_in, d_out]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Linear {
    pub fn init<R: Rng + ?Sized>(d_in: usize, d_out: usize, rng: &mut R) -> Self {
        let s = 1.0 / (d_in as f64).sqrt();
        Linear {
            weight: Tensor::uniform(&[d_in, d_out], s, rng),
            bias: Tensor::zeros(&[d_out]),
        }
    }

    pub fn apply(&self, x: &Tensor) -> Result<Tensor> {
        let mut y = x.matmul2(&self.weight)?;
        let b = self.bias.data();
        let w = b.len();
        y.data_mut()
            .iter_mut()
            .enumerate()
            .for_each(|(i, v)| *v += b[i % w]);
        Ok(y)
    }
}

/// Two linear layers with a ReLU between them, `d_domain → d_model`.
#[derive(Clone, Debug, PartialEq)]
pub struct DomainProjector {
    pub first: Linear,
    pub second: Linear,
}

impl DomainProjector {
    pub fn init<R: Rng + ?Sized>(d_domain: usize, d_model: usize, rng: &mut R) -> Self {
        DomainProjector {
            first: Linear::init(d_domain, d_model, rng),
            second: Linear::init(d_model, d_model, rng),
        }
    }

    pub fn d_domain(&self) -> usize {
        self.first.weight.shape()[0]
    }

    pub fn d_model(&self) -> usize {
        self.second.weight.shape()[1]
    }
}

/// Mean over patches of `F_d: [n_patches, d_domain]`, then the two-layer
/// projection. Returns `F̂_d: [d_model]`.
pub fn project_domain_features(projector: &DomainProjector, f_d: &Tensor) -> Result<Tensor> {
    let pooled = mean_pool_patches(f_d)?;
    let h = projector.first.apply(&pooled.reshaped(&[1, projector.d_domain()])?)?;
    let h = h.map(|v| v.max(0.0));
    projector
        .second
        .apply(&h)?
        .reshaped(&[projector.d_model()])
}

/// Mean over the leading (patch) axis of `[n_patches, d]`.
pub fn mean_pool_patches(f_d: &Tensor) -> Result<Tensor> {
    if f_d.rank() != 2 {
        return Err(dim_err!("domain features must be [n_patches, d], got {:?}", f_d.shape()));
    }
    let (n, d) = (f_d.shape()[0], f_d.shape()[1]);
    if n == 0 {
        return Err(Error::Usage("domain features need at least one patch".into()));
    }
    let mut out = vec![0.0; d];
    for row in f_d.data().chunks(d) {
        out.iter_mut().zip(row).for_each(|(o, v)| *o += v);
    }
    out.iter_mut().for_each(|v| *v /= n as f64);
    Ok(Tensor::from_vec(out))
}

/// Draw `N_G = Mean(F̂_d) · N_θ` with shape `[n_ctx, d_model]`.
pub fn sample_noise<R: Rng + ?Sized>(
    f_hat: &Tensor,
    n_ctx: usize,
    scale: NoiseScale,
    rng: &mut R,
) -> Tensor {
    let d = f_hat.numel();
    let mean = f_hat.mean();
    let data = (0..n_ctx * d)
        .map(|i| {
            let z: f64 = StandardNormal.sample(rng);
            match scale {
                NoiseScale::Scalar => mean * z,
                NoiseScale::PerDim => f_hat.data()[i % d] * z,
            }
        })
        .collect();
    Tensor::new(vec![n_ctx, d], data).expect("sized above")
}

/// Quaternion input `r = T_c + N_G`, `i = F̂_d` on every context row, `j = k = 0`.
/// With `eq9_literal` the sum `F̂_d + T_c + N_G` goes on `r` and `i` is zero.
pub fn build_language_quaternion(
    t_c: &Tensor,
    f_hat: &Tensor,
    noise: Option<&Tensor>,
    eq9_literal: bool,
) -> Result<QuaternionTensor> {
    if t_c.rank() != 2 || f_hat.numel() != t_c.shape()[1] {
        return Err(dim_err!(
            "context {:?} and domain feature {:?} widths differ",
            t_c.shape(),
            f_hat.shape()
        ));
    }
    let d = f_hat.numel();
    let mut r = t_c.clone();
    if let Some(n) = noise {
        if n.shape() != t_c.shape() {
            return Err(dim_err!("noise {:?} vs context {:?}", n.shape(), t_c.shape()));
        }
        r.data_mut().iter_mut().zip(n.data()).for_each(|(a, b)| *a += b);
    }
    let broadcast = Tensor::new(
        t_c.shape().to_vec(),
        (0..t_c.numel()).map(|i| f_hat.data()[i % d]).collect(),
    )?;
    let zeros = Tensor::zeros(t_c.shape());
    if eq9_literal {
        r.data_mut()
            .iter_mut()
            .zip(broadcast.data())
            .for_each(|(a, b)| *a += b);
        QuaternionTensor::new(r, zeros.clone(), zeros.clone(), zeros)
    } else {
        QuaternionTensor::new(r, broadcast, zeros.clone(), zeros)
    }
}

/// Fusion layer in place of a quaternion layer: either the quaternion layer
/// itself, or (quaternion ablation) a real linear map on `concat(r, i)` with
/// the same weight count whose first half of outputs is the real part.
#[derive(Clone, Debug, PartialEq)]
pub enum FusionLayer {
    Quaternion(QuaternionLinear),
    /// `[2·d, 2·d]` weight applied to `concat(r, i)`.
    Real(Tensor),
}

impl FusionLayer {
    pub fn init<R: Rng + ?Sized>(
        d: usize,
        use_quaternion: bool,
        mode: QuatMode,
        rng: &mut R,
    ) -> Self {
        if !use_quaternion {
            let s = 1.0 / ((4 * d) as f64).sqrt();
            return FusionLayer::Real(Tensor::uniform(&[2 * d, 2 * d], s, rng));
        }
        match mode {
            QuatMode::Hamilton => FusionLayer::Quaternion(QuaternionLinear::init(d, d, false, rng)),
            QuatMode::Hadamard => FusionLayer::Quaternion(QuaternionLinear::init_hadamard(d, false, rng)),
        }
    }

    pub fn tensors(&self) -> Vec<&Tensor> {
        match self {
            FusionLayer::Quaternion(q) => {
                let mut v: Vec<&Tensor> = q.weights().to_vec();
                if let Some(b) = &q.bias {
                    v.extend(b.components());
                }
                v
            }
            FusionLayer::Real(w) => vec![w],
        }
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        match self {
            FusionLayer::Quaternion(q) => {
                let QuaternionLinear {
                    w_r,
                    w_x,
                    w_y,
                    w_z,
                    bias,
                    ..
                } = q;
                let mut v = vec![w_r, w_x, w_y, w_z];
                if let Some(b) = bias {
                    v.extend([&mut b.r, &mut b.x, &mut b.y, &mut b.z]);
                }
                v
            }
            FusionLayer::Real(w) => vec![w],
        }
    }

    pub fn weight_count(&self) -> usize {
        match self {
            FusionLayer::Quaternion(q) => q.weight_count(),
            FusionLayer::Real(w) => w.numel(),
        }
    }

    /// Real part of `relu(layer(q))`, computed without a tape.
    pub fn fuse(&self, q: &QuaternionTensor) -> Result<Tensor> {
        match self {
            FusionLayer::Quaternion(layer) => {
                let out = quaternion_linear_forward(layer, q)?;
                Ok(split_activation(&out, Activation::Relu).r)
            }
            FusionLayer::Real(w) => {
                let shape = q.shape().to_vec();
                let d = *shape.last().unwrap();
                let rows = q.r.numel() / d.max(1);
                let mut cat = Vec::with_capacity(rows * 2 * d);
                for i in 0..rows {
                    cat.extend_from_slice(q.r.row(i));
                    cat.extend_from_slice(q.x.row(i));
                }
                let y = Tensor::new(vec![rows, 2 * d], cat)?.matmul2(w)?;
                let mut real = Vec::with_capacity(rows * d);
                for i in 0..rows {
                    real.extend(y.row(i)[..d].iter().map(|v| v.max(0.0)));
                }
                Tensor::new(shape, real)
            }
        }
    }
}

/// Apply `Q_t` to the language quaternion; `T_d` is the real component of the
/// ReLU-activated output.
pub fn domain_context(q_t: &FusionLayer, q_l: &QuaternionTensor) -> Result<Tensor> {
    q_t.fuse(q_l)
}

/// Vision prompt `P_v^i` from `P_l^i` and `F̂_d` through `Q_v^i`. No noise.
pub fn vision_prompt(
    q_v: &FusionLayer,
    p_l: &Tensor,
    f_hat: &Tensor,
    eq9_literal: bool,
) -> Result<Tensor> {
    let q = build_language_quaternion(p_l, f_hat, None, eq9_literal)?;
    q_v.fuse(&q)
}

/// Every trainable parameter of the prompt learner.
#[derive(Clone, Debug, PartialEq)]
pub struct PromptState {
    /// Learnable context `T_c: [n_ctx, d_model]`.
    pub t_c: Tensor,
    /// Per-layer language prompts `P_l^1..P_l^k`, each `[n_p, d_model]`.
    pub p_l: Vec<Tensor>,
    pub q_t: FusionLayer,
    /// Per-layer vision-prompt fusion layers `Q_v^1..Q_v^k`.
    pub q_v: Vec<FusionLayer>,
    pub projector: DomainProjector,
    pub noise_mode: NoiseMode,
}

/// Shape and structure choices for a fresh [`PromptState`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PromptShape {
    pub d_domain: usize,
    pub d_model: usize,
    pub n_ctx: usize,
    pub n_p: usize,
    pub depth: usize,
    pub use_quaternion: bool,
    pub quat_mode: QuatMode,
    pub noise_mode: NoiseMode,
}

/// Standard deviation of the context and prompt initializations, a tenth of
/// the frozen token-embedding scale.
const PROMPT_INIT_STD: f64 = 0.1;

impl PromptState {
    pub fn init<R: Rng + ?Sized>(shape: &PromptShape, rng: &mut R) -> Self {
        let d = shape.d_model;
        let t_c = Tensor::normal(&[shape.n_ctx, d], PROMPT_INIT_STD, rng);
        let p_l = (0..shape.depth)
            .map(|_| Tensor::normal(&[shape.n_p, d], PROMPT_INIT_STD, rng))
            .collect();
        let q_t = FusionLayer::init(d, shape.use_quaternion, shape.quat_mode, rng);
        let q_v = (0..shape.depth)
            .map(|_| FusionLayer::init(d, shape.use_quaternion, shape.quat_mode, rng))
            .collect();
        let projector = DomainProjector::init(shape.d_domain, d, rng);
        PromptState {
            t_c,
            p_l,
            q_t,
            q_v,
            projector,
            noise_mode: shape.noise_mode,
        }
    }

    pub fn depth(&self) -> usize {
        self.p_l.len()
    }

    /// Named trainable tensors in a fixed order.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut v = vec![("t_c".to_string(), &self.t_c)];
        for (i, p) in self.p_l.iter().enumerate() {
            v.push((format!("p_l.{i}"), p));
        }
        for (j, t) in self.q_t.tensors().into_iter().enumerate() {
            v.push((format!("q_t.{j}"), t));
        }
        for (i, q) in self.q_v.iter().enumerate() {
            for (j, t) in q.tensors().into_iter().enumerate() {
                v.push((format!("q_v.{i}.{j}"), t));
            }
        }
        let p = &self.projector;
        v.push(("projector.w1".into(), &p.first.weight));
        v.push(("projector.b1".into(), &p.first.bias));
        v.push(("projector.w2".into(), &p.second.weight));
        v.push(("projector.b2".into(), &p.second.bias));
        v
    }

    /// Trainable tensors, same order as [`PromptState::named_tensors`].
    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut v = vec![&mut self.t_c];
        v.extend(self.p_l.iter_mut());
        v.extend(self.q_t.tensors_mut());
        for q in self.q_v.iter_mut() {
            v.extend(q.tensors_mut());
        }
        let p = &mut self.projector;
        v.push(&mut p.first.weight);
        v.push(&mut p.first.bias);
        v.push(&mut p.second.weight);
        v.push(&mut p.second.bias);
        v
    }

    pub fn parameter_count(&self) -> usize {
        self.named_tensors().iter().map(|(_, t)| t.numel()).sum()
    }

    pub fn checksum(&self) -> u64 {
        let mut h = crate::encoders::Fnv::new();
        for (_, t) in self.named_tensors() {
            h.tensor(t);
        }
        h.finish()
    }
}

/// Parameter group a trainable tensor belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ParamGroup {
    Context,
    LanguagePrompts,
    LanguageFusion,
    VisionFusion,
    Projector,
}

impl ParamGroup {
    pub fn of(name: &str) -> Self {
        match name.split('.').next().unwrap_or("") {
            "t_c" => ParamGroup::Context,
            "p_l" => ParamGroup::LanguagePrompts,
            "q_t" => ParamGroup::LanguageFusion,
            "q_v" => ParamGroup::VisionFusion,
            _ => ParamGroup::Projector,
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            ParamGroup::Context => "T_c",
            ParamGroup::LanguagePrompts => "P_l",
            ParamGroup::LanguageFusion => "Q_t",
            ParamGroup::VisionFusion => "Q_v",
            ParamGroup::Projector => "projector",
        }
    }
}

/// Tape handles of a [`FusionLayer`]'s parameters.
#[derive(Clone, Debug)]
pub enum FusionVars {
    Quaternion(QuatLayerVars),
    Real(Var),
}

/// [`PromptState`] registered on a tape, one handle per trainable tensor in
/// [`PromptState::named_tensors`] order.
#[derive(Clone, Debug)]
pub struct PromptVars {
    pub all: Vec<Var>,
    pub t_c: Var,
    pub p_l: Vec<Var>,
    pub q_t: FusionVars,
    pub q_v: Vec<FusionVars>,
    pub projector: [Var; 4],
}

fn register_fusion(tape: &mut Tape, layer: &FusionLayer, all: &mut Vec<Var>) -> FusionVars {
    match layer {
        FusionLayer::Quaternion(q) => {
            let v = QuatLayerVars::register(tape, q);
            all.extend(v.params());
            FusionVars::Quaternion(v)
        }
        FusionLayer::Real(weight) => {
            let w = tape.param(weight.clone());
            all.push(w);
            FusionVars::Real(w)
        }
    }
}

impl PromptVars {
    /// Register every trainable tensor of `state` as a tape parameter.
    pub fn register(tape: &mut Tape, state: &PromptState) -> Self {
        let mut all = Vec::new();
        let t_c = tape.param(state.t_c.clone());
        all.push(t_c);
        let p_l: Vec<Var> = state.p_l.iter().map(|p| tape.param(p.clone())).collect();
        all.extend(&p_l);
        let q_t = register_fusion(tape, &state.q_t, &mut all);
        let q_v = state
            .q_v
            .iter()
            .map(|q| register_fusion(tape, q, &mut all))
            .collect();
        let p = &state.projector;
        let projector = [
            tape.param(p.first.weight.clone()),
            tape.param(p.first.bias.clone()),
            tape.param(p.second.weight.clone()),
            tape.param(p.second.bias.clone()),
        ];
        all.extend(projector);
        PromptVars {
            all,
            t_c,
            p_l,
            q_t,
            q_v,
            projector,
        }
    }

    /// Register with explicit values, in [`PromptState::named_tensors`] order
    /// (used by finite-difference checks that perturb individual tensors).
    pub fn from_vars(state: &PromptState, vars: &[Var]) -> Result<Self> {
        let mut it = vars.iter().copied();
        let mut next = || it.next().ok_or_else(|| Error::Usage("too few parameter vars".into()));
        let t_c = next()?;
        let p_l = (0..state.p_l.len()).map(|_| next()).collect::<Result<Vec<_>>>()?;
        let fusion = |layer: &FusionLayer, next: &mut dyn FnMut() -> Result<Var>| -> Result<FusionVars> {
            Ok(match layer {
                FusionLayer::Quaternion(q) => {
                    let w = [next()?, next()?, next()?, next()?];
                    let bias = match q.bias {
                        Some(_) => Some([next()?, next()?, next()?, next()?]),
                        None => None,
                    };
                    FusionVars::Quaternion(QuatLayerVars {
                        w,
                        bias,
                        mode: q.mode,
                    })
                }
                FusionLayer::Real(_) => FusionVars::Real(next()?),
            })
        };
        let q_t = fusion(&state.q_t, &mut next)?;
        let q_v = state
            .q_v
            .iter()
            .map(|q| fusion(q, &mut next))
            .collect::<Result<Vec<_>>>()?;
        let projector = [next()?, next()?, next()?, next()?];
        Ok(PromptVars {
            all: vars.to_vec(),
            t_c,
            p_l,
            q_t,
            q_v,
            projector,
        })
    }
}

impl FusionVars {
    /// Real part of `relu(layer([r, i, 0, 0]))` on the tape.
    pub fn fuse(&self, tape: &mut Tape, r: Var, i: Var) -> Result<Var> {
        match self {
            FusionVars::Quaternion(layer) => {
                let zeros = tape.constant(Tensor::zeros(tape.shape(r)));
                let q = QuatVars {
                    r,
                    x: i,
                    y: zeros,
                    z: zeros,
                };
                let out = layer.forward(tape, q)?;
                let act = split_activation_on_tape(tape, out, Activation::Relu)?;
                Ok(act.r)
            }
            FusionVars::Real(w) => {
                let shape = tape.shape(r).to_vec();
                let last = shape.len() - 1;
                let d = shape[last];
                let cat = tape.concat(&[r, i], last)?;
                let y = tape.matmul(cat, *w)?;
                let real = tape.slice(y, last, 0, d)?;
                tape.relu(real)
            }
        }
    }
}

/// Options controlling one adapter forward pass.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdapterOptions {
    pub eq9_literal: bool,
    /// Build vision prompts (false leaves every `Q_v` out of the graph).
    pub vision_prompts: bool,
}

/// Tape outputs of the adapter for a batch of `B` images.
#[derive(Clone, Debug)]
pub struct AdapterOutput {
    /// `F̂_d: [B, d_model]`.
    pub f_hat: Var,
    /// `T_d: [B, n_ctx, d_model]`.
    pub t_d: Var,
    /// `P_v^i: [B, n_p, d_model]`, empty when vision prompts are disabled.
    pub p_v: Vec<Var>,
}

/// Repeat `[B, d]` rows across `n` positions: `[B, n, d]`.
fn repeat_rows(tape: &mut Tape, x: Var, n: usize) -> Result<Var> {
    let shape = tape.shape(x).to_vec();
    let (b, d) = (shape[0], shape[1]);
    let flat_idx: Vec<usize> = (0..b).flat_map(|i| std::iter::repeat(i).take(n)).collect();
    let rep = tape.index_select(x, flat_idx)?;
    tape.reshape(rep, &[b, n, d])
}

/// Repeat a `[n, d]` tensor for each of `b` batch entries: `[b, n, d]`.
fn repeat_batch(tape: &mut Tape, x: Var, b: usize) -> Result<Var> {
    let shape = tape.shape(x).to_vec();
    let x3 = tape.reshape(x, &[1, shape[0], shape[1]])?;
    tape.index_select(x3, vec![0; b])
}

/// Run the projector and fusion layers for a batch.
///
/// `pooled: [B, d_domain]` is the patch-mean of each image's domain features.
/// `ctx_noise` and `prompt_noise` are `[B, n_ctx, d]` / `[B, n_p, d]` draws to
/// add to the real axis (already scaled), or `None`.
pub fn adapter_forward(
    tape: &mut Tape,
    vars: &PromptVars,
    pooled: Var,
    ctx_noise: Option<Var>,
    prompt_noise: Option<Var>,
    opts: AdapterOptions,
) -> Result<AdapterOutput> {
    let [w1, b1, w2, b2] = vars.projector;
    let h = tape.matmul(pooled, w1)?;
    let h = tape.add(h, b1)?;
    let h = tape.relu(h)?;
    let h = tape.matmul(h, w2)?;
    let f_hat = tape.add(h, b2)?;
    let b = tape.shape(pooled)[0];

    let fuse_input = |tape: &mut Tape, real: Var, noise: Option<Var>| -> Result<(Var, Var)> {
        let n = tape.shape(real)[0];
        let mut r = repeat_batch(tape, real, b)?;
        if let Some(nz) = noise {
            r = tape.add(r, nz)?;
        }
        let i = repeat_rows(tape, f_hat, n)?;
        if opts.eq9_literal {
            let summed = tape.add(r, i)?;
            let zeros = tape.constant(Tensor::zeros(tape.shape(summed)));
            Ok((summed, zeros))
        } else {
            Ok((r, i))
        }
    };

    let (r, i) = fuse_input(tape, vars.t_c, ctx_noise)?;
    let t_d = vars.q_t.fuse(tape, r, i)?;

    let mut p_v = Vec::new();
    if opts.vision_prompts {
        for (p, q) in vars.p_l.iter().zip(&vars.q_v) {
            let (r, i) = fuse_input(tape, *p, prompt_noise)?;
            p_v.push(q.fuse(tape, r, i)?);
        }
    }
    Ok(AdapterOutput { f_hat, t_d, p_v })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn shape() -> PromptShape {
        PromptShape {
            d_domain: 6,
            d_model: 8,
            n_ctx: 3,
            n_p: 2,
            depth: 2,
            use_quaternion: true,
            quat_mode: QuatMode::Hamilton,
            noise_mode: NoiseMode::Off,
        }
    }

    #[test]
    fn zero_projector_gives_zero() {
        let mut p = DomainProjector::init(5, 8, &mut rng(1));
        p.first.weight = Tensor::zeros(&[5, 8]);
        p.second.weight = Tensor::zeros(&[8, 8]);
        let out = project_domain_features(&p, &Tensor::zeros(&[3, 5])).unwrap();
        assert_eq!(out, Tensor::zeros(&[8]));
    }

    #[test]
    fn identity_projector_on_constant_patches() {
        let p = DomainProjector {
            first: Linear {
                weight: Tensor::eye(4),
                bias: Tensor::zeros(&[4]),
            },
            second: Linear {
                weight: Tensor::eye(4),
                bias: Tensor::zeros(&[4]),
            },
        };
        let row = [0.5, 1.5, 2.0, 0.25];
        let patches = Tensor::new(vec![3, 4], row.repeat(3)).unwrap();
        let out = project_domain_features(&p, &patches).unwrap();
        assert_eq!(out.data(), &row);
    }

    #[test]
    fn projector_matches_direct_recomputation() {
        let mut r = rng(9);
        let p = DomainProjector::init(5, 4, &mut r);
        let mut p = p;
        p.first.bias = Tensor::normal(&[4], 0.3, &mut r);
        p.second.bias = Tensor::normal(&[4], 0.3, &mut r);
        let f = Tensor::normal(&[7, 5], 1.0, &mut r);
        let got = project_domain_features(&p, &f).unwrap();
        // independent scalar loops
        let mut pooled = [0.0; 5];
        for i in 0..7 {
            for j in 0..5 {
                pooled[j] += f.data()[i * 5 + j] / 7.0;
            }
        }
        let mut hidden = [0.0; 4];
        for o in 0..4 {
            let mut s = p.first.bias.data()[o];
            for j in 0..5 {
                s += pooled[j] * p.first.weight.data()[j * 4 + o];
            }
            hidden[o] = s.max(0.0);
        }
        for o in 0..4 {
            let mut s = p.second.bias.data()[o];
            for j in 0..4 {
                s += hidden[j] * p.second.weight.data()[j * 4 + o];
            }
            assert!((got.data()[o] - s).abs() < 1e-12);
        }
        assert!(matches!(
            project_domain_features(&p, &Tensor::zeros(&[0, 5])),
            Err(Error::Usage(_))
        ));
    }

    #[test]
    fn noise_scaling() {
        let zero = sample_noise(&Tensor::zeros(&[4]), 3, NoiseScale::Scalar, &mut rng(2));
        assert!(zero.data().iter().all(|&v| v == 0.0));

        let ones = sample_noise(&Tensor::full(&[4], 1.0), 3, NoiseScale::Scalar, &mut rng(2));
        let mut r = rng(2);
        let raw: Vec<f64> = (0..12).map(|_| StandardNormal.sample(&mut r)).collect();
        assert_eq!(ones.data(), raw.as_slice());
        assert_eq!(ones.shape(), &[3, 4]);

        let again = sample_noise(&Tensor::full(&[4], 1.0), 3, NoiseScale::Scalar, &mut rng(2));
        assert_eq!(ones, again);
    }

    #[test]
    fn language_quaternion_layout() {
        let t_c = Tensor::zeros(&[4, 64]);
        let f_hat = Tensor::normal(&[64], 1.0, &mut rng(5));
        let q = build_language_quaternion(&t_c, &f_hat, None, false).unwrap();
        for c in q.components() {
            assert_eq!(c.shape(), &[4, 64]);
        }
        assert!(q.r.data().iter().all(|&v| v == 0.0));
        for row in 0..4 {
            assert_eq!(q.x.row(row), f_hat.data());
        }
        assert!(q.y.data().iter().chain(q.z.data()).all(|&v| v == 0.0));
        assert!(matches!(
            build_language_quaternion(&t_c, &Tensor::zeros(&[63]), None, false),
            Err(Error::Dimension(_))
        ));
        let lit = build_language_quaternion(&t_c, &f_hat, None, true).unwrap();
        assert_eq!(lit.r.row(2), f_hat.data());
        assert!(lit.x.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn zero_fusion_weights_give_zero() {
        let mut r = rng(4);
        let mut state = PromptState::init(&shape(), &mut r);
        for t in state.q_t.tensors_mut() {
            t.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        let f_hat = Tensor::normal(&[8], 1.0, &mut r);
        let q = build_language_quaternion(&state.t_c, &f_hat, None, false).unwrap();
        let t_d = domain_context(&state.q_t, &q).unwrap();
        assert!(t_d.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn domain_context_matches_block_oracle() {
        let mut r = rng(8);
        let state = PromptState::init(&shape(), &mut r);
        let f_hat = Tensor::normal(&[8], 1.0, &mut r);
        let t_c = Tensor::normal(&[3, 8], 1.0, &mut r);
        let q = build_language_quaternion(&t_c, &f_hat, None, false).unwrap();
        let got = domain_context(&state.q_t, &q).unwrap();
        let FusionLayer::Quaternion(layer) = &state.q_t else { panic!() };
        let block = layer.block_matrix().unwrap();
        for row in 0..3 {
            let mut v = t_c.row(row).to_vec();
            v.extend_from_slice(f_hat.data());
            v.extend(std::iter::repeat(0.0).take(16));
            for o in 0..8 {
                let s: f64 = (0..32).map(|c| block.data()[o * 32 + c] * v[c]).sum();
                assert!((got.data()[row * 8 + o] - s.max(0.0)).abs() < 1e-12);
            }
        }
        // deterministic without noise
        assert_eq!(got, domain_context(&state.q_t, &q).unwrap());
    }

    #[test]
    fn vision_prompt_zero_and_repeatable() {
        let mut r = rng(12);
        let mut state = PromptState::init(&shape(), &mut r);
        let f_hat = Tensor::normal(&[8], 1.0, &mut r);
        let a = vision_prompt(&state.q_v[0], &state.p_l[0], &f_hat, false).unwrap();
        let b = vision_prompt(&state.q_v[0], &state.p_l[0], &f_hat, false).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.shape(), &[2, 8]);
        for t in state.q_v[1].tensors_mut() {
            t.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        let z = vision_prompt(&state.q_v[1], &state.p_l[1], &f_hat, false).unwrap();
        assert!(z.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn tape_adapter_matches_plain_path() {
        let mut r = rng(21);
        for use_q in [true, false] {
            for literal in [false, true] {
                let mut sh = shape();
                sh.use_quaternion = use_q;
                let state = PromptState::init(&sh, &mut r);
                let patches = Tensor::normal(&[3, 6], 1.0, &mut r);
                let f_hat = project_domain_features(&state.projector, &patches).unwrap();
                let q = build_language_quaternion(&state.t_c, &f_hat, None, literal).unwrap();
                let t_d = domain_context(&state.q_t, &q).unwrap();
                let p_v0 = vision_prompt(&state.q_v[0], &state.p_l[0], &f_hat, literal).unwrap();

                let mut tape = Tape::new();
                let vars = PromptVars::register(&mut tape, &state);
                let pooled = mean_pool_patches(&patches).unwrap().reshaped(&[1, 6]).unwrap();
                let pooled = tape.constant(pooled);
                let out = adapter_forward(
                    &mut tape,
                    &vars,
                    pooled,
                    None,
                    None,
                    AdapterOptions {
                        eq9_literal: literal,
                        vision_prompts: true,
                    },
                )
                .unwrap();
                assert!(tape.value(out.t_d).max_abs_diff(&t_d) < 1e-12);
                assert!(tape.value(out.p_v[0]).max_abs_diff(&p_v0) < 1e-12);
                assert!(tape.value(out.f_hat).max_abs_diff(&f_hat) < 1e-12);
            }
        }
    }

    #[test]
    fn ablation_layer_has_matched_weight_count() {
        let mut r = rng(1);
        let q = FusionLayer::init(16, true, QuatMode::Hamilton, &mut r);
        let real = FusionLayer::init(16, false, QuatMode::Hamilton, &mut r);
        assert_eq!(q.weight_count(), real.weight_count());
    }

    #[test]
    fn named_tensors_align_with_mut_order() {
        let mut state = PromptState::init(&shape(), &mut rng(3));
        let shapes: Vec<Vec<usize>> = state
            .named_tensors()
            .iter()
            .map(|(_, t)| t.shape().to_vec())
            .collect();
        let mut_shapes: Vec<Vec<usize>> =
            state.tensors_mut().iter().map(|t| t.shape().to_vec()).collect();
        assert_eq!(shapes, mut_shapes);
        let mut tape = Tape::new();
        assert_eq!(PromptVars::register(&mut tape, &state).all.len(), shapes.len());
    }
}
