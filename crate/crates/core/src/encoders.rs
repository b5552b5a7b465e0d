//! Frozen toy vision and language encoders with deep prompt propagation.
//!
//! Each encoder is a stack of `m` pre-normalized single-head attention +
//! ReLU MLP blocks with residual connections. Weights are a pure function of
//! `(branch, m, d_model, d_joint, seed)` and enter every tape as constants, so
//! they never receive gradients.
//!
//! Deep prompting: for layers `1..=k` the prompt slots of the layer input are
//! overwritten with that layer's learnable prompt set; from layer `k + 1`
//! onward the prompt outputs of the previous layer flow through unchanged.

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{dim_err, Error, Result};
use crate::grad::{Tape, Tensor, Var};

/// Which tower of the toy vision-language model.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Branch {
    Vision,
    Language,
}

impl fmt::Display for Branch {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Branch::Vision => "vision",
            Branch::Language => "language",
        })
    }
}

impl FromStr for Branch {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "vision" => Ok(Branch::Vision),
            "language" => Ok(Branch::Language),
            other => Err(Error::Config(format!("unknown branch `{other}`"))),
        }
    }
}

/// Role of a token inside a [`TokenSequence`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TokenRole {
    ClassToken,
    Patch,
    Text,
    Prompt,
}

/// Token embeddings with a role tag per token.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenSequence {
    pub tokens: Tensor,
    pub roles: Vec<TokenRole>,
}

impl TokenSequence {
    pub fn new(tokens: Tensor, roles: Vec<TokenRole>) -> Result<Self> {
        if tokens.rank() != 2 || tokens.shape()[0] != roles.len() {
            return Err(dim_err!(
                "{} roles for token tensor {:?}",
                roles.len(),
                tokens.shape()
            ));
        }
        Ok(TokenSequence { tokens, roles })
    }

    pub fn len(&self) -> usize {
        self.roles.len()
    }

    pub fn is_empty(&self) -> bool {
        self.roles.is_empty()
    }
}

/// One frozen transformer block. Matrices multiply row vectors from the right
/// (`[in, out]` layout).
#[derive(Clone, Debug, PartialEq)]
pub struct FrozenLayer {
    pub w_q: Tensor,
    pub w_k: Tensor,
    pub w_v: Tensor,
    pub w_o: Tensor,
    pub w_up: Tensor,
    pub w_down: Tensor,
}

/// Output scale of the attention and MLP branches relative to the residual.
const RESIDUAL_GAIN: f64 = 0.5;

impl FrozenLayer {
    fn random(d: usize, rng: &mut ChaCha8Rng) -> Self {
        let d_ff = 2 * d;
        let s = 1.0 / (d as f64).sqrt();
        FrozenLayer {
            w_q: Tensor::normal(&[d, d], s, rng),
            w_k: Tensor::normal(&[d, d], s, rng),
            w_v: Tensor::normal(&[d, d], s, rng),
            w_o: Tensor::normal(&[d, d], RESIDUAL_GAIN * s, rng),
            w_up: Tensor::normal(&[d, d_ff], (2.0 / d as f64).sqrt(), rng),
            w_down: Tensor::normal(&[d_ff, d], RESIDUAL_GAIN / (d_ff as f64).sqrt(), rng),
        }
    }

    /// Block whose attention and MLP branches output zero.
    pub fn identity(d: usize) -> Self {
        FrozenLayer {
            w_q: Tensor::zeros(&[d, d]),
            w_k: Tensor::zeros(&[d, d]),
            w_v: Tensor::zeros(&[d, d]),
            w_o: Tensor::zeros(&[d, d]),
            w_up: Tensor::zeros(&[d, 2 * d]),
            w_down: Tensor::zeros(&[2 * d, d]),
        }
    }

    fn tensors(&self) -> [&Tensor; 6] {
        [
            &self.w_q,
            &self.w_k,
            &self.w_v,
            &self.w_o,
            &self.w_up,
            &self.w_down,
        ]
    }

    /// Apply the block to `x: [S, n, d]`; output has the same shape.
    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let shape = tape.shape(x).to_vec();
        if shape.len() != 3 {
            return Err(dim_err!("frozen layer expects [S, n, d], got {:?}", shape));
        }
        let d = shape[2];
        let root_d = (d as f64).sqrt();
        let [wq, wk, wv, wo, wu, wd] = self.tensors().map(|t| tape.constant(t.clone()));

        let h = rms_norm(tape, x, root_d)?;
        let q = tape.matmul(h, wq)?;
        let k = tape.matmul(h, wk)?;
        let v = tape.matmul(h, wv)?;
        let kt = tape.transpose(k)?;
        let scores = tape.matmul(q, kt)?;
        let scores = tape.scale(scores, 1.0 / root_d)?;
        let attn = tape.softmax_rows(scores)?;
        let mixed = tape.matmul(attn, v)?;
        let mixed = tape.matmul(mixed, wo)?;
        let x = tape.add(x, mixed)?;

        let h = rms_norm(tape, x, root_d)?;
        let up = tape.matmul(h, wu)?;
        let up = tape.relu(up)?;
        let down = tape.matmul(up, wd)?;
        tape.add(x, down)
    }
}

fn rms_norm(tape: &mut Tape, x: Var, root_d: f64) -> Result<Var> {
    let n = tape.l2_normalize(x)?;
    tape.scale(n, root_d)
}

/// Frozen encoder tower.
#[derive(Clone, Debug, PartialEq)]
pub struct FrozenEncoder {
    pub branch: Branch,
    pub d_model: usize,
    pub d_joint: usize,
    pub seed: u64,
    pub layers: Vec<FrozenLayer>,
    /// `[d_model, d_joint]` output projection into the joint embedding space.
    pub projection: Tensor,
    /// Learned-looking class token `c_1` (vision branch only; zeros otherwise).
    pub class_token: Tensor,
}

fn validate_dims(m: usize, d_model: usize, d_joint: usize) -> Result<()> {
    if m == 0 {
        return Err(Error::Config("encoder needs at least one layer".into()));
    }
    if d_model == 0 || d_model % 4 != 0 {
        return Err(Error::Config(format!(
            "d_model must be a positive multiple of 4, got {d_model}"
        )));
    }
    if d_joint == 0 {
        return Err(Error::Config("d_joint must be positive".into()));
    }
    Ok(())
}

/// Build a frozen encoder whose weights depend only on the arguments.
pub fn init_frozen_encoder(
    branch: Branch,
    m: usize,
    d_model: usize,
    d_joint: usize,
    seed: u64,
) -> Result<FrozenEncoder> {
    validate_dims(m, d_model, d_joint)?;
    let stream = match branch {
        Branch::Vision => 0x7669_7369_6f6e,
        Branch::Language => 0x6c61_6e67,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ stream);
    let layers = (0..m).map(|_| FrozenLayer::random(d_model, &mut rng)).collect();
    let projection = Tensor::normal(&[d_model, d_joint], 1.0 / (d_model as f64).sqrt(), &mut rng);
    let class_token = match branch {
        Branch::Vision => Tensor::normal(&[d_model], 1.0, &mut rng),
        Branch::Language => Tensor::zeros(&[d_model]),
    };
    Ok(FrozenEncoder {
        branch,
        d_model,
        d_joint,
        seed,
        layers,
        projection,
        class_token,
    })
}

impl FrozenEncoder {
    /// Encoder whose blocks are all identities and whose projection keeps the
    /// first `d_joint` coordinates.
    pub fn identity(branch: Branch, m: usize, d_model: usize, d_joint: usize) -> Result<Self> {
        validate_dims(m, d_model, d_joint)?;
        let mut projection = Tensor::zeros(&[d_model, d_joint]);
        for i in 0..d_model.min(d_joint) {
            projection.data_mut()[i * d_joint + i] = 1.0;
        }
        Ok(FrozenEncoder {
            branch,
            d_model,
            d_joint,
            seed: 0,
            layers: (0..m).map(|_| FrozenLayer::identity(d_model)).collect(),
            projection,
            class_token: Tensor::zeros(&[d_model]),
        })
    }

    pub fn depth(&self) -> usize {
        self.layers.len()
    }

    /// FNV-1a digest over the bit patterns of every frozen tensor.
    pub fn checksum(&self) -> u64 {
        let mut h = Fnv::new();
        for layer in &self.layers {
            for t in layer.tensors() {
                h.tensor(t);
            }
        }
        h.tensor(&self.projection);
        h.tensor(&self.class_token);
        h.finish()
    }

    /// Run the stack over `content: [S, n_c, d]` with deep prompts.
    ///
    /// `prompts[i]` is layer `i + 1`'s prompt set, either `[n_p, d]` (shared by
    /// all sequences) or `[S, n_p, d]`; `k` must equal `prompts.len()`. With
    /// `k == 0` no prompt tokens are inserted. Returns `[S, n_c + n_p, d]`.
    pub fn propagate(&self, tape: &mut Tape, content: Var, prompts: &[Var], k: usize) -> Result<Var> {
        if prompts.len() != k {
            return Err(Error::Usage(format!(
                "{} prompt sets supplied for prompt depth {}",
                prompts.len(),
                k
            )));
        }
        if k > self.depth() {
            return Err(Error::Usage(format!(
                "prompt depth {} exceeds encoder depth {}",
                k,
                self.depth()
            )));
        }
        let shape = tape.shape(content).to_vec();
        if shape.len() != 3 || shape[2] != self.d_model {
            return Err(dim_err!(
                "encoder input must be [S, n, {}], got {:?}",
                self.d_model,
                shape
            ));
        }
        let (s, n_c) = (shape[0], shape[1]);
        let mut x = content;
        for (i, layer) in self.layers.iter().enumerate() {
            if i < k {
                let p = broadcast_prompt(tape, prompts[i], s, self.d_model)?;
                if i > 0 {
                    let kept = tape.slice(x, 1, 0, n_c)?;
                    x = tape.concat(&[kept, p], 1)?;
                } else {
                    x = tape.concat(&[x, p], 1)?;
                }
            }
            x = layer.forward(tape, x)?;
        }
        Ok(x)
    }

    /// Normalize token `index` of every sequence and project it into the
    /// joint space: `[S, n, d] -> [S, d_joint]`.
    pub fn pool_and_project(&self, tape: &mut Tape, x: Var, index: usize) -> Result<Var> {
        let shape = tape.shape(x).to_vec();
        let tok = tape.slice(x, 1, index, 1)?;
        let tok = tape.reshape(tok, &[shape[0], shape[2]])?;
        let tok = rms_norm(tape, tok, (shape[2] as f64).sqrt())?;
        let proj = tape.constant(self.projection.clone());
        tape.matmul(tok, proj)
    }
}

fn broadcast_prompt(tape: &mut Tape, p: Var, s: usize, d: usize) -> Result<Var> {
    let shape = tape.shape(p).to_vec();
    match shape.as_slice() {
        [n_p, dd] if *dd == d => {
            let p3 = tape.reshape(p, &[1, *n_p, d])?;
            tape.index_select(p3, vec![0; s])
        }
        [ss, _, dd] if *ss == s && *dd == d => Ok(p),
        _ => Err(dim_err!(
            "prompt set must be [n_p, {d}] or [{s}, n_p, {d}], got {:?}",
            shape
        )),
    }
}

/// Language tower: `w1: [S, n_tokens, d]` holds `[T_d, C_t]` per sequence.
/// Returns the pooled last-text-token embedding `[S, d_joint]`.
pub fn language_forward(
    enc: &FrozenEncoder,
    tape: &mut Tape,
    w1: Var,
    prompts: &[Var],
    k: usize,
) -> Result<Var> {
    if enc.branch != Branch::Language {
        return Err(Error::Usage("language_forward needs a language encoder".into()));
    }
    let n_text = *tape
        .shape(w1)
        .get(1)
        .ok_or_else(|| dim_err!("language input must be rank 3"))?;
    if n_text == 0 {
        return Err(dim_err!("language input has no tokens"));
    }
    let out = enc.propagate(tape, w1, prompts, k)?;
    enc.pool_and_project(tape, out, n_text - 1)
}

/// Vision tower: `e1: [B, n_patches, d]` patch embeddings. The frozen class
/// token is appended after the patches; returns its projected final
/// embedding `[B, d_joint]`.
pub fn vision_forward(
    enc: &FrozenEncoder,
    tape: &mut Tape,
    e1: Var,
    prompts: &[Var],
    k: usize,
) -> Result<Var> {
    if enc.branch != Branch::Vision {
        return Err(Error::Usage("vision_forward needs a vision encoder".into()));
    }
    let shape = tape.shape(e1).to_vec();
    if shape.len() != 3 {
        return Err(dim_err!("vision input must be [B, n_patches, d], got {:?}", shape));
    }
    let cls = tape.constant(enc.class_token.clone().reshaped(&[1, 1, enc.d_model])?);
    let cls = tape.index_select(cls, vec![0; shape[0]])?;
    let content = tape.concat(&[e1, cls], 1)?;
    let out = enc.propagate(tape, content, prompts, k)?;
    enc.pool_and_project(tape, out, shape[1])
}

/// Frozen linear patch embedding from domain-feature space into the vision
/// tower's token space.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchStem {
    pub weight: Tensor,
}

impl PatchStem {
    pub fn new(d_domain: usize, d_model: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5354_454d);
        PatchStem {
            weight: Tensor::normal(&[d_domain, d_model], 1.0, &mut rng),
        }
    }

    /// `[B, n_patches, d_domain] -> [B, n_patches, d_model]`.
    pub fn embed(&self, patches: &Tensor) -> Result<Tensor> {
        let s = patches.shape();
        if s.len() != 3 || s[2] != self.weight.shape()[0] {
            return Err(dim_err!(
                "patch stem expects [B, n, {}], got {:?}",
                self.weight.shape()[0],
                s
            ));
        }
        let flat = patches.clone().reshaped(&[s[0] * s[1], s[2]])?;
        flat.matmul2(&self.weight)?
            .reshaped(&[s[0], s[1], self.weight.shape()[1]])
    }
}

/// Rank of the latent space shared by class names and class appearance.
pub const SEMANTIC_RANK: usize = 5;
const VOCAB_SEED: u64 = 0x766f_6361_62;
/// Weight of the name-specific component of a text token relative to the
/// shared semantic component.
const IDIOSYNCRATIC_WEIGHT: f64 = 0.25;

/// FNV-1a over the UTF-8 bytes of `name`.
pub fn name_seed(name: &str) -> u64 {
    let mut h = Fnv::new();
    h.bytes(name.as_bytes());
    h.finish()
}

/// Latent semantic code of a class name: `SEMANTIC_RANK` standard normals
/// seeded by the name.
pub fn semantic_code(name: &str) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(name_seed(name));
    Tensor::normal(&[SEMANTIC_RANK], 1.0, &mut rng).into_data()
}

/// Fixed text embedding `C_t` of a class name: one `d_model` vector per
/// template token position, a deterministic function of the name.
///
/// Each token is a fixed per-position linear image of the name's semantic
/// code plus a smaller name-seeded component, so names that share latent
/// structure share token structure.
pub fn class_text_tokens(name: &str, n_tokens: usize, d_model: usize) -> Tensor {
    let code = semantic_code(name);
    let scale = 1.0 / (SEMANTIC_RANK as f64).sqrt();
    let mut out = Vec::with_capacity(n_tokens * d_model);
    for p in 0..n_tokens {
        let mut vocab_rng = ChaCha8Rng::seed_from_u64(VOCAB_SEED.wrapping_add(p as u64));
        let basis = Tensor::normal(&[d_model, SEMANTIC_RANK], 1.0, &mut vocab_rng);
        let mut own_rng =
            ChaCha8Rng::seed_from_u64(name_seed(name).rotate_left(17) ^ (p as u64 + 1));
        let own = Tensor::normal(&[d_model], 1.0, &mut own_rng);
        for i in 0..d_model {
            let shared: f64 = (0..SEMANTIC_RANK)
                .map(|r| basis.data()[i * SEMANTIC_RANK + r] * code[r])
                .sum();
            out.push(shared * scale + IDIOSYNCRATIC_WEIGHT * own.data()[i]);
        }
    }
    Tensor::new(vec![n_tokens, d_model], out).expect("sized above")
}

/// Incremental FNV-1a 64-bit hasher.
pub(crate) struct Fnv(u64);

impl Fnv {
    pub(crate) fn new() -> Self {
        Fnv(0xcbf2_9ce4_8422_2325)
    }

    pub(crate) fn bytes(&mut self, bytes: &[u8]) {
        for b in bytes {
            self.0 ^= *b as u64;
            self.0 = self.0.wrapping_mul(0x0100_0000_01b3);
        }
    }

    pub(crate) fn tensor(&mut self, t: &Tensor) {
        for d in t.shape() {
            self.bytes(&(*d as u64).to_le_bytes());
        }
        for v in t.data() {
            self.bytes(&v.to_bits().to_le_bytes());
        }
    }

    pub(crate) fn finish(&self) -> u64 {
        self.0
    }
}
