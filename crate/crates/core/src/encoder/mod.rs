//! A small pre-norm vision transformer mapping RGB patches to embeddings,
//! with exact reverse-mode gradients.
//!
//! Pipeline per image: non-overlapping square tokens, linear projection plus
//! learned positional embedding, `depth` blocks of
//! `x + attn(ln(x))` / `x + mlp(ln(x))`, a final layer norm, mean pooling
//! over tokens and a linear pooling projection (`head`). An optional
//! two-layer projector follows the head.

mod ops;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::stain_math::RgbPatch;
use ops::*;

const INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EncoderConfig {
    pub depth: usize,
    pub heads: usize,
    pub embed_dim: usize,
    /// Side length of each square token, in pixels.
    pub patch_size_tokens: usize,
    /// Side length of the input image, in pixels.
    pub input_side: usize,
    /// Hidden width of the feed-forward layer as a multiple of `embed_dim`.
    pub mlp_ratio: usize,
    /// Width of the optional projector head; `None` disables it.
    pub projector_dim: Option<usize>,
    pub seed: u64,
}

impl Default for EncoderConfig {
    /// 12 blocks, 3 heads, width 192 on 256-pixel inputs with 16-pixel tokens.
    fn default() -> Self {
        Self {
            depth: 12,
            heads: 3,
            embed_dim: 192,
            patch_size_tokens: 16,
            input_side: 256,
            mlp_ratio: 4,
            projector_dim: None,
            seed: 0,
        }
    }
}

impl EncoderConfig {
    /// Desk-scale configuration used by tests: 2 blocks, 1 head, width 16,
    /// 32-pixel inputs with 8-pixel tokens.
    pub fn tiny() -> Self {
        Self {
            depth: 2,
            heads: 1,
            embed_dim: 16,
            patch_size_tokens: 8,
            input_side: 32,
            mlp_ratio: 4,
            projector_dim: None,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidArgument(msg));
        if self.depth == 0 {
            return bad("encoder depth must be at least 1".into());
        }
        if self.heads == 0 || self.embed_dim == 0 || self.embed_dim % self.heads != 0 {
            return bad(format!(
                "embed_dim {} must be a positive multiple of heads {}",
                self.embed_dim, self.heads
            ));
        }
        if self.patch_size_tokens == 0
            || self.input_side == 0
            || self.input_side % self.patch_size_tokens != 0
        {
            return bad(format!(
                "input_side {} must be a positive multiple of patch_size_tokens {}",
                self.input_side, self.patch_size_tokens
            ));
        }
        if self.mlp_ratio == 0 {
            return bad("mlp_ratio must be at least 1".into());
        }
        if self.projector_dim == Some(0) {
            return bad("projector_dim must be positive when set".into());
        }
        Ok(())
    }

    pub fn num_tokens(&self) -> usize {
        let per_side = self.input_side / self.patch_size_tokens;
        per_side * per_side
    }

    pub fn token_dim(&self) -> usize {
        self.patch_size_tokens * self.patch_size_tokens * 3
    }

    pub fn mlp_dim(&self) -> usize {
        self.embed_dim * self.mlp_ratio
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.heads
    }

    /// Width of the vectors [`forward`] returns.
    pub fn output_dim(&self) -> usize {
        self.projector_dim.unwrap_or(self.embed_dim)
    }

    /// Parameter count implied by [`param_specs`].
    pub fn param_count(&self) -> usize {
        param_specs(self)
            .iter()
            .map(|s| s.shape.iter().product::<usize>())
            .sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Init {
    Normal,
    Zeros,
    Ones,
}

struct ParamSpec {
    path: String,
    shape: Vec<usize>,
    init: Init,
}

const PER_BLOCK: usize = 12;

fn param_specs(cfg: &EncoderConfig) -> Vec<ParamSpec> {
    let (d, m, p, t) = (cfg.embed_dim, cfg.mlp_dim(), cfg.token_dim(), cfg.num_tokens());
    let spec = |path: String, shape: Vec<usize>, init| ParamSpec { path, shape, init };
    let mut out = vec![
        spec("patch_embed.weight".into(), vec![p, d], Init::Normal),
        spec("patch_embed.bias".into(), vec![d], Init::Zeros),
        spec("pos_embed".into(), vec![t, d], Init::Normal),
    ];
    for i in 0..cfg.depth {
        let b = |name: &str| format!("blocks.{i}.{name}");
        out.extend([
            spec(b("norm1.scale"), vec![d], Init::Ones),
            spec(b("norm1.bias"), vec![d], Init::Zeros),
            spec(b("attn.qkv.weight"), vec![d, 3 * d], Init::Normal),
            spec(b("attn.qkv.bias"), vec![3 * d], Init::Zeros),
            spec(b("attn.proj.weight"), vec![d, d], Init::Normal),
            spec(b("attn.proj.bias"), vec![d], Init::Zeros),
            spec(b("norm2.scale"), vec![d], Init::Ones),
            spec(b("norm2.bias"), vec![d], Init::Zeros),
            spec(b("mlp.fc1.weight"), vec![d, m], Init::Normal),
            spec(b("mlp.fc1.bias"), vec![m], Init::Zeros),
            spec(b("mlp.fc2.weight"), vec![m, d], Init::Normal),
            spec(b("mlp.fc2.bias"), vec![d], Init::Zeros),
        ]);
    }
    out.push(spec("norm.scale".into(), vec![d], Init::Ones));
    out.push(spec("norm.bias".into(), vec![d], Init::Zeros));
    out.push(spec("head.weight".into(), vec![d, d], Init::Normal));
    out.push(spec("head.bias".into(), vec![d], Init::Zeros));
    if let Some(pd) = cfg.projector_dim {
        out.extend([
            spec("projector.fc1.weight".into(), vec![d, pd], Init::Normal),
            spec("projector.fc1.bias".into(), vec![pd], Init::Zeros),
            spec("projector.fc2.weight".into(), vec![pd, pd], Init::Normal),
            spec("projector.fc2.bias".into(), vec![pd], Init::Zeros),
        ]);
    }
    out
}

// Tensor indices, fixed by the order in `param_specs`.
const PATCH_W: usize = 0;
const PATCH_B: usize = 1;
const POS: usize = 2;
const BLOCKS: usize = 3;
const N1_S: usize = 0;
const N1_B: usize = 1;
const QKV_W: usize = 2;
const QKV_B: usize = 3;
const PROJ_W: usize = 4;
const PROJ_B: usize = 5;
const N2_S: usize = 6;
const N2_B: usize = 7;
const FC1_W: usize = 8;
const FC1_B: usize = 9;
const FC2_W: usize = 10;
const FC2_B: usize = 11;

fn block_base(i: usize) -> usize {
    BLOCKS + PER_BLOCK * i
}

fn final_norm(cfg: &EncoderConfig) -> usize {
    BLOCKS + PER_BLOCK * cfg.depth
}

/// One named parameter array.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamTensor {
    pub path: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

/// All encoder parameters, in a fixed order keyed by stable paths. Gradients
/// share this type.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams {
    config: EncoderConfig,
    tensors: Vec<ParamTensor>,
}

impl EncoderParams {
    /// Assembles parameters from tensors, checking paths and shapes against
    /// the configuration.
    pub fn from_tensors(config: EncoderConfig, tensors: Vec<ParamTensor>) -> Result<Self> {
        config.validate()?;
        let specs = param_specs(&config);
        if specs.len() != tensors.len() {
            return Err(Error::dims(
                format!("{} parameter tensors", specs.len()),
                tensors.len(),
            ));
        }
        for (s, t) in specs.iter().zip(&tensors) {
            if s.path != t.path || s.shape != t.shape {
                return Err(Error::dims(
                    format!("{} {:?}", s.path, s.shape),
                    format!("{} {:?}", t.path, t.shape),
                ));
            }
            if t.data.len() != s.shape.iter().product::<usize>() {
                return Err(Error::dims(s.shape.iter().product::<usize>(), t.data.len()));
            }
            if t.data.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite(t.path.clone()));
            }
        }
        Ok(Self { config, tensors })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    pub fn tensors(&self) -> &[ParamTensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [ParamTensor] {
        &mut self.tensors
    }

    pub fn get(&self, path: &str) -> Option<&ParamTensor> {
        self.tensors.iter().find(|t| t.path == path)
    }

    pub fn param_count(&self) -> usize {
        self.tensors.iter().map(|t| t.data.len()).sum()
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            config: self.config,
            tensors: self
                .tensors
                .iter()
                .map(|t| ParamTensor {
                    path: t.path.clone(),
                    shape: t.shape.clone(),
                    data: vec![0.0; t.data.len()],
                })
                .collect(),
        }
    }

    /// Elementwise `self += other`; shapes must match.
    pub fn add_assign(&mut self, other: &EncoderParams) {
        for (a, b) in self.tensors.iter_mut().zip(&other.tensors) {
            add_assign(&mut a.data, &b.data);
        }
    }

    pub fn scale(&mut self, s: f64) {
        self.tensors
            .iter_mut()
            .flat_map(|t| t.data.iter_mut())
            .for_each(|v| *v *= s);
    }

    /// Global L2 norm over all entries.
    pub fn l2_norm(&self) -> f64 {
        self.tensors
            .iter()
            .flat_map(|t| &t.data)
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
    }

    /// Flat view `(tensor, offset)` to entry index; used for coordinate
    /// probes.
    pub fn locate(&self, mut flat: usize) -> Option<(usize, usize)> {
        for (i, t) in self.tensors.iter().enumerate() {
            if flat < t.data.len() {
                return Some((i, flat));
            }
            flat -= t.data.len();
        }
        None
    }

    fn w(&self, idx: usize) -> &[f64] {
        &self.tensors[idx].data
    }

    fn w_mut(&mut self, idx: usize) -> &mut [f64] {
        &mut self.tensors[idx].data
    }
}

/// Deterministic initialisation: truncated normal (std 0.02, cut at two
/// standard deviations) for weights and positional embeddings, zero biases,
/// unit normalisation scales.
pub fn init_params(cfg: &EncoderConfig) -> Result<EncoderParams> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let normal = Normal::new(0.0, INIT_STD).expect("valid std");
    let tensors = param_specs(cfg)
        .into_iter()
        .map(|s| {
            let n = s.shape.iter().product();
            let data = match s.init {
                Init::Zeros => vec![0.0; n],
                Init::Ones => vec![1.0; n],
                Init::Normal => (0..n)
                    .map(|_| loop {
                        let v: f64 = normal.sample(&mut rng);
                        if v.abs() <= 2.0 * INIT_STD {
                            break v;
                        }
                    })
                    .collect(),
            };
            ParamTensor {
                path: s.path,
                shape: s.shape,
                data,
            }
        })
        .collect();
    Ok(EncoderParams {
        config: *cfg,
        tensors,
    })
}

/// Row-per-sample matrix of embeddings.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingBatch {
    rows: usize,
    cols: usize,
    values: Vec<f64>,
}

impl EmbeddingBatch {
    pub fn new(rows: usize, cols: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != rows * cols {
            return Err(Error::dims(rows * cols, values.len()));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("embedding batch".into()));
        }
        Ok(Self { rows, cols, values })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::InvalidArgument("ragged embedding rows".into()));
        }
        Self::new(rows.len(), cols, rows.concat())
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            values: vec![0.0; rows * cols],
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.values[r * self.cols..(r + 1) * self.cols]
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn to_rows(&self) -> Vec<Vec<f64>> {
        self.values.chunks_exact(self.cols.max(1)).map(<[f64]>::to_vec).collect()
    }
}

/// Splits an image into row-major tokens, pixels scaled to `[0, 1]`.
fn tokenize(cfg: &EncoderConfig, img: &RgbPatch) -> Vec<f64> {
    let p = cfg.patch_size_tokens;
    let per_side = cfg.input_side / p;
    let side = cfg.input_side;
    let px = img.pixels();
    let mut out = Vec::with_capacity(cfg.num_tokens() * cfg.token_dim());
    for ty in 0..per_side {
        for tx in 0..per_side {
            for dy in 0..p {
                let row = (ty * p + dy) * side + tx * p;
                for v in &px[row..row + p] {
                    out.extend(v.iter().map(|&c| c as f64 / 255.0));
                }
            }
        }
    }
    out
}

struct BlockCache {
    norm1: NormCache,
    h1: Vec<f64>,
    qkv: Vec<f64>,
    /// Attention probabilities, `heads x T x T`.
    probs: Vec<f64>,
    attn_out: Vec<f64>,
    norm2: NormCache,
    h2: Vec<f64>,
    pre_act: Vec<f64>,
    act: Vec<f64>,
}

struct Cache {
    tokens: Vec<f64>,
    blocks: Vec<BlockCache>,
    final_norm: NormCache,
    pooled: Vec<f64>,
    head: Vec<f64>,
    proj_pre: Vec<f64>,
    proj_act: Vec<f64>,
}

fn check_image(cfg: &EncoderConfig, img: &RgbPatch) -> Result<()> {
    if img.width() != cfg.input_side || img.height() != cfg.input_side {
        return Err(Error::dims(
            format!("{0}x{0} input", cfg.input_side),
            format!("{}x{}", img.width(), img.height()),
        ));
    }
    Ok(())
}

fn forward_one(params: &EncoderParams, img: &RgbPatch) -> (Vec<f64>, Cache) {
    let cfg = &params.config;
    let (t, d, m, nh, dh) = (
        cfg.num_tokens(),
        cfg.embed_dim,
        cfg.mlp_dim(),
        cfg.heads,
        cfg.head_dim(),
    );
    let tokens = tokenize(cfg, img);
    let mut x = matmul(&tokens, params.w(PATCH_W), t, cfg.token_dim(), d);
    add_row_bias(&mut x, params.w(PATCH_B));
    add_assign(&mut x, params.w(POS));

    let scale = 1.0 / (dh as f64).sqrt();
    let mut blocks = Vec::with_capacity(cfg.depth);
    for bi in 0..cfg.depth {
        let base = block_base(bi);
        let (h1, norm1) = layer_norm(&x, d, params.w(base + N1_S), params.w(base + N1_B));
        let mut qkv = matmul(&h1, params.w(base + QKV_W), t, d, 3 * d);
        add_row_bias(&mut qkv, params.w(base + QKV_B));

        let mut probs = vec![0.0; nh * t * t];
        let mut attn_out = vec![0.0; t * d];
        for h in 0..nh {
            let pr = &mut probs[h * t * t..(h + 1) * t * t];
            for i in 0..t {
                let q = &qkv[i * 3 * d + h * dh..i * 3 * d + (h + 1) * dh];
                for j in 0..t {
                    let k = &qkv[j * 3 * d + d + h * dh..j * 3 * d + d + (h + 1) * dh];
                    pr[i * t + j] = q.iter().zip(k).map(|(a, b)| a * b).sum::<f64>() * scale;
                }
            }
            softmax_rows(pr, t);
            for i in 0..t {
                let out = &mut attn_out[i * d + h * dh..i * d + (h + 1) * dh];
                for j in 0..t {
                    let a = pr[i * t + j];
                    let v = &qkv[j * 3 * d + 2 * d + h * dh..j * 3 * d + 2 * d + (h + 1) * dh];
                    for (o, vv) in out.iter_mut().zip(v) {
                        *o += a * vv;
                    }
                }
            }
        }
        let mut proj = matmul(&attn_out, params.w(base + PROJ_W), t, d, d);
        add_row_bias(&mut proj, params.w(base + PROJ_B));
        add_assign(&mut x, &proj);

        let (h2, norm2) = layer_norm(&x, d, params.w(base + N2_S), params.w(base + N2_B));
        let mut pre_act = matmul(&h2, params.w(base + FC1_W), t, d, m);
        add_row_bias(&mut pre_act, params.w(base + FC1_B));
        let act: Vec<f64> = pre_act.iter().map(|&u| gelu(u)).collect();
        let mut mlp = matmul(&act, params.w(base + FC2_W), t, m, d);
        add_row_bias(&mut mlp, params.w(base + FC2_B));
        add_assign(&mut x, &mlp);

        blocks.push(BlockCache {
            norm1,
            h1,
            qkv,
            probs,
            attn_out,
            norm2,
            h2,
            pre_act,
            act,
        });
    }

    let fnorm = final_norm(cfg);
    let (y, final_norm_cache) = layer_norm(&x, d, params.w(fnorm), params.w(fnorm + 1));
    let mut pooled = vec![0.0; d];
    column_sum_acc(&y, &mut pooled);
    pooled.iter_mut().for_each(|v| *v /= t as f64);
    let mut head = matmul(&pooled, params.w(fnorm + 2), 1, d, d);
    add_assign(&mut head, params.w(fnorm + 3));

    let (out, proj_pre, proj_act) = match cfg.projector_dim {
        Some(pd) => {
            let pi = fnorm + 4;
            let mut pre = matmul(&head, params.w(pi), 1, d, pd);
            add_assign(&mut pre, params.w(pi + 1));
            let act: Vec<f64> = pre.iter().map(|&u| gelu(u)).collect();
            let mut out = matmul(&act, params.w(pi + 2), 1, pd, pd);
            add_assign(&mut out, params.w(pi + 3));
            (out, pre, act)
        }
        None => (head.clone(), vec![], vec![]),
    };

    (
        out,
        Cache {
            tokens,
            blocks,
            final_norm: final_norm_cache,
            pooled,
            head,
            proj_pre,
            proj_act,
        },
    )
}

fn backward_one(params: &EncoderParams, cache: &Cache, upstream: &[f64], grads: &mut EncoderParams) {
    let cfg = params.config;
    let (t, d, m, nh, dh) = (
        cfg.num_tokens(),
        cfg.embed_dim,
        cfg.mlp_dim(),
        cfg.heads,
        cfg.head_dim(),
    );
    let fnorm = final_norm(&cfg);

    let dhead = match cfg.projector_dim {
        Some(pd) => {
            let pi = fnorm + 4;
            matmul_at_b_acc(&cache.proj_act, upstream, 1, pd, pd, grads.w_mut(pi + 2));
            add_assign(grads.w_mut(pi + 3), upstream);
            let dact = matmul_a_bt(upstream, params.w(pi + 2), 1, pd, pd);
            let dpre: Vec<f64> = dact
                .iter()
                .zip(&cache.proj_pre)
                .map(|(g, &u)| g * gelu_grad(u))
                .collect();
            matmul_at_b_acc(&cache.head, &dpre, 1, d, pd, grads.w_mut(pi));
            add_assign(grads.w_mut(pi + 1), &dpre);
            matmul_a_bt(&dpre, params.w(pi), 1, pd, d)
        }
        None => upstream.to_vec(),
    };
    matmul_at_b_acc(&cache.pooled, &dhead, 1, d, d, grads.w_mut(fnorm + 2));
    add_assign(grads.w_mut(fnorm + 3), &dhead);
    let dpooled = matmul_a_bt(&dhead, params.w(fnorm + 2), 1, d, d);

    let dy: Vec<f64> = (0..t)
        .flat_map(|_| dpooled.iter().map(|g| g / t as f64))
        .collect();
    let mut dx = {
        let (ds, db) = two_mut(grads, fnorm, fnorm + 1);
        layer_norm_backward(&dy, d, params.w(fnorm), &cache.final_norm, ds, db)
    };

    let scale = 1.0 / (dh as f64).sqrt();
    for bi in (0..cfg.depth).rev() {
        let base = block_base(bi);
        let bc = &cache.blocks[bi];

        // x_out = x_mid + fc2(gelu(fc1(ln2(x_mid))))
        matmul_at_b_acc(&bc.act, &dx, t, m, d, grads.w_mut(base + FC2_W));
        column_sum_acc(&dx, grads.w_mut(base + FC2_B));
        let dact = matmul_a_bt(&dx, params.w(base + FC2_W), t, d, m);
        let dpre: Vec<f64> = dact
            .iter()
            .zip(&bc.pre_act)
            .map(|(g, &u)| g * gelu_grad(u))
            .collect();
        matmul_at_b_acc(&bc.h2, &dpre, t, d, m, grads.w_mut(base + FC1_W));
        column_sum_acc(&dpre, grads.w_mut(base + FC1_B));
        let dh2 = matmul_a_bt(&dpre, params.w(base + FC1_W), t, m, d);
        let dnorm2 = {
            let (ds, db) = two_mut(grads, base + N2_S, base + N2_B);
            layer_norm_backward(&dh2, d, params.w(base + N2_S), &bc.norm2, ds, db)
        };
        add_assign(&mut dx, &dnorm2);

        // x_mid = x_in + proj(attn(ln1(x_in)))
        matmul_at_b_acc(&bc.attn_out, &dx, t, d, d, grads.w_mut(base + PROJ_W));
        column_sum_acc(&dx, grads.w_mut(base + PROJ_B));
        let dattn = matmul_a_bt(&dx, params.w(base + PROJ_W), t, d, d);

        let mut dqkv = vec![0.0; t * 3 * d];
        let mut dp = vec![0.0; t * t];
        for h in 0..nh {
            let pr = &bc.probs[h * t * t..(h + 1) * t * t];
            let qo = h * dh;
            let ko = d + h * dh;
            let vo = 2 * d + h * dh;
            // dP = dO V^T, dV = P^T dO
            for i in 0..t {
                let dout = &dattn[i * d + qo..i * d + qo + dh];
                for j in 0..t {
                    let v = &bc.qkv[j * 3 * d + vo..j * 3 * d + vo + dh];
                    dp[i * t + j] = dout.iter().zip(v).map(|(a, b)| a * b).sum();
                    let p = pr[i * t + j];
                    let dv = &mut dqkv[j * 3 * d + vo..j * 3 * d + vo + dh];
                    for (g, o) in dv.iter_mut().zip(dout) {
                        *g += p * o;
                    }
                }
            }
            // softmax backward, then dQ = dS K * scale, dK = dS^T Q * scale
            for i in 0..t {
                let row = &pr[i * t..(i + 1) * t];
                let dot: f64 = row.iter().zip(&dp[i * t..(i + 1) * t]).map(|(a, b)| a * b).sum();
                for j in 0..t {
                    let ds = row[j] * (dp[i * t + j] - dot) * scale;
                    if ds == 0.0 {
                        continue;
                    }
                    for c in 0..dh {
                        let kj = bc.qkv[j * 3 * d + ko + c];
                        let qi = bc.qkv[i * 3 * d + qo + c];
                        dqkv[i * 3 * d + qo + c] += ds * kj;
                        dqkv[j * 3 * d + ko + c] += ds * qi;
                    }
                }
            }
        }
        matmul_at_b_acc(&bc.h1, &dqkv, t, d, 3 * d, grads.w_mut(base + QKV_W));
        column_sum_acc(&dqkv, grads.w_mut(base + QKV_B));
        let dh1 = matmul_a_bt(&dqkv, params.w(base + QKV_W), t, 3 * d, d);
        let dnorm1 = {
            let (ds, db) = two_mut(grads, base + N1_S, base + N1_B);
            layer_norm_backward(&dh1, d, params.w(base + N1_S), &bc.norm1, ds, db)
        };
        add_assign(&mut dx, &dnorm1);
    }

    add_assign(grads.w_mut(POS), &dx);
    column_sum_acc(&dx, grads.w_mut(PATCH_B));
    matmul_at_b_acc(&cache.tokens, &dx, t, cfg.token_dim(), d, grads.w_mut(PATCH_W));
}

fn two_mut(p: &mut EncoderParams, a: usize, b: usize) -> (&mut [f64], &mut [f64]) {
    debug_assert!(a < b);
    let (lo, hi) = p.tensors.split_at_mut(b);
    (&mut lo[a].data, &mut hi[0].data)
}

/// Embeds a batch of images; rows follow input order.
pub fn forward(params: &EncoderParams, images: &[RgbPatch]) -> Result<EmbeddingBatch> {
    let cfg = params.config;
    for img in images {
        check_image(&cfg, img)?;
    }
    let rows: Vec<Vec<f64>> = images
        .par_iter()
        .map(|img| forward_one(params, img).0)
        .collect();
    let values = rows.concat();
    EmbeddingBatch::new(images.len(), cfg.output_dim(), values)
}

/// Embeddings plus the gradient of `<embeddings, upstream>` with respect to
/// every parameter. Per-image gradients are summed in input order.
pub fn forward_with_gradients(
    params: &EncoderParams,
    images: &[RgbPatch],
    upstream: &EmbeddingBatch,
) -> Result<(EmbeddingBatch, EncoderParams)> {
    let cfg = params.config;
    for img in images {
        check_image(&cfg, img)?;
    }
    if upstream.rows() != images.len() || upstream.cols() != cfg.output_dim() {
        return Err(Error::dims(
            format!("{}x{} upstream gradient", images.len(), cfg.output_dim()),
            format!("{}x{}", upstream.rows(), upstream.cols()),
        ));
    }
    // Bounded chunks keep memory flat for wide configurations.
    const CHUNK: usize = 16;
    let mut grads = params.zeros_like();
    let mut outputs = Vec::with_capacity(images.len() * cfg.output_dim());
    for (ci, chunk) in images.chunks(CHUNK).enumerate() {
        let parts: Vec<(Vec<f64>, EncoderParams)> = chunk
            .par_iter()
            .enumerate()
            .map(|(k, img)| {
                let (out, cache) = forward_one(params, img);
                let mut g = params.zeros_like();
                backward_one(params, &cache, upstream.row(ci * CHUNK + k), &mut g);
                (out, g)
            })
            .collect();
        for (out, g) in parts {
            outputs.extend(out);
            grads.add_assign(&g);
        }
    }
    Ok((
        EmbeddingBatch::new(images.len(), cfg.output_dim(), outputs)?,
        grads,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    fn random_images(rng: &mut ChaCha8Rng, n: usize, side: usize) -> Vec<RgbPatch> {
        (0..n)
            .map(|_| {
                let px = (0..side * side).map(|_| [rng.random(), rng.random(), rng.random()]).collect();
                RgbPatch::new(side, side, px).unwrap()
            })
            .collect()
    }

    /// Closed-form parameter count, written out independently of
    /// `param_specs`.
    fn closed_form_count(cfg: &EncoderConfig) -> usize {
        let d = cfg.embed_dim;
        let m = cfg.mlp_ratio * d;
        let p = cfg.patch_size_tokens.pow(2) * 3;
        let t = (cfg.input_side / cfg.patch_size_tokens).pow(2);
        let block = 2 * d + (d * 3 * d + 3 * d) + (d * d + d) + 2 * d + (d * m + m) + (m * d + d);
        let proj = cfg.projector_dim.map_or(0, |q| d * q + q + q * q + q);
        p * d + d + t * d + cfg.depth * block + 2 * d + (d * d + d) + proj
    }

    #[test]
    fn tiny_parameter_count() {
        let cfg = EncoderConfig::tiny();
        let params = init_params(&cfg).unwrap();
        assert_eq!(params.param_count(), 9936 + 16 * 16 + 16);
        assert_eq!(params.param_count(), closed_form_count(&cfg));
        for depth in 1..4 {
            for (heads, dim) in [(1, 8), (2, 8), (3, 12)] {
                let c = EncoderConfig {
                    depth,
                    heads,
                    embed_dim: dim,
                    projector_dim: if depth == 2 { Some(5) } else { None },
                    ..EncoderConfig::tiny()
                };
                assert_eq!(c.param_count(), closed_form_count(&c));
            }
        }
    }

    #[test]
    fn default_config_is_about_five_and_a_half_million() {
        let n = EncoderConfig::default().param_count();
        assert_eq!(n, closed_form_count(&EncoderConfig::default()));
        assert!((n as f64 - 5.5e6).abs() <= 0.1 * 5.5e6, "{n}");
    }

    #[test]
    fn invalid_configs_rejected() {
        let base = EncoderConfig::tiny();
        assert!(init_params(&EncoderConfig { depth: 0, ..base }).is_err());
        assert!(init_params(&EncoderConfig { heads: 3, ..base }).is_err());
        assert!(init_params(&EncoderConfig { input_side: 30, ..base }).is_err());
    }

    #[test]
    fn init_is_deterministic() {
        let cfg = EncoderConfig::tiny();
        assert_eq!(init_params(&cfg).unwrap(), init_params(&cfg).unwrap());
        let other = init_params(&EncoderConfig { seed: 1, ..cfg }).unwrap();
        assert_ne!(init_params(&cfg).unwrap(), other);
        let p = init_params(&cfg).unwrap();
        let w = &p.get("blocks.0.attn.qkv.weight").unwrap().data;
        assert!(w.iter().all(|v| v.abs() <= 0.04));
        assert!(p.get("blocks.1.norm2.scale").unwrap().data.iter().all(|v| *v == 1.0));
    }

    #[test]
    fn duplicated_and_permuted_batches() {
        let cfg = EncoderConfig::tiny();
        let params = init_params(&cfg).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let imgs = random_images(&mut rng, 3, 32);
        let dup = vec![imgs[0].clone(); 4];
        let z = forward(&params, &dup).unwrap();
        for r in 1..4 {
            assert_eq!(z.row(r), z.row(0));
        }
        let z = forward(&params, &imgs).unwrap();
        let perm = [2, 0, 1];
        let zp = forward(&params, &perm.map(|i| imgs[i].clone())).unwrap();
        for (k, &i) in perm.iter().enumerate() {
            assert_eq!(zp.row(k), z.row(i));
        }
    }

    #[test]
    fn zero_image_gives_finite_nonzero_embedding() {
        let params = init_params(&EncoderConfig::tiny()).unwrap();
        let z = forward(&params, &[RgbPatch::filled(32, 32, [0; 3]).unwrap()]).unwrap();
        assert!(z.values().iter().all(|v| v.is_finite()));
        assert!(z.values().iter().map(|v| v * v).sum::<f64>() > 0.0);
    }

    #[test]
    fn wrong_input_side_rejected() {
        let params = init_params(&EncoderConfig::tiny()).unwrap();
        let img = RgbPatch::filled(16, 16, [0; 3]).unwrap();
        assert!(forward(&params, &[img]).is_err());
    }

    #[test]
    fn zero_and_scaled_upstream() {
        let params = init_params(&EncoderConfig::tiny()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let imgs = random_images(&mut rng, 2, 32);
        let (_, g0) = forward_with_gradients(&params, &imgs, &EmbeddingBatch::zeros(2, 16)).unwrap();
        assert_eq!(g0.l2_norm(), 0.0);
        let up: Vec<f64> = (0..32).map(|_| rng.random_range(-1.0..1.0)).collect();
        let up2: Vec<f64> = up.iter().map(|v| 2.0 * v).collect();
        let (_, g1) = forward_with_gradients(&params, &imgs, &EmbeddingBatch::new(2, 16, up).unwrap()).unwrap();
        let (_, g2) = forward_with_gradients(&params, &imgs, &EmbeddingBatch::new(2, 16, up2).unwrap()).unwrap();
        for (a, b) in g1.tensors().iter().zip(g2.tensors()) {
            for (x, y) in a.data.iter().zip(&b.data) {
                assert_eq!(2.0 * x, *y);
            }
        }
    }

    #[test]
    fn tiny_gradients_match_finite_differences() {
        let cfg = EncoderConfig::tiny();
        let params = init_params(&cfg).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let imgs = random_images(&mut rng, 2, 32);
        let up: Vec<f64> = (0..32).map(|_| rng.random_range(-1.0..1.0)).collect();
        let up = EmbeddingBatch::new(2, 16, up).unwrap();
        let (_, g) = forward_with_gradients(&params, &imgs, &up).unwrap();
        let objective = |p: &EncoderParams| -> f64 {
            let z = forward(p, &imgs).unwrap();
            z.values().iter().zip(up.values()).map(|(a, b)| a * b).sum()
        };
        let n = params.param_count();
        let mut worst: f64 = 0.0;
        for _ in 0..100 {
            let (ti, off) = params.locate(rng.random_range(0..n)).unwrap();
            let h = 1e-4;
            let mut p = params.clone();
            p.tensors_mut()[ti].data[off] += h;
            let mut q = params.clone();
            q.tensors_mut()[ti].data[off] -= h;
            let fd = (objective(&p) - objective(&q)) / (2.0 * h);
            let an = g.tensors()[ti].data[off];
            let rel = (fd - an).abs() / fd.abs().max(an.abs()).max(1e-7);
            assert!(rel <= 1e-4, "{}[{off}]: {an} vs {fd}", g.tensors()[ti].path);
            worst = worst.max(rel);
        }
        assert!(worst.is_finite());
    }

    #[test]
    fn projector_gradients_match_finite_differences() {
        let cfg = EncoderConfig {
            depth: 1,
            heads: 2,
            embed_dim: 8,
            projector_dim: Some(6),
            ..EncoderConfig::tiny()
        };
        let params = init_params(&cfg).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let imgs = random_images(&mut rng, 2, 32);
        let up: Vec<f64> = (0..12).map(|_| rng.random_range(-1.0..1.0)).collect();
        let up = EmbeddingBatch::new(2, 6, up).unwrap();
        let (_, g) = forward_with_gradients(&params, &imgs, &up).unwrap();
        let objective = |p: &EncoderParams| -> f64 {
            let z = forward(p, &imgs).unwrap();
            z.values().iter().zip(up.values()).map(|(a, b)| a * b).sum()
        };
        let n = params.param_count();
        for k in 0..40 {
            let flat = rng.random_range(0..n);
            let (ti, off) = params.locate(flat).unwrap();
            let h = 1e-4;
            let mut p = params.clone();
            p.tensors_mut()[ti].data[off] += h;
            let mut q = params.clone();
            q.tensors_mut()[ti].data[off] -= h;
            let fd = (objective(&p) - objective(&q)) / (2.0 * h);
            let an = g.tensors()[ti].data[off];
            let rel = (fd - an).abs() / fd.abs().max(an.abs()).max(1e-7);
            assert!(rel <= 1e-4, "#{k} {}[{off}]: {an} vs {fd}", g.tensors()[ti].path);
        }
    }
}
