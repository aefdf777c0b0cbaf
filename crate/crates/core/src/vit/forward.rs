use super::layers::{add_row_bias, gelu, layer_norm, LayerNormCache};
use super::{AttentionMode, ModelConfig, ModelParams, Pooling};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::numerics::{softmax_in_place, Matrix, Real};

/// Attention matrices captured during a forward pass, one `(N+1) x (N+1)`
/// row-stochastic matrix per layer and head. Stored in double precision
/// because label propagation always runs in `f64`.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionTrace {
    layers: Vec<Vec<Matrix<f64>>>,
}

impl AttentionTrace {
    /// Validates that every matrix is square and that all share one size.
    pub fn new(layers: Vec<Vec<Matrix<f64>>>) -> Result<Self> {
        let mut size = None;
        for heads in &layers {
            if heads.is_empty() {
                return Err(Error::InvalidConfig("layer without attention heads".into()));
            }
            for a in heads {
                if a.rows() != a.cols() {
                    return Err(Error::ShapeMismatch {
                        op: "attention trace",
                        left: a.shape(),
                        right: (a.rows(), a.rows()),
                    });
                }
                match size {
                    None => size = Some(a.rows()),
                    Some(n) if n != a.rows() => {
                        return Err(Error::ShapeMismatch {
                            op: "attention trace",
                            left: (n, n),
                            right: a.shape(),
                        })
                    }
                    _ => {}
                }
            }
        }
        Ok(Self { layers })
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn heads(&self, layer: usize) -> &[Matrix<f64>] {
        &self.layers[layer]
    }

    pub fn layers(&self) -> &[Vec<Matrix<f64>>] {
        &self.layers
    }

    /// Head-averaged attention of one layer.
    pub fn mean_attention(&self, layer: usize) -> Matrix<f64> {
        let heads = &self.layers[layer];
        let mut sum = heads[0].clone();
        for a in &heads[1..] {
            sum.add_assign(a).expect("validated shapes");
        }
        let h = heads.len() as f64;
        sum.map(|v| v / h)
    }
}

/// Everything the backward pass needs from one transformer block.
#[derive(Clone, Debug)]
pub struct BlockCache<T> {
    /// Z^{l-1}
    pub input: Matrix<T>,
    pub(crate) ln1: LayerNormCache<T>,
    pub(crate) ln1_out: Matrix<T>,
    pub(crate) q: Matrix<T>,
    pub(crate) k: Matrix<T>,
    pub(crate) v: Matrix<T>,
    /// Per-head attention matrices.
    pub attention: Vec<Matrix<T>>,
    pub(crate) heads_out: Matrix<T>,
    /// MSA output, added to the input by the first residual.
    pub msa_out: Matrix<T>,
    /// Z'^{l-1}
    pub mid: Matrix<T>,
    pub(crate) ln2: LayerNormCache<T>,
    pub(crate) ln2_out: Matrix<T>,
    pub(crate) hidden_pre: Matrix<T>,
    pub(crate) hidden_act: Matrix<T>,
    pub mlp_out: Matrix<T>,
    /// Z^l
    pub output: Matrix<T>,
}

/// Full record of one forward pass.
#[derive(Clone, Debug)]
pub struct ForwardTrace<T> {
    pub(crate) generation: u64,
    pub(crate) patches: Matrix<T>,
    pub tokens0: Matrix<T>,
    pub blocks: Vec<BlockCache<T>>,
    /// Pooled image representation, `1 x d`.
    pub feature: Matrix<T>,
    pub logits: Matrix<T>,
}

impl<T: Real> ForwardTrace<T> {
    /// Z^0, Z^1, ..., Z^L.
    pub fn token_snapshots(&self) -> Vec<&Matrix<T>> {
        std::iter::once(&self.tokens0)
            .chain(self.blocks.iter().map(|b| &b.output))
            .collect()
    }

    pub fn final_tokens(&self) -> &Matrix<T> {
        self.blocks.last().map_or(&self.tokens0, |b| &b.output)
    }

    pub fn attention(&self) -> AttentionTrace {
        AttentionTrace {
            layers: self
                .blocks
                .iter()
                .map(|b| b.attention.iter().map(|a| a.cast()).collect())
                .collect(),
        }
    }
}

pub struct ForwardOutput<T> {
    pub logits: Vec<T>,
    pub trace: ForwardTrace<T>,
    pub attention: AttentionTrace,
}

/// Flattens the image into `N x patch_dim` rows: patches in row-major grid
/// order, pixels row-major within a patch, channels fastest.
pub fn extract_patches<T: Real>(image: &Image, config: &ModelConfig) -> Result<Matrix<T>> {
    if image.height() != config.image_size
        || image.width() != config.image_size
        || image.channels() != config.channels
    {
        return Err(Error::ShapeMismatch {
            op: "patch_embed",
            left: (image.height(), image.width() * image.channels()),
            right: (config.image_size, config.image_size * config.channels),
        });
    }
    let p = config.patch_size;
    let grid = config.grid();
    let c = config.channels;
    let mut out = Matrix::zeros(config.num_patches(), config.patch_dim());
    for gy in 0..grid {
        for gx in 0..grid {
            let row = out.row_mut(gy * grid + gx);
            let mut idx = 0;
            for py in 0..p {
                for px in 0..p {
                    for ch in 0..c {
                        row[idx] = T::from_f64(image.get(gy * p + py, gx * p + px, ch) as f64);
                        idx += 1;
                    }
                }
            }
        }
    }
    Ok(out)
}

fn embed_patches<T: Real>(patches: &Matrix<T>, params: &ModelParams<T>) -> Result<Matrix<T>> {
    let projected = patches.matmul(&params.patch_proj)?;
    let d = params.config.dim;
    let mut z = Matrix::zeros(params.config.num_tokens(), d);
    for j in 0..d {
        z[(0, j)] = params.cls_token[(0, j)] + params.pos_embed[(0, j)];
    }
    for i in 0..projected.rows() {
        let src = projected.row(i);
        let pos = params.pos_embed.row(i + 1);
        for ((dst, &s), &e) in z.row_mut(i + 1).iter_mut().zip(src).zip(pos) {
            *dst = s + e;
        }
    }
    Ok(z)
}

/// Z^0 = [z_cls; x_1 E; ...; x_N E] + E_pos.
pub fn patch_embed<T: Real>(image: &Image, params: &ModelParams<T>) -> Result<Matrix<T>> {
    let patches = extract_patches(image, &params.config)?;
    embed_patches(&patches, params)
}

pub(crate) fn take_cols<T: Real>(m: &Matrix<T>, start: usize, width: usize) -> Matrix<T> {
    let mut out = Matrix::zeros(m.rows(), width);
    for i in 0..m.rows() {
        out.row_mut(i)
            .copy_from_slice(&m.row(i)[start..start + width]);
    }
    out
}

pub(crate) fn put_cols<T: Real>(dst: &mut Matrix<T>, src: &Matrix<T>, start: usize) {
    let w = src.cols();
    for i in 0..src.rows() {
        dst.row_mut(i)[start..start + w].copy_from_slice(src.row(i));
    }
}

struct MsaParts<T> {
    q: Matrix<T>,
    k: Matrix<T>,
    v: Matrix<T>,
    attention: Vec<Matrix<T>>,
    heads_out: Matrix<T>,
    out: Matrix<T>,
}

fn msa<T: Real>(z: &Matrix<T>, layer: usize, params: &ModelParams<T>) -> Result<MsaParts<T>> {
    let cfg = &params.config;
    if layer >= cfg.depth {
        return Err(Error::LayerCountMismatch {
            expected: cfg.depth,
            got: layer + 1,
        });
    }
    if z.cols() != cfg.dim {
        return Err(Error::ShapeMismatch {
            op: "mhsa",
            left: z.shape(),
            right: (z.rows(), cfg.dim),
        });
    }
    let lp = &params.layers[layer];
    let q = z.matmul(&lp.w_q)?;
    let k = z.matmul(&lp.w_k)?;
    let v = z.matmul(&lp.w_v)?;
    let dh = cfg.head_dim();
    let scale = T::from_f64(1.0 / (dh as f64).sqrt());
    let tokens = z.rows();
    let mut heads_out = Matrix::zeros(tokens, cfg.dim);
    let mut attention = Vec::with_capacity(cfg.heads);
    for h in 0..cfg.heads {
        let vh = take_cols(&v, h * dh, dh);
        let a = match params.attention {
            AttentionMode::Identity => Matrix::identity(tokens),
            AttentionMode::Softmax => {
                let qh = take_cols(&q, h * dh, dh);
                let kh = take_cols(&k, h * dh, dh);
                let mut s = qh.matmul_nt(&kh)?;
                for i in 0..tokens {
                    let row = s.row_mut(i);
                    row.iter_mut().for_each(|x| *x *= scale);
                    softmax_in_place(row);
                }
                s
            }
        };
        let oh = a.matmul(&vh)?;
        put_cols(&mut heads_out, &oh, h * dh);
        attention.push(a);
    }
    let out = heads_out.matmul(&lp.w_o)?;
    Ok(MsaParts {
        q,
        k,
        v,
        attention,
        heads_out,
        out,
    })
}

/// Multi-head self-attention of layer `layer` applied directly to `z`.
///
/// Heads use scale `1/sqrt(d/H)`, are concatenated along channels and
/// projected by the layer's output matrix. Returns the output together with
/// the per-head attention matrices.
pub fn mhsa_forward<T: Real>(
    z: &Matrix<T>,
    layer: usize,
    params: &ModelParams<T>,
) -> Result<(Matrix<T>, Vec<Matrix<T>>)> {
    let parts = msa(z, layer, params)?;
    Ok((parts.out, parts.attention))
}

/// One pre-norm transformer block:
/// `Z' = MSA(LN(Z)) + Z`, then `Z_out = MLP(LN(Z')) + Z'`.
pub fn block_forward<T: Real>(
    z: &Matrix<T>,
    layer: usize,
    params: &ModelParams<T>,
) -> Result<BlockCache<T>> {
    if layer >= params.layers.len() {
        return Err(Error::LayerCountMismatch {
            expected: params.layers.len(),
            got: layer + 1,
        });
    }
    let lp = &params.layers[layer];
    let (ln1_out, ln1) = layer_norm(z, &lp.ln1_gain, &lp.ln1_bias);
    let parts = msa(&ln1_out, layer, params)?;
    let mid = parts.out.add(z)?;

    let (ln2_out, ln2) = layer_norm(&mid, &lp.ln2_gain, &lp.ln2_bias);
    let mut hidden_pre = ln2_out.matmul(&lp.w1)?;
    add_row_bias(&mut hidden_pre, &lp.b1);
    let hidden_act = hidden_pre.map(gelu);
    let mut mlp_out = hidden_act.matmul(&lp.w2)?;
    add_row_bias(&mut mlp_out, &lp.b2);
    let output = mlp_out.add(&mid)?;

    Ok(BlockCache {
        input: z.clone(),
        ln1,
        ln1_out,
        q: parts.q,
        k: parts.k,
        v: parts.v,
        attention: parts.attention,
        heads_out: parts.heads_out,
        msa_out: parts.out,
        mid,
        ln2,
        ln2_out,
        hidden_pre,
        hidden_act,
        mlp_out,
        output,
    })
}

pub(crate) fn pool<T: Real>(tokens: &Matrix<T>, pooling: Pooling) -> Matrix<T> {
    match pooling {
        Pooling::ClassToken => {
            Matrix::from_vec(1, tokens.cols(), tokens.row(0).to_vec()).expect("row sized")
        }
        Pooling::GlobalPool => {
            let n = tokens.rows() - 1;
            let mut out = Matrix::zeros(1, tokens.cols());
            for i in 1..tokens.rows() {
                for (o, &v) in out.as_mut_slice().iter_mut().zip(tokens.row(i)) {
                    *o += v;
                }
            }
            let inv = T::from_f64(1.0 / n as f64);
            out.as_mut_slice().iter_mut().for_each(|v| *v *= inv);
            out
        }
    }
}

/// Full forward pass with caches and attention capture.
pub fn model_forward<T: Real>(image: &Image, params: &ModelParams<T>) -> Result<ForwardOutput<T>> {
    let trace = forward_trace(image, params)?;
    Ok(ForwardOutput {
        logits: trace.logits.as_slice().to_vec(),
        attention: trace.attention(),
        trace,
    })
}

pub(crate) fn forward_trace<T: Real>(
    image: &Image,
    params: &ModelParams<T>,
) -> Result<ForwardTrace<T>> {
    let patches = extract_patches::<T>(image, &params.config)?;
    let tokens0 = embed_patches(&patches, params)?;
    let mut blocks: Vec<BlockCache<T>> = Vec::with_capacity(params.config.depth);
    for l in 0..params.config.depth {
        let input = blocks.last().map_or(&tokens0, |b| &b.output);
        let cache = block_forward(input, l, params)?;
        blocks.push(cache);
    }
    let last = blocks.last().map_or(&tokens0, |b| &b.output);
    let feature = pool(last, params.config.pooling);
    let mut logits = feature.matmul(&params.head_w)?;
    add_row_bias(&mut logits, &params.head_b);
    Ok(ForwardTrace {
        generation: params.generation,
        patches,
        tokens0,
        blocks,
        feature,
        logits,
    })
}

/// Logits only.
pub fn model_logits<T: Real>(image: &Image, params: &ModelParams<T>) -> Result<Vec<T>> {
    Ok(forward_trace(image, params)?.logits.into_vec())
}
