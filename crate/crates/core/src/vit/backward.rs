use super::forward::{put_cols, take_cols, BlockCache, ForwardTrace};
use super::layers::{gelu_grad, layer_norm_backward};
use super::{AttentionMode, ModelParams, ParamGrads, Pooling};
use crate::error::{Error, Result};
use crate::numerics::{Matrix, Real};

/// Analytic gradients of a scalar loss with respect to every parameter,
/// given `dloss/dlogits`. Label targets never appear here: the loss gradient
/// at the logits is all the backward pass sees.
pub fn model_backward<T: Real>(
    params: &ModelParams<T>,
    trace: &ForwardTrace<T>,
    logits_grad: &[T],
) -> Result<ParamGrads<T>> {
    let cfg = &params.config;
    if trace.generation != params.generation {
        return Err(Error::StaleTrace(format!(
            "trace from parameter generation {}, parameters at {}",
            trace.generation, params.generation
        )));
    }
    if trace.blocks.len() != cfg.depth {
        return Err(Error::StaleTrace(format!(
            "trace holds {} blocks, model has {}",
            trace.blocks.len(),
            cfg.depth
        )));
    }
    if logits_grad.len() != cfg.num_classes {
        return Err(Error::ShapeMismatch {
            op: "model_backward",
            left: (1, logits_grad.len()),
            right: (1, cfg.num_classes),
        });
    }

    let mut grads = params.zeros_like();
    let dlogits = Matrix::from_vec(1, cfg.num_classes, logits_grad.to_vec())?;

    // classifier head
    grads.head_w = trace.feature.matmul_tn(&dlogits)?;
    grads.head_b = dlogits.clone();
    let dfeature = dlogits.matmul_nt(&params.head_w)?;

    let tokens = cfg.num_tokens();
    let mut dz = Matrix::zeros(tokens, cfg.dim);
    match cfg.pooling {
        Pooling::ClassToken => dz.row_mut(0).copy_from_slice(dfeature.as_slice()),
        Pooling::GlobalPool => {
            let inv = T::from_f64(1.0 / cfg.num_patches() as f64);
            for i in 1..tokens {
                for (d, &g) in dz.row_mut(i).iter_mut().zip(dfeature.as_slice()) {
                    *d = g * inv;
                }
            }
        }
    }

    for l in (0..cfg.depth).rev() {
        dz = block_backward(params, l, &trace.blocks[l], &dz, &mut grads)?;
    }

    // embedding: Z0 = [cls; patches E] + pos
    grads.pos_embed = dz.clone();
    grads.cls_token = Matrix::from_vec(1, cfg.dim, dz.row(0).to_vec())?;
    let mut dtokens = Matrix::zeros(cfg.num_patches(), cfg.dim);
    for i in 0..cfg.num_patches() {
        dtokens.row_mut(i).copy_from_slice(dz.row(i + 1));
    }
    grads.patch_proj = trace.patches.matmul_tn(&dtokens)?;
    Ok(grads)
}

/// Backpropagates through block `l`, writing parameter gradients into
/// `grads.layers[l]` and returning `dloss/dZ^{l-1}`.
fn block_backward<T: Real>(
    params: &ModelParams<T>,
    l: usize,
    cache: &BlockCache<T>,
    dout: &Matrix<T>,
    grads: &mut ParamGrads<T>,
) -> Result<Matrix<T>> {
    let cfg = &params.config;
    let lp = &params.layers[l];
    let g = &mut grads.layers[l];

    // Z_out = MLP(LN2(Z')) + Z'
    g.b2 = dout.column_sums();
    g.w2 = cache.hidden_act.matmul_tn(dout)?;
    let mut dhidden = dout.matmul_nt(&lp.w2)?;
    for (dh, &pre) in dhidden
        .as_mut_slice()
        .iter_mut()
        .zip(cache.hidden_pre.as_slice())
    {
        *dh *= gelu_grad(pre);
    }
    g.b1 = dhidden.column_sums();
    g.w1 = cache.ln2_out.matmul_tn(&dhidden)?;
    let dln2 = dhidden.matmul_nt(&lp.w1)?;
    let (dmid_ln, dgain2, dbias2) = layer_norm_backward(&dln2, &lp.ln2_gain, &cache.ln2);
    g.ln2_gain = dgain2;
    g.ln2_bias = dbias2;
    let dmid = dout.add(&dmid_ln)?;

    // Z' = MSA(LN1(Z)) + Z
    g.w_o = cache.heads_out.matmul_tn(&dmid)?;
    let dheads = dmid.matmul_nt(&lp.w_o)?;
    let dh = cfg.head_dim();
    let scale = T::from_f64(1.0 / (dh as f64).sqrt());
    let tokens = dmid.rows();
    let mut dq = Matrix::zeros(tokens, cfg.dim);
    let mut dk = Matrix::zeros(tokens, cfg.dim);
    let mut dv = Matrix::zeros(tokens, cfg.dim);
    for h in 0..cfg.heads {
        let a = &cache.attention[h];
        let doh = take_cols(&dheads, h * dh, dh);
        let dvh = a.matmul_tn(&doh)?;
        put_cols(&mut dv, &dvh, h * dh);
        if params.attention == AttentionMode::Identity {
            continue;
        }
        let vh = take_cols(&cache.v, h * dh, dh);
        let da = doh.matmul_nt(&vh)?;
        // softmax backward, then the 1/sqrt(dh) scale
        let mut ds = Matrix::zeros(tokens, tokens);
        for i in 0..tokens {
            let ar = a.row(i);
            let dar = da.row(i);
            let dot: T = ar.iter().zip(dar).map(|(&x, &y)| x * y).sum();
            for ((s, &x), &y) in ds.row_mut(i).iter_mut().zip(ar).zip(dar) {
                *s = x * (y - dot) * scale;
            }
        }
        let qh = take_cols(&cache.q, h * dh, dh);
        let kh = take_cols(&cache.k, h * dh, dh);
        put_cols(&mut dq, &ds.matmul(&kh)?, h * dh);
        put_cols(&mut dk, &ds.matmul_tn(&qh)?, h * dh);
    }
    g.w_q = cache.ln1_out.matmul_tn(&dq)?;
    g.w_k = cache.ln1_out.matmul_tn(&dk)?;
    g.w_v = cache.ln1_out.matmul_tn(&dv)?;
    let mut dln1 = dq.matmul_nt(&lp.w_q)?;
    dln1.add_assign(&dk.matmul_nt(&lp.w_k)?)?;
    dln1.add_assign(&dv.matmul_nt(&lp.w_v)?)?;
    let (din_ln, dgain1, dbias1) = layer_norm_backward(&dln1, &lp.ln1_gain, &cache.ln1);
    g.ln1_gain = dgain1;
    g.ln1_bias = dbias1;
    dmid.add(&din_ln)
}
