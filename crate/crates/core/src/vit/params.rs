use super::ModelConfig;
use crate::error::{Error, Result};
use crate::numerics::{Matrix, Real, Rng};

/// How attention matrices are produced during the forward pass.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum AttentionMode {
    #[default]
    Softmax,
    /// Every head attends only to itself. Used to probe the alignment path
    /// with a network that performs no spatial mixing.
    Identity,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerParams<T> {
    pub ln1_gain: Matrix<T>,
    pub ln1_bias: Matrix<T>,
    pub w_q: Matrix<T>,
    pub w_k: Matrix<T>,
    pub w_v: Matrix<T>,
    /// Output projection applied to the concatenated heads.
    pub w_o: Matrix<T>,
    pub ln2_gain: Matrix<T>,
    pub ln2_bias: Matrix<T>,
    pub w1: Matrix<T>,
    pub b1: Matrix<T>,
    pub w2: Matrix<T>,
    pub b2: Matrix<T>,
}

/// Every learnable tensor of the toy ViT.
///
/// `generation` increases with each optimizer update; forward traces record
/// it so a backward pass against modified weights is rejected.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams<T> {
    pub config: ModelConfig,
    pub attention: AttentionMode,
    pub generation: u64,
    pub patch_proj: Matrix<T>,
    pub pos_embed: Matrix<T>,
    pub cls_token: Matrix<T>,
    pub layers: Vec<LayerParams<T>>,
    pub head_w: Matrix<T>,
    pub head_b: Matrix<T>,
}

/// Gradients share the parameter layout.
pub type ParamGrads<T> = ModelParams<T>;

fn uniform<T: Real>(rng: &mut Rng, rows: usize, cols: usize, fan_in: usize) -> Matrix<T> {
    let bound = 1.0 / (fan_in as f64).sqrt();
    let data = (0..rows * cols)
        .map(|_| T::from_f64(rng.uniform_in(-bound, bound)))
        .collect();
    Matrix::from_vec(rows, cols, data).expect("sized")
}

fn gaussian<T: Real>(rng: &mut Rng, rows: usize, cols: usize, std: f64) -> Matrix<T> {
    let data = (0..rows * cols)
        .map(|_| T::from_f64(rng.normal(0.0, std)))
        .collect();
    Matrix::from_vec(rows, cols, data).expect("sized")
}

impl<T: Real> LayerParams<T> {
    fn zeros(d: usize, hidden: usize) -> Self {
        Self {
            ln1_gain: Matrix::zeros(1, d),
            ln1_bias: Matrix::zeros(1, d),
            w_q: Matrix::zeros(d, d),
            w_k: Matrix::zeros(d, d),
            w_v: Matrix::zeros(d, d),
            w_o: Matrix::zeros(d, d),
            ln2_gain: Matrix::zeros(1, d),
            ln2_bias: Matrix::zeros(1, d),
            w1: Matrix::zeros(d, hidden),
            b1: Matrix::zeros(1, hidden),
            w2: Matrix::zeros(hidden, d),
            b2: Matrix::zeros(1, d),
        }
    }
}

impl<T: Real> ModelParams<T> {
    /// All tensors zero, LayerNorm gains included.
    pub fn zeros(config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        let d = config.dim;
        Ok(Self {
            config: config.clone(),
            attention: AttentionMode::Softmax,
            generation: 0,
            patch_proj: Matrix::zeros(config.patch_dim(), d),
            pos_embed: Matrix::zeros(config.num_tokens(), d),
            cls_token: Matrix::zeros(1, d),
            layers: (0..config.depth)
                .map(|_| LayerParams::zeros(d, config.hidden_dim()))
                .collect(),
            head_w: Matrix::zeros(d, config.num_classes),
            head_b: Matrix::zeros(1, config.num_classes),
        })
    }

    /// Zero-initialized gradient buffer matching `self`.
    pub fn zeros_like(&self) -> Self {
        let mut g = Self::zeros(&self.config).expect("validated config");
        g.generation = self.generation;
        g
    }

    /// ViT-style initialization: projections uniform in `±1/sqrt(fan_in)`,
    /// position embedding and class token `N(0, 0.02²)`, LayerNorm gain 1,
    /// biases 0.
    pub fn init(config: &ModelConfig, rng: &mut Rng) -> Result<Self> {
        let mut p = Self::zeros(config)?;
        let d = config.dim;
        let hidden = config.hidden_dim();
        p.patch_proj = uniform(rng, config.patch_dim(), d, config.patch_dim());
        p.pos_embed = gaussian(rng, config.num_tokens(), d, 0.02);
        p.cls_token = gaussian(rng, 1, d, 0.02);
        for layer in &mut p.layers {
            layer.ln1_gain.fill(T::one());
            layer.ln2_gain.fill(T::one());
            layer.w_q = uniform(rng, d, d, d);
            layer.w_k = uniform(rng, d, d, d);
            layer.w_v = uniform(rng, d, d, d);
            layer.w_o = uniform(rng, d, d, d);
            layer.w1 = uniform(rng, d, hidden, d);
            layer.w2 = uniform(rng, hidden, d, hidden);
        }
        p.head_w = uniform(rng, d, config.num_classes, d);
        Ok(p)
    }

    pub fn with_attention(mut self, mode: AttentionMode) -> Self {
        self.attention = mode;
        self
    }

    /// Named tensors in a fixed order (checkpoint order).
    pub fn tensors(&self) -> Vec<(String, &Matrix<T>)> {
        let mut out = vec![
            ("patch_proj".to_string(), &self.patch_proj),
            ("pos_embed".to_string(), &self.pos_embed),
            ("cls_token".to_string(), &self.cls_token),
        ];
        for (l, layer) in self.layers.iter().enumerate() {
            let LayerParams {
                ln1_gain,
                ln1_bias,
                w_q,
                w_k,
                w_v,
                w_o,
                ln2_gain,
                ln2_bias,
                w1,
                b1,
                w2,
                b2,
            } = layer;
            for (name, t) in [
                ("ln1.gain", ln1_gain),
                ("ln1.bias", ln1_bias),
                ("attn.w_q", w_q),
                ("attn.w_k", w_k),
                ("attn.w_v", w_v),
                ("attn.w_o", w_o),
                ("ln2.gain", ln2_gain),
                ("ln2.bias", ln2_bias),
                ("mlp.w1", w1),
                ("mlp.b1", b1),
                ("mlp.w2", w2),
                ("mlp.b2", b2),
            ] {
                out.push((format!("layers.{l}.{name}"), t));
            }
        }
        out.push(("head.weight".to_string(), &self.head_w));
        out.push(("head.bias".to_string(), &self.head_b));
        out
    }

    /// Mutable view in the same order as [`ModelParams::tensors`].
    pub fn tensors_mut(&mut self) -> Vec<&mut Matrix<T>> {
        let mut out = vec![
            &mut self.patch_proj,
            &mut self.pos_embed,
            &mut self.cls_token,
        ];
        for layer in &mut self.layers {
            let LayerParams {
                ln1_gain,
                ln1_bias,
                w_q,
                w_k,
                w_v,
                w_o,
                ln2_gain,
                ln2_bias,
                w1,
                b1,
                w2,
                b2,
            } = layer;
            out.extend([
                ln1_gain, ln1_bias, w_q, w_k, w_v, w_o, ln2_gain, ln2_bias, w1, b1, w2, b2,
            ]);
        }
        out.push(&mut self.head_w);
        out.push(&mut self.head_b);
        out
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors().iter().map(|(_, t)| t.as_slice().len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|(_, t)| t.is_finite())
    }

    /// `self += other`, tensor by tensor.
    pub fn accumulate(&mut self, other: &Self) -> Result<()> {
        let src = other.tensors();
        let dst = self.tensors_mut();
        if src.len() != dst.len() {
            return Err(Error::InvalidConfig("parameter layouts differ".into()));
        }
        for (d, (_, s)) in dst.into_iter().zip(src) {
            d.add_assign(s)?;
        }
        Ok(())
    }

    pub fn scale_in_place(&mut self, s: T) {
        for t in self.tensors_mut() {
            t.as_mut_slice().iter_mut().for_each(|v| *v *= s);
        }
    }

    pub fn cast<U: Real>(&self) -> ModelParams<U> {
        ModelParams {
            config: self.config.clone(),
            attention: self.attention,
            generation: self.generation,
            patch_proj: self.patch_proj.cast(),
            pos_embed: self.pos_embed.cast(),
            cls_token: self.cls_token.cast(),
            layers: self
                .layers
                .iter()
                .map(|l| LayerParams {
                    ln1_gain: l.ln1_gain.cast(),
                    ln1_bias: l.ln1_bias.cast(),
                    w_q: l.w_q.cast(),
                    w_k: l.w_k.cast(),
                    w_v: l.w_v.cast(),
                    w_o: l.w_o.cast(),
                    ln2_gain: l.ln2_gain.cast(),
                    ln2_bias: l.ln2_bias.cast(),
                    w1: l.w1.cast(),
                    b1: l.b1.cast(),
                    w2: l.w2.cast(),
                    b2: l.b2.cast(),
                })
                .collect(),
            head_w: self.head_w.cast(),
            head_b: self.head_b.cast(),
        }
    }
}

/// Whether weight decay applies to the named tensor (projection matrices
/// only; gains, biases and embeddings are exempt).
pub fn is_decayed(name: &str) -> bool {
    name == "patch_proj"
        || name == "head.weight"
        || name.ends_with(".w_q")
        || name.ends_with(".w_k")
        || name.ends_with(".w_v")
        || name.ends_with(".w_o")
        || name.ends_with(".w1")
        || name.ends_with(".w2")
}
