use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::{Graph, ParamId, ParamStore, Tensor, Var};

pub(crate) const LAYER_NORM_EPS: f64 = 1e-6;

/// Glorot-uniform matrix.
pub(crate) fn xavier<R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> Tensor {
    let a = (6.0 / (rows + cols) as f64).sqrt();
    let data = (0..rows * cols).map(|_| rng.random_range(-a..a)).collect();
    Tensor::from_parts(vec![rows, cols], data)
}

/// Uniform entries with standard deviation `std`.
pub(crate) fn uniform_std<R: Rng + ?Sized>(shape: &[usize], std: f64, rng: &mut R) -> Tensor {
    let a = std * 3f64.sqrt();
    let n = shape.iter().product();
    Tensor::from_parts(shape.to_vec(), (0..n).map(|_| rng.random_range(-a..a)).collect())
}

/// Sinusoidal encoding of one coordinate: `sin(c / 10000^(2k/d))` at even
/// feature `2k`, the matching cosine at odd features.
pub fn sinusoid(coord: usize, d: usize) -> Vec<f64> {
    (0..d)
        .map(|j| {
            let k = (j / 2) as f64;
            let angle = coord as f64 / 10000f64.powf(2.0 * k / d as f64);
            if j % 2 == 0 {
                angle.sin()
            } else {
                angle.cos()
            }
        })
        .collect()
}

/// Position embedding for every position plus the timestep embedding of
/// depth step `step`, as a `[len, d]` matrix.
pub fn coordinate_embedding(len: usize, step: usize, d: usize) -> Tensor {
    let time = sinusoid(step, d);
    let mut data = Vec::with_capacity(len * d);
    for pos in 0..len {
        data.extend(sinusoid(pos, d).iter().zip(&time).map(|(p, t)| p + t));
    }
    Tensor::from_parts(vec![len, d], data)
}

#[derive(Clone, Debug)]
pub(crate) struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, din: usize, dout: usize, rng: &mut R) -> Self {
        Linear {
            w: store.add(format!("{name}.w"), xavier(din, dout, rng)),
            b: store.add(format!("{name}.b"), Tensor::zeros(&[dout])),
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let w = g.param(store, self.w);
        let b = g.param(store, self.b);
        let y = g.matmul(x, w)?;
        g.add_row(y, b)
    }
}

#[derive(Clone, Debug)]
pub(crate) struct Norm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl Norm {
    pub fn new(store: &mut ParamStore, name: &str, d: usize) -> Self {
        Norm {
            gain: store.add(format!("{name}.gain"), Tensor::full(&[d], 1.0)),
            bias: store.add(format!("{name}.bias"), Tensor::zeros(&[d])),
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let gain = g.param(store, self.gain);
        let bias = g.param(store, self.bias);
        g.layer_norm(x, gain, bias, LAYER_NORM_EPS)
    }
}

#[derive(Clone, Debug)]
pub(crate) struct FeedForward {
    pub inner: Linear,
    pub outer: Linear,
}

impl FeedForward {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, d: usize, d_ff: usize, rng: &mut R) -> Self {
        FeedForward {
            inner: Linear::new(store, &format!("{name}.inner"), d, d_ff, rng),
            outer: Linear::new(store, &format!("{name}.outer"), d_ff, d, rng),
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let h = self.inner.forward(g, store, x)?;
        let h = g.relu(h);
        self.outer.forward(g, store, h)
    }
}

/// Multi-head scaled dot-product attention.
#[derive(Clone, Debug)]
pub(crate) struct Attention {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub out: Linear,
    pub n_heads: usize,
}

/// Output of one attention call, with each head's weight matrix.
pub(crate) struct AttentionOutput {
    pub output: Var,
    pub weights: Vec<Var>,
}

impl Attention {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, d: usize, n_heads: usize, rng: &mut R) -> Self {
        Attention {
            query: Linear::new(store, &format!("{name}.query"), d, d, rng),
            key: Linear::new(store, &format!("{name}.key"), d, d, rng),
            value: Linear::new(store, &format!("{name}.value"), d, d, rng),
            out: Linear::new(store, &format!("{name}.out"), d, d, rng),
            n_heads,
        }
    }

    /// `keep` is a row-major `[len_q, len_k]` mask; `false` entries are never attended.
    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        queries: Var,
        keys_values: Var,
        keep: &[bool],
    ) -> Result<AttentionOutput> {
        let len_q = g.shape(queries)[0];
        let (len_k, d) = (g.shape(keys_values)[0], g.shape(keys_values)[1]);
        if keep.len() != len_q * len_k {
            return Err(Error::shape("attention mask", &[len_q, len_k], &[keep.len()]));
        }
        if d % self.n_heads != 0 {
            return Err(Error::Config(format!("d_model {d} not divisible by {} heads", self.n_heads)));
        }
        let dk = d / self.n_heads;
        let q = self.query.forward(g, store, queries)?;
        let k = self.key.forward(g, store, keys_values)?;
        let v = self.value.forward(g, store, keys_values)?;
        let scale = 1.0 / (dk as f64).sqrt();
        let mut heads = Vec::with_capacity(self.n_heads);
        let mut weights = Vec::with_capacity(self.n_heads);
        for h in 0..self.n_heads {
            let qh = g.slice_cols(q, h * dk, dk)?;
            let kh = g.slice_cols(k, h * dk, dk)?;
            let vh = g.slice_cols(v, h * dk, dk)?;
            let scores = g.matmul_nt(qh, kh)?;
            let scores = g.scale(scores, scale);
            let w = g.masked_softmax(scores, 1, Some(keep))?;
            heads.push(g.matmul(w, vh)?);
            weights.push(w);
        }
        let joined = if heads.len() == 1 { heads[0] } else { g.concat_cols(&heads)? };
        let output = self.out.forward(g, store, joined)?;
        Ok(AttentionOutput { output, weights })
    }
}
