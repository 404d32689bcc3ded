use autodiff::{Graph, ParamId, ParamStore, RngStream, Tensor, Var};

use crate::error::Result;

/// `y = x·W + b` with `W: in × out`.
#[derive(Debug, Clone)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub in_dim: usize,
    pub out_dim: usize,
}

/// Glorot-uniform bound for a `fan_in × fan_out` matrix.
pub fn glorot(fan_in: usize, fan_out: usize) -> f64 {
    (6.0 / (fan_in + fan_out) as f64).sqrt()
}

impl Linear {
    pub fn new(
        ps: &mut ParamStore,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        bias: bool,
        rng: &mut RngStream,
    ) -> Self {
        let w = ps.add_uniform(format!("{name}.w"), in_dim, out_dim, glorot(in_dim, out_dim), rng);
        let b = bias.then(|| ps.add(format!("{name}.b"), Tensor::zeros(1, out_dim)));
        Linear { w, b, in_dim, out_dim }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let w = g.param(self.w);
        let mut y = g.matmul(x, w)?;
        if let Some(b) = self.b {
            let b = g.param(b);
            y = g.add_row(y, b)?;
        }
        Ok(y)
    }
}

/// A stack of tanh layers followed by a final linear layer.
#[derive(Debug, Clone)]
pub struct Mlp {
    pub layers: Vec<Linear>,
}

impl Mlp {
    /// `dims = [in, h1, …, out]`.
    pub fn new(ps: &mut ParamStore, name: &str, dims: &[usize], rng: &mut RngStream) -> Self {
        let layers = dims
            .windows(2)
            .enumerate()
            .map(|(i, d)| Linear::new(ps, &format!("{name}.{i}"), d[0], d[1], true, rng))
            .collect();
        Mlp { layers }
    }

    /// Pre-activation output of the last layer.
    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let mut h = x;
        let last = self.layers.len() - 1;
        for (i, l) in self.layers.iter().enumerate() {
            h = l.forward(g, h)?;
            if i < last {
                h = g.tanh(h);
            }
        }
        Ok(h)
    }
}
