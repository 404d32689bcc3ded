use autodiff::{dropout_mask, Graph, Mode, ParamId, ParamStore, RngStream, Tensor, Var};

use super::linear::glorot;
use crate::error::Result;

/// LSTM cell with gate blocks ordered input, forget, output, candidate.
#[derive(Debug, Clone)]
pub struct LstmCell {
    pub wx: ParamId,
    pub wh: ParamId,
    pub b: ParamId,
    pub input_dim: usize,
    pub hidden: usize,
}

impl LstmCell {
    /// Weights uniform in the Glorot range; forget-gate bias 1.0, others 0.
    pub fn new(ps: &mut ParamStore, name: &str, input_dim: usize, hidden: usize, rng: &mut RngStream) -> Self {
        let wx = ps.add_uniform(format!("{name}.wx"), input_dim, 4 * hidden, glorot(input_dim, hidden), rng);
        let wh = ps.add_uniform(format!("{name}.wh"), hidden, 4 * hidden, glorot(hidden, hidden), rng);
        let mut bias = Tensor::zeros(1, 4 * hidden);
        bias.row_mut(0)[hidden..2 * hidden].fill(1.0);
        let b = ps.add(format!("{name}.b"), bias);
        LstmCell { wx, wh, b, input_dim, hidden }
    }

    /// `x·Wx + b` for a block of inputs; the recurrent part is added per step.
    pub fn project_input(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let wx = g.param(self.wx);
        let b = g.param(self.b);
        let xw = g.matmul(x, wx)?;
        Ok(g.add_row(xw, b)?)
    }

    /// One step from a pre-projected input row block `xw = x·Wx + b`.
    pub fn step_projected(&self, g: &mut Graph, xw: Var, h: Var, c: Var) -> Result<(Var, Var)> {
        let wh = g.param(self.wh);
        let hw = g.matmul(h, wh)?;
        let z = g.add(xw, hw)?;
        let n = self.hidden;
        let zi = g.slice_cols(z, 0, n)?;
        let zf = g.slice_cols(z, n, n)?;
        let zo = g.slice_cols(z, 2 * n, n)?;
        let zg = g.slice_cols(z, 3 * n, n)?;
        let i = g.sigmoid(zi);
        let f = g.sigmoid(zf);
        let o = g.sigmoid(zo);
        let cand = g.tanh(zg);
        let fc = g.mul(f, c)?;
        let ig = g.mul(i, cand)?;
        let c_new = g.add(fc, ig)?;
        let tc = g.tanh(c_new);
        let h_new = g.mul(o, tc)?;
        Ok((h_new, c_new))
    }

    /// Standard LSTM update: `(h, c) = LSTM(x, h_prev, c_prev)`.
    pub fn step(&self, g: &mut Graph, x: Var, h: Var, c: Var) -> Result<(Var, Var)> {
        let xw = self.project_input(g, x)?;
        self.step_projected(g, xw, h, c)
    }
}

/// Dropout applied to recurrent state with one mask per sequence.
#[derive(Debug, Clone)]
pub struct RecurrentDropout {
    mask: Option<Tensor>,
}

impl RecurrentDropout {
    pub fn new(rows: usize, hidden: usize, rate: f64, mode: Mode, rng: &mut RngStream) -> Self {
        let mask = (mode == Mode::Train && rate > 0.0).then(|| dropout_mask(rows, hidden, rate, rng));
        RecurrentDropout { mask }
    }

    pub fn none() -> Self {
        RecurrentDropout { mask: None }
    }

    pub fn apply(&self, g: &mut Graph, h: Var) -> Result<Var> {
        match &self.mask {
            Some(m) => Ok(g.mask_mul(h, m.clone())?),
            None => Ok(h),
        }
    }
}

/// Output of a batched bidirectional pass.
#[derive(Debug, Clone)]
pub struct Encoded {
    /// `(T·B) × 2H`, time-major; row `t·B + b` is position `t` of row `b`,
    /// zero beyond that row's length.
    pub annotations: Var,
    /// Forward state after the last real position, `B × H`.
    pub final_fwd: Var,
    /// Backward state at position 0, `B × H`.
    pub final_bwd: Var,
    pub lengths: Vec<usize>,
    pub steps: usize,
}

impl Encoded {
    pub fn batch(&self) -> usize {
        self.lengths.len()
    }

    /// `[final_fwd; final_bwd]`, `B × 2H`.
    pub fn final_state(&self, g: &mut Graph) -> Result<Var> {
        Ok(g.concat_cols(&[self.final_fwd, self.final_bwd])?)
    }

    /// Annotation row of position `pos[b]` for each batch row, `B × 2H`.
    pub fn rows_at(&self, g: &mut Graph, pos: &[usize]) -> Result<Var> {
        let b = self.batch();
        let idx: Vec<usize> = pos.iter().enumerate().map(|(r, &p)| p * b + r).collect();
        Ok(g.select_rows(self.annotations, &idx)?)
    }
}

#[derive(Debug, Clone)]
pub struct BiLstm {
    pub fwd: LstmCell,
    pub bwd: LstmCell,
}

impl BiLstm {
    pub fn new(ps: &mut ParamStore, name: &str, input_dim: usize, hidden: usize, rng: &mut RngStream) -> Self {
        BiLstm {
            fwd: LstmCell::new(ps, &format!("{name}.fwd"), input_dim, hidden, rng),
            bwd: LstmCell::new(ps, &format!("{name}.bwd"), input_dim, hidden, rng),
        }
    }

    pub fn hidden(&self) -> usize {
        self.fwd.hidden
    }

    pub fn output_dim(&self) -> usize {
        2 * self.fwd.hidden
    }

    /// Encodes a time-major `(T·B) × in` input. Each direction only visits
    /// the first `lengths[b]` positions of row `b`.
    pub fn encode(
        &self,
        g: &mut Graph,
        inputs: Var,
        lengths: &[usize],
        drop_fwd: &RecurrentDropout,
        drop_bwd: &RecurrentDropout,
    ) -> Result<Encoded> {
        let b = lengths.len();
        let steps = if b == 0 { 0 } else { g.shape(inputs).0 / b };
        let h = self.hidden();
        let keep: Vec<Vec<bool>> = (0..steps)
            .map(|t| lengths.iter().map(|&l| t < l).collect())
            .collect();
        let xf = self.fwd.project_input(g, inputs)?;
        let xb = self.bwd.project_input(g, inputs)?;
        let rows = |t: usize| (t * b..(t + 1) * b).collect::<Vec<_>>();

        let mut fwd_out = Vec::with_capacity(steps);
        let (mut hf, mut cf) = (g.zeros(b, h), g.zeros(b, h));
        for t in 0..steps {
            let x = g.select_rows(xf, &rows(t))?;
            let hin = drop_fwd.apply(g, hf)?;
            let (hn, cn) = self.fwd.step_projected(g, x, hin, cf)?;
            hf = g.where_rows(&keep[t], hn, hf)?;
            cf = g.where_rows(&keep[t], cn, cf)?;
            fwd_out.push(g.mask_rows(hf, &keep[t])?);
        }

        let mut bwd_out = vec![None; steps];
        let (mut hb, mut cb) = (g.zeros(b, h), g.zeros(b, h));
        for t in (0..steps).rev() {
            let x = g.select_rows(xb, &rows(t))?;
            let hin = drop_bwd.apply(g, hb)?;
            let (hn, cn) = self.bwd.step_projected(g, x, hin, cb)?;
            hb = g.where_rows(&keep[t], hn, hb)?;
            cb = g.where_rows(&keep[t], cn, cb)?;
            bwd_out[t] = Some(hb);
        }

        let mut per_step = Vec::with_capacity(steps);
        for t in 0..steps {
            let bo = bwd_out[t].expect("filled");
            per_step.push(g.concat_cols(&[fwd_out[t], bo])?);
        }
        let annotations = if steps == 0 {
            g.zeros(0, 2 * h)
        } else {
            g.concat_rows(&per_step)?
        };
        Ok(Encoded {
            annotations,
            final_fwd: hf,
            final_bwd: hb,
            lengths: lengths.to_vec(),
            steps,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::check_loss as check_gradients;
    use autodiff::GradCheckOptions;

    fn scripted_lstm_1d(w: [f64; 4], u: [f64; 4], b: [f64; 4], xs: &[f64]) -> Vec<(f64, f64)> {
        let s = |z: f64| 1.0 / (1.0 + (-z).exp());
        let (mut h, mut c) = (0.0, 0.0);
        let mut out = Vec::new();
        for &x in xs {
            let z: Vec<f64> = (0..4).map(|k| w[k] * x + u[k] * h + b[k]).collect();
            c = s(z[1]) * c + s(z[0]) * z[3].tanh();
            h = s(z[2]) * c.tanh();
            out.push((h, c));
        }
        out
    }

    fn set_1d(ps: &mut ParamStore, cell: &LstmCell, w: [f64; 4], u: [f64; 4], b: [f64; 4]) {
        ps.set(cell.wx, Tensor::from_rows(&[&w])).unwrap();
        ps.set(cell.wh, Tensor::from_rows(&[&u])).unwrap();
        ps.set(cell.b, Tensor::from_rows(&[&b])).unwrap();
    }

    #[test]
    fn zero_cell_gives_zero_state() {
        let mut ps = ParamStore::new();
        let cell = LstmCell::new(&mut ps, "c", 3, 2, &mut RngStream::new(0));
        for id in [cell.wx, cell.wh, cell.b] {
            let (r, c) = ps.get(id).shape();
            ps.set(id, Tensor::zeros(r, c)).unwrap();
        }
        let mut g = Graph::new(&ps);
        let x = g.zeros(1, 3);
        let (h0, c0) = (g.zeros(1, 2), g.zeros(1, 2));
        let (h, c) = cell.step(&mut g, x, h0, c0).unwrap();
        assert_eq!(g.value(h).data(), [0.0, 0.0]);
        assert_eq!(g.value(c).data(), [0.0, 0.0]);
    }

    #[test]
    fn forget_bias_starts_at_one() {
        let mut ps = ParamStore::new();
        let cell = LstmCell::new(&mut ps, "c", 2, 3, &mut RngStream::new(0));
        assert_eq!(ps.get(cell.b).data(), [0.0, 0.0, 0.0, 1.0, 1.0, 1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn one_dim_cell_matches_scripted_trace() {
        let (w, u, b) = ([0.5, -0.3, 0.8, 1.1], [0.2, 0.7, -0.4, 0.3], [0.1, 1.0, -0.2, 0.05]);
        let xs = [0.3, -1.2, 2.0, 0.7];
        let mut ps = ParamStore::new();
        let cell = LstmCell::new(&mut ps, "c", 1, 1, &mut RngStream::new(0));
        set_1d(&mut ps, &cell, w, u, b);
        let oracle = scripted_lstm_1d(w, u, b, &xs);
        let mut g = Graph::new(&ps);
        let (mut h, mut c) = (g.zeros(1, 1), g.zeros(1, 1));
        for (x, (oh, oc)) in xs.iter().zip(oracle) {
            let xv = g.constant(Tensor::scalar(*x));
            (h, c) = cell.step(&mut g, xv, h, c).unwrap();
            assert!((g.value(h).data()[0] - oh).abs() < 1e-12);
            assert!((g.value(c).data()[0] - oc).abs() < 1e-12);
        }
    }

    #[test]
    fn three_chained_steps_pass_gradcheck() {
        let mut ps = ParamStore::new();
        let mut rng = RngStream::new(5);
        let cell = LstmCell::new(&mut ps, "c", 3, 4, &mut rng);
        let x = ps.add_uniform("x", 3, 3, 1.0, &mut rng);
        let report = check_gradients(
            &mut ps,
            |m, g| {
                let xs = g.param(x);
                let (mut h, mut c) = (g.zeros(1, 4), g.zeros(1, 4));
                for t in 0..3 {
                    let xt = g.select_rows(xs, &[t])?;
                    (h, c) = cell.step(g, xt, h, c)?;
                }
                let _ = m;
                let sq = g.mul(h, c)?;
                Ok(g.sum(sq))
            },
            GradCheckOptions::default(),
        )
        .unwrap();
        assert!(report.passed(), "{report:?}");
    }

    fn encode_values(ps: &ParamStore, enc: &BiLstm, rows: &[Vec<f64>], lengths: &[usize]) -> (Tensor, Tensor, Tensor) {
        let mut g = Graph::new(ps);
        let d = rows[0].len();
        let data: Vec<f64> = rows.concat();
        let x = g.constant(Tensor::from_vec(rows.len(), d, data).unwrap());
        let e = enc
            .encode(&mut g, x, lengths, &RecurrentDropout::none(), &RecurrentDropout::none())
            .unwrap();
        (
            g.value(e.annotations).clone(),
            g.value(e.final_fwd).clone(),
            g.value(e.final_bwd).clone(),
        )
    }

    fn random_rows(n: usize, d: usize, rng: &mut RngStream) -> Vec<Vec<f64>> {
        (0..n).map(|_| (0..d).map(|_| rng.normal()).collect()).collect()
    }

    #[test]
    fn length_one_is_concat_of_single_steps() {
        let mut ps = ParamStore::new();
        let mut rng = RngStream::new(2);
        let enc = BiLstm::new(&mut ps, "e", 3, 2, &mut rng);
        let x = random_rows(1, 3, &mut rng);
        let (ann, ff, fb) = encode_values(&ps, &enc, &x, &[1]);
        let mut g = Graph::new(&ps);
        let xv = g.constant(Tensor::from_rows(&[&x[0]]));
        let z = g.zeros(1, 2);
        let (hf, _) = enc.fwd.step(&mut g, xv, z, z).unwrap();
        let (hb, _) = enc.bwd.step(&mut g, xv, z, z).unwrap();
        assert_eq!(&ann.data()[..2], g.value(hf).data());
        assert_eq!(&ann.data()[2..], g.value(hb).data());
        assert_eq!(ff.data(), g.value(hf).data());
        assert_eq!(fb.data(), g.value(hb).data());
    }

    #[test]
    fn reversing_input_swaps_direction_blocks() {
        let mut rng = RngStream::new(8);
        for _ in 0..10 {
            let mut ps = ParamStore::new();
            let enc = BiLstm::new(&mut ps, "e", 3, 2, &mut rng);
            let mirrored = BiLstm {
                fwd: enc.bwd.clone(),
                bwd: enc.fwd.clone(),
            };
            let x = random_rows(5, 3, &mut rng);
            let mut xr = x.clone();
            xr.reverse();
            let (a, _, _) = encode_values(&ps, &enc, &x, &[5]);
            let (b, _, _) = encode_values(&ps, &mirrored, &xr, &[5]);
            for t in 0..5 {
                let ra = a.row(t);
                let rb = b.row(4 - t);
                for k in 0..2 {
                    assert!((ra[k] - rb[2 + k]).abs() < 1e-12);
                    assert!((ra[2 + k] - rb[k]).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn padded_and_unpadded_agree_on_real_rows() {
        let mut rng = RngStream::new(4);
        let mut ps = ParamStore::new();
        let enc = BiLstm::new(&mut ps, "e", 3, 4, &mut rng);
        let long = random_rows(6, 3, &mut rng);
        let short = random_rows(3, 3, &mut rng);
        let (solo, sf, sb) = encode_values(&ps, &enc, &short, &[3]);
        let mut tm = Vec::new();
        for t in 0..6 {
            tm.push(long[t].clone());
            tm.push(if t < 3 { short[t].clone() } else { vec![9.0; 3] });
        }
        let (batch, bf, bb) = encode_values(&ps, &enc, &tm, &[6, 3]);
        let close = |a: &[f64], b: &[f64]| a.iter().zip(b).all(|(x, y)| (x - y).abs() < 1e-12);
        for t in 0..3 {
            assert!(close(batch.row(2 * t + 1), solo.row(t)));
        }
        for t in 3..6 {
            assert!(batch.row(2 * t + 1).iter().all(|&v| v == 0.0));
        }
        assert!(close(bf.row(1), sf.row(0)));
        assert!(close(bb.row(1), sb.row(0)));
    }
}
