use crate::error::Result;
use crate::ndmath::{matmul_into, matmul_nt, matmul_tn_into, sigmoid, Matrix, Rng, INIT_SCALE};

/// One LSTM layer in row form: `gates = x W_x + h W_h + b`, gate order `[i, f, g, o]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Lstm {
    pub w_x: Matrix,
    pub w_h: Matrix,
    pub b: Matrix,
}

/// Everything a step needs for its backward pass.
#[derive(Clone, Debug)]
pub struct LstmStepCache {
    x: Matrix,
    h_prev: Matrix,
    c_prev: Matrix,
    /// Activated gates, `B x 4H`.
    gates: Matrix,
    tanh_c: Matrix,
    /// 1 for real positions, 0 for padding (state is carried through).
    mask: Vec<f64>,
}

impl Lstm {
    pub fn new(input: usize, hidden: usize, rng: &mut Rng) -> Self {
        Lstm {
            w_x: Matrix::uniform(input, 4 * hidden, INIT_SCALE, rng),
            w_h: Matrix::uniform(hidden, 4 * hidden, INIT_SCALE, rng),
            b: Matrix::uniform(1, 4 * hidden, INIT_SCALE, rng),
        }
    }

    pub fn zeros(input: usize, hidden: usize) -> Self {
        Lstm {
            w_x: Matrix::zeros(input, 4 * hidden),
            w_h: Matrix::zeros(hidden, 4 * hidden),
            b: Matrix::zeros(1, 4 * hidden),
        }
    }

    pub fn hidden(&self) -> usize {
        self.w_h.rows()
    }

    pub fn input(&self) -> usize {
        self.w_x.rows()
    }

    /// Advances `(h, c)` by one step. Rows with `mask == 0` keep their previous state.
    pub fn step(
        &self,
        x: &Matrix,
        h_prev: &Matrix,
        c_prev: &Matrix,
        mask: &[f64],
    ) -> Result<(Matrix, Matrix, LstmStepCache)> {
        let hid = self.hidden();
        let batch = x.rows();
        let mut gates = Matrix::zeros(batch, 4 * hid);
        matmul_into(&mut gates, x, &self.w_x, false)?;
        matmul_into(&mut gates, h_prev, &self.w_h, true)?;
        gates.add_row_broadcast(&self.b)?;
        let mut h = Matrix::zeros(batch, hid);
        let mut c = Matrix::zeros(batch, hid);
        let mut tanh_c = Matrix::zeros(batch, hid);
        for r in 0..batch {
            let g = gates.row_mut(r);
            for k in 0..hid {
                g[k] = sigmoid(g[k]);
                g[hid + k] = sigmoid(g[hid + k]);
                g[2 * hid + k] = g[2 * hid + k].tanh();
                g[3 * hid + k] = sigmoid(g[3 * hid + k]);
            }
            let g = gates.row(r);
            let m = mask[r];
            let (hp, cp) = (h_prev.row(r), c_prev.row(r));
            for k in 0..hid {
                let cn = g[hid + k] * cp[k] + g[k] * g[2 * hid + k];
                let tc = cn.tanh();
                tanh_c.set(r, k, tc);
                let hn = g[3 * hid + k] * tc;
                c.set(r, k, m * cn + (1.0 - m) * cp[k]);
                h.set(r, k, m * hn + (1.0 - m) * hp[k]);
            }
        }
        let cache = LstmStepCache {
            x: x.clone(),
            h_prev: h_prev.clone(),
            c_prev: c_prev.clone(),
            gates,
            tanh_c,
            mask: mask.to_vec(),
        };
        Ok((h, c, cache))
    }

    /// Backward through one step given gradients on the emitted `(h, c)`.
    /// Accumulates weight gradients into `grad`; returns `(dx, dh_prev, dc_prev)`.
    pub fn step_backward(
        &self,
        cache: &LstmStepCache,
        dh: &Matrix,
        dc: &Matrix,
        grad: &mut Lstm,
    ) -> Result<(Matrix, Matrix, Matrix)> {
        let hid = self.hidden();
        let batch = dh.rows();
        let mut dpre = Matrix::zeros(batch, 4 * hid);
        let mut dh_prev = Matrix::zeros(batch, hid);
        let mut dc_prev = Matrix::zeros(batch, hid);
        for r in 0..batch {
            let m = cache.mask[r];
            let g = cache.gates.row(r);
            let cp = cache.c_prev.row(r);
            let tc = cache.tanh_c.row(r);
            let (dhr, dcr) = (dh.row(r), dc.row(r));
            let dp = dpre.row_mut(r);
            for k in 0..hid {
                let (i, f, gg, o) = (g[k], g[hid + k], g[2 * hid + k], g[3 * hid + k]);
                let dh_new = m * dhr[k];
                let dc_new = m * dcr[k] + dh_new * o * (1.0 - tc[k] * tc[k]);
                dp[k] = dc_new * gg * i * (1.0 - i);
                dp[hid + k] = dc_new * cp[k] * f * (1.0 - f);
                dp[2 * hid + k] = dc_new * i * (1.0 - gg * gg);
                dp[3 * hid + k] = dh_new * tc[k] * o * (1.0 - o);
                dc_prev.set(r, k, dc_new * f + (1.0 - m) * dcr[k]);
                dh_prev.set(r, k, (1.0 - m) * dhr[k]);
            }
        }
        matmul_tn_into(&mut grad.w_x, &cache.x, &dpre, true)?;
        matmul_tn_into(&mut grad.w_h, &cache.h_prev, &dpre, true)?;
        grad.b.add_assign(&dpre.col_sums())?;
        let dx = matmul_nt(&dpre, &self.w_x)?;
        let dh_rec = matmul_nt(&dpre, &self.w_h)?;
        dh_prev.add_assign(&dh_rec)?;
        Ok((dx, dh_prev, dc_prev))
    }
}
