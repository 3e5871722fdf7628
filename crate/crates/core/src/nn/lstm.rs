use crate::numerics::linalg::gemm;
use crate::numerics::{sigmoid, ParamSet, RngStream, Tensor};

/// LSTM cell with a single fused weight matrix of shape `(input + hidden) × 4·hidden`.
/// Gate blocks are ordered input, forget, candidate, output.
#[derive(Clone, Copy, Debug)]
pub struct Lstm {
    pub w: usize,
    pub b: usize,
    pub input: usize,
    pub hidden: usize,
}

/// Everything one forward step needs to be differentiated later.
#[derive(Clone, Debug)]
pub struct LstmStep {
    /// `[x, h_prev]` as fed to the gates (after any dropout the caller applied).
    concat: Vec<f64>,
    /// Activated gates, `batch × 4·hidden`.
    gates: Vec<f64>,
    c_prev: Vec<f64>,
    pub c: Vec<f64>,
    tanh_c: Vec<f64>,
    pub h: Vec<f64>,
}

impl Lstm {
    pub fn register(
        params: &mut ParamSet,
        name: &str,
        input: usize,
        hidden: usize,
        rng: &mut RngStream,
    ) -> Self {
        let rows = input + hidden;
        let w = Tensor::from_vec(
            &[rows, 4 * hidden],
            super::uniform_init(rng, rows * 4 * hidden, rows),
        )
        .expect("sized by construction");
        let mut b = Tensor::zeros(&[4 * hidden]);
        // Forget-gate bias starts at one.
        b.values_mut()[hidden..2 * hidden].fill(1.0);
        let w = params.push(format!("{name}.w"), w);
        let b = params.push(format!("{name}.b"), b);
        Self {
            w,
            b,
            input,
            hidden,
        }
    }

    pub fn bind(params: &ParamSet, name: &str) -> Option<Self> {
        let w = params.index_of(&format!("{name}.w"))?;
        let b = params.index_of(&format!("{name}.b"))?;
        let shape = params.get(w).shape();
        let hidden = shape[1] / 4;
        Some(Self {
            w,
            b,
            input: shape[0] - hidden,
            hidden,
        })
    }

    pub fn forward(
        &self,
        params: &ParamSet,
        x: &[f64],
        h_prev: &[f64],
        c_prev: &[f64],
        batch: usize,
    ) -> LstmStep {
        let (n_in, n_h) = (self.input, self.hidden);
        let width = n_in + n_h;
        let mut concat = vec![0.0; batch * width];
        for r in 0..batch {
            concat[r * width..r * width + n_in].copy_from_slice(&x[r * n_in..(r + 1) * n_in]);
            concat[r * width + n_in..(r + 1) * width]
                .copy_from_slice(&h_prev[r * n_h..(r + 1) * n_h]);
        }
        let bias = params.get(self.b).values();
        let mut gates = vec![0.0; batch * 4 * n_h];
        for row in gates.chunks_exact_mut(4 * n_h) {
            row.copy_from_slice(bias);
        }
        gemm(
            batch,
            width,
            4 * n_h,
            1.0,
            &concat,
            false,
            params.get(self.w).values(),
            false,
            1.0,
            &mut gates,
        );
        let mut c = vec![0.0; batch * n_h];
        let mut tanh_c = vec![0.0; batch * n_h];
        let mut h = vec![0.0; batch * n_h];
        for r in 0..batch {
            let g = &mut gates[r * 4 * n_h..(r + 1) * 4 * n_h];
            for u in 0..n_h {
                g[u] = sigmoid(g[u]);
                g[n_h + u] = sigmoid(g[n_h + u]);
                g[2 * n_h + u] = g[2 * n_h + u].tanh();
                g[3 * n_h + u] = sigmoid(g[3 * n_h + u]);
                let idx = r * n_h + u;
                c[idx] = g[n_h + u] * c_prev[idx] + g[u] * g[2 * n_h + u];
                tanh_c[idx] = c[idx].tanh();
                h[idx] = g[3 * n_h + u] * tanh_c[idx];
            }
        }
        LstmStep {
            concat,
            gates,
            c_prev: c_prev.to_vec(),
            c,
            tanh_c,
            h,
        }
    }

    /// Backpropagates one step. `dh` and `dc_next` are the gradients arriving
    /// at this step's `h` and `c`. Returns `(∂L/∂x, ∂L/∂h_prev, ∂L/∂c_prev)`,
    /// where `h_prev` means the (possibly masked) value passed to `forward`.
    pub fn backward(
        &self,
        params: &ParamSet,
        grads: &mut ParamSet,
        step: &LstmStep,
        dh: &[f64],
        dc_next: &[f64],
        batch: usize,
    ) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
        let (n_in, n_h) = (self.input, self.hidden);
        let width = n_in + n_h;
        let mut dpre = vec![0.0; batch * 4 * n_h];
        let mut dc_prev = vec![0.0; batch * n_h];
        for r in 0..batch {
            let g = &step.gates[r * 4 * n_h..(r + 1) * 4 * n_h];
            let d = &mut dpre[r * 4 * n_h..(r + 1) * 4 * n_h];
            for u in 0..n_h {
                let idx = r * n_h + u;
                let (i, f, cand, o) = (g[u], g[n_h + u], g[2 * n_h + u], g[3 * n_h + u]);
                let tc = step.tanh_c[idx];
                let dc = dc_next[idx] + dh[idx] * o * (1.0 - tc * tc);
                d[u] = dc * cand * i * (1.0 - i);
                d[n_h + u] = dc * step.c_prev[idx] * f * (1.0 - f);
                d[2 * n_h + u] = dc * i * (1.0 - cand * cand);
                d[3 * n_h + u] = dh[idx] * tc * o * (1.0 - o);
                dc_prev[idx] = dc * f;
            }
        }
        gemm(
            width,
            batch,
            4 * n_h,
            1.0,
            &step.concat,
            true,
            &dpre,
            false,
            1.0,
            grads.get_mut(self.w).values_mut(),
        );
        let db = grads.get_mut(self.b).values_mut();
        for row in dpre.chunks_exact(4 * n_h) {
            for (acc, v) in db.iter_mut().zip(row) {
                *acc += v;
            }
        }
        let mut dconcat = vec![0.0; batch * width];
        gemm(
            batch,
            4 * n_h,
            width,
            1.0,
            &dpre,
            false,
            params.get(self.w).values(),
            true,
            0.0,
            &mut dconcat,
        );
        let mut dx = vec![0.0; batch * n_in];
        let mut dh_prev = vec![0.0; batch * n_h];
        for r in 0..batch {
            dx[r * n_in..(r + 1) * n_in].copy_from_slice(&dconcat[r * width..r * width + n_in]);
            dh_prev[r * n_h..(r + 1) * n_h]
                .copy_from_slice(&dconcat[r * width + n_in..(r + 1) * width]);
        }
        (dx, dh_prev, dc_prev)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{finite_diff_grad, max_relative_error};

    /// Two-step unrolled loss `Σ h_2 · v` on a batch of two.
    fn unrolled_loss(params: &ParamSet, cell: &Lstm, xs: &[Vec<f64>; 2], v: &[f64]) -> f64 {
        let batch = 2;
        let zeros = vec![0.0; batch * cell.hidden];
        let s1 = cell.forward(params, &xs[0], &zeros, &zeros, batch);
        let s2 = cell.forward(params, &xs[1], &s1.h, &s1.c, batch);
        s2.h.iter().zip(v).map(|(h, w)| h * w).sum()
    }

    #[test]
    fn two_step_backward_matches_finite_differences() {
        let mut rng = RngStream::new(11);
        let mut params = ParamSet::new();
        let cell = Lstm::register(&mut params, "cell", 3, 4, &mut rng);
        let xs = [
            (0..6).map(|_| rng.normal(0.0, 1.0)).collect::<Vec<_>>(),
            (0..6).map(|_| rng.normal(0.0, 1.0)).collect::<Vec<_>>(),
        ];
        let v: Vec<f64> = (0..8).map(|_| rng.normal(0.0, 1.0)).collect();

        let batch = 2;
        let zeros = vec![0.0; batch * 4];
        let s1 = cell.forward(&params, &xs[0], &zeros, &zeros, batch);
        let s2 = cell.forward(&params, &xs[1], &s1.h, &s1.c, batch);
        let mut grads = params.zeros_like();
        let (_, dh1, dc1) = cell.backward(&params, &mut grads, &s2, &v, &zeros, batch);
        cell.backward(&params, &mut grads, &s1, &dh1, &dc1, batch);

        let flat = params.flatten();
        let numeric = finite_diff_grad(
            |theta| {
                let mut p = params.clone();
                p.assign_flat(theta).unwrap();
                unrolled_loss(&p, &cell, &xs, &v)
            },
            &flat,
            1e-5,
        )
        .unwrap();
        let err = max_relative_error(&grads.flatten(), &numeric, 1e-6);
        assert!(err < 1e-5, "max relative error {err}");
    }
}
