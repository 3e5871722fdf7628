use crate::numerics::linalg::gemm;
use crate::numerics::{ParamSet, RngStream, Tensor};

/// Affine layer `y = x W + b` with `W: input × output`.
#[derive(Clone, Copy, Debug)]
pub struct Dense {
    pub w: usize,
    pub b: usize,
    pub input: usize,
    pub output: usize,
}

impl Dense {
    pub fn register(
        params: &mut ParamSet,
        name: &str,
        input: usize,
        output: usize,
        rng: &mut RngStream,
    ) -> Self {
        let w = Tensor::from_vec(
            &[input, output],
            super::uniform_init(rng, input * output, input),
        )
        .expect("sized by construction");
        let w = params.push(format!("{name}.w"), w);
        let b = params.push(format!("{name}.b"), Tensor::zeros(&[output]));
        Self {
            w,
            b,
            input,
            output,
        }
    }

    /// Rebinds a layer to tensors already present in `params`.
    pub fn bind(params: &ParamSet, name: &str) -> Option<Self> {
        let w = params.index_of(&format!("{name}.w"))?;
        let b = params.index_of(&format!("{name}.b"))?;
        let shape = params.get(w).shape();
        Some(Self {
            w,
            b,
            input: shape[0],
            output: shape[1],
        })
    }

    pub fn forward(&self, params: &ParamSet, x: &[f64], batch: usize, out: &mut [f64]) {
        let bias = params.get(self.b).values();
        for row in out.chunks_exact_mut(self.output).take(batch) {
            row.copy_from_slice(bias);
        }
        gemm(
            batch,
            self.input,
            self.output,
            1.0,
            x,
            false,
            params.get(self.w).values(),
            false,
            1.0,
            out,
        );
    }

    /// Accumulates weight gradients into `grads`; writes `∂L/∂x` when requested.
    pub fn backward(
        &self,
        params: &ParamSet,
        grads: &mut ParamSet,
        x: &[f64],
        dy: &[f64],
        batch: usize,
        dx: Option<&mut [f64]>,
    ) {
        gemm(
            self.input,
            batch,
            self.output,
            1.0,
            x,
            true,
            dy,
            false,
            1.0,
            grads.get_mut(self.w).values_mut(),
        );
        let db = grads.get_mut(self.b).values_mut();
        for row in dy.chunks_exact(self.output).take(batch) {
            for (d, g) in db.iter_mut().zip(row) {
                *d += g;
            }
        }
        if let Some(dx) = dx {
            gemm(
                batch,
                self.output,
                self.input,
                1.0,
                dy,
                false,
                params.get(self.w).values(),
                true,
                0.0,
                dx,
            );
        }
    }
}
