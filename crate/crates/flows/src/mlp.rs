use rand::Rng;
use rand_distr::{Distribution, Normal};
use rnpe_autodiff::{ParameterLayout, ParameterVector, Result as AdResult, Tape, Var};

/// Fully connected network with tanh hidden activations and a linear head.
/// Weights are stored input-major ([in, out]) so batches multiply directly.
#[derive(Debug, Clone, Copy)]
pub(crate) struct MlpShape {
    pub input: usize,
    pub hidden: usize,
    pub hidden_layers: usize,
    pub output: usize,
}

impl MlpShape {
    fn layer_dims(&self) -> Vec<(usize, usize)> {
        let mut dims = Vec::new();
        let mut prev = self.input;
        for _ in 0..self.hidden_layers {
            dims.push((prev, self.hidden));
            prev = self.hidden;
        }
        dims.push((prev, self.output));
        dims
    }

    /// Append weight/bias segments under `prefix`. `zero_head` makes the
    /// output layer exactly zero (identity initialization for flows).
    pub fn init_into(
        &self,
        layout: &mut ParameterLayout,
        prefix: &str,
        zero_head: bool,
        rng: &mut impl Rng,
    ) {
        let dims = self.layer_dims();
        let last = dims.len() - 1;
        for (l, (fan_in, fan_out)) in dims.into_iter().enumerate() {
            let std = 1.0 / (fan_in as f64).sqrt();
            let normal = Normal::new(0.0, std).unwrap();
            let w: Vec<f64> = if zero_head && l == last {
                vec![0.0; fan_in * fan_out]
            } else {
                (0..fan_in * fan_out).map(|_| normal.sample(rng)).collect()
            };
            layout.push(format!("{prefix}.w{l}"), vec![fan_in, fan_out], w);
            layout.push(format!("{prefix}.b{l}"), vec![fan_out], vec![0.0; fan_out]);
        }
    }

    pub fn forward(&self, params: &ParameterVector, prefix: &str, input: &[f64], n: usize) -> Vec<f64> {
        let mut cur = input.to_vec();
        let mut cur_dim = self.input;
        let dims = self.layer_dims();
        let last = dims.len() - 1;
        for (l, (fan_in, fan_out)) in dims.into_iter().enumerate() {
            debug_assert_eq!(cur_dim, fan_in);
            let w = params.segment(&format!("{prefix}.w{l}")).unwrap();
            let b = params.segment(&format!("{prefix}.b{l}")).unwrap();
            let wdata = &params.data()[w.offset..w.offset + w.len];
            let bdata = &params.data()[b.offset..b.offset + b.len];
            let mut next = vec![0.0; n * fan_out];
            for i in 0..n {
                let row = &cur[i * fan_in..(i + 1) * fan_in];
                let out = &mut next[i * fan_out..(i + 1) * fan_out];
                out.copy_from_slice(bdata);
                for (j, &x) in row.iter().enumerate() {
                    if x == 0.0 {
                        continue;
                    }
                    let wrow = &wdata[j * fan_out..(j + 1) * fan_out];
                    for (o, wv) in out.iter_mut().zip(wrow) {
                        *o += x * wv;
                    }
                }
                if l != last {
                    for o in out.iter_mut() {
                        *o = o.tanh();
                    }
                }
            }
            cur = next;
            cur_dim = fan_out;
        }
        cur
    }

    /// Same network on the tape, differentiating through `params_var`.
    pub fn forward_tape(
        &self,
        tape: &mut Tape,
        params: &ParameterVector,
        params_var: Var,
        prefix: &str,
        input: Var,
    ) -> AdResult<Var> {
        let dims = self.layer_dims();
        let last = dims.len() - 1;
        let mut cur = input;
        for (l, (fan_in, fan_out)) in dims.into_iter().enumerate() {
            let wseg = params.segment(&format!("{prefix}.w{l}")).unwrap();
            let bseg = params.segment(&format!("{prefix}.b{l}")).unwrap();
            let w = tape.slice(params_var, wseg.offset, wseg.len)?;
            let w = tape.reshape(w, vec![fan_in, fan_out])?;
            let b = tape.slice(params_var, bseg.offset, bseg.len)?;
            let prod = tape.matmul(cur, w)?;
            let mut out = tape.add(prod, b)?;
            if l != last {
                out = tape.tanh(out)?;
            }
            cur = out;
        }
        Ok(cur)
    }
}

pub(crate) fn sample_standard_normal(rng: &mut impl Rng, n: usize) -> Vec<f64> {
    let normal = Normal::new(0.0, 1.0).unwrap();
    (0..n).map(|_| normal.sample(rng)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha12Rng;
    use rnpe_autodiff::Tensor;

    #[test]
    fn concrete_and_tape_forward_agree() {
        let shape = MlpShape {
            input: 3,
            hidden: 8,
            hidden_layers: 2,
            output: 4,
        };
        let mut layout = ParameterLayout::new();
        let mut rng = ChaCha12Rng::seed_from_u64(7);
        shape.init_into(&mut layout, "net", false, &mut rng);
        let params = layout.finish();
        let input: Vec<f64> = (0..6).map(|i| 0.3 * i as f64 - 0.7).collect();
        let concrete = shape.forward(&params, "net", &input, 2);

        let mut tape = Tape::new();
        let pvar = tape.input(params.as_tensor()).unwrap();
        let ivar = tape
            .constant(Tensor::matrix(2, 3, input.clone()).unwrap())
            .unwrap();
        let out = shape
            .forward_tape(&mut tape, &params, pvar, "net", ivar)
            .unwrap();
        for (a, b) in concrete.iter().zip(tape.value(out).data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}
