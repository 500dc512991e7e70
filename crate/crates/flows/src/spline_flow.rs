use crate::mlp::{sample_standard_normal, MlpShape};
use crate::spline::{derivative_shift, knots_from_raw, spline_forward, spline_inverse, KnotSet,
    MIN_BIN_FRACTION, MIN_DERIVATIVE};
use crate::standardize::Standardizer;
use crate::{Error, Result, LN_2PI};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use rnpe_autodiff::{ParameterLayout, ParameterVector, Tape, Tensor, Var};
use serde::{Deserialize, Serialize};

/// Conditional coupling flow built from monotone rational-quadratic
/// spline transforms with identity tails.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplineFlowSpec {
    pub dim: usize,
    pub context_dim: usize,
    pub num_layers: usize,
    pub bins: usize,
    pub interval: (f64, f64),
    pub hidden_width: usize,
    pub hidden_layers: usize,
}

impl SplineFlowSpec {
    pub fn new(dim: usize, context_dim: usize) -> Self {
        Self {
            dim,
            context_dim,
            num_layers: 5,
            bins: 10,
            interval: (-5.0, 5.0),
            hidden_width: 50usize.max(10 * context_dim),
            hidden_layers: 2,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.context_dim == 0 {
            return Err(Error::BadConfig {
                reason: "dim and context_dim must be positive".into(),
            });
        }
        if self.bins < 1 || self.num_layers < 1 {
            return Err(Error::BadConfig {
                reason: "bins and num_layers must be at least 1".into(),
            });
        }
        if !(self.interval.0 < self.interval.1) {
            return Err(Error::BadConfig {
                reason: "interval lower bound must be below the upper bound".into(),
            });
        }
        Ok(())
    }

    /// Dimensions transformed by layer `l`. A single-dimension flow has no
    /// split: every layer transforms it, conditioned on the context alone.
    fn transformed_dims(&self, l: usize) -> Vec<usize> {
        if self.dim == 1 {
            vec![0]
        } else {
            (0..self.dim).filter(|i| i % 2 == l % 2).collect()
        }
    }

    fn conditioning_dims(&self, l: usize) -> Vec<usize> {
        if self.dim == 1 {
            vec![]
        } else {
            (0..self.dim).filter(|i| i % 2 != l % 2).collect()
        }
    }

    /// Raw spline parameters per transformed dimension.
    fn block(&self) -> usize {
        3 * self.bins - 1
    }

    fn mlp_shape(&self, l: usize) -> MlpShape {
        MlpShape {
            input: self.conditioning_dims(l).len() + self.context_dim,
            hidden: self.hidden_width,
            hidden_layers: self.hidden_layers,
            output: self.transformed_dims(l).len() * self.block(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct SplineFlowModel {
    pub spec: SplineFlowSpec,
    pub params: ParameterVector,
    pub input_standardizer: Standardizer,
    pub context_standardizer: Standardizer,
}

/// Conditioning data for batched evaluation.
#[derive(Debug, Clone, Copy)]
pub enum Context<'a> {
    /// One context row shared by every point.
    Shared(&'a [f64]),
    /// One context row per point, row-major.
    PerRow(&'a [f64]),
}

impl SplineFlowModel {
    /// Identity-initialized model: conditioner heads start at zero, so the
    /// flow maps the base distribution through unchanged.
    pub fn new(spec: SplineFlowSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let mut layout = ParameterLayout::new();
        for l in 0..spec.num_layers {
            spec.mlp_shape(l)
                .init_into(&mut layout, &format!("layer{l}"), true, &mut rng);
        }
        Ok(Self {
            input_standardizer: Standardizer::identity(spec.dim),
            context_standardizer: Standardizer::identity(spec.context_dim),
            spec,
            params: layout.finish(),
        })
    }

    fn check_point_dim(&self, len: usize) -> Result<usize> {
        if len == 0 || len % self.spec.dim != 0 {
            return Err(Error::DimensionMismatch {
                what: "point",
                expected: self.spec.dim,
                got: len,
            });
        }
        Ok(len / self.spec.dim)
    }

    fn standardized_context(&self, context: Context, n: usize) -> Result<Vec<f64>> {
        let d = self.spec.context_dim;
        match context {
            Context::Shared(row) => {
                if row.len() != d {
                    return Err(Error::DimensionMismatch {
                        what: "context",
                        expected: d,
                        got: row.len(),
                    });
                }
                let std = self.context_standardizer.apply_row(row);
                let mut out = Vec::with_capacity(n * d);
                for _ in 0..n {
                    out.extend_from_slice(&std);
                }
                Ok(out)
            }
            Context::PerRow(rows) => {
                if rows.len() != n * d {
                    return Err(Error::DimensionMismatch {
                        what: "context rows",
                        expected: n * d,
                        got: rows.len(),
                    });
                }
                let mut out = rows.to_vec();
                self.context_standardizer.apply_rows(&mut out);
                Ok(out)
            }
        }
    }

    /// Log density of each point (raw space) under the conditional flow.
    pub fn log_prob_batch(&self, points: &[f64], context: Context) -> Result<Vec<f64>> {
        let n = self.check_point_dim(points.len())?;
        let dim = self.spec.dim;
        let correction = self.input_standardizer.log_det_correction();

        // Shared-context single-dimension case: the spline parameters depend
        // on the context only, so knots are computed once per layer.
        if dim == 1 {
            if let Context::Shared(row) = context {
                let ctx = self.standardized_context(Context::Shared(row), 1)?;
                let knots = self.shared_knots(&ctx)?;
                let mut out = Vec::with_capacity(n);
                for p in points {
                    let mut z = (p - self.input_standardizer.mean[0])
                        / self.input_standardizer.scale[0];
                    let mut logdet = 0.0;
                    for ks in &knots {
                        let (next, ld) = self.transform_scalar(ks, z, false);
                        z = next;
                        logdet += ld;
                    }
                    out.push(-0.5 * z * z - 0.5 * LN_2PI + logdet + correction);
                }
                return Ok(out);
            }
        }

        let ctx = self.standardized_context(context, n)?;
        let mut z = points.to_vec();
        self.input_standardizer.apply_rows(&mut z);
        let mut logdet = vec![0.0; n];
        for l in 0..self.spec.num_layers {
            self.apply_layer_forward(l, &mut z, &ctx, n, &mut logdet);
        }
        let mut out = Vec::with_capacity(n);
        for i in 0..n {
            let base: f64 = z[i * dim..(i + 1) * dim]
                .iter()
                .map(|v| -0.5 * v * v - 0.5 * LN_2PI)
                .sum();
            out.push(base + logdet[i] + correction);
        }
        Ok(out)
    }

    pub fn log_prob(&self, point: &[f64], context: &[f64]) -> Result<f64> {
        Ok(self.log_prob_batch(point, Context::Shared(context))?[0])
    }

    /// Knot sets per layer for a single standardized context row (dim == 1).
    fn shared_knots(&self, ctx_std: &[f64]) -> Result<Vec<KnotSet>> {
        let mut knots = Vec::with_capacity(self.spec.num_layers);
        for l in 0..self.spec.num_layers {
            let raw = self
                .spec
                .mlp_shape(l)
                .forward(&self.params, &format!("layer{l}"), ctx_std, 1);
            knots.push(knots_from_raw(
                &raw,
                self.spec.bins,
                self.spec.interval.0,
                self.spec.interval.1,
            ));
        }
        Ok(knots)
    }

    fn transform_scalar(&self, ks: &KnotSet, v: f64, inverse: bool) -> (f64, f64) {
        let (lo, hi) = self.spec.interval;
        if !(lo..=hi).contains(&v) {
            return (v, 0.0);
        }
        if inverse {
            spline_inverse(ks, v)
        } else {
            spline_forward(ks, v)
        }
    }

    fn apply_layer_forward(
        &self,
        l: usize,
        z: &mut [f64],
        ctx: &[f64],
        n: usize,
        logdet: &mut [f64],
    ) {
        let dim = self.spec.dim;
        let d_ctx = self.spec.context_dim;
        let cond = self.spec.conditioning_dims(l);
        let trans = self.spec.transformed_dims(l);
        let in_dim = cond.len() + d_ctx;
        let mut input = vec![0.0; n * in_dim];
        for i in 0..n {
            for (jj, &j) in cond.iter().enumerate() {
                input[i * in_dim + jj] = z[i * dim + j];
            }
            input[i * in_dim + cond.len()..(i + 1) * in_dim]
                .copy_from_slice(&ctx[i * d_ctx..(i + 1) * d_ctx]);
        }
        let raw = self
            .spec
            .mlp_shape(l)
            .forward(&self.params, &format!("layer{l}"), &input, n);
        let block = self.spec.block();
        let out_dim = trans.len() * block;
        for i in 0..n {
            for (jj, &j) in trans.iter().enumerate() {
                let ks = knots_from_raw(
                    &raw[i * out_dim + jj * block..i * out_dim + (jj + 1) * block],
                    self.spec.bins,
                    self.spec.interval.0,
                    self.spec.interval.1,
                );
                let (out, ld) = self.transform_scalar(&ks, z[i * dim + j], false);
                z[i * dim + j] = out;
                logdet[i] += ld;
            }
        }
    }

    /// Map raw points to the base space. The returned log-determinant
    /// includes the standardizer correction, so the log density equals
    /// the base log pdf of the returned point plus this value.
    pub fn transform_to_base(&self, points: &[f64], context: Context) -> Result<(Vec<f64>, Vec<f64>)> {
        let n = self.check_point_dim(points.len())?;
        let ctx = self.standardized_context(context, n)?;
        let mut z = points.to_vec();
        self.input_standardizer.apply_rows(&mut z);
        let mut logdet = vec![self.input_standardizer.log_det_correction(); n];
        for l in 0..self.spec.num_layers {
            self.apply_layer_forward(l, &mut z, &ctx, n, &mut logdet);
        }
        Ok((z, logdet))
    }

    /// Inverse of [`transform_to_base`]: base points back to raw space.
    pub fn transform_from_base(&self, base: &[f64], context: Context) -> Result<Vec<f64>> {
        let n = self.check_point_dim(base.len())?;
        let ctx = self.standardized_context(context, n)?;
        let mut z = base.to_vec();
        for l in (0..self.spec.num_layers).rev() {
            self.apply_layer_inverse(l, &mut z, &ctx, n);
        }
        self.input_standardizer.invert_rows(&mut z);
        Ok(z)
    }

    /// Draw `n` points conditioned on one raw context row.
    pub fn sample(&self, n: usize, context: &[f64], rng: &mut impl Rng) -> Result<Vec<f64>> {
        let dim = self.spec.dim;
        let ctx1 = self.standardized_context(Context::Shared(context), 1)?;
        let mut z = sample_standard_normal(rng, n * dim);

        if dim == 1 {
            let knots = self.shared_knots(&ctx1)?;
            for v in z.iter_mut() {
                for ks in knots.iter().rev() {
                    let (next, _) = self.transform_scalar(ks, *v, true);
                    *v = next;
                }
            }
        } else {
            let d_ctx = self.spec.context_dim;
            let mut ctx = Vec::with_capacity(n * d_ctx);
            for _ in 0..n {
                ctx.extend_from_slice(&ctx1);
            }
            for l in (0..self.spec.num_layers).rev() {
                self.apply_layer_inverse(l, &mut z, &ctx, n);
            }
        }
        self.input_standardizer.invert_rows(&mut z);
        Ok(z)
    }

    fn apply_layer_inverse(&self, l: usize, z: &mut [f64], ctx: &[f64], n: usize) {
        let dim = self.spec.dim;
        let d_ctx = self.spec.context_dim;
        let cond = self.spec.conditioning_dims(l);
        let trans = self.spec.transformed_dims(l);
        let in_dim = cond.len() + d_ctx;
        let mut input = vec![0.0; n * in_dim];
        for i in 0..n {
            for (jj, &j) in cond.iter().enumerate() {
                input[i * in_dim + jj] = z[i * dim + j];
            }
            input[i * in_dim + cond.len()..(i + 1) * in_dim]
                .copy_from_slice(&ctx[i * d_ctx..(i + 1) * d_ctx]);
        }
        let raw = self
            .spec
            .mlp_shape(l)
            .forward(&self.params, &format!("layer{l}"), &input, n);
        let block = self.spec.block();
        let out_dim = trans.len() * block;
        for i in 0..n {
            for (jj, &j) in trans.iter().enumerate() {
                let ks = knots_from_raw(
                    &raw[i * out_dim + jj * block..i * out_dim + (jj + 1) * block],
                    self.spec.bins,
                    self.spec.interval.0,
                    self.spec.interval.1,
                );
                let (out, _) = self.transform_scalar(&ks, z[i * dim + j], true);
                z[i * dim + j] = out;
            }
        }
    }

    /// Mean negative log-likelihood over a standardized batch, on the tape.
    pub(crate) fn tape_nll(
        &self,
        tape: &mut Tape,
        params_var: Var,
        points_std: &Tensor,
        ctx_std: &Tensor,
    ) -> Result<Var> {
        let n = points_std.shape()[0];
        let dim = self.spec.dim;
        let ctx = tape.constant(ctx_std.clone())?;
        let mut z = tape.constant(points_std.clone())?;
        let mut logdet: Option<Var> = None;

        for l in 0..self.spec.num_layers {
            let cond = self.spec.conditioning_dims(l);
            let trans = self.spec.transformed_dims(l);
            let mlp_input = if cond.is_empty() {
                ctx
            } else {
                let zc = tape.select_cols(z, &cond)?;
                tape.concat_cols(&[zc, ctx])?
            };
            let raw = self.spec.mlp_shape(l).forward_tape(
                tape,
                &self.params,
                params_var,
                &format!("layer{l}"),
                mlp_input,
            )?;
            let block = self.spec.block();
            let mut new_cols: Vec<Option<Var>> = vec![None; dim];
            for &j in &cond {
                let col = tape.select_cols(z, &[j])?;
                new_cols[j] = Some(col);
            }
            for (jj, &j) in trans.iter().enumerate() {
                let raw_block: Vec<usize> = (jj * block..(jj + 1) * block).collect();
                let raw_j = tape.select_cols(raw, &raw_block)?;
                let vcol = tape.select_cols(z, &[j])?;
                let v = tape.reshape(vcol, vec![n])?;
                let (y, ld) = self.tape_spline(tape, raw_j, v, n)?;
                logdet = Some(match logdet {
                    Some(acc) => tape.add(acc, ld)?,
                    None => ld,
                });
                let ycol = tape.reshape(y, vec![n, 1])?;
                new_cols[j] = Some(ycol);
            }
            let cols: Vec<Var> = new_cols.into_iter().map(|c| c.unwrap()).collect();
            z = tape.concat_cols(&cols)?;
        }

        let sq = tape.mul(z, z)?;
        let terms = tape.axpb(sq, -0.5, -0.5 * LN_2PI)?;
        let base = tape.sum_rows(terms)?;
        let per_row = match logdet {
            Some(ld) => tape.add(base, ld)?,
            None => base,
        };
        let total = tape.sum(per_row)?;
        Ok(tape.axpb(total, -1.0 / n as f64, 0.0)?)
    }

    /// Spline transform of one dimension on the tape. Rows outside the
    /// interval pass through as identity with zero log-derivative.
    fn tape_spline(&self, tape: &mut Tape, raw: Var, v: Var, n: usize) -> Result<(Var, Var)> {
        let k = self.spec.bins;
        let (lo, hi) = self.spec.interval;
        let span = hi - lo;

        let w_cols: Vec<usize> = (0..k).collect();
        let h_cols: Vec<usize> = (k..2 * k).collect();
        let d_cols: Vec<usize> = (2 * k..3 * k - 1).collect();
        let w_raw = tape.select_cols(raw, &w_cols)?;
        let h_raw = tape.select_cols(raw, &h_cols)?;
        let d_raw = tape.select_cols(raw, &d_cols)?;

        let (xknots, w) = self.tape_bins(tape, w_raw, n, span, lo)?;
        let (yknots, h) = self.tape_bins(tape, h_raw, n, span, lo)?;

        let shifted = tape.axpb(d_raw, 1.0, derivative_shift())?;
        let sp = tape.softplus(shifted)?;
        let dmid = tape.axpb(sp, 1.0, MIN_DERIVATIVE)?;
        let ones = tape.constant(Tensor::matrix(n, 1, vec![1.0; n])?)?;
        let dknots = tape.concat_cols(&[ones, dmid, ones])?;

        // Bin lookup and tail masking on concrete values.
        let mut bins = vec![0usize; n];
        let mut bins1 = vec![0usize; n];
        let mut mask = vec![0.0; n];
        let mut offset = vec![0.0; n];
        {
            let xv = tape.value(xknots).data().to_vec();
            let vv = tape.value(v).data();
            for i in 0..n {
                let inside = (lo..=hi).contains(&vv[i]);
                mask[i] = if inside { 1.0 } else { 0.0 };
                let safe = vv[i].clamp(lo, hi);
                offset[i] = if inside { 0.0 } else { safe };
                let row = &xv[i * (k + 1)..(i + 1) * (k + 1)];
                let mut b = row[1..k].partition_point(|&edge| edge <= safe);
                if b > k - 1 {
                    b = k - 1;
                }
                bins[i] = b;
                bins1[i] = b + 1;
            }
        }
        let mask_v = tape.constant(Tensor::vector(mask.clone()))?;
        let inv_mask_v =
            tape.constant(Tensor::vector(mask.iter().map(|m| 1.0 - m).collect()))?;
        let offset_v = tape.constant(Tensor::vector(offset))?;
        let vsafe = {
            let masked = tape.mul(v, mask_v)?;
            tape.add(masked, offset_v)?
        };

        let x0 = tape.gather_per_row(xknots, &bins)?;
        let y0 = tape.gather_per_row(yknots, &bins)?;
        let wk = tape.gather_per_row(w, &bins)?;
        let hk = tape.gather_per_row(h, &bins)?;
        let d0 = tape.gather_per_row(dknots, &bins)?;
        let d1 = tape.gather_per_row(dknots, &bins1)?;

        let s = tape.div(hk, wk)?;
        let diff = tape.sub(vsafe, x0)?;
        let xi = tape.div(diff, wk)?;
        let one_minus = tape.axpb(xi, -1.0, 1.0)?;
        let xi1 = tape.mul(xi, one_minus)?;
        let dsum = tape.add(d1, d0)?;
        let s2 = tape.axpb(s, 2.0, 0.0)?;
        let delta = tape.sub(dsum, s2)?;
        let den = {
            let t = tape.mul(delta, xi1)?;
            tape.add(s, t)?
        };
        let xisq = tape.mul(xi, xi)?;
        let num = {
            let a = tape.mul(s, xisq)?;
            let b = tape.mul(d0, xi1)?;
            let ab = tape.add(a, b)?;
            tape.mul(hk, ab)?
        };
        let y_spline = {
            let q = tape.div(num, den)?;
            tape.add(y0, q)?
        };
        let num2 = {
            let a = tape.mul(d1, xisq)?;
            let b = {
                let t = tape.mul(s, xi1)?;
                tape.axpb(t, 2.0, 0.0)?
            };
            let c = {
                let sq = tape.mul(one_minus, one_minus)?;
                tape.mul(d0, sq)?
            };
            let ab = tape.add(a, b)?;
            tape.add(ab, c)?
        };
        let ld_spline = {
            let ls = tape.log(s)?;
            let ls2 = tape.axpb(ls, 2.0, 0.0)?;
            let ln2 = tape.log(num2)?;
            let lden = tape.log(den)?;
            let lden2 = tape.axpb(lden, 2.0, 0.0)?;
            let t = tape.add(ls2, ln2)?;
            tape.sub(t, lden2)?
        };
        let y = {
            let a = tape.mul(y_spline, mask_v)?;
            let b = tape.mul(v, inv_mask_v)?;
            tape.add(a, b)?
        };
        let ld = tape.mul(ld_spline, mask_v)?;
        Ok((y, ld))
    }

    /// Softmax-normalized bin layout on the tape:
    /// returns (knot positions [n, K+1], absolute bin sizes [n, K]).
    fn tape_bins(
        &self,
        tape: &mut Tape,
        raw: Var,
        n: usize,
        span: f64,
        lo: f64,
    ) -> Result<(Var, Var)> {
        let k = self.spec.bins;
        let lse = tape.log_sum_exp_rows(raw)?;
        let lse_col = tape.reshape(lse, vec![n, 1])?;
        let centered = tape.sub(raw, lse_col)?;
        let sm = tape.exp(centered)?;
        let frac = tape.axpb(sm, 1.0 - k as f64 * MIN_BIN_FRACTION, MIN_BIN_FRACTION)?;
        let w = tape.axpb(frac, span, 0.0)?;
        let cum = tape.cumsum_rows(w)?;
        let tail = tape.axpb(cum, 1.0, lo)?;
        let lo_col = tape.constant(Tensor::matrix(n, 1, vec![lo; n])?)?;
        let knots = tape.concat_cols(&[lo_col, tail])?;
        Ok((knots, w))
    }
}
