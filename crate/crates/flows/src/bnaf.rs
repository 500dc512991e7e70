use crate::standardize::Standardizer;
use crate::{Error, Result, LN_2PI};
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, Normal};
use rnpe_autodiff::{log_sum_exp, ParameterLayout, ParameterVector, Tape, Tensor, Var};
use serde::{Deserialize, Serialize};

/// Saturating nonlinearity used between the block layers.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum BnafActivation {
    Tanh,
    /// tanh inside [-cutoff, cutoff], extended linearly outside so the flow
    /// stays surjective onto R (bounded output would truncate base mass).
    LinearTail { cutoff: f64 },
}

impl BnafActivation {
    fn cutoff(&self) -> f64 {
        match self {
            BnafActivation::Tanh => f64::INFINITY,
            BnafActivation::LinearTail { cutoff } => *cutoff,
        }
    }
}

/// Block autoregressive flow with one hidden layer of `hidden_per_dim`
/// units per dimension. Evaluation-only: there is no sampling path.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BnafSpec {
    pub dim: usize,
    pub hidden_per_dim: usize,
    pub activation: BnafActivation,
}

impl BnafSpec {
    pub fn new(dim: usize) -> Self {
        Self {
            dim,
            hidden_per_dim: 8,
            activation: BnafActivation::LinearTail { cutoff: 2.0 },
        }
    }

    pub fn hidden(&self) -> usize {
        self.dim * self.hidden_per_dim
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.hidden_per_dim == 0 {
            return Err(Error::BadConfig {
                reason: "dim and hidden_per_dim must be positive".into(),
            });
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct BnafModel {
    pub spec: BnafSpec,
    pub params: ParameterVector,
    pub standardizer: Standardizer,
}

fn sat_tanh(x: f64, cut: f64) -> f64 {
    if x.abs() <= cut {
        x.tanh()
    } else {
        let slope = 1.0 - cut.tanh() * cut.tanh();
        x.signum() * cut.tanh() + (x - x.signum() * cut) * slope
    }
}

fn sat_tanh_deriv(x: f64, cut: f64) -> f64 {
    let t = x.abs().min(cut).tanh();
    1.0 - t * t
}

fn log_sech2(x: f64) -> f64 {
    2.0 * (std::f64::consts::LN_2 - x.abs() - (-2.0 * x.abs()).exp().ln_1p())
}

fn sat_tanh_log_deriv(x: f64, cut: f64) -> f64 {
    log_sech2(x.abs().min(cut))
}

fn sat_tanh_dlog_deriv(x: f64, cut: f64) -> f64 {
    if x.abs() < cut {
        -2.0 * x.tanh()
    } else {
        0.0
    }
}

impl BnafModel {
    pub fn new(spec: BnafSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let d = spec.dim;
        let h = spec.hidden();
        let hp = spec.hidden_per_dim;
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let small = Normal::new(0.0, 0.1).unwrap();
        let mut w1 = vec![0.0; d * h];
        for j in 0..d {
            for c in 0..h {
                let blk = c / hp;
                if j < blk {
                    w1[j * h + c] = small.sample(&mut rng);
                } else if j == blk {
                    w1[j * h + c] = small.sample(&mut rng);
                }
            }
        }
        let mut w2 = vec![0.0; h * d];
        for r in 0..h {
            let blk = r / hp;
            for c in 0..d {
                if blk < c {
                    w2[r * d + c] = small.sample(&mut rng);
                } else if blk == c {
                    w2[r * d + c] = -(hp as f64).ln() + small.sample(&mut rng);
                }
            }
        }
        let mut layout = ParameterLayout::new();
        layout.push("w1", vec![d, h], w1);
        layout.push("b1", vec![h], vec![0.0; h]);
        layout.push("w2", vec![h, d], w2);
        layout.push("b2", vec![d], vec![0.0; d]);
        Ok(Self {
            params: layout.finish(),
            standardizer: Standardizer::identity(d),
            spec,
        })
    }

    fn seg(&self, name: &str) -> &[f64] {
        let s = self.params.segment(name).unwrap();
        &self.params.data()[s.offset..s.offset + s.len]
    }

    /// Effective (masked, diag-exponentiated) weights and summed log
    /// diagonal blocks, precomputed for repeated evaluation.
    pub fn evaluator(&self) -> BnafEvaluator {
        let d = self.spec.dim;
        let h = self.spec.hidden();
        let hp = self.spec.hidden_per_dim;
        let p1 = self.seg("w1");
        let p2 = self.seg("w2");
        let mut w1 = vec![0.0; d * h];
        for j in 0..d {
            for c in 0..h {
                let blk = c / hp;
                w1[j * h + c] = if j < blk {
                    p1[j * h + c]
                } else if j == blk {
                    p1[j * h + c].exp()
                } else {
                    0.0
                };
            }
        }
        let mut w2 = vec![0.0; h * d];
        for r in 0..h {
            let blk = r / hp;
            for c in 0..d {
                w2[r * d + c] = if blk < c {
                    p2[r * d + c]
                } else if blk == c {
                    p2[r * d + c].exp()
                } else {
                    0.0
                };
            }
        }
        let mut log_diag = vec![0.0; d * hp];
        for i in 0..d {
            for t in 0..hp {
                let r = i * hp + t;
                log_diag[i * hp + t] = p1[i * h + r] + p2[r * d + i];
            }
        }
        BnafEvaluator {
            dim: d,
            hidden: h,
            hidden_per_dim: hp,
            cutoff: self.spec.activation.cutoff(),
            w1,
            b1: self.seg("b1").to_vec(),
            w2,
            b2: self.seg("b2").to_vec(),
            log_diag,
            standardizer: self.standardizer.clone(),
        }
    }

    /// Log density of raw-space points, one per row.
    pub fn log_prob_batch(&self, points: &[f64]) -> Result<Vec<f64>> {
        let ev = self.evaluator();
        ev.log_prob_batch(points)
    }

    pub fn log_prob(&self, point: &[f64]) -> Result<f64> {
        Ok(self.log_prob_batch(point)?[0])
    }

    /// Gradient of the raw-space log density with respect to the point.
    pub fn grad_log_prob_input(&self, point: &[f64]) -> Result<Vec<f64>> {
        let ev = self.evaluator();
        if point.len() != ev.dim {
            return Err(Error::DimensionMismatch {
                what: "point",
                expected: ev.dim,
                got: point.len(),
            });
        }
        let z = ev.standardizer.apply_row(point);
        let (_, grad_std) = ev.log_density_std_grad(&z);
        Ok(grad_std
            .iter()
            .zip(&ev.standardizer.scale)
            .map(|(g, s)| g / s)
            .collect())
    }

    /// Mean NLL of a standardized batch on the tape (training path).
    pub(crate) fn tape_nll(
        &self,
        tape: &mut Tape,
        params_var: Var,
        points_std: &Tensor,
    ) -> Result<Var> {
        let d = self.spec.dim;
        let h = self.spec.hidden();
        let hp = self.spec.hidden_per_dim;
        let n = points_std.shape()[0];
        let cut = self.spec.activation.cutoff();

        let mut free1 = vec![0.0; d * h];
        let mut diag1 = vec![0.0; d * h];
        for j in 0..d {
            for c in 0..h {
                let blk = c / hp;
                if j < blk {
                    free1[j * h + c] = 1.0;
                } else if j == blk {
                    diag1[j * h + c] = 1.0;
                }
            }
        }
        let mut free2 = vec![0.0; h * d];
        let mut diag2 = vec![0.0; h * d];
        for r in 0..h {
            let blk = r / hp;
            for c in 0..d {
                if blk < c {
                    free2[r * d + c] = 1.0;
                } else if blk == c {
                    diag2[r * d + c] = 1.0;
                }
            }
        }

        let w1_seg = self.params.segment("w1").unwrap().clone();
        let b1_seg = self.params.segment("b1").unwrap().clone();
        let w2_seg = self.params.segment("w2").unwrap().clone();
        let b2_seg = self.params.segment("b2").unwrap().clone();

        let p1 = tape.slice(params_var, w1_seg.offset, w1_seg.len)?;
        let p1 = tape.reshape(p1, vec![d, h])?;
        let p2 = tape.slice(params_var, w2_seg.offset, w2_seg.len)?;
        let p2 = tape.reshape(p2, vec![h, d])?;
        let b1 = tape.slice(params_var, b1_seg.offset, b1_seg.len)?;
        let b2 = tape.slice(params_var, b2_seg.offset, b2_seg.len)?;

        let m_free1 = tape.constant(Tensor::matrix(d, h, free1)?)?;
        let m_diag1 = tape.constant(Tensor::matrix(d, h, diag1)?)?;
        let m_free2 = tape.constant(Tensor::matrix(h, d, free2)?)?;
        let m_diag2 = tape.constant(Tensor::matrix(h, d, diag2)?)?;

        let w1 = {
            let f = tape.mul(p1, m_free1)?;
            let e = tape.exp(p1)?;
            let de = tape.mul(e, m_diag1)?;
            tape.add(f, de)?
        };
        let w2 = {
            let f = tape.mul(p2, m_free2)?;
            let e = tape.exp(p2)?;
            let de = tape.mul(e, m_diag2)?;
            tape.add(f, de)?
        };

        let x = tape.constant(points_std.clone())?;
        let hpre = {
            let prod = tape.matmul(x, w1)?;
            tape.add(prod, b1)?
        };
        let a = tape.sat_tanh(hpre, cut)?;
        let ldact = tape.sat_tanh_log_deriv(hpre, cut)?;
        let y = {
            let prod = tape.matmul(a, w2)?;
            tape.add(prod, b2)?
        };

        let sq = tape.mul(y, y)?;
        let terms = tape.axpb(sq, -0.5, -0.5 * LN_2PI)?;
        let base = tape.sum_rows(terms)?;

        let mut logdet: Option<Var> = None;
        for i in 0..d {
            let cols: Vec<usize> = (i * hp..(i + 1) * hp).collect();
            let ld_cols = tape.select_cols(ldact, &cols)?;
            let idx1: Vec<usize> = (0..hp).map(|t| i * h + i * hp + t).collect();
            let idx2: Vec<usize> = (0..hp).map(|t| (i * hp + t) * d + i).collect();
            let g1 = tape.gather_flat(p1, &idx1)?;
            let g2 = tape.gather_flat(p2, &idx2)?;
            let ksum = tape.add(g1, g2)?;
            let inner = tape.add(ld_cols, ksum)?;
            let contrib = tape.log_sum_exp_rows(inner)?;
            logdet = Some(match logdet {
                Some(acc) => tape.add(acc, contrib)?,
                None => contrib,
            });
        }
        let per_row = tape.add(base, logdet.expect("dim >= 1"))?;
        let total = tape.sum(per_row)?;
        Ok(tape.axpb(total, -1.0 / n as f64, 0.0)?)
    }
}

/// Immutable prepared form of a trained model; cheap repeated evaluation
/// of densities and input gradients (the sampler's inner loop).
#[derive(Debug, Clone)]
pub struct BnafEvaluator {
    dim: usize,
    hidden: usize,
    hidden_per_dim: usize,
    cutoff: f64,
    w1: Vec<f64>,
    b1: Vec<f64>,
    w2: Vec<f64>,
    b2: Vec<f64>,
    log_diag: Vec<f64>,
    pub standardizer: Standardizer,
}

impl BnafEvaluator {
    pub fn dim(&self) -> usize {
        self.dim
    }

    fn forward(&self, z: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let (d, h) = (self.dim, self.hidden);
        let mut hpre = self.b1.clone();
        for j in 0..d {
            let zj = z[j];
            if zj == 0.0 {
                continue;
            }
            let row = &self.w1[j * h..(j + 1) * h];
            for (o, w) in hpre.iter_mut().zip(row) {
                *o += zj * w;
            }
        }
        let mut y = self.b2.clone();
        for r in 0..h {
            let ar = sat_tanh(hpre[r], self.cutoff);
            if ar == 0.0 {
                continue;
            }
            let row = &self.w2[r * d..(r + 1) * d];
            for (o, w) in y.iter_mut().zip(row) {
                *o += ar * w;
            }
        }
        (hpre, y)
    }

    /// Base-space image of a standardized point.
    pub fn transform(&self, z: &[f64]) -> Vec<f64> {
        self.forward(z).1
    }

    /// Log density in standardized space (no standardizer correction).
    pub fn log_density_std(&self, z: &[f64]) -> f64 {
        let (hpre, y) = self.forward(z);
        let base: f64 = y.iter().map(|v| -0.5 * v * v - 0.5 * LN_2PI).sum();
        base + self.log_det(&hpre)
    }

    fn log_det(&self, hpre: &[f64]) -> f64 {
        let hp = self.hidden_per_dim;
        let mut total = 0.0;
        let mut q = vec![0.0; hp];
        for i in 0..self.dim {
            for t in 0..hp {
                q[t] = sat_tanh_log_deriv(hpre[i * hp + t], self.cutoff)
                    + self.log_diag[i * hp + t];
            }
            total += log_sum_exp(&q);
        }
        total
    }

    /// Log density and its gradient in standardized space.
    pub fn log_density_std_grad(&self, z: &[f64]) -> (f64, Vec<f64>) {
        let (d, h, hp) = (self.dim, self.hidden, self.hidden_per_dim);
        let (hpre, y) = self.forward(z);
        let base: f64 = y.iter().map(|v| -0.5 * v * v - 0.5 * LN_2PI).sum();

        // dh accumulates dF/dh_r across the base and log-det terms.
        let mut dh = vec![0.0; h];
        for r in 0..h {
            let row = &self.w2[r * d..(r + 1) * d];
            let da: f64 = y.iter().zip(row).map(|(yc, w)| -yc * w).sum();
            dh[r] = da * sat_tanh_deriv(hpre[r], self.cutoff);
        }
        let mut logdet = 0.0;
        let mut q = vec![0.0; hp];
        for i in 0..d {
            for t in 0..hp {
                q[t] = sat_tanh_log_deriv(hpre[i * hp + t], self.cutoff)
                    + self.log_diag[i * hp + t];
            }
            let lse = log_sum_exp(&q);
            logdet += lse;
            for t in 0..hp {
                let omega = (q[t] - lse).exp();
                dh[i * hp + t] += omega * sat_tanh_dlog_deriv(hpre[i * hp + t], self.cutoff);
            }
        }
        let mut grad = vec![0.0; d];
        for j in 0..d {
            let row = &self.w1[j * h..(j + 1) * h];
            grad[j] = row.iter().zip(&dh).map(|(w, g)| w * g).sum();
        }
        (base + logdet, grad)
    }

    pub fn log_prob_batch(&self, points: &[f64]) -> crate::Result<Vec<f64>> {
        let d = self.dim;
        if points.is_empty() || points.len() % d != 0 {
            return Err(Error::DimensionMismatch {
                what: "points",
                expected: d,
                got: points.len(),
            });
        }
        let correction = self.standardizer.log_det_correction();
        Ok(points
            .chunks(d)
            .map(|row| {
                let z = self.standardizer.apply_row(row);
                self.log_density_std(&z) + correction
            })
            .collect())
    }
}
