use crate::numkit::{Matrix, Rng};
use crate::{ensure, Result};

/// Frozen linear layer `W` (out × in) plus a trainable low-rank pair
/// `B` (out × r), `A` (r × in). The effective weight is `W + scale·B·A`.
#[derive(Clone, Debug, PartialEq)]
pub struct LoraLayer {
    pub(crate) frozen_w: Matrix,
    pub(crate) bias: Vec<f64>,
    pub(crate) b: Matrix,
    pub(crate) a: Matrix,
    scale: f64,
}

/// Attaches a rank-`rank` adapter to `frozen_w`: `A ~ N(0, 1/r)`, `B = 0`,
/// `scale = lora_alpha / r`.
pub fn init_lora(frozen_w: Matrix, rank: usize, lora_alpha: f64, rng: &mut Rng) -> Result<LoraLayer> {
    let bias = vec![0.0; frozen_w.rows()];
    LoraLayer::new(frozen_w, bias, rank, lora_alpha, rng)
}

impl LoraLayer {
    pub fn new(frozen_w: Matrix, bias: Vec<f64>, rank: usize, lora_alpha: f64, rng: &mut Rng) -> Result<Self> {
        let (out, inp) = frozen_w.shape();
        ensure!(rank >= 1, Config, "LoRA rank must be at least 1");
        ensure!(
            2 * rank <= out.min(inp),
            Config,
            "LoRA rank {rank} too large for a {out}x{inp} layer (max {})",
            out.min(inp) / 2
        );
        ensure!(bias.len() == out, Dimension, "bias has {} entries for {out} outputs", bias.len());
        let std = (1.0 / rank as f64).sqrt();
        let a = rng.gaussian_matrix(rank, inp).map(|v| v * std);
        Ok(Self {
            frozen_w,
            bias,
            b: Matrix::zeros(out, rank),
            a,
            scale: lora_alpha / rank as f64,
        })
    }

    /// Rebuilds a layer from stored parts.
    pub fn from_parts(frozen_w: Matrix, bias: Vec<f64>, b: Matrix, a: Matrix, scale: f64) -> Result<Self> {
        let (out, inp) = frozen_w.shape();
        let r = a.rows();
        ensure!(
            b.shape() == (out, r) && a.cols() == inp && bias.len() == out,
            Dimension,
            "LoRA parts do not fit: W {:?}, B {:?}, A {:?}, bias {}",
            frozen_w.shape(),
            b.shape(),
            a.shape(),
            bias.len()
        );
        Ok(Self {
            frozen_w,
            bias,
            b,
            a,
            scale,
        })
    }

    pub fn rank(&self) -> usize {
        self.a.rows()
    }

    pub fn scale(&self) -> f64 {
        self.scale
    }

    pub fn in_dim(&self) -> usize {
        self.frozen_w.cols()
    }

    pub fn out_dim(&self) -> usize {
        self.frozen_w.rows()
    }

    pub fn frozen_w(&self) -> &Matrix {
        &self.frozen_w
    }

    pub fn bias(&self) -> &[f64] {
        &self.bias
    }

    pub fn b(&self) -> &Matrix {
        &self.b
    }

    pub fn a(&self) -> &Matrix {
        &self.a
    }

    pub fn set_factors(&mut self, b: Matrix, a: Matrix) -> Result<()> {
        ensure!(
            b.shape() == self.b.shape() && a.shape() == self.a.shape(),
            Dimension,
            "factor shapes {:?}/{:?} differ from {:?}/{:?}",
            b.shape(),
            a.shape(),
            self.b.shape(),
            self.a.shape()
        );
        self.b = b;
        self.a = a;
        Ok(())
    }

    /// `W + scale·B·A`.
    pub fn merged_weight(&self) -> Matrix {
        let mut w = self.frozen_w.clone();
        let ba = self.b.matmul(&self.a).expect("factor shapes checked at construction");
        w.add_scaled(self.scale, &ba).expect("same shape");
        w
    }

    /// `x·Wᵀ + scale·(x·Aᵀ)·Bᵀ + bias`, never forming `B·A`.
    pub fn forward_decomposed(&self, x: &Matrix) -> Result<Matrix> {
        let mut out = x.matmul_nt(&self.frozen_w)?;
        let low = x.matmul_nt(&self.a)?.matmul_nt(&self.b)?;
        out.add_scaled(self.scale, &low)?;
        for r in 0..out.rows() {
            for (v, &b) in out.row_mut(r).iter_mut().zip(&self.bias) {
                *v += b;
            }
        }
        Ok(out)
    }

    /// `x·(W + scale·B·A)ᵀ + bias`.
    pub fn forward_merged(&self, x: &Matrix) -> Result<Matrix> {
        let mut out = x.matmul_nt(&self.merged_weight())?;
        for r in 0..out.rows() {
            for (v, &b) in out.row_mut(r).iter_mut().zip(&self.bias) {
                *v += b;
            }
        }
        Ok(out)
    }

    /// Chains a gradient on the effective weight down to `(∂B, ∂A)`:
    /// `∂B = scale·G·Aᵀ`, `∂A = scale·Bᵀ·G`.
    pub fn factor_grads(&self, weight_grad: &Matrix) -> Result<(Matrix, Matrix)> {
        let gb = weight_grad.matmul_nt(&self.a)?.scaled(self.scale);
        let ga = self.b.matmul_tn(weight_grad)?.scaled(self.scale);
        Ok((gb, ga))
    }
}
