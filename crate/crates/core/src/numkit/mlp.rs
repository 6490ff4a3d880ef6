//! Feed-forward networks with an exact reverse pass.
//!
//! Parameters live in a [`ParamVector`] with segments `layer{i}.weight`
//! (shape `out × in`) and `layer{i}.bias` (shape `1 × out`). A layer computes
//! `act(x · Wᵀ + b)` on a batch `x` of row vectors.

use crate::numkit::matrix::Matrix;
use crate::numkit::params::ParamVector;
use crate::numkit::rng::Rng;
use crate::{ensure, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Silu,
    Identity,
}

impl Activation {
    #[inline]
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Relu => x.max(0.0),
            Activation::Silu => x / (1.0 + (-x).exp()),
            Activation::Identity => x,
        }
    }

    /// Derivative with respect to the pre-activation.
    #[inline]
    pub fn derivative(self, x: f64) -> f64 {
        match self {
            Activation::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Silu => {
                let s = 1.0 / (1.0 + (-x).exp());
                s * (1.0 + x * (1.0 - s))
            }
            Activation::Identity => 1.0,
        }
    }
}

/// Layer sizes (input first) plus hidden and output activations.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MlpArch {
    pub sizes: Vec<usize>,
    pub hidden: Activation,
    pub output: Activation,
}

impl MlpArch {
    pub fn new(sizes: Vec<usize>, hidden: Activation, output: Activation) -> Self {
        Self {
            sizes,
            hidden,
            output,
        }
    }

    pub fn num_layers(&self) -> usize {
        self.sizes.len().saturating_sub(1)
    }

    pub fn input_dim(&self) -> usize {
        self.sizes[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.sizes.last().expect("arch has at least one size")
    }

    pub fn activation(&self, layer: usize) -> Activation {
        if layer + 1 == self.num_layers() {
            self.output
        } else {
            self.hidden
        }
    }

    pub fn weight_name(layer: usize) -> String {
        format!("layer{layer}.weight")
    }

    pub fn bias_name(layer: usize) -> String {
        format!("layer{layer}.bias")
    }

    /// Uniform(-1/√fan_in, 1/√fan_in) weights, zero biases.
    pub fn init_params(&self, rng: &mut Rng) -> ParamVector {
        let mut pv = ParamVector::new();
        for l in 0..self.num_layers() {
            let (fan_in, fan_out) = (self.sizes[l], self.sizes[l + 1]);
            let bound = 1.0 / (fan_in as f64).sqrt();
            let w: Vec<f64> = (0..fan_in * fan_out)
                .map(|_| (2.0 * rng.uniform() - 1.0) * bound)
                .collect();
            pv.push(
                Self::weight_name(l),
                &Matrix::from_vec(fan_out, fan_in, w).expect("shape"),
            );
            pv.push(Self::bias_name(l), &Matrix::zeros(1, fan_out));
        }
        pv
    }

    /// Checks that `params` has exactly the segments this arch expects.
    pub fn check_params(&self, params: &ParamVector) -> Result<()> {
        ensure!(self.num_layers() >= 1, Contract, "arch needs at least two sizes");
        ensure!(
            params.segments().len() == 2 * self.num_layers(),
            Dimension,
            "arch has {} layers but params have {} segments",
            self.num_layers(),
            params.segments().len()
        );
        for l in 0..self.num_layers() {
            let w = &params.segments()[2 * l];
            let b = &params.segments()[2 * l + 1];
            ensure!(
                w.name == Self::weight_name(l) && w.shape == (self.sizes[l + 1], self.sizes[l]),
                Dimension,
                "segment {} has shape {:?}, expected {}x{}",
                w.name,
                w.shape,
                self.sizes[l + 1],
                self.sizes[l]
            );
            ensure!(
                b.name == Self::bias_name(l) && b.shape == (1, self.sizes[l + 1]),
                Dimension,
                "segment {} has shape {:?}, expected 1x{}",
                b.name,
                b.shape,
                self.sizes[l + 1]
            );
        }
        Ok(())
    }
}

/// Activation record of one forward pass.
#[derive(Clone, Debug)]
pub struct MlpCache {
    /// Input to each layer.
    inputs: Vec<Matrix>,
    /// Pre-activation of each layer.
    pre: Vec<Matrix>,
    fingerprint: u64,
}

/// Gradients of a scalar loss with respect to parameters and input.
#[derive(Clone, Debug)]
pub struct MlpGrads {
    pub params: ParamVector,
    pub input: Matrix,
}

pub fn mlp_forward(params: &ParamVector, input: &Matrix, arch: &MlpArch) -> Result<(Matrix, MlpCache)> {
    arch.check_params(params)?;
    ensure!(
        input.cols() == arch.input_dim(),
        Dimension,
        "input has {} columns, arch expects {}",
        input.cols(),
        arch.input_dim()
    );
    let mut inputs = Vec::with_capacity(arch.num_layers());
    let mut pre = Vec::with_capacity(arch.num_layers());
    let mut x = input.clone();
    for l in 0..arch.num_layers() {
        let w = params.matrix(&MlpArch::weight_name(l))?;
        let b = params.slice(&MlpArch::bias_name(l))?;
        let mut z = x.matmul_nt(&w)?;
        for r in 0..z.rows() {
            for (v, &bias) in z.row_mut(r).iter_mut().zip(b) {
                *v += bias;
            }
        }
        let act = arch.activation(l);
        let out = z.map(|v| act.apply(v));
        inputs.push(std::mem::replace(&mut x, out));
        pre.push(z);
    }
    ensure!(x.is_finite(), Numeric, "non-finite network output");
    Ok((
        x,
        MlpCache {
            inputs,
            pre,
            fingerprint: params.fingerprint(),
        },
    ))
}

/// Reverse pass for the scalar `Σ output ⊙ output_grad`.
///
/// `params` must be the exact parameters the cache was recorded with.
pub fn mlp_backward(
    params: &ParamVector,
    arch: &MlpArch,
    cache: &MlpCache,
    output_grad: &Matrix,
) -> Result<MlpGrads> {
    ensure!(
        cache.fingerprint == params.fingerprint() && cache.pre.len() == arch.num_layers(),
        Contract,
        "stale cache: parameters changed since the forward pass"
    );
    let last = cache.pre.last().expect("at least one layer");
    ensure!(
        output_grad.shape() == last.shape(),
        Dimension,
        "output gradient {:?} does not match output {:?}",
        output_grad.shape(),
        last.shape()
    );
    let mut grads = params.zeros_like();
    let mut delta = output_grad.clone();
    for l in (0..arch.num_layers()).rev() {
        let act = arch.activation(l);
        if act != Activation::Identity {
            for (d, &z) in delta.data_mut().iter_mut().zip(cache.pre[l].data()) {
                *d *= act.derivative(z);
            }
        }
        let dw = delta.matmul_tn(&cache.inputs[l])?;
        grads
            .slice_mut(&MlpArch::weight_name(l))?
            .copy_from_slice(dw.data());
        let db = grads.slice_mut(&MlpArch::bias_name(l))?;
        for r in 0..delta.rows() {
            for (g, &d) in db.iter_mut().zip(delta.row(r)) {
                *g += d;
            }
        }
        let w = params.matrix(&MlpArch::weight_name(l))?;
        delta = delta.matmul(&w)?;
    }
    Ok(MlpGrads {
        params: grads,
        input: delta,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numkit::fd::finite_diff_grad;

    fn single_identity_layer(n: usize) -> (MlpArch, ParamVector) {
        let arch = MlpArch::new(vec![n, n], Activation::Relu, Activation::Identity);
        let mut pv = ParamVector::new();
        pv.push(MlpArch::weight_name(0), &Matrix::identity(n));
        pv.push(MlpArch::bias_name(0), &Matrix::zeros(1, n));
        (arch, pv)
    }

    #[test]
    fn identity_layer_passes_input_through() {
        let (arch, pv) = single_identity_layer(3);
        let x = Matrix::from_rows(&[[1.0, -2.0, 0.5]]).unwrap();
        let (y, _) = mlp_forward(&pv, &x, &arch).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn zero_weights_give_zero_output() {
        let arch = MlpArch::new(vec![3, 4, 2], Activation::Silu, Activation::Identity);
        let pv = arch.init_params(&mut Rng::new(1)).zeros_like();
        let x = Rng::new(2).gaussian_matrix(5, 3);
        let (y, _) = mlp_forward(&pv, &x, &arch).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn two_layer_forward_matches_scalar_reevaluation() {
        let arch = MlpArch::new(vec![3, 4, 2], Activation::Silu, Activation::Identity);
        let mut rng = Rng::new(11);
        let mut pv = arch.init_params(&mut rng);
        for v in pv.values_mut() {
            *v += 0.1 * rng.normal();
        }
        let x = rng.gaussian_matrix(2, 3);
        let (y, _) = mlp_forward(&pv, &x, &arch).unwrap();

        let w0 = pv.values()[0..12].to_vec();
        let b0 = pv.values()[12..16].to_vec();
        let w1 = pv.values()[16..24].to_vec();
        let b1 = pv.values()[24..26].to_vec();
        for r in 0..2 {
            let xr = x.row(r);
            let mut h = [0.0; 4];
            for j in 0..4 {
                let z = w0[j * 3] * xr[0] + w0[j * 3 + 1] * xr[1] + w0[j * 3 + 2] * xr[2] + b0[j];
                h[j] = z / (1.0 + (-z).exp());
            }
            for k in 0..2 {
                let o = w1[k * 4] * h[0] + w1[k * 4 + 1] * h[1] + w1[k * 4 + 2] * h[2] + w1[k * 4 + 3] * h[3] + b1[k];
                assert!((y.get(r, k) - o).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn sum_loss_on_identity_layer_gives_outer_product() {
        let (arch, pv) = single_identity_layer(2);
        let x = Matrix::from_rows(&[[3.0, -1.0]]).unwrap();
        let (y, cache) = mlp_forward(&pv, &x, &arch).unwrap();
        let ones = y.map(|_| 1.0);
        let g = mlp_backward(&pv, &arch, &cache, &ones).unwrap();
        assert_eq!(g.params.slice("layer0.weight").unwrap(), &[3.0, -1.0, 3.0, -1.0]);
        assert_eq!(g.params.slice("layer0.bias").unwrap(), &[1.0, 1.0]);
    }

    #[test]
    fn zero_output_grad_gives_zero_grads() {
        let arch = MlpArch::new(vec![3, 5, 2], Activation::Relu, Activation::Identity);
        let pv = arch.init_params(&mut Rng::new(3));
        let x = Rng::new(4).gaussian_matrix(4, 3);
        let (y, cache) = mlp_forward(&pv, &x, &arch).unwrap();
        let g = mlp_backward(&pv, &arch, &cache, &y.map(|_| 0.0)).unwrap();
        assert!(g.params.values().iter().all(|&v| v == 0.0));
        assert!(g.input.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn stale_cache_is_rejected() {
        let arch = MlpArch::new(vec![2, 2], Activation::Relu, Activation::Identity);
        let mut pv = arch.init_params(&mut Rng::new(3));
        let x = Rng::new(4).gaussian_matrix(1, 2);
        let (y, cache) = mlp_forward(&pv, &x, &arch).unwrap();
        pv.values_mut()[0] += 1.0;
        let err = mlp_backward(&pv, &arch, &cache, &y).unwrap_err();
        assert!(matches!(err, crate::Error::Contract(_)));
        let bad = Matrix::zeros(3, 3);
        assert!(matches!(
            mlp_forward(&pv, &bad, &arch).unwrap_err(),
            crate::Error::Dimension(_)
        ));
    }

    #[test]
    fn backward_matches_central_differences_on_eight_unit_net() {
        let arch = MlpArch::new(vec![3, 8, 2], Activation::Silu, Activation::Identity);
        let mut rng = Rng::new(99);
        let pv = arch.init_params(&mut rng);
        let x = rng.gaussian_matrix(4, 3);
        let target = rng.gaussian_matrix(4, 2);
        let loss = |p: &ParamVector| -> f64 {
            let (y, _) = mlp_forward(p, &x, &arch).unwrap();
            y.data().iter().zip(target.data()).map(|(a, b)| 0.5 * (a - b).powi(2)).sum()
        };
        let (y, cache) = mlp_forward(&pv, &x, &arch).unwrap();
        let mut og = y.clone();
        og.add_scaled(-1.0, &target).unwrap();
        let analytic = mlp_backward(&pv, &arch, &cache, &og).unwrap().params;
        let numeric = finite_diff_grad(loss, &pv, 1e-5).unwrap();
        let err = crate::numkit::max_relative_error(analytic.values(), numeric.values());
        assert!(err <= 1e-4, "relative error {err}");
    }

    #[test]
    fn input_gradient_matches_central_differences() {
        let arch = MlpArch::new(vec![2, 6, 2], Activation::Silu, Activation::Identity);
        let mut rng = Rng::new(5);
        let pv = arch.init_params(&mut rng);
        let x = rng.gaussian_matrix(1, 2);
        let (y, cache) = mlp_forward(&pv, &x, &arch).unwrap();
        let g = mlp_backward(&pv, &arch, &cache, &y.map(|_| 1.0)).unwrap();
        for j in 0..2 {
            let h = 1e-6;
            let mut xp = x.clone();
            xp.set(0, j, x.get(0, j) + h);
            let mut xm = x.clone();
            xm.set(0, j, x.get(0, j) - h);
            let fp: f64 = mlp_forward(&pv, &xp, &arch).unwrap().0.data().iter().sum();
            let fm: f64 = mlp_forward(&pv, &xm, &arch).unwrap().0.data().iter().sum();
            assert!(((fp - fm) / (2.0 * h) - g.input.get(0, j)).abs() < 1e-7);
        }
    }
}
