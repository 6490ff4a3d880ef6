//! The toy conditional noise predictor `f(z_t, t, c(y))`.
//!
//! Input rows are `[z_t | time features | cond embedding]`; every linear layer
//! carries a LoRA pair. Hidden layers use SiLU, the output layer is linear.

use crate::diffmodel::lora::LoraLayer;
use crate::numkit::{mlp_backward, mlp_forward, Activation, Matrix, MlpArch, MlpCache, ParamVector, Rng};
use crate::{ensure, Result};

/// Which parameters a training method updates.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Trainable {
    /// LoRA factors `B`, `A` of every layer.
    Lora,
    /// Every layer's effective weight and bias (full fine-tuning).
    Full,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DenoiserConfig {
    pub data_dim: usize,
    pub time_dim: usize,
    pub cond_dim: usize,
    pub classes: usize,
    pub hidden: Vec<usize>,
    pub rank: usize,
    pub lora_alpha: f64,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        Self {
            data_dim: 8,
            time_dim: 8,
            cond_dim: 8,
            classes: 2,
            hidden: vec![64, 64],
            rank: 4,
            lora_alpha: 2.0,
        }
    }
}

impl DenoiserConfig {
    pub fn input_dim(&self) -> usize {
        self.data_dim + self.time_dim + self.cond_dim
    }

    pub fn layer_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![self.input_dim()];
        sizes.extend(&self.hidden);
        sizes.push(self.data_dim);
        sizes
    }
}

/// Sinusoidal features of the timestep: `[sin(t·ω_k), cos(t·ω_k)]` with
/// `ω_k = 1000^(−k/half)`.
pub fn time_features(t: usize, dim: usize) -> Vec<f64> {
    let half = dim / 2;
    let mut out = vec![0.0; dim];
    for k in 0..half {
        let freq = (-(1000.0_f64).ln() * k as f64 / half as f64).exp();
        let angle = t as f64 * freq;
        out[k] = angle.sin();
        out[half + k] = angle.cos();
    }
    out
}

#[derive(Clone, Debug, PartialEq)]
pub struct LoraDenoiser {
    layers: Vec<LoraLayer>,
    time_dim: usize,
    cond_table: Matrix,
    data_dim: usize,
}

/// Activation record of a denoiser forward pass.
#[derive(Clone, Debug)]
pub struct DenoiserCache {
    effective: ParamVector,
    mlp: MlpCache,
}

impl LoraDenoiser {
    /// Fresh base network with randomly initialised frozen weights, a frozen
    /// random condition table, and zero-initialised adapters.
    pub fn new(cfg: &DenoiserConfig, rng: &mut Rng) -> Result<Self> {
        ensure!(cfg.time_dim.is_multiple_of(2), Config, "time_dim must be even");
        ensure!(cfg.classes >= 1 && cfg.data_dim >= 1, Config, "need at least one class and one data dimension");
        let arch = MlpArch::new(cfg.layer_sizes(), Activation::Silu, Activation::Identity);
        let base = arch.init_params(&mut rng.stream("base-weights"));
        let cond_table = rng.stream("cond-table").gaussian_matrix(cfg.classes, cfg.cond_dim);
        let mut lora_rng = rng.stream("lora-init");
        let mut layers = Vec::with_capacity(arch.num_layers());
        for l in 0..arch.num_layers() {
            let w = base.matrix(&MlpArch::weight_name(l))?;
            let bias = base.slice(&MlpArch::bias_name(l))?.to_vec();
            layers.push(LoraLayer::new(w, bias, cfg.rank, cfg.lora_alpha, &mut lora_rng)?);
        }
        Ok(Self {
            layers,
            time_dim: cfg.time_dim,
            cond_table,
            data_dim: cfg.data_dim,
        })
    }

    pub fn from_parts(layers: Vec<LoraLayer>, time_dim: usize, cond_table: Matrix, data_dim: usize) -> Result<Self> {
        ensure!(!layers.is_empty(), Contract, "denoiser needs at least one layer");
        ensure!(
            layers[0].in_dim() == data_dim + time_dim + cond_table.cols(),
            Dimension,
            "first layer takes {} inputs, expected {}",
            layers[0].in_dim(),
            data_dim + time_dim + cond_table.cols()
        );
        ensure!(
            layers.last().map(LoraLayer::out_dim) == Some(data_dim),
            Dimension,
            "last layer must output {data_dim} values"
        );
        for w in layers.windows(2) {
            ensure!(w[0].out_dim() == w[1].in_dim(), Dimension, "layer widths do not chain");
        }
        Ok(Self {
            layers,
            time_dim,
            cond_table,
            data_dim,
        })
    }

    /// Replaces every adapter with a fresh rank-`rank` pair, keeping the
    /// current effective weights as the new frozen base.
    pub fn with_fresh_adapters(&self, rank: usize, lora_alpha: f64, rng: &mut Rng) -> Result<Self> {
        let mut layers = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            layers.push(LoraLayer::new(layer.merged_weight(), layer.bias.clone(), rank, lora_alpha, rng)?);
        }
        Self::from_parts(layers, self.time_dim, self.cond_table.clone(), self.data_dim)
    }

    pub fn data_dim(&self) -> usize {
        self.data_dim
    }

    pub fn time_dim(&self) -> usize {
        self.time_dim
    }

    pub fn classes(&self) -> usize {
        self.cond_table.rows()
    }

    pub fn cond_table(&self) -> &Matrix {
        &self.cond_table
    }

    pub fn layers(&self) -> &[LoraLayer] {
        &self.layers
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    fn arch(&self) -> MlpArch {
        let mut sizes = vec![self.layers[0].in_dim()];
        sizes.extend(self.layers.iter().map(LoraLayer::out_dim));
        MlpArch::new(sizes, Activation::Silu, Activation::Identity)
    }

    /// Effective `(W + scale·B·A, bias)` per layer in the generic MLP layout.
    fn effective_params(&self) -> ParamVector {
        let mut pv = ParamVector::new();
        for (l, layer) in self.layers.iter().enumerate() {
            pv.push(MlpArch::weight_name(l), &layer.merged_weight());
            pv.push(
                MlpArch::bias_name(l),
                &Matrix::from_vec(1, layer.bias.len(), layer.bias.clone()).expect("bias row"),
            );
        }
        pv
    }

    /// Network input rows `[z | time features | cond embedding]`.
    pub fn input_rows(&self, z: &Matrix, t: &[usize], y: &[usize]) -> Result<Matrix> {
        ensure!(
            z.cols() == self.data_dim && z.rows() == t.len() && t.len() == y.len(),
            Dimension,
            "z {:?} with {} timesteps and {} labels",
            z.shape(),
            t.len(),
            y.len()
        );
        let width = self.layers[0].in_dim();
        let mut rows = Matrix::zeros(z.rows(), width);
        for i in 0..z.rows() {
            ensure!(y[i] < self.classes(), Contract, "caption id {} outside table of {}", y[i], self.classes());
            let row = rows.row_mut(i);
            row[..self.data_dim].copy_from_slice(z.row(i));
            row[self.data_dim..self.data_dim + self.time_dim].copy_from_slice(&time_features(t[i], self.time_dim));
            row[self.data_dim + self.time_dim..].copy_from_slice(self.cond_table.row(y[i]));
        }
        Ok(rows)
    }

    /// Predicted noise for each row of `z`.
    pub fn predict(&self, z: &Matrix, t: &[usize], y: &[usize]) -> Result<Matrix> {
        Ok(self.forward(z, t, y)?.0)
    }

    pub fn forward(&self, z: &Matrix, t: &[usize], y: &[usize]) -> Result<(Matrix, DenoiserCache)> {
        let x = self.input_rows(z, t, y)?;
        let effective = self.effective_params();
        let (out, mlp) = mlp_forward(&effective, &x, &self.arch())?;
        Ok((out, DenoiserCache { effective, mlp }))
    }

    /// Gradient of `Σ output ⊙ output_grad` in the layout of
    /// [`trainable_params`](Self::trainable_params).
    pub fn backward(&self, cache: &DenoiserCache, output_grad: &Matrix, mode: Trainable) -> Result<ParamVector> {
        let grads = mlp_backward(&cache.effective, &self.arch(), &cache.mlp, output_grad)?.params;
        let mut out = ParamVector::new();
        for (l, layer) in self.layers.iter().enumerate() {
            let gw = grads.matrix(&MlpArch::weight_name(l))?;
            match mode {
                Trainable::Lora => {
                    let (gb, ga) = layer.factor_grads(&gw)?;
                    out.push(format!("layer{l}.lora_b"), &gb);
                    out.push(format!("layer{l}.lora_a"), &ga);
                }
                Trainable::Full => {
                    out.push(format!("layer{l}.weight"), &gw);
                    out.push(format!("layer{l}.bias"), &grads.matrix(&MlpArch::bias_name(l))?);
                }
            }
        }
        Ok(out)
    }

    pub fn trainable_params(&self, mode: Trainable) -> ParamVector {
        let mut out = ParamVector::new();
        for (l, layer) in self.layers.iter().enumerate() {
            match mode {
                Trainable::Lora => {
                    out.push(format!("layer{l}.lora_b"), &layer.b);
                    out.push(format!("layer{l}.lora_a"), &layer.a);
                }
                Trainable::Full => {
                    out.push(format!("layer{l}.weight"), &layer.frozen_w);
                    out.push(
                        format!("layer{l}.bias"),
                        &Matrix::from_vec(1, layer.bias.len(), layer.bias.clone()).expect("bias row"),
                    );
                }
            }
        }
        out
    }

    pub fn set_trainable_params(&mut self, mode: Trainable, params: &ParamVector) -> Result<()> {
        ensure!(
            params.same_layout(&self.trainable_params(mode)),
            Dimension,
            "parameter layout does not match the {mode:?} trainable set"
        );
        for (l, layer) in self.layers.iter_mut().enumerate() {
            match mode {
                Trainable::Lora => {
                    layer.b = params.matrix(&format!("layer{l}.lora_b"))?;
                    layer.a = params.matrix(&format!("layer{l}.lora_a"))?;
                }
                Trainable::Full => {
                    layer.frozen_w = params.matrix(&format!("layer{l}.weight"))?;
                    layer.bias = params.slice(&format!("layer{l}.bias"))?.to_vec();
                }
            }
        }
        Ok(())
    }

    /// Everything a LoRA run must leave untouched: base weights, biases and
    /// the condition table.
    pub fn frozen_snapshot(&self) -> ParamVector {
        let mut out = self.trainable_params(Trainable::Full);
        out.push("cond_table", &self.cond_table);
        out
    }

    /// All tensors needed to rebuild the model, for checkpointing.
    pub fn to_segments(&self) -> Vec<(String, Matrix)> {
        let mut out = vec![(
            "meta".to_string(),
            Matrix::from_vec(1, 2, vec![self.data_dim as f64, self.time_dim as f64]).expect("meta"),
        )];
        for (l, layer) in self.layers.iter().enumerate() {
            out.push((format!("layer{l}.frozen_w"), layer.frozen_w.clone()));
            out.push((
                format!("layer{l}.bias"),
                Matrix::from_vec(1, layer.bias.len(), layer.bias.clone()).expect("bias"),
            ));
            out.push((format!("layer{l}.lora_b"), layer.b.clone()));
            out.push((format!("layer{l}.lora_a"), layer.a.clone()));
            out.push((
                format!("layer{l}.scale"),
                Matrix::from_vec(1, 1, vec![layer.scale()]).expect("scale"),
            ));
        }
        out.push(("cond_table".to_string(), self.cond_table.clone()));
        out
    }

    pub fn from_segments(segments: &[(String, Matrix)]) -> Result<Self> {
        let find = |name: &str| -> Result<Matrix> {
            segments
                .iter()
                .find(|(n, _)| n == name)
                .map(|(_, m)| m.clone())
                .ok_or_else(|| crate::Error::Format(format!("missing segment {name}")))
        };
        let meta = find("meta")?;
        ensure!(meta.data().len() == 2, Format, "meta segment must hold two values");
        let (data_dim, time_dim) = (meta.data()[0] as usize, meta.data()[1] as usize);
        let mut layers = Vec::new();
        let mut l = 0;
        while segments.iter().any(|(n, _)| *n == format!("layer{l}.frozen_w")) {
            let scale = find(&format!("layer{l}.scale"))?.data()[0];
            layers.push(LoraLayer::from_parts(
                find(&format!("layer{l}.frozen_w"))?,
                find(&format!("layer{l}.bias"))?.into_vec(),
                find(&format!("layer{l}.lora_b"))?,
                find(&format!("layer{l}.lora_a"))?,
                scale,
            )?);
            l += 1;
        }
        Self::from_parts(layers, time_dim, find("cond_table")?, data_dim)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_cfg() -> DenoiserConfig {
        DenoiserConfig {
            data_dim: 3,
            time_dim: 4,
            cond_dim: 3,
            classes: 2,
            hidden: vec![8],
            rank: 1,
            lora_alpha: 2.0,
        }
    }

    #[test]
    fn zero_b_matches_frozen_network_bitwise() {
        let mut rng = Rng::new(3);
        let model = LoraDenoiser::new(&small_cfg(), &mut rng).unwrap();
        let z = rng.gaussian_matrix(4, 3);
        let (t, y) = (vec![1, 5, 9, 2], vec![0, 1, 1, 0]);
        let out = model.predict(&z, &t, &y).unwrap();

        let arch = model.arch();
        let frozen = {
            let mut pv = ParamVector::new();
            for (l, layer) in model.layers().iter().enumerate() {
                pv.push(MlpArch::weight_name(l), layer.frozen_w());
                pv.push(MlpArch::bias_name(l), &Matrix::from_vec(1, layer.bias().len(), layer.bias().to_vec()).unwrap());
            }
            pv
        };
        let base = mlp_forward(&frozen, &model.input_rows(&z, &t, &y).unwrap(), &arch).unwrap().0;
        assert_eq!(out, base);
    }

    #[test]
    fn trainable_roundtrip_and_layout() {
        let mut rng = Rng::new(4);
        let mut model = LoraDenoiser::new(&small_cfg(), &mut rng).unwrap();
        let lora = model.trainable_params(Trainable::Lora);
        // layer0: B 8x1 + A 1x10; layer1: B 3x1 + A 1x8.
        assert_eq!(lora.len(), 8 + 10 + 3 + 8);
        let bumped = lora.with_values(lora.values().iter().map(|v| v + 0.5).collect()).unwrap();
        model.set_trainable_params(Trainable::Lora, &bumped).unwrap();
        assert_eq!(model.trainable_params(Trainable::Lora), bumped);
        assert!(model.set_trainable_params(Trainable::Full, &bumped).is_err());
    }

    #[test]
    fn segments_roundtrip() {
        let mut rng = Rng::new(5);
        let model = LoraDenoiser::new(&small_cfg(), &mut rng).unwrap();
        let back = LoraDenoiser::from_segments(&model.to_segments()).unwrap();
        assert_eq!(back, model);
    }

    #[test]
    fn unknown_caption_is_rejected() {
        let mut rng = Rng::new(6);
        let model = LoraDenoiser::new(&small_cfg(), &mut rng).unwrap();
        assert!(model.predict(&Matrix::zeros(1, 3), &[1], &[7]).is_err());
    }
}
