//! Dataset splits, balanced sampling, the training objectives and the
//! LoRA / MP-LoRA / SMP-LoRA / full fine-tuning loop.

pub mod data;
pub mod objective;
pub mod train;

pub use data::{
    balanced_batches, balanced_index_batches, make_splits, make_toy_pool, BatchPair, PairStream, SplitDataset,
    ToyDistribution, ToyKind, GAUSS_MIX_RADIUS, GAUSS_MIX_SIGMA,
};
pub use objective::{
    combine, composite, composite_joint, composite_parts, composite_value, mp_lora_loss, rescale_pair,
    smp_lora_loss, CompositeEval, CompositeInputs, CompositeParts, Method, Objective,
};
pub use train::{
    fmt_real, init_proxy_attacker, train, AbortRecord, HessianRow, LogRow, RunLog, TrainConfig, TrainOutcome,
    DIAG_HEADER, RUNLOG_HEADER,
};

use crate::diffmodel::{eval_losses, loss_gradient, DenoiserConfig, LoraDenoiser, NoiseRecord, NoiseSchedule, NoisedBatch, Sample, Trainable};
use crate::numkit::{Optimizer, OptimizerKind, Rng};
use crate::{ensure, Result};

/// Settings for fitting the base network before adapters are attached.
#[derive(Clone, Debug, PartialEq)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch: usize,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            epochs: 200,
            lr: 2e-3,
            batch: 16,
        }
    }
}

/// Fits a fresh network to `pool` with every weight trainable, then freezes
/// the result under zero-initialised rank-`cfg.rank` adapters.
pub fn pretrain_base(
    cfg: &DenoiserConfig,
    pool: &[Sample],
    sched: &NoiseSchedule,
    pre: &PretrainConfig,
    rng: &Rng,
) -> Result<LoraDenoiser> {
    ensure!(!pool.is_empty(), Config, "pretraining pool is empty");
    ensure!(pre.batch >= 1, Config, "pretraining batch must be at least 1");
    let mut model = LoraDenoiser::new(cfg, &mut rng.stream("base-model"))?;
    let mut theta = model.trainable_params(Trainable::Full);
    let mut opt = Optimizer::new(OptimizerKind::Adam, pre.lr, theta.len());
    let mut order_rng = rng.stream("pretrain-order");
    let mut noise_rng = rng.stream("pretrain-noise");
    for _ in 0..pre.epochs {
        let mut order: Vec<usize> = (0..pool.len()).collect();
        order_rng.shuffle(&mut order);
        for chunk in order.chunks(pre.batch) {
            let batch: Vec<&Sample> = chunk.iter().map(|&i| &pool[i]).collect();
            let rec = NoiseRecord::draw(batch.len(), cfg.data_dim, sched, &mut noise_rng);
            let nb = NoisedBatch::from_record(&batch, &rec, sched)?;
            let eval = eval_losses(&model, &nb)?;
            let w = vec![1.0 / batch.len() as f64; batch.len()];
            let g = loss_gradient(&model, &eval, &w, Trainable::Full)?;
            opt.descend(theta.values_mut(), g.values())?;
            model.set_trainable_params(Trainable::Full, &theta)?;
        }
    }
    model.with_fresh_adapters(cfg.rank, cfg.lora_alpha, &mut rng.stream("adapter-init"))
}
