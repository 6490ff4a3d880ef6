//! Small seeded training states shared by the integration tests.
#![allow(dead_code)]

use privlora_core::diffmodel::{
    linear_schedule, DenoiserConfig, LoraDenoiser, NoiseRecord, NoiseSchedule, NoisedBatch, Sample, Trainable,
};
use privlora_core::numkit::Rng;
use privlora_core::privacy::{AttackModel, FeatureProbe};
use privlora_core::trainers::CompositeInputs;

/// One frozen evaluation point of every objective: a denoiser with nonzero
/// adapters, a training batch, an auxiliary pair and a proxy attacker.
pub struct Toy {
    pub sched: NoiseSchedule,
    pub model: LoraDenoiser,
    pub tr_batch: NoisedBatch,
    pub members: Vec<Sample>,
    pub nonmembers: Vec<Sample>,
    pub attacker: AttackModel,
    pub probe: FeatureProbe,
}

impl Toy {
    pub fn inputs<'a>(&'a self, members: &'a [&'a Sample], nonmembers: &'a [&'a Sample]) -> CompositeInputs<'a> {
        CompositeInputs {
            tr_batch: &self.tr_batch,
            members,
            nonmembers,
            attacker: &self.attacker,
            probe: &self.probe,
            sched: &self.sched,
        }
    }

    pub fn member_refs(&self) -> Vec<&Sample> {
        self.members.iter().collect()
    }

    pub fn nonmember_refs(&self) -> Vec<&Sample> {
        self.nonmembers.iter().collect()
    }
}

fn draw_samples(rng: &mut Rng, n: usize, first_id: u64, dim: usize) -> Vec<Sample> {
    (0..n)
        .map(|i| Sample::new(first_id + i as u64, rng.gaussian_vec(dim), i % 2))
        .collect()
}

/// Seeded toy state; every network has at most 200 parameters.
pub fn toy(seed: u64) -> Toy {
    let mut rng = Rng::new(seed);
    let sched = linear_schedule(10, 1e-3, 0.2).unwrap();
    let cfg = DenoiserConfig {
        data_dim: 2,
        time_dim: 2,
        cond_dim: 2,
        classes: 2,
        hidden: vec![3 + (seed % 3) as usize],
        rank: 1,
        lora_alpha: 0.5 + rng.uniform(),
    };
    let mut model = LoraDenoiser::new(&cfg, &mut rng.stream("model")).unwrap();
    let lora = model.trainable_params(Trainable::Lora);
    let vals = lora.values().iter().map(|_| 0.5 * rng.normal()).collect();
    model
        .set_trainable_params(Trainable::Lora, &lora.with_values(vals).unwrap())
        .unwrap();

    let per_side = 1 + (seed % 3) as usize;
    let members = draw_samples(&mut rng, per_side, 0, 2);
    let nonmembers = draw_samples(&mut rng, per_side, 100, 2);
    let tr = draw_samples(&mut rng, 3, 200, 2);
    let refs: Vec<&Sample> = tr.iter().collect();
    let record = NoiseRecord::draw(tr.len(), 2, &sched, &mut rng);
    let tr_batch = NoisedBatch::from_record(&refs, &record, &sched).unwrap();

    let probe = FeatureProbe::new(&sched, 2, 1 + (seed % 2) as usize, seed ^ 0x5eed).unwrap();
    let mut attacker = AttackModel::new(2, &[6, 4], &mut rng.stream("attacker")).unwrap();
    // Nonzero biases keep every ReLU pre-activation off its kink.
    let omega = attacker.params();
    let jittered = omega.values().iter().map(|v| v + 0.1 * rng.normal()).collect();
    attacker.set_params(omega.with_values(jittered).unwrap()).unwrap();
    let all: Vec<&Sample> = members.iter().chain(&nonmembers).collect();
    let feats = probe.loss_features(&model, &all, &sched).unwrap();
    attacker.fit_normalization(&feats).unwrap();
    Toy {
        sched,
        model,
        tr_batch,
        members,
        nonmembers,
        attacker,
        probe,
    }
}
