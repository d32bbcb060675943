//! Downstream transfer probes on phantom tasks.
//!
//! Each probe trains a fresh zero-initialized head on top of either a
//! randomly initialized encoder (scratch) or a pre-trained one, with the
//! same data, crops and step budget for both, and reports the metric per
//! seed. With zero steps both heads stay at zero and the two arms report
//! the same value.

use std::fmt;
use std::path::Path;
use std::str::FromStr;
use std::sync::Arc;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::{EvalError, Result};
use crate::autodiff::Tape;
use crate::model::{crop_batch, sgd_step, Linear, ModelConfig, ModelError, VocoModel};
use crate::omni::{dice, supervised_step, OmniConfig, OmniModel};
use crate::real::Real;
use crate::rng::{self, Rng};
use crate::volume::{generate_phantom, PhantomSpec, Region, Volume};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ProbeTask {
    /// Voxel-wise organ segmentation, scored by mean foreground Dice.
    #[serde(rename = "phantom-seg")]
    PhantomSeg,
    /// Region classification of a single crop, scored by accuracy.
    #[serde(rename = "phantom-cls")]
    PhantomCls,
}

impl ProbeTask {
    pub fn id(self) -> &'static str {
        match self {
            ProbeTask::PhantomSeg => "phantom-seg",
            ProbeTask::PhantomCls => "phantom-cls",
        }
    }

    pub fn metric(self) -> &'static str {
        match self {
            ProbeTask::PhantomSeg => "dice",
            ProbeTask::PhantomCls => "accuracy",
        }
    }
}

impl fmt::Display for ProbeTask {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.id())
    }
}

impl FromStr for ProbeTask {
    type Err = EvalError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "phantom-seg" => Ok(ProbeTask::PhantomSeg),
            "phantom-cls" => Ok(ProbeTask::PhantomCls),
            other => Err(EvalError::UnknownTask(other.to_string())),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InitMode {
    Scratch,
    Pretrained,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProbeConfig {
    pub task: ProbeTask,
    pub steps: u64,
    pub seeds: Vec<u64>,
    /// Labeled training phantoms, cycling through the three regions.
    pub labeled: usize,
    /// Held-out phantoms the metric is computed on.
    pub eval_volumes: usize,
    pub dims: [usize; 3],
    pub crop: [usize; 3],
    pub batch: usize,
    pub learning_rate: f64,
    /// Also update the encoder instead of the head alone.
    pub full_network: bool,
    /// Seed of the probe phantom layout, kept apart from pre-training data.
    pub phantom_seed: u64,
    /// Classification crops scored per held-out volume.
    pub crops_per_volume: usize,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            task: ProbeTask::PhantomSeg,
            steps: 300,
            seeds: vec![0, 1, 2],
            labeled: 20,
            eval_volumes: 6,
            dims: [64, 64, 64],
            crop: [32, 32, 32],
            batch: 2,
            learning_rate: 0.5,
            full_network: false,
            phantom_seed: 0x7072_6f62,
            crops_per_volume: 8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeArm {
    pub init: InitMode,
    pub per_seed: Vec<f64>,
    pub mean: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransferReport {
    pub task: ProbeTask,
    pub metric: String,
    pub steps: u64,
    pub full_network: bool,
    pub seeds: Vec<u64>,
    pub arms: Vec<ProbeArm>,
}

impl TransferReport {
    pub fn arm(&self, init: InitMode) -> Option<&ProbeArm> {
        self.arms.iter().find(|a| a.init == init)
    }

    pub fn to_text(&self) -> String {
        let mut s = format!("task {} ({}), {} steps\n", self.task, self.metric, self.steps);
        for a in &self.arms {
            let vals: Vec<String> = a.per_seed.iter().map(|v| format!("{v:.4}")).collect();
            s.push_str(&format!("{:<11} mean {:.4}  [{}]\n", format!("{:?}", a.init).to_lowercase(), a.mean, vals.join(", ")));
        }
        s
    }
}

pub fn read_transfer_report(path: impl AsRef<Path>) -> Result<TransferReport> {
    Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
}

fn phantoms(cfg: &ProbeConfig, offset: u64, count: usize) -> Result<Vec<Arc<Volume>>> {
    (0..count)
        .map(|i| {
            let region = Region::ALL[i % Region::ALL.len()];
            let spec = PhantomSpec::standard(region, cfg.dims, cfg.phantom_seed);
            Ok(Arc::new(generate_phantom(&spec, offset + i as u64).map_err(crate::omni::OmniError::from)?))
        })
        .collect()
}

/// Runs the probe for every seed, scratch arm always and pretrained arm
/// when `pretrained` is given. The scratch encoder for seed `s` is
/// initialized from `s`.
pub fn probe_transfer<T: Real>(pretrained: Option<&VocoModel<T>>, feature_dim: usize, cfg: &ProbeConfig) -> Result<TransferReport> {
    if cfg.labeled == 0 || cfg.eval_volumes == 0 || cfg.batch == 0 {
        return Err(EvalError::EmptyDataset);
    }
    let train = phantoms(cfg, 0, cfg.labeled)?;
    let held_out = phantoms(cfg, 1_000_000, cfg.eval_volumes)?;
    let mut arms = vec![ProbeArm { init: InitMode::Scratch, per_seed: Vec::new(), mean: 0.0 }];
    if pretrained.is_some() {
        arms.push(ProbeArm { init: InitMode::Pretrained, per_seed: Vec::new(), mean: 0.0 });
    }
    for &seed in &cfg.seeds {
        for arm in arms.iter_mut() {
            let model = match arm.init {
                InitMode::Scratch => VocoModel::init(&ModelConfig { feature_dim, init_seed: seed }),
                InitMode::Pretrained => pretrained.expect("arm exists only with a model").clone(),
            };
            let value = match cfg.task {
                ProbeTask::PhantomSeg => seg_probe(model, &train, &held_out, cfg, seed)?,
                ProbeTask::PhantomCls => cls_probe(model, &train, &held_out, cfg, seed)?,
            };
            log::info!("probe {} {:?} seed {seed}: {value:.4}", cfg.task, arm.init);
            arm.per_seed.push(value);
        }
    }
    for arm in arms.iter_mut() {
        arm.mean = arm.per_seed.iter().sum::<f64>() / arm.per_seed.len().max(1) as f64;
    }
    Ok(TransferReport {
        task: cfg.task,
        metric: cfg.task.metric().to_string(),
        steps: cfg.steps,
        full_network: cfg.full_network,
        seeds: cfg.seeds.clone(),
        arms,
    })
}

fn batch_of(step: u64, size: usize, len: usize) -> Vec<usize> {
    (0..size).map(|j| (step as usize * size + j) % len).collect()
}

fn seg_probe<T: Real>(model: VocoModel<T>, train: &[Arc<Volume>], held_out: &[Arc<Volume>], cfg: &ProbeConfig, seed: u64) -> Result<f64> {
    let ocfg = OmniConfig { seg_crop: cfg.crop, ..OmniConfig::default() };
    let mut om = OmniModel::from_model(model, &ocfg);
    let mut rng = rng::stream(seed, rng::domain::PROBE);
    for step in 0..cfg.steps {
        let batch: Vec<&Volume> = batch_of(step, cfg.batch, train.len()).into_iter().map(|i| train[i].as_ref()).collect();
        supervised_step(&mut om, &batch, cfg.crop, cfg.learning_rate, cfg.full_network, &mut rng)?;
    }
    let mut total = 0.0;
    for v in held_out {
        let p = om.predict(v)?;
        total += dice(&p.labels, v.labels().expect("phantoms are labeled"), ocfg.classes);
    }
    Ok(total / held_out.len() as f64)
}

fn random_crop(v: &Volume, size: [usize; 3], rng: &mut Rng) -> Vec<f32> {
    let origin = [0, 1, 2].map(|a| rng.gen_range(0..=v.dims()[a] - size[a]));
    v.extract(origin, size)
}

fn region_index(r: Region) -> usize {
    Region::ALL.iter().position(|&x| x == r).expect("listed region")
}

fn cls_probe<T: Real>(
    mut model: VocoModel<T>,
    train: &[Arc<Volume>],
    held_out: &[Arc<Volume>],
    cfg: &ProbeConfig,
    seed: u64,
) -> Result<f64> {
    if cfg.dims.iter().zip(cfg.crop).any(|(&d, c)| c > d) {
        return Err(ModelError::CropTooSmall(cfg.dims).into());
    }
    let classes = Region::ALL.len();
    let mut head = Linear::<T>::zeros(model.feature_dim(), classes);
    let mut rng = rng::stream(seed, rng::domain::PROBE);
    let lr = T::lit(cfg.learning_rate);
    for step in 0..cfg.steps {
        let idx = batch_of(step, cfg.batch, train.len());
        let crops: Vec<Vec<f32>> = idx.iter().map(|&i| random_crop(&train[i], cfg.crop, &mut rng)).collect();
        let targets: Vec<u32> = idx.iter().map(|&i| region_index(train[i].region()) as u32).collect();
        let mut tape = Tape::new();
        let enc = model.encoder.bind(&mut tape, cfg.full_network);
        let hb = head.bind(&mut tape, true);
        let refs: Vec<&[f32]> = crops.iter().map(Vec::as_slice).collect();
        let x = crop_batch(&mut tape, &refs, cfg.crop)?;
        let f = enc.forward(&mut tape, x)?.features;
        let logits = Linear::forward(&mut tape, hb, f).map_err(ModelError::from)?;
        let loss = tape.softmax_cross_entropy(logits, &targets).map_err(ModelError::from)?;
        let grads = tape.backward(loss).map_err(ModelError::from)?;
        sgd_step(vec![&mut head.weight, &mut head.bias], &[hb.0, hb.1], &grads, lr);
        if cfg.full_network {
            sgd_step(model.encoder.params_mut(), &enc.vars(), &grads, lr);
        }
    }
    let mut eval_rng = rng::stream(seed, rng::domain::PROBE ^ 1);
    let (mut hits, mut total) = (0usize, 0usize);
    for v in held_out {
        for _ in 0..cfg.crops_per_volume {
            let crop = random_crop(v, cfg.crop, &mut eval_rng);
            let f = model.encoder.encode(&crop, cfg.crop)?;
            let scores: Vec<f64> = (0..classes)
                .map(|c| {
                    let mut s = head.bias.data()[c].as_f64();
                    for (j, x) in f.iter().enumerate() {
                        s += x.as_f64() * head.weight.data()[j * classes + c].as_f64();
                    }
                    s
                })
                .collect();
            hits += usize::from(crate::crop::argmax(&scores) == region_index(v.region()));
            total += 1;
        }
    }
    Ok(hits as f64 / total.max(1) as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny(task: ProbeTask, steps: u64) -> ProbeConfig {
        ProbeConfig {
            task,
            steps,
            seeds: vec![0, 1],
            labeled: 3,
            eval_volumes: 2,
            dims: [16, 16, 16],
            crop: [16, 16, 16],
            crops_per_volume: 2,
            ..ProbeConfig::default()
        }
    }

    #[test]
    fn task_ids_parse() {
        assert_eq!("phantom-seg".parse::<ProbeTask>().unwrap(), ProbeTask::PhantomSeg);
        assert_eq!("phantom-cls".parse::<ProbeTask>().unwrap(), ProbeTask::PhantomCls);
        assert!(matches!("liver".parse::<ProbeTask>(), Err(EvalError::UnknownTask(_))));
    }

    #[test]
    fn zero_steps_give_identical_arms() {
        let pre = VocoModel::<f32>::init(&ModelConfig { feature_dim: 8, init_seed: 99 });
        for task in [ProbeTask::PhantomSeg, ProbeTask::PhantomCls] {
            let r = probe_transfer(Some(&pre), 8, &tiny(task, 0)).unwrap();
            assert_eq!(r.arm(InitMode::Scratch).unwrap().per_seed, r.arm(InitMode::Pretrained).unwrap().per_seed);
        }
    }

    #[test]
    fn report_round_trips() {
        let r = probe_transfer::<f32>(None, 8, &tiny(ProbeTask::PhantomCls, 2)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("r.json");
        std::fs::write(&path, serde_json::to_string(&r).unwrap()).unwrap();
        assert_eq!(read_transfer_report(&path).unwrap(), r);
        assert!(r.arms[0].per_seed.iter().all(|v| (0.0..=1.0).contains(v)));
    }
}
