use std::fmt::Write as _;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::metrics::{evaluate, Metrics};
use super::synth::{synth_scene, SynthSpec};
use crate::diffcore::{cosine_lr, name_seed, AdamW, Real};
use crate::error::{Error, Result};
use crate::geometry::{augment, Augmentation, PointCloud};
use crate::network::{Model, ModelConfig};

pub const METRICS_HEADER: &str = "step,loss,oa,macc,miou";

/// Which training-time augmentations are applied each step.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentFlags {
    pub rotate: bool,
    pub scale: bool,
    pub jitter: bool,
    pub drop_color: bool,
}

impl Default for AugmentFlags {
    fn default() -> Self {
        AugmentFlags {
            rotate: true,
            scale: true,
            jitter: true,
            drop_color: false,
        }
    }
}

impl AugmentFlags {
    pub fn none() -> Self {
        AugmentFlags {
            rotate: false,
            scale: false,
            jitter: false,
            drop_color: false,
        }
    }

    pub fn ops(&self) -> Vec<Augmentation> {
        let mut ops = Vec::new();
        if self.rotate {
            ops.push(Augmentation::RotateZ {
                min_deg: 0.0,
                max_deg: 360.0,
            });
        }
        if self.scale {
            ops.push(Augmentation::Scale { min: 0.9, max: 1.1 });
        }
        if self.jitter {
            ops.push(Augmentation::Jitter { sigma: 0.005, clip: 0.02 });
        }
        if self.drop_color {
            ops.push(Augmentation::DropColor { prob: 0.2 });
        }
        ops
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub steps: usize,
    /// Peak learning rate of the cosine schedule.
    pub lr: f64,
    pub weight_decay: f64,
    pub seed: u64,
    pub augment: AugmentFlags,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 500,
            lr: 1e-3,
            weight_decay: 0.1,
            seed: 0,
            augment: AugmentFlags::default(),
        }
    }
}

/// Training data: one fixed cloud, or a freshly generated scene every step.
#[derive(Clone, Debug)]
pub enum SceneSource {
    Fixed(PointCloud),
    Fresh(fn(u64) -> SynthSpec),
}

impl SceneSource {
    pub fn scene(&self, seed: u64, step: usize) -> Result<PointCloud> {
        match self {
            SceneSource::Fixed(c) => Ok(c.clone()),
            SceneSource::Fresh(make) => synth_scene(&make(name_seed(seed, &format!("scene{step}")))),
        }
    }
}

/// Loss and training-set metrics of one step, measured before the update.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TrainRecord {
    pub step: usize,
    pub loss: f64,
    pub metrics: Metrics,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome<T: Real> {
    pub records: Vec<TrainRecord>,
    pub model: Model<T>,
}

impl<T: Real> TrainOutcome<T> {
    pub fn losses(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.loss).collect()
    }

    pub fn metrics_csv(&self) -> String {
        metrics_csv(&self.records)
    }

    /// Final loss and metrics plus run settings as a JSON object.
    pub fn summary_json(&self, train: &TrainConfig) -> String {
        let last = self.records.last();
        let value = serde_json::json!({
            "steps": self.records.len(),
            "seed": train.seed,
            "lr": train.lr,
            "weight_decay": train.weight_decay,
            "final_loss": last.map(|r| r.loss),
            "final_oa": last.map(|r| r.metrics.oa),
            "final_macc": last.map(|r| r.metrics.macc),
            "final_miou": last.map(|r| r.metrics.miou),
            "num_parameters": self.model.params.num_scalars(),
            "model": self.model.config,
        });
        serde_json::to_string_pretty(&value).expect("plain json values") + "\n"
    }
}

/// Renders records under [`METRICS_HEADER`] with fixed six-decimal formatting.
pub fn metrics_csv(records: &[TrainRecord]) -> String {
    let mut out = String::from(METRICS_HEADER);
    out.push('\n');
    for r in records {
        let m = &r.metrics;
        let _ = writeln!(out, "{},{:.6},{:.6},{:.6},{:.6}", r.step, r.loss, m.oa, m.macc, m.miou);
    }
    out
}

pub fn write_metrics_csv(records: &[TrainRecord], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, metrics_csv(records)).map_err(|e| Error::io(path, e))
}

/// Trains a freshly initialised model. Each step augments the scene, runs the
/// forward pass and cross-entropy, backpropagates and takes one AdamW step at
/// the cosine-scheduled rate. The model seed, augmentation draws and fresh
/// scenes all derive from `train.seed`.
pub fn train<T: Real>(config: &ModelConfig, source: &SceneSource, train: &TrainConfig) -> Result<TrainOutcome<T>> {
    let mut model = Model::<T>::new(config.clone(), train.seed)?;
    let records = train_model(&mut model, source, train)?;
    Ok(TrainOutcome { records, model })
}

/// Continues training `model` in place.
pub fn train_model<T: Real>(model: &mut Model<T>, source: &SceneSource, train: &TrainConfig) -> Result<Vec<TrainRecord>> {
    if !(train.lr >= 0.0 && train.weight_decay >= 0.0) {
        return Err(Error::Config("learning rate and weight decay must be non-negative".into()));
    }
    let ops = train.augment.ops();
    let mut opt = AdamW::new(train.lr, train.weight_decay);
    let mut records = Vec::with_capacity(train.steps);
    for step in 0..train.steps {
        let scene = source.scene(train.seed, step)?;
        let mut rng = ChaCha8Rng::seed_from_u64(name_seed(train.seed, &format!("augment{step}")));
        let cloud = augment(&scene, &ops, &mut rng);
        model.params.zero_grad();
        let (loss, logits) = model.loss_and_grad(&cloud)?;
        let loss = loss.as_f64();
        if !loss.is_finite() {
            return Err(Error::Diverged { step });
        }
        let labels = cloud.labels.as_deref().expect("loss_and_grad checked labels");
        let metrics = evaluate(&logits, labels)?;
        records.push(TrainRecord { step, loss, metrics });
        opt.set_lr(cosine_lr(train.lr, step, train.steps));
        opt.step(&mut model.params)?;
    }
    Ok(records)
}

/// Trains in 32-bit precision on the two-class synthetic scene.
pub fn train_toy(config: &ModelConfig, spec: &SynthSpec, train_cfg: &TrainConfig) -> Result<TrainOutcome<f32>> {
    let cloud = synth_scene(spec)?;
    train::<f32>(config, &SceneSource::Fixed(cloud), train_cfg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::training::SynthSpec;

    fn tiny() -> (ModelConfig, PointCloud) {
        let mut spec = SynthSpec::two_class(1);
        spec.primitives[0].count = 60;
        spec.primitives[1].count = 60;
        let cfg = ModelConfig {
            depths: vec![1, 1],
            base_channels: 12,
            ..ModelConfig::toy()
        };
        (cfg, synth_scene(&spec).unwrap())
    }

    #[test]
    fn zero_lr_keeps_loss_constant() {
        let (cfg, cloud) = tiny();
        let tc = TrainConfig {
            steps: 4,
            lr: 0.0,
            augment: AugmentFlags::none(),
            ..TrainConfig::default()
        };
        let out = train::<f64>(&cfg, &SceneSource::Fixed(cloud), &tc).unwrap();
        let l = out.losses();
        assert!(l.iter().all(|&v| v == l[0]), "{l:?}");
    }

    #[test]
    fn fixed_seed_reproduces_trace() {
        let (cfg, cloud) = tiny();
        let tc = TrainConfig {
            steps: 3,
            seed: 5,
            ..TrainConfig::default()
        };
        let src = SceneSource::Fixed(cloud);
        let a = train::<f32>(&cfg, &src, &tc).unwrap();
        let b = train::<f32>(&cfg, &src, &tc).unwrap();
        assert_eq!(a.metrics_csv(), b.metrics_csv());
        assert!(a.metrics_csv().starts_with("step,loss,oa,macc,miou\n0,"));
        assert_eq!(a.metrics_csv().lines().count(), 4);
    }

    #[test]
    fn nan_loss_reports_step() {
        let (cfg, cloud) = tiny();
        let mut model = Model::<f64>::new(cfg, 0).unwrap();
        let ids: Vec<_> = model.params.iter().map(|(id, _)| id).collect();
        let t = model.params.get_mut(ids[0]);
        t.tensor.data_mut()[0] = f64::NAN;
        let tc = TrainConfig {
            steps: 2,
            ..TrainConfig::default()
        };
        let err = train_model(&mut model, &SceneSource::Fixed(cloud), &tc).unwrap_err();
        assert!(matches!(err, Error::Diverged { step: 0 }), "{err}");
    }
}
