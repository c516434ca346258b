//! The optimization loop.

use std::path::PathBuf;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::camera::Camera;
use crate::error::{Result, WsrError};
use crate::io::ply::save_ply;
use crate::metrics::psnr;
use crate::render::{render_wsr, Image, RenderOptions};
use crate::scene::{scene_new_random, Aabb, RandomInit, Scene, WeightKind};
use crate::train::adam::{adam_step, AdamState, LearningRates};
use crate::train::backward::backward_wsr;
use crate::train::densify::{densify, remap_adam, DensifyConfig, DensifyStats};
use crate::train::loss::LossWeights;

#[derive(Debug, Clone)]
pub struct View {
    pub id: String,
    pub camera: Camera,
    pub image: Image,
}

#[derive(Debug, Clone, Default)]
pub struct Dataset {
    pub views: Vec<View>,
}

impl Dataset {
    pub fn new(views: Vec<View>) -> Result<Self> {
        for v in &views {
            if v.image.width != v.camera.width || v.image.height != v.camera.height {
                return Err(WsrError::invalid(format!(
                    "view {}: image is {}x{} but the camera is {}x{}",
                    v.id, v.image.width, v.image.height, v.camera.width, v.camera.height
                )));
            }
        }
        Ok(Self { views })
    }

    /// 1.1 times the largest distance of a camera center from their mean.
    pub fn extent(&self) -> f64 {
        let n = self.views.len();
        if n == 0 {
            return 1.0;
        }
        let centers: Vec<_> = self.views.iter().map(|v| v.camera.center()).collect();
        let mean = centers.iter().sum::<nalgebra::Vector3<f64>>() / n as f64;
        let radius = centers.iter().map(|c| (c - mean).norm()).fold(0.0, f64::max);
        if radius > 0.0 {
            1.1 * radius
        } else {
            1.0
        }
    }
}

/// Random initial scene.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InitConfig {
    pub weight_model: WeightKind,
    pub count: usize,
    pub bounds: Aabb,
    pub sh_degree_color: u8,
    pub sh_degree_opacity: u8,
    pub opacity: f64,
    pub background_color: [f64; 3],
    pub background_weight: f64,
    pub scale_fraction: f64,
}

impl Default for InitConfig {
    fn default() -> Self {
        let r = RandomInit::default();
        Self {
            weight_model: r.weight,
            count: 100,
            bounds: Aabb::new([-1.0; 3], [1.0; 3]),
            sh_degree_color: r.sh_degree_color,
            sh_degree_opacity: r.sh_degree_opacity,
            opacity: r.opacity,
            background_color: [0.0; 3],
            background_weight: r.background_weight,
            scale_fraction: r.scale_fraction,
        }
    }
}

impl InitConfig {
    pub fn build(&self, seed: u64) -> Result<Scene> {
        let mut scene = scene_new_random(
            self.count,
            self.bounds,
            seed,
            &RandomInit {
                weight: self.weight_model,
                sh_degree_color: self.sh_degree_color,
                sh_degree_opacity: self.sh_degree_opacity,
                opacity: self.opacity,
                background_weight: self.background_weight,
                scale_fraction: self.scale_fraction,
            },
        )?;
        scene.background_color = self.background_color;
        Ok(scene)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub seed: u64,
    pub iterations: usize,
    pub init: InitConfig,
    pub learning_rates: LearningRates,
    pub densify: DensifyConfig,
    pub loss: LossWeights,
    /// Steps between evaluations over all views; zero logs only the start
    /// and the end.
    pub eval_interval: usize,
    /// Steps between PLY checkpoints; zero disables them.
    pub checkpoint_interval: usize,
    pub checkpoint_dir: Option<PathBuf>,
    /// Overrides the camera-derived scene extent.
    pub spatial_scale: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            iterations: 2000,
            init: InitConfig::default(),
            learning_rates: LearningRates::default(),
            densify: DensifyConfig::default(),
            loss: LossWeights::default(),
            eval_interval: 100,
            checkpoint_interval: 0,
            checkpoint_dir: None,
            spatial_scale: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub iteration: usize,
    /// Mean training loss since the previous record; absent before the
    /// first step.
    pub loss: Option<f64>,
    /// Mean PSNR over all views.
    pub psnr: f64,
    pub elements: usize,
    pub sigma: f64,
    pub beta: f64,
    pub background_weight: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TrainLog {
    pub records: Vec<MetricRecord>,
}

impl TrainLog {
    pub fn final_psnr(&self) -> Option<f64> {
        self.records.last().map(|r| r.psnr)
    }
}

/// Mean PSNR of the WSR render over every view.
pub fn mean_psnr(scene: &Scene, dataset: &Dataset, opts: &RenderOptions) -> Result<f64> {
    let mut total = 0.0;
    for v in &dataset.views {
        total += psnr(&render_wsr(scene, &v.camera, opts)?, &v.image)?;
    }
    Ok(total / dataset.views.len() as f64)
}

/// Trains from the random scene described by `config.init`.
pub fn train(dataset: &Dataset, config: &TrainConfig) -> Result<(Scene, TrainLog)> {
    train_from(config.init.build(config.seed)?, dataset, config)
}

pub fn train_from(mut scene: Scene, dataset: &Dataset, config: &TrainConfig) -> Result<(Scene, TrainLog)> {
    if dataset.views.is_empty() {
        return Err(WsrError::invalid("training needs at least one view"));
    }
    scene.validate()?;
    let opts = RenderOptions::default();
    let extent = config.spatial_scale.unwrap_or_else(|| dataset.extent());
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut adam = AdamState::new(scene.param_count());
    let mut stats = DensifyStats::new(scene.len());
    let mut log = TrainLog::default();
    let record = |scene: &Scene, iteration: usize, loss: Option<f64>| -> Result<MetricRecord> {
        Ok(MetricRecord {
            iteration,
            loss,
            psnr: mean_psnr(scene, dataset, &opts)?,
            elements: scene.len(),
            sigma: scene.weight_model.sigma,
            beta: scene.weight_model.beta,
            background_weight: scene.background_weight,
        })
    };
    log.records.push(record(&scene, 0, None)?);

    let mut order: Vec<usize> = Vec::new();
    let (mut loss_sum, mut loss_count) = (0.0, 0usize);
    for it in 1..=config.iterations {
        if order.is_empty() {
            order = (0..dataset.views.len()).collect();
            order.shuffle(&mut rng);
        }
        let view = &dataset.views[order.pop().expect("refilled above")];
        let out = backward_wsr(&scene, &view.camera, &view.image, &opts, &config.loss)?;
        loss_sum += out.loss;
        loss_count += 1;
        stats.record(&out.screen, &out.grads.values, &out.grads.layout);
        let lr_pos = config.learning_rates.position_at(it - 1, config.iterations) * extent;
        adam_step(&mut scene, &out.grads.values, &mut adam, &config.learning_rates, lr_pos)?;

        if config.densify.due(it) {
            let old = scene.layout();
            let outcome = densify(&mut scene, &stats, &config.densify, extent, &mut rng);
            adam = remap_adam(&adam, &old, &scene.layout(), &outcome.origins);
            stats = DensifyStats::new(scene.len());
        }
        let eval_now = it == config.iterations || (config.eval_interval > 0 && it % config.eval_interval == 0);
        if eval_now {
            log.records.push(record(&scene, it, Some(loss_sum / loss_count as f64))?);
            loss_sum = 0.0;
            loss_count = 0;
        }
        if config.checkpoint_interval > 0 && (it % config.checkpoint_interval == 0 || it == config.iterations) {
            if let Some(dir) = &config.checkpoint_dir {
                save_ply(&scene, &dir.join(format!("checkpoint_{it:06}.ply")))?;
            }
        }
    }
    Ok((scene, log))
}
