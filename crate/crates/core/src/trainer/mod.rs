//! The optimization loop: one sampled view per iteration, photometric plus
//! prior and multi-view objectives, Adam on the raw surfel parameters, and
//! scheduled seed growth and pruning.

pub mod checkpoint;

pub use checkpoint::{read_checkpoint, write_checkpoint, Checkpoint, CHECKPOINT_MAGIC};

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::PipelineConfig;
use crate::densify::{grow_seeds, prune_seeds};
use crate::error::{Error, Result};
use crate::gradients::{accumulate_seed_stats, backward_reusing, OutputGrads, ParamGrads};
use crate::grid::Grid;
use crate::io::dataset::Dataset;
use crate::losses::{
    depth_loss, mv_consistency_loss, normal_loss, rgb_loss, select_neighbor, LossTerms, MvInputs, MvView,
};
use crate::math::normalize_quat;
use crate::rasterizer::render_keep_binning;
use crate::scene::{Camera, Scene, SURFEL_PARAMS};

/// Rendered pixels below this alpha carry no prior supervision.
pub const PRIOR_ALPHA_MIN: f64 = 0.01;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub total_iters: u32,
    /// Initial offset learning rate, multiplied by the scene extent.
    pub lr_offset: f64,
    /// Offset learning rate reached at `total_iters`.
    pub lr_offset_final: f64,
    pub lr_rotation: f64,
    pub lr_scale: f64,
    pub lr_opacity: f64,
    pub lr_color: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub seed: u64,
    /// Iterations between checkpoints; 0 disables periodic checkpoints.
    pub checkpoint_every: u32,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            total_iters: 30000,
            lr_offset: 0.00016,
            lr_offset_final: 0.0000016,
            lr_rotation: 0.001,
            lr_scale: 0.005,
            lr_opacity: 0.05,
            lr_color: 0.0025,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-15,
            seed: 0,
            checkpoint_every: 5000,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let rates = [
            self.lr_offset,
            self.lr_offset_final,
            self.lr_rotation,
            self.lr_scale,
            self.lr_opacity,
            self.lr_color,
        ];
        if rates.iter().any(|r| !(*r > 0.0) || !r.is_finite()) {
            return Err(Error::InvalidConfig("learning rates must be finite and > 0".into()));
        }
        if !(0.0..1.0).contains(&self.adam_beta1) || !(0.0..1.0).contains(&self.adam_beta2) || !(self.adam_eps > 0.0) {
            return Err(Error::InvalidConfig("Adam betas must be in [0, 1) and eps > 0".into()));
        }
        Ok(())
    }

    /// Offset learning rate at `iter`, log-linear from `lr_offset` to
    /// `lr_offset_final` over `total_iters`.
    pub fn offset_lr(&self, iter: u32, extent: f64) -> f64 {
        let t = (f64::from(iter) / f64::from(self.total_iters.max(1))).clamp(0.0, 1.0);
        let lr = (self.lr_offset.ln() * (1.0 - t) + self.lr_offset_final.ln() * t).exp();
        lr * extent
    }

    fn group_lr(&self, param: usize, offset_lr: f64) -> f64 {
        match param {
            0..=2 => offset_lr,
            3..=6 => self.lr_rotation,
            7..=8 => self.lr_scale,
            9 => self.lr_opacity,
            _ => self.lr_color,
        }
    }
}

/// Outputs written during [`fit`].
#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainOptions {
    /// Directory for periodic and final checkpoints.
    pub checkpoint_dir: Option<PathBuf>,
    /// CSV file receiving one row per iteration.
    pub loss_log: Option<PathBuf>,
}

/// Optimizer state that must survive a checkpoint round trip.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    /// Iterations completed so far.
    pub iteration: u32,
    /// Adam first moments, one row per surfel.
    pub m: Vec<[f64; SURFEL_PARAMS]>,
    /// Adam second moments, one row per surfel.
    pub v: Vec<[f64; SURFEL_PARAMS]>,
    pub rng: ChaCha8Rng,
    /// View order of the current epoch and the position within it.
    pub order: Vec<u32>,
    pub cursor: usize,
    /// Scene extent fixed at the start of training.
    pub extent: f64,
    /// Exponential moving average of the total loss.
    pub loss_ema: f64,
}

impl TrainState {
    pub fn new(scene: &Scene, seed: u64) -> Self {
        Self {
            iteration: 0,
            m: vec![[0.0; SURFEL_PARAMS]; scene.surfels.len()],
            v: vec![[0.0; SURFEL_PARAMS]; scene.surfels.len()],
            rng: ChaCha8Rng::seed_from_u64(seed),
            order: Vec::new(),
            cursor: 0,
            extent: scene.extent().max(1e-6),
            loss_ema: 0.0,
        }
    }

    fn next_view(&mut self, n_views: usize) -> usize {
        if self.cursor >= self.order.len() {
            self.order = (0..n_views as u32).collect();
            self.order.shuffle(&mut self.rng);
            self.cursor = 0;
        }
        let v = self.order[self.cursor] as usize;
        self.cursor += 1;
        v
    }

    fn extend(&mut self, n: usize) {
        self.m.resize(n, [0.0; SURFEL_PARAMS]);
        self.v.resize(n, [0.0; SURFEL_PARAMS]);
    }

    fn retain(&mut self, keep: &[bool]) {
        for buf in [&mut self.m, &mut self.v] {
            let mut i = 0;
            buf.retain(|_| {
                let k = keep[i];
                i += 1;
                k
            });
        }
    }
}

/// What one iteration did, observed after the step.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepReport {
    pub iteration: u32,
    pub view: usize,
    pub terms: LossTerms,
    pub total: f64,
    /// This iteration was a grow/prune event.
    pub densified: bool,
    pub grown: usize,
    pub pruned: usize,
    pub seeds: usize,
    pub surfels: usize,
}

impl StepReport {
    pub const CSV_HEADER: &'static str = "iteration,view,total,rgb,depth,normal,mv,seeds,surfels,grown,pruned";

    pub fn csv_row(&self) -> String {
        let opt = |v: Option<f64>| v.map_or(String::new(), |x| x.to_string());
        format!(
            "{},{},{},{},{},{},{},{},{},{},{}",
            self.iteration,
            self.view,
            self.total,
            self.terms.rgb,
            opt(self.terms.depth),
            opt(self.terms.normal),
            opt(self.terms.mv),
            self.seeds,
            self.surfels,
            self.grown,
            self.pruned
        )
    }
}

pub struct Trainer<'a> {
    pub config: PipelineConfig,
    pub scene: Scene,
    pub state: TrainState,
    dataset: &'a Dataset,
    cameras: Vec<Camera>,
    neighbors: Vec<Option<usize>>,
}

fn check_finite(term: &str, value: f64, view: usize) -> Result<f64> {
    if value.is_finite() {
        Ok(value)
    } else {
        log::error!("non-finite `{term}` loss on view {view}: {value}");
        Err(Error::NonFiniteLoss {
            term: term.to_string(),
            view,
        })
    }
}

impl<'a> Trainer<'a> {
    pub fn new(scene: Scene, dataset: &'a Dataset, config: PipelineConfig) -> Result<Self> {
        let state = TrainState::new(&scene, config.train.seed);
        Self::resume(scene, state, dataset, config)
    }

    pub fn resume(scene: Scene, state: TrainState, dataset: &'a Dataset, config: PipelineConfig) -> Result<Self> {
        config.validate()?;
        if dataset.is_empty() {
            return Err(Error::Empty("dataset has no frames".into()));
        }
        if state.m.len() != scene.surfels.len() || state.v.len() != scene.surfels.len() {
            return Err(Error::DimensionMismatch("optimizer moments do not match the surfels".into()));
        }
        let cameras = dataset.cameras();
        let neighbors = (0..cameras.len())
            .map(|i| select_neighbor(&cameras, i, config.mv.max_neighbor_angle_deg))
            .collect();
        Ok(Self {
            config,
            scene,
            state,
            dataset,
            cameras,
            neighbors,
        })
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            config: self.config.clone(),
            scene: self.scene.clone(),
            state: self.state.clone(),
            cameras: self.dataset.named_cameras(),
        }
    }

    fn mv_weighted(&self) -> bool {
        self.config.loss.lambda_geo > 0.0 || self.config.loss.lambda_pho > 0.0
    }

    /// Runs one iteration.
    pub fn step(&mut self) -> Result<StepReport> {
        let iter = self.state.iteration + 1;
        let view = self.state.next_view(self.cameras.len());
        let cfg = self.config.clone();
        let cfg = &cfg;
        let frame = &self.dataset.frames[view];
        let camera = &self.cameras[view];
        let (out, bins) = render_keep_binning(&self.scene, camera, &cfg.raster);
        let (w, h) = (camera.width, camera.height);
        let mut grads = OutputGrads::zeros(w, h);
        let mut terms = LossTerms::default();

        let rgb = rgb_loss(&out.color, &frame.image, cfg.loss.rgb_ssim_mix)?;
        terms.rgb = check_finite("rgb", rgb.value, view)?;
        for (g, d) in grads.color.data.iter_mut().zip(&rgb.grad.data) {
            *g = d.map(|v| v * cfg.loss.lambda_rgb);
        }

        let covered: Grid<bool> = out.alpha.map(|a| *a > PRIOR_ALPHA_MIN);
        if let (Some(prior), true) = (&frame.depth, cfg.loss.lambda_d > 0.0) {
            let mask = Grid::from_vec(
                w,
                h,
                covered.data.iter().zip(&prior.data).map(|(c, p)| *c && *p > 0.0).collect(),
            );
            let d = depth_loss(&out.depth, prior, &mask, cfg.loss.lambda_grad);
            terms.depth = Some(check_finite("depth", d.value, view)?);
            for (g, v) in grads.depth.data.iter_mut().zip(&d.grad.data) {
                *g += cfg.loss.lambda_d * v;
            }
        }
        if let (Some(prior), true) = (&frame.normal, cfg.loss.lambda_n > 0.0) {
            let n = normal_loss(&out.normal, prior, &covered, cfg.loss.lambda_1, cfg.loss.lambda_cos);
            terms.normal = Some(check_finite("normal", n.value, view)?);
            for (g, v) in grads.normal.data.iter_mut().zip(&n.grad.data) {
                for k in 0..3 {
                    g[k] += cfg.loss.lambda_n * v[k];
                }
            }
        }

        let mut param_grads = backward_reusing(&self.scene, camera, &cfg.raster, &bins, &out, &grads)?;

        let neighbor = self.neighbors[view].filter(|_| iter >= cfg.mv.start_iter && self.mv_weighted());
        if let Some(nb) = neighbor {
            let nb_cam = &self.cameras[nb];
            let (nb_out, nb_bins) = render_keep_binning(&self.scene, nb_cam, &cfg.raster);
            let inputs = MvInputs {
                reference: MvView {
                    camera,
                    render: &out,
                    image: &frame.image,
                },
                neighbor: MvView {
                    camera: nb_cam,
                    render: &nb_out,
                    image: &self.dataset.frames[nb].image,
                },
            };
            let mv = mv_consistency_loss(&inputs, &cfg.mv, &cfg.loss)?;
            terms.mv = Some(check_finite("mv", mv.value, view)?);
            if !mv.is_empty() {
                let g_ref = backward_reusing(&self.scene, camera, &cfg.raster, &bins, &out, &mv.grad_reference)?;
                let g_nb = backward_reusing(&self.scene, nb_cam, &cfg.raster, &nb_bins, &nb_out, &mv.grad_neighbor)?;
                param_grads.add_assign(&g_ref);
                param_grads.add_assign(&g_nb);
            }
        }

        let total = check_finite("total", crate::losses::total_loss(&terms, &cfg.loss)?, view)?;

        if cfg.densify.accumulates(iter) {
            accumulate_seed_stats(&param_grads, &mut self.scene);
        }
        self.adam_update(&param_grads, iter);

        let (mut grown, mut pruned) = (0, 0);
        let densified = cfg.densify.is_grow_step(iter) || cfg.densify.is_prune_step(iter);
        if cfg.densify.is_grow_step(iter) {
            grown = grow_seeds(&mut self.scene, &cfg.densify, iter, &mut self.state.rng);
            self.state.extend(self.scene.surfels.len());
        }
        if cfg.densify.is_prune_step(iter) {
            let outcome = prune_seeds(&mut self.scene, &cfg.densify, iter);
            pruned = outcome.pruned;
            self.state.retain(&outcome.keep_mask);
        }
        debug_assert_eq!(self.state.m.len(), self.scene.surfels.len());

        self.state.iteration = iter;
        self.state.loss_ema = if iter == 1 { total } else { 0.99 * self.state.loss_ema + 0.01 * total };
        Ok(StepReport {
            iteration: iter,
            view,
            terms,
            total,
            densified,
            grown,
            pruned,
            seeds: self.scene.active_seed_count(),
            surfels: self.scene.surfels.len(),
        })
    }

    fn adam_update(&mut self, grads: &ParamGrads, iter: u32) {
        let tc = &self.config.train;
        let (b1, b2) = (tc.adam_beta1, tc.adam_beta2);
        let c1 = 1.0 - b1.powi(iter as i32);
        let c2 = 1.0 - b2.powi(iter as i32);
        let offset_lr = tc.offset_lr(iter - 1, self.state.extent);
        let lrs: [f64; SURFEL_PARAMS] = std::array::from_fn(|j| tc.group_lr(j, offset_lr));
        for (i, surfel) in self.scene.surfels.iter_mut().enumerate() {
            let g = grads.surfels[i].as_array();
            let (m, v) = (&mut self.state.m[i], &mut self.state.v[i]);
            if g.iter().chain(m.iter()).chain(v.iter()).all(|x| *x == 0.0) {
                continue;
            }
            let mut p = surfel.params();
            for j in 0..SURFEL_PARAMS {
                m[j] = b1 * m[j] + (1.0 - b1) * g[j];
                v[j] = b2 * v[j] + (1.0 - b2) * g[j] * g[j];
                p[j] -= lrs[j] * (m[j] / c1) / ((v[j] / c2).sqrt() + tc.adam_eps);
            }
            surfel.set_params(&p);
            normalize_quat(&mut surfel.rotation);
        }
    }
}

/// Result of a complete run.
pub struct FitOutput {
    pub scene: Scene,
    pub state: TrainState,
    pub reports: Vec<StepReport>,
}

fn write_csv(path: &Path, reports: &[StepReport]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let io = |e| Error::io(path, e);
    writeln!(w, "{}", StepReport::CSV_HEADER).map_err(io)?;
    for r in reports {
        writeln!(w, "{}", r.csv_row()).map_err(io)?;
    }
    w.flush().map_err(io)
}

/// Trains for `config.train.total_iters` iterations from a fresh optimizer.
pub fn fit(scene: Scene, dataset: &Dataset, config: &PipelineConfig, options: &TrainOptions) -> Result<FitOutput> {
    let trainer = Trainer::new(scene, dataset, config.clone())?;
    run(trainer, options)
}

/// Continues a trainer until `total_iters` and writes the requested outputs.
pub fn run(mut trainer: Trainer, options: &TrainOptions) -> Result<FitOutput> {
    let total = trainer.config.train.total_iters;
    let every = trainer.config.train.checkpoint_every;
    let mut reports = Vec::with_capacity(total.saturating_sub(trainer.state.iteration) as usize);
    while trainer.state.iteration < total {
        let r = trainer.step()?;
        if r.iteration % 1000 == 0 {
            log::info!(
                "iter {} loss {:.5} (ema {:.5}) seeds {} surfels {}",
                r.iteration,
                r.total,
                trainer.state.loss_ema,
                r.seeds,
                r.surfels
            );
        }
        reports.push(r);
        if let Some(dir) = &options.checkpoint_dir {
            if every > 0 && r.iteration % every == 0 && r.iteration < total {
                write_checkpoint(&dir.join(format!("ckpt_{:06}.bin", r.iteration)), &trainer.checkpoint())?;
            }
        }
    }
    if let Some(dir) = &options.checkpoint_dir {
        write_checkpoint(&dir.join("final.bin"), &trainer.checkpoint())?;
    }
    if let Some(path) = &options.loss_log {
        write_csv(path, &reports)?;
    }
    Ok(FitOutput {
        scene: trainer.scene,
        state: trainer.state,
        reports,
    })
}
