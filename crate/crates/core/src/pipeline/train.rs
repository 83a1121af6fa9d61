use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::adam::Adam;
use super::config::{PipelineConfig, Stage};
use super::sample::StereoSample;
use crate::bench::{epe, error_rate};
use crate::cost::FeatureMap;
use crate::error::{Error, Result};
use crate::head::DisparityMap;
use crate::io::read_tensor;
use crate::nets::{init_params, AdaptorDesc, HeadConfig, ModelInput, NetDescriptor, NetParams, StereoModel};

/// Where a pipeline's features come from.
#[derive(Debug, Clone)]
pub enum FeatureSource {
    /// Computed from the images by the model's feature network.
    Learned,
    External(ExternalFeatures),
}

#[derive(Debug, Clone)]
pub enum ExternalFeatures {
    /// `{id}_left.tns` and `{id}_right.tns`, each `[C, H/4, W/4]`.
    Dir(PathBuf),
    Memory(BTreeMap<String, (FeatureMap, FeatureMap)>),
}

impl ExternalFeatures {
    pub fn load(&self, id: &str) -> Result<(FeatureMap, FeatureMap)> {
        match self {
            Self::Dir(dir) => {
                let side = |s: &str| FeatureMap::new(read_tensor(dir.join(format!("{id}_{s}.tns")))?);
                Ok((side("left")?, side("right")?))
            }
            Self::Memory(map) => map
                .get(id)
                .cloned()
                .ok_or_else(|| Error::Config(format!("no external features for sample {id:?}"))),
        }
    }
}

pub fn model_input(sample: &StereoSample, source: &FeatureSource) -> Result<ModelInput> {
    match source {
        FeatureSource::Learned => Ok(ModelInput::Images {
            left: sample.left.clone(),
            right: sample.right.clone(),
        }),
        FeatureSource::External(ext) => {
            let (left, right) = ext.load(&sample.id)?;
            let (gh, gw) = (sample.height() / super::GRID, sample.width() / super::GRID);
            if (left.height(), left.width()) != (gh, gw) {
                return Err(Error::shape(format!(
                    "{}: features are {}x{}, expected {gh}x{gw}",
                    sample.id,
                    left.height(),
                    left.width()
                )));
            }
            Ok(ModelInput::Features { left, right })
        }
    }
}

struct Prepared {
    input: ModelInput,
    gt: DisparityMap,
}

fn prepare(data: &[StereoSample], source: &FeatureSource, d_max: usize) -> Result<Vec<Prepared>> {
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    data.iter()
        .map(|s| {
            Ok(Prepared {
                input: model_input(s, source)?,
                gt: s.grid_gt(d_max)?,
            })
        })
        .collect()
}

fn feature_channels(model: &StereoModel, input: &ModelInput) -> usize {
    match input {
        ModelInput::Features { left, .. } => left.channels(),
        ModelInput::Images { .. } => match model.feature.as_ref().map(|p| *p.descriptor()) {
            Some(NetDescriptor::Feature(d)) => d.out_channels,
            _ => 0,
        },
    }
}

/// A fresh feature network and aggregator for the Base stage.
pub fn base_model(cfg: &PipelineConfig) -> Result<StereoModel> {
    cfg.validate()?;
    Ok(StereoModel {
        feature: Some(init_params(NetDescriptor::Feature(cfg.feature_desc()), cfg.seed)?),
        adaptor: None,
        aggregator: init_params(
            NetDescriptor::Aggregator(cfg.aggregator_desc(cfg.feature_channels)),
            cfg.seed.wrapping_add(1),
        )?,
        head: cfg.head(),
    })
}

/// Attach a trained aggregator to another feature source, optionally through
/// an adaptor. Every parameter of the result is frozen.
pub fn graft(
    aggregator: &NetParams,
    feature: Option<&NetParams>,
    feature_channels: usize,
    adaptor: Option<&NetParams>,
    head: HeadConfig,
) -> Result<StereoModel> {
    if let Some(NetDescriptor::Feature(d)) = feature.map(|f| *f.descriptor()) {
        if d.out_channels != feature_channels {
            return Err(Error::ChannelMismatch {
                expected: feature_channels,
                found: d.out_channels,
            });
        }
    }
    let mut channels = feature_channels;
    if let Some(NetDescriptor::Adaptor(d)) = adaptor.map(|a| *a.descriptor()) {
        if d.in_channels != channels {
            return Err(Error::ChannelMismatch {
                expected: d.in_channels,
                found: channels,
            });
        }
        channels = d.out_channels;
    }
    let mut model = StereoModel {
        feature: feature.cloned(),
        adaptor: adaptor.cloned(),
        aggregator: aggregator.clone(),
        head,
    };
    let found = model.head.method.volume_channels(channels);
    if found != model.aggregator_channels() {
        return Err(Error::ChannelMismatch {
            expected: model.aggregator_channels(),
            found,
        });
    }
    model.validate()?;
    freeze_all(&mut model);
    Ok(model)
}

fn freeze_all(model: &mut StereoModel) {
    for p in [&mut model.feature, &mut model.adaptor].into_iter().flatten() {
        p.freeze();
    }
    model.aggregator.freeze();
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossRecord {
    pub step: usize,
    pub total: f32,
    pub ce: f32,
    pub sl1: f32,
}

#[derive(Debug, Clone)]
pub struct StageOutcome {
    pub model: StereoModel,
    pub trace: Vec<LossRecord>,
}

fn stage_salt(stage: Stage) -> u64 {
    match stage {
        Stage::Base => 0x0b,
        Stage::Graft => 0x0c,
        Stage::Adapt => 0x0d,
        Stage::Retrain => 0x0e,
    }
}

/// Prepare `model` for `stage` (adding an adaptor or resetting the aggregator
/// where the stage calls for it, and setting the frozen flags), then train
/// it over `data` with Adam, one sample per step.
pub fn train_stage(
    mut model: StereoModel,
    completed: Option<Stage>,
    stage: Stage,
    cfg: &PipelineConfig,
    data: &[StereoSample],
    source: &FeatureSource,
) -> Result<StageOutcome> {
    stage.check_after(completed)?;
    cfg.validate()?;
    let prepared = prepare(data, source, cfg.d_max)?;
    model.head = cfg.head();
    freeze_all(&mut model);
    match stage {
        Stage::Base => {
            let feature = match (&mut model.feature, source) {
                (Some(f), FeatureSource::Learned) => f,
                _ => {
                    return Err(Error::Config(
                        "base training needs learned features and a feature network".into(),
                    ))
                }
            };
            feature.set_frozen(false);
            model.adaptor = None;
            model.aggregator.set_frozen(false);
        }
        Stage::Graft => {}
        Stage::Adapt => {
            if model.adaptor.is_none() {
                let arch = cfg.adaptor.ok_or_else(|| {
                    Error::Config("adapt stage needs an adaptor architecture".into())
                })?;
                let c = feature_channels(&model, &prepared[0].input);
                let mut desc = AdaptorDesc::new(arch, c, cfg.adaptor_base);
                desc.out_channels = c;
                model.adaptor = Some(init_params(
                    NetDescriptor::Adaptor(desc),
                    cfg.seed.wrapping_add(2),
                )?);
            }
            model.adaptor.as_mut().expect("adaptor set above").set_frozen(false);
            if cfg.joint {
                model.aggregator.set_frozen(false);
            }
        }
        Stage::Retrain => {
            if !cfg.retrain_resume {
                model.aggregator = init_params(
                    *model.aggregator.descriptor(),
                    cfg.seed.wrapping_add(3),
                )?;
            }
            model.aggregator.set_frozen(false);
            if cfg.joint {
                if let Some(a) = &mut model.adaptor {
                    a.set_frozen(false);
                }
            }
        }
    }
    model.validate()?;

    let epochs = cfg.epochs(stage);
    let total_steps = epochs * prepared.len();
    let mut trace = Vec::with_capacity(total_steps);
    if model.trainable_count() == 0 || total_steps == 0 {
        return Ok(StageOutcome { model, trace });
    }
    let mut flat = model.flatten_trainable();
    let mut adam = Adam::new(flat.len());
    adam.beta1 = cfg.beta1;
    adam.beta2 = cfg.beta2;
    adam.eps = cfg.adam_eps;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ (stage_salt(stage) << 32));
    let mut order: Vec<usize> = (0..prepared.len()).collect();
    let mut step = 0;
    for epoch in 0..epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0f64;
        for &i in &order {
            let lr = if stage == Stage::Retrain && step >= total_steps / 2 {
                cfg.lr_retrain_late
            } else {
                cfg.lr
            };
            let p = &prepared[i];
            let fwd = model.forward_train(&p.input)?;
            let (loss, grads) = model.backward(&fwd, &p.gt)?;
            if !loss.total.is_finite() || !grads.is_finite() {
                return Err(Error::DivergenceDetected {
                    step,
                    loss: loss.total as f64,
                });
            }
            adam.step(&mut flat, &model.flatten_grads(&grads), lr)?;
            model.assign_trainable(&flat)?;
            trace.push(LossRecord {
                step,
                total: loss.total,
                ce: loss.ce,
                sl1: loss.sl1,
            });
            epoch_loss += loss.total as f64;
            step += 1;
        }
        log::info!(
            "{stage} epoch {}/{epochs}: mean loss {:.5}",
            epoch + 1,
            epoch_loss / prepared.len() as f64
        );
    }
    Ok(StageOutcome { model, trace })
}

/// Network-resolution disparity for one sample.
pub fn run_inference(model: &StereoModel, sample: &StereoSample, source: &FeatureSource) -> Result<DisparityMap> {
    let input = model_input(sample, source)?;
    Ok(model.forward(&input)?.disparity().clone())
}

#[derive(Debug, Clone, PartialEq)]
pub struct SampleMetrics {
    pub id: String,
    pub epe: f64,
    pub rate: f64,
}

/// Per-sample end-point error and `tau`-pixel error rate, in network pixels.
pub fn evaluate(
    model: &StereoModel,
    data: &[StereoSample],
    source: &FeatureSource,
    tau: f64,
) -> Result<Vec<SampleMetrics>> {
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    data.iter()
        .map(|s| {
            let pred = run_inference(model, s, source)?;
            let gt = s.grid_gt(model.head.d_max)?;
            Ok(SampleMetrics {
                id: s.id.clone(),
                epe: epe(&pred, &gt)?,
                rate: error_rate(&pred, &gt, tau)?,
            })
        })
        .collect()
}

/// Mean of per-sample metrics.
pub fn mean_metrics(m: &[SampleMetrics]) -> (f64, f64) {
    let n = m.len().max(1) as f64;
    (
        m.iter().map(|s| s.epe).sum::<f64>() / n,
        m.iter().map(|s| s.rate).sum::<f64>() / n,
    )
}

pub fn write_loss_csv(path: impl AsRef<Path>, trace: &[LossRecord]) -> Result<()> {
    let path = path.as_ref();
    let mut out = String::from("step,total,ce,sl1\n");
    for r in trace {
        out.push_str(&format!("{},{},{},{}\n", r.step, r.total, r.ce, r.sl1));
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(out.as_bytes()).map_err(|e| Error::io(path, e))
}
