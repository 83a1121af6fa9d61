use std::fmt;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, Context, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use graftstereo::bench::{
    epe, error_rate, fixture_features, gen_pair, list_samples, random_field, read_dataset, read_sample,
    sample_paths, write_sample, DisparityField, SyntheticSpec,
};
use graftstereo::cost::{build_cost, CostOptions, FeatureMap};
use graftstereo::head::DisparityMap;
use graftstereo::io::{read_pfm, read_tensor, write_pfm, write_tensor, KvFile};
use graftstereo::nets::{
    generic_point, grad_check, init_params, AdaptorArch, AdaptorDesc, AggregatorDesc, GradCheckOptions,
    HeadConfig, ModelInput, ModelObjective, NetDescriptor, NetParams, StereoModel,
};
use graftstereo::pipeline::{
    base_model, from_grid, graft, load_checkpoint, mean_metrics, run_inference, save_checkpoint, train_stage,
    write_loss_csv, ExternalFeatures, FeatureSource, PipelineConfig, SampleMetrics, Stage, GRID,
};
use graftstereo::Tensor;

use crate::manifest::{files_in, Manifest};
use crate::{BuildCost, Cli, Command, Eval, ExportFeatures, GenData, Graft, GradCheck, Infer, Train};

const MANIFEST: &str = "manifest.kv";

/// A request that parsed but cannot be honoured as given; exits with 2.
#[derive(Debug)]
pub struct UsageError(pub String);

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

pub fn run(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::GenData(a) => gen_data(cli, a),
        Command::ExportFeatures(a) => export_features(cli, a),
        Command::BuildCost(a) => build_cost_cmd(a),
        Command::Train(a) => train(cli, a),
        Command::Graft(a) => graft_cmd(a),
        Command::Infer(a) => infer(a),
        Command::Eval(a) => eval(cli, a),
        Command::GradCheck(a) => grad_check_cmd(cli, a),
    }
}

fn load_config(cli: &Cli) -> Result<PipelineConfig> {
    let mut cfg = match &cli.config {
        Some(p) => PipelineConfig::from_kv(&KvFile::read(p)?)?,
        None => PipelineConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

fn seed(cli: &Cli) -> Result<u64> {
    Ok(load_config(cli)?.seed)
}

fn pool(cli: &Cli) -> Result<rayon::ThreadPool> {
    Ok(rayon::ThreadPoolBuilder::new().num_threads(cli.jobs as usize).build()?)
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

/// Every output file in `dir` except an earlier manifest.
fn record_outputs(m: &mut Manifest, dir: &Path) -> Result<()> {
    for f in files_in(dir)? {
        if f.file_name().is_some_and(|n| n != MANIFEST) {
            m.output(&f)?;
        }
    }
    Ok(())
}

fn record_checkpoint(m: &mut Manifest, dir: &Path) -> Result<()> {
    for f in files_in(dir)? {
        let name = f.file_name().and_then(|n| n.to_str()).unwrap_or("");
        if name.ends_with(".tns") || name.ends_with(".desc") || name == "head.kv" {
            m.input(&f)?;
        }
    }
    Ok(())
}

fn record_dataset(m: &mut Manifest, dir: &Path, ids: &[String]) -> Result<()> {
    for id in ids {
        m.inputs(sample_paths(dir, id).iter())?;
    }
    Ok(())
}

fn record_features(m: &mut Manifest, dir: &Path, ids: &[String]) -> Result<()> {
    for id in ids {
        for side in ["left", "right"] {
            m.input(&dir.join(format!("{id}_{side}.tns")))?;
        }
    }
    Ok(())
}

fn gen_data(cli: &Cli, a: &GenData) -> Result<()> {
    let seed = seed(cli)?;
    let fixed: Option<DisparityField> = if a.spec == "random" {
        None
    } else {
        Some(a.spec.parse().map_err(|e| usage(format!("--spec: {e}")))?)
    };
    if !a.height.is_multiple_of(GRID) || !a.width.is_multiple_of(GRID) {
        log::warn!("image size {}x{} is not a multiple of {GRID}; the networks will reject it", a.height, a.width);
    }
    create_dir(&a.out)?;
    let ids: Vec<String> = pool(cli)?.install(|| {
        (0..a.count as u64)
            .into_par_iter()
            .map(|i| {
                let s = seed + i;
                let field = fixed.unwrap_or_else(|| random_field(s, a.width, GRID, a.max_disp));
                let spec = SyntheticSpec {
                    density: a.density,
                    noise: a.noise,
                    ..SyntheticSpec::new(a.height, a.width, field).with_seed(s)
                };
                let sample = gen_pair(&spec)?;
                write_sample(&a.out, &sample)?;
                log::debug!("{}: {field}", sample.id);
                Ok(sample.id)
            })
            .collect::<graftstereo::Result<_>>()
    })?;
    let mut m = Manifest::new("gen-data");
    m.set("seed", seed);
    for id in &ids {
        for p in sample_paths(&a.out, id) {
            m.output(&p)?;
        }
    }
    m.write(&a.out.join(MANIFEST))?;
    log::info!("wrote {} samples to {}", ids.len(), a.out.display());
    Ok(())
}

fn export_features(cli: &Cli, a: &ExportFeatures) -> Result<()> {
    let seed = seed(cli)?;
    let ids = list_samples(&a.data)?;
    if ids.is_empty() {
        return Err(graftstereo::Error::EmptyDataset.into());
    }
    create_dir(&a.out)?;
    let mut m = Manifest::new("export-features");
    m.set("seed", seed);
    m.set("channels", a.channels);
    m.set("blur", a.blur);
    for id in &ids {
        let s = read_sample(&a.data, id)?;
        for (side, img) in [("left", &s.left), ("right", &s.right)] {
            let f = fixture_features(img, a.channels, seed, a.blur)?;
            write_tensor(f.tensor(), a.out.join(format!("{id}_{side}.tns")))?;
        }
    }
    record_dataset(&mut m, &a.data, &ids)?;
    record_outputs(&mut m, &a.out)?;
    m.write(&a.out.join(MANIFEST))
}

fn manifest_beside(file: &Path) -> PathBuf {
    let mut name = file.file_name().unwrap_or_default().to_os_string();
    name.push(".manifest");
    file.with_file_name(name)
}

fn build_cost_cmd(a: &BuildCost) -> Result<()> {
    let left = FeatureMap::new(read_tensor(&a.left)?)?;
    let right = FeatureMap::new(read_tensor(&a.right)?)?;
    let opts = CostOptions {
        eps: a.eps,
        squared_l2: a.squared_l2,
    };
    let cv = build_cost(&left, &right, a.d_max, a.method, &opts)?;
    write_tensor(cv.tensor(), &a.out)?;
    let mut m = Manifest::new("build-cost");
    m.set("method", a.method);
    m.set("d_max", a.d_max);
    m.input(&a.left)?;
    m.input(&a.right)?;
    m.output(&a.out)?;
    m.write(&manifest_beside(&a.out))
}

/// Head settings come from the checkpoint being continued; the config file
/// cannot silently change them under a trained aggregator.
fn adopt_head(cfg: &mut PipelineConfig, head: &HeadConfig) {
    cfg.method = head.method;
    cfg.d_max = head.d_max;
    cfg.temperature = head.temperature;
    cfg.laplace_scale = head.laplace_scale;
    cfg.mu = head.mu;
    cfg.lambdas = head.lambdas.clone();
    cfg.orientation = head.orientation;
    cfg.squared_l2 = head.cost.squared_l2;
}

fn feature_source(dir: Option<&PathBuf>) -> FeatureSource {
    match dir {
        Some(d) => FeatureSource::External(ExternalFeatures::Dir(d.clone())),
        None => FeatureSource::Learned,
    }
}

fn train(cli: &Cli, a: &Train) -> Result<()> {
    let mut cfg = load_config(cli)?;
    if let Some(v) = a.adaptor {
        cfg.adaptor = Some(v);
    }
    if let Some(v) = a.lr {
        cfg.lr = v;
    }
    if let Some(v) = a.epochs {
        match a.stage {
            Stage::Base => cfg.epochs_base = v,
            Stage::Adapt => cfg.epochs_adapt = v,
            Stage::Retrain => cfg.epochs_retrain = v,
            Stage::Graft => {}
        }
    }
    let (model, completed) = match a.stage {
        Stage::Graft => return Err(usage("the graft stage has its own subcommand")),
        Stage::Base => {
            if a.from.is_some() {
                return Err(usage("base training starts from scratch; drop --from"));
            }
            if let Some(v) = a.method {
                cfg.method = v;
            }
            if let Some(v) = a.d_max {
                cfg.d_max = v;
            }
            (base_model(&cfg)?, None)
        }
        stage => {
            let from = a
                .from
                .as_ref()
                .ok_or_else(|| usage(format!("--from <CKPT> is required for stage {stage}")))?;
            let (done, model) = load_checkpoint(from)?;
            adopt_head(&mut cfg, &model.head);
            if a.method.is_some_and(|m| m != cfg.method) || a.d_max.is_some_and(|d| d != cfg.d_max) {
                return Err(usage("--method/--d-max conflict with the checkpoint being continued"));
            }
            (model, Some(done))
        }
    };
    let data = read_dataset(&a.data)?;
    let ids: Vec<String> = data.iter().map(|s| s.id.clone()).collect();
    let source = feature_source(a.features.as_ref());
    let outcome = train_stage(model, completed, a.stage, &cfg, &data, &source)?;
    let dir = save_checkpoint(&a.out, a.stage, &outcome.model)?;
    write_loss_csv(dir.join("loss.csv"), &outcome.trace)?;

    let mut m = Manifest::new("train");
    m.set("stage", a.stage);
    m.config(&cfg);
    if let Some(c) = &cli.config {
        m.input(c)?;
    }
    if let Some(f) = &a.from {
        record_checkpoint(&mut m, f)?;
    }
    record_dataset(&mut m, &a.data, &ids)?;
    if let Some(f) = &a.features {
        record_features(&mut m, f, &ids)?;
    }
    record_outputs(&mut m, &dir)?;
    m.write(&dir.join(MANIFEST))?;
    if let Some(last) = outcome.trace.last() {
        log::info!("{} done after {} steps, final loss {:.5}", a.stage, last.step + 1, last.total);
    }
    Ok(())
}

/// Channel count of an external feature directory, from its first file.
fn external_channels(dir: &Path) -> Result<(usize, PathBuf)> {
    let first = files_in(dir)?
        .into_iter()
        .find(|p| p.to_str().is_some_and(|s| s.ends_with("_left.tns")))
        .ok_or_else(|| anyhow!("{}: no *_left.tns feature files", dir.display()))?;
    let t = read_tensor(&first)?;
    let c = t.dims3("features")?[0];
    Ok((c, first))
}

fn net_from(dir: &Path, pick: fn(StereoModel) -> Option<NetParams>, what: &str) -> Result<NetParams> {
    let (_, model) = load_checkpoint(dir)?;
    pick(model).ok_or_else(|| anyhow!("{}: checkpoint has no {what} network", dir.display()))
}

fn graft_cmd(a: &Graft) -> Result<()> {
    let mut m = Manifest::new("graft");
    let (_, donor) = load_checkpoint(&a.aggregator)?;
    record_checkpoint(&mut m, &a.aggregator)?;
    let mut head = donor.head.clone();
    if let Some(method) = a.method {
        head.method = method;
    }
    let (feature, channels) = match (&a.features, &a.feature_net) {
        (Some(dir), _) => {
            let (c, probe) = external_channels(dir)?;
            m.set("features", dir.display());
            m.input(&probe)?;
            (None, c)
        }
        (None, Some(ckpt)) => {
            let f = net_from(ckpt, |m| m.feature, "feature")?;
            record_checkpoint(&mut m, ckpt)?;
            let c = match f.descriptor() {
                NetDescriptor::Feature(d) => d.out_channels,
                _ => unreachable!("feature slot holds a feature descriptor"),
            };
            (Some(f), c)
        }
        (None, None) => return Err(usage("one of --features or --feature-net is required")),
    };
    let adaptor = match &a.adaptor {
        Some(ckpt) => {
            record_checkpoint(&mut m, ckpt)?;
            Some(net_from(ckpt, |m| m.adaptor, "adaptor")?)
        }
        None => None,
    };
    let model = graft(&donor.aggregator, feature.as_ref(), channels, adaptor.as_ref(), head)?;
    let dir = save_checkpoint(&a.out, Stage::Graft, &model)?;
    record_outputs(&mut m, &dir)?;
    m.write(&dir.join(MANIFEST))
}

fn masked_to_nan(map: &DisparityMap) -> Result<DisparityMap> {
    let v: Vec<f32> = map
        .values()
        .data()
        .iter()
        .zip(map.mask())
        .map(|(&v, &ok)| if ok { v } else { f32::NAN })
        .collect();
    Ok(DisparityMap::new(Tensor::new(map.values().shape().to_vec(), v)?, map.mask().to_vec())?)
}

fn infer(a: &Infer) -> Result<()> {
    let (_, model) = load_checkpoint(&a.model)?;
    let data = read_dataset(&a.data)?;
    if data.is_empty() {
        return Err(graftstereo::Error::EmptyDataset.into());
    }
    let source = feature_source(a.features.as_ref());
    create_dir(&a.out)?;
    let mut m = Manifest::new("infer");
    record_checkpoint(&mut m, &a.model)?;
    let ids: Vec<String> = data.iter().map(|s| s.id.clone()).collect();
    record_dataset(&mut m, &a.data, &ids)?;
    if let Some(f) = &a.features {
        record_features(&mut m, f, &ids)?;
    }
    for s in &data {
        let grid = run_inference(&model, s, &source)?;
        let full = masked_to_nan(&from_grid(&grid)?)?;
        let path = a.out.join(format!("{}_disp.pfm", s.id));
        write_pfm(&full, &path)?;
        m.output(&path)?;
    }
    m.write(&a.out.join(MANIFEST))
}

fn eval(cli: &Cli, a: &Eval) -> Result<()> {
    if !(a.tau >= 0.0) {
        return Err(usage("--tau must be non-negative"));
    }
    let ids = list_samples(&a.gt)?;
    if ids.is_empty() {
        return Err(graftstereo::Error::EmptyDataset.into());
    }
    let pred_path = |id: &str| a.pred.join(format!("{id}_disp.pfm"));
    let metrics: Vec<SampleMetrics> = pool(cli)?.install(|| {
        ids.par_iter()
            .map(|id| -> Result<SampleMetrics> {
                let gt = read_sample(&a.gt, id)?.gt;
                let path = pred_path(id);
                let pred = read_pfm(&path).with_context(|| format!("prediction for {id}"))?;
                Ok(SampleMetrics {
                    id: id.clone(),
                    epe: epe(&pred, &gt)?,
                    rate: error_rate(&pred, &gt, a.tau)?,
                })
            })
            .collect::<Result<Vec<_>>>()
    })?;
    let mut csv = String::from("sample,epe,rate\n");
    for s in &metrics {
        csv.push_str(&format!("{},{},{}\n", s.id, s.epe, s.rate));
    }
    let (e, r) = mean_metrics(&metrics);
    csv.push_str(&format!("mean,{e},{r}\n"));
    match &a.out {
        None => std::io::stdout().write_all(csv.as_bytes())?,
        Some(out) => {
            std::fs::write(out, &csv).with_context(|| format!("writing {}", out.display()))?;
            let mut m = Manifest::new("eval");
            m.set("tau", a.tau);
            record_dataset(&mut m, &a.gt, &ids)?;
            for id in &ids {
                m.input(&pred_path(id))?;
            }
            m.output(out)?;
            m.write(&manifest_beside(out))?;
        }
    }
    Ok(())
}

fn grad_check_cmd(cli: &Cli, a: &GradCheck) -> Result<()> {
    let seed = seed(cli)?;
    let arch: Option<AdaptorArch> = match a.adaptor.as_str() {
        "none" => None,
        s => Some(s.parse().map_err(|e| usage(format!("--adaptor: {e}")))?),
    };
    let (c, h, w) = (a.channels, a.height, a.width);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut random = |shape: &[usize], lo: f64, hi: f64| -> graftstereo::Result<Tensor<f64>> {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(lo..hi)).collect())
    };
    let model = StereoModel::<f64> {
        feature: None,
        adaptor: arch
            .map(|arch| init_params(NetDescriptor::Adaptor(AdaptorDesc::new(arch, c, a.adaptor_base)), seed + 1))
            .transpose()?,
        aggregator: init_params(
            NetDescriptor::Aggregator(AggregatorDesc::toy(a.method.volume_channels(c))),
            seed + 2,
        )?,
        head: HeadConfig::new(a.method, a.d_max),
    };
    let input = ModelInput::Features {
        left: FeatureMap::new(random(&[c, h, w], -1.0, 1.0)?)?,
        right: FeatureMap::new(random(&[c, h, w], -1.0, 1.0)?)?,
    };
    let gt = random(&[h, w], 0.0, a.d_max as f64)?;
    let mask = (0..h * w).map(|i| i % 5 != 0).collect();
    let obj = ModelObjective::new(model, input, DisparityMap::new(gt, mask)?);
    let opts = GradCheckOptions {
        step: a.step,
        tolerance: a.tolerance,
        ..GradCheckOptions::default()
    };
    let report = grad_check(&obj, &generic_point(&obj.params(), 1e-2, seed), opts)?;

    let mut kv = KvFile::new();
    kv.set("adaptor", &a.adaptor);
    kv.set("method", a.method);
    kv.set("params", report.checked);
    kv.set("reduced_steps", report.reduced);
    kv.set("flagged", report.flagged.len());
    kv.set("max_rel_err", format!("{:e}", report.max_rel_err));
    kv.set("worst_param", &report.worst_param);
    kv.set("passed", report.passed());
    match &a.out {
        None => {
            for (k, v) in kv.iter() {
                println!("{k}={v}");
            }
        }
        Some(out) => {
            kv.write(out)?;
            let mut m = Manifest::new("grad-check");
            m.set("seed", seed);
            m.output(out)?;
            m.write(&manifest_beside(out))?;
        }
    }
    if report.passed() {
        Ok(())
    } else {
        Err(anyhow!(
            "gradient check failed: {} of {} parameters exceed {:e} (worst {} at {:e})",
            report.flagged.len(),
            report.checked,
            a.tolerance,
            report.worst_param,
            report.max_rel_err
        ))
    }
}
