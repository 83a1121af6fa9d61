//! The end-to-end differentiable stereo model:
//! features → optional adaptor → cost volume → aggregator → soft-argmax head.

use super::descriptor::NetDescriptor;
use super::params::{Grads, NetParams};
use super::program::{Program, Trace};
use crate::cost::{build_cost, cost_backward, CostMethod, CostOptions, CostVolume, FeatureMap};
use crate::error::{Error, Result};
use crate::head::{
    combine_losses, cross_entropy_backward, cross_entropy_loss, laplacian_target, regress_backward,
    regress_disparity, smooth_l1_backward, smooth_l1_loss, softmax_backward,
    softmax_over_disparity, CeOrientation, DisparityMap, LossBreakdown, OutputLoss, ProbVolume,
    DEFAULT_LAPLACE_SCALE, DEFAULT_MU,
};
use crate::tensor::{Real, Tensor};

/// Everything downstream of the aggregator, plus how the cost is built.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadConfig {
    pub method: CostMethod,
    pub d_max: usize,
    pub temperature: f64,
    pub laplace_scale: f64,
    pub mu: f64,
    /// One weight per aggregator output, final output last.
    pub lambdas: Vec<f64>,
    pub orientation: CeOrientation,
    pub cost: CostOptions,
}

impl HeadConfig {
    pub fn new(method: CostMethod, d_max: usize) -> Self {
        Self {
            method,
            d_max,
            temperature: 1.0,
            laplace_scale: DEFAULT_LAPLACE_SCALE,
            mu: DEFAULT_MU,
            lambdas: vec![1.0],
            orientation: CeOrientation::Standard,
            cost: CostOptions::default(),
        }
    }
}

/// What a forward pass starts from.
#[derive(Debug, Clone)]
pub enum ModelInput<T: Real = f32> {
    /// Grayscale or color images `[1..3, H, W]`, run through the feature net.
    Images { left: Tensor<T>, right: Tensor<T> },
    /// Precomputed quarter-resolution features.
    Features { left: FeatureMap<T>, right: FeatureMap<T> },
}

impl<T: Real> ModelInput<T> {
    pub fn cast<U: Real>(&self) -> ModelInput<U> {
        match self {
            Self::Images { left, right } => ModelInput::Images {
                left: left.cast(),
                right: right.cast(),
            },
            Self::Features { left, right } => ModelInput::Features {
                left: left.cast(),
                right: right.cast(),
            },
        }
    }
}

#[derive(Debug, Clone)]
pub struct StereoModel<T: Real = f32> {
    pub feature: Option<NetParams<T>>,
    pub adaptor: Option<NetParams<T>>,
    pub aggregator: NetParams<T>,
    pub head: HeadConfig,
}

#[derive(Debug, Clone)]
pub struct ModelGrads<T: Real = f32> {
    pub feature: Option<Grads<T>>,
    pub adaptor: Option<Grads<T>>,
    pub aggregator: Grads<T>,
}

impl<T: Real> ModelGrads<T> {
    pub fn is_finite(&self) -> bool {
        self.feature.as_ref().is_none_or(Grads::is_finite)
            && self.adaptor.as_ref().is_none_or(Grads::is_finite)
            && self.aggregator.is_finite()
    }
}

/// One regressed output: the probability volume and its soft-argmax.
pub type HeadOutput<T> = (ProbVolume<T>, DisparityMap<T>);

struct Side<T: Real> {
    feature: Option<Trace<T>>,
    adaptor: Option<Trace<T>>,
}

struct Tape<T: Real> {
    left: Side<T>,
    right: Side<T>,
    features: (FeatureMap<T>, FeatureMap<T>),
    cost: CostVolume<T>,
    aggregator: Trace<T>,
}

/// Result of a forward pass. Passes run with [`StereoModel::forward_train`]
/// also keep the intermediates needed by [`StereoModel::backward`].
pub struct Forward<T: Real = f32> {
    pub outputs: Vec<HeadOutput<T>>,
    tape: Option<Tape<T>>,
}

impl<T: Real> Forward<T> {
    /// The final output's disparity map.
    pub fn disparity(&self) -> &DisparityMap<T> {
        &self.outputs.last().expect("at least one output").1
    }

    pub fn is_recorded(&self) -> bool {
        self.tape.is_some()
    }

    pub fn cost_volume(&self) -> Option<&CostVolume<T>> {
        self.tape.as_ref().map(|t| &t.cost)
    }
}

fn program(p: &NetParams<impl Real>) -> Program {
    Program::for_descriptor(p.descriptor())
}

impl<T: Real> StereoModel<T> {
    /// Channel count the aggregator was built for.
    pub fn aggregator_channels(&self) -> usize {
        match self.aggregator.descriptor() {
            NetDescriptor::Aggregator(d) => d.in_channels,
            _ => 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !matches!(self.aggregator.descriptor(), NetDescriptor::Aggregator(_)) {
            return Err(Error::Config("aggregator slot holds a different net".into()));
        }
        if let Some(f) = &self.feature {
            if !matches!(f.descriptor(), NetDescriptor::Feature(_)) {
                return Err(Error::Config("feature slot holds a different net".into()));
            }
        }
        if let Some(a) = &self.adaptor {
            if !matches!(a.descriptor(), NetDescriptor::Adaptor(_)) {
                return Err(Error::Config("adaptor slot holds a different net".into()));
            }
        }
        let heads = program(&self.aggregator).output_count();
        if self.head.lambdas.len() != heads {
            return Err(Error::Config(format!(
                "{heads} aggregator outputs but {} loss weights",
                self.head.lambdas.len()
            )));
        }
        Ok(())
    }

    pub fn cast<U: Real>(&self) -> StereoModel<U> {
        StereoModel {
            feature: self.feature.as_ref().map(NetParams::cast),
            adaptor: self.adaptor.as_ref().map(NetParams::cast),
            aggregator: self.aggregator.cast(),
            head: self.head.clone(),
        }
    }

    fn nets(&self) -> impl Iterator<Item = (&'static str, &NetParams<T>)> {
        self.feature
            .iter()
            .map(|p| ("feature", p))
            .chain(self.adaptor.iter().map(|p| ("adaptor", p)))
            .chain(std::iter::once(("aggregator", &self.aggregator)))
    }

    fn nets_mut(&mut self) -> impl Iterator<Item = &mut NetParams<T>> {
        self.feature
            .iter_mut()
            .chain(self.adaptor.iter_mut())
            .chain(std::iter::once(&mut self.aggregator))
    }

    pub fn trainable_count(&self) -> usize {
        self.nets().map(|(_, p)| p.trainable_count()).sum()
    }

    /// Trainable parameters of feature net, adaptor, aggregator, in that order.
    pub fn flatten_trainable(&self) -> Vec<T> {
        self.nets().flat_map(|(_, p)| p.flatten_trainable()).collect()
    }

    pub fn assign_trainable(&mut self, flat: &[T]) -> Result<()> {
        if flat.len() != self.trainable_count() {
            return Err(Error::shape(format!(
                "{} values for {} trainable parameters",
                flat.len(),
                self.trainable_count()
            )));
        }
        let mut at = 0;
        for p in self.nets_mut() {
            at += p.assign_trainable(&flat[at..])?;
        }
        Ok(())
    }

    pub fn trainable_names(&self) -> Vec<String> {
        self.nets()
            .flat_map(|(net, p)| p.trainable_names().into_iter().map(move |n| format!("{net}.{n}")))
            .collect()
    }

    pub fn flatten_grads(&self, g: &ModelGrads<T>) -> Vec<T> {
        let mut out = Vec::new();
        if let (Some(p), Some(g)) = (&self.feature, &g.feature) {
            out.extend(g.flatten_trainable(p));
        }
        if let (Some(p), Some(g)) = (&self.adaptor, &g.adaptor) {
            out.extend(g.flatten_trainable(p));
        }
        out.extend(g.aggregator.flatten_trainable(&self.aggregator));
        out
    }

    /// Forward pass without recording; [`Self::backward`] on its result fails.
    pub fn forward(&self, input: &ModelInput<T>) -> Result<Forward<T>> {
        let mut f = self.forward_train(input)?;
        f.tape = None;
        Ok(f)
    }

    pub fn forward_train(&self, input: &ModelInput<T>) -> Result<Forward<T>> {
        self.validate()?;
        let (left, right) = match input {
            ModelInput::Images { left, right } => (
                self.run_feature(left)?,
                self.run_feature(right)?,
            ),
            ModelInput::Features { left, right } => (
                (left.clone(), None),
                (right.clone(), None),
            ),
        };
        let (lf, lft) = left;
        let (rf, rft) = right;
        let (lf, lat) = self.run_adaptor(lf)?;
        let (rf, rat) = self.run_adaptor(rf)?;

        let expected = self.aggregator_channels();
        let found = self.head.method.volume_channels(lf.channels());
        if expected != found {
            return Err(Error::ChannelMismatch { expected, found });
        }
        let cost = build_cost(&lf, &rf, self.head.d_max, self.head.method, &self.head.cost)?;
        let agg = program(&self.aggregator).run(&self.aggregator, cost.tensor().clone())?;
        let [_, nd, h, w] = cost.tensor().dims4("cost volume")?;
        let outputs = agg
            .outputs()
            .into_iter()
            .map(|s| {
                let scores = s.clone().reshape(vec![nd, h, w])?;
                let p = softmax_over_disparity(&scores, self.head.temperature, cost.valid())?;
                let d = regress_disparity(&p)?;
                Ok((p, d))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Forward {
            outputs,
            tape: Some(Tape {
                left: Side { feature: lft, adaptor: lat },
                right: Side { feature: rft, adaptor: rat },
                features: (lf, rf),
                cost,
                aggregator: agg,
            }),
        })
    }

    fn run_feature(&self, image: &Tensor<T>) -> Result<(FeatureMap<T>, Option<Trace<T>>)> {
        let p = self
            .feature
            .as_ref()
            .ok_or_else(|| Error::Config("image input but no feature network".into()))?;
        let [_, h, w] = image.dims3("image")?;
        if h % 4 != 0 || w % 4 != 0 {
            return Err(Error::shape(format!("image {h}x{w} is not divisible by 4")));
        }
        let t = program(p).run(p, image.clone())?;
        Ok((FeatureMap::new(t.output().clone())?, Some(t)))
    }

    fn run_adaptor(&self, f: FeatureMap<T>) -> Result<(FeatureMap<T>, Option<Trace<T>>)> {
        let Some(p) = &self.adaptor else {
            return Ok((f, None));
        };
        if let NetDescriptor::Adaptor(d) = p.descriptor() {
            if d.in_channels != f.channels() {
                return Err(Error::ChannelMismatch {
                    expected: d.in_channels,
                    found: f.channels(),
                });
            }
            if d.arch == super::AdaptorArch::UShape && (!f.height().is_multiple_of(4) || !f.width().is_multiple_of(4)) {
                return Err(Error::shape(format!(
                    "U-shape adaptor needs extents divisible by 4, got {}x{}",
                    f.height(),
                    f.width()
                )));
            }
        }
        let t = program(p).run(p, f.into_tensor())?;
        Ok((FeatureMap::new(t.output().clone())?, Some(t)))
    }

    /// Hash of every piecewise regime the loss passes through: activation
    /// signs, smooth-L1 branches, and the L2 fill source. The loss is smooth
    /// between parameter settings that share a signature.
    pub fn kink_signature(&self, fwd: &Forward<T>, gt: &DisparityMap<T>) -> Result<u64> {
        use std::hash::{Hash, Hasher};
        let tape = fwd.tape.as_ref().ok_or(Error::GraphNotRecorded)?;
        let mut h = std::collections::hash_map::DefaultHasher::new();
        for (p, side) in [(&self.feature, &tape.left.feature), (&self.feature, &tape.right.feature)]
            .into_iter()
            .chain([(&self.adaptor, &tape.left.adaptor), (&self.adaptor, &tape.right.adaptor)])
        {
            if let (Some(p), Some(t)) = (p, side) {
                program(p).hash_kinks(t, &mut h);
            }
        }
        program(&self.aggregator).hash_kinks(&tape.aggregator, &mut h);
        tape.cost.l2_fill_source().hash(&mut h);
        let g = gt.values().data();
        for (_, d) in &fwd.outputs {
            for (i, &v) in d.values().data().iter().enumerate() {
                h.write_u8(((v - g[i]).abs() < T::one()) as u8);
            }
        }
        Ok(h.finish())
    }

    /// Training target for `gt`: a Laplacian over in-frame hypotheses.
    pub fn target(&self, fwd: &Forward<T>, gt: &DisparityMap<T>) -> Result<ProbVolume<T>> {
        let t = laplacian_target(gt, self.head.laplace_scale, self.head.d_max)?;
        match &fwd.tape {
            Some(tape) => t.restrict_to(tape.cost.valid()),
            None => {
                let nd = self.head.d_max + 1;
                t.restrict_to(&crate::cost::hypothesis_mask(nd, gt.height(), gt.width()))
            }
        }
    }

    pub fn loss(&self, fwd: &Forward<T>, gt: &DisparityMap<T>) -> Result<LossBreakdown<T>> {
        let target = self.target(fwd, gt)?;
        let mask = gt.mask();
        let terms = fwd
            .outputs
            .iter()
            .map(|(p, d)| {
                Ok(OutputLoss {
                    ce: cross_entropy_loss(p, &target, mask, self.head.orientation)?,
                    sl1: smooth_l1_loss(d, gt, mask)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        combine_losses(&terms, &self.head.lambdas, self.head.mu)
    }

    /// Loss value and its gradient with respect to every trainable parameter.
    pub fn backward(&self, fwd: &Forward<T>, gt: &DisparityMap<T>) -> Result<(LossBreakdown<T>, ModelGrads<T>)> {
        let tape = fwd.tape.as_ref().ok_or(Error::GraphNotRecorded)?;
        let loss = self.loss(fwd, gt)?;
        let target = self.target(fwd, gt)?;
        let mask = gt.mask();
        let hd = &self.head;
        let agg_shape = tape.cost.tensor().shape().to_vec();
        let mut agg_grads = Vec::with_capacity(fwd.outputs.len());
        for ((p, d), &lambda) in fwd.outputs.iter().zip(&hd.lambdas) {
            let mut gp = cross_entropy_backward(p, &target, mask, hd.orientation)?;
            let gd = smooth_l1_backward(d, gt, mask)?;
            let gr = regress_backward(p.disparities(), &gd)?;
            gp.axpy(T::of(hd.mu), &gr)?;
            let mut gs = softmax_backward(p, &gp, hd.temperature)?;
            for v in gs.data_mut() {
                *v *= T::of(lambda);
            }
            let mut shape = agg_shape.clone();
            shape[0] = 1;
            agg_grads.push(Some(gs.reshape(shape)?));
        }
        let (dcv, aggregator) =
            program(&self.aggregator).backward(&self.aggregator, &tape.aggregator, &agg_grads)?;
        let (lf, rf) = &tape.features;
        let (dl, dr) = cost_backward(lf, rf, &tape.cost, &dcv, &hd.cost)?;

        let (dl, dr, adaptor) = match &self.adaptor {
            Some(p) => {
                let prog = program(p);
                let (dl, mut ga) = prog.backward(p, tape.left.adaptor.as_ref().unwrap(), &[Some(dl)])?;
                let (dr, gb) = prog.backward(p, tape.right.adaptor.as_ref().unwrap(), &[Some(dr)])?;
                add_grads(&mut ga, &gb)?;
                (dl, dr, Some(ga))
            }
            None => (dl, dr, None),
        };
        let feature = match (&self.feature, &tape.left.feature, &tape.right.feature) {
            (Some(p), Some(lt), Some(rt)) => {
                let prog = program(p);
                let (_, mut ga) = prog.backward(p, lt, &[Some(dl)])?;
                let (_, gb) = prog.backward(p, rt, &[Some(dr)])?;
                add_grads(&mut ga, &gb)?;
                Some(ga)
            }
            _ => None,
        };
        Ok((
            loss,
            ModelGrads {
                feature,
                adaptor,
                aggregator,
            },
        ))
    }
}

fn add_grads<T: Real>(acc: &mut Grads<T>, other: &Grads<T>) -> Result<()> {
    for ((ak, ab), (bk, bb)) in acc.layers.iter_mut().zip(&other.layers) {
        ak.axpy(T::one(), bk)?;
        ab.axpy(T::one(), bb)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nets::descriptor::{AggregatorDesc, FeatureDesc};
    use crate::nets::params::init_params;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: &[usize], seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    fn agg(k: usize) -> NetParams<f64> {
        init_params(NetDescriptor::Aggregator(AggregatorDesc::toy(k)), 2).unwrap()
    }

    fn features(c: usize, seed: u64) -> ModelInput<f64> {
        ModelInput::Features {
            left: FeatureMap::new(random(&[c, 4, 8], seed)).unwrap(),
            right: FeatureMap::new(random(&[c, 4, 8], seed + 1)).unwrap(),
        }
    }

    #[test]
    fn cosine_aggregator_accepts_any_channel_count() {
        let m = StereoModel {
            feature: None,
            adaptor: None,
            aggregator: agg(1),
            head: HeadConfig::new(CostMethod::Cosine, 3),
        };
        for c in [4, 16, 64] {
            let f = m.forward(&features(c, c as u64)).unwrap();
            assert_eq!(f.disparity().values().shape(), [4, 8]);
        }
    }

    #[test]
    fn concat_aggregator_rejects_other_widths() {
        let m = StereoModel {
            feature: None,
            adaptor: None,
            aggregator: agg(32),
            head: HeadConfig::new(CostMethod::Concat, 3),
        };
        assert!(m.forward(&features(16, 1)).is_ok());
        assert!(matches!(
            m.forward(&features(4, 1)),
            Err(Error::ChannelMismatch { expected: 32, found: 8 })
        ));
    }

    #[test]
    fn backward_requires_recorded_forward() {
        let m = StereoModel {
            feature: None,
            adaptor: None,
            aggregator: agg(1),
            head: HeadConfig::new(CostMethod::Cosine, 3),
        };
        let input = features(3, 5);
        let gt = DisparityMap::fully_valid(Tensor::full(vec![4, 8], 1.0).unwrap()).unwrap();
        let f = m.forward(&input).unwrap();
        assert!(matches!(m.backward(&f, &gt), Err(Error::GraphNotRecorded)));
        let f = m.forward_train(&input).unwrap();
        assert!(m.backward(&f, &gt).is_ok());
    }

    #[test]
    fn zero_image_gives_zero_features() {
        let p = init_params::<f64>(NetDescriptor::Feature(FeatureDesc::toy(4)), 3).unwrap();
        let m = StereoModel {
            feature: Some(p),
            adaptor: None,
            aggregator: agg(1),
            head: HeadConfig::new(CostMethod::Cosine, 2),
        };
        let (f, _) = m.run_feature(&Tensor::zeros(vec![1, 8, 16]).unwrap()).unwrap();
        assert!(f.tensor().data().iter().all(|&v| v == 0.0));
        assert!(m.run_feature(&Tensor::zeros(vec![1, 6, 16]).unwrap()).is_err());
    }
}
