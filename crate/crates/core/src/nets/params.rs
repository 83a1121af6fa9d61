use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::descriptor::{LayerSpec, NetDescriptor};
use crate::error::{Error, Result};
use crate::io::{read_tensor, write_tensor, KvFile};
use crate::tensor::{Real, Tensor};

#[derive(Debug, Clone)]
pub struct Layer<T: Real = f32> {
    pub spec: LayerSpec,
    pub kernel: Tensor<T>,
    pub bias: Tensor<T>,
    pub frozen: bool,
}

/// Parameters of one network plus the descriptor that shaped them.
#[derive(Debug, Clone)]
pub struct NetParams<T: Real = f32> {
    descriptor: NetDescriptor,
    seed: u64,
    layers: Vec<Layer<T>>,
}

/// Per-layer `(kernel, bias)` gradients, aligned with [`NetParams::layers`].
#[derive(Debug, Clone)]
pub struct Grads<T: Real = f32> {
    pub layers: Vec<(Tensor<T>, Tensor<T>)>,
}

impl<T: Real> Grads<T> {
    pub fn zeros_for(params: &NetParams<T>) -> Self {
        Self {
            layers: params
                .layers
                .iter()
                .map(|l| (l.kernel.zeros_like(), l.bias.zeros_like()))
                .collect(),
        }
    }

    /// Trainable entries only, in flatten order.
    pub fn flatten_trainable(&self, params: &NetParams<T>) -> Vec<T> {
        let mut out = Vec::new();
        for ((k, b), l) in self.layers.iter().zip(&params.layers) {
            if !l.frozen {
                out.extend_from_slice(k.data());
                out.extend_from_slice(b.data());
            }
        }
        out
    }

    pub fn is_finite(&self) -> bool {
        self.layers.iter().all(|(k, b)| k.all_finite() && b.all_finite())
    }
}

/// He-normal kernels, zero biases; layers are drawn in order from one
/// ChaCha8 stream seeded with `seed`.
pub fn init_params<T: Real>(descriptor: NetDescriptor, seed: u64) -> Result<NetParams<T>> {
    descriptor.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let layers = descriptor
        .layers()
        .into_iter()
        .map(|spec| {
            let std = (2.0 / spec.fan_in() as f64).sqrt();
            let normal = Normal::new(0.0, std).expect("finite positive std");
            let shape = spec.kernel_shape();
            let n: usize = shape.iter().product();
            let data = (0..n).map(|_| T::of(normal.sample(&mut rng))).collect();
            Ok(Layer {
                kernel: Tensor::new(shape, data)?,
                bias: Tensor::zeros(vec![spec.cout])?,
                spec,
                frozen: false,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(NetParams {
        descriptor,
        seed,
        layers,
    })
}

impl<T: Real> NetParams<T> {
    pub fn descriptor(&self) -> &NetDescriptor {
        &self.descriptor
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn layers(&self) -> &[Layer<T>] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer<T>] {
        &mut self.layers
    }

    pub fn layer(&self, name: &str) -> Option<&Layer<T>> {
        self.layers.iter().find(|l| l.spec.name == name)
    }

    pub fn layer_mut(&mut self, name: &str) -> Option<&mut Layer<T>> {
        self.layers.iter_mut().find(|l| l.spec.name == name)
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|l| l.kernel.len() + l.bias.len()).sum()
    }

    pub fn trainable_count(&self) -> usize {
        self.layers
            .iter()
            .filter(|l| !l.frozen)
            .map(|l| l.kernel.len() + l.bias.len())
            .sum()
    }

    pub fn freeze(&mut self) {
        self.set_frozen(true);
    }

    pub fn set_frozen(&mut self, frozen: bool) {
        for l in &mut self.layers {
            l.frozen = frozen;
        }
    }

    pub fn is_frozen(&self) -> bool {
        self.layers.iter().all(|l| l.frozen)
    }

    /// All parameters, kernel then bias per layer.
    pub fn flatten(&self) -> Vec<T> {
        let mut out = Vec::with_capacity(self.param_count());
        for l in &self.layers {
            out.extend_from_slice(l.kernel.data());
            out.extend_from_slice(l.bias.data());
        }
        out
    }

    pub fn assign(&mut self, flat: &[T]) -> Result<()> {
        if flat.len() != self.param_count() {
            return Err(Error::shape(format!(
                "{} values for {} parameters",
                flat.len(),
                self.param_count()
            )));
        }
        let mut at = 0;
        for l in &mut self.layers {
            for t in [&mut l.kernel, &mut l.bias] {
                let n = t.len();
                t.data_mut().copy_from_slice(&flat[at..at + n]);
                at += n;
            }
        }
        Ok(())
    }

    pub fn flatten_trainable(&self) -> Vec<T> {
        let mut out = Vec::with_capacity(self.trainable_count());
        for l in self.layers.iter().filter(|l| !l.frozen) {
            out.extend_from_slice(l.kernel.data());
            out.extend_from_slice(l.bias.data());
        }
        out
    }

    /// Overwrite trainable parameters from the front of `flat`; returns how
    /// many values were consumed.
    pub fn assign_trainable(&mut self, flat: &[T]) -> Result<usize> {
        let n = self.trainable_count();
        if flat.len() < n {
            return Err(Error::shape(format!(
                "{} values for {n} trainable parameters",
                flat.len()
            )));
        }
        let mut at = 0;
        for l in self.layers.iter_mut().filter(|l| !l.frozen) {
            for t in [&mut l.kernel, &mut l.bias] {
                let len = t.len();
                t.data_mut().copy_from_slice(&flat[at..at + len]);
                at += len;
            }
        }
        Ok(at)
    }

    /// Names of trainable scalars in flatten order, e.g. `conv1.kernel[4]`.
    pub fn trainable_names(&self) -> Vec<String> {
        let mut out = Vec::new();
        for l in self.layers.iter().filter(|l| !l.frozen) {
            for (part, t) in [("kernel", &l.kernel), ("bias", &l.bias)] {
                out.extend((0..t.len()).map(|i| format!("{}.{part}[{i}]", l.spec.name)));
            }
        }
        out
    }

    pub fn cast<U: Real>(&self) -> NetParams<U> {
        NetParams {
            descriptor: self.descriptor,
            seed: self.seed,
            layers: self
                .layers
                .iter()
                .map(|l| Layer {
                    spec: l.spec.clone(),
                    kernel: l.kernel.cast(),
                    bias: l.bias.cast(),
                    frozen: l.frozen,
                })
                .collect(),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.kernel.all_finite() && l.bias.all_finite())
    }

    /// Writes `{dir}/{name}.tns` (flat parameters) and `{dir}/{name}.desc`.
    pub fn save(&self, dir: impl AsRef<Path>, name: &str) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let flat: Vec<f32> = self.flatten().into_iter().map(|v| v.as_f64() as f32).collect();
        let n = flat.len();
        write_tensor(&Tensor::new(vec![n], flat)?, dir.join(format!("{name}.tns")))?;
        let mut kv = self.descriptor.to_kv();
        kv.set("seed", self.seed);
        let frozen: Vec<&str> = self
            .layers
            .iter()
            .filter(|l| l.frozen)
            .map(|l| l.spec.name.as_str())
            .collect();
        kv.set("frozen", frozen.join(","));
        kv.write(dir.join(format!("{name}.desc")))
    }

    pub fn load(dir: impl AsRef<Path>, name: &str) -> Result<Self> {
        let dir = dir.as_ref();
        let kv = KvFile::read(dir.join(format!("{name}.desc")))?;
        let descriptor = NetDescriptor::from_kv(&kv)?;
        let seed = kv.parse_or("seed", 0u64)?;
        let mut params = init_params::<T>(descriptor, seed)?;
        let flat = read_tensor(dir.join(format!("{name}.tns")))?;
        if flat.rank() != 1 {
            return Err(Error::Format(format!(
                "{name}.tns: expected a flat parameter vector, got {:?}",
                flat.shape()
            )));
        }
        let values: Vec<T> = flat.data().iter().map(|&v| T::of(v as f64)).collect();
        params.assign(&values)?;
        let frozen: Vec<String> = kv.parse_list("frozen")?.unwrap_or_default();
        for n in &frozen {
            params
                .layer_mut(n)
                .ok_or_else(|| Error::Config(format!("{name}.desc: unknown layer {n:?}")))?
                .frozen = true;
        }
        Ok(params)
    }
}
