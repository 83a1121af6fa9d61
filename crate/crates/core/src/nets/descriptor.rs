//! Architecture descriptors and the layer lists they expand to.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::io::KvFile;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum AdaptorArch {
    /// One 1x1 convolution.
    Linear,
    /// 3x3 conv, activation, 3x3 conv.
    NonLinear,
    /// Two stride-2 encoder stages, a bottleneck, two upsampling decoder
    /// stages with additive skips, and a 3x3 output conv.
    UShape,
}

impl AdaptorArch {
    pub const ALL: [AdaptorArch; 3] = [Self::Linear, Self::NonLinear, Self::UShape];
}

impl fmt::Display for AdaptorArch {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Linear => "linear",
            Self::NonLinear => "nonlinear",
            Self::UShape => "ushape",
        })
    }
}

impl FromStr for AdaptorArch {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace(['-', '_'], "").as_str() {
            "linear" => Ok(Self::Linear),
            "nonlinear" => Ok(Self::NonLinear),
            "ushape" | "unet" => Ok(Self::UShape),
            _ => Err(Error::Config(format!("unknown adaptor architecture {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FeatureDesc {
    pub in_channels: usize,
    pub width: usize,
    pub out_channels: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AdaptorDesc {
    pub arch: AdaptorArch,
    pub in_channels: usize,
    /// Hidden width (the U-shape doubles it below full resolution).
    pub base: usize,
    pub out_channels: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AggregatorDesc {
    /// Cost-volume channel count `K` this aggregator accepts.
    pub in_channels: usize,
    pub width: usize,
    /// Number of 3D conv layers, at least 2. With 3 or more, the first hidden
    /// activation is added to the last one.
    pub depth: usize,
    /// Score volumes emitted; the last one comes from the final layer.
    pub heads: usize,
}

impl FeatureDesc {
    pub fn toy(out_channels: usize) -> Self {
        Self {
            in_channels: 1,
            width: 8,
            out_channels,
        }
    }
}

impl AdaptorDesc {
    pub fn new(arch: AdaptorArch, channels: usize, base: usize) -> Self {
        Self {
            arch,
            in_channels: channels,
            base,
            out_channels: channels,
        }
    }
}

impl AggregatorDesc {
    pub fn toy(in_channels: usize) -> Self {
        Self {
            in_channels,
            width: 8,
            depth: 4,
            heads: 1,
        }
    }

    pub fn has_residual(&self) -> bool {
        self.depth >= 3
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NetDescriptor {
    Feature(FeatureDesc),
    Adaptor(AdaptorDesc),
    Aggregator(AggregatorDesc),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ConvDims {
    Two,
    Three,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayerSpec {
    pub name: String,
    pub dims: ConvDims,
    pub cin: usize,
    pub cout: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl LayerSpec {
    fn conv2d(name: &str, cin: usize, cout: usize, kernel: usize, stride: usize) -> Self {
        Self {
            name: name.to_string(),
            dims: ConvDims::Two,
            cin,
            cout,
            kernel,
            stride,
            pad: kernel / 2,
        }
    }

    fn conv3d(name: &str, cin: usize, cout: usize) -> Self {
        Self {
            name: name.to_string(),
            dims: ConvDims::Three,
            cin,
            cout,
            kernel: 3,
            stride: 1,
            pad: 1,
        }
    }

    pub fn kernel_shape(&self) -> Vec<usize> {
        match self.dims {
            ConvDims::Two => vec![self.cout, self.cin, self.kernel, self.kernel],
            ConvDims::Three => vec![self.cout, self.cin, self.kernel, self.kernel, self.kernel],
        }
    }

    pub fn fan_in(&self) -> usize {
        let taps = match self.dims {
            ConvDims::Two => self.kernel * self.kernel,
            ConvDims::Three => self.kernel * self.kernel * self.kernel,
        };
        self.cin * taps
    }

    pub fn param_count(&self) -> usize {
        self.cout * self.fan_in() + self.cout
    }
}

impl NetDescriptor {
    pub fn validate(&self) -> Result<()> {
        let positive = |v: usize, what: &str| {
            if v == 0 {
                Err(Error::Config(format!("{what} must be positive")))
            } else {
                Ok(())
            }
        };
        match *self {
            Self::Feature(d) => {
                positive(d.in_channels, "feature in_channels")?;
                positive(d.width, "feature width")?;
                positive(d.out_channels, "feature out_channels")
            }
            Self::Adaptor(d) => {
                positive(d.in_channels, "adaptor in_channels")?;
                positive(d.base, "adaptor base")?;
                positive(d.out_channels, "adaptor out_channels")
            }
            Self::Aggregator(d) => {
                positive(d.in_channels, "aggregator in_channels")?;
                positive(d.width, "aggregator width")?;
                if d.depth < 2 {
                    return Err(Error::Config("aggregator depth must be at least 2".into()));
                }
                if d.heads == 0 || d.heads > d.depth - 1 {
                    return Err(Error::Config(format!(
                        "aggregator heads must be in 1..={}",
                        d.depth - 1
                    )));
                }
                Ok(())
            }
        }
    }

    /// The layer list, in parameter-store order.
    pub fn layers(&self) -> Vec<LayerSpec> {
        match *self {
            Self::Feature(d) => vec![
                LayerSpec::conv2d("conv0", d.in_channels, d.width, 3, 2),
                LayerSpec::conv2d("conv1", d.width, d.width, 3, 2),
                LayerSpec::conv2d("conv2", d.width, d.out_channels, 3, 1),
            ],
            Self::Adaptor(d) => match d.arch {
                AdaptorArch::Linear => {
                    vec![LayerSpec::conv2d("proj", d.in_channels, d.out_channels, 1, 1)]
                }
                AdaptorArch::NonLinear => vec![
                    LayerSpec::conv2d("conv0", d.in_channels, d.base, 3, 1),
                    LayerSpec::conv2d("conv1", d.base, d.out_channels, 3, 1),
                ],
                AdaptorArch::UShape => {
                    let (b, b2) = (d.base, 2 * d.base);
                    vec![
                        LayerSpec::conv2d("enc0", d.in_channels, b, 3, 1),
                        LayerSpec::conv2d("enc1", b, b2, 3, 2),
                        LayerSpec::conv2d("enc2", b2, b2, 3, 2),
                        LayerSpec::conv2d("mid", b2, b2, 3, 1),
                        LayerSpec::conv2d("dec1", b2, b2, 3, 1),
                        LayerSpec::conv2d("dec0", b2, b, 3, 1),
                        LayerSpec::conv2d("out", b, d.out_channels, 3, 1),
                    ]
                }
            },
            Self::Aggregator(d) => {
                let mut v = vec![LayerSpec::conv3d("conv0", d.in_channels, d.width)];
                for i in 1..d.depth - 1 {
                    v.push(LayerSpec::conv3d(&format!("conv{i}"), d.width, d.width));
                }
                v.push(LayerSpec::conv3d(&format!("conv{}", d.depth - 1), d.width, 1));
                for j in 1..d.heads {
                    v.push(LayerSpec::conv3d(&format!("head{j}"), d.width, 1));
                }
                v
            }
        }
    }

    pub fn param_count(&self) -> usize {
        self.layers().iter().map(LayerSpec::param_count).sum()
    }

    pub fn kind(&self) -> &'static str {
        match self {
            Self::Feature(_) => "feature",
            Self::Adaptor(_) => "adaptor",
            Self::Aggregator(_) => "aggregator",
        }
    }

    pub fn to_kv(&self) -> KvFile {
        let mut kv = KvFile::new();
        kv.set("kind", self.kind());
        match *self {
            Self::Feature(d) => {
                kv.set("in_channels", d.in_channels);
                kv.set("width", d.width);
                kv.set("out_channels", d.out_channels);
            }
            Self::Adaptor(d) => {
                kv.set("arch", d.arch);
                kv.set("in_channels", d.in_channels);
                kv.set("base", d.base);
                kv.set("out_channels", d.out_channels);
            }
            Self::Aggregator(d) => {
                kv.set("in_channels", d.in_channels);
                kv.set("width", d.width);
                kv.set("depth", d.depth);
                kv.set("heads", d.heads);
            }
        }
        kv
    }

    pub fn from_kv(kv: &KvFile) -> Result<Self> {
        let n = |k: &str| -> Result<usize> {
            kv.parse_key(k)?
                .ok_or_else(|| Error::Config(format!("descriptor is missing {k}")))
        };
        let desc = match kv.require("kind")? {
            "feature" => Self::Feature(FeatureDesc {
                in_channels: n("in_channels")?,
                width: n("width")?,
                out_channels: n("out_channels")?,
            }),
            "adaptor" => Self::Adaptor(AdaptorDesc {
                arch: kv.require("arch")?.parse()?,
                in_channels: n("in_channels")?,
                base: n("base")?,
                out_channels: n("out_channels")?,
            }),
            "aggregator" => Self::Aggregator(AggregatorDesc {
                in_channels: n("in_channels")?,
                width: n("width")?,
                depth: n("depth")?,
                heads: kv.parse_or("heads", 1)?,
            }),
            other => return Err(Error::Config(format!("unknown net kind {other:?}"))),
        };
        desc.validate()?;
        Ok(desc)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ushape_count_matches_closed_form() {
        let d = AdaptorDesc::new(AdaptorArch::UShape, 16, 16);
        // closed form for in = out = c, base b: 9 * (c*b + b*2b + 3*(2b)^2 + 2b*b + b*c)
        // weights plus biases b + 2b + 2b + 2b + 2b + b + c
        let (c, b) = (16usize, 16usize);
        let weights = 9 * (c * b + b * 2 * b + 3 * (2 * b) * (2 * b) + 2 * b * b + b * c);
        let biases = b + 2 * b + 2 * b + 2 * b + 2 * b + b + c;
        assert_eq!(NetDescriptor::Adaptor(d).param_count(), weights + biases);
        assert_eq!(weights + biases, 41_648);
    }

    #[test]
    fn aggregator_layers() {
        let d = NetDescriptor::Aggregator(AggregatorDesc::toy(1));
        let names: Vec<_> = d.layers().into_iter().map(|l| l.name).collect();
        assert_eq!(names, ["conv0", "conv1", "conv2", "conv3"]);
        let three = NetDescriptor::Aggregator(AggregatorDesc { heads: 3, ..AggregatorDesc::toy(1) });
        assert_eq!(three.layers().len(), 6);
        assert!(NetDescriptor::Aggregator(AggregatorDesc { heads: 4, ..AggregatorDesc::toy(1) }).validate().is_err());
        assert!(NetDescriptor::Aggregator(AggregatorDesc { depth: 1, ..AggregatorDesc::toy(1) }).validate().is_err());
    }

    #[test]
    fn kv_round_trip() {
        for d in [
            NetDescriptor::Feature(FeatureDesc::toy(16)),
            NetDescriptor::Adaptor(AdaptorDesc::new(AdaptorArch::NonLinear, 8, 4)),
            NetDescriptor::Aggregator(AggregatorDesc { heads: 2, ..AggregatorDesc::toy(32) }),
        ] {
            assert_eq!(NetDescriptor::from_kv(&d.to_kv()).unwrap(), d);
        }
    }
}
