use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// One entry of the fixed layer vocabulary.
///
/// Convolutions are always 3×3, stride 1, SAME (one pixel of zero padding).
/// Pooling uses VALID windows.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Layer {
    Dense { out_units: usize },
    Conv { out_channels: usize },
    Relu,
    AvgPool { window: usize, stride: usize },
    Flatten,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InputShape {
    Image {
        height: usize,
        width: usize,
        channels: usize,
    },
    Vector {
        dim: usize,
    },
}

impl InputShape {
    /// `(height, width, channels)`; vectors are `(1, 1, dim)`.
    pub fn hwc(&self) -> (usize, usize, usize) {
        match *self {
            InputShape::Image {
                height,
                width,
                channels,
            } => (height, width, channels),
            InputShape::Vector { dim } => (1, 1, dim),
        }
    }

    pub fn numel(&self) -> usize {
        let (h, w, c) = self.hwc();
        h * w * c
    }
}

/// Architecture description of an NTK-parameterized network.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NetworkSpec {
    /// Builder name (`myrtle`, `cnn5`, `mlp4`) or a free-form label.
    pub name: String,
    /// The width parameter `c`.
    pub width: usize,
    pub input_shape: InputShape,
    pub layers: Vec<Layer>,
    #[serde(default)]
    pub use_bias: bool,
    #[serde(default = "default_bias_std")]
    pub bias_std: f64,
}

fn default_bias_std() -> f64 {
    1.0
}

/// Canonical architectures, addressable by name.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Architecture {
    Myrtle,
    Cnn5,
    Mlp4,
}

impl Architecture {
    pub fn parse(name: &str) -> Result<Self> {
        match name {
            "myrtle" => Ok(Architecture::Myrtle),
            "cnn5" => Ok(Architecture::Cnn5),
            "mlp4" => Ok(Architecture::Mlp4),
            other => Err(Error::InvalidSpec(format!("unknown architecture `{other}`"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Architecture::Myrtle => "myrtle",
            Architecture::Cnn5 => "cnn5",
            Architecture::Mlp4 => "mlp4",
        }
    }

    pub fn build(self, width: usize, input_shape: InputShape) -> NetworkSpec {
        let mut spec = match self {
            Architecture::Myrtle => myrtle_cnn(width),
            Architecture::Cnn5 => cnn5(width),
            Architecture::Mlp4 => mlp4(width),
        };
        spec.input_shape = input_shape;
        spec
    }
}

/// Myrtle CNN on 32×32×3 inputs: four conv blocks with `c, 2c, 4c, 8c`
/// channels, 2×2 pools after blocks two to four, a 4×4 pool and a linear head.
pub fn myrtle_cnn(c: usize) -> NetworkSpec {
    use Layer::*;
    let pool2 = AvgPool { window: 2, stride: 2 };
    NetworkSpec {
        name: "myrtle".into(),
        width: c,
        input_shape: InputShape::Image {
            height: 32,
            width: 32,
            channels: 3,
        },
        layers: vec![
            Conv { out_channels: c },
            Relu,
            Conv { out_channels: 2 * c },
            Relu,
            pool2,
            Conv { out_channels: 4 * c },
            Relu,
            pool2,
            Conv { out_channels: 8 * c },
            Relu,
            pool2,
            AvgPool { window: 4, stride: 4 },
            Flatten,
            Dense { out_units: 1 },
        ],
        use_bias: false,
        bias_std: 1.0,
    }
}

/// Four `c`-channel conv layers with Relu, then a linear head.
pub fn cnn5(c: usize) -> NetworkSpec {
    use Layer::*;
    let mut layers = Vec::new();
    for _ in 0..4 {
        layers.push(Conv { out_channels: c });
        layers.push(Relu);
    }
    layers.push(Flatten);
    layers.push(Dense { out_units: 1 });
    NetworkSpec {
        name: "cnn5".into(),
        width: c,
        input_shape: InputShape::Image {
            height: 32,
            width: 32,
            channels: 3,
        },
        layers,
        use_bias: false,
        bias_std: 1.0,
    }
}

/// Three hidden Relu layers of width `c` on 30-dimensional inputs.
pub fn mlp4(c: usize) -> NetworkSpec {
    use Layer::*;
    NetworkSpec {
        name: "mlp4".into(),
        width: c,
        input_shape: InputShape::Vector { dim: 30 },
        layers: vec![
            Flatten,
            Dense { out_units: c },
            Relu,
            Dense { out_units: c },
            Relu,
            Dense { out_units: c },
            Relu,
            Dense { out_units: 1 },
        ],
        use_bias: false,
        bias_std: 1.0,
    }
}

/// A single linear readout `(1/√d) w·x`.
pub fn dense_readout(dim: usize) -> NetworkSpec {
    NetworkSpec {
        name: "dense".into(),
        width: 1,
        input_shape: InputShape::Vector { dim },
        layers: vec![Layer::Dense { out_units: 1 }],
        use_bias: false,
        bias_std: 1.0,
    }
}

impl NetworkSpec {
    pub fn with_input_shape(mut self, shape: InputShape) -> Self {
        self.input_shape = shape;
        self
    }

    pub fn with_bias(mut self, bias_std: f64) -> Self {
        self.use_bias = true;
        self.bias_std = bias_std;
        self
    }

    /// Rescales every hidden layer from width `self.width` to `width`.
    /// Hidden sizes must be multiples of the current width.
    pub fn with_width(&self, width: usize) -> Result<NetworkSpec> {
        if width == 0 {
            return Err(Error::InvalidSpec("width must be positive".into()));
        }
        let old = self.width;
        let last = self.layers.len().saturating_sub(1);
        let rescale = |units: usize| -> Result<usize> {
            if units % old != 0 {
                return Err(Error::InvalidSpec(format!(
                    "layer size {units} is not a multiple of width {old}"
                )));
            }
            Ok(units / old * width)
        };
        let mut layers = Vec::with_capacity(self.layers.len());
        for (i, layer) in self.layers.iter().enumerate() {
            layers.push(match *layer {
                Layer::Dense { out_units } if i != last => Layer::Dense {
                    out_units: rescale(out_units)?,
                },
                Layer::Conv { out_channels } => Layer::Conv {
                    out_channels: rescale(out_channels)?,
                },
                other => other,
            });
        }
        Ok(NetworkSpec {
            width,
            layers,
            ..self.clone()
        })
    }

    /// Short stable hash of the canonical JSON encoding.
    pub fn spec_hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("spec serializes");
        let digest = Sha256::digest(&json);
        hex::encode(&digest[..8])
    }

    pub fn num_params(&self) -> Result<usize> {
        Ok(super::plan::Plan::compile(self)?.num_params)
    }
}
