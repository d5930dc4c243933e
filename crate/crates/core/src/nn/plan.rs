//! Shape-checked execution plan compiled from a [`NetworkSpec`].

use serde::{Deserialize, Serialize};

use super::spec::{Layer, NetworkSpec};
use crate::error::{Error, Result};

/// Location of one parametric layer inside the flat weight vector.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerView {
    /// Index into `NetworkSpec::layers`.
    pub layer: usize,
    pub weight_offset: usize,
    /// `[out, fan_in]`, row-major.
    pub weight_shape: [usize; 2],
    pub bias_offset: Option<usize>,
}

impl LayerView {
    pub fn weight_len(&self) -> usize {
        self.weight_shape[0] * self.weight_shape[1]
    }

    pub fn fan_in(&self) -> usize {
        self.weight_shape[1]
    }

    pub fn out(&self) -> usize {
        self.weight_shape[0]
    }

    pub fn end(&self) -> usize {
        match self.bias_offset {
            Some(b) => b + self.out(),
            None => self.weight_offset + self.weight_len(),
        }
    }
}

#[derive(Clone, Debug)]
pub(crate) enum Op {
    /// Activations `(batch, fan_in)` to `(batch, out)`.
    Dense { view: LayerView },
    /// 3×3 SAME convolution on `(batch·h·w, cin)` activations.
    Conv {
        view: LayerView,
        h: usize,
        w: usize,
        cin: usize,
    },
    Relu,
    AvgPool {
        h: usize,
        w: usize,
        c: usize,
        window: usize,
        stride: usize,
        oh: usize,
        ow: usize,
    },
    /// `(batch·h·w, c)` to `(batch, h·w·c)`; a pure reshape in row-major layout.
    Flatten { h: usize, w: usize, c: usize },
}

#[derive(Clone, Debug)]
pub(crate) struct Plan {
    pub ops: Vec<Op>,
    pub views: Vec<LayerView>,
    pub num_params: usize,
    pub input: (usize, usize, usize),
    pub bias_std: f64,
}

impl Plan {
    pub fn compile(spec: &NetworkSpec) -> Result<Plan> {
        if spec.layers.is_empty() {
            return Err(Error::InvalidSpec("network has no layers".into()));
        }
        match spec.layers.last() {
            Some(Layer::Dense { out_units: 1 }) => {}
            _ => {
                return Err(Error::InvalidSpec(
                    "final layer must be Dense with one output".into(),
                ))
            }
        }
        let input = spec.input_shape.hwc();
        if input.0 == 0 || input.1 == 0 || input.2 == 0 {
            return Err(Error::InvalidSpec("input shape has a zero extent".into()));
        }
        let (mut h, mut w, mut c) = input;
        let mut offset = 0;
        let mut ops = Vec::with_capacity(spec.layers.len());
        let mut views = Vec::new();
        for (index, layer) in spec.layers.iter().enumerate() {
            match *layer {
                Layer::Dense { out_units } => {
                    if h != 1 || w != 1 {
                        return Err(Error::InvalidSpec(format!(
                            "layer {index}: Dense needs flat input, got {h}x{w}x{c}; add Flatten"
                        )));
                    }
                    if out_units == 0 {
                        return Err(Error::InvalidSpec(format!("layer {index}: zero units")));
                    }
                    let view = make_view(index, &mut offset, out_units, c, spec.use_bias);
                    views.push(view.clone());
                    ops.push(Op::Dense { view });
                    c = out_units;
                }
                Layer::Conv { out_channels } => {
                    if out_channels == 0 {
                        return Err(Error::InvalidSpec(format!("layer {index}: zero channels")));
                    }
                    let view = make_view(index, &mut offset, out_channels, 9 * c, spec.use_bias);
                    views.push(view.clone());
                    ops.push(Op::Conv { view, h, w, cin: c });
                    c = out_channels;
                }
                Layer::Relu => ops.push(Op::Relu),
                Layer::AvgPool { window, stride } => {
                    if window == 0 || stride == 0 || window > h || window > w {
                        return Err(Error::InvalidSpec(format!(
                            "layer {index}: pool window {window} does not fit {h}x{w}"
                        )));
                    }
                    let oh = (h - window) / stride + 1;
                    let ow = (w - window) / stride + 1;
                    ops.push(Op::AvgPool {
                        h,
                        w,
                        c,
                        window,
                        stride,
                        oh,
                        ow,
                    });
                    h = oh;
                    w = ow;
                }
                Layer::Flatten => {
                    ops.push(Op::Flatten { h, w, c });
                    c *= h * w;
                    h = 1;
                    w = 1;
                }
            }
        }
        Ok(Plan {
            ops,
            views,
            num_params: offset,
            input,
            bias_std: spec.bias_std,
        })
    }

    pub fn input_len(&self) -> usize {
        self.input.0 * self.input.1 * self.input.2
    }
}

fn make_view(layer: usize, offset: &mut usize, out: usize, fan_in: usize, bias: bool) -> LayerView {
    let weight_offset = *offset;
    *offset += out * fan_in;
    let bias_offset = if bias {
        let b = *offset;
        *offset += out;
        Some(b)
    } else {
        None
    };
    LayerView {
        layer,
        weight_offset,
        weight_shape: [out, fan_in],
        bias_offset,
    }
}
