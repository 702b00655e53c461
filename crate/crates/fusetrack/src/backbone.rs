//! Four-stage convolutional feature extractor with an overall stride of 8.
//!
//! Stages 1 to 3 halve the spatial extents; stage 4 keeps stride 8 by using
//! dilated 3x3 convolutions instead of downsampling, so the final map stays
//! aligned with stage 3. Template and search crops share the same weights.

use crate::error::{Error, Result};
use crate::tensor::math::ConvSpec;
use crate::tensor::param::{Init, ParamId, ParamStore};
use crate::tensor::tape::{Tape, Var};

#[derive(Clone, Debug)]
pub struct BackboneConfig {
    /// Output channels of stages 1..4; nondecreasing.
    pub stage_channels: [usize; 4],
    /// 3x3 conv+ReLU blocks per stage.
    pub convs_per_stage: usize,
}

impl BackboneConfig {
    pub fn out_channels(&self) -> usize {
        self.stage_channels[3]
    }
}

#[derive(Clone, Debug)]
struct ConvParams {
    w: ParamId,
    b: ParamId,
}

/// Feature maps at strides 2, 4, 8, 8. `final_map` aliases the last stage.
#[derive(Debug)]
pub struct PyramidFeatures {
    pub stages: [Var; 4],
}

impl PyramidFeatures {
    pub fn final_map(&self) -> Var {
        self.stages[3]
    }
}

pub struct Backbone {
    stages: Vec<Vec<ConvParams>>,
    pub cfg: BackboneConfig,
}

impl Backbone {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut impl rand::Rng,
        prefix: &str,
        cfg: BackboneConfig,
    ) -> Self {
        assert!(cfg.convs_per_stage >= 1);
        assert!(
            cfg.stage_channels.windows(2).all(|w| w[0] <= w[1]),
            "stage channels must be nondecreasing"
        );
        let mut stages = Vec::with_capacity(4);
        let mut c_in = 3;
        for (s, &c_out) in cfg.stage_channels.iter().enumerate() {
            let mut convs = Vec::with_capacity(cfg.convs_per_stage);
            for c in 0..cfg.convs_per_stage {
                let p = format!("{prefix}.stage{s}.conv{c}");
                convs.push(ConvParams {
                    w: store.add(&format!("{p}.w"), &[c_out, c_in, 3, 3], Init::Xavier, rng),
                    b: store.add(&format!("{p}.b"), &[c_out], Init::Zeros, rng),
                });
                c_in = c_out;
            }
            stages.push(convs);
        }
        Backbone { stages, cfg }
    }
}

/// Run the backbone over a `[3×H×W]` image; H and W must be divisible by 8.
pub fn backbone_forward(
    tape: &mut Tape,
    store: &ParamStore,
    bb: &Backbone,
    image: Var,
) -> Result<PyramidFeatures> {
    let shape = tape.shape(image).to_vec();
    if shape.len() != 3 || shape[0] != 3 {
        return Err(Error::Shape(format!("backbone expects [3×H×W], got {shape:?}")));
    }
    let (h, w) = (shape[1], shape[2]);
    if h % 8 != 0 || w % 8 != 0 {
        return Err(Error::Config(format!(
            "backbone input extents must be divisible by 8, got {h}×{w}"
        )));
    }
    let mut x = image;
    let mut outs = Vec::with_capacity(4);
    for (s, convs) in bb.stages.iter().enumerate() {
        for (c, conv) in convs.iter().enumerate() {
            // stages 0..2 downsample in their first conv; stage 3 dilates
            let spec = if s == 3 {
                ConvSpec { stride: 1, pad: 2, dilation: 2 }
            } else if c == 0 {
                ConvSpec { stride: 2, pad: 1, dilation: 1 }
            } else {
                ConvSpec { stride: 1, pad: 1, dilation: 1 }
            };
            let wv = tape.param(store, conv.w);
            let bv = tape.param(store, conv.b);
            let y = tape.conv2d(x, wv, Some(bv), spec);
            x = tape.relu(y);
        }
        outs.push(x);
    }
    Ok(PyramidFeatures { stages: [outs[0], outs[1], outs[2], outs[3]] })
}
