//! Channel feature network: predicts an image-sized channel map from the
//! aggregated activation map.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::backbone::{conv, new_conv, AggregatedActivationMap};
use crate::channels::ChannelKind;
use crate::error::{Error, Result};
use crate::params::{Bindings, LayerInit, ParamStore};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CfnConfig {
    pub width: usize,
    pub convs: usize,
    /// Initialization of the hidden convolutions.
    pub init: LayerInit,
}

impl Default for CfnConfig {
    fn default() -> Self {
        CfnConfig {
            width: 32,
            convs: 2,
            init: LayerInit::default(),
        }
    }
}

impl CfnConfig {
    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.convs == 0 {
            return Err(Error::Config("CFN width and depth must be ≥ 1".into()));
        }
        Ok(())
    }
}

/// Output planes of the per-pixel head for a supervisor of `kind` with
/// `channels` planes.
pub fn output_channels(kind: ChannelKind, channels: usize) -> usize {
    match kind {
        ChannelKind::Binary => 1,
        ChannelKind::Multiclass { class_count } => class_count,
        ChannelKind::Regression => channels,
    }
}

pub fn init_cfn(
    store: &mut ParamStore,
    cfg: &CfnConfig,
    in_channels: usize,
    out_channels: usize,
    rng: &mut ChaCha8Rng,
) -> Result<()> {
    cfg.validate()?;
    let mut cin = in_channels;
    for j in 0..cfg.convs {
        new_conv(store, &format!("cfn.c{}", j), cin, cfg.width, 3, cfg.init, rng)?;
        cin = cfg.width;
    }
    new_conv(store, "cfn.head", cfg.width, out_channels, 1, LayerInit::default(), rng)
}

/// Convolutions at the aggregated resolution, a 1×1 per-pixel head and
/// bilinear resizing to `image_size`, followed by the kind's squash. The
/// head is applied before resizing: both are linear and bilinear weights
/// sum to one, so the order does not change the result, only the cost.
pub fn cfn_forward(
    g: &mut Graph,
    b: &Bindings,
    cfg: &CfnConfig,
    agg: &AggregatedActivationMap,
    image_size: (usize, usize),
    kind: ChannelKind,
) -> Result<Var> {
    let mut y = agg.var;
    for j in 0..cfg.convs {
        y = conv(g, b, &format!("cfn.c{}", j), y, true)?;
    }
    let y = conv(g, b, "cfn.head", y, false)?;
    let y = g.resize(y, image_size.0, image_size.1)?;
    Ok(match kind {
        ChannelKind::Binary => g.sigmoid(y),
        ChannelKind::Multiclass { .. } => g.softmax_channels(y),
        ChannelKind::Regression => y,
    })
}
