//! Body network, multi-level feature aggregation and the channel side branch.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::params::{Bindings, Init, LayerInit, ParamStore};

/// σ of the Gaussian used for every layer that is not part of the body.
pub const NEW_LAYER_SIGMA: f64 = 0.01;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BackboneConfig {
    pub stage_channels: Vec<usize>,
    /// Cumulative stride of each extracted map.
    pub stage_strides: Vec<usize>,
    /// 3×3 convolutions per stage.
    pub convs_per_stage: Vec<usize>,
    pub branch_channels: usize,
    pub aggregation_target_level: usize,
    pub branch_init: LayerInit,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        BackboneConfig {
            stage_channels: vec![16, 32, 64, 64],
            stage_strides: vec![1, 2, 4, 8],
            convs_per_stage: vec![2, 2, 3, 3],
            branch_channels: 32,
            aggregation_target_level: 0,
            branch_init: LayerInit::default(),
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        let n = self.stage_channels.len();
        if n < 2 || self.stage_strides.len() != n || self.convs_per_stage.len() != n {
            return Err(Error::Config(
                "stage_channels, stage_strides and convs_per_stage need equal length ≥ 2".into(),
            ));
        }
        let mut prev = 0;
        for &s in &self.stage_strides {
            if !s.is_power_of_two() || s <= prev {
                return Err(Error::Config(format!(
                    "stage strides must be strictly increasing powers of 2: {:?}",
                    self.stage_strides
                )));
            }
            prev = s;
        }
        if self.stage_channels.contains(&0) || self.convs_per_stage.contains(&0) {
            return Err(Error::Config("every stage needs ≥ 1 channel and ≥ 1 conv".into()));
        }
        if self.branch_channels == 0 {
            return Err(Error::Config("branch_channels must be ≥ 1".into()));
        }
        if self.aggregation_target_level >= n {
            return Err(Error::Config("aggregation_target_level out of range".into()));
        }
        Ok(())
    }

    pub fn levels(&self) -> usize {
        self.stage_channels.len()
    }

    pub fn max_stride(&self) -> usize {
        *self.stage_strides.last().expect("validated")
    }

    pub fn last_channels(&self) -> usize {
        *self.stage_channels.last().expect("validated")
    }

    pub fn aggregated_channels(&self) -> usize {
        self.levels() * self.branch_channels
    }

    pub fn aggregated_stride(&self) -> usize {
        self.stage_strides[self.aggregation_target_level]
    }
}

/// How the side-branch weights are initialized.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SideBranchInit {
    #[default]
    Random,
    /// Weights exported by a side-branch-only detector.
    Pretrained,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SideBranchConfig {
    /// Number of 3×3 convolutions: 2 (default) or 1.
    pub convs: usize,
    pub hidden_channels: usize,
    pub output_channels: usize,
    pub init: SideBranchInit,
}

impl Default for SideBranchConfig {
    fn default() -> Self {
        SideBranchConfig {
            convs: 2,
            hidden_channels: 64,
            output_channels: 128,
            init: SideBranchInit::Random,
        }
    }
}

impl SideBranchConfig {
    pub fn validate(&self) -> Result<()> {
        if !(1..=2).contains(&self.convs) {
            return Err(Error::Config("side branch supports 1 or 2 convolutions".into()));
        }
        if self.hidden_channels == 0 || self.output_channels == 0 {
            return Err(Error::Config("side branch channel counts must be ≥ 1".into()));
        }
        Ok(())
    }
}

/// A feature map on the tape together with its stride in input pixels.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ActivationMap {
    pub var: Var,
    pub stride: usize,
}

/// Concatenation of equal-width projections of every body level, resized to
/// the target level's grid.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AggregatedActivationMap {
    pub var: Var,
    pub stride: usize,
    pub levels: usize,
}

impl From<AggregatedActivationMap> for ActivationMap {
    fn from(a: AggregatedActivationMap) -> Self {
        ActivationMap {
            var: a.var,
            stride: a.stride,
        }
    }
}

fn conv_params(
    store: &mut ParamStore,
    prefix: &str,
    cin: usize,
    cout: usize,
    k: usize,
    init: Init,
    rng: &mut ChaCha8Rng,
) -> Result<()> {
    store.init(&format!("{}.w", prefix), &[cout, cin, k, k], init, cin * k * k, rng)?;
    store.init(&format!("{}.b", prefix), &[cout], Init::Zeros, 0, rng)
}

pub(crate) fn conv(g: &mut Graph, b: &Bindings, prefix: &str, x: Var, relu: bool) -> Result<Var> {
    let w = b.get(&format!("{}.w", prefix))?;
    let bias = b.get(&format!("{}.b", prefix))?;
    let k = g.value(w).shape()[2];
    let y = g.conv2d(x, w, Some(bias), k / 2)?;
    Ok(if relu { g.relu(y) } else { y })
}

pub(crate) fn new_conv(
    store: &mut ParamStore,
    prefix: &str,
    cin: usize,
    cout: usize,
    k: usize,
    init: LayerInit,
    rng: &mut ChaCha8Rng,
) -> Result<()> {
    conv_params(store, prefix, cin, cout, k, init.into(), rng)
}

pub(crate) fn body_conv_name(stage: usize, conv: usize) -> String {
    format!("body.s{}.c{}", stage, conv)
}

/// Body weights use He initialization; they stand in for a pretrained
/// network and stay frozen until joint training.
pub fn init_body(store: &mut ParamStore, cfg: &BackboneConfig, rng: &mut ChaCha8Rng) -> Result<()> {
    cfg.validate()?;
    let mut cin = 3;
    for (s, (&c, &n)) in cfg.stage_channels.iter().zip(&cfg.convs_per_stage).enumerate() {
        for j in 0..n {
            conv_params(store, &body_conv_name(s, j), cin, c, 3, Init::He, rng)?;
            cin = c;
        }
    }
    Ok(())
}

pub fn init_aggregation(store: &mut ParamStore, cfg: &BackboneConfig, rng: &mut ChaCha8Rng) -> Result<()> {
    for (l, &c) in cfg.stage_channels.iter().enumerate() {
        new_conv(store, &format!("agg.l{}.c0", l), c, cfg.branch_channels, 3, cfg.branch_init, rng)?;
        new_conv(store, &format!("agg.l{}.c1", l), cfg.branch_channels, cfg.branch_channels, 3, cfg.branch_init, rng)?;
    }
    Ok(())
}

pub fn init_side_branch(
    store: &mut ParamStore,
    cfg: &SideBranchConfig,
    input_channels: usize,
    rng: &mut ChaCha8Rng,
) -> Result<()> {
    cfg.validate()?;
    if cfg.convs == 1 {
        new_conv(store, "side.c0", input_channels, cfg.output_channels, 3, LayerInit::default(), rng)
    } else {
        new_conv(store, "side.c0", input_channels, cfg.hidden_channels, 3, LayerInit::default(), rng)?;
        new_conv(store, "side.c1", cfg.hidden_channels, cfg.output_channels, 3, LayerInit::default(), rng)
    }
}

/// Run the body on a 3×H×W input, returning one map per stage.
pub fn forward_body(g: &mut Graph, b: &Bindings, cfg: &BackboneConfig, x: Var) -> Result<Vec<ActivationMap>> {
    let (c, h, w) = g.value(x).dims3()?;
    let ms = cfg.max_stride();
    if c != 3 || h % ms != 0 || w % ms != 0 {
        return Err(Error::Shape(format!(
            "body expects 3×H×W with H, W divisible by {}, got {}×{}×{}",
            ms, c, h, w
        )));
    }
    let mut maps = Vec::with_capacity(cfg.levels());
    let mut cur = x;
    let mut stride = 1;
    for (s, &target) in cfg.stage_strides.iter().enumerate() {
        while stride < target {
            cur = g.max_pool2(cur)?;
            stride *= 2;
        }
        for j in 0..cfg.convs_per_stage[s] {
            cur = conv(g, b, &body_conv_name(s, j), cur, true)?;
        }
        maps.push(ActivationMap { var: cur, stride });
    }
    Ok(maps)
}

/// Two 3×3 convolutions per level to `branch_channels`, resampling to the
/// target level's grid (bilinear upsampling for coarser levels, average
/// pooling for finer ones) and concatenation in level order.
pub fn aggregate_maps(
    g: &mut Graph,
    b: &Bindings,
    cfg: &BackboneConfig,
    maps: &[ActivationMap],
) -> Result<AggregatedActivationMap> {
    if maps.len() != cfg.levels() {
        return Err(Error::Shape(format!(
            "expected {} levels, got {}",
            cfg.levels(),
            maps.len()
        )));
    }
    let target = maps[cfg.aggregation_target_level];
    let (_, th, tw) = g.value(target.var).dims3()?;
    let mut parts = Vec::with_capacity(maps.len());
    for (l, m) in maps.iter().enumerate() {
        let y = conv(g, b, &format!("agg.l{}.c0", l), m.var, true)?;
        let y = conv(g, b, &format!("agg.l{}.c1", l), y, true)?;
        let y = if m.stride < target.stride {
            g.avg_pool(y, target.stride / m.stride)?
        } else {
            g.resize(y, th, tw)?
        };
        parts.push(y);
    }
    let var = g.concat(&parts)?;
    Ok(AggregatedActivationMap {
        var,
        stride: target.stride,
        levels: maps.len(),
    })
}

/// conv–pool–conv–pool–pool (or conv–pool–pool–pool with one conv) taking a
/// channel map to stride 8.
pub fn side_branch(g: &mut Graph, b: &Bindings, cfg: &SideBranchConfig, x: Var) -> Result<ActivationMap> {
    let (_, h, w) = g.value(x).dims3()?;
    if h % 8 != 0 || w % 8 != 0 {
        return Err(Error::Shape(format!(
            "side branch input {}×{} is not divisible by 8",
            h, w
        )));
    }
    let mut y = conv(g, b, "side.c0", x, true)?;
    y = g.max_pool2(y)?;
    if cfg.convs == 2 {
        y = conv(g, b, "side.c1", y, true)?;
    }
    y = g.max_pool2(y)?;
    y = g.max_pool2(y)?;
    Ok(ActivationMap { var: y, stride: 8 })
}

/// Concatenate the extra map (average-pooled to the body's stride) onto the
/// last body map; identity without an extra map.
pub fn fuse_for_heads(g: &mut Graph, body_last: ActivationMap, extra: Option<ActivationMap>) -> Result<ActivationMap> {
    let Some(extra) = extra else {
        return Ok(body_last);
    };
    if extra.stride > body_last.stride || body_last.stride % extra.stride != 0 {
        return Err(Error::Shape(format!(
            "cannot pool stride {} onto stride {}",
            extra.stride, body_last.stride
        )));
    }
    let pooled = g.avg_pool(extra.var, body_last.stride / extra.stride)?;
    let (_, h, w) = g.value(body_last.var).dims3()?;
    let (_, eh, ew) = g.value(pooled).dims3()?;
    if (h, w) != (eh, ew) {
        return Err(Error::Shape(format!(
            "fused maps differ in size: {}×{} vs {}×{}",
            h, w, eh, ew
        )));
    }
    let var = g.concat(&[body_last.var, pooled])?;
    Ok(ActivationMap {
        var,
        stride: body_last.stride,
    })
}
