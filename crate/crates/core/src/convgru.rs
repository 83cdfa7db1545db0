//! Forward pass of a convolutional GRU and the three-step sequential heads.
//!
//! The same backbone feature is fed at every step. Step `t` outputs come from
//! the hidden state `h_t` only, so parameters used at later steps cannot
//! influence earlier outputs.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::labelgen::{Head, OutputMaps};
use crate::tensor::{FeatureMap, TensorBundle};

pub const NUM_TIMESTEPS: usize = 3;

/// 2D convolution, stride 1, zero "same" padding.
/// Weights are laid out `[out][ky][kx][in]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Conv2d {
    pub kernel: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Conv2d {
    pub fn zeros(kernel: usize, in_channels: usize, out_channels: usize) -> Self {
        Self {
            kernel,
            in_channels,
            out_channels,
            weight: vec![0.0; out_channels * kernel * kernel * in_channels],
            bias: vec![0.0; out_channels],
        }
    }

    /// Uniform in `±1/sqrt(fan_in)`.
    pub fn random(kernel: usize, in_channels: usize, out_channels: usize, rng: &mut impl Rng) -> Self {
        let bound = 1.0 / ((kernel * kernel * in_channels) as f64).sqrt();
        let mut c = Self::zeros(kernel, in_channels, out_channels);
        c.weight.iter_mut().for_each(|w| *w = rng.random_range(-bound..bound));
        c.bias.iter_mut().for_each(|b| *b = rng.random_range(-bound..bound));
        c
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.kernel % 2 == 1
            && self.weight.len() == self.out_channels * self.kernel * self.kernel * self.in_channels
            && self.bias.len() == self.out_channels
            && self.weight.iter().chain(&self.bias).all(|v| v.is_finite());
        if ok {
            Ok(())
        } else {
            Err(invalid(format!(
                "conv {}x{} {}->{} has inconsistent or non-finite parameters",
                self.kernel, self.kernel, self.in_channels, self.out_channels
            )))
        }
    }

    #[inline]
    fn w(&self, o: usize, ky: usize, kx: usize) -> &[f64] {
        let start = ((o * self.kernel + ky) * self.kernel + kx) * self.in_channels;
        &self.weight[start..start + self.in_channels]
    }

    pub fn forward(&self, x: &FeatureMap) -> Result<FeatureMap> {
        if x.channels() != self.in_channels {
            return Err(Error::Shape(format!(
                "conv expects {} input channels, got {}",
                self.in_channels,
                x.channels()
            )));
        }
        let (h, w) = (x.height(), x.width());
        let pad = self.kernel / 2;
        let mut out = FeatureMap::zeros(h, w, self.out_channels);
        for row in 0..h {
            for col in 0..w {
                let acc = out.cell_mut(row, col);
                acc.copy_from_slice(&self.bias);
                for ky in 0..self.kernel {
                    let Some(r) = (row + ky).checked_sub(pad).filter(|r| *r < h) else { continue };
                    for kx in 0..self.kernel {
                        let Some(c) = (col + kx).checked_sub(pad).filter(|c| *c < w) else { continue };
                        let input = x.cell(r, c);
                        for (o, a) in acc.iter_mut().enumerate() {
                            *a += self.w(o, ky, kx).iter().zip(input).map(|(p, q)| p * q).sum::<f64>();
                        }
                    }
                }
            }
        }
        Ok(out)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub in_channels: usize,
    pub hidden_channels: usize,
    pub head_channels: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self { in_channels: 64, hidden_channels: 64, head_channels: 256 }
    }
}

/// Update gate, reset gate and candidate convolutions; each has an input
/// path and a hidden path.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConvGRUWeights {
    pub update_x: Conv2d,
    pub update_h: Conv2d,
    pub reset_x: Conv2d,
    pub reset_h: Conv2d,
    pub cand_x: Conv2d,
    pub cand_h: Conv2d,
}

impl ConvGRUWeights {
    pub fn zeros(in_channels: usize, hidden: usize) -> Self {
        Self {
            update_x: Conv2d::zeros(3, in_channels, hidden),
            update_h: Conv2d::zeros(3, hidden, hidden),
            reset_x: Conv2d::zeros(3, in_channels, hidden),
            reset_h: Conv2d::zeros(3, hidden, hidden),
            cand_x: Conv2d::zeros(3, in_channels, hidden),
            cand_h: Conv2d::zeros(3, hidden, hidden),
        }
    }

    pub fn random(in_channels: usize, hidden: usize, rng: &mut impl Rng) -> Self {
        Self {
            update_x: Conv2d::random(3, in_channels, hidden, rng),
            update_h: Conv2d::random(3, hidden, hidden, rng),
            reset_x: Conv2d::random(3, in_channels, hidden, rng),
            reset_h: Conv2d::random(3, hidden, hidden, rng),
            cand_x: Conv2d::random(3, in_channels, hidden, rng),
            cand_h: Conv2d::random(3, hidden, hidden, rng),
        }
    }

    fn named(&self) -> [(&'static str, &Conv2d); 6] {
        [
            ("update_x", &self.update_x),
            ("update_h", &self.update_h),
            ("reset_x", &self.reset_x),
            ("reset_h", &self.reset_h),
            ("cand_x", &self.cand_x),
            ("cand_h", &self.cand_h),
        ]
    }

    fn named_mut(&mut self) -> [(&'static str, &mut Conv2d); 6] {
        [
            ("update_x", &mut self.update_x),
            ("update_h", &mut self.update_h),
            ("reset_x", &mut self.reset_x),
            ("reset_h", &mut self.reset_h),
            ("cand_x", &mut self.cand_x),
            ("cand_h", &mut self.cand_h),
        ]
    }

    pub fn in_channels(&self) -> usize {
        self.update_x.in_channels
    }

    pub fn hidden_channels(&self) -> usize {
        self.update_x.out_channels
    }

    pub fn validate(&self) -> Result<()> {
        let (cin, hid) = (self.in_channels(), self.hidden_channels());
        for (name, c) in self.named() {
            c.validate()?;
            let want_in = if name.ends_with("_x") { cin } else { hid };
            if c.kernel != 3 || c.in_channels != want_in || c.out_channels != hid {
                return Err(Error::Shape(format!("gru conv {name} has wrong shape")));
            }
        }
        Ok(())
    }
}

/// Intermediate values of one GRU step.
#[derive(Clone, Debug, PartialEq)]
pub struct GruStep {
    pub update: FeatureMap,
    pub reset: FeatureMap,
    pub candidate: FeatureMap,
    pub hidden: FeatureMap,
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn add(a: &FeatureMap, b: &FeatureMap) -> FeatureMap {
    let data = a.data().iter().zip(b.data()).map(|(x, y)| x + y).collect();
    FeatureMap::from_vec(a.height(), a.width(), a.channels(), data).expect("same shape")
}

/// One step, keeping the gates.
pub fn convgru_step_detailed(x: &FeatureMap, h_prev: &FeatureMap, w: &ConvGRUWeights) -> Result<GruStep> {
    w.validate()?;
    if x.height() != h_prev.height() || x.width() != h_prev.width() || h_prev.channels() != w.hidden_channels() {
        return Err(invalid(format!("input {:?} and hidden {:?} shapes disagree", x.shape(), h_prev.shape())));
    }
    let mut update = add(&w.update_x.forward(x)?, &w.update_h.forward(h_prev)?);
    update.map_inplace(sigmoid);
    let mut reset = add(&w.reset_x.forward(x)?, &w.reset_h.forward(h_prev)?);
    reset.map_inplace(sigmoid);
    let gated = FeatureMap::from_vec(
        h_prev.height(),
        h_prev.width(),
        h_prev.channels(),
        reset.data().iter().zip(h_prev.data()).map(|(r, h)| r * h).collect(),
    )?;
    let mut candidate = add(&w.cand_x.forward(x)?, &w.cand_h.forward(&gated)?);
    candidate.map_inplace(f64::tanh);
    let hidden = FeatureMap::from_vec(
        h_prev.height(),
        h_prev.width(),
        h_prev.channels(),
        update
            .data()
            .iter()
            .zip(h_prev.data())
            .zip(candidate.data())
            .map(|((z, h), c)| (1.0 - z) * h + z * c)
            .collect(),
    )?;
    Ok(GruStep { update, reset, candidate, hidden })
}

pub fn convgru_step(x: &FeatureMap, h_prev: &FeatureMap, w: &ConvGRUWeights) -> Result<FeatureMap> {
    Ok(convgru_step_detailed(x, h_prev, w)?.hidden)
}

/// 3x3 conv, ReLU, 1x1 conv to the head's channel count.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeadWeights {
    pub conv3: Conv2d,
    pub conv1: Conv2d,
}

impl HeadWeights {
    pub fn forward(&self, h: &FeatureMap, sigmoid_out: bool) -> Result<FeatureMap> {
        let mut mid = self.conv3.forward(h)?;
        mid.map_inplace(|v| v.max(0.0));
        let mut out = self.conv1.forward(&mid)?;
        if sigmoid_out {
            out.map_inplace(sigmoid);
        }
        Ok(out)
    }
}

/// One head per output, in [`Head::ALL`] order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeadStack {
    pub heads: Vec<HeadWeights>,
}

impl HeadStack {
    pub fn head(&self, h: Head) -> &HeadWeights {
        &self.heads[Head::ALL.iter().position(|x| *x == h).expect("known head")]
    }

    pub fn head_mut(&mut self, h: Head) -> &mut HeadWeights {
        &mut self.heads[Head::ALL.iter().position(|x| *x == h).expect("known head")]
    }

    /// Heads computed from the hidden state of step `t` (1-based).
    pub fn group(t: usize) -> Vec<Head> {
        Head::ALL.into_iter().filter(|h| h.timestep() == t).collect()
    }
}

/// Shared GRU plus per-output heads.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SequentialModel {
    pub gru: ConvGRUWeights,
    pub heads: HeadStack,
}

impl SequentialModel {
    pub fn zeros(cfg: &ModelConfig) -> Self {
        Self {
            gru: ConvGRUWeights::zeros(cfg.in_channels, cfg.hidden_channels),
            heads: HeadStack {
                heads: Head::ALL
                    .iter()
                    .map(|h| HeadWeights {
                        conv3: Conv2d::zeros(3, cfg.hidden_channels, cfg.head_channels),
                        conv1: Conv2d::zeros(1, cfg.head_channels, h.channels()),
                    })
                    .collect(),
            },
        }
    }

    pub fn random(cfg: &ModelConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let gru = ConvGRUWeights::random(cfg.in_channels, cfg.hidden_channels, &mut rng);
        let heads = Head::ALL
            .iter()
            .map(|h| HeadWeights {
                conv3: Conv2d::random(3, cfg.hidden_channels, cfg.head_channels, &mut rng),
                conv1: Conv2d::random(1, cfg.head_channels, h.channels(), &mut rng),
            })
            .collect();
        Self { gru, heads: HeadStack { heads } }
    }

    pub fn config(&self) -> ModelConfig {
        ModelConfig {
            in_channels: self.gru.in_channels(),
            hidden_channels: self.gru.hidden_channels(),
            head_channels: self.heads.heads.first().map_or(0, |h| h.conv3.out_channels),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.gru.validate()?;
        if self.heads.heads.len() != Head::ALL.len() {
            return Err(Error::Shape(format!("expected {} heads", Head::ALL.len())));
        }
        for (head, w) in Head::ALL.iter().zip(&self.heads.heads) {
            w.conv3.validate()?;
            w.conv1.validate()?;
            let ok = w.conv3.kernel == 3
                && w.conv3.in_channels == self.gru.hidden_channels()
                && w.conv1.kernel == 1
                && w.conv1.in_channels == w.conv3.out_channels
                && w.conv1.out_channels == head.channels();
            if !ok {
                return Err(Error::Shape(format!("head {} has wrong shape", head.name())));
            }
        }
        Ok(())
    }

    pub fn to_bundle(&self) -> TensorBundle {
        let mut b = TensorBundle {
            metadata: serde_json::to_value(self.config()).expect("config serializes"),
            ..Default::default()
        };
        let mut push = |name: String, c: &Conv2d| {
            b.push(format!("{name}.weight"), vec![c.out_channels, c.kernel, c.kernel, c.in_channels], c.weight.clone());
            b.push(format!("{name}.bias"), vec![c.out_channels], c.bias.clone());
        };
        for (name, c) in self.gru.named() {
            push(format!("gru.{name}"), c);
        }
        for (head, w) in Head::ALL.iter().zip(&self.heads.heads) {
            push(format!("head.{}.conv3", head.name()), &w.conv3);
            push(format!("head.{}.conv1", head.name()), &w.conv1);
        }
        b
    }

    pub fn from_bundle(bundle: &TensorBundle) -> Result<Self> {
        let cfg: ModelConfig = serde_json::from_value(bundle.metadata.clone())?;
        let mut model = Self::zeros(&cfg);
        let load = |name: String, c: &mut Conv2d| -> Result<()> {
            let (shape, w) = bundle.get(&format!("{name}.weight"))?;
            if shape != [c.out_channels, c.kernel, c.kernel, c.in_channels] {
                return Err(Error::Shape(format!("{name}.weight has shape {shape:?}")));
            }
            c.weight = w.to_vec();
            let (shape, b) = bundle.get(&format!("{name}.bias"))?;
            if shape != [c.out_channels] {
                return Err(Error::Shape(format!("{name}.bias has shape {shape:?}")));
            }
            c.bias = b.to_vec();
            Ok(())
        };
        for (name, c) in model.gru.named_mut() {
            load(format!("gru.{name}"), c)?;
        }
        for (head, w) in Head::ALL.iter().zip(model.heads.heads.iter_mut()) {
            load(format!("head.{}.conv3", head.name()), &mut w.conv3)?;
            load(format!("head.{}.conv1", head.name()), &mut w.conv1)?;
        }
        model.validate()?;
        Ok(model)
    }
}

/// Runs the three steps; returns the maps and the hidden states `h1..h3`.
pub fn run_sequential_heads_with_states(
    feature: &FeatureMap,
    model: &SequentialModel,
) -> Result<(OutputMaps, Vec<FeatureMap>)> {
    model.validate()?;
    if feature.channels() != model.gru.in_channels() {
        return Err(invalid(format!(
            "feature has {} channels, model expects {}",
            feature.channels(),
            model.gru.in_channels()
        )));
    }
    let mut maps = OutputMaps::zeros(feature.height(), feature.width());
    let mut h = FeatureMap::zeros(feature.height(), feature.width(), model.gru.hidden_channels());
    let mut states = Vec::with_capacity(NUM_TIMESTEPS);
    for t in 1..=NUM_TIMESTEPS {
        h = convgru_step(feature, &h, &model.gru)?;
        for head in HeadStack::group(t) {
            *maps.get_mut(head) = model.heads.head(head).forward(&h, head.is_heatmap())?;
        }
        states.push(h.clone());
    }
    Ok((maps, states))
}

pub fn run_sequential_heads(feature: &FeatureMap, model: &SequentialModel) -> Result<OutputMaps> {
    Ok(run_sequential_heads_with_states(feature, model)?.0)
}
