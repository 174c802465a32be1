//! The Moka model family: an encoder/decoder trunk with long-range dense
//! links and three classification heads (left ID, right ID, lane count).
//!
//! Per level the encoder applies a shape-preserving 3x3 conv, ReLU and an
//! exact 2x2 mean-pool; the conv-LSTM variant then runs a convolutional
//! memory cell on the pooled maps. The decoder mirrors the levels with
//! nearest-neighbor upsampling, concatenating every previously produced map
//! of the target resolution (the dense links) before its conv. The final
//! full-resolution maps are global-average-pooled into the head input; the
//! std-LSTM variant inserts one vector LSTM cell per head in front of its
//! fully connected block.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{err_invalid, err_shape};
use crate::graph::{Gradients, Graph, NodeId};
use crate::objective::HeadNodes;
use crate::optim::ParamSet;
use crate::rng::Rng;
use crate::tensor::Tensor;
use crate::{math, Result};

/// Which recurrence the model carries.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "kebab-case"))]
pub enum Variant {
    /// No state; every frame is independent.
    Basic,
    /// One vector LSTM cell per classification head.
    StdLstm,
    /// One convolutional LSTM cell per encoder level.
    ConvLstm,
}

impl Variant {
    pub fn name(&self) -> &'static str {
        match self {
            Variant::Basic => "basic",
            Variant::StdLstm => "std-lstm",
            Variant::ConvLstm => "conv-lstm",
        }
    }
}

impl core::str::FromStr for Variant {
    type Err = String;

    fn from_str(s: &str) -> core::result::Result<Self, String> {
        match s {
            "basic" => Ok(Variant::Basic),
            "std-lstm" => Ok(Variant::StdLstm),
            "conv-lstm" => Ok(Variant::ConvLstm),
            other => Err(format!("unknown variant {other:?} (expected basic | std-lstm | conv-lstm)")),
        }
    }
}

/// Architecture hyperparameters.
#[derive(Debug, Clone, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct ModelConfig {
    pub variant: Variant,
    pub input_height: usize,
    pub input_width: usize,
    /// Number of encoder/decoder levels; each halves the resolution.
    pub levels: usize,
    /// Feature channels per level, outermost first.
    pub channels: Vec<usize>,
    pub head_hidden: usize,
    /// Classes per head.
    pub classes: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            variant: Variant::ConvLstm,
            input_height: 64,
            input_width: 128,
            levels: 3,
            channels: vec![12, 24, 48],
            head_hidden: 64,
            classes: 8,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.levels < 2 {
            return Err(err_invalid!("model_config", "levels must be >= 2, got {}", self.levels));
        }
        if self.channels.len() != self.levels {
            return Err(err_invalid!(
                "model_config",
                "{} channel entries for {} levels",
                self.channels.len(),
                self.levels
            ));
        }
        if self.channels.iter().any(|&c| c == 0) {
            return Err(err_invalid!("model_config", "channel counts must be positive"));
        }
        let div = 1usize << self.levels;
        if self.input_height % div != 0 || self.input_width % div != 0 {
            return Err(err_invalid!(
                "model_config",
                "input {}x{} must be divisible by 2^levels = {div}",
                self.input_height,
                self.input_width
            ));
        }
        if self.head_hidden == 0 || self.classes < 2 {
            return Err(err_invalid!("model_config", "head_hidden and classes must be positive"));
        }
        Ok(())
    }

    /// Spatial dims after `level` halvings.
    fn dims_at(&self, level: usize) -> (usize, usize) {
        (self.input_height >> level, self.input_width >> level)
    }

    /// Channel count entering the head blocks.
    fn head_input(&self) -> usize {
        match self.variant {
            Variant::StdLstm => self.head_hidden,
            _ => self.channels[0],
        }
    }
}

/// Per-level convolutional cell state.
#[derive(Debug, Clone, PartialEq)]
pub struct CellState {
    pub h: Tensor,
    pub c: Tensor,
}

/// Recurrent state threaded across the frames of one stream.
#[derive(Debug, Clone, PartialEq)]
pub struct RecurrentState {
    /// Per-level spatial cells (conv-LSTM variant only).
    pub cells: Vec<CellState>,
    /// Per-head vector cells (std-LSTM variant only), in left/right/count order.
    pub head_cells: Vec<CellState>,
    pub frame_index: usize,
}

/// Three probability vectors for one frame.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelOutput {
    pub left_probs: Vec<f64>,
    pub right_probs: Vec<f64>,
    pub count_probs: Vec<f64>,
}

/// All-zero state matching the config; the sequence-boundary reset.
pub fn reset_state(config: &ModelConfig) -> RecurrentState {
    let mut cells = Vec::new();
    let mut head_cells = Vec::new();
    match config.variant {
        Variant::ConvLstm => {
            for level in 1..=config.levels {
                let (h, w) = config.dims_at(level);
                let shape = [config.channels[level - 1], h, w];
                cells.push(CellState { h: Tensor::zeros(&shape), c: Tensor::zeros(&shape) });
            }
        }
        Variant::StdLstm => {
            for _ in 0..3 {
                head_cells.push(CellState {
                    h: Tensor::zeros(&[config.head_hidden]),
                    c: Tensor::zeros(&[config.head_hidden]),
                });
            }
        }
        Variant::Basic => {}
    }
    RecurrentState { cells, head_cells, frame_index: 0 }
}

const HEAD_NAMES: [&str; 3] = ["left", "right", "count"];
const GATE_NAMES: [&str; 4] = ["i", "f", "c", "o"];

/// Parameter names and shapes in their canonical order, as produced by
/// [`init_params`] and stored in checkpoints.
pub fn parameter_spec(config: &ModelConfig) -> Vec<(String, Vec<usize>)> {
    let mut out = Vec::new();
    let mut push = |name: String, shape: &[usize]| out.push((name, shape.to_vec()));

    let mut in_ch = 3;
    for level in 1..=config.levels {
        let ch = config.channels[level - 1];
        push(format!("enc{level}.w"), &[ch, in_ch, 3, 3]);
        push(format!("enc{level}.b"), &[ch]);
        if config.variant == Variant::ConvLstm {
            for gate in GATE_NAMES {
                push(format!("cell{level}.wx{gate}"), &[ch, ch, 3, 3]);
                push(format!("cell{level}.wh{gate}"), &[ch, ch, 3, 3]);
            }
            for gate in GATE_NAMES {
                push(format!("cell{level}.b{gate}"), &[ch]);
            }
        }
        in_ch = ch;
    }

    // Decoder step producing the map at resolution `level`. The skip width
    // counts every map registered at that resolution: image at level 0,
    // trunk features (plus the cell output for conv-LSTM) elsewhere. The
    // decoder enters on the concatenated bottom-resolution maps.
    let res_width = |level: usize| {
        let base = config.channels[level - 1];
        if config.variant == Variant::ConvLstm {
            2 * base
        } else {
            base
        }
    };
    for level in (0..config.levels).rev() {
        let up_ch = if level + 1 == config.levels {
            res_width(config.levels)
        } else {
            self_dec_channels(config, level + 1)
        };
        let skip_ch = if level == 0 { 3 } else { res_width(level) };
        let out_ch = self_dec_channels(config, level);
        push(format!("dec{level}.w"), &[out_ch, up_ch + skip_ch, 3, 3]);
        push(format!("dec{level}.b"), &[out_ch]);
    }

    let feat = config.channels[0];
    for head in HEAD_NAMES {
        if config.variant == Variant::StdLstm {
            for gate in GATE_NAMES {
                push(format!("head.{head}.lstm.wx{gate}"), &[config.head_hidden, feat]);
                push(format!("head.{head}.lstm.wh{gate}"), &[config.head_hidden, config.head_hidden]);
            }
            for gate in GATE_NAMES {
                push(format!("head.{head}.lstm.b{gate}"), &[config.head_hidden]);
            }
        }
        push(format!("head.{head}.fc1.w"), &[config.head_hidden, config.head_input()]);
        push(format!("head.{head}.fc1.b"), &[config.head_hidden]);
        push(format!("head.{head}.fc2.w"), &[config.classes, config.head_hidden]);
        push(format!("head.{head}.fc2.b"), &[config.classes]);
    }
    out
}

/// Decoder output channels at a resolution level.
fn self_dec_channels(config: &ModelConfig, level: usize) -> usize {
    if level == 0 {
        config.channels[0]
    } else {
        config.channels[level - 1]
    }
}

/// Fan-in-scaled uniform initialization, deterministic in `seed`. Weight
/// tensors draw from U(-a, a) with `a = 1/sqrt(fan_in)` (std a/sqrt(3));
/// biases start at zero except the recurrent forget gates, which start at
/// +1 so the cells retain memory from the first frames on.
pub fn init_params(config: &ModelConfig, seed: u64) -> Result<ParamSet> {
    config.validate()?;
    let mut rng = Rng::derive(seed, 0x6d6f_6b61);
    let mut params = ParamSet::new();
    for (name, shape) in parameter_spec(config) {
        let tensor = if shape.len() == 1 {
            if name.ends_with(".bf") {
                Tensor::full(&shape, 1.0)
            } else {
                Tensor::zeros(&shape)
            }
        } else {
            let fan_in: usize = shape[1..].iter().product();
            let a = 1.0 / math::sqrt(fan_in as f64);
            let numel: usize = shape.iter().product();
            let data: Vec<f64> = (0..numel).map(|_| rng.range_f64(-a, a)).collect();
            Tensor::new(&shape, data)?
        };
        params.add(&name, tensor)?;
    }
    Ok(params)
}

/// Graph leaves for every parameter, in parameter order.
pub struct ParamNodes {
    nodes: Vec<NodeId>,
}

pub fn bind_params(g: &mut Graph, params: &ParamSet) -> ParamNodes {
    ParamNodes { nodes: params.iter().map(|p| g.leaf(p.value.clone())).collect() }
}

impl ParamNodes {
    fn get(&self, params: &ParamSet, name: &str) -> Result<NodeId> {
        params
            .id_of(name)
            .map(|id| self.nodes[id])
            .ok_or_else(|| err_invalid!("model", "missing parameter {name:?}"))
    }

    /// Pulls every parameter gradient out of a backward pass and accumulates
    /// it into the set, in parameter order.
    pub fn accumulate_grads(&self, params: &mut ParamSet, grads: &mut Gradients) -> Result<()> {
        for (id, &node) in self.nodes.iter().enumerate() {
            if let Some(g) = grads.take(node) {
                params.accumulate_grad(id, &g)?;
            }
        }
        Ok(())
    }

    /// Pulls every parameter gradient out of a backward pass, indexed by
    /// parameter id; parameters the loss never touched yield `None`.
    pub fn take_grads(&self, grads: &mut Gradients) -> Vec<Option<Tensor>> {
        self.nodes.iter().map(|&node| grads.take(node)).collect()
    }
}

/// Graph-side recurrent state for one stream.
#[derive(Debug, Clone)]
pub struct StateNodes {
    pub cells: Vec<(NodeId, NodeId)>,
    pub head_cells: Vec<(NodeId, NodeId)>,
    pub frame_index: usize,
}

/// Inserts the state tensors as graph leaves.
pub fn bind_state(g: &mut Graph, state: &RecurrentState) -> StateNodes {
    StateNodes {
        cells: state.cells.iter().map(|cs| (g.leaf(cs.h.clone()), g.leaf(cs.c.clone()))).collect(),
        head_cells: state
            .head_cells
            .iter()
            .map(|cs| (g.leaf(cs.h.clone()), g.leaf(cs.c.clone())))
            .collect(),
        frame_index: state.frame_index,
    }
}

/// Reads the state tensors back out of the graph.
pub fn extract_state(g: &Graph, nodes: &StateNodes) -> RecurrentState {
    RecurrentState {
        cells: nodes
            .cells
            .iter()
            .map(|&(h, c)| CellState { h: g.value(h).clone(), c: g.value(c).clone() })
            .collect(),
        head_cells: nodes
            .head_cells
            .iter()
            .map(|&(h, c)| CellState { h: g.value(h).clone(), c: g.value(c).clone() })
            .collect(),
        frame_index: nodes.frame_index,
    }
}

/// Named weights of one convolutional LSTM cell.
#[derive(Debug, Clone, Copy)]
pub struct CellWeightNodes {
    pub wxi: NodeId,
    pub whi: NodeId,
    pub wxf: NodeId,
    pub whf: NodeId,
    pub wxc: NodeId,
    pub whc: NodeId,
    pub wxo: NodeId,
    pub who: NodeId,
    pub bi: NodeId,
    pub bf: NodeId,
    pub bc: NodeId,
    pub bo: NodeId,
}

/// One convolutional LSTM step on the tape (3x3 kernels, padding 1):
///
/// ```text
/// i  = sigmoid(Wxi*x + bi + Whi*h)      f = sigmoid(Wxf*x + bf + Whf*h)
/// g  = tanh(Wxc*x + bc + Whc*h)         o = sigmoid(Wxo*x + bo + Who*h)
/// c' = f.c + i.g                        h' = o.tanh(c')
/// ```
pub fn trace_convlstm_cell(
    g: &mut Graph,
    x: NodeId,
    h: NodeId,
    c: NodeId,
    w: &CellWeightNodes,
) -> Result<(NodeId, NodeId)> {
    if !g.value(x).same_shape(g.value(h)) || !g.value(h).same_shape(g.value(c)) {
        return Err(err_shape!(
            "convlstm_cell",
            "x {}, h {}, c {} must agree",
            g.value(x).shape_string(),
            g.value(h).shape_string(),
            g.value(c).shape_string()
        ));
    }
    let gate = |g: &mut Graph, wx, wh, b| -> Result<NodeId> {
        let from_x = g.conv2d(x, wx, Some(b), 1, 1)?;
        let from_h = g.conv2d(h, wh, None, 1, 1)?;
        g.add(from_x, from_h)
    };
    let i_pre = gate(g, w.wxi, w.whi, w.bi)?;
    let i = g.sigmoid(i_pre);
    let f_pre = gate(g, w.wxf, w.whf, w.bf)?;
    let f = g.sigmoid(f_pre);
    let c_pre = gate(g, w.wxc, w.whc, w.bc)?;
    let c_cand = g.tanh(c_pre);
    let o_pre = gate(g, w.wxo, w.who, w.bo)?;
    let o = g.sigmoid(o_pre);

    let keep = g.hadamard(f, c)?;
    let write = g.hadamard(i, c_cand)?;
    let c_new = g.add(keep, write)?;
    let c_act = g.tanh(c_new);
    let h_new = g.hadamard(o, c_act)?;
    Ok((h_new, c_new))
}

/// Value-level weights for a standalone cell evaluation.
#[derive(Debug, Clone)]
pub struct CellWeights {
    pub wxi: Tensor,
    pub whi: Tensor,
    pub wxf: Tensor,
    pub whf: Tensor,
    pub wxc: Tensor,
    pub whc: Tensor,
    pub wxo: Tensor,
    pub who: Tensor,
    pub bi: Tensor,
    pub bf: Tensor,
    pub bc: Tensor,
    pub bo: Tensor,
}

impl CellWeights {
    /// All-zero weights for a cell over `ch`-channel maps.
    pub fn zeros(ch: usize) -> Self {
        let w = || Tensor::zeros(&[ch, ch, 3, 3]);
        let b = || Tensor::zeros(&[ch]);
        CellWeights {
            wxi: w(),
            whi: w(),
            wxf: w(),
            whf: w(),
            wxc: w(),
            whc: w(),
            wxo: w(),
            who: w(),
            bi: b(),
            bf: b(),
            bc: b(),
            bo: b(),
        }
    }
}

/// Standalone convolutional LSTM step over plain tensors.
pub fn convlstm_cell(x: &Tensor, h: &Tensor, c: &Tensor, w: &CellWeights) -> Result<(Tensor, Tensor)> {
    let mut g = Graph::new();
    let xn = g.leaf(x.clone());
    let hn = g.leaf(h.clone());
    let cn = g.leaf(c.clone());
    let nodes = CellWeightNodes {
        wxi: g.leaf(w.wxi.clone()),
        whi: g.leaf(w.whi.clone()),
        wxf: g.leaf(w.wxf.clone()),
        whf: g.leaf(w.whf.clone()),
        wxc: g.leaf(w.wxc.clone()),
        whc: g.leaf(w.whc.clone()),
        wxo: g.leaf(w.wxo.clone()),
        who: g.leaf(w.who.clone()),
        bi: g.leaf(w.bi.clone()),
        bf: g.leaf(w.bf.clone()),
        bc: g.leaf(w.bc.clone()),
        bo: g.leaf(w.bo.clone()),
    };
    let (hn2, cn2) = trace_convlstm_cell(&mut g, xn, hn, cn, &nodes)?;
    Ok((g.value(hn2).clone(), g.value(cn2).clone()))
}

fn cell_weight_nodes(pn: &ParamNodes, params: &ParamSet, prefix: &str) -> Result<CellWeightNodes> {
    Ok(CellWeightNodes {
        wxi: pn.get(params, &format!("{prefix}.wxi"))?,
        whi: pn.get(params, &format!("{prefix}.whi"))?,
        wxf: pn.get(params, &format!("{prefix}.wxf"))?,
        whf: pn.get(params, &format!("{prefix}.whf"))?,
        wxc: pn.get(params, &format!("{prefix}.wxc"))?,
        whc: pn.get(params, &format!("{prefix}.whc"))?,
        wxo: pn.get(params, &format!("{prefix}.wxo"))?,
        who: pn.get(params, &format!("{prefix}.who"))?,
        bi: pn.get(params, &format!("{prefix}.bi"))?,
        bf: pn.get(params, &format!("{prefix}.bf"))?,
        bc: pn.get(params, &format!("{prefix}.bc"))?,
        bo: pn.get(params, &format!("{prefix}.bo"))?,
    })
}

/// One vector LSTM step composed from linear ops (used by the std-LSTM heads).
fn trace_vec_lstm(
    g: &mut Graph,
    x: NodeId,
    h: NodeId,
    c: NodeId,
    pn: &ParamNodes,
    params: &ParamSet,
    prefix: &str,
) -> Result<(NodeId, NodeId)> {
    let gate = |g: &mut Graph, name: &str| -> Result<NodeId> {
        let wx = pn.get(params, &format!("{prefix}.wx{name}"))?;
        let wh = pn.get(params, &format!("{prefix}.wh{name}"))?;
        let b = pn.get(params, &format!("{prefix}.b{name}"))?;
        let from_x = g.linear(x, wx, Some(b))?;
        let from_h = g.linear(h, wh, None)?;
        g.add(from_x, from_h)
    };
    let i_pre = gate(g, "i")?;
    let i = g.sigmoid(i_pre);
    let f_pre = gate(g, "f")?;
    let f = g.sigmoid(f_pre);
    let c_pre = gate(g, "c")?;
    let c_cand = g.tanh(c_pre);
    let o_pre = gate(g, "o")?;
    let o = g.sigmoid(o_pre);
    let keep = g.hadamard(f, c)?;
    let write = g.hadamard(i, c_cand)?;
    let c_new = g.add(keep, write)?;
    let c_act = g.tanh(c_new);
    let h_new = g.hadamard(o, c_act)?;
    Ok((h_new, c_new))
}

fn check_state(config: &ModelConfig, state: &StateNodes, g: &Graph) -> Result<()> {
    match config.variant {
        Variant::ConvLstm => {
            if state.cells.len() != config.levels {
                return Err(err_invalid!(
                    "forward",
                    "state has {} cells, config wants {}",
                    state.cells.len(),
                    config.levels
                ));
            }
            for (level, &(h, _)) in state.cells.iter().enumerate() {
                let (dh, dw) = config.dims_at(level + 1);
                let want = [config.channels[level], dh, dw];
                if g.value(h).shape() != want {
                    return Err(err_shape!(
                        "forward",
                        "cell {level} state is {}, config wants {want:?}",
                        g.value(h).shape_string()
                    ));
                }
            }
        }
        Variant::StdLstm => {
            if state.head_cells.len() != 3 {
                return Err(err_invalid!(
                    "forward",
                    "state has {} head cells, std-lstm wants 3",
                    state.head_cells.len()
                ));
            }
        }
        Variant::Basic => {
            if !state.cells.is_empty() || !state.head_cells.is_empty() {
                return Err(err_invalid!("forward", "basic variant carries no state"));
            }
        }
    }
    Ok(())
}

/// Builds one frame's forward pass on the tape. `image` must be `[3, H, W]`
/// with values in [0, 1]. Returns the head probability nodes and the state
/// nodes for the next frame.
pub fn trace_forward(
    g: &mut Graph,
    pn: &ParamNodes,
    params: &ParamSet,
    config: &ModelConfig,
    state: &StateNodes,
    image: &Tensor,
) -> Result<(HeadNodes, StateNodes)> {
    config.validate()?;
    check_state(config, state, g)?;
    let want = [3, config.input_height, config.input_width];
    if image.shape() != want {
        return Err(err_shape!(
            "forward",
            "image is {}, config wants {want:?}",
            image.shape_string()
        ));
    }
    if image.data().iter().any(|&v| !(0.0..=1.0).contains(&v)) {
        return Err(err_invalid!("forward", "image values must lie in [0, 1]"));
    }

    let image_node = g.leaf(image.clone());
    // Dense links: every map produced at a resolution, keyed by level.
    let mut maps_at: Vec<Vec<NodeId>> = vec![Vec::new(); config.levels + 1];
    maps_at[0].push(image_node);

    let mut next = StateNodes {
        cells: Vec::new(),
        head_cells: Vec::new(),
        frame_index: state.frame_index + 1,
    };

    // Encoder. The trunk is purely feedforward; a conv-LSTM cell sits after
    // each level's trunk convolution and its output joins the dense links,
    // so temporal state reaches the decoder without gating the spatial
    // feature path.
    let mut cur = image_node;
    for level in 1..=config.levels {
        let w = pn.get(params, &format!("enc{level}.w"))?;
        let b = pn.get(params, &format!("enc{level}.b"))?;
        let conv = g.conv2d(cur, w, Some(b), 1, 1)?;
        let act = g.relu(conv);
        cur = g.avg_pool2x(act)?;
        maps_at[level].push(cur);
        if config.variant == Variant::ConvLstm {
            let weights = cell_weight_nodes(pn, params, &format!("cell{level}"))?;
            let (h_prev, c_prev) = state.cells[level - 1];
            let (h_new, c_new) = trace_convlstm_cell(g, cur, h_prev, c_prev, &weights)?;
            next.cells.push((h_new, c_new));
            maps_at[level].push(h_new);
        }
    }

    // Decoder with dense links: every step consumes the upsampled current
    // map concatenated with all maps produced at the target resolution. The
    // entry point is the concatenation of the bottom resolution's maps.
    let mut cur = g.concat_channels(&maps_at[config.levels])?;
    for level in (0..config.levels).rev() {
        let up = g.upsample2x(cur)?;
        let mut inputs = vec![up];
        inputs.extend_from_slice(&maps_at[level]);
        let cat = g.concat_channels(&inputs)?;
        let w = pn.get(params, &format!("dec{level}.w"))?;
        let b = pn.get(params, &format!("dec{level}.b"))?;
        let conv = g.conv2d(cat, w, Some(b), 1, 1)?;
        cur = g.relu(conv);
        maps_at[level].push(cur);
    }

    let feat = g.global_avg_pool(cur)?;

    // Heads.
    let mut head_probs = [None, None, None];
    for (hi, head) in HEAD_NAMES.iter().enumerate() {
        let mut input = feat;
        if config.variant == Variant::StdLstm {
            let (h_prev, c_prev) = state.head_cells[hi];
            let (h_new, c_new) =
                trace_vec_lstm(g, feat, h_prev, c_prev, pn, params, &format!("head.{head}.lstm"))?;
            next.head_cells.push((h_new, c_new));
            input = h_new;
        }
        let fc1w = pn.get(params, &format!("head.{head}.fc1.w"))?;
        let fc1b = pn.get(params, &format!("head.{head}.fc1.b"))?;
        let z = g.linear(input, fc1w, Some(fc1b))?;
        let z = g.relu(z);
        let fc2w = pn.get(params, &format!("head.{head}.fc2.w"))?;
        let fc2b = pn.get(params, &format!("head.{head}.fc2.b"))?;
        let logits = g.linear(z, fc2w, Some(fc2b))?;
        head_probs[hi] = Some(g.softmax(logits)?);
    }

    // Variants without a given kind of state return it unchanged.
    if config.variant != Variant::ConvLstm {
        next.cells = state.cells.clone();
    }
    if config.variant != Variant::StdLstm {
        next.head_cells = state.head_cells.clone();
    }

    let heads = HeadNodes {
        left: head_probs[0].expect("filled"),
        right: head_probs[1].expect("filled"),
        count: head_probs[2].expect("filled"),
    };
    Ok((heads, next))
}

/// One evaluation step over plain tensors: runs [`trace_forward`] on a fresh
/// tape and extracts the outputs and next state.
pub fn forward_frame(
    params: &ParamSet,
    config: &ModelConfig,
    state: &RecurrentState,
    image: &Tensor,
) -> Result<(ModelOutput, RecurrentState)> {
    let mut g = Graph::new();
    let pn = bind_params(&mut g, params);
    let sn = bind_state(&mut g, state);
    let (heads, next) = trace_forward(&mut g, &pn, params, config, &sn, image)?;
    let output = ModelOutput {
        left_probs: g.value(heads.left).data().to_vec(),
        right_probs: g.value(heads.right).data().to_vec(),
        count_probs: g.value(heads.count).data().to_vec(),
    };
    Ok((output, extract_state(&g, &next)))
}
