//! Teacher encoder–decoder and compact student, both exposing the
//! early/middle/late feature taps and per-stage predictive maps.
//!
//! Encoder block `i` is `conv3×3 → relu → conv3×3 → relu → max_pool2`; its
//! pooled output is tap `i`. Block 0 is the early tap, blocks `1..=N` the
//! middle taps and block `N+1` the late tap.
//!
//! The teacher decodes the late tap with `N+1` upsampling blocks that
//! concatenate the next-shallower encoder tap. A 1×1 head on the bottleneck
//! and on every decoder block yields `N+2` predictive maps: the bottleneck is
//! `p_early`, the first `N` decoder stages are `p_mid`, and the last stage,
//! resized to the input, is `p_late`.
//!
//! The student has no decoder. Each encoder tap carries its own 1×1 head; the
//! late head resized to the input is the segmentation output.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{HlfdError, Result};
use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

pub const TEACHER_CHANNELS: [usize; 4] = [16, 32, 64, 128];
pub const STUDENT_CHANNELS: [usize; 4] = [8, 16, 32, 64];

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct NetConfig {
    /// One entry per encoder block: early, `num_mid` middle blocks, late.
    pub encoder_channels: Vec<usize>,
    pub num_mid: usize,
    pub num_classes: usize,
    pub in_channels: usize,
    pub input_size: (usize, usize),
    pub seed: u64,
}

impl NetConfig {
    pub fn teacher() -> Self {
        NetConfig {
            encoder_channels: TEACHER_CHANNELS.to_vec(),
            num_mid: 2,
            num_classes: 2,
            in_channels: 1,
            input_size: (64, 64),
            seed: 0,
        }
    }

    pub fn student() -> Self {
        NetConfig {
            encoder_channels: STUDENT_CHANNELS.to_vec(),
            ..Self::teacher()
        }
    }

    pub fn num_blocks(&self) -> usize {
        self.num_mid + 2
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_mid < 1 {
            return Err(HlfdError::invalid("need at least one middle block"));
        }
        if self.encoder_channels.len() != self.num_blocks() {
            return Err(HlfdError::invalid(format!(
                "encoder_channels has {} entries, expected num_mid + 2 = {}",
                self.encoder_channels.len(),
                self.num_blocks()
            )));
        }
        if self.encoder_channels.iter().any(|&c| c == 0) || self.num_classes < 2 || self.in_channels == 0 {
            return Err(HlfdError::invalid("channel counts must be positive and num_classes >= 2"));
        }
        let div = 1usize << self.num_blocks();
        let (h, w) = self.input_size;
        if h == 0 || w == 0 || h % div != 0 || w % div != 0 {
            return Err(HlfdError::invalid(format!(
                "input size {h}x{w} not divisible by 2^{} = {div}",
                self.num_blocks()
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NetKind {
    Teacher,
    Student,
}

impl NetKind {
    pub fn as_str(self) -> &'static str {
        match self {
            NetKind::Teacher => "teacher",
            NetKind::Student => "student",
        }
    }
}

/// Named parameter tensors in a fixed order.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamSet {
    pub names: Vec<String>,
    pub tensors: Vec<Tensor>,
}

impl ParamSet {
    fn new() -> Self {
        ParamSet {
            names: Vec::new(),
            tensors: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn count(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    fn push(&mut self, name: String, t: Tensor) -> usize {
        self.names.push(name);
        self.tensors.push(t);
        self.tensors.len() - 1
    }

    fn conv(&mut self, name: &str, c_in: usize, c_out: usize, k: usize, rng: &mut ChaCha8Rng) -> Conv {
        let fan_in = (c_in * k * k) as f64;
        let w = Tensor::randn(&[c_out, c_in, k, k], (2.0 / fan_in).sqrt(), rng);
        let weight = self.push(format!("{name}.weight"), w);
        let bias = self.push(format!("{name}.bias"), Tensor::zeros(&[c_out]));
        Conv { weight, bias, padding: k / 2 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
struct Conv {
    weight: usize,
    bias: usize,
    padding: usize,
}

impl Conv {
    fn apply(&self, g: &mut Graph, p: &[Var], x: Var) -> Result<Var> {
        g.conv2d(x, p[self.weight], p[self.bias], 1, self.padding)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
struct Block {
    conv1: Conv,
    conv2: Conv,
}

impl Block {
    fn apply(&self, g: &mut Graph, p: &[Var], x: Var) -> Result<Var> {
        let h = self.conv1.apply(g, p, x)?;
        let h = g.relu(h)?;
        let h = self.conv2.apply(g, p, h)?;
        g.relu(h)
    }
}

fn build_encoder(cfg: &NetConfig, params: &mut ParamSet, rng: &mut ChaCha8Rng) -> Vec<Block> {
    let mut c_in = cfg.in_channels;
    cfg.encoder_channels
        .iter()
        .enumerate()
        .map(|(i, &c)| {
            let b = Block {
                conv1: params.conv(&format!("enc{i}.conv1"), c_in, c, 3, rng),
                conv2: params.conv(&format!("enc{i}.conv2"), c, c, 3, rng),
            };
            c_in = c;
            b
        })
        .collect()
}

/// Encoder feature taps.
#[derive(Clone, Debug)]
pub struct FeatureTaps {
    pub z_early: Var,
    pub z_mid: Vec<Var>,
    pub z_late: Var,
}

/// Per-stage class-probability maps.
#[derive(Clone, Debug)]
pub struct PredictiveTaps {
    pub p_early: Var,
    pub p_mid: Vec<Var>,
    pub p_late: Var,
}

#[derive(Clone, Debug)]
pub struct NetOutput {
    pub features: FeatureTaps,
    pub predictions: PredictiveTaps,
    /// Full-resolution class logits.
    pub logits: Var,
    /// Head logits at each stage's native resolution, ordered early, mid…, late.
    pub stage_logits: Vec<Var>,
}

/// How parameters enter the graph.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamMode {
    Trainable,
    Frozen,
}

pub trait SegNet: Sync {
    fn kind(&self) -> NetKind;
    fn config(&self) -> &NetConfig;
    fn params(&self) -> &ParamSet;
    fn params_mut(&mut self) -> &mut ParamSet;
    /// Runs the network given the already-bound parameter vars.
    fn forward_bound(&self, g: &mut Graph, params: &[Var], x: Var) -> Result<NetOutput>;
}

fn check_input<N: SegNet + ?Sized>(net: &N, x: &Tensor) -> Result<()> {
    let cfg = net.config();
    let (_, c, h, w) = x.dims4("forward_taps")?;
    if c != cfg.in_channels || (h, w) != cfg.input_size {
        return Err(HlfdError::shape(
            "forward_taps",
            format!(
                "input {:?} does not match {} channel(s) at {}x{}",
                x.shape(),
                cfg.in_channels,
                cfg.input_size.0,
                cfg.input_size.1
            ),
        ));
    }
    Ok(())
}

/// Binds the parameters onto `g` and runs the network on `x`.
/// Returns the output taps and the parameter vars in [`ParamSet`] order.
pub fn forward_taps<N: SegNet + ?Sized>(
    net: &N,
    g: &mut Graph,
    x: Var,
    mode: ParamMode,
) -> Result<(NetOutput, Vec<Var>)> {
    check_input(net, g.value(x))?;
    let params: Vec<Var> = net
        .params()
        .tensors
        .iter()
        .map(|t| match mode {
            ParamMode::Trainable => g.param(t.clone()),
            ParamMode::Frozen => g.constant(t.clone()),
        })
        .collect();
    let out = net.forward_bound(g, &params, x)?;
    Ok((out, params))
}

/// Gradient-free forward returning the full-resolution logits.
pub fn predict_logits<N: SegNet + ?Sized>(net: &N, x: &Tensor) -> Result<Tensor> {
    let mut g = Graph::new();
    let xv = g.constant(x.clone());
    let (out, _) = forward_taps(net, &mut g, xv, ParamMode::Frozen)?;
    Ok(g.value(out.logits).clone())
}

fn encode(blocks: &[Block], g: &mut Graph, p: &[Var], x: Var) -> Result<Vec<Var>> {
    let mut taps = Vec::with_capacity(blocks.len());
    let mut h = x;
    for b in blocks {
        let a = b.apply(g, p, h)?;
        h = g.max_pool2(a)?;
        taps.push(h);
    }
    Ok(taps)
}

fn split_taps(taps: &[Var]) -> FeatureTaps {
    let n = taps.len();
    FeatureTaps {
        z_early: taps[0],
        z_mid: taps[1..n - 1].to_vec(),
        z_late: taps[n - 1],
    }
}

#[derive(Clone, Debug)]
pub struct TeacherNet {
    cfg: NetConfig,
    params: ParamSet,
    encoder: Vec<Block>,
    decoder: Vec<Block>,
    heads: Vec<Conv>,
}

pub fn build_teacher(cfg: &NetConfig) -> Result<TeacherNet> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut params = ParamSet::new();
    let encoder = build_encoder(cfg, &mut params, &mut rng);
    let ch = &cfg.encoder_channels;
    let n = cfg.num_mid;
    let k = cfg.num_classes;
    let mut heads = vec![params.conv("head0", ch[n + 1], k, 1, &mut rng)];
    let mut decoder = Vec::with_capacity(n + 1);
    let mut c_prev = ch[n + 1];
    for j in 0..=n {
        let skip_c = ch[n - j];
        decoder.push(Block {
            conv1: params.conv(&format!("dec{j}.conv1"), c_prev + skip_c, skip_c, 3, &mut rng),
            conv2: params.conv(&format!("dec{j}.conv2"), skip_c, skip_c, 3, &mut rng),
        });
        heads.push(params.conv(&format!("head{}", j + 1), skip_c, k, 1, &mut rng));
        c_prev = skip_c;
    }
    Ok(TeacherNet {
        cfg: cfg.clone(),
        params,
        encoder,
        decoder,
        heads,
    })
}

impl SegNet for TeacherNet {
    fn kind(&self) -> NetKind {
        NetKind::Teacher
    }

    fn config(&self) -> &NetConfig {
        &self.cfg
    }

    fn params(&self) -> &ParamSet {
        &self.params
    }

    fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    fn forward_bound(&self, g: &mut Graph, p: &[Var], x: Var) -> Result<NetOutput> {
        let taps = encode(&self.encoder, g, p, x)?;
        let n = self.cfg.num_mid;
        let mut d = taps[n + 1];
        let mut stage_logits = vec![self.heads[0].apply(g, p, d)?];
        for (j, block) in self.decoder.iter().enumerate() {
            let skip = taps[n - j];
            let (_, _, sh, sw) = g.value(skip).dims4("decoder")?;
            let up = g.bilinear_resize(d, sh, sw)?;
            let cat = g.concat_channels(&[up, skip])?;
            d = block.apply(g, p, cat)?;
            stage_logits.push(self.heads[j + 1].apply(g, p, d)?);
        }
        let (h, w) = self.cfg.input_size;
        let logits = g.bilinear_resize(stage_logits[n + 1], h, w)?;
        let p_early = g.softmax_channels(stage_logits[0])?;
        let p_mid = stage_logits[1..=n]
            .iter()
            .map(|&l| g.softmax_channels(l))
            .collect::<Result<Vec<_>>>()?;
        let p_late = g.softmax_channels(logits)?;
        Ok(NetOutput {
            features: split_taps(&taps),
            predictions: PredictiveTaps { p_early, p_mid, p_late },
            logits,
            stage_logits,
        })
    }
}

#[derive(Clone, Debug)]
pub struct StudentNet {
    cfg: NetConfig,
    params: ParamSet,
    encoder: Vec<Block>,
    heads: Vec<Conv>,
}

pub fn build_student(cfg: &NetConfig) -> Result<StudentNet> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut params = ParamSet::new();
    let encoder = build_encoder(cfg, &mut params, &mut rng);
    let heads = cfg
        .encoder_channels
        .iter()
        .enumerate()
        .map(|(i, &c)| params.conv(&format!("head{i}"), c, cfg.num_classes, 1, &mut rng))
        .collect();
    Ok(StudentNet {
        cfg: cfg.clone(),
        params,
        encoder,
        heads,
    })
}

impl SegNet for StudentNet {
    fn kind(&self) -> NetKind {
        NetKind::Student
    }

    fn config(&self) -> &NetConfig {
        &self.cfg
    }

    fn params(&self) -> &ParamSet {
        &self.params
    }

    fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    fn forward_bound(&self, g: &mut Graph, p: &[Var], x: Var) -> Result<NetOutput> {
        let taps = encode(&self.encoder, g, p, x)?;
        let stage_logits = taps
            .iter()
            .zip(&self.heads)
            .map(|(&t, head)| head.apply(g, p, t))
            .collect::<Result<Vec<_>>>()?;
        let last = stage_logits.len() - 1;
        let (h, w) = self.cfg.input_size;
        let logits = g.bilinear_resize(stage_logits[last], h, w)?;
        let p_early = g.softmax_channels(stage_logits[0])?;
        let p_mid = stage_logits[1..last]
            .iter()
            .map(|&l| g.softmax_channels(l))
            .collect::<Result<Vec<_>>>()?;
        let p_late = g.softmax_channels(logits)?;
        Ok(NetOutput {
            features: split_taps(&taps),
            predictions: PredictiveTaps { p_early, p_mid, p_late },
            logits,
            stage_logits,
        })
    }
}

/// Either network, as restored from a checkpoint.
#[derive(Clone, Debug)]
pub enum AnyNet {
    Teacher(TeacherNet),
    Student(StudentNet),
}

impl AnyNet {
    pub fn build(kind: NetKind, cfg: &NetConfig) -> Result<Self> {
        Ok(match kind {
            NetKind::Teacher => AnyNet::Teacher(build_teacher(cfg)?),
            NetKind::Student => AnyNet::Student(build_student(cfg)?),
        })
    }

    pub fn as_net(&self) -> &dyn SegNet {
        match self {
            AnyNet::Teacher(t) => t,
            AnyNet::Student(s) => s,
        }
    }

    pub fn as_net_mut(&mut self) -> &mut dyn SegNet {
        match self {
            AnyNet::Teacher(t) => t,
            AnyNet::Student(s) => s,
        }
    }

    pub fn into_teacher(self) -> Result<TeacherNet> {
        match self {
            AnyNet::Teacher(t) => Ok(t),
            AnyNet::Student(_) => Err(HlfdError::invalid("checkpoint holds a student, expected a teacher")),
        }
    }

    pub fn into_student(self) -> Result<StudentNet> {
        match self {
            AnyNet::Student(s) => Ok(s),
            AnyNet::Teacher(_) => Err(HlfdError::invalid("checkpoint holds a teacher, expected a student")),
        }
    }
}
