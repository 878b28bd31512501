//! Network building blocks on top of the autodiff tape: named parameter
//! store, per-forward parameter binding, and the residual/U-Net stacks used
//! by the separation model.

use std::collections::{BTreeMap, HashMap};

use rand::Rng;
use rand_chacha::ChaCha20Rng;

use crate::autodiff::{NodeId, Tape};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Named parameter tensors in deterministic (sorted) order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    params: BTreeMap<String, Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) {
        let name = name.into();
        assert!(
            self.params.insert(name.clone(), value).is_none(),
            "duplicate parameter {name}"
        );
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.params.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.params.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor)> {
        self.params.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.params.keys()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total number of scalars under a name prefix.
    pub fn scalar_count(&self, prefix: &str) -> usize {
        self.params
            .iter()
            .filter(|(k, _)| k.starts_with(prefix))
            .map(|(_, v)| v.numel())
            .sum()
    }

    /// Overwrite parameters from another store where names match; returns the
    /// matched names. Shapes must agree.
    pub fn load_matching(&mut self, other: &ParamStore) -> Result<Vec<String>> {
        let mut matched = Vec::new();
        for (name, value) in &other.params {
            if let Some(slot) = self.params.get_mut(name) {
                if slot.shape() != value.shape() {
                    return Err(Error::ShapeMismatch {
                        what: format!("parameter {name}"),
                        expected: slot.shape().to_vec(),
                        got: value.shape().to_vec(),
                    });
                }
                *slot = value.clone();
                matched.push(name.clone());
            }
        }
        Ok(matched)
    }
}

/// Which namespaces receive gradients in a forward pass.
#[derive(Debug, Clone)]
pub enum Trainability {
    None,
    All,
    Prefixes(Vec<String>),
}

impl Trainability {
    fn wants(&self, name: &str) -> bool {
        match self {
            Trainability::None => false,
            Trainability::All => true,
            Trainability::Prefixes(ps) => ps.iter().any(|p| name.starts_with(p.as_str())),
        }
    }
}

/// One forward pass: a tape plus lazily-bound parameter leaves, so a
/// parameter used several times shares a single node and accumulates its
/// gradient across uses.
pub struct Session<'s> {
    pub tape: Tape,
    store: &'s ParamStore,
    trainability: Trainability,
    bound: HashMap<String, NodeId>,
}

impl<'s> Session<'s> {
    pub fn new(store: &'s ParamStore, trainability: Trainability) -> Self {
        Session {
            tape: Tape::new(),
            store,
            trainability,
            bound: HashMap::new(),
        }
    }

    pub fn param(&mut self, name: &str) -> NodeId {
        if let Some(&id) = self.bound.get(name) {
            return id;
        }
        let value = self
            .store
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"))
            .clone();
        let rg = self.trainability.wants(name);
        let id = self.tape.leaf(value, rg);
        self.bound.insert(name.to_string(), id);
        id
    }

    /// Run backward from `loss` and gather gradients for all bound trainable
    /// parameters, keyed by name.
    pub fn param_grads(&self, loss: NodeId) -> BTreeMap<String, Tensor> {
        let mut grads = self.tape.backward(loss);
        let mut out = BTreeMap::new();
        for (name, &id) in &self.bound {
            if self.tape.requires_grad(id) {
                if let Some(g) = grads.take(id) {
                    out.insert(name.clone(), g);
                }
            }
        }
        out
    }
}

/// Merge per-example gradient maps by summation, in call order.
pub fn accumulate_grads(
    total: &mut BTreeMap<String, Tensor>,
    part: BTreeMap<String, Tensor>,
) {
    for (name, g) in part {
        match total.get_mut(&name) {
            Some(t) => {
                for (a, b) in t.data_mut().iter_mut().zip(g.data()) {
                    *a += b;
                }
            }
            None => {
                total.insert(name, g);
            }
        }
    }
}

// ---- initialization ---------------------------------------------------------

/// Standard normal sample via Box-Muller (keeps rand_chacha the only RNG dep).
fn normal(rng: &mut ChaCha20Rng) -> f64 {
    let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
    let u2: f64 = rng.gen_range(0.0..1.0);
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

fn he_normal(shape: &[usize], fan_in: usize, rng: &mut ChaCha20Rng) -> Tensor {
    let std = (2.0 / fan_in as f64).sqrt();
    let n: usize = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| std * normal(rng)).collect())
}

// ---- layers -------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct Conv2dLayer {
    pub name: String,
    pub in_ch: usize,
    pub out_ch: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub dilation: usize,
    /// Multiplier on the He initialization (heads that feed logits start
    /// smaller so initial masks sit near probability 0.5).
    pub init_gain: f64,
}

impl Conv2dLayer {
    pub fn init(&self, store: &mut ParamStore, rng: &mut ChaCha20Rng) {
        let fan_in = self.in_ch * self.kernel * self.kernel;
        let mut w = he_normal(
            &[self.out_ch, self.in_ch, self.kernel, self.kernel],
            fan_in,
            rng,
        );
        if self.init_gain != 1.0 {
            for v in w.data_mut() {
                *v *= self.init_gain;
            }
        }
        store.insert(format!("{}.weight", self.name), w);
        store.insert(format!("{}.bias", self.name), Tensor::zeros(&[self.out_ch]));
    }

    pub fn forward(&self, s: &mut Session, x: NodeId) -> NodeId {
        let w = s.param(&format!("{}.weight", self.name));
        let b = s.param(&format!("{}.bias", self.name));
        s.tape.conv2d(x, w, b, self.stride, self.pad, self.dilation)
    }
}

#[derive(Debug, Clone)]
pub struct Conv3dLayer {
    pub name: String,
    pub in_ch: usize,
    pub out_ch: usize,
    pub kernel: (usize, usize),
    pub stride: (usize, usize),
    pub pad: (usize, usize),
}

impl Conv3dLayer {
    pub fn init(&self, store: &mut ParamStore, rng: &mut ChaCha20Rng) {
        let (kt, ks) = self.kernel;
        let fan_in = self.in_ch * kt * ks * ks;
        store.insert(
            format!("{}.weight", self.name),
            he_normal(&[self.out_ch, self.in_ch, kt, ks, ks], fan_in, rng),
        );
        store.insert(format!("{}.bias", self.name), Tensor::zeros(&[self.out_ch]));
    }

    pub fn forward(&self, s: &mut Session, x: NodeId) -> NodeId {
        let w = s.param(&format!("{}.weight", self.name));
        let b = s.param(&format!("{}.bias", self.name));
        s.tape
            .conv3d(x, w, b, self.stride.0, self.stride.1, self.pad.0, self.pad.1)
    }
}

#[derive(Debug, Clone)]
pub struct NormLayer {
    pub name: String,
    pub channels: usize,
}

impl NormLayer {
    /// Channels per normalization group. Groups of up to 8 keep relative
    /// channel amplitudes visible to later layers (identity cues live there)
    /// while staying batch-free.
    fn groups(&self) -> usize {
        let mut g = self.channels.min(8);
        while self.channels % g != 0 {
            g -= 1;
        }
        g
    }

    pub fn init(&self, store: &mut ParamStore) {
        store.insert(
            format!("{}.gain", self.name),
            Tensor::full(&[self.channels], 1.0),
        );
        store.insert(
            format!("{}.bias", self.name),
            Tensor::zeros(&[self.channels]),
        );
    }

    pub fn forward(&self, s: &mut Session, x: NodeId) -> NodeId {
        let g = s.param(&format!("{}.gain", self.name));
        let b = s.param(&format!("{}.bias", self.name));
        s.tape.group_norm(x, g, b, self.groups())
    }
}

fn conv_norm(
    name: &str,
    in_ch: usize,
    out_ch: usize,
    kernel: usize,
    stride: usize,
    pad: usize,
    dilation: usize,
) -> (Conv2dLayer, NormLayer) {
    (
        Conv2dLayer {
            name: format!("{name}.conv"),
            in_ch,
            out_ch,
            kernel,
            stride,
            pad,
            dilation,
            init_gain: 1.0,
        },
        NormLayer {
            name: format!("{name}.norm"),
            channels: out_ch,
        },
    )
}

// ---- residual blocks -------------------------------------------------------------

#[derive(Debug, Clone)]
struct BasicBlock2d {
    c1: Conv2dLayer,
    n1: NormLayer,
    c2: Conv2dLayer,
    n2: NormLayer,
    down: Option<(Conv2dLayer, NormLayer)>,
}

impl BasicBlock2d {
    fn new(name: &str, in_ch: usize, out_ch: usize, stride: usize, dilation: usize) -> Self {
        let (c1, n1) = conv_norm(
            &format!("{name}.a"),
            in_ch,
            out_ch,
            3,
            stride,
            dilation,
            dilation,
        );
        let (c2, n2) = conv_norm(&format!("{name}.b"), out_ch, out_ch, 3, 1, dilation, dilation);
        let down = if stride != 1 || in_ch != out_ch {
            Some(conv_norm(&format!("{name}.down"), in_ch, out_ch, 1, stride, 0, 1))
        } else {
            None
        };
        BasicBlock2d { c1, n1, c2, n2, down }
    }

    fn init(&self, store: &mut ParamStore, rng: &mut ChaCha20Rng) {
        self.c1.init(store, rng);
        self.n1.init(store);
        self.c2.init(store, rng);
        self.n2.init(store);
        if let Some((c, n)) = &self.down {
            c.init(store, rng);
            n.init(store);
        }
    }

    fn forward(&self, s: &mut Session, x: NodeId) -> NodeId {
        let mut h = self.c1.forward(s, x);
        h = self.n1.forward(s, h);
        h = s.tape.relu(h);
        h = self.c2.forward(s, h);
        h = self.n2.forward(s, h);
        let skip = match &self.down {
            Some((c, n)) => {
                let d = c.forward(s, x);
                n.forward(s, d)
            }
            None => x,
        };
        let sum = s.tape.add(h, skip);
        s.tape.relu(sum)
    }
}

#[derive(Debug, Clone)]
struct BasicBlock3d {
    c1: Conv3dLayer,
    n1: NormLayer,
    c2: Conv3dLayer,
    n2: NormLayer,
    down: Option<(Conv3dLayer, NormLayer)>,
}

impl BasicBlock3d {
    fn new(name: &str, in_ch: usize, out_ch: usize, stride: (usize, usize)) -> Self {
        let conv = |suffix: &str, ic, oc, st: (usize, usize), k: (usize, usize), p| Conv3dLayer {
            name: format!("{name}.{suffix}.conv"),
            in_ch: ic,
            out_ch: oc,
            kernel: k,
            stride: st,
            pad: p,
        };
        let norm = |suffix: &str, ch| NormLayer {
            name: format!("{name}.{suffix}.norm"),
            channels: ch,
        };
        let down = if stride != (1, 1) || in_ch != out_ch {
            Some((
                conv("down", in_ch, out_ch, stride, (1, 1), (0, 0)),
                norm("down", out_ch),
            ))
        } else {
            None
        };
        BasicBlock3d {
            c1: conv("a", in_ch, out_ch, stride, (3, 3), (1, 1)),
            n1: norm("a", out_ch),
            c2: conv("b", out_ch, out_ch, (1, 1), (3, 3), (1, 1)),
            n2: norm("b", out_ch),
            down,
        }
    }

    fn init(&self, store: &mut ParamStore, rng: &mut ChaCha20Rng) {
        self.c1.init(store, rng);
        self.n1.init(store);
        self.c2.init(store, rng);
        self.n2.init(store);
        if let Some((c, n)) = &self.down {
            c.init(store, rng);
            n.init(store);
        }
    }

    fn forward(&self, s: &mut Session, x: NodeId) -> NodeId {
        let mut h = self.c1.forward(s, x);
        h = self.n1.forward(s, h);
        h = s.tape.relu(h);
        h = self.c2.forward(s, h);
        h = self.n2.forward(s, h);
        let skip = match &self.down {
            Some((c, n)) => {
                let d = c.forward(s, x);
                n.forward(s, d)
            }
            None => x,
        };
        let sum = s.tape.add(h, skip);
        s.tape.relu(sum)
    }
}

// ---- dilated 2-d residual trunk -----------------------------------------------------

/// Output stride of the 2-d residual trunk.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrunkStride {
    /// Stride 16: the dense-feature configuration (final stage dilated).
    S16,
    /// Stride 8: layers 3 and 4 both dilated (localization encoder).
    S8,
}

/// 18-layer dilated residual trunk: 7x7 stem, four stages of two basic
/// blocks each, truncated before any classifier. Widths are configurable so
/// desk-scale profiles stay trainable on CPU.
#[derive(Debug, Clone)]
pub struct ResNet2d {
    stem: (Conv2dLayer, NormLayer),
    stages: Vec<BasicBlock2d>,
    /// Optional K-channel projection head (3x3).
    head: Option<Conv2dLayer>,
    pub out_channels: usize,
}

impl ResNet2d {
    pub fn new(
        name: &str,
        in_channels: usize,
        widths: [usize; 5],
        head_channels: Option<usize>,
        trunk_stride: TrunkStride,
    ) -> Self {
        let stem = conv_norm(&format!("{name}.stem"), in_channels, widths[0], 7, 2, 3, 1);
        let mut stages = Vec::new();
        // (stage width, first-block stride, dilation)
        let plan: [(usize, usize, usize); 4] = match trunk_stride {
            TrunkStride::S16 => [
                (widths[1], 1, 1),
                (widths[2], 2, 1),
                (widths[3], 2, 1),
                (widths[4], 1, 2),
            ],
            TrunkStride::S8 => [
                (widths[1], 1, 1),
                (widths[2], 2, 1),
                (widths[3], 1, 2),
                (widths[4], 1, 2),
            ],
        };
        let mut in_ch = widths[0];
        for (i, &(w, stride, dil)) in plan.iter().enumerate() {
            stages.push(BasicBlock2d::new(
                &format!("{name}.layer{}.0", i + 1),
                in_ch,
                w,
                stride,
                dil,
            ));
            stages.push(BasicBlock2d::new(
                &format!("{name}.layer{}.1", i + 1),
                w,
                w,
                1,
                dil,
            ));
            in_ch = w;
        }
        let head = head_channels.map(|k| Conv2dLayer {
            name: format!("{name}.head"),
            in_ch,
            out_ch: k,
            kernel: 3,
            stride: 1,
            pad: 1,
            dilation: 1,
            init_gain: 1.0,
        });
        let out_channels = head_channels.unwrap_or(in_ch);
        ResNet2d {
            stem,
            stages,
            head,
            out_channels,
        }
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut ChaCha20Rng) {
        self.stem.0.init(store, rng);
        self.stem.1.init(store);
        for b in &self.stages {
            b.init(store, rng);
        }
        if let Some(h) = &self.head {
            h.init(store, rng);
        }
    }

    /// Input `[C, 16H, 16W]` with spatial dims divisible by 16 (stride-16
    /// trunk) or 8; output `[K, H, W]`.
    pub fn forward(&self, s: &mut Session, x: NodeId) -> NodeId {
        let mut h = self.stem.0.forward(s, x);
        h = self.stem.1.forward(s, h);
        h = s.tape.relu(h);
        h = s.tape.max_pool2d_3x3s2(h);
        for b in &self.stages {
            h = b.forward(s, h);
        }
        if let Some(head) = &self.head {
            h = head.forward(s, h);
        }
        h
    }
}

// ---- 3-d residual trunk ---------------------------------------------------------------

/// 3-d 18-layer residual trunk: 3x7x7 stem with spatial stride 2, temporal
/// stride over stages 2-4. Total stride: 8 temporal, 16 spatial.
#[derive(Debug, Clone)]
pub struct ResNet3d {
    stem: (Conv3dLayer, NormLayer),
    stages: Vec<BasicBlock3d>,
    head: Conv3dLayer,
    pub out_channels: usize,
}

impl ResNet3d {
    pub fn new(name: &str, in_channels: usize, widths: [usize; 5], head_channels: usize) -> Self {
        let stem = (
            Conv3dLayer {
                name: format!("{name}.stem.conv"),
                in_ch: in_channels,
                out_ch: widths[0],
                kernel: (3, 7),
                stride: (1, 2),
                pad: (1, 3),
            },
            NormLayer {
                name: format!("{name}.stem.norm"),
                channels: widths[0],
            },
        );
        let plan: [(usize, (usize, usize)); 4] = [
            (widths[1], (1, 1)),
            (widths[2], (2, 2)),
            (widths[3], (2, 2)),
            (widths[4], (2, 2)),
        ];
        let mut stages = Vec::new();
        let mut in_ch = widths[0];
        for (i, &(w, stride)) in plan.iter().enumerate() {
            stages.push(BasicBlock3d::new(
                &format!("{name}.layer{}.0", i + 1),
                in_ch,
                w,
                stride,
            ));
            stages.push(BasicBlock3d::new(
                &format!("{name}.layer{}.1", i + 1),
                w,
                w,
                (1, 1),
            ));
            in_ch = w;
        }
        let head = Conv3dLayer {
            name: format!("{name}.head"),
            in_ch,
            out_ch: head_channels,
            kernel: (3, 3),
            stride: (1, 1),
            pad: (1, 1),
        };
        ResNet3d {
            stem,
            stages,
            head,
            out_channels: head_channels,
        }
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut ChaCha20Rng) {
        self.stem.0.init(store, rng);
        self.stem.1.init(store);
        for b in &self.stages {
            b.init(store, rng);
        }
        self.head.init(store, rng);
    }

    /// Input `[C, T, 16H, 16W]`, T divisible by 8; output `[K, T/8, H, W]`.
    pub fn forward(&self, s: &mut Session, x: NodeId) -> NodeId {
        let mut h = self.stem.0.forward(s, x);
        h = self.stem.1.forward(s, h);
        h = s.tape.relu(h);
        for b in &self.stages {
            h = b.forward(s, h);
        }
        self.head.forward(s, h)
    }
}

// ---- U-Net sound network ------------------------------------------------------------------

/// Number of U-Net levels for a given grid height: 7 at the full 256-row
/// resolution, fewer on reduced desk-scale grids.
pub fn unet_levels_for(rows: usize) -> usize {
    let log2 = (rows as f64).log2().floor() as usize;
    log2.saturating_sub(1).clamp(1, 7)
}

/// Encoder-decoder over the warped spectrogram: `levels` stride-2 encoder
/// convolutions mirrored by nearest-neighbor upsampling with skip
/// connections, then a 1x1 projection to `out_channels` feature maps.
#[derive(Debug, Clone)]
pub struct UNet {
    enc: Vec<(Conv2dLayer, NormLayer)>,
    dec: Vec<(Conv2dLayer, NormLayer)>,
    head: Conv2dLayer,
    pub levels: usize,
    pub out_channels: usize,
}

impl UNet {
    pub fn new(name: &str, in_channels: usize, base: usize, levels: usize, out_channels: usize) -> Self {
        assert!(levels >= 1);
        let cap = 512usize;
        let width = |level: usize| (base << level).min(cap);
        let mut enc = Vec::new();
        let mut ch = in_channels;
        for l in 0..levels {
            enc.push(conv_norm(
                &format!("{name}.enc{l}"),
                ch,
                width(l),
                4,
                2,
                1,
                1,
            ));
            ch = width(l);
        }
        let mut dec = Vec::new();
        for l in (0..levels).rev() {
            // After upsampling level l+1 output, concat with encoder level l-1
            // output (none at the top level).
            let skip_ch = if l >= 1 { width(l - 1) } else { 0 };
            let out_ch = if l >= 1 { width(l - 1) } else { base };
            dec.push(conv_norm(
                &format!("{name}.dec{l}"),
                ch + skip_ch,
                out_ch,
                3,
                1,
                1,
                1,
            ));
            ch = out_ch;
        }
        let head = Conv2dLayer {
            name: format!("{name}.out"),
            in_ch: ch,
            out_ch: out_channels,
            kernel: 1,
            stride: 1,
            pad: 0,
            dilation: 1,
            init_gain: 0.5,
        };
        UNet {
            enc,
            dec,
            head,
            levels,
            out_channels,
        }
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut ChaCha20Rng) {
        for (c, n) in &self.enc {
            c.init(store, rng);
            n.init(store);
        }
        for (c, n) in &self.dec {
            c.init(store, rng);
            n.init(store);
        }
        self.head.init(store, rng);
    }

    pub fn check_input(&self, rows: usize, cols: usize) -> Result<()> {
        let div = 1usize << self.levels;
        if rows % div != 0 || cols % div != 0 {
            return Err(Error::invalid(format!(
                "spectrogram {rows}x{cols} not divisible by 2^{} (U-Net levels)",
                self.levels
            )));
        }
        Ok(())
    }

    /// `[1, HS, WS] -> [K, HS, WS]`.
    pub fn forward(&self, s: &mut Session, x: NodeId) -> NodeId {
        let mut skips: Vec<NodeId> = Vec::with_capacity(self.levels);
        let mut h = x;
        for (c, n) in &self.enc {
            h = c.forward(s, h);
            h = n.forward(s, h);
            h = s.tape.leaky_relu(h, 0.2);
            skips.push(h);
        }
        for (i, (c, n)) in self.dec.iter().enumerate() {
            let level = self.levels - 1 - i;
            h = s.tape.upsample_nearest_2x(h);
            if level >= 1 {
                h = s.tape.concat_channels(h, skips[level - 1]);
            }
            h = c.forward(s, h);
            h = n.forward(s, h);
            h = s.tape.relu(h);
        }
        self.head.forward(s, h)
    }
}

// ---- mutual attention --------------------------------------------------------------------

/// Two-stream fusion: a spatial attention map distilled from the appearance
/// features gates the spatio-temporal features, whose activations in turn
/// gate the time-inflated appearance features; both enhanced streams are
/// summed.
#[derive(Debug, Clone)]
pub struct MutualAttention {
    proj: Conv2dLayer,
}

impl MutualAttention {
    pub fn new(name: &str, channels: usize) -> Self {
        MutualAttention {
            proj: Conv2dLayer {
                name: format!("{name}.proj"),
                in_ch: channels,
                out_ch: 1,
                kernel: 1,
                stride: 1,
                pad: 0,
                dilation: 1,
                init_gain: 1.0,
            },
        }
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut ChaCha20Rng) {
        self.proj.init(store, rng);
    }

    /// `a2d: [K,H,W]`, `a3d: [K,T,H,W]` -> `[K,T,H,W]`.
    pub fn forward(&self, s: &mut Session, a2d: NodeId, a3d: NodeId) -> NodeId {
        let t = s.tape.value(a3d).shape()[1];
        let proj = self.proj.forward(s, a2d);
        let attn = s.tape.sigmoid(proj);
        let gated = s.tape.mul_broadcast_hw(a3d, attn);
        let m_hat = s.tape.add(a3d, gated);
        let q = s.tape.sigmoid(m_hat);
        let inflated = s.tape.inflate_time(a2d, t);
        let gated2d = s.tape.mul(q, inflated);
        let a2d_hat = s.tape.add(inflated, gated2d);
        s.tape.add(m_hat, a2d_hat)
    }
}

// ---- localization network -------------------------------------------------------------------

/// Pixel-level source-location network: stride-8 dilated residual encoder,
/// three up-projection blocks (2x upsample + 3x3 conv), then a 1-channel
/// sigmoid head at full input resolution.
#[derive(Debug, Clone)]
pub struct SslmNet {
    encoder: ResNet2d,
    ups: Vec<(Conv2dLayer, NormLayer)>,
    head: Conv2dLayer,
}

impl SslmNet {
    pub fn new(name: &str, in_channels: usize, widths: [usize; 5]) -> Self {
        let encoder = ResNet2d::new(
            &format!("{name}.encoder"),
            in_channels,
            widths,
            None,
            TrunkStride::S8,
        );
        let mut ups = Vec::new();
        let mut ch = widths[4];
        for i in 0..3 {
            let out = (ch / 2).max(8);
            ups.push(conv_norm(&format!("{name}.up{i}"), ch, out, 3, 1, 1, 1));
            ch = out;
        }
        let head = Conv2dLayer {
            name: format!("{name}.head"),
            in_ch: ch,
            out_ch: 1,
            kernel: 3,
            stride: 1,
            pad: 1,
            dilation: 1,
            init_gain: 1.0,
        };
        SslmNet { encoder, ups, head }
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut ChaCha20Rng) {
        self.encoder.init(store, rng);
        for (c, n) in &self.ups {
            c.init(store, rng);
            n.init(store);
        }
        self.head.init(store, rng);
    }

    /// `[3, S, S] -> [1, S, S]`, values in (0, 1).
    pub fn forward(&self, s: &mut Session, x: NodeId) -> NodeId {
        let mut h = self.encoder.forward(s, x);
        for (c, n) in &self.ups {
            h = s.tape.upsample_nearest_2x(h);
            h = c.forward(s, h);
            h = n.forward(s, h);
            h = s.tape.relu(h);
        }
        let logits = self.head.forward(s, h);
        s.tape.sigmoid(logits)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn rng() -> ChaCha20Rng {
        ChaCha20Rng::seed_from_u64(99)
    }

    fn rand_input(shape: &[usize], seed: u64) -> Tensor {
        use rand::Rng;
        let mut r = ChaCha20Rng::seed_from_u64(seed);
        let n = shape.iter().product();
        Tensor::from_vec(shape, (0..n).map(|_| r.gen_range(0.0..1.0)).collect())
    }

    #[test]
    fn resnet2d_canonical_shape_is_k_by_14() {
        let net = ResNet2d::new("v", 3, [4, 4, 8, 8, 8], Some(16), TrunkStride::S16);
        let mut store = ParamStore::new();
        net.init(&mut store, &mut rng());
        let mut s = Session::new(&store, Trainability::None);
        let x = s.tape.constant(rand_input(&[3, 224, 224], 1));
        let out = net.forward(&mut s, x);
        assert_eq!(s.tape.value(out).shape(), &[16, 14, 14]);
        assert!(s.tape.value(out).is_finite());
    }

    #[test]
    fn resnet2d_toy_shape() {
        let net = ResNet2d::new("v", 3, [8, 8, 16, 32, 64], Some(16), TrunkStride::S16);
        let mut store = ParamStore::new();
        net.init(&mut store, &mut rng());
        let mut s = Session::new(&store, Trainability::None);
        let x = s.tape.constant(rand_input(&[3, 64, 64], 2));
        let out = net.forward(&mut s, x);
        assert_eq!(s.tape.value(out).shape(), &[16, 4, 4]);
    }

    #[test]
    fn resnet2d_is_deterministic() {
        let net = ResNet2d::new("v", 3, [4, 4, 8, 8, 8], Some(16), TrunkStride::S16);
        let mut store = ParamStore::new();
        net.init(&mut store, &mut rng());
        let x = rand_input(&[3, 64, 64], 3);
        let run = || {
            let mut s = Session::new(&store, Trainability::None);
            let xi = s.tape.constant(x.clone());
            let out = net.forward(&mut s, xi);
            s.tape.value(out).clone()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn resnet3d_canonical_shape_is_t6_k16_s14() {
        let net = ResNet3d::new("m", 3, [2, 2, 4, 4, 8], 16);
        let mut store = ParamStore::new();
        net.init(&mut store, &mut rng());
        let mut s = Session::new(&store, Trainability::None);
        let x = s.tape.constant(rand_input(&[3, 48, 224, 224], 4));
        let out = net.forward(&mut s, x);
        // Engine layout is channels-first: [K, T', H, W].
        assert_eq!(s.tape.value(out).shape(), &[16, 6, 14, 14]);
        assert!(s.tape.value(out).is_finite());
    }

    #[test]
    fn unet_preserves_spatial_shape_across_profiles() {
        for &(size, base) in &[(64usize, 8usize), (128, 8), (256, 8)] {
            let levels = unet_levels_for(size);
            let net = UNet::new("snd", 1, base, levels, 16);
            let mut store = ParamStore::new();
            net.init(&mut store, &mut rng());
            net.check_input(size, size).unwrap();
            let mut s = Session::new(&store, Trainability::None);
            let x = s.tape.constant(rand_input(&[1, size, size], size as u64));
            let out = net.forward(&mut s, x);
            assert_eq!(s.tape.value(out).shape(), &[16, size, size], "size {size}");
        }
        assert_eq!(unet_levels_for(256), 7);
        assert_eq!(unet_levels_for(64), 5);
    }

    #[test]
    fn unet_rejects_indivisible_input() {
        let net = UNet::new("snd", 1, 8, 5, 16);
        assert!(net.check_input(100, 64).is_err());
        assert!(net.check_input(64, 64).is_ok());
    }

    #[test]
    fn mutual_attention_zero_appearance_gives_1p5x_motion() {
        // With a2d = 0 and zero-initialized projection bias the spatial
        // attention is exactly 0.5, the gated stream is 1.5 * a3d, and the
        // appearance stream vanishes.
        let ma = MutualAttention::new("ma", 4);
        let mut store = ParamStore::new();
        ma.init(&mut store, &mut rng());
        let mut s = Session::new(&store, Trainability::None);
        let a2d = s.tape.constant(Tensor::zeros(&[4, 5, 5]));
        let a3d_val = rand_input(&[4, 2, 5, 5], 7);
        let a3d = s.tape.constant(a3d_val.clone());
        let out = ma.forward(&mut s, a2d, a3d);
        assert_eq!(s.tape.value(out).shape(), &[4, 2, 5, 5]);
        for (o, i) in s.tape.value(out).data().iter().zip(a3d_val.data()) {
            assert!((o - 1.5 * i).abs() < 1e-12);
        }
    }

    #[test]
    fn mutual_attention_all_zero_inputs_give_zero() {
        let ma = MutualAttention::new("ma", 4);
        let mut store = ParamStore::new();
        ma.init(&mut store, &mut rng());
        let mut s = Session::new(&store, Trainability::None);
        let a2d = s.tape.constant(Tensor::zeros(&[4, 5, 5]));
        let a3d = s.tape.constant(Tensor::zeros(&[4, 2, 5, 5]));
        let out = ma.forward(&mut s, a2d, a3d);
        assert!(s.tape.value(out).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn sslm_outputs_full_resolution_unit_interval_mask() {
        let net = SslmNet::new("loc", 3, [8, 8, 16, 32, 64]);
        let mut store = ParamStore::new();
        net.init(&mut store, &mut rng());
        let mut s = Session::new(&store, Trainability::None);
        let x = s.tape.constant(rand_input(&[3, 64, 64], 8));
        let out = net.forward(&mut s, x);
        assert_eq!(s.tape.value(out).shape(), &[1, 64, 64]);
        assert!(s
            .tape
            .value(out)
            .data()
            .iter()
            .all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn load_matching_rejects_shape_mismatch() {
        let mut a = ParamStore::new();
        a.insert("x.weight", Tensor::zeros(&[4, 2]));
        let mut b = ParamStore::new();
        b.insert("x.weight", Tensor::zeros(&[4, 3]));
        let err = a.load_matching(&b).unwrap_err();
        match err {
            Error::ShapeMismatch { what, .. } => assert!(what.contains("x.weight")),
            other => panic!("unexpected error {other:?}"),
        }
    }
}
