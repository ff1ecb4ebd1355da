use std::fmt;
use std::str::FromStr;
use std::sync::atomic::{AtomicUsize, Ordering};

use super::config::{Head, MergeStrategy, ModelConfig, DOWNSAMPLE};
use super::layers::{BatchNorm, Builder, Conv, ConvBlock, UpConv};
use crate::engine::{ParamStore, Tape, Var};
use crate::error::{shape_err, Error, Result};
use crate::tensor::Tensor4;

/// Disjoint parameter groups, addressed by name prefix.
#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash)]
pub enum Group {
    ForwardEncoder,
    ForwardDecoder,
    FeedbackEncoder,
    FeedbackDecoder,
}

impl Group {
    pub const ALL: [Group; 4] = [
        Group::ForwardEncoder,
        Group::ForwardDecoder,
        Group::FeedbackEncoder,
        Group::FeedbackDecoder,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Group::ForwardEncoder => "S_e",
            Group::ForwardDecoder => "S_d",
            Group::FeedbackEncoder => "F_e",
            Group::FeedbackDecoder => "F_d",
        }
    }

    pub fn prefix(self) -> String {
        format!("{}/", self.name())
    }

    pub fn is_feedback(self) -> bool {
        matches!(self, Group::FeedbackEncoder | Group::FeedbackDecoder)
    }
}

impl FromStr for Group {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Group::ALL
            .into_iter()
            .find(|g| g.name() == s)
            .ok_or_else(|| Error::UnknownGroup(s.to_string()))
    }
}

impl fmt::Display for Group {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub enum BatchNormMode {
    Train,
    Eval,
}

/// Encoder output: the latent code plus the skip features, finest first.
#[derive(Clone, Debug)]
pub struct Encoded {
    pub latent: Var,
    pub skips: Vec<Var>,
}

#[derive(Clone, Debug)]
struct ForwardSystem {
    down: Vec<ConvBlock>,
    bottleneck: ConvBlock,
    bridge: ConvBlock,
    up: Vec<(UpConv, ConvBlock)>,
    head: Conv,
}

#[derive(Clone, Debug)]
struct FeedbackSystem {
    down: Vec<ConvBlock>,
    bottleneck: ConvBlock,
    up: Vec<(UpConv, ConvBlock)>,
    head: Conv,
}

/// Forward network S = (S_e, S_d) and, when enabled, feedback network F = (F_e, F_d),
/// all stored in one [`ParamStore`].
#[derive(Debug)]
pub struct LfbNet {
    config: ModelConfig,
    seed: u64,
    store: ParamStore,
    forward: ForwardSystem,
    feedback: Option<FeedbackSystem>,
    feedback_decoder_calls: AtomicUsize,
}

impl LfbNet {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        let mut b = Builder { store: &mut store, seed };
        let se = config.use_se.then_some(config.se_reduction);
        let fw = config.forward_widths();
        let c = config.latent_channels;
        let r = config.conv_repeats;

        let mut down = Vec::new();
        let mut cin = config.in_channels;
        for (i, &w) in fw.iter().enumerate() {
            down.push(ConvBlock::new(&mut b, &format!("S_e/down{i}"), cin, w, r, se)?);
            cin = w;
        }
        let bottleneck = ConvBlock::new(&mut b, "S_e/bottleneck", cin, c, config.latent_repeats, se)?;

        let bridge_in = if config.feedback { config.merge.output_channels(c) } else { c };
        let bridge = ConvBlock::new(&mut b, "S_d/bridge", bridge_in, c, config.latent_repeats, se)?;
        let mut up = Vec::new();
        let mut cin = c;
        for i in (0..fw.len()).rev() {
            let w = fw[i];
            let upconv = UpConv::new(&mut b, &format!("S_d/up{i}/upconv"), cin, w)?;
            let block = ConvBlock::new(&mut b, &format!("S_d/up{i}/block"), 2 * w, w, r, se)?;
            up.push((upconv, block));
            cin = w;
        }
        let head = Conv::new(&mut b, "S_d/head", cin, config.n_classes, 1, true)?;
        let forward = ForwardSystem { down, bottleneck, bridge, up, head };

        let feedback = if config.feedback {
            let fbw = config.feedback_widths();
            let mut down = Vec::new();
            let mut cin = config.n_classes;
            for (i, &w) in fbw.iter().enumerate() {
                down.push(ConvBlock::new(&mut b, &format!("F_e/down{i}"), cin, w, r, None)?);
                cin = w;
            }
            let bottleneck = ConvBlock::new(&mut b, "F_e/bottleneck", cin, c, config.latent_repeats, None)?;
            let mut up = Vec::new();
            let mut cin = c;
            for i in (0..fbw.len()).rev() {
                let w = 2 * fbw[i];
                let upconv = UpConv::new(&mut b, &format!("F_d/up{i}/upconv"), cin, w)?;
                let block = ConvBlock::new(&mut b, &format!("F_d/up{i}/block"), w, w, r, None)?;
                up.push((upconv, block));
                cin = w;
            }
            let head = Conv::new(&mut b, "F_d/head", cin, config.n_classes, 1, true)?;
            Some(FeedbackSystem { down, bottleneck, up, head })
        } else {
            None
        };

        Ok(LfbNet {
            config,
            seed,
            store,
            forward,
            feedback,
            feedback_decoder_calls: AtomicUsize::new(0),
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn has_feedback(&self) -> bool {
        self.feedback.is_some()
    }

    pub fn groups(&self) -> Vec<Group> {
        Group::ALL.into_iter().filter(|g| self.has_feedback() || !g.is_feedback()).collect()
    }

    fn check_group(&self, group: Group) -> Result<()> {
        if group.is_feedback() && !self.has_feedback() {
            return Err(Error::UnknownGroup(format!("{group} (model built without feedback)")));
        }
        Ok(())
    }

    /// Freezes or unfreezes `"S_e" | "S_d" | "F_e" | "F_d" | "all"`.
    pub fn set_frozen(&mut self, group: &str, frozen: bool) -> Result<()> {
        if group == "all" {
            for g in self.groups() {
                self.set_group_frozen(g, frozen)?;
            }
            return Ok(());
        }
        self.set_group_frozen(group.parse()?, frozen)
    }

    pub fn set_group_frozen(&mut self, group: Group, frozen: bool) -> Result<()> {
        self.check_group(group)?;
        self.store.set_frozen_prefix(&group.prefix(), frozen);
        Ok(())
    }

    pub fn is_group_frozen(&self, group: Group) -> Result<bool> {
        self.check_group(group)?;
        let prefix = group.prefix();
        Ok(self.store.params().filter(|p| p.name().starts_with(&prefix)).all(|p| p.is_frozen()))
    }

    fn group_batchnorms(&self, group: Group) -> Vec<&BatchNorm> {
        let blocks: Vec<&ConvBlock> = match (group, &self.feedback) {
            (Group::ForwardEncoder, _) => {
                self.forward.down.iter().chain([&self.forward.bottleneck]).collect()
            }
            (Group::ForwardDecoder, _) => {
                [&self.forward.bridge].into_iter().chain(self.forward.up.iter().map(|(_, b)| b)).collect()
            }
            (Group::FeedbackEncoder, Some(f)) => f.down.iter().chain([&f.bottleneck]).collect(),
            (Group::FeedbackDecoder, Some(f)) => f.up.iter().map(|(_, b)| b).collect(),
            _ => Vec::new(),
        };
        blocks.into_iter().flat_map(|b| b.batchnorms()).collect()
    }

    /// Mode each batchnorm layer of `group` would run in on a recording tape.
    pub fn batchnorm_modes(&self, group: Group) -> Result<Vec<BatchNormMode>> {
        self.check_group(group)?;
        let probe = Tape::new();
        Ok(self
            .group_batchnorms(group)
            .into_iter()
            .map(|bn| if bn.is_training(&probe, &self.store) { BatchNormMode::Train } else { BatchNormMode::Eval })
            .collect())
    }

    pub fn group_digest(&self, group: Group) -> Result<[u8; 32]> {
        self.check_group(group)?;
        Ok(self.store.digest(&group.prefix()))
    }

    pub fn parameter_count(&self, group: Group) -> usize {
        self.store.num_elements_with_prefix(&group.prefix())
    }

    /// All trainable scalars of S and F.
    pub fn train_parameter_count(&self) -> usize {
        self.store.num_elements()
    }

    /// Scalars needed at inference: everything except F_d.
    pub fn test_parameter_count(&self) -> usize {
        self.train_parameter_count() - self.parameter_count(Group::FeedbackDecoder)
    }

    /// Number of times F_d has been run since construction.
    pub fn feedback_decoder_calls(&self) -> usize {
        self.feedback_decoder_calls.load(Ordering::Relaxed)
    }

    /// Feedback latent that makes the merge a no-op: zeros, or ones for multiply.
    pub fn no_feedback_latent(&self, n: usize, h: usize, w: usize) -> Tensor4 {
        Tensor4::filled(self.config.latent_dims(n, h, w), self.config.merge.neutral_value())
    }

    fn check_input(&self, op: &'static str, x: &Var, channels: usize) -> Result<()> {
        let [_, c, h, w] = x.dims();
        if c != channels || h % DOWNSAMPLE != 0 || w % DOWNSAMPLE != 0 || h == 0 || w == 0 {
            return Err(shape_err(
                op,
                format!("expected [n, {channels}, H, W] with H, W multiples of {DOWNSAMPLE}, got {:?}", x.dims()),
            ));
        }
        Ok(())
    }

    fn head(&self, tape: &mut Tape, logits: &Var) -> Result<Var> {
        match self.config.head {
            Head::Sigmoid => tape.sigmoid(logits),
            Head::Softmax => tape.softmax_channels(logits),
        }
    }

    /// S_e: image → latent h_s with skip features.
    pub fn encode(&self, tape: &mut Tape, x: &Var) -> Result<Encoded> {
        self.check_input("encode", x, self.config.in_channels)?;
        let mut skips = Vec::with_capacity(self.forward.down.len());
        let mut h = x.clone();
        for block in &self.forward.down {
            let s = block.forward(tape, &self.store, &h)?;
            h = tape.maxpool2d(&s)?;
            skips.push(s);
        }
        let latent = self.forward.bottleneck.forward(tape, &self.store, &h)?;
        Ok(Encoded { latent, skips })
    }

    /// S_d: (h_s, h_f) → probability map. `feedback = None` uses the neutral
    /// latent on feedback models and is required on models without feedback.
    pub fn decode(&self, tape: &mut Tape, enc: &Encoded, feedback: Option<&Var>) -> Result<Var> {
        let h_s = &enc.latent;
        let mut h = if self.has_feedback() {
            let neutral;
            let h_f = match feedback {
                Some(f) => f,
                None => {
                    let [n, _, lh, lw] = h_s.dims();
                    neutral = Var::constant(Tensor4::filled(
                        [n, self.config.latent_channels, lh, lw],
                        self.config.merge.neutral_value(),
                    ));
                    &neutral
                }
            };
            if h_f.dims() != h_s.dims() {
                return Err(shape_err(
                    "decode",
                    format!("feedback latent {:?} does not match forward latent {:?}", h_f.dims(), h_s.dims()),
                ));
            }
            merge(tape, h_s, h_f, self.config.merge)?
        } else {
            if feedback.is_some() {
                return Err(Error::InvalidArgument("model was built without a feedback path".into()));
            }
            h_s.clone()
        };
        h = self.forward.bridge.forward(tape, &self.store, &h)?;
        for ((upconv, block), skip) in self.forward.up.iter().zip(enc.skips.iter().rev()) {
            let u = upconv.forward(tape, &self.store, &h)?;
            let cat = tape.concat_channels(&u, skip)?;
            h = block.forward(tape, &self.store, &cat)?;
        }
        let logits = self.forward.head.forward(tape, &self.store, &h)?;
        self.head(tape, &logits)
    }

    /// S(x) with the given feedback latent; returns the prediction and the encoding.
    pub fn forward_pass(&self, tape: &mut Tape, x: &Var, feedback: Option<&Var>) -> Result<(Var, Encoded)> {
        let enc = self.encode(tape, x)?;
        let y = self.decode(tape, &enc, feedback)?;
        Ok((y, enc))
    }

    fn feedback_system(&self) -> Result<&FeedbackSystem> {
        self.feedback
            .as_ref()
            .ok_or_else(|| Error::InvalidArgument("model was built without a feedback network".into()))
    }

    /// F_e: probability map → h_f, shaped like h_s.
    pub fn feedback_encode(&self, tape: &mut Tape, y_hat: &Var) -> Result<Var> {
        let f = self.feedback_system()?;
        self.check_input("feedback_encode", y_hat, self.config.n_classes)?;
        let mut h = y_hat.clone();
        for block in &f.down {
            let s = block.forward(tape, &self.store, &h)?;
            h = tape.maxpool2d(&s)?;
        }
        f.bottleneck.forward(tape, &self.store, &h)
    }

    /// F_d: h_f → reconstructed probability map.
    pub fn feedback_decode(&self, tape: &mut Tape, h_f: &Var) -> Result<Var> {
        let f = self.feedback_system()?;
        if h_f.c() != self.config.latent_channels {
            return Err(shape_err(
                "feedback_decode",
                format!("expected {} latent channels, got {:?}", self.config.latent_channels, h_f.dims()),
            ));
        }
        self.feedback_decoder_calls.fetch_add(1, Ordering::Relaxed);
        let mut h = h_f.clone();
        for (upconv, block) in &f.up {
            let u = upconv.forward(tape, &self.store, &h)?;
            h = block.forward(tape, &self.store, &u)?;
        }
        let logits = f.head.forward(tape, &self.store, &h)?;
        self.head(tape, &logits)
    }

    pub fn feedback_full(&self, tape: &mut Tape, y_hat: &Var) -> Result<Var> {
        let h_f = self.feedback_encode(tape, y_hat)?;
        self.feedback_decode(tape, &h_f)
    }
}

/// Combines the forward and feedback latents.
pub fn merge(tape: &mut Tape, h_s: &Var, h_f: &Var, strategy: MergeStrategy) -> Result<Var> {
    if h_s.dims() != h_f.dims() {
        return Err(shape_err("merge", format!("{:?} vs {:?}", h_s.dims(), h_f.dims())));
    }
    match strategy {
        MergeStrategy::Concat => tape.concat_channels(h_s, h_f),
        MergeStrategy::Add => tape.add(h_s, h_f),
        MergeStrategy::Multiply => tape.mul(h_s, h_f),
    }
}

/// Weights of the classic four-pooling U-Net (64..1024 channels, two 3×3
/// convolutions per level, 2×2 up-convolutions, 1×1 output).
pub fn reference_unet_parameter_count(in_channels: usize, n_classes: usize) -> usize {
    let conv = |cin: usize, cout: usize, k: usize| cin * cout * k * k + cout;
    let widths = [64, 128, 256, 512, 1024];
    let mut total = 0;
    let mut cin = in_channels;
    for &w in &widths {
        total += conv(cin, w, 3) + conv(w, w, 3);
        cin = w;
    }
    for &w in widths[..4].iter().rev() {
        total += conv(cin, w, 2) + conv(2 * w, w, 3) + conv(w, w, 3);
        cin = w;
    }
    total + conv(cin, n_classes, 1)
}
