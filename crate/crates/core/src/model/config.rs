use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::layers::{se_width, PoolSpec, KERNEL};

/// Number of leading blocks that also halve the width; later blocks pool
/// height only.
pub const WIDTH_POOLING_BLOCKS: usize = 2;

/// Network shape. Channels double with each width-halving block and then
/// stay fixed: `c_i = channels · 2^min(i, 2)`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub blocks: usize,
    pub channels: usize,
    pub hidden: usize,
    pub lstm_layers: usize,
    pub heads: usize,
    /// Output classes including the CTC blank.
    pub classes: usize,
    pub height: usize,
    pub width: usize,
    /// 1-based BiLSTM layer whose output feeds the auxiliary head.
    pub aux_tap: usize,
}

/// Size of the character inventory (103 symbols plus blank) used for the
/// full-size presets.
pub const FULL_CLASSES: usize = 104;
pub const FULL_HEIGHT: usize = 68;
pub const FULL_WIDTH: usize = 864;
pub const TOY_HEIGHT: usize = 32;
pub const TOY_WIDTH: usize = 256;

impl ModelConfig {
    /// Full-size teacher: 5 blocks from 32 channels, hidden 128, 4 BiLSTM
    /// layers, 2 heads.
    pub fn teacher(classes: usize, height: usize, width: usize) -> Self {
        ModelConfig {
            blocks: 5,
            channels: 32,
            hidden: 128,
            lstm_layers: 4,
            heads: 2,
            classes,
            height,
            width,
            aux_tap: 2,
        }
    }

    /// Full-size student: 3 blocks from 16 channels, hidden 64, 4 BiLSTM
    /// layers, 1 head.
    pub fn student(classes: usize, height: usize, width: usize) -> Self {
        ModelConfig {
            blocks: 3,
            channels: 16,
            hidden: 64,
            lstm_layers: 4,
            heads: 1,
            ..Self::teacher(classes, height, width)
        }
    }

    /// Desk-scale teacher for the toy corpus.
    pub fn toy_teacher(classes: usize) -> Self {
        ModelConfig {
            blocks: 4,
            channels: 8,
            hidden: 32,
            lstm_layers: 4,
            heads: 2,
            classes,
            height: TOY_HEIGHT,
            width: TOY_WIDTH,
            aux_tap: 2,
        }
    }

    /// Desk-scale student: fewer blocks, half the channels and hidden size,
    /// one head.
    pub fn toy_student(classes: usize) -> Self {
        ModelConfig {
            blocks: 3,
            channels: 4,
            hidden: 16,
            heads: 1,
            ..Self::toy_teacher(classes)
        }
    }

    /// Smallest sensible network, for end-to-end gradient checks.
    pub fn tiny(classes: usize, height: usize, width: usize) -> Self {
        ModelConfig {
            blocks: 1,
            channels: 8,
            hidden: 8,
            lstm_layers: 2,
            heads: 1,
            classes,
            height,
            width,
            aux_tap: 1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.blocks == 0 || self.channels == 0 || self.hidden == 0 || self.lstm_layers == 0 {
            return bad(format!("model sizes must be positive: {self:?}"));
        }
        if self.classes < 2 {
            return bad(format!("need at least one character class besides blank, got {}", self.classes));
        }
        if self.height == 0 || self.width == 0 {
            return bad(format!("input size {}x{} must be positive", self.height, self.width));
        }
        if self.aux_tap == 0 || self.aux_tap > self.lstm_layers {
            return bad(format!(
                "aux head tap {} must lie in 1..={}",
                self.aux_tap, self.lstm_layers
            ));
        }
        if self.heads == 0 || (2 * self.hidden) % self.heads != 0 {
            return bad(format!(
                "attention width {} is not divisible by {} heads",
                2 * self.hidden,
                self.heads
            ));
        }
        Ok(())
    }

    pub fn block_channels(&self, i: usize) -> usize {
        self.channels << i.min(WIDTH_POOLING_BLOCKS)
    }

    pub fn block_pool(&self, i: usize) -> PoolSpec {
        if i < WIDTH_POOLING_BLOCKS {
            PoolSpec::TwoByTwo
        } else {
            PoolSpec::TwoByOne
        }
    }

    /// Feature-map height after the CNN.
    pub fn out_height(&self) -> usize {
        (0..self.blocks).fold(self.height, |h, _| h.div_ceil(2))
    }

    /// Output frames for an input of width `w`: `ceil(w / 2^min(blocks, 2))`.
    pub fn frames_for(&self, w: usize) -> usize {
        w.div_ceil(1 << self.blocks.min(WIDTH_POOLING_BLOCKS))
    }

    pub fn frames(&self) -> usize {
        self.frames_for(self.width)
    }

    /// Width of each column vector handed to the first BiLSTM.
    pub fn bridge_width(&self) -> usize {
        self.block_channels(self.blocks - 1) * self.out_height()
    }

    /// Width of BiLSTM outputs and of the attention stage.
    pub fn model_width(&self) -> usize {
        2 * self.hidden
    }

    /// Canonical text hashed into checkpoint fingerprints.
    pub fn canonical(&self) -> String {
        format!(
            "htrj-config v1;blocks={};channels={};hidden={};lstm_layers={};heads={};classes={};height={};width={};aux_tap={}",
            self.blocks,
            self.channels,
            self.hidden,
            self.lstm_layers,
            self.heads,
            self.classes,
            self.height,
            self.width,
            self.aux_tap
        )
    }

    pub fn fingerprint(&self) -> [u8; 32] {
        Sha256::digest(self.canonical().as_bytes()).into()
    }
}

/// Weights plus biases of a dense `inputs -> outputs` layer.
pub fn linear_param_count(inputs: usize, outputs: usize) -> usize {
    inputs * outputs + outputs
}

/// Trainable scalar count for `config`. Batch-norm running statistics are
/// buffers and are not counted.
pub fn param_count(config: &ModelConfig) -> usize {
    let k2 = KERNEL * KERNEL;
    let mut total = 0;
    let mut cin = 1;
    for i in 0..config.blocks {
        let c = config.block_channels(i);
        total += 2 * (c * cin * k2 + c); // gated conv, two branches
        total += 2 * c; // batch-norm scale and shift
        total += 2 * c * se_width(c); // SE bottleneck, no biases
        cin = c;
    }
    let h = config.hidden;
    let mut d = config.bridge_width();
    for _ in 0..config.lstm_layers {
        total += 2 * (4 * (h + d) * h + 4 * h);
        d = 2 * h;
    }
    let m = config.model_width();
    total += 7 * m * m; // MHA q,k,v,o and Proxima q,k,v
    total += 2 * m * m; // fusion
    total += 2 * m; // layer norm
    total += 2 * linear_param_count(m, config.classes); // main and auxiliary heads
    total
}
