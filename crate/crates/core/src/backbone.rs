//! ResNet34 feature extractor exposing the last map of each stage.
//!
//! Input is (N, 1, T, 64). Conv0 is a 7×7 stride-1 convolution to 32 channels;
//! stage 1 halves both time and frequency, stages 2–4 halve frequency only,
//! and the channel count doubles per stage:
//!
//! | stage | output           |
//! |-------|------------------|
//! | C1    | (N, 32, T/2, 32) |
//! | C2    | (N, 64, T/2, 16) |
//! | C3    | (N, 128, T/2, 8) |
//! | C4    | (N, 256, T/2, 4) |
//!
//! Channel width and block counts are configurable so the same wiring can be
//! trained at desk scale; the defaults are the full network.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::kernels::ConvGeometry;
use crate::layers::ConvBn;
use crate::params::ParamStore;
use crate::tensor::Scalar;

pub const N_MELS: usize = 64;
pub const RESNET34_BLOCKS: [usize; 4] = [3, 4, 6, 3];
pub const RESNET34_WIDTH: usize = 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackboneConfig {
    /// Channels of conv0 and stage 1; stage i has `base_channels · 2^(i-1)`.
    pub base_channels: usize,
    pub blocks: [usize; 4],
}

impl Default for BackboneConfig {
    fn default() -> Self {
        BackboneConfig {
            base_channels: RESNET34_WIDTH,
            blocks: RESNET34_BLOCKS,
        }
    }
}

impl BackboneConfig {
    pub fn stage_channels(&self) -> [usize; 4] {
        let b = self.base_channels;
        [b, 2 * b, 4 * b, 8 * b]
    }

    pub fn validate(&self) -> Result<()> {
        if self.base_channels == 0 || self.blocks.contains(&0) {
            return Err(Error::Config(format!(
                "backbone needs positive width and block counts, got {self:?}"
            )));
        }
        Ok(())
    }
}

/// Stride of the first block of each stage.
pub const STAGE_STRIDES: [(usize, usize); 4] = [(2, 2), (1, 2), (1, 2), (1, 2)];

/// conv-BN-ReLU-conv-BN, shortcut add, ReLU.
#[derive(Debug, Clone)]
pub struct BasicBlock {
    pub conv1: ConvBn,
    pub conv2: ConvBn,
    /// 1×1 projection + BN, present iff the block changes stride or channel count.
    pub shortcut: Option<ConvBn>,
}

impl BasicBlock {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        cin: usize,
        cout: usize,
        stride: (usize, usize),
        seed: u64,
    ) -> Result<Self> {
        let conv1 = ConvBn::new(
            store,
            &format!("{name}.conv1"),
            &format!("{name}.bn1"),
            cin,
            cout,
            3,
            ConvGeometry::new(stride, (1, 1)),
            seed,
        )?;
        let conv2 = ConvBn::new(
            store,
            &format!("{name}.conv2"),
            &format!("{name}.bn2"),
            cout,
            cout,
            3,
            ConvGeometry::same(3),
            seed,
        )?;
        let shortcut = if stride != (1, 1) || cin != cout {
            Some(ConvBn::new(
                store,
                &format!("{name}.shortcut.conv"),
                &format!("{name}.shortcut.bn"),
                cin,
                cout,
                1,
                ConvGeometry::new(stride, (0, 0)),
                seed,
            )?)
        } else {
            None
        };
        Ok(BasicBlock { conv1, conv2, shortcut })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let y = self.conv1.forward(g, x)?;
        let y = g.relu(y);
        let y = self.conv2.forward(g, y)?;
        let skip = match &self.shortcut {
            Some(p) => p.forward(g, x)?,
            None => x,
        };
        let y = g.add(y, skip)?;
        Ok(g.relu(y))
    }
}

#[derive(Debug, Clone)]
pub struct Backbone {
    pub config: BackboneConfig,
    pub conv0: ConvBn,
    pub stages: Vec<Vec<BasicBlock>>,
}

/// Graph handles of the four stage outputs C1..C4.
#[derive(Debug, Clone, Copy)]
pub struct BackboneFeatures {
    pub c: [Var; 4],
}

impl BackboneFeatures {
    /// Stage `i` in 1..=4.
    pub fn stage(&self, i: usize) -> Var {
        self.c[i - 1]
    }
}

impl Backbone {
    /// He-initialised weights; BN gamma = 1, beta = 0. Names live under `backbone.`.
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, config: BackboneConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let ch = config.stage_channels();
        let conv0 = ConvBn::new(
            store,
            "backbone.conv0",
            "backbone.bn0",
            1,
            ch[0],
            7,
            ConvGeometry::same(7),
            seed,
        )?;
        let mut stages = Vec::with_capacity(4);
        let mut cin = ch[0];
        for (s, (&n_blocks, &cout)) in config.blocks.iter().zip(&ch).enumerate() {
            let mut blocks = Vec::with_capacity(n_blocks);
            for b in 0..n_blocks {
                let stride = if b == 0 { STAGE_STRIDES[s] } else { (1, 1) };
                let name = format!("backbone.stage{}.block{}", s + 1, b + 1);
                blocks.push(BasicBlock::new(store, &name, cin, cout, stride, seed)?);
                cin = cout;
            }
            stages.push(blocks);
        }
        Ok(Backbone { config, conv0, stages })
    }

    /// Checks the (N, 1, T, 64) input contract: even T ≥ 2.
    pub fn check_input(shape: crate::tensor::Shape) -> Result<()> {
        if shape.c() != 1 || shape.f() != N_MELS {
            return Err(Error::shape(format!(
                "backbone input must be (N, 1, T, {N_MELS}), got {shape}"
            )));
        }
        if shape.t() < 2 || !shape.t().is_multiple_of(2) {
            return Err(Error::InvalidInput(format!(
                "backbone needs an even number of frames >= 2, got {}",
                shape.t()
            )));
        }
        Ok(())
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<BackboneFeatures> {
        Self::check_input(g.shape(x))?;
        let y = self.conv0.forward(g, x)?;
        let mut y = g.relu(y);
        let mut c = [y; 4];
        for (s, blocks) in self.stages.iter().enumerate() {
            for block in blocks {
                y = block.forward(g, y)?;
            }
            c[s] = y;
        }
        Ok(BackboneFeatures { c })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernels::Mode;
    use crate::tensor::{Shape, Tensor};

    #[test]
    fn layout_matches_resnet34() {
        let mut store = ParamStore::<f32>::new();
        let bb = Backbone::new(&mut store, BackboneConfig::default(), 1).unwrap();
        let counts: Vec<usize> = bb.stages.iter().map(|s| s.len()).collect();
        assert_eq!(counts, vec![3, 4, 6, 3]);
        for (s, blocks) in bb.stages.iter().enumerate() {
            let want = 32 << s;
            for (b, block) in blocks.iter().enumerate() {
                assert_eq!(block.conv2.conv.out_channels, want);
                // only the first block of each stage changes shape
                assert_eq!(block.shortcut.is_some(), b == 0, "stage {} block {}", s + 1, b + 1);
            }
        }
        assert!(store.find("backbone.stage2.block1.conv1.weight").is_some());
    }

    #[test]
    fn rejects_bad_inputs() {
        let mut store = ParamStore::<f32>::new();
        let cfg = BackboneConfig { base_channels: 4, blocks: [1, 1, 1, 1] };
        let bb = Backbone::new(&mut store, cfg, 1).unwrap();
        let mut g = Graph::new(&mut store, Mode::Infer);
        let odd = g.input(Tensor::zeros(Shape::new(1, 1, 7, 64)));
        assert!(matches!(bb.forward(&mut g, odd), Err(Error::InvalidInput(_))));
        let wrong_f = g.input(Tensor::zeros(Shape::new(1, 1, 8, 40)));
        assert!(matches!(bb.forward(&mut g, wrong_f), Err(Error::Shape(_))));
    }
}
