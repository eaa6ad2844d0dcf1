use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Architecture of the shared CNN → Transformer → projector network.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderConfig {
    /// Feature dimension F of the input frames.
    pub input_dim: usize,
    /// Output channels of each CNN block.
    pub cnn_channels: Vec<usize>,
    /// Time downsampling of the CNN. Only 2 is supported.
    pub downsample_factor: usize,
    pub transformer_blocks: usize,
    pub attention_dim: usize,
    pub attention_heads: usize,
    pub ffn_dim: usize,
    pub projector_hidden_dim: usize,
    /// Embedding dimension d.
    pub projector_output_dim: usize,
    pub positional_encoding: bool,
    /// Dropout inside transformer blocks, active only in train mode.
    pub dropout: f64,
}

impl EncoderConfig {
    /// Full-size VGG-Transformer layout with 83-dimensional input.
    pub fn full() -> Self {
        Self {
            input_dim: 83,
            cnn_channels: vec![64, 128],
            downsample_factor: 2,
            transformer_blocks: 12,
            attention_dim: 512,
            attention_heads: 8,
            ffn_dim: 2048,
            projector_hidden_dim: 2048,
            projector_output_dim: 256,
            positional_encoding: true,
            dropout: 0.1,
        }
    }

    /// Small layout that trains in seconds on a CPU.
    pub fn desk(input_dim: usize) -> Self {
        Self {
            input_dim,
            cnn_channels: vec![4],
            downsample_factor: 2,
            transformer_blocks: 2,
            attention_dim: 32,
            attention_heads: 4,
            ffn_dim: 64,
            projector_hidden_dim: 64,
            projector_output_dim: 32,
            positional_encoding: true,
            dropout: 0.1,
        }
    }

    /// Minimal layout for smoke tests and gradient checks.
    pub fn tiny(input_dim: usize) -> Self {
        Self {
            input_dim,
            cnn_channels: vec![2],
            downsample_factor: 2,
            transformer_blocks: 1,
            attention_dim: 8,
            attention_heads: 2,
            ffn_dim: 12,
            projector_hidden_dim: 10,
            projector_output_dim: 6,
            positional_encoding: true,
            dropout: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        if self.downsample_factor != 2 {
            return fail(format!(
                "downsample_factor must be 2, got {}",
                self.downsample_factor
            ));
        }
        if self.cnn_channels.is_empty() {
            return fail("at least one CNN block is required".into());
        }
        let dims = [
            ("input_dim", self.input_dim),
            ("attention_dim", self.attention_dim),
            ("attention_heads", self.attention_heads),
            ("ffn_dim", self.ffn_dim),
            ("projector_hidden_dim", self.projector_hidden_dim),
            ("projector_output_dim", self.projector_output_dim),
        ];
        for (name, v) in dims {
            if v == 0 {
                return fail(format!("{name} must be >= 1"));
            }
        }
        if self.cnn_channels.contains(&0) {
            return fail("cnn channel counts must be >= 1".into());
        }
        if !self.attention_dim.is_multiple_of(self.attention_heads) {
            return fail(format!(
                "attention_dim {} not divisible by {} heads",
                self.attention_dim, self.attention_heads
            ));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return fail(format!("dropout {} outside [0, 1)", self.dropout));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.attention_dim / self.attention_heads
    }

    /// Width of one CNN output frame: last channel count times F.
    pub fn cnn_output_dim(&self) -> usize {
        self.cnn_channels.last().copied().unwrap_or(1) * self.input_dim
    }

    /// Every trainable tensor as `(name, shape, fan_in)`, in a fixed order.
    ///
    /// `fan_in == 0` marks tensors that are initialized to constants.
    pub fn param_schema(&self) -> Vec<(String, Vec<usize>, usize)> {
        let mut s = Vec::new();
        let mut cin = 1;
        for (b, &cout) in self.cnn_channels.iter().enumerate() {
            for (conv, c_in) in [("conv1", cin), ("conv2", cout)] {
                s.push((
                    format!("cnn.{b}.{conv}.weight"),
                    vec![cout, c_in, 3, 3],
                    c_in * 9,
                ));
                s.push((format!("cnn.{b}.{conv}.bias"), vec![cout], 0));
            }
            cin = cout;
        }
        let a = self.attention_dim;
        linear(&mut s, "transformer.input", self.cnn_output_dim(), a);
        for b in 0..self.transformer_blocks {
            norm(&mut s, &format!("transformer.{b}.ln1"), a);
            for proj in ["q", "k", "v", "o"] {
                linear(&mut s, &format!("transformer.{b}.attn.{proj}"), a, a);
            }
            norm(&mut s, &format!("transformer.{b}.ln2"), a);
            linear(&mut s, &format!("transformer.{b}.ffn.fc1"), a, self.ffn_dim);
            linear(&mut s, &format!("transformer.{b}.ffn.fc2"), self.ffn_dim, a);
        }
        norm(&mut s, "transformer.final_ln", a);
        linear(&mut s, "projector.fc1", a, self.projector_hidden_dim);
        norm(&mut s, "projector.bn", self.projector_hidden_dim);
        linear(
            &mut s,
            "projector.fc2",
            self.projector_hidden_dim,
            self.projector_output_dim,
        );
        s
    }

    pub fn param_count(&self) -> usize {
        self.param_schema()
            .iter()
            .map(|(_, shape, _)| shape.iter().product::<usize>())
            .sum()
    }
}

fn linear(s: &mut Vec<(String, Vec<usize>, usize)>, name: &str, fan_in: usize, fan_out: usize) {
    s.push((format!("{name}.weight"), vec![fan_in, fan_out], fan_in));
    s.push((format!("{name}.bias"), vec![fan_out], 0));
}

fn norm(s: &mut Vec<(String, Vec<usize>, usize)>, name: &str, dim: usize) {
    s.push((format!("{name}.gamma"), vec![dim], 0));
    s.push((format!("{name}.beta"), vec![dim], 0));
}
