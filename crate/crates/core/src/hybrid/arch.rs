use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerKind {
    StandardConv,
    DepthwiseConv,
    PointwiseConv,
    GlobalPool,
    Dense,
}

impl LayerKind {
    /// Layers that a quantization plan may replace (everything except
    /// depthwise convolutions and pooling).
    pub fn is_quantizable_conv(self) -> bool {
        matches!(self, LayerKind::StandardConv | LayerKind::PointwiseConv)
    }
}

/// One layer with fully resolved shapes.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerDesc {
    pub kind: LayerKind,
    pub c_in: usize,
    pub c_out: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub in_hw: (usize, usize),
    pub out_hw: (usize, usize),
}

impl LayerDesc {
    pub fn positions(&self) -> u64 {
        (self.out_hw.0 * self.out_hw.1) as u64
    }

    /// Weight entries of the full-precision layer (bias excluded).
    pub fn weight_count(&self) -> u64 {
        let kk = (self.k * self.k) as u64;
        match self.kind {
            LayerKind::StandardConv | LayerKind::PointwiseConv => {
                self.c_out as u64 * self.c_in as u64 * kk
            }
            LayerKind::DepthwiseConv => self.c_in as u64 * kk,
            LayerKind::Dense => self.c_out as u64 * self.c_in as u64,
            LayerKind::GlobalPool => 0,
        }
    }

    /// Multiply-accumulates of the full-precision layer.
    pub fn macs(&self) -> u64 {
        match self.kind {
            LayerKind::Dense => self.weight_count(),
            LayerKind::GlobalPool => 0,
            _ => self.positions() * self.weight_count(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArchSpec {
    pub name: String,
    pub width_multiplier: f64,
    pub resolution: usize,
    pub in_channels: usize,
    pub num_classes: usize,
    pub layers: Vec<LayerDesc>,
}

/// Nearest integer with ties rounded up.
pub fn round_half_up(x: f64) -> usize {
    (x + 0.5).floor().max(0.0) as usize
}

/// Channel count under a width multiplier: nearest even count, at least 1.
pub fn scale_channels(c: usize, width: f64) -> usize {
    (2 * round_half_up(c as f64 * width / 2.0)).max(1)
}

fn out_extent(x: usize, k: usize, stride: usize, pad: usize) -> Result<usize> {
    let span = x + 2 * pad;
    if span < k {
        return Err(Error::invalid(format!(
            "input extent {x} too small for kernel {k}"
        )));
    }
    Ok((span - k) / stride + 1)
}

struct Builder {
    layers: Vec<LayerDesc>,
    c: usize,
    hw: (usize, usize),
}

impl Builder {
    fn push(&mut self, kind: LayerKind, c_out: usize, k: usize, stride: usize) -> Result<()> {
        let pad = k / 2;
        let out_hw = match kind {
            LayerKind::GlobalPool | LayerKind::Dense => (1, 1),
            _ => (
                out_extent(self.hw.0, k, stride, pad)?,
                out_extent(self.hw.1, k, stride, pad)?,
            ),
        };
        let (k, stride, pad) = match kind {
            LayerKind::GlobalPool | LayerKind::Dense => (1, 1, 0),
            _ => (k, stride, pad),
        };
        self.layers.push(LayerDesc {
            kind,
            c_in: self.c,
            c_out,
            k,
            stride,
            pad,
            in_hw: self.hw,
            out_hw,
        });
        self.c = c_out;
        self.hw = out_hw;
        Ok(())
    }

    fn ds_block(&mut self, c_out: usize, stride: usize) -> Result<()> {
        let c = self.c;
        self.push(LayerKind::DepthwiseConv, c, 3, stride)?;
        self.push(LayerKind::PointwiseConv, c_out, 1, 1)
    }
}

/// MobileNets-V1 body: a 3x3/2 stem, 13 depthwise-separable blocks, global
/// average pooling and a 1000-way dense layer.
pub fn build_mobilenets_v1(width_multiplier: f64, resolution: usize) -> Result<ArchSpec> {
    if !(width_multiplier > 0.0 && width_multiplier <= 1.0) {
        return Err(Error::invalid(format!(
            "width multiplier must lie in (0, 1], got {width_multiplier}"
        )));
    }
    if resolution < 32 || resolution % 32 != 0 {
        return Err(Error::invalid(format!(
            "resolution must be a positive multiple of 32, got {resolution}"
        )));
    }
    let w = |c: usize| scale_channels(c, width_multiplier);
    let mut b = Builder {
        layers: Vec::new(),
        c: 3,
        hw: (resolution, resolution),
    };
    b.push(LayerKind::StandardConv, w(32), 3, 2)?;
    let blocks = [
        (64, 1),
        (128, 2),
        (128, 1),
        (256, 2),
        (256, 1),
        (512, 2),
        (512, 1),
        (512, 1),
        (512, 1),
        (512, 1),
        (512, 1),
        (1024, 2),
        (1024, 1),
    ];
    for (c, s) in blocks {
        b.ds_block(w(c), s)?;
    }
    let c = b.c;
    b.push(LayerKind::GlobalPool, c, 1, 1)?;
    b.push(LayerKind::Dense, 1000, 1, 1)?;
    Ok(ArchSpec {
        name: "mobilenet-v1".into(),
        width_multiplier,
        resolution,
        in_channels: 3,
        num_classes: 1000,
        layers: b.layers,
    })
}

/// Desk-scale network: 32x32x3 input, 3x3/16 stem, depthwise-separable
/// blocks 16->32 (stride 1), 32->64 (stride 2), 64->64 (stride 2), pooling
/// and a dense classifier.
pub fn build_tinynet(num_classes: usize) -> Result<ArchSpec> {
    if num_classes < 2 {
        return Err(Error::invalid(format!(
            "need at least 2 classes, got {num_classes}"
        )));
    }
    let mut b = Builder {
        layers: Vec::new(),
        c: 3,
        hw: (32, 32),
    };
    b.push(LayerKind::StandardConv, 16, 3, 1)?;
    b.ds_block(32, 1)?;
    b.ds_block(64, 2)?;
    b.ds_block(64, 2)?;
    b.push(LayerKind::GlobalPool, 64, 1, 1)?;
    b.push(LayerKind::Dense, num_classes, 1, 1)?;
    Ok(ArchSpec {
        name: "tinynet".into(),
        width_multiplier: 1.0,
        resolution: 32,
        in_channels: 3,
        num_classes,
        layers: b.layers,
    })
}

impl ArchSpec {
    /// Builds a named architecture.
    pub fn named(name: &str, width: f64, resolution: usize, num_classes: usize) -> Result<Self> {
        match name {
            "mobilenet-v1" => build_mobilenets_v1(width, resolution),
            "tinynet" => build_tinynet(num_classes),
            other => Err(Error::invalid(format!("unknown architecture '{other}'"))),
        }
    }

    /// Checks that consecutive layers chain.
    pub fn validate(&self) -> Result<()> {
        let mut c = self.in_channels;
        let mut hw = (self.resolution, self.resolution);
        for (i, l) in self.layers.iter().enumerate() {
            if l.c_in != c || l.in_hw != hw {
                return Err(Error::invalid(format!(
                    "layer {i} does not chain: expects {}x{:?}, gets {c}x{hw:?}",
                    l.c_in, l.in_hw
                )));
            }
            if l.kind == LayerKind::DepthwiseConv && l.c_out != l.c_in {
                return Err(Error::invalid(format!(
                    "depthwise layer {i} changes channel count"
                )));
            }
            c = l.c_out;
            hw = l.out_hw;
        }
        match self.layers.last() {
            Some(l) if l.kind == LayerKind::Dense && l.c_out == self.num_classes => Ok(()),
            _ => Err(Error::invalid(
                "architecture must end in a dense layer over the classes",
            )),
        }
    }

    pub fn total_macs(&self) -> u64 {
        self.layers.iter().map(LayerDesc::macs).sum()
    }

    pub fn weight_count(&self) -> u64 {
        self.layers.iter().map(LayerDesc::weight_count).sum()
    }
}
