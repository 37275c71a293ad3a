//! Disentanglement generator and multiscale patch discriminators.
//!
//! The generator is an encoder-decoder with U-Net shortcuts. The encoder is
//! deliberately heavier than the decoder (more channels, deeper at low
//! resolution); an Early Spoof Regressor (ESR) head on the bottleneck emits
//! the spoofness map `M`, the `s`/`b` head reads the bottleneck through a
//! global pool, `C` comes off the `N/4` decoder stage and `T` off the final
//! full-resolution stage. Three identical discriminators see the input at
//! scales 1, 1/2 and 1/4 and emit 2-channel patch maps (channel 0 live,
//! channel 1 spoof).
//!
//! Every conv and transpose conv except the output heads is followed by a
//! leaky ReLU and batch normalization.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::tensor::{BnStats, Graph, Mode, Padding, Tensor, Var};
use crate::trace::TraceVars;

pub const LEAKY_SLOPE: f64 = 0.2;
pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.9;
/// Conv weights are initialized from Normal(0, WEIGHT_STD).
pub const WEIGHT_STD: f64 = 0.02;

/// Encoder stage output widths (after each downsampling).
pub const ENC_WIDTHS: [usize; 3] = [32, 64, 96];
/// Decoder stage output widths.
pub const DEC_WIDTHS: [usize; 3] = [64, 32, 16];
/// Discriminator conv widths (7 convs, 3 of them stride-2).
pub const DISC_WIDTHS: [usize; 6] = [16, 16, 32, 32, 48, 48];

const STEM_WIDTH: usize = ENC_WIDTHS[0] / 2;
const ESR_WIDTHS: [usize; 2] = [64, 32];
const SB_WIDTH: usize = 32;

/// Conv (or transpose conv) followed by leaky ReLU + batch norm.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvBlock<P> {
    pub w: P,
    pub b: P,
    pub gamma: P,
    pub beta: P,
}

/// Bare conv layer (output heads, no normalization).
#[derive(Clone, Debug, PartialEq)]
pub struct ConvLayer<P> {
    pub w: P,
    pub b: P,
}

impl<P> ConvBlock<P> {
    fn map<Q>(&self, f: &mut impl FnMut(&P) -> Q) -> ConvBlock<Q> {
        ConvBlock {
            w: f(&self.w),
            b: f(&self.b),
            gamma: f(&self.gamma),
            beta: f(&self.beta),
        }
    }

    fn push<'a>(&'a self, out: &mut Vec<&'a P>) {
        out.extend([&self.w, &self.b, &self.gamma, &self.beta]);
    }

    fn push_mut<'a>(&'a mut self, out: &mut Vec<&'a mut P>) {
        out.extend([&mut self.w, &mut self.b, &mut self.gamma, &mut self.beta]);
    }
}

impl<P> ConvLayer<P> {
    fn map<Q>(&self, f: &mut impl FnMut(&P) -> Q) -> ConvLayer<Q> {
        ConvLayer {
            w: f(&self.w),
            b: f(&self.b),
        }
    }

    fn push<'a>(&'a self, out: &mut Vec<&'a P>) {
        out.extend([&self.w, &self.b]);
    }

    fn push_mut<'a>(&'a mut self, out: &mut Vec<&'a mut P>) {
        out.extend([&mut self.w, &mut self.b]);
    }
}

impl ConvBlock<Tensor> {
    /// `kdims` is the raw kernel shape; `bn_c` the normalized channel count
    /// (conv: `kdims[3]`, transpose conv: `kdims[2]`).
    fn init(rng: &mut ChaCha8Rng, kdims: [usize; 4], bn_c: usize) -> Self {
        ConvBlock {
            w: normal_tensor(rng, &kdims),
            b: Tensor::zeros(&[kdims[3]]),
            gamma: Tensor::filled(&[bn_c], 1.0),
            beta: Tensor::zeros(&[bn_c]),
        }
    }

    fn init_t(rng: &mut ChaCha8Rng, kdims: [usize; 4]) -> Self {
        let mut b = Self::init(rng, kdims, kdims[2]);
        // Transpose conv output channel count is kdims[2].
        b.b = Tensor::zeros(&[kdims[2]]);
        b
    }
}

impl ConvLayer<Tensor> {
    fn init(rng: &mut ChaCha8Rng, kdims: [usize; 4]) -> Self {
        ConvLayer {
            w: normal_tensor(rng, &kdims),
            b: Tensor::zeros(&[kdims[3]]),
        }
    }
}

fn normal_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let dist = Normal::new(0.0, WEIGHT_STD).unwrap();
    let n: usize = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| dist.sample(rng)).collect()).unwrap()
}

/// Generator parameters, generic over storage (`Tensor` when held, `Var`
/// when bound onto a graph).
#[derive(Clone, Debug, PartialEq)]
pub struct GeneratorNet<P> {
    pub stem: ConvBlock<P>,
    pub enc1: ConvBlock<P>,
    pub enc2: ConvBlock<P>,
    pub enc3: ConvBlock<P>,
    pub enc4: ConvBlock<P>,
    pub enc5: ConvBlock<P>,
    pub esr1: ConvBlock<P>,
    pub esr2: ConvBlock<P>,
    pub esr_out: ConvLayer<P>,
    pub sb1: ConvBlock<P>,
    pub sb_out: ConvLayer<P>,
    pub up1: ConvBlock<P>,
    pub c_out: ConvLayer<P>,
    pub up2: ConvBlock<P>,
    pub up3: ConvBlock<P>,
    pub t_out: ConvLayer<P>,
}

impl<P> GeneratorNet<P> {
    /// Structure-preserving map. Visits fields in declaration order — the
    /// same order as [`Self::params`].
    pub fn map<Q>(&self, f: &mut impl FnMut(&P) -> Q) -> GeneratorNet<Q> {
        GeneratorNet {
            stem: self.stem.map(f),
            enc1: self.enc1.map(f),
            enc2: self.enc2.map(f),
            enc3: self.enc3.map(f),
            enc4: self.enc4.map(f),
            enc5: self.enc5.map(f),
            esr1: self.esr1.map(f),
            esr2: self.esr2.map(f),
            esr_out: self.esr_out.map(f),
            sb1: self.sb1.map(f),
            sb_out: self.sb_out.map(f),
            up1: self.up1.map(f),
            c_out: self.c_out.map(f),
            up2: self.up2.map(f),
            up3: self.up3.map(f),
            t_out: self.t_out.map(f),
        }
    }

    pub fn params(&self) -> Vec<&P> {
        let mut out = Vec::with_capacity(60);
        self.stem.push(&mut out);
        self.enc1.push(&mut out);
        self.enc2.push(&mut out);
        self.enc3.push(&mut out);
        self.enc4.push(&mut out);
        self.enc5.push(&mut out);
        self.esr1.push(&mut out);
        self.esr2.push(&mut out);
        self.esr_out.push(&mut out);
        self.sb1.push(&mut out);
        self.sb_out.push(&mut out);
        self.up1.push(&mut out);
        self.c_out.push(&mut out);
        self.up2.push(&mut out);
        self.up3.push(&mut out);
        self.t_out.push(&mut out);
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut P> {
        let mut out = Vec::with_capacity(60);
        self.stem.push_mut(&mut out);
        self.enc1.push_mut(&mut out);
        self.enc2.push_mut(&mut out);
        self.enc3.push_mut(&mut out);
        self.enc4.push_mut(&mut out);
        self.enc5.push_mut(&mut out);
        self.esr1.push_mut(&mut out);
        self.esr2.push_mut(&mut out);
        self.esr_out.push_mut(&mut out);
        self.sb1.push_mut(&mut out);
        self.sb_out.push_mut(&mut out);
        self.up1.push_mut(&mut out);
        self.c_out.push_mut(&mut out);
        self.up2.push_mut(&mut out);
        self.up3.push_mut(&mut out);
        self.t_out.push_mut(&mut out);
        out
    }
}

/// Number of batch-norm blocks in the generator.
pub const GEN_BN_BLOCKS: usize = 12;
/// Number of batch-norm blocks per discriminator.
pub const DISC_BN_BLOCKS: usize = 6;

/// Generator with its running batch-norm buffers.
#[derive(Clone, Debug, PartialEq)]
pub struct Generator {
    pub net: GeneratorNet<Tensor>,
    pub bn: Vec<BnStats>,
    pub n: usize,
}

impl Generator {
    /// Fresh generator for `n x n` inputs; conv kernels ~ Normal(0, 0.02),
    /// biases zero, batch-norm gamma 1 / beta 0.
    pub fn init(n: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        if n % 16 != 0 {
            return Err(Error::Dimension(format!(
                "image size {n} must be divisible by 16"
            )));
        }
        let [e0, e1, e2] = ENC_WIDTHS;
        let [d0, d1, d2] = DEC_WIDTHS;
        let net = GeneratorNet {
            stem: ConvBlock::init(rng, [3, 3, 3, STEM_WIDTH], STEM_WIDTH),
            enc1: ConvBlock::init(rng, [3, 3, STEM_WIDTH, e0], e0),
            enc2: ConvBlock::init(rng, [3, 3, e0, e1], e1),
            enc3: ConvBlock::init(rng, [3, 3, e1, e2], e2),
            enc4: ConvBlock::init(rng, [3, 3, e2, e2], e2),
            enc5: ConvBlock::init(rng, [3, 3, e2, e2], e2),
            esr1: ConvBlock::init(rng, [3, 3, e2, ESR_WIDTHS[0]], ESR_WIDTHS[0]),
            esr2: ConvBlock::init(rng, [3, 3, ESR_WIDTHS[0], ESR_WIDTHS[1]], ESR_WIDTHS[1]),
            esr_out: ConvLayer::init(rng, [1, 1, ESR_WIDTHS[1], 1]),
            sb1: ConvBlock::init(rng, [3, 3, e2, SB_WIDTH], SB_WIDTH),
            sb_out: ConvLayer::init(rng, [1, 1, SB_WIDTH, 6]),
            up1: ConvBlock::init_t(rng, [3, 3, d0, e2]),
            c_out: ConvLayer::init(rng, [3, 3, d0 + e1, 3]),
            up2: ConvBlock::init_t(rng, [3, 3, d1, d0 + e1]),
            up3: ConvBlock::init_t(rng, [3, 3, d2, d1 + e0]),
            t_out: ConvLayer::init(rng, [3, 3, d2 + STEM_WIDTH, 3]),
        };
        let bn_channels = [
            STEM_WIDTH,
            e0,
            e1,
            e2,
            e2,
            e2,
            ESR_WIDTHS[0],
            ESR_WIDTHS[1],
            SB_WIDTH,
            d0,
            d1,
            d2,
        ];
        Ok(Generator {
            net,
            bn: bn_channels.iter().map(|&c| BnStats::new(c)).collect(),
            n,
        })
    }

    /// Load every trainable parameter onto a graph.
    pub fn bind(&self, g: &Graph, trainable: bool) -> GeneratorNet<Var> {
        self.net.map(&mut |t: &Tensor| g.leaf(t.clone(), trainable))
    }

    /// Total trainable scalar count of the encoder path.
    pub fn encoder_param_count(&self) -> usize {
        [
            &self.net.stem,
            &self.net.enc1,
            &self.net.enc2,
            &self.net.enc3,
            &self.net.enc4,
            &self.net.enc5,
        ]
        .iter()
        .map(|b| b.w.len() + b.b.len() + b.gamma.len() + b.beta.len())
        .sum()
    }

    /// Total trainable scalar count of the decoder path and its heads.
    pub fn decoder_param_count(&self) -> usize {
        let blocks = [&self.net.sb1, &self.net.up1, &self.net.up2, &self.net.up3]
            .iter()
            .map(|b| b.w.len() + b.b.len() + b.gamma.len() + b.beta.len())
            .sum::<usize>();
        let layers = [&self.net.sb_out, &self.net.c_out, &self.net.t_out]
            .iter()
            .map(|l| l.w.len() + l.b.len())
            .sum::<usize>();
        blocks + layers
    }
}

/// One patch discriminator with its running batch-norm buffers.
#[derive(Clone, Debug, PartialEq)]
pub struct DiscriminatorNet<P> {
    pub c1: ConvBlock<P>,
    pub c2: ConvBlock<P>,
    pub c3: ConvBlock<P>,
    pub c4: ConvBlock<P>,
    pub c5: ConvBlock<P>,
    pub c6: ConvBlock<P>,
    pub c7: ConvLayer<P>,
}

impl<P> DiscriminatorNet<P> {
    pub fn map<Q>(&self, f: &mut impl FnMut(&P) -> Q) -> DiscriminatorNet<Q> {
        DiscriminatorNet {
            c1: self.c1.map(f),
            c2: self.c2.map(f),
            c3: self.c3.map(f),
            c4: self.c4.map(f),
            c5: self.c5.map(f),
            c6: self.c6.map(f),
            c7: self.c7.map(f),
        }
    }

    pub fn params(&self) -> Vec<&P> {
        let mut out = Vec::with_capacity(26);
        self.c1.push(&mut out);
        self.c2.push(&mut out);
        self.c3.push(&mut out);
        self.c4.push(&mut out);
        self.c5.push(&mut out);
        self.c6.push(&mut out);
        self.c7.push(&mut out);
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut P> {
        let mut out = Vec::with_capacity(26);
        self.c1.push_mut(&mut out);
        self.c2.push_mut(&mut out);
        self.c3.push_mut(&mut out);
        self.c4.push_mut(&mut out);
        self.c5.push_mut(&mut out);
        self.c6.push_mut(&mut out);
        self.c7.push_mut(&mut out);
        out
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Discriminator {
    pub net: DiscriminatorNet<Tensor>,
    pub bn: Vec<BnStats>,
}

impl Discriminator {
    pub fn init(rng: &mut ChaCha8Rng) -> Self {
        let [w1, w2, w3, w4, w5, w6] = DISC_WIDTHS;
        let net = DiscriminatorNet {
            c1: ConvBlock::init(rng, [3, 3, 3, w1], w1),
            c2: ConvBlock::init(rng, [3, 3, w1, w2], w2),
            c3: ConvBlock::init(rng, [3, 3, w2, w3], w3),
            c4: ConvBlock::init(rng, [3, 3, w3, w4], w4),
            c5: ConvBlock::init(rng, [3, 3, w4, w5], w5),
            c6: ConvBlock::init(rng, [3, 3, w5, w6], w6),
            c7: ConvLayer::init(rng, [3, 3, w6, 2]),
        };
        Discriminator {
            net,
            bn: DISC_WIDTHS.iter().map(|&c| BnStats::new(c)).collect(),
        }
    }

    pub fn bind(&self, g: &Graph, trainable: bool) -> DiscriminatorNet<Var> {
        self.net.map(&mut |t: &Tensor| g.leaf(t.clone(), trainable))
    }
}

fn conv_block(
    g: &Graph,
    blk: &ConvBlock<Var>,
    bn: &mut BnStats,
    x: Var,
    stride: usize,
    mode: Mode,
) -> Result<Var> {
    let y = g.conv2d(x, blk.w, stride, Padding::Same)?;
    let y = g.add_bias(y, blk.b)?;
    let y = g.leaky_relu(y, LEAKY_SLOPE);
    g.batchnorm(y, blk.gamma, blk.beta, bn, mode, BN_MOMENTUM, BN_EPS)
}

fn tconv_block(
    g: &Graph,
    blk: &ConvBlock<Var>,
    bn: &mut BnStats,
    x: Var,
    mode: Mode,
) -> Result<Var> {
    let y = g.transpose_conv2d(x, blk.w, 2)?;
    let y = g.add_bias(y, blk.b)?;
    let y = g.leaky_relu(y, LEAKY_SLOPE);
    g.batchnorm(y, blk.gamma, blk.beta, bn, mode, BN_MOMENTUM, BN_EPS)
}

fn head(g: &Graph, layer: &ConvLayer<Var>, x: Var, stride: usize) -> Result<Var> {
    let y = g.conv2d(x, layer.w, stride, Padding::Same)?;
    g.add_bias(y, layer.b)
}

/// Full generator pass: trace elements plus the ESR spoofness map
/// (`[B, N/16, N/16, 1]`, sigmoid).
pub fn generator_forward(
    g: &Graph,
    net: &GeneratorNet<Var>,
    bn: &mut [BnStats],
    img: Var,
    mode: Mode,
) -> Result<(TraceVars, Var)> {
    let d = g.with_value(img, |t| t.dims4())?;
    if d[1] % 16 != 0 || d[1] != d[2] || d[3] != 3 {
        return Err(Error::Dimension(format!(
            "generator expects [B,N,N,3] with N divisible by 16, got {:?}",
            d
        )));
    }
    debug_assert_eq!(bn.len(), GEN_BN_BLOCKS);
    let a0 = conv_block(g, &net.stem, &mut bn[0], img, 1, mode)?;
    let a1 = conv_block(g, &net.enc1, &mut bn[1], a0, 2, mode)?;
    let a2 = conv_block(g, &net.enc2, &mut bn[2], a1, 2, mode)?;
    let a3 = conv_block(g, &net.enc3, &mut bn[3], a2, 2, mode)?;
    let a4 = conv_block(g, &net.enc4, &mut bn[4], a3, 1, mode)?;
    let f = conv_block(g, &net.enc5, &mut bn[5], a4, 1, mode)?;

    // ESR reads the bottleneck only.
    let e1 = conv_block(g, &net.esr1, &mut bn[6], f, 2, mode)?;
    let e2 = conv_block(g, &net.esr2, &mut bn[7], e1, 1, mode)?;
    let m = g.sigmoid(head(g, &net.esr_out, e2, 1)?);

    // s/b head: global pooling at the decoder entry.
    let sb = conv_block(g, &net.sb1, &mut bn[8], f, 1, mode)?;
    let pooled = g.mean_spatial(sb)?;
    let sb_o = g.tanh(head(g, &net.sb_out, pooled, 1)?);
    let s_color = g.slice_channels(sb_o, 0, 3)?;
    let b = g.slice_channels(sb_o, 3, 6)?;

    let d1 = tconv_block(g, &net.up1, &mut bn[9], f, mode)?;
    let cat1 = g.concat_channels(d1, a2)?;
    let c = g.mul_scalar(g.tanh(head(g, &net.c_out, cat1, 1)?), 0.5);

    let d2 = tconv_block(g, &net.up2, &mut bn[10], cat1, mode)?;
    let cat2 = g.concat_channels(d2, a1)?;
    let d3 = tconv_block(g, &net.up3, &mut bn[11], cat2, mode)?;
    let cat3 = g.concat_channels(d3, a0)?;
    let t = g.mul_scalar(g.tanh(head(g, &net.t_out, cat3, 1)?), 0.5);

    Ok((TraceVars { s_color, b, c, t }, m))
}

/// One discriminator at its native scale: 7 convs, 3 stride-2, 2-channel
/// patch map out.
pub fn discriminator_forward(
    g: &Graph,
    net: &DiscriminatorNet<Var>,
    bn: &mut [BnStats],
    img: Var,
    mode: Mode,
) -> Result<Var> {
    debug_assert_eq!(bn.len(), DISC_BN_BLOCKS);
    let y = conv_block(g, &net.c1, &mut bn[0], img, 1, mode)?;
    let y = conv_block(g, &net.c2, &mut bn[1], y, 2, mode)?;
    let y = conv_block(g, &net.c3, &mut bn[2], y, 1, mode)?;
    let y = conv_block(g, &net.c4, &mut bn[3], y, 2, mode)?;
    let y = conv_block(g, &net.c5, &mut bn[4], y, 1, mode)?;
    let y = conv_block(g, &net.c6, &mut bn[5], y, 2, mode)?;
    head(g, &net.c7, y, 1)
}

/// All three discriminators on the same batch, fed at scales 1, 1/2, 1/4.
pub fn multiscale_forward(
    g: &Graph,
    nets: &[DiscriminatorNet<Var>; 3],
    bns: &mut [&mut Vec<BnStats>; 3],
    img: Var,
    mode: Mode,
) -> Result<[Var; 3]> {
    let d = g.with_value(img, |t| t.dims4())?;
    if d[1] % 4 != 0 {
        return Err(Error::Dimension(format!(
            "multiscale input size {} must be divisible by 4",
            d[1]
        )));
    }
    let half = g.resize_bilinear(img, d[1] / 2, d[2] / 2)?;
    let quarter = g.resize_bilinear(img, d[1] / 4, d[2] / 4)?;
    Ok([
        discriminator_forward(g, &nets[0], bns[0], img, mode)?,
        discriminator_forward(g, &nets[1], bns[1], half, mode)?,
        discriminator_forward(g, &nets[2], bns[2], quarter, mode)?,
    ])
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn rand_img(rng: &mut ChaCha8Rng, b: usize, n: usize) -> Tensor {
        Tensor::new(
            &[b, n, n, 3],
            (0..b * n * n * 3).map(|_| rng.gen_range(0.0..1.0)).collect(),
        )
        .unwrap()
    }

    #[test]
    fn generator_output_shapes_follow_contract() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for n in [32usize, 64] {
            let mut gen = Generator::init(n, &mut rng).unwrap();
            let g = Graph::new();
            let net = gen.bind(&g, false);
            let img = g.constant(rand_img(&mut rng, 2, n));
            let (tv, m) = generator_forward(&g, &net, &mut gen.bn, img, Mode::Eval).unwrap();
            assert_eq!(g.shape(tv.s_color), [2, 1, 1, 3]);
            assert_eq!(g.shape(tv.b), [2, 1, 1, 3]);
            assert_eq!(g.shape(tv.c), [2, n / 4, n / 4, 3]);
            assert_eq!(g.shape(tv.t), [2, n, n, 3]);
            assert_eq!(g.shape(m), [2, n / 16, n / 16, 1]);
        }
    }

    #[test]
    fn fresh_generator_heads_are_bounded() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut gen = Generator::init(64, &mut rng).unwrap();
        let g = Graph::new();
        let net = gen.bind(&g, false);
        let img = g.constant(rand_img(&mut rng, 1, 64));
        let (tv, m) = generator_forward(&g, &net, &mut gen.bn, img, Mode::Eval).unwrap();
        for v in [tv.s_color, tv.b] {
            assert!(g.value(v).data().iter().all(|x| x.abs() <= 1.0));
        }
        assert!(g
            .value(m)
            .data()
            .iter()
            .all(|&x| x > 0.0 && x < 1.0 && x.is_finite()));
        for v in [tv.c, tv.t] {
            assert!(g.value(v).data().iter().all(|x| x.is_finite()));
        }
    }

    #[test]
    fn discriminator_map_shapes() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for b in 1..=4 {
            let mut ds = [
                Discriminator::init(&mut rng),
                Discriminator::init(&mut rng),
                Discriminator::init(&mut rng),
            ];
            let g = Graph::new();
            let nets = [
                ds[0].bind(&g, false),
                ds[1].bind(&g, false),
                ds[2].bind(&g, false),
            ];
            let img = g.constant(rand_img(&mut rng, b, 64));
            let [d0, d1, d2] = {
                let [a, bb, c] = &mut ds;
                let mut bns = [&mut a.bn, &mut bb.bn, &mut c.bn];
                multiscale_forward(&g, &nets, &mut bns, img, Mode::Eval).unwrap()
            };
            assert_eq!(g.shape(d0), [b, 8, 8, 2]);
            assert_eq!(g.shape(d1), [b, 4, 4, 2]);
            assert_eq!(g.shape(d2), [b, 2, 2, 2]);
        }
    }

    #[test]
    fn encoder_is_heavier_than_decoder() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let gen = Generator::init(64, &mut rng).unwrap();
        assert!(
            gen.encoder_param_count() > gen.decoder_param_count(),
            "encoder {} <= decoder {}",
            gen.encoder_param_count(),
            gen.decoder_param_count()
        );
    }

    #[test]
    fn init_weight_std_matches_target() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let gen = Generator::init(64, &mut rng).unwrap();
        // Pool all conv kernel weights; biases and batch-norm params excluded.
        let mut ws: Vec<f64> = Vec::new();
        for p in gen.net.params() {
            if p.rank() == 4 {
                ws.extend_from_slice(p.data());
            }
        }
        assert!(ws.len() >= 100_000, "only {} kernel weights", ws.len());
        let mean = ws.iter().sum::<f64>() / ws.len() as f64;
        let std =
            (ws.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / ws.len() as f64).sqrt();
        assert!(mean.abs() < 1e-3, "mean {mean}");
        assert!((std - WEIGHT_STD).abs() <= 0.001, "std {std}");
    }

    #[test]
    fn init_is_seed_deterministic() {
        let a = Generator::init(64, &mut ChaCha8Rng::seed_from_u64(7)).unwrap();
        let b = Generator::init(64, &mut ChaCha8Rng::seed_from_u64(7)).unwrap();
        let c = Generator::init(64, &mut ChaCha8Rng::seed_from_u64(8)).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn eval_forward_is_pure() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut gen = Generator::init(32, &mut rng).unwrap();
        let img = rand_img(&mut rng, 1, 32);
        let run = |gen: &mut Generator| {
            let g = Graph::new();
            let net = gen.bind(&g, false);
            let iv = g.constant(img.clone());
            let (tv, m) = generator_forward(&g, &net, &mut gen.bn, iv, Mode::Eval).unwrap();
            (g.value(tv.t), g.value(m))
        };
        let (t1, m1) = run(&mut gen);
        let (t2, m2) = run(&mut gen);
        assert_eq!(t1, t2);
        assert_eq!(m1, m2);
    }

    #[test]
    fn esr_depends_only_on_bottleneck() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut gen = Generator::init(32, &mut rng).unwrap();
        let img = rand_img(&mut rng, 1, 32);
        let m_of = |gen: &mut Generator| {
            let g = Graph::new();
            let net = gen.bind(&g, false);
            let iv = g.constant(img.clone());
            let (_, m) = generator_forward(&g, &net, &mut gen.bn, iv, Mode::Eval).unwrap();
            g.value(m)
        };
        let before = m_of(&mut gen);
        // Zero every decoder-side parameter.
        for blk in [&mut gen.net.sb1, &mut gen.net.up1, &mut gen.net.up2, &mut gen.net.up3] {
            for t in [&mut blk.w, &mut blk.b, &mut blk.gamma, &mut blk.beta] {
                *t = Tensor::zeros(t.shape());
            }
        }
        for layer in [&mut gen.net.sb_out, &mut gen.net.c_out, &mut gen.net.t_out] {
            layer.w = Tensor::zeros(layer.w.shape());
            layer.b = Tensor::zeros(layer.b.shape());
        }
        let after = m_of(&mut gen);
        assert_eq!(before, after);
    }

    #[test]
    fn map_and_params_visit_same_order() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let gen = Generator::init(32, &mut rng).unwrap();
        let mut counter = 0usize;
        let indexed = gen.net.map(&mut |_| {
            let i = counter;
            counter += 1;
            i
        });
        let order: Vec<usize> = indexed.params().into_iter().copied().collect();
        assert_eq!(order, (0..order.len()).collect::<Vec<_>>());
        assert_eq!(order.len(), gen.net.params().len());
    }
}
