//! The `{s, b, C, T}` spoof-trace algebra.
//!
//! A trace is composed against an input image as
//! `G(I) = s (*) I + b + resize(C, N) + T` where `s, b` are per-channel
//! scalars, `C` is a low-resolution content pattern (`L = N/4`) and `T` a
//! full-resolution texture pattern. The live counterpart of an image is
//! `I - G(I)`; a new spoof is a live image plus a warped trace.

use std::io::{Read, Write};
use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::{Graph, Tensor, Var};
use crate::warp3d::{self, LandmarkSet};

/// Content-pattern resolution divisor: `L = N / CONTENT_DIVISOR`.
pub const CONTENT_DIVISOR: usize = 4;

/// One of the four trace elements.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TraceElementKind {
    ColorRange,
    ColorBalance,
    Content,
    Texture,
}

impl TraceElementKind {
    pub const ALL: [TraceElementKind; 4] = [
        TraceElementKind::ColorRange,
        TraceElementKind::ColorBalance,
        TraceElementKind::Content,
        TraceElementKind::Texture,
    ];

    fn tag(self) -> u8 {
        match self {
            TraceElementKind::ColorRange => b's',
            TraceElementKind::ColorBalance => b'b',
            TraceElementKind::Content => b'C',
            TraceElementKind::Texture => b'T',
        }
    }
}

/// Plain-tensor trace elements for a single sample.
///
/// Shapes: `s_color`, `b` are `[1,1,1,3]`; `c` is `[1,L,L,3]`; `t` is
/// `[1,N,N,3]`.
#[derive(Clone, Debug, PartialEq)]
pub struct TraceElements {
    pub s_color: Tensor,
    pub b: Tensor,
    pub c: Tensor,
    pub t: Tensor,
}

impl TraceElements {
    pub fn zeros(n: usize) -> Self {
        let l = n / CONTENT_DIVISOR;
        Self {
            s_color: Tensor::zeros(&[1, 1, 1, 3]),
            b: Tensor::zeros(&[1, 1, 1, 3]),
            c: Tensor::zeros(&[1, l, l, 3]),
            t: Tensor::zeros(&[1, n, n, 3]),
        }
    }

    pub fn validate(&self, n: usize) -> Result<()> {
        let l = n / CONTENT_DIVISOR;
        if l >= n {
            return Err(Error::Dimension(format!("content size {l} must be < {n}")));
        }
        for (name, t, want) in [
            ("s", &self.s_color, vec![1, 1, 1, 3]),
            ("b", &self.b, vec![1, 1, 1, 3]),
            ("C", &self.c, vec![1, l, l, 3]),
            ("T", &self.t, vec![1, n, n, 3]),
        ] {
            if t.shape() != want {
                return Err(Error::Dimension(format!(
                    "trace element {name}: shape {:?}, expected {:?}",
                    t.shape(),
                    want
                )));
            }
        }
        Ok(())
    }

    pub fn element(&self, kind: TraceElementKind) -> &Tensor {
        match kind {
            TraceElementKind::ColorRange => &self.s_color,
            TraceElementKind::ColorBalance => &self.b,
            TraceElementKind::Content => &self.c,
            TraceElementKind::Texture => &self.t,
        }
    }

    fn element_mut(&mut self, kind: TraceElementKind) -> &mut Tensor {
        match kind {
            TraceElementKind::ColorRange => &mut self.s_color,
            TraceElementKind::ColorBalance => &mut self.b,
            TraceElementKind::Content => &mut self.c,
            TraceElementKind::Texture => &mut self.t,
        }
    }
}

/// Graph-variable trace elements (batched).
#[derive(Clone, Copy, Debug)]
pub struct TraceVars {
    pub s_color: Var,
    pub b: Var,
    pub c: Var,
    pub t: Var,
}

impl TraceVars {
    /// Batch slice of every element.
    pub fn slice_batch(&self, g: &Graph, from: usize, to: usize) -> Result<TraceVars> {
        Ok(TraceVars {
            s_color: g.slice_batch(self.s_color, from, to)?,
            b: g.slice_batch(self.b, from, to)?,
            c: g.slice_batch(self.c, from, to)?,
            t: g.slice_batch(self.t, from, to)?,
        })
    }

    /// Replace one element with zeros (the graph analogue of [`harden`]).
    pub fn zero_element(&self, g: &Graph, kind: TraceElementKind) -> TraceVars {
        let zero = |v: Var| g.constant(Tensor::zeros(&g.shape(v)));
        let mut out = *self;
        match kind {
            TraceElementKind::ColorRange => out.s_color = zero(self.s_color),
            TraceElementKind::ColorBalance => out.b = zero(self.b),
            TraceElementKind::Content => out.c = zero(self.c),
            TraceElementKind::Texture => out.t = zero(self.t),
        }
        out
    }
}

/// `G(I) = s (*) I + b + resize(C, N) + T`, differentiable through all four
/// elements.
pub fn compose(g: &Graph, elems: &TraceVars, img: Var) -> Result<Var> {
    let d = g.with_value(img, |t| t.dims4())?;
    let n = d[1];
    if d[2] != n || d[3] != 3 {
        return Err(Error::Dimension(format!(
            "compose expects [B,N,N,3] image, got {:?}",
            d
        )));
    }
    let scaled = g.mul_bc(img, elems.s_color)?;
    let biased = g.add_bc(scaled, elems.b)?;
    let c_up = g.resize_bilinear(elems.c, n, n)?;
    let with_c = g.add(biased, c_up)?;
    g.add(with_c, elems.t)
}

/// `I - G(I)`: the live counterpart of an input image. Values may leave
/// `[0,1]`; clamping happens only at export.
pub fn reconstruct_live(g: &Graph, img: Var, elems: &TraceVars) -> Result<Var> {
    let trace = compose(g, elems, img)?;
    g.sub(img, trace)
}

fn elems_to_vars(g: &Graph, elems: &TraceElements) -> TraceVars {
    TraceVars {
        s_color: g.constant(elems.s_color.clone()),
        b: g.constant(elems.b.clone()),
        c: g.constant(elems.c.clone()),
        t: g.constant(elems.t.clone()),
    }
}

/// Plain-tensor [`compose`] for a single `[1,N,N,3]` image.
pub fn compose_tensor(elems: &TraceElements, img: &Tensor) -> Result<Tensor> {
    let g = Graph::new();
    let iv = g.constant(img.clone());
    let out = compose(&g, &elems_to_vars(&g, elems), iv)?;
    Ok(g.value(out))
}

/// Plain-tensor [`reconstruct_live`].
pub fn reconstruct_live_tensor(img: &Tensor, elems: &TraceElements) -> Result<Tensor> {
    let g = Graph::new();
    let iv = g.constant(img.clone());
    let out = reconstruct_live(&g, iv, &elems_to_vars(&g, elems))?;
    Ok(g.value(out))
}

/// `live + warp(src_trace, src -> live)`: transfer a composed trace image
/// onto a live face.
pub fn synthesize_spoof(
    live: &Tensor,
    live_lm: &LandmarkSet,
    src_trace_img: &Tensor,
    src_lm: &LandmarkSet,
) -> Result<Tensor> {
    let g = Graph::new();
    let live4 = warp3d::rank3_to_4(live)?;
    let trace4 = warp3d::rank3_to_4(src_trace_img)?;
    if live4.shape() != trace4.shape() {
        return Err(Error::Dimension(format!(
            "live {:?} vs trace {:?}",
            live.shape(),
            src_trace_img.shape()
        )));
    }
    let lv = g.constant(live4);
    let tv = g.constant(trace4);
    let warped = warp3d::warp_trace_var(&g, tv, src_lm, live_lm)?;
    let out = g.add(lv, warped)?;
    let out = g.value(out);
    if live.rank() == 3 {
        warp3d::rank4_to_3(&out)
    } else {
        Ok(out)
    }
}

/// Pick which element to zero when making a "harder" synthesized sample.
pub fn harden_choice(rng: &mut ChaCha8Rng) -> TraceElementKind {
    TraceElementKind::ALL[rng.gen_range(0..4)]
}

/// Zero exactly one uniformly chosen element of the trace.
pub fn harden(elems: &TraceElements, rng: &mut ChaCha8Rng) -> TraceElements {
    let kind = harden_choice(rng);
    let mut out = elems.clone();
    let e = out.element_mut(kind);
    *e = Tensor::zeros(e.shape());
    out
}

const TRACE_MAGIC: &[u8; 4] = b"STRC";
const TRACE_VERSION: u32 = 1;

/// Serialize the four elements as tagged binary arrays (little-endian f64).
pub fn write_trace_file(path: &Path, elems: &TraceElements) -> Result<()> {
    let mut out = Vec::new();
    out.extend_from_slice(TRACE_MAGIC);
    out.extend_from_slice(&TRACE_VERSION.to_le_bytes());
    for kind in TraceElementKind::ALL {
        let t = elems.element(kind);
        out.push(kind.tag());
        out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let mut f = std::fs::File::create(path)?;
    f.write_all(&out)?;
    Ok(())
}

pub fn read_trace_file(path: &Path) -> Result<TraceElements> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    let mut pos = 0usize;
    let take = |pos: &mut usize, n: usize| -> Result<&[u8]> {
        if *pos + n > bytes.len() {
            return Err(Error::Parse("truncated trace file".into()));
        }
        let s = &bytes[*pos..*pos + n];
        *pos += n;
        Ok(s)
    };
    if take(&mut pos, 4)? != TRACE_MAGIC {
        return Err(Error::Parse("not a trace file".into()));
    }
    let ver = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap());
    if ver != TRACE_VERSION {
        return Err(Error::Parse(format!("unsupported trace version {ver}")));
    }
    let mut parts = Vec::new();
    for kind in TraceElementKind::ALL {
        let tag = take(&mut pos, 1)?[0];
        if tag != kind.tag() {
            return Err(Error::Parse(format!(
                "trace element tag {} out of order",
                tag as char
            )));
        }
        let rank = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize);
        }
        let n: usize = shape.iter().product();
        let mut data = Vec::with_capacity(n);
        for _ in 0..n {
            data.push(f64::from_le_bytes(take(&mut pos, 8)?.try_into().unwrap()));
        }
        parts.push(Tensor::new(&shape, data)?);
    }
    let t = parts.pop().unwrap();
    let c = parts.pop().unwrap();
    let b = parts.pop().unwrap();
    let s_color = parts.pop().unwrap();
    Ok(TraceElements { s_color, b, c, t })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    fn random_elems(rng: &mut ChaCha8Rng, n: usize) -> TraceElements {
        let l = n / CONTENT_DIVISOR;
        let rnd = |rng: &mut ChaCha8Rng, shape: &[usize]| {
            let count: usize = shape.iter().product();
            Tensor::new(
                shape,
                (0..count).map(|_| rng.gen_range(-0.5..0.5)).collect(),
            )
            .unwrap()
        };
        TraceElements {
            s_color: rnd(rng, &[1, 1, 1, 3]),
            b: rnd(rng, &[1, 1, 1, 3]),
            c: rnd(rng, &[1, l, l, 3]),
            t: rnd(rng, &[1, n, n, 3]),
        }
    }

    fn random_img(rng: &mut ChaCha8Rng, n: usize) -> Tensor {
        Tensor::new(
            &[1, n, n, 3],
            (0..n * n * 3).map(|_| rng.gen_range(0.0..1.0)).collect(),
        )
        .unwrap()
    }

    #[test]
    fn zero_elements_compose_to_zero_trace() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let img = random_img(&mut rng, 8);
        let out = compose_tensor(&TraceElements::zeros(8), &img).unwrap();
        assert!(out.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn bias_only_trace_is_constant_shift() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let img = random_img(&mut rng, 8);
        let mut elems = TraceElements::zeros(8);
        elems.b = Tensor::new(&[1, 1, 1, 3], vec![0.1, 0.0, 0.0]).unwrap();
        let out = compose_tensor(&elems, &img).unwrap();
        for pix in out.data().chunks_exact(3) {
            assert!((pix[0] - 0.1).abs() < 1e-15 && pix[1] == 0.0 && pix[2] == 0.0);
        }
    }

    #[test]
    fn compose_matches_elementwise_oracle() {
        // Independent oracle: direct elementwise evaluation with its own
        // align-corners resize of C.
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let n = 8;
        let l = n / CONTENT_DIVISOR;
        let elems = random_elems(&mut rng, n);
        let img = random_img(&mut rng, n);
        let out = compose_tensor(&elems, &img).unwrap();
        let scale = (l - 1) as f64 / (n - 1) as f64;
        for y in 0..n {
            for x in 0..n {
                let sy = y as f64 * scale;
                let sx = x as f64 * scale;
                let (y0, x0) = (sy.floor() as usize, sx.floor() as usize);
                let (y1, x1) = ((y0 + 1).min(l - 1), (x0 + 1).min(l - 1));
                let (fy, fx) = (sy - y0 as f64, sx - x0 as f64);
                for ch in 0..3 {
                    let cv = |yy: usize, xx: usize| elems.c.data()[(yy * l + xx) * 3 + ch];
                    let c_up = (1.0 - fy) * ((1.0 - fx) * cv(y0, x0) + fx * cv(y0, x1))
                        + fy * ((1.0 - fx) * cv(y1, x0) + fx * cv(y1, x1));
                    let want = elems.s_color.data()[ch] * img.data()[(y * n + x) * 3 + ch]
                        + elems.b.data()[ch]
                        + c_up
                        + elems.t.data()[(y * n + x) * 3 + ch];
                    let got = out.data()[(y * n + x) * 3 + ch];
                    assert!((want - got).abs() < 1e-12, "({x},{y},{ch}): {got} vs {want}");
                }
            }
        }
    }

    #[test]
    fn reconstruction_round_trips_bit_exactly() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let n = 8;
        let elems = random_elems(&mut rng, n);
        let img = random_img(&mut rng, n);
        let trace = compose_tensor(&elems, &img).unwrap();
        let recon = reconstruct_live_tensor(&img, &elems).unwrap();
        for ((&i, &t), &r) in img.data().iter().zip(trace.data()).zip(recon.data()) {
            assert_eq!(r + t, i);
            assert_eq!(r, i - t);
        }
    }

    #[test]
    fn reconstruction_matches_expanded_form() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let n = 8;
        let elems = random_elems(&mut rng, n);
        let img = random_img(&mut rng, n);
        let recon = reconstruct_live_tensor(&img, &elems).unwrap();
        // (1-s)I - b - resize(C) - T
        let g = Graph::new();
        let cv = g.constant(elems.c.clone());
        let c_up = g.value(g.resize_bilinear(cv, n, n).unwrap());
        for y in 0..n {
            for x in 0..n {
                for ch in 0..3 {
                    let i = img.data()[(y * n + x) * 3 + ch];
                    let want = (1.0 - elems.s_color.data()[ch]) * i
                        - elems.b.data()[ch]
                        - c_up.data()[(y * n + x) * 3 + ch]
                        - elems.t.data()[(y * n + x) * 3 + ch];
                    let got = recon.data()[(y * n + x) * 3 + ch];
                    assert!((want - got).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn harden_zeroes_exactly_one_element_uniformly() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut gen_rng = ChaCha8Rng::seed_from_u64(6);
        let n = 8;
        let mut counts = [0usize; 4];
        for _ in 0..4000 {
            let elems = random_elems(&mut gen_rng, n);
            let hard = harden(&elems, &mut rng);
            let mut zeroed = Vec::new();
            for kind in TraceElementKind::ALL {
                let changed = hard.element(kind) != elems.element(kind);
                let is_zero = hard.element(kind).data().iter().all(|&v| v == 0.0);
                if changed {
                    assert!(is_zero);
                    zeroed.push(kind);
                }
            }
            assert_eq!(zeroed.len(), 1, "exactly one element must change");
            counts[TraceElementKind::ALL
                .iter()
                .position(|&k| k == zeroed[0])
                .unwrap()] += 1;
        }
        for &c in &counts {
            let freq = c as f64 / 4000.0;
            assert!((freq - 0.25).abs() <= 0.02, "frequency {freq}");
        }
    }

    #[test]
    fn harden_is_deterministic_per_seed() {
        let elems = random_elems(&mut ChaCha8Rng::seed_from_u64(7), 8);
        let a = harden(&elems, &mut ChaCha8Rng::seed_from_u64(9));
        let b = harden(&elems, &mut ChaCha8Rng::seed_from_u64(9));
        assert_eq!(a, b);
    }

    #[test]
    fn synthesize_with_zero_trace_returns_live() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let n = 16;
        let live = random_img(&mut rng, n);
        let lm = LandmarkSet::new(vec![[2.0, 2.0], [13.0, 2.0], [13.0, 13.0], [2.0, 13.0]]).unwrap();
        let zero = Tensor::zeros(&[1, n, n, 3]);
        let out = synthesize_spoof(&live, &lm, &zero, &lm).unwrap();
        assert_eq!(out.data(), live.data());
    }

    #[test]
    fn synthesize_without_warp_is_plain_addition() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let n = 16;
        let live = random_img(&mut rng, n);
        let trace = random_img(&mut rng, n).map(|v| v * 0.2);
        let lm = LandmarkSet::new(vec![[2.0, 2.0], [13.0, 2.0], [13.0, 13.0], [2.0, 13.0]]).unwrap();
        let out = synthesize_spoof(&live, &lm, &trace, &lm).unwrap();
        for ((&l, &t), &o) in live.data().iter().zip(trace.data()).zip(out.data()) {
            assert_eq!(o, l + t);
        }
    }

    #[test]
    fn trace_file_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.trace");
        let elems = random_elems(&mut ChaCha8Rng::seed_from_u64(10), 8);
        write_trace_file(&path, &elems).unwrap();
        let back = read_trace_file(&path).unwrap();
        assert_eq!(back, elems);
    }
}
