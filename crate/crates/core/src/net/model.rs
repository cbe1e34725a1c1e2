//! Forward and backward passes of the full network.

use std::ops::Range;
use std::sync::Arc;

use super::layers::*;
use super::params::{NetParams, Registry};
use super::NetConfig;
use crate::error::{Error, Result};
use crate::losses::HeadMaps;
use crate::maps::Grid;
use crate::real::Real;

/// Skeleton (sigmoid), segmentation (channel softmax) and raw box offsets.
pub type HeadOutputs<T> = HeadMaps<T>;

/// Initial bias of the skeleton head's last layer, so early predictions are sparse.
pub const SKELETON_BIAS_INIT: f64 = -2.0;

#[derive(Debug, Clone)]
struct ConvSlot {
    shape: ConvShape,
    kernel: Range<usize>,
    bias: Range<usize>,
}

#[derive(Debug, Clone)]
struct LnSlot {
    scale: Range<usize>,
    shift: Range<usize>,
}

#[derive(Debug, Clone)]
struct AsaSlot {
    f: ConvSlot,
    k: ConvSlot,
    q: ConvSlot,
    v: ConvSlot,
    ln: LnSlot,
}

#[derive(Debug, Clone)]
struct BlockSlot {
    ln_in: LnSlot,
    asa: Vec<AsaSlot>,
    out: ConvSlot,
    ln_out: LnSlot,
}

#[derive(Debug, Clone)]
struct HeadSlot {
    convs: [ConvSlot; 3],
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum HeadKind {
    Skeleton,
    Segmentation,
    Boxes,
}

const HEADS: [(HeadKind, &str); 3] = [
    (HeadKind::Skeleton, "skl"),
    (HeadKind::Segmentation, "seg"),
    (HeadKind::Boxes, "box"),
];

fn conv_slot(reg: &mut Registry, name: &str, shape: ConvShape) -> ConvSlot {
    let kernel = reg.push(format!("{name}.kernel"), vec![shape.kh, shape.kw, shape.din, shape.dout]);
    let bias = reg.push(format!("{name}.bias"), vec![shape.dout]);
    ConvSlot { shape, kernel, bias }
}

fn ln_slot(reg: &mut Registry, name: &str, d: usize) -> LnSlot {
    let scale = reg.push(format!("{name}.scale"), vec![d]);
    let shift = reg.push(format!("{name}.shift"), vec![d]);
    LnSlot { scale, shift }
}

/// Network topology for one config; parameters live separately in [`NetParams`].
#[derive(Debug, Clone)]
pub struct Net {
    cfg: NetConfig,
    registry: Arc<Registry>,
    stem: ConvSlot,
    blocks: Vec<BlockSlot>,
    heads: Vec<HeadSlot>,
}

#[derive(Debug, Clone)]
struct AsaCache<T> {
    fx: Grid<T>,
    k: Grid<T>,
    q: Grid<T>,
    v: Grid<T>,
    attn: Grid<T>,
    ln: LnCache<T>,
}

#[derive(Debug, Clone)]
struct BlockCache<T> {
    ln_in: LnCache<T>,
    x_norm: Grid<T>,
    asa: Vec<AsaCache<T>>,
    cat: Grid<T>,
    ln_out: LnCache<T>,
}

#[derive(Debug, Clone)]
struct HeadCache<T> {
    a0: Grid<T>,
    a1: Grid<T>,
}

/// Activations kept by a forward pass for the matching backward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache<T> {
    stamp: u64,
    image: Grid<T>,
    blocks: Vec<BlockCache<T>>,
    feature_dims: (usize, usize),
    up: Grid<T>,
    heads: Vec<HeadCache<T>>,
    outputs: HeadOutputs<T>,
}

impl<T: Real> ForwardCache<T> {
    pub fn outputs(&self) -> &HeadOutputs<T> {
        &self.outputs
    }

    /// Which head ReLUs were active, in a fixed order. Finite differences are
    /// only meaningful between passes with the same pattern.
    pub fn relu_pattern(&self) -> Vec<bool> {
        self.heads
            .iter()
            .flat_map(|h| h.a0.data().iter().chain(h.a1.data()))
            .map(|&v| v > T::zero())
            .collect()
    }

    /// Every spatial attention map computed in the pass, block by block.
    pub fn attention_maps(&self) -> impl Iterator<Item = &Grid<T>> {
        self.blocks.iter().flat_map(|b| b.asa.iter().map(|a| &a.attn))
    }
}

impl Net {
    pub fn new(cfg: NetConfig) -> Result<Self> {
        cfg.validate()?;
        let mut reg = Registry::default();
        let stem = conv_slot(&mut reg, "stem", ConvShape::square(3, 3, cfg.stem_channels).strided(2));
        let mut blocks = Vec::new();
        let mut din = cfg.stem_channels;
        for (b, (&dout, &n)) in cfg.block_channels.iter().zip(&cfg.n_asa).enumerate() {
            let half = (din / 2).max(1);
            let ln_in = ln_slot(&mut reg, &format!("block{b}.ln_in"), din);
            let asa = (0..n)
                .map(|a| {
                    let p = format!("block{b}.asa{a}");
                    let rate = a + 1;
                    let f = conv_slot(&mut reg, &format!("{p}.f"), ConvShape::square(1, din, half));
                    let atrous = ConvShape::square(3, half, half).dilated(rate);
                    let k = conv_slot(&mut reg, &format!("{p}.k"), atrous);
                    let q = conv_slot(&mut reg, &format!("{p}.q"), atrous);
                    let v = conv_slot(&mut reg, &format!("{p}.v"), atrous);
                    let ln = ln_slot(&mut reg, &format!("{p}.ln"), half);
                    AsaSlot { f, k, q, v, ln }
                })
                .collect();
            let cat = din + n * half;
            let out = conv_slot(&mut reg, &format!("block{b}.out"), ConvShape::square(3, cat, dout).strided(cfg.block_stride(b)));
            let ln_out = ln_slot(&mut reg, &format!("block{b}.ln_out"), dout);
            blocks.push(BlockSlot { ln_in, asa, out, ln_out });
            din = dout;
        }
        let ch = cfg.head_channels;
        let heads = HEADS
            .iter()
            .map(|&(kind, name)| {
                let n_out = match kind {
                    HeadKind::Skeleton => 1,
                    HeadKind::Segmentation => cfg.seg_channels(),
                    HeadKind::Boxes => 5,
                };
                HeadSlot {
                    convs: [
                        conv_slot(&mut reg, &format!("head.{name}.conv0"), ConvShape::square(3, din, ch)),
                        conv_slot(&mut reg, &format!("head.{name}.conv1"), ConvShape::square(3, ch, ch)),
                        conv_slot(&mut reg, &format!("head.{name}.out"), ConvShape::square(3, ch, n_out)),
                    ],
                }
            })
            .collect();
        Ok(Self { cfg, registry: Arc::new(reg), stem, blocks, heads })
    }

    pub fn config(&self) -> &NetConfig {
        &self.cfg
    }

    pub fn registry(&self) -> &Arc<Registry> {
        &self.registry
    }

    /// Seeded initial parameters.
    pub fn init_params<T: Real>(&self, seed: u64) -> NetParams<T> {
        NetParams::init(self.registry.clone(), seed, &[("head.skl.out.bias", SKELETON_BIAS_INIT)])
    }

    pub fn zero_params<T: Real>(&self) -> NetParams<T> {
        NetParams::zeros(self.registry.clone())
    }

    fn check_params<T: Real>(&self, params: &NetParams<T>) -> Result<()> {
        if !Arc::ptr_eq(params.registry(), &self.registry) && **params.registry() != *self.registry {
            return Err(Error::Registry("parameters do not belong to this network".into()));
        }
        Ok(())
    }

    fn check_image<T>(&self, image: &Grid<T>) -> Result<()> {
        let [h, w] = self.cfg.input_size;
        if image.shape() != (h, w, 3) {
            return Err(Error::Shape(format!("image {:?}, network expects {:?}", image.shape(), (h, w, 3))));
        }
        Ok(())
    }

    pub fn forward<T: Real>(&self, params: &NetParams<T>, image: &Grid<T>) -> Result<HeadOutputs<T>> {
        Ok(self.forward_cached(params, image)?.outputs)
    }

    pub fn forward_cached<T: Real>(&self, params: &NetParams<T>, image: &Grid<T>) -> Result<ForwardCache<T>> {
        self.check_params(params)?;
        self.check_image(image)?;
        let p = params.values();
        let conv = |x: &Grid<T>, s: &ConvSlot| conv2d(x, &s.shape, &p[s.kernel.clone()], Some(&p[s.bias.clone()]));
        let norm = |x: &Grid<T>, s: &LnSlot| layer_norm(x, &p[s.scale.clone()], &p[s.shift.clone()]);

        let mut x = conv(image, &self.stem);
        let mut blocks = Vec::with_capacity(self.blocks.len());
        for slot in &self.blocks {
            let (x_norm, ln_in) = norm(&x, &slot.ln_in);
            let mut asa = Vec::with_capacity(slot.asa.len());
            let mut outs = Vec::with_capacity(slot.asa.len());
            for a in &slot.asa {
                let fx = conv(&x_norm, &a.f);
                let k = conv(&fx, &a.k);
                let q = conv(&fx, &a.q);
                let v = conv(&fx, &a.v);
                let attn = spatial_softmax(&hadamard(&k, &q));
                let (out, ln) = norm(&hadamard(&v, &attn), &a.ln);
                outs.push(out);
                asa.push(AsaCache { fx, k, q, v, attn, ln });
            }
            let mut parts = vec![&x_norm];
            parts.extend(outs.iter());
            let cat = concat(&parts);
            let (y, ln_out) = norm(&conv(&cat, &slot.out), &slot.ln_out);
            x = y;
            blocks.push(BlockCache { ln_in, x_norm, asa, cat, ln_out });
        }
        let feature_dims = (x.height(), x.width());
        let [h, w] = self.cfg.input_size;
        let up = upsample_bilinear(&x, h, w);

        let mut heads = Vec::with_capacity(3);
        let mut raw = Vec::with_capacity(3);
        for slot in &self.heads {
            let mut a0 = conv(&up, &slot.convs[0]);
            relu_in_place(&mut a0);
            let mut a1 = conv(&a0, &slot.convs[1]);
            relu_in_place(&mut a1);
            raw.push(conv(&a1, &slot.convs[2]));
            heads.push(HeadCache { a0, a1 });
        }
        let boxes = raw.pop().unwrap();
        let seg = channel_softmax(&raw.pop().unwrap());
        let skl = raw.pop().unwrap().map(sigmoid);
        Ok(ForwardCache {
            stamp: params.stamp(),
            image: image.clone(),
            blocks,
            feature_dims,
            up,
            heads,
            outputs: HeadMaps { skl, seg, boxes },
        })
    }

    /// Gradient of a scalar loss with respect to every parameter, given its
    /// gradient with respect to the head outputs.
    pub fn backward<T: Real>(&self, params: &NetParams<T>, cache: &ForwardCache<T>, grad: &HeadOutputs<T>) -> Result<Vec<T>> {
        self.check_params(params)?;
        if cache.stamp != params.stamp() {
            return Err(Error::StaleCache);
        }
        grad.check()?;
        if grad.seg.shape() != cache.outputs.seg.shape() || grad.skl.shape() != cache.outputs.skl.shape() {
            return Err(Error::Shape("output gradient does not match the forward outputs".into()));
        }
        let p = params.values();
        let mut g = vec![T::zero(); p.len()];
        let out = &cache.outputs;

        let dz = [
            {
                let mut d = grad.skl.clone();
                for (v, &s) in d.data_mut().iter_mut().zip(out.skl.data()) {
                    *v *= s * (T::one() - s);
                }
                d
            },
            channel_softmax_backward(&out.seg, &grad.seg),
            grad.boxes.clone(),
        ];
        let [h, w] = self.cfg.input_size;
        let mut dup: Grid<T> = Grid::zeros(h, w, cache.up.channels());
        for ((slot, hc), dz) in self.heads.iter().zip(&cache.heads).zip(dz) {
            let mut da1 = conv_back(p, &mut g, &hc.a1, &slot.convs[2], &dz, true).unwrap();
            relu_backward_in_place(&hc.a1, &mut da1);
            let mut da0 = conv_back(p, &mut g, &hc.a0, &slot.convs[1], &da1, true).unwrap();
            relu_backward_in_place(&hc.a0, &mut da0);
            let dx = conv_back(p, &mut g, &cache.up, &slot.convs[0], &da0, true).unwrap();
            dup.data_mut().iter_mut().zip(dx.data()).for_each(|(a, &b)| *a += b);
        }
        let (fh, fw) = cache.feature_dims;
        let mut dx = upsample_bilinear_backward(&dup, fh, fw);

        for (slot, bc) in self.blocks.iter().zip(&cache.blocks).rev() {
            let dy = ln_back(p, &mut g, &bc.ln_out, &slot.ln_out, &dx);
            let dcat = conv_back(p, &mut g, &bc.cat, &slot.out, &dy, true).unwrap();
            let mut widths = vec![bc.x_norm.channels()];
            widths.extend(bc.asa.iter().map(|a| a.v.channels()));
            let mut parts = split(&dcat, &widths).into_iter();
            let mut dxn = parts.next().unwrap();
            for ((a, ac), dout) in slot.asa.iter().zip(&bc.asa).zip(parts) {
                let dprod = ln_back(p, &mut g, &ac.ln, &a.ln, &dout);
                let dv = hadamard(&dprod, &ac.attn);
                let dattn = hadamard(&dprod, &ac.v);
                let dm = spatial_softmax_backward(&ac.attn, &dattn);
                let dk = hadamard(&dm, &ac.q);
                let dq = hadamard(&dm, &ac.k);
                let mut dfx = conv_back(p, &mut g, &ac.fx, &a.k, &dk, true).unwrap();
                for (conv, d) in [(&a.q, &dq), (&a.v, &dv)] {
                    let part = conv_back(p, &mut g, &ac.fx, conv, d, true).unwrap();
                    dfx.data_mut().iter_mut().zip(part.data()).for_each(|(x, &y)| *x += y);
                }
                let part = conv_back(p, &mut g, &bc.x_norm, &a.f, &dfx, true).unwrap();
                dxn.data_mut().iter_mut().zip(part.data()).for_each(|(x, &y)| *x += y);
            }
            dx = ln_back(p, &mut g, &bc.ln_in, &slot.ln_in, &dxn);
        }
        conv_back(p, &mut g, &cache.image, &self.stem, &dx, false);
        Ok(g)
    }
}

fn conv_back<T: Real>(p: &[T], g: &mut [T], x: &Grid<T>, s: &ConvSlot, dy: &Grid<T>, want_dx: bool) -> Option<Grid<T>> {
    let (gk, gb) = disjoint(g, s.kernel.clone(), s.bias.clone());
    conv2d_backward(x, &s.shape, &p[s.kernel.clone()], dy, gk, Some(gb), want_dx)
}

fn ln_back<T: Real>(p: &[T], g: &mut [T], cache: &LnCache<T>, s: &LnSlot, dy: &Grid<T>) -> Grid<T> {
    let (gs, gh) = disjoint(g, s.scale.clone(), s.shift.clone());
    layer_norm_backward(cache, &p[s.scale.clone()], dy, gs, gh)
}

/// Two non-overlapping mutable windows into the gradient vector, `a` before `b`.
fn disjoint<T>(g: &mut [T], a: Range<usize>, b: Range<usize>) -> (&mut [T], &mut [T]) {
    debug_assert!(a.end <= b.start);
    let (lo, hi) = g.split_at_mut(b.start);
    (&mut lo[a], &mut hi[..b.end - b.start])
}
