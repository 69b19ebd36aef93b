use std::ops::Range;

use super::EncoderConfig;
use crate::data::Image;
use crate::error::{Error, Result};
use crate::params::{Bound, Linear, ParamStore};
use crate::rng::derive_seed;
use crate::tensor::Tensor;

const KERNEL: usize = 3;
const STRIDE: usize = 2;

/// Output side of a 3×3, stride-2 convolution with one pixel of edge padding.
pub fn conv_out_side(side: usize) -> usize {
    side.div_ceil(2)
}

/// Input rows (or columns) seen by output index `o` of the given layer of the
/// stack, before clamping to the image.
pub fn receptive_field(layer: usize, o: usize) -> Range<isize> {
    let (mut lo, mut hi) = (o as isize, o as isize);
    for _ in 0..=layer {
        lo = lo * STRIDE as isize - 1;
        hi = hi * STRIDE as isize + 1;
    }
    lo..hi + 1
}

/// Strided convolutions followed by per-cell and pooled projections.
#[derive(Debug, Clone)]
pub struct ImageEncoder {
    conv: Vec<Linear>,
    local_proj: Linear,
    global_proj: Linear,
    sides: Vec<usize>,
    channels: Vec<usize>,
    local_layer: usize,
    grid: usize,
}

/// Batched image embeddings.
pub struct ImageBatch {
    /// `B × d_e`
    pub global: Tensor,
    /// `(B·M) × d_e`, regions of image `b` in rows `b·M..(b+1)·M`.
    pub local_rows: Tensor,
    pub regions: usize,
}

impl ImageBatch {
    /// `d_e × M` sub-region embeddings of image `b`.
    pub fn local(&self, b: usize) -> Result<Tensor> {
        self.local_rows.slice_rows(b * self.regions..(b + 1) * self.regions)?.t()
    }
}

impl ImageEncoder {
    pub(super) fn new(cfg: &EncoderConfig, store: &mut ParamStore) -> Result<Self> {
        let mut sides = vec![cfg.image_side];
        let mut channels = vec![cfg.image_channels];
        let mut conv = Vec::new();
        for (l, &out) in cfg.conv_channels.iter().enumerate() {
            let cin = *channels.last().unwrap();
            conv.push(Linear::new(
                store,
                &format!("image.conv{l}"),
                KERNEL * KERNEL * cin,
                out,
                true,
                derive_seed(cfg.init_seed, 100 + l as u64),
            ));
            channels.push(out);
            sides.push(conv_out_side(*sides.last().unwrap()));
        }
        let local_layer = cfg.local_layer();
        let local_side = sides[local_layer + 1];
        if local_side < cfg.grid || local_side % cfg.grid != 0 {
            return Err(Error::Config(format!(
                "feature map of side {local_side} cannot be pooled onto a {0}x{0} grid",
                cfg.grid
            )));
        }
        let local_proj = Linear::new(
            store,
            "image.local_proj",
            channels[local_layer + 1],
            cfg.embed_dim,
            true,
            derive_seed(cfg.init_seed, 200),
        );
        let global_proj = Linear::new(
            store,
            "image.global_proj",
            *channels.last().unwrap(),
            cfg.embed_dim,
            true,
            derive_seed(cfg.init_seed, 201),
        );
        Ok(ImageEncoder {
            conv,
            local_proj,
            global_proj,
            sides,
            channels,
            local_layer,
            grid: cfg.grid,
        })
    }

    /// im2col with edge-clamped padding: rows `(b, oy, ox)`, columns
    /// `(ky, kx, c)`.
    fn patch_index(batch: usize, side: usize, chans: usize) -> Vec<Option<usize>> {
        let out = conv_out_side(side);
        let mut index = Vec::with_capacity(batch * out * out * KERNEL * KERNEL * chans);
        let clamp = |v: isize| v.clamp(0, side as isize - 1) as usize;
        for b in 0..batch {
            for oy in 0..out {
                for ox in 0..out {
                    for ky in 0..KERNEL {
                        for kx in 0..KERNEL {
                            let iy = clamp((oy * STRIDE + ky) as isize - 1);
                            let ix = clamp((ox * STRIDE + kx) as isize - 1);
                            let base = ((b * side + iy) * side + ix) * chans;
                            index.extend((0..chans).map(|c| Some(base + c)));
                        }
                    }
                }
            }
        }
        index
    }

    /// Feature maps after every conv layer, each `(B·S·S) × C`.
    pub fn feature_maps(&self, bound: &Bound, images: &[&Image]) -> Result<Vec<Tensor>> {
        let side = self.sides[0];
        let chans = self.channels[0];
        for img in images {
            if img.height != side || img.width != side || img.channels != chans {
                return Err(Error::shape(
                    "encode_image",
                    format!(
                        "expected {side}x{side}x{chans}, got {}x{}x{}",
                        img.height, img.width, img.channels
                    ),
                ));
            }
        }
        if images.is_empty() {
            return Err(Error::shape("encode_image", "empty batch"));
        }
        let b = images.len();
        let pixels: Vec<f64> = images.iter().flat_map(|img| img.pixels.iter().copied()).collect();
        let mut x = Tensor::new(pixels, &[b * side * side, chans])?;
        let mut maps = Vec::with_capacity(self.conv.len());
        for (l, layer) in self.conv.iter().enumerate() {
            let (s, c) = (self.sides[l], self.channels[l]);
            let o = self.sides[l + 1];
            let patches = x.gather(Self::patch_index(b, s, c), &[b * o * o, KERNEL * KERNEL * c])?;
            x = layer.forward(bound, &patches)?.relu();
            maps.push(x.clone());
        }
        Ok(maps)
    }

    /// Average-pools a `(B·S·S) × C` map onto the `grid × grid` cells.
    fn pool_to_grid(&self, map: &Tensor, batch: usize, side: usize) -> Result<Tensor> {
        if side == self.grid {
            return Ok(map.clone());
        }
        let cell = side / self.grid;
        let c = map.shape()[1];
        let mut rows = Vec::with_capacity(batch * side * side);
        let mut spans = Vec::with_capacity(batch * self.grid * self.grid);
        for b in 0..batch {
            for gy in 0..self.grid {
                for gx in 0..self.grid {
                    let start = rows.len();
                    for y in gy * cell..(gy + 1) * cell {
                        for x in gx * cell..(gx + 1) * cell {
                            rows.push((b * side + y) * side + x);
                        }
                    }
                    spans.push(start..rows.len());
                }
            }
        }
        let index = rows.iter().flat_map(|&r| (0..c).map(move |j| Some(r * c + j))).collect();
        map.gather(index, &[rows.len(), c])?.segment_mean(&spans)
    }

    pub fn forward(&self, bound: &Bound, images: &[&Image]) -> Result<ImageBatch> {
        let b = images.len();
        let maps = self.feature_maps(bound, images)?;
        let regions = self.grid * self.grid;

        let local_side = self.sides[self.local_layer + 1];
        let cells = self.pool_to_grid(&maps[self.local_layer], b, local_side)?;
        let local_rows = self.local_proj.forward(bound, &cells)?;

        let last = maps.last().expect("at least one conv layer");
        let last_side = *self.sides.last().unwrap();
        let per_image = last_side * last_side;
        let spans: Vec<Range<usize>> = (0..b).map(|i| i * per_image..(i + 1) * per_image).collect();
        let pooled = last.segment_mean(&spans)?;
        let global = self.global_proj.forward(bound, &pooled)?;
        Ok(ImageBatch {
            global,
            local_rows,
            regions,
        })
    }

    /// Side of the map after conv layer `layer`.
    pub fn map_side(&self, layer: usize) -> usize {
        self.sides[layer + 1]
    }
}
