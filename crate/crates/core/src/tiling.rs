//! Overlapped regional partitioning of a latent canvas, cropping, and the
//! uniform-mean merge of per-region results.

use crate::error::{Error, Result};
use crate::types::Latent;

/// One overlapped crop window, in latent units.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RegionSpec {
    pub index: usize,
    pub top: usize,
    pub left: usize,
    pub height: usize,
    pub width: usize,
}

impl RegionSpec {
    pub fn fits(&self, canvas_height: usize, canvas_width: usize) -> bool {
        self.top + self.height <= canvas_height && self.left + self.width <= canvas_width
    }
}

/// An ordered set of overlapped regions covering a canvas, row-major by
/// (top, left). The ordering is fixed so regional prompt caching is stable
/// across runs.
#[derive(Debug, Clone)]
pub struct Partition {
    pub regions: Vec<RegionSpec>,
    pub region_size: usize,
    pub overlap: usize,
    pub canvas_height: usize,
    pub canvas_width: usize,
}

impl Partition {
    pub fn len(&self) -> usize {
        self.regions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.regions.is_empty()
    }

    /// The same partition with every coordinate multiplied by `factor`,
    /// e.g. latent units to pixel units with factor 8.
    pub fn scale_up(&self, factor: usize) -> Partition {
        Partition {
            regions: self
                .regions
                .iter()
                .map(|r| RegionSpec {
                    index: r.index,
                    top: r.top * factor,
                    left: r.left * factor,
                    height: r.height * factor,
                    width: r.width * factor,
                })
                .collect(),
            region_size: self.region_size * factor,
            overlap: self.overlap * factor,
            canvas_height: self.canvas_height * factor,
            canvas_width: self.canvas_width * factor,
        }
    }
}

/// Axis offsets 0, stride, 2*stride, ...; when the last one does not land the
/// region flush on the boundary, a final boundary-snapped offset is appended.
fn axis_offsets(dim: usize, region: usize, stride: usize) -> Vec<usize> {
    let mut offsets = Vec::new();
    let mut pos = 0;
    loop {
        offsets.push(pos);
        if pos + region == dim {
            return offsets;
        }
        let next = pos + stride;
        if next + region > dim {
            offsets.push(dim - region);
            return offsets;
        }
        pos = next;
    }
}

/// Partitions a canvas into overlapped square regions.
pub fn partition(
    canvas_height: usize,
    canvas_width: usize,
    region_size: usize,
    overlap: usize,
) -> Result<Partition> {
    if region_size == 0 {
        return Err(Error::Argument("region_size must be positive".into()));
    }
    if region_size > canvas_height || region_size > canvas_width {
        return Err(Error::Argument(format!(
            "region size {region_size} exceeds canvas {canvas_height}x{canvas_width}"
        )));
    }
    if overlap >= region_size {
        return Err(Error::Argument(format!(
            "overlap {overlap} must be smaller than region size {region_size}"
        )));
    }
    let stride = region_size - overlap;
    let tops = axis_offsets(canvas_height, region_size, stride);
    let lefts = axis_offsets(canvas_width, region_size, stride);
    let mut regions = Vec::with_capacity(tops.len() * lefts.len());
    for &top in &tops {
        for &left in &lefts {
            regions.push(RegionSpec {
                index: regions.len(),
                top,
                left,
                height: region_size,
                width: region_size,
            });
        }
    }
    Ok(Partition {
        regions,
        region_size,
        overlap,
        canvas_height,
        canvas_width,
    })
}

/// Extracts the sub-latent under `spec`, all channels.
pub fn crop(canvas: &Latent, spec: &RegionSpec) -> Result<Latent> {
    if !spec.fits(canvas.height, canvas.width) {
        return Err(Error::Argument(format!(
            "region ({},{}) {}x{} exceeds canvas {}x{}",
            spec.top, spec.left, spec.height, spec.width, canvas.height, canvas.width
        )));
    }
    let mut out = Latent::zeros(canvas.channels, spec.height, spec.width);
    for c in 0..canvas.channels {
        for y in 0..spec.height {
            for x in 0..spec.width {
                out.set(c, y, x, canvas.get(c, spec.top + y, spec.left + x));
            }
        }
    }
    Ok(out)
}

/// Reassembles per-region latents into a canvas. Every cell becomes the
/// arithmetic mean of all region values covering it; a cell covered by no
/// region is an internal error.
pub fn merge(
    regions: &[Latent],
    specs: &[RegionSpec],
    canvas_height: usize,
    canvas_width: usize,
) -> Result<Latent> {
    if regions.len() != specs.len() {
        return Err(Error::Shape(format!(
            "merge got {} regions but {} specs",
            regions.len(),
            specs.len()
        )));
    }
    let channels = regions
        .first()
        .map(|r| r.channels)
        .ok_or_else(|| Error::Argument("merge needs at least one region".into()))?;
    let mut sums = Latent::zeros(channels, canvas_height, canvas_width);
    let mut firsts = Latent::zeros(channels, canvas_height, canvas_width);
    // Per channel-cell: whether every contribution so far is bitwise equal.
    // The mean of equal values is returned exactly, which makes the
    // crop/merge round trip the identity.
    let mut all_equal = vec![true; channels * canvas_height * canvas_width];
    let mut counts = vec![0u32; canvas_height * canvas_width];
    for (region, spec) in regions.iter().zip(specs.iter()) {
        if region.channels != channels || region.height != spec.height || region.width != spec.width
        {
            return Err(Error::Shape(format!(
                "region {} tensor {:?} does not match its spec {}x{}",
                spec.index,
                region.shape_of(),
                spec.height,
                spec.width
            )));
        }
        if !spec.fits(canvas_height, canvas_width) {
            return Err(Error::Argument(format!(
                "region {} exceeds canvas bounds",
                spec.index
            )));
        }
        for y in 0..spec.height {
            for x in 0..spec.width {
                let (cy, cx) = (spec.top + y, spec.left + x);
                let first_visit = counts[cy * canvas_width + cx] == 0;
                counts[cy * canvas_width + cx] += 1;
                for c in 0..channels {
                    let v = region.get(c, y, x);
                    sums.set(c, cy, cx, sums.get(c, cy, cx) + v);
                    let flat = (c * canvas_height + cy) * canvas_width + cx;
                    if first_visit {
                        firsts.set(c, cy, cx, v);
                    } else if firsts.get(c, cy, cx).to_bits() != v.to_bits() {
                        all_equal[flat] = false;
                    }
                }
            }
        }
    }
    for y in 0..canvas_height {
        for x in 0..canvas_width {
            let n = counts[y * canvas_width + x];
            if n == 0 {
                return Err(Error::Internal(format!(
                    "canvas cell ({y},{x}) not covered by any region"
                )));
            }
            for c in 0..channels {
                let flat = (c * canvas_height + y) * canvas_width + x;
                let v = if all_equal[flat] {
                    firsts.get(c, y, x)
                } else {
                    sums.get(c, y, x) / n as f64
                };
                sums.set(c, y, x, v);
            }
        }
    }
    Ok(sums)
}

/// Maps a region to a coarser resolution: top/left floor-divided, extents
/// enlarged so the scaled window still covers the original one.
pub fn scale_spec(spec: &RegionSpec, downsample_factor: usize) -> RegionSpec {
    let f = downsample_factor.max(1);
    let top = spec.top / f;
    let left = spec.left / f;
    let bottom = (spec.top + spec.height).div_ceil(f);
    let right = (spec.left + spec.width).div_ceil(f);
    RegionSpec {
        index: spec.index,
        top,
        left,
        height: bottom - top,
        width: right - left,
    }
}
