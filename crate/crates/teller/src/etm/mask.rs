//! Landmark-driven region masks and their bitmap container.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::io;

/// Landmark indices whose bounding box marks the refinement region.
pub const DEFAULT_LANDMARK_INDICES: [usize; 3] = [93, 323, 152];

/// Box expansion as a fraction of its diagonal.
pub const DEFAULT_MARGIN_FRACTION: f32 = 0.10;

const MASK_MAGIC: &[u8; 4] = b"TMSK";
const MASK_VERSION: u16 = 1;

/// Indexed 2D landmark points for one frame, pixel coordinates `(x, y)`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct LandmarkSet {
    points: BTreeMap<usize, (f32, f32)>,
}

impl LandmarkSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, index: usize, x: f32, y: f32) {
        self.points.insert(index, (x, y));
    }

    pub fn get(&self, index: usize) -> Option<(f32, f32)> {
        self.points.get(&index).copied()
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

/// Parse one frame's landmark map: `{"93": [x, y], ...}`.
pub fn parse_landmark_frame(text: &str) -> Result<LandmarkSet> {
    let raw: BTreeMap<String, [f32; 2]> =
        serde_json::from_str(text).map_err(|e| Error::format(format!("landmark json: {e}")))?;
    let mut out = LandmarkSet::new();
    for (k, [x, y]) in raw {
        let idx: usize = k
            .parse()
            .map_err(|_| Error::format(format!("landmark index `{k}` is not an integer")))?;
        out.insert(idx, x, y);
    }
    Ok(out)
}

/// Load a JSON array of per-frame landmark maps.
pub fn load_landmark_frames(path: impl AsRef<Path>) -> Result<Vec<LandmarkSet>> {
    let text = std::fs::read_to_string(path)?;
    let frames: Vec<BTreeMap<String, [f32; 2]>> =
        serde_json::from_str(&text).map_err(|e| Error::format(format!("landmark json: {e}")))?;
    frames
        .into_iter()
        .map(|m| {
            let mut out = LandmarkSet::new();
            for (k, [x, y]) in m {
                let idx: usize = k
                    .parse()
                    .map_err(|_| Error::format(format!("landmark index `{k}`")))?;
                out.insert(idx, x, y);
            }
            Ok(out)
        })
        .collect()
}

/// Binary `(t, h, w)` mask with the integer boxes it came from.
#[derive(Clone, Debug, PartialEq)]
pub struct RegionMask {
    pub t: usize,
    pub h: usize,
    pub w: usize,
    values: Vec<u8>,
    /// Per frame: inclusive `(row0, row1, col0, col1)` source rectangles.
    pub source_boxes: Vec<Vec<(usize, usize, usize, usize)>>,
}

impl RegionMask {
    pub fn empty(t: usize, h: usize, w: usize) -> Self {
        RegionMask { t, h, w, values: vec![0; t * h * w], source_boxes: vec![Vec::new(); t] }
    }

    #[inline]
    pub fn get(&self, ti: usize, hi: usize, wi: usize) -> bool {
        self.values[(ti * self.h + hi) * self.w + wi] != 0
    }

    fn set(&mut self, ti: usize, hi: usize, wi: usize, v: bool) {
        self.values[(ti * self.h + hi) * self.w + wi] = v as u8;
    }

    pub fn count_ones(&self) -> usize {
        self.values.iter().filter(|&&v| v != 0).count()
    }

    /// Stamp a frame's box (union semantics with whatever is already set).
    pub fn add_box(&mut self, ti: usize, row0: usize, row1: usize, col0: usize, col1: usize) {
        for hi in row0..=row1.min(self.h - 1) {
            for wi in col0..=col1.min(self.w - 1) {
                self.set(ti, hi, wi, true);
            }
        }
        self.source_boxes[ti].push((row0, row1.min(self.h - 1), col0, col1.min(self.w - 1)));
    }

    /// Reduce the mask to a coarser grid: an output cell is set if any of
    /// its `factor × factor` source cells is. Used to carry pixel-space
    /// boxes onto the patch-feature grid.
    pub fn downsample(&self, factor: usize) -> Result<RegionMask> {
        if self.h % factor != 0 || self.w % factor != 0 {
            return Err(Error::validation(format!(
                "mask {}×{} does not downsample by {factor}",
                self.h, self.w
            )));
        }
        let (h, w) = (self.h / factor, self.w / factor);
        let mut out = RegionMask::empty(self.t, h, w);
        for ti in 0..self.t {
            for hi in 0..h {
                for wi in 0..w {
                    let mut any = false;
                    'scan: for dy in 0..factor {
                        for dx in 0..factor {
                            if self.get(ti, hi * factor + dy, wi * factor + dx) {
                                any = true;
                                break 'scan;
                            }
                        }
                    }
                    out.set(ti, hi, wi, any);
                }
            }
        }
        out.source_boxes = self.source_boxes.clone();
        Ok(out)
    }

    /// Repeat a single-frame mask across `t` frames.
    pub fn broadcast(&self, t: usize) -> RegionMask {
        assert_eq!(self.t, 1, "broadcast expects a single-frame mask");
        let mut out = RegionMask::empty(t, self.h, self.w);
        for ti in 0..t {
            for hi in 0..self.h {
                for wi in 0..self.w {
                    out.set(ti, hi, wi, self.get(0, hi, wi));
                }
            }
        }
        out.source_boxes = vec![self.source_boxes[0].clone(); t];
        out
    }

    /// Stack single-frame masks into a per-frame mask.
    pub fn stack(frames: &[RegionMask]) -> Result<RegionMask> {
        let first = frames.first().ok_or_else(|| Error::validation("no mask frames"))?;
        let (h, w) = (first.h, first.w);
        let mut out = RegionMask::empty(frames.len(), h, w);
        for (ti, f) in frames.iter().enumerate() {
            if f.t != 1 || f.h != h || f.w != w {
                return Err(Error::mismatch("mask frames differ in shape".to_string()));
            }
            for hi in 0..h {
                for wi in 0..w {
                    out.set(ti, hi, wi, f.get(0, hi, wi));
                }
            }
            out.source_boxes[ti] = f.source_boxes[0].clone();
        }
        Ok(out)
    }

    /// Bitmap container: header then bit-packed rows (MSB first), one frame
    /// after another.
    pub fn write(&self, w: &mut impl Write) -> Result<()> {
        io::write_magic(w, MASK_MAGIC)?;
        io::write_u16(w, MASK_VERSION)?;
        io::write_u32(w, self.t as u32)?;
        io::write_u32(w, self.h as u32)?;
        io::write_u32(w, self.w as u32)?;
        let bytes_per_row = self.w.div_ceil(8);
        for ti in 0..self.t {
            for hi in 0..self.h {
                let mut row = vec![0u8; bytes_per_row];
                for wi in 0..self.w {
                    if self.get(ti, hi, wi) {
                        row[wi / 8] |= 0x80 >> (wi % 8);
                    }
                }
                w.write_all(&row)?;
            }
        }
        Ok(())
    }

    pub fn read(r: &mut impl Read) -> Result<Self> {
        io::expect_magic(r, MASK_MAGIC)?;
        let version = io::read_u16(r)?;
        io::check_version(version, MASK_VERSION, "mask file")?;
        let t = io::read_u32(r)? as usize;
        let h = io::read_u32(r)? as usize;
        let w = io::read_u32(r)? as usize;
        let mut out = RegionMask::empty(t, h, w);
        let bytes_per_row = w.div_ceil(8);
        let mut row = vec![0u8; bytes_per_row];
        for ti in 0..t {
            for hi in 0..h {
                r.read_exact(&mut row)?;
                for wi in 0..w {
                    out.set(ti, hi, wi, row[wi / 8] & (0x80 >> (wi % 8)) != 0);
                }
            }
        }
        Ok(out)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write(&mut w)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let mut r = BufReader::new(File::open(path)?);
        Self::read(&mut r)
    }
}

/// Single-frame mask from the bounding box of the selected landmarks,
/// expanded by `margin_fraction` of the box diagonal and clamped to the
/// frame. `frame_dims` is `(height, width)`.
pub fn build_mask(
    landmarks: &LandmarkSet,
    frame_dims: (usize, usize),
    landmark_indices: &[usize],
    margin_fraction: f32,
) -> Result<RegionMask> {
    let (h, w) = frame_dims;
    if landmark_indices.is_empty() {
        return Err(Error::validation("no landmark indices requested"));
    }
    let mut min_x = f32::INFINITY;
    let mut max_x = f32::NEG_INFINITY;
    let mut min_y = f32::INFINITY;
    let mut max_y = f32::NEG_INFINITY;
    for &idx in landmark_indices {
        let (x, y) = landmarks
            .get(idx)
            .ok_or_else(|| Error::validation(format!("landmark index {idx} missing")))?;
        min_x = min_x.min(x);
        max_x = max_x.max(x);
        min_y = min_y.min(y);
        max_y = max_y.max(y);
    }
    let diag = ((max_x - min_x).powi(2) + (max_y - min_y).powi(2)).sqrt();
    let margin = margin_fraction * diag;
    let col0 = (min_x - margin).floor().max(0.0) as usize;
    let col1 = ((max_x + margin).ceil() as usize).min(w - 1);
    let row0 = (min_y - margin).floor().max(0.0) as usize;
    let row1 = ((max_y + margin).ceil() as usize).min(h - 1);
    let mut mask = RegionMask::empty(1, h, w);
    mask.add_box(0, row0, row1, col0, col1);
    Ok(mask)
}
