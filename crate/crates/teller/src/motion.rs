//! Per-frame motion descriptors and frame-window utilities.
//!
//! A frame of motion is a 25×3 real matrix: 21 implicit-keypoint deformation
//! vectors, three pose rows, and one expression offset, flattened in exactly
//! that order everywhere (files, codecs, token targets). Windows group a
//! fixed number of consecutive frames and carry their frame rate.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io;

pub const DEFORMATION_ROWS: usize = 21;
pub const POSE_ROWS: usize = 3;
pub const FRAME_ROWS: usize = DEFORMATION_ROWS + POSE_ROWS + 1;
pub const FRAME_DIM: usize = FRAME_ROWS * 3;

/// Default frames per window; four frames of motion pair with one 200ms
/// audio chunk.
pub const WINDOW_FRAMES: usize = 4;

const MOTION_MAGIC: &[u8; 4] = b"TMLT";
const MOTION_VERSION: u16 = 1;

/// One frame's motion descriptor.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MotionLatent {
    pub deformations: [[f32; 3]; DEFORMATION_ROWS],
    pub pose_rows: [[f32; 3]; POSE_ROWS],
    pub expression_offset: [f32; 3],
}

impl MotionLatent {
    pub fn zeros() -> Self {
        MotionLatent {
            deformations: [[0.0; 3]; DEFORMATION_ROWS],
            pose_rows: [[0.0; 3]; POSE_ROWS],
            expression_offset: [0.0; 3],
        }
    }

    /// Flatten to 75 values: deformations, then pose rows, then the
    /// expression offset.
    pub fn flatten(&self) -> [f32; FRAME_DIM] {
        let mut out = [0.0f32; FRAME_DIM];
        let mut k = 0;
        for row in &self.deformations {
            out[k..k + 3].copy_from_slice(row);
            k += 3;
        }
        for row in &self.pose_rows {
            out[k..k + 3].copy_from_slice(row);
            k += 3;
        }
        out[k..k + 3].copy_from_slice(&self.expression_offset);
        out
    }

    pub fn from_flat(values: &[f32]) -> Result<Self> {
        if values.len() != FRAME_DIM {
            return Err(Error::validation(format!(
                "motion frame must have {FRAME_DIM} values, got {}",
                values.len()
            )));
        }
        let mut latent = MotionLatent::zeros();
        for (i, chunk) in values.chunks_exact(3).enumerate() {
            let row = [chunk[0], chunk[1], chunk[2]];
            if i < DEFORMATION_ROWS {
                latent.deformations[i] = row;
            } else if i < DEFORMATION_ROWS + POSE_ROWS {
                latent.pose_rows[i - DEFORMATION_ROWS] = row;
            } else {
                latent.expression_offset = row;
            }
        }
        latent.validate()?;
        Ok(latent)
    }

    pub fn validate(&self) -> Result<()> {
        let check = |row: &[f32; 3], name: String| -> Result<()> {
            if row.iter().any(|v| !v.is_finite()) {
                return Err(Error::validation(format!("non-finite value in {name}")));
            }
            Ok(())
        };
        for (i, row) in self.deformations.iter().enumerate() {
            check(row, format!("deformation {}", i + 1))?;
        }
        for (i, row) in self.pose_rows.iter().enumerate() {
            check(row, format!("pose row {}", i + 1))?;
        }
        check(&self.expression_offset, "expression offset".to_string())
    }
}

/// Build a [`MotionLatent`] from its three components, rejecting non-finite
/// input with an error that names the offending row.
pub fn assemble(
    deformations: [[f32; 3]; DEFORMATION_ROWS],
    pose_rows: [[f32; 3]; POSE_ROWS],
    expression_offset: [f32; 3],
) -> Result<MotionLatent> {
    let latent = MotionLatent { deformations, pose_rows, expression_offset };
    latent.validate()?;
    Ok(latent)
}

/// Inverse of [`assemble`]: hand back the three components.
pub fn split(latent: &MotionLatent) -> ([[f32; 3]; DEFORMATION_ROWS], [[f32; 3]; POSE_ROWS], [f32; 3]) {
    (latent.deformations, latent.pose_rows, latent.expression_offset)
}

/// A fixed-length run of consecutive frames.
#[derive(Clone, Debug, PartialEq)]
pub struct MotionWindow {
    pub frames: Vec<MotionLatent>,
    pub frame_rate_hz: f32,
}

impl MotionWindow {
    pub fn new(frames: Vec<MotionLatent>, frame_rate_hz: f32) -> Result<Self> {
        if !(frame_rate_hz.is_finite() && frame_rate_hz > 0.0) {
            return Err(Error::validation(format!(
                "frame rate must be positive, got {frame_rate_hz}"
            )));
        }
        for f in &frames {
            f.validate()?;
        }
        Ok(MotionWindow { frames, frame_rate_hz })
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }
}

/// Concatenate a window's frames in order, each in flattening order.
pub fn flatten_window(w: &MotionWindow) -> Vec<f32> {
    let mut out = Vec::with_capacity(w.frames.len() * FRAME_DIM);
    for f in &w.frames {
        out.extend_from_slice(&f.flatten());
    }
    out
}

/// Inverse of [`flatten_window`].
pub fn unflatten_window(values: &[f32], frame_rate_hz: f32) -> Result<MotionWindow> {
    if values.len() % FRAME_DIM != 0 {
        return Err(Error::validation(format!(
            "flattened window length {} is not a multiple of {FRAME_DIM}",
            values.len()
        )));
    }
    let frames = values
        .chunks_exact(FRAME_DIM)
        .map(MotionLatent::from_flat)
        .collect::<Result<Vec<_>>>()?;
    MotionWindow::new(frames, frame_rate_hz)
}

/// Resample a 4-frame window to 5 frames by piecewise-linear interpolation
/// at uniform fractional positions over the original timeline. Endpoints are
/// copied exactly; the output frame rate is 5/4 of the input's.
pub fn interpolate_4_to_5(w: &MotionWindow) -> Result<MotionWindow> {
    if w.frames.len() != 4 {
        return Err(Error::validation(format!(
            "interpolation expects 4 frames, got {}",
            w.frames.len()
        )));
    }
    let flat: Vec<[f32; FRAME_DIM]> = w.frames.iter().map(|f| f.flatten()).collect();
    let mut frames = Vec::with_capacity(5);
    for k in 0..5usize {
        if k == 0 {
            frames.push(w.frames[0].clone());
            continue;
        }
        if k == 4 {
            frames.push(w.frames[3].clone());
            continue;
        }
        // position k·(3/4) on the 0..3 source timeline
        let pos = k as f32 * 0.75;
        let lo = pos.floor() as usize;
        let frac = pos - lo as f32;
        let mut vals = [0.0f32; FRAME_DIM];
        for (j, v) in vals.iter_mut().enumerate() {
            *v = flat[lo][j] * (1.0 - frac) + flat[lo + 1][j] * frac;
        }
        frames.push(MotionLatent::from_flat(&vals)?);
    }
    MotionWindow::new(frames, w.frame_rate_hz * 5.0 / 4.0)
}

/// A motion clip: ordered frames plus their rate, the unit of file I/O.
#[derive(Clone, Debug, PartialEq)]
pub struct MotionClip {
    pub frames: Vec<MotionLatent>,
    pub frame_rate_hz: f32,
}

impl MotionClip {
    pub fn new(frames: Vec<MotionLatent>, frame_rate_hz: f32) -> Self {
        MotionClip { frames, frame_rate_hz }
    }

    /// Slice into consecutive windows of `window_frames`; the tail is dropped
    /// if it does not fill a window.
    pub fn windows(&self, window_frames: usize) -> Vec<MotionWindow> {
        self.frames
            .chunks_exact(window_frames)
            .map(|c| MotionWindow { frames: c.to_vec(), frame_rate_hz: self.frame_rate_hz })
            .collect()
    }

    /// Binary container: 16-byte header (magic, version u16, frame count u32,
    /// frame rate f32, reserved u16) followed by `frame_count × 75` f32 LE.
    pub fn write(&self, w: &mut impl Write) -> Result<()> {
        io::write_magic(w, MOTION_MAGIC)?;
        io::write_u16(w, MOTION_VERSION)?;
        io::write_u32(w, self.frames.len() as u32)?;
        io::write_f32(w, self.frame_rate_hz)?;
        io::write_u16(w, 0)?; // reserved, pads header to 16 bytes
        for f in &self.frames {
            io::write_f32_slice(w, &f.flatten())?;
        }
        Ok(())
    }

    pub fn read(r: &mut impl Read) -> Result<Self> {
        io::expect_magic(r, MOTION_MAGIC)?;
        let version = io::read_u16(r)?;
        io::check_version(version, MOTION_VERSION, "motion file")?;
        let count = io::read_u32(r)? as usize;
        let rate = io::read_f32(r)?;
        let _reserved = io::read_u16(r)?;
        let mut frames = Vec::with_capacity(count);
        for _ in 0..count {
            let vals = io::read_f32_vec(r, FRAME_DIM)?;
            frames.push(MotionLatent::from_flat(&vals)?);
        }
        Ok(MotionClip { frames, frame_rate_hz: rate })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write(&mut w)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let mut r = BufReader::new(File::open(path)?);
        Self::read(&mut r)
    }

    /// Lossless JSON debug form: frame rate plus an array of 25×3 arrays per
    /// frame.
    pub fn to_debug_json(&self) -> String {
        let frames: Vec<Vec<[f32; 3]>> = self
            .frames
            .iter()
            .map(|f| {
                let flat = f.flatten();
                flat.chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect()
            })
            .collect();
        let doc = serde_json::json!({ "frame_rate_hz": self.frame_rate_hz, "frames": frames });
        serde_json::to_string_pretty(&doc).expect("json encode")
    }

    pub fn from_debug_json(text: &str) -> Result<Self> {
        #[derive(Deserialize)]
        struct Doc {
            frame_rate_hz: f32,
            frames: Vec<Vec<[f32; 3]>>,
        }
        let doc: Doc = serde_json::from_str(text)
            .map_err(|e| Error::format(format!("motion json: {e}")))?;
        let mut frames = Vec::with_capacity(doc.frames.len());
        for rows in &doc.frames {
            if rows.len() != FRAME_ROWS {
                return Err(Error::format(format!(
                    "motion json frame must have {FRAME_ROWS} rows, got {}",
                    rows.len()
                )));
            }
            let flat: Vec<f32> = rows.iter().flatten().copied().collect();
            frames.push(MotionLatent::from_flat(&flat)?);
        }
        Ok(MotionClip { frames, frame_rate_hz: doc.frame_rate_hz })
    }
}
