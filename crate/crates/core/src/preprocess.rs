//! Amplitude normalization, affine resampling to the classifier grid and
//! routing of channels into the five fusion groups.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::decision::{group_class_set, DefectClass};
use crate::error::{Error, Result};
use crate::ingest::{ChannelFrame, FrameSet, ProbeAngle};

/// Side length of the square classifier input.
pub const INPUT_SIZE: usize = 64;

/// One of the five channel combinations, each served by its own classifier.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum FusionGroup {
    G1,
    G2,
    G3,
    G4,
    G5,
}

impl FusionGroup {
    pub const ALL: [FusionGroup; 5] = [
        FusionGroup::G1,
        FusionGroup::G2,
        FusionGroup::G3,
        FusionGroup::G4,
        FusionGroup::G5,
    ];

    pub fn id(self) -> u8 {
        self as u8 + 1
    }

    pub fn from_id(id: u8) -> Option<FusionGroup> {
        FusionGroup::ALL
            .get(usize::from(id).checked_sub(1)?)
            .copied()
    }

    /// Member angles, ascending.
    pub fn angles(self) -> &'static [ProbeAngle] {
        use ProbeAngle::*;
        match self {
            FusionGroup::G1 => &[Zero],
            FusionGroup::G2 => &[Minus70, Plus70],
            FusionGroup::G3 => &[Minus70, Minus35, Zero, Plus35, Plus70],
            FusionGroup::G4 => &[Minus35, Zero, Plus35],
            FusionGroup::G5 => &[Minus55, Plus55],
        }
    }

    pub fn contains(self, angle: ProbeAngle) -> bool {
        self.angles().contains(&angle)
    }

    pub fn channel_count(self) -> usize {
        self.angles().len()
    }

    /// Classes this group's classifier distinguishes; `NoIndication` first.
    pub fn class_set(self) -> &'static [DefectClass] {
        group_class_set(self)
    }
}

impl fmt::Display for FusionGroup {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "G{}", self.id())
    }
}

impl Serialize for FusionGroup {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_u8(self.id())
    }
}

impl<'de> Deserialize<'de> for FusionGroup {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let id = u8::deserialize(d)?;
        FusionGroup::from_id(id)
            .ok_or_else(|| serde::de::Error::custom(format!("group id {id} not in 1..=5")))
    }
}

/// Stacked classifier input of one group for one frame window.
#[derive(Debug, Clone, PartialEq)]
pub struct FusedInput {
    pub group: FusionGroup,
    pub window_index: u64,
    pub track_start_m: f64,
    pub track_end_m: f64,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    /// `channels × height × width`, row-major per plane.
    pub planes: Vec<f32>,
}

impl FusedInput {
    pub fn plane(&self, c: usize) -> &[f32] {
        let n = self.height * self.width;
        &self.planes[c * n..(c + 1) * n]
    }
}

/// Maps a raw ADC value into `[0, 1]`.
pub fn normalize(raw: u16, max_raw: u16) -> Result<f32> {
    if max_raw == 0 {
        return Err(Error::InvalidConfig("max_raw must be > 0".into()));
    }
    if raw > max_raw {
        return Err(Error::DataCorruption(format!(
            "raw amplitude {raw} exceeds {max_raw}"
        )));
    }
    Ok(f32::from(raw) / f32::from(max_raw))
}

/// Inverse of [`normalize`], rounded to the nearest raw unit.
pub fn denormalize(value: f32, max_raw: u16) -> u16 {
    (value.clamp(0.0, 1.0) * f32::from(max_raw)).round() as u16
}

/// Resamples a `height × width` plane onto `target_h × target_w` through
/// `x = (width / target_w)·x'`, `y = (height / target_h)·y'` with bilinear
/// interpolation.
pub fn affine_resample_plane(
    src: &[f32],
    height: usize,
    width: usize,
    target_h: usize,
    target_w: usize,
) -> Result<Vec<f32>> {
    if target_h < 8 || target_w < 8 {
        return Err(Error::InvalidConfig(format!(
            "resample target {target_h}x{target_w} is below 8x8"
        )));
    }
    if src.len() != height * width || height == 0 || width == 0 {
        return Err(Error::ShapeMismatch(format!(
            "plane of {} values is not {height}x{width}",
            src.len()
        )));
    }
    let a = width as f64 / target_w as f64;
    let c = height as f64 / target_h as f64;
    let xs: Vec<(usize, usize, f32)> = (0..target_w)
        .map(|x| sample_coord(a * x as f64, width))
        .collect();
    let mut out = Vec::with_capacity(target_h * target_w);
    for y in 0..target_h {
        let (y0, y1, fy) = sample_coord(c * y as f64, height);
        let r0 = &src[y0 * width..(y0 + 1) * width];
        let r1 = &src[y1 * width..(y1 + 1) * width];
        for &(x0, x1, fx) in &xs {
            let top = r0[x0] + (r0[x1] - r0[x0]) * fx;
            let bottom = r1[x0] + (r1[x1] - r1[x0]) * fx;
            out.push(top + (bottom - top) * fy);
        }
    }
    Ok(out)
}

fn sample_coord(pos: f64, len: usize) -> (usize, usize, f32) {
    let pos = pos.clamp(0.0, (len - 1) as f64);
    let i0 = pos.floor() as usize;
    let i1 = (i0 + 1).min(len - 1);
    (i0, i1, (pos - i0 as f64) as f32)
}

/// Resamples one channel frame onto the classifier grid.
pub fn affine_resample(frame: &ChannelFrame, target_h: usize, target_w: usize) -> Result<Vec<f32>> {
    affine_resample_plane(&frame.data, frame.height, frame.width, target_h, target_w)
}

/// Builds the five group inputs of one frame window.
pub fn fuse(set: &FrameSet) -> Result<Vec<FusedInput>> {
    fuse_with_size(set, INPUT_SIZE)
}

pub fn fuse_with_size(set: &FrameSet, size: usize) -> Result<Vec<FusedInput>> {
    for group in FusionGroup::ALL {
        for &angle in group.angles() {
            if set.frame(angle).is_none() {
                return Err(Error::MissingAngle {
                    group: group.id(),
                    angle,
                });
            }
        }
    }
    if let Some(first) = set.frames.first() {
        let pitch = (set.track_end_m - set.track_start_m) / first.width.max(1) as f64;
        let tolerance = pitch.abs() * 0.5 + 1e-9;
        if let Some(bad) = set
            .frames
            .iter()
            .find(|f| (f.track_start_m - first.track_start_m).abs() > tolerance)
        {
            return Err(Error::ShapeMismatch(format!(
                "frame {} starts at {} m, set starts at {} m",
                bad.angle, bad.track_start_m, first.track_start_m
            )));
        }
    }

    let mut resampled: Vec<(ProbeAngle, Vec<f32>)> = Vec::with_capacity(ProbeAngle::ALL.len());
    for angle in ProbeAngle::ALL {
        if FusionGroup::ALL.iter().any(|g| g.contains(angle)) {
            if let Some(frame) = set.frame(angle) {
                resampled.push((angle, affine_resample(frame, size, size)?));
            }
        }
    }
    let plane_of = |angle: ProbeAngle| -> &[f32] {
        &resampled
            .iter()
            .find(|(a, _)| *a == angle)
            .expect("checked above")
            .1
    };

    Ok(FusionGroup::ALL
        .into_iter()
        .map(|group| {
            let mut planes = Vec::with_capacity(group.channel_count() * size * size);
            for &angle in group.angles() {
                planes.extend_from_slice(plane_of(angle));
            }
            FusedInput {
                group,
                window_index: set.window_index,
                track_start_m: set.track_start_m,
                track_end_m: set.track_end_m,
                channels: group.channel_count(),
                height: size,
                width: size,
                planes,
            }
        })
        .collect())
}
