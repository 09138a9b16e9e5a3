//! Firing-record ingestion: probe geometry, the measurement stack and
//! fixed-size per-channel frame assembly.

use std::collections::VecDeque;
use std::fmt;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};

/// Longitudinal sound velocity in rail steel.
pub const SOUND_VELOCITY_MPS: f64 = 5900.0;
/// Receive window of one A-scan.
pub const SAMPLE_WINDOW_US: u16 = 60;
pub const DEFAULT_FRAME_WIDTH: usize = 512;
pub const DEFAULT_DEPTH_SAMPLES: usize = 128;
pub const DEFAULT_AMPLITUDE_BITS: u16 = 12;

/// Signed probe inclination. Ordering is ascending by angle.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum ProbeAngle {
    Minus70,
    Minus55,
    Minus35,
    Zero,
    Plus35,
    Plus55,
    Plus70,
}

impl ProbeAngle {
    /// All seven angles, ascending.
    pub const ALL: [ProbeAngle; 7] = [
        ProbeAngle::Minus70,
        ProbeAngle::Minus55,
        ProbeAngle::Minus35,
        ProbeAngle::Zero,
        ProbeAngle::Plus35,
        ProbeAngle::Plus55,
        ProbeAngle::Plus70,
    ];

    pub fn degrees(self) -> i16 {
        match self {
            ProbeAngle::Minus70 => -70,
            ProbeAngle::Minus55 => -55,
            ProbeAngle::Minus35 => -35,
            ProbeAngle::Zero => 0,
            ProbeAngle::Plus35 => 35,
            ProbeAngle::Plus55 => 55,
            ProbeAngle::Plus70 => 70,
        }
    }

    pub fn from_degrees(degrees: i16) -> Option<ProbeAngle> {
        ProbeAngle::ALL.into_iter().find(|a| a.degrees() == degrees)
    }

    pub fn decidegrees(self) -> i16 {
        self.degrees() * 10
    }

    pub fn from_decidegrees(value: i16) -> Option<ProbeAngle> {
        if value % 10 != 0 {
            return None;
        }
        ProbeAngle::from_degrees(value / 10)
    }
}

impl fmt::Display for ProbeAngle {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.degrees() {
            d if d > 0 => write!(f, "+{d}°"),
            d => write!(f, "{d}°"),
        }
    }
}

impl Serialize for ProbeAngle {
    fn serialize<S: Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        serializer.serialize_i16(self.degrees())
    }
}

impl<'de> Deserialize<'de> for ProbeAngle {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        let degrees = i16::deserialize(deserializer)?;
        ProbeAngle::from_degrees(degrees)
            .ok_or_else(|| serde::de::Error::custom(format!("unsupported probe angle {degrees}")))
    }
}

/// One probe channel: its angle and its longitudinal offset from the
/// system zero position.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChannelSpec {
    pub angle: ProbeAngle,
    pub offset_mm: i32,
}

impl ChannelSpec {
    pub fn new(angle: ProbeAngle, offset_mm: i32) -> Self {
        Self { angle, offset_mm }
    }

    /// The seven-probe skid used by the simulator and the tooling defaults.
    pub fn default_layout() -> Vec<ChannelSpec> {
        ProbeAngle::ALL
            .into_iter()
            .map(|angle| ChannelSpec::new(angle, i32::from(angle.degrees()) * 3))
            .collect()
    }
}

/// Rejects duplicate angles and empty channel sets.
pub fn validate_channels(channels: &[ChannelSpec]) -> Result<()> {
    if channels.is_empty() {
        return Err(Error::InvalidConfig("channel set is empty".into()));
    }
    for (i, a) in channels.iter().enumerate() {
        if channels[..i].iter().any(|b| b.angle == a.angle) {
            return Err(Error::InvalidConfig(format!(
                "duplicate channel angle {}",
                a.angle
            )));
        }
    }
    Ok(())
}

/// Track coordinate in meters of what `channel` sees when the system zero is
/// at `encoder_position_um`. Probes lead the zero point, so the offset is
/// subtracted.
pub fn correct_position(encoder_position_um: u64, channel: &ChannelSpec) -> f64 {
    encoder_position_um as f64 / 1e6 - f64::from(channel.offset_mm) / 1e3
}

/// Depth in millimeters of a sample computed from time of flight only; the
/// probe inclination is ignored. `sample_index == depth_samples` is accepted
/// and denotes the far edge of the receive window.
pub fn apparent_depth(
    sample_index: usize,
    depth_samples: usize,
    sample_window_us: f64,
    velocity_mps: f64,
) -> Result<f64> {
    if depth_samples == 0 || sample_index > depth_samples {
        return Err(Error::OutOfRange {
            index: sample_index,
            len: depth_samples,
        });
    }
    let time_s = sample_index as f64 / depth_samples as f64 * sample_window_us * 1e-6;
    Ok(velocity_mps * time_s / 2.0 * 1000.0)
}

/// Apparent depth with the fixed velocity and receive window.
pub fn apparent_depth_mm(sample_index: usize, depth_samples: usize) -> Result<f64> {
    apparent_depth(
        sample_index,
        depth_samples,
        f64::from(SAMPLE_WINDOW_US),
        SOUND_VELOCITY_MPS,
    )
}

/// Acquisition parameters shared by every record of a stream. This is also
/// the `.udfg` file header.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StreamHeader {
    pub channels: Vec<ChannelSpec>,
    pub depth_samples: u16,
    pub amplitude_bits: u16,
    pub pulse_pitch_um: u32,
    pub sample_window_us: u16,
}

impl StreamHeader {
    pub fn validate(&self) -> Result<()> {
        validate_channels(&self.channels)?;
        if self.depth_samples < 16 {
            return Err(Error::InvalidConfig(format!(
                "depth_samples must be >= 16, got {}",
                self.depth_samples
            )));
        }
        if !(1..=16).contains(&self.amplitude_bits) {
            return Err(Error::InvalidConfig(format!(
                "amplitude_bits must be in 1..=16, got {}",
                self.amplitude_bits
            )));
        }
        if self.pulse_pitch_um == 0 {
            return Err(Error::InvalidConfig("pulse_pitch_um must be > 0".into()));
        }
        if self.sample_window_us == 0 {
            return Err(Error::InvalidConfig("sample_window_us must be > 0".into()));
        }
        Ok(())
    }

    pub fn channel_count(&self) -> usize {
        self.channels.len()
    }

    /// Amplitude values per firing record.
    pub fn samples_per_column(&self) -> usize {
        self.channels.len() * usize::from(self.depth_samples)
    }

    pub fn max_raw(&self) -> u16 {
        ((1u32 << self.amplitude_bits) - 1) as u16
    }
}

/// One firing: the zero-point encoder reading and one A-scan per channel,
/// channel-major (`amplitudes[c * depth + d]`).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AScanColumn {
    pub encoder_position_um: u64,
    pub amplitudes: Vec<u16>,
}

/// Uniform pull interface over recorded files and live generators.
pub trait ColumnSource {
    fn header(&self) -> &StreamHeader;
    fn next_column(&mut self) -> Result<Option<AScanColumn>>;
}

impl<S: ColumnSource + ?Sized> ColumnSource for Box<S> {
    fn header(&self) -> &StreamHeader {
        (**self).header()
    }

    fn next_column(&mut self) -> Result<Option<AScanColumn>> {
        (**self).next_column()
    }
}

/// A B-scan tile of one channel. `data` is row-major with rows indexing
/// depth (`height`) and columns indexing track position (`width`).
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelFrame {
    pub angle: ProbeAngle,
    pub track_start_m: f64,
    pub width: usize,
    pub height: usize,
    pub data: Vec<f32>,
}

impl ChannelFrame {
    pub fn at(&self, depth: usize, column: usize) -> f32 {
        self.data[depth * self.width + column]
    }

    pub fn row(&self, depth: usize) -> &[f32] {
        &self.data[depth * self.width..(depth + 1) * self.width]
    }
}

/// All channel frames of one window, in the stream's channel order.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameSet {
    pub window_index: u64,
    pub track_start_m: f64,
    pub track_end_m: f64,
    /// Set on the zero-padded final partial window.
    pub tail: bool,
    pub frames: Vec<ChannelFrame>,
}

impl FrameSet {
    pub fn frame(&self, angle: ProbeAngle) -> Option<&ChannelFrame> {
        self.frames.iter().find(|f| f.angle == angle)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FrameGeometry {
    pub width: usize,
    pub stride: usize,
}

impl Default for FrameGeometry {
    fn default() -> Self {
        Self {
            width: DEFAULT_FRAME_WIDTH,
            stride: DEFAULT_FRAME_WIDTH / 2,
        }
    }
}

/// Bounded sliding buffer of firing records that cuts aligned frame sets.
///
/// Each channel's frame is shifted by its probe offset (in whole pulse
/// pitches) so that all frames of a set image the same stretch of track.
/// Window `k` uses columns `k*S + shift_c - min_shift ..` of channel `c`.
#[derive(Debug)]
pub struct MeasurementStack {
    header: StreamHeader,
    geometry: FrameGeometry,
    /// Column shift of each channel relative to the least-shifted channel.
    shifts: Vec<usize>,
    span: usize,
    buffer: VecDeque<AScanColumn>,
    /// Absolute index of `buffer[0]`.
    buffer_base: u64,
    received: u64,
    next_window: u64,
    last_encoder_um: Option<u64>,
    max_buffered: usize,
    finished: bool,
}

impl MeasurementStack {
    pub fn new(header: StreamHeader, geometry: FrameGeometry) -> Result<Self> {
        header.validate()?;
        if geometry.width == 0 || geometry.stride == 0 || geometry.stride > geometry.width {
            return Err(Error::InvalidConfig(format!(
                "invalid frame geometry: width {} stride {}",
                geometry.width, geometry.stride
            )));
        }
        let pitch = f64::from(header.pulse_pitch_um);
        let raw: Vec<i64> = header
            .channels
            .iter()
            .map(|c| (f64::from(c.offset_mm) * 1000.0 / pitch).round() as i64)
            .collect();
        let min = raw.iter().copied().min().unwrap_or(0);
        let shifts: Vec<usize> = raw.iter().map(|s| (s - min) as usize).collect();
        let span = shifts.iter().copied().max().unwrap_or(0);
        if span > geometry.width {
            return Err(Error::InvalidConfig(format!(
                "probe offsets span {span} columns, more than one frame width ({})",
                geometry.width
            )));
        }
        Ok(Self {
            header,
            geometry,
            shifts,
            span,
            buffer: VecDeque::with_capacity(2 * geometry.width + 1),
            buffer_base: 0,
            received: 0,
            next_window: 0,
            last_encoder_um: None,
            max_buffered: 0,
            finished: false,
        })
    }

    pub fn header(&self) -> &StreamHeader {
        &self.header
    }

    pub fn geometry(&self) -> FrameGeometry {
        self.geometry
    }

    pub fn buffered(&self) -> usize {
        self.buffer.len()
    }

    /// High-water mark of the buffer over the stack's lifetime.
    pub fn max_buffered(&self) -> usize {
        self.max_buffered
    }

    pub fn columns_received(&self) -> u64 {
        self.received
    }

    /// Appends one firing and returns the frame sets it completes.
    pub fn push_column(&mut self, column: AScanColumn) -> Result<Vec<FrameSet>> {
        if column.amplitudes.len() != self.header.samples_per_column() {
            return Err(Error::DataCorruption(format!(
                "record at {} um has {} amplitudes, expected {}",
                column.encoder_position_um,
                column.amplitudes.len(),
                self.header.samples_per_column()
            )));
        }
        if let Some(previous) = self.last_encoder_um {
            if column.encoder_position_um <= previous {
                return Err(Error::StreamCorruption {
                    position_um: column.encoder_position_um,
                    previous_um: previous,
                });
            }
        }
        let max_raw = self.header.max_raw();
        if let Some(bad) = column.amplitudes.iter().find(|&&a| a > max_raw) {
            return Err(Error::DataCorruption(format!(
                "amplitude {bad} exceeds {max_raw} at {} um",
                column.encoder_position_um
            )));
        }
        self.last_encoder_um = Some(column.encoder_position_um);
        self.buffer.push_back(column);
        self.received += 1;
        self.max_buffered = self.max_buffered.max(self.buffer.len());

        let mut out = Vec::new();
        while self.window_ready(self.next_window) {
            out.push(self.cut_window(self.next_window, false));
            self.next_window += 1;
            self.evict();
        }
        Ok(out)
    }

    /// Flushes the final partial window, zero-padded and flagged as tail.
    pub fn finish(&mut self) -> Option<FrameSet> {
        if self.finished {
            return None;
        }
        self.finished = true;
        let covered_until = if self.next_window == 0 {
            0
        } else {
            (self.next_window - 1) * self.geometry.stride as u64 + self.geometry.width as u64
        };
        if self.received > covered_until {
            let set = self.cut_window(self.next_window, true);
            self.next_window += 1;
            Some(set)
        } else {
            None
        }
    }

    fn window_start(&self, window: u64) -> u64 {
        window * self.geometry.stride as u64
    }

    fn window_ready(&self, window: u64) -> bool {
        let needed = self.window_start(window) + (self.span + self.geometry.width) as u64;
        self.received >= needed
    }

    fn evict(&mut self) {
        let keep_from = self.window_start(self.next_window);
        while self.buffer_base < keep_from && !self.buffer.is_empty() {
            self.buffer.pop_front();
            self.buffer_base += 1;
        }
    }

    fn cut_window(&self, window: u64, tail: bool) -> FrameSet {
        const TILE: usize = 16;
        let width = self.geometry.width;
        let depth = usize::from(self.header.depth_samples);
        let scale = 1.0 / f32::from(self.header.max_raw());
        let pitch_m = f64::from(self.header.pulse_pitch_um) / 1e6;
        let start = self.window_start(window);
        let mut frames = Vec::with_capacity(self.header.channels.len());
        for (c, spec) in self.header.channels.iter().enumerate() {
            let first = start + self.shifts[c] as u64;
            let mut data = vec![0.0f32; depth * width];
            let mut track_start_m = None;
            let mut columns: Vec<(usize, &[u16])> = Vec::with_capacity(width);
            for x in 0..width {
                let abs = first + x as u64;
                if abs < self.buffer_base {
                    continue;
                }
                let Some(col) = self.buffer.get((abs - self.buffer_base) as usize) else {
                    break;
                };
                if track_start_m.is_none() {
                    track_start_m =
                        Some(correct_position(col.encoder_position_um, spec) - x as f64 * pitch_m);
                }
                columns.push((x, &col.amplitudes[c * depth..(c + 1) * depth]));
            }
            // transpose in tiles so writes stay within a few cache lines per row
            for tile in columns.chunks(TILE) {
                for d0 in (0..depth).step_by(TILE) {
                    let d1 = (d0 + TILE).min(depth);
                    for &(x, scan) in tile {
                        for (d, &raw) in scan[d0..d1].iter().enumerate() {
                            data[(d0 + d) * width + x] = f32::from(raw) * scale;
                        }
                    }
                }
            }
            frames.push(ChannelFrame {
                angle: spec.angle,
                track_start_m: track_start_m.unwrap_or(f64::NAN),
                width,
                height: depth,
                data,
            });
        }
        // Channels with no columns in a tail window inherit the set's start.
        let reference = frames
            .iter()
            .map(|f| f.track_start_m)
            .find(|t| t.is_finite())
            .unwrap_or(0.0);
        for f in &mut frames {
            if !f.track_start_m.is_finite() {
                f.track_start_m = reference;
            }
        }
        FrameSet {
            window_index: window,
            track_start_m: reference,
            track_end_m: reference + width as f64 * pitch_m,
            tail,
            frames,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn header(channels: Vec<ChannelSpec>, depth: u16) -> StreamHeader {
        StreamHeader {
            channels,
            depth_samples: depth,
            amplitude_bits: 12,
            pulse_pitch_um: 1000,
            sample_window_us: SAMPLE_WINDOW_US,
        }
    }

    fn column(i: u64, samples: usize) -> AScanColumn {
        AScanColumn {
            encoder_position_um: i * 1000,
            amplitudes: vec![(i % 4096) as u16; samples],
        }
    }

    fn push_n(stack: &mut MeasurementStack, n: u64) -> Vec<FrameSet> {
        let samples = stack.header().samples_per_column();
        (0..n)
            .flat_map(|i| stack.push_column(column(i, samples)).unwrap())
            .collect()
    }

    #[test]
    fn correct_position_examples() {
        let ch = ChannelSpec::new(ProbeAngle::Zero, 350);
        assert!((correct_position(100_000_000, &ch) - 99.65).abs() < 1e-12);
        let zero = ChannelSpec::new(ProbeAngle::Zero, 0);
        assert_eq!(correct_position(1_234_567, &zero), 1.234567);
        let a = ChannelSpec::new(ProbeAngle::Plus35, 100);
        let b = ChannelSpec::new(ProbeAngle::Minus35, 300);
        let d = correct_position(5_000_000, &a) - correct_position(5_000_000, &b);
        assert!((d - 0.2).abs() < 1e-12);
    }

    #[test]
    fn apparent_depth_examples() {
        assert_eq!(apparent_depth_mm(0, 128).unwrap(), 0.0);
        assert!((apparent_depth_mm(128, 128).unwrap() - 177.0).abs() < 1e-9);
        assert!((apparent_depth_mm(64, 128).unwrap() - 88.5).abs() < 1e-9);
        assert!(matches!(
            apparent_depth_mm(129, 128),
            Err(Error::OutOfRange {
                index: 129,
                len: 128
            })
        ));
    }

    #[test]
    fn angle_codes() {
        for a in ProbeAngle::ALL {
            assert_eq!(ProbeAngle::from_decidegrees(a.decidegrees()), Some(a));
        }
        assert_eq!(ProbeAngle::from_degrees(45), None);
        assert_eq!(ProbeAngle::from_decidegrees(351), None);
        let json = serde_json::to_string(&ProbeAngle::Minus55).unwrap();
        assert_eq!(json, "-55");
    }

    #[test]
    fn duplicate_angles_rejected() {
        let chans = vec![
            ChannelSpec::new(ProbeAngle::Zero, 0),
            ChannelSpec::new(ProbeAngle::Zero, 10),
        ];
        assert!(matches!(
            validate_channels(&chans),
            Err(Error::InvalidConfig(_))
        ));
    }

    #[test]
    fn frame_emission_counts() {
        let h = header(vec![ChannelSpec::new(ProbeAngle::Zero, 0)], 16);
        let mut stack = MeasurementStack::new(h.clone(), FrameGeometry::default()).unwrap();
        assert!(push_n(&mut stack, 511).is_empty());

        let mut stack = MeasurementStack::new(h.clone(), FrameGeometry::default()).unwrap();
        assert_eq!(push_n(&mut stack, 512).len(), 1);

        let mut stack = MeasurementStack::new(h, FrameGeometry::default()).unwrap();
        let sets = push_n(&mut stack, 768);
        assert_eq!(sets.len(), 2);
        assert_eq!(sets[0].frames[0].at(0, 0), 0.0);
        assert!((sets[1].track_start_m - 0.256).abs() < 1e-12);
        // column 256 holds raw 256
        assert!((sets[1].frames[0].at(0, 0) - 256.0 / 4095.0).abs() < 1e-7);
        assert!((sets[1].frames[0].at(5, 511) - 767.0 / 4095.0).abs() < 1e-7);
    }

    #[test]
    fn non_monotonic_encoder_is_corruption() {
        let h = header(vec![ChannelSpec::new(ProbeAngle::Zero, 0)], 16);
        let mut stack = MeasurementStack::new(h, FrameGeometry::default()).unwrap();
        stack.push_column(column(5, 16)).unwrap();
        let err = stack.push_column(column(5, 16)).unwrap_err();
        assert!(matches!(
            err,
            Error::StreamCorruption {
                position_um: 5000,
                previous_um: 5000
            }
        ));
    }

    #[test]
    fn out_of_range_amplitude_is_corruption() {
        let h = header(vec![ChannelSpec::new(ProbeAngle::Zero, 0)], 16);
        let mut stack = MeasurementStack::new(h, FrameGeometry::default()).unwrap();
        let mut col = column(0, 16);
        col.amplitudes[3] = 4096;
        assert!(matches!(
            stack.push_column(col),
            Err(Error::DataCorruption(_))
        ));
    }

    #[test]
    fn offsets_align_channels_on_track() {
        let chans = vec![
            ChannelSpec::new(ProbeAngle::Zero, 0),
            ChannelSpec::new(ProbeAngle::Plus70, 100),
        ];
        let h = header(chans, 16);
        let mut stack = MeasurementStack::new(h, FrameGeometry::default()).unwrap();
        assert!(push_n(&mut stack, 611).is_empty());
        let sets = push_n_from(&mut stack, 611, 1);
        assert_eq!(sets.len(), 1);
        let set = &sets[0];
        assert!((set.frames[0].track_start_m - set.frames[1].track_start_m).abs() < 1e-12);
        // the +70 frame starts 100 columns later in the stream
        assert!((set.frames[1].at(0, 0) - 100.0 / 4095.0).abs() < 1e-7);
    }

    fn push_n_from(stack: &mut MeasurementStack, from: u64, n: u64) -> Vec<FrameSet> {
        let samples = stack.header().samples_per_column();
        (from..from + n)
            .flat_map(|i| stack.push_column(column(i, samples)).unwrap())
            .collect()
    }

    #[test]
    fn tail_window_is_padded_once() {
        let h = header(vec![ChannelSpec::new(ProbeAngle::Zero, 0)], 16);
        let mut stack = MeasurementStack::new(h, FrameGeometry::default()).unwrap();
        assert_eq!(push_n(&mut stack, 600).len(), 1);
        let tail = stack.finish().expect("tail window");
        assert!(tail.tail);
        assert_eq!(tail.window_index, 1);
        let f = &tail.frames[0];
        assert!((f.at(0, 0) - 256.0 / 4095.0).abs() < 1e-7);
        assert!((f.at(0, 343) - 599.0 / 4095.0).abs() < 1e-7);
        assert_eq!(f.at(0, 344), 0.0);
        assert!(stack.finish().is_none());
    }

    #[test]
    fn no_tail_when_fully_covered() {
        let h = header(vec![ChannelSpec::new(ProbeAngle::Zero, 0)], 16);
        let mut stack = MeasurementStack::new(h, FrameGeometry::default()).unwrap();
        assert_eq!(push_n(&mut stack, 768).len(), 2);
        assert!(stack.finish().is_none());
    }

    #[test]
    fn offset_span_wider_than_frame_rejected() {
        let chans = vec![
            ChannelSpec::new(ProbeAngle::Zero, 0),
            ChannelSpec::new(ProbeAngle::Plus70, 600),
        ];
        assert!(MeasurementStack::new(header(chans, 16), FrameGeometry::default()).is_err());
    }
}
