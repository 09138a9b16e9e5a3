//! On-disk formats: `.udfg` defectogram recordings and JSON-lines files.
//!
//! `.udfg` layout, all little-endian:
//!
//! ```text
//! "UDFG" version:u16 channel_count:u16 depth_samples:u16 amplitude_bits:u16
//! pulse_pitch_um:u32 sample_window_us:u16
//! channel_count × (angle_decidegrees:i16 offset_mm:i32)
//! N × (encoder_position_um:u64 channel_count·depth_samples × amplitude:u16)
//! ```

use std::fs::File;
use std::io::{self, BufRead, BufReader, BufWriter, Read, Seek, SeekFrom, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::ingest::{AScanColumn, ChannelSpec, ColumnSource, ProbeAngle, StreamHeader};

pub const MAGIC: &[u8; 4] = b"UDFG";
pub const VERSION: u16 = 1;

/// Header bytes for `channel_count` channels.
pub fn header_len(channel_count: usize) -> u64 {
    18 + 6 * channel_count as u64
}

pub fn record_len(header: &StreamHeader) -> u64 {
    8 + 2 * header.samples_per_column() as u64
}

pub fn write_header<W: Write>(out: &mut W, header: &StreamHeader) -> Result<()> {
    header.validate()?;
    out.write_all(MAGIC)?;
    out.write_u16::<LittleEndian>(VERSION)?;
    out.write_u16::<LittleEndian>(header.channels.len() as u16)?;
    out.write_u16::<LittleEndian>(header.depth_samples)?;
    out.write_u16::<LittleEndian>(header.amplitude_bits)?;
    out.write_u32::<LittleEndian>(header.pulse_pitch_um)?;
    out.write_u16::<LittleEndian>(header.sample_window_us)?;
    for ch in &header.channels {
        out.write_i16::<LittleEndian>(ch.angle.decidegrees())?;
        out.write_i32::<LittleEndian>(ch.offset_mm)?;
    }
    Ok(())
}

pub fn read_header<R: Read>(input: &mut R) -> Result<StreamHeader> {
    let mut magic = [0u8; 4];
    input.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Format(format!(
            "bad magic {magic:?}, expected \"UDFG\""
        )));
    }
    let version = input.read_u16::<LittleEndian>()?;
    if version != VERSION {
        return Err(Error::Format(format!("unsupported version {version}")));
    }
    let channel_count = input.read_u16::<LittleEndian>()?;
    let depth_samples = input.read_u16::<LittleEndian>()?;
    let amplitude_bits = input.read_u16::<LittleEndian>()?;
    let pulse_pitch_um = input.read_u32::<LittleEndian>()?;
    let sample_window_us = input.read_u16::<LittleEndian>()?;
    let mut channels = Vec::with_capacity(usize::from(channel_count));
    for _ in 0..channel_count {
        let deci = input.read_i16::<LittleEndian>()?;
        let offset_mm = input.read_i32::<LittleEndian>()?;
        let angle = ProbeAngle::from_decidegrees(deci)
            .ok_or_else(|| Error::Format(format!("unsupported probe angle {deci} decidegrees")))?;
        channels.push(ChannelSpec { angle, offset_mm });
    }
    let header = StreamHeader {
        channels,
        depth_samples,
        amplitude_bits,
        pulse_pitch_um,
        sample_window_us,
    };
    header
        .validate()
        .map_err(|e| Error::Format(format!("invalid header: {e}")))?;
    Ok(header)
}

pub fn write_record<W: Write>(
    out: &mut W,
    header: &StreamHeader,
    column: &AScanColumn,
) -> Result<()> {
    if column.amplitudes.len() != header.samples_per_column() {
        return Err(Error::Format(format!(
            "record has {} amplitudes, header declares {}",
            column.amplitudes.len(),
            header.samples_per_column()
        )));
    }
    out.write_u64::<LittleEndian>(column.encoder_position_um)?;
    let mut buf = vec![0u8; column.amplitudes.len() * 2];
    for (chunk, &a) in buf.chunks_exact_mut(2).zip(&column.amplitudes) {
        chunk.copy_from_slice(&a.to_le_bytes());
    }
    out.write_all(&buf)?;
    Ok(())
}

/// Streams records into a `.udfg` file.
pub struct UdfgWriter<W: Write> {
    out: W,
    header: StreamHeader,
    records: u64,
}

impl UdfgWriter<BufWriter<File>> {
    pub fn create(path: &Path, header: StreamHeader) -> Result<Self> {
        Self::new(
            BufWriter::with_capacity(1 << 20, File::create(path)?),
            header,
        )
    }
}

impl<W: Write> UdfgWriter<W> {
    pub fn new(mut out: W, header: StreamHeader) -> Result<Self> {
        write_header(&mut out, &header)?;
        Ok(Self {
            out,
            header,
            records: 0,
        })
    }

    pub fn write(&mut self, column: &AScanColumn) -> Result<()> {
        write_record(&mut self.out, &self.header, column)?;
        self.records += 1;
        Ok(())
    }

    pub fn records(&self) -> u64 {
        self.records
    }

    pub fn finish(mut self) -> Result<W> {
        self.out.flush()?;
        Ok(self.out)
    }
}

/// Reads `.udfg` records sequentially.
pub struct UdfgReader<R: Read> {
    input: R,
    header: StreamHeader,
    buf: Vec<u8>,
    records: Option<u64>,
    read: u64,
}

impl UdfgReader<BufReader<File>> {
    /// Opens a file and checks that its length is a whole number of records.
    pub fn open(path: &Path) -> Result<Self> {
        let mut file = File::open(path)?;
        let len = file.metadata()?.len();
        let header = read_header(&mut file)?;
        let body = len.saturating_sub(header_len(header.channels.len()));
        let rec = record_len(&header);
        if body % rec != 0 {
            return Err(Error::Format(format!(
                "{}: body of {body} bytes is not a multiple of the {rec}-byte record",
                path.display()
            )));
        }
        file.seek(SeekFrom::Start(header_len(header.channels.len())))?;
        let mut reader = Self::with_header(BufReader::with_capacity(1 << 20, file), header);
        reader.records = Some(body / rec);
        Ok(reader)
    }
}

impl<R: Read> UdfgReader<R> {
    pub fn new(mut input: R) -> Result<Self> {
        let header = read_header(&mut input)?;
        Ok(Self::with_header(input, header))
    }

    fn with_header(input: R, header: StreamHeader) -> Self {
        let buf = vec![0u8; 2 * header.samples_per_column()];
        Self {
            input,
            header,
            buf,
            records: None,
            read: 0,
        }
    }

    /// Record count, known when opened from a file.
    pub fn records(&self) -> Option<u64> {
        self.records
    }

    pub fn read_record(&mut self) -> Result<Option<AScanColumn>> {
        let encoder = match self.input.read_u64::<LittleEndian>() {
            Ok(v) => v,
            Err(e) if e.kind() == io::ErrorKind::UnexpectedEof => return Ok(None),
            Err(e) => return Err(e.into()),
        };
        self.input.read_exact(&mut self.buf).map_err(|e| {
            if e.kind() == io::ErrorKind::UnexpectedEof {
                Error::Format(format!(
                    "truncated record {} at encoder {encoder} um",
                    self.read
                ))
            } else {
                e.into()
            }
        })?;
        self.read += 1;
        let amplitudes = self
            .buf
            .chunks_exact(2)
            .map(|b| u16::from_le_bytes([b[0], b[1]]))
            .collect();
        Ok(Some(AScanColumn {
            encoder_position_um: encoder,
            amplitudes,
        }))
    }
}

impl<R: Read> ColumnSource for UdfgReader<R> {
    fn header(&self) -> &StreamHeader {
        &self.header
    }

    fn next_column(&mut self) -> Result<Option<AScanColumn>> {
        self.read_record()
    }
}

/// Drains a column source into a `.udfg` file; returns the record count.
pub fn write_source<S: ColumnSource + ?Sized>(source: &mut S, path: &Path) -> Result<u64> {
    let mut writer = UdfgWriter::create(path, source.header().clone())?;
    while let Some(col) = source.next_column()? {
        writer.write(&col)?;
    }
    let n = writer.records();
    writer.finish()?;
    Ok(n)
}

pub fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    for item in items {
        serde_json::to_writer(&mut out, item)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let mut out = Vec::new();
    for (n, line) in BufReader::new(File::open(path)?).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(
            serde_json::from_str(&line)
                .map_err(|e| Error::Format(format!("{}:{}: {e}", path.display(), n + 1)))?,
        );
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ingest::SAMPLE_WINDOW_US;

    fn header() -> StreamHeader {
        StreamHeader {
            channels: ChannelSpec::default_layout(),
            depth_samples: 16,
            amplitude_bits: 12,
            pulse_pitch_um: 1000,
            sample_window_us: SAMPLE_WINDOW_US,
        }
    }

    #[test]
    fn header_layout_is_fixed() {
        let mut buf = Vec::new();
        write_header(&mut buf, &header()).unwrap();
        assert_eq!(buf.len() as u64, header_len(7));
        assert_eq!(&buf[..4], b"UDFG");
        assert_eq!(u16::from_le_bytes([buf[4], buf[5]]), 1);
        assert_eq!(u16::from_le_bytes([buf[6], buf[7]]), 7);
        assert_eq!(
            u32::from_le_bytes([buf[12], buf[13], buf[14], buf[15]]),
            1000
        );
        // first descriptor: −70° as −700 decidegrees
        assert_eq!(i16::from_le_bytes([buf[18], buf[19]]), -700);
    }

    #[test]
    fn bad_magic_and_version_rejected() {
        let mut buf = Vec::new();
        write_header(&mut buf, &header()).unwrap();
        let mut bad = buf.clone();
        bad[0] = b'X';
        assert!(matches!(UdfgReader::new(&bad[..]), Err(Error::Format(_))));
        let mut bad = buf;
        bad[4] = 9;
        assert!(matches!(UdfgReader::new(&bad[..]), Err(Error::Format(_))));
    }

    #[test]
    fn ragged_file_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("r.udfg");
        let h = header();
        let mut w = UdfgWriter::create(&path, h.clone()).unwrap();
        w.write(&AScanColumn {
            encoder_position_um: 0,
            amplitudes: vec![1; h.samples_per_column()],
        })
        .unwrap();
        w.finish().unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes.pop();
        std::fs::write(&path, bytes).unwrap();
        assert!(matches!(UdfgReader::open(&path), Err(Error::Format(_))));
    }
}
