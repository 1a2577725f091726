//! Binary and text file formats. All binary integers and floats are
//! little-endian.
//!
//! | file      | layout                                                   |
//! |-----------|----------------------------------------------------------|
//! | mel       | `UFMEL1`, u32 T, u32 n_mels, f32 data; `<path>.json` meta |
//! | features  | `UFFEA1`, u32 T, u32 D, f32 data                          |
//! | codebook  | `UFCBK1`, u32 K, u32 D, f32 centroids, u64 seed           |
//! | units     | text: `#collapsed=<bool> k=<K>` then one id per line      |
//! | audio     | 16-bit PCM WAV, mono on write                            |

use std::fs;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::{Path, PathBuf};

use ndarray::Array2;

use crate::dsp::{MelMeta, MelSpectrogram, Waveform};
use crate::error::{Error, Result};
use crate::units::{Codebook, FeatureMatrix, TrainingMeta, UnitSequence};

pub const MEL_MAGIC: &[u8; 6] = b"UFMEL1";
pub const FEATURE_MAGIC: &[u8; 6] = b"UFFEA1";
pub const CODEBOOK_MAGIC: &[u8; 6] = b"UFCBK1";

fn format_err(path: &Path, reason: impl Into<String>) -> Error {
    Error::Format {
        path: path.to_path_buf(),
        reason: reason.into(),
    }
}

/// Writes through a temporary sibling and renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    let mut file = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    file.write_all(bytes).map_err(|e| Error::io(&tmp, e))?;
    file.sync_all().map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut buf))
        .map_err(|e| Error::io(path, e))?;
    Ok(buf)
}

/// Little-endian cursor over a byte buffer.
pub(crate) struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    pub fn new(buf: &'a [u8], path: &'a Path) -> Self {
        Self { buf, pos: 0, path }
    }

    pub fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(format_err(self.path, "unexpected end of file"));
        }
        let out = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    pub fn magic(&mut self, magic: &[u8; 6]) -> Result<()> {
        if self.take(6)? != magic {
            return Err(format_err(
                self.path,
                format!("expected magic {}", String::from_utf8_lossy(magic)),
            ));
        }
        Ok(())
    }

    pub fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub fn f32s(&mut self, n: usize) -> Result<Vec<f32>> {
        let raw = self.take(n.checked_mul(4).ok_or_else(|| format_err(self.path, "size overflow"))?)?;
        Ok(raw
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
            .collect())
    }

    pub fn finish(&self) -> Result<()> {
        if self.pos != self.buf.len() {
            return Err(format_err(self.path, "trailing bytes"));
        }
        Ok(())
    }
}

pub(crate) fn put_u32(out: &mut Vec<u8>, v: usize) {
    out.extend_from_slice(&(v as u32).to_le_bytes());
}

pub(crate) fn put_f32s<'a>(out: &mut Vec<u8>, data: impl IntoIterator<Item = &'a f32>) {
    for v in data {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

fn encode_matrix(magic: &[u8; 6], m: &Array2<f32>) -> Vec<u8> {
    let mut out = Vec::with_capacity(14 + 4 * m.len());
    out.extend_from_slice(magic);
    put_u32(&mut out, m.nrows());
    put_u32(&mut out, m.ncols());
    put_f32s(&mut out, m.iter());
    out
}

fn decode_matrix(magic: &[u8; 6], path: &Path) -> Result<Array2<f32>> {
    let bytes = read_bytes(path)?;
    let mut r = Reader::new(&bytes, path);
    r.magic(magic)?;
    let rows = r.u32()? as usize;
    let cols = r.u32()? as usize;
    let data = r.f32s(rows * cols)?;
    r.finish()?;
    Array2::from_shape_vec((rows, cols), data).map_err(|e| format_err(path, e.to_string()))
}

fn sidecar(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

pub fn write_mel(path: &Path, mel: &MelSpectrogram) -> Result<()> {
    write_atomic(path, &encode_matrix(MEL_MAGIC, mel.frames()))?;
    let meta = serde_json::to_vec_pretty(&mel.meta).expect("meta serializes");
    write_atomic(&sidecar(path), &meta)
}

/// Reads a mel file; a missing sidecar means default analysis settings.
pub fn read_mel(path: &Path) -> Result<MelSpectrogram> {
    let frames = decode_matrix(MEL_MAGIC, path)?;
    let side = sidecar(path);
    let meta = if side.exists() {
        serde_json::from_slice::<MelMeta>(&read_bytes(&side)?)
            .map_err(|e| format_err(&side, e.to_string()))?
    } else {
        MelMeta::default()
    };
    MelSpectrogram::with_meta(frames, meta)
}

pub fn write_features(path: &Path, features: &FeatureMatrix) -> Result<()> {
    write_atomic(path, &encode_matrix(FEATURE_MAGIC, features.rows()))
}

pub fn read_features(path: &Path) -> Result<FeatureMatrix> {
    FeatureMatrix::new(decode_matrix(FEATURE_MAGIC, path)?)
}

pub fn write_codebook(path: &Path, cb: &Codebook) -> Result<()> {
    let mut out = encode_matrix(CODEBOOK_MAGIC, cb.centroids());
    out.extend_from_slice(&cb.meta.seed.to_le_bytes());
    write_atomic(path, &out)
}

pub fn read_codebook(path: &Path) -> Result<Codebook> {
    let bytes = read_bytes(path)?;
    let mut r = Reader::new(&bytes, path);
    r.magic(CODEBOOK_MAGIC)?;
    let k = r.u32()? as usize;
    let d = r.u32()? as usize;
    let data = r.f32s(k * d)?;
    let seed = r.u64()?;
    r.finish()?;
    let centroids = Array2::from_shape_vec((k, d), data).map_err(|e| format_err(path, e.to_string()))?;
    Codebook::new(
        centroids,
        TrainingMeta {
            seed,
            ..TrainingMeta::default()
        },
    )
}

pub fn encode_units(units: &UnitSequence, k: usize) -> String {
    let mut s = format!("#collapsed={} k={k}\n", units.collapsed);
    for id in &units.ids {
        s.push_str(&id.to_string());
        s.push('\n');
    }
    s
}

pub fn write_units(path: &Path, units: &UnitSequence, k: usize) -> Result<()> {
    write_atomic(path, encode_units(units, k).as_bytes())
}

/// Returns the sequence and the codebook size from the header.
pub fn read_units(path: &Path) -> Result<(UnitSequence, usize)> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut lines = BufReader::new(file).lines();
    let header = lines
        .next()
        .ok_or_else(|| format_err(path, "missing header"))?
        .map_err(|e| Error::io(path, e))?;
    let (collapsed, k) = parse_units_header(&header).ok_or_else(|| format_err(path, format!("bad header {header:?}")))?;
    let mut ids = Vec::new();
    for line in lines {
        let line = line.map_err(|e| Error::io(path, e))?;
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let id: usize = line.parse().map_err(|_| format_err(path, format!("bad unit id {line:?}")))?;
        if id >= k {
            return Err(format_err(path, format!("unit id {id} outside k={k}")));
        }
        ids.push(id);
    }
    let units = UnitSequence { ids, collapsed };
    if collapsed && units.ids.windows(2).any(|w| w[0] == w[1]) {
        return Err(format_err(path, "collapsed sequence repeats an id"));
    }
    Ok((units, k))
}

fn parse_units_header(line: &str) -> Option<(bool, usize)> {
    let rest = line.strip_prefix('#')?;
    let mut collapsed = None;
    let mut k = None;
    for field in rest.split_whitespace() {
        match field.split_once('=')? {
            ("collapsed", v) => collapsed = Some(v.parse().ok()?),
            ("k", v) => k = Some(v.parse().ok()?),
            _ => return None,
        }
    }
    Some((collapsed?, k?))
}

/// Reads 16-bit PCM WAV; channels are averaged to mono.
pub fn read_wav(path: &Path) -> Result<Waveform> {
    let reader = hound::WavReader::open(path).map_err(|e| wav_err(path, e))?;
    let spec = reader.spec();
    if spec.sample_format != hound::SampleFormat::Int || spec.bits_per_sample != 16 {
        return Err(format_err(
            path,
            format!("expected 16-bit PCM, got {} bit {:?}", spec.bits_per_sample, spec.sample_format),
        ));
    }
    let channels = spec.channels.max(1) as usize;
    let raw: Vec<i16> = reader
        .into_samples::<i16>()
        .collect::<std::result::Result<_, _>>()
        .map_err(|e| wav_err(path, e))?;
    let samples = raw
        .chunks(channels)
        .map(|c| c.iter().map(|&v| v as f32 / 32768.0).sum::<f32>() / c.len() as f32)
        .collect();
    Waveform::new(samples, spec.sample_rate)
}

/// Writes mono 16-bit PCM; samples are clipped to [-1, 1].
pub fn write_wav(path: &Path, w: &Waveform) -> Result<()> {
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: w.sample_rate,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let mut buf = std::io::Cursor::new(Vec::new());
    {
        let mut writer = hound::WavWriter::new(&mut buf, spec).map_err(|e| wav_err(path, e))?;
        for &v in &w.samples {
            let q = (v.clamp(-1.0, 1.0) * 32767.0).round() as i16;
            writer.write_sample(q).map_err(|e| wav_err(path, e))?;
        }
        writer.finalize().map_err(|e| wav_err(path, e))?;
    }
    write_atomic(path, &buf.into_inner())
}

fn wav_err(path: &Path, e: hound::Error) -> Error {
    match e {
        hound::Error::IoError(source) => Error::io(path, source),
        other => format_err(path, other.to_string()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn mel_layout_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.mel");
        let frames = Array2::from_shape_fn((3, 80), |(i, j)| (i * 80 + j) as f32 * 0.25 - 7.0);
        write_mel(&path, &MelSpectrogram::new(frames.clone()).unwrap()).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        assert_eq!(&bytes[..6], b"UFMEL1");
        assert_eq!(&bytes[6..10], &3u32.to_le_bytes());
        assert_eq!(&bytes[10..14], &80u32.to_le_bytes());
        assert_eq!(&bytes[14..18], &(-7.0f32).to_le_bytes());
        assert_eq!(bytes.len(), 14 + 3 * 80 * 4);
        assert_eq!(read_mel(&path).unwrap().frames(), &frames);
    }

    #[test]
    fn codebook_trailer_holds_seed() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cb.bin");
        let meta = TrainingMeta {
            seed: 0xDEAD_BEEF_0042,
            ..TrainingMeta::default()
        };
        let cb = Codebook::new(ndarray::array![[1.0, 2.0], [3.0, 4.0], [5.0, 6.5]], meta).unwrap();
        write_codebook(&path, &cb).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        assert_eq!(&bytes[bytes.len() - 8..], &0xDEAD_BEEF_0042u64.to_le_bytes());
        let back = read_codebook(&path).unwrap();
        assert_eq!(back.centroids(), cb.centroids());
        assert_eq!(back.meta.seed, cb.meta.seed);
    }

    #[test]
    fn bad_magic_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.fea");
        std::fs::write(&path, b"UFMEL1\x01\0\0\0\x01\0\0\0\0\0\0\0").unwrap();
        assert!(matches!(read_features(&path), Err(Error::Format { .. })));
        std::fs::write(&path, b"UFFEA1\x02\0\0\0\x01\0\0\0\0\0\0\0").unwrap();
        assert!(matches!(read_features(&path), Err(Error::Format { .. })));
    }

    #[test]
    fn units_header() {
        let text = encode_units(&UnitSequence { ids: vec![3, 1], collapsed: true }, 512);
        assert_eq!(text, "#collapsed=true k=512\n3\n1\n");
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("u.txt");
        std::fs::write(&path, "#collapsed=false k=4\n1\n9\n").unwrap();
        assert!(read_units(&path).is_err());
        std::fs::write(&path, "#collapsed=true k=4\n1\n1\n").unwrap();
        assert!(read_units(&path).is_err());
    }

    proptest! {
        #[test]
        fn features_and_units_round_trip(
            rows in 1usize..6,
            cols in 1usize..5,
            seed in any::<u32>(),
            ids in proptest::collection::vec(0usize..9, 0..30),
            collapsed in any::<bool>(),
        ) {
            let dir = tempfile::tempdir().unwrap();
            let m = Array2::from_shape_fn((rows, cols), |(i, j)| ((seed as usize + i * 7 + j) % 1000) as f32 / 3.0);
            let fp = dir.path().join("f.fea");
            write_features(&fp, &FeatureMatrix::new(m.clone()).unwrap()).unwrap();
            prop_assert_eq!(read_features(&fp).unwrap().into_inner(), m);

            let mut ids = ids;
            if collapsed {
                ids.dedup();
            }
            let units = UnitSequence { ids, collapsed };
            let up = dir.path().join("u.units");
            write_units(&up, &units, 9).unwrap();
            prop_assert_eq!(read_units(&up).unwrap(), (units, 9));
        }
    }

    #[test]
    fn wav_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.wav");
        let w = Waveform::new(vec![0.0, 0.5, -0.5, 1.0, -1.0, 2.0], 16_000).unwrap();
        write_wav(&path, &w).unwrap();
        let bytes = read_bytes(&path).unwrap();
        assert_eq!(&bytes[..4], b"RIFF");
        assert_eq!(u16::from_le_bytes([bytes[34], bytes[35]]), 16);
        let back = read_wav(&path).unwrap();
        assert_eq!(back.sample_rate, 16_000);
        for (a, b) in w.samples.iter().zip(&back.samples) {
            assert!((a.clamp(-1.0, 1.0) - b).abs() < 1.0 / 16_000.0, "{a} vs {b}");
        }
        assert!(matches!(read_wav(&dir.path().join("missing.wav")), Err(Error::Io { .. })));
    }
}
