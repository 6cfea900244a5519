use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layout::BoundingBox;
use crate::model::StoryMeta;
use crate::numerics::Tensor;

/// Sampling at 0.25 frames per second.
pub const MIN_FRAME_SPACING_S: f64 = 4.0;

pub const LATENT_MAGIC: &[u8; 4] = b"L2SA";

/// One sampled video frame with its filter scores. The latent lives in a separate
/// file referenced relative to the record file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FrameRecord {
    pub video_id: String,
    pub frame_index: usize,
    pub timestamp_s: f64,
    pub latent: String,
    pub aesthetic_score: Option<f64>,
    pub nsfw: Option<bool>,
    #[serde(default)]
    pub bbox: Option<BoundingBox>,
    #[serde(default)]
    pub feature: Option<Vec<f64>>,
    #[serde(default)]
    pub meta: Option<StoryMeta>,
}

impl FrameRecord {
    pub fn key(&self) -> String {
        format!("{}#{}", self.video_id, self.frame_index)
    }
}

/// Read line-delimited JSON, skipping blank lines.
pub fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let f = fs::File::open(path)?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(
            serde_json::from_str(&line)
                .map_err(|e| Error::InvalidRecord(format!("{}:{}: {e}", path.display(), i + 1)))?,
        );
    }
    Ok(out)
}

pub fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    for it in items {
        serde_json::to_writer(&mut w, it)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

/// `L2SA` file: magic, then `h`, `w`, `c` as little-endian u32, then `h w c`
/// little-endian f32 values.
pub fn write_latent(path: &Path, t: &Tensor) -> Result<()> {
    let s = t.shape();
    if s.len() != 3 {
        return Err(Error::BadShape {
            op: "write_latent",
            detail: format!("expected (h, w, c), got {s:?}"),
        });
    }
    let mut buf = Vec::with_capacity(16 + 4 * t.numel());
    buf.extend_from_slice(LATENT_MAGIC);
    for &d in s {
        buf.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for &x in t.data() {
        buf.extend_from_slice(&(x as f32).to_le_bytes());
    }
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, buf)?;
    Ok(())
}

pub fn read_latent(path: &Path) -> Result<Tensor> {
    let buf = fs::read(path)?;
    let bad = |m: &str| Error::InvalidRecord(format!("{}: {m}", path.display()));
    if buf.len() < 16 || &buf[..4] != LATENT_MAGIC {
        return Err(bad("not an L2SA latent"));
    }
    let dim = |i: usize| u32::from_le_bytes(buf[4 + 4 * i..8 + 4 * i].try_into().unwrap()) as usize;
    let (h, w, c) = (dim(0), dim(1), dim(2));
    if buf.len() != 16 + 4 * h * w * c {
        return Err(bad("length does not match header"));
    }
    let data = buf[16..]
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().unwrap()) as f64)
        .collect();
    Tensor::new(&[h, w, c], data)
}

/// Drop NSFW frames and frames below the aesthetic threshold, keeping order.
pub fn filter_records(records: Vec<FrameRecord>, aes_threshold: f64) -> Result<Vec<FrameRecord>> {
    let mut out = Vec::with_capacity(records.len());
    for r in records {
        let (Some(aes), Some(nsfw)) = (r.aesthetic_score, r.nsfw) else {
            return Err(Error::MissingScore(r.key()));
        };
        if !nsfw && aes >= aes_threshold {
            out.push(r);
        }
    }
    Ok(out)
}

/// Records of each video, ordered by frame index, with the sampling-rate contract checked.
pub fn group_by_video(records: Vec<FrameRecord>) -> Result<Vec<(String, Vec<FrameRecord>)>> {
    let mut map: std::collections::BTreeMap<String, Vec<FrameRecord>> = Default::default();
    for r in records {
        if !(r.timestamp_s >= 0.0) {
            return Err(Error::InvalidRecord(format!("{}: negative timestamp", r.key())));
        }
        map.entry(r.video_id.clone()).or_default().push(r);
    }
    for (v, rs) in map.iter_mut() {
        rs.sort_by_key(|r| r.frame_index);
        for w in rs.windows(2) {
            if w[0].frame_index == w[1].frame_index {
                return Err(Error::InvalidRecord(format!("{v}: duplicate frame {}", w[0].frame_index)));
            }
            // small slack for timestamps printed with limited precision
            if w[1].timestamp_s - w[0].timestamp_s < MIN_FRAME_SPACING_S - 1e-6 {
                return Err(Error::InvalidRecord(format!(
                    "{v}: frames {} and {} are {:.3} s apart, less than {MIN_FRAME_SPACING_S} s",
                    w[0].frame_index,
                    w[1].frame_index,
                    w[1].timestamp_s - w[0].timestamp_s
                )));
            }
        }
    }
    Ok(map.into_iter().collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::RngStream;

    fn rec(video: &str, i: usize, aes: f64, nsfw: bool) -> FrameRecord {
        FrameRecord {
            video_id: video.into(),
            frame_index: i,
            timestamp_s: 4.0 * i as f64,
            latent: format!("{video}/{i}.l2sa"),
            aesthetic_score: Some(aes),
            nsfw: Some(nsfw),
            bbox: None,
            feature: None,
            meta: None,
        }
    }

    #[test]
    fn filter_examples() {
        let all: Vec<_> = (0..5).map(|i| rec("v", i, i as f64, false)).collect();
        assert_eq!(filter_records(all.clone(), f64::NEG_INFINITY).unwrap(), all);
        let bad: Vec<_> = (0..5).map(|i| rec("v", i, 9.0, true)).collect();
        assert!(filter_records(bad, f64::NEG_INFINITY).unwrap().is_empty());
        let mut r = RngStream::new(1, "f");
        let mixed: Vec<_> = (0..200).map(|i| rec("v", i, r.uniform_range(0.0, 10.0), r.bernoulli(0.3))).collect();
        let want: Vec<_> = mixed.iter().filter(|x| !x.nsfw.unwrap() && x.aesthetic_score.unwrap() >= 5.0).cloned().collect();
        assert_eq!(filter_records(mixed, 5.0).unwrap(), want);
        let mut missing = rec("v", 0, 1.0, false);
        missing.aesthetic_score = None;
        assert!(matches!(filter_records(vec![missing], 0.0), Err(Error::MissingScore(_))));
    }

    #[test]
    fn latent_round_trip_is_f32_exact() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a/b.l2sa");
        let t = Tensor::randn(&[3, 5, 4], 1.0, &mut RngStream::new(2, "lat"));
        write_latent(&p, &t).unwrap();
        let back = read_latent(&p).unwrap();
        assert_eq!(back.shape(), &[3, 5, 4]);
        let q = t.map(|x| x as f32 as f64);
        assert_eq!(back, q);
        let bytes = fs::read(&p).unwrap();
        assert_eq!(&bytes[..4], b"L2SA");
        assert_eq!(bytes.len(), 16 + 4 * 60);
        fs::write(&p, &bytes[..20]).unwrap();
        assert!(read_latent(&p).is_err());
    }

    #[test]
    fn spacing_contract() {
        let mut rs: Vec<_> = (0..4).map(|i| rec("v", i, 1.0, false)).collect();
        rs.reverse();
        let g = group_by_video(rs.clone()).unwrap();
        assert_eq!(g[0].1.iter().map(|r| r.frame_index).collect::<Vec<_>>(), vec![0, 1, 2, 3]);
        rs[0].timestamp_s = 10.0;
        assert!(group_by_video(rs).is_err());
    }

    #[test]
    fn jsonl_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("r.jsonl");
        let rs: Vec<_> = (0..3).map(|i| rec("v", i, 2.0, false)).collect();
        write_jsonl(&p, &rs).unwrap();
        assert_eq!(read_jsonl::<FrameRecord>(&p).unwrap(), rs);
        fs::write(&p, "{\"video_id\": \"v\", \"bogus\": 1}\n").unwrap();
        assert!(matches!(read_jsonl::<FrameRecord>(&p), Err(Error::InvalidRecord(_))));
    }
}
