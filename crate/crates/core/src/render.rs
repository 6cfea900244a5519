//! Binary PPM output for latent frames and metric summaries.

use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::numerics::Tensor;

pub fn write_ppm(path: &Path, w: usize, h: usize, rgb: &[u8]) -> Result<()> {
    if rgb.len() != 3 * w * h {
        return Err(Error::shape("write_ppm", &[3 * w * h], &[rgb.len()]));
    }
    let mut buf = format!("P6\n{w} {h}\n255\n").into_bytes();
    buf.extend_from_slice(rgb);
    if let Some(d) = path.parent() {
        fs::create_dir_all(d)?;
    }
    fs::write(path, buf)?;
    Ok(())
}

/// `(w, h, rgb)` of a binary PPM with maxval 255.
pub fn read_ppm(path: &Path) -> Result<(usize, usize, Vec<u8>)> {
    let buf = fs::read(path)?;
    let bad = || Error::InvalidRecord(format!("{}: not a P6 image", path.display()));
    // header: magic, width, height, maxval separated by whitespace, then one whitespace byte
    let mut fields = Vec::new();
    let mut i = 0;
    while fields.len() < 4 {
        while i < buf.len() && buf[i].is_ascii_whitespace() {
            i += 1;
        }
        let start = i;
        while i < buf.len() && !buf[i].is_ascii_whitespace() {
            i += 1;
        }
        if start == i {
            return Err(bad());
        }
        fields.push(String::from_utf8_lossy(&buf[start..i]).into_owned());
    }
    i += 1;
    let num = |s: &str| s.parse::<usize>().map_err(|_| bad());
    if fields[0] != "P6" || num(&fields[3])? != 255 {
        return Err(bad());
    }
    let (w, h) = (num(&fields[1])?, num(&fields[2])?);
    if buf.len() < i || buf.len() - i != 3 * w * h {
        return Err(bad());
    }
    Ok((w, h, buf[i..].to_vec()))
}

/// Map `x` from `[lo, hi]` to `0..=255`; a constant batch renders mid-gray.
pub fn quantize(x: f64, lo: f64, hi: f64) -> u8 {
    if hi <= lo {
        return 128;
    }
    ((x - lo) / (hi - lo) * 255.0).round().clamp(0.0, 255.0) as u8
}

/// Write frames `(h, w, 4)` as `{stem}_f{index}.ppm` under `dir`. Channels 0 to 2
/// become RGB through one affine map set by the minimum and maximum over the whole
/// batch; channel 3 is not shown.
pub fn render_latent(frames: &[Tensor], dir: &Path, stem: &str) -> Result<Vec<PathBuf>> {
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for f in frames {
        let s = f.shape();
        if s.len() != 3 || s[2] != 4 {
            return Err(Error::BadShape {
                op: "render_latent",
                detail: format!("expected (h, w, 4), got {s:?}"),
            });
        }
        if !f.all_finite() {
            return Err(Error::NonFinite("render_latent input"));
        }
        for px in f.data().chunks(4) {
            for &x in &px[..3] {
                lo = lo.min(x);
                hi = hi.max(x);
            }
        }
    }
    frames
        .iter()
        .enumerate()
        .map(|(k, f)| {
            let (h, w) = (f.shape()[0], f.shape()[1]);
            let rgb: Vec<u8> = f.data().chunks(4).flat_map(|px| px[..3].iter().map(|&x| quantize(x, lo, hi))).collect();
            let p = dir.join(format!("{stem}_f{k}.ppm"));
            write_ppm(&p, w, h, &rgb)?;
            Ok(p)
        })
        .collect()
}

/// Horizontal bars, one per value, scaled to the largest magnitude.
pub fn render_bars(values: &[f64], path: &Path) -> Result<()> {
    let (w, bar_h) = (256usize, 16usize);
    let h = bar_h * values.len().max(1);
    let top = values.iter().map(|v| v.abs()).fold(0.0, f64::max);
    let mut rgb = vec![255u8; 3 * w * h];
    for (k, v) in values.iter().enumerate() {
        let len = if top > 0.0 && v.is_finite() { (v.abs() / top * (w - 1) as f64).round() as usize } else { 0 };
        let color = if *v >= 0.0 { [40, 90, 200] } else { [200, 60, 40] };
        for i in k * bar_h + 2..(k + 1) * bar_h - 2 {
            for j in 0..len {
                rgb[3 * (i * w + j)..3 * (i * w + j) + 3].copy_from_slice(&color);
            }
        }
    }
    write_ppm(path, w, h, &rgb)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::RngStream;

    #[test]
    fn constant_latent_is_gray() {
        let dir = tempfile::tempdir().unwrap();
        let p = render_latent(&[Tensor::full(&[3, 2, 4], 0.4)], dir.path(), "c").unwrap();
        assert_eq!(p[0].file_name().unwrap(), "c_f0.ppm");
        let (w, h, rgb) = read_ppm(&p[0]).unwrap();
        assert_eq!((w, h), (2, 3));
        assert!(rgb.iter().all(|&b| b == 128));
    }

    #[test]
    fn round_trip_matches_quantized_mapping() {
        let dir = tempfile::tempdir().unwrap();
        let mut r = RngStream::new(1, "render");
        let frames: Vec<_> = (0..3).map(|_| Tensor::randn(&[5, 7, 4], 1.0, &mut r)).collect();
        let paths = render_latent(&frames, dir.path(), "s").unwrap();
        let rgb_vals = frames.iter().flat_map(|f| f.data().chunks(4).flat_map(|p| p[..3].to_vec()).collect::<Vec<_>>());
        let (lo, hi) = rgb_vals.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), x| (a.min(x), b.max(x)));
        let mut saw_max = false;
        for (f, p) in frames.iter().zip(&paths) {
            let (w, h, rgb) = read_ppm(p).unwrap();
            assert_eq!((w, h), (7, 5));
            let want: Vec<u8> = f.data().chunks(4).flat_map(|px| px[..3].iter().map(|&x| quantize(x, lo, hi))).collect();
            assert_eq!(rgb, want);
            saw_max |= rgb.contains(&255);
        }
        assert!(saw_max);
    }

    #[test]
    fn bars_and_bad_files() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("b.ppm");
        render_bars(&[1.0, -0.5, 0.0], &p).unwrap();
        let (w, h, _) = read_ppm(&p).unwrap();
        assert_eq!((w, h), (256, 48));
        fs::write(&p, b"P3\n1 1\n255\n0 0 0").unwrap();
        assert!(read_ppm(&p).is_err());
    }
}
