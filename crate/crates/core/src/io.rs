//! On-disk formats.
//!
//! * Sparse dataset: `"HSPI"`, `u16` version (1), `u32` frame count, `u32` pixel
//!   count, then per frame `u32 n_ones, u32 n_multi, n_ones x u32, n_multi x u32,
//!   n_multi x i32`. Little-endian throughout. Metadata lives in a JSON sidecar
//!   at `<path>.json`.
//! * Grids: raw little-endian `f64`, row-major; complex grids interleave `(re, im)`.
//! * Masks and reliability flags: one byte per pixel (0 or 1).
//! * Latent tables: CSV `frame,theta_rad,diameter_px,tx_px,ty_px,state`.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use num_complex::Complex64;
use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::simulate::{DatasetMeta, LatentParams, SparseDataset, SparseFrame};

pub const MAGIC: &[u8; 4] = b"HSPI";
pub const VERSION: u16 = 1;

/// `<path>.json`
pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    File::create(path).map(BufWriter::new).map_err(|e| Error::io(path, e))
}

fn open(path: &Path) -> Result<BufReader<File>> {
    File::open(path).map(BufReader::new).map_err(|e| Error::io(path, e))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut w = create(path)?;
    serde_json::to_writer_pretty(&mut w, value).map_err(|source| Error::Json {
        path: path.to_owned(),
        source,
    })?;
    w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    serde_json::from_reader(open(path)?).map_err(|source| Error::Json {
        path: path.to_owned(),
        source,
    })
}

pub fn encode_frames<W: Write>(w: &mut W, frames: &[SparseFrame], n_pixels: u32) -> std::io::Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(frames.len() as u32).to_le_bytes())?;
    w.write_all(&n_pixels.to_le_bytes())?;
    for f in frames {
        w.write_all(&(f.ones.len() as u32).to_le_bytes())?;
        w.write_all(&(f.multi.len() as u32).to_le_bytes())?;
        for &p in f.ones.iter().chain(&f.multi) {
            w.write_all(&p.to_le_bytes())?;
        }
        for &c in &f.multi_counts {
            w.write_all(&c.to_le_bytes())?;
        }
    }
    Ok(())
}

fn read_u32<R: Read>(r: &mut R) -> std::io::Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u32_vec<R: Read>(r: &mut R, n: usize) -> std::io::Result<Vec<u32>> {
    let mut buf = vec![0u8; n * 4];
    r.read_exact(&mut buf)?;
    Ok(buf
        .chunks_exact(4)
        .map(|c| u32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect())
}

/// Decodes the binary frame stream; returns the frames and the pixel count.
pub fn decode_frames<R: Read>(r: &mut R) -> Result<(Vec<SparseFrame>, u32)> {
    let bad = |e: std::io::Error| Error::data(format!("truncated dataset: {e}"));
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(bad)?;
    if &magic != MAGIC {
        return Err(Error::data("not an HSPI dataset (bad magic)"));
    }
    let mut v = [0u8; 2];
    r.read_exact(&mut v).map_err(bad)?;
    let version = u16::from_le_bytes(v);
    if version != VERSION {
        return Err(Error::data(format!("unsupported dataset version {version}")));
    }
    let n_frames = read_u32(r).map_err(bad)?;
    let n_pixels = read_u32(r).map_err(bad)?;
    let mut frames = Vec::with_capacity(n_frames as usize);
    for _ in 0..n_frames {
        let n_ones = read_u32(r).map_err(bad)? as usize;
        let n_multi = read_u32(r).map_err(bad)? as usize;
        if n_ones + n_multi > n_pixels as usize {
            return Err(Error::data("frame lists more pixels than the detector has"));
        }
        let ones = read_u32_vec(r, n_ones).map_err(bad)?;
        let multi = read_u32_vec(r, n_multi).map_err(bad)?;
        let multi_counts = read_u32_vec(r, n_multi)
            .map_err(bad)?
            .into_iter()
            .map(|c| c as i32)
            .collect();
        frames.push(SparseFrame {
            ones,
            multi,
            multi_counts,
        });
    }
    Ok((frames, n_pixels))
}

pub fn write_dataset(path: &Path, ds: &SparseDataset) -> Result<()> {
    let n_pixels = (ds.meta.geometry.side_px * ds.meta.geometry.side_px) as u32;
    let mut w = create(path)?;
    encode_frames(&mut w, &ds.frames, n_pixels).map_err(|e| Error::io(path, e))?;
    w.flush().map_err(|e| Error::io(path, e))?;
    write_json(&sidecar_path(path), &ds.meta)
}

pub fn read_dataset(path: &Path) -> Result<SparseDataset> {
    let meta: DatasetMeta = read_json(&sidecar_path(path))?;
    let (frames, n_pixels) = decode_frames(&mut open(path)?)?;
    if n_pixels as usize != meta.geometry.side_px * meta.geometry.side_px {
        return Err(Error::data("pixel count disagrees with sidecar geometry"));
    }
    if frames.len() != meta.n_frames {
        return Err(Error::data("frame count disagrees with sidecar"));
    }
    let ds = SparseDataset { meta, frames };
    ds.validate()?;
    Ok(ds)
}

pub fn write_f64_raw(path: &Path, data: &[f64]) -> Result<()> {
    let mut w = create(path)?;
    for v in data {
        w.write_all(&v.to_le_bytes()).map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_f64_raw(path: &Path) -> Result<Vec<f64>> {
    let mut buf = Vec::new();
    open(path)?.read_to_end(&mut buf).map_err(|e| Error::io(path, e))?;
    if buf.len() % 8 != 0 {
        return Err(Error::data(format!(
            "{} is not a whole number of f64 values",
            path.display()
        )));
    }
    Ok(buf
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
        .collect())
}

pub fn write_complex_raw(path: &Path, data: &[Complex64]) -> Result<()> {
    let flat: Vec<f64> = data.iter().flat_map(|c| [c.re, c.im]).collect();
    write_f64_raw(path, &flat)
}

pub fn read_complex_raw(path: &Path) -> Result<Vec<Complex64>> {
    let flat = read_f64_raw(path)?;
    if flat.len() % 2 != 0 {
        return Err(Error::data("odd number of values in complex grid"));
    }
    Ok(flat.chunks_exact(2).map(|c| Complex64::new(c[0], c[1])).collect())
}

pub fn write_mask(path: &Path, mask: &[bool]) -> Result<()> {
    let bytes: Vec<u8> = mask.iter().map(|&b| b as u8).collect();
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_mask(path: &Path) -> Result<Vec<bool>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    bytes
        .into_iter()
        .map(|b| match b {
            0 => Ok(false),
            1 => Ok(true),
            other => Err(Error::data(format!("mask byte {other} is not 0 or 1"))),
        })
        .collect()
}

/// One row of a latent table: the per-frame parameters plus an optional state label.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentRow {
    pub frame: usize,
    pub latent: LatentParams,
    pub state: String,
}

pub const LATENT_HEADER: [&str; 6] = ["frame", "theta_rad", "diameter_px", "tx_px", "ty_px", "state"];

pub fn write_latents_csv(path: &Path, rows: &[LatentRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    w.write_record(LATENT_HEADER).map_err(|e| csv_err(path, e))?;
    for r in rows {
        w.write_record([
            r.frame.to_string(),
            r.latent.theta.to_string(),
            r.latent.diameter_px.to_string(),
            r.latent.shift_px[0].to_string(),
            r.latent.shift_px[1].to_string(),
            r.state.clone(),
        ])
        .map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_latents_csv(path: &Path) -> Result<Vec<LatentRow>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| csv_err(path, e))?;
    let headers = r.headers().map_err(|e| csv_err(path, e))?.clone();
    if headers.iter().ne(LATENT_HEADER.iter().copied()) {
        return Err(Error::data(format!("{} has an unexpected header", path.display())));
    }
    let num = |s: &str| -> Result<f64> {
        s.parse()
            .map_err(|_| Error::data(format!("bad number '{s}' in {}", path.display())))
    };
    let mut rows = Vec::new();
    for rec in r.records() {
        let rec = rec.map_err(|e| csv_err(path, e))?;
        rows.push(LatentRow {
            frame: rec[0]
                .parse()
                .map_err(|_| Error::data(format!("bad frame index in {}", path.display())))?,
            latent: LatentParams {
                theta: num(&rec[1])?,
                diameter_px: num(&rec[2])?,
                shift_px: [num(&rec[3])?, num(&rec[4])?],
            },
            state: rec[5].to_string(),
        });
    }
    Ok(rows)
}

fn csv_err(path: &Path, e: csv::Error) -> Error {
    Error::data(format!("{}: {e}", path.display()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::DetectorGeometry;
    use crate::simulate::LatentConfig;
    use proptest::prelude::*;

    fn frame_strategy(n_pixels: u32) -> impl Strategy<Value = SparseFrame> {
        proptest::collection::btree_map(0..n_pixels, 1i32..20, 0..40).prop_map(|m| {
            let mut f = SparseFrame::default();
            for (p, k) in m {
                if k == 1 {
                    f.ones.push(p);
                } else {
                    f.multi.push(p);
                    f.multi_counts.push(k);
                }
            }
            f
        })
    }

    proptest! {
        #[test]
        fn frame_stream_round_trips(frames in proptest::collection::vec(frame_strategy(400), 1..6)) {
            let mut buf = Vec::new();
            encode_frames(&mut buf, &frames, 400).unwrap();
            let (back, n) = decode_frames(&mut buf.as_slice()).unwrap();
            prop_assert_eq!(n, 400);
            prop_assert_eq!(back, frames);
        }
    }

    #[test]
    fn header_layout_is_fixed() {
        let f = SparseFrame {
            ones: vec![7],
            multi: vec![9],
            multi_counts: vec![3],
        };
        let mut buf = Vec::new();
        encode_frames(&mut buf, &[f], 25).unwrap();
        let expect: Vec<u8> = [
            &b"HSPI"[..],
            &1u16.to_le_bytes(),
            &1u32.to_le_bytes(),
            &25u32.to_le_bytes(),
            &1u32.to_le_bytes(),
            &1u32.to_le_bytes(),
            &7u32.to_le_bytes(),
            &9u32.to_le_bytes(),
            &3i32.to_le_bytes(),
        ]
        .concat();
        assert_eq!(buf, expect);
        buf[0] = b'X';
        assert!(decode_frames(&mut buf.as_slice()).is_err());
    }

    #[test]
    fn dataset_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let geom = DetectorGeometry::new(11, 5.5, 1.0).unwrap();
        let good = geom.good_pixels();
        let ds = SparseDataset {
            meta: DatasetMeta {
                geometry: geom.meta(),
                n_frames: 2,
                mean_photons_target: 10.0,
                seed: 3,
                with_reference: true,
                contrast: 11.0,
                scale: 0.123456789,
                latent: LatentConfig::default(),
            },
            frames: vec![
                SparseFrame {
                    ones: vec![good[0], good[5]],
                    multi: vec![good[3]],
                    multi_counts: vec![4],
                },
                SparseFrame::default(),
            ],
        };
        let path = dir.path().join("data.hspi");
        write_dataset(&path, &ds).unwrap();
        assert_eq!(read_dataset(&path).unwrap(), ds);

        let rows = vec![LatentRow {
            frame: 0,
            latent: LatentParams {
                theta: 1.234567890123,
                diameter_px: 7.1,
                shift_px: [-0.3, 1e-17],
            },
            state: "A".into(),
        }];
        let csv_path = dir.path().join("latents.csv");
        write_latents_csv(&csv_path, &rows).unwrap();
        assert_eq!(read_latents_csv(&csv_path).unwrap(), rows);

        let grid = vec![Complex64::new(1.5, -2.25), Complex64::new(f64::MIN_POSITIVE, 3.0)];
        let gp = dir.path().join("g.raw");
        write_complex_raw(&gp, &grid).unwrap();
        assert_eq!(read_complex_raw(&gp).unwrap(), grid);
        let mp = dir.path().join("m.raw");
        write_mask(&mp, &[true, false, true]).unwrap();
        assert_eq!(read_mask(&mp).unwrap(), vec![true, false, true]);
    }
}
