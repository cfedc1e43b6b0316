//! PFM / PGM / PPM readers and writers.
//!
//! PFM files are written little-endian (scale `-1.0`) with rows stored
//! bottom-to-top as the format prescribes; big-endian files are accepted on
//! read. PGM (P5) supports 8- and 16-bit samples (16-bit big-endian), PPM (P6)
//! 8-bit samples. All parse failures report the byte offset.

use std::fs;
use std::io::Write;
use std::path::Path;

use nalgebra::Vector3;

use crate::error::{Error, Result};
use crate::maps::{DepthMap, Grid, ImageF, NormalMap};

/// Raw PFM contents; `data` is row-major top-to-bottom, channel-interleaved.
#[derive(Debug, Clone, PartialEq)]
pub struct Pfm {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub data: Vec<f32>,
}

/// Raw PNM contents (P5 or P6).
#[derive(Debug, Clone, PartialEq)]
pub struct Pnm {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub maxval: u16,
    pub data: Vec<u16>,
}

struct Header<'a> {
    bytes: &'a [u8],
    pos: usize,
    what: &'static str,
}

impl<'a> Header<'a> {
    fn skip_space(&mut self) {
        while self.pos < self.bytes.len() {
            match self.bytes[self.pos] {
                b'#' => {
                    while self.pos < self.bytes.len() && self.bytes[self.pos] != b'\n' {
                        self.pos += 1;
                    }
                }
                c if c.is_ascii_whitespace() => self.pos += 1,
                _ => break,
            }
        }
    }

    fn token(&mut self) -> Result<(&'a str, usize)> {
        self.skip_space();
        let start = self.pos;
        while self.pos < self.bytes.len() && !self.bytes[self.pos].is_ascii_whitespace() {
            self.pos += 1;
        }
        if start == self.pos {
            return Err(Error::parse(self.what, start, "unexpected end of header"));
        }
        let s = std::str::from_utf8(&self.bytes[start..self.pos])
            .map_err(|_| Error::parse(self.what, start, "header token is not ASCII"))?;
        Ok((s, start))
    }

    fn number<T: std::str::FromStr>(&mut self, name: &str) -> Result<T> {
        let (tok, at) = self.token()?;
        tok.parse()
            .map_err(|_| Error::parse(self.what, at, format!("invalid {name} '{tok}'")))
    }

    /// Consume the single whitespace byte that ends the header.
    fn end_header(&mut self) -> Result<usize> {
        match self.bytes.get(self.pos) {
            Some(c) if c.is_ascii_whitespace() => Ok(self.pos + 1),
            _ => Err(Error::parse(self.what, self.pos, "header must end with one whitespace byte")),
        }
    }
}

fn check_dims(what: &'static str, at: usize, w: usize, h: usize) -> Result<()> {
    if w == 0 || h == 0 {
        return Err(Error::parse(what, at, format!("empty image {w}x{h}")));
    }
    Ok(())
}

pub fn parse_pfm(bytes: &[u8]) -> Result<Pfm> {
    let mut hd = Header { bytes, pos: 0, what: "PFM" };
    let (magic, at) = hd.token()?;
    let channels = match magic {
        "Pf" => 1,
        "PF" => 3,
        _ => return Err(Error::parse("PFM", at, format!("bad magic '{magic}'"))),
    };
    let width: usize = hd.number("width")?;
    let height: usize = hd.number("height")?;
    check_dims("PFM", hd.pos, width, height)?;
    let (scale_tok, scale_at) = hd.token()?;
    let scale: f64 = scale_tok
        .parse()
        .map_err(|_| Error::parse("PFM", scale_at, format!("invalid scale '{scale_tok}'")))?;
    if scale == 0.0 || !scale.is_finite() {
        return Err(Error::parse("PFM", scale_at, "scale must be non-zero"));
    }
    let little = scale < 0.0;
    let start = hd.end_header()?;
    let n = width * height * channels;
    let body = &bytes[start..];
    if body.len() < 4 * n {
        return Err(Error::parse(
            "PFM",
            bytes.len(),
            format!("truncated body: need {} bytes, found {}", 4 * n, body.len()),
        ));
    }
    let mut data = vec![0f32; n];
    let row = width * channels;
    for (i, chunk) in body[..4 * n].chunks_exact(4).enumerate() {
        let raw = [chunk[0], chunk[1], chunk[2], chunk[3]];
        let v = if little { f32::from_le_bytes(raw) } else { f32::from_be_bytes(raw) };
        let file_row = i / row;
        let col = i % row;
        data[(height - 1 - file_row) * row + col] = v;
    }
    Ok(Pfm {
        width,
        height,
        channels,
        data,
    })
}

pub fn encode_pfm(pfm: &Pfm) -> Vec<u8> {
    let magic = if pfm.channels == 3 { "PF" } else { "Pf" };
    let mut out = format!("{magic}\n{} {}\n-1.0\n", pfm.width, pfm.height).into_bytes();
    let row = pfm.width * pfm.channels;
    out.reserve(4 * pfm.data.len());
    for y in (0..pfm.height).rev() {
        for v in &pfm.data[y * row..(y + 1) * row] {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn parse_pnm(bytes: &[u8]) -> Result<Pnm> {
    let mut hd = Header { bytes, pos: 0, what: "PNM" };
    let (magic, at) = hd.token()?;
    let channels = match magic {
        "P5" => 1,
        "P6" => 3,
        _ => return Err(Error::parse("PNM", at, format!("unsupported magic '{magic}' (expected P5 or P6)"))),
    };
    let width: usize = hd.number("width")?;
    let height: usize = hd.number("height")?;
    check_dims("PNM", hd.pos, width, height)?;
    let maxval_at = hd.pos;
    let maxval: u32 = hd.number("maxval")?;
    if maxval == 0 || maxval > 65535 {
        return Err(Error::parse("PNM", maxval_at, format!("maxval {maxval} out of range")));
    }
    let start = hd.end_header()?;
    let wide = maxval > 255;
    let n = width * height * channels;
    let need = if wide { 2 * n } else { n };
    let body = &bytes[start..];
    if body.len() < need {
        return Err(Error::parse(
            "PNM",
            bytes.len(),
            format!("truncated body: need {need} bytes, found {}", body.len()),
        ));
    }
    let data: Vec<u16> = if wide {
        body[..need].chunks_exact(2).map(|c| u16::from_be_bytes([c[0], c[1]])).collect()
    } else {
        body[..need].iter().map(|&b| b as u16).collect()
    };
    if let Some(i) = data.iter().position(|&v| v as u32 > maxval) {
        let off = start + if wide { 2 * i } else { i };
        return Err(Error::parse("PNM", off, format!("sample {} exceeds maxval {maxval}", data[i])));
    }
    Ok(Pnm {
        width,
        height,
        channels,
        maxval: maxval as u16,
        data,
    })
}

pub fn encode_pnm(pnm: &Pnm) -> Vec<u8> {
    let magic = if pnm.channels == 3 { "P6" } else { "P5" };
    let mut out = format!("{magic}\n{} {}\n{}\n", pnm.width, pnm.height, pnm.maxval).into_bytes();
    if pnm.maxval > 255 {
        for v in &pnm.data {
            out.extend_from_slice(&v.to_be_bytes());
        }
    } else {
        out.extend(pnm.data.iter().map(|&v| v as u8));
    }
    out
}

fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

/// Write through a temporary sibling and rename, so readers never observe a
/// half-written file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension(format!(
        "{}.tmp",
        path.extension().and_then(|e| e.to_str()).unwrap_or("")
    ));
    let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(bytes).map_err(|e| Error::io(&tmp, e))?;
    f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    drop(f);
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn read_pfm(path: &Path) -> Result<Pfm> {
    parse_pfm(&read_bytes(path)?).map_err(|e| with_path(e, path))
}

pub fn write_pfm(path: &Path, pfm: &Pfm) -> Result<()> {
    write_atomic(path, &encode_pfm(pfm))
}

pub fn read_pnm(path: &Path) -> Result<Pnm> {
    parse_pnm(&read_bytes(path)?).map_err(|e| with_path(e, path))
}

pub fn write_pnm(path: &Path, pnm: &Pnm) -> Result<()> {
    write_atomic(path, &encode_pnm(pnm))
}

fn with_path(e: Error, path: &Path) -> Error {
    match e {
        Error::Parse { what, offset, msg } => Error::Parse {
            what: format!("{what} file {}", path.display()),
            offset,
            msg,
        },
        other => other,
    }
}

impl Pfm {
    pub fn from_scalar(grid: &Grid<f64>) -> Pfm {
        Pfm {
            width: grid.width(),
            height: grid.height(),
            channels: 1,
            data: grid.data().iter().map(|&v| v as f32).collect(),
        }
    }

    pub fn from_normals(grid: &Grid<Vector3<f64>>) -> Pfm {
        Pfm {
            width: grid.width(),
            height: grid.height(),
            channels: 3,
            data: grid.data().iter().flat_map(|n| [n.x as f32, n.y as f32, n.z as f32]).collect(),
        }
    }

    pub fn to_scalar(&self) -> Result<Grid<f64>> {
        if self.channels != 1 {
            return Err(Error::Validation(format!("expected a 1-channel PFM, got {} channels", self.channels)));
        }
        Grid::from_vec(self.width, self.height, self.data.iter().map(|&v| v as f64).collect())
    }

    pub fn to_normals(&self) -> Result<Grid<Vector3<f64>>> {
        if self.channels != 3 {
            return Err(Error::Validation(format!("expected a 3-channel PFM, got {} channels", self.channels)));
        }
        Grid::from_vec(
            self.width,
            self.height,
            self.data
                .chunks_exact(3)
                .map(|c| Vector3::new(c[0] as f64, c[1] as f64, c[2] as f64))
                .collect(),
        )
    }

    pub fn to_depth(&self) -> Result<DepthMap> {
        DepthMap::new(self.to_scalar()?)
    }

    /// Normal maps stored as f32 lose precision; vectors are renormalized.
    pub fn to_normal_map(&self) -> Result<NormalMap> {
        NormalMap::new(self.to_normals()?.map(|n| {
            let len = n.norm();
            if len > 0.0 {
                n / len
            } else {
                *n
            }
        }))
    }
}

impl Pnm {
    /// 8-bit encoding of an image with intensities clamped to `[0, 1]`.
    pub fn from_image(img: &ImageF) -> Pnm {
        Pnm {
            width: img.width(),
            height: img.height(),
            channels: img.channels(),
            maxval: 255,
            data: img.data().iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u16).collect(),
        }
    }

    pub fn to_image(&self) -> Result<ImageF> {
        let scale = 1.0 / self.maxval as f64;
        ImageF::new(
            self.width,
            self.height,
            self.channels,
            self.data.iter().map(|&v| v as f64 * scale).collect(),
        )
    }

    pub fn from_labels(grid: &Grid<u16>) -> Pnm {
        Pnm {
            width: grid.width(),
            height: grid.height(),
            channels: 1,
            maxval: 65535,
            data: grid.data().to_vec(),
        }
    }

    /// Binary map as 8-bit {0, 255}.
    pub fn from_binary(grid: &Grid<bool>) -> Pnm {
        Pnm {
            width: grid.width(),
            height: grid.height(),
            channels: 1,
            maxval: 255,
            data: grid.data().iter().map(|&b| if b { 255 } else { 0 }).collect(),
        }
    }

    pub fn to_labels(&self) -> Result<Grid<u16>> {
        if self.channels != 1 {
            return Err(Error::Validation("label maps must be single-channel PGM".into()));
        }
        Grid::from_vec(self.width, self.height, self.data.clone())
    }

    /// Non-zero samples are edges.
    pub fn to_binary(&self) -> Result<Grid<bool>> {
        if self.channels != 1 {
            return Err(Error::Validation("binary maps must be single-channel PGM".into()));
        }
        Grid::from_vec(self.width, self.height, self.data.iter().map(|&v| v != 0).collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn pfm_layout_is_bottom_up_little_endian() {
        let pfm = Pfm {
            width: 2,
            height: 2,
            channels: 1,
            data: vec![1.0, 2.0, 3.0, 4.0],
        };
        let bytes = encode_pfm(&pfm);
        let header = b"Pf\n2 2\n-1.0\n";
        assert_eq!(&bytes[..header.len()], header);
        let body = &bytes[header.len()..];
        assert_eq!(&body[..4], &3.0f32.to_le_bytes());
        assert_eq!(&body[12..16], &2.0f32.to_le_bytes());
        assert_eq!(parse_pfm(&bytes).unwrap(), pfm);
    }

    #[test]
    fn big_endian_pfm_is_accepted() {
        let mut bytes = b"Pf\n1 1\n1.0\n".to_vec();
        bytes.extend_from_slice(&2.5f32.to_be_bytes());
        assert_eq!(parse_pfm(&bytes).unwrap().data, vec![2.5]);
    }

    #[test]
    fn parse_errors_carry_offsets() {
        match parse_pfm(b"PX\n1 1\n-1.0\n") {
            Err(Error::Parse { offset, .. }) => assert_eq!(offset, 0),
            other => panic!("{other:?}"),
        }
        match parse_pfm(b"Pf\n2 x\n-1.0\n") {
            Err(Error::Parse { offset, .. }) => assert_eq!(offset, 5),
            other => panic!("{other:?}"),
        }
        match parse_pfm(b"Pf\n2 2\n-1.0\n\0\0\0\0") {
            Err(Error::Parse { msg, .. }) => assert!(msg.contains("truncated")),
            other => panic!("{other:?}"),
        }
        match parse_pnm(b"P5\n2 1\n255\n\x01") {
            Err(Error::Parse { offset, .. }) => assert_eq!(offset, 12),
            other => panic!("{other:?}"),
        }
        match parse_pnm(b"P5\n1 1\n7\n\x09") {
            Err(Error::Parse { offset, .. }) => assert_eq!(offset, 9),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn pnm_comments_and_sixteen_bit() {
        let mut bytes = b"P5\n# a comment\n2 1\n65535\n".to_vec();
        bytes.extend_from_slice(&[0x01, 0x02, 0xff, 0xfe]);
        let p = parse_pnm(&bytes).unwrap();
        assert_eq!(p.data, vec![0x0102, 0xfffe]);
        assert_eq!(p.maxval, 65535);
    }

    proptest! {
        #[test]
        fn pfm_bytes_round_trip(w in 1usize..6, h in 1usize..6, three in any::<bool>(), seed in any::<u64>()) {
            let channels = if three { 3 } else { 1 };
            let n = w * h * channels;
            let data: Vec<f32> = (0..n).map(|i| f32::from_bits(((seed as u32).wrapping_mul(2654435761).wrapping_add(i as u32 * 40503)) & 0x7f7f_ffff)).collect();
            let pfm = Pfm { width: w, height: h, channels, data };
            let bytes = encode_pfm(&pfm);
            let back = parse_pfm(&bytes).unwrap();
            prop_assert_eq!(&back, &pfm);
            prop_assert_eq!(encode_pfm(&back), bytes);
        }

        #[test]
        fn pnm_bytes_round_trip(w in 1usize..6, h in 1usize..6, three in any::<bool>(), wide in any::<bool>(), seed in any::<u16>()) {
            let channels = if three && !wide { 3 } else { 1 };
            let maxval: u16 = if wide { 65535 } else { 255 };
            let data: Vec<u16> = (0..w * h * channels).map(|i| ((seed as u32 + 977 * i as u32) % (maxval as u32 + 1)) as u16).collect();
            let pnm = Pnm { width: w, height: h, channels, maxval, data };
            let bytes = encode_pnm(&pnm);
            let back = parse_pnm(&bytes).unwrap();
            prop_assert_eq!(&back, &pnm);
            prop_assert_eq!(encode_pnm(&back), bytes);
        }
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.pfm");
        let pfm = Pfm {
            width: 3,
            height: 2,
            channels: 1,
            data: vec![0.5, 1.5, 2.5, 3.5, 4.5, 5.5],
        };
        write_pfm(&path, &pfm).unwrap();
        assert_eq!(read_pfm(&path).unwrap(), pfm);
        assert!(read_pfm(&dir.path().join("missing.pfm")).unwrap_err().is_io());
    }
}
