//! File transforms run by `op` instructions.

use std::io::{Read, Write};

use flate2::read::GzDecoder;
use flate2::write::GzEncoder;
use flate2::Compression;
use rand::{CryptoRng, RngCore};
use thiserror::Error;

use crate::keying::{self, SecretKey};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
#[error("{0}")]
pub struct TransformError(pub String);

fn err(msg: impl Into<String>) -> TransformError {
    TransformError(msg.into())
}

pub fn gzip(data: &[u8]) -> Vec<u8> {
    let mut enc = GzEncoder::new(Vec::with_capacity(data.len() / 2), Compression::default());
    enc.write_all(data).expect("writing to a Vec cannot fail");
    enc.finish().expect("writing to a Vec cannot fail")
}

pub fn gunzip(data: &[u8]) -> Result<Vec<u8>, TransformError> {
    let mut out = Vec::new();
    GzDecoder::new(data).read_to_end(&mut out).map_err(|e| err(format!("gunzip: {e}")))?;
    Ok(out)
}

/// Encrypts under a fresh file key. Returns `nonce ‖ ciphertext` and the key.
pub fn encrypt_file<R: RngCore + CryptoRng>(data: &[u8], rng: &mut R) -> (Vec<u8>, SecretKey) {
    let key = SecretKey::random(rng);
    let (nonce, body) = keying::seal(&key, data);
    let mut out = Vec::with_capacity(12 + body.len());
    out.extend_from_slice(&nonce);
    out.extend_from_slice(&body);
    (out, key)
}

pub fn decrypt_file(data: &[u8], key: &SecretKey) -> Result<Vec<u8>, TransformError> {
    if data.len() < 12 {
        return Err(err("ciphertext shorter than its nonce"));
    }
    let nonce: [u8; 12] = data[..12].try_into().unwrap();
    keying::open(key, &nonce, &data[12..]).ok_or_else(|| err("ciphertext does not authenticate"))
}

/// 8-bit RGB raster.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Rgb {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<u8>,
}

impl Rgb {
    pub fn new(width: usize, height: usize, pixels: Vec<u8>) -> Self {
        assert_eq!(pixels.len(), width * height * 3);
        Rgb { width, height, pixels }
    }
}

/// Parses a binary PPM (P6) with a max value of at most 255.
pub fn parse_ppm(data: &[u8]) -> Result<Rgb, TransformError> {
    let mut pos = 0;
    let mut fields = Vec::with_capacity(4);
    while fields.len() < 4 {
        // Whitespace and comments between header fields.
        loop {
            match data.get(pos) {
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(b'#') => {
                    while data.get(pos).is_some_and(|&b| b != b'\n') {
                        pos += 1;
                    }
                }
                Some(_) => break,
                None => return Err(err("truncated PPM header")),
            }
        }
        let start = pos;
        while data.get(pos).is_some_and(|b| !b.is_ascii_whitespace() && *b != b'#') {
            pos += 1;
        }
        fields.push(std::str::from_utf8(&data[start..pos]).map_err(|_| err("non-ASCII PPM header"))?);
    }
    if fields[0] != "P6" {
        return Err(err(format!("unsupported image format `{}`; expected P6", fields[0])));
    }
    let num = |s: &str, what: &str| s.parse::<usize>().map_err(|_| err(format!("bad PPM {what} `{s}`")));
    let (width, height, maxval) = (num(fields[1], "width")?, num(fields[2], "height")?, num(fields[3], "max value")?);
    if width == 0 || height == 0 {
        return Err(err("PPM has zero area"));
    }
    if maxval == 0 || maxval > 255 {
        return Err(err(format!("PPM max value {maxval} outside 1..=255")));
    }
    // Exactly one whitespace byte separates the header from the raster.
    pos += 1;
    let need = width.checked_mul(height).and_then(|n| n.checked_mul(3)).ok_or_else(|| err("PPM too large"))?;
    let raster = data.get(pos..pos + need).ok_or_else(|| err("truncated PPM raster"))?;
    Ok(Rgb::new(width, height, raster.to_vec()))
}

pub fn encode_ppm(img: &Rgb) -> Vec<u8> {
    let mut out = format!("P6\n{} {}\n255\n", img.width, img.height).into_bytes();
    out.extend_from_slice(&img.pixels);
    out
}

/// Box-filter downscale so neither side exceeds `max_side`.
pub fn downscale_to_fit(img: &Rgb, max_side: usize) -> Rgb {
    let longest = img.width.max(img.height);
    if longest <= max_side {
        return img.clone();
    }
    let f = longest.div_ceil(max_side);
    let (w, h) = (img.width.div_ceil(f), img.height.div_ceil(f));
    let mut pixels = Vec::with_capacity(w * h * 3);
    for by in 0..h {
        for bx in 0..w {
            let mut sum = [0u32; 3];
            let mut n = 0u32;
            for y in by * f..((by + 1) * f).min(img.height) {
                for x in bx * f..((bx + 1) * f).min(img.width) {
                    let i = (y * img.width + x) * 3;
                    for (s, &p) in sum.iter_mut().zip(&img.pixels[i..i + 3]) {
                        *s += p as u32;
                    }
                    n += 1;
                }
            }
            pixels.extend(sum.iter().map(|s| ((s + n / 2) / n) as u8));
        }
    }
    Rgb::new(w, h, pixels)
}

pub fn convert_ppm(data: &[u8], max_side: usize) -> Result<Vec<u8>, TransformError> {
    if max_side == 0 {
        return Err(err("max_resolution must be positive"));
    }
    Ok(encode_ppm(&downscale_to_fit(&parse_ppm(data)?, max_side)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn gradient(w: usize, h: usize) -> Rgb {
        let mut px = Vec::with_capacity(w * h * 3);
        for y in 0..h {
            for x in 0..w {
                px.extend([(x % 256) as u8, (y % 256) as u8, ((x ^ y) % 256) as u8]);
            }
        }
        Rgb::new(w, h, px)
    }

    #[test]
    fn gzip_round_trip_and_magic() {
        let data: Vec<u8> = (0..100_000u32).flat_map(|i| (i % 97).to_le_bytes()).collect();
        let z = gzip(&data);
        assert_eq!(&z[..2], &[0x1f, 0x8b]);
        assert!(z.len() < data.len());
        assert_eq!(gunzip(&z).unwrap(), data);
        assert_eq!(gunzip(&gzip(b"")).unwrap(), b"");
    }

    #[test]
    fn encrypt_round_trip_needs_key() {
        let mut rng = rand_chacha::ChaCha20Rng::seed_from_u64(4);
        let (ct, key) = encrypt_file(b"secret payload", &mut rng);
        assert_eq!(decrypt_file(&ct, &key).unwrap(), b"secret payload");
        let other = SecretKey::random(&mut rng);
        assert!(decrypt_file(&ct, &other).is_err());
        assert!(decrypt_file(&ct[..5], &key).is_err());
    }

    #[test]
    fn convert_bounds_dimensions() {
        let img = gradient(1024, 1024);
        let src = encode_ppm(&img);
        let out = convert_ppm(&src, 128).unwrap();
        let small = parse_ppm(&out).unwrap();
        assert!(small.width <= 128 && small.height <= 128);
        assert!(out.len() < src.len());
        // Non-divisible and non-square sizes stay within the bound too.
        let odd = downscale_to_fit(&gradient(1000, 333), 128);
        assert!(odd.width <= 128 && odd.height <= 128, "{}x{}", odd.width, odd.height);
        // Already small: unchanged.
        assert_eq!(downscale_to_fit(&gradient(10, 20), 128), gradient(10, 20));
    }

    #[test]
    fn box_filter_averages() {
        let img = Rgb::new(2, 1, vec![0, 0, 0, 255, 255, 255]);
        assert_eq!(downscale_to_fit(&img, 1).pixels, vec![128, 128, 128]);
    }

    #[test]
    fn ppm_header_comments_and_errors() {
        let mut data = b"P6 # made by hand\n2 1\n# depth\n255\n".to_vec();
        data.extend([1, 2, 3, 4, 5, 6]);
        assert_eq!(parse_ppm(&data).unwrap(), Rgb::new(2, 1, vec![1, 2, 3, 4, 5, 6]));
        assert!(parse_ppm(b"P3\n1 1\n255\n").is_err());
        assert!(parse_ppm(b"P6\n4 4\n255\nabc").is_err());
        assert!(parse_ppm(b"\x89PNG....").is_err());
        assert!(convert_ppm(&data, 0).is_err());
    }
}
