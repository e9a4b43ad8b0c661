//! Binary grayscale pixmaps (PGM, `P5`) for inspecting maps.
//!
//! Header: `P5\n<width> <height>\n255\n`, then one byte per pixel, rows top
//! to bottom. Map values are min–max scaled to 0..=255.

use std::io::{self, Write};

use crate::spatial::{GridMap, PatchBox};

/// 8-bit grayscale of `map`, one byte per cell, row-major.
pub fn to_gray8(map: &GridMap) -> Vec<u8> {
    let (lo, hi) = (map.min(), map.max());
    map.values()
        .iter()
        .map(|&v| {
            if hi > lo {
                (((v - lo) / (hi - lo)) * 255.0).round() as u8
            } else {
                0
            }
        })
        .collect()
}

/// Encodes `map` upscaled `scale`× (nearest neighbour). When `outline` is
/// given its border is drawn at full intensity.
pub fn encode_pgm(map: &GridMap, scale: usize, outline: Option<PatchBox>) -> Vec<u8> {
    let scale = scale.max(1);
    let n = map.side();
    let side = n * scale;
    let gray = to_gray8(map);
    let mut out = format!("P5\n{side} {side}\n255\n").into_bytes();
    out.reserve(side * side);
    for y in 0..side {
        for x in 0..side {
            let (r, c) = (y / scale, x / scale);
            let on_border = outline.is_some_and(|b| {
                let inside = y >= b.r0 * scale && y < b.r1 * scale && x >= b.c0 * scale && x < b.c1 * scale;
                inside
                    && (y == b.r0 * scale
                        || y + 1 == b.r1 * scale
                        || x == b.c0 * scale
                        || x + 1 == b.c1 * scale)
            });
            out.push(if on_border { 255 } else { gray[r * n + c] });
        }
    }
    out
}

pub fn write_pgm<W: Write>(
    map: &GridMap,
    scale: usize,
    outline: Option<PatchBox>,
    sink: &mut W,
) -> io::Result<()> {
    sink.write_all(&encode_pgm(map, scale, outline))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_and_scaling() {
        let m = GridMap::new(2, vec![0.0, 1.0, 2.0, 4.0]).unwrap();
        let bytes = encode_pgm(&m, 2, None);
        let header = b"P5\n4 4\n255\n";
        assert_eq!(&bytes[..header.len()], header);
        let px = &bytes[header.len()..];
        assert_eq!(px.len(), 16);
        assert_eq!(px[0], 0);
        assert_eq!(px[2], 64);
        assert_eq!(px[15], 255);
    }

    #[test]
    fn outline_is_drawn() {
        let m = GridMap::zeros(4);
        let bytes = encode_pgm(&m, 1, Some(PatchBox::new(1, 1, 3, 3)));
        let px = &bytes[b"P5\n4 4\n255\n".len()..];
        assert_eq!(px[5], 255);
        assert_eq!(px[0], 0);
    }
}
