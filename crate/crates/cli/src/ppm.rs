//! Class palettes and binary PPM output.

use std::io::{self, Write};

/// Hue order that keeps consecutive classes far apart on the colour wheel.
fn spread(i: usize, n: usize) -> f64 {
    let bits = n.next_power_of_two().trailing_zeros();
    let rev = if bits == 0 {
        0
    } else {
        i.reverse_bits() >> (usize::BITS - bits)
    };
    rev as f64 / n.next_power_of_two() as f64
}

fn hsv(h: f64, s: f64, v: f64) -> [u8; 3] {
    let h6 = h * 6.0;
    let sector = h6.floor() as i64 % 6;
    let f = h6 - h6.floor();
    let (p, q, t) = (v * (1.0 - s), v * (1.0 - s * f), v * (1.0 - s * (1.0 - f)));
    let (r, g, b) = match sector {
        0 => (v, t, p),
        1 => (q, v, p),
        2 => (p, v, t),
        3 => (p, q, v),
        4 => (t, p, v),
        _ => (v, p, q),
    };
    [r, g, b].map(|x| (x * 255.0).round() as u8)
}

/// Colour per class id; id 0 (unlabelled) is black.
#[derive(Clone, Debug, PartialEq)]
pub struct Palette {
    colors: Vec<[u8; 3]>,
}

impl Palette {
    /// Evenly spaced hues, at least 16 of them, so that every class gets its own colour.
    pub fn spaced(classes: usize) -> Self {
        let n = classes.max(16);
        let mut colors = vec![[0, 0, 0]];
        colors.extend((0..n).map(|i| hsv(spread(i, n), 1.0, 1.0)));
        Self { colors }
    }

    /// User colours for classes 1, 2, ...
    pub fn custom(colors: &[[u8; 3]]) -> Self {
        let mut all = vec![[0, 0, 0]];
        all.extend_from_slice(colors);
        Self { colors: all }
    }

    /// Number of class colours, excluding black.
    pub fn classes(&self) -> usize {
        self.colors.len() - 1
    }

    pub fn color(&self, class: usize) -> [u8; 3] {
        self.colors[class]
    }
}

/// Writes a P6 image; `comment` lines go into the header.
pub fn write_ppm<W: Write>(
    mut out: W,
    width: usize,
    height: usize,
    classes: &[usize],
    palette: &Palette,
    comment: &str,
) -> io::Result<()> {
    assert_eq!(classes.len(), width * height);
    writeln!(out, "P6")?;
    for line in comment.lines() {
        writeln!(out, "# {line}")?;
    }
    write!(out, "{width} {height}\n255\n")?;
    let pixels: Vec<u8> = classes.iter().flat_map(|&c| palette.color(c)).collect();
    out.write_all(&pixels)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;

    #[test]
    fn default_palette_is_distinct_and_black_at_zero() {
        let p = Palette::spaced(9);
        assert_eq!(p.classes(), 16);
        assert_eq!(p.color(0), [0, 0, 0]);
        let set: HashSet<_> = (0..=16).map(|i| p.color(i)).collect();
        assert_eq!(set.len(), 17);
        assert_eq!(p.color(1), [255, 0, 0]);
        // the second class sits opposite the first on the wheel
        assert_eq!(p.color(2), [0, 255, 255]);
    }

    #[test]
    fn palette_grows_past_sixteen_classes() {
        let p = Palette::spaced(20);
        let set: HashSet<_> = (1..=20).map(|i| p.color(i)).collect();
        assert_eq!(set.len(), 20);
    }

    #[test]
    fn ppm_header_and_payload() {
        let mut buf = Vec::new();
        let p = Palette::custom(&[[1, 2, 3], [4, 5, 6]]);
        write_ppm(&mut buf, 3, 1, &[1, 2, 0], &p, "config_hash=ab").unwrap();
        let header = b"P6\n# config_hash=ab\n3 1\n255\n";
        assert_eq!(&buf[..header.len()], header);
        assert_eq!(&buf[header.len()..], &[1, 2, 3, 4, 5, 6, 0, 0, 0]);
    }
}
