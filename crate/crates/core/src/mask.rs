//! Ensemble mask selection over candidate segmentation masks.
//!
//! Candidate binary masks (e.g. produced by a promptable segmentation model
//! for several prompts) are combined into full/bottom/upper cloth masks:
//! the full mask is the pixelwise OR of all candidates, the bottom mask is
//! the OR of candidates passing a soft color vote against the known bottom
//! color, and the upper mask is the set difference full minus bottom.
//!
//! Images and masks travel as binary PNM files (P6 for RGB, P5 with 0/255
//! for masks) so fixtures are bit-exact.

use crate::error::MaskError;

/// 8-bit RGB raster, row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RasterImage {
    pub width: usize,
    pub height: usize,
    /// `width * height` RGB triples.
    pub pixels: Vec<[u8; 3]>,
}

impl RasterImage {
    pub fn new(width: usize, height: usize, pixels: Vec<[u8; 3]>) -> Result<Self, MaskError> {
        if pixels.len() != width * height {
            return Err(MaskError::InvalidArgument(format!(
                "expected {} pixels, got {}",
                width * height,
                pixels.len()
            )));
        }
        Ok(Self {
            width,
            height,
            pixels,
        })
    }

    /// Parse a binary P6 portable pixmap with maxval 255.
    pub fn from_ppm(data: &[u8]) -> Result<Self, MaskError> {
        let (magic, w, h, maxval, rest) = parse_pnm_header(data)?;
        if magic != "P6" {
            return Err(MaskError::Pnm(format!("expected P6, got {magic}")));
        }
        if maxval != 255 {
            return Err(MaskError::Pnm(format!("unsupported maxval {maxval}")));
        }
        let need = w * h * 3;
        if rest.len() < need {
            return Err(MaskError::Pnm(format!(
                "truncated pixel data: need {need} bytes, have {}",
                rest.len()
            )));
        }
        let pixels = rest[..need]
            .chunks_exact(3)
            .map(|c| [c[0], c[1], c[2]])
            .collect();
        RasterImage::new(w, h, pixels)
    }

    pub fn to_ppm(&self) -> Vec<u8> {
        let mut out = format!("P6\n{} {}\n255\n", self.width, self.height).into_bytes();
        for px in &self.pixels {
            out.extend_from_slice(px);
        }
        out
    }
}

/// Row-major boolean mask paired with a raster of the same dimensions.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BinaryMask {
    pub width: usize,
    pub height: usize,
    pub bits: Vec<bool>,
}

impl BinaryMask {
    pub fn new(width: usize, height: usize, bits: Vec<bool>) -> Result<Self, MaskError> {
        if bits.len() != width * height {
            return Err(MaskError::InvalidArgument(format!(
                "expected {} bits, got {}",
                width * height,
                bits.len()
            )));
        }
        Ok(Self {
            width,
            height,
            bits,
        })
    }

    pub fn zeros(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            bits: vec![false; width * height],
        }
    }

    pub fn count_set(&self) -> usize {
        self.bits.iter().filter(|b| **b).count()
    }

    /// Parse a binary P5 portable graymap; pixels above 127 are set.
    pub fn from_pgm(data: &[u8]) -> Result<Self, MaskError> {
        let (magic, w, h, maxval, rest) = parse_pnm_header(data)?;
        if magic != "P5" {
            return Err(MaskError::Pnm(format!("expected P5, got {magic}")));
        }
        if maxval != 255 {
            return Err(MaskError::Pnm(format!("unsupported maxval {maxval}")));
        }
        let need = w * h;
        if rest.len() < need {
            return Err(MaskError::Pnm(format!(
                "truncated pixel data: need {need} bytes, have {}",
                rest.len()
            )));
        }
        BinaryMask::new(w, h, rest[..need].iter().map(|b| *b > 127).collect())
    }

    /// Serialize as binary P5 with set pixels at 255.
    pub fn to_pgm(&self) -> Vec<u8> {
        let mut out = format!("P5\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend(self.bits.iter().map(|b| if *b { 255u8 } else { 0 }));
        out
    }

    fn check_same_dims(&self, other: &BinaryMask) -> Result<(), MaskError> {
        if self.width != other.width || self.height != other.height {
            return Err(MaskError::DimensionMismatch {
                want_w: self.width,
                want_h: self.height,
                got_w: other.width,
                got_h: other.height,
            });
        }
        Ok(())
    }
}

/// Color vote specification for bottom-mask selection.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ColorSpec {
    /// Target bottom-layer color.
    pub target: [u8; 3],
    /// Per-channel absolute distance threshold, 0-255.
    pub threshold: u8,
    /// Fraction of a mask's set pixels that must match for the mask to be
    /// selected, in (0, 1].
    pub vote_fraction: f64,
}

impl ColorSpec {
    pub fn new(target: [u8; 3], threshold: u8, vote_fraction: f64) -> Result<Self, MaskError> {
        if !(vote_fraction > 0.0 && vote_fraction <= 1.0) {
            return Err(MaskError::InvalidArgument(format!(
                "vote fraction {vote_fraction} must lie in (0, 1]"
            )));
        }
        Ok(Self {
            target,
            threshold,
            vote_fraction,
        })
    }

    #[inline]
    fn matches(&self, px: [u8; 3]) -> bool {
        px.iter()
            .zip(self.target.iter())
            .all(|(a, b)| a.abs_diff(*b) <= self.threshold)
    }
}

impl Default for ColorSpec {
    fn default() -> Self {
        Self {
            target: [0, 0, 0],
            threshold: 40,
            vote_fraction: 0.5,
        }
    }
}

fn parse_pnm_header(data: &[u8]) -> Result<(String, usize, usize, usize, &[u8]), MaskError> {
    // Header = magic, width, height, maxval as whitespace-separated tokens,
    // with '#' comments, followed by a single whitespace byte then raster.
    let mut pos = 0usize;
    let mut tokens: Vec<String> = Vec::new();
    while tokens.len() < 4 {
        while pos < data.len() && data[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if pos < data.len() && data[pos] == b'#' {
            while pos < data.len() && data[pos] != b'\n' {
                pos += 1;
            }
            continue;
        }
        let start = pos;
        while pos < data.len() && !data[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(MaskError::Pnm("truncated header".into()));
        }
        tokens.push(String::from_utf8_lossy(&data[start..pos]).into_owned());
    }
    // Exactly one whitespace separates the header from the raster.
    if pos >= data.len() {
        return Err(MaskError::Pnm("missing raster data".into()));
    }
    pos += 1;
    let parse = |t: &str| {
        t.parse::<usize>()
            .map_err(|e| MaskError::Pnm(format!("bad header token {t:?}: {e}")))
    };
    Ok((
        tokens[0].clone(),
        parse(&tokens[1])?,
        parse(&tokens[2])?,
        parse(&tokens[3])?,
        &data[pos..],
    ))
}

/// Pixelwise OR of all candidate masks: the full-cloth mask.
pub fn aggregate_full(masks: &[BinaryMask]) -> Result<BinaryMask, MaskError> {
    let first = masks
        .first()
        .ok_or_else(|| MaskError::InvalidArgument("empty mask list".into()))?;
    let mut out = first.clone();
    for m in &masks[1..] {
        first.check_same_dims(m)?;
        for (o, b) in out.bits.iter_mut().zip(m.bits.iter()) {
            *o |= *b;
        }
    }
    Ok(out)
}

/// Fraction of a mask's set pixels whose RGB is within the color threshold.
/// Masks with no set pixels vote 0.
fn match_fraction(mask: &BinaryMask, rgb: &RasterImage, spec: &ColorSpec) -> f64 {
    let mut set = 0usize;
    let mut hit = 0usize;
    for (bit, px) in mask.bits.iter().zip(rgb.pixels.iter()) {
        if *bit {
            set += 1;
            if spec.matches(*px) {
                hit += 1;
            }
        }
    }
    if set == 0 {
        0.0
    } else {
        hit as f64 / set as f64
    }
}

/// Soft color vote: OR together exactly the masks whose matching-pixel
/// fraction reaches the vote threshold. An empty selection yields an
/// all-zeros mask.
pub fn select_bottom(
    masks: &[BinaryMask],
    rgb: &RasterImage,
    spec: &ColorSpec,
) -> Result<BinaryMask, MaskError> {
    if masks.is_empty() {
        return Err(MaskError::InvalidArgument("empty mask list".into()));
    }
    for m in masks {
        if m.width != rgb.width || m.height != rgb.height {
            return Err(MaskError::DimensionMismatch {
                want_w: rgb.width,
                want_h: rgb.height,
                got_w: m.width,
                got_h: m.height,
            });
        }
    }
    let mut out = BinaryMask::zeros(rgb.width, rgb.height);
    for m in masks {
        if match_fraction(m, rgb, spec) >= spec.vote_fraction {
            for (o, b) in out.bits.iter_mut().zip(m.bits.iter()) {
                *o |= *b;
            }
        }
    }
    Ok(out)
}

/// Upper mask as the set difference: full AND NOT bottom.
pub fn derive_upper(full: &BinaryMask, bottom: &BinaryMask) -> Result<BinaryMask, MaskError> {
    full.check_same_dims(bottom)?;
    let bits = full
        .bits
        .iter()
        .zip(bottom.bits.iter())
        .map(|(f, b)| *f && !*b)
        .collect();
    BinaryMask::new(full.width, full.height, bits)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mask_from_rows(rows: &[&str]) -> BinaryMask {
        let height = rows.len();
        let width = rows[0].len();
        let bits = rows
            .iter()
            .flat_map(|r| r.chars().map(|c| c == '#'))
            .collect();
        BinaryMask::new(width, height, bits).unwrap()
    }

    #[test]
    fn aggregate_singleton_is_identity() {
        let a = mask_from_rows(&["#.", ".#"]);
        assert_eq!(aggregate_full(&[a.clone()]).unwrap(), a);
    }

    #[test]
    fn aggregate_disjoint_halves_is_full() {
        let left = mask_from_rows(&["##..", "##.."]);
        let right = mask_from_rows(&["..##", "..##"]);
        let out = aggregate_full(&[left, right]).unwrap();
        assert_eq!(out.count_set(), 8);
    }

    #[test]
    fn aggregate_rejects_empty_and_mismatched() {
        assert!(aggregate_full(&[]).is_err());
        let a = mask_from_rows(&["#."]);
        let b = mask_from_rows(&["#.", ".#"]);
        assert!(matches!(
            aggregate_full(&[a, b]),
            Err(MaskError::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn aggregate_commutative_associative() {
        let a = mask_from_rows(&["#...", ".#.."]);
        let b = mask_from_rows(&["..#.", "...#"]);
        let c = mask_from_rows(&["##..", "..##"]);
        let abc = aggregate_full(&[a.clone(), b.clone(), c.clone()]).unwrap();
        let cba = aggregate_full(&[c.clone(), b.clone(), a.clone()]).unwrap();
        let nested =
            aggregate_full(&[aggregate_full(&[a, b]).unwrap(), c]).unwrap();
        assert_eq!(abc, cba);
        assert_eq!(abc, nested);
    }

    fn uniform_image(width: usize, height: usize, color: [u8; 3]) -> RasterImage {
        RasterImage::new(width, height, vec![color; width * height]).unwrap()
    }

    #[test]
    fn select_bottom_full_match() {
        let img = uniform_image(4, 4, [10, 10, 10]);
        let m = mask_from_rows(&["##..", "##..", "....", "...."]);
        let spec = ColorSpec::new([0, 0, 0], 30, 0.5).unwrap();
        let out = select_bottom(&[m.clone()], &img, &spec).unwrap();
        assert_eq!(out, m);
    }

    #[test]
    fn select_bottom_no_match_gives_zeros() {
        let img = uniform_image(4, 4, [255, 255, 255]);
        let m = mask_from_rows(&["##..", "##..", "....", "...."]);
        let spec = ColorSpec::new([0, 0, 0], 30, 0.5).unwrap();
        let out = select_bottom(&[m], &img, &spec).unwrap();
        assert_eq!(out.count_set(), 0);
    }

    #[test]
    fn select_bottom_vote_fraction_filtering() {
        // 20x1 image: first 6 pixels black, rest white. Mask A covers pixels
        // 0..10 (6 black of 10 = 60%), mask B covers pixels 5..15
        // (1 black of 10 = 10%). With theta = 0.5 only A is selected.
        let mut pixels = vec![[0u8, 0, 0]; 6];
        pixels.extend(vec![[255u8, 255, 255]; 14]);
        let img = RasterImage::new(20, 1, pixels).unwrap();
        let cover = |range: std::ops::Range<usize>| {
            let mut bits = vec![false; 20];
            for b in &mut bits[range] {
                *b = true;
            }
            BinaryMask::new(20, 1, bits).unwrap()
        };
        let a = cover(0..10);
        let b = cover(5..15);
        let spec = ColorSpec::new([0, 0, 0], 30, 0.5).unwrap();
        let out = select_bottom(&[a.clone(), b], &img, &spec).unwrap();
        assert_eq!(out, a);
    }

    #[test]
    fn select_bottom_monotone_in_vote_fraction() {
        let mut pixels = vec![[0u8, 0, 0]; 6];
        pixels.extend(vec![[255u8, 255, 255]; 4]);
        let img = RasterImage::new(10, 1, pixels).unwrap();
        let a = BinaryMask::new(10, 1, vec![true; 10]).unwrap();
        let mut prev_count = usize::MAX;
        for theta in [0.1, 0.3, 0.5, 0.7, 0.9] {
            let spec = ColorSpec::new([0, 0, 0], 30, theta).unwrap();
            let out = select_bottom(std::slice::from_ref(&a), &img, &spec).unwrap();
            assert!(out.count_set() <= prev_count);
            prev_count = out.count_set();
        }
    }

    #[test]
    fn empty_masks_excluded_from_vote() {
        let img = uniform_image(2, 2, [0, 0, 0]);
        let empty = BinaryMask::zeros(2, 2);
        let spec = ColorSpec::default();
        let out = select_bottom(&[empty], &img, &spec).unwrap();
        assert_eq!(out.count_set(), 0);
    }

    #[test]
    fn derive_upper_cases() {
        let full = mask_from_rows(&["####", "####"]);
        let bottom = mask_from_rows(&["....", "####"]);
        let upper = derive_upper(&full, &bottom).unwrap();
        assert_eq!(upper, mask_from_rows(&["####", "...."]));
        // bottom == full -> zeros
        assert_eq!(derive_upper(&full, &full).unwrap().count_set(), 0);
        // bottom == zeros -> full
        let zeros = BinaryMask::zeros(4, 2);
        assert_eq!(derive_upper(&full, &zeros).unwrap(), full);
    }

    #[test]
    fn upper_bottom_disjoint_and_within_full() {
        let full = mask_from_rows(&["###.", ".###"]);
        let bottom = mask_from_rows(&["..#.", ".#.."]);
        let upper = derive_upper(&full, &bottom).unwrap();
        for i in 0..full.bits.len() {
            assert!(!(upper.bits[i] && bottom.bits[i]));
            if upper.bits[i] || bottom.bits[i] {
                assert!(full.bits[i]);
            }
        }
    }

    #[test]
    fn pnm_roundtrip() {
        let mask = mask_from_rows(&["#.#", ".#."]);
        let parsed = BinaryMask::from_pgm(&mask.to_pgm()).unwrap();
        assert_eq!(parsed, mask);

        let img = uniform_image(3, 2, [7, 150, 255]);
        let parsed = RasterImage::from_ppm(&img.to_ppm()).unwrap();
        assert_eq!(parsed, img);
    }

    #[test]
    fn pnm_header_with_comment() {
        let data = b"P5\n# a comment\n2 1\n255\n\xff\x00";
        let mask = BinaryMask::from_pgm(data).unwrap();
        assert_eq!(mask.bits, vec![true, false]);
    }

    #[test]
    fn pnm_rejects_truncated() {
        assert!(BinaryMask::from_pgm(b"P5\n4 4\n255\n\x00").is_err());
        assert!(RasterImage::from_ppm(b"P6\n2 2\n255\n\x00\x00").is_err());
        assert!(BinaryMask::from_pgm(b"P6\n1 1\n255\n\x00").is_err());
    }
}
