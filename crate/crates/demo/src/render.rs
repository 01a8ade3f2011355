//! RGBA compositing for the browser canvases. Plain Rust so it is testable
//! off-wasm.

/// Map scalar values to an opaque grayscale RGBA buffer, clamping to
/// `[lo, hi]`.
pub fn grayscale_rgba(values: &[f64], lo: f64, hi: f64) -> Vec<u8> {
    let span = (hi - lo).max(1e-12);
    let mut out = Vec::with_capacity(values.len() * 4);
    for v in values {
        let g = (((v - lo) / span).clamp(0.0, 1.0) * 255.0).round() as u8;
        out.extend_from_slice(&[g, g, g, 255]);
    }
    out
}

/// Tint pixels where `mask` is set: blends the given color at `alpha` over
/// the existing RGBA buffer.
pub fn tint_mask(rgba: &mut [u8], mask: &[bool], color: [u8; 3], alpha: f64) {
    debug_assert_eq!(rgba.len(), mask.len() * 4);
    for (i, keep) in mask.iter().enumerate() {
        if !keep {
            continue;
        }
        for c in 0..3 {
            let base = f64::from(rgba[i * 4 + c]);
            let tint = f64::from(color[c]);
            rgba[i * 4 + c] = (base * (1.0 - alpha) + tint * alpha).round() as u8;
        }
    }
}

/// Draw a 1-pixel outline of the mask (mask pixels bordering non-mask) in
/// the given color.
pub fn outline_mask(rgba: &mut [u8], mask: &[bool], w: usize, color: [u8; 3]) {
    let h = mask.len() / w;
    for y in 0..h {
        for x in 0..w {
            if !mask[y * w + x] {
                continue;
            }
            let edge = [(0i64, 1i64), (0, -1), (1, 0), (-1, 0)].iter().any(|(dy, dx)| {
                let (ny, nx) = (y as i64 + dy, x as i64 + dx);
                nx < 0
                    || ny < 0
                    || nx >= w as i64
                    || ny >= h as i64
                    || !mask[ny as usize * w + nx as usize]
            });
            if edge {
                let i = y * w + x;
                rgba[i * 4] = color[0];
                rgba[i * 4 + 1] = color[1];
                rgba[i * 4 + 2] = color[2];
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grayscale_maps_range() {
        let rgba = grayscale_rgba(&[0.0, 0.5, 1.0, 2.0], 0.0, 1.0);
        assert_eq!(rgba.len(), 16);
        assert_eq!(&rgba[0..4], &[0, 0, 0, 255]);
        assert_eq!(&rgba[4..8], &[128, 128, 128, 255]);
        assert_eq!(&rgba[8..12], &[255, 255, 255, 255]);
        // clamped
        assert_eq!(&rgba[12..16], &[255, 255, 255, 255]);
    }

    #[test]
    fn tint_only_touches_masked_pixels() {
        let mut rgba = grayscale_rgba(&[0.0, 0.0], 0.0, 1.0);
        tint_mask(&mut rgba, &[false, true], [255, 0, 0], 0.5);
        assert_eq!(&rgba[0..4], &[0, 0, 0, 255]);
        assert_eq!(&rgba[4..8], &[128, 0, 0, 255]);
    }

    #[test]
    fn outline_marks_interior_block_edges_only() {
        // 4x4 with a 3x3 block: the center of the block is not an edge.
        let w = 4;
        let mut mask = vec![false; 16];
        for y in 0..3 {
            for x in 0..3 {
                mask[y * w + x] = true;
            }
        }
        let mut rgba = vec![0u8; 64];
        outline_mask(&mut rgba, &mask, w, [0, 255, 0]);
        assert_eq!(rgba[(1 * w + 1) * 4 + 1], 0, "center untouched");
        assert_eq!(rgba[1], 255, "corner outlined");
    }
}
