/// Max-pools an `h × w` pixel mask onto a `g × g` patch grid: a patch bit is
/// set iff any covered pixel is set. Sizes not divisible by `g` are
/// zero-padded on the bottom/right.
pub fn downsample_mask(pixels: &[bool], h: usize, w: usize, g: usize) -> Vec<bool> {
    assert_eq!(pixels.len(), h * w, "mask buffer does not match {h}x{w}");
    assert!(g > 0, "grid side must be positive");
    let ch = h.div_ceil(g).max(1);
    let cw = w.div_ceil(g).max(1);
    let mut out = vec![false; g * g];
    for y in 0..h {
        for x in 0..w {
            if pixels[y * w + x] {
                out[(y / ch) * g + x / cw] = true;
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn empty_and_single_pixel() {
        assert!(downsample_mask(&[false; 64], 8, 8, 4).iter().all(|&b| !b));
        let mut m = vec![false; 64];
        m[5 * 8 + 2] = true;
        let d = downsample_mask(&m, 8, 8, 4);
        assert_eq!(d.iter().filter(|&&b| b).count(), 1);
        assert!(d[2 * 4 + 1]);
    }

    #[test]
    fn matches_per_cell_or() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..20 {
            let m: Vec<bool> = (0..32 * 32).map(|_| rng.random_bool(0.02)).collect();
            let d = downsample_mask(&m, 32, 32, 4);
            for cy in 0..4 {
                for cx in 0..4 {
                    let mut any = false;
                    for y in cy * 8..cy * 8 + 8 {
                        for x in cx * 8..cx * 8 + 8 {
                            any |= m[y * 32 + x];
                        }
                    }
                    assert_eq!(d[cy * 4 + cx], any);
                }
            }
        }
    }

    #[test]
    fn non_divisible_pads_bottom_right() {
        // 5x5 onto 2x2: cells are 3 pixels wide, last row/col padded
        let mut m = vec![false; 25];
        m[4 * 5 + 4] = true;
        let d = downsample_mask(&m, 5, 5, 2);
        assert_eq!(d, vec![false, false, false, true]);
        let mut m = vec![false; 25];
        m[2 * 5 + 2] = true;
        assert_eq!(downsample_mask(&m, 5, 5, 2), vec![true, false, false, false]);
    }
}
