//! Procedural texture patterns for the synthetic dataset.

use crate::numerics::Grid;

/// `blocks × blocks` checkerboard.
pub fn checker(res: usize, blocks: usize, color_a: [f32; 3], color_b: [f32; 3]) -> Grid {
    let mut data = vec![0.0f32; res * res * 3];
    for ty in 0..res {
        for tx in 0..res {
            let bx = tx * blocks / res;
            let by = ty * blocks / res;
            let color = if (bx + by) % 2 == 0 { color_a } else { color_b };
            data[(ty * res + tx) * 3..(ty * res + tx) * 3 + 3].copy_from_slice(&color);
        }
    }
    Grid::new(vec![res, res, 3], data).expect("sizes agree")
}

/// Diagonal gradient between two colors.
pub fn gradient(res: usize, from: [f32; 3], to: [f32; 3]) -> Grid {
    let mut data = vec![0.0f32; res * res * 3];
    for ty in 0..res {
        for tx in 0..res {
            let t = (tx + ty) as f32 / (2 * (res - 1)).max(1) as f32;
            for c in 0..3 {
                data[(ty * res + tx) * 3 + c] = from[c] + (to[c] - from[c]) * t;
            }
        }
    }
    Grid::new(vec![res, res, 3], data).expect("sizes agree")
}

/// Alternating stripes; horizontal stripes run along u.
pub fn stripes(res: usize, count: usize, color_a: [f32; 3], color_b: [f32; 3], horizontal: bool) -> Grid {
    let mut data = vec![0.0f32; res * res * 3];
    for ty in 0..res {
        for tx in 0..res {
            let band = if horizontal { ty } else { tx } * count / res;
            let color = if band % 2 == 0 { color_a } else { color_b };
            data[(ty * res + tx) * 3..(ty * res + tx) * 3 + 3].copy_from_slice(&color);
        }
    }
    Grid::new(vec![res, res, 3], data).expect("sizes agree")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn checker_alternates() {
        let g = checker(8, 2, [0.0; 3], [1.0; 3]);
        assert_eq!(g.data()[0], 0.0); // (0,0) block a
        assert_eq!(g.data()[(0 * 8 + 4) * 3], 1.0); // right block
        assert_eq!(g.data()[(4 * 8 + 4) * 3], 0.0); // diagonal block
    }

    #[test]
    fn gradient_endpoints() {
        let g = gradient(16, [0.0; 3], [1.0; 3]);
        assert_eq!(g.data()[0], 0.0);
        let last = ((15 * 16 + 15) * 3) as usize;
        assert!((g.data()[last] - 1.0).abs() < 1e-6);
    }

    #[test]
    fn stripes_band_count() {
        let g = stripes(16, 4, [0.0; 3], [1.0; 3], true);
        // Rows 0-3 color a, rows 4-7 color b.
        assert_eq!(g.data()[(0 * 16) * 3], 0.0);
        assert_eq!(g.data()[(4 * 16) * 3], 1.0);
        assert_eq!(g.data()[(8 * 16) * 3], 0.0);
    }
}
