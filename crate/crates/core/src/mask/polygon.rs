use super::{BinaryMask, MaskError};

const EDGE_EPS: f64 = 1e-9;

/// Rasterizes a simple or self-intersecting polygon with the even-odd rule.
///
/// A pixel is set iff its center `(col + 0.5, row + 0.5)` is inside the
/// polygon; centers lying exactly on an edge count as inside.
pub fn rasterize_polygon(vertices: &[(f64, f64)], height: u32, width: u32) -> Result<BinaryMask, MaskError> {
    if vertices.len() < 3 {
        return Err(MaskError::Degenerate("fewer than 3 vertices"));
    }
    for &(x, y) in vertices {
        if !(x.is_finite() && y.is_finite()) || x < 0.0 || y < 0.0 || x > width as f64 || y > height as f64 {
            return Err(MaskError::OutOfBounds(x, y, width, height));
        }
    }
    if signed_area(vertices).abs() < EDGE_EPS {
        return Err(MaskError::Degenerate("zero area"));
    }

    let (min_y, max_y) = vertices
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &(_, y)| {
            (lo.min(y), hi.max(y))
        });
    let (min_x, max_x) = vertices
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &(x, _)| {
            (lo.min(x), hi.max(x))
        });

    let mut mask = BinaryMask::new(height, width);
    let row_lo = (min_y - 0.5).floor().max(0.0) as u32;
    let row_hi = ((max_y - 0.5).ceil().max(0.0) as u32).min(height.saturating_sub(1));
    let col_lo = (min_x - 0.5).floor().max(0.0) as u32;
    let col_hi = ((max_x - 0.5).ceil().max(0.0) as u32).min(width.saturating_sub(1));
    if height == 0 || width == 0 {
        return Ok(mask);
    }
    for row in row_lo..=row_hi {
        for col in col_lo..=col_hi {
            let p = (col as f64 + 0.5, row as f64 + 0.5);
            if point_in_polygon(vertices, p) {
                mask.set(row, col, true);
            }
        }
    }
    Ok(mask)
}

fn signed_area(vertices: &[(f64, f64)]) -> f64 {
    let n = vertices.len();
    (0..n)
        .map(|i| {
            let (x0, y0) = vertices[i];
            let (x1, y1) = vertices[(i + 1) % n];
            x0 * y1 - x1 * y0
        })
        .sum::<f64>()
        / 2.0
}

fn on_segment(a: (f64, f64), b: (f64, f64), p: (f64, f64)) -> bool {
    let cross = (b.0 - a.0) * (p.1 - a.1) - (b.1 - a.1) * (p.0 - a.0);
    if cross.abs() > EDGE_EPS {
        return false;
    }
    p.0 >= a.0.min(b.0) - EDGE_EPS
        && p.0 <= a.0.max(b.0) + EDGE_EPS
        && p.1 >= a.1.min(b.1) - EDGE_EPS
        && p.1 <= a.1.max(b.1) + EDGE_EPS
}

pub(crate) fn point_in_polygon(vertices: &[(f64, f64)], p: (f64, f64)) -> bool {
    let n = vertices.len();
    let mut inside = false;
    for i in 0..n {
        let a = vertices[i];
        let b = vertices[(i + 1) % n];
        if on_segment(a, b, p) {
            return true;
        }
        if (a.1 > p.1) != (b.1 > p.1) {
            let x_cross = a.0 + (p.1 - a.1) * (b.0 - a.0) / (b.1 - a.1);
            if p.0 < x_cross {
                inside = !inside;
            }
        }
    }
    inside
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn full_square_covers_everything() {
        let m = rasterize_polygon(&[(0.0, 0.0), (4.0, 0.0), (4.0, 4.0), (0.0, 4.0)], 4, 4).unwrap();
        assert_eq!(m.area(), 16);
    }

    #[test]
    fn right_triangle_counts_ten_pixels() {
        let m = rasterize_polygon(&[(0.0, 0.0), (4.0, 0.0), (0.0, 4.0)], 4, 4).unwrap();
        assert_eq!(m.area(), 10);
        // Centers on the hypotenuse are inside.
        assert!(m.get(0, 3));
        assert!(m.get(3, 0));
        assert!(!m.get(3, 1));
    }

    #[test]
    fn orientation_does_not_matter() {
        let cw = [(0.0, 0.0), (0.0, 4.0), (4.0, 0.0)];
        let ccw = [(0.0, 0.0), (4.0, 0.0), (0.0, 4.0)];
        assert_eq!(
            rasterize_polygon(&cw, 4, 4).unwrap(),
            rasterize_polygon(&ccw, 4, 4).unwrap()
        );
    }

    #[test]
    fn degenerate_inputs() {
        assert!(matches!(
            rasterize_polygon(&[(0.0, 0.0), (1.0, 1.0), (2.0, 2.0)], 4, 4),
            Err(MaskError::Degenerate(_))
        ));
        assert!(matches!(
            rasterize_polygon(&[(0.0, 0.0), (1.0, 1.0)], 4, 4),
            Err(MaskError::Degenerate(_))
        ));
        assert!(matches!(
            rasterize_polygon(&[(0.0, 0.0), (5.0, 0.0), (0.0, 4.0)], 4, 4),
            Err(MaskError::OutOfBounds(..))
        ));
    }
}
