//! Pixel-edge boundary tracing of binary slices into polygons.

use crate::volume::MaskVolume;

/// Outer boundaries of the 4-connected components of slice `z`, as closed
/// polygons along pixel edges. Filling a polygon by voxel centres reproduces its
/// component with holes filled.
pub fn mask_to_polygons(mask: &MaskVolume, z: usize) -> Vec<Vec<[f64; 2]>> {
    let g = *mask.geometry();
    let [nx, ny, _] = g.dims;
    let at = |x: isize, y: isize| -> bool {
        x >= 0 && y >= 0 && (x as usize) < nx && (y as usize) < ny && mask.get(x as usize, y as usize, z)
    };

    let mut seen = vec![false; nx * ny];
    let mut polygons = Vec::new();
    let mut stack = Vec::new();
    for y0 in 0..ny {
        for x0 in 0..nx {
            if seen[y0 * nx + x0] || !mask.get(x0, y0, z) {
                continue;
            }
            // Flood the component so that its other pixels are not traced again.
            stack.push((x0, y0));
            seen[y0 * nx + x0] = true;
            while let Some((x, y)) = stack.pop() {
                let neighbours = [(x.wrapping_sub(1), y), (x + 1, y), (x, y.wrapping_sub(1)), (x, y + 1)];
                for (xx, yy) in neighbours {
                    if xx < nx && yy < ny && !seen[yy * nx + xx] && mask.get(xx, yy, z) {
                        seen[yy * nx + xx] = true;
                        stack.push((xx, yy));
                    }
                }
            }
            polygons.push(trace(&at, x0 as isize, y0 as isize));
        }
    }
    polygons
}

/// Walks the crack boundary with the region on the right-hand side (y down),
/// starting east along the top edge of the component's first pixel in raster order.
fn trace(at: &impl Fn(isize, isize) -> bool, x0: isize, y0: isize) -> Vec<[f64; 2]> {
    let start = (x0, y0);
    let (mut vx, mut vy) = start;
    let (mut dx, mut dy) = (1isize, 0isize);
    let mut out = Vec::new();
    let mut first = true;
    loop {
        // Pixels ahead-right and ahead-left of vertex (vx, vy) for heading (dx, dy).
        let (right, left) = match (dx, dy) {
            (1, 0) => (at(vx, vy), at(vx, vy - 1)),
            (0, 1) => (at(vx - 1, vy), at(vx, vy)),
            (-1, 0) => (at(vx - 1, vy - 1), at(vx - 1, vy)),
            _ => (at(vx, vy - 1), at(vx - 1, vy - 1)),
        };
        let (ndx, ndy) = if !right {
            (-dy, dx)
        } else if left {
            (dy, -dx)
        } else {
            (dx, dy)
        };
        if !first && (vx, vy) == start && (ndx, ndy) == (1, 0) {
            break;
        }
        if first || (ndx, ndy) != (dx, dy) {
            out.push([vx as f64, vy as f64]);
        }
        first = false;
        dx = ndx;
        dy = ndy;
        vx += dx;
        vy += dy;
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geodesic::{AnnotationKind, AnnotationSet, PolygonAnnotation};
    use crate::volume::VolumeGeometry;
    use proptest::prelude::*;

    fn refill(mask: &MaskVolume, z: usize) -> MaskVolume {
        let polys = mask_to_polygons(mask, z)
            .into_iter()
            .map(|vertices| PolygonAnnotation {
                group: 1,
                kind: AnnotationKind::Marker,
                slice: z,
                vertices,
            })
            .collect();
        let set = AnnotationSet::new(polys);
        set.validate(mask.geometry()).unwrap();
        set.rasterize(mask.geometry(), AnnotationKind::Marker, 1).unwrap()
    }

    #[test]
    fn single_pixel_is_a_unit_square() {
        let g = VolumeGeometry::unit([4, 4, 1]);
        let m = MaskVolume::from_fn(g, |x, y, _| x == 2 && y == 1);
        let p = mask_to_polygons(&m, 0);
        assert_eq!(p, vec![vec![[2.0, 1.0], [3.0, 1.0], [3.0, 2.0], [2.0, 2.0]]]);
    }

    #[test]
    fn diagonal_pixels_are_separate_components() {
        let g = VolumeGeometry::unit([4, 4, 1]);
        let m = MaskVolume::from_fn(g, |x, y, _| (x == 1 && y == 1) || (x == 2 && y == 2));
        assert_eq!(mask_to_polygons(&m, 0).len(), 2);
        assert_eq!(refill(&m, 0), m);
    }

    #[test]
    fn holes_are_filled() {
        let g = VolumeGeometry::unit([7, 7, 1]);
        let ring = MaskVolume::from_fn(g, |x, y, _| {
            (1..6).contains(&x) && (1..6).contains(&y) && !(x == 3 && y == 3)
        });
        let filled = refill(&ring, 0);
        assert_eq!(filled.count(), 25);
    }

    proptest! {
        #[test]
        fn tracing_then_filling_reproduces_hole_free_masks(bits in proptest::collection::vec(any::<bool>(), 100)) {
            let g = VolumeGeometry::unit([10, 10, 1]);
            let m = MaskVolume::from_fn(g, |x, y, _| bits[y * 10 + x]);
            let back = refill(&m, 0);
            // Filling can only add (hole) pixels.
            for i in 0..100 {
                prop_assert!(!m.data()[i] || back.data()[i]);
            }
            let again = refill(&back, 0);
            prop_assert_eq!(again, back);
        }
    }
}
