//! Shared 2D geometry kernels: projection rasterization, intersection over
//! union, convex hulls and point-in-polygon tests.
//!
//! The folding metrics operate on the xy-projection of point clouds. A cloud
//! is rasterized onto a fixed [`GridSpec`] so that two grids from the same
//! episode are comparable cell by cell, and alignment is scored with
//! [`iou`]. Occupancy covers the projected *area* of the cloud: every cell
//! containing a point is set, and cells whose centers fall inside the convex
//! hull of the projected points are filled in as well, so sparse particle
//! clouds form contiguous regions.

use nalgebra::{Vector2, Vector3};

use crate::error::GeometryError;

/// Boundary tolerance for half-plane tests, in meters.
pub const HULL_EPS: f64 = 1e-9;

/// Fixed rasterization frame: origin (min corner), square cell size and cell
/// counts. Two grids are comparable only if their specs are identical.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GridSpec {
    pub origin: Vector2<f64>,
    pub cell: f64,
    pub width: usize,
    pub height: usize,
}

impl GridSpec {
    /// A square frame of half-extent `half` centered on `center`.
    pub fn centered(center: Vector2<f64>, half: f64, cell: f64) -> Result<Self, GeometryError> {
        if cell <= 0.0 || !cell.is_finite() {
            return Err(GeometryError::InvalidArgument(format!(
                "cell size must be positive, got {cell}"
            )));
        }
        if half <= 0.0 {
            return Err(GeometryError::InvalidArgument(format!(
                "half extent must be positive, got {half}"
            )));
        }
        let n = (2.0 * half / cell).ceil() as usize;
        Ok(Self {
            origin: Vector2::new(center.x - half, center.y - half),
            cell,
            width: n,
            height: n,
        })
    }

    fn cell_index(&self, p: Vector2<f64>) -> (usize, usize, bool) {
        let cx = ((p.x - self.origin.x) / self.cell).floor() as i64;
        let cy = ((p.y - self.origin.y) / self.cell).floor() as i64;
        let mut clamped = false;
        let ix = if cx < 0 {
            clamped = true;
            0
        } else if cx >= self.width as i64 {
            clamped = true;
            self.width - 1
        } else {
            cx as usize
        };
        let iy = if cy < 0 {
            clamped = true;
            0
        } else if cy >= self.height as i64 {
            clamped = true;
            self.height - 1
        } else {
            cy as usize
        };
        (ix, iy, clamped)
    }

    fn cell_center(&self, ix: usize, iy: usize) -> Vector2<f64> {
        Vector2::new(
            self.origin.x + (ix as f64 + 0.5) * self.cell,
            self.origin.y + (iy as f64 + 0.5) * self.cell,
        )
    }
}

/// Boolean occupancy over a [`GridSpec`].
#[derive(Debug, Clone, PartialEq)]
pub struct OccupancyGrid {
    pub spec: GridSpec,
    bits: Vec<bool>,
    /// Number of input points that fell outside the frame and were clamped
    /// to a boundary cell.
    pub clamped_points: usize,
}

impl OccupancyGrid {
    fn empty(spec: GridSpec) -> Self {
        Self {
            bits: vec![false; spec.width * spec.height],
            spec,
            clamped_points: 0,
        }
    }

    #[inline]
    fn set(&mut self, ix: usize, iy: usize) {
        self.bits[iy * self.spec.width + ix] = true;
    }

    #[inline]
    pub fn get(&self, ix: usize, iy: usize) -> bool {
        self.bits[iy * self.spec.width + ix]
    }

    /// Number of set cells.
    pub fn count(&self) -> usize {
        self.bits.iter().filter(|b| **b).count()
    }

    /// Occupied area in square meters (set cells times cell area).
    pub fn area(&self) -> f64 {
        self.count() as f64 * self.spec.cell * self.spec.cell
    }

    /// Render as P5 portable graymap bytes (set cells white) for debugging.
    pub fn to_pgm(&self) -> Vec<u8> {
        let mut out = format!("P5\n{} {}\n255\n", self.spec.width, self.spec.height).into_bytes();
        // Row 0 at the top of the image = max y of the frame.
        for iy in (0..self.spec.height).rev() {
            for ix in 0..self.spec.width {
                out.push(if self.get(ix, iy) { 255 } else { 0 });
            }
        }
        out
    }
}

/// Strictly convex polygon, counter-clockwise vertex order.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvexHull2D {
    vertices: Vec<Vector2<f64>>,
}

impl ConvexHull2D {
    pub fn vertices(&self) -> &[Vector2<f64>] {
        &self.vertices
    }

    /// Polygon area by the shoelace formula.
    pub fn area(&self) -> f64 {
        let v = &self.vertices;
        let n = v.len();
        let mut twice = 0.0;
        for i in 0..n {
            let j = (i + 1) % n;
            twice += v[i].x * v[j].y - v[j].x * v[i].y;
        }
        0.5 * twice
    }
}

#[inline]
fn cross(o: Vector2<f64>, a: Vector2<f64>, b: Vector2<f64>) -> f64 {
    (a.x - o.x) * (b.y - o.y) - (a.y - o.y) * (b.x - o.x)
}

/// Turns below this cross-product magnitude count as collinear, so e.g. a
/// rotated lattice still hulls to its 4 corners. Coordinates are meters at
/// desk scale, which keeps an absolute threshold safe.
const COLLINEAR_EPS: f64 = 1e-12;

/// Monotone-chain convex hull. Returns CCW vertices with collinear boundary
/// points removed.
pub fn convex_hull_2d(points: &[Vector2<f64>]) -> Result<ConvexHull2D, GeometryError> {
    if points.len() < 3 {
        return Err(GeometryError::DegenerateHull {
            points: points.len(),
        });
    }
    let mut pts: Vec<Vector2<f64>> = points.to_vec();
    pts.sort_by(|a, b| {
        a.x.partial_cmp(&b.x)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.y.partial_cmp(&b.y).unwrap_or(std::cmp::Ordering::Equal))
    });
    pts.dedup_by(|a, b| a == b);
    if pts.len() < 3 {
        return Err(GeometryError::DegenerateHull { points: pts.len() });
    }

    let mut lower: Vec<Vector2<f64>> = Vec::with_capacity(pts.len());
    for &p in &pts {
        while lower.len() >= 2
            && cross(lower[lower.len() - 2], lower[lower.len() - 1], p) <= COLLINEAR_EPS
        {
            lower.pop();
        }
        lower.push(p);
    }
    let mut upper: Vec<Vector2<f64>> = Vec::with_capacity(pts.len());
    for &p in pts.iter().rev() {
        while upper.len() >= 2
            && cross(upper[upper.len() - 2], upper[upper.len() - 1], p) <= COLLINEAR_EPS
        {
            upper.pop();
        }
        upper.push(p);
    }
    lower.pop();
    upper.pop();
    lower.extend(upper);

    if lower.len() < 3 {
        return Err(GeometryError::DegenerateHull {
            points: points.len(),
        });
    }
    Ok(ConvexHull2D { vertices: lower })
}

/// True iff `p` is inside the hull or on its boundary (half-plane test per
/// edge with tolerance [`HULL_EPS`]).
pub fn point_in_hull(hull: &ConvexHull2D, p: Vector2<f64>) -> bool {
    let v = &hull.vertices;
    let n = v.len();
    for i in 0..n {
        let a = v[i];
        let b = v[(i + 1) % n];
        let edge = b - a;
        let len = edge.norm();
        // Signed distance of p to the edge line; negative = outside for CCW.
        let d = cross(a, b, p) / len;
        if d < -HULL_EPS {
            return false;
        }
    }
    true
}

/// Project points to the xy plane and rasterize onto `spec`.
///
/// Every cell containing a projected point is set; when the projected points
/// admit a convex hull, all cells whose centers fall inside that hull are set
/// as well, so the grid covers the occupied area rather than a scatter of
/// isolated samples. Points outside the frame are clamped to the boundary
/// cell and counted in `clamped_points`.
pub fn project_rasterize(
    points: &[Vector3<f64>],
    spec: &GridSpec,
) -> Result<OccupancyGrid, GeometryError> {
    if spec.cell <= 0.0 {
        return Err(GeometryError::InvalidArgument(format!(
            "cell size must be positive, got {}",
            spec.cell
        )));
    }
    let mut grid = OccupancyGrid::empty(*spec);
    let mut xy: Vec<Vector2<f64>> = Vec::with_capacity(points.len());
    for p in points {
        let q = Vector2::new(p.x, p.y);
        let (ix, iy, clamped) = spec.cell_index(q);
        grid.set(ix, iy);
        if clamped {
            grid.clamped_points += 1;
        }
        xy.push(q);
    }

    // Fill the interior so the grid measures the projected area. Degenerate
    // clouds (fewer than 3 distinct non-collinear points) keep point cells only.
    if let Ok(hull) = convex_hull_2d(&xy) {
        let mut min = xy[0];
        let mut max = xy[0];
        for q in &xy {
            min.x = min.x.min(q.x);
            min.y = min.y.min(q.y);
            max.x = max.x.max(q.x);
            max.y = max.y.max(q.y);
        }
        let (ix0, iy0, _) = spec.cell_index(min);
        let (ix1, iy1, _) = spec.cell_index(max);
        for iy in iy0..=iy1 {
            for ix in ix0..=ix1 {
                if !grid.get(ix, iy) && point_in_hull(&hull, spec.cell_center(ix, iy)) {
                    grid.set(ix, iy);
                }
            }
        }
    }
    Ok(grid)
}

/// Intersection over union of two occupancy grids on the same frame.
///
/// Both grids empty is a degenerate case and scores 0.
pub fn iou(a: &OccupancyGrid, b: &OccupancyGrid) -> Result<f64, GeometryError> {
    if a.spec != b.spec {
        return Err(GeometryError::GridMismatch);
    }
    let mut inter = 0usize;
    let mut union = 0usize;
    for (x, y) in a.bits.iter().zip(b.bits.iter()) {
        if *x && *y {
            inter += 1;
        }
        if *x || *y {
            union += 1;
        }
    }
    if union == 0 {
        return Ok(0.0);
    }
    Ok(inter as f64 / union as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn spec_1cm() -> GridSpec {
        GridSpec::centered(Vector2::new(0.0, 0.0), 0.5, 0.01).unwrap()
    }

    #[test]
    fn single_point_sets_one_cell() {
        let g = project_rasterize(&[Vector3::new(0.013, -0.02, 0.4)], &spec_1cm()).unwrap();
        assert_eq!(g.count(), 1);
    }

    #[test]
    fn lattice_points_bijection() {
        // 11x11 lattice with 1 cm pitch on a 1 cm grid: one cell per point.
        let mut pts = Vec::new();
        for i in 0..11 {
            for j in 0..11 {
                pts.push(Vector3::new(0.001 + 0.01 * i as f64, 0.001 + 0.01 * j as f64, 0.0));
            }
        }
        let g = project_rasterize(&pts, &spec_1cm()).unwrap();
        assert_eq!(g.count(), pts.len());
    }

    #[test]
    fn flat_cloth_area_near_analytic() {
        // 13x13 grid spanning 20 cm; occupied area should track the 0.04 m^2
        // footprint of the cloth.
        let mut pts = Vec::new();
        let spacing = 0.20 / 12.0;
        for i in 0..13 {
            for j in 0..13 {
                pts.push(Vector3::new(
                    -0.10 + spacing * i as f64,
                    -0.10 + spacing * j as f64,
                    0.0,
                ));
            }
        }
        let g = project_rasterize(&pts, &spec_1cm()).unwrap();
        let area = g.area();
        assert!(
            (area - 0.04).abs() <= 0.004,
            "area {area} not within 10% of 0.04"
        );
    }

    #[test]
    fn out_of_bounds_clamped_and_counted() {
        let g = project_rasterize(&[Vector3::new(2.0, 0.0, 0.0)], &spec_1cm()).unwrap();
        assert_eq!(g.clamped_points, 1);
        assert_eq!(g.count(), 1);
    }

    #[test]
    fn iou_identical_disjoint_partial() {
        let spec = spec_1cm();
        let a = project_rasterize(&[Vector3::new(0.0, 0.0, 0.0)], &spec).unwrap();
        assert_relative_eq!(iou(&a, &a).unwrap(), 1.0);

        let b = project_rasterize(&[Vector3::new(0.3, 0.3, 0.0)], &spec).unwrap();
        assert_relative_eq!(iou(&a, &b).unwrap(), 0.0);

        // 4-cell square vs a translate overlapping 2 cells: 2/6.
        let sq = |x0: f64, y0: f64| {
            vec![
                Vector3::new(x0 + 0.005, y0 + 0.005, 0.0),
                Vector3::new(x0 + 0.015, y0 + 0.005, 0.0),
                Vector3::new(x0 + 0.005, y0 + 0.015, 0.0),
                Vector3::new(x0 + 0.015, y0 + 0.015, 0.0),
            ]
        };
        let g1 = project_rasterize(&sq(0.0, 0.0), &spec).unwrap();
        let g2 = project_rasterize(&sq(0.01, 0.0), &spec).unwrap();
        assert_eq!(g1.count(), 4);
        assert_relative_eq!(iou(&g1, &g2).unwrap(), 2.0 / 6.0, epsilon = 1e-12);
    }

    #[test]
    fn iou_mismatched_grids_error() {
        let a = project_rasterize(&[Vector3::zeros()], &spec_1cm()).unwrap();
        let other = GridSpec::centered(Vector2::new(0.1, 0.0), 0.5, 0.01).unwrap();
        let b = project_rasterize(&[Vector3::zeros()], &other).unwrap();
        assert!(matches!(iou(&a, &b), Err(GeometryError::GridMismatch)));
    }

    #[test]
    fn both_empty_iou_is_zero() {
        let spec = spec_1cm();
        let a = project_rasterize(&[], &spec).unwrap();
        assert_eq!(iou(&a, &a).unwrap(), 0.0);
    }

    #[test]
    fn hull_square_with_interior_point() {
        let pts = vec![
            Vector2::new(0.0, 0.0),
            Vector2::new(1.0, 0.0),
            Vector2::new(1.0, 1.0),
            Vector2::new(0.0, 1.0),
            Vector2::new(0.5, 0.5),
        ];
        let hull = convex_hull_2d(&pts).unwrap();
        assert_eq!(hull.vertices().len(), 4);
        assert_relative_eq!(hull.area(), 1.0, epsilon = 1e-12);
    }

    #[test]
    fn hull_triangle() {
        let pts = vec![
            Vector2::new(0.0, 0.0),
            Vector2::new(1.0, 0.0),
            Vector2::new(0.0, 1.0),
        ];
        let hull = convex_hull_2d(&pts).unwrap();
        assert_eq!(hull.vertices().len(), 3);
    }

    #[test]
    fn hull_collinear_is_degenerate() {
        let pts = vec![
            Vector2::new(0.0, 0.0),
            Vector2::new(0.5, 0.5),
            Vector2::new(1.0, 1.0),
        ];
        assert!(matches!(
            convex_hull_2d(&pts),
            Err(GeometryError::DegenerateHull { .. })
        ));
    }

    #[test]
    fn rotated_cloth_hull_area() {
        // 169 flat-cloth points rotated 30 degrees: 4-vertex hull, area 0.04.
        let spacing = 0.20 / 12.0;
        let (s, c) = (30.0_f64.to_radians().sin(), 30.0_f64.to_radians().cos());
        let mut pts = Vec::new();
        for i in 0..13 {
            for j in 0..13 {
                let x = -0.10 + spacing * i as f64;
                let y = -0.10 + spacing * j as f64;
                pts.push(Vector2::new(c * x - s * y, s * x + c * y));
            }
        }
        let hull = convex_hull_2d(&pts).unwrap();
        assert_eq!(hull.vertices().len(), 4);
        assert_relative_eq!(hull.area(), 0.04, epsilon = 1e-9);
    }

    #[test]
    fn point_in_hull_boundary_and_outside() {
        let hull = convex_hull_2d(&[
            Vector2::new(0.0, 0.0),
            Vector2::new(1.0, 0.0),
            Vector2::new(1.0, 1.0),
            Vector2::new(0.0, 1.0),
        ])
        .unwrap();
        // Centroid and vertex are inside (boundary counts).
        assert!(point_in_hull(&hull, Vector2::new(0.5, 0.5)));
        assert!(point_in_hull(&hull, Vector2::new(1.0, 1.0)));
        // Vertex displaced 1 mm along the outward diagonal is outside.
        let d = Vector2::new(1.0, 1.0).normalize() * 0.001;
        assert!(!point_in_hull(&hull, Vector2::new(1.0, 1.0) + d));
    }

    #[test]
    fn rasterize_translation_consistency() {
        let spec = spec_1cm();
        let pts = vec![
            Vector3::new(0.012, 0.031, 0.0),
            Vector3::new(0.044, 0.052, 0.0),
            Vector3::new(0.023, 0.071, 0.0),
            Vector3::new(0.063, 0.024, 0.0),
        ];
        let g0 = project_rasterize(&pts, &spec).unwrap();
        // Translate by an integer number of cells (3 cells in x, -2 in y).
        let shifted: Vec<_> = pts
            .iter()
            .map(|p| Vector3::new(p.x + 0.03, p.y - 0.02, p.z))
            .collect();
        let g1 = project_rasterize(&shifted, &spec).unwrap();
        for iy in 0..spec.height {
            for ix in 0..spec.width {
                let tx = ix as i64 - 3;
                let ty = iy as i64 + 2;
                if tx >= 0 && (tx as usize) < spec.width && ty >= 0 && (ty as usize) < spec.height {
                    assert_eq!(g1.get(ix, iy), g0.get(tx as usize, ty as usize));
                }
            }
        }
    }

    proptest::proptest! {
        #[test]
        fn hull_contains_all_inputs(raw in proptest::collection::vec((-0.5f64..0.5, -0.5f64..0.5), 3..40)) {
            let pts: Vec<Vector2<f64>> = raw.iter().map(|(x, y)| Vector2::new(*x, *y)).collect();
            if let Ok(hull) = convex_hull_2d(&pts) {
                for p in &pts {
                    proptest::prop_assert!(point_in_hull(&hull, *p));
                }
            }
        }

        #[test]
        fn iou_symmetric(ax in -0.1f64..0.1, ay in -0.1f64..0.1, bx in -0.1f64..0.1, by in -0.1f64..0.1) {
            let spec = GridSpec::centered(Vector2::new(0.0, 0.0), 0.5, 0.01).unwrap();
            let mk = |x: f64, y: f64| {
                project_rasterize(&[
                    Vector3::new(x, y, 0.0),
                    Vector3::new(x + 0.02, y, 0.0),
                    Vector3::new(x, y + 0.02, 0.0),
                ], &spec).unwrap()
            };
            let a = mk(ax, ay);
            let b = mk(bx, by);
            proptest::prop_assert_eq!(iou(&a, &b).unwrap(), iou(&b, &a).unwrap());
        }
    }
}
