//! Strip geometry and grid construction.
//!
//! The domain is x-periodic on [0, 2*pi) with a fluid layer (-L/2, L/2) between two
//! solid layers reaching to y = -L and y = +L. The interfaces at y = +-L/2 and the
//! outer walls at y = +-L fall exactly on grid rows. Interface rows are shared
//! degrees of freedom between the fluid and the adjacent solid layer.

use std::f64::consts::PI;
use thiserror::Error;

/// Resolution and size of the strip.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DomainSpec {
    /// Fluid layer thickness; solids each have thickness L/2.
    pub l: f64,
    /// Periodic x resolution, even, >= 4.
    pub nx: usize,
    /// Fluid y cells, even, >= 4.
    pub ny_f: usize,
    /// Solid y cells per layer, >= 2.
    pub ny_s: usize,
}

#[derive(Debug, Error, PartialEq)]
pub enum GridError {
    #[error("domain size L must be positive, got {0}")]
    NonPositiveL(f64),
    #[error("Nx must be even and >= 4, got {0}")]
    BadNx(usize),
    #[error("Ny_f must be even and >= 4, got {0}")]
    BadNyF(usize),
    #[error("Ny_s must be >= 2, got {0}")]
    BadNyS(usize),
    #[error("row {0} is not on an interface")]
    NotOnInterface(usize),
    #[error("difference-quotient offset {0} is not a positive whole multiple of hx")]
    BadShift(f64),
}

/// Which vertical slab a row belongs to (interface rows belong to both neighbours).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Region {
    SolidLower,
    Fluid,
    SolidUpper,
}

/// Immutable grid: coordinates, row layout, spacings and boundary rows.
///
/// Whole-strip arrays use one row per distinct y level, bottom to top:
/// rows `0..=ny_s` lower solid, `ny_s..=ny_s+ny_f` fluid, `ny_s+ny_f..=2*ny_s+ny_f`
/// upper solid. Rows `ny_s` and `ny_s+ny_f` are the interfaces; rows `0` and
/// `2*ny_s+ny_f` are the outer walls.
#[derive(Debug, Clone)]
pub struct Grid {
    pub spec: DomainSpec,
    /// x_i = 2*pi*i/Nx.
    pub x_coords: Vec<f64>,
    /// y level of each whole-strip row, bottom to top.
    pub y_rows: Vec<f64>,
    /// Fluid cell height L/Ny_f.
    pub hy_f: f64,
    /// Solid cell height (L/2)/Ny_s.
    pub hy_s: f64,
    /// Whole-strip row indices of the two interfaces: [lower, upper].
    pub gamma_rows: [usize; 2],
    /// Whole-strip row indices of the outer walls: [bottom, top].
    pub gamma_out_rows: [usize; 2],
}

/// Validate a `DomainSpec` and build the grid.
pub fn build_grid(spec: DomainSpec) -> Result<Grid, GridError> {
    if !(spec.l > 0.0) {
        return Err(GridError::NonPositiveL(spec.l));
    }
    if spec.nx < 4 || spec.nx % 2 != 0 {
        return Err(GridError::BadNx(spec.nx));
    }
    if spec.ny_f < 4 || spec.ny_f % 2 != 0 {
        return Err(GridError::BadNyF(spec.ny_f));
    }
    if spec.ny_s < 2 {
        return Err(GridError::BadNyS(spec.ny_s));
    }
    let x_coords = (0..spec.nx)
        .map(|i| 2.0 * PI * (i as f64) / (spec.nx as f64))
        .collect();
    let hy_f = spec.l / spec.ny_f as f64;
    let hy_s = (spec.l / 2.0) / spec.ny_s as f64;
    let (s, f) = (spec.ny_s, spec.ny_f);
    let mut y_rows = Vec::with_capacity(2 * s + f + 1);
    for j in 0..=s {
        y_rows.push(-spec.l + j as f64 * hy_s);
    }
    for j in 1..=f {
        y_rows.push(-spec.l / 2.0 + j as f64 * hy_f);
    }
    for j in 1..=s {
        y_rows.push(spec.l / 2.0 + j as f64 * hy_s);
    }
    Ok(Grid {
        spec,
        x_coords,
        y_rows,
        hy_f,
        hy_s,
        gamma_rows: [s, s + f],
        gamma_out_rows: [0, 2 * s + f],
    })
}

impl Grid {
    /// Uniform x spacing 2*pi/Nx.
    pub fn hx(&self) -> f64 {
        2.0 * PI / self.spec.nx as f64
    }

    /// Number of whole-strip rows (interface rows counted once).
    pub fn whole_rows(&self) -> usize {
        2 * self.spec.ny_s + self.spec.ny_f + 1
    }

    /// Total stored nodes over the per-region grids. Each region keeps its own
    /// interface rows, so the two interfaces are counted by both neighbours:
    /// Nx * ((Ny_f + 1) + 2 * (Ny_s + 1)).
    pub fn total_nodes(&self) -> usize {
        self.spec.nx * (self.spec.ny_f + 2 * self.spec.ny_s + 3)
    }

    /// Whole-strip row range of the fluid, inclusive of both interfaces.
    pub fn fluid_rows(&self) -> std::ops::RangeInclusive<usize> {
        self.gamma_rows[0]..=self.gamma_rows[1]
    }

    /// Outward unit normal of the fluid at an interface row: (0, +1) at y = +L/2,
    /// (0, -1) at y = -L/2.
    pub fn normal_sign(&self, row: usize) -> Result<f64, GridError> {
        if row == self.gamma_rows[1] {
            Ok(1.0)
        } else if row == self.gamma_rows[0] {
            Ok(-1.0)
        } else {
            Err(GridError::NotOnInterface(row))
        }
    }

    /// Region of a whole-strip row; interface rows report as fluid.
    pub fn region_of_row(&self, row: usize) -> Region {
        if row < self.gamma_rows[0] {
            Region::SolidLower
        } else if row <= self.gamma_rows[1] {
            Region::Fluid
        } else {
            Region::SolidUpper
        }
    }

    /// Trapezoid y-weight of a whole-strip row for integration over the full strip.
    /// Interface rows take half a cell from each side.
    pub fn weight_whole(&self, row: usize) -> f64 {
        let [gl, gu] = self.gamma_rows;
        let [ol, ou] = self.gamma_out_rows;
        if row == ol || row == ou {
            self.hy_s / 2.0
        } else if row == gl || row == gu {
            (self.hy_f + self.hy_s) / 2.0
        } else if row > gl && row < gu {
            self.hy_f
        } else {
            self.hy_s
        }
    }

    /// Trapezoid y-weight of a whole-strip row for integration over the fluid only
    /// (zero off the fluid; half cells at the interfaces).
    pub fn weight_fluid(&self, row: usize) -> f64 {
        let [gl, gu] = self.gamma_rows;
        if row == gl || row == gu {
            self.hy_f / 2.0
        } else if row > gl && row < gu {
            self.hy_f
        } else {
            0.0
        }
    }

    /// Trapezoid y-weight of a whole-strip row for integration over the solids only.
    pub fn weight_solid(&self, row: usize) -> f64 {
        let [gl, gu] = self.gamma_rows;
        let [ol, ou] = self.gamma_out_rows;
        if row == ol || row == ou || row == gl || row == gu {
            self.hy_s / 2.0
        } else if row < gl || row > gu {
            self.hy_s
        } else {
            0.0
        }
    }
}

/// Project a vector at an interface node onto the interface tangent. The interfaces
/// are horizontal lines, so Pi(a, b) = (a, 0); exact and idempotent.
pub fn tangential_project(grid: &Grid, row: usize, v: [f64; 2]) -> Result<[f64; 2], GridError> {
    grid.normal_sign(row)?;
    Ok([v[0], 0.0])
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(l: f64, nx: usize, ny_f: usize, ny_s: usize) -> DomainSpec {
        DomainSpec { l, nx, ny_f, ny_s }
    }

    #[test]
    fn rejects_bad_specs() {
        assert_eq!(
            build_grid(spec(-1.0, 8, 8, 4)).unwrap_err(),
            GridError::NonPositiveL(-1.0)
        );
        assert_eq!(build_grid(spec(1.0, 7, 8, 4)).unwrap_err(), GridError::BadNx(7));
        assert_eq!(build_grid(spec(1.0, 8, 6, 1)).unwrap_err(), GridError::BadNyS(1));
        assert_eq!(build_grid(spec(1.0, 8, 5, 2)).unwrap_err(), GridError::BadNyF(5));
    }

    #[test]
    fn coordinates_and_rows() {
        let g = build_grid(spec(1.0, 8, 4, 2)).unwrap();
        // x_i = 2*pi*i/Nx, bitwise.
        for (i, &x) in g.x_coords.iter().enumerate() {
            assert_eq!(x, 2.0 * PI * (i as f64) / 8.0);
        }
        assert_eq!(g.whole_rows(), 9);
        assert_eq!(g.total_nodes(), 8 * (4 + 4 + 3));
        assert_eq!(g.gamma_rows, [2, 6]);
        assert_eq!(g.gamma_out_rows, [0, 8]);
        assert!((g.y_rows[2] + 0.5).abs() < 1e-15);
        assert!((g.y_rows[6] - 0.5).abs() < 1e-15);
        assert!((g.y_rows[0] + 1.0).abs() < 1e-15);
        assert!((g.y_rows[8] - 1.0).abs() < 1e-15);
        // Interface rows are shared: the row below gamma is solid, above is fluid.
        assert_eq!(g.region_of_row(1), Region::SolidLower);
        assert_eq!(g.region_of_row(3), Region::Fluid);
        assert_eq!(g.region_of_row(7), Region::SolidUpper);
    }

    #[test]
    fn interior_fluid_stencils_have_neighbours() {
        let g = build_grid(spec(2.0, 16, 8, 4)).unwrap();
        for row in g.gamma_rows[0] + 1..g.gamma_rows[1] {
            assert!(row >= 1 && row + 1 < g.whole_rows());
        }
    }

    #[test]
    fn normals_and_projection() {
        let g = build_grid(spec(1.0, 8, 4, 2)).unwrap();
        assert_eq!(g.normal_sign(6).unwrap(), 1.0);
        assert_eq!(g.normal_sign(2).unwrap(), -1.0);
        assert!(g.normal_sign(3).is_err());

        let p = tangential_project(&g, 6, [3.0, -2.0]).unwrap();
        assert_eq!(p, [3.0, 0.0]);
        // Idempotent exactly.
        assert_eq!(tangential_project(&g, 6, p).unwrap(), p);
        assert_eq!(
            tangential_project(&g, 4, [1.0, 1.0]).unwrap_err(),
            GridError::NotOnInterface(4)
        );
    }

    #[test]
    fn quadrature_weights_tile_the_strip() {
        let g = build_grid(spec(1.5, 8, 6, 3)).unwrap();
        let total: f64 = (0..g.whole_rows()).map(|r| g.weight_whole(r)).sum();
        assert!((total - 2.0 * g.spec.l).abs() < 1e-14);
        let fluid: f64 = (0..g.whole_rows()).map(|r| g.weight_fluid(r)).sum();
        assert!((fluid - g.spec.l).abs() < 1e-14);
        let solid: f64 = (0..g.whole_rows()).map(|r| g.weight_solid(r)).sum();
        assert!((solid - g.spec.l).abs() < 1e-14);
        for r in 0..g.whole_rows() {
            assert!((g.weight_fluid(r) + g.weight_solid(r) - g.weight_whole(r)).abs() < 1e-15);
        }
    }
}
