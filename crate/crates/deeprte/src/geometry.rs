//! Domain, mesh, angular quadrature, Henyey-Greenstein kernel and
//! characteristic-line geometry shared by the solver, the dataset generator
//! and the neural operator.

use crate::error::RteError;

/// Rectangular spatial domain (default unit square).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Domain2D {
    pub x_min: f64,
    pub x_max: f64,
    pub y_min: f64,
    pub y_max: f64,
}

impl Domain2D {
    pub fn new(x_min: f64, x_max: f64, y_min: f64, y_max: f64) -> Result<Self, RteError> {
        if !(x_min < x_max && y_min < y_max) {
            return Err(RteError::Geometry(format!(
                "degenerate domain [{x_min},{x_max}]x[{y_min},{y_max}]"
            )));
        }
        Ok(Self { x_min, x_max, y_min, y_max })
    }

    pub fn unit() -> Self {
        Self { x_min: 0.0, x_max: 1.0, y_min: 0.0, y_max: 1.0 }
    }

    pub fn contains(&self, x: f64, y: f64) -> bool {
        x > self.x_min && x < self.x_max && y > self.y_min && y < self.y_max
    }
}

/// Uniform cell-centered mesh over a [`Domain2D`].
#[derive(Debug, Clone)]
pub struct SpatialMesh {
    pub domain: Domain2D,
    pub nx: usize,
    pub ny: usize,
    pub dx: f64,
    pub dy: f64,
    /// Cell centers, row-major: index `ix * ny + iy`.
    pub centers: Vec<(f64, f64)>,
}

impl SpatialMesh {
    pub fn new(domain: Domain2D, nx: usize, ny: usize) -> Result<Self, RteError> {
        if nx == 0 || ny == 0 {
            return Err(RteError::Geometry("mesh needs positive cell counts".into()));
        }
        let dx = (domain.x_max - domain.x_min) / nx as f64;
        let dy = (domain.y_max - domain.y_min) / ny as f64;
        let mut centers = Vec::with_capacity(nx * ny);
        for ix in 0..nx {
            let x = domain.x_min + (ix as f64 + 0.5) * dx;
            for iy in 0..ny {
                let y = domain.y_min + (iy as f64 + 0.5) * dy;
                centers.push((x, y));
            }
        }
        Ok(Self { domain, nx, ny, dx, dy, centers })
    }

    pub fn unit(n: usize) -> Self {
        Self::new(Domain2D::unit(), n, n).expect("unit mesh")
    }

    pub fn n_cells(&self) -> usize {
        self.nx * self.ny
    }

    pub fn cell_index(&self, ix: usize, iy: usize) -> usize {
        ix * self.ny + iy
    }

    /// Index of the cell whose center is nearest to `(x, y)` (clamped to the
    /// domain, so points marginally outside map to the closest boundary cell).
    pub fn nearest_cell(&self, x: f64, y: f64) -> usize {
        let fx = (x - self.domain.x_min) / self.dx - 0.5;
        let fy = (y - self.domain.y_min) / self.dy - 0.5;
        let ix = fx.round().clamp(0.0, (self.nx - 1) as f64) as usize;
        let iy = fy.round().clamp(0.0, (self.ny - 1) as f64) as usize;
        self.cell_index(ix, iy)
    }
}

/// One discrete ordinate. `c`, `s` are the direction cosines
/// `c = sqrt(1 - zeta^2) cos(theta)`, `s = sqrt(1 - zeta^2) sin(theta)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Direction {
    pub zeta: f64,
    pub theta: f64,
    pub c: f64,
    pub s: f64,
}

impl Direction {
    pub fn from_angles(zeta: f64, theta: f64) -> Self {
        let rho = (1.0 - zeta * zeta).sqrt();
        Self { zeta, theta, c: rho * theta.cos(), s: rho * theta.sin() }
    }

    /// Full 3D dot product `c1 c2 + s1 s2 + zeta1 zeta2`.
    pub fn dot(&self, other: &Direction) -> f64 {
        self.c * other.c + self.s * other.s + self.zeta * other.zeta
    }
}

/// Discrete-ordinates quadrature: directions plus weights normalized so that
/// the weighted sum equals the spherical average (total weight 1).
#[derive(Debug, Clone)]
pub struct QuadratureSet {
    pub directions: Vec<Direction>,
    pub weights: Vec<f64>,
}

/// The six base ordinates `(zeta, theta, 4w)`; `theta` given as a multiple of pi.
/// `zeta` values are the positive roots of the degree-6 Legendre polynomial.
const BASE_ORDINATES: [(f64, f64, f64); 6] = [
    (0.2386192, 1.0 / 12.0, 0.1559713),
    (0.2386192, 3.0 / 12.0, 0.1559713),
    (0.2386192, 5.0 / 12.0, 0.1559713),
    (0.6612094, 1.0 / 8.0, 0.1803808),
    (0.6612094, 3.0 / 8.0, 0.1803808),
    (0.9324695, 1.0 / 4.0, 0.1713245),
];

/// Builds the 24-point product quadrature: six `(zeta, theta)` base ordinates
/// in the first (c, s) quadrant reflected over the four `(+-c, +-s)` sign
/// combinations, each reflection carrying a quarter of the tabulated weight.
pub fn build_quadrature_set() -> QuadratureSet {
    let mut directions = Vec::with_capacity(24);
    let mut weights = Vec::with_capacity(24);
    for &(sc, ss) in &[(1.0f64, 1.0f64), (-1.0, 1.0), (-1.0, -1.0), (1.0, -1.0)] {
        for &(zeta, theta_pi, w4) in &BASE_ORDINATES {
            let base = Direction::from_angles(zeta, theta_pi * std::f64::consts::PI);
            directions.push(Direction { zeta, theta: base.theta, c: sc * base.c, s: ss * base.s });
            weights.push(w4 / 4.0);
        }
    }
    QuadratureSet { directions, weights }
}

/// The six base ordinates as a standalone set (weights `4w`, summing to 1).
/// Handy for miniature model configurations.
pub fn base_quadrature_set() -> QuadratureSet {
    let mut directions = Vec::with_capacity(6);
    let mut weights = Vec::with_capacity(6);
    for &(zeta, theta_pi, w4) in &BASE_ORDINATES {
        directions.push(Direction::from_angles(zeta, theta_pi * std::f64::consts::PI));
        weights.push(w4);
    }
    QuadratureSet { directions, weights }
}

impl QuadratureSet {
    pub fn len(&self) -> usize {
        self.directions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.directions.is_empty()
    }
}

/// Piecewise-constant cross sections on mesh cells.
#[derive(Debug, Clone)]
pub struct CrossSections {
    pub mu_t: Vec<f64>,
    pub mu_s: Vec<f64>,
}

impl CrossSections {
    pub fn new(mu_t: Vec<f64>, mu_s: Vec<f64>) -> Result<Self, RteError> {
        if mu_t.len() != mu_s.len() {
            return Err(RteError::Shape("mu_t and mu_s lengths differ".into()));
        }
        for (&t, &s) in mu_t.iter().zip(&mu_s) {
            if !(t >= s && s >= 0.0) {
                return Err(RteError::Geometry(format!(
                    "cross sections must satisfy mu_t >= mu_s >= 0, got ({t}, {s})"
                )));
            }
        }
        Ok(Self { mu_t, mu_s })
    }

    pub fn constant(n_cells: usize, mu_t: f64, mu_s: f64) -> Self {
        Self::new(vec![mu_t; n_cells], vec![mu_s; n_cells]).expect("constant cross sections")
    }
}

/// Normalized Henyey-Greenstein phase function evaluated at a pair of
/// ordinates, using the full 3D direction dot product.
pub fn henyey_greenstein(g: f64, d1: &Direction, d2: &Direction) -> Result<f64, RteError> {
    if !(0.0..1.0).contains(&g) {
        return Err(RteError::Geometry(format!("asymmetry parameter g={g} outside [0,1)")));
    }
    Ok(hg_from_cos(g, d1.dot(d2)))
}

fn hg_from_cos(g: f64, cos_theta: f64) -> f64 {
    let denom = 1.0 + g * g - 2.0 * g * cos_theta;
    (1.0 - g * g) / denom.powf(1.5)
}

/// Dense scattering kernel tabulated on a quadrature set.
///
/// `p_quad[i][j] = p(Omega_i, Omega_j)` with each row rescaled so the discrete
/// normalization `sum_j w_j p[i][j] = 1` holds exactly.
#[derive(Debug, Clone)]
pub struct ScatteringKernel {
    pub g: f64,
    /// Row-major `[n][n]` matrix after row renormalization.
    pub p_quad: Vec<f64>,
    pub n: usize,
    pub renormalized: bool,
}

impl ScatteringKernel {
    pub fn at(&self, i: usize, j: usize) -> f64 {
        self.p_quad[i * self.n + j]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.p_quad[i * self.n..(i + 1) * self.n]
    }
}

/// Tabulates the H-G kernel on all quadrature pairs and renormalizes each row
/// against the discrete weights. With `reduce_even` set, the kernel is first
/// symmetrized over the sign of the second ordinate's `zeta` (the reduction
/// used when a quadrature carries both `zeta` signs; the 24-point set does
/// not, so the flag defaults off at call sites).
pub fn build_scattering_kernel(
    g: f64,
    quad: &QuadratureSet,
    reduce_even: bool,
) -> Result<ScatteringKernel, RteError> {
    let n = quad.len();
    let mut p = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            let dj = quad.directions[j];
            let mut v = henyey_greenstein(g, &quad.directions[i], &dj)?;
            if reduce_even {
                let flipped = Direction { zeta: -dj.zeta, ..dj };
                v = 0.5 * (v + henyey_greenstein(g, &quad.directions[i], &flipped)?);
            }
            p[i * n + j] = v;
        }
    }
    for i in 0..n {
        let row_sum: f64 = (0..n).map(|j| quad.weights[j] * p[i * n + j]).sum();
        if row_sum <= 0.0 {
            return Err(RteError::Geometry("non-positive kernel row sum".into()));
        }
        for j in 0..n {
            p[i * n + j] /= row_sum;
        }
    }
    Ok(ScatteringKernel { g, p_quad: p, n, renormalized: true })
}

/// Distance `s_-` from an interior point to the domain boundary, moving
/// backward along the (projected) characteristic `r - s (c, s)`.
pub fn boundary_exit_distance(
    r: (f64, f64),
    d: &Direction,
    dom: &Domain2D,
) -> Result<f64, RteError> {
    if !dom.contains(r.0, r.1) {
        return Err(RteError::Geometry(format!("point ({}, {}) not inside domain", r.0, r.1)));
    }
    if d.c == 0.0 && d.s == 0.0 {
        return Err(RteError::Geometry("degenerate direction (c, s) = (0, 0)".into()));
    }
    // Backward ray r - s*(c,s): the x-face hit depends on the sign of c.
    let sx = if d.c > 0.0 {
        (r.0 - dom.x_min) / d.c
    } else if d.c < 0.0 {
        (r.0 - dom.x_max) / d.c
    } else {
        f64::INFINITY
    };
    let sy = if d.s > 0.0 {
        (r.1 - dom.y_min) / d.s
    } else if d.s < 0.0 {
        (r.1 - dom.y_max) / d.s
    } else {
        f64::INFINITY
    };
    Ok(sx.min(sy))
}

/// Which cross-section field to integrate along the ray.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CrossSectionKind {
    Total,
    Scattering,
}

/// Optical depth `int_0^{s_-} mu(r - s Omega) ds` by midpoint ray marching
/// with step `<= min(dx, dy) / 4` and nearest-cell lookup of `mu`. Serves as
/// the reference oracle for the learned optical-depth behavior.
pub fn optical_depth_exact(
    r: (f64, f64),
    d: &Direction,
    xs: &CrossSections,
    mesh: &SpatialMesh,
    which: CrossSectionKind,
) -> Result<f64, RteError> {
    let s_minus = boundary_exit_distance(r, d, &mesh.domain)?;
    Ok(optical_depth_along(r, d, xs, mesh, which, 0.0, s_minus))
}

/// Optical depth over the sub-segment `[s1, s2]` of the backward ray.
pub(crate) fn optical_depth_along(
    r: (f64, f64),
    d: &Direction,
    xs: &CrossSections,
    mesh: &SpatialMesh,
    which: CrossSectionKind,
    s1: f64,
    s2: f64,
) -> f64 {
    let length = s2 - s1;
    if length <= 0.0 {
        return 0.0;
    }
    let field = match which {
        CrossSectionKind::Total => &xs.mu_t,
        CrossSectionKind::Scattering => &xs.mu_s,
    };
    let max_step = mesh.dx.min(mesh.dy) / 4.0;
    let n_steps = (length / max_step).ceil().max(1.0) as usize;
    let h = length / n_steps as f64;
    let mut tau = 0.0;
    for m in 0..n_steps {
        let s = s1 + (m as f64 + 0.5) * h;
        let x = r.0 - s * d.c;
        let y = r.1 - s * d.s;
        tau += field[mesh.nearest_cell(x, y)] * h;
    }
    tau
}

/// Floor used when normalizing the relative offset in the position encoding.
pub const RPE_NORM_FLOOR: f64 = 1e-12;
/// Additive mask value for points behind the query along the characteristic.
pub const MASK_VALUE: f64 = -1e10;

/// Local characteristic coordinates of a mesh point relative to a phase point,
/// plus the additive attention mask: `r_local = (r - r_mesh) . (c, s)`,
/// `theta_local = r_local / max(|r - r_mesh|, eps)`, mask `-1e10` when the
/// mesh point lies strictly behind the query (`r_local < 0`).
pub fn relative_position_encoding(
    r: (f64, f64),
    d: &Direction,
    r_mesh: (f64, f64),
) -> (f64, f64, f64) {
    let rel = (r.0 - r_mesh.0, r.1 - r_mesh.1);
    let r_local = rel.0 * d.c + rel.1 * d.s;
    let norm = (rel.0 * rel.0 + rel.1 * rel.1).sqrt().max(RPE_NORM_FLOOR);
    let theta_local = r_local / norm;
    let mask = if r_local < 0.0 { MASK_VALUE } else { 0.0 };
    (r_local, theta_local, mask)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn quadrature_matches_tabulated_first_point() {
        let quad = build_quadrature_set();
        let d = quad.directions[0];
        assert_relative_eq!(d.zeta, 0.2386192, max_relative = 1e-12);
        assert_relative_eq!(d.c, 0.9380233, epsilon = 1e-7);
        assert_relative_eq!(d.s, 0.2513426, epsilon = 1e-7);
        assert_relative_eq!(quad.weights[0], 0.1559713 / 4.0, max_relative = 1e-12);
    }

    #[test]
    fn quadrature_weights_sum_to_one() {
        let quad = build_quadrature_set();
        assert_eq!(quad.len(), 24);
        let total: f64 = quad.weights.iter().sum();
        assert!((total - 1.0).abs() < 1e-7, "total weight {total}");
    }

    #[test]
    fn quadrature_directions_on_unit_sphere() {
        for d in build_quadrature_set().directions {
            let norm = d.c * d.c + d.s * d.s + d.zeta * d.zeta;
            assert!((norm - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn quadrature_odd_moments_vanish() {
        let quad = build_quadrature_set();
        let mc: f64 = quad.directions.iter().zip(&quad.weights).map(|(d, w)| w * d.c).sum();
        let ms: f64 = quad.directions.iter().zip(&quad.weights).map(|(d, w)| w * d.s).sum();
        assert!(mc.abs() < 1e-12 && ms.abs() < 1e-12);
    }

    #[test]
    fn hg_isotropic_and_closed_form() {
        let quad = build_quadrature_set();
        let d0 = quad.directions[0];
        let d1 = quad.directions[7];
        assert_relative_eq!(henyey_greenstein(0.0, &d0, &d1).unwrap(), 1.0);
        // cos = 1 and cos = 0, evaluated directly from the formula.
        assert_relative_eq!(hg_from_cos(0.5, 1.0), 6.0, max_relative = 1e-12);
        assert_relative_eq!(hg_from_cos(0.5, 0.0), 0.75 / 1.25f64.powf(1.5), max_relative = 1e-12);
        assert_relative_eq!(hg_from_cos(0.5, 0.0), 0.536656, epsilon = 1e-6);
    }

    #[test]
    fn hg_rejects_g_one() {
        let quad = build_quadrature_set();
        assert!(henyey_greenstein(1.0, &quad.directions[0], &quad.directions[1]).is_err());
    }

    #[test]
    fn kernel_isotropic_is_all_ones() {
        let quad = build_quadrature_set();
        let k = build_scattering_kernel(0.0, &quad, false).unwrap();
        for v in &k.p_quad {
            assert_relative_eq!(*v, 1.0, max_relative = 1e-12);
        }
    }

    #[test]
    fn kernel_rows_stochastic_after_renormalization() {
        let quad = build_quadrature_set();
        for &g in &[0.0, 0.1, 0.5, 0.8, 0.99] {
            let k = build_scattering_kernel(g, &quad, false).unwrap();
            for i in 0..k.n {
                let sum: f64 = (0..k.n).map(|j| quad.weights[j] * k.at(i, j)).sum();
                assert!((sum - 1.0).abs() < 1e-12, "g={g} row {i} sum {sum}");
            }
        }
    }

    #[test]
    fn kernel_symmetric_before_renormalization() {
        let quad = build_quadrature_set();
        // Raw H-G values depend only on the dot product, so check p_ij = p_ji
        // directly from the function.
        for i in 0..quad.len() {
            for j in 0..quad.len() {
                let a = henyey_greenstein(0.8, &quad.directions[i], &quad.directions[j]).unwrap();
                let b = henyey_greenstein(0.8, &quad.directions[j], &quad.directions[i]).unwrap();
                assert_relative_eq!(a, b, max_relative = 1e-14);
            }
        }
    }

    #[test]
    fn exit_distance_examples() {
        let dom = Domain2D::unit();
        let right = Direction { zeta: 0.0, theta: 0.0, c: 1.0, s: 0.0 };
        assert_relative_eq!(boundary_exit_distance((0.5, 0.5), &right, &dom).unwrap(), 0.5);
        assert_relative_eq!(boundary_exit_distance((0.9, 0.5), &right, &dom).unwrap(), 0.9);
        let diag = Direction { zeta: 0.0, theta: 0.0, c: std::f64::consts::FRAC_1_SQRT_2, s: std::f64::consts::FRAC_1_SQRT_2 };
        assert_relative_eq!(
            boundary_exit_distance((0.5, 0.5), &diag, &dom).unwrap(),
            0.5 * std::f64::consts::SQRT_2,
            max_relative = 1e-12
        );
        assert!(boundary_exit_distance((1.5, 0.5), &right, &dom).is_err());
    }

    #[test]
    fn optical_depth_constant_and_zero() {
        let mesh = SpatialMesh::unit(40);
        let right = Direction { zeta: 0.0, theta: 0.0, c: 1.0, s: 0.0 };
        let zero = CrossSections::constant(mesh.n_cells(), 0.0, 0.0);
        assert_eq!(
            optical_depth_exact((0.5, 0.5), &right, &zero, &mesh, CrossSectionKind::Total).unwrap(),
            0.0
        );
        let ten = CrossSections::constant(mesh.n_cells(), 10.0, 0.0);
        assert_relative_eq!(
            optical_depth_exact((0.5, 0.5), &right, &ten, &mesh, CrossSectionKind::Total).unwrap(),
            5.0,
            max_relative = 1e-12
        );
    }

    #[test]
    fn optical_depth_piecewise_line_integral() {
        let mesh = SpatialMesh::unit(40);
        let mut mu_t = vec![10.0; mesh.n_cells()];
        for (i, &(x, y)) in mesh.centers.iter().enumerate() {
            if (0.4..0.6).contains(&x) && (0.4..0.6).contains(&y) {
                mu_t[i] = 6.0;
            }
        }
        let xs = CrossSections::new(mu_t, vec![0.0; mesh.n_cells()]).unwrap();
        let right = Direction { zeta: 0.0, theta: 0.0, c: 1.0, s: 0.0 };
        let tau =
            optical_depth_exact((0.9, 0.5), &right, &xs, &mesh, CrossSectionKind::Total).unwrap();
        assert!((tau - 8.2).abs() < 1e-3, "tau = {tau}");
    }

    #[test]
    fn optical_depth_additive_along_ray() {
        let mesh = SpatialMesh::unit(40);
        let mut mu_t = vec![10.0; mesh.n_cells()];
        for (i, &(x, _)) in mesh.centers.iter().enumerate() {
            if x > 0.5 {
                mu_t[i] = 4.0;
            }
        }
        let xs = CrossSections::new(mu_t, vec![0.0; mesh.n_cells()]).unwrap();
        let quad = build_quadrature_set();
        let d = quad.directions[0];
        let r = (0.8, 0.7);
        let s1 = 0.3;
        let s_minus = boundary_exit_distance(r, &d, &mesh.domain).unwrap();
        let t_full = optical_depth_exact(r, &d, &xs, &mesh, CrossSectionKind::Total).unwrap();
        let t_head = optical_depth_along(r, &d, &xs, &mesh, CrossSectionKind::Total, 0.0, s1);
        let mid = (r.0 - s1 * d.c, r.1 - s1 * d.s);
        let t_tail =
            optical_depth_along(mid, &d, &xs, &mesh, CrossSectionKind::Total, 0.0, s_minus - s1);
        // Ray-march tolerance: step min(dx,dy)/4 on a piecewise-constant field.
        assert!((t_head + t_tail - t_full).abs() < 2e-2, "{t_head} + {t_tail} vs {t_full}");
    }

    #[test]
    fn rpe_examples() {
        let right = Direction { zeta: 0.0, theta: 0.0, c: 1.0, s: 0.0 };
        let (r_loc, th, m) = relative_position_encoding((0.5, 0.5), &right, (0.3, 0.5));
        assert_relative_eq!(r_loc, 0.2, max_relative = 1e-12);
        assert_relative_eq!(th, 1.0, max_relative = 1e-12);
        assert_eq!(m, 0.0);

        let (r_loc, th, m) = relative_position_encoding((0.5, 0.5), &right, (0.7, 0.5));
        assert_relative_eq!(r_loc, -0.2, max_relative = 1e-12);
        assert_relative_eq!(th, -1.0, max_relative = 1e-12);
        assert_eq!(m, MASK_VALUE);

        let (r_loc, th, m) = relative_position_encoding((0.5, 0.5), &right, (0.5, 0.7));
        assert_relative_eq!(r_loc, 0.0);
        assert_relative_eq!(th, 0.0);
        assert_eq!(m, 0.0);

        // Degenerate mesh point equal to the query: floored norm, unmasked.
        let (r_loc, th, m) = relative_position_encoding((0.5, 0.5), &right, (0.5, 0.5));
        assert_eq!((r_loc, th, m), (0.0, 0.0, 0.0));
    }

    proptest::proptest! {
        #[test]
        fn rpe_mask_iff_negative_projection(
            x in 0.05f64..0.95, y in 0.05f64..0.95,
            mx in 0.0f64..1.0, my in 0.0f64..1.0,
            k in 0usize..24,
        ) {
            let quad = build_quadrature_set();
            let d = quad.directions[k];
            let (r_local, _, mask) = relative_position_encoding((x, y), &d, (mx, my));
            proptest::prop_assert_eq!(mask < 0.0, r_local < 0.0);
        }
    }
}
