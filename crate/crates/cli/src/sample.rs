//! Line sampling of DG fields for the diagnostic plots.

use twophase_core::dgspace::DgFunction;
use twophase_core::error::CoreError;
use twophase_core::Point;

/// Endpoints of the benchmark sampling line through the lens region.
pub const LENS_LINE_A: Point = [0.25, 0.65];
pub const LENS_LINE_B: Point = [0.775, 0.39];

#[derive(Clone, Debug)]
pub struct LineSample {
    pub sigma: Vec<f64>,
    pub points: Vec<Point>,
    pub values: Vec<f64>,
}

/// Sample a field at n uniformly spaced parameters along the segment a-b.
pub fn line_sample(
    u: &DgFunction,
    field: usize,
    a: Point,
    b: Point,
    n: usize,
) -> Result<LineSample, CoreError> {
    assert!(n >= 2);
    let mesh = &u.space.mesh;
    let mut out = LineSample {
        sigma: Vec::with_capacity(n),
        points: Vec::with_capacity(n),
        values: Vec::with_capacity(n),
    };
    for j in 0..n {
        let sigma = j as f64 / (n - 1) as f64;
        let x = [
            (1.0 - sigma) * a[0] + sigma * b[0],
            (1.0 - sigma) * a[1] + sigma * b[1],
        ];
        let e = mesh.locate(x).ok_or_else(|| {
            CoreError::Config(format!("sample point ({}, {}) outside the domain", x[0], x[1]))
        })?;
        let xi = mesh.element(e).to_reference(x);
        out.sigma.push(sigma);
        out.points.push(x);
        out.values.push(u.eval(e, field, xi));
    }
    Ok(out)
}

/// Smallest sigma whose sampled value exceeds the threshold.
pub fn front_position(sample: &LineSample, threshold: f64) -> Option<f64> {
    sample
        .sigma
        .iter()
        .zip(&sample.values)
        .find(|(_, &v)| v > threshold)
        .map(|(&s, _)| s)
}

/// Largest absolute difference between the sample and its mirror image about
/// the vertical axis x = x0 (sampling the mirrored points directly).
pub fn mirror_asymmetry(
    u: &DgFunction,
    field: usize,
    y: f64,
    x0: f64,
    half_width: f64,
    n: usize,
) -> Result<f64, CoreError> {
    let left = line_sample(u, field, [x0 - half_width, y], [x0, y], n)?;
    let right = line_sample(u, field, [x0 + half_width, y], [x0, y], n)?;
    Ok(left
        .values
        .iter()
        .zip(&right.values)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max))
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::Arc;
    use twophase_core::dgspace::DgSpace;
    use twophase_core::mesh::Mesh;

    #[test]
    fn endpoints_and_midpoint() {
        let mesh = Arc::new(Mesh::build_macro(10, 6, (0.9, 0.65), 3).unwrap());
        let space = Arc::new(DgSpace::uniform(mesh, 1, 1));
        let mut u = DgFunction::zeros(space);
        u.project_analytic(0, |x| x[0] + x[1]);
        let s = line_sample(&u, 0, LENS_LINE_A, LENS_LINE_B, 3).unwrap();
        assert_eq!(s.points[0], [0.25, 0.65]);
        assert_eq!(s.points[2], [0.775, 0.39]);
        assert!((s.points[1][0] - 0.5125).abs() < 1e-14);
        assert!((s.points[1][1] - 0.52).abs() < 1e-14);
        for (p, v) in s.points.iter().zip(&s.values) {
            assert!((v - (p[0] + p[1])).abs() < 1e-11);
        }
    }

    #[test]
    fn outside_domain_is_an_error() {
        let mesh = Arc::new(Mesh::build_macro(2, 2, (1.0, 1.0), 3).unwrap());
        let space = Arc::new(DgSpace::uniform(mesh, 1, 1));
        let u = DgFunction::zeros(space);
        assert!(line_sample(&u, 0, [0.5, 0.5], [1.5, 0.5], 8).is_err());
    }

    #[test]
    fn front_detection() {
        let mesh = Arc::new(Mesh::build_macro(10, 1, (1.0, 0.1), 3).unwrap());
        let space = Arc::new(DgSpace::uniform(mesh, 1, 1));
        let mut u = DgFunction::zeros(space);
        u.project_analytic(0, |x| if x[0] > 0.6 { 1.0 } else { 0.0 });
        let s = line_sample(&u, 0, [0.0, 0.05], [1.0, 0.05], 101).unwrap();
        let front = front_position(&s, 0.05).unwrap();
        assert!((front - 0.6).abs() < 0.05, "front at {front}");
        assert!(front_position(&s, 2.0).is_none());
    }
}
