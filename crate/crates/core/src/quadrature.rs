//! Gauss-Legendre quadrature on the reference interval [-1, 1] and its
//! tensor product on the reference square.

/// 1D Gauss-Legendre rule; `n` points integrate polynomials up to degree 2n-1.
#[derive(Clone, Debug)]
pub struct QuadratureRule {
    pub points: Vec<f64>,
    pub weights: Vec<f64>,
}

impl QuadratureRule {
    /// Rule with the minimal point count that integrates `degree` exactly.
    pub fn with_degree(degree: usize) -> QuadratureRule {
        gauss_legendre(degree / 2 + 1)
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Tensor-product points and weights on [-1,1]^2, row-major in (xi, eta).
    pub fn tensor_square(&self) -> Vec<([f64; 2], f64)> {
        let mut out = Vec::with_capacity(self.len() * self.len());
        for (j, (&eta, &wj)) in self.points.iter().zip(&self.weights).enumerate() {
            let _ = j;
            for (&xi, &wi) in self.points.iter().zip(&self.weights) {
                out.push(([xi, eta], wi * wj));
            }
        }
        out
    }
}

/// Nodes as roots of P_n found by Newton iteration from the Chebyshev guess.
pub fn gauss_legendre(n: usize) -> QuadratureRule {
    assert!(n >= 1);
    let mut points = vec![0.0; n];
    let mut weights = vec![0.0; n];
    let m = (n + 1) / 2;
    for i in 0..m {
        let mut x = (std::f64::consts::PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
        let mut dp = 0.0;
        for _ in 0..100 {
            let (p, d) = legendre_and_derivative(n, x);
            dp = d;
            let dx = p / d;
            x -= dx;
            if dx.abs() < 1e-16 {
                break;
            }
        }
        let w = 2.0 / ((1.0 - x * x) * dp * dp);
        points[i] = -x;
        weights[i] = w;
        points[n - 1 - i] = x;
        weights[n - 1 - i] = w;
    }
    if n % 2 == 1 {
        points[n / 2] = 0.0;
    }
    QuadratureRule { points, weights }
}

fn legendre_and_derivative(n: usize, x: f64) -> (f64, f64) {
    let mut p0 = 1.0;
    let mut p1 = x;
    if n == 0 {
        return (1.0, 0.0);
    }
    for k in 1..n {
        let kf = k as f64;
        let p2 = ((2.0 * kf + 1.0) * x * p1 - kf * p0) / (kf + 1.0);
        p0 = p1;
        p1 = p2;
    }
    let d = n as f64 * (x * p1 - p0) / (x * x - 1.0);
    (p1, d)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn integrate(rule: &QuadratureRule, f: impl Fn(f64) -> f64) -> f64 {
        rule.points
            .iter()
            .zip(&rule.weights)
            .map(|(&x, &w)| w * f(x))
            .sum()
    }

    #[test]
    fn two_point_rule_is_exact_for_cubics() {
        let rule = gauss_legendre(2);
        assert!(integrate(&rule, |x| x * x * x).abs() < 1e-15);
        assert!((integrate(&rule, |x| x * x) - 2.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn rules_integrate_up_to_stated_degree() {
        for n in 1..=8 {
            let rule = gauss_legendre(n);
            assert!((integrate(&rule, |_| 1.0) - 2.0).abs() < 1e-14);
            for k in 1..=(2 * n - 1) {
                let exact = if k % 2 == 1 {
                    0.0
                } else {
                    2.0 / (k as f64 + 1.0)
                };
                let got = integrate(&rule, |x| x.powi(k as i32));
                assert!(
                    (got - exact).abs() < 1e-13,
                    "n={n} k={k} got={got} exact={exact}"
                );
            }
        }
    }

    #[test]
    fn with_degree_picks_minimal_rule() {
        assert_eq!(QuadratureRule::with_degree(3).len(), 2);
        assert_eq!(QuadratureRule::with_degree(7).len(), 4);
    }

    #[test]
    fn tensor_square_integrates_mixed_monomials() {
        let rule = gauss_legendre(3).tensor_square();
        let got: f64 = rule.iter().map(|&([x, y], w)| w * x * x * y * y).sum();
        assert!((got - 4.0 / 9.0).abs() < 1e-14);
    }
}
