//! Angular loss `arccos(p̂ · ĝ)` in radians, its gradient, and the
//! directional derivative of that gradient (for Hessian-vector products).

use std::ops::{Add, Div, Mul, Sub};

/// Predictions with a norm at or below this are degenerate.
pub const DEGENERATE_NORM: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossValue {
    /// Radians.
    pub loss: f64,
    pub grad: [f64; 3],
    /// The prediction was (numerically) zero: loss is π/2, gradient 0.
    pub degenerate: bool,
}

/// First-order dual number.
#[derive(Debug, Clone, Copy, PartialEq)]
pub(crate) struct Dual {
    pub v: f64,
    pub d: f64,
}

impl Add for Dual {
    type Output = Dual;
    fn add(self, o: Dual) -> Dual {
        Dual {
            v: self.v + o.v,
            d: self.d + o.d,
        }
    }
}

impl Sub for Dual {
    type Output = Dual;
    fn sub(self, o: Dual) -> Dual {
        Dual {
            v: self.v - o.v,
            d: self.d - o.d,
        }
    }
}

impl Mul for Dual {
    type Output = Dual;
    fn mul(self, o: Dual) -> Dual {
        Dual {
            v: self.v * o.v,
            d: self.d * o.v + self.v * o.d,
        }
    }
}

impl Div for Dual {
    type Output = Dual;
    fn div(self, o: Dual) -> Dual {
        Dual {
            v: self.v / o.v,
            d: (self.d * o.v - self.v * o.d) / (o.v * o.v),
        }
    }
}

pub(crate) trait Scalar: Copy + Add<Output = Self> + Sub<Output = Self> + Mul<Output = Self> + Div<Output = Self> {
    fn c(v: f64) -> Self;
    fn val(self) -> f64;
    fn sqrt(self) -> Self;
}

impl Scalar for f64 {
    fn c(v: f64) -> Self {
        v
    }
    fn val(self) -> f64 {
        self
    }
    fn sqrt(self) -> Self {
        f64::sqrt(self)
    }
}

impl Scalar for Dual {
    fn c(v: f64) -> Self {
        Dual { v, d: 0.0 }
    }
    fn val(self) -> f64 {
        self.v
    }
    fn sqrt(self) -> Self {
        let s = self.v.sqrt();
        Dual { v: s, d: self.d / (2.0 * s) }
    }
}

fn dot<S: Scalar>(a: [S; 3], b: [S; 3]) -> S {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

/// Gradient of the loss w.r.t. `p`: `-ĝ⊥ / (|p| |ĝ⊥|)` where `ĝ⊥` is the
/// component of the unit target orthogonal to `p`. `None` when `p` is
/// degenerate.
pub(crate) fn grad_generic<S: Scalar>(p: [S; 3], g: [f64; 3]) -> Option<[S; 3]> {
    let pn = dot(p, p).sqrt();
    if !(pn.val() > DEGENERATE_NORM) {
        return None;
    }
    let gl = (g[0] * g[0] + g[1] * g[1] + g[2] * g[2]).sqrt();
    let gh = g.map(|v| S::c(v / gl));
    let ph = p.map(|v| v / pn);
    let u = dot(ph, gh);
    let perp = [gh[0] - u * ph[0], gh[1] - u * ph[1], gh[2] - u * ph[2]];
    // second Gram-Schmidt pass keeps the result orthogonal when p ≈ g
    let r = dot(perp, ph);
    let perp = [perp[0] - r * ph[0], perp[1] - r * ph[1], perp[2] - r * ph[2]];
    let perp_n = dot(perp, perp).sqrt();
    if !(perp_n.val() > 1e-15) {
        return Some([S::c(0.0); 3]);
    }
    let scale = S::c(-1.0) / (pn * perp_n);
    Some(perp.map(|v| v * scale))
}

/// Loss value (clamped arccos of the normalised dot product) and gradient.
pub fn angular_loss_grad(p: [f64; 3], g: [f64; 3]) -> LossValue {
    match grad_generic(p, g) {
        None => LossValue {
            loss: std::f64::consts::FRAC_PI_2,
            grad: [0.0; 3],
            degenerate: true,
        },
        Some(grad) => LossValue {
            loss: angular_loss(p, g),
            grad,
            degenerate: false,
        },
    }
}

/// Loss only; π/2 for a degenerate prediction.
pub fn angular_loss(p: [f64; 3], g: [f64; 3]) -> f64 {
    let pn = dot(p, p).sqrt();
    if !(pn > DEGENERATE_NORM) {
        return std::f64::consts::FRAC_PI_2;
    }
    let gn = dot(g, g).sqrt();
    (dot(p, g) / (pn * gn)).clamp(-1.0, 1.0).acos()
}

/// Directional derivative of the gradient at `p` along `dp`.
pub(crate) fn grad_tangent(p: [f64; 3], dp: [f64; 3], g: [f64; 3]) -> [f64; 3] {
    let pd = [0, 1, 2].map(|k| Dual { v: p[k], d: dp[k] });
    match grad_generic(pd, g) {
        None => [0.0; 3],
        Some(d) => d.map(|x| x.d),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::f64::consts::FRAC_PI_2;

    #[test]
    fn examples() {
        let v = angular_loss_grad([2.0, 4.0, 6.0], [1.0, 2.0, 3.0]);
        assert_eq!(v.loss, 0.0);
        assert_eq!(v.grad, [0.0; 3]);
        let v = angular_loss_grad([1.0, 0.0, 0.0], [0.0, 1.0, 0.0]);
        assert!((v.loss - FRAC_PI_2).abs() < 1e-15);
        let v = angular_loss_grad([0.0, 1e-9, 0.0], [0.0, 1.0, 0.0]);
        assert!(v.degenerate && v.loss == FRAC_PI_2 && v.grad == [0.0; 3]);
    }

    fn vec3() -> impl Strategy<Value = [f64; 3]> {
        prop::array::uniform3(0.05f64..2.0)
    }

    proptest! {
        #[test]
        fn gradient_matches_central_differences(p in vec3(), g in vec3()) {
            prop_assume!(angular_loss(p, g) > 1e-3);
            let v = angular_loss_grad(p, g);
            let h = 1e-6;
            for k in 0..3 {
                let (mut a, mut b) = (p, p);
                a[k] += h;
                b[k] -= h;
                let fd = (angular_loss(a, g) - angular_loss(b, g)) / (2.0 * h);
                prop_assert!((fd - v.grad[k]).abs() <= 1e-4 * fd.abs().max(v.grad[k].abs()).max(1e-3), "{} vs {}", fd, v.grad[k]);
            }
        }

        #[test]
        fn gradient_is_orthogonal_to_prediction(p in vec3(), g in vec3()) {
            let v = angular_loss_grad(p, g);
            let d = v.grad[0] * p[0] + v.grad[1] * p[1] + v.grad[2] * p[2];
            let scale = (v.grad.iter().map(|x| x * x).sum::<f64>()).sqrt() * (p.iter().map(|x| x * x).sum::<f64>()).sqrt();
            prop_assert!(d.abs() <= 4.0 * f64::EPSILON * scale.max(f64::MIN_POSITIVE));
        }

        #[test]
        fn loss_is_scale_invariant(p in vec3(), g in vec3(), s in 0.1f64..10.0) {
            let a = angular_loss(p, g);
            prop_assert!((a - angular_loss(p.map(|v| v * s), g)).abs() < 1e-12);
            prop_assert!((a - angular_loss(p, g.map(|v| v * s))).abs() < 1e-12);
        }

        #[test]
        fn tangent_matches_gradient_differences(p in vec3(), g in vec3(), dp in prop::array::uniform3(-1.0f64..1.0)) {
            prop_assume!(angular_loss(p, g) > 1e-2);
            let t = grad_tangent(p, dp, g);
            let h = 1e-6;
            let a = angular_loss_grad([0, 1, 2].map(|k| p[k] + h * dp[k]), g).grad;
            let b = angular_loss_grad([0, 1, 2].map(|k| p[k] - h * dp[k]), g).grad;
            for k in 0..3 {
                let fd = (a[k] - b[k]) / (2.0 * h);
                prop_assert!((fd - t[k]).abs() <= 1e-4 * fd.abs().max(t[k].abs()).max(1e-2), "{} vs {}", fd, t[k]);
            }
        }
    }
}
