use crate::graph::Var;
use crate::real::Real;

const FRAC_1_SQRT_2: f64 = std::f64::consts::FRAC_1_SQRT_2;
// 1 / sqrt(2*pi)
const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

/// Standard normal CDF.
pub fn normal_cdf<E: Real>(x: E) -> E {
    E::from_f64(0.5) * (E::ONE + (x * E::from_f64(FRAC_1_SQRT_2)).erf())
}

fn normal_pdf<E: Real>(x: E) -> E {
    E::from_f64(INV_SQRT_2PI) * (-(x * x) * E::from_f64(0.5)).exp()
}

/// Numerically stable `ln(1 + e^x)`.
pub fn softplus_scalar<E: Real>(x: E) -> E {
    x.max(E::ZERO) + (-x.abs()).exp().ln_1p()
}

pub fn sigmoid_scalar<E: Real>(x: E) -> E {
    if x >= E::ZERO {
        E::ONE / (E::ONE + (-x).exp())
    } else {
        let e = x.exp();
        e / (E::ONE + e)
    }
}

impl<'g, E: Real> Var<'g, E> {
    /// Exact GELU, `x·Φ(x)`.
    pub fn gelu(&self) -> Var<'g, E> {
        self.unary(
            |x| x * normal_cdf(x),
            |x, _| normal_cdf(x) + x * normal_pdf(x),
        )
    }

    pub fn relu(&self) -> Var<'g, E> {
        self.unary(
            |x| x.max(E::ZERO),
            |x, _| if x > E::ZERO { E::ONE } else { E::ZERO },
        )
    }

    pub fn softplus(&self) -> Var<'g, E> {
        self.unary(softplus_scalar, |x, _| sigmoid_scalar(x))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::Graph;
    use crate::tensor::Tensor;

    #[test]
    fn gelu_reference_points() {
        let g = Graph::<f64>::inference();
        let x = g.constant(Tensor::new(&[3], vec![0.0, 10.0, 1.0]).unwrap());
        let y = x.gelu();
        let y = y.value().data();
        assert_eq!(y[0], 0.0);
        assert!((y[1] - 10.0).abs() < 1e-6);
        // 1 * Phi(1) from a high-precision CDF table.
        assert!((y[2] - 0.841_344_746_068_542_9).abs() < 1e-12);
    }

    #[test]
    fn gelu_f32_matches_f64() {
        for &v in &[-3.0f64, -0.5, 0.25, 2.0] {
            let a = v * normal_cdf(v);
            let b = (v as f32) * normal_cdf(v as f32);
            assert!((a - b as f64).abs() < 1e-6);
        }
    }

    #[test]
    fn softplus_is_stable_for_large_inputs() {
        assert!((softplus_scalar(800.0f64) - 800.0).abs() < 1e-12);
        assert!(softplus_scalar(-800.0f64) >= 0.0);
        assert!((softplus_scalar(0.0f64) - std::f64::consts::LN_2).abs() < 1e-15);
    }
}
