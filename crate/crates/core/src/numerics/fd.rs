use super::graph::{Graph, Var};
use super::tensor::Tensor;
use crate::error::Result;

/// Central-difference gradient of a scalar function: `(f(x+h·e_i) − f(x−h·e_i)) / 2h`.
pub fn finite_diff_grad(f: impl Fn(&Tensor) -> f64, x: &Tensor, step: f64) -> Vec<f64> {
    let mut probe = x.clone();
    (0..x.numel())
        .map(|i| {
            let orig = probe.data()[i];
            probe.data_mut()[i] = orig + step;
            let up = f(&probe);
            probe.data_mut()[i] = orig - step;
            let down = f(&probe);
            probe.data_mut()[i] = orig;
            (up - down) / (2.0 * step)
        })
        .collect()
}

/// Relative error with denominator `max(|analytic|, |numeric|, 1e-6)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
}

/// Compares `backward` against central differences for every input of `build`.
///
/// `build` traces a scalar loss from the given leaf variables. Returns the worst
/// relative error over all input coordinates.
pub fn gradcheck<F>(build: F, inputs: &[Tensor], step: f64) -> Result<f64>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let loss = build(&mut g, &vars)?;
    g.backward(loss)?;

    let eval = |xs: &[Tensor]| -> f64 {
        let mut g = Graph::new();
        let vars: Vec<Var> = xs.iter().map(|t| g.constant(t.clone())).collect();
        let loss = build(&mut g, &vars).expect("forward succeeded once");
        g.value(loss).item()
    };

    let mut worst = 0.0f64;
    for (idx, input) in inputs.iter().enumerate() {
        let analytic = g
            .grad(vars[idx])
            .map(<[f64]>::to_vec)
            .unwrap_or_else(|| vec![0.0; input.numel()]);
        let numeric = finite_diff_grad(
            |probe| {
                let mut xs = inputs.to_vec();
                xs[idx] = probe.clone();
                eval(&xs)
            },
            input,
            step,
        );
        for (a, n) in analytic.iter().zip(&numeric) {
            worst = worst.max(relative_error(*a, *n));
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_has_unit_gradient() {
        let x = Tensor::new(&[2, 2], vec![0.1, -4.0, 2.5, 7.0]).unwrap();
        let g = finite_diff_grad(|t| t.data().iter().sum(), &x, 1e-4);
        for v in g {
            assert!((v - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn square_at_three() {
        let x = Tensor::scalar(3.0);
        let g = finite_diff_grad(|t| t.item() * t.item(), &x, 1e-4);
        assert!((g[0] - 6.0).abs() < 1e-6);
    }
}
