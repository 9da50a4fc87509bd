//! Composite Simpson rules on uniform nodes.

/// `n` uniformly spaced nodes on `[a, b]`.
pub fn linspace(a: f64, b: f64, n: usize) -> Vec<f64> {
    match n {
        0 => Vec::new(),
        1 => vec![a],
        _ => {
            let h = (b - a) / (n - 1) as f64;
            (0..n).map(|i| if i == n - 1 { b } else { a + h * i as f64 }).collect()
        }
    }
}

/// Composite Simpson weights for `n` uniform nodes on `[a, b]`.
///
/// An even number of intervals uses the 1/3 rule throughout. An odd number
/// (at least 3) closes the last three intervals with the 3/8 rule. One
/// interval falls back to the trapezoid rule and a single node has weight 0.
pub fn simpson_weights(a: f64, b: f64, n: usize) -> Vec<f64> {
    if n < 2 {
        return vec![0.0; n];
    }
    let intervals = n - 1;
    let h = (b - a) / intervals as f64;
    let mut w = vec![0.0; n];
    if intervals == 1 {
        w[0] = h / 2.0;
        w[1] = h / 2.0;
        return w;
    }
    let simpson_end = if intervals.is_multiple_of(2) { intervals } else { intervals - 3 };
    for i in (0..simpson_end).step_by(2) {
        w[i] += h / 3.0;
        w[i + 1] += 4.0 * h / 3.0;
        w[i + 2] += h / 3.0;
    }
    if simpson_end < intervals {
        let s = simpson_end;
        let c = 3.0 * h / 8.0;
        w[s] += c;
        w[s + 1] += 3.0 * c;
        w[s + 2] += 3.0 * c;
        w[s + 3] += c;
    }
    w
}

#[cfg(test)]
mod tests {
    use super::*;

    fn integrate(f: impl Fn(f64) -> f64, a: f64, b: f64, n: usize) -> f64 {
        let x = linspace(a, b, n);
        simpson_weights(a, b, n).iter().zip(&x).map(|(w, x)| w * f(*x)).sum()
    }

    #[test]
    fn exact_for_cubics_with_even_and_odd_interval_counts() {
        let f = |x: f64| 1.0 - 2.0 * x + 3.0 * x * x - 0.5 * x * x * x;
        let exact = |x: f64| x - x * x + x * x * x - 0.125 * x.powi(4);
        for n in [3, 4, 5, 10, 11, 30] {
            let got = integrate(f, -1.0, 2.0, n);
            assert!((got - (exact(2.0) - exact(-1.0))).abs() < 1e-12, "n = {n}");
        }
    }

    #[test]
    fn converges_for_smooth_functions() {
        let exact = 2.0;
        let e1 = (integrate(f64::sin, 0.0, std::f64::consts::PI, 11) - exact).abs();
        let e2 = (integrate(f64::sin, 0.0, std::f64::consts::PI, 21) - exact).abs();
        assert!(e2 < e1 / 10.0);
    }

    #[test]
    fn degenerate_node_counts() {
        assert!(simpson_weights(0.0, 1.0, 1) == vec![0.0]);
        assert_eq!(simpson_weights(0.0, 1.0, 2), vec![0.5, 0.5]);
        assert!(linspace(0.0, 1.0, 0).is_empty());
    }
}
