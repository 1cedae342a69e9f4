//! Two-parameter linear quantile regression (`y ~ a + b x`) under the pinball loss.

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Line {
    pub intercept: f64,
    pub slope: f64,
}

impl Line {
    pub fn eval(&self, x: f64) -> f64 {
        self.intercept + self.slope * x
    }
}

/// Pinball (check) loss of residual `r` at level `q`.
pub fn pinball(r: f64, q: f64) -> f64 {
    if r >= 0.0 {
        q * r
    } else {
        (q - 1.0) * r
    }
}

pub fn pinball_loss(xs: &[f64], ys: &[f64], line: Line, q: f64) -> f64 {
    xs.iter()
        .zip(ys)
        .map(|(&x, &y)| pinball(y - line.eval(x), q))
        .sum()
}

/// Lower `q`-quantile of `values`; minimizes `sum pinball(v - a, q)` over `a`.
fn quantile_of(values: &mut [f64], q: f64) -> f64 {
    let n = values.len();
    let k = ((q * n as f64).ceil() as usize).clamp(1, n) - 1;
    let (_, v, _) = values.select_nth_unstable_by(k, f64::total_cmp);
    *v
}

/// Best intercept and resulting loss for a fixed slope.
fn profile(xs: &[f64], ys: &[f64], slope: f64, q: f64, scratch: &mut Vec<f64>) -> (f64, f64) {
    scratch.clear();
    scratch.extend(xs.iter().zip(ys).map(|(&x, &y)| y - slope * x));
    let a = quantile_of(scratch, q);
    let loss = pinball_loss(
        xs,
        ys,
        Line {
            intercept: a,
            slope,
        },
        q,
    );
    (a, loss)
}

/// Fits the `q`-quantile regression line.
///
/// The loss profiled over the intercept is convex and piecewise linear in the
/// slope, with breakpoints at pairwise slopes of the data. The minimum is
/// bracketed by the extreme pairwise slopes of the sorted sample and located
/// by golden-section search down to a relative width of 1e-13.
pub fn fit(xs: &[f64], ys: &[f64], q: f64) -> Result<Line> {
    if xs.len() != ys.len() {
        return Err(Error::Fit("x and y lengths differ".into()));
    }
    if !(q > 0.0 && q < 1.0) {
        return Err(Error::Fit(format!("quantile level {q} outside (0, 1)")));
    }
    if xs.len() < 2 {
        return Err(Error::Fit(format!("need at least 2 points, got {}", xs.len())));
    }
    let (xmin, xmax) = xs
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &x| (lo.min(x), hi.max(x)));
    if !(xmax - xmin > 1e-12 * xmax.abs().max(1.0)) {
        return Err(Error::Fit("all points share one abscissa".into()));
    }

    // Extreme slopes between neighbouring abscissae bound every pairwise slope.
    let mut order: Vec<usize> = (0..xs.len()).collect();
    order.sort_by(|&i, &j| xs[i].total_cmp(&xs[j]));
    let mut groups: Vec<(f64, f64, f64)> = Vec::new();
    for &i in &order {
        match groups.last_mut() {
            Some(g) if g.0 == xs[i] => {
                g.1 = g.1.min(ys[i]);
                g.2 = g.2.max(ys[i]);
            }
            _ => groups.push((xs[i], ys[i], ys[i])),
        }
    }
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for w in groups.windows(2) {
        let dx = w[1].0 - w[0].0;
        lo = lo.min((w[1].1 - w[0].2) / dx);
        hi = hi.max((w[1].2 - w[0].1) / dx);
    }
    let mut scratch = Vec::with_capacity(xs.len());
    if lo == hi {
        let (a, _) = profile(xs, ys, lo, q, &mut scratch);
        return Ok(Line {
            intercept: a,
            slope: lo,
        });
    }

    let inv_phi = (5f64.sqrt() - 1.0) / 2.0;
    let (mut a, mut b) = (lo, hi);
    let mut c = b - inv_phi * (b - a);
    let mut d = a + inv_phi * (b - a);
    let mut fc = profile(xs, ys, c, q, &mut scratch).1;
    let mut fd = profile(xs, ys, d, q, &mut scratch).1;
    let scale = lo.abs().max(hi.abs()).max(1e-300);
    for _ in 0..400 {
        if (b - a) <= 1e-13 * scale {
            break;
        }
        if fc <= fd {
            b = d;
            d = c;
            fd = fc;
            c = b - inv_phi * (b - a);
            fc = profile(xs, ys, c, q, &mut scratch).1;
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + inv_phi * (b - a);
            fd = profile(xs, ys, d, q, &mut scratch).1;
        }
    }
    let slope = 0.5 * (a + b);
    let (intercept, _) = profile(xs, ys, slope, q, &mut scratch);
    Ok(Line { intercept, slope })
}

/// Ordinary least squares, used as a reference for noiseless data.
pub fn ols(xs: &[f64], ys: &[f64]) -> Result<Line> {
    let n = xs.len() as f64;
    if xs.len() < 2 || xs.len() != ys.len() {
        return Err(Error::Fit("need at least 2 paired points".into()));
    }
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    if sxx <= 0.0 {
        return Err(Error::Fit("all points share one abscissa".into()));
    }
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let slope = sxy / sxx;
    Ok(Line {
        intercept: my - slope * mx,
        slope,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    /// The optimum of the LP is attained by a line through two data points.
    fn brute_force(xs: &[f64], ys: &[f64], q: f64) -> f64 {
        let mut best = f64::INFINITY;
        for i in 0..xs.len() {
            for j in 0..xs.len() {
                if xs[i] == xs[j] {
                    continue;
                }
                let slope = (ys[j] - ys[i]) / (xs[j] - xs[i]);
                let line = Line {
                    intercept: ys[i] - slope * xs[i],
                    slope,
                };
                best = best.min(pinball_loss(xs, ys, line, q));
            }
        }
        best
    }

    #[test]
    fn recovers_noiseless_congested_branch() {
        let xs: Vec<f64> = (0..50).map(|i| 2000.0 + 80.0 * i as f64).collect();
        let ys: Vec<f64> = xs.iter().map(|x| 21.23 * (7200.0 - x)).collect();
        for q in [0.1, 0.5, 0.9] {
            let line = fit(&xs, &ys, q).unwrap();
            assert!((line.slope + 21.23).abs() < 1e-9, "{line:?}");
            assert!((line.intercept - 152_856.0).abs() < 1e-5, "{line:?}");
        }
    }

    #[test]
    fn median_on_line_equals_ols() {
        let xs: Vec<f64> = (0..20).map(|i| i as f64 * 0.7 + 3.0).collect();
        let ys: Vec<f64> = xs.iter().map(|x| -4.0 * x + 11.0).collect();
        let a = fit(&xs, &ys, 0.5).unwrap();
        let b = ols(&xs, &ys).unwrap();
        assert!((a.slope - b.slope).abs() < 1e-10);
        assert!((a.intercept - b.intercept).abs() < 1e-9);
    }

    #[test]
    fn degenerate_inputs() {
        assert!(fit(&[1.0, 1.0, 1.0], &[2.0, 3.0, 4.0], 0.5).is_err());
        assert!(fit(&[1.0], &[2.0], 0.5).is_err());
        assert!(fit(&[1.0, 2.0], &[2.0, 3.0], 1.5).is_err());
    }

    proptest! {
        #[test]
        fn matches_vertex_enumeration(
            pts in prop::collection::vec((0.0f64..100.0, -50.0f64..50.0), 3..14),
            q in 0.05f64..0.95,
        ) {
            let xs: Vec<f64> = pts.iter().map(|p| p.0).collect();
            let ys: Vec<f64> = pts.iter().map(|p| p.1).collect();
            prop_assume!(xs.iter().any(|&x| (x - xs[0]).abs() > 1e-3));
            let line = fit(&xs, &ys, q).unwrap();
            let got = pinball_loss(&xs, &ys, line, q);
            let best = brute_force(&xs, &ys, q);
            prop_assert!(got <= best + 1e-8 * best.abs().max(1.0), "got {got}, best {best}");
        }
    }
}
