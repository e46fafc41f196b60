//! Powell's direction-set method with a grid-then-golden-section line
//! search suited to piecewise-constant objectives.

use serde::{Deserialize, Serialize};

use super::FusionError;

const GOLDEN: f64 = 0.618_033_988_749_894_9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PowellOptions {
    /// Stop once a full cycle improves the objective by less than this.
    pub tolerance: f64,
    pub max_iterations: usize,
    /// Each line search covers `t ∈ [-B, B]` along a unit direction.
    pub bracket_bound: f64,
    /// Golden-section refinement stops below this interval width.
    pub min_step: f64,
    /// Grid points per side; spacing grows quadratically away from zero.
    pub grid_points: usize,
}

impl Default for PowellOptions {
    fn default() -> Self {
        Self {
            tolerance: 1e-9,
            max_iterations: 50,
            bracket_bound: 10.0,
            min_step: 1e-4,
            grid_points: 40,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PowellResult {
    pub x: Vec<f64>,
    pub value: f64,
    pub iterations: usize,
    pub evaluations: usize,
    /// Point and objective at the start and after every cycle.
    pub trajectory: Vec<(Vec<f64>, f64)>,
}

struct Counted<F> {
    f: F,
    evaluations: usize,
}

impl<F: FnMut(&[f64]) -> f64> Counted<F> {
    fn eval(&mut self, x: &[f64]) -> Result<f64, FusionError> {
        self.evaluations += 1;
        let v = (self.f)(x);
        if v.is_finite() {
            Ok(v)
        } else {
            Err(FusionError::NonFinite(x.to_vec()))
        }
    }
}

fn along(x: &[f64], d: &[f64], t: f64) -> Vec<f64> {
    x.iter().zip(d).map(|(a, b)| a + t * b).collect()
}

/// Minimizes `t ↦ f(x + t·d)` over `[-B, B]`; returns `(t, value)` with
/// `value ≤ f0 = f(x)`.
///
/// The grid is scanned first. When several adjacent grid points share the
/// best value the middle of that flat stretch is taken; an isolated best
/// point is refined by golden-section search between its neighbours.
fn line_search<F: FnMut(&[f64]) -> f64>(
    f: &mut Counted<F>,
    x: &[f64],
    d: &[f64],
    f0: f64,
    opts: &PowellOptions,
) -> Result<(f64, f64), FusionError> {
    let k = opts.grid_points.max(1);
    let b = opts.bracket_bound;
    let mut ts: Vec<f64> = (1..=k).rev().map(|i| -b * (i as f64 / k as f64).powi(2)).collect();
    ts.push(0.0);
    ts.extend((1..=k).map(|i| b * (i as f64 / k as f64).powi(2)));
    let mut vals = Vec::with_capacity(ts.len());
    for &t in &ts {
        vals.push(if t == 0.0 { f0 } else { f.eval(&along(x, d, t))? });
    }
    let best = vals.iter().copied().fold(f64::INFINITY, f64::min);

    // Longest run of grid points at the best value; ties prefer the run
    // nearest to t = 0.
    let zero = k;
    let mut run: Option<(usize, usize)> = None;
    let mut i = 0;
    while i < vals.len() {
        if vals[i] != best {
            i += 1;
            continue;
        }
        let start = i;
        while i + 1 < vals.len() && vals[i + 1] == best {
            i += 1;
        }
        let cand = (start, i);
        let dist = |(s, e): (usize, usize)| {
            if (s..=e).contains(&zero) {
                0
            } else {
                s.abs_diff(zero).min(e.abs_diff(zero))
            }
        };
        run = match run {
            Some(r) if r.1 - r.0 > cand.1 - cand.0 => Some(r),
            Some(r) if r.1 - r.0 == cand.1 - cand.0 && dist(r) <= dist(cand) => Some(r),
            _ => Some(cand),
        };
        i += 1;
    }
    let (s, e) = run.expect("grid has a minimum");
    if e > s {
        let mid = 0.5 * (ts[s] + ts[e]);
        let v = if mid == 0.0 { f0 } else { f.eval(&along(x, d, mid))? };
        if v <= best {
            return Ok((mid, v));
        }
        let m = (s + e) / 2;
        return Ok((ts[m], vals[m]));
    }

    let (mut lo, mut hi) = (ts[s.saturating_sub(1)], ts[(s + 1).min(ts.len() - 1)]);
    let (mut best_t, mut best_v) = (ts[s], best);
    let mut c = hi - GOLDEN * (hi - lo);
    let mut dd = lo + GOLDEN * (hi - lo);
    let mut fc = f.eval(&along(x, d, c))?;
    let mut fd = f.eval(&along(x, d, dd))?;
    while hi - lo > opts.min_step {
        if fc < best_v {
            (best_t, best_v) = (c, fc);
        }
        if fd < best_v {
            (best_t, best_v) = (dd, fd);
        }
        if fc <= fd {
            hi = dd;
            dd = c;
            fd = fc;
            c = hi - GOLDEN * (hi - lo);
            fc = f.eval(&along(x, d, c))?;
        } else {
            lo = c;
            c = dd;
            fc = fd;
            dd = lo + GOLDEN * (hi - lo);
            fd = f.eval(&along(x, d, dd))?;
        }
    }
    for (t, v) in [(c, fc), (dd, fd)] {
        if v < best_v {
            (best_t, best_v) = (t, v);
        }
    }
    Ok((best_t, best_v))
}

fn unit(v: &[f64]) -> Option<Vec<f64>> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    (n > 0.0 && n.is_finite()).then(|| v.iter().map(|x| x / n).collect())
}

/// Powell's method: repeated line minimizations along a direction set that
/// starts as the coordinate axes; after each cycle the direction of largest
/// decrease may be replaced by the cycle's net displacement.
pub fn powell_minimize<F>(objective: F, start: &[f64], opts: &PowellOptions) -> Result<PowellResult, FusionError>
where
    F: FnMut(&[f64]) -> f64,
{
    let n = start.len();
    let mut f = Counted {
        f: objective,
        evaluations: 0,
    };
    let mut x = start.to_vec();
    let mut fx = f.eval(&x)?;
    let mut trajectory = vec![(x.clone(), fx)];
    if n == 0 {
        return Ok(PowellResult {
            x,
            value: fx,
            iterations: 0,
            evaluations: f.evaluations,
            trajectory,
        });
    }
    let mut dirs: Vec<Vec<f64>> = (0..n)
        .map(|i| (0..n).map(|j| if i == j { 1.0 } else { 0.0 }).collect())
        .collect();
    let mut iterations = 0;
    while iterations < opts.max_iterations {
        iterations += 1;
        let (x0, f_start) = (x.clone(), fx);
        let (mut big, mut big_drop) = (0, 0.0);
        for (i, d) in dirs.iter().enumerate() {
            let before = fx;
            let (t, v) = line_search(&mut f, &x, d, fx, opts)?;
            x = along(&x, d, t);
            fx = v;
            if before - fx > big_drop {
                big_drop = before - fx;
                big = i;
            }
        }
        if f_start - fx < opts.tolerance {
            trajectory.push((x.clone(), fx));
            break;
        }
        let disp: Vec<f64> = x.iter().zip(&x0).map(|(a, b)| a - b).collect();
        let extrap: Vec<f64> = x.iter().zip(&x0).map(|(a, b)| 2.0 * a - b).collect();
        let fe = f.eval(&extrap)?;
        if fe < f_start {
            let t = 2.0 * (f_start - 2.0 * fx + fe) * (f_start - fx - big_drop).powi(2)
                - big_drop * (f_start - fe).powi(2);
            if t < 0.0 {
                if let Some(d) = unit(&disp) {
                    let (s, v) = line_search(&mut f, &x, &d, fx, opts)?;
                    x = along(&x, &d, s);
                    fx = v;
                    dirs[big] = dirs[n - 1].clone();
                    dirs[n - 1] = d;
                }
            }
        }
        trajectory.push((x.clone(), fx));
    }
    Ok(PowellResult {
        x,
        value: fx,
        iterations,
        evaluations: f.evaluations,
        trajectory,
    })
}
