//! Box-constrained Nelder-Mead minimization for low-dimensional problems.

#[derive(Debug, Clone)]
pub struct NelderMead {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
    /// Initial simplex edge length per coordinate.
    pub step: Vec<f64>,
    /// Stop when the simplex function spread falls below `rel_tol * (1 + |f_best|)`.
    pub rel_tol: f64,
    /// ... and the simplex diameter (max-norm) falls below `x_tol`.
    pub x_tol: f64,
    pub max_evals: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Minimum {
    pub x: Vec<f64>,
    pub f: f64,
    pub evals: usize,
    pub converged: bool,
}

impl NelderMead {
    pub fn new(lower: Vec<f64>, upper: Vec<f64>) -> Self {
        let step = vec![1.0; lower.len()];
        Self {
            lower,
            upper,
            step,
            rel_tol: 1e-6,
            x_tol: 1e-3,
            max_evals: 500,
        }
    }

    fn project(&self, x: &mut [f64]) {
        for (i, v) in x.iter_mut().enumerate() {
            *v = v.clamp(self.lower[i], self.upper[i]);
        }
    }

    /// Minimizes `f` from `x0`; non-finite values count as `+inf`. The returned point
    /// is never worse than the (projected) start.
    pub fn minimize<F: FnMut(&[f64]) -> f64>(&self, mut f: F, x0: &[f64]) -> Minimum {
        let dim = x0.len();
        let mut evals = 0usize;
        let mut eval = |x: &[f64], evals: &mut usize| {
            *evals += 1;
            let v = f(x);
            if v.is_finite() {
                v
            } else {
                f64::INFINITY
            }
        };

        let mut start = x0.to_vec();
        self.project(&mut start);
        let mut simplex: Vec<(Vec<f64>, f64)> = Vec::with_capacity(dim + 1);
        let f0 = eval(&start, &mut evals);
        simplex.push((start.clone(), f0));
        for i in 0..dim {
            let mut p = start.clone();
            let room_up = self.upper[i] - p[i];
            let room_down = p[i] - self.lower[i];
            p[i] += if room_up >= self.step[i] || room_up >= room_down {
                self.step[i].min(room_up)
            } else {
                -self.step[i].min(room_down)
            };
            self.project(&mut p);
            let fp = eval(&p, &mut evals);
            simplex.push((p, fp));
        }

        let mut converged = false;
        while evals < self.max_evals {
            simplex.sort_by(|a, b| a.1.partial_cmp(&b.1).unwrap_or(std::cmp::Ordering::Equal));
            let best = simplex[0].1;
            let worst = simplex[dim].1;
            let diameter = simplex[1..]
                .iter()
                .map(|(p, _)| {
                    p.iter()
                        .zip(&simplex[0].0)
                        .fold(0.0f64, |m, (a, b)| m.max((a - b).abs()))
                })
                .fold(0.0f64, f64::max);
            if worst.is_finite()
                && (worst - best).abs() <= self.rel_tol * (1.0 + best.abs())
                && diameter <= self.x_tol
            {
                converged = true;
                break;
            }
            let centroid: Vec<f64> = (0..dim)
                .map(|j| simplex[..dim].iter().map(|(p, _)| p[j]).sum::<f64>() / dim as f64)
                .collect();
            let along = |t: f64| -> Vec<f64> {
                let mut p: Vec<f64> = (0..dim)
                    .map(|j| centroid[j] + t * (simplex[dim].0[j] - centroid[j]))
                    .collect();
                self.project(&mut p);
                p
            };

            let xr = along(-1.0);
            let fr = eval(&xr, &mut evals);
            if fr < simplex[0].1 {
                let xe = along(-2.0);
                let fe = eval(&xe, &mut evals);
                simplex[dim] = if fe < fr { (xe, fe) } else { (xr, fr) };
                continue;
            }
            if fr < simplex[dim - 1].1 {
                simplex[dim] = (xr, fr);
                continue;
            }
            let (xc, fc) = if fr < simplex[dim].1 {
                let xc = along(-0.5);
                let fc = eval(&xc, &mut evals);
                (xc, fc)
            } else {
                let xc = along(0.5);
                let fc = eval(&xc, &mut evals);
                (xc, fc)
            };
            if fc < simplex[dim].1.min(fr) {
                simplex[dim] = (xc, fc);
                continue;
            }
            // shrink toward the best vertex
            let best_point = simplex[0].0.clone();
            for vertex in simplex.iter_mut().skip(1) {
                let mut p: Vec<f64> = (0..dim)
                    .map(|j| best_point[j] + 0.5 * (vertex.0[j] - best_point[j]))
                    .collect();
                self.project(&mut p);
                let fp = eval(&p, &mut evals);
                *vertex = (p, fp);
            }
        }
        simplex.sort_by(|a, b| a.1.partial_cmp(&b.1).unwrap_or(std::cmp::Ordering::Equal));
        let (x, fx) = simplex.swap_remove(0);
        if fx <= f0 {
            Minimum {
                x,
                f: fx,
                evals,
                converged,
            }
        } else {
            Minimum {
                x: start,
                f: f0,
                evals,
                converged,
            }
        }
    }

    /// Runs [`minimize`](Self::minimize) and restarts once from the optimum with a
    /// fresh simplex, sharing the evaluation budget.
    pub fn minimize_with_restart<F: FnMut(&[f64]) -> f64>(&self, mut f: F, x0: &[f64]) -> Minimum {
        let first = self.minimize(&mut f, x0);
        let remaining = self.max_evals.saturating_sub(first.evals);
        if remaining <= x0.len() + 1 {
            return first;
        }
        let mut again = self.clone();
        again.max_evals = remaining;
        again.step = self.step.iter().map(|s| s * 0.25).collect();
        let second = again.minimize(&mut f, &first.x);
        let evals = first.evals + second.evals;
        if second.f <= first.f {
            Minimum {
                evals,
                converged: second.converged,
                ..second
            }
        } else {
            Minimum { evals, ..first }
        }
    }
}
