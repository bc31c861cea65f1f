//! Derivative-free Nelder–Mead minimization.

#[derive(Debug, Clone)]
pub struct NelderMeadResult {
    pub x: Vec<f64>,
    pub value: f64,
    pub evaluations: usize,
    pub converged: bool,
}

const REFLECT: f64 = 1.0;
const EXPAND: f64 = 2.0;
const CONTRACT: f64 = 0.5;
const SHRINK: f64 = 0.5;

/// Minimize `f` from `start` with an axis-aligned initial simplex of edge
/// `step[i]`. Stops when every vertex lies within `tol[i]` of the best vertex
/// along every coordinate, or after `max_evals` evaluations.
pub fn nelder_mead<F>(f: &F, start: &[f64], step: &[f64], tol: &[f64], max_evals: usize) -> NelderMeadResult
where
    F: Fn(&[f64]) -> f64,
{
    let n = start.len();
    let mut evals = 0usize;
    let eval = |x: &[f64], evals: &mut usize| {
        *evals += 1;
        let v = f(x);
        if v.is_nan() {
            f64::INFINITY
        } else {
            v
        }
    };

    let mut simplex: Vec<(Vec<f64>, f64)> = Vec::with_capacity(n + 1);
    let v0 = eval(start, &mut evals);
    simplex.push((start.to_vec(), v0));
    for i in 0..n {
        let mut x = start.to_vec();
        x[i] += step[i];
        let v = eval(&x, &mut evals);
        simplex.push((x, v));
    }

    let mut converged = false;
    loop {
        // Stable sort keeps the accept/reject sequence deterministic on ties.
        simplex.sort_by(|a, b| a.1.total_cmp(&b.1));
        let best = simplex[0].0.clone();
        if simplex
            .iter()
            .all(|(x, _)| x.iter().zip(&best).zip(tol).all(|((a, b), t)| (a - b).abs() <= *t))
        {
            converged = true;
            break;
        }
        if evals >= max_evals {
            break;
        }

        let mut centroid = vec![0.0; n];
        for (x, _) in &simplex[..n] {
            for (c, v) in centroid.iter_mut().zip(x) {
                *c += v / n as f64;
            }
        }
        let worst = simplex[n].clone();
        let towards = |coef: f64| -> Vec<f64> {
            centroid
                .iter()
                .zip(&worst.0)
                .map(|(c, w)| c + coef * (c - w))
                .collect()
        };

        let xr = towards(REFLECT);
        let fr = eval(&xr, &mut evals);
        if fr < simplex[0].1 {
            let xe = towards(EXPAND);
            let fe = eval(&xe, &mut evals);
            simplex[n] = if fe < fr { (xe, fe) } else { (xr, fr) };
            continue;
        }
        if fr < simplex[n - 1].1 {
            simplex[n] = (xr, fr);
            continue;
        }
        let (xc, fc) = if fr < worst.1 {
            let x = towards(REFLECT * CONTRACT);
            let v = eval(&x, &mut evals);
            (x, v)
        } else {
            let x = towards(-CONTRACT);
            let v = eval(&x, &mut evals);
            (x, v)
        };
        if fc < fr.min(worst.1) {
            simplex[n] = (xc, fc);
            continue;
        }
        let b = simplex[0].0.clone();
        for vertex in simplex.iter_mut().skip(1) {
            let x: Vec<f64> = b.iter().zip(&vertex.0).map(|(b, v)| b + SHRINK * (v - b)).collect();
            let v = eval(&x, &mut evals);
            *vertex = (x, v);
        }
    }

    simplex.sort_by(|a, b| a.1.total_cmp(&b.1));
    let (x, value) = simplex.swap_remove(0);
    NelderMeadResult {
        x,
        value,
        evaluations: evals,
        converged,
    }
}
