//! Discrete Poisson equation over an arbitrary pixel region, solved with
//! Jacobi-preconditioned conjugate gradients.

use crate::error::{Error, Result};

/// Default residual bound, in pixel units.
pub const DEFAULT_TOLERANCE: f64 = 1e-4;

/// A Poisson problem on an `h×w` grid.
///
/// For every region pixel `p` the solution satisfies
/// `4·f(p) − Σ_{q∈N4(p)∩Ω} f(q) = Σ_{q∈N4(p)∖Ω} boundary(q) + guidance(p)`.
#[derive(Clone, Debug)]
pub struct PoissonProblem<'a> {
    pub h: usize,
    pub w: usize,
    pub region: &'a [bool],
    /// Divergence of the guidance field, read at region pixels.
    pub guidance: &'a [f64],
    /// Dirichlet values, read at pixels adjacent to the region.
    pub boundary: &'a [f64],
}

#[derive(Clone, Debug)]
pub struct PoissonSolution {
    /// Full-grid values: the solution inside the region, `boundary` elsewhere.
    pub values: Vec<f64>,
    pub iterations: usize,
    /// Final residual ∞-norm.
    pub residual: f64,
}

struct Indexed {
    pixels: Vec<usize>,
    /// Region-local index of each of the four neighbours, or the grid index
    /// of a boundary pixel.
    neighbours: Vec<[Neighbour; 4]>,
}

#[derive(Clone, Copy)]
enum Neighbour {
    Inside(usize),
    Boundary(usize),
}

fn index(p: &PoissonProblem) -> Result<Indexed> {
    let n = p.h * p.w;
    if p.region.len() != n || p.guidance.len() != n || p.boundary.len() != n {
        return Err(Error::Usage(format!("poisson: all maps must hold {}×{} values", p.h, p.w)));
    }
    let mut local = vec![usize::MAX; n];
    let pixels: Vec<usize> = (0..n).filter(|&i| p.region[i]).collect();
    if pixels.is_empty() {
        return Err(Error::Usage("poisson: empty region".into()));
    }
    for (k, &i) in pixels.iter().enumerate() {
        local[i] = k;
    }
    let mut neighbours = Vec::with_capacity(pixels.len());
    for &i in &pixels {
        let (y, x) = (i / p.w, i % p.w);
        if y == 0 || x == 0 || y + 1 == p.h || x + 1 == p.w {
            return Err(Error::Placement(format!("poisson: region pixel ({y}, {x}) touches the grid border")));
        }
        let nb = [i - p.w, i + p.w, i - 1, i + 1].map(|q| {
            if p.region[q] {
                Neighbour::Inside(local[q])
            } else {
                Neighbour::Boundary(q)
            }
        });
        neighbours.push(nb);
    }
    Ok(Indexed { pixels, neighbours })
}

fn apply(ix: &Indexed, v: &[f64], out: &mut [f64]) {
    for (k, nb) in ix.neighbours.iter().enumerate() {
        let mut s = 4.0 * v[k];
        for n in nb {
            if let Neighbour::Inside(j) = *n {
                s -= v[j];
            }
        }
        out[k] = s;
    }
}

fn inf_norm(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |m, x| m.max(x.abs()))
}

/// Solves to residual ∞-norm below `tol`, starting from `boundary` values
/// inside the region. Gives up after `10·|region|` iterations.
pub fn poisson_solve(p: &PoissonProblem, tol: f64) -> Result<PoissonSolution> {
    let ix = index(p)?;
    let m = ix.pixels.len();
    let rhs: Vec<f64> = ix
        .pixels
        .iter()
        .zip(&ix.neighbours)
        .map(|(&i, nb)| {
            let ring: f64 = nb
                .iter()
                .map(|n| match *n {
                    Neighbour::Boundary(q) => p.boundary[q],
                    Neighbour::Inside(_) => 0.0,
                })
                .sum();
            ring + p.guidance[i]
        })
        .collect();
    let mut x: Vec<f64> = ix.pixels.iter().map(|&i| p.boundary[i]).collect();
    let mut ax = vec![0.0; m];
    apply(&ix, &x, &mut ax);
    let mut r: Vec<f64> = rhs.iter().zip(&ax).map(|(b, a)| b - a).collect();
    // Jacobi preconditioner: the diagonal is 4 everywhere.
    let mut z: Vec<f64> = r.iter().map(|v| v / 4.0).collect();
    let mut d = z.clone();
    let mut rz: f64 = r.iter().zip(&z).map(|(a, b)| a * b).sum();
    let max_iter = 10 * m;
    let mut iterations = 0;
    let mut ad = vec![0.0; m];
    let mut residual = inf_norm(&r);
    while residual >= tol {
        if iterations >= max_iter {
            return Err(Error::Solver { iterations, residual });
        }
        apply(&ix, &d, &mut ad);
        let dad: f64 = d.iter().zip(&ad).map(|(a, b)| a * b).sum();
        if dad <= 0.0 {
            break;
        }
        let alpha = rz / dad;
        for k in 0..m {
            x[k] += alpha * d[k];
            r[k] -= alpha * ad[k];
        }
        iterations += 1;
        residual = inf_norm(&r);
        if residual < tol || iterations % 64 == 0 {
            // Guard against drift of the recurrence.
            apply(&ix, &x, &mut ax);
            for k in 0..m {
                r[k] = rhs[k] - ax[k];
            }
            residual = inf_norm(&r);
        }
        for k in 0..m {
            z[k] = r[k] / 4.0;
        }
        let rz_next: f64 = r.iter().zip(&z).map(|(a, b)| a * b).sum();
        let beta = rz_next / rz;
        rz = rz_next;
        for k in 0..m {
            d[k] = z[k] + beta * d[k];
        }
    }
    let mut values = p.boundary.to_vec();
    for (k, &i) in ix.pixels.iter().enumerate() {
        values[i] = x[k];
    }
    Ok(PoissonSolution { values, iterations, residual })
}

/// Residual ∞-norm of `values` for problem `p`, computed directly from the
/// equation.
pub fn residual_norm(p: &PoissonProblem, values: &[f64]) -> f64 {
    let mut worst: f64 = 0.0;
    for i in 0..p.h * p.w {
        if !p.region[i] {
            continue;
        }
        let mut lhs = 4.0 * values[i];
        let mut rhs = p.guidance[i];
        for q in [i - p.w, i + p.w, i - 1, i + 1] {
            if p.region[q] {
                lhs -= values[q];
            } else {
                rhs += p.boundary[q];
            }
        }
        worst = worst.max((lhs - rhs).abs());
    }
    worst
}

/// `4·s(p) − Σ s(q)` over the four neighbours, clamping at the grid edge.
pub fn laplacian(src: &[f64], h: usize, w: usize) -> Vec<f64> {
    (0..h * w)
        .map(|i| {
            let (y, x) = (i / w, i % w);
            let at = |yy: usize, xx: usize| src[yy * w + xx];
            4.0 * src[i]
                - at(y.saturating_sub(1), x)
                - at((y + 1).min(h - 1), x)
                - at(y, x.saturating_sub(1))
                - at(y, (x + 1).min(w - 1))
        })
        .collect()
}
