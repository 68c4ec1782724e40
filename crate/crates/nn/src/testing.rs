//! Central finite-difference oracle used by gradient tests.
//!
//! Only compiled with the `testing` feature; nothing here is reachable from the
//! analytic backward pass it checks.

use crate::error::Result;
use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

pub const FD_STEP: f64 = 1e-5;
/// Gradients smaller than this are compared on an absolute scale.
pub const REL_FLOOR: f64 = 1e-5;

#[derive(Clone, Debug, Default)]
pub struct GradCheckReport {
    pub checked: usize,
    pub skipped_kinks: usize,
    pub max_rel_err: f64,
    /// (input, flat index, analytic, numeric) of the worst coordinate.
    pub worst: Option<(usize, usize, f64, f64)>,
}

impl GradCheckReport {
    pub fn merge(&mut self, other: &GradCheckReport) {
        self.checked += other.checked;
        self.skipped_kinks += other.skipped_kinks;
        if other.max_rel_err > self.max_rel_err {
            self.max_rel_err = other.max_rel_err;
            self.worst = other.worst;
        }
    }
}

pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

fn eval<F>(f: &F, inputs: &[Tensor]) -> Result<f64>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone(), true)).collect();
    let loss = f(&mut g, &vars)?;
    g.value(loss).item()
}

/// Outcome of checking one coordinate.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Coord {
    Checked { numeric: f64, rel_err: f64 },
    Kink,
}

/// Central difference of `f(delta)` around `delta = 0`, with kink detection.
///
/// Coordinates whose one-sided slopes disagree in a way that does not shrink
/// with the step are treated as kinks (ReLU or max-pool ties).
pub fn check_coordinate<F>(mut f: F, f0: f64, analytic: f64) -> Result<Coord>
where
    F: FnMut(f64) -> Result<f64>,
{
    let fp = f(FD_STEP)?;
    let fm = f(-FD_STEP)?;
    let numeric = (fp - fm) / (2.0 * FD_STEP);
    let scale = analytic.abs().max(numeric.abs()).max(REL_FLOOR);
    let spread = ((fp - f0) / FD_STEP - (f0 - fm) / FD_STEP).abs();
    if spread > 2e-4 * scale {
        // smooth curvature shrinks the one-sided spread linearly with the step
        let q = FD_STEP / 4.0;
        let fpq = f(q)?;
        let fmq = f(-q)?;
        let spread_q = ((fpq - f0) / q - (f0 - fmq) / q).abs();
        if (spread - 4.0 * spread_q).abs() > 0.5 * spread {
            return Ok(Coord::Kink);
        }
    }
    Ok(Coord::Checked {
        numeric,
        rel_err: rel_err(analytic, numeric),
    })
}

impl GradCheckReport {
    pub fn record(&mut self, input: usize, index: usize, analytic: f64, outcome: Coord) {
        match outcome {
            Coord::Kink => self.skipped_kinks += 1,
            Coord::Checked { numeric, rel_err } => {
                self.checked += 1;
                if rel_err > self.max_rel_err || self.worst.is_none() {
                    self.max_rel_err = self.max_rel_err.max(rel_err);
                    self.worst = Some((input, index, analytic, numeric));
                }
            }
        }
    }

    pub fn skip_fraction(&self) -> f64 {
        let total = self.checked + self.skipped_kinks;
        if total == 0 {
            0.0
        } else {
            self.skipped_kinks as f64 / total as f64
        }
    }
}

/// Compares analytic gradients of `f` w.r.t. every `inputs` element (or the
/// listed `coords`) with central differences.
pub fn check_gradients<F>(
    f: F,
    inputs: &[Tensor],
    coords: Option<&[(usize, usize)]>,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone(), true)).collect();
    let loss = f(&mut g, &vars)?;
    let f0 = g.value(loss).item()?;
    g.backward(loss)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(v, t)| g.grad(*v).map_or_else(|| vec![0.0; t.numel()], <[f64]>::to_vec))
        .collect();

    let all: Vec<(usize, usize)>;
    let coords = match coords {
        Some(c) => c,
        None => {
            all = inputs
                .iter()
                .enumerate()
                .flat_map(|(i, t)| (0..t.numel()).map(move |j| (i, j)))
                .collect();
            &all
        }
    };

    let mut report = GradCheckReport::default();
    let mut work: Vec<Tensor> = inputs.to_vec();
    for &(i, j) in coords {
        let orig = work[i].data()[j];
        let outcome = check_coordinate(
            |delta| {
                work[i].data_mut()[j] = orig + delta;
                let v = eval(&f, &work);
                work[i].data_mut()[j] = orig;
                v
            },
            f0,
            analytic[i][j],
        )?;
        report.record(i, j, analytic[i][j], outcome);
    }
    Ok(report)
}
