//! Central finite-difference checks of tape gradients.

use rand::Rng;

use super::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::seeding;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheck {
    pub step: f64,
    /// Bound on `|analytic − numeric| / max(|analytic|, |numeric|, floor)`.
    pub tolerance: f64,
    pub floor: f64,
    pub seed: u64,
}

impl Default for GradCheck {
    fn default() -> Self {
        Self {
            step: 1e-5,
            tolerance: 1e-4,
            floor: 1e-6,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Probe {
    pub leaf: usize,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub relative_error: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct GradReport {
    pub probes: Vec<Probe>,
}

impl GradReport {
    pub fn worst(&self) -> f64 {
        self.probes.iter().map(|p| p.relative_error).fold(0.0, f64::max)
    }

    pub fn failures(&self, tolerance: f64) -> Vec<&Probe> {
        self.probes.iter().filter(|p| !(p.relative_error <= tolerance)).collect()
    }

    pub fn extend(&mut self, other: GradReport) {
        self.probes.extend(other.probes);
    }
}

impl GradCheck {
    /// Compares tape gradients of `f` with central differences at `probes`
    /// random coordinates of `leaves`. The output of `f` is reduced to a
    /// scalar through fixed random weights, so every element contributes.
    pub fn run<F>(&self, leaves: &[Tensor], probes: usize, f: F) -> Result<GradReport>
    where
        F: Fn(&mut Tape, &[Var]) -> Result<Var>,
    {
        if leaves.is_empty() {
            return Err(Error::Empty("gradient check without leaves".into()));
        }
        let eval = |tensors: &[Tensor]| -> Result<(Tape, Vec<Var>, Var)> {
            let mut tape = Tape::new();
            let vars: Vec<Var> = tensors.iter().map(|t| tape.leaf(t)).collect();
            let out = f(&mut tape, &vars)?;
            let shape = tape.shape(out).to_vec();
            let n: usize = shape.iter().product();
            let mut rng = seeding::keyed_rng(self.seed, &[0x9c, n as u64]);
            let weights = tape.constant(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect())?;
            let weighted = tape.mul(out, weights)?;
            let loss = tape.sum(weighted);
            Ok((tape, vars, loss))
        };
        let trainable: Vec<Tensor> = leaves.iter().map(|t| t.clone().trainable()).collect();
        let (tape, vars, loss) = eval(&trainable)?;
        let grads = tape.backward(loss)?;
        let mut rng = seeding::keyed_rng(self.seed, &[0x9d]);
        let mut report = GradReport::default();
        for _ in 0..probes {
            let leaf = rng.gen_range(0..leaves.len());
            let index = rng.gen_range(0..leaves[leaf].numel());
            let analytic = grads.get(vars[leaf]).map_or(0.0, |g| g[index]);
            let mut shifted = trainable.clone();
            let x = shifted[leaf].data()[index];
            shifted[leaf].data_mut()[index] = x + self.step;
            let (t, _, l) = eval(&shifted)?;
            let plus = t.value(l)[0];
            shifted[leaf].data_mut()[index] = x - self.step;
            let (t, _, l) = eval(&shifted)?;
            let minus = t.value(l)[0];
            let numeric = (plus - minus) / (2.0 * self.step);
            let scale = analytic.abs().max(numeric.abs()).max(self.floor);
            report.probes.push(Probe {
                leaf,
                index,
                analytic,
                numeric,
                relative_error: (analytic - numeric).abs() / scale,
            });
        }
        Ok(report)
    }
}
