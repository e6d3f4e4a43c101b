//! Central finite-difference gradient verification.
//!
//! `grad_check` is the independent oracle used by the test suites: it never
//! reads the tape's backward results to produce the numeric side, only to
//! produce the analytic side being checked.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{NumericsError, Result, Scalar, Tape, TensorRef};

/// Which coordinates of `x` to probe.
pub enum CoordSelection {
    /// Every coordinate (small tensors).
    All,
    /// A seeded random subset of distinct coordinates (large tensors).
    Random { count: usize, seed: u64 },
}

impl CoordSelection {
    fn pick(&self, numel: usize) -> Vec<usize> {
        match self {
            CoordSelection::All => (0..numel).collect(),
            CoordSelection::Random { count, seed } => {
                if *count >= numel {
                    return (0..numel).collect();
                }
                let mut rng = ChaCha8Rng::seed_from_u64(*seed);
                let mut picked = Vec::with_capacity(*count);
                while picked.len() < *count {
                    let i = rng.gen_range(0..numel);
                    if !picked.contains(&i) {
                        picked.push(i);
                    }
                }
                picked
            }
        }
    }
}

/// Compare the tape's analytic gradient of `f` at `x` against central finite
/// differences `(f(x + h e_i) - f(x - h e_i)) / 2h`, returning the worst
/// relative error with denominator `max(|analytic|, |numeric|, 1e-8)`.
///
/// `f` must be deterministic; two initial evaluations that disagree bitwise
/// (an active dropout, for instance) are rejected.
pub fn grad_check<S, F>(
    mut f: F,
    x: &[S],
    shape: &[usize],
    h: S,
    coords: &CoordSelection,
) -> Result<f64>
where
    S: Scalar,
    F: FnMut(&mut Tape<S>, TensorRef) -> Result<TensorRef>,
{
    let eval = |f: &mut F, data: &[S]| -> Result<S> {
        let mut tape: Tape<S> = Tape::new();
        let xr = tape.input(data.to_vec(), shape)?;
        let out = f(&mut tape, xr)?;
        tape.scalar_value(out)
    };

    let v0 = eval(&mut f, x)?;
    let v1 = eval(&mut f, x)?;
    if v0.to_f64().to_bits() != v1.to_f64().to_bits() {
        return Err(NumericsError::NonDeterministic);
    }

    // Analytic gradient via the tape.
    let mut tape: Tape<S> = Tape::new();
    let xr = tape.variable(x.to_vec(), shape)?;
    let out = f(&mut tape, xr)?;
    tape.backward(out)?;
    let analytic = tape.grad(xr).expect("variable leaf always has a gradient after backward").to_vec();

    let h64 = h.to_f64();
    let mut worst = 0.0f64;
    for i in coords.pick(x.len()) {
        let mut plus = x.to_vec();
        plus[i] = plus[i] + h;
        let mut minus = x.to_vec();
        minus[i] = minus[i] - h;
        let fp = eval(&mut f, &plus)?.to_f64();
        let fm = eval(&mut f, &minus)?.to_f64();
        let numeric = (fp - fm) / (2.0 * h64);
        let a = analytic[i].to_f64();
        let denom = a.abs().max(numeric.abs()).max(1e-8);
        let rel = (a - numeric).abs() / denom;
        if rel > worst {
            worst = rel;
        }
    }
    Ok(worst)
}
