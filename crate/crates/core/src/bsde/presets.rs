//! Named generator and terminal-condition presets.
//!
//! Matrices are flat row-major slices. The `z` argument of a generator is the
//! `m×d` control flattened row-major, so `∇_z f` is `m×(m·d)`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "preset", rename_all = "snake_case")]
pub enum Generator {
    Zero,
    /// `f = A_x·xdel + A_y·ydel + A_z·vec(zdel) + c`.
    Linear {
        ax: Vec<f64>,
        ay: Vec<f64>,
        az: Vec<f64>,
        c: Vec<f64>,
        /// Declared constant overriding the one derived from the coefficients.
        k: Option<f64>,
    },
    /// Scalar `f = a·sin(Σ xdel + ydel + Σ zdel)`; requires `m = 1`.
    Sine {
        amplitude: f64,
    },
}

impl Generator {
    pub fn name(&self) -> &'static str {
        match self {
            Generator::Zero => "zero",
            Generator::Linear { .. } => "linear",
            Generator::Sine { .. } => "sine",
        }
    }

    /// Linear generator reading only the delayed `Y` (scalar case).
    pub fn linear_y(coefficient: f64) -> Self {
        Generator::Linear { ax: vec![0.0], ay: vec![coefficient], az: vec![0.0], c: vec![0.0], k: None }
    }

    /// Linear generator reading only the delayed `Z` (scalar case).
    pub fn linear_z(coefficient: f64) -> Self {
        Generator::Linear { ax: vec![0.0], ay: vec![0.0], az: vec![coefficient], c: vec![0.0], k: None }
    }

    pub fn validate(&self, m: usize, d: usize) -> Result<()> {
        match self {
            Generator::Zero => Ok(()),
            Generator::Linear { ax, ay, az, c, k } => {
                for (name, v, len) in [("x", ax, m * d), ("y", ay, m * m), ("z", az, m * m * d), ("c", c, m)] {
                    if v.len() != len {
                        return Err(Error::InvalidParameter(format!(
                            "linear generator coefficient '{name}' needs {len} entries, got {}",
                            v.len()
                        )));
                    }
                    if v.iter().any(|x| !x.is_finite()) {
                        return Err(Error::InvalidParameter(format!(
                            "linear generator coefficient '{name}' is not finite"
                        )));
                    }
                }
                if k.is_some_and(|k| !(k >= 0.0)) {
                    return Err(Error::InvalidParameter("declared K must be nonnegative".into()));
                }
                Ok(())
            }
            Generator::Sine { amplitude } => {
                if m != 1 {
                    return Err(Error::InvalidParameter(format!("sine generator is scalar, got m = {m}")));
                }
                if !amplitude.is_finite() {
                    return Err(Error::InvalidParameter("sine amplitude is not finite".into()));
                }
                Ok(())
            }
        }
    }

    /// The constant `K` with `|∇_x f|, |∇_y f|, |∇_z f| <= sqrt(K/3)`.
    pub fn lipschitz_k(&self, d: usize) -> f64 {
        let sq = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>();
        match self {
            Generator::Zero => 0.0,
            Generator::Linear { ax, ay, az, k, .. } => k.unwrap_or_else(|| 3.0 * sq(ax).max(sq(ay)).max(sq(az))),
            Generator::Sine { amplitude } => 3.0 * amplitude * amplitude * d as f64,
        }
    }

    pub fn eval(&self, _t: f64, x: &[f64], y: &[f64], z: &[f64], out: &mut [f64]) {
        match self {
            Generator::Zero => out.fill(0.0),
            Generator::Linear { ax, ay, az, c, .. } => {
                let m = out.len();
                for (i, o) in out.iter_mut().enumerate() {
                    let row = |a: &[f64], v: &[f64]| {
                        let w = a.len() / m;
                        a[i * w..(i + 1) * w].iter().zip(v).map(|(p, q)| p * q).sum::<f64>()
                    };
                    *o = row(ax, x) + row(ay, y) + row(az, z) + c[i];
                }
            }
            Generator::Sine { amplitude } => {
                let s: f64 = x.iter().sum::<f64>() + y[0] + z.iter().sum::<f64>();
                out[0] = amplitude * s.sin();
            }
        }
    }

    /// Writes `∇_x f` (`m×d`), `∇_y f` (`m×m`) and `∇_z f` (`m×md`).
    #[allow(clippy::too_many_arguments)]
    pub fn jacobians(&self, _t: f64, x: &[f64], y: &[f64], z: &[f64], jx: &mut [f64], jy: &mut [f64], jz: &mut [f64]) {
        match self {
            Generator::Zero => {
                jx.fill(0.0);
                jy.fill(0.0);
                jz.fill(0.0);
            }
            Generator::Linear { ax, ay, az, .. } => {
                jx.copy_from_slice(ax);
                jy.copy_from_slice(ay);
                jz.copy_from_slice(az);
            }
            Generator::Sine { amplitude } => {
                let s: f64 = x.iter().sum::<f64>() + y[0] + z.iter().sum::<f64>();
                let g = amplitude * s.cos();
                jx.fill(g);
                jy.fill(g);
                jz.fill(g);
            }
        }
    }

    /// `f(t, 0, 0, 0)`.
    pub fn at_zero(&self, t: f64, m: usize, d: usize) -> Vec<f64> {
        let mut out = vec![0.0; m];
        self.eval(t, &vec![0.0; d], &vec![0.0; m], &vec![0.0; m * d], &mut out);
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "preset", rename_all = "snake_case")]
pub enum Terminal {
    /// `g(x) = x` (`m = d`).
    Identity,
    /// `g(x) = |x|²` (`m = 1`).
    Square,
    Constant {
        value: Vec<f64>,
    },
    /// `g(x) = A x + c`.
    Linear {
        a: Vec<f64>,
        c: Vec<f64>,
    },
}

impl Terminal {
    pub fn name(&self) -> &'static str {
        match self {
            Terminal::Identity => "identity",
            Terminal::Square => "square",
            Terminal::Constant { .. } => "constant",
            Terminal::Linear { .. } => "linear",
        }
    }

    /// Output dimension `m` for forward dimension `d`.
    pub fn dim(&self, d: usize) -> usize {
        match self {
            Terminal::Identity => d,
            Terminal::Square => 1,
            Terminal::Constant { value } => value.len(),
            Terminal::Linear { c, .. } => c.len(),
        }
    }

    pub fn validate(&self, d: usize) -> Result<()> {
        let m = self.dim(d);
        if m == 0 {
            return Err(Error::InvalidParameter("terminal condition has zero dimension".into()));
        }
        if let Terminal::Linear { a, .. } = self {
            if a.len() != m * d {
                return Err(Error::InvalidParameter(format!(
                    "linear terminal matrix needs {} entries, got {}",
                    m * d,
                    a.len()
                )));
            }
        }
        Ok(())
    }

    pub fn eval(&self, x: &[f64], out: &mut [f64]) {
        match self {
            Terminal::Identity => out.copy_from_slice(x),
            Terminal::Square => out[0] = x.iter().map(|v| v * v).sum(),
            Terminal::Constant { value } => out.copy_from_slice(value),
            Terminal::Linear { a, c } => {
                let d = x.len();
                for (i, o) in out.iter_mut().enumerate() {
                    *o = c[i] + a[i * d..(i + 1) * d].iter().zip(x).map(|(p, q)| p * q).sum::<f64>();
                }
            }
        }
    }

    /// `∇g(x)` as a row-major `m×d` matrix.
    pub fn grad(&self, x: &[f64], out: &mut [f64]) {
        let d = x.len();
        match self {
            Terminal::Identity => {
                out.fill(0.0);
                for i in 0..d {
                    out[i * d + i] = 1.0;
                }
            }
            Terminal::Square => {
                for (o, v) in out.iter_mut().zip(x) {
                    *o = 2.0 * v;
                }
            }
            Terminal::Constant { .. } => out.fill(0.0),
            Terminal::Linear { a, .. } => out.copy_from_slice(a),
        }
    }
}
