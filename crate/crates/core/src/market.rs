//! Scenario generation: Heston and Black-Scholes path batches.
//!
//! A [`PathBatch`] is the finite sample space the optimizer works on:
//! per-scenario price paths of the hedging instruments plus the feature
//! paths fed to the policy networks, with uniform scenario weights.
//!
//! The Heston simulation samples the variance exactly from its noncentral
//! chi-squared transition and advances the spot with a piecewise-constant
//! variance log-Euler step; the second instrument is the idealized variance
//! swap, running integrated variance plus the remaining-horizon expectation
//! `L(t, v)`.

use ndarray::{Array1, Array3};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::io::{Read, Write};

use crate::rng::RngStream;
use crate::{Error, Result};

/// Trading dates t_k = k * T / n, k = 0..n.
#[derive(Clone, Copy, Debug, Serialize, Deserialize, PartialEq)]
pub struct TimeGrid {
    pub n_steps: usize,
    pub maturity: f64,
}

impl TimeGrid {
    pub fn new(n_steps: usize, maturity: f64) -> Result<Self> {
        if n_steps == 0 || !(maturity > 0.0) {
            return Err(Error::Domain(format!(
                "time grid needs n_steps >= 1 and maturity > 0, got {n_steps}, {maturity}"
            )));
        }
        Ok(Self { n_steps, maturity })
    }

    /// 30 trading days, daily rebalancing.
    pub fn daily_30d() -> Self {
        Self {
            n_steps: 30,
            maturity: 30.0 / 365.0,
        }
    }

    pub fn dt(&self) -> f64 {
        self.maturity / self.n_steps as f64
    }

    pub fn date(&self, k: usize) -> f64 {
        if k == self.n_steps {
            self.maturity
        } else {
            self.maturity * k as f64 / self.n_steps as f64
        }
    }
}

/// Heston model parameters: dS = sqrt(V) S dB, dV = a (b - V) dt + s sqrt(V) dW.
#[derive(Clone, Copy, Debug, Serialize, Deserialize, PartialEq)]
pub struct HestonParams {
    /// Mean-reversion speed per year.
    pub mean_reversion: f64,
    /// Long-run variance level.
    pub long_run_var: f64,
    /// Volatility of variance.
    pub vol_of_vol: f64,
    /// Correlation between spot and variance innovations.
    pub rho: f64,
    /// Initial variance.
    pub v0: f64,
    /// Initial spot.
    pub s0: f64,
}

impl HestonParams {
    /// The equity-market configuration used throughout the experiments:
    /// a=1, b=0.04, sigma=2, rho=-0.7, v0=0.04, s0=100.
    pub fn baseline() -> Self {
        Self {
            mean_reversion: 1.0,
            long_run_var: 0.04,
            vol_of_vol: 2.0,
            rho: -0.7,
            v0: 0.04,
            s0: 100.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.mean_reversion > 0.0)
            || !(self.long_run_var > 0.0)
            || !(self.vol_of_vol > 0.0)
            || !(self.v0 > 0.0)
            || !(self.s0 > 0.0)
        {
            return Err(Error::Domain(
                "heston params mean_reversion, long_run_var, vol_of_vol, v0, s0 must be > 0".into(),
            ));
        }
        if !(-1.0..=1.0).contains(&self.rho) {
            return Err(Error::Domain(format!("rho {} must be in [-1, 1]", self.rho)));
        }
        Ok(())
    }

    /// Degrees of freedom of the CIR transition, 4ab/sigma^2. The baseline
    /// parameters give 0.04 — far below the Feller bound, which the exact
    /// sampler must (and does) handle.
    pub fn cir_dof(&self) -> f64 {
        4.0 * self.mean_reversion * self.long_run_var / (self.vol_of_vol * self.vol_of_vol)
    }
}

/// Remaining-horizon part of the variance-swap price:
/// `L(t, v) = ((v - b)/a)(1 - e^{-a(T-t)}) + b (T-t)`.
///
/// The variance-swap price is the running integrated variance plus this
/// value; `L(T, v) = 0` so the terminal swap value is exactly the realized
/// integrated variance.
pub fn variance_swap_l(t: f64, v: f64, params: &HestonParams, maturity: f64) -> Result<f64> {
    if t > maturity || t < 0.0 {
        return Err(Error::Domain(format!(
            "variance swap time {t} outside [0, {maturity}]"
        )));
    }
    let tau = maturity - t;
    let a = params.mean_reversion;
    let b = params.long_run_var;
    Ok((v - b) / a * (1.0 - (-a * tau).exp()) + b * tau)
}

/// Derivative of `L(t, v)` in `v`: `(1 - e^{-a(T-t)})/a`.
pub fn variance_swap_l_dv(t: f64, params: &HestonParams, maturity: f64) -> f64 {
    let a = params.mean_reversion;
    (1.0 - (-a * (maturity - t)).exp()) / a
}

/// A finite scenario set: prices and features per path and step, with
/// per-path probabilities (uniform).
#[derive(Clone, Debug)]
pub struct PathBatch {
    /// Instrument mid-prices, shape (n_paths, n_steps + 1, d).
    pub prices: Array3<f64>,
    /// Policy features I_k, shape (n_paths, n_steps + 1, feature_dim).
    /// Row k is measurable with respect to the path up to step k.
    pub features: Array3<f64>,
    /// Per-path probability, sums to 1.
    pub weights: Array1<f64>,
    pub grid: TimeGrid,
    pub seed: u64,
}

impl PathBatch {
    pub fn n_paths(&self) -> usize {
        self.prices.shape()[0]
    }

    pub fn n_instruments(&self) -> usize {
        self.prices.shape()[2]
    }

    pub fn feature_dim(&self) -> usize {
        self.features.shape()[2]
    }

    pub fn terminal_prices(&self, instrument: usize) -> Array1<f64> {
        let last = self.grid.n_steps;
        self.prices
            .index_axis(ndarray::Axis(1), last)
            .column(instrument)
            .to_owned()
    }
}

/// Simulate a Heston batch with d = 2 instruments (spot, variance swap) and
/// features (log spot, instantaneous variance).
///
/// Scenario m draws from stream `(seed, stream_base + m)`, so batches are
/// identical no matter how path generation is sharded.
pub fn simulate_heston(
    params: &HestonParams,
    grid: &TimeGrid,
    n_paths: usize,
    seed: u64,
    stream_base: u64,
) -> Result<PathBatch> {
    simulate_heston_factors(&[*params], grid, n_paths, seed, stream_base)
}

/// Simulate `factors.len()` independent Heston models on a shared time grid.
/// Instruments are interleaved (spot_1, swap_1, spot_2, swap_2, ...), as are
/// the features (log spot_h, variance_h).
pub fn simulate_heston_factors(
    factors: &[HestonParams],
    grid: &TimeGrid,
    n_paths: usize,
    seed: u64,
    stream_base: u64,
) -> Result<PathBatch> {
    for p in factors {
        p.validate()?;
    }
    if n_paths == 0 {
        return Err(Error::Domain("n_paths must be >= 1".into()));
    }
    let n = grid.n_steps;
    let n_factors = factors.len();
    let d = 2 * n_factors;
    let dt = grid.dt();

    // Per-factor transition constants.
    struct Trans {
        decay: f64,     // e^{-a dt}
        c: f64,         // sigma^2 (1 - e^{-a dt}) / (4a)
        dof: f64,       // 4ab/sigma^2
        cond_var_a: f64, // V sigma^2/a (e^{-a dt} - e^{-2a dt})
        cond_var_b: f64, // b sigma^2/(2a) (1 - e^{-a dt})^2
        rho: f64,
        rho_perp: f64,
    }
    let trans: Vec<Trans> = factors
        .iter()
        .map(|p| {
            let a = p.mean_reversion;
            let decay = (-a * dt).exp();
            Trans {
                decay,
                c: p.vol_of_vol * p.vol_of_vol * (1.0 - decay) / (4.0 * a),
                dof: p.cir_dof(),
                cond_var_a: p.vol_of_vol * p.vol_of_vol / a * (decay - decay * decay),
                cond_var_b: p.long_run_var * p.vol_of_vol * p.vol_of_vol / (2.0 * a)
                    * (1.0 - decay)
                    * (1.0 - decay),
                rho: p.rho,
                rho_perp: (1.0 - p.rho * p.rho).sqrt(),
            }
        })
        .collect();

    let mut prices = Array3::zeros((n_paths, n + 1, d));
    let mut features = Array3::zeros((n_paths, n + 1, d));

    let price_rows = prices.as_slice_mut().expect("contiguous");
    let feat_rows = features.as_slice_mut().expect("contiguous");
    let row = (n + 1) * d;

    price_rows
        .par_chunks_mut(row)
        .zip(feat_rows.par_chunks_mut(row))
        .enumerate()
        .try_for_each(|(m, (price_row, feat_row))| -> Result<()> {
            let mut stream = RngStream::new(seed, stream_base + m as u64);
            let mut spot = vec![0.0; n_factors];
            let mut var = vec![0.0; n_factors];
            let mut int_var = vec![0.0; n_factors];
            for (h, p) in factors.iter().enumerate() {
                spot[h] = p.s0;
                var[h] = p.v0;
            }
            for k in 0..=n {
                let t = grid.date(k);
                for (h, p) in factors.iter().enumerate() {
                    let l = variance_swap_l(t, var[h], p, grid.maturity)?;
                    price_row[k * d + 2 * h] = spot[h];
                    price_row[k * d + 2 * h + 1] = int_var[h] + l;
                    feat_row[k * d + 2 * h] = spot[h].ln();
                    feat_row[k * d + 2 * h + 1] = var[h];
                }
                if k == n {
                    break;
                }
                for (h, tr) in trans.iter().enumerate() {
                    let v = var[h];
                    // exact CIR transition
                    let noncentrality = v * tr.decay / tr.c;
                    let v_next = tr.c * stream.noncentral_chisq(tr.dof, noncentrality)?;
                    // standardized variance innovation, clamped
                    let cond_mean = factors[h].long_run_var
                        + (v - factors[h].long_run_var) * tr.decay;
                    let cond_sd = (v * tr.cond_var_a + tr.cond_var_b).sqrt();
                    let z_v = if cond_sd > 0.0 {
                        ((v_next - cond_mean) / cond_sd).clamp(-6.0, 6.0)
                    } else {
                        0.0
                    };
                    let z_perp = stream.standard_normal();
                    let z = tr.rho * z_v + tr.rho_perp * z_perp;
                    // piecewise-constant-variance log-Euler spot step
                    spot[h] *= (-0.5 * v * dt + (v * dt).sqrt() * z).exp();
                    int_var[h] += v * dt; // left-endpoint sum
                    var[h] = v_next;
                }
            }
            Ok(())
        })?;

    Ok(PathBatch {
        prices,
        features,
        weights: Array1::from_elem(n_paths, 1.0 / n_paths as f64),
        grid: *grid,
        seed,
    })
}

/// Simulate a driftless lognormal (Black-Scholes) batch with d = 1 and
/// feature log S_k. Increments are exact.
pub fn simulate_black_scholes(
    sigma: f64,
    s0: f64,
    grid: &TimeGrid,
    n_paths: usize,
    seed: u64,
    stream_base: u64,
) -> Result<PathBatch> {
    if sigma < 0.0 || !(s0 > 0.0) {
        return Err(Error::Domain(format!(
            "black-scholes needs sigma >= 0 and s0 > 0, got {sigma}, {s0}"
        )));
    }
    if n_paths == 0 {
        return Err(Error::Domain("n_paths must be >= 1".into()));
    }
    let n = grid.n_steps;
    let dt = grid.dt();
    let drift = -0.5 * sigma * sigma * dt;
    let vol = sigma * dt.sqrt();

    let mut prices = Array3::zeros((n_paths, n + 1, 1));
    let mut features = Array3::zeros((n_paths, n + 1, 1));
    let price_rows = prices.as_slice_mut().expect("contiguous");
    let feat_rows = features.as_slice_mut().expect("contiguous");

    price_rows
        .par_chunks_mut(n + 1)
        .zip(feat_rows.par_chunks_mut(n + 1))
        .enumerate()
        .for_each(|(m, (price_row, feat_row))| {
            let mut stream = RngStream::new(seed, stream_base + m as u64);
            let mut log_s = s0.ln();
            for k in 0..=n {
                price_row[k] = log_s.exp();
                feat_row[k] = log_s;
                if k < n {
                    log_s += drift + vol * stream.standard_normal();
                }
            }
        });

    Ok(PathBatch {
        prices,
        features,
        weights: Array1::from_elem(n_paths, 1.0 / n_paths as f64),
        grid: *grid,
        seed,
    })
}

const BATCH_MAGIC: &[u8; 4] = b"DHPB";
const BATCH_VERSION: u32 = 1;

impl PathBatch {
    /// Write the batch in the versioned binary format
    /// (magic, version, n_paths, d, n_steps, feature_dim, seed, maturity,
    /// then prices, features and weights as little-endian f64).
    pub fn write_binary<W: Write>(&self, w: &mut W) -> Result<()> {
        w.write_all(BATCH_MAGIC)?;
        w.write_all(&BATCH_VERSION.to_le_bytes())?;
        w.write_all(&(self.n_paths() as u64).to_le_bytes())?;
        w.write_all(&(self.n_instruments() as u32).to_le_bytes())?;
        w.write_all(&(self.grid.n_steps as u32).to_le_bytes())?;
        w.write_all(&(self.feature_dim() as u32).to_le_bytes())?;
        w.write_all(&self.seed.to_le_bytes())?;
        w.write_all(&self.grid.maturity.to_le_bytes())?;
        for &x in self.prices.as_slice().expect("contiguous") {
            w.write_all(&x.to_le_bytes())?;
        }
        for &x in self.features.as_slice().expect("contiguous") {
            w.write_all(&x.to_le_bytes())?;
        }
        for &x in self.weights.as_slice().expect("contiguous") {
            w.write_all(&x.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_binary<R: Read>(r: &mut R) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != BATCH_MAGIC {
            return Err(Error::Domain("not a path batch file".into()));
        }
        let version = read_u32(r)?;
        if version != BATCH_VERSION {
            return Err(Error::Domain(format!("unsupported batch version {version}")));
        }
        let n_paths = read_u64(r)? as usize;
        let d = read_u32(r)? as usize;
        let n_steps = read_u32(r)? as usize;
        let feature_dim = read_u32(r)? as usize;
        let seed = read_u64(r)?;
        let maturity = read_f64(r)?;
        let prices = read_array3(r, (n_paths, n_steps + 1, d))?;
        let features = read_array3(r, (n_paths, n_steps + 1, feature_dim))?;
        let mut weights = Array1::zeros(n_paths);
        for x in weights.iter_mut() {
            *x = read_f64(r)?;
        }
        Ok(Self {
            prices,
            features,
            weights,
            grid: TimeGrid { n_steps, maturity },
            seed,
        })
    }

    /// CSV export for small batches: one row per (path, step) with prices
    /// then features. Header comment carries the seed.
    pub fn write_csv<W: Write>(&self, w: &mut W) -> Result<()> {
        writeln!(w, "# seed={} n_paths={} n_steps={}", self.seed, self.n_paths(), self.grid.n_steps)?;
        write!(w, "path,step,t")?;
        for i in 0..self.n_instruments() {
            write!(w, ",price{}", i + 1)?;
        }
        for i in 0..self.feature_dim() {
            write!(w, ",feature{}", i + 1)?;
        }
        writeln!(w)?;
        for m in 0..self.n_paths() {
            for k in 0..=self.grid.n_steps {
                write!(w, "{m},{k},{}", self.grid.date(k))?;
                for i in 0..self.n_instruments() {
                    write!(w, ",{}", self.prices[[m, k, i]])?;
                }
                for i in 0..self.feature_dim() {
                    write!(w, ",{}", self.features[[m, k, i]])?;
                }
                writeln!(w)?;
            }
        }
        Ok(())
    }
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64<R: Read>(r: &mut R) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

fn read_f64<R: Read>(r: &mut R) -> Result<f64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(f64::from_le_bytes(b))
}

fn read_array3<R: Read>(r: &mut R, shape: (usize, usize, usize)) -> Result<Array3<f64>> {
    let mut arr = Array3::zeros(shape);
    for x in arr.iter_mut() {
        *x = read_f64(r)?;
    }
    Ok(arr)
}
