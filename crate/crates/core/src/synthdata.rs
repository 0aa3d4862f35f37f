//! Deterministic periodic 2-D PDE trajectories on `[0,1)²`.
//!
//! `heat2d` and `advection2d` are advanced by their exact Fourier-space
//! solution operator over one `Δt`;
//! `gray_scott2d` is integrated with RK4 and a spectral Laplacian.
//!
//! # Trajectory file layout
//!
//! All integers and floats little-endian:
//!
//! | offset | type     | field                                       |
//! |--------|----------|---------------------------------------------|
//! | 0      | `[u8;4]` | magic `WLTR`                                |
//! | 4      | u32      | format version (1)                          |
//! | 8      | u32      | system id (0 heat2d, 1 advection2d, 2 gray_scott2d) |
//! | 12     | u32      | height                                      |
//! | 16     | u32      | width                                       |
//! | 20     | u32      | channels                                    |
//! | 24     | u64      | frames                                      |
//! | 32     | f64      | Δt                                          |
//! | 40     | `[f64;4]`| params: heat `(ν,0,0,0)`, advection `(a,b,0,0)`, Gray–Scott `(F,k,Du,Dv)` |
//! | 72     | u64      | seed                                        |
//! | 80     | u32      | RK4 substeps per Δt                         |
//! | 84     | u32      | reserved (0)                                |
//! | 88     | f64…     | `frames·height·width·channels` values, frame-major, channels last |

use std::f64::consts::PI;
use std::fmt;
use std::io::{Read, Write};
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::error::{dim_err, Error, Result};
use crate::tensor::Tensor;

pub const HEADER_BYTES: usize = 88;
const MAGIC: &[u8; 4] = b"WLTR";
const VERSION: u32 = 1;
/// States with any magnitude above this are treated as a blown-up integration.
const BLOWUP: f64 = 1e3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum System {
    #[serde(rename = "heat2d")]
    Heat2d,
    #[serde(rename = "advection2d")]
    Advection2d,
    #[serde(rename = "gray_scott2d")]
    GrayScott2d,
}

impl System {
    pub const ALL: [System; 3] = [System::Heat2d, System::Advection2d, System::GrayScott2d];

    pub fn id(self) -> u32 {
        match self {
            System::Heat2d => 0,
            System::Advection2d => 1,
            System::GrayScott2d => 2,
        }
    }

    pub fn from_id(id: u32) -> Result<System> {
        System::ALL.get(id as usize).copied().ok_or_else(|| Error::Format(format!("unknown system id {id}")))
    }

    pub fn channels(self) -> usize {
        match self {
            System::GrayScott2d => 2,
            _ => 1,
        }
    }
}

impl fmt::Display for System {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            System::Heat2d => "heat2d",
            System::Advection2d => "advection2d",
            System::GrayScott2d => "gray_scott2d",
        })
    }
}

impl FromStr for System {
    type Err = Error;
    fn from_str(s: &str) -> Result<System> {
        System::ALL
            .into_iter()
            .find(|sys| sys.to_string() == s)
            .ok_or_else(|| Error::Usage(format!("unknown system '{s}'; supported: heat2d, advection2d, gray_scott2d")))
    }
}

/// One trajectory request. Physical parameters not used by `system` are ignored.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrajectorySpec {
    pub system: System,
    pub height: usize,
    pub width: usize,
    /// Stored frames, including the initial condition at `t = 0`.
    pub n_steps: usize,
    pub dt: f64,
    pub nu: f64,
    pub velocity: [f64; 2],
    pub feed: f64,
    pub kill: f64,
    pub du: f64,
    pub dv: f64,
    pub substeps: usize,
    pub seed: u64,
}

impl Default for TrajectorySpec {
    fn default() -> Self {
        TrajectorySpec {
            system: System::Heat2d,
            height: 32,
            width: 32,
            n_steps: 64,
            dt: 0.01,
            nu: 0.005,
            velocity: [1.0, 0.5],
            feed: 0.037,
            kill: 0.06,
            du: 2e-5,
            dv: 1e-5,
            substeps: 16,
            seed: 0,
        }
    }
}

impl TrajectorySpec {
    pub fn new(system: System, size: usize, n_steps: usize, seed: u64) -> TrajectorySpec {
        let dt = if system == System::GrayScott2d { 1.0 } else { 0.01 };
        TrajectorySpec { system, height: size, width: size, n_steps, dt, seed, ..Default::default() }
    }

    pub fn validate(&self) -> Result<()> {
        for (axis, n) in [("height", self.height), ("width", self.width)] {
            if !n.is_power_of_two() || !(4..=128).contains(&n) {
                return Err(Error::Config(format!("{axis} must be a power of two in 4..=128, got {n}")));
            }
        }
        if self.n_steps == 0 {
            return Err(Error::Config("n_steps must be at least 1".into()));
        }
        if !(self.dt > 0.0) || !self.dt.is_finite() {
            return Err(Error::Config(format!("dt must be positive, got {}", self.dt)));
        }
        if self.substeps == 0 {
            return Err(Error::Config("substeps must be at least 1".into()));
        }
        let params = [self.nu, self.du, self.dv, self.feed, self.kill];
        if params.iter().any(|p| !p.is_finite() || *p < 0.0) || self.velocity.iter().any(|v| !v.is_finite()) {
            return Err(Error::Config("physical parameters must be finite and non-negative".into()));
        }
        Ok(())
    }

    pub fn channels(&self) -> usize {
        self.system.channels()
    }

    pub fn params(&self) -> [f64; 4] {
        match self.system {
            System::Heat2d => [self.nu, 0.0, 0.0, 0.0],
            System::Advection2d => [self.velocity[0], self.velocity[1], 0.0, 0.0],
            System::GrayScott2d => [self.feed, self.kill, self.du, self.dv],
        }
    }

    /// Size of the trajectory file in bytes.
    pub fn file_bytes(&self) -> usize {
        HEADER_BYTES + 8 * self.height * self.width * self.channels() * self.n_steps
    }
}

/// Frames `[S, H, W, C]` plus the spec that produced them.
#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    pub spec: TrajectorySpec,
    pub frames: Tensor,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.frames.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn frame(&self, n: usize) -> Tensor {
        self.frames.index_axis0(n)
    }

    /// Number of `(history, next)` windows of length `history + 1`.
    pub fn window_count(&self, history: usize) -> usize {
        self.len().saturating_sub(history)
    }

    /// History `[T, H, W, C]` starting at `start` and its next frame `[H, W, C]`.
    pub fn window(&self, start: usize, history: usize) -> Result<(Tensor, Tensor)> {
        if history == 0 || start + history >= self.len() {
            return dim_err(format!(
                "window at {start} with history {history} does not fit a trajectory of {} frames",
                self.len()
            ));
        }
        let h: Vec<Tensor> = (start..start + history).map(|n| self.frame(n)).collect();
        Ok((Tensor::stack(&h)?, self.frame(start + history)))
    }

    pub fn write<W: Write>(&self, mut w: W) -> Result<()> {
        let s = &self.spec;
        let mut head = Vec::with_capacity(HEADER_BYTES);
        head.extend_from_slice(MAGIC);
        head.extend_from_slice(&VERSION.to_le_bytes());
        head.extend_from_slice(&s.system.id().to_le_bytes());
        head.extend_from_slice(&(s.height as u32).to_le_bytes());
        head.extend_from_slice(&(s.width as u32).to_le_bytes());
        head.extend_from_slice(&(s.channels() as u32).to_le_bytes());
        head.extend_from_slice(&(self.len() as u64).to_le_bytes());
        head.extend_from_slice(&s.dt.to_le_bytes());
        for p in s.params() {
            head.extend_from_slice(&p.to_le_bytes());
        }
        head.extend_from_slice(&s.seed.to_le_bytes());
        head.extend_from_slice(&(s.substeps as u32).to_le_bytes());
        head.extend_from_slice(&0u32.to_le_bytes());
        debug_assert_eq!(head.len(), HEADER_BYTES);
        w.write_all(&head)?;
        let mut body = Vec::with_capacity(8 * self.frames.len());
        for v in self.frames.data() {
            body.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&body)?;
        Ok(())
    }

    pub fn read<R: Read>(mut r: R) -> Result<Trajectory> {
        let mut head = [0u8; HEADER_BYTES];
        r.read_exact(&mut head).map_err(|e| Error::Format(format!("truncated trajectory header: {e}")))?;
        if &head[0..4] != MAGIC {
            return Err(Error::Format("not a trajectory file (bad magic)".into()));
        }
        let u32_at = |o: usize| u32::from_le_bytes(head[o..o + 4].try_into().unwrap());
        let u64_at = |o: usize| u64::from_le_bytes(head[o..o + 8].try_into().unwrap());
        let f64_at = |o: usize| f64::from_le_bytes(head[o..o + 8].try_into().unwrap());
        if u32_at(4) != VERSION {
            return Err(Error::Format(format!("unsupported trajectory version {}", u32_at(4))));
        }
        let system = System::from_id(u32_at(8))?;
        let (h, w, c, frames) = (u32_at(12) as usize, u32_at(16) as usize, u32_at(20) as usize, u64_at(24) as usize);
        if c != system.channels() {
            return Err(Error::Format(format!("{system} has {} channels, header says {c}", system.channels())));
        }
        let p = [f64_at(40), f64_at(48), f64_at(56), f64_at(64)];
        let mut spec = TrajectorySpec {
            system,
            height: h,
            width: w,
            n_steps: frames,
            dt: f64_at(32),
            seed: u64_at(72),
            substeps: u32_at(80) as usize,
            ..Default::default()
        };
        match system {
            System::Heat2d => spec.nu = p[0],
            System::Advection2d => spec.velocity = [p[0], p[1]],
            System::GrayScott2d => (spec.feed, spec.kill, spec.du, spec.dv) = (p[0], p[1], p[2], p[3]),
        }
        let n = frames * h * w * c;
        let mut bytes = vec![0u8; 8 * n];
        r.read_exact(&mut bytes).map_err(|e| Error::Format(format!("truncated trajectory body: {e}")))?;
        let data = bytes.chunks_exact(8).map(|b| f64::from_le_bytes(b.try_into().unwrap())).collect();
        let frames = Tensor::new(&[frames, h, w, c], data)?;
        Ok(Trajectory { spec, frames })
    }
}

// ---- spectral machinery ----------------------------------------------------

struct Fft2 {
    h: usize,
    w: usize,
    rows: [std::sync::Arc<dyn rustfft::Fft<f64>>; 2],
    cols: [std::sync::Arc<dyn rustfft::Fft<f64>>; 2],
}

impl Fft2 {
    fn new(h: usize, w: usize) -> Fft2 {
        let mut p = FftPlanner::new();
        Fft2 {
            h,
            w,
            rows: [p.plan_fft_forward(w), p.plan_fft_inverse(w)],
            cols: [p.plan_fft_forward(h), p.plan_fft_inverse(h)],
        }
    }

    fn run(&self, buf: &mut [Complex<f64>], inverse: bool) {
        let i = inverse as usize;
        for row in buf.chunks_exact_mut(self.w) {
            self.rows[i].process(row);
        }
        let mut col = vec![Complex::new(0.0, 0.0); self.h];
        for x in 0..self.w {
            for y in 0..self.h {
                col[y] = buf[y * self.w + x];
            }
            self.cols[i].process(&mut col);
            for y in 0..self.h {
                buf[y * self.w + x] = col[y];
            }
        }
        if inverse {
            let s = 1.0 / (self.h * self.w) as f64;
            buf.iter_mut().for_each(|v| *v *= s);
        }
    }

    /// Spectrum of channel `c` of a `[H, W, C]` field.
    fn forward(&self, field: &[f64], c: usize, channels: usize) -> Vec<Complex<f64>> {
        let mut buf: Vec<Complex<f64>> = (0..self.h * self.w).map(|i| Complex::new(field[i * channels + c], 0.0)).collect();
        self.run(&mut buf, false);
        buf
    }

    fn inverse_into(&self, mut spec: Vec<Complex<f64>>, out: &mut [f64], c: usize, channels: usize) {
        self.run(&mut spec, true);
        for (i, v) in spec.iter().enumerate() {
            out[i * channels + c] = v.re;
        }
    }
}

fn wavenumber(i: usize, n: usize) -> f64 {
    if i <= n / 2 {
        i as f64
    } else {
        i as f64 - n as f64
    }
}

/// Fourier multiplier of the exact solution operator over time `t`.
fn multiplier(spec: &TrajectorySpec, ky: f64, kx: f64, t: f64) -> Complex<f64> {
    match spec.system {
        System::Heat2d => Complex::new((-spec.nu * 4.0 * PI * PI * (kx * kx + ky * ky) * t).exp(), 0.0),
        System::Advection2d => {
            // u(x, t) = u0(x − v t); the phase is reduced mod 1 so whole wraps are exact
            let mut phase = (kx * spec.velocity[0] + ky * spec.velocity[1]) * t;
            phase -= phase.round();
            Complex::from_polar(1.0, -2.0 * PI * phase)
        }
        System::GrayScott2d => unreachable!("no closed form for Gray-Scott"),
    }
}

fn apply_exact(fft: &Fft2, spec: &TrajectorySpec, field: &[f64], t: f64) -> Vec<f64> {
    let mut out = vec![0.0; field.len()];
    let mut s = fft.forward(field, 0, 1);
    for y in 0..fft.h {
        let ky = wavenumber(y, fft.h);
        for x in 0..fft.w {
            s[y * fft.w + x] *= multiplier(spec, ky, wavenumber(x, fft.w), t);
        }
    }
    fft.inverse_into(s, &mut out, 0, 1);
    out
}

/// Zero-mean, unit-variance real field with Fourier support `|k| ≤ min(H, W)/4`.
pub fn band_limited_field(height: usize, width: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let fft = Fft2::new(height, width);
    let kmax = (height.min(width) / 4) as f64;
    let mut s = vec![Complex::new(0.0, 0.0); height * width];
    for y in 0..height {
        for x in 0..width {
            let (ky, kx) = (wavenumber(y, height), wavenumber(x, width));
            let re: f64 = StandardNormal.sample(rng);
            let im: f64 = StandardNormal.sample(rng);
            let r2 = kx * kx + ky * ky;
            if r2 > 0.0 && r2 <= kmax * kmax {
                s[y * width + x] = Complex::new(re, im);
            }
        }
    }
    let mut out = vec![0.0; height * width];
    fft.inverse_into(s, &mut out, 0, 1);
    let std = (out.iter().map(|v| v * v).sum::<f64>() / out.len() as f64).sqrt();
    out.iter_mut().for_each(|v| *v /= std);
    out
}

fn initial_condition(spec: &TrajectorySpec) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let g = band_limited_field(spec.height, spec.width, &mut rng);
    match spec.system {
        System::GrayScott2d => {
            // v seeded where the smooth field is high, u depleted there
            let (lo, hi) = g.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
            let mut out = Vec::with_capacity(2 * g.len());
            for v in g {
                let s = ((v - lo) / (hi - lo)).powi(4);
                out.push(1.0 - 0.5 * s);
                out.push(0.25 * s);
            }
            out
        }
        _ => g,
    }
}

fn gray_scott_rhs(fft: &Fft2, spec: &TrajectorySpec, state: &[f64]) -> Vec<f64> {
    let mut lap = vec![0.0; state.len()];
    for c in 0..2 {
        let mut s = fft.forward(state, c, 2);
        for y in 0..fft.h {
            let ky = wavenumber(y, fft.h);
            for x in 0..fft.w {
                let kx = wavenumber(x, fft.w);
                s[y * fft.w + x] *= -4.0 * PI * PI * (kx * kx + ky * ky);
            }
        }
        fft.inverse_into(s, &mut lap, c, 2);
    }
    let mut out = vec![0.0; state.len()];
    for i in 0..state.len() / 2 {
        let (u, v) = (state[2 * i], state[2 * i + 1]);
        let uvv = u * v * v;
        out[2 * i] = spec.du * lap[2 * i] - uvv + spec.feed * (1.0 - u);
        out[2 * i + 1] = spec.dv * lap[2 * i + 1] + uvv - (spec.feed + spec.kill) * v;
    }
    out
}

fn gray_scott_step(fft: &Fft2, spec: &TrajectorySpec, state: &[f64]) -> Vec<f64> {
    let h = spec.dt / spec.substeps as f64;
    let axpy = |x: &[f64], k: &[f64], a: f64| -> Vec<f64> { x.iter().zip(k).map(|(x, k)| x + a * k).collect() };
    let mut y = state.to_vec();
    for _ in 0..spec.substeps {
        let k1 = gray_scott_rhs(fft, spec, &y);
        let k2 = gray_scott_rhs(fft, spec, &axpy(&y, &k1, 0.5 * h));
        let k3 = gray_scott_rhs(fft, spec, &axpy(&y, &k2, 0.5 * h));
        let k4 = gray_scott_rhs(fft, spec, &axpy(&y, &k3, h));
        for i in 0..y.len() {
            y[i] += h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
        }
    }
    y
}

fn check_blowup(state: &[f64], step: usize) -> Result<()> {
    if state.iter().any(|v| !v.is_finite() || v.abs() > BLOWUP) {
        return Err(Error::Generation(format!(
            "Gray-Scott integration blew up at step {step}; reduce dt, diffusion rates or increase substeps"
        )));
    }
    Ok(())
}

/// Advances a `[H, W, C]` state by one `Δt` with the reference solver.
pub fn oracle_step(spec: &TrajectorySpec, state: &Tensor) -> Result<Tensor> {
    spec.validate()?;
    let want = [spec.height, spec.width, spec.channels()];
    if state.shape() != want {
        return dim_err(format!("oracle state must be {:?}, got {:?}", want, state.shape()));
    }
    let fft = Fft2::new(spec.height, spec.width);
    let next = match spec.system {
        System::GrayScott2d => {
            let y = gray_scott_step(&fft, spec, state.data());
            check_blowup(&y, 1)?;
            y
        }
        _ => apply_exact(&fft, spec, state.data(), spec.dt),
    };
    Tensor::new(&want, next)
}

/// Builds the trajectory for `spec`; bit-identical for identical specs.
pub fn generate(spec: &TrajectorySpec) -> Result<Trajectory> {
    spec.validate()?;
    let fft = Fft2::new(spec.height, spec.width);
    let u0 = initial_condition(spec);
    let mut data = Vec::with_capacity(u0.len() * spec.n_steps);
    data.extend_from_slice(&u0);
    match spec.system {
        System::GrayScott2d => {
            let mut y = u0;
            for n in 1..spec.n_steps {
                y = gray_scott_step(&fft, spec, &y);
                check_blowup(&y, n)?;
                data.extend_from_slice(&y);
            }
        }
        _ => {
            // iterate the one-step operator so stored frames are exactly oracle_step's output
            let mut y = u0;
            for _ in 1..spec.n_steps {
                y = apply_exact(&fft, spec, &y, spec.dt);
                data.extend_from_slice(&y);
            }
        }
    }
    let frames = Tensor::new(&[spec.n_steps, spec.height, spec.width, spec.channels()], data)?;
    Ok(Trajectory { spec: spec.clone(), frames })
}

/// Generates several trajectories in parallel; output order matches `specs`.
pub fn generate_all(specs: &[TrajectorySpec]) -> Result<Vec<Trajectory>> {
    specs.par_iter().map(generate).collect()
}

/// Stacks windows `(trajectory index, start)` into `x: [B, T, H, W, C]`, `y: [B, 1, H, W, C]`.
pub fn window_batch(trajs: &[Trajectory], picks: &[(usize, usize)], history: usize) -> Result<(Tensor, Tensor)> {
    let mut xs = Vec::with_capacity(picks.len());
    let mut ys = Vec::with_capacity(picks.len());
    for &(t, s) in picks {
        let traj = trajs.get(t).ok_or_else(|| Error::Dimension(format!("no trajectory {t}")))?;
        let (x, y) = traj.window(s, history)?;
        let ys_shape: Vec<usize> = std::iter::once(1).chain(y.shape().iter().copied()).collect();
        xs.push(x);
        ys.push(y.into_shape(&ys_shape)?);
    }
    Ok((Tensor::stack(&xs)?, Tensor::stack(&ys)?))
}
