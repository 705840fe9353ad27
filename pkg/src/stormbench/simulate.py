"""Dataset generation: Gaussian-random-field initial conditions and a
pseudo-spectral vorticity-form 2D incompressible Navier-Stokes solver.

The flow lives on the unit torus with normalized coordinates x = j/W,
y = i/H. Wavenumbers are integers; spatial derivatives act as factors of
2*pi*i*k in spectral space. Time stepping is semi-implicit: Crank-Nicolson
diffusion, explicit advection with 2/3-rule dealiasing. The solver state is
the half (rfft2) vorticity spectrum in float64.
"""

import dataclasses
import functools
import math
import multiprocessing
import os

import numpy as np
import scipy.fft as sfft

_MASK64 = (1 << 64) - 1


class BlowUpError(RuntimeError):
    """Solver or rollout state became non-finite (or exceeded a threshold)."""

    def __init__(self, step_index, message=None):
        self.step_index = int(step_index)
        super().__init__(message or f"state blew up at step {step_index}")


def mix_seed(seed, index):
    """SplitMix64-style mix of (stream seed, sample index) into a 64-bit seed."""
    z = (int(seed) + (int(index) + 1) * 0x9E3779B97F4A7C15) & _MASK64
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
    return z ^ (z >> 31)


@dataclasses.dataclass(frozen=True)
class GrfParams:
    """Gaussian random field spectrum: std sigma(k) = tau^(alpha-1) (4 pi^2 |k|^2 + tau^2)^(-alpha/2)."""

    alpha: float = 2.5
    tau: float = 7.0
    grid: tuple = (64, 64)

    def __post_init__(self):
        if not self.alpha > 1:
            raise ValueError(f"GrfParams: alpha must be > 1, got {self.alpha}")
        if not self.tau > 0:
            raise ValueError(f"GrfParams: tau must be > 0, got {self.tau}")


@dataclasses.dataclass(frozen=True)
class SimConfig:
    """Full generation recipe for one dataset split."""

    nu: float = 1e-3
    dt_internal: float = 1e-2
    T: int = 50
    forcing_amplitude: float = 0.1
    grid: tuple = (64, 64)
    seed: int = 0
    n_samples: int = 1
    alpha: float = 2.5
    tau: float = 7.0

    def __post_init__(self):
        if not self.nu > 0:
            raise ValueError(f"SimConfig: nu must be > 0, got {self.nu}")
        steps = 1.0 / self.dt_internal
        if abs(steps - round(steps)) > 1e-9 * steps:
            raise ValueError(f"SimConfig: dt_internal={self.dt_internal} must divide 1.0 exactly")
        if self.T < 2:
            raise ValueError(f"SimConfig: T must be >= 2, got {self.T}")
        if self.n_samples < 1:
            raise ValueError(f"SimConfig: n_samples must be >= 1, got {self.n_samples}")

    @property
    def steps_per_frame(self):
        return round(1.0 / self.dt_internal)

    def grf_params(self):
        return GrfParams(alpha=self.alpha, tau=self.tau, grid=tuple(self.grid))


@dataclasses.dataclass
class FieldSequence:
    """Time-stacked vorticity snapshots, one per simulation time unit."""

    data: np.ndarray  # [T, H, W]
    time_delta: float = 1.0


def sample_grf(params, seed):
    """Draw one real, zero-mean, periodic Gaussian field on the params grid.

    The field is Re(ifft2(H*W*sqrt(2)*sigma(k)*eta)) with eta complex
    standard normal; zeroing the k=0 coefficient enforces a zero spatial
    mean, and the H*W*sqrt(2) factor makes the real part carry the target
    per-mode variance despite the unnormalized complex draw.
    """
    h, w = params.grid
    ky = np.fft.fftfreq(h, d=1.0 / h)[:, None]
    kx = np.fft.fftfreq(w, d=1.0 / w)[None, :]
    ksq = kx * kx + ky * ky
    sigma = params.tau ** (params.alpha - 1.0) * (
        4.0 * math.pi ** 2 * ksq + params.tau ** 2) ** (-params.alpha / 2.0)
    sqrt_eig = h * w * math.sqrt(2.0) * sigma
    sqrt_eig[0, 0] = 0.0
    rng = np.random.default_rng(int(seed) & _MASK64)
    eta = rng.standard_normal((h, w)) + 1j * rng.standard_normal((h, w))
    return np.real(sfft.ifft2(sqrt_eig * eta))


def _zero_nyquist(k, n, axis):
    """Zero the Nyquist wavenumber in a derivative factor.

    The odd derivative of the Nyquist mode of a real field is anti-Hermitian
    and cannot be represented after projecting back to a real grid; keeping
    it breaks exact divergence-freeness of the recovered velocity.
    """
    k = k.copy()
    if n % 2 == 0:
        idx = [slice(None)] * k.ndim
        where = np.nonzero(np.isclose(np.abs(k).reshape(-1), n / 2))[0]
        idx[axis] = where
        k[tuple(idx)] = 0.0
    return k


@functools.lru_cache(maxsize=8)
class _SolverOps:
    """Precomputed spectral factors for one (grid, nu, dt, forcing) recipe."""

    def __init__(self, h, w, nu, dt, forcing_amplitude):
        self.h, self.w = h, w
        ky = np.fft.fftfreq(h, d=1.0 / h)[:, None]
        kx = np.arange(w // 2 + 1, dtype=np.float64)[None, :]
        self.ddy = 2j * math.pi * _zero_nyquist(ky, h, axis=0) * np.ones_like(kx)
        self.ddx = 2j * math.pi * _zero_nyquist(kx, w, axis=1) * np.ones_like(ky)
        lap = 4.0 * math.pi ** 2 * (kx * kx + ky * ky)
        self.lap = lap
        inv = np.zeros_like(lap)
        inv[lap > 0] = 1.0 / lap[lap > 0]
        self.lap_inv = inv
        self.cn_num = 1.0 - 0.5 * dt * nu * lap
        self.cn_den_inv = 1.0 / (1.0 + 0.5 * dt * nu * lap)
        self.dt = dt
        # 2/3-rule mask on the advection product
        self.dealias = (np.abs(ky) <= h / 3.0) & (kx <= w / 3.0)
        # steady forcing on the vorticity equation, normalized coordinates
        yy = np.arange(h)[:, None] / h
        xx = np.arange(w)[None, :] / w
        f = forcing_amplitude * (np.sin(2 * math.pi * (xx + yy))
                                 + np.cos(2 * math.pi * (xx + yy)))
        self.f_hat = sfft.rfft2(np.ascontiguousarray(np.broadcast_to(f, (h, w))))

    def velocity_half(self, what):
        psi = what * self.lap_inv
        u = sfft.irfft2(self.ddy * psi, s=(self.h, self.w))
        v = sfft.irfft2(-self.ddx * psi, s=(self.h, self.w))
        return u, v

    def step_half(self, what):
        u, v = self.velocity_half(what)
        wx = sfft.irfft2(self.ddx * what, s=(self.h, self.w))
        wy = sfft.irfft2(self.ddy * what, s=(self.h, self.w))
        n_hat = sfft.rfft2(u * wx + v * wy) * self.dealias
        return (what * self.cn_num + self.dt * (self.f_hat - n_hat)) * self.cn_den_inv


def _ops_for(config):
    h, w = config.grid
    return _SolverOps(h, w, float(config.nu), float(config.dt_internal),
                      float(config.forcing_amplitude))


def _as_array(omega_hat):
    return np.asarray(getattr(omega_hat, "data", omega_hat))


def vorticity_to_velocity(omega_hat):
    """Invert the stream function: u = d(psi)/dy, v = -d(psi)/dx, psi_hat = omega_hat/|2 pi k|^2."""
    zh = _as_array(omega_hat)
    h, w = zh.shape[-2:]
    ky = np.fft.fftfreq(h, d=1.0 / h)[:, None]
    kx = np.fft.fftfreq(w, d=1.0 / w)[None, :]
    lap = 4.0 * math.pi ** 2 * (kx * kx + ky * ky)
    inv = np.zeros_like(lap)
    inv[lap > 0] = 1.0 / lap[lap > 0]
    psi = zh * inv
    u = np.real(sfft.ifft2(2j * math.pi * _zero_nyquist(ky, h, axis=0) * psi))
    v = np.real(sfft.ifft2(-2j * math.pi * _zero_nyquist(kx, w, axis=1) * psi))
    return u, v


def step(omega_hat, config, step_index=0):
    """Advance the full vorticity spectrum by one dt_internal; raises on blow-up."""
    zh = _as_array(omega_hat)
    h, w = config.grid
    half = zh[..., : w // 2 + 1].copy()
    half = _ops_for(config).step_half(half)
    if not np.isfinite(half.real.sum() + half.imag.sum()):
        raise BlowUpError(step_index)
    # rebuild the redundant half by Hermitian symmetry
    full = np.empty((h, w), dtype=half.dtype)
    full[:, : w // 2 + 1] = half
    rows = (-np.arange(h)) % h
    cols = (-np.arange(w // 2 + 1, w)) % w
    full[:, w // 2 + 1:] = np.conj(half[np.ix_(rows, cols)])
    return full


def simulate(config, seed):
    """Integrate one sequence: GRF frame 0, then steps_per_frame steps per frame."""
    h, w = config.grid
    omega0 = sample_grf(config.grf_params(), seed)
    ops = _ops_for(config)
    frames = np.empty((config.T, h, w), dtype=np.float64)
    frames[0] = omega0
    what = sfft.rfft2(omega0)
    spf = config.steps_per_frame
    count = 0
    for t in range(1, config.T):
        for _ in range(spf):
            what = ops.step_half(what)
            count += 1
            if not np.isfinite(what.real.sum() + what.imag.sum()):
                raise BlowUpError(count)
        frames[t] = sfft.irfft2(what, s=(h, w))
    return FieldSequence(data=frames, time_delta=1.0)


def _gen_one(args):
    config, index = args
    return simulate(config, mix_seed(config.seed, index)).data.astype(np.float32)


def generate_dataset(config, workers=None):
    """Generate [n_samples, T, H, W] float32 vorticity sequences.

    Sample i is seeded by mix_seed(config.seed, i), so the result is
    independent of worker count and generation order.
    """
    if workers is None:
        workers = int(os.environ.get("STORMBENCH_WORKERS", "1"))
    workers = max(1, min(workers, config.n_samples))
    jobs = [(config, i) for i in range(config.n_samples)]
    if workers == 1:
        seqs = [_gen_one(j) for j in jobs]
    else:
        ctx = multiprocessing.get_context("fork")
        with ctx.Pool(workers) as pool:
            seqs = pool.map(_gen_one, jobs)
    return np.stack(seqs)


def enstrophy(field):
    """Mean squared vorticity of a [.., H, W] field."""
    return float(np.mean(np.asarray(field, dtype=np.float64) ** 2))


def spectral_divergence(u, v):
    """Max |2 pi i k . u_hat|: zero for a stream-function velocity field.

    Uses the package-wide derivative convention (Nyquist wavenumber treated
    as zero, as required for odd derivatives of real fields).
    """
    h, w = u.shape[-2:]
    ky = _zero_nyquist(np.fft.fftfreq(h, d=1.0 / h)[:, None], h, axis=0)
    kx = _zero_nyquist(np.fft.fftfreq(w, d=1.0 / w)[None, :], w, axis=1)
    div = 2j * math.pi * (kx * sfft.fft2(u) + ky * sfft.fft2(v))
    return float(np.max(np.abs(div)))
