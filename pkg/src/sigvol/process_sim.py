"""Monte Carlo drivers and market simulators.

Generates the correlated Brownian increments, the square-root (CIR)
diffusion used both as market variance and as the primary noise of the
signature model, the Volterra fractional Brownian motion behind rough
Bergomi volatility, and terminal asset prices under either market.

Randomness is counter-based: paths are produced in fixed-size blocks, each
block seeded by (seed, block index) through Philox, so outputs are
reproducible and independent of any parallel scheduling.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Dict, Iterable

import numpy as np

from ._kernels import fbm_accumulate

#: Paths per RNG block; fixed so results never depend on worker layout.
RNG_BLOCK = 16384


@dataclass(frozen=True)
class HestonParams:
    """Square-root diffusion dX = kappa (theta - X) dt + nu sqrt(X) dW.

    Serves as the market variance process (x0 = initial variance) and as
    the primary noise level process of the signature model.  ``rho`` is
    the correlation between the driving W and the price noise Z.
    """

    x0: float
    kappa: float
    theta: float
    nu: float
    rho: float = 0.0

    def __post_init__(self):
        if self.kappa <= 0 or self.nu <= 0:
            raise ValueError("kappa and nu must be positive")
        if self.theta < 0:
            raise ValueError("theta must be non-negative")
        if not -1.0 < self.rho < 1.0:
            raise ValueError("need |rho| < 1")

    @property
    def feller_ok(self) -> bool:
        """Whether 2*kappa*theta >= nu^2 (process stays positive)."""
        return 2.0 * self.kappa * self.theta >= self.nu**2


@dataclass(frozen=True)
class RoughBergomiParams:
    """Lognormal rough volatility: sigma_t^2 = sigma0^2 exp(eta W^H_t - eta^2 t^{2H} / 2)."""

    sigma0: float
    eta: float
    hurst: float

    def __post_init__(self):
        if not 0.0 < self.hurst < 1.0:
            raise ValueError("need 0 < hurst < 1")
        if self.eta <= 0 or self.sigma0 <= 0:
            raise ValueError("eta and sigma0 must be positive")


@dataclass(frozen=True)
class BrownianBatch:
    """Increments of two independent Brownian motions on a uniform grid.

    dW and dB have shape (n_paths, n_steps), each entry Normal(0, dt).
    """

    n_paths: int
    n_steps: int
    horizon: float
    seed: int
    dW: np.ndarray = field(repr=False)
    dB: np.ndarray = field(repr=False)

    @property
    def dt(self) -> float:
        return self.horizon / self.n_steps

    @property
    def times(self) -> np.ndarray:
        return np.arange(self.n_steps + 1) * self.dt

    def mirrored(self) -> "BrownianBatch":
        """Antithetic companion batch with all increments negated."""
        return BrownianBatch(
            self.n_paths, self.n_steps, self.horizon, self.seed, -self.dW, -self.dB
        )


def _block_normals(seed: int, block: int, shape) -> np.ndarray:
    """Standard normals for one RNG block, keyed by (seed, block index)."""
    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence((seed, block))))
    return rng.standard_normal(shape)


def simulate_brownian(n_paths: int, n_steps: int, horizon: float, seed: int,
                      first_block: int = 0) -> BrownianBatch:
    """Draw the (W, B) increment arrays for a batch of paths.

    Deterministic for a fixed seed: block b of RNG_BLOCK paths uses the
    Philox stream keyed by (seed, b), so any prefix of the batch is stable
    and chunked consumers drawing block ranges reproduce the monolithic
    batch exactly.  ``first_block`` offsets the block numbering for such
    consumers; n_paths then counts paths from that block onward.
    """
    if n_paths < 1 or n_steps < 1:
        raise ValueError("need n_paths >= 1 and n_steps >= 1")
    if horizon <= 0:
        raise ValueError("horizon must be positive")
    dt = horizon / n_steps
    scale = np.sqrt(dt)
    dW = np.empty((n_paths, n_steps))
    dB = np.empty((n_paths, n_steps))
    for block, start in enumerate(range(0, n_paths, RNG_BLOCK)):
        stop = min(start + RNG_BLOCK, n_paths)
        z = _block_normals(seed, first_block + block, (2, stop - start, n_steps))
        dW[start:stop] = scale * z[0]
        dB[start:stop] = scale * z[1]
    return BrownianBatch(n_paths, n_steps, horizon, seed, dW, dB)


def correlate(batch: BrownianBatch, rho: float) -> np.ndarray:
    """Increments of Z = rho W + sqrt(1 - rho^2) B."""
    if not -1.0 < rho < 1.0:
        raise ValueError("need |rho| < 1")
    if rho == 0.0:
        return batch.dB
    return rho * batch.dW + np.sqrt(1.0 - rho * rho) * batch.dB


def euler_cir(p: HestonParams, batch: BrownianBatch) -> np.ndarray:
    """Full-truncation Euler scheme for the square-root diffusion.

    X_{k+1} = X_k + kappa (theta - X_k^+) dt + nu sqrt(X_k^+) dW_k with
    x^+ = max(x, 0); the state itself may dip negative but everything under
    the square root and in the drift is clipped.  Returns (n_paths, n_steps+1).
    """
    dt = batch.dt
    x = np.empty((batch.n_paths, batch.n_steps + 1))
    x[:, 0] = p.x0
    cur = np.full(batch.n_paths, float(p.x0))
    for k in range(batch.n_steps):
        pos = np.maximum(cur, 0.0)
        cur = cur + p.kappa * (p.theta - pos) * dt + p.nu * np.sqrt(pos) * batch.dW[:, k]
        x[:, k + 1] = cur
    return x


def volterra_weights(hurst: float, n_steps: int, dt: float) -> np.ndarray:
    """Discrete kernel weights for the Volterra fractional Brownian motion.

    Row k gives the weights applied to the first k Brownian increments so
    that W^H_{t_k} = sum_j w[k, j] dW_j.  Off-diagonal cells use the
    left-point kernel value sqrt(2H) (t_k - t_j)^{H - 1/2}; the singular
    diagonal cell uses the exact cell average of the kernel.  Every row is
    then rescaled so Var(W^H_{t_k}) = t_k^{2H} holds exactly, the property
    the lognormal vol normalization relies on.  For H = 1/2 all weights
    are exactly 1 and the construction reproduces W itself.
    """
    if not 0.0 < hurst < 1.0:
        raise ValueError("need 0 < hurst < 1")
    h = float(hurst)
    times = np.arange(n_steps + 1) * dt
    w = np.zeros((n_steps + 1, n_steps))
    root2h = np.sqrt(2.0 * h)
    for k in range(1, n_steps + 1):
        gaps = times[k] - times[: k - 1]
        w[k, : k - 1] = root2h * gaps ** (h - 0.5)
        w[k, k - 1] = root2h * dt ** (h - 0.5) / (h + 0.5)
        var_target = times[k] ** (2.0 * h)
        var_raw = np.sum(w[k, :k] ** 2) * dt
        w[k, :k] *= np.sqrt(var_target / var_raw)
    return w


def volterra_fbm(hurst: float, batch: BrownianBatch) -> np.ndarray:
    """Volterra fractional Brownian motion driven by the batch's W.

    Returns paths of shape (n_paths, n_steps+1) with W^H_0 = 0 and exact
    marginal variance t^{2H} at every grid point.  H = 1/2 reproduces the
    plain Brownian path bitwise.
    """
    w = volterra_weights(hurst, batch.n_steps, batch.dt)
    return fbm_accumulate(batch.dW, w)


def rough_bergomi_vol(p: RoughBergomiParams, wh: np.ndarray, times: np.ndarray) -> np.ndarray:
    """Volatility paths sigma_t = sigma0 exp(eta W^H_t / 2 - eta^2 t^{2H} / 4).

    The normalization makes sigma_t^2 an exact-mean-sigma0^2 lognormal at
    every t given Var(W^H_t) = t^{2H}.
    """
    expo = 0.5 * p.eta * wh - 0.25 * p.eta**2 * times[None, :] ** (2.0 * p.hurst)
    return p.sigma0 * np.exp(expo)


def _maturity_step(t: float, dt: float, n_steps: int) -> int:
    k = int(round(t / dt))
    if k < 1 or k > n_steps or abs(k * dt - t) > 1e-9 * max(1.0, t):
        raise ValueError(f"maturity {t} does not lie on the simulation grid (dt={dt})")
    return k


def market_terminal_prices(
    kind: str,
    params,
    s0: float,
    r: float,
    maturities: Iterable[float],
    batch: BrownianBatch,
    antithetic: bool = False,
) -> Dict[float, np.ndarray]:
    """Terminal asset prices S_T per maturity under a simulated market.

    The log price follows the Ito-Euler recursion
    dlnS = (r - sigma^2 / 2) dt + sigma dZ with Z = rho W + sqrt(1-rho^2) B
    and sigma taken from the chosen volatility model (left endpoint of each
    step).  Maturities must be grid points.  With ``antithetic`` the batch
    and its mirrored companion are both simulated and concatenated.
    """
    if antithetic:
        a = market_terminal_prices(kind, params, s0, r, maturities, batch, False)
        b = market_terminal_prices(kind, params, s0, r, maturities, batch.mirrored(), False)
        return {t: np.concatenate([a[t], b[t]]) for t in a}

    dt = batch.dt
    if kind == "heston":
        if not isinstance(params, HestonParams):
            raise TypeError("heston market needs HestonParams")
        if not params.feller_ok:
            warnings.warn("Feller condition violated; truncation bias may grow")
        sigma = None  # variance is evolved inline to keep memory flat
        rho = params.rho
    elif kind == "rough_bergomi":
        if not isinstance(params, RoughBergomiParams):
            raise TypeError("rough_bergomi market needs RoughBergomiParams")
        wh = volterra_fbm(params.hurst, batch)
        sigma = rough_bergomi_vol(params, wh, batch.times)
        rho = 0.0
    else:
        raise ValueError(f"unknown market kind {kind!r}")

    dZ = correlate(batch, rho)
    steps = {t: _maturity_step(t, dt, batch.n_steps) for t in maturities}
    out: Dict[float, np.ndarray] = {}
    lns = np.zeros(batch.n_paths)
    if kind == "heston":
        var = np.full(batch.n_paths, float(params.x0))
    for k in range(batch.n_steps):
        if kind == "heston":
            pos = np.maximum(var, 0.0)
            sig_k = np.sqrt(pos)
            var = var + params.kappa * (params.theta - pos) * dt + params.nu * sig_k * batch.dW[:, k]
        else:
            sig_k = sigma[:, k]
        lns = lns + (r - 0.5 * sig_k**2) * dt + sig_k * dZ[:, k]
        for t, kt in steps.items():
            if kt == k + 1:
                out[t] = s0 * np.exp(lns)
    return out


def market_prices(
    kind: str,
    params,
    s0: float,
    r: float,
    maturities: Iterable[float],
    n_paths: int,
    n_steps: int,
    horizon: float,
    seed: int,
    antithetic: bool = False,
) -> Dict[float, np.ndarray]:
    """Chunked wrapper around market_terminal_prices for large batches.

    Processes RNG blocks one at a time so memory stays flat in the horizon
    length; the concatenated samples match a monolithic simulation (for
    antithetic runs, up to sample order: mirrors follow their own block).
    With ``antithetic`` each block contributes its mirrored companion as
    well, so the total sample is 2 * n_paths.
    """
    maturities = list(maturities)
    pieces = {t: [] for t in maturities}
    for block, start in enumerate(range(0, n_paths, RNG_BLOCK)):
        stop = min(start + RNG_BLOCK, n_paths)
        batch = simulate_brownian(stop - start, n_steps, horizon, seed, first_block=block)
        snap = market_terminal_prices(kind, params, s0, r, maturities, batch, antithetic)
        for t in maturities:
            pieces[t].append(snap[t])
    return {t: np.concatenate(pieces[t]) for t in maturities}
