"""Black-Scholes analytics, implied-volatility inversion, Monte Carlo pricing."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np
from scipy.special import ndtr

SQRT_2PI = np.sqrt(2.0 * np.pi)

IV_BRACKET = (1e-6, 5.0)


class InversionError(ValueError):
    """Raised when a price cannot be inverted to an implied volatility.

    Carries the violated no-arbitrage bound when that is the cause.
    """

    def __init__(self, msg, price=None, lower=None, upper=None):
        super().__init__(msg)
        self.price = price
        self.lower = lower
        self.upper = upper


def _phi(x):
    return np.exp(-0.5 * x * x) / SQRT_2PI


def bs_price(s0, k, t, r, sigma):
    """Black-Scholes call price; vectorizes over any argument."""
    s0, k, t, r, sigma = np.broadcast_arrays(
        *(np.asarray(a, dtype=float) for a in (s0, k, t, r, sigma))
    )
    sqt = sigma * np.sqrt(t)
    d_plus = (np.log(s0 / k) + r * t) / sqt + 0.5 * sqt
    d_minus = d_plus - sqt
    out = s0 * ndtr(d_plus) - k * np.exp(-r * t) * ndtr(d_minus)
    return float(out) if out.ndim == 0 else out


def bs_vega(s0, k, t, r, sigma):
    """Sensitivity of the call price to sigma: s0 * phi(d_plus) * sqrt(t)."""
    s0, k, t, r, sigma = np.broadcast_arrays(
        *(np.asarray(a, dtype=float) for a in (s0, k, t, r, sigma))
    )
    sqt = sigma * np.sqrt(t)
    d_plus = (np.log(s0 / k) + r * t) / sqt + 0.5 * sqt
    out = s0 * _phi(d_plus) * np.sqrt(t)
    return float(out) if out.ndim == 0 else out


def no_arbitrage_bounds(s0, k, t, r) -> Tuple[float, float]:
    """Call price bounds [max(s0 - k e^{-rt}, 0), s0]."""
    return max(s0 - k * np.exp(-r * t), 0.0), float(s0)


def implied_vol(price, s0, k, t, r, tol=1e-10):
    """Invert the Black-Scholes formula for the volatility.

    Bisection on [1e-6, 5] down to a 1e-4 bracket, then Newton with the
    vega; bisection guarantees progress for near-intrinsic prices where
    Newton stalls.  The returned sigma reprices within ``tol`` absolutely.
    Prices at or outside the no-arbitrage bounds raise InversionError.
    """
    lower, upper = no_arbitrage_bounds(s0, k, t, r)
    if not lower < price < upper:
        raise InversionError(
            f"price {price} outside no-arbitrage bounds ({lower}, {upper})",
            price=price, lower=lower, upper=upper,
        )
    lo, hi = IV_BRACKET
    f_lo = bs_price(s0, k, t, r, lo) - price
    f_hi = bs_price(s0, k, t, r, hi) - price
    if f_lo > 0 or f_hi < 0:
        raise InversionError(
            f"implied volatility outside bracket {IV_BRACKET}", price=price
        )
    while hi - lo > 1e-4:
        mid = 0.5 * (lo + hi)
        if bs_price(s0, k, t, r, mid) - price <= 0:
            lo = mid
        else:
            hi = mid
    sigma = 0.5 * (lo + hi)
    for _ in range(50):
        diff = bs_price(s0, k, t, r, sigma) - price
        if abs(diff) <= tol:
            return float(sigma)
        vega = bs_vega(s0, k, t, r, sigma)
        if vega <= 1e-14:
            break
        step = diff / vega
        sigma -= step
        if not lo <= sigma <= hi:
            # fall back into the verified bracket
            sigma = min(max(sigma, lo), hi)
    # Newton stalled; resume bisection to the requested tolerance
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        diff = bs_price(s0, k, t, r, mid) - price
        if abs(diff) <= tol:
            return float(mid)
        if diff <= 0:
            lo = mid
        else:
            hi = mid
    raise InversionError(f"implied volatility did not converge for price {price}")


def mc_call_price(discounted_terminal, k, r=0.0, t=0.0) -> Tuple[float, float]:
    """Monte Carlo call price and standard error from discounted terminal prices.

    Averages (S_tilde - e^{-rt} k)_+ over the sample; the standard error is
    the payoff standard deviation over sqrt(n).
    """
    s = np.asarray(discounted_terminal, dtype=float)
    if s.size == 0:
        raise ValueError("empty sample")
    payoff = np.maximum(s - k * np.exp(-r * t), 0.0)
    price = float(payoff.mean())
    se = float(payoff.std(ddof=1) / np.sqrt(payoff.size)) if payoff.size > 1 else 0.0
    return price, se


def clamp_to_bounds(price, s0, k, t, r, pad=1e-10) -> Tuple[float, bool]:
    """Pull a quote just inside the no-arbitrage bounds if MC noise pushed it out.

    Returns (possibly clamped price, whether clamping happened).  Deep ITM
    short-maturity Monte Carlo quotes occasionally breach intrinsic value;
    clamping keeps them invertible instead of dropping them.
    """
    lower, upper = no_arbitrage_bounds(s0, k, t, r)
    if price <= lower:
        return lower + pad, True
    if price >= upper:
        return upper - pad, True
    return float(price), False


@dataclass(frozen=True)
class OptionQuote:
    """One market call quote: strike, maturity (years), discounted price."""

    strike: float
    maturity: float
    price: float
    implied_vol: Optional[float] = None
    weight: float = 1.0

    def __post_init__(self):
        if self.strike <= 0 or self.maturity <= 0:
            raise ValueError("strike and maturity must be positive")
        if self.weight <= 0:
            raise ValueError("weight must be positive")
