"""Black-Scholes prices and greeks with continuous dividend yield."""

from __future__ import annotations

import numpy as np
from scipy.special import ndtr

_SQRT_2PI = np.sqrt(2.0 * np.pi)


def _d1_d2(S, K, T, r, q, sigma):
    vol_t = sigma * np.sqrt(T)
    d1 = (np.log(S / K) + (r - q + 0.5 * sigma * sigma) * T) / vol_t
    return d1, d1 - vol_t


def bs_price(S, K, T, r, q, sigma, is_call=True):
    """European call or put price. Broadcasts over array inputs."""
    S, K, T, sigma = (np.asarray(a, dtype=float) for a in (S, K, T, sigma))
    is_call = np.asarray(is_call, dtype=bool)
    disc_q = np.exp(-q * T)
    disc_r = np.exp(-r * T)
    with np.errstate(divide="ignore", invalid="ignore"):
        d1, d2 = _d1_d2(S, K, T, r, q, sigma)
        call = S * disc_q * ndtr(d1) - K * disc_r * ndtr(d2)
        put = K * disc_r * ndtr(-d2) - S * disc_q * ndtr(-d1)
    degenerate = (T <= 0.0) | (sigma <= 0.0)
    call = np.where(degenerate, np.maximum(S * disc_q - K * disc_r, 0.0), call)
    put = np.where(degenerate, np.maximum(K * disc_r - S * disc_q, 0.0), put)
    out = np.where(is_call, call, put)
    return out[()] if out.ndim == 0 else out


def bs_delta(S, K, T, r, q, sigma, is_call=True):
    S, K, T, sigma = (np.asarray(a, dtype=float) for a in (S, K, T, sigma))
    disc_q = np.exp(-q * T)
    with np.errstate(divide="ignore", invalid="ignore"):
        d1, _ = _d1_d2(S, K, T, r, q, sigma)
    degenerate = (T <= 0.0) | (sigma <= 0.0)
    itm = (S * disc_q > K * np.exp(-r * T)).astype(float)
    call_delta = np.where(degenerate, disc_q * itm, disc_q * ndtr(np.where(degenerate, 0.0, d1)))
    out = np.where(is_call, call_delta, call_delta - disc_q)
    return out[()] if out.ndim == 0 else out


def bs_vega(S, K, T, r, q, sigma):
    """Derivative of the price with respect to sigma (per unit vol)."""
    S, K, T, sigma = (np.asarray(a, dtype=float) for a in (S, K, T, sigma))
    with np.errstate(divide="ignore", invalid="ignore"):
        d1, _ = _d1_d2(S, K, T, r, q, sigma)
        vega = S * np.exp(-q * T) * np.sqrt(T) * np.exp(-0.5 * d1 * d1) / _SQRT_2PI
    out = np.where((T <= 0.0) | (sigma <= 0.0), 0.0, vega)
    return out[()] if out.ndim == 0 else out


def bs_strike_density(S, K, T, r, q, sigma):
    """Second strike derivative of the call price, e^{-rT} times the risk-neutral density."""
    S, K, T, sigma = (np.asarray(a, dtype=float) for a in (S, K, T, sigma))
    _, d2 = _d1_d2(S, K, T, r, q, sigma)
    return np.exp(-r * T) * np.exp(-0.5 * d2 * d2) / (_SQRT_2PI * K * sigma * np.sqrt(T))
