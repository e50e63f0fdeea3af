"""Per-user traffic statistics from physical-layer link parameters.

A user is described by a link budget, a Rician channel and a log-normal
packet-size distribution. The closed forms below map these to the two
classification features: expected packet count in a window and burstiness.
Analytic statistics use the mean channel gain (high-SNR regime); per-draw
Rician sampling is only used by the Monte-Carlo checks and trace output.
"""

from __future__ import annotations

import logging
import math
from collections import Counter
from dataclasses import dataclass
from typing import Iterable, TextIO

import numpy as np
from scipy.special import erfc

from .errors import DomainError, UndefinedBurstinessError

log = logging.getLogger(__name__)

VALID_QAM = (4, 16, 64)
BER_MODES = ("standard", "as-written")
NOISE_MODES = ("band", "literal")
LOSS_MODES = ("taylor", "exact")

# Counts of clamp events, keyed by kind. Read by the harness for reporting.
diagnostics: Counter = Counter()


@dataclass(frozen=True)
class LinkBudget:
    bandwidth_hz: float
    tx_power_w: float
    noise_psd: float
    eb_n0: float
    constellation_size: int = 4

    def __post_init__(self):
        for name in ("bandwidth_hz", "tx_power_w", "noise_psd", "eb_n0"):
            value = getattr(self, name)
            if not (value > 0 and math.isfinite(value)):
                raise DomainError(f"{name} must be positive and finite, got {value}")
        if self.constellation_size not in VALID_QAM:
            raise DomainError(
                f"constellation_size must be one of {VALID_QAM}, got {self.constellation_size}"
            )

    @property
    def bits_per_symbol(self) -> int:
        return int(self.constellation_size).bit_length() - 1


@dataclass(frozen=True)
class ChannelState:
    los_power: float
    nlos_scale_sq: float

    def __post_init__(self):
        if self.los_power < 0 or self.nlos_scale_sq < 0:
            raise DomainError("channel powers must be nonnegative")
        if self.los_power + 2 * self.nlos_scale_sq <= 0:
            raise DomainError("degenerate channel: LOS and NLOS powers are both zero")

    @property
    def rician_c_factor(self) -> float:
        """LOS-to-scatter power ratio |d|^2 / (2 Psi^2); inf for a pure LOS link."""
        if self.nlos_scale_sq == 0:
            return math.inf
        return self.los_power / (2 * self.nlos_scale_sq)

    @classmethod
    def from_c_factor(cls, mean_gain: float, c_factor: float) -> "ChannelState":
        nlos = mean_gain / (2 * (c_factor + 1))
        return cls(los_power=mean_gain - 2 * nlos, nlos_scale_sq=nlos)


@dataclass(frozen=True)
class PacketSizeDist:
    """Log-normal packet size in bits: ln S ~ Normal(mu, sigma_sq)."""

    mu: float
    sigma_sq: float

    def __post_init__(self):
        if self.sigma_sq < 0 or not math.isfinite(self.mu):
            raise DomainError("need finite mu and sigma_sq >= 0")
        if not math.isfinite(self.mean_size):
            raise DomainError("mean packet size overflows")

    @property
    def mean_size(self) -> float:
        return math.exp(self.mu + self.sigma_sq / 2)

    @property
    def mean_inverse_size(self) -> float:
        return math.exp(-self.mu + self.sigma_sq / 2)


@dataclass(frozen=True)
class TrafficStats:
    rate_bps: float
    ber: float
    p_loss: float  # at the mean packet size
    exp_lambda: float
    var_lambda: float
    exp_count: float
    burstiness: float
    clamped: bool = False


def rician_mean_gain(channel: ChannelState) -> float:
    return channel.los_power + 2 * channel.nlos_scale_sq


def sample_channel_gain(channel: ChannelState, rng: np.random.Generator, size=None):
    """Draw |h|^2 for a Rician channel.

    The LOS amplitude is put on the real axis; the scatter adds independent
    zero-mean Gaussians of variance ``nlos_scale_sq`` to both quadratures.
    Returns a float for ``size=None``, else an array.
    """
    if channel.nlos_scale_sq == 0:
        return channel.los_power if size is None else np.full(size, channel.los_power)
    d = math.sqrt(channel.los_power)
    scale = math.sqrt(channel.nlos_scale_sq)
    x = rng.normal(0.0, 1.0, size=size) * scale
    y = rng.normal(0.0, 1.0, size=size) * scale
    gain = (d + x) ** 2 + y**2
    return float(gain) if size is None else gain


def shannon_rate(link: LinkBudget, gain: float, noise_mode: str = "band") -> float:
    """Achievable rate b * log2(1 + P g / N).

    ``noise_mode="band"`` takes N as noise_psd * bandwidth; ``"literal"``
    uses noise_psd unscaled.
    """
    if gain < 0:
        raise DomainError("gain must be nonnegative")
    if noise_mode == "band":
        noise = link.noise_psd * link.bandwidth_hz
    elif noise_mode == "literal":
        noise = link.noise_psd
    else:
        raise DomainError(f"unknown noise_mode {noise_mode!r}")
    return link.bandwidth_hz * math.log2(1 + link.tx_power_w * gain / noise)


def q_function(x):
    """Gaussian tail probability Q(x) = P(Z > x)."""
    return 0.5 * erfc(np.asarray(x, dtype=float) / math.sqrt(2))


def qam_ber(link: LinkBudget, mode: str = "standard") -> float:
    """Bit error rate of Gray-coded square M-QAM at the link's Eb/N0.

    ``mode="as-written"`` evaluates 3 / (2 sqrt(M) Q(sqrt(3m/M - 1) sqrt(2 Eb/N0)))
    literally; it is only defined while 3m/M >= 1, i.e. for M=4.
    Both modes clamp to [0, 0.5].
    """
    M = link.constellation_size
    m = link.bits_per_symbol
    if mode == "standard":
        arg = math.sqrt(3 * m / (M - 1) * link.eb_n0)
        pb = (4 / m) * (1 - 1 / math.sqrt(M)) * float(q_function(arg))
    elif mode == "as-written":
        inner = 3 * m / M - 1
        if inner < 0:
            raise DomainError(f"as-written BER undefined for M={M} (3m/M - 1 < 0)")
        q = float(q_function(math.sqrt(inner) * math.sqrt(2 * link.eb_n0)))
        pb = math.inf if q == 0 else 3 / (2 * math.sqrt(M) * q)
    else:
        raise DomainError(f"unknown BER mode {mode!r}")
    return min(max(pb, 0.0), 0.5)


def packet_loss_prob(ber: float, packet_bits: float, mode: str = "taylor") -> float:
    if not 0 <= ber < 1:
        raise DomainError(f"ber must lie in [0, 1), got {ber}")
    if packet_bits <= 0:
        raise DomainError("packet_bits must be positive")
    if mode == "exact":
        return -math.expm1(packet_bits * math.log1p(-ber))
    if mode != "taylor":
        raise DomainError(f"unknown loss mode {mode!r}")
    p = -packet_bits * math.log1p(-ber)
    if p > 1:
        diagnostics["p_loss_clamped"] += 1
        return 1.0
    return max(p, 0.0)


def max_arrival_rate(rate_bps: float, packet_bits: float) -> float:
    if packet_bits <= 0:
        raise DomainError("packet_bits must be positive")
    return rate_bps / packet_bits


def effective_rate(lambda_max: float, p_loss: float) -> float:
    if not 0 <= p_loss <= 1:
        raise DomainError(f"p_loss must lie in [0, 1], got {p_loss}")
    return lambda_max * (1 - p_loss)


def raw_expected_arrival_rate(rate_bps: float, dist: PacketSizeDist, ber: float) -> float:
    """Closed-form E[lambda] before clamping; may be negative."""
    return rate_bps * (dist.mean_inverse_size + math.log1p(-ber))


def expected_arrival_rate(rate_bps: float, dist: PacketSizeDist, ber: float) -> float:
    if not 0 <= ber < 0.5 + 1e-15:
        raise DomainError(f"ber must lie in [0, 0.5], got {ber}")
    value = raw_expected_arrival_rate(rate_bps, dist, ber)
    if value < 0:
        diagnostics["exp_lambda_clamped"] += 1
        log.debug("E[lambda] clamped to 0 (raw %g)", value)
        return 0.0
    return value


def arrival_rate_variance(rate_bps: float, dist: PacketSizeDist) -> float:
    return rate_bps**2 * math.expm1(dist.sigma_sq) * math.exp(2 * (-dist.mu + dist.sigma_sq / 2))


def expected_packet_count(exp_lambda: float, window_s: float) -> float:
    if window_s < 0:
        raise DomainError("window must be nonnegative")
    return window_s * exp_lambda


def burstiness(var_lambda: float, exp_lambda: float) -> float:
    if not exp_lambda > 0:
        raise UndefinedBurstinessError("burstiness is undefined at zero expected rate")
    return var_lambda / exp_lambda**2


def sample_packet_count(exp_lambda: float, window_s: float, rng: np.random.Generator, size=None):
    if exp_lambda < 0 or window_s < 0:
        raise DomainError("Poisson mean must be nonnegative")
    draw = rng.poisson(exp_lambda * window_s, size=size)
    return int(draw) if size is None else draw


def compute_traffic_stats(
    link: LinkBudget,
    channel: ChannelState,
    dist: PacketSizeDist,
    window_s: float,
    *,
    ber_mode: str = "standard",
    noise_mode: str = "band",
) -> TrafficStats:
    gain = rician_mean_gain(channel)
    rate = shannon_rate(link, gain, noise_mode)
    ber = qam_ber(link, ber_mode)
    raw = raw_expected_arrival_rate(rate, dist, ber)
    exp_lambda = expected_arrival_rate(rate, dist, ber)
    var_lambda = arrival_rate_variance(rate, dist)
    return TrafficStats(
        rate_bps=rate,
        ber=ber,
        p_loss=packet_loss_prob(ber, dist.mean_size),
        exp_lambda=exp_lambda,
        var_lambda=var_lambda,
        exp_count=expected_packet_count(exp_lambda, window_s),
        burstiness=burstiness(var_lambda, exp_lambda),
        clamped=raw < 0,
    )


# -- Monte-Carlo checks -------------------------------------------------------


@dataclass(frozen=True)
class MomentCheck:
    analytic_mean: float
    mc_mean: float
    mean_stderr: float
    analytic_var: float
    mc_var: float
    var_stderr: float

    @property
    def mean_z(self) -> float:
        return (self.mc_mean - self.analytic_mean) / self.mean_stderr

    @property
    def var_z(self) -> float:
        if self.var_stderr == 0:
            return 0.0 if self.mc_var == self.analytic_var else math.inf
        return (self.mc_var - self.analytic_var) / self.var_stderr

    def agrees(self, n_sigma: float = 3.0) -> bool:
        return abs(self.mean_z) <= n_sigma and abs(self.var_z) <= n_sigma


def sample_variance_stderr(x: np.ndarray) -> float:
    """Standard error of the unbiased sample variance (fourth-moment formula)."""
    n = x.size
    c = x - x.mean()
    m2 = np.mean(c**2)
    m4 = np.mean(c**4)
    return math.sqrt(max(m4 - m2**2 * (n - 3) / (n - 1), 0.0) / n)


def monte_carlo_moments(
    rate_bps: float, dist: PacketSizeDist, ber: float, n_draws: int, rng: np.random.Generator
) -> MomentCheck:
    """Compare the closed-form rate mean/variance with log-normal packet-size draws.

    Each draw evaluates (R/S)(1 - P_loss(S)) with the first-order loss form,
    so the sample mean targets E[lambda] and the sample variance Var[lambda].
    """
    sizes = rng.lognormal(dist.mu, math.sqrt(dist.sigma_sq), size=n_draws)
    lam = (rate_bps / sizes) * (1 + sizes * math.log1p(-ber))
    return MomentCheck(
        analytic_mean=raw_expected_arrival_rate(rate_bps, dist, ber),
        mc_mean=float(lam.mean()),
        mean_stderr=float(lam.std(ddof=1) / math.sqrt(n_draws)),
        analytic_var=arrival_rate_variance(rate_bps, dist),
        mc_var=float(lam.var(ddof=1)),
        var_stderr=sample_variance_stderr(lam),
    )


def write_trace(
    out: TextIO,
    rates: Iterable[tuple[int, float]],
    n_windows: int,
    window_s: float,
    seed: int,
) -> None:
    """Write ``user_id,window_index,packet_count`` rows of Poisson draws.

    Each user draws from its own stream derived from (seed, user_id).
    """
    out.write("user_id,window_index,packet_count\n")
    for user_id, exp_lambda in rates:
        rng = np.random.default_rng([seed, 0x7ACE, user_id])
        counts = sample_packet_count(exp_lambda, window_s, rng, size=n_windows)
        for w, c in enumerate(counts):
            out.write(f"{user_id},{w},{int(c)}\n")
