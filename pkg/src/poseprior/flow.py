"""Conditional affine-coupling normalizing flow over flattened poses.

Blocks apply y_kept = x_kept, y_rest = x_rest * exp(s(x_kept, c)) + t(x_kept, c)
with contiguous half masks that swap every block. The scale net is Tanh-bounded
so each dimension's log-det lies in (-1, 1); zero-initialized final layers make
the untrained flow the identity. Intermediate supervision treats the first s
blocks (base side) as a smaller flow and scores the same pose under it; taps
are train-time only and never touch forward/inverse evaluation.
"""

from __future__ import annotations

import math

import numpy as np

from .diffmath import Array, NonFiniteError, concat

LOG_2PI = math.log(2.0 * math.pi)


def default_taps(blocks: int) -> tuple:
    """Even block indices strictly inside the flow: {2, 4, ..., blocks-2}."""
    return tuple(range(2, blocks, 2))


def tap_weight(tap: int, blocks: int) -> float:
    """Supervision weight proportional to sub-network depth: tap / blocks."""
    return tap / blocks


class CouplingBlock:
    """One conditional affine coupling step.

    ``keep_first`` picks which contiguous half passes through unchanged. The
    scale net is Tanh throughout (bounded output); the translate net is
    ReLU-hidden with a linear head.
    """

    def __init__(self, dim: int, cond_dim: int, hidden: int, keep_first: bool,
                 rng: np.random.Generator, zero_last: bool = True):
        self.dim = dim
        self.cond_dim = cond_dim
        self.hidden = hidden
        self.keep_first = keep_first
        self.split = dim // 2
        kept = self.split if keep_first else dim - self.split
        rest = dim - kept
        in_dim = kept + cond_dim
        self.params = {}
        for net in ("s", "t"):
            self.params[f"{net}_w1"] = _init(rng, (in_dim, hidden))
            self.params[f"{net}_b1"] = Array(np.zeros(hidden), requires_grad=True)
            self.params[f"{net}_w2"] = _init(rng, (hidden, hidden))
            self.params[f"{net}_b2"] = Array(np.zeros(hidden), requires_grad=True)
            if zero_last:
                self.params[f"{net}_w3"] = Array(np.zeros((hidden, rest)), requires_grad=True)
            else:
                self.params[f"{net}_w3"] = _init(rng, (hidden, rest))
            self.params[f"{net}_b3"] = Array(np.zeros(rest), requires_grad=True)

    def _nets(self, kept: Array) -> tuple:
        p = self.params
        h = kept
        s = ((h @ p["s_w1"] + p["s_b1"]).tanh() @ p["s_w2"] + p["s_b2"]).tanh()
        s = (s @ p["s_w3"] + p["s_b3"]).tanh()
        t = (h @ p["t_w1"] + p["t_b1"]).leaky_relu(0.0)
        t = (t @ p["t_w2"] + p["t_b2"]).leaky_relu(0.0)
        t = t @ p["t_w3"] + p["t_b3"]
        return s, t

    def _split(self, x: Array) -> tuple:
        k = self.split
        if self.keep_first:
            return x[:, :k], x[:, k:]
        return x[:, k:], x[:, :k]

    def _join(self, kept: Array, rest: Array) -> Array:
        if self.keep_first:
            return concat([kept, rest], axis=1)
        return concat([rest, kept], axis=1)

    def forward(self, x: Array, c: Array | None):
        """Returns (y, logdet) with logdet = sum of scale outputs, shape (B,)."""
        kept, rest = self._split(x)
        s, t = self._nets(_with_cond(kept, c))
        y_rest = rest * s.exp() + t
        return self._join(kept, y_rest), s.sum(axis=1)

    def inverse(self, y: Array, c: Array | None):
        """Returns (x, logdet_inverse) with logdet_inverse = -sum(s)."""
        kept, rest = self._split(y)
        s, t = self._nets(_with_cond(kept, c))
        x_rest = (rest - t) * (-s).exp()
        return self._join(kept, x_rest), -s.sum(axis=1)


def _with_cond(kept: Array, c: Array | None) -> Array:
    if c is None:
        return kept
    return concat([kept, c], axis=1)


def _init(rng: np.random.Generator, shape) -> Array:
    fan_in = shape[0]
    w = rng.normal(scale=1.0 / math.sqrt(fan_in), size=shape)
    return Array(w, requires_grad=True)


class FlowModel:
    """Ordered coupling blocks, base-side first (block 1 touches the base space)."""

    def __init__(self, dim: int, cond_dim: int, blocks: int, hidden: int,
                 seed: int = 0, taps=None, zero_last: bool = True):
        self.dim = dim
        self.cond_dim = cond_dim
        self.hidden = hidden
        rng = np.random.default_rng(seed)
        self.blocks = [
            CouplingBlock(dim, cond_dim, hidden, keep_first=(i % 2 == 0),
                          rng=rng, zero_last=zero_last)
            for i in range(blocks)
        ]
        self.taps = tuple(taps) if taps is not None else default_taps(blocks)
        for s in self.taps:
            if not (1 <= s <= blocks):
                raise ValueError(f"tap index {s} outside 1..{blocks}")
        # condition standardization, set from training data before stage 1
        self.cond_mean = np.zeros(cond_dim)
        self.cond_std = np.ones(cond_dim)

    @property
    def block_count(self) -> int:
        return len(self.blocks)

    def set_cond_stats(self, mean, std) -> None:
        self.cond_mean = np.asarray(mean, dtype=np.float64).reshape(self.cond_dim)
        std = np.asarray(std, dtype=np.float64).reshape(self.cond_dim)
        self.cond_std = np.where(std < 1e-8, 1.0, std)

    def standardize_cond(self, c) -> Array | None:
        """(B, cond_dim) raw condition -> standardized Array (None if cond_dim=0)."""
        if self.cond_dim == 0:
            return None
        if isinstance(c, Array):
            return (c - Array(self.cond_mean)) / Array(self.cond_std)
        c = np.asarray(c, dtype=np.float64)
        return Array((c - self.cond_mean) / self.cond_std)

    def params(self) -> dict:
        out = {}
        for i, blk in enumerate(self.blocks):
            for name, arr in blk.params.items():
                out[f"block{i:02d}.{name}"] = arr
        return out

    # -- flow operations -------------------------------------------------------

    def forward(self, z, c, with_logdet: bool = False):
        """Base -> pose through all blocks. ``z`` (B, D), raw condition ``c``."""
        x = z if isinstance(z, Array) else Array(z)
        cs = self.standardize_cond(c) if c is not None else None
        total = None
        for blk in self.blocks:
            x, ld = blk.forward(x, cs)
            total = ld if total is None else total + ld
        if with_logdet:
            return x, total
        return x

    def inverse(self, x, c, with_logdet: bool = False):
        """Pose -> base; the exact oracle z* = f^{-1}(x, c)."""
        z = x if isinstance(x, Array) else Array(x)
        cs = self.standardize_cond(c) if c is not None else None
        total = None
        for blk in reversed(self.blocks):
            z, ld = blk.inverse(z, cs)
            total = ld if total is None else total + ld
        if with_logdet:
            return z, total
        return z

    def log_prob(self, x, c, taps: bool = False):
        """Exact log-density under the flow; optionally per-tap sub-network values.

        Returns ``logp`` of shape (B,), or ``(logp, {tap: logp_s})`` with
        ``taps=True``. Each tap s feeds the same pose into block s as if it
        were the flow's last block.
        """
        xa = x if isinstance(x, Array) else Array(x)
        cs = self.standardize_cond(c) if c is not None else None
        logp = self._log_prob_through(xa, cs, self.block_count)
        if not taps:
            return logp
        tap_logps = {s: self._log_prob_through(xa, cs, s) for s in self.taps}
        return logp, tap_logps

    def _log_prob_through(self, xa: Array, cs: Array | None, upto: int) -> Array:
        z = xa
        total = None
        for blk in reversed(self.blocks[:upto]):
            z, ld = blk.inverse(z, cs)
            total = ld if total is None else total + ld
        base = (z.square().sum(axis=1) * -0.5) - 0.5 * self.dim * LOG_2PI
        if total is None:
            return base
        return base + total

    def nll_loss(self, x, c) -> Array:
        """Mean negative weighted log-likelihood including tap terms."""
        if isinstance(x, Array):
            n = x.shape[0]
        else:
            n = np.asarray(x).shape[0]
        if n == 0:
            raise ValueError("nll_loss over an empty batch")
        logp, tap_logps = self.log_prob(x, c, taps=True)
        total = logp
        for s, lp in tap_logps.items():
            total = total + lp * tap_weight(s, self.block_count)
        return -total.mean()

    def nll_plain(self, x, c) -> float:
        """Mean plain NLL (no taps), computed without gradient tracking."""
        lp = self.log_prob(x, c, taps=False)
        val = -lp.data.mean()
        if not np.isfinite(val):
            raise NonFiniteError("NLL is not finite")
        return float(val)
