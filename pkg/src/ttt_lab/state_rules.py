"""Recurrent state-update and read rules over small dense matrices.

A stream of observation token matrices updates a recurrent state, and
queries read stored associations back out.  Three state layouts are
supported, each with its own update family:

* a growing key/value cache read by softmax cross-attention,
* a fixed bank of state tokens updated by softmax attention over the
  incoming tokens (optionally scaled per state token by a gate vector),
* a fast-weight matrix updated by the delta rule or a plain Hebbian
  outer product.

The gated token update with a constant gate of 1.0 reproduces the
ungated token update exactly; both paths share one increment helper so
the equivalence holds bit for bit.

All functions are pure: inputs are never mutated, identical inputs give
identical outputs, and every array is carried in float64.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Union

import numpy as np
from scipy.special import expit

__all__ = [
    "ObservationTokens",
    "TokenState",
    "FastWeightMatrix",
    "KvCache",
    "ProjectionSet",
    "GateVector",
    "ConstantScalar",
    "InputScalarSigmoid",
    "PerTokenInputSigmoid",
    "ConfidenceGate",
    "BetaMode",
    "FullAttentionAppend",
    "VanillaSoftmaxRnn",
    "LinearAttentionHebbian",
    "DeltaRule",
    "Ttt3r",
    "RuleKind",
    "default_scale",
    "project",
    "softmax_rows",
    "update_full_attention",
    "read_full_attention",
    "update_vanilla_rnn",
    "recon_loss",
    "recon_loss_grad",
    "delta_rule_update",
    "hebbian_update",
    "confidence_gate",
    "ttt3r_update",
    "read_token_state",
    "read_fast_weight",
]

# Sigmoid outputs are clamped to the largest open subinterval of (0, 1)
# representable in float64.  Without the clamp, expit(z) rounds to
# exactly 1.0 for z >= 37 and the strict-bounds invariant on gates
# would fail even though the true value is merely close to 1.
_GATE_LO = np.nextafter(0.0, 1.0)
_GATE_HI = np.nextafter(1.0, 0.0)


def _as_float_matrix(value, name: str) -> np.ndarray:
    arr = np.asarray(value, dtype=np.float64)
    if arr.ndim != 2:
        raise ValueError(f"{name} must be a 2-D array, got shape {arr.shape}")
    if arr.size and not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains non-finite entries")
    return arr


def _as_float_vector(value, name: str) -> np.ndarray:
    arr = np.asarray(value, dtype=np.float64)
    if arr.ndim != 1:
        raise ValueError(f"{name} must be a 1-D array, got shape {arr.shape}")
    if arr.size and not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains non-finite entries")
    return arr


def _frozen(arr: np.ndarray) -> np.ndarray:
    out = arr.copy()
    out.setflags(write=False)
    return out


def _exact_identity(w: np.ndarray) -> bool:
    # exactly c nonzeros, all of them 1.0 on the diagonal
    return np.count_nonzero(w) == w.shape[0] and bool(
        np.all(np.diagonal(w) == 1.0)
    )


@dataclass(frozen=True)
class ObservationTokens:
    """One frame of m >= 1 observation tokens, each of width c."""

    tokens: np.ndarray
    frame_index: int = 0

    def __post_init__(self):
        arr = _as_float_matrix(self.tokens, "tokens")
        if arr.shape[0] < 1 or arr.shape[1] < 1:
            raise ValueError(f"tokens must be non-empty, got shape {arr.shape}")
        if self.frame_index < 0:
            raise ValueError("frame_index must be >= 0")
        object.__setattr__(self, "tokens", _frozen(arr))

    @property
    def m(self) -> int:
        return self.tokens.shape[0]

    @property
    def c(self) -> int:
        return self.tokens.shape[1]


@dataclass(frozen=True)
class TokenState:
    """A fixed bank of n >= 1 state tokens of width c."""

    tokens: np.ndarray

    def __post_init__(self):
        arr = _as_float_matrix(self.tokens, "state tokens")
        if arr.shape[0] < 1 or arr.shape[1] < 1:
            raise ValueError(f"state tokens must be non-empty, got shape {arr.shape}")
        object.__setattr__(self, "tokens", _frozen(arr))

    @property
    def n(self) -> int:
        return self.tokens.shape[0]

    @property
    def c(self) -> int:
        return self.tokens.shape[1]


@dataclass(frozen=True)
class FastWeightMatrix:
    """A c_v x c_k associative weight matrix."""

    s: np.ndarray

    def __post_init__(self):
        arr = _as_float_matrix(self.s, "fast-weight matrix")
        if arr.shape[0] < 1 or arr.shape[1] < 1:
            raise ValueError(f"fast-weight matrix must be non-empty, got {arr.shape}")
        object.__setattr__(self, "s", _frozen(arr))

    @classmethod
    def zeros(cls, c_v: int, c_k: int) -> "FastWeightMatrix":
        return cls(np.zeros((c_v, c_k)))

    @property
    def c_v(self) -> int:
        return self.s.shape[0]

    @property
    def c_k(self) -> int:
        return self.s.shape[1]


@dataclass(frozen=True)
class KvCache:
    """An append-only sequence of projected (keys, values) frame pairs.

    One entry per ingested frame: entry i holds the m_i x c key and
    value matrices of frame i, so len(cache) is the frame count.
    """

    entries: tuple = ()

    def __post_init__(self):
        checked = []
        c = None
        for i, (k, v) in enumerate(self.entries):
            k = _as_float_matrix(k, f"cache keys {i}")
            v = _as_float_matrix(v, f"cache values {i}")
            if k.shape != v.shape:
                raise ValueError(
                    f"cache entry {i}: keys shape {k.shape} != values shape {v.shape}"
                )
            if c is None:
                c = k.shape[1]
            elif k.shape[1] != c:
                raise ValueError(f"cache entry {i}: width {k.shape[1]} != {c}")
            checked.append((_frozen(k), _frozen(v)))
        object.__setattr__(self, "entries", tuple(checked))

    def __len__(self) -> int:
        return len(self.entries)

    def appended(self, keys, values) -> "KvCache":
        """A new cache with one validated entry added at the end.

        Prior entries were validated when this cache was built and are
        reused as-is, so appending costs O(new entry) instead of the
        O(cache) revalidation the constructor would do.
        """
        i = len(self.entries)
        k = _frozen(_as_float_matrix(keys, f"cache keys {i}"))
        v = _frozen(_as_float_matrix(values, f"cache values {i}"))
        if k.shape != v.shape:
            raise ValueError(
                f"cache entry {i}: keys shape {k.shape} != values shape {v.shape}"
            )
        if self.entries and k.shape[1] != self.width:
            raise ValueError(f"cache entry {i}: width {k.shape[1]} != {self.width}")
        out = object.__new__(KvCache)
        object.__setattr__(out, "entries", self.entries + ((k, v),))
        return out

    @property
    def width(self):
        return self.entries[0][0].shape[1] if self.entries else None

    def keys(self) -> np.ndarray:
        return np.vstack([k for k, _ in self.entries])

    def values(self) -> np.ndarray:
        return np.vstack([v for _, v in self.entries])


def _projection_arrays(c: int, rng: np.random.Generator):
    bound = 1.0 / math.sqrt(c)
    w_q = rng.uniform(-bound, bound, (c, c))
    w_k = rng.uniform(-bound, bound, (c, c))
    w_v = rng.uniform(-bound, bound, (c, c))
    gate_map = rng.uniform(-bound, bound, c)
    return w_q, w_k, w_v, gate_map


@dataclass(frozen=True)
class ProjectionSet:
    """Frozen square projection maps w_q, w_k, w_v plus a gate map vector.

    The projections are "slow weights": they are fixed for the lifetime
    of a stream while the state plays the role of fast weights.
    """

    w_q: np.ndarray
    w_k: np.ndarray
    w_v: np.ndarray
    gate_map: np.ndarray
    seed: int = 0

    def __post_init__(self):
        w_q = _as_float_matrix(self.w_q, "w_q")
        w_k = _as_float_matrix(self.w_k, "w_k")
        w_v = _as_float_matrix(self.w_v, "w_v")
        gate_map = _as_float_vector(self.gate_map, "gate_map")
        c = w_q.shape[0]
        for name, w in (("w_q", w_q), ("w_k", w_k), ("w_v", w_v)):
            if w.shape != (c, c):
                raise ValueError(f"{name} must be square of width {c}, got {w.shape}")
        if gate_map.shape != (c,):
            raise ValueError(
                f"gate_map must have length {c}, got {gate_map.shape[0]}"
            )
        object.__setattr__(self, "w_q", _frozen(w_q))
        object.__setattr__(self, "w_k", _frozen(w_k))
        object.__setattr__(self, "w_v", _frozen(w_v))
        object.__setattr__(self, "gate_map", _frozen(gate_map))
        object.__setattr__(self, "_skip_q", _exact_identity(self.w_q))
        object.__setattr__(self, "_skip_k", _exact_identity(self.w_k))
        object.__setattr__(self, "_skip_v", _exact_identity(self.w_v))

    @property
    def c(self) -> int:
        return self.w_q.shape[0]

    # Multiplying by an exact identity reproduces the operand, so the
    # product is skipped; at width 4096 that saves a 134 MB matrix scan
    # per call without changing any result.
    def project_q(self, tokens: np.ndarray) -> np.ndarray:
        return tokens if self._skip_q else tokens @ self.w_q

    def project_k(self, tokens: np.ndarray) -> np.ndarray:
        return tokens if self._skip_k else tokens @ self.w_k

    def project_v(self, tokens: np.ndarray) -> np.ndarray:
        return tokens if self._skip_v else tokens @ self.w_v

    @classmethod
    def seeded(cls, c: int, seed: int) -> "ProjectionSet":
        """Draw all maps i.i.d. uniform on (-1/sqrt(c), 1/sqrt(c))."""
        if c < 1:
            raise ValueError("c must be >= 1")
        rng = np.random.default_rng(seed)
        w_q, w_k, w_v, gate_map = _projection_arrays(c, rng)
        return cls(w_q, w_k, w_v, gate_map, seed=seed)

    @classmethod
    def identity(cls, c: int, seed: int = 0) -> "ProjectionSet":
        """Identity w_q/w_k/w_v with a seeded gate map, for analytic tests."""
        if c < 1:
            raise ValueError("c must be >= 1")
        rng = np.random.default_rng(seed)
        _, _, _, gate_map = _projection_arrays(c, rng)
        eye = np.eye(c)
        return cls(eye, eye, eye, gate_map, seed=seed)


@dataclass(frozen=True)
class GateVector:
    """Per-state-token learning rates, each in (0, 1]."""

    beta: np.ndarray

    def __post_init__(self):
        beta = _as_float_vector(self.beta, "beta")
        if beta.size < 1:
            raise ValueError("beta must be non-empty")
        if np.any(beta <= 0.0) or np.any(beta > 1.0):
            raise ValueError("beta entries must lie in (0, 1]")
        object.__setattr__(self, "beta", _frozen(beta))


@dataclass(frozen=True)
class ConstantScalar:
    """Fixed learning rate shared by every state token."""

    value: float = 1.0

    def __post_init__(self):
        if not (0.0 < self.value <= 1.0):
            raise ValueError(f"constant gate must lie in (0, 1], got {self.value}")


@dataclass(frozen=True)
class InputScalarSigmoid:
    """One shared rate: sigmoid of the mean gate-map response of the input."""


@dataclass(frozen=True)
class PerTokenInputSigmoid:
    """Per-token rate: sigmoid of each state token's gate-map response."""


@dataclass(frozen=True)
class ConfidenceGate:
    """Per-token rate from reduced attention logits (see confidence_gate)."""

    reduce: str = "sum"

    def __post_init__(self):
        if self.reduce not in ("sum", "mean"):
            raise ValueError(f"reduce must be 'sum' or 'mean', got {self.reduce!r}")


BetaMode = Union[ConstantScalar, InputScalarSigmoid, PerTokenInputSigmoid, ConfidenceGate]


@dataclass(frozen=True)
class FullAttentionAppend:
    """Append projected tokens to a key/value cache; read by cross-attention."""


@dataclass(frozen=True)
class VanillaSoftmaxRnn:
    """Additive softmax-attention update of a fixed token state."""


@dataclass(frozen=True)
class LinearAttentionHebbian:
    """Fast-weight outer-product accumulation without forgetting."""


@dataclass(frozen=True)
class DeltaRule:
    """Fast-weight correction step S' = S - beta (S k - v) k^T."""

    mode: BetaMode = field(default_factory=ConstantScalar)


@dataclass(frozen=True)
class Ttt3r:
    """Gated token-state update S' = S + diag(beta) softmax(Q_s K_x^T) V_x."""

    mode: BetaMode = field(default_factory=lambda: ConfidenceGate())


RuleKind = Union[FullAttentionAppend, VanillaSoftmaxRnn, LinearAttentionHebbian, DeltaRule, Ttt3r]


def default_scale(c: int) -> float:
    """Attention temperature 1/sqrt(c) used when no scale is given."""
    if c < 1:
        raise ValueError("c must be >= 1")
    return 1.0 / math.sqrt(c)


def _resolve_scale(scale, c: int) -> float:
    if scale is None:
        return default_scale(c)
    scale = float(scale)
    if not (scale > 0.0) or not math.isfinite(scale):
        raise ValueError(f"scale must be positive and finite, got {scale}")
    return scale


def project(x: ObservationTokens, p: ProjectionSet):
    """Project a frame into query, key and value rows: (X W_q, X W_k, X W_v)."""
    if x.c != p.c:
        raise ValueError(f"token width {x.c} does not match projection width {p.c}")
    t = x.tokens
    return p.project_q(t), p.project_k(t), p.project_v(t)


def softmax_rows(logits, scale=1.0) -> np.ndarray:
    """Row-wise softmax of scale * logits.

    The row maximum is subtracted before exponentiation, so rows whose
    scaled entries reach +-1000 still produce finite weights.  Every
    output row sums to 1 within 1e-12 and a row of equal logits maps to
    the uniform distribution.
    """
    arr = _as_float_matrix(logits, "logits")
    if arr.shape[1] < 1:
        raise ValueError("logits must have at least one column")
    scale = float(scale)
    if not (scale > 0.0) or not math.isfinite(scale):
        raise ValueError(f"scale must be positive and finite, got {scale}")
    z = scale * arr
    z = z - z.max(axis=1, keepdims=True)
    w = np.exp(z)
    return w / w.sum(axis=1, keepdims=True)


def update_full_attention(cache: KvCache, x: ObservationTokens, p: ProjectionSet) -> KvCache:
    """Append the frame's projected (keys, values) pair as one cache entry."""
    _, k, v = project(x, p)
    if len(cache) and cache.width != p.c:
        raise ValueError(
            f"cache width {cache.width} does not match projection width {p.c}"
        )
    return cache.appended(k, v)


def read_full_attention(cache: KvCache, x: ObservationTokens, p: ProjectionSet, scale=None) -> np.ndarray:
    """Residual cross-attention read: X + softmax(Q_x K_cache^T) V_cache."""
    if len(cache) == 0:
        raise ValueError("cannot read from an empty cache")
    if x.c != p.c:
        raise ValueError(f"token width {x.c} does not match projection width {p.c}")
    q = p.project_q(x.tokens)
    if cache.width != p.c:
        raise ValueError(f"cache width {cache.width} does not match projection width {p.c}")
    keys = cache.keys()
    vals = cache.values()
    weights = softmax_rows(q @ keys.T, _resolve_scale(scale, p.c))
    return x.tokens + weights @ vals


def _token_increment(s: TokenState, x: ObservationTokens, p: ProjectionSet, scale):
    """Shared attention increment softmax(Q_s K_x^T) V_x and its raw logits."""
    if s.c != p.c or x.c != p.c:
        raise ValueError(
            f"state width {s.c} and token width {x.c} must both match projection width {p.c}"
        )
    q_s = p.project_q(s.tokens)
    k_x = p.project_k(x.tokens)
    v_x = p.project_v(x.tokens)
    logits = q_s @ k_x.T
    increment = softmax_rows(logits, _resolve_scale(scale, p.c)) @ v_x
    return increment, q_s, k_x


def update_vanilla_rnn(s: TokenState, x: ObservationTokens, p: ProjectionSet, scale=None) -> TokenState:
    """Ungated token update S' = S + softmax(Q_s K_x^T) V_x."""
    increment, _, _ = _token_increment(s, x, p, scale)
    return TokenState(s.tokens + increment)


def recon_loss(s: FastWeightMatrix, keys: np.ndarray, values: np.ndarray) -> float:
    """Reconstruction objective ||S K - V||_F^2 for column-stacked K and V."""
    keys = _as_float_matrix(keys, "keys")
    values = _as_float_matrix(values, "values")
    if keys.shape[0] != s.c_k:
        raise ValueError(f"keys have {keys.shape[0]} rows, expected {s.c_k}")
    if values.shape[0] != s.c_v:
        raise ValueError(f"values have {values.shape[0]} rows, expected {s.c_v}")
    if keys.shape[1] != values.shape[1]:
        raise ValueError(
            f"keys and values must pair up: {keys.shape[1]} vs {values.shape[1]} columns"
        )
    r = s.s @ keys - values
    return float(np.sum(r * r))


def recon_loss_grad(s: FastWeightMatrix, keys: np.ndarray, values: np.ndarray) -> np.ndarray:
    """Gradient (S K - V) K^T of half the reconstruction objective.

    With a single unit key this is exactly the delta-rule correction
    direction (S k - v) k^T, which is what ties the update to gradient
    descent on the reconstruction objective.
    """
    keys = _as_float_matrix(keys, "keys")
    values = _as_float_matrix(values, "values")
    if keys.shape[0] != s.c_k or values.shape[0] != s.c_v:
        raise ValueError(
            f"gradient dims mismatch: S is {s.c_v}x{s.c_k}, K {keys.shape}, V {values.shape}"
        )
    if keys.shape[1] != values.shape[1]:
        raise ValueError(
            f"keys and values must pair up: {keys.shape[1]} vs {values.shape[1]} columns"
        )
    return (s.s @ keys - values) @ keys.T


def delta_rule_update(s: FastWeightMatrix, key: np.ndarray, value: np.ndarray, beta: float) -> FastWeightMatrix:
    """One gradient step S' = S - beta (S k - v) k^T for a unit key k."""
    key = _as_float_vector(key, "key")
    value = _as_float_vector(value, "value")
    if key.shape[0] != s.c_k:
        raise ValueError(f"key length {key.shape[0]} != c_k {s.c_k}")
    if value.shape[0] != s.c_v:
        raise ValueError(f"value length {value.shape[0]} != c_v {s.c_v}")
    norm = np.linalg.norm(key)
    if abs(norm - 1.0) > 1e-9:
        raise ValueError(f"key must be unit-norm within 1e-9, got norm {norm!r}")
    beta = float(beta)
    if not (0.0 < beta <= 1.0):
        raise ValueError(f"beta must lie in (0, 1], got {beta}")
    residual = s.s @ key - value
    return FastWeightMatrix(s.s - beta * np.outer(residual, key))


def hebbian_update(s: FastWeightMatrix, key: np.ndarray, value: np.ndarray) -> FastWeightMatrix:
    """Accumulate the outer product: S' = S + v k^T."""
    key = _as_float_vector(key, "key")
    value = _as_float_vector(value, "value")
    if key.shape[0] != s.c_k:
        raise ValueError(f"key length {key.shape[0]} != c_k {s.c_k}")
    if value.shape[0] != s.c_v:
        raise ValueError(f"value length {value.shape[0]} != c_v {s.c_v}")
    return FastWeightMatrix(s.s + np.outer(value, key))


def _sigmoid_open(z) -> np.ndarray:
    out = expit(np.asarray(z, dtype=np.float64))
    return np.clip(out, _GATE_LO, _GATE_HI)


def confidence_gate(q_s: np.ndarray, k_x: np.ndarray, reduce: str = "sum", scale=None) -> GateVector:
    """Per-state-token gate beta_i = sigmoid(reduce_j of scale * q_i . k_j).

    The same temperature that scales the attention logits feeds the
    gate, so a state token whose queries barely match the incoming keys
    (large negative reduced logit) gets a learning rate near 0 and the
    update nearly freezes.  Outputs are clamped to the open interval
    (0, 1): saturated logits of +-40 or beyond stay strictly inside.
    """
    q_s = _as_float_matrix(q_s, "q_s")
    k_x = _as_float_matrix(k_x, "k_x")
    if q_s.shape[1] != k_x.shape[1]:
        raise ValueError(f"q_s width {q_s.shape[1]} != k_x width {k_x.shape[1]}")
    if k_x.shape[0] < 1:
        raise ValueError("k_x must contain at least one token")
    if reduce not in ("sum", "mean"):
        raise ValueError(f"reduce must be 'sum' or 'mean', got {reduce!r}")
    logits = _resolve_scale(scale, q_s.shape[1]) * (q_s @ k_x.T)
    reduced = logits.sum(axis=1) if reduce == "sum" else logits.mean(axis=1)
    return GateVector(_sigmoid_open(reduced))


def _gate_for_mode(mode: BetaMode, s: TokenState, x: ObservationTokens, p: ProjectionSet,
                   q_s: np.ndarray, k_x: np.ndarray, scale: float) -> GateVector:
    if isinstance(mode, ConstantScalar):
        return GateVector(np.full(s.n, mode.value))
    if isinstance(mode, InputScalarSigmoid):
        shared = _sigmoid_open(float(np.mean(x.tokens @ p.gate_map)))
        return GateVector(np.full(s.n, shared))
    if isinstance(mode, PerTokenInputSigmoid):
        return GateVector(_sigmoid_open(s.tokens @ p.gate_map))
    if isinstance(mode, ConfidenceGate):
        logits = scale * (q_s @ k_x.T)
        reduced = logits.sum(axis=1) if mode.reduce == "sum" else logits.mean(axis=1)
        return GateVector(_sigmoid_open(reduced))
    raise TypeError(f"unknown gate mode {mode!r}")


def ttt3r_update(s: TokenState, x: ObservationTokens, p: ProjectionSet, mode: BetaMode,
                 scale=None):
    """Gated token update S' = S + diag(beta) softmax(Q_s K_x^T) V_x.

    Returns (new state, gate vector).  With mode ConstantScalar(1.0)
    the result is bitwise identical to update_vanilla_rnn, since the
    increment is computed by the same helper and scaling by 1.0 is
    exact.
    """
    increment, q_s, k_x = _token_increment(s, x, p, scale)
    gate = _gate_for_mode(mode, s, x, p, q_s, k_x, _resolve_scale(scale, p.c))
    return TokenState(s.tokens + gate.beta[:, None] * increment), gate


def read_token_state(s: TokenState, query: np.ndarray, p: ProjectionSet, scale=None) -> np.ndarray:
    """Attend queries over the state: softmax(Q W_q (S W_k)^T) (S W_v)."""
    query = _as_float_matrix(query, "query")
    if query.shape[1] != p.c or s.c != p.c:
        raise ValueError(
            f"query width {query.shape[1]} and state width {s.c} must match projection width {p.c}"
        )
    q = p.project_q(query)
    k_s = p.project_k(s.tokens)
    v_s = p.project_v(s.tokens)
    return softmax_rows(q @ k_s.T, _resolve_scale(scale, p.c)) @ v_s


def read_fast_weight(s: FastWeightMatrix, query: np.ndarray) -> np.ndarray:
    """Linear readout S q of a fast-weight matrix."""
    query = _as_float_vector(query, "query")
    if query.shape[0] != s.c_k:
        raise ValueError(f"query length {query.shape[0]} != c_k {s.c_k}")
    return s.s @ query
