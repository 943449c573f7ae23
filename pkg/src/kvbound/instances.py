"""Adversarial streams from the space and time lower-bound constructions.

* ``index-reduction``: ``n`` tokens with zero queries, nearly orthonormal
  keys ``k_i = f(e_i)`` from a seeded JL projector and values holding a bit
  matrix ``x``.  A query ``C * k_i`` spikes the softmax on token ``i`` so the
  attention output reveals row ``i`` of ``x``.
* ``window-reduction``: the same trick confined to the last ``W`` tokens;
  everything earlier has zero key and zero value.
* ``time-family`` / ``time-sigma``: two streams that differ at one position
  yet have attention outputs a constant factor apart.

Stream positions are 0-based throughout.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.special import expit

from .attention import DomainError, KvCache, TokenTriple, exact_attention, softmax_weights, window_attention_arrays
from .jl import JlProjector, PreservationReport, dim_for, verify_basis

KINDS = ("index-reduction", "window-reduction", "time-family", "time-sigma", "random")


class ThresholdError(DomainError):
    """The decoding thresholds do not separate the two bit values."""


@dataclass
class HardInstance:
    kind: str
    n: int
    d: int
    queries: np.ndarray
    keys: np.ndarray
    values: np.ndarray
    eps: float = 0.0
    eta: float = 0.0
    C: float = 0.0
    W: int | None = None
    x: np.ndarray | None = None
    planted_index: int | None = None
    seed: int = 0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise DomainError(f"unknown instance kind {self.kind!r}")
        for name in ("queries", "keys", "values"):
            arr = np.asarray(getattr(self, name), dtype=np.float64)
            if arr.shape != (self.n, self.d):
                raise DomainError(f"{name} has shape {arr.shape}, expected {(self.n, self.d)}")
            setattr(self, name, arr)
        if self.x is not None:
            self.x = np.asarray(self.x, dtype=np.uint8)

    @property
    def instance_id(self) -> str:
        w = f"-w{self.W}" if self.W is not None else ""
        return f"{self.kind}-n{self.n}-d{self.d}{w}-s{self.seed}"

    @property
    def stream(self) -> list[TokenTriple]:
        return [TokenTriple(q, k, v) for q, k, v in zip(self.queries, self.keys, self.values)]

    def projector(self) -> JlProjector:
        return JlProjector(self.seed, self.n, self.d)

    def planted_rows(self) -> np.ndarray:
        """Stream positions whose keys are JL basis images."""
        if self.kind == "index-reduction":
            return np.arange(self.n)
        if self.kind == "window-reduction":
            return np.arange(self.n - self.W, self.n)
        raise DomainError(f"{self.kind} instances have no planted rows")


# ---------------------------------------------------------------------------
# constants and thresholds


def readout_constant(n: int, eps: float, eta: float = 0.0) -> float:
    """Query scale ``C = (2 ln n - ln((1-eta)/(1+eta))) / (1 - 2 eps)``.

    At ``eta = 0`` this is ``2 ln n / (1 - 2 eps)``, twice the smallest scale
    at which the thresholds separate.
    """
    _check_eps(eps)
    if not 0.0 <= eta < 1.0:
        raise DomainError("eta must lie in [0, 1)")
    return (2.0 * math.log(n) - math.log((1.0 - eta) / (1.0 + eta))) / (1.0 - 2.0 * eps)


@dataclass(frozen=True)
class Thresholds:
    lo: float
    hi: float
    eta: float = 0.0

    @property
    def cut(self) -> float:
        """Decision point halfway between the perturbed bounds."""
        return 0.5 * ((1.0 + self.eta) * self.lo + (1.0 - self.eta) * self.hi)


def thresholds(n: int, C: float, eps: float, eta: float = 0.0) -> Thresholds:
    """``lo = n e^{C eps} / (n e^{C eps} + e^{C(1-eps)})`` and ``hi = 1 - lo``.

    Evaluated as logistic functions of ``C(1 - 2 eps) - ln n`` so that large
    ``C`` does not overflow.
    """
    if n < 1 or C <= 0:
        raise DomainError("thresholds need n >= 1 and C > 0")
    _check_eps(eps)
    if not 0.0 <= eta < 1.0:
        raise DomainError("eta must lie in [0, 1)")
    margin = C * (1.0 - 2.0 * eps) - math.log(n)
    lo, hi = float(expit(-margin)), float(expit(margin))
    if not lo < hi:
        raise ThresholdError(f"lo < hi violated: {lo:.6g} >= {hi:.6g} (C too small for n={n}, eps={eps})")
    if eta > 0 and not (1.0 + eta) * lo < (1.0 - eta) * hi:
        raise ThresholdError(
            f"(1+eta)*lo < (1-eta)*hi violated: {(1 + eta) * lo:.6g} >= {(1 - eta) * hi:.6g}"
        )
    return Thresholds(lo, hi, eta)


def _check_eps(eps: float) -> None:
    if not 0.0 < eps < 0.5:
        raise DomainError("eps must lie in (0, 1/2)")


# ---------------------------------------------------------------------------
# generators


def random_bits(rows: int, cols: int, seed: int) -> np.ndarray:
    return np.random.default_rng(seed).integers(0, 2, size=(rows, cols), dtype=np.uint8)


def build_index_instance(x, eps: float, seed: int, eta: float = 0.0) -> HardInstance:
    x = np.asarray(x, dtype=np.uint8)
    if x.ndim != 2:
        raise DomainError("x must be an n x d bit matrix")
    _check_eps(eps)
    n, d = x.shape
    proj = JlProjector(seed, n, d)
    keys = np.vstack([proj.project_basis(i) for i in range(n)])
    return HardInstance(
        "index-reduction", n, d, np.zeros((n, d)), keys, x.astype(np.float64),
        eps=eps, eta=eta, C=readout_constant(n, eps, eta), x=x, seed=seed,
    )


def build_window_instance(x, n: int, W: int, eps: float, seed: int, eta: float = 0.0) -> HardInstance:
    x = np.asarray(x, dtype=np.uint8)
    if x.ndim != 2 or x.shape[0] != W:
        raise DomainError("x must be a W x d bit matrix")
    if not 1 <= W <= n:
        raise DomainError(f"window W={W} must satisfy 1 <= W <= n={n}")
    _check_eps(eps)
    d = x.shape[1]
    proj = JlProjector(seed, n, d)
    keys = np.zeros((n, d))
    values = np.zeros((n, d))
    for row, pos in enumerate(range(n - W, n)):
        keys[pos] = proj.project_basis(pos)
        values[pos] = x[row]
    return HardInstance(
        "window-reduction", n, d, np.zeros((n, d)), keys, values,
        eps=eps, eta=eta, C=readout_constant(n, eps, eta), W=W, x=x, seed=seed,
    )


def _time_values(n: int, d: int) -> tuple[int, np.ndarray]:
    root = math.isqrt(n)
    if n < 4 or root * root != n:
        raise DomainError(f"n={n} must be a perfect square >= 4")
    values = np.ones((n, d))
    values[n - root:] = root
    return root, values


def time_query(n: int, d: int) -> np.ndarray:
    return np.full(d, 2.0 / d * math.log(n - 1))


def build_time_family(n: int, d: int, i: int) -> HardInstance:
    """Member ``H(i)``: a lone all-ones key at position ``i`` that takes
    ``1 - 1/n`` of the final query's softmax mass."""
    _, values = _time_values(n, d)
    if not 0 <= i < n:
        raise DomainError(f"index {i} outside [0, {n})")
    queries = np.zeros((n, d))
    queries[-1] = time_query(n, d)
    keys = np.zeros((n, d))
    keys[i] = 1.0
    return HardInstance("time-family", n, d, queries, keys, values, planted_index=i)


def build_time_sigma(n: int, d: int, query: str = "family") -> HardInstance:
    """The all-zero-key stream ``sigma``; its attention output is the plain
    value average ``(2 - 1/sqrt n)``.

    ``query="family"`` reuses the ``H(i)`` final query so the two streams
    differ only in the key at ``i``; ``query="ones"`` uses the all-ones
    query.  Zero keys make the output identical either way.
    """
    _, values = _time_values(n, d)
    queries = np.zeros((n, d))
    if query == "family":
        queries[-1] = time_query(n, d)
    elif query == "ones":
        queries[-1] = 1.0
    else:
        raise DomainError(f"unknown sigma query {query!r}")
    return HardInstance("time-sigma", n, d, queries, np.zeros((n, d)), values)


def build_random_instance(n: int, d: int, seed: int, value_range=(1.0, 2.0)) -> HardInstance:
    """Benign Gaussian queries/keys with values uniform on ``value_range``."""
    rng = np.random.default_rng(seed)
    scale = 1.0 / math.sqrt(math.sqrt(d))
    queries = rng.standard_normal((n, d)) * scale
    keys = rng.standard_normal((n, d)) * scale
    values = rng.uniform(*value_range, size=(n, d))
    return HardInstance("random", n, d, queries, keys, values, seed=seed)


def stream_differences(a: HardInstance, b: HardInstance) -> list[int]:
    """Positions where two equal-length streams differ in any of q, k, v."""
    if (a.n, a.d) != (b.n, b.d):
        raise DomainError("streams have different shapes")
    diff = (a.queries != b.queries) | (a.keys != b.keys) | (a.values != b.values)
    return np.flatnonzero(diff.any(axis=1)).tolist()


# ---------------------------------------------------------------------------
# readout and decoding


def bob_query(inst: HardInstance, i: int) -> TokenTriple:
    """``(C * k, 0, 0)`` where ``k`` is the key planted for row ``i`` of ``x``."""
    if inst.kind not in ("index-reduction", "window-reduction"):
        raise DomainError(f"bob_query needs a reduction instance, got {inst.kind}")
    rows = inst.planted_rows()
    if not 0 <= i < rows.size:
        raise DomainError(f"row {i} outside [0, {rows.size})")
    zero = np.zeros(inst.d)
    return TokenTriple(inst.C * inst.keys[rows[i]], zero, zero)


def readout_weights(inst: HardInstance, i: int) -> np.ndarray:
    """Softmax weights over the ``n + 1`` positions after Bob's token."""
    bob = bob_query(inst, i)
    keys = np.vstack([inst.keys, bob.k])
    if inst.kind == "index-reduction":
        scores = keys @ bob.q
    else:
        scores = np.zeros(inst.n + 1)
        # Bob's own key is zero, so widening the window by one to keep all
        # W planted rows visible changes nothing else
        start = inst.n - inst.W
        scores[start:] = keys[start:] @ bob.q
    return softmax_weights(scores)


def readout(inst: HardInstance, i: int) -> np.ndarray:
    """Exact attention output after Bob appends his query for row ``i``."""
    bob = bob_query(inst, i)
    if inst.kind == "index-reduction":
        cache = KvCache.from_arrays(np.vstack([inst.keys, bob.k]), np.vstack([inst.values, bob.v]))
        return exact_attention(cache, bob.q)
    keys = np.vstack([inst.keys, bob.k])
    values = np.vstack([inst.values, bob.v])
    return window_attention_arrays(keys, values, bob.q, inst.W + 1)


def instance_thresholds(inst: HardInstance, eta: float | None = None) -> Thresholds:
    return thresholds(inst.n, inst.C, inst.eps, inst.eta if eta is None else eta)


def jl_event(inst: HardInstance) -> PreservationReport:
    """Inner-product preservation of the planted keys at tolerance ``eps``."""
    return verify_basis(inst.projector(), inst.planted_rows(), inst.eps)


@dataclass
class DecodeReport:
    correct: np.ndarray  # bool, same shape as x
    outputs: np.ndarray
    jl: PreservationReport
    th: Thresholds

    @property
    def all_correct(self) -> bool:
        return bool(self.correct.all())

    @property
    def failures(self) -> int:
        return int((~self.correct).sum())


def decode(inst: HardInstance, eta: float = 0.0, perturb=None, rows=None) -> DecodeReport:
    """Read every planted bit back out of exact attention outputs.

    ``perturb(output, rng_row)`` may distort each output (e.g. a
    ``(1 +/- eta)`` multiplicative error) before thresholding against
    ``Thresholds.cut``.
    """
    if inst.x is None:
        raise DomainError("instance carries no bit matrix to decode")
    th = instance_thresholds(inst, eta)
    rows = range(inst.x.shape[0]) if rows is None else rows
    outputs = np.zeros(inst.x.shape)
    for i in rows:
        out = readout(inst, i)
        outputs[i] = perturb(out, i) if perturb is not None else out
    correct = (outputs >= th.cut) == inst.x.astype(bool)
    return DecodeReport(correct, outputs, jl_event(inst), th)


def multiplicative_perturbation(eta: float, seed: int):
    """Perturbation that scales every coordinate by a factor in ``[1-eta, 1+eta]``.

    Half the coordinates get one of the extreme factors, the rest a uniform
    factor; bits are hit with the worst case as well as typical noise.
    """

    def apply(out: np.ndarray, row: int) -> np.ndarray:
        rng = np.random.default_rng([seed, row])
        factors = rng.uniform(1.0 - eta, 1.0 + eta, size=out.shape)
        extreme = rng.random(out.shape) < 0.5
        factors[extreme] = np.where(rng.random(int(extreme.sum())) < 0.5, 1.0 - eta, 1.0 + eta)
        return out * factors

    return apply


# ---------------------------------------------------------------------------
# serialisation

MAGIC = "kvbound-instance 1"


def _fmt_row(row) -> str:
    return " ".join(repr(float(v)) for v in row)


def write_instance(inst: HardInstance, path) -> None:
    """Plain-text dump; floats are written with ``repr`` so they round-trip bit-exactly."""
    header = {
        "kind": inst.kind, "n": inst.n, "d": inst.d,
        "W": "-" if inst.W is None else inst.W,
        "eps": repr(float(inst.eps)), "eta": repr(float(inst.eta)), "C": repr(float(inst.C)),
        "seed": inst.seed,
        "planted": "-" if inst.planted_index is None else inst.planted_index,
    }
    lines = [MAGIC] + [f"{k} {v}" for k, v in header.items()]
    for name in ("queries", "keys", "values"):
        lines.append(f"[{name}]")
        lines.extend(_fmt_row(r) for r in getattr(inst, name))
    if inst.x is not None:
        lines.append(f"[x] {inst.x.shape[0]} {inst.x.shape[1]}")
        lines.extend("".join(map(str, r.tolist())) for r in inst.x)
    Path(path).write_text("\n".join(lines) + "\n")


def read_instance(path) -> HardInstance:
    lines = Path(path).read_text().splitlines()
    if not lines or lines[0] != MAGIC:
        raise DomainError(f"{path}: not a kvbound instance file")
    header = {}
    pos = 1
    while not lines[pos].startswith("["):
        key, value = lines[pos].split(" ", 1)
        header[key] = value
        pos += 1
    n, d = int(header["n"]), int(header["d"])
    arrays = {}
    x = None
    while pos < len(lines):
        tag = lines[pos]
        pos += 1
        if tag.startswith("[x]"):
            rows, _ = map(int, tag.split()[1:])
            x = np.array([[int(c) for c in lines[pos + r]] for r in range(rows)], dtype=np.uint8)
            pos += rows
        else:
            name = tag.strip("[]")
            arrays[name] = np.array([[float(t) for t in lines[pos + r].split()] for r in range(n)]).reshape(n, d)
            pos += n
    opt = lambda v: None if v == "-" else int(v)  # noqa: E731
    return HardInstance(
        header["kind"], n, d, arrays["queries"], arrays["keys"], arrays["values"],
        eps=float(header["eps"]), eta=float(header["eta"]), C=float(header["C"]),
        W=opt(header["W"]), x=x, planted_index=opt(header["planted"]), seed=int(header["seed"]),
    )
