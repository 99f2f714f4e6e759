"""Construction and verification of fixed classification heads.

Two constructions, both producing K equal-norm columns in R^P:

* ``build_hadamard`` doubles a 1x1 seed T times into a dense sign matrix,
  so every entry has magnitude 2^(-T/2)*s and the columns are exactly
  orthogonal. Any K <= 2^T leading columns form the head.
* ``build_max_mahalanobis`` factors the Gram matrix with off-diagonal
  entries -s^2/(K-1) into an upper-triangular factor, which maximizes
  the minimum pairwise center distance at the cost of zero rows below
  row K (the structural redundancy the dense construction avoids).

Heads are immutable once built; training never touches them.
"""

import hashlib
import math
import struct
from dataclasses import dataclass, field

import numpy as np

KIND_DENSE = "dense_orthogonal"
KIND_MAXMAHA = "max_mahalanobis_ut"

_MAGIC = b"ORTW"
_VERSION = 1
_KIND_CODES = {KIND_DENSE: 0, KIND_MAXMAHA: 1}
_KIND_NAMES = {v: k for k, v in _KIND_CODES.items()}


@dataclass(frozen=True)
class ClassifierWeights:
    """Frozen P x K head: column j is the center of class j, all norms s."""

    matrix: np.ndarray
    s: float
    kind: str
    T: int | None = field(default=None)

    def __post_init__(self):
        m = self.matrix
        if m.ndim != 2 or m.dtype != np.float64:
            raise ValueError("invalid parameter: matrix must be 2-D float64")
        if not np.isfinite(m).all():
            raise ValueError("invalid parameter: matrix has non-finite entries")
        if self.s <= 0:
            raise ValueError("invalid parameter: s must be positive")
        if self.kind not in _KIND_CODES:
            raise ValueError(f"invalid parameter: unknown kind {self.kind!r}")
        m.setflags(write=False)

    @property
    def P(self) -> int:
        return self.matrix.shape[0]

    @property
    def K(self) -> int:
        return self.matrix.shape[1]


def build_hadamard(T: int, K: int, s: float) -> ClassifierWeights:
    """Recursive dense orthogonal head: P = 2^T rows, first K columns.

    Deterministic and pure; all entries are exactly +-(2^(-T/2) * s).
    """
    if T < 1 or T != int(T) or s <= 0:
        raise ValueError("invalid parameter: need integer T >= 1 and s > 0")
    if T > 20:
        raise ValueError("invalid parameter: T > 20 would not fit in memory")
    T = int(T)
    if K < 1 or K > 2**T:
        raise ValueError(f"insufficient columns: K={K} exceeds 2^T={2 ** T}")
    m = np.array([[2.0 ** (-T / 2) * s]])
    for _ in range(T):
        m = np.block([[m, -m], [m, m]])
    return ClassifierWeights(np.asfortranarray(m[:, :K]), float(s), KIND_DENSE, T)


def build_max_mahalanobis(P: int, K: int, s: float) -> ClassifierWeights:
    """Upper-triangular head whose Gram matrix has off-diagonals -s^2/(K-1).

    The Gram matrix is rank K-1, so the triangular factorization has exactly
    one zero pivot (the last). Rows K..P-1 of the result are identically zero.
    """
    if K < 2 or s <= 0:
        raise ValueError("invalid parameter: need K >= 2 and s > 0")
    if K > P:
        raise ValueError(f"feature dimension too small: P={P} < K={K}")
    s = float(s)
    gram = np.full((K, K), -s * s / (K - 1))
    np.fill_diagonal(gram, s * s)

    # G = L L^T by outer-product Cholesky; the final pivot must vanish.
    pivot_tol = 1e-10 * s * s
    L = np.zeros((K, K))
    for j in range(K):
        d = gram[j, j] - L[j, :j] @ L[j, :j]
        if j == K - 1:
            if abs(d) > pivot_tol:
                raise ValueError(
                    f"gram factorization failure: final pivot {d:.3e} not zero"
                )
            L[j, j] = 0.0
        else:
            if d <= pivot_tol:
                raise ValueError(
                    f"gram factorization failure: pivot {d:.3e} at column {j}"
                )
            L[j, j] = math.sqrt(d)
            L[j + 1 :, j] = (gram[j + 1 :, j] - L[j + 1 :, :j] @ L[j, :j]) / L[j, j]

    w = np.zeros((P, K))
    w[:K, :] = L.T  # column j supported on rows 0..j
    return ClassifierWeights(np.asfortranarray(w), s, KIND_MAXMAHA)


def min_pairwise_sqdist(w: ClassifierWeights) -> float:
    """Exact brute-force min over all K(K-1)/2 squared center distances."""
    if w.K < 2:
        raise ValueError("need at least two classes")
    cols = np.ascontiguousarray(w.matrix.T)
    best = np.inf
    for i in range(w.K - 1):
        diff = cols[i + 1 :] - cols[i]
        best = min(best, float((diff * diff).sum(axis=1).min()))
    return best


def optimal_sqdist(K: int, s: float) -> float:
    """Largest achievable min pairwise squared distance: 2*K*s^2/(K-1)."""
    if K < 2:
        raise ValueError("need at least two classes")
    if s <= 0:
        raise ValueError("invalid parameter: s must be positive")
    return 2.0 * K * s * s / (K - 1)


@dataclass(frozen=True)
class Check:
    name: str
    passed: bool
    residual: float
    detail: str


@dataclass(frozen=True)
class VerificationReport:
    checks: tuple

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.checks)

    def __str__(self):
        lines = []
        for c in self.checks:
            tag = "PASS" if c.passed else "FAIL"
            lines.append(f"[{tag}] {c.name}: residual {c.residual:.3e} ({c.detail})")
        return "\n".join(lines)


def verify(w: ClassifierWeights, tol: float = 1e-8) -> VerificationReport:
    """Measure the geometric invariants of a head; failures are report rows.

    All residuals are relative (scaled by s or s^2) and compared to ``tol``.
    """
    m = w.matrix
    s2 = w.s * w.s
    checks = []

    norms = np.sqrt((m * m).sum(axis=0))
    res = float(np.abs(norms - w.s).max() / w.s)
    checks.append(Check("column_norms", res <= tol, res, f"target norm {w.s}"))

    gram = m.T @ m
    if w.kind == KIND_DENSE:
        res = float(np.abs(gram - s2 * np.eye(w.K)).max() / s2)
        checks.append(Check("gram_orthogonal", res <= tol, res, "target s^2 * I"))
        target = 2.0 ** (-w.T / 2) * w.s
        res = float(np.abs(np.abs(m) - target).max() / target)
        checks.append(
            Check("entry_magnitude", res <= tol, res, f"target |entry| {target:.6g}")
        )
    else:
        off = -s2 / (w.K - 1)
        expected = np.full((w.K, w.K), off)
        np.fill_diagonal(expected, s2)
        res = float(np.abs(gram - expected).max() / s2)
        checks.append(
            Check("gram_max_mahalanobis", res <= tol, res, f"target offdiag {off:.6g}")
        )
        # Forbidden support: rows below the diagonal of the top K x K block
        # and everything under row K must be exactly zero.
        mask = np.zeros_like(m, dtype=bool)
        for j in range(w.K):
            mask[j + 1 :, j] = True
        res = float(np.abs(m[mask]).max() / w.s) if mask.any() else 0.0
        checks.append(Check("support_upper_triangular", res == 0.0, res, "zero pattern"))

    return VerificationReport(tuple(checks))


def weight_bytes(w: ClassifierWeights) -> bytes:
    """Serialize: magic, version u32, kind u8, P u64, K u64, s f64, then
    P*K little-endian f64 values in column-major order."""
    header = _MAGIC + struct.pack(
        "<IBQQd", _VERSION, _KIND_CODES[w.kind], w.P, w.K, w.s
    )
    body = np.asarray(w.matrix, dtype="<f8").ravel(order="F").tobytes()
    return header + body


def weights_digest(w: ClassifierWeights) -> str:
    return hashlib.sha256(weight_bytes(w)).hexdigest()


def save_weights(w: ClassifierWeights, path) -> None:
    with open(path, "wb") as fh:
        fh.write(weight_bytes(w))


def load_weights(path) -> ClassifierWeights:
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < 33 or raw[:4] != _MAGIC:
        raise ValueError(f"bad magic: {path} is not a weight file")
    version, kind_code, P, K, s = struct.unpack("<IBQQd", raw[4:33])
    if version != _VERSION:
        raise ValueError(f"unsupported weight file version {version}")
    if kind_code not in _KIND_NAMES:
        raise ValueError(f"unknown weight kind code {kind_code}")
    expected = 33 + P * K * 8
    if len(raw) != expected:
        raise ValueError(f"truncated weight file: {len(raw)} != {expected} bytes")
    mat = np.frombuffer(raw[33:], dtype="<f8").reshape((P, K), order="F")
    kind = _KIND_NAMES[kind_code]
    T = None
    if kind == KIND_DENSE:
        T = int(P).bit_length() - 1
        if 2**T != P:
            raise ValueError(f"dense orthogonal weight file with P={P} not a power of two")
    return ClassifierWeights(np.asfortranarray(mat), float(s), kind, T)


def export_csv(w: ClassifierWeights, path) -> None:
    """Plain numeric dump, one row of the weight matrix per line."""
    with open(path, "w", newline="\n") as fh:
        for i in range(w.P):
            fh.write(",".join(repr(float(v)) for v in w.matrix[i]) + "\n")
