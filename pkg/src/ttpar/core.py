"""Sequential tensor-train containers, layout conventions, and dense oracles.

A tensor train (TT) represents an N-way array through a chain of 3-way cores,

    x[i_1, ..., i_N] = X_1(i_1) @ X_2(i_2) @ ... @ X_N(i_N),

where the n-th slice ``X_n(i)`` is an ``r_left x r_right`` matrix and the end
ranks are fixed to 1.  Cores are stored in the *natural descending* layout:
a column-major (Fortran-ordered) ``(r_left, dim, r_right)`` array, so that the
two matricizations every kernel needs,

* vertical   ``V(X)`` of shape ``(r_left * dim, r_right)`` and
* horizontal ``H(X)`` of shape ``(r_left, dim * r_right)``,

are both zero-copy views of the same buffer.  Rows of ``V`` pair the left rank
index (fastest) with the mode index; columns of ``H`` pair the mode index
(fastest) with the right rank index.

The module also provides dense oracles (`entry`, `full`), deterministic random
generation keyed per slice (so distributed generation can reproduce it
bitwise), mode-2 linear operator application, a structural identity check used
to validate the layout algebra, and a small binary file format.
"""

from __future__ import annotations

from dataclasses import dataclass
from math import prod

import numpy as np

from .errors import BoundsError, CapacityError, ShapeError

_MAGIC = b"TTPAR1"

#: `full` refuses to materialize more entries than this unless overridden.
DEFAULT_FULL_CAPACITY = 10_000_000


class TTCore:
    """One 3-way TT core in the natural descending layout.

    Parameters
    ----------
    array : array_like
        Data of shape ``(r_left, dim, r_right)``.  Copied/converted to a
        Fortran-ordered float64 array if needed.
    """

    __slots__ = ("array",)

    def __init__(self, array):
        arr = np.asarray(array, dtype=np.float64)
        if arr.ndim != 3:
            raise ShapeError(f"core must be 3-way, got ndim={arr.ndim}")
        if min(arr.shape) < 0 or arr.shape[0] < 1 or arr.shape[2] < 1:
            raise ShapeError(f"core ranks must be positive, got shape {arr.shape}")
        self.array = np.asfortranarray(arr)

    @property
    def r_left(self) -> int:
        return self.array.shape[0]

    @property
    def dim(self) -> int:
        return self.array.shape[1]

    @property
    def r_right(self) -> int:
        return self.array.shape[2]

    def slice(self, i: int) -> np.ndarray:
        """The ``r_left x r_right`` matrix ``X(i)`` (a view)."""
        if not 0 <= i < self.dim:
            raise BoundsError(f"slice index {i} out of range [0, {self.dim})")
        return self.array[:, i, :]

    def vertical(self) -> np.ndarray:
        """Zero-copy ``(r_left * dim, r_right)`` matricization."""
        rl, d, rr = self.array.shape
        return self.array.reshape((rl * d, rr), order="F")

    def horizontal(self) -> np.ndarray:
        """Zero-copy ``(r_left, dim * r_right)`` matricization."""
        rl, d, rr = self.array.shape
        return self.array.reshape((rl, d * rr), order="F")

    def copy(self) -> "TTCore":
        return TTCore(self.array.copy(order="F"))

    def __repr__(self) -> str:  # pragma: no cover - debug aid
        return f"TTCore{self.array.shape}"


class TTTensor:
    """A tensor train: a chain of `TTCore`s with matching bond ranks."""

    __slots__ = ("cores",)

    def __init__(self, cores):
        cores = [c if isinstance(c, TTCore) else TTCore(c) for c in cores]
        if not cores:
            raise ShapeError("a TT tensor needs at least one core")
        if cores[0].r_left != 1 or cores[-1].r_right != 1:
            raise ShapeError("end ranks must be 1")
        for k in range(len(cores) - 1):
            if cores[k].r_right != cores[k + 1].r_left:
                raise ShapeError(
                    f"rank mismatch between cores {k} and {k + 1}: "
                    f"{cores[k].r_right} != {cores[k + 1].r_left}"
                )
        self.cores = cores

    @property
    def ndim(self) -> int:
        return len(self.cores)

    @property
    def dims(self) -> tuple:
        return tuple(c.dim for c in self.cores)

    @property
    def ranks(self) -> tuple:
        """Bond ranks ``(R_0, ..., R_N)`` with ``R_0 = R_N = 1``."""
        return (1,) + tuple(c.r_right for c in self.cores)

    def copy(self) -> "TTTensor":
        return TTTensor([c.copy() for c in self.cores])

    def __repr__(self) -> str:  # pragma: no cover - debug aid
        return f"TTTensor(dims={self.dims}, ranks={self.ranks})"


@dataclass
class DenseTensor:
    """A dense N-way array stored flat in column-major linearization."""

    dims: tuple
    data: np.ndarray

    def __post_init__(self):
        self.dims = tuple(int(d) for d in self.dims)
        self.data = np.asarray(self.data, dtype=np.float64).ravel()
        if self.data.size != prod(self.dims):
            raise ShapeError(
                f"flat data has {self.data.size} entries, dims {self.dims} "
                f"need {prod(self.dims)}"
            )

    @classmethod
    def from_array(cls, a) -> "DenseTensor":
        a = np.asarray(a, dtype=np.float64)
        return cls(tuple(a.shape), np.ravel(a, order="F"))

    def as_array(self) -> np.ndarray:
        return self.data.reshape(self.dims, order="F")

    def __getitem__(self, idx) -> float:
        return float(self.data[_linear_index(self.dims, idx)])


def _linear_index(dims, idx) -> int:
    idx = tuple(int(i) for i in idx)
    if len(idx) != len(dims):
        raise BoundsError(f"index {idx} has wrong length for dims {dims}")
    lin, stride = 0, 1
    for i, d in zip(idx, dims):
        if not 0 <= i < d:
            raise BoundsError(f"index {idx} out of bounds for dims {dims}")
        lin += i * stride
        stride *= d
    return lin


def entry(t: TTTensor, idx) -> float:
    """Evaluate one entry as the left-to-right chain of vector-matrix products."""
    idx = tuple(int(i) for i in idx)
    if len(idx) != t.ndim:
        raise BoundsError(f"index {idx} has wrong length for dims {t.dims}")
    for i, d in zip(idx, t.dims):
        if not 0 <= i < d:
            raise BoundsError(f"index {idx} out of bounds for dims {t.dims}")
    v = t.cores[0].array[0, idx[0], :]
    for core, i in zip(t.cores[1:], idx[1:]):
        v = np.dot(v, core.array[:, i, :])
    return float(v[0])


def full(t: TTTensor, max_entries: int = DEFAULT_FULL_CAPACITY) -> DenseTensor:
    """Materialize the whole tensor.

    Shares every arithmetic step with `entry` -- the evaluation is a
    depth-first sweep over mode indices that carries the same prefix vector
    `entry` would compute, so `full(t)[idx] == entry(t, idx)` bitwise.

    Raises
    ------
    CapacityError
        If the tensor has more than ``max_entries`` entries.
    """
    dims = t.dims
    total = prod(dims)
    if total > max_entries:
        raise CapacityError(
            f"full tensor has {total} entries, more than the guard "
            f"({max_entries}); raise max_entries to override"
        )
    out = np.empty(total)
    # Pre-cut the slice views once; the DFS below touches them dims[n] times.
    slices = [[c.array[:, i, :] for i in range(c.dim)] for c in t.cores]
    strides = [1] * len(dims)
    for n in range(1, len(dims)):
        strides[n] = strides[n - 1] * dims[n - 1]
    last = len(dims) - 1

    def sweep(n, base, v):
        sl, st = slices[n], strides[n]
        if n == last:
            for i in range(dims[n]):
                w = np.dot(v, sl[i])
                out[base + i * st] = float(w[0])
        else:
            for i in range(dims[n]):
                sweep(n + 1, base + i * st, np.dot(v, sl[i]))

    if len(dims) == 1:
        for i in range(dims[0]):
            out[i] = float(t.cores[0].array[0, i, :][0])
    else:
        sl0, st0 = slices[0], strides[0]
        for i in range(dims[0]):
            sweep(1, i * st0, t.cores[0].array[0, i, :])
    return DenseTensor(dims, out)


def _check_chain(dims, ranks):
    dims = tuple(int(d) for d in dims)
    ranks = tuple(int(r) for r in ranks)
    if not dims or any(d < 1 for d in dims):
        raise ShapeError(f"dims must be positive, got {dims}")
    if len(ranks) != len(dims) + 1:
        raise ShapeError(f"need {len(dims) + 1} ranks for {len(dims)} modes, got {len(ranks)}")
    if ranks[0] != 1 or ranks[-1] != 1:
        raise ShapeError(f"end ranks must be 1, got {ranks[0]} and {ranks[-1]}")
    if any(r < 1 for r in ranks):
        raise ShapeError(f"ranks must be positive, got {ranks}")
    return dims, ranks


def slice_rng(seed: int, n: int, i: int) -> np.random.Generator:
    """The dedicated random stream of slice ``i`` of core ``n`` (0-based)."""
    ss = np.random.SeedSequence(seed, spawn_key=(n, i))
    return np.random.Generator(np.random.Philox(ss))


def fill_random_slab(out: np.ndarray, n: int, lo: int, seed: int) -> None:
    """Fill ``out[:, k, :]`` with the stream of global slice ``lo + k``.

    Draws are laid down in the natural descending order (left rank fastest),
    so any row-block of a core can be generated independently and agrees
    bitwise with sequential generation.
    """
    rl, d_loc, rr = out.shape
    for k in range(d_loc):
        g = slice_rng(seed, n, lo + k)
        out[:, k, :] = g.standard_normal(rl * rr).reshape((rl, rr), order="F")


def random_tt(dims, ranks, seed: int) -> TTTensor:
    """A TT tensor with i.i.d. standard normal core entries.

    Every slice of every core has its own counter-based stream keyed by
    ``(seed, core index, slice index)``, making the result independent of how
    the work is split across processes.
    """
    dims, ranks = _check_chain(dims, ranks)
    cores = []
    for n, d in enumerate(dims):
        arr = np.empty((ranks[n], d, ranks[n + 1]), order="F")
        fill_random_slab(arr, n, 0, seed)
        cores.append(TTCore(arr))
    return TTTensor(cores)


def mode2_multiply(core: TTCore, a) -> TTCore:
    """Apply a square operator to the mode-2 fibers of one core.

    Computes ``Y(i) = sum_j a[i, j] X(j)`` as ``r_right`` successive
    matrix products; ``a`` may be dense or any scipy.sparse matrix.
    """
    rl, d, rr = core.array.shape
    if a.shape != (d, d):
        raise ShapeError(f"operator factor must be {d}x{d}, got {a.shape}")
    out = np.empty((rl, d, rr), order="F")
    for r in range(rr):
        out[:, :, r] = (a @ core.array[:, :, r].T).T
    return TTCore(out)


def _left_chain(cores, upto: int) -> np.ndarray:
    """Chain matrix over ``cores[:upto]``: ``prod(dims) x ranks[upto]``.

    Rows are linearized with the first mode fastest.
    """
    t = np.ones((1, 1))
    for c in cores[:upto]:
        arr = c.array
        t = np.tensordot(t, arr, axes=(1, 0))
        t = t.reshape((t.shape[0] * arr.shape[1], arr.shape[2]), order="F")
    return t


def _right_chain(cores, start: int) -> np.ndarray:
    """Chain matrix over ``cores[start:]``: ``ranks[start] x prod(dims)``.

    Columns are linearized with the first remaining mode fastest.
    """
    t = np.ones((1, 1))
    for c in reversed(cores[start:]):
        arr = c.array
        t = np.tensordot(arr, t, axes=(2, 0))
        t = t.reshape((arr.shape[0], arr.shape[1] * t.shape[2]), order="F")
    return t


def verify_quadprod(t: TTTensor, n: int, max_entries: int = DEFAULT_FULL_CAPACITY) -> float:
    """Residual of the four-matrix unfolding identity at split position ``n``.

    For ``1 <= n < N`` the dense unfolding that groups modes ``1..n`` into rows
    factors as

        (I ⊗ Q) @ V(X_n) @ Hs(X_{n+1}) @ (I ⊗ Z),

    where Q chains cores ``1..n-1``, Z chains cores ``n+2..N``, and ``Hs`` is
    the horizontal matricization with its slices laid side by side (right rank
    fastest within each slice block).  The product's columns come out with the
    mode-(n+1) index slowest; the dense side is permuted to match.  Returns the
    relative Frobenius residual between the two sides.
    """
    N = t.ndim
    if not 1 <= n < N:
        raise BoundsError(f"split position must satisfy 1 <= n < {N}, got {n}")
    dense = full(t, max_entries)
    dims, ranks = t.dims, t.ranks

    m_rows = prod(dims[:n])
    i_next = dims[n]
    k_rest = prod(dims[n + 1:])
    lhs = dense.data.reshape((m_rows, i_next, k_rest), order="F")
    lhs = lhs.reshape(m_rows, i_next * k_rest)  # C-order: trailing modes fastest

    q = _left_chain(t.cores, n - 1)
    z = _right_chain(t.cores, n + 1)
    v = t.cores[n - 1].vertical()
    arr = t.cores[n].array
    hs = arr.transpose(0, 2, 1).reshape((ranks[n], ranks[n + 1] * i_next), order="F")

    rhs = np.kron(np.eye(dims[n - 1]), q) @ v @ hs @ np.kron(np.eye(i_next), z)
    denom = np.linalg.norm(lhs)
    resid = np.linalg.norm(lhs - rhs)
    return float(resid / denom) if denom > 0 else float(resid)


def save_tt(path, t: TTTensor) -> None:
    """Write a TT tensor: magic, u64 header (N, dims, ranks), raw f8 cores."""
    dims, ranks = t.dims, t.ranks
    with open(path, "wb") as f:
        f.write(_MAGIC)
        header = np.array((t.ndim,) + dims + ranks, dtype="<u8")
        f.write(header.tobytes())
        for c in t.cores:
            f.write(np.ascontiguousarray(c.array.ravel(order="F"), dtype="<f8").tobytes())


def load_tt(path) -> TTTensor:
    """Read a TT tensor written by `save_tt` (bitwise round trip)."""
    with open(path, "rb") as f:
        magic = f.read(len(_MAGIC))
        if magic != _MAGIC:
            raise ShapeError(f"{path!r} is not a TT file (bad magic {magic!r})")
        (ndim,) = np.frombuffer(f.read(8), dtype="<u8")
        ndim = int(ndim)
        if ndim < 1:
            raise ShapeError("TT file header declares zero modes")
        dims = np.frombuffer(f.read(8 * ndim), dtype="<u8").astype(int)
        ranks = np.frombuffer(f.read(8 * (ndim + 1)), dtype="<u8").astype(int)
        dims_t, ranks_t = _check_chain(dims, ranks)
        cores = []
        for k in range(ndim):
            count = ranks_t[k] * dims_t[k] * ranks_t[k + 1]
            raw = f.read(8 * count)
            if len(raw) != 8 * count:
                raise ShapeError(f"TT file truncated in core {k}")
            flat = np.frombuffer(raw, dtype="<f8").copy()
            cores.append(TTCore(flat.reshape((ranks_t[k], dims_t[k], ranks_t[k + 1]), order="F")))
        if f.read(1):
            raise ShapeError("trailing bytes after last core")
    return TTTensor(cores)
