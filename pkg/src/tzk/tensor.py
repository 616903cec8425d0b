"""Dense tensors with reverse-mode differentiation on a per-step tape.

Values are numpy arrays. float32 is the training dtype; verification runs
build everything in float64. Broadcasting is limited to size-1 extents so
each gradient rule stays small enough to audit by eye. The tape is rebuilt
per training step (define-by-run): ops record themselves only while a Tape
is active and some input requires grad.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.linalg import lu_factor, lu_solve
from scipy.special import expit

from .errors import ContractViolation, DomainError, OracleInvalid

LN_2PI = float(np.log(2.0 * np.pi))

# float32 reductions above this many elements accumulate in float64;
# log-likelihood sums over 1024 dims lose digits in pure float32.
_ACC64_THRESHOLD = 10_000


class Tape:
    """Ordered record of executed operations for one step.

    Execution order is a topological order by construction, so backward is
    a single reverse sweep that fires each record at most once.
    """

    _stack: list["Tape"] = []

    def __init__(self):
        self.records = []  # (output Tensor, backward closure)
        self._frozen = []

    @classmethod
    def active(cls):
        return cls._stack[-1] if cls._stack else None

    def __enter__(self):
        Tape._stack.append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        Tape._stack.pop()
        self.unfreeze_all()
        return False

    def freeze(self, tensors):
        """Exclude the given parameters from gradient accumulation."""
        for t in tensors:
            if not t._frozen:
                t._frozen = True
                self._frozen.append(t)

    def unfreeze_all(self):
        for t in self._frozen:
            t._frozen = False
        self._frozen = []

    @property
    def frozen(self):
        return list(self._frozen)


def _recording(*tensors) -> bool:
    return Tape.active() is not None and any(t.requires_grad for t in tensors)


def _record(out: "Tensor", back) -> None:
    out.requires_grad = True
    out._taped = True
    Tape.active().records.append((out, back))


def _acc(t: "Tensor", g: np.ndarray) -> None:
    if t.requires_grad and not t._frozen:
        t.grad = g if t.grad is None else t.grad + g


def _check_broadcast(sa, sb):
    ra, rb = len(sa), len(sb)
    for i in range(1, min(ra, rb) + 1):
        da, db = sa[-i], sb[-i]
        if da != db and da != 1 and db != 1:
            raise ContractViolation(f"shapes {sa} and {sb} do not conform (size-1 broadcasting only)")


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, d in enumerate(shape) if d == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


class Tensor:
    """A dense n-dimensional value, optionally tracked on the active tape."""

    __slots__ = ("data", "requires_grad", "grad", "name", "_frozen", "_taped")

    def __init__(self, data, requires_grad=False, name=None, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float32)
        self.data = arr
        self.requires_grad = requires_grad
        self.grad = None
        self.name = name
        self._frozen = False
        self._taped = False

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractViolation(f"item() needs a single-element tensor, got shape {self.shape}")
        return self.data.item()

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{tag})"

    # -- arithmetic ------------------------------------------------------

    def __add__(self, other):
        a, b = self, _as_tensor(other, self.dtype)
        _check_broadcast(a.shape, b.shape)
        out = Tensor(a.data + b.data)
        if _recording(a, b):
            def back(g):
                _acc(a, _unbroadcast(g, a.shape))
                _acc(b, _unbroadcast(g, b.shape))
            _record(out, back)
        return out

    __radd__ = __add__

    def __sub__(self, other):
        a, b = self, _as_tensor(other, self.dtype)
        _check_broadcast(a.shape, b.shape)
        out = Tensor(a.data - b.data)
        if _recording(a, b):
            def back(g):
                _acc(a, _unbroadcast(g, a.shape))
                _acc(b, _unbroadcast(-g, b.shape))
            _record(out, back)
        return out

    def __rsub__(self, other):
        return _as_tensor(other, self.dtype) - self

    def __mul__(self, other):
        a, b = self, _as_tensor(other, self.dtype)
        _check_broadcast(a.shape, b.shape)
        out = Tensor(a.data * b.data)
        if _recording(a, b):
            ad, bd = a.data, b.data
            def back(g):
                _acc(a, _unbroadcast(g * bd, a.shape))
                _acc(b, _unbroadcast(g * ad, b.shape))
            _record(out, back)
        return out

    __rmul__ = __mul__

    def __truediv__(self, other):
        a, b = self, _as_tensor(other, self.dtype)
        _check_broadcast(a.shape, b.shape)
        zero = np.argwhere(b.data == 0)
        if zero.size:
            raise DomainError("division by zero", index=tuple(zero[0]))
        out = Tensor(a.data / b.data)
        if _recording(a, b):
            ad, bd = a.data, b.data
            def back(g):
                _acc(a, _unbroadcast(g / bd, a.shape))
                _acc(b, _unbroadcast(-g * ad / (bd * bd), b.shape))
            _record(out, back)
        return out

    def __rtruediv__(self, other):
        return _as_tensor(other, self.dtype) / self

    def __neg__(self):
        out = Tensor(-self.data)
        if _recording(self):
            a = self
            _record(out, lambda g: _acc(a, -g))
        return out

    # -- elementwise -----------------------------------------------------

    def exp(self):
        with np.errstate(over="ignore"):
            data = np.exp(self.data)
        bad = np.argwhere(~np.isfinite(data))
        if bad.size:
            raise DomainError("exp overflowed to non-finite", index=tuple(bad[0]))
        out = Tensor(data)
        if _recording(self):
            a = self
            _record(out, lambda g: _acc(a, g * data))
        return out

    def log(self):
        bad = np.argwhere(self.data <= 0)
        if bad.size:
            raise DomainError("log of non-positive value", index=tuple(bad[0]))
        out = Tensor(np.log(self.data))
        if _recording(self):
            a, ad = self, self.data
            _record(out, lambda g: _acc(a, g / ad))
        return out

    def abs(self):
        out = Tensor(np.abs(self.data))
        if _recording(self):
            a, s = self, np.sign(self.data)
            _record(out, lambda g: _acc(a, g * s))
        return out

    def sign(self):
        out = Tensor(np.sign(self.data))
        if _recording(self):
            a = self
            _record(out, lambda g: _acc(a, np.zeros_like(a.data)))
        return out

    def tanh(self):
        data = np.tanh(self.data)
        out = Tensor(data)
        if _recording(self):
            a = self
            _record(out, lambda g: _acc(a, g * (1.0 - data * data)))
        return out

    def sigmoid(self):
        data = expit(self.data)
        out = Tensor(data)
        if _recording(self):
            a = self
            _record(out, lambda g: _acc(a, g * data * (1.0 - data)))
        return out

    def log_sigmoid(self):
        # log sigma(x) = -softplus(-x), evaluated branch-wise for stability
        x = self.data
        data = np.where(x > 0, -np.log1p(np.exp(-np.abs(x))), x - np.log1p(np.exp(-np.abs(x))))
        out = Tensor(data.astype(x.dtype))
        if _recording(self):
            a = self
            _record(out, lambda g: _acc(a, g * expit(-x)))
        return out

    def clamp(self, lo, hi):
        out = Tensor(np.clip(self.data, lo, hi))
        if _recording(self):
            a = self
            mask = (self.data >= lo) & (self.data <= hi)
            _record(out, lambda g: _acc(a, g * mask))
        return out

    # -- shape -----------------------------------------------------------

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        out = Tensor(self.data.reshape(shape))
        if _recording(self):
            a, orig = self, self.shape
            _record(out, lambda g: _acc(a, g.reshape(orig)))
        return out

    def permute(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        out = Tensor(self.data.transpose(axes))
        if _recording(self):
            a = self
            inv = np.argsort(axes)
            _record(out, lambda g: _acc(a, g.transpose(inv)))
        return out

    def __getitem__(self, key):
        out = Tensor(self.data[key])
        if _recording(self):
            a = self
            def back(g):
                buf = np.zeros_like(a.data)
                buf[key] = g
                _acc(a, buf)
            _record(out, back)
        return out

    # -- reductions and linear algebra ------------------------------------

    def sum(self, axis=None, keepdims=False):
        x = self.data
        if x.dtype == np.float32 and x.size > _ACC64_THRESHOLD:
            data = x.sum(axis=axis, keepdims=keepdims, dtype=np.float64).astype(np.float32)
        else:
            data = x.sum(axis=axis, keepdims=keepdims)
        out = Tensor(data)
        if _recording(self):
            a = self
            def back(g):
                _acc(a, np.broadcast_to(_restore_axes(g, a.shape, axis, keepdims), a.shape))
            _record(out, back)
        return out

    def mean(self, axis=None, keepdims=False):
        n = self.size if axis is None else np.prod([self.shape[i] for i in _axis_tuple(axis, self.ndim)])
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / float(n))

    def matmul(self, other):
        a, b = self, _as_tensor(other, self.dtype)
        if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
            raise ContractViolation(f"matmul shapes {a.shape} x {b.shape} do not conform")
        out = Tensor(a.data @ b.data)
        if _recording(a, b):
            ad, bd = a.data, b.data
            def back(g):
                _acc(a, g @ bd.T)
                _acc(b, ad.T @ g)
            _record(out, back)
        return out

    __matmul__ = matmul


def _as_tensor(x, dtype) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))


def _axis_tuple(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        return (axis % ndim,)
    return tuple(a % ndim for a in axis)


def _restore_axes(g, shape, axis, keepdims):
    if axis is None:
        return np.asarray(g).reshape((1,) * len(shape))
    if keepdims:
        return g
    expanded = list(np.shape(g))
    for a in sorted(_axis_tuple(axis, len(shape))):
        expanded.insert(a, 1)
    return np.asarray(g).reshape(expanded)


# -- free functions --------------------------------------------------------


def concat(tensors, axis=0):
    tensors = list(tensors)
    out = Tensor(np.concatenate([t.data for t in tensors], axis=axis))
    if _recording(*tensors):
        sizes = [t.shape[axis] for t in tensors]
        offsets = np.cumsum([0] + sizes)
        def back(g):
            for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
                sl = [slice(None)] * g.ndim
                sl[axis] = slice(lo, hi)
                _acc(t, g[tuple(sl)])
        _record(out, back)
    return out


def index_rows(t: Tensor, idx) -> Tensor:
    """Gather rows along axis 0; duplicate indices are allowed."""
    idx = np.asarray(idx, dtype=np.int64)
    out = Tensor(t.data[idx])
    if _recording(t):
        def back(g):
            buf = np.zeros_like(t.data)
            np.add.at(buf, idx, g)
            _acc(t, buf)
        _record(out, back)
    return out


def put_rows(t: Tensor, idx, n: int) -> Tensor:
    """Scatter rows into a length-n axis 0 of zeros. Indices must be unique."""
    idx = np.asarray(idx, dtype=np.int64)
    data = np.zeros((n,) + t.shape[1:], dtype=t.dtype)
    data[idx] = t.data
    out = Tensor(data)
    if _recording(t):
        _record(out, lambda g: _acc(t, g[idx]))
    return out


def prelu(x: Tensor, slope: Tensor) -> Tensor:
    """Leaky rectifier with a learnable per-channel negative slope."""
    _check_broadcast(x.shape, slope.shape)
    neg = x.data < 0
    out = Tensor(np.where(neg, x.data * slope.data, x.data))
    if _recording(x, slope):
        xd, sd = x.data, slope.data
        def back(g):
            _acc(x, g * np.where(neg, sd, np.ones((), dtype=xd.dtype)))
            _acc(slope, _unbroadcast(g * np.where(neg, xd, np.zeros((), dtype=xd.dtype)), slope.shape))
        _record(out, back)
    return out


def log_softmax(x: Tensor, axis=-1) -> Tensor:
    m = x.data.max(axis=axis, keepdims=True)
    shifted = x.data - m
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True)) + m
    out = Tensor(x.data - lse)
    if _recording(x):
        p = np.exp(out.data)
        def back(g):
            _acc(x, g - p * g.sum(axis=axis, keepdims=True))
        _record(out, back)
    return out


def take_per_row(x: Tensor, cols) -> Tensor:
    """Pick one column per row of a 2-d tensor."""
    cols = np.asarray(cols, dtype=np.int64)
    rows = np.arange(x.shape[0])
    out = Tensor(x.data[rows, cols])
    if _recording(x):
        def back(g):
            buf = np.zeros_like(x.data)
            buf[rows, cols] = g
            _acc(x, buf)
        _record(out, back)
    return out


def solve_lu(a: Tensor, b: Tensor, factorization) -> Tensor:
    """x = a^-1 b reusing a precomputed LU factorization of a.data.

    The same factorization serves the backward solves (with a transposed).
    """
    x = lu_solve(factorization, b.data)
    out = Tensor(x)
    if _recording(a, b):
        def back(g):
            gb = lu_solve(factorization, g, trans=1)
            _acc(b, gb)
            _acc(a, -gb @ x.T)
        _record(out, back)
    return out


def logabsdet_lu(a: Tensor, factorization) -> Tensor:
    """log |det a| from an existing LU factorization of a.data."""
    lu = factorization[0]
    value = float(np.sum(np.log(np.abs(np.diag(lu)))))
    out = Tensor(np.asarray(value, dtype=a.dtype))
    if _recording(a):
        n = a.shape[0]
        def back(g):
            inv_t = lu_solve(factorization, np.eye(n, dtype=a.dtype), trans=1)
            _acc(a, np.asarray(g) * inv_t)
        _record(out, back)
    return out


def factorize(a: np.ndarray):
    """LU-factorize a square matrix for solve_lu/logabsdet_lu.

    scipy's exact-singularity warning is suppressed; callers run their own
    pivot-based near-singularity check and raise a typed error.
    """
    import warnings

    from scipy.linalg import LinAlgWarning

    with warnings.catch_warnings():
        warnings.simplefilter("ignore", LinAlgWarning)
        return lu_factor(a)


# -- backward ---------------------------------------------------------------


def backward(tape: Tape, out: Tensor) -> None:
    """Reverse sweep: populate .grad on every tensor reachable from `out`.

    Parameters not reachable keep grad None (read as zero); frozen
    parameters receive nothing regardless of reachability.
    """
    if out.size != 1:
        raise ContractViolation(f"backward output must be scalar, got shape {out.shape}")
    if not out._taped:
        raise ContractViolation("backward output does not lie on the tape")
    out.grad = np.ones_like(out.data)
    for node, back in reversed(tape.records):
        if node.grad is not None:
            back(node.grad)


# -- gaussian primitives ------------------------------------------------------


def gaussian_logpdf(x: Tensor, mu, log_sigma) -> Tensor:
    """Diagonal-covariance log-density, summed over non-batch axes.

    1-d input is one sample (scalar out); n-d input reduces axes 1.. and
    returns one value per leading row.
    """
    mu = _as_tensor(mu, x.dtype)
    log_sigma = _as_tensor(log_sigma, x.dtype)
    z = (x - mu) * (-log_sigma).exp()
    per_elem = z * z * (-0.5) - log_sigma
    bshape = np.broadcast_shapes(x.shape, mu.shape, log_sigma.shape)
    if len(bshape) <= 1:
        d = int(np.prod(bshape)) if bshape else 1
        return per_elem.sum() - 0.5 * LN_2PI * d
    axes = tuple(range(1, len(bshape)))
    d = int(np.prod(bshape[1:]))
    return per_elem.sum(axis=axes) - 0.5 * LN_2PI * d


def reparam_sample(mu, log_sigma, noise) -> Tensor:
    """mu + sigma * noise; differentiable in mu and log_sigma."""
    mu = mu if isinstance(mu, Tensor) else Tensor(mu)
    log_sigma = _as_tensor(log_sigma, mu.dtype)
    noise = _as_tensor(noise, mu.dtype)
    return mu + log_sigma.exp() * noise


# -- finite-difference oracle --------------------------------------------------


@dataclass
class FdReport:
    max_rel_error: float
    tol: float
    passed: bool
    worst: tuple  # (param name, flat index, analytic, numeric)

    def __str__(self):
        name, i, a, n = self.worst
        state = "pass" if self.passed else "FAIL"
        return (f"finite-diff {state}: max rel err {self.max_rel_error:.3e} (tol {self.tol:.1e}) "
                f"at {name}[{i}] analytic={a:.6e} numeric={n:.6e}")


def finite_diff_check(f, params, eps=1e-5, tol=1e-3) -> FdReport:
    """Compare tape gradients of scalar f() against central differences.

    f must be deterministic (it is evaluated twice and compared bit-exactly)
    and the parameters must be float64; both are oracle preconditions.
    """
    params = list(params)
    for p in params:
        if p.dtype != np.float64:
            raise OracleInvalid(f"finite_diff_check requires float64 parameters, got {p.dtype} for {p.name!r}")

    def run_value():
        out = f()
        if out.size != 1:
            raise ContractViolation("finite_diff_check target must return a scalar")
        return float(out.data)

    v1 = run_value()
    v2 = run_value()
    if v1 != v2:
        raise OracleInvalid(f"target is not deterministic under the fixed seed ({v1!r} != {v2!r})")

    for p in params:
        p.grad = None
    with Tape() as tape:
        out = f()
        backward(tape, out)
    analytic = [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in params]
    for p in params:
        p.grad = None

    worst = (params[0].name or "param0", 0, 0.0, 0.0)
    max_rel = 0.0
    for p, a in zip(params, analytic):
        flat = p.data.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            h = eps * max(1.0, abs(orig))
            flat[i] = orig + h
            fp = run_value()
            flat[i] = orig - h
            fm = run_value()
            flat[i] = orig
            fd = (fp - fm) / (2.0 * h)
            an = float(a.reshape(-1)[i])
            rel = abs(an - fd) / max(abs(an), abs(fd), 1e-4)
            if rel > max_rel:
                max_rel = rel
                worst = (p.name or "param", i, an, fd)
    return FdReport(max_rel_error=max_rel, tol=tol, passed=max_rel <= tol, worst=worst)
