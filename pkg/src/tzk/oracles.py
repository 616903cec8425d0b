"""Independent numerical oracles: finite differences, dense Jacobians, quadrature.

These never reuse the analytic path they are checking: Jacobians come from
central differences of the plain forward map, determinants from LU via
numpy's slogdet, integrals from grid sums.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import flows
from .tensor import (Tensor, concat, finite_diff_check, gaussian_logpdf, index_rows,
                     log_softmax, prelu, put_rows, take_per_row)


def dense_jacobian(fn, x0: np.ndarray, eps=1e-6) -> np.ndarray:
    """Central-difference Jacobian of fn: R^d -> R^d at x0 (float64)."""
    x0 = np.asarray(x0, dtype=np.float64)
    d = x0.size
    jac = np.empty((d, d))
    for i in range(d):
        xp = x0.copy(); xp[i] += eps
        xm = x0.copy(); xm[i] -= eps
        jac[:, i] = (fn(xp) - fn(xm)) / (2 * eps)
    return jac


def jacobian_logabsdet(fn, x0, eps=1e-6) -> float:
    sign, logabs = np.linalg.slogdet(dense_jacobian(fn, x0, eps))
    if sign == 0:
        raise FloatingPointError("numerically singular Jacobian in oracle")
    return float(logabs)


def stack_pointwise_map(stack, direction="forward"):
    """The stack as a plain R^d -> R^d map on float64 vectors (no tape)."""
    shape = stack.in_shape if direction == "forward" else stack.out_shape

    def fn(vec):
        x = Tensor(np.asarray(vec, dtype=np.float64).reshape((1,) + tuple(shape)))
        y, _ = (stack.forward(x) if direction == "forward" else stack.inverse(x))
        return y.data.reshape(-1).copy()

    return fn


def stack_logdet(stack, vec, direction="forward") -> float:
    shape = stack.in_shape if direction == "forward" else stack.out_shape
    x = Tensor(np.asarray(vec, dtype=np.float64).reshape((1,) + tuple(shape)))
    _, ld = (stack.forward(x) if direction == "forward" else stack.inverse(x))
    return float(np.asarray(ld.data).reshape(-1)[0])


def grid_integral_2d(logp_fn, lo=-9.0, hi=9.0, n=600) -> float:
    """Integrate exp(logp) over [lo,hi]^2 by midpoint quadrature.

    logp_fn takes an (m, 2) float64 array of points and returns (m,) log
    densities.
    """
    xs = np.linspace(lo, hi, n, endpoint=False) + (hi - lo) / (2 * n)
    gx, gy = np.meshgrid(xs, xs, indexing="ij")
    pts = np.stack([gx.reshape(-1), gy.reshape(-1)], axis=1)
    cell = ((hi - lo) / n) ** 2
    total = 0.0
    for lo_i in range(0, pts.shape[0], 200_000):
        total += float(np.exp(logp_fn(pts[lo_i:lo_i + 200_000])).sum()) * cell
    return total


# -- randomized flow stacks for the check suites -------------------------------


def random_stack(rng, dtype=np.float64, kind=None) -> flows.FlowStack:
    """A small random stack (d <= 16); collectively the kinds cover every layer."""
    kind = kind if kind is not None else int(rng.integers(3))
    if kind == 0:
        shape = (1, 4, 4)
        sq = flows.Squeeze(shape)
        layers = [sq,
                  flows.ChannelConv(sq.out_shape, rng, dtype),
                  flows.ElementwiseAffine(sq.out_shape, dtype),
                  flows.SymLog(sq.out_shape),
                  flows.Unsqueeze(sq.out_shape),
                  flows.TiledConv(shape, 2, rng, dtype),
                  flows.ElementwiseAffine(shape, dtype),
                  flows.SymLog(shape)]
    elif kind == 1:
        shape = (4, 2, 2)
        layers = [flows.ChannelConv(shape, rng, dtype),
                  flows.ElementwiseAffine(shape, dtype),
                  flows.SymLog(shape),
                  flows.TiledConv(shape, 2, rng, dtype),
                  flows.ElementwiseAffine(shape, dtype)]
    else:
        dim = int(rng.choice([2, 3, 8]))
        layers = flows.vector_flow(dim, 2, rng, dtype).layers
    stack = flows.FlowStack(layers)
    for name, p in stack.named_params():
        if name.endswith("log_scale") or name.endswith("bias"):
            p.data = (0.3 * rng.standard_normal(p.shape)).astype(dtype)
    return stack


@dataclass
class SuiteResult:
    name: str
    passed: bool
    detail: str

    def __str__(self):
        return f"{'PASS' if self.passed else 'FAIL'} {self.name}: {self.detail}"


def roundtrip_suite(trials=100, seed=0, dtype=np.float32, tol=1e-4) -> SuiteResult:
    worst = 0.0
    rng = np.random.default_rng(seed)
    for k in range(trials):
        stack = random_stack(rng, dtype, kind=k % 3)
        x = Tensor((0.7 * rng.standard_normal((3,) + stack.in_shape)).astype(dtype))
        y, ld_f = stack.forward(x)
        x2, ld_i = stack.inverse(y)
        worst = max(worst, float(np.abs(x2.data - x.data).max()))
        worst_ld = float(np.abs(ld_f.data + ld_i.data).max())
        worst = max(worst, worst_ld)
    return SuiteResult("round-trip", worst < tol, f"max error {worst:.3e} over {trials} stacks (tol {tol:.1e})")


def logdet_suite(trials=100, seed=0, tol=1e-3) -> SuiteResult:
    worst = 0.0
    rng = np.random.default_rng(seed)
    for k in range(trials):
        stack = random_stack(rng, np.float64, kind=k % 3)
        x0 = 0.7 * rng.standard_normal(int(np.prod(stack.in_shape)))
        analytic = stack_logdet(stack, x0, "forward")
        numeric = jacobian_logabsdet(stack_pointwise_map(stack, "forward"), x0)
        worst = max(worst, abs(analytic - numeric))
    return SuiteResult("log-det", worst < tol,
                       f"max |stack - Jacobian oracle| {worst:.3e} over {trials} stacks (tol {tol:.1e})")


def op_gradient_cases(rng):
    """One scalar-valued probe per registered primitive op."""
    f64 = np.float64

    def p(shape, scale=0.8, name="p"):
        return Tensor((scale * rng.standard_normal(shape)).astype(f64), requires_grad=True, name=name)

    a, b = p((3, 4), name="a"), p((3, 4), name="b")
    pos = Tensor(np.abs(rng.standard_normal((3, 4))) + 0.5, requires_grad=True, name="pos")
    w = p((4, 3), name="w")
    slope = Tensor(np.abs(rng.standard_normal(4)) + 0.1, requires_grad=True, name="slope")
    single = p((5,), name="single")
    kmat = p((4, 4), name="kmat")
    cases = {
        "add": (lambda: (a + b).sum(), [a, b]),
        "sub": (lambda: (a - b).sum(), [a, b]),
        "mul": (lambda: (a * b).sum(), [a, b]),
        "div": (lambda: (a / pos).sum(), [a, pos]),
        "exp": (lambda: a.exp().sum(), [a]),
        "log": (lambda: pos.log().sum(), [pos]),
        "abs": (lambda: (a.abs() * b).sum(), [a, b]),
        "sign": (lambda: (a.sign() * b).sum(), [b]),
        "tanh": (lambda: (a.tanh() * b).sum(), [a, b]),
        "sigmoid": (lambda: (a.sigmoid() * b).sum(), [a, b]),
        "log_sigmoid": (lambda: (a.log_sigmoid() * b).sum(), [a, b]),
        "prelu": (lambda: (prelu(a, slope) * b).sum(), [a, slope]),
        "matmul": (lambda: (a.matmul(w) * a.matmul(w)).sum(), [a, w]),
        "sum": (lambda: (a.sum(axis=1) * single[:3]).sum(), [a, single]),
        "mean": (lambda: (a.mean(axis=0) * w[:, 0]).sum(), [a, w]),
        "reshape": (lambda: (a.reshape(4, 3) * w).sum(), [a, w]),
        "permute": (lambda: (a.permute(1, 0) * w).sum(), [a, w]),
        "concat": (lambda: (concat([a, b], axis=1) * concat([b, a], axis=1)).sum(), [a, b]),
        "slice": (lambda: (a[:, 1:3] * b[:, :2]).sum(), [a, b]),
        "clamp": (lambda: (a.clamp(-0.5, 0.5) * b).sum(), [a, b]),
        "index_rows": (lambda: (index_rows(a, np.array([0, 2, 2])) * 1.5).sum(), [a]),
        "put_rows": (lambda: (put_rows(a, np.array([1, 3, 0]), 5)).sum(), [a]),
        "log_softmax": (lambda: (log_softmax(a, axis=1) * b).sum(), [a, b]),
        "take_per_row": (lambda: take_per_row(a, np.array([0, 3, 1])).sum(), [a]),
        "gaussian_logpdf": (lambda: gaussian_logpdf(a, b, a * 0.1).sum(), [a, b]),
        "logabsdet": (lambda: _logdet_probe(kmat), [kmat]),
        "solve": (lambda: _solve_probe(kmat, a), [kmat, a]),
    }
    return cases


def _logdet_probe(kmat):
    from .tensor import factorize, logabsdet_lu
    shifted = kmat + Tensor(3.0 * np.eye(4))
    return logabsdet_lu(shifted, factorize(shifted.data))


def _solve_probe(kmat, a):
    from .tensor import factorize, solve_lu
    shifted = kmat + Tensor(3.0 * np.eye(4))
    return solve_lu(shifted, a.permute(1, 0), factorize(shifted.data)).sum()


def gradient_suite(seed=0, tol=1e-3) -> SuiteResult:
    rng = np.random.default_rng(seed)
    cases = op_gradient_cases(rng)
    worst_name, worst = "", 0.0
    for name, (fn, params) in cases.items():
        report = finite_diff_check(fn, params, tol=tol)
        if report.max_rel_error > worst:
            worst, worst_name = report.max_rel_error, name
        if not report.passed:
            return SuiteResult("finite-diff", False, f"op {name}: {report}")
    return SuiteResult("finite-diff", True,
                       f"{len(cases)} ops pass (worst {worst_name}: {worst:.3e}, tol {tol:.1e})")


def run_check(trials=100, seed=0, tol=1e-3) -> list:
    return [gradient_suite(seed=seed, tol=tol),
            roundtrip_suite(trials=trials, seed=seed, tol=1e-4),
            logdet_suite(trials=min(trials, 60), seed=seed, tol=tol)]
