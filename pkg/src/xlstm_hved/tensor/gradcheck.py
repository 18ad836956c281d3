"""Central finite-difference verification of analytic gradients."""

from __future__ import annotations

import contextlib
from dataclasses import dataclass
from typing import Callable, Mapping

import numpy as np

from .core import (BranchTape, ContractViolation, NumericError, Tensor, no_grad, record_branches,
                   replay_branches)

MAX_COORDS = 64
ABS_FLOOR = 1e-6


@dataclass
class GradReport:
    max_rel_err: float
    passed: bool
    n_coords: int
    worst_index: tuple | None = None

    # the field name `pass` is a keyword; expose it as an alias
    def __getitem__(self, key):
        if key == "pass":
            return self.passed
        return getattr(self, key)


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = ABS_FLOOR) -> np.ndarray:
    """Per-coordinate relative error; coordinates agreeing to within ``floor`` absolutely count as 0.

    The floor keeps exactly-zero gradients (where only difference-quotient
    roundoff remains) from registering as failures.
    """
    diff = np.abs(analytic - numeric)
    scale = np.maximum(np.abs(analytic), np.abs(numeric))
    with np.errstate(divide="ignore", invalid="ignore"):
        rel = np.where(diff <= floor, 0.0, diff / np.where(scale > 0, scale, 1.0))
    return rel


def sample_coordinates(shape: tuple, max_coords: int, rng: np.random.Generator) -> list[tuple]:
    n = int(np.prod(shape))
    flat = np.arange(n) if n <= max_coords else np.sort(rng.choice(n, size=max_coords, replace=False))
    return [tuple(int(v) for v in np.unravel_index(i, shape)) for i in flat]


def _scalar(value) -> float:
    v = float(np.asarray(value.data if isinstance(value, Tensor) else value, dtype=np.float64).reshape(()))
    if not np.isfinite(v):
        raise NumericError("finite-difference objective is not finite")
    return v


def _evaluate(f: Callable[[], Tensor], tape: BranchTape | None) -> float:
    if tape is None:
        return _scalar(f())
    with replay_branches(tape):
        value = _scalar(f())
    if tape.cursor != len(tape.decisions):
        raise ContractViolation("replayed evaluation made fewer branch decisions than recorded")
    return value


def check_gradients(f: Callable[[], Tensor], tensors: Mapping[str, Tensor], h: float, tol: float,
                    max_coords: int = MAX_COORDS, seed: int = 0, floor: float = ABS_FLOOR,
                    reference: tuple[Callable[[], Tensor], Mapping[str, Tensor]] | None = None,
                    freeze_branches: bool = True) -> dict[str, GradReport]:
    """Compare gradients from one backward() pass against central differences.

    ``f`` is a closure that rebuilds its graph from the current values of
    ``tensors`` on every call. For each named tensor at most ``max_coords``
    coordinates (uniform without replacement, seeded) are probed.

    ``reference`` optionally supplies a twin ``(f_ref, tensors_ref)`` on which
    the differences are taken instead, typically the same map built in float64
    so that a float32 gradient is judged against a reference free of float32
    rounding noise.

    With ``freeze_branches`` the branch decisions of nonsmooth primitives
    (leaky ReLU, max, clip, abs) are recorded during the analytic pass and
    replayed for every difference quotient. The quotients then see the single
    smooth piece on which the analytic gradient is defined, rather than
    whichever kinks happen to lie within ``h``.
    """
    if h <= 0:
        raise ContractViolation("gradient check needs h > 0")
    f_num, num_tensors = reference if reference is not None else (f, tensors)
    for name, t in tensors.items():
        if name not in num_tensors or num_tensors[name].shape != t.shape:
            raise ContractViolation(f"reference tensor {name!r} missing or of different shape")

    saved = {name: t.requires_grad for name, t in tensors.items()}
    for t in tensors.values():
        t.requires_grad, t.grad = True, None
    tape = BranchTape() if freeze_branches else None
    with record_branches(tape) if tape is not None else contextlib.nullcontext():
        out = f()
    value = _scalar(out)
    out.backward()
    analytic = {}
    for name, t in tensors.items():
        analytic[name] = t.grad.copy() if t.grad is not None else np.zeros_like(t.data)
        t.grad, t.requires_grad = None, saved[name]

    reports = {}
    with no_grad():
        for i, (name, t_num) in enumerate(num_tensors.items()):
            if name not in tensors:
                continue
            coords = sample_coordinates(t_num.shape, max_coords, np.random.default_rng(seed + i))
            numeric = np.empty(len(coords))
            for j, idx in enumerate(coords):
                orig = t_num.data[idx].copy()
                try:
                    t_num.data[idx] = orig + h
                    fp = _evaluate(f_num, tape)
                    t_num.data[idx] = orig - h
                    fm = _evaluate(f_num, tape)
                finally:
                    t_num.data[idx] = orig
                numeric[j] = (fp - fm) / (2 * h)
            a = np.array([analytic[name][idx] for idx in coords], dtype=np.float64)
            # the quotient cannot resolve differences below the objective's own rounding
            roundoff = 4 * np.finfo(t_num.dtype).eps * max(abs(value), 1.0) / h
            err = relative_error(a, numeric, max(floor, roundoff))
            worst = int(err.argmax()) if len(err) else 0
            max_err = float(err.max()) if len(err) else 0.0
            reports[name] = GradReport(max_err, max_err <= tol, len(coords),
                                       coords[worst] if coords else None)
    return reports


def finite_diff_check(f: Callable[[Tensor], Tensor], theta: Tensor, h: float, tol: float,
                      max_coords: int = MAX_COORDS, seed: int = 0, floor: float = ABS_FLOOR,
                      reference: tuple[Callable[[Tensor], Tensor], Tensor] | None = None,
                      freeze_branches: bool = True) -> GradReport:
    """Single-tensor form of :func:`check_gradients`: ``f(theta)`` is a scalar."""
    ref = None
    if reference is not None:
        f_ref, t_ref = reference
        ref = (lambda: f_ref(t_ref), {"theta": t_ref})
    return check_gradients(lambda: f(theta), {"theta": theta}, h, tol, max_coords, seed, floor, ref,
                           freeze_branches)["theta"]
