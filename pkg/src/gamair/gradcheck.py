"""Central finite-difference checks against tape gradients."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .tensor import Tape, Tensor


def finite_diff_check(
    f: Callable[[Tensor], Tensor],
    x: Tensor,
    h: float = 1e-5,
    wrt: Sequence[Tensor] = (),
    order: int = 2,
) -> float:
    """Max relative discrepancy between tape and central-difference gradients.

    ``f`` maps ``x`` to a scalar tensor. Gradients are checked for ``x`` and for
    every tensor in ``wrt`` (typically module parameters that ``f`` closes
    over). Per coordinate the error is ``|a - n| / max(|a|, |n|, 1e-8)``.

    ``order=2`` is the usual two-point stencil. ``order=4`` uses four points,
    (8 (f(+h) - f(-h)) - (f(+2h) - f(-2h))) / 12h, whose O(h^4) truncation
    error allows a larger h when tiny gradients would drown in roundoff.
    """
    if h <= 0:
        raise ValueError(f"step h must be positive, got {h}")
    if order not in (2, 4):
        raise ValueError(f"order must be 2 or 4, got {order}")
    targets = [x, *wrt]
    saved_flags = [t.requires_grad for t in targets]
    for t in targets:
        t.requires_grad = True
        t.grad = None
    try:
        with Tape() as tape:
            loss = f(x)
        tape.backward(loss)
        analytic = [np.zeros_like(t.data) if t.grad is None else t.grad.copy() for t in targets]
        tape.release()
    finally:
        for t, flag in zip(targets, saved_flags):
            t.requires_grad = flag
            t.grad = None

    worst = 0.0
    for t, a in zip(targets, analytic):
        original = t.data
        flat = original.reshape(-1)

        def at(i, delta):
            moved = flat.copy()
            moved[i] += delta
            t.data = moved.reshape(original.shape)
            try:
                return f(x).item()
            finally:
                t.data = original

        for i in range(flat.size):
            central = at(i, h) - at(i, -h)
            if order == 2:
                numeric = central / (2.0 * h)
            else:
                numeric = (8.0 * central - (at(i, 2 * h) - at(i, -2 * h))) / (12.0 * h)
            an = float(a.reshape(-1)[i])
            err = abs(an - numeric) / max(abs(an), abs(numeric), 1e-8)
            worst = max(worst, err)
    return worst
