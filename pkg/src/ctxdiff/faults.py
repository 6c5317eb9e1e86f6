"""Deliberate formula faults used to show the verification checks can fail.

    with inject("drop_transition_prev_bias"):
        verify_composition(...)
"""
from __future__ import annotations

from contextlib import contextmanager
from contextvars import ContextVar

# transition kernel without its -sqrt(alpha_t) * b_{t-1} term
DROP_TRANSITION_PREV_BIAS = "drop_transition_prev_bias"
# posterior / sampling mean without its +b_{t-1} term
DROP_POSTERIOR_PREV_BIAS = "drop_posterior_prev_bias"

KNOWN = frozenset({DROP_TRANSITION_PREV_BIAS, DROP_POSTERIOR_PREV_BIAS})

_active: ContextVar[frozenset] = ContextVar("ctxdiff_faults", default=frozenset())


def active(name: str) -> bool:
    return name in _active.get()


@contextmanager
def inject(*names: str):
    unknown = set(names) - KNOWN
    if unknown:
        raise ValueError(f"unknown fault(s): {sorted(unknown)}")
    token = _active.set(_active.get() | frozenset(names))
    try:
        yield
    finally:
        _active.reset(token)
