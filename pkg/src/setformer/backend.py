"""Kernel backend selection.

Two interchangeable kernel sets exist: the compiled extension
(``setformer._kernels``, Cython) and the pure-numpy module
(``setformer.kernels_np``). The compiled one is picked at import when
available; ``SETFORMER_BACKEND=numpy|compiled|auto`` overrides, and
:func:`set_backend` switches at runtime (used by tests and the benchmark).

Both backends satisfy the same numerical contract (see kernels_np); results
agree to a few ulps but are not guaranteed bit-identical across backends.
Reproducibility guarantees therefore always assume a fixed backend.
"""

import os

from . import kernels_np

try:
    from . import _kernels as _compiled
except ImportError:
    _compiled = None

_BACKENDS = {"numpy": kernels_np}
if _compiled is not None:
    _BACKENDS["compiled"] = _compiled


def available():
    return sorted(_BACKENDS)


def _resolve(name):
    if name == "auto":
        name = "compiled" if _compiled is not None else "numpy"
    if name not in _BACKENDS:
        if name == "compiled":
            raise RuntimeError("compiled kernel extension is not built")
        raise ValueError(f"unknown backend {name!r} (choose from auto, numpy, compiled)")
    return name


_active_name = _resolve(os.environ.get("SETFORMER_BACKEND", "auto"))
_active = _BACKENDS[_active_name]


def set_backend(name):
    """Select the kernel backend by name ('auto', 'numpy' or 'compiled')."""
    global _active, _active_name
    _active_name = _resolve(name)
    _active = _BACKENDS[_active_name]


def active_name():
    return _active_name


def module(name=None):
    """Return a backend module by name (default: the active one)."""
    return _active if name is None else _BACKENDS[_resolve(name)]


def softmax_rows(x):
    return _active.softmax_rows(x)


def softmax_rows_grad(y, g):
    return _active.softmax_rows_grad(y, g)


def logsumexp_rows(x):
    return _active.logsumexp_rows(x)


def layernorm_rows(x, gamma, beta, eps):
    return _active.layernorm_rows(x, gamma, beta, eps)


def layernorm_rows_grad(x, gamma, mean, rstd, g):
    return _active.layernorm_rows_grad(x, gamma, mean, rstd, g)


def sigmoid_fwd(x):
    return _active.sigmoid_fwd(x)


def sigmoid_grad(y, g):
    return _active.sigmoid_grad(y, g)


def tanh_fwd(x):
    return _active.tanh_fwd(x)


def tanh_grad(y, g):
    return _active.tanh_grad(y, g)


def relu_fwd(x):
    return _active.relu_fwd(x)


def relu_grad(x, g):
    return _active.relu_grad(x, g)


def adam_update(p, g, m, v, lr, beta1, beta2, eps, bc1, bc2):
    _active.adam_update(p, g, m, v, lr, beta1, beta2, eps, bc1, bc2)
