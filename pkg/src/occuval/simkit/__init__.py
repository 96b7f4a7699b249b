"""Fixed-step simulation and Monte-Carlo sweeps of piecewise polynomial loops.

The inner integration loop runs in a compiled extension when it is available
and falls back to a vectorised NumPy kernel otherwise.  Set
``OCCUVAL_PURE_PYTHON=1`` to force the fallback.
"""
import os

from . import _kernels_py

try:
    from . import _kernels as _compiled_kernels
except ImportError:  # extension not built
    _compiled_kernels = None

if _compiled_kernels is not None and os.environ.get("OCCUVAL_PURE_PYTHON", "") not in ("1", "true", "yes"):
    BACKEND = "compiled"
    integrate_batch = _compiled_kernels.integrate_batch
else:
    BACKEND = "python"
    integrate_batch = _kernels_py.integrate_batch


def get_kernel(name: str | None = None):
    """Return the batch kernel by name (``"compiled"``/``"python"``), default the active one."""
    if name is None:
        return integrate_batch
    if name == "python":
        return _kernels_py.integrate_batch
    if name == "compiled":
        if _compiled_kernels is None:
            raise RuntimeError("compiled kernel is not available; build the extension first")
        return _compiled_kernels.integrate_batch
    raise ValueError(f"unknown backend {name!r}")


from .core import (  # noqa: E402
    DivergenceError,
    SweepReport,
    SweepSpec,
    Trajectory,
    emit_plot_data,
    integrate,
    integrate_many,
    liouville_residual,
    monte_carlo_sweep,
    trajectory_cost,
)

__all__ = [
    "BACKEND",
    "DivergenceError",
    "SweepReport",
    "SweepSpec",
    "Trajectory",
    "emit_plot_data",
    "get_kernel",
    "integrate",
    "integrate_batch",
    "integrate_many",
    "liouville_residual",
    "monte_carlo_sweep",
    "trajectory_cost",
]
