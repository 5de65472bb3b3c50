"""Kernel backend selection.

Prefers the compiled extension when importable, falling back to the
pure-NumPy twins otherwise.  ``MWDML_BACKEND=python`` (or ``compiled``)
forces the choice; forcing ``compiled`` without the built extension is an
error rather than a silent fallback.
"""

from __future__ import annotations

import os

_forced = os.environ.get("MWDML_BACKEND", "").strip().lower()

if _forced not in ("", "python", "compiled"):
    raise RuntimeError(f"MWDML_BACKEND must be 'python' or 'compiled', got {_forced!r}")

if _forced == "python":
    from mwdml import _kernels_py as _impl
else:
    try:
        from mwdml import _kernels as _impl  # type: ignore[attr-defined]
    except ImportError:
        if _forced == "compiled":
            raise RuntimeError(
                "MWDML_BACKEND=compiled but the extension is not built; "
                "reinstall the package or drop the override"
            )
        from mwdml import _kernels_py as _impl

uniform_block = _impl.uniform_block
lasso_cd = _impl.lasso_cd
split_scan = _impl.split_scan


def backend_name() -> str:
    """Name of the active kernel backend: 'compiled' or 'python'."""
    return _impl.BACKEND_NAME
