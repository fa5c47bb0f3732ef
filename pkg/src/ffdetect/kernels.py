"""Backend selection for the loop-heavy image kernels, the fused GELU and the
AdamW update.

The compiled extension ``_ckernels`` is used when it was built; otherwise,
or when ``FF_PURE_PYTHON=1`` is set, the numpy/Python reference versions in
``_pykernels`` are used.  Both produce identical outputs, except that the
compiled GELU may differ from numpy's tanh in the last bit or two.
"""

import os
from types import ModuleType

from . import _pykernels

try:
    from . import _ckernels
except ImportError:  # extension not built
    _ckernels = None

KERNEL_NAMES = ("nms", "hysteresis", "label_components", "kmeans_assign", "window_max",
                "gelu_forward", "gelu_backward", "adamw_update")


def available_backends() -> list[str]:
    return ["python"] + (["compiled"] if _ckernels is not None else [])


def get_backend(name: str) -> ModuleType:
    if name == "python":
        return _pykernels
    if name == "compiled":
        if _ckernels is None:
            raise ImportError("compiled kernels are not built; run `pip install -e .`")
        return _ckernels
    raise ValueError(f"unknown kernel backend {name!r}")


if _ckernels is not None and os.environ.get("FF_PURE_PYTHON", "") not in ("1", "true", "yes"):
    BACKEND = "compiled"
else:
    BACKEND = "python"

_impl = get_backend(BACKEND)
nms = _impl.nms
hysteresis = _impl.hysteresis
label_components = _impl.label_components
kmeans_assign = _impl.kmeans_assign
window_max = _impl.window_max
gelu_forward = _impl.gelu_forward
gelu_backward = _impl.gelu_backward
adamw_update = _impl.adamw_update
