"""splatsim: an editable 4D Gaussian-splat scene simulator.

Fits dynamic, semantics-grouped Gaussian scenes from posed images, exposes
scene-editing operators (remove, insert, move, resize, recolor, retexture,
physics simulation), and drives them through a small scripting language
with transactional sessions.
"""

__version__ = "0.1.0"

import os as _os

# Honor the thread override before any BLAS-backed import happens.  User-set
# BLAS variables take precedence (setdefault).
_threads = _os.environ.get("SPLATSIM_THREADS")
if _threads:
    for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS",
                 "MKL_NUM_THREADS", "NUMEXPR_NUM_THREADS"):
        _os.environ.setdefault(_var, _threads)
del _os, _threads

from .core_math import Camera
from .scene import SceneModel
from .sceneio import load_scene, save_scene

__all__ = ["Camera", "SceneModel", "__version__", "load_scene", "save_scene"]
