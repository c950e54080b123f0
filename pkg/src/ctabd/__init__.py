"""CT abdominal organ segmentation and measurement at desk scale.

Subpackages are imported lazily so that entry points can configure the
process (BLAS thread caps, seeds) before any numerical library loads.
"""

__version__ = "0.1.0"

_SUBMODULES = (
    "grid",
    "volio",
    "preprocess",
    "kernels",
    "diff",
    "segnet",
    "postproc",
    "rpn",
    "geometry",
    "metrics",
    "phantom",
    "config",
    "pipeline",
    "cli",
    "errors",
)


def __getattr__(name):
    if name in _SUBMODULES:
        import importlib

        return importlib.import_module(f".{name}", __name__)
    raise AttributeError(f"module {__name__!r} has no attribute {name!r}")
