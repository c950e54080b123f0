"""Build script for the compiled convolution kernels.

The package works without the extension (a numpy fallback is selected at
import time), so a failed extension build is not fatal: run
``CTABD_SKIP_NATIVE=1 pip install -e .`` to skip it explicitly.
"""
import os

from setuptools import Extension, setup


def _extensions():
    if os.environ.get("CTABD_SKIP_NATIVE"):
        return []
    import numpy as np
    from Cython.Build import cythonize

    ext = Extension(
        "ctabd.kernels._native",
        sources=["src/ctabd/kernels/_native.pyx"],
        include_dirs=[np.get_include()],
        extra_compile_args=["-O3"],
        define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
    )
    return cythonize([ext], language_level=3)


setup(ext_modules=_extensions())
