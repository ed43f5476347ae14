"""Build script for the optional compiled moment kernels.

The package works without the extension (a vectorized NumPy implementation is
selected at import time), so any failure here should be survivable: build with
HETFX_SKIP_EXT=1 to skip the extension entirely.
"""
import os

from setuptools import Extension, setup

ext_modules = []
if not os.environ.get("HETFX_SKIP_EXT"):
    import numpy

    try:
        from Cython.Build import cythonize

        ext_modules = cythonize(
            [
                Extension(
                    "hetfx._fastpoly",
                    sources=["src/hetfx/_fastpoly.pyx"],
                    include_dirs=[numpy.get_include()],
                    define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
                )
            ],
            language_level=3,
        )
    except ImportError:
        # Fall back to a pre-generated C file when Cython is unavailable.
        c_source = "src/hetfx/_fastpoly.c"
        if os.path.exists(c_source):
            ext_modules = [
                Extension(
                    "hetfx._fastpoly",
                    sources=[c_source],
                    include_dirs=[numpy.get_include()],
                    define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
                )
            ]

setup(ext_modules=ext_modules)
