"""Builds the optional compiled kernel core.

The package works without it (numpy fallback in aerofuse._kernels.pyimpl);
when Cython and a C compiler are available the extension is built and picked
up automatically at import time.
"""

import os

from setuptools import Extension, setup

ext_modules = []
try:
    import numpy
    from Cython.Build import cythonize
except ImportError:
    cythonize = None

if cythonize is not None and os.path.exists("src/aerofuse/_kernels/_core.pyx"):
    ext_modules = cythonize(
        [
            Extension(
                "aerofuse._kernels._core",
                ["src/aerofuse/_kernels/_core.pyx"],
                include_dirs=[numpy.get_include()],
                define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
            )
        ],
        language_level=3,
    )

setup(ext_modules=ext_modules)
