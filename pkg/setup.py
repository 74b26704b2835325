"""Builds the optional Cython kernel extension.

The package works without it (NumPy fallback is selected at import time);
install with no compiler by setting VPL_SKIP_EXT=1.
"""

import os

from setuptools import setup

ext_modules = []
if not os.environ.get("VPL_SKIP_EXT"):
    try:
        import numpy as np
        from Cython.Build import cythonize
        from setuptools import Extension

        ext_modules = cythonize(
            [
                Extension(
                    "vpl._kernels._core",
                    ["src/vpl/_kernels/_core.pyx"],
                    include_dirs=[np.get_include()],
                    extra_compile_args=["-O3"],
                    define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
                )
            ],
            compiler_directives={"language_level": "3"},
        )
    except ImportError:
        ext_modules = []

setup(ext_modules=ext_modules)
