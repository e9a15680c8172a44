"""Build script: compiles the fused-kernel extension when a toolchain is available.

The package is fully functional without the extension (the numpy reference
backend is selected at import time); set TOKENPRUNE_NO_EXT=1 to force a
pure-Python install.
"""

import os

from setuptools import setup

ext_modules = []
if not os.environ.get("TOKENPRUNE_NO_EXT"):
    try:
        import numpy
        from Cython.Build import cythonize
        from setuptools.extension import Extension

        ext_modules = cythonize(
            [
                Extension(
                    "tokenprune.backend._fused",
                    ["src/tokenprune/backend/_fused.pyx"],
                    include_dirs=[numpy.get_include()],
                    extra_compile_args=["-O3"],
                    define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
                )
            ],
            language_level=3,
        )
    except ImportError:
        ext_modules = []

setup(ext_modules=ext_modules)
