"""Build script for the optional compiled kernels.

The package works without the extension (a pure-NumPy fallback is selected at
import time), but the Cython kernels make the Monte Carlo loops several times
faster.  Set MWDML_SKIP_EXT=1 to install without compiling.
"""

import os

import numpy
from setuptools import setup

if os.environ.get("MWDML_SKIP_EXT") == "1":
    ext_modules = []
else:
    from Cython.Build import cythonize

    ext_modules = cythonize(
        "src/mwdml/_kernels.pyx",
        compiler_directives={
            "language_level": 3,
            "boundscheck": False,
            "wraparound": False,
            "cdivision": True,
        },
    )
    for ext in ext_modules:
        ext.include_dirs.append(numpy.get_include())
        ext.extra_compile_args = ["-O3"]

setup(ext_modules=ext_modules)
