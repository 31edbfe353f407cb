"""Build script for the optional compiled ADMM kernel.

The package works without it; ``iclmpc.qp`` falls back to a NumPy
implementation when ``iclmpc._admm`` cannot be imported.
"""
import numpy as np
from setuptools import Extension, setup

try:
    from Cython.Build import cythonize
except ImportError:  # pragma: no cover - no compiler toolchain
    ext_modules = []
else:
    ext_modules = cythonize(
        [
            Extension(
                "iclmpc._admm",
                ["src/iclmpc/_admm.pyx"],
                include_dirs=[np.get_include()],
                extra_compile_args=["-O3"],
                optional=True,
            )
        ],
        compiler_directives={"language_level": "3"},
    )

setup(ext_modules=ext_modules)
