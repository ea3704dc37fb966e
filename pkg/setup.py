import numpy as np
from setuptools import Extension, setup

try:
    from Cython.Build import cythonize

    ext_modules = cythonize(
        [
            Extension(
                "fedfrac._ifs_kernel",
                ["src/fedfrac/_ifs_kernel.pyx"],
                include_dirs=[np.get_include()],
                extra_compile_args=["-O3"],
            )
        ],
        compiler_directives={"language_level": "3"},
    )
except ImportError:
    # pure-Python fallback is selected at import time, so building
    # without Cython is fine
    ext_modules = []

setup(ext_modules=ext_modules)
