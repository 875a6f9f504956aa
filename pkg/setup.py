import os

import numpy as np
from setuptools import Extension, setup

# FINT_NO_EXT=1 skips the compiled kernels; the package then runs on the numpy fallback.
ext_modules = []
if not os.environ.get("FINT_NO_EXT"):
    from Cython.Build import cythonize

    ext_modules = cythonize(
        [
            Extension(
                "fint._ckernels",
                ["src/fint/_ckernels.pyx"],
                include_dirs=[np.get_include(), "src/fint"],
                extra_compile_args=["-O3", "-march=native"],
            )
        ],
        compiler_directives={"language_level": "3"},
    )

setup(ext_modules=ext_modules)
