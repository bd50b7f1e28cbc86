import numpy as np
from setuptools import Extension, setup

# The compiled kernel module is optional: if Cython (or a C compiler) is
# unavailable the package falls back to the numpy implementations in
# viewdiff.kernels._pykernels.
try:
    from Cython.Build import cythonize

    ext_modules = cythonize(
        [
            Extension(
                "viewdiff.kernels._ckernels",
                ["src/viewdiff/kernels/_ckernels.pyx"],
                include_dirs=[np.get_include()],
                extra_compile_args=["-O3"],
            )
        ],
        compiler_directives={"language_level": "3"},
    )
except ImportError:
    ext_modules = []

setup(ext_modules=ext_modules)
