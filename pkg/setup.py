import os

import numpy
from setuptools import Extension, setup

try:
    from Cython.Build import cythonize
except ImportError:
    ext_modules = []
else:
    # The kernel calls numpy's C distribution functions, which live in the
    # static helper library shipped inside numpy.random.
    npyrandom_dir = os.path.join(os.path.dirname(numpy.random.__file__), "lib")
    # optional=True: if the toolchain is unavailable the install proceeds and
    # memse._kernels falls back to the pure-numpy implementation.
    ext_modules = cythonize(
        [
            Extension(
                "memse._kernels._native",
                ["src/memse/_kernels/_native.pyx"],
                include_dirs=[numpy.get_include()],
                library_dirs=[npyrandom_dir],
                libraries=["npyrandom"],
                define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
                extra_compile_args=["-O3"],
                optional=True,
            )
        ],
        language_level=3,
    )

setup(ext_modules=ext_modules)
