import os

import numpy as np
from Cython.Build import cythonize
from setuptools import Extension, setup

# OpenMP is optional: the kernels are written so results are bitwise
# identical for any thread count, so a serial build is only slower.
extra_compile = ["-O3", "-std=c99"]
extra_link = []
if os.environ.get("VOXSYNTH_NO_OPENMP", "0") != "1":
    extra_compile.append("-fopenmp")
    extra_link.append("-fopenmp")

ext = Extension(
    "voxsynth.kernels._compiled",
    sources=["src/voxsynth/kernels/_compiled.pyx"],
    include_dirs=[np.get_include()],
    define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
    extra_compile_args=extra_compile,
    extra_link_args=extra_link,
)

setup(ext_modules=cythonize([ext], language_level=3))
