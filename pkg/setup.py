import os

import numpy
from setuptools import Extension, setup

try:
    from Cython.Build import cythonize
except ImportError:  # pure-Python install; camlmlab.kernels falls back to numpy
    cythonize = None

# -ffp-contract=off keeps a*b+c as two roundings so the compiled kernels agree
# bitwise with the numpy fallback.
compile_args = ["-O3", "-ffp-contract=off"]
if not os.environ.get("CAMLMLAB_PORTABLE"):
    compile_args.append("-march=native")

ext_modules = []
if cythonize is not None:
    ext_modules = cythonize(
        [
            Extension(
                "camlmlab._kernels",
                ["src/camlmlab/_kernels.pyx"],
                include_dirs=[numpy.get_include()],
                extra_compile_args=compile_args,
                define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
            )
        ],
        compiler_directives={"language_level": "3"},
    )

setup(ext_modules=ext_modules)
