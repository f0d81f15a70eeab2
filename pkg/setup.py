import os

import numpy as np
from Cython.Build import cythonize
from setuptools import Extension, setup

# -ffp-contract=off: the kernels place their fused multiply-adds explicitly and
# the numpy fallback mirrors exactly those; letting the compiler contract other
# expressions would break bitwise agreement between the two backends.
compile_args = ["-O3", "-ffp-contract=off", "-fno-math-errno", "-fno-semantic-interposition"]
link_args = []
if os.environ.get("ELACNN_PORTABLE") != "1":
    compile_args.append("-march=native")
if os.environ.get("ELACNN_NO_OPENMP") != "1":
    compile_args.append("-fopenmp")
    link_args.append("-fopenmp")

extensions = [
    Extension(
        "elacnn._ckernels",
        ["src/elacnn/_ckernels.pyx", "src/elacnn/_ext/kernels.c"],
        include_dirs=[np.get_include(), "src/elacnn"],
        extra_compile_args=compile_args,
        extra_link_args=link_args,
        optional=True,
    )
]

setup(
    ext_modules=cythonize(extensions, compiler_directives={"language_level": "3"}),
)
