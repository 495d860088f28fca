import numpy
from setuptools import Extension, setup
from Cython.Build import cythonize

# -ffp-contract=off keeps the C kernels bit-compatible with the numpy
# fallback (no FMA contraction of a*b+c).
FLAGS = ["-O3", "-ffp-contract=off"]

extensions = [
    Extension(
        "protorbf._kernels._slic_cy",
        ["src/protorbf/_kernels/_slic_cy.pyx"],
        include_dirs=[numpy.get_include()],
        extra_compile_args=FLAGS,
        define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
    ),
    Extension(
        "protorbf._kernels._pam_cy",
        ["src/protorbf/_kernels/_pam_cy.pyx"],
        include_dirs=[numpy.get_include()],
        extra_compile_args=FLAGS,
        define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
    ),
]

setup(
    ext_modules=cythonize(extensions, compiler_directives={"language_level": "3"}),
)
