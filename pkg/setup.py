"""Build script: compiles the optional Cython convolution kernels.

A plain `pip install -e . --no-build-isolation` tries to build the
extension; if Cython or a C compiler is missing the install still
succeeds and dcl falls back to the pure-numpy kernels at import time.
"""

from setuptools import setup

ext_modules = []
try:
    import numpy
    from Cython.Build import cythonize
    from setuptools import Extension

    ext = Extension(
        "dcl._kernels._convcy",
        ["src/dcl/_kernels/_convcy.pyx"],
        include_dirs=[numpy.get_include()],
        extra_compile_args=["-O3"],
        define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
        optional=True,
    )
    ext_modules = cythonize([ext], language_level=3)
except Exception:
    pass

setup(ext_modules=ext_modules)
