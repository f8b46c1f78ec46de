"""Build script: compiles the optional kernel extension.

The extension is an accelerator only; set FEDSURV_NO_EXT=1 to skip it and
run on the pure-numpy fallback.
"""
import os

from setuptools import setup

ext_modules = []
if os.environ.get("FEDSURV_NO_EXT") != "1":
    try:
        import numpy
        from Cython.Build import cythonize
        from setuptools import Extension

        ext_modules = cythonize(
            [
                Extension(
                    "fedsurv._ckernels",
                    ["src/fedsurv/_ckernels.pyx"],
                    include_dirs=[numpy.get_include()],
                    define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
                )
            ],
            compiler_directives={"language_level": 3},
        )
    except ImportError:
        ext_modules = []

setup(ext_modules=ext_modules)
