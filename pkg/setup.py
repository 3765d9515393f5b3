import os

from setuptools import Extension, setup

# The compiled flow kernels are optional: without Cython (or with CLB_NO_EXT=1)
# the package installs pure-Python and clb.flowselect falls back to the numpy
# backend at import time.
ext_modules = []
if os.environ.get("CLB_NO_EXT") != "1":
    try:
        from Cython.Build import cythonize

        ext_modules = cythonize(
            [
                Extension(
                    "clb.flowselect._kernels",
                    ["src/clb/flowselect/_kernels.pyx"],
                    optional=True,
                )
            ],
            language_level=3,
        )
    except ImportError:
        ext_modules = []

setup(ext_modules=ext_modules)
