import os

import numpy as np
from setuptools import setup

ext_modules = []
if os.environ.get("GBPKIT_NO_EXT") != "1":
    try:
        from Cython.Build import cythonize
        from setuptools import Extension

        ext_modules = cythonize(
            [Extension("gbpkit._kernels", ["src/gbpkit/_kernels.pyx"],
                       include_dirs=[np.get_include()],
                       extra_compile_args=["-O3"],
                       define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")])],
            compiler_directives={"language_level": "3"},
        )
    except ImportError:
        # no Cython available: the package falls back to the numpy kernels
        ext_modules = []

setup(ext_modules=ext_modules)
