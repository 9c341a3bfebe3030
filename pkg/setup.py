"""Build the optional compiled routing kernel.

The package works without it: ``dccn.kernels`` falls back to numpy when
the extension cannot be imported.  Set ``DCCN_NO_EXT=1`` to skip the build.
"""

import os

from setuptools import setup

ext_modules = []
if not os.environ.get("DCCN_NO_EXT"):
    try:
        import numpy as np
        from Cython.Build import cythonize
        from setuptools import Extension

        ext_modules = cythonize(
            [Extension("dccn._routing_ext", ["src/dccn/_routing_ext.pyx"],
                       include_dirs=[np.get_include()],
                       define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
                       extra_compile_args=["-O3"])],
            compiler_directives={"language_level": 3},
        )
    except ImportError:
        ext_modules = []

setup(ext_modules=ext_modules)
