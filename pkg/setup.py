import os

from setuptools import Extension, setup

ext_modules = []
if not os.environ.get("OPTEMBED_NO_EXT"):
    try:
        import numpy as np
        from Cython.Build import cythonize
    except ImportError:
        pass
    else:
        ext_modules = cythonize(
            [Extension("optembed._kernels", ["src/optembed/_kernels.pyx"],
                       include_dirs=[np.get_include()],
                       extra_compile_args=["-O3"])],
            language_level=3,
        )

setup(ext_modules=ext_modules)
