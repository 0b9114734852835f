import os

from setuptools import setup

ext_modules = []
if os.environ.get("SEMISTATIC_NO_EXT") != "1":
    try:
        import numpy
        from Cython.Build import cythonize
        from setuptools import Extension

        ext_modules = cythonize(
            [Extension("semistatic._ckernels", ["src/semistatic/_ckernels.pyx"],
                       include_dirs=[numpy.get_include()])],
            language_level=3,
        )
    except ImportError:
        ext_modules = []

setup(ext_modules=ext_modules)
