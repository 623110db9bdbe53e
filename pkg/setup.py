"""Build script for the optional compiled kernel core.

The package works without the extension (a pure-numpy fallback is selected
at import time), so the build degrades gracefully when Cython or a C
compiler is unavailable.
"""

from setuptools import Extension, setup

try:
    from Cython.Build import cythonize

    extensions = cythonize(
        [
            Extension(
                "goldilocks.backends._core",
                ["src/goldilocks/backends/_core.pyx"],
            )
        ],
        language_level=3,
    )
except ImportError:
    extensions = []

setup(ext_modules=extensions)
