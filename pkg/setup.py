"""Build script for the optional compiled kernel.

The package is fully functional without the extension (a numpy fallback is
selected at import time); the Cython module only accelerates the GMM
responsibility/accumulation inner loop. Any compiler failure therefore
downgrades to a warning instead of aborting the install.
"""

import os
import sys

from setuptools import setup
from setuptools.command.build_ext import build_ext


def _extensions():
    try:
        import numpy
        from Cython.Build import cythonize
        from setuptools import Extension
    except ImportError:
        return []

    compile_args = ["-O3"]
    link_args = []
    if not sys.platform.startswith("win") and not os.environ.get("CISID_NO_OPENMP"):
        compile_args.append("-fopenmp")
        link_args.append("-fopenmp")

    ext = Extension(
        "cisid.kernels._gmm_ext",
        ["src/cisid/kernels/_gmm_ext.pyx"],
        include_dirs=[numpy.get_include()],
        define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
        extra_compile_args=compile_args,
        extra_link_args=link_args,
    )
    return cythonize([ext], language_level=3)


class optional_build_ext(build_ext):
    """build_ext that tolerates a missing or broken C toolchain."""

    def run(self):
        try:
            super().run()
        except Exception as exc:  # noqa: BLE001
            self._warn(exc)

    def build_extension(self, ext):
        try:
            super().build_extension(ext)
        except Exception as exc:  # noqa: BLE001
            self._warn(exc)

    @staticmethod
    def _warn(exc):
        print(
            "WARNING: building the cisid compiled kernel failed (%s); "
            "falling back to the pure-numpy implementation." % exc,
            file=sys.stderr,
        )


setup(
    ext_modules=_extensions(),
    cmdclass={"build_ext": optional_build_ext},
)
