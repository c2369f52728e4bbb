"""Build script: compiles the optional Cython kernel extension.

The extension is an accelerator, not a requirement; if Cython or a C
compiler is unavailable the package installs anyway and falls back to the
pure-numpy kernels at import time.
"""

import sys

from setuptools import setup
from setuptools.command.build_ext import build_ext


class optional_build_ext(build_ext):
    """build_ext that downgrades compiler failures to a warning."""

    def run(self):
        try:
            super().run()
        except Exception as exc:  # compiler missing, broken toolchain, ...
            self._warn(exc)

    def build_extension(self, ext):
        try:
            super().build_extension(ext)
        except Exception as exc:
            self._warn(exc)

    @staticmethod
    def _warn(exc):
        print(
            f"WARNING: building the dift._kernels extension failed ({exc}); "
            "falling back to the pure-Python kernels.",
            file=sys.stderr,
        )


def extensions():
    try:
        from Cython.Build import cythonize
    except ImportError:
        print(
            "WARNING: Cython not available; skipping the compiled kernels.",
            file=sys.stderr,
        )
        return []
    return cythonize(
        ["src/dift/_kernels.pyx"],
        language_level=3,
        compiler_directives={"boundscheck": False, "wraparound": False},
    )


setup(
    ext_modules=extensions(),
    cmdclass={"build_ext": optional_build_ext},
)
