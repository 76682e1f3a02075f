"""Builds the optional compiled simulator core.

The package works without it: ``polen.sim`` falls back to the pure-Python
interpreter when ``polen._core`` cannot be imported.
"""

import os

from setuptools import setup
from setuptools.command.build_ext import build_ext

ext_modules = []
if not os.environ.get("POLEN_NO_EXT"):
    try:
        from Cython.Build import cythonize
        from setuptools import Extension

        ext_modules = cythonize(
            [Extension("polen._core", ["src/polen/_core.pyx"], include_dirs=["src/polen"], extra_compile_args=["-O3"])],
            compiler_directives={"language_level": "3"},
        )
    except ImportError:
        ext_modules = []


class OptionalBuildExt(build_ext):
    """Skip the extension instead of failing the install when no compiler works."""

    def run(self):
        try:
            super().run()
        except Exception as e:  # noqa: BLE001
            print(f"warning: compiled core not built ({e}); using the pure-Python simulator")

    def build_extension(self, ext):
        try:
            super().build_extension(ext)
        except Exception as e:  # noqa: BLE001
            print(f"warning: could not build {ext.name} ({e}); using the pure-Python simulator")


setup(ext_modules=ext_modules, cmdclass={"build_ext": OptionalBuildExt})
