"""Build script for the optional compiled kernel extension.

The package is fully functional without the extension (numpy fallback is
selected at import time), so a failed compile must never block the install.
"""

from setuptools import Extension, setup
from setuptools.command.build_ext import build_ext


class optional_build_ext(build_ext):
    """Skip extension building instead of failing the whole install."""

    def run(self):
        try:
            super().run()
        except Exception as exc:  # compiler/toolchain missing
            print(f"warning: skipping compiled kernels ({exc}); "
                  "the pure numpy backend will be used")

    def build_extension(self, ext):
        try:
            super().build_extension(ext)
        except Exception as exc:
            print(f"warning: could not build {ext.name} ({exc}); "
                  "the pure numpy backend will be used")


try:
    from Cython.Build import cythonize

    extensions = cythonize(
        [
            Extension(
                "attnpop._kernels",
                ["src/attnpop/_kernels.pyx"],
                extra_compile_args=["-O3"],
            )
        ],
        compiler_directives={"language_level": "3"},
    )
except ImportError:
    extensions = []

setup(ext_modules=extensions, cmdclass={"build_ext": optional_build_ext})
