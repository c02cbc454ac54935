"""Builds the pybind11 extension by delegating to the project's CMake."""

import subprocess
import sys
from pathlib import Path

from setuptools import Extension, setup
from setuptools.command.build_ext import build_ext


class CMakeExtension(Extension):
    def __init__(self, name):
        super().__init__(name, sources=[])


class CMakeBuild(build_ext):
    def build_extension(self, ext):
        extdir = Path(self.get_ext_fullpath(ext.name)).resolve().parent
        build_dir = Path(self.build_temp).resolve() / "cmake"
        build_dir.mkdir(parents=True, exist_ok=True)
        source_dir = Path(__file__).resolve().parent
        config = "Debug" if self.debug else "Release"
        subprocess.run(
            [
                "cmake",
                str(source_dir),
                f"-DCMAKE_BUILD_TYPE={config}",
                f"-DSIMMT_PYTHON_OUTPUT_DIR={extdir}",
                f"-DPython3_EXECUTABLE={sys.executable}",
                "-DSIMMT_TESTS=OFF",
            ],
            cwd=build_dir,
            check=True,
        )
        subprocess.run(
            ["cmake", "--build", ".", "--target", "simmt_python", "-j"],
            cwd=build_dir,
            check=True,
        )


setup(
    packages=["simmt"],
    package_dir={"simmt": "python/simmt"},
    ext_modules=[CMakeExtension("simmt._core")],
    cmdclass={"build_ext": CMakeBuild},
)
