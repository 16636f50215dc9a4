from Cython.Build import cythonize
from setuptools import Extension, setup

extensions = [
    Extension("cfxlab.kernels._ckernels", ["src/cfxlab/kernels/_ckernels.pyx"]),
]

setup(
    ext_modules=cythonize(
        extensions,
        compiler_directives={
            "language_level": "3",
            "boundscheck": False,
            "wraparound": False,
            "cdivision": True,
        },
    ),
)
