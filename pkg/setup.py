from setuptools import Extension, setup

try:
    import numpy
    from Cython.Build import cythonize
except ImportError:
    # Pure-Python install: the numpy fallback kernel is selected at import time.
    extensions = []
else:
    extensions = cythonize(
        [
            Extension(
                "datr._kernels.topk_fast",
                ["src/datr/_kernels/topk_fast.pyx"],
                include_dirs=[numpy.get_include()],
                extra_compile_args=["-O3"],
            )
        ],
        language_level=3,
    )

setup(ext_modules=extensions)
