from setuptools import setup, find_packages

setup(
    name="crystal_surface",
    version="1.0.0",
    packages=find_packages(exclude=["tests"]),
    python_requires=">=3.9",
    install_requires=[
        "numpy",
        "scipy>=1.10",
        "pandas",
        "numba",
        "python-dotenv",
        "pyyaml",
    ],
    extras_require={
        "plot": ["matplotlib"],
        "test": ["pytest"],
    },
    entry_points={
        "console_scripts": ["crystal-surface=main:main"],
    },
    py_modules=["main"],
)
