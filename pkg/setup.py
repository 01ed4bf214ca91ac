import re
from pathlib import Path

from setuptools import setup, find_packages


setup(
    name="attnflow",
    version=re.search(r"__version__\s+=\s+\"(.*)\"", Path("attnflow/__init__.py").read_text()).group(1),
    description="Attention dynamics of token measures",
    long_description="A small python library to simulate self-attention as a flow of measures: particle and Gaussian "
                     "dynamics, closed forms, entropic transport and energy diagnostics",
    packages=find_packages(exclude=["tests"]),
    platforms="any",
    python_requires=">=3.8",
    install_requires=Path("requirements.txt").read_text("utf-8").splitlines(),
    tests_require=["pytest>=7.0.0"],
    entry_points={"console_scripts": ["attnflow=attnflow.cli:main"]},
    long_description_content_type="text/markdown",
    classifiers=[
        "Development Status :: 4 - Beta",
        "License :: OSI Approved :: MIT License",
        "Operating System :: OS Independent",
        "Programming Language :: Python :: 3 :: Only",
        "Topic :: Scientific/Engineering :: Mathematics",
    ],
)
