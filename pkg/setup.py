from offsetfed import __version__
from codecs import open
from os.path import abspath, dirname, join
from setuptools import find_packages, setup

this_dir = abspath(dirname(__file__))
with open(join(this_dir, "README.md"), encoding="utf-8") as file:
    long_description = file.read()

setup(
    name="offsetfed",
    version=__version__,
    python_requires=">=3.8",
    description="Federated learning simulator with learned per-client input offsets",
    long_description=long_description,
    long_description_content_type="text/markdown",
    classifiers=[
        "Operating System :: OS Independent",
        "Natural Language :: English",
        "Programming Language :: Python :: 3",
        "Programming Language :: Python :: 3.8",
        "Programming Language :: Python :: 3.9",
        "Programming Language :: Python :: 3.10",
        "Programming Language :: Python :: 3.11",
        "Topic :: Scientific/Engineering :: Artificial Intelligence",
    ],
    keywords="cli federated-learning simulation",
    packages=find_packages(exclude=["docs", "tests"]),
    install_requires=[
        "numpy>=1.20",
    ],
    entry_points={
        "console_scripts": [
            "offsetfed=offsetfed.cli:main",
        ],
    },
)
