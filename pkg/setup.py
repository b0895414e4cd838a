#!/usr/bin/env python
from pathlib import Path
from setuptools import setup, find_packages

version_file = Path(__file__).parent.joinpath("sipmtwin", "VERSION.txt")
version = version_file.read_text(encoding="UTF-8").strip()

with open("requirements.txt") as reqs_file:
    install_requires = reqs_file.read().splitlines()

with open("README.md", "r") as fh:
    long_description = fh.read()

setup(
    name="sipmtwin",
    version=version,
    packages=find_packages(exclude=["tests", "tests.*"]),
    keywords=[
        "SiPM",
        "silicon photomultiplier",
        "time-to-digital converter",
        "single photon time resolution",
        "time of flight",
        "X-ray CT",
        "S-parameters",
        "simulation",
    ],
    install_requires=install_requires,
    license="Apache 2.0",
    description="sipmtwin: a digital twin of a SiPM fast readout chain",
    long_description=long_description,
    long_description_content_type="text/markdown",
    include_package_data=True,
    package_data={"sipmtwin": ["VERSION.txt"]},
    entry_points={"console_scripts": ["sipmtwin=sipmtwin.__main__:_main"]},
    python_requires=">=3.9",
    zip_safe=True,
)
