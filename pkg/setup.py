# Copyright 2025 Raza Ahmad. Licensed under Apache 2.0.

"""
Setup script for the regenerative MFG solver
"""

from setuptools import setup, find_packages
import os

# Read README file
def read_readme():
    readme_path = os.path.join(os.path.dirname(__file__), 'README.md')
    if os.path.exists(readme_path):
        with open(readme_path, 'r', encoding='utf-8') as f:
            return f.read()
    return "Regenerative deep policy iteration for finite-horizon mean-field games"

# Read requirements
def read_requirements():
    req_path = os.path.join(os.path.dirname(__file__), 'requirements.txt')
    if os.path.exists(req_path):
        with open(req_path, 'r', encoding='utf-8') as f:
            return [line.strip() for line in f
                    if line.strip() and not line.startswith('#') and not line.startswith('pytest')]
    return ['torch>=2.2.0', 'numpy>=1.26.0', 'scipy>=1.11.0', 'pydantic>=2.6.0', 'python-dotenv>=1.0.0']

setup(
    name="regen-mfg",
    version="0.1.0",
    author="Raza Ahmad",
    description="Regenerative deep policy iteration for finite-horizon mean-field games",
    long_description=read_readme(),
    long_description_content_type="text/markdown",
    packages=find_packages(exclude=["tests", "tests.*", "examples", "examples.*"]),
    package_data={"regen_mfg": ["config/*.cfg"]},
    classifiers=[
        "Development Status :: 4 - Beta",
        "Intended Audience :: Science/Research",
        "License :: OSI Approved :: Apache Software License",
        "Operating System :: OS Independent",
        "Programming Language :: Python :: 3",
        "Programming Language :: Python :: 3.10",
        "Programming Language :: Python :: 3.11",
        "Programming Language :: Python :: 3.12",
        "Topic :: Scientific/Engineering :: Mathematics",
    ],
    python_requires=">=3.10",
    install_requires=read_requirements(),
    extras_require={
        "dev": [
            "pytest>=7.4.0",
        ],
    },
    entry_points={
        "console_scripts": [
            "regen-mfg=regen_mfg.cli:main",
        ],
    },
    keywords=[
        "mean-field-games", "policy-iteration", "deep-learning", "stochastic-control", "hjb",
    ],
)
