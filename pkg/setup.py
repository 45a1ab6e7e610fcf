#!/usr/bin/env python
"""
``vesicle``
-----------

``vesicle`` provides a command line tool and Python library for detecting
synapses in anisotropic serial-section electron microscopy volumes, using
vesicle-aware features, a random forest voxel classifier and 2D-then-3D
object fusion.



Links
`````
* `Changelog: <CHANGELOG.md>`

"""
from setuptools import setup, find_packages
from setuptools.command.install import install


class PostInstallCommand(install):
    def run(self):
        install.run(self)

        # try to enable bash completion, if possible
        import os

        paths_to_try = ["/etc/bash_completion.d", "/usr/local/etc/bash_completion.d"]

        for path in paths_to_try:
            if os.access(path, os.W_OK):
                try:
                    with open(os.path.join(path, "vesicle"), "w") as f:
                        f.write('eval "$(_VESICLE_COMPLETE=bash_source vesicle)"')
                    print("Enabled bash auto-completion for vesicle")
                    return
                except Exception:
                    print("Unable to enable bash auto-completion for vesicle")


with open("vesicle/version.py") as import_file:
    exec(import_file.read())


with open("README.md") as readme:
    README = readme.read()


# Dependencies
TESTING_DEPS = [
    "coverage",
    "flake8",
    "pytest",
    "pytest-cov",
    "mock",
    "black",
]
ALL_DEPS = [
    "altair>=4.1.0",
]


setup(
    name="vesicle",
    version=__version__,  # noqa
    packages=find_packages(exclude=["*test*"]),
    install_requires=[
        "click>=7.0",
        "jsonschema>=3.0",
        "numba>=0.50",
        "numpy>=1.17",
        "pandas>=1.0.3",
        "Pillow>=6.0",
        "scipy>=1.3",
    ],
    python_requires=">=3.6",
    include_package_data=True,
    zip_safe=False,
    extras_require={
        "all": ALL_DEPS,
        "testing": TESTING_DEPS,
    },
    cmdclass={"install": PostInstallCommand},
    description="Vesicle-aware synapse detection for anisotropic EM volumes",
    long_description=README,
    long_description_content_type="text/markdown",
    license="MIT License",
    keywords="electron microscopy synapse detection random forest connectomics",
    classifiers=[
        "Environment :: Console",
        "License :: OSI Approved :: MIT License",
        "Topic :: Scientific/Engineering :: Bio-Informatics",
        "Topic :: Scientific/Engineering :: Image Recognition",
        "Topic :: Software Development :: Libraries :: Python Modules",
    ],
    entry_points={"console_scripts": ["vesicle = vesicle.cli:vesicle"]},
    test_suite="tests",
)
