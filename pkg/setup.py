import setuptools

with open("README.md", "r") as fh:
    long_description = fh.read()

setuptools.setup(
    name="nvcavity",
    version="0.1.0",
    author="nvcavity developers",
    description="Simulation and inference toolkit for an NV center in a membrane fiber Fabry-Perot cavity",
    long_description=long_description,
    long_description_content_type="text/markdown",
    include_package_data=True,
    packages=setuptools.find_packages(include=["nvcavity"]),
    package_data={"nvcavity": ["data/*.toml"]},
    install_requires=['numpy', 'pandas', 'scipy', 'rich'],
    entry_points={
        'console_scripts': [
            'nvcavity = nvcavity.__main__:_main'
        ]
    },
    classifiers=[
        "Natural Language :: English",
        "Programming Language :: Python :: 3",
        "Programming Language :: Python :: 3.11",
        "Topic :: Scientific/Engineering :: Physics",
        "Operating System :: OS Independent",
    ],
    python_requires='>=3.11',
)
