from setuptools import setup, find_packages

setup(
    name="donorselect",
    version="0.1.0",
    description="Donor selection for synthetic control by spillover detection",
    packages=find_packages(exclude=("tests", "examples", "examples.*")),
    package_data={"donorselect": ["conf/*.json"]},
    python_requires=">=3.9",
    install_requires=[
        "numpy>=1.24",
        "scipy>=1.10",
        "pandas>=2.0",
        "joblib>=1.3",
    ],
    extras_require={"test": ["pytest>=7.4"]},
    entry_points={"console_scripts": ["donorselect=donorselect.main:main"]},
)
