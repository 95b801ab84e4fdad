from setuptools import setup, find_namespace_packages

with open("requirements.txt") as f:
    requirements = [
        line.split("#")[0].strip()
        for line in f
        if line.strip() and not line.startswith("#") and not line.startswith("pytest") and not line.startswith("flake8")
    ]

setup(
    name="gaussian-transport-lab",
    version="0.1.0",
    description="Numerical laboratory for Monge-Kantorovich transport on Gaussian spaces",
    packages=find_namespace_packages(include=["common", "transport", "transport.*", "runner"]),
    py_modules=["config", "main"],
    install_requires=requirements,
    entry_points={"console_scripts": ["transport-lab=main:cli"]},
    python_requires=">=3.10",
)
