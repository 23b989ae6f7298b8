from setuptools import find_packages, setup

setup(
    name="lrse",
    version="0.1",
    packages=find_packages(exclude=["tests"]),
    install_requires=["numpy", "pydantic>=2"],
    extras_require={"test": ["pytest", "hypothesis"]},
    entry_points={"console_scripts": ["lrse=lrse.main:main"]},
)
