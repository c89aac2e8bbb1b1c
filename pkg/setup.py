from setuptools import setup, find_packages

with open("README.md", "r", encoding="utf-8") as fh:
    long_description = fh.read()

setup(
    name="l2l-pcm",
    version="0.1.0",
    description="Learning-to-learn on simulated phase-change memory crossbars",
    long_description=long_description,
    long_description_content_type="text/markdown",
    packages=find_packages(exclude=("tests", "tests.*")),
    classifiers=[
        "Programming Language :: Python :: 3",
        "License :: OSI Approved :: MIT License",
        "Operating System :: OS Independent",
        "Topic :: Scientific/Engineering :: Artificial Intelligence",
    ],
    python_requires=">=3.8",
    install_requires=[
        "numpy>=1.21.0",
        "scipy>=1.7.0",
        "pydantic>=2.0",
        "tqdm>=4.62.0",
        "psutil>=5.9.0",
        "tomli>=2.0.0; python_version < '3.11'",
        "tomli-w>=1.0.0",
        "Pillow>=9.0.0",
    ],
    extras_require={
        "dev": ["pytest>=7.0", "black", "isort"],
    },
    entry_points={
        "console_scripts": ["l2l-pcm=l2l_pcm.cli:main"],
    },
    keywords="meta-learning, maml, e-prop, spiking, pcm, crossbar, in-memory computing",
)
