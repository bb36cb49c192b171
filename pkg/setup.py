#!/usr/bin/env python3
from setuptools import setup

setup(
    name="chorale-stems",
    version="1.0.0",
    description="Generate four-part chorale performances with aligned MIDI, expression and audio stems",
    py_modules=[
        "score_core",
        "augment",
        "expression",
        "synth",
        "mixdown",
        "dataset_io",
        "pipeline_config",
        "pipeline",
        "chorale_stems",
    ],
    install_requires=[
        "numpy>=1.24",
        "scipy>=1.10",
        "pydub>=0.25.1",
        "audioop-lts; python_version>='3.13'",
        "mido>=1.3",
        "PyYAML>=6.0",
        "tqdm>=4.65",
        "joblib>=1.3",
    ],
    extras_require={
        "dev": ["pytest>=7.0", "pyloudnorm>=0.1.1"],
    },
    entry_points={
        "console_scripts": [
            "chorale-stems=chorale_stems:main",
        ],
    },
    python_requires=">=3.9",
)
