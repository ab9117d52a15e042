import configparser
import pathlib

import hitok as package
from hitok import cli


ROOT = pathlib.Path(__file__).parents[2]


def test_has_docstring() -> None:
    assert package.__doc__ is not None


def test_commands() -> None:
    # Commands registered without an explicit name are named after their function.
    names = {
        command.name or getattr(command.callback, "__name__", "")
        for command in cli.app.registered_commands
    }
    assert names == {
        "train-codebook",
        "tokenize",
        "reconstruct",
        "train-ar",
        "super-resolve",
        "sweep-allocation",
        "verify",
    }


def test_tox_installs_the_pinned_requirements() -> None:
    tox = configparser.ConfigParser()
    tox.read(ROOT / "tox.ini")
    assert tox["testenv"]["deps"].split() == ["-r", "requirements/pytest-in-tox.txt"]

    lines = (ROOT / "requirements" / "pytest-in-tox.txt").read_text().splitlines()
    pinned = {line.split("==")[0] for line in lines if "==" in line and not line.startswith("#")}
    assert {
        "environs",
        "numpy",
        "pillow",
        "pytest",
        "rich",
        "scikit-image",
        "scikit-learn",
        "typer",
    } <= pinned
    # torch is installed separately so that a CPU or CUDA build can be chosen.
    assert "torch" not in pinned
