"""Shared fixtures: desk-scale config, model, corpora, and the receptor fixture."""

import numpy as np
import pytest

from dockinv import toydata
from dockinv.model import PipelineModel
from dockinv.surface import build_surface


@pytest.fixture(scope="session")
def toy_cfg():
    return toydata.toy_config()


@pytest.fixture(scope="session")
def mdl(toy_cfg):
    return PipelineModel(toy_cfg)


@pytest.fixture(scope="session")
def init_params(mdl):
    return mdl.init_params(seed=0)


@pytest.fixture(scope="session")
def surface_corpus(toy_cfg, mdl):
    return toydata.toy_surface_corpus(6, toy_cfg, mdl, seed=1)


@pytest.fixture(scope="session")
def complex_corpus(toy_cfg, mdl):
    samples, scaler = toydata.toy_complex_corpus(4, toy_cfg, mdl, seed=2)
    return samples, scaler


@pytest.fixture(scope="session")
def receptor_structure():
    return toydata.fixture_receptor()


@pytest.fixture(scope="session")
def receptor_cloud(receptor_structure, toy_cfg):
    cloud, patches = build_surface(receptor_structure, toy_cfg, seed=11)
    return cloud, patches


def write_pdb(structure, path):
    """Minimal fixed-column PDB writer for test fixtures."""
    lines = []
    serial = 1
    for ri, res in enumerate(structure.residues, start=1):
        for ai in res.atom_indices:
            a = structure.atoms[ai]
            x, y, z = a.coords
            name = (a.name or a.element).ljust(3)
            lines.append(
                f"ATOM  {serial:>5} {name:<4}{res.name:<3} {res.chain}{ri:>4}    "
                f"{x:8.3f}{y:8.3f}{z:8.3f}  1.00  0.00          {a.element:>2}"
            )
            serial += 1
    path.write_text("\n".join(lines) + "\n")
    return path
