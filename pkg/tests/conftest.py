import numpy as np
import pytest

from shimkit.field import ComplexImage, Mask, SliceSample, TargetProfile


def random_instance(rng, h=3, w=4, c=3, frac=0.7, lam=1e-3):
    data = rng.normal(size=(h, w, c)) + 1j * rng.normal(size=(h, w, c))
    bits = rng.random((h, w)) < frac
    bits.flat[0] = True
    return ComplexImage(data), Mask(bits, 0.5), TargetProfile(1.0, lam)


def random_weights(rng, c):
    return rng.normal(size=c) + 1j * rng.normal(size=c)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def make_instance():
    return random_instance


def sample_from(b1, mask, target=None, **prov):
    prov = {"phantom": 0, "slice": 0, "aug": 0, "angle": 0.0, **prov}
    return SliceSample(b1, mask, target or TargetProfile(), provenance=prov)


ACCEPTANCE = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE):
            terminalreporter.write_line(line)
