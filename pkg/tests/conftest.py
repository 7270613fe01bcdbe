import numpy as np
import pytest

from gbpse.harness import DATA_DIR
from gbpse.measurements import generate_measurements, load_devices
from gbpse.network import build_admittance, load_case


class Problem:
    def __init__(self, case_name, devices_name, sigma2, seed, noise_scale=1.0):
        self.case = load_case(DATA_DIR / case_name)
        self.adm = build_admittance(self.case)
        self.devices = load_devices(DATA_DIR / devices_name, self.case)
        self.measurements = generate_measurements(
            self.case, self.devices, sigma2, seed, self.adm, noise_scale)


@pytest.fixture(scope="session")
def toy3():
    return Problem("toy3.json", "toy3_5dev.json", 1e-4, 7)


@pytest.fixture(scope="session")
def two_bus():
    return Problem("two_bus.json", "two_bus_3dev.json", 1e-4, 3)


@pytest.fixture(scope="session")
def ieee14():
    return Problem("ieee14.json", "ieee14_61dev.json", 1e-8, 11)


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)
