import numpy as np
import pytest

from een.datasets import ModeOffsetSpec, gen_mode_offset, split
from een.inference import extract_latents
from een.model import ArchSpec, ModelBundle, snapshot
from een.training import PhaseSchedule, train_conditional, train_deterministic


def bimodal_spec(n=2000, target_dim=4, seed=0) -> ModeOffsetSpec:
    """d=1, A=0, two modes at c = +1 and c = -1, no noise."""
    return ModeOffsetSpec(input_dim=1, mode_count=2, target_dim=target_dim,
                          offsets=[[1.0] * target_dim, [-1.0] * target_dim],
                          mixing=[[0.0]] * target_dim, noise_sigma=0.0, sample_count=n, seed=seed)


def small_mlp(input_dim=1, target_dim=4, latent_dim=2, hidden=32, batch_norm=False) -> ArchSpec:
    return ArchSpec(kind="mlp", input_shape=(input_dim,), target_shape=(target_dim,), layers=2,
                    hidden=hidden, latent_dim=latent_dim, batch_norm=batch_norm,
                    output_activation="none", phi_hidden=32)


def small_conv(channels=2, size=8, latent_dim=2, feature_maps=4, batch_norm=True) -> ArchSpec:
    return ArchSpec(kind="conv", input_shape=(channels, size, size), target_shape=(1, size, size),
                    layers=2, feature_maps=feature_maps, latent_dim=latent_dim, batch_norm=batch_norm,
                    phi_layers=1, phi_feature_maps=4, phi_hidden=8)


@pytest.fixture(scope="session")
def bimodal():
    """(spec, train, val, test) splits of the bimodal dataset."""
    spec = bimodal_spec()
    return (spec, *split(gen_mode_offset(spec), (0.8, 0.1, 0.1), 0))


@pytest.fixture(scope="session")
def trained_een(bimodal):
    """EEN trained through both phases on the bimodal data, plus reports and bank."""
    _, train, val, _ = bimodal
    bundle = ModelBundle.create(small_mlp(), seed=0)
    sched = PhaseSchedule(epochs_deterministic=40, epochs_conditional=60, batch_size=128)
    det = train_deterministic(bundle, train, sched, val)
    snapshot(bundle)
    cond = train_conditional(bundle, train, sched, val)
    return bundle, det, cond, extract_latents(bundle, train)


def rand(shape, seed=0):
    return np.random.default_rng(seed).standard_normal(shape)


def pytest_terminal_summary(terminalreporter):
    import sys

    module = sys.modules.get("test_acceptance")
    if module is not None and module.RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in module.RESULTS:
            terminalreporter.write_line(line)
