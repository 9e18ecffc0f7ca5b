"""
Shared fixtures: small simulated sequences, a tiny network architecture and
the stub detection server on an ephemeral localhost port.
"""
import os

import numpy as np
import pytest

from app.adapter import ArchSpec, MaskSpec, TrainConfig
from app.heatsim import DefectSpec, ExcitationSpec, SlabSpec, simulate
from app.seqcore import InspectionSequence
from demo_server import BackgroundServer, create_app

slow = pytest.mark.skipif(os.environ.get('AIRT_RUN_SLOW') != '1', reason="set AIRT_RUN_SLOW=1 to run")


@pytest.fixture(scope='session')
def small_spec():
    """32x32 slab with one shallow 6x6 delamination"""
    return SlabSpec(
        nx=32, ny=32, nz=6,
        defects=(DefectSpec((12, 12, 1, 18, 18, 3), alpha_scale=0.05),),
        excitation=ExcitationSpec(noise_std=0.01),
        duration_s=3.0, frame_rate_hz=10.0, seed=3,
    )


@pytest.fixture(scope='session')
def small_sim(small_spec):
    return simulate(small_spec)


@pytest.fixture(scope='session')
def small_sequence(small_sim):
    return small_sim[0]


@pytest.fixture(scope='session')
def small_labels(small_sim):
    return small_sim[1]


@pytest.fixture
def random_sequence():
    rng = np.random.default_rng(0)
    return InspectionSequence(rng.random((12, 6, 5)).astype(np.float32), frame_rate_hz=10.0)


@pytest.fixture
def tiny_arch():
    return ArchSpec(input_len=32, channels=(4, 8), kernel_size=3, stride=2, se_reduction=2,
                    attention=True, decoder_seed_len=4, latent_dim=3)


@pytest.fixture
def tiny_train():
    return TrainConfig(learning_rate=1e-3, batch_size=16, epochs=3, latent_dim=3,
                       mask=MaskSpec(patch_len=4), max_pixels_per_epoch=64, log_every=0)


@pytest.fixture
def stub_server():
    """Factory: stub_server(mode, **kwargs) -> running BackgroundServer"""
    servers = []

    def start(mode='oracle', **kwargs):
        server = BackgroundServer(create_app(mode, **kwargs)).start()
        servers.append(server)
        return server

    yield start
    for server in servers:
        server.stop()
