"""
Shared fixtures: small phantoms and a hand-set threshold network.
"""

import numpy as np
import pytest
import torch

from covid_ctseg.config import PhantomSpec, UNetConfig
from covid_ctseg.phantom import synth_volume
from covid_ctseg.unet import ModelState, build_unet
from covid_ctseg.volume_io import write_bundle

# normalized intensity separating lung parenchyma (~0.15) from lesions (~0.57)
LESION_CUT = 0.36
HEAD_GAIN = 1000.0


def small_spec(**overrides) -> PhantomSpec:
    """A 48x48 phantom whose lesions fit the narrowest lung."""
    values = dict(slide_count=8, height=48, width=48, lesion_radius_range=(1.5, 2.5), seed=3)
    values.update(overrides)
    return PhantomSpec(**values)


def quiet_spec(**overrides) -> PhantomSpec:
    """Like small_spec but with HU noise small enough to threshold exactly."""
    values = dict(lung_hu_std=10.0, lesion_hu_std=10.0)
    values.update(overrides)
    return small_spec(**values)


def threshold_model(input_size: int) -> ModelState:
    """Depth-1 U-Net wired to mark pixels that are lung and brighter than LESION_CUT.

    The first encoder conv computes relu(ct + lung - 1 - cut) at the center tap,
    the bottleneck and up path are zeroed, the decoder passes the skip channel
    through and the head saturates the sigmoid.
    """
    model = build_unet(UNetConfig(depth=1, base_filters=1, input_size=input_size))
    net = model.network
    with torch.no_grad():
        for param in net.parameters():
            param.zero_()
        enc = net.encoders[0]
        enc.conv1.weight[0, 0, 1, 1] = 1.0
        enc.conv1.weight[0, 1, 1, 1] = 1.0
        enc.conv1.bias[0] = -(1.0 + LESION_CUT)
        enc.conv2.weight[0, 0, 1, 1] = 1.0
        dec = net.decoders[0]
        dec.conv1.weight[0, 0, 1, 1] = 1.0  # skip channel comes first in the concat
        dec.conv2.weight[0, 0, 1, 1] = 1.0
        net.head.weight[0, 0, 0, 0] = HEAD_GAIN
        net.head.bias[0] = -1.0
    return model


@pytest.fixture
def phantom():
    return synth_volume(small_spec())


@pytest.fixture
def quiet_phantom():
    return synth_volume(quiet_spec(), volume_id="quiet")


@pytest.fixture
def bundle_dir(tmp_path, phantom):
    path = tmp_path / "bundle"
    write_bundle(phantom, path)
    return path


@pytest.fixture
def quiet_bundle_dir(tmp_path, quiet_phantom):
    path = tmp_path / "quiet"
    write_bundle(quiet_phantom, path)
    return path


@pytest.fixture
def oracle_model():
    return threshold_model(48)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
