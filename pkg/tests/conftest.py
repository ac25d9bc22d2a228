import numpy as np
import pytest
import torch

from priorseg.dataio import AugmentationParams, generate_synthetic, make_partition
from priorseg.segmodel import DecoderSpec, EncoderSpec, FeatureDropoutConfig, build_segmodel

# Desk-scale model: one residual block per stage, narrow stem, 64px inputs.
TINY_ENC = EncoderSpec(depth=10, base_width=8)
TINY_DEC = DecoderSpec(widths=(32, 16, 8, 8, 8))
TINY_DROP = FeatureDropoutConfig(drop_rate=0.5, granularity="channel", level="deepest")
IDENTITY_AUG = AugmentationParams(resize_to=64, crop_to=64, rotation=0.0, scale_range=(1.0, 1.0))


@pytest.fixture(scope="session")
def synth_records():
    return generate_synthetic(40, 64, seed=7)


@pytest.fixture(scope="session")
def synth_split(synth_records):
    return make_partition(synth_records, "1/4", val_count=4, test_count=8, seed=3)


@pytest.fixture
def tiny_model():
    return build_segmodel(TINY_ENC, TINY_DEC, TINY_DROP, seed=11, eval_size=64)


@pytest.fixture
def torch_rng():
    return torch.Generator().manual_seed(0)


@pytest.fixture
def np_rng():
    return np.random.default_rng(0)
