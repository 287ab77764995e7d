import warnings

import numpy as np
import pytest
import torch

from refinectr.data import SynthConfig
from refinectr.model import ModelConfig, init_params
from refinectr.schema import FeatureSchema, FieldSpec, Role

torch.set_num_threads(1)
warnings.filterwarnings("ignore", message="The given NumPy array is not writable")


def make_schema(n_user=2, n_item=3, n_cross=1, vocab=7):
    fields = [FieldSpec(f"u{j}", Role.USER, vocab) for j in range(n_user)]
    fields += [FieldSpec(f"i{j}", Role.ITEM, vocab) for j in range(n_item)]
    fields += [FieldSpec(f"x{j}", Role.CROSS, vocab) for j in range(n_cross)]
    fields.append(FieldSpec("y", Role.LABEL, 3))
    return FeatureSchema(fields)


@pytest.fixture
def schema():
    return make_schema()


@pytest.fixture
def tiny_params(schema):
    return init_params(schema, ModelConfig(d=8, n_layers=2, n_heads=2), seed=3)


@pytest.fixture
def small_synth():
    return SynthConfig(n_train=600, n_test=300, seed=5)
