import numpy as np
import pytest

from medmimic.harness import load_prepared
from medmimic.io import SyntheticSpec, synth_generate
from medmimic.tensors import FeatureMatrix


@pytest.fixture(scope="session")
def additive_dataset(tmp_path_factory):
    d = tmp_path_factory.mktemp("ds_additive")
    synth_generate(SyntheticSpec(n_patients=60, seed=1), d)
    return load_prepared(d)


@pytest.fixture(scope="session")
def additive_dataset_dir(tmp_path_factory):
    d = tmp_path_factory.mktemp("ds_additive_dir")
    synth_generate(SyntheticSpec(n_patients=60, seed=1), d)
    return d


@pytest.fixture(scope="session")
def xor_dataset(tmp_path_factory):
    d = tmp_path_factory.mktemp("ds_xor")
    synth_generate(
        SyntheticSpec(n_patients=200, interaction_mode="cross_modal_xor", seed=11), d
    )
    return load_prepared(d)


def random_feature_matrix(rng, n_slices, feat_dim):
    return FeatureMatrix(rng.normal(size=(n_slices, feat_dim)))
