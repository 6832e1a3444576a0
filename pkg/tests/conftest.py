import numpy as np
import pytest

from stirfry.demo_gen import DemoSpec, gen_follower, gen_leader
from stirfry.transducer import ModelConfig, TransducerModel

TINY = dict(h_em=12, n_layers=1, heads=2, d_ff=16, gcn_hidden=4, dropout=0.0, max_len=512)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def demo_pair():
    spec = DemoSpec()
    leader = gen_leader(spec)
    return spec, leader, gen_follower(leader, spec, noise=False)


@pytest.fixture
def tiny_model():
    return TransducerModel(ModelConfig(seed=3, **TINY))


@pytest.fixture(scope="session")
def dataset_dir(tmp_path_factory):
    from stirfry.demo_gen import gen_dataset

    out = tmp_path_factory.mktemp("data")
    gen_dataset(DemoSpec(), str(out))
    return out
